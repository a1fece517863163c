mod support;

use glycodrive::cgm::EpisodeLabel;
use glycodrive::encounters::BehaviorRow;
use glycodrive::glmm::{
    build_partitions, cooks_distance, cooks_for_group, fit_design, icc, laplace_loglik, lrt_compare,
    penalized_gradient, penalized_loglik, r_squared, summarize_fit, Design, FitControls, GroupingFactor, Partition,
    SIGMA2_LOGISTIC,
};
use glycodrive::ingest::ParticipantType;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::*;

fn crossed_with_slope(seed: u64) -> Design {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 80;
    let mut y = Vec::new();
    let mut x = Vec::new();
    let mut g = Vec::new();
    let mut h = Vec::new();
    for i in 0..n {
        let z = rng.gen_range(-1.0..1.0);
        y.push(bernoulli_logit(&mut rng, 0.3 + 0.8 * z));
        x.extend([1.0, z]);
        g.push(format!("g{}", rng.gen_range(0..8)));
        h.push(format!("h{}", i % 5));
    }
    Design::new(
        y,
        x,
        vec!["(Intercept)".into(), "z".into()],
        vec![GroupingFactor::from_labels("participant", &g), GroupingFactor::from_labels("intersection", &h)],
    )
    .unwrap()
}

#[test]
fn penalized_gradient_matches_finite_differences() {
    let d = crossed_with_slope(11);
    let q: usize = d.factors.iter().map(|f| f.levels.len()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let beta: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tau: Vec<f64> = (0..2).map(|_| rng.gen_range(0.2..2.0)).collect();
        let b: Vec<f64> = (0..q).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (gbeta, gb) = penalized_gradient(&d, &beta, &tau, &b);
        let h = 1e-6;
        let fd = |f: &dyn Fn(f64) -> f64| (f(h) - f(-h)) / (2.0 * h);
        for j in 0..2 {
            let num = fd(&|e| {
                let mut bb = beta.clone();
                bb[j] += e;
                penalized_loglik(&d, &bb, &tau, &b)
            });
            assert!((num - gbeta[j]).abs() <= 1e-5 * num.abs().max(1.0), "β[{j}]: {num} vs {}", gbeta[j]);
        }
        for k in 0..q {
            let num = fd(&|e| {
                let mut bb = b.clone();
                bb[k] += e;
                penalized_loglik(&d, &beta, &tau, &bb)
            });
            assert!((num - gb[k]).abs() <= 1e-5 * num.abs().max(1.0), "b[{k}]: {num} vs {}", gb[k]);
        }
    }
}

fn relabeled(d: &Design, perm: &[usize]) -> Design {
    let factors = d
        .factors
        .iter()
        .map(|f| {
            let labels: Vec<String> = perm.iter().map(|&i| format!("x-{}", f.levels[f.index[i]])).collect();
            GroupingFactor::from_labels(&f.name, &labels)
        })
        .collect();
    let p = d.n_fixed();
    let x = perm.iter().flat_map(|&i| d.x[i * p..(i + 1) * p].to_vec()).collect();
    let y = perm.iter().map(|&i| d.response[i]).collect();
    Design::new(y, x, d.fixed_names.clone(), factors).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn laplace_invariant_to_labels_and_row_order(seed in 0u64..1000, beta in -1.0f64..1.0, t1 in 0.0f64..2.0, t2 in 0.0f64..2.0) {
        let d = crossed_with_slope(seed);
        let mut perm: Vec<usize> = (0..d.n_obs()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let a = laplace_loglik(&d, &[beta, 0.5], &[t1, t2]).unwrap();
        let b = laplace_loglik(&relabeled(&d, &perm), &[beta, 0.5], &[t1, t2]).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn summary_identities(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = sim_single(&mut rng, 12, 20, 0.4, 1.0);
        let fit = fit_design(&d, &FitControls::default()).unwrap();
        let s = summarize_fit(&fit);
        prop_assert_eq!(s.sigma2_residual, SIGMA2_LOGISTIC);
        prop_assert!((s.icc - icc(&fit.tau)).abs() < 1e-15);
        prop_assert!((0.0..1.0).contains(&s.icc));
        prop_assert!(s.r2_marginal <= s.r2_conditional + 1e-15);
        let row = &s.or_table[0];
        prop_assert!(row.ci_low <= row.odds_ratio && row.odds_ratio <= row.ci_high);
        prop_assert!((row.odds_ratio.ln() - row.beta).abs() < 1e-12);
        prop_assert_eq!(s.n_obs, d.n_obs());
    }

    #[test]
    fn lrt_statistic_nonnegative(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (reduced, full) = sim_crossed(&mut rng, 8, 15, 4, 0.2, 0.8, 0.3);
        let c = FitControls::default();
        let r = lrt_compare(&fit_design(&reduced, &c).unwrap(), &fit_design(&full, &c).unwrap()).unwrap();
        prop_assert!(r.chi2 >= 0.0 && (0.0..=1.0).contains(&r.p));
        prop_assert!(r.raw > -1e-4, "raw statistic {}", r.raw);
    }

    #[test]
    fn partitions_are_subsets(rows in prop::collection::vec((0usize..4, 0usize..6, any::<bool>(), any::<bool>()), 0..60)) {
        let episodes = [
            EpisodeLabel::Hypo,
            EpisodeLabel::Normal,
            EpisodeLabel::ModerateHyper,
            EpisodeLabel::SevereHyper,
            EpisodeLabel::Missing,
            EpisodeLabel::Control,
        ];
        let rows: Vec<BehaviorRow> = rows
            .into_iter()
            .map(|(p, e, control, y)| BehaviorRow {
                participant_id: format!("p{p}"),
                intersection_id: "i".into(),
                participant_type: if control { ParticipantType::Control } else { ParticipantType::T1dm },
                episode: if control { EpisodeLabel::Control } else { episodes[e] },
                unsafe_stop: y,
            })
            .collect();
        let set = build_partitions(&rows);
        let all = set.get(Partition::DmAll).clone().unwrap_or_default();
        for (p, part) in set.iter() {
            let part = part.clone().unwrap_or_default();
            prop_assert!(part.iter().all(|r| all.contains(r)), "{:?} not within dm_all", p);
            prop_assert!(part.iter().all(|r| r.episode != EpisodeLabel::ModerateHyper && r.episode != EpisodeLabel::Missing));
        }
        let dm = set.get(Partition::Dm).clone().unwrap_or_default();
        prop_assert!(dm.iter().all(|r| r.participant_type == ParticipantType::T1dm));
        let norm = set.get(Partition::DmNorm).clone().unwrap_or_default();
        prop_assert!(norm.iter().all(|r| matches!(r.episode, EpisodeLabel::Normal | EpisodeLabel::Control)));
    }
}

#[test]
fn large_tau_profile_beats_boundary() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let d = sim_single(&mut rng, 20, 30, 0.0, 4.0);
    let fit = fit_design(&d, &FitControls::default()).unwrap();
    assert!(fit.tau[0] > 1.0, "τ̂ = {}", fit.tau[0]);
    let at_zero = logistic_newton(&d);
    let ll0 = laplace_loglik(&d, &at_zero, &[0.0]).unwrap();
    assert!(fit.loglik > ll0 + 1.0, "{} vs {ll0}", fit.loglik);
}

#[test]
fn variance_decomposition_sums() {
    let (m, c) = r_squared(0.7, &[0.9, 0.4]);
    assert!((c - (0.7 + 1.3) / (0.7 + 1.3 + SIGMA2_LOGISTIC)).abs() < 1e-15);
    assert!((m - 0.7 / (2.0 + SIGMA2_LOGISTIC)).abs() < 1e-15);
    assert_eq!(cooks_distance(&[0.3, -0.2], &[0.3, -0.2], &[2.0, 0.1, 0.1, 1.0]), 0.0);
}

#[test]
fn empty_group_deletion_is_noop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = sim_single(&mut rng, 10, 20, 0.5, 1.0);
    let c = FitControls::default();
    let fit = fit_design(&d, &c).unwrap();
    assert_eq!(cooks_for_group(&d, &fit, "participant", "no-such-group", &c).unwrap(), 0.0);
}

#[test]
fn cooks_grows_with_group_replication() {
    // one high-rate group whose rows are replicated k times
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let base = sim_single(&mut rng, 10, 20, 0.0, 0.5);
    let c = FitControls::default();
    let mut ds = Vec::new();
    for k in 1..=4 {
        let mut y = base.response.clone();
        let mut labels: Vec<String> =
            base.factors[0].index.iter().map(|&i| base.factors[0].levels[i].clone()).collect();
        for _ in 0..k {
            for j in 0..20 {
                y.push(j % 5 != 0);
                labels.push("z".into());
            }
        }
        let d = Design::intercept_only(y, vec![GroupingFactor::from_labels("participant", &labels)]).unwrap();
        let fit = fit_design(&d, &c).unwrap();
        ds.push(cooks_for_group(&d, &fit, "participant", "z", &c).unwrap());
    }
    assert!(ds.windows(2).all(|w| w[1] > w[0] && w[1] / w[0] < 4.0), "{ds:?}");
}

#[test]
fn laplace_is_one_node_adaptive_quadrature() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(3_000 + seed);
        let d = sim_single(&mut rng, 30, 50, 1.0, 2.0);
        for (beta, tau) in [(0.5, 0.5), (1.0, 2.0), (1.8, 3.0)] {
            let laplace = laplace_loglik(&d, &[beta], &[tau]).unwrap();
            let q1 = aghq_loglik(&d, &[beta], tau, 1);
            assert!((laplace - q1).abs() < 1e-8, "seed {seed}: {laplace} vs {q1}");
            // the quadrature itself has converged, so the Laplace gap is approximation error
            let (q15, q25) = (aghq_loglik(&d, &[beta], tau, 15), aghq_loglik(&d, &[beta], tau, 25));
            assert!((q15 - q25).abs() < 1e-3 * (laplace - q25).abs(), "{q15} vs {q25} (laplace {laplace})");
        }
    }
}
