//! Independent reference implementations and simulators shared by the
//! integration tests.
#![allow(dead_code)]

use glycodrive::geo::LocalPoint;
use glycodrive::glmm::{Design, GroupingFactor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

// ---------------------------------------------------------------- simulation

pub fn bernoulli_logit<R: Rng>(rng: &mut R, eta: f64) -> bool {
    rng.gen::<f64>() < 1.0 / (1.0 + (-eta).exp())
}

/// Intercept-only data with one random intercept: `groups × per` rows.
pub fn sim_single<R: Rng>(rng: &mut R, groups: usize, per: usize, beta0: f64, tau: f64) -> Design {
    let normal = Normal::new(0.0, tau.sqrt()).unwrap();
    let mut y = Vec::new();
    let mut labels = Vec::new();
    for g in 0..groups {
        let u = if tau > 0.0 { normal.sample(rng) } else { 0.0 };
        for _ in 0..per {
            y.push(bernoulli_logit(rng, beta0 + u));
            labels.push(format!("g{g:03}"));
        }
    }
    Design::intercept_only(y, vec![GroupingFactor::from_labels("participant", &labels)]).unwrap()
}

/// Crossed participant × intersection data. Every observation draws a
/// participant uniformly and visits intersections round-robin so each
/// intersection is seen `per_intersection` times.
pub fn sim_crossed<R: Rng>(
    rng: &mut R,
    participants: usize,
    intersections: usize,
    per_intersection: usize,
    beta0: f64,
    tau_p: f64,
    tau_i: f64,
) -> (Design, Design) {
    let up: Vec<f64> = (0..participants).map(|_| draw(rng, tau_p)).collect();
    let ui: Vec<f64> = (0..intersections).map(|_| draw(rng, tau_i)).collect();
    let mut y = Vec::new();
    let mut pl = Vec::new();
    let mut il = Vec::new();
    for i in 0..intersections {
        for _ in 0..per_intersection {
            let p = rng.gen_range(0..participants);
            y.push(bernoulli_logit(rng, beta0 + up[p] + ui[i]));
            pl.push(format!("p{p:03}"));
            il.push(format!("i{i:04}"));
        }
    }
    let fp = GroupingFactor::from_labels("participant", &pl);
    let fi = GroupingFactor::from_labels("intersection", &il);
    let reduced = Design::intercept_only(y.clone(), vec![fp.clone()]).unwrap();
    let full = Design::intercept_only(y, vec![fp, fi]).unwrap();
    (reduced, full)
}

fn draw<R: Rng>(rng: &mut R, tau: f64) -> f64 {
    if tau > 0.0 {
        Normal::new(0.0, tau.sqrt()).unwrap().sample(rng)
    } else {
        0.0
    }
}

// ---------------------------------------------------------------- dense algebra

/// Gaussian elimination with partial pivoting on a row-major system.
pub fn solve_dense(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut r = a[i * n..(i + 1) * n].to_vec();
            r.push(b[i]);
            r
        })
        .collect();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, piv);
        for r in 0..n {
            if r != c {
                let f = m[r][c] / m[c][c];
                for k in c..=n {
                    m[r][k] -= f * m[c][k];
                }
            }
        }
    }
    (0..n).map(|i| m[i][n] / m[i][i]).collect()
}

// ---------------------------------------------------------------- plain logistic regression

/// Fixed-effects-only logistic regression by undamped Newton–Raphson.
pub fn logistic_newton(design: &Design) -> Vec<f64> {
    let p = design.n_fixed();
    let mut beta = vec![0.0; p];
    for _ in 0..100 {
        let mut g = vec![0.0; p];
        let mut h = vec![0.0; p * p];
        for i in 0..design.n_obs() {
            let x = design.row(i);
            let eta: f64 = x.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let mu = 1.0 / (1.0 + (-eta).exp());
            let y = if design.response[i] { 1.0 } else { 0.0 };
            for a in 0..p {
                g[a] += x[a] * (y - mu);
                for c in 0..p {
                    h[a * p + c] += mu * (1.0 - mu) * x[a] * x[c];
                }
            }
        }
        let step = solve_dense(&h, &g);
        for (b, s) in beta.iter_mut().zip(&step) {
            *b += s;
        }
        if step.iter().all(|s| s.abs() < 1e-12) {
            break;
        }
    }
    beta
}

// ---------------------------------------------------------------- adaptive Gauss–Hermite quadrature

/// Nodes and weights for `∫ e^{-x²} f(x) dx` (physicists' convention),
/// Newton iteration on the orthonormal Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut z = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j as f64 + 1.0)).sqrt() * p2 - ((j as f64) / (j as f64 + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() < 1e-15 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

fn log1pexp(e: f64) -> f64 {
    if e > 35.0 {
        e
    } else {
        e.exp().ln_1p()
    }
}

/// Marginal log-likelihood of a single-random-intercept logistic model by
/// adaptive Gauss–Hermite quadrature centred on each group's mode.
pub fn aghq_loglik(design: &Design, beta: &[f64], tau: f64, nodes: usize) -> f64 {
    assert_eq!(design.factors.len(), 1);
    let f = &design.factors[0];
    let eta: Vec<f64> = (0..design.n_obs()).map(|i| design.row(i).iter().zip(beta).map(|(a, b)| a * b).sum()).collect();
    let mut members = vec![Vec::new(); f.levels.len()];
    for (i, &l) in f.index.iter().enumerate() {
        members[l].push(i);
    }
    if tau <= 0.0 {
        return (0..design.n_obs())
            .map(|i| if design.response[i] { eta[i] - log1pexp(eta[i]) } else { -log1pexp(eta[i]) })
            .sum();
    }
    let (gx, gw) = gauss_hermite(nodes);
    let log_prior_norm = -0.5 * (2.0 * std::f64::consts::PI * tau).ln();
    let mut total = 0.0;
    for rows in &members {
        let g = |u: f64| -> (f64, f64, f64) {
            let mut v = -0.5 * u * u / tau;
            let mut d1 = -u / tau;
            let mut d2 = -1.0 / tau;
            for &i in rows {
                let e = eta[i] + u;
                let mu = 1.0 / (1.0 + (-e).exp());
                let y = if design.response[i] { 1.0 } else { 0.0 };
                v += y * e - log1pexp(e);
                d1 += y - mu;
                d2 -= mu * (1.0 - mu);
            }
            (v, d1, d2)
        };
        let mut u = 0.0;
        for _ in 0..200 {
            let (_, d1, d2) = g(u);
            let step = (d1 / d2).clamp(-2.0, 2.0);
            u -= step;
            if step.abs() < 1e-13 {
                break;
            }
        }
        let (_, _, d2) = g(u);
        let s = (-1.0 / d2).sqrt();
        let terms: Vec<f64> = gx
            .iter()
            .zip(&gw)
            .map(|(&x, &w)| {
                let uu = u + std::f64::consts::SQRT_2 * s * x;
                w.ln() + x * x + g(uu).0
            })
            .collect();
        let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln();
        total += log_prior_norm + (std::f64::consts::SQRT_2 * s).ln() + lse;
    }
    total
}

/// Maximizes [`aghq_loglik`] over `(β, log τ)` by compass search.
pub fn aghq_fit(design: &Design, nodes: usize) -> (Vec<f64>, f64, f64) {
    let p = design.n_fixed();
    let mut x: Vec<f64> = logistic_newton(design);
    x.push(0.0);
    let f = |x: &[f64]| aghq_loglik(design, &x[..p], x[p].exp(), nodes);
    let mut fx = f(&x);
    let mut step = 0.5;
    while step > 1e-8 {
        let mut improved = false;
        for j in 0..=p {
            for dir in [1.0, -1.0] {
                let mut y = x.clone();
                y[j] += dir * step;
                let fy = f(&y);
                if fy > fx {
                    x = y;
                    fx = fy;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (x[..p].to_vec(), x[p].exp(), fx)
}

// ---------------------------------------------------------------- clustering and medians

/// DBSCAN by exhaustive ε-neighbour graph: clusters are connected components
/// of core points; a border point joins the adjacent component whose
/// smallest core index is lowest.
pub fn dbscan_reference(points: &[LocalPoint], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let nbrs: Vec<Vec<usize>> =
        (0..n).map(|i| (0..n).filter(|&j| points[i].distance(&points[j]) <= eps).collect()).collect();
    let core: Vec<bool> = nbrs.iter().map(|v| v.len() >= min_pts).collect();
    let mut comp = vec![usize::MAX; n];
    for s in 0..n {
        if !core[s] || comp[s] != usize::MAX {
            continue;
        }
        let mut stack = vec![s];
        comp[s] = s;
        while let Some(i) = stack.pop() {
            for &j in &nbrs[i] {
                if core[j] && comp[j] == usize::MAX {
                    comp[j] = s;
                    stack.push(j);
                }
            }
        }
    }
    let raw: Vec<Option<usize>> = (0..n)
        .map(|i| if core[i] { Some(comp[i]) } else { nbrs[i].iter().filter(|&&j| core[j]).map(|&j| comp[j]).min() })
        .collect();
    canonical(&raw)
}

/// Relabels clusters in order of first appearance.
pub fn canonical(labels: &[Option<usize>]) -> Vec<Option<usize>> {
    let mut seen: Vec<usize> = Vec::new();
    labels
        .iter()
        .map(|l| {
            l.map(|c| match seen.iter().position(|&s| s == c) {
                Some(k) => k,
                None => {
                    seen.push(c);
                    seen.len() - 1
                }
            })
        })
        .collect()
}

/// Two-stage grid search for the point minimizing the summed distances:
/// a coarse grid over the bounding box, then a fine grid around the best cell.
pub fn median_grid(points: &[LocalPoint]) -> (f64, f64) {
    let obj = |x: f64, y: f64| points.iter().map(|p| (p.x - x).hypot(p.y - y)).sum::<f64>();
    let (x0, x1) = points.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.x), b.max(p.x)));
    let (y0, y1) = points.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.y), b.max(p.y)));
    let search = |cx: f64, cy: f64, hx: f64, hy: f64, k: usize| {
        let mut best = (f64::MAX, cx, cy);
        for i in 0..=k {
            for j in 0..=k {
                let x = cx - hx + 2.0 * hx * i as f64 / k as f64;
                let y = cy - hy + 2.0 * hy * j as f64 / k as f64;
                let v = obj(x, y);
                if v < best.0 {
                    best = (v, x, y);
                }
            }
        }
        (best.1, best.2)
    };
    let k1 = 200;
    let hx = ((x1 - x0) / 2.0).max(1e-9);
    let hy = ((y1 - y0) / 2.0).max(1e-9);
    let (cx, cy) = search((x0 + x1) / 2.0, (y0 + y1) / 2.0, hx, hy, k1);
    let sx = 2.0 * hx / k1 as f64;
    let sy = 2.0 * hy / k1 as f64;
    search(cx, cy, 2.0 * sx, 2.0 * sy, 1000)
}
