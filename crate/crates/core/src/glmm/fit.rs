//! Outer optimization of the Laplace likelihood over `(β, log τ)`.

use log::{debug, warn};

use super::design::Design;
use super::laplace::{Engine, BETA_LIMIT};
use super::linalg::Cholesky;
use super::optim::{fd_gradient, fd_hessian, NelderMead};
use super::{FitControls, GlmmError, MelrFit, ModelSpec, RandomModes, SIGMA2_LOGISTIC};
use crate::encounters::BehaviorRow;

/// log τ bounds; τ below `exp(RHO_MIN)` is numerically zero.
pub(crate) const RHO_MIN: f64 = -18.420680743952367;
pub(crate) const RHO_MAX: f64 = 6.907755278982137;
const TAU_STARTS: [f64; 3] = [0.1, 1.0, 4.0];
/// Variance components below this are pinned to the floor during polishing.
const TAU_ACTIVE: f64 = 1e-3;
const GRAD_STEP: f64 = 1e-4;
const HESS_STEP: f64 = 1e-3;
const POLISH_ITER: usize = 30;

pub fn fit_melr(rows: &[BehaviorRow], spec: &ModelSpec, controls: &FitControls) -> Result<MelrFit, GlmmError> {
    let design = spec.design(rows)?;
    fit_design(&design, controls)
}

pub fn fit_design(design: &Design, controls: &FitControls) -> Result<MelrFit, GlmmError> {
    fit_design_from(design, controls, None)
}

/// Fits `design`, optionally warm-starting the variance components and
/// fixed effects from an earlier fit with the same terms.
pub fn fit_design_from(design: &Design, controls: &FitControls, start: Option<&MelrFit>) -> Result<MelrFit, GlmmError> {
    validate(design)?;
    let engine = Engine::new(design);
    let p = design.n_fixed();
    let k = design.factors.len();
    let q = engine.st.q;

    let beta_glm = match engine.joint_mode(&vec![0.0; k], &vec![0.0; p], &vec![0.0; q]) {
        Ok((beta, _)) if beta.iter().all(|b| b.abs() < BETA_LIMIT) => beta,
        _ => return Err(GlmmError::CompleteSeparation { level: diverging_column(design, &engine) }),
    };

    let starts: Vec<Vec<f64>> = match start.filter(|s| s.fixed_names == design.fixed_names && s.tau.len() == k) {
        Some(s) => vec![s.tau.iter().map(|&t| t.max(1e-6).ln().clamp(RHO_MIN, RHO_MAX)).collect()],
        None => TAU_STARTS.iter().map(|&t| vec![t.ln(); k]).collect(),
    };

    // stage 1: profile over log τ with β at the joint mode
    let mut best: Option<(Vec<f64>, f64)> = None;
    for rho0 in starts {
        let mut beta_w = beta_glm.clone();
        let mut b_w = vec![0.0; q];
        let nm = NelderMead {
            steps: vec![1.0; k],
            lower: vec![RHO_MIN; k],
            upper: vec![RHO_MAX; k],
            ftol: 1e-10,
            xtol: 1e-4,
            max_evals: controls.max_iter,
        };
        let m = nm.minimize(&rho0, |rho| {
            let theta = theta_of_rho(rho);
            match engine.joint_mode(&theta, &beta_w, &b_w) {
                Ok((beta, b)) => {
                    let v = engine.laplace(&beta, &theta).map(|l| -l).unwrap_or(f64::INFINITY);
                    beta_w = beta;
                    b_w = b;
                    v
                }
                Err(_) => f64::INFINITY,
            }
        });
        debug!("stage 1 from {:?}: f = {} after {} evals", rho0, m.f, m.evals);
        if best.as_ref().is_none_or(|(_, f)| m.f < *f) {
            best = Some((m.x, m.f));
        }
    }
    let (rho, _) = best.expect("at least one start");
    let theta = theta_of_rho(&rho);
    let (beta, _) = engine
        .joint_mode(&theta, &beta_glm, &vec![0.0; q])
        .map_err(|_| GlmmError::CompleteSeparation { level: diverging_column(design, &engine) })?;

    let objective = |x: &[f64]| -> f64 {
        let theta = theta_of_rho(&x[p..]);
        engine.laplace(&x[..p], &theta).map(|l| -l).unwrap_or(f64::INFINITY)
    };
    let mut x: Vec<f64> = beta.iter().chain(&rho).copied().collect();
    let mut f = objective(&x);

    let (mut xp, mut fp, mut gnorm) = polish(&objective, x.clone(), f, p, controls.tol);
    if gnorm >= controls.tol {
        // stage 2: full Laplace search over (β, log τ), then polish again
        let mut lower = vec![-2.0 * BETA_LIMIT; p];
        lower.extend(vec![RHO_MIN; k]);
        let mut upper = vec![2.0 * BETA_LIMIT; p];
        upper.extend(vec![RHO_MAX; k]);
        let mut steps = vec![0.2; p];
        steps.extend(vec![0.5; k]);
        let nm = NelderMead { steps, lower, upper, ftol: 1e-12, xtol: 1e-6, max_evals: controls.max_iter };
        let start = if fp < f { xp.clone() } else { x.clone() };
        let m = nm.minimize(&start, |y| objective(y));
        debug!("stage 2: f = {} after {} evals (converged: {})", m.f, m.evals, m.converged);
        x = m.x;
        f = m.f;
        let (x2, f2, g2) = polish(&objective, x.clone(), f, p, controls.tol);
        if f2 <= fp || g2 < gnorm {
            xp = x2;
            fp = f2;
            gnorm = g2;
        }
    }
    if !fp.is_finite() {
        return Err(GlmmError::NumericalFailure("likelihood not finite at the optimum".into()));
    }
    let converged = gnorm < controls.tol;
    if !converged {
        warn!("fit did not converge: gradient norm {gnorm:.3e} ≥ {:.1e}", controls.tol);
    }
    finish(design, &engine, &xp, fp, gnorm, converged)
}

fn validate(design: &Design) -> Result<(), GlmmError> {
    if design.n_obs() == 0 {
        return Err(GlmmError::InvalidDesign("no observations".into()));
    }
    for f in &design.factors {
        if f.levels.len() < 2 {
            return Err(GlmmError::DegenerateGroups { factor: f.name.clone() });
        }
    }
    let p = design.n_fixed();
    let n = design.n_obs();
    let mut xtx = vec![0.0; p * p];
    for i in 0..n {
        let r = design.row(i);
        for a in 0..p {
            for b in 0..p {
                xtx[a * p + b] += r[a] * r[b];
            }
        }
    }
    if Cholesky::new(&xtx, p).is_none_or(|c| c.logdet() < (p as f64) * (1e-10_f64).ln()) {
        let absent = (0..p).find(|&j| (0..n).all(|i| design.row(i)[j] == 0.0));
        return Err(match absent {
            Some(j) => GlmmError::TooFewLevels { factor: design.fixed_names[j].clone(), found: 0 },
            None => GlmmError::InvalidDesign("fixed-effect columns are collinear".into()),
        });
    }
    if let Some(level) = design.separated_level() {
        return Err(GlmmError::CompleteSeparation { level });
    }
    Ok(())
}

/// Name of the column whose plain-logistic coefficient runs away.
fn diverging_column(design: &Design, engine: &Engine) -> String {
    let p = design.n_fixed();
    let k = design.factors.len();
    let mut beta = vec![0.0; p];
    let zeros_t = vec![0.0; k];
    let zeros_b = vec![0.0; engine.st.q];
    let step = 4.0 / design.n_obs() as f64;
    for _ in 0..200 {
        let eta = engine.eta(&beta, &zeros_t, &zeros_b);
        let (g, _, _) = engine.gradient(&eta, &zeros_t, &zeros_b);
        for (b, gi) in beta.iter_mut().zip(&g) {
            *b += step * gi;
        }
    }
    let start = if p > 1 { 1 } else { 0 };
    let j = (start..p).max_by(|&a, &b| beta[a].abs().total_cmp(&beta[b].abs())).unwrap_or(0);
    design.fixed_names[j].clone()
}

pub(crate) fn theta_of_rho(rho: &[f64]) -> Vec<f64> {
    rho.iter().map(|r| (0.5 * r).exp()).collect()
}

/// Newton polishing with finite-difference derivatives. Returns the point,
/// its objective and the final gradient norm over all coordinates.
fn polish<F: Fn(&[f64]) -> f64>(f: &F, mut x: Vec<f64>, mut fx: f64, p: usize, tol: f64) -> (Vec<f64>, f64, f64) {
    let n = x.len();
    let mut call = |y: &[f64]| f(y);
    // pin negligible variance components to the floor when that does not hurt
    for j in p..n {
        if x[j].exp() < TAU_ACTIVE && x[j] > RHO_MIN {
            let mut y = x.clone();
            y[j] = RHO_MIN;
            let fy = call(&y);
            if fy <= fx {
                x = y;
                fx = fy;
            }
        }
    }
    let all: Vec<usize> = (0..n).collect();
    let mut g_all = fd_gradient(&mut call, &x, &all, GRAD_STEP);
    for _ in 0..POLISH_ITER {
        if projected_norm(&g_all, &x, p) < 0.01 * tol {
            break;
        }
        let free: Vec<usize> = (0..n).filter(|&j| j < p || x[j].exp() >= TAU_ACTIVE).collect();
        let m = free.len();
        let g: Vec<f64> = free.iter().map(|&j| g_all[j]).collect();
        let h = fd_hessian(&mut call, &x, &free, HESS_STEP);
        let mut ridge = 0.0;
        let chol = loop {
            let mut hr = h.clone();
            for a in 0..m {
                hr[a * m + a] += ridge;
            }
            if let Some(c) = Cholesky::new(&hr, m) {
                break Some(c);
            }
            ridge =
                if ridge == 0.0 { 1e-6 * (1.0 + h.iter().fold(0.0_f64, |a, v| a.max(v.abs()))) } else { ridge * 10.0 };
            if ridge > 1e12 {
                break None;
            }
        };
        let Some(chol) = chol else { break };
        let step: Vec<f64> = chol.solve(&g).iter().map(|v| -v).collect();
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let mut y = x.clone();
            for (a, &j) in free.iter().enumerate() {
                y[j] += t * step[a];
                if j >= p {
                    y[j] = y[j].clamp(RHO_MIN, RHO_MAX);
                }
            }
            let fy = call(&y);
            if fy < fx || (fy <= fx + 1e-13 * (1.0 + fx.abs()) && t == 1.0) {
                x = y;
                fx = fy;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        g_all = fd_gradient(&mut call, &x, &all, GRAD_STEP);
        if !improved {
            break;
        }
    }
    let gn = projected_norm(&g_all, &x, p);
    (x, fx, gn)
}

/// Gradient norm ignoring log τ components pushing into the lower bound.
fn projected_norm(g: &[f64], x: &[f64], p: usize) -> f64 {
    g.iter()
        .enumerate()
        .map(|(j, &v)| if j >= p && x[j] <= RHO_MIN && v > 0.0 { 0.0 } else { v })
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

fn finish(
    design: &Design,
    engine: &Engine,
    x: &[f64],
    f: f64,
    gnorm: f64,
    converged: bool,
) -> Result<MelrFit, GlmmError> {
    let p = design.n_fixed();
    let beta = x[..p].to_vec();
    let rho = &x[p..];
    let theta = theta_of_rho(rho);
    let tau: Vec<f64> = rho.iter().map(|r| if *r <= RHO_MIN { 0.0 } else { r.exp() }).collect();
    let mode = engine.inner_mode(&beta, &theta, &vec![0.0; engine.st.q])?;
    let info = engine.fixed_information(&beta, &theta, &mode.b)?;
    let vcov = Cholesky::new(&info, p)
        .ok_or_else(|| GlmmError::NumericalFailure("fixed-effects information not positive definite".into()))?
        .inverse();
    let se = (0..p).map(|a| vcov[a * p + a].sqrt()).collect();
    let linpred: Vec<f64> =
        (0..design.n_obs()).map(|i| design.row(i).iter().zip(&beta).map(|(a, b)| a * b).sum()).collect();
    let n = linpred.len();
    let sigma2_fixed = if n < 2 {
        0.0
    } else {
        let mean = linpred.iter().sum::<f64>() / n as f64;
        linpred.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    };
    let random_modes = design
        .factors
        .iter()
        .enumerate()
        .map(|(k, fac)| {
            let off = engine.st.offsets[k];
            RandomModes {
                factor: fac.name.clone(),
                levels: fac.levels.clone(),
                modes: (0..fac.levels.len()).map(|l| theta[k] * mode.b[off + l]).collect(),
            }
        })
        .collect();
    Ok(MelrFit {
        fixed_names: design.fixed_names.clone(),
        beta,
        se,
        vcov,
        factor_names: design.factors.iter().map(|f| f.name.clone()).collect(),
        tau,
        sigma2_residual: SIGMA2_LOGISTIC,
        sigma2_fixed,
        loglik: -f,
        converged,
        gradient_norm: gnorm,
        n_obs: design.n_obs(),
        n_groups: design.factors.iter().map(|f| f.levels.len()).collect(),
        random_modes,
        data_fingerprint: design.fingerprint(),
    })
}
