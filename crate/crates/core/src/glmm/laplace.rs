//! Laplace-approximated marginal likelihood for logistic models with one or
//! two crossed random-intercept factors.
//!
//! Random effects use the spherical form `u_k = θ_k b_k`, `b ~ N(0, I)`,
//! `θ_k = sqrt(τ_k)`. The inner objective is
//! `φ(b) = Σ [y η − log(1 + e^η)] − ½‖b‖²` and the approximation is
//! `ℓ ≈ φ(b̂) − ½ log|H|` with `H = ΛZᵀWZΛ + I`.

use std::cell::RefCell;

use super::design::Design;
use super::linalg::Cholesky;
use super::GlmmError;

const INNER_TOL: f64 = 1e-10;
const INNER_MAX_ITER: usize = 100;
/// Joint (β, b) iterates beyond this magnitude signal separation.
pub(crate) const BETA_LIMIT: f64 = 30.0;

pub(crate) fn log1pexp(eta: f64) -> f64 {
    if eta > 35.0 {
        eta
    } else if eta < -35.0 {
        eta.exp()
    } else {
        eta.exp().ln_1p()
    }
}

pub(crate) fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Sparsity pattern of `ZᵀWZ`, fixed per design.
#[derive(Debug, Clone)]
pub(crate) struct Structure {
    /// Position in `b` where each design factor starts.
    pub offsets: Vec<usize>,
    pub q: usize,
    /// Factor stored as the diagonal block.
    big: usize,
    small: Option<usize>,
    /// Observation → (big level, small level) pair id.
    pair_of_obs: Vec<usize>,
    /// Pairs sorted by big level, CSR over big levels.
    pair_small: Vec<usize>,
    pair_ptr: Vec<usize>,
}

impl Structure {
    pub(crate) fn new(design: &Design) -> Self {
        let mut offsets = Vec::with_capacity(design.factors.len());
        let mut q = 0;
        for f in &design.factors {
            offsets.push(q);
            q += f.levels.len();
        }
        let big = (0..design.factors.len())
            .max_by(|&a, &b| design.factors[a].levels.len().cmp(&design.factors[b].levels.len()).then(b.cmp(&a)))
            .unwrap_or(0);
        let small = (0..design.factors.len()).find(|&k| k != big);
        let n_big = design.factors.get(big).map_or(0, |f| f.levels.len());
        let mut keys: Vec<(usize, usize)> = (0..design.n_obs())
            .map(|i| (design.factors[big].index[i], small.map_or(0, |s| design.factors[s].index[i])))
            .collect();
        keys.sort_unstable();
        keys.dedup();
        let mut pair_ptr = vec![0; n_big + 1];
        for &(a, _) in &keys {
            pair_ptr[a + 1] += 1;
        }
        for a in 0..n_big {
            pair_ptr[a + 1] += pair_ptr[a];
        }
        let pair_small = keys.iter().map(|&(_, c)| c).collect();
        let pair_of_obs = (0..design.n_obs())
            .map(|i| {
                let key = (design.factors[big].index[i], small.map_or(0, |s| design.factors[s].index[i]));
                keys.binary_search(&key).expect("pair present")
            })
            .collect();
        Self { offsets, q, big, small, pair_of_obs, pair_small, pair_ptr }
    }
}

/// Factored `H = ΛZᵀWZΛ + I` with the big factor as a diagonal block and a
/// dense Schur complement for the other one.
pub(crate) struct BlockSystem<'s> {
    st: &'s Structure,
    h_big: Vec<f64>,
    /// `H_AB` entries per pair.
    h_pair: Vec<f64>,
    schur: Option<Cholesky>,
    n_small: usize,
}

impl<'s> BlockSystem<'s> {
    pub(crate) fn new(st: &'s Structure, design: &Design, theta: &[f64], w: &[f64]) -> Result<Self, GlmmError> {
        let n_big = st.pair_ptr.len() - 1;
        let tb = theta[st.big];
        let mut h_big = vec![1.0; n_big];
        let mut pair_w = vec![0.0; st.pair_small.len()];
        for (i, &wi) in w.iter().enumerate() {
            pair_w[st.pair_of_obs[i]] += wi;
        }
        for a in 0..n_big {
            let s: f64 = pair_w[st.pair_ptr[a]..st.pair_ptr[a + 1]].iter().sum();
            h_big[a] += tb * tb * s;
        }
        let Some(small) = st.small else {
            return Ok(Self { st, h_big, h_pair: Vec::new(), schur: None, n_small: 0 });
        };
        let ts = theta[small];
        let n_small = design.factors[small].levels.len();
        let mut s = vec![0.0; n_small * n_small];
        for c in 0..n_small {
            s[c * n_small + c] = 1.0;
        }
        for (p, &c) in st.pair_small.iter().enumerate() {
            s[c * n_small + c] += ts * ts * pair_w[p];
        }
        let h_pair: Vec<f64> = pair_w.iter().map(|&v| tb * ts * v).collect();
        for a in 0..n_big {
            let range = st.pair_ptr[a]..st.pair_ptr[a + 1];
            for p in range.clone() {
                let cp = st.pair_small[p];
                let vp = h_pair[p] / h_big[a];
                for r in range.clone() {
                    s[cp * n_small + st.pair_small[r]] -= vp * h_pair[r];
                }
            }
        }
        let schur = Cholesky::new(&s, n_small)
            .ok_or_else(|| GlmmError::NumericalFailure("random-effects precision not positive definite".into()))?;
        Ok(Self { st, h_big, h_pair, schur: Some(schur), n_small })
    }

    pub(crate) fn logdet(&self) -> f64 {
        self.h_big.iter().map(|h| h.ln()).sum::<f64>() + self.schur.as_ref().map_or(0.0, |c| c.logdet())
    }

    /// Solves `H x = r` with `r` in design factor order.
    pub(crate) fn solve(&self, r: &[f64]) -> Vec<f64> {
        let st = self.st;
        let ob = st.offsets[st.big];
        let n_big = self.h_big.len();
        let mut x = vec![0.0; r.len()];
        let Some(small) = st.small else {
            for a in 0..n_big {
                x[ob + a] = r[ob + a] / self.h_big[a];
            }
            return x;
        };
        let os = st.offsets[small];
        let mut rb: Vec<f64> = r[os..os + self.n_small].to_vec();
        for a in 0..n_big {
            let ra = r[ob + a] / self.h_big[a];
            for p in st.pair_ptr[a]..st.pair_ptr[a + 1] {
                rb[st.pair_small[p]] -= self.h_pair[p] * ra;
            }
        }
        self.schur.as_ref().expect("two factors").solve_in_place(&mut rb);
        for a in 0..n_big {
            let mut v = r[ob + a];
            for p in st.pair_ptr[a]..st.pair_ptr[a + 1] {
                v -= self.h_pair[p] * rb[st.pair_small[p]];
            }
            x[ob + a] = v / self.h_big[a];
        }
        x[os..os + self.n_small].copy_from_slice(&rb);
        x
    }
}

#[derive(Debug, Clone)]
pub(crate) struct InnerMode {
    pub b: Vec<f64>,
    pub phi: f64,
    pub logdet: f64,
}

impl InnerMode {
    pub(crate) fn laplace(&self) -> f64 {
        self.phi - 0.5 * self.logdet
    }
}

pub(crate) struct Engine<'a> {
    pub design: &'a Design,
    pub st: Structure,
    b_cache: RefCell<Vec<f64>>,
}

impl<'a> Engine<'a> {
    pub(crate) fn new(design: &'a Design) -> Self {
        let st = Structure::new(design);
        let q = st.q;
        Self { design, st, b_cache: RefCell::new(vec![0.0; q]) }
    }

    pub(crate) fn eta(&self, beta: &[f64], theta: &[f64], b: &[f64]) -> Vec<f64> {
        let d = self.design;
        (0..d.n_obs())
            .map(|i| {
                let mut e: f64 = d.row(i).iter().zip(beta).map(|(x, bb)| x * bb).sum();
                for (k, f) in d.factors.iter().enumerate() {
                    e += theta[k] * b[self.st.offsets[k] + f.index[i]];
                }
                e
            })
            .collect()
    }

    pub(crate) fn phi(&self, eta: &[f64], b: &[f64]) -> f64 {
        let ll: f64 =
            eta.iter().zip(&self.design.response).map(|(&e, &y)| if y { e - log1pexp(e) } else { -log1pexp(e) }).sum();
        ll - 0.5 * b.iter().map(|v| v * v).sum::<f64>()
    }

    /// `(∂φ/∂β, ∂φ/∂b)` and the working weights at `eta`.
    pub(crate) fn gradient(&self, eta: &[f64], theta: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.design;
        let p = d.n_fixed();
        let mut gbeta = vec![0.0; p];
        let mut gb: Vec<f64> = b.iter().map(|v| -v).collect();
        let mut w = Vec::with_capacity(eta.len());
        for (i, &e) in eta.iter().enumerate() {
            let mu = logistic(e);
            w.push(mu * (1.0 - mu));
            let r = if d.response[i] { 1.0 - mu } else { -mu };
            for (g, x) in gbeta.iter_mut().zip(d.row(i)) {
                *g += x * r;
            }
            for (k, f) in d.factors.iter().enumerate() {
                gb[self.st.offsets[k] + f.index[i]] += theta[k] * r;
            }
        }
        (gbeta, gb, w)
    }

    /// Mode of φ over `b` for fixed `(β, θ)`, by Newton with step halving.
    pub(crate) fn inner_mode(&self, beta: &[f64], theta: &[f64], b0: &[f64]) -> Result<InnerMode, GlmmError> {
        let mut b = b0.to_vec();
        let mut eta = self.eta(beta, theta, &b);
        let mut phi = self.phi(&eta, &b);
        if !phi.is_finite() {
            b.iter_mut().for_each(|v| *v = 0.0);
            eta = self.eta(beta, theta, &b);
            phi = self.phi(&eta, &b);
        }
        for _ in 0..INNER_MAX_ITER {
            let (_, gb, w) = self.gradient(&eta, theta, &b);
            let sys = BlockSystem::new(&self.st, self.design, theta, &w)?;
            let delta = sys.solve(&gb);
            let size = delta.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let cand: Vec<f64> = b.iter().zip(&delta).map(|(x, d)| x + step * d).collect();
                let ce = self.eta(beta, theta, &cand);
                let cp = self.phi(&ce, &cand);
                if cp >= phi - 1e-12 * (1.0 + phi.abs()) {
                    b = cand;
                    eta = ce;
                    phi = cp;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted || size * step < INNER_TOL {
                break;
            }
        }
        let (_, _, w) = self.gradient(&eta, theta, &b);
        let sys = BlockSystem::new(&self.st, self.design, theta, &w)?;
        Ok(InnerMode { logdet: sys.logdet(), b, phi })
    }

    /// Laplace log-likelihood at `(β, θ)`, warm-starting the inner solve.
    pub(crate) fn laplace(&self, beta: &[f64], theta: &[f64]) -> Result<f64, GlmmError> {
        let b0 = self.b_cache.borrow().clone();
        let m = self.inner_mode(beta, theta, &b0)?;
        let v = m.laplace();
        *self.b_cache.borrow_mut() = m.b;
        Ok(v)
    }

    /// Fixed-effects information `XᵀWX − CᵀH⁻¹C` with `C = ΛZᵀWX`
    /// (row-major `p × p`) for the system at weights `w`.
    fn information(&self, theta: &[f64], w: &[f64], sys: &BlockSystem) -> (Vec<f64>, Vec<Vec<f64>>) {
        let d = self.design;
        let p = d.n_fixed();
        let q = self.st.q;
        let mut m = vec![0.0; p * p];
        let mut c = vec![vec![0.0; q]; p];
        for i in 0..d.n_obs() {
            let x = d.row(i);
            for a in 0..p {
                let wa = w[i] * x[a];
                for bcol in 0..p {
                    m[a * p + bcol] += wa * x[bcol];
                }
                for (k, f) in d.factors.iter().enumerate() {
                    c[a][self.st.offsets[k] + f.index[i]] += theta[k] * wa;
                }
            }
        }
        let hinv_c: Vec<Vec<f64>> = c.iter().map(|col| sys.solve(col)).collect();
        for a in 0..p {
            for bcol in 0..p {
                m[a * p + bcol] -= c[a].iter().zip(&hinv_c[bcol]).map(|(u, v)| u * v).sum::<f64>();
            }
        }
        (m, hinv_c)
    }

    /// Conditional fixed-effects information at `(β, θ)` with `b` at its mode.
    pub(crate) fn fixed_information(&self, beta: &[f64], theta: &[f64], b: &[f64]) -> Result<Vec<f64>, GlmmError> {
        let eta = self.eta(beta, theta, b);
        let (_, _, w) = self.gradient(&eta, theta, b);
        let sys = BlockSystem::new(&self.st, self.design, theta, &w)?;
        Ok(self.information(theta, &w, &sys).0)
    }

    /// Joint maximizer of φ over `(β, b)` for fixed `θ`.
    pub(crate) fn joint_mode(
        &self,
        theta: &[f64],
        beta0: &[f64],
        b0: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), GlmmError> {
        let p = self.design.n_fixed();
        let mut beta = beta0.to_vec();
        let mut b = b0.to_vec();
        let mut eta = self.eta(&beta, theta, &b);
        let mut phi = self.phi(&eta, &b);
        for _ in 0..INNER_MAX_ITER {
            let (gbeta, gb, w) = self.gradient(&eta, theta, &b);
            let sys = BlockSystem::new(&self.st, self.design, theta, &w)?;
            let (m, hinv_c) = self.information(theta, &w, &sys);
            let chol = Cholesky::new(&m, p)
                .ok_or_else(|| GlmmError::NumericalFailure("singular fixed-effects information".into()))?;
            let hinv_gb = sys.solve(&gb);
            let rhs: Vec<f64> =
                (0..p).map(|a| gbeta[a] - hinv_c[a].iter().zip(&gb).map(|(u, v)| u * v).sum::<f64>()).collect();
            let dbeta = chol.solve(&rhs);
            let db: Vec<f64> =
                (0..self.st.q).map(|j| hinv_gb[j] - (0..p).map(|a| hinv_c[a][j] * dbeta[a]).sum::<f64>()).collect();
            let size = dbeta.iter().chain(&db).fold(0.0_f64, |mx, v| mx.max(v.abs()));
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let nb: Vec<f64> = beta.iter().zip(&dbeta).map(|(x, d)| x + step * d).collect();
                let nu: Vec<f64> = b.iter().zip(&db).map(|(x, d)| x + step * d).collect();
                let ne = self.eta(&nb, theta, &nu);
                let np = self.phi(&ne, &nu);
                if np >= phi - 1e-12 * (1.0 + phi.abs()) {
                    beta = nb;
                    b = nu;
                    eta = ne;
                    phi = np;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if beta.iter().any(|v| v.abs() > BETA_LIMIT) {
                return Err(GlmmError::NumericalFailure("unbounded fixed effects".into()));
            }
            if !accepted || size * step < INNER_TOL {
                break;
            }
        }
        Ok((beta, b))
    }
}

/// Penalized joint log-likelihood `φ(β, b)` at variance components `tau`.
pub fn penalized_loglik(design: &Design, beta: &[f64], tau: &[f64], b: &[f64]) -> f64 {
    let engine = Engine::new(design);
    let theta = theta_of(tau);
    engine.phi(&engine.eta(beta, &theta, b), b)
}

/// Analytic gradient of [`penalized_loglik`]: `(∂/∂β, ∂/∂b)`.
pub fn penalized_gradient(design: &Design, beta: &[f64], tau: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let engine = Engine::new(design);
    let theta = theta_of(tau);
    let (gbeta, gb, _) = engine.gradient(&engine.eta(beta, &theta, b), &theta, b);
    (gbeta, gb)
}

/// Laplace-approximated marginal log-likelihood at `(β, τ)`.
pub fn laplace_loglik(design: &Design, beta: &[f64], tau: &[f64]) -> Result<f64, GlmmError> {
    if beta.len() != design.n_fixed() || tau.len() != design.factors.len() {
        return Err(GlmmError::InvalidDesign("parameter length does not match design".into()));
    }
    Engine::new(design).laplace(beta, &theta_of(tau))
}

pub(crate) fn theta_of(tau: &[f64]) -> Vec<f64> {
    tau.iter().map(|t| t.max(0.0).sqrt()).collect()
}
