//! Wald odds-ratio tables, variance decompositions and likelihood-ratio
//! comparison of nested random-effect structures.

use log::warn;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use super::{GlmmError, MelrFit, SIGMA2_LOGISTIC};

/// 97.5% standard normal quantile.
pub const Z_975: f64 = 1.959963984540054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OddsRow {
    pub term: String,
    pub beta: f64,
    pub se: f64,
    pub odds_ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub z: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub or_table: Vec<OddsRow>,
    pub sigma2_residual: f64,
    /// (factor, τ₀₀) pairs.
    pub tau: Vec<(String, f64)>,
    pub icc: f64,
    /// (factor, number of groups) pairs.
    pub n_groups: Vec<(String, usize)>,
    pub n_obs: usize,
    pub r2_marginal: f64,
    pub r2_conditional: f64,
    pub loglik: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrtResult {
    pub chi2: f64,
    pub df: usize,
    pub p: f64,
    /// Unclamped `2Δℓ`.
    pub raw: f64,
}

/// Wald odds ratio, 95% interval and two-sided p for one coefficient.
pub fn wald_row(term: &str, beta: f64, se: f64) -> OddsRow {
    let z = beta / se;
    let p = 2.0 * Normal::new(0.0, 1.0).expect("standard normal").cdf(-z.abs());
    OddsRow {
        term: term.to_string(),
        beta,
        se,
        odds_ratio: beta.exp(),
        ci_low: (beta - Z_975 * se).exp(),
        ci_high: (beta + Z_975 * se).exp(),
        z,
        p,
    }
}

/// Latent-scale intraclass correlation `Στ / (Στ + π²/3)`.
pub fn icc(tau: &[f64]) -> f64 {
    let s: f64 = tau.iter().sum();
    s / (s + SIGMA2_LOGISTIC)
}

/// Marginal and conditional R² from the fixed-effect variance and τ.
pub fn r_squared(sigma2_fixed: f64, tau: &[f64]) -> (f64, f64) {
    let s: f64 = tau.iter().sum();
    let denom = sigma2_fixed + s + SIGMA2_LOGISTIC;
    (sigma2_fixed / denom, (sigma2_fixed + s) / denom)
}

pub fn summarize_fit(fit: &MelrFit) -> FitSummary {
    let (r2_marginal, r2_conditional) = r_squared(fit.sigma2_fixed, &fit.tau);
    FitSummary {
        or_table: fit
            .fixed_names
            .iter()
            .zip(fit.beta.iter().zip(&fit.se))
            .map(|(n, (&b, &s))| wald_row(n, b, s))
            .collect(),
        sigma2_residual: fit.sigma2_residual,
        tau: fit.factor_names.iter().cloned().zip(fit.tau.iter().copied()).collect(),
        icc: icc(&fit.tau),
        n_groups: fit.factor_names.iter().cloned().zip(fit.n_groups.iter().copied()).collect(),
        n_obs: fit.n_obs,
        r2_marginal,
        r2_conditional,
        loglik: fit.loglik,
        converged: fit.converged,
    }
}

/// Likelihood-ratio test of `reduced` against `full`, with no boundary correction.
pub fn lrt_compare(reduced: &MelrFit, full: &MelrFit) -> Result<LrtResult, GlmmError> {
    if reduced.fixed_names != full.fixed_names {
        return Err(GlmmError::NotNested("fixed effects differ".into()));
    }
    if reduced.n_obs != full.n_obs || reduced.data_fingerprint != full.data_fingerprint {
        return Err(GlmmError::NotNested("fits use different rows".into()));
    }
    if let Some(extra) = reduced.factor_names.iter().find(|f| !full.factor_names.contains(f)) {
        return Err(GlmmError::NotNested(format!("factor `{extra}` missing from the full model")));
    }
    let df = full.factor_names.len() - reduced.factor_names.len();
    let raw = 2.0 * (full.loglik - reduced.loglik);
    if raw < -1e-6 {
        warn!("likelihood ratio statistic {raw:.3e} is negative; a fit may not have converged");
    }
    let chi2 = raw.max(0.0);
    let p = if df == 0 { 1.0 } else { ChiSquared::new(df as f64).expect("positive df").sf(chi2) };
    Ok(LrtResult { chi2, df, p, raw })
}
