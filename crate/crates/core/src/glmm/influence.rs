//! Group-deletion Cook's distance.

use std::thread;

use serde::{Deserialize, Serialize};

use super::design::Design;
use super::fit::fit_design_from;
use super::linalg::quad_form;
use super::{FitControls, GlmmError, MelrFit, ModelSpec, RandomFactor};
use crate::encounters::BehaviorRow;

pub const COOKS_THRESHOLD: f64 = 0.5;

pub fn is_influential(d: f64) -> bool {
    d > COOKS_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupInfluence {
    pub group: String,
    pub n_rows: usize,
    /// `None` when the refit failed.
    pub cooks_d: Option<f64>,
    pub flagged: bool,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub grouping: String,
    pub groups: Vec<GroupInfluence>,
    pub flagged: Vec<String>,
}

impl InfluenceReport {
    pub fn get(&self, group: &str) -> Option<&GroupInfluence> {
        self.groups.iter().find(|g| g.group == group)
    }

    pub fn max_d(&self) -> Option<(&str, f64)> {
        self.groups.iter().filter_map(|g| g.cooks_d.map(|d| (g.group.as_str(), d))).max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// `(β − β₍₋g₎)ᵀ V⁻¹ (β − β₍₋g₎) / p` with `information = V⁻¹` row-major.
pub fn cooks_distance(beta: &[f64], beta_deleted: &[f64], information: &[f64]) -> f64 {
    let delta: Vec<f64> = beta.iter().zip(beta_deleted).map(|(a, b)| a - b).collect();
    (quad_form(information, &delta) / beta.len() as f64).max(0.0)
}

/// Cook's distance for deleting `group` of factor `factor`; a group with no
/// rows leaves the fit unchanged.
pub fn cooks_for_group(
    design: &Design,
    fit: &MelrFit,
    factor: &str,
    group: &str,
    controls: &FitControls,
) -> Result<f64, GlmmError> {
    let k = design
        .factor_index(factor)
        .ok_or_else(|| GlmmError::InvalidSpec(format!("`{factor}` is not a grouping factor of the fit")))?;
    let Some(level) = design.factors[k].levels.iter().position(|l| l == group) else {
        return Ok(0.0);
    };
    let info = fit
        .information()
        .ok_or_else(|| GlmmError::NumericalFailure("fixed-effects covariance not positive definite".into()))?;
    let reduced = design.without_level(k, level);
    let refit = fit_design_from(&reduced, controls, Some(fit))
        .map_err(|e| GlmmError::RefitFailure { group: group.to_string(), reason: e.to_string() })?;
    Ok(cooks_distance(&fit.beta, &refit.beta, &info))
}

/// Deletes each group of `factor` in turn. Refits run on worker threads and
/// are reported in level order.
pub fn cooks_groups_design(
    design: &Design,
    fit: &MelrFit,
    factor: &str,
    controls: &FitControls,
) -> Result<InfluenceReport, GlmmError> {
    let k = design
        .factor_index(factor)
        .ok_or_else(|| GlmmError::InvalidSpec(format!("`{factor}` is not a grouping factor of the fit")))?;
    fit.information()
        .ok_or_else(|| GlmmError::NumericalFailure("fixed-effects covariance not positive definite".into()))?;
    let levels = &design.factors[k].levels;
    let counts = design.factors[k].counts();
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(levels.len()).max(1);
    let mut results: Vec<Option<Result<f64, GlmmError>>> = vec![None; levels.len()];
    thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || {
                    (w..levels.len())
                        .step_by(workers)
                        .map(|l| (l, cooks_for_group(design, fit, factor, &levels[l], controls)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (l, r) in h.join().expect("influence worker panicked") {
                results[l] = Some(r);
            }
        }
    });
    let groups: Vec<GroupInfluence> = levels
        .iter()
        .zip(results)
        .zip(counts)
        .map(|((group, r), n_rows)| match r.expect("every level computed") {
            Ok(d) => GroupInfluence {
                group: group.clone(),
                n_rows,
                cooks_d: Some(d),
                flagged: is_influential(d),
                failure: None,
            },
            Err(e) => GroupInfluence {
                group: group.clone(),
                n_rows,
                cooks_d: None,
                flagged: false,
                failure: Some(e.to_string()),
            },
        })
        .collect();
    let flagged = groups.iter().filter(|g| g.flagged).map(|g| g.group.clone()).collect();
    Ok(InfluenceReport { grouping: factor.to_string(), groups, flagged })
}

pub fn cooks_groups(
    rows: &[BehaviorRow],
    spec: &ModelSpec,
    fit: &MelrFit,
    grouping: RandomFactor,
    controls: &FitControls,
) -> Result<InfluenceReport, GlmmError> {
    if !spec.random_factors.contains(&grouping) {
        return Err(GlmmError::InvalidSpec(format!("`{}` is not a random factor of the model", grouping.as_str())));
    }
    let design = spec.design(rows)?;
    cooks_groups_design(&design, fit, grouping.as_str(), controls)
}
