//! Mixed-effects logistic regression with crossed random intercepts.
//!
//! Fits maximize a Laplace-approximated marginal likelihood. Summaries give
//! Wald odds ratios, the latent-scale ICC and marginal/conditional R².
//! Nested random-effect structures are compared by likelihood ratio and
//! group-deletion Cook's distances flag influential participants or
//! intersections.

mod design;
mod fit;
mod influence;
mod laplace;
pub(crate) mod linalg;
pub(crate) mod optim;
mod partitions;
mod summary;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cgm::EpisodeLabel;
use crate::encounters::BehaviorRow;
use crate::ingest::ParticipantType;

pub use design::{Design, GroupingFactor};
pub use fit::{fit_design, fit_design_from, fit_melr};
pub use influence::{
    cooks_distance, cooks_for_group, cooks_groups, cooks_groups_design, is_influential, GroupInfluence,
    InfluenceReport, COOKS_THRESHOLD,
};
pub use laplace::{laplace_loglik, penalized_gradient, penalized_loglik};
pub use partitions::{build_partitions, partition_rows, PartitionSet};
pub use summary::{icc, lrt_compare, r_squared, summarize_fit, wald_row, FitSummary, LrtResult, OddsRow, Z_975};

/// Residual variance of the standard logistic distribution.
pub const SIGMA2_LOGISTIC: f64 = PI * PI / 3.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlmmError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("partition `{partition}` has no rows")]
    EmptyPartition { partition: String },
    #[error("fixed factor `{factor}` needs at least 2 levels, found {found}")]
    TooFewLevels { factor: String, found: usize },
    #[error("reference level `{level}` is not present")]
    MissingReference { level: String },
    #[error("random factor `{factor}` has a single group")]
    DegenerateGroups { factor: String },
    #[error("complete separation at `{level}`")]
    CompleteSeparation { level: String },
    #[error("models are not nested: {0}")]
    NotNested(String),
    #[error("refit without group `{group}` failed: {reason}")]
    RefitFailure { group: String, reason: String },
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedFactor {
    ParticipantType,
    EpisodeType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomFactor {
    Participant,
    Intersection,
}

impl RandomFactor {
    pub fn as_str(&self) -> &'static str {
        match self {
            RandomFactor::Participant => "participant",
            RandomFactor::Intersection => "intersection",
        }
    }

    fn label<'r>(&self, row: &'r BehaviorRow) -> &'r str {
        match self {
            RandomFactor::Participant => &row.participant_id,
            RandomFactor::Intersection => &row.intersection_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    DmAll,
    DmNorm,
    All,
    Dm,
}

impl Partition {
    pub const ALL: [Partition; 4] = [Partition::DmAll, Partition::DmNorm, Partition::All, Partition::Dm];

    pub fn as_str(&self) -> &'static str {
        match self {
            Partition::DmAll => "dm_all",
            Partition::DmNorm => "dm_norm",
            Partition::All => "all",
            Partition::Dm => "dm",
        }
    }

    /// Disease partitions model participant type; acute-physiology ones model episode.
    pub fn fixed_factor(&self) -> FixedFactor {
        match self {
            Partition::DmAll | Partition::DmNorm => FixedFactor::ParticipantType,
            Partition::All | Partition::Dm => FixedFactor::EpisodeType,
        }
    }

    pub fn reference_level(&self) -> &'static str {
        match self {
            Partition::Dm => "normal",
            _ => "control",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub fixed_factor: FixedFactor,
    pub reference_level: String,
    pub random_factors: Vec<RandomFactor>,
    pub partition: Partition,
}

impl ModelSpec {
    pub fn for_partition(partition: Partition, random_factors: &[RandomFactor]) -> Self {
        Self {
            fixed_factor: partition.fixed_factor(),
            reference_level: partition.reference_level().to_string(),
            random_factors: random_factors.to_vec(),
            partition,
        }
    }

    pub fn validate(&self) -> Result<(), GlmmError> {
        if !self.random_factors.contains(&RandomFactor::Participant) {
            return Err(GlmmError::InvalidSpec("random factors must include participant".into()));
        }
        let mut seen = self.random_factors.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.random_factors.len() {
            return Err(GlmmError::InvalidSpec("duplicate random factor".into()));
        }
        Ok(())
    }

    fn level_of(&self, row: &BehaviorRow) -> &'static str {
        match self.fixed_factor {
            FixedFactor::ParticipantType => row.participant_type.as_str(),
            FixedFactor::EpisodeType => row.episode.as_str(),
        }
    }

    fn canonical_levels(&self) -> Vec<&'static str> {
        match self.fixed_factor {
            FixedFactor::ParticipantType => vec![ParticipantType::Control.as_str(), ParticipantType::T1dm.as_str()],
            FixedFactor::EpisodeType => [
                EpisodeLabel::Control,
                EpisodeLabel::Hypo,
                EpisodeLabel::Normal,
                EpisodeLabel::ModerateHyper,
                EpisodeLabel::SevereHyper,
                EpisodeLabel::Missing,
            ]
            .iter()
            .map(|e| e.as_str())
            .collect(),
        }
    }

    /// Treatment-coded design: intercept plus one indicator per non-reference level.
    pub fn design(&self, rows: &[BehaviorRow]) -> Result<Design, GlmmError> {
        self.validate()?;
        if rows.is_empty() {
            return Err(GlmmError::EmptyPartition { partition: self.partition.as_str().into() });
        }
        let present: Vec<&str> =
            self.canonical_levels().into_iter().filter(|l| rows.iter().any(|r| self.level_of(r) == *l)).collect();
        if !present.contains(&self.reference_level.as_str()) {
            return Err(GlmmError::MissingReference { level: self.reference_level.clone() });
        }
        if present.len() < 2 {
            let factor = match self.fixed_factor {
                FixedFactor::ParticipantType => "participant_type",
                FixedFactor::EpisodeType => "episode",
            };
            return Err(GlmmError::TooFewLevels { factor: factor.into(), found: present.len() });
        }
        let others: Vec<&str> = present.into_iter().filter(|l| *l != self.reference_level).collect();
        let mut fixed_names = vec!["(Intercept)".to_string()];
        fixed_names.extend(others.iter().map(|l| l.to_string()));
        let mut x = Vec::with_capacity(rows.len() * fixed_names.len());
        for r in rows {
            x.push(1.0);
            let lvl = self.level_of(r);
            x.extend(others.iter().map(|o| if *o == lvl { 1.0 } else { 0.0 }));
        }
        let factors = self
            .random_factors
            .iter()
            .map(|f| {
                let labels: Vec<&str> = rows.iter().map(|r| f.label(r)).collect();
                GroupingFactor::from_labels(f.as_str(), &labels)
            })
            .collect();
        Design::new(rows.iter().map(|r| r.unsafe_stop).collect(), x, fixed_names, factors)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitControls {
    /// Gradient-norm threshold for declaring convergence.
    pub tol: f64,
    /// Objective evaluations allowed per optimization stage.
    pub max_iter: usize,
}

impl Default for FitControls {
    fn default() -> Self {
        Self { tol: 1e-4, max_iter: 4000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomModes {
    pub factor: String,
    pub levels: Vec<String>,
    /// Conditional modes on the log-odds scale.
    pub modes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelrFit {
    pub fixed_names: Vec<String>,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    /// Row-major covariance of `beta`.
    pub vcov: Vec<f64>,
    pub factor_names: Vec<String>,
    pub tau: Vec<f64>,
    pub sigma2_residual: f64,
    /// Sample variance of the fixed-effect linear predictor.
    pub sigma2_fixed: f64,
    pub loglik: f64,
    pub converged: bool,
    pub gradient_norm: f64,
    pub n_obs: usize,
    pub n_groups: Vec<usize>,
    pub random_modes: Vec<RandomModes>,
    /// Order-independent hash of (response, fixed design) rows.
    pub data_fingerprint: u64,
}

impl MelrFit {
    pub fn n_fixed(&self) -> usize {
        self.beta.len()
    }

    pub fn tau_of(&self, factor: &str) -> Option<f64> {
        self.factor_names.iter().position(|f| f == factor).map(|k| self.tau[k])
    }

    /// Inverse of `vcov`, the fixed-effects information.
    pub fn information(&self) -> Option<Vec<f64>> {
        linalg::Cholesky::new(&self.vcov, self.n_fixed()).map(|c| c.inverse())
    }
}
