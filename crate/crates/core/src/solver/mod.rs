//! Exact embedding of request graphs onto a substrate.
//!
//! The model: each request node picks one substrate node from its candidate
//! set, each request link picks one enumerated simple substrate path between
//! the hosts of its endpoints. Node resources are charged to the host, link
//! bandwidth to every element on the path that declares bandwidth. The search
//! is a depth-first branch and bound that visits nodes by id and candidates
//! by substrate id, so among equally good embeddings the lexicographically
//! first one wins.

mod check;
mod mapping;
mod migration;
mod problem;
mod search;

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use thiserror::Error;

use crate::rdl::{Layer, ResourceKind, ValidationReport};

pub use check::{check_solution, solution_violations};
pub use mapping::{EntryClass, MappingEntry, MappingLayer, Segment};
pub use migration::{analyze_migration, to_mapping_layer, LinkRemap, MigrationPlan, NodeMove};
pub use problem::{
    build_problem, candidate_ok, enumerate_paths, Capacities, Capacity, CandidatePolicy, EmbeddingProblem,
    ProblemBuilder, ProblemOptions, SubstratePath,
};
pub use search::solve;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveMode {
    /// Minimize the highest utilisation over all substrate elements and kinds.
    MinCongestion,
    /// Minimize the number of substrate nodes hosting request nodes.
    Compact,
    /// Weighted sum of host count and migration cost.
    MigrationAware,
}

impl ObjectiveMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveMode::MinCongestion => "min-congestion",
            ObjectiveMode::Compact => "compact",
            ObjectiveMode::MigrationAware => "migration-aware",
        }
    }
}

impl std::str::FromStr for ObjectiveMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "min-congestion" => Ok(ObjectiveMode::MinCongestion),
            "compact" => Ok(ObjectiveMode::Compact),
            "migration-aware" => Ok(ObjectiveMode::MigrationAware),
            _ => Err(format!("unknown objective {s:?}")),
        }
    }
}

/// Objective value = `alpha * placement + beta * migration_cost`, where
/// placement is the congestion (MinCongestion) or the host count (Compact,
/// MigrationAware). Ties fall back to migration cost, then congestion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSpec {
    pub mode: ObjectiveMode,
    pub alpha: f64,
    pub beta: f64,
}

impl ObjectiveSpec {
    pub fn min_congestion() -> Self {
        ObjectiveSpec {
            mode: ObjectiveMode::MinCongestion,
            alpha: 1.0,
            beta: 0.0,
        }
    }

    pub fn compact() -> Self {
        ObjectiveSpec {
            mode: ObjectiveMode::Compact,
            alpha: 1.0,
            beta: 0.0,
        }
    }

    pub fn migration_aware(alpha: f64, beta: f64) -> Self {
        ObjectiveSpec {
            mode: ObjectiveMode::MigrationAware,
            alpha,
            beta,
        }
    }

    pub fn validate(&self, has_prior: bool) -> Result<(), SolverError> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if !ok(self.alpha) || !ok(self.beta) {
            return Err(SolverError::InvalidObjective("weights must be non-negative"));
        }
        if self.alpha + self.beta <= 0.0 {
            return Err(SolverError::InvalidObjective("alpha + beta must be positive"));
        }
        if self.mode == ObjectiveMode::MigrationAware && !has_prior {
            return Err(SolverError::InvalidObjective("migration-aware objective needs a prior mapping"));
        }
        Ok(())
    }

    /// Placement term of the objective.
    pub fn placement(&self, congestion: f64, hosts_used: usize) -> f64 {
        match self.mode {
            ObjectiveMode::MinCongestion => congestion,
            ObjectiveMode::Compact | ObjectiveMode::MigrationAware => hosts_used as f64,
        }
    }

    pub fn value(&self, congestion: f64, hosts_used: usize, migration_cost: f64) -> f64 {
        self.alpha * self.placement(congestion, hosts_used) + self.beta * migration_cost
    }
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        ObjectiveSpec::min_congestion()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchLimits {
    pub max_nodes_expanded: u64,
    pub time_budget: Duration,
}

impl Default for SearchLimits {
    fn default() -> Self {
        SearchLimits {
            max_nodes_expanded: 50_000_000,
            time_budget: Duration::from_secs(60),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InfeasibleReason {
    /// No candidate host has enough residual capacity left.
    NoFittingCandidate,
    /// No candidate path between the chosen hosts has enough bandwidth.
    NoFeasiblePath,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InfeasibleWitness {
    pub element: String,
    pub reason: InfeasibleReason,
}

impl fmt::Display for InfeasibleWitness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.reason {
            InfeasibleReason::NoFittingCandidate => write!(f, "no candidate can host {}", self.element),
            InfeasibleReason::NoFeasiblePath => write!(f, "no feasible path for {}", self.element),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("substrate graph must be UL, got {0}")]
    NotSubstrate(Layer),
    #[error("request graph must be OL1, got {0}")]
    NotCompleted(Layer),
    #[error("{graph} graph is invalid: {report}")]
    InvalidGraph { graph: &'static str, report: ValidationReport },
    #[error("negative residual capacity on {0}")]
    InvalidCapacities(String),
    #[error("invalid objective: {0}")]
    InvalidObjective(&'static str),
    #[error("invalid prior mapping: {0}")]
    InvalidPrior(String),
    #[error("no candidates for {0}")]
    NoCandidates(String),
    #[error("infeasible: {0}")]
    Infeasible(InfeasibleWitness),
    #[error("search budget exceeded after {expanded} expansions")]
    BudgetExceeded {
        expanded: u64,
        best: Option<Box<EmbeddingSolution>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSolution {
    pub node_assign: BTreeMap<String, String>,
    pub link_assign: BTreeMap<String, SubstratePath>,
    pub objective_value: f64,
    /// Highest utilisation over all substrate elements and kinds.
    pub congestion: f64,
    pub hosts_used: usize,
    pub migration_cost: f64,
    /// Declared resources of substrate nodes the prior used and this
    /// solution no longer does.
    pub freed_resources: BTreeMap<ResourceKind, f64>,
}
