//! Physical infrastructure provider: owns a substrate, negotiates contracts
//! in two stages and embeds them through simulated backends.

mod plugin;
mod service;
mod state;

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::rdl::{CompletionDefaults, RdlError, TopologyGraph};
use crate::solver::{ObjectiveSpec, SearchLimits, SolverError};

pub use plugin::{
    BridgeSim, EmbeddingPlugin, HostSim, ImageCache, ImageOutcome, PluginRegistry, SegmentCtx, SimState, VmRecord,
};
pub(crate) use service::objective_from;
pub use service::{PipService, PIP_METHODS};
pub use state::{
    Contract, ContractState, ModifyReport, PipState, ProvisionAction, RunState, VNodeRuntime,
};

pub const DEFAULT_TTL_MS: u64 = 600_000;

/// Inclusive range of VLAN tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VlanRange {
    pub first: u16,
    pub last: u16,
}

impl VlanRange {
    pub fn new(first: u16, last: u16) -> Self {
        VlanRange { first, last }
    }

    pub fn contains(&self, tag: u16) -> bool {
        (self.first..=self.last).contains(&tag)
    }

    pub fn iter(&self) -> impl Iterator<Item = u16> {
        self.first..=self.last
    }

    pub fn len(&self) -> usize {
        if self.last < self.first {
            0
        } else {
            usize::from(self.last - self.first) + 1
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for VlanRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.first, self.last)
    }
}

#[derive(Debug, Clone)]
pub struct PipConfig {
    pub id: String,
    pub substrate: TopologyGraph,
    pub vlan_pool: VlanRange,
    pub ttl_ms: u64,
    /// Neighbour provider id -> transit link capacity in mbit.
    pub neighbors: BTreeMap<String, f64>,
    pub defaults: CompletionDefaults,
    pub image_cache: bool,
    pub objective: ObjectiveSpec,
    pub limits: SearchLimits,
    pub max_path_len: usize,
}

impl PipConfig {
    pub fn new(id: impl Into<String>, substrate: TopologyGraph) -> Self {
        let mut defaults = CompletionDefaults::default();
        defaults
            .features
            .insert("virtualization".into(), "sim-paravirt".into());
        defaults.features.insert("arch".into(), "amd64".into());
        defaults.features.insert("image".into(), "default".into());
        PipConfig {
            id: id.into(),
            substrate,
            vlan_pool: VlanRange::new(100, 199),
            ttl_ms: DEFAULT_TTL_MS,
            neighbors: BTreeMap::new(),
            defaults,
            image_cache: true,
            objective: ObjectiveSpec::min_congestion(),
            limits: SearchLimits::default(),
            max_path_len: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipError {
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("invalid partial graph: {0}")]
    InvalidPartial(String),
    #[error("completion failed: {0}")]
    Completion(RdlError),
    #[error("unknown neighbour provider {0}")]
    UnknownNeighborPip(String),
    #[error("transit link {0} carries no valid vlan tag")]
    MissingTransitVlan(String),
    #[error("VLAN {tag} requested for {link} is already in use")]
    VlanConflict { tag: u16, link: String },
    #[error("{0}")]
    Infeasible(SolverError),
    #[error("VLAN pool exhausted")]
    VlanExhausted,
    #[error("plugin failed on {ne}: {reason}")]
    PluginFailed { ne: String, reason: String },
    #[error("unknown contract {0}")]
    UnknownContract(String),
    #[error("contract {id} is {state}, not preliminary")]
    NotPreliminary { id: String, state: ContractState },
    #[error("contract {id} is {state}, not confirmed")]
    NotConfirmed { id: String, state: ContractState },
    #[error("contract {id} is already {state}")]
    NotLive { id: String, state: ContractState },
    #[error("unknown vnode {0}")]
    UnknownVNode(String),
    #[error("vnode {0} exists in several contracts; name the contract")]
    AmbiguousVNode(String),
    #[error("configuration: {0}")]
    Config(String),
}

impl PipError {
    /// Status code used on the wire.
    pub fn code(&self) -> &'static str {
        match self {
            PipError::MalformedDocument(_) => "malformed_document",
            PipError::InvalidPartial(_) => "invalid_partial",
            PipError::Completion(_) => "completion_failed",
            PipError::UnknownNeighborPip(_) => "unknown_neighbor_pip",
            PipError::MissingTransitVlan(_) => "missing_transit_vlan",
            PipError::VlanConflict { .. } => "vlan_conflict",
            PipError::Infeasible(_) => "infeasible",
            PipError::VlanExhausted => "vlan_exhausted",
            PipError::PluginFailed { .. } => "plugin_failed",
            PipError::UnknownContract(_) => "unknown_contract",
            PipError::NotPreliminary { .. } => "not_preliminary",
            PipError::NotConfirmed { .. } => "not_confirmed",
            PipError::NotLive { .. } => "not_live",
            PipError::UnknownVNode(_) => "unknown_vnode",
            PipError::AmbiguousVNode(_) => "ambiguous_vnode",
            PipError::Config(_) => "config",
        }
    }
}
