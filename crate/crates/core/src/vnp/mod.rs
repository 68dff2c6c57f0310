//! Virtual network provider: brokers CloudNet requests across providers it
//! only knows as aggregates.

mod endpoint;
mod partial;
mod service;

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use thiserror::Error;

use crate::pip::VlanRange;
use crate::rdl::{CompletionDefaults, RdlError, ResourceKind, TopologyGraph};
use crate::solver::{MappingLayer, SearchLimits, SolverError};

pub use endpoint::{DownPip, LocalPip, PipEndpoint, RemotePip, WireLog, WireRecord};
pub use partial::{generate_partials, stub_id, CrossLink, Partition};
pub use service::{
    complete_graph, map_cloudnet, plans_from_envelope, record_envelope, record_from_envelope, PipPlan, SubmitOutcome,
    VnpService, VnpState, VNP_METHODS,
};

#[derive(Debug, Clone)]
pub struct VnpConfig {
    /// Provider id -> wire address.
    pub pips: BTreeMap<String, String>,
    /// Provider nodes (`/node/host/pip`, id = provider id) and the
    /// `/link/transit` links between them.
    pub transit: TopologyGraph,
    pub transit_vlans: VlanRange,
    pub defaults: CompletionDefaults,
    pub limits: SearchLimits,
    pub timeout: Duration,
}

impl VnpConfig {
    pub fn new(transit: TopologyGraph) -> Self {
        let mut defaults = CompletionDefaults::default();
        defaults.resources.insert(ResourceKind::Ram, 256.0);
        defaults.resources.insert(ResourceKind::Cpu, 1.0);
        defaults.features.insert("arch".into(), "amd64".into());
        defaults
            .features
            .insert("virtualization".into(), "sim-paravirt".into());
        defaults.features.insert("image".into(), "default".into());
        VnpConfig {
            pips: BTreeMap::new(),
            transit,
            transit_vlans: VlanRange::new(2000, 2099),
            defaults,
            limits: SearchLimits::default(),
            timeout: Duration::from_secs(10),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudNetState {
    Mapping,
    Negotiating,
    Confirmed,
    Failed,
    Deleted,
}

impl CloudNetState {
    pub fn as_str(self) -> &'static str {
        match self {
            CloudNetState::Mapping => "mapping",
            CloudNetState::Negotiating => "negotiating",
            CloudNetState::Confirmed => "confirmed",
            CloudNetState::Failed => "failed",
            CloudNetState::Deleted => "deleted",
        }
    }
}

impl fmt::Display for CloudNetState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CloudNetState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "mapping" => CloudNetState::Mapping,
            "negotiating" => CloudNetState::Negotiating,
            "confirmed" => CloudNetState::Confirmed,
            "failed" => CloudNetState::Failed,
            "deleted" => CloudNetState::Deleted,
            _ => return Err(format!("unknown cloudnet state {s:?}")),
        })
    }
}

/// Pipeline stage a submission failed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Validate,
    Sync,
    Complete,
    Map,
    Partition,
    Embed,
    Finalize,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Validate => "validate",
            Stage::Sync => "sync",
            Stage::Complete => "complete",
            Stage::Map => "map",
            Stage::Partition => "partition",
            Stage::Embed => "embed",
            Stage::Finalize => "finalize",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipPart {
    pub partial: TopologyGraph,
    pub contract: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudNetRecord {
    pub id: String,
    pub ol0: TopologyGraph,
    pub ol1: Option<TopologyGraph>,
    pub vnp_mapping: Option<MappingLayer>,
    pub per_pip: BTreeMap<String, PipPart>,
    pub transit_tags: BTreeMap<String, u16>,
    pub tokens: BTreeMap<String, String>,
    pub state: CloudNetState,
    pub failure: Option<String>,
}

impl CloudNetRecord {
    /// Provider hosting each request node.
    pub fn placement(&self) -> BTreeMap<String, String> {
        self.vnp_mapping
            .as_ref()
            .map(|ml| {
                ml.node_entries()
                    .map(|(k, e)| (k.clone(), e.segments[0].ul_ne_id.clone()))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn contracts(&self) -> impl Iterator<Item = (&String, &String)> {
        self.per_pip
            .iter()
            .filter_map(|(p, part)| Some((p, part.contract.as_ref()?)))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VnpError {
    #[error("unknown cloudnet {0}")]
    UnknownCloudNet(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("completion failed: {0}")]
    Completion(RdlError),
    #[error("{0}")]
    Infeasible(SolverError),
    #[error("transit VLAN pool exhausted")]
    TransitVlanExhausted,
    #[error("rolled back after {pip} failed: {cause}")]
    RolledBack { pip: String, cause: String },
    #[error("rollback incomplete ({cause}); retained contracts: {}", fmt_retained(.retained))]
    RollbackIncomplete {
        cause: String,
        retained: Vec<(String, String)>,
    },
    #[error("confirmation failed at {pip}: {cause}")]
    ConfirmFailed { pip: String, cause: String },
    #[error("cloudnet {id} is {state}")]
    WrongState { id: String, state: CloudNetState },
    #[error("provider {pip}: {cause}")]
    Provider { pip: String, cause: String },
    #[error("configuration: {0}")]
    Config(String),
}

fn fmt_retained(r: &[(String, String)]) -> String {
    r.iter().map(|(p, c)| format!("{p}/{c}")).collect::<Vec<_>>().join(", ")
}

impl VnpError {
    pub fn code(&self) -> &'static str {
        match self {
            VnpError::UnknownCloudNet(_) => "unknown_cloudnet",
            VnpError::InvalidRequest(_) => "invalid_request",
            VnpError::Completion(_) => "completion_failed",
            VnpError::Infeasible(_) => "infeasible",
            VnpError::TransitVlanExhausted => "transit_vlan_exhausted",
            VnpError::RolledBack { .. } => "rolled_back",
            VnpError::RollbackIncomplete { .. } => "rollback_incomplete",
            VnpError::ConfirmFailed { .. } => "confirm_failed",
            VnpError::WrongState { .. } => "wrong_state",
            VnpError::Provider { .. } => "provider_error",
            VnpError::Config(_) => "config",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{id} failed at stage {stage}: {error}")]
pub struct SubmitError {
    pub id: String,
    pub stage: Stage,
    pub error: VnpError,
}
