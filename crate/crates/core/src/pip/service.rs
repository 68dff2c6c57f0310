use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};

use log::error;

use crate::clock::Clock;
use crate::codec::{deserialize_graph, serialize_graph};
use crate::journal::Journal;
use crate::rdl::{ResourceKind, TopologyGraph};
use crate::solver::{ObjectiveMode, ObjectiveSpec};
use crate::wire::{Envelope, Handler, RemoteFailure};

use super::state::{ModifyReport, PipState, ProvisionAction, RunState};
use super::{PipConfig, PipError};

pub const PIP_METHODS: [&str; 9] = [
    "sync_resources",
    "negotiate_preliminary",
    "negotiate_modify",
    "negotiate_confirm",
    "negotiate_delete",
    "provision_start",
    "provision_stop",
    "provision_powercycle",
    "console_lookup",
];

/// A provider daemon's core: one state behind a lock that serializes every
/// mutation, plus the clock and the durable log.
pub struct PipService {
    state: RwLock<PipState>,
    clock: Arc<dyn Clock>,
    journal: Option<Mutex<Journal>>,
}

fn objective_fields(env: Envelope, objective: Option<ObjectiveSpec>) -> Envelope {
    match objective {
        None => env,
        Some(o) => env
            .field("objective", o.mode.as_str())
            .field("alpha", o.alpha)
            .field("beta", o.beta),
    }
}

pub(crate) fn objective_from(env: &Envelope) -> Result<Option<ObjectiveSpec>, String> {
    let Some(mode) = env.get("objective") else {
        return Ok(None);
    };
    let mode: ObjectiveMode = mode.parse()?;
    let weight = |k: &str, d: f64| -> Result<f64, String> {
        env.get(k)
            .map_or(Ok(d), |v| v.parse().map_err(|_| format!("bad {k} {v:?}")))
    };
    let (alpha, beta) = match mode {
        ObjectiveMode::MigrationAware => (weight("alpha", 1.0)?, weight("beta", 1.0)?),
        _ => (weight("alpha", 1.0)?, weight("beta", 0.0)?),
    };
    Ok(Some(ObjectiveSpec { mode, alpha, beta }))
}

fn graph_doc(g: &TopologyGraph) -> Vec<u8> {
    serialize_graph(g).expect("accepted graphs serialize")
}

fn parse_graph(bytes: &[u8]) -> Result<TopologyGraph, PipError> {
    deserialize_graph(bytes).map_err(|e| PipError::MalformedDocument(e.to_string()))
}

impl PipService {
    pub fn new(config: PipConfig, clock: Arc<dyn Clock>) -> Result<PipService, PipError> {
        Ok(PipService {
            state: RwLock::new(PipState::new(config)?),
            clock,
            journal: None,
        })
    }

    /// Opens (or creates) the durable log in `dir` and replays it.
    pub fn with_journal(config: PipConfig, clock: Arc<dyn Clock>, dir: &Path) -> Result<PipService, PipError> {
        let journal = Journal::open(dir).map_err(|e| PipError::Config(e.to_string()))?;
        let mut state = PipState::new(config)?;
        for entry in journal.entries().map_err(|e| PipError::Config(e.to_string()))? {
            let env = Envelope::decode(&entry.payload).map_err(PipError::Config)?;
            replay(&mut state, &entry.event, entry.ts, &env)
                .map_err(|e| PipError::Config(format!("journal replay of {} failed: {e}", entry.event)))?;
        }
        Ok(PipService {
            state: RwLock::new(state),
            clock,
            journal: Some(Mutex::new(journal)),
        })
    }

    pub fn id(&self) -> String {
        self.read().id().to_string()
    }

    /// Consistent snapshot for read-only callers.
    pub fn read(&self) -> RwLockReadGuard<'_, PipState> {
        self.state.read().unwrap_or_else(|p| p.into_inner())
    }

    fn write(&self) -> RwLockWriteGuard<'_, PipState> {
        self.state.write().unwrap_or_else(|p| p.into_inner())
    }

    /// Direct access for fault injection in tests and tooling.
    pub fn with_state<R>(&self, f: impl FnOnce(&mut PipState) -> R) -> R {
        f(&mut self.write())
    }

    fn log(&self, ts: u64, event: &str, env: Envelope) {
        if let Some(j) = &self.journal {
            let mut j = j.lock().unwrap_or_else(|p| p.into_inner());
            if let Err(e) = j.append(ts, event, &env.encode()) {
                error!("journal append failed: {e}");
            }
        }
    }

    /// Runs due expiries and returns the lock and the current time.
    fn begin(&self) -> (RwLockWriteGuard<'_, PipState>, u64) {
        let mut st = self.write();
        let now = self.clock.now_ms();
        if !st.expire_tick(now).is_empty() {
            self.log(now, "expire", Envelope::new());
        }
        (st, now)
    }

    pub fn tick(&self) -> Vec<String> {
        let mut st = self.write();
        let now = self.clock.now_ms();
        let expired = st.expire_tick(now);
        if !expired.is_empty() {
            self.log(now, "expire", Envelope::new());
        }
        expired
    }

    pub fn sync_resources(&self) -> BTreeMap<ResourceKind, f64> {
        self.read().sync_resources()
    }

    /// Returns the contract id and its expiry time.
    pub fn negotiate_preliminary(&self, partial: &TopologyGraph) -> Result<(String, u64), PipError> {
        let (mut st, now) = self.begin();
        let id = st.negotiate_preliminary(partial, now)?;
        self.log(now, "preliminary", Envelope::new().doc("partial", graph_doc(partial)));
        let expires = st.contract(&id).and_then(|c| c.expires_at).unwrap_or(now);
        Ok((id, expires))
    }

    pub fn negotiate_confirm(&self, id: &str) -> Result<(), PipError> {
        let (mut st, now) = self.begin();
        st.negotiate_confirm(id)?;
        self.log(now, "confirm", Envelope::new().field("contract", id));
        Ok(())
    }

    pub fn negotiate_delete(&self, id: &str) -> Result<(), PipError> {
        let (mut st, now) = self.begin();
        st.negotiate_delete(id)?;
        self.log(now, "delete", Envelope::new().field("contract", id));
        Ok(())
    }

    pub fn negotiate_modify(
        &self,
        id: &str,
        partial: Option<&TopologyGraph>,
        objective: Option<ObjectiveSpec>,
        apply: bool,
    ) -> Result<ModifyReport, PipError> {
        let (mut st, now) = self.begin();
        let report = st.negotiate_modify(id, partial, objective, apply)?;
        if report.applied {
            let mut env = objective_fields(Envelope::new().field("contract", id), objective);
            if let Some(p) = partial {
                env = env.doc("partial", graph_doc(p));
            }
            self.log(now, "modify", env);
        }
        Ok(report)
    }

    pub fn provision(&self, action: ProvisionAction, vnode: &str, contract: Option<&str>) -> Result<RunState, PipError> {
        let (mut st, now) = self.begin();
        let state = st.provision(action, vnode, contract)?;
        let mut env = Envelope::new().field("action", action.as_str()).field("vnode", vnode);
        if let Some(c) = contract {
            env = env.field("contract", c);
        }
        self.log(now, "provision", env);
        Ok(state)
    }

    pub fn console_lookup(&self, vnode: &str, contract: Option<&str>) -> Result<String, PipError> {
        self.read().console_lookup(vnode, contract)
    }

    pub fn replenish_cache(&self) -> usize {
        let (mut st, now) = self.begin();
        let n = st.replenish_cache();
        if n > 0 {
            self.log(now, "replenish", Envelope::new());
        }
        n
    }

    fn dispatch(&self, method: &str, req: &Envelope) -> Result<Envelope, PipError> {
        let bad = |e: String| PipError::MalformedDocument(e);
        let contract = req.get("contract");
        match method {
            "sync_resources" => {
                let mut env = Envelope::new().field("pip", self.id());
                for (k, v) in self.sync_resources() {
                    env = env.field(k.as_str(), v);
                }
                Ok(env)
            }
            "negotiate_preliminary" => {
                let partial = parse_graph(req.require_doc("partial").map_err(bad)?)?;
                let (id, expires) = self.negotiate_preliminary(&partial)?;
                Ok(Envelope::new().field("contract", id).field("expires_at", expires))
            }
            "negotiate_confirm" => {
                self.negotiate_confirm(req.require("contract").map_err(bad)?)?;
                Ok(Envelope::new())
            }
            "negotiate_delete" => {
                self.negotiate_delete(req.require("contract").map_err(bad)?)?;
                Ok(Envelope::new())
            }
            "negotiate_modify" => {
                let id = req.require("contract").map_err(bad)?;
                let partial = req.get_doc("partial").map(parse_graph).transpose()?;
                let objective = objective_from(req).map_err(bad)?;
                let apply = match req.get("mode").unwrap_or("apply") {
                    "apply" => true,
                    "analyze" => false,
                    other => return Err(bad(format!("unknown mode {other:?}"))),
                };
                let report = self.negotiate_modify(id, partial.as_ref(), objective, apply)?;
                Ok(report_envelope(&report))
            }
            "provision_start" | "provision_stop" | "provision_powercycle" => {
                let action: ProvisionAction = method["provision_".len()..].parse().map_err(bad)?;
                let state = self.provision(action, req.require("vnode").map_err(bad)?, contract)?;
                Ok(Envelope::new().field("state", state.as_str()))
            }
            "console_lookup" => {
                let token = self.console_lookup(req.require("vnode").map_err(bad)?, contract)?;
                Ok(Envelope::new().field("token", token))
            }
            other => Err(bad(format!("method {other} is not served here"))),
        }
    }
}

/// Wire form of a modification report.
pub(crate) fn report_envelope(r: &ModifyReport) -> Envelope {
    let mut env = Envelope::new()
        .field("applied", r.applied)
        .field("objective_value", r.objective_value)
        .field("moves", r.plan.moves.len())
        .field("remaps", r.plan.remaps.len())
        .field("cost", r.plan.cost)
        .field("hosts_before", r.plan.hosts_before)
        .field("hosts_after", r.plan.hosts_after);
    for (k, v) in &r.plan.freed_resources {
        env = env.field(format!("freed.{k}"), v);
    }
    for m in &r.plan.moves {
        env = env.field(format!("move.{}", m.node), format!("{}>{}", m.from, m.to));
    }
    env
}

fn replay(st: &mut PipState, event: &str, now: u64, env: &Envelope) -> Result<(), PipError> {
    let bad = |e: String| PipError::MalformedDocument(e);
    match event {
        "expire" => {
            st.expire_tick(now);
        }
        "preliminary" => {
            let partial = parse_graph(env.require_doc("partial").map_err(bad)?)?;
            st.negotiate_preliminary(&partial, now)?;
        }
        "confirm" => st.negotiate_confirm(env.require("contract").map_err(bad)?)?,
        "delete" => st.negotiate_delete(env.require("contract").map_err(bad)?)?,
        "modify" => {
            let partial = env.get_doc("partial").map(parse_graph).transpose()?;
            let objective = objective_from(env).map_err(bad)?;
            st.negotiate_modify(env.require("contract").map_err(bad)?, partial.as_ref(), objective, true)?;
        }
        "provision" => {
            let action: ProvisionAction = env.require("action").map_err(bad)?.parse().map_err(bad)?;
            st.provision(action, env.require("vnode").map_err(bad)?, env.get("contract"))?;
        }
        "replenish" => {
            st.replenish_cache();
        }
        other => return Err(bad(format!("unknown journal event {other:?}"))),
    }
    Ok(())
}

impl Handler for PipService {
    fn serves(&self, method: &str) -> bool {
        PIP_METHODS.contains(&method)
    }

    fn handle(&self, method: &str, body: &[u8]) -> Result<Vec<u8>, RemoteFailure> {
        let req = Envelope::decode(body).map_err(RemoteFailure::bad_request)?;
        self.dispatch(method, &req)
            .map(|env| env.encode())
            .map_err(|e| RemoteFailure::new(e.code(), e))
    }
}
