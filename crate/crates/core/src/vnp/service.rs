use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard, RwLock, RwLockReadGuard, RwLockWriteGuard};

use log::{error, info, warn};

use crate::clock::Clock;
use crate::codec::{deserialize_graph, deserialize_mapping, serialize_graph, serialize_mapping};
use crate::journal::Journal;
use crate::rdl::{complete, is_vnode_type, validate_graph, Layer, Resource, ResourceKind, TopologyGraph};
use crate::solver::{
    solve, to_mapping_layer, CandidatePolicy, Capacities, Capacity, MappingLayer, ObjectiveSpec,
    ProblemBuilder, ProblemOptions, SearchLimits, SolverError,
};
use crate::wire::{CallError, Envelope, Handler, RemoteFailure};

use super::endpoint::{PipEndpoint, RemotePip, WireLog, WireRecord};
use super::partial::generate_partials;
use super::{CloudNetRecord, CloudNetState, PipPart, Stage, SubmitError, VnpConfig, VnpError};

pub const VNP_METHODS: [&str; 4] = ["submit_cloudnet", "cloudnet_status", "cloudnet_delete", "migrate_analyze"];

/// Completes a raw request with the broker's defaults.
pub fn complete_graph(ol0: &TopologyGraph, config: &VnpConfig) -> Result<TopologyGraph, VnpError> {
    complete(ol0, &config.defaults).map_err(VnpError::Completion)
}

/// Maps a completed request onto providers seen as aggregates. Request links
/// inside one provider stay there; the rest take exactly one transit link.
pub fn map_cloudnet(
    ol1: &TopologyGraph,
    substrate: &TopologyGraph,
    capacities: Capacities,
    limits: SearchLimits,
) -> Result<MappingLayer, SolverError> {
    let options = ProblemOptions {
        max_path_len: 1,
        policy: CandidatePolicy::Aggregate,
        ..ProblemOptions::default()
    };
    let problem = ProblemBuilder::new(substrate, ol1)
        .objective(ObjectiveSpec::min_congestion())
        .capacities(capacities)
        .options(options)
        .build()?;
    let sol = solve(&problem, limits)?;
    Ok(to_mapping_layer(&problem, &sol))
}

/// Result of a successful submission.
#[derive(Debug, Clone, PartialEq)]
pub struct SubmitOutcome {
    pub id: String,
    /// Vnode -> console token.
    pub tokens: BTreeMap<String, String>,
    /// Request node -> provider.
    pub placement: BTreeMap<String, String>,
}

/// One provider's answer to a re-embedding request.
#[derive(Debug, Clone, PartialEq)]
pub struct PipPlan {
    pub pip: String,
    pub contract: String,
    pub applied: bool,
    pub objective_value: f64,
    /// (vnode, from host, to host)
    pub moves: Vec<(String, String, String)>,
    pub remaps: usize,
    pub cost: f64,
    pub hosts_before: usize,
    pub hosts_after: usize,
    pub freed: BTreeMap<ResourceKind, f64>,
}

impl PipPlan {
    fn from_envelope(pip: &str, contract: &str, env: &Envelope) -> Result<PipPlan, String> {
        fn num<T: std::str::FromStr>(env: &Envelope, k: &str) -> Result<T, String> {
            let v = env.require(k)?;
            v.parse().map_err(|_| format!("bad {k} {v:?}"))
        }
        let mut moves = Vec::new();
        for (vnode, v) in env.prefixed("move.") {
            let (from, to) = v.split_once('>').ok_or_else(|| format!("bad move {v:?}"))?;
            moves.push((vnode.to_string(), from.to_string(), to.to_string()));
        }
        let mut freed = BTreeMap::new();
        for (k, v) in env.prefixed("freed.") {
            let kind: ResourceKind = k.parse().map_err(|e| format!("{e}"))?;
            freed.insert(kind, v.parse().map_err(|_| format!("bad freed {v:?}"))?);
        }
        Ok(PipPlan {
            pip: pip.to_string(),
            contract: contract.to_string(),
            applied: num(env, "applied")?,
            objective_value: num(env, "objective_value")?,
            moves,
            remaps: num(env, "remaps")?,
            cost: num(env, "cost")?,
            hosts_before: num(env, "hosts_before")?,
            hosts_after: num(env, "hosts_after")?,
            freed,
        })
    }

    fn to_fields(&self, mut env: Envelope) -> Envelope {
        let p = &self.pip;
        env = env
            .field(format!("{p}.contract"), &self.contract)
            .field(format!("{p}.applied"), self.applied)
            .field(format!("{p}.objective_value"), self.objective_value)
            .field(format!("{p}.moves"), self.moves.len())
            .field(format!("{p}.remaps"), self.remaps)
            .field(format!("{p}.cost"), self.cost)
            .field(format!("{p}.hosts_before"), self.hosts_before)
            .field(format!("{p}.hosts_after"), self.hosts_after);
        for (k, v) in &self.freed {
            env = env.field(format!("{p}.freed.{k}"), v);
        }
        for (v, from, to) in &self.moves {
            env = env.field(format!("{p}.move.{v}"), format!("{from}>{to}"));
        }
        env
    }
}

/// The broker's view: provider aggregates, staleness and all records.
#[derive(Debug, Clone)]
pub struct VnpState {
    pub substrate: TopologyGraph,
    pub stale: BTreeSet<String>,
    pub records: BTreeMap<String, CloudNetRecord>,
    next_id: u64,
}

impl VnpState {
    fn is_live(r: &CloudNetRecord) -> bool {
        matches!(r.state, CloudNetState::Negotiating | CloudNetState::Confirmed)
    }

    /// Transit capacity left after live CloudNets.
    pub fn residual_capacities(&self) -> Capacities {
        let mut caps = Capacities::from_graph(&self.substrate);
        for r in self.records.values().filter(|r| Self::is_live(r)) {
            let Some(ml) = &r.vnp_mapping else { continue };
            for (_, e) in ml.link_entries() {
                for seg in &e.via {
                    let used = seg.allocations.get(&ResourceKind::Bandwidth).copied().unwrap_or(0.0);
                    if let Some(c) = caps.get(&seg.ul_ne_id, ResourceKind::Bandwidth) {
                        if !c.shareable {
                            let amount = (c.amount - used).max(0.0);
                            caps.set(&seg.ul_ne_id, ResourceKind::Bandwidth, Capacity { amount, ..c });
                        }
                    }
                }
            }
        }
        caps
    }

    pub fn transit_tags_in_use(&self) -> BTreeSet<u16> {
        self.records
            .values()
            .filter(|r| Self::is_live(r))
            .flat_map(|r| r.transit_tags.values().copied())
            .collect()
    }

    pub fn record(&self, id: &str) -> Option<&CloudNetRecord> {
        self.records.get(id)
    }
}

/// A broker daemon's core. Mutating pipelines run one at a time; status
/// reads take snapshots.
pub struct VnpService {
    config: VnpConfig,
    endpoints: RwLock<BTreeMap<String, Arc<dyn PipEndpoint>>>,
    state: RwLock<VnpState>,
    pipeline: Mutex<()>,
    clock: Arc<dyn Clock>,
    journal: Option<Mutex<Journal>>,
    wire_log: WireLog,
}

fn remote_cause(e: &CallError) -> String {
    match e {
        CallError::Remote { code, message } => format!("{code}: {message}"),
        other => other.to_string(),
    }
}

fn fail(id: &str, stage: Stage, error: VnpError) -> SubmitError {
    SubmitError {
        id: id.to_string(),
        stage,
        error,
    }
}

impl VnpService {
    /// Builds a broker that reaches every provider over TCP.
    pub fn new(config: VnpConfig, clock: Arc<dyn Clock>) -> Result<VnpService, VnpError> {
        let endpoints = config
            .pips
            .iter()
            .map(|(pip, addr)| {
                let ep: Arc<dyn PipEndpoint> = Arc::new(RemotePip {
                    address: addr.clone(),
                    timeout: config.timeout,
                });
                (pip.clone(), ep)
            })
            .collect();
        Self::with_endpoints(config, endpoints, clock)
    }

    pub fn with_endpoints(
        config: VnpConfig,
        endpoints: BTreeMap<String, Arc<dyn PipEndpoint>>,
        clock: Arc<dyn Clock>,
    ) -> Result<VnpService, VnpError> {
        let mut substrate = config.transit.clone();
        substrate.layer = Layer::Ul;
        let report = validate_graph(&substrate);
        if !report.is_ok() {
            return Err(VnpError::Config(format!("transit topology: {report}")));
        }
        for n in substrate.nodes() {
            if n.type_path.segments() != ["node", "host", "pip"] {
                return Err(VnpError::Config(format!("{} is not a /node/host/pip element", n.id)));
            }
            if !endpoints.contains_key(&n.id) {
                return Err(VnpError::Config(format!("provider {} has no endpoint", n.id)));
            }
        }
        for l in substrate.links() {
            if l.type_path.segments().first().map(String::as_str) != Some("link") {
                return Err(VnpError::Config(format!("{} is not a link", l.id)));
            }
        }
        if config.transit_vlans.is_empty() {
            return Err(VnpError::Config("empty transit VLAN range".into()));
        }
        Ok(VnpService {
            state: RwLock::new(VnpState {
                substrate,
                stale: BTreeSet::new(),
                records: BTreeMap::new(),
                next_id: 1,
            }),
            config,
            endpoints: RwLock::new(endpoints),
            pipeline: Mutex::new(()),
            clock,
            journal: None,
            wire_log: WireLog::default(),
        })
    }

    /// Attaches a durable log in `dir`, replaying the records it holds.
    pub fn with_journal(mut self, dir: &Path) -> Result<VnpService, VnpError> {
        let journal = Journal::open(dir).map_err(|e| VnpError::Config(e.to_string()))?;
        {
            let mut st = self.write();
            for entry in journal.entries().map_err(|e| VnpError::Config(e.to_string()))? {
                if entry.event != "record" {
                    return Err(VnpError::Config(format!("unknown journal event {:?}", entry.event)));
                }
                let env = Envelope::decode(&entry.payload).map_err(VnpError::Config)?;
                let rec = record_from_envelope(&env).map_err(VnpError::Config)?;
                let n = rec.id.strip_prefix("cn-").and_then(|n| n.parse::<u64>().ok()).unwrap_or(0);
                st.next_id = st.next_id.max(n + 1);
                st.records.insert(rec.id.clone(), rec);
            }
        }
        self.journal = Some(Mutex::new(journal));
        Ok(self)
    }

    pub fn config(&self) -> &VnpConfig {
        &self.config
    }

    pub fn wire_log(&self) -> &WireLog {
        &self.wire_log
    }

    /// Replaces how one provider is reached.
    pub fn set_endpoint(&self, pip: &str, ep: Arc<dyn PipEndpoint>) {
        self.endpoints
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(pip.to_string(), ep);
    }

    pub fn read(&self) -> RwLockReadGuard<'_, VnpState> {
        self.state.read().unwrap_or_else(|p| p.into_inner())
    }

    fn write(&self) -> RwLockWriteGuard<'_, VnpState> {
        self.state.write().unwrap_or_else(|p| p.into_inner())
    }

    fn serial(&self) -> MutexGuard<'_, ()> {
        self.pipeline.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn call(&self, pip: &str, method: &str, req: Envelope) -> Result<Envelope, CallError> {
        let ep = self.endpoints.read().unwrap_or_else(|p| p.into_inner()).get(pip).cloned();
        let res = match ep {
            Some(ep) => ep.call(method, &req),
            None => Err(CallError::ConnectionRefused(format!("no endpoint for {pip}"))),
        };
        self.wire_log.push(WireRecord {
            pip: pip.to_string(),
            method: method.to_string(),
            request: req,
            ok: res.is_ok(),
        });
        res
    }

    fn store(&self, rec: CloudNetRecord) {
        if let Some(j) = &self.journal {
            let payload = record_envelope(&rec).encode();
            let mut j = j.lock().unwrap_or_else(|p| p.into_inner());
            if let Err(e) = j.append(self.clock.now_ms(), "record", &payload) {
                error!("journal append failed: {e}");
            }
        }
        self.write().records.insert(rec.id.clone(), rec);
    }

    /// Refreshes provider aggregates. Providers that do not answer keep
    /// their old values and are flagged stale.
    pub fn synchronize_substrate(&self) -> TopologyGraph {
        let pips: Vec<String> = self.read().substrate.nodes().map(|n| n.id.clone()).collect();
        let mut replies = BTreeMap::new();
        for pip in pips {
            let reply = self.call(&pip, "sync_resources", Envelope::new());
            replies.insert(pip, reply);
        }
        let mut st = self.write();
        for (pip, reply) in replies {
            match reply {
                Ok(env) => {
                    let ne = st.substrate.element_mut(&pip).expect("provider node");
                    for kind in [ResourceKind::Ram, ResourceKind::Cpu] {
                        let v = env.get(kind.as_str()).and_then(|v| v.parse::<f64>().ok()).unwrap_or(0.0);
                        ne.set_resource(Resource::new(kind, v.max(0.0)));
                    }
                    st.stale.remove(&pip);
                }
                Err(e) => {
                    warn!("sync with {pip} failed: {e}");
                    st.stale.insert(pip);
                }
            }
        }
        st.substrate.clone()
    }

    /// Runs every stage up to and including the preliminary negotiation.
    /// The record is left in state Negotiating.
    pub fn prepare(&self, ol0: &TopologyGraph) -> Result<String, SubmitError> {
        let _serial = self.serial();
        self.prepare_locked(ol0)
    }

    fn prepare_locked(&self, ol0: &TopologyGraph) -> Result<String, SubmitError> {
        let id = {
            let mut st = self.write();
            let id = format!("cn-{:04}", st.next_id);
            st.next_id += 1;
            id
        };
        let mut rec = CloudNetRecord {
            id: id.clone(),
            ol0: ol0.clone(),
            ol1: None,
            vnp_mapping: None,
            per_pip: BTreeMap::new(),
            transit_tags: BTreeMap::new(),
            tokens: BTreeMap::new(),
            state: CloudNetState::Mapping,
            failure: None,
        };
        let failed = |mut rec: CloudNetRecord, stage: Stage, error: VnpError| {
            info!("{} failed at {stage}: {error}", rec.id);
            rec.state = CloudNetState::Failed;
            rec.failure = Some(format!("{stage}: {error}"));
            let id = rec.id.clone();
            self.store(rec);
            fail(&id, stage, error)
        };

        let report = validate_graph(ol0);
        if !matches!(ol0.layer, Layer::Ol0 | Layer::Ol1) {
            let e = VnpError::InvalidRequest(format!("request layer is {}", ol0.layer));
            return Err(failed(rec, Stage::Validate, e));
        }
        if !report.is_ok() {
            return Err(failed(rec, Stage::Validate, VnpError::InvalidRequest(report.to_string())));
        }

        let substrate = self.synchronize_substrate();

        let ol1 = match complete_graph(ol0, &self.config) {
            Ok(g) => g,
            Err(e) => return Err(failed(rec, Stage::Complete, e)),
        };
        rec.ol1 = Some(ol1.clone());

        let caps = self.read().residual_capacities();
        let ml = match map_cloudnet(&ol1, &substrate, caps, self.config.limits) {
            Ok(ml) => ml,
            Err(e) => return Err(failed(rec, Stage::Map, VnpError::Infeasible(e))),
        };

        let in_use = self.read().transit_tags_in_use();
        let partition = match generate_partials(&id, &ol1, &ml, self.config.transit_vlans, &in_use) {
            Ok(p) => p,
            Err(e) => return Err(failed(rec, Stage::Partition, e)),
        };
        let mut ml = ml;
        ml.vlan_by_link = partition.transit_tags();
        rec.transit_tags = partition.transit_tags();
        rec.vnp_mapping = Some(ml);
        rec.per_pip = partition
            .partials
            .into_iter()
            .map(|(pip, partial)| (pip, PipPart { partial, contract: None }))
            .collect();
        rec.state = CloudNetState::Negotiating;

        match self.transact_embed(&mut rec) {
            Ok(()) => {
                self.store(rec);
                Ok(id)
            }
            Err(e) => Err(failed(rec, Stage::Embed, e)),
        }
    }

    /// Sends partials one after the other in ascending provider order and
    /// deletes what was already embedded when one of them fails.
    fn transact_embed(&self, rec: &mut CloudNetRecord) -> Result<(), VnpError> {
        let pips: Vec<String> = rec.per_pip.keys().cloned().collect();
        for pip in pips {
            let part = &rec.per_pip[&pip];
            let doc = serialize_graph(&part.partial).map_err(|e| VnpError::InvalidRequest(e.to_string()))?;
            let reply = self
                .call(&pip, "negotiate_preliminary", Envelope::new().doc("partial", doc))
                .and_then(|env| {
                    env.require("contract")
                        .map(str::to_string)
                        .map_err(|e| CallError::Io(format!("bad reply: {e}")))
                });
            match reply {
                Ok(contract) => {
                    rec.per_pip.get_mut(&pip).expect("known provider").contract = Some(contract);
                }
                Err(e) => {
                    let cause = remote_cause(&e);
                    return Err(self.roll_back(rec, cause, |cause| VnpError::RolledBack { pip, cause }));
                }
            }
        }
        Ok(())
    }

    /// Deletes every contract the record holds. Contracts the provider
    /// already dropped count as deleted.
    fn roll_back(&self, rec: &mut CloudNetRecord, cause: String, done: impl FnOnce(String) -> VnpError) -> VnpError {
        let retained = self.delete_contracts(rec);
        if retained.is_empty() {
            done(cause)
        } else {
            VnpError::RollbackIncomplete { cause, retained }
        }
    }

    fn delete_contracts(&self, rec: &mut CloudNetRecord) -> Vec<(String, String)> {
        let mut retained = Vec::new();
        for (pip, part) in rec.per_pip.iter_mut() {
            let Some(contract) = part.contract.clone() else { continue };
            match self.call(pip, "negotiate_delete", Envelope::new().field("contract", &contract)) {
                Ok(_) => part.contract = None,
                Err(CallError::Remote { code, .. }) if code == "not_live" || code == "unknown_contract" => {
                    part.contract = None
                }
                Err(e) => {
                    error!("could not delete {contract} at {pip}: {e}");
                    retained.push((pip.clone(), contract));
                }
            }
        }
        retained
    }

    /// Confirms every contract, starts every vnode and collects console
    /// tokens.
    pub fn finalize(&self, id: &str) -> Result<SubmitOutcome, SubmitError> {
        let _serial = self.serial();
        self.finalize_locked(id)
    }

    fn finalize_locked(&self, id: &str) -> Result<SubmitOutcome, SubmitError> {
        let mut rec = match self.read().records.get(id) {
            Some(r) if r.state == CloudNetState::Negotiating => r.clone(),
            Some(r) => {
                let e = VnpError::WrongState {
                    id: id.into(),
                    state: r.state,
                };
                return Err(fail(id, Stage::Finalize, e));
            }
            None => return Err(fail(id, Stage::Finalize, VnpError::UnknownCloudNet(id.into()))),
        };
        match self.confirm_and_boot(&mut rec) {
            Ok(tokens) => {
                rec.tokens = tokens.clone();
                rec.state = CloudNetState::Confirmed;
                let placement = rec.placement();
                self.store(rec);
                Ok(SubmitOutcome {
                    id: id.to_string(),
                    tokens,
                    placement,
                })
            }
            Err(e) => {
                rec.state = CloudNetState::Failed;
                rec.failure = Some(format!("{}: {e}", Stage::Finalize));
                self.store(rec);
                Err(fail(id, Stage::Finalize, e))
            }
        }
    }

    fn confirm_and_boot(&self, rec: &mut CloudNetRecord) -> Result<BTreeMap<String, String>, VnpError> {
        let contracts: Vec<(String, String)> = rec.contracts().map(|(p, c)| (p.clone(), c.clone())).collect();
        for (pip, contract) in &contracts {
            if let Err(e) = self.call(pip, "negotiate_confirm", Envelope::new().field("contract", contract)) {
                let pip = pip.clone();
                return Err(self.roll_back(rec, remote_cause(&e), |cause| VnpError::ConfirmFailed { pip, cause }));
            }
        }
        let mut tokens = BTreeMap::new();
        for (pip, contract) in &contracts {
            let partial = &rec.per_pip[pip].partial;
            let mut vnodes: Vec<&str> = partial
                .nodes()
                .filter(|n| is_vnode_type(&n.type_path))
                .map(|n| n.id.as_str())
                .collect();
            vnodes.sort();
            for vnode in vnodes {
                let req = Envelope::new().field("vnode", vnode).field("contract", contract);
                let res = self
                    .call(pip, "provision_start", req.clone())
                    .and_then(|_| self.call(pip, "console_lookup", req))
                    .and_then(|env| env.require("token").map(str::to_string).map_err(CallError::Io));
                match res {
                    Ok(token) => {
                        tokens.insert(vnode.to_string(), token);
                    }
                    Err(e) => {
                        let pip = pip.clone();
                        return Err(self.roll_back(rec, remote_cause(&e), |cause| VnpError::Provider { pip, cause }));
                    }
                }
            }
        }
        Ok(tokens)
    }

    /// Full pipeline: synchronize, complete, map, partition, embed and
    /// finalize.
    pub fn submit_cloudnet(&self, ol0: &TopologyGraph) -> Result<SubmitOutcome, SubmitError> {
        let _serial = self.serial();
        let id = self.prepare_locked(ol0)?;
        self.finalize_locked(&id)
    }

    pub fn delete_cloudnet(&self, id: &str) -> Result<(), VnpError> {
        let _serial = self.serial();
        let mut rec = match self.read().records.get(id) {
            Some(r) if matches!(r.state, CloudNetState::Confirmed | CloudNetState::Negotiating) => r.clone(),
            _ => return Err(VnpError::UnknownCloudNet(id.into())),
        };
        let retained = self.delete_contracts(&mut rec);
        if retained.is_empty() {
            rec.state = CloudNetState::Deleted;
            rec.tokens.clear();
            self.store(rec);
            Ok(())
        } else {
            self.store(rec);
            Err(VnpError::RollbackIncomplete {
                cause: "delete failed".into(),
                retained,
            })
        }
    }

    /// Record snapshot with console tokens refreshed from the providers.
    pub fn cloudnet_status(&self, id: &str) -> Result<CloudNetRecord, VnpError> {
        let mut rec = self
            .read()
            .records
            .get(id)
            .cloned()
            .ok_or_else(|| VnpError::UnknownCloudNet(id.into()))?;
        if rec.state != CloudNetState::Confirmed {
            return Ok(rec);
        }
        let placement = rec.placement();
        let contracts: BTreeMap<String, String> = rec.contracts().map(|(p, c)| (p.clone(), c.clone())).collect();
        for (vnode, token) in rec.tokens.iter_mut() {
            let Some(pip) = placement.get(vnode) else { continue };
            let Some(contract) = contracts.get(pip) else { continue };
            let req = Envelope::new().field("vnode", vnode).field("contract", contract);
            if let Ok(t) = self.call(pip, "console_lookup", req) {
                if let Some(t) = t.get("token") {
                    *token = t.to_string();
                }
            }
        }
        Ok(rec)
    }

    /// Asks every involved provider for an intra-provider re-embedding plan
    /// and applies it when `apply` is set.
    pub fn migrate_analyze(
        &self,
        id: &str,
        objective: Option<ObjectiveSpec>,
        apply: bool,
    ) -> Result<Vec<PipPlan>, VnpError> {
        let _serial = apply.then(|| self.serial());
        let rec = match self.read().records.get(id) {
            Some(r) if r.state == CloudNetState::Confirmed => r.clone(),
            Some(r) => {
                return Err(VnpError::WrongState {
                    id: id.into(),
                    state: r.state,
                })
            }
            None => return Err(VnpError::UnknownCloudNet(id.into())),
        };
        let objective = objective.unwrap_or_else(ObjectiveSpec::compact);
        let mut plans = Vec::new();
        for (pip, contract) in rec.contracts() {
            let req = Envelope::new()
                .field("contract", contract)
                .field("mode", if apply { "apply" } else { "analyze" })
                .field("objective", objective.mode.as_str())
                .field("alpha", objective.alpha)
                .field("beta", objective.beta);
            let env = self.call(pip, "negotiate_modify", req).map_err(|e| VnpError::Provider {
                pip: pip.clone(),
                cause: remote_cause(&e),
            })?;
            let plan = PipPlan::from_envelope(pip, contract, &env).map_err(|cause| VnpError::Provider {
                pip: pip.clone(),
                cause,
            })?;
            plans.push(plan);
        }
        Ok(plans)
    }

    fn dispatch(&self, method: &str, req: &Envelope) -> Result<Envelope, RemoteFailure> {
        let bad = RemoteFailure::bad_request;
        let vnp_err = |e: VnpError| RemoteFailure::new(e.code(), e);
        match method {
            "submit_cloudnet" => {
                let doc = req.require_doc("request").map_err(bad)?;
                let ol0 = match deserialize_graph(doc) {
                    Ok(g) => g,
                    Err(e) => return Err(RemoteFailure::new("pipeline_failed", format!("{}: {e}", Stage::Validate))),
                };
                match self.submit_cloudnet(&ol0) {
                    Ok(out) => {
                        let mut env = Envelope::new()
                            .field("id", &out.id)
                            .field("state", CloudNetState::Confirmed);
                        for (v, t) in &out.tokens {
                            env = env.field(format!("token.{v}"), t);
                        }
                        for (n, p) in &out.placement {
                            env = env.field(format!("placement.{n}"), p);
                        }
                        Ok(env)
                    }
                    Err(e) => Err(RemoteFailure::new(
                        "pipeline_failed",
                        format!("{}: {} ({})", e.stage, e.error, e.id),
                    )),
                }
            }
            "cloudnet_status" => {
                let rec = self.cloudnet_status(req.require("id").map_err(bad)?).map_err(vnp_err)?;
                Ok(record_envelope(&rec))
            }
            "cloudnet_delete" => {
                let id = req.require("id").map_err(bad)?;
                self.delete_cloudnet(id).map_err(vnp_err)?;
                Ok(Envelope::new().field("id", id).field("state", CloudNetState::Deleted))
            }
            "migrate_analyze" => {
                let id = req.require("id").map_err(bad)?;
                let objective = crate::pip::objective_from(req).map_err(bad)?;
                let apply = match req.get("mode").unwrap_or("analyze") {
                    "apply" => true,
                    "analyze" => false,
                    other => return Err(bad(format!("unknown mode {other:?}"))),
                };
                let plans = self.migrate_analyze(id, objective, apply).map_err(vnp_err)?;
                let mut env = Envelope::new()
                    .field("id", id)
                    .field("pips", plans.iter().map(|p| p.pip.as_str()).collect::<Vec<_>>().join(","));
                for p in &plans {
                    env = p.to_fields(env);
                }
                Ok(env)
            }
            other => Err(RemoteFailure::new("unknown_method", other)),
        }
    }
}

impl Handler for VnpService {
    fn serves(&self, method: &str) -> bool {
        VNP_METHODS.contains(&method)
    }

    fn handle(&self, method: &str, body: &[u8]) -> Result<Vec<u8>, RemoteFailure> {
        let req = Envelope::decode(body).map_err(RemoteFailure::bad_request)?;
        self.dispatch(method, &req).map(|env| env.encode())
    }
}

/// Parses the per-provider plans out of a `migrate_analyze` reply.
pub fn plans_from_envelope(env: &Envelope) -> Result<Vec<PipPlan>, String> {
    let pips = env.get("pips").unwrap_or_default();
    let mut out = Vec::new();
    for pip in pips.split(',').filter(|p| !p.is_empty()) {
        let prefix = format!("{pip}.");
        let mut sub = Envelope::new();
        for (k, v) in env.prefixed(&prefix) {
            sub = sub.field(k, v);
        }
        let contract = sub.require("contract")?.to_string();
        out.push(PipPlan::from_envelope(pip, &contract, &sub)?);
    }
    Ok(out)
}

/// Wire and journal form of a record.
pub fn record_envelope(r: &CloudNetRecord) -> Envelope {
    let mut env = Envelope::new().field("id", &r.id).field("state", r.state);
    if let Some(f) = &r.failure {
        env = env.field("failure", f);
    }
    for (pip, part) in &r.per_pip {
        if let Some(c) = &part.contract {
            env = env.field(format!("contract.{pip}"), c);
        }
    }
    for (n, p) in r.placement() {
        env = env.field(format!("placement.{n}"), p);
    }
    for (l, t) in &r.transit_tags {
        env = env.field(format!("tag.{l}"), t);
    }
    for (v, t) in &r.tokens {
        env = env.field(format!("token.{v}"), t);
    }
    let graph = |g: &TopologyGraph| serialize_graph(g).expect("stored graphs serialize");
    env = env.doc("ol0", graph(&r.ol0));
    if let Some(g) = &r.ol1 {
        env = env.doc("ol1", graph(g));
    }
    if let Some(ml) = &r.vnp_mapping {
        env = env.doc("mapping", serialize_mapping(ml).expect("mappings serialize"));
    }
    for (pip, part) in &r.per_pip {
        env = env.doc(format!("partial.{pip}"), graph(&part.partial));
    }
    env
}

pub fn record_from_envelope(env: &Envelope) -> Result<CloudNetRecord, String> {
    let graph = |name: &str| deserialize_graph(env.require_doc(name)?).map_err(|e| format!("{name}: {e}"));
    let ol1 = env.get_doc("ol1").map(|_| graph("ol1")).transpose()?;
    let vnp_mapping = env
        .get_doc("mapping")
        .map(|d| deserialize_mapping(d).map_err(|e| format!("mapping: {e}")))
        .transpose()?;
    let contracts: BTreeMap<&str, &str> = env.prefixed("contract.").collect();
    let mut per_pip = BTreeMap::new();
    for name in env.docs.keys() {
        let Some(pip) = name.strip_prefix("partial.") else { continue };
        per_pip.insert(
            pip.to_string(),
            PipPart {
                partial: graph(name)?,
                contract: contracts.get(pip).map(|c| c.to_string()),
            },
        );
    }
    let mut transit_tags = BTreeMap::new();
    for (l, t) in env.prefixed("tag.") {
        transit_tags.insert(l.to_string(), t.parse().map_err(|_| format!("bad tag {t:?}"))?);
    }
    Ok(CloudNetRecord {
        id: env.require("id")?.to_string(),
        ol0: graph("ol0")?,
        ol1,
        vnp_mapping,
        per_pip,
        transit_tags,
        tokens: env.prefixed("token.").map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        state: env.require("state")?.parse()?,
        failure: env.get("failure").map(str::to_string),
    })
}
