use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use log::{debug, info};

use crate::rdl::{
    complete, is_vnode_type, validate_graph, Feature, Layer, NetworkElement, Resource, ResourceKind, TopologyGraph,
    TypePath,
};
use crate::solver::{
    analyze_migration, solve, to_mapping_layer, Capacities, Capacity, CandidatePolicy, EntryClass, MappingLayer,
    MigrationPlan, ObjectiveSpec, ProblemBuilder, ProblemOptions,
};

use super::plugin::{ImageOutcome, PluginRegistry, SegmentCtx, SimState};
use super::{PipConfig, PipError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContractState {
    Preliminary,
    Confirmed,
    Deleted,
    Expired,
}

impl ContractState {
    pub fn as_str(self) -> &'static str {
        match self {
            ContractState::Preliminary => "preliminary",
            ContractState::Confirmed => "confirmed",
            ContractState::Deleted => "deleted",
            ContractState::Expired => "expired",
        }
    }

    pub fn is_live(self) -> bool {
        matches!(self, ContractState::Preliminary | ContractState::Confirmed)
    }
}

impl fmt::Display for ContractState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
struct Applied {
    ctx: SegmentCtx,
    plugin: usize,
    outcome: Option<ImageOutcome>,
}

#[derive(Debug, Clone)]
pub struct Contract {
    pub id: String,
    pub state: ContractState,
    /// Completed request.
    pub request: TopologyGraph,
    pub mapping: MappingLayer,
    pub created_at: u64,
    pub expires_at: Option<u64>,
    applied: Vec<Applied>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunState {
    Stopped,
    Running,
}

impl RunState {
    pub fn as_str(self) -> &'static str {
        match self {
            RunState::Stopped => "stopped",
            RunState::Running => "running",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VNodeRuntime {
    pub host: String,
    pub state: RunState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProvisionAction {
    Start,
    Stop,
    Powercycle,
}

impl ProvisionAction {
    pub fn as_str(self) -> &'static str {
        match self {
            ProvisionAction::Start => "start",
            ProvisionAction::Stop => "stop",
            ProvisionAction::Powercycle => "powercycle",
        }
    }
}

impl std::str::FromStr for ProvisionAction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "start" => Ok(ProvisionAction::Start),
            "stop" => Ok(ProvisionAction::Stop),
            "powercycle" => Ok(ProvisionAction::Powercycle),
            _ => Err(format!("unknown provisioning action {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModifyReport {
    pub plan: MigrationPlan,
    pub objective_value: f64,
    pub applied: bool,
}

type VnodeKey = (String, String);

/// All provider state, without locking or persistence.
#[derive(Debug, Clone)]
pub struct PipState {
    config: PipConfig,
    ul: TopologyGraph,
    capacity: Capacities,
    allocated: BTreeMap<(String, ResourceKind), f64>,
    vlan_in_use: BTreeMap<u16, String>,
    contracts: BTreeMap<String, Contract>,
    next_contract: u64,
    runtime: BTreeMap<VnodeKey, VNodeRuntime>,
    sim: SimState,
    plugins: Arc<PluginRegistry>,
    faults: BTreeSet<String>,
}

fn tp(s: &str) -> TypePath {
    TypePath::parse(s).expect("static type path")
}

fn is_pip_stub(ne: &NetworkElement) -> bool {
    ne.type_path.segments() == ["node", "host", "pip"]
}

fn is_transit(ne: &NetworkElement) -> bool {
    ne.type_path.starts_with(&tp("/link/transit"))
}

/// Adds a provider stub and transit link per neighbour, attached to the
/// substrate's tunnel bridge.
fn install_neighbors(ul: &mut TopologyGraph, neighbors: &BTreeMap<String, f64>) -> Result<(), PipError> {
    if neighbors.is_empty() {
        return Ok(());
    }
    let bridge_type = tp("/node/bridge/tunnel-sim");
    let mut bridges: Vec<String> = ul
        .nodes()
        .filter(|n| n.type_path.starts_with(&bridge_type))
        .map(|n| n.id.clone())
        .collect();
    bridges.sort();
    let bridge = bridges
        .first()
        .cloned()
        .ok_or_else(|| PipError::Config("neighbours configured but no /node/bridge/tunnel-sim in substrate".into()))?;
    for (pip, &capacity) in neighbors {
        let present = ul
            .nodes()
            .any(|n| is_pip_stub(n) && n.feature_value("pip") == Some(pip.as_str()));
        if present {
            continue;
        }
        let stub = format!("pip.{pip}");
        let link = format!("transit.{pip}");
        let cfg = |e: crate::rdl::RdlError| PipError::Config(e.to_string());
        ul.add_node(NetworkElement::of_type(&stub, "/node/host/pip").with_feature(Feature::new("pip", pip)))
            .map_err(cfg)?;
        ul.add_link(
            NetworkElement::of_type(&link, "/link/transit").with_resource(Resource::bandwidth(capacity)),
            &bridge,
            &stub,
        )
        .map_err(cfg)?;
    }
    Ok(())
}

impl PipState {
    pub fn new(config: PipConfig) -> Result<PipState, PipError> {
        Self::with_plugins(config, PluginRegistry::simulated())
    }

    pub fn with_plugins(config: PipConfig, plugins: PluginRegistry) -> Result<PipState, PipError> {
        let mut ul = config.substrate.clone();
        if ul.layer != Layer::Ul {
            return Err(PipError::Config(format!("substrate must be UL, got {}", ul.layer)));
        }
        install_neighbors(&mut ul, &config.neighbors)?;
        let report = validate_graph(&ul);
        if !report.is_ok() {
            return Err(PipError::Config(format!("substrate is invalid: {report}")));
        }
        for ne in ul.elements() {
            if plugins.dispatch(&ne.type_path).is_none() {
                return Err(PipError::Config(format!("no plugin handles {} ({})", ne.id, ne.type_path)));
            }
        }
        if config.vlan_pool.is_empty() {
            return Err(PipError::Config("empty VLAN pool".into()));
        }
        Ok(PipState {
            capacity: Capacities::from_graph(&ul),
            sim: SimState::new(config.image_cache),
            config,
            ul,
            allocated: BTreeMap::new(),
            vlan_in_use: BTreeMap::new(),
            contracts: BTreeMap::new(),
            next_contract: 0,
            runtime: BTreeMap::new(),
            plugins: Arc::new(plugins),
            faults: BTreeSet::new(),
        })
    }

    pub fn id(&self) -> &str {
        &self.config.id
    }

    pub fn config(&self) -> &PipConfig {
        &self.config
    }

    /// Substrate including neighbour stubs.
    pub fn substrate(&self) -> &TopologyGraph {
        &self.ul
    }

    pub fn contracts(&self) -> impl Iterator<Item = &Contract> {
        self.contracts.values()
    }

    pub fn contract(&self, id: &str) -> Option<&Contract> {
        self.contracts.get(id)
    }

    pub fn live_contracts(&self) -> usize {
        self.contracts.values().filter(|c| c.state.is_live()).count()
    }

    pub fn vlan_in_use(&self) -> &BTreeMap<u16, String> {
        &self.vlan_in_use
    }

    pub fn sim(&self) -> &SimState {
        &self.sim
    }

    pub fn runtime(&self, contract: &str, vnode: &str) -> Option<&VNodeRuntime> {
        self.runtime.get(&(contract.to_string(), vnode.to_string()))
    }

    pub fn runtimes(&self) -> impl Iterator<Item = (&VnodeKey, &VNodeRuntime)> {
        self.runtime.iter()
    }

    pub fn image_outcome(&self, contract: &str, vnode: &str) -> Option<ImageOutcome> {
        let host = &self.runtime(contract, vnode)?.host;
        self.sim.hosts.get(host)?.vms.get(&format!("{contract}:{vnode}"))?.image
    }

    /// Makes every later plugin call on `ul_ne` fail.
    pub fn inject_fault(&mut self, ul_ne: &str) {
        self.faults.insert(ul_ne.to_string());
    }

    pub fn clear_faults(&mut self) {
        self.faults.clear();
    }

    /// Declared node capacity per kind, shareable or not.
    pub fn capacity_totals(&self) -> BTreeMap<ResourceKind, f64> {
        ResourceKind::ALL
            .iter()
            .map(|&k| (k, self.ul.nodes().map(|n| n.amount(k)).sum()))
            .collect()
    }

    /// Current allocations on nodes per kind.
    pub fn allocated_totals(&self) -> BTreeMap<ResourceKind, f64> {
        let mut out: BTreeMap<ResourceKind, f64> = ResourceKind::ALL.iter().map(|&k| (k, 0.0)).collect();
        for ((ne, kind), amount) in &self.allocated {
            if self.ul.element(ne).is_some_and(|e| e.is_node()) {
                *out.entry(*kind).or_default() += amount;
            }
        }
        out
    }

    pub fn allocated(&self) -> &BTreeMap<(String, ResourceKind), f64> {
        &self.allocated
    }

    fn residual(&self, exclude: Option<&str>) -> Capacities {
        let allocated = match exclude {
            None => self.allocated.clone(),
            Some(id) => self.allocations_where(|c| c.id != id),
        };
        let mut out = Capacities::default();
        for (ne, kind, cap) in self.capacity.iter() {
            let amount = if cap.shareable {
                cap.amount
            } else {
                cap.amount - allocated.get(&(ne.to_string(), kind)).copied().unwrap_or(0.0)
            };
            out.set(
                ne,
                kind,
                Capacity {
                    amount: amount.max(0.0),
                    shareable: cap.shareable,
                },
            );
        }
        out
    }

    /// Residual capacities as the solver sees them.
    pub fn residual_capacities(&self) -> Capacities {
        self.residual(None)
    }

    /// Residual per kind summed over substrate nodes. Never reveals topology.
    pub fn sync_resources(&self) -> BTreeMap<ResourceKind, f64> {
        let residual = self.residual_capacities();
        ResourceKind::ALL
            .iter()
            .map(|&k| {
                let sum = self
                    .ul
                    .nodes()
                    .filter_map(|n| residual.get(&n.id, k))
                    .map(|c| c.amount)
                    .sum();
                (k, sum)
            })
            .collect()
    }

    /// Charges of one mapping: declared, non-shareable capacities only.
    pub fn mapping_charges(&self, ml: &MappingLayer) -> BTreeMap<(String, ResourceKind), f64> {
        let mut out = BTreeMap::new();
        for entry in ml.entries.values() {
            for seg in entry.all_segments() {
                for (&kind, &amount) in &seg.allocations {
                    if self.capacity.get(&seg.ul_ne_id, kind).is_some_and(|c| !c.shareable) {
                        *out.entry((seg.ul_ne_id.clone(), kind)).or_insert(0.0) += amount;
                    }
                }
            }
        }
        out
    }

    fn allocations_where(&self, keep: impl Fn(&Contract) -> bool) -> BTreeMap<(String, ResourceKind), f64> {
        let mut out = BTreeMap::new();
        for c in self.contracts.values().filter(|c| c.state.is_live() && keep(c)) {
            for (k, v) in self.mapping_charges(&c.mapping) {
                *out.entry(k).or_insert(0.0) += v;
            }
        }
        out
    }

    fn recompute_allocations(&mut self) {
        self.allocated = self.allocations_where(|_| true);
    }

    fn tags_of(&self, contract: &str) -> BTreeSet<u16> {
        let prefix = format!("{contract}:");
        self.vlan_in_use
            .iter()
            .filter(|(_, k)| k.starts_with(&prefix))
            .map(|(t, _)| *t)
            .collect()
    }

    /// Checks a partial graph's structure and provider stubs. Returns the
    /// VLAN tags dictated for its transit links.
    fn check_partial(&self, partial: &TopologyGraph, exclude: Option<&str>) -> Result<BTreeMap<String, u16>, PipError> {
        let report = validate_graph(partial);
        if !report.is_ok() {
            return Err(PipError::InvalidPartial(report.to_string()));
        }
        let mut stubs = BTreeSet::new();
        for n in partial.nodes().filter(|n| is_pip_stub(n)) {
            let pip = n.feature_value("pip").unwrap_or_default();
            if !self.config.neighbors.contains_key(pip) {
                return Err(PipError::UnknownNeighborPip(if pip.is_empty() { n.id.clone() } else { pip.to_string() }));
            }
            stubs.insert(n.id.as_str());
        }
        let own = exclude.map(|c| self.tags_of(c)).unwrap_or_default();
        let mut dictated = BTreeMap::new();
        for l in partial.links() {
            let touches_stub = partial
                .link_endpoints(&l.id)
                .is_some_and(|(a, b)| stubs.contains(a.as_str()) || stubs.contains(b.as_str()));
            if !(touches_stub || is_transit(l)) {
                continue;
            }
            let tag: u16 = l
                .feature_value("vlan")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| PipError::MissingTransitVlan(l.id.clone()))?;
            let taken = self.vlan_in_use.contains_key(&tag) && !own.contains(&tag);
            if taken || dictated.values().any(|t| *t == tag) {
                return Err(PipError::VlanConflict { tag, link: l.id.clone() });
            }
            dictated.insert(l.id.clone(), tag);
        }
        Ok(dictated)
    }

    fn assign_vlans(
        &self,
        ml: &MappingLayer,
        dictated: &BTreeMap<String, u16>,
        reuse: &BTreeMap<String, u16>,
        exclude: Option<&str>,
    ) -> Result<BTreeMap<String, u16>, PipError> {
        let own = exclude.map(|c| self.tags_of(c)).unwrap_or_default();
        let mut taken: BTreeSet<u16> = self.vlan_in_use.keys().filter(|t| !own.contains(t)).copied().collect();
        taken.extend(dictated.values().copied());
        let mut out = BTreeMap::new();
        for (link, _) in ml.link_entries() {
            if let Some(&tag) = dictated.get(link) {
                out.insert(link.clone(), tag);
                continue;
            }
            let keep = reuse
                .get(link)
                .copied()
                .filter(|t| self.config.vlan_pool.contains(*t) && !taken.contains(t));
            let tag = keep
                .or_else(|| self.config.vlan_pool.iter().find(|t| !taken.contains(t)))
                .ok_or(PipError::VlanExhausted)?;
            taken.insert(tag);
            out.insert(link.clone(), tag);
        }
        Ok(out)
    }

    fn segment_contexts(
        &self,
        contract: &str,
        request: &TopologyGraph,
        ml: &MappingLayer,
        carried: &BTreeMap<String, Option<ImageOutcome>>,
    ) -> Vec<SegmentCtx> {
        let ul_type = |id: &str| self.ul.element(id).map(|e| e.type_path.clone()).unwrap_or_else(|| tp("/node"));
        let mut out = Vec::new();
        for (id, entry) in ml.node_entries() {
            let host = &entry.segments[0].ul_ne_id;
            out.push(SegmentCtx {
                contract: contract.to_string(),
                ol_ne: id.clone(),
                class: EntryClass::Node,
                ul_ne: host.clone(),
                ul_type: ul_type(host),
                vlan: None,
                transit_uplink: None,
                template: request
                    .element(id)
                    .and_then(|e| e.feature_value("image"))
                    .map(str::to_string),
                carried_image: carried.get(id).copied(),
            });
        }
        for (id, entry) in ml.link_entries() {
            let path = entry.path();
            for (i, ne) in path.iter().enumerate() {
                let transit_uplink = if i % 2 == 0 {
                    [i.checked_sub(1), Some(i + 1)]
                        .into_iter()
                        .flatten()
                        .filter_map(|j| path.get(j))
                        .find(|l| self.ul.element(l).is_some_and(is_transit))
                        .cloned()
                } else {
                    None
                };
                out.push(SegmentCtx {
                    contract: contract.to_string(),
                    ol_ne: id.clone(),
                    class: EntryClass::Link,
                    ul_ne: ne.clone(),
                    ul_type: ul_type(ne),
                    vlan: ml.vlan_by_link.get(id).copied(),
                    transit_uplink,
                    template: None,
                    carried_image: None,
                });
            }
        }
        out
    }

    /// Applies every segment in order; on failure reverts what was applied.
    fn embed(&mut self, ctxs: Vec<SegmentCtx>) -> Result<Vec<Applied>, PipError> {
        let plugins = self.plugins.clone();
        let mut applied: Vec<Applied> = Vec::with_capacity(ctxs.len());
        for ctx in ctxs {
            let result = match plugins.dispatch(&ctx.ul_type) {
                _ if self.faults.contains(&ctx.ul_ne) => Err("injected fault".to_string()),
                None => Err(format!("no plugin for {}", ctx.ul_type)),
                Some(p) => plugins.get(p).apply(&ctx, &mut self.sim).map(|o| (p, o)),
            };
            match result {
                Ok((plugin, outcome)) => applied.push(Applied { ctx, plugin, outcome }),
                Err(reason) => {
                    debug!("{}: plugin failed on {}: {reason}", self.config.id, ctx.ul_ne);
                    self.revert(&applied, &BTreeSet::new());
                    return Err(PipError::PluginFailed { ne: ctx.ul_ne, reason });
                }
            }
        }
        Ok(applied)
    }

    /// Reverts in reverse order. Node segments listed in `moving` keep
    /// their image accounting.
    fn revert(&mut self, applied: &[Applied], moving: &BTreeSet<String>) {
        let plugins = self.plugins.clone();
        for a in applied.iter().rev() {
            let outcome = if a.ctx.class == EntryClass::Node && moving.contains(&a.ctx.ol_ne) {
                None
            } else {
                a.outcome
            };
            plugins.get(a.plugin).revert(&a.ctx, outcome, &mut self.sim);
        }
    }

    fn complete(&self, partial: &TopologyGraph) -> Result<TopologyGraph, PipError> {
        complete(partial, &self.config.defaults).map_err(PipError::Completion)
    }

    fn problem_options(&self) -> ProblemOptions {
        ProblemOptions {
            max_path_len: self.config.max_path_len,
            policy: CandidatePolicy::Exact,
            ..ProblemOptions::default()
        }
    }

    /// First stage: maps and embeds `partial`, holding its resources until
    /// confirmation or expiry. Returns the contract id.
    pub fn negotiate_preliminary(&mut self, partial: &TopologyGraph, now: u64) -> Result<String, PipError> {
        let dictated = self.check_partial(partial, None)?;
        let request = self.complete(partial)?;
        let problem = ProblemBuilder::new(&self.ul, &request)
            .objective(self.config.objective)
            .capacities(self.residual_capacities())
            .options(self.problem_options())
            .build()
            .map_err(PipError::Infeasible)?;
        let sol = solve(&problem, self.config.limits).map_err(PipError::Infeasible)?;
        let mut ml = to_mapping_layer(&problem, &sol);
        ml.vlan_by_link = self.assign_vlans(&ml, &dictated, &BTreeMap::new(), None)?;

        let id = format!("{}-{:04}", self.config.id, self.next_contract + 1);
        let ctxs = self.segment_contexts(&id, &request, &ml, &BTreeMap::new());
        let applied = self.embed(ctxs)?;

        self.next_contract += 1;
        for (link, tag) in &ml.vlan_by_link {
            self.vlan_in_use.insert(*tag, format!("{id}:{link}"));
        }
        for (vnode, entry) in ml.node_entries() {
            if request.element(vnode).is_some_and(|e| is_vnode_type(&e.type_path)) {
                self.runtime.insert(
                    (id.clone(), vnode.clone()),
                    VNodeRuntime {
                        host: entry.segments[0].ul_ne_id.clone(),
                        state: RunState::Stopped,
                    },
                );
            }
        }
        info!("{}: preliminary {id} for {}", self.config.id, request.id);
        self.contracts.insert(
            id.clone(),
            Contract {
                id: id.clone(),
                state: ContractState::Preliminary,
                request,
                mapping: ml,
                created_at: now,
                expires_at: Some(now.saturating_add(self.config.ttl_ms)),
                applied,
            },
        );
        self.recompute_allocations();
        Ok(id)
    }

    pub fn negotiate_confirm(&mut self, id: &str) -> Result<(), PipError> {
        let c = self
            .contracts
            .get_mut(id)
            .ok_or_else(|| PipError::UnknownContract(id.to_string()))?;
        if c.state != ContractState::Preliminary {
            return Err(PipError::NotPreliminary {
                id: id.to_string(),
                state: c.state,
            });
        }
        c.state = ContractState::Confirmed;
        c.expires_at = None;
        Ok(())
    }

    fn teardown(&mut self, id: &str, final_state: ContractState) {
        let Some(c) = self.contracts.get(id) else { return };
        let applied = c.applied.clone();
        self.revert(&applied, &BTreeSet::new());
        for tag in self.tags_of(id) {
            self.vlan_in_use.remove(&tag);
        }
        self.runtime.retain(|(cid, _), _| cid != id);
        let c = self.contracts.get_mut(id).expect("checked above");
        c.state = final_state;
        c.expires_at = None;
        c.applied.clear();
        self.recompute_allocations();
    }

    pub fn negotiate_delete(&mut self, id: &str) -> Result<(), PipError> {
        let c = self
            .contracts
            .get(id)
            .ok_or_else(|| PipError::UnknownContract(id.to_string()))?;
        if !c.state.is_live() {
            return Err(PipError::NotLive {
                id: id.to_string(),
                state: c.state,
            });
        }
        self.teardown(id, ContractState::Deleted);
        info!("{}: deleted {id}", self.config.id);
        Ok(())
    }

    /// Expires every preliminary contract due at `now`.
    pub fn expire_tick(&mut self, now: u64) -> Vec<String> {
        let due: Vec<String> = self
            .contracts
            .values()
            .filter(|c| c.state == ContractState::Preliminary && c.expires_at.is_some_and(|t| t <= now))
            .map(|c| c.id.clone())
            .collect();
        for id in &due {
            self.teardown(id, ContractState::Expired);
            info!("{}: expired {id}", self.config.id);
        }
        due
    }

    /// Re-solves a confirmed contract with its current mapping as prior,
    /// optionally against a new partial graph. With `apply` the new mapping
    /// replaces the old one atomically; moved vnodes keep their runtime state.
    pub fn negotiate_modify(
        &mut self,
        id: &str,
        new_partial: Option<&TopologyGraph>,
        objective: Option<ObjectiveSpec>,
        apply: bool,
    ) -> Result<ModifyReport, PipError> {
        let c = self
            .contracts
            .get(id)
            .ok_or_else(|| PipError::UnknownContract(id.to_string()))?;
        if c.state != ContractState::Confirmed {
            return Err(PipError::NotConfirmed {
                id: id.to_string(),
                state: c.state,
            });
        }
        let (request, dictated) = match new_partial {
            Some(p) => {
                let dictated = self.check_partial(p, Some(id))?;
                let mut r = self.complete(p)?;
                r.id = c.request.id.clone();
                (r, dictated)
            }
            None => {
                let dictated = c
                    .request
                    .links()
                    .filter_map(|l| Some((l.id.clone(), *c.mapping.vlan_by_link.get(&l.id)?)))
                    .filter(|(l, _)| {
                        let ne = c.request.element(l).expect("link of request");
                        is_transit(ne) || ne.feature_value("vlan").is_some()
                    })
                    .collect();
                (c.request.clone(), dictated)
            }
        };
        let objective = objective.unwrap_or_else(|| match new_partial {
            Some(_) => ObjectiveSpec::migration_aware(0.0, 1.0),
            None => ObjectiveSpec::compact(),
        });
        let problem = ProblemBuilder::new(&self.ul, &request)
            .objective(objective)
            .prior(Some(&c.mapping))
            .capacities(self.residual(Some(id)))
            .options(self.problem_options())
            .build()
            .map_err(PipError::Infeasible)?;
        let sol = solve(&problem, self.config.limits).map_err(PipError::Infeasible)?;
        let plan = analyze_migration(&problem, &sol);
        let mut report = ModifyReport {
            plan,
            objective_value: sol.objective_value,
            applied: false,
        };
        if !apply {
            return Ok(report);
        }

        let snapshot = self.clone();
        let result = self.replace_mapping(id, request, &problem, &sol, &dictated);
        if let Err(e) = result {
            *self = snapshot;
            return Err(e);
        }
        report.applied = true;
        info!("{}: modified {id}, {} moves", self.config.id, report.plan.moves.len());
        Ok(report)
    }

    fn replace_mapping(
        &mut self,
        id: &str,
        request: TopologyGraph,
        problem: &crate::solver::EmbeddingProblem,
        sol: &crate::solver::EmbeddingSolution,
        dictated: &BTreeMap<String, u16>,
    ) -> Result<(), PipError> {
        let old = self.contracts[id].clone();
        let mut ml = to_mapping_layer(problem, sol);
        ml.vlan_by_link = self.assign_vlans(&ml, dictated, &old.mapping.vlan_by_link, Some(id))?;

        let staying: BTreeSet<String> = ml
            .node_entries()
            .map(|(k, _)| k.clone())
            .filter(|k| old.mapping.entries.contains_key(k))
            .collect();
        let carried: BTreeMap<String, Option<ImageOutcome>> = old
            .applied
            .iter()
            .filter(|a| a.ctx.class == EntryClass::Node && staying.contains(&a.ctx.ol_ne))
            .map(|a| (a.ctx.ol_ne.clone(), a.outcome))
            .collect();

        self.revert(&old.applied, &staying);
        for tag in self.tags_of(id) {
            self.vlan_in_use.remove(&tag);
        }
        let ctxs = self.segment_contexts(id, &request, &ml, &carried);
        let applied = self.embed(ctxs)?;

        for (link, tag) in &ml.vlan_by_link {
            self.vlan_in_use.insert(*tag, format!("{id}:{link}"));
        }
        let mut runtime = BTreeMap::new();
        for (vnode, entry) in ml.node_entries() {
            if request.element(vnode).is_some_and(|e| is_vnode_type(&e.type_path)) {
                let key = (id.to_string(), vnode.clone());
                let state = self.runtime.get(&key).map_or(RunState::Stopped, |r| r.state);
                runtime.insert(
                    key,
                    VNodeRuntime {
                        host: entry.segments[0].ul_ne_id.clone(),
                        state,
                    },
                );
            }
        }
        self.runtime.retain(|(cid, _), _| cid != id);
        self.runtime.extend(runtime);

        let c = self.contracts.get_mut(id).expect("exists");
        c.request = request;
        c.mapping = ml;
        c.applied = applied;
        self.recompute_allocations();
        Ok(())
    }

    fn find_vnode(&self, vnode: &str, contract: Option<&str>) -> Result<VnodeKey, PipError> {
        let mut hits = self
            .runtime
            .keys()
            .filter(|(c, v)| v == vnode && contract.is_none_or(|want| want == c));
        let first = hits.next().ok_or_else(|| PipError::UnknownVNode(vnode.to_string()))?;
        if hits.next().is_some() {
            return Err(PipError::AmbiguousVNode(vnode.to_string()));
        }
        Ok(first.clone())
    }

    pub fn provision(
        &mut self,
        action: ProvisionAction,
        vnode: &str,
        contract: Option<&str>,
    ) -> Result<RunState, PipError> {
        let key = self.find_vnode(vnode, contract)?;
        let rt = self.runtime.get_mut(&key).expect("found above");
        let events = &mut self.sim.hosts.entry(rt.host.clone()).or_default().events;
        match action {
            ProvisionAction::Start if rt.state == RunState::Running => {
                info!("{}: {vnode} already running", self.config.id);
            }
            ProvisionAction::Stop if rt.state == RunState::Stopped => {
                info!("{}: {vnode} already stopped", self.config.id);
            }
            ProvisionAction::Start => {
                events.push(format!("start {vnode}"));
                rt.state = RunState::Running;
            }
            ProvisionAction::Stop => {
                events.push(format!("stop {vnode}"));
                rt.state = RunState::Stopped;
            }
            ProvisionAction::Powercycle => {
                events.push(format!("stop {vnode}"));
                events.push(format!("start {vnode}"));
                rt.state = RunState::Running;
            }
        }
        Ok(rt.state)
    }

    pub fn console_lookup(&self, vnode: &str, contract: Option<&str>) -> Result<String, PipError> {
        let key = self.find_vnode(vnode, contract)?;
        let host = &self.runtime[&key].host;
        Ok(format!("console://{}/{host}/{vnode}", self.config.id))
    }

    pub fn replenish_cache(&mut self) -> usize {
        self.sim.cache.replenish()
    }
}
