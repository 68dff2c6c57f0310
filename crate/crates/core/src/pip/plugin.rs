use std::collections::{BTreeMap, BTreeSet};

use crate::rdl::TypePath;
use crate::solver::EntryClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageOutcome {
    pub cache_hit: bool,
    pub copy_ops: u32,
    /// Whether this provisioning queued a replenish of the template.
    pub queued: bool,
}

/// Pre-copied VM images, one warm copy per template.
///
/// A hit moves the warm copy into place and queues a replacement; a miss
/// copies from the template store and primes the cache for next time.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImageCache {
    pub enabled: bool,
    pub warm: BTreeSet<String>,
    pub pending: BTreeSet<String>,
    pub hits: u64,
    pub misses: u64,
    pub copy_ops: u64,
}

impl ImageCache {
    pub fn new(enabled: bool) -> Self {
        ImageCache {
            enabled,
            ..ImageCache::default()
        }
    }

    pub fn provision(&mut self, template: &str) -> ImageOutcome {
        if self.enabled && self.warm.remove(template) {
            self.hits += 1;
            let queued = self.pending.insert(template.to_string());
            return ImageOutcome {
                cache_hit: true,
                copy_ops: 0,
                queued,
            };
        }
        self.misses += 1;
        self.copy_ops += 1;
        let queued = self.enabled && self.pending.insert(template.to_string());
        ImageOutcome {
            cache_hit: false,
            copy_ops: 1,
            queued,
        }
    }

    pub fn undo(&mut self, template: &str, outcome: ImageOutcome) {
        if outcome.queued {
            self.pending.remove(template);
        }
        if outcome.cache_hit {
            self.hits -= 1;
            self.warm.insert(template.to_string());
        } else {
            self.misses -= 1;
            self.copy_ops -= u64::from(outcome.copy_ops);
        }
    }

    /// Completes queued copies. Returns how many templates became warm.
    pub fn replenish(&mut self) -> usize {
        let n = self.pending.len();
        self.warm.append(&mut self.pending);
        n
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VmRecord {
    pub template: String,
    pub image: Option<ImageOutcome>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HostSim {
    pub vms: BTreeMap<String, VmRecord>,
    /// VLAN tag -> virtual link key.
    pub ports: BTreeMap<u16, String>,
    pub events: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BridgeSim {
    pub ports: BTreeMap<u16, String>,
    /// Transit substrate link -> tags trunked over it.
    pub trunks: BTreeMap<String, BTreeSet<u16>>,
}

/// Everything the simulated backends expose.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SimState {
    pub hosts: BTreeMap<String, HostSim>,
    /// Switch -> VLAN tag -> virtual link key.
    pub switches: BTreeMap<String, BTreeMap<u16, String>>,
    pub bridges: BTreeMap<String, BridgeSim>,
    /// Substrate link -> virtual link keys carried.
    pub links: BTreeMap<String, BTreeSet<String>>,
    /// Provider stub -> request elements attached to it.
    pub stubs: BTreeMap<String, BTreeSet<String>>,
    pub cache: ImageCache,
}

impl SimState {
    pub fn new(cache_enabled: bool) -> Self {
        SimState {
            cache: ImageCache::new(cache_enabled),
            ..SimState::default()
        }
    }

    /// Plugin-visible state without the provisioning event logs and cache
    /// counters, for before/after comparisons.
    pub fn topology_view(&self) -> SimState {
        let mut v = self.clone();
        for h in v.hosts.values_mut() {
            h.events.clear();
        }
        v.hosts.retain(|_, h| !h.vms.is_empty() || !h.ports.is_empty());
        v.switches.retain(|_, s| !s.is_empty());
        v.bridges.retain(|_, b| !b.ports.is_empty() || b.trunks.values().any(|t| !t.is_empty()));
        v.links.retain(|_, l| !l.is_empty());
        v.stubs.retain(|_, s| !s.is_empty());
        v
    }
}

/// One substrate element's share of one request element.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentCtx {
    pub contract: String,
    pub ol_ne: String,
    pub class: EntryClass,
    pub ul_ne: String,
    pub ul_type: TypePath,
    pub vlan: Option<u16>,
    /// Substrate `/link/transit` next to this segment, if any.
    pub transit_uplink: Option<String>,
    pub template: Option<String>,
    /// Set when the element already runs elsewhere and is being moved.
    pub carried_image: Option<Option<ImageOutcome>>,
}

impl SegmentCtx {
    pub fn key(&self) -> String {
        format!("{}:{}", self.contract, self.ol_ne)
    }

    fn tag(&self) -> Result<u16, String> {
        self.vlan.ok_or_else(|| format!("{} has no VLAN tag", self.ol_ne))
    }
}

/// Substrate backend for one family of element types.
pub trait EmbeddingPlugin: Send + Sync {
    fn type_prefix(&self) -> &TypePath;
    /// Applies the segment. The returned outcome is handed back to `revert`.
    fn apply(&self, ctx: &SegmentCtx, sim: &mut SimState) -> Result<Option<ImageOutcome>, String>;
    fn revert(&self, ctx: &SegmentCtx, outcome: Option<ImageOutcome>, sim: &mut SimState);
}

fn insert_port(ports: &mut BTreeMap<u16, String>, tag: u16, key: String, ne: &str) -> Result<(), String> {
    if let Some(other) = ports.get(&tag) {
        return Err(format!("VLAN {tag} on {ne} already carries {other}"));
    }
    ports.insert(tag, key);
    Ok(())
}

pub struct HostPlugin(TypePath);

impl EmbeddingPlugin for HostPlugin {
    fn type_prefix(&self) -> &TypePath {
        &self.0
    }

    fn apply(&self, ctx: &SegmentCtx, sim: &mut SimState) -> Result<Option<ImageOutcome>, String> {
        let key = ctx.key();
        match ctx.class {
            EntryClass::Node => {
                if sim.hosts.get(&ctx.ul_ne).is_some_and(|h| h.vms.contains_key(&key)) {
                    return Err(format!("{key} already exists on {}", ctx.ul_ne));
                }
                let template = ctx.template.clone().unwrap_or_else(|| "default".into());
                let image = match ctx.carried_image {
                    Some(carried) => carried,
                    None => Some(sim.cache.provision(&template)),
                };
                sim.hosts
                    .entry(ctx.ul_ne.clone())
                    .or_default()
                    .vms
                    .insert(key, VmRecord { template, image });
                Ok(image)
            }
            EntryClass::Link => {
                let host = sim.hosts.entry(ctx.ul_ne.clone()).or_default();
                insert_port(&mut host.ports, ctx.tag()?, key, &ctx.ul_ne)?;
                Ok(None)
            }
        }
    }

    fn revert(&self, ctx: &SegmentCtx, outcome: Option<ImageOutcome>, sim: &mut SimState) {
        let Some(host) = sim.hosts.get_mut(&ctx.ul_ne) else { return };
        match ctx.class {
            EntryClass::Node => {
                if let Some(vm) = host.vms.remove(&ctx.key()) {
                    if let Some(o) = outcome {
                        sim.cache.undo(&vm.template, o);
                    }
                }
            }
            EntryClass::Link => {
                if let Some(tag) = ctx.vlan {
                    host.ports.remove(&tag);
                }
            }
        }
    }
}

pub struct SwitchPlugin(TypePath);

impl EmbeddingPlugin for SwitchPlugin {
    fn type_prefix(&self) -> &TypePath {
        &self.0
    }

    fn apply(&self, ctx: &SegmentCtx, sim: &mut SimState) -> Result<Option<ImageOutcome>, String> {
        if ctx.class == EntryClass::Node {
            return Err(format!("switch {} cannot host {}", ctx.ul_ne, ctx.ol_ne));
        }
        let ports = sim.switches.entry(ctx.ul_ne.clone()).or_default();
        insert_port(ports, ctx.tag()?, ctx.key(), &ctx.ul_ne)?;
        Ok(None)
    }

    fn revert(&self, ctx: &SegmentCtx, _: Option<ImageOutcome>, sim: &mut SimState) {
        if let (Some(ports), Some(tag)) = (sim.switches.get_mut(&ctx.ul_ne), ctx.vlan) {
            ports.remove(&tag);
        }
    }
}

/// Tunnel endpoint towards neighbouring providers. Transit links are
/// trunked: every tag crossing a transit uplink is recorded on it.
pub struct TunnelBridgePlugin(TypePath);

impl EmbeddingPlugin for TunnelBridgePlugin {
    fn type_prefix(&self) -> &TypePath {
        &self.0
    }

    fn apply(&self, ctx: &SegmentCtx, sim: &mut SimState) -> Result<Option<ImageOutcome>, String> {
        if ctx.class == EntryClass::Node {
            return Err(format!("bridge {} cannot host {}", ctx.ul_ne, ctx.ol_ne));
        }
        let tag = ctx.tag()?;
        let bridge = sim.bridges.entry(ctx.ul_ne.clone()).or_default();
        insert_port(&mut bridge.ports, tag, ctx.key(), &ctx.ul_ne)?;
        if let Some(uplink) = &ctx.transit_uplink {
            bridge.trunks.entry(uplink.clone()).or_default().insert(tag);
        }
        Ok(None)
    }

    fn revert(&self, ctx: &SegmentCtx, _: Option<ImageOutcome>, sim: &mut SimState) {
        let (Some(bridge), Some(tag)) = (sim.bridges.get_mut(&ctx.ul_ne), ctx.vlan) else {
            return;
        };
        bridge.ports.remove(&tag);
        if let Some(trunk) = ctx.transit_uplink.as_ref().and_then(|u| bridge.trunks.get_mut(u)) {
            trunk.remove(&tag);
        }
    }
}

/// Neighbouring provider as seen from inside: only bookkeeping.
pub struct PipStubPlugin(TypePath);

impl EmbeddingPlugin for PipStubPlugin {
    fn type_prefix(&self) -> &TypePath {
        &self.0
    }

    fn apply(&self, ctx: &SegmentCtx, sim: &mut SimState) -> Result<Option<ImageOutcome>, String> {
        sim.stubs.entry(ctx.ul_ne.clone()).or_default().insert(ctx.key());
        Ok(None)
    }

    fn revert(&self, ctx: &SegmentCtx, _: Option<ImageOutcome>, sim: &mut SimState) {
        if let Some(s) = sim.stubs.get_mut(&ctx.ul_ne) {
            s.remove(&ctx.key());
        }
    }
}

/// Any substrate link: records which virtual links cross it.
pub struct LinkPlugin(TypePath);

impl EmbeddingPlugin for LinkPlugin {
    fn type_prefix(&self) -> &TypePath {
        &self.0
    }

    fn apply(&self, ctx: &SegmentCtx, sim: &mut SimState) -> Result<Option<ImageOutcome>, String> {
        sim.links.entry(ctx.ul_ne.clone()).or_default().insert(ctx.key());
        Ok(None)
    }

    fn revert(&self, ctx: &SegmentCtx, _: Option<ImageOutcome>, sim: &mut SimState) {
        if let Some(l) = sim.links.get_mut(&ctx.ul_ne) {
            l.remove(&ctx.key());
        }
    }
}

pub struct PluginRegistry {
    plugins: Vec<Box<dyn EmbeddingPlugin>>,
}

impl PluginRegistry {
    pub fn empty() -> Self {
        PluginRegistry { plugins: Vec::new() }
    }

    /// The simulated backends: hosts, switches, tunnel bridges, provider
    /// stubs and links.
    pub fn simulated() -> Self {
        let tp = |s: &str| TypePath::parse(s).expect("static type path");
        let mut r = PluginRegistry::empty();
        r.register(Box::new(HostPlugin(tp("/node/host/sim"))));
        r.register(Box::new(SwitchPlugin(tp("/node/switch/sim"))));
        r.register(Box::new(TunnelBridgePlugin(tp("/node/bridge/tunnel-sim"))));
        r.register(Box::new(PipStubPlugin(tp("/node/host/pip"))));
        r.register(Box::new(LinkPlugin(tp("/link"))));
        r
    }

    pub fn register(&mut self, plugin: Box<dyn EmbeddingPlugin>) {
        self.plugins.push(plugin);
    }

    /// Index of the plugin with the longest prefix of `tp`.
    pub fn dispatch(&self, tp: &TypePath) -> Option<usize> {
        self.plugins
            .iter()
            .enumerate()
            .filter(|(_, p)| tp.starts_with(p.type_prefix()))
            .max_by_key(|(_, p)| p.type_prefix().len())
            .map(|(i, _)| i)
    }

    pub fn get(&self, index: usize) -> &dyn EmbeddingPlugin {
        self.plugins[index].as_ref()
    }
}

impl std::fmt::Debug for PluginRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list()
            .entries(self.plugins.iter().map(|p| p.type_prefix().to_string()))
            .finish()
    }
}
