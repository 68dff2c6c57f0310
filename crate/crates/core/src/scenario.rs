//! Canned federations booted in-process on loopback, and the named
//! scenarios the command line runs against them.
//!
//! Capacities are scenario configuration: `star13` sizes its providers so
//! that exactly twelve 512 mib vnodes fit the first and one fits the second.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use tempfile::TempDir;

use crate::clock::{Clock, ManualClock};
use crate::pip::{PipConfig, PipService, DEFAULT_TTL_MS};
use crate::rdl::{Feature, Layer, NetworkElement, Resource, ResourceKind, TopologyGraph};
use crate::solver::ObjectiveSpec;
use crate::vnp::{CloudNetState, PipEndpoint, RemotePip, VnpConfig, VnpError, VnpService};
use crate::wire::{call, Envelope, Handler, Server};

pub const SCENARIOS: [&str; 4] = ["star13", "rollback", "expiry", "compaction20"];

#[derive(Debug, Clone)]
pub struct HostSpec {
    pub id: String,
    pub ram: f64,
    pub cpu: f64,
}

#[derive(Debug, Clone)]
pub struct PipSpec {
    pub id: String,
    pub hosts: Vec<HostSpec>,
}

impl PipSpec {
    /// `n` identical hosts named `<pip>-h<i>`.
    pub fn uniform(id: &str, n: usize, ram: f64, cpu: f64) -> PipSpec {
        PipSpec {
            id: id.to_string(),
            hosts: (1..=n)
                .map(|i| HostSpec {
                    id: format!("{id}-h{i}"),
                    ram,
                    cpu,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FederationSpec {
    pub pips: Vec<PipSpec>,
    /// (pip, pip, mbit)
    pub transit: Vec<(String, String, f64)>,
    pub ttl_ms: u64,
}

/// Hosts on one switch, plus a tunnel bridge for transit traffic.
pub fn pip_substrate(spec: &PipSpec) -> TopologyGraph {
    let p = &spec.id;
    let mut g = TopologyGraph::new(format!("{p}-ul"), Layer::Ul);
    let sw = format!("{p}-sw");
    let br = format!("{p}-br");
    g.add_node(NetworkElement::of_type(&sw, "/node/switch/sim")).expect("fresh id");
    g.add_node(NetworkElement::of_type(&br, "/node/bridge/tunnel-sim")).expect("fresh id");
    g.add_link(
        NetworkElement::of_type(format!("{p}-trunk"), "/link/ethernet").with_resource(Resource::bandwidth(10_000.0)),
        &sw,
        &br,
    )
    .expect("fresh id");
    for h in &spec.hosts {
        g.add_node(
            NetworkElement::of_type(&h.id, "/node/host/sim")
                .with_resource(Resource::ram(h.ram))
                .with_resource(Resource::cpu(h.cpu))
                .with_feature(Feature::new("arch", "amd64"))
                .with_feature(Feature::new("virtualization", "sim-paravirt")),
        )
        .expect("fresh id");
        g.add_link(
            NetworkElement::of_type(format!("{}-up", h.id), "/link/ethernet")
                .with_resource(Resource::bandwidth(10_000.0)),
            &h.id,
            &sw,
        )
        .expect("fresh id");
    }
    g
}

/// Providers as aggregate nodes joined by transit links.
pub fn transit_graph(pips: &[&str], links: &[(String, String, f64)]) -> TopologyGraph {
    let mut g = TopologyGraph::new("transit", Layer::Ul);
    for p in pips {
        g.add_node(NetworkElement::of_type(*p, "/node/host/pip").with_feature(Feature::new("pip", p)))
            .expect("fresh id");
    }
    for (a, b, bw) in links {
        g.add_link(
            NetworkElement::of_type(format!("t-{a}-{b}"), "/link/transit").with_resource(Resource::bandwidth(*bw)),
            a,
            b,
        )
        .expect("fresh id");
    }
    g
}

/// Hub and `leaves` leaves of `ram` mib each, star links of `mbit`. The
/// architecture is left open but shared by all nodes.
pub fn star_request(leaves: usize, ram: f64, mbit: f64) -> TopologyGraph {
    let mut g = TopologyGraph::new(format!("star{}", leaves + 1), Layer::Ol0);
    let node = |id: &str| {
        NetworkElement::of_type(id, "/node/host/generic")
            .with_resource(Resource::ram(ram))
            .with_feature(Feature::unspecified("arch").in_group("compat"))
    };
    g.add_node(node("hub")).expect("fresh id");
    for i in 1..=leaves {
        let leaf = format!("leaf{i:02}");
        g.add_node(node(&leaf)).expect("fresh id");
        g.add_link(
            NetworkElement::of_type(format!("hub-{leaf}"), "/link/generic").with_resource(Resource::bandwidth(mbit)),
            "hub",
            &leaf,
        )
        .expect("fresh id");
    }
    g
}

/// Ten unlinked vnodes: eight of 768 mib and two of 512 mib.
pub fn compaction_request() -> TopologyGraph {
    let mut g = TopologyGraph::new("compact10", Layer::Ol0);
    for i in 1..=10 {
        let ram = if i <= 8 { 768.0 } else { 512.0 };
        g.add_node(NetworkElement::of_type(format!("vm{i:02}"), "/node/host/generic").with_resource(Resource::ram(ram)))
            .expect("fresh id");
    }
    g
}

pub fn star13_spec() -> FederationSpec {
    FederationSpec {
        pips: vec![PipSpec::uniform("pip1", 3, 2048.0, 4.0), PipSpec::uniform("pip2", 1, 512.0, 2.0)],
        transit: vec![("pip1".into(), "pip2".into(), 1000.0)],
        ttl_ms: DEFAULT_TTL_MS,
    }
}

/// Like `star13`, but the second provider's 512 mib are split over two
/// hosts, so its aggregate fits a leaf while no host does.
pub fn rollback_spec() -> FederationSpec {
    let mut spec = star13_spec();
    spec.pips[1] = PipSpec::uniform("pip2", 2, 256.0, 1.0);
    spec
}

pub fn compaction_spec() -> FederationSpec {
    FederationSpec {
        pips: vec![PipSpec::uniform("pip1", 5, 2048.0, 8.0)],
        transit: vec![],
        ttl_ms: DEFAULT_TTL_MS,
    }
}

/// Providers and a broker running on loopback with journals in a temporary
/// directory. Everything is torn down on drop.
pub struct Federation {
    pub clock: ManualClock,
    pub pips: BTreeMap<String, Arc<PipService>>,
    pub pip_addrs: BTreeMap<String, SocketAddr>,
    pub vnp: Arc<VnpService>,
    pub vnp_addr: SocketAddr,
    servers: Vec<Server>,
    _dir: TempDir,
}

impl Federation {
    pub fn start(spec: &FederationSpec) -> Result<Federation, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let clock = ManualClock::new(1_000_000);
        let shared: Arc<dyn Clock> = Arc::new(clock.clone());
        let mut pips = BTreeMap::new();
        let mut pip_addrs = BTreeMap::new();
        let mut servers = Vec::new();
        for p in &spec.pips {
            let mut cfg = PipConfig::new(&p.id, pip_substrate(p));
            cfg.ttl_ms = spec.ttl_ms;
            for (a, b, bw) in &spec.transit {
                if a == &p.id {
                    cfg.neighbors.insert(b.clone(), *bw);
                } else if b == &p.id {
                    cfg.neighbors.insert(a.clone(), *bw);
                }
            }
            let journal = dir.path().join(&p.id);
            let svc = Arc::new(PipService::with_journal(cfg, shared.clone(), &journal).map_err(|e| e.to_string())?);
            let handler: Arc<dyn Handler> = svc.clone();
            let server = Server::bind("127.0.0.1:0", handler).map_err(|e| e.to_string())?;
            pip_addrs.insert(p.id.clone(), server.local_addr());
            pips.insert(p.id.clone(), svc);
            servers.push(server);
        }
        let ids: Vec<&str> = spec.pips.iter().map(|p| p.id.as_str()).collect();
        let mut cfg = VnpConfig::new(transit_graph(&ids, &spec.transit));
        cfg.pips = pip_addrs.iter().map(|(k, v)| (k.clone(), v.to_string())).collect();
        let vnp = VnpService::new(cfg, shared)
            .and_then(|v| v.with_journal(&dir.path().join("vnp")))
            .map_err(|e| e.to_string())?;
        let vnp = Arc::new(vnp);
        let handler: Arc<dyn Handler> = vnp.clone();
        let server = Server::bind("127.0.0.1:0", handler).map_err(|e| e.to_string())?;
        let vnp_addr = server.local_addr();
        servers.push(server);
        Ok(Federation {
            clock,
            pips,
            pip_addrs,
            vnp,
            vnp_addr,
            servers,
            _dir: dir,
        })
    }

    pub fn pip(&self, id: &str) -> &Arc<PipService> {
        &self.pips[id]
    }

    /// Raw `sync_resources` reply body, as the broker would see it.
    pub fn sync_bytes(&self, pip: &str) -> Result<Vec<u8>, String> {
        let timeout = self.vnp.config().timeout;
        call(&self.pip_addrs[pip].to_string(), "sync_resources", Envelope::new().encode(), timeout)
            .map_err(|e| e.to_string())
    }

    pub fn live_contracts(&self) -> usize {
        self.pips.values().map(|p| p.read().live_contracts()).sum()
    }

    /// A fresh remote endpoint for `pip`, for swapping back after a fault.
    pub fn endpoint(&self, pip: &str) -> Arc<dyn PipEndpoint> {
        Arc::new(RemotePip {
            address: self.pip_addrs[pip].to_string(),
            timeout: self.vnp.config().timeout,
        })
    }

    pub fn shutdown(self) {
        for s in self.servers {
            s.shutdown();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub what: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct ScenarioReport {
    pub name: String,
    pub checks: Vec<Check>,
}

impl ScenarioReport {
    fn check(&mut self, what: &str, ok: bool, detail: impl Into<String>) -> bool {
        self.checks.push(Check {
            what: what.to_string(),
            ok,
            detail: detail.into(),
        });
        ok
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.ok)
    }

    pub fn first_failure(&self) -> Option<&Check> {
        self.checks.iter().find(|c| !c.ok)
    }
}

/// Boots a federation, runs the named scenario and tears it down.
pub fn run(name: &str) -> Result<ScenarioReport, String> {
    let mut report = ScenarioReport {
        name: name.to_string(),
        checks: Vec::new(),
    };
    match name {
        "star13" => star13(&mut report)?,
        "rollback" => rollback(&mut report)?,
        "expiry" => expiry(&mut report)?,
        "compaction20" => compaction20(&mut report)?,
        other => return Err(format!("unknown scenario {other:?}; known: {}", SCENARIOS.join(", "))),
    }
    Ok(report)
}

fn per_pip_counts(placement: &BTreeMap<String, String>) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for p in placement.values() {
        *out.entry(p.clone()).or_insert(0) += 1;
    }
    out
}

fn star13(r: &mut ScenarioReport) -> Result<(), String> {
    let fed = Federation::start(&star13_spec())?;
    let before: Vec<Vec<u8>> = ["pip1", "pip2"].iter().map(|p| fed.sync_bytes(p)).collect::<Result<_, _>>()?;
    let out = match fed.vnp.submit_cloudnet(&star_request(12, 512.0, 10.0)) {
        Ok(o) => o,
        Err(e) => {
            r.check("submit succeeds", false, e.to_string());
            return Ok(());
        }
    };
    r.check("submit succeeds", true, out.id.clone());
    let counts = per_pip_counts(&out.placement);
    r.check(
        "12 vnodes on pip1, 1 on pip2",
        counts.get("pip1") == Some(&12) && counts.get("pip2") == Some(&1),
        format!("{counts:?}"),
    );

    let rec = fed.vnp.cloudnet_status(&out.id).map_err(|e| e.to_string())?;
    let ml = rec.vnp_mapping.as_ref().ok_or("no mapping")?;
    let cross: Vec<&String> = ml.link_entries().filter(|(_, e)| !e.via.is_empty()).map(|(k, _)| k).collect();
    let over_transit = cross.len() == 1
        && ml.entries[cross[0]].via.iter().map(|s| s.ul_ne_id.as_str()).eq(["t-pip1-pip2"]);
    r.check("remote star link uses the transit link", over_transit, format!("{cross:?}"));

    let tags: Vec<Option<String>> = rec
        .per_pip
        .values()
        .map(|part| {
            cross
                .first()
                .and_then(|l| part.partial.element(l))
                .and_then(|e| e.feature_value("vlan").map(str::to_string))
        })
        .collect();
    let agree = tags.len() == 2 && tags[0].is_some() && tags[0] == tags[1];
    r.check("both partials carry the same VLAN tag", agree, format!("{tags:?}"));

    let tokens_ok = out.tokens.len() == 13
        && out
            .tokens
            .iter()
            .all(|(v, t)| t.starts_with(&format!("console://{}/", out.placement[v])));
    r.check("13 console tokens naming the right provider", tokens_ok, format!("{}", out.tokens.len()));

    fed.vnp.delete_cloudnet(&out.id).map_err(|e| e.to_string())?;
    let after: Vec<Vec<u8>> = ["pip1", "pip2"].iter().map(|p| fed.sync_bytes(p)).collect::<Result<_, _>>()?;
    r.check("delete restores both aggregates", before == after && fed.live_contracts() == 0, "");
    fed.shutdown();
    Ok(())
}

fn rollback(r: &mut ScenarioReport) -> Result<(), String> {
    let fed = Federation::start(&rollback_spec())?;
    let before = fed.sync_bytes("pip1")?;
    let res = fed.vnp.submit_cloudnet(&star_request(12, 512.0, 10.0));
    let rolled = matches!(&res, Err(e) if e.stage.as_str() == "embed"
        && matches!(&e.error, VnpError::RolledBack { pip, .. } if pip == "pip2"));
    r.check(
        "submit fails at embed after pip2 rejects",
        rolled,
        res.as_ref().err().map(|e| e.to_string()).unwrap_or_default(),
    );
    let deletes = fed.vnp.wire_log().calls_of("negotiate_delete");
    r.check(
        "delete sent to pip1 only",
        deletes.len() == 1 && deletes[0].pip == "pip1",
        format!("{} deletes", deletes.len()),
    );
    r.check("no live contracts remain", fed.live_contracts() == 0, format!("{}", fed.live_contracts()));
    r.check("pip1 aggregates byte-identical", fed.sync_bytes("pip1")? == before, "");
    fed.shutdown();
    Ok(())
}

fn expiry(r: &mut ScenarioReport) -> Result<(), String> {
    let spec = star13_spec();
    let ttl = spec.ttl_ms;
    let fed = Federation::start(&spec)?;
    let before = fed.sync_bytes("pip1")?;

    let id = fed.vnp.prepare(&star_request(12, 512.0, 10.0)).map_err(|e| e.to_string())?;
    r.check("preliminary contracts held", fed.live_contracts() == 2, "");
    fed.clock.advance(ttl + 1);
    let expired: usize = fed.pips.values().map(|p| p.tick().len()).sum();
    r.check("contracts auto-deleted after ttl", expired == 2 && fed.live_contracts() == 0, format!("{expired}"));
    let res = fed.vnp.finalize(&id);
    let refused = matches!(&res, Err(e) if matches!(&e.error, VnpError::ConfirmFailed { cause, .. }
        if cause.starts_with("not_preliminary")));
    r.check(
        "late confirmation fails",
        refused,
        res.as_ref().err().map(|e| e.to_string()).unwrap_or_default(),
    );
    r.check("aggregates restored", fed.sync_bytes("pip1")? == before, "");

    let id = fed.vnp.prepare(&star_request(12, 512.0, 10.0)).map_err(|e| e.to_string())?;
    fed.clock.advance(ttl - 1);
    let ok = fed.vnp.finalize(&id).is_ok();
    fed.clock.advance(10 * ttl);
    for p in fed.pips.values() {
        p.tick();
    }
    let state = fed.vnp.read().record(&id).map(|r| r.state);
    r.check(
        "timely confirmation persists",
        ok && state == Some(CloudNetState::Confirmed) && fed.live_contracts() == 2,
        format!("{state:?}"),
    );
    fed.shutdown();
    Ok(())
}

/// Declared resources of the hosts a provider currently uses.
pub fn used_host_resources(pip: &PipService) -> BTreeMap<ResourceKind, f64> {
    let st = pip.read();
    let mut hosts: Vec<String> = st.runtimes().map(|(_, rt)| rt.host.clone()).collect();
    hosts.sort();
    hosts.dedup();
    let mut out = BTreeMap::new();
    for h in hosts {
        if let Some(ne) = st.substrate().element(&h) {
            for r in ne.resources.values() {
                *out.entry(r.kind).or_insert(0.0) += r.amount;
            }
        }
    }
    out
}

fn compaction20(r: &mut ScenarioReport) -> Result<(), String> {
    let fed = Federation::start(&compaction_spec())?;
    let out = fed.vnp.submit_cloudnet(&compaction_request()).map_err(|e| e.to_string())?;
    let used = used_host_resources(fed.pip("pip1"));
    let plans = fed
        .vnp
        .migrate_analyze(&out.id, Some(ObjectiveSpec::compact()), false)
        .map_err(|e| e.to_string())?;
    let plan = plans.first().ok_or("no plan")?;
    let ram_used = used.get(&ResourceKind::Ram).copied().unwrap_or(0.0);
    let freed = plan.freed.get(&ResourceKind::Ram).copied().unwrap_or(0.0);
    r.check(
        "plan frees at least 20% of used node resources",
        ram_used > 0.0 && freed >= 0.2 * ram_used,
        format!("{freed} of {ram_used} mib"),
    );
    r.check("migration cost is positive", plan.cost > 0.0, format!("{}", plan.cost));
    r.check("analysis applies nothing", used_host_resources(fed.pip("pip1")) == used, "");

    let applied = fed
        .vnp
        .migrate_analyze(&out.id, Some(ObjectiveSpec::compact()), true)
        .map_err(|e| e.to_string())?;
    let status = fed.vnp.cloudnet_status(&out.id).map_err(|e| e.to_string())?;
    let moved_ok = applied[0].moves.iter().all(|(v, _, to)| {
        status
            .tokens
            .get(v)
            .is_some_and(|t| t == &format!("console://pip1/{to}/{v}"))
    });
    r.check(
        "applied plan shows in status",
        applied[0].applied && moved_ok && applied[0].hosts_after == plan.hosts_after,
        format!("{} moves", applied[0].moves.len()),
    );
    fed.shutdown();
    Ok(())
}
