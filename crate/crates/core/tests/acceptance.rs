//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;

use cloudnet_core::clock::ManualClock;
use cloudnet_core::codec::{deserialize, serialize, serialize_graph, deserialize_graph};
use cloudnet_core::pip::{PipConfig, PipService};
use cloudnet_core::rdl::{Layer, NetworkElement, Resource, ResourceKind, TopologyGraph};
use cloudnet_core::scenario::{
    self, compaction_request, compaction_spec, pip_substrate, Federation, FederationSpec, PipSpec,
};
use cloudnet_core::solver::ObjectiveSpec;
use cloudnet_core::wire::Envelope;
use common::drive::{churn, random_graph, solver_agreement};
use common::{min_compaction, same};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn scenario(name: &str) -> Outcome {
    let report = scenario::run(name)?;
    match report.first_failure() {
        None => Ok(format!("{} checks", report.checks.len())),
        Some(c) => Err(format!("{}: {}", c.what, c.detail)),
    }
}

fn sync_aggregation() -> Outcome {
    let fed = Federation::start(&FederationSpec {
        pips: vec![PipSpec::uniform("pip1", 3, 4096.0, 4.0)],
        transit: vec![],
        ttl_ms: 600_000,
    })?;
    let env = Envelope::decode(&fed.sync_bytes("pip1")?)?;
    let ram: f64 = env.require("ram")?.parse().map_err(|e| format!("{e}"))?;
    fed.shutdown();
    ensure(ram == 12288.0, format!("ram {ram}"))?;
    Ok("ram 12288 over the wire".into())
}

fn solver_optimality() -> Outcome {
    let (feasible, infeasible) = solver_agreement(0xacce97, 200)?;
    ensure(feasible >= 100, format!("only {feasible} feasible"))?;
    Ok(format!("{feasible} feasible and {infeasible} infeasible instances agree with brute force"))
}

fn compaction20() -> Outcome {
    let fed = Federation::start(&compaction_spec())?;
    let out = fed.vnp.submit_cloudnet(&compaction_request()).map_err(|e| e.to_string())?;
    let (rams, prior) = {
        let st = fed.pip("pip1").read();
        let c = st.contracts().find(|c| c.state.is_live()).ok_or("no contract")?;
        let mut rams = Vec::new();
        let mut prior = Vec::new();
        for n in c.request.nodes() {
            rams.push(n.resource(ResourceKind::Ram).map(|r| r.amount).unwrap_or(0.0));
            let h = c.mapping.host_of(&n.id).ok_or("unmapped vnode")?;
            prior.push((1..=5).position(|i| format!("pip1-h{i}") == h).ok_or("unknown host")?);
        }
        (rams, prior)
    };
    let used: BTreeSet<usize> = prior.iter().copied().collect();
    let used_ram = 2048.0 * used.len() as f64;
    let (hosts, cost) = min_compaction(&rams, &[2048.0; 5], &prior);
    let plans = fed
        .vnp
        .migrate_analyze(&out.id, Some(ObjectiveSpec::compact()), false)
        .map_err(|e| e.to_string())?;
    fed.shutdown();
    let plan = plans.first().ok_or("no plan")?;
    let freed = plan.freed.get(&ResourceKind::Ram).copied().unwrap_or(0.0);
    ensure(freed >= 0.2 * used_ram, format!("freed {freed} of {used_ram}"))?;
    ensure(plan.hosts_after == hosts, format!("{} hosts, oracle {hosts}", plan.hosts_after))?;
    ensure(same(plan.cost, cost), format!("cost {}, oracle {cost}", plan.cost))?;
    Ok(format!("frees {freed} of {used_ram} mib at cost {cost}"))
}

fn codec_round_trip() -> Outcome {
    for seed in 0..2000u64 {
        let g = random_graph(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let bytes = serialize_graph(&g).map_err(|e| e.to_string())?;
        let back = deserialize_graph(&bytes).map_err(|e| format!("seed {seed}: {e}"))?;
        ensure(back == g, format!("seed {seed}: graph changed"))?;
        ensure(serialize_graph(&back).map_err(|e| e.to_string())? == bytes, format!("seed {seed}: bytes changed"))?;
    }
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let stored = std::fs::read(&path).map_err(|e| e.to_string())?;
        let doc = deserialize(&stored).map_err(|e| format!("{}: {e}", path.display()))?;
        ensure(serialize(&doc).map_err(|e| e.to_string())? == stored, format!("{} not byte-stable", path.display()))?;
        n += 1;
    }
    ensure(n >= 4, format!("only {n} golden files"))?;
    Ok(format!("2000 random graphs, {n} golden files"))
}

fn churn_conservation() -> Outcome {
    let mut total = [0, 0];
    for seed in 1..=5 {
        let [ok, failed] = churn(seed, 400)?;
        total[0] += ok;
        total[1] += failed;
    }
    Ok(format!("{} operations ok, {} refused, invariants held", total[0], total[1]))
}

fn image_cache() -> Outcome {
    let cfg = PipConfig::new("pip1", pip_substrate(&PipSpec::uniform("pip1", 2, 2048.0, 4.0)));
    let svc = PipService::new(cfg, Arc::new(ManualClock::new(0))).map_err(|e| e.to_string())?;
    let request = |id: &str| {
        let mut g = TopologyGraph::new(id, Layer::Ol0);
        g.add_node(NetworkElement::of_type("vm", "/node/host/generic").with_resource(Resource::ram(512.0)))
            .map(|_| g)
    };
    let (cold, _) = svc.negotiate_preliminary(&request("a").map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let first = svc.read().image_outcome(&cold, "vm").ok_or("no image outcome")?;
    ensure(!first.cache_hit && first.copy_ops == 1, format!("cold {first:?}"))?;
    svc.replenish_cache();
    let (warm, _) = svc.negotiate_preliminary(&request("b").map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let second = svc.read().image_outcome(&warm, "vm").ok_or("no image outcome")?;
    ensure(second.cache_hit && second.copy_ops == 0, format!("warm {second:?}"))?;
    Ok("warm cache: cache_hit=true, 0 copy ops".into())
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 sync aggregation", sync_aggregation),
        ("2 star13 split over transit", || scenario("star13")),
        ("3 rollback", || scenario("rollback")),
        ("4 two-stage expiry", || scenario("expiry")),
        ("5 solver optimality", solver_optimality),
        ("6 compaction20", compaction20),
        ("7 codec round trip and golden files", codec_round_trip),
        ("8 churn conservation", churn_conservation),
        ("9 image cache", image_cache),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match res {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("{} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
