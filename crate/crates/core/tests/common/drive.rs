//! Randomised drivers that exercise the real implementation and judge it
//! with the oracles in the parent module.

use cloudnet_core::pip::{PipConfig, PipError, PipState, VlanRange};
use cloudnet_core::rdl::{Feature, Layer, NetworkElement, NetworkInterface, Resource, ResourceKind, TopologyGraph};
use cloudnet_core::scenario::{pip_substrate, PipSpec};
use cloudnet_core::solver::{
    check_solution, solution_violations, solve, EmbeddingProblem, EmbeddingSolution, ObjectiveSpec, ProblemBuilder,
    ProblemOptions, SearchLimits, SolverError,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{brute_force_optimum, check_conservation, random_instance, same, Instance};

const ID_CHARS: &[char] = &['a', 'b', 'z', '0', '7', '-', '_', ' ', ';', '=', '\\', 'é', '\n', '\r', ':', '/'];
const NODE_TYPES: &[&str] = &["/node/host/sim", "/node/host/generic", "/node/switch/sim", "/node/bridge/tunnel-sim", "/node/host/pip"];
const LINK_TYPES: &[&str] = &["/link/ethernet", "/link/generic", "/link/transit"];

fn ident(rng: &mut ChaCha8Rng, prefix: &str) -> String {
    let n = rng.gen_range(0..5);
    let tail: String = (0..n).map(|_| *ID_CHARS.choose(rng).unwrap()).collect();
    // '|' never appears in a tail, so the prefix keeps ids distinct
    format!("{prefix}|{tail}")
}

fn amount(rng: &mut ChaCha8Rng) -> f64 {
    match rng.gen_range(0..4) {
        0 => rng.gen_range(0..5000) as f64,
        1 => rng.gen::<f64>() * 1e6,
        2 => rng.gen::<f64>() * 1e-6,
        _ => 0.1 * rng.gen_range(0..100) as f64,
    }
}

fn decorate(rng: &mut ChaCha8Rng, ne: &mut NetworkElement, layer: Layer, kinds: &[ResourceKind]) {
    for &k in kinds {
        if rng.gen_bool(0.6) {
            let mut r = Resource::new(k, amount(rng));
            if rng.gen_bool(0.2) {
                r = r.shared();
            }
            ne.set_resource(r);
        }
    }
    for i in 0..rng.gen_range(0..3) {
        let key = ident(rng, &format!("k{i}"));
        let group = rng.gen_range(0..4);
        let mut f = if layer == Layer::Ol0 && rng.gen_bool(0.3) {
            Feature::unspecified(key)
        } else if group < 2 {
            Feature::new(key, &format!("grp-value-{group}"))
        } else {
            Feature::new(key, &ident(rng, "v"))
        };
        if group < 2 {
            f = f.in_group(format!("g{group}"));
        }
        ne.set_feature(f);
    }
}

/// A random valid graph, with a few extra unpeered node interfaces.
pub fn random_graph(seed: u64) -> TopologyGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = *[Layer::Ul, Layer::Ol0, Layer::Ol1].choose(&mut rng).unwrap();
    let mut g = TopologyGraph::new(ident(&mut rng, "g"), layer);
    let n = rng.gen_range(0..7);
    let mut nodes = Vec::new();
    for i in 0..n {
        let id = ident(&mut rng, &format!("n{i}"));
        let mut ne = NetworkElement::of_type(&id, NODE_TYPES.choose(&mut rng).unwrap());
        decorate(&mut rng, &mut ne, layer, &[ResourceKind::Ram, ResourceKind::Cpu]);
        g.add_node(ne).unwrap();
        if rng.gen_bool(0.2) {
            g.add_interface(NetworkInterface::new(format!("{id}#spare"), &id)).unwrap();
        }
        nodes.push(id);
    }
    if n > 1 {
        for i in 0..rng.gen_range(0..8) {
            let pair: Vec<_> = nodes.choose_multiple(&mut rng, 2).cloned().collect();
            let (a, b) = (pair[0].clone(), pair[1].clone());
            let mut l = NetworkElement::of_type(ident(&mut rng, &format!("l{i}")), LINK_TYPES.choose(&mut rng).unwrap());
            decorate(&mut rng, &mut l, layer, &[ResourceKind::Bandwidth]);
            g.add_link(l, &a, &b).unwrap();
        }
    }
    g
}

pub fn solve_instance(inst: &Instance) -> Result<(EmbeddingProblem, EmbeddingSolution), SolverError> {
    let p = ProblemBuilder::new(&inst.substrate, &inst.request)
        .objective(inst.objective)
        .prior(inst.prior.as_ref())
        .options(ProblemOptions { max_path_len: inst.max_path_len, ..ProblemOptions::default() })
        .build()?;
    let s = solve(&p, SearchLimits::default())?;
    Ok((p, s))
}

/// Solves `count` random instances and compares each with brute force.
/// Returns (feasible, infeasible) counts.
pub fn solver_agreement(seed: u64, count: usize) -> Result<(usize, usize), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut feasible, mut infeasible) = (0, 0);
    for i in 0..count {
        let inst = random_instance(&mut rng);
        match (solve_instance(&inst), brute_force_optimum(&inst)) {
            (Ok((p, s)), Some(best)) => {
                if !same(s.objective_value, best) {
                    return Err(format!("instance {i}: solver {} oracle {best}\n{inst:#?}", s.objective_value));
                }
                if !check_solution(&p, &s) {
                    return Err(format!("instance {i}: {:?}", solution_violations(&p, &s)));
                }
                feasible += 1;
            }
            (Err(SolverError::Infeasible(_) | SolverError::NoCandidates(_)), None) => infeasible += 1,
            (got, want) => return Err(format!("instance {i}: solver {:?} oracle {want:?}", got.map(|r| r.1))),
        }
    }
    Ok((feasible, infeasible))
}

fn vm(id: &str, ram: f64) -> NetworkElement {
    NetworkElement::of_type(id, "/node/host/generic").with_resource(Resource::ram(ram))
}

fn with_stub(mut g: TopologyGraph, node: &str, tag: u16) -> TopologyGraph {
    g.add_node(NetworkElement::of_type("stub.pip9", "/node/host/pip").with_feature(Feature::new("pip", "pip9")))
        .unwrap();
    let l = NetworkElement::of_type(format!("x-{node}"), "/link/transit")
        .with_resource(Resource::bandwidth(10.0))
        .with_feature(Feature::new("vlan", &tag.to_string()));
    g.add_link(l, node, "stub.pip9").unwrap();
    g
}

pub fn random_partial(rng: &mut ChaCha8Rng, id: &str) -> TopologyGraph {
    let n = rng.gen_range(1..=3);
    let rams: Vec<f64> = (0..n).map(|_| *[256.0, 512.0, 1024.0].choose(rng).unwrap()).collect();
    let mut g = TopologyGraph::new(id, Layer::Ol0);
    for (i, r) in rams.iter().enumerate() {
        g.add_node(vm(&format!("v{i}"), *r)).unwrap();
    }
    for i in 1..n {
        if rng.gen_bool(0.6) {
            let l = NetworkElement::of_type(format!("l{i}"), "/link/generic")
                .with_resource(Resource::bandwidth(*[10.0, 100.0, 5000.0].choose(rng).unwrap()));
            g.add_link(l, "v0", &format!("v{i}")).unwrap();
        }
    }
    if rng.gen_bool(0.3) {
        g = with_stub(g, "v0", rng.gen_range(2000..2004));
    }
    g
}

/// Random preliminary/confirm/delete/modify/expiry traffic against one
/// provider, checking conservation after every step. Returns how many
/// operations succeeded and failed.
pub fn churn(seed: u64, steps: usize) -> Result<[usize; 2], String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = PipConfig::new("pip1", pip_substrate(&PipSpec::uniform("pip1", 3, 2048.0, 4.0)));
    cfg.neighbors.insert("pip9".into(), 100.0);
    cfg.vlan_pool = VlanRange::new(100, 104);
    cfg.ttl_ms = 1000;
    let mut st = PipState::new(cfg).unwrap();
    let before = st.sync_resources();
    let mut now = 0u64;
    let mut outcomes = [0usize; 2];
    for step in 0..steps {
        now += rng.gen_range(0..300);
        st.expire_tick(now);
        let ids: Vec<String> = st.contracts().filter(|c| c.state.is_live()).map(|c| c.id.clone()).collect();
        let pick = ids.choose(&mut rng).cloned();
        let r: Result<(), PipError> = match (rng.gen_range(0..6), pick) {
            (0 | 1, _) | (_, None) => st.negotiate_preliminary(&random_partial(&mut rng, &format!("r{step}")), now).map(drop),
            (2, Some(id)) => st.negotiate_confirm(&id),
            (3, Some(id)) => st.negotiate_delete(&id),
            (4, Some(id)) => {
                let obj = if rng.gen_bool(0.5) { ObjectiveSpec::compact() } else { ObjectiveSpec::min_congestion() };
                st.negotiate_modify(&id, None, Some(obj), rng.gen_bool(0.7)).map(drop)
            }
            (_, Some(id)) => {
                let g = random_partial(&mut rng, "resized");
                st.negotiate_modify(&id, Some(&g), None, true).map(drop)
            }
        };
        outcomes[usize::from(r.is_err())] += 1;
        check_conservation(&st).map_err(|e| format!("step {step}: {e}"))?;
        if let Some(tag) = st.vlan_in_use().keys().find(|t| !(100..=104).contains(*t) && !(2000..2004).contains(*t)) {
            return Err(format!("step {step}: tag {tag} outside both pools"));
        }
    }
    let ids: Vec<String> = st.contracts().filter(|c| c.state.is_live()).map(|c| c.id.clone()).collect();
    for id in ids {
        st.negotiate_delete(&id).map_err(|e| e.to_string())?;
    }
    if st.sync_resources() != before || !st.vlan_in_use().is_empty() {
        return Err("deleting everything does not restore the provider".into());
    }
    if !st.sim().hosts.values().all(|h| h.vms.is_empty() && h.ports.is_empty()) {
        return Err("simulated hosts still carry state".into());
    }
    Ok(outcomes)
}
