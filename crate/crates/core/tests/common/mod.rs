//! Independent oracles shared by the integration tests. Nothing here calls
//! into the solver; feasibility, costs and objectives are recomputed from
//! the graphs directly.
#![allow(dead_code)]

pub mod drive;

use std::collections::{BTreeMap, BTreeSet};

use cloudnet_core::pip::PipState;
use cloudnet_core::rdl::{Feature, Layer, NetworkElement, Resource, ResourceKind, TopologyGraph};
use cloudnet_core::solver::{EntryClass, MappingEntry, MappingLayer, ObjectiveMode, ObjectiveSpec, Segment};
use rand::seq::SliceRandom;
use rand::Rng;

pub const RAM_COST: f64 = 1.0;
pub const BW_COST: f64 = 0.1;

/// Float comparison that only forgives summation-order rounding.
pub fn same(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

fn segs(ne: &NetworkElement) -> Vec<&str> {
    ne.type_path.segments().iter().map(String::as_str).collect()
}

/// Request type may run on substrate type: equal, or the request ends in
/// `generic` and the substrate shares everything before it.
fn type_fits(req: &NetworkElement, sub: &NetworkElement) -> bool {
    let (r, s) = (segs(req), segs(sub));
    if r == s {
        return true;
    }
    match r.split_last() {
        Some((&"generic", head)) => s.len() >= head.len() && s[..head.len()] == *head,
        _ => false,
    }
}

fn features_fit(req: &NetworkElement, sub: &NetworkElement) -> bool {
    req.features.values().all(|f| {
        let want = f.value.as_text();
        match sub.feature_value(&f.key) {
            Some(have) if want != "unspecified" => want == have,
            _ => true,
        }
    })
}

fn may_host(req: &NetworkElement, sub: &NetworkElement) -> bool {
    sub.is_node() && type_fits(req, sub) && features_fit(req, sub)
}

/// Every simple path of at most `max_links` links, as alternating ids.
pub fn all_paths(g: &TopologyGraph, from: &str, to: &str, max_links: usize) -> Vec<Vec<String>> {
    let mut adj: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
    for l in g.links() {
        if let Some((a, b)) = g.link_endpoints(&l.id) {
            adj.entry(a.clone()).or_default().push((l.id.clone(), b.clone()));
            adj.entry(b).or_default().push((l.id.clone(), a));
        }
    }
    let mut out = Vec::new();
    let mut path = vec![from.to_string()];
    fn walk(
        adj: &BTreeMap<String, Vec<(String, String)>>,
        to: &str,
        left: usize,
        path: &mut Vec<String>,
        out: &mut Vec<Vec<String>>,
    ) {
        let here = path.last().unwrap().clone();
        if here == to {
            out.push(path.clone());
            return;
        }
        if left == 0 {
            return;
        }
        for (link, next) in adj.get(&here).map(Vec::as_slice).unwrap_or(&[]) {
            if path.iter().step_by(2).any(|n| n == next) {
                continue;
            }
            path.push(link.clone());
            path.push(next.clone());
            walk(adj, to, left - 1, path, out);
            path.pop();
            path.pop();
        }
    }
    walk(&adj, to, max_links, &mut path, &mut out);
    out
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub substrate: TopologyGraph,
    pub request: TopologyGraph,
    pub objective: ObjectiveSpec,
    pub prior: Option<MappingLayer>,
    pub max_path_len: usize,
}

/// One complete embedding found by enumeration.
#[derive(Debug, Clone)]
pub struct Enumerated {
    pub nodes: BTreeMap<String, String>,
    pub links: BTreeMap<String, Vec<String>>,
    pub congestion: f64,
    pub hosts: usize,
    pub migration: f64,
    pub objective: f64,
}

/// Walks every node assignment and every path combination; calls `visit`
/// on each feasible embedding.
pub fn enumerate(inst: &Instance, mut visit: impl FnMut(Enumerated)) {
    let sub = &inst.substrate;
    let req = &inst.request;
    let mut rnodes: Vec<&NetworkElement> = req.nodes().collect();
    rnodes.sort_by(|a, b| a.id.cmp(&b.id));
    let hosts: Vec<Vec<String>> = rnodes
        .iter()
        .map(|r| sub.nodes().filter(|s| may_host(r, s)).map(|s| s.id.clone()).collect())
        .collect();
    let mut rlinks: Vec<(String, String, String, f64)> = req
        .links()
        .map(|l| {
            let (a, b) = req.link_endpoints(&l.id).unwrap();
            (l.id.clone(), a, b, l.amount(ResourceKind::Bandwidth))
        })
        .collect();
    rlinks.sort_by(|a, b| a.0.cmp(&b.0));

    // declared capacity per (element, kind): (amount, shareable)
    let mut cap: BTreeMap<(String, ResourceKind), (f64, bool)> = BTreeMap::new();
    for e in sub.elements() {
        for r in e.resources.values() {
            cap.insert((e.id.clone(), r.kind), (r.amount, r.shareable));
        }
    }

    let mut choice = vec![0usize; rnodes.len()];
    loop {
        if hosts.iter().all(|h| !h.is_empty()) {
            let nodes: BTreeMap<String, String> = rnodes
                .iter()
                .zip(&choice)
                .enumerate()
                .map(|(i, (r, &c))| (r.id.clone(), hosts[i][c].clone()))
                .collect();
            let options: Vec<Vec<Vec<String>>> = rlinks
                .iter()
                .map(|(_, a, b, _)| all_paths(sub, &nodes[a], &nodes[b], inst.max_path_len))
                .collect();
            if options.iter().all(|o| !o.is_empty()) {
                let mut pick = vec![0usize; rlinks.len()];
                loop {
                    let links: BTreeMap<String, Vec<String>> = rlinks
                        .iter()
                        .zip(&pick)
                        .enumerate()
                        .map(|(i, (l, &p))| (l.0.clone(), options[i][p].clone()))
                        .collect();
                    if let Some(e) = score(inst, &cap, &rnodes, &rlinks, nodes.clone(), links) {
                        visit(e);
                    }
                    if !advance(&mut pick, |i| options[i].len()) {
                        break;
                    }
                }
            }
        }
        if !advance(&mut choice, |i| hosts[i].len().max(1)) {
            break;
        }
    }
}

fn advance(digits: &mut [usize], base: impl Fn(usize) -> usize) -> bool {
    for (i, d) in digits.iter_mut().enumerate() {
        *d += 1;
        if *d < base(i) {
            return true;
        }
        *d = 0;
    }
    false
}

fn score(
    inst: &Instance,
    cap: &BTreeMap<(String, ResourceKind), (f64, bool)>,
    rnodes: &[&NetworkElement],
    rlinks: &[(String, String, String, f64)],
    nodes: BTreeMap<String, String>,
    links: BTreeMap<String, Vec<String>>,
) -> Option<Enumerated> {
    let mut load: BTreeMap<(String, ResourceKind), Vec<f64>> = BTreeMap::new();
    for r in rnodes {
        for res in r.resources.values() {
            if res.amount > 0.0 {
                load.entry((nodes[&r.id].clone(), res.kind)).or_default().push(res.amount);
            }
        }
    }
    for (id, _, _, bw) in rlinks {
        if *bw <= 0.0 {
            continue;
        }
        for e in &links[id] {
            if cap.contains_key(&(e.clone(), ResourceKind::Bandwidth)) {
                load.entry((e.clone(), ResourceKind::Bandwidth)).or_default().push(*bw);
            }
        }
    }
    let mut congestion: f64 = 0.0;
    for (key, demands) in &load {
        let &(amount, shareable) = cap.get(key)?;
        if shareable {
            if demands.iter().any(|d| *d > amount) {
                return None;
            }
            continue;
        }
        let total: f64 = demands.iter().sum();
        if total > amount {
            return None;
        }
        if amount > 0.0 {
            congestion = congestion.max(total / amount);
        }
    }
    let hosts = nodes.values().collect::<BTreeSet<_>>().len();
    let mut migration = 0.0;
    if let Some(prior) = &inst.prior {
        for r in rnodes {
            if let Some(old) = prior.entries.get(&r.id) {
                if old.segments[0].ul_ne_id != nodes[&r.id] {
                    migration += r.amount(ResourceKind::Ram) * RAM_COST;
                }
            }
        }
        for (id, _, _, bw) in rlinks {
            if let Some(old) = prior.entries.get(id) {
                if old.path() != links[id] {
                    migration += bw * BW_COST;
                }
            }
        }
    }
    let o = inst.objective;
    let placement = match o.mode {
        ObjectiveMode::MinCongestion => congestion,
        _ => hosts as f64,
    };
    Some(Enumerated {
        objective: o.alpha * placement + o.beta * migration,
        nodes,
        links,
        congestion,
        hosts,
        migration,
    })
}

/// Optimal objective value, or `None` when nothing is feasible.
pub fn brute_force_optimum(inst: &Instance) -> Option<f64> {
    let mut best: Option<f64> = None;
    enumerate(inst, |e| {
        if best.is_none_or(|b| e.objective < b) {
            best = Some(e.objective);
        }
    });
    best
}

/// A random small instance. Resource amounts are integers so that loads
/// and ratios are computed without rounding.
pub fn random_instance(rng: &mut impl Rng) -> Instance {
    let n_sub = rng.gen_range(2..=6);
    let mut sub = TopologyGraph::new("ul", Layer::Ul);
    let mut ids = Vec::new();
    for i in 0..n_sub {
        let id = format!("s{i}");
        let ne = if i > 0 && rng.gen_bool(0.2) {
            NetworkElement::of_type(&id, "/node/switch/sim")
        } else {
            let mut ne = NetworkElement::of_type(&id, if rng.gen_bool(0.8) { "/node/host/sim" } else { "/node/host/xen" })
                .with_resource(Resource::ram(*[512.0, 1024.0, 1536.0, 2048.0].choose(rng).unwrap()))
                .with_resource(Resource::cpu(rng.gen_range(1..=4) as f64));
            if rng.gen_bool(0.3) {
                ne.set_feature(Feature::new("arch", if rng.gen_bool(0.5) { "amd64" } else { "i386" }));
            }
            ne
        };
        sub.add_node(ne).unwrap();
        ids.push(id);
    }
    let mut n_links = 0;
    for i in 1..n_sub {
        let j = rng.gen_range(0..i);
        add_random_link(rng, &mut sub, &ids[i], &ids[j], &mut n_links);
    }
    for _ in 0..rng.gen_range(0..=2) {
        let (a, b) = (rng.gen_range(0..n_sub), rng.gen_range(0..n_sub));
        if a != b {
            add_random_link(rng, &mut sub, &ids[a], &ids[b], &mut n_links);
        }
    }

    let n_req = rng.gen_range(1..=5);
    let mut req = TopologyGraph::new("req", Layer::Ol1);
    let mut rids = Vec::new();
    for i in 0..n_req {
        let id = format!("v{i}");
        let mut ne = NetworkElement::of_type(&id, "/node/host/generic")
            .with_resource(Resource::ram(*[256.0, 512.0, 768.0, 1024.0].choose(rng).unwrap()))
            .with_resource(Resource::cpu(1.0));
        if rng.gen_bool(0.2) {
            ne.set_feature(Feature::new("arch", "amd64"));
        }
        req.add_node(ne).unwrap();
        rids.push(id);
    }
    let mut k = 0;
    for i in 1..n_req {
        if rng.gen_bool(0.8) {
            let j = rng.gen_range(0..i);
            let bw = *[0.0, 10.0, 50.0, 100.0].choose(rng).unwrap();
            let mut l = NetworkElement::of_type(format!("r{k}"), "/link/generic");
            if bw > 0.0 {
                l.set_resource(Resource::bandwidth(bw));
            }
            req.add_link(l, &rids[i], &rids[j]).unwrap();
            k += 1;
        }
    }

    let max_path_len = rng.gen_range(1..=3);
    let mut inst = Instance {
        substrate: sub,
        request: req,
        objective: ObjectiveSpec::min_congestion(),
        prior: None,
        max_path_len,
    };
    match rng.gen_range(0..3) {
        0 => {}
        1 => inst.objective = ObjectiveSpec::compact(),
        _ => {
            if let Some(prior) = random_prior(rng, &inst) {
                inst.prior = Some(prior);
                let alpha = *[0.0, 1.0, 100.0].choose(rng).unwrap();
                inst.objective = ObjectiveSpec::migration_aware(alpha, 1.0);
            }
        }
    }
    inst
}

fn add_random_link(rng: &mut impl Rng, g: &mut TopologyGraph, a: &str, b: &str, n: &mut usize) {
    let bw = *[50.0, 100.0, 200.0].choose(rng).unwrap();
    let mut r = Resource::bandwidth(bw);
    if rng.gen_bool(0.15) {
        r = r.shared();
    }
    g.add_link(NetworkElement::of_type(format!("l{n}"), "/link/ethernet").with_resource(r), a, b)
        .unwrap();
    *n += 1;
}

/// Some placement of the request, ignoring capacities, to act as the
/// current embedding.
fn random_prior(rng: &mut impl Rng, inst: &Instance) -> Option<MappingLayer> {
    let mut ml = MappingLayer::new(&inst.request.id);
    let mut placed = BTreeMap::new();
    for r in inst.request.nodes() {
        let cands: Vec<&NetworkElement> = inst.substrate.nodes().filter(|s| may_host(r, s)).collect();
        let host = cands.choose(rng)?.id.clone();
        placed.insert(r.id.clone(), host.clone());
        ml.entries.insert(
            r.id.clone(),
            MappingEntry {
                class: EntryClass::Node,
                segments: vec![Segment::new(host)],
                via: vec![],
            },
        );
    }
    for l in inst.request.links() {
        let (a, b) = inst.request.link_endpoints(&l.id).unwrap();
        let paths = all_paths(&inst.substrate, &placed[&a], &placed[&b], inst.max_path_len);
        let path = paths.choose(rng)?;
        ml.entries.insert(
            l.id.clone(),
            MappingEntry {
                class: EntryClass::Link,
                segments: path.iter().step_by(2).map(Segment::new).collect(),
                via: path.iter().skip(1).step_by(2).map(Segment::new).collect(),
            },
        );
    }
    Some(ml)
}

/// Cheapest way to pack `rams` onto the fewest hosts of capacity `cap`
/// starting from `prior` (vnode -> host index). Returns (hosts, cost).
pub fn min_compaction(rams: &[f64], cap: &[f64], prior: &[usize]) -> (usize, f64) {
    let n_hosts = cap.len();
    let mut best: Option<(usize, f64)> = None;
    let mut assign = vec![0usize; rams.len()];
    loop {
        let mut load = vec![0.0; n_hosts];
        for (v, &h) in assign.iter().enumerate() {
            load[h] += rams[v];
        }
        if load.iter().zip(cap).all(|(l, c)| l <= c) {
            let used = load.iter().filter(|l| **l > 0.0).count();
            let cost: f64 = assign
                .iter()
                .enumerate()
                .filter(|(v, h)| prior[*v] != **h)
                .map(|(v, _)| rams[v] * RAM_COST)
                .sum();
            if best.is_none_or(|(bu, bc)| used < bu || (used == bu && cost < bc)) {
                best = Some((used, cost));
            }
        }
        if !advance(&mut assign, |_| n_hosts) {
            break;
        }
    }
    best.expect("the prior itself is feasible")
}

/// Rebuilds a request from per-provider partials: drops provider stubs and
/// re-joins each transit link to the node on the other side.
pub fn reassemble(id: &str, partials: &BTreeMap<String, TopologyGraph>) -> TopologyGraph {
    let mut out = TopologyGraph::new(id, Layer::Ol1);
    let is_stub = |e: &NetworkElement| e.type_path.to_string() == "/node/host/pip";
    // link id -> real endpoint node ids seen in any partial
    let mut ends: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut links: BTreeMap<String, NetworkElement> = BTreeMap::new();
    for g in partials.values() {
        for n in g.nodes().filter(|n| !is_stub(n)) {
            out.add_node(n.clone()).expect("node appears in one partial only");
        }
        for l in g.links() {
            let (a, b) = g.link_endpoints(&l.id).unwrap();
            for x in [a, b] {
                if g.element(&x).is_some_and(|e| !is_stub(e)) {
                    ends.entry(l.id.clone()).or_default().insert(x);
                }
            }
            links.entry(l.id.clone()).or_insert_with(|| l.clone());
        }
    }
    for (id, mut l) in links {
        let e: Vec<String> = ends[&id].iter().cloned().collect();
        l.interfaces.clear();
        l.features.remove("vlan");
        let (a, b) = (e[0].clone(), e.get(1).cloned().unwrap_or_else(|| e[0].clone()));
        out.add_link(l, &a, &b).unwrap();
    }
    out
}

/// Checks that allocations recomputed from live contracts plus residuals
/// add up to declared capacity, nothing is overcommitted, and VLAN tags
/// are unique across live contracts.
pub fn check_conservation(st: &PipState) -> Result<(), String> {
    let ul = st.substrate();
    let mut declared: BTreeMap<(String, ResourceKind), (f64, bool)> = BTreeMap::new();
    for e in ul.elements() {
        for r in e.resources.values() {
            declared.insert((e.id.clone(), r.kind), (r.amount, r.shareable));
        }
    }
    let mut expect: BTreeMap<(String, ResourceKind), f64> = BTreeMap::new();
    let mut tags: BTreeMap<u16, String> = BTreeMap::new();
    for c in st.contracts().filter(|c| c.state.is_live()) {
        for entry in c.mapping.entries.values() {
            for seg in entry.segments.iter().chain(&entry.via) {
                for (&k, &v) in &seg.allocations {
                    if let Some(&(_, false)) = declared.get(&(seg.ul_ne_id.clone(), k)) {
                        *expect.entry((seg.ul_ne_id.clone(), k)).or_insert(0.0) += v;
                    }
                }
            }
        }
        for (link, tag) in &c.mapping.vlan_by_link {
            if let Some(other) = tags.insert(*tag, format!("{}:{link}", c.id)) {
                return Err(format!("VLAN {tag} used by {other} and {}:{link}", c.id));
            }
        }
    }
    let in_use: BTreeMap<u16, String> = st.vlan_in_use().clone();
    if in_use != tags {
        return Err(format!("VLAN table {in_use:?} != live contracts {tags:?}"));
    }
    let residual = st.residual_capacities();
    for ((ne, kind), (amount, shareable)) in &declared {
        let alloc = expect.get(&(ne.clone(), *kind)).copied().unwrap_or(0.0);
        let reported = st.allocated().get(&(ne.clone(), *kind)).copied().unwrap_or(0.0);
        if !same(alloc, reported) {
            return Err(format!("{ne}/{kind}: allocated {reported}, contracts say {alloc}"));
        }
        let res = residual.get(ne, *kind).map(|c| c.amount).ok_or(format!("{ne}/{kind} has no residual"))?;
        if *shareable {
            if res != *amount {
                return Err(format!("{ne}/{kind}: shareable residual {res} != {amount}"));
            }
        } else {
            if alloc > amount + 1e-9 {
                return Err(format!("{ne}/{kind}: overcommitted {alloc} > {amount}"));
            }
            if !same(alloc + res, *amount) {
                return Err(format!("{ne}/{kind}: {alloc} + {res} != {amount}"));
            }
        }
    }
    Ok(())
}
