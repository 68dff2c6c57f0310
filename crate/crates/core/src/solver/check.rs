use std::collections::{BTreeMap, BTreeSet};

use crate::rdl::ResourceKind;

use super::migration::{freed_resources, migration_cost};
use super::problem::candidate_ok;
use super::{EmbeddingProblem, EmbeddingSolution};

const EPS: f64 = 1e-9;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= EPS * a.abs().max(b.abs()).max(1.0)
}

/// Recomputes feasibility and every reported figure of `sol` from scratch.
/// Returns one message per problem found.
pub fn solution_violations(p: &EmbeddingProblem, sol: &EmbeddingSolution) -> Vec<String> {
    let mut out = Vec::new();
    let sub = &p.substrate;

    for rn in p.request.nodes() {
        match sol.node_assign.get(&rn.id) {
            None => out.push(format!("{} is not placed", rn.id)),
            Some(host) => match sub.element(host) {
                Some(s) if candidate_ok(p.options.policy, rn, s) => {}
                Some(_) => out.push(format!("{} cannot run on {host}", rn.id)),
                None => out.push(format!("{} placed on unknown {host}", rn.id)),
            },
        }
    }
    for id in sol.node_assign.keys() {
        if p.request.element(id).is_none_or(|e| !e.is_node()) {
            out.push(format!("{id} is not a request node"));
        }
    }

    for rl in p.request.links() {
        let Some(path) = sol.link_assign.get(&rl.id) else {
            out.push(format!("{} is not routed", rl.id));
            continue;
        };
        let ids = &path.0;
        let (a, b) = p.request.link_endpoints(&rl.id).unwrap_or_default();
        if ids.is_empty() || ids.len() % 2 == 0 {
            out.push(format!("{} has a malformed path", rl.id));
            continue;
        }
        if sol.node_assign.get(&a) != Some(&ids[0]) || sol.node_assign.get(&b) != ids.last() {
            out.push(format!("{} path does not join its endpoint hosts", rl.id));
        }
        if path.hops() > p.options.max_path_len {
            out.push(format!("{} path is too long", rl.id));
        }
        let distinct: BTreeSet<&String> = ids.iter().collect();
        if distinct.len() != ids.len() {
            out.push(format!("{} path is not simple", rl.id));
        }
        for w in ids.windows(3).step_by(2) {
            let ok = sub.element(&w[1]).is_some_and(|e| e.is_link())
                && sub.link_endpoints(&w[1]).is_some_and(|(x, y)| {
                    (x == w[0] && y == w[2]) || (x == w[2] && y == w[0])
                });
            if !ok {
                out.push(format!("{} hop {} > {} > {} is not in the substrate", rl.id, w[0], w[1], w[2]));
            }
        }
    }
    for id in sol.link_assign.keys() {
        if p.request.element(id).is_none_or(|e| !e.is_link()) {
            out.push(format!("{id} is not a request link"));
        }
    }

    // (element, kind) -> individual demands
    let mut demands: BTreeMap<(String, ResourceKind), Vec<f64>> = BTreeMap::new();
    for (id, host) in &sol.node_assign {
        let Some(ne) = p.request.element(id) else { continue };
        for r in ne.resources.values() {
            if r.amount > 0.0 {
                demands.entry((host.clone(), r.kind)).or_default().push(r.amount);
            }
        }
    }
    for (id, path) in &sol.link_assign {
        let bw = p.request.element(id).map_or(0.0, |e| e.amount(ResourceKind::Bandwidth));
        if bw <= 0.0 {
            continue;
        }
        for e in &path.0 {
            if p.capacities.get(e, ResourceKind::Bandwidth).is_some() {
                demands.entry((e.clone(), ResourceKind::Bandwidth)).or_default().push(bw);
            }
        }
    }
    let mut congestion: f64 = 0.0;
    for ((e, kind), list) in &demands {
        let Some(cap) = p.capacities.get(e, *kind) else {
            out.push(format!("{e} has no {kind} capacity"));
            continue;
        };
        if cap.shareable {
            if list.iter().any(|d| *d > cap.amount + EPS) {
                out.push(format!("{e} shared {kind} too small"));
            }
            continue;
        }
        let total: f64 = list.iter().sum();
        if total > cap.amount * (1.0 + EPS) + EPS {
            out.push(format!("{e} {kind} overcommitted: {total} > {}", cap.amount));
        }
        if cap.amount > 0.0 {
            congestion = congestion.max(total / cap.amount);
        }
    }

    let hosts: BTreeSet<&String> = sol
        .node_assign
        .iter()
        .filter(|(id, _)| p.counts_as_host(id))
        .map(|(_, h)| h)
        .collect();
    let migration = migration_cost(p, sol);
    let objective = p.objective.value(congestion, hosts.len(), migration);

    if !close(congestion, sol.congestion) {
        out.push(format!("congestion {} != recomputed {congestion}", sol.congestion));
    }
    if hosts.len() != sol.hosts_used {
        out.push(format!("hosts_used {} != recomputed {}", sol.hosts_used, hosts.len()));
    }
    if !close(migration, sol.migration_cost) {
        out.push(format!("migration_cost {} != recomputed {migration}", sol.migration_cost));
    }
    if !close(objective, sol.objective_value) {
        out.push(format!("objective {} != recomputed {objective}", sol.objective_value));
    }
    if freed_resources(p, &sol.node_assign) != sol.freed_resources {
        out.push("freed_resources mismatch".to_string());
    }
    out
}

pub fn check_solution(p: &EmbeddingProblem, sol: &EmbeddingSolution) -> bool {
    solution_violations(p, sol).is_empty()
}
