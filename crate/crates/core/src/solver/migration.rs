use std::collections::{BTreeMap, BTreeSet};

use crate::rdl::ResourceKind;

use super::{EmbeddingProblem, EmbeddingSolution, EntryClass, MappingEntry, MappingLayer, Segment};

#[derive(Debug, Clone, PartialEq)]
pub struct NodeMove {
    pub node: String,
    pub from: String,
    pub to: String,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkRemap {
    pub link: String,
    pub from: Vec<String>,
    pub to: Vec<String>,
    pub cost: f64,
}

/// What it takes to go from the prior mapping to a new solution.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MigrationPlan {
    pub moves: Vec<NodeMove>,
    pub remaps: Vec<LinkRemap>,
    pub cost: f64,
    pub hosts_before: usize,
    pub hosts_after: usize,
    pub freed_resources: BTreeMap<ResourceKind, f64>,
}

impl MigrationPlan {
    pub fn is_noop(&self) -> bool {
        self.moves.is_empty() && self.remaps.is_empty()
    }
}

fn prior_hosts(p: &EmbeddingProblem) -> BTreeSet<String> {
    let Some(prior) = &p.prior else {
        return BTreeSet::new();
    };
    prior
        .node_entries()
        .filter(|(id, _)| p.request.element(id).is_none() || p.counts_as_host(id))
        .map(|(_, e)| e.segments[0].ul_ne_id.clone())
        .collect()
}

/// Declared resources of hosts the prior mapping used that `node_assign`
/// leaves empty.
pub(crate) fn freed_resources(
    p: &EmbeddingProblem,
    node_assign: &BTreeMap<String, String>,
) -> BTreeMap<ResourceKind, f64> {
    let now: BTreeSet<&String> = node_assign
        .iter()
        .filter(|(id, _)| p.counts_as_host(id))
        .map(|(_, h)| h)
        .collect();
    let mut freed = BTreeMap::new();
    for host in prior_hosts(p) {
        if now.contains(&host) {
            continue;
        }
        if let Some(ne) = p.substrate.element(&host) {
            for r in ne.resources.values() {
                *freed.entry(r.kind).or_insert(0.0) += r.amount;
            }
        }
    }
    freed
}

fn moves_and_remaps(p: &EmbeddingProblem, sol: &EmbeddingSolution) -> (Vec<NodeMove>, Vec<LinkRemap>) {
    let Some(prior) = &p.prior else {
        return (Vec::new(), Vec::new());
    };
    let costs = p.options.costs;
    let mut moves = Vec::new();
    for (id, host) in &sol.node_assign {
        let Some(from) = prior.host_of(id) else { continue };
        if from != host {
            let ram = p.request.element(id).map_or(0.0, |e| e.amount(ResourceKind::Ram));
            moves.push(NodeMove {
                node: id.clone(),
                from: from.to_string(),
                to: host.clone(),
                cost: ram * costs.node_move_per_mib,
            });
        }
    }
    let mut remaps = Vec::new();
    for (id, path) in &sol.link_assign {
        let Some(entry) = prior.entries.get(id).filter(|e| e.class == EntryClass::Link) else {
            continue;
        };
        let from = entry.path();
        if from != path.0 {
            let bw = p.request.element(id).map_or(0.0, |e| e.amount(ResourceKind::Bandwidth));
            remaps.push(LinkRemap {
                link: id.clone(),
                from,
                to: path.0.clone(),
                cost: bw * costs.link_remap_per_mbit,
            });
        }
    }
    (moves, remaps)
}

pub(crate) fn migration_cost(p: &EmbeddingProblem, sol: &EmbeddingSolution) -> f64 {
    let (moves, remaps) = moves_and_remaps(p, sol);
    moves.iter().map(|m| m.cost).sum::<f64>() + remaps.iter().map(|r| r.cost).sum::<f64>()
}

pub fn analyze_migration(p: &EmbeddingProblem, sol: &EmbeddingSolution) -> MigrationPlan {
    let (moves, remaps) = moves_and_remaps(p, sol);
    let cost = moves.iter().map(|m| m.cost).sum::<f64>() + remaps.iter().map(|r| r.cost).sum::<f64>();
    MigrationPlan {
        moves,
        remaps,
        cost,
        hosts_before: prior_hosts(p).len(),
        hosts_after: sol.hosts_used,
        freed_resources: freed_resources(p, &sol.node_assign),
    }
}

/// Mapping layer for a solution. Link entries list the path's nodes as
/// segments and its substrate links as `via`, each carrying the bandwidth.
pub fn to_mapping_layer(p: &EmbeddingProblem, sol: &EmbeddingSolution) -> MappingLayer {
    let mut ml = MappingLayer::new(&p.request.id);
    for (id, host) in &sol.node_assign {
        let mut seg = Segment::new(host);
        if let Some(ne) = p.request.element(id) {
            for r in ne.resources.values() {
                seg = seg.with(r.kind, r.amount);
            }
        }
        ml.entries.insert(
            id.clone(),
            MappingEntry {
                class: EntryClass::Node,
                segments: vec![seg],
                via: Vec::new(),
            },
        );
    }
    for (id, path) in &sol.link_assign {
        let bw = p.request.element(id).and_then(|e| e.resource(ResourceKind::Bandwidth)).map(|r| r.amount);
        let seg = |ne: &str| match bw {
            Some(b) => Segment::new(ne).with(ResourceKind::Bandwidth, b),
            None => Segment::new(ne),
        };
        ml.entries.insert(
            id.clone(),
            MappingEntry {
                class: EntryClass::Link,
                segments: path.nodes().map(seg).collect(),
                via: path.links().map(seg).collect(),
            },
        );
    }
    ml
}
