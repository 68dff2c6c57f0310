use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::rdl::{
    is_assignable, is_vnode_type, validate_graph, Layer, NetworkElement, ResourceKind, TopologyGraph,
};

use super::{EntryClass, MappingLayer, ObjectiveSpec, SolverError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capacity {
    pub amount: f64,
    /// Shareable capacity is never decremented; each demand only has to fit.
    pub shareable: bool,
}

/// Residual capacity per substrate element and resource kind. Elements that
/// do not declare a kind have no entry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Capacities {
    by_element: BTreeMap<String, BTreeMap<ResourceKind, Capacity>>,
}

impl Capacities {
    pub fn from_graph(g: &TopologyGraph) -> Self {
        let mut caps = Capacities::default();
        for ne in g.elements() {
            for r in ne.resources.values() {
                caps.set(
                    &ne.id,
                    r.kind,
                    Capacity {
                        amount: r.amount,
                        shareable: r.shareable,
                    },
                );
            }
        }
        caps
    }

    pub fn get(&self, ne: &str, kind: ResourceKind) -> Option<Capacity> {
        self.by_element.get(ne)?.get(&kind).copied()
    }

    pub fn set(&mut self, ne: &str, kind: ResourceKind, cap: Capacity) {
        self.by_element.entry(ne.to_string()).or_default().insert(kind, cap);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ResourceKind, Capacity)> {
        self.by_element
            .iter()
            .flat_map(|(ne, m)| m.iter().map(move |(k, c)| (ne.as_str(), *k, *c)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidatePolicy {
    /// Type assignability plus feature equality. Provider stubs
    /// (`/node/host/pip`) only host provider stubs.
    Exact,
    /// Provider-level view: a `/node/host/pip` node stands for every host
    /// inside that provider and accepts any host-like request node.
    Aggregate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MigrationCosts {
    pub node_move_per_mib: f64,
    pub link_remap_per_mbit: f64,
}

impl Default for MigrationCosts {
    fn default() -> Self {
        MigrationCosts {
            node_move_per_mib: 1.0,
            link_remap_per_mbit: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemOptions {
    /// Maximum number of substrate links on a candidate path.
    pub max_path_len: usize,
    pub policy: CandidatePolicy,
    pub costs: MigrationCosts,
}

impl Default for ProblemOptions {
    fn default() -> Self {
        ProblemOptions {
            max_path_len: 4,
            policy: CandidatePolicy::Exact,
            costs: MigrationCosts::default(),
        }
    }
}

/// A simple substrate path, alternating node and link ids and starting and
/// ending at a node. A single node is the path between co-located endpoints.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubstratePath(pub Vec<String>);

impl SubstratePath {
    pub fn source(&self) -> &str {
        &self.0[0]
    }

    pub fn target(&self) -> &str {
        self.0.last().expect("paths are non-empty")
    }

    pub fn hops(&self) -> usize {
        self.0.len() / 2
    }

    pub fn nodes(&self) -> impl Iterator<Item = &str> {
        self.0.iter().step_by(2).map(String::as_str)
    }

    pub fn links(&self) -> impl Iterator<Item = &str> {
        self.0.iter().skip(1).step_by(2).map(String::as_str)
    }
}

impl fmt::Display for SubstratePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" > "))
    }
}

pub(crate) fn is_pip_stub(ne: &NetworkElement) -> bool {
    ne.type_path.segments() == ["node", "host", "pip"]
}

fn features_match(request: &NetworkElement, substrate: &NetworkElement) -> bool {
    request.features.values().all(|f| match (f.value.specified(), substrate.feature_value(&f.key)) {
        (Some(want), Some(have)) => want == have,
        _ => true,
    })
}

/// Whether `substrate` may host `request` under `policy`.
pub fn candidate_ok(policy: CandidatePolicy, request: &NetworkElement, substrate: &NetworkElement) -> bool {
    if !request.is_node() || !substrate.is_node() || !features_match(request, substrate) {
        return false;
    }
    match policy {
        CandidatePolicy::Exact => {
            is_assignable(&request.type_path, &substrate.type_path)
                && (!is_pip_stub(substrate) || is_pip_stub(request))
        }
        CandidatePolicy::Aggregate => {
            if is_pip_stub(substrate) {
                is_vnode_type(&request.type_path) || is_assignable(&request.type_path, &substrate.type_path)
            } else {
                is_assignable(&request.type_path, &substrate.type_path)
            }
        }
    }
}

/// All simple paths from `from` to `to` with at most `max_hops` links,
/// ordered by hop count and then element ids.
pub fn enumerate_paths(g: &TopologyGraph, from: &str, to: &str, max_hops: usize) -> Vec<SubstratePath> {
    if from == to {
        return vec![SubstratePath(vec![from.to_string()])];
    }
    let mut adj: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
    for link in g.links() {
        if let Some((a, b)) = g.link_endpoints(&link.id) {
            if a != b {
                adj.entry(a.clone()).or_default().push((link.id.clone(), b.clone()));
                adj.entry(b).or_default().push((link.id.clone(), a));
            }
        }
    }
    let mut out = Vec::new();
    let mut path = vec![from.to_string()];
    let mut visited: BTreeSet<String> = [from.to_string()].into();
    fn walk(
        adj: &BTreeMap<String, Vec<(String, String)>>,
        to: &str,
        max_hops: usize,
        path: &mut Vec<String>,
        visited: &mut BTreeSet<String>,
        out: &mut Vec<SubstratePath>,
    ) {
        let here = path.last().expect("non-empty").clone();
        if here == to {
            out.push(SubstratePath(path.clone()));
            return;
        }
        if path.len() / 2 >= max_hops {
            return;
        }
        let Some(next) = adj.get(&here) else { return };
        for (link, node) in next {
            if visited.contains(node) {
                continue;
            }
            visited.insert(node.clone());
            path.push(link.clone());
            path.push(node.clone());
            walk(adj, to, max_hops, path, visited, out);
            path.pop();
            path.pop();
            visited.remove(node);
        }
    }
    walk(&adj, to, max_hops, &mut path, &mut visited, &mut out);
    out.sort_by(|a, b| (a.hops(), &a.0).cmp(&(b.hops(), &b.0)));
    out
}

/// Everything the search needs, with candidate sets precomputed.
#[derive(Debug, Clone)]
pub struct EmbeddingProblem {
    pub substrate: TopologyGraph,
    pub request: TopologyGraph,
    /// Request node id -> candidate substrate node ids, sorted.
    pub candidate_map: BTreeMap<String, Vec<String>>,
    /// Request link id -> (source host, target host) -> paths.
    pub candidate_paths: BTreeMap<String, BTreeMap<(String, String), Vec<SubstratePath>>>,
    /// Request link id -> endpoint request nodes.
    pub link_endpoints: BTreeMap<String, (String, String)>,
    pub capacities: Capacities,
    pub objective: ObjectiveSpec,
    pub prior: Option<MappingLayer>,
    pub options: ProblemOptions,
}

impl EmbeddingProblem {
    /// Whether a request node takes part in the host count.
    pub fn counts_as_host(&self, request_node: &str) -> bool {
        self.request.element(request_node).is_some_and(|e| !is_pip_stub(e))
    }
}

pub struct ProblemBuilder<'a> {
    substrate: &'a TopologyGraph,
    request: &'a TopologyGraph,
    objective: ObjectiveSpec,
    prior: Option<&'a MappingLayer>,
    capacities: Option<Capacities>,
    options: ProblemOptions,
}

impl<'a> ProblemBuilder<'a> {
    pub fn new(substrate: &'a TopologyGraph, request: &'a TopologyGraph) -> Self {
        ProblemBuilder {
            substrate,
            request,
            objective: ObjectiveSpec::default(),
            prior: None,
            capacities: None,
            options: ProblemOptions::default(),
        }
    }

    pub fn objective(mut self, objective: ObjectiveSpec) -> Self {
        self.objective = objective;
        self
    }

    pub fn prior(mut self, prior: Option<&'a MappingLayer>) -> Self {
        self.prior = prior;
        self
    }

    /// Residual capacities; defaults to the substrate's declared resources.
    pub fn capacities(mut self, capacities: Capacities) -> Self {
        self.capacities = Some(capacities);
        self
    }

    pub fn options(mut self, options: ProblemOptions) -> Self {
        self.options = options;
        self
    }

    pub fn build(self) -> Result<EmbeddingProblem, SolverError> {
        let (substrate, request) = (self.substrate, self.request);
        if substrate.layer != Layer::Ul {
            return Err(SolverError::NotSubstrate(substrate.layer));
        }
        if request.layer != Layer::Ol1 {
            return Err(SolverError::NotCompleted(request.layer));
        }
        for (name, g) in [("substrate", substrate), ("request", request)] {
            let report = validate_graph(g);
            if !report.is_ok() {
                return Err(SolverError::InvalidGraph { graph: name, report });
            }
        }
        self.objective.validate(self.prior.is_some())?;

        let capacities = self.capacities.unwrap_or_else(|| Capacities::from_graph(substrate));
        for (ne, kind, cap) in capacities.iter() {
            if !(cap.amount.is_finite() && cap.amount >= 0.0) {
                return Err(SolverError::InvalidCapacities(format!("{ne}/{kind}")));
            }
        }

        let mut substrate_nodes: Vec<&NetworkElement> = substrate.nodes().collect();
        substrate_nodes.sort_by(|a, b| a.id.cmp(&b.id));
        let mut request_nodes: Vec<&NetworkElement> = request.nodes().collect();
        request_nodes.sort_by(|a, b| a.id.cmp(&b.id));

        let mut candidate_map = BTreeMap::new();
        for rn in request_nodes {
            let cands: Vec<String> = substrate_nodes
                .iter()
                .filter(|s| candidate_ok(self.options.policy, rn, s))
                .map(|s| s.id.clone())
                .collect();
            if cands.is_empty() {
                return Err(SolverError::NoCandidates(rn.id.clone()));
            }
            candidate_map.insert(rn.id.clone(), cands);
        }

        let mut link_endpoints = BTreeMap::new();
        let mut candidate_paths = BTreeMap::new();
        let mut cache: BTreeMap<(String, String), Vec<SubstratePath>> = BTreeMap::new();
        for link in request.links() {
            let (a, b) = request
                .link_endpoints(&link.id)
                .expect("validated request links have two endpoints");
            let mut by_pair = BTreeMap::new();
            for s in &candidate_map[&a] {
                for t in &candidate_map[&b] {
                    let key = (s.clone(), t.clone());
                    let paths = cache
                        .entry(key.clone())
                        .or_insert_with(|| enumerate_paths(substrate, s, t, self.options.max_path_len))
                        .clone();
                    if !paths.is_empty() {
                        by_pair.insert(key, paths);
                    }
                }
            }
            if by_pair.is_empty() {
                return Err(SolverError::NoCandidates(link.id.clone()));
            }
            link_endpoints.insert(link.id.clone(), (a, b));
            candidate_paths.insert(link.id.clone(), by_pair);
        }

        if let Some(prior) = self.prior {
            prior.check_shape().map_err(SolverError::InvalidPrior)?;
            for (id, entry) in &prior.entries {
                for seg in entry.all_segments() {
                    if substrate.element(&seg.ul_ne_id).is_none() {
                        return Err(SolverError::InvalidPrior(format!(
                            "{id} uses unknown substrate element {}",
                            seg.ul_ne_id
                        )));
                    }
                }
                let expected = if request.element(id).is_some_and(|e| e.is_link()) {
                    EntryClass::Link
                } else {
                    EntryClass::Node
                };
                if request.element(id).is_some() && entry.class != expected {
                    return Err(SolverError::InvalidPrior(format!("{id} has the wrong entry class")));
                }
            }
        }

        Ok(EmbeddingProblem {
            substrate: substrate.clone(),
            request: request.clone(),
            candidate_map,
            candidate_paths,
            link_endpoints,
            capacities,
            objective: self.objective,
            prior: self.prior.cloned(),
            options: self.options,
        })
    }
}

/// Builds a problem with default options and capacities taken from the
/// substrate's declared resources.
pub fn build_problem(
    substrate: &TopologyGraph,
    request: &TopologyGraph,
    objective: ObjectiveSpec,
    prior: Option<&MappingLayer>,
) -> Result<EmbeddingProblem, SolverError> {
    ProblemBuilder::new(substrate, request)
        .objective(objective)
        .prior(prior)
        .build()
}
