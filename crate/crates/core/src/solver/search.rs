use std::collections::HashMap;
use std::time::Instant;

use log::debug;

use crate::rdl::ResourceKind;

use super::migration::freed_resources;
use super::problem::Capacity;
use super::{
    EmbeddingProblem, EmbeddingSolution, EntryClass, InfeasibleReason, InfeasibleWitness, ObjectiveSpec,
    SearchLimits, SolverError,
};

const BW: usize = 2;
const UNSET: usize = usize::MAX;

type Score = (f64, f64, f64);

fn better(a: Score, b: Score) -> bool {
    a.partial_cmp(&b) == Some(std::cmp::Ordering::Less)
}

struct VNode {
    id: String,
    demand: [f64; 3],
    cands: Vec<usize>,
    prior: Option<usize>,
    move_cost: f64,
    counts: bool,
}

struct VLink {
    id: String,
    a: usize,
    b: usize,
    bw: f64,
    /// (host of a, host of b) -> indices into `Model::paths`.
    paths: HashMap<(usize, usize), Vec<usize>>,
    prior: Option<Vec<usize>>,
    remap_cost: f64,
}

#[derive(Clone, Copy)]
enum Step {
    Node(usize),
    Link(usize),
}

struct Model<'p> {
    problem: &'p EmbeddingProblem,
    ids: Vec<String>,
    cap: Vec<[Option<Capacity>; 3]>,
    vnodes: Vec<VNode>,
    vlinks: Vec<VLink>,
    steps: Vec<Step>,
    paths: Vec<Vec<usize>>,
    path_src: Vec<super::SubstratePath>,
    /// Vnodes still unplaced when the search reaches each depth.
    remaining: Vec<Vec<usize>>,
    objective: ObjectiveSpec,
}

impl<'p> Model<'p> {
    fn new(p: &'p EmbeddingProblem) -> Self {
        let mut ids: Vec<String> = p.substrate.elements().map(|e| e.id.clone()).collect();
        ids.sort();
        let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let cap = ids
            .iter()
            .map(|id| ResourceKind::ALL.map(|k| p.capacities.get(id, k)))
            .collect();

        let prior = p.prior.as_ref();
        let costs = p.options.costs;
        let mut vnodes = Vec::new();
        let mut vnode_pos = HashMap::new();
        for (id, cands) in &p.candidate_map {
            let ne = p.request.element(id).expect("candidate map keys are request nodes");
            let demand = ResourceKind::ALL.map(|k| ne.amount(k));
            let prior_host = prior
                .and_then(|ml| ml.entries.get(id))
                .filter(|e| e.class == EntryClass::Node)
                .map(|e| index[e.segments[0].ul_ne_id.as_str()]);
            vnode_pos.insert(id.as_str(), vnodes.len());
            vnodes.push(VNode {
                id: id.clone(),
                demand,
                cands: cands.iter().map(|c| index[c.as_str()]).collect(),
                prior: prior_host,
                move_cost: demand[ResourceKind::Ram.index()] * costs.node_move_per_mib,
                counts: p.counts_as_host(id),
            });
        }

        let mut paths = Vec::new();
        let mut path_src = Vec::new();
        let mut vlinks = Vec::new();
        for (id, by_pair) in &p.candidate_paths {
            let (a, b) = &p.link_endpoints[id];
            let bw = p.request.element(id).map_or(0.0, |e| e.amount(ResourceKind::Bandwidth));
            let mut table = HashMap::new();
            for ((s, t), list) in by_pair {
                let slots = list
                    .iter()
                    .map(|sp| {
                        paths.push(sp.0.iter().map(|e| index[e.as_str()]).collect());
                        path_src.push(sp.clone());
                        paths.len() - 1
                    })
                    .collect();
                table.insert((index[s.as_str()], index[t.as_str()]), slots);
            }
            let prior_path = prior
                .and_then(|ml| ml.entries.get(id))
                .filter(|e| e.class == EntryClass::Link)
                .map(|e| e.path().iter().map(|x| index[x.as_str()]).collect());
            vlinks.push(VLink {
                id: id.clone(),
                a: vnode_pos[a.as_str()],
                b: vnode_pos[b.as_str()],
                bw,
                paths: table,
                prior: prior_path,
                remap_cost: bw * costs.link_remap_per_mbit,
            });
        }

        // Nodes in id order; each link right after its later endpoint.
        let mut steps = Vec::new();
        let mut pending: Vec<usize> = (0..vlinks.len()).collect();
        for i in 0..vnodes.len() {
            steps.push(Step::Node(i));
            pending.retain(|&j| {
                let l = &vlinks[j];
                if l.a.max(l.b) == i {
                    steps.push(Step::Link(j));
                    false
                } else {
                    true
                }
            });
        }
        let mut remaining = Vec::with_capacity(steps.len() + 1);
        for d in 0..=steps.len() {
            remaining.push(
                steps[d..]
                    .iter()
                    .filter_map(|s| match s {
                        Step::Node(i) => Some(*i),
                        Step::Link(_) => None,
                    })
                    .collect(),
            );
        }

        Model {
            problem: p,
            ids,
            cap,
            vnodes,
            vlinks,
            steps,
            paths,
            path_src,
            remaining,
            objective: p.objective,
        }
    }
}

struct Best {
    score: Score,
    hosts: usize,
    node_at: Vec<usize>,
    path_at: Vec<usize>,
}

struct Search<'m, 'p> {
    m: &'m Model<'p>,
    limits: SearchLimits,
    start: Instant,
    used: Vec<[f64; 3]>,
    host_refs: Vec<u32>,
    hosts: usize,
    migration: f64,
    congestion: f64,
    node_at: Vec<usize>,
    path_at: Vec<usize>,
    expanded: u64,
    aborted: bool,
    best: Option<Best>,
    witness: Option<(usize, InfeasibleWitness)>,
}

impl Search<'_, '_> {
    fn ratio(&self, e: usize, k: usize, used: f64) -> f64 {
        match self.m.cap[e][k] {
            Some(c) if !c.shareable && c.amount > 0.0 => used / c.amount,
            _ => 0.0,
        }
    }

    fn fits_amount(&self, e: usize, k: usize, demand: f64) -> bool {
        match self.m.cap[e][k] {
            Some(c) if c.shareable => demand <= c.amount,
            Some(c) => self.used[e][k] + demand <= c.amount,
            None => false,
        }
    }

    fn fits_node(&self, i: usize, s: usize) -> bool {
        let d = &self.m.vnodes[i].demand;
        (0..3).all(|k| d[k] == 0.0 || self.fits_amount(s, k, d[k]))
    }

    fn fits_path(&self, bw: f64, path: &[usize]) -> bool {
        bw == 0.0 || path.iter().all(|&e| self.m.cap[e][BW].is_none() || self.fits_amount(e, BW, bw))
    }

    fn load_after(&self, i: usize, s: usize) -> f64 {
        let d = &self.m.vnodes[i].demand;
        (0..3)
            .filter(|&k| d[k] > 0.0)
            .map(|k| self.ratio(s, k, self.used[s][k] + d[k]))
            .fold(0.0, f64::max)
    }

    fn record_witness(&mut self, depth: usize, element: &str, reason: InfeasibleReason) {
        if self.witness.as_ref().is_none_or(|(d, _)| depth > *d) {
            self.witness = Some((
                depth,
                InfeasibleWitness {
                    element: element.to_string(),
                    reason,
                },
            ));
        }
    }

    /// Optimistic score of any completion of the current partial assignment,
    /// or the first unplaceable node.
    fn bound(&self, depth: usize) -> Result<Score, usize> {
        let mut congestion = self.congestion;
        let mut migration = self.migration;
        let mut needs_new_host = false;
        for &i in &self.m.remaining[depth] {
            let v = &self.m.vnodes[i];
            let mut lowest = f64::INFINITY;
            let mut fits_used = false;
            let mut fits_prior = false;
            for &s in &v.cands {
                if self.fits_node(i, s) {
                    lowest = lowest.min(self.load_after(i, s));
                    fits_used |= self.host_refs[s] > 0;
                    fits_prior |= v.prior == Some(s);
                }
            }
            if lowest.is_infinite() {
                return Err(i);
            }
            congestion = congestion.max(lowest);
            needs_new_host |= v.counts && !fits_used;
            if v.prior.is_some() && !fits_prior {
                migration += v.move_cost;
            }
        }
        let hosts = self.hosts + usize::from(needs_new_host);
        Ok((self.m.objective.value(congestion, hosts, migration), migration, congestion))
    }

    fn dfs(&mut self, depth: usize) {
        if self.aborted {
            return;
        }
        self.expanded += 1;
        if self.expanded > self.limits.max_nodes_expanded
            || (self.expanded.is_multiple_of(1024) && self.start.elapsed() > self.limits.time_budget)
        {
            self.aborted = true;
            return;
        }
        if depth == self.m.steps.len() {
            let score = (
                self.m.objective.value(self.congestion, self.hosts, self.migration),
                self.migration,
                self.congestion,
            );
            if self.best.as_ref().is_none_or(|b| better(score, b.score)) {
                self.best = Some(Best {
                    score,
                    hosts: self.hosts,
                    node_at: self.node_at.clone(),
                    path_at: self.path_at.clone(),
                });
            }
            return;
        }
        match self.bound(depth) {
            Err(i) => {
                let id = self.m.vnodes[i].id.clone();
                self.record_witness(depth, &id, InfeasibleReason::NoFittingCandidate);
                return;
            }
            Ok(lb) => {
                if self.best.as_ref().is_some_and(|b| !better(lb, b.score)) {
                    return;
                }
            }
        }
        match self.m.steps[depth] {
            Step::Node(i) => self.branch_node(depth, i),
            Step::Link(j) => self.branch_link(depth, j),
        }
    }

    fn branch_node(&mut self, depth: usize, i: usize) {
        let m = self.m;
        let v = &m.vnodes[i];
        for &s in &v.cands {
            if !self.fits_node(i, s) {
                continue;
            }
            let saved = (self.used[s], self.congestion, self.migration, self.hosts);
            for k in 0..3 {
                if v.demand[k] > 0.0 {
                    self.used[s][k] += v.demand[k];
                    self.congestion = self.congestion.max(self.ratio(s, k, self.used[s][k]));
                }
            }
            if v.counts {
                self.host_refs[s] += 1;
                if self.host_refs[s] == 1 {
                    self.hosts += 1;
                }
            }
            if v.prior.is_some_and(|p| p != s) {
                self.migration += v.move_cost;
            }
            self.node_at[i] = s;
            self.dfs(depth + 1);
            self.node_at[i] = UNSET;
            if v.counts {
                self.host_refs[s] -= 1;
            }
            (self.used[s], self.congestion, self.migration, self.hosts) = saved;
            if self.aborted {
                return;
            }
        }
    }

    fn branch_link(&mut self, depth: usize, j: usize) {
        let m = self.m;
        let l = &m.vlinks[j];
        let key = (self.node_at[l.a], self.node_at[l.b]);
        let mut any = false;
        for &pi in l.paths.get(&key).map(Vec::as_slice).unwrap_or_default() {
            let path = &m.paths[pi];
            if !self.fits_path(l.bw, path) {
                continue;
            }
            any = true;
            let saved: Vec<f64> = path.iter().map(|&e| self.used[e][BW]).collect();
            let saved_scores = (self.congestion, self.migration);
            if l.bw > 0.0 {
                for &e in path {
                    if m.cap[e][BW].is_some() {
                        self.used[e][BW] += l.bw;
                        self.congestion = self.congestion.max(self.ratio(e, BW, self.used[e][BW]));
                    }
                }
            }
            if l.prior.as_ref().is_some_and(|p| p != path) {
                self.migration += l.remap_cost;
            }
            self.path_at[j] = pi;
            self.dfs(depth + 1);
            self.path_at[j] = UNSET;
            for (&e, &u) in path.iter().zip(&saved) {
                self.used[e][BW] = u;
            }
            (self.congestion, self.migration) = saved_scores;
            if self.aborted {
                return;
            }
        }
        if !any {
            self.record_witness(depth, &l.id, InfeasibleReason::NoFeasiblePath);
        }
    }
}

fn to_solution(m: &Model<'_>, best: &Best) -> EmbeddingSolution {
    let node_assign = m
        .vnodes
        .iter()
        .zip(&best.node_at)
        .map(|(v, &s)| (v.id.clone(), m.ids[s].clone()))
        .collect();
    let link_assign = m
        .vlinks
        .iter()
        .zip(&best.path_at)
        .map(|(l, &pi)| (l.id.clone(), m.path_src[pi].clone()))
        .collect();
    let freed = freed_resources(m.problem, &node_assign);
    EmbeddingSolution {
        node_assign,
        link_assign,
        objective_value: best.score.0,
        congestion: best.score.2,
        hosts_used: best.hosts,
        migration_cost: best.score.1,
        freed_resources: freed,
    }
}

/// Finds an optimal embedding, or proves there is none within `limits`.
pub fn solve(problem: &EmbeddingProblem, limits: SearchLimits) -> Result<EmbeddingSolution, SolverError> {
    let m = Model::new(problem);
    let n_elems = m.ids.len();
    let mut search = Search {
        m: &m,
        limits,
        start: Instant::now(),
        used: vec![[0.0; 3]; n_elems],
        host_refs: vec![0; n_elems],
        hosts: 0,
        migration: 0.0,
        congestion: 0.0,
        node_at: vec![UNSET; m.vnodes.len()],
        path_at: vec![UNSET; m.vlinks.len()],
        expanded: 0,
        aborted: false,
        best: None,
        witness: None,
    };
    search.dfs(0);
    debug!(
        "solve {}: {} expansions, best {:?}",
        problem.request.id,
        search.expanded,
        search.best.as_ref().map(|b| b.score)
    );
    if search.aborted {
        return Err(SolverError::BudgetExceeded {
            expanded: search.expanded,
            best: search.best.as_ref().map(|b| Box::new(to_solution(&m, b))),
        });
    }
    match &search.best {
        Some(b) => Ok(to_solution(&m, b)),
        None => Err(SolverError::Infeasible(search.witness.map(|(_, w)| w).unwrap_or(
            InfeasibleWitness {
                element: problem.request.id.clone(),
                reason: InfeasibleReason::NoFittingCandidate,
            },
        ))),
    }
}
