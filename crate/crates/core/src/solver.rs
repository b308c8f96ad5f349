//! From edge scores to identities.
//!
//! Scores are rounded to a flow-feasible labeling (every node keeps at most
//! one active incoming and one active outgoing edge), linked detections are
//! grouped into temporally consistent identities, and the groups are merged
//! further by re-scoring a fully connected trajectory-level graph.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::graph::edge_labels;
use crate::ingest::DetectionSet;
use crate::model::{EdgeKind, NodeKind, NodePayload, TrackGraph, Tracklet};
use crate::mpn::{forward, init_edge_features, logistic, GraphInput, MpnParams};

/// Scored directed edges over `n_nodes` nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundingProblem {
    pub n_nodes: usize,
    /// `(u, v, score)`.
    pub edges: Vec<(usize, usize, f64)>,
}

impl RoundingProblem {
    pub fn validate(&self) -> Result<()> {
        for (k, &(u, v, s)) in self.edges.iter().enumerate() {
            if u >= self.n_nodes || v >= self.n_nodes || u == v {
                return Err(Error::Validation(format!("edge {k} ({u}, {v}) is invalid")));
            }
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Validation(format!("edge {k} score {s} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Squared distance between a labeling and the scores.
    pub fn objective(&self, labels: &[bool]) -> f64 {
        self.edges
            .iter()
            .zip(labels)
            .map(|(&(_, _, s), &y)| {
                let d = if y { 1.0 - s } else { s };
                d * d
            })
            .sum()
    }

    /// Whether every node has at most one active in-edge and out-edge.
    pub fn is_feasible(&self, labels: &[bool]) -> bool {
        let mut out = vec![false; self.n_nodes];
        let mut inn = vec![false; self.n_nodes];
        for (&(u, v, _), &y) in self.edges.iter().zip(labels) {
            if y {
                if out[u] || inn[v] {
                    return false;
                }
                out[u] = true;
                inn[v] = true;
            }
        }
        labels.len() == self.edges.len()
    }
}

/// Edge positions sorted by score descending, then `u`, then `v`.
fn ranked(edges: &[(usize, usize, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.sort_by(|&a, &b| {
        let (ua, va, sa) = edges[a];
        let (ub, vb, sb) = edges[b];
        sb.total_cmp(&sa).then(ua.cmp(&ub)).then(va.cmp(&vb))
    });
    order
}

/// Takes edges in descending score order while both endpoint budgets are
/// free and the score exceeds `eps`.
pub fn greedy_round(problem: &RoundingProblem, eps: f64) -> Result<Vec<bool>> {
    problem.validate()?;
    let mut out = vec![false; problem.n_nodes];
    let mut inn = vec![false; problem.n_nodes];
    let mut labels = vec![false; problem.edges.len()];
    for k in ranked(&problem.edges) {
        let (u, v, s) = problem.edges[k];
        if s > eps && !out[u] && !inn[v] {
            out[u] = true;
            inn[v] = true;
            labels[k] = true;
        }
    }
    Ok(labels)
}

/// Largest problem [`exact_round`] accepts.
pub const EXACT_EDGE_CAP: usize = 20;

/// Exhaustive minimum of the squared distance over feasible labelings that
/// only activate edges scoring above `eps`. Among equal optima the
/// lexicographically smallest labeling (false before true) wins.
pub fn exact_round(problem: &RoundingProblem, eps: f64) -> Result<Vec<bool>> {
    problem.validate()?;
    let m = problem.edges.len();
    if m > EXACT_EDGE_CAP {
        return Err(Error::SizeCap {
            edges: m,
            cap: EXACT_EDGE_CAP,
        });
    }
    struct Search<'a> {
        p: &'a RoundingProblem,
        eps: f64,
        out: Vec<bool>,
        inn: Vec<bool>,
        cur: Vec<bool>,
        best: Vec<bool>,
        best_obj: f64,
    }
    impl Search<'_> {
        fn go(&mut self, k: usize) {
            if k == self.p.edges.len() {
                let obj = self.p.objective(&self.cur);
                if obj < self.best_obj {
                    self.best_obj = obj;
                    self.best.clone_from(&self.cur);
                }
                return;
            }
            self.go(k + 1);
            let (u, v, s) = self.p.edges[k];
            if s > self.eps && !self.out[u] && !self.inn[v] {
                self.out[u] = true;
                self.inn[v] = true;
                self.cur[k] = true;
                self.go(k + 1);
                self.cur[k] = false;
                self.out[u] = false;
                self.inn[v] = false;
            }
        }
    }
    let mut s = Search {
        p: problem,
        eps,
        out: vec![false; problem.n_nodes],
        inn: vec![false; problem.n_nodes],
        cur: vec![false; m],
        best: vec![false; m],
        best_obj: f64::INFINITY,
    };
    s.go(0);
    Ok(s.best)
}

/// Union-find over nodes with frame spans; refuses merges that would put
/// two temporally overlapping nodes into one group.
#[derive(Debug, Clone)]
pub struct SpanUnion {
    parent: Vec<usize>,
    // Disjoint spans of each root, keyed by start.
    spans: Vec<BTreeMap<u32, u32>>,
}

impl SpanUnion {
    pub fn new(spans: &[(u32, u32)]) -> Self {
        Self {
            parent: (0..spans.len()).collect(),
            spans: spans.iter().map(|&(s, e)| BTreeMap::from([(s, e)])).collect(),
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn overlaps(big: &BTreeMap<u32, u32>, small: &BTreeMap<u32, u32>) -> bool {
        small.iter().any(|(&s, &e)| {
            big.range(..=e)
                .next_back()
                .is_some_and(|(_, &be)| be >= s)
        })
    }

    /// Merges the groups of `a` and `b`; false if refused or already joined.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (big, small) = if self.spans[ra].len() >= self.spans[rb].len() {
            (ra, rb)
        } else {
            (rb, ra)
        };
        if Self::overlaps(&self.spans[big], &self.spans[small]) {
            return false;
        }
        let moved = std::mem::take(&mut self.spans[small]);
        self.spans[big].extend(moved);
        self.parent[small] = big;
        true
    }

    /// Group id per node, numbered by each group's smallest node index.
    pub fn ids(&mut self) -> Vec<usize> {
        let mut label: HashMap<usize, usize> = HashMap::new();
        (0..self.parent.len())
            .map(|x| {
                let r = self.find(x);
                let next = label.len();
                *label.entry(r).or_insert(next)
            })
            .collect()
    }
}

/// Groups nodes along positive edges, strongest first, skipping merges that
/// would create a temporal overlap. Returns an id per node.
pub fn connected_components_ids(spans: &[(u32, u32)], positive: &[(usize, usize, f64)]) -> Vec<usize> {
    let mut uf = SpanUnion::new(spans);
    for k in ranked(positive) {
        let (u, v, _) = positive[k];
        uf.union(u, v);
    }
    uf.ids()
}

/// Scores the edges of a composite graph over `dets`.
pub trait EdgeScorer: Sync {
    fn score_edges(&self, graph: &TrackGraph, dets: &DetectionSet) -> Result<Vec<f64>>;
}

impl EdgeScorer for MpnParams {
    fn score_edges(&self, graph: &TrackGraph, _dets: &DetectionSet) -> Result<Vec<f64>> {
        Ok(forward(self, &GraphInput::from_graph(graph)?)?.scores)
    }
}

/// Fixed logistic model on initial edge features; the fallback when no
/// trained parameters are given.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandCraftedScorer {
    pub bias: f64,
    pub appearance: f64,
    pub position: f64,
    pub size: f64,
    /// Penalty per frame of gap beyond the first.
    pub gap: f64,
}

impl Default for HandCraftedScorer {
    fn default() -> Self {
        Self {
            bias: 6.0,
            appearance: 6.0,
            position: 3.0,
            size: 2.0,
            gap: 0.2,
        }
    }
}

impl HandCraftedScorer {
    pub fn score(&self, f: &[f64; 6]) -> f64 {
        let z = self.bias
            - self.appearance * f[5]
            - self.position * (f[0].abs() + f[1].abs())
            - self.size * (f[2].abs() + f[3].abs())
            - self.gap * (f[4] - 1.0).max(0.0);
        logistic(z)
    }
}

impl EdgeScorer for HandCraftedScorer {
    fn score_edges(&self, graph: &TrackGraph, _dets: &DetectionSet) -> Result<Vec<f64>> {
        Ok(graph.edges().iter().map(|e| self.score(&e.init_features)).collect())
    }
}

/// Scores 1 for true links and 0 otherwise; needs ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LabelOracle;

impl EdgeScorer for LabelOracle {
    fn score_edges(&self, graph: &TrackGraph, dets: &DetectionSet) -> Result<Vec<f64>> {
        Ok(edge_labels(graph, dets)?
            .into_iter()
            .map(|y| if y { 1.0 } else { 0.0 })
            .collect())
    }
}

/// Source of the first-pass identities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FirstPass {
    /// Round network scores over detection-level links.
    #[default]
    Rounding,
    /// Reuse the tracklets of the graph's trajectory nodes.
    Tracker,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateConfig {
    pub eps: f64,
    /// Upper bound on trajectory-level merge passes.
    pub traj_passes: usize,
    pub first_pass: FirstPass,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        Self {
            eps: 0.5,
            traj_passes: 1,
            first_pass: FirstPass::Rounding,
        }
    }
}

impl AggregateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps <= 1.0) {
            return Err(Error::Validation(format!("eps must lie in (0, 1], got {}", self.eps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregation {
    /// Identity per detection.
    pub ids: Vec<usize>,
    /// Identity per detection after the first pass.
    pub first_pass_ids: Vec<usize>,
    /// Scores of the input graph's edges.
    pub scores: Vec<f64>,
    /// Trajectory passes that merged at least one pair.
    pub merge_passes: usize,
}

/// Detection-level link of an edge: last member of `u` to first of `v`.
fn links_of(graph: &TrackGraph, scores: &[f64]) -> Vec<(usize, usize, f64)> {
    let mut best: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (e, &s) in graph.edges().iter().zip(scores) {
        let key = (graph.node(e.u).last_member(), graph.node(e.v).first_member());
        let slot = best.entry(key).or_insert(s);
        if s > *slot {
            *slot = s;
        }
    }
    best.into_iter().map(|((u, v), s)| (u, v, s)).collect()
}

fn groups_of(ids: &[usize]) -> Vec<Vec<usize>> {
    let n = ids.iter().map(|&i| i + 1).max().unwrap_or(0);
    let mut groups = vec![Vec::new(); n];
    for (d, &id) in ids.iter().enumerate() {
        groups[id].push(d);
    }
    groups
}

/// Fully connected, temporally gated graph with one node per group.
pub fn group_graph(groups: &[Vec<usize>], dets: &DetectionSet) -> Result<TrackGraph> {
    let mut g = TrackGraph::new();
    for (id, members) in groups.iter().enumerate() {
        let payload = if members.len() == 1 {
            NodePayload::Det {
                det: dets.get(members[0]).clone(),
                index: members[0],
            }
        } else {
            NodePayload::Traj {
                tracklet: Tracklet::new(
                    id as u64,
                    members.iter().map(|&i| dets.get(i).clone()).collect(),
                )?,
                members: members.clone(),
            }
        };
        g.add_node(payload);
    }
    let n = g.nodes().len();
    for a in 0..n {
        for b in 0..n {
            if g.node(a).end_frame() < g.node(b).start_frame() {
                let kind = EdgeKind::between(g.node(a).kind(), g.node(b).kind());
                let f = init_edge_features(g.node(a), g.node(b));
                g.add_edge(a, b, kind, f)?;
            }
        }
    }
    Ok(g)
}

/// Assigns an identity to every detection of `graph`.
pub fn aggregate(
    graph: &TrackGraph,
    dets: &DetectionSet,
    scorer: &dyn EdgeScorer,
    cfg: &AggregateConfig,
) -> Result<Aggregation> {
    cfg.validate()?;
    let scores = scorer.score_edges(graph, dets)?;
    if scores.len() != graph.edges().len() {
        return Err(Error::Length {
            expected: graph.edges().len(),
            got: scores.len(),
        });
    }
    let frames: Vec<(u32, u32)> = dets.detections().iter().map(|d| (d.frame, d.frame)).collect();
    let first_pass_ids = match cfg.first_pass {
        FirstPass::Rounding => {
            let problem = RoundingProblem {
                n_nodes: dets.len(),
                edges: links_of(graph, &scores),
            };
            let labels = greedy_round(&problem, cfg.eps)?;
            let positive: Vec<_> = problem
                .edges
                .iter()
                .zip(&labels)
                .filter(|(_, &y)| y)
                .map(|(e, _)| *e)
                .collect();
            connected_components_ids(&frames, &positive)
        }
        FirstPass::Tracker => {
            let mut uf = SpanUnion::new(&frames);
            for node in graph.nodes().iter().filter(|n| n.kind() == NodeKind::Traj) {
                for w in node.members().windows(2) {
                    uf.union(w[0], w[1]);
                }
            }
            uf.ids()
        }
    };

    let mut ids = first_pass_ids.clone();
    let mut merge_passes = 0;
    for _ in 0..cfg.traj_passes {
        let groups = groups_of(&ids);
        let tg = group_graph(&groups, dets)?;
        let s = scorer.score_edges(&tg, dets)?;
        let positive: Vec<_> = tg
            .edges()
            .iter()
            .zip(&s)
            .filter(|(_, &x)| x > cfg.eps)
            .map(|(e, &x)| (e.u, e.v, x))
            .collect();
        let spans: Vec<(u32, u32)> = tg.nodes().iter().map(|n| n.span()).collect();
        let merged = connected_components_ids(&spans, &positive);
        let n_before = groups.len();
        let n_after = merged.iter().map(|&i| i + 1).max().unwrap_or(0);
        if n_after == n_before {
            break;
        }
        merge_passes += 1;
        // Renumber by smallest member detection.
        let mapped: Vec<usize> = ids.iter().map(|&g| merged[g]).collect();
        ids = renumber(&mapped);
    }
    Ok(Aggregation {
        ids,
        first_pass_ids,
        scores,
        merge_passes,
    })
}

/// Relabels ids in order of first appearance.
pub fn renumber(ids: &[usize]) -> Vec<usize> {
    let mut map = HashMap::new();
    ids.iter()
        .map(|&i| {
            let next = map.len();
            *map.entry(i).or_insert(next)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn prob(n: usize, edges: &[(usize, usize, f64)]) -> RoundingProblem {
        RoundingProblem {
            n_nodes: n,
            edges: edges.to_vec(),
        }
    }

    #[test]
    fn greedy_examples() {
        assert_eq!(greedy_round(&prob(2, &[(0, 1, 0.9)]), 0.5).unwrap(), vec![true]);
        let p = prob(3, &[(0, 1, 0.8), (0, 2, 0.9)]);
        assert_eq!(greedy_round(&p, 0.5).unwrap(), vec![false, true]);
    }

    #[test]
    fn exact_examples() {
        assert_eq!(exact_round(&prob(2, &[(0, 1, 0.4)]), 0.0).unwrap(), vec![false]);
        assert_eq!(exact_round(&prob(2, &[(0, 1, 0.6)]), 0.0).unwrap(), vec![true]);
        let empty = prob(0, &[]);
        assert!(exact_round(&empty, 0.5).unwrap().is_empty());
        assert_eq!(empty.objective(&[]), 0.0);
        let big = prob(30, &(0..21).map(|k| (k, k + 1, 0.5)).collect::<Vec<_>>());
        assert!(matches!(exact_round(&big, 0.5), Err(Error::SizeCap { .. })));
    }

    #[test]
    fn exact_beats_greedy_on_known_trap() {
        // The strongest edge blocks two slightly weaker ones whose sum wins.
        let p = prob(4, &[(0, 1, 0.95), (0, 2, 0.74), (3, 1, 0.74)]);
        let g = greedy_round(&p, 0.5).unwrap();
        let e = exact_round(&p, 0.5).unwrap();
        assert_eq!(g, vec![true, false, false]);
        assert_eq!(e, vec![false, true, true]);
        assert!(p.objective(&e) < p.objective(&g));
    }

    #[test]
    fn component_examples() {
        let chain = connected_components_ids(
            &[(0, 4), (5, 9), (10, 12)],
            &[(0, 1, 0.9), (1, 2, 0.8)],
        );
        assert_eq!(chain, vec![0, 0, 0]);
        let refused = connected_components_ids(&[(0, 5), (3, 9)], &[(0, 1, 0.9)]);
        assert_eq!(refused, vec![0, 1]);
        let tri = connected_components_ids(
            &[(0, 2), (3, 5), (6, 8)],
            &[(0, 1, 0.9), (1, 2, 0.8), (0, 2, 0.7)],
        );
        assert_eq!(tri, vec![0, 0, 0]);
        // a and c overlap: a-b (0.9) merges, then b-c and a-c are refused.
        let tri = connected_components_ids(
            &[(0, 4), (10, 14), (3, 8)],
            &[(0, 1, 0.9), (1, 2, 0.8), (0, 2, 0.7)],
        );
        assert_eq!(tri, vec![0, 0, 1]);
        let tri = connected_components_ids(
            &[(0, 4), (10, 14), (3, 8)],
            &[(0, 1, 0.7), (1, 2, 0.9), (0, 2, 0.8)],
        );
        // b-c (0.9) merges first; a-c (0.8) overlaps; a-b (0.7) overlaps via c.
        assert_eq!(tri, vec![0, 1, 1]);
    }

    #[test]
    fn span_union_handles_interleaving() {
        let mut uf = SpanUnion::new(&[(1, 1), (3, 3), (2, 2), (3, 3)]);
        assert!(uf.union(0, 1));
        assert!(uf.union(2, 0));
        assert!(!uf.union(3, 1));
        assert_eq!(uf.ids(), vec![0, 0, 0, 1]);
    }

    fn arb_problem(max_nodes: usize, max_edges: usize) -> impl Strategy<Value = RoundingProblem> {
        (2..=max_nodes).prop_flat_map(move |n| {
            prop::collection::vec((0..n, 0..n, 0.0f64..=1.0), 0..=max_edges).prop_map(move |e| {
                RoundingProblem {
                    n_nodes: n,
                    edges: e.into_iter().filter(|(u, v, _)| u != v).collect(),
                }
            })
        })
    }

    proptest! {
        #[test]
        fn greedy_is_feasible(p in arb_problem(50, 120), eps in 0.0f64..1.0) {
            let g = greedy_round(&p, eps).unwrap();
            prop_assert!(p.is_feasible(&g));
        }

        #[test]
        fn exact_never_worse(p in arb_problem(10, 10)) {
            let g = greedy_round(&p, 0.5).unwrap();
            let e = exact_round(&p, 0.5).unwrap();
            prop_assert!(p.is_feasible(&e));
            prop_assert!(p.objective(&e) <= p.objective(&g) + 1e-12);
        }
    }
}
