//! Concept co-occurrence graphs: the per-session local evidence graph built
//! with max-merged fractional evidence, the global graph that sums local
//! evidence over sessions, and weight-threshold pruning.
//!
//! Local evidence is exact rational arithmetic (denominators are ambiguity
//! set sizes); the global graph sums in f64 by default, with an exact
//! rational accumulation mode available for tests via `CoGraph<Rational64>`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use num_rational::Rational64;
use num_traits::{ToPrimitive, Zero};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::interpret::QueryInterpretation;
use crate::ontology::ConceptId;

/// Unordered concept pair in canonical (min, max) order.
pub type EdgePair = (ConceptId, ConceptId);

/// Canonical key for the edge between `a` and `b`.
pub fn edge_key(a: ConceptId, b: ConceptId) -> EdgePair {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Per-session evidence graph.
///
/// Node evidence is the best (maximum) per-query factor seen for a concept;
/// edge evidence is the max over queries of min(node evidences), so repeated
/// references never sum within a session.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LocalGraph {
    node_evidence: BTreeMap<ConceptId, Rational64>,
    edge_evidence: BTreeMap<EdgePair, Rational64>,
}

impl LocalGraph {
    pub fn node_evidence(&self, c: &ConceptId) -> Option<Rational64> {
        self.node_evidence.get(c).copied()
    }

    pub fn edge_evidence(&self, a: &ConceptId, b: &ConceptId) -> Option<Rational64> {
        self.edge_evidence
            .get(&edge_key(a.clone(), b.clone()))
            .copied()
    }

    pub fn nodes(&self) -> impl Iterator<Item = (&ConceptId, Rational64)> {
        self.node_evidence.iter().map(|(c, r)| (c, *r))
    }

    pub fn edges(&self) -> impl Iterator<Item = (&EdgePair, Rational64)> {
        self.edge_evidence.iter().map(|(k, r)| (k, *r))
    }

    pub fn node_count(&self) -> usize {
        self.node_evidence.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_evidence.len()
    }
}

/// Build the local evidence graph of one session from its query
/// interpretations, in query order.
///
/// Per query: every referenced concept's node evidence is raised to its
/// per-query factor (1/|group|) if that is higher; then every edge between a
/// referenced concept and any concept already carrying evidence (including
/// co-references in the same query) is raised to min of the two current node
/// evidences. A later unambiguous reference therefore lifts a concept's old
/// ambiguous edges, while edges between still-ambiguous concepts stay put.
pub fn build_local_graph(queries: &[QueryInterpretation]) -> LocalGraph {
    let mut graph = LocalGraph::default();
    for query in queries {
        // Per-query factor per concept; a concept in several groups of the
        // same query takes its best factor.
        let mut factors: BTreeMap<ConceptId, Rational64> = BTreeMap::new();
        for group in query.groups() {
            let f = group.factor();
            for c in group.concepts() {
                factors
                    .entry(c.clone())
                    .and_modify(|cur| *cur = (*cur).max(f))
                    .or_insert(f);
            }
        }
        if factors.is_empty() {
            continue;
        }
        for (c, f) in &factors {
            graph
                .node_evidence
                .entry(c.clone())
                .and_modify(|cur| *cur = (*cur).max(*f))
                .or_insert(*f);
        }
        for a in factors.keys() {
            let ev_a = graph.node_evidence[a];
            for (b, ev_b) in &graph.node_evidence {
                if b == a {
                    continue;
                }
                let candidate = ev_a.min(*ev_b);
                graph
                    .edge_evidence
                    .entry(edge_key(a.clone(), b.clone()))
                    .and_modify(|cur| *cur = (*cur).max(candidate))
                    .or_insert(candidate);
            }
        }
    }
    graph
}

/// Accumulator type for global edge weights: f64 in production, exact
/// rationals for tests.
pub trait EdgeWeight: Copy + PartialOrd + Send + Sync {
    fn zero() -> Self;
    fn add(self, other: Self) -> Self;
    fn from_rational(r: Rational64) -> Self;
    fn as_f64(self) -> f64;
}

impl EdgeWeight for f64 {
    fn zero() -> Self {
        0.0
    }

    fn add(self, other: Self) -> Self {
        self + other
    }

    fn from_rational(r: Rational64) -> Self {
        r.to_f64().expect("rational fits in f64")
    }

    fn as_f64(self) -> f64 {
        self
    }
}

impl EdgeWeight for Rational64 {
    fn zero() -> Self {
        Rational64::zero()
    }

    fn add(self, other: Self) -> Self {
        self + other
    }

    fn from_rational(r: Rational64) -> Self {
        r
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("rational fits in f64")
    }
}

/// Global concept co-occurrence graph: undirected, no self-loops, every
/// stored edge weight positive. Nodes persist even when isolated.
#[derive(Debug, Clone, PartialEq)]
pub struct CoGraph<W = f64> {
    nodes: BTreeSet<ConceptId>,
    edges: BTreeMap<EdgePair, W>,
}

impl<W> Default for CoGraph<W> {
    fn default() -> Self {
        CoGraph {
            nodes: BTreeSet::new(),
            edges: BTreeMap::new(),
        }
    }
}

impl<W: EdgeWeight> CoGraph<W> {
    pub fn new() -> Self {
        CoGraph::default()
    }

    pub fn add_node(&mut self, c: ConceptId) {
        self.nodes.insert(c);
    }

    pub fn add_edge_weight(&mut self, a: ConceptId, b: ConceptId, w: W) {
        assert!(a != b, "self-loops are not allowed");
        self.nodes.insert(a.clone());
        self.nodes.insert(b.clone());
        let entry = self
            .edges
            .entry(edge_key(a, b))
            .or_insert_with(W::zero);
        *entry = entry.add(w);
    }

    pub fn weight(&self, a: &ConceptId, b: &ConceptId) -> Option<W> {
        self.edges.get(&edge_key(a.clone(), b.clone())).copied()
    }

    pub fn nodes(&self) -> &BTreeSet<ConceptId> {
        &self.nodes
    }

    pub fn edges(&self) -> impl Iterator<Item = (&EdgePair, W)> {
        self.edges.iter().map(|(k, w)| (k, *w))
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn degree(&self, c: &ConceptId) -> usize {
        self.edges
            .keys()
            .filter(|(a, b)| a == c || b == c)
            .count()
    }

    pub fn to_float(&self) -> CoGraph<f64> {
        CoGraph {
            nodes: self.nodes.clone(),
            edges: self
                .edges
                .iter()
                .map(|(k, w)| (k.clone(), w.as_f64()))
                .collect(),
        }
    }
}

/// Add one session's local evidence into the global graph: nodes are
/// unioned, edge evidences summed.
pub fn merge_into_global<W: EdgeWeight>(global: &mut CoGraph<W>, local: &LocalGraph) {
    for (c, _) in local.nodes() {
        global.add_node(c.clone());
    }
    for ((a, b), ev) in local.edges() {
        global.add_edge_weight(a.clone(), b.clone(), W::from_rational(ev));
    }
}

/// Build the global graph from per-session interpretations. Local graphs are
/// built in parallel; the fold into the global graph is sequential in
/// session order, so the result is deterministic.
pub fn build_global<W: EdgeWeight>(sessions: &[Vec<QueryInterpretation>]) -> CoGraph<W> {
    let locals: Vec<LocalGraph> = sessions
        .par_iter()
        .map(|queries| build_local_graph(queries))
        .collect();
    let mut global = CoGraph::new();
    for local in &locals {
        merge_into_global(&mut global, local);
    }
    global
}

/// What pruning did: edge counts, nodes left isolated, and a log-bucketed
/// weight histogram of the input graph.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub threshold: f64,
    pub edges_before: usize,
    pub edges_after: usize,
    pub isolated_nodes: BTreeSet<ConceptId>,
    pub weight_histogram: Vec<(f64, usize)>,
}

/// Remove every edge with weight strictly below `threshold`. Nodes are
/// retained even when all their edges go; they may become singleton
/// clusters downstream.
pub fn prune(graph: &CoGraph<f64>, threshold: f64) -> Result<(CoGraph<f64>, PruneReport)> {
    if threshold < 0.0 || !threshold.is_finite() {
        return Err(Error::parameter(format!(
            "prune threshold must be a non-negative number, got {threshold}"
        )));
    }
    let mut pruned = CoGraph::new();
    for node in graph.nodes() {
        pruned.add_node(node.clone());
    }
    for ((a, b), w) in graph.edges() {
        if w >= threshold {
            pruned.add_edge_weight(a.clone(), b.clone(), w);
        }
    }
    let mut connected = BTreeSet::new();
    for ((a, b), _) in pruned.edges() {
        connected.insert(a.clone());
        connected.insert(b.clone());
    }
    let isolated_nodes = pruned
        .nodes()
        .iter()
        .filter(|n| !connected.contains(*n))
        .cloned()
        .collect();
    let report = PruneReport {
        threshold,
        edges_before: graph.edge_count(),
        edges_after: pruned.edge_count(),
        isolated_nodes,
        weight_histogram: weight_distribution(graph).histogram,
    };
    Ok((pruned, report))
}

/// Sorted edge weights plus a decade-bucketed histogram for plotting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightDistribution {
    pub sorted: Vec<f64>,
    /// (bucket lower bound 10^k, edge count in [10^k, 10^(k+1))).
    pub histogram: Vec<(f64, usize)>,
}

pub fn weight_distribution(graph: &CoGraph<f64>) -> WeightDistribution {
    let mut sorted: Vec<f64> = graph.edges().map(|(_, w)| w).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite weights"));
    let mut buckets: BTreeMap<i32, usize> = BTreeMap::new();
    for &w in &sorted {
        let exp = w.log10().floor() as i32;
        *buckets.entry(exp).or_default() += 1;
    }
    WeightDistribution {
        sorted,
        histogram: buckets
            .into_iter()
            .map(|(exp, count)| (10f64.powi(exp), count))
            .collect(),
    }
}

/// Write the graph file: a `#nodes:` header listing every node id (so
/// isolated nodes survive round-trips) followed by one
/// `a<TAB>b<TAB>weight` line per edge, weights with 6 decimal places.
pub fn write_graph<W: Write>(w: &mut W, graph: &CoGraph<f64>) -> Result<()> {
    write!(w, "#nodes:")?;
    for node in graph.nodes() {
        write!(w, "\t{node}")?;
    }
    writeln!(w)?;
    for ((a, b), weight) in graph.edges() {
        writeln!(w, "{a}\t{b}\t{weight:.6}")?;
    }
    Ok(())
}

pub fn write_graph_file(path: impl AsRef<Path>, graph: &CoGraph<f64>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::file(path, e))?);
    write_graph(&mut w, graph)?;
    w.flush()?;
    Ok(())
}

pub fn read_graph(path: impl AsRef<Path>) -> Result<CoGraph<f64>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut graph = CoGraph::new();
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::format(path, 1, "empty graph file"))?;
    let Some(node_list) = header.strip_prefix("#nodes:") else {
        return Err(Error::format(path, 1, "missing #nodes: header"));
    };
    for node in node_list.split('\t').filter(|s| !s.is_empty()) {
        graph.add_node(ConceptId::new(node));
    }
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(a), Some(b), Some(w)) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::format(path, n + 2, "expected a<TAB>b<TAB>weight"));
        };
        let weight: f64 = w
            .parse()
            .map_err(|_| Error::format(path, n + 2, "bad edge weight"))?;
        if !(weight > 0.0) {
            return Err(Error::format(path, n + 2, "edge weight must be positive"));
        }
        if a == b {
            return Err(Error::format(path, n + 2, "self-loop edge"));
        }
        graph.add_edge_weight(ConceptId::new(a), ConceptId::new(b), weight);
    }
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::ConceptId;

    fn cid(s: &str) -> ConceptId {
        ConceptId::new(s)
    }

    fn group(ids: &[&str]) -> BTreeSet<ConceptId> {
        ids.iter().map(|s| cid(s)).collect()
    }

    fn query(groups: &[&[&str]]) -> QueryInterpretation {
        QueryInterpretation::from_groups(groups.iter().map(|g| group(g)))
    }

    fn r(num: i64, den: i64) -> Rational64 {
        Rational64::new(num, den)
    }

    /// Five-query session: two unambiguous references, one two-way ambiguity,
    /// a repeat, then an unambiguous re-reference that resolves part of the
    /// ambiguity.
    fn worked_example_session() -> Vec<QueryInterpretation> {
        vec![
            query(&[&["c1"]]),
            query(&[&["c2"]]),
            query(&[&["c3", "c4"]]),
            query(&[&["c2"]]),
            query(&[&["c3"]]),
        ]
    }

    #[test]
    fn worked_example_edges_are_exact() {
        let g = build_local_graph(&worked_example_session());
        let expect = [
            ("c1", "c2", r(1, 1)),
            ("c1", "c3", r(1, 1)),
            ("c2", "c3", r(1, 1)),
            ("c3", "c4", r(1, 2)),
            ("c1", "c4", r(1, 2)),
            ("c2", "c4", r(1, 2)),
        ];
        assert_eq!(g.edge_count(), expect.len());
        for (a, b, want) in expect {
            assert_eq!(g.edge_evidence(&cid(a), &cid(b)), Some(want), "{a}-{b}");
        }
        assert_eq!(g.node_evidence(&cid("c3")), Some(r(1, 1)));
        assert_eq!(g.node_evidence(&cid("c4")), Some(r(1, 2)));
    }

    #[test]
    fn three_way_ambiguity_gives_third_evidence() {
        let g = build_local_graph(&[query(&[&["x", "y", "z"]])]);
        for (a, b) in [("x", "y"), ("x", "z"), ("y", "z")] {
            assert_eq!(g.edge_evidence(&cid(a), &cid(b)), Some(r(1, 3)));
        }
    }

    #[test]
    fn repeated_query_adds_nothing() {
        let queries: Vec<QueryInterpretation> =
            (0..5).map(|_| query(&[&["a"]])).collect();
        let g = build_local_graph(&queries);
        assert_eq!(g.node_count(), 1);
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn empty_session_is_empty_graph() {
        let g = build_local_graph(&[]);
        assert_eq!(g.node_count(), 0);
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn edge_evidence_bounded_by_node_evidence() {
        let g = build_local_graph(&worked_example_session());
        for ((a, b), ev) in g.edges() {
            let bound = g.node_evidence(a).unwrap().min(g.node_evidence(b).unwrap());
            assert!(ev <= bound);
        }
    }

    #[test]
    fn merge_sums_identical_locals() {
        let local = build_local_graph(&[query(&[&["a", "b"]])]);
        let mut global: CoGraph<f64> = CoGraph::new();
        merge_into_global(&mut global, &local);
        merge_into_global(&mut global, &local);
        assert_eq!(global.weight(&cid("a"), &cid("b")), Some(1.0));
    }

    #[test]
    fn merge_empty_local_is_noop() {
        let mut global: CoGraph<f64> = CoGraph::new();
        merge_into_global(&mut global, &LocalGraph::default());
        assert_eq!(global.node_count(), 0);
        assert_eq!(global.edge_count(), 0);
    }

    #[test]
    fn merge_two_distinct_locals() {
        // Two-session trace: {a-b = 1} then {b-c = 1/3}.
        let s1 = build_local_graph(&[query(&[&["a"], &["b"]])]);
        let s2 = build_local_graph(&[query(&[&["b", "c", "d"]])]);
        let mut global: CoGraph<Rational64> = CoGraph::new();
        merge_into_global(&mut global, &s1);
        merge_into_global(&mut global, &s2);
        assert_eq!(global.node_count(), 4);
        assert_eq!(global.weight(&cid("a"), &cid("b")), Some(r(1, 1)));
        assert_eq!(global.weight(&cid("b"), &cid("c")), Some(r(1, 3)));
        assert_eq!(global.weight(&cid("a"), &cid("c")), None);
    }

    #[test]
    fn prune_is_strict_and_keeps_nodes() {
        let mut g: CoGraph<f64> = CoGraph::new();
        g.add_edge_weight(cid("a"), cid("b"), 2500.0);
        g.add_edge_weight(cid("b"), cid("c"), 100.0);
        let (pruned, report) = prune(&g, 2200.0).unwrap();
        assert_eq!(pruned.edge_count(), 1);
        assert_eq!(pruned.weight(&cid("a"), &cid("b")), Some(2500.0));
        assert_eq!(pruned.node_count(), 3);
        assert_eq!(report.edges_before, 2);
        assert_eq!(report.edges_after, 1);
        assert_eq!(report.isolated_nodes, group(&["c"]));
    }

    #[test]
    fn prune_zero_threshold_is_identity() {
        let mut g: CoGraph<f64> = CoGraph::new();
        g.add_edge_weight(cid("a"), cid("b"), 0.5);
        let (pruned, _) = prune(&g, 0.0).unwrap();
        assert_eq!(pruned, g);
    }

    #[test]
    fn prune_keeps_edge_exactly_at_threshold() {
        let mut g: CoGraph<f64> = CoGraph::new();
        g.add_edge_weight(cid("a"), cid("b"), 10.0);
        let (pruned, _) = prune(&g, 10.0).unwrap();
        assert_eq!(pruned.edge_count(), 1);
    }

    #[test]
    fn prune_rejects_negative_threshold() {
        let g: CoGraph<f64> = CoGraph::new();
        assert!(prune(&g, -1.0).is_err());
    }

    #[test]
    fn weight_distribution_sorts_and_buckets() {
        let mut g: CoGraph<f64> = CoGraph::new();
        g.add_edge_weight(cid("a"), cid("b"), 100.0);
        g.add_edge_weight(cid("b"), cid("c"), 1.0);
        g.add_edge_weight(cid("a"), cid("c"), 10.0);
        let dist = weight_distribution(&g);
        assert_eq!(dist.sorted, vec![1.0, 10.0, 100.0]);
        assert_eq!(dist.histogram, vec![(1.0, 1), (10.0, 1), (100.0, 1)]);
        assert!(weight_distribution(&CoGraph::new()).histogram.is_empty());
    }

    #[test]
    fn graph_file_round_trip_keeps_isolated_nodes() {
        let mut g: CoGraph<f64> = CoGraph::new();
        g.add_edge_weight(cid("a"), cid("b"), 1.5);
        g.add_node(cid("lonely"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graph.tsv");
        write_graph_file(&path, &g).unwrap();
        let reread = read_graph(&path).unwrap();
        assert_eq!(reread.nodes(), g.nodes());
        assert_eq!(reread.weight(&cid("a"), &cid("b")), Some(1.5));
    }
}
