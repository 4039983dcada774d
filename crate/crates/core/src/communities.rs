//! Overlapping community detection on the pruned co-occurrence graph via
//! synchronous weighted label propagation with bounded labels per vertex
//! (COPRA-style).
//!
//! Each vertex carries a map of community labels to belonging coefficients
//! summing to 1. Every iteration replaces a vertex's map with the
//! edge-weight-normalized average of its neighbors' maps, deletes labels
//! whose coefficient falls below 1/v (keeping the strongest label if all
//! do, ties broken by a seeded RNG), and renormalizes. Propagation stops
//! when the per-label vertex counts stabilize or after `max_iters`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cograph::CoGraph;
use crate::error::{Error, Result};
use crate::ontology::ConceptId;

const COEFF_EPS: f64 = 1e-9;

/// Knobs for [`detect_communities`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopraParams {
    /// Maximum labels a vertex may hold; 1 disables overlap.
    pub v: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Prune threshold that produced the input graph, recorded for
    /// provenance only.
    pub threshold: Option<f64>,
}

impl Default for CopraParams {
    fn default() -> Self {
        CopraParams {
            v: 2,
            seed: 0,
            max_iters: 100,
            threshold: None,
        }
    }
}

/// Parameters echoed into the clusters document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub v: usize,
    pub seed: u64,
    pub threshold: Option<f64>,
    pub iterations: usize,
}

/// Overlapping concept clusters, sorted by size then lexicographic ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSet {
    clusters: Vec<BTreeSet<ConceptId>>,
    params: ClusterParams,
}

impl ClusterSet {
    /// Assemble a cluster set from raw sets, normalizing order. Used by the
    /// detector, the file reader, and tests.
    pub fn new(clusters: Vec<BTreeSet<ConceptId>>, params: ClusterParams) -> Self {
        let mut clusters = clusters;
        clusters.sort_by(|a, b| {
            a.len()
                .cmp(&b.len())
                .then_with(|| a.iter().cmp(b.iter()))
        });
        ClusterSet { clusters, params }
    }

    pub fn clusters(&self) -> &[BTreeSet<ConceptId>] {
        &self.clusters
    }

    pub fn params(&self) -> &ClusterParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &BTreeSet<ConceptId>> {
        self.clusters.iter()
    }
}

/// Run label propagation and post-process into a [`ClusterSet`]: label
/// groups are split into connected components, subset-contained communities
/// are dropped, and isolated vertices come out as singletons.
pub fn detect_communities(graph: &CoGraph<f64>, params: &CopraParams) -> Result<ClusterSet> {
    if params.v == 0 {
        return Err(Error::parameter("v must be at least 1"));
    }
    let nodes: Vec<ConceptId> = graph.nodes().iter().cloned().collect();
    let index: BTreeMap<&ConceptId, usize> =
        nodes.iter().enumerate().map(|(i, c)| (c, i)).collect();
    let n = nodes.len();

    let mut adjacency: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for ((a, b), w) in graph.edges() {
        let (ia, ib) = (index[a], index[b]);
        adjacency[ia].push((ib, w));
        adjacency[ib].push((ia, w));
    }
    for neighbors in &mut adjacency {
        neighbors.sort_by_key(|(j, _)| *j);
    }
    let strength: Vec<f64> = adjacency
        .iter()
        .map(|ns| ns.iter().map(|(_, w)| w).sum())
        .collect();

    // Label ids are initial vertex indices; every vertex starts alone.
    let mut labels: Vec<BTreeMap<u32, f64>> = (0..n)
        .map(|i| BTreeMap::from([(i as u32, 1.0)]))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let min_coeff = 1.0 / params.v as f64;
    let mut prev_counts: Option<(usize, usize)> = None;
    let mut iterations = 0;

    for _ in 0..params.max_iters {
        iterations += 1;
        let mut next: Vec<BTreeMap<u32, f64>> = Vec::with_capacity(n);
        for i in 0..n {
            if adjacency[i].is_empty() {
                next.push(labels[i].clone());
                continue;
            }
            let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
            for &(j, w) in &adjacency[i] {
                for (&label, &coeff) in &labels[j] {
                    *acc.entry(label).or_insert(0.0) += w * coeff;
                }
            }
            for coeff in acc.values_mut() {
                *coeff /= strength[i];
            }
            next.push(threshold_labels(acc, min_coeff, &mut rng));
        }
        labels = next;

        // Gregory-style stop: the number of labels alive and the minimum
        // per-label vertex count are both unchanged across an iteration.
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for map in &labels {
            for &label in map.keys() {
                *counts.entry(label).or_insert(0) += 1;
            }
        }
        let snapshot = (
            counts.len(),
            counts.values().copied().min().unwrap_or(0),
        );
        if prev_counts == Some(snapshot) {
            break;
        }
        prev_counts = Some(snapshot);
    }

    // Materialize label -> member vertices.
    let mut members: BTreeMap<u32, BTreeSet<usize>> = BTreeMap::new();
    for (i, map) in labels.iter().enumerate() {
        for &label in map.keys() {
            members.entry(label).or_default().insert(i);
        }
    }

    let mut raw: Vec<BTreeSet<usize>> = Vec::new();
    for group in members.into_values() {
        raw.extend(connected_components(&group, &adjacency));
    }
    let kept = drop_contained(raw);

    let clusters = kept
        .into_iter()
        .map(|set| set.into_iter().map(|i| nodes[i].clone()).collect())
        .collect();
    Ok(ClusterSet::new(
        clusters,
        ClusterParams {
            v: params.v,
            seed: params.seed,
            threshold: params.threshold,
            iterations,
        },
    ))
}

/// Delete labels below the coefficient floor; keep the strongest when all
/// fall below (seeded tie-break); renormalize the rest to sum 1.
fn threshold_labels(
    acc: BTreeMap<u32, f64>,
    min_coeff: f64,
    rng: &mut ChaCha8Rng,
) -> BTreeMap<u32, f64> {
    debug_assert!(!acc.is_empty());
    let mut kept: BTreeMap<u32, f64> = acc
        .iter()
        .filter(|(_, &c)| c >= min_coeff - COEFF_EPS)
        .map(|(&l, &c)| (l, c))
        .collect();
    if kept.is_empty() {
        let best = acc.values().cloned().fold(f64::MIN, f64::max);
        let candidates: Vec<u32> = acc
            .iter()
            .filter(|(_, &c)| (c - best).abs() <= COEFF_EPS)
            .map(|(&l, _)| l)
            .collect();
        let pick = if candidates.len() == 1 {
            candidates[0]
        } else {
            candidates[rng.random_range(0..candidates.len())]
        };
        kept.insert(pick, 1.0);
        return kept;
    }
    let total: f64 = kept.values().sum();
    for coeff in kept.values_mut() {
        *coeff /= total;
    }
    kept
}

fn connected_components(
    group: &BTreeSet<usize>,
    adjacency: &[Vec<(usize, f64)>],
) -> Vec<BTreeSet<usize>> {
    let mut components = Vec::new();
    let mut unvisited: BTreeSet<usize> = group.clone();
    while let Some(&start) = unvisited.iter().next() {
        let mut component = BTreeSet::new();
        let mut stack = vec![start];
        unvisited.remove(&start);
        while let Some(v) = stack.pop() {
            component.insert(v);
            for &(u, _) in &adjacency[v] {
                if unvisited.remove(&u) {
                    stack.push(u);
                }
            }
        }
        components.push(component);
    }
    components
}

/// Remove communities that are subsets of (or equal to) another.
fn drop_contained(mut sets: Vec<BTreeSet<usize>>) -> Vec<BTreeSet<usize>> {
    sets.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.iter().cmp(b.iter())));
    let mut kept: Vec<BTreeSet<usize>> = Vec::new();
    for set in sets {
        if !kept.iter().any(|k| set.is_subset(k)) {
            kept.push(set);
        }
    }
    kept
}

/// Summary of a cluster set: counts, size range, and per-concept overlap
/// degree.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterStats {
    pub count: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub mean_size: f64,
    pub overlap: BTreeMap<ConceptId, usize>,
}

pub fn cluster_stats(clusters: &ClusterSet) -> ClusterStats {
    let sizes: Vec<usize> = clusters.iter().map(BTreeSet::len).collect();
    let mut overlap: BTreeMap<ConceptId, usize> = BTreeMap::new();
    for cluster in clusters.iter() {
        for c in cluster {
            *overlap.entry(c.clone()).or_insert(0) += 1;
        }
    }
    ClusterStats {
        count: sizes.len(),
        min_size: sizes.iter().min().copied().unwrap_or(0),
        max_size: sizes.iter().max().copied().unwrap_or(0),
        mean_size: if sizes.is_empty() {
            0.0
        } else {
            sizes.iter().sum::<usize>() as f64 / sizes.len() as f64
        },
        overlap,
    }
}

#[derive(Serialize, Deserialize)]
struct ClustersDoc {
    params: ClusterParams,
    clusters: Vec<Vec<String>>,
}

/// Serialize a cluster set to its JSON document.
pub fn clusters_to_json(clusters: &ClusterSet) -> String {
    let doc = ClustersDoc {
        params: clusters.params().clone(),
        clusters: clusters
            .iter()
            .map(|set| set.iter().map(|c| c.as_str().to_owned()).collect())
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("clusters serialize")
}

pub fn write_clusters_file(path: impl AsRef<Path>, clusters: &ClusterSet) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::file(path, e))?);
    w.write_all(clusters_to_json(clusters).as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_clusters_file(path: impl AsRef<Path>) -> Result<ClusterSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    let doc: ClustersDoc = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::format(path, e.line(), e.to_string()))?;
    let clusters = doc
        .clusters
        .into_iter()
        .map(|ids| ids.iter().map(|s| ConceptId::new(s)).collect())
        .collect();
    Ok(ClusterSet::new(clusters, doc.params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cograph::CoGraph;

    fn cid(s: &str) -> ConceptId {
        ConceptId::new(s)
    }

    fn set(ids: &[&str]) -> BTreeSet<ConceptId> {
        ids.iter().map(|s| cid(s)).collect()
    }

    /// Two unit-weight triangles joined by one weak edge.
    fn two_triangles() -> CoGraph<f64> {
        let mut g = CoGraph::new();
        for (a, b) in [("a1", "a2"), ("a2", "a3"), ("a1", "a3")] {
            g.add_edge_weight(cid(a), cid(b), 1.0);
        }
        for (a, b) in [("b1", "b2"), ("b2", "b3"), ("b1", "b3")] {
            g.add_edge_weight(cid(a), cid(b), 1.0);
        }
        g.add_edge_weight(cid("a3"), cid("b1"), 0.1);
        g
    }

    #[test]
    fn recovers_two_triangles() {
        let params = CopraParams {
            v: 1,
            ..CopraParams::default()
        };
        let clusters = detect_communities(&two_triangles(), &params).unwrap();
        let sets: Vec<&BTreeSet<ConceptId>> = clusters.iter().collect();
        assert!(
            sets.contains(&&set(&["a1", "a2", "a3"])) && sets.contains(&&set(&["b1", "b2", "b3"])),
            "got {sets:?}"
        );
        assert_eq!(clusters.len(), 2);
    }

    #[test]
    fn single_edge_is_one_cluster() {
        let mut g = CoGraph::new();
        g.add_edge_weight(cid("a"), cid("b"), 1.0);
        let clusters = detect_communities(&g, &CopraParams::default()).unwrap();
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters.clusters()[0], set(&["a", "b"]));
    }

    #[test]
    fn isolated_nodes_become_singletons() {
        let mut g: CoGraph<f64> = CoGraph::new();
        for id in ["x", "y", "z"] {
            g.add_node(cid(id));
        }
        let clusters = detect_communities(&g, &CopraParams::default()).unwrap();
        assert_eq!(clusters.len(), 3);
        assert!(clusters.iter().all(|c| c.len() == 1));
    }

    #[test]
    fn zero_v_is_a_parameter_error() {
        let g: CoGraph<f64> = CoGraph::new();
        let params = CopraParams {
            v: 0,
            ..CopraParams::default()
        };
        assert!(detect_communities(&g, &params).is_err());
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let g = two_triangles();
        let params = CopraParams::default();
        let a = detect_communities(&g, &params).unwrap();
        let b = detect_communities(&g, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn weight_scaling_does_not_change_clusters() {
        let g = two_triangles();
        let params = CopraParams::default();
        let base = detect_communities(&g, &params).unwrap();
        for scale in [0.5, 2.0, 3.0, 10.0] {
            let mut scaled = CoGraph::new();
            for node in g.nodes() {
                scaled.add_node(node.clone());
            }
            for ((a, b), w) in g.edges() {
                scaled.add_edge_weight(a.clone(), b.clone(), w * scale);
            }
            let got = detect_communities(&scaled, &params).unwrap();
            assert_eq!(got.clusters(), base.clusters(), "scale {scale}");
        }
    }

    #[test]
    fn no_cluster_contains_another() {
        let clusters = detect_communities(&two_triangles(), &CopraParams::default()).unwrap();
        for (i, a) in clusters.iter().enumerate() {
            for (j, b) in clusters.iter().enumerate() {
                if i != j {
                    assert!(!a.is_subset(b), "{a:?} within {b:?}");
                }
            }
        }
    }

    #[test]
    fn stats_of_sample_clusters() {
        let clusters = ClusterSet::new(
            vec![
                set(&["play_area", "sport_area", "kindergarten", "law", "hospital"]),
                set(&["national_park", "provincial_park", "regional_park", "urban_park", "green"]),
                set(&["play_area", "sport_area", "library", "childcare", "law", "school"]),
            ],
            ClusterParams {
                v: 2,
                seed: 0,
                threshold: None,
                iterations: 0,
            },
        );
        let stats = cluster_stats(&clusters);
        assert_eq!(stats.count, 3);
        assert_eq!(stats.max_size, 6);
        assert_eq!(stats.min_size, 5);
        assert_eq!(stats.overlap[&cid("play_area")], 2);
        assert_eq!(stats.overlap[&cid("school")], 1);

        let empty = cluster_stats(&ClusterSet::new(
            vec![],
            ClusterParams {
                v: 2,
                seed: 0,
                threshold: None,
                iterations: 0,
            },
        ));
        assert_eq!(empty.count, 0);
        assert_eq!(empty.max_size, 0);
    }

    #[test]
    fn clusters_file_round_trip() {
        let clusters = detect_communities(&two_triangles(), &CopraParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clusters.json");
        write_clusters_file(&path, &clusters).unwrap();
        let reread = read_clusters_file(&path).unwrap();
        assert_eq!(reread, clusters);
    }

    #[test]
    fn cluster_ordering_is_stable() {
        let params = ClusterParams {
            v: 2,
            seed: 0,
            threshold: None,
            iterations: 0,
        };
        let a = ClusterSet::new(vec![set(&["b", "c"]), set(&["a"]), set(&["a", "z"])], params.clone());
        let b = ClusterSet::new(vec![set(&["a", "z"]), set(&["a"]), set(&["b", "c"])], params);
        assert_eq!(a.clusters(), b.clusters());
        assert_eq!(a.clusters()[0], set(&["a"]));
        assert_eq!(a.clusters()[1], set(&["a", "z"]));
    }
}
