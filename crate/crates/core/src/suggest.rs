//! Concept suggestion strategies: given the concepts referenced in the
//! observed part of a session (C@i) and the mined clusters, pick clusters
//! and propose their not-yet-referenced concepts.

use std::collections::BTreeSet;

use num_rational::Rational64;
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::communities::ClusterSet;
use crate::error::{Error, Result};
use crate::interpret::SessionConceptSet;
use crate::ontology::ConceptId;

/// Cluster selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Every cluster sharing at least one referenced concept.
    Slack,
    /// The n best clusters by degree of matching.
    SlackSelective,
    /// Only clusters containing every referenced concept.
    Strict,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Slack => "slack",
            Strategy::SlackSelective => "slack-selective",
            Strategy::Strict => "strict",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slack" => Ok(Strategy::Slack),
            "slack-selective" => Ok(Strategy::SlackSelective),
            "strict" => Ok(Strategy::Strict),
            other => Err(Error::parameter(format!(
                "unknown strategy {other:?} (expected slack|slack-selective|strict)"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Suggested expansion concepts plus the clusters they came from. Concepts
/// already referenced in C@i never appear.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Suggestion {
    pub concepts: BTreeSet<ConceptId>,
    /// Indices into the cluster set, in its stable order.
    pub selected_clusters: Vec<usize>,
    pub strategy: Strategy,
    pub n_best: Option<usize>,
}

/// Overlap score between a cluster and C@i: an unambiguous shared concept
/// counts 1, a shared concept in an ambiguity set counts 1/|set| (its
/// smallest set when it sits in several), everything else 0.
pub fn degree_of_matching(cluster: &BTreeSet<ConceptId>, c_at_i: &SessionConceptSet) -> Rational64 {
    let mut degree = Rational64::zero();
    for c in cluster {
        if c_at_i.unambiguous().contains(c) {
            degree += Rational64::new(1, 1);
        } else if let Some(size) = c_at_i.smallest_ambiguity_set(c) {
            degree += Rational64::new(1, size as i64);
        }
    }
    degree
}

fn union_minus_observed(
    clusters: &ClusterSet,
    selected: &[usize],
    observed: &BTreeSet<ConceptId>,
) -> BTreeSet<ConceptId> {
    let mut union: BTreeSet<ConceptId> = BTreeSet::new();
    for &i in selected {
        union.extend(clusters.clusters()[i].iter().cloned());
    }
    union.difference(observed).cloned().collect()
}

/// SLACK: select every cluster sharing at least one concept (ambiguous
/// counts) with C@i; suggest the union of the selected clusters minus the
/// referenced concepts.
pub fn suggest_slack(clusters: &ClusterSet, c_at_i: &SessionConceptSet) -> Suggestion {
    let observed = c_at_i.flatten();
    let selected: Vec<usize> = clusters
        .iter()
        .enumerate()
        .filter(|(_, cl)| !cl.is_disjoint(&observed))
        .map(|(i, _)| i)
        .collect();
    Suggestion {
        concepts: union_minus_observed(clusters, &selected, &observed),
        selected_clusters: selected,
        strategy: Strategy::Slack,
        n_best: None,
    }
}

/// SLACK-selective: rank clusters by degree of matching and keep the top
/// `n_best` with positive degree. Ties go to the smaller cluster, then to
/// the lexicographically first concept ids.
pub fn suggest_slack_selective(
    clusters: &ClusterSet,
    c_at_i: &SessionConceptSet,
    n_best: usize,
) -> Result<Suggestion> {
    if n_best == 0 {
        return Err(Error::parameter("n_best must be at least 1"));
    }
    let observed = c_at_i.flatten();
    let mut ranked: Vec<(Rational64, usize)> = clusters
        .iter()
        .enumerate()
        .map(|(i, cl)| (degree_of_matching(cl, c_at_i), i))
        .filter(|(d, _)| *d > Rational64::zero())
        .collect();
    ranked.sort_by(|(da, ia), (db, ib)| {
        db.cmp(da)
            .then_with(|| {
                let (ca, cb) = (&clusters.clusters()[*ia], &clusters.clusters()[*ib]);
                ca.len().cmp(&cb.len()).then_with(|| ca.iter().cmp(cb.iter()))
            })
    });
    let selected: Vec<usize> = ranked.into_iter().take(n_best).map(|(_, i)| i).collect();
    Ok(Suggestion {
        concepts: union_minus_observed(clusters, &selected, &observed),
        selected_clusters: selected,
        strategy: Strategy::SlackSelective,
        n_best: Some(n_best),
    })
}

/// STRICT: select only clusters containing every referenced concept,
/// ambiguous or not. An empty C@i selects nothing.
pub fn suggest_strict(clusters: &ClusterSet, c_at_i: &SessionConceptSet) -> Suggestion {
    let observed = c_at_i.flatten();
    let selected: Vec<usize> = if observed.is_empty() {
        Vec::new()
    } else {
        clusters
            .iter()
            .enumerate()
            .filter(|(_, cl)| observed.is_subset(cl))
            .map(|(i, _)| i)
            .collect()
    };
    Suggestion {
        concepts: union_minus_observed(clusters, &selected, &observed),
        selected_clusters: selected,
        strategy: Strategy::Strict,
        n_best: None,
    }
}

/// Dispatch on strategy; `n_best` only applies to SLACK-selective.
pub fn suggest(
    clusters: &ClusterSet,
    c_at_i: &SessionConceptSet,
    strategy: Strategy,
    n_best: usize,
) -> Result<Suggestion> {
    match strategy {
        Strategy::Slack => Ok(suggest_slack(clusters, c_at_i)),
        Strategy::SlackSelective => suggest_slack_selective(clusters, c_at_i, n_best),
        Strategy::Strict => Ok(suggest_strict(clusters, c_at_i)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::communities::ClusterParams;
    use crate::interpret::{QueryInterpretation, ResidualAmbiguity};

    fn cid(s: &str) -> ConceptId {
        ConceptId::new(s)
    }

    fn set(ids: &[&str]) -> BTreeSet<ConceptId> {
        ids.iter().map(|s| cid(s)).collect()
    }

    fn cluster_set(sets: &[&[&str]]) -> ClusterSet {
        ClusterSet::new(
            sets.iter().map(|s| set(s)).collect(),
            ClusterParams {
                v: 2,
                seed: 0,
                threshold: None,
                iterations: 0,
            },
        )
    }

    /// C@i = {c1, {c3,c4}} unless stated otherwise.
    fn c_at_i(groups: &[&[&str]]) -> SessionConceptSet {
        SessionConceptSet::from_interpretations(
            ResidualAmbiguity::Promote,
            &[QueryInterpretation::from_groups(
                groups.iter().map(|g| set(g)),
            )],
        )
    }

    #[test]
    fn degree_counts_unambiguous_as_one_and_ambiguous_fractionally() {
        let c = c_at_i(&[&["c1"], &["c3", "c4"], &["c5"]]);
        assert_eq!(
            degree_of_matching(&set(&["c1", "c7"]), &c),
            Rational64::new(1, 1)
        );
        assert_eq!(
            degree_of_matching(&set(&["c2", "c3", "c5", "c8"]), &c),
            Rational64::new(3, 2)
        );
        assert_eq!(
            degree_of_matching(&set(&["q", "r"]), &c),
            Rational64::new(0, 1)
        );
    }

    #[test]
    fn slack_unions_selected_clusters_minus_observed() {
        let clusters = cluster_set(&[&["c1", "c7"], &["c2", "c3", "c5", "c8"]]);
        let c = c_at_i(&[&["c1"], &["c3", "c4"]]);
        let suggestion = suggest_slack(&clusters, &c);
        assert_eq!(suggestion.concepts, set(&["c2", "c5", "c7", "c8"]));
        assert_eq!(suggestion.selected_clusters.len(), 2);
    }

    #[test]
    fn slack_with_disjoint_clusters_is_empty() {
        let clusters = cluster_set(&[&["x", "y"]]);
        let c = c_at_i(&[&["c1"]]);
        assert!(suggest_slack(&clusters, &c).concepts.is_empty());
    }

    #[test]
    fn cluster_inside_observed_contributes_nothing() {
        let clusters = cluster_set(&[&["c1"]]);
        let c = c_at_i(&[&["c1"]]);
        let suggestion = suggest_slack(&clusters, &c);
        assert_eq!(suggestion.selected_clusters, vec![0]);
        assert!(suggestion.concepts.is_empty());
    }

    #[test]
    fn slack_selective_keeps_best_cluster() {
        // Degrees from the degree test: CL1 = 1, CL2 = 1.5; only CL2 survives
        // n_best = 1 and its unobserved concepts are {c2, c8}.
        let clusters = cluster_set(&[&["c1", "c7"], &["c2", "c3", "c5", "c8"]]);
        let c = c_at_i(&[&["c1"], &["c3", "c4"], &["c5"]]);
        let suggestion = suggest_slack_selective(&clusters, &c, 1).unwrap();
        assert_eq!(suggestion.concepts, set(&["c2", "c8"]));
        assert_eq!(suggestion.selected_clusters.len(), 1);
    }

    #[test]
    fn slack_selective_all_zero_degrees_is_empty() {
        let clusters = cluster_set(&[&["x"], &["y", "z"]]);
        let c = c_at_i(&[&["c1"]]);
        let suggestion = suggest_slack_selective(&clusters, &c, 3).unwrap();
        assert!(suggestion.concepts.is_empty());
        assert!(suggestion.selected_clusters.is_empty());
    }

    #[test]
    fn slack_selective_saturates_to_slack() {
        let clusters = cluster_set(&[&["c1", "c7"], &["c3", "c9"], &["x", "y"]]);
        let c = c_at_i(&[&["c1"], &["c3", "c4"]]);
        let saturated = suggest_slack_selective(&clusters, &c, clusters.len()).unwrap();
        let slack = suggest_slack(&clusters, &c);
        assert_eq!(saturated.concepts, slack.concepts);
        let mut sel = saturated.selected_clusters.clone();
        sel.sort_unstable();
        assert_eq!(sel, slack.selected_clusters);
    }

    #[test]
    fn slack_selective_rejects_zero_n_best() {
        let clusters = cluster_set(&[&["a"]]);
        assert!(suggest_slack_selective(&clusters, &c_at_i(&[&["a"]]), 0).is_err());
    }

    #[test]
    fn strict_requires_superset_of_singleton() {
        let clusters = cluster_set(&[&["c1", "c7"]]);
        let c = c_at_i(&[&["c1"]]);
        let suggestion = suggest_strict(&clusters, &c);
        assert_eq!(suggestion.concepts, set(&["c7"]));
    }

    #[test]
    fn strict_needs_all_concepts_in_one_cluster() {
        let clusters = cluster_set(&[&["c1", "c7"], &["c9", "c8"]]);
        let c = c_at_i(&[&["c1"], &["c9"]]);
        assert!(suggest_strict(&clusters, &c).concepts.is_empty());
    }

    #[test]
    fn strict_covers_both_members_of_an_ambiguity_set() {
        let clusters = cluster_set(&[&["c1", "c3", "c4", "c9"], &["c1", "c3", "c9"]]);
        let c = c_at_i(&[&["c1"], &["c3", "c4"]]);
        let suggestion = suggest_strict(&clusters, &c);
        // Only the first cluster contains c1, c3, and c4.
        assert_eq!(suggestion.selected_clusters, vec![0]);
        assert_eq!(suggestion.concepts, set(&["c9"]));
    }

    #[test]
    fn strict_with_empty_session_selects_nothing() {
        let clusters = cluster_set(&[&["a", "b"]]);
        let c = SessionConceptSet::new();
        let suggestion = suggest_strict(&clusters, &c);
        assert!(suggestion.selected_clusters.is_empty());
        assert!(suggestion.concepts.is_empty());
    }

    #[test]
    fn strict_selection_is_contained_in_slack_selection() {
        let clusters = cluster_set(&[&["c1", "c2"], &["c1", "c3", "c4"], &["x", "y"]]);
        for groups in [&[&["c1"]][..], &[&["c1"], &["c3", "c4"]][..], &[&["x"]][..]] {
            let c = c_at_i(groups);
            let strict = suggest_strict(&clusters, &c);
            let slack = suggest_slack(&clusters, &c);
            for i in &strict.selected_clusters {
                assert!(slack.selected_clusters.contains(i));
            }
            assert!(strict.concepts.is_subset(&slack.concepts));
        }
    }

    #[test]
    fn no_strategy_suggests_observed_concepts() {
        let clusters = cluster_set(&[&["c1", "c3", "c4", "c9"]]);
        let c = c_at_i(&[&["c1"], &["c3", "c4"]]);
        let observed = c.flatten();
        for suggestion in [
            suggest_slack(&clusters, &c),
            suggest_slack_selective(&clusters, &c, 1).unwrap(),
            suggest_strict(&clusters, &c),
        ] {
            assert!(suggestion.concepts.is_disjoint(&observed));
        }
    }
}
