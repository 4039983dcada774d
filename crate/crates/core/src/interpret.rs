//! Query interpretation: tokenize, lemmatize, and match query text against
//! the ontology's phrase index, producing concept references with ambiguity
//! sets, plus the session-level concept set built incrementally from them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use num_rational::Rational64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logs::Session;
use crate::ontology::{ConceptId, Ontology};

/// Lowercase a string and split it on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Normalize a vocabulary phrase to lowercase space-joined tokens.
pub fn normalize_phrase(text: &str) -> String {
    tokenize(text).join(" ")
}

/// Dictionary lemmatizer with an English suffix-rule fallback.
///
/// Dictionary entries win; otherwise plural (-ies/-es/-s), -ing, and -ed
/// suffixes are stripped when the remaining stem is long enough, with a
/// no-op fallback.
#[derive(Debug, Clone, Default)]
pub struct Lemmatizer {
    dict: BTreeMap<String, String>,
}

impl Lemmatizer {
    pub fn new() -> Self {
        Lemmatizer::default()
    }

    /// Load `surface<TAB>lemma` pairs, one per line. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn from_dict_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut dict = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((surface, lemma)) = line.split_once('\t') else {
                return Err(Error::format(path, n + 1, "expected surface<TAB>lemma"));
            };
            dict.insert(surface.trim().to_lowercase(), lemma.trim().to_lowercase());
        }
        Ok(Lemmatizer { dict })
    }

    pub fn with_entries<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        Lemmatizer {
            dict: entries
                .into_iter()
                .map(|(s, l)| (s.into(), l.into()))
                .collect(),
        }
    }

    pub fn lemmatize(&self, token: &str) -> String {
        if let Some(lemma) = self.dict.get(token) {
            return lemma.clone();
        }
        suffix_lemma(token)
    }
}

fn suffix_lemma(token: &str) -> String {
    let n = token.len();
    if let Some(stem) = token.strip_suffix("ies") {
        if stem.len() >= 2 {
            return format!("{stem}y");
        }
    }
    for es in ["ches", "shes", "xes", "sses", "zes"] {
        if token.ends_with(es) && n > es.len() {
            return token[..n - 2].to_owned();
        }
    }
    if token.ends_with('s') && !token.ends_with("ss") && !token.ends_with("us") && n >= 3 {
        return token[..n - 1].to_owned();
    }
    if let Some(stem) = token.strip_suffix("ing") {
        if stem.len() >= 3 {
            return undouble(stem);
        }
    }
    if let Some(stem) = token.strip_suffix("ed") {
        if stem.len() >= 3 {
            return undouble(stem);
        }
    }
    token.to_owned()
}

/// Collapse a doubled final consonant ("runn" -> "run").
fn undouble(stem: &str) -> String {
    let bytes = stem.as_bytes();
    let n = bytes.len();
    if n >= 2 && bytes[n - 1] == bytes[n - 2] && !b"aeiou".contains(&bytes[n - 1]) {
        stem[..n - 1].to_owned()
    } else {
        stem.to_owned()
    }
}

/// One concept reference produced by a matched phrase. A multi-concept group
/// is an ambiguity set; every member carries evidence 1/|group|.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefGroup {
    concepts: BTreeSet<ConceptId>,
}

impl RefGroup {
    pub(crate) fn new(concepts: BTreeSet<ConceptId>) -> RefGroup {
        debug_assert!(!concepts.is_empty());
        RefGroup { concepts }
    }

    pub fn concepts(&self) -> &BTreeSet<ConceptId> {
        &self.concepts
    }

    /// Evidence weight per member: exactly 1/|concepts|.
    pub fn factor(&self) -> Rational64 {
        Rational64::new(1, self.concepts.len() as i64)
    }

    pub fn is_ambiguous(&self) -> bool {
        self.concepts.len() > 1
    }
}

/// Token span of a matched phrase and the reference group it produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchedSpan {
    pub token_start: usize,
    pub token_len: usize,
    pub group: usize,
}

/// Concept references extracted from one query.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QueryInterpretation {
    groups: Vec<RefGroup>,
    matched_tokens: Vec<MatchedSpan>,
}

impl QueryInterpretation {
    /// Build an interpretation from raw concept groups, applying the same
    /// dedup and within-query resolution as `interpret_query`. Spans are left
    /// empty. Intended for tests and synthetic pipelines.
    pub fn from_groups<I>(groups: I) -> QueryInterpretation
    where
        I: IntoIterator<Item = BTreeSet<ConceptId>>,
    {
        let sets: Vec<BTreeSet<ConceptId>> = groups.into_iter().collect();
        let spans = vec![None; sets.len()];
        build_interpretation(sets, spans)
    }

    pub fn groups(&self) -> &[RefGroup] {
        &self.groups
    }

    pub fn matched_tokens(&self) -> &[MatchedSpan] {
        &self.matched_tokens
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Every concept referenced by this query, ambiguous or not.
    pub fn referenced(&self) -> BTreeSet<ConceptId> {
        self.groups
            .iter()
            .flat_map(|g| g.concepts().iter().cloned())
            .collect()
    }
}

/// Interpret a raw query string against the ontology.
///
/// Tokens are lowercased, split on non-alphanumerics, and lemmatized; the
/// longest indexed phrase wins at each position and matched tokens are not
/// reused. Duplicate groups are merged and a concept matched unambiguously
/// elsewhere in the same query is dropped from that query's ambiguity sets.
pub fn interpret_query(
    ontology: &Ontology,
    lemmatizer: &Lemmatizer,
    text: &str,
) -> QueryInterpretation {
    let tokens: Vec<String> = tokenize(text)
        .iter()
        .map(|t| lemmatizer.lemmatize(t))
        .collect();
    let max_len = ontology.max_phrase_tokens();

    let mut sets: Vec<BTreeSet<ConceptId>> = Vec::new();
    let mut spans: Vec<Option<(usize, usize)>> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let longest = max_len.min(tokens.len() - i);
        let mut advanced = false;
        for len in (1..=longest).rev() {
            let phrase = tokens[i..i + len].join(" ");
            if let Some(ids) = ontology.lookup_ref(&phrase) {
                sets.push(ids.clone());
                spans.push(Some((i, len)));
                i += len;
                advanced = true;
                break;
            }
        }
        if !advanced {
            i += 1;
        }
    }
    build_interpretation(sets, spans)
}

/// Within-query resolution: iteratively remove members of singleton groups
/// from multi-concept groups, then deduplicate surviving groups.
fn build_interpretation(
    mut sets: Vec<BTreeSet<ConceptId>>,
    spans: Vec<Option<(usize, usize)>>,
) -> QueryInterpretation {
    loop {
        let singles: BTreeSet<ConceptId> = sets
            .iter()
            .filter(|s| s.len() == 1)
            .flat_map(|s| s.iter().cloned())
            .collect();
        let mut changed = false;
        for set in sets.iter_mut() {
            if set.len() > 1 {
                let before = set.len();
                set.retain(|c| !singles.contains(c));
                if set.len() != before {
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let mut groups: Vec<RefGroup> = Vec::new();
    let mut matched_tokens = Vec::new();
    for (set, span) in sets.into_iter().zip(spans) {
        if set.is_empty() {
            continue;
        }
        let idx = match groups.iter().position(|g| g.concepts() == &set) {
            Some(idx) => idx,
            None => {
                groups.push(RefGroup::new(set));
                groups.len() - 1
            }
        };
        if let Some((token_start, token_len)) = span {
            matched_tokens.push(MatchedSpan {
                token_start,
                token_len,
                group: idx,
            });
        }
    }
    QueryInterpretation {
        groups,
        matched_tokens,
    }
}

/// What to do with the rest of an ambiguity set once one member has been
/// referenced unambiguously and removed from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualAmbiguity {
    /// A set reduced to one member promotes that member to unambiguous.
    #[default]
    Promote,
    /// A set reduced to one member stays behind as a residual ambiguity set
    /// of size 1 (its member still counts as ambiguous).
    Keep,
}

impl std::str::FromStr for ResidualAmbiguity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "promote" => Ok(ResidualAmbiguity::Promote),
            "keep" => Ok(ResidualAmbiguity::Keep),
            other => Err(Error::parameter(format!(
                "unknown residual-ambiguity mode {other:?} (expected promote|keep)"
            ))),
        }
    }
}

/// The set of concepts referenced so far in a session: unambiguous concepts
/// plus ambiguity sets. Under the default policy ambiguity sets always have
/// at least two members; under `ResidualAmbiguity::Keep` reduced sets of one
/// member may remain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionConceptSet {
    unambiguous: BTreeSet<ConceptId>,
    ambiguity_sets: BTreeSet<BTreeSet<ConceptId>>,
    policy: ResidualAmbiguity,
}

impl Default for SessionConceptSet {
    fn default() -> Self {
        SessionConceptSet::new()
    }
}

impl SessionConceptSet {
    pub fn new() -> Self {
        SessionConceptSet::with_policy(ResidualAmbiguity::Promote)
    }

    pub fn with_policy(policy: ResidualAmbiguity) -> Self {
        SessionConceptSet {
            unambiguous: BTreeSet::new(),
            ambiguity_sets: BTreeSet::new(),
            policy,
        }
    }

    /// Fold the interpretations of the first queries of a session into C@i.
    pub fn from_interpretations<'a, I>(policy: ResidualAmbiguity, interps: I) -> Self
    where
        I: IntoIterator<Item = &'a QueryInterpretation>,
    {
        let mut set = SessionConceptSet::with_policy(policy);
        for q in interps {
            set.add_query(q);
        }
        set
    }

    /// Extend with one query's interpretation: singleton groups become
    /// unambiguous references, multi-concept groups become ambiguity sets,
    /// and the invariants are re-established.
    pub fn add_query(&mut self, q: &QueryInterpretation) {
        for group in q.groups() {
            if group.is_ambiguous() {
                self.ambiguity_sets.insert(group.concepts().clone());
            } else {
                self.unambiguous
                    .extend(group.concepts().iter().cloned());
            }
        }
        self.normalize();
    }

    /// Re-establish the invariants: unambiguous concepts leave every
    /// ambiguity set; empty sets vanish; under the promote policy a set
    /// reduced to one member promotes it.
    fn normalize(&mut self) {
        loop {
            let mut next: BTreeSet<BTreeSet<ConceptId>> = BTreeSet::new();
            let mut promoted = false;
            for set in std::mem::take(&mut self.ambiguity_sets) {
                let reduced: BTreeSet<ConceptId> = set
                    .into_iter()
                    .filter(|c| !self.unambiguous.contains(c))
                    .collect();
                match (reduced.len(), self.policy) {
                    (0, _) => {}
                    (1, ResidualAmbiguity::Promote) => {
                        self.unambiguous.extend(reduced);
                        promoted = true;
                    }
                    _ => {
                        next.insert(reduced);
                    }
                }
            }
            self.ambiguity_sets = next;
            if !promoted {
                break;
            }
        }
    }

    pub fn unambiguous(&self) -> &BTreeSet<ConceptId> {
        &self.unambiguous
    }

    pub fn ambiguity_sets(&self) -> &BTreeSet<BTreeSet<ConceptId>> {
        &self.ambiguity_sets
    }

    /// All referenced concepts, ambiguous or not, duplicate-free.
    pub fn flatten(&self) -> BTreeSet<ConceptId> {
        let mut all = self.unambiguous.clone();
        for set in &self.ambiguity_sets {
            all.extend(set.iter().cloned());
        }
        all
    }

    pub fn is_empty(&self) -> bool {
        self.unambiguous.is_empty() && self.ambiguity_sets.is_empty()
    }

    /// Size of the smallest ambiguity set containing `c`, if any.
    pub fn smallest_ambiguity_set(&self, c: &ConceptId) -> Option<usize> {
        self.ambiguity_sets
            .iter()
            .filter(|s| s.contains(c))
            .map(BTreeSet::len)
            .min()
    }
}

/// Per-query interpretations of one session, in query order. Queries with no
/// match keep their position as empty interpretations so that C@i indexing
/// stays aligned with the raw query sequence.
#[derive(Debug, Clone, Default)]
pub struct InterpretedSession {
    pub queries: Vec<QueryInterpretation>,
}

impl InterpretedSession {
    pub fn new(ontology: &Ontology, lemmatizer: &Lemmatizer, session: &Session) -> Self {
        InterpretedSession {
            queries: session
                .queries
                .iter()
                .map(|q| interpret_query(ontology, lemmatizer, &q.text))
                .collect(),
        }
    }

    /// True when at least one query references a concept.
    pub fn is_relevant(&self) -> bool {
        self.queries.iter().any(|q| !q.is_empty())
    }

    /// Every concept referenced anywhere in the session.
    pub fn referenced(&self) -> BTreeSet<ConceptId> {
        self.queries
            .iter()
            .flat_map(QueryInterpretation::referenced)
            .collect()
    }

    /// Concepts referenced from query `from` (0-based) onward.
    pub fn referenced_from(&self, from: usize) -> BTreeSet<ConceptId> {
        self.queries
            .iter()
            .skip(from)
            .flat_map(QueryInterpretation::referenced)
            .collect()
    }

    /// C@i: the concept set after the first `i` queries.
    pub fn concept_set_at(&self, i: usize, policy: ResidualAmbiguity) -> SessionConceptSet {
        SessionConceptSet::from_interpretations(policy, self.queries.iter().take(i))
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Interpret many sessions in parallel, preserving order.
pub fn interpret_sessions(
    ontology: &Ontology,
    lemmatizer: &Lemmatizer,
    sessions: &[Session],
) -> Vec<InterpretedSession> {
    sessions
        .par_iter()
        .map(|s| InterpretedSession::new(ontology, lemmatizer, s))
        .collect()
}
