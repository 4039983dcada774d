//! Ontology loading, validation, and the lemma index used to match query
//! terms to concepts.
//!
//! The document format is a flat JSON array of concept records. Every phrase
//! in a concept's vocabulary (its lemma, synonyms, and keywords) is expected
//! to be lemmatized already; the loader lowercases and splits phrases into
//! space-joined token sequences but never re-lemmatizes them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interpret::normalize_phrase;

/// Stable identifier of an ontology concept.
///
/// Cheap to clone; compares and hashes by content.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptId(Arc<str>);

impl ConceptId {
    pub fn new(id: impl AsRef<str>) -> Self {
        ConceptId(Arc::from(id.as_ref()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", &*self.0)
    }
}

impl From<&str> for ConceptId {
    fn from(s: &str) -> Self {
        ConceptId::new(s)
    }
}

/// On-disk shape of one concept record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptRecord {
    pub id: String,
    pub label: String,
    pub lemma: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

/// A loaded, normalized concept.
#[derive(Debug, Clone)]
pub struct Concept {
    pub id: ConceptId,
    pub label: String,
    /// Lemmatized head term, lowercase, space-joined tokens.
    pub lemma: String,
    pub synonyms: BTreeSet<String>,
    pub keywords: BTreeSet<String>,
    pub description: Option<String>,
}

impl Concept {
    /// The full match vocabulary: {lemma} ∪ synonyms ∪ keywords.
    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.lemma.as_str())
            .chain(self.synonyms.iter().map(String::as_str))
            .chain(self.keywords.iter().map(String::as_str))
    }

    fn to_record(&self) -> ConceptRecord {
        ConceptRecord {
            id: self.id.as_str().to_owned(),
            label: self.label.clone(),
            lemma: self.lemma.clone(),
            synonyms: self.synonyms.iter().cloned().collect(),
            keywords: self.keywords.iter().cloned().collect(),
            description: self.description.clone(),
        }
    }
}

/// Immutable concept collection plus the phrase index used for matching.
///
/// `lemma_index` maps every normalized vocabulary phrase to the set of
/// concepts listing it. The ontology is safe to share across threads.
#[derive(Debug, Clone)]
pub struct Ontology {
    concepts: Vec<Concept>,
    by_id: BTreeMap<ConceptId, usize>,
    lemma_index: BTreeMap<String, BTreeSet<ConceptId>>,
    max_phrase_tokens: usize,
}

impl Ontology {
    /// Load an ontology document from a file.
    pub fn load(path: impl AsRef<Path>) -> Result<Ontology> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Ontology::from_json_str(&text).map_err(|e| match e {
            Error::Format { line, message, .. } => Error::format(path, line, message),
            other => other,
        })
    }

    /// Parse an ontology document from a JSON string.
    pub fn from_json_str(text: &str) -> Result<Ontology> {
        let records: Vec<ConceptRecord> = serde_json::from_str(text)
            .map_err(|e| Error::format("<ontology>", e.line(), e.to_string()))?;
        Ontology::from_records(records)
    }

    /// Build and validate an ontology from parsed records.
    pub fn from_records(records: Vec<ConceptRecord>) -> Result<Ontology> {
        if records.is_empty() {
            return Err(Error::validation("ontology contains no concepts"));
        }
        let mut concepts = Vec::with_capacity(records.len());
        let mut by_id = BTreeMap::new();
        for (n, rec) in records.into_iter().enumerate() {
            if rec.id.trim().is_empty() {
                return Err(Error::validation(format!("record {n}: empty concept id")));
            }
            if rec.label.trim().is_empty() {
                return Err(Error::validation(format!(
                    "concept {:?}: empty label",
                    rec.id
                )));
            }
            let lemma = normalize_phrase(&rec.lemma);
            if lemma.is_empty() {
                return Err(Error::validation(format!(
                    "concept {:?}: lemma normalizes to nothing",
                    rec.id
                )));
            }
            let id = ConceptId::new(&rec.id);
            if by_id.insert(id.clone(), concepts.len()).is_some() {
                return Err(Error::validation(format!(
                    "duplicate concept id {:?}",
                    rec.id
                )));
            }
            let norm_set = |items: Vec<String>| -> BTreeSet<String> {
                items
                    .iter()
                    .map(|s| normalize_phrase(s))
                    .filter(|s| !s.is_empty())
                    .collect()
            };
            concepts.push(Concept {
                id,
                label: rec.label,
                lemma,
                synonyms: norm_set(rec.synonyms),
                keywords: norm_set(rec.keywords),
                description: rec.description,
            });
        }

        let mut lemma_index: BTreeMap<String, BTreeSet<ConceptId>> = BTreeMap::new();
        let mut max_phrase_tokens = 1;
        for concept in &concepts {
            for phrase in concept.vocabulary() {
                max_phrase_tokens =
                    max_phrase_tokens.max(phrase.split(' ').count());
                lemma_index
                    .entry(phrase.to_owned())
                    .or_default()
                    .insert(concept.id.clone());
            }
        }

        Ok(Ontology {
            concepts,
            by_id,
            lemma_index,
            max_phrase_tokens,
        })
    }

    /// Concepts whose vocabulary contains `phrase` exactly.
    ///
    /// `phrase` must be lowercase and space-joined; unknown phrases yield an
    /// empty set.
    pub fn lookup(&self, phrase: &str) -> BTreeSet<ConceptId> {
        self.lookup_ref(phrase).cloned().unwrap_or_default()
    }

    pub(crate) fn lookup_ref(&self, phrase: &str) -> Option<&BTreeSet<ConceptId>> {
        self.lemma_index.get(phrase)
    }

    pub fn concept(&self, id: &ConceptId) -> Option<&Concept> {
        self.by_id.get(id).map(|&i| &self.concepts[i])
    }

    pub fn contains(&self, id: &ConceptId) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    /// Longest indexed phrase, in tokens. Bounds the interpreter's lookahead.
    pub fn max_phrase_tokens(&self) -> usize {
        self.max_phrase_tokens
    }

    pub fn lemma_index(&self) -> &BTreeMap<String, BTreeSet<ConceptId>> {
        &self.lemma_index
    }

    /// Serialize back to the document format, concepts sorted by id.
    pub fn to_json_string(&self) -> String {
        let mut records: Vec<ConceptRecord> =
            self.concepts.iter().map(Concept::to_record).collect();
        records.sort_by(|a, b| a.id.cmp(&b.id));
        serde_json::to_string_pretty(&records).expect("ontology records serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kindergarten_json() -> &'static str {
        r#"[{
            "id": "kindergarten",
            "label": "Kindergarten",
            "lemma": "kindergarten",
            "synonyms": ["nursery", "pre-school"],
            "keywords": ["child", "educational", "young"]
        }]"#
    }

    #[test]
    fn loads_single_concept_and_indexes_keywords() {
        let ont = Ontology::from_json_str(kindergarten_json()).unwrap();
        assert_eq!(ont.len(), 1);
        let hits = ont.lookup("child");
        assert_eq!(hits, BTreeSet::from([ConceptId::new("kindergarten")]));
        assert_eq!(ont.lookup("kindergarten").len(), 1);
        // Hyphenated synonym is normalized to a two-token phrase.
        assert_eq!(ont.lookup("pre school").len(), 1);
        assert_eq!(ont.max_phrase_tokens(), 2);
    }

    #[test]
    fn shared_keyword_maps_to_both_concepts() {
        let json = r#"[
            {"id": "a", "label": "A", "lemma": "alpha", "keywords": ["child"]},
            {"id": "b", "label": "B", "lemma": "beta", "keywords": ["child"]}
        ]"#;
        let ont = Ontology::from_json_str(json).unwrap();
        let hits = ont.lookup("child");
        assert_eq!(hits.len(), 2);
        assert!(hits.contains(&ConceptId::new("a")));
        assert!(hits.contains(&ConceptId::new("b")));
    }

    #[test]
    fn duplicate_id_rejected() {
        let json = r#"[
            {"id": "x", "label": "X", "lemma": "ex"},
            {"id": "x", "label": "X2", "lemma": "ex2"}
        ]"#;
        let err = Ontology::from_json_str(json).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn empty_document_rejected() {
        assert!(Ontology::from_json_str("[]").is_err());
    }

    #[test]
    fn parse_failure_reports_line() {
        let err = Ontology::from_json_str("[{\"id\": }]").unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn unknown_phrase_is_empty() {
        let ont = Ontology::from_json_str(kindergarten_json()).unwrap();
        assert!(ont.lookup("zzz").is_empty());
    }

    #[test]
    fn case_is_folded_on_load() {
        let json = r#"[{"id": "k", "label": "K", "lemma": "Kindergarten", "keywords": ["CHILD"]}]"#;
        let ont = Ontology::from_json_str(json).unwrap();
        assert_eq!(ont.lookup("kindergarten").len(), 1);
        assert_eq!(ont.lookup("child").len(), 1);
    }

    #[test]
    fn index_is_exactly_the_vocabulary_union() {
        let ont = Ontology::from_json_str(kindergarten_json()).unwrap();
        let mut expected = BTreeSet::new();
        for c in ont.concepts() {
            for p in c.vocabulary() {
                expected.insert(p.to_owned());
            }
        }
        let indexed: BTreeSet<String> = ont.lemma_index().keys().cloned().collect();
        assert_eq!(indexed, expected);
    }

    #[test]
    fn round_trip_preserves_index() {
        let ont = Ontology::from_json_str(kindergarten_json()).unwrap();
        let reloaded = Ontology::from_json_str(&ont.to_json_string()).unwrap();
        assert_eq!(ont.lemma_index(), reloaded.lemma_index());
    }
}
