//! Candidate generation: a normalized label/alias index over the store, and
//! loading of precomputed candidate lists shipped with datasets.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, LabelKind, TripleStore};

const INDEX_HEADER: &str = "kgned-label-index\tv1";

/// Lowercase and collapse runs of whitespace to one space.
pub fn normalize(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    Exact,
    Contains,
}

impl std::str::FromStr for MatchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(MatchMode::Exact),
            "contains" => Ok(MatchMode::Contains),
            other => Err(Error::Config(format!("unknown match mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateSource {
    Index,
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub mention_id: Option<String>,
    pub entities: Vec<EntityId>,
    pub source: CandidateSource,
}

impl CandidateSet {
    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelIndex {
    keys: BTreeMap<String, BTreeSet<EntityId>>,
}

impl LabelIndex {
    /// Indexes every primary label and alias of every labeled entity.
    /// Subjects used as relations in the store are skipped.
    pub fn build(store: &TripleStore) -> Self {
        let relations: HashSet<&str> = store.triples().map(|t| t.relation.as_str()).collect();
        let mut keys: BTreeMap<String, BTreeSet<EntityId>> = BTreeMap::new();
        for subject in store.labeled_subjects() {
            if relations.contains(subject) {
                continue;
            }
            let Ok(id) = EntityId::new(subject) else { continue };
            for rec in store.labels(subject) {
                if rec.kind == LabelKind::Description {
                    continue;
                }
                let key = normalize(&rec.label);
                if !key.is_empty() {
                    keys.entry(key).or_default().insert(id.clone());
                }
            }
        }
        Self { keys }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn lookup(&self, surface: &str, mode: MatchMode) -> CandidateSet {
        let needle = normalize(surface);
        let mut found = BTreeSet::new();
        if !needle.is_empty() {
            match mode {
                MatchMode::Exact => {
                    if let Some(ids) = self.keys.get(&needle) {
                        found.extend(ids.iter().cloned());
                    }
                }
                MatchMode::Contains => {
                    for (key, ids) in &self.keys {
                        if key.contains(&needle) {
                            found.extend(ids.iter().cloned());
                        }
                    }
                }
            }
        }
        CandidateSet {
            mention_id: None,
            entities: found.into_iter().collect(),
            source: CandidateSource::Index,
        }
    }

    /// Versioned text serialization: a header line, then
    /// `key<TAB>id id ...` per key in ascending key order.
    pub fn to_file_string(&self) -> String {
        let mut s = format!("{INDEX_HEADER}\n");
        for (key, ids) in &self.keys {
            let ids: Vec<&str> = ids.iter().map(EntityId::as_str).collect();
            s.push_str(&format!("{key}\t{}\n", ids.join(" ")));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::kg::write_atomic(path, self.to_file_string().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(INDEX_HEADER) => {}
            other => {
                return Err(Error::parse(
                    path,
                    1,
                    format!("unsupported index header {:?}", other.unwrap_or("")),
                ))
            }
        }
        let mut keys = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let (key, ids) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, i + 2, "expected key<TAB>ids"))?;
            let ids = ids
                .split(' ')
                .map(EntityId::new)
                .collect::<Result<BTreeSet<_>>>()
                .map_err(|e| Error::parse(path, i + 2, e.to_string()))?;
            keys.insert(key.to_owned(), ids);
        }
        Ok(Self { keys })
    }
}

/// Reads precomputed candidate lists from a dataset JSONL file, keyed by
/// mention id (the `id` field, or the 0-based line index when absent).
/// Order within each list is preserved; repeated ids keep their first
/// occurrence.
pub fn load_candidates(path: &Path) -> Result<IndexMap<String, CandidateSet>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = IndexMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |m: String| Error::parse(path, idx + 1, m);
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let id = match value.get("id") {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(other) => return Err(err(format!("field \"id\" must be a string, got {other}"))),
            None => idx.to_string(),
        };
        let list = value
            .get("candidates")
            .ok_or_else(|| err("missing field \"candidates\"".into()))?
            .as_array()
            .ok_or_else(|| err("field \"candidates\" must be an array".into()))?;
        let mut entities: Vec<EntityId> = Vec::with_capacity(list.len());
        for c in list {
            let s = c
                .as_str()
                .ok_or_else(|| err(format!("candidate {c} is not a string")))?;
            let id = EntityId::new(s).map_err(|e| err(e.to_string()))?;
            if !entities.contains(&id) {
                entities.push(id);
            }
        }
        out.insert(
            id.clone(),
            CandidateSet {
                mention_id: Some(id),
                entities,
                source: CandidateSource::Precomputed,
            },
        );
    }
    Ok(out)
}
