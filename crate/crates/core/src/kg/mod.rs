//! Knowledge-graph triple store.
//!
//! Triples are grouped by `(head, hop)`. Within a group, `rank` is the
//! retrieval order frozen at fetch time, so context built from the store is
//! reproducible regardless of what the endpoint would return today.
//!
//! Two TSV files back a store (UTF-8, LF line endings, no header):
//!
//! ```text
//! triples.tsv  head<TAB>relation<TAB>tail<TAB>hop<TAB>is_literal(0|1)
//! labels.tsv   subject<TAB>kind(label|alias|description)<TAB>text
//! ```
//!
//! Free-text fields (literal tails and label text) escape `\`, TAB, LF and CR
//! as `\\`, `\t`, `\n` and `\r`.

pub mod sparql;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRIPLES_FILE: &str = "triples.tsv";
pub const LABELS_FILE: &str = "labels.tsv";

macro_rules! opaque_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Result<Self> {
                let id = id.into();
                if id.is_empty() || id.chars().any(char::is_whitespace) {
                    return Err(Error::InvalidId(id));
                }
                Ok(Self(id))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                Self::new(s)
            }
        }

        impl TryFrom<String> for $name {
            type Error = Error;
            fn try_from(s: String) -> Result<Self> {
                Self::new(s)
            }
        }

        impl From<$name> for String {
            fn from(id: $name) -> String {
                id.0
            }
        }

        impl AsRef<str> for $name {
            fn as_ref(&self) -> &str {
                &self.0
            }
        }
    };
}

opaque_id!(
    /// A KG entity identifier such as `Q1967298`.
    EntityId
);
opaque_id!(
    /// A KG relation identifier such as `P31` or `description`.
    RelationId
);

/// Graph distance of a triple from the candidate entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Hop {
    One,
    Two,
}

impl Hop {
    pub fn as_u8(self) -> u8 {
        match self {
            Hop::One => 1,
            Hop::Two => 2,
        }
    }

    pub fn from_u8(n: u8) -> Option<Self> {
        match n {
            1 => Some(Hop::One),
            2 => Some(Hop::Two),
            _ => None,
        }
    }
}

/// Which hop levels contribute context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum HopSet {
    #[default]
    #[serde(rename = "1")]
    One,
    #[serde(rename = "1&2")]
    OneAndTwo,
}

impl HopSet {
    pub fn levels(self) -> &'static [Hop] {
        match self {
            HopSet::One => &[Hop::One],
            HopSet::OneAndTwo => &[Hop::One, Hop::Two],
        }
    }
}

impl fmt::Display for HopSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HopSet::One => f.write_str("1"),
            HopSet::OneAndTwo => f.write_str("1&2"),
        }
    }
}

impl FromStr for HopSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1" => Ok(HopSet::One),
            "12" | "1&2" | "1,2" | "2" => Ok(HopSet::OneAndTwo),
            other => Err(Error::Config(format!(
                "unknown hop setting {other:?}; expected 1 or 12"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tail {
    Entity(EntityId),
    /// Verbatim literal (date, number, free text). Its label is itself.
    Literal(String),
}

impl Tail {
    pub fn is_literal(&self) -> bool {
        matches!(self, Tail::Literal(_))
    }

    pub fn raw(&self) -> &str {
        match self {
            Tail::Entity(id) => id.as_str(),
            Tail::Literal(s) => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: Tail,
    pub hop: Hop,
    /// Position within the `(head, hop)` group.
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Label,
    Alias,
    Description,
}

impl LabelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelKind::Label => "label",
            LabelKind::Alias => "alias",
            LabelKind::Description => "description",
        }
    }
}

impl FromStr for LabelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "label" => Ok(LabelKind::Label),
            "alias" => Ok(LabelKind::Alias),
            "description" => Ok(LabelKind::Description),
            other => Err(Error::Input(format!("unknown label kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelRecord {
    pub subject: String,
    pub label: String,
    pub kind: LabelKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct SubjectLabels {
    label: Option<String>,
    aliases: Vec<String>,
    descriptions: Vec<String>,
}

type TripleKey = (EntityId, RelationId, Tail, Hop);

/// In-memory KG: ordered triple groups plus the label function.
#[derive(Debug, Clone, Default)]
pub struct TripleStore {
    groups: BTreeMap<(EntityId, Hop), Vec<Triple>>,
    seen: HashSet<TripleKey>,
    labels: BTreeMap<String, SubjectLabels>,
}

impl PartialEq for TripleStore {
    fn eq(&self, other: &Self) -> bool {
        self.groups == other.groups && self.labels == other.labels
    }
}

impl TripleStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a triple at the end of its `(head, hop)` group. Returns `false`
    /// (and drops the triple) when the same `(head, relation, tail, hop)` is
    /// already present.
    pub fn push_triple(&mut self, head: EntityId, relation: RelationId, tail: Tail, hop: Hop) -> bool {
        let key = (head.clone(), relation.clone(), tail.clone(), hop);
        if !self.seen.insert(key) {
            return false;
        }
        let group = self.groups.entry((head.clone(), hop)).or_default();
        let rank = group.len();
        group.push(Triple {
            head,
            relation,
            tail,
            hop,
            rank,
        });
        true
    }

    /// Adds a label record. A second, different primary label for the same
    /// subject is ignored; repeated aliases/descriptions collapse.
    pub fn push_label(&mut self, record: LabelRecord) -> bool {
        let entry = self.labels.entry(record.subject).or_default();
        match record.kind {
            LabelKind::Label => {
                if entry.label.is_some() {
                    return false;
                }
                entry.label = Some(record.label);
            }
            LabelKind::Alias => {
                if entry.aliases.contains(&record.label) {
                    return false;
                }
                entry.aliases.push(record.label);
            }
            LabelKind::Description => {
                if entry.descriptions.contains(&record.label) {
                    return false;
                }
                entry.descriptions.push(record.label);
            }
        }
        true
    }

    /// Drops every triple whose head is `head` at the given hop level.
    pub fn remove_group(&mut self, head: &EntityId, hop: Hop) {
        if let Some(group) = self.groups.remove(&(head.clone(), hop)) {
            for t in group {
                self.seen.remove(&(t.head, t.relation, t.tail, t.hop));
            }
        }
    }

    pub fn has_head(&self, head: &EntityId) -> bool {
        self.groups.contains_key(&(head.clone(), Hop::One))
            || self.groups.contains_key(&(head.clone(), Hop::Two))
    }

    pub fn triple_count(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty() && self.labels.is_empty()
    }

    /// All triples, grouped by `(head, hop)` in ascending key order.
    pub fn triples(&self) -> impl Iterator<Item = &Triple> {
        self.groups.values().flatten()
    }

    /// Every subject that has at least one label record.
    pub fn labeled_subjects(&self) -> impl Iterator<Item = &str> {
        self.labels.keys().map(String::as_str)
    }

    /// Label records for `subject`: primary label first, then aliases, then
    /// descriptions. Never empty; an unknown subject yields its raw id.
    pub fn labels(&self, subject: &str) -> Vec<LabelRecord> {
        let record = |label: &str, kind| LabelRecord {
            subject: subject.to_owned(),
            label: label.to_owned(),
            kind,
        };
        let Some(entry) = self.labels.get(subject) else {
            return vec![record(subject, LabelKind::Label)];
        };
        let primary = entry.label.as_deref().unwrap_or(subject);
        std::iter::once(record(primary, LabelKind::Label))
            .chain(entry.aliases.iter().map(|a| record(a, LabelKind::Alias)))
            .chain(entry.descriptions.iter().map(|d| record(d, LabelKind::Description)))
            .collect()
    }

    /// The primary label, falling back to the raw id.
    pub fn primary_label<'a>(&'a self, subject: &'a str) -> &'a str {
        self.labels
            .get(subject)
            .and_then(|e| e.label.as_deref())
            .unwrap_or(subject)
    }

    /// Context source for `head`: hop-1 triples in rank order, followed by
    /// hop-2 triples when `hops` includes them.
    pub fn neighbors(&self, head: &EntityId, hops: HopSet) -> Vec<&Triple> {
        hops.levels()
            .iter()
            .filter_map(|&hop| self.groups.get(&(head.clone(), hop)))
            .flatten()
            .collect()
    }

    /// Loads a store from the two TSV files.
    pub fn load(triples_path: &Path, labels_path: &Path) -> Result<Self> {
        let mut store = TripleStore::new();
        let triples = read_to_string(triples_path)?;
        for (idx, line) in triples.split('\n').enumerate() {
            if line.is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let err = |msg: String| Error::parse(triples_path, lineno, msg);
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(err(format!("expected 5 columns, found {}", cols.len())));
            }
            let head = EntityId::new(cols[0]).map_err(|e| err(e.to_string()))?;
            let relation = RelationId::new(cols[1]).map_err(|e| err(e.to_string()))?;
            let hop = cols[3]
                .parse::<u8>()
                .ok()
                .and_then(Hop::from_u8)
                .ok_or_else(|| err(format!("unknown hop value {:?}", cols[3])))?;
            let tail = match cols[4] {
                "1" => Tail::Literal(unescape(cols[2]).map_err(err)?),
                "0" => Tail::Entity(EntityId::new(cols[2]).map_err(|e| err(e.to_string()))?),
                other => return Err(err(format!("is_literal must be 0 or 1, found {other:?}"))),
            };
            store.push_triple(head, relation, tail, hop);
        }

        let labels = read_to_string(labels_path)?;
        for (idx, line) in labels.split('\n').enumerate() {
            if line.is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let err = |msg: String| Error::parse(labels_path, lineno, msg);
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(err(format!("expected 3 columns, found {}", cols.len())));
            }
            if cols[0].is_empty() || cols[0].chars().any(char::is_whitespace) {
                return Err(err(format!("invalid subject {:?}", cols[0])));
            }
            let kind = cols[1].parse::<LabelKind>().map_err(|e| err(e.to_string()))?;
            store.push_label(LabelRecord {
                subject: cols[0].to_owned(),
                label: unescape(cols[2]).map_err(err)?,
                kind,
            });
        }
        Ok(store)
    }

    /// Loads `triples.tsv` and `labels.tsv` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        Self::load(&dir.join(TRIPLES_FILE), &dir.join(LABELS_FILE))
    }

    /// Like [`TripleStore::load_dir`], but a missing file counts as empty.
    pub fn load_dir_or_empty(dir: &Path) -> Result<Self> {
        let triples = dir.join(TRIPLES_FILE);
        let labels = dir.join(LABELS_FILE);
        if !triples.exists() && !labels.exists() {
            return Ok(Self::new());
        }
        for p in [&triples, &labels] {
            if !p.exists() {
                fs::write(p, "").map_err(|e| Error::io(format!("creating {}", p.display()), e))?;
            }
        }
        Self::load(&triples, &labels)
    }

    /// Canonical serialization: groups in key order, ranks ascending; labels
    /// by subject, then primary/alias/description.
    pub fn to_tsv(&self) -> (String, String) {
        let mut triples = String::new();
        for t in self.triples() {
            let (tail, literal) = match &t.tail {
                Tail::Entity(id) => (id.as_str().to_owned(), '0'),
                Tail::Literal(s) => (escape(s), '1'),
            };
            triples.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                t.head,
                t.relation,
                tail,
                t.hop.as_u8(),
                literal
            ));
        }
        let mut labels = String::new();
        for (subject, entry) in &self.labels {
            let mut line = |kind: LabelKind, text: &str| {
                labels.push_str(&format!("{subject}\t{}\t{}\n", kind.as_str(), escape(text)));
            };
            if let Some(l) = &entry.label {
                line(LabelKind::Label, l);
            }
            for a in &entry.aliases {
                line(LabelKind::Alias, a);
            }
            for d in &entry.descriptions {
                line(LabelKind::Description, d);
            }
        }
        (triples, labels)
    }

    pub fn write(&self, triples_path: &Path, labels_path: &Path) -> Result<()> {
        let (triples, labels) = self.to_tsv();
        write_atomic(triples_path, triples.as_bytes())?;
        write_atomic(labels_path, labels.as_bytes())
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        self.write(&dir.join(TRIPLES_FILE), &dir.join(LABELS_FILE))
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp~");
    let ctx = || format!("writing {}", path.display());
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(ctx(), e))?;
    f.write_all(bytes).map_err(|e| Error::io(ctx(), e))?;
    f.sync_all().map_err(|e| Error::io(ctx(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(ctx(), e))
}

pub(crate) fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub(crate) fn unescape(s: &str) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => return Err(format!("bad escape sequence \\{}", other.map(String::from).unwrap_or_default())),
        }
    }
    Ok(out)
}
