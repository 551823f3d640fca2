//! Canonical dataset format and the orchestration from raw examples to
//! labeled classifier inputs.
//!
//! One example per line:
//!
//! ```json
//! {"id": "m1", "sentence": "...", "surface": "National Highway", "span": [12, 28],
//!  "gold": "Q1967298", "candidates": ["Q1967298", "Q1967342"], "negatives": ["Q1967342"]}
//! ```
//!
//! `span` holds character offsets (end exclusive). `gold` may be `null` for
//! out-of-KB mentions. `id` and `negatives` are optional; the id defaults to
//! the 0-based line index.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::context::{build_context, ContextBundle, ContextConfig};
use crate::error::{Error, Result};
use crate::kg::{EntityId, TripleStore};
use crate::model::LabeledInput;
use crate::tokenize::{assemble_encoded, encode_mention, AssembledInput, Mention, Vocab};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionExample {
    pub id: String,
    pub mention: Mention,
    pub gold: Option<EntityId>,
    pub candidates: Vec<EntityId>,
    pub negatives: Vec<EntityId>,
}

impl MentionExample {
    /// Gold is set but absent from the candidate list.
    pub fn gold_missing(&self) -> bool {
        matches!(&self.gold, Some(g) if !self.candidates.contains(g))
    }

    pub fn to_json(&self) -> Value {
        json!({
            "id": self.id,
            "sentence": self.mention.sentence.text,
            "surface": self.mention.surface,
            "span": [self.mention.start, self.mention.end],
            "gold": self.gold.as_ref().map(EntityId::as_str),
            "candidates": self.candidates.iter().map(EntityId::as_str).collect::<Vec<_>>(),
            "negatives": self.negatives.iter().map(EntityId::as_str).collect::<Vec<_>>(),
        })
    }
}

fn field<'a>(obj: &'a Value, name: &str) -> std::result::Result<&'a Value, String> {
    obj.get(name).ok_or_else(|| format!("missing field {name:?}"))
}

fn str_field(obj: &Value, name: &str) -> std::result::Result<String, String> {
    field(obj, name)?
        .as_str()
        .map(str::to_owned)
        .ok_or_else(|| format!("field {name:?} must be a string"))
}

fn id_list(obj: &Value, name: &str, required: bool) -> std::result::Result<Vec<EntityId>, String> {
    let v = match obj.get(name) {
        None | Some(Value::Null) if !required => return Ok(Vec::new()),
        None => return Err(format!("missing field {name:?}")),
        Some(v) => v,
    };
    let arr = v.as_array().ok_or_else(|| format!("field {name:?} must be an array"))?;
    arr.iter()
        .map(|c| {
            c.as_str()
                .ok_or_else(|| format!("{name:?} entries must be strings"))
                .and_then(|s| EntityId::new(s).map_err(|e| e.to_string()))
        })
        .collect()
}

/// Parses one canonical JSON object. `default_id` is used when `id` is absent.
pub fn parse_example(obj: &Value, default_id: String) -> std::result::Result<MentionExample, String> {
    let id = match obj.get("id") {
        None | Some(Value::Null) => default_id,
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => return Err("field \"id\" must be a string".into()),
    };
    let sentence = str_field(obj, "sentence")?;
    let surface = str_field(obj, "surface")?;
    let span = field(obj, "span")?
        .as_array()
        .filter(|a| a.len() == 2)
        .and_then(|a| Some((a[0].as_u64()? as usize, a[1].as_u64()? as usize)))
        .ok_or("field \"span\" must be [start, end]")?;
    let gold = match field(obj, "gold")? {
        Value::Null => None,
        Value::String(s) => Some(EntityId::new(s.as_str()).map_err(|e| e.to_string())?),
        _ => return Err("field \"gold\" must be a string or null".into()),
    };
    let mention = Mention::with_surface(sentence, span.0, span.1, &surface).map_err(|e| e.to_string())?;
    let mut candidates = Vec::new();
    for c in id_list(obj, "candidates", true)? {
        if !candidates.contains(&c) {
            candidates.push(c);
        }
    }
    Ok(MentionExample {
        id,
        mention,
        gold,
        candidates,
        negatives: id_list(obj, "negatives", false)?,
    })
}

pub fn load_jsonl(path: &Path) -> Result<Vec<MentionExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let obj: Value = serde_json::from_str(line).map_err(|e| Error::parse(path, idx + 1, e.to_string()))?;
        let ex = parse_example(&obj, idx.to_string()).map_err(|m| Error::parse(path, idx + 1, m))?;
        if ex.gold_missing() {
            log::debug!("{}:{}: gold {} not among candidates", path.display(), idx + 1, ex.gold.as_ref().unwrap());
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn to_jsonl_string(examples: &[MentionExample]) -> String {
    examples.iter().map(|e| format!("{}\n", e.to_json())).collect()
}

pub fn write_jsonl(path: &Path, examples: &[MentionExample]) -> Result<()> {
    crate::kg::write_atomic(path, to_jsonl_string(examples).as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairExample {
    /// Index into the example list the pair was derived from.
    pub example: usize,
    pub candidate: EntityId,
    pub label: u8,
}

/// One positive pair per example with a gold entity, then one negative pair
/// per explicit negative.
pub fn to_pairs(examples: &[MentionExample]) -> Vec<PairExample> {
    let mut pairs = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        if let Some(g) = &ex.gold {
            pairs.push(PairExample {
                example: i,
                candidate: g.clone(),
                label: 1,
            });
        }
        for n in &ex.negatives {
            pairs.push(PairExample {
                example: i,
                candidate: n.clone(),
                label: u8::from(ex.gold.as_ref() == Some(n)),
            });
        }
    }
    pairs
}

/// Store, vocabulary and context settings needed to turn a (mention,
/// candidate) pair into a model input.
#[derive(Debug, Clone)]
pub struct ContextPipeline<'a> {
    store: Option<&'a TripleStore>,
    vocab: &'a Vocab,
    cfg: ContextConfig,
}

impl<'a> ContextPipeline<'a> {
    /// Without a store every candidate gets empty context.
    pub fn new(store: Option<&'a TripleStore>, vocab: &'a Vocab, cfg: ContextConfig) -> Self {
        Self { store, vocab, cfg }
    }

    pub fn config(&self) -> &ContextConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        self.vocab
    }

    /// Reserves `[CLS] sentence [SEP] surface [SEP]`, gives the rest of the
    /// sequence to the candidate's context, and assembles.
    pub fn prepare_with_context(&self, mention: &Mention, candidate: &EntityId) -> Result<(AssembledInput, ContextBundle)> {
        let prefix = encode_mention(self.vocab, mention, &self.cfg);
        let bundle = match self.store {
            Some(store) if self.cfg.max_triples > 0 => {
                build_context(store, candidate, &self.cfg, prefix.context_budget(&self.cfg))
            }
            _ => ContextBundle::empty(),
        };
        let input = assemble_encoded(self.vocab, &prefix, &bundle, &self.cfg)?;
        Ok((input, bundle))
    }

    pub fn prepare(&self, mention: &Mention, candidate: &EntityId) -> Result<AssembledInput> {
        self.prepare_with_context(mention, candidate).map(|(x, _)| x)
    }

    pub fn prepare_pair(&self, examples: &[MentionExample], pair: &PairExample) -> Result<LabeledInput> {
        let ex = examples
            .get(pair.example)
            .ok_or_else(|| Error::Input(format!("pair refers to missing example {}", pair.example)))?;
        Ok(LabeledInput {
            input: self.prepare(&ex.mention, &pair.candidate)?,
            label: pair.label,
        })
    }

    pub fn prepare_all(&self, examples: &[MentionExample]) -> Result<Vec<LabeledInput>> {
        to_pairs(examples).iter().map(|p| self.prepare_pair(examples, p)).collect()
    }
}

/// Wikipedia title to KG entity mapping. Titles may map to nothing, which
/// is recorded rather than dropped.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Alignment {
    map: HashMap<String, Option<EntityId>>,
}

impl Alignment {
    /// Reads `title<TAB>entity_id` rows; an empty id column means the title
    /// has no KG entity.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut map: HashMap<String, Option<EntityId>> = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let err = |m: String| Error::parse(path, idx + 1, m);
            let (title, id) = line.split_once('\t').unwrap_or((line, ""));
            let id = match id.trim() {
                "" => None,
                s => Some(EntityId::new(s).map_err(|e| err(e.to_string()))?),
            };
            match map.get(title) {
                Some(prev) if *prev != id => {
                    return Err(err(format!("title {title:?} mapped to conflicting ids")));
                }
                _ => {
                    map.insert(title.to_owned(), id);
                }
            }
        }
        Ok(Self { map })
    }

    pub fn lookup(&self, title: &str) -> Option<&EntityId> {
        self.map.get(title).and_then(Option::as_ref)
    }

    pub fn contains_title(&self, title: &str) -> bool {
        self.map.contains_key(title)
    }

    pub fn resolvable(&self) -> usize {
        self.map.values().filter(|v| v.is_some()).count()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Maps a title to its entity, or to an id derived from the title
    /// itself (spaces become underscores) when there is none. The derived
    /// id has no triples, so its context is empty.
    pub fn resolve_or_title(&self, title: &str) -> Result<EntityId> {
        match self.lookup(title) {
            Some(id) => Ok(id.clone()),
            None => EntityId::new(title.split_whitespace().collect::<Vec<_>>().join("_")),
        }
    }
}

/// Field names of a foreign JSONL dataset, mapped onto the canonical schema.
/// Offsets may be given as a two-element array (`span`) or as separate
/// `start`/`end` fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldMapping {
    pub id: Option<String>,
    pub sentence: String,
    pub surface: String,
    pub span: Option<String>,
    pub start: Option<String>,
    pub end: Option<String>,
    pub gold: String,
    pub candidates: String,
    pub negatives: Option<String>,
    /// Treat gold/candidate/negative values as Wikipedia titles and resolve
    /// them through an alignment file.
    pub titles: bool,
}

impl Default for FieldMapping {
    fn default() -> Self {
        Self {
            id: Some("id".into()),
            sentence: "sentence".into(),
            surface: "surface".into(),
            span: Some("span".into()),
            start: None,
            end: None,
            gold: "gold".into(),
            candidates: "candidates".into(),
            negatives: Some("negatives".into()),
            titles: false,
        }
    }
}

impl FieldMapping {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn canonicalize(&self, obj: &Value, alignment: Option<&Alignment>) -> std::result::Result<Value, String> {
        let get = |name: &str| obj.get(name).cloned().unwrap_or(Value::Null);
        let span = match (&self.span, &self.start, &self.end) {
            (Some(s), _, _) => get(s),
            (None, Some(a), Some(b)) => json!([get(a), get(b)]),
            _ => return Err("mapping needs either span or start+end".into()),
        };
        let resolve = |v: Value| -> std::result::Result<Value, String> {
            match (v, alignment.filter(|_| self.titles)) {
                (Value::String(t), Some(al)) => Ok(Value::String(al.resolve_or_title(&t).map_err(|e| e.to_string())?.to_string())),
                (v, _) => Ok(v),
            }
        };
        let resolve_list = |v: Value| -> std::result::Result<Value, String> {
            match v {
                Value::Array(items) => items.into_iter().map(resolve).collect::<std::result::Result<Vec<_>, _>>().map(Value::Array),
                other => Ok(other),
            }
        };
        let mut out = json!({
            "sentence": get(&self.sentence),
            "surface": get(&self.surface),
            "span": span,
            "gold": resolve(get(&self.gold))?,
            "candidates": resolve_list(get(&self.candidates))?,
        });
        if let Some(id) = &self.id {
            out["id"] = get(id);
        }
        if let Some(n) = &self.negatives {
            out["negatives"] = resolve_list(get(n))?;
        }
        Ok(out)
    }

    /// Converts a foreign JSONL file into canonical examples.
    pub fn convert(&self, path: &Path, alignment: Option<&Alignment>) -> Result<Vec<MentionExample>> {
        if self.titles && alignment.is_none() {
            return Err(Error::Config("title-based mapping needs an alignment file".into()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut out = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |m: String| Error::parse(path, idx + 1, m);
            let obj: Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            let canon = self.canonicalize(&obj, alignment).map_err(err)?;
            out.push(parse_example(&canon, idx.to_string()).map_err(err)?);
        }
        Ok(out)
    }
}
