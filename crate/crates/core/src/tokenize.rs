//! Deterministic word-level tokenizer, vocabulary, and classifier input
//! assembly.
//!
//! Input layout for one (mention, candidate) pair:
//!
//! ```text
//! [CLS] sentence [SEP] surface [SEP] triple_1 [SEP] ... triple_k [SEP] [PAD]...
//!   0      0       0      1      1       2      2         k+1    k+1    0
//! ```
//!
//! The second row is the segment id. Every kept triple gets its own segment.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::context::{ContextBundle, ContextConfig};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Lowercases and splits on whitespace; every punctuation or symbol
/// character becomes a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(c.to_lowercase().collect());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Number of tokens `text` occupies in an assembled input.
pub fn token_count(text: &str) -> usize {
    tokenize(text).len()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    /// Non-reserved tokens; id = index + reserved count.
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), (i + RESERVED.len()) as u32))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Builds a vocabulary from every token seen at least `min_freq` times,
    /// ordered by descending frequency then lexicographically.
    pub fn build<I, S>(corpus: I, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if min_freq == 0 {
            return Err(Error::Config("min_freq must be at least 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for tok in tokenize(text.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|&(ref t, n)| n >= min_freq && !RESERVED.contains(&t.as_str()))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from(entries.into_iter().map(|(t, _)| t).collect::<Vec<_>>()))
    }

    /// Total size including reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len() + RESERVED.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        if let Some(pos) = RESERVED.iter().position(|r| *r == token) {
            return pos as u32;
        }
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        let id = id as usize;
        if id < RESERVED.len() {
            Some(RESERVED[id])
        } else {
            self.tokens.get(id - RESERVED.len()).map(String::as_str)
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK as usize]).to_owned())
            .collect()
    }

    /// One non-reserved token per line; line `n` (0-based) has id `n + 4`.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::kg::write_atomic(path, self.to_file_string().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut tokens = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() || line.chars().any(char::is_whitespace) {
                return Err(Error::parse(path, i + 1, format!("invalid vocabulary entry {line:?}")));
            }
            if !seen.insert(line) {
                return Err(Error::parse(path, i + 1, format!("duplicate vocabulary entry {line:?}")));
            }
            tokens.push(line.to_owned());
        }
        Ok(Self::from(tokens))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub text: String,
    pub tokens: Vec<String>,
}

impl Sentence {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Self { text, tokens }
    }
}

/// A surface form inside a sentence. `start..end` are character offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub sentence: Sentence,
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

impl Mention {
    pub fn new(sentence: impl Into<String>, start: usize, end: usize) -> Result<Self> {
        let sentence = Sentence::new(sentence);
        let n = sentence.text.chars().count();
        if start >= end || end > n {
            return Err(Error::Input(format!(
                "span {start}..{end} is empty or out of bounds for a sentence of {n} characters"
            )));
        }
        let surface = sentence.text.chars().skip(start).take(end - start).collect();
        Ok(Self {
            sentence,
            start,
            end,
            surface,
        })
    }

    /// Like [`Mention::new`] but also checks the span text against `surface`.
    pub fn with_surface(sentence: impl Into<String>, start: usize, end: usize, surface: &str) -> Result<Self> {
        let m = Self::new(sentence, start, end)?;
        if m.surface != surface {
            return Err(Error::Input(format!(
                "span {start}..{end} covers {:?}, not surface {surface:?}",
                m.surface
            )));
        }
        Ok(m)
    }

    /// Locates the first case-insensitive occurrence of `surface`.
    pub fn find(sentence: impl Into<String>, surface: &str) -> Result<Self> {
        let sentence: String = sentence.into();
        let hay: Vec<char> = sentence.chars().collect();
        let needle: Vec<char> = surface.chars().collect();
        let lower = |c: &char| c.to_lowercase().collect::<String>();
        if !needle.is_empty() && needle.len() <= hay.len() {
            for start in 0..=hay.len() - needle.len() {
                if hay[start..start + needle.len()].iter().map(lower).eq(needle.iter().map(lower)) {
                    return Self::new(sentence, start, start + needle.len());
                }
            }
        }
        Err(Error::Input(format!("surface {surface:?} does not occur in the sentence")))
    }
}

/// Model input for one (mention, candidate) pair, padded to `max_seq_len`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssembledInput {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u32>,
    pub mask: Vec<u8>,
    /// Number of real (unpadded) tokens.
    pub length: usize,
}

impl AssembledInput {
    pub fn padded_len(&self) -> usize {
        self.token_ids.len()
    }
}

/// Sentence and surface token ids after truncation to the sequence budget.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MentionTokens {
    pub sentence: Vec<u32>,
    pub surface: Vec<u32>,
}

impl MentionTokens {
    /// Tokens used by `[CLS] sentence [SEP] surface [SEP]`.
    pub fn prefix_len(&self) -> usize {
        self.sentence.len() + self.surface.len() + 3
    }

    /// Tokens left for triple context.
    pub fn context_budget(&self, cfg: &ContextConfig) -> usize {
        cfg.max_seq_len.saturating_sub(self.prefix_len())
    }
}

/// Encodes sentence and surface, tail-truncating the sentence (and, if
/// still needed, the surface) so that the prefix fits `max_seq_len`.
pub fn encode_mention(vocab: &Vocab, mention: &Mention, cfg: &ContextConfig) -> MentionTokens {
    let mut sentence = if cfg.include_sentence {
        vocab.encode(&mention.sentence.text)
    } else {
        Vec::new()
    };
    let mut surface = vocab.encode(&mention.surface);
    let room = cfg.max_seq_len.saturating_sub(3);
    surface.truncate(room);
    sentence.truncate(room - surface.len());
    MentionTokens { sentence, surface }
}

/// Lays out sentence, surface and the kept context triples with one segment
/// per triple, then pads to `cfg.max_seq_len`.
pub fn assemble(vocab: &Vocab, mention: &Mention, bundle: &ContextBundle, cfg: &ContextConfig) -> Result<AssembledInput> {
    let prefix = encode_mention(vocab, mention, cfg);
    assemble_encoded(vocab, &prefix, bundle, cfg)
}

pub fn assemble_encoded(
    vocab: &Vocab,
    prefix: &MentionTokens,
    bundle: &ContextBundle,
    cfg: &ContextConfig,
) -> Result<AssembledInput> {
    let max = cfg.max_seq_len;
    let mut token_ids = Vec::with_capacity(max);
    let mut segment_ids = Vec::with_capacity(max);
    let push = |ids: &[u32], seg: u32, token_ids: &mut Vec<u32>, segment_ids: &mut Vec<u32>| {
        token_ids.extend_from_slice(ids);
        token_ids.push(SEP);
        segment_ids.extend(std::iter::repeat_n(seg, ids.len() + 1));
    };
    token_ids.push(CLS);
    segment_ids.push(0);
    push(&prefix.sentence, 0, &mut token_ids, &mut segment_ids);
    push(&prefix.surface, 1, &mut token_ids, &mut segment_ids);
    for (i, triple) in bundle.kept.iter().enumerate() {
        push(&vocab.encode(&triple.text), 2 + i as u32, &mut token_ids, &mut segment_ids);
    }
    let length = token_ids.len();
    if length > max {
        return Err(Error::Input(format!(
            "assembled input needs {length} tokens but max_seq_len is {max}; the context bundle exceeds its budget"
        )));
    }
    let mut mask = vec![1u8; length];
    token_ids.resize(max, PAD);
    segment_ids.resize(max, 0);
    mask.resize(max, 0);
    Ok(AssembledInput {
        token_ids,
        segment_ids,
        mask,
        length,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::VerbalizedTriple;
    use crate::kg::{EntityId, Hop, RelationId, Tail, Triple};

    fn vt(text: &str) -> VerbalizedTriple {
        VerbalizedTriple {
            text: text.into(),
            source: Triple {
                head: EntityId::new("Q1").unwrap(),
                relation: RelationId::new("P1").unwrap(),
                tail: Tail::Literal(text.into()),
                hop: Hop::One,
                rank: 0,
            },
        }
    }

    fn bundle(texts: &[&str]) -> ContextBundle {
        let full: Vec<_> = texts.iter().map(|t| vt(t)).collect();
        ContextBundle {
            kept: full.clone(),
            full,
            dropped_count: 0,
        }
    }

    fn cfg(max_seq_len: usize) -> ContextConfig {
        ContextConfig {
            max_seq_len,
            ..ContextConfig::default()
        }
    }

    #[test]
    fn tokenizer_splits_punctuation_and_lowercases() {
        assert_eq!(tokenize("Sydney-Canberra National  Highway."), ["sydney", "-", "canberra", "national", "highway", "."]);
        assert_eq!(tokenize("31 May 2019"), ["31", "may", "2019"]);
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn vocab_min_freq_and_case_folding() {
        let v = Vocab::build(["a a b"], 2).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), UNK);

        let v = Vocab::build(["A a"], 1).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.token(4), Some("a"));
    }

    #[test]
    fn vocab_empty_corpus_is_reserved_only() {
        let v = Vocab::build(Vec::<String>::new(), 1).unwrap();
        assert_eq!(v.len(), 4);
        assert!(Vocab::build(["x"], 0).is_err());
    }

    #[test]
    fn vocab_depends_only_on_token_multiset() {
        let a = Vocab::build(["b a c a", "c b a"], 1).unwrap();
        let b = Vocab::build(["a a a", "c", "b b c"], 1).unwrap();
        assert_eq!(a, b);
        // a:3, b:2, c:2 -> b before c on the lexicographic tie-break
        assert_eq!(a.decode(&[4, 5, 6]), ["a", "b", "c"]);
    }

    #[test]
    fn encode_edge_cases() {
        let v = Vocab::build(["national highway"], 1).unwrap();
        assert!(v.encode("").is_empty());
        assert_eq!(v.encode("foo bar baz"), [UNK, UNK, UNK]);
        let text = "National highway, in Australia";
        assert_eq!(v.encode(text).len(), tokenize(text).len());
    }

    #[test]
    fn vocab_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocab::build(["the national highway in australia", "the highway"], 1).unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
        std::fs::write(&p, "a\na\n").unwrap();
        assert!(Vocab::load(&p).is_err());
    }

    #[test]
    fn mention_span_validation() {
        let m = Mention::new("part of the National Highway link", 12, 28).unwrap();
        assert_eq!(m.surface, "National Highway");
        assert!(Mention::new("abc", 2, 2).is_err());
        assert!(Mention::new("abc", 1, 4).is_err());
        assert!(Mention::with_surface("abc", 0, 2, "bc").is_err());
        let found = Mention::find("Part of the national highway", "National Highway").unwrap();
        assert_eq!((found.start, found.end), (12, 28));
    }

    #[test]
    fn zero_triples_is_two_separators() {
        let v = Vocab::build(["a b c"], 1).unwrap();
        let m = Mention::new("a b c", 2, 3).unwrap();
        let x = assemble(&v, &m, &bundle(&[]), &cfg(16)).unwrap();
        assert_eq!(x.token_ids.iter().filter(|&&t| t == SEP).count(), 2);
        assert_eq!(x.segment_ids.iter().max(), Some(&1));
        assert_eq!(x.token_ids.len(), 16);
        assert_eq!(x.length, 1 + 3 + 1 + 1 + 1);
    }

    #[test]
    fn three_triples_five_separators() {
        let v = Vocab::build(["a b c x y z"], 1).unwrap();
        let m = Mention::new("a b c", 0, 1).unwrap();
        let x = assemble(&v, &m, &bundle(&["x y", "y", "z x z"]), &cfg(32)).unwrap();
        assert_eq!(x.token_ids.iter().filter(|&&t| t == SEP).count(), 5);
        let used: std::collections::BTreeSet<u32> = x.segment_ids[..x.length].iter().copied().collect();
        assert_eq!(used.into_iter().collect::<Vec<_>>(), [0, 1, 2, 3, 4]);
    }

    #[test]
    fn oversized_sentence_is_tail_truncated() {
        let v = Vocab::build(["w"], 1).unwrap();
        let text = vec!["w"; 40].join(" ");
        let m = Mention::new(text.clone(), 0, 1).unwrap();
        let c = cfg(16);
        let prefix = encode_mention(&v, &m, &c);
        assert_eq!(prefix.sentence.len(), 12);
        assert_eq!(prefix.context_budget(&c), 0);
        let x = assemble(&v, &m, &bundle(&[]), &c).unwrap();
        assert_eq!(x.length, 16);
        assert!(assemble(&v, &m, &bundle(&["w"]), &c).is_err());
    }
}
