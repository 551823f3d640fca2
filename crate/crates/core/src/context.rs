//! Verbalized KG context for a candidate entity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, HopSet, Tail, Triple, TripleStore};
use crate::tokenize::token_count;

pub const DEFAULT_MAX_TRIPLES: usize = 15;
pub const DEFAULT_MAX_SEQ_LEN: usize = 512;
pub const MIN_SEQ_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextConfig {
    pub hops: HopSet,
    pub max_triples: usize,
    pub max_seq_len: usize,
    pub include_sentence: bool,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            hops: HopSet::One,
            max_triples: DEFAULT_MAX_TRIPLES,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            include_sentence: true,
        }
    }
}

impl ContextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_seq_len < MIN_SEQ_LEN {
            return Err(Error::Config(format!(
                "max_seq_len must be at least {MIN_SEQ_LEN}, got {}",
                self.max_seq_len
            )));
        }
        Ok(())
    }

    /// Segment ids an input can use: sentence, surface, one per triple.
    pub fn segment_count(&self) -> usize {
        2 + self.max_triples
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbalizedTriple {
    pub text: String,
    pub source: Triple,
}

/// `full` is the ranked context; `kept` is its longest prefix that fits the
/// token budget.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ContextBundle {
    pub full: Vec<VerbalizedTriple>,
    pub kept: Vec<VerbalizedTriple>,
    pub dropped_count: usize,
}

impl ContextBundle {
    pub fn empty() -> Self {
        Self::default()
    }

    /// One kept verbalized triple per line.
    pub fn dump(&self) -> String {
        self.kept.iter().map(|t| format!("{}\n", t.text)).collect()
    }
}

/// Renders a triple as `head-label relation-label tail-label`.
pub fn verbalize(store: &TripleStore, triple: &Triple) -> VerbalizedTriple {
    let tail = match &triple.tail {
        Tail::Entity(id) => store.primary_label(id.as_str()),
        Tail::Literal(s) => s.as_str(),
    };
    let parts = [
        store.primary_label(triple.head.as_str()),
        store.primary_label(triple.relation.as_str()),
        tail,
    ];
    let text = parts
        .iter()
        .map(|p| p.trim())
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join(" ");
    VerbalizedTriple {
        text,
        source: triple.clone(),
    }
}

/// Takes the first `cfg.max_triples` neighbors of `entity`, then keeps the
/// longest prefix whose tokens plus one separator per triple fit `budget`.
pub fn build_context(store: &TripleStore, entity: &EntityId, cfg: &ContextConfig, budget: usize) -> ContextBundle {
    let full: Vec<VerbalizedTriple> = store
        .neighbors(entity, cfg.hops)
        .into_iter()
        .take(cfg.max_triples)
        .map(|t| verbalize(store, t))
        .collect();
    let mut used = 0;
    let mut keep = 0;
    for t in &full {
        let cost = token_count(&t.text) + 1;
        if used + cost > budget {
            break;
        }
        used += cost;
        keep += 1;
    }
    ContextBundle {
        kept: full[..keep].to_vec(),
        dropped_count: full.len() - keep,
        full,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{Hop, LabelKind, LabelRecord, RelationId};
    use proptest::prelude::*;

    fn e(s: &str) -> EntityId {
        EntityId::new(s).unwrap()
    }

    fn label(store: &mut TripleStore, subject: &str, text: &str) {
        store.push_label(LabelRecord {
            subject: subject.into(),
            label: text.into(),
            kind: LabelKind::Label,
        });
    }

    fn fig2_store() -> TripleStore {
        let mut s = TripleStore::new();
        let h = e("Q1967298");
        let lit = |v: &str| Tail::Literal(v.into());
        s.push_triple(h.clone(), RelationId::new("description").unwrap(), lit("highway system in Australia"), Hop::One);
        s.push_triple(h.clone(), RelationId::new("label").unwrap(), lit("National Highway"), Hop::One);
        s.push_triple(h, RelationId::new("dateModified").unwrap(), lit("31 May 2019"), Hop::One);
        label(&mut s, "Q1967298", "National Highway");
        label(&mut s, "dateModified", "date modified");
        s
    }

    #[test]
    fn verbalize_fig2_description() {
        let s = fig2_store();
        let n = s.neighbors(&e("Q1967298"), HopSet::One);
        assert_eq!(verbalize(&s, n[0]).text, "National Highway description highway system in Australia");
    }

    #[test]
    fn verbalize_identity_labels_and_inner_spaces() {
        let mut s = TripleStore::new();
        s.push_triple(e("A"), RelationId::new("b").unwrap(), Tail::Entity(e("C")), Hop::One);
        let t = s.triples().next().unwrap().clone();
        assert_eq!(verbalize(&s, &t).text, "A b C");

        label(&mut s, "A", "New South Wales");
        label(&mut s, "b", "located in");
        label(&mut s, "C", "Australia");
        let v = verbalize(&s, &t).text;
        assert_eq!(v, ["New South Wales", "located in", "Australia"].join(" "));
        assert!(!v.contains("  ") && v.trim() == v);
    }

    #[test]
    fn fig2_context_with_generous_budget() {
        let s = fig2_store();
        let b = build_context(&s, &e("Q1967298"), &ContextConfig::default(), 500);
        let texts: Vec<_> = b.kept.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(
            texts,
            [
                "National Highway description highway system in Australia",
                "National Highway label National Highway",
                "National Highway date modified 31 May 2019",
            ]
        );
        assert_eq!(b.dropped_count, 0);
        assert_eq!(b.dump().lines().count(), 3);
    }

    #[test]
    fn zero_budget_keeps_nothing() {
        let s = fig2_store();
        let b = build_context(&s, &e("Q1967298"), &ContextConfig::default(), 0);
        assert!(b.kept.is_empty());
        assert_eq!(b.dropped_count, 3);
    }

    #[test]
    fn whole_triples_fill_budget() {
        let mut s = TripleStore::new();
        label(&mut s, "Q1", "h");
        label(&mut s, "r", "r");
        for i in 0..5 {
            // 1 + 1 + 8 = 10 tokens each
            let tail = (0..8).map(|j| format!("w{i}{j}")).collect::<Vec<_>>().join(" ");
            s.push_triple(e("Q1"), RelationId::new("r").unwrap(), Tail::Literal(tail), Hop::One);
        }
        let b = build_context(&s, &e("Q1"), &ContextConfig::default(), 33);
        assert!(b.full.iter().all(|t| token_count(&t.text) == 10));
        assert_eq!(b.kept.len(), 33 / 11);
        assert_eq!(b.dropped_count, 2);
    }

    #[test]
    fn max_triples_zero_is_empty() {
        let s = fig2_store();
        let cfg = ContextConfig {
            max_triples: 0,
            ..ContextConfig::default()
        };
        let b = build_context(&s, &e("Q1967298"), &cfg, 500);
        assert!(b.full.is_empty() && b.kept.is_empty());
    }

    #[test]
    fn small_seq_len_rejected() {
        let cfg = ContextConfig {
            max_seq_len: 15,
            ..ContextConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn random_store(lens: &[usize]) -> TripleStore {
        let mut s = TripleStore::new();
        for (i, &n) in lens.iter().enumerate() {
            let tail = (0..n).map(|j| format!("t{j}")).collect::<Vec<_>>().join(" ");
            let hop = if i % 3 == 2 { Hop::Two } else { Hop::One };
            s.push_triple(e("Q1"), RelationId::new(format!("P{i}")).unwrap(), Tail::Literal(tail), hop);
        }
        s
    }

    proptest! {
        #[test]
        fn kept_is_budget_maximal_prefix(
            lens in prop::collection::vec(0usize..12, 0..20),
            max_triples in 0usize..20,
            budget in 0usize..120,
            both in any::<bool>(),
        ) {
            let s = random_store(&lens);
            let cfg = ContextConfig {
                max_triples,
                hops: if both { HopSet::OneAndTwo } else { HopSet::One },
                ..ContextConfig::default()
            };
            let b = build_context(&s, &e("Q1"), &cfg, budget);
            prop_assert!(b.full.len() <= max_triples);
            prop_assert_eq!(&b.full[..b.kept.len()], &b.kept[..]);
            prop_assert_eq!(b.dropped_count, b.full.len() - b.kept.len());
            let cost: usize = b.kept.iter().map(|t| token_count(&t.text) + 1).sum();
            prop_assert!(cost <= budget);
            if let Some(next) = b.full.get(b.kept.len()) {
                prop_assert!(cost + token_count(&next.text) + 1 > budget);
            }
            let more = build_context(&s, &e("Q1"), &cfg, budget + 7);
            prop_assert!(more.kept.len() >= b.kept.len());
        }
    }
}
