//! Synthetic ambiguous-label corpus.
//!
//! Every label ("Crimson Harbor") is shared by 2 to 4 entities that differ
//! only in the region named by their description triple ("harbor in
//! norway"). Each sentence names the region of its gold entity, so the
//! mention can be resolved from KG context and from nothing else: without
//! context all candidates produce the same input.
//!
//! Optional 2-hop triples attach random regions to every entity and act as
//! distractors.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::verbalize;
use crate::datasets::{write_jsonl, MentionExample};
use crate::error::{Error, Result};
use crate::kg::{EntityId, Hop, LabelKind, LabelRecord, RelationId, Tail, TripleStore};
use crate::tokenize::{Mention, Vocab};

const ADJECTIVES: &[&str] = &[
    "Crimson", "Silver", "Northern", "Grand", "Old", "Royal", "Golden", "Quiet", "Eastern", "Iron",
    "Misty", "Broad", "Stone", "Green", "Hidden",
];

const NOUNS: &[&str] = &[
    "Harbor", "Highway", "Bridge", "Valley", "Tower", "Museum", "Station", "Lake", "Forest", "Castle",
];

const REGIONS: &[&str] = &[
    "australia", "india", "canada", "brazil", "kenya", "norway", "japan", "chile", "egypt", "spain",
    "peru", "nepal",
];

const TEMPLATES: &[&str] = &[
    "we drove along the {m} on our trip through {r} last spring",
    "the {m} in {r} was closed for repairs",
    "locals in {r} say the {m} is worth a visit",
    "a report from {r} praised the {m}",
    "photos of the {m} near {r} went viral",
    "after landing in {r} she went straight to the {m}",
    "the {m} remains the pride of {r}",
    "travel guides for {r} often skip the {m}",
];

const MONTHS: &[&str] = &[
    "January", "February", "March", "April", "May", "June", "July", "August", "September", "October",
    "November", "December",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_labels: usize,
    pub train_mentions: usize,
    pub test_mentions: usize,
    /// 2-hop distractor triples per entity.
    pub two_hop_distractors: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_labels: 50,
            train_mentions: 400,
            test_mentions: 200,
            two_hop_distractors: 3,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticEntity {
    pub id: EntityId,
    pub label: String,
    pub region: String,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub store: TripleStore,
    pub entities: Vec<SyntheticEntity>,
    pub labels: Vec<String>,
    pub train: Vec<MentionExample>,
    pub test: Vec<MentionExample>,
}

fn rel(name: &str) -> RelationId {
    RelationId::new(name).expect("static relation name")
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if cfg.n_labels == 0 || cfg.n_labels > ADJECTIVES.len() * NOUNS.len() {
        return Err(Error::Config(format!(
            "n_labels must be in 1..={}",
            ADJECTIVES.len() * NOUNS.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut names: Vec<(&str, &str)> = ADJECTIVES.iter().flat_map(|a| NOUNS.iter().map(move |n| (*a, *n))).collect();
    names.shuffle(&mut rng);
    names.truncate(cfg.n_labels);

    let mut store = TripleStore::new();
    for (r, text) in [
        ("description", "description"),
        ("label", "label"),
        ("dateModified", "date modified"),
        ("country", "country"),
    ] {
        store.push_label(LabelRecord {
            subject: r.into(),
            label: text.into(),
            kind: LabelKind::Label,
        });
    }

    let mut entities = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut labels = Vec::new();
    for (adj, noun) in &names {
        let label = format!("{adj} {noun}");
        let k = rng.random_range(2..=4);
        let mut regions = REGIONS.to_vec();
        regions.shuffle(&mut rng);
        let mut group = Vec::new();
        for region in regions.into_iter().take(k) {
            let id = EntityId::new(format!("Q{}", 1000 + entities.len()))?;
            let date = format!(
                "{} {} {}",
                rng.random_range(1..=28),
                MONTHS.choose(&mut rng).unwrap(),
                rng.random_range(2015..=2021)
            );
            let one_hop = [
                ("description", format!("{} in {region}", noun.to_lowercase())),
                ("label", label.clone()),
                ("dateModified", date),
            ];
            for (r, v) in one_hop {
                store.push_triple(id.clone(), rel(r), Tail::Literal(v), Hop::One);
            }
            for _ in 0..cfg.two_hop_distractors {
                let noise = REGIONS.choose(&mut rng).unwrap();
                store.push_triple(id.clone(), rel("country"), Tail::Literal((*noise).into()), Hop::Two);
            }
            store.push_label(LabelRecord {
                subject: id.to_string(),
                label: label.clone(),
                kind: LabelKind::Label,
            });
            group.push(entities.len());
            entities.push(SyntheticEntity {
                id,
                label: label.clone(),
                region: region.to_owned(),
            });
        }
        groups.push(group);
        labels.push(label);
    }

    let mention = |rng: &mut ChaCha8Rng, n: usize| -> Result<MentionExample> {
        let group = &groups[rng.random_range(0..groups.len())];
        let gold = &entities[*group.choose(rng).unwrap()];
        let template = TEMPLATES.choose(rng).unwrap();
        let sentence = template.replace("{m}", &gold.label).replace("{r}", &gold.region);
        let m = Mention::find(sentence, &gold.label)?;
        let candidates: Vec<EntityId> = group.iter().map(|&i| entities[i].id.clone()).collect();
        let negatives = candidates.iter().filter(|c| **c != gold.id).cloned().collect();
        Ok(MentionExample {
            id: format!("m{n}"),
            mention: m,
            gold: Some(gold.id.clone()),
            candidates,
            negatives,
        })
    };
    let train = (0..cfg.train_mentions).map(|n| mention(&mut rng, n)).collect::<Result<Vec<_>>>()?;
    let test = (0..cfg.test_mentions)
        .map(|n| mention(&mut rng, cfg.train_mentions + n))
        .collect::<Result<Vec<_>>>()?;

    Ok(SyntheticCorpus {
        store,
        entities,
        labels,
        train,
        test,
    })
}

impl SyntheticCorpus {
    /// Vocabulary over every sentence and every verbalized triple.
    pub fn vocab(&self) -> Result<Vocab> {
        let mut texts: Vec<String> = self
            .train
            .iter()
            .chain(&self.test)
            .map(|e| e.mention.sentence.text.clone())
            .collect();
        texts.extend(self.store.triples().map(|t| verbalize(&self.store, t).text));
        Vocab::build(texts, 1)
    }

    /// Writes `kg/`, `train.jsonl`, `test.jsonl` and `vocab.txt` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.store.write_dir(&dir.join("kg"))?;
        write_jsonl(&dir.join("train.jsonl"), &self.train)?;
        write_jsonl(&dir.join("test.jsonl"), &self.test)?;
        self.vocab()?.save(&dir.join("vocab.txt"))
    }

    /// Labels shared by at least two entities.
    pub fn ambiguous_labels(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| self.entities.iter().filter(|e| &e.label == *l).count() >= 2)
            .count()
    }
}
