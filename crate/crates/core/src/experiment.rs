//! Train and evaluate end to end on canonical examples.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::context::ContextConfig;
use crate::datasets::{to_pairs, ContextPipeline, MentionExample};
use crate::error::{Error, Result};
use crate::eval::{inkb_accuracy, prf, ConfusionCounts, PredictionRecord, Report};
use crate::kg::{EntityId, TripleStore};
use crate::model::{predict, train, Classifier, ModelConfig, Scorer, TrainConfig};
use crate::tokenize::Vocab;

/// Pairwise classification (P/R/F) or mention-level argmax (in-KB accuracy).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Pairs,
    Argmax,
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairs" => Ok(Self::Pairs),
            "argmax" => Ok(Self::Argmax),
            other => Err(Error::Config(format!("unknown protocol {other:?} (expected pairs or argmax)"))),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pairs => "pairs",
            Self::Argmax => "argmax",
        })
    }
}

/// Builds a fresh model and trains it on the pairs derived from `examples`.
pub fn train_on_examples(
    pipeline: &ContextPipeline<'_>,
    examples: &[MentionExample],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(Classifier, Vec<f64>)> {
    model_cfg.check_context(pipeline.config())?;
    let data = pipeline.prepare_all(examples)?;
    let mut model = Classifier::new(model_cfg.clone(), train_cfg.seed)?;
    let history = train(&mut model, &data, train_cfg)?;
    Ok((model, history))
}

/// Argmax prediction for every example, in input order.
pub fn predict_examples<S: Scorer + ?Sized>(
    scorer: &S,
    pipeline: &ContextPipeline<'_>,
    examples: &[MentionExample],
) -> Result<Vec<PredictionRecord>> {
    examples
        .iter()
        .map(|ex| {
            let p = predict(scorer, pipeline, &ex.mention, &ex.candidates)?;
            Ok(PredictionRecord {
                mention_id: ex.id.clone(),
                score: p.ranked.first().map(|(_, s)| *s),
                predicted: p.chosen,
            })
        })
        .collect()
}

/// Confusion counts of the 0.5-thresholded scores over the labeled pairs.
pub fn pair_counts<S: Scorer + ?Sized>(
    scorer: &S,
    pipeline: &ContextPipeline<'_>,
    examples: &[MentionExample],
) -> Result<ConfusionCounts> {
    let mut counts = ConfusionCounts::default();
    for pair in to_pairs(examples) {
        let x = pipeline.prepare_pair(examples, &pair)?;
        counts.add(scorer.score(&x.input)? >= 0.5, x.label == 1);
    }
    Ok(counts)
}

pub fn gold_map(examples: &[MentionExample]) -> Result<HashMap<String, Option<EntityId>>> {
    let mut map = HashMap::with_capacity(examples.len());
    for ex in examples {
        if map.insert(ex.id.clone(), ex.gold.clone()).is_some() {
            return Err(Error::Input(format!("duplicate mention id {:?}", ex.id)));
        }
    }
    Ok(map)
}

/// Metrics of one evaluation. `predictions` is empty for the pair protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: Report,
    pub predictions: Vec<PredictionRecord>,
}

pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    pipeline: &ContextPipeline<'_>,
    examples: &[MentionExample],
    protocol: Protocol,
    mut report: Report,
) -> Result<Evaluation> {
    report.count("mentions", examples.len());
    let mut predictions = Vec::new();
    match protocol {
        Protocol::Pairs => {
            let c = pair_counts(scorer, pipeline, examples)?;
            let m = prf(&c);
            let acc = if c.total() == 0 { 0.0 } else { (c.tp + c.tn) as f64 / c.total() as f64 };
            report
                .metric("precision", m.precision)
                .metric("recall", m.recall)
                .metric("f1", m.f1)
                .metric("pair_accuracy", acc)
                .count("pairs", c.total())
                .count("tp", c.tp)
                .count("fp", c.fp)
                .count("fn", c.fn_)
                .count("tn", c.tn);
        }
        Protocol::Argmax => {
            predictions = predict_examples(scorer, pipeline, examples)?;
            let pred: HashMap<String, Option<EntityId>> =
                predictions.iter().map(|p| (p.mention_id.clone(), p.predicted.clone())).collect();
            let acc = inkb_accuracy(&pred, &gold_map(examples)?)?;
            report
                .metric("inkb_accuracy", acc)
                .count("in_kb_mentions", examples.iter().filter(|e| e.gold.is_some()).count())
                .count("gold_missing", examples.iter().filter(|e| e.gold_missing()).count());
        }
    }
    Ok(Evaluation { report, predictions })
}

/// Everything needed for one train-then-evaluate run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub context: ContextConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub protocol: Protocol,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: Classifier,
    pub history: Vec<f64>,
    pub evaluation: Evaluation,
}

pub fn run(
    store: Option<&TripleStore>,
    vocab: &Vocab,
    train_set: &[MentionExample],
    test_set: &[MentionExample],
    cfg: &RunConfig,
) -> Result<RunOutcome> {
    let pipeline = ContextPipeline::new(store, vocab, cfg.context.clone());
    let (model, history) = train_on_examples(&pipeline, train_set, &cfg.model, &cfg.train)?;
    let report = Report::new(Some(cfg.train.seed), serde_json::to_value(cfg)?);
    let evaluation = evaluate(&model, &pipeline, test_set, cfg.protocol, report)?;
    Ok(RunOutcome {
        model,
        history,
        evaluation,
    })
}
