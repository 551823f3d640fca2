use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::Classifier;
use crate::datasets::ContextPipeline;
use crate::error::Result;
use crate::kg::EntityId;
use crate::tokenize::{AssembledInput, Mention};

/// Anything that maps an assembled input to P(match).
pub trait Scorer {
    fn score(&self, input: &AssembledInput) -> Result<f64>;
}

impl Scorer for Classifier {
    fn score(&self, input: &AssembledInput) -> Result<f64> {
        self.forward(input)
    }
}

impl<F> Scorer for F
where
    F: Fn(&AssembledInput) -> f64,
{
    fn score(&self, input: &AssembledInput) -> Result<f64> {
        Ok(self(input))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// `None` when there were no candidates.
    pub chosen: Option<EntityId>,
    /// Every candidate with its probability, best first.
    pub ranked: Vec<(EntityId, f64)>,
}

impl Prediction {
    pub fn score_of(&self, id: &EntityId) -> Option<f64> {
        self.ranked.iter().find(|(e, _)| e == id).map(|(_, s)| *s)
    }
}

/// Scores every candidate on its own assembled input and picks the most
/// probable one; ties go to the smaller entity id.
pub fn predict<S: Scorer + ?Sized>(
    scorer: &S,
    pipeline: &ContextPipeline<'_>,
    mention: &Mention,
    candidates: &[EntityId],
) -> Result<Prediction> {
    let mut ranked = Vec::with_capacity(candidates.len());
    for c in candidates {
        let input = pipeline.prepare(mention, c)?;
        ranked.push((c.clone(), scorer.score(&input)?));
    }
    ranked.sort_by(|(ea, sa), (eb, sb)| sb.partial_cmp(sa).unwrap_or(Ordering::Equal).then_with(|| ea.cmp(eb)));
    ranked.dedup_by(|a, b| a.0 == b.0);
    Ok(Prediction {
        chosen: ranked.first().map(|(e, _)| e.clone()),
        ranked,
    })
}
