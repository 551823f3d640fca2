//! Metrics, flip analysis and run reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::EntityId;

/// Pair-level confusion counts on the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn add(&mut self, predicted: bool, gold: bool) {
        match (predicted, gold) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn from_pairs<I: IntoIterator<Item = (bool, bool)>>(pairs: I) -> Self {
        let mut c = Self::default();
        for (p, g) in pairs {
            c.add(p, g);
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Precision, recall and F1 in [0, 1]. A 0/0 ratio counts as 0.
pub fn prf(c: &ConfusionCounts) -> Prf {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    Prf {
        precision,
        recall,
        f1: f1_score(precision, recall),
    }
}

/// Fraction of mentions with a gold entity whose prediction equals it.
/// Mentions whose gold is `None` (out of KB) are excluded. Returns NaN, with
/// a warning, when no mention has a gold entity.
pub fn inkb_accuracy(
    predictions: &HashMap<String, Option<EntityId>>,
    gold: &HashMap<String, Option<EntityId>>,
) -> Result<f64> {
    check_keys(predictions, gold)?;
    let mut total = 0usize;
    let mut correct = 0usize;
    for (id, g) in gold {
        if let Some(g) = g {
            total += 1;
            if predictions[id].as_ref() == Some(g) {
                correct += 1;
            }
        }
    }
    if total == 0 {
        log::warn!("in-KB accuracy is undefined: no mention has a gold entity");
        return Ok(f64::NAN);
    }
    Ok(correct as f64 / total as f64)
}

fn check_keys<A, B>(a: &HashMap<String, A>, b: &HashMap<String, B>) -> Result<()> {
    let mut only_a: Vec<&str> = a.keys().filter(|k| !b.contains_key(*k)).map(String::as_str).collect();
    let mut only_b: Vec<&str> = b.keys().filter(|k| !a.contains_key(*k)).map(String::as_str).collect();
    if only_a.is_empty() && only_b.is_empty() {
        return Ok(());
    }
    only_a.sort_unstable();
    only_b.sort_unstable();
    Err(Error::KeyMismatch(format!(
        "ids only in predictions: {only_a:?}; ids only in gold: {only_b:?}"
    )))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipReport {
    /// Mentions wrong under the baseline and right under the other run.
    pub wrong_to_right: Vec<String>,
    pub right_to_wrong: Vec<String>,
    /// Distinct gold entities among `wrong_to_right`.
    pub unique_fixed_entities: usize,
    pub unique_broken_entities: usize,
}

/// Compares two prediction sets on the in-KB mentions. Ids are sorted.
pub fn flip_analysis(
    baseline: &HashMap<String, Option<EntityId>>,
    other: &HashMap<String, Option<EntityId>>,
    gold: &HashMap<String, Option<EntityId>>,
) -> Result<FlipReport> {
    check_keys(baseline, gold)?;
    check_keys(other, gold)?;
    let mut report = FlipReport::default();
    let mut fixed = std::collections::BTreeSet::new();
    let mut broken = std::collections::BTreeSet::new();
    for (id, g) in gold {
        let Some(g) = g else { continue };
        let before = baseline[id].as_ref() == Some(g);
        let after = other[id].as_ref() == Some(g);
        match (before, after) {
            (false, true) => {
                report.wrong_to_right.push(id.clone());
                fixed.insert(g);
            }
            (true, false) => {
                report.right_to_wrong.push(id.clone());
                broken.insert(g);
            }
            _ => {}
        }
    }
    report.wrong_to_right.sort();
    report.right_to_wrong.sort();
    report.unique_fixed_entities = fixed.len();
    report.unique_broken_entities = broken.len();
    Ok(report)
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub mention_id: String,
    pub predicted: Option<EntityId>,
    pub score: Option<f64>,
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    crate::kg::write_atomic(path, out.as_bytes())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::parse(path, idx + 1, e.to_string()))?);
    }
    Ok(out)
}

/// Keyed by mention id; a repeated id is an error.
pub fn predictions_map(records: &[PredictionRecord]) -> Result<HashMap<String, Option<EntityId>>> {
    let mut map = HashMap::with_capacity(records.len());
    for r in records {
        if map.insert(r.mention_id.clone(), r.predicted.clone()).is_some() {
            return Err(Error::Input(format!("mention id {:?} predicted twice", r.mention_id)));
        }
    }
    Ok(map)
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Rounds a fraction to a percentage with two decimals.
pub fn percent(x: f64) -> f64 {
    (x * 10_000.0).round() / 100.0
}

/// Machine-readable run report. Metric values are percentages rounded to
/// two decimals; NaN is serialized as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub metrics: BTreeMap<String, Option<f64>>,
    pub counts: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flips: Option<FlipReport>,
}

impl Report {
    pub fn new(seed: Option<u64>, config: serde_json::Value) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            seed,
            config,
            metrics: BTreeMap::new(),
            counts: BTreeMap::new(),
            flips: None,
        }
    }

    /// Stores `fraction` as a rounded percentage.
    pub fn metric(&mut self, name: &str, fraction: f64) -> &mut Self {
        let v = if fraction.is_finite() { Some(percent(fraction)) } else { None };
        self.metrics.insert(name.to_owned(), v);
        self
    }

    pub fn count(&mut self, name: &str, n: usize) -> &mut Self {
        self.counts.insert(name.to_owned(), n);
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn table(&self) -> String {
        let width = self.metrics.keys().chain(self.counts.keys()).map(String::len).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in &self.metrics {
            match v {
                Some(v) => writeln!(out, "{k:<width$}  {v:>7.2}"),
                None => writeln!(out, "{k:<width$}  {:>7}", "n/a"),
            }
            .unwrap();
        }
        for (k, v) in &self.counts {
            writeln!(out, "{k:<width$}  {v:>7}").unwrap();
        }
        if let Some(f) = &self.flips {
            writeln!(
                out,
                "flips: {} wrong->right ({} entities), {} right->wrong ({} entities)",
                f.wrong_to_right.len(),
                f.unique_fixed_entities,
                f.right_to_wrong.len(),
                f.unique_broken_entities
            )
            .unwrap();
        }
        out
    }
}
