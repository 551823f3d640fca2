use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{bce_with_logit, Classifier, ModelConfig};
use crate::error::{Error, Result};
use crate::tokenize::{AssembledInput, CLS};

/// Which parameters the probes are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeSet {
    All,
    /// Only the classification head (weights and bias).
    HeadOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    /// Probes where both gradients are non-zero.
    pub active_probes: usize,
}

/// Relative error with a small floor so that two (near-)zero gradients
/// compare as equal.
fn rel_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-12 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Compares backprop gradients with central finite differences (step
/// `1e-4`) at `n_probes` random parameters of a freshly initialized model.
/// Dropout is disabled. The input is random, at most 8 tokens, with the
/// last position masked when there is room for one.
pub fn grad_check(cfg: &ModelConfig, n_probes: usize, seed: u64, probes: ProbeSet) -> Result<GradCheckReport> {
    let mut cfg = cfg.clone();
    cfg.dropout = 0.0;
    if cfg.d_model > 16 || cfg.max_seq_len > 8 {
        return Err(Error::Config("gradient check expects d_model <= 16 and max_seq_len <= 8".into()));
    }
    let model = Classifier::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let len = cfg.max_seq_len;
    let real = if len > 2 { len - 1 } else { len };
    let mut token_ids: Vec<u32> = (0..len).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();
    token_ids[0] = CLS.min(cfg.vocab_size as u32 - 1);
    let segment_ids: Vec<u32> = (0..len).map(|_| rng.random_range(0..cfg.n_segments as u32)).collect();
    let mask: Vec<u8> = (0..len).map(|i| u8::from(i < real)).collect();
    let input = AssembledInput {
        token_ids,
        segment_ids,
        mask,
        length: real,
    };
    let label = rng.random_range(0..=1u8);
    let (_, grad) = model.gradient(&input, label)?;
    Ok(compare(&model, &input, label, &grad, n_probes, &mut rng, probes))
}

pub(crate) fn compare(
    model: &Classifier,
    input: &AssembledInput,
    label: u8,
    grad: &[f64],
    n_probes: usize,
    rng: &mut ChaCha8Rng,
    probes: ProbeSet,
) -> GradCheckReport {
    const H: f64 = 1e-4;
    let range = match probes {
        ProbeSet::All => 0..model.param_count(),
        ProbeSet::HeadOnly => model.layout().head(),
    };
    let mut probe_model = model.clone();
    let mut max_rel_error: f64 = 0.0;
    let mut active = 0;
    for _ in 0..n_probes {
        let i = rng.random_range(range.clone());
        let orig = probe_model.params()[i];
        probe_model.params_mut()[i] = orig + H;
        let up = bce_with_logit(probe_model.logit(input).expect("validated input"), label);
        probe_model.params_mut()[i] = orig - H;
        let down = bce_with_logit(probe_model.logit(input).expect("validated input"), label);
        probe_model.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * H);
        if grad[i] != 0.0 && numeric != 0.0 {
            active += 1;
        }
        max_rel_error = max_rel_error.max(rel_error(grad[i], numeric));
    }
    GradCheckReport {
        max_rel_error,
        probes: n_probes,
        active_probes: active,
    }
}
