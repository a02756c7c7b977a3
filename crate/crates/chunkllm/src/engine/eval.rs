//! Policy-conditioned evaluation: teacher-forced perplexity and passkey
//! retrieval accuracy.

use rayon::prelude::*;

use crate::backbone::{BackboneWeights, Sampler};
use crate::corpus::{LabeledDoc, PasskeySample};
use crate::{Error, Result};

use super::{prefill, AdapterSet, BoundaryDetector, PolicyConfig};

/// Teacher-forced perplexity under a cache policy: every position's
/// prediction uses the active set as of that position (a simulated decode
/// over the document), so sparse policies pay for what they evicted.
pub fn eval_ppl(
    weights: &BackboneWeights,
    adapters: AdapterSet,
    docs: &[LabeledDoc],
    cfg: &PolicyConfig,
    detector: &BoundaryDetector,
) -> Result<f64> {
    if docs.is_empty() {
        return Err(Error::Input("eval_ppl: no documents".into()));
    }
    let per_doc: Vec<Result<(f64, usize)>> = docs
        .par_iter()
        .map(|doc| {
            let tokens = doc.tokens();
            if tokens.len() < 2 {
                return Ok((0.0, 0));
            }
            let mut state = prefill(weights, adapters, &tokens[..1], cfg, detector)?;
            let mut nll = 0.0f64;
            for &next in &tokens[1..] {
                nll += nll_of(state.last_logits(), next);
                state.step(next)?;
            }
            Ok((nll, tokens.len() - 1))
        })
        .collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for r in per_doc {
        let (nll, n) = r?;
        total += nll;
        count += n;
    }
    if count == 0 {
        return Err(Error::Input("eval_ppl: documents too short".into()));
    }
    Ok((total / count as f64).exp())
}

fn nll_of(logits: &[f32], target: u8) -> f64 {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = logits.iter().map(|&l| ((l as f64) - max).exp()).sum::<f64>().ln() + max;
    lse - logits[target as usize] as f64
}

/// Passkey evaluation result.
#[derive(Debug, Clone)]
pub struct PasskeyReport {
    pub accuracy: f64,
    /// (decile, accuracy, sample count) for deciles that had samples.
    pub per_decile: Vec<(usize, f64, usize)>,
    /// Mean retention over all logged steps of all samples.
    pub mean_retention: f64,
    pub samples: usize,
}

/// Greedy-decode the answer for each sample and exact-match the 5-digit
/// needle. `n_decode` tokens are generated; the first run of five ASCII
/// digits is the model's answer.
pub fn eval_passkey(
    weights: &BackboneWeights,
    adapters: AdapterSet,
    samples: &[PasskeySample],
    cfg: &PolicyConfig,
    detector: &BoundaryDetector,
    n_decode: usize,
) -> Result<PasskeyReport> {
    if samples.is_empty() {
        return Err(Error::Input("eval_passkey: no samples".into()));
    }
    let evals: Vec<Result<(bool, usize, f64)>> = samples
        .par_iter()
        .map(|sample| {
            let prompt = sample.prompt().into_bytes();
            let mut state = prefill(weights, adapters, &prompt, cfg, detector)?;
            let mut generated = Vec::with_capacity(n_decode);
            for _ in 0..n_decode {
                let next = Sampler::Greedy.sample(state.last_logits(), &mut None);
                generated.push(next);
                state.step(next)?;
            }
            let hit = extract_digits(&generated).as_deref() == Some(sample.answer.as_str());
            let decile = ((sample.depth * 10.0).floor() as usize).min(9);
            let retention: f64 = state.log.iter().map(|r| r.retention).sum::<f64>()
                / state.log.len() as f64;
            Ok((hit, decile, retention))
        })
        .collect();

    let mut hits = 0usize;
    let mut decile_hits = [0usize; 10];
    let mut decile_counts = [0usize; 10];
    let mut retention_sum = 0.0;
    for r in &evals {
        let (hit, decile, retention) = *r.as_ref().map_err(|e| Error::Input(e.to_string()))?;
        if hit {
            hits += 1;
            decile_hits[decile] += 1;
        }
        decile_counts[decile] += 1;
        retention_sum += retention;
    }
    let per_decile = (0..10)
        .filter(|&d| decile_counts[d] > 0)
        .map(|d| (d, decile_hits[d] as f64 / decile_counts[d] as f64, decile_counts[d]))
        .collect();
    Ok(PasskeyReport {
        accuracy: hits as f64 / samples.len() as f64,
        per_decile,
        mean_retention: retention_sum / samples.len() as f64,
        samples: samples.len(),
    })
}

/// First run of five consecutive ASCII digits.
fn extract_digits(generated: &[u8]) -> Option<String> {
    let mut run = String::new();
    for &b in generated {
        if b.is_ascii_digit() {
            run.push(b as char);
            if run.len() == 5 {
                return Some(run);
            }
        } else {
            run.clear();
        }
    }
    None
}
