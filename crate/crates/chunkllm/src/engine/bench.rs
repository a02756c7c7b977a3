//! Per-token decode latency across cache policies and context lengths.
//!
//! One shared prefill per length feeds every policy; each repetition clones
//! the initialized state, warms up, then times a fixed number of greedy
//! decode steps. Reported value is the median over repetitions.

use std::time::Instant;

use crate::backbone::{BackboneWeights, Sampler};
use crate::corpus::gen_sentences;
use crate::{Error, Result};

use super::{prefill_forward, AdapterSet, BoundaryDetector, DecodeState, PolicyConfig};

/// One benchmark observation (medians over repetitions).
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub policy: String,
    pub length: usize,
    pub ms_per_token: f64,
    pub retention: f64,
}

/// Named policy variant under benchmark.
#[derive(Debug, Clone)]
pub struct BenchPolicy {
    pub name: String,
    pub cfg: PolicyConfig,
    pub detector: BoundaryDetector,
}

/// Deterministic sentence prompt of exactly `length` bytes.
pub fn bench_prompt(seed: u64, length: usize) -> Vec<u8> {
    let doc = &gen_sentences(seed, 1, (length + 64, length + 256))[0];
    doc.tokens()[..length].to_vec()
}

#[allow(clippy::too_many_arguments)]
pub fn bench_latency(
    weights: &BackboneWeights,
    adapters: AdapterSet,
    lengths: &[usize],
    policies: &[BenchPolicy],
    reps: usize,
    warmup_tokens: usize,
    timed_tokens: usize,
    prompt_seed: u64,
) -> Result<Vec<BenchRow>> {
    if reps == 0 || timed_tokens == 0 {
        return Err(Error::Config("bench needs reps >= 1 and timed_tokens >= 1".into()));
    }
    let budget = warmup_tokens + timed_tokens;
    let mut rows = Vec::with_capacity(lengths.len() * policies.len());
    for &length in lengths {
        if length + budget > weights.config.max_context {
            return Err(Error::Config(format!(
                "length {length} + {budget} decode tokens exceeds max_context {}",
                weights.config.max_context
            )));
        }
        let prompt = bench_prompt(prompt_seed, length);
        let artifacts = prefill_forward(weights, &prompt)?;
        for policy in policies {
            let template = DecodeState::new(
                weights,
                adapters,
                &artifacts,
                policy.cfg.clone(),
                policy.detector.clone(),
            )?;
            let mut per_token = Vec::with_capacity(reps);
            let mut retention = 0.0;
            for _ in 0..reps {
                let mut state = template.clone();
                let mut logits = state.last_logits().to_vec();
                for _ in 0..warmup_tokens {
                    let next = Sampler::Greedy.sample(&logits, &mut None);
                    logits = state.step(next)?.to_vec();
                }
                let timer = Instant::now();
                for _ in 0..timed_tokens {
                    let next = Sampler::Greedy.sample(&logits, &mut None);
                    logits = state.step(next)?.to_vec();
                }
                per_token.push(timer.elapsed().as_secs_f64() * 1000.0 / timed_tokens as f64);
                let timed = &state.log[state.log.len() - timed_tokens..];
                retention = timed.iter().map(|r| r.retention).sum::<f64>() / timed.len() as f64;
            }
            rows.push(BenchRow {
                policy: policy.name.clone(),
                length,
                ms_per_token: median(&mut per_token),
                retention,
            });
        }
    }
    Ok(rows)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// CSV with the fixed header `policy,length,ms_per_token,retention`.
pub fn rows_to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("policy,length,ms_per_token,retention\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            r.policy, r.length, r.ms_per_token, r.retention
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_weights, ModelConfig};
    use crate::engine::Policy;

    #[test]
    fn row_count_and_csv_header() {
        let w = init_weights(&ModelConfig::tiny(3)).unwrap();
        let policies = vec![
            BenchPolicy {
                name: "full".into(),
                cfg: PolicyConfig { policy: Policy::Full, ..Default::default() },
                detector: BoundaryDetector::FixedInterval(64),
            },
            BenchPolicy {
                name: "streaming".into(),
                cfg: PolicyConfig {
                    policy: Policy::Streaming,
                    streaming_window_tokens: 64,
                    ..Default::default()
                },
                detector: BoundaryDetector::FixedInterval(64),
            },
        ];
        let rows = bench_latency(
            &w,
            AdapterSet::default(),
            &[256, 512],
            &policies,
            3,
            4,
            16,
            9,
        )
        .unwrap();
        assert_eq!(rows.len(), 4);
        let csv = rows_to_csv(&rows);
        assert!(csv.starts_with("policy,length,ms_per_token,retention\n"));
        assert_eq!(csv.lines().count(), 5);
        for r in &rows {
            assert!(r.ms_per_token > 0.0);
        }
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn prompt_is_exact_length_and_deterministic() {
        let a = bench_prompt(5, 1000);
        let b = bench_prompt(5, 1000);
        assert_eq!(a.len(), 1000);
        assert_eq!(a, b);
    }
}
