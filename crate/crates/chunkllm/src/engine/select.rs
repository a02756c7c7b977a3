//! Per-layer top-k chunk scoring and the cross-layer voting rule.

use super::PolicyConfig;

/// Resolve the effective k for `c` completed chunks: ratio mode rounds up
/// and never drops below 1; absolute mode clips to `c`.
pub fn resolve_k(cfg: &PolicyConfig, c: usize) -> usize {
    match cfg.k_mode {
        super::KMode::Ratio => ((cfg.k_ratio * c as f64).ceil() as usize).max(1),
        super::KMode::Absolute => cfg.k_absolute.min(c).max(1),
    }
}

/// Indices of the k largest scores, ties broken toward the lower index.
pub fn topk_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Chunk voting: count each chunk's occurrences across the per-layer top-k
/// sets; the global top-k are the k chunks with the highest counts, ties
/// broken by summed scores across all layers (descending), then by lower
/// chunk index. Returned in ascending chunk order.
pub fn vote_global_topk(
    per_layer_topk: &[Vec<usize>],
    scores_per_layer: &[Vec<f64>],
    k: usize,
) -> Vec<usize> {
    let mut counts: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    for set in per_layer_topk {
        for &j in set {
            *counts.entry(j).or_insert(0) += 1;
        }
    }
    let summed = |j: usize| -> f64 { scores_per_layer.iter().map(|s| s[j]).sum() };
    let mut candidates: Vec<usize> = counts.keys().copied().collect();
    candidates.sort_by(|&a, &b| {
        counts[&b]
            .cmp(&counts[&a])
            .then_with(|| summed(b).partial_cmp(&summed(a)).unwrap())
            .then(a.cmp(&b))
    });
    candidates.truncate(k);
    candidates.sort_unstable();
    candidates
}

/// Score all completed chunks against the current query, per layer:
/// `Q̄ · K̄_j / sqrt(d_a)`. `kbar[l]` is the flattened `[c][d_a]` table.
pub fn layer_scores(qbar: &[f32], kbar: &[f32], c: usize, d_a: usize) -> Vec<f64> {
    let scale = 1.0 / (d_a as f64).sqrt();
    (0..c)
        .map(|j| {
            let row = &kbar[j * d_a..(j + 1) * d_a];
            qbar.iter().zip(row).map(|(a, b)| (*a as f64) * (*b as f64)).sum::<f64>() * scale
        })
        .collect()
}

/// Global selection: per-layer top-k over all completed chunks, then the
/// vote. With voting disabled, the bottommost layer's top-k is the global
/// set (selection-ablation mode). Returns ascending chunk indices.
pub fn select_chunks(
    qbar_per_layer: &[Vec<f32>],
    kbar_per_layer: &[&[f32]],
    c: usize,
    d_a: usize,
    cfg: &PolicyConfig,
) -> Vec<usize> {
    if c == 0 {
        return Vec::new();
    }
    let k = resolve_k(cfg, c);
    let scores: Vec<Vec<f64>> = qbar_per_layer
        .iter()
        .zip(kbar_per_layer)
        .map(|(q, kb)| layer_scores(q, kb, c, d_a))
        .collect();
    let sets: Vec<Vec<usize>> = scores.iter().map(|s| topk_indices(s, k)).collect();
    if !cfg.vote_enabled {
        let mut s = sets[0].clone();
        s.sort_unstable();
        return s;
    }
    vote_global_topk(&sets, &scores, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{KMode, Policy};

    fn cfg_ratio(r: f64) -> PolicyConfig {
        PolicyConfig { policy: Policy::ChunkLlm, k_mode: KMode::Ratio, k_ratio: r, ..Default::default() }
    }

    #[test]
    fn k_resolution() {
        let c = 10;
        assert_eq!(resolve_k(&cfg_ratio(0.45), c), 5);
        assert_eq!(resolve_k(&cfg_ratio(0.01), c), 1);
        let abs = PolicyConfig {
            k_mode: KMode::Absolute,
            k_absolute: 256,
            ..Default::default()
        };
        assert_eq!(resolve_k(&abs, 10), 10);
        assert_eq!(resolve_k(&abs, 1000), 256);
    }

    #[test]
    fn topk_breaks_ties_by_lower_index() {
        let scores = [1.0, 3.0, 3.0, 0.5];
        assert_eq!(topk_indices(&scores, 2), vec![1, 2]);
        assert_eq!(topk_indices(&[2.0, 2.0, 2.0], 2), vec![0, 1]);
    }

    #[test]
    fn vote_unanimous_layers() {
        let sets = vec![vec![3, 5], vec![5, 3], vec![3, 5]];
        let scores = vec![vec![0.0; 8]; 3];
        assert_eq!(vote_global_topk(&sets, &scores, 2), vec![3, 5]);
    }

    #[test]
    fn vote_hand_case_counts_then_index() {
        // Top-2 sets {1,2}, {2,3}, {2,4} with equal tie scores: chunk 2 has
        // count 3; chunks 1, 3, 4 tie at count 1 and equal score, so the
        // lowest index (1) joins -> S = {1, 2}.
        let sets = vec![vec![1, 2], vec![2, 3], vec![2, 4]];
        let scores = vec![vec![0.5; 5]; 3];
        assert_eq!(vote_global_topk(&sets, &scores, 2), vec![1, 2]);
    }

    #[test]
    fn vote_ties_broken_by_summed_scores() {
        let sets = vec![vec![0, 1], vec![2, 3]];
        // All counts 1; chunk 3 has the largest summed score.
        let scores = vec![vec![0.1, 0.2, 0.0, 0.9], vec![0.1, 0.2, 0.0, 0.9]];
        assert_eq!(vote_global_topk(&sets, &scores, 1), vec![3]);
    }

    #[test]
    fn select_matches_brute_force_vote() {
        // Random small instance checked against an independent
        // reimplementation of the rule.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for trial in 0..50 {
            let layers = 4;
            let c = 8;
            let d_a = 6;
            let qbar: Vec<Vec<f32>> = (0..layers)
                .map(|_| (0..d_a).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
                .collect();
            let kbar: Vec<Vec<f32>> = (0..layers)
                .map(|_| (0..c * d_a).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
                .collect();
            let cfg = PolicyConfig {
                k_mode: KMode::Ratio,
                k_ratio: 0.375, // k = 3 of 8
                ..Default::default()
            };
            let kb_refs: Vec<&[f32]> = kbar.iter().map(|k| k.as_slice()).collect();
            let got = select_chunks(&qbar, &kb_refs, c, d_a, &cfg);

            // Brute force, written independently of the library path.
            let k = 3usize;
            let mut all_scores = Vec::new();
            for l in 0..layers {
                let mut s = Vec::new();
                for j in 0..c {
                    let mut dot = 0.0f64;
                    for x in 0..d_a {
                        dot += qbar[l][x] as f64 * kbar[l][j * d_a + x] as f64;
                    }
                    s.push(dot / (d_a as f64).sqrt());
                }
                all_scores.push(s);
            }
            let mut counts = vec![0usize; c];
            for s in &all_scores {
                let mut order: Vec<usize> = (0..c).collect();
                order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
                for &j in order.iter().take(k) {
                    counts[j] += 1;
                }
            }
            let mut cand: Vec<usize> = (0..c).filter(|&j| counts[j] > 0).collect();
            cand.sort_by(|&a, &b| {
                let sa: f64 = all_scores.iter().map(|s| s[a]).sum();
                let sb: f64 = all_scores.iter().map(|s| s[b]).sum();
                counts[b].cmp(&counts[a]).then(sb.partial_cmp(&sa).unwrap()).then(a.cmp(&b))
            });
            cand.truncate(k);
            cand.sort_unstable();
            assert_eq!(got, cand, "trial {trial}");
        }
    }

    #[test]
    fn vote_disabled_uses_bottom_layer() {
        let qbar = vec![vec![1.0f32, 0.0], vec![0.0f32, 1.0]];
        // Layer 0 prefers chunk 0; layer 1 prefers chunk 1.
        let kb0 = [1.0f32, 0.0, 0.5, 0.0, -1.0, 0.0];
        let kb1 = [0.0f32, -1.0, 0.0, 0.5, 0.0, 1.0];
        let cfg = PolicyConfig {
            vote_enabled: false,
            k_mode: KMode::Ratio,
            k_ratio: 0.1, // ceil(0.1 * 3) = 1
            ..Default::default()
        };
        let s = select_chunks(&qbar, &[&kb0, &kb1], 3, 2, &cfg);
        assert_eq!(s, vec![0]);
    }
}
