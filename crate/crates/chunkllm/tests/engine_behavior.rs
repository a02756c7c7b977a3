//! Cross-module engine behavior: boundary-triggered reselection semantics and
//! policy agreement cases.

use chunkllm::backbone::{init_weights, ModelConfig, Sampler};
use chunkllm::chunker::ChunkAdapterParams;
use chunkllm::chunkattn::QkAdapterParams;
use chunkllm::engine::{
    generate, prefill, AdapterSet, BoundaryDetector, KMode, Policy, PolicyConfig,
};

/// Text made of sentences that are each exactly 64 bytes long.
fn sixty_four_byte_sentences(n: usize) -> Vec<u8> {
    // 8 words of 7 chars + 7 spaces + '.' = 56 + 7 + 1 = 64.
    let sentence = "withers quibble sparrow plunged crimson thunder blanket papyrus.";
    assert_eq!(sentence.len(), 64);
    let mut out = Vec::with_capacity(n * 64);
    for _ in 0..n {
        out.extend_from_slice(sentence.as_bytes());
    }
    out
}

#[test]
fn fixed_chunk_matches_chunkllm_when_boundaries_coincide() {
    // Sentences are exactly 64 bytes, so sentence boundaries and 64-token
    // fixed segmentation produce the same chunk map — and therefore the same
    // selection under the same adapters.
    let w = init_weights(&ModelConfig::tiny(9)).unwrap();
    let qk = QkAdapterParams::init(&w.config, 16, 3);
    let prompt = sixty_four_byte_sentences(10);
    assert_eq!(prompt.len(), 640);

    let sentence_boundaries: std::collections::BTreeSet<usize> =
        (0..10).map(|i| i * 64 + 63).collect();
    let chunk_cfg = PolicyConfig {
        policy: Policy::ChunkLlm,
        k_mode: KMode::Ratio,
        k_ratio: 0.3,
        local_chunks: 2,
        sink_chunks: 1,
        ..Default::default()
    };
    let fixed_cfg = PolicyConfig {
        policy: Policy::FixedChunk,
        fixed_chunk_len: 64,
        ..chunk_cfg.clone()
    };
    let adapters = AdapterSet { chunk: None, qk: Some(&qk) };
    let a = prefill(
        &w,
        adapters,
        &prompt,
        &chunk_cfg,
        &BoundaryDetector::Scripted(sentence_boundaries),
    )
    .unwrap();
    let b = prefill(&w, adapters, &prompt, &fixed_cfg, &BoundaryDetector::Adapter).unwrap();
    assert_eq!(a.chunk_map(), b.chunk_map());
    assert_eq!(a.selected_chunks(), b.selected_chunks());
    assert_eq!(a.active_token_indices(), b.active_token_indices());
}

#[test]
fn all_boundary_tokens_make_icac_equal_no_icac() {
    // A chunk adapter with a huge positive bias labels every token a
    // boundary; reselection then runs every step in both modes, and greedy
    // decoding must agree bit-exactly.
    let w = init_weights(&ModelConfig::tiny(21)).unwrap();
    let qk = QkAdapterParams::init(&w.config, 16, 7);
    let mut chunk = ChunkAdapterParams::zeros(w.config.d_model);
    chunk.bias.data_mut()[0] = 1000.0;
    let adapters = AdapterSet { chunk: Some(&chunk), qk: Some(&qk) };
    let prompt = b"every token ends a chunk in this run.";
    let base = PolicyConfig {
        policy: Policy::ChunkLlm,
        k_mode: KMode::Ratio,
        k_ratio: 0.4,
        local_chunks: 3,
        sink_chunks: 1,
        ..Default::default()
    };
    let icac_on = PolicyConfig { icac_enabled: true, ..base.clone() };
    let icac_off = PolicyConfig { icac_enabled: false, ..base };
    let (tokens_on, log_on) = generate(
        &w,
        adapters,
        prompt,
        48,
        &icac_on,
        &BoundaryDetector::Adapter,
        Sampler::Greedy,
    )
    .unwrap();
    let (tokens_off, log_off) = generate(
        &w,
        adapters,
        prompt,
        48,
        &icac_off,
        &BoundaryDetector::Adapter,
        Sampler::Greedy,
    )
    .unwrap();
    assert_eq!(tokens_on, tokens_off, "token streams must agree bit-exactly");
    for (a, b) in log_on.iter().zip(&log_off) {
        assert_eq!(a.active_tokens, b.active_tokens);
        assert_eq!(a.reselected, b.reselected);
    }
}

#[test]
fn reselection_flag_follows_boundaries() {
    let w = init_weights(&ModelConfig::tiny(33)).unwrap();
    let qk = QkAdapterParams::init(&w.config, 16, 3);
    let adapters = AdapterSet { chunk: None, qk: Some(&qk) };
    let prompt: Vec<u8> = (0..128u8).collect();
    let cfg = PolicyConfig {
        policy: Policy::ChunkLlm,
        k_mode: KMode::Ratio,
        k_ratio: 0.5,
        ..Default::default()
    };
    // Boundaries every 32 tokens during decode.
    let mut state =
        prefill(&w, adapters, &prompt, &cfg, &BoundaryDetector::FixedInterval(32)).unwrap();
    for step in 0..96 {
        let pos = 128 + step;
        state.step((step % 200) as u8).unwrap();
        let rec = state.log.last().unwrap();
        assert_eq!(
            rec.reselected,
            (pos + 1) % 32 == 0,
            "step {step} at position {pos}"
        );
    }
}

#[test]
fn retention_reflects_active_set_cardinality() {
    let w = init_weights(&ModelConfig::tiny(5)).unwrap();
    let qk = QkAdapterParams::init(&w.config, 16, 3);
    let adapters = AdapterSet { chunk: None, qk: Some(&qk) };
    let prompt: Vec<u8> = (0..200u8).collect();
    let cfg = PolicyConfig {
        policy: Policy::ChunkLlm,
        k_mode: KMode::Absolute,
        k_absolute: 1,
        local_chunks: 1,
        sink_chunks: 1,
        ..Default::default()
    };
    let state =
        prefill(&w, adapters, &prompt, &cfg, &BoundaryDetector::FixedInterval(40)).unwrap();
    let indices = state.active_token_indices();
    assert_eq!(indices.len(), state.active_token_count());
    // Indices are sorted, deduplicated original positions.
    for w2 in indices.windows(2) {
        assert!(w2[0] < w2[1]);
    }
    let rec = &state.log[0];
    assert!((rec.retention - indices.len() as f64 / 200.0).abs() < 1e-12);
}
