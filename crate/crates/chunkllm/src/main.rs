//! Command-line pipeline driver: corpus generation, the three training
//! stages, evaluations, and the latency benchmark.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use chunkllm::backbone::{
    init_weights, load_checkpoint, named_to_weights, pretrain, save_checkpoint, weights_to_named,
    BackboneWeights, ModelConfig, TrainConfig,
};
use chunkllm::chunkattn::{recall_report, train_adapters, QkAdapterParams};
use chunkllm::chunker::{eval_chunker, train_chunker, ChunkAdapterParams};
use chunkllm::corpus::{
    gen_passkey, gen_sentences, passkey_batches, passkey_to_labeled_docs, read_jsonl, write_jsonl,
    LabeledDoc, PasskeySample,
};
use chunkllm::engine::{
    bench_latency, eval_passkey, eval_ppl, rows_to_csv, AdapterSet, BenchPolicy, BoundaryDetector,
    KMode, Policy, PolicyConfig,
};
use chunkllm::numerics::Tensor;

#[derive(Parser)]
#[command(name = "chunkllm", version, about = "Chunk-sparse decoding on a toy transformer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a labeled sentence corpus or passkey samples (JSONL + manifest).
    GenCorpus(GenCorpusArgs),
    /// Pretrain or fine-tune the backbone LM.
    TrainBackbone(TrainBackboneArgs),
    /// Train the chunk-boundary adapter on a frozen backbone.
    TrainChunker(TrainChunkerArgs),
    /// Train the QK adapters by attention distillation on a frozen backbone.
    TrainAdapters(TrainAdaptersArgs),
    /// Boundary precision/recall/F1 against the rule oracle.
    EvalBoundary(EvalBoundaryArgs),
    /// Per-layer and voted top-k chunk recall against the teacher.
    EvalRecall(EvalRecallArgs),
    /// Passkey retrieval accuracy under a cache policy.
    EvalPasskey(EvalPasskeyArgs),
    /// Teacher-forced perplexity under a cache policy.
    EvalPpl(EvalPplArgs),
    /// Per-token decode latency across policies and context lengths.
    Bench(BenchArgs),
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long, default_value_t = 256)]
    vocab_size: usize,
    #[arg(long, default_value_t = 128)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    n_layers: usize,
    #[arg(long, default_value_t = 4)]
    n_heads: usize,
    #[arg(long, default_value_t = 32)]
    d_head: usize,
    #[arg(long, default_value_t = 32768)]
    max_context: usize,
    #[arg(long, default_value_t = 10000.0)]
    rope_base: f64,
}

impl ModelFlags {
    fn to_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_head: self.d_head,
            max_context: self.max_context,
            rope_base: self.rope_base,
            seed,
        }
    }
}

#[derive(Args, Clone)]
struct PolicyFlags {
    /// TOML file with PolicyConfig fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// chunkllm | full | streaming | fixed_chunk
    #[arg(long)]
    policy: Option<String>,
    /// Top-k as a fraction of completed chunks (selects ratio mode).
    #[arg(long)]
    topk_ratio: Option<f64>,
    /// Absolute top-k chunk count (selects absolute mode).
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    local_chunks: Option<usize>,
    #[arg(long)]
    sink_chunks: Option<usize>,
    /// Disable cross-layer voting (ablation).
    #[arg(long)]
    no_vote: bool,
    /// Reselect chunks every step instead of only at boundaries (ablation).
    #[arg(long)]
    no_icac: bool,
    /// Boundary threshold for the chunk adapter.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    fixed_chunk_len: Option<usize>,
    #[arg(long)]
    streaming_window: Option<usize>,
    #[arg(long)]
    streaming_sink: Option<usize>,
    /// Boundary source during decode: adapter | interval:<n>
    #[arg(long)]
    boundary_source: Option<String>,
}

impl PolicyFlags {
    fn resolve(&self) -> anyhow::Result<PolicyConfig> {
        let mut cfg: PolicyConfig = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).context("parsing policy config")?
            }
            None => PolicyConfig::default(),
        };
        if let Some(p) = &self.policy {
            cfg.policy = parse_policy(p)?;
        }
        if let Some(r) = self.topk_ratio {
            cfg.k_mode = KMode::Ratio;
            cfg.k_ratio = r;
        }
        if let Some(k) = self.topk {
            cfg.k_mode = KMode::Absolute;
            cfg.k_absolute = k;
        }
        if let Some(m) = self.local_chunks {
            cfg.local_chunks = m;
        }
        if let Some(s) = self.sink_chunks {
            cfg.sink_chunks = s;
        }
        if self.no_vote {
            cfg.vote_enabled = false;
        }
        if self.no_icac {
            cfg.icac_enabled = false;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(l) = self.fixed_chunk_len {
            cfg.fixed_chunk_len = l;
        }
        if let Some(w) = self.streaming_window {
            cfg.streaming_window_tokens = w;
        }
        if let Some(s) = self.streaming_sink {
            cfg.streaming_sink_tokens = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn detector(&self, has_chunk_adapter: bool) -> anyhow::Result<BoundaryDetector> {
        match self.boundary_source.as_deref() {
            None => Ok(if has_chunk_adapter {
                BoundaryDetector::Adapter
            } else {
                BoundaryDetector::FixedInterval(64)
            }),
            Some("adapter") => Ok(BoundaryDetector::Adapter),
            Some(s) if s.starts_with("interval:") => {
                let n: usize = s["interval:".len()..].parse().context("interval size")?;
                Ok(BoundaryDetector::FixedInterval(n))
            }
            Some(other) => bail!("unknown boundary source {other}"),
        }
    }
}

fn parse_policy(name: &str) -> anyhow::Result<Policy> {
    Ok(match name {
        "chunkllm" => Policy::ChunkLlm,
        "full" => Policy::Full,
        "streaming" => Policy::Streaming,
        "fixed_chunk" => Policy::FixedChunk,
        other => bail!("unknown policy {other}"),
    })
}

#[derive(Args)]
struct GenCorpusArgs {
    /// sentences | passkey
    #[arg(long, default_value = "sentences")]
    kind: String,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    n_docs: usize,
    #[arg(long, default_value_t = 600)]
    min_len: usize,
    #[arg(long, default_value_t = 1400)]
    max_len: usize,
    /// Context length for passkey samples.
    #[arg(long, default_value_t = 4096)]
    context_len: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainBackboneArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    corpus: PathBuf,
    /// sentences | passkey
    #[arg(long, default_value = "sentences")]
    corpus_kind: String,
    /// Resume from an existing checkpoint instead of fresh initialization.
    #[arg(long)]
    init_from: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 256)]
    seqlen: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    /// For passkey corpora: restrict the loss to the answer span.
    #[arg(long)]
    answer_loss_only: bool,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct TrainChunkerArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// sentences | passkey
    #[arg(long, default_value = "sentences")]
    corpus_kind: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1200)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 256)]
    seqlen: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
}

#[derive(Args)]
struct TrainAdaptersArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// sentences | passkey
    #[arg(long, default_value = "sentences")]
    corpus_kind: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3000)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 1024)]
    seqlen: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    /// Adapter feature width (default: head dimension).
    #[arg(long)]
    d_adapter: Option<usize>,
}

#[derive(Args)]
struct EvalBoundaryArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Optional JSON metrics output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalRecallArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated k values.
    #[arg(long, default_value = "1,2,4,8")]
    ks: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalPasskeyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 8)]
    n_decode: usize,
    #[command(flatten)]
    policy: PolicyFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalPplArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    policy: PolicyFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Run with freshly initialized weights (timing is weight-independent).
    #[arg(long)]
    allow_untrained: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated context lengths.
    #[arg(long, default_value = "4096,8192,16384")]
    lengths: String,
    /// Comma-separated policies.
    #[arg(long, default_value = "full,chunkllm")]
    policies: String,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 16)]
    warmup: usize,
    #[arg(long, default_value_t = 128)]
    timed: usize,
    #[command(flatten)]
    policy: PolicyFlags,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::GenCorpus(a) => cmd_gen_corpus(a),
        Cmd::TrainBackbone(a) => cmd_train_backbone(a),
        Cmd::TrainChunker(a) => cmd_train_chunker(a),
        Cmd::TrainAdapters(a) => cmd_train_adapters(a),
        Cmd::EvalBoundary(a) => cmd_eval_boundary(a),
        Cmd::EvalRecall(a) => cmd_eval_recall(a),
        Cmd::EvalPasskey(a) => cmd_eval_passkey(a),
        Cmd::EvalPpl(a) => cmd_eval_ppl(a),
        Cmd::Bench(a) => cmd_bench(a),
    }
}

fn sha256_of(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn cmd_gen_corpus(a: GenCorpusArgs) -> anyhow::Result<()> {
    std::fs::create_dir_all(&a.out)
        .with_context(|| format!("creating output dir {}", a.out.display()))?;
    let (file, lines) = match a.kind.as_str() {
        "sentences" => {
            let docs = gen_sentences(a.seed, a.n_docs, (a.min_len, a.max_len));
            let path = a.out.join("docs.jsonl");
            write_jsonl(&path, &docs)?;
            (path, docs.len())
        }
        "passkey" => {
            let samples: Vec<PasskeySample> = (0..a.n_docs)
                .map(|i| {
                    let depth = if a.n_docs > 1 { i as f64 / (a.n_docs - 1) as f64 } else { 0.5 };
                    gen_passkey(a.seed.wrapping_add(i as u64), a.context_len, depth)
                })
                .collect::<chunkllm::Result<_>>()?;
            let path = a.out.join("passkey.jsonl");
            write_jsonl(&path, &samples)?;
            (path, samples.len())
        }
        other => bail!("unknown corpus kind {other}"),
    };
    #[derive(serde::Serialize)]
    struct Manifest {
        kind: String,
        seed: u64,
        n_docs: usize,
        files: Vec<FileEntry>,
    }
    #[derive(serde::Serialize)]
    struct FileEntry {
        path: String,
        sha256: String,
        lines: usize,
    }
    let manifest = Manifest {
        kind: a.kind.clone(),
        seed: a.seed,
        n_docs: a.n_docs,
        files: vec![FileEntry {
            path: file.file_name().unwrap().to_string_lossy().into_owned(),
            sha256: sha256_of(&file)?,
            lines,
        }],
    };
    let manifest_path = a.out.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    println!("wrote {} ({} lines) and {}", file.display(), lines, manifest_path.display());
    Ok(())
}

fn write_loss_csv(path: &Path, curve: &[(usize, f64)]) -> anyhow::Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "step,loss")?;
    for (step, loss) in curve {
        writeln!(f, "{step},{loss:.6}")?;
    }
    Ok(())
}

fn loss_csv_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".loss.csv");
    out.with_file_name(name)
}

/// Loaded checkpoint: backbone plus whatever adapters it carries.
struct LoadedModel {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
    backbone: BackboneWeights,
    chunk: Option<ChunkAdapterParams>,
    qk: Option<QkAdapterParams>,
}

fn load_model(path: &Path) -> anyhow::Result<LoadedModel> {
    let (config, tensors) =
        load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let backbone = named_to_weights(&config, &tensors)?;
    let chunk = if tensors.contains_key("chunk_adapter.weight") {
        Some(ChunkAdapterParams::from_named(&tensors)?)
    } else {
        None
    };
    let qk = if tensors.contains_key("qk_adapter.L1.wq") {
        Some(QkAdapterParams::from_named(&tensors, config.n_layers)?)
    } else {
        None
    };
    Ok(LoadedModel { config, tensors, backbone, chunk, qk })
}

fn read_corpus(path: &Path, kind: &str) -> anyhow::Result<Vec<LabeledDoc>> {
    match kind {
        "sentences" => Ok(read_jsonl(path)?),
        "passkey" => {
            let samples: Vec<PasskeySample> = read_jsonl(path)?;
            Ok(passkey_to_labeled_docs(&samples))
        }
        other => bail!("unknown corpus kind {other}"),
    }
}

fn cmd_train_backbone(a: TrainBackboneArgs) -> anyhow::Result<()> {
    let mut weights = match &a.init_from {
        Some(path) => load_model(path)?.backbone,
        None => init_weights(&a.model.to_config(a.seed))?,
    };
    let cfg = TrainConfig { steps: a.steps, lr: a.lr, ..Default::default() };
    let curve = match a.corpus_kind.as_str() {
        "sentences" => {
            let docs: Vec<LabeledDoc> = read_jsonl(&a.corpus)?;
            let batches = chunkllm::corpus::make_batches(&docs, a.seqlen, a.batch);
            if batches.is_empty() {
                bail!("corpus at {} yields no {}+1-token windows", a.corpus.display(), a.seqlen);
            }
            pretrain(&mut weights, &batches, &cfg, None)?
        }
        "passkey" => {
            let samples: Vec<PasskeySample> = read_jsonl(&a.corpus)?;
            let (batches, spans) = passkey_batches(&samples, a.batch);
            if batches.is_empty() {
                bail!("passkey corpus too small for batch {}", a.batch);
            }
            let spans_opt = if a.answer_loss_only { Some(spans.as_slice()) } else { None };
            pretrain(&mut weights, &batches, &cfg, spans_opt)?
        }
        other => bail!("unknown corpus kind {other}"),
    };
    let named = weights_to_named(&weights);
    save_checkpoint(&a.out, &weights.config, &named)?;
    write_loss_csv(&loss_csv_path(&a.out), &curve)?;
    let final_loss = curve.last().map(|(_, l)| *l).unwrap_or(f64::NAN);
    println!("trained backbone for {} steps; final loss {final_loss:.4}", a.steps);
    println!("checkpoint: {}", a.out.display());
    Ok(())
}

fn cmd_train_chunker(a: TrainChunkerArgs) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint)?;
    let docs = read_corpus(&a.corpus, &a.corpus_kind)?;
    let cfg = TrainConfig { steps: a.steps, lr: a.lr, ..Default::default() };
    let (params, curve) = train_chunker(&model.backbone, &docs, &cfg, a.batch, a.seqlen, a.seed)?;
    let mut tensors = model.tensors;
    params.to_named(&mut tensors);
    save_checkpoint(&a.out, &model.config, &tensors)?;
    write_loss_csv(&loss_csv_path(&a.out), &curve)?;
    let final_loss = curve.last().map(|(_, l)| *l).unwrap_or(f64::NAN);
    println!("trained chunk adapter for {} steps; final loss {final_loss:.4}", a.steps);
    println!("checkpoint: {}", a.out.display());
    Ok(())
}

fn cmd_train_adapters(a: TrainAdaptersArgs) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint)?;
    let docs = read_corpus(&a.corpus, &a.corpus_kind)?;
    let d_a = a.d_adapter.unwrap_or(model.config.d_head);
    let cfg = TrainConfig { steps: a.steps, lr: a.lr, ..Default::default() };
    let (params, curve) =
        train_adapters(&model.backbone, &docs, &cfg, a.batch, a.seqlen, d_a, a.seed)?;
    let mut tensors = model.tensors;
    params.to_named(&mut tensors);
    save_checkpoint(&a.out, &model.config, &tensors)?;
    write_loss_csv(&loss_csv_path(&a.out), &curve)?;
    let final_loss = curve.last().map(|(_, l)| *l).unwrap_or(f64::NAN);
    println!("trained qk adapters for {} steps; final loss {final_loss:.4}", a.steps);
    println!("checkpoint: {}", a.out.display());
    Ok(())
}

fn cmd_eval_boundary(a: EvalBoundaryArgs) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint)?;
    let chunk = model
        .chunk
        .as_ref()
        .ok_or_else(|| anyhow!("checkpoint has no chunk adapter; run train-chunker first"))?;
    let docs: Vec<LabeledDoc> = read_jsonl(&a.corpus)?;
    let m = eval_chunker(&model.backbone, chunk, &docs, a.alpha)?;
    println!(
        "boundary metrics over {} docs: P={:.4} R={:.4} F1={:.4}",
        docs.len(),
        m.precision,
        m.recall,
        m.f1
    );
    if let Some(out) = a.out {
        let json = serde_json::json!({
            "precision": m.precision, "recall": m.recall, "f1": m.f1,
            "docs": docs.len(), "alpha": a.alpha,
        });
        std::fs::write(&out, serde_json::to_string_pretty(&json)?)?;
        println!("metrics: {}", out.display());
    }
    Ok(())
}

fn cmd_eval_recall(a: EvalRecallArgs) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint)?;
    let qk = model
        .qk
        .as_ref()
        .ok_or_else(|| anyhow!("checkpoint has no qk adapters; run train-adapters first"))?;
    let docs: Vec<LabeledDoc> = read_jsonl(&a.corpus)?;
    let ks: Vec<usize> = a
        .ks
        .split(',')
        .map(|s| s.trim().parse::<usize>().context("parsing k"))
        .collect::<anyhow::Result<_>>()?;
    let (rows, voted) = recall_report(&model.backbone, qk, &docs, &ks)?;
    let mut f = std::fs::File::create(&a.out)?;
    writeln!(f, "layer,k,recall")?;
    for r in &rows {
        writeln!(f, "{},{},{:.6}", r.layer, r.k, r.recall)?;
    }
    for (k, v) in &voted {
        println!("voted recall @k={k}: {v:.4}");
    }
    println!("per-layer table ({} rows): {}", rows.len(), a.out.display());
    Ok(())
}

fn adapter_set(model: &LoadedModel) -> AdapterSet<'_> {
    AdapterSet { chunk: model.chunk.as_ref(), qk: model.qk.as_ref() }
}

fn cmd_eval_passkey(a: EvalPasskeyArgs) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint)?;
    let samples: Vec<PasskeySample> = read_jsonl(&a.corpus)?;
    let cfg = a.policy.resolve()?;
    let detector = a.policy.detector(model.chunk.is_some())?;
    let report =
        eval_passkey(&model.backbone, adapter_set(&model), &samples, &cfg, &detector, a.n_decode)?;
    println!(
        "passkey accuracy {:.4} over {} samples (policy {}, mean retention {:.4})",
        report.accuracy,
        report.samples,
        cfg.policy.name(),
        report.mean_retention
    );
    for (decile, acc, n) in &report.per_decile {
        println!("  depth decile {decile}: {acc:.4} ({n} samples)");
    }
    if let Some(out) = a.out {
        let json = serde_json::json!({
            "policy": cfg.policy.name(),
            "accuracy": report.accuracy,
            "mean_retention": report.mean_retention,
            "samples": report.samples,
            "per_decile": report.per_decile,
        });
        std::fs::write(&out, serde_json::to_string_pretty(&json)?)?;
        println!("report: {}", out.display());
    }
    Ok(())
}

fn cmd_eval_ppl(a: EvalPplArgs) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint)?;
    let docs: Vec<LabeledDoc> = read_jsonl(&a.corpus)?;
    let cfg = a.policy.resolve()?;
    let detector = a.policy.detector(model.chunk.is_some())?;
    let ppl = eval_ppl(&model.backbone, adapter_set(&model), &docs, &cfg, &detector)?;
    println!("ppl {:.4} over {} docs (policy {})", ppl, docs.len(), cfg.policy.name());
    if let Some(out) = a.out {
        let json = serde_json::json!({
            "policy": cfg.policy.name(), "ppl": ppl, "docs": docs.len(),
        });
        std::fs::write(&out, serde_json::to_string_pretty(&json)?)?;
        println!("report: {}", out.display());
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> anyhow::Result<()> {
    let model = match (&a.checkpoint, a.allow_untrained) {
        (Some(path), _) => Some(load_model(path)?),
        (None, true) => None,
        (None, false) => bail!("bench needs --checkpoint or --allow-untrained"),
    };
    let owned_backbone;
    let (backbone, adapters, has_chunk) = match &model {
        Some(m) => (&m.backbone, adapter_set(m), m.chunk.is_some()),
        None => {
            owned_backbone = init_weights(&a.model.to_config(a.seed))?;
            (&owned_backbone, AdapterSet::default(), false)
        }
    };
    // Selection policies need QK adapters; an untrained run gets fresh ones
    // (timing does not depend on their values).
    let fallback_qk;
    let adapters = if adapters.qk.is_none() {
        fallback_qk = QkAdapterParams::init(&backbone.config, backbone.config.d_head, a.seed);
        AdapterSet { chunk: adapters.chunk, qk: Some(&fallback_qk) }
    } else {
        adapters
    };

    let lengths: Vec<usize> = a
        .lengths
        .split(',')
        .map(|s| s.trim().parse::<usize>().context("parsing length"))
        .collect::<anyhow::Result<_>>()?;
    for &len in &lengths {
        if len + a.warmup + a.timed > backbone.config.max_context {
            bail!("length {len} exceeds max_context {}", backbone.config.max_context);
        }
    }
    let base = a.policy.resolve()?;
    let detector = a.policy.detector(has_chunk)?;
    let policies: Vec<BenchPolicy> = a
        .policies
        .split(',')
        .map(|name| -> anyhow::Result<BenchPolicy> {
            let mut cfg = base.clone();
            cfg.policy = parse_policy(name.trim())?;
            Ok(BenchPolicy { name: name.trim().to_string(), cfg, detector: detector.clone() })
        })
        .collect::<anyhow::Result<_>>()?;

    let rows =
        bench_latency(backbone, adapters, &lengths, &policies, a.reps, a.warmup, a.timed, a.seed)?;
    let csv = rows_to_csv(&rows);
    std::fs::write(&a.out, &csv)?;
    print!("{csv}");
    println!("bench table: {}", a.out.display());
    Ok(())
}
