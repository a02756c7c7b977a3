//! Deterministic synthetic corpora.
//!
//! Two generators: sentence-structured text with rule-derived chunk-boundary
//! labels (including "confuser" periods inside decimals and abbreviations
//! that are *not* boundaries), and passkey-retrieval documents where a
//! 5-digit needle is buried at a controlled depth. Both are pure functions of
//! their seed.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Sentence terminators that can end a chunk.
pub const TERMINATORS: [u8; 3] = [b'.', b'!', b'?'];

/// Abbreviations the generator may inject mid-sentence. Their periods are
/// never chunk boundaries. Kept lowercase; the generator emits them verbatim.
pub const ABBREVIATIONS: [&str; 6] = ["dr.", "mr.", "e.g.", "i.e.", "etc.", "vs."];

/// Fraction of sentences that receive a confuser (decimal or abbreviation).
pub const CONFUSER_RATE: f64 = 0.10;

/// Fixed word list for the sentence grammar. Short words keep the boundary
/// fraction in a useful band; no single letters and nothing that collides
/// with [`ABBREVIATIONS`], so boundary labels stay decidable from left
/// context alone.
pub const WORDS: [&str; 48] = [
    "the", "fox", "dog", "sky", "sun", "oak", "elm", "ash", "ice", "sea", "rain", "mist", "snow",
    "leaf", "bird", "wolf", "bear", "deer", "moss", "fern", "lake", "hill", "cave", "rock", "sand",
    "wave", "tide", "dawn", "dusk", "star", "moon", "wind", "pine", "reed", "pond", "brook",
    "glen", "vale", "peak", "ridge", "crow", "hawk", "finch", "trout", "otter", "crane", "heron",
    "maple",
];

/// One generated document with per-token boundary labels (1 = last token of a
/// chunk).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LabeledDoc {
    pub text: String,
    pub labels: Vec<u8>,
}

impl LabeledDoc {
    pub fn tokens(&self) -> &[u8] {
        self.text.as_bytes()
    }
}

/// A passkey-retrieval sample: filler text with one needle sentence at a
/// controlled depth, plus the question suffix and expected answer.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PasskeySample {
    pub context: String,
    pub needle: String,
    pub depth: f64,
    pub answer: String,
}

pub const PASSKEY_QUESTION: &str = " What is the pass key?";

impl PasskeySample {
    /// Decode prompt: context followed by the question.
    pub fn prompt(&self) -> String {
        format!("{}{}", self.context, PASSKEY_QUESTION)
    }

    /// Training document: prompt followed by the answer.
    pub fn full_text(&self) -> String {
        format!("{} {}.", self.prompt(), self.answer)
    }
}

/// Byte-level tokenizer: identity over 0..=255.
#[derive(Debug, Clone, Copy, Default)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn tokenize(self, text: &str) -> Vec<u8> {
        text.as_bytes().to_vec()
    }

    pub fn detokenize(self, tokens: &[u8]) -> String {
        String::from_utf8_lossy(tokens).into_owned()
    }
}

fn pick<'a, R: Rng>(rng: &mut R, items: &'a [&'a str]) -> &'a str {
    items[rng.gen_range(0..items.len())]
}

/// One sentence of `4..=30` words ending in a terminator, with an optional
/// confuser inserted at a non-final position. Word counts are geometrically
/// skewed toward the short end so the corpus-level boundary fraction sits
/// well above the degenerate-grammar floor.
fn gen_sentence<R: Rng>(rng: &mut R) -> String {
    let mut n_words = 4usize;
    while n_words < 30 && rng.gen_bool(0.65) {
        n_words += 1;
    }
    let mut words: Vec<String> = (0..n_words).map(|_| pick(rng, &WORDS).to_string()).collect();
    if rng.gen_bool(CONFUSER_RATE) {
        // Confusers never take the final slot: a terminator right after a
        // digit or an abbreviation would be undecidable from left context.
        let slot = rng.gen_range(0..n_words - 1);
        let confuser = if rng.gen_bool(0.5) {
            format!("{}.{}", rng.gen_range(1..100), rng.gen_range(1..100))
        } else {
            pick(rng, &ABBREVIATIONS).to_string()
        };
        words[slot] = confuser;
    }
    let terminator = match rng.gen_range(0..10u8) {
        0 => '!',
        1 => '?',
        _ => '.',
    };
    format!("{}{}", words.join(" "), terminator)
}

/// Generate `n_docs` labeled documents whose token counts land in
/// `len_range`. Labels come from the same rule the text was built under and
/// agree with [`label_boundaries`].
pub fn gen_sentences(seed: u64, n_docs: usize, len_range: (usize, usize)) -> Vec<LabeledDoc> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::with_capacity(n_docs);
    for _ in 0..n_docs {
        let target = rng.gen_range(len_range.0..=len_range.1);
        let mut text = String::new();
        loop {
            let sentence = gen_sentence(&mut rng);
            if !text.is_empty() {
                // Stop before overshooting, but always keep at least one
                // sentence.
                if text.len() + 1 + sentence.len() > target {
                    break;
                }
                text.push(' ');
            }
            text.push_str(&sentence);
            if text.len() >= target {
                break;
            }
        }
        let labels = label_boundaries(&text);
        docs.push(LabeledDoc { text, labels });
    }
    docs
}

/// Rule oracle: one label per byte. A byte is a boundary iff it is a
/// terminator that is not flanked by digits, is not part of a known
/// abbreviation, and is followed by whitespace or end-of-text. The final byte
/// of the document is always a boundary.
pub fn label_boundaries(text: &str) -> Vec<u8> {
    let bytes = text.as_bytes();
    let n = bytes.len();
    let mut labels = vec![0u8; n];
    if n == 0 {
        return labels;
    }
    for i in 0..n {
        if !TERMINATORS.contains(&bytes[i]) {
            continue;
        }
        let followed_ok = i + 1 == n || bytes[i + 1].is_ascii_whitespace();
        if !followed_ok {
            continue;
        }
        let digit_flanked = i > 0
            && i + 1 < n
            && bytes[i - 1].is_ascii_digit()
            && bytes[i + 1].is_ascii_digit();
        if digit_flanked {
            continue;
        }
        if ends_with_abbreviation(bytes, i) {
            continue;
        }
        labels[i] = 1;
    }
    labels[n - 1] = 1;
    labels
}

/// Does the terminator at `idx` close one of the generator abbreviations?
/// Matches the abbreviation as a standalone word (start of text or preceded
/// by whitespace).
fn ends_with_abbreviation(bytes: &[u8], idx: usize) -> bool {
    for abbr in ABBREVIATIONS {
        let ab = abbr.as_bytes();
        if idx + 1 < ab.len() {
            continue;
        }
        let start = idx + 1 - ab.len();
        if &bytes[start..=idx] != ab {
            continue;
        }
        if start == 0 || bytes[start - 1].is_ascii_whitespace() {
            return true;
        }
    }
    false
}

const NEEDLE_PREFIX: &str = "The pass key is ";

/// Build one passkey sample. Filler sentences are short so that chunk counts
/// stay high relative to the context length; the needle sentence starts at
/// roughly `depth * context_len` bytes.
pub fn gen_passkey(seed: u64, context_len: usize, depth: f64) -> Result<PasskeySample> {
    if context_len < 256 {
        return Err(Error::Input(format!(
            "gen_passkey: context_len {context_len} below minimum 256"
        )));
    }
    if !(0.0..=1.0).contains(&depth) {
        return Err(Error::Input(format!("gen_passkey: depth {depth} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let digits: u32 = rng.gen_range(10000..100000);
    let needle = format!("{NEEDLE_PREFIX}{digits}.");
    if needle.len() + PASSKEY_QUESTION.len() + 16 > context_len {
        return Err(Error::Input("gen_passkey: context too small for needle".into()));
    }

    // Short filler sentences (4..=8 words, no confusers, no digits).
    let filler_sentence = |rng: &mut ChaCha8Rng| -> String {
        let n_words = rng.gen_range(4..=8usize);
        let words: Vec<&str> = (0..n_words).map(|_| pick(rng, &WORDS)).collect();
        format!("{}.", words.join(" "))
    };

    let insert_at = ((depth * (context_len - needle.len()) as f64).round() as usize)
        .min(context_len - needle.len());
    let mut prefix = String::new();
    while prefix.len() < insert_at {
        let s = filler_sentence(&mut rng);
        if !prefix.is_empty() {
            prefix.push(' ');
        }
        prefix.push_str(&s);
    }
    prefix.truncate_to_sentence(insert_at);

    let mut context = prefix;
    if !context.is_empty() {
        context.push(' ');
    }
    context.push_str(&needle);
    while context.len() < context_len {
        let s = filler_sentence(&mut rng);
        if context.len() + 1 + s.len() > context_len {
            break;
        }
        context.push(' ');
        context.push_str(&s);
    }

    Ok(PasskeySample { context, needle, depth, answer: digits.to_string() })
}

trait TruncateToSentence {
    fn truncate_to_sentence(&mut self, max_len: usize);
}

impl TruncateToSentence for String {
    /// Trim to the last full sentence that fits within `max_len` bytes.
    fn truncate_to_sentence(&mut self, max_len: usize) {
        if self.len() <= max_len {
            return;
        }
        let bytes = self.as_bytes();
        let cut = (0..max_len.min(bytes.len()))
            .rev()
            .find(|&i| TERMINATORS.contains(&bytes[i]))
            .map(|i| i + 1)
            .unwrap_or(0);
        self.truncate(cut);
    }
}

/// One training batch: token windows with shifted targets and aligned labels.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `batch` rows of `seqlen` input tokens.
    pub inputs: Vec<Vec<u8>>,
    /// `targets[i][j] == inputs[i][j + 1]` within the source window.
    pub targets: Vec<Vec<u8>>,
    /// Boundary labels aligned to `inputs`.
    pub labels: Vec<Vec<u8>>,
}

/// Cut every document into contiguous `seqlen + 1` windows (stride `seqlen`,
/// final partial window dropped) and group them into batches of `batch`
/// windows. A trailing group smaller than `batch` is dropped so every batch
/// has a fixed size.
pub fn make_batches(docs: &[LabeledDoc], seqlen: usize, batch: usize) -> Vec<Batch> {
    let mut windows: Vec<(Vec<u8>, Vec<u8>, Vec<u8>)> = Vec::new();
    for doc in docs {
        let toks = doc.tokens();
        let mut start = 0;
        while start + seqlen + 1 <= toks.len() {
            let w = &toks[start..start + seqlen + 1];
            let l = &doc.labels[start..start + seqlen];
            windows.push((w[..seqlen].to_vec(), w[1..].to_vec(), l.to_vec()));
            start += seqlen;
        }
    }
    windows
        .chunks(batch)
        .filter(|c| c.len() == batch)
        .map(|c| Batch {
            inputs: c.iter().map(|w| w.0.clone()).collect(),
            targets: c.iter().map(|w| w.1.clone()).collect(),
            labels: c.iter().map(|w| w.2.clone()).collect(),
        })
        .collect()
}

/// Passkey samples as labeled documents (full prompt + answer text, labels
/// from the rule oracle) for boundary/adapter training on the passkey
/// grammar.
pub fn passkey_to_labeled_docs(samples: &[PasskeySample]) -> Vec<LabeledDoc> {
    samples
        .iter()
        .map(|s| {
            let text = s.full_text();
            let labels = label_boundaries(&text);
            LabeledDoc { text, labels }
        })
        .collect()
}

/// Whole-document training batches for passkey fine-tuning: one window per
/// sample plus the row span covering the answer suffix (" NNNNN."), so the
/// loss can focus on retrieval.
pub fn passkey_batches(
    samples: &[PasskeySample],
    batch: usize,
) -> (Vec<Batch>, Vec<Vec<(usize, usize)>>) {
    let mut batches = Vec::new();
    let mut spans = Vec::new();
    for group in samples.chunks(batch) {
        if group.len() < batch {
            break;
        }
        let mut b = Batch { inputs: Vec::new(), targets: Vec::new(), labels: Vec::new() };
        let mut sp = Vec::new();
        for s in group {
            let text = s.full_text();
            let toks = text.as_bytes();
            let len = toks.len();
            // Rows are predictions: row i predicts token i+1. The answer
            // suffix " NNNNN." is the last 7 tokens.
            let suffix = 7usize.min(len - 1);
            b.inputs.push(toks[..len - 1].to_vec());
            b.targets.push(toks[1..].to_vec());
            b.labels.push(label_boundaries(&text)[..len - 1].to_vec());
            sp.push((len - 1 - suffix, suffix));
        }
        batches.push(b);
        spans.push(sp);
    }
    (batches, spans)
}

/// Positive-class weight for boundary training: negatives / positives over a
/// corpus.
pub fn boundary_pos_weight(docs: &[LabeledDoc]) -> f64 {
    let pos: usize = docs.iter().map(|d| d.labels.iter().filter(|&&l| l == 1).count()).sum();
    let total: usize = docs.iter().map(|d| d.labels.len()).sum();
    if pos == 0 {
        return 1.0;
    }
    (total - pos) as f64 / pos as f64
}

/// Unigram entropy of a corpus in nats per byte — the baseline a trained
/// model's held-out loss must beat.
pub fn unigram_entropy(docs: &[LabeledDoc]) -> f64 {
    let mut counts = [0u64; 256];
    let mut total = 0u64;
    for doc in docs {
        for &b in doc.tokens() {
            counts[b as usize] += 1;
            total += 1;
        }
    }
    let mut h = 0.0;
    for &c in &counts {
        if c > 0 {
            let p = c as f64 / total as f64;
            h -= p * p.ln();
        }
    }
    h
}

pub fn write_jsonl<T: Serialize, P: AsRef<Path>>(path: P, items: &[T]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|e| Error::Format(format!("jsonl encode: {e}")))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>, P: AsRef<Path>>(path: P) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("jsonl decode: {e}")))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hi_there_bye() {
        let labels = label_boundaries("Hi there. Bye.");
        let expected_positions = [8usize, 13];
        for (i, &l) in labels.iter().enumerate() {
            assert_eq!(l == 1, expected_positions.contains(&i), "byte {i}");
        }
    }

    #[test]
    fn decimal_confuser_not_a_boundary() {
        let labels = label_boundaries("Pi is 3.14 exactly.");
        let boundary_positions: Vec<usize> =
            labels.iter().enumerate().filter(|(_, &l)| l == 1).map(|(i, _)| i).collect();
        assert_eq!(boundary_positions, vec![18]);
    }

    #[test]
    fn single_letters_still_bound() {
        let labels = label_boundaries("A. B.");
        let boundary_positions: Vec<usize> =
            labels.iter().enumerate().filter(|(_, &l)| l == 1).map(|(i, _)| i).collect();
        assert_eq!(boundary_positions, vec![1, 4]);
    }

    #[test]
    fn version_number_has_no_interior_boundary() {
        let labels = label_boundaries("v1.2 works");
        let interior: usize = labels[..labels.len() - 1].iter().map(|&l| l as usize).sum();
        assert_eq!(interior, 0);
        assert_eq!(*labels.last().unwrap(), 1, "document end is always a boundary");
    }

    #[test]
    fn abbreviation_periods_not_boundaries() {
        let labels = label_boundaries("ask dr. stone e.g. today.");
        let boundary_positions: Vec<usize> =
            labels.iter().enumerate().filter(|(_, &l)| l == 1).map(|(i, _)| i).collect();
        assert_eq!(boundary_positions, vec![24]);
    }

    #[test]
    fn generator_is_deterministic() {
        let a = gen_sentences(99, 5, (200, 400));
        let b = gen_sentences(99, 5, (200, 400));
        assert_eq!(a, b);
    }

    #[test]
    fn generator_labels_match_rule_oracle() {
        for doc in gen_sentences(7, 20, (100, 600)) {
            assert_eq!(doc.labels, label_boundaries(&doc.text), "doc: {}", doc.text);
        }
    }

    #[test]
    fn every_doc_ends_with_boundary_and_sane_rate() {
        let docs = gen_sentences(13, 50, (300, 900));
        for doc in &docs {
            assert_eq!(*doc.labels.last().unwrap(), 1);
        }
        let pos: usize =
            docs.iter().map(|d| d.labels.iter().filter(|&&l| l == 1).count()).sum();
        let total: usize = docs.iter().map(|d| d.labels.len()).sum();
        let overall = pos as f64 / total as f64;
        assert!((0.02..0.15).contains(&overall), "overall boundary rate {overall}");
    }

    #[test]
    fn passkey_depth_zero_puts_needle_early() {
        let s = gen_passkey(3, 2048, 0.0).unwrap();
        let pos = s.context.find(&s.needle).unwrap();
        assert!(pos < s.context.len() / 10, "needle at {pos} of {}", s.context.len());
    }

    #[test]
    fn passkey_depth_one_puts_needle_late() {
        let s = gen_passkey(4, 2048, 1.0).unwrap();
        let pos = s.context.find(&s.needle).unwrap();
        assert!(
            pos + s.needle.len() > s.context.len() * 9 / 10,
            "needle at {pos} of {}",
            s.context.len()
        );
    }

    #[test]
    fn passkey_needle_appears_exactly_once() {
        for seed in 0..20u64 {
            let s = gen_passkey(seed, 1024, (seed as f64) / 20.0).unwrap();
            assert_eq!(s.context.matches(&s.needle).count(), 1);
            assert_eq!(s.context.matches(NEEDLE_PREFIX).count(), 1);
            assert_eq!(s.answer.len(), 5);
        }
    }

    #[test]
    fn passkey_too_small_context_rejected() {
        assert!(gen_passkey(0, 100, 0.5).is_err());
    }

    #[test]
    fn batches_window_count_and_shift() {
        let doc = LabeledDoc {
            text: "abcdefghijklmnop".into(), // 16 tokens
            labels: vec![0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1],
        };
        let batches = make_batches(&[doc.clone()], 8, 1);
        // Windows need seqlen+1 = 9 tokens, stride 8: just one fits in 16.
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        for j in 0..7 {
            assert_eq!(b.targets[0][j], b.inputs[0][j + 1]);
        }
        assert_eq!(b.labels[0], doc.labels[..8]);

        // A 17-token doc yields exactly 2 windows.
        let doc2 = LabeledDoc { text: "abcdefghijklmnopq".into(), labels: vec![0; 17] };
        assert_eq!(make_batches(&[doc2], 8, 1).len(), 2);
    }

    #[test]
    fn batch_label_alignment_survives_windowing() {
        let docs = gen_sentences(21, 3, (400, 600));
        let batches = make_batches(&docs, 64, 1);
        // Reconstruct each window's labels from the unwindowed docs.
        let mut all: Vec<(usize, usize)> = Vec::new(); // (doc, start)
        for (d, doc) in docs.iter().enumerate() {
            let mut start = 0;
            while start + 65 <= doc.tokens().len() {
                all.push((d, start));
                start += 64;
            }
        }
        assert_eq!(all.len(), batches.len());
        for (batch, (d, start)) in batches.iter().zip(&all) {
            assert_eq!(batch.labels[0], docs[*d].labels[*start..start + 64]);
            assert_eq!(batch.inputs[0], docs[*d].tokens()[*start..start + 64]);
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let docs = gen_sentences(5, 4, (100, 200));
        let dir = std::env::temp_dir().join("chunkllm_corpus_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("docs.jsonl");
        write_jsonl(&path, &docs).unwrap();
        let back: Vec<LabeledDoc> = read_jsonl(&path).unwrap();
        assert_eq!(docs, back);
    }

    #[test]
    fn tokenizer_roundtrip() {
        let t = Tokenizer;
        let s = "mixed ascii and utf8: caf\u{e9}";
        assert_eq!(t.detokenize(&t.tokenize(s)), s);
    }

    #[test]
    fn pos_weight_reflects_imbalance() {
        let docs = gen_sentences(31, 20, (300, 700));
        let w = boundary_pos_weight(&docs);
        assert!(w > 5.0 && w < 500.0, "pos weight {w}");
    }
}
