//! Synthetic tasks and a byte-level corpus loader.
//!
//! Every sample is a pure function of `(spec, seed, index)`. Train and eval
//! sets are separated by hashing sample content, so an identical sequence can
//! never land on both sides.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    AssocRecall,
    Copy,
    CharLm,
}

fn default_eval_size() -> usize {
    256
}

fn default_eval_buckets() -> u8 {
    4
}

/// Task description as it appears in run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seq_len: usize,
    /// Token vocabulary; the byte vocabulary of the corpus for `char_lm`.
    #[serde(default)]
    pub vocab: usize,
    /// Key/value pairs per sequence (`assoc_recall`).
    #[serde(default)]
    pub pairs: usize,
    /// Spread pairs over the sequence with random gaps instead of packing
    /// them before the query (`assoc_recall`).
    #[serde(default)]
    pub scattered: bool,
    /// Payload length (`copy`); `seq_len` must be `2 * payload + 1`.
    #[serde(default)]
    pub payload: usize,
    /// Corpus file (`char_lm`).
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    /// Unsupervised left context of eval windows (`char_lm`).
    #[serde(default)]
    pub eval_context: usize,
    #[serde(default = "default_eval_size")]
    pub eval_size: usize,
    /// One in this many hash buckets is held out for evaluation.
    #[serde(default = "default_eval_buckets")]
    pub eval_buckets: u8,
    #[serde(default)]
    pub seed: u64,
}

impl TaskSpec {
    pub fn assoc_recall(vocab: usize, pairs: usize, seq_len: usize, seed: u64) -> Self {
        TaskSpec {
            kind: TaskKind::AssocRecall,
            seq_len,
            vocab,
            pairs,
            scattered: false,
            payload: 0,
            corpus: None,
            eval_context: 0,
            eval_size: default_eval_size(),
            eval_buckets: default_eval_buckets(),
            seed,
        }
    }

    pub fn copy(vocab: usize, payload: usize, seed: u64) -> Self {
        TaskSpec {
            kind: TaskKind::Copy,
            seq_len: 2 * payload + 1,
            payload,
            pairs: 0,
            ..TaskSpec::assoc_recall(vocab, 0, 0, seed)
        }
    }

    pub fn char_lm(corpus: PathBuf, seq_len: usize, eval_context: usize, seed: u64) -> Self {
        TaskSpec {
            kind: TaskKind::CharLm,
            seq_len,
            corpus: Some(corpus),
            eval_context,
            ..TaskSpec::assoc_recall(0, 0, 0, seed)
        }
    }
}

/// One supervised sequence. `targets[t]` is meaningful only where `mask[t]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Sample {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Sample {
    pub fn supervised(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.mask.len()).filter(|&t| self.mask[t])
    }

    fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for &x in &self.inputs {
            h.update((x as u64).to_le_bytes());
        }
        h.update([0xff]);
        for (&x, &m) in self.targets.iter().zip(&self.mask) {
            h.update((if m { x as u64 } else { u64::MAX }).to_le_bytes());
        }
        h.finalize().into()
    }
}

pub type Batch = Vec<Sample>;

/// Assoc-recall token layout: 0 pads, then keys, then values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecallVocab {
    pub keys: usize,
    pub values: usize,
}

impl RecallVocab {
    pub const PAD: usize = 0;

    pub fn new(vocab: usize) -> Self {
        let keys = vocab.saturating_sub(1) / 2;
        RecallVocab {
            keys,
            values: vocab.saturating_sub(1 + keys),
        }
    }

    pub fn key(&self, i: usize) -> usize {
        1 + i
    }

    pub fn value(&self, i: usize) -> usize {
        1 + self.keys + i
    }
}

fn check_recall(spec: &TaskSpec) -> Result<RecallVocab> {
    let rv = RecallVocab::new(spec.vocab);
    if spec.pairs == 0 {
        return Err(Error::Dataset(
            "assoc_recall needs at least one pair".into(),
        ));
    }
    if rv.keys < spec.pairs || rv.values == 0 {
        return Err(Error::Dataset(format!(
            "vocab {} has {} keys, too few for {} unique keys",
            spec.vocab, rv.keys, spec.pairs
        )));
    }
    if spec.seq_len < 2 * spec.pairs + 2 {
        return Err(Error::Dataset(format!(
            "seq_len {} is shorter than 2 * pairs + 2 = {}",
            spec.seq_len,
            2 * spec.pairs + 2
        )));
    }
    Ok(rv)
}

/// Assoc-recall sample from explicit pairs and a query index.
pub fn recall_sample(
    pairs: &[(usize, usize)],
    query: usize,
    starts: &[usize],
    seq_len: usize,
) -> Sample {
    let mut inputs = vec![RecallVocab::PAD; seq_len];
    for (&(k, v), &s) in pairs.iter().zip(starts) {
        inputs[s] = k;
        inputs[s + 1] = v;
    }
    inputs[seq_len - 1] = pairs[query].0;
    let mut targets = vec![0; seq_len];
    targets[seq_len - 1] = pairs[query].1;
    let mut mask = vec![false; seq_len];
    mask[seq_len - 1] = true;
    Sample {
        inputs,
        targets,
        mask,
    }
}

/// Pair start positions: packed just before the query, or spread with random
/// gaps over the whole prefix.
fn pair_starts(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let p = spec.pairs;
    let prefix = spec.seq_len - 1;
    if !spec.scattered {
        let first = prefix - 2 * p;
        return (0..p).map(|i| first + 2 * i).collect();
    }
    // Distribute the free slots into p + 1 gaps.
    let free = prefix - 2 * p;
    let mut cuts: Vec<usize> = (0..p).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    cuts.iter().enumerate().map(|(i, &c)| c + 2 * i).collect()
}

/// The `index`-th assoc-recall sample of the stream.
pub fn gen_assoc_recall(spec: &TaskSpec, index: u64) -> Result<Sample> {
    let rv = check_recall(spec)?;
    let mut rng = sample_rng(spec.seed, index);
    let mut keys: Vec<usize> = (0..rv.keys).collect();
    // Partial Fisher-Yates for unique keys.
    for i in 0..spec.pairs {
        let j = rng.random_range(i..keys.len());
        keys.swap(i, j);
    }
    let pairs: Vec<(usize, usize)> = keys[..spec.pairs]
        .iter()
        .map(|&k| (rv.key(k), rv.value(rng.random_range(0..rv.values))))
        .collect();
    let query = rng.random_range(0..spec.pairs);
    let starts = pair_starts(spec, &mut rng);
    Ok(recall_sample(&pairs, query, &starts, spec.seq_len))
}

/// Copy-task tokens: 0 blank, 1 separator, payload symbols from 2.
pub const COPY_BLANK: usize = 0;
pub const COPY_SEP: usize = 1;

/// `payload ++ [SEP] ++ blanks`, supervised on the echo region.
pub fn encode_copy(payload: &[usize]) -> Sample {
    let p = payload.len();
    let mut inputs = payload.to_vec();
    inputs.push(COPY_SEP);
    inputs.extend(std::iter::repeat_n(COPY_BLANK, p));
    let mut targets = vec![0; 2 * p + 1];
    targets[p + 1..].copy_from_slice(payload);
    let mask = (0..2 * p + 1).map(|t| t > p).collect();
    Sample {
        inputs,
        targets,
        mask,
    }
}

/// Inverse of [`encode_copy`]; `None` if the sample is not a copy sample.
pub fn decode_copy(sample: &Sample) -> Option<Vec<usize>> {
    let n = sample.inputs.len();
    if n.is_multiple_of(2) {
        return None;
    }
    let p = n / 2;
    if sample.inputs[p] != COPY_SEP || sample.inputs[p + 1..].iter().any(|&x| x != COPY_BLANK) {
        return None;
    }
    let payload = sample.inputs[..p].to_vec();
    (encode_copy(&payload) == *sample).then_some(payload)
}

pub fn gen_copy(spec: &TaskSpec, index: u64) -> Result<Sample> {
    if spec.payload == 0 || spec.seq_len != 2 * spec.payload + 1 {
        return Err(Error::Dataset(format!(
            "copy needs seq_len = 2 * payload + 1 (payload {}, seq_len {})",
            spec.payload, spec.seq_len
        )));
    }
    if spec.vocab < 3 {
        return Err(Error::Dataset("copy needs vocab >= 3".into()));
    }
    let mut rng = sample_rng(spec.seed, index);
    let payload: Vec<usize> = (0..spec.payload)
        .map(|_| rng.random_range(2..spec.vocab))
        .collect();
    Ok(encode_copy(&payload))
}

/// Byte corpus with its sorted distinct-byte vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharCorpus {
    pub vocab: Vec<u8>,
    pub ids: Vec<usize>,
}

impl CharCorpus {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Dataset("corpus is empty".into()));
        }
        let mut seen = [false; 256];
        bytes.iter().for_each(|&b| seen[b as usize] = true);
        let vocab: Vec<u8> = (0..=255u8).filter(|&b| seen[b as usize]).collect();
        let mut index = [0usize; 256];
        for (i, &b) in vocab.iter().enumerate() {
            index[b as usize] = i;
        }
        let ids = bytes.iter().map(|&b| index[b as usize]).collect();
        Ok(CharCorpus { vocab, ids })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<u8> {
        ids.iter().map(|&i| self.vocab[i]).collect()
    }

    /// Start offsets of non-overlapping windows tiling the corpus; the last
    /// window may be shorter.
    pub fn window_starts(&self, len: usize) -> Vec<usize> {
        (0..self.ids.len()).step_by(len.max(1)).collect()
    }

    /// Window `[start, start + len)` with next-byte targets and `context`
    /// unsupervised tokens on the left.
    pub fn window(&self, start: usize, len: usize, context: usize) -> Sample {
        let end = (start + len).min(self.ids.len());
        let from = start.saturating_sub(context);
        let inputs = self.ids[from..end].to_vec();
        let mut targets = vec![0; inputs.len()];
        let mut mask = vec![false; inputs.len()];
        for t in 0..inputs.len() {
            let pos = from + t;
            if pos >= start && pos + 1 < self.ids.len() {
                targets[t] = self.ids[pos + 1];
                mask[t] = true;
            }
        }
        Sample {
            inputs,
            targets,
            mask,
        }
    }
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Train/eval assignment from the content hash.
pub fn is_eval(sample: &Sample, buckets: u8) -> bool {
    buckets > 0 && sample.digest()[0].is_multiple_of(buckets)
}

fn is_eval_index(index: usize, buckets: u8) -> bool {
    let d = Sha256::digest((index as u64).to_le_bytes());
    buckets > 0 && d[0] % buckets == 0
}

/// A materialised task: deterministic training batches plus a fixed eval set.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub spec: TaskSpec,
    /// Model vocabulary (input and output).
    pub vocab: usize,
    corpus: Option<CharCorpus>,
    train_windows: Vec<usize>,
    eval: Vec<Sample>,
}

impl TaskData {
    pub fn new(spec: &TaskSpec) -> Result<Self> {
        let mut data = TaskData {
            spec: spec.clone(),
            vocab: spec.vocab,
            corpus: None,
            train_windows: Vec::new(),
            eval: Vec::new(),
        };
        match spec.kind {
            TaskKind::AssocRecall | TaskKind::Copy => {
                data.generate(0)?;
                let mut index = 0u64;
                let limit = (spec.eval_size as u64 + 1) * 1000;
                while data.eval.len() < spec.eval_size && index < limit {
                    let s = data.generate(index)?;
                    if is_eval(&s, spec.eval_buckets) {
                        data.eval.push(s);
                    }
                    index += 1;
                }
            }
            TaskKind::CharLm => {
                let path = spec
                    .corpus
                    .as_ref()
                    .ok_or_else(|| Error::Dataset("char_lm needs a corpus path".into()))?;
                let corpus = CharCorpus::load(path)?;
                data.vocab = corpus.vocab.len();
                let starts = corpus.window_starts(spec.seq_len);
                let (eval, train): (Vec<_>, Vec<_>) = starts
                    .iter()
                    .enumerate()
                    .partition(|(i, _)| is_eval_index(*i, spec.eval_buckets));
                data.train_windows = train.into_iter().map(|(_, &s)| s).collect();
                if data.train_windows.is_empty() {
                    data.train_windows = starts.clone();
                }
                data.eval = eval
                    .into_iter()
                    .take(spec.eval_size)
                    .map(|(_, &s)| corpus.window(s, spec.seq_len, spec.eval_context))
                    .filter(|w| w.mask.iter().any(|&m| m))
                    .collect();
                data.corpus = Some(corpus);
            }
        }
        Ok(data)
    }

    pub fn corpus(&self) -> Option<&CharCorpus> {
        self.corpus.as_ref()
    }

    /// Longest sequence the task produces.
    pub fn max_len(&self) -> usize {
        match self.spec.kind {
            TaskKind::CharLm => self.spec.seq_len + self.spec.eval_context,
            _ => self.spec.seq_len,
        }
    }

    fn generate(&self, index: u64) -> Result<Sample> {
        match self.spec.kind {
            TaskKind::AssocRecall => gen_assoc_recall(&self.spec, index),
            TaskKind::Copy => gen_copy(&self.spec, index),
            TaskKind::CharLm => Err(Error::Dataset("char_lm has no generator".into())),
        }
    }

    /// Training batch `step`; a pure function of `(spec, step)`.
    pub fn train_batch(&self, step: u64, size: usize) -> Result<Batch> {
        let mut out = Vec::with_capacity(size);
        match &self.corpus {
            Some(corpus) => {
                let mut rng = sample_rng(self.spec.seed ^ 0x5eed, step);
                for _ in 0..size {
                    let start = self.train_windows[rng.random_range(0..self.train_windows.len())];
                    out.push(corpus.window(start, self.spec.seq_len, 0));
                }
            }
            None => {
                // Training indices live in a range disjoint from eval generation;
                // content hashing keeps eval samples out regardless.
                let mut index = (1u64 << 40) + step * size as u64 * 2;
                let mut rejected = 0;
                while out.len() < size {
                    let s = self.generate(index)?;
                    if !is_eval(&s, self.spec.eval_buckets) {
                        out.push(s);
                    } else {
                        rejected += 1;
                        if rejected > 1000 * size {
                            return Err(Error::Dataset(
                                "task space too small for a train split".into(),
                            ));
                        }
                    }
                    index += 1;
                }
            }
        }
        Ok(out)
    }

    pub fn eval_set(&self) -> &[Sample] {
        &self.eval
    }
}
