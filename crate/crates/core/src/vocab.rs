//! Value vocabularies: ordered positive token values plus PAD/SOS/EOS.
//!
//! Three construction strategies: the dynamic-percentile erosion
//! algorithm, doubling from a base unit, and hand-picked values.

use crate::codec;
use crate::error::{GrError, Result};
use crate::fingerprint::fingerprint_f64s;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const PAD_ID: u32 = 0;
pub const SOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
/// Value tokens occupy ids FIRST_VALUE_ID .. FIRST_VALUE_ID + V.
pub const FIRST_VALUE_ID: u32 = 3;

/// Relative tolerance used by vocabulary construction and the codec
/// round-trip stopping rule.
pub const RELATIVE_TOLERANCE: f64 = 0.001;

/// A token value "fits" a residual when it is at most the residual plus
/// this slack, which absorbs binary-representation dust from repeated
/// subtraction of decimal-grid values.
pub fn fit_slack(r: f64) -> f64 {
    1e-9 * r.abs().max(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Dynamic,
    Binary,
    Manual,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VocabMeta {
    pub q_start: Option<f64>,
    pub q_end: Option<f64>,
    pub alpha: Option<f64>,
    pub eps: Option<f64>,
    pub resolution: Option<f64>,
    pub source_fingerprint: String,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DynamicParams {
    pub q_start: f64,
    pub q_end: f64,
    pub alpha: f64,
    pub eps: f64,
    pub resolution: f64,
    pub max_iters: usize,
}

impl Default for DynamicParams {
    fn default() -> Self {
        DynamicParams {
            q_start: 99.0,
            q_end: 50.0,
            alpha: 0.95,
            eps: RELATIVE_TOLERANCE,
            resolution: 0.01,
            max_iters: 128,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ValueVocabulary {
    /// Strictly decreasing positive token values; index i maps to token
    /// id FIRST_VALUE_ID + i.
    values: Vec<f64>,
    strategy: Strategy,
    meta: VocabMeta,
}

impl ValueVocabulary {
    fn from_values(mut values: Vec<f64>, strategy: Strategy, meta: VocabMeta) -> Result<Self> {
        if values.is_empty() {
            return Err(GrError::Vocab("vocabulary has no value tokens".into()));
        }
        values.sort_by(|a, b| b.partial_cmp(a).expect("finite token values"));
        for w in values.windows(2) {
            if w[0] <= w[1] {
                return Err(GrError::Vocab(format!(
                    "token values must be strictly decreasing and unique; saw {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if *values.last().unwrap() <= 0.0 {
            return Err(GrError::Vocab("token values must be positive".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GrError::Vocab("token values must be finite".into()));
        }
        Ok(ValueVocabulary {
            values,
            strategy,
            meta,
        })
    }

    pub fn num_value_tokens(&self) -> usize {
        self.values.len()
    }

    /// Full model vocabulary size including the three special tokens.
    pub fn vocab_size(&self) -> usize {
        self.values.len() + FIRST_VALUE_ID as usize
    }

    /// Token values in strictly decreasing order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn meta(&self) -> &VocabMeta {
        &self.meta
    }

    pub fn id_for_index(&self, index: usize) -> u32 {
        FIRST_VALUE_ID + index as u32
    }

    pub fn index_of_id(&self, id: u32) -> Option<usize> {
        if id >= FIRST_VALUE_ID && (id as usize) < self.vocab_size() {
            Some((id - FIRST_VALUE_ID) as usize)
        } else {
            None
        }
    }

    pub fn is_value_id(&self, id: u32) -> bool {
        self.index_of_id(id).is_some()
    }

    /// Decode value g(id): 0 for PAD/SOS/EOS, the token value otherwise.
    pub fn value_of(&self, id: u32) -> Result<f64> {
        if id < FIRST_VALUE_ID {
            return Ok(0.0);
        }
        self.index_of_id(id)
            .map(|i| self.values[i])
            .ok_or_else(|| GrError::Vocab(format!("unknown token id {id}")))
    }

    /// Index of the largest token value that fits `residual`, if any.
    pub fn largest_token_at_most(&self, residual: f64) -> Option<usize> {
        let limit = residual + fit_slack(residual);
        let i = self.values.partition_point(|&v| v > limit);
        if i < self.values.len() {
            Some(i)
        } else {
            None
        }
    }

    // ── persistence ─────────────────────────────────────────────────────

    pub fn to_json_string(&self) -> String {
        let file = VocabFile {
            format_version: FORMAT_VERSION,
            strategy: self.strategy,
            value_tokens: self.values.clone(),
            special: SpecialIds::default(),
            meta: self.meta.clone(),
        };
        serde_json::to_string_pretty(&file).expect("vocabulary serialization")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string() + "\n")?;
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)
            .map_err(|e| GrError::Format(format!("vocabulary file: {e}")))?;
        if file.format_version != FORMAT_VERSION {
            return Err(GrError::Format(format!(
                "unknown vocabulary format_version {}",
                file.format_version
            )));
        }
        if file.special.pad != PAD_ID || file.special.sos != SOS_ID || file.special.eos != EOS_ID {
            return Err(GrError::Format("unexpected special token ids".into()));
        }
        for w in file.value_tokens.windows(2) {
            if w[0] <= w[1] {
                return Err(GrError::Format(
                    "value_tokens must be strictly decreasing".into(),
                ));
            }
        }
        ValueVocabulary::from_values(file.value_tokens, file.strategy, file.meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }
}

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SpecialIds {
    pad: u32,
    sos: u32,
    eos: u32,
}

impl Default for SpecialIds {
    fn default() -> Self {
        SpecialIds {
            pad: PAD_ID,
            sos: SOS_ID,
            eos: EOS_ID,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    format_version: u32,
    strategy: Strategy,
    value_tokens: Vec<f64>,
    special: SpecialIds,
    meta: VocabMeta,
}

// ── construction ────────────────────────────────────────────────────────

/// Interpolated percentile of `xs`: the value below which q% of the
/// multiset falls (linear interpolation between order statistics).
fn percentile(sorted_ascending: &[f64], q: f64) -> f64 {
    let n = sorted_ascending.len();
    if n == 1 {
        return sorted_ascending[0];
    }
    let rank = q / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted_ascending[lo] + frac * (sorted_ascending[hi] - sorted_ascending[lo])
}

fn round_to_resolution(x: f64, resolution: f64) -> f64 {
    (x / resolution).round() * resolution
}

/// Dynamic-percentile erosion: repeatedly take the (decaying) q-percentile
/// of the residual multiset as a new token, subtract it from every
/// residual at least that large, until the worst relative residual drops
/// to `eps` or the percentile reaches zero.
pub fn build_dynamic(targets: &[f64], params: DynamicParams) -> Result<ValueVocabulary> {
    if targets.is_empty() {
        return Err(GrError::Vocab("cannot build vocabulary from no targets".into()));
    }
    if targets.iter().any(|y| !y.is_finite() || *y < 0.0) {
        return Err(GrError::Vocab("targets must be finite and nonnegative".into()));
    }
    if targets.iter().all(|y| *y == 0.0) {
        return Err(GrError::Vocab("degenerate targets: all zero".into()));
    }
    if !(params.q_end > 0.0 && params.q_end <= params.q_start && params.q_start <= 100.0) {
        return Err(GrError::Vocab(format!(
            "require 0 < q_end <= q_start <= 100, got q_start={} q_end={}",
            params.q_start, params.q_end
        )));
    }
    if !(params.alpha > 0.0 && params.alpha <= 1.0) {
        return Err(GrError::Vocab(format!("require 0 < alpha <= 1, got {}", params.alpha)));
    }
    if params.eps <= 0.0 || params.resolution <= 0.0 || params.max_iters == 0 {
        return Err(GrError::Vocab("eps, resolution and max_iters must be positive".into()));
    }

    let mut residuals = targets.to_vec();
    let mut tokens: Vec<f64> = Vec::new();
    let mut err = f64::INFINITY;
    let mut q = params.q_start;
    let mut iter = 0usize;

    while err > params.eps {
        iter += 1;
        if iter > params.max_iters {
            return Err(GrError::Vocab(format!(
                "eps {} not reached within {} iterations; final err {err}",
                params.eps, params.max_iters
            )));
        }
        let mut sorted = residuals.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let o = round_to_resolution(percentile(&sorted, q), params.resolution);
        if o <= 0.0 {
            break;
        }
        // Duplicate percentile values skip insertion but still subtract.
        if !tokens.contains(&o) {
            tokens.push(o);
        }
        for r in residuals.iter_mut() {
            if *r + fit_slack(*r) >= o {
                *r = (*r - o).max(0.0);
            }
        }
        err = residuals
            .iter()
            .zip(targets)
            .map(|(r, y)| if *y > 0.0 { r / y } else { 0.0 })
            .fold(0.0, f64::max);
        q = (q * params.alpha).max(params.q_end);
    }

    if tokens.is_empty() {
        return Err(GrError::Vocab(
            "erosion produced no tokens (percentile hit zero immediately)".into(),
        ));
    }
    ValueVocabulary::from_values(
        tokens,
        Strategy::Dynamic,
        VocabMeta {
            q_start: Some(params.q_start),
            q_end: Some(params.q_end),
            alpha: Some(params.alpha),
            eps: Some(params.eps),
            resolution: Some(params.resolution),
            source_fingerprint: fingerprint_f64s(targets),
        },
    )
}

/// Doubling vocabulary: unit, 2*unit, 4*unit, ... until exceeding y_max
/// (the first exceeding value is included).
pub fn build_binary(y_max: f64, unit: f64) -> Result<ValueVocabulary> {
    if !(y_max >= unit && unit > 0.0) {
        return Err(GrError::Vocab(format!(
            "require y_max >= unit > 0, got y_max={y_max} unit={unit}"
        )));
    }
    let mut tokens = vec![unit];
    let mut v = unit;
    while v <= y_max {
        v *= 2.0;
        tokens.push(v);
    }
    ValueVocabulary::from_values(
        tokens,
        Strategy::Binary,
        VocabMeta {
            q_start: None,
            q_end: None,
            alpha: None,
            eps: None,
            resolution: None,
            source_fingerprint: fingerprint_f64s(&[y_max, unit]),
        },
    )
}

/// Hand-picked vocabulary from explicit positive unique values.
pub fn build_manual(values: &[f64]) -> Result<ValueVocabulary> {
    if values.is_empty() {
        return Err(GrError::Vocab("manual vocabulary needs at least one value".into()));
    }
    if values.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(GrError::Vocab("manual token values must be positive and finite".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(GrError::Vocab("manual token values must be unique".into()));
    }
    ValueVocabulary::from_values(
        values.to_vec(),
        Strategy::Manual,
        VocabMeta {
            q_start: None,
            q_end: None,
            alpha: None,
            eps: None,
            resolution: None,
            source_fingerprint: fingerprint_f64s(values),
        },
    )
}

// ── token frequency ─────────────────────────────────────────────────────

/// Usage counts of each value token over greedy encodings of a target set.
#[derive(Clone, Debug)]
pub struct FrequencyReport {
    /// `counts[i]` is the usage count of vocabulary index i.
    pub counts: Vec<u64>,
}

impl FrequencyReport {
    /// (token value, count) pairs sorted by descending count.
    pub fn top_k(&self, vocab: &ValueVocabulary, k: usize) -> Vec<(f64, u64)> {
        let mut pairs: Vec<(f64, u64)> = vocab
            .values()
            .iter()
            .copied()
            .zip(self.counts.iter().copied())
            .collect();
        pairs.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.partial_cmp(&b.0).unwrap()));
        pairs.truncate(k);
        pairs
    }

    /// Max count over median count; infinite when the median is zero.
    /// Lower means a more balanced token distribution.
    pub fn max_median_ratio(&self) -> f64 {
        let max = *self.counts.iter().max().unwrap_or(&0) as f64;
        let mut sorted: Vec<u64> = self.counts.clone();
        sorted.sort_unstable();
        let n = sorted.len();
        if n == 0 {
            return 0.0;
        }
        let median = if n % 2 == 1 {
            sorted[n / 2] as f64
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
        };
        if median == 0.0 {
            f64::INFINITY
        } else {
            max / median
        }
    }
}

/// Count value-token usage over greedy encodings of all targets.
pub fn token_frequency(targets: &[f64], vocab: &ValueVocabulary, t_max: usize) -> Result<FrequencyReport> {
    let mut counts = vec![0u64; vocab.num_value_tokens()];
    for &y in targets {
        let seq = codec::encode(y, vocab, t_max)?;
        for id in &seq.ids {
            let idx = vocab
                .index_of_id(*id)
                .ok_or_else(|| GrError::Vocab(format!("unknown token id {id}")))?;
            counts[idx] += 1;
        }
    }
    Ok(FrequencyReport { counts })
}
