//! Training: composite CE + Huber loss under teacher forcing, and the
//! two-pass curriculum that swaps ground-truth inputs for mixup
//! embeddings of the model's own first-pass predictions at a scheduled
//! rate.

use crate::codec;
use crate::data::{Dataset, Standardizer};
use crate::error::{GrError, Result};
use crate::inference;
use crate::metrics;
use crate::model::{
    bind_params, collect_grads, decoder_forward, decoder_forward_embedded, encoder_forward,
    init_params, BoundParams, ModelConfig, ModelParams,
};
use crate::optim::{adam_step_refs, AdamConfig, AdamState};
use crate::rng::{Rng, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::{ValueVocabulary, EOS_ID, FIRST_VALUE_ID, SOS_ID};
use serde::{Deserialize, Serialize};

// ── sampling-rate schedules ─────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayStrategy {
    /// p = p0 * w / (w + e^(tau/w)): smooth inverse-sigmoid descent.
    Sigmoid,
    Linear,
    Exponential,
    Fixed,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub strategy: DecayStrategy,
    pub p0: f64,
    pub omega: f64,
    pub linear_slope: f64,
    pub exp_rate: f64,
    pub fixed_value: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            strategy: DecayStrategy::Sigmoid,
            p0: 1.0,
            omega: 200.0,
            linear_slope: 1e-3,
            exp_rate: 1e-3,
            fixed_value: 0.5,
        }
    }
}

impl ScheduleConfig {
    pub fn fixed(p: f64) -> Self {
        ScheduleConfig {
            strategy: DecayStrategy::Fixed,
            fixed_value: p,
            ..ScheduleConfig::default()
        }
    }
}

/// Ground-truth sampling rate at training iteration `tau`, clamped to
/// [0, 1].
pub fn sampling_rate(cfg: &ScheduleConfig, tau: u64) -> f64 {
    let t = tau as f64;
    let p = match cfg.strategy {
        DecayStrategy::Sigmoid => {
            let w = cfg.omega;
            cfg.p0 * w / (w + (t / w).exp())
        }
        DecayStrategy::Linear => cfg.p0 - cfg.linear_slope * t,
        DecayStrategy::Exponential => cfg.p0 * (-cfg.exp_rate * t).exp(),
        DecayStrategy::Fixed => cfg.fixed_value,
    };
    p.clamp(0.0, 1.0)
}

/// Solve for omega so the sigmoid schedule lands near `p_end` at the
/// final step. Monotone in omega, so bisection suffices.
pub fn omega_for(p0: f64, total_steps: usize, p_end: f64) -> Result<f64> {
    if !(p_end > 0.0 && p_end < p0) {
        return Err(GrError::Train(format!(
            "omega_for requires 0 < p_end < p0, got p0={p0} p_end={p_end}"
        )));
    }
    let s = total_steps.max(1) as f64;
    let eval = |w: f64| p0 * w / (w + (s / w).exp());
    let (mut lo, mut hi) = (1e-3, 1e9);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if eval(mid) < p_end {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

// ── loss building blocks ────────────────────────────────────────────────

/// Huber loss value: quadratic inside the threshold, linear outside.
pub fn huber(y: f64, y_hat: f64, delta: f64) -> f64 {
    let d = (y - y_hat).abs();
    if d <= delta {
        0.5 * d * d
    } else {
        delta * (d - 0.5 * delta)
    }
}

/// ce + lambda * huber.
pub fn composite_loss(ce: f64, huber_value: f64, lambda: f64) -> f64 {
    ce + lambda * huber_value
}

/// Window-softmax fusion of neighbor token embeddings around a predicted
/// token. The window covers value-token ids within floor(n_w/2) of the
/// prediction, clamped to the value range; its softmax over the step
/// logits re-weights the embedding rows, and gradients flow through
/// those weights back into the logits. Special-token predictions skip
/// the mixup and use their raw embedding row.
pub fn embedding_mixup(
    tape: &mut Tape,
    step_logits: Var,
    embedding: Var,
    predicted_id: u32,
    n_w: usize,
) -> Result<Var> {
    let vocab_size = tape.value(step_logits).cols();
    if tape.value(step_logits).rows() != 1 {
        return Err(GrError::Train("embedding_mixup expects a 1xV logits row".into()));
    }
    if predicted_id as usize >= vocab_size {
        return Err(GrError::Train(format!(
            "predicted id {predicted_id} out of range for vocab size {vocab_size}"
        )));
    }
    if predicted_id < FIRST_VALUE_ID {
        return tape.embed(embedding, &[predicted_id]);
    }
    let b = n_w / 2;
    let idx = predicted_id as usize;
    let lo = idx.saturating_sub(b).max(FIRST_VALUE_ID as usize);
    let hi = (idx + b).min(vocab_size - 1);
    if lo == hi {
        return tape.embed(embedding, &[predicted_id]);
    }
    let len = hi - lo + 1;
    let window = tape.slice_cols(step_logits, lo, len)?;
    let sigma = tape.softmax(window);
    let rows = tape.slice_rows(embedding, lo, len)?;
    tape.matmul(sigma, rows)
}

// ── encoded samples ─────────────────────────────────────────────────────

/// One training sample after standardization and label encoding.
#[derive(Clone, Debug)]
pub struct EncodedSample {
    pub features: Vec<f64>,
    pub y: f64,
    /// [SOS, v1..vk]
    pub input_ids: Vec<u32>,
    /// [v1..vk, EOS]
    pub target_ids: Vec<u32>,
}

pub fn encode_sample(features: Vec<f64>, y: f64, vocab: &ValueVocabulary, t_max: usize) -> Result<EncodedSample> {
    let seq = codec::encode(y, vocab, t_max)?;
    let mut input_ids = Vec::with_capacity(seq.len() + 1);
    input_ids.push(SOS_ID);
    input_ids.extend(&seq.ids);
    let mut target_ids = Vec::with_capacity(seq.len() + 1);
    target_ids.extend(&seq.ids);
    target_ids.push(EOS_ID);
    Ok(EncodedSample {
        features,
        y,
        input_ids,
        target_ids,
    })
}

pub fn encode_dataset(dataset: &Dataset, vocab: &ValueVocabulary, t_max: usize) -> Result<Vec<EncodedSample>> {
    dataset
        .features
        .iter()
        .zip(&dataset.targets)
        .map(|(x, y)| encode_sample(x.clone(), *y, vocab, t_max))
        .collect()
}

/// Column of decode values g(id), zero for specials; used by the soft
/// expected-value surrogate inside the Huber term.
pub fn decode_value_column(vocab: &ValueVocabulary) -> Tensor {
    let n = vocab.vocab_size();
    let mut g = Tensor::zeros(n, 1);
    for id in 0..n as u32 {
        g.data_mut()[id as usize] = vocab.value_of(id).unwrap_or(0.0);
    }
    g
}

// ── per-sample loss graphs ──────────────────────────────────────────────

/// Handles to the loss node and its components on a sample's graph.
pub struct SampleLoss {
    pub loss: Var,
    pub ce1: Var,
    pub ce2: Var,
    pub huber: Var,
}

/// Soft decoded value: sum over positions of expected token value under
/// the step distribution. Differentiable stand-in for the hard argmax
/// decode inside the Huber term.
fn soft_decode(tape: &mut Tape, logits: Var, g_col: Var) -> Result<Var> {
    let probs = tape.softmax(logits);
    let per_step = tape.matmul(probs, g_col)?;
    Ok(tape.sum_all(per_step))
}

pub fn teacher_forcing_loss(
    tape: &mut Tape,
    bound: &BoundParams,
    sample: &EncodedSample,
    g_col: Var,
    lambda: f64,
    delta: f64,
) -> Result<SampleLoss> {
    let x = tape.constant(Tensor::row_vector(sample.features.clone()));
    let h = encoder_forward(tape, x, bound)?;
    let logits = decoder_forward(tape, h, &sample.input_ids, bound)?;
    let weights = vec![1.0; sample.target_ids.len()];
    let ce = tape.seq_cross_entropy(logits, &sample.target_ids, &weights)?;
    let y_soft = soft_decode(tape, logits, g_col)?;
    let hub = tape.huber(y_soft, sample.y, delta)?;
    let hub_scaled = tape.scale(hub, lambda);
    let loss = tape.add(ce, hub_scaled)?;
    Ok(SampleLoss {
        loss,
        ce1: ce,
        ce2: ce,
        huber: hub,
    })
}

/// Two decoder passes sharing parameters: the first teacher-forced pass
/// yields predictions and their step logits; the second pass re-runs the
/// decoder with each non-SOS input drawn (per prepared coin flip)
/// between the ground-truth embedding and the mixup embedding of the
/// first-pass prediction. Loss: mean of both CE terms plus the scaled
/// Huber on the second pass. When every draw keeps ground truth and no
/// ground-truth mixup is requested, the second pass would recompute the
/// first bit-for-bit, so it is shared instead of rebuilt.
#[allow(clippy::too_many_arguments)]
pub fn curriculum_loss(
    tape: &mut Tape,
    bound: &BoundParams,
    sample: &EncodedSample,
    g_col: Var,
    draws: &[bool],
    lambda: f64,
    delta: f64,
    n_w: usize,
    mixup_ground_truth: bool,
    forced_preds: Option<&[u32]>,
) -> Result<SampleLoss> {
    let x = tape.constant(Tensor::row_vector(sample.features.clone()));
    let h = encoder_forward(tape, x, bound)?;
    let logits1 = decoder_forward(tape, h, &sample.input_ids, bound)?;
    let weights = vec![1.0; sample.target_ids.len()];
    let ce1 = tape.seq_cross_entropy(logits1, &sample.target_ids, &weights)?;

    let degenerate = draws.iter().all(|d| *d) && !mixup_ground_truth;
    if degenerate {
        let y_soft = soft_decode(tape, logits1, g_col)?;
        let hub = tape.huber(y_soft, sample.y, delta)?;
        let hub_scaled = tape.scale(hub, lambda);
        let loss = tape.add(ce1, hub_scaled)?;
        return Ok(SampleLoss {
            loss,
            ce1,
            ce2: ce1,
            huber: hub,
        });
    }

    let t_in = sample.input_ids.len();
    debug_assert_eq!(draws.len(), t_in - 1);
    let mut rows = Vec::with_capacity(t_in);
    rows.push(tape.embed(bound.embedding, &[SOS_ID])?);
    for pos in 1..t_in {
        let step = pos - 1;
        let step_logits = tape.slice_rows(logits1, step, 1)?;
        let row = if draws[step] {
            if mixup_ground_truth {
                embedding_mixup(tape, step_logits, bound.embedding, sample.input_ids[pos], n_w)?
            } else {
                tape.embed(bound.embedding, &[sample.input_ids[pos]])?
            }
        } else {
            let pred = match forced_preds {
                Some(ids) => ids[step],
                None => argmax_row(tape.value(step_logits).row(0)),
            };
            embedding_mixup(tape, step_logits, bound.embedding, pred, n_w)?
        };
        rows.push(row);
    }
    let x2 = tape.stack_rows(&rows)?;
    let logits2 = decoder_forward_embedded(tape, h, x2, bound)?;
    let ce2 = tape.seq_cross_entropy(logits2, &sample.target_ids, &weights)?;
    let y_soft = soft_decode(tape, logits2, g_col)?;
    let hub = tape.huber(y_soft, sample.y, delta)?;

    let ce_sum = tape.add(ce1, ce2)?;
    let ce_avg = tape.scale(ce_sum, 0.5);
    let hub_scaled = tape.scale(hub, lambda);
    let loss = tape.add(ce_avg, hub_scaled)?;
    Ok(SampleLoss {
        loss,
        ce1,
        ce2,
        huber: hub,
    })
}

fn argmax_row(row: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

// ── batch steps ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct LossBreakdown {
    pub ce1: f64,
    pub ce2: f64,
    pub huber: f64,
    pub total: f64,
}

pub struct StepOutput {
    pub loss: LossBreakdown,
    /// Mean gradients in canonical parameter order.
    pub grads: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub delta: f64,
    pub mixup_window: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub eval_interval: usize,
    pub seed: u64,
    pub clem_enabled: bool,
    /// Apply mixup to ground-truth-selected inputs too (the
    /// mixup-with-full-teacher-forcing ablation).
    pub mixup_ground_truth: bool,
    pub schedule: ScheduleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            delta: 1.0,
            mixup_window: 2,
            learning_rate: 1e-3,
            batch_size: 32,
            steps: 2000,
            eval_interval: 200,
            seed: 0,
            clem_enabled: true,
            mixup_ground_truth: false,
            schedule: ScheduleConfig::default(),
        }
    }
}

fn accumulate_batch<F>(
    batch: &[&EncodedSample],
    params: &ModelParams,
    vocab: &ValueVocabulary,
    mut build: F,
) -> Result<StepOutput>
where
    F: FnMut(&mut Tape, &BoundParams, &EncodedSample, Var) -> Result<SampleLoss>,
{
    if batch.is_empty() {
        return Err(GrError::Train("empty batch".into()));
    }
    let g_col_value = decode_value_column(vocab);
    let mut grads: Option<Vec<Tensor>> = None;
    let mut sums = LossBreakdown::default();
    for sample in batch {
        let mut tape = Tape::new();
        let bound = bind_params(params, &mut tape, true);
        let g_col = tape.constant(g_col_value.clone());
        let built = build(&mut tape, &bound, sample, g_col)?;
        tape.backward(built.loss)?;
        let sample_grads = collect_grads(&bound, &tape, params);
        match grads.as_mut() {
            None => grads = Some(sample_grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&sample_grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
        sums.ce1 += tape.value(built.ce1).item();
        sums.ce2 += tape.value(built.ce2).item();
        sums.huber += tape.value(built.huber).item();
        sums.total += tape.value(built.loss).item();
    }
    let b = batch.len() as f64;
    let mut grads = grads.expect("non-empty batch");
    for g in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|v| *v /= b);
    }
    Ok(StepOutput {
        loss: LossBreakdown {
            ce1: sums.ce1 / b,
            ce2: sums.ce2 / b,
            huber: sums.huber / b,
            total: sums.total / b,
        },
        grads,
    })
}

/// One optimization step on ground-truth inputs only.
pub fn train_step_teacher_forcing(
    batch: &[&EncodedSample],
    params: &ModelParams,
    vocab: &ValueVocabulary,
    cfg: &TrainConfig,
) -> Result<StepOutput> {
    accumulate_batch(batch, params, vocab, |tape, bound, sample, g_col| {
        teacher_forcing_loss(tape, bound, sample, g_col, cfg.lambda, cfg.delta)
    })
}

/// One two-pass curriculum step. Per-position coin flips with
/// probability `p` of keeping the ground-truth token are drawn up front
/// (sample-major, position-minor) so the step is reproducible.
pub fn train_step_clem(
    batch: &[&EncodedSample],
    params: &ModelParams,
    vocab: &ValueVocabulary,
    cfg: &TrainConfig,
    p: f64,
    rng: &mut Rng,
) -> Result<StepOutput> {
    let draws: Vec<Vec<bool>> = batch
        .iter()
        .map(|s| (1..s.input_ids.len()).map(|_| rng.bernoulli(p)).collect())
        .collect();
    let mut i = 0usize;
    accumulate_batch(batch, params, vocab, move |tape, bound, sample, g_col| {
        let d = &draws[i];
        i += 1;
        curriculum_loss(
            tape,
            bound,
            sample,
            g_col,
            d,
            cfg.lambda,
            cfg.delta,
            cfg.mixup_window,
            cfg.mixup_ground_truth,
            None,
        )
    })
}

// ── training loop ───────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub ce1: f64,
    pub ce2: f64,
    pub huber: f64,
    pub p: f64,
    pub val_mae: Option<f64>,
    pub val_xauc: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters at the best validation MAE.
    pub params: ModelParams,
    pub standardizer: Standardizer,
    pub log: Vec<MetricsRecord>,
    pub best_val_mae: f64,
    pub best_step: usize,
    /// Mixup window the checkpoint should carry into inference:
    /// the training window when the curriculum ran, zero otherwise.
    pub inference_mixup_window: usize,
}

pub const XAUC_EVAL_PAIRS: usize = 100_000;

/// Full training run: epoch-shuffled batches, schedule-driven sampling
/// rate, periodic validation, best-MAE checkpointing. Fully seeded; a
/// non-finite loss aborts with a diagnostic.
pub fn train(
    train_ds: &Dataset,
    val_ds: &Dataset,
    vocab: &ValueVocabulary,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if model_cfg.vocab_size != vocab.vocab_size() {
        return Err(GrError::Train(format!(
            "model vocab_size {} does not match vocabulary {}",
            model_cfg.vocab_size,
            vocab.vocab_size()
        )));
    }
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(GrError::Train("train and validation splits must be non-empty".into()));
    }
    let standardizer = Standardizer::fit(train_ds)?;
    let strain = standardizer.apply(train_ds);
    let sval = standardizer.apply(val_ds);
    let samples = encode_dataset(&strain, vocab, model_cfg.t_max)?;

    let mut params = init_params(model_cfg)?;
    let mut adam = AdamState::new(&params.tensors().iter().map(|t| (*t).clone()).collect::<Vec<_>>());
    let adam_cfg = AdamConfig::with_lr(cfg.learning_rate);

    let mut data_rng = Rng::for_stream(cfg.seed, Stream::Data);
    let mut curriculum_rng = Rng::for_stream(cfg.seed, Stream::Curriculum);

    let mut order: Vec<usize> = (0..samples.len()).collect();
    data_rng.shuffle(&mut order);
    let mut cursor = 0usize;

    let inference_mixup = if cfg.clem_enabled { cfg.mixup_window } else { 0 };
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for step in 0..cfg.steps {
        let mut batch: Vec<&EncodedSample> = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor >= order.len() {
                data_rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(&samples[order[cursor]]);
            cursor += 1;
        }
        let p = sampling_rate(&cfg.schedule, step as u64);
        let out = if cfg.clem_enabled {
            train_step_clem(&batch, &params, vocab, cfg, p, &mut curriculum_rng)?
        } else {
            train_step_teacher_forcing(&batch, &params, vocab, cfg)?
        };
        if !out.loss.total.is_finite() {
            return Err(GrError::Train(format!(
                "non-finite loss at step {step}: ce1={} ce2={} huber={}",
                out.loss.ce1, out.loss.ce2, out.loss.huber
            )));
        }
        adam_step_refs(&mut params.tensors_mut(), &out.grads, &mut adam, adam_cfg)?;

        let eval_now = (step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.steps;
        let (val_mae, val_xauc) = if eval_now {
            let preds = inference::predict_batch(
                &sval.features,
                &params,
                vocab,
                model_cfg.t_max,
                inference_mixup > 0,
                inference_mixup,
            )?;
            let ys: Vec<f64> = preds.iter().map(|p| p.y).collect();
            let m = metrics::mae(&ys, &sval.targets)?;
            let x = metrics::xauc(&ys, &sval.targets, XAUC_EVAL_PAIRS, cfg.seed)?;
            if best.as_ref().is_none_or(|(b, _, _)| m < *b) {
                best = Some((m, step + 1, params.clone()));
            }
            (Some(m), Some(x))
        } else {
            (None, None)
        };
        log.push(MetricsRecord {
            step: step + 1,
            ce1: out.loss.ce1,
            ce2: out.loss.ce2,
            huber: out.loss.huber,
            p,
            val_mae,
            val_xauc,
        });
    }

    let (best_val_mae, best_step, best_params) =
        best.ok_or_else(|| GrError::Train("no evaluation happened".into()))?;
    Ok(TrainOutcome {
        params: best_params,
        standardizer,
        log,
        best_val_mae,
        best_step,
        inference_mixup_window: inference_mixup,
    })
}

/// Render the metrics log as line-delimited JSON.
pub fn log_to_jsonl(log: &[MetricsRecord]) -> String {
    let mut out = String::new();
    for rec in log {
        out.push_str(&serde_json::to_string(rec).expect("metrics record serialization"));
        out.push('\n');
    }
    out
}
