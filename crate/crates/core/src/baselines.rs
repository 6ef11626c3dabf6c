//! Reference heads for directional comparisons: direct value regression
//! and a bucket-ordinal head, both sharing the FFN feature encoder so
//! the head is the only varying factor.

use crate::error::{GrError, Result};
use crate::model::{init_encoder, BoundLinear, Linear, ModelConfig};
use crate::rng::{Rng, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::Serialize;

// ── bucket scheme ───────────────────────────────────────────────────────

/// Increasing bucket edges with positive spans; bucket k covers
/// (edge_{k-1}, edge_k] with edge_0 = 0 implicit.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BucketScheme {
    pub edges: Vec<f64>,
    pub spans: Vec<f64>,
}

impl BucketScheme {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.is_empty() {
            return Err(GrError::Model("bucket scheme needs at least one edge".into()));
        }
        if edges[0] <= 0.0 {
            return Err(GrError::Model("first bucket edge must be positive".into()));
        }
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GrError::Model("bucket edges must be strictly increasing".into()));
        }
        let mut spans = Vec::with_capacity(edges.len());
        let mut prev = 0.0;
        for &e in &edges {
            spans.push(e - prev);
            prev = e;
        }
        Ok(BucketScheme { edges, spans })
    }

    /// Equal-frequency edges from training targets (duplicates and
    /// non-positive quantiles dropped).
    pub fn from_quantiles(targets: &[f64], k: usize) -> Result<Self> {
        if targets.is_empty() || k == 0 {
            return Err(GrError::Model("quantile scheme needs targets and k >= 1".into()));
        }
        let mut sorted = targets.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        let mut edges = Vec::with_capacity(k);
        for i in 0..k {
            let q = (i + 1) as f64 / k as f64;
            let rank = (q * (n - 1) as f64).round() as usize;
            let e = sorted[rank.min(n - 1)];
            if e > 0.0 && edges.last().is_none_or(|last| e > *last) {
                edges.push(e);
            }
        }
        Self::new(edges)
    }

    /// Per-bucket binary labels `1[y > edge_k]`.
    pub fn labels(&self, y: f64) -> Vec<f64> {
        self.edges.iter().map(|e| if y > *e { 1.0 } else { 0.0 }).collect()
    }

    /// Prediction: sum of bucket sigmoid probabilities times spans.
    pub fn predict_from_logits(&self, logits: &[f64]) -> f64 {
        logits
            .iter()
            .zip(&self.spans)
            .map(|(l, s)| s / (1.0 + (-l).exp()))
            .sum()
    }

    /// Largest representable prediction (all sigmoids saturated).
    pub fn max_value(&self) -> f64 {
        *self.edges.last().unwrap()
    }
}

// ── parameter sets ──────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct VrParams {
    pub config: ModelConfig,
    pub encoder: Vec<Linear>,
    pub head: Linear,
}

#[derive(Clone, Debug)]
pub struct OrdinalParams {
    pub config: ModelConfig,
    pub encoder: Vec<Linear>,
    pub head: Linear,
    pub scheme: BucketScheme,
}

/// Value-regression head: the shared encoder plus a single linear
/// output. The encoder draws from the same initialization stream as the
/// full model, so both start from identical encoder weights.
pub fn init_vr(config: &ModelConfig) -> Result<VrParams> {
    config.validate()?;
    let mut rng = Rng::for_stream(config.seed, Stream::Init);
    let encoder = init_encoder(config, &mut rng);
    let head = Linear::init(config.hidden_dim, 1, &mut rng);
    Ok(VrParams {
        config: *config,
        encoder,
        head,
    })
}

pub fn init_ordinal(config: &ModelConfig, scheme: BucketScheme) -> Result<OrdinalParams> {
    config.validate()?;
    let mut rng = Rng::for_stream(config.seed, Stream::Init);
    let encoder = init_encoder(config, &mut rng);
    let head = Linear::init(config.hidden_dim, scheme.edges.len(), &mut rng);
    Ok(OrdinalParams {
        config: *config,
        encoder,
        head,
        scheme,
    })
}

macro_rules! head_tensors {
    ($ty:ty) => {
        impl $ty {
            pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
                let mut out = Vec::new();
                for (i, l) in self.encoder.iter().enumerate() {
                    out.push((format!("enc.{i}.w"), &l.weight));
                    out.push((format!("enc.{i}.b"), &l.bias));
                }
                out.push(("head.w".into(), &self.head.weight));
                out.push(("head.b".into(), &self.head.bias));
                out
            }

            pub fn tensors(&self) -> Vec<&Tensor> {
                self.named_tensors().into_iter().map(|(_, t)| t).collect()
            }

            pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
                let mut out: Vec<&mut Tensor> = Vec::new();
                for l in self.encoder.iter_mut() {
                    out.push(&mut l.weight);
                    out.push(&mut l.bias);
                }
                out.push(&mut self.head.weight);
                out.push(&mut self.head.bias);
                out
            }
        }
    };
}

head_tensors!(VrParams);
head_tensors!(OrdinalParams);

pub struct BoundHead {
    pub encoder: Vec<BoundLinear>,
    pub head: BoundLinear,
}

impl BoundHead {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.encoder {
            out.push(l.w);
            out.push(l.b);
        }
        out.push(self.head.w);
        out.push(self.head.b);
        out
    }
}

fn bind_head(encoder: &[Linear], head: &Linear, tape: &mut Tape, trainable: bool) -> BoundHead {
    let encoder = encoder
        .iter()
        .map(|l| BoundLinear {
            w: tape.leaf(l.weight.clone(), trainable),
            b: tape.leaf(l.bias.clone(), trainable),
        })
        .collect();
    BoundHead {
        encoder,
        head: BoundLinear {
            w: tape.leaf(head.weight.clone(), trainable),
            b: tape.leaf(head.bias.clone(), trainable),
        },
    }
}

pub fn bind_vr(params: &VrParams, tape: &mut Tape, trainable: bool) -> BoundHead {
    bind_head(&params.encoder, &params.head, tape, trainable)
}

pub fn bind_ordinal(params: &OrdinalParams, tape: &mut Tape, trainable: bool) -> BoundHead {
    bind_head(&params.encoder, &params.head, tape, trainable)
}

fn encoder_stack(tape: &mut Tape, x: Var, bound: &BoundHead) -> Result<Var> {
    let n = bound.encoder.len();
    let mut h = x;
    for (i, l) in bound.encoder.iter().enumerate() {
        let y = tape.matmul(h, l.w)?;
        h = tape.add_row(y, l.b)?;
        if i + 1 < n {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Raw (unclamped) scalar output of the regression head.
pub fn vr_forward(tape: &mut Tape, x: Var, bound: &BoundHead) -> Result<Var> {
    let h = encoder_stack(tape, x, bound)?;
    let y = tape.matmul(h, bound.head.w)?;
    tape.add_row(y, bound.head.b)
}

/// Regression prediction, clamped at zero.
pub fn vr_predict(x: &[f64], params: &VrParams) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = bind_vr(params, &mut tape, false);
    let xv = tape.constant(Tensor::row_vector(x.to_vec()));
    let out = vr_forward(&mut tape, xv, &bound)?;
    Ok(tape.value(out).item().max(0.0))
}

/// Per-bucket logits of the ordinal head.
pub fn ordinal_forward(tape: &mut Tape, x: Var, bound: &BoundHead) -> Result<Var> {
    let h = encoder_stack(tape, x, bound)?;
    let y = tape.matmul(h, bound.head.w)?;
    tape.add_row(y, bound.head.b)
}

/// Ordinal prediction: sigmoid-weighted span sum, in [0, sum of spans].
pub fn ordinal_predict(x: &[f64], params: &OrdinalParams) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = bind_ordinal(params, &mut tape, false);
    let xv = tape.constant(Tensor::row_vector(x.to_vec()));
    let out = ordinal_forward(&mut tape, xv, &bound)?;
    Ok(params.scheme.predict_from_logits(tape.value(out).row(0)))
}

// ── training steps ──────────────────────────────────────────────────────

pub struct HeadStepOutput {
    pub loss: f64,
    pub grads: Vec<Tensor>,
}

fn average_grads(grads: &mut Option<Vec<Tensor>>, sample: Vec<Tensor>) {
    match grads.as_mut() {
        None => *grads = Some(sample),
        Some(acc) => {
            for (a, g) in acc.iter_mut().zip(&sample) {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
        }
    }
}

fn finish_grads(grads: Option<Vec<Tensor>>, batch: usize) -> Vec<Tensor> {
    let mut grads = grads.expect("non-empty batch");
    let b = batch as f64;
    for g in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|v| *v /= b);
    }
    grads
}

/// One Huber-loss step of the regression head over a batch.
pub fn vr_train_step(
    batch: &[(&[f64], f64)],
    params: &VrParams,
    delta: f64,
) -> Result<HeadStepOutput> {
    if batch.is_empty() {
        return Err(GrError::Train("empty batch".into()));
    }
    let mut total = 0.0;
    let mut grads = None;
    for (x, y) in batch {
        let mut tape = Tape::new();
        let bound = bind_vr(params, &mut tape, true);
        let xv = tape.constant(Tensor::row_vector(x.to_vec()));
        let out = vr_forward(&mut tape, xv, &bound)?;
        let loss = tape.huber(out, *y, delta)?;
        tape.backward(loss)?;
        total += tape.value(loss).item();
        let sample: Vec<Tensor> = bound
            .vars()
            .iter()
            .zip(params.tensors())
            .map(|(v, p)| {
                tape.grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols()))
            })
            .collect();
        average_grads(&mut grads, sample);
    }
    Ok(HeadStepOutput {
        loss: total / batch.len() as f64,
        grads: finish_grads(grads, batch.len()),
    })
}

/// One BCE step of the ordinal head: labels are `1[y > edge_k]`.
pub fn ordinal_train_step(
    batch: &[(&[f64], f64)],
    params: &OrdinalParams,
) -> Result<HeadStepOutput> {
    if batch.is_empty() {
        return Err(GrError::Train("empty batch".into()));
    }
    let mut total = 0.0;
    let mut grads = None;
    for (x, y) in batch {
        let mut tape = Tape::new();
        let bound = bind_ordinal(params, &mut tape, true);
        let xv = tape.constant(Tensor::row_vector(x.to_vec()));
        let logits = ordinal_forward(&mut tape, xv, &bound)?;
        let labels = params.scheme.labels(*y);
        let loss = tape.bce_logits(logits, &labels)?;
        tape.backward(loss)?;
        total += tape.value(loss).item();
        let sample: Vec<Tensor> = bound
            .vars()
            .iter()
            .zip(params.tensors())
            .map(|(v, p)| {
                tape.grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols()))
            })
            .collect();
        average_grads(&mut grads, sample);
    }
    Ok(HeadStepOutput {
        loss: total / batch.len() as f64,
        grads: finish_grads(grads, batch.len()),
    })
}

// ── baseline training loops ─────────────────────────────────────────────

use crate::data::{Dataset, Standardizer};
use crate::metrics;
use crate::optim::{adam_step_refs, AdamConfig, AdamState};
use crate::training::{MetricsRecord, TrainConfig, XAUC_EVAL_PAIRS};

pub struct HeadTrainOutcome<P> {
    pub params: P,
    pub standardizer: Standardizer,
    pub log: Vec<MetricsRecord>,
    pub best_val_mae: f64,
    pub best_step: usize,
}

#[allow(clippy::too_many_arguments)]
fn head_train_loop<P, Step, Pred>(
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
    mut params: P,
    tensors_of: impl Fn(&mut P) -> Vec<&mut Tensor>,
    tensor_snapshot: impl Fn(&P) -> Vec<Tensor>,
    mut step_fn: Step,
    predict_fn: Pred,
) -> Result<HeadTrainOutcome<P>>
where
    P: Clone,
    Step: FnMut(&[(&[f64], f64)], &P) -> Result<HeadStepOutput>,
    Pred: Fn(&[f64], &P) -> Result<f64>,
{
    let standardizer = Standardizer::fit(train_ds)?;
    let strain = standardizer.apply(train_ds);
    let sval = standardizer.apply(val_ds);

    let mut adam = AdamState::new(&tensor_snapshot(&params));
    let adam_cfg = AdamConfig::with_lr(cfg.learning_rate);
    let mut data_rng = Rng::for_stream(cfg.seed, Stream::Data);
    let mut order: Vec<usize> = (0..strain.len()).collect();
    data_rng.shuffle(&mut order);
    let mut cursor = 0usize;

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, P)> = None;
    for step in 0..cfg.steps {
        let mut batch: Vec<(&[f64], f64)> = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor >= order.len() {
                data_rng.shuffle(&mut order);
                cursor = 0;
            }
            let i = order[cursor];
            batch.push((strain.features[i].as_slice(), strain.targets[i]));
            cursor += 1;
        }
        let out = step_fn(&batch, &params)?;
        if !out.loss.is_finite() {
            return Err(GrError::Train(format!("non-finite loss at step {step}")));
        }
        adam_step_refs(&mut tensors_of(&mut params), &out.grads, &mut adam, adam_cfg)?;

        let eval_now = (step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.steps;
        let (val_mae, val_xauc) = if eval_now {
            let preds: Vec<f64> = sval
                .features
                .iter()
                .map(|x| predict_fn(x, &params))
                .collect::<Result<_>>()?;
            let m = metrics::mae(&preds, &sval.targets)?;
            let x = metrics::xauc(&preds, &sval.targets, XAUC_EVAL_PAIRS, cfg.seed)?;
            if best.as_ref().is_none_or(|(b, _, _)| m < *b) {
                best = Some((m, step + 1, params.clone()));
            }
            (Some(m), Some(x))
        } else {
            (None, None)
        };
        log.push(MetricsRecord {
            step: step + 1,
            ce1: out.loss,
            ce2: out.loss,
            huber: out.loss,
            p: 1.0,
            val_mae,
            val_xauc,
        });
    }
    let (best_val_mae, best_step, best_params) =
        best.ok_or_else(|| GrError::Train("no evaluation happened".into()))?;
    Ok(HeadTrainOutcome {
        params: best_params,
        standardizer,
        log,
        best_val_mae,
        best_step,
    })
}

/// Train the value-regression baseline (Huber loss on the raw output).
pub fn train_vr(
    train_ds: &Dataset,
    val_ds: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<HeadTrainOutcome<VrParams>> {
    let params = init_vr(model_cfg)?;
    let delta = cfg.delta;
    head_train_loop(
        train_ds,
        val_ds,
        cfg,
        params,
        |p| p.tensors_mut(),
        |p| p.tensors().iter().map(|t| (*t).clone()).collect(),
        move |batch, p| vr_train_step(batch, p, delta),
        vr_predict,
    )
}

/// Train the bucket-ordinal baseline; edges are equal-frequency
/// quantiles of the training targets.
pub fn train_ordinal(
    train_ds: &Dataset,
    val_ds: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    buckets: usize,
) -> Result<HeadTrainOutcome<OrdinalParams>> {
    let scheme = BucketScheme::from_quantiles(&train_ds.targets, buckets)?;
    let params = init_ordinal(model_cfg, scheme)?;
    head_train_loop(
        train_ds,
        val_ds,
        cfg,
        params,
        |p| p.tensors_mut(),
        |p| p.tensors().iter().map(|t| (*t).clone()).collect(),
        ordinal_train_step,
        ordinal_predict,
    )
}
