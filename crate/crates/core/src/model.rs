//! Encoder-decoder network: FFN feature encoder producing a single
//! hidden vector, and a causal Transformer decoder that cross-attends to
//! it and emits per-step vocabulary logits.

use crate::error::{GrError, Result};
use crate::rng::{Rng, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Additive pre-softmax penalty on masked attention positions. Large
/// enough that exp underflows to exactly zero, which is what makes the
/// causality property exact rather than approximate.
pub const ATTN_MASK: f64 = -1e9;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub decoder_blocks: usize,
    pub attention_heads: usize,
    pub ffn_mult: usize,
    /// Full vocabulary size including PAD/SOS/EOS.
    pub vocab_size: usize,
    pub t_max: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults; trains in minutes on a CPU.
    pub fn small(feature_dim: usize, vocab_size: usize) -> Self {
        ModelConfig {
            feature_dim,
            hidden_dim: 32,
            encoder_layers: 3,
            decoder_blocks: 2,
            attention_heads: 2,
            ffn_mult: 4,
            vocab_size,
            t_max: 32,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.feature_dim,
            self.hidden_dim,
            self.encoder_layers,
            self.decoder_blocks,
            self.attention_heads,
            self.ffn_mult,
            self.t_max,
        ];
        if dims.contains(&0) {
            return Err(GrError::Model("all dimensions must be >= 1".into()));
        }
        if self.vocab_size < 4 {
            return Err(GrError::Model(
                "vocab_size must cover PAD/SOS/EOS plus at least one value token".into(),
            ));
        }
        if !self.hidden_dim.is_multiple_of(self.attention_heads) {
            return Err(GrError::Model(format!(
                "hidden_dim {} not divisible by attention_heads {}",
                self.hidden_dim, self.attention_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    /// [in x out]; applied as row-vector times matrix.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub(crate) fn init(inp: usize, out: usize, rng: &mut Rng) -> Linear {
        let bound = (6.0 / (inp + out) as f64).sqrt();
        Linear {
            weight: Tensor::uniform(inp, out, bound, rng),
            bias: Tensor::zeros(1, out),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttentionParams {
    fn init(dim: usize, rng: &mut Rng) -> Self {
        AttentionParams {
            q: Linear::init(dim, dim, rng),
            k: Linear::init(dim, dim, rng),
            v: Linear::init(dim, dim, rng),
            o: Linear::init(dim, dim, rng),
        }
    }
}

/// (gamma, beta) pair of a layer norm.
pub type Norm = (Tensor, Tensor);

fn init_norm(dim: usize) -> Norm {
    (Tensor::filled(1, dim, 1.0), Tensor::zeros(1, dim))
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub ln1: Norm,
    pub ln2: Norm,
    pub ln3: Norm,
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: Vec<Linear>,
    /// [vocab_size x D]
    pub embedding: Tensor,
    /// Learned positions 0..T_max+1, so [T_max+2 x D].
    pub positional: Tensor,
    pub blocks: Vec<BlockParams>,
    /// [D x vocab_size]
    pub output: Linear,
}

/// The shared FFN encoder stack: feature_dim -> D -> ... -> D.
pub(crate) fn init_encoder(config: &ModelConfig, rng: &mut Rng) -> Vec<Linear> {
    let mut encoder = Vec::with_capacity(config.encoder_layers);
    let mut inp = config.feature_dim;
    for _ in 0..config.encoder_layers {
        encoder.push(Linear::init(inp, config.hidden_dim, rng));
        inp = config.hidden_dim;
    }
    encoder
}

/// Deterministic initialization: scaled-uniform weights, zero biases,
/// unit-gamma zero-beta layer norms. Same config and seed give
/// bit-identical parameters.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = Rng::for_stream(config.seed, Stream::Init);
    let d = config.hidden_dim;

    let encoder = init_encoder(config, &mut rng);

    let emb_bound = (1.0 / d as f64).sqrt();
    let embedding = Tensor::uniform(config.vocab_size, d, emb_bound, &mut rng);
    let positional = Tensor::uniform(config.t_max + 2, d, emb_bound, &mut rng);

    let blocks = (0..config.decoder_blocks)
        .map(|_| BlockParams {
            self_attn: AttentionParams::init(d, &mut rng),
            cross_attn: AttentionParams::init(d, &mut rng),
            ffn1: Linear::init(d, d * config.ffn_mult, &mut rng),
            ffn2: Linear::init(d * config.ffn_mult, d, &mut rng),
            ln1: init_norm(d),
            ln2: init_norm(d),
            ln3: init_norm(d),
        })
        .collect();

    let output = Linear::init(d, config.vocab_size, &mut rng);

    Ok(ModelParams {
        config: *config,
        encoder,
        embedding,
        positional,
        blocks,
        output,
    })
}

impl ModelParams {
    /// Named tensors in canonical order (checkpoint, optimizer and
    /// gradient extraction all share it).
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            out.push((format!("enc.{i}.w"), &l.weight));
            out.push((format!("enc.{i}.b"), &l.bias));
        }
        out.push(("embedding".into(), &self.embedding));
        out.push(("positional".into(), &self.positional));
        for (i, b) in self.blocks.iter().enumerate() {
            for (tag, a) in [("self", &b.self_attn), ("cross", &b.cross_attn)] {
                out.push((format!("block.{i}.{tag}.q.w"), &a.q.weight));
                out.push((format!("block.{i}.{tag}.q.b"), &a.q.bias));
                out.push((format!("block.{i}.{tag}.k.w"), &a.k.weight));
                out.push((format!("block.{i}.{tag}.k.b"), &a.k.bias));
                out.push((format!("block.{i}.{tag}.v.w"), &a.v.weight));
                out.push((format!("block.{i}.{tag}.v.b"), &a.v.bias));
                out.push((format!("block.{i}.{tag}.o.w"), &a.o.weight));
                out.push((format!("block.{i}.{tag}.o.b"), &a.o.bias));
            }
            out.push((format!("block.{i}.ffn1.w"), &b.ffn1.weight));
            out.push((format!("block.{i}.ffn1.b"), &b.ffn1.bias));
            out.push((format!("block.{i}.ffn2.w"), &b.ffn2.weight));
            out.push((format!("block.{i}.ffn2.b"), &b.ffn2.bias));
            out.push((format!("block.{i}.ln1.g"), &b.ln1.0));
            out.push((format!("block.{i}.ln1.b"), &b.ln1.1));
            out.push((format!("block.{i}.ln2.g"), &b.ln2.0));
            out.push((format!("block.{i}.ln2.b"), &b.ln2.1));
            out.push((format!("block.{i}.ln3.g"), &b.ln3.0));
            out.push((format!("block.{i}.ln3.b"), &b.ln3.1));
        }
        out.push(("output.w".into(), &self.output.weight));
        out.push(("output.b".into(), &self.output.bias));
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
        out.push(&mut self.embedding);
        out.push(&mut self.positional);
        for b in self.blocks.iter_mut() {
            for a in [&mut b.self_attn, &mut b.cross_attn] {
                out.push(&mut a.q.weight);
                out.push(&mut a.q.bias);
                out.push(&mut a.k.weight);
                out.push(&mut a.k.bias);
                out.push(&mut a.v.weight);
                out.push(&mut a.v.bias);
                out.push(&mut a.o.weight);
                out.push(&mut a.o.bias);
            }
            out.push(&mut b.ffn1.weight);
            out.push(&mut b.ffn1.bias);
            out.push(&mut b.ffn2.weight);
            out.push(&mut b.ffn2.bias);
            out.push(&mut b.ln1.0);
            out.push(&mut b.ln1.1);
            out.push(&mut b.ln2.0);
            out.push(&mut b.ln2.1);
            out.push(&mut b.ln3.0);
            out.push(&mut b.ln3.1);
        }
        out.push(&mut self.output.weight);
        out.push(&mut self.output.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

// ── tape binding ────────────────────────────────────────────────────────

#[derive(Clone, Copy)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone, Copy)]
pub struct BoundAttention {
    pub q: BoundLinear,
    pub k: BoundLinear,
    pub v: BoundLinear,
    pub o: BoundLinear,
}

#[derive(Clone, Copy)]
pub struct BoundNorm {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone)]
pub struct BoundBlock {
    pub self_attn: BoundAttention,
    pub cross_attn: BoundAttention,
    pub ffn1: BoundLinear,
    pub ffn2: BoundLinear,
    pub ln1: BoundNorm,
    pub ln2: BoundNorm,
    pub ln3: BoundNorm,
}

/// Tape handles for every parameter, leaf-bound in canonical order.
#[derive(Clone)]
pub struct BoundParams {
    pub config: ModelConfig,
    pub encoder: Vec<BoundLinear>,
    pub embedding: Var,
    pub positional: Var,
    pub blocks: Vec<BoundBlock>,
    pub output: BoundLinear,
}

impl BoundParams {
    /// Vars in the same order as [`ModelParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.encoder {
            out.push(l.w);
            out.push(l.b);
        }
        out.push(self.embedding);
        out.push(self.positional);
        for b in &self.blocks {
            for a in [&b.self_attn, &b.cross_attn] {
                out.push(a.q.w);
                out.push(a.q.b);
                out.push(a.k.w);
                out.push(a.k.b);
                out.push(a.v.w);
                out.push(a.v.b);
                out.push(a.o.w);
                out.push(a.o.b);
            }
            out.push(b.ffn1.w);
            out.push(b.ffn1.b);
            out.push(b.ffn2.w);
            out.push(b.ffn2.b);
            out.push(b.ln1.gamma);
            out.push(b.ln1.beta);
            out.push(b.ln2.gamma);
            out.push(b.ln2.beta);
            out.push(b.ln3.gamma);
            out.push(b.ln3.beta);
        }
        out.push(self.output.w);
        out.push(self.output.b);
        out
    }
}

impl BoundParams {
    /// Rebuild the structured view from vars listed in canonical order
    /// (the inverse of [`BoundParams::vars`]); used by gradient checks
    /// that bind leaves themselves.
    pub fn from_vars(config: ModelConfig, vars: &[Var]) -> Result<Self> {
        let mut it = vars.iter().copied();
        let mut next = || {
            it.next()
                .ok_or_else(|| GrError::Model("too few vars for parameter layout".into()))
        };
        let mut encoder = Vec::with_capacity(config.encoder_layers);
        for _ in 0..config.encoder_layers {
            encoder.push(BoundLinear {
                w: next()?,
                b: next()?,
            });
        }
        let embedding = next()?;
        let positional = next()?;
        let mut blocks = Vec::with_capacity(config.decoder_blocks);
        for _ in 0..config.decoder_blocks {
            let mut attn = || -> Result<BoundAttention> {
                Ok(BoundAttention {
                    q: BoundLinear { w: next()?, b: next()? },
                    k: BoundLinear { w: next()?, b: next()? },
                    v: BoundLinear { w: next()?, b: next()? },
                    o: BoundLinear { w: next()?, b: next()? },
                })
            };
            let self_attn = attn()?;
            let cross_attn = attn()?;
            blocks.push(BoundBlock {
                self_attn,
                cross_attn,
                ffn1: BoundLinear { w: next()?, b: next()? },
                ffn2: BoundLinear { w: next()?, b: next()? },
                ln1: BoundNorm { gamma: next()?, beta: next()? },
                ln2: BoundNorm { gamma: next()?, beta: next()? },
                ln3: BoundNorm { gamma: next()?, beta: next()? },
            });
        }
        let output = BoundLinear {
            w: next()?,
            b: next()?,
        };
        if it.next().is_some() {
            return Err(GrError::Model("too many vars for parameter layout".into()));
        }
        Ok(BoundParams {
            config,
            encoder,
            embedding,
            positional,
            blocks,
            output,
        })
    }
}

/// Create tape leaves for every parameter tensor.
pub fn bind_params(params: &ModelParams, tape: &mut Tape, trainable: bool) -> BoundParams {
    let bind_linear =
        |tape: &mut Tape, l: &Linear| -> BoundLinear {
            BoundLinear {
                w: tape.leaf(l.weight.clone(), trainable),
                b: tape.leaf(l.bias.clone(), trainable),
            }
        };
    let encoder: Vec<BoundLinear> = params
        .encoder
        .iter()
        .map(|l| bind_linear(tape, l))
        .collect();
    let embedding = tape.leaf(params.embedding.clone(), trainable);
    let positional = tape.leaf(params.positional.clone(), trainable);
    let blocks = params
        .blocks
        .iter()
        .map(|b| {
            let bind_attn = |tape: &mut Tape, a: &AttentionParams| BoundAttention {
                q: BoundLinear {
                    w: tape.leaf(a.q.weight.clone(), trainable),
                    b: tape.leaf(a.q.bias.clone(), trainable),
                },
                k: BoundLinear {
                    w: tape.leaf(a.k.weight.clone(), trainable),
                    b: tape.leaf(a.k.bias.clone(), trainable),
                },
                v: BoundLinear {
                    w: tape.leaf(a.v.weight.clone(), trainable),
                    b: tape.leaf(a.v.bias.clone(), trainable),
                },
                o: BoundLinear {
                    w: tape.leaf(a.o.weight.clone(), trainable),
                    b: tape.leaf(a.o.bias.clone(), trainable),
                },
            };
            BoundBlock {
                self_attn: bind_attn(tape, &b.self_attn),
                cross_attn: bind_attn(tape, &b.cross_attn),
                ffn1: BoundLinear {
                    w: tape.leaf(b.ffn1.weight.clone(), trainable),
                    b: tape.leaf(b.ffn1.bias.clone(), trainable),
                },
                ffn2: BoundLinear {
                    w: tape.leaf(b.ffn2.weight.clone(), trainable),
                    b: tape.leaf(b.ffn2.bias.clone(), trainable),
                },
                ln1: BoundNorm {
                    gamma: tape.leaf(b.ln1.0.clone(), trainable),
                    beta: tape.leaf(b.ln1.1.clone(), trainable),
                },
                ln2: BoundNorm {
                    gamma: tape.leaf(b.ln2.0.clone(), trainable),
                    beta: tape.leaf(b.ln2.1.clone(), trainable),
                },
                ln3: BoundNorm {
                    gamma: tape.leaf(b.ln3.0.clone(), trainable),
                    beta: tape.leaf(b.ln3.1.clone(), trainable),
                },
            }
        })
        .collect();
    let output = bind_linear(tape, &params.output);
    BoundParams {
        config: params.config,
        encoder,
        embedding,
        positional,
        blocks,
        output,
    }
}

/// Collect leaf gradients in canonical order (zero where a parameter did
/// not participate in the loss).
pub fn collect_grads(bound: &BoundParams, tape: &Tape, params: &ModelParams) -> Vec<Tensor> {
    bound
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(v, p)| {
            tape.grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols()))
        })
        .collect()
}

// ── forward passes ──────────────────────────────────────────────────────

fn linear(tape: &mut Tape, x: Var, l: &BoundLinear) -> Result<Var> {
    let y = tape.matmul(x, l.w)?;
    tape.add_row(y, l.b)
}

/// FFN feature encoder: relu between layers, linear output.
pub fn encoder_forward(tape: &mut Tape, x: Var, bound: &BoundParams) -> Result<Var> {
    let n = bound.encoder.len();
    let mut h = x;
    for (i, l) in bound.encoder.iter().enumerate() {
        h = linear(tape, h, l)?;
        if i + 1 < n {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Convenience value-level wrapper: encode one feature row to h.
pub fn encode_features(x: &[f64], params: &ModelParams) -> Result<Tensor> {
    if x.len() != params.config.feature_dim {
        return Err(GrError::Model(format!(
            "feature vector length {} does not match feature_dim {}",
            x.len(),
            params.config.feature_dim
        )));
    }
    let mut tape = Tape::new();
    let bound = bind_params(params, &mut tape, false);
    let xv = tape.constant(Tensor::row_vector(x.to_vec()));
    let h = encoder_forward(&mut tape, xv, &bound)?;
    Ok(tape.value(h).clone())
}

fn causal_mask(t: usize) -> Tensor {
    let mut m = Tensor::zeros(t, t);
    for i in 0..t {
        for j in (i + 1)..t {
            m.set(i, j, ATTN_MASK);
        }
    }
    m
}

fn attention(
    tape: &mut Tape,
    queries: Var,
    memory: Var,
    p: &BoundAttention,
    heads: usize,
    mask: Option<Tensor>,
) -> Result<Var> {
    let d = tape.value(queries).cols();
    let dh = d / heads;
    let q = linear(tape, queries, &p.q)?;
    let k = linear(tape, memory, &p.k)?;
    let v = linear(tape, memory, &p.v)?;
    let mask_var = mask.map(|m| tape.constant(m));
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let masked = match mask_var {
            Some(m) => tape.add(scaled, m)?,
            None => scaled,
        };
        let attn = tape.softmax(masked);
        head_outs.push(tape.matmul(attn, vh)?);
    }
    let concat = tape.concat_cols(&head_outs)?;
    linear(tape, concat, &p.o)
}

fn norm(tape: &mut Tape, x: Var, n: &BoundNorm) -> Result<Var> {
    tape.layer_norm(x, n.gamma, n.beta, LAYER_NORM_EPS)
}

/// Decoder on an already-embedded input matrix [T x D]: causal
/// self-attention, cross-attention to the single-vector memory h, and a
/// position-wise FFN per block (post-norm residuals), then the output
/// projection to vocabulary logits.
pub fn decoder_forward_embedded(
    tape: &mut Tape,
    h: Var,
    x_embedded: Var,
    bound: &BoundParams,
) -> Result<Var> {
    let t = tape.value(x_embedded).rows();
    let cfg = &bound.config;
    if t > cfg.t_max + 1 {
        return Err(GrError::Model(format!(
            "decoder input length {t} exceeds t_max+1 = {}",
            cfg.t_max + 1
        )));
    }
    let pos = tape.slice_rows(bound.positional, 0, t)?;
    let mut x = tape.add(x_embedded, pos)?;
    for b in &bound.blocks {
        let sa = attention(tape, x, x, &b.self_attn, cfg.attention_heads, Some(causal_mask(t)))?;
        let r1 = tape.add(x, sa)?;
        x = norm(tape, r1, &b.ln1)?;
        let ca = attention(tape, x, h, &b.cross_attn, cfg.attention_heads, None)?;
        let r2 = tape.add(x, ca)?;
        x = norm(tape, r2, &b.ln2)?;
        let f1 = linear(tape, x, &b.ffn1)?;
        let f1 = tape.relu(f1);
        let f2 = linear(tape, f1, &b.ffn2)?;
        let r3 = tape.add(x, f2)?;
        x = norm(tape, r3, &b.ln3)?;
    }
    linear(tape, x, &bound.output)
}

/// Decoder on SOS-framed token ids; per-position logits over the full
/// vocabulary. Position t attends to positions <= t and to h.
pub fn decoder_forward(
    tape: &mut Tape,
    h: Var,
    input_ids: &[u32],
    bound: &BoundParams,
) -> Result<Var> {
    if input_ids.is_empty() {
        return Err(GrError::Model("decoder input must not be empty".into()));
    }
    for &id in input_ids {
        if id as usize >= bound.config.vocab_size {
            return Err(GrError::Model(format!(
                "token id {id} out of range for vocab_size {}",
                bound.config.vocab_size
            )));
        }
    }
    let x = tape.embed(bound.embedding, input_ids)?;
    decoder_forward_embedded(tape, h, x, bound)
}
