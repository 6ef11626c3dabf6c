//! Greedy autoregressive decoding from features to a predicted scalar.

use crate::codec;
use crate::error::{GrError, Result};
use crate::model::{bind_params, decoder_forward_embedded, encoder_forward, ModelParams};
use crate::tape::Tape;
use crate::training::embedding_mixup;
use crate::vocab::{ValueVocabulary, EOS_ID, PAD_ID, SOS_ID};
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Eos,
    TMax,
}

#[derive(Clone, Debug, Serialize)]
pub struct Prediction {
    pub y: f64,
    pub token_ids: Vec<u32>,
    pub terminated_by: Termination,
}

/// Argmax over value tokens and EOS; PAD and SOS are never generated.
fn pick_next(logits_row: &[f64]) -> u32 {
    let mut best = EOS_ID as usize;
    for (i, v) in logits_row.iter().enumerate() {
        if i == PAD_ID as usize || i == SOS_ID as usize {
            continue;
        }
        if *v > logits_row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decode: start from SOS, take the argmax token each step, feed
/// back either the raw token embedding or (with `apply_mixup`) the
/// window-softmax mixup embedding used by second-pass training, until
/// EOS or `t_max` tokens. The prediction is the decoded token-value sum.
pub fn predict(
    x: &[f64],
    params: &ModelParams,
    vocab: &ValueVocabulary,
    t_max: usize,
    apply_mixup: bool,
    n_w: usize,
) -> Result<Prediction> {
    predict_traced(x, params, vocab, t_max, apply_mixup, n_w).map(|(p, _)| p)
}

/// `predict` that also returns the full logits row observed at each
/// generation step (diagnostics input).
pub fn predict_traced(
    x: &[f64],
    params: &ModelParams,
    vocab: &ValueVocabulary,
    t_max: usize,
    apply_mixup: bool,
    n_w: usize,
) -> Result<(Prediction, Vec<Vec<f64>>)> {
    if x.len() != params.config.feature_dim {
        return Err(GrError::Model(format!(
            "feature vector length {} does not match feature_dim {}",
            x.len(),
            params.config.feature_dim
        )));
    }
    if vocab.vocab_size() != params.config.vocab_size {
        return Err(GrError::Model(format!(
            "vocabulary size {} does not match model vocab_size {}",
            vocab.vocab_size(),
            params.config.vocab_size
        )));
    }
    let mut tape = Tape::new();
    let bound = bind_params(params, &mut tape, false);
    let xv = tape.constant(crate::tensor::Tensor::row_vector(x.to_vec()));
    let h = encoder_forward(&mut tape, xv, &bound)?;

    let mut rows = vec![tape.embed(bound.embedding, &[SOS_ID])?];
    let mut token_ids: Vec<u32> = Vec::new();
    let mut trace: Vec<Vec<f64>> = Vec::new();
    let terminated_by = loop {
        let x_emb = tape.stack_rows(&rows)?;
        let logits = decoder_forward_embedded(&mut tape, h, x_emb, &bound)?;
        let last = tape.slice_rows(logits, rows.len() - 1, 1)?;
        let row = tape.value(last).row(0).to_vec();
        let next = pick_next(&row);
        trace.push(row);
        if next == EOS_ID {
            break Termination::Eos;
        }
        token_ids.push(next);
        if token_ids.len() >= t_max {
            break Termination::TMax;
        }
        let next_row = if apply_mixup {
            embedding_mixup(&mut tape, last, bound.embedding, next, n_w)?
        } else {
            tape.embed(bound.embedding, &[next])?
        };
        rows.push(next_row);
    };
    let y = codec::decode(&token_ids, vocab)?;
    Ok((
        Prediction {
            y,
            token_ids,
            terminated_by,
        },
        trace,
    ))
}

/// Order-preserving map of [`predict`] over feature rows.
pub fn predict_batch(
    features: &[Vec<f64>],
    params: &ModelParams,
    vocab: &ValueVocabulary,
    t_max: usize,
    apply_mixup: bool,
    n_w: usize,
) -> Result<Vec<Prediction>> {
    features
        .iter()
        .map(|x| predict(x, params, vocab, t_max, apply_mixup, n_w))
        .collect()
}

/// Fraction of generated sequences whose decoded values increase
/// somewhere along the sequence. Generation is not constrained to be
/// non-increasing; this is a model-quality diagnostic.
pub fn monotonicity_violation_rate(preds: &[Prediction], vocab: &ValueVocabulary) -> Result<f64> {
    if preds.is_empty() {
        return Ok(0.0);
    }
    let mut violations = 0usize;
    for p in preds {
        if !codec::is_non_increasing(&p.token_ids, vocab)? {
            violations += 1;
        }
    }
    Ok(violations as f64 / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::vocab::build_manual;

    fn setup() -> (ModelConfig, crate::vocab::ValueVocabulary, ModelParams) {
        let vocab = build_manual(&[8.0, 4.0, 2.0, 1.0]).unwrap();
        let cfg = ModelConfig {
            feature_dim: 3,
            hidden_dim: 8,
            encoder_layers: 2,
            decoder_blocks: 1,
            attention_heads: 2,
            ffn_mult: 2,
            vocab_size: vocab.vocab_size(),
            t_max: 6,
            seed: 5,
        };
        let params = init_params(&cfg).unwrap();
        (cfg, vocab, params)
    }

    #[test]
    fn eos_biased_head_predicts_zero() {
        let (cfg, vocab, mut params) = setup();
        params.output.weight.fill(0.0);
        params.output.bias.fill(0.0);
        params.output.bias.set(0, EOS_ID as usize, 50.0);
        let pred = predict(&[0.1, 0.2, 0.3], &params, &vocab, cfg.t_max, true, 2).unwrap();
        assert_eq!(pred.y, 0.0);
        assert!(pred.token_ids.is_empty());
        assert_eq!(pred.terminated_by, Termination::Eos);
    }

    #[test]
    fn prediction_is_deterministic() {
        let (cfg, vocab, params) = setup();
        let a = predict(&[0.5, -0.5, 1.0], &params, &vocab, cfg.t_max, true, 2).unwrap();
        let b = predict(&[0.5, -0.5, 1.0], &params, &vocab, cfg.t_max, true, 2).unwrap();
        assert_eq!(a.y.to_bits(), b.y.to_bits());
        assert_eq!(a.token_ids, b.token_ids);
    }

    #[test]
    fn generation_never_emits_pad_or_sos_and_is_bounded() {
        let (cfg, vocab, params) = setup();
        for i in 0..20 {
            let x = [i as f64 * 0.3 - 3.0, (i as f64).sin(), 0.5];
            let pred = predict(&x, &params, &vocab, cfg.t_max, true, 2).unwrap();
            assert!(pred
                .token_ids
                .iter()
                .all(|id| *id != PAD_ID && *id != SOS_ID && *id != EOS_ID));
            assert!(pred.token_ids.len() <= cfg.t_max);
            assert!(pred.y <= cfg.t_max as f64 * 8.0);
            assert!(pred.y >= 0.0);
            match pred.terminated_by {
                Termination::Eos => {}
                Termination::TMax => assert_eq!(pred.token_ids.len(), cfg.t_max),
            }
        }
    }

    #[test]
    fn mixup_off_equals_window_of_one() {
        let (cfg, vocab, params) = setup();
        let x = [0.5, -0.5, 1.0];
        let a = predict(&x, &params, &vocab, cfg.t_max, false, 0).unwrap();
        let b = predict(&x, &params, &vocab, cfg.t_max, true, 0).unwrap();
        assert_eq!(a.y.to_bits(), b.y.to_bits());
        assert_eq!(a.token_ids, b.token_ids);
    }

    #[test]
    fn batch_matches_singles_and_preserves_order() {
        let (cfg, vocab, params) = setup();
        let features: Vec<Vec<f64>> = (0..7)
            .map(|i| vec![i as f64 * 0.4 - 1.0, 0.2, -0.6])
            .collect();
        let batch = predict_batch(&features, &params, &vocab, cfg.t_max, true, 2).unwrap();
        assert_eq!(batch.len(), 7);
        for (x, got) in features.iter().zip(&batch) {
            let single = predict(x, &params, &vocab, cfg.t_max, true, 2).unwrap();
            assert_eq!(single.y.to_bits(), got.y.to_bits());
            assert_eq!(single.token_ids, got.token_ids);
        }
        // Partitioning into chunks changes nothing.
        let first = predict_batch(&features[..3], &params, &vocab, cfg.t_max, true, 2).unwrap();
        let second = predict_batch(&features[3..], &params, &vocab, cfg.t_max, true, 2).unwrap();
        let rejoined: Vec<f64> = first.iter().chain(&second).map(|p| p.y).collect();
        let full: Vec<f64> = batch.iter().map(|p| p.y).collect();
        assert_eq!(rejoined, full);
    }

    #[test]
    fn traced_rows_cover_each_step() {
        let (cfg, vocab, params) = setup();
        let (pred, trace) = predict_traced(&[0.1, 0.9, -0.3], &params, &vocab, cfg.t_max, true, 2).unwrap();
        let steps = match pred.terminated_by {
            Termination::Eos => pred.token_ids.len() + 1,
            Termination::TMax => pred.token_ids.len(),
        };
        assert_eq!(trace.len(), steps);
        assert!(trace.iter().all(|row| row.len() == vocab.vocab_size()));
    }

    #[test]
    fn feature_mismatch_is_error() {
        let (cfg, vocab, params) = setup();
        assert!(predict(&[1.0], &params, &vocab, cfg.t_max, true, 2).is_err());
    }
}
