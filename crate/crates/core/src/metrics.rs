//! Evaluation metrics and diagnostics: MAE, pairwise ranking agreement
//! (XAUC), per-interval error breakdown, distribution statistics, and
//! the token-level embedding/probability diagnostics.

use crate::error::{GrError, Result};
use crate::rng::{Rng, Stream};
use crate::tensor::Tensor;
use crate::vocab::{ValueVocabulary, FIRST_VALUE_ID};
use serde::Serialize;

/// All-pairs enumeration is used up to this many samples; beyond it,
/// pairs are sampled with a fixed seed.
pub const XAUC_EXHAUSTIVE_LIMIT: usize = 2000;

pub fn mae(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(GrError::Metrics(format!(
            "mae needs equal nonzero lengths, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    let s: f64 = preds.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum();
    Ok(s / preds.len() as f64)
}

fn pair_score(pi: f64, pj: f64, yi: f64, yj: f64) -> Option<f64> {
    if yi == yj {
        return None; // label ties are skipped
    }
    if pi == pj {
        return Some(0.5);
    }
    let agree = (pi - pj) * (yi - yj) > 0.0;
    Some(if agree { 1.0 } else { 0.0 })
}

/// Fraction of pairs whose predicted ordering matches the label
/// ordering. Exhaustive below [`XAUC_EXHAUSTIVE_LIMIT`] samples,
/// seeded uniform pair sampling above. Prediction ties score one half;
/// label-tied pairs are skipped.
pub fn xauc(preds: &[f64], labels: &[f64], num_pairs: usize, seed: u64) -> Result<f64> {
    let n = preds.len();
    if n < 2 || n != labels.len() {
        return Err(GrError::Metrics(format!(
            "xauc needs two or more paired samples, got {} and {}",
            n,
            labels.len()
        )));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    if n <= XAUC_EXHAUSTIVE_LIMIT {
        for i in 0..n {
            for j in (i + 1)..n {
                if let Some(s) = pair_score(preds[i], preds[j], labels[i], labels[j]) {
                    total += s;
                    counted += 1;
                }
            }
        }
    } else {
        let mut rng = Rng::for_stream(seed, Stream::Metrics);
        for _ in 0..num_pairs {
            let i = rng.below(n);
            let mut j = rng.below(n - 1);
            if j >= i {
                j += 1;
            }
            if let Some(s) = pair_score(preds[i], preds[j], labels[i], labels[j]) {
                total += s;
                counted += 1;
            }
        }
    }
    if counted == 0 {
        return Err(GrError::Metrics("degenerate labels: every pair tied".into()));
    }
    Ok(total / counted as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct IntervalRow {
    pub lo: f64,
    /// None marks the trailing open interval.
    pub hi: Option<f64>,
    pub count: usize,
    pub mae: f64,
}

/// MAE per ground-truth interval [k*width, (k+1)*width). Labels at or
/// above `open_from` (when given) collapse into one trailing open
/// interval. Empty intervals are absent from the table.
pub fn interval_mae(
    preds: &[f64],
    labels: &[f64],
    width: f64,
    open_from: Option<f64>,
) -> Result<Vec<IntervalRow>> {
    if width <= 0.0 {
        return Err(GrError::Metrics("interval width must be positive".into()));
    }
    if preds.len() != labels.len() {
        return Err(GrError::Metrics("interval_mae needs equal lengths".into()));
    }
    use std::collections::BTreeMap;
    let mut sums: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    const OPEN_KEY: i64 = i64::MAX;
    for (p, y) in preds.iter().zip(labels) {
        let key = match open_from {
            Some(threshold) if *y >= threshold => OPEN_KEY,
            _ => (y / width).floor() as i64,
        };
        let e = sums.entry(key).or_insert((0.0, 0));
        e.0 += (p - y).abs();
        e.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(k, (sum, count))| {
            if k == OPEN_KEY {
                IntervalRow {
                    lo: open_from.unwrap(),
                    hi: None,
                    count,
                    mae: sum / count as f64,
                }
            } else {
                IntervalRow {
                    lo: k as f64 * width,
                    hi: Some((k + 1) as f64 * width),
                    count,
                    mae: sum / count as f64,
                }
            }
        })
        .collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct DistStats {
    pub pred_mean: f64,
    pub pred_var: f64,
    pub label_mean: f64,
    pub label_var: f64,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var)
}

/// Sample means and (unbiased) variances of both series.
pub fn distribution_stats(preds: &[f64], labels: &[f64]) -> DistStats {
    let (pm, pv) = mean_var(preds);
    let (lm, lv) = mean_var(labels);
    DistStats {
        pred_mean: pm,
        pred_var: pv,
        label_mean: lm,
        label_var: lv,
    }
}

/// Contribution-weighted sum of token embeddings for one encoded target:
/// `e = sum_t (g(s_t)/y) * E[s_t]`. Exported for offline visualization of
/// how token geometry organizes the label space.
pub fn aggregated_value_embedding(
    seq: &[u32],
    y: f64,
    vocab: &ValueVocabulary,
    embedding: &Tensor,
) -> Result<Vec<f64>> {
    if y <= 0.0 {
        return Err(GrError::Metrics("aggregated embedding needs y > 0".into()));
    }
    if seq.is_empty() {
        return Err(GrError::Metrics("aggregated embedding needs a non-empty sequence".into()));
    }
    let d = embedding.cols();
    let mut e = vec![0.0; d];
    for &id in seq {
        let g = vocab.value_of(id)?;
        let r = g / y;
        let row = embedding.row(id as usize);
        for (acc, v) in e.iter_mut().zip(row) {
            *acc += r * v;
        }
    }
    Ok(e)
}

/// Mean absolute probability difference between each value token and its
/// index neighbors, averaged over decoding steps. Probabilities are
/// renormalized over value tokens. Low scores for adjacent indices are
/// the signature of value-aware token geometry.
pub fn neighbor_prob_difference(logit_rows: &[Vec<f64>], vocab: &ValueVocabulary) -> Vec<f64> {
    let v = vocab.num_value_tokens();
    let first = FIRST_VALUE_ID as usize;
    let mut scores = vec![0.0; v];
    if logit_rows.is_empty() {
        return scores;
    }
    for row in logit_rows {
        // Softmax over value-token logits only.
        let slice = &row[first..first + v];
        let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = slice.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        for j in 0..v {
            let mut acc = 0.0;
            let mut cnt = 0;
            if j > 0 {
                acc += (probs[j] - probs[j - 1]).abs();
                cnt += 1;
            }
            if j + 1 < v {
                acc += (probs[j] - probs[j + 1]).abs();
                cnt += 1;
            }
            scores[j] += acc / cnt as f64;
        }
    }
    let n = logit_rows.len() as f64;
    scores.iter_mut().for_each(|s| *s /= n);
    scores
}

/// Full evaluation summary written by the evaluate command.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub mae: f64,
    pub xauc: f64,
    pub pred_mean: f64,
    pub pred_var: f64,
    pub label_mean: f64,
    pub label_var: f64,
    pub intervals: Vec<IntervalRow>,
    /// Sequence diagnostics, present for generative checkpoints only.
    pub monotonicity_violation_rate: Option<f64>,
    pub mean_seq_len: Option<f64>,
    pub max_seq_len: Option<usize>,
    pub eos_terminated: Option<usize>,
    pub tmax_terminated: Option<usize>,
}

/// Assemble the scalar part of an evaluation report; sequence fields
/// start empty and are filled by generative callers.
pub fn build_eval_report(
    preds: &[f64],
    labels: &[f64],
    interval_width: f64,
    open_from: Option<f64>,
    xauc_pairs: usize,
    seed: u64,
) -> Result<EvalReport> {
    let m = mae(preds, labels)?;
    let x = xauc(preds, labels, xauc_pairs, seed)?;
    let stats = distribution_stats(preds, labels);
    let intervals = interval_mae(preds, labels, interval_width, open_from)?;
    Ok(EvalReport {
        samples: preds.len(),
        mae: m,
        xauc: x,
        pred_mean: stats.pred_mean,
        pred_var: stats.pred_var,
        label_mean: stats.label_mean,
        label_var: stats.label_var,
        intervals,
        monotonicity_violation_rate: None,
        mean_seq_len: None,
        max_seq_len: None,
        eos_terminated: None,
        tmax_terminated: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::build_manual;

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[1.0, 3.0], &[2.0, 2.0]).unwrap(), 1.0);
        assert!(mae(&[], &[]).is_err());
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mae_matches_loop_oracle() {
        let mut rng = Rng::new(2);
        let preds: Vec<f64> = (0..1000).map(|_| rng.uniform(0.0, 50.0)).collect();
        let labels: Vec<f64> = (0..1000).map(|_| rng.uniform(0.0, 50.0)).collect();
        let mut acc = 0.0;
        for i in 0..1000 {
            acc += (preds[i] - labels[i]).abs();
        }
        assert!((mae(&preds, &labels).unwrap() - acc / 1000.0).abs() < 1e-12);
    }

    #[test]
    fn xauc_perfect_and_reversed() {
        let labels = [1.0, 5.0, 2.0, 9.0];
        let preds = [10.0, 50.0, 20.0, 90.0];
        assert_eq!(xauc(&preds, &labels, 0, 0).unwrap(), 1.0);
        let reversed: Vec<f64> = preds.iter().map(|p| -p).collect();
        assert_eq!(xauc(&reversed, &labels, 0, 0).unwrap(), 0.0);
    }

    #[test]
    fn xauc_brute_force_three_pairs() {
        // labels [1,2,3], preds [2,1,3]: pairs (0,1) wrong, (0,2) right,
        // (1,2) right -> 2/3.
        let got = xauc(&[2.0, 1.0, 3.0], &[1.0, 2.0, 3.0], 0, 0).unwrap();
        assert!((got - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn xauc_tie_policies() {
        // Prediction tie scores one half.
        let got = xauc(&[1.0, 1.0], &[0.0, 5.0], 0, 0).unwrap();
        assert_eq!(got, 0.5);
        // Label ties are skipped; all-tied labels are degenerate.
        assert!(xauc(&[1.0, 2.0], &[3.0, 3.0], 0, 0).is_err());
    }

    #[test]
    fn xauc_ranking_invariance_under_monotone_transform() {
        let mut rng = Rng::new(7);
        let labels: Vec<f64> = (0..200).map(|_| rng.uniform(0.0, 100.0)).collect();
        let preds: Vec<f64> = labels.iter().map(|y| (y + 1.0).ln() * 3.0 + 2.0).collect();
        assert_eq!(xauc(&preds, &labels, 0, 0).unwrap(), 1.0);
    }

    #[test]
    fn xauc_complement_identity() {
        let mut rng = Rng::new(8);
        let labels: Vec<f64> = (0..100).map(|_| rng.uniform(0.0, 10.0)).collect();
        let preds: Vec<f64> = (0..100).map(|_| rng.uniform(0.0, 10.0)).collect();
        let a = xauc(&preds, &labels, 0, 0).unwrap();
        let neg: Vec<f64> = preds.iter().map(|p| -p).collect();
        let b = xauc(&neg, &labels, 0, 0).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn xauc_sampled_path_is_deterministic() {
        let mut rng = Rng::new(9);
        let labels: Vec<f64> = (0..3000).map(|_| rng.uniform(0.0, 10.0)).collect();
        let preds: Vec<f64> = labels.iter().map(|y| y + rng.normal()).collect();
        let a = xauc(&preds, &labels, 20_000, 5).unwrap();
        let b = xauc(&preds, &labels, 20_000, 5).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.8, "noisy monotone preds should rank well, got {a}");
    }

    #[test]
    fn interval_mae_single_interval_equals_overall() {
        let preds = [1.0, 2.0, 3.0];
        let labels = [1.5, 1.5, 1.5];
        let rows = interval_mae(&preds, &labels, 2.0, None).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].count, 3);
        assert!((rows[0].mae - mae(&preds, &labels).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn interval_rows_recombine_to_overall_mae() {
        let mut rng = Rng::new(3);
        let labels: Vec<f64> = (0..500).map(|_| rng.uniform(0.0, 30.0)).collect();
        let preds: Vec<f64> = labels.iter().map(|y| y + rng.normal()).collect();
        let rows = interval_mae(&preds, &labels, 2.0, Some(10.0)).unwrap();
        let total: usize = rows.iter().map(|r| r.count).sum();
        assert_eq!(total, labels.len());
        let weighted: f64 = rows.iter().map(|r| r.mae * r.count as f64).sum::<f64>() / total as f64;
        assert!((weighted - mae(&preds, &labels).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn empty_intervals_are_absent() {
        let rows = interval_mae(&[1.0, 21.0], &[1.0, 21.0], 2.0, None).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].lo, 0.0);
        assert_eq!(rows[1].lo, 20.0);
    }

    #[test]
    fn distribution_stats_basics() {
        let s = distribution_stats(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]);
        assert_eq!(s.pred_var, 0.0);
        assert_eq!(s.pred_mean, 2.0);
        let t = distribution_stats(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]);
        assert_eq!(t.pred_mean, t.label_mean);
        assert_eq!(t.pred_var, t.label_var);
        // Two-pass oracle.
        let xs = [1.0, 2.0, 3.0];
        let m = xs.iter().sum::<f64>() / 3.0;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 2.0;
        assert!((t.label_var - v).abs() < 1e-12);
    }

    #[test]
    fn aggregated_embedding_single_token_is_its_row() {
        let vocab = build_manual(&[10.0, 5.0]).unwrap();
        let mut e = Tensor::zeros(5, 3);
        for i in 0..5 {
            for j in 0..3 {
                e.set(i, j, (i * 3 + j) as f64);
            }
        }
        // id 3 = value 10; exact single-token encoding of y=10 -> r=1.
        let agg = aggregated_value_embedding(&[3], 10.0, &vocab, &e).unwrap();
        assert_eq!(agg, e.row(3).to_vec());
        assert!(aggregated_value_embedding(&[3], 0.0, &vocab, &e).is_err());
        assert!(aggregated_value_embedding(&[], 10.0, &vocab, &e).is_err());
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn aggregated_embedding_matches_loop_oracle() {
        let vocab = build_manual(&[10.0, 5.0, 1.0]).unwrap();
        let mut rng = Rng::new(5);
        let e = Tensor::uniform(6, 4, 1.0, &mut rng);
        let seq = [3u32, 4, 5, 5];
        let y = 17.0;
        let got = aggregated_value_embedding(&seq, y, &vocab, &e).unwrap();
        let mut want = vec![0.0; 4];
        for &id in &seq {
            let r = vocab.value_of(id).unwrap() / y;
            for j in 0..4 {
                want[j] += r * e.at(id as usize, j);
            }
        }
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        // Weights r_t sum to decode(seq)/y = 1 for exact encodings.
        let r_sum: f64 = seq.iter().map(|id| vocab.value_of(*id).unwrap() / y).sum();
        assert!((r_sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn neighbor_diff_uniform_rows_are_zero() {
        let vocab = build_manual(&[3.0, 2.0, 1.0]).unwrap();
        let rows = vec![vec![0.0; 6]; 4];
        let scores = neighbor_prob_difference(&rows, &vocab);
        assert!(scores.iter().all(|s| s.abs() < 1e-12));
    }

    #[test]
    fn neighbor_diff_two_token_analytic() {
        // Renormalized value-token distribution (0.8, 0.2): both tokens
        // score |0.8 - 0.2| = 0.6.
        let vocab = build_manual(&[2.0, 1.0]).unwrap();
        let l1 = (0.8f64).ln();
        let l2 = (0.2f64).ln();
        let rows = vec![vec![-100.0, -100.0, -100.0, l1, l2]; 3];
        let scores = neighbor_prob_difference(&rows, &vocab);
        assert!((scores[0] - 0.6).abs() < 1e-12, "{scores:?}");
        assert!((scores[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn neighbor_diff_matches_loop_oracle() {
        let vocab = build_manual(&[4.0, 3.0, 2.0, 1.0]).unwrap();
        let mut rng = Rng::new(11);
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..7).map(|_| rng.uniform(-2.0, 2.0)).collect())
            .collect();
        let got = neighbor_prob_difference(&rows, &vocab);
        // Oracle: recompute with explicit loops.
        let mut want = [0.0; 4];
        for row in &rows {
            let vals = &row[3..7];
            let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = vals.iter().map(|x| (x - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let p: Vec<f64> = exps.iter().map(|e| e / z).collect();
            want[0] += (p[0] - p[1]).abs();
            want[1] += ((p[1] - p[0]).abs() + (p[1] - p[2]).abs()) / 2.0;
            want[2] += ((p[2] - p[1]).abs() + (p[2] - p[3]).abs()) / 2.0;
            want[3] += (p[3] - p[2]).abs();
        }
        for (g, w) in got.iter().zip(want.iter().map(|w| w / 10.0)) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}
