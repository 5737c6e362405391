//! Training objectives: supervised cross-entropy, the hard-negative
//! multi-binary loss, fused open-set targets, the open-set loss, the
//! double-filtered inlier loss, and distribution alignment.
//!
//! Pseudo-label targets (`p̃`, `q̃`, `S`) are plain [`Tensor`]s computed from
//! forward values, so they enter the tape as constants and never carry
//! gradient back into the heads that produced them.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tensor::{argmax, Tape, Tensor, Var};

/// Unseen-score cut used by the inlier filter; a sample is kept only when `S < 0.5`.
pub const UNSEEN_SCORE_CUT: f64 = 0.5;

/// Number of batch means kept by [`AlignmentState`].
pub const ALIGNMENT_HISTORY: usize = 128;

const ALIGN_FLOOR: f64 = 1e-8;

fn check_labels(tape: &Tape, probs: Var, labels: &[usize]) -> Result<(usize, usize)> {
    let (n, k) = tape.shape(probs);
    if labels.len() != n {
        return Err(Error::Shape {
            op: "labels",
            lhs: (n, k),
            rhs: (labels.len(), 1),
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Data(format!("label {y} out of range for {k} classes")));
    }
    Ok((n, k))
}

/// `(1/B)·Σ −log p[i, y_i]`.
pub fn supervised_loss(tape: &mut Tape, p: Var, labels: &[usize]) -> Result<Var> {
    let (n, _) = check_labels(tape, p, labels)?;
    let picked = tape.gather(p, labels)?;
    let logs = tape.log(picked);
    let total = tape.sum(logs);
    Ok(tape.scale(total, -1.0 / n.max(1) as f64))
}

/// `(1/B)·Σ [−log o[i, y_i] − min_{k≠y_i} log(1 − o[i, k])]`.
///
/// The minimum picks the hardest negative class per sample; ties go to the
/// lowest class index.
pub fn multi_binary_loss(tape: &mut Tape, o: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = check_labels(tape, o, labels)?;
    if k < 2 {
        return Err(Error::Config(
            "multi-binary loss needs at least 2 classes (no negative class exists)".into(),
        ));
    }
    let positive = tape.gather(o, labels)?;
    let log_pos = tape.log(positive);

    let outlier = tape.affine(o, -1.0, 1.0);
    let log_neg = tape.log(outlier);
    let hardest: Vec<usize> = tape
        .data(log_neg)
        .chunks_exact(k)
        .zip(labels)
        .map(|(row, &y)| {
            (0..k)
                .filter(|&j| j != y)
                .fold(None, |best: Option<usize>, j| match best {
                    Some(b) if row[b] <= row[j] => Some(b),
                    _ => Some(j),
                })
                .expect("k >= 2")
        })
        .collect();
    let log_hard = tape.gather(log_neg, &hardest)?;

    let per_row = tape.add(log_pos, log_hard)?;
    let total = tape.sum(per_row);
    Ok(tape.scale(total, -1.0 / n.max(1) as f64))
}

/// `(1/n)·Σ_i Σ_k w[i,k]·(−log pred[i,k])` with `w` already masked.
fn weighted_cross_entropy(tape: &mut Tape, weights: Tensor, pred: Var) -> Result<Var> {
    let n = weights.rows();
    let w = tape.constant(weights);
    let log_pred = tape.log(pred);
    let prod = tape.mul(w, log_pred)?;
    let total = tape.sum(prod);
    Ok(tape.scale(total, -1.0 / n.max(1) as f64))
}

/// Zeroes the rows of `target` where `keep` is false.
fn mask_rows(target: &Tensor, keep: &[bool]) -> Tensor {
    let mut out = target.clone();
    let cols = out.cols();
    for (row, &k) in out.data_mut().chunks_exact_mut(cols).zip(keep) {
        if !k {
            row.fill(0.0);
        }
    }
    out
}

fn check_prob_range(name: &str, t: &Tensor) -> Result<()> {
    if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Data(format!("{name} entries must lie in [0, 1]")));
    }
    Ok(())
}

/// Fused (K+1)-way open-set targets.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenSetTarget {
    /// n×(K+1); the last column is the unseen score.
    pub q_tilde: Tensor,
    /// n×1 unseen score `S`.
    pub unseen_score: Tensor,
    /// n×K aligned closed-set prediction the target was built from.
    pub p_tilde: Tensor,
}

impl OpenSetTarget {
    pub fn num_classes(&self) -> usize {
        self.p_tilde.cols()
    }

    pub fn unseen_scores(&self) -> &[f64] {
        self.unseen_score.data()
    }

    /// Rows whose largest fused probability exceeds `tau_q`.
    pub fn open_mask(&self, tau_q: f64) -> Vec<bool> {
        self.q_tilde.row_max().into_iter().map(|m| m > tau_q).collect()
    }

    /// Rows passing the double filter at `tau_p`.
    pub fn inlier_mask(&self, tau_p: f64) -> Vec<bool> {
        self.p_tilde
            .iter_rows()
            .zip(self.unseen_scores())
            .map(|(p, &s)| inlier_filter(p, s, tau_p))
            .collect()
    }
}

/// `q̃_k = p̃_k·o_k` for seen classes and `q̃_K = S = Σ_j p̃_j·(1 − o_j)`.
pub fn open_set_targets(p_tilde: &Tensor, o_w: &Tensor) -> Result<OpenSetTarget> {
    if p_tilde.shape() != o_w.shape() {
        return Err(Error::Shape {
            op: "open_set_targets",
            lhs: p_tilde.shape(),
            rhs: o_w.shape(),
        });
    }
    check_prob_range("o_w", o_w)?;
    let (n, k) = p_tilde.shape();
    let mut q = Vec::with_capacity(n * (k + 1));
    let mut scores = Vec::with_capacity(n);
    for (p, o) in p_tilde.iter_rows().zip(o_w.iter_rows()) {
        q.extend(p.iter().zip(o).map(|(pk, ok)| pk * ok));
        let s: f64 = p.iter().zip(o).map(|(pk, ok)| pk * (1.0 - ok)).sum();
        let s = s.clamp(0.0, 1.0);
        q.push(s);
        scores.push(s);
    }
    Ok(OpenSetTarget {
        q_tilde: Tensor::new(n, k + 1, q)?,
        unseen_score: Tensor::new(n, 1, scores)?,
        p_tilde: p_tilde.clone(),
    })
}

/// `(1/μB)·Σ 1(max_k q̃_ik > τ_q)·H(q̃_i, q^s_i)`. Returns the loss and the
/// number of selected rows.
pub fn open_set_loss(tape: &mut Tape, target: &OpenSetTarget, q_s: Var, tau_q: f64) -> Result<(Var, usize)> {
    if tape.shape(q_s) != target.q_tilde.shape() {
        return Err(Error::Shape {
            op: "open_set_loss",
            lhs: target.q_tilde.shape(),
            rhs: tape.shape(q_s),
        });
    }
    let keep = target.open_mask(tau_q);
    let selected = keep.iter().filter(|&&k| k).count();
    let weights = mask_rows(&target.q_tilde, &keep);
    Ok((weighted_cross_entropy(tape, weights, q_s)?, selected))
}

/// Double filter: confident (`max p̃ > τ_p`) and not a likely outlier (`S < 0.5`).
pub fn inlier_filter(p_tilde_row: &[f64], unseen_score: f64, tau_p: f64) -> bool {
    let conf = p_tilde_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    conf > tau_p && unseen_score < UNSEEN_SCORE_CUT
}

/// `(1/μB)·Σ F(u_i)·H(target_i, p^s_i)`, where the target is `p̃_i` itself
/// or, with `hard_labels`, the one-hot of its argmax.
pub fn unlabeled_inlier_loss(
    tape: &mut Tape,
    p_tilde: &Tensor,
    unseen_score: &[f64],
    p_s: Var,
    tau_p: f64,
    hard_labels: bool,
) -> Result<(Var, usize)> {
    if tape.shape(p_s) != p_tilde.shape() || unseen_score.len() != p_tilde.rows() {
        return Err(Error::Shape {
            op: "unlabeled_inlier_loss",
            lhs: p_tilde.shape(),
            rhs: tape.shape(p_s),
        });
    }
    let keep: Vec<bool> = p_tilde
        .iter_rows()
        .zip(unseen_score)
        .map(|(p, &s)| inlier_filter(p, s, tau_p))
        .collect();
    let selected = keep.iter().filter(|&&k| k).count();
    let target = if hard_labels {
        Tensor::one_hot(&p_tilde.row_argmax(), p_tilde.cols())?
    } else {
        p_tilde.clone()
    };
    let weights = mask_rows(&target, &keep);
    Ok((weighted_cross_entropy(tape, weights, p_s)?, selected))
}

/// FixMatch-style consistency: hard pseudo-labels from the weak view where
/// `max p^w > τ`, cross-entropy against the strong view.
pub fn confidence_consistency_loss(tape: &mut Tape, p_w: &Tensor, p_s: Var, tau: f64) -> Result<(Var, usize)> {
    if tape.shape(p_s) != p_w.shape() {
        return Err(Error::Shape {
            op: "confidence_consistency_loss",
            lhs: p_w.shape(),
            rhs: tape.shape(p_s),
        });
    }
    let keep: Vec<bool> = p_w.row_max().into_iter().map(|m| m > tau).collect();
    let selected = keep.iter().filter(|&&k| k).count();
    let target = Tensor::one_hot(&p_w.row_argmax(), p_w.cols())?;
    let weights = mask_rows(&target, &keep);
    Ok((weighted_cross_entropy(tape, weights, p_s)?, selected))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub multi_binary: f64,
    pub unlabeled_inlier: f64,
    pub open_set: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            multi_binary: 1.0,
            unlabeled_inlier: 1.0,
            open_set: 1.0,
        }
    }
}

/// Loss terms recorded on a tape. Terms a mode does not compute are `None`.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub l_s: Var,
    pub l_mb: Option<Var>,
    pub l_ui: Option<Var>,
    pub l_op: Option<Var>,
    pub n_selected_inliers: usize,
    pub n_selected_open: usize,
}

/// Scalar values of every loss component for one iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_mb: f64,
    pub l_ui: f64,
    pub l_op: f64,
    pub l_overall: f64,
    pub n_selected_inliers: usize,
    pub n_selected_open: usize,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_s, self.l_mb, self.l_ui, self.l_op, self.l_overall]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `L_s + λ_mb·L_mb + λ_ui·L_ui + λ_op·L_op`. A zero weight drops its term
/// from the tape entirely.
pub fn overall_loss(tape: &mut Tape, terms: &LossTerms, weights: &LossWeights) -> Result<(Var, LossBreakdown)> {
    let weighted = [
        ("lambda_mb", weights.multi_binary, terms.l_mb),
        ("lambda_ui", weights.unlabeled_inlier, terms.l_ui),
        ("lambda_op", weights.open_set, terms.l_op),
    ];
    let mut total = terms.l_s;
    for (key, w, term) in weighted {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::range(key, "must be finite and >= 0"));
        }
        if let Some(t) = term.filter(|_| w != 0.0) {
            let scaled = tape.scale(t, w);
            total = tape.add(total, scaled)?;
        }
    }
    let value = |t: Option<Var>| t.map(|v| tape.scalar(v)).unwrap_or(0.0);
    let breakdown = LossBreakdown {
        l_s: tape.scalar(terms.l_s),
        l_mb: value(terms.l_mb),
        l_ui: value(terms.l_ui),
        l_op: value(terms.l_op),
        l_overall: tape.scalar(total),
        n_selected_inliers: terms.n_selected_inliers,
        n_selected_open: terms.n_selected_open,
    };
    Ok((total, breakdown))
}

/// Running statistics for distribution alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentState {
    history: VecDeque<Vec<f64>>,
    capacity: usize,
    p_avg: Vec<f64>,
    p_mrgl: Vec<f64>,
}

impl AlignmentState {
    /// Starts with `p_avg = p_mrgl`, so the first alignment is the identity.
    pub fn new(p_mrgl: Vec<f64>) -> Result<Self> {
        let sum: f64 = p_mrgl.iter().sum();
        if p_mrgl.is_empty() || p_mrgl.iter().any(|&v| !(v > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Data("marginal must be a strictly positive simplex vector".into()));
        }
        Ok(Self {
            history: VecDeque::with_capacity(ALIGNMENT_HISTORY),
            capacity: ALIGNMENT_HISTORY,
            p_avg: p_mrgl.clone(),
            p_mrgl,
        })
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self::new(vec![1.0 / num_classes as f64; num_classes]).expect("uniform is a simplex")
    }

    pub fn p_avg(&self) -> &[f64] {
        &self.p_avg
    }

    pub fn p_mrgl(&self) -> &[f64] {
        &self.p_mrgl
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    /// `normalize(p ⊙ p_mrgl / p_avg)` per row; leaves the state untouched.
    pub fn align(&self, p: &Tensor) -> Result<Tensor> {
        if p.cols() != self.p_mrgl.len() {
            return Err(Error::Shape {
                op: "distribution_align",
                lhs: p.shape(),
                rhs: (1, self.p_mrgl.len()),
            });
        }
        let ratio: Vec<f64> = self
            .p_mrgl
            .iter()
            .zip(&self.p_avg)
            .map(|(m, a)| m / a.max(ALIGN_FLOOR))
            .collect();
        let mut out = p.clone();
        let k = out.cols();
        for row in out.data_mut().chunks_exact_mut(k) {
            row.iter_mut().zip(&ratio).for_each(|(v, r)| *v *= r);
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        Ok(out)
    }

    /// Pushes this batch's mean prediction and refreshes `p_avg`.
    pub fn record(&mut self, p: &Tensor) {
        if p.rows() == 0 {
            return;
        }
        self.record_mean(p.col_means());
    }

    pub fn record_mean(&mut self, mean: Vec<f64>) {
        if self.history.len() == self.capacity {
            self.history.pop_front();
        }
        self.history.push_back(mean);
        let k = self.p_mrgl.len();
        let mut avg = vec![0.0; k];
        for m in &self.history {
            avg.iter_mut().zip(m).for_each(|(a, v)| *a += v);
        }
        let total: f64 = avg.iter().sum();
        if total > 0.0 {
            avg.iter_mut().for_each(|a| *a /= total);
            self.p_avg = avg;
        }
    }
}

/// Aligns `p_w` against the running statistics, then records the batch.
/// With `enabled == false` the input is returned and the state is untouched.
pub fn distribution_align(p_w: &Tensor, state: &mut AlignmentState, enabled: bool) -> Result<Tensor> {
    if !enabled {
        return Ok(p_w.clone());
    }
    let aligned = state.align(p_w)?;
    state.record(p_w);
    Ok(aligned)
}

/// Argmax of the fused target for each row; index `K` means outlier.
pub fn open_set_pseudo_labels(target: &OpenSetTarget) -> Vec<usize> {
    target.q_tilde.iter_rows().map(argmax).collect()
}
