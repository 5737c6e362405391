//! Inference rules and metrics: closed-set accuracy, balanced accuracy over
//! K+1 classes, and the pseudo-label utilization rate.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{HiddenLabel, LabeledSplit, OpenSetDataset};
use crate::error::{Error, Result};
use crate::nn::{NetworkParams, Predictions};
use crate::objectives::{open_set_pseudo_labels, open_set_targets, AlignmentState, LossBreakdown};
use crate::tensor::{argmax, Tensor};
use crate::train::{ClosedSetHead, Mode, TrainConfig};

/// Seen-class prediction via `argmax φ(f(x))`, lowest index on ties.
pub fn predict_closed(params: &NetworkParams, x: &Tensor) -> Result<Vec<usize>> {
    Ok(params.predict(x)?.p.row_argmax())
}

/// Open-set prediction via `argmax ψ(g(f(x)))`; `K` means outlier.
pub fn predict_open(params: &NetworkParams, x: &Tensor) -> Result<Vec<usize>> {
    Ok(params.predict(x)?.q_open.row_argmax())
}

/// Seen-class prediction from the open-set head with its outlier column dropped.
pub fn predict_closed_via_open(params: &NetworkParams, x: &Tensor) -> Result<Vec<usize>> {
    let q = params.predict(x)?.q_open;
    let k = q.cols() - 1;
    Ok(q.iter_rows().map(|r| argmax(&r[..k])).collect())
}

/// Recall per class; `None` for classes absent from `truth`.
pub fn per_class_recall(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<Vec<Option<f64>>> {
    if pred.len() != truth.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&c| c >= n_classes) {
        return Err(Error::Data(format!("class index {bad} out of range for {n_classes} classes")));
    }
    let mut hits = vec![0usize; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[t] += 1;
        if p == t {
            hits[t] += 1;
        }
    }
    Ok(hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
        .collect())
}

/// Mean per-class recall. Classes that never occur in `truth` are left out
/// of the mean (with a warning) instead of contributing `0/0`.
pub fn balanced_accuracy(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<f64> {
    mean_recall(&per_class_recall(pred, truth, n_classes)?)
}

fn mean_recall(recalls: &[Option<f64>]) -> Result<f64> {
    let present: Vec<f64> = recalls.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Data("balanced accuracy needs at least one labeled row".into()));
    }
    if present.len() < recalls.len() {
        let missing: Vec<usize> = recalls
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_none())
            .map(|(i, _)| i)
            .collect();
        warn!("classes {missing:?} absent from ground truth; excluded from balanced accuracy");
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Share of unlabeled rows that were selected *and* received the correct
/// pseudo-label. Rows with unknown ground truth are left out of both
/// numerator and denominator.
///
/// `pseudo_labels` live in the open-set space (`K` = outlier), so an
/// outlier pseudo-label is correct for any unseen-class row.
pub fn utilization_rate(selected: &[bool], pseudo_labels: &[usize], truth: &[HiddenLabel], num_seen: usize) -> f64 {
    let known = truth.iter().filter(|t| **t != HiddenLabel::Unknown).count();
    if known == 0 {
        return 0.0;
    }
    let correct = selected
        .iter()
        .zip(pseudo_labels)
        .zip(truth)
        .filter(|((&s, &p), t)| s && t.open_index(num_seen) == Some(p))
        .count();
    correct as f64 / known as f64
}

/// Held-out data needed for per-epoch evaluation.
#[derive(Debug, Clone)]
pub struct EvalContext {
    pub test: LabeledSplit,
    pub unlabeled_x: Tensor,
    pub unlabeled_truth: Vec<HiddenLabel>,
    pub num_seen: usize,
}

impl EvalContext {
    pub fn from_dataset(ds: &OpenSetDataset) -> Self {
        Self {
            test: ds.test_split(),
            unlabeled_x: ds.features.select_rows(&ds.unlabeled_idx),
            unlabeled_truth: ds.unlabeled_truth(),
            num_seen: ds.num_seen(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub closed_acc: f64,
    pub open_ba: f64,
    /// K+1 entries; `None` when a class has no test rows.
    pub per_class_recall: Vec<Option<f64>>,
    pub util_rate: f64,
}

/// Per-epoch metrics row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub l_s: f64,
    pub l_mb: f64,
    pub l_ui: f64,
    pub l_op: f64,
    pub l_overall: f64,
    pub closed_acc: f64,
    pub open_ba: f64,
    pub util_rate: f64,
    pub n_selected_inliers: usize,
    pub n_selected_open: usize,
    #[serde(skip)]
    pub per_class_recall: Vec<Option<f64>>,
}

impl MetricsRecord {
    /// Epoch means of the loss components and totals of the selection counts.
    pub fn new(epoch: usize, losses: &[LossBreakdown], eval: EvalResult) -> Self {
        let n = losses.len().max(1) as f64;
        let mean = |f: fn(&LossBreakdown) -> f64| losses.iter().map(f).sum::<f64>() / n;
        Self {
            epoch,
            l_s: mean(|b| b.l_s),
            l_mb: mean(|b| b.l_mb),
            l_ui: mean(|b| b.l_ui),
            l_op: mean(|b| b.l_op),
            l_overall: mean(|b| b.l_overall),
            closed_acc: eval.closed_acc,
            open_ba: eval.open_ba,
            util_rate: eval.util_rate,
            n_selected_inliers: losses.iter().map(|b| b.n_selected_inliers).sum(),
            n_selected_open: losses.iter().map(|b| b.n_selected_open).sum(),
            per_class_recall: eval.per_class_recall,
        }
    }
}

/// Pseudo-label selection over the whole unlabeled pool, as the given mode
/// would make it from clean (unaugmented) features.
pub fn pool_selection(
    params: &NetworkParams,
    x: &Tensor,
    config: &TrainConfig,
    alignment: &AlignmentState,
) -> Result<(Vec<bool>, Vec<usize>)> {
    match config.mode {
        Mode::Supervised => Ok((vec![false; x.rows()], vec![0; x.rows()])),
        Mode::FixMatch => {
            let p = params.predict(x)?.p;
            let selected = p.row_max().into_iter().map(|m| m > config.tau_p).collect();
            Ok((selected, p.row_argmax()))
        }
        Mode::IoMatch => {
            let Predictions { p, o, .. } = params.predict(x)?;
            let p_tilde = if config.da_enabled { alignment.align(&p)? } else { p };
            let target = open_set_targets(&p_tilde, &o)?;
            Ok((target.open_mask(config.tau_q), open_set_pseudo_labels(&target)))
        }
    }
}

pub fn evaluate(
    params: &NetworkParams,
    ctx: &EvalContext,
    config: &TrainConfig,
    alignment: &AlignmentState,
) -> Result<EvalResult> {
    let k = ctx.num_seen;
    let test = &ctx.test;

    let closed = match config.closed_eval_head {
        ClosedSetHead::Closed => predict_closed(params, &test.x)?,
        ClosedSetHead::Open => predict_closed_via_open(params, &test.x)?,
    };
    let (mut hits, mut seen) = (0usize, 0usize);
    for (&p, t) in closed.iter().zip(&test.truth) {
        if let HiddenLabel::Seen(y) = t {
            seen += 1;
            hits += usize::from(p == *y);
        }
    }
    let closed_acc = if seen > 0 { hits as f64 / seen as f64 } else { 0.0 };

    // Closed-set baselines have no outlier class and never predict it.
    let open_pred = match config.mode {
        Mode::IoMatch => predict_open(params, &test.x)?,
        Mode::FixMatch | Mode::Supervised => closed,
    };
    let (pred, truth): (Vec<usize>, Vec<usize>) = open_pred
        .iter()
        .zip(&test.truth)
        .filter_map(|(&p, t)| t.open_index(k).map(|t| (p, t)))
        .unzip();
    let per_class_recall = per_class_recall(&pred, &truth, k + 1)?;
    let open_ba = mean_recall(&per_class_recall)?;

    let (selected, pseudo) = pool_selection(params, &ctx.unlabeled_x, config, alignment)?;
    let util_rate = utilization_rate(&selected, &pseudo, &ctx.unlabeled_truth, k);

    Ok(EvalResult {
        closed_acc,
        open_ba,
        per_class_recall,
        util_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ba_examples() {
        assert_eq!(balanced_accuracy(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);

        // recalls 1.0, 0.5, 0.0
        let truth = [0, 1, 1, 2];
        let pred = [0, 1, 0, 0];
        assert_eq!(balanced_accuracy(&pred, &truth, 3).unwrap(), 0.5);

        // constant predictor on imbalanced truth
        let truth = [0, 0, 0, 0, 0, 0, 0, 1];
        assert_eq!(balanced_accuracy(&[0; 8], &truth, 2).unwrap(), 0.5);
    }

    #[test]
    fn ba_skips_absent_class() {
        let r = per_class_recall(&[0, 1], &[0, 0], 3).unwrap();
        assert_eq!(r, vec![Some(0.5), None, None]);
        assert_eq!(balanced_accuracy(&[0, 1], &[0, 0], 3).unwrap(), 0.5);
    }

    #[test]
    fn ba_rejects_out_of_range() {
        assert!(balanced_accuracy(&[3], &[0], 3).is_err());
    }

    #[test]
    fn utilization_examples() {
        use HiddenLabel::*;
        let truth = [Seen(0), Seen(1), Outlier, Outlier, Seen(0), Seen(1), Seen(0), Outlier, Seen(1), Seen(0)];
        let pseudo = [0, 0, 2, 1, 0, 1, 0, 2, 0, 0];
        // 6 selected, of which 4 correct (rows 0, 2, 4, 5)
        let selected = [true, true, true, true, true, true, false, false, false, false];
        assert_eq!(utilization_rate(&selected, &pseudo, &truth, 2), 0.4);
        assert_eq!(utilization_rate(&[false; 10], &pseudo, &truth, 2), 0.0);

        let perfect: Vec<usize> = truth.iter().map(|t| t.open_index(2).unwrap()).collect();
        assert_eq!(utilization_rate(&[true; 10], &perfect, &truth, 2), 1.0);
    }

    #[test]
    fn utilization_ignores_unknown_truth() {
        use HiddenLabel::*;
        let truth = [Seen(0), Unknown];
        assert_eq!(utilization_rate(&[true, true], &[0, 0], &truth, 2), 1.0);
    }
}
