//! Training loop for the three modes: `iomatch`, the `fixmatch` baseline, and
//! `supervised` only.

use std::fmt;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::data::{
    augment, next_batch, next_labeled_batch, AugmentSpec, BatchStreams, LabeledBatch, OpenSetDataset, Strength,
    TrainView, UnlabeledBatch,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalContext, MetricsRecord};
use crate::nn::{forward, forward_closed, NetworkDims, NetworkParams};
use crate::objectives::{
    confidence_consistency_loss, distribution_align, multi_binary_loss, open_set_loss, open_set_targets, overall_loss,
    supervised_loss, unlabeled_inlier_loss, AlignmentState, LossBreakdown, LossTerms, LossWeights,
};
use crate::tensor::{cosine_lr, Sgd, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    IoMatch,
    #[serde(alias = "fixmatch-baseline")]
    FixMatch,
    #[serde(alias = "supervised-only")]
    Supervised,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::IoMatch, Mode::FixMatch, Mode::Supervised];

    pub fn name(self) -> &'static str {
        match self {
            Mode::IoMatch => "iomatch",
            Mode::FixMatch => "fixmatch",
            Mode::Supervised => "supervised",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which head supplies closed-set predictions at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClosedSetHead {
    /// `argmax φ`, the default.
    Closed,
    /// `argmax ψ` over the seen columns only.
    Open,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    /// Number of epochs `N_e`.
    pub epochs: usize,
    /// Iterations per epoch `N_i`.
    pub iters_per_epoch: usize,
    /// Labeled batch size `B`.
    pub batch_size: usize,
    /// Unlabeled-to-labeled ratio `μ`.
    pub mu: usize,
    pub lr: f64,
    pub momentum: f64,
    pub cosine_decay: bool,
    pub tau_p: f64,
    pub tau_q: f64,
    pub lambda_mb: f64,
    pub lambda_ui: f64,
    pub lambda_op: f64,
    pub da_enabled: bool,
    pub hard_labels: bool,
    pub closed_eval_head: ClosedSetHead,
    pub augment: AugmentSpec,
    pub dims: NetworkDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::IoMatch,
            seed: 0,
            epochs: 30,
            iters_per_epoch: 32,
            batch_size: 64,
            mu: 7,
            lr: 0.03,
            momentum: 0.9,
            cosine_decay: true,
            tau_p: 0.95,
            tau_q: 0.5,
            lambda_mb: 1.0,
            lambda_ui: 1.0,
            lambda_op: 1.0,
            da_enabled: true,
            hard_labels: false,
            closed_eval_head: ClosedSetHead::Closed,
            augment: AugmentSpec::default(),
            dims: NetworkDims::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("iters_per_epoch", self.iters_per_epoch),
            ("batch_size", self.batch_size),
            ("mu", self.mu),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::range(key, "must be >= 1"));
            }
        }
        for (key, v) in [("tau_p", self.tau_p), ("tau_q", self.tau_q)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::range(key, "must lie in [0, 1]"));
            }
        }
        for (key, v) in [
            ("lambda_mb", self.lambda_mb),
            ("lambda_ui", self.lambda_ui),
            ("lambda_op", self.lambda_op),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::range(key, "must be finite and >= 0"));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::range("lr", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::range("momentum", "must lie in [0, 1)"));
        }
        self.augment.validate()?;
        self.dims.validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            multi_binary: self.lambda_mb,
            unlabeled_inlier: self.lambda_ui,
            open_set: self.lambda_op,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.iters_per_epoch
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.cosine_decay {
            cosine_lr(self.lr, step, self.total_steps())
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone)]
pub struct BestCheckpoint {
    pub params: NetworkParams,
    pub epoch: usize,
    pub closed_acc: f64,
}

/// Everything that evolves during a run.
#[derive(Debug, Clone)]
pub struct RunState {
    pub params: NetworkParams,
    pub optimizer: Sgd,
    pub alignment: AlignmentState,
    pub streams: BatchStreams,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub best: Option<BestCheckpoint>,
    pub history: Vec<MetricsRecord>,
    /// Loss breakdown of every iteration, in order.
    pub iterations: Vec<LossBreakdown>,
}

impl RunState {
    /// Fresh state. The network input width is taken from `input_dim`, not
    /// from `config.dims`.
    pub fn new(config: &TrainConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let dims = NetworkDims {
            input_dim,
            ..config.dims.clone()
        };
        Ok(Self {
            params: NetworkParams::init(config.seed, &dims, num_classes)?,
            optimizer: Sgd::new(config.momentum)?,
            alignment: AlignmentState::uniform(num_classes),
            streams: BatchStreams::new(config.seed),
            epoch: 0,
            step: 0,
            best: None,
            history: Vec::new(),
            iterations: Vec::new(),
        })
    }
}

fn batch_stats(name: &str, x: &Tensor) -> String {
    let d = x.data();
    if d.is_empty() {
        return format!("{name}: empty");
    }
    let finite = d.iter().filter(|v| v.is_finite()).count();
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    format!(
        "{name}: shape {:?}, mean {mean:.4e}, min {min:.4e}, max {max:.4e}, finite {finite}/{}",
        x.shape(),
        d.len()
    )
}

fn non_finite(state: &RunState, first: String, views: [(&str, Option<&Tensor>); 3]) -> Error {
    let mut diagnostics = vec![first];
    diagnostics.extend(views.iter().filter_map(|(name, x)| x.map(|x| batch_stats(name, x))));
    Error::NonFinite {
        epoch: state.epoch,
        iteration: state.step,
        diagnostics: diagnostics.join("\n"),
    }
}

fn all_finite(x: &Tensor) -> bool {
    x.data().iter().all(|v| v.is_finite())
}

/// One optimizer step. Augmentation draws from the state's streams: the
/// labeled side from the labeled stream, both unlabeled views from the
/// unlabeled stream.
pub fn train_iteration(
    state: &mut RunState,
    labeled: &LabeledBatch,
    unlabeled: &UnlabeledBatch,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    let x_l = augment(&labeled.x, &config.augment, Strength::Weak, &mut state.streams.labeled);
    let (x_uw, x_us) = if config.mode == Mode::Supervised {
        (None, None)
    } else {
        let rng = &mut state.streams.unlabeled;
        let w = augment(&unlabeled.x, &config.augment, Strength::Weak, rng);
        let s = augment(&unlabeled.x, &config.augment, Strength::Strong, rng);
        (Some(w), Some(s))
    };

    let views = [
        ("labeled x", Some(&x_l)),
        ("unlabeled weak x", x_uw.as_ref()),
        ("unlabeled strong x", x_us.as_ref()),
    ];
    let mut tape = Tape::new();
    let bound = state.params.bind(&mut tape);
    let terms = match (config.mode, &x_uw, &x_us) {
        (Mode::Supervised, _, _) => {
            let out = forward_closed(&mut tape, &bound, &x_l)?;
            LossTerms {
                l_s: supervised_loss(&mut tape, out.p, &labeled.y)?,
                l_mb: None,
                l_ui: None,
                l_op: None,
                n_selected_inliers: 0,
                n_selected_open: 0,
            }
        }
        (Mode::FixMatch, Some(uw), Some(us)) => {
            let out = forward_closed(&mut tape, &bound, &x_l)?;
            let l_s = supervised_loss(&mut tape, out.p, &labeled.y)?;
            // The weak view only supplies targets, so it stays off the tape.
            let p_w = state.params.predict(uw)?.p;
            if !all_finite(&p_w) {
                return Err(non_finite(state, "weak-view predictions".into(), views));
            }
            let strong = forward_closed(&mut tape, &bound, us)?;
            let (l_ui, n) = confidence_consistency_loss(&mut tape, &p_w, strong.p, config.tau_p)?;
            LossTerms {
                l_s,
                l_mb: None,
                l_ui: Some(l_ui),
                l_op: None,
                n_selected_inliers: n,
                n_selected_open: 0,
            }
        }
        (Mode::IoMatch, Some(uw), Some(us)) => {
            let out = forward(&mut tape, &bound, &x_l)?;
            let weak = state.params.predict(uw)?;
            if !all_finite(&weak.p) || !all_finite(&weak.o) {
                return Err(non_finite(state, "weak-view predictions".into(), views));
            }
            let strong = forward(&mut tape, &bound, us)?;
            let l_s = supervised_loss(&mut tape, out.p, &labeled.y)?;
            let l_mb = multi_binary_loss(&mut tape, out.o, &labeled.y)?;
            let p_tilde = distribution_align(&weak.p, &mut state.alignment, config.da_enabled)?;
            let target = open_set_targets(&p_tilde, &weak.o)?;
            let (l_op, n_open) = open_set_loss(&mut tape, &target, strong.q_open, config.tau_q)?;
            let (l_ui, n_in) = unlabeled_inlier_loss(
                &mut tape,
                &p_tilde,
                target.unseen_scores(),
                strong.p,
                config.tau_p,
                config.hard_labels,
            )?;
            LossTerms {
                l_s,
                l_mb: Some(l_mb),
                l_ui: Some(l_ui),
                l_op: Some(l_op),
                n_selected_inliers: n_in,
                n_selected_open: n_open,
            }
        }
        _ => unreachable!("unlabeled views are built for every semi-supervised mode"),
    };

    let (total, breakdown) = overall_loss(&mut tape, &terms, &config.weights())?;
    if !breakdown.is_finite() {
        return Err(non_finite(state, format!("losses: {breakdown:?}"), views));
    }

    let grads = tape.backward(total)?;
    state.params.absorb_grads(&bound, &grads)?;
    let lr = config.lr_at(state.step);
    state.optimizer.step(state.params.tensors_mut(), lr)?;
    state.step += 1;
    state.iterations.push(breakdown);
    Ok(breakdown)
}

/// Runs `epochs × iters_per_epoch` iterations, evaluating after every epoch.
pub fn train_run(dataset: &OpenSetDataset, config: &TrainConfig) -> Result<RunState> {
    let view = dataset.train_view();
    let ctx = EvalContext::from_dataset(dataset);
    let mut state = RunState::new(config, dataset.input_dim(), dataset.num_seen())?;
    for _ in 0..config.epochs {
        run_epoch(&mut state, &view, &ctx, config)?;
    }
    Ok(state)
}

/// One epoch of training followed by evaluation and best-checkpoint upkeep.
pub fn run_epoch<'s>(
    state: &'s mut RunState,
    view: &TrainView,
    ctx: &EvalContext,
    config: &TrainConfig,
) -> Result<&'s MetricsRecord> {
    let mut losses = Vec::with_capacity(config.iters_per_epoch);
    for _ in 0..config.iters_per_epoch {
        let (labeled, unlabeled) = if config.mode == Mode::Supervised {
            // Supervised-only never touches the unlabeled stream.
            let labeled = next_labeled_batch(view, config.batch_size, &mut state.streams.labeled)?;
            let empty = UnlabeledBatch {
                indices: Vec::new(),
                x: Tensor::zeros(0, view.labeled_x.cols()),
            };
            (labeled, empty)
        } else {
            next_batch(view, config.batch_size, config.mu, &mut state.streams)?
        };
        losses.push(train_iteration(state, &labeled, &unlabeled, config)?);
    }

    let eval = evaluate(&state.params, ctx, config, &state.alignment)?;
    let record = MetricsRecord::new(state.epoch, &losses, eval);
    debug!(
        "{} epoch {}: l_overall {:.4} closed_acc {:.4} open_ba {:.4} util {:.4}",
        config.mode, record.epoch, record.l_overall, record.closed_acc, record.open_ba, record.util_rate
    );
    if state.best.as_ref().is_none_or(|b| record.closed_acc > b.closed_acc) {
        state.best = Some(BestCheckpoint {
            params: state.params.clone(),
            epoch: record.epoch,
            closed_acc: record.closed_acc,
        });
    }
    state.history.push(record);
    state.epoch += 1;
    Ok(state.history.last().expect("just pushed"))
}

/// Index and value of the first maximum of `metrics`.
pub fn best_epoch(metrics: &[f64]) -> Option<(usize, f64)> {
    metrics
        .iter()
        .copied()
        .enumerate()
        .fold(None, |best, (i, m)| match best {
            Some((_, b)) if m <= b => best,
            _ => Some((i, m)),
        })
}

/// The stored best checkpoint: highest closed-set accuracy, earliest epoch on ties.
pub fn select_best_checkpoint(state: &RunState) -> Result<(&NetworkParams, usize, f64)> {
    state
        .best
        .as_ref()
        .map(|b| (&b.params, b.epoch, b.closed_acc))
        .ok_or_else(|| Error::Usage("no completed epochs to select a checkpoint from".into()))
}
