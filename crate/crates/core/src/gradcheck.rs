//! Finite-difference suite over every tape op and every training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{forward, forward_closed, BoundParams, NetworkDims, NetworkParams};
use crate::objectives::{
    confidence_consistency_loss, multi_binary_loss, open_set_loss, open_set_targets, overall_loss, supervised_loss,
    unlabeled_inlier_loss, LossTerms, LossWeights, OpenSetTarget,
};
use crate::tensor::{finite_difference_check, Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCase {
    pub name: String,
    pub max_rel_error: f64,
}

impl GradCase {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(rows, cols, data).expect("positive cols")
}

/// Values with `|v| >= 0.1`, so a `±eps` probe never crosses a ReLU kink.
fn off_kink(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = uniform(rng, rows, cols, -1.0, 1.0);
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + 0.1);
    }
    t
}

fn simplex_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = uniform(rng, rows, cols, 0.05, 1.0);
    for row in t.data_mut().chunks_exact_mut(cols) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

/// Reduces an arbitrary output to a scalar through a fixed random weighting,
/// so every upstream gradient entry is distinct.
fn project_out(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

type OpCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let w34 = uniform(rng, 3, 4, -1.0, 1.0);
    let w33 = uniform(rng, 3, 3, -1.0, 1.0);
    let w31 = uniform(rng, 3, 1, -1.0, 1.0);
    let w32 = uniform(rng, 3, 2, -1.0, 1.0);
    let w62 = uniform(rng, 6, 2, -1.0, 1.0);
    let w41 = uniform(rng, 4, 1, -1.0, 1.0);

    let mut cases: Vec<OpCase> = Vec::new();
    let (wa, wb) = (w34.clone(), w33.clone());
    cases.push((
        "matmul",
        vec![uniform(rng, 3, 5, -1.0, 1.0), uniform(rng, 5, 4, -1.0, 1.0)],
        Box::new(move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project_out(t, y, &wa)
        }),
    ));
    let w = wb.clone();
    cases.push((
        "add",
        vec![uniform(rng, 3, 3, -1.0, 1.0), uniform(rng, 3, 3, -1.0, 1.0)],
        Box::new(move |t, v| {
            let y = t.add(v[0], v[1])?;
            project_out(t, y, &w)
        }),
    ));
    let w = wb.clone();
    cases.push((
        "sub",
        vec![uniform(rng, 3, 3, -1.0, 1.0), uniform(rng, 3, 3, -1.0, 1.0)],
        Box::new(move |t, v| {
            let y = t.sub(v[0], v[1])?;
            project_out(t, y, &w)
        }),
    ));
    let w = wb.clone();
    cases.push((
        "mul",
        vec![uniform(rng, 3, 3, -1.0, 1.0), uniform(rng, 3, 3, -1.0, 1.0)],
        Box::new(move |t, v| {
            let y = t.mul(v[0], v[1])?;
            project_out(t, y, &w)
        }),
    ));
    let w = wb.clone();
    cases.push((
        "add_row",
        vec![uniform(rng, 3, 3, -1.0, 1.0), uniform(rng, 1, 3, -1.0, 1.0)],
        Box::new(move |t, v| {
            let y = t.add_row(v[0], v[1])?;
            project_out(t, y, &w)
        }),
    ));
    let w = wb.clone();
    cases.push((
        "affine",
        vec![uniform(rng, 3, 3, -1.0, 1.0)],
        Box::new(move |t, v| {
            let y = t.affine(v[0], -1.7, 0.3);
            let y = t.neg(y);
            let y = t.scale(y, 0.6);
            project_out(t, y, &w)
        }),
    ));
    let w = wb.clone();
    cases.push((
        "relu",
        vec![off_kink(rng, 3, 3)],
        Box::new(move |t, v| {
            let y = t.relu(v[0]);
            project_out(t, y, &w)
        }),
    ));
    let w = wb.clone();
    cases.push((
        "log",
        vec![uniform(rng, 3, 3, 0.5, 2.0)],
        Box::new(move |t, v| {
            let y = t.log(v[0]);
            project_out(t, y, &w)
        }),
    ));
    let w = w34.clone();
    cases.push((
        "softmax_rows",
        vec![uniform(rng, 3, 4, -2.0, 2.0)],
        Box::new(move |t, v| {
            let y = t.softmax_rows(v[0]);
            project_out(t, y, &w)
        }),
    ));
    cases.push((
        "sum_mean",
        vec![uniform(rng, 3, 4, -1.0, 1.0)],
        Box::new(|t, v| {
            let sq = t.mul(v[0], v[0])?;
            let s = t.sum(sq);
            let m = t.mean(v[0]);
            t.add(s, m)
        }),
    ));
    let w = w31.clone();
    cases.push((
        "row_sum",
        vec![uniform(rng, 3, 4, -1.0, 1.0)],
        Box::new(move |t, v| {
            let y = t.row_sum(v[0]);
            project_out(t, y, &w)
        }),
    ));
    let w = w31.clone();
    cases.push((
        "row_max",
        // Distinct row entries so the maximum does not switch under a probe.
        vec![Tensor::from_rows(&[[0.1, 0.9, -0.4, 0.3], [1.2, -0.5, 0.2, 0.0], [-0.3, -0.1, -0.8, 0.6]])
            .expect("rectangular")],
        Box::new(move |t, v| {
            let y = t.row_max(v[0]);
            project_out(t, y, &w)
        }),
    ));
    let w = w31.clone();
    cases.push((
        "gather",
        vec![uniform(rng, 3, 4, -1.0, 1.0)],
        Box::new(move |t, v| {
            let y = t.gather(v[0], &[2, 0, 3])?;
            project_out(t, y, &w)
        }),
    ));
    let w = w32;
    cases.push((
        "select_cols",
        vec![uniform(rng, 3, 4, -1.0, 1.0)],
        Box::new(move |t, v| {
            let y = t.select_cols(v[0], &[3, 1])?;
            project_out(t, y, &w)
        }),
    ));
    let w = w62;
    cases.push((
        "reshape",
        vec![uniform(rng, 3, 4, -1.0, 1.0)],
        Box::new(move |t, v| {
            let y = t.reshape(v[0], 6, 2)?;
            project_out(t, y, &w)
        }),
    ));
    let w = w41;
    cases.push((
        "mlp_chain",
        vec![
            uniform(rng, 4, 3, -1.0, 1.0),
            uniform(rng, 3, 5, -1.0, 1.0),
            uniform(rng, 1, 5, -0.1, 0.1),
            uniform(rng, 5, 1, -1.0, 1.0),
        ],
        Box::new(move |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add_row(h, v[2])?;
            let h = t.softmax_rows(h);
            let h = t.log(h);
            let y = t.matmul(h, v[3])?;
            project_out(t, y, &w)
        }),
    ));
    cases
}

fn small_dims() -> NetworkDims {
    NetworkDims {
        input_dim: 6,
        encoder_hidden: vec![8],
        feature_dim: 6,
        projector_hidden: 5,
        proj_dim: 4,
    }
}

/// Fixed inputs and detached targets for one loss configuration.
struct LossFixture {
    params: NetworkParams,
    x_l: Tensor,
    y: Vec<usize>,
    x_s: Tensor,
    target: OpenSetTarget,
    p_w: Tensor,
}

impl LossFixture {
    fn new(k: usize, b: usize, mu: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = small_dims();
        let params = NetworkParams::init(seed, &dims, k)?;
        let x_l = uniform(&mut rng, b, dims.input_dim, -2.0, 2.0);
        let y = (0..b).map(|i| i % k).collect();
        let x_w = uniform(&mut rng, mu * b, dims.input_dim, -2.0, 2.0);
        let x_s = uniform(&mut rng, mu * b, dims.input_dim, -2.0, 2.0);
        let weak = params.predict(&x_w)?;
        // Random simplex targets keep the masked losses non-trivial at init,
        // where real predictions are too flat to pass the thresholds.
        let p_tilde = simplex_rows(&mut rng, mu * b, k);
        let target = open_set_targets(&p_tilde, &weak.o)?;
        Ok(Self {
            params,
            x_l,
            y,
            x_s,
            target,
            p_w: weak.p,
        })
    }

    fn bind(&self, vars: &[Var]) -> Result<BoundParams> {
        BoundParams::from_vars(&self.params, vars)
    }
}

fn loss_cases(k: usize, b: usize, mu: usize) -> Result<Vec<GradCase>> {
    let fx = LossFixture::new(k, b, mu, 17 + k as u64)?;
    let params = fx.params.tensors();
    let check = |name: &str, f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>| -> Result<GradCase> {
        Ok(GradCase {
            name: format!("{name} K={k} B={b} mu={mu}"),
            max_rel_error: finite_difference_check(f, &params, DEFAULT_EPS)?,
        })
    };
    // Zero thresholds admit every row the unseen-score cut lets through.
    let tau_p = 0.0;
    let tau_q = 0.0;

    let mut out = vec![
        check("supervised_loss", &|t, v| {
            let bound = fx.bind(v)?;
            let o = forward_closed(t, &bound, &fx.x_l)?;
            supervised_loss(t, o.p, &fx.y)
        })?,
        check("multi_binary_loss", &|t, v| {
            let bound = fx.bind(v)?;
            let o = forward(t, &bound, &fx.x_l)?;
            multi_binary_loss(t, o.o, &fx.y)
        })?,
        check("open_set_loss", &|t, v| {
            let bound = fx.bind(v)?;
            let s = forward(t, &bound, &fx.x_s)?;
            Ok(open_set_loss(t, &fx.target, s.q_open, tau_q)?.0)
        })?,
        check("unlabeled_inlier_loss", &|t, v| {
            let bound = fx.bind(v)?;
            let s = forward(t, &bound, &fx.x_s)?;
            let scores = fx.target.unseen_scores();
            Ok(unlabeled_inlier_loss(t, &fx.target.p_tilde, scores, s.p, tau_p, false)?.0)
        })?,
        check("confidence_consistency_loss", &|t, v| {
            let bound = fx.bind(v)?;
            let s = forward_closed(t, &bound, &fx.x_s)?;
            Ok(confidence_consistency_loss(t, &fx.p_w, s.p, 0.0)?.0)
        })?,
    ];
    out.push(check("overall_loss", &|t, v| {
        let bound = fx.bind(v)?;
        let l = forward(t, &bound, &fx.x_l)?;
        let s = forward(t, &bound, &fx.x_s)?;
        let l_s = supervised_loss(t, l.p, &fx.y)?;
        let l_mb = multi_binary_loss(t, l.o, &fx.y)?;
        let (l_op, n_open) = open_set_loss(t, &fx.target, s.q_open, tau_q)?;
        let scores = fx.target.unseen_scores();
        let (l_ui, n_in) = unlabeled_inlier_loss(t, &fx.target.p_tilde, scores, s.p, tau_p, true)?;
        let terms = LossTerms {
            l_s,
            l_mb: Some(l_mb),
            l_ui: Some(l_ui),
            l_op: Some(l_op),
            n_selected_inliers: n_in,
            n_selected_open: n_open,
        };
        let weights = LossWeights {
            multi_binary: 0.7,
            unlabeled_inlier: 1.3,
            open_set: 0.9,
        };
        Ok(overall_loss(t, &terms, &weights)?.0)
    })?);
    Ok(out)
}

/// Every op on small random inputs, then every loss through a small network
/// for `K ∈ {2, 3, 5}` with `B = 4`, `μ = 2`.
pub fn run_suite() -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut results = Vec::new();
    for (name, params, f) in op_cases(&mut rng) {
        results.push(GradCase {
            name: name.to_string(),
            max_rel_error: finite_difference_check(f, &params, DEFAULT_EPS)?,
        });
    }
    for k in [2, 3, 5] {
        results.extend(loss_cases(k, 4, 2)?);
    }
    Ok(results)
}
