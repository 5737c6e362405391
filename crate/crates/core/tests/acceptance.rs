//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any failed. Built with `harness = false`.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use iomatch::data::{make_gaussian_mixture_task, HiddenLabel, SyntheticTask};
use iomatch::eval::{balanced_accuracy, utilization_rate};
use iomatch::experiment::{parse_config_str, run_experiment};
use iomatch::gradcheck::{run_suite, DEFAULT_TOLERANCE};
use iomatch::nn::{forward, NetworkDims, NetworkParams, ParamScope};
use iomatch::objectives::{
    multi_binary_loss, open_set_loss, open_set_targets, unlabeled_inlier_loss, AlignmentState,
};
use iomatch::tensor::{Tape, Tensor};
use iomatch::train::{train_run, Mode, TrainConfig};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

fn fusion_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_sum = 0.0f64;
    let mut worst_s = 0.0f64;
    let mut exact = true;
    for _ in 0..10_000 {
        let k = rng.random_range(2..=8);
        let p = random_simplex(&mut rng, k);
        let o: Vec<f64> = (0..k).map(|_| rng.random_range(1e-6..1.0 - 1e-6)).collect();
        let target = open_set_targets(
            &Tensor::new(1, k, p.clone()).unwrap(),
            &Tensor::new(1, k, o.clone()).unwrap(),
        )
        .unwrap();
        let q = target.q_tilde.row(0);
        worst_sum = worst_sum.max((q.iter().sum::<f64>() - 1.0).abs());
        let s = target.unseen_scores()[0];
        exact &= q[k].to_bits() == s.to_bits();
        let oracle: f64 = p.iter().zip(&o).map(|(pj, oj)| pj * (1.0 - oj)).sum();
        worst_s = worst_s.max((s - oracle).abs());
    }
    let elapsed = start.elapsed();
    outcome(
        worst_sum <= 1e-9 && exact && worst_s <= 1e-12 && elapsed < Duration::from_secs(1),
        format!(
            "max |sum-1| {worst_sum:.1e}, q[K]==S bitwise {exact}, max |S-oracle| {worst_s:.1e}, {:.0} ms",
            elapsed.as_secs_f64() * 1e3
        ),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = run_suite().unwrap();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed(DEFAULT_TOLERANCE))
        .map(|r| r.name.as_str())
        .collect();
    let elapsed = start.elapsed();
    let status = Command::new(env!("CARGO_BIN_EXE_iomatch"))
        .arg("gradcheck")
        .output()
        .expect("run the iomatch binary");
    outcome(
        failed.is_empty() && status.status.code() == Some(0) && elapsed < Duration::from_secs(30),
        format!(
            "{} cases, worst rel error {worst:.2e}, failures {failed:?}, `gradcheck` exit {:?}, {:.1} s",
            results.len(),
            status.status.code(),
            elapsed.as_secs_f64()
        ),
    )
}

fn hand_oracles() -> Outcome {
    let tol = 1e-4;
    let mut notes = Vec::new();
    let mut ok = true;
    let mut check = |name: &str, got: f64, want: f64| {
        let good = (got - want).abs() <= tol;
        ok &= good;
        notes.push(format!("{name} {got:.6}{}", if good { "" } else { " (MISMATCH)" }));
    };

    // Multi-binary, K = 2, o = [0.8, 0.3], y = 0.
    let oracle = -(0.8f64.ln()) - (1.0f64 - 0.3).ln();
    check("oracle_mb", oracle, 0.5798);
    let mut tape = Tape::new();
    let o = tape.constant(Tensor::from_rows(&[[0.8, 0.3]]).unwrap());
    let l = multi_binary_loss(&mut tape, o, &[0]).unwrap();
    check("multi_binary", tape.scalar(l), oracle);

    // Fused target, p̃ = [0.7, 0.3], o = [0.8, 0.5].
    let want = [0.7 * 0.8, 0.3 * 0.5, 0.7 * 0.2 + 0.3 * 0.5];
    let target = open_set_targets(
        &Tensor::from_rows(&[[0.7, 0.3]]).unwrap(),
        &Tensor::from_rows(&[[0.8, 0.5]]).unwrap(),
    )
    .unwrap();
    for (j, (&got, &w)) in target.q_tilde.row(0).iter().zip(&want).enumerate() {
        check(&format!("q[{j}]"), got, w);
    }
    for (j, w) in [0.56, 0.15, 0.29].into_iter().enumerate() {
        check(&format!("q_ref[{j}]"), want[j], w);
    }

    // Distribution alignment.
    let mut state = AlignmentState::new(vec![0.5, 0.5]).unwrap();
    state.record_mean(vec![0.75, 0.25]);
    let aligned = state.align(&Tensor::from_rows(&[[0.6, 0.4]]).unwrap()).unwrap();
    let scaled = [0.6 * 0.5 / 0.75, 0.4 * 0.5 / 0.25];
    let z = scaled[0] + scaled[1];
    check("da[0]", aligned.row(0)[0], scaled[0] / z);
    check("da[1]", aligned.row(0)[1], scaled[1] / z);
    check("da_ref[0]", scaled[0] / z, 1.0 / 3.0);

    // Balanced accuracy: recalls 1, 1/2, 0.
    let ba = balanced_accuracy(&[0, 1, 0, 0], &[0, 1, 1, 2], 3).unwrap();
    check("ba", ba, (1.0 + 0.5 + 0.0) / 3.0);

    // Utilization: 10 unlabeled, 6 selected, 4 of those correct.
    use HiddenLabel::*;
    let truth = [Seen(0), Seen(1), Outlier, Outlier, Seen(0), Seen(1), Seen(0), Outlier, Seen(1), Seen(0)];
    let pseudo = [0, 0, 2, 1, 0, 1, 0, 2, 0, 0];
    let selected = [true, true, true, true, true, true, false, false, false, false];
    check("util", utilization_rate(&selected, &pseudo, &truth, 2), 4.0 / 10.0);

    outcome(ok, notes.join(", "))
}

fn stop_gradient() -> Outcome {
    let dims = NetworkDims {
        input_dim: 5,
        encoder_hidden: vec![7],
        feature_dim: 6,
        projector_hidden: 4,
        proj_dim: 3,
    };
    let params = NetworkParams::init(3, &dims, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut sample = |n: usize| {
        Tensor::new(n, 5, (0..n * 5).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    };
    let (x_w, x_s) = (sample(8), sample(8));

    // Weak view on its own copy of the parameters, strong view on another.
    let mut tape = Tape::new();
    let weak_bound = params.bind(&mut tape);
    let strong_bound = params.bind(&mut tape);
    let weak = forward(&mut tape, &weak_bound, &x_w).unwrap();
    let strong = forward(&mut tape, &strong_bound, &x_s).unwrap();
    let target = open_set_targets(&tape.value(weak.p), &tape.value(weak.o)).unwrap();
    let (loss, _) = open_set_loss(&mut tape, &target, strong.q_open, 0.0).unwrap();
    let grads = tape.backward(loss).unwrap();
    let weak_nonzero = weak_bound
        .vars()
        .iter()
        .flat_map(|&v| grads.get(v).unwrap())
        .filter(|g| *g != 0.0)
        .count();
    let strong_from_graph: Vec<Vec<f64>> = strong_bound.vars().iter().map(|&v| grads.get(v).unwrap()).collect();

    // Same loss with targets typed in as plain constants.
    let manual = Tensor::new(
        target.q_tilde.rows(),
        target.q_tilde.cols(),
        target.q_tilde.data().to_vec(),
    )
    .unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let strong = forward(&mut tape, &bound, &x_s).unwrap();
    let w = tape.constant(manual);
    let log_q = tape.log(strong.q_open);
    let prod = tape.mul(w, log_q).unwrap();
    let total = tape.sum(prod);
    let loss = tape.scale(total, -1.0 / 8.0);
    let grads = tape.backward(loss).unwrap();
    let strong_manual: Vec<Vec<f64>> = bound.vars().iter().map(|&v| grads.get(v).unwrap()).collect();

    let identical = strong_from_graph
        .iter()
        .flatten()
        .zip(strong_manual.iter().flatten())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    outcome(
        weak_nonzero == 0 && identical,
        format!("nonzero grads on target path: {weak_nonzero}; strong-path grads bitwise equal to constant-target run: {identical}"),
    )
}

struct SweepRuns {
    acc: [Vec<f64>; 3],
    util: [Vec<f64>; 3],
    elapsed: Duration,
}

fn default_sweep() -> SweepRuns {
    let start = Instant::now();
    let mut acc: [Vec<f64>; 3] = Default::default();
    let mut util: [Vec<f64>; 3] = Default::default();
    for seed in 0..5u64 {
        let dataset = make_gaussian_mixture_task(&SyntheticTask {
            seed,
            ..SyntheticTask::default()
        })
        .unwrap();
        for (i, mode) in Mode::ALL.into_iter().enumerate() {
            let config = TrainConfig {
                mode,
                seed,
                ..TrainConfig::default()
            };
            let state = train_run(&dataset, &config).unwrap();
            acc[i].push(state.best.as_ref().unwrap().closed_acc);
            util[i].push(state.history.last().unwrap().util_rate);
        }
    }
    SweepRuns {
        acc,
        util,
        elapsed: start.elapsed(),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn ablation_ordering(runs: &SweepRuns) -> Outcome {
    let [io, fix, sup] = [mean(&runs.acc[0]), mean(&runs.acc[1]), mean(&runs.acc[2])];
    let gap = 100.0 * (io - fix);
    outcome(
        io > fix && fix > sup && gap >= 2.0 && runs.elapsed < Duration::from_secs(600),
        format!(
            "mean best closed_acc iomatch {io:.4}, fixmatch {fix:.4}, supervised {sup:.4}; gap {gap:+.2} points (need >= 2); {:.0} s",
            runs.elapsed.as_secs_f64()
        ),
    )
}

fn utilization_ordering(runs: &SweepRuns) -> Outcome {
    let wins = runs.util[0].iter().zip(&runs.util[1]).filter(|(a, b)| a > b).count();
    outcome(
        wins >= 4,
        format!(
            "iomatch final util_rate higher on {wins}/5 seeds (iomatch {:.3?}, fixmatch {:.3?})",
            runs.util[0], runs.util[1]
        ),
    )
}

fn degenerate_weights() -> Outcome {
    let mut mismatched = 0usize;
    let mut compared = 0usize;
    for seed in 0..3u64 {
        let dataset = make_gaussian_mixture_task(&SyntheticTask {
            seed,
            n_per_class: 150,
            ..SyntheticTask::default()
        })
        .unwrap();
        let base = TrainConfig {
            seed,
            epochs: 3,
            iters_per_epoch: 10,
            batch_size: 16,
            mu: 3,
            ..TrainConfig::default()
        };
        let zero = TrainConfig {
            mode: Mode::IoMatch,
            lambda_mb: 0.0,
            lambda_ui: 0.0,
            lambda_op: 0.0,
            ..base.clone()
        };
        let sup = TrainConfig {
            mode: Mode::Supervised,
            ..base
        };
        let a = train_run(&dataset, &zero).unwrap();
        let b = train_run(&dataset, &sup).unwrap();
        compared += a.iterations.len();
        mismatched += a
            .iterations
            .iter()
            .zip(&b.iterations)
            .filter(|(x, y)| x.l_s.to_bits() != y.l_s.to_bits())
            .count();
        mismatched += a.iterations.len().abs_diff(b.iterations.len());
    }
    outcome(
        mismatched == 0,
        format!("{compared} iterations over 3 seeds, {mismatched} l_s values differ bitwise"),
    )
}

fn determinism() -> Outcome {
    let config = r#"
seeds = [0, 1]
epochs = 2
iters_per_epoch = 5
batch_size = 16
mu = 2
n_per_class = 100
"#;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        let mut spec = parse_config_str(config, Path::new(".")).unwrap();
        spec.out_dir = dir.path().to_path_buf();
        run_experiment(&spec).unwrap();
    }
    let mut names: Vec<String> = std::fs::read_dir(dirs[0].path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    let differing: Vec<&String> = names
        .iter()
        .filter(|n| std::fs::read(dirs[0].path().join(n)).unwrap() != std::fs::read(dirs[1].path().join(n)).unwrap())
        .collect();
    outcome(
        names.len() == 6 && differing.is_empty(),
        format!("{} CSV files compared, differing: {differing:?}", names.len()),
    )
}

fn threshold_monotonicity() -> Outcome {
    let dataset = make_gaussian_mixture_task(&SyntheticTask {
        n_per_class: 150,
        ..SyntheticTask::default()
    })
    .unwrap();
    // A briefly trained model gives confident, non-degenerate predictions.
    let config = TrainConfig {
        epochs: 3,
        iters_per_epoch: 10,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let state = train_run(&dataset, &config).unwrap();
    let taus = [0.0, 0.25, 0.5, 0.75, 0.95];
    let mut ok = true;
    let mut notes = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pool = dataset.train_view().unlabeled_x;
    for batch in 0..4 {
        let idx: Vec<usize> = (0..64).map(|_| rng.random_range(0..pool.rows())).collect();
        let x = pool.select_rows(&idx);
        let pred = state.params.predict(&x).unwrap();
        let target = open_set_targets(&pred.p, &pred.o).unwrap();
        let (mut n_in, mut n_op) = (Vec::new(), Vec::new());
        for &tau in &taus {
            let mut tape = Tape::new();
            let bound = state.params.bind(&mut tape);
            let strong = forward(&mut tape, &bound, &x).unwrap();
            let (_, a) = unlabeled_inlier_loss(&mut tape, &pred.p, target.unseen_scores(), strong.p, tau, false).unwrap();
            let (_, b) = open_set_loss(&mut tape, &target, strong.q_open, tau).unwrap();
            n_in.push(a);
            n_op.push(b);
        }
        ok &= n_in.windows(2).all(|w| w[0] >= w[1]) && n_op.windows(2).all(|w| w[0] >= w[1]);
        notes.push(format!("batch {batch}: inliers {n_in:?} open {n_op:?}"));
    }
    outcome(ok, notes.join("; "))
}

fn parameter_overhead() -> Outcome {
    let params = NetworkParams::init(0, &NetworkDims::default(), 4).unwrap();
    let full = params.parameter_count(ParamScope::Full);
    let closed = params.parameter_count(ParamScope::ClosedSet);
    let linear = |i: usize, o: usize| i * o + o;
    let oracle_closed = linear(16, 128) + linear(128, 128) + linear(128, 32) + linear(32, 4);
    let oracle_extra = linear(32, 16) + linear(16, 8) + linear(8, 8) + linear(8, 5);
    let overhead = (full - closed) as f64 / closed as f64;
    outcome(
        closed == oracle_closed && full - closed == oracle_extra && overhead < 0.05,
        format!("fixmatch {closed} params, iomatch {full}; overhead {:.2}%", 100.0 * overhead),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 target-fusion identity", fusion_identity()),
        ("2 gradient suite", gradient_suite()),
        ("3 hand-computed oracles", hand_oracles()),
        ("4 stop-gradient contract", stop_gradient()),
    ];
    let runs = default_sweep();
    results.push(("5 ablation ordering", ablation_ordering(&runs)));
    results.push(("6 utilization ordering", utilization_ordering(&runs)));
    results.push(("7 degenerate-weight equivalence", degenerate_weights()));
    results.push(("8 determinism", determinism()));
    results.push(("9 threshold monotonicity", threshold_monotonicity()));
    results.push(("10 parameter overhead", parameter_overhead()));

    let mut failed = 0;
    for (name, o) in &results {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        failed += usize::from(!o.passed);
        println!("criterion {name}: {tag} ({})", o.detail);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
