//! Trains briefly, saves the best checkpoint, reloads it and evaluates both
//! inference rules by hand.
//!
//!     cargo run --release --example checkpoint_eval

use iomatch::data::{make_gaussian_mixture_task, HiddenLabel, SyntheticTask};
use iomatch::eval::{balanced_accuracy, predict_closed, predict_open};
use iomatch::nn::{NetworkParams, ParamScope};
use iomatch::train::{select_best_checkpoint, train_run, TrainConfig};

fn main() -> iomatch::Result<()> {
    let dataset = make_gaussian_mixture_task(&SyntheticTask {
        n_per_class: 150,
        ..SyntheticTask::default()
    })?;
    let config = TrainConfig {
        epochs: 5,
        iters_per_epoch: 12,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let state = train_run(&dataset, &config)?;
    let (best, epoch, _) = select_best_checkpoint(&state)?;

    let path = std::env::temp_dir().join("iomatch-best.ckpt.json");
    best.save(&path)?;
    let params = NetworkParams::load(&path)?;
    println!(
        "checkpoint from epoch {epoch}: {} parameters ({} in the closed-set path)",
        params.parameter_count(ParamScope::Full),
        params.parameter_count(ParamScope::ClosedSet)
    );

    let test = dataset.test_split();
    let k = dataset.num_seen();
    let closed = predict_closed(&params, &test.x)?;
    let open = predict_open(&params, &test.x)?;

    let seen: Vec<(usize, usize)> = closed
        .iter()
        .zip(&test.truth)
        .filter_map(|(&p, t)| match t {
            HiddenLabel::Seen(y) => Some((p, *y)),
            _ => None,
        })
        .collect();
    let acc = seen.iter().filter(|(p, y)| p == y).count() as f64 / seen.len() as f64;

    let truth: Vec<usize> = test.truth.iter().filter_map(|t| t.open_index(k)).collect();
    let ba = balanced_accuracy(&open, &truth, k + 1)?;
    let flagged = open.iter().filter(|&&c| c == k).count();
    println!("closed-set accuracy {acc:.4}, open-set balanced accuracy {ba:.4}");
    println!("{flagged} of {} test rows predicted as outliers", open.len());
    Ok(())
}
