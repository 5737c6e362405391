//! Trains one model on a small synthetic open-set task and prints the
//! per-epoch metrics.
//!
//!     cargo run --release --example train_iomatch

use iomatch::data::{make_gaussian_mixture_task, SyntheticTask};
use iomatch::train::{select_best_checkpoint, train_run, Mode, TrainConfig};

fn main() -> iomatch::Result<()> {
    let task = SyntheticTask {
        seed: 7,
        n_per_class: 200,
        ..SyntheticTask::default()
    };
    let dataset = make_gaussian_mixture_task(&task)?;
    println!(
        "{} labeled, {} unlabeled, {} test rows",
        dataset.labeled_idx.len(),
        dataset.unlabeled_idx.len(),
        dataset.test_idx.len()
    );

    let config = TrainConfig {
        mode: Mode::IoMatch,
        seed: 7,
        epochs: 8,
        iters_per_epoch: 16,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let state = train_run(&dataset, &config)?;
    println!("epoch  l_overall  closed_acc  open_ba  util_rate  selected(in/open)");
    for r in &state.history {
        println!(
            "{:>5}  {:>9.4}  {:>10.4}  {:>7.4}  {:>9.4}  {}/{}",
            r.epoch, r.l_overall, r.closed_acc, r.open_ba, r.util_rate, r.n_selected_inliers, r.n_selected_open
        );
    }
    let (_, epoch, acc) = select_best_checkpoint(&state)?;
    println!("best closed-set accuracy {acc:.4} at epoch {epoch}");
    Ok(())
}
