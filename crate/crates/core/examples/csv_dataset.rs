//! Round-trips a dataset through the three-file CSV format and trains on the
//! reloaded copy. Any `label,f1,...,fD` files can be used the same way; put
//! `-1` in the unlabeled file where the true class is unknown.
//!
//!     cargo run --release --example csv_dataset

use iomatch::data::{load_feature_csv, make_gaussian_mixture_task, SyntheticTask};
use iomatch::train::{train_run, Mode, TrainConfig};

fn main() -> iomatch::Result<()> {
    let dir = std::env::temp_dir().join("iomatch-csv-example");
    let original = make_gaussian_mixture_task(&SyntheticTask {
        n_per_class: 120,
        ..SyntheticTask::default()
    })?;
    original.write_csv(&dir)?;

    let dataset = load_feature_csv(dir.join("labeled.csv"), dir.join("unlabeled.csv"), dir.join("test.csv"))?;
    println!(
        "loaded {} seen classes, {} features, {} unlabeled rows from {}",
        dataset.num_seen(),
        dataset.input_dim(),
        dataset.unlabeled_idx.len(),
        dir.display()
    );

    let config = TrainConfig {
        mode: Mode::IoMatch,
        epochs: 4,
        iters_per_epoch: 8,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let state = train_run(&dataset, &config)?;
    let last = state.history.last().expect("at least one epoch");
    println!("after {} epochs: closed_acc {:.4}, open_ba {:.4}", state.epoch, last.closed_acc, last.open_ba);
    Ok(())
}
