//! Runs all three training modes over a few seeds through the experiment
//! runner and prints the summary table.
//!
//!     cargo run --release --example compare_modes [out_dir]

use std::path::PathBuf;

use iomatch::experiment::{emit_report, parse_config_str, run_experiment};

const CONFIG: &str = r#"
modes = ["iomatch", "fixmatch", "supervised"]
seeds = [0, 1, 2]
epochs = 10
iters_per_epoch = 16
batch_size = 32
n_per_class = 250
"#;

fn main() -> iomatch::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("iomatch-compare"));
    let mut spec = parse_config_str(CONFIG, std::path::Path::new("."))?;
    spec.out_dir = out.clone();
    spec.echo.out_dir = out.clone();

    run_experiment(&spec)?;
    print!("{}", emit_report(&out)?);
    println!("per-run CSVs and checkpoints in {}", out.display());
    Ok(())
}
