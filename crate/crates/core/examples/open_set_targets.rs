//! Builds fused open-set targets for a few hand-picked weak-view predictions
//! and shows which rows each filter selects.
//!
//!     cargo run --release --example open_set_targets

use iomatch::objectives::{inlier_filter, open_set_targets, AlignmentState};
use iomatch::tensor::Tensor;

fn main() -> iomatch::Result<()> {
    // Three seen classes. Row 0 is a confident inlier, row 1 is confident in
    // the closed-set sense but the one-vs-all head disagrees, row 2 is vague.
    let p = Tensor::from_rows(&[[0.99, 0.005, 0.005], [0.05, 0.93, 0.02], [0.40, 0.35, 0.25]])?;
    let o = Tensor::from_rows(&[[0.95, 0.10, 0.20], [0.30, 0.08, 0.40], [0.60, 0.55, 0.50]])?;

    // Predictions so far have over-represented class 0.
    let mut align = AlignmentState::uniform(3);
    align.record_mean(vec![0.6, 0.25, 0.15]);
    let p_tilde = align.align(&p)?;

    let target = open_set_targets(&p_tilde, &o)?;
    let (tau_p, tau_q) = (0.95, 0.5);
    let open = target.open_mask(tau_q);
    for i in 0..p.rows() {
        let s = target.unseen_scores()[i];
        println!(
            "row {i}: p~ {:.3?}  q~ {:.3?}  S {s:.3}  inlier {}  open-set {}",
            p_tilde.row(i),
            target.q_tilde.row(i),
            inlier_filter(p_tilde.row(i), s, tau_p),
            open[i],
        );
    }
    Ok(())
}
