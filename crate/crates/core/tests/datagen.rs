use std::fs;

use iomatch::data::{
    augment, load_feature_csv, make_gaussian_mixture_task, next_batch, AugmentSpec, BatchStreams, HiddenLabel,
    Strength, SyntheticTask,
};
use iomatch::tensor::{Sgd, Tape, Tensor};
use iomatch::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Softmax regression on the labeled rows, trained with the crate's own tape.
fn linear_probe_accuracy(task: &SyntheticTask) -> f64 {
    let ds = make_gaussian_mixture_task(task).unwrap();
    let view = ds.train_view();
    let k = ds.num_seen();
    let mut w = Tensor::zeros(ds.input_dim(), k).with_grad();
    let mut b = Tensor::zeros(1, k).with_grad();
    let mut opt = Sgd::new(0.9).unwrap();
    for _ in 0..200 {
        let mut tape = Tape::new();
        let (wv, bv) = (tape.leaf(&w), tape.leaf(&b));
        let x = tape.constant(view.labeled_x.clone());
        let logits = tape.matmul(x, wv).unwrap();
        let logits = tape.add_row(logits, bv).unwrap();
        let p = tape.softmax_rows(logits);
        let picked = tape.gather(p, &view.labeled_y).unwrap();
        let lp = tape.log(picked);
        let mean = tape.mean(lp);
        let loss = tape.neg(mean);
        let grads = tape.backward(loss).unwrap();
        w.accumulate_grad(&grads.get(wv).unwrap()).unwrap();
        b.accumulate_grad(&grads.get(bv).unwrap()).unwrap();
        opt.step([&mut w, &mut b], 0.01).unwrap();
    }
    let test = ds.test_split();
    let logits = test.x.matmul(&w).unwrap();
    let (mut hits, mut total) = (0, 0);
    for (row, t) in logits.iter_rows().zip(&test.truth) {
        if let HiddenLabel::Seen(y) = t {
            total += 1;
            let pred = row
                .iter()
                .zip(b.data())
                .map(|(l, bb)| l + bb)
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            hits += usize::from(pred == *y);
        }
    }
    hits as f64 / total as f64
}

#[test]
fn well_separated_task_is_linearly_solvable() {
    let acc = linear_probe_accuracy(&SyntheticTask {
        class_sep: 50.0,
        ..SyntheticTask::default()
    });
    assert_eq!(acc, 1.0);
}

#[test]
fn labels_stay_hidden_from_unlabeled_pool() {
    let ds = make_gaussian_mixture_task(&SyntheticTask::default()).unwrap();
    let truth = ds.unlabeled_truth();
    let outliers = truth.iter().filter(|t| **t == HiddenLabel::Outlier).count();
    assert_eq!(outliers, 4 * 400);
    assert_eq!(ds.train_view().unlabeled_x.rows(), truth.len());
}

#[test]
fn csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_gaussian_mixture_task(&SyntheticTask {
        n_per_class: 30,
        ..SyntheticTask::default()
    })
    .unwrap();
    ds.write_csv(dir.path()).unwrap();
    let back = load_feature_csv(
        dir.path().join("labeled.csv"),
        dir.path().join("unlabeled.csv"),
        dir.path().join("test.csv"),
    )
    .unwrap();
    assert_eq!(back.num_seen(), 4);
    let (a, b) = (ds.train_view(), back.train_view());
    assert_eq!(a.labeled_x, b.labeled_x);
    assert_eq!(a.labeled_y, b.labeled_y);
    assert_eq!(a.unlabeled_x, b.unlabeled_x);
    assert_eq!(ds.unlabeled_truth(), back.unlabeled_truth());
    assert_eq!(ds.test_split().truth, back.test_split().truth);
}

fn write_files(dir: &std::path::Path, labeled: &str, unlabeled: &str, test: &str) -> iomatch::Result<()> {
    fs::write(dir.join("l.csv"), labeled).unwrap();
    fs::write(dir.join("u.csv"), unlabeled).unwrap();
    fs::write(dir.join("t.csv"), test).unwrap();
    load_feature_csv(dir.join("l.csv"), dir.join("u.csv"), dir.join("t.csv")).map(|_| ())
}

#[test]
fn csv_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let good_l = "0,1.0,2.0\n1,0.5,0.1\n";
    let good_t = "0,1.0,1.0\n3,0.0,0.0\n";

    let err = write_files(d, good_l, "0,1,2\n1,3\n", good_t).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");

    let err = write_files(d, good_l, "0,1,2\n1,x,2\n", good_t).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");

    let err = write_files(d, "", "0,1,2\n", good_t).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");

    let err = write_files(d, good_l, "0,1,2\n", "-1,0,0\n").unwrap_err();
    assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");

    write_files(d, good_l, "-1,1,2\n2,0,0\n", good_t).unwrap();
}

#[test]
fn unknown_truth_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("l.csv"), "0,1,2\n1,0,1\n").unwrap();
    fs::write(d.join("u.csv"), "-1,1,2\n5,0,0\n0,2,2\n").unwrap();
    fs::write(d.join("t.csv"), "0,1,1\n").unwrap();
    let ds = load_feature_csv(d.join("l.csv"), d.join("u.csv"), d.join("t.csv")).unwrap();
    assert_eq!(
        ds.unlabeled_truth(),
        vec![HiddenLabel::Unknown, HiddenLabel::Outlier, HiddenLabel::Seen(0)]
    );
}

#[test]
fn augmentation_strengths() {
    let x = Tensor::filled(5, 16, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let none = AugmentSpec {
        weak_sigma: 0.0,
        ..AugmentSpec::default()
    };
    assert_eq!(augment(&x, &none, Strength::Weak, &mut rng), x);

    let strong = augment(&x, &AugmentSpec::default(), Strength::Strong, &mut rng);
    for row in strong.iter_rows() {
        assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), 4);
    }
}

#[test]
fn batch_shapes() {
    let ds = make_gaussian_mixture_task(&SyntheticTask {
        n_per_class: 50,
        ..SyntheticTask::default()
    })
    .unwrap();
    let view = ds.train_view();
    let mut streams = BatchStreams::new(3);
    let (l, u) = next_batch(&view, 8, 7, &mut streams).unwrap();
    assert_eq!(l.x.shape(), (8, 16));
    assert_eq!(u.x.shape(), (56, 16));
    assert!(l.y.iter().all(|&y| y < 4));
}

#[test]
fn infeasible_task_rejected() {
    let too_many = SyntheticTask {
        n_per_class: 10,
        n_labeled: 9,
        ..SyntheticTask::default()
    };
    assert!(make_gaussian_mixture_task(&too_many).is_err());
    let one_class = SyntheticTask {
        k_seen: 1,
        ..SyntheticTask::default()
    };
    assert!(make_gaussian_mixture_task(&one_class).is_err());
}
