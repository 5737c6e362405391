//! Open-set task construction, CSV ingestion, feature-space augmentation and
//! batch sampling.
//!
//! The trainer only ever sees a [`TrainView`]: labeled features with labels
//! and unlabeled features without them. Ground truth for unlabeled rows is
//! reachable only through [`OpenSetDataset::unlabeled_truth`], which the
//! evaluator uses for utilization metrics.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fraction of each class held out for testing by the synthetic generator.
pub const TEST_FRACTION: f64 = 0.2;

/// Open-set ground truth of a single row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HiddenLabel {
    /// Index into the seen classes, `0..K`.
    Seen(usize),
    /// Any class not among the seen ones.
    Outlier,
    /// No ground truth available (label `-1` in an unlabeled CSV).
    Unknown,
}

impl HiddenLabel {
    /// Position in the (K+1)-way open-set label space, `K` for outliers.
    pub fn open_index(self, num_seen: usize) -> Option<usize> {
        match self {
            HiddenLabel::Seen(k) => Some(k),
            HiddenLabel::Outlier => Some(num_seen),
            HiddenLabel::Unknown => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenSetDataset {
    /// All rows, N×D.
    pub features: Tensor,
    /// Raw class id per row; `-1` means unknown.
    pub labels: Vec<i64>,
    /// Raw ids of the K seen classes; position in this list is the model's class index.
    pub seen_classes: Vec<i64>,
    pub unseen_classes: Vec<i64>,
    pub labeled_idx: Vec<usize>,
    pub unlabeled_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

/// Everything the trainer may look at.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub labeled_x: Tensor,
    pub labeled_y: Vec<usize>,
    pub unlabeled_x: Tensor,
    pub num_classes: usize,
}

#[derive(Debug, Clone)]
pub struct LabeledSplit {
    pub x: Tensor,
    pub truth: Vec<HiddenLabel>,
}

impl OpenSetDataset {
    pub fn num_seen(&self) -> usize {
        self.seen_classes.len()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn hidden_label(&self, row: usize) -> HiddenLabel {
        let raw = self.labels[row];
        if raw < 0 {
            return HiddenLabel::Unknown;
        }
        match self.seen_classes.iter().position(|&c| c == raw) {
            Some(k) => HiddenLabel::Seen(k),
            None => HiddenLabel::Outlier,
        }
    }

    pub fn train_view(&self) -> TrainView {
        let labeled_y = self
            .labeled_idx
            .iter()
            .map(|&i| match self.hidden_label(i) {
                HiddenLabel::Seen(k) => k,
                other => panic!("labeled row {i} has non-seen label {other:?}"),
            })
            .collect();
        TrainView {
            labeled_x: self.features.select_rows(&self.labeled_idx),
            labeled_y,
            unlabeled_x: self.features.select_rows(&self.unlabeled_idx),
            num_classes: self.num_seen(),
        }
    }

    /// Ground truth for the unlabeled pool, aligned with `TrainView::unlabeled_x`.
    pub fn unlabeled_truth(&self) -> Vec<HiddenLabel> {
        self.unlabeled_idx.iter().map(|&i| self.hidden_label(i)).collect()
    }

    pub fn test_split(&self) -> LabeledSplit {
        LabeledSplit {
            x: self.features.select_rows(&self.test_idx),
            truth: self.test_idx.iter().map(|&i| self.hidden_label(i)).collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        let labeled: BTreeSet<usize> = self.labeled_idx.iter().copied().collect();
        if self.unlabeled_idx.iter().any(|i| labeled.contains(i)) {
            return Err(Error::Data("labeled and unlabeled indices overlap".into()));
        }
        if let Some(&i) = self
            .labeled_idx
            .iter()
            .find(|&&i| !matches!(self.hidden_label(i), HiddenLabel::Seen(_)))
        {
            return Err(Error::Data(format!("labeled row {i} is not from a seen class")));
        }
        Ok(())
    }

    /// Writes `labeled.csv`, `unlabeled.csv` and `test.csv` into `dir`.
    pub fn write_csv(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, idx) in [
            ("labeled.csv", &self.labeled_idx),
            ("unlabeled.csv", &self.unlabeled_idx),
            ("test.csv", &self.test_idx),
        ] {
            let path = dir.join(name);
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_path(&path)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            for &i in idx {
                let mut rec = vec![self.labels[i].to_string()];
                rec.extend(self.features.row(i).iter().map(|v| v.to_string()));
                w.write_record(&rec)
                    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Parameters of the synthetic Gaussian-mixture task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub seed: u64,
    pub k_seen: usize,
    pub k_unseen: usize,
    pub input_dim: usize,
    pub n_per_class: usize,
    pub n_labeled: usize,
    pub class_sep: f64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            seed: 0,
            k_seen: 4,
            k_unseen: 4,
            input_dim: 16,
            n_per_class: 500,
            n_labeled: 4,
            class_sep: 3.0,
        }
    }
}

/// Unit-variance isotropic Gaussian classes with means on a sphere of radius
/// `class_sep`. Classes `0..k_seen` are seen, the rest unseen. Per class, 20%
/// of samples go to test, `n_labeled` seen-class samples are labeled, and the
/// remainder is unlabeled.
pub fn make_gaussian_mixture_task(task: &SyntheticTask) -> Result<OpenSetDataset> {
    if task.k_seen < 2 {
        return Err(Error::Config(format!("k_seen must be >= 2, got {}", task.k_seen)));
    }
    if !(task.class_sep > 0.0 && task.class_sep.is_finite()) {
        return Err(Error::Config("class_sep must be positive".into()));
    }
    if task.input_dim == 0 {
        return Err(Error::Config("input_dim must be positive".into()));
    }
    let n_test = (task.n_per_class as f64 * TEST_FRACTION).floor() as usize;
    let n_train = task.n_per_class - n_test;
    if task.n_labeled == 0 || task.n_labeled > n_train {
        return Err(Error::Config(format!(
            "n_labeled must lie in [1, {n_train}] for n_per_class = {}",
            task.n_per_class
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let k_total = task.k_seen + task.k_unseen;
    let d = task.input_dim;

    let means: Vec<Vec<f64>> = (0..k_total)
        .map(|_| {
            let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            dir.iter().map(|v| v * task.class_sep / norm).collect()
        })
        .collect();

    let n = k_total * task.n_per_class;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let (mut labeled_idx, mut unlabeled_idx, mut test_idx) = (Vec::new(), Vec::new(), Vec::new());

    for (c, mean) in means.iter().enumerate() {
        let start = labels.len();
        for _ in 0..task.n_per_class {
            data.extend(mean.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)));
            labels.push(c as i64);
        }
        let mut rows: Vec<usize> = (start..start + task.n_per_class).collect();
        rows.shuffle(&mut rng);
        test_idx.extend_from_slice(&rows[..n_test]);
        let train = &rows[n_test..];
        if c < task.k_seen {
            labeled_idx.extend_from_slice(&train[..task.n_labeled]);
            unlabeled_idx.extend_from_slice(&train[task.n_labeled..]);
        } else {
            unlabeled_idx.extend_from_slice(train);
        }
    }

    let ds = OpenSetDataset {
        features: Tensor::new(n, d, data)?,
        labels,
        seen_classes: (0..task.k_seen as i64).collect(),
        unseen_classes: (task.k_seen as i64..k_total as i64).collect(),
        labeled_idx,
        unlabeled_idx,
        test_idx,
    };
    ds.validate()?;
    Ok(ds)
}

struct CsvRows {
    labels: Vec<i64>,
    features: Vec<f64>,
    dim: usize,
}

fn read_feature_csv(path: &Path, allow_unknown: bool) -> Result<CsvRows> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_err(0, format!("{other:?}")),
        })?;

    let mut out = CsvRows {
        labels: Vec::new(),
        features: Vec::new(),
        dim: 0,
    };
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() < 2 {
            return Err(parse_err(line, "expected `label,f1,...,fD` with at least one feature".into()));
        }
        let dim = rec.len() - 1;
        if out.dim == 0 {
            out.dim = dim;
        } else if dim != out.dim {
            return Err(parse_err(
                line,
                format!("ragged row: {dim} features, expected {}", out.dim),
            ));
        }
        let label: i64 = rec[0]
            .parse()
            .map_err(|_| parse_err(line, format!("label `{}` is not an integer", &rec[0])))?;
        if label < -1 || (label == -1 && !allow_unknown) {
            return Err(parse_err(line, format!("label {label} is not allowed here")));
        }
        out.labels.push(label);
        for (j, field) in rec.iter().skip(1).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("feature {} `{field}` is not numeric", j + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("feature {} is not finite", j + 1)));
            }
            out.features.push(v);
        }
    }
    Ok(out)
}

/// Assembles a dataset from three `label,f1,...,fD` files. Seen classes are
/// the distinct labels of the labeled file; anything else in the unlabeled or
/// test files is treated as an outlier, and `-1` in the unlabeled file marks
/// unknown ground truth.
pub fn load_feature_csv(
    labeled_path: impl AsRef<Path>,
    unlabeled_path: impl AsRef<Path>,
    test_path: impl AsRef<Path>,
) -> Result<OpenSetDataset> {
    let lp = labeled_path.as_ref();
    let labeled = read_feature_csv(lp, false)?;
    if labeled.labels.is_empty() {
        return Err(Error::Parse {
            path: lp.to_path_buf(),
            line: 1,
            message: "labeled file is empty".into(),
        });
    }
    let unlabeled = read_feature_csv(unlabeled_path.as_ref(), true)?;
    let test = read_feature_csv(test_path.as_ref(), false)?;

    let dim = labeled.dim;
    for (p, part) in [(unlabeled_path.as_ref(), &unlabeled), (test_path.as_ref(), &test)] {
        if !part.labels.is_empty() && part.dim != dim {
            return Err(Error::Parse {
                path: p.to_path_buf(),
                line: 1,
                message: format!("{} features per row, labeled file has {dim}", part.dim),
            });
        }
    }

    let seen: BTreeSet<i64> = labeled.labels.iter().copied().collect();
    if seen.len() < 2 {
        return Err(Error::Data("labeled file must contain at least 2 classes".into()));
    }
    let unseen: BTreeSet<i64> = unlabeled
        .labels
        .iter()
        .chain(&test.labels)
        .copied()
        .filter(|l| *l >= 0 && !seen.contains(l))
        .collect();

    let (nl, nu, nt) = (labeled.labels.len(), unlabeled.labels.len(), test.labels.len());
    let mut features = labeled.features;
    features.extend(unlabeled.features);
    features.extend(test.features);
    let mut labels = labeled.labels;
    labels.extend(unlabeled.labels);
    labels.extend(test.labels);

    let ds = OpenSetDataset {
        features: Tensor::new(nl + nu + nt, dim, features)?,
        labels,
        seen_classes: seen.into_iter().collect(),
        unseen_classes: unseen.into_iter().collect(),
        labeled_idx: (0..nl).collect(),
        unlabeled_idx: (nl..nl + nu).collect(),
        test_idx: (nl + nu..nl + nu + nt).collect(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Feature-space stand-ins for weak and strong image augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub strong_mask_frac: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            weak_sigma: 0.1,
            strong_sigma: 0.5,
            strong_mask_frac: 0.25,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.weak_sigma >= 0.0 && self.weak_sigma.is_finite()) {
            return Err(Error::range("weak_sigma", "must be finite and >= 0"));
        }
        if !(self.strong_sigma >= self.weak_sigma && self.strong_sigma.is_finite()) {
            return Err(Error::range("strong_sigma", "must be finite and >= weak_sigma"));
        }
        if !(0.0..1.0).contains(&self.strong_mask_frac) {
            return Err(Error::range("strong_mask_frac", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Coordinates zeroed per row by the strong view.
    pub fn masked_coords(&self, dim: usize) -> usize {
        ((self.strong_mask_frac * dim as f64).round() as usize).min(dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strength {
    Weak,
    Strong,
}

/// Weak: additive `N(0, weak_sigma²)` noise. Strong: `N(0, strong_sigma²)`
/// noise, then a uniformly chosen `strong_mask_frac` share of each row's
/// coordinates set to zero.
pub fn augment(x: &Tensor, spec: &AugmentSpec, strength: Strength, rng: &mut impl Rng) -> Tensor {
    let sigma = match strength {
        Strength::Weak => spec.weak_sigma,
        Strength::Strong => spec.strong_sigma,
    };
    let mut out = x.clone();
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("sigma validated");
        out.data_mut().iter_mut().for_each(|v| *v += noise.sample(rng));
    }
    if strength == Strength::Strong {
        let d = out.cols();
        let m = spec.masked_coords(d);
        if m > 0 {
            for row in out.data_mut().chunks_exact_mut(d) {
                for j in index::sample(rng, d, m) {
                    row[j] = 0.0;
                }
            }
        }
    }
    out
}

/// Independent random streams for the labeled and unlabeled sides, so a mode
/// that never touches unlabeled data sees the same labeled batches as one that does.
#[derive(Debug, Clone)]
pub struct BatchStreams {
    pub labeled: ChaCha8Rng,
    pub unlabeled: ChaCha8Rng,
}

impl BatchStreams {
    pub fn new(seed: u64) -> Self {
        let mut labeled = ChaCha8Rng::seed_from_u64(seed);
        labeled.set_stream(1);
        let mut unlabeled = ChaCha8Rng::seed_from_u64(seed);
        unlabeled.set_stream(2);
        Self { labeled, unlabeled }
    }
}

#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub indices: Vec<usize>,
    pub x: Tensor,
    pub y: Vec<usize>,
}

/// Unlabeled rows; `indices` point into the unlabeled pool so hidden truth
/// can be looked up by the evaluator.
#[derive(Debug, Clone)]
pub struct UnlabeledBatch {
    pub indices: Vec<usize>,
    pub x: Tensor,
}

pub fn next_labeled_batch(view: &TrainView, batch_size: usize, rng: &mut impl Rng) -> Result<LabeledBatch> {
    let n = view.labeled_x.rows();
    if n == 0 || batch_size == 0 {
        return Err(Error::Config("labeled pool and batch size must be non-empty".into()));
    }
    let indices: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..n)).collect();
    Ok(LabeledBatch {
        x: view.labeled_x.select_rows(&indices),
        y: indices.iter().map(|&i| view.labeled_y[i]).collect(),
        indices,
    })
}

pub fn next_unlabeled_batch(view: &TrainView, size: usize, rng: &mut impl Rng) -> Result<UnlabeledBatch> {
    let n = view.unlabeled_x.rows();
    if n == 0 || size == 0 {
        return Err(Error::Config("unlabeled pool and batch size must be non-empty".into()));
    }
    let indices: Vec<usize> = (0..size).map(|_| rng.random_range(0..n)).collect();
    Ok(UnlabeledBatch {
        x: view.unlabeled_x.select_rows(&indices),
        indices,
    })
}

/// `B` labeled and `μ·B` unlabeled rows, sampled uniformly with replacement.
pub fn next_batch(
    view: &TrainView,
    batch_size: usize,
    mu: usize,
    streams: &mut BatchStreams,
) -> Result<(LabeledBatch, UnlabeledBatch)> {
    if mu == 0 {
        return Err(Error::Config("mu must be >= 1".into()));
    }
    let labeled = next_labeled_batch(view, batch_size, &mut streams.labeled)?;
    let unlabeled = next_unlabeled_batch(view, mu * batch_size, &mut streams.unlabeled)?;
    Ok((labeled, unlabeled))
}
