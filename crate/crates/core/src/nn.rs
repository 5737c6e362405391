//! The model family: encoder `f`, projector `g`, closed-set head `φ`,
//! multi-binary head `χ` and open-set head `ψ`.
//!
//! `φ` reads encoder features directly; `χ` and `ψ` only ever see the
//! projector output, so the closed-set and one-vs-all classifiers are trained
//! in separate feature spaces.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

pub const CHECKPOINT_FORMAT: &str = "iomatch-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkDims {
    pub input_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub projector_hidden: usize,
    pub proj_dim: usize,
}

impl Default for NetworkDims {
    fn default() -> Self {
        Self {
            input_dim: 16,
            encoder_hidden: vec![128, 128],
            feature_dim: 32,
            projector_hidden: 16,
            proj_dim: 8,
        }
    }
}

impl NetworkDims {
    pub fn validate(&self) -> Result<()> {
        let widths = [self.input_dim, self.feature_dim, self.projector_hidden, self.proj_dim];
        if widths.iter().chain(&self.encoder_hidden).any(|&w| w == 0) {
            return Err(Error::Config("all layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Fully connected layer; `weight` is `fan_in × fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor::new(fan_in, fan_out, data)
                .expect("sized above")
                .with_grad(),
            bias: Tensor::zeros(1, fan_out).with_grad(),
        }
    }

    fn bind(&self, tape: &mut Tape) -> BoundLinear {
        BoundLinear {
            weight: tape.leaf(&self.weight),
            bias: tape.leaf(&self.bias),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, self.weight)?;
        tape.add_row(xw, self.bias)
    }
}

/// Which parameters a training mode actually uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamScope {
    /// Encoder and closed-set head only (FixMatch-style and supervised baselines).
    ClosedSet,
    /// Every module, including projector, multi-binary and open-set heads.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub dims: NetworkDims,
    pub num_classes: usize,
    pub seed: u64,
    pub encoder: Vec<Linear>,
    pub closed_head: Linear,
    pub projector: Vec<Linear>,
    pub multibinary_head: Linear,
    pub open_head: Linear,
}

impl NetworkParams {
    /// Uniform `±1/sqrt(fan_in)` weights and zero biases, drawn in a fixed
    /// module order from one seeded stream. The encoder and closed-set head
    /// come first so they are identical across training modes.
    pub fn init(seed: u64, dims: &NetworkDims, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 seen classes, got {num_classes}"
            )));
        }
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut widths = vec![dims.input_dim];
        widths.extend(&dims.encoder_hidden);
        widths.push(dims.feature_dim);
        let encoder = widths
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], &mut rng))
            .collect();
        let closed_head = Linear::init(dims.feature_dim, num_classes, &mut rng);
        let projector = vec![
            Linear::init(dims.feature_dim, dims.projector_hidden, &mut rng),
            Linear::init(dims.projector_hidden, dims.proj_dim, &mut rng),
        ];
        let multibinary_head = Linear::init(dims.proj_dim, 2 * num_classes, &mut rng);
        let open_head = Linear::init(dims.proj_dim, num_classes + 1, &mut rng);

        Ok(Self {
            dims: dims.clone(),
            num_classes,
            seed,
            encoder,
            closed_head,
            projector,
            multibinary_head,
            open_head,
        })
    }

    fn layers(&self) -> Vec<(String, &Linear)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}"), l));
        }
        out.push(("closed_head".into(), &self.closed_head));
        for (i, l) in self.projector.iter().enumerate() {
            out.push((format!("projector.{i}"), l));
        }
        out.push(("multibinary_head".into(), &self.multibinary_head));
        out.push(("open_head".into(), &self.open_head));
        out
    }

    /// `(name, tensor)` pairs in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers()
            .into_iter()
            .flat_map(|(name, l)| {
                [
                    (format!("{name}.weight"), &l.weight),
                    (format!("{name}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    /// Owned copies of every tensor in [`Self::named_tensors`] order.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t.clone()).collect()
    }

    /// Mutable tensors in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let layers = self
            .encoder
            .iter_mut()
            .chain(std::iter::once(&mut self.closed_head))
            .chain(self.projector.iter_mut())
            .chain([&mut self.multibinary_head, &mut self.open_head]);
        layers
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn parameter_count(&self, scope: ParamScope) -> usize {
        let closed: usize = self.encoder.iter().map(Linear::parameter_count).sum::<usize>()
            + self.closed_head.parameter_count();
        match scope {
            ParamScope::ClosedSet => closed,
            ParamScope::Full => {
                closed
                    + self.projector.iter().map(Linear::parameter_count).sum::<usize>()
                    + self.multibinary_head.parameter_count()
                    + self.open_head.parameter_count()
            }
        }
    }

    /// Registers every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            encoder: self.encoder.iter().map(|l| l.bind(tape)).collect(),
            closed_head: self.closed_head.bind(tape),
            projector: self.projector.iter().map(|l| l.bind(tape)).collect(),
            multibinary_head: self.multibinary_head.bind(tape),
            open_head: self.open_head.bind(tape),
            num_classes: self.num_classes,
        }
    }

    /// Adds the gradients of a finished backward pass into each parameter.
    pub fn absorb_grads(&mut self, bound: &BoundParams, grads: &Gradients) -> Result<()> {
        let vars = bound.vars();
        let tensors = self.tensors_mut();
        for (t, v) in tensors.into_iter().zip(vars) {
            let g = grads
                .get(v)
                .ok_or_else(|| Error::Usage("parameter was not bound as a gradient leaf".into()))?;
            t.accumulate_grad(&g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// Tape-free inference: closed-set and open-set probabilities.
    pub fn predict(&self, x: &Tensor) -> Result<Predictions> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let out = forward(&mut tape, &bound, x)?;
        Ok(Predictions {
            p: tape.value(out.p),
            o: tape.value(out.o),
            q_open: tape.value(out.q_open),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let tensors = self
            .named_tensors()
            .into_iter()
            .map(|(name, t)| {
                (
                    name,
                    TensorRecord {
                        shape: [t.rows(), t.cols()],
                        values: t.data().to_vec(),
                    },
                )
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            num_classes: self.num_classes,
            seed: self.seed,
            dims: self.dims.clone(),
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!("unknown checkpoint format `{}`", ckpt.format)));
        }
        let mut params = Self::init(ckpt.seed, &ckpt.dims, ckpt.num_classes)?;
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        if ckpt.tensors.len() != names.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, architecture needs {}",
                ckpt.tensors.len(),
                names.len()
            )));
        }
        for (name, t) in names.iter().zip(params.tensors_mut()) {
            let rec = ckpt
                .tensors
                .get(name)
                .ok_or_else(|| Error::Data(format!("checkpoint is missing `{name}`")))?;
            if rec.shape != [t.rows(), t.cols()] || rec.values.len() != t.len() {
                return Err(Error::Data(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    rec.shape,
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(&rec.values);
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(&self.to_checkpoint())?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&serde_json::from_str(&text)?)
    }
}

/// On-disk checkpoint: a flat name → tensor mapping plus the architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub num_classes: usize,
    pub seed: u64,
    pub dims: NetworkDims,
    pub tensors: BTreeMap<String, TensorRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: [usize; 2],
    /// Row-major values.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BoundParams {
    pub encoder: Vec<BoundLinear>,
    pub closed_head: BoundLinear,
    pub projector: Vec<BoundLinear>,
    pub multibinary_head: BoundLinear,
    pub open_head: BoundLinear,
    pub num_classes: usize,
}

impl BoundParams {
    /// Rebuilds the layer structure of `params` from handles already on a
    /// tape, given in [`NetworkParams::named_tensors`] order.
    pub fn from_vars(params: &NetworkParams, vars: &[Var]) -> Result<Self> {
        let expected = 2 * (params.encoder.len() + params.projector.len() + 3);
        if vars.len() != expected {
            return Err(Error::Usage(format!("expected {expected} parameter handles, got {}", vars.len())));
        }
        let mut it = vars.chunks_exact(2).map(|c| BoundLinear {
            weight: c[0],
            bias: c[1],
        });
        let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<_>>();
        let encoder = take(params.encoder.len());
        let closed_head = take(1).remove(0);
        let projector = take(params.projector.len());
        let mut heads = take(2);
        let open_head = heads.pop().expect("two heads");
        let multibinary_head = heads.pop().expect("two heads");
        Ok(Self {
            encoder,
            closed_head,
            projector,
            multibinary_head,
            open_head,
            num_classes: params.num_classes,
        })
    }

    /// Leaf handles in [`NetworkParams::named_tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = Vec::new();
        let mut push = |l: &BoundLinear| {
            v.push(l.weight);
            v.push(l.bias);
        };
        self.encoder.iter().for_each(&mut push);
        push(&self.closed_head);
        self.projector.iter().for_each(&mut push);
        push(&self.multibinary_head);
        push(&self.open_head);
        v
    }
}

/// Outputs of a full forward pass, as handles on the tape.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutputs {
    /// Encoder features, n×D.
    pub h: Var,
    /// Projections, n×d.
    pub z: Var,
    /// Closed-set probabilities, n×K.
    pub p: Var,
    /// Per-class inlier probabilities, n×K. The outlier side is `1 − o`.
    pub o: Var,
    /// Open-set probabilities, n×(K+1); the last column is the outlier class.
    pub q_open: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ClosedOutputs {
    pub h: Var,
    pub p: Var,
}

#[derive(Debug, Clone)]
pub struct Predictions {
    pub p: Tensor,
    pub o: Tensor,
    pub q_open: Tensor,
}

fn check_input(tape: &Tape, bound: &BoundParams, x: Var) -> Result<()> {
    let (rows, cols) = tape.shape(x);
    let expected = tape.shape(bound.encoder[0].weight).0;
    if cols != expected {
        return Err(Error::Shape {
            op: "forward",
            lhs: (rows, cols),
            rhs: (rows, expected),
        });
    }
    Ok(())
}

fn encode(tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var> {
    let mut h = x;
    for layer in &bound.encoder {
        let a = layer.forward(tape, h)?;
        h = tape.relu(a);
    }
    Ok(h)
}

fn project(tape: &mut Tape, bound: &BoundParams, h: Var) -> Result<Var> {
    let hidden = bound.projector[0].forward(tape, h)?;
    let hidden = tape.relu(hidden);
    bound.projector[1].forward(tape, hidden)
}

/// `h = f(x)` and `p = softmax(φ(h))` only.
pub fn forward_closed(tape: &mut Tape, bound: &BoundParams, x: &Tensor) -> Result<ClosedOutputs> {
    let xv = tape.constant(x.clone());
    check_input(tape, bound, xv)?;
    let h = encode(tape, bound, xv)?;
    let logits = bound.closed_head.forward(tape, h)?;
    let p = tape.softmax_rows(logits);
    Ok(ClosedOutputs { h, p })
}

/// Full forward pass through every module.
pub fn forward(tape: &mut Tape, bound: &BoundParams, x: &Tensor) -> Result<ForwardOutputs> {
    let ClosedOutputs { h, p } = forward_closed(tape, bound, x)?;
    let z = project(tape, bound, h)?;
    let n = tape.shape(z).0;
    let k = bound.num_classes;

    // χ(z) is laid out as [in_0, out_0, in_1, out_1, ...]; each pair is a
    // two-way softmax and column 0 of the pair is the inlier probability.
    let mb = bound.multibinary_head.forward(tape, z)?;
    let pairs = tape.reshape(mb, n * k, 2)?;
    let pairs = tape.softmax_rows(pairs);
    let inlier = tape.select_cols(pairs, &[0])?;
    let o = tape.reshape(inlier, n, k)?;

    let open_logits = bound.open_head.forward(tape, z)?;
    let q_open = tape.softmax_rows(open_logits);
    Ok(ForwardOutputs { h, z, p, o, q_open })
}

/// Two passes with shared parameters: weak view, then strong view.
pub fn forward_views(
    tape: &mut Tape,
    bound: &BoundParams,
    x_weak: &Tensor,
    x_strong: &Tensor,
) -> Result<(ForwardOutputs, ForwardOutputs)> {
    if x_weak.shape() != x_strong.shape() {
        return Err(Error::Shape {
            op: "forward_views",
            lhs: x_weak.shape(),
            rhs: x_strong.shape(),
        });
    }
    Ok((forward(tape, bound, x_weak)?, forward(tape, bound, x_strong)?))
}
