use super::{argmax, kernels, Tensor, LOG_EPS};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Log(Var),
    Softmax(Var),
    Sum(Var),
    RowSum(Var),
    /// Selected column per row; shared by row-max and gather.
    Pick(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of differentiable operations.
///
/// Node indices are assigned in execution order, so iterating them in reverse
/// is a valid reverse topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    leaf_shapes: Vec<Option<(usize, usize)>>,
}

impl Gradients {
    /// Gradient for a leaf that requires it. Leaves the loss does not depend on
    /// get an all-zero gradient.
    pub fn get(&self, var: Var) -> Option<Vec<f64>> {
        let (r, c) = (*self.leaf_shapes.get(var.0)?)?;
        Some(match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => vec![0.0; r * c],
        })
    }

    pub fn get_tensor(&self, var: Var) -> Option<Tensor> {
        let (r, c) = (*self.leaf_shapes.get(var.0)?)?;
        Tensor::new(r, c, self.get(var)?).ok()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all recorded nodes and makes the tape reusable.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Registers a copy of `t` as a leaf, honoring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            rows: t.rows(),
            cols: t.cols(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers `t` as a constant; no gradient ever flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let (rows, cols) = t.shape();
        self.nodes.push(Node {
            rows,
            cols,
            value: t.into_data(),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the current value of `v` into a new constant node.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v);
        self.constant(t)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.rows, n.cols, n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape { op, lhs: sa, rhs: sb });
        }
        Ok(sa)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: (m, k),
                rhs: (k2, n),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(m, n, out, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, record: Op) -> Result<Var> {
        let (r, c) = self.same_shape(op, a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(r, c, out, record, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a 1×n row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let ((m, n), (br, bc)) = (self.shape(x), self.shape(bias));
        if br != 1 || bc != n {
            return Err(Error::Shape {
                op: "add_row",
                lhs: (m, n),
                rhs: (br, bc),
            });
        }
        let b = self.data(bias);
        let out = self
            .data(x)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        Ok(self.push(m, n, out, Op::AddRow(x, bias), &[x, bias]))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (r, c) = self.shape(x);
        let out = self.data(x).iter().map(|v| scale * v + shift).collect();
        self.push(r, c, out, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.data(x).iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect();
        self.push(r, c, out, Op::Relu(x), &[x])
    }

    /// Natural log with the argument clamped below at [`LOG_EPS`].
    pub fn log(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.data(x).iter().map(|&v| if v < LOG_EPS { LOG_EPS.ln() } else { v.ln() }).collect();
        self.push(r, c, out, Op::Log(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let mut out = vec![0.0; r * c];
        for (o, row) in out.chunks_exact_mut(c).zip(self.data(x).chunks_exact(c)) {
            kernels::softmax_row(row, o);
        }
        self.push(r, c, out, Op::Softmax(x), &[x])
    }

    /// Sum of all entries, as 1×1.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(x), &[x])
    }

    /// Mean of all entries, as 1×1. The mean of an empty tensor is 0.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.data(x).len();
        let s = self.sum(x);
        if n == 0 {
            return s;
        }
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-row sums, as m×1.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.data(x).chunks_exact(c).map(|row| row.iter().sum()).collect();
        self.push(r, 1, out, Op::RowSum(x), &[x])
    }

    /// Per-row maxima, as m×1. The gradient routes to the first maximal entry.
    pub fn row_max(&mut self, x: Var) -> Var {
        let (_, c) = self.shape(x);
        let idx: Vec<usize> = self.data(x).chunks_exact(c).map(argmax).collect();
        self.pick(x, idx)
    }

    /// `x[i, idx[i]]` for every row, as m×1.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if idx.len() != r {
            return Err(Error::Shape {
                op: "gather",
                lhs: (r, c),
                rhs: (idx.len(), 1),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::Data(format!("gather index {bad} out of range for {c} columns")));
        }
        Ok(self.pick(x, idx.to_vec()))
    }

    fn pick(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let (r, c) = self.shape(x);
        let out = self
            .data(x)
            .chunks_exact(c)
            .zip(&idx)
            .map(|(row, &j)| row[j])
            .collect();
        self.push(r, 1, out, Op::Pick(x, idx), &[x])
    }

    /// Copies the listed columns, in order.
    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if cols.is_empty() || cols.iter().any(|&j| j >= c) {
            return Err(Error::Shape {
                op: "select_cols",
                lhs: (r, c),
                rhs: (1, cols.len()),
            });
        }
        let out = self
            .data(x)
            .chunks_exact(c)
            .flat_map(|row| cols.iter().map(move |&j| row[j]))
            .collect();
        Ok(self.push(r, cols.len(), out, Op::SelectCols(x, cols.to_vec()), &[x]))
    }

    /// Reinterprets row-major storage under a new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r * c != rows * cols || cols == 0 {
            return Err(Error::Shape {
                op: "reshape",
                lhs: (r, c),
                rhs: (rows, cols),
            });
        }
        let out = self.data(x).to_vec();
        Ok(self.push(rows, cols, out, Op::Reshape(x), &[x]))
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Usage("backward called on a consumed tape".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward called on an empty tape".into()));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }

        let leaf_shapes = self
            .nodes
            .iter()
            .map(|n| (matches!(n.op, Op::Leaf) && n.requires_grad).then_some((n.rows, n.cols)))
            .collect::<Vec<_>>();
        for (g, shape) in grads.iter_mut().zip(&leaf_shapes) {
            if shape.is_none() {
                *g = None;
            }
        }
        Ok(Gradients { grads, leaf_shapes })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ((m, k), (_, n)) = (self.shape(*a), self.shape(*b));
                if self.requires_grad(*a) {
                    let acc = slot(grads, *a, m * k);
                    kernels::matmul_nt_acc(g, self.data(*b), acc, m, n, k);
                }
                if self.requires_grad(*b) {
                    let acc = slot(grads, *b, k * n);
                    kernels::matmul_tn_acc(self.data(*a), g, acc, m, k, n);
                }
            }
            Op::Add(a, b) => {
                self.acc_map(grads, *a, g, |_, gv| gv);
                self.acc_map(grads, *b, g, |_, gv| gv);
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, *a, g, |_, gv| gv);
                self.acc_map(grads, *b, g, |_, gv| -gv);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.acc_map(grads, *a, g, |j, gv| gv * bv[j]);
                self.acc_map(grads, *b, g, |j, gv| gv * av[j]);
            }
            Op::AddRow(x, bias) => {
                self.acc_map(grads, *x, g, |_, gv| gv);
                if self.requires_grad(*bias) {
                    let acc = slot(grads, *bias, cols);
                    for row in g.chunks_exact(cols) {
                        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::Affine(x, s) => self.acc_map(grads, *x, g, |_, gv| s * gv),
            Op::Relu(x) => {
                let xv = self.data(*x);
                self.acc_map(grads, *x, g, |j, gv| if xv[j] > 0.0 { gv } else { 0.0 });
            }
            Op::Log(x) => {
                let xv = self.data(*x);
                self.acc_map(grads, *x, g, |j, gv| if xv[j] > LOG_EPS { gv / xv[j] } else { 0.0 });
            }
            Op::Softmax(x) => {
                if self.requires_grad(*x) {
                    let y = &node.value;
                    let acc = slot(grads, *x, rows * cols);
                    for r in 0..rows {
                        let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            acc[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::Sum(x) => self.acc_map(grads, *x, g, |_, _| g[0]),
            Op::RowSum(x) => {
                let xc = self.shape(*x).1;
                self.acc_map(grads, *x, g, |j, _| g[j / xc]);
            }
            Op::Pick(x, idx) => {
                if self.requires_grad(*x) {
                    let (xr, xc) = self.shape(*x);
                    let acc = slot(grads, *x, xr * xc);
                    for (r, &j) in idx.iter().enumerate() {
                        acc[r * xc + j] += g[r];
                    }
                }
            }
            Op::SelectCols(x, sel) => {
                if self.requires_grad(*x) {
                    let (xr, xc) = self.shape(*x);
                    let acc = slot(grads, *x, xr * xc);
                    for r in 0..rows {
                        for (c, &j) in sel.iter().enumerate() {
                            acc[r * xc + j] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::Reshape(x) => self.acc_map(grads, *x, g, |_, gv| gv),
        }
    }

    /// Accumulates `f(j, g[j])` into input `x` when it requires gradients.
    /// For ops whose upstream is not elementwise (`Sum`, `RowSum`), `g` is
    /// only read through `f`, so the iteration runs over `x`'s length.
    fn acc_map(&self, grads: &mut [Option<Vec<f64>>], x: Var, g: &[f64], f: impl Fn(usize, f64) -> f64) {
        if !self.requires_grad(x) {
            return;
        }
        let len = self.data(x).len();
        let acc = slot(grads, x, len);
        for (j, a) in acc.iter_mut().enumerate() {
            let gv = g.get(j).copied().unwrap_or(0.0);
            *a += f(j, gv);
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.leaf(&mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.leaf(&mat(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let a = mat(&[&[1.5, -2.0, 3.0], &[0.0, 4.0, -1.0]]);
        let av = tape.leaf(&a);
        let i = tape.leaf(&Tensor::identity(3));
        let out = tape.matmul(av, i).unwrap();
        assert_eq!(tape.data(out), a.data());

        let z = tape.leaf(&mat(&[&[0.0, 0.0]]));
        let ones = tape.leaf(&mat(&[&[1.0], &[1.0]]));
        let out = tape.matmul(z, ones).unwrap();
        assert_eq!(tape.data(out), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(2, 3));
        let b = tape.leaf(&Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("(2, 3)"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&mat(&[&[0.0, 0.0], &[2f64.ln(), 0.0], &[1000.0, 0.0]]));
        let y = tape.softmax_rows(x);
        let v = tape.data(y);
        assert_eq!(&v[0..2], &[0.5, 0.5]);
        assert!((v[2] - 2.0 / 3.0).abs() < 1e-15);
        assert!((v[3] - 1.0 / 3.0).abs() < 1e-15);
        assert!((v[4] - 1.0).abs() < 1e-15 && v[5] >= 0.0 && v[5] < 1e-300);
    }

    #[test]
    fn relu_and_log_clamp() {
        let mut tape = Tape::new();
        let x = tape.leaf(&mat(&[&[-1.0, 0.0, 2.0]]));
        let r = tape.relu(x);
        assert_eq!(tape.data(r), &[0.0, 0.0, 2.0]);
        let l = tape.log(r);
        assert_eq!(tape.data(l)[0], LOG_EPS.ln());
        assert!(tape.data(l).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let w = tape.leaf(&Tensor::zeros(2, 2).with_grad());
        let s = tape.sum(w);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn backward_square_gives_two_w() {
        let mut tape = Tape::new();
        let w = tape.leaf(&mat(&[&[1.0, 2.0], &[3.0, 4.0]]).with_grad());
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap(), vec![2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let w = tape.leaf(&Tensor::filled(2, 2, 3.0).with_grad());
        let v = tape.leaf(&Tensor::filled(1, 3, 1.0).with_grad());
        let s = tape.sum(v);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn second_backward_is_usage_error() {
        let mut tape = Tape::new();
        let w = tape.leaf(&Tensor::scalar(1.0).with_grad());
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Usage(_))));
        tape.clear();
        assert!(tape.is_empty());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.leaf(&Tensor::zeros(2, 2).with_grad());
        assert!(matches!(tape.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::filled(1, 2, 2.0));
        let b = tape.leaf(&Tensor::filled(1, 2, 3.0));
        let c = tape.mul(a, b).unwrap();
        assert!(!tape.requires_grad(c));
    }

    #[test]
    fn row_max_and_gather() {
        let mut tape = Tape::new();
        let x = tape.leaf(&mat(&[&[0.1, 0.7, 0.2], &[0.4, 0.4, 0.1]]).with_grad());
        let m = tape.row_max(x);
        assert_eq!(tape.data(m), &[0.7, 0.4]);
        let g = tape.gather(x, &[2, 0]).unwrap();
        assert_eq!(tape.data(g), &[0.2, 0.4]);
        let both = tape.add(m, g).unwrap();
        let s = tape.sum(both);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), vec![0.0, 1.0, 1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(1, 2));
        assert!(tape.gather(x, &[2]).is_err());
    }

    #[test]
    fn row_bias_broadcast() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(3, 2).with_grad());
        let b = tape.leaf(&mat(&[&[1.0, -1.0]]).with_grad());
        let y = tape.add_row(x, b).unwrap();
        assert_eq!(tape.data(y), &[1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap(), vec![3.0, 3.0]);
    }
}
