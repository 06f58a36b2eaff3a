//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! Every forward evaluation records onto a fresh [`Tape`]; calling
//! [`Tape::backward`] on a scalar (1×1) node returns gradients for every
//! node that influenced it. Index selections (top-k experts, top-r% patches,
//! max pooling) are decided from forward values by the caller and recorded as
//! constant index lists, so no gradient flows through the selection itself.

use ndarray::{Array2, Axis};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// `a + b` with `b` a single row broadcast over the rows of `a`.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Softplus(Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    SelectRows(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    Gather(Var, Vec<(usize, usize)>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    /// Column-wise max; stores the winning row per column.
    MaxRows(Var, Vec<usize>),
    CrossEntropy(Var, usize),
    Cosine(Var, Var),
    Sum(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Mul(a, b)
            | Op::Cosine(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Softplus(a)
            | Op::Gelu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::SoftmaxRows(a)
            | Op::SelectRows(a, _)
            | Op::SelectCols(a, _)
            | Op::Gather(a, _)
            | Op::MeanRows(a)
            | Op::MaxRows(a, _)
            | Op::CrossEntropy(a, _)
            | Op::Sum(a) => vec![*a],
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn softmax_rows(a: &Mat) -> Mat {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let probs = softmax(row.as_slice().expect("standard layout"));
        for (dst, p) in row.iter_mut().zip(probs) {
            *dst = p;
        }
    }
    out
}

fn row_norm(a: &Mat) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        // Owned arrays must stay in standard layout for the slice-based kernels.
        let value = if value.is_standard_layout() { value } else { value.as_standard_layout().into_owned() };
        let requires_grad = match &op {
            Op::Leaf => true,
            op => op.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives a gradient (inputs, frozen tensors, noise).
    pub fn constant(&mut self, value: Mat) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].requires_grad = false;
        v
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn select_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let v = self.value(a).select(Axis(0), &rows);
        self.push(v, Op::SelectRows(a, rows))
    }

    pub fn select_cols(&mut self, a: Var, cols: Vec<usize>) -> Var {
        let v = self.value(a).select(Axis(1), &cols);
        self.push(v, Op::SelectCols(a, cols))
    }

    /// Picks individual entries into a single row.
    pub fn gather(&mut self, a: Var, at: Vec<(usize, usize)>) -> Var {
        let src = self.value(a);
        let v = Mat::from_shape_fn((1, at.len()), |(_, j)| src[at[j]]);
        self.push(v, Op::Gather(a, at))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        self.push(v, Op::ConcatRows(parts))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    /// Column-wise maximum over rows; ties go to the lower row index.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut winners = Vec::with_capacity(src.ncols());
        let mut v = Mat::zeros((1, src.ncols()));
        for (j, col) in src.columns().into_iter().enumerate() {
            let mut best = 0;
            for (i, x) in col.iter().enumerate() {
                if *x > col[best] {
                    best = i;
                }
            }
            winners.push(best);
            v[[0, j]] = col[best];
        }
        self.push(v, Op::MaxRows(a, winners))
    }

    /// Cross-entropy of a single logit row against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let z = self.value(logits);
        debug_assert_eq!(z.nrows(), 1);
        let row = z.row(0);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let v = Mat::from_elem((1, 1), lse - row[label]);
        self.push(v, Op::CrossEntropy(logits, label))
    }

    /// Cosine similarity of two rows; zero when either norm vanishes.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let (nx, ny) = (row_norm(x), row_norm(y));
        let c = if nx == 0.0 || ny == 0.0 { 0.0 } else { (x * y).sum() / (nx * ny) };
        self.push(Mat::from_elem((1, 1), c), Op::Cosine(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMulT(a, b) => {
                    // y = a bᵀ: ga = g b, gb = gᵀ a
                    if self.needs(*a) {
                        let ga = g.dot(self.value(*b));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = g.t().dot(self.value(*a));
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *row, gr);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g * *s),
                Op::Softplus(a) => {
                    let ga = &g * &self.value(*a).mapv(sigmoid);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let ga = &g * &self.value(*a).mapv(gelu_grad);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = &g * &node.value.mapv(|t| 1.0 - t * t);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = &g * &node.value.mapv(|s| s * (1.0 - s));
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.raw_dim());
                    for ((mut out, yr), gr) in ga.rows_mut().into_iter().zip(y.rows()).zip(g.rows()) {
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(p, q)| p * q).sum();
                        for ((o, p), q) in out.iter_mut().zip(yr.iter()).zip(gr.iter()) {
                            *o = p * (q - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SelectRows(a, rows) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(k);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SelectCols(a, cols) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    for (k, &c) in cols.iter().enumerate() {
                        let mut dst = ga.column_mut(c);
                        dst += &g.column(k);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather(a, at) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    for (k, &pos) in at.iter().enumerate() {
                        ga[pos] += g[[0, k]];
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        let gp = g.slice(ndarray::s![.., offset..offset + w]).to_owned();
                        accumulate(&mut grads, *p, gp);
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        let gp = g.slice(ndarray::s![offset..offset + h, ..]).to_owned();
                        accumulate(&mut grads, *p, gp);
                        offset += h;
                    }
                }
                Op::MeanRows(a) => {
                    let n = self.value(*a).nrows();
                    let row = g.row(0).mapv(|x| x / n as f64);
                    let ga = row.broadcast((n, row.len())).expect("broadcastable").to_owned();
                    accumulate(&mut grads, *a, ga);
                }
                Op::MaxRows(a, winners) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    for (j, &i) in winners.iter().enumerate() {
                        ga[[i, j]] = g[[0, j]];
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::CrossEntropy(logits, label) => {
                    let z = self.value(*logits);
                    let probs = softmax(z.as_slice().expect("standard layout"));
                    let mut ga = Mat::from_shape_vec((1, probs.len()), probs).expect("shape");
                    ga[[0, *label]] -= 1.0;
                    accumulate(&mut grads, *logits, ga * g[[0, 0]]);
                }
                Op::Cosine(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let (nx, ny) = (row_norm(x), row_norm(y));
                    if nx > 0.0 && ny > 0.0 {
                        let c = node.value[[0, 0]];
                        let s = g[[0, 0]];
                        let ga = (y / (nx * ny) - x * (c / (nx * nx))) * s;
                        let gb = (x / (nx * ny) - y * (c / (ny * ny))) * s;
                        accumulate(&mut grads, *a, ga);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Sum(a) => {
                    let ga = Mat::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Grads { grads }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradients produced by [`Tape::backward`]. Only leaf gradients are kept
/// intact; interior buffers are released during the sweep.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    /// Gradient for a leaf, or zeros of `shape` when the leaf did not
    /// influence the root.
    pub fn leaf(&self, v: Var, shape: (usize, usize)) -> Mat {
        match self.grads.get(v.0) {
            Some(Some(g)) if g.dim() == shape => g.clone(),
            _ => Mat::zeros(shape),
        }
    }

    /// Same as [`Grads::leaf`] with the shape read from the tape.
    pub fn of(&self, tape: &Tape, v: Var) -> Mat {
        self.leaf(v, tape.value(v).dim())
    }
}
