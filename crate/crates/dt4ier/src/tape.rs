//! Reverse-mode automatic differentiation over dense 2-D `f64` arrays.
//!
//! Every intermediate of a forward pass is a node on a [`Tape`]; calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and
//! accumulates gradients for every node it visits. The op set is exactly
//! what the model needs (GRU cells, attention, layer norm, the loss
//! terms) — nothing speculative.
//!
//! All shapes are `(rows, cols)`. Scalars are `1x1` arrays.

use ndarray::{Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// `a @ b`
    MatMul(Var, Var),
    /// `a @ b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// elementwise product, equal shapes
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// `(m,n) + (1,n)` row broadcast
    AddRow(Var, Var),
    /// `(m,n) * (1,n)` row broadcast
    MulRow(Var, Var),
    /// `(m,n) - (m,1)` column broadcast
    SubCol(Var, Var),
    /// `(m,n) * (m,1)` column broadcast
    MulCol(Var, Var),
    /// `(m,n) -> (m,1)` mean over each row
    RowMean(Var),
    /// `(m,n) -> (m,1)` sum over each row
    RowSum(Var),
    SumAll(Var),
    MeanAll(Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Gelu(Var),
    /// elementwise `x^p`; caller guarantees x > 0 when p is fractional
    PowConst(Var, f64),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    /// row gather; duplicate indices accumulate in the backward pass
    GatherRows(Var, Vec<usize>),
    /// mean of `-log softmax(logits)[target]` over unmasked rows
    CrossEntropyRows(Var, Vec<usize>, Vec<bool>),
    /// sum over constant rows `n` of the mean cosine similarity between
    /// every row of the input and `n`; zero-norm pairs contribute 0
    CosSimSumToConsts(Var, Array2<f64>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `v`, if `v`
    /// participated in the computation.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }
}

/// A growable record of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const NORM_EPS: f64 = 1e-12;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1x1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.dim(), (1, 1));
        a[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Insert a constant or parameter value.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a @ b^T` without materialising the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        debug_assert_eq!(self.value(a).ncols(), self.value(row).ncols());
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn sub_col(&mut self, a: Var, col: Var) -> Var {
        debug_assert_eq!(self.value(col).ncols(), 1);
        let v = self.value(a) - self.value(col);
        self.push(v, Op::SubCol(a, col))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        debug_assert_eq!(self.value(col).ncols(), 1);
        let v = self.value(a) * self.value(col);
        self.push(v, Op::MulCol(a, col))
    }

    pub fn row_mean(&mut self, a: Var) -> Var {
        let n = self.value(a).ncols() as f64;
        let v = self
            .value(a)
            .sum_axis(Axis(1))
            .insert_axis(Axis(1))
            .mapv(|x| x / n);
        self.push(v, Op::RowMean(a))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowSum(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).mean().unwrap());
        self.push(v, Op::MeanAll(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu_scalar);
        self.push(v, Op::Gelu(a))
    }

    pub fn pow_const(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).mapv(|x| x.powf(p));
        self.push(v, Op::PowConst(a, p))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        debug_assert!(!parts.is_empty());
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for p in parts {
            let pv = self.value(*p);
            v.slice_mut(ndarray::s![.., at..at + pv.ncols()]).assign(pv);
            at += pv.ncols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let v = self.value(a).slice(ndarray::s![.., lo..hi]).to_owned();
        self.push(v, Op::SliceCols(a, lo, hi))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        debug_assert!(!parts.is_empty());
        let cols = self.value(parts[0]).ncols();
        let rows: usize = parts.iter().map(|p| self.value(*p).nrows()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for p in parts {
            let pv = self.value(*p);
            v.slice_mut(ndarray::s![at..at + pv.nrows(), ..]).assign(pv);
            at += pv.nrows();
        }
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, lo: usize, len: usize) -> Var {
        let v = self.value(a).slice(ndarray::s![lo..lo + len, ..]).to_owned();
        self.push(v, Op::SliceRows(a, lo, len))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let src = self.value(a);
        let mut v = Array2::zeros((indices.len(), src.ncols()));
        for (i, &ix) in indices.iter().enumerate() {
            v.row_mut(i).assign(&src.row(ix));
        }
        self.push(v, Op::GatherRows(a, indices.to_vec()))
    }

    /// Mean over unmasked rows of `-log softmax(logits)[target]`.
    /// Returns 0 when every row is masked.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Var {
        let lv = self.value(logits);
        debug_assert_eq!(lv.nrows(), targets.len());
        debug_assert_eq!(lv.nrows(), mask.len());
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, row) in lv.rows().into_iter().enumerate() {
            if !mask[i] {
                continue;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[i]];
            count += 1;
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            Array2::from_elem((1, 1), value),
            Op::CrossEntropyRows(logits, targets.to_vec(), mask.to_vec()),
        )
    }

    /// `sum_n mean_p cos(pred_p, negs_n)` with `negs` held constant.
    pub fn cos_sim_sum_to_consts(&mut self, pred: Var, negs: Array2<f64>) -> Var {
        let pv = self.value(pred);
        debug_assert_eq!(pv.ncols(), negs.ncols());
        let p_rows = pv.nrows();
        let mut total = 0.0;
        for n in negs.rows() {
            let n_norm = n.dot(&n).sqrt();
            if n_norm < NORM_EPS {
                continue;
            }
            let mut acc = 0.0;
            for p in pv.rows() {
                let p_norm = p.dot(&p).sqrt();
                if p_norm < NORM_EPS {
                    continue;
                }
                acc += p.dot(&n) / (p_norm * n_norm);
            }
            total += acc / p_rows as f64;
        }
        self.push(
            Array2::from_elem((1, 1), total),
            Op::CosSimSumToConsts(pred, negs),
        )
    }

    /// Reverse pass from a `1x1` node. Gradients of every contributing node
    /// are accumulated; nodes after `root` are ignored.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.value(root).dim(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let add_to = |grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>| {
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.dot(&self.value(*b).t());
                let db = self.value(*a).t().dot(g);
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::MatMulT(a, b) => {
                let da = g.dot(self.value(*b));
                let db = g.t().dot(self.value(*a));
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                add_to(grads, *a, g * self.value(*b));
                add_to(grads, *b, g * self.value(*a));
            }
            Op::Scale(a, c) => add_to(grads, *a, g * *c),
            Op::AddScalar(a) => add_to(grads, *a, g.clone()),
            Op::AddRow(a, row) => {
                add_to(grads, *a, g.clone());
                let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                add_to(grads, *row, dr);
            }
            Op::MulRow(a, row) => {
                add_to(grads, *a, g * self.value(*row));
                let dr = (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                add_to(grads, *row, dr);
            }
            Op::SubCol(a, col) => {
                add_to(grads, *a, g.clone());
                let dc = -g.sum_axis(Axis(1)).insert_axis(Axis(1));
                add_to(grads, *col, dc);
            }
            Op::MulCol(a, col) => {
                add_to(grads, *a, g * self.value(*col));
                let dc = (g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                add_to(grads, *col, dc);
            }
            Op::RowMean(a) => {
                let n = self.value(*a).ncols();
                let mut da = Array2::zeros(self.value(*a).dim());
                for (mut row, gv) in da.rows_mut().into_iter().zip(g.column(0)) {
                    row.fill(gv / n as f64);
                }
                add_to(grads, *a, da);
            }
            Op::RowSum(a) => {
                let mut da = Array2::zeros(self.value(*a).dim());
                for (mut row, gv) in da.rows_mut().into_iter().zip(g.column(0)) {
                    row.fill(*gv);
                }
                add_to(grads, *a, da);
            }
            Op::SumAll(a) => {
                let da = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                add_to(grads, *a, da);
            }
            Op::MeanAll(a) => {
                let dim = self.value(*a).dim();
                let da = Array2::from_elem(dim, g[[0, 0]] / (dim.0 * dim.1) as f64);
                add_to(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                add_to(grads, *a, g * &(y * &(1.0 - y)));
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                add_to(grads, *a, g * &(1.0 - y * y));
            }
            Op::LeakyRelu(a, s) => {
                let x = self.value(*a);
                let da = ndarray::Zip::from(g)
                    .and(x)
                    .map_collect(|gv, xv| if *xv > 0.0 { *gv } else { *gv * s });
                add_to(grads, *a, da);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let da = ndarray::Zip::from(g)
                    .and(x)
                    .map_collect(|gv, xv| gv * gelu_grad_scalar(*xv));
                add_to(grads, *a, da);
            }
            Op::PowConst(a, p) => {
                let x = self.value(*a);
                let da = ndarray::Zip::from(g)
                    .and(x)
                    .map_collect(|gv, xv| gv * p * xv.powf(p - 1.0));
                add_to(grads, *a, da);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut da = Array2::zeros(y.dim());
                for ((mut drow, yrow), grow) in da
                    .rows_mut()
                    .into_iter()
                    .zip(y.rows())
                    .zip(g.rows())
                {
                    let dot: f64 = grow.dot(&yrow);
                    for ((d, y), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d = y * (gv - dot);
                    }
                }
                add_to(grads, *a, da);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    let dp = g.slice(ndarray::s![.., at..at + w]).to_owned();
                    add_to(grads, *p, dp);
                    at += w;
                }
            }
            Op::SliceCols(a, lo, hi) => {
                let mut da = Array2::zeros(self.value(*a).dim());
                da.slice_mut(ndarray::s![.., *lo..*hi]).assign(g);
                add_to(grads, *a, da);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let h = self.value(*p).nrows();
                    let dp = g.slice(ndarray::s![at..at + h, ..]).to_owned();
                    add_to(grads, *p, dp);
                    at += h;
                }
            }
            Op::SliceRows(a, lo, len) => {
                let mut da = Array2::zeros(self.value(*a).dim());
                da.slice_mut(ndarray::s![*lo..*lo + *len, ..]).assign(g);
                add_to(grads, *a, da);
            }
            Op::GatherRows(a, indices) => {
                let mut da = Array2::zeros(self.value(*a).dim());
                for (i, &ix) in indices.iter().enumerate() {
                    let mut dst = da.row_mut(ix);
                    dst += &g.row(i);
                }
                add_to(grads, *a, da);
            }
            Op::CrossEntropyRows(logits, targets, mask) => {
                let lv = self.value(*logits);
                let count = mask.iter().filter(|m| **m).count();
                let mut da = Array2::zeros(lv.dim());
                if count > 0 {
                    let scale = g[[0, 0]] / count as f64;
                    for (r, row) in lv.rows().into_iter().enumerate() {
                        if !mask[r] {
                            continue;
                        }
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut exp: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                        let sum: f64 = exp.iter().sum();
                        for e in &mut exp {
                            *e /= sum;
                        }
                        let mut drow = da.row_mut(r);
                        for (j, e) in exp.iter().enumerate() {
                            drow[j] = scale * e;
                        }
                        drow[targets[r]] -= scale;
                    }
                }
                add_to(grads, *logits, da);
            }
            Op::CosSimSumToConsts(pred, negs) => {
                let pv = self.value(*pred);
                let p_rows = pv.nrows() as f64;
                let mut da = Array2::zeros(pv.dim());
                let scale = g[[0, 0]] / p_rows;
                for n in negs.rows() {
                    let n_norm = n.dot(&n).sqrt();
                    if n_norm < NORM_EPS {
                        continue;
                    }
                    for (r, p) in pv.rows().into_iter().enumerate() {
                        let p_norm = p.dot(&p).sqrt();
                        if p_norm < NORM_EPS {
                            continue;
                        }
                        let dot = p.dot(&n);
                        let cos = dot / (p_norm * n_norm);
                        let mut drow = da.row_mut(r);
                        for (j, d) in drow.iter_mut().enumerate() {
                            *d += scale * (n[j] / (p_norm * n_norm) - cos * p[j] / (p_norm * p_norm));
                        }
                    }
                }
                add_to(grads, *pred, da);
            }
        }
    }
}
