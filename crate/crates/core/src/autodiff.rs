//! Reverse-mode automatic differentiation over [`Matrix`].
//!
//! A [`Tape`] is an append-only arena of nodes; building an op computes its
//! value eagerly and records enough structure to propagate gradients in one
//! reverse sweep. Tapes are rebuilt per batch — at the sentence sizes this
//! crate targets (n <= 100) the allocation cost is negligible and the code
//! stays simple.
//!
//! The tape also records a [`DiscreteTrace`] of every branchy decision made
//! during the forward pass (ReLU input signs, clamp activations, top-k
//! selections). The finite-difference checker compares traces between the
//! two perturbed evaluations and skips elements whose perturbation crossed a
//! non-differentiable point.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;

use crate::matrix::Matrix;
use crate::params::ParameterStore;
use crate::Result;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Record of the discrete decisions taken during a forward pass; two passes
/// with equal traces evaluated the same smooth branch of the loss.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DiscreteTrace {
    pub bits: Vec<bool>,
    pub indices: Vec<usize>,
}

enum Op<F> {
    Leaf,
    Matmul(Var, Var),
    /// `A · Bᵀ`.
    MatmulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    /// Broadcast-add a `1 x n` row to every row of an `m x n` matrix.
    AddRow(Var, Var),
    /// Scale row `i` of an `m x n` matrix by entry `i` of an `m x 1` column.
    MulCol(Var, Var),
    /// Multiply a whole matrix by a single entry of a `1 x k` vector.
    ScaleByEntry(Var, Var, usize),
    Scale(Var, F),
    AddScalar(Var, F),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    ClampMin(Var, F),
    RowSoftmax(Var, Option<Vec<bool>>),
    LogRowSoftmax(Var, Option<Vec<bool>>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
    L2NormalizeRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var, Vec<usize>),
    Gather(Var, Vec<(usize, usize)>),
    MeanAll(Var),
    SumAll(Var),
    /// Keep the top-k entries of each row and renormalize them to sum to 1;
    /// the kept index sets are fixed at forward time.
    RowTopK(Var, Vec<Vec<usize>>),
}

struct Node<F> {
    op: Op<F>,
    value: Matrix<F>,
    param: Option<String>,
}

const LAYER_NORM_EPS: f64 = 1e-5;
const L2_NORM_FLOOR: f64 = 1e-12;

/// Reverse-mode tape. All shape requirements are asserted; callers that
/// accept external configuration validate shapes first and surface
/// [`CoreError::Config`] instead.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    trace: DiscreteTrace,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            trace: DiscreteTrace::default(),
        }
    }

    fn push(&mut self, op: Op<F>, value: Matrix<F>) -> Var {
        self.nodes.push(Node {
            op,
            value,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar_value(&self, v: Var) -> F {
        debug_assert_eq!(self.shape(v), (1, 1));
        self.nodes[v.0].value.get(0, 0)
    }

    pub fn discrete_trace(&self) -> &DiscreteTrace {
        &self.trace
    }

    /// Record an externally made discrete selection (e.g. landmark indices)
    /// so trace comparison covers it.
    pub fn note_selection(&mut self, indices: &[usize]) {
        self.trace.indices.extend_from_slice(indices);
    }

    // ----- leaves -----

    pub fn constant(&mut self, value: Matrix<F>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn constant_f64(&mut self, value: &Matrix<f64>) -> Var {
        self.constant(Matrix::from_f64(value))
    }

    /// `1 x 1` constant.
    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Matrix::from_vec(1, 1, vec![crate::cast(v)]).expect("1x1"))
    }

    /// Leaf bound to a named parameter; gradients reaching it are exported
    /// to the store by [`Tape::backward_into`].
    pub fn param(&mut self, store: &ParameterStore<F>, path: &str) -> Result<Var> {
        let value = store.get(path)?.clone();
        let var = self.push(Op::Leaf, value);
        self.nodes[var.0].param = Some(String::from(path));
        Ok(var)
    }

    // ----- binary ops -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        assert_eq!(ka, kb, "matmul inner dimensions {ka} vs {kb}");
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            for k in 0..ka {
                let aik = self.nodes[a.0].value.get(i, k);
                if aik == F::zero() {
                    continue;
                }
                for j in 0..n {
                    let v = out.get(i, j) + aik * self.nodes[b.0].value.get(k, j);
                    out.set(i, j, v);
                }
            }
        }
        self.push(Op::Matmul(a, b), out)
    }

    /// `a · bᵀ` where `a` is `m x k` and `b` is `n x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = self.shape(a);
        let (n, kb) = self.shape(b);
        assert_eq!(ka, kb, "matmul_nt inner dimensions {ka} vs {kb}");
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                let mut acc = F::zero();
                for k in 0..ka {
                    acc = acc + self.nodes[a.0].value.get(i, k) * self.nodes[b.0].value.get(j, k);
                }
                out.set(i, j, acc);
            }
        }
        self.push(Op::MatmulNt(a, b), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = self.zip(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let out = self.zip(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), out)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "hadamard shape mismatch");
        let out = self.zip(a, b, |x, y| x * y);
        self.push(Op::Hadamard(a, b), out)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Matrix<F> {
        let (rows, cols) = self.shape(a);
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Matrix::from_vec(rows, cols, data).expect("zip shape")
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(self.shape(row), (1, n), "add_row expects a 1x{n} bias row");
        let mut out = self.nodes[x.0].value.clone();
        for i in 0..m {
            for j in 0..n {
                let v = out.get(i, j) + self.nodes[row.0].value.get(0, j);
                out.set(i, j, v);
            }
        }
        self.push(Op::AddRow(x, row), out)
    }

    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(self.shape(col), (m, 1), "mul_col expects an {m}x1 column");
        let mut out = self.nodes[x.0].value.clone();
        for i in 0..m {
            let c = self.nodes[col.0].value.get(i, 0);
            for j in 0..n {
                out.set(i, j, out.get(i, j) * c);
            }
        }
        self.push(Op::MulCol(x, col), out)
    }

    pub fn scale_by_entry(&mut self, x: Var, weights: Var, index: usize) -> Var {
        let (wr, wc) = self.shape(weights);
        assert_eq!(wr, 1, "scale_by_entry expects a 1xk weight vector");
        assert!(index < wc, "scale_by_entry index {index} out of {wc}");
        let s = self.nodes[weights.0].value.get(0, index);
        let out = self.nodes[x.0].value.map(|v| v * s);
        self.push(Op::ScaleByEntry(x, weights, index), out)
    }

    // ----- unary ops -----

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let out = self.nodes[x.0].value.map(|v| v * c);
        self.push(Op::Scale(x, c), out)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -F::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        let out = self.nodes[x.0].value.map(|v| v + c);
        self.push(Op::AddScalar(x, c), out)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let bits: Vec<bool> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| v > F::zero())
            .collect();
        self.trace.bits.extend(bits);
        let out = self.nodes[x.0].value.map(|v| v.max(F::zero()));
        self.push(Op::Relu(x), out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(|v| {
            let one = F::one();
            one / (one + (-v).exp())
        });
        self.push(Op::Sigmoid(x), out)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(|v| v.ln());
        self.push(Op::Ln(x), out)
    }

    pub fn clamp_min(&mut self, x: Var, floor: F) -> Var {
        let bits: Vec<bool> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| v > floor)
            .collect();
        self.trace.bits.extend(bits);
        let out = self.nodes[x.0].value.map(|v| v.max(floor));
        self.push(Op::ClampMin(x, floor), out)
    }

    /// Row-wise softmax; when `mask` is given, probabilities of invalid
    /// columns are exactly zero and the normalization runs over valid ones.
    pub fn row_softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Var {
        let out = self.softmax_values(x, mask, false);
        self.push(Op::RowSoftmax(x, mask.map(<[bool]>::to_vec)), out)
    }

    pub fn log_row_softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Var {
        let out = self.softmax_values(x, mask, true);
        self.push(Op::LogRowSoftmax(x, mask.map(<[bool]>::to_vec)), out)
    }

    fn softmax_values(&self, x: Var, mask: Option<&[bool]>, log: bool) -> Matrix<F> {
        let (m, n) = self.shape(x);
        if let Some(mask) = mask {
            assert_eq!(mask.len(), n, "softmax mask length");
            assert!(mask.iter().any(|&b| b), "softmax mask has no valid column");
        }
        let valid = |j: usize| mask.map_or(true, |m| m[j]);
        let v = &self.nodes[x.0].value;
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            let mut max = F::neg_infinity();
            for j in 0..n {
                if valid(j) && v.get(i, j) > max {
                    max = v.get(i, j);
                }
            }
            let mut total = F::zero();
            for j in 0..n {
                if valid(j) {
                    total = total + (v.get(i, j) - max).exp();
                }
            }
            for j in 0..n {
                if !valid(j) {
                    out.set(i, j, if log { F::neg_infinity() } else { F::zero() });
                } else if log {
                    out.set(i, j, v.get(i, j) - max - total.ln());
                } else {
                    out.set(i, j, (v.get(i, j) - max).exp() / total);
                }
            }
        }
        out
    }

    /// Per-row layer normalization with trainable gain/bias (`1 x d` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (m, d) = self.shape(x);
        assert_eq!(self.shape(gain), (1, d), "layer_norm gain shape");
        assert_eq!(self.shape(bias), (1, d), "layer_norm bias shape");
        let eps: F = crate::cast(LAYER_NORM_EPS);
        let mut out = Matrix::zeros(m, d);
        for i in 0..m {
            let (mean, var) = self.row_moments(x, i);
            let denom = (var + eps).sqrt();
            for j in 0..d {
                let xhat = (self.nodes[x.0].value.get(i, j) - mean) / denom;
                let y = self.nodes[gain.0].value.get(0, j) * xhat
                    + self.nodes[bias.0].value.get(0, j);
                out.set(i, j, y);
            }
        }
        self.push(Op::LayerNorm { x, gain, bias }, out)
    }

    fn row_moments(&self, x: Var, row: usize) -> (F, F) {
        let (_, d) = self.shape(x);
        let df: F = crate::cast(d as f64);
        let v = &self.nodes[x.0].value;
        let mut mean = F::zero();
        for j in 0..d {
            mean = mean + v.get(row, j);
        }
        mean = mean / df;
        let mut var = F::zero();
        for j in 0..d {
            let c = v.get(row, j) - mean;
            var = var + c * c;
        }
        (mean, var / df)
    }

    /// Scale each row to unit Euclidean norm; rows with norm below the
    /// floor stay zero (and receive zero gradient).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (m, d) = self.shape(x);
        let floor: F = crate::cast(L2_NORM_FLOOR);
        let mut out = Matrix::zeros(m, d);
        for i in 0..m {
            let norm = self.row_norm(x, i);
            if norm > floor {
                for j in 0..d {
                    out.set(i, j, self.nodes[x.0].value.get(i, j) / norm);
                }
            }
        }
        self.push(Op::L2NormalizeRows(x), out)
    }

    fn row_norm(&self, x: Var, row: usize) -> F {
        let (_, d) = self.shape(x);
        let v = &self.nodes[x.0].value;
        let mut acc = F::zero();
        for j in 0..d {
            acc = acc + v.get(row, j) * v.get(row, j);
        }
        acc.sqrt()
    }

    // ----- structural ops -----

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(r, rows, "concat_cols row mismatch");
            for i in 0..r {
                for j in 0..c {
                    out.set(i, offset + j, self.nodes[p.0].value.get(i, j));
                }
            }
            offset += c;
        }
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let total: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut out = Matrix::zeros(total, cols);
        let mut offset = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(c, cols, "concat_rows column mismatch");
            for i in 0..r {
                for j in 0..c {
                    out.set(offset + i, j, self.nodes[p.0].value.get(i, j));
                }
            }
            offset += r;
        }
        self.push(Op::ConcatRows(parts.to_vec()), out)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape(x);
        assert!(start + len <= n, "slice_cols {start}+{len} out of {n}");
        let mut out = Matrix::zeros(m, len);
        for i in 0..m {
            for j in 0..len {
                out.set(i, j, self.nodes[x.0].value.get(i, start + j));
            }
        }
        self.push(Op::SliceCols(x, start, len), out)
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let (m, n) = self.shape(x);
        assert!(rows.iter().all(|&r| r < m), "gather_rows index out of {m}");
        let mut out = Matrix::zeros(rows.len(), n);
        for (t, &r) in rows.iter().enumerate() {
            for j in 0..n {
                out.set(t, j, self.nodes[x.0].value.get(r, j));
            }
        }
        self.push(Op::GatherRows(x, rows.to_vec()), out)
    }

    /// Mean of the selected rows as a `1 x d` vector.
    pub fn mean_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let (m, n) = self.shape(x);
        assert!(!rows.is_empty(), "mean_rows needs at least one row");
        assert!(rows.iter().all(|&r| r < m), "mean_rows index out of {m}");
        let k: F = crate::cast(rows.len() as f64);
        let mut out = Matrix::zeros(1, n);
        for &r in rows {
            for j in 0..n {
                out.set(0, j, out.get(0, j) + self.nodes[x.0].value.get(r, j) / k);
            }
        }
        self.push(Op::MeanRows(x, rows.to_vec()), out)
    }

    /// Gather arbitrary `(row, col)` entries into a `1 x k` vector.
    pub fn gather(&mut self, x: Var, entries: &[(usize, usize)]) -> Var {
        let (m, n) = self.shape(x);
        assert!(!entries.is_empty(), "gather needs at least one entry");
        assert!(
            entries.iter().all(|&(r, c)| r < m && c < n),
            "gather entry out of {m}x{n}"
        );
        let mut out = Matrix::zeros(1, entries.len());
        for (t, &(r, c)) in entries.iter().enumerate() {
            out.set(0, t, self.nodes[x.0].value.get(r, c));
        }
        self.push(Op::Gather(x, entries.to_vec()), out)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let len: F = crate::cast(self.nodes[x.0].value.len() as f64);
        let mut acc = F::zero();
        for &v in self.nodes[x.0].value.data() {
            acc = acc + v;
        }
        let out = Matrix::from_vec(1, 1, vec![acc / len]).expect("1x1");
        self.push(Op::MeanAll(x), out)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = F::zero();
        for &v in self.nodes[x.0].value.data() {
            acc = acc + v;
        }
        let out = Matrix::from_vec(1, 1, vec![acc]).expect("1x1");
        self.push(Op::SumAll(x), out)
    }

    /// Sum a non-empty list of same-shape vars.
    pub fn add_n(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    /// Keep the `k` largest entries of each row (ties resolved toward lower
    /// column indices) and renormalize the kept entries to sum to 1.
    pub fn row_topk_renormalize(&mut self, x: Var, k: usize) -> Var {
        let (m, n) = self.shape(x);
        assert!(k >= 1 && k <= n, "row_topk k={k} out of 1..={n}");
        let mut kept_sets = Vec::with_capacity(m);
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            let v = &self.nodes[x.0].value;
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                v.get(i, b)
                    .partial_cmp(&v.get(i, a))
                    .expect("finite adjacency entries")
                    .then(a.cmp(&b))
            });
            let mut kept: Vec<usize> = order.into_iter().take(k).collect();
            kept.sort_unstable();
            let mut total = F::zero();
            for &j in &kept {
                total = total + v.get(i, j);
            }
            for &j in &kept {
                out.set(i, j, v.get(i, j) / total);
            }
            kept_sets.push(kept);
        }
        for kept in &kept_sets {
            self.trace.indices.extend_from_slice(kept);
        }
        self.push(Op::RowTopK(x, kept_sets), out)
    }

    // ----- backward -----

    /// Gradients of a `1 x 1` scalar root with respect to every node that
    /// (transitively) feeds it. Leaves keep their gradients; interior
    /// gradients are consumed during the sweep.
    pub fn backward(&self, root: Var) -> Vec<Option<Matrix<F>>> {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Matrix<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::from_vec(1, 1, vec![F::one()]).expect("1x1"));
        for idx in (0..self.nodes.len()).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }
        grads
    }

    /// Run [`Tape::backward`] and add every parameter leaf's gradient into
    /// the store's accumulators.
    pub fn backward_into(&self, root: Var, store: &mut ParameterStore<F>) -> Result<()> {
        let grads = self.backward(root);
        for (node, grad) in self.nodes.iter().zip(grads) {
            if let (Some(path), Some(g)) = (&node.param, grad) {
                store.accumulate_grad(path, &g)?;
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Matrix<F>>], target: Var, update: &Matrix<F>) {
        let slot = grads[target.0]
            .get_or_insert_with(|| Matrix::zeros(update.rows(), update.cols()));
        for (dst, src) in slot.data_mut().iter_mut().zip(update.data()) {
            *dst = *dst + *src;
        }
    }

    fn propagate(&self, idx: usize, g: &Matrix<F>, grads: &mut [Option<Matrix<F>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = self.shape(*a);
                let (_, n) = self.shape(*b);
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let mut da = Matrix::zeros(m, k);
                let mut db = Matrix::zeros(k, n);
                for i in 0..m {
                    for j in 0..n {
                        let gij = g.get(i, j);
                        if gij == F::zero() {
                            continue;
                        }
                        for t in 0..k {
                            da.set(i, t, da.get(i, t) + gij * vb.get(t, j));
                            db.set(t, j, db.get(t, j) + gij * va.get(i, t));
                        }
                    }
                }
                self.acc(grads, *a, &da);
                self.acc(grads, *b, &db);
            }
            Op::MatmulNt(a, b) => {
                let (m, k) = self.shape(*a);
                let (n, _) = self.shape(*b);
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let mut da = Matrix::zeros(m, k);
                let mut db = Matrix::zeros(n, k);
                for i in 0..m {
                    for j in 0..n {
                        let gij = g.get(i, j);
                        if gij == F::zero() {
                            continue;
                        }
                        for t in 0..k {
                            da.set(i, t, da.get(i, t) + gij * vb.get(j, t));
                            db.set(j, t, db.get(j, t) + gij * va.get(i, t));
                        }
                    }
                }
                self.acc(grads, *a, &da);
                self.acc(grads, *b, &db);
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g);
                self.acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g);
                let neg = g.map(|v| -v);
                self.acc(grads, *b, &neg);
            }
            Op::Hadamard(a, b) => {
                let da = self.nodes[b.0]
                    .value
                    .clone()
                    .zip_with(g, |bv, gv| bv * gv);
                let db = self.nodes[a.0]
                    .value
                    .clone()
                    .zip_with(g, |av, gv| av * gv);
                self.acc(grads, *a, &da);
                self.acc(grads, *b, &db);
            }
            Op::AddRow(x, row) => {
                self.acc(grads, *x, g);
                let (m, n) = g.shape();
                let mut dr = Matrix::zeros(1, n);
                for i in 0..m {
                    for j in 0..n {
                        dr.set(0, j, dr.get(0, j) + g.get(i, j));
                    }
                }
                self.acc(grads, *row, &dr);
            }
            Op::MulCol(x, col) => {
                let (m, n) = g.shape();
                let vx = &self.nodes[x.0].value;
                let vc = &self.nodes[col.0].value;
                let mut dx = Matrix::zeros(m, n);
                let mut dc = Matrix::zeros(m, 1);
                for i in 0..m {
                    for j in 0..n {
                        dx.set(i, j, g.get(i, j) * vc.get(i, 0));
                        dc.set(i, 0, dc.get(i, 0) + g.get(i, j) * vx.get(i, j));
                    }
                }
                self.acc(grads, *x, &dx);
                self.acc(grads, *col, &dc);
            }
            Op::ScaleByEntry(x, weights, index) => {
                let s = self.nodes[weights.0].value.get(0, *index);
                let dx = g.map(|v| v * s);
                self.acc(grads, *x, &dx);
                let mut acc = F::zero();
                for (gv, xv) in g.data().iter().zip(self.nodes[x.0].value.data()) {
                    acc = acc + *gv * *xv;
                }
                let (_, wc) = self.shape(*weights);
                let mut dw = Matrix::zeros(1, wc);
                dw.set(0, *index, acc);
                self.acc(grads, *weights, &dw);
            }
            Op::Scale(x, c) => {
                let dx = g.map(|v| v * *c);
                self.acc(grads, *x, &dx);
            }
            Op::AddScalar(x, _) => self.acc(grads, *x, g),
            Op::Relu(x) => {
                let dx = self.nodes[x.0]
                    .value
                    .clone()
                    .zip_with(g, |xv, gv| if xv > F::zero() { gv } else { F::zero() });
                self.acc(grads, *x, &dx);
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[idx].value;
                let dx = y.clone().zip_with(g, |yv, gv| gv * yv * (F::one() - yv));
                self.acc(grads, *x, &dx);
            }
            Op::Ln(x) => {
                let dx = self.nodes[x.0].value.clone().zip_with(g, |xv, gv| gv / xv);
                self.acc(grads, *x, &dx);
            }
            Op::ClampMin(x, floor) => {
                let dx = self.nodes[x.0]
                    .value
                    .clone()
                    .zip_with(g, |xv, gv| if xv > *floor { gv } else { F::zero() });
                self.acc(grads, *x, &dx);
            }
            Op::RowSoftmax(x, mask) => {
                let s = &self.nodes[idx].value;
                let (m, n) = s.shape();
                let valid = |j: usize| mask.as_ref().map_or(true, |mk| mk[j]);
                let mut dx = Matrix::zeros(m, n);
                for i in 0..m {
                    let mut dot = F::zero();
                    for j in 0..n {
                        if valid(j) {
                            dot = dot + g.get(i, j) * s.get(i, j);
                        }
                    }
                    for j in 0..n {
                        if valid(j) {
                            dx.set(i, j, s.get(i, j) * (g.get(i, j) - dot));
                        }
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::LogRowSoftmax(x, mask) => {
                let y = &self.nodes[idx].value;
                let (m, n) = y.shape();
                let valid = |j: usize| mask.as_ref().map_or(true, |mk| mk[j]);
                let mut dx = Matrix::zeros(m, n);
                for i in 0..m {
                    let mut total = F::zero();
                    for j in 0..n {
                        if valid(j) {
                            total = total + g.get(i, j);
                        }
                    }
                    for j in 0..n {
                        if valid(j) {
                            dx.set(i, j, g.get(i, j) - y.get(i, j).exp() * total);
                        }
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let (m, d) = self.shape(*x);
                let eps: F = crate::cast(LAYER_NORM_EPS);
                let df: F = crate::cast(d as f64);
                let vx = &self.nodes[x.0].value;
                let vg = &self.nodes[gain.0].value;
                let mut dx = Matrix::zeros(m, d);
                let mut dgain = Matrix::zeros(1, d);
                let mut dbias = Matrix::zeros(1, d);
                for i in 0..m {
                    let (mean, var) = self.row_moments(*x, i);
                    let denom = (var + eps).sqrt();
                    let mut mean_dxhat = F::zero();
                    let mut mean_dxhat_xhat = F::zero();
                    let mut xhat = vec![F::zero(); d];
                    let mut dxhat = vec![F::zero(); d];
                    for j in 0..d {
                        xhat[j] = (vx.get(i, j) - mean) / denom;
                        dxhat[j] = g.get(i, j) * vg.get(0, j);
                        mean_dxhat = mean_dxhat + dxhat[j];
                        mean_dxhat_xhat = mean_dxhat_xhat + dxhat[j] * xhat[j];
                        dgain.set(0, j, dgain.get(0, j) + g.get(i, j) * xhat[j]);
                        dbias.set(0, j, dbias.get(0, j) + g.get(i, j));
                    }
                    mean_dxhat = mean_dxhat / df;
                    mean_dxhat_xhat = mean_dxhat_xhat / df;
                    for j in 0..d {
                        let v = (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat) / denom;
                        dx.set(i, j, v);
                    }
                }
                self.acc(grads, *x, &dx);
                self.acc(grads, *gain, &dgain);
                self.acc(grads, *bias, &dbias);
            }
            Op::L2NormalizeRows(x) => {
                let (m, d) = self.shape(*x);
                let floor: F = crate::cast(L2_NORM_FLOOR);
                let y = &self.nodes[idx].value;
                let mut dx = Matrix::zeros(m, d);
                for i in 0..m {
                    let norm = self.row_norm(*x, i);
                    if norm <= floor {
                        continue;
                    }
                    let mut dot = F::zero();
                    for j in 0..d {
                        dot = dot + y.get(i, j) * g.get(i, j);
                    }
                    for j in 0..d {
                        dx.set(i, j, (g.get(i, j) - y.get(i, j) * dot) / norm);
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let mut dp = Matrix::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            dp.set(i, j, g.get(i, offset + j));
                        }
                    }
                    self.acc(grads, p, &dp);
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let mut dp = Matrix::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            dp.set(i, j, g.get(offset + i, j));
                        }
                    }
                    self.acc(grads, p, &dp);
                    offset += r;
                }
            }
            Op::SliceCols(x, start, len) => {
                let (m, n) = self.shape(*x);
                let mut dx = Matrix::zeros(m, n);
                for i in 0..m {
                    for j in 0..*len {
                        dx.set(i, start + j, g.get(i, j));
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::GatherRows(x, rows) => {
                let (m, n) = self.shape(*x);
                let mut dx = Matrix::zeros(m, n);
                for (t, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        dx.set(r, j, dx.get(r, j) + g.get(t, j));
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::MeanRows(x, rows) => {
                let (m, n) = self.shape(*x);
                let k: F = crate::cast(rows.len() as f64);
                let mut dx = Matrix::zeros(m, n);
                for &r in rows {
                    for j in 0..n {
                        dx.set(r, j, dx.get(r, j) + g.get(0, j) / k);
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::Gather(x, entries) => {
                let (m, n) = self.shape(*x);
                let mut dx = Matrix::zeros(m, n);
                for (t, &(r, c)) in entries.iter().enumerate() {
                    dx.set(r, c, dx.get(r, c) + g.get(0, t));
                }
                self.acc(grads, *x, &dx);
            }
            Op::MeanAll(x) => {
                let (m, n) = self.shape(*x);
                let len: F = crate::cast((m * n) as f64);
                let gv = g.get(0, 0) / len;
                let dx = Matrix::from_fn(m, n, |_, _| gv);
                self.acc(grads, *x, &dx);
            }
            Op::SumAll(x) => {
                let (m, n) = self.shape(*x);
                let gv = g.get(0, 0);
                let dx = Matrix::from_fn(m, n, |_, _| gv);
                self.acc(grads, *x, &dx);
            }
            Op::RowTopK(x, kept_sets) => {
                let (m, n) = self.shape(*x);
                let vx = &self.nodes[x.0].value;
                let y = &self.nodes[idx].value;
                let mut dx = Matrix::zeros(m, n);
                for (i, kept) in kept_sets.iter().enumerate() {
                    let mut total = F::zero();
                    let mut dot = F::zero();
                    for &j in kept {
                        total = total + vx.get(i, j);
                        dot = dot + g.get(i, j) * y.get(i, j);
                    }
                    for &j in kept {
                        dx.set(i, j, (g.get(i, j) - dot) / total);
                    }
                }
                self.acc(grads, *x, &dx);
            }
        }
    }
}

impl<F: Float> Matrix<F> {
    fn zip_with(mut self, other: &Matrix<F>, f: impl Fn(F, F) -> F) -> Matrix<F> {
        for (a, &b) in self.data_mut().iter_mut().zip(other.data()) {
            *a = f(*a, b);
        }
        self
    }
}
