//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Every operation appends a node holding its value; [`Tape::backward`] walks
//! the tape in reverse and returns the gradient of a scalar node with respect
//! to every node that depends on a leaf.

use crate::tensor::{matmul, matmul_nt, matmul_tn, sigmoid, softplus, Matrix};

/// Probabilities are clamped to this before taking the log in the loss.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Const,
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Recip(Var),
    SoftmaxRows(Var),
    CausalSoftmax(Var),
    RowNormAbs(Var),
    LayerNorm(Var, f64),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    StackRows(Vec<Var>),
    ShiftRows(Var, usize),
    TileRows(Var),
    BlockMatMul(Var, Var),
    RowPool(Var, Vec<f64>, usize),
    WeightedCe {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        denom: f64,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Const,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_nt(self.value(a), self.value(b));
        self.push(v, Op::MatMulNt(a, b), &[a, b])
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        Matrix::from_vec(
            x.rows,
            x.cols,
            x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    fn broadcast_row(&self, a: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (x, r) = (self.value(a), self.value(row));
        assert!(
            r.rows == 1 && r.cols == x.cols,
            "row broadcast shape mismatch"
        );
        let mut out = x.clone();
        for i in 0..x.rows {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&r.data) {
                *o = f(*o, b);
            }
        }
        out
    }

    /// Adds a `[1, C]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.broadcast_row(a, row, |x, b| x + b);
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.broadcast_row(a, row, |x, b| x * b);
        self.push(v, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    /// Multiplies `a` by the `[1, 1]` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).shape(), (1, 1));
        let k = self.value(s).data[0];
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::ScaleBy(a, s), &[a, s])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a), &[a])
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(v, Op::Recip(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for i in 0..x.rows {
            softmax_in_place(out.row_mut(i));
        }
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    /// Row-wise softmax of a square score matrix restricted to `j <= i`.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows, x.cols, "causal softmax needs a square matrix");
        let mut out = Matrix::zeros(x.rows, x.cols);
        for i in 0..x.rows {
            let row = &mut out.row_mut(i)[..=i];
            row.copy_from_slice(&x.row(i)[..=i]);
            softmax_in_place(row);
        }
        self.push(out, Op::CausalSoftmax(a), &[a])
    }

    /// Divides each row by the sum of its absolute values; all-zero rows stay zero.
    pub fn row_norm_abs(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for i in 0..x.rows {
            let z: f64 = x.row(i).iter().map(|v| v.abs()).sum();
            if z > 0.0 {
                out.row_mut(i).iter_mut().for_each(|v| *v /= z);
            }
        }
        self.push(out, Op::RowNormAbs(a), &[a])
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for i in 0..x.rows {
            let row = out.row_mut(i);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        self.push(out, Op::LayerNorm(a, eps), &[a])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.rows, y.rows, "concat row mismatch");
        let mut out = Matrix::zeros(x.rows, x.cols + y.cols);
        for i in 0..x.rows {
            let row = out.row_mut(i);
            row[..x.cols].copy_from_slice(x.row(i));
            row[x.cols..].copy_from_slice(y.row(i));
        }
        self.push(out, Op::ConcatCols(a, b), &[a, b])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols);
        let mut out = Matrix::zeros(x.rows, len);
        for i in 0..x.rows {
            out.row_mut(i)
                .copy_from_slice(&x.row(i)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows);
        let out = Matrix::from_vec(
            len,
            x.cols,
            x.data[start * x.cols..(start + len) * x.cols].to_vec(),
        );
        self.push(out, Op::SliceRows(a, start), &[a])
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "stack column mismatch");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(
            Matrix::from_vec(rows, cols, data),
            Op::StackRows(parts.to_vec()),
            parts,
        )
    }

    /// `out[t] = a[t - shift]`, zero for `t < shift`.
    pub fn shift_rows(&mut self, a: Var, shift: usize) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(x.rows, x.cols);
        for t in shift..x.rows {
            out.row_mut(t).copy_from_slice(x.row(t - shift));
        }
        self.push(out, Op::ShiftRows(a, shift), &[a])
    }

    /// Stacks `times` copies of `a` vertically.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Var {
        let x = self.value(a);
        let mut data = Vec::with_capacity(x.len() * times);
        for _ in 0..times {
            data.extend_from_slice(&x.data);
        }
        let out = Matrix::from_vec(x.rows * times, x.cols, data);
        self.push(out, Op::TileRows(a), &[a])
    }

    /// Block-diagonal product: `a` is `[T*N, N]`, `b` is `[T*N, F]`, and block
    /// `t` of the output is `a_t · b_t`.
    pub fn block_matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let n = x.cols;
        assert!(
            n > 0 && x.rows % n == 0 && x.rows == y.rows,
            "block matmul shapes"
        );
        let f = y.cols;
        let mut out = Matrix::zeros(y.rows, f);
        for blk in 0..x.rows / n {
            let base = blk * n;
            for i in 0..n {
                let arow = x.row(base + i);
                let orow = &mut out.data[(base + i) * f..(base + i + 1) * f];
                for (k, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &y.data[(base + k) * f..(base + k + 1) * f];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        self.push(out, Op::BlockMatMul(a, b), &[a, b])
    }

    /// Weighted sum of each group of `group` consecutive rows:
    /// `out[t] = Σ_i weights[t*group + i] * a[t*group + i]`.
    pub fn row_pool(&mut self, a: Var, weights: Vec<f64>, group: usize) -> Var {
        let x = self.value(a);
        assert!(x.rows.is_multiple_of(group) && weights.len() == x.rows);
        let groups = x.rows / group;
        let mut out = Matrix::zeros(groups, x.cols);
        for t in 0..groups {
            for i in 0..group {
                let w = weights[t * group + i];
                if w == 0.0 {
                    continue;
                }
                let src = x.row(t * group + i);
                for (o, &s) in out.row_mut(t).iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        self.push(out, Op::RowPool(a, weights, group), &[a])
    }

    /// `Σ_t weights[t] * -ln(max(softmax(logits[t])[targets[t]], PROB_FLOOR)) / denom`
    pub fn weighted_ce(
        &mut self,
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        denom: f64,
    ) -> Var {
        let x = self.value(logits);
        assert!(x.rows == targets.len() && x.rows == weights.len());
        let mut total = 0.0;
        for (t, (&y, &w)) in targets.iter().zip(&weights).enumerate() {
            total += w * nll(x.row(t), y);
        }
        let out = Matrix::scalar(total / denom);
        self.push(
            out,
            Op::WeightedCe {
                logits,
                targets,
                weights,
                denom,
            },
            &[logits],
        )
    }

    /// Gradients of the `[1,1]` node `root` with respect to every tracked node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.value(root).shape(),
            (1, 1),
            "backward needs a scalar root"
        );
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.tracked {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Const | Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = matmul_nt(g, self.value(*b));
                let db = matmul_tn(self.value(*a), g);
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::MatMulNt(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                let da = matmul(g, self.value(*b));
                let db = matmul_tn(g, self.value(*a));
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let da = zip_with(g, self.value(*b), |x, y| x * y);
                let db = zip_with(g, self.value(*a), |x, y| x * y);
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *row, column_sums(g));
            }
            Op::MulRow(a, row) => {
                let x = self.value(*a);
                let r = self.value(*row);
                let mut da = g.clone();
                for i in 0..da.rows {
                    for (d, &rv) in da.row_mut(i).iter_mut().zip(&r.data) {
                        *d *= rv;
                    }
                }
                let dr = column_sums(&zip_with(g, x, |p, q| p * q));
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *row, dr);
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::ScaleBy(a, s) => {
                let k = self.value(*s).data[0];
                let x = self.value(*a);
                let ds: f64 = g.data.iter().zip(&x.data).map(|(p, q)| p * q).sum();
                self.accumulate(grads, *a, g.map(|v| v * k));
                self.accumulate(grads, *s, Matrix::scalar(ds));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let x = self.value(*a);
                self.accumulate(
                    grads,
                    *a,
                    zip_with(g, x, |d, v| if v > 0.0 { d } else { 0.0 }),
                );
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, zip_with(g, out, |d, y| d * y * (1.0 - y)));
            }
            Op::Tanh(a) => {
                self.accumulate(grads, *a, zip_with(g, out, |d, y| d * (1.0 - y * y)));
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, zip_with(g, x, |d, v| d * sigmoid(v)));
            }
            Op::Recip(a) => {
                self.accumulate(grads, *a, zip_with(g, out, |d, y| -d * y * y));
            }
            Op::SoftmaxRows(a) | Op::CausalSoftmax(a) => {
                let mut da = Matrix::zeros(out.rows, out.cols);
                for i in 0..out.rows {
                    let y = out.row(i);
                    let gi = g.row(i);
                    let dot: f64 = y.iter().zip(gi).map(|(p, q)| p * q).sum();
                    for ((d, &yv), &gv) in da.row_mut(i).iter_mut().zip(y).zip(gi) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::RowNormAbs(a) => {
                let x = self.value(*a);
                let mut da = Matrix::zeros(x.rows, x.cols);
                for i in 0..x.rows {
                    let row = x.row(i);
                    let z: f64 = row.iter().map(|v| v.abs()).sum();
                    if z == 0.0 {
                        continue;
                    }
                    let gi = g.row(i);
                    let gs: f64 = gi.iter().zip(row).map(|(p, q)| p * q).sum::<f64>() / (z * z);
                    for ((d, &xv), &gv) in da.row_mut(i).iter_mut().zip(row).zip(gi) {
                        let sign = if xv > 0.0 {
                            1.0
                        } else if xv < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *d = gv / z - sign * gs;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::LayerNorm(a, eps) => {
                let x = self.value(*a);
                let mut da = Matrix::zeros(x.rows, x.cols);
                let n = x.cols as f64;
                for i in 0..x.rows {
                    let row = x.row(i);
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let y = out.row(i);
                    let gi = g.row(i);
                    let gmean = gi.iter().sum::<f64>() / n;
                    let gy = gi.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / n;
                    for ((d, &gv), &yv) in da.row_mut(i).iter_mut().zip(gi).zip(y) {
                        *d = inv * (gv - gmean - yv * gy);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols;
                let cb = self.value(*b).cols;
                let mut da = Matrix::zeros(g.rows, ca);
                let mut db = Matrix::zeros(g.rows, cb);
                for i in 0..g.rows {
                    da.row_mut(i).copy_from_slice(&g.row(i)[..ca]);
                    db.row_mut(i).copy_from_slice(&g.row(i)[ca..]);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let mut da = Matrix::zeros(x.rows, x.cols);
                for i in 0..x.rows {
                    da.row_mut(i)[*start..*start + g.cols].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, da);
            }
            Op::SliceRows(a, start) => {
                let x = self.value(*a);
                let mut da = Matrix::zeros(x.rows, x.cols);
                da.data[start * x.cols..(start + g.rows) * x.cols].copy_from_slice(&g.data);
                self.accumulate(grads, *a, da);
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let m = self.value(*p);
                    let len = m.len();
                    let part =
                        Matrix::from_vec(m.rows, m.cols, g.data[offset..offset + len].to_vec());
                    offset += len;
                    self.accumulate(grads, *p, part);
                }
            }
            Op::ShiftRows(a, shift) => {
                let mut da = Matrix::zeros(g.rows, g.cols);
                for t in *shift..g.rows {
                    da.row_mut(t - shift).copy_from_slice(g.row(t));
                }
                self.accumulate(grads, *a, da);
            }
            Op::TileRows(a) => {
                let x = self.value(*a);
                let mut da = Matrix::zeros(x.rows, x.cols);
                for chunk in g.data.chunks_exact(x.len()) {
                    for (d, &v) in da.data.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::BlockMatMul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let n = x.cols;
                let f = y.cols;
                let mut da = Matrix::zeros(x.rows, n);
                let mut db = Matrix::zeros(y.rows, f);
                for blk in 0..x.rows / n {
                    let base = blk * n;
                    for i in 0..n {
                        let gi = &g.data[(base + i) * f..(base + i + 1) * f];
                        for k in 0..n {
                            let yk = &y.data[(base + k) * f..(base + k + 1) * f];
                            da.data[(base + i) * n + k] =
                                gi.iter().zip(yk).map(|(p, q)| p * q).sum();
                            let av = x.data[(base + i) * n + k];
                            if av != 0.0 {
                                let dbk = &mut db.data[(base + k) * f..(base + k + 1) * f];
                                for (d, &gv) in dbk.iter_mut().zip(gi) {
                                    *d += av * gv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::RowPool(a, weights, group) => {
                let x = self.value(*a);
                let mut da = Matrix::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    let w = weights[r];
                    if w == 0.0 {
                        continue;
                    }
                    for (d, &gv) in da.row_mut(r).iter_mut().zip(g.row(r / group)) {
                        *d = w * gv;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::WeightedCe {
                logits,
                targets,
                weights,
                denom,
            } => {
                let x = self.value(*logits);
                let scale = g.data[0] / denom;
                let mut da = Matrix::zeros(x.rows, x.cols);
                for (t, (&y, &w)) in targets.iter().zip(weights).enumerate() {
                    let mut p = x.row(t).to_vec();
                    softmax_in_place(&mut p);
                    if p[y] <= PROB_FLOOR {
                        continue;
                    }
                    for (c, (d, &pc)) in da.row_mut(t).iter_mut().zip(&p).enumerate() {
                        let onehot = if c == y { 1.0 } else { 0.0 };
                        *d = scale * w * (pc - onehot);
                    }
                }
                self.accumulate(grads, *logits, da);
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `v`, or zeros shaped like `like` when `v` does not reach the root.
    pub fn get_or_zeros(&self, v: Var, like: &Matrix) -> Matrix {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Matrix::zeros(like.rows, like.cols))
    }

    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

fn zip_with(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    Matrix::from_vec(
        a.rows,
        a.cols,
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols);
    for i in 0..m.rows {
        for (o, &v) in out.data.iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `-ln(max(softmax(row)[y], PROB_FLOOR))`, computed in log space.
fn nll(row: &[f64], y: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let log_p = row[y] - lse;
    if log_p.exp() <= PROB_FLOOR {
        -PROB_FLOOR.ln()
    } else {
        -log_p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    /// Builds `f(inputs)` reduced to a scalar by a fixed random projection and
    /// compares analytic gradients with central differences.
    fn check(inputs: Vec<Matrix>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let build = |vals: &[Matrix], proj: Option<&Matrix>| -> (Tape, Vec<Var>, Var, Matrix) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|m| tape.leaf(m.clone())).collect();
            let out = f(&mut tape, &vars);
            let shape = tape.value(out).shape();
            let proj = proj
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1));
            (tape, vars, out, proj)
        };
        let (_, _, _, shape_probe) = build(&inputs, None);
        let proj = rand_matrix(&mut rng, shape_probe.rows, shape_probe.cols);
        let loss = |vals: &[Matrix]| -> f64 {
            let (tape, _, out, _) = build(vals, Some(&proj));
            tape.value(out)
                .data
                .iter()
                .zip(&proj.data)
                .map(|(a, b)| a * b)
                .sum()
        };
        let (mut tape, vars, out, _) = build(&inputs, Some(&proj));
        let p = tape.constant(proj.clone());
        let prod = tape.mul(out, p);
        let ones = tape.constant(Matrix::filled(proj.cols, 1, 1.0));
        let s = tape.matmul(prod, ones);
        let ones_r = tape.constant(Matrix::filled(1, proj.rows, 1.0));
        let root = tape.matmul(ones_r, s);
        let grads = tape.backward(root);
        let h = 1e-6;
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.get_or_zeros(*v, &inputs[k]);
            for e in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                plus[k].data[e] += h;
                let mut minus = inputs.clone();
                minus[k].data[e] -= h;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let a = analytic.data[e];
                let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
                assert!(
                    err < 1e-6,
                    "input {k} elem {e}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn grad_matmul_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_matrix(&mut rng, 3, 4);
        let b = rand_matrix(&mut rng, 4, 2);
        let c = rand_matrix(&mut rng, 5, 4);
        check(vec![a.clone(), b], |t, v| t.matmul(v[0], v[1]));
        check(vec![a, c], |t, v| t.matmul_nt(v[0], v[1]));
    }

    #[test]
    fn grad_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_matrix(&mut rng, 3, 4);
        let b = rand_matrix(&mut rng, 3, 4);
        let r = rand_matrix(&mut rng, 1, 4);
        let s = Matrix::scalar(0.7);
        check(vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
        check(vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
        check(vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
        check(vec![a.clone(), r.clone()], |t, v| t.add_row(v[0], v[1]));
        check(vec![a.clone(), r], |t, v| t.mul_row(v[0], v[1]));
        check(vec![a.clone(), s], |t, v| t.scale_by(v[0], v[1]));
        check(vec![a.clone()], |t, v| t.scale(v[0], -1.7));
        check(vec![a.clone()], |t, v| t.add_scalar(v[0], 2.5));
        check(vec![a.clone()], |t, v| t.relu(v[0]));
        check(vec![a.clone()], |t, v| t.sigmoid(v[0]));
        check(vec![a.clone()], |t, v| t.tanh(v[0]));
        check(vec![a.clone()], |t, v| t.softplus(v[0]));
        check(vec![a.map(|x| x + 3.0)], |t, v| t.recip(v[0]));
    }

    #[test]
    fn grad_row_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_matrix(&mut rng, 4, 5);
        let sq = rand_matrix(&mut rng, 4, 4);
        check(vec![a.clone()], |t, v| t.softmax_rows(v[0]));
        check(vec![sq.clone()], |t, v| t.causal_softmax(v[0]));
        check(vec![a.clone()], |t, v| t.row_norm_abs(v[0]));
        check(vec![a.clone()], |t, v| t.layer_norm(v[0], 1e-5));
    }

    #[test]
    fn grad_structural() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_matrix(&mut rng, 4, 3);
        let b = rand_matrix(&mut rng, 4, 2);
        check(vec![a.clone(), b.clone()], |t, v| t.concat_cols(v[0], v[1]));
        check(vec![a.clone()], |t, v| t.slice_cols(v[0], 1, 2));
        check(vec![a.clone()], |t, v| t.slice_rows(v[0], 1, 2));
        check(vec![a.clone(), a.clone()], |t, v| {
            t.stack_rows(&[v[0], v[1], v[0]])
        });
        check(vec![a.clone()], |t, v| t.shift_rows(v[0], 2));
        check(vec![a.clone()], |t, v| t.tile_rows(v[0], 3));
        let blocks = rand_matrix(&mut rng, 6, 3);
        let feats = rand_matrix(&mut rng, 6, 4);
        check(vec![blocks, feats.clone()], |t, v| {
            t.block_matmul(v[0], v[1])
        });
        let w = vec![0.5, 0.5, 0.0, 1.0, 0.25, 0.75];
        check(vec![feats], move |t, v| t.row_pool(v[0], w.clone(), 3));
    }

    #[test]
    fn grad_weighted_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = rand_matrix(&mut rng, 4, 2);
        check(vec![logits], |t, v| {
            t.weighted_ce(v[0], vec![1, 0, 1, 1], vec![2.0, 1.0, 1.5, 1.0], 4.0)
        });
    }

    #[test]
    fn ce_clamps_tiny_probabilities() {
        let mut tape = Tape::new();
        let l = tape.leaf(Matrix::from_vec(1, 2, vec![40.0, -40.0]));
        let loss = tape.weighted_ce(l, vec![1], vec![1.0], 1.0);
        assert!((tape.value(loss).data[0] + PROB_FLOOR.ln()).abs() < 1e-12);
        let g = tape.backward(loss);
        assert!(g
            .get_or_zeros(l, tape.value(l))
            .data
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Matrix::scalar(2.0));
        let x = tape.leaf(Matrix::scalar(3.0));
        let y = tape.mul(c, x);
        let g = tape.backward(y);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data[0], 2.0);
    }
}
