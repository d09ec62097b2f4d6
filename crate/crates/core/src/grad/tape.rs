use super::matrix::{masked_softmax_rows, Matrix, Real};
use super::GradError;

/// Handle to a node recorded on a [`Tape`].
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
    Add(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    MaskedSoftmax(Var),
    Sum(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    AddRowBroadcast { x: Var, bias: Var },
    ConcatCols(Vec<Var>),
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

#[derive(Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op,
}

/// Append-only record of matrix operations supporting one reverse sweep.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    swept: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            swept: false,
        }
    }

    /// Drops every node so the tape can record a fresh graph.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.swept = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix<T>, op: Op, name: &'static str) -> Result<Var, GradError> {
        if !value.is_finite() {
            return Err(GradError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Matrix<T>) -> Result<Var, GradError> {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, GradError> {
        let out = self.value(a).scaled(T::from_f64_lossy(c));
        self.push(out, Op::Scale(a, c), "scale")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, GradError> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), "transpose")
    }

    pub fn masked_softmax_rows(&mut self, logits: Var) -> Result<Var, GradError> {
        let out = masked_softmax_rows(self.value(logits))?;
        self.push(out, Op::MaskedSoftmax(logits), "masked_softmax_rows")
    }

    /// Sum of all entries as a 1×1 matrix.
    pub fn sum(&mut self, a: Var) -> Result<Var, GradError> {
        let s = self.value(a).sum();
        self.push(Matrix::filled(1, 1, s), Op::Sum(a), "sum")
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, GradError> {
        let src = self.value(table);
        let cols = src.cols();
        let mut out = Matrix::zeros(ids.len(), cols);
        for (r, &id) in ids.iter().enumerate() {
            if id >= src.rows() {
                return Err(GradError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    bound: src.rows(),
                });
            }
            out.row_mut(r).copy_from_slice(src.row(id));
        }
        self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            "gather_rows",
        )
    }

    /// Adds a 1×d row vector to every row of a T×d matrix.
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Result<Var, GradError> {
        let (xm, bm) = (self.value(x), self.value(bias));
        if bm.rows() != 1 || bm.cols() != xm.cols() {
            return Err(GradError::ShapeMismatch {
                op: "add_row_broadcast",
                left: xm.shape(),
                right: bm.shape(),
            });
        }
        let mut out = xm.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(bm.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRowBroadcast { x, bias }, "add_row_broadcast")
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        let Some(&first) = parts.first() else {
            return Err(GradError::Empty { op: "concat_cols" });
        };
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let m = self.value(p);
            if m.rows() != rows {
                return Err(GradError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(first).shape(),
                    right: m.shape(),
                });
            }
            cols += m.cols();
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            for i in 0..rows {
                out.row_mut(i)[offset..offset + m.cols()].copy_from_slice(m.row(i));
            }
            offset += m.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Mean over rows of `-log softmax(logits[i])[targets[i]]`, as a 1×1 matrix.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, GradError> {
        let lm = self.value(logits);
        if targets.len() != lm.rows() {
            return Err(GradError::ShapeMismatch {
                op: "cross_entropy",
                left: lm.shape(),
                right: (targets.len(), 1),
            });
        }
        let mut total = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            if t >= lm.cols() {
                return Err(GradError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    bound: lm.cols(),
                });
            }
            total -= log_softmax_at(lm.row(i), t).to_f64().unwrap_or(f64::NAN);
        }
        let loss = T::from_f64_lossy(total / targets.len().max(1) as f64);
        self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            "cross_entropy",
        )
    }

    /// Reverse sweep from a scalar node. A tape may be swept once; call
    /// [`Tape::reset`] before recording again.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, GradError> {
        if self.swept {
            return Err(GradError::BackwardTwice);
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(GradError::NotScalar {
                shape: self.value(loss).shape(),
            });
        }
        self.swept = true;

        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b))?;
                    let gb = self.value(*a).matmul_tn(&g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.scaled(T::from_f64_lossy(*c)));
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::MaskedSoftmax(x) => {
                    let y = &node.value;
                    let t = y.rows();
                    let mut gx = Matrix::zeros(t, t);
                    for i in 0..t {
                        let (yr, gr) = (&y.row(i)[..=i], &g.row(i)[..=i]);
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for (j, o) in gx.row_mut(i)[..=i].iter_mut().enumerate() {
                            *o = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.get(0, 0)));
                }
                Op::GatherRows { table, ids } => {
                    let (r, c) = self.value(*table).shape();
                    let mut gt = Matrix::zeros(r, c);
                    for (row, &id) in ids.iter().enumerate() {
                        for (o, &v) in gt.row_mut(id).iter_mut().zip(g.row(row)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::AddRowBroadcast { x, bias } => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, &v) in gb.data_mut().iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *x, g.clone());
                    accumulate(&mut grads, *bias, gb);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = self.value(p).shape();
                        let mut gp = Matrix::zeros(r, c);
                        for i in 0..r {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + c]);
                        }
                        offset += c;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::CrossEntropy { logits, targets } => {
                    let lm = self.value(*logits);
                    let scale = g.get(0, 0) / T::from_usize(targets.len()).unwrap_or(T::one());
                    let mut gl = Matrix::zeros(lm.rows(), lm.cols());
                    for (i, &t) in targets.iter().enumerate() {
                        let probs = softmax(lm.row(i));
                        for (j, (o, p)) in gl.row_mut(i).iter_mut().zip(probs).enumerate() {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            *o = (p - onehot) * scale;
                        }
                    }
                    accumulate(&mut grads, *logits, gl);
                }
            }
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn softmax<T: Real>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&x| (x - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax_at<T: Real>(row: &[T], k: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    row[k] - lse
}

/// Result of a reverse sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the swept loss with respect to `v`; zero when `v` did
    /// not contribute.
    pub fn wrt(&self, v: Var) -> Matrix<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Matrix<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}
