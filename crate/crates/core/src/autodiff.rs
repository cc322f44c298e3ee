//! Matrix-valued reverse-mode automatic differentiation.
//!
//! Every value on the tape is a dense row-major matrix. Parameters enter the
//! tape as a single flat leaf and are cut into weight blocks with
//! [`Tape::slice`], so one backward pass yields the gradient with respect to
//! the whole parameter vector.
//!
//! ```
//! use rcrl_core::autodiff::grad;
//!
//! let (value, g) = grad(&[3.0, -1.0], |tape, theta| {
//!     let sq = tape.mul(theta, theta);
//!     tape.sum(sq)
//! });
//! assert_eq!(value, 10.0);
//! assert_eq!(g, vec![6.0, -2.0]);
//! ```

use std::cell::RefCell;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data has the wrong length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self::new(1, data.len(), data)
    }

    pub fn col_vector(data: Vec<f64>) -> Self {
        Self::new(data.len(), 1, data)
    }

    pub fn scalar(x: f64) -> Self {
        Self::new(1, 1, vec![x])
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Slice { src: Var, offset: usize },
    MatMul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Exp(Var),
    LogFloor(Var, f64),
    Clamp(Var, f64, f64),
    LogSoftmaxRows(Var),
    LogSumExpRows(Var),
    GatherCols { src: Var, idx: Vec<usize> },
    GatherRows { src: Var, idx: Vec<usize> },
    ConcatCols(Var, Var),
    Reshape(Var),
    SumRows(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Mat, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    fn with<T>(&self, v: Var, f: impl FnOnce(&Mat) -> T) -> T {
        f(&self.nodes.borrow()[v.0].value)
    }

    fn map(&self, v: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.with(v, |m| Mat::new(m.rows, m.cols, m.data.iter().map(|&x| f(x)).collect()));
        self.push(value, op)
    }

    fn zip(&self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!((x.rows, x.cols), (y.rows, y.cols), "elementwise shape mismatch");
            Mat::new(x.rows, x.cols, x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect())
        };
        self.push(value, op)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Mat {
        self.with(v, Mat::clone)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.with(v, |m| m.data[0])
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.with(v, |m| (m.rows, m.cols))
    }

    /// A leaf. Constants are leaves whose gradient is simply never read.
    pub fn leaf(&self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&self, value: Mat) -> Var {
        self.leaf(value)
    }

    /// A `rows x cols` block read from the flat data of `src` starting at `offset`.
    pub fn slice(&self, src: Var, offset: usize, rows: usize, cols: usize) -> Var {
        let value = self.with(src, |m| Mat::new(rows, cols, m.data[offset..offset + rows * cols].to_vec()));
        self.push(value, Op::Slice { src, offset })
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(x.cols, y.rows, "matmul inner dimension mismatch");
            let mut out = vec![0.0; x.rows * y.cols];
            for i in 0..x.rows {
                let o = &mut out[i * y.cols..(i + 1) * y.cols];
                for k in 0..x.cols {
                    let xik = x.data[i * x.cols + k];
                    if xik == 0.0 {
                        continue;
                    }
                    for (oj, yj) in o.iter_mut().zip(y.row(k)) {
                        *oj += xik * yj;
                    }
                }
            }
            Mat::new(x.rows, y.cols, out)
        };
        self.push(value, Op::MatMul(a, b))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, r) = (&nodes[a.0].value, &nodes[row.0].value);
            assert_eq!((r.rows, r.cols), (1, x.cols), "add_row shape mismatch");
            let data = x.data.iter().enumerate().map(|(k, v)| v + r.data[k % x.cols]).collect();
            Mat::new(x.rows, x.cols, data)
        };
        self.push(value, Op::AddRow(a, row))
    }

    /// Adds a `rows x 1` column to every column of `a`.
    pub fn add_col(&self, a: Var, col: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, c) = (&nodes[a.0].value, &nodes[col.0].value);
            assert_eq!((c.rows, c.cols), (x.rows, 1), "add_col shape mismatch");
            let data = x.data.iter().enumerate().map(|(k, v)| v + c.data[k / x.cols]).collect();
            Mat::new(x.rows, x.cols, data)
        };
        self.push(value, Op::AddCol(a, col))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_floor(&self, a: Var, floor: f64) -> Var {
        self.map(a, Op::LogFloor(a, floor), |x| x.max(floor).ln())
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let value = self.with(a, |m| {
            let mut data = Vec::with_capacity(m.data.len());
            for i in 0..m.rows {
                let row = m.row(i);
                let lse = log_sum_exp(row);
                data.extend(row.iter().map(|x| x - lse));
            }
            Mat::new(m.rows, m.cols, data)
        });
        self.push(value, Op::LogSoftmaxRows(a))
    }

    pub fn log_sum_exp_rows(&self, a: Var) -> Var {
        let value = self.with(a, |m| Mat::col_vector((0..m.rows).map(|i| log_sum_exp(m.row(i))).collect()));
        self.push(value, Op::LogSumExpRows(a))
    }

    /// Picks `idx.len() / rows` columns per row: `out[i][j] = a[i][idx[i * k + j]]`.
    pub fn gather_cols(&self, a: Var, idx: Vec<usize>) -> Var {
        let value = self.with(a, |m| {
            assert!(m.rows > 0 && idx.len().is_multiple_of(m.rows), "gather_cols index count");
            let k = idx.len() / m.rows;
            let data = idx.iter().enumerate().map(|(n, &j)| m.get(n / k, j)).collect();
            Mat::new(m.rows, k, data)
        });
        self.push(value, Op::GatherCols { src: a, idx })
    }

    /// One entry per row: `out[i] = a[i][idx[i]]`, as a column.
    pub fn pick(&self, a: Var, idx: Vec<usize>) -> Var {
        self.gather_cols(a, idx)
    }

    /// Row lookup: `out[i] = a[idx[i]]`.
    pub fn gather_rows(&self, a: Var, idx: Vec<usize>) -> Var {
        let value = self.with(a, |m| {
            let mut data = Vec::with_capacity(idx.len() * m.cols);
            for &r in &idx {
                data.extend_from_slice(m.row(r));
            }
            Mat::new(idx.len(), m.cols, data)
        });
        self.push(value, Op::GatherRows { src: a, idx })
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(x.rows, y.rows, "concat_cols row mismatch");
            let mut data = Vec::with_capacity(x.data.len() + y.data.len());
            for i in 0..x.rows {
                data.extend_from_slice(x.row(i));
                data.extend_from_slice(y.row(i));
            }
            Mat::new(x.rows, x.cols + y.cols, data)
        };
        self.push(value, Op::ConcatCols(a, b))
    }

    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.with(a, |m| Mat::new(rows, cols, m.data.clone()));
        self.push(value, Op::Reshape(a))
    }

    pub fn sum_rows(&self, a: Var) -> Var {
        let value = self.with(a, |m| Mat::col_vector((0..m.rows).map(|i| m.row(i).iter().sum()).collect()));
        self.push(value, Op::SumRows(a))
    }

    pub fn sum(&self, a: Var) -> Var {
        let value = self.with(a, |m| Mat::scalar(m.data.iter().sum()));
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.with(a, |m| m.data.len());
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Gradient of the scalar `output` with respect to `wrt`.
    pub fn gradient(&self, output: Var, wrt: Var) -> Mat {
        let (rows, cols) = self.shape(wrt);
        self.backward(output)
            .swap_remove(wrt.0)
            .unwrap_or_else(|| Mat::zeros(rows, cols))
    }

    /// Gradient of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Vec<Option<Mat>> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.0].value.data.len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Mat::scalar(1.0));

        fn acc(grads: &mut [Option<Mat>], v: Var, shape: &Mat, f: impl FnOnce(&mut [f64])) {
            let g = grads[v.0].get_or_insert_with(|| Mat::zeros(shape.rows, shape.cols));
            f(&mut g.data);
        }

        for n in (0..=output.0).rev() {
            let Some(g) = grads[n].take() else { continue };
            let node = &nodes[n];
            let val = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Slice { src, offset } => {
                    acc(&mut grads, *src, &nodes[src.0].value, |d| {
                        for (k, x) in g.data.iter().enumerate() {
                            d[offset + k] += x;
                        }
                    });
                }
                Op::MatMul(a, b) => {
                    let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
                    acc(&mut grads, *a, x, |d| {
                        for i in 0..x.rows {
                            let gi = g.row(i);
                            for k in 0..x.cols {
                                d[i * x.cols + k] += gi.iter().zip(y.row(k)).map(|(p, q)| p * q).sum::<f64>();
                            }
                        }
                    });
                    acc(&mut grads, *b, y, |d| {
                        for i in 0..x.rows {
                            let gi = g.row(i);
                            for k in 0..x.cols {
                                let xik = x.data[i * x.cols + k];
                                if xik == 0.0 {
                                    continue;
                                }
                                for (dj, gj) in d[k * y.cols..(k + 1) * y.cols].iter_mut().zip(gi) {
                                    *dj += xik * gj;
                                }
                            }
                        }
                    });
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *a, val, |d| d.iter_mut().zip(&g.data).for_each(|(p, q)| *p += q));
                    acc(&mut grads, *row, &nodes[row.0].value, |d| {
                        for (k, x) in g.data.iter().enumerate() {
                            d[k % val.cols] += x;
                        }
                    });
                }
                Op::AddCol(a, col) => {
                    acc(&mut grads, *a, val, |d| d.iter_mut().zip(&g.data).for_each(|(p, q)| *p += q));
                    acc(&mut grads, *col, &nodes[col.0].value, |d| {
                        for (k, x) in g.data.iter().enumerate() {
                            d[k / val.cols] += x;
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, val, |d| d.iter_mut().zip(&g.data).for_each(|(p, q)| *p += q));
                    acc(&mut grads, *b, val, |d| d.iter_mut().zip(&g.data).for_each(|(p, q)| *p += q));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, val, |d| d.iter_mut().zip(&g.data).for_each(|(p, q)| *p += q));
                    acc(&mut grads, *b, val, |d| d.iter_mut().zip(&g.data).for_each(|(p, q)| *p -= q));
                }
                Op::Mul(a, b) => {
                    let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
                    acc(&mut grads, *a, x, |d| {
                        for k in 0..d.len() {
                            d[k] += g.data[k] * y.data[k];
                        }
                    });
                    acc(&mut grads, *b, y, |d| {
                        for k in 0..d.len() {
                            d[k] += g.data[k] * x.data[k];
                        }
                    });
                }
                Op::Scale(a, c) => {
                    acc(&mut grads, *a, val, |d| d.iter_mut().zip(&g.data).for_each(|(p, q)| *p += c * q));
                }
                Op::AddScalar(a) => {
                    acc(&mut grads, *a, val, |d| d.iter_mut().zip(&g.data).for_each(|(p, q)| *p += q));
                }
                Op::Tanh(a) => {
                    acc(&mut grads, *a, val, |d| {
                        for k in 0..d.len() {
                            d[k] += g.data[k] * (1.0 - val.data[k] * val.data[k]);
                        }
                    });
                }
                Op::Exp(a) => {
                    acc(&mut grads, *a, val, |d| {
                        for k in 0..d.len() {
                            d[k] += g.data[k] * val.data[k];
                        }
                    });
                }
                Op::LogFloor(a, floor) => {
                    let x = &nodes[a.0].value;
                    acc(&mut grads, *a, x, |d| {
                        for k in 0..d.len() {
                            if x.data[k] > *floor {
                                d[k] += g.data[k] / x.data[k];
                            }
                        }
                    });
                }
                Op::Clamp(a, lo, hi) => {
                    let x = &nodes[a.0].value;
                    acc(&mut grads, *a, x, |d| {
                        for k in 0..d.len() {
                            if x.data[k] > *lo && x.data[k] < *hi {
                                d[k] += g.data[k];
                            }
                        }
                    });
                }
                Op::LogSoftmaxRows(a) => {
                    acc(&mut grads, *a, val, |d| {
                        for i in 0..val.rows {
                            let gi = g.row(i);
                            let gsum: f64 = gi.iter().sum();
                            for j in 0..val.cols {
                                let k = i * val.cols + j;
                                d[k] += gi[j] - val.data[k].exp() * gsum;
                            }
                        }
                    });
                }
                Op::LogSumExpRows(a) => {
                    let x = &nodes[a.0].value;
                    acc(&mut grads, *a, x, |d| {
                        for i in 0..x.rows {
                            let lse = val.data[i];
                            for j in 0..x.cols {
                                let k = i * x.cols + j;
                                d[k] += g.data[i] * (x.data[k] - lse).exp();
                            }
                        }
                    });
                }
                Op::GatherCols { src, idx } => {
                    let x = &nodes[src.0].value;
                    let k = val.cols;
                    acc(&mut grads, *src, x, |d| {
                        for (n, &j) in idx.iter().enumerate() {
                            d[(n / k) * x.cols + j] += g.data[n];
                        }
                    });
                }
                Op::GatherRows { src, idx } => {
                    let x = &nodes[src.0].value;
                    acc(&mut grads, *src, x, |d| {
                        for (i, &r) in idx.iter().enumerate() {
                            for (dj, gj) in d[r * x.cols..(r + 1) * x.cols].iter_mut().zip(g.row(i)) {
                                *dj += gj;
                            }
                        }
                    });
                }
                Op::ConcatCols(a, b) => {
                    let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
                    acc(&mut grads, *a, x, |d| {
                        for i in 0..x.rows {
                            for j in 0..x.cols {
                                d[i * x.cols + j] += g.data[i * val.cols + j];
                            }
                        }
                    });
                    acc(&mut grads, *b, y, |d| {
                        for i in 0..y.rows {
                            for j in 0..y.cols {
                                d[i * y.cols + j] += g.data[i * val.cols + x.cols + j];
                            }
                        }
                    });
                }
                Op::Reshape(a) => {
                    acc(&mut grads, *a, &nodes[a.0].value, |d| {
                        d.iter_mut().zip(&g.data).for_each(|(p, q)| *p += q)
                    });
                }
                Op::SumRows(a) => {
                    let x = &nodes[a.0].value;
                    acc(&mut grads, *a, x, |d| {
                        for (k, dk) in d.iter_mut().enumerate() {
                            *dk += g.data[k / x.cols];
                        }
                    });
                }
                Op::Sum(a) => {
                    let x = &nodes[a.0].value;
                    acc(&mut grads, *a, x, |d| d.iter_mut().for_each(|p| *p += g.data[0]));
                }
            }
            grads[n] = Some(g);
        }
        grads
    }
}

/// Value and gradient of `f` at `theta`. The closure receives the tape and
/// `theta` as a `1 x n` leaf and must return a scalar node.
pub fn grad(theta: &[f64], f: impl FnOnce(&Tape, Var) -> Var) -> (f64, Vec<f64>) {
    let tape = Tape::new();
    let th = tape.leaf(Mat::row_vector(theta.to_vec()));
    let out = f(&tape, th);
    (tape.scalar(out), tape.gradient(out, th).data)
}

/// Central finite differences, used by tests and the gradient check command.
pub fn finite_difference(theta: &[f64], step: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = theta.to_vec();
    (0..theta.len())
        .map(|k| {
            let orig = x[k];
            x[k] = orig + step;
            let hi = f(&x);
            x[k] = orig - step;
            let lo = f(&x);
            x[k] = orig;
            (hi - lo) / (2.0 * step)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||, tiny)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-300 {
        return 0.0;
    }
    norm(&diff) / scale
}
