//! Differentiable operations. Each public function computes its value eagerly
//! and records an [`Op`] holding its inputs; [`Op::backward`] maps the output
//! gradient to one gradient per input that requires it.

use super::tensor::Tensor;
use super::TensorError;

pub(crate) enum Op {
    MatMul(Tensor, Tensor),
    MatMulNt(Tensor, Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    Exp(Tensor),
    Log(Tensor),
    Relu(Tensor),
    Sum(Tensor),
    Mean(Tensor),
    Dot(Tensor, Tensor),
    L2Normalize { input: Tensor, norm: f64 },
    Softmax { input: Tensor, axis: usize },
    LogSumExp(Tensor),
    CrossEntropy { logits: Tensor, targets: Vec<usize> },
    Reshape(Tensor),
    Row(Tensor, usize),
    Column(Tensor, usize),
    GatherRows(Tensor, Vec<usize>),
    ScatterRows(Tensor, Vec<usize>),
    ScaleRows(Tensor, Tensor),
    Concat(Vec<Tensor>),
    TopKRenorm { probs: Tensor, selections: Vec<Vec<usize>> },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Dot(a, b)
            | Op::ScaleRows(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::LogSumExp(a)
            | Op::Reshape(a)
            | Op::Row(a, _)
            | Op::Column(a, _)
            | Op::GatherRows(a, _)
            | Op::ScatterRows(a, _) => vec![a],
            Op::L2Normalize { input, .. } | Op::Softmax { input, .. } => vec![input],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::TopKRenorm { probs, .. } => vec![probs],
            Op::Concat(parts) => parts.iter().collect(),
        }
    }

    pub(crate) fn backward(&self, out: &Tensor, g: &[f64]) -> Vec<(Tensor, Vec<f64>)> {
        let mut grads = Vec::new();
        let mut push = |t: &Tensor, grad: Vec<f64>| {
            if t.requires_grad() {
                grads.push((t.clone(), grad));
            }
        };
        match self {
            Op::MatMul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = if b.rank() == 1 { 1 } else { b.shape()[1] };
                let (ad, bd) = (a.data(), b.data());
                if a.requires_grad() {
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bd[p * n + j];
                            }
                            ga[i * k + p] = acc;
                        }
                    }
                    push(a, ga);
                }
                if b.requires_grad() {
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                    push(b, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[0];
                let (ad, bd) = (a.data(), b.data());
                if a.requires_grad() {
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for p in 0..k {
                                ga[i * k + p] += gij * bd[j * k + p];
                            }
                        }
                    }
                    push(a, ga);
                }
                if b.requires_grad() {
                    let mut gb = vec![0.0; n * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for p in 0..k {
                                gb[j * k + p] += gij * ad[i * k + p];
                            }
                        }
                    }
                    push(b, gb);
                }
            }
            Op::Add(a, b) => {
                push(a, g.to_vec());
                push(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                push(a, g.to_vec());
                push(b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                push(a, g.iter().zip(b.data()).map(|(g, b)| g * b).collect());
                push(b, g.iter().zip(a.data()).map(|(g, a)| g * a).collect());
            }
            Op::Scale(a, s) => push(a, g.iter().map(|v| v * s).collect()),
            Op::Exp(a) => push(a, g.iter().zip(out.data()).map(|(g, y)| g * y).collect()),
            Op::Log(a) => push(a, g.iter().zip(a.data()).map(|(g, x)| g / x).collect()),
            Op::Relu(a) => push(
                a,
                g.iter()
                    .zip(a.data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Sum(a) => push(a, vec![g[0]; a.numel()]),
            Op::Mean(a) => push(a, vec![g[0] / a.numel() as f64; a.numel()]),
            Op::Dot(a, b) => {
                push(a, b.data().iter().map(|v| v * g[0]).collect());
                push(b, a.data().iter().map(|v| v * g[0]).collect());
            }
            Op::L2Normalize { input, norm } => {
                let y = out.data();
                let yg: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                push(
                    input,
                    g.iter().zip(y).map(|(g, y)| (g - y * yg) / norm).collect(),
                );
            }
            Op::Softmax { input, axis } => {
                let y = out.data();
                let mut gx = vec![0.0; y.len()];
                for lane in softmax_lanes(input.shape(), *axis) {
                    let dot: f64 = lane.clone().map(|i| y[i] * g[i]).sum();
                    for i in lane {
                        gx[i] = y[i] * (g[i] - dot);
                    }
                }
                push(input, gx);
            }
            Op::LogSumExp(a) => {
                let lse = out.data()[0];
                push(a, a.data().iter().map(|x| g[0] * (x - lse).exp()).collect());
            }
            Op::CrossEntropy { logits, targets } => {
                let classes = *logits.shape().last().unwrap_or(&1);
                let rows = targets.len();
                let scale = g[0] / rows as f64;
                let mut gl = vec![0.0; logits.numel()];
                for (r, &t) in targets.iter().enumerate() {
                    let row = &logits.data()[r * classes..(r + 1) * classes];
                    let lse = log_sum_exp(row);
                    for c in 0..classes {
                        let p = (row[c] - lse).exp();
                        gl[r * classes + c] = scale * (p - if c == t { 1.0 } else { 0.0 });
                    }
                }
                push(logits, gl);
            }
            Op::Reshape(a) => push(a, g.to_vec()),
            Op::Row(a, i) => {
                let cols = a.shape()[1];
                let mut ga = vec![0.0; a.numel()];
                ga[i * cols..(i + 1) * cols].copy_from_slice(g);
                push(a, ga);
            }
            Op::Column(a, j) => {
                let cols = a.shape()[1];
                let mut ga = vec![0.0; a.numel()];
                for (r, gv) in g.iter().enumerate() {
                    ga[r * cols + j] = *gv;
                }
                push(a, ga);
            }
            Op::GatherRows(a, idx) => {
                let width = row_width(a.shape());
                let mut ga = vec![0.0; a.numel()];
                for (t, &r) in idx.iter().enumerate() {
                    for c in 0..width {
                        ga[r * width + c] += g[t * width + c];
                    }
                }
                push(a, ga);
            }
            Op::ScatterRows(a, idx) => {
                let width = row_width(a.shape());
                let mut ga = vec![0.0; a.numel()];
                for (t, &r) in idx.iter().enumerate() {
                    ga[t * width..(t + 1) * width]
                        .copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                push(a, ga);
            }
            Op::ScaleRows(a, w) => {
                let cols = a.shape()[1];
                let (ad, wd) = (a.data(), w.data());
                if a.requires_grad() {
                    let ga = (0..a.numel()).map(|i| g[i] * wd[i / cols]).collect();
                    push(a, ga);
                }
                if w.requires_grad() {
                    let gw = (0..wd.len())
                        .map(|r| {
                            (0..cols)
                                .map(|c| g[r * cols + c] * ad[r * cols + c])
                                .sum()
                        })
                        .collect();
                    push(w, gw);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = p.numel();
                    push(p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::TopKRenorm { probs, selections } => {
                let n = probs.shape()[1];
                let p = probs.data();
                let mut gp = vec![0.0; p.len()];
                for (r, sel) in selections.iter().enumerate() {
                    let s: f64 = sel.iter().map(|&i| p[r * n + i]).sum();
                    let weighted: f64 = sel.iter().map(|&i| g[r * n + i] * p[r * n + i]).sum();
                    for &j in sel {
                        gp[r * n + j] = g[r * n + j] / s - weighted / (s * s);
                    }
                }
                push(probs, gp);
            }
        }
        grads
    }
}

fn row_width(shape: &[usize]) -> usize {
    if shape.len() == 2 {
        shape[1]
    } else {
        1
    }
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Index sets of the 1-D slices a softmax along `axis` normalizes over.
fn softmax_lanes(
    shape: &[usize],
    axis: usize,
) -> Vec<impl Iterator<Item = usize> + Clone> {
    let (outer, len, stride) = match (shape.len(), axis) {
        (1, 0) => (1, shape[0], 1),
        (2, 1) => (shape[0], shape[1], 1),
        (2, 0) => (shape[1], shape[0], shape[1]),
        _ => (0, 0, 1),
    };
    (0..outer)
        .map(|o| {
            let start = if axis == 1 || shape.len() == 1 { o * len } else { o };
            (0..len).map(move |i| start + i * stride)
        })
        .collect()
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::DimensionMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<(), TensorError> {
    if t.rank() != rank {
        return Err(TensorError::Rank {
            op,
            expected: rank,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_index(index: usize, len: usize) -> Result<(), TensorError> {
    if index >= len {
        return Err(TensorError::IndexOutOfBounds { index, len });
    }
    Ok(())
}

/// Matrix product. `a` is `[m, k]`; `b` is `[k, n]` or a `[k]` vector.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    expect_rank("matmul", a, 2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (kb, n, out_shape) = match b.shape() {
        [kb] => (*kb, 1, vec![m]),
        [kb, n] => (*kb, *n, vec![m, *n]),
        _ => {
            return Err(TensorError::Rank {
                op: "matmul",
                expected: 2,
                shape: b.shape().to_vec(),
            })
        }
    };
    if k != kb {
        return Err(TensorError::DimensionMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = ad[i * k + p];
            for j in 0..n {
                out[i * n + j] += aip * bd[p * n + j];
            }
        }
    }
    Ok(Tensor::from_op(out, out_shape, Op::MatMul(a.clone(), b.clone())))
}

/// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    expect_rank("matmul_nt", a, 2)?;
    expect_rank("matmul_nt", b, 2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[0];
    if b.shape()[1] != k {
        return Err(TensorError::DimensionMismatch {
            op: "matmul_nt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = row
                .iter()
                .zip(&bd[j * k..(j + 1) * k])
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    Ok(Tensor::from_op(out, vec![m, n], Op::MatMulNt(a.clone(), b.clone())))
}

fn zip_map(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Vec<f64>, TensorError> {
    same_shape(op, a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let data = zip_map("add", a, b, |x, y| x + y)?;
    Ok(Tensor::from_op(data, a.shape().to_vec(), Op::Add(a.clone(), b.clone())))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let data = zip_map("sub", a, b, |x, y| x - y)?;
    Ok(Tensor::from_op(data, a.shape().to_vec(), Op::Sub(a.clone(), b.clone())))
}

/// Elementwise (Hadamard) product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let data = zip_map("mul", a, b, |x, y| x * y)?;
    Ok(Tensor::from_op(data, a.shape().to_vec(), Op::Mul(a.clone(), b.clone())))
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    let data = a.data().iter().map(|x| x * s).collect();
    Tensor::from_op(data, a.shape().to_vec(), Op::Scale(a.clone(), s))
}

pub fn exp(a: &Tensor) -> Tensor {
    let data = a.data().iter().map(|x| x.exp()).collect();
    Tensor::from_op(data, a.shape().to_vec(), Op::Exp(a.clone()))
}

pub fn log(a: &Tensor) -> Result<Tensor, TensorError> {
    if let Some(&value) = a.data().iter().find(|v| !(**v > 0.0)) {
        return Err(TensorError::Domain { value });
    }
    let data = a.data().iter().map(|x| x.ln()).collect();
    Ok(Tensor::from_op(data, a.shape().to_vec(), Op::Log(a.clone())))
}

pub fn relu(a: &Tensor) -> Tensor {
    let data = a.data().iter().map(|x| x.max(0.0)).collect();
    Tensor::from_op(data, a.shape().to_vec(), Op::Relu(a.clone()))
}

pub fn sum(a: &Tensor) -> Tensor {
    let total = a.data().iter().sum();
    Tensor::from_op(vec![total], Vec::new(), Op::Sum(a.clone()))
}

pub fn mean(a: &Tensor) -> Result<Tensor, TensorError> {
    if a.numel() == 0 {
        return Err(TensorError::Empty { op: "mean" });
    }
    let m = a.data().iter().sum::<f64>() / a.numel() as f64;
    Ok(Tensor::from_op(vec![m], Vec::new(), Op::Mean(a.clone())))
}

/// Inner product of two vectors of equal length.
pub fn dot(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    expect_rank("dot", a, 1)?;
    let v = zip_map("dot", a, b, |x, y| x * y)?.into_iter().sum();
    Ok(Tensor::from_op(vec![v], Vec::new(), Op::Dot(a.clone(), b.clone())))
}

/// `x / ‖x‖₂` for a vector. A zero or non-finite norm is rejected.
pub fn l2_normalize(a: &Tensor) -> Result<Tensor, TensorError> {
    expect_rank("l2_normalize", a, 1)?;
    let norm = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(TensorError::DegenerateInput { norm });
    }
    let data = a.data().iter().map(|x| x / norm).collect();
    Ok(Tensor::from_op(
        data,
        a.shape().to_vec(),
        Op::L2Normalize { input: a.clone(), norm },
    ))
}

/// Softmax along `axis` with max subtraction.
pub fn softmax(a: &Tensor, axis: usize) -> Result<Tensor, TensorError> {
    if !matches!((a.rank(), axis), (1, 0) | (2, 0) | (2, 1)) {
        return Err(TensorError::InvalidAxis {
            axis,
            shape: a.shape().to_vec(),
        });
    }
    let x = a.data();
    let mut out = vec![0.0; x.len()];
    for lane in softmax_lanes(a.shape(), axis) {
        let max = lane.clone().map(|i| x[i]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for i in lane.clone() {
            out[i] = (x[i] - max).exp();
            total += out[i];
        }
        for i in lane {
            out[i] /= total;
        }
    }
    Ok(Tensor::from_op(
        out,
        a.shape().to_vec(),
        Op::Softmax { input: a.clone(), axis },
    ))
}

/// `ln Σ exp(x)` over a vector, evaluated stably.
pub fn logsumexp(a: &Tensor) -> Result<Tensor, TensorError> {
    expect_rank("logsumexp", a, 1)?;
    if a.numel() == 0 {
        return Err(TensorError::Empty { op: "logsumexp" });
    }
    let v = log_sum_exp(a.data());
    Ok(Tensor::from_op(vec![v], Vec::new(), Op::LogSumExp(a.clone())))
}

/// Softmax cross-entropy. `logits` is `[C]` with one target or `[B, C]` with
/// `B` targets; the batched form returns the mean over rows.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor, TensorError> {
    let (rows, classes) = match logits.shape() {
        [c] => (1, *c),
        [b, c] => (*b, *c),
        _ => {
            return Err(TensorError::Rank {
                op: "cross_entropy",
                expected: 2,
                shape: logits.shape().to_vec(),
            })
        }
    };
    if targets.len() != rows || rows == 0 {
        return Err(TensorError::DimensionMismatch {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        check_index(t, classes)?;
        let row = &logits.data()[r * classes..(r + 1) * classes];
        total += log_sum_exp(row) - row[t];
    }
    Ok(Tensor::from_op(
        vec![total / rows as f64],
        Vec::new(),
        Op::CrossEntropy {
            logits: logits.clone(),
            targets: targets.to_vec(),
        },
    ))
}

pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor, TensorError> {
    if shape.iter().product::<usize>() != a.numel() {
        return Err(TensorError::ShapeData {
            shape: shape.to_vec(),
            len: a.numel(),
        });
    }
    Ok(Tensor::from_op(a.data().to_vec(), shape.to_vec(), Op::Reshape(a.clone())))
}

/// Row `i` of a matrix, as a vector.
pub fn row(a: &Tensor, i: usize) -> Result<Tensor, TensorError> {
    expect_rank("row", a, 2)?;
    check_index(i, a.shape()[0])?;
    let cols = a.shape()[1];
    let data = a.data()[i * cols..(i + 1) * cols].to_vec();
    Ok(Tensor::from_op(data, vec![cols], Op::Row(a.clone(), i)))
}

/// Column `j` of a matrix, as a vector.
pub fn column(a: &Tensor, j: usize) -> Result<Tensor, TensorError> {
    expect_rank("column", a, 2)?;
    let (rows, cols) = (a.shape()[0], a.shape()[1]);
    check_index(j, cols)?;
    let data = (0..rows).map(|r| a.data()[r * cols + j]).collect();
    Ok(Tensor::from_op(data, vec![rows], Op::Column(a.clone(), j)))
}

/// Selects rows of a matrix (or elements of a vector) by index.
pub fn gather_rows(a: &Tensor, idx: &[usize]) -> Result<Tensor, TensorError> {
    if a.rank() == 0 || a.rank() > 2 {
        return Err(TensorError::Rank {
            op: "gather_rows",
            expected: 2,
            shape: a.shape().to_vec(),
        });
    }
    let width = row_width(a.shape());
    let mut data = Vec::with_capacity(idx.len() * width);
    for &r in idx {
        check_index(r, a.shape()[0])?;
        data.extend_from_slice(&a.data()[r * width..(r + 1) * width]);
    }
    let mut shape = a.shape().to_vec();
    shape[0] = idx.len();
    Ok(Tensor::from_op(data, shape, Op::GatherRows(a.clone(), idx.to_vec())))
}

/// Inverse of [`gather_rows`]: places row `t` of `a` at row `idx[t]` of a
/// zero matrix with `rows` rows, summing duplicates.
pub fn scatter_rows(a: &Tensor, idx: &[usize], rows: usize) -> Result<Tensor, TensorError> {
    expect_rank("scatter_rows", a, 2)?;
    if idx.len() != a.shape()[0] {
        return Err(TensorError::DimensionMismatch {
            op: "scatter_rows",
            lhs: a.shape().to_vec(),
            rhs: vec![idx.len()],
        });
    }
    let width = a.shape()[1];
    let mut data = vec![0.0; rows * width];
    for (t, &r) in idx.iter().enumerate() {
        check_index(r, rows)?;
        for c in 0..width {
            data[r * width + c] += a.data()[t * width + c];
        }
    }
    Ok(Tensor::from_op(
        data,
        vec![rows, width],
        Op::ScatterRows(a.clone(), idx.to_vec()),
    ))
}

/// Multiplies row `i` of `a: [r, d]` by `w[i]` for `w: [r]`.
pub fn scale_rows(a: &Tensor, w: &Tensor) -> Result<Tensor, TensorError> {
    expect_rank("scale_rows", a, 2)?;
    expect_rank("scale_rows", w, 1)?;
    if w.numel() != a.shape()[0] {
        return Err(TensorError::DimensionMismatch {
            op: "scale_rows",
            lhs: a.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let cols = a.shape()[1];
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, x)| x * w.data()[i / cols])
        .collect();
    Ok(Tensor::from_op(
        data,
        a.shape().to_vec(),
        Op::ScaleRows(a.clone(), w.clone()),
    ))
}

/// Concatenates scalars and vectors into one vector.
pub fn concat(parts: &[Tensor]) -> Result<Tensor, TensorError> {
    for p in parts {
        if p.rank() > 1 {
            return Err(TensorError::Rank {
                op: "concat",
                expected: 1,
                shape: p.shape().to_vec(),
            });
        }
    }
    let data: Vec<f64> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    let n = data.len();
    Ok(Tensor::from_op(data, vec![n], Op::Concat(parts.to_vec())))
}

/// Keeps the selected entries of each row of `probs: [B, n]` and divides them
/// by their row sum; unselected entries become exactly zero.
pub fn topk_renormalize(probs: &Tensor, selections: &[Vec<usize>]) -> Result<Tensor, TensorError> {
    expect_rank("topk_renormalize", probs, 2)?;
    let (rows, n) = (probs.shape()[0], probs.shape()[1]);
    if selections.len() != rows {
        return Err(TensorError::DimensionMismatch {
            op: "topk_renormalize",
            lhs: probs.shape().to_vec(),
            rhs: vec![selections.len()],
        });
    }
    let p = probs.data();
    let mut out = vec![0.0; rows * n];
    for (r, sel) in selections.iter().enumerate() {
        let mut s = 0.0;
        for &i in sel {
            check_index(i, n)?;
            s += p[r * n + i];
        }
        for &i in sel {
            out[r * n + i] = p[r * n + i] / s;
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![rows, n],
        Op::TopKRenorm {
            probs: probs.clone(),
            selections: selections.to_vec(),
        },
    ))
}
