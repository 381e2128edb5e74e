//! Differentiable primitives with hand-written backward passes.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `a · b` for `a: [M×P]`, `b: [P×Nc]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, p) = a.require_matrix("matmul")?;
    let (p2, n) = b.require_matrix("matmul")?;
    if p != p2 {
        return Err(Error::dim(
            "matmul",
            format!("left {:?} and right {:?} have different inner extents", a.shape(), b.shape()),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for k in 0..p {
            let av = ad[i * p + k];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[k * n..(k + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, p) = a.require_matrix("matmul_nt")?;
    let (n, p2) = b.require_matrix("matmul_nt")?;
    if p != p2 {
        return Err(Error::dim(
            "matmul_nt",
            format!("left {:?} and right {:?} have different inner extents", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            out[i * n + j] = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (p, m) = a.require_matrix("matmul_tn")?;
    let (p2, n) = b.require_matrix("matmul_tn")?;
    if p != p2 {
        return Err(Error::dim(
            "matmul_tn",
            format!("left {:?} and right {:?} have different row counts", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; m * n];
    for k in 0..p {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Returns `(dL/da, dL/db)` for `out = a · b` given `dL/dout`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dout: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((matmul_nt(dout, b)?, matmul_tn(a, dout)?))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Jacobian-vector product of softmax: given `y = softmax_rows(x)` and `dL/dy`,
/// returns `dL/dx = y ⊙ (dy − Σ dy⊙y)` row by row.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if y.shape() != dy.shape() {
        return Err(Error::dim(
            "softmax_rows_backward",
            format!("{:?} vs {:?}", y.shape(), dy.shape()),
        ));
    }
    let mut dx = dy.clone();
    for r in 0..y.rows() {
        let yr = y.row(r);
        let dot: f64 = yr.iter().zip(dy.row(r)).map(|(a, b)| a * b).sum();
        for (d, &yv) in dx.row_mut(r).iter_mut().zip(yr) {
            *d = yv * (*d - dot);
        }
    }
    Ok(dx)
}

/// Mean squared error over all elements.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let diff = pred.zip_map(target, "mse", |a, b| a - b)?;
    Ok(diff.sq_norm() / diff.len() as f64)
}

/// `dL/dpred = 2(pred − target)/count`.
pub fn mse_grad(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let n = pred.len() as f64;
    pred.zip_map(target, "mse", |a, b| 2.0 * (a - b) / n)
}

fn check_targets(logits: &Tensor, targets: &[usize]) -> Result<(usize, usize)> {
    let (m, k) = logits.require_matrix("cross_entropy")?;
    if targets.len() != m {
        return Err(Error::dim(
            "cross_entropy",
            format!("{m} logit rows but {} targets", targets.len()),
        ));
    }
    if let Some((row, &value)) = targets.iter().enumerate().find(|(_, &t)| t >= k) {
        return Err(Error::Index {
            op: "cross_entropy",
            row,
            value,
            bound: k,
        });
    }
    Ok((m, k))
}

/// Mean over rows of `−log softmax(logits)[target]`, computed via log-sum-exp.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let (m, _) = check_targets(logits, targets)?;
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok(total / m as f64)
}

/// `(softmax − onehot)/M`.
pub fn cross_entropy_grad(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let (m, _) = check_targets(logits, targets)?;
    let mut g = softmax_rows(logits);
    for (r, &t) in targets.iter().enumerate() {
        let row = g.row_mut(r);
        row[t] -= 1.0;
        row.iter_mut().for_each(|v| *v /= m as f64);
    }
    Ok(g)
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
