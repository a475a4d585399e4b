//! Forward and vector-Jacobian kernels on plain tensors.
//!
//! Every reduction is a left fold in index order and every produced value
//! passes through [`Precision::round`], so results depend only on inputs
//! and precision.

use super::tensor::{Precision, Tensor};

#[inline]
fn fold(p: Precision, init: f64, xs: impl Iterator<Item = f64>) -> f64 {
    xs.fold(init, |acc, x| p.round(acc + x))
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(p: Precision, a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = fold(p, 0.0, (0..k).map(|t| p.round(arow[t] * bd[t * n + j])));
        }
    }
    Tensor::new(&[m, n], out).expect("matmul shape")
}

/// `up[m×n] · b[k×n]ᵀ`, the gradient of `a` in `a · b`.
pub fn matmul_nt(p: Precision, up: &Tensor, b: &Tensor) -> Tensor {
    let (m, n, k) = (up.rows(), up.cols(), b.rows());
    let (ud, bd) = (up.data(), b.data());
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for t in 0..k {
            out[i * k + t] = fold(
                p,
                0.0,
                (0..n).map(|j| p.round(ud[i * n + j] * bd[t * n + j])),
            );
        }
    }
    Tensor::new(&[m, k], out).expect("matmul_nt shape")
}

/// `a[m×k]ᵀ · up[m×n]`, the gradient of `b` in `a · b`.
pub fn matmul_tn(p: Precision, a: &Tensor, up: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), up.cols());
    let (ad, ud) = (a.data(), up.data());
    let mut out = vec![0.0; k * n];
    for t in 0..k {
        for j in 0..n {
            out[t * n + j] = fold(
                p,
                0.0,
                (0..m).map(|i| p.round(ad[i * k + t] * ud[i * n + j])),
            );
        }
    }
    Tensor::new(&[k, n], out).expect("matmul_tn shape")
}

/// Column sums of the matrix view, returned as a `[cols]` vector.
pub fn sum_rows(p: Precision, x: &Tensor) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    let d = x.data();
    let out = (0..n)
        .map(|j| fold(p, 0.0, (0..m).map(|i| d[i * n + j])))
        .collect();
    Tensor::vector(out)
}

pub fn reduce_sum(p: Precision, x: &Tensor) -> f64 {
    fold(p, 0.0, x.data().iter().copied())
}

/// Repeats a `[n]` row over `m` rows.
pub fn broadcast_rows(row: &Tensor, shape: &[usize]) -> Tensor {
    let m = if shape.len() == 2 { shape[0] } else { 1 };
    let mut data = Vec::with_capacity(m * row.numel());
    for _ in 0..m {
        data.extend_from_slice(row.data());
    }
    Tensor::new(shape, data).expect("broadcast shape")
}

pub fn zip_map(p: Precision, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| p.round(f(x, y)))
        .collect();
    Tensor::new(a.shape(), data).expect("zip shape")
}

/// Elementwise map over `a` where `b` is a row repeated across `a`'s rows.
pub fn zip_map_rows(p: Precision, a: &Tensor, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n = a.cols();
    let rd = row.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &x)| p.round(f(x, rd[idx % n])))
        .collect();
    Tensor::new(a.shape(), data).expect("zip_rows shape")
}

pub fn map(p: Precision, a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    a.map(|v| p.round(f(v)))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax over all elements with max subtraction.
pub fn softmax(p: Precision, x: &Tensor) -> Tensor {
    let max = x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps = map(p, x, |v| (v - max).exp());
    let total = reduce_sum(p, &exps);
    map(p, &exps, |e| e / total)
}

/// `max(z,0) − z·y + ln(1 + exp(−|z|))`.
pub fn bce_with_logits(z: f64, target: f64) -> f64 {
    z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
}
