//! Small dense helpers. Everything accumulates in f64.

use alloc::vec::Vec;

#[inline]
pub fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Unit-normalizes in place; returns the original norm.
pub fn normalize_in_place(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// `out = m · x` for a row-major `rows × cols` matrix.
pub fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    m.chunks_exact(cols).map(|row| dot(row, x)).collect()
}

/// `out = mᵀ · y` for a row-major `rows × cols` matrix.
pub fn matvec_t(m: &[f64], rows: usize, cols: usize, y: &[f64]) -> Vec<f64> {
    debug_assert_eq!(y.len(), rows);
    let mut out = alloc::vec![0.0; cols];
    for (row, &yi) in m.chunks_exact(cols).zip(y) {
        for (o, &mij) in out.iter_mut().zip(row) {
            *o += mij * yi;
        }
    }
    out
}

/// `acc += scale · u vᵀ`.
pub fn add_outer(acc: &mut [f64], u: &[f64], v: &[f64], scale: f64) {
    let cols = v.len();
    for (row, &ui) in acc.chunks_exact_mut(cols).zip(u) {
        let s = scale * ui;
        for (a, &vj) in row.iter_mut().zip(v) {
            *a += s * vj;
        }
    }
}

/// Gradient of `normalize(y)` pulled back from `g = dL/dh` where `h = y / |y|`.
pub fn normalize_backward(g: &[f64], h: &[f64], y_norm: f64) -> Vec<f64> {
    let gh = dot(g, h);
    g.iter().zip(h).map(|(gi, hi)| (gi - gh * hi) / y_norm).collect()
}

/// Numerically stable `log Σ exp(x)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + libm::log(xs.iter().map(|x| libm::exp(x - max)).sum::<f64>())
}
