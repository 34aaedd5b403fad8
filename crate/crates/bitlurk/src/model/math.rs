//! Numeric primitives shared by the forward and backward passes.
//!
//! Everything is generic over [`Scalar`] so the same code runs in f32 for
//! training and inference and in f64 for finite-difference verification.

use std::fmt::Debug;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

pub trait Scalar:
    Float + AddAssign + SubAssign + MulAssign + DivAssign + Copy + Send + Sync + Debug + 'static
{
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f32(self) -> f32;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f32(v: f32) -> Self {
        v
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f32(self) -> f32 {
        self
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
    fn to_f64(self) -> f64 {
        self
    }
}

pub const RMS_EPS: f64 = 1e-5;

/// `out[j] = sum_k w[j * cols + k] * x[k]` for a row-major `rows x cols`
/// matrix. The inner loop runs in index order so results are reproducible.
pub fn matvec<S: Scalar>(w: &[S], rows: usize, cols: usize, x: &[S], out: &mut [S]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for (j, o) in out.iter_mut().enumerate() {
        let row = &w[j * cols..(j + 1) * cols];
        let mut acc = S::zero();
        for (wv, xv) in row.iter().zip(x) {
            acc += *wv * *xv;
        }
        *o = acc;
    }
}

/// `out[k] += sum_j y[j] * w[j * cols + k]`: the transpose product used to
/// push gradients back through a linear layer.
pub fn matvec_t_acc<S: Scalar>(w: &[S], rows: usize, cols: usize, y: &[S], out: &mut [S]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(y.len(), rows);
    debug_assert_eq!(out.len(), cols);
    for j in 0..rows {
        let yj = y[j];
        if yj == S::zero() {
            continue;
        }
        let row = &w[j * cols..(j + 1) * cols];
        for (o, wv) in out.iter_mut().zip(row) {
            *o += yj * *wv;
        }
    }
}

/// `dw[j * cols + k] += y[j] * x[k]`: weight gradient of a linear layer.
pub fn outer_acc<S: Scalar>(dw: &mut [S], rows: usize, cols: usize, y: &[S], x: &[S]) {
    debug_assert_eq!(dw.len(), rows * cols);
    debug_assert_eq!(y.len(), rows);
    debug_assert_eq!(x.len(), cols);
    for j in 0..rows {
        let yj = y[j];
        if yj == S::zero() {
            continue;
        }
        let drow = &mut dw[j * cols..(j + 1) * cols];
        for (d, xv) in drow.iter_mut().zip(x) {
            *d += yj * *xv;
        }
    }
}

/// Root-mean-square normalization with learned gain:
/// `out_i = g_i * x_i / rms`, `rms = sqrt(mean(x^2) + eps)`. Returns `rms`.
pub fn rmsnorm<S: Scalar>(x: &[S], g: &[S], out: &mut [S]) -> S {
    let d = x.len();
    let mut ssq = S::zero();
    for &v in x {
        ssq += v * v;
    }
    let rms = (ssq / S::from_f64(d as f64) + S::from_f64(RMS_EPS)).sqrt();
    for i in 0..d {
        out[i] = g[i] * x[i] / rms;
    }
    rms
}

/// Backward of [`rmsnorm`]. Adds the input gradient into `dx` and the gain
/// gradient into `dg`, given the upstream gradient `dy`.
pub fn rmsnorm_backward<S: Scalar>(
    x: &[S],
    g: &[S],
    rms: S,
    dy: &[S],
    dx: &mut [S],
    dg: &mut [S],
) {
    let d = x.len();
    let inv_d = S::one() / S::from_f64(d as f64);
    let mut proj = S::zero();
    for i in 0..d {
        let xh = x[i] / rms;
        dg[i] += dy[i] * xh;
        proj += dy[i] * g[i] * xh;
    }
    for i in 0..d {
        let xh = x[i] / rms;
        dx[i] += (dy[i] * g[i] - xh * proj * inv_d) / rms;
    }
}

pub fn sigmoid<S: Scalar>(u: S) -> S {
    S::one() / (S::one() + (-u).exp())
}

/// SiLU activation `u * sigmoid(u)`.
pub fn silu<S: Scalar>(u: S) -> S {
    u * sigmoid(u)
}

/// Derivative of SiLU: `sigmoid(u) * (1 + u * (1 - sigmoid(u)))`.
pub fn silu_prime<S: Scalar>(u: S) -> S {
    let s = sigmoid(u);
    s * (S::one() + u * (S::one() - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_reference() {
        // [[1, 2], [3, 4], [5, 6]] * [10, 100]
        let w = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let x = [10.0, 100.0];
        let mut out = [0.0; 3];
        matvec(&w, 3, 2, &x, &mut out);
        assert_eq!(out, [210.0, 430.0, 650.0]);
    }

    #[test]
    fn matvec_transpose_reference() {
        let w = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y = [1.0, 10.0, 100.0];
        let mut out = [0.0; 2];
        matvec_t_acc(&w, 3, 2, &y, &mut out);
        assert_eq!(out, [1.0 + 30.0 + 500.0, 2.0 + 40.0 + 600.0]);
    }

    #[test]
    fn outer_accumulates() {
        let mut dw = [1.0f64; 4];
        outer_acc(&mut dw, 2, 2, &[2.0, 3.0], &[10.0, 20.0]);
        assert_eq!(dw, [21.0, 41.0, 31.0, 61.0]);
    }

    #[test]
    fn rmsnorm_unit_gain() {
        let x = [3.0f64, 4.0];
        let g = [1.0, 1.0];
        let mut out = [0.0; 2];
        let rms = rmsnorm(&x, &g, &mut out);
        let expect = (12.5f64 + 1e-5).sqrt();
        assert!((rms - expect).abs() < 1e-12);
        assert!((out[0] - 3.0 / expect).abs() < 1e-12);
        assert!((out[1] - 4.0 / expect).abs() < 1e-12);
    }

    #[test]
    fn rmsnorm_backward_matches_finite_difference() {
        let x = [0.4f64, -1.2, 0.7, 2.0];
        let g = [1.1f64, 0.9, -0.3, 1.4];
        let dy = [0.2f64, -0.5, 1.0, 0.3];
        let mut out = vec![0.0; 4];
        let rms = rmsnorm(&x, &g, &mut out);
        let mut dx = vec![0.0; 4];
        let mut dg = vec![0.0; 4];
        rmsnorm_backward(&x, &g, rms, &dy, &mut dx, &mut dg);

        let f = |x: &[f64], g: &[f64]| -> f64 {
            let mut out = vec![0.0; 4];
            rmsnorm(x, g, &mut out);
            out.iter().zip(&dy).map(|(o, d)| o * d).sum()
        };
        let h = 1e-7;
        for i in 0..4 {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let num = (f(&xp, &g) - f(&xm, &g)) / (2.0 * h);
            assert!((num - dx[i]).abs() < 1e-6, "dx[{i}]: {num} vs {}", dx[i]);

            let mut gp = g.to_vec();
            let mut gm = g.to_vec();
            gp[i] += h;
            gm[i] -= h;
            let num = (f(&x, &gp) - f(&x, &gm)) / (2.0 * h);
            assert!((num - dg[i]).abs() < 1e-6, "dg[{i}]: {num} vs {}", dg[i]);
        }
    }

    #[test]
    fn silu_values_and_derivative() {
        assert_eq!(silu(0.0f64), 0.0);
        assert!((silu(1.0f64) - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        let h = 1e-6;
        for &u in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let num = (silu(u + h) - silu(u - h)) / (2.0 * h);
            assert!((num - silu_prime(u)).abs() < 1e-8, "u = {u}");
        }
    }
}
