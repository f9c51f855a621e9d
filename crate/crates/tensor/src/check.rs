//! Verification oracles.
//!
//! Everything here is deliberately independent of the kernels it checks:
//! gradients come from central finite differences, singular values from a
//! one-sided Jacobi sweep, and the Adam trace from a direct transcription of
//! the update equations over plain `f64` vectors. Test code and the `verify`
//! command call into this module; the training path never does.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let up = f(&xp);
        xp[i] = orig - h;
        let down = f(&xp);
        xp[i] = orig;
        g.push((up - down) / (2.0 * h));
    }
    g
}

/// Relative error between two vectors: `|a - b|_2 / (|a|_2 + |b|_2 + tiny)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "rel_err: length mismatch");
    let mut diff = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    diff.sqrt() / (na.sqrt() + nb.sqrt() + 1e-12)
}

/// Singular values of `a` (any rank, flattened to `[rows, rest]`), descending.
///
/// One-sided Jacobi: rotate column pairs of a working copy until all pairs
/// are orthogonal; column norms are then the singular values.
pub fn jacobi_singular_values<T: Scalar>(a: &Tensor<T>) -> Vec<f64> {
    let rows = a.shape()[0];
    let cols: usize = a.shape()[1..].iter().product();
    // Work on the side that keeps columns long: if rows < cols, transpose
    // (singular values are shared).
    let (m, n, data) = if rows >= cols {
        (rows, cols, a.to_f64_vec())
    } else {
        let src = a.to_f64_vec();
        let mut t = vec![0.0f64; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = src[r * cols + c];
            }
        }
        (cols, rows, t)
    };
    // Column-major working copy.
    let mut col = vec![0.0f64; m * n];
    for r in 0..m {
        for c in 0..n {
            col[c * m + r] = data[r * n + c];
        }
    }
    let eps = 1e-14;
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let (mut app, mut aqq, mut apq) = (0.0, 0.0, 0.0);
                for r in 0..m {
                    let x = col[p * m + r];
                    let y = col[q * m + r];
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                if apq.abs() <= eps * (app * aqq).sqrt() {
                    continue;
                }
                off += apq.abs();
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let x = col[p * m + r];
                    let y = col[q * m + r];
                    col[p * m + r] = c * x - s * y;
                    col[q * m + r] = s * x + c * y;
                }
            }
        }
        if off <= 1e-15 {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..n)
        .map(|c| (0..m).map(|r| col[c * m + r] * col[c * m + r]).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

/// Reference Adam trajectory in plain f64: starts at `w0` with zero moments,
/// consumes `grads[t]` at step `t+1`, returns the parameter after each step.
pub fn adam_reference_trace(
    w0: &[f64],
    grads: &[Vec<f64>],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Vec<Vec<f64>> {
    let mut w = w0.to_vec();
    let mut m = vec![0.0f64; w0.len()];
    let mut v = vec![0.0f64; w0.len()];
    let mut out = Vec::with_capacity(grads.len());
    for (t, g) in grads.iter().enumerate() {
        assert_eq!(g.len(), w.len());
        let step = (t + 1) as i32;
        for i in 0..w.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / (1.0 - beta1.powi(step));
            let v_hat = v[i] / (1.0 - beta2.powi(step));
            w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        out.push(w.clone());
    }
    out
}
