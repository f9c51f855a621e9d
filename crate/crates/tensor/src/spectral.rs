//! Spectral normalization by power iteration.
//!
//! A matrix parameter `W` (higher ranks are flattened to `[rows, rest]`) is
//! reparameterized as `W / sigma_hat` where `sigma_hat = u^T W v` comes from
//! power iteration on a persistent left-singular estimate `u`. The gradient
//! treats `u` and `v` as constants.

use crate::scalar::Scalar;
use crate::store::{ParamId, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Persistent `u` vectors, one per normalized parameter.
pub struct SpectralState<T> {
    entries: Vec<(ParamId, Tensor<T>)>,
    seed: u64,
}

/// Detached snapshot used to build tape nodes for one optimizer step.
#[derive(Clone)]
pub struct SpectralSnapshot<T> {
    pub u: Tensor<T>,
    pub v: Tensor<T>,
    pub sigma: T,
}

impl<T: Scalar> SpectralState<T> {
    pub fn new(seed: u64) -> Self {
        SpectralState { entries: Vec::new(), seed }
    }

    fn u_mut(&mut self, id: ParamId, rows: usize) -> &mut Tensor<T> {
        if let Some(pos) = self.entries.iter().position(|(pid, _)| *pid == id) {
            return &mut self.entries[pos].1;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ ((id.0 as u64) << 32 | 0x5bd1e995));
        let mut u = Tensor::zeros(&[rows]);
        for v in u.data_mut() {
            *v = T::from_f64(rng.gen_range(-1.0..1.0));
        }
        normalize(&mut u);
        self.entries.push((id, u));
        &mut self.entries.last_mut().unwrap().1
    }

    /// Run `iters` power iterations against the current value of `id`,
    /// updating the persistent `u`, and return the detached snapshot.
    pub fn update(
        &mut self,
        store: &ParameterStore<T>,
        id: ParamId,
        iters: usize,
    ) -> SpectralSnapshot<T> {
        let w = store.value(id);
        let rows = w.shape()[0];
        let u = self.u_mut(id, rows);
        let (sigma, v) = power_iterate(w, u, iters);
        SpectralSnapshot { u: u.clone(), v, sigma }
    }

    /// Snapshot without mutating the persistent state; used at evaluation
    /// time, where a sharper estimate (more iterations) is wanted but the
    /// training state must stay untouched.
    pub fn peek(
        &mut self,
        store: &ParameterStore<T>,
        id: ParamId,
        iters: usize,
    ) -> SpectralSnapshot<T> {
        let w = store.value(id);
        let rows = w.shape()[0];
        let mut u = self.u_mut(id, rows).clone();
        let (sigma, v) = power_iterate(w, &mut u, iters);
        SpectralSnapshot { u, v, sigma }
    }
}

/// `iters` rounds of `v <- normalize(W^T u)`, `u <- normalize(W v)`, then
/// `sigma_hat = u^T W v`. A zero (or numerically zero) matrix leaves `u`
/// unchanged and reports `sigma_hat = 0`.
pub fn power_iterate<T: Scalar>(w: &Tensor<T>, u: &mut Tensor<T>, iters: usize) -> (T, Tensor<T>) {
    let rows = w.shape()[0];
    let cols: usize = w.shape()[1..].iter().product();
    assert_eq!(u.numel(), rows, "power_iterate: u length");
    assert!(iters >= 1, "power_iterate: need at least one iteration");
    let wd = w.data();
    let mut v = Tensor::zeros(&[cols]);
    for _ in 0..iters {
        // v = W^T u
        for x in v.data_mut() {
            *x = T::zero();
        }
        for (r, &uv) in u.data().iter().enumerate() {
            let row = &wd[r * cols..(r + 1) * cols];
            for (x, &wv) in v.data_mut().iter_mut().zip(row) {
                *x += wv * uv;
            }
        }
        if !normalize(&mut v) {
            return (T::zero(), v);
        }
        // u = W v
        for (r, uv) in u.data_mut().iter_mut().enumerate() {
            let row = &wd[r * cols..(r + 1) * cols];
            let mut s = T::zero();
            for (&wv, &vv) in row.iter().zip(v.data()) {
                s += wv * vv;
            }
            *uv = s;
        }
        if !normalize(u) {
            return (T::zero(), v);
        }
    }
    let mut sigma = T::zero();
    for (r, &uv) in u.data().iter().enumerate() {
        let row = &wd[r * cols..(r + 1) * cols];
        let mut s = T::zero();
        for (&wv, &vv) in row.iter().zip(v.data()) {
            s += wv * vv;
        }
        sigma += uv * s;
    }
    (sigma, v)
}

fn normalize<T: Scalar>(x: &mut Tensor<T>) -> bool {
    let n = T::from_f64(x.sq_norm().sqrt());
    if n <= T::from_f64(1e-30) {
        return false;
    }
    for v in x.data_mut() {
        *v = *v / n;
    }
    true
}

/// Value-level normalization: `(W / sigma_hat, updated state handled by
/// caller)`. A zero sigma estimate returns `W` unchanged.
pub fn spectral_normalize<T: Scalar>(w: &Tensor<T>, u: &mut Tensor<T>, iters: usize) -> Tensor<T> {
    let (sigma, _) = power_iterate(w, u, iters);
    if sigma <= T::from_f64(1e-12) {
        return w.clone();
    }
    w.map(|x| x / sigma)
}

/// Tape node for the reparameterized weight. Falls back to the raw weight
/// when the sigma estimate is numerically zero.
pub fn apply_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    w: Var,
    snap: &SpectralSnapshot<T>,
) -> Var {
    if snap.sigma <= T::from_f64(1e-12) {
        return w;
    }
    tape.spectral_scale(w, snap.u.clone(), snap.v.clone(), snap.sigma)
}
