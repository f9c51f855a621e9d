//! Wengert-list reverse-mode autodiff.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! push a node and return a [`Var`] handle; [`Tape::backward`] walks the list
//! in reverse and returns per-node gradients. Gradient accumulation across
//! examples happens outside the tape, keyed by parameter id, so a tape is
//! cheap to build and drop per example.

use crate::kernels::{col2im_acc, conv_out_extent, im2col};
use crate::scalar::Scalar;
use crate::store::{ParamId, ParameterStore};
use crate::tensor::Tensor;
use std::sync::Arc;

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) u32);

#[derive(Debug, thiserror::Error)]
pub enum TapeError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

enum Value<T> {
    Owned(Tensor<T>),
    Shared(Arc<Tensor<T>>),
}

impl<T: Scalar> Value<T> {
    #[inline]
    fn get(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Shared(t) => t,
        }
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    MaxElem(Var, Var),
    Clip { x: Var, lo: T, hi: T },
    Linear { x: Var, w: Var, bias: Option<Var> },
    Embedding { table: Var, ids: Vec<u32> },
    NarrowCols { x: Var, start: usize, len: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    RepeatRows { x: Var, times: usize },
    SoftmaxRows(Var),
    MaskedLogSoftmaxRows { x: Var, mask: Vec<bool> },
    PickPerRow { x: Var, idx: Vec<u32> },
    SumAll(Var),
    WeightedSumRows { probs: Var, values: Var },
    RowScale { x: Var, s: Var },
    Conv2d { x: Var, w: Var, bias: Var, stride: usize, pad: usize, cols: Vec<Tensor<T>> },
    Film { x: Var, gamma: Var, beta: Var },
    CumsumLeft(Var),
    CumsumDown(Var),
    MaxPoolSpatial { x: Var, arg: Vec<u32> },
    CrossEntropyMean { logits: Var, labels: Vec<u32>, softmax: Tensor<T> },
    CrossEntropySumMasked { logits: Var, labels: Vec<u32>, active: Vec<bool>, softmax: Tensor<T> },
    SpectralScale { w: Var, u: Tensor<T>, v: Tensor<T>, sigma: T },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    /// Parameter leaves bound on this tape, for gradient harvesting.
    bindings: Vec<(ParamId, Var)>,
    /// When false, ops skip caches that only backward needs.
    record: bool,
}

/// Per-node gradients produced by one backward sweep.
pub struct Grads<T> {
    g: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.g[v.0 as usize].take()
    }

    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.g[v.0 as usize].as_ref()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Off-store gradient buffer keyed by parameter id. Worker chunks fill their
/// own accumulator from per-example tapes; merging in a fixed chunk order
/// keeps the final sum independent of thread scheduling.
pub struct GradAccum<T: Scalar> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> GradAccum<T> {
    pub fn new(n_params: usize) -> Self {
        let mut slots = Vec::with_capacity(n_params);
        slots.resize_with(n_params, || None);
        GradAccum { slots }
    }

    /// Pull every bound parameter's gradient out of a finished backward pass.
    pub fn absorb(&mut self, tape: &Tape<T>, grads: &mut Grads<T>) {
        for &(pid, var) in tape.bindings() {
            if let Some(g) = grads.take(var) {
                match &mut self.slots[pid.0 as usize] {
                    Some(t) => t.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
    }

    pub fn merge(&mut self, other: GradAccum<T>) {
        assert_eq!(self.slots.len(), other.slots.len(), "grad accum size mismatch");
        for (dst, src) in self.slots.iter_mut().zip(other.slots) {
            match (dst.as_mut(), src) {
                (Some(t), Some(s)) => t.add_assign(&s),
                (None, Some(s)) => *dst = Some(s),
                _ => {}
            }
        }
    }

    /// Flush into the store's gradient buffers, consuming the accumulator.
    pub fn apply(self, store: &mut ParameterStore<T>) {
        for (i, slot) in self.slots.into_iter().enumerate() {
            if let Some(g) = slot {
                store.accumulate_grad(ParamId(i as u32), &g);
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(64), bindings: Vec::new(), record: true }
    }

    /// Forward-only tape: skips backward-only caches (conv patch matrices).
    pub fn forward_only() -> Self {
        Tape { nodes: Vec::with_capacity(64), bindings: Vec::new(), record: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0 as usize].value.get()
    }

    pub fn bindings(&self) -> &[(ParamId, Var)] {
        &self.bindings
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op });
        Var((self.nodes.len() - 1) as u32)
    }

    /// Constant leaf; receives a gradient slot but no parameter binding.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Bind a parameter as a leaf. The tensor is shared, not copied, and the
    /// binding is recorded so callers can harvest its gradient after backward.
    pub fn param(&mut self, store: &ParameterStore<T>, id: ParamId) -> Var {
        self.nodes.push(Node { value: Value::Shared(store.value_arc(id)), op: Op::Leaf });
        let v = Var((self.nodes.len() - 1) as u32);
        self.bindings.push((id, v));
        v
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn assert_same_shape(&self, op: &'static str, a: Var, b: Var) {
        assert_eq!(self.shape(a), self.shape(b), "{op}: operand shapes differ");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape("add", a, b);
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape("sub", a, b);
        let mut out = self.value(a).clone();
        out.add_scaled(self.value(b), -T::one());
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape("mul", a, b);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(self.shape(a), data);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a))
    }

    /// Elementwise max; ties route the gradient to the first operand.
    pub fn max_elem(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape("max_elem", a, b);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| if x >= y { x } else { y })
            .collect();
        let out = Tensor::from_vec(self.shape(a), data);
        self.push(out, Op::MaxElem(a, b))
    }

    /// Clamp to `[lo, hi]`; gradient is 1 inside the interval, 0 outside.
    pub fn clip(&mut self, x: Var, lo: T, hi: T) -> Var {
        assert!(lo <= hi, "clip: lo > hi");
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clip { x, lo, hi })
    }

    /// `x[N,in] * w[out,in]^T (+ bias[out])`. Weights live in `[out, in]`
    /// layout so the leading extent is the output dimension.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let (n, d_in) = {
            let s = self.shape(x);
            assert_eq!(s.len(), 2, "linear: x must be 2-d, got {s:?}");
            (s[0], s[1])
        };
        let (d_out, w_in) = {
            let s = self.shape(w);
            assert_eq!(s.len(), 2, "linear: w must be 2-d, got {s:?}");
            (s[0], s[1])
        };
        assert_eq!(d_in, w_in, "linear: x has {d_in} features, w wants {w_in}");
        if let Some(b) = bias {
            assert_eq!(self.shape(b), &[d_out], "linear: bias shape");
        }
        let mut out = Tensor::zeros(&[n, d_out]);
        unsafe {
            T::gemm(
                n,
                d_in,
                d_out,
                T::one(),
                self.value(x).data().as_ptr(),
                d_in as isize,
                1,
                self.value(w).data().as_ptr(),
                1,
                d_in as isize,
                T::zero(),
                out.data_mut().as_mut_ptr(),
                d_out as isize,
                1,
            );
        }
        if let Some(b) = bias {
            let bd = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_mut(d_out) {
                for (o, &bv) in row.iter_mut().zip(&bd) {
                    *o += bv;
                }
            }
        }
        self.push(out, Op::Linear { x, w, bias })
    }

    /// Gather rows of `table[V,E]` at `ids`, producing `[ids.len(), E]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Var {
        let (v, e) = {
            let s = self.shape(table);
            assert_eq!(s.len(), 2, "embedding: table must be 2-d");
            (s[0], s[1])
        };
        let mut out = Tensor::zeros(&[ids.len(), e]);
        for (n, &id) in ids.iter().enumerate() {
            assert!((id as usize) < v, "embedding: id {id} out of range {v}");
            let src = &self.value(table).data()[id as usize * e..(id as usize + 1) * e];
            out.data_mut()[n * e..(n + 1) * e].copy_from_slice(src);
        }
        self.push(out, Op::Embedding { table, ids: ids.to_vec() })
    }

    /// Columns `[start, start+len)` of a `[N, D]` tensor.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, d) = {
            let s = self.shape(x);
            assert_eq!(s.len(), 2, "narrow_cols: x must be 2-d");
            (s[0], s[1])
        };
        assert!(start + len <= d, "narrow_cols: {start}+{len} > {d}");
        let mut out = Tensor::zeros(&[n, len]);
        for r in 0..n {
            out.data_mut()[r * len..(r + 1) * len]
                .copy_from_slice(&self.value(x).data()[r * d + start..r * d + start + len]);
        }
        self.push(out, Op::NarrowCols { x, start, len })
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat: no parts");
        let base = self.shape(parts[0]).to_vec();
        assert!(axis < base.len(), "concat: axis {axis} out of rank {}", base.len());
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), base.len(), "concat: rank mismatch");
            for (i, (&a, &b)) in s.iter().zip(&base).enumerate() {
                if i != axis {
                    assert_eq!(a, b, "concat: extent {i} differs");
                }
            }
            axis_total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let mut out = Tensor::zeros(&shape);
        let out_stride = axis_total * inner;
        let mut offset = 0usize;
        for &p in parts {
            let alen = self.shape(p)[axis];
            let block = alen * inner;
            let src = self.value(p).data();
            for o in 0..outer {
                out.data_mut()[o * out_stride + offset..o * out_stride + offset + block]
                    .copy_from_slice(&src[o * block..(o + 1) * block]);
            }
            offset += block;
        }
        self.push(out, Op::Concat { parts: parts.to_vec(), axis })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshaped(shape);
        self.push(out, Op::Reshape(x))
    }

    /// Repeat each row of `[B, D]` `times` times: row `b*times + t` = row `b`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let (b, d) = {
            let s = self.shape(x);
            assert_eq!(s.len(), 2, "repeat_rows: x must be 2-d");
            (s[0], s[1])
        };
        let mut out = Tensor::zeros(&[b * times, d]);
        for r in 0..b {
            let src = &self.value(x).data()[r * d..(r + 1) * d];
            for t in 0..times {
                out.data_mut()[(r * times + t) * d..(r * times + t + 1) * d].copy_from_slice(src);
            }
        }
        self.push(out, Op::RepeatRows { x, times })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 2, "softmax_rows: x must be 2-d");
        let (n, k) = (s[0], s[1]);
        let mut out = Tensor::zeros(&[n, k]);
        for r in 0..n {
            let row = &self.value(x).data()[r * k..(r + 1) * k];
            softmax_into(row, &mut out.data_mut()[r * k..(r + 1) * k]);
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    /// Row-wise log-softmax restricted to `mask`-allowed entries. Masked
    /// entries are set to a large negative constant (no gradient). Each row
    /// must keep at least one allowed entry.
    pub fn masked_log_softmax_rows(&mut self, x: Var, mask: &[bool]) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 2, "masked_log_softmax_rows: x must be 2-d");
        let (n, k) = (s[0], s[1]);
        assert_eq!(mask.len(), n * k, "masked_log_softmax_rows: mask length");
        let mut out = Tensor::zeros(&[n, k]);
        let neg = T::from_f64(MASKED_LOGPROB);
        for r in 0..n {
            let row = &self.value(x).data()[r * k..(r + 1) * k];
            let m = &mask[r * k..(r + 1) * k];
            assert!(m.iter().any(|&b| b), "masked_log_softmax_rows: row {r} fully masked");
            let mut mx = T::neg_infinity();
            for (v, &keep) in row.iter().zip(m) {
                if keep && *v > mx {
                    mx = *v;
                }
            }
            let mut z = T::zero();
            for (v, &keep) in row.iter().zip(m) {
                if keep {
                    z += (*v - mx).exp();
                }
            }
            let logz = z.ln() + mx;
            let dst = &mut out.data_mut()[r * k..(r + 1) * k];
            for ((d, v), &keep) in dst.iter_mut().zip(row).zip(m) {
                *d = if keep { *v - logz } else { neg };
            }
        }
        self.push(out, Op::MaskedLogSoftmaxRows { x, mask: mask.to_vec() })
    }

    /// `out[n] = x[n, idx[n]]` as a `[N]` tensor.
    pub fn pick_per_row(&mut self, x: Var, idx: &[u32]) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 2, "pick_per_row: x must be 2-d");
        let (n, k) = (s[0], s[1]);
        assert_eq!(idx.len(), n, "pick_per_row: idx length");
        let mut out = Tensor::zeros(&[n]);
        for (r, &i) in idx.iter().enumerate() {
            assert!((i as usize) < k, "pick_per_row: idx {i} out of range {k}");
            out.data_mut()[r] = self.value(x).data()[r * k + i as usize];
        }
        self.push(out, Op::PickPerRow { x, idx: idx.to_vec() })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), Op::SumAll(x))
    }

    /// Attention read: `out[b] = sum_t probs[b,t] * values[b*T + t]`.
    pub fn weighted_sum_rows(&mut self, probs: Var, values: Var) -> Var {
        let (b, t) = {
            let s = self.shape(probs);
            assert_eq!(s.len(), 2, "weighted_sum_rows: probs must be 2-d");
            (s[0], s[1])
        };
        let (rows, d) = {
            let s = self.shape(values);
            assert_eq!(s.len(), 2, "weighted_sum_rows: values must be 2-d");
            (s[0], s[1])
        };
        assert_eq!(rows, b * t, "weighted_sum_rows: values rows {rows} != {b}*{t}");
        let mut out = Tensor::zeros(&[b, d]);
        for bi in 0..b {
            let dst = &mut out.data_mut()[bi * d..(bi + 1) * d];
            for ti in 0..t {
                let p = self.value(probs).data()[bi * t + ti];
                let src = &self.value(values).data()[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += p * v;
                }
            }
        }
        self.push(out, Op::WeightedSumRows { probs, values })
    }

    /// Scale each row of `x[N,D]` by the matching entry of `s[N,1]`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Var {
        let (n, d) = {
            let sh = self.shape(x);
            assert_eq!(sh.len(), 2, "row_scale: x must be 2-d");
            (sh[0], sh[1])
        };
        assert_eq!(self.shape(s), &[n, 1], "row_scale: s must be [N,1]");
        let mut out = Tensor::zeros(&[n, d]);
        for r in 0..n {
            let sv = self.value(s).data()[r];
            let src = &self.value(x).data()[r * d..(r + 1) * d];
            for (o, &v) in out.data_mut()[r * d..(r + 1) * d].iter_mut().zip(src) {
                *o = v * sv;
            }
        }
        self.push(out, Op::RowScale { x, s })
    }

    /// Batched 2-d convolution: `x[N,C,H,W] * w[O,C,kh,kw] + bias[O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TapeError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(TapeError::Shape {
                op: "conv2d",
                detail: format!("want 4-d input and kernel, got {xs:?} and {ws:?}"),
            });
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c {
            return Err(TapeError::Shape {
                op: "conv2d",
                detail: format!("input has {c} channels, kernel wants {wc}"),
            });
        }
        if self.shape(bias) != [o] {
            return Err(TapeError::Shape {
                op: "conv2d",
                detail: format!("bias shape {:?}, want [{o}]", self.shape(bias)),
            });
        }
        if stride == 0 || kh == 0 || kw == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(TapeError::Shape {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} stride {stride} pad {pad} does not fit {h}x{wd}"),
            });
        }
        let oh = conv_out_extent(h, kh, stride, pad);
        let ow = conv_out_extent(wd, kw, stride, pad);
        let ckk = c * kh * kw;
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        let mut saved = Vec::new();
        let mut cols = Tensor::zeros(&[ckk, oh * ow]);
        for ni in 0..n {
            let img = &self.value(x).data()[ni * c * h * wd..(ni + 1) * c * h * wd];
            im2col(img, c, h, wd, kh, kw, stride, pad, cols.data_mut());
            unsafe {
                T::gemm(
                    o,
                    ckk,
                    oh * ow,
                    T::one(),
                    self.value(w).data().as_ptr(),
                    ckk as isize,
                    1,
                    cols.data().as_ptr(),
                    (oh * ow) as isize,
                    1,
                    T::zero(),
                    out.data_mut()[ni * o * oh * ow..].as_mut_ptr(),
                    (oh * ow) as isize,
                    1,
                );
            }
            let plane = &mut out.data_mut()[ni * o * oh * ow..(ni + 1) * o * oh * ow];
            for oi in 0..o {
                let bv = self.value(bias).data()[oi];
                for v in &mut plane[oi * oh * ow..(oi + 1) * oh * ow] {
                    *v += bv;
                }
            }
            if self.record {
                saved.push(cols.clone());
            }
        }
        Ok(self.push(out, Op::Conv2d { x, w, bias, stride, pad, cols: saved }))
    }

    /// Feature-wise affine: `out[n,c,:,:] = gamma[c] * x[n,c,:,:] + beta[c]`.
    pub fn film(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "film: x must be [N,C,H,W]");
        let c = xs[1];
        assert_eq!(self.shape(gamma), &[c], "film: gamma shape");
        assert_eq!(self.shape(beta), &[c], "film: beta shape");
        let hw = xs[2] * xs[3];
        let mut out = Tensor::zeros(&xs);
        for ni in 0..xs[0] {
            for ci in 0..c {
                let g = self.value(gamma).data()[ci];
                let b = self.value(beta).data()[ci];
                let base = (ni * c + ci) * hw;
                let src = &self.value(x).data()[base..base + hw];
                for (o, &v) in out.data_mut()[base..base + hw].iter_mut().zip(src) {
                    *o = g * v + b;
                }
            }
        }
        self.push(out, Op::Film { x, gamma, beta })
    }

    /// Inclusive left-to-right cumulative sum along W of `[N,C,H,W]`.
    pub fn cumsum_left(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "cumsum_left: x must be [N,C,H,W]");
        let w = xs[3];
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(w) {
            for j in 1..w {
                row[j] = row[j] + row[j - 1];
            }
        }
        self.push(out, Op::CumsumLeft(x))
    }

    /// Inclusive top-to-bottom cumulative sum along H of `[N,C,H,W]`.
    pub fn cumsum_down(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "cumsum_down: x must be [N,C,H,W]");
        let (h, w) = (xs[2], xs[3]);
        let mut out = self.value(x).clone();
        for plane in out.data_mut().chunks_mut(h * w) {
            for i in 1..h {
                for j in 0..w {
                    plane[i * w + j] = plane[i * w + j] + plane[(i - 1) * w + j];
                }
            }
        }
        self.push(out, Op::CumsumDown(x))
    }

    /// Global spatial max pool `[N,C,H,W] -> [N,C]`; ties keep the first
    /// position in row-major order.
    pub fn max_pool_spatial(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "max_pool_spatial: x must be [N,C,H,W]");
        let hw = xs[2] * xs[3];
        let mut out = Tensor::zeros(&[xs[0], xs[1]]);
        let mut arg = Vec::with_capacity(xs[0] * xs[1]);
        for (nc, plane) in self.value(x).data().chunks(hw).enumerate() {
            let mut best = 0usize;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = i;
                }
            }
            out.data_mut()[nc] = plane[best];
            arg.push(best as u32);
        }
        self.push(out, Op::MaxPoolSpatial { x, arg })
    }

    /// Mean cross-entropy over rows of `logits[N,K]` against integer labels.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[u32]) -> Result<Var, TapeError> {
        let (n, k) = self.ce_check(logits, labels)?;
        let (loss_sum, softmax) = self.ce_forward(logits, labels, n, k, None);
        let loss = loss_sum / T::from_f64(n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyMean { logits, labels: labels.to_vec(), softmax },
        ))
    }

    /// Summed cross-entropy over the rows where `active` is true. Used for
    /// teacher forcing, where padded positions must not contribute.
    pub fn cross_entropy_sum_masked(
        &mut self,
        logits: Var,
        labels: &[u32],
        active: &[bool],
    ) -> Result<Var, TapeError> {
        let (n, k) = self.ce_check(logits, labels)?;
        assert_eq!(active.len(), n, "cross_entropy_sum_masked: active length");
        let (loss_sum, softmax) = self.ce_forward(logits, labels, n, k, Some(active));
        Ok(self.push(
            Tensor::scalar(loss_sum),
            Op::CrossEntropySumMasked {
                logits,
                labels: labels.to_vec(),
                active: active.to_vec(),
                softmax,
            },
        ))
    }

    fn ce_check(&self, logits: Var, labels: &[u32]) -> Result<(usize, usize), TapeError> {
        let s = self.shape(logits);
        if s.len() != 2 {
            return Err(TapeError::Shape {
                op: "cross_entropy",
                detail: format!("logits must be 2-d, got {s:?}"),
            });
        }
        let (n, k) = (s[0], s[1]);
        if labels.len() != n {
            return Err(TapeError::Shape {
                op: "cross_entropy",
                detail: format!("{n} rows but {} labels", labels.len()),
            });
        }
        for &l in labels {
            if l as usize >= k {
                return Err(TapeError::LabelOutOfRange { label: l as usize, classes: k });
            }
        }
        Ok((n, k))
    }

    fn ce_forward(
        &self,
        logits: Var,
        labels: &[u32],
        n: usize,
        k: usize,
        active: Option<&[bool]>,
    ) -> (T, Tensor<T>) {
        let mut softmax = Tensor::zeros(&[n, k]);
        let mut loss_sum = T::zero();
        for r in 0..n {
            let row = &self.value(logits).data()[r * k..(r + 1) * k];
            let dst = &mut softmax.data_mut()[r * k..(r + 1) * k];
            // loss = -log p[label] = max + ln Z - logit[label]; stays finite
            // for any finite logits, unlike ln of a saturated softmax entry.
            let (mx, ln_z) = softmax_into(row, dst);
            if active.map_or(true, |a| a[r]) {
                loss_sum += mx + ln_z - row[labels[r] as usize];
            }
        }
        (loss_sum, softmax)
    }

    /// Divide `w` by the spectral-norm estimate `sigma = u^T W v`, where `u`
    /// and `v` are detached power-iteration vectors over the `[rows, cols]`
    /// flattening of `w` (leading extent = rows).
    pub fn spectral_scale(&mut self, w: Var, u: Tensor<T>, v: Tensor<T>, sigma: T) -> Var {
        let rows = self.shape(w)[0];
        let cols: usize = self.shape(w)[1..].iter().product();
        assert_eq!(u.numel(), rows, "spectral_scale: u length");
        assert_eq!(v.numel(), cols, "spectral_scale: v length");
        assert!(sigma > T::zero(), "spectral_scale: sigma must be positive");
        let out = self.value(w).map(|x| x / sigma);
        self.push(out, Op::SpectralScale { w, u, v, sigma })
    }

    /// Reverse sweep from scalar seed nodes. Each `(var, coeff)` seeds
    /// `d(out)/d(var) = coeff`; every seed must be a single-element node.
    pub fn backward(&self, seeds: &[(Var, T)]) -> Grads<T> {
        assert!(self.record, "backward on a forward-only tape");
        let mut g: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        g.resize_with(self.nodes.len(), || None);
        for &(v, c) in seeds {
            let val = self.value(v);
            assert_eq!(val.numel(), 1, "backward seed must be scalar, got {:?}", val.shape());
            match &mut g[v.0 as usize] {
                Some(t) => t.data_mut()[0] += c,
                slot => *slot = Some(Tensor::from_vec(val.shape(), vec![c])),
            }
        }
        for i in (0..self.nodes.len()).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let gi = match g[i].take() {
                Some(t) => t,
                None => continue,
            };
            self.propagate(i, &gi, &mut g);
        }
        Grads { g }
    }

    fn propagate(&self, i: usize, gi: &Tensor<T>, g: &mut [Option<Tensor<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(g, *a, self.shape(*a)).add_assign(gi);
                acc(g, *b, self.shape(*b)).add_assign(gi);
            }
            Op::Sub(a, b) => {
                acc(g, *a, self.shape(*a)).add_assign(gi);
                acc(g, *b, self.shape(*b)).add_scaled(gi, -T::one());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                {
                    let da = acc(g, *a, self.shape(*a));
                    for ((d, &gv), &bv) in da.data_mut().iter_mut().zip(gi.data()).zip(vb.data()) {
                        *d += gv * bv;
                    }
                }
                let db = acc(g, *b, self.shape(*b));
                for ((d, &gv), &av) in db.data_mut().iter_mut().zip(gi.data()).zip(va.data()) {
                    *d += gv * av;
                }
            }
            Op::Scale(a, c) => acc(g, *a, self.shape(*a)).add_scaled(gi, *c),
            Op::Relu(a) => {
                let y = self.value(Var(i as u32));
                let da = acc(g, *a, self.shape(*a));
                for ((d, &gv), &yv) in da.data_mut().iter_mut().zip(gi.data()).zip(y.data()) {
                    if yv > T::zero() {
                        *d += gv;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = self.value(Var(i as u32));
                let da = acc(g, *a, self.shape(*a));
                for ((d, &gv), &yv) in da.data_mut().iter_mut().zip(gi.data()).zip(y.data()) {
                    *d += gv * yv * (T::one() - yv);
                }
            }
            Op::Tanh(a) => {
                let y = self.value(Var(i as u32));
                let da = acc(g, *a, self.shape(*a));
                for ((d, &gv), &yv) in da.data_mut().iter_mut().zip(gi.data()).zip(y.data()) {
                    *d += gv * (T::one() - yv * yv);
                }
            }
            Op::MaxElem(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                {
                    let da = acc(g, *a, self.shape(*a));
                    for (((d, &gv), &x), &y) in
                        da.data_mut().iter_mut().zip(gi.data()).zip(va.data()).zip(vb.data())
                    {
                        if x >= y {
                            *d += gv;
                        }
                    }
                }
                let db = acc(g, *b, self.shape(*b));
                for (((d, &gv), &x), &y) in
                    db.data_mut().iter_mut().zip(gi.data()).zip(va.data()).zip(vb.data())
                {
                    if x < y {
                        *d += gv;
                    }
                }
            }
            Op::Clip { x, lo, hi } => {
                let vx = self.value(*x);
                let dx = acc(g, *x, self.shape(*x));
                for ((d, &gv), &xv) in dx.data_mut().iter_mut().zip(gi.data()).zip(vx.data()) {
                    if xv >= *lo && xv <= *hi {
                        *d += gv;
                    }
                }
            }
            Op::Linear { x, w, bias } => {
                let (n, d_in) = (self.shape(*x)[0], self.shape(*x)[1]);
                let d_out = self.shape(*w)[0];
                // dX[n,in] += g[n,out] * W[out,in]
                unsafe {
                    let wp = self.value(*w).data().as_ptr();
                    let dx = acc(g, *x, &[n, d_in]);
                    T::gemm(
                        n,
                        d_out,
                        d_in,
                        T::one(),
                        gi.data().as_ptr(),
                        d_out as isize,
                        1,
                        wp,
                        d_in as isize,
                        1,
                        T::one(),
                        dx.data_mut().as_mut_ptr(),
                        d_in as isize,
                        1,
                    );
                }
                // dW[out,in] += g^T[out,n] * X[n,in]
                unsafe {
                    let xp = self.value(*x).data().as_ptr();
                    let dw = acc(g, *w, &[d_out, d_in]);
                    T::gemm(
                        d_out,
                        n,
                        d_in,
                        T::one(),
                        gi.data().as_ptr(),
                        1,
                        d_out as isize,
                        xp,
                        d_in as isize,
                        1,
                        T::one(),
                        dw.data_mut().as_mut_ptr(),
                        d_in as isize,
                        1,
                    );
                }
                if let Some(b) = bias {
                    let db = acc(g, *b, &[d_out]);
                    for row in gi.data().chunks(d_out) {
                        for (d, &gv) in db.data_mut().iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let e = self.shape(*table)[1];
                let vshape = self.shape(*table).to_vec();
                let dt = acc(g, *table, &vshape);
                for (n, &id) in ids.iter().enumerate() {
                    let dst = &mut dt.data_mut()[id as usize * e..(id as usize + 1) * e];
                    for (d, &gv) in dst.iter_mut().zip(&gi.data()[n * e..(n + 1) * e]) {
                        *d += gv;
                    }
                }
            }
            Op::NarrowCols { x, start, len } => {
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dx = acc(g, *x, &[n, d]);
                for r in 0..n {
                    let dst = &mut dx.data_mut()[r * d + start..r * d + start + len];
                    for (dv, &gv) in dst.iter_mut().zip(&gi.data()[r * len..(r + 1) * len]) {
                        *dv += gv;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.shape(Var(i as u32)).to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let out_stride = out_shape[*axis] * inner;
                let mut offset = 0usize;
                for &p in parts {
                    let alen = self.shape(p)[*axis];
                    let block = alen * inner;
                    let pshape = self.shape(p).to_vec();
                    let dp = acc(g, p, &pshape);
                    for o in 0..outer {
                        let src = &gi.data()[o * out_stride + offset..o * out_stride + offset + block];
                        for (d, &gv) in dp.data_mut()[o * block..(o + 1) * block].iter_mut().zip(src)
                        {
                            *d += gv;
                        }
                    }
                    offset += block;
                }
            }
            Op::Reshape(x) => {
                let xshape = self.shape(*x).to_vec();
                let dx = acc(g, *x, &xshape);
                for (d, &gv) in dx.data_mut().iter_mut().zip(gi.data()) {
                    *d += gv;
                }
            }
            Op::RepeatRows { x, times } => {
                let (b, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dx = acc(g, *x, &[b, d]);
                for r in 0..b {
                    for t in 0..*times {
                        let src = &gi.data()[(r * times + t) * d..(r * times + t + 1) * d];
                        for (dv, &gv) in dx.data_mut()[r * d..(r + 1) * d].iter_mut().zip(src) {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let s = self.value(Var(i as u32));
                let (n, k) = (s.shape()[0], s.shape()[1]);
                let dx = acc(g, *x, &[n, k]);
                for r in 0..n {
                    let srow = &s.data()[r * k..(r + 1) * k];
                    let grow = &gi.data()[r * k..(r + 1) * k];
                    let mut dot = T::zero();
                    for (&gv, &sv) in grow.iter().zip(srow) {
                        dot += gv * sv;
                    }
                    for ((dv, &gv), &sv) in
                        dx.data_mut()[r * k..(r + 1) * k].iter_mut().zip(grow).zip(srow)
                    {
                        *dv += sv * (gv - dot);
                    }
                }
            }
            Op::MaskedLogSoftmaxRows { x, mask } => {
                let ls = self.value(Var(i as u32));
                let (n, k) = (ls.shape()[0], ls.shape()[1]);
                let dx = acc(g, *x, &[n, k]);
                for r in 0..n {
                    let lrow = &ls.data()[r * k..(r + 1) * k];
                    let grow = &gi.data()[r * k..(r + 1) * k];
                    let m = &mask[r * k..(r + 1) * k];
                    let mut gsum = T::zero();
                    for (&gv, &keep) in grow.iter().zip(m) {
                        if keep {
                            gsum += gv;
                        }
                    }
                    for (j, (dv, &gv)) in
                        dx.data_mut()[r * k..(r + 1) * k].iter_mut().zip(grow).enumerate()
                    {
                        if m[j] {
                            *dv += gv - lrow[j].exp() * gsum;
                        }
                    }
                }
            }
            Op::PickPerRow { x, idx } => {
                let (n, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dx = acc(g, *x, &[n, k]);
                for (r, &j) in idx.iter().enumerate() {
                    dx.data_mut()[r * k + j as usize] += gi.data()[r];
                }
            }
            Op::SumAll(x) => {
                let xshape = self.shape(*x).to_vec();
                let gv = gi.item();
                let dx = acc(g, *x, &xshape);
                for d in dx.data_mut() {
                    *d += gv;
                }
            }
            Op::WeightedSumRows { probs, values } => {
                let (b, t) = (self.shape(*probs)[0], self.shape(*probs)[1]);
                let d = self.shape(*values)[1];
                {
                    let vv = self.value(*values);
                    let dp = acc(g, *probs, &[b, t]);
                    for bi in 0..b {
                        let grow = &gi.data()[bi * d..(bi + 1) * d];
                        for ti in 0..t {
                            let vrow = &vv.data()[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                            let mut dot = T::zero();
                            for (&gv, &v) in grow.iter().zip(vrow) {
                                dot += gv * v;
                            }
                            dp.data_mut()[bi * t + ti] += dot;
                        }
                    }
                }
                let pv = self.value(*probs);
                let dv = acc(g, *values, &[b * t, d]);
                for bi in 0..b {
                    let grow = &gi.data()[bi * d..(bi + 1) * d];
                    for ti in 0..t {
                        let p = pv.data()[bi * t + ti];
                        let dst = &mut dv.data_mut()[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                        for (dvv, &gv) in dst.iter_mut().zip(grow) {
                            *dvv += p * gv;
                        }
                    }
                }
            }
            Op::RowScale { x, s } => {
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                {
                    let sv = self.value(*s);
                    let dx = acc(g, *x, &[n, d]);
                    for r in 0..n {
                        let c = sv.data()[r];
                        let dst = &mut dx.data_mut()[r * d..(r + 1) * d];
                        for (o, &gv) in dst.iter_mut().zip(&gi.data()[r * d..(r + 1) * d]) {
                            *o += gv * c;
                        }
                    }
                }
                let xv = self.value(*x);
                let ds = acc(g, *s, &[n, 1]);
                for r in 0..n {
                    let mut dot = T::zero();
                    for (&gv, &xvv) in
                        gi.data()[r * d..(r + 1) * d].iter().zip(&xv.data()[r * d..(r + 1) * d])
                    {
                        dot += gv * xvv;
                    }
                    ds.data_mut()[r] += dot;
                }
            }
            Op::Conv2d { x, w, bias, stride, pad, cols } => {
                assert!(!cols.is_empty(), "conv2d backward without recorded patches");
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, kh, kw) = (ws[0], ws[2], ws[3]);
                let ckk = c * kh * kw;
                let oh = conv_out_extent(h, kh, *stride, *pad);
                let ow = conv_out_extent(wd, kw, *stride, *pad);
                let mut dcols = Tensor::<T>::zeros(&[ckk, oh * ow]);
                for ni in 0..n {
                    let gplane = &gi.data()[ni * o * oh * ow..(ni + 1) * o * oh * ow];
                    // dW += g_n * cols_n^T
                    unsafe {
                        let dw = acc(g, *w, &ws);
                        T::gemm(
                            o,
                            oh * ow,
                            ckk,
                            T::one(),
                            gplane.as_ptr(),
                            (oh * ow) as isize,
                            1,
                            cols[ni].data().as_ptr(),
                            1,
                            (oh * ow) as isize,
                            T::one(),
                            dw.data_mut().as_mut_ptr(),
                            ckk as isize,
                            1,
                        );
                    }
                    // dcols = W^T * g_n, then fold back onto dx
                    unsafe {
                        T::gemm(
                            ckk,
                            o,
                            oh * ow,
                            T::one(),
                            self.value(*w).data().as_ptr(),
                            1,
                            ckk as isize,
                            gplane.as_ptr(),
                            (oh * ow) as isize,
                            1,
                            T::zero(),
                            dcols.data_mut().as_mut_ptr(),
                            (oh * ow) as isize,
                            1,
                        );
                    }
                    let dx = acc(g, *x, &xs);
                    col2im_acc(
                        dcols.data(),
                        c,
                        h,
                        wd,
                        kh,
                        kw,
                        *stride,
                        *pad,
                        &mut dx.data_mut()[ni * c * h * wd..(ni + 1) * c * h * wd],
                    );
                }
                let db = acc(g, *bias, &[o]);
                for ni in 0..n {
                    for oi in 0..o {
                        let mut s = T::zero();
                        for &gv in &gi.data()[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow]
                        {
                            s += gv;
                        }
                        db.data_mut()[oi] += s;
                    }
                }
            }
            Op::Film { x, gamma, beta } => {
                let xs = self.shape(*x).to_vec();
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let vx = self.value(*x);
                let vg = self.value(*gamma);
                {
                    let dx = acc(g, *x, &xs);
                    for ni in 0..n {
                        for ci in 0..c {
                            let gam = vg.data()[ci];
                            let base = (ni * c + ci) * hw;
                            for (d, &gv) in dx.data_mut()[base..base + hw]
                                .iter_mut()
                                .zip(&gi.data()[base..base + hw])
                            {
                                *d += gv * gam;
                            }
                        }
                    }
                }
                {
                    let dg = acc(g, *gamma, &[c]);
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let mut s = T::zero();
                            for (&gv, &xv) in
                                gi.data()[base..base + hw].iter().zip(&vx.data()[base..base + hw])
                            {
                                s += gv * xv;
                            }
                            dg.data_mut()[ci] += s;
                        }
                    }
                }
                let db = acc(g, *beta, &[c]);
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let mut s = T::zero();
                        for &gv in &gi.data()[base..base + hw] {
                            s += gv;
                        }
                        db.data_mut()[ci] += s;
                    }
                }
            }
            Op::CumsumLeft(x) => {
                // d/dx of inclusive scan: suffix sums along the same axis.
                let xs = self.shape(*x).to_vec();
                let w = xs[3];
                let dx = acc(g, *x, &xs);
                for (drow, grow) in dx.data_mut().chunks_mut(w).zip(gi.data().chunks(w)) {
                    let mut run = T::zero();
                    for j in (0..w).rev() {
                        run += grow[j];
                        drow[j] += run;
                    }
                }
            }
            Op::CumsumDown(x) => {
                let xs = self.shape(*x).to_vec();
                let (h, w) = (xs[2], xs[3]);
                let dx = acc(g, *x, &xs);
                for (dplane, gplane) in dx.data_mut().chunks_mut(h * w).zip(gi.data().chunks(h * w))
                {
                    for j in 0..w {
                        let mut run = T::zero();
                        for i in (0..h).rev() {
                            run += gplane[i * w + j];
                            dplane[i * w + j] += run;
                        }
                    }
                }
            }
            Op::MaxPoolSpatial { x, arg } => {
                let xs = self.shape(*x).to_vec();
                let hw = xs[2] * xs[3];
                let dx = acc(g, *x, &xs);
                for (nc, &a) in arg.iter().enumerate() {
                    dx.data_mut()[nc * hw + a as usize] += gi.data()[nc];
                }
            }
            Op::CrossEntropyMean { logits, labels, softmax } => {
                let (n, k) = (softmax.shape()[0], softmax.shape()[1]);
                let gv = gi.item() / T::from_f64(n as f64);
                let dl = acc(g, *logits, &[n, k]);
                ce_backward_into(dl, softmax, labels, None, gv);
            }
            Op::CrossEntropySumMasked { logits, labels, active, softmax } => {
                let (n, k) = (softmax.shape()[0], softmax.shape()[1]);
                let dl = acc(g, *logits, &[n, k]);
                ce_backward_into(dl, softmax, labels, Some(active), gi.item());
            }
            Op::SpectralScale { w, u, v, sigma } => {
                // out = w / sigma with sigma = u^T W v (u, v detached):
                // dL/dW = g/sigma - (sum g .* W) / sigma^2 * u v^T
                let ws = self.shape(*w).to_vec();
                let vw = self.value(*w);
                let mut dot = T::zero();
                for (&gv, &wv) in gi.data().iter().zip(vw.data()) {
                    dot += gv * wv;
                }
                let coef = dot / (*sigma * *sigma);
                let cols = v.numel();
                let dw = acc(g, *w, &ws);
                for (r, &uv) in u.data().iter().enumerate() {
                    let dst = &mut dw.data_mut()[r * cols..(r + 1) * cols];
                    let gsrc = &gi.data()[r * cols..(r + 1) * cols];
                    for ((d, &gv), &vv) in dst.iter_mut().zip(gsrc).zip(v.data()) {
                        *d += gv / *sigma - coef * uv * vv;
                    }
                }
            }
        }
    }
}

/// Stand-in log-probability for masked-out entries; finite so downstream
/// arithmetic never sees an infinity.
const MASKED_LOGPROB: f64 = -1e30;

/// Writes softmax(row) into dst and returns (max, ln Z) with Z computed after
/// max subtraction, so callers can form exact log-probabilities even when the
/// softmax itself has saturated to 0/1.
fn softmax_into<T: Scalar>(row: &[T], dst: &mut [T]) -> (T, T) {
    let mut mx = row[0];
    for &v in row {
        if v > mx {
            mx = v;
        }
    }
    let mut z = T::zero();
    for (d, &v) in dst.iter_mut().zip(row) {
        let e = (v - mx).exp();
        *d = e;
        z += e;
    }
    for d in dst.iter_mut() {
        *d = *d / z;
    }
    (mx, z.ln())
}

fn ce_backward_into<T: Scalar>(
    dl: &mut Tensor<T>,
    softmax: &Tensor<T>,
    labels: &[u32],
    active: Option<&[bool]>,
    scale: T,
) {
    let k = softmax.shape()[1];
    for (r, &label) in labels.iter().enumerate() {
        if !active.map_or(true, |a| a[r]) {
            continue;
        }
        let srow = &softmax.data()[r * k..(r + 1) * k];
        let drow = &mut dl.data_mut()[r * k..(r + 1) * k];
        for (j, (d, &p)) in drow.iter_mut().zip(srow).enumerate() {
            let target = if j == label as usize { T::one() } else { T::zero() };
            *d += scale * (p - target);
        }
    }
}

fn acc<'g, T: Scalar>(g: &'g mut [Option<Tensor<T>>], v: Var, shape: &[usize]) -> &'g mut Tensor<T> {
    g[v.0 as usize].get_or_insert_with(|| Tensor::zeros(shape))
}
