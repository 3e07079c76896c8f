//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s together with
//! the values needed by the adjoint rules. Complex tensors are ordinary real
//! tensors whose trailing axis has length 2 (real, imaginary), so every
//! gradient, optimizer state and inner product in this crate is real.
//!
//! Spectral primitives use the crate-wide convention: `rfft` is the
//! unnormalized forward transform over all spatial axes, `irfft` divides by
//! the spatial point count.

use std::rc::Rc;
use std::sync::Arc;

use num_complex::Complex64;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::fft_axis;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} holds {n} values, got {}", shape, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    ComplexMul(Var, Var),
    ModeMix(Var, Var),
    Rfft(Var),
    Irfft(Var, Vec<usize>),
    /// Gather: output element `i` reads input element `map[i]` (complex pairs).
    SelectModes(Var, Rc<Vec<usize>>),
    /// Scatter: input element `i` lands at output element `map[i]`.
    PadModes(Var, Rc<Vec<usize>>),
    Relu(Var),
    Tanh(Var),
    Sum(Var),
    L2Norm(Var),
    Reshape(Var),
    Concat(Vec<Var>),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. One tape per thread; rebuilt for every forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    relu_inputs: Vec<Var>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

fn complex_last(op: &'static str, t: &Tensor) -> Result<()> {
    if t.shape.last() != Some(&2) {
        return Err(Error::shape(
            op,
            format!("expected trailing complex axis of 2, got {:?}", t.shape),
        ));
    }
    Ok(())
}

fn to_complex(data: &[f64]) -> Vec<Complex64> {
    data.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect()
}

fn from_complex(data: &[Complex64]) -> Vec<f64> {
    data.iter().flat_map(|c| [c.re, c.im]).collect()
}

/// Real-to-half-spectrum transform of `[C, s…]` → `[C, s[..-1]…, s_last/2+1, 2]`.
fn rfft_forward(x: &Tensor) -> Tensor {
    let shape = &x.shape;
    let last = *shape.last().unwrap();
    let half = last / 2 + 1;
    let mut buf: Vec<Complex64> = x.data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    for axis in 1..shape.len() {
        fft_axis(&mut buf, shape, axis, false);
    }
    let rows = buf.len() / last;
    let mut out = Vec::with_capacity(rows * half * 2);
    for r in 0..rows {
        for c in &buf[r * last..r * last + half] {
            out.push(c.re);
            out.push(c.im);
        }
    }
    let mut out_shape = shape.clone();
    *out_shape.last_mut().unwrap() = half;
    out_shape.push(2);
    Tensor {
        shape: out_shape,
        data: out,
    }
}

/// Adjoint of [`rfft_forward`]: `x_j = Re Σ_{k ∈ half} G_k e^{+iθ(k,j)}`.
fn rfft_adjoint(g: &Tensor, spatial: &[usize]) -> Tensor {
    let mut shape = vec![g.shape[0]];
    shape.extend_from_slice(spatial);
    let last = *spatial.last().unwrap();
    let half = last / 2 + 1;
    let total: usize = shape.iter().product();
    let gc = to_complex(&g.data);
    let mut buf = vec![Complex64::default(); total];
    for r in 0..total / last {
        buf[r * last..r * last + half].copy_from_slice(&gc[r * half..(r + 1) * half]);
    }
    for axis in 1..shape.len() {
        fft_axis(&mut buf, &shape, axis, true);
    }
    Tensor {
        shape,
        data: buf.into_iter().map(|c| c.re).collect(),
    }
}

/// Half spectrum `[C, …, s_last/2+1, 2]` → real `[C, s…]`, normalized by the
/// spatial point count. Imaginary parts of the self-conjugate bins are ignored.
fn irfft_forward(h: &Tensor, spatial: &[usize]) -> Tensor {
    let channels = h.shape[0];
    let last = *spatial.last().unwrap();
    let half = last / 2 + 1;
    let mut lead_shape = vec![channels];
    lead_shape.extend_from_slice(&spatial[..spatial.len() - 1]);
    lead_shape.push(half);
    let mut hc = to_complex(&h.data);
    for axis in 1..lead_shape.len() - 1 {
        fft_axis(&mut hc, &lead_shape, axis, true);
    }
    let lead_count: usize = spatial[..spatial.len() - 1].iter().product();
    let lead_scale = 1.0 / lead_count as f64;
    let rows = hc.len() / half;
    let mut line = vec![Complex64::default(); last];
    let mut out = Vec::with_capacity(rows * last);
    let scale = lead_scale / last as f64;
    for r in 0..rows {
        let src = &hc[r * half..(r + 1) * half];
        line[0] = Complex64::new(src[0].re, 0.0);
        for k in 1..last / 2 {
            line[k] = src[k];
            line[last - k] = src[k].conj();
        }
        line[last / 2] = Complex64::new(src[last / 2].re, 0.0);
        fft_axis(&mut line, &[last], 0, true);
        out.extend(line.iter().map(|c| c.re * scale));
    }
    let mut shape = vec![channels];
    shape.extend_from_slice(spatial);
    Tensor { shape, data: out }
}

/// Adjoint of [`irfft_forward`].
fn irfft_adjoint(g: &Tensor, half_shape: &[usize], spatial: &[usize]) -> Tensor {
    let last = *spatial.last().unwrap();
    let half = last / 2 + 1;
    let rows = g.data.len() / last;
    let mut hc = Vec::with_capacity(rows * half);
    let mut line = vec![Complex64::default(); last];
    for r in 0..rows {
        for (l, v) in line.iter_mut().zip(&g.data[r * last..(r + 1) * last]) {
            *l = Complex64::new(*v, 0.0);
        }
        fft_axis(&mut line, &[last], 0, false);
        for (k, c) in line[..half].iter().enumerate() {
            if k == 0 || k == last / 2 {
                hc.push(Complex64::new(c.re / last as f64, 0.0));
            } else {
                hc.push(c * (2.0 / last as f64));
            }
        }
    }
    let lead_shape: Vec<usize> = half_shape[..half_shape.len() - 1].to_vec();
    for axis in 1..lead_shape.len() - 1 {
        fft_axis(&mut hc, &lead_shape, axis, false);
    }
    let lead_count: usize = spatial[..spatial.len() - 1].iter().product();
    let lead_scale = 1.0 / lead_count as f64;
    Tensor {
        shape: half_shape.to_vec(),
        data: from_complex(&hc).into_iter().map(|v| v * lead_scale).collect(),
    }
}

/// Mode selection map for `[C, a_1…a_r, 2]` keeping `keep[axis]` per axis.
/// Returns the output shape and the flat complex-element gather map.
pub fn mode_selection(full: &[usize], keep: &[Vec<usize>]) -> (Vec<usize>, Vec<usize>) {
    let channels = full[0];
    let spectral = &full[1..full.len() - 1];
    assert_eq!(spectral.len(), keep.len());
    let mut out_shape = vec![channels];
    out_shape.extend(keep.iter().map(Vec::len));
    out_shape.push(2);
    let kept_per_channel: usize = keep.iter().map(Vec::len).product();
    let full_per_channel: usize = spectral.iter().product();
    let mut map = Vec::with_capacity(channels * kept_per_channel);
    for c in 0..channels {
        for flat in 0..kept_per_channel {
            let mut rem = flat;
            let mut src = 0;
            let mut stride = 1;
            for axis in (0..keep.len()).rev() {
                let i = rem % keep[axis].len();
                rem /= keep[axis].len();
                src += keep[axis][i] * stride;
                stride *= spectral[axis];
            }
            map.push(c * full_per_channel + src);
        }
    }
    (out_shape, map)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            relu_inputs: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, needs_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Learnable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Learnable leaf sharing storage with the caller (no copy).
    pub fn param_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.push_shared(t, Op::Leaf, true)
    }

    pub fn constant_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.push_shared(t, Op::Leaf, false)
    }

    pub fn value_shared(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    /// Values fed into every relu so far, in recording order.
    pub fn relu_inputs(&self) -> Vec<f64> {
        self.relu_inputs
            .iter()
            .flat_map(|v| self.nodes[v.0].value.data.iter().copied())
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let t = Tensor { shape: x.shape.clone(), data };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y)?;
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p - q).collect();
        let t = Tensor { shape: x.shape.clone(), data };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let t = Tensor { shape: x.shape.clone(), data };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let t = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|v| v * c).collect(),
        };
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    /// `x[c, …] + b[c]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.shape.len() != 1 || xv.shape.first() != Some(&bv.shape[0]) {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + bias {:?}", xv.shape, bv.shape),
            ));
        }
        let inner = xv.data.len() / bv.shape[0];
        let mut data = xv.data.clone();
        for (c, chunk) in data.chunks_mut(inner.max(1)).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bv.data[c]);
        }
        let t = Tensor { shape: xv.shape.clone(), data };
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(t, Op::AddBias(x, b), ng))
    }

    /// `a [m, k]` times `b [k, …]`, contracting the first axis of `b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape.len() != 2 || bv.shape.is_empty() || av.shape[1] != bv.shape[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape, bv.shape),
            ));
        }
        let (m, k) = (av.shape[0], av.shape[1]);
        let n = bv.data.len() / k.max(1);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = av.data[i * k + p];
                if s == 0.0 {
                    continue;
                }
                for (o, bj) in row.iter_mut().zip(&bv.data[p * n..(p + 1) * n]) {
                    *o += s * bj;
                }
            }
        }
        let mut shape = vec![m];
        shape.extend_from_slice(&bv.shape[1..]);
        let t = Tensor { shape, data: out };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::MatMul(a, b), ng))
    }

    /// Elementwise complex product of two `[…, 2]` tensors.
    pub fn complex_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("complex_mul", x, y)?;
        complex_last("complex_mul", x)?;
        let prod: Vec<Complex64> = to_complex(&x.data)
            .into_iter()
            .zip(to_complex(&y.data))
            .map(|(p, q)| p * q)
            .collect();
        let t = Tensor {
            shape: x.shape.clone(),
            data: from_complex(&prod),
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::ComplexMul(a, b), ng))
    }

    /// Per-mode complex channel mixing:
    /// `out[o, m] = Σ_i x[i, m] · w[i, o, m]` for `x [Cin, M…, 2]`,
    /// `w [Cin, Cout, M…, 2]`.
    pub fn mode_mix(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        complex_last("mode_mix", xv)?;
        complex_last("mode_mix", wv)?;
        if wv.shape.len() != xv.shape.len() + 1
            || wv.shape[0] != xv.shape[0]
            || wv.shape[2..] != xv.shape[1..]
        {
            return Err(Error::shape(
                "mode_mix",
                format!("input {:?} with weights {:?}", xv.shape, wv.shape),
            ));
        }
        let (cin, cout) = (wv.shape[0], wv.shape[1]);
        let m2 = xv.data.len() / cin;
        let mut out = vec![0.0; cout * m2];
        for i in 0..cin {
            let xi = &xv.data[i * m2..(i + 1) * m2];
            for o in 0..cout {
                let wio = &wv.data[(i * cout + o) * m2..(i * cout + o + 1) * m2];
                let dst = &mut out[o * m2..(o + 1) * m2];
                for ((d, xc), wc) in dst
                    .chunks_exact_mut(2)
                    .zip(xi.chunks_exact(2))
                    .zip(wio.chunks_exact(2))
                {
                    d[0] += xc[0] * wc[0] - xc[1] * wc[1];
                    d[1] += xc[0] * wc[1] + xc[1] * wc[0];
                }
            }
        }
        let mut shape = vec![cout];
        shape.extend_from_slice(&xv.shape[1..]);
        let t = Tensor { shape, data: out };
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(t, Op::ModeMix(x, w), ng))
    }

    /// Forward transform over all axes after the channel axis.
    pub fn rfft(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape.len() < 2 || xv.shape[1..].iter().any(|n| !n.is_power_of_two() || *n < 2) {
            return Err(Error::shape(
                "rfft",
                format!("expected [C, power-of-two spatial…], got {:?}", xv.shape),
            ));
        }
        let t = rfft_forward(xv);
        let ng = self.needs(x);
        Ok(self.push(t, Op::Rfft(x), ng))
    }

    /// Inverse of [`Tape::rfft`] back onto a grid of shape `spatial`.
    pub fn irfft(&mut self, h: Var, spatial: &[usize]) -> Result<Var> {
        let hv = self.value(h);
        let last = *spatial.last().unwrap_or(&0);
        let mut expect = vec![*hv.shape.first().unwrap_or(&0)];
        expect.extend_from_slice(&spatial[..spatial.len().saturating_sub(1)]);
        expect.push(last / 2 + 1);
        expect.push(2);
        if spatial.is_empty() || hv.shape != expect || spatial.iter().any(|n| !n.is_power_of_two() || *n < 2) {
            return Err(Error::shape(
                "irfft",
                format!("spectrum {:?} for spatial grid {:?}", hv.shape, spatial),
            ));
        }
        let t = irfft_forward(hv, spatial);
        let ng = self.needs(h);
        Ok(self.push(t, Op::Irfft(h, spatial.to_vec()), ng))
    }

    /// Keep the listed indices along each spectral axis of `[C, a…, 2]`.
    pub fn select_modes(&mut self, x: Var, keep: &[Vec<usize>]) -> Result<Var> {
        let xv = self.value(x);
        complex_last("select_modes", xv)?;
        let spectral = &xv.shape[1..xv.shape.len() - 1];
        if spectral.len() != keep.len()
            || keep.iter().zip(spectral).any(|(k, &n)| k.iter().any(|&i| i >= n))
        {
            return Err(Error::shape(
                "select_modes",
                format!("cannot keep {:?} from {:?}", keep.iter().map(Vec::len).collect::<Vec<_>>(), xv.shape),
            ));
        }
        let (shape, map) = mode_selection(&xv.shape, keep);
        let mut data = Vec::with_capacity(map.len() * 2);
        for &src in &map {
            data.push(xv.data[2 * src]);
            data.push(xv.data[2 * src + 1]);
        }
        let t = Tensor { shape, data };
        let ng = self.needs(x);
        Ok(self.push(t, Op::SelectModes(x, Rc::new(map)), ng))
    }

    /// Zero-pad `[C, |keep|…, 2]` back to `[C, full…, 2]`.
    pub fn pad_modes(&mut self, x: Var, keep: &[Vec<usize>], full: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        complex_last("pad_modes", xv)?;
        let mut full_shape = vec![xv.shape[0]];
        full_shape.extend_from_slice(full);
        full_shape.push(2);
        let (sel_shape, map) = mode_selection(&full_shape, keep);
        if sel_shape != xv.shape || keep.iter().zip(full).any(|(k, &n)| k.iter().any(|&i| i >= n)) {
            return Err(Error::shape(
                "pad_modes",
                format!("{:?} into {:?}", xv.shape, full_shape),
            ));
        }
        let mut data = vec![0.0; full_shape.iter().product()];
        for (i, &dst) in map.iter().enumerate() {
            data[2 * dst] = xv.data[2 * i];
            data[2 * dst + 1] = xv.data[2 * i + 1];
        }
        let t = Tensor {
            shape: full_shape,
            data,
        };
        let ng = self.needs(x);
        Ok(self.push(t, Op::PadModes(x, Rc::new(map)), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        };
        let ng = self.needs(x);
        self.relu_inputs.push(x);
        self.push(t, Op::Relu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|v| v.tanh()).collect(),
        };
        let ng = self.needs(x);
        self.push(t, Op::Tanh(x), ng)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Euclidean norm of all elements, as a scalar.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let s = self.value(x).norm_sqr().sqrt();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::L2Norm(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Concatenate along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?);
        let tail = first.shape[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape.is_empty() || v.shape[1..] != tail[..] {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs trailing {:?}", v.shape, tail),
                ));
            }
            rows += v.shape[0];
            data.extend_from_slice(&v.data);
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor { shape, data }, Op::Concat(parts.to_vec()), ng))
    }

    /// Reverse sweep from a scalar root. A tape can be swept once.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Autodiff(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        if self.value(root).len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor {
            shape: self.value(root).shape.clone(),
            data: vec![1.0],
        });

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let nodes = &self.nodes;
            let mut acc = |v: Var, t: Tensor| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(e) => e.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    let neg = Tensor {
                        shape: g.shape.clone(),
                        data: g.data.iter().map(|v| -v).collect(),
                    };
                    acc(*b, neg);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let ga = g.data.iter().zip(&bv.data).map(|(p, q)| p * q).collect();
                    let gb = g.data.iter().zip(&av.data).map(|(p, q)| p * q).collect();
                    acc(*a, Tensor { shape: av.shape.clone(), data: ga });
                    acc(*b, Tensor { shape: bv.shape.clone(), data: gb });
                }
                Op::Scale(a, c) => {
                    let d = g.data.iter().map(|v| v * c).collect();
                    acc(*a, Tensor { shape: g.shape.clone(), data: d });
                }
                Op::AddBias(x, b) => {
                    let bv = val(*b);
                    let inner = g.data.len() / bv.shape[0];
                    let gb = g.data.chunks(inner.max(1)).map(|c| c.iter().sum()).collect();
                    acc(*b, Tensor { shape: bv.shape.clone(), data: gb });
                    acc(*x, g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k) = (av.shape[0], av.shape[1]);
                    let n = bv.data.len() / k.max(1);
                    if nodes[a.0].needs_grad {
                        let mut ga = vec![0.0; m * k];
                        for i in 0..m {
                            let gi = &g.data[i * n..(i + 1) * n];
                            for p in 0..k {
                                ga[i * k + p] = gi
                                    .iter()
                                    .zip(&bv.data[p * n..(p + 1) * n])
                                    .map(|(x, y)| x * y)
                                    .sum();
                            }
                        }
                        acc(*a, Tensor { shape: av.shape.clone(), data: ga });
                    }
                    if nodes[b.0].needs_grad {
                        let mut gb = vec![0.0; k * n];
                        for i in 0..m {
                            let gi = &g.data[i * n..(i + 1) * n];
                            for p in 0..k {
                                let s = av.data[i * k + p];
                                if s == 0.0 {
                                    continue;
                                }
                                for (d, x) in gb[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                    *d += s * x;
                                }
                            }
                        }
                        acc(*b, Tensor { shape: bv.shape.clone(), data: gb });
                    }
                }
                Op::ComplexMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let gc = to_complex(&g.data);
                    let ga: Vec<Complex64> = gc.iter().zip(to_complex(&bv.data)).map(|(g, q)| g * q.conj()).collect();
                    let gb: Vec<Complex64> = gc.iter().zip(to_complex(&av.data)).map(|(g, p)| g * p.conj()).collect();
                    acc(*a, Tensor { shape: av.shape.clone(), data: from_complex(&ga) });
                    acc(*b, Tensor { shape: bv.shape.clone(), data: from_complex(&gb) });
                }
                Op::ModeMix(x, w) => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (cin, cout) = (wv.shape[0], wv.shape[1]);
                    let m2 = xv.data.len() / cin;
                    let want_x = nodes[x.0].needs_grad;
                    let want_w = nodes[w.0].needs_grad;
                    let mut gx = vec![0.0; if want_x { xv.data.len() } else { 0 }];
                    let mut gw = vec![0.0; if want_w { wv.data.len() } else { 0 }];
                    for i in 0..cin {
                        let xi = &xv.data[i * m2..(i + 1) * m2];
                        for o in 0..cout {
                            let base = (i * cout + o) * m2;
                            let wio = &wv.data[base..base + m2];
                            let go = &g.data[o * m2..(o + 1) * m2];
                            if want_x {
                                let dst = &mut gx[i * m2..(i + 1) * m2];
                                for ((d, gc), wc) in dst.chunks_exact_mut(2).zip(go.chunks_exact(2)).zip(wio.chunks_exact(2)) {
                                    // g · conj(w)
                                    d[0] += gc[0] * wc[0] + gc[1] * wc[1];
                                    d[1] += gc[1] * wc[0] - gc[0] * wc[1];
                                }
                            }
                            if want_w {
                                let dst = &mut gw[base..base + m2];
                                for ((d, gc), xc) in dst.chunks_exact_mut(2).zip(go.chunks_exact(2)).zip(xi.chunks_exact(2)) {
                                    d[0] += gc[0] * xc[0] + gc[1] * xc[1];
                                    d[1] += gc[1] * xc[0] - gc[0] * xc[1];
                                }
                            }
                        }
                    }
                    if want_x {
                        acc(*x, Tensor { shape: xv.shape.clone(), data: gx });
                    }
                    if want_w {
                        acc(*w, Tensor { shape: wv.shape.clone(), data: gw });
                    }
                }
                Op::Rfft(x) => {
                    let xv = val(*x);
                    acc(*x, rfft_adjoint(&g, &xv.shape[1..]));
                }
                Op::Irfft(h, spatial) => {
                    let hv = val(*h);
                    acc(*h, irfft_adjoint(&g, &hv.shape, spatial));
                }
                Op::SelectModes(x, map) => {
                    let xv = val(*x);
                    let mut d = vec![0.0; xv.data.len()];
                    for (i, &src) in map.iter().enumerate() {
                        d[2 * src] += g.data[2 * i];
                        d[2 * src + 1] += g.data[2 * i + 1];
                    }
                    acc(*x, Tensor { shape: xv.shape.clone(), data: d });
                }
                Op::PadModes(x, map) => {
                    let xv = val(*x);
                    let mut d = Vec::with_capacity(xv.data.len());
                    for &dst in map.iter() {
                        d.push(g.data[2 * dst]);
                        d.push(g.data[2 * dst + 1]);
                    }
                    acc(*x, Tensor { shape: xv.shape.clone(), data: d });
                }
                Op::Relu(x) => {
                    let xv = val(*x);
                    let d = g.data.iter().zip(&xv.data).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                    acc(*x, Tensor { shape: xv.shape.clone(), data: d });
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    let d = g.data.iter().zip(&y.data).map(|(g, t)| g * (1.0 - t * t)).collect();
                    acc(*x, Tensor { shape: y.shape.clone(), data: d });
                }
                Op::Sum(x) => {
                    let xv = val(*x);
                    acc(*x, Tensor { shape: xv.shape.clone(), data: vec![g.data[0]; xv.data.len()] });
                }
                Op::L2Norm(x) => {
                    let xv = val(*x);
                    let n = node.value.data[0];
                    let s = if n > 0.0 { g.data[0] / n } else { 0.0 };
                    acc(*x, Tensor { shape: xv.shape.clone(), data: xv.data.iter().map(|v| v * s).collect() });
                }
                Op::Reshape(x) => {
                    let shape = val(*x).shape.clone();
                    acc(*x, Tensor { shape, data: g.data });
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pv = val(p);
                        let n = pv.data.len();
                        acc(p, Tensor { shape: pv.shape.clone(), data: g.data[off..off + n].to_vec() });
                        off += n;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Outcome of a finite-difference gradient audit.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a relu input crossed or sat near its kink.
    pub excluded: usize,
}

/// Compare reverse-mode gradients of `f` against central differences on a
/// random subsample of at most `n_coords` parameter coordinates.
///
/// Per-coordinate error is `|fd - ad| / max(|fd|, |ad|, 1e-3·max(1, |f|))`;
/// the floor keeps round-off in `f(θ±ε)` from dominating near-zero
/// gradient entries. A coordinate is excluded when a perturbation flips the
/// sign of any relu input, or moves a relu input that lies within `10ε` of
/// zero.
pub fn finite_difference_check<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    n_coords: usize,
    seed: u64,
) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let root = f(&mut tape, &vars)?;
        Ok((tape.value(root).item(), tape.relu_inputs()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let f0 = tape.value(root).item();
    let base_relu = tape.relu_inputs();
    let grads = tape.backward(root)?;

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: Vec<usize> = if coords.len() <= n_coords {
        (0..coords.len()).collect()
    } else {
        index::sample(&mut rng, coords.len(), n_coords).into_vec()
    };

    let floor = 1e-3 * f0.abs().max(1.0);
    let mut report = FdReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
    };
    let mut work = params.to_vec();
    for ci in picked {
        let (p, i) = coords[ci];
        let orig = work[p].data[i];
        work[p].data[i] = orig + eps;
        let (fp, rp) = eval(&work)?;
        work[p].data[i] = orig - eps;
        let (fm, rm) = eval(&work)?;
        work[p].data[i] = orig;

        let kink = base_relu.iter().zip(&rp).zip(&rm).any(|((&b, &u), &d)| {
            let flips = (b > 0.0) != (u > 0.0) || (b > 0.0) != (d > 0.0);
            let near = b.abs() < 10.0 * eps && (u != b || d != b);
            flips || near
        });
        if kink {
            report.excluded += 1;
            continue;
        }
        let fd = (fp - fm) / (2.0 * eps);
        let ad = grads.get(vars[p]).map_or(0.0, |g| g.data[i]);
        let err = (fd - ad).abs() / fd.abs().max(ad.abs()).max(floor);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn quadratic_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn rfft_irfft_identity_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for spatial in [vec![16usize], vec![8, 8]] {
            let mut shape = vec![2];
            shape.extend(&spatial);
            let mut t = Tape::new();
            let x = t.param(rand_tensor(&mut rng, &shape));
            let h = t.rfft(x).unwrap();
            let y = t.irfft(h, &spatial).unwrap();
            for (a, b) in t.value(y).data().iter().zip(t.value(x).data()) {
                assert!((a - b).abs() < 1e-12);
            }
            let s = t.sum(y);
            let g = t.backward(s).unwrap();
            assert!(g.get(x).unwrap().data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn backward_twice_rejected_and_non_scalar_rejected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(t.backward(x).is_err());
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert!(t.backward(s).is_err());
    }

    #[test]
    fn zero_loss_gives_zero_gradients() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        assert_eq!(t.value(s).item(), 0.0);
        let g = t.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors_name_shapes() {
        let mut t = Tape::new();
        let a = t.param(Tensor::zeros(&[2, 3]));
        let b = t.param(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        let c = t.param(Tensor::zeros(&[3]));
        assert!(t.add(a, c).is_err());
    }

    #[test]
    fn relu_derivative_zero_at_kink() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = t.relu(x);
        let s = t.sum(r);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn linear_function_fd_is_tight() {
        let a = Tensor::vector(vec![0.3, -1.2, 2.5, 0.7]);
        let report = finite_difference_check(
            |t, v| {
                let c = t.constant(a.clone());
                let p = t.mul(v[0], c)?;
                Ok(t.sum(p))
            },
            &[Tensor::vector(vec![0.1, 0.2, -0.3, 0.05])],
            1e-3,
            200,
            0,
        )
        .unwrap();
        assert_eq!(report.checked, 4);
        assert!(report.max_rel_error < 1e-10, "{report:?}");
    }

    #[test]
    fn kink_coordinates_are_excluded() {
        let report = finite_difference_check(
            |t, v| {
                let r = t.relu(v[0]);
                Ok(t.sum(r))
            },
            &[Tensor::vector(vec![1e-7, 0.5, -0.5])],
            1e-6,
            200,
            0,
        )
        .unwrap();
        assert_eq!(report.excluded, 1);
        assert_eq!(report.checked, 2);
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn gradients_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = rand_tensor(&mut rng, &[4, 4]);
        let x = rand_tensor(&mut rng, &[4, 16]);
        let run = || {
            let mut t = Tape::new();
            let wv = t.param(w.clone());
            let xv = t.constant(x.clone());
            let y = t.matmul(wv, xv).unwrap();
            let h = t.rfft(y).unwrap();
            let z = t.irfft(h, &[16]).unwrap();
            let r = t.tanh(z);
            let n = t.l2_norm(r);
            let g = t.backward(n).unwrap();
            g.get(wv).unwrap().clone()
        };
        assert_eq!(run(), run());
    }

    // ⟨J δ, λ⟩ == ⟨δ, Jᵀ λ⟩ with J δ from closed-form JVPs.
    fn check_adjoint(
        inputs: &[Tensor],
        fwd: &dyn Fn(&mut Tape, &[Var]) -> Var,
        jvp: &dyn Fn(&[Tensor], &[Tensor]) -> Tensor,
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let deltas: Vec<Tensor> = inputs.iter().map(|x| rand_tensor(&mut rng, x.shape())).collect();
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.param(x.clone())).collect();
        let y = fwd(&mut t, &vars);
        let lambda = rand_tensor(&mut rng, t.value(y).shape());
        let lv = t.constant(lambda.clone());
        let p = t.mul(y, lv).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        let lhs = jvp(inputs, &deltas).dot(&lambda);
        let rhs: f64 = vars.iter().zip(&deltas).map(|(v, d)| g.get(*v).unwrap().dot(d)).sum();
        let scale = lhs.abs().max(1.0);
        assert!((lhs - rhs).abs() < 1e-10 * scale, "adjoint mismatch {lhs} vs {rhs}");
    }

    fn eval_linear(x: &Tensor, f: &dyn Fn(&mut Tape, Var) -> Var) -> Tensor {
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let y = f(&mut t, v);
        t.value(y).clone()
    }

    #[test]
    fn adjoint_consistency_of_every_primitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_tensor(&mut rng, &[3, 8]);
        let b = rand_tensor(&mut rng, &[3, 8]);
        let zip = |x: &Tensor, y: &Tensor, f: fn(f64, f64) -> f64| {
            Tensor::new(x.shape().to_vec(), x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect()).unwrap()
        };

        check_adjoint(&[a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]).unwrap(),
            &|_, d| zip(&d[0], &d[1], |p, q| p + q), 1);
        check_adjoint(&[a.clone(), b.clone()], &|t, v| t.sub(v[0], v[1]).unwrap(),
            &|_, d| zip(&d[0], &d[1], |p, q| p - q), 2);
        check_adjoint(&[a.clone(), b.clone()], &|t, v| t.mul(v[0], v[1]).unwrap(),
            &|x, d| {
                let l = zip(&d[0], &x[1], |p, q| p * q);
                let r = zip(&x[0], &d[1], |p, q| p * q);
                zip(&l, &r, |p, q| p + q)
            }, 3);
        check_adjoint(std::slice::from_ref(&a), &|t, v| t.scale(v[0], -2.5),
            &|_, d| Tensor::new(d[0].shape().to_vec(), d[0].data().iter().map(|v| -2.5 * v).collect()).unwrap(), 4);
        check_adjoint(std::slice::from_ref(&a), &|t, v| t.tanh(v[0]),
            &|x, d| {
                let g: Vec<f64> = x[0].data().iter().zip(d[0].data()).map(|(x, d)| (1.0 - x.tanh().powi(2)) * d).collect();
                Tensor::new(x[0].shape().to_vec(), g).unwrap()
            }, 5);
        check_adjoint(std::slice::from_ref(&a), &|t, v| t.relu(v[0]),
            &|x, d| zip(&x[0], &d[0], |x, d| if x > 0.0 { d } else { 0.0 }), 6);

        let bias = rand_tensor(&mut rng, &[3]);
        check_adjoint(&[a.clone(), bias.clone()], &|t, v| t.add_bias(v[0], v[1]).unwrap(),
            &|_, d| {
                let mut out = d[0].clone();
                for c in 0..3 {
                    for j in 0..8 {
                        out.data_mut()[c * 8 + j] += d[1].data()[c];
                    }
                }
                out
            }, 7);

        let m = rand_tensor(&mut rng, &[5, 3]);
        let mm = |x: &Tensor, y: &Tensor| eval_linear(y, &|t, yv| {
            let xv = t.constant(x.clone());
            t.matmul(xv, yv).unwrap()
        });
        check_adjoint(&[m.clone(), a.clone()], &|t, v| t.matmul(v[0], v[1]).unwrap(),
            &|x, d| {
                let l = mm(&d[0], &x[1]);
                let r = mm(&x[0], &d[1]);
                zip(&l, &r, |p, q| p + q)
            }, 8);

        let ca = rand_tensor(&mut rng, &[4, 2]);
        let cb = rand_tensor(&mut rng, &[4, 2]);
        let cmul = |x: &Tensor, y: &Tensor| {
            let data: Vec<f64> = x.data().chunks(2).zip(y.data().chunks(2))
                .flat_map(|(p, q)| [p[0] * q[0] - p[1] * q[1], p[0] * q[1] + p[1] * q[0]]).collect();
            Tensor::new(x.shape().to_vec(), data).unwrap()
        };
        check_adjoint(&[ca.clone(), cb.clone()], &|t, v| t.complex_mul(v[0], v[1]).unwrap(),
            &|x, d| zip(&cmul(&d[0], &x[1]), &cmul(&x[0], &d[1]), |p, q| p + q), 9);

        let mx = rand_tensor(&mut rng, &[3, 5, 2]);
        let mw = rand_tensor(&mut rng, &[3, 4, 5, 2]);
        let mix = |x: &Tensor, w: &Tensor| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let wv = t.constant(w.clone());
            let y = t.mode_mix(xv, wv).unwrap();
            t.value(y).clone()
        };
        check_adjoint(&[mx.clone(), mw.clone()], &|t, v| t.mode_mix(v[0], v[1]).unwrap(),
            &|x, d| zip(&mix(&d[0], &x[1]), &mix(&x[0], &d[1]), |p, q| p + q), 10);

        for spatial in [vec![16usize], vec![8, 16]] {
            let mut shape = vec![2];
            shape.extend(&spatial);
            let x = rand_tensor(&mut rng, &shape);
            check_adjoint(std::slice::from_ref(&x), &|t, v| t.rfft(v[0]).unwrap(),
                &|_, d| eval_linear(&d[0], &|t, v| t.rfft(v).unwrap()), 11);
            let mut hshape = vec![2];
            hshape.extend(&spatial[..spatial.len() - 1]);
            hshape.push(spatial[spatial.len() - 1] / 2 + 1);
            hshape.push(2);
            let h = rand_tensor(&mut rng, &hshape);
            let sp = spatial.clone();
            check_adjoint(std::slice::from_ref(&h), &|t, v| t.irfft(v[0], &sp).unwrap(),
                &|_, d| eval_linear(&d[0], &|t, v| t.irfft(v, &spatial).unwrap()), 12);
        }

        let spec = rand_tensor(&mut rng, &[2, 8, 5, 2]);
        let keep = vec![vec![0, 1, 6, 7], vec![0, 1, 2]];
        let k2 = keep.clone();
        check_adjoint(std::slice::from_ref(&spec), &|t, v| t.select_modes(v[0], &keep).unwrap(),
            &|_, d| eval_linear(&d[0], &|t, v| t.select_modes(v, &k2).unwrap()), 13);
        let small = rand_tensor(&mut rng, &[2, 4, 3, 2]);
        let keep = vec![vec![0, 1, 6, 7], vec![0, 1, 2]];
        let k2 = keep.clone();
        check_adjoint(std::slice::from_ref(&small), &|t, v| t.pad_modes(v[0], &keep, &[8, 5]).unwrap(),
            &|_, d| eval_linear(&d[0], &|t, v| t.pad_modes(v, &k2, &[8, 5]).unwrap()), 14);

        check_adjoint(std::slice::from_ref(&a), &|t, v| t.reshape(v[0], &[24]).unwrap(),
            &|_, d| d[0].clone().reshaped(&[24]).unwrap(), 15);
        check_adjoint(&[a.clone(), b.clone()], &|t, v| t.concat(&[v[0], v[1]]).unwrap(),
            &|_, d| {
                let mut data = d[0].data().to_vec();
                data.extend_from_slice(d[1].data());
                Tensor::new(vec![6, 8], data).unwrap()
            }, 16);
        check_adjoint(std::slice::from_ref(&a), &|t, v| t.sum(v[0]),
            &|_, d| Tensor::scalar(d[0].data().iter().sum()), 17);
        check_adjoint(std::slice::from_ref(&a), &|t, v| t.l2_norm(v[0]),
            &|x, d| Tensor::scalar(x[0].dot(&d[0]) / x[0].norm_sqr().sqrt()), 18);
    }

    #[test]
    fn composite_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = vec![
            rand_tensor(&mut rng, &[6, 2]),
            rand_tensor(&mut rng, &[6]),
            rand_tensor(&mut rng, &[6, 6]),
            rand_tensor(&mut rng, &[6, 6, 4, 2]),
            rand_tensor(&mut rng, &[1, 6]),
        ];
        let input = rand_tensor(&mut rng, &[2, 16]);
        let report = finite_difference_check(
            |t, p| {
                let x = t.constant(input.clone());
                let h = t.matmul(p[0], x)?;
                let h = t.add_bias(h, p[1])?;
                let h = t.tanh(h);
                let lin = t.matmul(p[2], h)?;
                let sp = t.rfft(h)?;
                let keep = vec![vec![0, 1, 2, 3]];
                let sel = t.select_modes(sp, &keep)?;
                let mixed = t.mode_mix(sel, p[3])?;
                let pad = t.pad_modes(mixed, &keep, &[9])?;
                let conv = t.irfft(pad, &[16])?;
                let h = t.add(lin, conv)?;
                let h = t.relu(h);
                let out = t.matmul(p[4], h)?;
                Ok(t.l2_norm(out))
            },
            &params,
            1e-6,
            200,
            3,
        )
        .unwrap();
        assert!(report.checked >= 100, "{report:?}");
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
