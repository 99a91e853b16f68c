//! Reverse-mode automatic differentiation on a per-pass tape.
//!
//! A [`Graph`] records every operation applied to its nodes. Parameters are
//! bound once per graph through [`Graph::param`], so a network applied several
//! times in one pass (as in `G_b(G_a(G_b(y)))`) accumulates gradients into a
//! single leaf. Nodes that do not depend on any trainable leaf are not
//! differentiated.

use std::collections::HashMap;

use crate::conv::ConvGeom;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const NORM_EPS: f64 = 1e-5;
/// Largest im2col buffer (in elements) kept from the forward pass for the
/// weight gradient; larger ones are rebuilt during the backward pass.
const COL_CACHE_LIMIT: usize = 1 << 23;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies one parameter tensor of one network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub owner: u32,
    pub index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
}

impl ConvSpec {
    pub fn new(stride: usize, pad: usize, pad_mode: PadMode) -> Self {
        ConvSpec {
            stride,
            pad,
            pad_mode,
        }
    }

    /// Output extent along one axis.
    pub fn output_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if padded < kernel || self.stride == 0 {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
        cols: Option<Vec<T>>,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Affine {
        x: Var,
        scale: T,
    },
    LogClamp {
        x: Var,
        eps: T,
    },
    Mean(Var),
    Combine(Vec<(Var, T)>),
    ConcatChannels(Vec<Var>),
    Upsample2x(Var),
    SpectralNorm {
        w: Var,
        u: Vec<T>,
        v: Vec<T>,
        sigma: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamKey, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copies the value of `v` into a new constant leaf, cutting the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Binds a parameter tensor, reusing the existing leaf when the same key
    /// was already bound in this graph.
    pub fn param(&mut self, key: ParamKey, value: &Tensor<T>, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, trainable);
        self.params.insert(key, v);
        v
    }

    pub fn param_var(&self, key: ParamKey) -> Option<Var> {
        self.params.get(&key).copied()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if wcin != cin || kh != kw {
            return Err(Error::Shape(format!(
                "conv weight {:?} incompatible with input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::Shape(format!(
                    "conv bias {:?} does not match {cout} output channels",
                    self.value(b).shape()
                )));
            }
        }
        let geom = ConvGeom::new(cin, h, wd, kh, spec)?;
        let (ho, wo) = (geom.ho, geom.wo);
        let ckk = cin * kh * kh;
        let direct = geom.direct(cout);
        // per-sample buffer reused by the weight gradient: the padded input on
        // the direct path, the patch matrix otherwise
        let saved_len = if direct { cin * geom.hp * geom.wp } else { ckk * ho * wo };
        let cache = self.needs(w) && n * saved_len <= COL_CACHE_LIMIT;
        let mut saved = Vec::with_capacity(if cache { n * saved_len } else { 0 });
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            let od = out.data_mut();
            let mut xpad = Vec::new();
            let mut cols = if direct { Vec::new() } else { vec![T::zero(); ckk * ho * wo] };
            for s in 0..n {
                geom.pad_input(&xv[s * cin * h * wd..(s + 1) * cin * h * wd], &mut xpad);
                let o = &mut od[s * cout * ho * wo..(s + 1) * cout * ho * wo];
                if direct {
                    geom.direct_forward(&xpad, wv, cout, o);
                    if cache {
                        saved.extend_from_slice(&xpad);
                    }
                } else {
                    geom.im2col(&xpad, &mut cols);
                    T::gemm(cout, ckk, ho * wo, wv, false, &cols, false, o, false);
                    if cache {
                        saved.extend_from_slice(&cols);
                    }
                }
                if let Some(bv) = bv {
                    for (co, row) in o.chunks_exact_mut(ho * wo).enumerate() {
                        let bias = bv[co];
                        row.iter_mut().for_each(|v| *v = *v + bias);
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let cols = cache.then_some(saved);
        Ok(self.push(out, Op::Conv2d { x, w, b, spec, cols }, needs))
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Shape(format!(
                "instance norm affine parameters must have {c} entries"
            )));
        }
        let hw = h * w;
        let eps = T::lit(NORM_EPS);
        let inv_hw = T::one() / T::lit(hw as f64);
        let mut xhat = vec![T::zero(); n * c * hw];
        let mut inv_std = vec![T::zero(); n * c];
        let mut out = Tensor::zeros(&[n, c, h, w]);
        {
            let xv = self.value(x).data();
            let g = self.value(gamma).data();
            let bta = self.value(beta).data();
            let od = out.data_mut();
            for s in 0..n {
                for ch in 0..c {
                    let idx = s * c + ch;
                    let seg = &xv[idx * hw..(idx + 1) * hw];
                    let mean = seg.iter().copied().sum::<T>() * inv_hw;
                    let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_hw;
                    let is = T::one() / (var + eps).sqrt();
                    inv_std[idx] = is;
                    for i in 0..hw {
                        let xh = (seg[i] - mean) * is;
                        xhat[idx * hw + i] = xh;
                        od[idx * hw + i] = g[ch] * xh + bta[ch];
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let needs = self.needs(x);
        self.push(value, op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        self.unary(
            x,
            move |v| if v > T::zero() { v } else { v * s },
            Op::LeakyRelu(x, s),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (a, b) = (T::lit(scale), T::lit(shift));
        self.unary(x, move |v| a * v + b, Op::Affine { x, scale: a })
    }

    /// `ln(max(x, eps))`; the gradient vanishes where the clamp is active.
    pub fn log_clamp(&mut self, x: Var, eps: f64) -> Var {
        let e = T::lit(eps);
        self.unary(x, move |v| v.max(e).ln(), Op::LogClamp { x, eps: e })
    }

    /// Mean over every element, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::EmptyBatch("mean of an empty tensor"));
        }
        let m = t.data().iter().copied().sum::<T>() / T::lit(t.len() as f64);
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), needs))
    }

    /// Weighted sum of equally shaped tensors.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::Shape("combine needs at least one term".into()))?;
        let shape = self.value(first).shape().to_vec();
        let mut out = Tensor::zeros(&shape);
        let mut coeffs = Vec::with_capacity(terms.len());
        for &(v, k) in terms {
            if self.value(v).shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "combine of {:?} with {:?}",
                    self.value(v).shape(),
                    shape
                )));
            }
            let k = T::lit(k);
            for (o, &x) in out.data_mut().iter_mut().zip(self.value(v).data()) {
                *o = *o + k * x;
            }
            coeffs.push((v, k));
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(out, Op::Combine(coeffs), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.combine(&[(a, 1.0), (b, 1.0)])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.combine(&[(a, 1.0), (b, -1.0)])
    }

    /// Mean absolute difference, the L1 image distance.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "L1 distance between {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        self.mean(d)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat needs at least one input".into()))?;
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "channel concat of {:?} with {:?}",
                    self.value(p).shape(),
                    self.value(first).shape()
                )));
            }
            total_c += pc;
        }
        let mut out = Vec::with_capacity(n * total_c * h * w);
        for s in 0..n {
            for &p in parts {
                let t = self.value(p);
                let pc = t.shape()[1];
                out.extend_from_slice(&t.data()[s * pc * h * w..(s + 1) * pc * h * w]);
            }
        }
        let value = Tensor::from_vec(&[n, total_c, h, w], out)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatChannels(parts.to_vec()), needs))
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        {
            let xv = self.value(x).data();
            let od = out.data_mut();
            for plane in 0..n * c {
                let src = &xv[plane * h * w..(plane + 1) * h * w];
                let dst = &mut od[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::Upsample2x(x), needs))
    }

    /// `w / σ` where `σ = uᵀ W v` for the weight viewed as `out × rest`.
    /// `u` and `v` are treated as constants.
    pub fn spectral_normalized(&mut self, w: Var, u: &[T], v: &[T]) -> Result<Var> {
        let t = self.value(w);
        let rows = t.shape()[0];
        let cols = t.len() / rows.max(1);
        if u.len() != rows || v.len() != cols {
            return Err(Error::Shape(format!(
                "power-iteration vectors ({}, {}) do not match weight {rows}×{cols}",
                u.len(),
                v.len()
            )));
        }
        let sigma = bilinear(t.data(), u, v).max(T::lit(crate::nets::SPECTRAL_EPS));
        let value = t.map(|x| x / sigma);
        let needs = self.needs(w);
        Ok(self.push(
            value,
            Op::SpectralNorm {
                w,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                spec,
                cols,
            } => self.conv_backward(*x, *w, *b, *spec, cols.as_deref(), g, grads),
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, h, wd) = y.dims4().expect("rank-4 norm output");
                let hw = h * wd;
                let gv = self.value(*gamma).data();
                let gd = g.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); n * c * hw];
                let inv_hw = T::one() / T::lit(hw as f64);
                for s in 0..n {
                    for ch in 0..c {
                        let i0 = (s * c + ch) * hw;
                        let mut sum_g = T::zero();
                        let mut sum_gx = T::zero();
                        for i in i0..i0 + hw {
                            sum_g = sum_g + gd[i];
                            sum_gx = sum_gx + gd[i] * xhat[i];
                        }
                        dgamma[ch] = dgamma[ch] + sum_gx;
                        dbeta[ch] = dbeta[ch] + sum_g;
                        let k = gv[ch] * inv_std[s * c + ch];
                        let mg = sum_g * inv_hw;
                        let mgx = sum_gx * inv_hw;
                        for i in i0..i0 + hw {
                            dx[i] = k * (gd[i] - mg - xhat[i] * mgx);
                        }
                    }
                }
                self.accumulate(grads, *gamma, Tensor::from_vec(&[c], dgamma).unwrap());
                self.accumulate(grads, *beta, Tensor::from_vec(&[c], dbeta).unwrap());
                self.accumulate(grads, *x, Tensor::from_vec(y.shape(), dx).unwrap());
            }
            Op::Relu(x) => {
                let d = zip_map(g, y, |g, y| if y > T::zero() { g } else { T::zero() });
                self.accumulate(grads, *x, d);
            }
            Op::LeakyRelu(x, s) => {
                let xv = self.value(*x);
                let d = zip_map(g, xv, |g, x| if x > T::zero() { g } else { g * *s });
                self.accumulate(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = zip_map(g, y, |g, y| g * (T::one() - y * y));
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = zip_map(g, y, |g, y| g * y * (T::one() - y));
                self.accumulate(grads, *x, d);
            }
            Op::Abs(x) => {
                let xv = self.value(*x);
                let d = zip_map(g, xv, |g, x| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, d);
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                let two = T::lit(2.0);
                let d = zip_map(g, xv, |g, x| two * g * x);
                self.accumulate(grads, *x, d);
            }
            Op::Affine { x, scale } => {
                let d = g.map(|g| g * *scale);
                self.accumulate(grads, *x, d);
            }
            Op::LogClamp { x, eps } => {
                let xv = self.value(*x);
                let d = zip_map(g, xv, |g, x| if x > *eps { g / x } else { T::zero() });
                self.accumulate(grads, *x, d);
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let k = g.item() / T::lit(xv.len() as f64);
                self.accumulate(grads, *x, Tensor::full(xv.shape(), k));
            }
            Op::Combine(terms) => {
                for &(v, k) in terms {
                    self.accumulate(grads, v, g.map(|g| g * k));
                }
            }
            Op::ConcatChannels(parts) => {
                let (n, total_c, h, w) = y.dims4().expect("rank-4 concat");
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(n * pc * hw);
                        for s in 0..n {
                            let start = (s * total_c + offset) * hw;
                            d.extend_from_slice(&g.data()[start..start + pc * hw]);
                        }
                        self.accumulate(grads, p, Tensor::from_vec(&[n, pc, h, w], d).unwrap());
                    }
                    offset += pc;
                }
            }
            Op::Upsample2x(x) => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4().expect("rank-4 upsample");
                let mut d = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    let src = &g.data()[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                    let dst = &mut d[plane * h * w..(plane + 1) * h * w];
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            let t = &mut dst[(yy / 2) * w + xx / 2];
                            *t = *t + src[yy * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), d).unwrap());
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                // dL/dW = (G − ⟨G, W̄⟩ u vᵀ) / σ
                let inner: T = g.data().iter().zip(y.data()).map(|(&a, &b)| a * b).sum();
                let cols = v.len();
                let d: Vec<T> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| (gi - inner * u[i / cols] * v[i % cols]) / *sigma)
                    .collect();
                self.accumulate(grads, *w, Tensor::from_vec(y.shape(), d).unwrap());
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
        cached: Option<&[T]>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, cin, h, wd) = xv.dims4().expect("rank-4 conv input");
        let (cout, _, k, _) = wv.dims4().expect("rank-4 conv weight");
        let geom = ConvGeom::new(cin, h, wd, k, spec).expect("validated in forward");
        let howo = geom.ho * geom.wo;
        let ckk = cin * k * k;
        let gd = g.data();

        if let Some(b) = b.filter(|&b| self.needs(b)) {
            let mut db = vec![T::zero(); cout];
            for s in 0..n {
                for (co, acc) in db.iter_mut().enumerate() {
                    let start = (s * cout + co) * howo;
                    *acc = *acc + gd[start..start + howo].iter().copied().sum::<T>();
                }
            }
            self.accumulate(grads, b, Tensor::from_vec(&[cout], db).unwrap());
        }

        let want_w = self.needs(w);
        let want_x = self.needs(x);
        if !want_w && !want_x {
            return;
        }
        let direct = geom.direct(cout);
        let saved_len = if direct { cin * geom.hp * geom.wp } else { ckk * howo };
        let plen = cin * geom.hp * geom.wp;
        let mut xpad = Vec::new();
        let mut cols = if direct { Vec::new() } else { vec![T::zero(); ckk * howo] };
        let mut dpad = vec![T::zero(); plen];
        let mut dw = if want_w { vec![T::zero(); cout * ckk] } else { Vec::new() };
        let mut dx = if want_x { vec![T::zero(); n * cin * h * wd] } else { Vec::new() };
        for s in 0..n {
            let go = &gd[s * cout * howo..(s + 1) * cout * howo];
            let xs = &xv.data()[s * cin * h * wd..(s + 1) * cin * h * wd];
            if want_w {
                let buf: &[T] = match cached {
                    Some(all) => &all[s * saved_len..(s + 1) * saved_len],
                    None => {
                        geom.pad_input(xs, &mut xpad);
                        if direct {
                            &xpad
                        } else {
                            geom.im2col(&xpad, &mut cols);
                            &cols
                        }
                    }
                };
                if direct {
                    geom.direct_weight_grad(buf, go, cout, &mut dw);
                } else {
                    T::gemm(cout, howo, ckk, go, false, buf, true, &mut dw, true);
                }
            }
            if want_x {
                dpad.iter_mut().for_each(|v| *v = T::zero());
                if direct {
                    geom.direct_input_grad(wv.data(), go, cout, &mut dpad);
                } else {
                    T::gemm(ckk, cout, howo, wv.data(), true, go, false, &mut cols, false);
                    geom.col2im(&cols, &mut dpad);
                }
                geom.fold_padded(&dpad, &mut dx[s * cin * h * wd..(s + 1) * cin * h * wd]);
            }
        }
        if want_w {
            self.accumulate(grads, w, Tensor::from_vec(wv.shape(), dw).unwrap());
        }
        if want_x {
            self.accumulate(grads, x, Tensor::from_vec(xv.shape(), dx).unwrap());
        }
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).unwrap()
}

/// `uᵀ W v` for `W` stored row-major as `u.len() × v.len()`.
pub(crate) fn bilinear<T: Real>(w: &[T], u: &[T], v: &[T]) -> T {
    let cols = v.len();
    u.iter()
        .enumerate()
        .map(|(r, &ur)| {
            let row = &w[r * cols..(r + 1) * cols];
            ur * row.iter().zip(v).map(|(&a, &b)| a * b).sum::<T>()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reflect_index(i: isize, n: usize) -> isize {
        let n = n as isize;
        let i = i.abs();
        if i >= n {
            2 * (n - 1) - i
        } else {
            i
        }
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct-loop convolution used as an independent reference.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], spec: ConvSpec) -> Tensor<f64> {
        let (n, cin, h, wd) = x.dims4().unwrap();
        let (cout, _, k, _) = w.dims4().unwrap();
        let ho = spec.output_size(h, k).unwrap();
        let wo = spec.output_size(wd, k).unwrap();
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        let fetch = |s: usize, c: usize, iy: isize, ix: isize| -> f64 {
            let (iy, ix) = match spec.pad_mode {
                PadMode::Zero => {
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                        return 0.0;
                    }
                    (iy, ix)
                }
                PadMode::Reflect => (reflect_index(iy, h), reflect_index(ix, wd)),
            };
            x.data()[((s * cin + c) * h + iy as usize) * wd + ix as usize]
        };
        for s in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co];
                        for c in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * spec.stride + ki) as isize - spec.pad as isize;
                                    let ix = (ox * spec.stride + kj) as isize - spec.pad as isize;
                                    acc += w.data()[((co * cin + c) * k + ki) * k + kj]
                                        * fetch(s, c, iy, ix);
                                }
                            }
                        }
                        out.data_mut()[((s * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (spec, k) in [
            (ConvSpec::new(1, 1, PadMode::Zero), 3),
            (ConvSpec::new(2, 1, PadMode::Zero), 4),
            (ConvSpec::new(1, 3, PadMode::Reflect), 7),
            (ConvSpec::new(2, 1, PadMode::Reflect), 3),
        ] {
            let x = random(&[2, 3, 8, 9], &mut rng);
            let w = random(&[4, 3, k, k], &mut rng);
            let b = random(&[4], &mut rng);
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let y = g.conv2d(xv, wv, Some(bv), spec).unwrap();
            let expect = naive_conv(&x, &w, b.data(), spec);
            assert_eq!(g.value(y).shape(), expect.shape());
            for (a, e) in g.value(y).data().iter().zip(expect.data()) {
                assert!((a - e).abs() < 1e-12, "{spec:?}");
            }
        }
    }

    #[test]
    fn parameter_bound_twice_shares_one_leaf() {
        let mut g = Graph::<f64>::new();
        let key = ParamKey { owner: 1, index: 0 };
        let t = Tensor::scalar(2.0);
        let a = g.param(key, &t, true);
        let b = g.param(key, &t, true);
        assert_eq!(a, b);
        let s = g.add(a, b).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(a).unwrap().item(), 2.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::scalar(1.0));
        let v = g.variable(Tensor::scalar(3.0));
        let s = g.combine(&[(c, 2.0), (v, 5.0)]).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(v).unwrap().item(), 5.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let v = g.variable(Tensor::zeros(&[2]));
        assert!(g.backward(v).is_err());
    }

    #[test]
    fn reflect_padding_needs_room() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let w = g.constant(Tensor::zeros(&[1, 1, 7, 7]));
        assert!(g
            .conv2d(x, w, None, ConvSpec::new(1, 3, PadMode::Reflect))
            .is_err());
    }
}
