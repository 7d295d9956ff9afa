//! Eager tape: every op computes its value immediately and records what the
//! backward pass needs.

use std::collections::HashMap;

use rand::Rng;

use crate::conv::{col2im, im2col, ConvGeometry};
use crate::{Float, ParamId, ParamStore, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type ParamKey = (u64, usize);

enum Op<T> {
    Input,
    Param(ParamKey),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
        cols: Vec<T>,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    Concat(Var, Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Abs(Var),
    Square(Var),
    LogClamp {
        x: Var,
        floor: T,
    },
    Mean(Var),
    GlobalAvgPool(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<u8>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients<T> {
    by_param: HashMap<ParamKey, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, store: &ParamStore<T>, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&(store.uid(), id.0))
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.by_param.values().all(Tensor::all_finite)
    }
}

/// A single forward pass with its backward tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamKey, Var>,
    track_params: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    /// Graph whose parameter leaves require gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            track_params: true,
        }
    }

    /// Forward-only graph: nothing requires gradients, so no tape state is kept.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros([0, 0, 0, 0]))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls reuse the same leaf so
    /// gradients from shared use accumulate.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.uid(), id.0);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let track = self.track_params;
        let v = self.push(store.get(id).clone(), Op::Param(key), track);
        self.params.insert(key, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let [n, c, h, wd] = self.value(x).shape();
        let [co, ci, k, k2] = self.value(w).shape();
        assert_eq!(ci, c, "conv2d channel mismatch");
        assert_eq!(k, k2, "conv2d kernels must be square");
        let geo = ConvGeometry {
            in_channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
        };
        let (ho, wo) = (geo.out_height(), geo.out_width());
        let (kl, p) = (geo.patch_len(), geo.out_pixels());
        let keep_cols = self.rg(w);
        let mut out = Tensor::zeros([n, co, ho, wo]);
        let mut all_cols = if keep_cols { vec![T::zero(); n * kl * p] } else { Vec::new() };
        let mut scratch = if keep_cols { Vec::new() } else { vec![T::zero(); kl * p] };
        {
            let xv = &self.nodes[x.0].value;
            let wv = self.nodes[w.0].value.data();
            let bias = b.map(|b| self.nodes[b.0].value.data());
            let od = out.data_mut();
            for i in 0..n {
                let cols: &mut [T] = if keep_cols {
                    &mut all_cols[i * kl * p..(i + 1) * kl * p]
                } else {
                    &mut scratch
                };
                im2col(&geo, xv.item_slice(i), cols);
                let oi = &mut od[i * co * p..(i + 1) * co * p];
                T::gemm(co, kl, p, T::one(), wv, (kl as isize, 1), cols, (p as isize, 1), T::zero(), oi, (p as isize, 1));
                if let Some(bias) = bias {
                    for (o, &bv) in bias.iter().enumerate() {
                        oi[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += bv);
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geo,
                cols: all_cols,
            },
            rg,
        )
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64_lossy(slope);
        self.unary(x, move |v| if v > T::zero() { v } else { v * s }, Op::LeakyRelu(x, s))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (T::from_f64_lossy(scale), T::from_f64_lossy(shift));
        self.unary(x, move |v| v * s + t, Op::Affine(x, s))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamp(&mut self, x: Var, floor: f64) -> Var {
        let f = T::from_f64_lossy(floor);
        self.unary(x, move |v| v.max(f).ln(), Op::LogClamp { x, floor: f })
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_vec(av.shape(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = T::from_usize(xv.len()).expect("length fits");
        let s: T = xv.data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s / n), Op::Mean(x), rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let denom = T::from_usize(h * w).expect("fits");
        let mut data = Vec::with_capacity(n * c);
        for i in 0..n {
            for ch in 0..c {
                data.push(xv.plane(i, ch).iter().copied().sum::<T>() / denom);
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec([n, c, 1, 1], data), Op::GlobalAvgPool(x), rg)
    }

    /// 2x2 max pooling with stride 2; spatial dims must be even.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        let mut argmax = vec![0u32; n * c * ho * wo];
        let src = xv.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    let o = plane * ho * wo + oy * wo + ox;
                    out.data_mut()[o] = src[best];
                    argmax[o] = (best - base) as u32;
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::MaxPool2 { x, argmax }, rg)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
        let src = xv.data();
        let od = out.data_mut();
        for plane in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    od[plane * 4 * h * w + y * 2 * w + xx] = src[plane * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Upsample2(x), rg)
    }

    /// Channel concatenation `[a; b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let [n, ca, h, w] = av.shape();
        let [nb, cb, hb, wb] = bv.shape();
        assert_eq!((n, h, w), (nb, hb, wb), "concat shape mismatch");
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            data.extend_from_slice(av.item_slice(i));
            data.extend_from_slice(bv.item_slice(i));
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec([n, ca + cb, h, w], data), Op::Concat(a, b), rg)
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// rescales survivors by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        assert!(rate < 1.0, "dropout rate must be < 1");
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_vec(xv.shape(), data);
        let rg = self.rg(x);
        self.push(value, Op::Dropout { x, mask }, rg)
    }

    /// Mean over pixels of `-ln softmax(logits)[label]`. `labels` holds one class
    /// index per `(n, y, x)` position in row-major order.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Var {
        let lv = self.value(logits);
        let [n, c, h, w] = lv.shape();
        assert_eq!(labels.len(), n * h * w, "label count mismatch");
        let hw = h * w;
        let probs = softmax_channels(lv);
        let mut total = 0.0f64;
        for i in 0..n {
            for px in 0..hw {
                let label = labels[i * hw + px] as usize;
                assert!(label < c, "label {label} outside {c} classes");
                let logit_row = |ch: usize| lv.data()[(i * c + ch) * hw + px].as_f64();
                let m = (0..c).map(logit_row).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..c).map(|ch| (logit_row(ch) - m).exp()).sum::<f64>().ln();
                total += lse - logit_row(label);
            }
        }
        let loss = T::from_f64_lossy(total / (n * hw) as f64);
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Input => {}
                Op::Param(key) => {
                    out.by_param.insert(*key, Tensor::from_vec(node.value.shape(), g));
                }
                Op::Conv2d { x, w, b, geo, cols } => {
                    self.conv_backward(&mut grads, &g, *x, *w, *b, geo, cols);
                }
                Op::Relu(x) => self.acc_map(&mut grads, *x, &g, |i, gi| {
                    if self.nodes[idx].value.data()[i] > T::zero() { gi } else { T::zero() }
                }),
                Op::LeakyRelu(x, s) => {
                    let xv = self.value(*x).data();
                    self.acc_map(&mut grads, *x, &g, |i, gi| if xv[i] > T::zero() { gi } else { gi * *s });
                }
                Op::Tanh(x) => {
                    let y = node.value.data();
                    self.acc_map(&mut grads, *x, &g, |i, gi| gi * (T::one() - y[i] * y[i]));
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    self.acc_map(&mut grads, *x, &g, |i, gi| gi * y[i] * (T::one() - y[i]));
                }
                Op::Abs(x) => {
                    let xv = self.value(*x).data();
                    self.acc_map(&mut grads, *x, &g, |i, gi| gi * sign(xv[i]));
                }
                Op::Square(x) => {
                    let xv = self.value(*x).data();
                    let two = T::one() + T::one();
                    self.acc_map(&mut grads, *x, &g, |i, gi| gi * two * xv[i]);
                }
                Op::Affine(x, s) => self.acc_map(&mut grads, *x, &g, |_, gi| gi * *s),
                Op::LogClamp { x, floor } => {
                    let xv = self.value(*x).data();
                    self.acc_map(&mut grads, *x, &g, |i, gi| {
                        if xv[i] > *floor { gi / xv[i] } else { T::zero() }
                    });
                }
                Op::Add(a, b) => {
                    self.acc_map(&mut grads, *a, &g, |_, gi| gi);
                    self.acc_map(&mut grads, *b, &g, |_, gi| gi);
                }
                Op::Sub(a, b) => {
                    self.acc_map(&mut grads, *a, &g, |_, gi| gi);
                    self.acc_map(&mut grads, *b, &g, |_, gi| -gi);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    self.acc_map(&mut grads, *a, &g, |i, gi| gi * bv[i]);
                    self.acc_map(&mut grads, *b, &g, |i, gi| gi * av[i]);
                }
                Op::Mean(x) => {
                    let n = T::from_usize(self.value(*x).len()).expect("fits");
                    let gi = g[0] / n;
                    self.acc_map(&mut grads, *x, &[], |_, _| gi);
                }
                Op::GlobalAvgPool(x) => {
                    let [_, _, h, w] = self.value(*x).shape();
                    let denom = T::from_usize(h * w).expect("fits");
                    self.acc_map(&mut grads, *x, &[], |i, _| g[i / (h * w)] / denom);
                }
                Op::MaxPool2 { x, argmax } => {
                    let [n, c, h, w] = self.value(*x).shape();
                    if self.rg(*x) {
                        let (ho, wo) = (h / 2, w / 2);
                        let dst = acc_slot(&mut grads, *x, n * c * h * w);
                        for (o, (&gi, &am)) in g.iter().zip(argmax).enumerate() {
                            let plane = o / (ho * wo);
                            dst[plane * h * w + am as usize] += gi;
                        }
                    }
                }
                Op::Upsample2(x) => {
                    let [n, c, h, w] = self.value(*x).shape();
                    if self.rg(*x) {
                        let dst = acc_slot(&mut grads, *x, n * c * h * w);
                        for plane in 0..n * c {
                            for y in 0..2 * h {
                                for xx in 0..2 * w {
                                    dst[plane * h * w + (y / 2) * w + xx / 2] +=
                                        g[plane * 4 * h * w + y * 2 * w + xx];
                                }
                            }
                        }
                    }
                }
                Op::Concat(a, b) => {
                    let [n, ca, h, w] = self.value(*a).shape();
                    let cb = self.value(*b).shape()[1];
                    let (sa, sb) = (ca * h * w, cb * h * w);
                    if self.rg(*a) {
                        let dst = acc_slot(&mut grads, *a, n * sa);
                        for i in 0..n {
                            let src = &g[i * (sa + sb)..i * (sa + sb) + sa];
                            dst[i * sa..(i + 1) * sa].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                    if self.rg(*b) {
                        let dst = acc_slot(&mut grads, *b, n * sb);
                        for i in 0..n {
                            let src = &g[i * (sa + sb) + sa..(i + 1) * (sa + sb)];
                            dst[i * sb..(i + 1) * sb].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                }
                Op::Dropout { x, mask } => self.acc_map(&mut grads, *x, &g, |i, gi| gi * mask[i]),
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let [n, c, h, w] = self.value(*logits).shape();
                    let hw = h * w;
                    let scale = g[0] / T::from_usize(n * hw).expect("fits");
                    if self.rg(*logits) {
                        let dst = acc_slot(&mut grads, *logits, n * c * hw);
                        for i in 0..n {
                            for ch in 0..c {
                                for px in 0..hw {
                                    let k = (i * c + ch) * hw + px;
                                    let onehot = if labels[i * hw + px] as usize == ch { T::one() } else { T::zero() };
                                    dst[k] += scale * (probs[k] - onehot);
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates `f(i, g[i])` into the gradient slot of `x`. An empty `g`
    /// passes zero as the upstream value (used by broadcasting reductions).
    fn acc_map(&self, grads: &mut [Option<Vec<T>>], x: Var, g: &[T], f: impl Fn(usize, T) -> T) {
        if !self.rg(x) {
            return;
        }
        let len = self.value(x).len();
        let dst = acc_slot(grads, x, len);
        if g.is_empty() {
            dst.iter_mut().enumerate().for_each(|(i, d)| *d += f(i, T::zero()));
        } else {
            dst.iter_mut().zip(g).enumerate().for_each(|(i, (d, &gi))| *d += f(i, gi));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        grads: &mut [Option<Vec<T>>],
        g: &[T],
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: &ConvGeometry,
        cols: &[T],
    ) {
        let n = self.value(x).shape()[0];
        let wv = self.value(w);
        let co = wv.shape()[0];
        let (kl, p) = (geo.patch_len(), geo.out_pixels());
        if let Some(b) = b.filter(|&b| self.rg(b)) {
            let dst = acc_slot(grads, b, co);
            for i in 0..n {
                for (o, d) in dst.iter_mut().enumerate() {
                    *d += g[(i * co + o) * p..(i * co + o + 1) * p].iter().copied().sum::<T>();
                }
            }
        }
        if self.rg(w) {
            let dst = acc_slot(grads, w, co * kl);
            for i in 0..n {
                let gi = &g[i * co * p..(i + 1) * co * p];
                let ci = &cols[i * kl * p..(i + 1) * kl * p];
                T::gemm(co, p, kl, T::one(), gi, (p as isize, 1), ci, (1, p as isize), T::one(), dst, (kl as isize, 1));
            }
        }
        if self.rg(x) {
            let per = geo.in_channels * geo.height * geo.width;
            let mut dcols = vec![T::zero(); kl * p];
            let dst = acc_slot(grads, x, n * per);
            for i in 0..n {
                let gi = &g[i * co * p..(i + 1) * co * p];
                T::gemm(kl, co, p, T::one(), wv.data(), (1, kl as isize), gi, (p as isize, 1), T::zero(), &mut dcols, (p as isize, 1));
                col2im(geo, &dcols, &mut dst[i * per..(i + 1) * per]);
            }
        }
    }
}

fn acc_slot<T: Float>(grads: &mut [Option<Vec<T>>], x: Var, len: usize) -> &mut [T] {
    grads[x.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn sign<T: Float>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub(crate) fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Softmax over the channel axis of an NCHW tensor.
pub fn softmax_channels<T: Float>(logits: &Tensor<T>) -> Vec<T> {
    let [n, c, h, w] = logits.shape();
    let hw = h * w;
    let src = logits.data();
    let mut out = vec![T::zero(); src.len()];
    for i in 0..n {
        for px in 0..hw {
            let at = |ch: usize| (i * c + ch) * hw + px;
            let m = (0..c).map(|ch| src[at(ch)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for ch in 0..c {
                let e = (src[at(ch)] - m).exp();
                out[at(ch)] = e;
                z += e;
            }
            for ch in 0..c {
                out[at(ch)] /= z;
            }
        }
    }
    out
}
