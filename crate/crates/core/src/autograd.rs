//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation in creation order, so the tape is
//! already topologically sorted and [`Graph::backward`] walks it in reverse.
//! Nodes whose inputs never require gradients skip saving backward state.
//! Layouts are NCHW for feature maps and `[N, D]` for vectors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::types::IGNORE_LABEL;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Largest per-pixel cross-entropy term, `-ln(1e-12)`: probabilities are
/// floored at 1e-12 before the logarithm.
pub const CE_CAP: f64 = 27.631_021_115_928_547;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
    },
    ChannelNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        scale: Vec<T>,
        xhat: Vec<T>,
    },
    Upsample {
        x: Var,
    },
    Concat(Vec<Var>),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Mean(Var),
    PixelCe {
        logits: Var,
        grad: Vec<T>,
    },
    NegCosine {
        p: Var,
        z: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics from a training-mode batch norm, for running averages.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Stop-gradient: same value, treated as a constant by `backward`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Element-wise product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Dense 2-D convolution; `w` is `[out, in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::Shape(format!("conv2d: input {xs:?}, weight {ws:?}")));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [ws[0]] {
                return Err(Error::Shape("conv2d: bias length".into()));
            }
        }
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], ws[3], stride, pad)?;
        let (n, cout) = (xs[0], ws[0]);
        let (k, p) = (geom.k(), geom.p());
        let pointwise = geom.is_pointwise();
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let keep_cols = rg && !pointwise;
        let mut cols_all = if keep_cols { Vec::with_capacity(n * k * p) } else { Vec::new() };
        let mut out = vec![T::zero(); n * cout * p];
        let mut cols = vec![T::zero(); if pointwise { 0 } else { k * p }];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let in_sz = xs[1] * xs[2] * xs[3];
            for i in 0..n {
                let xi = &xv[i * in_sz..(i + 1) * in_sz];
                let src: &[T] = if pointwise {
                    xi
                } else {
                    geom.im2col(xi, &mut cols);
                    &cols
                };
                T::gemm(cout, k, p, wv, false, src, false, &mut out[i * cout * p..(i + 1) * cout * p], T::zero());
                if keep_cols {
                    cols_all.extend_from_slice(&cols);
                }
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for chunk in out.chunks_mut(p).enumerate() {
                    let c = chunk.0 % cout;
                    for o in chunk.1 {
                        *o += bv[c];
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, cout, geom.ho, geom.wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols: cols_all,
            },
            rg,
        ))
    }

    /// Depthwise stride-1 convolution; `w` is `[channels, 1, k, k]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[1] != 1 || ws[2] != ws[3] {
            return Err(Error::Shape(format!("depthwise: input {xs:?}, weight {ws:?}")));
        }
        let (n, c, h, wd, k) = (xs[0], xs[1], xs[2], xs[3], ws[2]);
        if 2 * pad + 1 != k {
            return Err(Error::Shape("depthwise: only same-size padding is supported".into()));
        }
        let mut out = vec![T::zero(); n * c * h * wd];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for img in 0..n {
                for ch in 0..c {
                    let base = (img * c + ch) * h * wd;
                    let kern = &wv[ch * k * k..(ch + 1) * k * k];
                    let bias = bv.map_or(T::zero(), |b| b[ch]);
                    for y in 0..h {
                        for xx in 0..wd {
                            let mut s = bias;
                            for ky in 0..k {
                                let iy = y as isize + ky as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = xx as isize + kx as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    s += kern[ky * k + kx] * xv[base + iy as usize * wd + ix as usize];
                                }
                            }
                            out[base + y * wd + xx] = s;
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::from_vec(&xs, out)?;
        Ok(self.push(value, Op::Depthwise { x, w, b, pad }, rg))
    }

    /// Layer normalization across the channel axis of every pixel.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || self.value(gamma).shape() != [xs[1]] || self.value(beta).shape() != [xs[1]] {
            return Err(Error::Shape(format!("channel_norm: input {xs:?}")));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let inv_c = T::one() / T::of(c as f64);
        let mut xhat = vec![T::zero(); n * c * hw];
        let mut rstd = vec![T::zero(); n * hw];
        let mut out = vec![T::zero(); n * c * hw];
        {
            let xv = self.value(x).data();
            let gv = self.value(gamma).data();
            let bv = self.value(beta).data();
            for img in 0..n {
                let base = img * c * hw;
                let mut mean = vec![T::zero(); hw];
                for ch in 0..c {
                    for (m, &v) in mean.iter_mut().zip(&xv[base + ch * hw..base + (ch + 1) * hw]) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m *= inv_c);
                let mut var = vec![T::zero(); hw];
                for ch in 0..c {
                    for ((s, &v), &m) in var.iter_mut().zip(&xv[base + ch * hw..base + (ch + 1) * hw]).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                let r = &mut rstd[img * hw..(img + 1) * hw];
                for (r, s) in r.iter_mut().zip(&var) {
                    *r = T::one() / (*s * inv_c + eps).sqrt();
                }
                for ch in 0..c {
                    let off = base + ch * hw;
                    for j in 0..hw {
                        let xh = (xv[off + j] - mean[j]) * r[j];
                        xhat[off + j] = xh;
                        out[off + j] = gv[ch] * xh + bv[ch];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::from_vec(&xs, out)?;
        if !rg {
            xhat.clear();
            rstd.clear();
        }
        Ok(self.push(value, Op::ChannelNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Training-mode batch normalization over every axis except channels
    /// (axis 1). Accepts `[N, C]` or `[N, C, H, W]`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let xs = self.value(x).shape().to_vec();
        let (n, c, sp) = norm_dims(&xs)?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Shape("batch_norm: affine length".into()));
        }
        let m = n * sp;
        if m < 2 {
            return Err(Error::Shape("batch_norm needs more than one value per channel".into()));
        }
        let mt = T::of(m as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        let mut xhat = vec![T::zero(); n * c * sp];
        let mut out = vec![T::zero(); n * c * sp];
        {
            let xv = self.value(x).data();
            let gv = self.value(gamma).data();
            let bv = self.value(beta).data();
            for ch in 0..c {
                let mut s = T::zero();
                for img in 0..n {
                    let off = (img * c + ch) * sp;
                    s += xv[off..off + sp].iter().copied().sum::<T>();
                }
                let mu = s / mt;
                let mut ss = T::zero();
                for img in 0..n {
                    let off = (img * c + ch) * sp;
                    for &v in &xv[off..off + sp] {
                        ss += (v - mu) * (v - mu);
                    }
                }
                let r = T::one() / (ss / mt + eps).sqrt();
                mean[ch] = mu;
                var[ch] = ss / T::of((m - 1) as f64);
                inv_std[ch] = r;
                for img in 0..n {
                    let off = (img * c + ch) * sp;
                    for j in off..off + sp {
                        let xh = (xv[j] - mu) * r;
                        xhat[j] = xh;
                        out[j] = gv[ch] * xh + bv[ch];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::from_vec(&xs, out)?;
        let v = self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, rg);
        Ok((v, BatchStats { mean, var }))
    }

    /// Evaluation-mode batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (n, c, sp) = norm_dims(&xs)?;
        if running_mean.len() != c || running_var.len() != c || self.value(gamma).shape() != [c] {
            return Err(Error::Shape("batch_norm_eval: statistics length".into()));
        }
        let scale: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); n * c * sp];
        let mut out = vec![T::zero(); n * c * sp];
        {
            let xv = self.value(x).data();
            let gv = self.value(gamma).data();
            let bv = self.value(beta).data();
            for img in 0..n {
                for ch in 0..c {
                    let off = (img * c + ch) * sp;
                    for j in off..off + sp {
                        let xh = (xv[j] - running_mean[ch]) * scale[ch];
                        xhat[j] = xh;
                        out[j] = gv[ch] * xh + bv[ch];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::from_vec(&xs, out)?;
        Ok(self.push(value, Op::ChannelAffine { x, gamma, beta, scale, xhat }, rg))
    }

    /// Bilinear resize of `[N, C, h, w]` to `[N, C, out_h, out_w]` with
    /// half-pixel centers (no corner alignment).
    pub fn upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || out_h == 0 || out_w == 0 {
            return Err(Error::Shape(format!("upsample: input {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let ty = LerpTable::<T>::new(h, out_h);
        let tx = LerpTable::<T>::new(w, out_w);
        let mut out = vec![T::zero(); n * c * out_h * out_w];
        {
            let xv = self.value(x).data();
            for plane in 0..n * c {
                let src = &xv[plane * h * w..(plane + 1) * h * w];
                let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
                bilinear_plane(src, w, dst, out_w, &ty, &tx);
            }
        }
        let rg = self.rg(x);
        let value = Tensor::from_vec(&[n, c, out_h, out_w], out)?;
        Ok(self.push(value, Op::Upsample { x }, rg))
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(*xs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?).shape().to_vec();
        if first.len() != 4 {
            return Err(Error::Shape("concat_channels expects NCHW".into()));
        }
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut total_c = 0;
        for &v in xs {
            let s = self.value(v).shape();
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::Shape(format!("concat: {s:?} vs {first:?}")));
            }
            total_c += s[1];
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for img in 0..n {
            for &v in xs {
                let t = self.value(v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[img * c * hw..(img + 1) * c * hw]);
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        let value = Tensor::from_vec(&[n, total_c, h, w], out)?;
        Ok(self.push(value, Op::Concat(xs.to_vec()), rg))
    }

    /// `[N, C, H, W]` to `[N, C]` by spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape("global_avg_pool expects NCHW".into()));
        }
        let hw = xs[2] * xs[3];
        let inv = T::one() / T::of(hw as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(x);
        let value = Tensor::from_vec(&xs[..2], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// `y = x W^T + b` with `x: [N, in]`, `W: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::Shape(format!("linear: input {xs:?}, weight {ws:?}")));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * dout];
        T::gemm(n, din, dout, self.value(x).data(), false, self.value(w).data(), true, &mut out, T::zero());
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != dout {
                return Err(Error::Shape("linear: bias length".into()));
            }
            for row in out.chunks_mut(dout) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::from_vec(&[n, dout], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / T::of(t.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Weighted per-pixel softmax cross-entropy, summed and divided by
    /// `normalizer`. `targets` holds one class id per pixel in NHW order;
    /// [`IGNORE_LABEL`] pixels contribute nothing. Each term is capped at
    /// [`CE_CAP`], which is the 1e-12 probability floor.
    pub fn pixel_cross_entropy(&mut self, logits: Var, targets: &[u8], weights: &[T], normalizer: T) -> Result<Var> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 4 {
            return Err(Error::Shape("pixel_cross_entropy expects NCHW logits".into()));
        }
        let (n, c, hw) = (ls[0], ls[1], ls[2] * ls[3]);
        if targets.len() != n * hw || weights.len() != n * hw {
            return Err(Error::Shape(format!(
                "pixel_cross_entropy: {} targets / {} weights for {} pixels",
                targets.len(),
                weights.len(),
                n * hw
            )));
        }
        let rg = self.rg(logits);
        let cap = T::of(CE_CAP);
        let mut grad = if rg { vec![T::zero(); n * c * hw] } else { Vec::new() };
        let mut total = T::zero();
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); c];
        for img in 0..n {
            let base = img * c * hw;
            for j in 0..hw {
                let t = targets[img * hw + j];
                if t == IGNORE_LABEL {
                    continue;
                }
                let t = t as usize;
                if t >= c {
                    return Err(Error::ClassOutOfRange {
                        id: t as u8,
                        num_classes: c,
                    });
                }
                let wgt = weights[img * hw + j];
                let mut mx = T::neg_infinity();
                for k in 0..c {
                    mx = mx.max(lv[base + k * hw + j]);
                }
                let mut z = T::zero();
                for (k, p) in probs.iter_mut().enumerate() {
                    *p = (lv[base + k * hw + j] - mx).exp();
                    z += *p;
                }
                let log_z = z.ln();
                let nll = -(lv[base + t * hw + j] - mx - log_z);
                let clipped = nll > cap;
                total += wgt * if clipped { cap } else { nll };
                if rg && !clipped && wgt != T::zero() {
                    let s = wgt / normalizer;
                    for (k, &p) in probs.iter().enumerate() {
                        let pk = p / z;
                        let y = if k == t { T::one() } else { T::zero() };
                        grad[base + k * hw + j] = s * (pk - y);
                    }
                }
            }
        }
        let value = Tensor::scalar(total / normalizer);
        Ok(self.push(value, Op::PixelCe { logits, grad }, rg))
    }

    /// Row-wise negative cosine similarity of `[N, D]` inputs, giving `[N]`.
    pub fn neg_cosine(&mut self, p: Var, z: Var) -> Result<Var> {
        let (ps, zs) = (self.value(p).shape(), self.value(z).shape());
        if ps.len() != 2 || ps != zs {
            return Err(Error::Shape(format!("neg_cosine: {ps:?} vs {zs:?}")));
        }
        let (n, d) = (ps[0], ps[1]);
        let mut out = Vec::with_capacity(n);
        {
            let (pv, zv) = (self.value(p).data(), self.value(z).data());
            for i in 0..n {
                out.push(neg_cosine_row(&pv[i * d..(i + 1) * d], &zv[i * d..(i + 1) * d])?);
            }
        }
        let rg = self.rg(p) || self.rg(z);
        let value = Tensor::from_vec(&[n], out)?;
        Ok(self.push(value, Op::NegCosine { p, z }, rg))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_vec(va.shape(), d)?);
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(vb.shape(), d)?);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                let mut out = g.clone();
                for (o, &x) in out.data_mut().iter_mut().zip(xv) {
                    if x <= T::zero() {
                        *o = T::zero();
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::Conv2d { x, w, b, stride, pad, cols } => {
                self.conv2d_backward(*x, *w, *b, *stride, *pad, cols, g, grads)?;
            }
            Op::Depthwise { x, w, b, pad } => {
                self.depthwise_backward(*x, *w, *b, *pad, g, grads);
            }
            Op::ChannelNorm { x, gamma, beta, xhat, rstd } => {
                let xs = self.value(*x).shape();
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let gv = self.value(*gamma).data();
                let dy = g.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); n * c * hw];
                let inv_c = T::one() / T::of(c as f64);
                for img in 0..n {
                    let base = img * c * hw;
                    let mut m1 = vec![T::zero(); hw];
                    let mut m2 = vec![T::zero(); hw];
                    for ch in 0..c {
                        let off = base + ch * hw;
                        for j in 0..hw {
                            let d = dy[off + j];
                            dgamma[ch] += d * xhat[off + j];
                            dbeta[ch] += d;
                            let dxh = d * gv[ch];
                            m1[j] += dxh;
                            m2[j] += dxh * xhat[off + j];
                        }
                    }
                    for ch in 0..c {
                        let off = base + ch * hw;
                        for j in 0..hw {
                            let dxh = dy[off + j] * gv[ch];
                            dx[off + j] = rstd[img * hw + j] * (dxh - m1[j] * inv_c - xhat[off + j] * m2[j] * inv_c);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xs, dx)?);
                self.accumulate(grads, *gamma, Tensor::from_vec(&[c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::from_vec(&[c], dbeta)?);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let xs = self.value(*x).shape();
                let (n, c, sp) = norm_dims(xs)?;
                let mt = T::of((n * sp) as f64);
                let gv = self.value(*gamma).data();
                let dy = g.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); dy.len()];
                for ch in 0..c {
                    let (mut s1, mut s2) = (T::zero(), T::zero());
                    for img in 0..n {
                        let off = (img * c + ch) * sp;
                        for j in off..off + sp {
                            s1 += dy[j];
                            s2 += dy[j] * xhat[j];
                        }
                    }
                    dbeta[ch] = s1;
                    dgamma[ch] = s2;
                    let k = gv[ch] * inv_std[ch] / mt;
                    for img in 0..n {
                        let off = (img * c + ch) * sp;
                        for j in off..off + sp {
                            dx[j] = k * (mt * dy[j] - s1 - xhat[j] * s2);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xs, dx)?);
                self.accumulate(grads, *gamma, Tensor::from_vec(&[c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::from_vec(&[c], dbeta)?);
            }
            Op::ChannelAffine { x, gamma, beta, scale, xhat } => {
                let xs = self.value(*x).shape();
                let (n, c, sp) = norm_dims(xs)?;
                let gv = self.value(*gamma).data();
                let dy = g.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); dy.len()];
                for img in 0..n {
                    for ch in 0..c {
                        let off = (img * c + ch) * sp;
                        for j in off..off + sp {
                            dgamma[ch] += dy[j] * xhat[j];
                            dbeta[ch] += dy[j];
                            dx[j] = dy[j] * gv[ch] * scale[ch];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xs, dx)?);
                self.accumulate(grads, *gamma, Tensor::from_vec(&[c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::from_vec(&[c], dbeta)?);
            }
            Op::Upsample { x } => {
                let xs = self.value(*x).shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let os = g.shape();
                let (oh, ow) = (os[2], os[3]);
                let ty = LerpTable::<T>::new(h, oh);
                let tx = LerpTable::<T>::new(w, ow);
                let mut dx = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    let src = &g.data()[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    bilinear_plane_adjoint(src, ow, dst, w, &ty, &tx);
                }
                self.accumulate(grads, *x, Tensor::from_vec(xs, dx)?);
            }
            Op::Concat(parts) => {
                let gs = g.shape();
                let (n, hw) = (gs[0], gs[2] * gs[3]);
                let total_c = gs[1];
                let mut offset = 0;
                for &v in parts {
                    let c = self.value(v).shape()[1];
                    if self.rg(v) {
                        let mut part = Vec::with_capacity(n * c * hw);
                        for img in 0..n {
                            let start = (img * total_c + offset) * hw;
                            part.extend_from_slice(&g.data()[start..start + c * hw]);
                        }
                        self.accumulate(grads, v, Tensor::from_vec(self.value(v).shape(), part)?);
                    }
                    offset += c;
                }
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.value(*x).shape();
                let hw = xs[2] * xs[3];
                let inv = T::one() / T::of(hw as f64);
                let mut dx = Vec::with_capacity(self.value(*x).len());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat(gv * inv).take(hw));
                }
                self.accumulate(grads, *x, Tensor::from_vec(xs, dx)?);
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape();
                let ws = self.value(*w).shape();
                let (n, din, dout) = (xs[0], xs[1], ws[0]);
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * din];
                    T::gemm(n, dout, din, g.data(), false, self.value(*w).data(), false, &mut dx, T::zero());
                    self.accumulate(grads, *x, Tensor::from_vec(xs, dx)?);
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    T::gemm(dout, n, din, g.data(), true, self.value(*x).data(), false, &mut dw, T::zero());
                    self.accumulate(grads, *w, Tensor::from_vec(ws, dw)?);
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); dout];
                    for row in g.data().chunks(dout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(&[dout], db)?);
                }
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                let gv = g.item() / T::of(t.len() as f64);
                self.accumulate(grads, *x, Tensor::full(t.shape(), gv));
            }
            Op::PixelCe { logits, grad } => {
                let s = g.item();
                let t = self.value(*logits);
                let data = grad.iter().map(|&v| v * s).collect();
                self.accumulate(grads, *logits, Tensor::from_vec(t.shape(), data)?);
            }
            Op::NegCosine { p, z } => {
                let ps = self.value(*p).shape();
                let d = ps[1];
                let (pv, zv) = (self.value(*p).data(), self.value(*z).data());
                let mut dp = vec![T::zero(); pv.len()];
                let mut dz = vec![T::zero(); zv.len()];
                for (i, &gi) in g.data().iter().enumerate() {
                    let r = i * d..(i + 1) * d;
                    let (gp, gz) = neg_cosine_row_grad(&pv[r.clone()], &zv[r.clone()]);
                    for (o, v) in dp[r.clone()].iter_mut().zip(gp) {
                        *o = gi * v;
                    }
                    for (o, v) in dz[r].iter_mut().zip(gz) {
                        *o = gi * v;
                    }
                }
                self.accumulate(grads, *p, Tensor::from_vec(ps, dp)?);
                self.accumulate(grads, *z, Tensor::from_vec(ps, dz)?);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], ws[3], stride, pad)?;
        let (n, cout, k, p) = (xs[0], ws[0], geom.k(), geom.p());
        let pointwise = geom.is_pointwise();
        let in_sz = xs[1] * xs[2] * xs[3];
        let gd = g.data();
        if self.rg(w) {
            let mut dw = vec![T::zero(); cout * k];
            for i in 0..n {
                let src = if pointwise {
                    &self.value(x).data()[i * in_sz..(i + 1) * in_sz]
                } else {
                    &cols[i * k * p..(i + 1) * k * p]
                };
                T::gemm(cout, p, k, &gd[i * cout * p..(i + 1) * cout * p], false, src, true, &mut dw, T::one());
            }
            self.accumulate(grads, w, Tensor::from_vec(ws, dw)?);
        }
        if let Some(b) = b {
            let mut db = vec![T::zero(); cout];
            for (idx, chunk) in gd.chunks(p).enumerate() {
                db[idx % cout] += chunk.iter().copied().sum::<T>();
            }
            self.accumulate(grads, b, Tensor::from_vec(&[cout], db)?);
        }
        if self.rg(x) {
            let wv = self.value(w).data();
            let mut dx = vec![T::zero(); n * in_sz];
            let mut dcols = vec![T::zero(); k * p];
            for i in 0..n {
                let gi = &gd[i * cout * p..(i + 1) * cout * p];
                if pointwise {
                    T::gemm(k, cout, p, wv, true, gi, false, &mut dx[i * in_sz..(i + 1) * in_sz], T::zero());
                } else {
                    T::gemm(k, cout, p, wv, true, gi, false, &mut dcols, T::zero());
                    geom.col2im(&dcols, &mut dx[i * in_sz..(i + 1) * in_sz]);
                }
            }
            self.accumulate(grads, x, Tensor::from_vec(xs, dx)?);
        }
        Ok(())
    }

    fn depthwise_backward(&self, x: Var, w: Var, b: Option<Var>, pad: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let xs = self.value(x).shape();
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let k = self.value(w).shape()[2];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let gd = g.data();
        let mut dx = vec![T::zero(); xv.len()];
        let mut dw = vec![T::zero(); wv.len()];
        let mut db = vec![T::zero(); c];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * h * wd;
                let kern = &wv[ch * k * k..(ch + 1) * k * k];
                let dk = &mut dw[ch * k * k..(ch + 1) * k * k];
                for y in 0..h {
                    for xx in 0..wd {
                        let go = gd[base + y * wd + xx];
                        db[ch] += go;
                        for ky in 0..k {
                            let iy = y as isize + ky as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = xx as isize + kx as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let src = base + iy as usize * wd + ix as usize;
                                dk[ky * k + kx] += go * xv[src];
                                dx[src] += go * kern[ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
        let xs = xs.to_vec();
        let ws = self.value(w).shape().to_vec();
        self.accumulate(grads, x, Tensor::from_vec(&xs, dx).expect("shape"));
        self.accumulate(grads, w, Tensor::from_vec(&ws, dw).expect("shape"));
        if let Some(b) = b {
            self.accumulate(grads, b, Tensor::from_vec(&[c], db).expect("shape"));
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` when no path from `v` reached the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn norm_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        _ => Err(Error::Shape(format!("normalization over {shape:?}"))),
    }
}

/// Negative cosine similarity of two vectors; norms under 1e-12 are zero.
pub fn neg_cosine_row<T: Scalar>(p: &[T], z: &[T]) -> Result<T> {
    let np = p.iter().map(|&v| v * v).sum::<T>().sqrt();
    let nz = z.iter().map(|&v| v * v).sum::<T>().sqrt();
    let eps = T::of(1e-12);
    if np < eps || nz < eps {
        return Err(Error::ZeroVector);
    }
    let dot: T = p.iter().zip(z).map(|(&a, &b)| a * b).sum();
    Ok(-(dot / (np * nz)))
}

/// Partial derivatives of [`neg_cosine_row`] with respect to `p` and `z`.
pub fn neg_cosine_row_grad<T: Scalar>(p: &[T], z: &[T]) -> (Vec<T>, Vec<T>) {
    let np = p.iter().map(|&v| v * v).sum::<T>().sqrt();
    let nz = z.iter().map(|&v| v * v).sum::<T>().sqrt();
    let dot: T = p.iter().zip(z).map(|(&a, &b)| a * b).sum();
    let cos = dot / (np * nz);
    let inv = T::one() / (np * nz);
    let gp = p.iter().zip(z).map(|(&a, &b)| -(b * inv - cos * a / (np * np))).collect();
    let gz = p.iter().zip(z).map(|(&a, &b)| -(a * inv - cos * b / (nz * nz))).collect();
    (gp, gz)
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(cin: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} stride {stride} pad {pad} on {h}x{w}"
            )));
        }
        Ok(Self {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let p = self.p();
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * p;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut cols[row + oy * self.wo..row + (oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..(c * self.h + iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.p();
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * p;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                dx[base + ix as usize] += cols[row + oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Source indices and weights for one axis of a bilinear resize.
pub(crate) struct LerpTable<T> {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<T>,
}

impl<T: Scalar> LerpTable<T> {
    pub(crate) fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for o in 0..dst {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let l = (s.floor() as usize).min(src - 1);
            let h = (l + 1).min(src - 1);
            lo.push(l);
            hi.push(h);
            frac.push(T::of(s - l as f64));
        }
        Self { lo, hi, frac }
    }
}

pub(crate) fn bilinear_plane<T: Scalar>(src: &[T], w: usize, dst: &mut [T], ow: usize, ty: &LerpTable<T>, tx: &LerpTable<T>) {
    for (oy, row) in dst.chunks_mut(ow).enumerate() {
        let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
        let r0 = &src[y0 * w..(y0 + 1) * w];
        let r1 = &src[y1 * w..(y1 + 1) * w];
        for (ox, d) in row.iter_mut().enumerate() {
            let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
            *d = top + (bot - top) * fy;
        }
    }
}

fn bilinear_plane_adjoint<T: Scalar>(g: &[T], ow: usize, dx: &mut [T], w: usize, ty: &LerpTable<T>, tx: &LerpTable<T>) {
    let one = T::one();
    for (oy, row) in g.chunks(ow).enumerate() {
        let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
        for (ox, &gv) in row.iter().enumerate() {
            let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
            let top = gv * (one - fy);
            let bot = gv * fy;
            dx[y0 * w + x0] += top * (one - fx);
            dx[y0 * w + x1] += top * fx;
            dx[y1 * w + x0] += bot * (one - fx);
            dx[y1 * w + x1] += bot * fx;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Builds `f` around fresh leaves and compares analytic gradients with
    /// central differences for every input.
    fn check_grads(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var, tol: f64) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out).unwrap();
        let h = 1e-6;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).expect("gradient present");
            for j in 0..input.len() {
                let eval = |delta: f64| {
                    let mut g = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(k, t)| {
                            let mut t = t.clone();
                            if k == i {
                                t.data_mut()[j] += delta;
                            }
                            g.param(t)
                        })
                        .collect();
                    let o = f(&mut g, &vs);
                    g.value(o).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[j];
                assert!(
                    (a - numeric).abs() <= tol * (1.0 + numeric.abs()),
                    "input {i} elem {j}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    /// Reduces a tensor to a scalar with fixed pseudo-random weights so
    /// every output element influences the check.
    fn probe(g: &mut Graph<f64>, v: Var) -> Var {
        let shape = g.value(v).shape().to_vec();
        let w = g.constant(Tensor::from_fn(&shape, |i| ((i as f64) * 0.731).sin() + 0.1));
        let y = g.mul(v, w).unwrap();
        g.mean(y)
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (4, 0, 4), (1, 0, 1)] {
            let x = rand_tensor(&mut rng, &[2, 3, 6, 5]);
            let w = rand_tensor(&mut rng, &[4, 3, k, k]);
            let b = rand_tensor(&mut rng, &[4]);
            check_grads(
                vec![x, w, b],
                |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap();
                    probe(g, y)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[1, 2, 5, 5]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, None, 2, 1).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), &[1, 3, 3, 3]);
        for o in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    s += w.data()[((o * 2 + c) * 3 + ky) * 3 + kx]
                                        * x.data()[(c * 5 + iy as usize) * 5 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((out.data()[(o * 3 + oy) * 3 + ox] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn depthwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 3, 4, 5]);
        let w = rand_tensor(&mut rng, &[3, 1, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        check_grads(
            vec![x, w, b],
            |g, v| {
                let y = g.depthwise_conv2d(v[0], v[1], Some(v[2]), 1).unwrap();
                probe(g, y)
            },
            1e-6,
        );
    }

    #[test]
    fn normalization_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[2, 3, 2, 3]);
        let gamma = rand_tensor(&mut rng, &[3]);
        let beta = rand_tensor(&mut rng, &[3]);
        check_grads(
            vec![x.clone(), gamma.clone(), beta.clone()],
            |g, v| {
                let y = g.channel_norm(v[0], v[1], v[2], 1e-5).unwrap();
                probe(g, y)
            },
            1e-5,
        );
        check_grads(
            vec![x.clone(), gamma.clone(), beta.clone()],
            |g, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], 1e-5).unwrap();
                probe(g, y)
            },
            1e-5,
        );
        let x2 = rand_tensor(&mut rng, &[5, 3]);
        check_grads(
            vec![x2, gamma.clone(), beta.clone()],
            |g, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], 1e-5).unwrap();
                probe(g, y)
            },
            1e-5,
        );
        check_grads(
            vec![x, gamma, beta],
            |g, v| {
                let y = g
                    .batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0], 1e-5)
                    .unwrap();
                probe(g, y)
            },
            1e-6,
        );
    }

    #[test]
    fn spatial_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[2, 3, 3, 3]);
        check_grads(
            vec![a.clone(), b],
            |g, v| {
                let c = g.concat_channels(&[v[0], v[1]]).unwrap();
                let r = g.relu(c);
                let u = g.upsample(r, 7, 5).unwrap();
                probe(g, u)
            },
            1e-6,
        );
        check_grads(
            vec![a],
            |g, v| {
                let p = g.global_avg_pool(v[0]).unwrap();
                let s = g.scale(p, 1.7);
                probe(g, s)
            },
            1e-6,
        );
    }

    #[test]
    fn linear_and_cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[5, 4]);
        let b = rand_tensor(&mut rng, &[5]);
        check_grads(
            vec![x, w, b],
            |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
                probe(g, y)
            },
            1e-6,
        );
        let logits = rand_tensor(&mut rng, &[2, 3, 2, 2]).map(|v| 3.0 * v);
        let targets = vec![0, 1, 2, IGNORE_LABEL, 2, 2, 0, 1];
        let weights = vec![1.0, 0.5, 1.0, 1.0, 0.25, 1.0, 1.0, 0.75];
        check_grads(
            vec![logits],
            |g, v| g.pixel_cross_entropy(v[0], &targets, &weights, 7.0).unwrap(),
            1e-6,
        );
    }

    #[test]
    fn neg_cosine_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = rand_tensor(&mut rng, &[3, 4]);
        let z = rand_tensor(&mut rng, &[3, 4]);
        check_grads(
            vec![p, z],
            |g, v| {
                let d = g.neg_cosine(v[0], v[1]).unwrap();
                g.mean(d)
            },
            1e-6,
        );
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap());
        let z = g.param(Tensor::from_vec(&[1, 2], vec![3.0, -1.0]).unwrap());
        let zs = g.detach(z);
        let d = g.neg_cosine(p, zs).unwrap();
        let loss = g.mean(d);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(p).is_some());
        assert!(grads.get(z).is_none());
    }

    #[test]
    fn cross_entropy_caps_saturated_terms() {
        let mut g = Graph::<f64>::new();
        let logits = g.param(Tensor::from_vec(&[1, 2, 1, 1], vec![0.0, 100.0]).unwrap());
        let loss = g.pixel_cross_entropy(logits, &[0], &[1.0], 1.0).unwrap();
        assert!((g.value(loss).item() - CE_CAP).abs() < 1e-12);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(logits).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn neg_cosine_rejects_zero_vector() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::zeros(&[1, 3]));
        let z = g.constant(Tensor::full(&[1, 3], 1.0));
        assert!(matches!(g.neg_cosine(p, z), Err(Error::ZeroVector)));
    }
}
