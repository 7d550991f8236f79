//! Neural network primitives with hand-written backward passes.
//!
//! Layouts: 2-D feature maps are `[B, C, H, W]`, token sequences `[B, N, C]`,
//! and the causal 1-D convolution consumes `[B, D, L]`.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Silu,
    Sigmoid,
    Softplus,
}

pub fn activation<'t, T: Float>(kind: Activation, x: Var<'t, T>) -> Var<'t, T> {
    match kind {
        Activation::LeakyRelu(slope) => x.leaky_relu(slope),
        Activation::Silu => x.silu(),
        Activation::Sigmoid => x.sigmoid(),
        Activation::Softplus => x.softplus(),
    }
}

/// Stride-1 2-D convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Dense convolution that preserves spatial size.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            padding: kernel / 2,
            groups: 1,
        }
    }

    /// One filter per channel.
    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        ConvSpec {
            groups: channels,
            ..Self::same(channels, channels, kernel)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return Err(Error::InvalidSpec(format!("zero extent in {self:?}")));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::InvalidSpec(format!(
                "channels not divisible by groups in {self:?}"
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidSpec(format!(
                "2-D kernel must be odd, got {}",
                self.kernel
            )));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        ]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            h + 2 * self.padding + 1 - self.kernel,
            w + 2 * self.padding + 1 - self.kernel,
        )
    }

    /// Multiply-accumulates for one `[batch, C, h, w]` input.
    pub fn macs(&self, batch: usize, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.output_hw(h, w);
        (batch * self.out_channels * oh * ow * (self.in_channels / self.groups) * self.kernel * self.kernel) as u64
    }
}

fn dims4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    shape
        .try_into()
        .map_err(|_| Error::ShapeMismatch(format!("{what} expects [B,C,H,W], got {shape:?}")))
}

/// Cross-correlation with zero padding.
pub fn conv2d<'t, T: Float>(
    x: Var<'t, T>,
    spec: &ConvSpec,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    spec.validate()?;
    let xv = x.value();
    let wv = weight.value();
    let [b, c, h, w] = dims4(xv.shape(), "conv2d")?;
    if c != spec.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "conv2d input has {c} channels, spec expects {}",
            spec.in_channels
        )));
    }
    if wv.shape() != spec.weight_shape() {
        return Err(Error::ShapeMismatch(format!(
            "conv2d weight {:?}, expected {:?}",
            wv.shape(),
            spec.weight_shape()
        )));
    }
    let bv = match bias {
        Some(bias) => {
            let bv = bias.value();
            if bv.shape() != [spec.out_channels] {
                return Err(Error::ShapeMismatch(format!(
                    "conv2d bias {:?}, expected [{}]",
                    bv.shape(),
                    spec.out_channels
                )));
            }
            Some(bv)
        }
        None => None,
    };
    let geo = ConvGeom::new(spec, b, h, w);
    let out = geo.forward(xv.data(), wv.data(), bv.as_ref().map(|t| t.data()));
    x.tape().add_macs(spec.macs(b, h, w));
    let out_shape = vec![b, spec.out_channels, geo.oh, geo.ow];

    let mut parents = vec![x, weight];
    parents.extend(bias);
    let has_bias = bias.is_some();
    Ok(x.tape().record(
        Tensor::from_raw(out_shape, out),
        &parents,
        Box::new(move |g, need| {
            let gx = need[0].then(|| Tensor::from_raw(xv.shape().to_vec(), geo.backward_input(g.data(), wv.data())));
            let gw = need[1].then(|| Tensor::from_raw(wv.shape().to_vec(), geo.backward_weight(g.data(), xv.data())));
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(need[2].then(|| Tensor::from_raw(vec![geo.spec.out_channels], geo.backward_bias(g.data()))));
            }
            grads
        }),
    ))
}

#[derive(Clone, Copy)]
struct ConvGeom {
    spec: ConvSpec,
    b: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(spec: &ConvSpec, b: usize, h: usize, w: usize) -> Self {
        let (oh, ow) = spec.output_hw(h, w);
        ConvGeom {
            spec: *spec,
            b,
            h,
            w,
            oh,
            ow,
        }
    }

    /// Visits every (batch, out channel, in channel, tap, output row) as
    /// `(weight index, output offset, input offset, run length)` over the
    /// contiguous columns that read valid input.
    #[inline]
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let s = &self.spec;
        let cin_g = s.in_channels / s.groups;
        let cout_g = s.out_channels / s.groups;
        let k = s.kernel;
        let p = s.padding as isize;
        for bi in 0..self.b {
            for oc in 0..s.out_channels {
                let g = oc / cout_g;
                for icg in 0..cin_g {
                    let ic = g * cin_g + icg;
                    for kh in 0..k {
                        for kw in 0..k {
                            let w_idx = ((oc * cin_g + icg) * k + kh) * k + kw;
                            let dx = kw as isize - p;
                            let lo = (-dx).max(0) as usize;
                            let hi = ((self.w as isize - dx).min(self.ow as isize)).max(0) as usize;
                            if lo >= hi {
                                continue;
                            }
                            for oh in 0..self.oh {
                                let ih = oh as isize + kh as isize - p;
                                if ih < 0 || ih >= self.h as isize {
                                    continue;
                                }
                                let in_row = ((bi * s.in_channels + ic) * self.h + ih as usize) * self.w;
                                let out_row = ((bi * s.out_channels + oc) * self.oh + oh) * self.ow;
                                // input column = output column + dx
                                let in_start = (in_row as isize + lo as isize + dx) as usize;
                                f(w_idx, out_row + lo, in_start, hi - lo);
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward<T: Float>(&self, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
        let plane = self.oh * self.ow;
        let mut out = vec![T::zero(); self.b * self.spec.out_channels * plane];
        if let Some(bias) = bias {
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                let v = bias[i % self.spec.out_channels];
                chunk.iter_mut().for_each(|o| *o = v);
            }
        }
        self.for_each_row(|w_idx, o, i, n| {
            let wv = w[w_idx];
            let dst = &mut out[o..o + n];
            let src = &x[i..i + n];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o += wv * v;
            }
        });
        out
    }

    fn backward_input<T: Float>(&self, g: &[T], w: &[T]) -> Vec<T> {
        let mut gx = vec![T::zero(); self.b * self.spec.in_channels * self.h * self.w];
        self.for_each_row(|w_idx, o, i, n| {
            let wv = w[w_idx];
            let src = &g[o..o + n];
            let dst = &mut gx[i..i + n];
            for (d, &gv) in dst.iter_mut().zip(src) {
                *d += wv * gv;
            }
        });
        gx
    }

    fn backward_weight<T: Float>(&self, g: &[T], x: &[T]) -> Vec<T> {
        let mut gw = vec![T::zero(); self.spec.weight_shape().iter().product()];
        self.for_each_row(|w_idx, o, i, n| {
            let src = &g[o..o + n];
            let xs = &x[i..i + n];
            let mut s = T::zero();
            for (&gv, &xv) in src.iter().zip(xs) {
                s += gv * xv;
            }
            gw[w_idx] += s;
        });
        gw
    }

    fn backward_bias<T: Float>(&self, g: &[T]) -> Vec<T> {
        let plane = self.oh * self.ow;
        let mut gb = vec![T::zero(); self.spec.out_channels];
        for (i, chunk) in g.chunks(plane).enumerate() {
            gb[i % self.spec.out_channels] += chunk.iter().copied().sum();
        }
        gb
    }
}

/// Depthwise causal 1-D convolution on `[B, D, L]` with weight `[D, width]`.
///
/// `y[t] = bias + sum_j w[j] * x[t - (width - 1) + j]`, left-padded with zeros,
/// so the last tap multiplies the current position.
pub fn conv1d_causal<'t, T: Float>(x: Var<'t, T>, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
    let xv = x.value();
    let wv = weight.value();
    let [b, d, l]: [usize; 3] = xv
        .shape()
        .try_into()
        .map_err(|_| Error::ShapeMismatch(format!("conv1d expects [B,D,L], got {:?}", xv.shape())))?;
    if wv.ndim() != 2 || wv.shape()[0] != d {
        return Err(Error::ShapeMismatch(format!(
            "conv1d weight {:?} for {d} channels",
            wv.shape()
        )));
    }
    let width = wv.shape()[1];
    if width < 1 {
        return Err(Error::InvalidSpec("conv1d width must be >= 1".into()));
    }
    let bv = bias.map(|b| b.value());
    if let Some(bv) = &bv {
        if bv.shape() != [d] {
            return Err(Error::ShapeMismatch(format!("conv1d bias {:?}", bv.shape())));
        }
    }
    let mut out = vec![T::zero(); b * d * l];
    for bi in 0..b {
        for c in 0..d {
            let row = (bi * d + c) * l;
            let init = bv.as_ref().map_or(T::zero(), |bv| bv.data()[c]);
            for t in 0..l {
                let mut s = init;
                for j in 0..width {
                    let src = t as isize - (width - 1) as isize + j as isize;
                    if src >= 0 {
                        s += wv.data()[c * width + j] * xv.data()[row + src as usize];
                    }
                }
                out[row + t] = s;
            }
        }
    }
    x.tape().add_macs((b * d * l * width) as u64);
    let mut parents = vec![x, weight];
    parents.extend(bias);
    let has_bias = bias.is_some();
    Ok(x.tape().record(
        Tensor::from_raw(vec![b, d, l], out),
        &parents,
        Box::new(move |g, need| {
            let mut gx = need[0].then(|| vec![T::zero(); b * d * l]);
            let mut gw = need[1].then(|| vec![T::zero(); d * width]);
            let mut gb = (has_bias && need[2]).then(|| vec![T::zero(); d]);
            for bi in 0..b {
                for c in 0..d {
                    let row = (bi * d + c) * l;
                    for t in 0..l {
                        let gv = g.data()[row + t];
                        if let Some(gb) = gb.as_mut() {
                            gb[c] += gv;
                        }
                        for j in 0..width {
                            let src = t as isize - (width - 1) as isize + j as isize;
                            if src < 0 {
                                continue;
                            }
                            let src = row + src as usize;
                            if let Some(gx) = gx.as_mut() {
                                gx[src] += wv.data()[c * width + j] * gv;
                            }
                            if let Some(gw) = gw.as_mut() {
                                gw[c * width + j] += xv.data()[src] * gv;
                            }
                        }
                    }
                }
            }
            let mut grads = vec![
                gx.map(|v| Tensor::from_raw(vec![b, d, l], v)),
                gw.map(|v| Tensor::from_raw(vec![d, width], v)),
            ];
            if has_bias {
                grads.push(gb.map(|v| Tensor::from_raw(vec![d], v)));
            }
            grads
        }),
    ))
}

/// Affine map over the last axis: `x[.., d_in] @ W[d_in, d_out] + b`.
pub fn linear<'t, T: Float>(x: Var<'t, T>, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
    let xv = x.value();
    let wv = weight.value();
    let d_in = *xv.shape().last().expect("rank >= 1");
    if wv.ndim() != 2 || wv.shape()[0] != d_in {
        return Err(Error::ShapeMismatch(format!(
            "linear weight {:?} for trailing extent {d_in}",
            wv.shape()
        )));
    }
    let d_out = wv.shape()[1];
    let bv = bias.map(|b| b.value());
    if let Some(bv) = &bv {
        if bv.shape() != [d_out] {
            return Err(Error::ShapeMismatch(format!(
                "linear bias {:?}, expected [{d_out}]",
                bv.shape()
            )));
        }
    }
    let rows = xv.numel() / d_in;
    let mut out = vec![T::zero(); rows * d_out];
    if let Some(bv) = &bv {
        for row in out.chunks_mut(d_out) {
            row.copy_from_slice(bv.data());
        }
    }
    crate::tensor::gemm(xv.data(), wv.data(), &mut out, rows, d_in, d_out);
    x.tape().add_macs((rows * d_in * d_out) as u64);
    let mut out_shape = xv.shape().to_vec();
    *out_shape.last_mut().expect("rank >= 1") = d_out;

    let mut parents = vec![x, weight];
    parents.extend(bias);
    let has_bias = bias.is_some();
    Ok(x.tape().record(
        Tensor::from_raw(out_shape, out),
        &parents,
        Box::new(move |g, need| {
            let gd = g.data();
            let gx = need[0].then(|| {
                let mut gx = vec![T::zero(); rows * d_in];
                for r in 0..rows {
                    let grow = &gd[r * d_out..(r + 1) * d_out];
                    for i in 0..d_in {
                        let wrow = &wv.data()[i * d_out..(i + 1) * d_out];
                        let mut s = T::zero();
                        for (&a, &b) in grow.iter().zip(wrow) {
                            s += a * b;
                        }
                        gx[r * d_in + i] = s;
                    }
                }
                Tensor::from_raw(xv.shape().to_vec(), gx)
            });
            let gw = need[1].then(|| {
                let mut gw = vec![T::zero(); d_in * d_out];
                for r in 0..rows {
                    let grow = &gd[r * d_out..(r + 1) * d_out];
                    for i in 0..d_in {
                        let xv = xv.data()[r * d_in + i];
                        if xv == T::zero() {
                            continue;
                        }
                        for (dst, &gv) in gw[i * d_out..(i + 1) * d_out].iter_mut().zip(grow) {
                            *dst += xv * gv;
                        }
                    }
                }
                Tensor::from_raw(vec![d_in, d_out], gw)
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(need[2].then(|| {
                    let mut gb = vec![T::zero(); d_out];
                    for row in gd.chunks(d_out) {
                        for (b, &v) in gb.iter_mut().zip(row) {
                            *b += v;
                        }
                    }
                    Tensor::from_raw(vec![d_out], gb)
                }));
            }
            grads
        }),
    ))
}

/// `(outer, channels, inner)` factorization of a shape around `axis`.
fn around_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidShape(format!("axis {axis} out of range for {shape:?}")));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Axis holding channels: last for tokens `[B,N,C]`, 1 for maps `[B,C,H,W]`.
pub fn channel_axis(shape: &[usize]) -> usize {
    if shape.len() == 4 {
        1
    } else {
        shape.len() - 1
    }
}

fn check_affine<T: Float>(scale: &Tensor<T>, bias: &Tensor<T>, c: usize) -> Result<()> {
    if scale.shape() != [c] || bias.shape() != [c] {
        return Err(Error::ShapeMismatch(format!(
            "norm affine {:?}/{:?} for {c} channels",
            scale.shape(),
            bias.shape()
        )));
    }
    Ok(())
}

/// Normalizes over the channel axis independently at every other position.
pub fn layer_norm<'t, T: Float>(x: Var<'t, T>, scale: Var<'t, T>, bias: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
    let xv = x.value();
    let (outer, c, inner) = around_axis(xv.shape(), channel_axis(xv.shape()))?;
    if c == 1 && eps <= 0.0 {
        return Err(Error::DegenerateNorm("single channel with eps = 0".into()));
    }
    let (sv, bv) = (scale.value(), bias.value());
    check_affine(&sv, &bv, c)?;
    let eps = T::of(eps);
    let cn = T::of(c as f64);
    let n = xv.numel();
    let mut xhat = vec![T::zero(); n];
    let mut inv_std = vec![T::zero(); outer * inner];
    let mut out = vec![T::zero(); n];
    let xd = xv.data();
    for o in 0..outer {
        for i in 0..inner {
            let at = |ch: usize| (o * c + ch) * inner + i;
            let mean = (0..c).map(|ch| xd[at(ch)]).sum::<T>() / cn;
            let var = (0..c).map(|ch| (xd[at(ch)] - mean).powi(2)).sum::<T>() / cn;
            let r = T::one() / (var + eps).sqrt();
            inv_std[o * inner + i] = r;
            for ch in 0..c {
                let xh = (xd[at(ch)] - mean) * r;
                xhat[at(ch)] = xh;
                out[at(ch)] = xh * sv.data()[ch] + bv.data()[ch];
            }
        }
    }
    let shape = xv.shape().to_vec();
    Ok(x.tape().record(
        Tensor::from_raw(shape.clone(), out),
        &[x, scale, bias],
        Box::new(move |g, need| {
            let gd = g.data();
            let mut gx = need[0].then(|| vec![T::zero(); n]);
            let mut gs = vec![T::zero(); c];
            let mut gb = vec![T::zero(); c];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |ch: usize| (o * c + ch) * inner + i;
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for ch in 0..c {
                        let gh = gd[at(ch)] * sv.data()[ch];
                        m1 += gh;
                        m2 += gh * xhat[at(ch)];
                        gs[ch] += gd[at(ch)] * xhat[at(ch)];
                        gb[ch] += gd[at(ch)];
                    }
                    if let Some(gx) = gx.as_mut() {
                        let (m1, m2) = (m1 / cn, m2 / cn);
                        let r = inv_std[o * inner + i];
                        for ch in 0..c {
                            let gh = gd[at(ch)] * sv.data()[ch];
                            gx[at(ch)] = r * (gh - m1 - xhat[at(ch)] * m2);
                        }
                    }
                }
            }
            vec![
                gx.map(|v| Tensor::from_raw(shape.clone(), v)),
                need[1].then(|| Tensor::from_raw(vec![c], gs)),
                need[2].then(|| Tensor::from_raw(vec![c], gb)),
            ]
        }),
    ))
}

/// New running statistics produced by a train-mode batch-norm call.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T: Float> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

/// Batch normalization over every axis except channels.
///
/// Train mode normalizes with batch statistics and returns updated running
/// statistics (momentum-weighted, unbiased variance); eval mode uses the
/// running statistics as constants.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<'t, T: Float>(
    x: Var<'t, T>,
    scale: Var<'t, T>,
    bias: Var<'t, T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
    momentum: f64,
    mode: Mode,
) -> Result<(Var<'t, T>, Option<RunningStats<T>>)> {
    let xv = x.value();
    let (outer, c, inner) = around_axis(xv.shape(), channel_axis(xv.shape()))?;
    let (sv, bv) = (scale.value(), bias.value());
    check_affine(&sv, &bv, c)?;
    check_affine(running_mean, running_var, c)?;
    let count = outer * inner;
    let cnt = T::of(count as f64);
    let xd = xv.data();
    let epsv = T::of(eps);
    let n = xv.numel();
    let shape = xv.shape().to_vec();

    let (mean, var): (Vec<T>, Vec<T>) = match mode {
        Mode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for o in 0..outer {
                    s += xd[(o * c + ch) * inner..(o * c + ch + 1) * inner].iter().copied().sum();
                }
                let m = s / cnt;
                let mut v = T::zero();
                for o in 0..outer {
                    for &xv in &xd[(o * c + ch) * inner..(o * c + ch + 1) * inner] {
                        v += (xv - m) * (xv - m);
                    }
                }
                mean[ch] = m;
                var[ch] = v / cnt;
            }
            (mean, var)
        }
        Mode::Eval => (running_mean.data().to_vec(), running_var.data().to_vec()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + epsv).sqrt()).collect();
    let mut xhat = vec![T::zero(); n];
    let mut out = vec![T::zero(); n];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            for i in base..base + inner {
                let xh = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = xh * sv.data()[ch] + bv.data()[ch];
            }
        }
    }

    let stats = (mode == Mode::Train).then(|| {
        let m = T::of(momentum);
        let unbias = if count > 1 {
            T::of(count as f64 / (count as f64 - 1.0))
        } else {
            T::one()
        };
        RunningStats {
            mean: Tensor::from_raw(
                vec![c],
                (0..c)
                    .map(|ch| (T::one() - m) * running_mean.data()[ch] + m * mean[ch])
                    .collect(),
            ),
            var: Tensor::from_raw(
                vec![c],
                (0..c)
                    .map(|ch| (T::one() - m) * running_var.data()[ch] + m * var[ch] * unbias)
                    .collect(),
            ),
        }
    });

    let train = mode == Mode::Train;
    let y = x.tape().record(
        Tensor::from_raw(shape.clone(), out),
        &[x, scale, bias],
        Box::new(move |g, need| {
            let gd = g.data();
            let mut gs = vec![T::zero(); c];
            let mut gb = vec![T::zero(); c];
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    for i in base..base + inner {
                        gs[ch] += gd[i] * xhat[i];
                        gb[ch] += gd[i];
                    }
                }
            }
            let gx = need[0].then(|| {
                let mut gx = vec![T::zero(); n];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        let (s, r) = (sv.data()[ch], inv_std[ch]);
                        for i in base..base + inner {
                            gx[i] = if train {
                                // gs/gb double as the per-channel sums of g and g*xhat
                                s * r * (gd[i] - gb[ch] / cnt - xhat[i] * gs[ch] / cnt)
                            } else {
                                s * r * gd[i]
                            };
                        }
                    }
                }
                Tensor::from_raw(shape.clone(), gx)
            });
            vec![
                gx,
                need[1].then(|| Tensor::from_raw(vec![c], gs)),
                need[2].then(|| Tensor::from_raw(vec![c], gb)),
            ]
        }),
    );
    Ok((y, stats))
}

/// 2x2 max pooling with stride 2; ties route the gradient to the first
/// element in row-major window order.
pub fn maxpool2d<'t, T: Float>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let xv = x.value();
    let [b, c, h, w] = dims4(xv.shape(), "maxpool2d")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape(format!(
            "maxpool2d needs even extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    let xd = xv.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    let in_shape = xv.shape().to_vec();
    Ok(x.tape().record(
        Tensor::from_raw(vec![b, c, oh, ow], out),
        &[x],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); in_shape.iter().product()];
            for (&src, &gv) in arg.iter().zip(g.data()) {
                gx[src] += gv;
            }
            vec![Some(Tensor::from_raw(in_shape.clone(), gx))]
        }),
    ))
}

/// Linear interpolation taps for resampling `in_len` samples to `out_len`
/// with half-pixel centers: `(lo, hi, frac)` per output position.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Separable bilinear resampling of every plane of `[B, C, H, W]` data.
pub(crate) fn resample_planes<T: Float>(
    data: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let rows = bilinear_taps(h, oh);
    let cols = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &data[p * h * w..(p + 1) * h * w];
        for &(r0, r1, fr) in &rows {
            let fr = T::of(fr);
            for &(c0, c1, fc) in &cols {
                let fc = T::of(fc);
                let top = src[r0 * w + c0] * (T::one() - fc) + src[r0 * w + c1] * fc;
                let bot = src[r1 * w + c0] * (T::one() - fc) + src[r1 * w + c1] * fc;
                out.push(top * (T::one() - fr) + bot * fr);
            }
        }
    }
    out
}

/// Nearest source index per output position, sampling at pixel centers.
pub fn nearest_taps(in_len: usize, out_len: usize) -> Vec<usize> {
    (0..out_len)
        .map(|o| ((((o as f64 + 0.5) * in_len as f64) / out_len as f64).floor() as usize).min(in_len - 1))
        .collect()
}

/// Nearest-neighbour resampling of every plane of `[.., H, W]` data.
pub fn resize_nearest<T: Float>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let nd = x.ndim();
    if nd < 2 {
        return Err(Error::InvalidShape(format!(
            "resize needs spatial axes, got {:?}",
            x.shape()
        )));
    }
    let (h, w) = (x.shape()[nd - 2], x.shape()[nd - 1]);
    let rows = nearest_taps(h, oh);
    let cols = nearest_taps(w, ow);
    let planes = x.numel() / (h * w);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for &r in &rows {
            out.extend(cols.iter().map(|&c| src[r * w + c]));
        }
    }
    let mut shape = x.shape().to_vec();
    shape[nd - 2] = oh;
    shape[nd - 1] = ow;
    Ok(Tensor::from_raw(shape, out))
}

/// Bilinear resampling of every plane of `[.., H, W]` to any size.
pub fn resize_bilinear<T: Float>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let nd = x.ndim();
    if nd < 2 {
        return Err(Error::InvalidShape(format!(
            "resize needs spatial axes, got {:?}",
            x.shape()
        )));
    }
    let (h, w) = (x.shape()[nd - 2], x.shape()[nd - 1]);
    let planes = x.numel() / (h * w);
    let mut shape = x.shape().to_vec();
    shape[nd - 2] = oh;
    shape[nd - 1] = ow;
    Ok(Tensor::from_raw(
        shape,
        resample_planes(x.data(), planes, (h, w), (oh, ow)),
    ))
}

/// Bilinear upsampling by an integer factor (half-pixel centers, edge clamp).
pub fn bilinear_upsample<'t, T: Float>(x: Var<'t, T>, scale: usize) -> Result<Var<'t, T>> {
    if scale < 2 {
        return Err(Error::InvalidSpec(format!("upsample scale must be >= 2, got {scale}")));
    }
    let xv = x.value();
    let [b, c, h, w] = dims4(xv.shape(), "bilinear_upsample")?;
    let (oh, ow) = (h * scale, w * scale);
    let out = resample_planes(xv.data(), b * c, (h, w), (oh, ow));
    let in_shape = xv.shape().to_vec();
    Ok(x.tape().record(
        Tensor::from_raw(vec![b, c, oh, ow], out),
        &[x],
        Box::new(move |g, _| {
            let rows = bilinear_taps(h, oh);
            let cols = bilinear_taps(w, ow);
            let mut gx = vec![T::zero(); b * c * h * w];
            for p in 0..b * c {
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                let gp = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
                    let fr = T::of(fr);
                    for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
                        let fc = T::of(fc);
                        let gv = gp[i * ow + j];
                        dst[r0 * w + c0] += gv * (T::one() - fr) * (T::one() - fc);
                        dst[r0 * w + c1] += gv * (T::one() - fr) * fc;
                        dst[r1 * w + c0] += gv * fr * (T::one() - fc);
                        dst[r1 * w + c1] += gv * fr * fc;
                    }
                }
            }
            vec![Some(Tensor::from_raw(in_shape.clone(), gx))]
        }),
    ))
}

/// `[B, C, H, W] -> [B, H*W, C]`
pub fn to_tokens<'t, T: Float>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    x.flatten(2)?.transpose(1, 2)
}

/// `[B, H*W, C] -> [B, C, H, W]`
pub fn to_map<'t, T: Float>(x: Var<'t, T>, h: usize, w: usize) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if shape.len() != 3 || shape[1] != h * w {
        return Err(Error::ShapeMismatch(format!(
            "token tensor {shape:?} does not hold a {h}x{w} grid"
        )));
    }
    x.transpose(1, 2)?.reshape(&[shape[0], shape[2], h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn conv_identity_1x1() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::make(&[2, 3, 4, 4], crate::tensor::Init::Gaussian(3)).unwrap());
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let y = conv2d(
            x,
            &ConvSpec::same(3, 3, 1),
            tape.constant(w),
            Some(tape.constant(Tensor::zeros(&[3]))),
        )
        .unwrap();
        assert!(y.value().bit_eq(&x.value()));
    }

    #[test]
    fn conv_all_ones_3x3() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = conv2d(x, &ConvSpec::same(1, 1, 3), w, None).unwrap().value();
        assert_eq!(y.get(&[0, 0, 1, 1]), 9.0);
        for (i, j) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.get(&[0, 0, i, j]), 4.0);
        }
        assert_eq!(y.get(&[0, 0, 0, 1]), 6.0);
    }

    #[test]
    fn conv_depthwise_and_errors() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 5, 5]));
        let spec = ConvSpec::depthwise(4, 3);
        let w = tape.constant(Tensor::zeros(&spec.weight_shape()));
        assert_eq!(conv2d(x, &spec, w, None).unwrap().shape(), vec![1, 4, 5, 5]);
        let bad = ConvSpec::same(3, 4, 3);
        let wb = tape.constant(Tensor::zeros(&bad.weight_shape()));
        assert!(matches!(conv2d(x, &bad, wb, None), Err(Error::ShapeMismatch(_))));
        assert!(ConvSpec::same(2, 2, 2).validate().is_err());
    }

    #[test]
    fn conv1d_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 2], &[2.0, 5.0]));
        let (a, b) = (0.3, -1.5);
        let y = conv1d_causal(x, tape.constant(t(&[1, 2], &[a, b])), None)
            .unwrap()
            .value();
        assert_eq!(y.data(), &[b * 2.0, a * 2.0 + b * 5.0]);

        let xs = tape.constant(Tensor::make(&[1, 2, 7], crate::tensor::Init::Gaussian(4)).unwrap());
        let delta = tape.constant(t(&[2, 4], &[0., 0., 0., 1., 0., 0., 0., 1.]));
        let y = conv1d_causal(xs, delta, None).unwrap();
        assert!(y.value().bit_eq(&xs.value()));
    }

    #[test]
    fn conv1d_causality() {
        let base = Tensor::<f64>::make(&[1, 3, 10], crate::tensor::Init::Gaussian(5)).unwrap();
        let w = Tensor::<f64>::make(&[3, 4], crate::tensor::Init::Gaussian(6)).unwrap();
        let mut pert = base.clone();
        for c in 0..3 {
            pert.data_mut()[c * 10 + 5] += 1.0;
        }
        let tape = Tape::<f64>::new();
        let wv = tape.constant(w);
        let y0 = conv1d_causal(tape.constant(base), wv, None).unwrap().value();
        let y1 = conv1d_causal(tape.constant(pert), wv, None).unwrap().value();
        for c in 0..3 {
            for s in 0..5 {
                assert_eq!(y0.get(&[0, c, s]).to_bits(), y1.get(&[0, c, s]).to_bits());
            }
            assert_ne!(y0.get(&[0, c, 5]), y1.get(&[0, c, 5]));
        }
    }

    #[test]
    fn linear_examples() {
        let tape = Tape::<f64>::new();
        let y = linear(
            tape.constant(t(&[1], &[3.0])),
            tape.constant(t(&[1, 1], &[2.0])),
            Some(tape.constant(t(&[1], &[1.0]))),
        )
        .unwrap();
        assert_eq!(y.value().data(), &[7.0]);
        let x = tape.constant(Tensor::zeros(&[2, 5, 8]));
        let w = tape.constant(Tensor::zeros(&[8, 16]));
        assert_eq!(linear(x, w, None).unwrap().shape(), vec![2, 5, 16]);
        assert!(matches!(
            linear(x, tape.constant(Tensor::zeros(&[4, 16])), None),
            Err(Error::ShapeMismatch(_))
        ));
        assert_eq!(tape.macs(), 2 * 5 * 8 * 16 + 1);
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::<f64>::new();
        let one = tape.constant(Tensor::full(&[2], 1.0));
        let zero = tape.constant(Tensor::zeros(&[2]));
        let y = layer_norm(tape.constant(t(&[1, 2], &[1.0, 3.0])), one, zero, 0.0).unwrap();
        assert_eq!(y.value().data(), &[-1.0, 1.0]);
        let c = layer_norm(tape.constant(Tensor::full(&[3, 2], 4.0)), one, zero, 1e-5).unwrap();
        assert!(c.value().data().iter().all(|&v| v == 0.0));
        let s1 = tape.constant(Tensor::full(&[1], 1.0));
        let z1 = tape.constant(Tensor::zeros(&[1]));
        assert!(matches!(
            layer_norm(tape.constant(Tensor::zeros(&[2, 1])), s1, z1, 0.0),
            Err(Error::DegenerateNorm(_))
        ));
    }

    #[test]
    fn layer_norm_moments_per_position() {
        let tape = Tape::<f64>::new();
        let x = Tensor::make(&[2, 5, 3, 3], crate::tensor::Init::Gaussian(11)).unwrap();
        let x = tape.constant(x.map(|v| 3.0 * v + 2.0));
        let y = layer_norm(
            x,
            tape.constant(Tensor::full(&[5], 1.0)),
            tape.constant(Tensor::zeros(&[5])),
            1e-12,
        )
        .unwrap()
        .value();
        for b in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let vals: Vec<f64> = (0..5).map(|c| y.get(&[b, c, i, j])).collect();
                    let m = vals.iter().sum::<f64>() / 5.0;
                    let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 5.0;
                    assert!(m.abs() < 1e-6);
                    assert!((v - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn batch_norm_examples() {
        let tape = Tape::<f64>::new();
        let one = tape.constant(Tensor::full(&[1], 1.0));
        let zero = tape.constant(Tensor::zeros(&[1]));
        let rm = Tensor::zeros(&[1]);
        let rv = Tensor::full(&[1], 1.0);
        let x = tape.constant(t(&[1, 2, 1], &[1.0, 3.0]));
        let (y, stats) = batch_norm(x, one, zero, &rm, &rv, 1e-5, 0.1, Mode::Eval).unwrap();
        assert!(stats.is_none());
        assert!(y.value().max_abs_diff(&x.value()) < 1e-4);
        // batch mean 2, biased var 1
        let (y, stats) = batch_norm(x, one, zero, &rm, &rv, 1e-5, 0.1, Mode::Train).unwrap();
        let stats = stats.unwrap();
        assert!((stats.mean.item() - 0.2).abs() < 1e-15);
        assert!(y.value().data().iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn maxpool_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        assert_eq!(maxpool2d(x).unwrap().value().data(), &[4.0]);
        let tie = tape.leaf(Tensor::full(&[1, 1, 2, 2], 5.0));
        let y = maxpool2d(tie).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(tie).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
        let odd = tape.constant(Tensor::zeros(&[1, 1, 3, 2]));
        assert!(matches!(maxpool2d(odd), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn upsample_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 1, 2], &[0.0, 1.0]));
        let y = bilinear_upsample(x, 2).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        assert_eq!(&y.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
        let one = tape.constant(t(&[1, 1, 1, 1], &[3.5]));
        assert_eq!(bilinear_upsample(one, 2).unwrap().value().data(), &[3.5; 4]);
        assert!(matches!(bilinear_upsample(x, 1), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn pool_then_upsample_constant_identity() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 2, 8, 8], -1.25));
        let y = bilinear_upsample(maxpool2d(x).unwrap(), 2).unwrap();
        assert!(y.value().bit_eq(&x.value()));
    }
}
