//! Differentiable tensor operations on [`Var`].

use std::rc::Rc;

use super::{Float, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    Lhs,
    Rhs,
}

fn broadcast_kind(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::None)
    } else if b.iter().product::<usize>() == 1 {
        Ok(Broadcast::Rhs)
    } else if a.iter().product::<usize>() == 1 {
        Ok(Broadcast::Lhs)
    } else {
        Err(Error::ShapeMismatch(format!("{a:?} vs {b:?}")))
    }
}

impl<'t, T: Float> Var<'t, T> {
    fn unary(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'t, T> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let y_keep = Rc::clone(&y);
        self.tape().record(
            (*y).clone(),
            &[self],
            Box::new(move |g, _| {
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(y_keep.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(Tensor::from_raw(g.shape().to_vec(), data))]
            }),
        )
    }

    fn binary(
        self,
        other: Var<'t, T>,
        f: impl Fn(T, T) -> T,
        da: impl Fn(T, T) -> T + 'static,
        db: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let kind = broadcast_kind(a.shape(), b.shape())?;
        let (shape, data): (Vec<usize>, Vec<T>) = match kind {
            Broadcast::None => (
                a.shape().to_vec(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::Rhs => {
                let s = b.data()[0];
                (a.shape().to_vec(), a.data().iter().map(|&x| f(x, s)).collect())
            }
            Broadcast::Lhs => {
                let s = a.data()[0];
                (b.shape().to_vec(), b.data().iter().map(|&y| f(s, y)).collect())
            }
        };
        Ok(self.tape().record(
            Tensor::from_raw(shape, data),
            &[self, other],
            Box::new(move |g, need| {
                let n = g.numel();
                let av = |i: usize| {
                    if kind == Broadcast::Lhs {
                        a.data()[0]
                    } else {
                        a.data()[i]
                    }
                };
                let bv = |i: usize| {
                    if kind == Broadcast::Rhs {
                        b.data()[0]
                    } else {
                        b.data()[i]
                    }
                };
                let mut ga = None;
                let mut gb = None;
                if need[0] {
                    let full: Vec<T> = (0..n).map(|i| g.data()[i] * da(av(i), bv(i))).collect();
                    ga = Some(if kind == Broadcast::Lhs {
                        Tensor::from_raw(a.shape().to_vec(), vec![full.into_iter().sum()])
                    } else {
                        Tensor::from_raw(a.shape().to_vec(), full)
                    });
                }
                if need[1] {
                    let full: Vec<T> = (0..n).map(|i| g.data()[i] * db(av(i), bv(i))).collect();
                    gb = Some(if kind == Broadcast::Rhs {
                        Tensor::from_raw(b.shape().to_vec(), vec![full.into_iter().sum()])
                    } else {
                        Tensor::from_raw(b.shape().to_vec(), full)
                    });
                }
                vec![ga, gb]
            }),
        ))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, |a, b| a + b, |_, _| T::one(), |_, _| T::one())
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, |a, b| a - b, |_, _| T::one(), |_, _| -T::one())
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, |a, b| a / b, |_, b| T::one() / b, |a, b| -a / (b * b))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn neg(self) -> Var<'t, T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn log(self) -> Result<Var<'t, T>> {
        if let Some(bad) = self.value().data().iter().find(|v| **v <= T::zero()) {
            return Err(Error::DomainError(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(|x| x.ln(), |x, _| T::one() / x))
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    /// `max(x, c)`; the gradient flows where `x > c`.
    pub fn max_scalar(self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        self.unary(
            move |x| if x > c { x } else { c },
            move |x, _| if x > c { T::one() } else { T::zero() },
        )
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t, T> {
        let (lo, hi) = (T::of(lo), T::of(hi));
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x < lo || x > hi {
                    T::zero()
                } else {
                    T::one()
                }
            },
        )
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        self.unary(move |x| x * c, move |_, _| c)
    }

    /// `c - x`
    pub fn rsub_scalar(self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        self.unary(move |x| c - x, |_, _| -T::one())
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn silu(self) -> Var<'t, T> {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t, T> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t, T> {
        let s = T::of(slope);
        self.unary(
            move |x| if x >= T::zero() { x } else { s * x },
            move |x, _| if x >= T::zero() { T::one() } else { s },
        )
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape().record(
            Tensor::scalar(x.sum()),
            &[self],
            Box::new(move |g, _| {
                let n = shape.iter().product();
                vec![Some(Tensor::from_raw(shape.clone(), vec![g.item(); n]))]
            }),
        )
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().numel() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = x.view(shape)?;
        let in_shape = x.shape().to_vec();
        Ok(self.tape().record(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::from_raw(in_shape.clone(), g.data().to_vec()))]),
        ))
    }

    pub fn flatten(self, from: usize) -> Result<Var<'t, T>> {
        let shape = self.value().flatten(from)?.shape().to_vec();
        self.reshape(&shape)
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.tape().record(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.permute(&inverse).expect("inverse permutation"))]),
        ))
    }

    pub fn transpose(self, i: usize, j: usize) -> Result<Var<'t, T>> {
        let n = self.value().ndim();
        if i >= n || j >= n {
            return Err(Error::InvalidShape(format!(
                "transpose axes ({i},{j}) out of range for rank {n}"
            )));
        }
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(i, j);
        self.permute(&axes)
    }

    pub fn split(self, axis: usize, parts: usize) -> Result<Vec<Var<'t, T>>> {
        let x = self.value();
        if axis >= x.ndim() {
            return Err(Error::InvalidShape(format!("split axis {axis} out of range")));
        }
        let extent = x.shape()[axis];
        if parts == 0 || !extent.is_multiple_of(parts) {
            return Err(Error::InvalidSplit(format!(
                "extent {extent} on axis {axis} is not divisible into {parts} parts"
            )));
        }
        self.split_sizes(axis, &vec![extent / parts; parts])
    }

    pub fn split_sizes(self, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'t, T>>> {
        let x = self.value();
        let pieces = x.split_sizes(axis, sizes)?;
        let shape = x.shape().to_vec();
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for piece in pieces {
            let size = piece.shape()[axis];
            let shape = shape.clone();
            let offset = start;
            out.push(self.tape().record(
                piece,
                &[self],
                Box::new(move |g, _| {
                    let outer: usize = shape[..axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let extent = shape[axis];
                    let mut full = vec![T::zero(); outer * extent * inner];
                    for o in 0..outer {
                        let dst = (o * extent + offset) * inner;
                        let src = o * size * inner;
                        full[dst..dst + size * inner].copy_from_slice(&g.data()[src..src + size * inner]);
                    }
                    vec![Some(Tensor::from_raw(shape.clone(), full))]
                }),
            ));
            start += size;
        }
        Ok(out)
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidShape("concat of zero tensors".into()))?;
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat(&refs, axis)?;
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        Ok(first.tape().record(
            out,
            parts,
            Box::new(move |g, need| {
                let pieces = g.split_sizes(axis, &sizes).expect("concat grad split");
                pieces.into_iter().zip(need).map(|(p, &n)| n.then_some(p)).collect()
            }),
        ))
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]`; either side may omit
    /// the batch axes, in which case it is shared across the other's batch.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul needs rank >= 2, got {ash:?} x {bsh:?}"
            )));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if k != k2 {
            return Err(Error::ShapeMismatch(format!("inner extents differ: {ash:?} x {bsh:?}")));
        }
        let a_batch = &ash[..ash.len() - 2];
        let b_batch = &bsh[..bsh.len() - 2];
        let batch_shape = if a_batch == b_batch || b_batch.is_empty() {
            a_batch.to_vec()
        } else if a_batch.is_empty() {
            b_batch.to_vec()
        } else {
            return Err(Error::ShapeMismatch(format!("batch extents differ: {ash:?} x {bsh:?}")));
        };
        let batches: usize = batch_shape.iter().product();
        let a_shared = a_batch.is_empty() && !batch_shape.is_empty();
        let b_shared = b_batch.is_empty() && !batch_shape.is_empty();
        let a_off = move |i: usize| if a_shared { 0 } else { i * m * k };
        let b_off = move |i: usize| if b_shared { 0 } else { i * k * n };

        let mut out = vec![T::zero(); batches * m * n];
        for bi in 0..batches {
            gemm(
                &a.data()[a_off(bi)..a_off(bi) + m * k],
                &b.data()[b_off(bi)..b_off(bi) + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.tape().add_macs((batches * m * k * n) as u64);
        let mut out_shape = batch_shape;
        out_shape.extend([m, n]);
        Ok(self.tape().record(
            Tensor::from_raw(out_shape, out),
            &[self, other],
            Box::new(move |g, need| {
                let mut ga = need[0].then(|| vec![T::zero(); a.numel()]);
                let mut gb = need[1].then(|| vec![T::zero(); b.numel()]);
                for bi in 0..batches {
                    let gs = &g.data()[bi * m * n..(bi + 1) * m * n];
                    if let Some(ga) = ga.as_mut() {
                        // dA = dY B^T
                        let bs = &b.data()[b_off(bi)..b_off(bi) + k * n];
                        let dst = &mut ga[a_off(bi)..a_off(bi) + m * k];
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = T::zero();
                                for j in 0..n {
                                    s += gs[i * n + j] * bs[p * n + j];
                                }
                                dst[i * k + p] += s;
                            }
                        }
                    }
                    if let Some(gb) = gb.as_mut() {
                        // dB = A^T dY
                        let as_ = &a.data()[a_off(bi)..a_off(bi) + m * k];
                        let dst = &mut gb[b_off(bi)..b_off(bi) + k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let av = as_[i * k + p];
                                let row = &gs[i * n..(i + 1) * n];
                                for (d, &gv) in dst[p * n..(p + 1) * n].iter_mut().zip(row) {
                                    *d += av * gv;
                                }
                            }
                        }
                    }
                }
                vec![
                    ga.map(|d| Tensor::from_raw(a.shape().to_vec(), d)),
                    gb.map(|d| Tensor::from_raw(b.shape().to_vec(), d)),
                ]
            }),
        ))
    }
}

#[inline]
pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Float>(x: T) -> T {
    // max(x, 0) + ln(1 + e^{-|x|})
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// `out += a[m,k] * b[k,n]`, row-major.
pub(crate) fn gemm<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}
