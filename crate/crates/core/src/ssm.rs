//! Selective state-space (Mamba) layer.
//!
//! The scan is a fused kernel: discretization, recurrence and readout run in
//! one sequential pass, and the backward pass replays the recurrence in
//! reverse from the stored hidden states.

use crate::error::{Error, Result};
use crate::nn::{conv1d_causal, linear};
use crate::params::{Ctx, InitRule, ParamDecl, ParamKind, GAIN_LINEAR};
use crate::tensor::{Float, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SsmConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub expand: usize,
    pub dt_rank: usize,
    pub conv_width: usize,
}

impl SsmConfig {
    pub fn new(d_model: usize) -> Self {
        SsmConfig {
            d_model,
            d_state: 16,
            expand: 2,
            dt_rank: d_model.div_ceil(16),
            conv_width: 4,
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if [self.d_model, self.d_state, self.expand, self.dt_rank, self.conv_width].contains(&0) {
            return Err(Error::InvalidConfig(format!("ssm extents must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Parameter names and shapes, in storage order.
    pub fn shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (dm, di, n, r) = (self.d_model, self.d_inner(), self.d_state, self.dt_rank);
        vec![
            ("in_proj.weight", vec![dm, 2 * di]),
            ("conv.weight", vec![di, self.conv_width]),
            ("conv.bias", vec![di]),
            ("x_proj.weight", vec![di, r + 2 * n]),
            ("dt_proj.weight", vec![r, di]),
            ("dt_proj.bias", vec![di]),
            ("A_log", vec![di, n]),
            ("D", vec![di]),
            ("out_proj.weight", vec![di, dm]),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Handles to one layer's parameters on a tape.
#[derive(Clone, Copy)]
pub struct SsmParams<'t, T> {
    pub in_proj: Var<'t, T>,
    pub conv_weight: Var<'t, T>,
    pub conv_bias: Var<'t, T>,
    pub x_proj: Var<'t, T>,
    pub dt_proj_weight: Var<'t, T>,
    pub dt_proj_bias: Var<'t, T>,
    pub a_log: Var<'t, T>,
    pub d: Var<'t, T>,
    pub out_proj: Var<'t, T>,
}

impl<'t, T: Float> SsmParams<'t, T> {
    /// Looks up the layer stored under `{prefix}.`.
    pub fn load(ctx: &Ctx<'t, '_, T>, prefix: &str) -> Result<Self> {
        let p = |name: &str| ctx.param(&format!("{prefix}.{name}"));
        let [in_proj, conv_weight, conv_bias, x_proj, dt_proj_weight, dt_proj_bias, a_log, d, out_proj] = [
            p("in_proj.weight")?,
            p("conv.weight")?,
            p("conv.bias")?,
            p("x_proj.weight")?,
            p("dt_proj.weight")?,
            p("dt_proj.bias")?,
            p("A_log")?,
            p("D")?,
            p("out_proj.weight")?,
        ];
        Ok(SsmParams {
            in_proj,
            conv_weight,
            conv_bias,
            x_proj,
            dt_proj_weight,
            dt_proj_bias,
            a_log,
            d,
            out_proj,
        })
    }
}

/// Zero-order hold for the state matrix.
#[inline]
fn zoh<T: Float>(delta: T, a: T) -> T {
    (delta * a).exp()
}

/// Discretized transition `exp(delta * A)` and Euler input matrix `delta * B`,
/// both shaped `[B, L, d_inner, d_state]`.
pub fn discretize<T: Float>(delta: &Tensor<T>, a: &Tensor<T>, b_seq: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (bsz, l, di) = dims3(delta.shape(), "delta")?;
    if a.ndim() != 2 || a.shape()[0] != di {
        return Err(Error::ShapeMismatch(format!("A {:?} for d_inner {di}", a.shape())));
    }
    let n = a.shape()[1];
    if b_seq.shape() != [bsz, l, n] {
        return Err(Error::ShapeMismatch(format!(
            "B {:?}, expected [{bsz},{l},{n}]",
            b_seq.shape()
        )));
    }
    let mut a_bar = Vec::with_capacity(bsz * l * di * n);
    let mut b_bar = Vec::with_capacity(bsz * l * di * n);
    for bt in 0..bsz * l {
        for d in 0..di {
            let dt = delta.data()[bt * di + d];
            for s in 0..n {
                a_bar.push(zoh(dt, a.data()[d * n + s]));
                b_bar.push(dt * b_seq.data()[bt * n + s]);
            }
        }
    }
    let shape = vec![bsz, l, di, n];
    Ok((Tensor::from_raw(shape.clone(), a_bar), Tensor::from_raw(shape, b_bar)))
}

fn dims3(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::ShapeMismatch(format!("{what} expects [B,L,D], got {shape:?}"))),
    }
}

/// Selective scan with `h_0 = 0`:
/// `h_t = exp(delta_t A) h_{t-1} + delta_t B_t x_t`, `y_t = <C_t, h_t> + D x_t`.
///
/// Shapes: `x, delta: [B, L, Di]`, `a: [Di, N]`, `b_seq, c_seq: [B, L, N]`,
/// `d: [Di]`.
pub fn selective_scan<'t, T: Float>(
    x: Var<'t, T>,
    delta: Var<'t, T>,
    a: Var<'t, T>,
    b_seq: Var<'t, T>,
    c_seq: Var<'t, T>,
    d: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (xv, dv, av, bv, cv, skip) = (
        x.value(),
        delta.value(),
        a.value(),
        b_seq.value(),
        c_seq.value(),
        d.value(),
    );
    let (bsz, l, di) = dims3(xv.shape(), "scan input")?;
    if dv.shape() != xv.shape() {
        return Err(Error::ShapeMismatch(format!(
            "delta {:?} vs x {:?}",
            dv.shape(),
            xv.shape()
        )));
    }
    if av.ndim() != 2 || av.shape()[0] != di {
        return Err(Error::ShapeMismatch(format!("A {:?} for d_inner {di}", av.shape())));
    }
    let n = av.shape()[1];
    if bv.shape() != [bsz, l, n] || cv.shape() != [bsz, l, n] {
        return Err(Error::ShapeMismatch(format!(
            "B {:?} / C {:?}, expected [{bsz},{l},{n}]",
            bv.shape(),
            cv.shape()
        )));
    }
    if skip.shape() != [di] {
        return Err(Error::ShapeMismatch(format!("D {:?}, expected [{di}]", skip.shape())));
    }

    // states[b, t, d, :] is h_t (after the update at step t)
    let mut states = vec![T::zero(); bsz * l * di * n];
    let mut out = vec![T::zero(); bsz * l * di];
    let (xd, dd, ad, bd, cd, sd) = (xv.data(), dv.data(), av.data(), bv.data(), cv.data(), skip.data());
    for b in 0..bsz {
        for t in 0..l {
            let bt = b * l + t;
            for ch in 0..di {
                let (xt, dt) = (xd[bt * di + ch], dd[bt * di + ch]);
                let cur = (bt * di + ch) * n;
                let mut y = sd[ch] * xt;
                for s in 0..n {
                    let prev = if t == 0 { T::zero() } else { states[cur - di * n + s] };
                    let h = zoh(dt, ad[ch * n + s]) * prev + dt * bd[bt * n + s] * xt;
                    states[cur + s] = h;
                    y += cd[bt * n + s] * h;
                }
                out[bt * di + ch] = y;
            }
        }
    }
    x.tape().add_macs(2 * (bsz * l * di * n) as u64);

    Ok(x.tape().record(
        Tensor::from_raw(vec![bsz, l, di], out),
        &[x, delta, a, b_seq, c_seq, d],
        Box::new(move |g, need| {
            let (xd, dd, ad, bd, cd, sd) = (xv.data(), dv.data(), av.data(), bv.data(), cv.data(), skip.data());
            let gd = g.data();
            let mut gx = vec![T::zero(); bsz * l * di];
            let mut gdelta = vec![T::zero(); bsz * l * di];
            let mut ga = vec![T::zero(); di * n];
            let mut gb = vec![T::zero(); bsz * l * n];
            let mut gc = vec![T::zero(); bsz * l * n];
            let mut gskip = vec![T::zero(); di];
            let mut gh = vec![T::zero(); n];
            for b in 0..bsz {
                for ch in 0..di {
                    gh.iter_mut().for_each(|v| *v = T::zero());
                    for t in (0..l).rev() {
                        let bt = b * l + t;
                        let i = bt * di + ch;
                        let (xt, dt, gy) = (xd[i], dd[i], gd[i]);
                        gskip[ch] += gy * xt;
                        let mut gxi = gy * sd[ch];
                        let mut gdi = T::zero();
                        let cur = i * n;
                        for s in 0..n {
                            let h = states[cur + s];
                            let prev = if t == 0 { T::zero() } else { states[cur - di * n + s] };
                            let av = ad[ch * n + s];
                            let abar = zoh(dt, av);
                            let bts = bd[bt * n + s];
                            gc[bt * n + s] += gy * h;
                            let ghs = gh[s] + gy * cd[bt * n + s];
                            gdi += ghs * (av * abar * prev + bts * xt);
                            ga[ch * n + s] += ghs * dt * abar * prev;
                            gb[bt * n + s] += ghs * dt * xt;
                            gxi += ghs * dt * bts;
                            gh[s] = ghs * abar;
                        }
                        gx[i] = gxi;
                        gdelta[i] = gdi;
                    }
                }
            }
            let x_shape = vec![bsz, l, di];
            let seq_shape = vec![bsz, l, n];
            let pack = |flag: bool, shape: &Vec<usize>, v: Vec<T>| flag.then(|| Tensor::from_raw(shape.clone(), v));
            vec![
                pack(need[0], &x_shape, gx),
                pack(need[1], &x_shape, gdelta),
                pack(need[2], &vec![di, n], ga),
                pack(need[3], &seq_shape, gb),
                pack(need[4], &seq_shape, gc),
                pack(need[5], &vec![di], gskip),
            ]
        }),
    ))
}

/// Mamba layer on a token sequence `[B, L, d_model]`.
pub fn mamba_forward<'t, T: Float>(x: Var<'t, T>, p: &SsmParams<'t, T>, cfg: &SsmConfig) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let (bsz, l, dm) = dims3(&shape, "mamba input")?;
    if dm != cfg.d_model {
        return Err(Error::ShapeMismatch(format!(
            "mamba input width {dm}, layer expects {}",
            cfg.d_model
        )));
    }
    let di = cfg.d_inner();
    let xz = linear(x, p.in_proj, None)?;
    let [stream, gate]: [Var<'t, T>; 2] = xz.split_sizes(2, &[di, di])?.try_into().expect("two parts");
    let conv = conv1d_causal(stream.transpose(1, 2)?, p.conv_weight, Some(p.conv_bias))?;
    let u = conv.transpose(1, 2)?.silu();
    let dbc = linear(u, p.x_proj, None)?;
    let [dt_in, b_seq, c_seq]: [Var<'t, T>; 3] = dbc
        .split_sizes(2, &[cfg.dt_rank, cfg.d_state, cfg.d_state])?
        .try_into()
        .expect("three parts");
    let delta = linear(dt_in, p.dt_proj_weight, Some(p.dt_proj_bias))?.softplus();
    let a = p.a_log.exp().neg();
    let y = selective_scan(u, delta, a, b_seq, c_seq, p.d)?;
    let gated = y.mul(gate.silu())?;
    x.tape().add_macs((bsz * l * di) as u64);
    linear(gated, p.out_proj, None)
}

/// Declarations under `{prefix}.`; dynamics follow the reference design
/// (`A_n = -(n + 1)`, `D = 1`, softplus of the `dt` bias in `[1e-3, 1e-1]`).
pub fn param_decls(prefix: &str, cfg: &SsmConfig) -> Vec<ParamDecl> {
    cfg.shapes()
        .into_iter()
        .map(|(name, shape)| {
            let (init, kind) = match name {
                "conv.weight" | "conv.bias" => (
                    InitRule::Kaiming {
                        fan_in: cfg.conv_width,
                        gain: GAIN_LINEAR,
                    },
                    ParamKind::Decay,
                ),
                "dt_proj.weight" => (
                    InitRule::Kaiming {
                        fan_in: cfg.dt_rank,
                        gain: GAIN_LINEAR,
                    },
                    ParamKind::Decay,
                ),
                "dt_proj.bias" => (InitRule::InvSoftplus { lo: 1e-3, hi: 1e-1 }, ParamKind::NoDecay),
                "A_log" => (InitRule::StateLog { d_state: cfg.d_state }, ParamKind::NoDecay),
                "D" => (InitRule::Constant(1.0), ParamKind::NoDecay),
                _ => (
                    InitRule::Kaiming {
                        fan_in: shape[0],
                        gain: GAIN_LINEAR,
                    },
                    ParamKind::Decay,
                ),
            };
            ParamDecl::new(format!("{prefix}.{name}"), &shape, init, kind)
        })
        .collect()
}
