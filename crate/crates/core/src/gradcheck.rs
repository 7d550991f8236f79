//! Finite-difference verification of the analytic gradients.
//!
//! A check compares the tape's reverse sweep against central differences for
//! every input coordinate. The reported error for one input tensor is
//! `|g_analytic - g_numeric|_2 / max(|g_analytic|_2, |g_numeric|_2, floor)`,
//! where `floor` is `1e-4` times the largest gradient norm in the check, so
//! tensors whose exact gradient vanishes are judged against the rest of the
//! check rather than against rounding noise.

use crate::blocks::{self, MambaUcmSpec};
use crate::error::Result;
use crate::nn::{self, Activation, ConvSpec, Mode};
use crate::objective::{self, LossConfig};
use crate::params::{Ctx, ParamDecl, ParamKind, ParamStore};
use crate::ssm::{self, SsmConfig, SsmParams};
use crate::tensor::{Init, Tape, Tensor, Var};

/// A scalar function recorded on a fresh tape from the given inputs.
pub trait Objective: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> {}

impl<F> Objective for F where F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> {}

/// Pins a closure to the [`Objective`] signature so its lifetimes infer.
pub fn objective<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    f
}

fn evaluate(f: &impl Objective, at: &[Tensor<f64>]) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<_> = at.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(f(&tape, &vars)?.item())
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` per coordinate.
pub fn finite_diff(f: &impl Objective, at: &[Tensor<f64>], eps: f64) -> Result<Vec<Tensor<f64>>> {
    let mut point: Vec<Tensor<f64>> = at.to_vec();
    let mut grads = Vec::with_capacity(at.len());
    for k in 0..at.len() {
        let mut g = Tensor::zeros(at[k].shape());
        for i in 0..at[k].numel() {
            let orig = point[k].data()[i];
            point[k].data_mut()[i] = orig + eps;
            let up = evaluate(f, &point)?;
            point[k].data_mut()[i] = orig - eps;
            let down = evaluate(f, &point)?;
            point[k].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * eps);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Value and reverse-mode gradients with every input treated as a leaf.
pub fn analytic(f: &impl Objective, at: &[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)> {
    let tape = Tape::new();
    let vars: Vec<_> = at.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = f(&tape, &vars)?;
    let mut grads = tape.backward(y)?;
    let out = vars
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();
    Ok((y.item(), out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    /// Worst per-input relative error.
    pub rel_err: f64,
    pub passed: bool,
}

pub fn relative_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let scale = norm(a.data()).max(norm(b.data()));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn norm(t: &[f64]) -> f64 {
    t.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Central-difference step used by [`check`].
pub const EPS: f64 = 1e-6;
/// Tolerance on the relative error.
pub const TOL: f64 = 1e-4;

pub fn check(name: &str, f: &impl Objective, at: &[Tensor<f64>], tol: f64) -> Result<CheckReport> {
    let (_, exact) = analytic(f, at)?;
    let numeric = finite_diff(f, at, EPS)?;
    let largest = exact.iter().chain(&numeric).map(|t| norm(t.data())).fold(0.0, f64::max);
    let floor = 1e-4 * largest;
    let rel_err = exact
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let diff: Vec<f64> = a.data().iter().zip(n.data()).map(|(x, y)| x - y).collect();
            let scale = norm(a.data()).max(norm(n.data())).max(floor);
            if scale == 0.0 {
                0.0
            } else {
                norm(&diff) / scale
            }
        })
        .fold(0.0, f64::max);
    Ok(CheckReport {
        name: name.to_string(),
        rel_err,
        passed: rel_err <= tol,
    })
}

/// Reduces a non-scalar output to `sum(r * y)` with fixed random weights so
/// every output element contributes a distinct cotangent.
pub fn project<'t>(y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let r = Tensor::make(&y.shape(), Init::Gaussian(seed))?;
    Ok(y.mul(y.tape().constant(r))?.sum())
}

/// Gaussian test input.
pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::make(shape, Init::Gaussian(seed)).expect("positive extents")
}

/// Probabilities in roughly `(0.05, 0.95)`, away from the loss clamp.
fn probs(shape: &[usize], seed: u64) -> Tensor<f64> {
    randn(shape, seed).map(|v| 1.0 / (1.0 + (-1.5 * v).exp()))
}

fn binary(shape: &[usize], seed: u64) -> Tensor<f64> {
    randn(shape, seed).map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// A block evaluated through a [`Ctx`] whose trainable tensors are bound to
/// the check inputs after the block input.
type BlockFn = dyn for<'t, 's> Fn(&Ctx<'t, 's, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>;

fn check_block(name: &str, decls: &[ParamDecl], input: Tensor<f64>, seed: u64, block: &BlockFn) -> Result<CheckReport> {
    let mut store = ParamStore::<f64>::from_decls(decls, seed)?;
    // move norm affines away from 1/0 so their gradients are generic
    for (i, (_, e)) in store.iter_mut().enumerate() {
        if e.kind == ParamKind::NoDecay {
            let jitter = randn(e.tensor.shape(), seed + 1000 + i as u64);
            e.tensor = e.tensor.zip_map(&jitter, |a, b| a + 0.1 * b)?;
        }
    }
    let names: Vec<String> = store
        .iter()
        .filter(|(_, e)| e.kind.trainable())
        .map(|(n, _)| n.to_string())
        .collect();
    let mut at = vec![input];
    at.extend(
        names
            .iter()
            .map(|n| store.tensor(n).cloned())
            .collect::<Result<Vec<_>>>()?,
    );
    let f = objective(|tape, v| {
        let ctx = Ctx::new(tape, &store, Mode::Train, false);
        for (n, &var) in names.iter().zip(&v[1..]) {
            ctx.bind(n, var);
        }
        project(block(&ctx, v[0])?, seed)
    });
    check(name, &f, &at, TOL)
}

/// Every primitive, block and loss at desk sizes (batch 1, at most 8
/// channels, at most 8x8), in f64.
pub fn suite(seed: u64) -> Result<Vec<CheckReport>> {
    let s = seed.wrapping_mul(100);
    let r = |shape: &[usize], i: u64| randn(shape, s + i);
    let mut out = Vec::new();

    let conv = ConvSpec::same(3, 4, 3);
    let f = objective(move |_, v| project(nn::conv2d(v[0], &conv, v[1], Some(v[2]))?, 1));
    out.push(check(
        "conv2d 3x3",
        &f,
        &[r(&[1, 3, 6, 6], 1), r(&[4, 3, 3, 3], 2), r(&[4], 3)],
        TOL,
    )?);
    let dw = ConvSpec::depthwise(4, 1);
    let f = objective(move |_, v| project(nn::conv2d(v[0], &dw, v[1], Some(v[2]))?, 2));
    out.push(check(
        "conv2d depthwise 1x1",
        &f,
        &[r(&[1, 4, 5, 5], 4), r(&[4, 1, 1, 1], 5), r(&[4], 6)],
        TOL,
    )?);

    let f = objective(|_, v| project(nn::conv1d_causal(v[0], v[1], Some(v[2]))?, 3));
    out.push(check(
        "conv1d_causal",
        &f,
        &[r(&[1, 4, 7], 7), r(&[4, 4], 8), r(&[4], 9)],
        TOL,
    )?);

    let f = objective(|_, v| project(nn::linear(v[0], v[1], Some(v[2]))?, 4));
    out.push(check(
        "linear",
        &f,
        &[r(&[1, 5, 6], 10), r(&[6, 3], 11), r(&[3], 12)],
        TOL,
    )?);

    let f = objective(|_, v| project(nn::layer_norm(v[0], v[1], v[2], nn::NORM_EPS)?, 5));
    out.push(check(
        "layer_norm tokens",
        &f,
        &[r(&[1, 6, 5], 13), r(&[5], 14), r(&[5], 15)],
        TOL,
    )?);
    out.push(check(
        "layer_norm map",
        &f,
        &[r(&[1, 5, 3, 3], 16), r(&[5], 17), r(&[5], 18)],
        TOL,
    )?);

    let (rm, rv) = (Tensor::<f64>::zeros(&[4]), Tensor::<f64>::full(&[4], 1.0));
    let bn = |mode: Mode| {
        let (rm, rv) = (rm.clone(), rv.clone());
        objective(move |_, v| {
            let (y, _) = nn::batch_norm(v[0], v[1], v[2], &rm, &rv, nn::NORM_EPS, nn::BN_MOMENTUM, mode)?;
            project(y, 6)
        })
    };
    let bn_at = [r(&[1, 4, 3, 3], 19), r(&[4], 20), r(&[4], 21)];
    out.push(check("batch_norm train", &bn(Mode::Train), &bn_at, TOL)?);
    out.push(check("batch_norm eval", &bn(Mode::Eval), &bn_at, TOL)?);

    for (name, act) in [
        ("leaky_relu", Activation::LeakyRelu(nn::LEAKY_SLOPE)),
        ("silu", Activation::Silu),
        ("sigmoid", Activation::Sigmoid),
        ("softplus", Activation::Softplus),
    ] {
        let f = objective(move |_, v| project(nn::activation(act, v[0]), 7));
        out.push(check(name, &f, &[r(&[1, 3, 4, 4], 22)], TOL)?);
    }

    let f = objective(|_, v| project(nn::maxpool2d(v[0])?, 8));
    out.push(check("maxpool2d", &f, &[r(&[1, 3, 6, 6], 23)], TOL)?);
    let f = objective(|_, v| project(nn::bilinear_upsample(v[0], 2)?, 9));
    out.push(check("bilinear_upsample", &f, &[r(&[1, 3, 4, 4], 24)], TOL)?);

    let f = objective(|_, v| {
        let delta = v[1].softplus();
        let a = v[2].exp().neg();
        project(ssm::selective_scan(v[0], delta, a, v[3], v[4], v[5])?, 10)
    });
    let scan_at = [
        r(&[1, 6, 4], 25),
        r(&[1, 6, 4], 26),
        r(&[4, 3], 27),
        r(&[1, 6, 3], 28),
        r(&[1, 6, 3], 29),
        r(&[4], 30),
    ];
    out.push(check("selective_scan", &f, &scan_at, TOL)?);

    let scfg = SsmConfig::new(4);
    out.push(check_block(
        "mamba_forward",
        &ssm::param_decls("m", &scfg),
        r(&[1, 6, 4], 31),
        s + 32,
        &move |ctx, x| ssm::mamba_forward(x, &SsmParams::load(ctx, "m")?, &scfg),
    )?);

    out.push(check_block(
        "conv_block",
        &blocks::conv_block_decls("b", 3, 4),
        r(&[1, 3, 5, 5], 33),
        s + 34,
        &|ctx, x| blocks::conv_block(ctx, "b", x, 3, 4),
    )?);
    out.push(check_block(
        "ucm_path",
        &blocks::ucm_decls("u", 8),
        r(&[1, 16, 8], 35),
        s + 36,
        &|ctx, x| blocks::ucm_path(ctx, "u", x, 4, 4),
    )?);
    for k in [1, 2] {
        let spec = MambaUcmSpec::new(8, k);
        out.push(check_block(
            &format!("mamba_ucm k={k}"),
            &blocks::mamba_ucm_decls("mu", &spec)?,
            r(&[1, 8, 4, 4], 37 + k as u64),
            s + 40 + k as u64,
            &move |ctx, x| blocks::mamba_ucm(ctx, "mu", x, &spec),
        )?);
    }

    let cfg = LossConfig::default();
    let shape = [1, 1, 6, 6];
    let target = binary(&shape, s + 43);
    let loss_at = [probs(&shape, s + 44)];
    type LossFn = for<'t> fn(Var<'t, f64>, Var<'t, f64>, &LossConfig) -> Result<Var<'t, f64>>;
    let losses: [(&str, LossFn); 4] = [
        ("bce", |p, y, c| objective::bce(p, y, c.clamp_eps)),
        ("dice", |p, y, c| objective::dice(p, y, c.smooth)),
        ("squared_dice", |p, y, c| objective::squared_dice(p, y, c.smooth)),
        ("base_loss", |p, y, c| objective::base_loss(p, y, c)),
    ];
    for (name, loss) in losses {
        let (t, c) = (target.clone(), cfg.clone());
        let f = objective(move |tape, v| loss(v[0], tape.constant(t.clone()), &c));
        out.push(check(name, &f, &loss_at, TOL)?);
    }

    let target = binary(&[1, 1, 8, 8], s + 45);
    let stage_sizes = [1usize, 1, 2, 4, 4];
    let mut group_at = vec![probs(&[1, 1, 8, 8], s + 46)];
    group_at.extend(
        stage_sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| probs(&[1, 1, n, n], s + 47 + i as u64)),
    );
    let f = objective(move |_, v| Ok(objective::group_loss(v[0], &v[1..], &target, &cfg)?.0));
    out.push(check("group_loss", &f, &group_at, TOL)?);
    Ok(out)
}
