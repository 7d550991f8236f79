//! Segmentation losses and the deep-supervision group loss.
//!
//! All losses take probabilities (sigmoid already applied) and binary targets.

use crate::error::{Error, Result};
use crate::nn::resize_nearest;
use crate::tensor::{Float, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub smooth: f64,
    pub clamp_eps: f64,
    /// Stage weights, deepest stage first.
    pub lambdas: [f64; 5],
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            smooth: 1e-6,
            clamp_eps: 1e-7,
            lambdas: [0.1, 0.2, 0.3, 0.4, 0.5],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.smooth > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "smooth must be positive, got {}",
                self.smooth
            )));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(Error::InvalidConfig(format!(
                "clamp_eps must lie in (0, 0.5), got {}",
                self.clamp_eps
            )));
        }
        Ok(())
    }
}

fn same_shape<T: Float>(p: Var<'_, T>, y: Var<'_, T>) -> Result<()> {
    let (ps, ys) = (p.shape(), y.shape());
    if ps != ys {
        return Err(Error::ShapeMismatch(format!("prediction {ps:?} vs target {ys:?}")));
    }
    Ok(())
}

/// Mean binary cross-entropy with `p` clamped to `[eps, 1 - eps]`.
pub fn bce<'t, T: Float>(p: Var<'t, T>, y: Var<'t, T>, clamp_eps: f64) -> Result<Var<'t, T>> {
    same_shape(p, y)?;
    let pc = p.clamp(clamp_eps, 1.0 - clamp_eps);
    let pos = y.mul(pc.log()?)?;
    let neg = y.rsub_scalar(1.0).mul(pc.rsub_scalar(1.0).log()?)?;
    Ok(pos.add(neg)?.mean().neg())
}

/// `1 - (2 sum(p y) + s) / (sum p + sum y + s)`
pub fn dice<'t, T: Float>(p: Var<'t, T>, y: Var<'t, T>, smooth: f64) -> Result<Var<'t, T>> {
    same_shape(p, y)?;
    let inter = p.mul(y)?.sum();
    let num = inter.mul_scalar(2.0).add_scalar(smooth);
    let den = p.sum().add(y.sum())?.add_scalar(smooth);
    Ok(num.div(den)?.rsub_scalar(1.0))
}

/// `1 - (2 (sum p y)^2 + s) / ((sum p)^2 + (sum y)^2 + s)`
pub fn squared_dice<'t, T: Float>(p: Var<'t, T>, y: Var<'t, T>, smooth: f64) -> Result<Var<'t, T>> {
    same_shape(p, y)?;
    let inter = p.mul(y)?.sum();
    let num = inter.square().mul_scalar(2.0).add_scalar(smooth);
    let den = p.sum().square().add(y.sum().square())?.add_scalar(smooth);
    Ok(num.div(den)?.rsub_scalar(1.0))
}

/// BCE + Dice + squared Dice.
pub fn base_loss<'t, T: Float>(p: Var<'t, T>, y: Var<'t, T>, cfg: &LossConfig) -> Result<Var<'t, T>> {
    bce(p, y, cfg.clamp_eps)?
        .add(dice(p, y, cfg.smooth)?)?
        .add(squared_dice(p, y, cfg.smooth)?)
}

/// Individual terms of a group loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub output: f64,
    /// Unweighted stage losses, deepest first.
    pub stages: [f64; 5],
    pub total: f64,
}

/// Ground truth nearest-downscaled to each stage prediction's resolution.
pub fn stage_targets<T: Float>(target: &Tensor<T>, stage_shapes: &[Vec<usize>]) -> Result<Vec<Tensor<T>>> {
    stage_shapes
        .iter()
        .map(|s| {
            let n = s.len();
            if n < 2 {
                return Err(Error::ShapeMismatch(format!("stage prediction {s:?}")));
            }
            resize_nearest(target, s[n - 2], s[n - 1])
        })
        .collect()
}

/// `Loss_output + sum_i lambda_i Loss_stage_i`.
///
/// `stages` are probabilities, deepest first, each compared against the
/// target nearest-downscaled to its resolution.
pub fn group_loss<'t, T: Float>(
    output: Var<'t, T>,
    stages: &[Var<'t, T>],
    target: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<(Var<'t, T>, LossBreakdown)> {
    if stages.len() != 5 {
        return Err(Error::InvalidStageCount(stages.len()));
    }
    let tape = output.tape();
    let out_loss = base_loss(output, tape.constant(target.clone()), cfg)?;
    let shapes: Vec<Vec<usize>> = stages.iter().map(|s| s.shape()).collect();
    let targets = stage_targets(target, &shapes)?;
    let mut total = out_loss;
    let mut parts = [0.0; 5];
    for (i, (&p, y)) in stages.iter().zip(targets).enumerate() {
        let l = base_loss(p, tape.constant(y), cfg)?;
        parts[i] = l.item().as_f64();
        total = total.add(l.mul_scalar(cfg.lambdas[i]))?;
    }
    let breakdown = LossBreakdown {
        output: out_loss.item().as_f64(),
        stages: parts,
        total: total.item().as_f64(),
    };
    Ok((total, breakdown))
}

/// Group loss on network logits.
pub fn group_loss_logits<'t, T: Float>(
    out: &crate::net::NetOutput<'t, T>,
    target: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<(Var<'t, T>, LossBreakdown)> {
    let stages: Vec<_> = out.stages.iter().map(|s| s.sigmoid()).collect();
    group_loss(out.output.sigmoid(), &stages, target, cfg)
}
