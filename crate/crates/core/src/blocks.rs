//! Composite blocks: the full-resolution convolution block, the UCM path,
//! and the k-patch Mamba-UCM block.

use crate::error::{Error, Result};
use crate::nn::{self, ConvSpec, LEAKY_SLOPE};
use crate::params::{batch_norm_decls, conv_decls, layer_norm_decls, linear_decls, Ctx, ParamDecl};
use crate::ssm::{self, SsmConfig, SsmParams};
use crate::tensor::{Float, Var};

pub fn conv_block_decls(prefix: &str, c_in: usize, c_out: usize) -> Vec<ParamDecl> {
    let mut v = conv_decls(&format!("{prefix}.conv"), &ConvSpec::same(c_in, c_out, 3), true);
    v.extend(batch_norm_decls(&format!("{prefix}.bn"), c_out));
    v
}

/// 3x3 convolution, 2-D batch norm, leaky ReLU.
pub fn conv_block<'t, T: Float>(
    ctx: &Ctx<'t, '_, T>,
    prefix: &str,
    x: Var<'t, T>,
    c_in: usize,
    c_out: usize,
) -> Result<Var<'t, T>> {
    let y = ctx.conv(&format!("{prefix}.conv"), &ConvSpec::same(c_in, c_out, 3), x, true)?;
    Ok(ctx.batch_norm(&format!("{prefix}.bn"), y)?.leaky_relu(LEAKY_SLOPE))
}

pub fn ucm_decls(prefix: &str, c: usize) -> Vec<ParamDecl> {
    let dw = ConvSpec::depthwise(c, 1);
    let mut v = layer_norm_decls(&format!("{prefix}.ln1"), c);
    v.extend(linear_decls(&format!("{prefix}.fc1"), c, c, true));
    v.extend(layer_norm_decls(&format!("{prefix}.ln2"), c));
    v.extend(conv_decls(&format!("{prefix}.dw1"), &dw, true));
    v.extend(conv_decls(&format!("{prefix}.dw2"), &dw, true));
    v.extend(batch_norm_decls(&format!("{prefix}.bn"), c));
    v.extend(linear_decls(&format!("{prefix}.fc2"), c, c, true));
    v.extend(layer_norm_decls(&format!("{prefix}.ln3"), c));
    v.extend(conv_decls(&format!("{prefix}.dw3"), &dw, true));
    v
}

/// UCM path on tokens `[B, H*W, C]`:
/// `Linear(LN) -> map -> Conv(LN) -> Conv(Leaky) -> tokens -> Linear(BN) -> map -> Conv(LN) -> tokens`,
/// with depthwise 1x1 convolutions.
pub fn ucm_path<'t, T: Float>(
    ctx: &Ctx<'t, '_, T>,
    prefix: &str,
    x: Var<'t, T>,
    h: usize,
    w: usize,
) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if shape.len() != 3 || shape[1] != h * w {
        return Err(Error::ShapeMismatch(format!(
            "ucm path got {shape:?} for a {h}x{w} grid"
        )));
    }
    let c = shape[2];
    let dw = ConvSpec::depthwise(c, 1);
    let p = |s: &str| format!("{prefix}.{s}");

    let t = ctx.linear(&p("fc1"), ctx.layer_norm(&p("ln1"), x)?, true)?;
    let m = nn::to_map(t, h, w)?;
    let m = ctx.conv(&p("dw1"), &dw, ctx.layer_norm(&p("ln2"), m)?, true)?;
    let m = ctx.conv(&p("dw2"), &dw, m.leaky_relu(LEAKY_SLOPE), true)?;
    let t = nn::to_tokens(m)?;
    let t = ctx.linear(&p("fc2"), ctx.batch_norm(&p("bn"), t)?, true)?;
    let m = nn::to_map(t, h, w)?;
    let m = ctx.conv(&p("dw3"), &dw, ctx.layer_norm(&p("ln3"), m)?, true)?;
    nn::to_tokens(m)
}

/// Geometry of one Mamba-UCM block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MambaUcmSpec {
    pub channels: usize,
    /// Patch count; 0 disables the Mamba path.
    pub k: usize,
    pub d_state: usize,
    pub expand: usize,
    pub conv_width: usize,
}

impl MambaUcmSpec {
    pub fn new(channels: usize, k: usize) -> Self {
        let d = SsmConfig::new(1);
        MambaUcmSpec {
            channels,
            k,
            d_state: d.d_state,
            expand: d.expand,
            conv_width: d.conv_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k > 0 && !self.channels.is_multiple_of(self.k) {
            return Err(Error::InvalidSplit(format!(
                "{} channels into {} patches",
                self.channels, self.k
            )));
        }
        Ok(())
    }

    /// SSM configuration of each patch layer.
    pub fn patch_ssm(&self) -> SsmConfig {
        let d_model = self.channels / self.k.max(1);
        SsmConfig {
            d_state: self.d_state,
            expand: self.expand,
            conv_width: self.conv_width,
            ..SsmConfig::new(d_model)
        }
    }
}

pub fn mamba_ucm_decls(prefix: &str, spec: &MambaUcmSpec) -> Result<Vec<ParamDecl>> {
    spec.validate()?;
    let mut v = ucm_decls(&format!("{prefix}.ucm"), spec.channels);
    for j in 0..spec.k {
        v.extend(ssm::param_decls(&format!("{prefix}.mamba{j}"), &spec.patch_ssm()));
    }
    Ok(v)
}

/// `ucm(X) + X + concat_j mamba_j(X_j)` on the flattened map; returns tokens
/// `[B, H*W, C]`. Patch `j` uses its own layer `mamba{j}`.
pub fn mamba_ucm<'t, T: Float>(
    ctx: &Ctx<'t, '_, T>,
    prefix: &str,
    x: Var<'t, T>,
    spec: &MambaUcmSpec,
) -> Result<Var<'t, T>> {
    spec.validate()?;
    let shape = x.shape();
    let [_, c, h, w]: [usize; 4] = shape
        .as_slice()
        .try_into()
        .map_err(|_| Error::ShapeMismatch(format!("mamba-ucm expects [B,C,H,W], got {shape:?}")))?;
    if c != spec.channels {
        return Err(Error::ShapeMismatch(format!(
            "mamba-ucm got {c} channels, expects {}",
            spec.channels
        )));
    }
    let tokens = nn::to_tokens(x)?;
    let ucm = ucm_path(ctx, &format!("{prefix}.ucm"), tokens, h, w)?;
    let out = ucm.add(tokens)?;
    if spec.k == 0 {
        return Ok(out);
    }
    let cfg = spec.patch_ssm();
    let patches = tokens.split(2, spec.k)?;
    let mut outs = Vec::with_capacity(spec.k);
    for (j, patch) in patches.into_iter().enumerate() {
        let p = SsmParams::load(ctx, &format!("{prefix}.mamba{j}"))?;
        outs.push(ssm::mamba_forward(patch, &p, &cfg)?);
    }
    out.add(Var::concat(&outs, 2)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::randn;
    use crate::nn::Mode;
    use crate::params::ParamStore;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn conv_block_shape() {
        let store = ParamStore::<f32>::from_decls(&conv_block_decls("b", 3, 8), 1).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Train, false);
        let x = tape.constant(Tensor::make(&[1, 3, 64, 64], crate::tensor::Init::Gaussian(2)).unwrap());
        assert_eq!(conv_block(&ctx, "b", x, 3, 8).unwrap().shape(), vec![1, 8, 64, 64]);
        assert_eq!(ctx.take_stats().len(), 1);
    }

    #[test]
    fn conv_block_identity_one_channel() {
        let mut store = ParamStore::<f64>::from_decls(&conv_block_decls("b", 1, 1), 1).unwrap();
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        *store.tensor_mut("b.conv.weight").unwrap() = w;
        *store.tensor_mut("b.conv.bias").unwrap() = Tensor::zeros(&[1]);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Eval, false);
        let xv = randn(&[1, 1, 5, 5], 3);
        let y = conv_block(&ctx, "b", tape.constant(xv.clone()), 1, 1).unwrap().value();
        let s = 1.0 / (1.0 + nn::NORM_EPS).sqrt();
        for (a, b) in y.data().iter().zip(xv.data()) {
            let want = if *b > 0.0 { b * s } else { b * s * LEAKY_SLOPE };
            assert!((a - want).abs() < 1e-12);
        }
    }

    #[test]
    fn ucm_shape_and_annihilation() {
        let mut store = ParamStore::<f64>::from_decls(&ucm_decls("u", 16), 1).unwrap();
        let tape = Tape::new();
        let x = tape.constant(randn(&[2, 256, 16], 4));
        {
            let ctx = Ctx::new(&tape, &store, Mode::Train, false);
            assert_eq!(ucm_path(&ctx, "u", x, 16, 16).unwrap().shape(), vec![2, 256, 16]);
            assert!(matches!(ucm_path(&ctx, "u", x, 8, 8), Err(Error::ShapeMismatch(_))));
        }
        *store.tensor_mut("u.dw3.weight").unwrap() = Tensor::zeros(&[16, 1, 1, 1]);
        *store.tensor_mut("u.dw3.bias").unwrap() = Tensor::zeros(&[16]);
        let ctx = Ctx::new(&tape, &store, Mode::Train, false);
        let y = ucm_path(&ctx, "u", x, 16, 16).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    fn annihilate(store: &mut ParamStore<f64>, spec: &MambaUcmSpec) {
        *store.tensor_mut("m.ucm.dw3.weight").unwrap() = Tensor::zeros(&[spec.channels, 1, 1, 1]);
        *store.tensor_mut("m.ucm.dw3.bias").unwrap() = Tensor::zeros(&[spec.channels]);
        let cfg = spec.patch_ssm();
        for j in 0..spec.k {
            *store.tensor_mut(&format!("m.mamba{j}.out_proj.weight")).unwrap() =
                Tensor::zeros(&[cfg.d_inner(), cfg.d_model]);
        }
    }

    #[test]
    fn residual_identity() {
        for k in [0, 1, 2, 4, 8] {
            let spec = MambaUcmSpec::new(16, k);
            let mut store = ParamStore::<f64>::from_decls(&mamba_ucm_decls("m", &spec).unwrap(), 2).unwrap();
            annihilate(&mut store, &spec);
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store, Mode::Eval, false);
            let x = tape.constant(randn(&[1, 16, 4, 4], 5));
            let y = mamba_ucm(&ctx, "m", x, &spec).unwrap();
            assert_eq!(y.shape(), vec![1, 16, 16]);
            let flat = nn::to_tokens(x).unwrap();
            assert!(y.value().bit_eq(&flat.value()), "k={k}");
        }
    }

    #[test]
    fn indivisible_patches() {
        assert!(matches!(
            mamba_ucm_decls("m", &MambaUcmSpec::new(6, 4)),
            Err(Error::InvalidSplit(_))
        ));
    }

    #[test]
    fn patch_independence() {
        let spec = MambaUcmSpec::new(16, 2);
        let mut store = ParamStore::<f64>::from_decls(&mamba_ucm_decls("m", &spec).unwrap(), 7).unwrap();
        *store.tensor_mut("m.ucm.dw3.weight").unwrap() = Tensor::zeros(&[16, 1, 1, 1]);
        *store.tensor_mut("m.ucm.dw3.bias").unwrap() = Tensor::zeros(&[16]);
        let base = randn(&[1, 16, 4, 4], 8);
        let mut pert = base.clone();
        // channel 3 lives in patch 0
        for i in 0..16 {
            pert.data_mut()[3 * 16 + i] += 0.5;
        }
        let mamba_part = |x: &Tensor<f64>| {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store, Mode::Eval, false);
            let xv = tape.constant(x.clone());
            let y = mamba_ucm(&ctx, "m", xv, &spec).unwrap();
            let r = y.sub(nn::to_tokens(xv).unwrap()).unwrap();
            (*r.value()).clone()
        };
        let (y0, y1) = (mamba_part(&base), mamba_part(&pert));
        for n in 0..16 {
            for c in 8..16 {
                assert_eq!(y0.get(&[0, n, c]).to_bits(), y1.get(&[0, n, c]).to_bits());
            }
        }
        assert!((0..16).any(|n| y0.get(&[0, n, 0]) != y1.get(&[0, n, 0])));
    }

    #[test]
    fn mamba_params_decrease_with_k() {
        let count = |k| {
            mamba_ucm_decls("m", &MambaUcmSpec::new(32, k))
                .unwrap()
                .iter()
                .filter(|d| d.name.contains(".mamba"))
                .map(|d| d.numel())
                .sum::<usize>()
        };
        assert!(count(1) > count(2) && count(2) > count(4) && count(4) > count(8));
    }
}
