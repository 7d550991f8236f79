//! Parameter and FLOP accounting.
//!
//! FLOPs follow the 1 MAC = 1 FLOP convention and count convolutions, linear
//! maps, the selective scan (state update and readout) and the output gate.
//! Normalizations, activations, pooling, upsampling and residual sums are
//! reported separately as "extra ops".

use std::fmt::Write;

use crate::blocks::MambaUcmSpec;
use crate::error::Result;
use crate::net::{self, NetConfig};
use crate::nn::ConvSpec;
use crate::params::ParamStore;
use crate::tensor::Float;

/// Reference figures for one variant: (k, params in millions, GFLOPs).
pub const REFERENCES: [(usize, f64, f64); 5] = [
    (1, 0.139, 0.064),
    (2, 0.100, 0.059),
    (4, 0.081, 0.057),
    (8, 0.071, 0.055),
    (0, 0.047, 0.045),
];

pub fn reference(k: usize) -> Option<(f64, f64)> {
    REFERENCES.iter().find(|r| r.0 == k).map(|r| (r.1, r.2))
}

/// Trainable element count (running statistics excluded).
pub fn count_params<T: Float>(store: &ParamStore<T>) -> usize {
    store.count_trainable()
}

/// Per-tensor ledger lines `name shape numel`, trainable tensors only.
pub fn param_ledger<T: Float>(store: &ParamStore<T>) -> Vec<(String, Vec<usize>, usize)> {
    store
        .iter()
        .filter(|(_, e)| e.kind.trainable())
        .map(|(n, e)| (n.to_string(), e.tensor.shape().to_vec(), e.tensor.numel()))
        .collect()
}

/// Trainable parameter count from the config alone.
pub fn count_params_config(cfg: &NetConfig) -> Result<usize> {
    Ok(net::decls(cfg)?
        .iter()
        .filter(|d| d.kind.trainable())
        .map(|d| d.numel())
        .sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub macs: u64,
    pub extra_ops: u64,
}

#[derive(Default)]
struct Walker {
    layers: Vec<LayerCost>,
}

impl Walker {
    fn push(&mut self, name: String, macs: usize, extra: usize) {
        self.layers.push(LayerCost {
            name,
            macs: macs as u64,
            extra_ops: extra as u64,
        });
    }

    fn conv(&mut self, name: String, spec: ConvSpec, s: usize) {
        self.push(name, spec.macs(1, s, s) as usize, 0);
    }

    /// Norm (4 ops/element) and activation (1 op/element) charges.
    fn elementwise(&mut self, name: String, numel: usize, norms: usize, acts: usize) {
        self.push(name, 0, numel * (4 * norms + acts));
    }

    fn conv_block(&mut self, prefix: &str, c_in: usize, c_out: usize, s: usize) {
        self.conv(format!("{prefix}.conv"), ConvSpec::same(c_in, c_out, 3), s);
        self.elementwise(format!("{prefix}.bn+act"), c_out * s * s, 1, 1);
    }

    fn block(&mut self, prefix: &str, spec: &MambaUcmSpec, s: usize) {
        let (c, n) = (spec.channels, s * s);
        self.push(format!("{prefix}.ucm.fc1"), n * c * c, 0);
        self.push(format!("{prefix}.ucm.fc2"), n * c * c, 0);
        for dw in ["dw1", "dw2", "dw3"] {
            self.conv(format!("{prefix}.ucm.{dw}"), ConvSpec::depthwise(c, 1), s);
        }
        // 4 norms, 1 leaky ReLU, residual sum
        self.elementwise(format!("{prefix}.ucm.norm+act"), n * c, 4, 2);
        if spec.k == 0 {
            return;
        }
        let cfg = spec.patch_ssm();
        let (dm, di, st, r, w) = (cfg.d_model, cfg.d_inner(), cfg.d_state, cfg.dt_rank, cfg.conv_width);
        for j in 0..spec.k {
            let p = format!("{prefix}.mamba{j}");
            self.push(format!("{p}.in_proj"), n * dm * 2 * di, 0);
            self.push(format!("{p}.conv1d"), n * di * w, 0);
            self.push(format!("{p}.x_proj"), n * di * (r + 2 * st), 0);
            self.push(format!("{p}.dt_proj"), n * r * di, 0);
            self.push(format!("{p}.scan"), 2 * n * di * st, n * di * st);
            self.push(format!("{p}.gate"), n * di, 0);
            self.push(format!("{p}.out_proj"), n * di * dm, 0);
            // two SiLUs, softplus, skip term
            self.elementwise(format!("{p}.act"), n * di, 0, 4);
        }
        self.elementwise(format!("{prefix}.mamba.sum"), n * c, 0, 1);
    }
}

/// Per-layer cost of one forward pass at `input_size`, batch 1.
pub fn layer_costs(cfg: &NetConfig, input_size: usize) -> Result<Vec<LayerCost>> {
    let cfg = NetConfig { input_size, ..*cfg };
    cfg.validate()?;
    let (c, s) = (cfg.channels, input_size);
    let mut w = Walker::default();
    w.conv_block("enc1", 3, c[0], s);
    w.elementwise("enc1.pool".into(), c[0] * s * s, 0, 1);
    let mut res = s / 2;
    for i in 1..6 {
        let stage = i + 1;
        w.conv(format!("enc{stage}.proj"), ConvSpec::same(c[i - 1], c[i], 1), res);
        if stage < 6 {
            w.elementwise(format!("enc{stage}.pool"), c[i] * res * res, 0, 1);
            res /= 2;
        }
        w.block(&format!("enc{stage}.block"), &cfg.block(c[i]), res);
    }
    for i in (1..5).rev() {
        let stage = i + 1;
        w.conv(format!("dec{stage}.proj"), ConvSpec::same(c[i + 1], c[i], 1), res);
        w.block(&format!("dec{stage}.block"), &cfg.block(c[i]), res);
        if stage < 5 {
            res *= 2;
            w.elementwise(format!("dec{stage}.upsample+skip"), c[i] * res * res, 1, 1);
        } else {
            w.elementwise(format!("dec{stage}.skip"), c[i] * res * res, 0, 1);
        }
        w.conv(format!("head{stage}"), ConvSpec::same(c[i], 1, 1), res);
    }
    w.conv_block("dec1", c[1], c[0], res);
    res *= 2;
    w.elementwise("dec1.upsample+skip".into(), c[0] * res * res, 1, 1);
    w.conv("head1".into(), ConvSpec::same(c[0], 1, 1), res);
    w.conv("out".into(), ConvSpec::same(c[0], 1, 1), res);
    w.elementwise("out.upsample".into(), s * s, 1, 0);
    Ok(w.layers)
}

/// Counted FLOPs (MACs) of one forward pass at `input_size`, batch 1.
pub fn count_flops(cfg: &NetConfig, input_size: usize) -> Result<u64> {
    Ok(layer_costs(cfg, input_size)?.iter().map(|l| l.macs).sum())
}

/// Counted FLOPs plus the excluded elementwise work.
pub fn count_full_ops(cfg: &NetConfig, input_size: usize) -> Result<u64> {
    Ok(layer_costs(cfg, input_size)?.iter().map(|l| l.macs + l.extra_ops).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub variant: String,
    pub k: usize,
    pub params: usize,
    pub params_millions: f64,
    pub gflops: f64,
    pub full_gops: f64,
    pub reference_params: f64,
    pub reference_gflops: f64,
    pub params_dev_pct: f64,
    pub gflops_dev_pct: f64,
}

pub fn compare_report(variants: &[usize], input_size: usize) -> Result<Vec<AuditRow>> {
    variants
        .iter()
        .map(|&k| {
            let cfg = NetConfig::new(k, input_size);
            let params = count_params_config(&cfg)?;
            let params_millions = params as f64 / 1e6;
            let gflops = count_flops(&cfg, input_size)? as f64 / 1e9;
            let full_gops = count_full_ops(&cfg, input_size)? as f64 / 1e9;
            let (rp, rg) = reference(k).unwrap_or((f64::NAN, f64::NAN));
            Ok(AuditRow {
                variant: cfg.label(),
                k,
                params,
                params_millions,
                gflops,
                full_gops,
                reference_params: rp,
                reference_gflops: rg,
                params_dev_pct: 100.0 * (params_millions - rp) / rp,
                gflops_dev_pct: 100.0 * (gflops - rg) / rg,
            })
        })
        .collect()
}

/// Comma-separated table with the fixed column set.
pub fn render_csv(rows: &[AuditRow]) -> String {
    let mut s = String::from("variant,params,params_ref,params_dev_pct,gflops,gflops_ref,gflops_dev_pct\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.6},{:.3},{:.2},{:.6},{:.3},{:.2}",
            r.variant,
            r.params_millions,
            r.reference_params,
            r.params_dev_pct,
            r.gflops,
            r.reference_gflops,
            r.gflops_dev_pct
        );
    }
    s
}

/// Human-readable table.
pub fn render_text(rows: &[AuditRow], input_size: usize) -> String {
    let mut s = format!("complexity audit at {input_size}x{input_size}, batch 1, 1 MAC = 1 FLOP\n");
    let _ = writeln!(
        s,
        "{:<10} {:>10} {:>8} {:>8} {:>9} {:>8} {:>8} {:>10}",
        "variant", "params(M)", "ref", "dev%", "GFLOPs", "ref", "dev%", "full GOPs"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<10} {:>10.4} {:>8.3} {:>+8.1} {:>9.4} {:>8.3} {:>+8.1} {:>10.4}",
            r.variant,
            r.params_millions,
            r.reference_params,
            r.params_dev_pct,
            r.gflops,
            r.reference_gflops,
            r.gflops_dev_pct,
            r.full_gops
        );
    }
    s
}
