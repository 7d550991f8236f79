//! Acceptance criteria 1-8, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the report is always printed. A
//! failing criterion is reported, not raised; set `MUCM_ACCEPTANCE_STRICT=1`
//! to turn any FAIL line into a non-zero exit.

use std::process::ExitCode;
use std::time::Instant;

use mucm_core::audit;
use mucm_core::data;
use mucm_core::gradcheck;
use mucm_core::metrics::{self, ConfusionCounts};
use mucm_core::net::{self, NetConfig};
use mucm_core::nn::Mode;
use mucm_core::objective::{self, LossConfig};
use mucm_core::params::{Ctx, ParamStore};
use mucm_core::rng::{substream, Purpose, StreamRng};
use mucm_core::ssm::{self, SsmConfig, SsmParams};
use mucm_core::tensor::{Init, Tape, Tensor};
use mucm_core::train::{self, cosine_lr, TrainConfig};
use rand::Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

// ---------------------------------------------------------------- criterion 1

fn efficiency_audit() -> Outcome {
    const PARAM_BAND: f64 = 25.0;
    const FLOP_BAND: f64 = 30.0;
    const K8_CEILING: f64 = 0.072;
    let start = Instant::now();
    let rows = match audit::compare_report(&[1, 2, 4, 8], 256) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("audit failed: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let mut ok = secs < 5.0;
    let mut parts = Vec::new();
    for r in &rows {
        let within = r.params_dev_pct.abs() <= PARAM_BAND && r.gflops_dev_pct.abs() <= FLOP_BAND;
        ok &= within;
        parts.push(format!(
            "k={} {:.4}M ({:+.1}%) {:.4} GFLOPs ({:+.1}%)",
            r.k, r.params_millions, r.params_dev_pct, r.gflops, r.gflops_dev_pct
        ));
    }
    let monotone = rows.windows(2).all(|w| w[1].params < w[0].params);
    let k8 = rows
        .iter()
        .find(|r| r.k == 8)
        .map(|r| r.gflops)
        .unwrap_or(f64::INFINITY);
    ok &= monotone && k8 < K8_CEILING;
    outcome(
        ok,
        format!(
            "{}; params strictly decreasing: {monotone}; k=8 below {K8_CEILING}: {}; {secs:.2}s",
            parts.join(", "),
            k8 < K8_CEILING
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let reports = match gradcheck::suite(3) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("suite errored: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let worst = reports
        .iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
        .expect("non-empty suite");
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let required = [
        "conv2d 3x3",
        "conv1d_causal",
        "linear",
        "layer_norm tokens",
        "batch_norm train",
        "leaky_relu",
        "maxpool2d",
        "bilinear_upsample",
        "conv_block",
        "ucm_path",
        "mamba_ucm k=1",
        "mamba_ucm k=2",
        "bce",
        "dice",
        "squared_dice",
        "group_loss",
    ];
    let missing: Vec<&str> = required
        .iter()
        .copied()
        .filter(|n| !reports.iter().any(|r| r.name == *n))
        .collect();
    outcome(
        failed.is_empty() && missing.is_empty() && secs < 120.0,
        format!(
            "{} checks, worst {} at {:.2e} (tol {:.0e}), failed {:?}, missing {:?}; {secs:.1}s",
            reports.len(),
            worst.name,
            worst.rel_err,
            gradcheck::TOL,
            failed,
            missing
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

fn ref_bce(p: &[f64], y: &[f64], eps: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        let q = p[i].max(eps).min(1.0 - eps);
        s += y[i] * q.ln() + (1.0 - y[i]) * (1.0 - q).ln();
    }
    -s / p.len() as f64
}

fn ref_dice(p: &[f64], y: &[f64], smooth: f64) -> f64 {
    let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        inter += p[i] * y[i];
        sp += p[i];
        sy += y[i];
    }
    1.0 - (2.0 * inter + smooth) / (sp + sy + smooth)
}

fn ref_squared_dice(p: &[f64], y: &[f64], smooth: f64) -> f64 {
    let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        inter += p[i] * y[i];
        sp += p[i];
        sy += y[i];
    }
    1.0 - (2.0 * inter * inter + smooth) / (sp * sp + sy * sy + smooth)
}

fn ref_base(p: &[f64], y: &[f64], c: &LossConfig) -> f64 {
    ref_bce(p, y, c.clamp_eps) + ref_dice(p, y, c.smooth) + ref_squared_dice(p, y, c.smooth)
}

/// Nearest downscale sampling the source pixel under each target pixel centre.
fn ref_downscale(y: &[f64], side: usize, out: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(out * out);
    for r in 0..out {
        for c in 0..out {
            let sr = ((r as f64 + 0.5) * side as f64 / out as f64).floor() as usize;
            let sc = ((c as f64 + 0.5) * side as f64 / out as f64).floor() as usize;
            v.push(y[sr * side + sc]);
        }
    }
    v
}

fn random_probs(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| match rng.random_range(0..20) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random::<f64>(),
        })
        .collect()
}

fn random_mask(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| if rng.random::<f64>() < 0.35 { 1.0 } else { 0.0 })
        .collect()
}

fn lib_losses(p: &[f64], y: &[f64], c: &LossConfig) -> [f64; 4] {
    let tape = Tape::<f64>::new();
    let n = p.len();
    let pv = tape.constant(Tensor::from_vec(&[1, 1, 1, n], p.to_vec()).unwrap());
    let yv = tape.constant(Tensor::from_vec(&[1, 1, 1, n], y.to_vec()).unwrap());
    [
        objective::bce(pv, yv, c.clamp_eps).unwrap().item(),
        objective::dice(pv, yv, c.smooth).unwrap().item(),
        objective::squared_dice(pv, yv, c.smooth).unwrap().item(),
        objective::base_loss(pv, yv, c).unwrap().item(),
    ]
}

fn loss_oracles() -> Outcome {
    const TOL: f64 = 1e-9;
    let c = LossConfig::default();
    let mut rng = substream(2024, Purpose::Data, 3);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(1..200);
        let (p, y) = (random_probs(&mut rng, n), random_mask(&mut rng, n));
        let got = lib_losses(&p, &y, &c);
        let want = [
            ref_bce(&p, &y, c.clamp_eps),
            ref_dice(&p, &y, c.smooth),
            ref_squared_dice(&p, &y, c.smooth),
            ref_base(&p, &y, &c),
        ];
        for (g, w) in got.iter().zip(want) {
            worst = worst.max((g - w).abs());
        }

        // group loss on a 32x32 target with stages 1..16 deepest first
        let side = 32;
        let target = random_mask(&mut rng, side * side);
        let out = random_probs(&mut rng, side * side);
        let sizes = [1usize, 2, 4, 8, 16];
        let stages: Vec<Vec<f64>> = sizes.iter().map(|&s| random_probs(&mut rng, s * s)).collect();
        let mut want = ref_base(&out, &target, &c);
        for (i, (&s, sp)) in sizes.iter().zip(&stages).enumerate() {
            want += c.lambdas[i] * ref_base(sp, &ref_downscale(&target, side, s), &c);
        }
        let tape = Tape::<f64>::new();
        let stage_vars: Vec<_> = sizes
            .iter()
            .zip(&stages)
            .map(|(&s, sp)| tape.constant(Tensor::from_vec(&[1, 1, s, s], sp.clone()).unwrap()))
            .collect();
        let out_var = tape.constant(Tensor::from_vec(&[1, 1, side, side], out).unwrap());
        let t = Tensor::from_vec(&[1, 1, side, side], target).unwrap();
        let (total, _) = objective::group_loss(out_var, &stage_vars, &t, &c).unwrap();
        worst = worst.max((total.item() - want).abs());
    }

    // worked values; smooth -> 0 is taken as 1e-300
    let tiny = LossConfig {
        smooth: 1e-300,
        ..LossConfig::default()
    };
    let bce = lib_losses(&[0.8, 0.4], &[1.0, 0.0], &c)[0];
    let bce_formula = (-(0.8f64.ln()) - 0.6f64.ln()) / 2.0;
    let bce_ok = (bce - bce_formula).abs() < 1e-12 && (bce - 0.366958).abs() < 5e-5;
    let four = lib_losses(&[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 1.0, 0.0], &tiny);
    let dice_ok = (four[1] - 0.5).abs() < 1e-12;
    let sq_ok = (four[2] - 0.75).abs() < 1e-12;
    let base_want = 2.0 * -(1e-7f64.ln()) / 4.0 + 1.25;
    let base_ok = (four[3] - base_want).abs() < 1e-6 && (four[0] - 8.0590).abs() < 5e-4;
    outcome(
        worst <= TOL && bce_ok && dice_ok && sq_ok && base_ok,
        format!(
            "50 random cases, max |lib - oracle| {worst:.2e} (tol {TOL:.0e}); bce {bce:.7} (printed 0.366958), dice {:.6}, squared dice {:.6}, base {:.5} (clamped bce {:.4})",
            four[1], four[2], four[3], four[0]
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

fn metric_oracles() -> Outcome {
    let mut rng = substream(77, Purpose::Data, 4);
    let mut mismatches = 0;
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..40), rng.random_range(1..40));
        let density = rng.random::<f64>();
        let pred: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
        let gt: Vec<f64> = (0..h * w)
            .map(|_| if rng.random::<f64>() < density { 1.0 } else { 0.0 })
            .collect();
        let mut want = ConfusionCounts::default();
        for r in 0..h {
            for c in 0..w {
                let (p, g) = (pred[r * w + c] >= 0.5, gt[r * w + c] == 1.0);
                match (p, g) {
                    (true, true) => want.tp += 1,
                    (true, false) => want.fp += 1,
                    (false, true) => want.fn_ += 1,
                    (false, false) => want.tn += 1,
                }
            }
        }
        let pt = Tensor::<f64>::from_vec(&[1, h, w], pred).unwrap();
        let gt = Tensor::<f64>::from_vec(&[1, h, w], gt).unwrap();
        let got = metrics::confusion(&pt, &gt, metrics::THRESHOLD).unwrap();
        mismatches += usize::from(got != want);
    }
    let m = metrics::metrics_from_counts(&ConfusionCounts {
        tp: 8,
        fp: 2,
        fn_: 2,
        tn: 88,
    });
    let row_ok = (m.dsc - 0.8).abs() < 1e-12
        && (m.acc - 0.96).abs() < 1e-12
        && (m.se - 0.8).abs() < 1e-12
        && (m.sp - 88.0 / 90.0).abs() < 1e-12
        && (m.sp - 0.97778).abs() < 5e-6;
    outcome(
        mismatches == 0 && row_ok,
        format!(
            "100 random mask pairs, {mismatches} count mismatches; worked row DSC {:.4} ACC {:.4} SE {:.4} SP {:.5}",
            m.dsc, m.acc, m.se, m.sp
        ),
    )
}

// ---------------------------------------------------------------- criterion 5

fn mamba_output(store: &ParamStore<f64>, cfg: &SsmConfig, x: &Tensor<f64>) -> Tensor<f64> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, Mode::Eval, false);
    let p = SsmParams::load(&ctx, "m").unwrap();
    ssm::mamba_forward(tape.constant(x.clone()), &p, cfg)
        .unwrap()
        .value()
        .as_ref()
        .clone()
}

fn scan_causality_and_stability() -> Outcome {
    let cfg = SsmConfig::new(8);
    let store = ParamStore::<f64>::from_decls(&ssm::param_decls("m", &cfg), 5).unwrap();
    let len = 24;
    let x = Tensor::<f64>::make(&[1, len, 8], Init::Gaussian(6)).unwrap();
    let base = mamba_output(&store, &cfg, &x);
    let mut violations = 0;
    for t in 0..len {
        let mut x2 = x.clone();
        for c in 0..8 {
            x2.data_mut()[t * 8 + c] += 0.75;
        }
        let y = mamba_output(&store, &cfg, &x2);
        let earlier = t * 8;
        violations += base.data()[..earlier]
            .iter()
            .zip(&y.data()[..earlier])
            .filter(|(a, b)| a.to_bits() != b.to_bits())
            .count();
        // the perturbed token itself must move, or the check is vacuous
        if base.data()[earlier..earlier + 8] == y.data()[earlier..earlier + 8] {
            violations += 1;
        }
    }

    let long = 4096;
    let mut rng = substream(8, Purpose::Data, 5);
    let bounded: Vec<f64> = (0..long * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let start = Instant::now();
    let y = mamba_output(&store, &cfg, &Tensor::from_vec(&[1, long, 8], bounded).unwrap());
    let finite = y.data().iter().all(|v| v.is_finite());
    let peak = y.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    outcome(
        violations == 0 && finite,
        format!(
            "{len} single-token perturbations, {violations} earlier outputs changed (bitwise, f64); L={long} scan finite: {finite}, max |y| {peak:.3}, {:.2}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- criterion 6

fn desk_overfit() -> Outcome {
    const SEED: u64 = 1;
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let split = data::synth_generate(8, 64, SEED, dir.path()).unwrap();
    let set = data::load_set(dir.path(), &split.train, 64).unwrap();
    let net_cfg = NetConfig::new(2, 64);
    let cfg = TrainConfig {
        lr: 1e-3,
        weight_decay: 1e-2,
        t_max: None,
        max_steps: Some(300),
        batch_size: 8,
        seed: SEED,
        augment: false,
        eval_every: 50,
        ..TrainConfig::default()
    };
    let init = net::build::<f32>(&net_cfg, SEED).unwrap();
    let run = train::train(&net_cfg, &cfg, init, &set, &[], None).unwrap();
    let report = train::evaluate(&net_cfg, &run.store, &set).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let dsc = report.dsc().mean;
    let best = run.best_dsc.unwrap_or(f64::NAN);
    outcome(
        dsc >= 0.95 && secs < 600.0 && run.steps == 300,
        format!(
            "k=2, 8 images 64x64, seed {SEED}, {} steps: final-parameter train DSC {dsc:.4} (need >= 0.95), best checkpoint {best:.4}, SE {:.4}, SP {:.4}; {secs:.1}s",
            run.steps,
            report.se().mean,
            report.sp().mean
        ),
    )
}

// ---------------------------------------------------------------- criterion 7

fn determinism_and_persistence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let split = data::synth_generate(4, 32, 3, dir.path()).unwrap();
    let set = data::load_set(dir.path(), &split.train, 32).unwrap();
    let net_cfg = NetConfig::new(2, 32);
    let cfg = TrainConfig {
        max_steps: Some(6),
        batch_size: 2,
        seed: 9,
        ..TrainConfig::default()
    };
    let mut bytes = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        std::fs::create_dir_all(&out).unwrap();
        let init = net::build::<f32>(&net_cfg, cfg.seed).unwrap();
        train::train(&net_cfg, &cfg, init, &set, &[], Some(&out)).unwrap();
        bytes.push(std::fs::read(out.join("last.ckpt")).unwrap());
    }
    let identical = bytes[0] == bytes[1];

    let (cfg2, _) = net::decode_checkpoint::<f32>(&bytes[0]).unwrap();
    let store = net::build::<f32>(&net_cfg, 4).unwrap();
    let path = dir.path().join("rt.ckpt");
    net::save_checkpoint(&path, &net_cfg, &store).unwrap();
    let (_, loaded) = net::load_checkpoint::<f32>(&path).unwrap();
    let forward = |s: &ParamStore<f32>| {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, s, Mode::Eval, false);
        let x = tape.constant(Tensor::make(&[1, 3, 32, 32], Init::Gaussian(12)).unwrap());
        net::forward(&ctx, &net_cfg, x).unwrap().output.value().as_ref().clone()
    };
    let round_trip = forward(&store).bit_eq(&forward(&loaded)) && cfg2 == net_cfg;
    outcome(
        identical && round_trip,
        format!(
            "two seeded runs give identical checkpoint bytes: {identical}; save/load forward outputs bitwise equal: {round_trip}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn scheduler_endpoints() -> Outcome {
    let c = TrainConfig::default();
    let t_max = c.t_max.unwrap_or(50);
    let (start, end) = (
        cosine_lr(0, c.lr, c.lr_min, t_max),
        cosine_lr(t_max, c.lr, c.lr_min, t_max),
    );
    outcome(
        start == 0.001 && end == 1e-5 && t_max == 50,
        format!("cosine_lr(0) = {start:e}, cosine_lr({t_max}) = {end:e}"),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("efficiency audit", efficiency_audit),
        ("gradient correctness", gradient_correctness),
        ("loss oracle equivalence", loss_oracles),
        ("metric oracle equivalence", metric_oracles),
        ("scan causality and stability", scan_causality_and_stability),
        ("desk-scale overfit", desk_overfit),
        ("determinism and persistence", determinism_and_persistence),
        ("scheduler endpoints", scheduler_endpoints),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        if !o.passed {
            failed.push(i + 1);
        }
        println!(
            "criterion {}: {} {name}: {}",
            i + 1,
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!(
        "acceptance: {} of {} criteria passed, failing: {:?}",
        criteria.len() - failed.len(),
        criteria.len(),
        failed
    );
    let strict = std::env::var("MUCM_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && !failed.is_empty() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
