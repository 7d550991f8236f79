use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use mucm_core::audit;
use mucm_core::data::{self, DatasetSplit};
use mucm_core::gradcheck;
use mucm_core::net::{self, NetConfig};
use mucm_core::train::{self, TrainConfig};
use mucm_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "mucm",
    version,
    about = "Lightweight hybrid CNN/state-space segmentation network"
)]
#[command(args_override_self = true)]
struct Cli {
    /// key=value file supplying any flag of the subcommand; command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parameter and FLOP audit against the reference figures.
    Audit(AuditArgs),
    /// Finite-difference verification of every layer, block and loss.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic lesion dataset.
    Synth(SynthArgs),
    /// Train a network.
    Train(TrainArgs),
    /// Predict masks for a directory of images.
    Infer(InferArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
}

fn parse_variant(s: &str) -> Result<usize, String> {
    match s.trim() {
        "baseline" | "0" => Ok(0),
        v => v.parse().map_err(|_| format!("unknown variant `{v}`")),
    }
}

#[derive(Args, Debug)]
struct AuditArgs {
    /// Patch counts; `baseline` or 0 is the model without state-space paths.
    #[arg(long, value_delimiter = ',', value_parser = parse_variant, default_value = "1,2,4,8,baseline")]
    variants: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    input_size: usize,
    /// CSV report path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit 1 when a variant leaves the tolerance bands.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value = "false")]
    strict: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "f64")]
    dtype: String,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_parser = parse_variant, default_value = "8")]
    variant: usize,
    #[arg(long)]
    data: PathBuf,
    /// Run directory for history, checkpoints and the resolved config.
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    /// Network input size; defaults to the native size of the first
    /// training image when that is a multiple of 32, else 256.
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// Optimizer step budget; replaces the epoch count.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    lr_min: f64,
    #[arg(long, default_value_t = 1e-2)]
    weight_decay: f64,
    /// Cosine horizon in epochs, or `none` for a constant rate. Default: 50
    /// for epoch runs, `none` for step-budgeted runs.
    #[arg(long)]
    t_max: Option<String>,
    /// Flip/rotate augmentation. Default: on for epoch runs, off for
    /// step-budgeted runs.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    augment: Option<bool>,
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root with `images/` (and optionally `masks/`).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// train, val, test or all
    #[arg(long, default_value = "test")]
    split: String,
    /// Report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Validation(anyhow::Error),
    Usage(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::InvalidConfig(m)) => Failure::Usage(m.clone()),
            _ => Failure::Validation(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::from(anyhow::Error::from(e))
    }
}

type Outcome = Result<(), Failure>;

/// Splices `--config` file entries in front of the command-line flags.
fn expand_config(argv: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    let mut path = None;
    let mut rest = Vec::with_capacity(argv.len());
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            path = it.next().map(PathBuf::from);
            continue;
        }
        if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
            continue;
        }
        rest.push(a);
    }
    let Some(path) = path else {
        return Ok(rest);
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
    let mut from_file = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{}:{}: expected key=value", path.display(), n + 1);
        };
        from_file.push(OsString::from(format!("--{}={}", k.trim().replace('_', "-"), v.trim())));
    }
    // the subcommand is the first token after the program name that is not a flag
    let sub = rest
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map(|i| i + 2);
    let at = sub.unwrap_or(rest.len());
    rest.splice(at..at, from_file);
    Ok(rest)
}

fn echo(title: &str, pairs: &[(&str, String)]) {
    println!("# {title} resolved config");
    for (k, v) in pairs {
        println!("{k}={v}");
    }
}

fn run_audit(a: AuditArgs) -> Outcome {
    echo(
        "audit",
        &[
            (
                "variants",
                a.variants.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("input_size", a.input_size.to_string()),
            (
                "out",
                a.out.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            ("strict", a.strict.to_string()),
        ],
    );
    let start = Instant::now();
    let rows = audit::compare_report(&a.variants, a.input_size)?;
    print!("{}", audit::render_text(&rows, a.input_size));
    if let Some(out) = &a.out {
        fs::write(out, audit::render_csv(&rows)).with_context(|| format!("writing {}", out.display()))?;
        println!("wrote {}", out.display());
    }
    println!("elapsed {:.2}s", start.elapsed().as_secs_f64());
    if a.strict {
        let mut bad = Vec::new();
        for r in rows.iter().filter(|r| r.k != 0) {
            if r.params_dev_pct.abs() > 25.0 || r.gflops_dev_pct.abs() > 30.0 {
                bad.push(r.variant.clone());
            }
        }
        let counted: Vec<_> = rows.iter().filter(|r| r.k != 0).collect();
        let mut by_k = counted.clone();
        by_k.sort_by_key(|r| r.k);
        if by_k.windows(2).any(|w| w[1].params >= w[0].params) {
            bad.push("parameter counts not strictly decreasing in k".into());
        }
        if let Some(r) = counted.iter().find(|r| r.k == 8) {
            if r.gflops >= 0.072 {
                bad.push(format!("8-patch at {:.4} GFLOPs", r.gflops));
            }
        }
        if !bad.is_empty() {
            return Err(Failure::Validation(anyhow::anyhow!(
                "outside tolerance: {}",
                bad.join("; ")
            )));
        }
        println!("all variants within tolerance");
    }
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> Outcome {
    echo("gradcheck", &[("seed", a.seed.to_string()), ("dtype", a.dtype.clone())]);
    if a.dtype != "f64" {
        return Err(Failure::Usage(format!(
            "finite-difference checks need f64, got `{}`",
            a.dtype
        )));
    }
    let start = Instant::now();
    let reports = gradcheck::suite(a.seed)?;
    let mut failed = 0;
    for r in &reports {
        println!(
            "{:<4} {:<22} rel_err={:.3e}",
            if r.passed { "ok" } else { "FAIL" },
            r.name,
            r.rel_err
        );
        failed += usize::from(!r.passed);
    }
    println!(
        "{} checks, {} failed, tolerance {:e}, elapsed {:.2}s",
        reports.len(),
        failed,
        gradcheck::TOL,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Failure::Validation(anyhow::anyhow!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn run_synth(a: SynthArgs) -> Outcome {
    echo(
        "synth",
        &[
            ("n", a.n.to_string()),
            ("size", a.size.to_string()),
            ("seed", a.seed.to_string()),
            ("out", a.out.display().to_string()),
        ],
    );
    let split = data::synth_generate(a.n, a.size, a.seed, &a.out)?;
    println!("wrote {} samples to {}", split.train.len(), a.out.display());
    Ok(())
}

fn native_size(root: &Path, id: &str) -> anyhow::Result<usize> {
    let s = data::load_sample(root, id)?;
    let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
    Ok(if h == w && h % 32 == 0 { h } else { 256 })
}

fn run_train(a: TrainArgs) -> Outcome {
    let split = DatasetSplit::load(&a.data)?;
    let first = split.train.first().ok_or(Error::EmptyDataset)?;
    let input_size = match a.input_size {
        Some(s) => s,
        None => native_size(&a.data, first)?,
    };
    let budgeted = a.steps.is_some();
    let t_max = match a.t_max.as_deref() {
        Some("none") => None,
        Some(v) => Some(
            v.parse()
                .map_err(|_| Failure::Usage(format!("--t-max expects an integer or `none`, got `{v}`")))?,
        ),
        None if budgeted => None,
        None => Some(50),
    };
    let cfg = TrainConfig {
        lr: a.lr,
        lr_min: a.lr_min,
        weight_decay: a.weight_decay,
        t_max,
        epochs: a.epochs,
        max_steps: a.steps,
        batch_size: a.batch_size,
        seed: a.seed,
        augment: a.augment.unwrap_or(!budgeted),
        eval_every: a.eval_every,
        ..TrainConfig::default()
    };
    let net_cfg = NetConfig::new(a.variant, input_size);
    net_cfg.validate()?;
    cfg.validate()?;

    let mut pairs = vec![
        ("variant", net_cfg.label()),
        ("data", a.data.display().to_string()),
        ("out", a.out.display().to_string()),
        ("input_size", input_size.to_string()),
        ("epochs", a.epochs.to_string()),
        ("steps", a.steps.map(|s| s.to_string()).unwrap_or_else(|| "none".into())),
        ("seed", cfg.seed.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("lr", cfg.lr.to_string()),
        ("lr_min", cfg.lr_min.to_string()),
        ("weight_decay", cfg.weight_decay.to_string()),
        ("betas", format!("{},{}", cfg.betas.0, cfg.betas.1)),
        ("adam_eps", cfg.adam_eps.to_string()),
        ("t_max", t_max.map(|t| t.to_string()).unwrap_or_else(|| "none".into())),
        ("augment", cfg.augment.to_string()),
        ("eval_every", cfg.eval_every.to_string()),
    ];
    pairs.push(("lambdas", cfg.loss.lambdas.map(|l| l.to_string()).join(",")));
    echo("train", &pairs);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut resolved = String::new();
    for (k, v) in &pairs {
        let _ = writeln!(resolved, "{k}={v}");
    }
    fs::write(a.out.join("config.txt"), resolved).context("writing resolved config")?;

    let start = Instant::now();
    let train_set = data::load_set(&a.data, &split.train, input_size)?;
    let val_set = data::load_set(&a.data, &split.val, input_size)?;
    if val_set.is_empty() {
        println!("no validation split; validating on the training set");
    }
    let init = net::build::<f32>(&net_cfg, cfg.seed)?;
    let outcome = train::train(&net_cfg, &cfg, init, &train_set, &val_set, Some(&a.out))?;
    for r in outcome.history.iter().filter(|r| r.val_dsc.is_some()) {
        let (steps_total, every) = (outcome.history.len(), (outcome.history.len() / 20).max(1));
        if r.epoch % every == 0 || r.epoch + 1 == steps_total {
            println!(
                "epoch {:>4} steps {:>5} lr {:.2e} loss {:.4} val_dsc {:.4}",
                r.epoch,
                r.steps,
                r.lr,
                r.train_loss,
                r.val_dsc.unwrap_or(f64::NAN)
            );
        }
    }
    let report = train::evaluate(&net_cfg, &outcome.store, &train_set)?;
    println!("steps={}", outcome.steps);
    println!("best_val_dsc={:.6}", outcome.best_dsc.unwrap_or(f64::NAN));
    println!("final_train_dsc={:.6}", report.dsc().mean);
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    println!("wrote {}", a.out.display());
    Ok(())
}

fn run_infer(a: InferArgs) -> Outcome {
    echo(
        "infer",
        &[
            ("checkpoint", a.checkpoint.display().to_string()),
            ("data", a.data.display().to_string()),
            ("out", a.out.display().to_string()),
            ("threshold", a.threshold.to_string()),
        ],
    );
    let (cfg, store) = net::load_checkpoint::<f32>(&a.checkpoint)?;
    let ids = data::list_ids(&a.data.join("images"))?;
    if ids.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut report = mucm_core::metrics::MetricsReport::new();
    let mut scored = 0;
    for id in &ids {
        let raw = data::load_sample(&a.data, id)?;
        let (h, w) = (raw.image.shape()[1], raw.image.shape()[2]);
        let sample = data::preprocess(&raw, cfg.input_size)?;
        let probs = train::predict(&cfg, &store, &sample.image)?;
        // back to the source resolution before thresholding
        let probs = mucm_core::nn::resize_bilinear(&probs, h, w)?;
        data::save_mask(&probs, &a.out.join(format!("{id}.png")), a.threshold)?;
        if let Some(gt) = &raw.mask {
            let c = mucm_core::metrics::confusion(&probs, gt, a.threshold)?;
            report.push(id, mucm_core::metrics::metrics_from_counts(&c));
            scored += 1;
        }
    }
    println!("wrote {} masks to {}", ids.len(), a.out.display());
    if scored > 0 {
        let text = report.render();
        fs::write(a.out.join("metrics.txt"), &text).context("writing metrics")?;
        print!("{text}");
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> Outcome {
    echo(
        "eval",
        &[
            ("checkpoint", a.checkpoint.display().to_string()),
            ("data", a.data.display().to_string()),
            ("split", a.split.clone()),
            (
                "out",
                a.out.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
        ],
    );
    let (cfg, store) = net::load_checkpoint::<f32>(&a.checkpoint)?;
    let split = DatasetSplit::load(&a.data)?;
    let ids: Vec<String> = match a.split.as_str() {
        "train" => split.train,
        "val" => split.val,
        "test" => split.test,
        "all" => split.train.into_iter().chain(split.val).chain(split.test).collect(),
        other => return Err(Failure::Usage(format!("unknown split `{other}`"))),
    };
    let samples = data::load_set(&a.data, &ids, cfg.input_size)?;
    let report = train::evaluate(&cfg, &store, &samples)?;
    let text = report.render();
    print!("{text}");
    if let Some(out) = &a.out {
        fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let argv = match expand_config(std::env::args_os().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let _ = cli.config;
    let result = match cli.command {
        Command::Audit(a) => run_audit(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Infer(a) => run_infer(a),
        Command::Eval(a) => run_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
