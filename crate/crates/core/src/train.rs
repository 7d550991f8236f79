//! AdamW, cosine schedule, augmentation and the training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport, THRESHOLD};
use crate::net::{self, NetConfig};
use crate::nn::Mode;
use crate::objective::{self, LossBreakdown, LossConfig};
use crate::params::{Ctx, GradMap, ParamKind, ParamStore};
use crate::rng::{self, Purpose, StreamRng};
use crate::tensor::{Float, Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    /// Cosine half-period in epochs, after which the rate stays at
    /// `lr_min`; `None` keeps the rate constant at `lr`.
    pub t_max: Option<usize>,
    pub epochs: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
    /// Validate every this many epochs (the last epoch is always validated).
    pub eval_every: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            lr_min: 1e-5,
            weight_decay: 1e-2,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            t_max: Some(50),
            epochs: 200,
            max_steps: None,
            batch_size: 8,
            seed: 0,
            augment: true,
            eval_every: 1,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr {
            return bad(format!(
                "need 0 <= lr_min <= lr, 0 < lr (lr={}, lr_min={})",
                self.lr, self.lr_min
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.t_max == Some(0) || self.batch_size == 0 || self.eval_every == 0 {
            return bad("t_max, batch_size and eval_every must be >= 1".into());
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return bad("epochs must be >= 1".into());
        }
        self.loss.validate()
    }

    /// Learning rate for `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.t_max {
            Some(t) => cosine_lr(epoch, self.lr, self.lr_min, t),
            None => self.lr,
        }
    }
}

/// First and second moment estimates with the step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T: Float> {
    pub step: u64,
    m: IndexMap<String, Tensor<T>>,
    v: IndexMap<String, Tensor<T>>,
}

impl<T: Float> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }
}

/// Decoupled weight decay followed by a bias-corrected Adam step.
///
/// Decay touches only [`ParamKind::Decay`] tensors. Trainable tensors with
/// no entry in `grads` are stepped with a zero gradient.
pub fn adamw_step<T: Float>(
    store: &mut ParamStore<T>,
    grads: &GradMap<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for name in grads.keys() {
        let e = store.get(name)?;
        if !e.kind.trainable() {
            return Err(Error::InvalidConfig(format!("gradient for buffer {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, entry) in store.iter_mut() {
        if !entry.kind.trainable() {
            continue;
        }
        let n = entry.tensor.numel();
        let g = grads.get(name);
        if let Some(g) = g {
            if g.shape() != entry.tensor.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient for {name}: {:?} vs parameter {:?}",
                    g.shape(),
                    entry.tensor.shape()
                )));
            }
        }
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(entry.tensor.shape()));
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(entry.tensor.shape()));
        let decay = if entry.kind == ParamKind::Decay {
            lr * cfg.weight_decay
        } else {
            0.0
        };
        let (md, vd, pd) = (m.data_mut(), v.data_mut(), entry.tensor.data_mut());
        for i in 0..n {
            let gi = g.map_or(0.0, |g| g.data()[i].as_f64());
            let mi = b1 * md[i].as_f64() + (1.0 - b1) * gi;
            let vi = b2 * vd[i].as_f64() + (1.0 - b2) * gi * gi;
            md[i] = T::of(mi);
            vd[i] = T::of(vi);
            let mut p = pd[i].as_f64() * (1.0 - decay);
            p -= lr * (mi / c1) / ((vi / c2).sqrt() + cfg.adam_eps);
            pd[i] = T::of(p);
        }
    }
    Ok(())
}

/// Cosine annealing from `lr_max` at epoch 0 to `lr_min` at `t_max`, held
/// at `lr_min` afterwards.
pub fn cosine_lr(epoch: usize, lr_max: f64, lr_min: f64, t_max: usize) -> f64 {
    if epoch >= t_max {
        return lr_min;
    }
    let w = 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / t_max as f64).cos());
    lr_max * w + lr_min * (1.0 - w)
}

fn dims(t: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::InvalidShape(format!("expected [C,H,W], got {s:?}"))),
    }
}

/// Mirrors columns.
pub fn hflip(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = dims(t)?;
    let src = t.data();
    let data = (0..c * h * w)
        .map(|i| {
            let (row, col) = (i / w, i % w);
            src[row * w + (w - 1 - col)]
        })
        .collect();
    Tensor::from_vec(&[c, h, w], data)
}

/// Mirrors rows.
pub fn vflip(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = dims(t)?;
    let src = t.data();
    let data = (0..c * h * w)
        .map(|i| {
            let (ch, r, col) = (i / (h * w), (i / w) % h, i % w);
            src[(ch * h + (h - 1 - r)) * w + col]
        })
        .collect();
    Tensor::from_vec(&[c, h, w], data)
}

/// Quarter turn: input pixel `(r, c)` lands at `(c, H - 1 - r)`.
pub fn rot90(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = dims(t)?;
    let src = t.data();
    // output is [C, W, H]
    let mut data = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                data[(ch * w + col) * h + (h - 1 - r)] = src[(ch * h + r) * w + col];
            }
        }
    }
    Tensor::from_vec(&[c, w, h], data)
}

/// The same random flips and quarter turns applied to image and mask.
pub fn augment(image: &Tensor<f32>, mask: &Tensor<f32>, rng: &mut StreamRng) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (h_flip, v_flip, turns) = (rng.random_bool(0.5), rng.random_bool(0.5), rng.random_range(0..4u8));
    let mut pair = (image.clone(), mask.clone());
    let apply = |p: (Tensor<f32>, Tensor<f32>), f: fn(&Tensor<f32>) -> Result<Tensor<f32>>| -> Result<_> {
        Ok((f(&p.0)?, f(&p.1)?))
    };
    if h_flip {
        pair = apply(pair, hflip)?;
    }
    if v_flip {
        pair = apply(pair, vflip)?;
    }
    for _ in 0..turns {
        pair = apply(pair, rot90)?;
    }
    Ok(pair)
}

/// Stacks `[C, H, W]` tensors into `[B, C, H, W]`.
pub fn stack(items: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = items.first().ok_or(Error::EmptyDataset)?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for t in items {
        if t.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch(format!("{:?} vs {shape:?}", t.shape())));
        }
        data.extend_from_slice(t.data());
    }
    let mut full = vec![items.len()];
    full.extend(shape);
    Tensor::from_vec(&full, data)
}

fn mask_of(s: &Sample) -> Result<&Tensor<f32>> {
    s.mask
        .as_ref()
        .ok_or_else(|| Error::InvalidDataset(format!("sample {} has no mask", s.id)))
}

/// One optimizer step on a batch; returns the loss breakdown.
pub fn train_step(
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    store: &mut ParamStore<f32>,
    state: &mut AdamState<f32>,
    images: Tensor<f32>,
    masks: &Tensor<f32>,
    lr: f64,
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let (grads, stats, breakdown) = {
        let ctx = Ctx::new(&tape, store, Mode::Train, true);
        let out = net::forward(&ctx, net_cfg, tape.constant(images))?;
        let (loss, breakdown) = objective::group_loss_logits(&out, masks, &cfg.loss)?;
        if !breakdown.total.is_finite() {
            return Err(Error::DomainError(format!("non-finite loss {}", breakdown.total)));
        }
        let mut g = tape.backward(loss)?;
        (ctx.gradients(&mut g), ctx.take_stats(), breakdown)
    };
    adamw_step(store, &grads, state, lr, cfg)?;
    store.apply_stats(stats)?;
    Ok(breakdown)
}

/// Sigmoid probabilities `[1, S, S]` for one preprocessed image.
pub fn predict(net_cfg: &NetConfig, store: &ParamStore<f32>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, Mode::Eval, false);
    let x = stack(&[image])?;
    let out = net::forward(&ctx, net_cfg, tape.constant(x))?;
    let p = out.output.sigmoid().value();
    let s = net_cfg.input_size;
    p.view(&[1, s, s])
}

/// Per-image metrics at the fixed threshold, eval mode, batch 1.
pub fn evaluate(net_cfg: &NetConfig, store: &ParamStore<f32>, samples: &[Sample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut report = MetricsReport::new();
    for s in samples {
        let gt = mask_of(s)?;
        let p = predict(net_cfg, store, &s.image)?;
        let counts = metrics::confusion(&p, gt, THRESHOLD)?;
        report.push(&s.id, metrics::metrics_from_counts(&counts));
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_dsc: Option<f64>,
}

pub struct TrainOutcome {
    pub store: ParamStore<f32>,
    pub best: Option<ParamStore<f32>>,
    pub best_dsc: Option<f64>,
    pub history: Vec<EpochRecord>,
    pub steps: usize,
}

pub fn render_history(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,steps,lr,train_loss,val_dsc\n");
    for r in history {
        let dsc = r.val_dsc.map(|d| format!("{d:.6}")).unwrap_or_default();
        let _ = writeln!(s, "{},{},{:.8},{:.6},{}", r.epoch, r.steps, r.lr, r.train_loss, dsc);
    }
    s
}

/// Full training run.
///
/// Shuffling and augmentation draw from per-epoch sub-streams of `cfg.seed`,
/// so two runs with equal inputs produce bit-identical parameters. When
/// `val` is empty the training samples are used for validation. With
/// `out_dir` set, `history.csv`, `best.ckpt` and `last.ckpt` are written.
pub fn train(
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    init: ParamStore<f32>,
    train_set: &[Sample],
    val: &[Sample],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    net_cfg.validate()?;
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for s in train_set {
        mask_of(s)?;
    }
    let val = if val.is_empty() { train_set } else { val };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }

    let mut store = init;
    let mut state = AdamState::new();
    let mut history = Vec::new();
    let (mut best, mut best_dsc): (Option<ParamStore<f32>>, Option<f64>) = (None, None);
    let mut steps = 0usize;
    let epochs = match cfg.max_steps {
        Some(n) => n.div_ceil(train_set.len().div_ceil(cfg.batch_size)),
        None => cfg.epochs,
    };

    for epoch in 0..epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::substream(cfg.seed, Purpose::Shuffle, epoch as u64));
        let mut aug_rng = rng::substream(cfg.seed, Purpose::Augment, epoch as u64);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|n| steps >= n) {
                break;
            }
            let mut images = Vec::with_capacity(chunk.len());
            let mut masks = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &train_set[i];
                let (img, m) = if cfg.augment {
                    augment(&s.image, mask_of(s)?, &mut aug_rng)?
                } else {
                    (s.image.clone(), mask_of(s)?.clone())
                };
                images.push(img);
                masks.push(m);
            }
            let images = stack(&images.iter().collect::<Vec<_>>())?;
            let masks = stack(&masks.iter().collect::<Vec<_>>())?;
            let b = train_step(net_cfg, cfg, &mut store, &mut state, images, &masks, lr)?;
            loss_sum += b.total;
            batches += 1;
            steps += 1;
        }
        let last = epoch + 1 == epochs;
        let val_dsc = if last || (epoch + 1) % cfg.eval_every == 0 {
            Some(evaluate(net_cfg, &store, val)?.dsc().mean)
        } else {
            None
        };
        if let Some(d) = val_dsc {
            if best_dsc.is_none_or(|b| d > b) {
                best_dsc = Some(d);
                best = Some(store.clone());
                if let Some(dir) = out_dir {
                    net::save_checkpoint(&dir.join("best.ckpt"), net_cfg, &store)?;
                }
            }
        }
        history.push(EpochRecord {
            epoch,
            steps,
            lr,
            train_loss: loss_sum / batches.max(1) as f64,
            val_dsc,
        });
        if let Some(dir) = out_dir {
            fs::write(dir.join("history.csv"), render_history(&history))?;
        }
    }
    if let Some(dir) = out_dir {
        net::save_checkpoint(&dir.join("last.ckpt"), net_cfg, &store)?;
    }
    Ok(TrainOutcome {
        store,
        best,
        best_dsc,
        history,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::InitRule;
    use crate::params::ParamDecl;

    fn scalar_store(v: f64, kind: ParamKind) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::full(&[1], v), kind);
        s
    }

    #[test]
    fn adamw_first_step_closed_form() {
        let cfg = TrainConfig::default();
        let mut store = scalar_store(0.5, ParamKind::Decay);
        let mut grads = GradMap::new();
        grads.insert("p".into(), Tensor::full(&[1], 1.0));
        adamw_step(&mut store, &grads, &mut AdamState::new(), 1e-3, &cfg).unwrap();
        let want = 0.5 - 1e-3 * 0.01 * 0.5 - 1e-3 / (1.0 + 1e-8);
        assert!((store.tensor("p").unwrap().data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let cfg = TrainConfig::default();
        let mut store = scalar_store(2.0, ParamKind::Decay);
        store.insert("q", Tensor::full(&[2], 3.0), ParamKind::NoDecay);
        let mut grads = GradMap::new();
        grads.insert("p".into(), Tensor::zeros(&[1]));
        adamw_step(&mut store, &grads, &mut AdamState::new(), 0.1, &cfg).unwrap();
        assert!((store.tensor("p").unwrap().data()[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
        assert_eq!(store.tensor("q").unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn adamw_shape_mismatch() {
        let mut store = scalar_store(1.0, ParamKind::Decay);
        let mut grads = GradMap::new();
        grads.insert("p".into(), Tensor::zeros(&[2]));
        let r = adamw_step(&mut store, &grads, &mut AdamState::new(), 0.1, &TrainConfig::default());
        assert!(matches!(r, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn buffers_untouched() {
        let decl = ParamDecl::new("bn.running_var", &[2], InitRule::Constant(1.0), ParamKind::Buffer);
        let mut store = ParamStore::<f64>::from_decls(&[decl], 0).unwrap();
        adamw_step(
            &mut store,
            &GradMap::new(),
            &mut AdamState::new(),
            0.1,
            &TrainConfig::default(),
        )
        .unwrap();
        assert_eq!(store.tensor("bn.running_var").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 1e-3, 1e-5, 50), 1e-3);
        assert_eq!(cosine_lr(50, 1e-3, 1e-5, 50), 1e-5);
        assert_eq!(cosine_lr(120, 1e-3, 1e-5, 50), 1e-5);
        assert!((cosine_lr(25, 1e-3, 1e-5, 50) - 0.5 * (1e-3 + 1e-5)).abs() < 1e-15);
    }

    #[test]
    fn rot90_law_and_period() {
        let t = Tensor::<f32>::from_vec(&[1, 2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        let r = rot90(&t).unwrap();
        assert_eq!(r.shape(), &[1, 3, 2]);
        // (r, c) -> (c, H - 1 - r)
        for row in 0..2 {
            for col in 0..3 {
                assert_eq!(r.data()[col * 2 + (1 - row)], t.data()[row * 3 + col]);
            }
        }
        let mut x = t.clone();
        for _ in 0..4 {
            x = rot90(&x).unwrap();
        }
        assert!(x.bit_eq(&t));
        assert!(hflip(&hflip(&t).unwrap()).unwrap().bit_eq(&t));
        assert!(vflip(&vflip(&t).unwrap()).unwrap().bit_eq(&t));
    }

    #[test]
    fn augment_keeps_pair_aligned() {
        let img = Tensor::<f32>::from_vec(&[3, 4, 4], (0..48).map(|v| (v % 16) as f32).collect()).unwrap();
        let mask = Tensor::<f32>::from_vec(&[1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let mut rng = rng::stream(5, Purpose::Augment);
        for _ in 0..8 {
            let (a, m) = augment(&img, &mask, &mut rng).unwrap();
            assert_eq!(&a.data()[..16], m.data());
            assert_eq!(&a.data()[32..], m.data());
        }
    }

    #[test]
    fn empty_dataset() {
        let cfg = NetConfig::new(2, 32);
        let store = net::build::<f32>(&cfg, 0).unwrap();
        let r = train(&cfg, &TrainConfig::default(), store, &[], &[], None);
        assert!(matches!(r, Err(Error::EmptyDataset)));
    }
}
