//! Confusion counts and the DSC / ACC / SE / SP metrics.

use std::fmt::Write;
use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Counts with predictions binarized at `threshold` (`p >= threshold` is positive).
pub fn confusion<T: Float>(pred: &Tensor<T>, gt: &Tensor<T>, threshold: f64) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs mask {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let thr = T::of(threshold);
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let truth = if g == T::one() {
            true
        } else if g == T::zero() {
            false
        } else {
            return Err(Error::InvalidMask(format!("value {g}")));
        };
        match (p >= thr, truth) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub dsc: f64,
    pub acc: f64,
    pub se: f64,
    pub sp: f64,
}

/// Ratio with a vacuous-truth rule: an empty denominator scores 1.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics_from_counts(c: &ConfusionCounts) -> Metrics {
    Metrics {
        dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        acc: ratio(c.tp + c.tn, c.total()),
        se: ratio(c.tp, c.tp + c.fn_),
        sp: ratio(c.tn, c.tn + c.fp),
    }
}

/// Per-image metrics with their means and population standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub ids: Vec<String>,
    pub per_image: Vec<Metrics>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

fn summarize(values: &[f64]) -> Summary {
    if values.is_empty() {
        return Summary { mean: 0.0, std: 0.0 };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Summary { mean, std: var.sqrt() }
}

impl MetricsReport {
    pub fn new() -> Self {
        MetricsReport {
            ids: Vec::new(),
            per_image: Vec::new(),
        }
    }

    pub fn push(&mut self, id: &str, m: Metrics) {
        self.ids.push(id.to_string());
        self.per_image.push(m);
    }

    fn column(&self, f: impl Fn(&Metrics) -> f64) -> Vec<f64> {
        self.per_image.iter().map(f).collect()
    }

    pub fn dsc(&self) -> Summary {
        summarize(&self.column(|m| m.dsc))
    }

    pub fn acc(&self) -> Summary {
        summarize(&self.column(|m| m.acc))
    }

    pub fn se(&self) -> Summary {
        summarize(&self.column(|m| m.se))
    }

    pub fn sp(&self) -> Summary {
        summarize(&self.column(|m| m.sp))
    }

    /// Key-value document: one `name.mean`/`name.std` pair per metric, then
    /// one line per image.
    pub fn render(&self) -> String {
        let mut s = format!("images={}\n", self.per_image.len());
        for (name, sum) in [
            ("dsc", self.dsc()),
            ("acc", self.acc()),
            ("se", self.se()),
            ("sp", self.sp()),
        ] {
            let _ = writeln!(s, "{name}.mean={:.6}", sum.mean);
            let _ = writeln!(s, "{name}.std={:.6}", sum.std);
        }
        for (id, m) in self.ids.iter().zip(&self.per_image) {
            let _ = writeln!(
                s,
                "image.{id}=dsc:{:.6},acc:{:.6},se:{:.6},sp:{:.6}",
                m.dsc, m.acc, m.se, m.sp
            );
        }
        s
    }
}

impl Default for MetricsReport {
    fn default() -> Self {
        Self::new()
    }
}
