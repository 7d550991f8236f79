//! Named parameter storage, declarative initialization, and the forward
//! context that binds stored tensors onto a tape.

use std::cell::RefCell;

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{self, ConvSpec, Mode, RunningStats};
use crate::rng::{self, Purpose, StreamRng};
use crate::tensor::{Float, Gradients, Tape, Tensor, Var};

/// Gradients keyed by parameter name.
pub type GradMap<T> = IndexMap<String, Tensor<T>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable, subject to weight decay.
    Decay,
    /// Trainable, exempt from weight decay (norm affines, SSM dynamics).
    NoDecay,
    /// Non-trainable state such as running statistics.
    Buffer,
}

impl ParamKind {
    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Decay => "decay",
            ParamKind::NoDecay => "nodecay",
            ParamKind::Buffer => "buffer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "decay" => Some(ParamKind::Decay),
            "nodecay" => Some(ParamKind::NoDecay),
            "buffer" => Some(ParamKind::Buffer),
            _ => None,
        }
    }

    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }
}

/// Gain of the `a = sqrt(5)` rule, giving `±1/sqrt(fan_in)`.
pub const GAIN_LINEAR: f64 = 0.577_350_269_189_625_8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitRule {
    /// Kaiming-uniform: `±gain * sqrt(3 / fan_in)`.
    Kaiming {
        fan_in: usize,
        gain: f64,
    },
    Constant(f64),
    /// `ln(n + 1)` along the last axis of extent `d_state`.
    StateLog {
        d_state: usize,
    },
    /// Inverse softplus of a log-uniform draw in `[lo, hi]`.
    InvSoftplus {
        lo: f64,
        hi: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitRule,
    pub kind: ParamKind,
}

impl ParamDecl {
    pub fn new(name: impl Into<String>, shape: &[usize], init: InitRule, kind: ParamKind) -> Self {
        ParamDecl {
            name: name.into(),
            shape: shape.to_vec(),
            init,
            kind,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Declarations for a convolution (`{prefix}.weight`, optional `{prefix}.bias`).
pub fn conv_decls(prefix: &str, spec: &ConvSpec, bias: bool) -> Vec<ParamDecl> {
    let fan_in = spec.in_channels / spec.groups * spec.kernel * spec.kernel;
    let mut v = vec![ParamDecl::new(
        format!("{prefix}.weight"),
        &spec.weight_shape(),
        InitRule::Kaiming {
            fan_in,
            gain: GAIN_LINEAR,
        },
        ParamKind::Decay,
    )];
    if bias {
        v.push(ParamDecl::new(
            format!("{prefix}.bias"),
            &[spec.out_channels],
            InitRule::Kaiming {
                fan_in,
                gain: GAIN_LINEAR,
            },
            ParamKind::Decay,
        ));
    }
    v
}

/// Declarations for a linear map stored as `[d_in, d_out]`.
pub fn linear_decls(prefix: &str, d_in: usize, d_out: usize, bias: bool) -> Vec<ParamDecl> {
    let mut v = vec![ParamDecl::new(
        format!("{prefix}.weight"),
        &[d_in, d_out],
        InitRule::Kaiming {
            fan_in: d_in,
            gain: GAIN_LINEAR,
        },
        ParamKind::Decay,
    )];
    if bias {
        v.push(ParamDecl::new(
            format!("{prefix}.bias"),
            &[d_out],
            InitRule::Kaiming {
                fan_in: d_in,
                gain: GAIN_LINEAR,
            },
            ParamKind::Decay,
        ));
    }
    v
}

pub fn layer_norm_decls(prefix: &str, c: usize) -> Vec<ParamDecl> {
    vec![
        ParamDecl::new(
            format!("{prefix}.scale"),
            &[c],
            InitRule::Constant(1.0),
            ParamKind::NoDecay,
        ),
        ParamDecl::new(
            format!("{prefix}.bias"),
            &[c],
            InitRule::Constant(0.0),
            ParamKind::NoDecay,
        ),
    ]
}

pub fn batch_norm_decls(prefix: &str, c: usize) -> Vec<ParamDecl> {
    let mut v = layer_norm_decls(prefix, c);
    v.push(ParamDecl::new(
        format!("{prefix}.running_mean"),
        &[c],
        InitRule::Constant(0.0),
        ParamKind::Buffer,
    ));
    v.push(ParamDecl::new(
        format!("{prefix}.running_var"),
        &[c],
        InitRule::Constant(1.0),
        ParamKind::Buffer,
    ));
    v
}

fn init_tensor<T: Float>(decl: &ParamDecl, rng: &mut StreamRng) -> Tensor<T> {
    let n = decl.numel();
    let data: Vec<T> = match decl.init {
        InitRule::Kaiming { fan_in, gain } => {
            let bound = gain * (3.0 / fan_in as f64).sqrt();
            (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
        }
        InitRule::Constant(c) => vec![T::of(c); n],
        InitRule::StateLog { d_state } => (0..n).map(|i| T::of(((i % d_state) as f64 + 1.0).ln())).collect(),
        InitRule::InvSoftplus { lo, hi } => (0..n)
            .map(|_| {
                let (lo, hi) = (lo.ln(), hi.ln());
                let dt = (lo + rng.random::<f64>() * (hi - lo)).exp();
                T::of(dt + (-(-dt).exp_m1()).ln())
            })
            .collect(),
    };
    Tensor::from_raw(decl.shape.clone(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T: Float> {
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
}

/// Ordered, named collection of model tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Float> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    /// Initializes every declaration, in order, from the `Init` stream of `seed`.
    pub fn from_decls(decls: &[ParamDecl], seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, Purpose::Init);
        let mut store = ParamStore::new();
        for d in decls {
            if store.entries.contains_key(&d.name) {
                return Err(Error::InvalidConfig(format!("duplicate parameter {}", d.name)));
            }
            let t = init_tensor(d, &mut rng);
            store.insert(&d.name, t, d.kind);
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>, kind: ParamKind) {
        self.entries.insert(name.to_string(), ParamEntry { tensor, kind });
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Element count of all trainable tensors.
    pub fn count_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind.trainable())
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            tensor: e.tensor.cast(),
                            kind: e.kind,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Writes running statistics returned by a train-mode forward.
    pub fn apply_stats(&mut self, updates: Vec<(String, RunningStats<T>)>) -> Result<()> {
        for (prefix, s) in updates {
            *self.tensor_mut(&format!("{prefix}.running_mean"))? = s.mean;
            *self.tensor_mut(&format!("{prefix}.running_var"))? = s.var;
        }
        Ok(())
    }

    /// Bitwise equality of names, kinds, shapes and contents.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, a), (kb, b))| ka == kb && a.kind == b.kind && a.tensor.bit_eq(&b.tensor))
    }
}

/// Binds a [`ParamStore`] onto a tape for one forward pass.
///
/// Trainable tensors become leaves when gradients are requested, constants
/// otherwise. Batch-norm calls in train mode collect their new running
/// statistics here instead of mutating the store.
pub struct Ctx<'t, 's, T: Float> {
    tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    mode: Mode,
    grad: bool,
    vars: RefCell<IndexMap<String, Var<'t, T>>>,
    stats: RefCell<Vec<(String, RunningStats<T>)>>,
}

impl<'t, 's, T: Float> Ctx<'t, 's, T> {
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>, mode: Mode, grad: bool) -> Self {
        Ctx {
            tape,
            store,
            mode,
            grad,
            vars: RefCell::new(IndexMap::new()),
            stats: RefCell::new(Vec::new()),
        }
    }

    /// Pre-binds parameters to existing vars (used by gradient checks).
    pub fn bind(&self, name: &str, var: Var<'t, T>) {
        self.vars.borrow_mut().insert(name.to_string(), var);
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&self, name: &str) -> Result<Var<'t, T>> {
        if let Some(&v) = self.vars.borrow().get(name) {
            return Ok(v);
        }
        let entry = self.store.get(name)?;
        let v = if self.grad && entry.kind.trainable() {
            self.tape.leaf(entry.tensor.clone())
        } else {
            self.tape.constant(entry.tensor.clone())
        };
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn conv(&self, prefix: &str, spec: &ConvSpec, x: Var<'t, T>, bias: bool) -> Result<Var<'t, T>> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = bias.then(|| self.param(&format!("{prefix}.bias"))).transpose()?;
        nn::conv2d(x, spec, w, b)
    }

    pub fn linear(&self, prefix: &str, x: Var<'t, T>, bias: bool) -> Result<Var<'t, T>> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = bias.then(|| self.param(&format!("{prefix}.bias"))).transpose()?;
        nn::linear(x, w, b)
    }

    pub fn layer_norm(&self, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = self.param(&format!("{prefix}.scale"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        nn::layer_norm(x, s, b, nn::NORM_EPS)
    }

    pub fn batch_norm(&self, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = self.param(&format!("{prefix}.scale"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        let rm = self.store.tensor(&format!("{prefix}.running_mean"))?;
        let rv = self.store.tensor(&format!("{prefix}.running_var"))?;
        let (y, stats) = nn::batch_norm(x, s, b, rm, rv, nn::NORM_EPS, nn::BN_MOMENTUM, self.mode)?;
        if let Some(stats) = stats {
            self.stats.borrow_mut().push((prefix.to_string(), stats));
        }
        Ok(y)
    }

    /// Leaf gradients by parameter name, for every bound trainable tensor.
    pub fn gradients(&self, grads: &mut Gradients<T>) -> GradMap<T> {
        self.vars
            .borrow()
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(k, &v)| {
                let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(&v.shape()));
                (k.clone(), g)
            })
            .collect()
    }

    /// Running-statistics updates gathered during a train-mode forward.
    pub fn take_stats(&self) -> Vec<(String, RunningStats<T>)> {
        std::mem::take(&mut self.stats.borrow_mut())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_param_count() {
        let decls = linear_decls("fc", 8, 16, true);
        let store = ParamStore::<f32>::from_decls(&decls, 0).unwrap();
        assert_eq!(store.count_trainable(), 144);
    }

    #[test]
    fn buffers_not_counted() {
        let store = ParamStore::<f32>::from_decls(&batch_norm_decls("bn", 4), 0).unwrap();
        assert_eq!(store.count_trainable(), 8);
        assert_eq!(store.len(), 4);
        assert_eq!(store.tensor("bn.running_var").unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn init_is_seeded() {
        let decls = conv_decls("c", &ConvSpec::same(3, 8, 3), true);
        let a = ParamStore::<f32>::from_decls(&decls, 5).unwrap();
        let b = ParamStore::<f32>::from_decls(&decls, 5).unwrap();
        let c = ParamStore::<f32>::from_decls(&decls, 6).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
        let bound = 1.0 / 27f32.sqrt();
        assert!(a.tensor("c.weight").unwrap().data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn unknown_param() {
        let store = ParamStore::<f32>::new();
        assert!(matches!(store.get("x"), Err(Error::UnknownParam(_))));
    }
}
