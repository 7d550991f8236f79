//! The six-stage encoder/decoder network and its checkpoint format.
//!
//! Encoder: a 3x3 convolution block at full resolution, then five stages of
//! 1x1 channel projection, 2x2 max-pool and Mamba-UCM block (the deepest
//! stage does not pool). Decoder stages project channels, run a block,
//! upsample and add the matching encoder skip. Deep-supervision heads sit on
//! every decoder stage; the output head is upsampled to input resolution.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::blocks::{self, MambaUcmSpec};
use crate::error::{Error, Result};
use crate::nn::{self, ConvSpec};
use crate::params::{conv_decls, Ctx, ParamDecl, ParamKind, ParamStore};
use crate::ssm::SsmConfig;
use crate::tensor::{DType, Float, Tensor, Var};

pub const VARIANTS: [usize; 5] = [0, 1, 2, 4, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    /// Patch count of the Mamba path; 0 is the UCM-only baseline.
    pub k: usize,
    pub channels: [usize; 6],
    pub input_size: usize,
    pub d_state: usize,
    pub expand: usize,
    pub conv_width: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        let ssm = SsmConfig::new(1);
        NetConfig {
            k: 8,
            channels: [8, 16, 24, 32, 48, 64],
            input_size: 256,
            d_state: ssm.d_state,
            expand: ssm.expand,
            conv_width: ssm.conv_width,
        }
    }
}

impl NetConfig {
    pub fn new(k: usize, input_size: usize) -> Self {
        NetConfig {
            k,
            input_size,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !VARIANTS.contains(&self.k) {
            return Err(Error::InvalidConfig(format!(
                "variant k must be one of {VARIANTS:?}, got {}",
                self.k
            )));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(Error::InvalidConfig(format!(
                "input size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        if self.channels[0] == 0 || self.channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "channels must increase strictly: {:?}",
                self.channels
            )));
        }
        if self.k > 0 && self.channels[1..].iter().any(|c| c % self.k != 0) {
            return Err(Error::InvalidConfig(format!(
                "channels {:?} not divisible by k={}",
                &self.channels[1..],
                self.k
            )));
        }
        if self.d_state == 0 || self.expand == 0 || self.conv_width == 0 {
            return Err(Error::InvalidConfig("ssm settings must be positive".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.k {
            0 => "baseline".to_string(),
            k => format!("{k}-patch"),
        }
    }

    pub fn block(&self, channels: usize) -> MambaUcmSpec {
        MambaUcmSpec {
            channels,
            k: self.k,
            d_state: self.d_state,
            expand: self.expand,
            conv_width: self.conv_width,
        }
    }

    pub fn to_kv(&self) -> String {
        let ch: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        format!(
            "variant={}\nchannels={}\ninput_size={}\nd_state={}\nexpand={}\nconv_width={}\n",
            self.k,
            ch.join(","),
            self.input_size,
            self.d_state,
            self.expand,
            self.conv_width
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = NetConfig::default();
        let bad = |k: &str, v: &str| Error::InvalidConfig(format!("bad value for {k}: {v:?}"));
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("expected key=value, got {line:?}")))?;
            let num = || v.parse::<usize>().map_err(|_| bad(k, v));
            match k {
                "variant" => cfg.k = num()?,
                "input_size" => cfg.input_size = num()?,
                "d_state" => cfg.d_state = num()?,
                "expand" => cfg.expand = num()?,
                "conv_width" => cfg.conv_width = num()?,
                "channels" => {
                    let parsed: Vec<usize> = v
                        .split(',')
                        .map(|c| c.trim().parse().map_err(|_| bad(k, v)))
                        .collect::<Result<_>>()?;
                    cfg.channels = parsed.try_into().map_err(|_| bad(k, v))?;
                }
                _ => return Err(Error::InvalidConfig(format!("unknown key {k}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn proj(c_in: usize, c_out: usize) -> ConvSpec {
    ConvSpec::same(c_in, c_out, 1)
}

/// Every parameter and buffer of the network, in storage order.
pub fn decls(cfg: &NetConfig) -> Result<Vec<ParamDecl>> {
    cfg.validate()?;
    let c = cfg.channels;
    let mut v = blocks::conv_block_decls("enc1", 3, c[0]);
    for i in 1..6 {
        v.extend(conv_decls(&format!("enc{}.proj", i + 1), &proj(c[i - 1], c[i]), true));
        v.extend(blocks::mamba_ucm_decls(
            &format!("enc{}.block", i + 1),
            &cfg.block(c[i]),
        )?);
    }
    for i in (1..5).rev() {
        v.extend(conv_decls(&format!("dec{}.proj", i + 1), &proj(c[i + 1], c[i]), true));
        v.extend(blocks::mamba_ucm_decls(
            &format!("dec{}.block", i + 1),
            &cfg.block(c[i]),
        )?);
    }
    v.extend(blocks::conv_block_decls("dec1", c[1], c[0]));
    for i in (0..5).rev() {
        v.extend(conv_decls(&format!("head{}", i + 1), &proj(c[i], 1), true));
    }
    v.extend(conv_decls("out", &proj(c[0], 1), true));
    Ok(v)
}

/// Deterministic Kaiming-uniform initialization from `seed`.
pub fn build<T: Float>(cfg: &NetConfig, seed: u64) -> Result<ParamStore<T>> {
    ParamStore::from_decls(&decls(cfg)?, seed)
}

/// Network logits.
pub struct NetOutput<'t, T> {
    /// `[B, 1, S, S]`
    pub output: Var<'t, T>,
    /// Deep-supervision logits, deepest first, at `S/32 .. S/2`.
    pub stages: Vec<Var<'t, T>>,
}

fn block_map<'t, T: Float>(
    ctx: &Ctx<'t, '_, T>,
    prefix: &str,
    x: Var<'t, T>,
    spec: &MambaUcmSpec,
) -> Result<Var<'t, T>> {
    let [_, _, h, w]: [usize; 4] = x.shape().try_into().expect("4-D map");
    let tokens = blocks::mamba_ucm(ctx, prefix, x, spec)?;
    nn::to_map(tokens, h, w)
}

pub fn forward<'t, T: Float>(ctx: &Ctx<'t, '_, T>, cfg: &NetConfig, image: Var<'t, T>) -> Result<NetOutput<'t, T>> {
    let shape = image.shape();
    let s = cfg.input_size;
    if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
        return Err(Error::ShapeMismatch(format!(
            "network expects [B,3,{s},{s}], got {shape:?}"
        )));
    }
    let c = cfg.channels;

    let mut skips = Vec::with_capacity(5);
    let mut x = nn::maxpool2d(blocks::conv_block(ctx, "enc1", image, 3, c[0])?)?;
    skips.push(x);
    for i in 1..6 {
        let stage = i + 1;
        x = ctx.conv(&format!("enc{stage}.proj"), &proj(c[i - 1], c[i]), x, true)?;
        if stage < 6 {
            x = nn::maxpool2d(x)?;
        }
        x = block_map(ctx, &format!("enc{stage}.block"), x, &cfg.block(c[i]))?;
        if stage < 6 {
            skips.push(x);
        }
    }

    let mut decoded = Vec::with_capacity(5);
    for i in (1..5).rev() {
        let stage = i + 1;
        x = ctx.conv(&format!("dec{stage}.proj"), &proj(c[i + 1], c[i]), x, true)?;
        x = block_map(ctx, &format!("dec{stage}.block"), x, &cfg.block(c[i]))?;
        if stage < 5 {
            x = nn::bilinear_upsample(x, 2)?;
        }
        x = x.add(skips[i])?;
        decoded.push(x);
    }
    x = blocks::conv_block(ctx, "dec1", x, c[1], c[0])?;
    x = nn::bilinear_upsample(x, 2)?.add(skips[0])?;
    decoded.push(x);

    let stages = decoded
        .iter()
        .zip((0..5).rev())
        .map(|(&d, i)| ctx.conv(&format!("head{}", i + 1), &proj(c[i], 1), d, true))
        .collect::<Result<Vec<_>>>()?;
    let out = ctx.conv("out", &proj(c[0], 1), x, true)?;
    Ok(NetOutput {
        output: nn::bilinear_upsample(out, 2)?,
        stages,
    })
}

const MAGIC: &[u8; 4] = b"MUCM";
const VERSION: u32 = 1;

/// Serializes config and every tensor (buffers included).
///
/// Layout: `MUCM`, u32 version, u64 header length, UTF-8 header, then
/// little-endian payloads in header order. Header lines are the config as
/// `key=value`, then `tensor <name> <dtype> <d0,d1,..> <offset> <kind>`.
pub fn encode_checkpoint<T: Float>(cfg: &NetConfig, store: &ParamStore<T>) -> Vec<u8> {
    let mut header = cfg.to_kv();
    let mut payload = Vec::new();
    for (name, e) in store.iter() {
        let dims: Vec<String> = e.tensor.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!(
            "tensor {name} {} {} {} {}\n",
            T::DTYPE.name(),
            dims.join(","),
            payload.len(),
            e.kind.name()
        ));
        for &v in e.tensor.data() {
            v.write_le(&mut payload);
        }
    }
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&payload);
    out
}

pub fn decode_checkpoint<T: Float>(bytes: &[u8]) -> Result<(NetConfig, ParamStore<T>)> {
    let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if hlen > body.len() {
        return Err(corrupt("truncated header"));
    }
    let header = std::str::from_utf8(&body[..hlen]).map_err(|_| corrupt("header is not UTF-8"))?;
    let payload = &body[hlen..];

    let mut cfg_text = String::new();
    let mut store = ParamStore::new();
    let mut expected_offset = 0usize;
    for line in header.lines() {
        let Some(rest) = line.strip_prefix("tensor ") else {
            cfg_text.push_str(line);
            cfg_text.push('\n');
            continue;
        };
        let f: Vec<&str> = rest.split(' ').collect();
        let [name, dtype, dims, offset, kind] = f[..] else {
            return Err(Error::CorruptCheckpoint(format!("bad tensor line {line:?}")));
        };
        let dtype = DType::parse(dtype).ok_or_else(|| corrupt("unknown dtype"))?;
        let kind = ParamKind::parse(kind).ok_or_else(|| corrupt("unknown tensor kind"))?;
        let shape: Vec<usize> = dims
            .split(',')
            .map(|d| d.parse().map_err(|_| corrupt("bad shape")))
            .collect::<Result<_>>()?;
        let offset: usize = offset.parse().map_err(|_| corrupt("bad offset"))?;
        if offset != expected_offset {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor {name} at offset {offset}, expected {expected_offset}"
            )));
        }
        let numel: usize = shape.iter().product();
        let end = offset + numel * dtype.size();
        if end > payload.len() {
            return Err(Error::CorruptCheckpoint(format!("truncated payload for {name}")));
        }
        let raw = &payload[offset..end];
        let data: Vec<T> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|b| T::of(f32::read_le(b) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|b| T::of(f64::read_le(b))).collect(),
        };
        let tensor = Tensor::from_vec(&shape, data).map_err(|e| Error::CorruptCheckpoint(format!("{name}: {e}")))?;
        store.insert(name, tensor, kind);
        expected_offset = end;
    }
    if expected_offset != payload.len() {
        return Err(corrupt("trailing bytes after payload"));
    }
    let cfg = NetConfig::from_kv(&cfg_text).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let want = decls(&cfg)?;
    if want.len() != store.len()
        || want
            .iter()
            .zip(store.iter())
            .any(|(d, (name, e))| d.name != name || d.shape != e.tensor.shape())
    {
        return Err(corrupt("tensor set does not match the stored config"));
    }
    Ok((cfg, store))
}

pub fn save_checkpoint<T: Float>(path: &Path, cfg: &NetConfig, store: &ParamStore<T>) -> Result<()> {
    let bytes = encode_checkpoint(cfg, store);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint<T: Float>(path: &Path) -> Result<(NetConfig, ParamStore<T>)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode_checkpoint(&bytes)
}

/// Loads into an existing model, refusing a checkpoint of another config.
pub fn load_into<T: Float>(path: &Path, cfg: &NetConfig, store: &mut ParamStore<T>) -> Result<()> {
    let (stored, loaded) = load_checkpoint(path)?;
    if stored != *cfg {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint is {} at {}, model is {} at {}",
            stored.label(),
            stored.input_size,
            cfg.label(),
            cfg.input_size
        )));
    }
    *store = loaded;
    Ok(())
}
