//! Learnable arrays of the module: seeded initialization, itemized parameter
//! counts, and a binary container for persistence.
//!
//! Container layout (all integers little-endian): bytes 0-3 magic `MHSW`,
//! bytes 4-7 version (= 1), bytes 8-15 manifest length, then a UTF-8 JSON
//! manifest listing each tensor's name, shape, and storage type (`f32` or
//! `f64`), followed by the raw IEEE-754 payloads in manifest order with no
//! padding.

use crate::config::MhsConfig;
use crate::error::{Error, Result};
use crate::ssm::MambaWeights;
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const WEIGHTS_MAGIC: [u8; 4] = *b"MHSW";
pub const WEIGHTS_VERSION: u32 = 1;

/// All learnable arrays of one module instance.
#[derive(Debug, Clone, PartialEq)]
pub struct MhsWeights {
    /// Per-head subspace projections, each [S, C_l].
    pub head_proj: Vec<Tensor>,
    /// Per-head sequence blocks (never shared across heads).
    pub mamba: Vec<MambaWeights>,
    /// [1, 2] pooling mix, present iff the fusion scheme pools.
    pub esf_w: Option<Tensor>,
    /// [n * S] normalization gain.
    pub ln_gamma: Tensor,
    /// [n * S] normalization shift.
    pub ln_beta: Tensor,
    /// [C_l, n * S] tail projection, present iff enabled in config.
    pub tail_proj: Option<Tensor>,
}

impl MhsWeights {
    /// Canonical (name, tensor) enumeration; also the serialization order.
    pub fn entries(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (h, (proj, mamba)) in self.head_proj.iter().zip(&self.mamba).enumerate() {
            out.push((format!("head{h}.proj"), proj));
            out.push((format!("head{h}.w_in"), &mamba.w_in));
            out.push((format!("head{h}.w_gate"), &mamba.w_gate));
            if let Some(conv) = &mamba.conv_w {
                out.push((format!("head{h}.conv_w"), conv));
            }
            out.push((format!("head{h}.w_delta"), &mamba.w_delta));
            out.push((format!("head{h}.b_delta"), &mamba.b_delta));
            out.push((format!("head{h}.w_b"), &mamba.w_b));
            out.push((format!("head{h}.b_b"), &mamba.b_b));
            out.push((format!("head{h}.w_c"), &mamba.w_c));
            out.push((format!("head{h}.b_c"), &mamba.b_c));
            out.push((format!("head{h}.a"), &mamba.a));
            out.push((format!("head{h}.d_skip"), &mamba.d_skip));
            out.push((format!("head{h}.w_out"), &mamba.w_out));
        }
        if let Some(w) = &self.esf_w {
            out.push(("esf.w".into(), w));
        }
        out.push(("ln.gamma".into(), &self.ln_gamma));
        out.push(("ln.beta".into(), &self.ln_beta));
        if let Some(tail) = &self.tail_proj {
            out.push(("tail.proj".into(), tail));
        }
        out
    }

    /// Expected (name, shape) list for a config, in serialization order.
    pub fn layout(config: &MhsConfig) -> Result<Vec<(String, Vec<usize>)>> {
        config.validate()?;
        let s = config.subspace_dim;
        let d = config.inner_dim();
        let n = config.ssm.state_dim;
        let c_l = config.c_l;
        let fused = config.fused_channels();
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        for h in 0..config.n_heads {
            out.push((format!("head{h}.proj"), vec![s, c_l]));
            out.push((format!("head{h}.w_in"), vec![s, d]));
            out.push((format!("head{h}.w_gate"), vec![s, d]));
            if config.ssm.conv_on {
                out.push((format!("head{h}.conv_w"), vec![d, config.ssm.conv_width]));
            }
            out.push((format!("head{h}.w_delta"), vec![d, d]));
            out.push((format!("head{h}.b_delta"), vec![d]));
            out.push((format!("head{h}.w_b"), vec![d, n]));
            out.push((format!("head{h}.b_b"), vec![n]));
            out.push((format!("head{h}.w_c"), vec![d, n]));
            out.push((format!("head{h}.b_c"), vec![n]));
            out.push((format!("head{h}.a"), vec![d, n]));
            out.push((format!("head{h}.d_skip"), vec![d]));
            out.push((format!("head{h}.w_out"), vec![d, s]));
        }
        if config.esf.uses_pool_weights() {
            out.push(("esf.w".into(), vec![1, 2]));
        }
        out.push(("ln.gamma".into(), vec![fused]));
        out.push(("ln.beta".into(), vec![fused]));
        if config.tail_projection {
            out.push(("tail.proj".into(), vec![c_l, fused]));
        }
        Ok(out)
    }

    /// Verify this weight set matches the config's layout exactly.
    pub fn validate(&self, config: &MhsConfig) -> Result<()> {
        let layout = Self::layout(config)?;
        let entries = self.entries();
        if entries.len() != layout.len() {
            return Err(Error::Validation(format!(
                "weight set has {} tensors, config expects {}",
                entries.len(),
                layout.len()
            )));
        }
        for ((name, tensor), (want_name, want_shape)) in entries.iter().zip(&layout) {
            if name != want_name {
                return Err(Error::Validation(format!(
                    "tensor {name} out of place, expected {want_name}"
                )));
            }
            if tensor.shape() != want_shape.as_slice() {
                return Err(Error::Validation(format!(
                    "tensor {name} has shape {:?}, config expects {want_shape:?}",
                    tensor.shape()
                )));
            }
        }
        Ok(())
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuild the struct from tensors given in serialization order.
    fn from_ordered_tensors(config: &MhsConfig, mut tensors: Vec<Tensor>) -> Result<Self> {
        tensors.reverse();
        let mut next = || {
            tensors
                .pop()
                .ok_or_else(|| Error::Validation("tensor list too short for config".into()))
        };
        let mut head_proj = Vec::with_capacity(config.n_heads);
        let mut mamba = Vec::with_capacity(config.n_heads);
        for _ in 0..config.n_heads {
            head_proj.push(next()?);
            let w_in = next()?;
            let w_gate = next()?;
            let conv_w = if config.ssm.conv_on {
                Some(next()?)
            } else {
                None
            };
            mamba.push(MambaWeights {
                w_in,
                w_gate,
                conv_w,
                w_delta: next()?,
                b_delta: next()?,
                w_b: next()?,
                b_b: next()?,
                w_c: next()?,
                b_c: next()?,
                a: next()?,
                d_skip: next()?,
                w_out: next()?,
            });
        }
        let esf_w = if config.esf.uses_pool_weights() {
            Some(next()?)
        } else {
            None
        };
        let weights = MhsWeights {
            head_proj,
            mamba,
            esf_w,
            ln_gamma: next()?,
            ln_beta: next()?,
            tail_proj: if config.tail_projection {
                Some(next()?)
            } else {
                None
            },
        };
        weights.validate(config)?;
        Ok(weights)
    }
}

/// Deterministic weight initialization. Projections are uniform in
/// +-sqrt(6/(fan_in+fan_out)); the state matrix of every channel is
/// -(1, 2, ..., N); the timescale bias is drawn so its softplus lands in
/// [1e-3, 1e-1]; skip gains and the normalization gain start at 1, biases at
/// 0; the pooling mix starts from the config value. Random draws happen in
/// serialization order, and deterministic initializers consume no
/// randomness, so equal (config, seed) pairs give bitwise-equal weights.
pub fn init_weights(config: &MhsConfig, seed: u64) -> Result<MhsWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = config.subspace_dim;
    let d = config.inner_dim();
    let n = config.ssm.state_dim;
    let c_l = config.c_l;
    let fused = config.fused_channels();

    let xavier = |shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let count: usize = shape.iter().product();
        Tensor::new(
            shape,
            (0..count).map(|_| rng.gen_range(-bound..bound)).collect(),
        )
        .expect("shape/data agree by construction")
    };

    let a_init = Tensor::from_fn([d, n], |idx| -((idx[1] + 1) as f64));
    let mut head_proj = Vec::with_capacity(config.n_heads);
    let mut mamba = Vec::with_capacity(config.n_heads);
    for _ in 0..config.n_heads {
        head_proj.push(xavier(vec![s, c_l], c_l, s, &mut rng));
        let w_in = xavier(vec![s, d], s, d, &mut rng);
        let w_gate = xavier(vec![s, d], s, d, &mut rng);
        let conv_w = if config.ssm.conv_on {
            let width = config.ssm.conv_width;
            Some(xavier(vec![d, width], width, 1, &mut rng))
        } else {
            None
        };
        let w_delta = xavier(vec![d, d], d, d, &mut rng);
        let (lo, hi) = ((1e-3f64).ln(), (1e-1f64).ln());
        let b_delta = Tensor::new(
            [d],
            (0..d)
                .map(|_| {
                    let dt = rng.gen_range(lo..hi).exp();
                    dt.exp_m1().ln()
                })
                .collect(),
        )?;
        mamba.push(MambaWeights {
            w_in,
            w_gate,
            conv_w,
            w_delta,
            b_delta,
            w_b: xavier(vec![d, n], d, n, &mut rng),
            b_b: Tensor::zeros([n]),
            w_c: xavier(vec![d, n], d, n, &mut rng),
            b_c: Tensor::zeros([n]),
            a: a_init.clone(),
            d_skip: Tensor::full([d], 1.0),
            w_out: xavier(vec![d, s], d, s, &mut rng),
        });
    }
    let esf_w = config
        .esf
        .uses_pool_weights()
        .then(|| Tensor::new([1, 2], config.esf.w.to_vec()).expect("fixed-size mix"));
    let tail_proj = config
        .tail_projection
        .then(|| xavier(vec![c_l, fused], fused, c_l, &mut rng));
    let weights = MhsWeights {
        head_proj,
        mamba,
        esf_w,
        ln_gamma: Tensor::full([fused], 1.0),
        ln_beta: Tensor::zeros([fused]),
        tail_proj,
    };
    weights.validate(config)?;
    Ok(weights)
}

/// Scalar counts itemized by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub head_projections: usize,
    pub mamba_blocks: usize,
    pub esf: usize,
    pub layer_norm: usize,
    pub tail_projection: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.head_projections
            + self.mamba_blocks
            + self.esf
            + self.layer_norm
            + self.tail_projection
    }

    pub fn lines(&self) -> [(&'static str, usize); 5] {
        [
            ("head projections", self.head_projections),
            ("mamba blocks", self.mamba_blocks),
            ("esf", self.esf),
            ("layer norm", self.layer_norm),
            ("tail projection", self.tail_projection),
        ]
    }
}

/// Exact scalar count implied by a config. Routes share their head's
/// weights, so `k_routes` never appears in the arithmetic.
pub fn param_count(config: &MhsConfig) -> Result<ParamBreakdown> {
    config.validate()?;
    let s = config.subspace_dim;
    let d = config.inner_dim();
    let n = config.ssm.state_dim;
    let heads = config.n_heads;
    let conv = if config.ssm.conv_on {
        d * config.ssm.conv_width
    } else {
        0
    };
    let per_head = 2 * (s * d) + conv + d * d + d + 2 * (d * n) + 2 * n + d * n + d + d * s;
    Ok(ParamBreakdown {
        head_projections: heads * s * config.c_l,
        mamba_blocks: heads * per_head,
        esf: if config.esf.uses_pool_weights() { 2 } else { 0 },
        layer_norm: 2 * config.fused_channels(),
        tail_projection: if config.tail_projection {
            config.c_l * config.fused_channels()
        } else {
            0
        },
    })
}

/// At-rest storage width. All computation stays in f64; f32 is a lossy
/// storage option.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Storage {
    F32,
    F64,
}

impl Storage {
    fn dtype(self) -> &'static str {
        match self {
            Storage::F32 => "f32",
            Storage::F64 => "f64",
        }
    }

    fn width(self) -> usize {
        match self {
            Storage::F32 => 4,
            Storage::F64 => 8,
        }
    }

    fn parse(s: &str) -> Option<Storage> {
        match s {
            "f32" => Some(Storage::F32),
            "f64" => Some(Storage::F64),
            _ => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

/// Write the container with f64 payloads (bit-exact round trip).
pub fn save_weights(weights: &MhsWeights, path: impl AsRef<Path>) -> Result<()> {
    save_weights_as(weights, path, Storage::F64)
}

pub fn save_weights_as(
    weights: &MhsWeights,
    path: impl AsRef<Path>,
    storage: Storage,
) -> Result<()> {
    let entries = weights.entries();
    let manifest: Vec<ManifestEntry> = entries
        .iter()
        .map(|(name, tensor)| ManifestEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            dtype: storage.dtype().into(),
        })
        .collect();
    let manifest_bytes =
        serde_json::to_vec(&manifest).map_err(|e| Error::Validation(format!("manifest: {e}")))?;
    let payload: usize = entries.iter().map(|(_, t)| t.len() * storage.width()).sum();
    let mut out = Vec::with_capacity(16 + manifest_bytes.len() + payload);
    out.extend_from_slice(&WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    for (_, tensor) in &entries {
        match storage {
            Storage::F64 => {
                for &v in tensor.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Storage::F32 => {
                for &v in tensor.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read and validate a container against `config`. Malformed bytes give a
/// format error carrying the byte offset; a well-formed file whose tensors
/// disagree with the config gives a validation error naming the tensor.
pub fn load_weights(path: impl AsRef<Path>, config: &MhsConfig) -> Result<MhsWeights> {
    let bytes = std::fs::read(path)?;
    let fail = |offset: usize, msg: &str| Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    };
    if bytes.len() < 16 {
        return Err(fail(bytes.len(), "truncated header"));
    }
    if bytes[0..4] != WEIGHTS_MAGIC {
        return Err(fail(0, "bad magic, expected MHSW"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("fixed slice"));
    if version != WEIGHTS_VERSION {
        return Err(fail(4, &format!("unsupported version {version}")));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("fixed slice")) as usize;
    let payload_start = 16usize
        .checked_add(manifest_len)
        .filter(|&p| p <= bytes.len());
    let Some(payload_start) = payload_start else {
        return Err(fail(16, "manifest extends past end of file"));
    };
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| fail(16, &format!("manifest is not valid JSON: {e}")))?;

    let layout = MhsWeights::layout(config)?;
    if manifest.len() != layout.len() {
        return Err(Error::Validation(format!(
            "file lists {} tensors, config expects {}",
            manifest.len(),
            layout.len()
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.len());
    let mut offset = payload_start;
    for (entry, (want_name, want_shape)) in manifest.iter().zip(&layout) {
        if &entry.name != want_name {
            return Err(Error::Validation(format!(
                "tensor {} out of place, expected {want_name}",
                entry.name
            )));
        }
        if &entry.shape != want_shape {
            return Err(Error::Validation(format!(
                "tensor {} has shape {:?}, config expects {want_shape:?}",
                entry.name, entry.shape
            )));
        }
        let Some(storage) = Storage::parse(&entry.dtype) else {
            return Err(fail(
                16,
                &format!("tensor {} has unknown dtype {}", entry.name, entry.dtype),
            ));
        };
        let count: usize = entry.shape.iter().product();
        let nbytes = count * storage.width();
        if offset + nbytes > bytes.len() {
            return Err(fail(
                bytes.len(),
                &format!("file truncated inside tensor {}", entry.name),
            ));
        }
        let mut data = Vec::with_capacity(count);
        match storage {
            Storage::F64 => {
                for chunk in bytes[offset..offset + nbytes].chunks_exact(8) {
                    data.push(f64::from_le_bytes(chunk.try_into().expect("chunk size")));
                }
            }
            Storage::F32 => {
                for chunk in bytes[offset..offset + nbytes].chunks_exact(4) {
                    data.push(f32::from_le_bytes(chunk.try_into().expect("chunk size")) as f64);
                }
            }
        }
        offset += nbytes;
        tensors.push(Tensor::new(entry.shape.clone(), data)?);
    }
    if offset != bytes.len() {
        return Err(fail(offset, "trailing data after last tensor"));
    }
    MhsWeights::from_ordered_tensors(config, tensors)
}
