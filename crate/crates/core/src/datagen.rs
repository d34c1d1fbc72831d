//! Synthetic key/value activations with token-norm-imbalance patterns, and
//! the `KVT1` tensor file format.
//!
//! The generator starts from i.i.d. standard normal entries and layers on:
//!
//! - outlier channels: for every non-sink token, channel `j` becomes
//!   `factor * (sign * offset + z)` with a sign fixed per `(head, channel)`,
//!   i.e. a large, sign-consistent channel like the massive key channels of
//!   real models;
//! - a log-normal per-token scale (`norm_spread`), broad norm variation;
//! - modality blocks, contiguous token ranges rescaled by a common factor;
//! - heavy tokens, rows multiplied by a large factor;
//! - sink tokens, rows replaced by a flat Gaussian direction whose norm is
//!   `sink_factor` times the median non-sink norm of the same head. Sinks
//!   therefore carry no outlier channels.
//!
//! # File format
//!
//! ```text
//! "KVT1" | JSON header | '\n' | body
//! ```
//!
//! The header is one UTF-8 JSON object with keys, in order, `shape`
//! (`[S, H, d_h]`), `dtype` (`"f32"` or `"f64"`), `layout`
//! (`"row-major-channel-fastest"`), `modality_blocks` (`[[start, end], ...]`)
//! and `outlier_tokens`. The body is `S * H * d_h` little-endian floats.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{l2_norm, Tensor3};

pub const MAGIC: &[u8; 4] = b"KVT1";
pub const LAYOUT: &str = "row-major-channel-fastest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityBlock {
    pub start: usize,
    pub end: usize,
    pub scale: f64,
}

/// Generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TniSpec {
    pub tokens: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub outlier_channels: Vec<usize>,
    pub outlier_factor: f64,
    /// Channel mean in units of the base standard deviation, before `outlier_factor`.
    pub outlier_offset: f64,
    pub sink_tokens: Vec<usize>,
    pub sink_factor: f64,
    pub modality_blocks: Vec<ModalityBlock>,
    pub heavy_tokens: Vec<usize>,
    pub heavy_factor: f64,
    /// Standard deviation of the log per-token scale; 0 disables it.
    pub norm_spread: f64,
    pub seed: u64,
}

impl TniSpec {
    /// Plain standard-normal tensor.
    pub fn plain(tokens: usize, heads: usize, head_dim: usize, seed: u64) -> Self {
        Self {
            tokens,
            heads,
            head_dim,
            outlier_channels: Vec::new(),
            outlier_factor: 20.0,
            outlier_offset: 6.0,
            sink_tokens: Vec::new(),
            sink_factor: 0.01,
            modality_blocks: Vec::new(),
            heavy_tokens: Vec::new(),
            heavy_factor: 2.0,
            norm_spread: 0.0,
            seed,
        }
    }

    /// Key-like preset with every pattern switched on.
    ///
    /// Four outlier channels, one sink at token 0 plus one more per 32
    /// tokens, one heavy token per 128 (x2), two modality halves (the second at
    /// three times the scale of the first) and a 0.2 log-normal norm spread.
    /// Index choices are drawn from `seed`.
    pub fn key_pattern(tokens: usize, heads: usize, head_dim: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed).fork(0x5eed);
        let mut channels: Vec<usize> = (0..head_dim).collect();
        rng.shuffle(&mut channels);
        channels.truncate(4.min(head_dim));
        channels.sort_unstable();

        let mut order: Vec<usize> = (1..tokens).collect();
        rng.shuffle(&mut order);
        let n_sinks = (tokens / 32).max(1);
        let mut sinks = vec![0];
        sinks.extend(order.iter().take(n_sinks.saturating_sub(1)).copied());
        sinks.sort_unstable();
        let mut heavy: Vec<usize> = order
            .iter()
            .skip(n_sinks.saturating_sub(1))
            .take(tokens / 128)
            .copied()
            .collect();
        heavy.sort_unstable();

        let half = tokens / 2;
        let modality_blocks = if tokens >= 2 {
            vec![
                ModalityBlock {
                    start: 0,
                    end: half,
                    scale: 1.0,
                },
                ModalityBlock {
                    start: half,
                    end: tokens,
                    scale: 3.0,
                },
            ]
        } else {
            Vec::new()
        };
        Self {
            outlier_channels: channels,
            sink_tokens: sinks,
            heavy_tokens: heavy,
            modality_blocks,
            norm_spread: 0.2,
            ..Self::plain(tokens, heads, head_dim, seed)
        }
    }

    /// Value-like preset: the key pattern's token structure without outlier channels.
    pub fn value_pattern(tokens: usize, heads: usize, head_dim: usize, seed: u64) -> Self {
        Self {
            outlier_channels: Vec::new(),
            seed: seed ^ 0x9e37_79b9_7f4a_7c15,
            ..Self::key_pattern(tokens, heads, head_dim, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(Error::Argument("tensor dimensions must be positive".into()));
        }
        for (name, f) in [
            ("outlier_factor", self.outlier_factor),
            ("sink_factor", self.sink_factor),
            ("heavy_factor", self.heavy_factor),
        ] {
            if !(f.is_finite() && f > 0.0) {
                return Err(Error::Argument(format!("{name} must be positive, got {f}")));
            }
        }
        if !(self.outlier_offset.is_finite()
            && self.norm_spread.is_finite()
            && self.norm_spread >= 0.0)
        {
            return Err(Error::Argument(
                "offset and spread must be finite, spread >= 0".into(),
            ));
        }
        if let Some(&c) = self.outlier_channels.iter().find(|&&c| c >= self.head_dim) {
            return Err(Error::Argument(format!("outlier channel {c} >= head_dim")));
        }
        for (name, set) in [("sink", &self.sink_tokens), ("heavy", &self.heavy_tokens)] {
            if let Some(&t) = set.iter().find(|&&t| t >= self.tokens) {
                return Err(Error::Argument(format!(
                    "{name} token {t} >= {}",
                    self.tokens
                )));
            }
        }
        if let Some(t) = self
            .sink_tokens
            .iter()
            .find(|t| self.heavy_tokens.contains(t))
        {
            return Err(Error::Argument(format!(
                "token {t} is both a sink and a heavy token"
            )));
        }
        for b in &self.modality_blocks {
            if b.start >= b.end || b.end > self.tokens || !(b.scale.is_finite() && b.scale > 0.0) {
                return Err(Error::Argument(format!(
                    "bad modality block {}..{} x{}",
                    b.start, b.end, b.scale
                )));
            }
        }
        if self.sink_tokens.len() >= self.tokens {
            return Err(Error::Argument("every token is a sink".into()));
        }
        Ok(())
    }
}

impl Default for TniSpec {
    /// [`TniSpec::key_pattern`] at 256 tokens, 4 heads, 128 channels, seed 0.
    fn default() -> Self {
        Self::key_pattern(256, 4, 128, 0)
    }
}

/// Index sets that travel with a generated or loaded tensor.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotations {
    /// `[start, end)` token ranges, one per modality segment.
    pub modality_blocks: Vec<[usize; 2]>,
    /// Low-norm outlier (sink) tokens, ascending.
    pub outlier_tokens: Vec<usize>,
}

/// Generates a tensor and its annotations. Same spec, same bits.
pub fn generate(spec: &TniSpec) -> Result<(Tensor3, Annotations)> {
    spec.validate()?;
    let (s, hn, d) = (spec.tokens, spec.heads, spec.head_dim);
    let mut rng = SeededRng::new(spec.seed);
    let base: Vec<f64> = (0..s * hn * d).map(|_| rng.normal()).collect();
    let mut x = Tensor3::new(base, s, hn, d)?;

    let signs: Vec<f64> = (0..hn * d)
        .map(|_| if rng.uniform() < 0.5 { -1.0 } else { 1.0 })
        .collect();
    let token_scales: Vec<f64> = (0..s)
        .map(|_| (spec.norm_spread * rng.normal()).exp())
        .collect();
    let is_sink = |t: usize| spec.sink_tokens.contains(&t);

    for t in (0..s).filter(|&t| !is_sink(t)) {
        for h in 0..hn {
            for &j in &spec.outlier_channels {
                let z = x.get(t, h, j);
                let v = spec.outlier_factor * (signs[h * d + j] * spec.outlier_offset + z);
                x.set(t, h, j, v);
            }
        }
        let mut scale = token_scales[t];
        for b in spec
            .modality_blocks
            .iter()
            .filter(|b| (b.start..b.end).contains(&t))
        {
            scale *= b.scale;
        }
        if spec.heavy_tokens.contains(&t) {
            scale *= spec.heavy_factor;
        }
        x.token_row_mut(t).iter_mut().for_each(|v| *v *= scale);
    }

    if !spec.sink_tokens.is_empty() {
        for h in 0..hn {
            let mut norms: Vec<f64> = (0..s)
                .filter(|&t| !is_sink(t))
                .map(|t| l2_norm(x.vector(t, h)))
                .collect();
            norms.sort_by(f64::total_cmp);
            let target = spec.sink_factor * norms[norms.len() / 2];
            for &t in &spec.sink_tokens {
                let v = x.vector_mut(t, h);
                let n = l2_norm(v);
                if n > 0.0 {
                    v.iter_mut().for_each(|e| *e *= target / n);
                }
            }
        }
    }

    let mut outlier_tokens = spec.sink_tokens.clone();
    outlier_tokens.sort_unstable();
    outlier_tokens.dedup();
    let annotations = Annotations {
        modality_blocks: spec
            .modality_blocks
            .iter()
            .map(|b| [b.start, b.end])
            .collect(),
        outlier_tokens,
    };
    Ok((x, annotations))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    shape: [usize; 3],
    dtype: Dtype,
    layout: String,
    modality_blocks: Vec<[usize; 2]>,
    outlier_tokens: Vec<usize>,
}

/// Serializes a tensor to the `KVT1` byte layout.
pub fn encode(x: &Tensor3, annotations: &Annotations, dtype: Dtype) -> Result<Vec<u8>> {
    let header = Header {
        shape: [x.tokens(), x.heads(), x.head_dim()],
        dtype,
        layout: LAYOUT.to_string(),
        modality_blocks: annotations.modality_blocks.clone(),
        outlier_tokens: annotations.outlier_tokens.clone(),
    };
    let mut out = MAGIC.to_vec();
    out.extend(serde_json::to_vec(&header)?);
    out.push(b'\n');
    match dtype {
        Dtype::F64 => x.data().iter().for_each(|v| out.extend(v.to_le_bytes())),
        Dtype::F32 => x
            .data()
            .iter()
            .for_each(|v| out.extend((*v as f32).to_le_bytes())),
    }
    Ok(out)
}

/// Parses `KVT1` bytes.
pub fn decode(bytes: &[u8]) -> Result<(Tensor3, Annotations, Dtype)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "missing KVT1 magic".into(),
        });
    }
    let newline = bytes[4..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|p| p + 4)
        .ok_or_else(|| Error::Format {
            offset: bytes.len(),
            message: "header is not newline-terminated".into(),
        })?;
    let text = std::str::from_utf8(&bytes[4..newline]).map_err(|e| Error::Format {
        offset: 4 + e.valid_up_to(),
        message: "header is not UTF-8".into(),
    })?;
    let header: Header = serde_json::from_str(text).map_err(|e| Error::Format {
        offset: 4,
        message: format!("bad header: {e}"),
    })?;
    if header.layout != LAYOUT {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported layout '{}'", header.layout),
        });
    }
    let body_start = newline + 1;
    let body = &bytes[body_start..];
    let [s, h, d] = header.shape;
    let expected = s * h * d * header.dtype.width();
    if body.len() != expected {
        return Err(Error::Format {
            offset: body_start + body.len().min(expected),
            message: format!(
                "body holds {} bytes, shape {:?} as {:?} needs {expected}",
                body.len(),
                header.shape,
                header.dtype
            ),
        });
    }
    let data: Vec<f64> = match header.dtype {
        Dtype::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    };
    let x = Tensor3::new(data, s, h, d).map_err(|e| Error::Format {
        offset: body_start,
        message: e.to_string(),
    })?;
    for &[a, b] in &header.modality_blocks {
        if a >= b || b > s {
            return Err(Error::Format {
                offset: 4,
                message: format!("modality block [{a}, {b}) outside {s} tokens"),
            });
        }
    }
    if let Some(&t) = header.outlier_tokens.iter().find(|&&t| t >= s) {
        return Err(Error::Format {
            offset: 4,
            message: format!("outlier token {t} outside {s} tokens"),
        });
    }
    let annotations = Annotations {
        modality_blocks: header.modality_blocks,
        outlier_tokens: header.outlier_tokens,
    };
    Ok((x, annotations, header.dtype))
}

pub fn write_file(path: &Path, x: &Tensor3, annotations: &Annotations, dtype: Dtype) -> Result<()> {
    fs::write(path, encode(x, annotations, dtype)?)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<(Tensor3, Annotations)> {
    let (x, a, _) = decode(&fs::read(path)?)?;
    Ok((x, a))
}
