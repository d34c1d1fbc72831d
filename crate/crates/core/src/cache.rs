//! Low-bit KV cache with high-precision residual windows.
//!
//! Keys are stored channel-grouped and values token-grouped. New tokens land
//! in a residual buffer of at most `residual_len` tokens; a full buffer is
//! quantized as one block and moved to packed storage. Key tokens arrive
//! already transformed (rotated and/or divided by their scale), and their
//! per-`(token, head)` scales are kept next to the codes so materialization
//! can restore the original magnitudes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::quant::{
    dequantize, group_quant_per_channel, group_quant_per_token, pack_codes, unpack_codes,
    GroupAxis, PackedWords, QuantParams,
};
use crate::tensor::Tensor3;

/// Codes and parameters of one head within a packed segment.
#[derive(Debug, Clone, PartialEq)]
struct PackedHead {
    words: PackedWords,
    params: Vec<QuantParams>,
}

#[derive(Debug, Clone, PartialEq)]
enum SegmentData {
    Quantized(Vec<PackedHead>),
    /// Quantization disabled: tokens kept verbatim.
    Raw(Tensor3),
}

/// A run of consecutive packed tokens produced by one quantization call.
#[derive(Debug, Clone, PartialEq)]
struct Segment {
    tokens: usize,
    data: SegmentData,
}

#[derive(Debug, Clone, PartialEq)]
struct PackedStore {
    axis: GroupAxis,
    segments: Vec<Segment>,
    tokens: usize,
}

impl PackedStore {
    fn new(axis: GroupAxis) -> Self {
        Self {
            axis,
            segments: Vec::new(),
            tokens: 0,
        }
    }

    fn push(&mut self, x: &Tensor3, cfg: &PipelineConfig) -> Result<()> {
        if x.tokens() == 0 {
            return Ok(());
        }
        let data = if cfg.quantize {
            let mut heads = Vec::with_capacity(x.heads());
            for h in 0..x.heads() {
                let blocks = match self.axis {
                    GroupAxis::ChannelGrouped => {
                        group_quant_per_channel(x, h, cfg.group_size, cfg.bits)?
                    }
                    GroupAxis::TokenGrouped => {
                        group_quant_per_token(x, h, cfg.group_size, cfg.bits)?
                    }
                };
                let codes: Vec<u16> = blocks
                    .iter()
                    .flat_map(|b| b.codes.iter().copied())
                    .collect();
                heads.push(PackedHead {
                    words: pack_codes(&codes, cfg.bits)?,
                    params: blocks.iter().map(|b| b.params).collect(),
                });
            }
            SegmentData::Quantized(heads)
        } else {
            SegmentData::Raw(x.clone())
        };
        self.segments.push(Segment {
            tokens: x.tokens(),
            data,
        });
        self.tokens += x.tokens();
        Ok(())
    }

    fn materialize(&self, cfg: &PipelineConfig) -> Result<Tensor3> {
        let (hn, d, g) = (cfg.heads, cfg.head_dim, cfg.group_size);
        let mut out = Tensor3::empty(hn, d);
        for seg in &self.segments {
            match &seg.data {
                SegmentData::Raw(x) => out.append(x)?,
                SegmentData::Quantized(heads) => {
                    let mut part = Tensor3::zeros(seg.tokens, hn, d);
                    for (h, ph) in heads.iter().enumerate() {
                        let codes = unpack_codes(&ph.words)?;
                        for (bi, (chunk, p)) in codes.chunks(g).zip(&ph.params).enumerate() {
                            let vals = dequantize(chunk, p);
                            match self.axis {
                                GroupAxis::ChannelGrouped => {
                                    let (grp, j) = (bi / d, bi % d);
                                    for (i, v) in vals.into_iter().enumerate() {
                                        part.set(grp * g + i, h, j, v);
                                    }
                                }
                                GroupAxis::TokenGrouped => {
                                    let per_token = d / g;
                                    let (t, c0) = (bi / per_token, (bi % per_token) * g);
                                    for (i, v) in vals.into_iter().enumerate() {
                                        part.set(t, h, c0 + i, v);
                                    }
                                }
                            }
                        }
                    }
                    out.append(&part)?;
                }
            }
        }
        Ok(out)
    }

    fn code_count(&self) -> usize {
        self.segments
            .iter()
            .map(|s| match &s.data {
                SegmentData::Quantized(hs) => hs.iter().map(|h| h.words.count).sum(),
                SegmentData::Raw(_) => 0,
            })
            .sum()
    }

    fn word_count(&self) -> usize {
        self.segments
            .iter()
            .map(|s| match &s.data {
                SegmentData::Quantized(hs) => hs.iter().map(|h| h.words.words.len()).sum(),
                SegmentData::Raw(_) => 0,
            })
            .sum()
    }

    fn param_count(&self) -> usize {
        self.segments
            .iter()
            .map(|s| match &s.data {
                SegmentData::Quantized(hs) => hs.iter().map(|h| h.params.len()).sum(),
                SegmentData::Raw(_) => 0,
            })
            .sum()
    }

    fn raw_values(&self) -> usize {
        self.segments
            .iter()
            .map(|s| match &s.data {
                SegmentData::Raw(x) => x.data().len(),
                SegmentData::Quantized(_) => 0,
            })
            .sum()
    }
}

/// Storage footprint of a cache, in bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryLedger {
    pub packed_tokens: usize,
    pub residual_tokens: usize,
    /// `codes * bits` for packed keys.
    pub packed_k_bits: usize,
    pub packed_v_bits: usize,
    /// Packed words actually allocated (16 bits each), keys plus values.
    pub packed_word_bits: usize,
    /// Step, zero-point and minimum per group, 64 bits each.
    pub param_bits: usize,
    pub norm_bits: usize,
    /// Residual keys and values plus any unquantized packed tokens, 64 bits each.
    pub full_precision_bits: usize,
}

impl MemoryLedger {
    pub fn total_bits(&self) -> usize {
        self.packed_word_bits + self.param_bits + self.norm_bits + self.full_precision_bits
    }
}

/// Cache state for one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    config: PipelineConfig,
    packed_k: PackedStore,
    k_residual: Tensor3,
    /// `(token, head)` scales of packed keys, token-major.
    k_norms_grouped: Vec<f64>,
    k_norms_residual: Vec<f64>,
    packed_v: PackedStore,
    v_residual: Tensor3,
    flushes: usize,
}

impl KvCache {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            packed_k: PackedStore::new(GroupAxis::ChannelGrouped),
            k_residual: Tensor3::empty(config.heads, config.head_dim),
            k_norms_grouped: Vec::new(),
            k_norms_residual: Vec::new(),
            packed_v: PackedStore::new(GroupAxis::TokenGrouped),
            v_residual: Tensor3::empty(config.heads, config.head_dim),
            flushes: 0,
            config,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn packed_tokens(&self) -> usize {
        self.packed_k.tokens
    }

    pub fn residual_tokens(&self) -> usize {
        self.k_residual.tokens()
    }

    pub fn len(&self) -> usize {
        self.packed_tokens() + self.residual_tokens()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of decode-time residual flushes so far.
    pub fn flushes(&self) -> usize {
        self.flushes
    }

    pub fn k_norms_grouped(&self) -> &[f64] {
        &self.k_norms_grouped
    }

    pub fn k_norms_residual(&self) -> &[f64] {
        &self.k_norms_residual
    }

    pub fn k_residual(&self) -> &Tensor3 {
        &self.k_residual
    }

    pub fn v_residual(&self) -> &Tensor3 {
        &self.v_residual
    }

    fn check_layout(&self, x: &Tensor3, what: &str) -> Result<()> {
        if x.heads() != self.config.heads || x.head_dim() != self.config.head_dim {
            return Err(Error::Dimension(format!(
                "{what} has layout ({}, {}), cache expects ({}, {})",
                x.heads(),
                x.head_dim(),
                self.config.heads,
                self.config.head_dim
            )));
        }
        Ok(())
    }

    /// Adds transformed key tokens and their `(token, head)` scales.
    ///
    /// On an empty key store this is the prefill path: with `r = S mod R`,
    /// the first `S - r` tokens are quantized as one segment and the last `r`
    /// stay in the residual. Otherwise tokens are appended to the residual
    /// and every time it reaches `R` tokens the block is quantized and moved.
    pub fn buffer_quant_k(&mut self, new_k: &Tensor3, new_norms: &[f64]) -> Result<()> {
        self.check_layout(new_k, "key block")?;
        if new_norms.len() != new_k.tokens() * self.config.heads {
            return Err(Error::Dimension(format!(
                "{} key scales for {} tokens x {} heads",
                new_norms.len(),
                new_k.tokens(),
                self.config.heads
            )));
        }
        if let Some(bad) = new_norms.iter().find(|n| !(n.is_finite() && **n > 0.0)) {
            return Err(Error::Value(format!("key scale {bad} is not positive")));
        }
        let r_len = self.config.residual_len;
        let h = self.config.heads;
        if self.packed_k.tokens == 0 && self.k_residual.is_empty() {
            let s = new_k.tokens();
            let cut = s - s % r_len;
            self.packed_k
                .push(&new_k.slice_tokens(0..cut), &self.config)?;
            self.k_norms_grouped
                .extend_from_slice(&new_norms[..cut * h]);
            self.k_residual = new_k.slice_tokens(cut..s);
            self.k_norms_residual = new_norms[cut * h..].to_vec();
            return Ok(());
        }
        for t in 0..new_k.tokens() {
            self.k_residual.append(&new_k.slice_tokens(t..t + 1))?;
            self.k_norms_residual
                .extend_from_slice(&new_norms[t * h..(t + 1) * h]);
            assert!(
                self.k_residual.tokens() <= r_len,
                "key residual exceeded {r_len} tokens"
            );
            if self.k_residual.tokens() == r_len {
                self.packed_k.push(&self.k_residual, &self.config)?;
                self.k_norms_grouped.append(&mut self.k_norms_residual);
                self.k_residual.clear();
                self.flushes += 1;
            }
        }
        Ok(())
    }

    /// Value-side counterpart of [`KvCache::buffer_quant_k`], token-grouped and
    /// without scales.
    pub fn buffer_quant_v(&mut self, new_v: &Tensor3) -> Result<()> {
        self.check_layout(new_v, "value block")?;
        let r_len = self.config.residual_len;
        if self.packed_v.tokens == 0 && self.v_residual.is_empty() {
            let s = new_v.tokens();
            let cut = s - s % r_len;
            self.packed_v
                .push(&new_v.slice_tokens(0..cut), &self.config)?;
            self.v_residual = new_v.slice_tokens(cut..s);
            return Ok(());
        }
        for t in 0..new_v.tokens() {
            self.v_residual.append(&new_v.slice_tokens(t..t + 1))?;
            assert!(
                self.v_residual.tokens() <= r_len,
                "value residual exceeded {r_len} tokens"
            );
            if self.v_residual.tokens() == r_len {
                self.packed_v.push(&self.v_residual, &self.config)?;
                self.v_residual.clear();
            }
        }
        Ok(())
    }

    /// Updates keys and values together.
    pub fn append(&mut self, new_k: &Tensor3, new_norms: &[f64], new_v: &Tensor3) -> Result<()> {
        if new_k.tokens() != new_v.tokens() {
            return Err(Error::Dimension(format!(
                "{} key tokens but {} value tokens",
                new_k.tokens(),
                new_v.tokens()
            )));
        }
        self.buffer_quant_k(new_k, new_norms)?;
        self.buffer_quant_v(new_v)
    }

    /// Dequantized keys (packed then residual), each row multiplied by its scale.
    pub fn materialize_k(&self) -> Result<Tensor3> {
        let mut k = self.packed_k.materialize(&self.config)?;
        k.append(&self.k_residual)?;
        let norms = self.k_norms_grouped.iter().chain(&self.k_norms_residual);
        let h = self.config.heads;
        for (i, &s) in norms.enumerate() {
            k.vector_mut(i / h, i % h).iter_mut().for_each(|x| *x *= s);
        }
        Ok(k)
    }

    /// Dequantized keys in the transformed domain, before scales are restored.
    pub fn materialize_k_unscaled(&self) -> Result<Tensor3> {
        let mut k = self.packed_k.materialize(&self.config)?;
        k.append(&self.k_residual)?;
        Ok(k)
    }

    pub fn materialize_v(&self) -> Result<Tensor3> {
        let mut v = self.packed_v.materialize(&self.config)?;
        v.append(&self.v_residual)?;
        Ok(v)
    }

    pub fn memory(&self) -> MemoryLedger {
        let b = self.config.bits.get() as usize;
        let fp_values = self.k_residual.data().len()
            + self.v_residual.data().len()
            + self.packed_k.raw_values()
            + self.packed_v.raw_values();
        let norm_bits = if self.config.method.scales() {
            64 * (self.k_norms_grouped.len() + self.k_norms_residual.len())
        } else {
            0
        };
        MemoryLedger {
            packed_tokens: self.packed_tokens(),
            residual_tokens: self.residual_tokens(),
            packed_k_bits: self.packed_k.code_count() * b,
            packed_v_bits: self.packed_v.code_count() * b,
            packed_word_bits: 16 * (self.packed_k.word_count() + self.packed_v.word_count()),
            param_bits: 3 * 64 * (self.packed_k.param_count() + self.packed_v.param_count()),
            norm_bits,
            full_precision_bits: 64 * fp_values,
        }
    }

    /// Writes the cache as a JSON manifest plus little-endian binary sections.
    ///
    /// Sections: `k_codes.bin` / `v_codes.bin` hold packed `u16` words in
    /// segment, head, block order; `k_params.bin` / `v_params.bin` hold
    /// `(delta, zero_point, minimum)` as `f64` triples in the same order;
    /// `k_norms.bin`, `k_norms_residual.bin`, `k_residual.bin` and
    /// `v_residual.bin` hold `f64` values. Quantization must be enabled.
    pub fn dump(&self, dir: &Path) -> Result<CacheManifest> {
        fs::create_dir_all(dir)?;
        let mut k_segments = Vec::new();
        let (k_words, k_params) = flatten_store(&self.packed_k, &mut k_segments)?;
        let mut v_segments = Vec::new();
        let (v_words, v_params) = flatten_store(&self.packed_v, &mut v_segments)?;
        fs::write(dir.join("k_codes.bin"), words_le(&k_words))?;
        fs::write(dir.join("v_codes.bin"), words_le(&v_words))?;
        fs::write(dir.join("k_params.bin"), floats_le(&k_params))?;
        fs::write(dir.join("v_params.bin"), floats_le(&v_params))?;
        fs::write(dir.join("k_norms.bin"), floats_le(&self.k_norms_grouped))?;
        fs::write(
            dir.join("k_norms_residual.bin"),
            floats_le(&self.k_norms_residual),
        )?;
        fs::write(
            dir.join("k_residual.bin"),
            floats_le(self.k_residual.data()),
        )?;
        fs::write(
            dir.join("v_residual.bin"),
            floats_le(self.v_residual.data()),
        )?;
        let manifest = CacheManifest {
            s_packed: self.packed_tokens(),
            s_residual: self.residual_tokens(),
            r: self.config.residual_len,
            g: self.config.group_size,
            b: self.config.bits.get(),
            h: self.config.heads,
            d_h: self.config.head_dim,
            config: self.config,
            k_segments,
            v_segments,
            flushes: self.flushes,
        };
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(manifest)
    }

    /// Reads a cache written by [`KvCache::dump`].
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CacheManifest =
            serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let cfg = manifest.config;
        let mut cache = KvCache::new(cfg)?;
        let k_words = read_words(&dir.join("k_codes.bin"))?;
        let k_params = read_floats(&dir.join("k_params.bin"))?;
        cache.packed_k = rebuild_store(
            GroupAxis::ChannelGrouped,
            &cfg,
            &manifest.k_segments,
            &k_words,
            &k_params,
        )?;
        let v_words = read_words(&dir.join("v_codes.bin"))?;
        let v_params = read_floats(&dir.join("v_params.bin"))?;
        cache.packed_v = rebuild_store(
            GroupAxis::TokenGrouped,
            &cfg,
            &manifest.v_segments,
            &v_words,
            &v_params,
        )?;
        cache.k_norms_grouped = read_floats(&dir.join("k_norms.bin"))?;
        cache.k_norms_residual = read_floats(&dir.join("k_norms_residual.bin"))?;
        let (h, d) = (cfg.heads, cfg.head_dim);
        cache.k_residual = Tensor3::new(
            read_floats(&dir.join("k_residual.bin"))?,
            manifest.s_residual,
            h,
            d,
        )?;
        cache.v_residual = Tensor3::new(
            read_floats(&dir.join("v_residual.bin"))?,
            manifest.s_residual,
            h,
            d,
        )?;
        cache.flushes = manifest.flushes;
        if cache.k_norms_grouped.len() != manifest.s_packed * h {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "k_norms.bin holds {} scales, expected {}",
                    cache.k_norms_grouped.len(),
                    manifest.s_packed * h
                ),
            });
        }
        Ok(cache)
    }
}

/// Header of a cache dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    #[serde(rename = "S_packed")]
    pub s_packed: usize,
    #[serde(rename = "S_residual")]
    pub s_residual: usize,
    #[serde(rename = "R")]
    pub r: usize,
    #[serde(rename = "G")]
    pub g: usize,
    pub b: u8,
    #[serde(rename = "H")]
    pub h: usize,
    pub d_h: usize,
    pub config: PipelineConfig,
    /// Token count of each packed key segment, in order.
    pub k_segments: Vec<SegmentEntry>,
    pub v_segments: Vec<SegmentEntry>,
    pub flushes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub tokens: usize,
    /// Packed words per head.
    pub words_per_head: usize,
    /// Parameter triples per head.
    pub groups_per_head: usize,
}

fn flatten_store(
    store: &PackedStore,
    entries: &mut Vec<SegmentEntry>,
) -> Result<(Vec<u16>, Vec<f64>)> {
    let mut words = Vec::new();
    let mut params = Vec::new();
    for seg in &store.segments {
        let SegmentData::Quantized(heads) = &seg.data else {
            return Err(Error::State(
                "cannot dump a cache with quantization disabled".into(),
            ));
        };
        entries.push(SegmentEntry {
            tokens: seg.tokens,
            words_per_head: heads.first().map_or(0, |h| h.words.words.len()),
            groups_per_head: heads.first().map_or(0, |h| h.params.len()),
        });
        for h in heads {
            words.extend_from_slice(&h.words.words);
            for p in &h.params {
                params.extend([p.delta, p.zero_point as f64, p.minimum]);
            }
        }
    }
    Ok((words, params))
}

fn rebuild_store(
    axis: GroupAxis,
    cfg: &PipelineConfig,
    entries: &[SegmentEntry],
    words: &[u16],
    params: &[f64],
) -> Result<PackedStore> {
    let mut store = PackedStore::new(axis);
    let (mut wi, mut pi) = (0, 0);
    for e in entries {
        let mut heads = Vec::with_capacity(cfg.heads);
        for _ in 0..cfg.heads {
            let w_end = wi + e.words_per_head;
            let p_end = pi + 3 * e.groups_per_head;
            if w_end > words.len() || p_end > params.len() {
                return Err(Error::Format {
                    offset: 2 * wi.min(words.len()),
                    message: "cache dump sections are shorter than the manifest".into(),
                });
            }
            let ps = params[pi..p_end]
                .chunks(3)
                .map(|c| QuantParams {
                    delta: c[0],
                    zero_point: c[1] as i64,
                    bits: cfg.bits,
                    minimum: c[2],
                })
                .collect();
            heads.push(PackedHead {
                words: PackedWords {
                    words: words[wi..w_end].to_vec(),
                    bits: cfg.bits.get(),
                    count: e.tokens * cfg.head_dim,
                },
                params: ps,
            });
            wi = w_end;
            pi = p_end;
        }
        store.segments.push(Segment {
            tokens: e.tokens,
            data: SegmentData::Quantized(heads),
        });
        store.tokens += e.tokens;
    }
    Ok(store)
}

fn words_le(words: &[u16]) -> Vec<u8> {
    words.iter().flat_map(|w| w.to_le_bytes()).collect()
}

fn floats_le(vals: &[f64]) -> Vec<u8> {
    vals.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_words(path: &Path) -> Result<Vec<u16>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 2 != 0 {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!("{} has an odd byte count", path.display()),
        });
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect())
}

fn read_floats(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format {
            offset: bytes.len() - bytes.len() % 8,
            message: format!("{} is not a whole number of f64 values", path.display()),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Method;
    use crate::quant::BitWidth;
    use crate::rng::SeededRng;

    fn cfg(heads: usize, d: usize, g: usize, r: usize) -> PipelineConfig {
        PipelineConfig::new(Method::Oscar, heads, d).with_group(g, r)
    }

    fn random(rng: &mut SeededRng, s: usize, h: usize, d: usize) -> Tensor3 {
        Tensor3::from_fn(s, h, d, |_, _, _| rng.normal()).unwrap()
    }

    fn norms(rng: &mut SeededRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.uniform_range(0.5, 3.0)).collect()
    }

    #[test]
    fn prefill_split() {
        let mut rng = SeededRng::new(1);
        let mut c = KvCache::new(cfg(2, 32, 32, 128)).unwrap();
        let k = random(&mut rng, 300, 2, 32);
        let v = random(&mut rng, 300, 2, 32);
        c.append(&k, &norms(&mut rng, 600), &v).unwrap();
        assert_eq!(c.packed_tokens(), 256);
        assert_eq!(c.residual_tokens(), 44);
        assert_eq!(c.v_residual().tokens(), 44);
        assert_eq!(c.k_norms_grouped().len(), 256 * 2);
        assert_eq!(c.flushes(), 0);
    }

    #[test]
    fn prefill_multiple_of_r_leaves_empty_residual() {
        let mut rng = SeededRng::new(2);
        let mut c = KvCache::new(cfg(1, 32, 32, 128)).unwrap();
        let k = random(&mut rng, 128, 1, 32);
        c.append(&k, &norms(&mut rng, 128), &k).unwrap();
        assert_eq!(c.packed_tokens(), 128);
        assert_eq!(c.residual_tokens(), 0);
    }

    #[test]
    fn decode_flush_at_r() {
        let mut rng = SeededRng::new(3);
        let mut c = KvCache::new(cfg(1, 32, 32, 128)).unwrap();
        let k = random(&mut rng, 127, 1, 32);
        c.append(&k, &norms(&mut rng, 127), &k).unwrap();
        assert_eq!((c.packed_tokens(), c.residual_tokens()), (0, 127));
        let one = random(&mut rng, 1, 1, 32);
        c.append(&one, &[1.5], &one).unwrap();
        assert_eq!((c.packed_tokens(), c.residual_tokens()), (128, 0));
        assert_eq!(c.flushes(), 1);
        assert!(c.v_residual().is_empty());
    }

    #[test]
    fn empty_decode_stream_is_a_no_op() {
        let mut rng = SeededRng::new(4);
        let mut c = KvCache::new(cfg(1, 32, 32, 64)).unwrap();
        let k = random(&mut rng, 70, 1, 32);
        c.append(&k, &norms(&mut rng, 70), &k).unwrap();
        let before = c.clone();
        c.append(&Tensor3::empty(1, 32), &[], &Tensor3::empty(1, 32))
            .unwrap();
        assert_eq!(c, before);
    }

    #[test]
    fn value_groups_per_token() {
        let mut rng = SeededRng::new(5);
        let mut c = KvCache::new(cfg(1, 128, 32, 128)).unwrap();
        let k = random(&mut rng, 128, 1, 128);
        c.append(&k, &vec![1.0; 128], &k).unwrap();
        assert_eq!(c.packed_v.param_count(), 128 * 4);
        // 128-token key block: four token groups per channel
        assert_eq!(c.packed_k.param_count(), 4 * 128);
    }

    #[test]
    fn empty_cache_materializes_empty() {
        let c = KvCache::new(cfg(2, 32, 32, 64)).unwrap();
        assert_eq!(c.materialize_k().unwrap().shape(), (0, 2, 32));
        assert_eq!(c.materialize_v().unwrap().shape(), (0, 2, 32));
    }

    #[test]
    fn grid_tokens_reconstruct_exactly_at_16_bits() {
        // Every channel group spans exactly 0..=65535 in unit steps.
        let g = 32;
        let k = Tensor3::from_fn(64, 1, 32, |t, _, j| match t % g {
            0 => 0.0,
            1 => 65535.0,
            i => ((i * 977 + j * 131) % 65536) as f64,
        })
        .unwrap();
        let mut rng = SeededRng::new(6);
        let s = norms(&mut rng, 64);
        let config = cfg(1, 32, g, 64).with_bits(BitWidth::new(16).unwrap());
        let mut c = KvCache::new(config).unwrap();
        c.append(&k, &s, &k).unwrap();
        assert_eq!(c.packed_tokens(), 64);
        let back = c.materialize_k().unwrap();
        for (t, &st) in s.iter().enumerate() {
            for j in 0..32 {
                assert_eq!(back.get(t, 0, j), k.get(t, 0, j) * st);
            }
        }
        assert_eq!(c.materialize_k_unscaled().unwrap(), k);
    }

    #[test]
    fn batched_and_streamed_match() {
        let mut rng = SeededRng::new(7);
        for (s, r) in [(300, 128), (256, 128), (130, 64)] {
            let config = cfg(2, 32, 32, r);
            let k = random(&mut rng, s, 2, 32);
            let v = random(&mut rng, s, 2, 32);
            let n = norms(&mut rng, s * 2);
            let mut batched = KvCache::new(config).unwrap();
            batched.append(&k, &n, &v).unwrap();
            let mut streamed = KvCache::new(config).unwrap();
            for t in 0..s {
                streamed
                    .append(
                        &k.slice_tokens(t..t + 1),
                        &n[t * 2..t * 2 + 2],
                        &v.slice_tokens(t..t + 1),
                    )
                    .unwrap();
            }
            let (bk, sk) = (
                batched.materialize_k().unwrap(),
                streamed.materialize_k().unwrap(),
            );
            assert!(bk.max_abs_diff(&sk) <= 1e-12);
            let (bv, sv) = (
                batched.materialize_v().unwrap(),
                streamed.materialize_v().unwrap(),
            );
            assert!(bv.max_abs_diff(&sv) <= 1e-12);
            assert_eq!(streamed.flushes(), s / r);
        }
    }

    #[test]
    fn memory_accounting() {
        let mut rng = SeededRng::new(8);
        let config = cfg(2, 64, 32, 128);
        let mut c = KvCache::new(config).unwrap();
        let k = random(&mut rng, 300, 2, 64);
        c.append(&k, &norms(&mut rng, 600), &k).unwrap();
        let m = c.memory();
        assert_eq!(m.packed_k_bits, 256 * 2 * 64 * 2);
        assert_eq!(m.packed_v_bits, 256 * 2 * 64 * 2);
        assert_eq!(m.packed_word_bits, m.packed_k_bits + m.packed_v_bits);
        assert_eq!(m.full_precision_bits, 2 * 44 * 2 * 64 * 64);
        assert_eq!(m.norm_bits, 300 * 2 * 64);
    }

    #[test]
    fn norms_stay_untouched() {
        let mut rng = SeededRng::new(9);
        let mut c = KvCache::new(cfg(1, 32, 32, 32)).unwrap();
        let n = norms(&mut rng, 100);
        for t in 0..100 {
            let k = random(&mut rng, 1, 1, 32);
            c.append(&k, &n[t..t + 1], &k).unwrap();
        }
        assert_eq!(c.k_norms_grouped(), &n[..96]);
        assert_eq!(c.k_norms_residual(), &n[96..]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut c = KvCache::new(cfg(1, 32, 32, 64)).unwrap();
        let k = Tensor3::zeros(2, 1, 32);
        assert!(c.buffer_quant_k(&k, &[1.0]).is_err());
        assert!(c.buffer_quant_k(&k, &[1.0, 0.0]).is_err());
        assert!(c
            .buffer_quant_k(&Tensor3::zeros(1, 2, 32), &[1.0, 1.0])
            .is_err());
        assert!(c
            .append(&k, &[1.0, 1.0], &Tensor3::zeros(3, 1, 32))
            .is_err());
    }

    #[test]
    fn dump_and_load_round_trip() {
        let mut rng = SeededRng::new(10);
        let mut c = KvCache::new(cfg(2, 32, 32, 64)).unwrap();
        let k = random(&mut rng, 150, 2, 32);
        c.append(&k, &norms(&mut rng, 300), &k).unwrap();
        for _ in 0..20 {
            let t = random(&mut rng, 1, 2, 32);
            c.append(&t, &norms(&mut rng, 2), &t).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let manifest = c.dump(dir.path()).unwrap();
        assert_eq!(manifest.s_packed, 128);
        let bytes = fs::read(dir.path().join("k_codes.bin")).unwrap();
        // 128 tokens x 2 heads x 32 channels x 2 bits
        assert_eq!(bytes.len(), 128 * 2 * 32 * 2 / 8);
        let back = KvCache::load(dir.path()).unwrap();
        assert_eq!(back.materialize_k().unwrap(), c.materialize_k().unwrap());
        assert_eq!(back.materialize_v().unwrap(), c.materialize_v().unwrap());
    }
}
