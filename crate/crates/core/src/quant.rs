//! Asymmetric uniform quantization with integer zero-points, grouped along
//! either the token axis (per-channel keys) or the channel axis (per-token
//! values), plus bit-exact packing of codes into 16-bit words.
//!
//! For a group with range `[min, max]` and `b` bits:
//!
//! ```text
//! delta = (max - min) / (2^b - 1)       z = round(-min / delta)
//! q     = clamp(round(x / delta) + z, 0, 2^b - 1)
//! x_hat = delta * (q - z)
//! ```
//!
//! `round` is half-away-from-zero (`f64::round`). The zero-point is kept as a
//! signed integer and is never clamped: a clamped `z` breaks the `delta / 2`
//! reconstruction bound on groups whose values all share one sign.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Supported code widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct BitWidth(u8);

impl BitWidth {
    pub const SUPPORTED: [u8; 5] = [2, 3, 4, 8, 16];

    pub fn new(bits: u8) -> Result<Self> {
        if Self::SUPPORTED.contains(&bits) {
            Ok(Self(bits))
        } else {
            Err(Error::Argument(format!(
                "unsupported bit width {bits}; expected one of {:?}",
                Self::SUPPORTED
            )))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Largest representable code, `2^b - 1`.
    pub fn max_code(self) -> u32 {
        (1u32 << self.0) - 1
    }

    pub fn levels(self) -> f64 {
        self.max_code() as f64
    }
}

impl TryFrom<u8> for BitWidth {
    type Error = Error;
    fn try_from(b: u8) -> Result<Self> {
        Self::new(b)
    }
}

impl From<BitWidth> for u8 {
    fn from(b: BitWidth) -> u8 {
        b.0
    }
}

/// Step size and zero-point of one quantization group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub delta: f64,
    pub zero_point: i64,
    pub bits: BitWidth,
    /// Group minimum; reconstructs constant groups (`delta == 0`).
    pub minimum: f64,
}

impl QuantParams {
    pub fn is_constant(&self) -> bool {
        self.delta == 0.0
    }
}

pub fn quant_params(values: &[f64], bits: BitWidth) -> Result<QuantParams> {
    if values.is_empty() {
        return Err(Error::Argument("quantization group is empty".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::Value(format!(
                "non-finite value {v} in quantization group"
            )));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi == lo {
        return Ok(QuantParams {
            delta: 0.0,
            zero_point: 0,
            bits,
            minimum: lo,
        });
    }
    let delta = (hi - lo) / bits.levels();
    let zero_point = (-lo / delta).round() as i64;
    Ok(QuantParams {
        delta,
        zero_point,
        bits,
        minimum: lo,
    })
}

pub fn quantize_value(x: f64, p: &QuantParams) -> u16 {
    if p.is_constant() {
        return 0;
    }
    let q = (x / p.delta).round() + p.zero_point as f64;
    q.clamp(0.0, p.bits.levels()) as u16
}

pub fn dequantize_value(code: u16, p: &QuantParams) -> f64 {
    if p.is_constant() {
        return p.minimum;
    }
    p.delta * (code as i64 - p.zero_point) as f64
}

pub fn quantize(values: &[f64], p: &QuantParams) -> Vec<u16> {
    values.iter().map(|&x| quantize_value(x, p)).collect()
}

pub fn dequantize(codes: &[u16], p: &QuantParams) -> Vec<f64> {
    codes.iter().map(|&c| dequantize_value(c, p)).collect()
}

/// Round trip through a group's own parameters.
pub fn fake_quantize(values: &[f64], bits: BitWidth) -> Result<Vec<f64>> {
    let p = quant_params(values, bits)?;
    Ok(dequantize(&quantize(values, &p), &p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupAxis {
    /// One channel across `group_size` consecutive tokens.
    ChannelGrouped,
    /// `group_size` consecutive channels of one token.
    TokenGrouped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantBlock {
    pub codes: Vec<u16>,
    pub params: QuantParams,
    pub axis: GroupAxis,
    pub group_size: usize,
}

impl QuantBlock {
    pub fn dequantize(&self) -> Vec<f64> {
        dequantize(&self.codes, &self.params)
    }
}

fn check_group(group: usize) -> Result<()> {
    if group == 0 {
        return Err(Error::Argument("group size must be positive".into()));
    }
    Ok(())
}

/// Channel-grouped quantization of one head.
///
/// Blocks are ordered token-group major: block `g * head_dim + j` covers
/// channel `j` of tokens `g*G .. (g+1)*G`, codes in token order.
pub fn group_quant_per_channel(
    x: &Tensor3,
    head: usize,
    group: usize,
    bits: BitWidth,
) -> Result<Vec<QuantBlock>> {
    check_group(group)?;
    if head >= x.heads() {
        return Err(Error::Index {
            what: "head",
            index: head,
            bound: x.heads(),
        });
    }
    if !x.tokens().is_multiple_of(group) {
        return Err(Error::Argument(format!(
            "{} tokens are not divisible by group size {group}",
            x.tokens()
        )));
    }
    let d = x.head_dim();
    let mut blocks = Vec::with_capacity(x.tokens() / group * d);
    let mut column = vec![0.0; group];
    for g in 0..x.tokens() / group {
        for j in 0..d {
            for (i, c) in column.iter_mut().enumerate() {
                *c = x.get(g * group + i, head, j);
            }
            let params = quant_params(&column, bits)?;
            blocks.push(QuantBlock {
                codes: quantize(&column, &params),
                params,
                axis: GroupAxis::ChannelGrouped,
                group_size: group,
            });
        }
    }
    Ok(blocks)
}

/// Token-grouped quantization of one head: `head_dim / G` blocks per token,
/// ordered token-major.
pub fn group_quant_per_token(
    x: &Tensor3,
    head: usize,
    group: usize,
    bits: BitWidth,
) -> Result<Vec<QuantBlock>> {
    check_group(group)?;
    if head >= x.heads() {
        return Err(Error::Index {
            what: "head",
            index: head,
            bound: x.heads(),
        });
    }
    let d = x.head_dim();
    if !d.is_multiple_of(group) {
        return Err(Error::Argument(format!(
            "head dimension {d} is not divisible by group size {group}"
        )));
    }
    let mut blocks = Vec::with_capacity(x.tokens() * d / group);
    for t in 0..x.tokens() {
        for chunk in x.vector(t, head).chunks(group) {
            let params = quant_params(chunk, bits)?;
            blocks.push(QuantBlock {
                codes: quantize(chunk, &params),
                params,
                axis: GroupAxis::TokenGrouped,
                group_size: group,
            });
        }
    }
    Ok(blocks)
}

/// Reconstructs the `tokens x head_dim` values covered by channel-grouped blocks.
pub fn dequantize_per_channel(blocks: &[QuantBlock], head_dim: usize) -> Vec<Vec<f64>> {
    let mut rows = Vec::new();
    for group_blocks in blocks.chunks(head_dim) {
        let g = group_blocks.first().map_or(0, |b| b.codes.len());
        let base = rows.len();
        rows.extend((0..g).map(|_| vec![0.0; head_dim]));
        for (j, block) in group_blocks.iter().enumerate() {
            for (i, v) in block.dequantize().into_iter().enumerate() {
                rows[base + i][j] = v;
            }
        }
    }
    rows
}

/// Reconstructs token rows from token-grouped blocks.
pub fn dequantize_per_token(blocks: &[QuantBlock], head_dim: usize) -> Vec<Vec<f64>> {
    let per_token = blocks.first().map_or(1, |b| head_dim / b.group_size.max(1));
    blocks
        .chunks(per_token.max(1))
        .map(|tb| tb.iter().flat_map(|b| b.dequantize()).collect())
        .collect()
}

/// Codes packed LSB-first into little-endian 16-bit words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedWords {
    pub words: Vec<u16>,
    pub bits: u8,
    pub count: usize,
}

/// Packs `bits`-wide codes as one continuous LSB-first bit stream.
///
/// Code `i` occupies stream bits `[i*bits, (i+1)*bits)`; stream bit `n` is bit
/// `n % 16` of word `n / 16`. For 2-bit codes this puts code `i` at bits
/// `2*(i % 8) ..= 2*(i % 8) + 1` of word `i / 8`.
pub fn pack_codes(codes: &[u16], bits: BitWidth) -> Result<PackedWords> {
    let b = bits.get() as usize;
    let max = bits.max_code();
    let mut words = vec![0u16; (codes.len() * b).div_ceil(16)];
    for (i, &c) in codes.iter().enumerate() {
        if c as u32 > max {
            return Err(Error::Value(format!(
                "code {c} at position {i} does not fit in {b} bits"
            )));
        }
        let mut value = c as u32;
        let mut bit = i * b;
        let mut remaining = b;
        while remaining > 0 {
            let word = bit / 16;
            let shift = bit % 16;
            let take = remaining.min(16 - shift);
            let mask = (1u32 << take) - 1;
            words[word] |= ((value & mask) << shift) as u16;
            value >>= take;
            bit += take;
            remaining -= take;
        }
    }
    Ok(PackedWords {
        words,
        bits: bits.get(),
        count: codes.len(),
    })
}

pub fn unpack_codes(packed: &PackedWords) -> Result<Vec<u16>> {
    let bits = BitWidth::new(packed.bits)?;
    let b = bits.get() as usize;
    let needed = (packed.count * b).div_ceil(16);
    if packed.words.len() < needed {
        return Err(Error::Value(format!(
            "{} words cannot hold {} codes of {b} bits",
            packed.words.len(),
            packed.count
        )));
    }
    let mut out = Vec::with_capacity(packed.count);
    for i in 0..packed.count {
        let mut value = 0u32;
        let mut bit = i * b;
        let mut got = 0;
        while got < b {
            let word = bit / 16;
            let shift = bit % 16;
            let take = (b - got).min(16 - shift);
            let mask = (1u32 << take) - 1;
            value |= ((packed.words[word] as u32 >> shift) & mask) << got;
            bit += take;
            got += take;
        }
        out.push(value as u16);
    }
    Ok(out)
}

/// Eight 2-bit codes per word.
pub fn pack_2bit(codes: &[u16]) -> Result<PackedWords> {
    pack_codes(codes, BitWidth(2))
}

pub fn unpack_2bit(words: &[u16], count: usize) -> Result<Vec<u16>> {
    unpack_codes(&PackedWords {
        words: words.to_vec(),
        bits: 2,
        count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn b(n: u8) -> BitWidth {
        BitWidth::new(n).unwrap()
    }

    #[test]
    fn params_examples() {
        let p = quant_params(&[0.0, 1.0, 2.0, 3.0], b(2)).unwrap();
        assert_eq!(p.delta, 1.0);
        assert_eq!(p.zero_point, 0);

        let p = quant_params(&[-1.0, 1.0], b(2)).unwrap();
        assert!((p.delta - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.zero_point, 2);

        let p = quant_params(&[5.0, 5.0, 5.0], b(2)).unwrap();
        assert_eq!(p.delta, 0.0);
        assert_eq!(p.zero_point, 0);
        let codes = quantize(&[5.0, 5.0, 5.0], &p);
        assert_eq!(codes, vec![0, 0, 0]);
        assert_eq!(dequantize(&codes, &p), vec![5.0; 3]);
    }

    #[test]
    fn params_errors() {
        assert!(matches!(quant_params(&[], b(2)), Err(Error::Argument(_))));
        assert!(matches!(
            quant_params(&[1.0, f64::INFINITY], b(2)),
            Err(Error::Value(_))
        ));
        assert!(BitWidth::new(5).is_err());
    }

    #[test]
    fn exact_grid_and_rounding() {
        let v = [0.0, 1.0, 2.0, 3.0];
        let p = quant_params(&v, b(2)).unwrap();
        let codes = quantize(&v, &p);
        assert_eq!(codes, vec![0, 1, 2, 3]);
        assert_eq!(dequantize(&codes, &p), v.to_vec());

        let code = quantize_value(1.4, &p);
        assert_eq!(code, 1);
        let back = dequantize_value(code, &p);
        assert_eq!(back, 1.0);
        assert!((1.4f64 - back).abs() <= p.delta / 2.0);
    }

    #[test]
    fn ties_round_away_from_zero() {
        let p = QuantParams {
            delta: 1.0,
            zero_point: 1,
            bits: b(2),
            minimum: -1.0,
        };
        assert_eq!(quantize_value(0.5, &p), 2);
        assert_eq!(quantize_value(-0.5, &p), 0);
    }

    #[test]
    fn one_signed_groups_keep_the_half_step_bound() {
        // z = round(-40 / 26.67) = -2 would be clamped to 0 if stored in b bits.
        let v = [40.0, 55.0, 90.0, 120.0];
        let p = quant_params(&v, b(2)).unwrap();
        assert!(p.zero_point < 0);
        for (&x, y) in v.iter().zip(dequantize(&quantize(&v, &p), &p)) {
            assert!((x - y).abs() <= p.delta / 2.0 + 1e-12);
        }
    }

    #[test]
    fn channel_grouping_counts() {
        let x = Tensor3::zeros(32, 1, 4);
        assert_eq!(group_quant_per_channel(&x, 0, 32, b(2)).unwrap().len(), 4);
        let x = Tensor3::zeros(64, 1, 4);
        let blocks = group_quant_per_channel(&x, 0, 32, b(2)).unwrap();
        assert_eq!(blocks.len(), 2 * 4);
        assert!(blocks.iter().all(|bl| bl.codes.len() == 32));
        let x = Tensor3::zeros(48, 1, 4);
        assert!(matches!(
            group_quant_per_channel(&x, 0, 32, b(2)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn constant_channel_is_exact() {
        let x = Tensor3::from_fn(32, 1, 2, |t, _, j| if j == 0 { 7.25 } else { t as f64 }).unwrap();
        let blocks = group_quant_per_channel(&x, 0, 32, b(2)).unwrap();
        let rows = dequantize_per_channel(&blocks, 2);
        assert_eq!(rows.len(), 32);
        assert!(rows.iter().all(|r| r[0] == 7.25));
    }

    #[test]
    fn token_grouping_counts() {
        let x = Tensor3::zeros(3, 2, 128);
        let blocks = group_quant_per_token(&x, 1, 32, b(2)).unwrap();
        assert_eq!(blocks.len(), 3 * 4);
        let x = Tensor3::zeros(3, 1, 32);
        assert_eq!(group_quant_per_token(&x, 0, 32, b(2)).unwrap().len(), 3);
        let x = Tensor3::zeros(1, 1, 48);
        assert!(group_quant_per_token(&x, 0, 32, b(2)).is_err());
    }

    #[test]
    fn token_grid_is_lossless() {
        let vals: Vec<f64> = (0..32).map(|j| 0.25 * (j % 4) as f64).collect();
        let x = Tensor3::new(vals.clone(), 1, 1, 32).unwrap();
        let blocks = group_quant_per_token(&x, 0, 32, b(2)).unwrap();
        assert_eq!(dequantize_per_token(&blocks, 32), vec![vals]);
    }

    #[test]
    fn pack_layout() {
        let p = pack_2bit(&[0, 1, 2, 3, 0, 1, 2, 3]).unwrap();
        assert_eq!(p.words, vec![0xE4E4]);
        let p = pack_2bit(&[0; 16]).unwrap();
        assert_eq!(p.words, vec![0, 0]);
        let p = pack_2bit(&[3]).unwrap();
        assert_eq!(p.words, vec![0b11]);
        let p = pack_2bit(&[0, 0, 0, 0, 0, 0, 0, 0, 2]).unwrap();
        assert_eq!(p.words, vec![0, 0b10]);
        assert!(matches!(pack_2bit(&[4]), Err(Error::Value(_))));
    }

    #[test]
    fn pack_round_trip_random() {
        let mut rng = SeededRng::new(9);
        let codes: Vec<u16> = (0..1000).map(|_| rng.below(4) as u16).collect();
        let p = pack_2bit(&codes).unwrap();
        assert_eq!(p.words.len(), 125);
        assert_eq!(unpack_2bit(&p.words, codes.len()).unwrap(), codes);

        for bits in [3u8, 4, 8, 16] {
            let w = b(bits);
            let codes: Vec<u16> = (0..333)
                .map(|_| (rng.next_u64() as u32 & w.max_code()) as u16)
                .collect();
            let p = pack_codes(&codes, w).unwrap();
            assert_eq!(p.words.len(), (333 * bits as usize).div_ceil(16));
            assert_eq!(unpack_codes(&p).unwrap(), codes);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn reconstruction_within_half_step(
                lo in -50.0f64..50.0,
                width in 1e-3f64..100.0,
                fracs in proptest::collection::vec(0.0f64..=1.0, 1..64),
                bits in prop::sample::select(vec![2u8, 3, 4, 8, 16]),
            ) {
                let mut vals: Vec<f64> = fracs.iter().map(|f| lo + f * width).collect();
                vals.push(lo);
                vals.push(lo + width);
                let p = quant_params(&vals, b(bits)).unwrap();
                for &x in &vals {
                    let y = dequantize_value(quantize_value(x, &p), &p);
                    prop_assert!((x - y).abs() <= p.delta / 2.0 + 1e-12 * (1.0 + x.abs()));
                }
            }

            #[test]
            fn quantize_is_monotone(
                vals in proptest::collection::vec(-10.0f64..10.0, 2..40),
                bits in prop::sample::select(vec![2u8, 3, 4, 8]),
            ) {
                let p = quant_params(&vals, b(bits)).unwrap();
                let mut sorted = vals.clone();
                sorted.sort_by(f64::total_cmp);
                let codes = quantize(&sorted, &p);
                prop_assert!(codes.windows(2).all(|w| w[0] <= w[1]));
            }

            #[test]
            fn integer_step_grid_is_lossless(
                step in 1e-3f64..10.0,
                ks in proptest::collection::vec(-40i64..40, 1..32),
                bits in prop::sample::select(vec![2u8, 3, 4, 8, 16]),
            ) {
                // values k*step with max - min = (2^b - 1) * step
                let w = b(bits);
                let k0 = ks[0];
                let mut vals: Vec<f64> = ks
                    .iter()
                    .map(|k| (k0 + k.rem_euclid(w.max_code() as i64 + 1)) as f64 * step)
                    .collect();
                vals.push(k0 as f64 * step);
                vals.push((k0 + w.max_code() as i64) as f64 * step);
                let p = quant_params(&vals, w).unwrap();
                for &x in &vals {
                    let y = dequantize_value(quantize_value(x, &p), &p);
                    prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
                }
            }

            #[test]
            fn pack_is_a_bijection(
                codes in proptest::collection::vec(0u16..4, 0..2048),
            ) {
                let p = pack_2bit(&codes).unwrap();
                prop_assert_eq!(p.words.len(), codes.len().div_ceil(8));
                prop_assert_eq!(unpack_2bit(&p.words, codes.len()).unwrap(), codes);
            }
        }
    }
}
