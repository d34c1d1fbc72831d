//! Token-norm statistics, the per-channel MSE bound, the outlier-token error
//! study and the scaling-artifact demonstration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::ScalingStrategy;
use crate::error::{Error, Result};
use crate::pipeline::omni_token_scale;
use crate::quant::{dequantize_value, quant_params, quantize_value, BitWidth};
use crate::tensor::{l2_norm, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StateTag {
    Query,
    Key,
    Value,
}

impl StateTag {
    pub fn short(self) -> &'static str {
        match self {
            StateTag::Query => "q",
            StateTag::Key => "k",
            StateTag::Value => "v",
        }
    }
}

impl FromStr for StateTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "q" | "query" => Ok(StateTag::Query),
            "k" | "key" => Ok(StateTag::Key),
            "v" | "value" => Ok(StateTag::Value),
            _ => Err(Error::Argument(format!(
                "unknown state '{s}', expected q, k or v"
            ))),
        }
    }
}

/// Summary of the head-wise norms of one token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenNormStats {
    pub token: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TniProfile {
    pub state: StateTag,
    pub rows: Vec<TokenNormStats>,
}

impl TniProfile {
    pub const CSV_HEADER: &'static str = "token,state,min,median,max,mean";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.token,
                self.state.short(),
                r.min,
                r.median,
                r.max,
                r.mean
            ));
        }
        out
    }

    /// Token indices of the `k` smallest per-token maximum norms, ascending by index.
    pub fn bottom_k(&self, k: usize) -> Vec<usize> {
        let mut order: Vec<&TokenNormStats> = self.rows.iter().collect();
        order.sort_by(|a, b| a.max.total_cmp(&b.max).then(a.token.cmp(&b.token)));
        let mut picked: Vec<usize> = order.iter().take(k).map(|r| r.token).collect();
        picked.sort_unstable();
        picked
    }
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-token min/median/max/mean of the `H` head norms. Even `H` takes the
/// midpoint of the two central norms as the median.
pub fn tni_profile(x: &Tensor3, state: StateTag) -> TniProfile {
    let rows = (0..x.tokens())
        .map(|t| {
            let mut norms: Vec<f64> = (0..x.heads()).map(|h| l2_norm(x.vector(t, h))).collect();
            norms.sort_by(f64::total_cmp);
            let n = norms.len().max(1) as f64;
            TokenNormStats {
                token: t,
                min: norms.first().copied().unwrap_or(0.0),
                median: if norms.is_empty() {
                    0.0
                } else {
                    median_sorted(&norms)
                },
                max: norms.last().copied().unwrap_or(0.0),
                mean: norms.iter().sum::<f64>() / n,
            }
        })
        .collect();
    TniProfile { state, rows }
}

fn levels_sq(bits: BitWidth) -> f64 {
    let l = bits.levels();
    12.0 * l * l
}

/// Pairwise bound `(|k_m| - |k_n|)^2 / (12 (2^b - 1)^2)` for the largest and
/// smallest norm rows of a block.
pub fn mse_lower_bound(block: &[Vec<f64>], bits: BitWidth) -> Result<f64> {
    if block.is_empty() {
        return Err(Error::Argument("block is empty".into()));
    }
    let norms: Vec<f64> = block.iter().map(|r| l2_norm(r)).collect();
    let max = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = norms.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((max - min).powi(2) / levels_sq(bits))
}

/// `|k_m - k_n|^2 / (12 (2^b - 1)^2)`, the intermediate form of the bound.
pub fn pairwise_bound(block: &[Vec<f64>], bits: BitWidth) -> Result<f64> {
    if block.is_empty() {
        return Err(Error::Argument("block is empty".into()));
    }
    let norms: Vec<f64> = block.iter().map(|r| l2_norm(r)).collect();
    let m = (0..norms.len())
        .max_by(|&a, &b| norms[a].total_cmp(&norms[b]))
        .unwrap();
    let n = (0..norms.len())
        .min_by(|&a, &b| norms[a].total_cmp(&norms[b]))
        .unwrap();
    let diff: f64 = block[m]
        .iter()
        .zip(&block[n])
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok(diff / levels_sq(bits))
}

fn check_block(block: &[Vec<f64>]) -> Result<usize> {
    let d = block
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Argument("block is empty".into()))?;
    if block.iter().any(|r| r.len() != d) {
        return Err(Error::Dimension("block rows differ in length".into()));
    }
    Ok(d)
}

/// Realized per-token reconstruction error of per-channel RTN over the whole
/// block: `sum_j mean_t (k_tj - khat_tj)^2`.
pub fn block_rtn_mse(block: &[Vec<f64>], bits: BitWidth) -> Result<f64> {
    let d = check_block(block)?;
    let mut total = 0.0;
    for j in 0..d {
        let col: Vec<f64> = block.iter().map(|r| r[j]).collect();
        let p = quant_params(&col, bits)?;
        total += col
            .iter()
            .map(|&x| (x - dequantize_value(quantize_value(x, &p), &p)).powi(2))
            .sum::<f64>();
    }
    Ok(total / block.len() as f64)
}

/// Uniform-error model of the same quantity: `sum_j delta_j^2 / 12` with the
/// quantizer's own per-channel step.
pub fn block_model_mse(block: &[Vec<f64>], bits: BitWidth) -> Result<f64> {
    let d = check_block(block)?;
    let mut total = 0.0;
    for j in 0..d {
        let col: Vec<f64> = block.iter().map(|r| r[j]).collect();
        total += quant_params(&col, bits)?.delta.powi(2) / 12.0;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    /// Keys, groups of `G` tokens within a channel.
    PerChannelK,
    /// Values, groups of `G` channels within a token.
    PerTokenV,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::PerChannelK => "per-channel-k",
            Scheme::PerTokenV => "per-token-v",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    WithOutliers,
    WithoutOutliers,
    MixedModality,
    SingleModality,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::WithOutliers => "with-outliers",
            Condition::WithoutOutliers => "without-outliers",
            Condition::MixedModality => "mixed-modality",
            Condition::SingleModality => "single-modality",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Inputs of [`error_study`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySpec {
    pub bits: Vec<BitWidth>,
    pub group_size: usize,
    pub outlier_tokens: Vec<usize>,
    /// `[start, end)` token ranges; fewer than two disables the modality rows.
    pub modality_blocks: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCell {
    pub bits: u8,
    pub scheme: Scheme,
    pub condition: Condition,
    /// `all` or `modality-<i>`.
    pub subset: String,
    pub mse_x100: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub cells: Vec<ErrorCell>,
}

impl ErrorReport {
    pub const CSV_HEADER: &'static str = "bits,scheme,condition,subset,mse_x100";

    pub fn get(&self, bits: u8, scheme: Scheme, condition: Condition, subset: &str) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| {
                c.bits == bits
                    && c.scheme == scheme
                    && c.condition == condition
                    && c.subset == subset
            })
            .map(|c| c.mse_x100)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c.bits,
                c.scheme.name(),
                c.condition.name(),
                c.subset,
                c.mse_x100
            ));
        }
        out
    }
}

/// Squared error per token (summed over heads and channels) of per-channel
/// RTN, with groups formed as consecutive runs of `G` entries of `order`.
/// The last run may be shorter.
fn per_channel_errors(x: &Tensor3, order: &[usize], g: usize, bits: BitWidth) -> Result<Vec<f64>> {
    let mut err = vec![0.0; x.tokens()];
    let mut col = Vec::with_capacity(g);
    for chunk in order.chunks(g) {
        for h in 0..x.heads() {
            for j in 0..x.head_dim() {
                col.clear();
                col.extend(chunk.iter().map(|&t| x.get(t, h, j)));
                let p = quant_params(&col, bits)?;
                for (&t, &v) in chunk.iter().zip(&col) {
                    err[t] += (v - dequantize_value(quantize_value(v, &p), &p)).powi(2);
                }
            }
        }
    }
    Ok(err)
}

/// Like [`per_channel_errors`] but the `excluded` tokens are removed from
/// each group after the groups are formed, so the other tokens keep their
/// group mates.
fn per_channel_errors_within(
    x: &Tensor3,
    order: &[usize],
    g: usize,
    excluded: &[usize],
    bits: BitWidth,
) -> Result<Vec<f64>> {
    let mut err = vec![0.0; x.tokens()];
    for chunk in order.chunks(g) {
        let members: Vec<usize> = chunk
            .iter()
            .copied()
            .filter(|t| !excluded.contains(t))
            .collect();
        if members.is_empty() {
            continue;
        }
        let part = per_channel_errors(x, &members, members.len(), bits)?;
        for t in members {
            err[t] = part[t];
        }
    }
    Ok(err)
}

fn per_token_errors(x: &Tensor3, g: usize, bits: BitWidth) -> Result<Vec<f64>> {
    let mut err = vec![0.0; x.tokens()];
    for (t, e) in err.iter_mut().enumerate() {
        for chunk in x.token_row(t).chunks(g) {
            let p = quant_params(chunk, bits)?;
            *e += chunk
                .iter()
                .map(|&v| (v - dequantize_value(quantize_value(v, &p), &p)).powi(2))
                .sum::<f64>();
        }
    }
    Ok(err)
}

fn mean_over(err: &[f64], tokens: &[usize], width: usize) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    tokens.iter().map(|&t| err[t]).sum::<f64>() / (tokens.len() * width) as f64
}

/// Tokens visited round-robin across blocks, one from each block in turn.
fn interleave(blocks: &[[usize; 2]]) -> Vec<usize> {
    let mut cursors: Vec<usize> = blocks.iter().map(|b| b[0]).collect();
    let mut out = Vec::new();
    loop {
        let mut progressed = false;
        for (b, c) in blocks.iter().zip(cursors.iter_mut()) {
            if *c < b[1] {
                out.push(*c);
                *c += 1;
                progressed = true;
            }
        }
        if !progressed {
            return out;
        }
    }
}

/// RTN reconstruction error, scaled by 100, of per-channel keys and
/// per-token values under four grouping conditions.
///
/// - `with-outliers`: all tokens, consecutive groups of `G`.
/// - `without-outliers`: the same groups with the outlier tokens taken out,
///   so a group holding `k` of them shrinks to `G - k` tokens.
/// - `single-modality`: groups never cross a modality block.
/// - `mixed-modality`: tokens are interleaved round-robin across blocks
///   before grouping, so every group mixes modalities.
///
/// MSE is the mean squared error per element over the covered tokens. The
/// modality rows carry one `modality-<i>` subset per block plus `all`.
pub fn error_study(keys: &Tensor3, values: &Tensor3, spec: &StudySpec) -> Result<ErrorReport> {
    let g = spec.group_size;
    let s = keys.tokens();
    if g == 0 {
        return Err(Error::Argument("group size must be positive".into()));
    }
    if values.tokens() != s {
        return Err(Error::Dimension(format!(
            "keys have {s} tokens, values {}",
            values.tokens()
        )));
    }
    if s == 0 || !s.is_multiple_of(g) {
        return Err(Error::Argument(format!(
            "{s} tokens are not divisible by G={g}"
        )));
    }
    if !values.head_dim().is_multiple_of(g) {
        return Err(Error::Argument(format!(
            "value head_dim {} is not divisible by G={g}",
            values.head_dim()
        )));
    }
    if let Some(&t) = spec.outlier_tokens.iter().find(|&&t| t >= s) {
        return Err(Error::Index {
            what: "outlier token",
            index: t,
            bound: s,
        });
    }
    for b in &spec.modality_blocks {
        if b[0] >= b[1] || b[1] > s {
            return Err(Error::Argument(format!(
                "modality block [{}, {}) out of range",
                b[0], b[1]
            )));
        }
        if (b[1] - b[0]) % g != 0 {
            return Err(Error::Argument(format!(
                "modality block [{}, {}) is not divisible by G={g}",
                b[0], b[1]
            )));
        }
    }
    let modal = spec.modality_blocks.len() >= 2;
    let covered: Vec<usize> = spec
        .modality_blocks
        .iter()
        .flat_map(|b| b[0]..b[1])
        .collect();
    if modal {
        let mut sorted = covered.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != covered.len() {
            return Err(Error::Argument("modality blocks overlap".into()));
        }
    }

    let all: Vec<usize> = (0..s).collect();
    let kept: Vec<usize> = all
        .iter()
        .copied()
        .filter(|t| !spec.outlier_tokens.contains(t))
        .collect();
    let kw = keys.heads() * keys.head_dim();
    let vw = values.heads() * values.head_dim();

    let mut cells = Vec::new();
    let mut push = |bits: BitWidth, scheme, condition, subset: String, mse: f64| {
        cells.push(ErrorCell {
            bits: bits.get(),
            scheme,
            condition,
            subset,
            mse_x100: 100.0 * mse,
        })
    };
    for &bits in &spec.bits {
        let k_with = per_channel_errors(keys, &all, g, bits)?;
        let k_without = per_channel_errors_within(keys, &all, g, &spec.outlier_tokens, bits)?;
        let v_err = per_token_errors(values, g, bits)?;
        use Condition::*;
        use Scheme::*;
        push(
            bits,
            PerChannelK,
            WithOutliers,
            "all".into(),
            mean_over(&k_with, &all, kw),
        );
        push(
            bits,
            PerChannelK,
            WithoutOutliers,
            "all".into(),
            mean_over(&k_without, &kept, kw),
        );
        push(
            bits,
            PerTokenV,
            WithOutliers,
            "all".into(),
            mean_over(&v_err, &all, vw),
        );
        push(
            bits,
            PerTokenV,
            WithoutOutliers,
            "all".into(),
            mean_over(&v_err, &kept, vw),
        );
        if modal {
            let single_order: Vec<usize> = covered.clone();
            let mixed_order = interleave(&spec.modality_blocks);
            let k_single = per_channel_errors(keys, &single_order, g, bits)?;
            let k_mixed = per_channel_errors(keys, &mixed_order, g, bits)?;
            for (cond, k_err) in [(SingleModality, &k_single), (MixedModality, &k_mixed)] {
                push(
                    bits,
                    PerChannelK,
                    cond,
                    "all".into(),
                    mean_over(k_err, &covered, kw),
                );
                push(
                    bits,
                    PerTokenV,
                    cond,
                    "all".into(),
                    mean_over(&v_err, &covered, vw),
                );
                for (i, b) in spec.modality_blocks.iter().enumerate() {
                    let toks: Vec<usize> = (b[0]..b[1]).collect();
                    push(
                        bits,
                        PerChannelK,
                        cond,
                        format!("modality-{i}"),
                        mean_over(k_err, &toks, kw),
                    );
                    push(
                        bits,
                        PerTokenV,
                        cond,
                        format!("modality-{i}"),
                        mean_over(&v_err, &toks, vw),
                    );
                }
            }
        }
    }
    Ok(ErrorReport { cells })
}

/// The two-token failure case of scaling before rotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactDemo {
    pub bits: u8,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub norm_a: f64,
    pub norm_b: f64,
    /// Scale applied to `a`.
    pub beta: f64,
    /// Scale applied to `b`.
    pub alpha: f64,
    pub a_scaled: Vec<f64>,
    pub b_scaled: Vec<f64>,
    /// Per-channel range (max magnitude) of `a'` alone.
    pub range_a: Vec<f64>,
    /// Per-channel range of `a'` and `b'` together.
    pub range_joint: Vec<f64>,
    /// `range_joint / range_a`, equal to the growth of the quantization step.
    pub step_inflation: Vec<f64>,
    /// `alpha * c` with `c` the common entry of `b`.
    pub condition_lhs: f64,
    /// `beta * max_{j != d} a_j`.
    pub condition_rhs: f64,
}

impl ArtifactDemo {
    /// The condition holds when the left side exceeds the right by at least 10x.
    pub fn condition_holds(&self) -> bool {
        self.condition_lhs >= 10.0 * self.condition_rhs
    }

    pub fn render(&self) -> String {
        let v = |x: &[f64]| {
            x.iter()
                .map(|e| format!("{e:.4}"))
                .collect::<Vec<_>>()
                .join(", ")
        };
        let mut out = String::new();
        out.push_str(&format!("a        = [{}]\n", v(&self.a)));
        out.push_str(&format!("b        = [{}]\n", v(&self.b)));
        out.push_str(&format!("|a|      = {:.3}\n", self.norm_a));
        out.push_str(&format!("|b|      = {:.3}\n", self.norm_b));
        out.push_str(&format!("beta     = {:.6}\n", self.beta));
        out.push_str(&format!("alpha    = {:.6}\n", self.alpha));
        out.push_str(&format!("a'       = [{}]\n", v(&self.a_scaled)));
        out.push_str(&format!("b'       = [{}]\n", v(&self.b_scaled)));
        out.push_str(&format!("range a' = [{}]\n", v(&self.range_a)));
        out.push_str(&format!("range a'+b' = [{}]\n", v(&self.range_joint)));
        out.push_str(&format!(
            "step inflation ({}-bit) = [{}]\n",
            self.bits,
            v(&self.step_inflation)
        ));
        out.push_str(&format!(
            "alpha*c = {:.4} vs beta*max a_j = {:.4}: {}\n",
            self.condition_lhs,
            self.condition_rhs,
            if self.condition_holds() {
                "artifact"
            } else {
                "no artifact"
            }
        ));
        out
    }
}

/// Scales `a = [1, 1, 1, 100]` and `b = [0.1; 4]` to unit norm and measures
/// how `b'` stretches the per-channel ranges of the small channels.
pub fn artifact_demo() -> ArtifactDemo {
    let a = vec![1.0, 1.0, 1.0, 100.0];
    let b = vec![0.1; 4];
    let x = Tensor3::new([a.clone(), b.clone()].concat(), 2, 1, 4).expect("finite demo data");
    let scaled = omni_token_scale(&x, ScalingStrategy::L2);
    let (norm_a, norm_b) = (scaled.norms[0], scaled.norms[1]);
    let a_scaled = scaled.scaled.vector(0, 0).to_vec();
    let b_scaled = scaled.scaled.vector(1, 0).to_vec();
    let range_a: Vec<f64> = a_scaled.iter().map(|v| v.abs()).collect();
    let range_joint: Vec<f64> = a_scaled
        .iter()
        .zip(&b_scaled)
        .map(|(x, y)| x.abs().max(y.abs()))
        .collect();
    let step_inflation = range_joint
        .iter()
        .zip(&range_a)
        .map(|(j, a)| j / a)
        .collect();
    let beta = 1.0 / norm_a;
    let alpha = 1.0 / norm_b;
    let small_max = a[..a.len() - 1]
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    ArtifactDemo {
        bits: 2,
        condition_lhs: alpha * b[0],
        condition_rhs: beta * small_max,
        a,
        b,
        norm_a,
        norm_b,
        beta,
        alpha,
        a_scaled,
        b_scaled,
        range_a,
        range_joint,
        step_inflation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, TniSpec};
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn bw(b: u8) -> BitWidth {
        BitWidth::new(b).unwrap()
    }

    #[test]
    fn single_head_profile() {
        let x = Tensor3::new(vec![3.0, 4.0, 0.0, 1.0], 2, 1, 2).unwrap();
        let p = tni_profile(&x, StateTag::Key);
        assert_eq!(p.rows[0].min, 5.0);
        assert_eq!(p.rows[0].median, 5.0);
        assert_eq!(p.rows[0].max, 5.0);
        assert_eq!(p.rows[1].mean, 1.0);
    }

    #[test]
    fn even_head_median() {
        let x = Tensor3::new(vec![1.0, 2.0, 3.0, 10.0], 1, 4, 1).unwrap();
        let r = tni_profile(&x, StateTag::Query).rows[0];
        assert_eq!((r.min, r.median, r.max, r.mean), (1.0, 2.5, 10.0, 4.0));
    }

    #[test]
    fn identical_tokens_identical_rows() {
        let row: Vec<f64> = (0..12).map(|i| i as f64 - 5.0).collect();
        let x = Tensor3::new(row.repeat(4), 4, 3, 4).unwrap();
        let p = tni_profile(&x, StateTag::Value);
        for r in &p.rows[1..] {
            assert_eq!(
                (r.min, r.median, r.max, r.mean),
                (
                    p.rows[0].min,
                    p.rows[0].median,
                    p.rows[0].max,
                    p.rows[0].mean
                )
            );
        }
    }

    #[test]
    fn sink_row_is_far_below_median() {
        let spec = TniSpec {
            sink_tokens: vec![7],
            ..TniSpec::plain(64, 4, 32, 2)
        };
        let (x, _) = generate(&spec).unwrap();
        let p = tni_profile(&x, StateTag::Key);
        let mut mins: Vec<f64> = p.rows.iter().map(|r| r.min).collect();
        mins.sort_by(f64::total_cmp);
        assert!(p.rows[7].max < 0.05 * mins[mins.len() / 2]);
    }

    #[test]
    fn sinks_are_bottom_k() {
        let mut hits = 0;
        for seed in 0..40 {
            let spec = TniSpec::key_pattern(256, 4, 64, seed);
            let (x, ann) = generate(&spec).unwrap();
            let p = tni_profile(&x, StateTag::Key);
            if p.bottom_k(ann.outlier_tokens.len()) == ann.outlier_tokens {
                hits += 1;
            }
        }
        assert!(hits >= 38, "{hits}/40");
    }

    #[test]
    fn profile_csv_header() {
        let x = Tensor3::zeros(2, 1, 2);
        let csv = tni_profile(&x, StateTag::Key).to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(TniProfile::CSV_HEADER));
        assert_eq!(lines.next(), Some("0,k,0,0,0,0"));
    }

    #[test]
    fn bound_examples() {
        let equal = vec![vec![3.0, 4.0], vec![0.0, 5.0], vec![5.0, 0.0]];
        assert_eq!(mse_lower_bound(&equal, bw(2)).unwrap(), 0.0);
        let pair = vec![vec![3.0, 4.0], vec![1.0, 0.0]];
        let b = mse_lower_bound(&pair, bw(2)).unwrap();
        assert!((b - 16.0 / 108.0).abs() < 1e-15);
        assert!(mse_lower_bound(&[], bw(2)).is_err());
    }

    #[test]
    fn model_mse_matches_pairwise_form_on_two_tokens() {
        let pair = vec![vec![3.0, -4.0, 0.5], vec![1.0, 2.0, 0.25]];
        let model = block_model_mse(&pair, bw(3)).unwrap();
        let pairwise = pairwise_bound(&pair, bw(3)).unwrap();
        assert!((model - pairwise).abs() < 1e-12);
    }

    #[test]
    fn realized_mse_tracks_model_on_uniform_blocks() {
        let mut rng = SeededRng::new(17);
        let block: Vec<Vec<f64>> = (0..20_000)
            .map(|_| vec![rng.uniform(), rng.uniform()])
            .collect();
        let realized = block_rtn_mse(&block, bw(4)).unwrap();
        let model = block_model_mse(&block, bw(4)).unwrap();
        assert!(
            (realized / model - 1.0).abs() < 0.05,
            "{realized} vs {model}"
        );
    }

    proptest! {
        #[test]
        fn bound_below_pairwise(
            a in prop::collection::vec(-10.0f64..10.0, 8),
            b in prop::collection::vec(-10.0f64..10.0, 8),
            bits in prop::sample::select(vec![2u8, 3, 4, 8]),
        ) {
            let block = vec![a, b];
            let lo = mse_lower_bound(&block, bw(bits)).unwrap();
            let mid = pairwise_bound(&block, bw(bits)).unwrap();
            prop_assert!(lo <= mid + 1e-12);
        }

        #[test]
        fn profile_invariant_under_permutations(seed in 0u64..1000) {
            let mut rng = SeededRng::new(seed);
            let x = Tensor3::from_fn(6, 4, 8, |_, _, _| rng.normal()).unwrap();
            let mut heads: Vec<usize> = (0..4).collect();
            let mut chans: Vec<usize> = (0..8).collect();
            rng.shuffle(&mut heads);
            rng.shuffle(&mut chans);
            let y = Tensor3::from_fn(6, 4, 8, |t, h, j| x.get(t, heads[h], chans[j])).unwrap();
            let p = tni_profile(&x, StateTag::Key);
            let q = tni_profile(&y, StateTag::Key);
            for (r, s) in p.rows.iter().zip(&q.rows) {
                prop_assert!((r.min - s.min).abs() < 1e-12);
                prop_assert!((r.median - s.median).abs() < 1e-12);
                prop_assert!((r.max - s.max).abs() < 1e-12);
                prop_assert!((r.mean - s.mean).abs() < 1e-12);
                prop_assert!(r.min <= r.median && r.median <= r.max && r.min >= 0.0);
            }
        }
    }

    fn study(bits: &[u8], outliers: Vec<usize>, blocks: Vec<[usize; 2]>) -> StudySpec {
        StudySpec {
            bits: bits.iter().map(|&b| bw(b)).collect(),
            group_size: 32,
            outlier_tokens: outliers,
            modality_blocks: blocks,
        }
    }

    #[test]
    fn no_outliers_means_identical_columns() {
        let (k, _) = generate(&TniSpec::plain(128, 2, 64, 1)).unwrap();
        let (v, _) = generate(&TniSpec::plain(128, 2, 64, 2)).unwrap();
        let r = error_study(&k, &v, &study(&[2, 3, 4], vec![], vec![])).unwrap();
        for b in [2, 3, 4] {
            for s in [Scheme::PerChannelK, Scheme::PerTokenV] {
                let w = r.get(b, s, Condition::WithOutliers, "all").unwrap();
                let wo = r.get(b, s, Condition::WithoutOutliers, "all").unwrap();
                assert_eq!(w, wo);
                assert!(w > 0.0);
            }
        }
        assert_eq!(r.cells.len(), 12);
    }

    #[test]
    fn sixteen_bit_on_grid_is_lossless() {
        let mut rng = SeededRng::new(3);
        let mut grid = || rng.below(65536) as f64 / 65535.0;
        let mut k = Tensor3::from_fn(64, 1, 32, |_, _, _| grid()).unwrap();
        let mut v = Tensor3::from_fn(64, 1, 32, |_, _, _| grid()).unwrap();
        for j in 0..32 {
            for (t, e) in [(0, 0.0), (1, 1.0), (32, 0.0), (33, 1.0)] {
                k.set(t, 0, j, e);
            }
        }
        for t in 0..64 {
            v.set(t, 0, 0, 0.0);
            v.set(t, 0, 1, 1.0);
        }
        let r = error_study(&k, &v, &study(&[16], vec![], vec![])).unwrap();
        for c in &r.cells {
            assert!(c.mse_x100 / 100.0 <= 1e-20, "{c:?}");
        }
    }

    #[test]
    fn sixteen_bit_off_grid_is_tiny() {
        let mut rng = SeededRng::new(4);
        let k = Tensor3::from_fn(64, 1, 32, |_, _, _| rng.uniform()).unwrap();
        let r = error_study(&k, &k, &study(&[16], vec![], vec![])).unwrap();
        let delta = 1.0 / 65535.0;
        for c in &r.cells {
            assert!(c.mse_x100 / 100.0 < delta * delta / 12.0 * 1.5);
        }
    }

    #[test]
    fn per_token_values_ignore_modality_grouping() {
        let (k, ann) = generate(&TniSpec::key_pattern(128, 2, 64, 5)).unwrap();
        let r = error_study(&k, &k, &study(&[2], vec![], ann.modality_blocks.clone())).unwrap();
        for subset in ["all", "modality-0", "modality-1"] {
            assert_eq!(
                r.get(2, Scheme::PerTokenV, Condition::MixedModality, subset),
                r.get(2, Scheme::PerTokenV, Condition::SingleModality, subset)
            );
        }
    }

    #[test]
    fn study_rejects_bad_layouts() {
        let k = Tensor3::zeros(100, 1, 32);
        assert!(matches!(
            error_study(&k, &k, &study(&[2], vec![], vec![])),
            Err(Error::Argument(_))
        ));
        let k = Tensor3::zeros(128, 1, 32);
        assert!(error_study(&k, &k, &study(&[2], vec![], vec![[0, 48], [48, 128]])).is_err());
        assert!(error_study(&k, &k, &study(&[2], vec![128], vec![])).is_err());
    }

    #[test]
    fn interleave_round_robin() {
        assert_eq!(interleave(&[[0, 3], [3, 5]]), vec![0, 3, 1, 4, 2]);
    }

    #[test]
    fn artifact_numbers() {
        let d = artifact_demo();
        assert_eq!(d.alpha, 5.0);
        assert_eq!(d.b_scaled, vec![0.5; 4]);
        assert!((d.norm_a - 100.015).abs() < 1e-3);
        assert!((d.beta - 0.01).abs() < 1e-4);
        for (x, want) in d.a_scaled.iter().zip([0.01, 0.01, 0.01, 1.0]) {
            assert!((x - want).abs() < 1e-3);
        }
        for j in 0..3 {
            assert!(d.step_inflation[j] >= 50.0);
        }
        assert!(d.condition_holds());
    }
}
