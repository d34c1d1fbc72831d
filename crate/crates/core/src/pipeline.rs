//! Single-layer attention with a quantized KV cache.
//!
//! Per step, for hidden states `X`:
//!
//! 1. `Q = X W_Q`, `K = X W_K`, `V = X W_V` (for `oscar`, `W_V` and `W_O`
//!    carry a folded per-head Hadamard rotation),
//! 2. methods that rotate apply the FHT to every query and key head vector,
//! 3. methods that scale divide each key head vector by its scale,
//! 4. attention runs over the dequantized history (rows multiplied back by
//!    their scales), the residual window and the current tokens,
//! 5. the current keys, scales and values are handed to the cache.
//!
//! Because the rotation is orthonormal and applied to both sides, and the
//! scales are restored before the logits, every method computes the
//! full-precision attention exactly when quantization is switched off.

use crate::cache::KvCache;
use crate::config::{PipelineConfig, ScalingStrategy};
use crate::error::{Error, Result};
use crate::hadamard::{fht_tensor, hadamard_matrix, HadamardSize};
use crate::tensor::{dot, matmul, Matrix, Tensor3};

/// Substitute scale for all-zero key vectors.
pub const ZERO_SCALE: f64 = 1e-12;

/// Projection weights of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelStub {
    /// `d_model x (heads * head_dim)`
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    /// `(heads * head_dim) x d_out`
    pub w_o: Matrix,
    pub heads: usize,
    pub head_dim: usize,
    preprocessed: bool,
}

impl ModelStub {
    pub fn new(
        w_q: Matrix,
        w_k: Matrix,
        w_v: Matrix,
        w_o: Matrix,
        heads: usize,
        head_dim: usize,
    ) -> Result<Self> {
        let width = heads * head_dim;
        let d_model = w_q.rows();
        for (name, w) in [("W_Q", &w_q), ("W_K", &w_k), ("W_V", &w_v)] {
            if w.rows() != d_model || w.cols() != width {
                return Err(Error::Dimension(format!(
                    "{name} is {}x{}, expected {d_model}x{width}",
                    w.rows(),
                    w.cols()
                )));
            }
        }
        if w_o.rows() != width {
            return Err(Error::Dimension(format!(
                "W_O has {} rows, expected {width}",
                w_o.rows()
            )));
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            heads,
            head_dim,
            preprocessed: false,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w_o.cols()
    }

    pub fn is_preprocessed(&self) -> bool {
        self.preprocessed
    }
}

/// `I_heads (x) H_norm`, the per-head rotation as one dense matrix.
fn block_hadamard(heads: usize, head_dim: usize) -> Result<Matrix> {
    let h = hadamard_matrix(HadamardSize::new(head_dim)?);
    let n = heads * head_dim;
    let mut m = Matrix::zeros(n, n);
    for b in 0..heads {
        for i in 0..head_dim {
            for j in 0..head_dim {
                m.set(b * head_dim + i, b * head_dim + j, h.get(i, j));
            }
        }
    }
    Ok(m)
}

/// Folds the per-head rotation into the value and output projections:
/// `W_V <- W_V (I (x) H)`, `W_O <- (I (x) H) W_O`.
pub fn preprocess(model: &ModelStub) -> Result<ModelStub> {
    if model.preprocessed {
        return Err(Error::State("model is already preprocessed".into()));
    }
    let rot = block_hadamard(model.heads, model.head_dim)?;
    Ok(ModelStub {
        w_v: matmul(&model.w_v, &rot)?,
        w_o: matmul(&rot, &model.w_o)?,
        preprocessed: true,
        ..model.clone()
    })
}

/// Keys divided by their per-`(token, head)` scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledKeys {
    pub scaled: Tensor3,
    /// Token-major, one entry per `(token, head)`.
    pub norms: Vec<f64>,
    /// `(token, head)` pairs whose vector was all zeros.
    pub degenerate: Vec<(usize, usize)>,
}

/// Reciprocal square root from a 12-bit estimate refined by one Newton step.
///
/// The estimate keeps the top 12 mantissa bits of `1/sqrt(x)`, matching the
/// accuracy of hardware `rsqrt` instructions (relative error below `2^-12`).
/// One Newton-Raphson step `y (3 - x y^2) / 2` squares the error, leaving it
/// below `1e-7`.
pub fn approx_rsqrt(x: f64) -> f64 {
    let exact = 1.0 / x.sqrt();
    let estimate = f64::from_bits(exact.to_bits() & !((1u64 << 40) - 1));
    estimate * (1.5 - 0.5 * x * estimate * estimate)
}

/// Token-wise key scaling under the chosen strategy.
pub fn omni_token_scale(k: &Tensor3, strategy: ScalingStrategy) -> ScaledKeys {
    let mut scaled = k.clone();
    let mut norms = Vec::with_capacity(k.tokens() * k.heads());
    let mut degenerate = Vec::new();
    let d = k.head_dim() as f64;
    for t in 0..k.tokens() {
        for h in 0..k.heads() {
            let v = scaled.vector_mut(t, h);
            let sum_sq: f64 = v.iter().map(|x| x * x).sum();
            if sum_sq == 0.0 {
                degenerate.push((t, h));
                norms.push(ZERO_SCALE);
                continue;
            }
            match strategy {
                ScalingStrategy::Rsqrt => {
                    let inv = approx_rsqrt(sum_sq);
                    v.iter_mut().for_each(|x| *x *= inv);
                    norms.push(1.0 / inv);
                }
                other => {
                    let s = match other {
                        ScalingStrategy::L2 => sum_sq.sqrt(),
                        ScalingStrategy::Max => v.iter().fold(0.0, |m, x| f64::max(m, x.abs())),
                        ScalingStrategy::MeanAbs => v.iter().map(|x| x.abs()).sum::<f64>() / d,
                        ScalingStrategy::Rsqrt => unreachable!(),
                    };
                    v.iter_mut().for_each(|x| *x /= s);
                    norms.push(s);
                }
            }
        }
    }
    ScaledKeys {
        scaled,
        norms,
        degenerate,
    }
}

/// Per-head softmax attention with `1/sqrt(head_dim)` temperature.
///
/// Query `i` sits at absolute position `first_pos + i` and attends to keys
/// `0..=first_pos + i`. Returns the outputs and, per query and head, the
/// pre-softmax logits.
pub fn attention_with_logits(
    q: &Tensor3,
    k: &Tensor3,
    v: &Tensor3,
    first_pos: usize,
) -> Result<(Tensor3, Vec<Vec<Vec<f64>>>)> {
    if q.heads() != k.heads()
        || q.heads() != v.heads()
        || q.head_dim() != k.head_dim()
        || q.head_dim() != v.head_dim()
    {
        return Err(Error::Dimension(format!(
            "attention layouts q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if k.tokens() != v.tokens() || first_pos + q.tokens() > k.tokens() {
        return Err(Error::Dimension(format!(
            "{} queries from position {first_pos} over {} keys and {} values",
            q.tokens(),
            k.tokens(),
            v.tokens()
        )));
    }
    let (hn, d) = (q.heads(), q.head_dim());
    let temp = 1.0 / (d as f64).sqrt();
    let mut out = Tensor3::zeros(q.tokens(), hn, d);
    let mut all_logits = Vec::with_capacity(q.tokens());
    for i in 0..q.tokens() {
        let visible = first_pos + i + 1;
        let mut per_head = Vec::with_capacity(hn);
        for h in 0..hn {
            let qv = q.vector(i, h);
            let logits: Vec<f64> = (0..visible)
                .map(|s| dot(qv, k.vector(s, h)) * temp)
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            let o = out.vector_mut(i, h);
            for (s, w) in weights.iter().enumerate() {
                let p = w / total;
                for (oj, vj) in o.iter_mut().zip(v.vector(s, h)) {
                    *oj += p * vj;
                }
            }
            per_head.push(logits);
        }
        all_logits.push(per_head);
    }
    Ok((out, all_logits))
}

/// Single-query attention over every key, as used during decoding.
pub fn attention(q: &Tensor3, k: &Tensor3, v: &Tensor3) -> Result<Tensor3> {
    if q.tokens() != 1 {
        return Err(Error::Dimension(format!(
            "decode attention takes one query, got {}",
            q.tokens()
        )));
    }
    let pos = k
        .tokens()
        .checked_sub(1)
        .ok_or_else(|| Error::Dimension("attention over an empty key set".into()))?;
    Ok(attention_with_logits(q, k, v, pos)?.0)
}

/// Result of one prefill or decode step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// `tokens x d_out` attention output after `W_O`.
    pub attn_out: Matrix,
    /// Per-head logits of the last query over every visible key.
    pub logits: Vec<Vec<f64>>,
    /// Key vectors that were all zeros and got the substitute scale.
    pub degenerate_keys: usize,
}

fn check_model(model: &ModelStub, config: &PipelineConfig) -> Result<()> {
    config.validate()?;
    if model.heads != config.heads || model.head_dim != config.head_dim {
        return Err(Error::State(format!(
            "model has {} heads of {}, config expects {} of {}",
            model.heads, model.head_dim, config.heads, config.head_dim
        )));
    }
    let wants = config.method.rotates_values();
    if model.preprocessed != wants {
        return Err(Error::State(format!(
            "method {} needs a {} model",
            config.method,
            if wants { "preprocessed" } else { "raw" }
        )));
    }
    Ok(())
}

fn run_step(
    model: &ModelStub,
    cache: &mut KvCache,
    hidden: &Matrix,
    config: &PipelineConfig,
) -> Result<StepOutput> {
    if hidden.cols() != model.d_model() {
        return Err(Error::Dimension(format!(
            "hidden states have {} columns, model expects {}",
            hidden.cols(),
            model.d_model()
        )));
    }
    let (hn, d) = (config.heads, config.head_dim);
    let mut q = Tensor3::from_matrix(&matmul(hidden, &model.w_q)?, hn, d)?;
    let mut k = Tensor3::from_matrix(&matmul(hidden, &model.w_k)?, hn, d)?;
    let v = Tensor3::from_matrix(&matmul(hidden, &model.w_v)?, hn, d)?;
    if config.method.rotates() {
        q = fht_tensor(&q)?;
        k = fht_tensor(&k)?;
    }
    let (k_store, norms, degenerate) = if config.method.scales() {
        let s = omni_token_scale(&k, config.scaling);
        (s.scaled, s.norms, s.degenerate.len())
    } else {
        let n = k.tokens() * hn;
        (k, vec![1.0; n], 0)
    };
    let mut k_current = k_store.clone();
    for (i, &s) in norms.iter().enumerate() {
        k_current
            .vector_mut(i / hn, i % hn)
            .iter_mut()
            .for_each(|x| *x *= s);
    }
    let past = cache.len();
    let mut k_all = cache.materialize_k()?;
    k_all.append(&k_current)?;
    let mut v_all = cache.materialize_v()?;
    v_all.append(&v)?;
    let (o, logits) = attention_with_logits(&q, &k_all, &v_all, past)?;
    let attn_out = matmul(&o.to_matrix(), &model.w_o)?;
    cache.append(&k_store, &norms, &v)?;
    Ok(StepOutput {
        attn_out,
        logits: logits.into_iter().last().unwrap_or_default(),
        degenerate_keys: degenerate,
    })
}

/// Processes a prompt from an empty cache.
pub fn prefill(
    model: &ModelStub,
    hidden: &Matrix,
    config: &PipelineConfig,
) -> Result<(KvCache, StepOutput)> {
    check_model(model, config)?;
    let mut cache = KvCache::new(*config)?;
    let out = run_step(model, &mut cache, hidden, config)?;
    Ok((cache, out))
}

/// Processes one generated token against an existing cache.
pub fn decode_step(
    model: &ModelStub,
    cache: &mut KvCache,
    hidden_t: &Matrix,
    config: &PipelineConfig,
) -> Result<StepOutput> {
    check_model(model, config)?;
    if cache.config() != config {
        return Err(Error::State(
            "cache was built with a different configuration".into(),
        ));
    }
    if hidden_t.rows() != 1 {
        return Err(Error::Dimension(format!(
            "decode step takes one token, got {}",
            hidden_t.rows()
        )));
    }
    run_step(model, cache, hidden_t, config)
}

/// Prepares a raw model for `config.method`, folding the value rotation when
/// the method needs it.
pub fn model_for(model: &ModelStub, config: &PipelineConfig) -> Result<ModelStub> {
    if config.method.rotates_values() && !model.preprocessed {
        preprocess(model)
    } else {
        Ok(model.clone())
    }
}

/// Direct full-precision attention of every token of `hidden` (causal).
pub fn reference_attention(model: &ModelStub, hidden: &Matrix) -> Result<Matrix> {
    let (hn, d) = (model.heads, model.head_dim);
    let q = Tensor3::from_matrix(&matmul(hidden, &model.w_q)?, hn, d)?;
    let k = Tensor3::from_matrix(&matmul(hidden, &model.w_k)?, hn, d)?;
    let v = Tensor3::from_matrix(&matmul(hidden, &model.w_v)?, hn, d)?;
    let (o, _) = attention_with_logits(&q, &k, &v, 0)?;
    matmul(&o.to_matrix(), &model.w_o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Method;
    use crate::quant::BitWidth;
    use crate::rng::SeededRng;

    fn random_matrix(rng: &mut SeededRng, r: usize, c: usize, scale: f64) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.normal() * scale)
    }

    fn random_model(rng: &mut SeededRng, d_model: usize, heads: usize, d: usize) -> ModelStub {
        let w = heads * d;
        let s = 1.0 / (d_model as f64).sqrt();
        ModelStub::new(
            random_matrix(rng, d_model, w, s),
            random_matrix(rng, d_model, w, s),
            random_matrix(rng, d_model, w, s),
            random_matrix(rng, w, d_model, 1.0 / (w as f64).sqrt()),
            heads,
            d,
        )
        .unwrap()
    }

    fn naive_attention(q: &[f64], keys: &[Vec<f64>], vals: &[Vec<f64>]) -> Vec<f64> {
        let d = q.len() as f64;
        let e: Vec<f64> = keys
            .iter()
            .map(|k| (q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).exp())
            .collect();
        let z: f64 = e.iter().sum();
        let mut out = vec![0.0; q.len()];
        for (w, v) in e.iter().zip(vals) {
            for (o, x) in out.iter_mut().zip(v) {
                *o += w / z * x;
            }
        }
        out
    }

    #[test]
    fn preprocess_identity_gives_block_hadamard() {
        let m = ModelStub::new(
            Matrix::identity(8),
            Matrix::identity(8),
            Matrix::identity(8),
            Matrix::identity(8),
            2,
            4,
        )
        .unwrap();
        let p = preprocess(&m).unwrap();
        let h = hadamard_matrix(HadamardSize::new(4).unwrap());
        for i in 0..8 {
            for j in 0..8 {
                let expect = if i / 4 == j / 4 {
                    h.get(i % 4, j % 4)
                } else {
                    0.0
                };
                assert_eq!(p.w_v.get(i, j), expect);
            }
        }
        assert!(p.is_preprocessed());
        assert!(matches!(preprocess(&p), Err(Error::State(_))));
    }

    #[test]
    fn preprocessed_value_path_matches_explicit_rotation() {
        let mut rng = SeededRng::new(21);
        let m = random_model(&mut rng, 48, 3, 16);
        let p = preprocess(&m).unwrap();
        let h = random_matrix(&mut rng, 10, 48, 1.0);
        // explicit: rotate each value head vector, then un-rotate before W_O
        let v = Tensor3::from_matrix(&matmul(&h, &m.w_v).unwrap(), 3, 16).unwrap();
        let rotated = fht_tensor(&v).unwrap();
        let back = fht_tensor(&rotated).unwrap();
        let explicit = matmul(&back.to_matrix(), &m.w_o).unwrap();
        let folded = matmul(&matmul(&h, &p.w_v).unwrap(), &p.w_o).unwrap();
        assert!(explicit.max_abs_diff(&folded) < 1e-11);
        let v_folded = matmul(&h, &p.w_v).unwrap();
        assert!(v_folded.max_abs_diff(&rotated.to_matrix()) < 1e-11);
    }

    #[test]
    fn scaling_examples() {
        let k = Tensor3::new(vec![3.0, 4.0], 1, 1, 2).unwrap();
        let s = omni_token_scale(&k, ScalingStrategy::L2);
        assert_eq!(s.norms, vec![5.0]);
        assert!((s.scaled.get(0, 0, 0) - 0.6).abs() < 1e-15);
        assert!((s.scaled.get(0, 0, 1) - 0.8).abs() < 1e-15);

        let k = Tensor3::new(vec![1.0; 4], 1, 1, 4).unwrap();
        let s = omni_token_scale(&k, ScalingStrategy::Max);
        assert_eq!(s.norms, vec![1.0]);
        assert_eq!(s.scaled, k);

        let k = Tensor3::new(vec![1.0, -3.0, 0.0, 4.0], 1, 1, 4).unwrap();
        let s = omni_token_scale(&k, ScalingStrategy::MeanAbs);
        assert_eq!(s.norms, vec![2.0]);
    }

    #[test]
    fn zero_key_gets_substitute_scale() {
        let k = Tensor3::zeros(2, 1, 4);
        let s = omni_token_scale(&k, ScalingStrategy::L2);
        assert_eq!(s.norms, vec![ZERO_SCALE; 2]);
        assert_eq!(s.degenerate, vec![(0, 0), (1, 0)]);
        assert!(s.scaled.data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn rsqrt_tracks_l2() {
        let mut rng = SeededRng::new(5);
        let k = Tensor3::from_fn(50, 2, 64, |_, _, _| rng.normal() * 7.0).unwrap();
        let a = omni_token_scale(&k, ScalingStrategy::L2);
        let b = omni_token_scale(&k, ScalingStrategy::Rsqrt);
        for (x, y) in a.norms.iter().zip(&b.norms) {
            assert!((x - y).abs() <= 1e-6 * x);
        }
        for x in [1e-8, 0.3, 1.0, 2.0, 1234.5, 1e12] {
            let rel = (approx_rsqrt(x) * x.sqrt() - 1.0).abs();
            assert!(rel <= 1e-6, "x = {x}: {rel}");
        }
    }

    #[test]
    fn attention_examples() {
        let q = Tensor3::new(vec![2.0, 0.0], 1, 1, 2).unwrap();
        let k = Tensor3::new(vec![1.0, 0.0], 1, 1, 2).unwrap();
        let v = Tensor3::new(vec![0.3, -0.7], 1, 1, 2).unwrap();
        assert_eq!(attention(&q, &k, &v).unwrap(), v);

        let k = Tensor3::new(vec![1.0, 1.0, 1.0, 1.0], 2, 1, 2).unwrap();
        let v = Tensor3::new(vec![1.0, 2.0, 3.0, 6.0], 2, 1, 2).unwrap();
        let o = attention(&q, &k, &v).unwrap();
        assert!((o.get(0, 0, 0) - 2.0).abs() < 1e-15);
        assert!((o.get(0, 0, 1) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn attention_matches_naive() {
        let mut rng = SeededRng::new(77);
        let q = Tensor3::from_fn(1, 2, 16, |_, _, _| rng.normal()).unwrap();
        let k = Tensor3::from_fn(9, 2, 16, |_, _, _| rng.normal()).unwrap();
        let v = Tensor3::from_fn(9, 2, 16, |_, _, _| rng.normal()).unwrap();
        let o = attention(&q, &k, &v).unwrap();
        for h in 0..2 {
            let keys: Vec<Vec<f64>> = (0..9).map(|s| k.vector(s, h).to_vec()).collect();
            let vals: Vec<Vec<f64>> = (0..9).map(|s| v.vector(s, h).to_vec()).collect();
            let expect = naive_attention(q.vector(0, h), &keys, &vals);
            for (a, b) in o.vector(0, h).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fp_prefill_is_the_reference() {
        let mut rng = SeededRng::new(31);
        let m = random_model(&mut rng, 32, 2, 16);
        let h = random_matrix(&mut rng, 40, 32, 1.0);
        let cfg = PipelineConfig::new(Method::Fp, 2, 16).with_group(16, 32);
        let (cache, out) = prefill(&m, &h, &cfg).unwrap();
        assert_eq!(out.attn_out, reference_attention(&m, &h).unwrap());
        assert_eq!(cache.len(), 40);
    }

    #[test]
    fn prefill_split_300() {
        let mut rng = SeededRng::new(2);
        let m = random_model(&mut rng, 32, 1, 32);
        let h = random_matrix(&mut rng, 300, 32, 1.0);
        let cfg = PipelineConfig::new(Method::Oscar, 1, 32);
        let (cache, _) = prefill(&model_for(&m, &cfg).unwrap(), &h, &cfg).unwrap();
        assert_eq!((cache.packed_tokens(), cache.residual_tokens()), (256, 44));
    }

    #[test]
    fn first_decode_attends_to_itself() {
        let mut rng = SeededRng::new(3);
        let m = random_model(&mut rng, 16, 2, 8);
        let cfg = PipelineConfig::new(Method::Kivi, 2, 8).with_group(8, 16);
        let mut cache = KvCache::new(cfg).unwrap();
        let h = random_matrix(&mut rng, 1, 16, 1.0);
        let out = decode_step(&m, &mut cache, &h, &cfg).unwrap();
        let expect = matmul(&matmul(&h, &m.w_v).unwrap(), &m.w_o).unwrap();
        assert!(out.attn_out.max_abs_diff(&expect) < 1e-12);
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn unquantized_methods_are_transparent() {
        let mut rng = SeededRng::new(4);
        let m = random_model(&mut rng, 64, 2, 32);
        let h = random_matrix(&mut rng, 70, 64, 1.0);
        let prompt = Matrix::from_fn(60, 64, |i, j| h.get(i, j));
        let fp = PipelineConfig::new(Method::Fp, 2, 32).with_group(32, 32);
        let (fp_cache, _) = prefill(&m, &prompt, &fp).unwrap();
        for method in [
            Method::Oscar,
            Method::RotateOnly,
            Method::ScaleOnly,
            Method::Kivi,
        ] {
            for scaling in ScalingStrategy::ALL {
                let cfg = PipelineConfig::new(method, 2, 32)
                    .with_group(32, 32)
                    .with_scaling(scaling)
                    .without_quantization();
                let mm = model_for(&m, &cfg).unwrap();
                let (mut cache, _) = prefill(&mm, &prompt, &cfg).unwrap();
                let mut fpc = fp_cache.clone();
                for t in 60..70 {
                    let row = Matrix::from_fn(1, 64, |_, j| h.get(t, j));
                    let a = decode_step(&mm, &mut cache, &row, &cfg).unwrap();
                    let b = decode_step(&m, &mut fpc, &row, &fp).unwrap();
                    let scale = b.attn_out.data().iter().fold(0.0f64, |s, x| s.max(x.abs()));
                    assert!(a.attn_out.max_abs_diff(&b.attn_out) <= 1e-9 * scale);
                    for (la, lb) in a.logits.iter().flatten().zip(b.logits.iter().flatten()) {
                        assert!((la - lb).abs() <= 1e-9 * lb.abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn sixteen_flushes_over_2048_steps() {
        let mut rng = SeededRng::new(8);
        let m = random_model(&mut rng, 32, 1, 32);
        let cfg = PipelineConfig::new(Method::Oscar, 1, 32);
        let mm = model_for(&m, &cfg).unwrap();
        let mut cache = KvCache::new(cfg).unwrap();
        for _ in 0..2048 {
            let h = random_matrix(&mut rng, 1, 32, 1.0);
            decode_step(&mm, &mut cache, &h, &cfg).unwrap();
        }
        assert_eq!(cache.flushes(), 16);
        assert_eq!(cache.residual_tokens(), 0);
        assert_eq!(cache.packed_tokens(), 2048);
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut rng = SeededRng::new(9);
        let m = random_model(&mut rng, 32, 1, 32);
        let cfg = PipelineConfig::new(Method::Oscar, 1, 32);
        let h = random_matrix(&mut rng, 4, 32, 1.0);
        // oscar needs the folded value rotation
        assert!(matches!(prefill(&m, &h, &cfg), Err(Error::State(_))));
        let mm = model_for(&m, &cfg).unwrap();
        let (mut cache, _) = prefill(&mm, &h, &cfg).unwrap();
        let other = cfg.with_bits(BitWidth::new(4).unwrap());
        let row = random_matrix(&mut rng, 1, 32, 1.0);
        assert!(matches!(
            decode_step(&mm, &mut cache, &row, &other),
            Err(Error::State(_))
        ));
    }
}
