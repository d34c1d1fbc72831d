//! End-to-end fidelity runs on synthetic data: prefill a prompt, decode a
//! number of tokens, and compare every decode output with the
//! full-precision pipeline.
//!
//! The synthetic layer reads `[Q | K | V]` straight out of the hidden state
//! (`W_Q`, `W_K`, `W_V` are block selections, `W_O` the identity), so the
//! cache sees exactly the generated activations. Keys follow
//! [`TniSpec::key_pattern`], values [`TniSpec::value_pattern`]. Queries are
//! Gaussian with the key outlier channels present at `query_outlier` times
//! the bulk scale and the key's sign, then rescaled so the prompt logits
//! have standard deviation `logit_std`.

use serde::{Deserialize, Serialize};

use crate::cache::MemoryLedger;
use crate::config::{Method, PipelineConfig, ScalingStrategy};
use crate::datagen::{generate, TniSpec};
use crate::error::{Error, Result};
use crate::pipeline::{decode_step, model_for, prefill, ModelStub};
use crate::quant::BitWidth;
use crate::rng::SeededRng;
use crate::tensor::{dot, Matrix, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub method: Method,
    pub bits: BitWidth,
    pub group_size: usize,
    pub residual_len: usize,
    pub scaling: ScalingStrategy,
    /// Prompt length.
    pub seq_len: usize,
    pub decode_steps: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub query_outlier: f64,
    pub logit_std: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            method: Method::Oscar,
            bits: BitWidth::new(2).expect("2 bits is supported"),
            group_size: 32,
            residual_len: 128,
            scaling: ScalingStrategy::L2,
            seq_len: 256,
            decode_steps: 32,
            heads: 2,
            head_dim: 128,
            query_outlier: 4.0,
            logit_std: 1.5,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn pipeline(&self) -> PipelineConfig {
        let mut c = PipelineConfig::new(self.method, self.heads, self.head_dim)
            .with_bits(self.bits)
            .with_group(self.group_size, self.residual_len)
            .with_scaling(self.scaling);
        if !self.method.quantizes() {
            c = c.without_quantization();
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            return Err(Error::Argument("sequence length must be positive".into()));
        }
        if !(self.query_outlier.is_finite() && self.query_outlier >= 0.0) {
            return Err(Error::Argument(
                "query outlier factor must be finite and >= 0".into(),
            ));
        }
        if !(self.logit_std.is_finite() && self.logit_std > 0.0) {
            return Err(Error::Argument("logit std must be positive".into()));
        }
        self.pipeline().validate()
    }
}

/// Synthetic layer and the hidden states of prompt plus decode tokens.
#[derive(Debug, Clone)]
pub struct SimInputs {
    pub model: ModelStub,
    /// `(seq_len + decode_steps) x 3 * heads * head_dim`
    pub hidden: Matrix,
}

fn selection(rows: usize, width: usize, offset: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, width);
    for i in 0..width {
        m.set(offset + i, i, 1.0);
    }
    m
}

/// Builds the synthetic layer and activations; depends only on shape, the
/// query knobs and `seed`.
pub fn synthetic_inputs(cfg: &SimConfig) -> Result<SimInputs> {
    let (hn, d) = (cfg.heads, cfg.head_dim);
    let total = cfg.seq_len + cfg.decode_steps;
    synthetic_inputs_from(
        cfg,
        &TniSpec::key_pattern(total, hn, d, cfg.seed),
        &TniSpec::value_pattern(total, hn, d, cfg.seed),
    )
}

/// Same as [`synthetic_inputs`] with explicit key and value generators.
pub fn synthetic_inputs_from(
    cfg: &SimConfig,
    key_spec: &TniSpec,
    value_spec: &TniSpec,
) -> Result<SimInputs> {
    let (hn, d) = (cfg.heads, cfg.head_dim);
    let total = cfg.seq_len + cfg.decode_steps;
    for spec in [key_spec, value_spec] {
        if (spec.tokens, spec.heads, spec.head_dim) != (total, hn, d) {
            return Err(Error::Dimension(format!(
                "generator shape {}x{}x{} does not match {total}x{hn}x{d}",
                spec.tokens, spec.heads, spec.head_dim
            )));
        }
    }
    let (k, _) = generate(key_spec)?;
    let (v, _) = generate(value_spec)?;

    let mut sign = vec![0.0; hn * d];
    for h in 0..hn {
        for &j in &key_spec.outlier_channels {
            let s: f64 = (0..total)
                .filter(|t| !key_spec.sink_tokens.contains(t))
                .map(|t| k.get(t, h, j))
                .sum();
            sign[h * d + j] = s.signum();
        }
    }
    let mut rng = SeededRng::new(cfg.seed).fork(0x9);
    let mut q = Tensor3::from_fn(total, hn, d, |_, h, j| {
        let z = rng.normal();
        if key_spec.outlier_channels.contains(&j) {
            sign[h * d + j] * cfg.query_outlier * (1.0 + 0.25 * z)
        } else {
            z
        }
    })?;

    let prompt = cfg.seq_len;
    let mut logits = Vec::new();
    let inv = 1.0 / (d as f64).sqrt();
    for t in (0..prompt).step_by((prompt / 64).max(1)) {
        for s in 0..=t {
            for h in 0..hn {
                logits.push(dot(q.vector(t, h), k.vector(s, h)) * inv);
            }
        }
    }
    let mean = logits.iter().sum::<f64>() / logits.len() as f64;
    let var = logits.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / logits.len() as f64;
    if var > 0.0 {
        let c = cfg.logit_std / var.sqrt();
        q = Tensor3::new(q.data().iter().map(|x| x * c).collect(), total, hn, d)?;
    }

    let width = hn * d;
    let d_model = 3 * width;
    let mut hidden = Matrix::zeros(total, d_model);
    for t in 0..total {
        for (part, x) in [&q, &k, &v].into_iter().enumerate() {
            for (i, &e) in x.token_row(t).iter().enumerate() {
                hidden.set(t, part * width + i, e);
            }
        }
    }
    let model = ModelStub::new(
        selection(d_model, width, 0),
        selection(d_model, width, width),
        selection(d_model, width, 2 * width),
        Matrix::identity(width),
        hn,
        d,
    )?;
    Ok(SimInputs { model, hidden })
}

/// Decode-phase fidelity of one method against full precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub config: SimConfig,
    /// Mean squared error of decode attention outputs.
    pub output_mse: f64,
    /// Mean squared error of decode logits, all heads and visible keys.
    pub logit_mse: f64,
    /// Prefill outputs against full precision; zero up to rounding.
    pub prefill_output_mse: f64,
    pub memory: MemoryLedger,
    pub flushes: usize,
}

impl SimReport {
    pub const CSV_HEADER: &'static str = "method,bits,group,residual,seq,decode_steps,scaling,seed,output_mse,logit_mse,packed_tokens,residual_tokens,total_bits";

    pub fn csv_row(&self) -> String {
        let c = &self.config;
        format!(
            "{},{},{},{},{},{},{},{},{:e},{:e},{},{},{}",
            c.method,
            c.bits.get(),
            c.group_size,
            c.residual_len,
            c.seq_len,
            c.decode_steps,
            c.scaling,
            c.seed,
            self.output_mse,
            self.logit_mse,
            self.memory.packed_tokens,
            self.memory.residual_tokens,
            self.memory.total_bits()
        )
    }
}

struct Trace {
    prefill: Matrix,
    outputs: Vec<Matrix>,
    logits: Vec<Vec<Vec<f64>>>,
    memory: MemoryLedger,
    flushes: usize,
}

fn trace(inputs: &SimInputs, cfg: &PipelineConfig, prompt: usize) -> Result<Trace> {
    let model = model_for(&inputs.model, cfg)?;
    let rows = inputs.hidden.rows();
    let width = inputs.hidden.cols();
    let slice = |a: usize, b: usize| {
        Matrix::new(
            inputs.hidden.data()[a * width..b * width].to_vec(),
            b - a,
            width,
        )
    };
    let (mut cache, out) = prefill(&model, &slice(0, prompt)?, cfg)?;
    let mut outputs = Vec::new();
    let mut logits = Vec::new();
    for t in prompt..rows {
        let step = decode_step(&model, &mut cache, &slice(t, t + 1)?, cfg)?;
        outputs.push(step.attn_out);
        logits.push(step.logits);
    }
    Ok(Trace {
        prefill: out.attn_out,
        outputs,
        logits,
        memory: cache.memory(),
        flushes: cache.flushes(),
    })
}

fn matrix_mse(a: &Matrix, b: &Matrix) -> f64 {
    let n = a.data().len().max(1) as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / n
}

fn compare(run: &Trace, oracle: &Trace) -> (f64, f64, f64) {
    let steps = run.outputs.len().max(1) as f64;
    let output_mse = run
        .outputs
        .iter()
        .zip(&oracle.outputs)
        .map(|(a, b)| matrix_mse(a, b))
        .sum::<f64>()
        / steps;
    let (mut sum, mut n) = (0.0, 0usize);
    for (a, b) in run.logits.iter().zip(&oracle.logits) {
        for (ha, hb) in a.iter().zip(b) {
            for (x, y) in ha.iter().zip(hb) {
                sum += (x - y).powi(2);
                n += 1;
            }
        }
    }
    let logit_mse = if n == 0 { 0.0 } else { sum / n as f64 };
    (
        output_mse,
        logit_mse,
        matrix_mse(&run.prefill, &oracle.prefill),
    )
}

/// Runs `cfg.method` and the full-precision pipeline on the same inputs.
pub fn simulate_with(inputs: &SimInputs, cfg: &SimConfig) -> Result<SimReport> {
    cfg.validate()?;
    if inputs.hidden.rows() < cfg.seq_len {
        return Err(Error::Argument(format!(
            "inputs hold {} tokens, prompt needs {}",
            inputs.hidden.rows(),
            cfg.seq_len
        )));
    }
    let run = trace(inputs, &cfg.pipeline(), cfg.seq_len)?;
    let fp_cfg = SimConfig {
        method: Method::Fp,
        ..*cfg
    };
    let oracle = trace(inputs, &fp_cfg.pipeline(), cfg.seq_len)?;
    let (output_mse, logit_mse, prefill_output_mse) = compare(&run, &oracle);
    Ok(SimReport {
        config: *cfg,
        output_mse,
        logit_mse,
        prefill_output_mse,
        memory: run.memory,
        flushes: run.flushes,
    })
}

pub fn simulate(cfg: &SimConfig) -> Result<SimReport> {
    cfg.validate()?;
    simulate_with(&synthetic_inputs(cfg)?, cfg)
}

/// One report per method, all on the same inputs and one oracle run.
pub fn compare_methods(cfg: &SimConfig, methods: &[Method]) -> Result<Vec<SimReport>> {
    compare_methods_with(&synthetic_inputs(cfg)?, cfg, methods)
}

pub fn compare_methods_with(
    inputs: &SimInputs,
    cfg: &SimConfig,
    methods: &[Method],
) -> Result<Vec<SimReport>> {
    let fp_cfg = SimConfig {
        method: Method::Fp,
        ..*cfg
    };
    fp_cfg.validate()?;
    let oracle = trace(inputs, &fp_cfg.pipeline(), cfg.seq_len)?;
    methods
        .iter()
        .map(|&m| {
            let c = SimConfig { method: m, ..*cfg };
            c.validate()?;
            let run = trace(inputs, &c.pipeline(), cfg.seq_len)?;
            let (output_mse, logit_mse, prefill_output_mse) = compare(&run, &oracle);
            Ok(SimReport {
                config: c,
                output_mse,
                logit_mse,
                prefill_output_mse,
                memory: run.memory,
                flushes: run.flushes,
            })
        })
        .collect()
}
