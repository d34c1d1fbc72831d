//! `oscar` command-line harness.
//!
//! Every experiment writes a CSV with a fixed header (or its JSON mirror
//! under `--json`) to `--out`, or to stdout when `--out` is absent. A file
//! written with `--out PATH` is accompanied by `PATH.manifest.json`, which
//! records the command, the resolved configuration, the seed, the tool
//! version, wall-clock timestamps and the output paths. Timestamps live only
//! in the manifest, so identical flags give byte-identical outputs.

mod manifest;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use oscar_kv::analysis::{self, ErrorReport, StateTag, StudySpec, TniProfile};
use oscar_kv::costmodel::{self, CostConfig, CostMethod};
use oscar_kv::datagen::{self, Dtype, TniSpec};
use oscar_kv::simulate::{self, SimConfig, SimReport};
use oscar_kv::{BitWidth, Error, Method, ScalingStrategy};
use serde::Serialize;

use crate::manifest::RunManifest;

const PROFILE_SCHEMA: &str = "\
CSV schema (one row per token):
  token,state,min,median,max,mean
    token   token index
    state   q, k or v
    min/median/max/mean   statistics of the per-head L2 norms of that token";

const ERROR_SCHEMA: &str = "\
CSV schema (one row per cell):
  bits,scheme,condition,subset,mse_x100
    scheme     per-channel-k or per-token-v
    condition  with-outliers, without-outliers, mixed-modality or single-modality
    subset     all, or modality-<i> for the i-th modality block
    mse_x100   mean squared reconstruction error times 100";

const COST_SCHEMA: &str = "\
CSV schema (one row per method):
  method,prefill_m_units,decode_m_units
    prefill_m_units  effective prefill cost over all L tokens, millions of units
    decode_m_units   effective cost of one decode token, millions of units
  effective cost = arithmetic ops + lookup-weight * lookups";

const SIM_SCHEMA: &str = "\
CSV schema (one row per method):
  method,bits,group,residual,seq,decode_steps,scaling,seed,output_mse,logit_mse,packed_tokens,residual_tokens,total_bits
    output_mse       decode attention outputs against the full-precision run
    logit_mse        decode attention logits against the full-precision run
    packed_tokens    tokens held in quantized storage at the end
    residual_tokens  tokens held in the full-precision residual window
    total_bits       cache footprint in bits, codes plus parameters plus residual";

const DEMO_SCHEMA: &str = "\
Prints the two-token scaling example as text; --json emits the same fields as JSON.";

const GENERATE_SCHEMA: &str = "\
Writes a KVT1 tensor file: the magic KVT1, a one-line JSON header
{shape, dtype, layout, modality_blocks, outlier_tokens}, a newline, then
S*H*d_h little-endian floats, channel fastest.";

#[derive(Debug, Parser)]
#[command(
    name = "oscar",
    version,
    about = "Low-bit KV-cache quantization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic activation tensor.
    #[command(after_help = GENERATE_SCHEMA)]
    Generate(GenerateArgs),
    /// Per-token norm statistics of a tensor file.
    #[command(after_help = PROFILE_SCHEMA)]
    Profile(ProfileArgs),
    /// Quantization error with and without outlier tokens and across modalities.
    #[command(after_help = ERROR_SCHEMA)]
    ErrorStudy(ErrorStudyArgs),
    /// Print the two-token scaling artifact example.
    #[command(after_help = DEMO_SCHEMA)]
    DemoArtifact(DemoArgs),
    /// Analytical per-token operation costs.
    #[command(after_help = COST_SCHEMA)]
    Cost(CostArgs),
    /// Prefill and decode through the quantized cache and compare to full precision.
    #[command(after_help = SIM_SCHEMA)]
    Simulate(SimulateArgs),
}

#[derive(Debug, Args, Serialize)]
struct OutputArgs {
    /// Output file; stdout when absent. A manifest is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Emit JSON instead of CSV.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Pattern {
    /// Outlier channels, sinks, heavy tokens, two modalities, norm spread.
    Key,
    /// The key pattern without outlier channels.
    Value,
    /// Gaussian with no structure.
    Plain,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum DtypeArg {
    F32,
    F64,
}

#[derive(Debug, Args, Serialize)]
struct ShapeArgs {
    /// Number of tokens.
    #[arg(long, default_value_t = 256)]
    tokens: usize,
    /// Number of heads.
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Channels per head.
    #[arg(long, default_value_t = 128)]
    head_dim: usize,
    /// Random seed.
    #[arg(long, env = "OSCAR_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct GenerateArgs {
    #[command(flatten)]
    shape: ShapeArgs,
    /// Generator preset.
    #[arg(long, value_enum, default_value_t = Pattern::Key)]
    pattern: Pattern,
    /// JSON generator spec; overrides --pattern and the shape flags.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Element type of the body.
    #[arg(long, value_enum, default_value_t = DtypeArg::F32)]
    dtype: DtypeArg,
    /// Output tensor file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ProfileArgs {
    /// Input tensor file.
    #[arg(long)]
    input: PathBuf,
    /// Which state the tensor holds: q, k or v.
    #[arg(long, default_value = "k", value_parser = parse_state)]
    #[serde(serialize_with = "ser_state")]
    state: StateTag,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
struct ErrorStudyArgs {
    /// Key tensor file; its annotations supply outlier tokens and modality blocks.
    #[arg(
        long,
        required_unless_present = "synthetic",
        conflicts_with = "synthetic",
        requires = "values"
    )]
    input: Option<PathBuf>,
    /// Value tensor file paired with --input.
    #[arg(long, requires = "input")]
    values: Option<PathBuf>,
    /// Generate key and value tensors from the built-in patterns.
    #[arg(long)]
    synthetic: bool,
    #[command(flatten)]
    shape: ShapeArgs,
    /// Bit widths, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![2u8, 3, 4])]
    bits: Vec<u8>,
    /// Group size.
    #[arg(long, default_value_t = 32)]
    group: usize,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
struct DemoArgs {
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
struct CostArgs {
    /// Hidden size.
    #[arg(long, default_value_t = 4096)]
    d: u64,
    /// Head dimension, a power of two.
    #[arg(long, default_value_t = 128)]
    h: u64,
    /// Prompt length.
    #[arg(long = "L", default_value_t = 10000)]
    l: u64,
    /// Weight of one lookup relative to one arithmetic op.
    #[arg(long, default_value_t = 5.0)]
    lookup_weight: f64,
    /// Methods, comma separated: kivi, quarot, oscar, turboquant, turboquant_plus.
    #[arg(long, value_delimiter = ',', value_parser = parse_cost_method,
          default_value = "kivi,quarot,oscar,turboquant,turboquant_plus")]
    #[serde(serialize_with = "ser_names")]
    methods: Vec<CostMethod>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
struct SimulateArgs {
    /// Methods, comma separated: fp, kivi, rotate-only, scale-only, oscar.
    #[arg(long, value_delimiter = ',', value_parser = parse_method, default_value = "oscar")]
    #[serde(serialize_with = "ser_names")]
    method: Vec<Method>,
    /// Bit width of keys and values.
    #[arg(long, default_value_t = 2)]
    bits: u8,
    /// Group size.
    #[arg(long, default_value_t = 32)]
    group: usize,
    /// Residual window length, a multiple of the group size.
    #[arg(long, default_value_t = 128)]
    residual: usize,
    /// Prompt length.
    #[arg(long, default_value_t = 256)]
    seq: usize,
    /// Decode steps after the prompt.
    #[arg(long, default_value_t = 32)]
    decode_steps: usize,
    /// Token scaling statistic: l2, rsqrt, max or mean-abs.
    #[arg(long, default_value = "l2", value_parser = parse_scaling)]
    #[serde(serialize_with = "ser_name")]
    scaling: ScalingStrategy,
    /// Number of heads.
    #[arg(long, default_value_t = 2)]
    heads: usize,
    /// Channels per head.
    #[arg(long, default_value_t = 128)]
    head_dim: usize,
    /// Random seed.
    #[arg(long, env = "OSCAR_SEED", default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    output: OutputArgs,
}

fn parse_state(s: &str) -> Result<StateTag, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_cost_method(s: &str) -> Result<CostMethod, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_scaling(s: &str) -> Result<ScalingStrategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn ser_state<S: serde::Serializer>(s: &StateTag, ser: S) -> Result<S::Ok, S::Error> {
    ser.serialize_str(s.short())
}

fn ser_name<T: std::fmt::Display, S: serde::Serializer>(v: &T, ser: S) -> Result<S::Ok, S::Error> {
    ser.collect_str(v)
}

fn ser_names<T: std::fmt::Display, S: serde::Serializer>(
    v: &[T],
    ser: S,
) -> Result<S::Ok, S::Error> {
    ser.collect_seq(v.iter().map(|m| m.to_string()))
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Argument(_)
            | Error::Value(_)
            | Error::Dimension(_)
            | Error::NotPowerOfTwo(_)
            | Error::Index { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Internal(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Internal(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Internal(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = command_name(&cli.command);
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor usage, try 'oscar {name} --help'.");
            ExitCode::from(2)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Generate(_) => "generate",
        Command::Profile(_) => "profile",
        Command::ErrorStudy(_) => "error-study",
        Command::DemoArtifact(_) => "demo-artifact",
        Command::Cost(_) => "cost",
        Command::Simulate(_) => "simulate",
    }
}

fn run(command: Command) -> CmdResult {
    let name = command_name(&command);
    let started = manifest::unix_now();
    match &command {
        Command::Generate(a) => cmd_generate(a, name, started),
        Command::Profile(a) => cmd_profile(a, name, started),
        Command::ErrorStudy(a) => cmd_error_study(a, name, started),
        Command::DemoArtifact(a) => cmd_demo(a, name, started),
        Command::Cost(a) => cmd_cost(a, name, started),
        Command::Simulate(a) => cmd_simulate(a, name, started),
    }
}

/// Writes `body` to `--out` (plus manifest) or stdout.
fn emit<C: Serialize>(
    output: &OutputArgs,
    body: &str,
    name: &str,
    config: &C,
    seed: Option<u64>,
    started: u64,
) -> CmdResult {
    match &output.out {
        Some(path) => {
            std::fs::write(path, body)?;
            write_manifest(path, name, config, seed, started)
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(body.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn write_manifest<C: Serialize>(
    path: &Path,
    name: &str,
    config: &C,
    seed: Option<u64>,
    started: u64,
) -> CmdResult {
    let m = RunManifest::new(name, config, seed, started, vec![path.to_path_buf()])?;
    m.write_beside(path)?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Result<String, Failure> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn bits(b: u8) -> Result<BitWidth, Failure> {
    Ok(BitWidth::new(b)?)
}

fn cmd_generate(a: &GenerateArgs, name: &str, started: u64) -> CmdResult {
    let spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str::<TniSpec>(&text)
                .map_err(|e| Failure::Usage(format!("spec {}: {e}", p.display())))?
        }
        None => {
            let s = &a.shape;
            match a.pattern {
                Pattern::Key => TniSpec::key_pattern(s.tokens, s.heads, s.head_dim, s.seed),
                Pattern::Value => TniSpec::value_pattern(s.tokens, s.heads, s.head_dim, s.seed),
                Pattern::Plain => TniSpec::plain(s.tokens, s.heads, s.head_dim, s.seed),
            }
        }
    };
    let (x, ann) = datagen::generate(&spec)?;
    let dtype = match a.dtype {
        DtypeArg::F32 => Dtype::F32,
        DtypeArg::F64 => Dtype::F64,
    };
    datagen::write_file(&a.out, &x, &ann, dtype)?;
    #[derive(Serialize)]
    struct Config<'a> {
        args: &'a GenerateArgs,
        spec: &'a TniSpec,
    }
    write_manifest(
        &a.out,
        name,
        &Config {
            args: a,
            spec: &spec,
        },
        Some(spec.seed),
        started,
    )
}

fn cmd_profile(a: &ProfileArgs, name: &str, started: u64) -> CmdResult {
    let (x, _) = datagen::read_file(&a.input)?;
    let profile: TniProfile = analysis::tni_profile(&x, a.state);
    let body = if a.output.json {
        to_json(&profile)?
    } else {
        profile.to_csv()
    };
    emit(&a.output, &body, name, a, None, started)
}

fn cmd_error_study(a: &ErrorStudyArgs, name: &str, started: u64) -> CmdResult {
    let (keys, values, ann) = if a.synthetic {
        let s = &a.shape;
        let (k, ann) =
            datagen::generate(&TniSpec::key_pattern(s.tokens, s.heads, s.head_dim, s.seed))?;
        let (v, _) = datagen::generate(&TniSpec::value_pattern(
            s.tokens, s.heads, s.head_dim, s.seed,
        ))?;
        (k, v, ann)
    } else {
        let (input, values) = match (&a.input, &a.values) {
            (Some(i), Some(v)) => (i, v),
            _ => {
                return Err(Failure::Usage(
                    "--input and --values are required without --synthetic".into(),
                ))
            }
        };
        let (k, ann) = datagen::read_file(input)?;
        let (v, _) = datagen::read_file(values)?;
        (k, v, ann)
    };
    let spec = StudySpec {
        bits: a.bits.iter().map(|&b| bits(b)).collect::<Result<_, _>>()?,
        group_size: a.group,
        outlier_tokens: ann.outlier_tokens,
        modality_blocks: ann.modality_blocks,
    };
    let report: ErrorReport = analysis::error_study(&keys, &values, &spec)?;
    let body = if a.output.json {
        to_json(&report)?
    } else {
        report.to_csv()
    };
    let seed = a.synthetic.then_some(a.shape.seed);
    emit(&a.output, &body, name, a, seed, started)
}

fn cmd_demo(a: &DemoArgs, name: &str, started: u64) -> CmdResult {
    let demo = analysis::artifact_demo();
    let body = if a.output.json {
        to_json(&demo)?
    } else {
        demo.render()
    };
    emit(&a.output, &body, name, a, None, started)
}

fn cmd_cost(a: &CostArgs, name: &str, started: u64) -> CmdResult {
    let cfg = CostConfig {
        d: a.d,
        h: a.h,
        l: a.l,
        lookup_weight: a.lookup_weight,
    };
    cfg.validate()?;
    let rows = a
        .methods
        .iter()
        .map(|&m| costmodel::method_cost(m, &cfg))
        .collect::<oscar_kv::Result<Vec<_>>>()?;
    let body = if a.output.json {
        to_json(&rows)?
    } else {
        costmodel::cost_csv(&rows)
    };
    emit(&a.output, &body, name, a, None, started)
}

fn cmd_simulate(a: &SimulateArgs, name: &str, started: u64) -> CmdResult {
    let cfg = SimConfig {
        method: a.method[0],
        bits: bits(a.bits)?,
        group_size: a.group,
        residual_len: a.residual,
        scaling: a.scaling,
        seq_len: a.seq,
        decode_steps: a.decode_steps,
        heads: a.heads,
        head_dim: a.head_dim,
        seed: a.seed,
        ..SimConfig::default()
    };
    for &m in &a.method {
        SimConfig { method: m, ..cfg }.validate()?;
    }
    let reports: Vec<SimReport> = simulate::compare_methods(&cfg, &a.method)?;
    let body = if a.output.json {
        to_json(&reports)?
    } else {
        let mut s = String::from(SimReport::CSV_HEADER);
        s.push('\n');
        for r in &reports {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    };
    emit(&a.output, &body, name, a, Some(a.seed), started)
}
