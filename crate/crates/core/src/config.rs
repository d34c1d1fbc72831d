//! Method and cache configuration shared by the cache and the pipeline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::BitWidth;

/// Key-path treatment applied before caching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Full precision, no quantization.
    Fp,
    /// Per-channel keys and per-token values, no transforms.
    Kivi,
    /// Hadamard rotation of queries and keys, then KIVI quantization.
    RotateOnly,
    /// Token-wise key scaling without rotation.
    ScaleOnly,
    /// Rotation, then token-wise key scaling, then KIVI quantization.
    Oscar,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Fp,
        Method::Kivi,
        Method::RotateOnly,
        Method::ScaleOnly,
        Method::Oscar,
    ];

    pub fn rotates(self) -> bool {
        matches!(self, Method::RotateOnly | Method::Oscar)
    }

    pub fn scales(self) -> bool {
        matches!(self, Method::ScaleOnly | Method::Oscar)
    }

    /// Whether the value and output projections carry a folded rotation.
    pub fn rotates_values(self) -> bool {
        self == Method::Oscar
    }

    pub fn quantizes(self) -> bool {
        self != Method::Fp
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Fp => "fp",
            Method::Kivi => "kivi",
            Method::RotateOnly => "rotate-only",
            Method::ScaleOnly => "scale-only",
            Method::Oscar => "oscar",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown method '{s}'")))
    }
}

/// How the per-token key scale is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingStrategy {
    #[default]
    L2,
    Rsqrt,
    Max,
    MeanAbs,
}

impl ScalingStrategy {
    pub const ALL: [ScalingStrategy; 4] = [
        ScalingStrategy::L2,
        ScalingStrategy::Rsqrt,
        ScalingStrategy::Max,
        ScalingStrategy::MeanAbs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScalingStrategy::L2 => "l2",
            ScalingStrategy::Rsqrt => "rsqrt",
            ScalingStrategy::Max => "max",
            ScalingStrategy::MeanAbs => "mean-abs",
        }
    }
}

impl fmt::Display for ScalingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScalingStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ScalingStrategy::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown scaling strategy '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub method: Method,
    pub bits: BitWidth,
    pub group_size: usize,
    pub residual_len: usize,
    pub scaling: ScalingStrategy,
    pub head_dim: usize,
    pub heads: usize,
    /// When false the cache keeps packed tokens at full precision while every
    /// transform still runs. Used to check that the transforms cancel exactly.
    pub quantize: bool,
}

impl PipelineConfig {
    pub fn new(method: Method, heads: usize, head_dim: usize) -> Self {
        Self {
            method,
            bits: BitWidth::new(2).expect("2 bits is supported"),
            group_size: 32,
            residual_len: 128,
            scaling: ScalingStrategy::L2,
            head_dim,
            heads,
            quantize: method.quantizes(),
        }
    }

    pub fn with_bits(mut self, bits: BitWidth) -> Self {
        self.bits = bits;
        self
    }

    pub fn with_group(mut self, group_size: usize, residual_len: usize) -> Self {
        self.group_size = group_size;
        self.residual_len = residual_len;
        self
    }

    pub fn with_scaling(mut self, scaling: ScalingStrategy) -> Self {
        self.scaling = scaling;
        self
    }

    pub fn without_quantization(mut self) -> Self {
        self.quantize = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 {
            return Err(Error::Argument(
                "heads and head_dim must be positive".into(),
            ));
        }
        if self.group_size == 0 || self.residual_len == 0 {
            return Err(Error::Argument(
                "group size and residual length must be positive".into(),
            ));
        }
        if !self.residual_len.is_multiple_of(self.group_size) {
            return Err(Error::Argument(format!(
                "residual length {} is not divisible by group size {}",
                self.residual_len, self.group_size
            )));
        }
        if !self.head_dim.is_multiple_of(self.group_size) {
            return Err(Error::Argument(format!(
                "head dimension {} is not divisible by group size {}",
                self.head_dim, self.group_size
            )));
        }
        if self.method.rotates() && !self.head_dim.is_power_of_two() {
            return Err(Error::NotPowerOfTwo(self.head_dim));
        }
        if self.quantize && !self.method.quantizes() {
            return Err(Error::Argument("method fp cannot quantize".into()));
        }
        Ok(())
    }
}
