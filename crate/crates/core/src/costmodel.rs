//! Closed-form operation counts of key-side quantization overhead for five
//! KV cache quantization methods, weighted into effective cost units.
//!
//! A Walsh-Hadamard transform over head dimension `h` costs `h log2 h`
//! additions per head, so `d log2 h` per transformed `d`-wide tensor.
//! Rotating methods transform both queries and keys.
//!
//! | method | prefill arith / token | decode arith / step | decode lookups |
//! |---|---|---|---|
//! | kivi | `5d` | `5d + 2Ld` | 0 |
//! | quarot | `2d log2 h + 5d` | `2d log2 h + 5d + 2Ld` | 0 |
//! | oscar | `2d log2 h + 8d` | `2d log2 h + 8d + 3Ld` | 0 |
//! | turboquant | `6dh + 14.5d` | `6dh + 14.5d + Ld` | `Ld` |
//! | turboquant_plus | `4dh + 5.25d` | `4dh + 5.25d + Ld` | `Ld` |
//!
//! Effective cost is `arith + lookup_weight * lookup`. Prefill is reported
//! for the whole prompt, per-token cost times `L`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMethod {
    Kivi,
    Quarot,
    Oscar,
    Turboquant,
    TurboquantPlus,
}

impl CostMethod {
    pub const ALL: [CostMethod; 5] = [
        CostMethod::Kivi,
        CostMethod::Quarot,
        CostMethod::Oscar,
        CostMethod::Turboquant,
        CostMethod::TurboquantPlus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CostMethod::Kivi => "kivi",
            CostMethod::Quarot => "quarot",
            CostMethod::Oscar => "oscar",
            CostMethod::Turboquant => "turboquant",
            CostMethod::TurboquantPlus => "turboquant_plus",
        }
    }
}

impl fmt::Display for CostMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CostMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CostMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Argument(format!(
                    "unknown method '{s}', expected one of kivi, quarot, oscar, turboquant, turboquant_plus"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostConfig {
    /// Hidden dimension.
    pub d: u64,
    /// Head dimension, a power of two.
    pub h: u64,
    /// Sequence length.
    pub l: u64,
    pub lookup_weight: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            d: 4096,
            h: 128,
            l: 10_000,
            lookup_weight: 5.0,
        }
    }
}

impl CostConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.h == 0 || self.l == 0 {
            return Err(Error::Argument("d, h and L must be positive".into()));
        }
        if !self.h.is_power_of_two() {
            return Err(Error::Argument(format!(
                "h={} is not a power of two",
                self.h
            )));
        }
        if !(self.lookup_weight.is_finite() && self.lookup_weight >= 0.0) {
            return Err(Error::Argument(
                "lookup weight must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub method: CostMethod,
    /// Arithmetic operations per prefill token.
    pub prefill_arith: f64,
    /// Lookups per prefill token.
    pub prefill_lookup: f64,
    /// Arithmetic operations per decode step.
    pub decode_arith: f64,
    /// Lookups per decode step.
    pub decode_lookup: f64,
    /// Weighted units for the whole prefill (`L` tokens).
    pub effective_prefill: f64,
    /// Weighted units per decode step.
    pub effective_decode: f64,
}

pub fn method_cost(method: CostMethod, cfg: &CostConfig) -> Result<CostBreakdown> {
    cfg.validate()?;
    let d = cfg.d as f64;
    let h = cfg.h as f64;
    let l = cfg.l as f64;
    let wht = 2.0 * d * h.log2();
    let (prefill_arith, decode_extra, decode_lookup) = match method {
        CostMethod::Kivi => (5.0 * d, 2.0 * l * d, 0.0),
        CostMethod::Quarot => (wht + 5.0 * d, 2.0 * l * d, 0.0),
        CostMethod::Oscar => (wht + 8.0 * d, 3.0 * l * d, 0.0),
        CostMethod::Turboquant => (6.0 * d * h + 14.5 * d, l * d, l * d),
        CostMethod::TurboquantPlus => (4.0 * d * h + 5.25 * d, l * d, l * d),
    };
    let prefill_lookup = 0.0;
    let decode_arith = prefill_arith + decode_extra;
    let w = cfg.lookup_weight;
    Ok(CostBreakdown {
        method,
        prefill_arith,
        prefill_lookup,
        decode_arith,
        decode_lookup,
        effective_prefill: (prefill_arith + w * prefill_lookup) * l,
        effective_decode: decode_arith + w * decode_lookup,
    })
}

pub const COST_CSV_HEADER: &str = "method,prefill_m_units,decode_m_units";

/// One CSV line per method, effective costs in millions with one decimal.
pub fn cost_csv(rows: &[CostBreakdown]) -> String {
    let mut out = format!("{COST_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.1},{:.1}\n",
            r.method,
            r.effective_prefill / 1e6,
            r.effective_decode / 1e6
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    pub method: CostMethod,
    pub effective_decode: f64,
    pub score: f64,
    /// Another row is at least as cheap and at least as accurate, and strictly better in one.
    pub dominated: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParetoTable {
    pub rows: Vec<ParetoRow>,
    /// Methods left out for lack of a score.
    pub warnings: Vec<String>,
}

/// Joins decode cost with externally supplied accuracy scores, sorted by cost.
pub fn pareto_table(
    methods: &[CostMethod],
    cfg: &CostConfig,
    accuracy: &BTreeMap<CostMethod, f64>,
) -> Result<ParetoTable> {
    let mut table = ParetoTable::default();
    for &m in methods {
        match accuracy.get(&m) {
            Some(&score) => table.rows.push(ParetoRow {
                method: m,
                effective_decode: method_cost(m, cfg)?.effective_decode,
                score,
                dominated: false,
            }),
            None => table
                .warnings
                .push(format!("no accuracy score for {m}, row omitted")),
        }
    }
    table
        .rows
        .sort_by(|a, b| a.effective_decode.total_cmp(&b.effective_decode));
    let snapshot: Vec<(f64, f64)> = table
        .rows
        .iter()
        .map(|r| (r.effective_decode, r.score))
        .collect();
    for (i, row) in table.rows.iter_mut().enumerate() {
        row.dominated = snapshot.iter().enumerate().any(|(j, &(c, s))| {
            j != i
                && c <= row.effective_decode
                && s >= row.score
                && (c < row.effective_decode || s > row.score)
        });
    }
    Ok(table)
}
