//! Storage accounting: per-layer bit counts and model-level bits per weight for the
//! factorized format and the binary PTQ baselines.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::parse_shape_config;

/// Baselines cap salient columns at this many.
pub const MAX_SALIENT: usize = 50;
pub const DEFAULT_BLOCK: usize = 128;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub layers: Vec<LayerShape>,
    pub residual_fp16_params: u64,
}

impl ModelShape {
    pub fn quantized_params(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| (l.n * l.m * l.count) as u64)
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Baseline {
    BiLlm,
    /// `N:M` structured sparsity.
    Stbllm { n: usize, m: usize },
    ArbLlmRc,
    HbllmRow,
    HbllmCol,
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Baseline::BiLlm => write!(f, "billm"),
            Baseline::Stbllm { n, m } => write!(f, "stbllm-{n}:{m}"),
            Baseline::ArbLlmRc => write!(f, "arb-rc"),
            Baseline::HbllmRow => write!(f, "hbllm-row"),
            Baseline::HbllmCol => write!(f, "hbllm-col"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineParams {
    pub method: Baseline,
    pub c: usize,
    pub k: usize,
}

impl BaselineParams {
    pub fn new(method: Baseline, c: usize) -> Self {
        Self {
            method,
            c,
            k: DEFAULT_BLOCK,
        }
    }
}

/// Any method the accounting knows about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    NanoQuant,
    Dbf,
    Baseline(Baseline),
}

impl FromStr for Method {
    type Err = Error;

    /// Accepts `nanoquant`, `dbf`, `billm`, `stbllm` (with `N:M` suffix, e.g. `stbllm-6:8`),
    /// `arb-rc`, `hbllm-row`, `hbllm-col`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let method = match lower.as_str() {
            "nanoquant" | "nq" => Method::NanoQuant,
            "dbf" | "littlebit" => Method::Dbf,
            "billm" => Method::Baseline(Baseline::BiLlm),
            "arb-rc" | "arb" | "arbllm-rc" => Method::Baseline(Baseline::ArbLlmRc),
            "hbllm-row" | "hbllm-r" | "hbllm" => Method::Baseline(Baseline::HbllmRow),
            "hbllm-col" | "hbllm-c" => Method::Baseline(Baseline::HbllmCol),
            other => {
                let nm = other
                    .strip_prefix("stbllm")
                    .map(|rest| rest.trim_start_matches(['-', '_']));
                match nm {
                    Some("") => Method::Baseline(Baseline::Stbllm { n: 4, m: 8 }),
                    Some(spec) => {
                        let (n, m) = parse_nm(spec)?;
                        Method::Baseline(Baseline::Stbllm { n, m })
                    }
                    None => return Err(Error::UnsupportedMethod(s.to_string())),
                }
            }
        };
        Ok(method)
    }
}

/// Parses `N:M` with `0 < N <= M <= 64`.
pub fn parse_nm(spec: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidConfig(format!("bad N:M sparsity `{spec}`"));
    let (a, b) = spec.split_once(':').ok_or_else(bad)?;
    let n: usize = a.trim().parse().map_err(|_| bad())?;
    let m: usize = b.trim().parse().map_err(|_| bad())?;
    if n == 0 || n > m || m > 64 {
        return Err(bad());
    }
    Ok((n, m))
}

fn ceil_div(a: usize, b: usize) -> f64 {
    a.div_ceil(b) as f64
}

/// `⌈log₂ x⌉` for `x ≥ 1`.
pub fn ceil_log2(x: u128) -> u32 {
    if x <= 1 {
        0
    } else {
        128 - (x - 1).leading_zeros()
    }
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

pub fn nanoquant_bits(n: usize, m: usize, r: usize) -> f64 {
    ((r + 16) * (n + m)) as f64
}

pub fn bpw_nanoquant(n: usize, m: usize, r: usize) -> f64 {
    nanoquant_bits(n, m, r) / (n * m) as f64
}

pub fn dbf_bits(n: usize, m: usize, r: usize) -> Result<f64> {
    if r == 0 {
        return Err(Error::InvalidRank);
    }
    Ok((r * (n + m) + 16 * (n + m + r)) as f64)
}

pub fn bpw_dbf(n: usize, m: usize, r: usize) -> Result<f64> {
    Ok(dbf_bits(n, m, r)? / (n * m) as f64)
}

fn check_baseline(p: &BaselineParams, m: usize) -> Result<()> {
    let limit = MAX_SALIENT.min(m);
    if p.c > limit {
        return Err(Error::InvalidSalientCount { c: p.c, limit });
    }
    if p.k == 0 {
        return Err(Error::InvalidConfig("block size k must be positive".into()));
    }
    if let Baseline::Stbllm { n, m } = p.method {
        if n == 0 || m == 0 || n > m {
            return Err(Error::InvalidConfig(format!("invalid sparsity {n}:{m}")));
        }
    }
    Ok(())
}

/// Closed-form storage bits of one `n × m` layer.
pub fn baseline_bits(p: &BaselineParams, n: usize, m: usize) -> Result<f64> {
    check_baseline(p, m)?;
    let (nf, mf, cf) = (n as f64, m as f64, p.c as f64);
    let blocks = ceil_div(m, p.k);
    let bits = match p.method {
        Baseline::BiLlm => nf * (2.0 * mf + cf) + mf + 112.0 * nf * blocks,
        Baseline::Stbllm { n: sn, m: sm } => {
            let ratio = sn as f64 / sm as f64;
            let index_bits = ceil_log2(binomial(sm, sn)) as f64;
            2.0 * nf * cf
                + 48.0 * nf * blocks
                + ratio * (nf * (mf - cf) + 2.0 * nf * mf)
                + nf * (mf - cf) / sm as f64 * index_bits
                + 96.0 * nf * blocks
                + mf
        }
        Baseline::ArbLlmRc => nf * (2.0 * mf + cf) + 33.0 * mf + 64.0 * nf * blocks,
        Baseline::HbllmRow => 2.0 * nf * (mf + cf) + mf + 160.0 * nf * blocks,
        Baseline::HbllmCol => 2.0 * nf * mf + mf + 112.0 * nf * blocks,
    };
    Ok(bits)
}

pub fn bpw_baseline(p: &BaselineParams, n: usize, m: usize) -> Result<f64> {
    Ok(baseline_bits(p, n, m)? / (n * m) as f64)
}

/// Rank nearest to `target` bits per weight for the factorized format.
pub fn rank_for_target_bpw(n: usize, m: usize, target: f64) -> Result<usize> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::InvalidConfig(format!("target bpw {target} must be positive")));
    }
    let raw = (target * (n * m) as f64 / (n + m) as f64 - 16.0).round();
    if raw < 1.0 && bpw_nanoquant(n, m, 1) > 2.0 * target {
        return Err(Error::TargetTooSmall { target, n, m });
    }
    Ok((raw.max(1.0) as usize).min(n.min(m)))
}

/// How factorized methods pick a rank per layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum RankPolicy {
    Fixed(usize),
    TargetBpw(f64),
}

impl RankPolicy {
    pub fn rank_for(&self, n: usize, m: usize) -> Result<usize> {
        match *self {
            RankPolicy::Fixed(0) => Err(Error::InvalidRank),
            RankPolicy::Fixed(r) => Ok(r.min(n.min(m))),
            RankPolicy::TargetBpw(t) => rank_for_target_bpw(n, m, t),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BpwReport {
    /// Bits of one replica of each layer, in shape order.
    pub per_layer_bits: Vec<f64>,
    pub total_bits: f64,
    pub quantized_params: u64,
    pub bpw: f64,
    /// `(total_bits + 16·residual) / 8`, in 10⁹ bytes.
    pub bytes_decimal: f64,
    /// Same, in 2³⁰ bytes.
    pub bytes_binary: f64,
}

pub fn layer_bits(method: Method, params: Option<&BaselineParams>, policy: RankPolicy, n: usize, m: usize) -> Result<f64> {
    match method {
        Method::NanoQuant => Ok(nanoquant_bits(n, m, policy.rank_for(n, m)?)),
        Method::Dbf => dbf_bits(n, m, policy.rank_for(n, m)?),
        Method::Baseline(b) => {
            let p = params.copied().unwrap_or_else(|| BaselineParams::new(b, 0));
            baseline_bits(&BaselineParams { method: b, ..p }, n, m)
        }
    }
}

/// Aggregates per-layer bits across a model.
pub fn model_report(
    shape: &ModelShape,
    method: Method,
    params: Option<&BaselineParams>,
    policy: RankPolicy,
) -> Result<BpwReport> {
    if shape.layers.is_empty() {
        return Err(Error::InvalidConfig("model shape has no layers".into()));
    }
    let mut per_layer_bits = Vec::with_capacity(shape.layers.len());
    let mut total_bits = 0.0;
    for l in &shape.layers {
        let bits = layer_bits(method, params, policy, l.n, l.m).map_err(|e| e.in_layer(&l.name))?;
        total_bits += bits * l.count as f64;
        per_layer_bits.push(bits);
    }
    let quantized_params = shape.quantized_params();
    let bytes = (total_bits + 16.0 * shape.residual_fp16_params as f64) / 8.0;
    Ok(BpwReport {
        per_layer_bits,
        total_bits,
        quantized_params,
        bpw: total_bits / quantized_params as f64,
        bytes_decimal: bytes / 1e9,
        bytes_binary: bytes / (1u64 << 30) as f64,
    })
}

/// `(min, max)` model BPW for a baseline over `c ∈ {0, 50}`.
pub fn baseline_bounds(shape: &ModelShape, method: Baseline, k: usize) -> Result<(f64, f64)> {
    let at = |c| {
        let p = BaselineParams { method, c, k };
        model_report(shape, Method::Baseline(method), Some(&p), RankPolicy::Fixed(1)).map(|r| r.bpw)
    };
    Ok((at(0)?, at(MAX_SALIENT)?))
}

/// Full-precision size of the model at 16 bits per parameter, in bytes.
pub fn fp16_bytes(shape: &ModelShape) -> f64 {
    2.0 * (shape.quantized_params() + shape.residual_fp16_params) as f64
}

/// Round half to even at two decimals.
pub fn round2_half_even(x: f64) -> f64 {
    let y = x * 100.0;
    let floor = y.floor();
    let diff = y - floor;
    let r = if diff > 0.5 {
        floor + 1.0
    } else if diff < 0.5 {
        floor
    } else if floor % 2.0 == 0.0 {
        floor
    } else {
        floor + 1.0
    };
    r / 100.0
}

/// The column set of the comparison table.
pub fn table_methods() -> Vec<Baseline> {
    vec![
        Baseline::BiLlm,
        Baseline::Stbllm { n: 4, m: 8 },
        Baseline::Stbllm { n: 6, m: 8 },
        Baseline::Stbllm { n: 8, m: 8 },
        Baseline::ArbLlmRc,
        Baseline::HbllmRow,
    ]
}

macro_rules! shape_files {
    ($($label:literal => $file:literal),* $(,)?) => {
        const BUILTIN: &[(&str, &str, &str)] = &[
            $(($label, $file, include_str!(concat!("../shapes/", $file, ".txt")))),*
        ];
    };
}

shape_files! {
    "L2-7" => "llama-2-7b",
    "L2-13" => "llama-2-13b",
    "L2-70" => "llama-2-70b",
    "L3-1" => "llama-3.2-1b",
    "L3-3" => "llama-3.2-3b",
    "L3-8" => "llama-3.1-8b",
    "L3-70" => "llama-3.1-70b",
    "L3-405" => "llama-3.1-405b",
    "G3-1" => "gemma-3-1b",
    "G3-4" => "gemma-3-4b",
    "G3-12" => "gemma-3-12b",
    "G3-27" => "gemma-3-27b",
    "Q3-0.6" => "qwen3-0.6b",
    "Q3-1.7" => "qwen3-1.7b",
    "Q3-4" => "qwen3-4b",
    "Q3-8" => "qwen3-8b",
    "Q3-14" => "qwen3-14b",
}

/// Shipped model shapes as `(short label, file stem, shape)`.
pub fn builtin_shapes() -> Vec<(&'static str, &'static str, ModelShape)> {
    BUILTIN
        .iter()
        .map(|(label, file, text)| {
            (
                *label,
                *file,
                parse_shape_config(text).expect("shipped shape configs parse"),
            )
        })
        .collect()
}

/// Looks a shipped shape up by label (`L2-7`) or file stem (`llama-2-7b`).
pub fn builtin_shape(name: &str) -> Option<ModelShape> {
    BUILTIN
        .iter()
        .find(|(label, file, _)| label.eq_ignore_ascii_case(name) || file.eq_ignore_ascii_case(name))
        .map(|(_, _, text)| parse_shape_config(text).expect("shipped shape configs parse"))
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub nanoquant_bpw: f64,
    pub nanoquant_bytes_decimal: f64,
    pub nanoquant_bytes_binary: f64,
    pub fp16_bytes: f64,
    /// `(method, (bpw min, bpw max), (decimal bytes min, max), (binary bytes min, max))`.
    pub baselines: Vec<(Baseline, (f64, f64), (f64, f64), (f64, f64))>,
}

/// Bounds for every table method, with the factorized format at 1-bit ranks.
pub fn table_row(model: &str, shape: &ModelShape, k: usize) -> Result<TableRow> {
    let nq = model_report(shape, Method::NanoQuant, None, RankPolicy::TargetBpw(1.0))?;
    let mut baselines = Vec::new();
    for b in table_methods() {
        let report = |c| {
            let p = BaselineParams { method: b, c, k };
            model_report(shape, Method::Baseline(b), Some(&p), RankPolicy::Fixed(1))
        };
        let (lo, hi) = (report(0)?, report(MAX_SALIENT)?);
        baselines.push((
            b,
            (lo.bpw, hi.bpw),
            (lo.bytes_decimal, hi.bytes_decimal),
            (lo.bytes_binary, hi.bytes_binary),
        ));
    }
    Ok(TableRow {
        model: model.to_string(),
        nanoquant_bpw: nq.bpw,
        nanoquant_bytes_decimal: nq.bytes_decimal,
        nanoquant_bytes_binary: nq.bytes_binary,
        fp16_bytes: fp16_bytes(shape),
        baselines,
    })
}
