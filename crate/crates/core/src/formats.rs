//! On-disk formats: `NQMX` dense matrices, `NQPK` packed models and shape configs.
//!
//! All integers are little-endian `u32`.

use half::f16;
use serde::{Deserialize, Serialize};

use crate::bpw::{LayerShape, ModelShape};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::packing::{words_per_row, FactorizedLayer, PackedBitMatrix};

pub const NQMX_MAGIC: &[u8; 4] = b"NQMX";
pub const NQPK_MAGIC: &[u8; 4] = b"NQPK";
pub const FORMAT_VERSION: u32 = 1;

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < len {
            return Err(fmt_err(format!(
                "truncated {what}: need {len} bytes at offset {}, have {}",
                self.pos,
                self.remaining()
            )));
        }
        let out = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(fmt_err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(fmt_err(format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(fmt_err(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| fmt_err(format!("{what} {v} does not fit in u32")))
}

/// Serializes a matrix as `NQMX` with 32-bit float payload.
pub fn write_nqmx(m: &DenseMatrix) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * m.as_slice().len());
    out.extend_from_slice(NQMX_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, dim_u32(m.rows(), "rows")?);
    put_u32(&mut out, dim_u32(m.cols(), "cols")?);
    for &v in m.as_slice() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn read_nqmx(bytes: &[u8]) -> Result<DenseMatrix> {
    let mut r = Reader::new(bytes);
    r.header(NQMX_MAGIC)?;
    let rows = r.u32("rows")? as usize;
    let cols = r.u32("cols")? as usize;
    if rows == 0 || cols == 0 {
        return Err(fmt_err(format!("empty matrix {rows}x{cols}")));
    }
    let len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fmt_err("matrix size overflows"))?;
    if r.remaining() != len {
        return Err(fmt_err(format!(
            "payload is {} bytes, {rows}x{cols} needs {len}",
            r.remaining()
        )));
    }
    let data = r
        .take(len, "payload")?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    r.finish()?;
    DenseMatrix::from_vec(rows, cols, data)
}

/// A named sequence of packed layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackedModel {
    pub layers: Vec<(String, FactorizedLayer)>,
}

impl PackedModel {
    /// Literal payload bits: one per sign plus 16 per scale.
    pub fn payload_bits(&self) -> u64 {
        self.layers.iter().map(|(_, l)| l.payload_bits()).sum()
    }

    pub fn weight_count(&self) -> u64 {
        self.layers
            .iter()
            .map(|(_, l)| (l.n() * l.m()) as u64)
            .sum()
    }
}

/// Rounds a positive scale to binary16, keeping it representable and positive.
pub fn scale_to_f16(s: f64) -> Result<f16> {
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::InvalidConfig(format!("scale {s} is not positive and finite")));
    }
    if s > f16::MAX.to_f64() {
        return Err(fmt_err(format!("scale {s} exceeds the binary16 range")));
    }
    let h = f16::from_f64(s);
    Ok(if h.to_f64() > 0.0 {
        h
    } else {
        f16::from_bits(1)
    })
}

pub fn write_nqpk(model: &PackedModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(NQPK_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, dim_u32(model.layers.len(), "layer count")?);
    for (name, layer) in &model.layers {
        put_u32(&mut out, dim_u32(name.len(), "name length")?);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, dim_u32(layer.n(), "n")?);
        put_u32(&mut out, dim_u32(layer.m(), "m")?);
        put_u32(&mut out, dim_u32(layer.rank(), "r")?);
        for w in layer.u.words().iter().chain(layer.v.words()) {
            put_u32(&mut out, *w);
        }
        for &s in layer.s1.iter().chain(&layer.s2) {
            out.extend_from_slice(&scale_to_f16(s)?.to_bits().to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_nqpk(bytes: &[u8]) -> Result<PackedModel> {
    let mut r = Reader::new(bytes);
    r.header(NQPK_MAGIC)?;
    let count = r.u32("layer count")? as usize;
    let mut layers = Vec::new();
    for idx in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "layer name")?)
            .map_err(|_| fmt_err(format!("layer {idx} name is not UTF-8")))?
            .to_string();
        let n = r.u32("n")? as usize;
        let m = r.u32("m")? as usize;
        let rank = r.u32("r")? as usize;
        if n == 0 || m == 0 || rank == 0 {
            return Err(fmt_err(format!("layer `{name}` has a zero dimension")));
        }
        let wpr = words_per_row(rank);
        let word_bytes = n
            .checked_add(m)
            .and_then(|rows| rows.checked_mul(wpr))
            .and_then(|w| w.checked_mul(4))
            .ok_or_else(|| fmt_err("layer size overflows"))?;
        let scale_bytes = (n + m) * 2;
        if r.remaining() < word_bytes.saturating_add(scale_bytes) {
            return Err(fmt_err(format!("truncated payload for layer `{name}`")));
        }
        let mut words = |rows: usize| -> Result<Vec<u32>> {
            (0..rows * wpr).map(|_| r.u32("sign words")).collect()
        };
        let u_words = words(n)?;
        let v_words = words(m)?;
        let u = PackedBitMatrix::from_words(n, rank, u_words).map_err(|e| e.in_layer(&name))?;
        let v = PackedBitMatrix::from_words(m, rank, v_words).map_err(|e| e.in_layer(&name))?;
        let mut scales = |len: usize| -> Result<Vec<f64>> {
            (0..len)
                .map(|_| {
                    let s = f16::from_bits(r.u16("scale")?).to_f64();
                    if s.is_finite() && s > 0.0 {
                        Ok(s)
                    } else {
                        Err(fmt_err(format!("layer `{name}` has a non-positive scale")))
                    }
                })
                .collect()
        };
        let s1 = scales(n)?;
        let s2 = scales(m)?;
        layers.push((name.clone(), FactorizedLayer::new(u, v, s1, s2).map_err(|e| e.in_layer(&name))?));
    }
    r.finish()?;
    Ok(PackedModel { layers })
}

/// Parses `name n m count` records, `residual <count>` and `#` comments.
pub fn parse_shape_config(text: &str) -> Result<ModelShape> {
    let mut layers = Vec::new();
    let mut residual = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str, what: &str| -> Result<u64> {
            s.parse::<u64>()
                .map_err(|_| fmt_err(format!("line {line_no}: bad {what} `{s}`")))
        };
        match fields.as_slice() {
            ["residual", count] => {
                if residual.is_some() {
                    return Err(fmt_err(format!("line {line_no}: duplicate residual")));
                }
                residual = Some(num(count, "residual count")?);
            }
            [name, n, m, count] => {
                let (n, m, count) = (num(n, "n")?, num(m, "m")?, num(count, "count")?);
                if n == 0 || m == 0 || count == 0 {
                    return Err(fmt_err(format!("line {line_no}: dimensions must be positive")));
                }
                let to_usize = |v: u64| {
                    usize::try_from(v)
                        .ok()
                        .filter(|v| *v <= u32::MAX as usize)
                        .ok_or_else(|| fmt_err(format!("line {line_no}: value {v} too large")))
                };
                layers.push(LayerShape {
                    name: name.to_string(),
                    n: to_usize(n)?,
                    m: to_usize(m)?,
                    count: to_usize(count)?,
                });
            }
            _ => {
                return Err(fmt_err(format!(
                    "line {line_no}: expected `name n m count` or `residual count`"
                )))
            }
        }
    }
    if layers.is_empty() {
        return Err(fmt_err("shape config has no layers"));
    }
    Ok(ModelShape {
        layers,
        residual_fp16_params: residual.unwrap_or(0),
    })
}

pub fn write_shape_config(shape: &ModelShape) -> String {
    let mut out = String::new();
    for l in &shape.layers {
        out.push_str(&format!("{} {} {} {}\n", l.name, l.n, l.m, l.count));
    }
    out.push_str(&format!("residual {}\n", shape.residual_fp16_params));
    out
}
