//! Sign binarization, 32-bit LSB-first bit packing and packed matrix products.
//!
//! Bit `b` of word `w` in a row holds column `32·w + b`; a set bit is `+1`, a clear
//! bit is `−1`, and padding past the last column is always zero.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

pub const WORD_BITS: usize = 32;

#[inline]
pub fn words_per_row(cols: usize) -> usize {
    cols.div_ceil(WORD_BITS)
}

#[inline]
fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Entrywise sign with `sign(0) = +1`.
pub fn binarize(latent: &DenseMatrix) -> Result<DenseMatrix> {
    if !latent.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    Ok(latent.map(sign))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedBitMatrix {
    rows: usize,
    cols: usize,
    words: Vec<u32>,
}

impl PackedBitMatrix {
    /// Wraps raw words, rejecting wrong lengths and set padding bits.
    pub fn from_words(rows: usize, cols: usize, words: Vec<u32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::dims(format!("empty packed shape {rows}x{cols}")));
        }
        let wpr = words_per_row(cols);
        if words.len() != rows * wpr {
            return Err(Error::dims(format!(
                "{} words for {rows}x{cols} (need {})",
                words.len(),
                rows * wpr
            )));
        }
        let m = Self { rows, cols, words };
        m.check_padding()?;
        Ok(m)
    }

    fn check_padding(&self) -> Result<()> {
        let tail = self.cols % WORD_BITS;
        if tail == 0 {
            return Ok(());
        }
        let mask = !((1u32 << tail) - 1);
        let wpr = words_per_row(self.cols);
        for row in 0..self.rows {
            if self.words[row * wpr + wpr - 1] & mask != 0 {
                return Err(Error::CorruptPadding { row });
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    pub fn row_words(&self, row: usize) -> &[u32] {
        let wpr = words_per_row(self.cols);
        &self.words[row * wpr..(row + 1) * wpr]
    }

    /// `+1` or `−1` at `(row, col)`.
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        let w = self.row_words(row)[col / WORD_BITS];
        if (w >> (col % WORD_BITS)) & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    }
}

pub fn pack_signs(signs: &DenseMatrix) -> Result<PackedBitMatrix> {
    let (rows, cols) = signs.shape();
    let wpr = words_per_row(cols);
    let mut words = vec![0u32; rows * wpr];
    for i in 0..rows {
        for (j, &v) in signs.row(i).iter().enumerate() {
            if v == 1.0 {
                words[i * wpr + j / WORD_BITS] |= 1 << (j % WORD_BITS);
            } else if v != -1.0 {
                return Err(Error::NonBinaryEntry { row: i, col: j });
            }
        }
    }
    Ok(PackedBitMatrix { rows, cols, words })
}

pub fn unpack_signs(packed: &PackedBitMatrix) -> Result<DenseMatrix> {
    packed.check_padding()?;
    Ok(DenseMatrix::from_fn(packed.rows, packed.cols, |i, j| {
        packed.get(i, j)
    }))
}

/// `Ŵ = diag(s1) · U±1 · V±1ᵀ · diag(s2)` in packed form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorizedLayer {
    pub u: PackedBitMatrix,
    pub v: PackedBitMatrix,
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
}

impl FactorizedLayer {
    pub fn new(u: PackedBitMatrix, v: PackedBitMatrix, s1: Vec<f64>, s2: Vec<f64>) -> Result<Self> {
        if u.cols != v.cols {
            return Err(Error::dims(format!("ranks differ: {} vs {}", u.cols, v.cols)));
        }
        if s1.len() != u.rows || s2.len() != v.rows {
            return Err(Error::dims(format!(
                "scales {}/{} for a {}x{} layer",
                s1.len(),
                s2.len(),
                u.rows,
                v.rows
            )));
        }
        if s1.iter().chain(&s2).any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidConfig("scales must be finite and positive".into()));
        }
        Ok(Self { u, v, s1, s2 })
    }

    /// Binarizes and packs real latents.
    pub fn from_latents(
        latent_u: &DenseMatrix,
        latent_v: &DenseMatrix,
        s1: Vec<f64>,
        s2: Vec<f64>,
    ) -> Result<Self> {
        Self::new(
            pack_signs(&binarize(latent_u)?)?,
            pack_signs(&binarize(latent_v)?)?,
            s1,
            s2,
        )
    }

    pub fn n(&self) -> usize {
        self.u.rows
    }

    pub fn m(&self) -> usize {
        self.v.rows
    }

    pub fn rank(&self) -> usize {
        self.u.cols
    }

    /// Stored bits at 1 bit per sign and 16 bits per scale: `r(n+m) + 16(n+m)`.
    pub fn payload_bits(&self) -> u64 {
        let nm = (self.n() + self.m()) as u64;
        self.rank() as u64 * nm + 16 * nm
    }
}

pub fn reconstruct_dense(layer: &FactorizedLayer) -> DenseMatrix {
    let u = unpack_signs(&layer.u).expect("validated layer");
    let v = unpack_signs(&layer.v).expect("validated layer");
    let core = u.matmul_tr(&v).expect("validated layer");
    core.scale_rows(&layer.s1)
        .and_then(|m| m.scale_cols(&layer.s2))
        .expect("validated layer")
}

/// Adds `+a` or `−a` to each `acc[k]` according to the bits of one packed row.
#[inline]
fn signed_accumulate(words: &[u32], rank: usize, a: f64, acc: &mut [f64]) {
    for (w_idx, &word) in words.iter().enumerate() {
        let base = w_idx * WORD_BITS;
        let span = (rank - base).min(WORD_BITS);
        for b in 0..span {
            if (word >> b) & 1 == 1 {
                acc[base + b] += a;
            } else {
                acc[base + b] -= a;
            }
        }
    }
}

#[inline]
fn signed_dot(words: &[u32], t: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (w_idx, &word) in words.iter().enumerate() {
        let base = w_idx * WORD_BITS;
        let span = (t.len() - base).min(WORD_BITS);
        for b in 0..span {
            if (word >> b) & 1 == 1 {
                acc += t[base + b];
            } else {
                acc -= t[base + b];
            }
        }
    }
    acc
}

/// Two-stage product `y = s1 ⊙ (U±1 · (V±1ᵀ · (s2 ⊙ x)))` with 64-bit accumulation.
pub fn gemv_packed(layer: &FactorizedLayer, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != layer.m() {
        return Err(Error::dims(format!(
            "input of {} for a layer with m = {}",
            x.len(),
            layer.m()
        )));
    }
    let r = layer.rank();
    let mut t = vec![0.0; r];
    for (j, &xj) in x.iter().enumerate() {
        signed_accumulate(layer.v.row_words(j), r, layer.s2[j] * xj, &mut t);
    }
    Ok((0..layer.n())
        .map(|i| layer.s1[i] * signed_dot(layer.u.row_words(i), &t))
        .collect())
}

/// Same two-stage product carried out entirely in 32-bit floats.
pub fn gemv_packed_f32(layer: &FactorizedLayer, x: &[f32]) -> Result<Vec<f32>> {
    if x.len() != layer.m() {
        return Err(Error::dims(format!(
            "input of {} for a layer with m = {}",
            x.len(),
            layer.m()
        )));
    }
    let r = layer.rank();
    let mut t = vec![0.0f32; r];
    for (j, &xj) in x.iter().enumerate() {
        let a = layer.s2[j] as f32 * xj;
        for (w_idx, &word) in layer.v.row_words(j).iter().enumerate() {
            let base = w_idx * WORD_BITS;
            for b in 0..(r - base).min(WORD_BITS) {
                if (word >> b) & 1 == 1 {
                    t[base + b] += a;
                } else {
                    t[base + b] -= a;
                }
            }
        }
    }
    Ok((0..layer.n())
        .map(|i| {
            let mut acc = 0.0f32;
            for (w_idx, &word) in layer.u.row_words(i).iter().enumerate() {
                let base = w_idx * WORD_BITS;
                for b in 0..(r - base).min(WORD_BITS) {
                    if (word >> b) & 1 == 1 {
                        acc += t[base + b];
                    } else {
                        acc -= t[base + b];
                    }
                }
            }
            layer.s1[i] as f32 * acc
        })
        .collect())
}

const GEMM_COL_BLOCK: usize = 8;

/// Batched product over the columns of `x` (`m × b`), blocked over column tiles.
///
/// Each tile unpacks every packed word once for all of its columns. Per column the
/// accumulation order matches [`gemv_packed`], so results are bit-identical to it.
pub fn gemm_packed(layer: &FactorizedLayer, x: &DenseMatrix) -> Result<DenseMatrix> {
    if x.rows() != layer.m() {
        return Err(Error::dims(format!(
            "batch has {} rows for a layer with m = {}",
            x.rows(),
            layer.m()
        )));
    }
    let (n, r, b) = (layer.n(), layer.rank(), x.cols());
    let tiles: Vec<(usize, Vec<f64>)> = (0..b)
        .step_by(GEMM_COL_BLOCK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|c0| {
            let w = (b - c0).min(GEMM_COL_BLOCK);
            // t is r × w, row-major
            let mut t = vec![0.0; r * w];
            let mut a = [0.0; GEMM_COL_BLOCK];
            for j in 0..layer.m() {
                let xr = &x.row(j)[c0..c0 + w];
                for c in 0..w {
                    a[c] = layer.s2[j] * xr[c];
                }
                for (w_idx, &word) in layer.v.row_words(j).iter().enumerate() {
                    let base = w_idx * WORD_BITS;
                    for bit in 0..(r - base).min(WORD_BITS) {
                        let trow = &mut t[(base + bit) * w..(base + bit + 1) * w];
                        if (word >> bit) & 1 == 1 {
                            for c in 0..w {
                                trow[c] += a[c];
                            }
                        } else {
                            for c in 0..w {
                                trow[c] -= a[c];
                            }
                        }
                    }
                }
            }
            let mut y = vec![0.0; n * w];
            for i in 0..n {
                let mut acc = [0.0; GEMM_COL_BLOCK];
                for (w_idx, &word) in layer.u.row_words(i).iter().enumerate() {
                    let base = w_idx * WORD_BITS;
                    for bit in 0..(r - base).min(WORD_BITS) {
                        let trow = &t[(base + bit) * w..(base + bit + 1) * w];
                        if (word >> bit) & 1 == 1 {
                            for c in 0..w {
                                acc[c] += trow[c];
                            }
                        } else {
                            for c in 0..w {
                                acc[c] -= trow[c];
                            }
                        }
                    }
                }
                for c in 0..w {
                    y[i * w + c] = layer.s1[i] * acc[c];
                }
            }
            (c0, y)
        })
        .collect();
    let mut out = DenseMatrix::zeros(n, b);
    for (c0, y) in tiles {
        let w = (b - c0).min(GEMM_COL_BLOCK);
        for i in 0..n {
            out.row_mut(i)[c0..c0 + w].copy_from_slice(&y[i * w..(i + 1) * w]);
        }
    }
    Ok(out)
}
