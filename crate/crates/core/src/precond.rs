//! Robust diagonal preconditioners from calibration statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

pub const DEFAULT_GAMMA: f64 = 0.2;
pub const DEFAULT_PERCENTILE: f64 = 0.99;
pub const DEFAULT_EPS_FLOOR: f64 = 1e-8;

/// Running per-channel second moments plus the cumulative clipping threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub sum_squares: Vec<f64>,
    pub sample_count: u64,
    pub tau: f64,
}

impl ChannelStats {
    pub fn new(channel_count: usize) -> Self {
        Self {
            sum_squares: vec![0.0; channel_count],
            sample_count: 0,
            tau: 0.0,
        }
    }

    pub fn channel_count(&self) -> usize {
        self.sum_squares.len()
    }

    /// Folds a `samples × channels` batch in. `tau` becomes the max of its old value and
    /// the `percentile` quantile of this batch's per-channel RMS.
    pub fn accumulate(&mut self, batch: &DenseMatrix, percentile: f64) -> Result<()> {
        if batch.cols() != self.channel_count() {
            return Err(Error::dims(format!(
                "batch has {} channels, stats track {}",
                batch.cols(),
                self.channel_count()
            )));
        }
        if !(percentile > 0.0 && percentile < 1.0) {
            return Err(Error::InvalidConfig(format!("percentile {percentile} not in (0,1)")));
        }
        if !batch.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        let mut batch_sq = vec![0.0; self.channel_count()];
        for i in 0..batch.rows() {
            for (s, v) in batch_sq.iter_mut().zip(batch.row(i)) {
                *s += v * v;
            }
        }
        let rows = batch.rows() as f64;
        let mut rms: Vec<f64> = batch_sq.iter().map(|s| (s / rows).sqrt()).collect();
        self.tau = self.tau.max(quantile(&mut rms, percentile));
        for (a, b) in self.sum_squares.iter_mut().zip(&batch_sq) {
            *a += b;
        }
        self.sample_count += batch.rows() as u64;
        Ok(())
    }

    /// Associative merge: sums add, `tau` takes the max.
    pub fn merge(&mut self, other: &ChannelStats) -> Result<()> {
        if other.channel_count() != self.channel_count() {
            return Err(Error::dims("merging stats of different widths"));
        }
        for (a, b) in self.sum_squares.iter_mut().zip(&other.sum_squares) {
            *a += b;
        }
        self.sample_count += other.sample_count;
        self.tau = self.tau.max(other.tau);
        Ok(())
    }

    /// Per-channel RMS clipped at `tau`.
    pub fn clipped_rms(&self) -> Result<Vec<f64>> {
        if self.sample_count == 0 {
            return Err(Error::EmptyStats);
        }
        let count = self.sample_count as f64;
        Ok(self
            .sum_squares
            .iter()
            .map(|s| (s / count).sqrt().min(self.tau))
            .collect())
    }
}

/// Linear-interpolation quantile (the `(k-1)·p` position rule). Sorts `values`.
pub fn quantile(values: &mut [f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let pos = p * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preconditioner {
    pub diag_in: Vec<f64>,
    pub diag_out: Vec<f64>,
    pub gamma: f64,
    pub tau_max: f64,
}

impl Preconditioner {
    pub fn identity(rows: usize, cols: usize) -> Self {
        Self {
            diag_in: vec![1.0; cols],
            diag_out: vec![1.0; rows],
            gamma: 0.0,
            tau_max: 1.0,
        }
    }

    /// `diag_out_i · W_ij · diag_in_j`.
    pub fn apply(&self, w: &DenseMatrix) -> Result<DenseMatrix> {
        self.check(w)?;
        w.scale_rows(&self.diag_out)?.scale_cols(&self.diag_in)
    }

    /// Inverse of [`apply`](Self::apply).
    pub fn remove(&self, w: &DenseMatrix) -> Result<DenseMatrix> {
        self.check(w)?;
        let inv_out: Vec<f64> = self.diag_out.iter().map(|d| 1.0 / d).collect();
        let inv_in: Vec<f64> = self.diag_in.iter().map(|d| 1.0 / d).collect();
        w.scale_rows(&inv_out)?.scale_cols(&inv_in)
    }

    fn check(&self, w: &DenseMatrix) -> Result<()> {
        if w.rows() != self.diag_out.len() || w.cols() != self.diag_in.len() {
            return Err(Error::dims(format!(
                "weight {}x{} vs preconditioner {}x{}",
                w.rows(),
                w.cols(),
                self.diag_out.len(),
                self.diag_in.len()
            )));
        }
        Ok(())
    }
}

/// `W̃ = D̃_out · W · D̃_in`.
pub fn precondition_weight(w: &DenseMatrix, p: &Preconditioner) -> Result<DenseMatrix> {
    p.apply(w)
}

/// Clip at tau, shrink toward the mean by `gamma`, then floor at `eps_floor`.
pub fn shrink_diagonal(raw: &[f64], gamma: f64, eps_floor: f64) -> Vec<f64> {
    let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
    raw.iter()
        .map(|d| ((1.0 - gamma) * d + gamma * mean).max(eps_floor))
        .collect()
}

/// Builds `D̃_in` from input statistics and `D̃_out` from output-gradient statistics,
/// or the identity when none are given.
pub fn build_preconditioner(
    in_stats: &ChannelStats,
    out_stats: Option<&ChannelStats>,
    gamma: f64,
    eps_floor: f64,
) -> Result<Preconditioner> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidConfig(format!("gamma {gamma} not in [0,1]")));
    }
    if !(eps_floor > 0.0) {
        return Err(Error::InvalidConfig("eps_floor must be positive".into()));
    }
    let diag_in = shrink_diagonal(&in_stats.clipped_rms()?, gamma, eps_floor);
    let (diag_out, tau_out) = match out_stats {
        Some(s) => (shrink_diagonal(&s.clipped_rms()?, gamma, eps_floor), s.tau),
        None => (Vec::new(), 1.0),
    };
    let tau_max = in_stats.tau.max(tau_out).max(eps_floor);
    Ok(Preconditioner {
        diag_in,
        diag_out,
        gamma,
        tau_max,
    })
}

/// Like [`build_preconditioner`] but fills an identity `D̃_out` of the given length.
pub fn build_for_layer(
    in_stats: &ChannelStats,
    out_stats: Option<&ChannelStats>,
    rows: usize,
    gamma: f64,
    eps_floor: f64,
) -> Result<Preconditioner> {
    let mut p = build_preconditioner(in_stats, out_stats, gamma, eps_floor)?;
    if out_stats.is_none() {
        p.diag_out = vec![1.0; rows];
    } else if p.diag_out.len() != rows {
        return Err(Error::dims("output stats width does not match layer rows"));
    }
    Ok(p)
}
