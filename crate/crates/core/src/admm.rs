//! Latent binary ADMM: ridge-regularized alternating solves with SVID proximal steps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    cholesky_solve, spectral_norm_estimate, top_singular_pair, top_singular_triples, DenseMatrix,
};

/// Where the proximal (SVID) step sits inside one sweep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateOrder {
    /// `Z ← SVID(X+L)`, U-solve, V-solve, dual ascent.
    #[default]
    ProxyFirst,
    /// U-solve, V-solve, `Z ← SVID(X+L)`, dual ascent.
    ProxyLast,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmmConfig {
    pub rank: usize,
    pub max_iters: usize,
    pub rho_start: f64,
    pub rho_end: f64,
    pub ridge: f64,
    pub tol: f64,
    pub seed: u64,
    /// Rescale the fixed factor to unit Frobenius norm before each solve.
    pub normalize_factors: bool,
    pub order: UpdateOrder,
}

impl AdmmConfig {
    /// Defaults scaled to the target: `rho_start = 1e-2·mean(W²)`, `rho_end = 100·rho_start`.
    pub fn for_target(target: &DenseMatrix, rank: usize) -> Self {
        let ms = target.frobenius_norm_sq() / (target.rows() * target.cols()) as f64;
        let rho_start = if ms > 0.0 { 1e-2 * ms } else { 1e-2 };
        Self {
            rank,
            max_iters: 400,
            rho_start,
            rho_end: 100.0 * rho_start,
            ridge: 1e-4,
            tol: 1e-4,
            seed: 0,
            normalize_factors: true,
            order: UpdateOrder::ProxyFirst,
        }
    }

    /// Constant penalty, no normalization: the plain iteration with a descent guarantee.
    pub fn fixed_rho(rank: usize, rho: f64, max_iters: usize) -> Self {
        Self {
            rank,
            max_iters,
            rho_start: rho,
            rho_end: rho,
            ridge: 1e-4,
            tol: 1e-12,
            seed: 0,
            normalize_factors: false,
            order: UpdateOrder::ProxyFirst,
        }
    }

    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidRank);
        }
        if self.rank > rows.min(cols) {
            return Err(Error::RankTooLarge {
                rank: self.rank,
                max: rows.min(cols),
            });
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be positive".into()));
        }
        if !(self.rho_start > 0.0 && self.rho_end >= self.rho_start && self.rho_end.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < rho_start <= rho_end, got {} and {}",
                self.rho_start, self.rho_end
            )));
        }
        if !(self.ridge >= 0.0) || !(self.tol > 0.0) {
            return Err(Error::InvalidConfig("ridge must be >= 0 and tol > 0".into()));
        }
        Ok(())
    }

    /// Linear interpolation `rho_start → rho_end` across `max_iters` steps.
    pub fn rho_at(&self, k: usize) -> f64 {
        if self.max_iters <= 1 {
            return self.rho_start;
        }
        let t = k as f64 / (self.max_iters - 1) as f64;
        self.rho_start + (self.rho_end - self.rho_start) * t
    }
}

/// Solver state. Duals are stored scaled, `L = Y/ρ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmmState {
    pub u: DenseMatrix,
    pub v: DenseMatrix,
    pub z_u: DenseMatrix,
    pub z_v: DenseMatrix,
    pub l_u: DenseMatrix,
    pub l_v: DenseMatrix,
    pub rho: f64,
    pub iteration: usize,
    pub lagrangian_trace: Vec<f64>,
    pub primal_residual: f64,
    pub converged: bool,
}

impl AdmmState {
    /// Consensus variables `(U + L_U, V + L_V)`.
    pub fn consensus(&self) -> (DenseMatrix, DenseMatrix) {
        let mut pu = self.u.clone();
        pu.axpy(1.0, &self.l_u).expect("state shapes");
        let mut pv = self.v.clone();
        pv.axpy(1.0, &self.l_v).expect("state shapes");
        (pu, pv)
    }

    fn residual(&self) -> f64 {
        rel_gap(&self.u, &self.z_u).max(rel_gap(&self.v, &self.z_v))
    }
}

fn rel_gap(x: &DenseMatrix, z: &DenseMatrix) -> f64 {
    let nx = x.frobenius_norm();
    let d = x.sub(z).expect("state shapes").frobenius_norm();
    if nx == 0.0 {
        d
    } else {
        d / nx
    }
}

/// Sign-value independent decomposition: `sign(P) ⊙ (a·bᵀ)` with `(a, b)` the
/// square-root-split dominant pair of `|P|`.
pub fn svid(p: &DenseMatrix) -> Result<DenseMatrix> {
    if !p.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    let abs = p.map(f64::abs);
    let pair = top_singular_pair(&abs, 1000, 1e-15)?;
    let root = pair.sigma.sqrt();
    Ok(DenseMatrix::from_fn(p.rows(), p.cols(), |i, j| {
        let mag = (root * pair.left[i].abs()) * (root * pair.right[j].abs());
        if p[(i, j)] >= 0.0 {
            mag
        } else {
            -mag
        }
    }))
}

/// Minimizer of `½‖target − X·fixedᵀ‖² + λ/2‖X‖² + ρ/2‖X − Z + L‖²` over `X`.
///
/// Solves `(fixedᵀfixed + (ρ+λ)I)·Xᵀ = fixedᵀ·targetᵀ + ρ(Z−L)ᵀ`.
pub fn admm_factor_solve(
    target: &DenseMatrix,
    fixed: &DenseMatrix,
    z: &DenseMatrix,
    l: &DenseMatrix,
    rho: f64,
    ridge: f64,
) -> Result<DenseMatrix> {
    let r = fixed.cols();
    if target.cols() != fixed.rows() {
        return Err(Error::dims(format!(
            "target has {} cols, fixed factor has {} rows",
            target.cols(),
            fixed.rows()
        )));
    }
    if z.shape() != (target.rows(), r) || l.shape() != (target.rows(), r) {
        return Err(Error::dims("proxy/dual shape does not match the solved factor"));
    }
    let mut gram = fixed.tr_matmul(fixed)?;
    for k in 0..r {
        gram[(k, k)] += rho + ridge;
    }
    // rhs = (target·fixed + ρ(Z−L))ᵀ
    let mut rhs = target.matmul(fixed)?;
    rhs.axpy(rho, z)?;
    rhs.axpy(-rho, l)?;
    Ok(cholesky_solve(&gram, &rhs.transpose())?.transpose())
}

/// `½‖W − UVᵀ‖² + λ/2(‖U‖²+‖V‖²) + Σ_X [ρ⟨L_X, X−Z_X⟩ + ρ/2‖X−Z_X‖²]`.
pub fn augmented_lagrangian(state: &AdmmState, target: &DenseMatrix, ridge: f64) -> Result<f64> {
    let fit = target.sub(&state.u.matmul_tr(&state.v)?)?.frobenius_norm_sq();
    let reg = state.u.frobenius_norm_sq() + state.v.frobenius_norm_sq();
    let mut total = 0.5 * fit + 0.5 * ridge * reg;
    for (x, z, l) in [
        (&state.u, &state.z_u, &state.l_u),
        (&state.v, &state.z_v, &state.l_v),
    ] {
        let gap = x.sub(z)?;
        total += state.rho * l.inner(&gap) + 0.5 * state.rho * gap.frobenius_norm_sq();
    }
    Ok(total)
}

/// Balanced top-`r` SVD split `U = U_r Σ^½`, `V = V_r Σ^½`.
pub fn balanced_svd_init(
    target: &DenseMatrix,
    rank: usize,
    seed: u64,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts: Vec<Vec<f64>> = (0..rank)
        .map(|_| {
            (0..target.cols())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        })
        .collect();
    let (sigmas, left, right) = top_singular_triples(target, rank, &starts, 1000, 1e-12)?;
    let roots: Vec<f64> = sigmas.iter().map(|s| s.sqrt()).collect();
    Ok((left.scale_cols(&roots)?, right.scale_cols(&roots)?))
}

/// `‖U₀ᵀU₀‖₂ + ‖V₀ᵀV₀‖₂` at the balanced initialization.
pub fn lipschitz_estimate(target: &DenseMatrix, rank: usize, seed: u64) -> Result<f64> {
    let (u, v) = balanced_svd_init(target, rank, seed)?;
    Ok(spectral_norm_estimate(&u.tr_matmul(&u)?) + spectral_norm_estimate(&v.tr_matmul(&v)?))
}

/// Output of [`admm_factorize`].
#[derive(Clone, Debug)]
pub struct AdmmOutput {
    pub state: AdmmState,
    pub p_u: DenseMatrix,
    pub p_v: DenseMatrix,
}

/// Runs the solver on `target ≈ U·Vᵀ` and returns the final state plus consensus pair.
pub fn admm_factorize(target: &DenseMatrix, config: &AdmmConfig) -> Result<AdmmOutput> {
    config.validate(target.rows(), target.cols())?;
    if !target.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    if target.max_abs() == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    let (u, v) = balanced_svd_init(target, config.rank, config.seed)?;
    let mut state = AdmmState {
        z_u: svid(&u)?,
        z_v: svid(&v)?,
        l_u: DenseMatrix::zeros(u.rows(), u.cols()),
        l_v: DenseMatrix::zeros(v.rows(), v.cols()),
        u,
        v,
        rho: config.rho_at(0),
        iteration: 0,
        lagrangian_trace: Vec::new(),
        primal_residual: 0.0,
        converged: false,
    };
    state.primal_residual = state.residual();
    state
        .lagrangian_trace
        .push(augmented_lagrangian(&state, target, config.ridge)?);
    let target_t = target.transpose();

    for k in 0..config.max_iters {
        if state.primal_residual < config.tol {
            state.converged = true;
            break;
        }
        let rho = config.rho_at(k);
        if rho != state.rho {
            let ratio = state.rho / rho;
            state.l_u.scale_in_place(ratio);
            state.l_v.scale_in_place(ratio);
            state.rho = rho;
        }
        if config.order == UpdateOrder::ProxyFirst {
            update_proxies(&mut state)?;
        }
        if config.normalize_factors {
            normalize_into(&mut state, Side::V);
        }
        state.u = admm_factor_solve(target, &state.v, &state.z_u, &state.l_u, rho, config.ridge)?;
        if config.normalize_factors {
            normalize_into(&mut state, Side::U);
        }
        state.v =
            admm_factor_solve(&target_t, &state.u, &state.z_v, &state.l_v, rho, config.ridge)?;
        if config.order == UpdateOrder::ProxyLast {
            update_proxies(&mut state)?;
        }
        state.l_u.axpy(1.0, &state.u)?;
        state.l_u.axpy(-1.0, &state.z_u)?;
        state.l_v.axpy(1.0, &state.v)?;
        state.l_v.axpy(-1.0, &state.z_v)?;

        state.iteration += 1;
        state.primal_residual = state.residual();
        let value = augmented_lagrangian(&state, target, config.ridge)?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                iteration: state.iteration,
            });
        }
        state.lagrangian_trace.push(value);
    }
    if state.primal_residual < config.tol {
        state.converged = true;
    }
    let (p_u, p_v) = state.consensus();
    Ok(AdmmOutput { state, p_u, p_v })
}

fn update_proxies(state: &mut AdmmState) -> Result<()> {
    let mut pu = state.u.clone();
    pu.axpy(1.0, &state.l_u)?;
    let mut pv = state.v.clone();
    pv.axpy(1.0, &state.l_v)?;
    state.z_u = svid(&pu)?;
    state.z_v = svid(&pv)?;
    Ok(())
}

enum Side {
    U,
    V,
}

/// Scales one factor (with its proxy and dual) to unit norm and folds the scale
/// into the other, leaving `U·Vᵀ` unchanged.
fn normalize_into(state: &mut AdmmState, side: Side) {
    let norm = match side {
        Side::U => state.u.frobenius_norm(),
        Side::V => state.v.frobenius_norm(),
    };
    if !(norm > 0.0) || !norm.is_finite() {
        return;
    }
    let (down, up) = match side {
        Side::U => (1.0 / norm, norm),
        Side::V => (norm, 1.0 / norm),
    };
    for m in [&mut state.u, &mut state.z_u, &mut state.l_u] {
        m.scale_in_place(down);
    }
    for m in [&mut state.v, &mut state.z_v, &mut state.l_v] {
        m.scale_in_place(up);
    }
}
