//! End-to-end compression of a chain of dense layers into packed factorized layers.
//!
//! Phase 1 gathers calibration statistics on the full-precision chain. Phase 2 walks the
//! layers in order: tune the dense weight against the quantized prefix, precondition,
//! factorize, balance, refine, pack. Phase 3 distills the scales of the whole chain.

use serde::{Deserialize, Serialize};

use crate::admm::{admm_factorize, AdmmConfig, UpdateOrder};
use crate::balance::{balance_and_extract_scales, DEFAULT_SCALE_FLOOR};
use crate::bpw::{bpw_nanoquant, rank_for_target_bpw};
use crate::error::{Error, Result};
use crate::formats::PackedModel;
use crate::linalg::DenseMatrix;
use crate::precond::{build_for_layer, ChannelStats, Preconditioner, DEFAULT_EPS_FLOOR};
use crate::refine::{
    flip_ratio, forward_chain, kl_divergence, mitigate_error_propagation, ste_refine,
    tune_scales_kd, Activation, LatentLayer, Layer, ToyChain, TuneConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum RankSpec {
    Rank(usize),
    TargetBpw(f64),
}

impl RankSpec {
    pub fn resolve(&self, n: usize, m: usize) -> Result<usize> {
        match *self {
            RankSpec::Rank(0) => Err(Error::InvalidRank),
            RankSpec::Rank(r) if r > n.min(m) => Err(Error::RankTooLarge {
                rank: r,
                max: n.min(m),
            }),
            RankSpec::Rank(r) => Ok(r),
            RankSpec::TargetBpw(t) => rank_for_target_bpw(n, m, t),
        }
    }
}

/// Solver knobs; penalty endpoints default to the target-scaled schedule when absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmmSettings {
    pub max_iters: usize,
    pub ridge: f64,
    pub tol: f64,
    pub rho_start: Option<f64>,
    pub rho_end: Option<f64>,
    pub normalize_factors: bool,
    pub order: UpdateOrder,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        Self {
            max_iters: 400,
            ridge: 1e-4,
            tol: 1e-4,
            rho_start: None,
            rho_end: None,
            normalize_factors: true,
            order: UpdateOrder::ProxyFirst,
        }
    }
}

impl AdmmSettings {
    pub fn config_for(&self, target: &DenseMatrix, rank: usize, seed: u64) -> AdmmConfig {
        let mut cfg = AdmmConfig::for_target(target, rank);
        cfg.max_iters = self.max_iters;
        cfg.ridge = self.ridge;
        cfg.tol = self.tol;
        cfg.seed = seed;
        cfg.normalize_factors = self.normalize_factors;
        cfg.order = self.order;
        if let Some(r) = self.rho_start {
            cfg.rho_start = r;
        }
        if let Some(r) = self.rho_end {
            cfg.rho_end = r;
        }
        cfg.rho_end = cfg.rho_end.max(cfg.rho_start);
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub rank: RankSpec,
    pub admm: AdmmSettings,
    pub tune_pre: Option<TuneConfig>,
    pub tune_post: Option<TuneConfig>,
    pub tune_global: Option<TuneConfig>,
    pub gamma: f64,
    pub percentile: f64,
    pub seed: u64,
    pub activation: Activation,
}

impl PipelineConfig {
    pub fn new(rank: RankSpec) -> Self {
        Self {
            rank,
            admm: AdmmSettings::default(),
            tune_pre: Some(TuneConfig::dense_default()),
            tune_post: Some(TuneConfig::latent_default()),
            tune_global: Some(TuneConfig::global_default()),
            gamma: crate::precond::DEFAULT_GAMMA,
            percentile: crate::precond::DEFAULT_PERCENTILE,
            seed: 0,
            activation: Activation::None,
        }
    }
}

/// Everything that happened to one layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub rank: usize,
    /// `‖W − Ŵ‖_F / ‖W‖_F` against the input weight, with final scales.
    pub relative_error: f64,
    /// Sign flips between post-ADMM and post-refinement latents.
    pub flip_ratio: f64,
    pub bpw: f64,
    pub admm_iterations: usize,
    pub admm_converged: bool,
    pub lagrangian_trace: Vec<f64>,
    pub refine_loss: Option<(f64, f64)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub layers: Vec<LayerMetrics>,
    pub payload_bits: u64,
    pub weight_count: u64,
    pub bpw: f64,
    /// `(initial, best)` KL of the distillation phase.
    pub kd_loss: Option<(f64, f64)>,
}

/// Result of factorizing a single layer.
#[derive(Clone, Debug)]
pub struct LayerOutcome {
    pub rank: usize,
    pub post_admm: LatentLayer,
    pub refined: LatentLayer,
    pub admm_iterations: usize,
    pub admm_converged: bool,
    pub lagrangian_trace: Vec<f64>,
    pub refine_loss: Option<(f64, f64)>,
}

/// Precondition, factorize, balance and optionally refine one weight.
///
/// `inputs` holds the layer's calibration inputs one sample per column; `teacher`
/// the outputs the refined layer should reproduce on them.
pub fn factorize_layer(
    w: &DenseMatrix,
    precond: &Preconditioner,
    rank: usize,
    admm: &AdmmSettings,
    seed: u64,
    refine: Option<(&TuneConfig, &DenseMatrix, &DenseMatrix)>,
) -> Result<LayerOutcome> {
    let target = precond.apply(w)?;
    let cfg = admm.config_for(&target, rank, seed);
    let out = admm_factorize(&target, &cfg)?;
    let balanced = balance_and_extract_scales(&out.p_u, &out.p_v, precond, DEFAULT_SCALE_FLOOR)?;
    let post_admm = LatentLayer::from(balanced);
    let (refined, refine_loss) = match refine {
        Some((tune, inputs, teacher)) => {
            let chain = ToyChain::new(vec![Layer::Factorized(post_admm.clone())], Activation::None)?;
            let res = ste_refine(&chain, inputs, teacher, tune)?;
            let loss = (res.initial_loss(), res.best_loss());
            match res.chain.layers.into_iter().next() {
                Some(Layer::Factorized(f)) => (f, Some(loss)),
                _ => unreachable!("single factorized layer in, single layer out"),
            }
        }
        None => (post_admm.clone(), None),
    };
    Ok(LayerOutcome {
        rank,
        post_admm,
        refined,
        admm_iterations: out.state.iteration,
        admm_converged: out.state.converged,
        lagrangian_trace: out.state.lagrangian_trace,
        refine_loss,
    })
}

fn activate(x: DenseMatrix, activation: Activation, last: bool) -> DenseMatrix {
    if !last && activation == Activation::Relu {
        x.map(|v| v.max(0.0))
    } else {
        x
    }
}

fn latent_flip_ratio(a: &LatentLayer, b: &LatentLayer) -> Result<f64> {
    let nu = a.latent_u.as_slice().len() as f64;
    let nv = a.latent_v.as_slice().len() as f64;
    let fu = flip_ratio(&a.latent_u, &b.latent_u)?;
    let fv = flip_ratio(&a.latent_v, &b.latent_v)?;
    Ok((fu * nu + fv * nv) / (nu + nv))
}

/// Runs all three phases. `calib` is `samples × input_dim` of the first layer.
pub fn run_pipeline(
    weights: &[(String, DenseMatrix)],
    calib: &DenseMatrix,
    config: &PipelineConfig,
) -> Result<(PackedModel, MetricsReport)> {
    if weights.is_empty() {
        return Err(Error::InvalidConfig("no layers to compress".into()));
    }
    let fp_chain = ToyChain::new(
        weights.iter().map(|(_, w)| Layer::Dense(w.clone())).collect(),
        config.activation,
    )?;
    if calib.cols() != weights[0].1.cols() {
        return Err(Error::dims(format!(
            "calibration has {} channels, first layer takes {}",
            calib.cols(),
            weights[0].1.cols()
        )));
    }
    let count = weights.len();
    let x = calib.transpose();

    // Phase 1: full-precision activations, teachers and preconditioners
    let mut fp_inputs = Vec::with_capacity(count);
    let mut teachers = Vec::with_capacity(count);
    let mut cur = x.clone();
    for (k, (_, w)) in weights.iter().enumerate() {
        let pre = w.matmul(&cur)?;
        fp_inputs.push(cur);
        cur = activate(pre.clone(), config.activation, k + 1 == count);
        teachers.push(pre);
    }
    let mut preconds = Vec::with_capacity(count);
    for (k, (name, w)) in weights.iter().enumerate() {
        let mut stats = ChannelStats::new(w.cols());
        stats
            .accumulate(&fp_inputs[k].transpose(), config.percentile)
            .map_err(|e| e.in_layer(name))?;
        preconds.push(
            build_for_layer(&stats, None, w.rows(), config.gamma, DEFAULT_EPS_FLOOR)
                .map_err(|e| e.in_layer(name))?,
        );
    }

    // Phase 2: layer by layer against the quantized prefix
    let mut student_layers = Vec::with_capacity(count);
    let mut metrics = Vec::with_capacity(count);
    let mut q_input = x.clone();
    for (k, (name, w)) in weights.iter().enumerate() {
        let step = || -> Result<(LatentLayer, LayerMetrics)> {
            let rank = config.rank.resolve(w.rows(), w.cols())?;
            let tuned_w = match (&config.tune_pre, k) {
                (Some(tune), k) if k > 0 => {
                    let chain = ToyChain::new(vec![Layer::Dense(w.clone())], Activation::None)?;
                    let res = mitigate_error_propagation(&chain, &q_input, &teachers[k], tune)?;
                    match res.chain.layers.into_iter().next() {
                        Some(Layer::Dense(tw)) => tw,
                        _ => unreachable!("single dense layer in, single layer out"),
                    }
                }
                _ => w.clone(),
            };
            let outcome = factorize_layer(
                &tuned_w,
                &preconds[k],
                rank,
                &config.admm,
                config.seed.wrapping_add(k as u64),
                config
                    .tune_post
                    .as_ref()
                    .map(|t| (t, &q_input, &teachers[k])),
            )?;
            let flips = latent_flip_ratio(&outcome.post_admm, &outcome.refined)?;
            let lm = LayerMetrics {
                name: name.clone(),
                n: w.rows(),
                m: w.cols(),
                rank,
                relative_error: 0.0,
                flip_ratio: flips,
                bpw: bpw_nanoquant(w.rows(), w.cols(), rank),
                admm_iterations: outcome.admm_iterations,
                admm_converged: outcome.admm_converged,
                lagrangian_trace: outcome.lagrangian_trace,
                refine_loss: outcome.refine_loss,
            };
            Ok((outcome.refined, lm))
        };
        let (latent, lm) = step().map_err(|e| e.in_layer(name))?;
        let out = latent.effective_weight().matmul(&q_input)?;
        q_input = activate(out, config.activation, k + 1 == count);
        student_layers.push(Layer::Factorized(latent));
        metrics.push(lm);
    }

    // Phase 3: scale-only distillation over the whole chain
    let mut student = ToyChain::new(student_layers, config.activation)?;
    let kd_loss = match &config.tune_global {
        Some(tune) => {
            let res = tune_scales_kd(&student, &fp_chain, &x, tune)?;
            let loss = (res.initial_loss(), res.best_loss());
            student = res.chain;
            Some(loss)
        }
        None => None,
    };

    let mut packed = Vec::with_capacity(count);
    for ((name, w), (layer, lm)) in weights
        .iter()
        .zip(student.layers.iter().zip(metrics.iter_mut()))
    {
        let Layer::Factorized(latent) = layer else {
            unreachable!("every student layer is factorized")
        };
        let ew = latent.effective_weight();
        lm.relative_error = w.sub(&ew)?.frobenius_norm() / w.frobenius_norm().max(f64::MIN_POSITIVE);
        packed.push((name.clone(), latent.pack().map_err(|e| e.in_layer(name))?));
    }
    let model = PackedModel { layers: packed };
    let payload_bits = model.payload_bits();
    let weight_count = model.weight_count();
    Ok((
        model,
        MetricsReport {
            layers: metrics,
            payload_bits,
            weight_count,
            bpw: payload_bits as f64 / weight_count as f64,
            kd_loss,
        },
    ))
}

/// KL between the full-precision chain and a packed model on `calib`.
pub fn packed_kl(
    weights: &[(String, DenseMatrix)],
    model: &PackedModel,
    calib: &DenseMatrix,
    activation: Activation,
) -> Result<f64> {
    let x = calib.transpose();
    let fp = ToyChain::new(
        weights.iter().map(|(_, w)| Layer::Dense(w.clone())).collect(),
        activation,
    )?;
    let mut cur = x.clone();
    for (k, (_, layer)) in model.layers.iter().enumerate() {
        let out = crate::packing::gemm_packed(layer, &cur)?;
        cur = activate(out, activation, k + 1 == model.layers.len());
    }
    kl_divergence(&forward_chain(&fp, &x)?, &cur)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rank_one(n: usize, m: usize) -> DenseMatrix {
        DenseMatrix::from_fn(n, m, |i, j| {
            let su = if (i * 7 + 3) % 5 < 2 { -1.0 } else { 1.0 };
            let sv = if (j * 11 + 1) % 3 == 0 { -1.0 } else { 1.0 };
            su * sv * (0.5 + 0.1 * i as f64) * (1.0 + 0.05 * j as f64)
        })
    }

    #[test]
    fn rank_spec_resolution() {
        assert_eq!(RankSpec::Rank(3).resolve(8, 8).unwrap(), 3);
        assert!(matches!(RankSpec::Rank(0).resolve(8, 8), Err(Error::InvalidRank)));
        assert!(matches!(
            RankSpec::Rank(9).resolve(8, 8),
            Err(Error::RankTooLarge { .. })
        ));
        assert_eq!(RankSpec::TargetBpw(1.0).resolve(64, 64).unwrap(), 16);
    }

    #[test]
    fn single_in_class_layer() {
        let w = rank_one(32, 32);
        let calib = DenseMatrix::identity(32);
        let cfg = PipelineConfig::new(RankSpec::TargetBpw(1.0));
        let (model, report) = run_pipeline(&[("fc".into(), w)], &calib, &cfg).unwrap();
        assert_eq!(model.layers.len(), 1);
        assert!(report.layers[0].relative_error <= 1e-3, "{}", report.layers[0].relative_error);
        assert_eq!(report.bpw, bpw_nanoquant(32, 32, report.layers[0].rank));
    }

    #[test]
    fn calibration_width_checked() {
        let w = rank_one(4, 4);
        let cfg = PipelineConfig::new(RankSpec::Rank(1));
        assert!(matches!(
            run_pipeline(&[("fc".into(), w)], &DenseMatrix::identity(3), &cfg),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn failing_layer_is_named() {
        let cfg = PipelineConfig::new(RankSpec::Rank(1));
        let err = run_pipeline(
            &[("zero".into(), DenseMatrix::zeros(3, 3))],
            &DenseMatrix::identity(3),
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(&err, Error::Layer { name, .. } if name == "zero"));
        assert!(err.is_numerical());
    }
}
