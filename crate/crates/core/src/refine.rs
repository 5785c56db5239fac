//! Gradient tuning on toy layer chains: STE refinement of latents and scales,
//! dense-weight error-propagation mitigation, scale-only KL distillation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::balance::{BalancedLatents, DEFAULT_SCALE_FLOOR};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::packing::{binarize, FactorizedLayer};

/// Real latents plus scales; the forward pass uses `sign` of the latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentLayer {
    pub latent_u: DenseMatrix,
    pub latent_v: DenseMatrix,
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
}

impl LatentLayer {
    pub fn new(
        latent_u: DenseMatrix,
        latent_v: DenseMatrix,
        s1: Vec<f64>,
        s2: Vec<f64>,
    ) -> Result<Self> {
        if latent_u.cols() != latent_v.cols()
            || s1.len() != latent_u.rows()
            || s2.len() != latent_v.rows()
        {
            return Err(Error::dims("latent layer parts do not agree"));
        }
        Ok(Self {
            latent_u,
            latent_v,
            s1,
            s2,
        })
    }

    pub fn pack(&self) -> Result<FactorizedLayer> {
        FactorizedLayer::from_latents(&self.latent_u, &self.latent_v, self.s1.clone(), self.s2.clone())
    }

    /// `s1 ⊙ sign(U)·sign(V)ᵀ ⊙ s2` as a dense matrix.
    pub fn effective_weight(&self) -> DenseMatrix {
        let bu = binarize(&self.latent_u).expect("finite latents");
        let bv = binarize(&self.latent_v).expect("finite latents");
        bu.matmul_tr(&bv)
            .and_then(|m| m.scale_rows(&self.s1))
            .and_then(|m| m.scale_cols(&self.s2))
            .expect("validated shapes")
    }
}

impl From<BalancedLatents> for LatentLayer {
    fn from(b: BalancedLatents) -> Self {
        Self {
            latent_u: b.latent_u,
            latent_v: b.latent_v,
            s1: b.s1,
            s2: b.s2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Dense(DenseMatrix),
    Factorized(LatentLayer),
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        match self {
            Layer::Dense(w) => w.cols(),
            Layer::Factorized(f) => f.latent_v.rows(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Layer::Dense(w) => w.rows(),
            Layer::Factorized(f) => f.latent_u.rows(),
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self, Layer::Dense(_))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    None,
    Relu,
}

/// Linear layers applied in order, with `activation` between consecutive layers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ToyChain {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

impl ToyChain {
    pub fn new(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dims(format!(
                    "layer {k} outputs {} but layer {} takes {}",
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.layers.first().map(Layer::in_dim)
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.layers.last().map(Layer::out_dim)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub seed: u64,
    /// Per-sample loss weights; uniform when absent.
    pub column_weights: Option<Vec<f64>>,
}

impl TuneConfig {
    pub fn new(epochs: usize, learning_rate: f64) -> Self {
        Self {
            epochs,
            learning_rate,
            batch_size: 128,
            schedule: Schedule::Cosine,
            seed: 0,
            column_weights: None,
        }
    }

    /// Dense-weight tuning defaults.
    pub fn dense_default() -> Self {
        Self::new(8, 1e-4)
    }

    /// Latent and scale refinement defaults.
    pub fn latent_default() -> Self {
        Self::new(8, 1e-5)
    }

    /// Global scale distillation defaults.
    pub fn global_default() -> Self {
        Self::new(8, 1e-6)
    }

    fn validate(&self, samples: usize) -> Result<()> {
        if self.epochs == 0 || !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs, learning_rate and batch_size must be positive".into(),
            ));
        }
        if let Some(w) = &self.column_weights {
            if w.len() != samples {
                return Err(Error::dims(format!("{} column weights for {samples} samples", w.len())));
            }
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidConfig("column weights must be finite and >= 0".into()));
            }
        }
        Ok(())
    }
}

/// Tuned chain with its loss record. `loss_history[0]` is the input chain's loss.
#[derive(Clone, Debug)]
pub struct TuneResult {
    pub chain: ToyChain,
    pub loss_history: Vec<f64>,
    pub best_epoch: usize,
}

impl TuneResult {
    pub fn initial_loss(&self) -> f64 {
        self.loss_history[0]
    }

    pub fn best_loss(&self) -> f64 {
        self.loss_history[self.best_epoch]
    }
}

fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

struct Trace {
    inputs: Vec<DenseMatrix>,
    pre: Vec<DenseMatrix>,
    output: DenseMatrix,
}

fn layer_forward(layer: &Layer, x: &DenseMatrix, relaxed: bool) -> Result<DenseMatrix> {
    match layer {
        Layer::Dense(w) => w.matmul(x),
        Layer::Factorized(f) => {
            let (bu, bv) = binary_parts(f, relaxed);
            let xs = x.scale_rows(&f.s2)?;
            let t = bv.tr_matmul(&xs)?;
            bu.matmul(&t)?.scale_rows(&f.s1)
        }
    }
}

fn binary_parts(f: &LatentLayer, relaxed: bool) -> (DenseMatrix, DenseMatrix) {
    if relaxed {
        (f.latent_u.clone(), f.latent_v.clone())
    } else {
        (f.latent_u.map(sign), f.latent_v.map(sign))
    }
}

fn run_forward(chain: &ToyChain, x: &DenseMatrix, relaxed: bool) -> Result<Trace> {
    let mut inputs = Vec::with_capacity(chain.layers.len());
    let mut pre = Vec::with_capacity(chain.layers.len());
    let mut cur = x.clone();
    for (k, layer) in chain.layers.iter().enumerate() {
        if cur.rows() != layer.in_dim() {
            return Err(Error::dims(format!(
                "layer {k} takes {} inputs, got {}",
                layer.in_dim(),
                cur.rows()
            )));
        }
        let out = layer_forward(layer, &cur, relaxed)?;
        inputs.push(cur);
        let last = k + 1 == chain.layers.len();
        cur = if !last && chain.activation == Activation::Relu {
            out.map(|v| v.max(0.0))
        } else {
            out.clone()
        };
        pre.push(out);
    }
    Ok(Trace {
        inputs,
        pre,
        output: cur,
    })
}

/// Hard-binarized forward pass; `x` holds one sample per column.
pub fn forward_chain(chain: &ToyChain, x: &DenseMatrix) -> Result<DenseMatrix> {
    Ok(run_forward(chain, x, false)?.output)
}

/// Forward pass with `sign` replaced by the identity on the latents.
pub fn forward_chain_relaxed(chain: &ToyChain, x: &DenseMatrix) -> Result<DenseMatrix> {
    Ok(run_forward(chain, x, true)?.output)
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerGrad {
    Dense(DenseMatrix),
    Factorized {
        u: DenseMatrix,
        v: DenseMatrix,
        s1: Vec<f64>,
        s2: Vec<f64>,
    },
}

/// Reverse pass from `dy = ∂loss/∂output`. Latent gradients pass straight through `sign`.
fn backward(chain: &ToyChain, trace: &Trace, dy: DenseMatrix, relaxed: bool) -> Result<Vec<LayerGrad>> {
    let count = chain.layers.len();
    let mut grads = Vec::with_capacity(count);
    let mut g = dy;
    for k in (0..count).rev() {
        if k + 1 < count && chain.activation == Activation::Relu {
            let pre = &trace.pre[k];
            g = g.hadamard(&pre.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))?;
        }
        let x = &trace.inputs[k];
        match &chain.layers[k] {
            Layer::Dense(w) => {
                grads.push(LayerGrad::Dense(g.matmul_tr(x)?));
                g = w.tr_matmul(&g)?;
            }
            Layer::Factorized(f) => {
                let (bu, bv) = binary_parts(f, relaxed);
                let xs = x.scale_rows(&f.s2)?;
                let t = bv.tr_matmul(&xs)?;
                let h = bu.matmul(&t)?;
                let ds1 = row_inner(&g, &h);
                let dh = g.scale_rows(&f.s1)?;
                let du = dh.matmul_tr(&t)?;
                let dt = bu.tr_matmul(&dh)?;
                let dv = xs.matmul_tr(&dt)?;
                let dxs = bv.matmul(&dt)?;
                let ds2 = row_inner(&dxs, x);
                grads.push(LayerGrad::Factorized {
                    u: du,
                    v: dv,
                    s1: ds1,
                    s2: ds2,
                });
                g = dxs.scale_rows(&f.s2)?;
            }
        }
    }
    grads.reverse();
    Ok(grads)
}

fn row_inner(a: &DenseMatrix, b: &DenseMatrix) -> Vec<f64> {
    (0..a.rows())
        .map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| x * y).sum())
        .collect()
}

/// Objective being tuned.
enum Objective<'a> {
    /// `(1/b) Σ_col w_col ‖t_col − y_col‖²`.
    Mse {
        target: &'a DenseMatrix,
        weights: Option<&'a [f64]>,
    },
    /// `Σ_col KL(softmax(t_col) ‖ softmax(y_col))`.
    Kl { target: &'a DenseMatrix },
}

impl Objective<'_> {
    fn target(&self) -> &DenseMatrix {
        match self {
            Objective::Mse { target, .. } | Objective::Kl { target } => target,
        }
    }

    /// Loss and output gradient over the selected columns.
    fn eval(&self, y: &DenseMatrix, cols: &[usize]) -> (f64, DenseMatrix) {
        let t = self.target();
        let mut grad = DenseMatrix::zeros(y.rows(), cols.len());
        let mut loss = 0.0;
        match self {
            Objective::Mse { weights, .. } => {
                let scale = 1.0 / cols.len() as f64;
                for (c, &col) in cols.iter().enumerate() {
                    let w = weights.map_or(1.0, |w| w[col]);
                    for i in 0..y.rows() {
                        let d = y[(i, c)] - t[(i, col)];
                        loss += scale * w * d * d;
                        grad[(i, c)] = 2.0 * scale * w * d;
                    }
                }
            }
            Objective::Kl { .. } => {
                for (c, &col) in cols.iter().enumerate() {
                    let tc: Vec<f64> = (0..t.rows()).map(|i| t[(i, col)]).collect();
                    let yc: Vec<f64> = (0..y.rows()).map(|i| y[(i, c)]).collect();
                    let lp = log_softmax(&tc);
                    let lq = log_softmax(&yc);
                    for i in 0..y.rows() {
                        let p = lp[i].exp();
                        loss += p * (lp[i] - lq[i]);
                        grad[(i, c)] = lq[i].exp() - p;
                    }
                }
            }
        }
        (loss, grad)
    }
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// `Σ_col KL(softmax(teacher_col) ‖ softmax(student_col))`.
pub fn kl_divergence(teacher_out: &DenseMatrix, student_out: &DenseMatrix) -> Result<f64> {
    if teacher_out.shape() != student_out.shape() {
        return Err(Error::dims("teacher and student outputs differ in shape"));
    }
    let cols: Vec<usize> = (0..student_out.cols()).collect();
    Ok(Objective::Kl { target: teacher_out }.eval(student_out, &cols).0)
}

/// `(1/b)‖teacher − forward(chain, x)‖²_F` (column-weighted when weights are given).
pub fn chain_mse(
    chain: &ToyChain,
    x: &DenseMatrix,
    teacher: &DenseMatrix,
    weights: Option<&[f64]>,
) -> Result<f64> {
    let y = forward_chain(chain, x)?;
    if y.shape() != teacher.shape() {
        return Err(Error::dims("teacher outputs do not match the chain output"));
    }
    let cols: Vec<usize> = (0..y.cols()).collect();
    Ok(Objective::Mse { target: teacher, weights }.eval(&y, &cols).0)
}

/// Which parameters an optimizer step may touch.
#[derive(Clone, Copy, Debug)]
struct Selection {
    dense: bool,
    latents: bool,
    scales: bool,
}

fn gather(chain: &ToyChain, sel: Selection) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in &chain.layers {
        match layer {
            Layer::Dense(w) if sel.dense => out.extend_from_slice(w.as_slice()),
            Layer::Factorized(f) => {
                if sel.latents {
                    out.extend_from_slice(f.latent_u.as_slice());
                    out.extend_from_slice(f.latent_v.as_slice());
                }
                if sel.scales {
                    out.extend_from_slice(&f.s1);
                    out.extend_from_slice(&f.s2);
                }
            }
            _ => {}
        }
    }
    out
}

fn gather_grads(grads: &[LayerGrad], sel: Selection) -> Vec<f64> {
    let mut out = Vec::new();
    for g in grads {
        match g {
            LayerGrad::Dense(w) if sel.dense => out.extend_from_slice(w.as_slice()),
            LayerGrad::Factorized { u, v, s1, s2 } => {
                if sel.latents {
                    out.extend_from_slice(u.as_slice());
                    out.extend_from_slice(v.as_slice());
                }
                if sel.scales {
                    out.extend_from_slice(s1);
                    out.extend_from_slice(s2);
                }
            }
            _ => {}
        }
    }
    out
}

fn scatter(chain: &mut ToyChain, sel: Selection, values: &[f64]) {
    let mut pos = 0;
    let mut take = |dst: &mut [f64]| {
        dst.copy_from_slice(&values[pos..pos + dst.len()]);
        pos += dst.len();
    };
    for layer in &mut chain.layers {
        match layer {
            Layer::Dense(w) if sel.dense => take(w.as_mut_slice()),
            Layer::Factorized(f) => {
                if sel.latents {
                    take(f.latent_u.as_mut_slice());
                    take(f.latent_v.as_mut_slice());
                }
                if sel.scales {
                    take(&mut f.s1);
                    take(&mut f.s2);
                    for s in f.s1.iter_mut().chain(f.s2.iter_mut()) {
                        *s = s.max(DEFAULT_SCALE_FLOOR);
                    }
                }
            }
            _ => {}
        }
    }
}

/// Adam with `β₁ = 0.9`, `β₂ = 0.999`, `ε = 1e-8`.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grads[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grads[i] * grads[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

fn lr_at(config: &TuneConfig, step: usize, total: usize) -> f64 {
    match config.schedule {
        Schedule::Constant => config.learning_rate,
        Schedule::Cosine => {
            let frac = step as f64 / total.max(1) as f64;
            0.5 * config.learning_rate * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

fn select_cols(m: &DenseMatrix, cols: &[usize]) -> DenseMatrix {
    m.select_cols(cols)
}

fn full_loss(chain: &ToyChain, x: &DenseMatrix, obj: &Objective) -> Result<f64> {
    let y = forward_chain(chain, x)?;
    let cols: Vec<usize> = (0..x.cols()).collect();
    Ok(obj.eval(&y, &cols).0)
}

/// Minibatch Adam over the selected parameters, keeping the best full-data checkpoint.
fn optimize(
    chain: &ToyChain,
    x: &DenseMatrix,
    obj: Objective,
    config: &TuneConfig,
    sel: Selection,
) -> Result<TuneResult> {
    config.validate(x.cols())?;
    let y0 = forward_chain(chain, x)?;
    if y0.shape() != obj.target().shape() {
        return Err(Error::dims(format!(
            "targets are {}x{}, chain produces {}x{}",
            obj.target().rows(),
            obj.target().cols(),
            y0.rows(),
            y0.cols()
        )));
    }
    let initial = full_loss(chain, x, &obj)?;
    if !initial.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: 0,
            checkpoint: Box::new(chain.clone()),
        });
    }
    let mut best = chain.clone();
    let mut best_epoch = 0;
    let mut history = vec![initial];
    let mut current = chain.clone();
    let mut params = gather(&current, sel);
    let mut adam = Adam::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let samples = x.cols();
    let batches_per_epoch = samples.div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..samples).collect();
    let mut step = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let xb = select_cols(x, batch);
            let trace = run_forward(&current, &xb, false)?;
            let (_, dy) = obj.eval(&trace.output, batch);
            let grads = backward(&current, &trace, dy, false)?;
            let flat = gather_grads(&grads, sel);
            adam.step(&mut params, &flat, lr_at(config, step, total_steps));
            step += 1;
            scatter(&mut current, sel, &params);
            // scatter may clamp scales
            params = gather(&current, sel);
        }
        let loss = full_loss(&current, x, &obj)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                checkpoint: Box::new(best),
            });
        }
        history.push(loss);
        if loss < history[best_epoch] {
            best_epoch = epoch;
            best = current.clone();
        }
    }
    Ok(TuneResult {
        chain: best,
        loss_history: history,
        best_epoch,
    })
}

/// Jointly tunes latents and scales of every factorized layer; dense layers stay fixed.
pub fn ste_refine(
    chain: &ToyChain,
    x: &DenseMatrix,
    teacher_outputs: &DenseMatrix,
    config: &TuneConfig,
) -> Result<TuneResult> {
    if chain.layers.iter().all(Layer::is_dense) {
        return Err(Error::NoTunableLayers);
    }
    let obj = Objective::Mse {
        target: teacher_outputs,
        weights: config.column_weights.as_deref(),
    };
    optimize(
        chain,
        x,
        obj,
        config,
        Selection {
            dense: false,
            latents: true,
            scales: true,
        },
    )
}

/// Tunes only the still-dense layers so they absorb error committed upstream.
pub fn mitigate_error_propagation(
    chain: &ToyChain,
    x: &DenseMatrix,
    teacher_outputs: &DenseMatrix,
    config: &TuneConfig,
) -> Result<TuneResult> {
    if !chain.layers.iter().any(Layer::is_dense) {
        return Err(Error::NoTunableLayers);
    }
    let obj = Objective::Mse {
        target: teacher_outputs,
        weights: config.column_weights.as_deref(),
    };
    optimize(
        chain,
        x,
        obj,
        config,
        Selection {
            dense: true,
            latents: false,
            scales: false,
        },
    )
}

/// Tunes only `s1`, `s2` of the student against the teacher's softmax outputs.
pub fn tune_scales_kd(
    student: &ToyChain,
    teacher: &ToyChain,
    x: &DenseMatrix,
    config: &TuneConfig,
) -> Result<TuneResult> {
    if student.layers.iter().all(Layer::is_dense) {
        return Err(Error::NoTunableLayers);
    }
    let target = forward_chain(teacher, x)?;
    optimize(
        student,
        x,
        Objective::Kl { target: &target },
        config,
        Selection {
            dense: false,
            latents: false,
            scales: true,
        },
    )
}

/// Fraction of entries whose sign differs (`sign(0) = +1`).
pub fn flip_ratio(before: &DenseMatrix, after: &DenseMatrix) -> Result<f64> {
    if before.shape() != after.shape() {
        return Err(Error::dims("flip_ratio shapes differ"));
    }
    let flips = before
        .as_slice()
        .iter()
        .zip(after.as_slice())
        .filter(|(a, b)| sign(**a) != sign(**b))
        .count();
    Ok(flips as f64 / before.as_slice().len() as f64)
}

/// Analytic gradients of the column-mean MSE objective, one entry per layer.
pub fn mse_gradients(
    chain: &ToyChain,
    x: &DenseMatrix,
    teacher: &DenseMatrix,
    relaxed: bool,
) -> Result<Vec<LayerGrad>> {
    let trace = run_forward(chain, x, relaxed)?;
    let cols: Vec<usize> = (0..x.cols()).collect();
    let (_, dy) = Objective::Mse {
        target: teacher,
        weights: None,
    }
    .eval(&trace.output, &cols);
    backward(chain, &trace, dy, relaxed)
}

/// Analytic gradients of the summed KL objective against fixed teacher outputs.
pub fn kl_gradients(chain: &ToyChain, x: &DenseMatrix, teacher_out: &DenseMatrix) -> Result<Vec<LayerGrad>> {
    let trace = run_forward(chain, x, false)?;
    let cols: Vec<usize> = (0..x.cols()).collect();
    let (_, dy) = Objective::Kl { target: teacher_out }.eval(&trace.output, &cols);
    backward(chain, &trace, dy, false)
}
