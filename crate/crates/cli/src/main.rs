use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use nq_core::bpw::{
    self, Baseline, BaselineParams, Method, ModelShape, RankPolicy, DEFAULT_BLOCK,
};
use nq_core::formats::{self, PackedModel};
use nq_core::packing::{gemm_packed, gemv_packed, reconstruct_dense, FactorizedLayer};
use nq_core::pipeline::{run_pipeline, PipelineConfig, RankSpec};
use nq_core::refine::{Activation, TuneConfig};
use nq_core::DenseMatrix;

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "nq", version, about = "Low-rank binary weight compression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress NQMX weight matrices into an NQPK packed model
    Factorize(FactorizeArgs),
    /// Run a packed model on NQMX inputs (one sample per column)
    Infer(InferArgs),
    /// Storage accounting for a model shape
    Bpw(BpwArgs),
    /// Round-trip and GEMV-vs-dense checks on a packed model
    Verify(VerifyArgs),
    /// Packed GEMV throughput against a dense baseline, as CSV
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    None,
    Relu,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::None => Activation::None,
            ActivationArg::Relu => Activation::Relu,
        }
    }
}

#[derive(Args)]
struct FactorizeArgs {
    /// Weight matrices in chain order; the layer name is the file stem
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Calibration inputs, samples × input dim of the first layer (identity when omitted)
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long, conflicts_with = "target_bpw", required_unless_present = "target_bpw")]
    rank: Option<usize>,
    #[arg(long)]
    target_bpw: Option<f64>,
    #[arg(long, default_value_t = nq_core::precond::DEFAULT_GAMMA)]
    gamma: f64,
    #[arg(long, default_value_t = nq_core::precond::DEFAULT_PERCENTILE)]
    percentile: f64,
    #[arg(long, default_value_t = 400)]
    admm_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Epochs for each tuning phase (0 disables tuning)
    #[arg(long, default_value_t = 8)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pre_lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    post_lr: f64,
    #[arg(long, default_value_t = 1e-6)]
    kd_lr: f64,
    #[arg(long, value_enum, default_value_t = ActivationArg::None)]
    activation: ActivationArg,
    #[arg(long)]
    output: PathBuf,
    /// Write the metrics report as JSON here
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vector_in: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use the batched kernel instead of one GEMV per column
    #[arg(long)]
    batch: bool,
    #[arg(long, value_enum, default_value_t = ActivationArg::None)]
    activation: ActivationArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum Units {
    Decimal,
    Binary,
}

#[derive(Args)]
struct BpwArgs {
    /// Shape config file
    #[arg(long, conflicts_with = "model")]
    shape_config: Option<PathBuf>,
    /// Shipped shape by label (`L2-7`) or name (`llama-2-7b`)
    #[arg(long)]
    model: Option<String>,
    #[arg(long, default_value = "nanoquant")]
    method: String,
    #[arg(long, default_value_t = 0)]
    c: usize,
    #[arg(long, default_value_t = DEFAULT_BLOCK)]
    k: usize,
    /// N:M sparsity for stbllm
    #[arg(long)]
    nm: Option<String>,
    #[arg(long, conflicts_with = "target_bpw")]
    rank: Option<usize>,
    #[arg(long)]
    target_bpw: Option<f64>,
    #[arg(long, value_enum, default_value_t = Units::Binary)]
    units: Units,
    /// Emit the bound table as CSV (all shipped shapes unless one is given)
    #[arg(long)]
    table: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 8)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// Packed model to bench; a random layer is generated when omitted
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 1024)]
    n: usize,
    #[arg(long, default_value_t = 1024)]
    m: usize,
    #[arg(long, default_value_t = 64)]
    rank: usize,
    #[arg(long, default_value_t = 20)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_VALIDATION);
    }
    let result = match cli.command {
        Command::Factorize(a) => factorize(a),
        Command::Infer(a) => infer(a),
        Command::Bpw(a) => bpw_cmd(a),
        Command::Verify(a) => verify(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let numerical = e.chain().any(|c| {
        c.downcast_ref::<nq_core::Error>()
            .is_some_and(nq_core::Error::is_numerical)
            || c.downcast_ref::<VerifyFailure>().is_some()
    });
    if numerical {
        EXIT_NUMERICAL
    } else {
        EXIT_VALIDATION
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("NQ_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|t| *t > 0)
        .ok_or_else(|| anyhow!("NQ_THREADS must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("configuring the worker pool")
}

fn read_matrix(path: &Path) -> anyhow::Result<DenseMatrix> {
    let bytes = fs::read(path).map_err(nq_core::Error::from)
        .with_context(|| format!("reading {}", path.display()))?;
    formats::read_nqmx(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn read_model(path: &Path) -> anyhow::Result<PackedModel> {
    let bytes = fs::read(path).map_err(nq_core::Error::from)
        .with_context(|| format!("reading {}", path.display()))?;
    formats::read_nqpk(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes)
        .map_err(nq_core::Error::from)
        .with_context(|| format!("writing {}", path.display()))
}

fn tune(epochs: usize, lr: f64, seed: u64) -> Option<TuneConfig> {
    (epochs > 0).then(|| TuneConfig {
        seed,
        ..TuneConfig::new(epochs, lr)
    })
}

fn factorize(a: FactorizeArgs) -> anyhow::Result<()> {
    let mut weights = Vec::with_capacity(a.input.len());
    for path in &a.input {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("layer{}", weights.len()));
        weights.push((name, read_matrix(path)?));
    }
    let calib = match &a.calib {
        Some(p) => read_matrix(p)?,
        None => DenseMatrix::identity(weights[0].1.cols()),
    };
    let rank = match (a.rank, a.target_bpw) {
        (Some(r), None) => RankSpec::Rank(r),
        (None, Some(t)) => RankSpec::TargetBpw(t),
        _ => bail!(nq_core::Error::InvalidConfig("give exactly one of --rank / --target-bpw".into())),
    };
    let mut cfg = PipelineConfig::new(rank);
    cfg.gamma = a.gamma;
    cfg.percentile = a.percentile;
    cfg.seed = a.seed;
    cfg.admm.max_iters = a.admm_iters;
    cfg.activation = a.activation.into();
    cfg.tune_pre = tune(a.epochs, a.pre_lr, a.seed);
    cfg.tune_post = tune(a.epochs, a.post_lr, a.seed);
    cfg.tune_global = tune(a.epochs, a.kd_lr, a.seed);

    let (model, report) = run_pipeline(&weights, &calib, &cfg)?;
    // serialize both before writing either, so failures leave no partial output
    let bytes = formats::write_nqpk(&model)?;
    let json = serde_json::to_string_pretty(&report)?;
    write_file(&a.output, &bytes)?;
    match &a.report {
        Some(p) => write_file(p, json.as_bytes())?,
        None => {
            let mut text = String::new();
            for l in &report.layers {
                text.push_str(&format!(
                    "{}\t{}x{}\tr={}\trel_err={:.6}\tflip={:.4}\tbpw={:.4}\n",
                    l.name, l.n, l.m, l.rank, l.relative_error, l.flip_ratio, l.bpw
                ));
            }
            text.push_str(&format!("total\tbpw={:.6}\tbits={}\n", report.bpw, report.payload_bits));
            emit(&text)?;
        }
    }
    Ok(())
}

fn infer(a: InferArgs) -> anyhow::Result<()> {
    let model = read_model(&a.model)?;
    let mut cur = read_matrix(&a.vector_in)?;
    let count = model.layers.len();
    for (k, (name, layer)) in model.layers.iter().enumerate() {
        let out = if a.batch {
            gemm_packed(layer, &cur)
        } else {
            gemv_columns(layer, &cur)
        }
        .with_context(|| format!("layer `{name}`"))?;
        cur = if k + 1 < count && matches!(a.activation, ActivationArg::Relu) {
            out.map(|v| v.max(0.0))
        } else {
            out
        };
    }
    write_file(&a.out, &formats::write_nqmx(&cur)?)
}

fn gemv_columns(layer: &FactorizedLayer, x: &DenseMatrix) -> nq_core::Result<DenseMatrix> {
    let mut out = DenseMatrix::zeros(layer.n(), x.cols());
    for c in 0..x.cols() {
        let y = gemv_packed(layer, &x.col_to_vec(c))?;
        for (i, v) in y.into_iter().enumerate() {
            out[(i, c)] = v;
        }
    }
    Ok(out)
}

fn load_shape(a: &BpwArgs) -> anyhow::Result<Option<(String, ModelShape)>> {
    if let Some(p) = &a.shape_config {
        let text = fs::read_to_string(p)
            .map_err(nq_core::Error::from)
            .with_context(|| format!("reading {}", p.display()))?;
        let shape = formats::parse_shape_config(&text)
            .with_context(|| format!("parsing {}", p.display()))?;
        let label = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        return Ok(Some((label, shape)));
    }
    if let Some(name) = &a.model {
        let shape = bpw::builtin_shape(name)
            .ok_or_else(|| nq_core::Error::InvalidConfig(format!("no shipped shape `{name}`")))?;
        return Ok(Some((name.clone(), shape)));
    }
    Ok(None)
}

fn bpw_cmd(a: BpwArgs) -> anyhow::Result<()> {
    let units = a.units;
    let size = |decimal: f64, binary: f64| match units {
        Units::Decimal => decimal,
        Units::Binary => binary,
    };
    if a.table {
        let shapes = match load_shape(&a)? {
            Some((label, shape)) => vec![(label, shape)],
            None => bpw::builtin_shapes()
                .into_iter()
                .map(|(label, _, s)| (label.to_string(), s))
                .collect(),
        };
        let unit = match units {
            Units::Decimal => "GB",
            Units::Binary => "GiB",
        };
        let mut header = format!("model,fp16_{unit},nanoquant_bpw,nanoquant_{unit}");
        for b in bpw::table_methods() {
            header.push_str(&format!(",{b}_bpw_min,{b}_bpw_max,{b}_{unit}_min,{b}_{unit}_max"));
        }
        let mut csv = header;
        csv.push('\n');
        for (label, shape) in shapes {
            let row = bpw::table_row(&label, &shape, a.k)?;
            let fp16 = size(row.fp16_bytes / 1e9, row.fp16_bytes / (1u64 << 30) as f64);
            let mut line = format!(
                "{},{:.2},{:.2},{:.2}",
                row.model,
                fp16,
                bpw::round2_half_even(row.nanoquant_bpw),
                size(row.nanoquant_bytes_decimal, row.nanoquant_bytes_binary)
            );
            for (_, (lo, hi), dec, bin) in row.baselines {
                let (slo, shi) = (size(dec.0, bin.0), size(dec.1, bin.1));
                line.push_str(&format!(
                    ",{:.2},{:.2},{:.2},{:.2}",
                    bpw::round2_half_even(lo),
                    bpw::round2_half_even(hi),
                    slo,
                    shi
                ));
            }
            csv.push_str(&line);
            csv.push('\n');
        }
        return emit(&csv);
    }

    let (label, shape) = load_shape(&a)?.ok_or_else(|| {
        nq_core::Error::InvalidConfig("give --shape-config or --model".into())
    })?;
    let mut method: Method = a.method.parse()?;
    if let (Method::Baseline(Baseline::Stbllm { .. }), Some(nm)) = (method, &a.nm) {
        let (n, m) = bpw::parse_nm(nm)?;
        method = Method::Baseline(Baseline::Stbllm { n, m });
    }
    let policy = match (a.rank, a.target_bpw) {
        (Some(r), _) => RankPolicy::Fixed(r),
        (None, Some(t)) => RankPolicy::TargetBpw(t),
        (None, None) => RankPolicy::TargetBpw(1.0),
    };
    let params = match method {
        Method::Baseline(b) => Some(BaselineParams { method: b, c: a.c, k: a.k }),
        _ => None,
    };
    let report = bpw::model_report(&shape, method, params.as_ref(), policy)?;
    let unit = match units {
        Units::Decimal => "gb",
        Units::Binary => "gib",
    };
    emit(&format!(
        "model\t{label}\nbpw\t{:.6}\ntotal_bits\t{}\nquantized_params\t{}\nsize_{unit}\t{:.4}\n",
        report.bpw,
        report.total_bits,
        report.quantized_params,
        size(report.bytes_decimal, report.bytes_binary)
    ))?;
    Ok(())
}

fn emit(text: &str) -> anyhow::Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => r.map_err(|e| nq_core::Error::from(e).into()),
    }
}

#[derive(Debug)]
struct VerifyFailure(String);

impl std::fmt::Display for VerifyFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "verification failed: {}", self.0)
    }
}

impl std::error::Error for VerifyFailure {}

fn verify(a: VerifyArgs) -> anyhow::Result<()> {
    let bytes = fs::read(&a.model)
        .map_err(nq_core::Error::from)
        .with_context(|| format!("reading {}", a.model.display()))?;
    let model = formats::read_nqpk(&bytes)?;
    let again = formats::write_nqpk(&model)?;
    if again != bytes {
        bail!(VerifyFailure("re-serialization differs from file".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut worst: f64 = 0.0;
    let mut out = String::new();
    for (name, layer) in &model.layers {
        let dense = reconstruct_dense(layer);
        for _ in 0..a.probes {
            let x: Vec<f64> = (0..layer.m()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let y = gemv_packed(layer, &x)?;
            let want = dense.matvec(&x)?;
            let norm = want.iter().map(|v| v * v).sum::<f64>().sqrt();
            let diff = y.iter().zip(&want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let rel = diff / norm.max(f64::MIN_POSITIVE);
            worst = worst.max(rel);
            if rel > 1e-10 {
                bail!(VerifyFailure(format!("layer `{name}`: gemv deviates by {rel:e}")));
            }
        }
        out.push_str(&format!("{name}\t{}x{}\tr={}\tok\n", layer.n(), layer.m(), layer.rank()));
    }
    out.push_str(&format!("round-trip ok; worst gemv relative deviation {worst:e}\n"));
    emit(&out)?;
    Ok(())
}

fn random_layer(n: usize, m: usize, r: usize, rng: &mut ChaCha8Rng) -> nq_core::Result<FactorizedLayer> {
    let mut gauss = |rows, cols| DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut *rng));
    let u = gauss(n, r);
    let v = gauss(m, r);
    let s1 = (0..n).map(|i| 0.5 + (i % 7) as f64 * 0.1).collect();
    let s2 = (0..m).map(|j| 0.5 + (j % 5) as f64 * 0.1).collect();
    FactorizedLayer::from_latents(&u, &v, s1, s2)
}

fn bench(a: BenchArgs) -> anyhow::Result<()> {
    if a.iters == 0 {
        bail!(nq_core::Error::InvalidConfig("--iters must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let layers: Vec<(String, FactorizedLayer)> = match &a.model {
        Some(p) => read_model(p)?.layers,
        None => {
            if a.n == 0 || a.m == 0 || a.rank == 0 {
                bail!(nq_core::Error::InvalidConfig("n, m and rank must be positive".into()));
            }
            vec![("random".into(), random_layer(a.n, a.m, a.rank, &mut rng)?)]
        }
    };
    let mut csv = String::from("layer,n,m,rank,packed_us,dense_us,speedup,packed_bytes,dense_bytes\n");
    for (name, layer) in &layers {
        let dense = reconstruct_dense(layer);
        let x: Vec<f64> = (0..layer.m()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut sink = 0.0;
        let t0 = Instant::now();
        for _ in 0..a.iters {
            sink += gemv_packed(layer, &x)?[0];
        }
        let packed = t0.elapsed().as_secs_f64() * 1e6 / a.iters as f64;
        let t0 = Instant::now();
        for _ in 0..a.iters {
            sink += dense.matvec(&x)?[0];
        }
        let dense_us = t0.elapsed().as_secs_f64() * 1e6 / a.iters as f64;
        std::hint::black_box(sink);
        csv.push_str(&format!(
            "{name},{},{},{},{packed:.2},{dense_us:.2},{:.3},{},{}\n",
            layer.n(),
            layer.m(),
            layer.rank(),
            dense_us / packed,
            layer.payload_bits() / 8,
            layer.n() * layer.m() * 2
        ));
    }
    match &a.out {
        Some(p) => write_file(p, csv.as_bytes())?,
        None => emit(&csv)?,
    }
    Ok(())
}
