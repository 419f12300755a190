//! Subcommand definitions and their implementations.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use countdown_core::analysis;
use countdown_core::blocked_exec::{self, BlockConfig, BenchResult, Reduction};
use countdown_core::calibration::{self, Indicator};
use countdown_core::costmodel::{self, CostMethod, CostReport, ShapeSpec};
use countdown_core::predictor::{
    self, LowRankPredictor, MaskMetrics, Predictor, PredictorKind, TernaryPredictor, TrainConfig,
};
use countdown_core::sparsity::{
    self, forward_practical, forward_sparse, threshold_ideal, PracticalContext,
};
use countdown_core::{Activation, ActivationMask, GatedMlpLayer, Mode, Rng, SparsityConfig, SparsityMethod};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::format::{read_matrix, ModelFile};

pub const REPORT_SCHEMA: &str = "countdown.run_report.v1";

/// Standard deviation of generated inputs.
const INPUT_STD: f32 = 1.0;

// Independent random streams derived from one user seed.
const STREAM_CALIBRATION: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_HELD_OUT: u64 = 3;
const STREAM_INIT: u64 = 4;
const STREAM_INFER: u64 = 5;
const STREAM_ANALYZE: u64 = 6;
const STREAM_BENCH: u64 = 7;

fn stream(seed: u64, tag: u64) -> Rng {
    Rng::seed(seed ^ tag.rotate_right(8))
}

#[derive(Debug, Parser)]
#[command(name = "countdown", version, about = "Sparse activation for Gated-MLP layers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a random Gated-MLP layer to a model file.
    GenModel(GenModelArgs),
    /// Estimate a constant threshold from Gaussian calibration inputs.
    Calibrate(CalibrateArgs),
    /// Train a D-CountDown mask predictor and embed it in a copy of the model.
    TrainPredictor(TrainArgs),
    /// Run dense or sparse forward passes and write a JSON report.
    Infer(InferArgs),
    /// Print the closed-form FLOPs and memory-traffic table.
    Cost(CostArgs),
    /// Time the blocked executors.
    Bench(BenchArgs),
    /// Sweep CIF/CAF mask-agreement metrics.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Dense,
    Cats,
    Mc,
    Dc,
}

impl From<MethodArg> for CostMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Dense => CostMethod::Dense,
            MethodArg::Cats => CostMethod::Cats,
            MethodArg::Mc => CostMethod::MCountdown,
            MethodArg::Dc => CostMethod::DCountdown,
        }
    }
}

impl MethodArg {
    fn sparse(self) -> Option<SparsityMethod> {
        match self {
            MethodArg::Dense => None,
            MethodArg::Cats => Some(SparsityMethod::Cats),
            MethodArg::Mc => Some(SparsityMethod::MCountdown),
            MethodArg::Dc => Some(SparsityMethod::DCountdown),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ActivationArg {
    Silu,
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum IndicatorArg {
    U,
    H,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Lowrank,
    Ternary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Ideal,
    Practical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    #[value(name = "llama3-8b")]
    Llama3_8b,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReductionArg {
    Ordered,
    Unordered,
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    #[arg(long)]
    pub d_model: usize,
    #[arg(long)]
    pub d_inter: usize,
    #[arg(long, value_enum, default_value_t = ActivationArg::Silu)]
    pub activation: ActivationArg,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    pub k: f64,
    /// Calibration set size T.
    #[arg(long, default_value_t = 512)]
    pub samples: usize,
    #[arg(long, value_enum, default_value_t = IndicatorArg::U)]
    pub indicator: IndicatorArg,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Output JSON path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    pub k: f64,
    #[arg(long, value_enum, default_value_t = KindArg::Lowrank)]
    pub kind: KindArg,
    /// Latent rank of the low-rank predictor.
    #[arg(long, default_value_t = 16)]
    pub rank: usize,
    #[arg(long, default_value_t = 80)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f32,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 2048)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Model file written with the trained predictor embedded.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss curve CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Mask metrics JSON; defaults to `<out>.metrics.json`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    #[arg(long, default_value_t = 0.7)]
    pub k: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Ideal)]
    pub mode: ModeArg,
    /// Calibration JSON from `calibrate`; required for practical CATS/MC.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    /// Raw-matrix file of inputs (rows = samples, cols = d_model).
    #[arg(long, conflicts_with = "n_samples")]
    pub inputs: Option<PathBuf>,
    /// Number of Gaussian inputs to generate when `--inputs` is absent.
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Report path; stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Embed the wall-clock generation time in the report.
    #[arg(long)]
    pub timestamps: bool,
}

#[derive(Debug, Args)]
pub struct ShapeArgs {
    #[arg(long, value_enum, conflicts_with_all = ["d_model", "d_inter"])]
    pub preset: Option<PresetArg>,
    #[arg(long)]
    pub d_model: Option<u64>,
    #[arg(long)]
    pub d_inter: Option<u64>,
    /// Predictor rank; defaults to 512 for the preset and d_model/8 otherwise.
    #[arg(long)]
    pub d_rank: Option<u64>,
}

impl ShapeArgs {
    fn resolve(&self) -> CliResult<Option<ShapeSpec>> {
        let base = match (self.preset, self.d_model, self.d_inter) {
            (Some(PresetArg::Llama3_8b), _, _) => ShapeSpec::llama3_8b(),
            (None, Some(dm), Some(di)) => ShapeSpec::new(dm, di, (dm / 8).max(1)),
            (None, None, None) => return Ok(None),
            _ => {
                return Err(CliError::Usage(
                    "give either --preset or both --d-model and --d-inter".into(),
                ))
            }
        };
        let mut sp = base;
        if let Some(dr) = self.d_rank {
            sp.d_rank = dr;
        }
        sp.validate()?;
        Ok(Some(sp))
    }
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[command(flatten)]
    pub shape: ShapeArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.7,0.8,0.9")]
    pub k_list: Vec<f64>,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    pub format: FormatArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Benchmark a model file instead of a generated layer.
    #[arg(long, conflicts_with_all = ["preset", "d_model", "d_inter"])]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub shape: ShapeArgs,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "dense,cats,mc,dc")]
    pub method: Vec<MethodArg>,
    #[arg(long, default_value_t = 0.7)]
    pub k: f64,
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    #[arg(long, default_value_t = 32)]
    pub blk_m: usize,
    #[arg(long, default_value_t = 128)]
    pub blk_n: usize,
    #[arg(long, value_enum, default_value_t = ReductionArg::Ordered)]
    pub reduction: ReductionArg,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.6,0.7,0.8,0.9")]
    pub k_list: Vec<f64>,
    #[arg(long, default_value_t = 256)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn dispatch(cli: Cli, stdout: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::GenModel(a) => cmd_gen_model(&a),
        Command::Calibrate(a) => cmd_calibrate(&a, stdout),
        Command::TrainPredictor(a) => cmd_train_predictor(&a),
        Command::Infer(a) => cmd_infer(&a, stdout),
        Command::Cost(a) => cmd_cost(&a, stdout),
        Command::Bench(a) => cmd_bench(&a, stdout),
        Command::Analyze(a) => cmd_analyze(&a, stdout),
    }
}

fn emit(out: Option<&Path>, stdout: &mut dyn Write, bytes: &[u8]) -> CliResult<()> {
    match out {
        Some(path) => std::fs::write(path, bytes).map_err(|e| CliError::io(path, e)),
        None => stdout
            .write_all(bytes)
            .map_err(|e| CliError::io("<stdout>", e)),
    }
}

fn pretty_json<T: Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn cmd_gen_model(a: &GenModelArgs) -> CliResult<()> {
    if a.d_model == 0 || a.d_inter == 0 {
        return Err(CliError::Data(format!(
            "dimensions must be at least 1 (got d_model={}, d_inter={})",
            a.d_model, a.d_inter
        )));
    }
    let activation = match a.activation {
        ActivationArg::Silu => Activation::Silu,
        ActivationArg::Gelu => Activation::Gelu,
    };
    let mut rng = Rng::seed(a.seed);
    let std = 1.0 / (a.d_model as f32).sqrt();
    let layer = GatedMlpLayer::random(a.d_model, a.d_inter, activation, std, &mut rng)?;
    ModelFile::new(layer, Some(a.seed)).write(&a.out)
}

/// Contents of the calibration JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub tau_hat: f32,
    pub samples: usize,
    pub k: f64,
    pub indicator: Indicator,
    pub seed: u64,
}

pub fn cmd_calibrate(a: &CalibrateArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let model = ModelFile::read(&a.model)?;
    let mut rng = stream(a.seed, STREAM_CALIBRATION);
    let xs = calibration::gaussian_inputs(&mut rng, a.samples, model.layer.d_model(), INPUT_STD);
    let indicator = match a.indicator {
        IndicatorArg::U => Indicator::U,
        IndicatorArg::H => Indicator::H,
    };
    let stats = calibration::calibrate(&model.layer, &xs, a.k, indicator)?;
    let file = CalibrationFile {
        tau_hat: stats.tau_hat,
        samples: stats.samples(),
        k: a.k,
        indicator,
        seed: a.seed,
    };
    emit(a.out.as_deref(), stdout, &pretty_json(&file)?)
}

#[derive(Debug, Serialize)]
struct TrainMetrics {
    kind: PredictorKind,
    k: f64,
    epochs: usize,
    n_samples: usize,
    footprint_bytes: u64,
    train: MaskMetrics,
    held_out: MaskMetrics,
}

pub fn cmd_train_predictor(a: &TrainArgs) -> CliResult<()> {
    let mut model = ModelFile::read(&a.model)?;
    let layer = &model.layer;
    let (dm, di) = (layer.d_model(), layer.d_inter());
    let cfg = TrainConfig {
        lr: a.lr,
        batch: a.batch,
        epochs: a.epochs,
        seed: a.seed,
        k: a.k,
        ..TrainConfig::default()
    };
    cfg.validate()?;

    let mut init_rng = stream(a.seed, STREAM_INIT);
    let initial = match a.kind {
        KindArg::Lowrank => Predictor::LowRank(LowRankPredictor::init(dm, a.rank, di, &mut init_rng)?),
        KindArg::Ternary => Predictor::Ternary(TernaryPredictor::init(dm, di, &mut init_rng)?),
    };
    let xs = calibration::gaussian_inputs(&mut stream(a.seed, STREAM_TRAIN), a.n_samples, dm, INPUT_STD);
    let held_out = calibration::gaussian_inputs(
        &mut stream(a.seed, STREAM_HELD_OUT),
        (a.n_samples / 4).max(1),
        dm,
        INPUT_STD,
    );
    let outcome = predictor::train(initial, layer, &xs, &cfg)?;
    let metrics = TrainMetrics {
        kind: outcome.predictor.kind(),
        k: a.k,
        epochs: a.epochs,
        n_samples: a.n_samples,
        footprint_bytes: outcome.predictor.footprint_bytes(),
        train: predictor::evaluate(&outcome.predictor, layer, &xs, a.k)?,
        held_out: predictor::evaluate(&outcome.predictor, layer, &held_out, a.k)?,
    };

    let mut csv = String::from("epoch,loss\n");
    for (epoch, loss) in outcome.losses.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", epoch + 1, loss));
    }
    let loss_path = a.loss_csv.clone().unwrap_or_else(|| with_suffix(&a.out, ".loss.csv"));
    let metrics_path = a.metrics.clone().unwrap_or_else(|| with_suffix(&a.out, ".metrics.json"));

    model.predictor = Some((outcome.predictor, a.k));
    model.write(&a.out)?;
    std::fs::write(&loss_path, csv).map_err(|e| CliError::io(&loss_path, e))?;
    std::fs::write(&metrics_path, pretty_json(&metrics)?).map_err(|e| CliError::io(&metrics_path, e))
}

#[derive(Debug, Serialize)]
pub struct ReportConfig {
    pub method: CostMethod,
    pub mode: &'static str,
    pub k: f64,
    pub seed: u64,
    pub n_samples: usize,
    pub inputs: Option<String>,
    pub tau_hat: Option<f32>,
}

#[derive(Debug, Serialize)]
pub struct ReportModel {
    pub d_model: usize,
    pub d_inter: usize,
    pub activation: Activation,
    pub predictor: Option<PredictorKind>,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct SampleRecord {
    pub index: usize,
    pub alive: usize,
    pub realized_sparsity: f64,
    /// `‖y − y_dense‖₂ / ‖y_dense‖₂`; null when the dense output is zero.
    pub deviation: Option<f64>,
    pub retained_mass: f64,
    pub y_sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Stats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count().max(1) as f64;
        Self {
            mean: values.clone().sum::<f64>() / n,
            min: values.clone().fold(f64::INFINITY, f64::min),
            max: values.fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ReportSummary {
    pub realized_sparsity: Stats,
    pub mean_alive: f64,
    pub mean_deviation: Option<f64>,
    pub mean_retained_mass: f64,
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub schema: &'static str,
    pub config: ReportConfig,
    pub model: ReportModel,
    pub samples: Vec<SampleRecord>,
    pub summary: ReportSummary,
    /// Closed-form cost at the mean realized alive count.
    pub cost: CostReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated_unix_s: Option<u64>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn l2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

fn relative_deviation(y: &[f32], dense: &[f32]) -> Option<f64> {
    let num = l2(y.iter().zip(dense).map(|(a, b)| *a as f64 - *b as f64));
    let den = l2(dense.iter().map(|&b| b as f64));
    if den > 0.0 {
        Some(num / den)
    } else if num == 0.0 {
        Some(0.0)
    } else {
        None
    }
}

fn load_calibration(path: &Path) -> CliResult<CalibrationFile> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Data(format!("{}: malformed calibration file: {e}", path.display())))
}

/// Builds the practical-mode context, checking that a calibration file
/// matches the method and sparsity it is used for.
fn practical_context(a: &InferArgs, method: SparsityMethod, model: &ModelFile) -> CliResult<PracticalContext> {
    let mut ctx = PracticalContext::default();
    match method {
        SparsityMethod::Cats | SparsityMethod::MCountdown => {
            let path = a.calibration.as_ref().ok_or_else(|| {
                CliError::Data(format!(
                    "practical {} needs --calibration",
                    method.name()
                ))
            })?;
            let calib = load_calibration(path)?;
            let want = if method == SparsityMethod::Cats { Indicator::H } else { Indicator::U };
            if calib.indicator != want {
                return Err(CliError::Data(format!(
                    "{}: calibrated on indicator {:?}, but {} thresholds {:?}",
                    path.display(),
                    calib.indicator,
                    method.name(),
                    want
                )));
            }
            if (calib.k - a.k).abs() > 1e-12 {
                return Err(CliError::Data(format!(
                    "{}: calibrated for k={}, requested k={}",
                    path.display(),
                    calib.k,
                    a.k
                )));
            }
            if method == SparsityMethod::Cats {
                ctx.tau_c = Some(calib.tau_hat);
            } else {
                ctx.tau_m = Some(calib.tau_hat);
            }
        }
        SparsityMethod::DCountdown => {
            ctx.predictor = model.predictor.as_ref().map(|(p, _)| p.clone());
        }
    }
    Ok(ctx)
}

pub fn build_report(a: &InferArgs) -> CliResult<RunReport> {
    let model_bytes = std::fs::read(&a.model).map_err(|e| CliError::io(&a.model, e))?;
    let model = ModelFile::from_bytes(&model_bytes)?;
    let layer = &model.layer;

    let xs: Vec<Vec<f32>> = match &a.inputs {
        Some(path) => {
            let m = read_matrix(path)?;
            if m.cols() != layer.d_model() {
                return Err(CliError::Data(format!(
                    "{}: inputs have {} columns, model d_model is {}",
                    path.display(),
                    m.cols(),
                    layer.d_model()
                )));
            }
            (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
        }
        None => calibration::gaussian_inputs(
            &mut stream(a.seed, STREAM_INFER),
            a.n_samples.unwrap_or(64),
            layer.d_model(),
            INPUT_STD,
        ),
    };
    if xs.is_empty() {
        return Err(CliError::Data("no input samples".into()));
    }

    let sparse = a.method.sparse();
    let mode = match a.mode {
        ModeArg::Ideal => Mode::Ideal,
        ModeArg::Practical => Mode::Practical,
    };
    let cfg = sparse.map(|m| SparsityConfig::new(m, a.k, mode)).transpose()?;
    let ctx = match (sparse, mode) {
        (Some(m), Mode::Practical) => Some(practical_context(a, m, &model)?),
        _ => None,
    };

    let mut samples = Vec::with_capacity(xs.len());
    for (index, x) in xs.iter().enumerate() {
        let trace = layer.forward_dense(x)?;
        let (y, mask) = match (&cfg, &ctx) {
            (None, _) => (trace.y.clone(), ActivationMask::full(layer.d_inter())),
            (Some(cfg), None) => {
                let mask = threshold_ideal(&trace, cfg);
                (forward_sparse(layer, x, &mask)?, mask)
            }
            (Some(cfg), Some(ctx)) => forward_practical(layer, x, cfg, ctx)?,
        };
        samples.push(SampleRecord {
            index,
            alive: mask.alive_count(),
            realized_sparsity: sparsity::realized_sparsity(&mask),
            deviation: relative_deviation(&y, &trace.y),
            retained_mass: sparsity::retained_mass(&trace.s, &mask),
            y_sha256: sha256_hex(&f32_bytes(&y)),
        });
    }

    let n = samples.len() as f64;
    let mean_alive = samples.iter().map(|s| s.alive as f64).sum::<f64>() / n;
    let deviations: Option<Vec<f64>> = samples.iter().map(|s| s.deviation).collect();
    let d_rank = model
        .predictor
        .as_ref()
        .and_then(|(p, _)| p.d_rank())
        .unwrap_or((layer.d_model() / 8).max(1));
    let shape = ShapeSpec::new(layer.d_model() as u64, layer.d_inter() as u64, d_rank as u64)
        .with_alive(mean_alive.round() as u64);
    let method = CostMethod::from(a.method);
    let mut cost = costmodel::cost_report(method, &shape, a.k);
    if method == CostMethod::Dense {
        cost.k = 0.0;
    }

    Ok(RunReport {
        schema: REPORT_SCHEMA,
        config: ReportConfig {
            method,
            mode: match (sparse, mode) {
                (None, _) => "dense",
                (_, Mode::Ideal) => "ideal",
                (_, Mode::Practical) => "practical",
            },
            k: if sparse.is_some() { a.k } else { 0.0 },
            seed: a.seed,
            n_samples: xs.len(),
            inputs: a.inputs.as_ref().map(|p| p.display().to_string()),
            tau_hat: ctx.as_ref().and_then(|c| c.tau_m.or(c.tau_c)),
        },
        model: ReportModel {
            d_model: layer.d_model(),
            d_inter: layer.d_inter(),
            activation: layer.activation(),
            predictor: model.predictor.as_ref().map(|(p, _)| p.kind()),
            sha256: sha256_hex(&model_bytes),
        },
        summary: ReportSummary {
            realized_sparsity: Stats::of(samples.iter().map(|s| s.realized_sparsity)),
            mean_alive,
            mean_deviation: deviations.map(|d| d.iter().sum::<f64>() / n),
            mean_retained_mass: samples.iter().map(|s| s.retained_mass).sum::<f64>() / n,
        },
        samples,
        cost,
        generated_unix_s: a.timestamps.then(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        }),
    })
}

pub fn cmd_infer(a: &InferArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let report = build_report(a)?;
    emit(a.report.as_deref(), stdout, &pretty_json(&report)?)
}

#[derive(Debug, Serialize)]
struct CostRow {
    method: CostMethod,
    k: f64,
    s_alive: u64,
    flops: u64,
    flops_m: f64,
    traffic_elements: u64,
    mem_mb: f64,
}

pub fn cost_csv(rows: &[CostReport]) -> String {
    let mut out = String::from("method,k,flops_m,mem_mb\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.2},{:.3}\n",
            r.method.name(),
            r.k,
            r.flops_m(),
            r.traffic_mb
        ));
    }
    out
}

pub fn cmd_cost(a: &CostArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let shape = a
        .shape
        .resolve()?
        .ok_or_else(|| CliError::Usage("give --preset or --d-model/--d-inter".into()))?;
    let rows = costmodel::cost_table(&shape, &a.k_list)?;
    let bytes = match a.format {
        FormatArg::Csv => cost_csv(&rows).into_bytes(),
        FormatArg::Json => pretty_json(
            &rows
                .iter()
                .map(|r| CostRow {
                    method: r.method,
                    k: r.k,
                    s_alive: r.s_alive,
                    flops: r.flops,
                    flops_m: r.flops_m(),
                    traffic_elements: r.traffic_elements,
                    mem_mb: r.traffic_mb,
                })
                .collect::<Vec<_>>(),
        )?,
    };
    emit(a.out.as_deref(), stdout, &bytes)
}

pub fn bench_csv(rows: &[BenchResult]) -> String {
    let mut out = String::from("method,k,d_model,d_inter,p50_ns,p95_ns,element_read_ratio\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.6}\n",
            r.method.name(),
            r.k,
            r.d_model,
            r.d_inter,
            r.p50_ns,
            r.p95_ns,
            r.element_read_ratio
        ));
    }
    out
}

pub fn cmd_bench(a: &BenchArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let cfg = BlockConfig::new(
        a.blk_m,
        a.blk_n,
        match a.reduction {
            ReductionArg::Ordered => Reduction::DeterministicOrdered,
            ReductionArg::Unordered => Reduction::UnorderedAccumulate,
        },
    );
    let (layer, d_rank) = match (&a.model, a.shape.resolve()?) {
        (Some(path), _) => {
            let model = ModelFile::read(path)?;
            let dm = model.layer.d_model();
            let d_rank = a
                .shape
                .d_rank
                .map(|r| r as usize)
                .or_else(|| model.predictor.as_ref().and_then(|(p, _)| p.d_rank()))
                .unwrap_or((dm / 8).max(1));
            (model.layer, d_rank)
        }
        (None, Some(sp)) => {
            let mut rng = Rng::seed(a.seed);
            let std = 1.0 / (sp.d_model as f32).sqrt();
            let layer = GatedMlpLayer::random(
                sp.d_model as usize,
                sp.d_inter as usize,
                Activation::Silu,
                std,
                &mut rng,
            )?;
            (layer, sp.d_rank as usize)
        }
        (None, None) => {
            return Err(CliError::Usage(
                "give --model, --preset, or --d-model/--d-inter".into(),
            ))
        }
    };
    let rows = a
        .method
        .iter()
        .map(|&m| {
            // Each method sees the same input vector.
            let mut rng = stream(a.seed, STREAM_BENCH);
            blocked_exec::bench_layer(&layer, m.into(), a.k, d_rank, a.iters, &cfg, &mut rng)
        })
        .collect::<countdown_core::Result<Vec<_>>>()?;
    emit(a.out.as_deref(), stdout, bench_csv(&rows).as_bytes())
}

pub fn analysis_csv(rows: &[analysis::AnalysisRow]) -> String {
    let mut out = String::from("k,metric,which,polarity,value\n");
    for r in rows {
        let value = r.value.map(|v| format!("{v:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.k,
            r.metric.name(),
            r.which.name(),
            r.polarity.name(),
            value
        ));
    }
    out
}

pub fn cmd_analyze(a: &AnalyzeArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let model = ModelFile::read(&a.model)?;
    let xs = calibration::gaussian_inputs(
        &mut stream(a.seed, STREAM_ANALYZE),
        a.n_samples,
        model.layer.d_model(),
        INPUT_STD,
    );
    let rows = analysis::sweep(&model.layer, &xs, &a.k_list)?;
    emit(a.out.as_deref(), stdout, analysis_csv(&rows).as_bytes())
}
