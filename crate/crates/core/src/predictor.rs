//! D-CountDown mask predictors.
//!
//! A predictor maps `x` to logits `ŝ` over the intermediate dimension; the
//! predicted index set is `{ i : ŝ[i] > 0 }`. Two architectures are provided:
//! a low-rank pair `θ_A·θ_B` and a full-rank ternary matrix trained through a
//! straight-through estimator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gated_mlp::GatedMlpLayer;
use crate::mask::ActivationMask;
use crate::numerics::{axpy, dot, top_m_threshold, vecmat, Mat32, Rng};
use crate::sparsity::{alive_count_for, check_ratio, realized_sparsity};

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankPredictor {
    /// `d_model × d_rank`
    theta_a: Mat32,
    /// `d_rank × d_inter`
    theta_b: Mat32,
}

impl LowRankPredictor {
    pub fn new(theta_a: Mat32, theta_b: Mat32) -> Result<Self> {
        if theta_a.cols() != theta_b.rows() {
            return Err(Error::dims(
                "LowRankPredictor::new",
                format!("theta_b with {} rows", theta_a.cols()),
                format!("{} rows", theta_b.rows()),
            ));
        }
        Ok(Self { theta_a, theta_b })
    }

    /// Fan-in uniform initialisation, `U(±1/√fan_in)` for each factor.
    pub fn init(d_model: usize, d_rank: usize, d_inter: usize, rng: &mut Rng) -> Result<Self> {
        if d_model == 0 || d_rank == 0 || d_inter == 0 {
            return Err(Error::InvalidArgument(format!(
                "predictor dimensions must be positive (d_model={d_model}, d_rank={d_rank}, d_inter={d_inter})"
            )));
        }
        let theta_a = Mat32::uniform(d_model, d_rank, 1.0 / (d_model as f32).sqrt(), rng);
        let theta_b = Mat32::uniform(d_rank, d_inter, 1.0 / (d_rank as f32).sqrt(), rng);
        Self::new(theta_a, theta_b)
    }

    pub fn theta_a(&self) -> &Mat32 {
        &self.theta_a
    }

    pub fn theta_b(&self) -> &Mat32 {
        &self.theta_b
    }

    pub fn d_rank(&self) -> usize {
        self.theta_a.cols()
    }

    /// `x·θ_A`
    pub fn latent(&self, x: &[f32]) -> Result<Vec<f32>> {
        vecmat(x, &self.theta_a)
    }
}

/// Full-precision shadow weights with a ternary forward view.
///
/// The forward pass uses `γ·clamp(round(shadow/γ), −1, 1)` where
/// `γ = mean|shadow|`.
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryPredictor {
    /// `d_model × d_inter`
    shadow: Mat32,
    gamma: f32,
    effective: Mat32,
}

const MIN_GAMMA: f32 = 1e-8;

impl TernaryPredictor {
    pub fn new(shadow: Mat32) -> Self {
        let (rows, cols) = shadow.shape();
        let mut p = Self {
            shadow,
            gamma: 1.0,
            effective: Mat32::zeros(rows, cols),
        };
        p.requantize();
        p
    }

    pub fn init(d_model: usize, d_inter: usize, rng: &mut Rng) -> Result<Self> {
        if d_model == 0 || d_inter == 0 {
            return Err(Error::InvalidArgument(format!(
                "predictor dimensions must be positive (d_model={d_model}, d_inter={d_inter})"
            )));
        }
        Ok(Self::new(Mat32::uniform(
            d_model,
            d_inter,
            1.0 / (d_model as f32).sqrt(),
            rng,
        )))
    }

    fn requantize(&mut self) {
        let n = self.shadow.data().len() as f64;
        let mean_abs = self.shadow.data().iter().map(|v| v.abs() as f64).sum::<f64>() / n;
        self.gamma = (mean_abs as f32).max(MIN_GAMMA);
        let gamma = self.gamma;
        for (e, &w) in self.effective.data_mut().iter_mut().zip(self.shadow.data()) {
            *e = gamma * ternary_level(w, gamma);
        }
    }

    pub fn shadow(&self) -> &Mat32 {
        &self.shadow
    }

    pub fn gamma(&self) -> f32 {
        self.gamma
    }

    /// Levels in `{−1, 0, +1}`, row-major `d_model × d_inter`.
    pub fn quantized(&self) -> Vec<i8> {
        self.shadow
            .data()
            .iter()
            .map(|&w| ternary_level(w, self.gamma) as i8)
            .collect()
    }

    /// `γ·quantized`, the matrix actually used for inference.
    pub fn effective(&self) -> &Mat32 {
        &self.effective
    }
}

#[inline]
fn ternary_level(w: f32, gamma: f32) -> f32 {
    (w / gamma).round().clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predictor {
    LowRank(LowRankPredictor),
    Ternary(TernaryPredictor),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    LowRank,
    Ternary,
}

impl Predictor {
    pub fn kind(&self) -> PredictorKind {
        match self {
            Predictor::LowRank(_) => PredictorKind::LowRank,
            Predictor::Ternary(_) => PredictorKind::Ternary,
        }
    }

    pub fn d_model(&self) -> usize {
        match self {
            Predictor::LowRank(p) => p.theta_a.rows(),
            Predictor::Ternary(p) => p.shadow.rows(),
        }
    }

    pub fn d_inter(&self) -> usize {
        match self {
            Predictor::LowRank(p) => p.theta_b.cols(),
            Predictor::Ternary(p) => p.shadow.cols(),
        }
    }

    pub fn d_rank(&self) -> Option<usize> {
        match self {
            Predictor::LowRank(p) => Some(p.d_rank()),
            Predictor::Ternary(_) => None,
        }
    }

    pub fn predict_logits(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.d_model() {
            return Err(Error::dims(
                "predict_logits",
                format!("x of length d_model={}", self.d_model()),
                format!("length {}", x.len()),
            ));
        }
        match self {
            Predictor::LowRank(p) => vecmat(&p.latent(x)?, &p.theta_b),
            Predictor::Ternary(p) => vecmat(x, &p.effective),
        }
    }

    pub fn predict_mask(&self, x: &[f32]) -> Result<ActivationMask> {
        let logits = self.predict_logits(x)?;
        Ok(ActivationMask::from_predicate(&logits, 0.0, |z| z > 0.0))
    }

    /// Storage size: f16 factors for low-rank, 2-bit levels plus one f16
    /// scale for ternary.
    pub fn footprint_bytes(&self) -> u64 {
        match self {
            Predictor::LowRank(p) => {
                let (dm, dr, di) = (
                    p.theta_a.rows() as u64,
                    p.d_rank() as u64,
                    p.theta_b.cols() as u64,
                );
                lowrank_footprint_bytes(dm, dr, di)
            }
            Predictor::Ternary(p) => {
                ternary_footprint_bytes(p.shadow.rows() as u64, p.shadow.cols() as u64)
            }
        }
    }
}

pub fn lowrank_footprint_bytes(d_model: u64, d_rank: u64, d_inter: u64) -> u64 {
    (d_model * d_rank + d_rank * d_inter) * 2
}

pub fn ternary_footprint_bytes(d_model: u64, d_inter: u64) -> u64 {
    (d_model * d_inter * 2).div_ceil(8) + 2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch: usize,
    pub epochs: usize,
    pub optimizer: AdamWParams,
    pub seed: u64,
    pub k: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 16,
            epochs: 80,
            optimizer: AdamWParams::default(),
            seed: 42,
            k: 0.7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be at least 1".into()));
        }
        check_ratio(self.k)
    }
}

/// Per-sample binary targets: top-m of `|s|` where `m = alive_count_for(k)`.
pub fn build_targets(layer: &GatedMlpLayer, xs: &[Vec<f32>], k: f64) -> Result<Vec<Vec<bool>>> {
    if xs.is_empty() {
        return Err(Error::EmptyInput("build_targets"));
    }
    check_ratio(k)?;
    let m = alive_count_for(k, layer.d_inter());
    xs.iter()
        .map(|x| {
            let trace = layer.forward_dense(x)?;
            Ok(top_m_threshold(&trace.s, m)?.1.as_slice().to_vec())
        })
        .collect()
}

/// Result of [`train`]: the fitted predictor and its per-epoch mean BCE.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub predictor: Predictor,
    pub losses: Vec<f32>,
}

/// Fits `p` to the ideal D-CountDown masks of `layer` on `xs`.
pub fn train(
    p: Predictor,
    layer: &GatedMlpLayer,
    xs: &[Vec<f32>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let targets = build_targets(layer, xs, cfg.k)?;
    train_on_targets(p, xs, &targets, cfg)
}

struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
}

impl AdamState {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f32, t: i32, hp: &AdamWParams) {
        let bc1 = 1.0 - hp.beta1.powi(t);
        let bc2 = 1.0 - hp.beta2.powi(t);
        let decay = 1.0 - lr * hp.weight_decay;
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
            *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p * decay - lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
}

/// Numerically stable `softplus(z) − y·z`, the BCE of `sigmoid(z)` vs `y`.
#[inline]
fn bce_with_logit(z: f32, y: f32) -> f64 {
    let z = z as f64;
    z.max(0.0) - y as f64 * z + (-z.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(z: f32) -> f32 {
    (1.0 / (1.0 + (-(z as f64)).exp())) as f32
}

/// Mini-batch AdamW on mean BCE against explicit binary targets.
pub fn train_on_targets(
    p: Predictor,
    xs: &[Vec<f32>],
    targets: &[Vec<bool>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if xs.is_empty() {
        return Err(Error::EmptyInput("train"));
    }
    if xs.len() != targets.len() {
        return Err(Error::dims("train", format!("{} targets", xs.len()), targets.len()));
    }
    let (d_model, d_inter) = (p.d_model(), p.d_inter());
    for (x, t) in xs.iter().zip(targets) {
        if x.len() != d_model || t.len() != d_inter {
            return Err(Error::dims(
                "train",
                format!("samples of length {d_model} and targets of length {d_inter}"),
                format!("{} and {}", x.len(), t.len()),
            ));
        }
    }
    match p {
        Predictor::LowRank(lr) => {
            let (lr, losses) = train_lowrank(lr, xs, targets, cfg)?;
            Ok(TrainOutcome {
                predictor: Predictor::LowRank(lr),
                losses,
            })
        }
        Predictor::Ternary(t) => {
            let (t, losses) = train_ternary(t, xs, targets, cfg)?;
            Ok(TrainOutcome {
                predictor: Predictor::Ternary(t),
                losses,
            })
        }
    }
}

/// Runs the epoch/batch loop; `step` computes gradients for one batch, applies
/// the update and returns the summed BCE over the batch.
fn run_epochs(
    n: usize,
    d_inter: usize,
    cfg: &TrainConfig,
    mut step: impl FnMut(&[usize], i32) -> f64,
) -> Result<Vec<f32>> {
    let mut rng = Rng::seed(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut t = 0i32;
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0f64;
        for (b, batch) in order.chunks(cfg.batch).enumerate() {
            t += 1;
            let batch_loss = step(batch, t);
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step: b });
            }
            total += batch_loss;
        }
        losses.push((total / (n * d_inter) as f64) as f32);
    }
    Ok(losses)
}

fn train_lowrank(
    mut p: LowRankPredictor,
    xs: &[Vec<f32>],
    targets: &[Vec<bool>],
    cfg: &TrainConfig,
) -> Result<(LowRankPredictor, Vec<f32>)> {
    let (d_model, d_rank, d_inter) = (p.theta_a.rows(), p.d_rank(), p.theta_b.cols());
    let mut state_a = AdamState::new(d_model * d_rank);
    let mut state_b = AdamState::new(d_rank * d_inter);
    let mut grad_a = vec![0.0f32; d_model * d_rank];
    let mut grad_b = vec![0.0f32; d_rank * d_inter];
    let mut dz = vec![0.0f32; d_inter];
    let mut dlatent = vec![0.0f32; d_rank];

    let losses = run_epochs(xs.len(), d_inter, cfg, |batch, t| {
        grad_a.fill(0.0);
        grad_b.fill(0.0);
        let norm = 1.0 / (batch.len() * d_inter) as f32;
        let mut loss = 0.0f64;
        for &j in batch {
            let x = &xs[j];
            let latent = vecmat(x, &p.theta_a).expect("shape checked");
            let logits = vecmat(&latent, &p.theta_b).expect("shape checked");
            for (i, (&z, &y)) in logits.iter().zip(&targets[j]).enumerate() {
                let y = if y { 1.0 } else { 0.0 };
                loss += bce_with_logit(z, y);
                dz[i] = (sigmoid(z) - y) * norm;
            }
            for r in 0..d_rank {
                axpy(latent[r], &dz, &mut grad_b[r * d_inter..(r + 1) * d_inter]);
                dlatent[r] = dot(p.theta_b.row(r), &dz);
            }
            for (jm, &xj) in x.iter().enumerate() {
                axpy(xj, &dlatent, &mut grad_a[jm * d_rank..(jm + 1) * d_rank]);
            }
        }
        state_a.step(p.theta_a.data_mut(), &grad_a, cfg.lr, t, &cfg.optimizer);
        state_b.step(p.theta_b.data_mut(), &grad_b, cfg.lr, t, &cfg.optimizer);
        loss
    })?;
    Ok((p, losses))
}

fn train_ternary(
    mut p: TernaryPredictor,
    xs: &[Vec<f32>],
    targets: &[Vec<bool>],
    cfg: &TrainConfig,
) -> Result<(TernaryPredictor, Vec<f32>)> {
    let (d_model, d_inter) = p.shadow.shape();
    let mut state = AdamState::new(d_model * d_inter);
    let mut grad = vec![0.0f32; d_model * d_inter];
    let mut dz = vec![0.0f32; d_inter];

    let losses = run_epochs(xs.len(), d_inter, cfg, |batch, t| {
        grad.fill(0.0);
        let norm = 1.0 / (batch.len() * d_inter) as f32;
        let mut loss = 0.0f64;
        for &j in batch {
            let x = &xs[j];
            let logits = vecmat(x, &p.effective).expect("shape checked");
            for (i, (&z, &y)) in logits.iter().zip(&targets[j]).enumerate() {
                let y = if y { 1.0 } else { 0.0 };
                loss += bce_with_logit(z, y);
                dz[i] = (sigmoid(z) - y) * norm;
            }
            // Straight-through: the gradient w.r.t. the quantized matrix is
            // applied to the shadow weights unchanged.
            for (jm, &xj) in x.iter().enumerate() {
                axpy(xj, &dz, &mut grad[jm * d_inter..(jm + 1) * d_inter]);
            }
        }
        state.step(p.shadow.data_mut(), &grad, cfg.lr, t, &cfg.optimizer);
        p.requantize();
        loss
    })?;
    Ok((p, losses))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub realized_sparsity: f64,
}

/// Precision, recall and F1 of one predicted mask against its target.
///
/// Ratios with an empty denominator count as 0, except that an empty
/// prediction of an empty target scores 1 on all three.
pub fn mask_metrics(predicted: &[bool], target: &[bool]) -> MaskMetrics {
    let tp = predicted.iter().zip(target).filter(|(&p, &t)| p && t).count() as f64;
    let n_pred = predicted.iter().filter(|&&p| p).count() as f64;
    let n_true = target.iter().filter(|&&t| t).count() as f64;
    let (precision, recall) = if n_pred == 0.0 && n_true == 0.0 {
        (1.0, 1.0)
    } else {
        (
            if n_pred > 0.0 { tp / n_pred } else { 0.0 },
            if n_true > 0.0 { tp / n_true } else { 0.0 },
        )
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let realized = if predicted.is_empty() {
        0.0
    } else {
        1.0 - n_pred / predicted.len() as f64
    };
    MaskMetrics {
        precision,
        recall,
        f1,
        realized_sparsity: realized,
    }
}

/// Sample-averaged metrics over paired predictions and targets.
pub fn average_metrics<'a>(
    pairs: impl IntoIterator<Item = (&'a [bool], &'a [bool])>,
) -> Result<MaskMetrics> {
    let mut acc = [0.0f64; 4];
    let mut n = 0usize;
    for (p, t) in pairs {
        let m = mask_metrics(p, t);
        acc[0] += m.precision;
        acc[1] += m.recall;
        acc[2] += m.f1;
        acc[3] += m.realized_sparsity;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyInput("average_metrics"));
    }
    let n = n as f64;
    Ok(MaskMetrics {
        precision: acc[0] / n,
        recall: acc[1] / n,
        f1: acc[2] / n,
        realized_sparsity: acc[3] / n,
    })
}

/// Scores the predictor against ideal D-CountDown masks of `layer`.
pub fn evaluate(
    p: &Predictor,
    layer: &GatedMlpLayer,
    xs: &[Vec<f32>],
    k: f64,
) -> Result<MaskMetrics> {
    let targets = build_targets(layer, xs, k)?;
    evaluate_on_targets(p, xs, &targets)
}

pub fn evaluate_on_targets(
    p: &Predictor,
    xs: &[Vec<f32>],
    targets: &[Vec<bool>],
) -> Result<MaskMetrics> {
    let predicted: Vec<ActivationMask> = xs
        .iter()
        .map(|x| p.predict_mask(x))
        .collect::<Result<_>>()?;
    let mut metrics = average_metrics(
        predicted
            .iter()
            .zip(targets)
            .map(|(m, t)| (m.as_slice(), t.as_slice())),
    )?;
    metrics.realized_sparsity =
        predicted.iter().map(realized_sparsity).sum::<f64>() / predicted.len() as f64;
    Ok(metrics)
}

/// Inputs and per-sample target masks.
pub type PlantedTask = (Vec<Vec<f32>>, Vec<Vec<bool>>);

/// Synthetic task whose targets are the top-m entries of a planted rank-`d_rank`
/// logit map `x·A*·B*`. Inputs carry a constant leading feature so a
/// bias-free linear predictor can represent the per-sample cut-off.
pub fn planted_task(
    d_model: usize,
    d_inter: usize,
    d_rank: usize,
    n: usize,
    k: f64,
    rng: &mut Rng,
) -> Result<PlantedTask> {
    check_ratio(k)?;
    let a = Mat32::gaussian(d_model, d_rank, 1.0 / (d_model as f32).sqrt(), rng);
    let b = Mat32::gaussian(d_rank, d_inter, 1.0 / (d_rank as f32).sqrt(), rng);
    let m = alive_count_for(k, d_inter);
    let mut xs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x = rng.gaussian_vec(d_model, 1.0);
        x[0] = 1.0;
        let logits = vecmat(&vecmat(&x, &a)?, &b)?;
        // Rank by signed logit: shift so the largest values have the largest
        // magnitudes before reusing the magnitude selector.
        let floor = logits.iter().copied().fold(f32::INFINITY, f32::min);
        let shifted: Vec<f32> = logits.iter().map(|z| z - floor).collect();
        targets.push(top_m_threshold(&shifted, m)?.1.as_slice().to_vec());
        xs.push(x);
    }
    Ok((xs, targets))
}
