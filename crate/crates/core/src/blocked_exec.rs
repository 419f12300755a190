//! Blocked, mask-gated CPU executors mirroring the Triton-style kernels.
//!
//! Each sparse method runs as a prepass (dense indicator, abs, threshold, or
//! the low-rank predictor) followed by two kernels:
//!
//! 1. a row-blocked masked GEMV over `d_inter` that fuses the activation and
//!    the elementwise product and stores the full-length intermediate;
//! 2. a masked down-projection blocked over `(d_inter, d_model)` that
//!    reduces into `y`.
//!
//! Loads are accounted at lane granularity: a masked-out lane costs nothing
//! and is never dereferenced. The executor reads `x` and the intermediate
//! once per kernel and reuses them across blocks. Counts are recorded per
//! stage under the same labels as [`crate::costmodel::traffic_terms`].

use std::ops::Range;
use std::time::Instant;

use serde::Serialize;

use crate::costmodel::{CostMethod, ShapeSpec, TrafficKind, TrafficTerm};
use crate::error::{Error, Result};
use crate::gated_mlp::GatedMlpLayer;
use crate::mask::ActivationMask;
use crate::numerics::{dot, top_m_threshold, Rng};
use crate::predictor::LowRankPredictor;
use crate::sparsity::alive_count_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Fixed ascending-index accumulation; bitwise identical for any blocking.
    DeterministicOrdered,
    /// Per-block partial sums combined in arrival order, like `atomic_add`.
    UnorderedAccumulate,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "ordered" | "deterministic" | "deterministic-ordered" => {
                Ok(Reduction::DeterministicOrdered)
            }
            "unordered" | "unordered-accumulate" | "atomic" => Ok(Reduction::UnorderedAccumulate),
            other => Err(Error::InvalidArgument(format!("unknown reduction '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BlockConfig {
    /// Rows of the intermediate dimension per block.
    pub blk_m: usize,
    /// Columns of the model dimension per block.
    pub blk_n: usize,
    pub reduction: Reduction,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            blk_m: 32,
            blk_n: 128,
            reduction: Reduction::DeterministicOrdered,
        }
    }
}

impl BlockConfig {
    pub fn new(blk_m: usize, blk_n: usize, reduction: Reduction) -> Self {
        Self {
            blk_m,
            blk_n,
            reduction,
        }
    }

    /// Block sizes clamped to `[1, dim]`.
    fn clamped(&self, d_inter: usize, d_model: usize) -> (usize, usize) {
        (
            self.blk_m.clamp(1, d_inter.max(1)),
            self.blk_n.clamp(1, d_model.max(1)),
        )
    }
}

fn blocks(len: usize, size: usize) -> impl DoubleEndedIterator<Item = Range<usize>> {
    (0..len.div_ceil(size)).map(move |b| b * size..((b + 1) * size).min(len))
}

/// Element counts of one instrumented pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TrafficCounter {
    pub weight_reads: u64,
    pub vector_reads: u64,
    pub writes: u64,
    stages: Vec<TrafficTerm>,
}

impl TrafficCounter {
    pub fn total(&self) -> u64 {
        self.weight_reads + self.vector_reads + self.writes
    }

    /// Per-stage counts, merged by label, in first-seen order.
    pub fn stages(&self) -> &[TrafficTerm] {
        &self.stages
    }

    pub fn record(&mut self, label: &'static str, kind: TrafficKind, elements: u64) {
        match kind {
            TrafficKind::WeightRead => self.weight_reads += elements,
            TrafficKind::VectorRead => self.vector_reads += elements,
            TrafficKind::Write => self.writes += elements,
        }
        match self.stages.iter_mut().find(|t| t.label == label) {
            Some(t) => {
                debug_assert_eq!(t.kind, kind);
                t.elements += elements;
            }
            None => self.stages.push(TrafficTerm {
                label,
                kind,
                elements,
            }),
        }
    }

    pub fn merge(&mut self, other: &TrafficCounter) {
        for t in &other.stages {
            self.record(t.label, t.kind, t.elements);
        }
    }
}

fn check_mask(layer: &GatedMlpLayer, op: &'static str, x: &[f32], mask: &ActivationMask) -> Result<()> {
    layer.check_input(op, x)?;
    layer.check_inter(op, mask.len())
}

/// Row-blocked masked dot products: for every alive row `i`, `Σ_j w[i,j]·x[j]`.
/// Dead rows are left at zero and never touched.
fn masked_row_dots(
    w: &crate::numerics::Mat32,
    x: &[f32],
    mask: &ActivationMask,
    cfg: &BlockConfig,
    out: &mut [f32],
) -> u64 {
    let (blk_m, blk_n) = cfg.clamped(w.rows(), w.cols());
    let mut reads = 0u64;
    for rm in blocks(w.rows(), blk_m) {
        for i in rm {
            if !mask.is_alive(i) {
                continue;
            }
            let row = w.row(i);
            let mut acc = 0.0f32;
            for rn in blocks(w.cols(), blk_n) {
                let (wb, xb) = (&row[rn.clone()], &x[rn.clone()]);
                match cfg.reduction {
                    Reduction::DeterministicOrdered => {
                        for (&wj, &xj) in wb.iter().zip(xb) {
                            acc += wj * xj;
                        }
                    }
                    Reduction::UnorderedAccumulate => acc += dot(wb, xb),
                }
                reads += rn.len() as u64;
            }
            out[i] = acc;
        }
    }
    reads
}

/// Down projection over alive rows, blocked over `(d_inter, d_model)`.
fn masked_down_projection(
    layer: &GatedMlpLayer,
    inter: &[f32],
    mask: &ActivationMask,
    cfg: &BlockConfig,
    counter: &mut TrafficCounter,
) -> Vec<f32> {
    let w = layer.w_down();
    let (d_inter, d_model) = w.shape();
    let (blk_m, blk_n) = cfg.clamped(d_inter, d_model);

    // The intermediate is loaded once and shared by every block.
    let inter = inter.to_vec();

    let mut y = vec![0.0f32; d_model];
    let mut reads = 0u64;
    for rn in blocks(d_model, blk_n) {
        match cfg.reduction {
            Reduction::DeterministicOrdered => {
                for rm in blocks(d_inter, blk_m) {
                    for i in rm.filter(|&i| mask.is_alive(i)) {
                        let s = inter[i];
                        let row = &w.row(i)[rn.clone()];
                        for (yj, &wj) in y[rn.clone()].iter_mut().zip(row) {
                            *yj += s * wj;
                        }
                        reads += rn.len() as u64;
                    }
                }
            }
            Reduction::UnorderedAccumulate => {
                let partials: Vec<Vec<f32>> = blocks(d_inter, blk_m)
                    .map(|rm| {
                        let mut part = vec![0.0f32; rn.len()];
                        for i in rm.filter(|&i| mask.is_alive(i)) {
                            let s = inter[i];
                            for (pj, &wj) in part.iter_mut().zip(&w.row(i)[rn.clone()]) {
                                *pj += s * wj;
                            }
                            reads += rn.len() as u64;
                        }
                        part
                    })
                    .collect();
                // Row blocks land in reverse order of issue.
                for part in partials.iter().rev() {
                    for (yj, &pj) in y[rn.clone()].iter_mut().zip(part) {
                        *yj += pj;
                    }
                }
            }
        }
    }
    counter.record("read sparse W_down", TrafficKind::WeightRead, reads);
    counter.record("read inter", TrafficKind::VectorRead, d_inter as u64);
    counter.record("write y", TrafficKind::Write, d_model as u64);
    y
}

/// Unfused dense pipeline: two GEMVs, activation, product, down projection.
pub fn exec_dense(layer: &GatedMlpLayer, x: &[f32], cfg: &BlockConfig) -> Result<(Vec<f32>, TrafficCounter)> {
    layer.check_input("exec_dense", x)?;
    let (d_inter, d_model) = (layer.d_inter() as u64, layer.d_model() as u64);
    let full = ActivationMask::full(layer.d_inter());
    let mut c = TrafficCounter::default();

    let mut up = vec![0.0f32; layer.d_inter()];
    let mut gate = vec![0.0f32; layer.d_inter()];
    let r_up = masked_row_dots(layer.w_up(), x, &full, cfg, &mut up);
    let r_gate = masked_row_dots(layer.w_gate(), x, &full, cfg, &mut gate);
    c.record("read full W_up, W_gate", TrafficKind::WeightRead, r_up + r_gate);
    c.record("read x (x2)", TrafficKind::VectorRead, 2 * d_model);
    c.record("write gate, up", TrafficKind::Write, 2 * d_inter);

    let act = layer.activation();
    let act_gate: Vec<f32> = gate.iter().map(|&g| act.apply(g)).collect();
    c.record("read gate", TrafficKind::VectorRead, d_inter);
    c.record("write act_gate", TrafficKind::Write, d_inter);

    let inter: Vec<f32> = up.iter().zip(&act_gate).map(|(u, h)| u * h).collect();
    c.record("read act_gate, up", TrafficKind::VectorRead, 2 * d_inter);
    c.record("write inter", TrafficKind::Write, d_inter);

    let mut down = TrafficCounter::default();
    let y = masked_down_projection(layer, &inter, &full, cfg, &mut down);
    for t in down.stages() {
        let label = if t.label == "read sparse W_down" {
            "read full W_down"
        } else {
            t.label
        };
        c.record(label, t.kind, t.elements);
    }
    Ok((y, c))
}

/// Dense `W_up` pass, `|u|`, and `Mask = |u| > tau`.
pub fn mc_prepass(layer: &GatedMlpLayer, x: &[f32], tau: f32) -> Result<(Vec<f32>, ActivationMask, TrafficCounter)> {
    layer.check_input("mc_prepass", x)?;
    let (d_inter, d_model) = (layer.d_inter() as u64, layer.d_model() as u64);
    let mut c = TrafficCounter::default();
    let u = layer.up_projection(x)?;
    c.record("read full W_up", TrafficKind::WeightRead, d_inter * d_model);
    c.record("read x", TrafficKind::VectorRead, d_model);
    c.record("write up", TrafficKind::Write, d_inter);
    let abs_u: Vec<f32> = u.iter().map(|v| v.abs()).collect();
    c.record("read up", TrafficKind::VectorRead, d_inter);
    c.record("write abs_up", TrafficKind::Write, d_inter);
    let mask = ActivationMask::from_predicate(&abs_u, tau, |a| a > tau);
    c.record("read abs_up", TrafficKind::VectorRead, d_inter);
    c.record("write mask", TrafficKind::Write, d_inter);
    Ok((u, mask, c))
}

/// Dense `W_gate` pass, activation, `|h|`, and `Mask = |h| > tau`.
pub fn cats_prepass(layer: &GatedMlpLayer, x: &[f32], tau: f32) -> Result<(Vec<f32>, ActivationMask, TrafficCounter)> {
    layer.check_input("cats_prepass", x)?;
    let (d_inter, d_model) = (layer.d_inter() as u64, layer.d_model() as u64);
    let mut c = TrafficCounter::default();
    let gate: Vec<f32> = (0..layer.d_inter()).map(|i| dot(layer.w_gate().row(i), x)).collect();
    c.record("read full W_gate", TrafficKind::WeightRead, d_inter * d_model);
    c.record("read x", TrafficKind::VectorRead, d_model);
    c.record("write gate", TrafficKind::Write, d_inter);
    let act = layer.activation();
    let h: Vec<f32> = gate.iter().map(|&g| act.apply(g)).collect();
    c.record("read gate", TrafficKind::VectorRead, d_inter);
    c.record("write act_gate", TrafficKind::Write, d_inter);
    let abs_h: Vec<f32> = h.iter().map(|v| v.abs()).collect();
    c.record("read act_gate", TrafficKind::VectorRead, d_inter);
    c.record("write abs_act_gate", TrafficKind::Write, d_inter);
    let mask = ActivationMask::from_predicate(&abs_h, tau, |a| a > tau);
    c.record("read abs_act_gate", TrafficKind::VectorRead, d_inter);
    c.record("write mask", TrafficKind::Write, d_inter);
    Ok((h, mask, c))
}

/// Low-rank predictor pass and `Mask = ŝ > threshold`.
pub fn dc_prepass(
    predictor: &LowRankPredictor,
    x: &[f32],
    threshold: f32,
) -> Result<(Vec<f32>, ActivationMask, TrafficCounter)> {
    let (d_model, d_rank) = predictor.theta_a().shape();
    let d_inter = predictor.theta_b().cols();
    let mut c = TrafficCounter::default();
    let latent = predictor.latent(x)?;
    c.record("read theta_A", TrafficKind::WeightRead, (d_model * d_rank) as u64);
    c.record("read x", TrafficKind::VectorRead, d_model as u64);
    c.record("write latent", TrafficKind::Write, d_rank as u64);
    let s_hat = crate::numerics::vecmat(&latent, predictor.theta_b())?;
    c.record("read theta_B", TrafficKind::WeightRead, (d_rank * d_inter) as u64);
    c.record("read latent", TrafficKind::VectorRead, d_rank as u64);
    c.record("write s_hat", TrafficKind::Write, d_inter as u64);
    let mask = ActivationMask::from_predicate(&s_hat, threshold, |z| z > threshold);
    c.record("read s_hat", TrafficKind::VectorRead, d_inter as u64);
    c.record("write mask", TrafficKind::Write, d_inter as u64);
    Ok((s_hat, mask, c))
}

/// Kernel 1 shared by MC and CATS: masked GEMV over `w`, fused with the
/// precomputed indicator `other` loaded only on alive lanes.
fn fused_masked_gemv(
    layer: &GatedMlpLayer,
    x: &[f32],
    other: &[f32],
    mask: &ActivationMask,
    cfg: &BlockConfig,
    method: CostMethod,
    c: &mut TrafficCounter,
) -> Vec<f32> {
    let d_inter = layer.d_inter();
    let x_local = x.to_vec();
    c.record("read x", TrafficKind::VectorRead, x.len() as u64);
    c.record("read mask", TrafficKind::VectorRead, d_inter as u64);

    let (w, w_label, other_label) = match method {
        CostMethod::MCountdown => (layer.w_gate(), "read sparse W_gate", "read sparse up"),
        _ => (layer.w_up(), "read sparse W_up", "read sparse act_gate"),
    };
    let mut acc = vec![0.0f32; d_inter];
    let reads = masked_row_dots(w, &x_local, mask, cfg, &mut acc);
    c.record(w_label, TrafficKind::WeightRead, reads);

    let act = layer.activation();
    let mut inter = vec![0.0f32; d_inter];
    let mut other_reads = 0u64;
    for i in mask.alive_indices() {
        other_reads += 1;
        inter[i] = match method {
            // acc ← σ(acc)·u
            CostMethod::MCountdown => act.apply(acc[i]) * other[i],
            // acc ← u·σ(gate)
            _ => acc[i] * other[i],
        };
    }
    c.record(other_label, TrafficKind::VectorRead, other_reads);
    c.record("write inter", TrafficKind::Write, d_inter as u64);
    inter
}

/// M-CountDown kernels. `u` and `mask` come from [`mc_prepass`]; the returned
/// counter covers the two kernels only.
pub fn exec_mc(
    layer: &GatedMlpLayer,
    x: &[f32],
    u: &[f32],
    mask: &ActivationMask,
    cfg: &BlockConfig,
) -> Result<(Vec<f32>, TrafficCounter)> {
    check_mask(layer, "exec_mc", x, mask)?;
    layer.check_inter("exec_mc (u)", u.len())?;
    let mut c = TrafficCounter::default();
    let inter = fused_masked_gemv(layer, x, u, mask, cfg, CostMethod::MCountdown, &mut c);
    let y = masked_down_projection(layer, &inter, mask, cfg, &mut c);
    Ok((y, c))
}

/// CATS kernels. `h` and `mask` come from [`cats_prepass`].
pub fn exec_cats(
    layer: &GatedMlpLayer,
    x: &[f32],
    h: &[f32],
    mask: &ActivationMask,
    cfg: &BlockConfig,
) -> Result<(Vec<f32>, TrafficCounter)> {
    check_mask(layer, "exec_cats", x, mask)?;
    layer.check_inter("exec_cats (h)", h.len())?;
    let mut c = TrafficCounter::default();
    let inter = fused_masked_gemv(layer, x, h, mask, cfg, CostMethod::Cats, &mut c);
    let y = masked_down_projection(layer, &inter, mask, cfg, &mut c);
    Ok((y, c))
}

/// D-CountDown kernels: fused masked dual GEMV (`up·σ(gate)`), then the
/// masked down projection.
pub fn exec_dc(
    layer: &GatedMlpLayer,
    x: &[f32],
    mask: &ActivationMask,
    cfg: &BlockConfig,
) -> Result<(Vec<f32>, TrafficCounter)> {
    check_mask(layer, "exec_dc", x, mask)?;
    let d_inter = layer.d_inter();
    let mut c = TrafficCounter::default();
    let x_local = x.to_vec();
    c.record("read x", TrafficKind::VectorRead, x.len() as u64);
    c.record("read mask", TrafficKind::VectorRead, d_inter as u64);

    let mut up = vec![0.0f32; d_inter];
    let mut gate = vec![0.0f32; d_inter];
    let reads = masked_row_dots(layer.w_up(), &x_local, mask, cfg, &mut up)
        + masked_row_dots(layer.w_gate(), &x_local, mask, cfg, &mut gate);
    c.record("read sparse W_up, W_gate", TrafficKind::WeightRead, reads);

    let act = layer.activation();
    let mut inter = vec![0.0f32; d_inter];
    for i in mask.alive_indices() {
        inter[i] = up[i] * act.apply(gate[i]);
    }
    c.record("write inter", TrafficKind::Write, d_inter as u64);

    let y = masked_down_projection(layer, &inter, mask, cfg, &mut c);
    Ok((y, c))
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub method: CostMethod,
    pub k: f64,
    pub d_model: usize,
    pub d_inter: usize,
    pub iters: usize,
    pub p50_ns: u64,
    pub p95_ns: u64,
    /// Instrumented elements touched by one pass of `method`.
    pub elements: u64,
    /// Same count for the dense pipeline on the same layer.
    pub dense_elements: u64,
    pub element_read_ratio: f64,
}

/// Nearest-rank percentile of an ascending sample.
fn percentile(sorted: &[u64], p: f64) -> u64 {
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Times one full forward pass (prepass included) of `method` on `layer`.
///
/// Masks are count-exact: the threshold is set to the top-m cut-off of the
/// method's indicator on the benchmark input, so the pass keeps exactly
/// `alive_count_for(k, d_inter)` columns. D-CountDown uses a randomly
/// initialised low-rank predictor of rank `d_rank`.
pub fn bench_layer(
    layer: &GatedMlpLayer,
    method: CostMethod,
    k: f64,
    d_rank: usize,
    iters: usize,
    cfg: &BlockConfig,
    rng: &mut Rng,
) -> Result<BenchResult> {
    if iters == 0 {
        return Err(Error::InvalidArgument("bench needs at least one iteration".into()));
    }
    let x = rng.gaussian_vec(layer.d_model(), 1.0);
    let m = alive_count_for(k, layer.d_inter());

    let (_, dense_counter) = exec_dense(layer, &x, cfg)?;

    let mut run: Box<dyn FnMut() -> Result<(Vec<f32>, TrafficCounter)>> = match method {
        CostMethod::Dense => Box::new(|| exec_dense(layer, &x, cfg)),
        CostMethod::MCountdown => {
            let (tau, _) = top_m_threshold(&layer.up_projection(&x)?, m)?;
            Box::new(move || {
                let (u, mask, mut c) = mc_prepass(layer, &x, tau)?;
                let (y, k) = exec_mc(layer, &x, &u, &mask, cfg)?;
                c.merge(&k);
                Ok((y, c))
            })
        }
        CostMethod::Cats => {
            let (tau, _) = top_m_threshold(&layer.gate_activation(&x)?, m)?;
            Box::new(move || {
                let (h, mask, mut c) = cats_prepass(layer, &x, tau)?;
                let (y, k) = exec_cats(layer, &x, &h, &mask, cfg)?;
                c.merge(&k);
                Ok((y, c))
            })
        }
        CostMethod::DCountdown => {
            let predictor = LowRankPredictor::init(layer.d_model(), d_rank, layer.d_inter(), rng)?;
            let (s_hat, _, _) = dc_prepass(&predictor, &x, 0.0)?;
            // Signed cut-off: the m largest logits survive `ŝ > threshold`.
            let mut sorted = s_hat.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let threshold = if m < sorted.len() { sorted[m] } else { f32::NEG_INFINITY };
            Box::new(move || {
                let (_, mask, mut c) = dc_prepass(&predictor, &x, threshold)?;
                let (y, k) = exec_dc(layer, &x, &mask, cfg)?;
                c.merge(&k);
                Ok((y, c))
            })
        }
    };

    let warmup = (iters / 10).max(10);
    let mut counter = TrafficCounter::default();
    for _ in 0..warmup {
        counter = std::hint::black_box(run()?).1;
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = Instant::now();
        let out = std::hint::black_box(run()?);
        samples.push(start.elapsed().as_nanos() as u64);
        counter = out.1;
    }
    samples.sort_unstable();

    Ok(BenchResult {
        method,
        k: if method == CostMethod::Dense { 0.0 } else { k },
        d_model: layer.d_model(),
        d_inter: layer.d_inter(),
        iters,
        p50_ns: percentile(&samples, 0.5),
        p95_ns: percentile(&samples, 0.95),
        elements: counter.total(),
        dense_elements: dense_counter.total(),
        element_read_ratio: counter.total() as f64 / dense_counter.total() as f64,
    })
}

/// Builds a seeded random SiLU layer of the given shape and benchmarks it.
pub fn bench(
    method: CostMethod,
    spec: &ShapeSpec,
    k: f64,
    iters: usize,
    cfg: &BlockConfig,
    seed: u64,
) -> Result<BenchResult> {
    spec.validate()?;
    let mut rng = Rng::seed(seed);
    let layer = GatedMlpLayer::random(
        spec.d_model as usize,
        spec.d_inter as usize,
        crate::gated_mlp::Activation::Silu,
        1.0 / (spec.d_model as f32).sqrt(),
        &mut rng,
    )?;
    bench_layer(&layer, method, k, spec.d_rank as usize, iters, cfg, &mut rng)
}
