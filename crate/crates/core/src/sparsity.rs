//! Threshold criteria, index sets and sparse forward passes.
//!
//! Three indicators select the alive intermediate columns:
//! CATS thresholds `|h|`, M-CountDown thresholds `|u|` and D-CountDown
//! thresholds the weighted-sum coefficients `|s|` directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gated_mlp::{ForwardTrace, GatedMlpLayer};
pub use crate::mask::ActivationMask;
use crate::numerics::{axpy, top_m_threshold};
use crate::predictor::Predictor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparsityMethod {
    Cats,
    #[serde(rename = "mc")]
    MCountdown,
    #[serde(rename = "dc")]
    DCountdown,
}

impl SparsityMethod {
    pub const ALL: [SparsityMethod; 3] = [
        SparsityMethod::Cats,
        SparsityMethod::MCountdown,
        SparsityMethod::DCountdown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SparsityMethod::Cats => "cats",
            SparsityMethod::MCountdown => "mc",
            SparsityMethod::DCountdown => "dc",
        }
    }

    /// The vector this method thresholds.
    pub fn indicator(self, trace: &ForwardTrace) -> &[f32] {
        match self {
            SparsityMethod::Cats => &trace.h,
            SparsityMethod::MCountdown => &trace.u,
            SparsityMethod::DCountdown => &trace.s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Exact per-input top-m on the true indicator.
    Ideal,
    /// Calibrated constant thresholds (CATS, MC) or a trained predictor (DC).
    Practical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityConfig {
    pub method: SparsityMethod,
    pub k: f64,
    pub mode: Mode,
}

impl SparsityConfig {
    pub fn new(method: SparsityMethod, k: f64, mode: Mode) -> Result<Self> {
        check_ratio(k)?;
        Ok(Self { method, k, mode })
    }
}

pub(crate) fn check_ratio(k: f64) -> Result<()> {
    if !(k > 0.0 && k < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "sparsity ratio k must lie in (0, 1), got {k}"
        )));
    }
    Ok(())
}

/// Number of retained intermediate columns, `floor((1 − k)·d_inter)`.
///
/// A small epsilon absorbs binary rounding of `1 − k`, so for example
/// `k = 0.9, d_inter = 10` keeps one column rather than zero.
pub fn alive_count_for(k: f64, d_inter: usize) -> usize {
    let exact = (1.0 - k) * d_inter as f64;
    ((exact + 1e-9).floor().max(0.0) as usize).min(d_inter)
}

/// Ideal-mode mask: exact top-m of the method's indicator.
pub fn threshold_ideal(trace: &ForwardTrace, cfg: &SparsityConfig) -> ActivationMask {
    let indicator = cfg.method.indicator(trace);
    let m = alive_count_for(cfg.k, indicator.len());
    top_m_threshold(indicator, m)
        .expect("alive count never exceeds d_inter")
        .1
}

/// Gated-MLP restricted to the alive columns of all three matrices.
///
/// Dead rows are never read. Alive rows are visited in ascending order, so
/// the result is bitwise equal to the dense pass with dead `s` entries zeroed.
pub fn forward_sparse(layer: &GatedMlpLayer, x: &[f32], mask: &ActivationMask) -> Result<Vec<f32>> {
    layer.check_input("forward_sparse", x)?;
    layer.check_inter("forward_sparse (mask)", mask.len())?;
    let mut y = vec![0.0f32; layer.d_model()];
    for i in mask.alive_indices() {
        let s = layer.up_at(i, x) * layer.gate_at(i, x);
        axpy(s, layer.w_down().row(i), &mut y);
    }
    Ok(y)
}

/// Forward pass with an independent index set per matrix; a dead entry of
/// any matrix contributes an exact zero at its stage.
pub fn forward_masked_per_matrix(
    layer: &GatedMlpLayer,
    x: &[f32],
    idx_up: &ActivationMask,
    idx_gate: &ActivationMask,
    idx_down: &ActivationMask,
) -> Result<Vec<f32>> {
    layer.check_input("forward_masked_per_matrix", x)?;
    for m in [idx_up, idx_gate, idx_down] {
        layer.check_inter("forward_masked_per_matrix (mask)", m.len())?;
    }
    let d_inter = layer.d_inter();
    let u: Vec<f32> = (0..d_inter)
        .map(|i| if idx_up.is_alive(i) { layer.up_at(i, x) } else { 0.0 })
        .collect();
    // A dead gate row leaves a zero pre-activation, and σ(0) = 0 for both
    // SiLU and GeLU.
    let h: Vec<f32> = (0..d_inter)
        .map(|i| {
            if idx_gate.is_alive(i) {
                layer.gate_at(i, x)
            } else {
                layer.activation().apply(0.0)
            }
        })
        .collect();
    let mut y = vec![0.0f32; layer.d_model()];
    for i in idx_down.alive_indices() {
        axpy(u[i] * h[i], layer.w_down().row(i), &mut y);
    }
    Ok(y)
}

/// Intersection of per-matrix index sets.
pub fn unified_index(
    idx_up: &ActivationMask,
    idx_gate: &ActivationMask,
    idx_down: &ActivationMask,
) -> Result<ActivationMask> {
    idx_up.intersect(idx_gate)?.intersect(idx_down)
}

/// Inference-time state for practical mode.
#[derive(Debug, Clone, Default)]
pub struct PracticalContext {
    /// Calibrated threshold on `|u|` (M-CountDown).
    pub tau_m: Option<f32>,
    /// Calibrated threshold on `|h|` (CATS).
    pub tau_c: Option<f32>,
    /// Mask predictor (D-CountDown).
    pub predictor: Option<Predictor>,
}

/// Practical-mode forward: fixed thresholds for CATS/MC, predicted index set
/// for DC. Returns the output and the mask that produced it.
pub fn forward_practical(
    layer: &GatedMlpLayer,
    x: &[f32],
    cfg: &SparsityConfig,
    ctx: &PracticalContext,
) -> Result<(Vec<f32>, ActivationMask)> {
    let mask = match cfg.method {
        SparsityMethod::MCountdown => {
            let tau = ctx
                .tau_m
                .ok_or_else(|| Error::MissingContext("M-CountDown needs a calibrated tau_m".into()))?;
            let u = layer.up_projection(x)?;
            ActivationMask::from_predicate(&u, tau, |v| v.abs() > tau)
        }
        SparsityMethod::Cats => {
            let tau = ctx
                .tau_c
                .ok_or_else(|| Error::MissingContext("CATS needs a calibrated tau_c".into()))?;
            let h = layer.gate_activation(x)?;
            ActivationMask::from_predicate(&h, tau, |v| v.abs() > tau)
        }
        SparsityMethod::DCountdown => {
            let p = ctx
                .predictor
                .as_ref()
                .ok_or_else(|| Error::MissingContext("D-CountDown needs a trained predictor".into()))?;
            p.predict_mask(x)?
        }
    };
    let y = forward_sparse(layer, x, &mask)?;
    Ok((y, mask))
}

/// Fraction of intermediate columns filtered out.
pub fn realized_sparsity(mask: &ActivationMask) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    1.0 - mask.alive_count() as f64 / mask.len() as f64
}

/// `Σ_{alive} |s[i]|` as a fraction of `Σ |s[i]|`.
pub fn retained_mass(s: &[f32], mask: &ActivationMask) -> f64 {
    let total: f64 = s.iter().map(|v| v.abs() as f64).sum();
    if total == 0.0 {
        return 1.0;
    }
    let kept: f64 = mask.alive_indices().map(|i| s[i].abs() as f64).sum();
    kept / total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gated_mlp::Activation;
    use crate::numerics::{Mat32, Rng};
    use crate::predictor::{LowRankPredictor, Predictor};

    fn trace_with(u: Vec<f32>, h: Vec<f32>, s: Vec<f32>) -> ForwardTrace {
        ForwardTrace { u, h, s, y: vec![] }
    }

    fn alive(mask: &ActivationMask) -> Vec<usize> {
        mask.alive_indices().collect()
    }

    #[test]
    fn alive_count_examples() {
        assert_eq!(alive_count_for(0.7, 14336), 4300);
        assert_eq!(alive_count_for(0.8, 14336), 2867);
        assert_eq!(alive_count_for(0.9, 14336), 1433);
        assert_eq!(alive_count_for(0.5, 10), 5);
        assert_eq!(alive_count_for(0.9, 10), 1);
        assert_eq!(alive_count_for(0.7, 10), 3);
        assert_eq!(alive_count_for(0.999, 4), 0);
    }

    #[test]
    fn config_rejects_out_of_range_k() {
        for k in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(SparsityConfig::new(SparsityMethod::Cats, k, Mode::Ideal).is_err());
        }
    }

    #[test]
    fn ideal_threshold_examples() {
        let t = trace_with(vec![1.0, 2.0, 3.0, 4.0], vec![0.0; 4], vec![0.9, -0.1, 0.5, 0.0]);
        let dc = SparsityConfig::new(SparsityMethod::DCountdown, 0.5, Mode::Ideal).unwrap();
        assert_eq!(alive(&threshold_ideal(&t, &dc)), vec![0, 2]);
        let mc = SparsityConfig::new(SparsityMethod::MCountdown, 0.5, Mode::Ideal).unwrap();
        assert_eq!(alive(&threshold_ideal(&t, &mc)), vec![2, 3]);
        let tiny = SparsityConfig::new(SparsityMethod::DCountdown, 0.999, Mode::Ideal).unwrap();
        assert_eq!(threshold_ideal(&t, &tiny).alive_count(), 0);
    }

    #[test]
    fn unified_index_examples() {
        let m = ActivationMask::from_indices(4, &[0, 2]).unwrap();
        let full = ActivationMask::full(4);
        assert_eq!(alive(&unified_index(&full, &full, &m).unwrap()), vec![0, 2]);
        let a = ActivationMask::from_indices(4, &[0, 1]).unwrap();
        let b = ActivationMask::from_indices(4, &[1, 2]).unwrap();
        let c = ActivationMask::from_indices(4, &[1, 3]).unwrap();
        assert_eq!(alive(&unified_index(&a, &b, &c).unwrap()), vec![1]);
        let e = ActivationMask::empty(4);
        assert_eq!(unified_index(&e, &a, &b).unwrap().alive_count(), 0);
        assert!(unified_index(&a, &ActivationMask::full(3), &b).is_err());
    }

    #[test]
    fn sparse_forward_degenerate_masks() {
        let mut rng = Rng::seed(4);
        let layer = GatedMlpLayer::random(12, 40, Activation::Silu, 0.4, &mut rng).unwrap();
        let x = rng.gaussian_vec(12, 1.0);
        let dense = layer.forward_dense(&x).unwrap();
        assert_eq!(forward_sparse(&layer, &x, &ActivationMask::full(40)).unwrap(), dense.y);
        assert_eq!(
            forward_sparse(&layer, &x, &ActivationMask::empty(40)).unwrap(),
            vec![0.0; 12]
        );
    }

    #[test]
    fn sparse_forward_equals_dense_with_zeroed_coefficients() {
        let mut rng = Rng::seed(8);
        let layer = GatedMlpLayer::random(10, 33, Activation::Gelu, 0.4, &mut rng).unwrap();
        for _ in 0..20 {
            let x = rng.gaussian_vec(10, 1.0);
            let mask = ActivationMask::from_bools((0..33).map(|_| rng.coin()).collect(), 0.0);
            let t = layer.forward_dense(&x).unwrap();
            let zeroed: Vec<f32> = (0..33)
                .map(|i| if mask.is_alive(i) { t.s[i] } else { 0.0 })
                .collect();
            let oracle = layer.weighted_sum(&zeroed, &ActivationMask::full(33)).unwrap();
            assert_eq!(forward_sparse(&layer, &x, &mask).unwrap(), oracle);
        }
    }

    #[test]
    fn practical_mc_extremes() {
        let mut rng = Rng::seed(12);
        let layer = GatedMlpLayer::random(8, 24, Activation::Silu, 0.5, &mut rng).unwrap();
        let x = rng.gaussian_vec(8, 1.0);
        let cfg = SparsityConfig::new(SparsityMethod::MCountdown, 0.7, Mode::Practical).unwrap();

        let ctx = PracticalContext {
            tau_m: Some(0.0),
            ..Default::default()
        };
        let (y, mask) = forward_practical(&layer, &x, &cfg, &ctx).unwrap();
        assert_eq!(mask.alive_count(), 24);
        assert_eq!(y, layer.forward_dense(&x).unwrap().y);

        let ctx = PracticalContext {
            tau_m: Some(f32::INFINITY),
            ..Default::default()
        };
        let (y, mask) = forward_practical(&layer, &x, &cfg, &ctx).unwrap();
        assert_eq!(mask.alive_count(), 0);
        assert_eq!(y, vec![0.0; 8]);
    }

    #[test]
    fn practical_cats_uses_gate_threshold() {
        let mut rng = Rng::seed(13);
        let layer = GatedMlpLayer::random(8, 24, Activation::Silu, 0.5, &mut rng).unwrap();
        let x = rng.gaussian_vec(8, 1.0);
        let h = layer.gate_activation(&x).unwrap();
        let tau = 0.1;
        let cfg = SparsityConfig::new(SparsityMethod::Cats, 0.7, Mode::Practical).unwrap();
        let ctx = PracticalContext {
            tau_c: Some(tau),
            ..Default::default()
        };
        let (_, mask) = forward_practical(&layer, &x, &cfg, &ctx).unwrap();
        for (i, v) in h.iter().enumerate() {
            assert_eq!(mask.is_alive(i), v.abs() > tau);
        }
    }

    #[test]
    fn practical_missing_context() {
        let mut rng = Rng::seed(1);
        let layer = GatedMlpLayer::random(4, 8, Activation::Silu, 0.5, &mut rng).unwrap();
        let x = rng.gaussian_vec(4, 1.0);
        for method in SparsityMethod::ALL {
            let cfg = SparsityConfig::new(method, 0.5, Mode::Practical).unwrap();
            assert!(matches!(
                forward_practical(&layer, &x, &cfg, &PracticalContext::default()),
                Err(Error::MissingContext(_))
            ));
        }
    }

    #[test]
    fn practical_dc_with_oracle_predictor_matches_ideal() {
        // A 1-dim "input" cannot encode an arbitrary mask, so the oracle
        // predictor uses rank d_model: θ_A = I, θ_B = ±1 pattern per input
        // basis vector. With x = e_0 the logits are exactly row 0 of θ_B.
        let mut rng = Rng::seed(21);
        let layer = GatedMlpLayer::random(4, 16, Activation::Silu, 0.5, &mut rng).unwrap();
        let x = vec![1.0, 0.0, 0.0, 0.0];
        let ideal_cfg = SparsityConfig::new(SparsityMethod::DCountdown, 0.7, Mode::Ideal).unwrap();
        let t = layer.forward_dense(&x).unwrap();
        let ideal = threshold_ideal(&t, &ideal_cfg);
        let ideal_y = forward_sparse(&layer, &x, &ideal).unwrap();

        let theta_b = Mat32::from_fn(4, 16, |r, i| {
            if r == 0 && ideal.is_alive(i) {
                1.0
            } else {
                -1.0
            }
        });
        let p = Predictor::LowRank(LowRankPredictor::new(Mat32::identity(4), theta_b).unwrap());
        let ctx = PracticalContext {
            predictor: Some(p),
            ..Default::default()
        };
        let cfg = SparsityConfig::new(SparsityMethod::DCountdown, 0.7, Mode::Practical).unwrap();
        let (y, mask) = forward_practical(&layer, &x, &cfg, &ctx).unwrap();
        assert_eq!(mask.as_slice(), ideal.as_slice());
        assert_eq!(y, ideal_y);
    }

    #[test]
    fn realized_sparsity_examples() {
        assert_eq!(realized_sparsity(&ActivationMask::full(8)), 0.0);
        assert_eq!(realized_sparsity(&ActivationMask::empty(8)), 1.0);
        let m = ActivationMask::from_indices(10, &[1, 4, 7]).unwrap();
        assert!((realized_sparsity(&m) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn ideal_masks_nest_as_k_grows() {
        let mut rng = Rng::seed(30);
        let layer = GatedMlpLayer::random(16, 64, Activation::Silu, 0.3, &mut rng).unwrap();
        for _ in 0..20 {
            let x = rng.gaussian_vec(16, 1.0);
            let t = layer.forward_dense(&x).unwrap();
            for method in SparsityMethod::ALL {
                let lo = SparsityConfig::new(method, 0.6, Mode::Ideal).unwrap();
                let hi = SparsityConfig::new(method, 0.85, Mode::Ideal).unwrap();
                let m_lo = threshold_ideal(&t, &lo);
                let m_hi = threshold_ideal(&t, &hi);
                assert_eq!(m_lo.alive_count(), alive_count_for(0.6, 64));
                assert!(m_hi.alive_indices().all(|i| m_lo.is_alive(i)));
            }
        }
    }
}
