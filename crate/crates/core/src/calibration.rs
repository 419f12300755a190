//! Layerwise constant thresholds estimated from a calibration set.
//!
//! `τ̂` is the mean over samples of the per-sample top-m cut-off on the chosen
//! indicator (`|u|` for M-CountDown, `|h|` for CATS).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gated_mlp::GatedMlpLayer;
use crate::numerics::{top_m_threshold, Rng};
use crate::sparsity::{alive_count_for, check_ratio};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Indicator {
    U,
    H,
}

impl std::str::FromStr for Indicator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "u" => Ok(Indicator::U),
            "h" => Ok(Indicator::H),
            other => Err(Error::InvalidArgument(format!("unknown indicator '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub tau_hat: f32,
    pub per_sample_taus: Vec<f32>,
    pub k: f64,
    pub indicator: Indicator,
}

impl CalibrationStats {
    /// Wraps precomputed per-sample thresholds.
    pub fn from_taus(per_sample_taus: Vec<f32>, k: f64, indicator: Indicator) -> Result<Self> {
        if per_sample_taus.is_empty() {
            return Err(Error::EmptyInput("calibrate"));
        }
        Ok(Self {
            tau_hat: mean_threshold(&per_sample_taus),
            per_sample_taus,
            k,
            indicator,
        })
    }

    pub fn samples(&self) -> usize {
        self.per_sample_taus.len()
    }
}

/// Mean of the thresholds. Values are summed in sorted order, so the result
/// does not depend on the order of the calibration set.
fn mean_threshold(taus: &[f32]) -> f32 {
    let mut sorted = taus.to_vec();
    sorted.sort_by(f32::total_cmp);
    let sum: f64 = sorted.iter().map(|&t| t as f64).sum();
    (sum / sorted.len() as f64) as f32
}

pub fn calibrate(
    layer: &GatedMlpLayer,
    xs: &[Vec<f32>],
    k: f64,
    indicator: Indicator,
) -> Result<CalibrationStats> {
    if xs.is_empty() {
        return Err(Error::EmptyInput("calibrate"));
    }
    check_ratio(k)?;
    let m = alive_count_for(k, layer.d_inter());
    let taus = xs
        .iter()
        .map(|x| {
            let v = match indicator {
                Indicator::U => layer.up_projection(x)?,
                Indicator::H => layer.gate_activation(x)?,
            };
            Ok(top_m_threshold(&v, m)?.0)
        })
        .collect::<Result<Vec<f32>>>()?;
    CalibrationStats::from_taus(taus, k, indicator)
}

/// `n` inputs drawn i.i.d. from `N(0, std²·I)`.
pub fn gaussian_inputs(rng: &mut Rng, n: usize, d_model: usize, std: f32) -> Vec<Vec<f32>> {
    (0..n).map(|_| rng.gaussian_vec(d_model, std)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gated_mlp::Activation;
    use crate::sparsity::{
        forward_practical, realized_sparsity, Mode, PracticalContext, SparsityConfig,
        SparsityMethod,
    };

    #[test]
    fn single_sample_is_its_own_threshold() {
        let mut rng = Rng::seed(1);
        let layer = GatedMlpLayer::random(8, 30, Activation::Silu, 0.4, &mut rng).unwrap();
        let x = rng.gaussian_vec(8, 1.0);
        let stats = calibrate(&layer, std::slice::from_ref(&x), 0.7, Indicator::U).unwrap();
        let u = layer.up_projection(&x).unwrap();
        let (tau, _) = top_m_threshold(&u, alive_count_for(0.7, 30)).unwrap();
        assert_eq!(stats.tau_hat, tau);
        assert_eq!(stats.samples(), 1);
    }

    #[test]
    fn mean_of_two() {
        let stats = CalibrationStats::from_taus(vec![1.0, 3.0], 0.7, Indicator::U).unwrap();
        assert_eq!(stats.tau_hat, 2.0);
    }

    #[test]
    fn empty_set_is_rejected() {
        let mut rng = Rng::seed(1);
        let layer = GatedMlpLayer::random(4, 8, Activation::Silu, 0.4, &mut rng).unwrap();
        assert!(matches!(
            calibrate(&layer, &[], 0.7, Indicator::U),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn permutation_invariant() {
        let mut rng = Rng::seed(2);
        let layer = GatedMlpLayer::random(16, 64, Activation::Gelu, 0.3, &mut rng).unwrap();
        let mut xs = gaussian_inputs(&mut rng, 50, 16, 1.0);
        let a = calibrate(&layer, &xs, 0.8, Indicator::H).unwrap();
        rng.shuffle(&mut xs);
        let b = calibrate(&layer, &xs, 0.8, Indicator::H).unwrap();
        assert_eq!(a.tau_hat, b.tau_hat);
        assert!(a.per_sample_taus.iter().all(|&t| t >= 0.0));
    }

    #[test]
    fn held_out_realized_sparsity_tracks_k() {
        let mut rng = Rng::seed(64);
        let d_model = 64;
        let layer =
            GatedMlpLayer::random(d_model, 1024, Activation::Silu, 1.0 / (d_model as f32).sqrt(), &mut rng)
                .unwrap();
        let calib = gaussian_inputs(&mut rng, 64, d_model, 1.0);
        let held_out = gaussian_inputs(&mut rng, 64, d_model, 1.0);
        let stats = calibrate(&layer, &calib, 0.7, Indicator::U).unwrap();
        let cfg = SparsityConfig::new(SparsityMethod::MCountdown, 0.7, Mode::Practical).unwrap();
        let ctx = PracticalContext {
            tau_m: Some(stats.tau_hat),
            ..Default::default()
        };
        let mean: f64 = held_out
            .iter()
            .map(|x| realized_sparsity(&forward_practical(&layer, x, &cfg, &ctx).unwrap().1))
            .sum::<f64>()
            / held_out.len() as f64;
        assert!((mean - 0.7).abs() <= 0.05, "mean realized sparsity {mean}");
    }
}
