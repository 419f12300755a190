//! Shared fixtures for the criterion benches.

use countdown_core::blocked_exec::BlockConfig;
use countdown_core::numerics::top_m_threshold;
use countdown_core::predictor::LowRankPredictor;
use countdown_core::sparsity::alive_count_for;
use countdown_core::{Activation, ActivationMask, GatedMlpLayer, Rng};

/// A random layer, one input, and count-exact masks for each method.
pub struct Fixture {
    pub layer: GatedMlpLayer,
    pub x: Vec<f32>,
    pub u: Vec<f32>,
    pub h: Vec<f32>,
    pub tau_m: f32,
    pub tau_c: f32,
    pub mc_mask: ActivationMask,
    pub cats_mask: ActivationMask,
    pub dc_mask: ActivationMask,
    pub predictor: LowRankPredictor,
    pub cfg: BlockConfig,
}

impl Fixture {
    pub fn new(d_model: usize, d_inter: usize, d_rank: usize, k: f64, seed: u64) -> Self {
        let mut rng = Rng::seed(seed);
        let std = 1.0 / (d_model as f32).sqrt();
        let layer = GatedMlpLayer::random(d_model, d_inter, Activation::Silu, std, &mut rng)
            .expect("valid shape");
        let x = rng.gaussian_vec(d_model, 1.0);
        let trace = layer.forward_dense(&x).expect("matching input");
        let m = alive_count_for(k, d_inter);
        let (tau_m, mc_mask) = top_m_threshold(&trace.u, m).expect("m ≤ d_inter");
        let (tau_c, cats_mask) = top_m_threshold(&trace.h, m).expect("m ≤ d_inter");
        let (_, dc_mask) = top_m_threshold(&trace.s, m).expect("m ≤ d_inter");
        let predictor =
            LowRankPredictor::init(d_model, d_rank, d_inter, &mut rng).expect("valid shape");
        Self {
            layer,
            x,
            u: trace.u,
            h: trace.h,
            tau_m,
            tau_c,
            mc_mask,
            cats_mask,
            dc_mask,
            predictor,
            cfg: BlockConfig::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_are_count_exact() {
        let f = Fixture::new(32, 100, 4, 0.8, 1);
        for m in [&f.mc_mask, &f.cats_mask, &f.dc_mask] {
            assert_eq!(m.alive_count(), 20);
        }
    }
}
