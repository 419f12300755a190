//! A single Gated-MLP block `y = ((x·W_up) ⊙ σ(x·W_gate))·W_downᵀ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::ActivationMask;
use crate::numerics::{axpy, dot, gelu_tanh_scalar, silu_scalar, Mat32, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Gelu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Silu => silu_scalar(x),
            Activation::Gelu => gelu_tanh_scalar(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Gelu => "gelu",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "silu" => Ok(Activation::Silu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::InvalidArgument(format!("unknown activation '{other}'"))),
        }
    }
}

/// Intermediates of one dense forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `x·W_up`
    pub u: Vec<f32>,
    /// `σ(x·W_gate)`
    pub h: Vec<f32>,
    /// `u ⊙ h`, the weighted-sum coefficients of the down projection.
    pub s: Vec<f32>,
    pub y: Vec<f32>,
}

/// The three projection matrices, each stored as `d_inter × d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedMlpLayer {
    w_up: Mat32,
    w_gate: Mat32,
    w_down: Mat32,
    activation: Activation,
}

impl GatedMlpLayer {
    pub fn new(w_up: Mat32, w_gate: Mat32, w_down: Mat32, activation: Activation) -> Result<Self> {
        let shape = w_up.shape();
        for (name, m) in [("w_gate", &w_gate), ("w_down", &w_down)] {
            if m.shape() != shape {
                return Err(Error::dims(
                    "GatedMlpLayer::new",
                    format!("{name} of shape {}x{}", shape.0, shape.1),
                    format!("{}x{}", m.rows(), m.cols()),
                ));
            }
        }
        Ok(Self {
            w_up,
            w_gate,
            w_down,
            activation,
        })
    }

    /// Weights i.i.d. `N(0, std²)`, drawn up, gate, down in that order.
    pub fn random(
        d_model: usize,
        d_inter: usize,
        activation: Activation,
        std: f32,
        rng: &mut Rng,
    ) -> Result<Self> {
        if d_model == 0 || d_inter == 0 {
            return Err(Error::InvalidArgument(format!(
                "layer dimensions must be positive, got d_model={d_model}, d_inter={d_inter}"
            )));
        }
        let w_up = Mat32::gaussian(d_inter, d_model, std, rng);
        let w_gate = Mat32::gaussian(d_inter, d_model, std, rng);
        let w_down = Mat32::gaussian(d_inter, d_model, std, rng);
        Self::new(w_up, w_gate, w_down, activation)
    }

    pub fn d_model(&self) -> usize {
        self.w_up.cols()
    }

    pub fn d_inter(&self) -> usize {
        self.w_up.rows()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn w_up(&self) -> &Mat32 {
        &self.w_up
    }

    pub fn w_gate(&self) -> &Mat32 {
        &self.w_gate
    }

    pub fn w_down(&self) -> &Mat32 {
        &self.w_down
    }

    /// Mutable access for tests that poison or perturb weights.
    pub fn weights_mut(&mut self) -> (&mut Mat32, &mut Mat32, &mut Mat32) {
        (&mut self.w_up, &mut self.w_gate, &mut self.w_down)
    }

    pub(crate) fn check_input(&self, op: &'static str, x: &[f32]) -> Result<()> {
        if x.len() != self.d_model() {
            return Err(Error::dims(
                op,
                format!("x of length d_model={}", self.d_model()),
                format!("length {}", x.len()),
            ));
        }
        Ok(())
    }

    pub(crate) fn check_inter(&self, op: &'static str, len: usize) -> Result<()> {
        if len != self.d_inter() {
            return Err(Error::dims(
                op,
                format!("length d_inter={}", self.d_inter()),
                format!("length {len}"),
            ));
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn up_at(&self, i: usize, x: &[f32]) -> f32 {
        dot(self.w_up.row(i), x)
    }

    #[inline]
    pub(crate) fn gate_at(&self, i: usize, x: &[f32]) -> f32 {
        self.activation.apply(dot(self.w_gate.row(i), x))
    }

    /// Full `u = x·W_up` without touching the other matrices.
    pub fn up_projection(&self, x: &[f32]) -> Result<Vec<f32>> {
        self.check_input("up_projection", x)?;
        Ok((0..self.d_inter()).map(|i| self.up_at(i, x)).collect())
    }

    /// Full `h = σ(x·W_gate)`.
    pub fn gate_activation(&self, x: &[f32]) -> Result<Vec<f32>> {
        self.check_input("gate_activation", x)?;
        Ok((0..self.d_inter()).map(|i| self.gate_at(i, x)).collect())
    }

    pub fn forward_dense(&self, x: &[f32]) -> Result<ForwardTrace> {
        self.check_input("forward_dense", x)?;
        let u = self.up_projection(x)?;
        let h = self.gate_activation(x)?;
        let s: Vec<f32> = u.iter().zip(&h).map(|(a, b)| a * b).collect();
        let y = self.weighted_sum(&s, &ActivationMask::full(self.d_inter()))?;
        Ok(ForwardTrace { u, h, s, y })
    }

    /// `Σ_{i alive} s[i]·W_down[i]`, rows visited in ascending order.
    pub fn weighted_sum(&self, s: &[f32], mask: &ActivationMask) -> Result<Vec<f32>> {
        self.check_inter("weighted_sum (s)", s.len())?;
        self.check_inter("weighted_sum (mask)", mask.len())?;
        let mut y = vec![0.0f32; self.d_model()];
        for i in mask.alive_indices() {
            axpy(s[i], self.w_down.row(i), &mut y);
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_layer() -> GatedMlpLayer {
        GatedMlpLayer::new(
            Mat32::identity(2),
            Mat32::identity(2),
            Mat32::identity(2),
            Activation::Silu,
        )
        .unwrap()
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = Rng::seed(1);
        let layer = GatedMlpLayer::random(6, 10, Activation::Silu, 0.5, &mut rng).unwrap();
        let t = layer.forward_dense(&[0.0; 6]).unwrap();
        assert!(t.u.iter().all(|&v| v == 0.0));
        assert!(t.h.iter().all(|&v| v == 0.0));
        assert!(t.s.iter().all(|&v| v == 0.0));
        assert!(t.y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_hand_example() {
        let t = identity_layer().forward_dense(&[1.0, 0.0]).unwrap();
        let s1 = 1.0 / (1.0 + (-1.0f64).exp());
        assert_eq!(t.u, vec![1.0, 0.0]);
        assert!((t.h[0] as f64 - s1).abs() < 1e-7 && t.h[1] == 0.0);
        assert!((t.s[0] as f64 - s1).abs() < 1e-7 && t.s[1] == 0.0);
        assert!((t.y[0] as f64 - s1).abs() < 1e-7 && t.y[1] == 0.0);
    }

    #[test]
    fn dense_matches_independent_weighted_sum() {
        let mut rng = Rng::seed(11);
        for act in [Activation::Silu, Activation::Gelu] {
            let layer = GatedMlpLayer::random(16, 48, act, 0.3, &mut rng).unwrap();
            let x = rng.gaussian_vec(16, 1.0);
            let t = layer.forward_dense(&x).unwrap();
            // Column-major summation in f64: a different order and precision.
            for j in 0..16 {
                let mut acc = 0.0f64;
                for i in (0..48).rev() {
                    acc += t.s[i] as f64 * layer.w_down().get(i, j) as f64;
                }
                let scale: f64 = (0..48)
                    .map(|i| (t.s[i] * layer.w_down().get(i, j)).abs() as f64)
                    .sum();
                assert!((t.y[j] as f64 - acc).abs() <= 1e-5 * scale.max(1e-12));
            }
        }
    }

    #[test]
    fn trace_product_invariant() {
        let mut rng = Rng::seed(5);
        let layer = GatedMlpLayer::random(8, 20, Activation::Gelu, 1.0, &mut rng).unwrap();
        for _ in 0..10 {
            let x = rng.gaussian_vec(8, 1.0);
            let t = layer.forward_dense(&x).unwrap();
            for i in 0..20 {
                assert_eq!(t.s[i], t.u[i] * t.h[i]);
            }
        }
    }

    #[test]
    fn weighted_sum_full_and_empty_masks() {
        let mut rng = Rng::seed(2);
        let layer = GatedMlpLayer::random(5, 9, Activation::Silu, 1.0, &mut rng).unwrap();
        let x = rng.gaussian_vec(5, 1.0);
        let t = layer.forward_dense(&x).unwrap();
        assert_eq!(layer.weighted_sum(&t.s, &ActivationMask::full(9)).unwrap(), t.y);
        assert_eq!(
            layer.weighted_sum(&t.s, &ActivationMask::empty(9)).unwrap(),
            vec![0.0; 5]
        );
    }

    #[test]
    fn weighted_sum_random_mask_matches_per_index_oracle() {
        let mut rng = Rng::seed(9);
        let layer = GatedMlpLayer::random(7, 30, Activation::Silu, 1.0, &mut rng).unwrap();
        let x = rng.gaussian_vec(7, 1.0);
        let t = layer.forward_dense(&x).unwrap();
        let mask = ActivationMask::from_bools((0..30).map(|_| rng.coin()).collect(), 0.0);
        let y = layer.weighted_sum(&t.s, &mask).unwrap();
        for (j, &yj) in y.iter().enumerate() {
            let oracle: f64 = (0..30)
                .filter(|&i| mask.is_alive(i))
                .map(|i| t.s[i] as f64 * layer.w_down().get(i, j) as f64)
                .sum();
            assert!((yj as f64 - oracle).abs() < 1e-6 * (1.0 + oracle.abs()) * 10.0);
        }
    }

    #[test]
    fn shape_errors() {
        let layer = identity_layer();
        assert!(matches!(
            layer.forward_dense(&[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(layer.weighted_sum(&[1.0], &ActivationMask::full(2)).is_err());
        assert!(GatedMlpLayer::new(
            Mat32::identity(2),
            Mat32::identity(3),
            Mat32::identity(2),
            Activation::Silu
        )
        .is_err());
    }
}
