//! How well single-factor masks agree with the ideal coefficient mask.
//!
//! For a sample with ideal mask `S` (top-m of `|s|`) and single-factor masks
//! `U` (top-m of `|u|`) and `H` (top-m of `|h|`):
//!
//! * CIF (comparative indicator failure) counts ideal-alive columns that the
//!   *other* factor would drop, or ideal-dead columns it would keep.
//! * CAF (comparative advantage frequency) counts the subset where the named
//!   factor is right and the other one is wrong.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gated_mlp::{ForwardTrace, GatedMlpLayer};
use crate::mask::ActivationMask;
use crate::numerics::top_m_threshold;
use crate::sparsity::{alive_count_for, check_ratio};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Which {
    U,
    H,
}

impl Which {
    pub fn name(self) -> &'static str {
        match self {
            Which::U => "U",
            Which::H => "H",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Polarity {
    Alive,
    Dead,
}

impl Polarity {
    pub fn name(self) -> &'static str {
        match self {
            Polarity::Alive => "alive",
            Polarity::Dead => "dead",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Metric {
    Cif,
    Caf,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Cif => "CIF",
            Metric::Caf => "CAF",
        }
    }
}

/// Ideal, up-only and gate-only masks of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTriple {
    s: ActivationMask,
    u: ActivationMask,
    h: ActivationMask,
}

impl MaskTriple {
    pub fn new(s: ActivationMask, u: ActivationMask, h: ActivationMask) -> Result<Self> {
        if u.len() != s.len() || h.len() != s.len() {
            return Err(Error::DimensionMismatch {
                op: "mask triple",
                expected: format!("{}", s.len()),
                got: format!("({}, {})", u.len(), h.len()),
            });
        }
        Ok(Self { s, u, h })
    }

    /// Top-m masks of `|s|`, `|u|` and `|h|` at sparsity `k`.
    pub fn from_trace(trace: &ForwardTrace, k: f64) -> Result<Self> {
        check_ratio(k)?;
        let m = alive_count_for(k, trace.s.len());
        Self::new(
            top_m_threshold(&trace.s, m)?.1,
            top_m_threshold(&trace.u, m)?.1,
            top_m_threshold(&trace.h, m)?.1,
        )
    }

    /// `(numerator, denominator)` of the requested ratio.
    pub fn counts(&self, metric: Metric, which: Which, polarity: Polarity) -> (usize, usize) {
        let (named, other) = match which {
            Which::U => (&self.u, &self.h),
            Which::H => (&self.h, &self.u),
        };
        let want_s = polarity == Polarity::Alive;
        let mut num = 0;
        let mut den = 0;
        for i in 0..self.s.len() {
            if self.s.is_alive(i) != want_s {
                continue;
            }
            den += 1;
            // Alive: the other factor drops an ideal-alive column.
            // Dead: the other factor keeps an ideal-dead column.
            let other_wrong = other.is_alive(i) != want_s;
            let hit = match metric {
                Metric::Cif => other_wrong,
                Metric::Caf => other_wrong && named.is_alive(i) == want_s,
            };
            num += hit as usize;
        }
        (num, den)
    }

    fn ratio(&self, metric: Metric, which: Which, polarity: Polarity) -> Result<f64> {
        match self.counts(metric, which, polarity) {
            (_, 0) => Err(Error::EmptyDenominator(match polarity {
                Polarity::Alive => "no ideal-alive columns",
                Polarity::Dead => "no ideal-dead columns",
            })),
            (n, d) => Ok(n as f64 / d as f64),
        }
    }

    pub fn cif(&self, which: Which, polarity: Polarity) -> Result<f64> {
        self.ratio(Metric::Cif, which, polarity)
    }

    pub fn caf(&self, which: Which, polarity: Polarity) -> Result<f64> {
        self.ratio(Metric::Caf, which, polarity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisRow {
    pub k: f64,
    pub metric: Metric,
    pub which: Which,
    pub polarity: Polarity,
    /// Mean over samples where the ratio is defined; `None` if none are.
    pub value: Option<f64>,
    pub samples: usize,
}

/// Averages every metric over `traces` at each sparsity level.
pub fn sweep_traces(traces: &[ForwardTrace], ks: &[f64]) -> Result<Vec<AnalysisRow>> {
    if traces.is_empty() {
        return Err(Error::EmptyInput("analysis sweep"));
    }
    let mut rows = Vec::new();
    for &k in ks {
        let triples = traces
            .iter()
            .map(|t| MaskTriple::from_trace(t, k))
            .collect::<Result<Vec<_>>>()?;
        for metric in [Metric::Cif, Metric::Caf] {
            for polarity in [Polarity::Alive, Polarity::Dead] {
                for which in [Which::U, Which::H] {
                    let values: Vec<f64> = triples
                        .iter()
                        .filter_map(|t| t.ratio(metric, which, polarity).ok())
                        .collect();
                    rows.push(AnalysisRow {
                        k,
                        metric,
                        which,
                        polarity,
                        value: (!values.is_empty())
                            .then(|| values.iter().sum::<f64>() / values.len() as f64),
                        samples: values.len(),
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn sweep(layer: &GatedMlpLayer, xs: &[Vec<f32>], ks: &[f64]) -> Result<Vec<AnalysisRow>> {
    let traces = xs
        .iter()
        .map(|x| layer.forward_dense(x))
        .collect::<Result<Vec<_>>>()?;
    sweep_traces(&traces, ks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gated_mlp::Activation;
    use crate::numerics::{Mat32, Rng};

    fn mask(bits: &[u8]) -> ActivationMask {
        ActivationMask::from_bools(bits.iter().map(|&b| b == 1).collect(), 0.0)
    }

    fn trace(u: Vec<f32>, h: Vec<f32>) -> ForwardTrace {
        let s = u.iter().zip(&h).map(|(a, b)| a * b).collect();
        ForwardTrace { u, h, s, y: vec![] }
    }

    #[test]
    fn hand_example() {
        let t = MaskTriple::new(mask(&[1, 1, 0, 0]), mask(&[1, 0, 1, 0]), mask(&[0, 1, 1, 0])).unwrap();
        // Alive: S = {0, 1}; H drops 0, U drops 1.
        assert_eq!(t.cif(Which::U, Polarity::Alive).unwrap(), 0.5);
        assert_eq!(t.cif(Which::H, Polarity::Alive).unwrap(), 0.5);
        assert_eq!(t.caf(Which::U, Polarity::Alive).unwrap(), 0.5);
        assert_eq!(t.caf(Which::H, Polarity::Alive).unwrap(), 0.5);
        // Dead: ¬S = {2, 3}; both keep 2, so neither has an advantage.
        assert_eq!(t.cif(Which::U, Polarity::Dead).unwrap(), 0.5);
        assert_eq!(t.cif(Which::H, Polarity::Dead).unwrap(), 0.5);
        assert_eq!(t.caf(Which::U, Polarity::Dead).unwrap(), 0.0);
        assert_eq!(t.caf(Which::H, Polarity::Dead).unwrap(), 0.0);
    }

    #[test]
    fn empty_denominators() {
        let t = MaskTriple::new(mask(&[1, 1]), mask(&[1, 0]), mask(&[0, 1])).unwrap();
        assert!(matches!(t.cif(Which::U, Polarity::Dead), Err(Error::EmptyDenominator(_))));
        let t = MaskTriple::new(mask(&[0, 0]), mask(&[1, 0]), mask(&[0, 1])).unwrap();
        assert!(matches!(t.caf(Which::H, Polarity::Alive), Err(Error::EmptyDenominator(_))));
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(MaskTriple::new(mask(&[1, 0]), mask(&[1]), mask(&[0, 1])).is_err());
    }

    #[test]
    fn heavy_tailed_up_favours_u() {
        // u spans orders of magnitude while h is nearly flat, so |s| ranks like |u|.
        let mut rng = Rng::seed(3);
        let u: Vec<f32> = (0..200).map(|_| rng.normal().powi(3) * 10.0).collect();
        let h: Vec<f32> = (0..200).map(|_| 1.0 + 0.01 * rng.normal()).collect();
        let t = MaskTriple::from_trace(&trace(u, h), 0.7).unwrap();
        let cu = t.cif(Which::U, Polarity::Alive).unwrap();
        let ch = t.cif(Which::H, Polarity::Alive).unwrap();
        assert!(cu > ch, "cif(U) {cu} vs cif(H) {ch}");
    }

    #[test]
    fn sweep_layout() {
        let mut rng = Rng::seed(5);
        let layer = GatedMlpLayer::random(8, 32, Activation::Silu, 0.4, &mut rng).unwrap();
        let xs: Vec<_> = (0..4).map(|_| rng.gaussian_vec(8, 1.0)).collect();
        let rows = sweep(&layer, &xs, &[0.5, 0.9]).unwrap();
        assert_eq!(rows.len(), 16);
        for r in &rows {
            let v = r.value.unwrap();
            assert!((0.0..=1.0).contains(&v));
            assert_eq!(r.samples, 4);
        }
        // A vanishing k keeps everything, so dead ratios are undefined and skipped.
        let rows = sweep(&layer, &xs, &[1e-12]).unwrap();
        assert!(rows.iter().filter(|r| r.polarity == Polarity::Dead).all(|r| r.value.is_none()));
    }

    #[test]
    fn identity_factor_has_no_failures() {
        // h ≡ 1 makes S and U identical, so U is never out-performed.
        let u = Mat32::from_fn(1, 10, |_, j| j as f32 - 4.5).into_data();
        let t = MaskTriple::from_trace(&trace(u, vec![1.0; 10]), 0.6).unwrap();
        assert_eq!(t.cif(Which::H, Polarity::Alive).unwrap(), 0.0);
        assert_eq!(t.caf(Which::H, Polarity::Alive).unwrap(), 0.0);
    }
}
