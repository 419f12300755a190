use crate::error::{Error, Result};

/// Boolean selection over the intermediate dimension.
///
/// `alive[i]` marks column `i` of the intermediate state as participating in
/// the forward pass. `tau` records the threshold that produced the mask
/// (`0.0` for predictor masks, `±inf` for degenerate top-m selections).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMask {
    alive: Vec<bool>,
    alive_count: usize,
    tau: f32,
}

impl ActivationMask {
    pub fn from_bools(alive: Vec<bool>, tau: f32) -> Self {
        let alive_count = alive.iter().filter(|&&a| a).count();
        Self {
            alive,
            alive_count,
            tau,
        }
    }

    pub fn full(len: usize) -> Self {
        Self::from_bools(vec![true; len], f32::NEG_INFINITY)
    }

    pub fn empty(len: usize) -> Self {
        Self::from_bools(vec![false; len], f32::INFINITY)
    }

    /// Builds a mask from alive indices. Out-of-range indices are rejected.
    pub fn from_indices(len: usize, indices: &[usize]) -> Result<Self> {
        let mut alive = vec![false; len];
        for &i in indices {
            if i >= len {
                return Err(Error::InvalidArgument(format!(
                    "mask index {i} out of range for length {len}"
                )));
            }
            alive[i] = true;
        }
        Ok(Self::from_bools(alive, 0.0))
    }

    /// `{ i : pred(values[i]) }` with the given recorded threshold.
    pub fn from_predicate(values: &[f32], tau: f32, pred: impl Fn(f32) -> bool) -> Self {
        Self::from_bools(values.iter().map(|&v| pred(v)).collect(), tau)
    }

    pub fn len(&self) -> usize {
        self.alive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alive.is_empty()
    }

    pub fn alive_count(&self) -> usize {
        self.alive_count
    }

    pub fn tau(&self) -> f32 {
        self.tau
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.alive
    }

    #[inline]
    pub fn is_alive(&self, i: usize) -> bool {
        self.alive[i]
    }

    pub fn alive_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.alive
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(i))
    }

    /// Elementwise AND. Lengths must match.
    pub fn intersect(&self, other: &ActivationMask) -> Result<ActivationMask> {
        if self.len() != other.len() {
            return Err(Error::dims("mask intersection", self.len(), other.len()));
        }
        let alive = self
            .alive
            .iter()
            .zip(&other.alive)
            .map(|(&a, &b)| a && b)
            .collect();
        Ok(Self::from_bools(alive, self.tau))
    }
}
