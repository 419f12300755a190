//! Dense f32 primitives shared by every other module.
//!
//! All reductions accumulate in `f32` in ascending index order so results
//! are bitwise reproducible across runs and platforms.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::mask::ActivationMask;

/// Row-major `rows × cols` matrix of `f32`.
///
/// Layer weights are stored transposed (`d_inter × d_model`), so every
/// intermediate index owns one contiguous row.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat32 {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Mat32 {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::dims(
                "Mat32::new",
                format!("{} elements ({rows}x{cols})", rows * cols),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(rows.len(), cols, data)
    }

    /// Entries drawn i.i.d. from `N(0, std²)`.
    pub fn gaussian(rows: usize, cols: usize, std: f32, rng: &mut Rng) -> Self {
        let data = rng.gaussian_vec(rows * cols, std);
        Self { rows, cols, data }
    }

    /// Entries drawn i.i.d. from `U(-bound, bound)`.
    pub fn uniform(rows: usize, cols: usize, bound: f32, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn transpose(&self) -> Mat32 {
        Mat32::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }
}

/// Ascending-order f32 dot product.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `out[i] = Σ_j w[i,j]·x[j]`, accumulated in ascending `j`.
pub fn gemv(w: &Mat32, x: &[f32]) -> Result<Vec<f32>> {
    if x.len() != w.cols() {
        return Err(Error::dims(
            "gemv",
            format!("x of length {} for {}x{} matrix", w.cols(), w.rows(), w.cols()),
            format!("x of length {}", x.len()),
        ));
    }
    Ok((0..w.rows()).map(|i| dot(w.row(i), x)).collect())
}

/// `out[j] = Σ_i x[i]·w[i,j]` (vector times matrix), accumulated in ascending `i`.
pub fn vecmat(x: &[f32], w: &Mat32) -> Result<Vec<f32>> {
    if x.len() != w.rows() {
        return Err(Error::dims(
            "vecmat",
            format!("x of length {} for {}x{} matrix", w.rows(), w.rows(), w.cols()),
            format!("x of length {}", x.len()),
        ));
    }
    let mut out = vec![0.0f32; w.cols()];
    for (i, &xi) in x.iter().enumerate() {
        axpy(xi, w.row(i), &mut out);
    }
    Ok(out)
}

/// `y += a·x`
#[inline]
pub fn axpy(a: f32, x: &[f32], y: &mut [f32]) {
    for (yj, &xj) in y.iter_mut().zip(x) {
        *yj += a * xj;
    }
}

// Activations are evaluated in f64 and rounded once, which keeps the result
// within half an ulp of the true value over the whole f32 range we use.

#[inline]
pub fn silu_scalar(x: f32) -> f32 {
    let x = x as f64;
    (x / (1.0 + (-x).exp())) as f32
}

#[inline]
pub fn gelu_tanh_scalar(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    let x = x as f64;
    (0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())) as f32
}

pub fn silu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| silu_scalar(v)).collect()
}

pub fn gelu_tanh(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| gelu_tanh_scalar(v)).collect()
}

/// Total order used for magnitude selection: larger `|v|` first, lower index
/// breaks ties.
#[inline]
fn magnitude_order(v: &[f32], a: usize, b: usize) -> Ordering {
    v[b].abs()
        .total_cmp(&v[a].abs())
        .then_with(|| a.cmp(&b))
}

/// Exact top-`m` selection by magnitude.
///
/// Keeps the `m` largest `|v[i]|` (lower index wins ties) and returns the
/// `(m+1)`-th largest magnitude as the threshold; `+inf` when `m == 0` and
/// `-inf` when every entry is kept.
pub fn top_m_threshold(v: &[f32], m: usize) -> Result<(f32, ActivationMask)> {
    let n = v.len();
    if m > n {
        return Err(Error::InvalidArgument(format!(
            "top_m_threshold: m = {m} exceeds vector length {n}"
        )));
    }
    if m == 0 {
        return Ok((f32::INFINITY, ActivationMask::empty(n)));
    }
    if m == n {
        return Ok((f32::NEG_INFINITY, ActivationMask::full(n)));
    }

    let mut order: Vec<usize> = (0..n).collect();
    // Partition so positions [0, m) hold the kept set and position m holds the
    // (m+1)-th element; the comparator is a total order so this is exact.
    order.select_nth_unstable_by(m, |&a, &b| magnitude_order(v, a, b));
    let tau = v[order[m]].abs();

    let mut alive = vec![false; n];
    for &i in &order[..m] {
        alive[i] = true;
    }
    Ok((tau, ActivationMask::from_bools(alive, tau)))
}

/// Seedable, platform-independent random stream (ChaCha8).
#[derive(Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn seed(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent child stream; advances `self`.
    pub fn fork(&mut self) -> Rng {
        Rng::seed(self.inner.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.inner.random::<f32>()
    }

    pub fn normal(&mut self) -> f32 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn gaussian_vec(&mut self, n: usize, std: f32) -> Vec<f32> {
        (0..n).map(|_| std * self.normal()).collect()
    }

    pub fn coin(&mut self) -> bool {
        self.inner.random::<bool>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use super::Rng;

    #[test]
    fn gemv_identity() {
        let y = gemv(&Mat32::identity(3), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(y, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn gemv_hand_example() {
        let w = Mat32::from_rows(&[&[1.0, 1.0], &[2.0, 0.0]]).unwrap();
        assert_eq!(gemv(&w, &[3.0, 4.0]).unwrap(), vec![7.0, 6.0]);
    }

    #[test]
    fn gemv_zero_matrix() {
        assert_eq!(gemv(&Mat32::zeros(2, 2), &[5.0, 5.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn gemv_reports_both_shapes() {
        let err = gemv(&Mat32::zeros(2, 3), &[1.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("length 1"), "{msg}");
    }

    #[test]
    fn vecmat_matches_transposed_gemv() {
        let mut rng = Rng::seed(3);
        let w = Mat32::gaussian(5, 7, 1.0, &mut rng);
        let x = rng.gaussian_vec(5, 1.0);
        assert_eq!(vecmat(&x, &w).unwrap(), gemv(&w.transpose(), &x).unwrap());
    }

    #[test]
    fn mat_new_validates_length() {
        assert!(Mat32::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Mat32::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn activation_values_at_origin_and_one() {
        assert_eq!(silu(&[0.0]), vec![0.0]);
        assert_eq!(gelu_tanh(&[0.0]), vec![0.0]);
        assert!((silu_scalar(1.0) - 0.731_058_6).abs() < 1e-6);
    }

    // (x, silu(x), gelu_tanh(x)) evaluated with 128-bit mpmath.
    #[allow(clippy::excessive_precision)]
    const ACTIVATION_ORACLE: &[(f32, f64, f64)] = &[
        (-20.0, -4.1223072363804071629e-8, 0.0),
        (-12.5, -0.000046582991052332017326, 0.0),
        (-8.0, -0.002682801043731824831, -3.1077829375011112176e-21),
        (-5.0, -0.033464254621424277797, -2.2917961966295060456e-7),
        (-3.0, -0.14227761953270034264, -0.0036373920817730188378),
        (-2.0, -0.23840584404423511188, -0.045402305912224981219),
        (-1.5, -0.27363828570953451059, -0.10042842301976707755),
        (-1.0, -0.26894142136999512075, -0.15880800939172329522),
        (-0.5, -0.18877033439907271768, -0.15428599017485607796),
        (-0.25, -0.10945587477855047399, -0.10032464929831499977),
        (-0.1, -0.047502081252106003889, -0.046017248954564837963),
        (0.0, 0.0, 0.0),
        (0.1, 0.052497918747894001663, 0.053982751045435167588),
        (0.25, 0.14054412522144952601, 0.14967535070168500023),
        (0.5, 0.31122966560092728232, 0.34571400982514392204),
        (1.0, 0.73105857863000487925, 0.84119199060827670478),
        (1.5, 1.2263617142904654894, 1.3995715769802329224),
        (2.0, 1.7615941559557648881, 1.9545976940877750188),
        (3.0, 2.8577223804672996574, 2.9963626079182269812),
        (5.0, 4.9665357453785757222, 4.999999770820380337),
        (8.0, 7.9973171989562681752, 8.0),
        (12.5, 12.499953417008947668, 12.5),
        (20.0, 19.999999958776927636, 20.0),
    ];

    #[test]
    fn activations_match_high_precision_oracle() {
        for &(x, s, g) in ACTIVATION_ORACLE {
            // 0.1, 0.25 etc. are not exact in f32; the oracle used the
            // decimal value, so allow for the input rounding (|f'| <= 1.2).
            let input_slack = 1.2 * (x as f64 - format!("{x}").parse::<f64>().unwrap()).abs();
            assert!((silu_scalar(x) as f64 - s).abs() <= 1e-6 + input_slack, "silu({x})");
            assert!((gelu_tanh_scalar(x) as f64 - g).abs() <= 1e-6 + input_slack, "gelu({x})");
        }
    }

    #[test]
    fn top_m_examples() {
        let (tau, mask) = top_m_threshold(&[3.0, -1.0, 4.0, 1.0], 2).unwrap();
        assert_eq!(tau, 1.0);
        assert_eq!(mask.alive_indices().collect::<Vec<_>>(), vec![0, 2]);

        let (tau, mask) = top_m_threshold(&[3.0, -1.0, 4.0], 0).unwrap();
        assert_eq!(tau, f32::INFINITY);
        assert_eq!(mask.alive_count(), 0);

        let (_, mask) = top_m_threshold(&[2.0, 2.0, 2.0], 2).unwrap();
        assert_eq!(mask.alive_indices().collect::<Vec<_>>(), vec![0, 1]);

        let (tau, mask) = top_m_threshold(&[1.0, 2.0], 2).unwrap();
        assert_eq!(tau, f32::NEG_INFINITY);
        assert_eq!(mask.alive_count(), 2);
    }

    #[test]
    fn top_m_rejects_oversized_m() {
        assert!(top_m_threshold(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn rng_is_reproducible_and_forks_differ() {
        let mut a = Rng::seed(7);
        let mut b = Rng::seed(7);
        assert_eq!(a.gaussian_vec(16, 1.0), b.gaussian_vec(16, 1.0));
        let mut fa = a.fork();
        let mut fb = b.fork();
        assert_eq!(fa.next_u64(), fb.next_u64());
        assert_ne!(a.next_u64(), fa.next_u64());
    }

    proptest! {
        #[test]
        fn gemv_is_linear(seed in any::<u64>(), rows in 1usize..12, cols in 1usize..12,
                          a in -3.0f32..3.0, b in -3.0f32..3.0) {
            let mut rng = Rng::seed(seed);
            let w = Mat32::gaussian(rows, cols, 1.0, &mut rng);
            let x = rng.gaussian_vec(cols, 1.0);
            let y = rng.gaussian_vec(cols, 1.0);
            let combo: Vec<f32> = x.iter().zip(&y).map(|(xi, yi)| a * xi + b * yi).collect();
            let lhs = gemv(&w, &combo).unwrap();
            let gx = gemv(&w, &x).unwrap();
            let gy = gemv(&w, &y).unwrap();
            let scale: f32 = w.data().iter().map(|v| v.abs()).sum::<f32>()
                * (a.abs() + b.abs() + 1.0) * 4.0;
            for i in 0..rows {
                let rhs = a * gx[i] + b * gy[i];
                prop_assert!((lhs[i] - rhs).abs() <= 1e-5 * scale.max(1.0));
            }
        }

        #[test]
        fn top_m_has_exact_count(v in prop::collection::vec(-4i8..4, 1..40), frac in 0.0f64..=1.0) {
            let v: Vec<f32> = v.into_iter().map(f32::from).collect();
            let m = ((v.len() as f64) * frac) as usize;
            let (_, mask) = top_m_threshold(&v, m).unwrap();
            prop_assert_eq!(mask.alive_count(), m);
        }

        #[test]
        fn silu_gelu_track_f64_reference(x in -20.0f32..20.0) {
            let xd = x as f64;
            let s = xd / (1.0 + (-xd).exp());
            let c = (2.0 / std::f64::consts::PI).sqrt();
            let g = 0.5 * xd * (1.0 + (c * (xd + 0.044715 * xd.powi(3))).tanh());
            prop_assert!((silu_scalar(x) as f64 - s).abs() <= 1e-6);
            prop_assert!((gelu_tanh_scalar(x) as f64 - g).abs() <= 1e-6);
        }
    }
}
