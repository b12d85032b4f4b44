//! Dense 2x2 SPD helpers, Gaussian densities and the random samplers used by
//! the models and filters.
//!
//! Samplers take any `rand::Rng`; reproducible runs get theirs from an
//! [`RngStream`], which maps a `(seed, stream)` pair to an independent ChaCha
//! keystream.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not symmetric positive definite")]
    NotSpd,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("weights must be finite, non-negative and have a positive sum")]
    DegenerateWeights,
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Kinematic state ordered `[px, vx, py, vy]`.
pub type KinematicVec = nalgebra::Vector4<f64>;

pub const PX: usize = 0;
pub const VX: usize = 1;
pub const PY: usize = 2;
pub const VY: usize = 3;

/// Symmetric positive definite 2x2 matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct SpdMatrix2(Matrix2<f64>);

impl SpdMatrix2 {
    pub fn new(m: Matrix2<f64>) -> Result<Self> {
        let scale = m.abs().max().max(f64::MIN_POSITIVE);
        if !m.iter().all(|v| v.is_finite()) || (m[(0, 1)] - m[(1, 0)]).abs() > 1e-12 * scale {
            return Err(LinalgError::NotSpd);
        }
        let off = 0.5 * (m[(0, 1)] + m[(1, 0)]);
        Self::from_entries(m[(0, 0)], off, m[(1, 1)])
    }

    pub fn from_entries(e11: f64, e12: f64, e22: f64) -> Result<Self> {
        let det = e11 * e22 - e12 * e12;
        if !(e11 > 0.0 && e22 > 0.0 && det > 0.0) || !det.is_finite() {
            return Err(LinalgError::NotSpd);
        }
        Ok(Self(Matrix2::new(e11, e12, e12, e22)))
    }

    pub fn scaled_identity(s: f64) -> Result<Self> {
        Self::from_entries(s, 0.0, s)
    }

    /// Caller guarantees symmetry and positivity.
    pub(crate) fn new_unchecked(e11: f64, e12: f64, e22: f64) -> Self {
        Self(Matrix2::new(e11, e12, e12, e22))
    }

    pub fn matrix(&self) -> &Matrix2<f64> {
        &self.0
    }

    pub fn entries(&self) -> [f64; 3] {
        [self.0[(0, 0)], self.0[(0, 1)], self.0[(1, 1)]]
    }

    pub fn det(&self) -> f64 {
        let [a, b, c] = self.entries();
        a * c - b * b
    }

    pub fn trace(&self) -> f64 {
        self.0[(0, 0)] + self.0[(1, 1)]
    }

    pub fn inverse(&self) -> Self {
        let [a, b, c] = self.entries();
        let d = self.det();
        Self::new_unchecked(c / d, -b / d, a / d)
    }

    /// Lower Cholesky factor.
    pub fn cholesky(&self) -> Matrix2<f64> {
        let [a, b, c] = self.entries();
        let l11 = a.sqrt();
        let l21 = b / l11;
        let l22 = (c - l21 * l21).max(0.0).sqrt();
        Matrix2::new(l11, 0.0, l21, l22)
    }

    pub fn sqrt(&self) -> Self {
        let s = self.det().sqrt();
        let t = (self.trace() + 2.0 * s).sqrt();
        let [a, b, c] = self.entries();
        Self::new_unchecked((a + s) / t, b / t, (c + s) / t)
    }

    pub fn scale(&self, k: f64) -> Result<Self> {
        let [a, b, c] = self.entries();
        Self::from_entries(k * a, k * b, k * c)
    }

    /// `x^T M^{-1} x`.
    pub fn inv_quad(&self, x: &Vector2<f64>) -> f64 {
        let [a, b, c] = self.entries();
        (c * x[0] * x[0] - 2.0 * b * x[0] * x[1] + a * x[1] * x[1]) / self.det()
    }
}

impl TryFrom<[f64; 3]> for SpdMatrix2 {
    type Error = LinalgError;
    fn try_from(e: [f64; 3]) -> Result<Self> {
        Self::from_entries(e[0], e[1], e[2])
    }
}

impl From<SpdMatrix2> for [f64; 3] {
    fn from(m: SpdMatrix2) -> Self {
        m.entries()
    }
}

/// Principal square root via the trace/determinant identity.
pub fn spd_sqrt(m: &SpdMatrix2) -> SpdMatrix2 {
    m.sqrt()
}

/// Log density of a multivariate normal.
pub fn gaussian_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let n = x.len();
    if mean.len() != n || cov.nrows() != n || cov.ncols() != n {
        return Err(LinalgError::Dimension(format!(
            "x has {n} entries, mean {}, cov {}x{}",
            mean.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    let chol = cov.clone().cholesky().ok_or(LinalgError::NotSpd)?;
    let l = chol.l();
    let logdet: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let y = l
        .solve_lower_triangular(&(x - mean))
        .ok_or(LinalgError::NotSpd)?;
    Ok(-0.5 * (n as f64 * LN_2PI + logdet + y.norm_squared()))
}

/// Bivariate normal log density with an SPD covariance.
pub fn gaussian_logpdf2(x: &Vector2<f64>, mean: &Vector2<f64>, cov: &SpdMatrix2) -> f64 {
    let d = x - mean;
    -0.5 * (2.0 * LN_2PI + cov.det().ln() + cov.inv_quad(&d))
}

/// Draw from `N(mean, cov)`. An all-zero covariance returns the mean.
pub fn sample_gaussian<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let n = mean.len();
    if cov.nrows() != n || cov.ncols() != n {
        return Err(LinalgError::Dimension(format!(
            "mean has {n} entries, cov is {}x{}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    if cov.iter().all(|v| *v == 0.0) {
        return Ok(mean.clone());
    }
    let l = cov.clone().cholesky().ok_or(LinalgError::NotSpd)?.unpack();
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(mean + l * z)
}

/// Wishart draw with `dof` degrees of freedom and mean `dof * scale`
/// (Bartlett decomposition).
pub fn sample_wishart<R: Rng + ?Sized>(scale: &SpdMatrix2, dof: f64, rng: &mut R) -> Result<SpdMatrix2> {
    if !(dof >= 2.0) || !dof.is_finite() {
        return Err(LinalgError::InvalidParameter(format!("wishart dof {dof} < 2")));
    }
    let c1 = ChiSquared::new(dof).map_err(|e| LinalgError::InvalidParameter(e.to_string()))?;
    let c2 = ChiSquared::new(dof - 1.0).map_err(|e| LinalgError::InvalidParameter(e.to_string()))?;
    let a11 = c1.sample(rng).sqrt();
    let a22 = c2.sample(rng).sqrt();
    let a21: f64 = rng.sample(StandardNormal);
    let a = Matrix2::new(a11, 0.0, a21, a22);
    let la = scale.cholesky() * a;
    let w = la * la.transpose();
    SpdMatrix2::from_entries(w[(0, 0)], 0.5 * (w[(0, 1)] + w[(1, 0)]), w[(1, 1)])
}

/// Inverse-Wishart draw parameterised by its mean.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(mean: &SpdMatrix2, dof: f64, rng: &mut R) -> Result<SpdMatrix2> {
    if !(dof > 3.0) || !dof.is_finite() {
        return Err(LinalgError::InvalidParameter(format!(
            "inverse-wishart dof {dof} must exceed 3"
        )));
    }
    let psi = mean.scale(dof - 3.0)?;
    Ok(sample_wishart(&psi.inverse(), dof, rng)?.inverse())
}

pub fn sample_poisson<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> Result<u64> {
    if !(rate >= 0.0) || !rate.is_finite() {
        return Err(LinalgError::InvalidParameter(format!("poisson rate {rate}")));
    }
    if rate == 0.0 {
        return Ok(0);
    }
    let d = Poisson::new(rate).map_err(|e| LinalgError::InvalidParameter(e.to_string()))?;
    Ok(d.sample(rng) as u64)
}

fn weight_total(weights: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for &w in weights {
        if !(w >= 0.0) || !w.is_finite() {
            return Err(LinalgError::DegenerateWeights);
        }
        total += w;
    }
    if total > 0.0 {
        Ok(total)
    } else {
        Err(LinalgError::DegenerateWeights)
    }
}

pub fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<usize> {
    let total = weight_total(weights)?;
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if u < acc {
                return Ok(i);
            }
        }
    }
    Ok(last)
}

/// Systematic resampling; returns `n` ancestor indices in ascending order.
pub fn systematic_resample<R: Rng + ?Sized>(weights: &[f64], n: usize, rng: &mut R) -> Result<Vec<usize>> {
    let total = weight_total(weights)?;
    let step = total / n as f64;
    let mut u = rng.random::<f64>() * step;
    let mut out = Vec::with_capacity(n);
    let mut acc = 0.0;
    let mut i = 0;
    let last = weights.iter().rposition(|w| *w > 0.0).unwrap_or(0);
    for _ in 0..n {
        while i < last && acc + weights[i] <= u {
            acc += weights[i];
            i += 1;
        }
        out.push(i);
        u += step;
    }
    Ok(out)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// A reproducible random stream: one seed, many independent stream ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Child stream identified by a tag path.
    pub fn derive(&self, tags: &[u64]) -> Self {
        let mut s = splitmix64(self.stream);
        for &t in tags {
            s = splitmix64(s ^ splitmix64(t.wrapping_add(0x5851_F42D_4C95_7F2D)));
        }
        Self { seed: self.seed, stream: s }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(self.stream);
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_of_diagonal() {
        let m = SpdMatrix2::from_entries(4.0, 0.0, 9.0).unwrap();
        assert_eq!(spd_sqrt(&m).entries(), [2.0, 0.0, 3.0]);
        let i = SpdMatrix2::scaled_identity(1.0).unwrap();
        assert_eq!(spd_sqrt(&i).entries(), [1.0, 0.0, 1.0]);
    }

    #[test]
    fn rejects_indefinite() {
        assert_eq!(SpdMatrix2::from_entries(1.0, 2.0, 1.0), Err(LinalgError::NotSpd));
        assert!(SpdMatrix2::new(Matrix2::new(1.0, 0.1, 0.2, 1.0)).is_err());
    }

    #[test]
    fn logpdf_at_mode() {
        let x = DVector::from_vec(vec![0.0]);
        let c = DMatrix::from_element(1, 1, 1.0);
        assert!((gaussian_logpdf(&x, &x, &c).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-15);
        let x2 = DVector::from_vec(vec![1.0, 2.0]);
        let i2 = DMatrix::identity(2, 2);
        assert!((gaussian_logpdf(&x2, &x2, &i2).unwrap() + LN_2PI).abs() < 1e-15);
        assert!(gaussian_logpdf(&x2, &x2, &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn zero_covariance_returns_mean() {
        let mut rng = RngStream::new(1, 0).rng();
        let m = DVector::from_vec(vec![1.0, -2.0]);
        assert_eq!(sample_gaussian(&m, &DMatrix::zeros(2, 2), &mut rng).unwrap(), m);
    }

    #[test]
    fn systematic_integer_counts() {
        let mut rng = RngStream::new(3, 9).rng();
        assert_eq!(systematic_resample(&[0.5, 0.5], 4, &mut rng).unwrap(), vec![0, 0, 1, 1]);
        assert!(systematic_resample(&[0.0, 0.0], 4, &mut rng).is_err());
    }

    #[test]
    fn categorical_point_mass() {
        let mut rng = RngStream::new(5, 1).rng();
        for _ in 0..100 {
            assert_eq!(sample_categorical(&[1.0, 0.0, 0.0], &mut rng).unwrap(), 0);
        }
        assert!(sample_categorical(&[0.0], &mut rng).is_err());
    }

    #[test]
    fn dof_checks() {
        let mut rng = RngStream::new(0, 0).rng();
        let m = SpdMatrix2::scaled_identity(1.0).unwrap();
        assert!(sample_wishart(&m, 1.5, &mut rng).is_err());
        assert!(sample_inverse_wishart(&m, 3.0, &mut rng).is_err());
        assert_eq!(sample_poisson(0.0, &mut rng).unwrap(), 0);
    }
}
