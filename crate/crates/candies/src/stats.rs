//! Numerical foundations: chi-squared distribution functions, multivariate
//! Gaussian densities, Mahalanobis distances and the Hellinger distance
//! between Gaussians.
//!
//! The chi-squared CDF is computed through the regularized lower incomplete
//! gamma function (series expansion for small arguments, continued fraction
//! otherwise), the quantile through bisection with a Newton polish on the
//! CDF. Everything density-related is kept in log space so that distances up
//! to a squared Mahalanobis distance of ~1400 do not underflow.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Lanczos approximation (g = 7, 9 coefficients), ~1e-15 relative accuracy
/// for positive arguments.
const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection: Γ(x)Γ(1−x) = π / sin(πx)
        return std::f64::consts::PI.ln()
            - (std::f64::consts::PI * x).sin().ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEF[0];
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

const GAMMA_EPS: f64 = 1e-15;
const GAMMA_MAX_ITER: usize = 500;

/// Regularized lower incomplete gamma P(a, x), by series expansion.
/// Converges fast for x < a + 1.
fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    for n in 1..GAMMA_MAX_ITER {
        term *= x / (a + n as f64);
        sum += term;
        if term.abs() < sum.abs() * GAMMA_EPS {
            break;
        }
    }
    sum * (a * x.ln() - x - ln_gamma(a)).exp()
}

/// Regularized upper incomplete gamma Q(a, x) by Lentz continued fraction.
/// Converges fast for x ≥ a + 1.
fn gamma_q_continued_fraction(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..GAMMA_MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < GAMMA_EPS {
            break;
        }
    }
    (a * x.ln() - x - ln_gamma(a)).exp() * h
}

/// Regularized lower incomplete gamma P(a, x) for a > 0, x ≥ 0.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        gamma_p_series(a, x)
    } else {
        1.0 - gamma_q_continued_fraction(a, x)
    }
}

/// CDF of the chi-squared distribution with `dof` degrees of freedom.
pub fn chi2_cdf(dof: u32, x: f64) -> Result<f64> {
    if dof == 0 {
        return Err(Error::InvalidParameter(
            "chi2_cdf requires dof >= 1".into(),
        ));
    }
    if x < 0.0 || !x.is_finite() && x != f64::INFINITY {
        return Err(Error::InvalidParameter(format!(
            "chi2_cdf requires x >= 0, got {x}"
        )));
    }
    if x == f64::INFINITY {
        return Ok(1.0);
    }
    Ok(gamma_p(f64::from(dof) / 2.0, x / 2.0).clamp(0.0, 1.0))
}

/// Density of the chi-squared distribution, used to polish quantiles.
fn chi2_pdf(dof: u32, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let a = f64::from(dof) / 2.0;
    0.5 * ((a - 1.0) * (x / 2.0).ln() - x / 2.0 - ln_gamma(a)).exp()
}

/// Quantile of the chi-squared distribution: the x with CDF(x) = q.
///
/// Bisection on a doubling bracket down to machine-level width, then a few
/// Newton steps. `q` must lie in `[0, 1)`; the quantile at 1 is unbounded.
pub fn chi2_inverse_cdf(dof: u32, q: f64) -> Result<f64> {
    if dof == 0 {
        return Err(Error::InvalidParameter(
            "chi2_inverse_cdf requires dof >= 1".into(),
        ));
    }
    if !(0.0..1.0).contains(&q) {
        return Err(Error::InvalidParameter(format!(
            "chi2_inverse_cdf requires 0 <= q < 1, got {q}"
        )));
    }
    if q == 0.0 {
        return Ok(0.0);
    }

    let d = f64::from(dof);
    let mut lo = 0.0;
    let mut hi = d + 10.0 * (2.0 * d).sqrt() + 10.0;
    while chi2_cdf(dof, hi)? < q {
        lo = hi;
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::Numerical(format!(
                "chi2_inverse_cdf bracket blew up for dof={dof}, q={q}"
            )));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break; // interval at floating point resolution
        }
        if chi2_cdf(dof, mid)? < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..4 {
        let f = chi2_cdf(dof, x)? - q;
        let df = chi2_pdf(dof, x);
        if df <= 0.0 {
            break;
        }
        let step = f / df;
        let next = x - step;
        if next > 0.0 && next.is_finite() {
            x = next;
        } else {
            break;
        }
        if step.abs() < 1e-14 * x.max(1.0) {
            break;
        }
    }
    Ok(x.max(0.0))
}

/// A multivariate Gaussian with cached Cholesky factor, precision matrix and
/// log-determinant of the covariance.
///
/// The covariance is symmetrized and ridge-regularized on construction
/// (`1e-6 · trace(Σ)/D` added to the diagonal, escalated if the factorization
/// still fails), so the stored matrix is always positive definite.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    precision: DMatrix<f64>,
    log_det: f64,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let dim = mean.len();
        if covariance.nrows() != dim || covariance.ncols() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: covariance.nrows(),
            });
        }
        if mean.iter().any(|v| !v.is_finite()) || covariance.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite Gaussian parameters".into()));
        }

        let mut cov = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                cov[(i, j)] = 0.5 * (covariance[(i, j)] + covariance[(j, i)]);
            }
        }
        let mut ridge = (1e-6 * cov.trace() / dim as f64).max(1e-12);
        let chol = loop {
            let mut ridged = cov.clone();
            for i in 0..dim {
                ridged[(i, i)] += ridge;
            }
            if let Some(ch) = Cholesky::new(ridged.clone()) {
                cov = ridged;
                break ch;
            }
            ridge *= 10.0;
            if ridge > 1e12 {
                return Err(Error::Numerical(
                    "covariance not positive definite even after regularization".into(),
                ));
            }
        };

        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let precision = chol.inverse();
        Ok(Self {
            mean,
            covariance: cov,
            chol,
            precision,
            log_det,
        })
    }

    /// Builds from a covariance that is already regularized (e.g. loaded
    /// from a serialized model): factors it as-is so the matrix survives a
    /// save/load round trip bit for bit, falling back to `new` only when the
    /// factorization fails.
    pub fn from_regularized(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let dim = mean.len();
        if covariance.nrows() != dim || covariance.ncols() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: covariance.nrows(),
            });
        }
        match Cholesky::new(covariance.clone()) {
            Some(chol) => {
                let log_det =
                    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                let precision = chol.inverse();
                Ok(Self {
                    mean,
                    covariance,
                    chol,
                    precision,
                    log_det,
                })
            }
            None => Self::new(mean, covariance),
        }
    }

    /// Isotropic Gaussian, mostly a test and example convenience.
    pub fn isotropic(mean: DVector<f64>, variance: f64) -> Result<Self> {
        let dim = mean.len();
        Self::new(mean, DMatrix::identity(dim, dim) * variance)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// The regularized covariance actually in effect.
    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn log_det_covariance(&self) -> f64 {
        self.log_det
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Squared Mahalanobis distance (x−μ)ᵀ Σ⁻¹ (x−μ).
    ///
    /// Computed through the Cholesky factor as ‖L⁻¹(x−μ)‖², which cannot go
    /// negative.
    pub fn mahalanobis_sq(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_dim(x)?;
        let diff = x - &self.mean;
        let z = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&diff)
            .expect("cholesky factor is invertible");
        Ok(z.norm_squared())
    }

    /// Log of the Gaussian density at x.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        let maha = self.mahalanobis_sq(x)?;
        Ok(-0.5 * (self.dim() as f64 * LN_2PI + self.log_det + maha))
    }

    /// Draw one sample, mean + L·z with z standard normal.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| standard_normal(rng));
        &self.mean + self.chol.l_dirty().lower_triangle() * z
    }

    /// Hellinger distance between two Gaussians, in [0, 1].
    ///
    /// Uses the closed form H² = 1 − BC with the Bhattacharyya coefficient
    /// BC = det(Σa)^¼ det(Σb)^¼ / det(Σ̄)^½ · exp(−⅛ dᵀ Σ̄⁻¹ d), Σ̄ the
    /// average covariance and d the mean difference.
    pub fn hellinger_distance(&self, other: &Gaussian) -> Result<f64> {
        if other.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        let avg = (&self.covariance + &other.covariance) * 0.5;
        let chol = Cholesky::new(avg)
            .ok_or_else(|| Error::Numerical("average covariance not positive definite".into()))?;
        let log_det_avg = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let diff = self.mean() - other.mean();
        let z = chol
            .l_dirty()
            .solve_lower_triangular(&diff)
            .expect("cholesky factor is invertible");
        let log_bc =
            0.25 * self.log_det + 0.25 * other.log_det - 0.5 * log_det_avg - 0.125 * z.norm_squared();
        let h2 = 1.0 - log_bc.exp();
        Ok(h2.clamp(0.0, 1.0).sqrt())
    }
}

/// Standard normal draw by Box-Muller, so only a uniform generator is needed.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = loop {
        let u = rng.random::<f64>();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn vec2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    // Independent oracle for the chi-squared CDF: composite Simpson
    // integration of the density.
    fn chi2_cdf_quadrature(dof: u32, x: f64) -> f64 {
        let n = 200_000;
        let h = x / n as f64;
        let f = |t: f64| chi2_pdf(dof, t);
        let mut acc = f(0.0) + f(x);
        for i in 1..n {
            let t = i as f64 * h;
            acc += if i % 2 == 0 { 2.0 * f(t) } else { 4.0 * f(t) };
        }
        acc * h / 3.0
    }

    #[test]
    fn chi2_cdf_lower_bound() {
        assert_eq!(chi2_cdf(2, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn chi2_cdf_dof2_closed_form() {
        // For dof = 2 the CDF is 1 − exp(−x/2).
        let x = 4.60517;
        let expected = 1.0 - (-x / 2.0_f64).exp();
        assert_abs_diff_eq!(expected, 0.900, epsilon = 1e-4);
        assert_abs_diff_eq!(chi2_cdf(2, x).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn chi2_cdf_dof11_quadrature_oracle() {
        let got = chi2_cdf(11, 19.675).unwrap();
        let oracle = chi2_cdf_quadrature(11, 19.675);
        assert_abs_diff_eq!(got, oracle, epsilon = 1e-9);
        assert_abs_diff_eq!(got, 0.950, epsilon = 1e-3);
    }

    #[test]
    fn chi2_cdf_monotone_and_saturates() {
        let mut prev = 0.0;
        for i in 0..200 {
            let x = i as f64 * 0.5;
            let c = chi2_cdf(5, x).unwrap();
            assert!(c >= prev);
            prev = c;
        }
        assert!(chi2_cdf(5, 1e6).unwrap() > 1.0 - 1e-12);
    }

    #[test]
    fn chi2_cdf_rejects_dof_zero() {
        assert!(chi2_cdf(0, 1.0).is_err());
    }

    #[test]
    fn chi2_quantile_at_zero() {
        for dof in [1, 2, 7, 40] {
            assert_eq!(chi2_inverse_cdf(dof, 0.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn chi2_quantile_rejects_q_one() {
        assert!(chi2_inverse_cdf(3, 1.0).is_err());
        assert!(chi2_inverse_cdf(3, 1.5).is_err());
    }

    #[test]
    fn chi2_quantile_alpha_region_anchors() {
        // Radii of common alpha-regions, as quoted for 1- and 2-dimensional
        // Gaussians.
        assert_abs_diff_eq!(chi2_inverse_cdf(2, 0.90).unwrap().sqrt(), 2.15, epsilon = 0.01);
        assert_abs_diff_eq!(chi2_inverse_cdf(2, 0.66).unwrap().sqrt(), 1.47, epsilon = 0.01);
        assert_abs_diff_eq!(chi2_inverse_cdf(1, 0.90).unwrap().sqrt(), 1.64, epsilon = 0.01);
    }

    #[test]
    fn chi2_quantile_dof2_closed_form() {
        // Quantile for dof = 2 is −2 ln(1−q).
        for q in [0.1, 0.5, 0.9, 0.99] {
            let expected = -2.0 * (1.0 - q as f64).ln();
            assert_abs_diff_eq!(chi2_inverse_cdf(2, q).unwrap(), expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn chi2_round_trip() {
        for dof in [1u32, 2, 5, 20] {
            for i in 1..100 {
                let q = i as f64 / 100.0;
                let x = chi2_inverse_cdf(dof, q).unwrap();
                let back = chi2_cdf(dof, x).unwrap();
                assert!(
                    (back - q).abs() < 1e-7,
                    "dof={dof} q={q} x={x} back={back}"
                );
            }
        }
    }

    #[test]
    fn mahalanobis_identity_cases() {
        let g = Gaussian::isotropic(vec2(1.0, -2.0), 1.0).unwrap();
        assert_abs_diff_eq!(g.mahalanobis_sq(&vec2(1.0, -2.0)).unwrap(), 0.0, epsilon = 1e-12);
        // Identity covariance reduces to squared Euclidean norm, up to the
        // 1e-6-relative ridge.
        assert_abs_diff_eq!(g.mahalanobis_sq(&vec2(4.0, 2.0)).unwrap(), 25.0, epsilon = 1e-4);
    }

    #[test]
    fn mahalanobis_diagonal_covariance() {
        let cov = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]);
        let g = Gaussian::new(vec2(0.0, 0.0), cov).unwrap();
        assert_abs_diff_eq!(g.mahalanobis_sq(&vec2(2.0, 1.0)).unwrap(), 2.0, epsilon = 1e-5);
    }

    #[test]
    fn mahalanobis_translation_invariant() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let g0 = Gaussian::new(vec2(0.0, 0.0), cov.clone()).unwrap();
        let g1 = Gaussian::new(vec2(5.0, -7.0), cov).unwrap();
        let d0 = g0.mahalanobis_sq(&vec2(1.0, 2.0)).unwrap();
        let d1 = g1.mahalanobis_sq(&vec2(6.0, -5.0)).unwrap();
        assert_abs_diff_eq!(d0, d1, epsilon = 1e-10);
    }

    #[test]
    fn mahalanobis_dimension_mismatch() {
        let g = Gaussian::isotropic(vec2(0.0, 0.0), 1.0).unwrap();
        assert!(g.mahalanobis_sq(&DVector::from_vec(vec![1.0])).is_err());
    }

    #[test]
    fn log_density_univariate() {
        let g = Gaussian::isotropic(DVector::from_vec(vec![0.0]), 1.0).unwrap();
        let ld = g.log_density(&DVector::from_vec(vec![0.0])).unwrap();
        assert_abs_diff_eq!(ld, -0.5 * LN_2PI, epsilon = 1e-6);
        assert_abs_diff_eq!(ld, -0.9189, epsilon = 1e-4);
    }

    #[test]
    fn log_density_bivariate_at_mean() {
        let g = Gaussian::isotropic(vec2(0.0, 0.0), 1.0).unwrap();
        let ld = g.log_density(&vec2(0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(ld, -LN_2PI, epsilon = 1e-6);
    }

    #[test]
    fn log_density_symmetric() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 0.8]);
        let g = Gaussian::new(vec2(1.0, 2.0), cov).unwrap();
        let v = vec2(0.3, -0.9);
        let plus = g.log_density(&(vec2(1.0, 2.0) + &v)).unwrap();
        let minus = g.log_density(&(vec2(1.0, 2.0) - &v)).unwrap();
        assert_abs_diff_eq!(plus, minus, epsilon = 1e-10);
    }

    #[test]
    fn log_density_no_underflow_at_large_distance() {
        let g = Gaussian::isotropic(vec2(0.0, 0.0), 1.0).unwrap();
        let far = vec2(26.0, 26.0); // squared distance 1352
        let ld = g.log_density(&far).unwrap();
        assert!(ld.is_finite());
        assert!(ld < -600.0);
    }

    #[test]
    fn precision_times_covariance_is_identity() {
        let cov = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, 0.2, 0.1, 0.2, 0.7]);
        let g = Gaussian::new(DVector::zeros(3), cov).unwrap();
        let prod = g.precision() * g.covariance();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(prod[(i, j)], want, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn hellinger_identical_is_zero() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 2.0]);
        let a = Gaussian::new(vec2(0.5, -0.5), cov.clone()).unwrap();
        let b = Gaussian::new(vec2(0.5, -0.5), cov).unwrap();
        assert_abs_diff_eq!(a.hellinger_distance(&b).unwrap(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn hellinger_equal_covariance_closed_form() {
        // With equal identity covariances, H = sqrt(1 − exp(−d²/8)).
        for d in [0.5, 1.0, 2.0, 4.0] {
            let a = Gaussian::isotropic(vec2(0.0, 0.0), 1.0).unwrap();
            let b = Gaussian::isotropic(vec2(d, 0.0), 1.0).unwrap();
            let expected = (1.0 - (-d * d / 8.0_f64).exp()).sqrt();
            assert_abs_diff_eq!(a.hellinger_distance(&b).unwrap(), expected, epsilon = 1e-5);
        }
    }

    #[test]
    fn hellinger_separated_means_approach_one() {
        let a = Gaussian::isotropic(vec2(0.0, 0.0), 1.0).unwrap();
        let b = Gaussian::isotropic(vec2(1e4, 0.0), 1.0).unwrap();
        assert!(a.hellinger_distance(&b).unwrap() > 1.0 - 1e-9);
    }

    #[test]
    fn hellinger_symmetric_and_bounded() {
        let a = Gaussian::new(vec2(0.0, 1.0), DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0]))
            .unwrap();
        let b = Gaussian::new(vec2(2.0, 0.0), DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.5]))
            .unwrap();
        let ab = a.hellinger_distance(&b).unwrap();
        let ba = b.hellinger_distance(&a).unwrap();
        assert_abs_diff_eq!(ab, ba, epsilon = 1e-12);
        assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn degenerate_covariance_is_regularized_not_fatal() {
        let g = Gaussian::new(vec2(1.0, 1.0), DMatrix::zeros(2, 2)).unwrap();
        assert!(g.log_density(&vec2(1.0, 1.0)).unwrap().is_finite());
    }
}
