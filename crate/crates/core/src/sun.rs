//! Unified skew-normal distribution in the convolution parameterization
//! `Y = ξ + H U + W`, `U = (W₀ | W₀ + τ > 0)`, `W₀ ~ N(0, Γ̄)`, `W ~ N(0, Ψ)`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::linalg::{chol_logdet, chol_solve, chol_solve_vec, cholesky, serde_rows, serde_vec, symmetrize, DenseMatrix, Vector};
use crate::numcore::mvn::{mvn_cdf_with, truncated_expectations, MvnCdf, MvnCdfOptions};
use crate::numcore::rng::RngStream;
use crate::numcore::special::{norm_cdf, LN_SQRT_2PI};
use crate::trunc_mvn::{self, repair_spd, sample_moments, TruncMvnSpec};

const UNIT_DIAG_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SunParams {
    #[serde(with = "serde_vec")]
    pub xi: Vector,
    #[serde(with = "serde_rows")]
    pub psi: DenseMatrix,
    #[serde(with = "serde_rows")]
    pub h_mat: DenseMatrix,
    #[serde(with = "serde_vec")]
    pub tau: Vector,
    #[serde(with = "serde_rows")]
    pub gamma_bar: DenseMatrix,
}

/// `log f(y)` together with an error bound on the log scale coming from the
/// two normal-cdf evaluations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogDensity {
    pub value: f64,
    pub error_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SunMoments {
    pub mean: Vector,
    pub cov: DenseMatrix,
    pub mean_se: Vector,
    pub cov_se: DenseMatrix,
}

/// Law of `Y₁ | Y₂ = z₂` and the scaling `γ_{1·2}` that turned the latent
/// covariance into a correlation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalResult {
    pub params: SunParams,
    pub gamma: Vector,
}

fn logdensity_opts() -> MvnCdfOptions {
    MvnCdfOptions { abs_tol: 0.0, rel_tol: 1e-4, max_points: 200_000 }
}

fn select(v: &Vector, idx: &[usize]) -> Vector {
    Vector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

fn select_block(m: &DenseMatrix, rows: &[usize], cols: &[usize]) -> DenseMatrix {
    DenseMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

fn select_rows(m: &DenseMatrix, rows: &[usize]) -> DenseMatrix {
    DenseMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

impl SunParams {
    pub fn new(xi: Vector, psi: DenseMatrix, h_mat: DenseMatrix, tau: Vector, gamma_bar: DenseMatrix) -> Result<Self> {
        let p = Self { xi, psi, h_mat, tau, gamma_bar };
        p.validate()?;
        Ok(p)
    }

    /// Plain Gaussian `N(ξ, Ψ)`, i.e. no latent dimensions.
    pub fn gaussian(xi: Vector, psi: DenseMatrix) -> Result<Self> {
        let d = xi.len();
        Self::new(xi, psi, DenseMatrix::zeros(d, 0), Vector::zeros(0), DenseMatrix::zeros(0, 0))
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.xi.len();
        let m = self.tau.len();
        if self.psi.shape() != (d, d) || self.h_mat.shape() != (d, m) || self.gamma_bar.shape() != (m, m) {
            return Err(Error::DimensionMismatch(format!(
                "SUN parameters: xi {d}, psi {:?}, H {:?}, tau {m}, gamma_bar {:?}",
                self.psi.shape(),
                self.h_mat.shape(),
                self.gamma_bar.shape()
            )));
        }
        if self.xi.iter().chain(self.tau.iter()).chain(self.h_mat.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("SUN parameters must be finite".into()));
        }
        cholesky(&self.psi)?;
        if m > 0 {
            for i in 0..m {
                if (self.gamma_bar[(i, i)] - 1.0).abs() > UNIT_DIAG_TOL {
                    return Err(Error::InvalidParameter(format!(
                        "gamma_bar must have unit diagonal, entry {i} is {}",
                        self.gamma_bar[(i, i)]
                    )));
                }
            }
            cholesky(&self.gamma_bar)?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.xi.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.tau.len()
    }

    fn is_gaussian(&self) -> bool {
        self.latent_dim() == 0 || self.h_mat.iter().all(|v| *v == 0.0)
    }

    /// `Ω = Ψ + H Γ̄ Hᵀ`.
    pub fn omega(&self) -> DenseMatrix {
        let mut o = &self.psi + &self.h_mat * &self.gamma_bar * self.h_mat.transpose();
        symmetrize(&mut o);
        o
    }

    fn latent_spec(&self) -> Result<TruncMvnSpec> {
        TruncMvnSpec::new(-self.tau.clone(), Vector::zeros(self.latent_dim()), self.gamma_bar.clone())
    }

    /// Draws as the columns of a `d × count` matrix.
    pub fn sample(&self, count: usize, rng: &mut RngStream) -> Result<DenseMatrix> {
        if count == 0 {
            return Err(Error::InvalidParameter("count must be at least 1".into()));
        }
        let d = self.dim();
        let mut out = DenseMatrix::from_fn(d, count, |i, _| self.xi[i]);
        if self.latent_dim() > 0 {
            let u = trunc_mvn::sample(&self.latent_spec()?, count, &mut rng.substream("latent", 0))?;
            out += &self.h_mat * u;
        }
        let l = cholesky(&self.psi)?;
        let mut noise_rng = rng.substream("noise", 0);
        let z = DenseMatrix::from_fn(d, count, |_, _| StandardNormal.sample(&mut noise_rng));
        out += l * z;
        Ok(out)
    }

    pub fn logpdf(&self, y: &Vector) -> Result<LogDensity> {
        self.logpdf_with(y, &logdensity_opts())
    }

    pub fn logpdf_with(&self, y: &Vector, opts: &MvnCdfOptions) -> Result<LogDensity> {
        let d = self.dim();
        if y.len() != d {
            return Err(Error::DimensionMismatch(format!("logpdf: point has {} entries, expected {d}", y.len())));
        }
        let omega = self.omega();
        let l = cholesky(&omega)?;
        let r = y - &self.xi;
        let w = crate::numcore::linalg::solve_lower(&l, &DenseMatrix::from_column_slice(d, 1, r.as_slice()));
        let quad = w.iter().map(|v| v * v).sum::<f64>();
        let gauss = -0.5 * quad - 0.5 * chol_logdet(&l) - d as f64 * LN_SQRT_2PI;
        if self.is_gaussian() {
            return Ok(LogDensity { value: gauss, error_bound: 0.0 });
        }
        let m = self.latent_dim();
        // A = Ω⁻¹ H Γ̄, μ = Aᵀ (y − ξ), Σ = Γ̄ − Γ̄ Hᵀ A.
        let hg = &self.h_mat * &self.gamma_bar;
        let a = chol_solve(&l, &hg);
        let mu = a.transpose() * &r;
        let mut sigma = &self.gamma_bar - hg.transpose() * &a;
        symmetrize(&mut sigma);
        let num = mvn_cdf_with(&(mu + &self.tau), &Vector::zeros(m), &sigma, opts)?;
        let den = self.latent_normalizer(opts)?;
        Ok(LogDensity {
            value: gauss + num.log_estimate - den.log_estimate,
            error_bound: num.rel_error() + den.rel_error(),
        })
    }

    /// `Φ_m(τ; 0, Γ̄)`, the normalizing constant shared by pdf and cdf.
    pub fn latent_normalizer(&self, opts: &MvnCdfOptions) -> Result<MvnCdf> {
        let m = self.latent_dim();
        mvn_cdf_with(&self.tau, &Vector::zeros(m), &self.gamma_bar, opts)
    }

    /// `P(Y ≤ x)` and its error bound.
    pub fn cdf(&self, x: &Vector, tol: f64) -> Result<(f64, f64)> {
        let opts = MvnCdfOptions { abs_tol: 0.0, rel_tol: tol, max_points: 400_000 };
        let den = self.latent_normalizer(&opts)?;
        self.cdf_given_normalizer(x, &den, tol)
    }

    /// [`SunParams::cdf`] with a precomputed [`SunParams::latent_normalizer`].
    pub fn cdf_given_normalizer(&self, x: &Vector, den: &MvnCdf, tol: f64) -> Result<(f64, f64)> {
        let d = self.dim();
        let m = self.latent_dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch(format!("cdf: point has {} entries, expected {d}", x.len())));
        }
        if self.is_gaussian() {
            let r = mvn_cdf_with(x, &self.xi, &self.psi, &MvnCdfOptions { abs_tol: tol, rel_tol: 0.0, max_points: 400_000 })?;
            return Ok((r.estimate, r.error_bound));
        }
        let hg = &self.h_mat * &self.gamma_bar;
        let omega = self.omega();
        let mut big = DenseMatrix::zeros(d + m, d + m);
        big.view_mut((0, 0), (d, d)).copy_from(&omega);
        big.view_mut((0, d), (d, m)).copy_from(&(-&hg));
        big.view_mut((d, 0), (m, d)).copy_from(&(-hg.transpose()));
        big.view_mut((d, d), (m, m)).copy_from(&self.gamma_bar);
        let upper = Vector::from_iterator(d + m, x.iter().chain(self.tau.iter()).copied());
        let mean = Vector::from_iterator(d + m, self.xi.iter().copied().chain(std::iter::repeat_n(0.0, m)));
        let abs_tol = 0.5 * tol * den.estimate;
        let num = mvn_cdf_with(&upper, &mean, &big, &MvnCdfOptions { abs_tol, rel_tol: 0.0, max_points: 400_000 })?;
        let ratio = (num.log_estimate - den.log_estimate).exp();
        let err = ratio * (num.rel_error() + den.rel_error());
        Ok((ratio.clamp(0.0, 1.0), err))
    }

    /// Marginal cdfs `P(Y_i ≤ x_i)` for every coordinate at once, each with
    /// its error bound.
    ///
    /// Uses `P(Y_i ≤ x_i) = E[Φ((x_i − ξ_i − (HU)_i)/√Ψ_ii)]` with the
    /// expectation over the truncated latent vector, so all coordinates share
    /// one latent integration. Equals `marginal(&[i])` followed by `cdf`.
    pub fn marginal_cdfs(&self, x: &Vector, tol: f64) -> Result<Vec<(f64, f64)>> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch(format!("marginal_cdfs: point has {} entries, expected {d}", x.len())));
        }
        let sd: Vec<f64> = (0..d).map(|i| self.psi[(i, i)].sqrt()).collect();
        if self.is_gaussian() {
            return Ok((0..d).map(|i| (norm_cdf((x[i] - self.xi[i]) / sd[i]), 0.0)).collect());
        }
        let m = self.latent_dim();
        let h = &self.h_mat;
        // V = −W₀ ~ N(0, Γ̄) restricted to V ≤ τ, and U = −V.
        let rows: Vec<Vec<(usize, f64)>> =
            (0..d).map(|i| (0..m).filter(|&k| h[(i, k)] != 0.0).map(|k| (k, h[(i, k)])).collect()).collect();
        let g = |v: &[f64], out: &mut [f64]| {
            for i in 0..d {
                let hv: f64 = rows[i].iter().map(|&(k, hk)| hk * v[k]).sum();
                out[i] = norm_cdf((x[i] - self.xi[i] + hv) / sd[i]);
            }
        };
        let opts = MvnCdfOptions { abs_tol: tol, rel_tol: 0.0, max_points: 400_000 };
        let res = truncated_expectations(&self.tau, &self.gamma_bar, d, g, &opts)?;
        Ok(res.into_iter().map(|e| (e.estimate.clamp(0.0, 1.0), e.error_bound)).collect())
    }

    /// `E(Y) = ξ + H E(U)` and `var(Y) = H var(U) Hᵀ + Ψ`, with `U`'s moments
    /// by Monte Carlo. Exact when there is no skewness.
    pub fn moments(&self, draws: usize, rng: &mut RngStream) -> Result<SunMoments> {
        let d = self.dim();
        if self.is_gaussian() {
            return Ok(SunMoments {
                mean: self.xi.clone(),
                cov: self.psi.clone(),
                mean_se: Vector::zeros(d),
                cov_se: DenseMatrix::zeros(d, d),
            });
        }
        if draws < trunc_mvn::MIN_MOMENT_DRAWS {
            return Err(Error::InvalidParameter(format!(
                "moments need at least {} draws, got {draws}",
                trunc_mvn::MIN_MOMENT_DRAWS
            )));
        }
        let u = trunc_mvn::sample(&self.latent_spec()?, draws, rng)?;
        let (u_mean, u_cov, _, _) = sample_moments(&u);
        let u_cov = repair_spd(u_cov);
        // Standard errors come from the transformed draws themselves.
        let (_, _, mean_se, cov_se) = sample_moments(&(&self.h_mat * &u));
        let mean = &self.xi + &self.h_mat * &u_mean;
        let mut cov = &self.h_mat * &u_cov * self.h_mat.transpose() + &self.psi;
        symmetrize(&mut cov);
        Ok(SunMoments { mean, cov, mean_se, cov_se })
    }

    /// Law of the sub-vector `Y_keep`.
    pub fn marginal(&self, keep: &[usize]) -> Result<SunParams> {
        let d = self.dim();
        if keep.is_empty() {
            return Err(Error::InvalidParameter("marginal needs at least one index".into()));
        }
        if let Some(&bad) = keep.iter().find(|&&i| i >= d) {
            return Err(Error::IndexOutOfRange { index: bad, dim: d });
        }
        Ok(SunParams {
            xi: select(&self.xi, keep),
            psi: select_block(&self.psi, keep, keep),
            h_mat: select_rows(&self.h_mat, keep),
            tau: self.tau.clone(),
            gamma_bar: self.gamma_bar.clone(),
        })
    }

    /// Law of `Y_{part1} | Y_{part2} = z2`.
    pub fn conditional(&self, part1: &[usize], part2: &[usize], z2: &Vector) -> Result<ConditionalResult> {
        let d = self.dim();
        let m = self.latent_dim();
        for &i in part1.iter().chain(part2.iter()) {
            if i >= d {
                return Err(Error::IndexOutOfRange { index: i, dim: d });
            }
        }
        if part1.is_empty() || part2.is_empty() {
            return Err(Error::InvalidParameter("conditional needs two non-empty index sets".into()));
        }
        if z2.len() != part2.len() {
            return Err(Error::DimensionMismatch(format!("z2 has {} entries, expected {}", z2.len(), part2.len())));
        }
        let psi11 = select_block(&self.psi, part1, part1);
        let psi12 = select_block(&self.psi, part1, part2);
        let psi22 = select_block(&self.psi, part2, part2);
        let h1 = select_rows(&self.h_mat, part1);
        let h2 = select_rows(&self.h_mat, part2);
        let r2 = z2 - select(&self.xi, part2);

        let l22 = cholesky(&psi22).map_err(|e| Error::SingularBlock(e.to_string()))?;
        let psi22_inv_r = chol_solve_vec(&l22, &r2);
        let psi22_inv_psi21 = chol_solve(&l22, &psi12.transpose());
        let reg = psi22_inv_psi21.transpose(); // Ψ₁₂Ψ₂₂⁻¹
        let mut psi_c = &psi11 - &reg * psi12.transpose();
        symmetrize(&mut psi_c);
        let gauss_mean = select(&self.xi, part1) + &psi12 * &psi22_inv_r;

        if m == 0 {
            let params = SunParams::gaussian(gauss_mean, psi_c)?;
            return Ok(ConditionalResult { params, gamma: Vector::zeros(0) });
        }

        // Γ̃ = (Γ̄⁻¹ + H₂ᵀΨ₂₂⁻¹H₂)⁻¹ = Γ̄ − Γ̄H₂ᵀ(Ψ₂₂ + H₂Γ̄H₂ᵀ)⁻¹H₂Γ̄.
        let hg2 = &h2 * &self.gamma_bar;
        let mut omega22 = &psi22 + &hg2 * h2.transpose();
        symmetrize(&mut omega22);
        let lo = cholesky(&omega22).map_err(|e| Error::SingularBlock(e.to_string()))?;
        let mut gt = &self.gamma_bar - hg2.transpose() * chol_solve(&lo, &hg2);
        symmetrize(&mut gt);
        let gamma = Vector::from_fn(m, |i, _| gt[(i, i)].max(0.0).sqrt());
        if gamma.iter().any(|g| !(*g > 0.0)) {
            return Err(Error::SingularBlock("conditional latent covariance has a zero diagonal".into()));
        }
        let inv_g = gamma.map(|g| 1.0 / g);

        let k = &h1 - &reg * &h2;
        let h_c = DenseMatrix::from_fn(k.nrows(), m, |i, j| k[(i, j)] * gamma[j]);
        let shift = &gt * (h2.transpose() * &psi22_inv_r); // Γ̃H₂ᵀΨ₂₂⁻¹(z₂−ξ₂)
        let tau_c = Vector::from_fn(m, |i, _| (self.tau[i] + shift[i]) * inv_g[i]);
        let mut gamma_c = DenseMatrix::from_fn(m, m, |i, j| gt[(i, j)] * inv_g[i] * inv_g[j]);
        symmetrize(&mut gamma_c);
        for i in 0..m {
            gamma_c[(i, i)] = 1.0;
        }
        // ξ₁·₂ = ξ₁ + (Ψ₁₂Ψ₂₂⁻¹ + H₁·₂Γ̄₁·₂γH₂ᵀΨ₂₂⁻¹)(z₂ − ξ₂).
        let xi_c = gauss_mean + &k * &shift;

        let params = SunParams { xi: xi_c, psi: psi_c, h_mat: h_c, tau: tau_c, gamma_bar: gamma_c };
        params.validate()?;
        Ok(ConditionalResult { params, gamma })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn scalar(xi: f64, psi: f64, h: f64, tau: f64) -> SunParams {
        SunParams::new(
            Vector::from_element(1, xi),
            DenseMatrix::from_element(1, 1, psi),
            DenseMatrix::from_element(1, 1, h),
            Vector::from_element(1, tau),
            DenseMatrix::identity(1, 1),
        )
        .unwrap()
    }

    fn random_params(d: usize, m: usize, rng: &mut RngStream) -> SunParams {
        let a = DenseMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
        let psi = &a * a.transpose() / d as f64 + DenseMatrix::identity(d, d) * 0.3;
        let b = DenseMatrix::from_fn(m, m, |_, _| StandardNormal.sample(rng));
        let c = &b * b.transpose() + DenseMatrix::identity(m, m);
        let g = DenseMatrix::from_fn(m, m, |i, j| c[(i, j)] / (c[(i, i)] * c[(j, j)]).sqrt());
        SunParams::new(
            Vector::from_fn(d, |_, _| StandardNormal.sample(rng)),
            psi,
            DenseMatrix::from_fn(d, m, |_, _| 1.5 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)),
            Vector::from_fn(m, |_, _| 0.5 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)),
            g,
        )
        .unwrap()
    }

    #[test]
    fn gaussian_reduction_logpdf() {
        let p = SunParams::new(
            Vector::from_column_slice(&[0.5, -1.0]),
            DenseMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            DenseMatrix::zeros(2, 1),
            Vector::from_element(1, 0.7),
            DenseMatrix::identity(1, 1),
        )
        .unwrap();
        let y = Vector::from_column_slice(&[0.1, 0.2]);
        let got = p.logpdf(&y).unwrap().value;
        let det: f64 = 2.0 - 0.09;
        let r = [0.1 - 0.5, 0.2 + 1.0];
        let quad = (1.0 * r[0] * r[0] - 2.0 * 0.3 * r[0] * r[1] + 2.0 * r[1] * r[1]) / det;
        let want = -0.5 * quad - 0.5 * det.ln() - (2.0 * PI).ln();
        assert!((got - want).abs() < 1e-13);
    }

    #[test]
    fn scalar_skew_normal_density() {
        // d=m=1, ξ=0, Ψ=1, H=h, τ=0 is a skew-normal: f(y) = 2 φ(y; 0, 1+h²) Φ(h y / sqrt(1+h²)).
        let h: f64 = 1.3;
        let p = scalar(0.0, 1.0, h, 0.0);
        for y in [-2.0, -0.3, 0.0, 1.1, 3.0] {
            let s2 = 1.0 + h * h;
            let want = (2.0f64).ln() - 0.5 * y * y / s2 - 0.5 * (2.0 * PI * s2).ln()
                + crate::numcore::special::log_norm_cdf(h * y / s2.sqrt());
            let got = p.logpdf(&Vector::from_element(1, y)).unwrap().value;
            assert!((got - want).abs() < 1e-12, "y {y}");
        }
    }

    #[test]
    fn density_integrates_to_one() {
        let p = scalar(0.0, 1.0, 1.0, 0.0);
        let (a, b, n) = (-12.0, 12.0, 24_000);
        let h = (b - a) / n as f64;
        let mut s = 0.0;
        for i in 0..=n {
            let y = a + i as f64 * h;
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * p.logpdf(&Vector::from_element(1, y)).unwrap().value.exp();
        }
        assert!((s * h / 3.0 - 1.0).abs() < 1e-8);
    }

    #[test]
    fn half_normal_moments() {
        let p = scalar(0.0, 1.0, 2.0, 0.0);
        let mut rng = RngStream::new(1);
        let m = p.moments(20_000, &mut rng).unwrap();
        let mean = 2.0 * (2.0 / PI).sqrt();
        let var = 4.0 * (1.0 - 2.0 / PI) + 1.0;
        assert!((m.mean[0] - mean).abs() < 4.0 * m.mean_se[0]);
        assert!((m.cov[(0, 0)] - var).abs() < 4.0 * m.cov_se[(0, 0)]);
    }

    #[test]
    fn cdf_full_mass_and_gaussian_reduction() {
        let mut rng = RngStream::new(2);
        let p = random_params(2, 2, &mut rng);
        let sd = p.omega().diagonal().map(f64::sqrt);
        let far = &p.xi + sd * 10.0 + p.h_mat.abs() * Vector::from_element(2, 10.0);
        assert!(p.cdf(&far, 1e-5).unwrap().0 >= 1.0 - 1e-4);

        let g = SunParams::new(p.xi.clone(), p.psi.clone(), DenseMatrix::zeros(2, 2), p.tau.clone(), p.gamma_bar.clone()).unwrap();
        let x = Vector::from_column_slice(&[0.3, -0.2]);
        let direct = mvn_cdf_with(&x, &p.xi, &p.psi, &MvnCdfOptions::default()).unwrap().estimate;
        assert!((g.cdf(&x, 1e-6).unwrap().0 - direct).abs() < 1e-12);
    }

    #[test]
    fn scalar_cdf_closed_form() {
        // Skew-normal cdf at 0 with slant α: 1/2 − arctan(α)/π.
        let p = scalar(0.0, 1.0, 1.0, 0.0);
        let (c, _) = p.cdf(&Vector::from_element(1, 0.0), 1e-8).unwrap();
        assert!((c - (0.5 - 1.0f64.atan() / PI)).abs() < 1e-12);
    }

    #[test]
    fn joint_marginal_cdfs_match_one_at_a_time() {
        let mut rng = RngStream::new(12);
        for (d, m) in [(1, 1), (2, 2), (3, 3), (2, 4)] {
            let p = random_params(d, m, &mut rng);
            let x = &p.xi + Vector::from_fn(d, |i, _| 0.7 * i as f64 - 0.4);
            let all = p.marginal_cdfs(&x, 1e-4).unwrap();
            for i in 0..d {
                let (one, err) = p.marginal(&[i]).unwrap().cdf(&Vector::from_element(1, x[i]), 1e-5).unwrap();
                assert!((all[i].0 - one).abs() < 2.0 * (all[i].1 + err) + 1e-6, "d {d} m {m} i {i}: {} vs {one}", all[i].0);
            }
        }
    }

    #[test]
    fn marginal_identity_and_composition() {
        let mut rng = RngStream::new(3);
        let p = random_params(4, 2, &mut rng);
        assert_eq!(p.marginal(&[0, 1, 2, 3]).unwrap(), p);
        let once = p.marginal(&[3, 1]).unwrap();
        let twice = p.marginal(&[0, 1, 3]).unwrap().marginal(&[2, 1]).unwrap();
        assert_eq!(once, twice);
        assert!(matches!(p.marginal(&[7]), Err(Error::IndexOutOfRange { index: 7, dim: 4 })));
    }

    #[test]
    fn conditional_gaussian_reduction() {
        let mut rng = RngStream::new(4);
        let mut p = random_params(3, 2, &mut rng);
        p.h_mat.fill(0.0);
        let z2 = Vector::from_column_slice(&[0.4, -0.9]);
        let c = p.conditional(&[0], &[1, 2], &z2).unwrap();
        let psi22 = select_block(&p.psi, &[1, 2], &[1, 2]);
        let psi12 = select_block(&p.psi, &[0], &[1, 2]);
        let inv = psi22.clone().try_inverse().unwrap();
        let mean = p.xi[0] + (&psi12 * &inv * (&z2 - select(&p.xi, &[1, 2])))[0];
        let var = p.psi[(0, 0)] - (&psi12 * &inv * psi12.transpose())[(0, 0)];
        assert!((c.params.xi[0] - mean).abs() < 1e-10);
        assert!((c.params.psi[(0, 0)] - var).abs() < 1e-10);
    }

    #[test]
    fn joint_density_factorizes() {
        let mut rng = RngStream::new(5);
        for (d, m) in [(2, 1), (2, 2), (3, 1), (3, 2)] {
            let p = random_params(d, m, &mut rng);
            let y = Vector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            let part1: Vec<usize> = vec![0];
            let part2: Vec<usize> = (1..d).collect();
            let joint = p.logpdf(&y).unwrap();
            let marg = p.marginal(&part2).unwrap().logpdf(&select(&y, &part2)).unwrap();
            let cond = p.conditional(&part1, &part2, &select(&y, &part2)).unwrap();
            let c = cond.params.logpdf(&select(&y, &part1)).unwrap();
            let tol = 2.0 * (joint.error_bound + marg.error_bound + c.error_bound) + 1e-10;
            assert!((joint.value - marg.value - c.value).abs() < tol, "d {d} m {m}: {} vs {}", joint.value, marg.value + c.value);
            for i in 0..m {
                assert!((cond.params.gamma_bar[(i, i)] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sample_skewness_follows_h() {
        let mut rng = RngStream::new(6);
        for h in [-2.0, 2.0] {
            let x = scalar(0.0, 1.0, h, 0.0).sample(20_000, &mut rng).unwrap();
            let n = x.ncols() as f64;
            let mean = x.sum() / n;
            let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let m3 = x.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
            assert_eq!((m3 / m2.powf(1.5)).signum(), f64::signum(h));
        }
    }

    #[test]
    fn json_is_row_major() {
        let p = SunParams::gaussian(Vector::zeros(2), DenseMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0])).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"psi\":[[1.0,0.5],[0.5,2.0]]"), "{s}");
        let back: SunParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
    }
}
