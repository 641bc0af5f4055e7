//! Multivariate normal vectors truncated from below, `X | X > lower`.
//!
//! Sampling picks rejection when the acceptance probability is at least
//! `1e-3` and a coordinate-wise Gibbs sampler otherwise. Moments are Monte
//! Carlo estimates with batch-means standard errors.

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::error::{Error, Result};
use crate::numcore::linalg::{cholesky, chol_solve, symmetrize, DenseMatrix, Vector};
use crate::numcore::mvn::{mvn_cdf_with, MvnCdfOptions};
use crate::numcore::rng::RngStream;
use crate::numcore::special::{norm_cdf, quantile_as241};

pub const MIN_ACCEPTANCE: f64 = 1e-3;
pub const GIBBS_BURN_IN: usize = 500;
pub const GIBBS_THIN: usize = 5;
pub const MIN_MOMENT_DRAWS: usize = 10_000;
const BATCHES: usize = 20;
const TAIL_SWITCH: f64 = 6.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TruncMvnSpec {
    /// Support is `{x : x > lower}` componentwise; `-inf` means no bound.
    pub lower: Vector,
    pub mean: Vector,
    pub cov: DenseMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMethod {
    Rejection,
    Gibbs,
}

impl TruncMvnSpec {
    pub fn new(lower: Vector, mean: Vector, cov: DenseMatrix) -> Result<Self> {
        let d = mean.len();
        if lower.len() != d || cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "truncated normal: lower {}, mean {d}, cov {}x{}",
                lower.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        if lower.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::DomainError("lower bounds must be finite or -inf".into()));
        }
        cholesky(&cov)?;
        Ok(Self { lower, mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `P(X > lower)` for the untruncated law.
    pub fn acceptance_probability(&self) -> Result<f64> {
        let upper = &self.mean - &self.lower;
        let zero = Vector::zeros(self.dim());
        let res = mvn_cdf_with(&upper, &zero, &self.cov, &MvnCdfOptions { abs_tol: 1e-5, rel_tol: 0.05, max_points: 20_000 })?;
        Ok(res.estimate)
    }

    pub fn choose_method(&self) -> Result<SamplerMethod> {
        if self.lower.iter().all(|v| *v == f64::NEG_INFINITY) {
            return Ok(SamplerMethod::Rejection);
        }
        Ok(if self.acceptance_probability()? >= MIN_ACCEPTANCE { SamplerMethod::Rejection } else { SamplerMethod::Gibbs })
    }

    fn is_inside(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lower.iter()).all(|(v, l)| v > l)
    }
}

/// Draw from `N(0,1) | Z > a`.
pub fn std_normal_above<R: Rng + ?Sized>(a: f64, rng: &mut R) -> f64 {
    if a == f64::NEG_INFINITY {
        return StandardNormal.sample(rng);
    }
    loop {
        let z = if a >= TAIL_SWITCH {
            // Exponential proposal with the optimal rate for the tail.
            let alpha = 0.5 * (a + (a * a + 4.0).sqrt());
            let exp = Exp::new(alpha).expect("positive rate");
            loop {
                let z = a + exp.sample(rng);
                let u: f64 = rng.random();
                if u <= (-0.5 * (z - alpha) * (z - alpha)).exp() {
                    break z;
                }
            }
        } else {
            let u = open_uniform(rng);
            if a > 0.0 {
                // Work in the upper tail to keep precision.
                -quantile_as241(u * norm_cdf(-a))
            } else {
                let pa = norm_cdf(a);
                quantile_as241(pa + u * (1.0 - pa))
            }
        };
        if z > a && z.is_finite() {
            return z;
        }
    }
}

fn open_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Draw `count` vectors, returned as the columns of a `d × count` matrix.
pub fn sample(spec: &TruncMvnSpec, count: usize, rng: &mut RngStream) -> Result<DenseMatrix> {
    let method = spec.choose_method()?;
    sample_with(spec, count, method, rng)
}

pub fn sample_with(spec: &TruncMvnSpec, count: usize, method: SamplerMethod, rng: &mut RngStream) -> Result<DenseMatrix> {
    if count == 0 {
        return Err(Error::InvalidParameter("count must be at least 1".into()));
    }
    match method {
        SamplerMethod::Rejection => sample_rejection(spec, count, rng),
        SamplerMethod::Gibbs => sample_gibbs(spec, count, rng),
    }
}

fn sample_rejection(spec: &TruncMvnSpec, count: usize, rng: &mut RngStream) -> Result<DenseMatrix> {
    let d = spec.dim();
    let l = cholesky(&spec.cov)?;
    let mut out = DenseMatrix::zeros(d, count);
    let mut z = vec![0.0; d];
    let mut x = vec![0.0; d];
    let max_tries = (count as f64 / MIN_ACCEPTANCE * 10.0) as usize + 1000;
    let mut filled = 0;
    let mut tries = 0usize;
    while filled < count {
        tries += 1;
        if tries > max_tries {
            return Err(Error::AcceptanceTooLow);
        }
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(rng);
        }
        for i in 0..d {
            let mut s = spec.mean[i];
            for k in 0..=i {
                s += l[(i, k)] * z[k];
            }
            x[i] = s;
        }
        if spec.is_inside(&x) {
            out.column_mut(filled).copy_from_slice(&x);
            filled += 1;
        }
    }
    Ok(out)
}

fn sample_gibbs(spec: &TruncMvnSpec, count: usize, rng: &mut RngStream) -> Result<DenseMatrix> {
    let d = spec.dim();
    let l = cholesky(&spec.cov)?;
    let prec = chol_solve(&l, &DenseMatrix::identity(d, d));
    let cond_sd: Vec<f64> = (0..d).map(|i| (1.0 / prec[(i, i)]).sqrt()).collect();
    let mut x: Vec<f64> = (0..d)
        .map(|i| {
            let lo = spec.lower[i];
            if lo == f64::NEG_INFINITY || spec.mean[i] > lo {
                spec.mean[i].max(lo + 0.5 * spec.cov[(i, i)].sqrt())
            } else {
                lo + 0.5 * spec.cov[(i, i)].sqrt()
            }
        })
        .collect();
    for (xi, lo) in x.iter_mut().zip(spec.lower.iter()) {
        if *xi <= *lo {
            return Err(Error::AcceptanceTooLow);
        }
    }
    let sweep = |x: &mut Vec<f64>, rng: &mut RngStream| {
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..d {
                if j != i {
                    s += prec[(i, j)] * (x[j] - spec.mean[j]);
                }
            }
            let m = spec.mean[i] - s / prec[(i, i)];
            let sd = cond_sd[i];
            let lo = spec.lower[i];
            loop {
                let a = if lo == f64::NEG_INFINITY { lo } else { (lo - m) / sd };
                let v = m + sd * std_normal_above(a, rng);
                if v > lo {
                    x[i] = v;
                    break;
                }
            }
        }
    };
    for _ in 0..GIBBS_BURN_IN {
        sweep(&mut x, rng);
    }
    let mut out = DenseMatrix::zeros(d, count);
    for c in 0..count {
        for _ in 0..GIBBS_THIN {
            sweep(&mut x, rng);
        }
        out.column_mut(c).copy_from_slice(&x);
    }
    Ok(out)
}

/// Monte Carlo moments with batch-means standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncMoments {
    pub mean: Vector,
    pub cov: DenseMatrix,
    pub mean_se: Vector,
    pub cov_se: DenseMatrix,
    pub method: SamplerMethod,
    pub draws: usize,
}

pub fn moments(spec: &TruncMvnSpec, draws: usize, rng: &mut RngStream) -> Result<TruncMoments> {
    let method = spec.choose_method()?;
    moments_with(spec, draws, method, rng)
}

pub fn moments_with(spec: &TruncMvnSpec, draws: usize, method: SamplerMethod, rng: &mut RngStream) -> Result<TruncMoments> {
    if draws < MIN_MOMENT_DRAWS {
        return Err(Error::InvalidParameter(format!("moments need at least {MIN_MOMENT_DRAWS} draws, got {draws}")));
    }
    let x = sample_with(spec, draws, method, rng)?;
    let (mean, cov, mean_se, cov_se) = sample_moments(&x);
    Ok(TruncMoments { mean, cov: repair_spd(cov), mean_se, cov_se, method, draws })
}

/// Mean, covariance and their batch-means standard errors for the columns
/// of `x`.
pub fn sample_moments(x: &DenseMatrix) -> (Vector, DenseMatrix, Vector, DenseMatrix) {
    let d = x.nrows();
    let n = x.ncols();
    let mean = Vector::from_fn(d, |i, _| x.row(i).sum() / n as f64);
    let centered = DenseMatrix::from_fn(d, n, |i, c| x[(i, c)] - mean[i]);
    let mut cov = &centered * centered.transpose() / (n as f64 - 1.0).max(1.0);
    symmetrize(&mut cov);

    let batches = BATCHES.min(n);
    let size = n / batches;
    let mut mean_batches = DenseMatrix::zeros(d, batches);
    let mut cov_batches = vec![DenseMatrix::zeros(d, d); batches];
    for b in 0..batches {
        let block = centered.columns(b * size, size);
        for i in 0..d {
            mean_batches[(i, b)] = block.row(i).sum() / size as f64;
        }
        cov_batches[b] = &block * block.transpose() / size as f64;
    }
    let bf = batches as f64;
    let mean_se = Vector::from_fn(d, |i, _| {
        let m = mean_batches.row(i).sum() / bf;
        let v = mean_batches.row(i).iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (bf - 1.0).max(1.0);
        (v / bf).sqrt()
    });
    let cov_se = DenseMatrix::from_fn(d, d, |i, j| {
        let m = cov_batches.iter().map(|c| c[(i, j)]).sum::<f64>() / bf;
        let v = cov_batches.iter().map(|c| (c[(i, j)] - m).powi(2)).sum::<f64>() / (bf - 1.0).max(1.0);
        (v / bf).sqrt()
    });
    (mean, cov, mean_se, cov_se)
}

/// Add the smallest power-of-ten jitter that makes `a` pass Cholesky.
pub fn repair_spd(mut a: DenseMatrix) -> DenseMatrix {
    symmetrize(&mut a);
    if cholesky(&a).is_ok() {
        return a;
    }
    let n = a.nrows();
    let scale = (a.trace().abs() / n.max(1) as f64).max(f64::MIN_POSITIVE);
    let mut jitter = 1e-12 * scale;
    loop {
        let mut b = a.clone();
        for i in 0..n {
            b[(i, i)] += jitter;
        }
        if cholesky(&b).is_ok() {
            return b;
        }
        jitter *= 10.0;
    }
}
