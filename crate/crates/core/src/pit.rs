//! Comparison models (Gaussian, Tukey g, Tukey g-and-h) and marginal
//! probability-integral-transform diagnostics.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gsun::{self, matern, GsunTheta, LocationSet, SpatialSample};
use crate::numcore::linalg::{cholesky, DenseMatrix, Vector};
use crate::numcore::rng::RngStream;
use crate::numcore::special::norm_cdf;

pub const HIST_BINS: usize = 20;
const GSUN_PIT_TOL: f64 = 5e-3;
const MAX_GSUN_PIT_DIM: usize = 256;

/// `τ_{g,h}(z) = g⁻¹(exp(gz) − 1) exp(hz²/2)`.
pub fn tukey_tau(z: f64, g: f64, h: f64) -> f64 {
    let tail = (0.5 * h * z * z).exp();
    if g.abs() < 1e-8 {
        z * tail
    } else {
        (g * z).exp_m1() / g * tail
    }
}

fn tukey_tau_deriv(z: f64, g: f64, h: f64) -> f64 {
    let tail = (0.5 * h * z * z).exp();
    let skew = if g.abs() < 1e-8 { z } else { (g * z).exp_m1() / g };
    tail * ((g * z).exp() + skew * h * z)
}

/// Inverse of [`tukey_tau`] by safeguarded Newton on a bracket that grows
/// geometrically from `[-1, 1]`.
pub fn tukey_tau_inv(t: f64, g: f64, h: f64, tol: f64) -> Result<f64> {
    if h < 0.0 {
        return Err(Error::InvalidParameter(format!("tail parameter h must be non-negative, got {h}")));
    }
    if !t.is_finite() {
        return Err(Error::BracketFailure(t));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    let mut lo = -1.0;
    let mut hi = 1.0;
    let mut grow = 0;
    while tukey_tau(lo, g, h) > t {
        lo *= 2.0;
        grow += 1;
        if grow > 60 {
            return Err(Error::BracketFailure(t));
        }
    }
    grow = 0;
    while tukey_tau(hi, g, h) < t {
        hi *= 2.0;
        grow += 1;
        if grow > 60 {
            return Err(Error::BracketFailure(t));
        }
    }
    let mut z = 0.5 * (lo + hi);
    for _ in 0..200 {
        let f = tukey_tau(z, g, h) - t;
        if f.abs() < tol {
            return Ok(z);
        }
        if f > 0.0 {
            hi = z;
        } else {
            lo = z;
        }
        let d = tukey_tau_deriv(z, g, h);
        let newton = z - f / d;
        z = if d > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo < 1e-15 * (1.0 + z.abs()) {
            return Ok(z);
        }
    }
    Ok(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TghParams {
    pub sigma2: f64,
    pub beta: f64,
    pub nu: f64,
    pub g: f64,
    pub h: f64,
}

/// A model of the zoo with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum Model {
    Gaussian { sigma2: f64, beta: f64, nu: f64 },
    Tg { sigma2: f64, beta: f64, nu: f64, g: f64 },
    Tgh(TghParams),
    Gsun(GsunTheta),
}

impl Model {
    pub fn label(&self) -> &'static str {
        match self {
            Model::Gaussian { .. } => "gaussian",
            Model::Tg { .. } => "tg",
            Model::Tgh(_) => "tgh",
            Model::Gsun(_) => "gsun",
        }
    }

    /// Build from a model name and its comma-separated parameter list.
    pub fn parse(name: &str, params: &str) -> Result<Self> {
        let v: Vec<f64> = params
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| Error::Parse(format!("parameter {p:?}: {e}"))))
            .collect::<Result<_>>()?;
        let want = |k: usize| -> Result<()> {
            if v.len() == k {
                Ok(())
            } else {
                Err(Error::Parse(format!("model {name} takes {k} parameters, got {}", v.len())))
            }
        };
        let m = match name {
            "gaussian" => {
                want(3)?;
                Model::Gaussian { sigma2: v[0], beta: v[1], nu: v[2] }
            }
            "tg" => {
                want(4)?;
                Model::Tg { sigma2: v[0], beta: v[1], nu: v[2], g: v[3] }
            }
            "tgh" => {
                want(5)?;
                Model::Tgh(TghParams { sigma2: v[0], beta: v[1], nu: v[2], g: v[3], h: v[4] })
            }
            "gsun" => {
                want(7)?;
                Model::Gsun(GsunTheta::from_array([v[0], v[1], v[2], v[3], v[4], v[5], v[6]]))
            }
            other => return Err(Error::Parse(format!("unknown model {other:?}; expected gaussian, tg, tgh or gsun"))),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let (s, b, n) = match *self {
            Model::Gaussian { sigma2, beta, nu } | Model::Tg { sigma2, beta, nu, .. } => (sigma2, beta, nu),
            Model::Tgh(p) => {
                if !(p.h >= 0.0) {
                    return Err(Error::InvalidParameter(format!("tail parameter h must be non-negative, got {}", p.h)));
                }
                (p.sigma2, p.beta, p.nu)
            }
            Model::Gsun(t) => return t.validate(),
        };
        if !(s > 0.0 && b > 0.0 && n > 0.0) {
            return Err(Error::InvalidParameter(format!("Matérn parameters must be positive, got ({s}, {b}, {n})")));
        }
        Ok(())
    }

    /// Matérn triple and Tukey (g, h) of the non-GSUN models.
    fn transformed_gaussian(&self) -> Option<(f64, f64, f64, f64, f64)> {
        match *self {
            Model::Gaussian { sigma2, beta, nu } => Some((sigma2, beta, nu, 0.0, 0.0)),
            Model::Tg { sigma2, beta, nu, g } => Some((sigma2, beta, nu, g, 0.0)),
            Model::Tgh(p) => Some((p.sigma2, p.beta, p.nu, p.g, p.h)),
            Model::Gsun(_) => None,
        }
    }
}

/// One replicate of `model` at `locs`.
pub fn simulate_model(model: &Model, locs: &LocationSet, rng: &mut RngStream) -> Result<SpatialSample> {
    model.validate()?;
    match model.transformed_gaussian() {
        None => {
            let Model::Gsun(theta) = model else { unreachable!() };
            gsun::simulate(theta, locs, 1, rng)
        }
        Some((sigma2, beta, nu, g, h)) => {
            let n = locs.len();
            let l = cholesky(&matern(locs, sigma2, beta, nu)?)?;
            let mut field_rng = rng.substream("gaussian-field", 0);
            let z = Vector::from_fn(n, |_, _| StandardNormal.sample(&mut field_rng));
            let mut x = l * z;
            if g != 0.0 || h != 0.0 {
                x.apply(|v| *v = tukey_tau(*v, g, h));
            }
            SpatialSample::new(locs.clone(), DenseMatrix::from_column_slice(n, 1, x.as_slice()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitReport {
    pub u: Vec<f64>,
    pub ks_stat: f64,
    pub p_value: f64,
    pub cdf_model: String,
    pub data_model: String,
    /// Locations whose cdf quadrature missed its tolerance.
    pub flagged: Vec<usize>,
}

impl PitReport {
    pub fn histogram(&self) -> Vec<usize> {
        histogram(&self.u, HIST_BINS)
    }

    /// `bin_lo,bin_hi,count` rows.
    pub fn histogram_csv(&self) -> String {
        let counts = self.histogram();
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (k, c) in counts.iter().enumerate() {
            let lo = k as f64 / HIST_BINS as f64;
            let hi = (k + 1) as f64 / HIST_BINS as f64;
            out.push_str(&format!("{lo},{hi},{c}\n"));
        }
        out
    }
}

pub fn histogram(u: &[f64], bins: usize) -> Vec<usize> {
    let mut counts = vec![0usize; bins];
    for &v in u {
        let k = ((v * bins as f64).floor() as usize).min(bins - 1);
        counts[k] += 1;
    }
    counts
}

/// Marginal PIT of `sample` (one replicate) under `cdf_model`.
pub fn pit(cdf_model: &Model, sample: &SpatialSample, data_label: &str) -> Result<PitReport> {
    cdf_model.validate()?;
    if sample.replicates() != 1 {
        return Err(Error::InvalidParameter(format!("PIT needs exactly one replicate, got {}", sample.replicates())));
    }
    let z = sample.replicate(0);
    let (u, flagged) = match cdf_model.transformed_gaussian() {
        Some((sigma2, _, _, g, h)) => {
            let sd = sigma2.sqrt();
            let mut u = Vec::with_capacity(z.len());
            for &v in z.iter() {
                u.push(transformed_gaussian_cdf(v, sd, g, h)?);
            }
            (u, Vec::new())
        }
        None => {
            let Model::Gsun(theta) = cdf_model else { unreachable!() };
            gsun_pit(theta, sample)?
        }
    };
    let (ks_stat, p_value) = ks_uniform(&u);
    Ok(PitReport { u, ks_stat, p_value, cdf_model: cdf_model.label().into(), data_model: data_label.into(), flagged })
}

/// `P(τ_{g,h}(Z) ≤ t) = Φ(τ⁻¹(t)/σ)` for `Z ~ N(0, σ²)`; with `h = 0` the
/// transform maps onto a half line and values beyond its end get 0 or 1.
fn transformed_gaussian_cdf(t: f64, sd: f64, g: f64, h: f64) -> Result<f64> {
    if g == 0.0 && h == 0.0 {
        return Ok(norm_cdf(t / sd));
    }
    if h == 0.0 && g.abs() >= 1e-8 {
        let end = -1.0 / g;
        if g > 0.0 && t <= end {
            return Ok(0.0);
        }
        if g < 0.0 && t >= end {
            return Ok(1.0);
        }
    }
    Ok(norm_cdf(tukey_tau_inv(t, g, h, 1e-12)? / sd))
}

fn gsun_pit(theta: &GsunTheta, sample: &SpatialSample) -> Result<(Vec<f64>, Vec<usize>)> {
    let n = sample.locs.len();
    if n > MAX_GSUN_PIT_DIM {
        return Err(Error::InvalidParameter(format!("GSUN PIT supports at most {MAX_GSUN_PIT_DIM} locations, got {n}")));
    }
    let field = gsun::to_sun(theta, &sample.locs)?;
    let res = field.params.marginal_cdfs(&sample.replicate(0), GSUN_PIT_TOL)?;
    let flagged = res.iter().enumerate().filter(|(_, r)| r.1 > GSUN_PIT_TOL).map(|(i, _)| i).collect();
    Ok((res.into_iter().map(|r| r.0).collect(), flagged))
}

/// One-sample Kolmogorov–Smirnov test against U(0,1): statistic and
/// asymptotic p-value with Stephens' small-sample correction.
pub fn ks_uniform(u: &[f64]) -> (f64, f64) {
    let n = u.len();
    if n == 0 {
        return (0.0, 1.0);
    }
    let mut s: Vec<f64> = u.to_vec();
    s.sort_by(f64::total_cmp);
    let nf = n as f64;
    let mut d = 0.0f64;
    for (i, &v) in s.iter().enumerate() {
        d = d.max((i + 1) as f64 / nf - v).max(v - i as f64 / nf);
    }
    let sq = nf.sqrt();
    let lambda = (sq + 0.12 + 0.11 / sq) * d;
    (d, kolmogorov_sf(lambda))
}

/// `P(K > λ)` for the Kolmogorov distribution.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        let pi2 = std::f64::consts::PI.powi(2);
        let x = -pi2 / (8.0 * lambda * lambda);
        let mut s = 0.0;
        for k in 1..=20 {
            let j = (2 * k - 1) as f64;
            s += (j * j * x).exp();
        }
        (1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s).clamp(0.0, 1.0)
    } else {
        let mut s = 0.0;
        for k in 1..=100 {
            let kf = k as f64;
            let term = (-2.0 * kf * kf * lambda * lambda).exp();
            s += if k % 2 == 1 { term } else { -term };
            if term < 1e-18 {
                break;
            }
        }
        (2.0 * s).clamp(0.0, 1.0)
    }
}

/// Mann–Whitney estimate of `P(A < B) + P(A = B)/2`.
pub fn prob_smaller(a: &[f64], b: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &x in a {
        for &y in b {
            wins += if x < y {
                1.0
            } else if x == y {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (a.len() * b.len()).max(1) as f64
}
