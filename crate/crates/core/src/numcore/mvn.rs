//! Multivariate normal cdf `Φ_d(b; μ, Σ) = P(X ≤ b)`.
//!
//! Dimensions 1 and 2 are evaluated directly (univariate cdf and the
//! Drezner–Wesolowsky/Genz bivariate routine). Higher dimensions use
//! Genz's separation-of-variables transform with variable reordering,
//! integrated by a randomized Richtmyer lattice with antithetic baker
//! points. The randomization is seeded from the dimension only, so the
//! result is a pure function of the inputs.

#![allow(clippy::excessive_precision)]

use std::f64::consts::PI;

use rand::Rng;

use super::linalg::{DenseMatrix, Vector};
use super::rng::RngStream;
use super::special::{log_norm_cdf, norm_cdf, norm_pdf, quantile_as241};
use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_BUDGET: usize = 200_000;
pub const MAX_DIM: usize = 1024;

const SHIFTS: usize = 12;
const FIRST_ROUND_POINTS: usize = 64;
const LN_RESCALE: f64 = 575.646_273_248_511_4; // ln(1e250)

/// Stopping rule for [`mvn_cdf_with`].
#[derive(Debug, Clone, Copy)]
pub struct MvnCdfOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_points: usize,
}

impl Default for MvnCdfOptions {
    fn default() -> Self {
        Self { abs_tol: DEFAULT_TOL, rel_tol: 0.0, max_points: DEFAULT_BUDGET }
    }
}

impl MvnCdfOptions {
    pub fn relative(rel_tol: f64, max_points: usize) -> Self {
        Self { abs_tol: 0.0, rel_tol, max_points }
    }
}

/// Result of a cdf evaluation. `error_bound` is three standard errors of
/// the randomized lattice estimate (zero for the direct routines).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MvnCdf {
    pub estimate: f64,
    pub log_estimate: f64,
    pub error_bound: f64,
    pub converged: bool,
    pub points: usize,
}

impl MvnCdf {
    fn exact(p: f64, log_p: f64) -> Self {
        Self { estimate: p, log_estimate: log_p, error_bound: 0.0, converged: true, points: 0 }
    }

    /// Relative error bound `error_bound / estimate`.
    pub fn rel_error(&self) -> f64 {
        if self.error_bound == 0.0 {
            0.0
        } else {
            (self.error_bound.ln() - self.log_estimate).exp()
        }
    }

    /// `Err(CdfBudgetExceeded)` when the tolerance was not met.
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::CdfBudgetExceeded { estimate: self.estimate, error_bound: self.error_bound })
        }
    }
}

/// `Φ_d(upper; mean, cov)` with absolute tolerance `tol` and a budget of
/// integrand evaluations.
pub fn mvn_cdf(upper: &Vector, mean: &Vector, cov: &DenseMatrix, tol: f64, budget: usize) -> Result<MvnCdf> {
    mvn_cdf_with(upper, mean, cov, &MvnCdfOptions { abs_tol: tol, rel_tol: 0.0, max_points: budget })
}

pub fn mvn_cdf_with(upper: &Vector, mean: &Vector, cov: &DenseMatrix, opts: &MvnCdfOptions) -> Result<MvnCdf> {
    let d = upper.len();
    if mean.len() != d || cov.nrows() != d || cov.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "mvn_cdf: upper {d}, mean {}, cov {}x{}",
            mean.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    if d > MAX_DIM {
        return Err(Error::DimensionMismatch(format!("mvn_cdf supports at most {MAX_DIM} dimensions, got {d}")));
    }
    if upper.iter().any(|v| v.is_nan()) || mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::DomainError("mvn_cdf: non-finite limits or mean".into()));
    }
    if upper.iter().any(|v| *v == f64::NEG_INFINITY) {
        return Ok(MvnCdf::exact(0.0, f64::NEG_INFINITY));
    }
    // Coordinates with an infinite upper limit integrate out exactly.
    let keep: Vec<usize> = (0..d).filter(|&i| upper[i].is_finite()).collect();
    let k = keep.len();
    let b: Vec<f64> = keep.iter().map(|&i| upper[i] - mean[i]).collect();
    let sub = DenseMatrix::from_fn(k, k, |i, j| cov[(keep[i], keep[j])]);
    for i in 0..k {
        if !(sub[(i, i)] > 0.0) {
            return Err(Error::NotPositiveDefinite { index: keep[i], pivot: sub[(i, i)] });
        }
    }
    match k {
        0 => Ok(MvnCdf::exact(1.0, 0.0)),
        1 => {
            let z = b[0] / sub[(0, 0)].sqrt();
            Ok(MvnCdf::exact(norm_cdf(z), log_norm_cdf(z)))
        }
        2 => {
            let s0 = sub[(0, 0)].sqrt();
            let s1 = sub[(1, 1)].sqrt();
            let r = (sub[(0, 1)] / (s0 * s1)).clamp(-1.0, 1.0);
            let p = bvn_upper(-b[0] / s0, -b[1] / s1, r).clamp(0.0, 1.0);
            Ok(MvnCdf::exact(p, p.ln()))
        }
        _ => {
            let sov = SovProblem::new(&b, &sub)?;
            Ok(sov.integrate(opts))
        }
    }
}

/// Estimate and error bound of one truncated expectation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Expectation {
    pub estimate: f64,
    pub error_bound: f64,
}

/// Self-normalized estimates of `E[g_j(X) | X ≤ upper]`, `j = 0..k`, for
/// `X ~ N(0, cov)`.
///
/// The separation-of-variables transform draws `X` sequentially from its
/// truncated conditionals with weight `Φ_d` increments; numerator and
/// denominator share every lattice point, so the weight fluctuations cancel
/// in the ratio. `g` receives the point in the original coordinate order
/// and writes `k` values. The stopping rule applies `opts` to the worst of
/// the `k` error bounds.
pub fn truncated_expectations<G>(upper: &Vector, cov: &DenseMatrix, k: usize, g: G, opts: &MvnCdfOptions) -> Result<Vec<Expectation>>
where
    G: Fn(&[f64], &mut [f64]),
{
    let d = upper.len();
    if cov.nrows() != d || cov.ncols() != d {
        return Err(Error::DimensionMismatch(format!("upper {d}, cov {}x{}", cov.nrows(), cov.ncols())));
    }
    if d == 0 || d > MAX_DIM {
        return Err(Error::DimensionMismatch(format!("truncated expectations need 1..={MAX_DIM} dimensions, got {d}")));
    }
    if upper.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
        return Err(Error::DomainError("upper limits must be above -inf".into()));
    }
    let b: Vec<f64> = upper.iter().map(|v| v.min(1e300)).collect();
    let sov = SovProblem::new(&b, cov)?;
    let q = richtmyer_generators(d);
    let mut rng = RngStream::with_stream(0x7472_756e_635f_6578, d as u64);
    let mut y = vec![0.0; d];
    let mut x = vec![0.0; d];
    let mut gv = vec![0.0; k];
    let mut w = vec![0.0; d];
    let mut shift = vec![0.0; d];

    let log_ref = sov.log_weight_full(&vec![0.5; d], &mut y);
    let log_ref = if log_ref.is_finite() { log_ref } else { 0.0 };

    // Pooled sums over all rounds, plus per-shift ratios of the latest round.
    let mut total_num = vec![0.0; k];
    let mut total_den = 0.0;
    let mut total = 0usize;
    let mut n_points = FIRST_ROUND_POINTS;
    loop {
        let mut ratios = vec![[0.0f64; SHIFTS]; k];
        for s_idx in 0..SHIFTS {
            for s in shift.iter_mut() {
                *s = rng.random::<f64>();
            }
            let mut num = vec![0.0; k];
            let mut den = 0.0;
            for kpt in 1..=n_points {
                for anti in [false, true] {
                    for j in 0..d {
                        let t = (2.0 * (kpt as f64 * q[j] + shift[j]).fract() - 1.0).abs().clamp(1e-16, 1.0 - 1e-16);
                        w[j] = if anti { 1.0 - t } else { t };
                    }
                    let wt = (sov.log_weight_full(&w, &mut y) - log_ref).exp();
                    if wt == 0.0 {
                        continue;
                    }
                    sov.point(&y, &mut x);
                    g(&x, &mut gv);
                    den += wt;
                    for j in 0..k {
                        num[j] += wt * gv[j];
                    }
                }
            }
            total_den += den;
            for j in 0..k {
                total_num[j] += num[j];
                ratios[j][s_idx] = if den > 0.0 { num[j] / den } else { 0.0 };
            }
        }
        total += SHIFTS * n_points * 2;
        let mut worst_excess = f64::NEG_INFINITY;
        let mut out = Vec::with_capacity(k);
        for j in 0..k {
            let mean = ratios[j].iter().sum::<f64>() / SHIFTS as f64;
            let var = ratios[j].iter().map(|r| (r - mean).powi(2)).sum::<f64>() / ((SHIFTS - 1) * SHIFTS) as f64;
            // The pooled estimate uses every point drawn so far; the spread of
            // the latest round bounds its error conservatively.
            let estimate = if total_den > 0.0 { total_num[j] / total_den } else { mean };
            let error_bound = 3.0 * var.sqrt();
            let target = opts.abs_tol.max(opts.rel_tol * estimate.abs());
            worst_excess = worst_excess.max(error_bound - target);
            out.push(Expectation { estimate, error_bound });
        }
        if worst_excess <= 0.0 || total >= opts.max_points {
            return Ok(out);
        }
        let remaining = (opts.max_points - total) / (2 * SHIFTS);
        n_points = (n_points * 2).min(remaining.max(1));
    }
}

/// Reordered Cholesky factor and limits for the separation-of-variables
/// integrand.
struct SovProblem {
    dim: usize,
    /// `order[i]` is the original index of the i-th integration variable.
    order: Vec<usize>,
    /// Row-major lower factor.
    chol: Vec<f64>,
    upper: Vec<f64>,
}

impl SovProblem {
    fn new(b: &[f64], cov: &DenseMatrix) -> Result<Self> {
        let d = b.len();
        let mut c: Vec<f64> = (0..d * d).map(|idx| cov[(idx / d, idx % d)]).collect();
        let mut upper = b.to_vec();
        let mut l = vec![0.0; d * d];
        let mut rem: Vec<f64> = (0..d).map(|i| c[i * d + i]).collect();
        let mut shift = vec![0.0; d];
        let mut y = vec![0.0; d];
        let mut orig: Vec<usize> = (0..d).collect();

        for i in 0..d {
            // Pick the remaining variable with the smallest conditional probability.
            let mut best = i;
            let mut best_p = f64::INFINITY;
            for j in i..d {
                let s = rem[j].max(1e-300).sqrt();
                let p = norm_cdf((upper[j] - shift[j]) / s);
                if p < best_p {
                    best_p = p;
                    best = j;
                }
            }
            if best != i {
                upper.swap(i, best);
                rem.swap(i, best);
                shift.swap(i, best);
                orig.swap(i, best);
                for col in 0..d {
                    c.swap(i * d + col, best * d + col);
                }
                for row in 0..d {
                    c.swap(row * d + i, row * d + best);
                }
                for col in 0..i {
                    l.swap(i * d + col, best * d + col);
                }
            }
            let diag = c[i * d + i];
            let mut s2 = rem[i];
            if s2 < -1e-8 * diag {
                return Err(Error::NotPositiveDefinite { index: orig[i], pivot: s2 });
            }
            s2 = s2.max(1e-14 * diag);
            let lii = s2.sqrt();
            l[i * d + i] = lii;
            for r in (i + 1)..d {
                let mut v = c[r * d + i];
                for kk in 0..i {
                    v -= l[r * d + kk] * l[i * d + kk];
                }
                l[r * d + i] = v / lii;
            }
            let ub = (upper[i] - shift[i]) / lii;
            let p = norm_cdf(ub);
            y[i] = if p > 1e-300 { -norm_pdf(ub) / p } else { ub };
            for r in (i + 1)..d {
                let lri = l[r * d + i];
                rem[r] -= lri * lri;
                shift[r] += lri * y[i];
            }
        }
        Ok(Self { dim: d, order: orig, chol: l, upper })
    }

    /// log of the integrand at `w ∈ (0,1)^{d-1}`.
    fn log_integrand(&self, w: &[f64], y: &mut [f64]) -> f64 {
        let d = self.dim;
        let l = &self.chol;
        let mut prod = 1.0f64;
        let mut rescales = 0.0f64;
        let mut log_extra = 0.0f64;
        let mut e;
        for i in 0..d {
            let mut s = 0.0;
            let row = &l[i * d..i * d + i];
            for (lik, yk) in row.iter().zip(y.iter()) {
                s += lik * yk;
            }
            let arg = (self.upper[i] - s) / l[i * d + i];
            if arg < -37.0 {
                // Φ(arg) underflows the quantile step below; the tail is
                // accounted in log space and the remaining dimensions are
                // conditioned on the limit itself.
                log_extra += log_norm_cdf(arg);
                e = 0.0;
            } else {
                e = norm_cdf(arg);
                prod *= e;
                if prod < 1e-250 {
                    prod *= 1e250;
                    rescales += 1.0;
                }
            }
            if i + 1 < d {
                y[i] = if e > 0.0 { quantile_as241((w[i] * e).max(1e-300)) } else { arg };
            }
        }
        if prod <= 0.0 {
            return f64::NEG_INFINITY;
        }
        prod.ln() - rescales * LN_RESCALE + log_extra
    }

    /// Like [`Self::log_integrand`] but with `w` of length `d`, so that the
    /// whole truncated point `y` is drawn.
    fn log_weight_full(&self, w: &[f64], y: &mut [f64]) -> f64 {
        let d = self.dim;
        let l = &self.chol;
        let mut log_w = 0.0;
        for i in 0..d {
            let mut s = 0.0;
            for (lik, yk) in l[i * d..i * d + i].iter().zip(y.iter()) {
                s += lik * yk;
            }
            let arg = (self.upper[i] - s) / l[i * d + i];
            if arg < -37.0 {
                log_w += log_norm_cdf(arg);
                y[i] = arg;
            } else {
                let e = norm_cdf(arg);
                log_w += e.ln();
                y[i] = quantile_as241((w[i] * e).max(1e-300));
            }
        }
        log_w
    }

    /// `x = L y` scattered back to the original coordinate order.
    fn point(&self, y: &[f64], x: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            let mut s = 0.0;
            for (lik, yk) in self.chol[i * d..=i * d + i].iter().zip(y.iter()) {
                s += lik * yk;
            }
            x[self.order[i]] = s;
        }
    }

    fn integrate(&self, opts: &MvnCdfOptions) -> MvnCdf {
        let d = self.dim;
        let nd = d - 1;
        let q: Vec<f64> = richtmyer_generators(nd);
        let mut rng = RngStream::with_stream(0x6d76_6e5f_6364_66, d as u64);
        let mut y = vec![0.0; d];
        let mut w = vec![0.0; nd];
        let mut w_anti = vec![0.0; nd];

        let center = vec![0.5; nd];
        let log_ref = {
            let v = self.log_integrand(&center, &mut y);
            if v.is_finite() { v } else { 0.0 }
        };

        let mut acc_est = 0.0;
        let mut acc_var = 0.0;
        let mut have_acc = false;
        let mut total = 0usize;
        let mut n_points = FIRST_ROUND_POINTS;
        let mut shift = vec![0.0; nd];

        loop {
            let mut shift_means = [0.0f64; SHIFTS];
            for sm in shift_means.iter_mut() {
                for s in shift.iter_mut() {
                    *s = rng.random::<f64>();
                }
                let mut sum = 0.0;
                for kpt in 1..=n_points {
                    for j in 0..nd {
                        let x = (kpt as f64 * q[j] + shift[j]).fract();
                        let t = (2.0 * x - 1.0).abs();
                        w[j] = t.clamp(1e-16, 1.0 - 1e-16);
                        w_anti[j] = 1.0 - w[j];
                    }
                    let a = (self.log_integrand(&w, &mut y) - log_ref).exp();
                    let b = (self.log_integrand(&w_anti, &mut y) - log_ref).exp();
                    sum += 0.5 * (a + b);
                }
                *sm = sum / n_points as f64;
            }
            total += SHIFTS * n_points * 2;
            let mean = shift_means.iter().sum::<f64>() / SHIFTS as f64;
            let var = shift_means.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / ((SHIFTS - 1) * SHIFTS) as f64;
            if !have_acc {
                acc_est = mean;
                acc_var = var;
                have_acc = true;
            } else if var <= 0.0 || acc_var <= 0.0 {
                if var <= acc_var {
                    acc_est = mean;
                    acc_var = var;
                }
            } else {
                let wa = 1.0 / acc_var;
                let wb = 1.0 / var;
                acc_est = (acc_est * wa + mean * wb) / (wa + wb);
                acc_var = 1.0 / (wa + wb);
            }
            let scale = log_ref.exp();
            let err_scaled = 3.0 * acc_var.sqrt();
            let est_scaled = acc_est.max(0.0);
            let estimate = (est_scaled * scale).min(1.0);
            let error_bound = err_scaled * scale;
            let target = opts.abs_tol.max(opts.rel_tol * estimate);
            let converged = error_bound <= target;
            if converged || total >= opts.max_points {
                let log_estimate = if est_scaled > 0.0 { (est_scaled.ln() + log_ref).min(0.0) } else { f64::NEG_INFINITY };
                return MvnCdf { estimate, log_estimate, error_bound, converged, points: total };
            }
            let remaining = (opts.max_points - total) / (2 * SHIFTS);
            n_points = (n_points * 2).min(remaining.max(1));
        }
    }
}

fn primes(count: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(count);
    let mut candidate = 2u64;
    while out.len() < count {
        if out.iter().take_while(|&&p| p * p <= candidate).all(|&p| candidate % p != 0) {
            out.push(candidate);
        }
        candidate += 1;
    }
    out
}

fn richtmyer_generators(dim: usize) -> Vec<f64> {
    primes(dim).into_iter().map(|p| (p as f64).sqrt().fract()).collect()
}

const GL6: [(f64, f64); 3] = [
    (0.171_324_492_379_170_5, -0.932_469_514_203_152_2),
    (0.360_761_573_048_138_4, -0.661_209_386_466_264_7),
    (0.467_913_934_572_690_4, -0.238_619_186_083_197_0),
];
const GL12: [(f64, f64); 6] = [
    (0.047_175_336_386_511_77, -0.981_560_634_246_719_1),
    (0.106_939_325_995_318_3, -0.904_117_256_370_475_0),
    (0.160_078_328_543_346_4, -0.769_902_674_194_305_0),
    (0.203_167_426_723_065_9, -0.587_317_954_286_617_1),
    (0.233_492_536_538_354_7, -0.367_831_498_998_180_2),
    (0.249_147_045_813_402_9, -0.125_233_408_511_469_2),
];
const GL20: [(f64, f64); 10] = [
    (0.017_614_007_139_152_12, -0.993_128_599_185_094_9),
    (0.040_601_429_800_386_94, -0.963_971_927_277_913_8),
    (0.062_672_048_334_109_06, -0.912_234_428_251_325_9),
    (0.083_276_741_576_704_75, -0.839_116_971_822_218_8),
    (0.101_930_119_817_240_4, -0.746_331_906_460_150_8),
    (0.118_194_531_961_518_4, -0.636_053_680_726_515_0),
    (0.131_688_638_449_176_6, -0.510_867_001_950_827_1),
    (0.142_096_109_318_382_1, -0.373_706_088_715_419_6),
    (0.149_172_986_472_603_7, -0.227_785_851_141_645_1),
    (0.152_753_387_130_725_9, -0.076_526_521_133_497_33),
];

/// `P(X > h, Y > k)` for standard normals with correlation `r`
/// (Genz's BVND, after Drezner and Wesolowsky).
pub fn bvn_upper(h: f64, k: f64, r: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let quad: &[(f64, f64)] = if r.abs() < 0.3 {
        &GL6
    } else if r.abs() < 0.75 {
        &GL12
    } else {
        &GL20
    };
    let h = h;
    let mut k = k;
    let mut hk = h * k;
    let mut bvn = 0.0;
    if r.abs() < 0.925 {
        let hs = (h * h + k * k) / 2.0;
        let asr = r.asin();
        for &(w, x) in quad {
            for sign in [-1.0, 1.0] {
                let sn = (asr * (sign * x + 1.0) / 2.0).sin();
                bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
            }
        }
        bvn = bvn * asr / (2.0 * two_pi) + norm_cdf(-h) * norm_cdf(-k);
    } else {
        if r < 0.0 {
            k = -k;
            hk = -hk;
        }
        if r.abs() < 1.0 {
            let as_ = (1.0 - r) * (1.0 + r);
            let mut a = as_.sqrt();
            let bs = (h - k) * (h - k);
            let c = (4.0 - hk) / 8.0;
            let d = (12.0 - hk) / 16.0;
            bvn = a
                * (-(bs / as_ + hk) / 2.0).exp()
                * (1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as_ * as_ / 5.0);
            if hk > -160.0 {
                let b = bs.sqrt();
                bvn -= (-hk / 2.0).exp()
                    * two_pi.sqrt()
                    * norm_cdf(-b / a)
                    * b
                    * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
            }
            a /= 2.0;
            for &(w, x) in quad {
                for sign in [-1.0, 1.0] {
                    let xs0 = a * (sign * x + 1.0);
                    let xs = xs0 * xs0;
                    let rs = (1.0 - xs).sqrt();
                    let asr = -(bs / xs + hk) / 2.0;
                    if asr > -100.0 {
                        bvn += a
                            * w
                            * asr.exp()
                            * ((-hk * (1.0 - rs) / (2.0 * (1.0 + rs))).exp() / rs
                                - (1.0 + c * xs * (1.0 + d * xs)));
                    }
                }
            }
            bvn = -bvn / two_pi;
        }
        if r > 0.0 {
            bvn += norm_cdf(-h.max(k));
        } else {
            bvn = -bvn;
            if k > h {
                if h < 0.0 {
                    bvn += norm_cdf(k) - norm_cdf(h);
                } else {
                    bvn += norm_cdf(-h) - norm_cdf(-k);
                }
            }
        }
    }
    bvn.clamp(0.0, 1.0)
}
