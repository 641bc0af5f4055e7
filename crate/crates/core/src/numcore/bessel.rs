//! Modified Bessel function of the second kind, `K_ν(x)`, for real ν ≥ 0.
//!
//! Temme's series handles `x < 2`; Steed's continued fraction handles the
//! rest. Both produce `K_μ` and `K_{μ+1}` for `|μ| ≤ 1/2`, and forward
//! recurrence (stable for `K`) lifts the order to ν.

use std::f64::consts::PI;

use super::special::temme_gammas;
use crate::error::{Error, Result};

const EPS: f64 = 1e-16;
const MAX_ITER: usize = 10_000;
const SERIES_LIMIT: f64 = 2.0;

/// `e^x K_ν(x)` and `e^x K_{ν+1}(x)`.
fn scaled_pair(nu: f64, x: f64) -> (f64, f64) {
    let nl = (nu + 0.5).floor() as usize;
    let mu = nu - nl as f64;
    let mu2 = mu * mu;
    let xi = 1.0 / x;
    let xi2 = 2.0 * xi;

    let (mut k_mu, mut k_mu1) = if x < SERIES_LIMIT {
        let x2 = 0.5 * x;
        let pimu = PI * mu;
        let fact = if pimu.abs() < EPS { 1.0 } else { pimu / pimu.sin() };
        let d = -x2.ln();
        let e = mu * d;
        let fact2 = if e.abs() < EPS { 1.0 } else { e.sinh() / e };
        let (gam1, gam2, gampl, gammi) = temme_gammas(mu);
        let mut ff = fact * (gam1 * e.cosh() + gam2 * fact2 * d);
        let mut sum = ff;
        let ee = e.exp();
        let mut p = 0.5 * ee / gampl;
        let mut q = 0.5 / (ee * gammi);
        let mut c = 1.0;
        let dd = x2 * x2;
        let mut sum1 = p;
        for i in 1..MAX_ITER {
            let fi = i as f64;
            ff = (fi * ff + p + q) / (fi * fi - mu2);
            c *= dd / fi;
            p /= fi - mu;
            q /= fi + mu;
            let del = c * ff;
            sum += del;
            sum1 += c * (p - fi * ff);
            if del.abs() < sum.abs() * EPS {
                break;
            }
        }
        let scale = x.exp();
        (sum * scale, sum1 * xi2 * scale)
    } else {
        let mut b = 2.0 * (1.0 + x);
        let mut d = 1.0 / b;
        let mut h = d;
        let mut delh = d;
        let mut q1 = 0.0;
        let mut q2 = 1.0;
        let a1 = 0.25 - mu2;
        let mut q = a1;
        let mut c = a1;
        let mut a = -a1;
        let mut s = 1.0 + q * delh;
        for i in 2..MAX_ITER {
            let fi = i as f64;
            a -= 2.0 * (fi - 1.0);
            c = -a * c / fi;
            let qnew = (q1 - b * q2) / a;
            q1 = q2;
            q2 = qnew;
            q += c * qnew;
            b += 2.0;
            d = 1.0 / (b + a * d);
            delh = (b * d - 1.0) * delh;
            h += delh;
            let dels = q * delh;
            s += dels;
            if (dels / s).abs() < EPS {
                break;
            }
        }
        h *= a1;
        let k = (PI / (2.0 * x)).sqrt() / s;
        (k, k * (mu + x + 0.5 - h) * xi)
    };

    for i in 1..=nl {
        let next = (mu + i as f64) * xi2 * k_mu1 + k_mu;
        k_mu = k_mu1;
        k_mu1 = next;
    }
    (k_mu, k_mu1)
}

fn check(order: f64, x: f64) -> Result<()> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::DomainError(format!("bessel_k requires x > 0, got {x}")));
    }
    if !(order >= 0.0) || !order.is_finite() {
        return Err(Error::DomainError(format!("bessel_k requires order >= 0, got {order}")));
    }
    Ok(())
}

/// `K_ν(x)`.
pub fn bessel_k(order: f64, x: f64) -> Result<f64> {
    check(order, x)?;
    let (k, _) = scaled_pair(order, x);
    Ok(k * (-x).exp())
}

/// `e^x K_ν(x)`, finite for large x where `K_ν` itself underflows.
pub fn bessel_k_scaled(order: f64, x: f64) -> Result<f64> {
    check(order, x)?;
    Ok(scaled_pair(order, x).0)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `K_ν(x) = ∫_0^∞ exp(-x cosh t) cosh(ν t) dt`, trapezoid rule.
    /// The integrand is analytic with double-exponential decay, so the
    /// trapezoid rule converges geometrically.
    fn integral_oracle(nu: f64, x: f64) -> f64 {
        let h: f64 = 1e-3;
        let mut sum = 0.5 * (-x).exp();
        let mut t: f64 = h;
        loop {
            let v = (-x * t.cosh()).exp() * (nu * t).cosh();
            sum += v;
            if v < 1e-300 || t > 60.0 {
                break;
            }
            t += h;
        }
        sum * h
    }

    #[test]
    fn half_integer_closed_forms() {
        let k12 = bessel_k(0.5, 1.0).unwrap();
        let expected = (PI / 2.0).sqrt() * (-1.0f64).exp();
        assert!((k12 - expected).abs() / expected < 1e-12);
        assert!((k12 - 0.461_068).abs() < 1e-6);

        let k32 = bessel_k(1.5, 1.0).unwrap();
        let expected = (PI / 2.0).sqrt() * (-1.0f64).exp() * 2.0;
        assert!((k32 - expected).abs() / expected < 1e-12);
        assert!((k32 - 0.922_137).abs() < 1e-6);

        for x in [1e-6, 0.01, 0.7, 1.9, 2.0, 2.1, 10.0, 49.0] {
            let got = bessel_k(0.5, x).unwrap();
            let closed = (PI / (2.0 * x)).sqrt() * (-x).exp();
            assert!((got - closed).abs() / closed < 1e-12, "x = {x}");
            let got = bessel_k(2.5, x).unwrap();
            let closed = (PI / (2.0 * x)).sqrt() * (-x).exp() * (1.0 + 3.0 / x + 3.0 / (x * x));
            assert!((got - closed).abs() / closed < 1e-11, "x = {x}");
        }
    }

    #[test]
    fn recurrence_identity() {
        let (nu, x) = (1.0, 2.0);
        let lhs = bessel_k(nu + 1.0, x).unwrap();
        let rhs = bessel_k(nu - 1.0, x).unwrap() + 2.0 * nu / x * bessel_k(nu, x).unwrap();
        assert!((lhs - rhs).abs() / lhs < 1e-9);
    }

    #[test]
    fn matches_integral_oracle_on_grid() {
        for &nu in &[0.1, 0.3, 0.5, 0.77, 1.0, 1.5, 2.2, 3.0, 4.6, 5.0] {
            for &x in &[1e-3, 0.05, 0.5, 1.0, 1.99, 2.01, 3.5, 8.0, 20.0, 50.0] {
                let got = bessel_k(nu, x).unwrap();
                let want = integral_oracle(nu, x);
                assert!(((got - want) / want).abs() < 1e-9, "nu = {nu}, x = {x}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn strictly_decreasing_in_x() {
        for &nu in &[0.1, 0.5, 1.3, 5.0] {
            let mut prev = f64::INFINITY;
            let mut x = 1e-6;
            while x < 50.0 {
                let v = bessel_k(nu, x).unwrap();
                assert!(v < prev && v > 0.0);
                prev = v;
                x *= 1.3;
            }
        }
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(bessel_k(1.0, 0.0), Err(Error::DomainError(_))));
        assert!(matches!(bessel_k(1.0, -1.0), Err(Error::DomainError(_))));
        assert!(matches!(bessel_k(-0.5, 1.0), Err(Error::DomainError(_))));
    }

    #[test]
    fn scaled_survives_large_arguments() {
        let v = bessel_k_scaled(1.0, 2000.0).unwrap();
        let approx = (PI / 4000.0).sqrt();
        assert!((v - approx).abs() / approx < 1e-3);
    }
}
