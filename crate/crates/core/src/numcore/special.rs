//! Univariate normal functions and gamma helpers.

#![allow(clippy::excessive_precision)]


pub const SQRT_2: f64 = std::f64::consts::SQRT_2;
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
pub const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal cdf Φ(x), accurate in both tails.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        1.0
    } else if x == f64::NEG_INFINITY {
        0.0
    } else {
        0.5 * libm::erfc(-x / SQRT_2)
    }
}

/// Upper tail 1 − Φ(x).
#[inline]
pub fn norm_sf(x: f64) -> f64 {
    norm_cdf(-x)
}

/// log Φ(x), finite for every finite x.
pub fn log_norm_cdf(x: f64) -> f64 {
    if x > -30.0 {
        norm_cdf(x).ln()
    } else {
        // Asymptotic series of the Mills ratio.
        let z = x * x;
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..8 {
            term *= -((2 * k - 1) as f64) / z;
            sum += term;
        }
        -0.5 * z - (-x).ln() - LN_SQRT_2PI + sum.ln()
    }
}

/// Standard normal quantile Φ⁻¹(p), polished with one Newton step.
pub fn norm_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let x = quantile_as241(p);
    if !x.is_finite() {
        return x;
    }
    let pdf = norm_pdf(x);
    if pdf > 1e-300 {
        let err = if p < 0.5 { norm_cdf(x) - p } else { (1.0 - p) - norm_sf(x) };
        let step = err / pdf;
        if step.abs() < 1e-3 {
            return x - step;
        }
    }
    x
}

/// Wichura's AS241 (PPND16) normal quantile, relative accuracy ~1e-16.
pub fn quantile_as241(p: f64) -> f64 {
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q
            * (((((((2.509_080_928_730_122_672_7e3 * r + 3.343_057_558_358_812_810_5e4) * r
                + 6.726_577_092_700_870_085_3e4)
                * r
                + 4.592_195_393_154_987_145_7e4)
                * r
                + 1.373_169_376_550_946_112_5e4)
                * r
                + 1.971_590_950_306_551_442_7e3)
                * r
                + 1.331_416_678_917_843_774_5e2)
                * r
                + 3.387_132_872_796_366_608_0)
            / (((((((5.226_495_278_852_854_561_0e3 * r + 2.872_908_573_572_194_267_4e4) * r
                + 3.930_789_580_009_271_061_0e4)
                * r
                + 2.121_379_430_158_659_586_7e4)
                * r
                + 5.394_196_021_424_751_107_7e3)
                * r
                + 6.871_870_074_920_579_083_0e2)
                * r
                + 4.231_333_070_160_091_125_2e1)
                * r
                + 1.0);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    if r <= 0.0 {
        return if q < 0.0 { f64::NEG_INFINITY } else { f64::INFINITY };
    }
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        (((((((7.745_450_142_783_414_076_4e-4 * r + 2.272_384_498_926_918_458_33e-2) * r
            + 2.417_807_251_774_506_117_7e-1)
            * r
            + 1.270_458_252_452_368_382_58)
            * r
            + 3.647_848_324_763_204_605_04)
            * r
            + 5.769_497_221_460_691_405_5)
            * r
            + 4.630_337_846_156_545_295_9)
            * r
            + 1.423_437_110_749_683_577_34)
            / (((((((1.050_750_071_644_416_843_24e-9 * r + 5.475_938_084_995_344_946e-4) * r
                + 1.519_866_656_361_645_719_66e-2)
                * r
                + 1.481_039_764_274_800_745_9e-1)
                * r
                + 6.897_673_349_851_000_045_5e-1)
                * r
                + 1.676_384_830_183_803_849_4)
                * r
                + 2.053_191_626_637_758_821_87)
                * r
                + 1.0)
    } else {
        let r = r - 5.0;
        (((((((2.010_334_399_292_288_132_65e-7 * r + 2.711_555_568_743_487_578_15e-5) * r
            + 1.242_660_947_388_078_438_6e-3)
            * r
            + 2.653_218_952_657_612_309_3e-2)
            * r
            + 2.965_605_718_285_048_912_3e-1)
            * r
            + 1.784_826_539_917_291_335_8)
            * r
            + 5.463_784_911_164_114_369_9)
            * r
            + 6.657_904_643_501_103_777_2)
            / (((((((2.044_263_103_389_939_785_64e-15 * r + 1.421_511_758_316_445_888_7e-7) * r
                + 1.846_318_317_510_054_681_8e-5)
                * r
                + 7.868_691_311_456_132_591e-4)
                * r
                + 1.487_536_129_085_061_485_25e-2)
                * r
                + 1.369_298_809_227_358_053_1e-1)
                * r
                + 5.998_322_065_558_879_376_9e-1)
                * r
                + 1.0)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// Coefficients of the Taylor series `1/Γ(z) = Σ_{k≥1} c_k z^k`.
const RECIP_GAMMA: [f64; 26] = [
    1.0,
    0.577_215_664_901_532_9,
    -0.655_878_071_520_253_8,
    -0.042_002_635_034_095_2,
    0.166_538_611_382_291_5,
    -0.042_197_734_555_544_3,
    -0.009_621_971_527_877_0,
    0.007_218_943_246_663_0,
    -0.001_165_167_591_859_1,
    -0.000_215_241_674_114_9,
    0.000_128_050_282_388_2,
    -0.000_020_134_854_780_7,
    -0.000_001_250_493_482_1,
    0.000_001_133_027_232_0,
    -0.000_000_205_633_841_7,
    0.000_000_006_116_095_0,
    0.000_000_005_002_007_5,
    -0.000_000_001_181_274_6,
    0.000_000_000_104_342_7,
    0.000_000_000_007_782_3,
    -0.000_000_000_003_696_8,
    0.000_000_000_000_510_0,
    -0.000_000_000_000_020_6,
    -0.000_000_000_000_005_4,
    0.000_000_000_000_001_4,
    0.000_000_000_000_000_1,
];

/// Temme's auxiliary gamma terms for |mu| ≤ 1/2:
/// `gam1 = (1/Γ(1−μ) − 1/Γ(1+μ)) / (2μ)`, `gam2 = (1/Γ(1−μ) + 1/Γ(1+μ)) / 2`,
/// together with `1/Γ(1+μ)` and `1/Γ(1−μ)`.
pub(crate) fn temme_gammas(mu: f64) -> (f64, f64, f64, f64) {
    // 1/Γ(1+μ) = Σ c_k μ^{k-1}
    let mut gam1 = 0.0;
    let mut gam2 = 0.0;
    let mut pow = 1.0; // μ^{k-1} for odd k, μ^{k-2} for even k
    for (idx, c) in RECIP_GAMMA.iter().enumerate() {
        let k = idx + 1;
        if k % 2 == 1 {
            gam2 += c * pow;
        } else {
            gam1 -= c * pow;
            pow *= mu * mu;
        }
    }
    let gampl = gam2 - mu * gam1;
    let gammi = gam2 + mu * gam1;
    (gam1, gam2, gampl, gammi)
}

pub fn gamma(x: f64) -> f64 {
    libm::tgamma(x)
}

pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_reference_values() {
        assert_eq!(norm_cdf(0.0), 0.5);
        assert!((norm_cdf(1.96) - 0.975_002_104_851_779_5).abs() < 2e-16);
        assert!((norm_cdf(-10.0) - 7.619_853_024_160_527e-24).abs() / 7.6e-24 < 1e-12);
    }

    #[test]
    fn log_cdf_continuous_at_switch() {
        let a = log_norm_cdf(-30.0 + 1e-9);
        let b = log_norm_cdf(-30.0 - 1e-9);
        assert!((a - b).abs() < 1e-6);
        assert!(log_norm_cdf(-100.0).is_finite());
    }

    #[test]
    fn quantile_roundtrip() {
        for p in [1e-300, 1e-20, 1e-8, 0.01, 0.3, 0.5, 0.77, 0.999, 1.0 - 1e-12] {
            let x = norm_quantile(p);
            let back = norm_cdf(x);
            assert!(((back - p) / p).abs() < 1e-10, "p = {p}, back = {back}");
        }
    }

    #[test]
    fn quantile_reference_values() {
        assert!((norm_quantile(0.001) + 3.090_232_306_167_813).abs() < 1e-14);
        assert!((norm_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-14);
        for p in [1e-300, 1e-50, 1e-10, 0.024, 0.3, 0.5, 0.8, 1.0 - 1e-9] {
            let a = quantile_as241(p);
            let b = norm_quantile(p);
            assert!((a - b).abs() <= 1e-13 * b.abs().max(1.0), "p {p}: {a} vs {b}");
        }
    }

    #[test]
    fn temme_gammas_match_gamma() {
        for mu in [-0.5, -0.3, -1e-6, 0.0, 0.2, 0.49, 0.5] {
            let (g1, g2, gp, gm) = temme_gammas(mu);
            let rp = 1.0 / gamma(1.0 + mu);
            let rm = 1.0 / gamma(1.0 - mu);
            assert!((gp - rp).abs() < 1e-14, "mu = {mu}");
            assert!((gm - rm).abs() < 1e-14, "mu = {mu}");
            assert!((g2 - 0.5 * (rp + rm)).abs() < 1e-14);
            if mu.abs() > 1e-3 {
                assert!((g1 - (rm - rp) / (2.0 * mu)).abs() < 1e-10);
            }
        }
    }
}
