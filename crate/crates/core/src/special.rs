//! Scalar special functions used by the evidential losses.
//!
//! `lgamma` and `digamma` combine upward recurrence with asymptotic
//! (Stirling / Bernoulli) series for large arguments, and switch to Taylor
//! expansions around their zeros so that relative accuracy holds there too.

use std::f64::consts::PI;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
const ASYMPTOTIC_FROM: f64 = 10.0;

/// Coefficients of `lgamma(1 + z) + euler_gamma * z`, i.e. `(-1)^k zeta(k) / k` for k = 2, 3, ...
const LGAMMA_SERIES: [f64; 60] = [
    0.822_467_033_424_113_2,
    -0.400_685_634_386_531_4,
    0.270_580_808_427_784_55,
    -0.207_385_551_028_673_98,
    0.169_557_176_997_408_2,
    -0.144_049_896_768_846_1,
    0.125_509_669_524_743_04,
    -0.111_334_265_869_564_69,
    0.100_099_457_512_781_8,
    -0.090_954_017_145_829_04,
    0.083_353_840_546_109,
    -0.076_932_516_411_352_2,
    0.071_432_946_295_361_34,
    -0.066_668_705_882_420_47,
    0.062_500_955_141_213_04,
    -0.058_823_978_658_684_58,
    0.055_555_767_627_403_61,
    -0.052_631_679_379_616_66,
    0.050_000_047_698_101_69,
    -0.047_619_070_330_142_23,
    0.045_454_556_293_204_67,
    -0.043_478_266_053_040_26,
    0.041_666_669_150_341_21,
    -0.040_000_001_192_140_14,
    0.038_461_539_034_675_19,
    -0.037_037_037_312_989_33,
    0.035_714_285_847_333_36,
    -0.034_482_758_684_919_3,
    0.033_333_333_364_377_58,
    -0.032_258_064_531_150_42,
    0.031_250_000_007_275_97,
    -0.030_303_030_306_558_05,
    0.029_411_764_707_594_34,
    -0.028_571_428_572_260_11,
    0.027_777_777_778_182,
    -0.027_027_027_027_223_67,
    0.026_315_789_473_779_95,
    -0.025_641_025_641_072_28,
    0.025_000_000_000_022_74,
    -0.024_390_243_902_450_12,
    0.023_809_523_809_529_22,
    -0.023_255_813_953_491_02,
    0.022_727_272_727_274_02,
    -0.022_222_222_222_222_85,
    0.021_739_130_434_782_92,
    -0.021_276_595_744_681,
    0.020_833_333_333_333_41,
    -0.020_408_163_265_306_16,
    0.020_000_000_000_000_02,
    -0.019_607_843_137_254_91,
    0.019_230_769_230_769_235,
    -0.018_867_924_528_301_89,
    0.018_518_518_518_518_52,
    -0.018_181_818_181_818_18,
    0.017_857_142_857_142_856,
    -0.017_543_859_649_122_806,
    0.017_241_379_310_344_827,
    -0.016_949_152_542_372_88,
    0.016_666_666_666_666_666,
    -0.016_393_442_622_950_82,
];

/// Positive zero of digamma, split into high and low parts.
const DIGAMMA_ROOT_HI: f64 = 1.461_632_144_968_362_2;
const DIGAMMA_ROOT_LO: f64 = 9.549_995_429_965_697e-17;

/// `polygamma(n, root) / n!` for n = 1, 2, ...
const DIGAMMA_ROOT_TAYLOR: [f64; 25] = [
    0.967_672_245_447_621_2,
    -0.442_763_168_983_592_1,
    0.258_499_760_955_651,
    -0.163_942_705_442_406_53,
    0.107_824_050_691_262_37,
    -0.072_199_561_256_454_71,
    0.048_804_288_164_143_11,
    -0.033_161_126_474_847_36,
    0.022_597_648_232_218_105,
    -0.015_424_765_904_948_96,
    0.010_538_791_616_612_175,
    -0.007_204_534_386_356_868,
    0.004_926_781_395_729_853,
    -0.003_369_801_655_439_328,
    0.002_305_126_326_734_928,
    -0.001_576_936_771_430_197_3,
    0.001_078_825_201_916_296_6,
    -0.000_738_070_938_996_005_1,
    0.000_504_953_265_834_602,
    -0.000_345_468_025_106_307_7,
    0.000_236_356_015_640_270_53,
    -0.000_161_706_220_919_748_03,
    0.000_110_633_727_687_474_11,
    -0.000_075_691_795_821_950_66,
    0.000_051_785_757_952_220_81,
];

fn horner(coeffs: &[f64], z: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * z + c)
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function, the derivative of [`softplus`].
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `lgamma(1 + z)` for `|z| <= 0.5`.
fn lgamma1p_series(z: f64) -> f64 {
    z * (-EULER_GAMMA + z * horner(&LGAMMA_SERIES, z))
}

fn lgamma_stirling(x: f64) -> f64 {
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // sum of B_2n / (2n (2n - 1) x^(2n - 1)), n = 1..7
    let series = inv
        * (1.0 / 12.0
            - inv2
                * (1.0 / 360.0
                    - inv2
                        * (1.0 / 1260.0
                            - inv2
                                * (1.0 / 1680.0
                                    - inv2
                                        * (1.0 / 1188.0
                                            - inv2 * (691.0 / 360_360.0 - inv2 / 156.0))))));
    (x - 0.5) * x.ln() - x + HALF_LN_2PI + series
}

/// Natural log of the absolute value of the gamma function.
pub fn lgamma(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x <= 0.0 {
        if x == x.floor() {
            return f64::INFINITY;
        }
        // reflection: |Gamma(x) Gamma(1 - x)| = pi / |sin(pi x)|
        return (PI / (PI * x).sin().abs()).ln() - lgamma(1.0 - x);
    }
    if x == 1.0 || x == 2.0 {
        return 0.0;
    }
    if x < 0.5 {
        return lgamma1p_series(x) - x.ln();
    }
    if x <= 1.5 {
        return lgamma1p_series(x - 1.0);
    }
    if x <= 2.5 {
        let z = x - 2.0;
        return z.ln_1p() + lgamma1p_series(z);
    }
    if x >= ASYMPTOTIC_FROM {
        return lgamma_stirling(x);
    }
    let mut shifted = x;
    let mut prod = 1.0;
    while shifted < ASYMPTOTIC_FROM {
        prod *= shifted;
        shifted += 1.0;
    }
    lgamma_stirling(shifted) - prod.ln()
}

fn digamma_asymptotic(x: f64) -> f64 {
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // sum of B_2n / (2n x^2n), n = 1..7
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32_760.0 - inv2 / 12.0))))));
    x.ln() - 0.5 * inv - series
}

/// Digamma function, the logarithmic derivative of gamma.
pub fn digamma(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x <= 0.0 {
        if x == x.floor() {
            return f64::NAN;
        }
        return digamma(1.0 - x) - PI / (PI * x).tan();
    }
    let near_root = (x - DIGAMMA_ROOT_HI) - DIGAMMA_ROOT_LO;
    if near_root.abs() <= 0.25 {
        return near_root * horner(&DIGAMMA_ROOT_TAYLOR, near_root);
    }
    let mut acc = 0.0;
    let mut x = x;
    while x < ASYMPTOTIC_FROM {
        acc -= 1.0 / x;
        x += 1.0;
    }
    acc + digamma_asymptotic(x)
}

/// Trigamma function, the derivative of [`digamma`].
pub fn trigamma(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x <= 0.0 {
        if x == x.floor() {
            return f64::NAN;
        }
        let s = (PI * x).sin();
        return -trigamma(1.0 - x) + PI * PI / (s * s);
    }
    let mut acc = 0.0;
    let mut x = x;
    while x < ASYMPTOTIC_FROM {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // 1/x + 1/(2x^2) + sum of B_2n / x^(2n + 1), n = 1..7
    let series = inv
        * inv2
        * (1.0 / 6.0
            - inv2
                * (1.0 / 30.0
                    - inv2
                        * (1.0 / 42.0
                            - inv2
                                * (1.0 / 30.0
                                    - inv2
                                        * (5.0 / 66.0
                                            - inv2 * (691.0 / 2730.0 - inv2 * 7.0 / 6.0))))));
    acc + inv + 0.5 * inv2 + series
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values computed with mpmath at 40 significant digits.
    const LGAMMA_REF: &[(f64, f64)] = &[
        (1e-4, 9.210282658633963),
        (0.1, 2.252712651734206),
        (0.5, 0.5723649429247001),
        (0.999, 0.0005780385328913802),
        (1.0001, -5.771334222047127e-05),
        (1.5, -0.12078223763524522),
        (1.9999, -4.227520877215346e-05),
        (2.0001, 4.2281658112919945e-05),
        (3.7, 1.428072326665388),
        (10.0, 12.801827480081469),
        (123.456, 469.6055471299295),
        (1e6, 12815504.569147611),
    ];

    const DIGAMMA_REF: &[(f64, f64)] = &[
        (1e-4, -10000.577051183514),
        (0.3, -3.502524222200133),
        (1.0, -0.5772156649015329),
        (1.4, -0.06138454458511624),
        (1.461632144968362, -3.072790566546293e-16),
        (1.5, 0.03648997397857652),
        (2.0, 0.42278433509846713),
        (7.25, 1.910453526883736),
        (100.0, 4.600161852738087),
        (1e6, 13.815510057964191),
    ];

    fn rel_err(got: f64, want: f64) -> f64 {
        ((got - want) / want).abs()
    }

    #[test]
    fn lgamma_matches_reference() {
        for &(x, want) in LGAMMA_REF {
            let got = lgamma(x);
            assert!(rel_err(got, want) <= 1e-12, "lgamma({x}) = {got}, want {want}");
        }
        assert_eq!(lgamma(1.0), 0.0);
        assert_eq!(lgamma(2.0), 0.0);
    }

    #[test]
    fn digamma_matches_reference() {
        for &(x, want) in DIGAMMA_REF {
            let got = digamma(x);
            assert!(rel_err(got, want) <= 1e-12, "digamma({x}) = {got}, want {want}");
        }
    }

    #[test]
    fn digamma_recurrence() {
        for &x in &[0.01, 0.7, 1.3, 3.5, 9.99, 42.0] {
            let lhs = digamma(x + 1.0);
            let rhs = digamma(x) + 1.0 / x;
            assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0), "x = {x}");
        }
        assert!((digamma(101.0) - digamma(100.0) - 0.01).abs() < 1e-14);
    }

    #[test]
    fn trigamma_matches_reference() {
        // trigamma(1) = pi^2 / 6, trigamma(0.5) = pi^2 / 2
        assert!(rel_err(trigamma(1.0), PI * PI / 6.0) < 1e-13);
        assert!(rel_err(trigamma(0.5), PI * PI / 2.0) < 1e-13);
        assert!(rel_err(trigamma(1e-4), 100000001.64469367) < 1e-12);
    }

    #[test]
    fn softplus_and_logistic() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(logistic(0.0), 0.5);
        assert!((logistic(3.0) + logistic(-3.0) - 1.0).abs() < 1e-15);
    }
}
