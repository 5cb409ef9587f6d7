//! Special functions used by the measure catalogue.
//!
//! Everything except [`norm_ppf`] is generic over [`Real`]; `f32` inputs
//! simply run the same series with a looser stopping tolerance.

use crate::real::Real;

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos, with reflection below 1/2).
pub fn ln_gamma<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    if x < half {
        // Γ(x)Γ(1-x) = π / sin(πx)
        let pi = T::PI();
        return (pi / (pi * x).sin().abs()).ln() - ln_gamma(T::one() - x);
    }
    let x = x - T::one();
    let mut acc = T::lit(LANCZOS[0]);
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        acc += T::lit(c) / (x + T::from_usize_lossy(i));
    }
    let t = x + T::lit(LANCZOS_G) + half;
    half * (T::lit(2.0) * T::PI()).ln() + (x + half) * t.ln() - t + acc.ln()
}

/// Shift `x` upward until the asymptotic series is accurate, returning the
/// shifted argument and the number of unit steps taken.
fn shift_up<T: Real>(x: T) -> (T, usize) {
    let mut x = x;
    let mut k = 0;
    while x < T::lit(10.0) {
        x += T::one();
        k += 1;
    }
    (x, k)
}

/// Digamma ψ(x) for `x > 0`.
pub fn digamma<T: Real>(x: T) -> T {
    let (mut y, k) = shift_up(x);
    let mut correction = T::zero();
    for _ in 0..k {
        y -= T::one();
        correction += T::one() / y;
    }
    let (z, _) = shift_up(x);
    let z2 = T::one() / (z * z);
    let series = z2
        * (T::lit(1.0 / 12.0)
            - z2 * (T::lit(1.0 / 120.0)
                - z2 * (T::lit(1.0 / 252.0)
                    - z2 * (T::lit(1.0 / 240.0)
                        - z2 * (T::lit(1.0 / 132.0)
                            - z2 * (T::lit(691.0 / 32_760.0) - z2 * T::lit(1.0 / 12.0)))))));
    z.ln() - T::lit(0.5) / z - series - correction
}

/// Trigamma ψ₁(x) for `x > 0`.
pub fn trigamma<T: Real>(x: T) -> T {
    let mut acc = T::zero();
    let mut z = x;
    while z < T::lit(10.0) {
        acc += T::one() / (z * z);
        z += T::one();
    }
    let iz = T::one() / z;
    let z2 = iz * iz;
    let series = iz
        + T::lit(0.5) * z2
        + z2 * iz
            * (T::lit(1.0 / 6.0)
                - z2 * (T::lit(1.0 / 30.0)
                    - z2 * (T::lit(1.0 / 42.0)
                        - z2 * (T::lit(1.0 / 30.0)
                            - z2 * (T::lit(5.0 / 66.0)
                                - z2 * (T::lit(691.0 / 2730.0) - z2 * T::lit(7.0 / 6.0)))))));
    acc + series
}

/// Tetragamma ψ₂(x) for `x > 0`.
pub fn tetragamma<T: Real>(x: T) -> T {
    let mut acc = T::zero();
    let mut z = x;
    while z < T::lit(10.0) {
        acc -= T::lit(2.0) / (z * z * z);
        z += T::one();
    }
    let iz = T::one() / z;
    let z2 = iz * iz;
    let series = -z2
        - z2 * iz
        - z2 * z2
            * (T::lit(0.5)
                - z2 * (T::lit(1.0 / 6.0)
                    - z2 * (T::lit(1.0 / 6.0)
                        - z2 * (T::lit(3.0 / 10.0)
                            - z2 * (T::lit(5.0 / 6.0)
                                - z2 * (T::lit(691.0 / 210.0) - z2 * T::lit(35.0 / 2.0)))))));
    acc + series
}

fn tol<T: Real>() -> T {
    T::epsilon() * T::lit(0.5)
}

fn gamma_p_series<T: Real>(a: T, x: T) -> T {
    let mut ap = a;
    let mut del = T::one() / a;
    let mut sum = del;
    for _ in 0..100_000 {
        ap += T::one();
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * tol::<T>() {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

fn gamma_q_fraction<T: Real>(a: T, x: T) -> T {
    let tiny = T::min_positive_value() / T::epsilon();
    let mut b = x + T::one() - a;
    let mut c = T::one() / tiny;
    let mut d = T::one() / b;
    let mut h = d;
    for i in 1..100_000 {
        let i = T::from_usize_lossy(i);
        let an = -i * (i - a);
        b += T::lit(2.0);
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = T::one() / d;
        let del = d * c;
        h *= del;
        if (del - T::one()).abs() < tol::<T>() {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Regularised lower incomplete gamma `P(a, x)`.
pub fn gamma_p<T: Real>(a: T, x: T) -> T {
    if x <= T::zero() {
        T::zero()
    } else if x < a + T::one() {
        gamma_p_series(a, x)
    } else {
        T::one() - gamma_q_fraction(a, x)
    }
}

/// Regularised upper incomplete gamma `Q(a, x) = 1 - P(a, x)`.
pub fn gamma_q<T: Real>(a: T, x: T) -> T {
    if x <= T::zero() {
        T::one()
    } else if x < a + T::one() {
        T::one() - gamma_p_series(a, x)
    } else {
        gamma_q_fraction(a, x)
    }
}

/// `∂P(a, x)/∂a` at fixed `x`.
///
/// Uses `P(a,x) = Σₙ x^{a+n} e^{-x} / Γ(a+n+1)` differentiated termwise; each
/// term picks up a factor `ln x − ψ(a+n+1)`.
pub fn gamma_p_da<T: Real>(a: T, x: T) -> T {
    if x <= T::zero() {
        return T::zero();
    }
    if gamma_q(a, x) < T::lit(1e-18) {
        return T::zero();
    }
    let lx = x.ln();
    let mut term = (a * lx - x - ln_gamma(a + T::one())).exp();
    let mut psi = digamma(a + T::one());
    let mut sum_p = term;
    let mut sum_d = term * (lx - psi);
    let mut n = T::zero();
    for _ in 0..1_000_000 {
        let k = a + n + T::one();
        term *= x / k;
        psi += T::one() / k;
        n += T::one();
        sum_p += term;
        let d = term * (lx - psi);
        sum_d += d;
        if n > x - a && term < sum_p * tol::<T>() {
            break;
        }
    }
    sum_d
}

/// Standard normal density.
pub fn norm_pdf<T: Real>(z: T) -> T {
    (-(z * z) * T::lit(0.5)).exp() / (T::lit(2.0) * T::PI()).sqrt()
}

/// Standard normal CDF, via `Φ(z) = ½ erfc(-z/√2)` and `erfc(t) = Q(½, t²)`.
pub fn norm_cdf<T: Real>(z: T) -> T {
    let half = T::lit(0.5);
    let q = gamma_q(half, z * z * half);
    if z < T::zero() {
        half * q
    } else {
        T::one() - half * q
    }
}

/// Inverse standard normal CDF (Wichura, AS 241, PPND16), `p ∈ (0, 1)`.
pub fn norm_ppf(p: f64) -> f64 {
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q
            * (((((((2509.080_928_730_122_7 * r + 33430.575_583_588_128) * r
                + 67265.770_927_008_7)
                * r
                + 45921.953_931_549_87)
                * r
                + 13731.693_765_509_461)
                * r
                + 1971.590_950_306_551_3)
                * r
                + 133.141_667_891_784_38)
                * r
                + 3.387_132_872_796_366_5)
            / (((((((5226.495_278_852_545 * r + 28729.085_735_721_943) * r
                + 39307.895_800_092_71)
                * r
                + 21213.794_301_586_597)
                * r
                + 5394.196_021_424_751)
                * r
                + 687.187_007_492_057_9)
                * r
                + 42.313_330_701_600_91)
                * r
                + 1.0);
    }
    let r0 = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-r0.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        (((((((7.745_450_142_783_414e-4 * r + 0.022_723_844_989_269_184) * r
            + 0.241_780_725_177_450_6)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_546)
            * r
            + 1.423_437_110_749_683_5)
            / (((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r
                + 0.015_198_666_563_616_457)
                * r
                + 0.148_103_976_427_480_08)
                * r
                + 0.689_767_334_985_1)
                * r
                + 1.676_384_830_183_803_8)
                * r
                + 2.053_191_626_637_759)
                * r
                + 1.0)
    } else {
        r -= 5.0;
        (((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_4e-2)
            * r
            + 0.296_560_571_828_504_9)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103)
            / (((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_446e-7) * r
                + 1.846_318_317_510_054_8e-5)
                * r
                + 7.868_691_311_456_133e-4)
                * r
                + 1.487_536_129_085_061_5e-2)
                * r
                + 0.136_929_880_922_735_8)
                * r
                + 0.599_832_206_555_888)
                * r
                + 1.0)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// `log σ(z) = -log(1 + e^{-z})`, stable for large |z|.
pub fn log_sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Logistic function.
pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    /// Independent digamma oracle: ψ(1) = −γ plus the recurrence
    /// ψ(n) = −γ + Σ_{k<n} 1/k, and the half-integer series
    /// ψ(n + ½) = −γ − 2 ln 2 + Σ_{k=1}^{n} 2/(2k − 1).
    fn digamma_oracle_int(n: usize) -> f64 {
        -EULER_GAMMA + (1..n).map(|k| 1.0 / k as f64).sum::<f64>()
    }

    fn digamma_oracle_half(n: usize) -> f64 {
        -EULER_GAMMA - 2.0 * 2f64.ln() + (1..=n).map(|k| 2.0 / (2 * k - 1) as f64).sum::<f64>()
    }

    #[test]
    fn digamma_matches_recurrence_oracle() {
        for n in 1..30 {
            assert!((digamma(n as f64) - digamma_oracle_int(n)).abs() < 1e-13, "n={n}");
            assert!(
                (digamma(n as f64 + 0.5) - digamma_oracle_half(n)).abs() < 1e-13,
                "n={n}.5"
            );
        }
        // −ψ(2) = γ − 1
        assert!((-digamma(2.0) - (EULER_GAMMA - 1.0)).abs() < 1e-14);
        assert!((1.0 + digamma(2.0) - (2.0 - EULER_GAMMA)).abs() < 1e-14);
    }

    #[test]
    fn trigamma_and_tetragamma_match_finite_differences() {
        for &x in &[0.3f64, 1.0, 2.5, 7.0, 30.0] {
            let h = 1e-5 * x;
            let fd1 = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert!((trigamma(x) - fd1).abs() < 1e-6 * trigamma(x).abs().max(1.0), "x={x}");
            let fd2 = (trigamma(x + h) - trigamma(x - h)) / (2.0 * h);
            assert!((tetragamma(x) - fd2).abs() < 1e-6 * tetragamma(x).abs().max(1.0), "x={x}");
        }
        // ψ₁(1) = π²/6, ψ₂(1) = −2ζ(3)
        assert!((trigamma(1.0) - std::f64::consts::PI.powi(2) / 6.0).abs() < 1e-13);
        assert!((tetragamma(1.0f64) + 2.0 * 1.202_056_903_159_594_2).abs() < 1e-12);
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0f64).abs() < 1e-14);
        assert!(ln_gamma(2.0f64).abs() < 1e-14);
        assert!((ln_gamma(5.0f64) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(0.5f64) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
        assert!((ln_gamma(0.1f64) - 2.252_712_651_734_206).abs() < 1e-12);
    }

    #[test]
    fn incomplete_gamma_exponential_case() {
        // P(1, x) = 1 − e^{−x}
        for &x in &[0.01, 0.5, 1.0, 3.0, 20.0] {
            assert!((gamma_p(1.0, x) - (1.0 - (-x as f64).exp())).abs() < 1e-14);
        }
        // P(2, x) = 1 − (1 + x)e^{−x}
        for &x in &[0.1, 2.0, 9.0] {
            let expect = 1.0 - (1.0 + x) * (-x as f64).exp();
            assert!((gamma_p(2.0, x) - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn gamma_p_da_matches_finite_differences() {
        for &(a, x) in &[(0.5f64, 0.3f64), (1.0, 1.0), (2.0, 1.5), (2.0, 7.0), (5.5, 3.0), (0.2, 4.0)] {
            let h = 1e-5;
            let fd = (gamma_p(a + h, x) - gamma_p(a - h, x)) / (2.0 * h);
            assert!((gamma_p_da(a, x) - fd).abs() < 1e-8, "a={a} x={x}");
        }
    }

    #[test]
    fn normal_cdf_and_quantile() {
        assert!((norm_cdf(0.0f64) - 0.5).abs() < 1e-15);
        assert!((norm_cdf(1.96f64) - 0.975_002_104_851_780).abs() < 1e-13);
        assert!((norm_cdf(-3.0f64) - 0.001_349_898_031_630_094_6).abs() < 1e-15);
        for &p in &[1e-10, 0.001, 0.2, 0.5, 0.77, 0.999] {
            assert!((norm_cdf(norm_ppf(p)) - p).abs() < 1e-14 * p.max(1e-2) * 100.0);
        }
    }

    #[test]
    fn log_sigmoid_stable() {
        assert!((log_sigmoid(0.0f64) + 2f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid(800.0f64) <= 0.0);
        assert!((log_sigmoid(-800.0f64) + 800.0).abs() < 1e-9);
        assert!((sigmoid(-800.0f64)).abs() < 1e-300);
    }

    #[test]
    fn f32_instantiation() {
        assert!((digamma(2.0f32) - (1.0 - EULER_GAMMA as f32)).abs() < 1e-6);
        assert!((norm_cdf(0.0f32) - 0.5).abs() < 1e-6);
    }
}
