//! Ground-truth expectations and gradients, and the gradcheck harness.

use std::sync::OnceLock;

use serde::Serialize;

use crate::costs::{Cost, StandardCost};
use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimatorConfig, EstimatorId, GradientEstimate};
use crate::measures::Measure;
use crate::rng::RngStream;
use crate::special::ln_gamma;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMethod {
    GaussHermite,
    AdaptiveQuadrature,
    FiniteDifference,
    ClosedForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleResult {
    pub value: f64,
    pub method: OracleMethod,
    pub est_abs_error: f64,
}

/// Gauss–Hermite nodes and weights for `∫ e^{−x²} g(x) dx`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (PIM4, 0.0);
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

fn gh_cached(n: usize) -> &'static (Vec<f64>, Vec<f64>) {
    static GH64: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    static GH128: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    match n {
        64 => GH64.get_or_init(|| gauss_hermite(64)),
        128 => GH128.get_or_init(|| gauss_hermite(128)),
        _ => unreachable!(),
    }
}

fn gh_normal(mu: f64, sigma: f64, n: usize, g: &dyn Fn(f64) -> f64) -> f64 {
    let (x, w) = gh_cached(n);
    let s = x
        .iter()
        .zip(w)
        .map(|(&xi, &wi)| wi * g(mu + std::f64::consts::SQRT_2 * sigma * xi))
        .sum::<f64>();
    s / std::f64::consts::PI.sqrt()
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_0,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// 15-point Kronrod estimate and `|K15 − G7|`.
fn gk15(g: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = g(c);
    let mut k = WGK[7] * fc;
    let mut gs = WG[3] * fc;
    for j in 0..7 {
        let dx = h * XGK[j];
        let f2 = g(c - dx) + g(c + dx);
        k += WGK[j] * f2;
        if j % 2 == 1 {
            gs += WG[j / 2] * f2;
        }
    }
    (k * h, ((k - gs) * h).abs())
}

/// Globally adaptive Gauss–Kronrod quadrature on `[a, b]`.
pub fn adaptive_quadrature(g: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> (f64, f64) {
    const PANELS: usize = 16;
    const MAX_INTERVALS: usize = 4000;
    let mut parts: Vec<(f64, f64, f64, f64)> = (0..PANELS)
        .map(|i| {
            let lo = a + (b - a) * i as f64 / PANELS as f64;
            let hi = a + (b - a) * (i + 1) as f64 / PANELS as f64;
            let (v, e) = gk15(g, lo, hi);
            (lo, hi, v, e)
        })
        .collect();
    loop {
        let total: f64 = parts.iter().map(|p| p.2).sum();
        let err: f64 = parts.iter().map(|p| p.3).sum();
        if err <= tol.max(1e-14 * total.abs()) || parts.len() >= MAX_INTERVALS {
            return (total, err);
        }
        let (i, _) = parts
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .unwrap();
        let (lo, hi, _, _) = parts.swap_remove(i);
        let mid = 0.5 * (lo + hi);
        for (l, h) in [(lo, mid), (mid, hi)] {
            let (v, e) = gk15(g, l, h);
            parts.push((l, h, v, e));
        }
    }
}

/// `∫_a^∞ g`, mapped onto `[0, 1)` by `x = a + s·t/(1−t)`.
fn integrate_upper(g: &dyn Fn(f64) -> f64, a: f64, s: f64, tol: f64) -> (f64, f64) {
    let mapped = |t: f64| {
        if t >= 1.0 {
            return 0.0;
        }
        let x = a + s * t / (1.0 - t);
        let v = g(x);
        if v == 0.0 {
            0.0
        } else {
            v * s / ((1.0 - t) * (1.0 - t))
        }
    };
    adaptive_quadrature(&mapped, 0.0, 1.0, tol)
}

const QUAD_TOL: f64 = 1e-11;

fn density_times<'a>(m: &'a Measure<f64>, f: &'a dyn Fn(f64) -> f64) -> impl Fn(f64) -> f64 + 'a {
    move |x: f64| {
        let p = m.prob(&[x]).unwrap_or(0.0);
        if p == 0.0 || !p.is_finite() {
            0.0
        } else {
            p * f(x)
        }
    }
}

fn univariate_expectation(m: &Measure<f64>, f: &dyn Fn(f64) -> f64) -> Result<OracleResult> {
    let quad = |v: (f64, f64)| OracleResult {
        value: v.0,
        method: OracleMethod::AdaptiveQuadrature,
        est_abs_error: v.1,
    };
    let g = density_times(m, f);
    Ok(match m {
        Measure::Gaussian { mu, sigma } => {
            let q128 = gh_normal(*mu, *sigma, 128, f);
            let q64 = gh_normal(*mu, *sigma, 64, f);
            if (q128 - q64).abs() <= 1e-10 {
                OracleResult {
                    value: q128,
                    method: OracleMethod::GaussHermite,
                    est_abs_error: (q128 - q64).abs(),
                }
            } else {
                let up = integrate_upper(&g, *mu, *sigma, QUAD_TOL);
                let down = integrate_upper(&|x| g(2.0 * mu - x), *mu, *sigma, QUAD_TOL);
                quad((up.0 + down.0, up.1 + down.1))
            }
        }
        Measure::DoubleSidedMaxwell { mu, sigma } => {
            let up = integrate_upper(&g, *mu, *sigma, QUAD_TOL);
            let down = integrate_upper(&|x| g(2.0 * mu - x), *mu, *sigma, QUAD_TOL);
            quad((up.0 + down.0, up.1 + down.1))
        }
        Measure::Gamma { shape, rate } => {
            quad(integrate_upper(&g, 0.0, shape.max(1.0) / rate, QUAD_TOL))
        }
        Measure::Erlang { k, rate } => {
            quad(integrate_upper(&g, 0.0, f64::from(*k) / rate, QUAD_TOL))
        }
        Measure::Exponential { rate } => quad(integrate_upper(&g, 0.0, 1.0 / rate, QUAD_TOL)),
        Measure::Weibull { shape, rate, loc } => {
            quad(integrate_upper(&g, *loc, rate.powf(-1.0 / shape), QUAD_TOL))
        }
        Measure::Uniform { upper } => quad(adaptive_quadrature(&g, 0.0, *upper, QUAD_TOL)),
        Measure::Bernoulli { p } => OracleResult {
            value: (1.0 - p) * f(0.0) + p * f(1.0),
            method: OracleMethod::ClosedForm,
            est_abs_error: 0.0,
        },
        Measure::Poisson { rate } => {
            let mut pk = (-rate).exp();
            let (mut sum, mut mass, mut k) = (0.0, 0.0, 0.0f64);
            while mass < 1.0 - 1e-13 || k <= *rate {
                sum += pk * f(k);
                mass += pk;
                k += 1.0;
                pk *= rate / k;
                if k > 10.0 * rate + 1000.0 {
                    break;
                }
            }
            OracleResult {
                value: sum,
                method: OracleMethod::AdaptiveQuadrature,
                est_abs_error: (1.0 - mass).abs() * f(k).abs().max(1.0),
            }
        }
        Measure::DiagGaussian { .. } => unreachable!(),
    })
}

/// `E_m[f]` by Gauss–Hermite, adaptive quadrature or summation.
///
/// Diagonal Gaussians need a separable standard cost.
pub fn quadrature_expectation(m: &Measure<f64>, f: &dyn Cost<f64>) -> Result<OracleResult> {
    if let Measure::DiagGaussian { mu, sigma } = m {
        let sc = f.as_standard().ok_or_else(|| {
            Error::capability("diag_gaussian", format!("quadrature of non-separable cost `{}`", f.name()))
        })?;
        if let StandardCost::Constant(c) = sc {
            return Ok(OracleResult {
                value: *c,
                method: OracleMethod::ClosedForm,
                est_abs_error: 0.0,
            });
        }
        let term = |x: f64| sc.term(x).expect("non-constant terms exist").0;
        let mut out = OracleResult {
            value: 0.0,
            method: OracleMethod::GaussHermite,
            est_abs_error: 0.0,
        };
        for (&m_d, &s_d) in mu.iter().zip(sigma) {
            let r = univariate_expectation(&Measure::gaussian(m_d, s_d)?, &term)?;
            out.value += r.value;
            out.est_abs_error += r.est_abs_error;
            if r.method != OracleMethod::GaussHermite {
                out.method = r.method;
            }
        }
        return Ok(out);
    }
    univariate_expectation(m, &|x| f.eval(&[x]))
}

/// Registered closed-form gradients.
fn closed_form_gradient(m: &Measure<f64>, f: &dyn Cost<f64>) -> Option<Vec<f64>> {
    let sc = f.as_standard()?;
    let gaussian = |mu: f64, s: f64| -> Option<[f64; 2]> {
        Some(match *sc {
            StandardCost::Constant(_) => [0.0, 0.0],
            StandardCost::LinearSum => [1.0, 0.0],
            StandardCost::Quadratic(k) => [2.0 * (mu - k), 2.0 * s],
            StandardCost::FourthPower => [
                4.0 * mu.powi(3) + 12.0 * mu * s * s,
                12.0 * mu * mu * s + 12.0 * s.powi(3),
            ],
            StandardCost::Cos(k) => {
                let damp = (-k * k * s * s / 2.0).exp();
                [-k * (k * mu).sin() * damp, -k * k * s * (k * mu).cos() * damp]
            }
            StandardCost::Exp(k) => {
                let a = 1.0 + 2.0 * k * s * s;
                let e = (-k * mu * mu / a).exp() / a.sqrt();
                [
                    e * (-2.0 * k * mu / a),
                    e * (4.0 * k * k * mu * mu * s / (a * a) - 2.0 * k * s / a),
                ]
            }
        })
    };
    match (m, sc) {
        (Measure::Gaussian { mu, sigma }, _) => gaussian(*mu, *sigma).map(|g| g.to_vec()),
        (Measure::DiagGaussian { mu, sigma }, _) => {
            let parts: Vec<[f64; 2]> = mu
                .iter()
                .zip(sigma)
                .map(|(&a, &b)| gaussian(a, b))
                .collect::<Option<_>>()?;
            Some(parts.iter().map(|p| p[0]).chain(parts.iter().map(|p| p[1])).collect())
        }
        (Measure::Gamma { shape, rate }, StandardCost::LinearSum) => {
            Some(vec![1.0 / rate, -shape / (rate * rate)])
        }
        (Measure::Exponential { rate }, StandardCost::LinearSum) => Some(vec![-1.0 / (rate * rate)]),
        (Measure::Erlang { k, rate }, StandardCost::LinearSum) => {
            Some(vec![-f64::from(*k) / (rate * rate)])
        }
        (Measure::Poisson { .. }, StandardCost::LinearSum) => Some(vec![1.0]),
        (Measure::Uniform { .. }, StandardCost::LinearSum) => Some(vec![0.5]),
        (Measure::Bernoulli { .. }, _) => Some(vec![f.eval(&[1.0]) - f.eval(&[0.0])]),
        _ => None,
    }
}

/// `∇θ E_m[f]`: closed form where registered, else central differences of
/// [`quadrature_expectation`] refined once by Richardson extrapolation.
pub fn oracle_gradient(m: &Measure<f64>, f: &dyn Cost<f64>) -> Result<Vec<OracleResult>> {
    if let Some(g) = closed_form_gradient(m, f) {
        return Ok(g
            .into_iter()
            .map(|value| OracleResult {
                value,
                method: OracleMethod::ClosedForm,
                est_abs_error: 0.0,
            })
            .collect());
    }
    let theta = m.params().values;
    (0..theta.len())
        .map(|i| {
            let h = 1e-5 * theta[i].abs().max(1.0);
            let mut qerr = 0.0f64;
            let mut diff = |h: f64| -> Result<f64> {
                let up = quadrature_expectation(&m.with_param(i, theta[i] + h)?, f)?;
                let dn = quadrature_expectation(&m.with_param(i, theta[i] - h)?, f)?;
                qerr = qerr.max((up.est_abs_error + dn.est_abs_error) / (2.0 * h));
                Ok((up.value - dn.value) / (2.0 * h))
            };
            let d1 = diff(h)?;
            let d2 = diff(h / 2.0)?;
            Ok(OracleResult {
                value: (4.0 * d2 - d1) / 3.0,
                method: OracleMethod::FiniteDifference,
                est_abs_error: (d2 - d1).abs() / 3.0 + qerr,
            })
        })
        .collect()
}

/// Sample variance (with jackknife SE) of single-sample estimates over `trials`.
pub fn empirical_variance(
    id: EstimatorId,
    m: &Measure<f64>,
    f: &dyn Cost<f64>,
    trials: usize,
    rng: &mut RngStream,
) -> Result<GradientEstimate<f64>> {
    empirical_variance_with(id, m, f, &EstimatorConfig::new(trials), rng)
}

/// As [`empirical_variance`], with coupling or baseline settings from `cfg`.
pub fn empirical_variance_with(
    id: EstimatorId,
    m: &Measure<f64>,
    f: &dyn Cost<f64>,
    cfg: &EstimatorConfig<f64>,
    rng: &mut RngStream,
) -> Result<GradientEstimate<f64>> {
    estimate(id, m, f, cfg, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub estimate: f64,
    pub oracle: f64,
    pub oracle_method: OracleMethod,
    pub standard_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckSet {
    pub cost: String,
    pub params: Vec<ParamCheck>,
    pub n_cost_evals: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub estimator: String,
    pub measure: String,
    pub n_samples: usize,
    pub sigma_level: f64,
    pub main: CheckSet,
    /// Checks with `f = x_i` and `f = (x_i − μ_i)(x_j − μ_j)` where moments are known.
    pub moment_checks: Vec<CheckSet>,
    pub pass: bool,
}

/// `f(x) = x_i`.
struct Coordinate(usize);

impl Cost<f64> for Coordinate {
    fn name(&self) -> String {
        format!("x[{}]", self.0)
    }
    fn eval(&self, x: &[f64]) -> f64 {
        x[self.0]
    }
    fn grad(&self, x: &[f64]) -> Option<Vec<f64>> {
        let mut g = vec![0.0; x.len()];
        g[self.0] = 1.0;
        Some(g)
    }
    fn hess(&self, x: &[f64]) -> Option<Vec<Vec<f64>>> {
        Some(vec![vec![0.0; x.len()]; x.len()])
    }
}

/// `f(x) = (x_i − a)(x_j − b)`.
struct CrossProduct {
    i: usize,
    j: usize,
    a: f64,
    b: f64,
}

impl Cost<f64> for CrossProduct {
    fn name(&self) -> String {
        format!("(x[{}]-{})(x[{}]-{})", self.i, self.a, self.j, self.b)
    }
    fn eval(&self, x: &[f64]) -> f64 {
        (x[self.i] - self.a) * (x[self.j] - self.b)
    }
    fn grad(&self, x: &[f64]) -> Option<Vec<f64>> {
        let mut g = vec![0.0; x.len()];
        g[self.i] += x[self.j] - self.b;
        g[self.j] += x[self.i] - self.a;
        Some(g)
    }
    fn hess(&self, x: &[f64]) -> Option<Vec<Vec<f64>>> {
        let mut h = vec![vec![0.0; x.len()]; x.len()];
        h[self.i][self.j] += 1.0;
        h[self.j][self.i] += 1.0;
        Some(h)
    }
}

/// Mean and variance of a univariate measure, where known in closed form.
pub fn moments(m: &Measure<f64>) -> Option<(f64, f64)> {
    Some(match *m {
        Measure::Gaussian { mu, sigma } => (mu, sigma * sigma),
        Measure::Gamma { shape, rate } => (shape / rate, shape / (rate * rate)),
        Measure::Exponential { rate } => (1.0 / rate, 1.0 / (rate * rate)),
        Measure::Erlang { k, rate } => (f64::from(k) / rate, f64::from(k) / (rate * rate)),
        Measure::Weibull { shape, rate, loc } => {
            let s = rate.powf(-1.0 / shape);
            let m1 = s * ln_gamma(1.0 + 1.0 / shape).exp();
            let m2 = s * s * ln_gamma(1.0 + 2.0 / shape).exp();
            (loc + m1, m2 - m1 * m1)
        }
        Measure::Poisson { rate } => (rate, rate),
        Measure::Bernoulli { p } => (p, p * (1.0 - p)),
        Measure::Uniform { upper } => (upper / 2.0, upper * upper / 12.0),
        Measure::DoubleSidedMaxwell { mu, sigma } => (mu, 3.0 * sigma * sigma),
        Measure::DiagGaussian { .. } => return None,
    })
}

/// Gradients of the mean and variance by central differences of [`moments`].
fn moment_gradients(m: &Measure<f64>) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    if moments(m).is_none() {
        return Ok(None);
    }
    let theta = m.params().values;
    let (mut gm, mut gv) = (Vec::new(), Vec::new());
    for (i, &t) in theta.iter().enumerate() {
        let h = 1e-6 * t.abs().max(1.0);
        let (m1, v1) = moments(&m.with_param(i, t + h)?).unwrap();
        let (m0, v0) = moments(&m.with_param(i, t - h)?).unwrap();
        gm.push((m1 - m0) / (2.0 * h));
        gv.push((v1 - v0) / (2.0 * h));
    }
    Ok(Some((gm, gv)))
}

fn check_set(
    id: EstimatorId,
    m: &Measure<f64>,
    f: &dyn Cost<f64>,
    oracle: &[OracleResult],
    n_samples: usize,
    sigma_level: f64,
    rng: &mut RngStream,
) -> Result<CheckSet> {
    let est = estimate(id, m, f, &EstimatorConfig::new(n_samples), rng)?;
    let names = m.params().names;
    let params: Vec<ParamCheck> = (0..names.len())
        .map(|i| {
            let se = est.standard_error(i);
            // The oracle's own error bound, plus slack for exact zero-variance cases.
            let tolerance = sigma_level * se
                + 10.0 * oracle[i].est_abs_error
                + 1e-9 * (1.0 + oracle[i].value.abs());
            ParamCheck {
                name: names[i].clone(),
                estimate: est.mean[i],
                oracle: oracle[i].value,
                oracle_method: oracle[i].method,
                standard_error: se,
                tolerance,
                pass: (est.mean[i] - oracle[i].value).abs() <= tolerance,
            }
        })
        .collect();
    Ok(CheckSet {
        cost: f.name(),
        pass: params.iter().all(|p| p.pass),
        params,
        n_cost_evals: est.n_cost_evals,
    })
}

fn exact(values: Vec<f64>) -> Vec<OracleResult> {
    values
        .into_iter()
        .map(|value| OracleResult {
            value,
            method: OracleMethod::ClosedForm,
            est_abs_error: 1e-8 * value.abs().max(1.0),
        })
        .collect()
}

/// Compares estimator `id` against the oracle on `f`, then on the mean and
/// covariance test costs. Statistical failures are report outcomes.
pub fn gradcheck(
    id: EstimatorId,
    m: &Measure<f64>,
    f: &dyn Cost<f64>,
    n_samples: usize,
    sigma_level: f64,
    rng: &mut RngStream,
) -> Result<GradcheckReport> {
    if !id.applicable(m) {
        return Err(Error::capability(m.family(), format!("the {id} estimator")));
    }
    let oracle = oracle_gradient(m, f)?;
    let main = check_set(id, m, f, &oracle, n_samples, sigma_level, &mut rng.split(0))?;
    let mut moment_checks = Vec::new();
    match m {
        Measure::DiagGaussian { mu, sigma } => {
            let d = mu.len();
            let mut g = vec![0.0; 2 * d];
            g[0] = 1.0;
            moment_checks.push((Box::new(Coordinate(0)) as Box<dyn Cost<f64>>, exact(g)));
            if d > 1 {
                let cross = CrossProduct { i: 0, j: 1, a: mu[0], b: mu[1] };
                moment_checks.push((Box::new(cross), exact(vec![0.0; 2 * d])));
            }
            let mut g = vec![0.0; 2 * d];
            g[d] = 2.0 * sigma[0];
            let sq = CrossProduct { i: 0, j: 0, a: mu[0], b: mu[0] };
            moment_checks.push((Box::new(sq), exact(g)));
        }
        _ => {
            if let (Some((mean, _)), Some((gm, gv))) = (moments(m), moment_gradients(m)?) {
                moment_checks.push((Box::new(Coordinate(0)), exact(gm)));
                let sq = CrossProduct { i: 0, j: 0, a: mean, b: mean };
                moment_checks.push((Box::new(sq), exact(gv)));
            }
        }
    }
    let moment_checks = moment_checks
        .into_iter()
        .enumerate()
        .map(|(k, (cost, oracle))| {
            let mut r = rng.split(k as u64 + 1);
            check_set(id, m, cost.as_ref(), &oracle, n_samples, sigma_level, &mut r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        estimator: id.to_string(),
        measure: m.to_string(),
        n_samples,
        sigma_level,
        pass: main.pass && moment_checks.iter().all(|c| c.pass),
        main,
        moment_checks,
    })
}

/// The measures exercised by the default gradcheck suite.
pub fn default_measures() -> Vec<Measure<f64>> {
    [
        "gaussian(mu=1, sigma=1)",
        "gamma(shape=1.5, rate=1)",
        "exponential(rate=2)",
        "weibull(shape=2, rate=0.5)",
        "poisson(rate=4)",
        "bernoulli(p=0.3)",
        "uniform(upper=1)",
        "maxwell(mu=0, sigma=1)",
        "erlang(k=2, rate=1.5)",
    ]
    .iter()
    .map(|s| Measure::parse(s).expect("valid default measure"))
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    type M = Measure<f64>;

    #[test]
    fn hermite_rule_integrates_polynomials() {
        let (x, w) = gauss_hermite(128);
        let sp = std::f64::consts::PI.sqrt();
        assert!((w.iter().sum::<f64>() - sp).abs() < 1e-12);
        let m2: f64 = x.iter().zip(&w).map(|(a, b)| a * a * b).sum();
        assert!((m2 - sp / 2.0).abs() < 1e-12);
        let m4: f64 = x.iter().zip(&w).map(|(a, b)| a.powi(4) * b).sum();
        assert!((m4 - 3.0 * sp / 4.0).abs() < 1e-12);
        assert!(x.windows(2).all(|p| p[0] > p[1]));
    }

    #[test]
    fn kronrod_on_known_integrals() {
        let (v, e) = adaptive_quadrature(&|x: f64| x.sin(), 0.0, std::f64::consts::PI, 1e-12);
        assert!((v - 2.0).abs() < 1e-12 && e < 1e-10);
        let (v, _) = adaptive_quadrature(&|x: f64| 1.0 / x.sqrt(), 0.0, 1.0, 1e-10);
        assert!((v - 2.0).abs() < 1e-8);
        let (v, _) = integrate_upper(&|x: f64| (-x).exp(), 0.0, 1.0, 1e-12);
        assert!((v - 1.0).abs() < 1e-11);
    }

    #[test]
    fn expectation_examples() {
        let m = M::gaussian(1.0, 1.0).unwrap();
        let r = quadrature_expectation(&m, &StandardCost::Quadratic(1.0)).unwrap();
        assert!((r.value - 1.0).abs() < 1e-12);
        assert_eq!(r.method, OracleMethod::GaussHermite);
        for &(mu, s, k) in &[(1.0, 1.0, 0.5), (0.3, 2.0, 1.58), (1.0, 1.0, 5.0)] {
            let r = quadrature_expectation(&M::gaussian(mu, s).unwrap(), &StandardCost::Cos(k)).unwrap();
            let truth = (k * mu).cos() * (-k * k * s * s / 2.0).exp();
            assert!((r.value - truth).abs() < 1e-8, "{k}: {} vs {truth}", r.value);
            assert!(r.est_abs_error < 1e-8);
        }
        let r = quadrature_expectation(&M::bernoulli(0.3).unwrap(), &StandardCost::LinearSum).unwrap();
        assert!((r.value - 0.3).abs() < 1e-15);
    }

    #[test]
    fn expectations_of_moments_across_families() {
        for m in default_measures() {
            let (mean, var) = moments(&m).unwrap();
            let e1 = quadrature_expectation(&m, &StandardCost::LinearSum).unwrap();
            assert!((e1.value - mean).abs() < 1e-8, "{m}: {} vs {mean}", e1.value);
            let e2 = quadrature_expectation(&m, &StandardCost::Quadratic(mean)).unwrap();
            assert!((e2.value - var).abs() < 1e-8, "{m}: {} vs {var}", e2.value);
            let e0 = quadrature_expectation(&m, &StandardCost::Constant(1.0)).unwrap();
            assert!((e0.value - 1.0).abs() < 1e-9, "{m}");
        }
        let g = M::gamma(0.5, 1.0).unwrap();
        assert!((quadrature_expectation(&g, &StandardCost::LinearSum).unwrap().value - 0.5).abs() < 1e-8);
    }

    #[test]
    fn gaussian_quadrature_self_consistent_on_cost_grid() {
        let m = M::gaussian(1.0, 1.0).unwrap();
        let mut costs = Vec::new();
        for i in 0..=12 {
            costs.push(StandardCost::Quadratic(-3.0 + 0.5 * i as f64));
        }
        for k in [0.5, 1.0, 1.58, 2.5, 5.0] {
            costs.push(StandardCost::Cos(k));
        }
        for c in costs {
            let f = |x: f64| c.eval(&[x]);
            let q128 = gh_normal(1.0, 1.0, 128, &f);
            let q64 = gh_normal(1.0, 1.0, 64, &f);
            assert!((q128 - q64).abs() < 1e-9, "{c}");
        }
        // Narrow exp costs defeat the Hermite rule and take the Kronrod fallback.
        for k in [0.1, 1.0, 3.0, 10.0] {
            let r = quadrature_expectation(&m, &StandardCost::Exp(k)).unwrap();
            let a = 1.0 + 2.0 * k;
            let truth = (-k / a).exp() / a.sqrt();
            assert!((r.value - truth).abs() < 1e-9, "{k}: {r:?}");
        }
    }

    #[test]
    fn separable_diag_expectation() {
        let m = M::diag_gaussian(vec![0.5, -1.0], vec![1.0, 2.0]).unwrap();
        let r = quadrature_expectation(&m, &StandardCost::Quadratic(0.0)).unwrap();
        assert!((r.value - (0.25 + 1.0 + 1.0 + 4.0)).abs() < 1e-10);
        let log = crate::costs::blr_loglik_cost(vec![1.0, 1.0], 1.0).unwrap();
        assert!(matches!(quadrature_expectation(&m, &log), Err(Error::Capability { .. })));
    }

    #[test]
    fn gradient_examples() {
        let g = oracle_gradient(&M::gamma(1.5, 1.0).unwrap(), &StandardCost::LinearSum).unwrap();
        assert_eq!(g[0].value, 1.0);
        let n = M::gaussian(1.0, 1.0).unwrap();
        let g = oracle_gradient(&n, &StandardCost::Quadratic(3.0)).unwrap();
        assert_eq!((g[0].value, g[1].value), (-4.0, 2.0));
    }

    /// Finite-difference oracle against every registered closed form.
    #[test]
    fn closed_forms_match_finite_differences() {
        let cases: Vec<(M, StandardCost<f64>)> = vec![
            (M::gaussian(1.0, 1.0).unwrap(), StandardCost::Cos(1.58)),
            (M::gaussian(0.3, 0.7).unwrap(), StandardCost::Exp(2.0)),
            (M::gaussian(-0.5, 1.3).unwrap(), StandardCost::FourthPower),
            (M::gaussian(-0.5, 1.3).unwrap(), StandardCost::Quadratic(0.4)),
            (M::gamma(2.5, 1.5).unwrap(), StandardCost::LinearSum),
            (M::exponential(2.0).unwrap(), StandardCost::LinearSum),
            (M::erlang(3, 1.5).unwrap(), StandardCost::LinearSum),
            (M::poisson(4.0).unwrap(), StandardCost::LinearSum),
            (M::uniform(2.0).unwrap(), StandardCost::LinearSum),
            (M::bernoulli(0.3).unwrap(), StandardCost::Cos(2.0)),
        ];
        for (m, f) in cases {
            let closed = closed_form_gradient(&m, &f).unwrap();
            let theta = m.params().values;
            for (i, c) in closed.iter().enumerate() {
                let h = 1e-4;
                let e = |v: f64| quadrature_expectation(&m.with_param(i, v).unwrap(), &f).unwrap().value;
                let fd = (e(theta[i] + h) - e(theta[i] - h)) / (2.0 * h);
                assert!((c - fd).abs() < 1e-6, "{m} {f} {i}: {c} vs {fd}");
            }
        }
    }

    #[test]
    fn finite_difference_oracle() {
        // d/dβ E[x] for Weibull(2, β): −½ β^{−3/2} Γ(3/2).
        let m = M::weibull(2.0, 0.5, 0.0).unwrap();
        let g = oracle_gradient(&m, &StandardCost::LinearSum).unwrap();
        let truth = -0.5 * 0.5f64.powf(-1.5) * ln_gamma(1.5f64).exp();
        assert_eq!(g[1].method, OracleMethod::FiniteDifference);
        assert!((g[1].value - truth).abs() < 1e-8);
        assert!(g.iter().all(|r| r.est_abs_error.is_finite() && r.est_abs_error < 1e-6));
        // d/dμ E[x²] under the double-sided Maxwell is 2μ.
        let m = M::maxwell(0.7, 1.0).unwrap();
        let g = oracle_gradient(&m, &StandardCost::Quadratic(0.0)).unwrap();
        assert!((g[0].value - 1.4).abs() < 1e-7 && (g[1].value - 6.0).abs() < 1e-7);
    }

    #[test]
    fn gradcheck_examples() {
        let mut rng = RngStream::new(1);
        let n = M::gaussian(0.0, 1.0).unwrap();
        let r = gradcheck(EstimatorId::Pathwise, &n, &StandardCost::LinearSum, 10_000, 4.0, &mut rng).unwrap();
        assert!(r.pass, "{r:#?}");
        assert_eq!(r.main.params[0].standard_error, 0.0);
        assert_eq!(r.moment_checks.len(), 2);

        let u = M::uniform(1.0).unwrap();
        let r = gradcheck(EstimatorId::ScoreFunction, &u, &StandardCost::LinearSum, 10_000, 4.0, &mut rng).unwrap();
        assert!(!r.pass);
        assert!((r.main.params[0].estimate + 0.5).abs() < 0.05);
        assert_eq!(r.main.params[0].oracle, 0.5);
        let r = gradcheck(EstimatorId::MeasureValued, &u, &StandardCost::LinearSum, 10_000, 4.0, &mut rng).unwrap();
        assert!(r.pass, "{r:#?}");

        let e = gradcheck(EstimatorId::Pathwise, &M::poisson(2.0).unwrap(), &StandardCost::LinearSum, 100, 4.0, &mut rng);
        assert!(matches!(e, Err(Error::Capability { .. })));
        let json = serde_json::to_string(&gradcheck(EstimatorId::Pathwise, &n, &StandardCost::Cos(1.0), 100, 4.0, &mut rng).unwrap()).unwrap();
        assert!(json.contains("\"oracle_method\":\"closed_form\""));
    }

    #[test]
    fn gradcheck_diag_moments() {
        let m = M::diag_gaussian(vec![0.5; 3], vec![1.0; 3]).unwrap();
        let r = gradcheck(EstimatorId::Pathwise, &m, &StandardCost::Cos(1.0), 10_000, 4.0, &mut RngStream::new(2)).unwrap();
        assert!(r.pass, "{r:#?}");
        assert_eq!(r.moment_checks.len(), 3);
    }

    #[test]
    fn empirical_variance_examples() {
        let mut rng = RngStream::new(3);
        let v = empirical_variance(EstimatorId::Pathwise, &M::gaussian(1.0, 2.0).unwrap(), &StandardCost::LinearSum, 1000, &mut rng).unwrap();
        assert_eq!(v.variance[0], 0.0);
        let v = empirical_variance(EstimatorId::MeasureValued, &M::bernoulli(0.4).unwrap(), &StandardCost::Cos(1.0), 1000, &mut rng).unwrap();
        assert_eq!(v.variance[0], 0.0);
        // Per-parameter variance is flat in D; the trace grows.
        let mut prev = 0.0;
        for d in [1, 10, 50] {
            let m = M::diag_gaussian(vec![0.5; d], vec![1.0; d]).unwrap();
            let v = empirical_variance(EstimatorId::ScoreFunction, &m, &StandardCost::Constant(100.0), 20_000, &mut rng).unwrap();
            let total: f64 = v.variance.iter().sum();
            assert!(total > prev);
            prev = total;
        }
    }

    proptest! {
        #[test]
        fn gaussian_quadratic_quadrature_matches_moments(mu in -3.0f64..3.0, s in 0.1f64..3.0, k in -3.0f64..3.0) {
            let r = quadrature_expectation(&M::gaussian(mu, s).unwrap(), &StandardCost::Quadratic(k)).unwrap();
            prop_assert!((r.value - ((mu - k).powi(2) + s * s)).abs() < 1e-9 * (1.0 + r.value));
        }

        #[test]
        fn gamma_mean_by_quadrature(a in 0.3f64..8.0, b in 0.2f64..5.0) {
            let r = quadrature_expectation(&M::gamma(a, b).unwrap(), &StandardCost::LinearSum).unwrap();
            prop_assert!((r.value - a / b).abs() < 1e-8 * (1.0 + a / b));
        }
    }
}
