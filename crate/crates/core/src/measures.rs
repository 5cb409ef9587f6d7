//! Parametric measures: densities, scores, samplers, sampling paths, CDF
//! parameter gradients and weak-derivative triples.
//!
//! Points are slices: univariate families use `x[0]`, the diagonal Gaussian
//! uses one entry per coordinate. Discrete families store counts as reals.

use std::fmt;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::RngStream;
use crate::special::{digamma, gamma_p, gamma_p_da, ln_gamma, norm_cdf, norm_pdf};
use crate::text;

#[derive(Debug, Clone, PartialEq)]
pub enum Measure<T> {
    Gaussian { mu: T, sigma: T },
    DiagGaussian { mu: Vec<T>, sigma: Vec<T> },
    /// Shape/rate parameterisation.
    Gamma { shape: T, rate: T },
    Exponential { rate: T },
    /// Density `αβ(x−μ₀)^{α−1} exp(−β(x−μ₀)^α)`; `loc` is a fixed offset.
    Weibull { shape: T, rate: T, loc: T },
    Poisson { rate: T },
    Bernoulli { p: T },
    /// Uniform on `[0, upper]`.
    Uniform { upper: T },
    DoubleSidedMaxwell { mu: T, sigma: T },
    /// Integer shape `k` is fixed; only the rate is a parameter.
    Erlang { k: u32, rate: T },
}

/// Parameter values with their labels, in the order used by every gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<T> {
    pub values: Vec<T>,
    pub names: Vec<String>,
}

impl<T> ParamVector<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub has_score: bool,
    pub has_path: bool,
    pub has_cdf_grad: bool,
    pub has_weak_derivative: bool,
    pub discrete: bool,
}

/// `∂x/∂θ` of a sampling path.
#[derive(Debug, Clone, PartialEq)]
pub enum PathJacobian<T> {
    /// One entry per parameter of a univariate family.
    Univariate(Vec<T>),
    /// `x = μ + σ ⊙ ε`: `∂x_d/∂μ_d = 1`, `∂x_d/∂σ_d = ε_d`.
    DiagLocationScale { eps: Vec<T> },
}

impl<T: Real> PathJacobian<T> {
    /// `Σ_d g_d ∂x_d/∂θ` for a cost gradient `g = ∇ₓf`.
    pub fn vjp(&self, g: &[T]) -> Vec<T> {
        match self {
            PathJacobian::Univariate(j) => j.iter().map(|&d| g[0] * d).collect(),
            PathJacobian::DiagLocationScale { eps } => {
                let mut out = g.to_vec();
                out.extend(g.iter().zip(eps).map(|(&gd, &e)| gd * e));
                out
            }
        }
    }

    /// `∂x_d/∂θ_i` for every coordinate `d`, as a dense column.
    pub fn column(&self, i: usize) -> Vec<T> {
        match self {
            PathJacobian::Univariate(j) => vec![j[i]],
            PathJacobian::DiagLocationScale { eps } => {
                let dim = eps.len();
                let mut col = vec![T::zero(); dim];
                if i < dim {
                    col[i] = T::one();
                } else {
                    col[i - dim] = eps[i - dim];
                }
                col
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathSample<T> {
    pub base: Vec<T>,
    pub x: Vec<T>,
    pub jacobian: PathJacobian<T>,
}

/// One signed component of a weak derivative.
#[derive(Debug, Clone, PartialEq)]
pub enum Component<T> {
    Gaussian { mu: T, sigma: T },
    Maxwell { mu: T, sigma: T },
    /// `loc + sign·scale·W` with `W ~ Weibull(α=2, β=½)` (Rayleigh).
    WeibullShift { loc: T, scale: T, sign: T },
    Gamma { shape: T, rate: T },
    Weibull { shape: T, rate: T, loc: T },
    /// `loc + G^{1/shape}` with `G ~ Gamma(2, rate)`.
    WeibullGammaPow { shape: T, rate: T, loc: T },
    /// `Poisson(rate) + shift`.
    PoissonShift { rate: T, shift: T },
    Dirac(T),
    Uniform { upper: T },
    /// Positive part of the Gamma shape derivative, normalised by `c`.
    GammaShapePlus { shape: T, rate: T, c: T },
    /// Negative part of the Gamma shape derivative, normalised by `c`.
    GammaShapeMinus { shape: T, rate: T, c: T },
}

/// Coupling schemes between the two components of a triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingKind {
    Independent,
    /// Gaussian variate `ε̈ = ε̇·u` built from the Maxwell variate `ε̇`.
    MaxwellGaussian,
    /// One Rayleigh draw used for both `μ ± σw`.
    WeibullShared,
    /// The larger component is the smaller one plus an independent increment
    /// (Gamma additivity, Poisson shift).
    CommonBase,
}

/// `∂θᵢ p = c (p⁺ − p⁻)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakDerivativeTriple<T> {
    pub param: usize,
    pub c: T,
    pub positive: Component<T>,
    pub negative: Component<T>,
    /// Scheme used when coupling is requested.
    pub native_coupling: CouplingKind,
    /// For factorised multivariate measures: the perturbed coordinate.
    pub coordinate: Option<usize>,
}

const REJECTION_CAP: usize = 10_000;

/// Gamma(shape, 1) variate (Marsaglia–Tsang, boosted below shape 1).
pub fn gamma_unit<T: Real>(shape: T, rng: &mut RngStream) -> T {
    if shape < T::one() {
        let g = gamma_unit(shape + T::one(), rng);
        let u: T = rng.uniform();
        return g * u.powf(T::one() / shape);
    }
    let d = shape - T::lit(1.0 / 3.0);
    let c = T::one() / (T::lit(9.0) * d).sqrt();
    loop {
        let e: T = rng.normal();
        let v = T::one() + c * e;
        let u: T = rng.uniform();
        if v <= T::zero() {
            continue;
        }
        let v = v * v * v;
        if u.ln() < T::lit(0.5) * e * e + d - d * v + d * v.ln() {
            return d * v;
        }
    }
}

/// Poisson variate: inversion below rate 30, transformed rejection above.
pub fn poisson_sample<T: Real>(rate: T, rng: &mut RngStream) -> T {
    let mu = rate.as_f64();
    if mu < 30.0 {
        let u = rng.draw_uniform();
        let mut p = (-mu).exp();
        let mut cdf = p;
        let mut k = 0u64;
        while u >= cdf && k < 10_000 {
            k += 1;
            p *= mu / k as f64;
            cdf += p;
            if p == 0.0 {
                break;
            }
        }
        return T::lit(k as f64);
    }
    let smu = mu.sqrt();
    let b = 0.931 + 2.53 * smu;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.draw_uniform() - 0.5;
        let v = rng.draw_open_uniform();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + mu + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return T::lit(k);
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        if v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln()
            <= -mu + k * mu.ln() - ln_gamma(k + 1.0)
        {
            return T::lit(k);
        }
    }
}

/// Rayleigh variate `W ~ Weibull(α=2, β=½)`, density `w e^{−w²/2}`.
fn rayleigh<T: Real>(rng: &mut RngStream) -> T {
    (T::lit(2.0) * rng.exponential::<T>()).sqrt()
}

/// Standard double-sided Maxwell variate.
fn maxwell_unit<T: Real>(rng: &mut RngStream) -> T {
    let r = (T::lit(2.0) * gamma_unit(T::lit(1.5), rng)).sqrt();
    if rng.draw_uniform() < 0.5 {
        -r
    } else {
        r
    }
}

fn positive<T: Real>(name: &str, v: T) -> Result<()> {
    if v > T::zero() && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name: name.to_string(),
            value: v.as_f64(),
            reason: "must be positive and finite",
        })
    }
}

fn finite<T: Real>(name: &str, v: T) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name: name.to_string(),
            value: v.as_f64(),
            reason: "must be finite",
        })
    }
}

impl<T: Real> Measure<T> {
    pub fn gaussian(mu: T, sigma: T) -> Result<Self> {
        Measure::Gaussian { mu, sigma }.validated()
    }

    pub fn diag_gaussian(mu: Vec<T>, sigma: Vec<T>) -> Result<Self> {
        Measure::DiagGaussian { mu, sigma }.validated()
    }

    pub fn gamma(shape: T, rate: T) -> Result<Self> {
        Measure::Gamma { shape, rate }.validated()
    }

    pub fn exponential(rate: T) -> Result<Self> {
        Measure::Exponential { rate }.validated()
    }

    pub fn weibull(shape: T, rate: T, loc: T) -> Result<Self> {
        Measure::Weibull { shape, rate, loc }.validated()
    }

    pub fn poisson(rate: T) -> Result<Self> {
        Measure::Poisson { rate }.validated()
    }

    pub fn bernoulli(p: T) -> Result<Self> {
        Measure::Bernoulli { p }.validated()
    }

    pub fn uniform(upper: T) -> Result<Self> {
        Measure::Uniform { upper }.validated()
    }

    pub fn maxwell(mu: T, sigma: T) -> Result<Self> {
        Measure::DoubleSidedMaxwell { mu, sigma }.validated()
    }

    pub fn erlang(k: u32, rate: T) -> Result<Self> {
        Measure::Erlang { k, rate }.validated()
    }

    fn validated(self) -> Result<Self> {
        match &self {
            Measure::Gaussian { mu, sigma } | Measure::DoubleSidedMaxwell { mu, sigma } => {
                finite("mu", *mu)?;
                positive("sigma", *sigma)?;
            }
            Measure::DiagGaussian { mu, sigma } => {
                if mu.len() != sigma.len() {
                    return Err(Error::LengthMismatch {
                        left: mu.len(),
                        right: sigma.len(),
                    });
                }
                if mu.is_empty() {
                    return Err(Error::Config("diagonal Gaussian needs dim >= 1".into()));
                }
                for (&m, &s) in mu.iter().zip(sigma) {
                    finite("mu", m)?;
                    positive("sigma", s)?;
                }
            }
            Measure::Gamma { shape, rate } => {
                positive("shape", *shape)?;
                positive("rate", *rate)?;
            }
            Measure::Exponential { rate } | Measure::Poisson { rate } => positive("rate", *rate)?,
            Measure::Weibull { shape, rate, loc } => {
                positive("shape", *shape)?;
                positive("rate", *rate)?;
                finite("loc", *loc)?;
            }
            Measure::Bernoulli { p } => {
                if !(*p > T::zero() && *p < T::one()) {
                    return Err(Error::InvalidParameter {
                        name: "p".into(),
                        value: p.as_f64(),
                        reason: "must lie in (0, 1)",
                    });
                }
            }
            Measure::Uniform { upper } => positive("upper", *upper)?,
            Measure::Erlang { k, rate } => {
                if *k == 0 {
                    return Err(Error::InvalidParameter {
                        name: "k".into(),
                        value: 0.0,
                        reason: "must be at least 1",
                    });
                }
                positive("rate", *rate)?;
            }
        }
        Ok(self)
    }

    /// Parses `family(name=value, ...)`.
    ///
    /// `diag_gaussian(mu=.., sigma=.., dim=D)` repeats the scalar parameters.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut call = text::parse_call(spec)?;
        let t = |v: f64| T::lit(v);
        let m = match call.name.as_str() {
            "gaussian" | "normal" => {
                let mu = call.require(&["mu"])?;
                let sigma = call.require(&["sigma"])?;
                Measure::gaussian(t(mu), t(sigma))
            }
            "diag_gaussian" => {
                let mu = call.require(&["mu"])?;
                let sigma = call.require(&["sigma"])?;
                let dim = call.require(&["dim", "d"])?;
                if dim < 1.0 || dim.fract() != 0.0 {
                    return Err(Error::Config(format!("dim must be a positive integer, got {dim}")));
                }
                let dim = dim as usize;
                Measure::diag_gaussian(vec![t(mu); dim], vec![t(sigma); dim])
            }
            "gamma" => {
                let a = call.require(&["shape", "alpha"])?;
                let b = call.take(&["rate", "beta"]).unwrap_or(1.0);
                Measure::gamma(t(a), t(b))
            }
            "exponential" => Measure::exponential(t(call.require(&["rate", "lambda"])?)),
            "weibull" => {
                let a = call.require(&["shape", "alpha"])?;
                let b = call.require(&["rate", "beta"])?;
                let loc = call.take(&["loc", "mu0"]).unwrap_or(0.0);
                Measure::weibull(t(a), t(b), t(loc))
            }
            "poisson" => Measure::poisson(t(call.require(&["rate", "theta"])?)),
            "bernoulli" => Measure::bernoulli(t(call.require(&["p", "theta"])?)),
            "uniform" => Measure::uniform(t(call.require(&["upper", "theta"])?)),
            "maxwell" | "double_sided_maxwell" => {
                let mu = call.require(&["mu"])?;
                let sigma = call.require(&["sigma"])?;
                Measure::maxwell(t(mu), t(sigma))
            }
            "erlang" => {
                let k = call.require(&["k"])?;
                if k < 1.0 || k.fract() != 0.0 {
                    return Err(Error::Config(format!("erlang k must be a positive integer, got {k}")));
                }
                let rate = call.require(&["rate", "lambda"])?;
                Measure::erlang(k as u32, t(rate))
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown measure `{other}`; expected one of gaussian, diag_gaussian, gamma, exponential, weibull, poisson, bernoulli, uniform, maxwell, erlang"
                )))
            }
        }?;
        call.finish()?;
        Ok(m)
    }

    pub fn family(&self) -> &'static str {
        match self {
            Measure::Gaussian { .. } => "gaussian",
            Measure::DiagGaussian { .. } => "diag_gaussian",
            Measure::Gamma { .. } => "gamma",
            Measure::Exponential { .. } => "exponential",
            Measure::Weibull { .. } => "weibull",
            Measure::Poisson { .. } => "poisson",
            Measure::Bernoulli { .. } => "bernoulli",
            Measure::Uniform { .. } => "uniform",
            Measure::DoubleSidedMaxwell { .. } => "maxwell",
            Measure::Erlang { .. } => "erlang",
        }
    }

    /// Dimension of a point.
    pub fn dim(&self) -> usize {
        match self {
            Measure::DiagGaussian { mu, .. } => mu.len(),
            _ => 1,
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Measure::DiagGaussian { mu, .. } => 2 * mu.len(),
            Measure::Gaussian { .. }
            | Measure::Gamma { .. }
            | Measure::Weibull { .. }
            | Measure::DoubleSidedMaxwell { .. } => 2,
            _ => 1,
        }
    }

    pub fn params(&self) -> ParamVector<T> {
        let named = |pairs: &[(&str, T)]| ParamVector {
            values: pairs.iter().map(|p| p.1).collect(),
            names: pairs.iter().map(|p| p.0.to_string()).collect(),
        };
        match self {
            Measure::Gaussian { mu, sigma } | Measure::DoubleSidedMaxwell { mu, sigma } => {
                named(&[("mu", *mu), ("sigma", *sigma)])
            }
            Measure::DiagGaussian { mu, sigma } => ParamVector {
                values: mu.iter().chain(sigma).copied().collect(),
                names: (0..mu.len())
                    .map(|d| format!("mu[{d}]"))
                    .chain((0..sigma.len()).map(|d| format!("sigma[{d}]")))
                    .collect(),
            },
            Measure::Gamma { shape, rate } | Measure::Weibull { shape, rate, .. } => {
                named(&[("shape", *shape), ("rate", *rate)])
            }
            Measure::Exponential { rate } | Measure::Poisson { rate } | Measure::Erlang { rate, .. } => {
                named(&[("rate", *rate)])
            }
            Measure::Bernoulli { p } => named(&[("p", *p)]),
            Measure::Uniform { upper } => named(&[("upper", *upper)]),
        }
    }

    /// Copy with parameter `i` replaced by `v` (validated).
    pub fn with_param(&self, i: usize, v: T) -> Result<Self> {
        if i >= self.n_params() {
            return Err(Error::LengthMismatch {
                left: i,
                right: self.n_params(),
            });
        }
        let mut m = self.clone();
        match &mut m {
            Measure::Gaussian { mu, sigma } | Measure::DoubleSidedMaxwell { mu, sigma } => {
                *[mu, sigma][i] = v;
            }
            Measure::DiagGaussian { mu, sigma } => {
                let d = mu.len();
                if i < d {
                    mu[i] = v;
                } else {
                    sigma[i - d] = v;
                }
            }
            Measure::Gamma { shape, rate } | Measure::Weibull { shape, rate, .. } => {
                *[shape, rate][i] = v;
            }
            Measure::Exponential { rate } | Measure::Poisson { rate } | Measure::Erlang { rate, .. } => {
                *rate = v
            }
            Measure::Bernoulli { p } => *p = v,
            Measure::Uniform { upper } => *upper = v,
        }
        m.validated()
    }

    pub fn capabilities(&self) -> Capabilities {
        let discrete = matches!(self, Measure::Poisson { .. } | Measure::Bernoulli { .. });
        Capabilities {
            has_score: true,
            has_path: !discrete && !matches!(self, Measure::Gamma { .. }),
            has_cdf_grad: !discrete && !matches!(self, Measure::DiagGaussian { .. }),
            has_weak_derivative: !matches!(self, Measure::DoubleSidedMaxwell { .. }),
            discrete,
        }
    }

    fn domain(&self, x: T, support: &'static str) -> Error {
        Error::Domain {
            family: self.family(),
            x: x.as_f64(),
            support,
        }
    }

    fn scalar(&self, x: &[T]) -> Result<T> {
        if x.len() != self.dim() {
            return Err(Error::LengthMismatch {
                left: x.len(),
                right: self.dim(),
            });
        }
        Ok(x[0])
    }

    fn check_support(&self, x: &[T]) -> Result<()> {
        if let Measure::DiagGaussian { .. } = self {
            if x.len() != self.dim() {
                return Err(Error::LengthMismatch {
                    left: x.len(),
                    right: self.dim(),
                });
            }
            return Ok(());
        }
        let x = self.scalar(x)?;
        let ok = match self {
            Measure::Gamma { .. } | Measure::Exponential { .. } | Measure::Erlang { .. } => {
                x >= T::zero()
            }
            Measure::Weibull { loc, .. } => x >= *loc,
            Measure::Poisson { .. } => x >= T::zero() && x.fract() == T::zero(),
            Measure::Bernoulli { .. } => x == T::zero() || x == T::one(),
            Measure::Uniform { upper } => x >= T::zero() && x <= *upper,
            _ => x.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            let support = match self {
                Measure::Gamma { .. } | Measure::Exponential { .. } | Measure::Erlang { .. } => {
                    "x >= 0"
                }
                Measure::Weibull { .. } => "x >= loc",
                Measure::Poisson { .. } => "non-negative integers",
                Measure::Bernoulli { .. } => "{0, 1}",
                Measure::Uniform { .. } => "[0, upper]",
                _ => "finite reals",
            };
            Err(self.domain(x, support))
        }
    }

    /// Natural-log density (or mass).
    pub fn log_prob(&self, x: &[T]) -> Result<T> {
        self.check_support(x)?;
        let half_ln_2pi = T::lit(0.5) * (T::lit(2.0) * T::PI()).ln();
        let two = T::lit(2.0);
        Ok(match self {
            Measure::Gaussian { mu, sigma } => {
                let z = (x[0] - *mu) / *sigma;
                -half_ln_2pi - sigma.ln() - z * z / two
            }
            Measure::DiagGaussian { mu, sigma } => x
                .iter()
                .zip(mu.iter().zip(sigma))
                .map(|(&xd, (&m, &s))| {
                    let z = (xd - m) / s;
                    -half_ln_2pi - s.ln() - z * z / two
                })
                .sum(),
            Measure::Gamma { shape, rate } => {
                *shape * rate.ln() + (*shape - T::one()) * x[0].ln() - *rate * x[0]
                    - ln_gamma(*shape)
            }
            Measure::Exponential { rate } => rate.ln() - *rate * x[0],
            Measure::Weibull { shape, rate, loc } => {
                let y = x[0] - *loc;
                shape.ln() + rate.ln() + (*shape - T::one()) * y.ln() - *rate * y.powf(*shape)
            }
            Measure::Poisson { rate } => x[0] * rate.ln() - *rate - ln_gamma(x[0] + T::one()),
            Measure::Bernoulli { p } => {
                if x[0] == T::one() {
                    p.ln()
                } else {
                    (T::one() - *p).ln()
                }
            }
            Measure::Uniform { upper } => -upper.ln(),
            Measure::DoubleSidedMaxwell { mu, sigma } => {
                let d = x[0] - *mu;
                let z = d / *sigma;
                -half_ln_2pi - T::lit(3.0) * sigma.ln() + two * d.abs().ln() - z * z / two
            }
            Measure::Erlang { k, rate } => {
                let k = T::lit(*k as f64);
                k * rate.ln() + (k - T::one()) * x[0].ln() - *rate * x[0] - ln_gamma(k)
            }
        })
    }

    /// Density (or mass).
    pub fn prob(&self, x: &[T]) -> Result<T> {
        self.log_prob(x).map(T::exp)
    }

    /// `∇θ log p(x; θ)` in parameter order.
    pub fn score(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_support(x)?;
        Ok(match self {
            Measure::Gaussian { mu, sigma } => {
                let d = x[0] - *mu;
                let s2 = *sigma * *sigma;
                vec![d / s2, (d * d - s2) / (s2 * *sigma)]
            }
            Measure::DiagGaussian { mu, sigma } => {
                let mut out: Vec<T> = Vec::with_capacity(2 * mu.len());
                for ((&xd, &m), &s) in x.iter().zip(mu).zip(sigma) {
                    out.push((xd - m) / (s * s));
                }
                for ((&xd, &m), &s) in x.iter().zip(mu).zip(sigma) {
                    let d = xd - m;
                    out.push((d * d - s * s) / (s * s * s));
                }
                out
            }
            Measure::Gamma { shape, rate } => vec![
                rate.ln() + x[0].ln() - digamma(*shape),
                *shape / *rate - x[0],
            ],
            Measure::Exponential { rate } => vec![T::one() / *rate - x[0]],
            Measure::Weibull { shape, rate, loc } => {
                let y = x[0] - *loc;
                let ly = y.ln();
                let ya = y.powf(*shape);
                vec![
                    T::one() / *shape + ly - *rate * ya * ly,
                    T::one() / *rate - ya,
                ]
            }
            Measure::Poisson { rate } => vec![x[0] / *rate - T::one()],
            Measure::Bernoulli { p } => {
                if x[0] == T::one() {
                    vec![T::one() / *p]
                } else {
                    vec![-T::one() / (T::one() - *p)]
                }
            }
            Measure::Uniform { upper } => vec![-T::one() / *upper],
            Measure::DoubleSidedMaxwell { mu, sigma } => {
                let d = x[0] - *mu;
                let s2 = *sigma * *sigma;
                vec![
                    -T::lit(2.0) / d + d / s2,
                    -T::lit(3.0) / *sigma + d * d / (s2 * *sigma),
                ]
            }
            Measure::Erlang { k, rate } => vec![T::lit(*k as f64) / *rate - x[0]],
        })
    }

    /// One point.
    pub fn sample(&self, rng: &mut RngStream) -> Vec<T> {
        match self {
            Measure::DiagGaussian { mu, sigma } => mu
                .iter()
                .zip(sigma)
                .map(|(&m, &s)| m + s * rng.normal::<T>())
                .collect(),
            _ => vec![self.sample_scalar(rng)],
        }
    }

    pub fn sample_n(&self, rng: &mut RngStream, n: usize) -> Vec<Vec<T>> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    fn sample_scalar(&self, rng: &mut RngStream) -> T {
        match self {
            Measure::Gaussian { mu, sigma } => *mu + *sigma * rng.normal::<T>(),
            Measure::DiagGaussian { mu, sigma } => mu[0] + sigma[0] * rng.normal::<T>(),
            Measure::Gamma { shape, rate } => gamma_unit(*shape, rng) / *rate,
            Measure::Exponential { rate } => rng.exponential::<T>() / *rate,
            Measure::Weibull { shape, rate, loc } => {
                *loc + (rng.exponential::<T>() / *rate).powf(T::one() / *shape)
            }
            Measure::Poisson { rate } => poisson_sample(*rate, rng),
            Measure::Bernoulli { p } => {
                if T::lit(rng.draw_uniform()) < *p {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Measure::Uniform { upper } => *upper * rng.uniform::<T>(),
            Measure::DoubleSidedMaxwell { mu, sigma } => *mu + *sigma * maxwell_unit::<T>(rng),
            Measure::Erlang { k, rate } => {
                let mut g = T::zero();
                for _ in 0..*k {
                    g += rng.exponential::<T>();
                }
                g / *rate
            }
        }
    }

    fn no_path(&self) -> Error {
        Error::capability(self.family(), "sampling paths")
    }

    /// Draws a base variate from the parameter-free base measure.
    pub fn sample_base(&self, rng: &mut RngStream) -> Result<Vec<T>> {
        Ok(match self {
            Measure::Gaussian { .. } => vec![rng.normal()],
            Measure::DiagGaussian { mu, .. } => (0..mu.len()).map(|_| rng.normal()).collect(),
            Measure::Exponential { .. } | Measure::Weibull { .. } | Measure::Uniform { .. } => {
                vec![rng.uniform()]
            }
            Measure::DoubleSidedMaxwell { .. } => vec![maxwell_unit(rng)],
            Measure::Erlang { k, .. } => {
                let mut g = T::zero();
                for _ in 0..*k {
                    g += rng.exponential::<T>();
                }
                vec![g]
            }
            _ => return Err(self.no_path()),
        })
    }

    /// Deterministic path `x = g(ε; θ)` and its parameter Jacobian.
    ///
    /// Base variates: standard normal (Gaussians), uniform `u` (Exponential,
    /// Weibull, Uniform), standard Maxwell, and `Gamma(k, 1)` (Erlang).
    pub fn transform(&self, base: &[T]) -> Result<(Vec<T>, PathJacobian<T>)> {
        if base.len() != self.dim() {
            return Err(Error::LengthMismatch {
                left: base.len(),
                right: self.dim(),
            });
        }
        let e = base[0];
        let uni = |x: T, j: Vec<T>| (vec![x], PathJacobian::Univariate(j));
        Ok(match self {
            Measure::Gaussian { mu, sigma } | Measure::DoubleSidedMaxwell { mu, sigma } => {
                uni(*mu + *sigma * e, vec![T::one(), e])
            }
            Measure::DiagGaussian { mu, sigma } => {
                let x = base
                    .iter()
                    .zip(mu.iter().zip(sigma))
                    .map(|(&e, (&m, &s))| m + s * e)
                    .collect();
                (x, PathJacobian::DiagLocationScale { eps: base.to_vec() })
            }
            Measure::Exponential { rate } => {
                let l = (-e).ln_1p();
                uni(-l / *rate, vec![l / (*rate * *rate)])
            }
            Measure::Weibull { shape, rate, loc } => {
                let ex = -(-e).ln_1p();
                let y = (ex / *rate).powf(T::one() / *shape);
                let dshape = -y * (ex / *rate).ln() / (*shape * *shape);
                let drate = -y / (*shape * *rate);
                uni(*loc + y, vec![dshape, drate])
            }
            Measure::Uniform { upper } => uni(*upper * e, vec![e]),
            Measure::Erlang { rate, .. } => {
                let x = e / *rate;
                uni(x, vec![-x / *rate])
            }
            _ => return Err(self.no_path()),
        })
    }

    pub fn path_sample(&self, rng: &mut RngStream) -> Result<PathSample<T>> {
        let base = self.sample_base(rng)?;
        let (x, jacobian) = self.transform(&base)?;
        Ok(PathSample { base, x, jacobian })
    }

    /// CDF at `x` and its parameter gradient, for univariate continuous families.
    pub fn cdf_and_param_grad(&self, x: T) -> Result<(T, Vec<T>)> {
        let p = || self.prob(&[x]);
        Ok(match self {
            Measure::Gaussian { mu, sigma } => {
                let z = (x - *mu) / *sigma;
                let dens = norm_pdf(z) / *sigma;
                (norm_cdf(z), vec![-dens, -z * dens])
            }
            Measure::DoubleSidedMaxwell { mu, sigma } => {
                let z = (x - *mu) / *sigma;
                let half = T::lit(0.5);
                let inner = half * gamma_p(T::lit(1.5), z * z * half);
                let f = if z < T::zero() { half - inner } else { half + inner };
                let dens = z * z * norm_pdf(z) / *sigma;
                (f, vec![-dens, -z * dens])
            }
            Measure::Exponential { rate } => {
                if x < T::zero() {
                    return Err(self.domain(x, "x >= 0"));
                }
                let s = (-*rate * x).exp();
                (T::one() - s, vec![x * s])
            }
            Measure::Gamma { shape, rate } => {
                if x < T::zero() {
                    return Err(self.domain(x, "x >= 0"));
                }
                let y = *rate * x;
                let dens = if x > T::zero() { p()? } else { T::zero() };
                (gamma_p(*shape, y), vec![gamma_p_da(*shape, y), x * dens / *rate])
            }
            Measure::Weibull { shape, rate, loc } => {
                let y = x - *loc;
                if y < T::zero() {
                    return Err(self.domain(x, "x >= loc"));
                }
                if y == T::zero() {
                    return Ok((T::zero(), vec![T::zero(), T::zero()]));
                }
                let ya = y.powf(*shape);
                let s = (-*rate * ya).exp();
                (T::one() - s, vec![s * *rate * ya * y.ln(), s * ya])
            }
            Measure::Uniform { upper } => {
                if x < T::zero() || x > *upper {
                    return Err(self.domain(x, "[0, upper]"));
                }
                (x / *upper, vec![-x / (*upper * *upper)])
            }
            Measure::Erlang { k, rate } => {
                if x < T::zero() {
                    return Err(self.domain(x, "x >= 0"));
                }
                let dens = if x > T::zero() { p()? } else { T::zero() };
                (gamma_p(T::lit(*k as f64), *rate * x), vec![x * dens / *rate])
            }
            _ => return Err(Error::capability(self.family(), "CDF parameter gradients")),
        })
    }

    /// Implicit path derivative `∂x/∂θ = −∇θF / p` at `x`.
    pub fn implicit_jacobian(&self, x: T) -> Result<Vec<T>> {
        let (_, grad) = self.cdf_and_param_grad(x)?;
        let p = self.prob(&[x])?;
        Ok(grad.into_iter().map(|g| -g / p).collect())
    }

    /// Weak derivative of the density with respect to parameter `i`.
    pub fn weak_derivative_triple(&self, i: usize) -> Result<WeakDerivativeTriple<T>> {
        if i >= self.n_params() {
            return Err(Error::LengthMismatch {
                left: i,
                right: self.n_params(),
            });
        }
        let one = T::one();
        let triple = |c, positive, negative, native_coupling| WeakDerivativeTriple {
            param: i,
            c,
            positive,
            negative,
            native_coupling,
            coordinate: None,
        };
        Ok(match self {
            Measure::Gaussian { mu, sigma } => gaussian_triple(i, *mu, *sigma),
            Measure::DiagGaussian { mu, sigma } => {
                let d = mu.len();
                let coord = i % d;
                let mut t = gaussian_triple(i / d, mu[coord], sigma[coord]);
                t.param = i;
                t.coordinate = Some(coord);
                t
            }
            Measure::Gamma { shape, rate } => {
                if i == 1 {
                    triple(
                        *shape / *rate,
                        Component::Gamma { shape: *shape, rate: *rate },
                        Component::Gamma { shape: *shape + one, rate: *rate },
                        CouplingKind::CommonBase,
                    )
                } else {
                    let m = digamma(*shape).exp();
                    let c = -gamma_p_da(*shape, m);
                    triple(
                        c,
                        Component::GammaShapePlus { shape: *shape, rate: *rate, c },
                        Component::GammaShapeMinus { shape: *shape, rate: *rate, c },
                        CouplingKind::Independent,
                    )
                }
            }
            Measure::Exponential { rate } => triple(
                one / *rate,
                Component::Gamma { shape: one, rate: *rate },
                Component::Gamma { shape: T::lit(2.0), rate: *rate },
                CouplingKind::CommonBase,
            ),
            Measure::Erlang { k, rate } => {
                let k = T::lit(*k as f64);
                triple(
                    k / *rate,
                    Component::Gamma { shape: k, rate: *rate },
                    Component::Gamma { shape: k + one, rate: *rate },
                    CouplingKind::CommonBase,
                )
            }
            Measure::Weibull { shape, rate, loc } => {
                if i == 0 {
                    return Err(Error::capability(
                        "weibull",
                        "a weak derivative with respect to the shape parameter",
                    ));
                }
                triple(
                    one / *rate,
                    Component::Weibull { shape: *shape, rate: *rate, loc: *loc },
                    Component::WeibullGammaPow { shape: *shape, rate: *rate, loc: *loc },
                    CouplingKind::CommonBase,
                )
            }
            Measure::Poisson { rate } => triple(
                one,
                Component::PoissonShift { rate: *rate, shift: one },
                Component::PoissonShift { rate: *rate, shift: T::zero() },
                CouplingKind::CommonBase,
            ),
            Measure::Bernoulli { .. } => triple(
                one,
                Component::Dirac(one),
                Component::Dirac(T::zero()),
                CouplingKind::Independent,
            ),
            Measure::Uniform { upper } => triple(
                one / *upper,
                Component::Dirac(*upper),
                Component::Uniform { upper: *upper },
                CouplingKind::Independent,
            ),
            Measure::DoubleSidedMaxwell { .. } => {
                return Err(Error::capability("maxwell", "weak derivatives"))
            }
        })
    }

    /// Higher-order score `∇θ^{(k)} p / p` for `k ∈ {1, 2}`, flattened row-major.
    pub fn higher_order_score(&self, x: &[T], order: usize) -> Result<Vec<T>> {
        match order {
            1 => self.score(x),
            2 => {
                self.check_support(x)?;
                match self {
                    Measure::Gaussian { mu, sigma } => {
                        let z = (x[0] - *mu) / *sigma;
                        let s2 = *sigma * *sigma;
                        let z2 = z * z;
                        let mm = (z2 - T::one()) / s2;
                        let ms = z * (z2 - T::lit(3.0)) / s2;
                        let ss = (z2 * z2 - T::lit(5.0) * z2 + T::lit(2.0)) / s2;
                        Ok(vec![mm, ms, ms, ss])
                    }
                    Measure::Exponential { rate } => {
                        let s = T::one() / *rate - x[0];
                        Ok(vec![s * s - T::one() / (*rate * *rate)])
                    }
                    _ => Err(Error::capability(self.family(), "second-order scores")),
                }
            }
            k => Err(Error::capability(self.family(), format!("score of order {k}"))),
        }
    }
}

fn gaussian_triple<T: Real>(i: usize, mu: T, sigma: T) -> WeakDerivativeTriple<T> {
    if i == 0 {
        WeakDerivativeTriple {
            param: 0,
            c: T::one() / (sigma * (T::lit(2.0) * T::PI()).sqrt()),
            positive: Component::WeibullShift { loc: mu, scale: sigma, sign: T::one() },
            negative: Component::WeibullShift { loc: mu, scale: sigma, sign: -T::one() },
            native_coupling: CouplingKind::WeibullShared,
            coordinate: None,
        }
    } else {
        WeakDerivativeTriple {
            param: 1,
            c: T::one() / sigma,
            positive: Component::Maxwell { mu, sigma },
            negative: Component::Gaussian { mu, sigma },
            native_coupling: CouplingKind::MaxwellGaussian,
            coordinate: None,
        }
    }
}

impl<T: Real> Component<T> {
    pub fn is_discrete(&self) -> bool {
        matches!(self, Component::PoissonShift { .. } | Component::Dirac(_))
    }

    pub fn sample(&self, rng: &mut RngStream) -> Result<T> {
        Ok(match self {
            Component::Gaussian { mu, sigma } => *mu + *sigma * rng.normal::<T>(),
            Component::Maxwell { mu, sigma } => *mu + *sigma * maxwell_unit::<T>(rng),
            Component::WeibullShift { loc, scale, sign } => *loc + *sign * *scale * rayleigh(rng),
            Component::Gamma { shape, rate } => gamma_unit(*shape, rng) / *rate,
            Component::Weibull { shape, rate, loc } => {
                *loc + (rng.exponential::<T>() / *rate).powf(T::one() / *shape)
            }
            Component::WeibullGammaPow { shape, rate, loc } => {
                *loc + (gamma_unit(T::lit(2.0), rng) / *rate).powf(T::one() / *shape)
            }
            Component::PoissonShift { rate, shift } => poisson_sample(*rate, rng) + *shift,
            Component::Dirac(v) => *v,
            Component::Uniform { upper } => *upper * rng.uniform::<T>(),
            Component::GammaShapePlus { shape, rate, .. } => {
                let psi = digamma(*shape);
                let m = psi.exp();
                let bound = m * T::E();
                for _ in 0..REJECTION_CAP {
                    let y = gamma_unit(*shape + T::one(), rng);
                    let u: T = rng.uniform();
                    if y > m && u * y < (y.ln() - psi) * bound {
                        return Ok(y / *rate);
                    }
                }
                return Err(Error::SamplerExhausted { cap: REJECTION_CAP });
            }
            Component::GammaShapeMinus { shape, rate, .. } => {
                let m = digamma(*shape).exp();
                for _ in 0..REJECTION_CAP {
                    let z = gamma_unit(T::lit(2.0), rng) / *shape;
                    let y = m * (-z).exp();
                    let u: T = rng.uniform();
                    if u < (-y).exp() {
                        return Ok(y / *rate);
                    }
                }
                return Err(Error::SamplerExhausted { cap: REJECTION_CAP });
            }
        })
    }

    /// Log density (log mass for discrete components); `None` for Dirac masses.
    pub fn log_density(&self, x: T) -> Option<T> {
        let neg_inf = T::neg_infinity();
        let m = match self {
            Component::Gaussian { mu, sigma } => Measure::Gaussian { mu: *mu, sigma: *sigma },
            Component::Maxwell { mu, sigma } => Measure::DoubleSidedMaxwell { mu: *mu, sigma: *sigma },
            Component::WeibullShift { loc, scale, sign } => {
                let w = (x - *loc) * *sign / *scale;
                if w <= T::zero() {
                    return Some(neg_inf);
                }
                return Some(w.ln() - w * w / T::lit(2.0) - scale.ln());
            }
            Component::Gamma { shape, rate } => Measure::Gamma { shape: *shape, rate: *rate },
            Component::Weibull { shape, rate, loc } => Measure::Weibull { shape: *shape, rate: *rate, loc: *loc },
            Component::WeibullGammaPow { shape, rate, loc } => {
                let y = x - *loc;
                if y <= T::zero() {
                    return Some(neg_inf);
                }
                let t = y.powf(*shape);
                // G = y^α with G ~ Gamma(2, β); |dG/dy| = α y^{α−1}.
                return Some(
                    T::lit(2.0) * rate.ln() + t.ln() - *rate * t + shape.ln()
                        + (*shape - T::one()) * y.ln(),
                );
            }
            Component::PoissonShift { rate, shift } => {
                let k = x - *shift;
                if k < T::zero() || k.fract() != T::zero() {
                    return Some(neg_inf);
                }
                Measure::Poisson { rate: *rate }
            }
            Component::Dirac(_) => return None,
            Component::Uniform { upper } => Measure::Uniform { upper: *upper },
            Component::GammaShapePlus { shape, rate, c } | Component::GammaShapeMinus { shape, rate, c } => {
                if x <= T::zero() {
                    return Some(neg_inf);
                }
                let g = (*rate * x).ln() - digamma(*shape);
                let w = if matches!(self, Component::GammaShapePlus { .. }) { g } else { -g };
                if w <= T::zero() {
                    return Some(neg_inf);
                }
                let base = Measure::Gamma { shape: *shape, rate: *rate };
                return base.log_prob(&[x]).ok().map(|lp| lp + w.ln() - c.ln());
            }
        };
        let arg = match self {
            Component::PoissonShift { shift, .. } => x - *shift,
            _ => x,
        };
        Some(m.log_prob(&[arg]).unwrap_or(neg_inf))
    }
}

impl<T: Real> WeakDerivativeTriple<T> {
    fn incompatible(&self, kind: CouplingKind) -> Error {
        Error::capability(
            "weak-derivative triple",
            format!("{kind:?} coupling of {:?} and {:?}", self.positive, self.negative),
        )
    }

    /// One `(x⁺, x⁻)` pair under the requested coupling.
    pub fn sample_pair(&self, kind: CouplingKind, rng: &mut RngStream) -> Result<(T, T)> {
        use Component as C;
        match (kind, &self.positive, &self.negative) {
            (CouplingKind::Independent, p, n) => Ok((p.sample(rng)?, n.sample(rng)?)),
            (
                CouplingKind::MaxwellGaussian,
                C::Maxwell { mu, sigma },
                C::Gaussian { mu: mu2, sigma: s2 },
            ) if mu == mu2 && sigma == s2 => {
                let e = maxwell_unit::<T>(rng);
                let u: T = rng.uniform();
                Ok((*mu + *sigma * e, *mu + *sigma * e * u))
            }
            (
                CouplingKind::WeibullShared,
                C::WeibullShift { loc, scale, sign },
                C::WeibullShift { loc: l2, scale: s2, sign: g2 },
            ) if loc == l2 && scale == s2 && *sign == -*g2 => {
                let w: T = rayleigh(rng);
                Ok((*loc + *sign * *scale * w, *loc + *g2 * *scale * w))
            }
            (CouplingKind::CommonBase, C::Gamma { shape, rate }, C::Gamma { shape: a2, rate: r2 })
                if rate == r2 && *a2 == *shape + T::one() =>
            {
                let xp = gamma_unit(*shape, rng) / *rate;
                Ok((xp, xp + rng.exponential::<T>() / *rate))
            }
            (
                CouplingKind::CommonBase,
                C::Weibull { shape, rate, loc },
                C::WeibullGammaPow { shape: a2, rate: r2, loc: l2 },
            ) if shape == a2 && rate == r2 && loc == l2 => {
                let y = rng.exponential::<T>() / *rate;
                let inv = T::one() / *shape;
                let ym = y + rng.exponential::<T>() / *rate;
                Ok((*loc + y.powf(inv), *loc + ym.powf(inv)))
            }
            (
                CouplingKind::CommonBase,
                C::PoissonShift { rate, shift },
                C::PoissonShift { rate: r2, shift: s2 },
            ) if rate == r2 => {
                let y = poisson_sample(*rate, rng);
                Ok((y + *shift, y + *s2))
            }
            _ => Err(self.incompatible(kind)),
        }
    }
}

impl<T: Real> fmt::Display for Measure<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Measure::Gaussian { mu, sigma } => write!(f, "gaussian(mu={mu},sigma={sigma})"),
            Measure::DiagGaussian { mu, sigma } => {
                let uniform = mu.iter().all(|m| *m == mu[0]) && sigma.iter().all(|s| *s == sigma[0]);
                if uniform {
                    write!(f, "diag_gaussian(mu={},sigma={},dim={})", mu[0], sigma[0], mu.len())
                } else {
                    write!(f, "diag_gaussian(dim={})", mu.len())
                }
            }
            Measure::Gamma { shape, rate } => write!(f, "gamma(shape={shape},rate={rate})"),
            Measure::Exponential { rate } => write!(f, "exponential(rate={rate})"),
            Measure::Weibull { shape, rate, loc } => {
                write!(f, "weibull(shape={shape},rate={rate},loc={loc})")
            }
            Measure::Poisson { rate } => write!(f, "poisson(rate={rate})"),
            Measure::Bernoulli { p } => write!(f, "bernoulli(p={p})"),
            Measure::Uniform { upper } => write!(f, "uniform(upper={upper})"),
            Measure::DoubleSidedMaxwell { mu, sigma } => write!(f, "maxwell(mu={mu},sigma={sigma})"),
            Measure::Erlang { k, rate } => write!(f, "erlang(k={k},rate={rate})"),
        }
    }
}
