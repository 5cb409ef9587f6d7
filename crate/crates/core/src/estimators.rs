//! Gradient estimators for `∇θ E_{p(x;θ)}[f(x)]`.
//!
//! Each estimator produces one contribution vector per sample; the reported
//! mean and variance are the sample mean and sample variance of those vectors.

use std::fmt;
use std::str::FromStr;

use crate::costs::Cost;
use crate::error::{Error, Result};
use crate::measures::{CouplingKind, Measure, PathJacobian};
use crate::moments::RunningMoments;
use crate::real::Real;
use crate::rng::RngStream;
use crate::special::{digamma, tetragamma, trigamma};
use crate::variance_reduction::{self, DeltaConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EstimatorId {
    ScoreFunction,
    Pathwise,
    PathwiseImplicit,
    MeasureValued,
    BonnetPrice,
    WeakReparam,
    RejectionReparam,
}

impl EstimatorId {
    pub const ALL: [EstimatorId; 7] = [
        EstimatorId::ScoreFunction,
        EstimatorId::Pathwise,
        EstimatorId::PathwiseImplicit,
        EstimatorId::MeasureValued,
        EstimatorId::BonnetPrice,
        EstimatorId::WeakReparam,
        EstimatorId::RejectionReparam,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorId::ScoreFunction => "score_function",
            EstimatorId::Pathwise => "pathwise",
            EstimatorId::PathwiseImplicit => "pathwise_implicit",
            EstimatorId::MeasureValued => "measure_valued",
            EstimatorId::BonnetPrice => "bonnet_price",
            EstimatorId::WeakReparam => "weak_reparam",
            EstimatorId::RejectionReparam => "rejection_reparam",
        }
    }

    /// Whether the estimator can run on `m` at all (cost derivatives aside).
    pub fn applicable<T: Real>(self, m: &Measure<T>) -> bool {
        let caps = m.capabilities();
        match self {
            EstimatorId::ScoreFunction => caps.has_score,
            EstimatorId::Pathwise => caps.has_path,
            EstimatorId::PathwiseImplicit => caps.has_cdf_grad,
            EstimatorId::MeasureValued => {
                caps.has_weak_derivative
                    && (0..m.n_params()).all(|i| m.weak_derivative_triple(i).is_ok())
            }
            EstimatorId::BonnetPrice => {
                matches!(m, Measure::Gaussian { .. } | Measure::DiagGaussian { .. })
            }
            EstimatorId::WeakReparam | EstimatorId::RejectionReparam => {
                matches!(m, Measure::Gamma { .. })
            }
        }
    }
}

impl fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorId::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = EstimatorId::ALL.iter().map(|e| e.as_str()).collect();
                Error::Config(format!(
                    "unknown estimator `{s}`; valid estimators are {}",
                    valid.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Baseline<T> {
    #[default]
    None,
    Constant(T),
    /// Exponentially decayed running average of the cost.
    MovingAverage { decay: T },
}

/// Running state for [`Baseline::MovingAverage`], kept across calls.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BaselineState<T> {
    value: Option<T>,
}

impl<T: Real> BaselineState<T> {
    pub fn new() -> Self {
        Self { value: None }
    }

    pub fn value(&self) -> Option<T> {
        self.value
    }

    /// Baseline for the next sample, before it is observed.
    fn current(&self, b: &Baseline<T>) -> T {
        match b {
            Baseline::None => T::zero(),
            Baseline::Constant(c) => *c,
            Baseline::MovingAverage { .. } => self.value.unwrap_or(T::zero()),
        }
    }

    fn observe(&mut self, b: &Baseline<T>, f: T) {
        if let Baseline::MovingAverage { decay } = b {
            self.value = Some(match self.value {
                None => f,
                Some(v) => *decay * v + (T::one() - *decay) * f,
            });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CouplingMode {
    #[default]
    Independent,
    /// Use the triple's own coupling scheme.
    Shared,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig<T> {
    pub n_samples: usize,
    pub baseline: Baseline<T>,
    pub coupling: CouplingMode,
    pub control_variate: Option<DeltaConfig>,
}

impl<T: Real> EstimatorConfig<T> {
    pub fn new(n_samples: usize) -> Self {
        Self {
            n_samples,
            baseline: Baseline::None,
            coupling: CouplingMode::Independent,
            control_variate: None,
        }
    }

    pub fn with_coupling(mut self, coupling: CouplingMode) -> Self {
        self.coupling = coupling;
        self
    }

    pub fn with_baseline(mut self, baseline: Baseline<T>) -> Self {
        self.baseline = baseline;
        self
    }

    pub fn with_delta(mut self, delta: DeltaConfig) -> Self {
        self.control_variate = Some(delta);
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate<T> {
    pub mean: Vec<T>,
    /// Sample variance of single-sample contributions, per parameter.
    pub variance: Vec<T>,
    /// Jackknife standard error of `variance`.
    pub variance_se: Vec<T>,
    pub n_samples: usize,
    pub n_cost_evals: usize,
}

impl<T: Real> GradientEstimate<T> {
    pub fn from_moments(acc: &[RunningMoments<T>], n_cost_evals: usize) -> Self {
        Self {
            mean: acc.iter().map(|a| a.mean()).collect(),
            variance: acc.iter().map(|a| a.variance()).collect(),
            variance_se: acc.iter().map(|a| a.variance_se()).collect(),
            n_samples: acc.first().map_or(0, |a| a.count()),
            n_cost_evals,
        }
    }

    /// Standard error of `mean[i]`.
    pub fn standard_error(&self, i: usize) -> T {
        if self.n_samples == 0 {
            return T::zero();
        }
        (self.variance[i] / T::from_usize_lossy(self.n_samples)).sqrt()
    }
}

/// Accumulates contribution vectors into per-parameter moments.
pub(crate) struct Accumulator<T> {
    pub moments: Vec<RunningMoments<T>>,
}

impl<T: Real> Accumulator<T> {
    pub fn new(d: usize) -> Self {
        Self {
            moments: vec![RunningMoments::new(); d],
        }
    }

    pub fn push(&mut self, row: &[T]) {
        for (m, &v) in self.moments.iter_mut().zip(row) {
            m.push(v);
        }
    }
}

type Sink<'a, T> = dyn FnMut(&[T]) + 'a;

fn require_grad<T: Real, C: Cost<T> + ?Sized>(f: &C, x: &[T]) -> Result<Vec<T>> {
    f.grad(x).ok_or_else(|| Error::MissingDerivative {
        cost: f.name(),
        what: "a gradient",
    })
}

fn require_hess<T: Real, C: Cost<T> + ?Sized>(f: &C, x: &[T]) -> Result<Vec<Vec<T>>> {
    f.hess(x).ok_or_else(|| Error::MissingDerivative {
        cost: f.name(),
        what: "a Hessian",
    })
}

fn capability<T: Real>(id: EstimatorId, m: &Measure<T>) -> Result<()> {
    if id.applicable(m) {
        Ok(())
    } else {
        Err(Error::capability(m.family(), format!("the {id} estimator")))
    }
}

/// Score-function contributions `(f(x) − b) ∇θ log p(x)`; returns cost evaluations.
pub fn score_function_contributions<T: Real, C: Cost<T> + ?Sized>(
    m: &Measure<T>,
    f: &C,
    baseline: &Baseline<T>,
    state: &mut BaselineState<T>,
    n: usize,
    rng: &mut RngStream,
    sink: &mut Sink<'_, T>,
) -> Result<usize> {
    capability(EstimatorId::ScoreFunction, m)?;
    let mut row = vec![T::zero(); m.n_params()];
    for _ in 0..n {
        let x = m.sample(rng);
        let fx = f.eval(&x);
        let w = fx - state.current(baseline);
        state.observe(baseline, fx);
        for (r, s) in row.iter_mut().zip(m.score(&x)?) {
            *r = w * s;
        }
        sink(&row);
    }
    Ok(n)
}

/// Pathwise contributions `γ(g(ε;θ)) · ∇θ g(ε;θ)`.
pub fn pathwise_contributions<T: Real, C: Cost<T> + ?Sized>(
    m: &Measure<T>,
    f: &C,
    n: usize,
    rng: &mut RngStream,
    sink: &mut Sink<'_, T>,
) -> Result<usize> {
    capability(EstimatorId::Pathwise, m)?;
    for _ in 0..n {
        let ps = m.path_sample(rng)?;
        let g = require_grad(f, &ps.x)?;
        sink(&ps.jacobian.vjp(&g));
    }
    Ok(n)
}

/// Implicit pathwise contributions `γ(x) · (−∇θF(x)/p(x))` for `x ~ p`.
pub fn implicit_contributions<T: Real, C: Cost<T> + ?Sized>(
    m: &Measure<T>,
    f: &C,
    n: usize,
    rng: &mut RngStream,
    sink: &mut Sink<'_, T>,
) -> Result<usize> {
    capability(EstimatorId::PathwiseImplicit, m)?;
    for _ in 0..n {
        let x = m.sample(rng);
        let g = require_grad(f, &x)?;
        let jac = PathJacobian::Univariate(m.implicit_jacobian(x[0])?);
        sink(&jac.vjp(&g));
    }
    Ok(n)
}

/// Measure-valued contributions `c_i (f(x⁺) − f(x⁻))` for every parameter.
///
/// Factorised measures perturb one coordinate and keep the others at a
/// regular sample shared across parameters.
pub fn measure_valued_contributions<T: Real, C: Cost<T> + ?Sized>(
    m: &Measure<T>,
    f: &C,
    coupling: CouplingMode,
    n: usize,
    rng: &mut RngStream,
    sink: &mut Sink<'_, T>,
) -> Result<usize> {
    capability(EstimatorId::MeasureValued, m)?;
    let d = m.n_params();
    let triples = (0..d)
        .map(|i| m.weak_derivative_triple(i))
        .collect::<Result<Vec<_>>>()?;
    let multivariate = m.dim() > 1;
    let mut row = vec![T::zero(); d];
    for _ in 0..n {
        let mut base = if multivariate { m.sample(rng) } else { vec![T::zero()] };
        for (r, t) in row.iter_mut().zip(&triples) {
            let kind = match coupling {
                CouplingMode::Independent => CouplingKind::Independent,
                CouplingMode::Shared => t.native_coupling,
            };
            let (xp, xm) = t.sample_pair(kind, rng)?;
            let coord = t.coordinate.unwrap_or(0);
            let keep = base[coord];
            base[coord] = xp;
            let fp = f.eval(&base);
            base[coord] = xm;
            let fm = f.eval(&base);
            base[coord] = keep;
            *r = t.c * (fp - fm);
        }
        sink(&row);
    }
    Ok(2 * n * d)
}

/// Bonnet (`∂μ = E[∂ₓf]`) and Price (`∂σ = σ E[∂²ₓf]`) contributions.
pub fn bonnet_price_contributions<T: Real, C: Cost<T> + ?Sized>(
    m: &Measure<T>,
    f: &C,
    n: usize,
    rng: &mut RngStream,
    sink: &mut Sink<'_, T>,
) -> Result<usize> {
    capability(EstimatorId::BonnetPrice, m)?;
    let sigma: Vec<T> = match m {
        Measure::Gaussian { sigma, .. } => vec![*sigma],
        Measure::DiagGaussian { sigma, .. } => sigma.clone(),
        _ => unreachable!(),
    };
    let mut row = Vec::with_capacity(2 * sigma.len());
    for _ in 0..n {
        let x = m.sample(rng);
        let g = require_grad(f, &x)?;
        let h = require_hess(f, &x)?;
        row.clear();
        row.extend_from_slice(&g);
        row.extend(sigma.iter().enumerate().map(|(d, &s)| s * h[d][d]));
        sink(&row);
    }
    Ok(n)
}

fn gamma_params<T: Real>(m: &Measure<T>, id: EstimatorId) -> Result<(T, T)> {
    match m {
        Measure::Gamma { shape, rate } => Ok((*shape, *rate)),
        _ => Err(Error::capability(m.family(), format!("the {id} estimator"))),
    }
}

/// Pathwise and score parts of the weak-reparameterisation hybrid at `x`,
/// for parameters `(shape, rate)`.
///
/// The standardisation `ε = (ln x − ψ(α) + ln β)/√ψ₁(α)` has a density that
/// depends on the shape only, so the rate's score part is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakReparamTerms<T> {
    pub eps: T,
    /// `∂x/∂α`, `∂x/∂β` at fixed `ε`.
    pub dx: [T; 2],
    /// `∂ log π(ε)/∂α`, `∂ log π(ε)/∂β`.
    pub score: [T; 2],
}

pub fn weak_reparam_terms<T: Real>(shape: T, rate: T, x: T) -> WeakReparamTerms<T> {
    let psi = digamma(shape);
    let psi1 = trigamma(shape);
    let psi2 = tetragamma(shape);
    let root = psi1.sqrt();
    let eps = ((x * rate).ln() - psi) / root;
    let dlog_x = eps * psi2 / (T::lit(2.0) * root) + psi1;
    let dx_shape = x * dlog_x;
    let log_p_shape = (rate * x).ln() - psi;
    let dlog_p_dx = (shape - T::one()) / x - rate;
    let score_shape = log_p_shape + dlog_p_dx * dx_shape + dlog_x + psi2 / (T::lit(2.0) * psi1);
    WeakReparamTerms {
        eps,
        dx: [dx_shape, -x / rate],
        score: [score_shape, T::zero()],
    }
}

/// Hybrid contributions `γ(x) ∂x/∂θ + f(x) ∂θ log π(ε; θ)` for a Gamma measure.
pub fn weak_reparam_contributions<T: Real, C: Cost<T> + ?Sized>(
    m: &Measure<T>,
    f: &C,
    n: usize,
    rng: &mut RngStream,
    sink: &mut Sink<'_, T>,
) -> Result<usize> {
    let (shape, rate) = gamma_params(m, EstimatorId::WeakReparam)?;
    let mut row = [T::zero(); 2];
    for _ in 0..n {
        let x = m.sample(rng);
        let g = require_grad(f, &x)?[0];
        let fx = f.eval(&x);
        let t = weak_reparam_terms(shape, rate, x[0]);
        for i in 0..2 {
            row[i] = g * t.dx[i] + fx * t.score[i];
        }
        sink(&row);
    }
    Ok(n)
}

/// Maximum proposals per accepted sample in the rejection-reparameterised sampler.
pub const REJECTION_CAP: usize = 100;

/// One accepted draw of the rejection-reparameterised Gamma sampler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RejectionDraw<T> {
    pub x: T,
    /// `∂x/∂α`, `∂x/∂β`.
    pub dx: [T; 2],
    /// `∂ log π(ε)/∂α` for the accepted-proposal density `π`.
    pub score_shape: T,
}

/// Marsaglia–Tsang proposal `h(ε, α) = (α − ⅓)(1 + ε/√(9α − 3))³` accepted
/// with its squeeze-free test; shapes below one are boosted by `U^{1/α}`.
pub fn rejection_draw<T: Real>(shape: T, rate: T, rng: &mut RngStream) -> Result<RejectionDraw<T>> {
    let boosted = shape < T::one();
    let a = if boosted { shape + T::one() } else { shape };
    let d = a - T::lit(1.0 / 3.0);
    let c = T::one() / (T::lit(3.0) * d.sqrt());
    let dc = -T::one() / (T::lit(6.0) * d * d.sqrt());
    for _ in 0..REJECTION_CAP {
        let e: T = rng.normal();
        let u: T = rng.uniform();
        let w = T::one() + c * e;
        if w <= T::zero() {
            continue;
        }
        let v = w * w * w;
        if u.ln() >= T::lit(0.5) * e * e + d - d * v + d * v.ln() {
            continue;
        }
        let h = d * v;
        let dh = v + T::lit(3.0) * d * w * w * e * dc;
        let score = h.ln() + ((a - T::one()) / h - T::one()) * dh - digamma(a)
            + T::lit(0.5) / d
            + T::lit(2.0) * e * dc / w;
        if !boosted {
            let x = h / rate;
            return Ok(RejectionDraw {
                x,
                dx: [dh / rate, -x / rate],
                score_shape: score,
            });
        }
        let ub: T = rng.uniform();
        let pw = ub.powf(T::one() / shape);
        let dpw = -pw * ub.ln() / (shape * shape);
        let x = h * pw / rate;
        return Ok(RejectionDraw {
            x,
            dx: [(dh * pw + h * dpw) / rate, -x / rate],
            score_shape: score,
        });
    }
    Err(Error::SamplerExhausted { cap: REJECTION_CAP })
}

/// Rejection-reparameterisation contributions for a Gamma measure.
pub fn rejection_reparam_contributions<T: Real, C: Cost<T> + ?Sized>(
    m: &Measure<T>,
    f: &C,
    n: usize,
    rng: &mut RngStream,
    sink: &mut Sink<'_, T>,
) -> Result<usize> {
    let (shape, rate) = gamma_params(m, EstimatorId::RejectionReparam)?;
    for _ in 0..n {
        let r = rejection_draw(shape, rate, rng)?;
        let x = [r.x];
        let g = require_grad(f, &x)?[0];
        let fx = f.eval(&x);
        sink(&[g * r.dx[0] + fx * r.score_shape, g * r.dx[1]]);
    }
    Ok(n)
}

/// Streams contributions of estimator `id` into `sink`; returns cost evaluations.
pub fn contributions<T: Real, C: Cost<T> + ?Sized>(
    id: EstimatorId,
    m: &Measure<T>,
    f: &C,
    cfg: &EstimatorConfig<T>,
    state: &mut BaselineState<T>,
    rng: &mut RngStream,
    sink: &mut Sink<'_, T>,
) -> Result<usize> {
    cfg.validate()?;
    let n = cfg.n_samples;
    if let Some(delta) = &cfg.control_variate {
        return match id {
            EstimatorId::ScoreFunction => {
                variance_reduction::delta_sf_contributions(m, f, delta, n, rng, sink)
            }
            EstimatorId::Pathwise => {
                variance_reduction::delta_pw_contributions(m, f, delta, n, rng, sink)
            }
            _ => Err(Error::Config(format!(
                "delta control variates apply to score_function and pathwise, not {id}"
            ))),
        };
    }
    match id {
        EstimatorId::ScoreFunction => {
            score_function_contributions(m, f, &cfg.baseline, state, n, rng, sink)
        }
        EstimatorId::Pathwise => pathwise_contributions(m, f, n, rng, sink),
        EstimatorId::PathwiseImplicit => implicit_contributions(m, f, n, rng, sink),
        EstimatorId::MeasureValued => {
            measure_valued_contributions(m, f, cfg.coupling, n, rng, sink)
        }
        EstimatorId::BonnetPrice => bonnet_price_contributions(m, f, n, rng, sink),
        EstimatorId::WeakReparam => weak_reparam_contributions(m, f, n, rng, sink),
        EstimatorId::RejectionReparam => rejection_reparam_contributions(m, f, n, rng, sink),
    }
}

/// Runs estimator `id` with a caller-held baseline state.
pub fn estimate_with_state<T: Real, C: Cost<T> + ?Sized>(
    id: EstimatorId,
    m: &Measure<T>,
    f: &C,
    cfg: &EstimatorConfig<T>,
    state: &mut BaselineState<T>,
    rng: &mut RngStream,
) -> Result<GradientEstimate<T>> {
    let mut acc = Accumulator::new(m.n_params());
    let evals = contributions(id, m, f, cfg, state, rng, &mut |row| acc.push(row))?;
    Ok(GradientEstimate::from_moments(&acc.moments, evals))
}

pub fn estimate<T: Real, C: Cost<T> + ?Sized>(
    id: EstimatorId,
    m: &Measure<T>,
    f: &C,
    cfg: &EstimatorConfig<T>,
    rng: &mut RngStream,
) -> Result<GradientEstimate<T>> {
    estimate_with_state(id, m, f, cfg, &mut BaselineState::new(), rng)
}

/// All contribution vectors of one run, for diagnostics and paired comparisons.
pub fn collect_contributions<T: Real, C: Cost<T> + ?Sized>(
    id: EstimatorId,
    m: &Measure<T>,
    f: &C,
    cfg: &EstimatorConfig<T>,
    rng: &mut RngStream,
) -> Result<Vec<Vec<T>>> {
    let mut rows = Vec::with_capacity(cfg.n_samples);
    contributions(id, m, f, cfg, &mut BaselineState::new(), rng, &mut |r| rows.push(r.to_vec()))?;
    Ok(rows)
}

pub fn score_function_grad<T: Real, C: Cost<T> + ?Sized>(
    m: &Measure<T>,
    f: &C,
    cfg: &EstimatorConfig<T>,
    rng: &mut RngStream,
) -> Result<GradientEstimate<T>> {
    estimate(EstimatorId::ScoreFunction, m, f, cfg, rng)
}

pub fn pathwise_grad<T: Real, C: Cost<T> + ?Sized>(
    m: &Measure<T>,
    f: &C,
    cfg: &EstimatorConfig<T>,
    rng: &mut RngStream,
) -> Result<GradientEstimate<T>> {
    estimate(EstimatorId::Pathwise, m, f, cfg, rng)
}

pub fn pathwise_implicit_grad<T: Real, C: Cost<T> + ?Sized>(
    m: &Measure<T>,
    f: &C,
    cfg: &EstimatorConfig<T>,
    rng: &mut RngStream,
) -> Result<GradientEstimate<T>> {
    estimate(EstimatorId::PathwiseImplicit, m, f, cfg, rng)
}

pub fn measure_valued_grad<T: Real, C: Cost<T> + ?Sized>(
    m: &Measure<T>,
    f: &C,
    cfg: &EstimatorConfig<T>,
    rng: &mut RngStream,
) -> Result<GradientEstimate<T>> {
    estimate(EstimatorId::MeasureValued, m, f, cfg, rng)
}

pub fn bonnet_price_grad<T: Real, C: Cost<T> + ?Sized>(
    m: &Measure<T>,
    f: &C,
    cfg: &EstimatorConfig<T>,
    rng: &mut RngStream,
) -> Result<GradientEstimate<T>> {
    estimate(EstimatorId::BonnetPrice, m, f, cfg, rng)
}

pub fn hybrid_weak_reparam_grad<T: Real, C: Cost<T> + ?Sized>(
    m: &Measure<T>,
    f: &C,
    cfg: &EstimatorConfig<T>,
    rng: &mut RngStream,
) -> Result<GradientEstimate<T>> {
    estimate(EstimatorId::WeakReparam, m, f, cfg, rng)
}

pub fn rejection_reparam_grad<T: Real, C: Cost<T> + ?Sized>(
    m: &Measure<T>,
    f: &C,
    cfg: &EstimatorConfig<T>,
    rng: &mut RngStream,
) -> Result<GradientEstimate<T>> {
    estimate(EstimatorId::RejectionReparam, m, f, cfg, rng)
}

/// Higher-order score `∇θ^{(k)} p / p`, `k ≤ 2`; a diagnostic.
pub fn higher_order_score<T: Real>(m: &Measure<T>, x: &[T], order: usize) -> Result<Vec<T>> {
    m.higher_order_score(x, order)
}
