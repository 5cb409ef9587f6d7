//! Control variates, delta-method controls and coupled weak-derivative sampling.

use crate::costs::Cost;
use crate::error::{Error, Result};
use crate::estimators::{Accumulator, GradientEstimate};
use crate::measures::{CouplingKind, Measure, WeakDerivativeTriple};
use crate::moments::RunningMoments;
use crate::real::Real;
use crate::rng::RngStream;

/// Settings for delta-method control variates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeltaConfig {
    /// Samples used to estimate the coefficient.
    pub cv_coeff_samples: usize,
    /// Draw the coefficient samples from a split stream instead of reusing
    /// the leading estimator samples.
    pub independent_split: bool,
}

impl Default for DeltaConfig {
    fn default() -> Self {
        Self {
            cv_coeff_samples: 25,
            independent_split: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Beta<T> {
    pub beta: T,
    /// `Var(h) = 0`; `beta` was set to zero.
    pub degenerate: bool,
}

fn check_pair<T>(f: &[T], h: &[T]) -> Result<()> {
    if f.len() != h.len() {
        return Err(Error::LengthMismatch {
            left: f.len(),
            right: h.len(),
        });
    }
    Ok(())
}

fn mean<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |a, &b| a + b) / T::from_usize_lossy(v.len())
}

/// `Cov(f, h)/Var(h)` from paired samples.
pub fn optimal_beta<T: Real>(f: &[T], h: &[T]) -> Result<Beta<T>> {
    check_pair(f, h)?;
    if f.len() < 2 {
        return Err(Error::InvalidParameter {
            name: "samples".into(),
            value: f.len() as f64,
            reason: "at least two samples are needed",
        });
    }
    let (mf, mh) = (mean(f), mean(h));
    let (mut cov, mut var) = (T::zero(), T::zero());
    for (&a, &b) in f.iter().zip(h) {
        cov = cov + (a - mf) * (b - mh);
        var = var + (b - mh) * (b - mh);
    }
    if var <= T::zero() {
        return Ok(Beta {
            beta: T::zero(),
            degenerate: true,
        });
    }
    Ok(Beta {
        beta: cov / var,
        degenerate: false,
    })
}

/// Mean and sample variance of `f − β(h − E[h])`.
pub fn linear_cv_estimate<T: Real>(f: &[T], h: &[T], eh: T, beta: T) -> Result<(T, T)> {
    check_pair(f, h)?;
    let mut m = RunningMoments::new();
    for (&a, &b) in f.iter().zip(h) {
        m.push(a - beta * (b - eh));
    }
    Ok((m.mean(), m.variance()))
}

/// Least-squares coefficients for several controls: solves `Σ_hh β = Σ_hf`.
pub fn optimal_beta_multi<T: Real>(f: &[T], hs: &[Vec<T>]) -> Result<Vec<T>> {
    for h in hs {
        check_pair(f, h)?;
    }
    let k = hs.len();
    let mf = mean(f);
    let mh: Vec<T> = hs.iter().map(|h| mean(h)).collect();
    let mut a = vec![vec![T::zero(); k + 1]; k];
    for n in 0..f.len() {
        for i in 0..k {
            let di = hs[i][n] - mh[i];
            for j in 0..k {
                a[i][j] = a[i][j] + di * (hs[j][n] - mh[j]);
            }
            a[i][k] = a[i][k] + di * (f[n] - mf);
        }
    }
    solve(a).ok_or_else(|| Error::InvalidParameter {
        name: "controls".into(),
        value: k as f64,
        reason: "control covariance matrix is singular",
    })
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn solve<T: Real>(mut a: Vec<Vec<T>>) -> Option<Vec<T>> {
    let k = a.len();
    for c in 0..k {
        let p = (c..k).max_by(|&i, &j| a[i][c].abs().partial_cmp(&a[j][c].abs()).unwrap())?;
        if a[p][c].abs() <= T::epsilon() {
            return None;
        }
        a.swap(c, p);
        for r in c + 1..k {
            let q = a[r][c] / a[c][c];
            for j in c..=k {
                a[r][j] = a[r][j] - q * a[c][j];
            }
        }
    }
    let mut x = vec![T::zero(); k];
    for r in (0..k).rev() {
        let s = (r + 1..k).fold(a[r][k], |s, j| s - a[r][j] * x[j]);
        x[r] = s / a[r][r];
    }
    Some(x)
}

/// Mean and variance of `f − Σ_j β_j (h_j − E[h_j])`.
pub fn multiple_cv_estimate<T: Real>(
    f: &[T],
    hs: &[Vec<T>],
    ehs: &[T],
    betas: &[T],
) -> Result<(T, T)> {
    if hs.len() != ehs.len() || hs.len() != betas.len() {
        return Err(Error::LengthMismatch {
            left: hs.len(),
            right: ehs.len().min(betas.len()),
        });
    }
    for h in hs {
        check_pair(f, h)?;
    }
    let mut m = RunningMoments::new();
    for n in 0..f.len() {
        let adj = (0..hs.len()).fold(T::zero(), |s, j| s + betas[j] * (hs[j][n] - ehs[j]));
        m.push(f[n] - adj);
    }
    Ok((m.mean(), m.variance()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MultiplicativeForm {
    /// `f̄ · E[h]/h̄`
    Ratio,
    /// `f̄^{h̄/E[h]}`
    Power,
    /// `f̄ · exp(E[h] − h̄)`
    Exp,
}

/// Multiplicative control estimate on sample means. Consistent but biased;
/// the bias is `O(1/N)`.
pub fn multiplicative_cv_estimate<T: Real>(
    f: &[T],
    h: &[T],
    eh: T,
    form: MultiplicativeForm,
) -> Result<T> {
    check_pair(f, h)?;
    if f.is_empty() {
        return Err(Error::InvalidParameter {
            name: "samples".into(),
            value: 0.0,
            reason: "at least one sample is needed",
        });
    }
    let domain = |x: T, support: &'static str| Error::Domain {
        family: "multiplicative control",
        x: x.as_f64(),
        support,
    };
    let (mf, mh) = (mean(f), mean(h));
    match form {
        MultiplicativeForm::Ratio => {
            if let Some(&bad) = h.iter().find(|&&v| v <= T::zero()) {
                return Err(domain(bad, "h > 0"));
            }
            Ok(mf * eh / mh)
        }
        MultiplicativeForm::Power => {
            if let Some(&bad) = f.iter().find(|&&v| v <= T::zero()) {
                return Err(domain(bad, "f > 0"));
            }
            if eh == T::zero() {
                return Err(domain(eh, "E[h] ≠ 0"));
            }
            Ok(mf.powf(mh / eh))
        }
        MultiplicativeForm::Exp => Ok(mf * (eh - mh).exp()),
    }
}

/// Taylor expansion of a cost about `center`, of order one or two.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorControl<T> {
    pub center: Vec<T>,
    pub value: T,
    pub grad: Vec<T>,
    /// Present for second-order expansions.
    pub hess: Option<Vec<Vec<T>>>,
}

impl<T: Real> TaylorControl<T> {
    pub fn new<C: Cost<T> + ?Sized>(f: &C, center: &[T], order: usize) -> Result<Self> {
        if !(1..=2).contains(&order) {
            return Err(Error::InvalidParameter {
                name: "order".into(),
                value: order as f64,
                reason: "Taylor controls have order 1 or 2",
            });
        }
        let grad = f.grad(center).ok_or_else(|| Error::MissingDerivative {
            cost: f.name(),
            what: "a gradient",
        })?;
        let hess = if order == 2 {
            Some(f.hess(center).ok_or_else(|| Error::MissingDerivative {
                cost: f.name(),
                what: "a Hessian",
            })?)
        } else {
            None
        };
        Ok(Self {
            center: center.to_vec(),
            value: f.eval(center),
            grad,
            hess,
        })
    }

    fn delta(&self, x: &[T]) -> Vec<T> {
        x.iter().zip(&self.center).map(|(&a, &c)| a - c).collect()
    }

    /// Gaussian mean and standard deviations of `m`, if it is Gaussian.
    fn gaussian_parts(m: &Measure<T>) -> Result<(Vec<T>, Vec<T>)> {
        match m {
            Measure::Gaussian { mu, sigma } => Ok((vec![*mu], vec![*sigma])),
            Measure::DiagGaussian { mu, sigma } => Ok((mu.clone(), sigma.clone())),
            _ => Err(Error::capability(m.family(), "analytic Taylor-control expectations")),
        }
    }

    /// `E_m[h]` for a Gaussian `m`.
    pub fn expectation(&self, m: &Measure<T>) -> Result<T> {
        let (mu, sigma) = Self::gaussian_parts(m)?;
        let d = self.delta(&mu);
        let mut e = self.value + dot(&self.grad, &d);
        if let Some(h) = &self.hess {
            let half = T::lit(0.5);
            e = e + half * quad(h, &d);
            for (i, s) in sigma.iter().enumerate() {
                e = e + half * h[i][i] * *s * *s;
            }
        }
        Ok(e)
    }

    /// `∇θ E_m[h]`, ordered as `m.params()`, with the expansion point held fixed.
    pub fn grad_expectation(&self, m: &Measure<T>) -> Result<Vec<T>> {
        let (mu, sigma) = Self::gaussian_parts(m)?;
        let d = self.delta(&mu);
        let mut out = self.grad.clone();
        out.extend(std::iter::repeat(T::zero()).take(sigma.len()));
        if let Some(h) = &self.hess {
            let n = sigma.len();
            for i in 0..n {
                out[i] = out[i] + dot(&h[i], &d);
                out[n + i] = h[i][i] * sigma[i];
            }
        }
        Ok(out)
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

fn quad<T: Real>(h: &[Vec<T>], d: &[T]) -> T {
    h.iter().zip(d).fold(T::zero(), |s, (row, &di)| s + di * dot(row, d))
}

impl<T: Real> Cost<T> for TaylorControl<T> {
    fn name(&self) -> String {
        format!("taylor{}", if self.hess.is_some() { 2 } else { 1 })
    }

    fn eval(&self, x: &[T]) -> T {
        let d = self.delta(x);
        let mut v = self.value + dot(&self.grad, &d);
        if let Some(h) = &self.hess {
            v = v + T::lit(0.5) * quad(h, &d);
        }
        v
    }

    fn grad(&self, x: &[T]) -> Option<Vec<T>> {
        let mut g = self.grad.clone();
        if let Some(h) = &self.hess {
            let d = self.delta(x);
            for (gi, row) in g.iter_mut().zip(h) {
                *gi = *gi + dot(row, &d);
            }
        }
        Some(g)
    }

    fn hess(&self, _x: &[T]) -> Option<Vec<Vec<T>>> {
        let n = self.center.len();
        Some(self.hess.clone().unwrap_or_else(|| vec![vec![T::zero(); n]; n]))
    }
}

/// A control `h` with its analytic expectation under a measure and coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlVariate<T> {
    pub h: TaylorControl<T>,
    pub expectation: T,
    pub grad_expectation: Vec<T>,
    /// One coefficient per gradient component.
    pub beta: Vec<T>,
}

impl<T: Real> ControlVariate<T> {
    /// Second-order Taylor control of `f` about `center` (the mean of `m` if `None`).
    pub fn delta<C: Cost<T> + ?Sized>(m: &Measure<T>, f: &C, center: Option<&[T]>) -> Result<Self> {
        let (mu, _) = TaylorControl::gaussian_parts(m)?;
        let h = TaylorControl::new(f, center.unwrap_or(&mu), 2)?;
        Ok(Self {
            expectation: h.expectation(m)?,
            grad_expectation: h.grad_expectation(m)?,
            beta: vec![T::zero(); m.n_params()],
            h,
        })
    }
}

/// Per-sample terms `(a, b)` where `a` is the plain estimator contribution and
/// `b` the same estimator applied to the control.
type Terms<T> = (Vec<T>, Vec<T>);

fn sf_terms<T: Real, C: Cost<T> + ?Sized>(
    m: &Measure<T>,
    f: &C,
    h: &TaylorControl<T>,
    rng: &mut RngStream,
) -> Result<Terms<T>> {
    let x = m.sample(rng);
    let s = m.score(&x)?;
    let (fx, hx) = (f.eval(&x), h.eval(&x));
    Ok((s.iter().map(|&v| fx * v).collect(), s.iter().map(|&v| hx * v).collect()))
}

fn pw_terms<T: Real, C: Cost<T> + ?Sized>(
    m: &Measure<T>,
    f: &C,
    h: &TaylorControl<T>,
    rng: &mut RngStream,
) -> Result<Terms<T>> {
    let ps = m.path_sample(rng)?;
    let g = f.grad(&ps.x).ok_or_else(|| Error::MissingDerivative {
        cost: f.name(),
        what: "a gradient",
    })?;
    let gh = h.grad(&ps.x).expect("Taylor controls have gradients");
    Ok((ps.jacobian.vjp(&g), ps.jacobian.vjp(&gh)))
}

fn delta_contributions<T: Real, C: Cost<T> + ?Sized>(
    m: &Measure<T>,
    f: &C,
    center: Option<&[T]>,
    cfg: &DeltaConfig,
    n: usize,
    rng: &mut RngStream,
    terms: fn(&Measure<T>, &C, &TaylorControl<T>, &mut RngStream) -> Result<Terms<T>>,
    sink: &mut dyn FnMut(&[T]),
) -> Result<usize> {
    if cfg.cv_coeff_samples < 2 {
        return Err(Error::Config("cv_coeff_samples must be at least 2".into()));
    }
    let mut cv = ControlVariate::delta(m, f, center)?;
    let d = m.n_params();
    let mut aux = if cfg.independent_split {
        rng.split(0xc0ef)
    } else {
        rng.clone()
    };
    let (mut a, mut b) = (vec![Vec::new(); d], vec![Vec::new(); d]);
    for _ in 0..cfg.cv_coeff_samples {
        let (ai, bi) = terms(m, f, &cv.h, &mut aux)?;
        for i in 0..d {
            a[i].push(ai[i]);
            b[i].push(bi[i]);
        }
    }
    for i in 0..d {
        cv.beta[i] = optimal_beta(&a[i], &b[i])?.beta;
    }
    let mut row = vec![T::zero(); d];
    for _ in 0..n {
        let (ai, bi) = terms(m, f, &cv.h, rng)?;
        for i in 0..d {
            row[i] = ai[i] - cv.beta[i] * (bi[i] - cv.grad_expectation[i]);
        }
        sink(&row);
    }
    let aux_evals = if cfg.independent_split { cfg.cv_coeff_samples } else { 0 };
    Ok(n + aux_evals)
}

/// Delta-method score-function contributions, expanded about the measure mean.
pub fn delta_sf_contributions<T: Real, C: Cost<T> + ?Sized>(
    m: &Measure<T>,
    f: &C,
    cfg: &DeltaConfig,
    n: usize,
    rng: &mut RngStream,
    sink: &mut dyn FnMut(&[T]),
) -> Result<usize> {
    delta_contributions(m, f, None, cfg, n, rng, sf_terms::<T, C>, sink)
}

/// Delta-method pathwise contributions, expanded about the measure mean.
pub fn delta_pw_contributions<T: Real, C: Cost<T> + ?Sized>(
    m: &Measure<T>,
    f: &C,
    cfg: &DeltaConfig,
    n: usize,
    rng: &mut RngStream,
    sink: &mut dyn FnMut(&[T]),
) -> Result<usize> {
    delta_contributions(m, f, None, cfg, n, rng, pw_terms::<T, C>, sink)
}

fn run_delta<T: Real, C: Cost<T> + ?Sized>(
    m: &Measure<T>,
    f: &C,
    center: Option<&[T]>,
    cfg: &DeltaConfig,
    n: usize,
    rng: &mut RngStream,
    terms: fn(&Measure<T>, &C, &TaylorControl<T>, &mut RngStream) -> Result<Terms<T>>,
) -> Result<GradientEstimate<T>> {
    let mut acc = Accumulator::new(m.n_params());
    let evals = delta_contributions(m, f, center, cfg, n, rng, terms, &mut |r| acc.push(r))?;
    Ok(GradientEstimate::from_moments(&acc.moments, evals))
}

/// Score-function estimate with a second-order Taylor control about `center`.
pub fn delta_cv_score_function<T: Real, C: Cost<T> + ?Sized>(
    m: &Measure<T>,
    f: &C,
    center: Option<&[T]>,
    cfg: &DeltaConfig,
    n: usize,
    rng: &mut RngStream,
) -> Result<GradientEstimate<T>> {
    run_delta(m, f, center, cfg, n, rng, sf_terms::<T, C>)
}

/// Pathwise estimate with a second-order Taylor control about `center`.
pub fn delta_cv_pathwise<T: Real, C: Cost<T> + ?Sized>(
    m: &Measure<T>,
    f: &C,
    center: Option<&[T]>,
    cfg: &DeltaConfig,
    n: usize,
    rng: &mut RngStream,
) -> Result<GradientEstimate<T>> {
    run_delta(m, f, center, cfg, n, rng, pw_terms::<T, C>)
}

/// Draws `(x⁺, x⁻)` from a triple under the requested coupling.
pub fn coupled_triple_samples<T: Real>(
    triple: &WeakDerivativeTriple<T>,
    kind: CouplingKind,
    rng: &mut RngStream,
) -> Result<(T, T)> {
    triple.sample_pair(kind, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::StandardCost;
    use crate::estimators::{estimate, EstimatorConfig, EstimatorId};
    use crate::special::norm_cdf;
    use proptest::prelude::*;

    type M = Measure<f64>;

    fn normals(seed: u64, n: usize) -> Vec<f64> {
        let mut r = RngStream::new(seed);
        (0..n).map(|_| r.normal()).collect()
    }

    #[test]
    fn beta_examples() {
        let f = normals(1, 1000);
        assert!((optimal_beta(&f, &f).unwrap().beta - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = f.iter().map(|v| -v).collect();
        assert!((optimal_beta(&f, &neg).unwrap().beta + 1.0).abs() < 1e-12);
        let f = normals(2, 10_000);
        let h = normals(3, 10_000);
        assert!(optimal_beta(&f, &h).unwrap().beta.abs() < 0.05);
        let b = optimal_beta(&f[..10], &[1.0; 10]).unwrap();
        assert!(b.degenerate && b.beta == 0.0);
        assert!(matches!(optimal_beta(&f[..3], &h[..4]), Err(Error::LengthMismatch { .. })));
        assert!(optimal_beta(&f[..1], &h[..1]).is_err());
    }

    #[test]
    fn linear_cv_examples() {
        let f = normals(4, 500);
        let (plain, _) = linear_cv_estimate(&f, &f, 0.0, 0.0).unwrap();
        assert!((plain - mean(&f)).abs() < 1e-15);
        let (est, var) = linear_cv_estimate(&f, &f, 0.0, 1.0).unwrap();
        assert!(est.abs() < 1e-15 && var < 1e-28);
    }

    #[test]
    fn first_order_taylor_variance_law() {
        // f = exp(x) under N(0, 0.5²), h = 1 + x.
        let mut r = RngStream::new(5);
        let xs: Vec<f64> = (0..20_000).map(|_| 0.5 * r.normal::<f64>()).collect();
        let f: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        let h: Vec<f64> = xs.iter().map(|x| 1.0 + x).collect();
        let beta = optimal_beta(&f, &h).unwrap().beta;
        let (_, v) = linear_cv_estimate(&f, &h, 1.0, beta).unwrap();
        let (_, v0) = linear_cv_estimate(&f, &h, 1.0, 0.0).unwrap();
        let mf = mean(&f);
        let mh = mean(&h);
        let cov: f64 = f.iter().zip(&h).map(|(a, b)| (a - mf) * (b - mh)).sum::<f64>();
        let vf: f64 = f.iter().map(|a| (a - mf).powi(2)).sum::<f64>();
        let vh: f64 = h.iter().map(|b| (b - mh).powi(2)).sum::<f64>();
        let rho2 = cov * cov / (vf * vh);
        assert!((v / v0 - (1.0 - rho2)).abs() < 0.1);
    }

    #[test]
    fn multiple_controls_recover_linear_combination() {
        let h1 = normals(6, 2000);
        let h2 = normals(7, 2000);
        let f: Vec<f64> = h1.iter().zip(&h2).map(|(a, b)| 2.0 * a - 3.0 * b + 5.0).collect();
        let hs = vec![h1, h2];
        let b = optimal_beta_multi(&f, &hs).unwrap();
        assert!((b[0] - 2.0).abs() < 1e-9 && (b[1] + 3.0).abs() < 1e-9);
        let (est, var) = multiple_cv_estimate(&f, &hs, &[0.0, 0.0], &b).unwrap();
        assert!((est - 5.0).abs() < 1e-9 && var < 1e-18);
        let same = vec![hs[0].clone(), hs[0].clone()];
        assert!(optimal_beta_multi(&f, &same).is_err());
    }

    #[test]
    fn multiplicative_examples() {
        let f: Vec<f64> = normals(8, 100).iter().map(|v| v.exp()).collect();
        let c = vec![2.0; 100];
        for form in [MultiplicativeForm::Ratio, MultiplicativeForm::Power, MultiplicativeForm::Exp] {
            let e = multiplicative_cv_estimate(&f, &c, 2.0, form).unwrap();
            assert!((e - mean(&f)).abs() < 1e-12, "{form:?}");
        }
        let e = multiplicative_cv_estimate(&f, &f, 1.7, MultiplicativeForm::Ratio).unwrap();
        assert!((e - 1.7).abs() < 1e-12);
        let neg = vec![-1.0; 100];
        assert!(multiplicative_cv_estimate(&f, &neg, 1.0, MultiplicativeForm::Ratio).is_err());
        assert!(multiplicative_cv_estimate(&neg, &f, 1.0, MultiplicativeForm::Power).is_err());
    }

    #[test]
    fn exp_form_bias_shrinks() {
        // f = h = x under N(0,1), E[h] = 0: the estimate is x̄ exp(−x̄).
        let mut r = RngStream::new(9);
        let bias = |n: usize, reps: usize, r: &mut RngStream| {
            let mut acc = 0.0;
            for _ in 0..reps {
                let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
                acc += multiplicative_cv_estimate(&xs, &xs, 0.0, MultiplicativeForm::Exp).unwrap();
            }
            acc / reps as f64
        };
        let b1 = bias(1, 200_000, &mut r);
        let b2 = bias(10_000, 400, &mut r);
        // E[x e^{−x}] = −e^{1/2} for one sample.
        assert!((b1 + 0.5f64.exp()).abs() < 0.05);
        assert!(b2.abs() * 10.0 < b1.abs());
    }

    #[test]
    fn taylor_expectations_match_quadrature() {
        let f = StandardCost::Cos(1.3);
        for &(mu, sigma, c) in &[(1.0, 1.0, 1.0), (0.3, 0.7, -0.5), (-1.0, 2.0, 0.0)] {
            let m = M::gaussian(mu, sigma).unwrap();
            let h = TaylorControl::new(&f, &[c], 2).unwrap();
            // Simpson on ±12σ.
            let n = 4000;
            let (a, b) = (mu - 12.0 * sigma, mu + 12.0 * sigma);
            let step = (b - a) / n as f64;
            let mut q = 0.0;
            for i in 0..=n {
                let x = a + i as f64 * step;
                let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                q += w * h.eval(&[x]) * m.prob(&[x]).unwrap();
            }
            q *= step / 3.0;
            assert!((h.expectation(&m).unwrap() - q).abs() < 1e-5);
            let g = h.grad_expectation(&m).unwrap();
            let eps = 1e-5;
            for i in 0..2 {
                let p = m.params().values[i];
                let up = h.expectation(&m.with_param(i, p + eps).unwrap()).unwrap();
                let dn = h.expectation(&m.with_param(i, p - eps).unwrap()).unwrap();
                assert!((g[i] - (up - dn) / (2.0 * eps)).abs() < 1e-6);
            }
        }
        let e = TaylorControl::new(&f, &[0.0], 2).unwrap().expectation(&M::gamma(2.0, 1.0).unwrap());
        assert!(matches!(e, Err(Error::Capability { .. })));
    }

    #[test]
    fn taylor_of_quadratic_is_exact() {
        let f = StandardCost::Quadratic(0.7f64);
        let h = TaylorControl::new(&f, &[0.2, -1.0], 2).unwrap();
        for x in [[0.0, 0.0], [3.0, -2.0], [-1.5, 4.0]] {
            assert!((h.eval(&x) - f.eval(&x)).abs() < 1e-12);
            let (a, b) = (h.grad(&x).unwrap(), f.grad(&x).unwrap());
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
        assert!(TaylorControl::new(&f, &[0.0], 3).is_err());
    }

    #[test]
    fn delta_on_quadratic_has_no_residual_variance() {
        let m = M::diag_gaussian(vec![0.5, -0.2], vec![1.0, 2.0]).unwrap();
        let f = StandardCost::Quadratic(1.0);
        let cfg = DeltaConfig::default();
        let sf = delta_cv_score_function(&m, &f, None, &cfg, 2000, &mut RngStream::new(10)).unwrap();
        let pw = delta_cv_pathwise(&m, &f, None, &cfg, 2000, &mut RngStream::new(11)).unwrap();
        let truth = [2.0 * (0.5 - 1.0), 2.0 * (-0.2 - 1.0), 2.0, 4.0];
        for i in 0..4 {
            assert!(sf.variance[i] < 1e-18, "{:?}", sf.variance);
            assert!(pw.variance[i] < 1e-18);
            assert!((sf.mean[i] - truth[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn delta_unbiased_on_exp_cost() {
        let (mu, sigma, k) = (1.0f64, 1.0f64, 1.0f64);
        let m = M::gaussian(mu, sigma).unwrap();
        let f = StandardCost::Exp(k);
        // E[exp(−kx²)] = exp(−kμ²/(1+2kσ²))/√(1+2kσ²).
        let e = |mu: f64, s: f64| {
            let a = 1.0 + 2.0 * k * s * s;
            (-k * mu * mu / a).exp() / a.sqrt()
        };
        let h = 1e-5;
        let truth = [(e(mu + h, sigma) - e(mu - h, sigma)) / (2.0 * h), (e(mu, sigma + h) - e(mu, sigma - h)) / (2.0 * h)];
        let cfg = DeltaConfig::default();
        let sf = delta_cv_score_function(&m, &f, None, &cfg, 20_000, &mut RngStream::new(12)).unwrap();
        for i in 0..2 {
            assert!((sf.mean[i] - truth[i]).abs() <= 4.0 * sf.standard_error(i), "{i}: {} vs {}", sf.mean[i], truth[i]);
        }
    }

    #[test]
    fn delta_sf_and_pw_agree_on_cos() {
        let m = M::gaussian(0.4, 0.8).unwrap();
        let f = StandardCost::Cos(1.5);
        let cfg = DeltaConfig { cv_coeff_samples: 25, independent_split: true };
        let sf = delta_cv_score_function(&m, &f, None, &cfg, 20_000, &mut RngStream::new(13)).unwrap();
        let pw = delta_cv_pathwise(&m, &f, None, &cfg, 20_000, &mut RngStream::new(14)).unwrap();
        for i in 0..2 {
            let se = (sf.standard_error(i).powi(2) + pw.standard_error(i).powi(2)).sqrt();
            assert!((sf.mean[i] - pw.mean[i]).abs() <= 4.0 * se);
        }
        assert_eq!(sf.n_cost_evals, 20_025);
    }

    #[test]
    fn delta_via_estimator_config() {
        let m = M::gaussian(0.0, 1.0).unwrap();
        let f = StandardCost::Cos(1.0);
        let cfg = EstimatorConfig::new(100).with_delta(DeltaConfig::default());
        let a = estimate(EstimatorId::ScoreFunction, &m, &f, &cfg, &mut RngStream::new(1)).unwrap();
        let b = delta_cv_score_function(&m, &f, None, &DeltaConfig::default(), 100, &mut RngStream::new(1)).unwrap();
        assert_eq!(a, b);
        assert!(estimate(EstimatorId::MeasureValued, &m, &f, &cfg, &mut RngStream::new(1)).is_err());
        struct GradOnly;
        impl Cost<f64> for GradOnly {
            fn name(&self) -> String {
                "grad_only".into()
            }
            fn eval(&self, x: &[f64]) -> f64 {
                x[0].sin()
            }
            fn grad(&self, x: &[f64]) -> Option<Vec<f64>> {
                Some(vec![x[0].cos()])
            }
        }
        let e = delta_cv_pathwise(&m, &GradOnly, None, &DeltaConfig::default(), 10, &mut RngStream::new(1));
        assert!(matches!(e, Err(Error::MissingDerivative { .. })));
    }

    #[test]
    fn weibull_shared_linear_example() {
        let (mu, sigma) = (0.5, 1.5);
        let m = M::gaussian(mu, sigma).unwrap();
        let t = m.weak_derivative_triple(0).unwrap();
        let mut rng = RngStream::new(15);
        let mut acc = RunningMoments::new();
        for _ in 0..20_000 {
            let (xp, xm) = coupled_triple_samples(&t, CouplingKind::WeibullShared, &mut rng).unwrap();
            let w = (xp - mu) / sigma;
            assert!(((xp - xm) - 2.0 * sigma * w).abs() < 1e-12);
            acc.push(t.c * (xp - xm));
        }
        // The mean of W(2, 0.5) is √(2π)/2 by quadrature; c·2σ·E[w] = 1.
        assert!((acc.mean() - 1.0).abs() < 4.0 * acc.standard_error());
    }

    #[test]
    fn maxwell_gaussian_marginal_is_normal() {
        let m = M::gaussian(0.0, 1.0).unwrap();
        let t = m.weak_derivative_triple(1).unwrap();
        let mut rng = RngStream::new(16);
        let mut xs: Vec<f64> = (0..10_000)
            .map(|_| coupled_triple_samples(&t, CouplingKind::MaxwellGaussian, &mut rng).unwrap().1)
            .collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let c = norm_cdf(x);
                (c - i as f64 / n).abs().max((c - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 1.63 / n.sqrt(), "KS {d}");
        let e = coupled_triple_samples(&t, CouplingKind::WeibullShared, &mut rng);
        assert!(e.is_err());
    }

    #[test]
    fn independent_coupling_has_no_covariance() {
        let m = M::gaussian(0.0, 1.0).unwrap();
        let t = m.weak_derivative_triple(0).unwrap();
        let mut rng = RngStream::new(17);
        let pairs: Vec<(f64, f64)> = (0..20_000)
            .map(|_| coupled_triple_samples(&t, CouplingKind::Independent, &mut rng).unwrap())
            .collect();
        let p: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let q: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let r = optimal_beta(&p, &q).unwrap().beta;
        assert!(r.abs() < 0.05);
    }

    proptest! {
        #[test]
        fn linear_cv_unbiased_for_fixed_beta(beta in -3.0f64..3.0, seed in 0u64..500) {
            let x = normals(seed, 200);
            let f: Vec<f64> = x.iter().map(|v| v * v).collect();
            let (est, _) = linear_cv_estimate(&f, &x, 0.0, beta).unwrap();
            let (plain, _) = linear_cv_estimate(&f, &x, 0.0, 0.0).unwrap();
            prop_assert!((est - plain + beta * mean(&x)).abs() < 1e-10);
        }

        #[test]
        fn beta_sign_symmetry(seed in 0u64..500) {
            let f = normals(seed, 50);
            let h: Vec<f64> = normals(seed + 1, 50).iter().zip(&f).map(|(a, b)| a + b).collect();
            let neg: Vec<f64> = h.iter().map(|v| -v).collect();
            let b1 = optimal_beta(&f, &h).unwrap().beta;
            let b2 = optimal_beta(&f, &neg).unwrap().beta;
            prop_assert!((b1 + b2).abs() < 1e-10);
        }
    }
}
