//! Cost functions `f(x)` with analytic gradients and Hessians.

use std::fmt;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::special::{log_sigmoid, sigmoid};
use crate::text;

pub trait Cost<T: Real> {
    fn name(&self) -> String;

    fn eval(&self, x: &[T]) -> T;

    /// `γ(x) = ∇ₓ f`, if available.
    fn grad(&self, _x: &[T]) -> Option<Vec<T>> {
        None
    }

    /// `H(x) = ∇²ₓ f`, if available.
    fn hess(&self, _x: &[T]) -> Option<Vec<Vec<T>>> {
        None
    }

    fn lipschitz_hint(&self) -> Option<T> {
        None
    }

    /// The cost as a [`StandardCost`], when it is one.
    fn as_standard(&self) -> Option<&StandardCost<T>> {
        None
    }
}

/// Sums over coordinates, except [`StandardCost::Constant`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StandardCost<T> {
    /// `Σ (x_d − k)²`
    Quadratic(T),
    /// `Σ exp(−k x_d²)`
    Exp(T),
    /// `Σ cos(k x_d)`
    Cos(T),
    Constant(T),
    /// `Σ x_d`
    LinearSum,
    /// `Σ x_d⁴`
    FourthPower,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostKind {
    Quadratic,
    Exp,
    Cos,
    Constant,
    LinearSum,
    FourthPower,
}

impl CostKind {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "quadratic" => CostKind::Quadratic,
            "exp" => CostKind::Exp,
            "cos" => CostKind::Cos,
            "constant" => CostKind::Constant,
            "linear_sum" | "linear" => CostKind::LinearSum,
            "fourth_power" => CostKind::FourthPower,
            other => {
                return Err(Error::Config(format!(
                    "unknown cost `{other}`; expected one of quadratic, exp, cos, constant, linear_sum, fourth_power"
                )))
            }
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CostKind::Quadratic => "quadratic",
            CostKind::Exp => "exp",
            CostKind::Cos => "cos",
            CostKind::Constant => "constant",
            CostKind::LinearSum => "linear_sum",
            CostKind::FourthPower => "fourth_power",
        }
    }

    /// Whether the kind takes a scalar (`k`, or `c` for constants).
    pub fn takes_scalar(self) -> bool {
        !matches!(self, CostKind::LinearSum | CostKind::FourthPower)
    }
}

/// Builds a standard cost; `k` is the constant's value for [`CostKind::Constant`].
pub fn make_cost<T: Real>(kind: CostKind, k: Option<T>) -> Result<StandardCost<T>> {
    let need = || Error::Config(format!("cost `{}` requires parameter k", kind.as_str()));
    Ok(match kind {
        CostKind::Quadratic => StandardCost::Quadratic(k.ok_or_else(need)?),
        CostKind::Exp => StandardCost::Exp(k.ok_or_else(need)?),
        CostKind::Cos => StandardCost::Cos(k.ok_or_else(need)?),
        CostKind::Constant => StandardCost::Constant(k.ok_or_else(need)?),
        CostKind::LinearSum => StandardCost::LinearSum,
        CostKind::FourthPower => StandardCost::FourthPower,
    })
}

impl<T: Real> StandardCost<T> {
    /// Parses `quadratic(k=3)`, `constant(c=100)`, `linear_sum`, ...
    pub fn parse(spec: &str) -> Result<Self> {
        let mut call = text::parse_call(spec)?;
        let kind = CostKind::parse(&call.name)?;
        let keys: &[&str] = if kind == CostKind::Constant { &["c", "k"] } else { &["k"] };
        let k = if kind.takes_scalar() {
            call.take(keys).map(T::lit)
        } else {
            None
        };
        let cost = make_cost(kind, k)?;
        call.finish()?;
        Ok(cost)
    }

    pub fn kind(&self) -> CostKind {
        match self {
            StandardCost::Quadratic(_) => CostKind::Quadratic,
            StandardCost::Exp(_) => CostKind::Exp,
            StandardCost::Cos(_) => CostKind::Cos,
            StandardCost::Constant(_) => CostKind::Constant,
            StandardCost::LinearSum => CostKind::LinearSum,
            StandardCost::FourthPower => CostKind::FourthPower,
        }
    }

    /// The per-coordinate term `g` of `f(x) = Σ g(x_d)`, with `g'` and `g''`.
    /// `None` for the constant cost, which is not a coordinate sum.
    pub fn term(&self, x: T) -> Option<(T, T, T)> {
        let two = T::lit(2.0);
        Some(match *self {
            StandardCost::Quadratic(k) => ((x - k) * (x - k), two * (x - k), two),
            StandardCost::Exp(k) => {
                let f = (-k * x * x).exp();
                (f, -two * k * x * f, (T::lit(4.0) * k * k * x * x - two * k) * f)
            }
            StandardCost::Cos(k) => ((k * x).cos(), -k * (k * x).sin(), -k * k * (k * x).cos()),
            StandardCost::Constant(_) => return None,
            StandardCost::LinearSum => (x, T::one(), T::zero()),
            StandardCost::FourthPower => {
                let x2 = x * x;
                (x2 * x2, T::lit(4.0) * x2 * x, T::lit(12.0) * x2)
            }
        })
    }
}

impl<T: Real> Cost<T> for StandardCost<T> {
    fn name(&self) -> String {
        self.to_string()
    }

    fn eval(&self, x: &[T]) -> T {
        match self {
            StandardCost::Constant(c) => *c,
            _ => x.iter().map(|&v| self.term(v).unwrap().0).sum(),
        }
    }

    fn grad(&self, x: &[T]) -> Option<Vec<T>> {
        Some(match self {
            StandardCost::Constant(_) => vec![T::zero(); x.len()],
            _ => x.iter().map(|&v| self.term(v).unwrap().1).collect(),
        })
    }

    fn hess(&self, x: &[T]) -> Option<Vec<Vec<T>>> {
        let n = x.len();
        let mut h = vec![vec![T::zero(); n]; n];
        if !matches!(self, StandardCost::Constant(_)) {
            for (d, &v) in x.iter().enumerate() {
                h[d][d] = self.term(v).unwrap().2;
            }
        }
        Some(h)
    }

    /// Bound on `|f'|` per coordinate, for the bounded-derivative costs.
    fn lipschitz_hint(&self) -> Option<T> {
        match *self {
            StandardCost::Exp(k) => Some((T::lit(2.0) * k.abs()).sqrt() * T::lit(-0.5).exp()),
            StandardCost::Cos(k) => Some(k.abs()),
            StandardCost::Constant(_) => Some(T::zero()),
            StandardCost::LinearSum => Some(T::one()),
            _ => None,
        }
    }

    fn as_standard(&self) -> Option<&StandardCost<T>> {
        Some(self)
    }
}

impl<T: Real> fmt::Display for StandardCost<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StandardCost::Quadratic(k) => write!(f, "quadratic(k={k})"),
            StandardCost::Exp(k) => write!(f, "exp(k={k})"),
            StandardCost::Cos(k) => write!(f, "cos(k={k})"),
            StandardCost::Constant(c) => write!(f, "constant(c={c})"),
            StandardCost::LinearSum => write!(f, "linear_sum"),
            StandardCost::FourthPower => write!(f, "fourth_power"),
        }
    }
}

/// `log σ(y xᵀw)` as a function of the weights `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticLogLik<T> {
    pub features: Vec<T>,
    pub label: T,
}

/// Builds the per-example logistic log-likelihood; `label` must be ±1.
pub fn blr_loglik_cost<T: Real>(features: Vec<T>, label: T) -> Result<LogisticLogLik<T>> {
    if label != T::one() && label != -T::one() {
        return Err(Error::InvalidParameter {
            name: "label".into(),
            value: label.as_f64(),
            reason: "must be -1 or +1",
        });
    }
    Ok(LogisticLogLik { features, label })
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

impl<T: Real> Cost<T> for LogisticLogLik<T> {
    fn name(&self) -> String {
        "logistic_loglik".into()
    }

    fn eval(&self, w: &[T]) -> T {
        log_sigmoid(self.label * dot(&self.features, w))
    }

    fn grad(&self, w: &[T]) -> Option<Vec<T>> {
        let s = self.label * sigmoid(-self.label * dot(&self.features, w));
        Some(self.features.iter().map(|&x| s * x).collect())
    }

    fn hess(&self, w: &[T]) -> Option<Vec<Vec<T>>> {
        let z = dot(&self.features, w);
        let a = -sigmoid(z) * sigmoid(-z);
        Some(
            self.features
                .iter()
                .map(|&xi| self.features.iter().map(|&xj| a * xi * xj).collect())
                .collect(),
        )
    }
}

/// `(I/B) Σᵢ log σ(yᵢ xᵢᵀw)` over a mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLogLik<'a, T> {
    pub features: Vec<&'a [T]>,
    pub labels: Vec<T>,
    pub scale: T,
}

impl<T: Real> BatchLogLik<'_, T> {
    fn margins(&self, w: &[T]) -> impl Iterator<Item = (T, &[T], T)> + '_ {
        let w = w.to_vec();
        self.features
            .iter()
            .zip(&self.labels)
            .map(move |(x, &y)| (y * dot(x, &w), *x, y))
    }
}

impl<T: Real> Cost<T> for BatchLogLik<'_, T> {
    fn name(&self) -> String {
        "batch_logistic_loglik".into()
    }

    fn eval(&self, w: &[T]) -> T {
        self.scale * self.margins(w).map(|(m, _, _)| log_sigmoid(m)).sum::<T>()
    }

    fn grad(&self, w: &[T]) -> Option<Vec<T>> {
        let mut g = vec![T::zero(); w.len()];
        for (m, x, y) in self.margins(w) {
            let s = self.scale * y * sigmoid(-m);
            for (gd, &xd) in g.iter_mut().zip(x) {
                *gd += s * xd;
            }
        }
        Some(g)
    }

    fn hess(&self, w: &[T]) -> Option<Vec<Vec<T>>> {
        let d = w.len();
        let mut h = vec![vec![T::zero(); d]; d];
        for (m, x, _) in self.margins(w) {
            let a = -self.scale * sigmoid(m) * sigmoid(-m);
            for i in 0..d {
                let ai = a * x[i];
                for j in 0..d {
                    h[i][j] += ai * x[j];
                }
            }
        }
        Some(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    fn all_standard() -> Vec<StandardCost<f64>> {
        let mut v = vec![StandardCost::Constant(100.0), StandardCost::LinearSum, StandardCost::FourthPower];
        for k in [-3.0, 0.0, 3.0] {
            v.push(StandardCost::Quadratic(k));
        }
        for k in [0.1, 1.0, 10.0] {
            v.push(StandardCost::Exp(k));
        }
        for k in [0.5, 1.58, 5.0] {
            v.push(StandardCost::Cos(k));
        }
        v
    }

    fn check_derivatives<C: Cost<f64>>(c: &C, x: &[f64]) {
        let g = c.grad(x).unwrap();
        let h = c.hess(x).unwrap();
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[i] += eps;
            dn[i] -= eps;
            let fd = (c.eval(&up) - c.eval(&dn)) / (2.0 * eps);
            let scale = g[i].abs().max(1.0);
            assert!((g[i] - fd).abs() < 1e-5 * scale, "{} grad {i}: {} vs {fd}", c.name(), g[i]);
            let gu = c.grad(&up).unwrap();
            let gd = c.grad(&dn).unwrap();
            for j in 0..x.len() {
                let fd = (gu[j] - gd[j]) / (2.0 * eps);
                assert!((h[j][i] - fd).abs() < 1e-4 * h[j][i].abs().max(1.0), "{} hess {i}{j}", c.name());
            }
        }
    }

    #[test]
    fn examples() {
        let q = StandardCost::Quadratic(3.0);
        assert_eq!(q.eval(&[3.0]), 0.0);
        assert_eq!(q.grad(&[3.0]).unwrap(), vec![0.0]);
        let c = StandardCost::Cos(0.5);
        assert_eq!(c.eval(&[0.0]), 1.0);
        assert_eq!(c.grad(&[0.0]).unwrap(), vec![0.0]);
        let l = StandardCost::LinearSum;
        assert_eq!(l.eval(&[1.0; 10]), 10.0);
        assert_eq!(l.grad(&[1.0; 10]).unwrap(), vec![1.0; 10]);
    }

    #[test]
    fn standard_costs_pass_finite_difference_checks() {
        let mut rng = RngStream::new(42);
        for c in all_standard() {
            for _ in 0..20 {
                let x: Vec<f64> = (0..3).map(|_| 2.0 * rng.normal::<f64>()).collect();
                check_derivatives(&c, &x);
            }
        }
    }

    #[test]
    fn parsing() {
        assert_eq!(StandardCost::<f64>::parse("quadratic(k=3)").unwrap(), StandardCost::Quadratic(3.0));
        assert_eq!(StandardCost::<f64>::parse("cos(k=1.58)").unwrap(), StandardCost::Cos(1.58));
        assert_eq!(StandardCost::<f64>::parse("constant(c=100)").unwrap(), StandardCost::Constant(100.0));
        assert_eq!(StandardCost::<f64>::parse("linear_sum").unwrap(), StandardCost::LinearSum);
        assert!(matches!(StandardCost::<f64>::parse("quadratic").unwrap_err(), Error::Config(_)));
        assert!(StandardCost::<f64>::parse("linear_sum(k=1)").is_err());
        assert!(StandardCost::<f64>::parse("sine(k=1)").is_err());
        for c in all_standard() {
            assert_eq!(StandardCost::<f64>::parse(&c.to_string()).unwrap(), c);
        }
    }

    #[test]
    fn lipschitz_hints() {
        let e = StandardCost::Exp(2.0f64);
        let bound = e.lipschitz_hint().unwrap();
        let peak = (1.0f64 / (2.0 * 2.0)).sqrt();
        assert!((e.grad(&[peak]).unwrap()[0].abs() - bound).abs() < 1e-12);
        assert_eq!(StandardCost::Cos(-3.0f64).lipschitz_hint(), Some(3.0));
    }

    #[test]
    fn logistic_cost() {
        let c = blr_loglik_cost(vec![1.0, -2.0, 0.5], 1.0).unwrap();
        assert!((c.eval(&[0.0; 3]) + 2f64.ln()).abs() < 1e-15);
        let mut prev = c.eval(&[0.0; 3]);
        for t in 1..60 {
            let w = [t as f64, -2.0 * t as f64, 0.5 * t as f64];
            let v = c.eval(&w);
            assert!(v <= 0.0 && v >= prev);
            prev = v;
        }
        assert!(blr_loglik_cost(vec![1.0], 0.0).is_err());
        let mut rng = RngStream::new(3);
        for _ in 0..20 {
            let w: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            check_derivatives(&c, &w);
            check_derivatives(&blr_loglik_cost(vec![0.3, 1.0, -1.2], -1.0).unwrap(), &w);
        }
    }

    #[test]
    fn batch_cost_matches_sum_of_examples() {
        let xs = [vec![1.0, 0.5], vec![-0.3, 2.0], vec![0.7, -1.0]];
        let ys = [1.0, -1.0, 1.0];
        let batch = BatchLogLik {
            features: xs.iter().map(|v| v.as_slice()).collect(),
            labels: ys.to_vec(),
            scale: 2.0,
        };
        let w = [0.4, -0.2];
        let direct: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| blr_loglik_cost(x.clone(), y).unwrap().eval(&w))
            .sum();
        assert!((batch.eval(&w) - 2.0 * direct).abs() < 1e-14);
        check_derivatives(&batch, &w);
    }

    proptest! {
        #[test]
        fn standard_grad_fd(k in -3.0f64..3.0, x in -3.0f64..3.0) {
            for c in [StandardCost::Quadratic(k), StandardCost::Cos(k), StandardCost::Exp(k.abs() + 0.1)] {
                let g = c.grad(&[x]).unwrap()[0];
                let fd = (c.eval(&[x + 1e-6]) - c.eval(&[x - 1e-6])) / 2e-6;
                prop_assert!((g - fd).abs() < 1e-5 * g.abs().max(1.0));
            }
        }
    }
}
