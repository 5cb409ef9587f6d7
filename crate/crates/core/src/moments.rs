//! Streaming central moments up to order four.

use crate::real::Real;

/// Running count, mean and central sums `M2..M4`, mergeable across chunks.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunningMoments<T> {
    n: usize,
    mean: T,
    m2: T,
    m3: T,
    m4: T,
}

impl<T: Real> RunningMoments<T> {
    pub fn new() -> Self {
        Self {
            n: 0,
            mean: T::zero(),
            m2: T::zero(),
            m3: T::zero(),
            m4: T::zero(),
        }
    }

    pub fn push(&mut self, x: T) {
        let n1 = T::from_usize_lossy(self.n);
        self.n += 1;
        let n = T::from_usize_lossy(self.n);
        let delta = x - self.mean;
        let delta_n = delta / n;
        let delta_n2 = delta_n * delta_n;
        let term1 = delta * delta_n * n1;
        self.mean += delta_n;
        self.m4 += term1 * delta_n2 * (n * n - T::lit(3.0) * n + T::lit(3.0))
            + T::lit(6.0) * delta_n2 * self.m2
            - T::lit(4.0) * delta_n * self.m3;
        self.m3 += term1 * delta_n * (n - T::lit(2.0)) - T::lit(3.0) * delta_n * self.m2;
        self.m2 += term1;
    }

    /// Combines two summaries as if all observations had been pushed into one.
    pub fn merge(&self, other: &Self) -> Self {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let na = T::from_usize_lossy(self.n);
        let nb = T::from_usize_lossy(other.n);
        let n = na + nb;
        let delta = other.mean - self.mean;
        let d2 = delta * delta;
        let d3 = d2 * delta;
        let d4 = d2 * d2;
        let mean = self.mean + delta * nb / n;
        let m2 = self.m2 + other.m2 + d2 * na * nb / n;
        let m3 = self.m3
            + other.m3
            + d3 * na * nb * (na - nb) / (n * n)
            + T::lit(3.0) * delta * (na * other.m2 - nb * self.m2) / n;
        let m4 = self.m4
            + other.m4
            + d4 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + T::lit(6.0) * d2 * (na * na * other.m2 + nb * nb * self.m2) / (n * n)
            + T::lit(4.0) * delta * (na * other.m3 - nb * self.m3) / n;
        Self {
            n: self.n + other.n,
            mean,
            m2,
            m3,
            m4,
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> T {
        self.mean
    }

    /// Unbiased sample variance; zero for fewer than two observations.
    pub fn variance(&self) -> T {
        if self.n < 2 {
            T::zero()
        } else {
            (self.m2 / T::from_usize_lossy(self.n - 1)).max(T::zero())
        }
    }

    /// Standard error of the mean.
    pub fn standard_error(&self) -> T {
        if self.n == 0 {
            T::zero()
        } else {
            (self.variance() / T::from_usize_lossy(self.n)).sqrt()
        }
    }

    /// Jackknife standard error of [`Self::variance`].
    ///
    /// The leave-one-out variances are `s²₋ᵢ = (M2 − n/(n−1)·dᵢ²)/(n−2)` with
    /// `dᵢ = xᵢ − x̄`, so their spread only needs `M2` and `M4`.
    pub fn variance_se(&self) -> T {
        if self.n < 3 {
            return T::zero();
        }
        let n = T::from_usize_lossy(self.n);
        let a = n / ((n - T::one()) * (n - T::lit(2.0)));
        let spread = (self.m4 - self.m2 * self.m2 / n).max(T::zero());
        ((n - T::one()) / n * a * a * spread).sqrt()
    }
}
