//! Variational Bayesian logistic regression on the WDBC data.
//!
//! The posterior over weights is `q(w) = N(μ, diag(s)²)` with `s = exp(log_s)`,
//! the prior is `N(0, cI)`, and training maximises the ELBO by SGD with a
//! cosine-decayed learning rate.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::costs::{BatchLogLik, Cost};
use crate::error::{Error, Result};
use crate::estimators::{
    contributions, Accumulator, Baseline, BaselineState, EstimatorConfig, EstimatorId,
    GradientEstimate,
};
use crate::measures::Measure;
use crate::rng::RngStream;
use crate::special::{log_sigmoid, sigmoid};
use crate::variance_reduction::DeltaConfig;

/// Raw WDBC feature names, in file order.
pub const WDBC_FEATURES: [&str; 30] = [
    "radius_mean", "texture_mean", "perimeter_mean", "area_mean", "smoothness_mean",
    "compactness_mean", "concavity_mean", "concave_points_mean", "symmetry_mean",
    "fractal_dimension_mean", "radius_se", "texture_se", "perimeter_se", "area_se",
    "smoothness_se", "compactness_se", "concavity_se", "concave_points_se", "symmetry_se",
    "fractal_dimension_se", "radius_worst", "texture_worst", "perimeter_worst", "area_worst",
    "smoothness_worst", "compactness_worst", "concavity_worst", "concave_points_worst",
    "symmetry_worst", "fractal_dimension_worst",
];

/// Path of the bundled copy of the data.
pub fn bundled_wdbc_path() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/wdbc.data")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Row-major `I × D`, standardised, with a trailing constant column.
    pub features: Vec<Vec<f64>>,
    /// `+1` malignant, `−1` benign.
    pub labels: Vec<f64>,
    pub feature_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    /// Builds a dataset from raw rows: standardises each column and appends a bias.
    pub fn from_raw(raw: Vec<Vec<f64>>, labels: Vec<f64>, names: Vec<String>) -> Result<Self> {
        if raw.len() != labels.len() {
            return Err(Error::LengthMismatch {
                left: raw.len(),
                right: labels.len(),
            });
        }
        if raw.is_empty() {
            return Err(Error::Ingestion {
                line: 0,
                message: "no data rows".into(),
            });
        }
        let d = names.len();
        let n = raw.len() as f64;
        let mut features = raw;
        for j in 0..d {
            let mean = features.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = features.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            for r in features.iter_mut() {
                // Constant columns carry no information; they become zero.
                r[j] = if sd > 0.0 { (r[j] - mean) / sd } else { 0.0 };
            }
        }
        for r in features.iter_mut() {
            r.push(1.0);
        }
        let mut feature_names = names;
        feature_names.push("bias".into());
        Ok(Self {
            features,
            labels,
            feature_names,
        })
    }
}

/// Parses WDBC text: `id, diagnosis (M|B), 30 reals` per line.
pub fn parse_wdbc(text: &str) -> Result<Dataset> {
    let mut raw = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Ingestion {
            line: line_no,
            message,
        };
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 32 {
            return Err(err(format!("expected 32 columns, found {}", cols.len())));
        }
        labels.push(match cols[1] {
            "M" => 1.0,
            "B" => -1.0,
            other => return Err(err(format!("diagnosis must be M or B, found `{other}`"))),
        });
        let row = cols[2..]
            .iter()
            .map(|c| {
                c.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("`{c}` is not a finite number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        raw.push(row);
    }
    Dataset::from_raw(raw, labels, WDBC_FEATURES.iter().map(|s| s.to_string()).collect())
}

pub fn load_wdbc(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_wdbc(&text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    pub mu: Vec<f64>,
    pub log_s: Vec<f64>,
}

impl VariationalParams {
    pub fn new(d: usize, log_s: f64) -> Self {
        Self {
            mu: vec![0.0; d],
            log_s: vec![log_s; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn s(&self) -> Vec<f64> {
        self.log_s.iter().map(|v| v.exp()).collect()
    }

    pub fn measure(&self) -> Result<Measure<f64>> {
        Measure::diag_gaussian(self.mu.clone(), self.s())
    }

    /// Finite means and strictly positive, finite scales.
    fn is_valid(&self) -> bool {
        self.mu.iter().all(|v| v.is_finite())
            && self.log_s.iter().all(|v| v.exp().is_finite() && v.exp() > 0.0)
    }
}

/// `KL(q ‖ N(0, cI))` with gradients in `μ` and `log s`.
pub fn kl_diag_gaussian(vp: &VariationalParams, c: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "prior_scale".into(),
            value: c,
            reason: "must be positive and finite",
        });
    }
    let mut value = 0.0;
    let mut g_mu = Vec::with_capacity(vp.dim());
    let mut g_ls = Vec::with_capacity(vp.dim());
    for (&m, &ls) in vp.mu.iter().zip(&vp.log_s) {
        let s2c = (2.0 * ls).exp() / c;
        value += 0.5 * (s2c + m * m / c - 1.0 - s2c.ln());
        g_mu.push(m / c);
        g_ls.push(s2c - 1.0);
    }
    Ok((value, g_mu, g_ls))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CvChoice {
    None,
    BaselineMa { decay: f64 },
    Delta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub n_measure_samples: usize,
    pub lr0: f64,
    pub schedule: Schedule,
    pub estimator: EstimatorId,
    pub cv: CvChoice,
    pub prior_scale: f64,
    pub init_log_s: f64,
    pub steps: usize,
    pub seed: u64,
    pub eval_posterior_samples: usize,
    /// Full-data evaluation interval, in steps.
    pub eval_every: usize,
    /// Keep the parameters at every evaluation step.
    pub keep_snapshots: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            n_measure_samples: 50,
            lr0: 1e-3,
            schedule: Schedule::Cosine,
            estimator: EstimatorId::Pathwise,
            cv: CvChoice::None,
            prior_scale: 1.0,
            init_log_s: -1.0,
            steps: 5000,
            seed: 0,
            eval_posterior_samples: 1000,
            eval_every: 50,
            keep_snapshots: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.batch_size > data.len() {
            return bad(format!("batch_size must be in 1..={}", data.len()));
        }
        if self.n_measure_samples == 0 {
            return bad("n_measure_samples must be at least 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if self.eval_posterior_samples == 0 {
            return bad("eval_posterior_samples must be at least 1".into());
        }
        if let CvChoice::BaselineMa { decay } = self.cv {
            if !(0.0..1.0).contains(&decay) || self.estimator != EstimatorId::ScoreFunction {
                return bad("baseline_ma needs decay in [0, 1) and the score_function estimator".into());
            }
        }
        if self.cv == CvChoice::Delta
            && !matches!(self.estimator, EstimatorId::ScoreFunction | EstimatorId::Pathwise)
        {
            return bad("delta control variates need score_function or pathwise".into());
        }
        if !matches!(
            self.estimator,
            EstimatorId::ScoreFunction | EstimatorId::Pathwise | EstimatorId::MeasureValued
        ) {
            return bad(format!("estimator {} does not apply to a Gaussian posterior", self.estimator));
        }
        kl_diag_gaussian(&VariationalParams::new(1, 0.0), self.prior_scale).map(|_| ())
    }

    pub fn lr(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr0,
            Schedule::Cosine if self.steps == 0 => self.lr0,
            Schedule::Cosine => {
                let t = step as f64 / self.steps as f64;
                self.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    fn estimator_config(&self) -> EstimatorConfig<f64> {
        let mut cfg = EstimatorConfig::new(self.n_measure_samples);
        match self.cv {
            CvChoice::None => {}
            CvChoice::BaselineMa { decay } => cfg.baseline = Baseline::MovingAverage { decay },
            CvChoice::Delta => cfg.control_variate = Some(DeltaConfig::default()),
        }
        cfg
    }
}

/// ELBO gradient for one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGradient {
    /// `∇ELBO` over `(μ, log s)`.
    pub grad: Vec<f64>,
    /// Likelihood-term estimate over `(μ, log s)`; its variances are those of
    /// single-sample contributions.
    pub estimate: GradientEstimate<f64>,
    pub var_mu: f64,
    pub var_log_s: f64,
}

fn batch_cost<'a>(data: &'a Dataset, batch: &[usize]) -> BatchLogLik<'a, f64> {
    BatchLogLik {
        features: batch.iter().map(|&i| data.features[i].as_slice()).collect(),
        labels: batch.iter().map(|&i| data.labels[i]).collect(),
        scale: data.len() as f64 / batch.len() as f64,
    }
}

/// Mini-batch indices drawn uniformly with replacement.
pub fn draw_batch(n: usize, b: usize, rng: &mut RngStream) -> Vec<usize> {
    (0..b).map(|_| rng.index(n)).collect()
}

/// Estimates `∇ELBO` at `vp` on `batch`. The KL gradient is added analytically.
pub fn elbo_gradient(
    vp: &VariationalParams,
    data: &Dataset,
    batch: &[usize],
    estimator: EstimatorId,
    cfg: &EstimatorConfig<f64>,
    prior_scale: f64,
    state: &mut BaselineState<f64>,
    rng: &mut RngStream,
) -> Result<StepGradient> {
    let d = vp.dim();
    let m = vp.measure()?;
    let f = batch_cost(data, batch);
    let s = vp.s();
    let mut acc = Accumulator::new(2 * d);
    let mut buf = vec![0.0; 2 * d];
    let evals = contributions(estimator, &m, &f, cfg, state, rng, &mut |row| {
        buf.copy_from_slice(row);
        // ∂/∂log s = s ∂/∂s.
        for (v, sd) in buf[d..].iter_mut().zip(&s) {
            *v *= sd;
        }
        acc.push(&buf);
    })?;
    let estimate = GradientEstimate::from_moments(&acc.moments, evals);
    let (_, kl_mu, kl_ls) = kl_diag_gaussian(vp, prior_scale)?;
    let grad = estimate
        .mean
        .iter()
        .zip(kl_mu.iter().chain(&kl_ls))
        .map(|(g, k)| g - k)
        .collect();
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(StepGradient {
        grad,
        var_mu: avg(&estimate.variance[..d]),
        var_log_s: avg(&estimate.variance[d..]),
        estimate,
    })
}

/// `(I/B)(1/N) Σ_n Σ_i log σ(y_i x_iᵀ w_n) − KL` with `w_n ~ q`.
pub fn elbo_estimate(
    vp: &VariationalParams,
    data: &Dataset,
    batch: &[usize],
    n: usize,
    prior_scale: f64,
    rng: &mut RngStream,
) -> Result<f64> {
    let m = vp.measure()?;
    let f = batch_cost(data, batch);
    let mut total = 0.0;
    for _ in 0..n {
        total += f.eval(&m.sample(rng));
    }
    Ok(total / n as f64 - kl_diag_gaussian(vp, prior_scale)?.0)
}

/// Full-data ELBO and posterior-predictive accuracy from `n` posterior samples.
pub fn evaluate(
    vp: &VariationalParams,
    data: &Dataset,
    n: usize,
    prior_scale: f64,
    rng: &mut RngStream,
) -> Result<(f64, f64)> {
    let m = vp.measure()?;
    let mut prob = vec![0.0; data.len()];
    let mut loglik = 0.0;
    for _ in 0..n {
        let w = m.sample(rng);
        for (i, x) in data.features.iter().enumerate() {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
            loglik += log_sigmoid(data.labels[i] * z);
            prob[i] += sigmoid(z);
        }
    }
    let correct = prob
        .iter()
        .zip(&data.labels)
        .filter(|(p, &y)| (**p / n as f64 - 0.5) * y > 0.0)
        .count();
    let elbo = loglik / n as f64 - kl_diag_gaussian(vp, prior_scale)?.0;
    Ok((elbo, correct as f64 / data.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    /// Mini-batch ELBO estimate before the update.
    pub elbo_estimate: f64,
    pub var_grad_mu: f64,
    pub var_grad_log_s: f64,
    /// Cumulative cost evaluations after this step.
    pub cost_evals: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub lr: f64,
    pub elbo: f64,
    pub accuracy: f64,
    pub var_grad_mu: f64,
    pub var_grad_log_s: f64,
    pub cost_evals: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub step: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTrace {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub snapshots: Vec<(usize, VariationalParams)>,
    pub final_params: VariationalParams,
    pub diverged: Option<Divergence>,
    /// Not written to files.
    pub wall_time_secs: f64,
}

pub const CSV_HEADER: &str = "step,lr,elbo,accuracy,var_grad_mu,var_grad_log_s,cost_evals";

impl MetricsTrace {
    /// One row per evaluation step; see [`CSV_HEADER`].
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(CSV_HEADER);
        out.push('\n');
        for e in &self.evals {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                e.step, e.lr, e.elbo, e.accuracy, e.var_grad_mu, e.var_grad_log_s, e.cost_evals
            );
        }
        out
    }

    /// Mean of `var_grad_log_s` over the first and last tenth of the steps.
    pub fn log_s_variance_deciles(&self) -> Option<(f64, f64)> {
        let n = self.steps.len();
        let k = n / 10;
        if k == 0 {
            return None;
        }
        let avg = |r: &[StepRecord]| r.iter().map(|s| s.var_grad_log_s).sum::<f64>() / r.len() as f64;
        Some((avg(&self.steps[..k]), avg(&self.steps[n - k..])))
    }
}

/// Lowest ELBO estimate treated as a live run.
pub const ELBO_FLOOR: f64 = -1e9;

/// Stream keys under the run seed.
const BATCH_KEY: u64 = 1;
const GRAD_KEY: u64 = 2;
const ELBO_KEY: u64 = 3;
const EVAL_KEY: u64 = 4;

/// SGD ascent on the ELBO. Divergence stops training and is reported in the trace.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<MetricsTrace> {
    cfg.validate(data)?;
    let start = Instant::now();
    let root = RngStream::new(cfg.seed);
    let est_cfg = cfg.estimator_config();
    let mut vp = VariationalParams::new(data.dim(), cfg.init_log_s);
    let mut state = BaselineState::new();
    let mut trace = MetricsTrace {
        steps: Vec::with_capacity(cfg.steps),
        evals: Vec::new(),
        snapshots: Vec::new(),
        final_params: vp.clone(),
        diverged: None,
        wall_time_secs: 0.0,
    };
    let mut cost_evals = 0usize;
    let mut last = (f64::NAN, f64::NAN);
    let record_eval = |trace: &mut MetricsTrace, vp: &VariationalParams, step: usize, last: (f64, f64), evals: usize| -> Result<()> {
        let (elbo, accuracy) = evaluate(
            vp,
            data,
            cfg.eval_posterior_samples,
            cfg.prior_scale,
            &mut root.split(EVAL_KEY).split(step as u64),
        )?;
        trace.evals.push(EvalRecord {
            step,
            lr: cfg.lr(step),
            elbo,
            accuracy,
            var_grad_mu: last.0,
            var_grad_log_s: last.1,
            cost_evals: evals,
        });
        if cfg.keep_snapshots {
            trace.snapshots.push((step, vp.clone()));
        }
        Ok(())
    };
    for step in 0..cfg.steps {
        let key = step as u64;
        let batch = draw_batch(data.len(), cfg.batch_size, &mut root.split(BATCH_KEY).split(key));
        let elbo = elbo_estimate(
            &vp,
            data,
            &batch,
            cfg.n_measure_samples,
            cfg.prior_scale,
            &mut root.split(ELBO_KEY).split(key),
        )?;
        let g = elbo_gradient(
            &vp,
            data,
            &batch,
            cfg.estimator,
            &est_cfg,
            cfg.prior_scale,
            &mut state,
            &mut root.split(GRAD_KEY).split(key),
        )?;
        last = (g.var_mu, g.var_log_s);
        if step % cfg.eval_every == 0 {
            record_eval(&mut trace, &vp, step, last, cost_evals)?;
        }
        cost_evals += g.estimate.n_cost_evals + cfg.n_measure_samples;
        let lr = cfg.lr(step);
        trace.steps.push(StepRecord {
            step,
            lr,
            elbo_estimate: elbo,
            var_grad_mu: g.var_mu,
            var_grad_log_s: g.var_log_s,
            cost_evals,
        });
        let d = vp.dim();
        for i in 0..d {
            vp.mu[i] += lr * g.grad[i];
            vp.log_s[i] += lr * g.grad[d + i];
        }
        let reason = if !elbo.is_finite() || !vp.is_valid() {
            Some("non-finite ELBO or parameters".to_string())
        } else if elbo < ELBO_FLOOR {
            Some(format!("ELBO estimate {elbo} below floor {ELBO_FLOOR}"))
        } else {
            None
        };
        if let Some(reason) = reason {
            trace.diverged = Some(Divergence { step, reason });
            trace.final_params = vp;
            trace.wall_time_secs = start.elapsed().as_secs_f64();
            return Ok(trace);
        }
    }
    record_eval(&mut trace, &vp, cfg.steps, last, cost_evals)?;
    trace.final_params = vp;
    trace.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(trace)
}

/// Gradient variances of several estimator settings at one iterate, all on the
/// same mini-batch and the same sample stream.
pub fn matched_variances(
    vp: &VariationalParams,
    data: &Dataset,
    batch: &[usize],
    settings: &[(EstimatorId, CvChoice)],
    n: usize,
    prior_scale: f64,
    rng: &RngStream,
) -> Result<Vec<StepGradient>> {
    settings
        .iter()
        .map(|&(id, cv)| {
            let cfg = TrainConfig {
                n_measure_samples: n,
                cv,
                estimator: id,
                ..TrainConfig::default()
            }
            .estimator_config();
            elbo_gradient(vp, data, batch, id, &cfg, prior_scale, &mut BaselineState::new(), &mut rng.clone())
        })
        .collect()
}
