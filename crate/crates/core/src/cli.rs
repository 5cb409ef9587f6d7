//! Experiment runner: TOML specs in, CSV or JSON artifacts out.
//!
//! Every artifact starts with the resolved spec, so rerunning it with the same
//! seed reproduces the file byte for byte.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::blr::{self, CvChoice, Schedule, TrainConfig};
use crate::costs::{make_cost, CostKind, StandardCost};
use crate::error::{Error, Result};
use crate::estimators::{estimate, Baseline, CouplingMode, EstimatorConfig, EstimatorId, GradientEstimate};
use crate::measures::Measure;
use crate::oracle::{self, GradcheckReport};
use crate::rng::RngStream;
use crate::variance_reduction::DeltaConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    VarianceSweep,
    DimSweep,
    CouplingSweep,
    BlrTrain,
    Gradcheck,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::VarianceSweep => "variance_sweep",
            ExperimentKind::DimSweep => "dim_sweep",
            ExperimentKind::CouplingSweep => "coupling_sweep",
            ExperimentKind::BlrTrain => "blr_train",
            ExperimentKind::Gradcheck => "gradcheck",
        }
    }

    fn is_variance(self) -> bool {
        matches!(
            self,
            ExperimentKind::VarianceSweep | ExperimentKind::DimSweep | ExperimentKind::CouplingSweep
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlrSpec {
    /// Path to a WDBC file, or `bundled`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_measure_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr0: Option<f64>,
    /// `cosine` or `constant`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cv: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_log_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_posterior_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
}

/// A single experiment. Fields that do not apply to `kind` must be absent;
/// [`parse_spec`] fills the rest with defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    /// Single-sample trials per cell (sweeps) or samples per check (gradcheck).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    /// Samples averaged per estimate; reported variances are divided by it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measure: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measures: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub costs: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimators: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<Vec<usize>>,
    /// Location and scale of the `N(mu·1, sigma²I)` measure in `dim_sweep`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// `independent` or `shared`; applies to measure-valued estimators.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling: Option<String>,
    /// `none`, `baseline_ma(decay=…)` or `delta`. Baselines apply to the
    /// score-function estimator, delta controls to score-function and pathwise;
    /// other estimators run without.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cv: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_level: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blr: Option<BlrSpec>,
}

impl ExperimentSpec {
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            seed: 0,
            trials: None,
            n_samples: None,
            output: None,
            measure: None,
            measures: None,
            cost: None,
            costs: None,
            estimators: None,
            k_grid: None,
            dims: None,
            mu: None,
            sigma: None,
            coupling: None,
            cv: None,
            sigma_level: None,
            blr: None,
        }
    }
}

/// Default k-grid for a cost: quadratic on [−3, 3], exp log-spaced on
/// [0.1, 10], cos on [0.5, 5].
pub fn default_k_grid(kind: CostKind) -> Vec<f64> {
    match kind {
        CostKind::Quadratic => (0..=12).map(|i| -3.0 + 0.5 * i as f64).collect(),
        CostKind::Exp => (0..=8).map(|i| 10f64.powf(-1.0 + 0.25 * i as f64)).collect(),
        CostKind::Cos => (0..=9).map(|i| 0.5 + 0.5 * i as f64).collect(),
        CostKind::Constant => vec![100.0],
        _ => vec![0.0],
    }
}

fn config_err(m: impl Into<String>) -> Error {
    Error::Config(m.into())
}

fn parse_coupling(s: &str) -> Result<CouplingMode> {
    match s {
        "independent" => Ok(CouplingMode::Independent),
        "shared" => Ok(CouplingMode::Shared),
        _ => Err(config_err(format!("unknown coupling `{s}`; valid values are independent, shared"))),
    }
}

/// Parses `none`, `baseline_ma(decay=…)` or `delta`.
pub fn parse_cv(s: &str) -> Result<CvChoice> {
    let call = crate::text::parse_call(s)?;
    match call.name.as_str() {
        "none" | "delta" => {
            let name = call.name.clone();
            call.finish()?;
            Ok(if name == "none" { CvChoice::None } else { CvChoice::Delta })
        }
        "baseline_ma" => {
            let mut call = call;
            let decay = call.take(&["decay"]).unwrap_or(0.9);
            call.finish()?;
            Ok(CvChoice::BaselineMa { decay })
        }
        other => Err(config_err(format!(
            "unknown cv `{other}`; valid values are none, baseline_ma(decay), delta"
        ))),
    }
}

fn cv_string(cv: CvChoice) -> String {
    match cv {
        CvChoice::None => "none".into(),
        CvChoice::Delta => "delta".into(),
        CvChoice::BaselineMa { decay } => format!("baseline_ma(decay={decay})"),
    }
}

fn parse_estimators(names: &[String]) -> Result<Vec<EstimatorId>> {
    if names.is_empty() {
        return Err(config_err("`estimators` must not be empty"));
    }
    names.iter().map(|n| n.parse()).collect()
}

fn default_estimators() -> Vec<String> {
    ["score_function", "pathwise", "measure_valued"].map(String::from).to_vec()
}

/// Rejects keys that do not apply to the experiment kind.
fn reject_unused(spec: &ExperimentSpec) -> Result<()> {
    use ExperimentKind::*;
    let k = spec.kind;
    let present: [(&str, bool, &[ExperimentKind]); 14] = [
        ("trials", spec.trials.is_some(), &[VarianceSweep, DimSweep, CouplingSweep, Gradcheck]),
        ("n_samples", spec.n_samples.is_some(), &[VarianceSweep, DimSweep, CouplingSweep]),
        ("measure", spec.measure.is_some(), &[VarianceSweep, CouplingSweep]),
        ("measures", spec.measures.is_some(), &[Gradcheck]),
        ("cost", spec.cost.is_some(), &[VarianceSweep, DimSweep, CouplingSweep]),
        ("costs", spec.costs.is_some(), &[Gradcheck]),
        ("estimators", spec.estimators.is_some(), &[VarianceSweep, DimSweep, Gradcheck]),
        ("k_grid", spec.k_grid.is_some(), &[VarianceSweep, CouplingSweep]),
        ("dims", spec.dims.is_some(), &[DimSweep]),
        ("mu", spec.mu.is_some(), &[DimSweep]),
        ("sigma", spec.sigma.is_some(), &[DimSweep]),
        ("coupling", spec.coupling.is_some(), &[VarianceSweep, DimSweep]),
        ("cv", spec.cv.is_some(), &[VarianceSweep, DimSweep]),
        ("sigma_level", spec.sigma_level.is_some(), &[Gradcheck]),
    ];
    for (key, set, kinds) in present {
        if set && !kinds.contains(&k) {
            return Err(config_err(format!("key `{key}` does not apply to kind `{}`", k.as_str())));
        }
    }
    if spec.blr.is_some() && k != BlrTrain {
        return Err(config_err(format!("section [blr] does not apply to kind `{}`", k.as_str())));
    }
    Ok(())
}

/// Fills defaults and validates. Idempotent.
pub fn resolve(mut spec: ExperimentSpec) -> Result<ExperimentSpec> {
    use ExperimentKind::*;
    reject_unused(&spec)?;
    let kind = spec.kind;
    if kind.is_variance() {
        let trials = *spec.trials.get_or_insert(100_000);
        if trials < 100 {
            return Err(config_err("trials must be at least 100 for variance experiments"));
        }
        if *spec.n_samples.get_or_insert(1) == 0 {
            return Err(config_err("n_samples must be at least 1"));
        }
        let cost = spec.cost.get_or_insert_with(|| {
            if kind == DimSweep { "linear_sum" } else { "quadratic" }.into()
        });
        let cost_kind = CostKind::parse(cost)?;
        if kind != DimSweep {
            let grid = spec.k_grid.get_or_insert_with(|| default_k_grid(cost_kind));
            if grid.is_empty() {
                return Err(config_err("`k_grid` must not be empty"));
            }
            let m = spec.measure.get_or_insert_with(|| "gaussian(mu=1, sigma=1)".into());
            let parsed = Measure::<f64>::parse(m)?;
            *m = parsed.to_string();
        }
    }
    match kind {
        VarianceSweep | DimSweep => {
            let ests = parse_estimators(spec.estimators.get_or_insert_with(default_estimators))?;
            parse_coupling(spec.coupling.get_or_insert_with(|| "shared".into()))?;
            let cv = parse_cv(spec.cv.get_or_insert_with(|| "none".into()))?;
            spec.cv = Some(cv_string(cv));
            let probe = if kind == DimSweep {
                let dims = spec.dims.get_or_insert_with(|| vec![1, 10, 50, 100]);
                if dims.is_empty() || dims.contains(&0) {
                    return Err(config_err("`dims` must be non-empty and positive"));
                }
                let mu = *spec.mu.get_or_insert(0.5);
                let sigma = *spec.sigma.get_or_insert(1.0);
                Measure::diag_gaussian(vec![mu; 2], vec![sigma; 2])?
            } else {
                Measure::parse(spec.measure.as_deref().unwrap())?
            };
            for id in ests {
                if !id.applicable(&probe) {
                    return Err(Error::capability(probe.family(), format!("the {id} estimator")));
                }
                validate_cv(id, cv, &probe)?;
            }
        }
        CouplingSweep => {
            let m = Measure::<f64>::parse(spec.measure.as_deref().unwrap())?;
            if !EstimatorId::MeasureValued.applicable(&m) {
                return Err(Error::capability(m.family(), "the measure_valued estimator"));
            }
        }
        Gradcheck => {
            let trials = *spec.trials.get_or_insert(10_000);
            if trials < 2 {
                return Err(config_err("trials must be at least 2"));
            }
            let level = *spec.sigma_level.get_or_insert(4.0);
            if !(level > 0.0) {
                return Err(config_err("sigma_level must be positive"));
            }
            let measures = spec.measures.get_or_insert_with(|| {
                oracle::default_measures().iter().map(|m| m.to_string()).collect()
            });
            if measures.is_empty() {
                return Err(config_err("`measures` must not be empty"));
            }
            for m in measures.iter_mut() {
                *m = Measure::<f64>::parse(m)?.to_string();
            }
            let costs = spec
                .costs
                .get_or_insert_with(|| vec!["cos(k=1)".into(), "quadratic(k=0.5)".into()]);
            if costs.is_empty() {
                return Err(config_err("`costs` must not be empty"));
            }
            for c in costs.iter_mut() {
                *c = StandardCost::<f64>::parse(c)?.to_string();
            }
            parse_estimators(spec.estimators.get_or_insert_with(|| {
                EstimatorId::ALL.iter().map(|e| e.to_string()).collect()
            }))?;
        }
        BlrTrain => {
            let d = TrainConfig::default();
            let b = spec.blr.get_or_insert_with(BlrSpec::default);
            b.data.get_or_insert_with(|| "bundled".into());
            b.batch_size.get_or_insert(d.batch_size);
            b.n_measure_samples.get_or_insert(d.n_measure_samples);
            b.lr0.get_or_insert(d.lr0);
            b.schedule.get_or_insert_with(|| "cosine".into());
            b.estimator.get_or_insert_with(|| d.estimator.to_string());
            let cv = parse_cv(b.cv.get_or_insert_with(|| "none".into()))?;
            b.cv = Some(cv_string(cv));
            b.prior_scale.get_or_insert(d.prior_scale);
            b.init_log_s.get_or_insert(d.init_log_s);
            b.steps.get_or_insert(d.steps);
            b.eval_posterior_samples.get_or_insert(d.eval_posterior_samples);
            b.eval_every.get_or_insert(d.eval_every);
            train_config(&spec)?;
        }
    }
    Ok(spec)
}

fn validate_cv(id: EstimatorId, cv: CvChoice, m: &Measure<f64>) -> Result<()> {
    match cv {
        CvChoice::BaselineMa { decay } if !(0.0..1.0).contains(&decay) => {
            Err(config_err("baseline_ma decay must be in [0, 1)"))
        }
        CvChoice::Delta
            if matches!(id, EstimatorId::ScoreFunction | EstimatorId::Pathwise)
                && !matches!(m, Measure::Gaussian { .. } | Measure::DiagGaussian { .. }) =>
        {
            Err(Error::capability(m.family(), "delta control variates"))
        }
        _ => Ok(()),
    }
}

/// Parses and resolves a TOML spec.
pub fn parse_spec(text: &str) -> Result<ExperimentSpec> {
    let spec: ExperimentSpec = toml::from_str(text).map_err(|e| Error::Parse {
        location: e
            .span()
            .map(|s| {
                let line = text[..s.start].matches('\n').count() + 1;
                format!("line {line}")
            })
            .unwrap_or_else(|| "spec".into()),
        message: e.message().to_string(),
    })?;
    resolve(spec)
}

pub fn print_spec(spec: &ExperimentSpec) -> String {
    toml::to_string(spec).expect("specs always serialise")
}

fn estimator_config(spec: &ExperimentSpec, id: EstimatorId) -> Result<EstimatorConfig<f64>> {
    let mut cfg = EstimatorConfig::new(spec.trials.unwrap());
    if id == EstimatorId::MeasureValued {
        cfg.coupling = parse_coupling(spec.coupling.as_deref().unwrap_or("independent"))?;
    }
    match parse_cv(spec.cv.as_deref().unwrap_or("none"))? {
        CvChoice::None => {}
        CvChoice::BaselineMa { decay } if id == EstimatorId::ScoreFunction => {
            cfg.baseline = Baseline::MovingAverage { decay }
        }
        CvChoice::Delta if matches!(id, EstimatorId::ScoreFunction | EstimatorId::Pathwise) => {
            cfg.control_variate = Some(DeltaConfig::default())
        }
        _ => {}
    }
    Ok(cfg)
}

fn cell_key(a: usize, b: usize) -> u64 {
    ((a as u64) << 32) | b as u64
}

fn estimator_index(id: EstimatorId) -> usize {
    EstimatorId::ALL.iter().position(|&e| e == id).unwrap()
}

fn header(spec: &ExperimentSpec) -> String {
    let mut out = format!("# mcgrad {}\n", spec.kind.as_str());
    for line in print_spec(spec).lines() {
        let _ = writeln!(out, "# {line}");
    }
    out
}

/// Scales single-sample variances to an `n`-sample estimator.
fn scaled(est: &GradientEstimate<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let n = n as f64;
    (
        est.variance.iter().map(|v| v / n).collect(),
        est.variance_se.iter().map(|v| v / n).collect(),
    )
}

pub const SWEEP_HEADER: &str = "estimator,cost,k,param,variance,variance_se,oracle_gradient,mean";
pub const DIM_HEADER: &str = "estimator,D,param,avg_variance,avg_variance_se";
pub const COUPLING_HEADER: &str =
    "cost,k,param,coupling,var_independent,var_independent_se,var_coupled,var_coupled_se";

fn run_variance_sweep(spec: &ExperimentSpec) -> Result<String> {
    let m = Measure::<f64>::parse(spec.measure.as_deref().unwrap())?;
    let kind = CostKind::parse(spec.cost.as_deref().unwrap())?;
    let ests = parse_estimators(spec.estimators.as_deref().unwrap())?;
    let root = RngStream::new(spec.seed);
    let names = m.params().names;
    let mut out = header(spec);
    out.push_str(SWEEP_HEADER);
    out.push('\n');
    for (ki, &k) in spec.k_grid.as_deref().unwrap().iter().enumerate() {
        let cost = make_cost(kind, Some(k))?;
        let truth = oracle::oracle_gradient(&m, &cost)?;
        for &id in &ests {
            let cfg = estimator_config(spec, id)?;
            let mut rng = root.split(cell_key(estimator_index(id), ki));
            let est = estimate(id, &m, &cost, &cfg, &mut rng)?;
            let (var, se) = scaled(&est, spec.n_samples.unwrap());
            for (i, name) in names.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{id},{},{k},{name},{},{},{},{}",
                    kind.as_str(),
                    var[i],
                    se[i],
                    truth[i].value,
                    est.mean[i]
                );
            }
        }
    }
    Ok(out)
}

fn run_dim_sweep(spec: &ExperimentSpec) -> Result<String> {
    let kind = CostKind::parse(spec.cost.as_deref().unwrap())?;
    let cost = make_cost(kind, Some(default_k_grid(kind)[0]))?;
    let ests = parse_estimators(spec.estimators.as_deref().unwrap())?;
    let root = RngStream::new(spec.seed);
    let (mu, sigma) = (spec.mu.unwrap(), spec.sigma.unwrap());
    let mut out = header(spec);
    out.push_str(DIM_HEADER);
    out.push('\n');
    for (di, &d) in spec.dims.as_deref().unwrap().iter().enumerate() {
        let m = Measure::diag_gaussian(vec![mu; d], vec![sigma; d])?;
        for &id in &ests {
            let cfg = estimator_config(spec, id)?;
            let est = estimate(id, &m, &cost, &cfg, &mut root.split(cell_key(estimator_index(id), di)))?;
            let (var, se) = scaled(&est, spec.n_samples.unwrap());
            for (g, range) in [("mu", 0..d), ("sigma", d..2 * d)] {
                let (v, s) = average_variance(&var[range.clone()], &se[range]);
                let _ = writeln!(out, "{id},{d},{g},{v},{s}");
            }
        }
    }
    Ok(out)
}

/// Mean of per-parameter variances and its standard error, treating the
/// per-parameter estimates as independent.
pub fn average_variance(var: &[f64], se: &[f64]) -> (f64, f64) {
    let n = var.len() as f64;
    (
        var.iter().sum::<f64>() / n,
        se.iter().map(|s| s * s).sum::<f64>().sqrt() / n,
    )
}

fn run_coupling_sweep(spec: &ExperimentSpec) -> Result<String> {
    let m = Measure::<f64>::parse(spec.measure.as_deref().unwrap())?;
    let kind = CostKind::parse(spec.cost.as_deref().unwrap())?;
    let root = RngStream::new(spec.seed);
    let names = m.params().names;
    let n = spec.n_samples.unwrap();
    let mut out = header(spec);
    out.push_str(COUPLING_HEADER);
    out.push('\n');
    let id = EstimatorId::MeasureValued;
    for (ki, &k) in spec.k_grid.as_deref().unwrap().iter().enumerate() {
        let cost = make_cost(kind, Some(k))?;
        let base = EstimatorConfig::new(spec.trials.unwrap());
        let ind = estimate(id, &m, &cost, &base.clone(), &mut root.split(cell_key(0, ki)))?;
        let shared = base.with_coupling(CouplingMode::Shared);
        let cpl = estimate(id, &m, &cost, &shared, &mut root.split(cell_key(1, ki)))?;
        let (vi, si) = scaled(&ind, n);
        let (vc, sc) = scaled(&cpl, n);
        for (i, name) in names.iter().enumerate() {
            let scheme = m.weak_derivative_triple(i)?.native_coupling;
            let _ = writeln!(
                out,
                "{},{k},{name},{scheme:?},{},{},{},{}",
                kind.as_str(),
                vi[i],
                si[i],
                vc[i],
                sc[i]
            );
        }
    }
    Ok(out)
}

fn train_config(spec: &ExperimentSpec) -> Result<(TrainConfig, String)> {
    let b = spec.blr.as_ref().ok_or_else(|| config_err("missing [blr] section"))?;
    let schedule = match b.schedule.as_deref().unwrap() {
        "cosine" => Schedule::Cosine,
        "constant" => Schedule::Constant,
        s => return Err(config_err(format!("unknown schedule `{s}`; valid values are cosine, constant"))),
    };
    let cfg = TrainConfig {
        batch_size: b.batch_size.unwrap(),
        n_measure_samples: b.n_measure_samples.unwrap(),
        lr0: b.lr0.unwrap(),
        schedule,
        estimator: b.estimator.as_deref().unwrap().parse()?,
        cv: parse_cv(b.cv.as_deref().unwrap())?,
        prior_scale: b.prior_scale.unwrap(),
        init_log_s: b.init_log_s.unwrap(),
        steps: b.steps.unwrap(),
        seed: spec.seed,
        eval_posterior_samples: b.eval_posterior_samples.unwrap(),
        eval_every: b.eval_every.unwrap(),
        keep_snapshots: false,
    };
    if cfg.batch_size == 0 || cfg.n_measure_samples == 0 || cfg.eval_every == 0 || cfg.eval_posterior_samples == 0 {
        return Err(config_err("[blr] counts must be at least 1"));
    }
    Ok((cfg, b.data.clone().unwrap()))
}

fn run_blr(spec: &ExperimentSpec) -> Result<String> {
    let (cfg, data) = train_config(spec)?;
    let path = if data == "bundled" { blr::bundled_wdbc_path() } else { PathBuf::from(data) };
    let data = blr::load_wdbc(path)?;
    cfg.validate(&data)?;
    let trace = blr::train(&cfg, &data)?;
    let mut out = header(spec);
    if let Some(d) = &trace.diverged {
        let _ = writeln!(out, "# diverged at step {}: {}", d.step, d.reason);
    }
    out.push_str(&trace.to_csv());
    Ok(out)
}

/// Pairs that fail by construction: score-function gradients ignore the
/// moving boundary of `Uniform[0, θ]`.
pub fn expected_failure(id: EstimatorId, m: &Measure<f64>) -> bool {
    id == EstimatorId::ScoreFunction && matches!(m, Measure::Uniform { .. })
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckEntry {
    pub expected_failure: bool,
    #[serde(flatten)]
    pub report: GradcheckReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckSummary {
    pub checked: usize,
    pub passed: usize,
    pub expected_failures: usize,
    pub unexpected_failures: usize,
    pub not_applicable: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckOutput {
    pub spec: String,
    pub seed: u64,
    pub summary: GradcheckSummary,
    pub results: Vec<GradcheckEntry>,
}

pub fn run_gradcheck(spec: &ExperimentSpec) -> Result<GradcheckOutput> {
    let ests = parse_estimators(spec.estimators.as_deref().unwrap())?;
    let root = RngStream::new(spec.seed);
    let mut results = Vec::new();
    let mut not_applicable = Vec::new();
    for (mi, ms) in spec.measures.as_deref().unwrap().iter().enumerate() {
        let m = Measure::<f64>::parse(ms)?;
        for (ci, cs) in spec.costs.as_deref().unwrap().iter().enumerate() {
            let cost = StandardCost::<f64>::parse(cs)?;
            for &id in &ests {
                if !id.applicable(&m) {
                    if ci == 0 {
                        not_applicable.push(format!("{id} on {m}"));
                    }
                    continue;
                }
                let key = cell_key(mi, ci * EstimatorId::ALL.len() + estimator_index(id));
                let report = oracle::gradcheck(
                    id,
                    &m,
                    &cost,
                    spec.trials.unwrap(),
                    spec.sigma_level.unwrap(),
                    &mut root.split(key),
                )?;
                results.push(GradcheckEntry {
                    expected_failure: expected_failure(id, &m),
                    report,
                });
            }
        }
    }
    let passed = results.iter().filter(|r| r.report.pass).count();
    let expected = results.iter().filter(|r| !r.report.pass && r.expected_failure).count();
    Ok(GradcheckOutput {
        spec: print_spec(spec),
        seed: spec.seed,
        summary: GradcheckSummary {
            checked: results.len(),
            passed,
            expected_failures: expected,
            unexpected_failures: results.len() - passed - expected,
            not_applicable,
        },
        results,
    })
}

/// Human-readable gradcheck table.
pub fn gradcheck_table(out: &GradcheckOutput) -> String {
    let mut s = format!(
        "{:<18} {:<32} {:<18} {:<10} {:>12} {:>12} {:>10}  result\n",
        "estimator", "measure", "cost", "param", "estimate", "oracle", "se"
    );
    for r in &out.results {
        for set in std::iter::once(&r.report.main).chain(&r.report.moment_checks) {
            for p in &set.params {
                let verdict = match (p.pass, r.expected_failure) {
                    (true, _) => "pass",
                    (false, true) => "FAIL (expected)",
                    (false, false) => "FAIL",
                };
                let _ = writeln!(
                    s,
                    "{:<18} {:<32} {:<18} {:<10} {:>12.5} {:>12.5} {:>10.2e}  {verdict}",
                    r.report.estimator, r.report.measure, set.cost, p.name, p.estimate, p.oracle, p.standard_error
                );
            }
        }
    }
    let sm = &out.summary;
    let _ = writeln!(
        s,
        "{} checked, {} passed, {} expected failures, {} unexpected failures",
        sm.checked, sm.passed, sm.expected_failures, sm.unexpected_failures
    );
    s
}

/// Result of running a spec: the artifact body and an optional console note.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub body: String,
    pub console: Option<String>,
    /// Whether every check in the artifact passed; sweeps always succeed.
    pub success: bool,
}

pub fn run(spec: &ExperimentSpec) -> Result<Artifact> {
    let csv = |body: String| Artifact {
        body,
        console: None,
        success: true,
    };
    match spec.kind {
        ExperimentKind::VarianceSweep => run_variance_sweep(spec).map(csv),
        ExperimentKind::DimSweep => run_dim_sweep(spec).map(csv),
        ExperimentKind::CouplingSweep => run_coupling_sweep(spec).map(csv),
        ExperimentKind::BlrTrain => run_blr(spec).map(csv),
        ExperimentKind::Gradcheck => {
            let out = run_gradcheck(spec)?;
            let mut body = serde_json::to_string_pretty(&out).expect("reports serialise");
            body.push('\n');
            Ok(Artifact {
                body,
                console: Some(gradcheck_table(&out)),
                success: out.summary.unexpected_failures == 0,
            })
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mcgrad", version, about = "Monte Carlo gradient estimation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// TOML experiment spec.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the experiment seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file; defaults to the config `output`, else stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the trial count.
    #[arg(long)]
    pub trials: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-k variance of gradient estimators (variance_sweep).
    Sweep(CommonArgs),
    /// Average variance across dimensions (dim_sweep).
    Dims(CommonArgs),
    /// Coupled versus independent measure-valued variance (coupling_sweep).
    Coupling(CommonArgs),
    /// Variational logistic regression training trace (blr_train).
    Blr {
        #[command(flatten)]
        common: CommonArgs,
        /// WDBC data file; defaults to the bundled copy.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Estimator-versus-oracle report (gradcheck).
    Gradcheck(CommonArgs),
}

/// Builds the resolved spec for a command line.
pub fn spec_from_command(cmd: &Command) -> Result<(ExperimentSpec, Option<PathBuf>)> {
    let (kind, common, data) = match cmd {
        Command::Sweep(c) => (ExperimentKind::VarianceSweep, c, None),
        Command::Dims(c) => (ExperimentKind::DimSweep, c, None),
        Command::Coupling(c) => (ExperimentKind::CouplingSweep, c, None),
        Command::Blr { common, data } => (ExperimentKind::BlrTrain, common, data.as_ref()),
        Command::Gradcheck(c) => (ExperimentKind::Gradcheck, c, None),
    };
    let mut spec = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            let spec = parse_spec(&text).map_err(|e| match e {
                Error::Parse { location, message } => Error::Parse {
                    location: format!("{}:{location}", path.display()),
                    message,
                },
                other => other,
            })?;
            if spec.kind != kind {
                return Err(config_err(format!(
                    "config kind `{}` does not match subcommand `{}`",
                    spec.kind.as_str(),
                    kind.as_str()
                )));
            }
            spec
        }
        None => ExperimentSpec::new(kind),
    };
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    if let Some(t) = common.trials {
        spec.trials = Some(t);
    }
    if let Some(d) = data {
        spec.blr.get_or_insert_with(BlrSpec::default).data = Some(d.display().to_string());
    }
    let out = common.out.clone().or_else(|| spec.output.as_ref().map(PathBuf::from));
    // The output path is not part of the experiment; keep it out of the artifact.
    spec.output = None;
    Ok((resolve(spec)?, out))
}

/// Runs the command line and returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    let (spec, out) = match spec_from_command(&cli.command) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let artifact = match run(&spec) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    if let Some(note) = &artifact.console {
        eprint!("{note}");
    }
    match out {
        Some(path) => {
            if let Err(e) = std::fs::write(&path, &artifact.body) {
                eprintln!("error: {}: {e}", path.display());
                return 1;
            }
        }
        None => print!("{}", artifact.body),
    }
    if artifact.success {
        0
    } else {
        1
    }
}
