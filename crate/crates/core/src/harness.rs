//! Monte-Carlo sweeps, aggregation, the real-data protocol and result output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{self, AugmentedEstimate, Dataset, Method, PilotStage, PipelineConfig, Sigma22Source};
use crate::glm::{FitResult, GlmFamily, SolverOptions};
use crate::linalg;
use crate::moments::ForestParams;
use crate::rng::{self, Stage};
use crate::scenarios::{self, ScenarioSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::Config(format!("unknown output format '{other}'"))),
        }
    }
}

/// Settings shared by simulation sweeps and the real-data protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub methods: Vec<Method>,
    pub n_grid: Vec<usize>,
    pub n0: usize,
    pub reps: usize,
    pub seed: u64,
    pub augment: bool,
    pub sigma22_source: Sigma22Source,
    /// Worker threads for replications; `None` uses all cores.
    pub workers: Option<usize>,
    pub family_s: GlmFamily,
    pub solver: SolverOptions,
    pub forest: ForestParams,
}

impl RunSettings {
    pub fn new(methods: Vec<Method>, n_grid: Vec<usize>, n0: usize, reps: usize, seed: u64) -> Self {
        Self {
            methods,
            n_grid,
            n0,
            reps,
            seed,
            augment: true,
            sigma22_source: Sigma22Source::Population,
            workers: None,
            family_s: GlmFamily::Linear,
            solver: SolverOptions::default(),
            forest: ForestParams::default(),
        }
    }

    fn validate(&self, n_rows: usize) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::Config(format!("method '{m}' listed twice")));
            }
        }
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        let (Some(&lo), Some(&hi)) = (self.n_grid.iter().min(), self.n_grid.iter().max()) else {
            return Err(Error::Config("n-grid is empty".into()));
        };
        if self.n0 == 0 || self.n0 >= lo {
            return Err(Error::Config(format!("need 0 < n0 < min(n-grid); got n0 = {}, min = {lo}", self.n0)));
        }
        if hi > n_rows {
            return Err(Error::Config(format!("max(n-grid) = {hi} exceeds N = {n_rows}")));
        }
        Ok(())
    }

    fn pipeline_config(&self, family_y: GlmFamily, method: Method, n: usize) -> PipelineConfig {
        PipelineConfig {
            n0: self.n0,
            n,
            method,
            family_y,
            family_s: self.family_s,
            solver: self.solver,
            forest: self.forest,
            augment: self.augment,
            sigma22_source: self.sigma22_source,
        }
    }

    fn thread_pool(&self) -> Result<rayon::ThreadPool> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(w) = self.workers {
            b = b.num_threads(w);
        }
        b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSpec,
    pub settings: RunSettings,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.settings.validate(self.scenario.n_rows)
    }
}

fn de_nullable_f64<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

fn de_nullable_opt_f64<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    Ok(Some(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN)))
}

/// One aggregated line of output. Non-finite values serialise as JSON `null`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub n: usize,
    pub reps_used: usize,
    pub reps_diverged: usize,
    #[serde(deserialize_with = "de_nullable_f64")]
    pub mse: f64,
    #[serde(deserialize_with = "de_nullable_f64")]
    pub log_mse: f64,
    #[serde(default, skip_serializing_if = "Option::is_none", deserialize_with = "de_nullable_opt_f64")]
    pub rel_est_se: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", deserialize_with = "de_nullable_opt_f64")]
    pub rel_pred_se: Option<f64>,
}

fn same_float(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan())
}

impl PartialEq for ResultRow {
    fn eq(&self, o: &Self) -> bool {
        let opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) => same_float(x, y),
            (None, None) => true,
            _ => false,
        };
        self.method == o.method
            && self.n == o.n
            && self.reps_used == o.reps_used
            && self.reps_diverged == o.reps_diverged
            && same_float(self.mse, o.mse)
            && same_float(self.log_mse, o.log_mse)
            && opt(self.rel_est_se, o.rel_est_se)
            && opt(self.rel_pred_se, o.rel_pred_se)
    }
}

/// Mean squared Euclidean distance of `estimates` from `beta0`.
pub fn empirical_mse(estimates: &[DVector<f64>], beta0: &DVector<f64>) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::Config("empirical MSE of an empty list".into()));
    }
    if let Some(e) = estimates.iter().find(|e| e.len() != beta0.len()) {
        return Err(Error::Dimension(format!("estimate of length {} vs beta0 {}", e.len(), beta0.len())));
    }
    let total: f64 = estimates.iter().map(|e| (e - beta0).norm_squared()).sum();
    Ok(total / estimates.len() as f64)
}

/// Result of one (rep, method, n) pipeline run.
#[derive(Debug, Clone)]
pub struct RepOutcome {
    pub rep: usize,
    pub method: Method,
    pub n: usize,
    pub estimate: Option<AugmentedEstimate>,
    pub error: Option<String>,
}

impl RepOutcome {
    /// `β̂_A` if every fit converged and the estimate is finite.
    pub fn usable_beta(&self) -> Option<&DVector<f64>> {
        self.estimate
            .as_ref()
            .filter(|e| e.converged() && e.beta_a.iter().all(|v| v.is_finite()))
            .map(|e| &e.beta_a)
    }
}

/// Response-access audit over a set of pipeline runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AccessAudit {
    pub stages_checked: usize,
    /// Responses read that belonged to neither the pilot nor the subsample.
    pub violations: usize,
}

impl AccessAudit {
    fn merge(self, o: AccessAudit) -> AccessAudit {
        AccessAudit {
            stages_checked: self.stages_checked + o.stages_checked,
            violations: self.violations + o.violations,
        }
    }

    /// Count responses read outside `allowed` since the last check, then clear the log.
    pub fn check(&mut self, dataset: &Dataset, allowed: &[bool]) {
        self.stages_checked += 1;
        self.violations += dataset.access_log().into_iter().filter(|&i| !allowed[i]).count();
        dataset.clear_access_log();
    }
}

fn plan_mask(e: &AugmentedEstimate) -> Vec<bool> {
    e.plan.indicators.clone()
}

/// Run every (method, n) pair on one dataset that shares a pilot.
fn run_on_dataset(
    dataset: &Dataset,
    rep: usize,
    pilot: Result<(PilotStage, FitResult)>,
    family_y: GlmFamily,
    settings: &RunSettings,
    audit: &mut AccessAudit,
) -> Vec<RepOutcome> {
    let mut out = Vec::with_capacity(settings.methods.len() * settings.n_grid.len());
    let (pilot, gamma_full) = match pilot {
        Ok(p) => p,
        Err(e) => {
            for &method in &settings.methods {
                for &n in &settings.n_grid {
                    out.push(RepOutcome {
                        rep,
                        method,
                        n,
                        estimate: None,
                        error: Some(e.to_string()),
                    });
                }
            }
            return out;
        }
    };
    for &method in &settings.methods {
        for &n in &settings.n_grid {
            let cfg = settings.pipeline_config(family_y, method, n);
            let mut draw = rng::stream(settings.seed, &[rep as u64, method.index(), n as u64, Stage::Draw as u64]);
            let res = estimator::estimate(dataset, &pilot, &gamma_full, &cfg, &mut draw);
            let outcome = match res {
                Ok(e) => {
                    let mut allowed = plan_mask(&e);
                    for (a, &p) in allowed.iter_mut().zip(&pilot.mask) {
                        *a |= p;
                    }
                    audit.check(dataset, &allowed);
                    RepOutcome {
                        rep,
                        method,
                        n,
                        estimate: Some(e),
                        error: None,
                    }
                }
                Err(err) => {
                    audit.check(dataset, &pilot.mask);
                    RepOutcome {
                        rep,
                        method,
                        n,
                        estimate: None,
                        error: Some(err.to_string()),
                    }
                }
            };
            out.push(outcome);
        }
    }
    out
}

fn pilot_and_full_fit(
    dataset: &Dataset,
    mask: &[bool],
    family_y: GlmFamily,
    settings: &RunSettings,
    rep: usize,
) -> Result<(PilotStage, FitResult)> {
    let mut forest_rng = rng::stream(settings.seed, &[rep as u64, Stage::Forest as u64]);
    let forest = settings
        .methods
        .contains(&Method::Osumcs)
        .then_some((&settings.forest, &mut forest_rng));
    let pilot = estimator::pilot_stage(dataset, mask, family_y, settings.family_s, &settings.solver, forest)?;
    let full = estimator::fit_surrogate_full(dataset, settings.family_s, &pilot.gamma, &settings.solver)?;
    Ok((pilot, full))
}

/// One simulated replication: fresh dataset, shared pilot, all methods and
/// budgets.
pub fn run_replication(config: &ExperimentConfig, rep: usize) -> Result<(Vec<RepOutcome>, AccessAudit)> {
    let settings = &config.settings;
    let spec = &config.scenario;
    let dataset = scenarios::simulate(spec, settings.seed, rep as u64)?.into_dataset()?;
    let mut audit = AccessAudit::default();
    let mask = estimator::draw_pilot_mask(
        dataset.len(),
        settings.n0,
        &mut rng::stream(settings.seed, &[rep as u64, Stage::Pilot as u64]),
    )?;
    let pilot = pilot_and_full_fit(&dataset, &mask, spec.family, settings, rep);
    audit.check(&dataset, &mask);
    let outcomes = run_on_dataset(&dataset, rep, pilot, spec.family, settings, &mut audit);
    Ok((outcomes, audit))
}

/// All replications, ordered by rep index regardless of scheduling.
pub fn run_replications(config: &ExperimentConfig) -> Result<(Vec<RepOutcome>, AccessAudit)> {
    config.validate()?;
    let pool = config.settings.thread_pool()?;
    let per_rep: Vec<Result<(Vec<RepOutcome>, AccessAudit)>> =
        pool.install(|| (0..config.settings.reps).into_par_iter().map(|r| run_replication(config, r)).collect());
    let mut outcomes = Vec::new();
    let mut audit = AccessAudit::default();
    for r in per_rep {
        let (o, a) = r?;
        outcomes.extend(o);
        audit = audit.merge(a);
    }
    Ok((outcomes, audit))
}

/// Aggregate outcomes into one row per (method, n), in the given orders.
/// Only replications whose fits all converged enter the MSE.
pub fn aggregate(outcomes: &[RepOutcome], beta0: &DVector<f64>, methods: &[Method], n_grid: &[usize]) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for &method in methods {
        for &n in n_grid {
            let mut cell: Vec<&RepOutcome> = outcomes.iter().filter(|o| o.method == method && o.n == n).collect();
            cell.sort_by_key(|o| o.rep);
            let used: Vec<DVector<f64>> = cell.iter().filter_map(|o| o.usable_beta().cloned()).collect();
            let mse = if used.is_empty() { f64::NAN } else { empirical_mse(&used, beta0)? };
            rows.push(ResultRow {
                method,
                n,
                reps_used: used.len(),
                reps_diverged: cell.len() - used.len(),
                mse,
                log_mse: mse.ln(),
                rel_est_se: None,
                rel_pred_se: None,
            });
        }
    }
    Ok(rows)
}

/// Monte-Carlo sweep over methods and budgets with paired datasets.
pub fn run_sweep(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let (outcomes, audit) = run_replications(config)?;
    if audit.violations > 0 {
        return Err(Error::Config(format!(
            "{} responses were read outside the pilot and subsample",
            audit.violations
        )));
    }
    aggregate(&outcomes, &config.scenario.beta0, &config.settings.methods, &config.settings.n_grid)
}

/// A numeric table read from CSV.
#[derive(Debug, Clone)]
pub struct RealData {
    pub feature_names: Vec<String>,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

/// Read a headed numeric CSV. `response` names the response column
/// (default: the last one). Constant feature columns are dropped with a
/// warning; an intercept column is prepended when `intercept` is set.
pub fn read_real_data(path: &Path, response: Option<&str>, intercept: bool) -> Result<RealData> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.len() < 2 {
        return Err(Error::Parse {
            row: 1,
            column: headers.len(),
            message: "need at least one feature and one response column".into(),
        });
    }
    let y_col = match response {
        Some(name) => headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("response column '{name}' not found")))?,
        None => headers.len() - 1,
    };
    let mut values: Vec<Vec<f64>> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec.position().map_or(k + 2, |p| p.line() as usize);
        if rec.len() != headers.len() {
            return Err(Error::Parse {
                row,
                column: rec.len().min(headers.len()) + 1,
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        let parsed = rec
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                cell.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        row,
                        column: c + 1,
                        message: format!("'{cell}' is not a finite number"),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        values.push(parsed);
    }
    if values.is_empty() {
        return Err(Error::Parse {
            row: 2,
            column: 1,
            message: "no data rows".into(),
        });
    }
    let n = values.len();
    let y = DVector::from_fn(n, |i, _| values[i][y_col]);
    let mut names = Vec::new();
    let mut cols: Vec<DVector<f64>> = Vec::new();
    if intercept {
        names.push("(intercept)".to_string());
        cols.push(DVector::from_element(n, 1.0));
    }
    for (c, name) in headers.iter().enumerate() {
        if c == y_col {
            continue;
        }
        let col = DVector::from_fn(n, |i, _| values[i][c]);
        if col.iter().all(|&v| v == col[0]) {
            warn!("dropping constant column '{name}'");
            continue;
        }
        names.push(name.clone());
        cols.push(col);
    }
    if cols.is_empty() {
        return Err(Error::Config("no non-constant feature columns".into()));
    }
    Ok(RealData {
        feature_names: names,
        x: DMatrix::from_columns(&cols),
        y,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealDataConfig {
    pub train_size: usize,
    pub settings: RunSettings,
}

/// Per-rep relative errors on the test split.
#[derive(Debug, Clone)]
pub struct RealDataOutcome {
    pub outcome: RepOutcome,
    pub rel_est_se: f64,
    pub rel_pred_se: f64,
}

/// Relative estimation and prediction errors of `beta_hat` against `beta0`.
pub fn relative_errors(
    beta_hat: &DVector<f64>,
    beta0: &DVector<f64>,
    x_test: &DMatrix<f64>,
    y_test: &DVector<f64>,
) -> (f64, f64) {
    let est = (beta_hat - beta0).norm_squared() / beta0.norm_squared();
    let pred = (x_test * beta_hat - y_test).norm_squared() / (x_test * beta0 - y_test).norm_squared();
    (est, pred)
}

fn split_rows(n: usize, train: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut r = rng::stream(seed, &[Stage::Split as u64]);
    let mut train_idx = rand::seq::index::sample(&mut r, n, train).into_vec();
    train_idx.sort_unstable();
    let mut is_train = vec![false; n];
    for &i in &train_idx {
        is_train[i] = true;
    }
    let test_idx = (0..n).filter(|&i| !is_train[i]).collect();
    (train_idx, test_idx)
}

/// The real-data protocol with a linear response model: one random
/// train/test split, `β₀` the training-set OLS fit, and per replication a
/// fresh pilot, surrogate `3Xγ₀ + N(0, 1)` and subsamples.
pub fn real_data_replications(data: &RealData, config: &RealDataConfig) -> Result<(Vec<RealDataOutcome>, DVector<f64>, AccessAudit)> {
    let settings = &config.settings;
    let n_all = data.y.len();
    if config.train_size == 0 || config.train_size >= n_all {
        return Err(Error::Config(format!(
            "train size {} must be in 1..{n_all}",
            config.train_size
        )));
    }
    settings.validate(config.train_size)?;
    let (train, test) = split_rows(n_all, config.train_size, settings.seed);
    let x_train = linalg::select_rows(&data.x, &train);
    let y_train = linalg::select(&data.y, &train);
    let x_test = linalg::select_rows(&data.x, &test);
    let y_test = linalg::select(&data.y, &test);
    let beta0 = scenarios::ols(&x_train, &y_train)?;
    let family_y = GlmFamily::Linear;

    let pool = settings.thread_pool()?;
    let per_rep: Vec<Result<(Vec<RealDataOutcome>, AccessAudit)>> = pool.install(|| {
        (0..settings.reps)
            .into_par_iter()
            .map(|rep| {
                let mut audit = AccessAudit::default();
                let mut dataset = Dataset::new(
                    x_train.clone(),
                    DVector::zeros(train.len()),
                    y_train.as_slice().to_vec(),
                )?;
                let mask = estimator::draw_pilot_mask(
                    dataset.len(),
                    settings.n0,
                    &mut rng::stream(settings.seed, &[rep as u64, Stage::Pilot as u64]),
                )?;
                let pilot_idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
                let surrogate = scenarios::ols(&linalg::select_rows(&dataset.x, &pilot_idx), &dataset.reveal_many(&pilot_idx))
                    .map(|g0| {
                        let mut r = rng::stream(settings.seed, &[rep as u64, Stage::Surrogate as u64]);
                        scenarios::real_data_surrogate(&dataset.x, &g0, &mut r)
                    });
                let pilot = match surrogate {
                    Ok(s) => {
                        dataset.s = s;
                        pilot_and_full_fit(&dataset, &mask, family_y, settings, rep)
                    }
                    Err(e) => Err(Error::Pilot(format!("surrogate regression on the pilot: {e}"))),
                };
                audit.check(&dataset, &mask);
                let outcomes = run_on_dataset(&dataset, rep, pilot, family_y, settings, &mut audit)
                    .into_iter()
                    .map(|o| {
                        let (e, p) = o
                            .usable_beta()
                            .map_or((f64::NAN, f64::NAN), |b| relative_errors(b, &beta0, &x_test, &y_test));
                        RealDataOutcome {
                            outcome: o,
                            rel_est_se: e,
                            rel_pred_se: p,
                        }
                    })
                    .collect();
                Ok((outcomes, audit))
            })
            .collect()
    });
    let mut all = Vec::new();
    let mut audit = AccessAudit::default();
    for r in per_rep {
        let (o, a) = r?;
        all.extend(o);
        audit = audit.merge(a);
    }
    Ok((all, beta0, audit))
}

/// Real-data rows: MSE against the training OLS fit plus mean relative
/// estimation and prediction errors over converged reps.
pub fn real_data_mode(data: &RealData, config: &RealDataConfig) -> Result<Vec<ResultRow>> {
    let (outcomes, beta0, audit) = real_data_replications(data, config)?;
    if audit.violations > 0 {
        return Err(Error::Config(format!(
            "{} responses were read outside the pilot and subsample",
            audit.violations
        )));
    }
    let plain: Vec<RepOutcome> = outcomes.iter().map(|o| o.outcome.clone()).collect();
    let mut rows = aggregate(&plain, &beta0, &config.settings.methods, &config.settings.n_grid)?;
    for row in &mut rows {
        let mut cell: Vec<&RealDataOutcome> = outcomes
            .iter()
            .filter(|o| o.outcome.method == row.method && o.outcome.n == row.n && o.outcome.usable_beta().is_some())
            .collect();
        cell.sort_by_key(|o| o.outcome.rep);
        let mean = |f: &dyn Fn(&RealDataOutcome) -> f64| {
            if cell.is_empty() {
                f64::NAN
            } else {
                cell.iter().map(|o| f(o)).sum::<f64>() / cell.len() as f64
            }
        };
        row.rel_est_se = Some(mean(&|o| o.rel_est_se));
        row.rel_pred_se = Some(mean(&|o| o.rel_pred_se));
    }
    Ok(rows)
}

fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write rows as CSV into any writer.
pub fn write_csv<W: Write>(rows: &[ResultRow], w: W) -> Result<()> {
    let extended = rows.iter().any(|r| r.rel_est_se.is_some() || r.rel_pred_se.is_some());
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["method", "n", "reps_used", "reps_diverged", "mse", "log_mse"];
    if extended {
        header.extend(["rel_est_se", "rel_pred_se"]);
    }
    wtr.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.method.name().to_string(),
            r.n.to_string(),
            r.reps_used.to_string(),
            r.reps_diverged.to_string(),
            fmt_float(r.mse),
            fmt_float(r.log_mse),
        ];
        if extended {
            rec.push(fmt_float(r.rel_est_se.unwrap_or(f64::NAN)));
            rec.push(fmt_float(r.rel_pred_se.unwrap_or(f64::NAN)));
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_json<W: Write>(rows: &[ResultRow], mut w: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, rows)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn emit_results(rows: &[ResultRow], format: OutputFormat, path: &Path) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    match format {
        OutputFormat::Csv => write_csv(rows, file),
        OutputFormat::Json => write_json(rows, file),
    }
}
