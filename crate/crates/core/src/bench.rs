//! Monte Carlo study engine.

use std::path::PathBuf;
use std::time::Instant;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cee::LinkKind;
use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimateOptions, MethodSpec};
use crate::io::{write_json, write_rows_csv};
use crate::simgen::{Form, GeneratorConfig};
use crate::zestim::SolveOptions;

pub const THREADS_ENV: &str = "EXCURSIONLAB_THREADS";
/// Largest tolerated fraction of failed replicates per (setting, method).
pub const MAX_FAILURE_FRACTION: f64 = 0.02;

/// One axis of a parameter grid. `param` is a generator field:
/// `n`, `horizon`, `lambda1`, `lambda2`, `lambda3`, `lambda` or `rho`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub param: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEntry {
    /// Column label in the outputs; defaults to the method name.
    #[serde(default)]
    pub label: Option<String>,
    #[serde(flatten)]
    pub method: MethodSpec,
}

impl MethodEntry {
    pub fn new(label: &str, method: MethodSpec) -> Self {
        MethodEntry { label: Some(label.to_string()), method }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.method.name().to_string())
    }
}

fn default_level() -> f64 {
    0.95
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub sweep: Vec<SweepAxis>,
    pub methods: Vec<MethodEntry>,
    pub replicates: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "yes")]
    pub ssc: bool,
    /// Label of the RE baseline; defaults to the first WCLS (identity) or EMEE (log) entry.
    #[serde(default)]
    pub baseline: Option<String>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl StudyConfig {
    pub fn new(generator: GeneratorConfig, methods: Vec<MethodEntry>, replicates: usize) -> Self {
        StudyConfig { generator, sweep: vec![], methods, replicates, base_seed: 0, level: 0.95, ssc: true, baseline: None, output_dir: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates < 1 {
            return Err(Error::InvalidArgument("replicates must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidArgument("a study needs at least one method".into()));
        }
        let mut labels: Vec<String> = self.methods.iter().map(MethodEntry::label).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("method labels must be unique".into()));
        }
        if let Some(b) = &self.baseline {
            if !labels.contains(b) {
                return Err(Error::InvalidArgument(format!("baseline \"{b}\" is not a method label")));
            }
        }
        for axis in &self.sweep {
            if axis.values.is_empty() {
                return Err(Error::InvalidArgument(format!("sweep over \"{}\" has no values", axis.param)));
            }
        }
        for (_, cfg) in self.settings()? {
            cfg.validate()?;
        }
        Ok(())
    }

    /// Cartesian product of the sweep axes, as `(description, generator)`.
    pub fn settings(&self) -> Result<Vec<(String, GeneratorConfig)>> {
        let mut out = vec![(String::new(), self.generator.clone())];
        for axis in &self.sweep {
            let mut next = Vec::with_capacity(out.len() * axis.values.len());
            for (desc, cfg) in &out {
                for &v in &axis.values {
                    let mut c = cfg.clone();
                    apply_param(&mut c, &axis.param, v)?;
                    let d = if desc.is_empty() { format!("{}={v}", axis.param) } else { format!("{desc};{}={v}", axis.param) };
                    next.push((d, c));
                }
            }
            out = next;
        }
        Ok(out)
    }

    fn baseline_label(&self) -> Option<String> {
        if self.baseline.is_some() {
            return self.baseline.clone();
        }
        let want = match self.generator.link() {
            LinkKind::Identity => "wcls",
            LinkKind::Log => "emee",
        };
        self.methods.iter().find(|m| m.method.name() == want).map(MethodEntry::label)
    }
}

/// Set a numeric generator field by name.
pub fn apply_param(cfg: &mut GeneratorConfig, param: &str, value: f64) -> Result<()> {
    let as_count = |v: f64| -> Result<usize> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::InvalidArgument(format!("{param} must be a positive integer, got {v}")))
        }
    };
    let unknown = || Error::InvalidArgument(format!("unknown or inapplicable sweep parameter \"{param}\""));
    match (cfg, param) {
        (GeneratorConfig::Continuous(c), "n") => c.n = as_count(value)?,
        (GeneratorConfig::Binary(c), "n") => c.n = as_count(value)?,
        (GeneratorConfig::Count(c), "n") => c.n = as_count(value)?,
        (GeneratorConfig::Continuous(c), "horizon") => c.horizon = as_count(value)?,
        (GeneratorConfig::Binary(c), "horizon") => c.horizon = as_count(value)?,
        (GeneratorConfig::Count(c), "horizon") => c.horizon = as_count(value)?,
        (GeneratorConfig::Continuous(c), "lambda1") => c.lambda1 = value,
        (GeneratorConfig::Continuous(c), "lambda2") => c.lambda2 = value,
        (GeneratorConfig::Continuous(c), "lambda3") => c.lambda3 = value,
        (GeneratorConfig::Continuous(c), "rho") => c.rho = value,
        (GeneratorConfig::Binary(c), "lambda") => c.lambda = value,
        (GeneratorConfig::Binary(c), "rho") => c.rho = value,
        (GeneratorConfig::Count(c), "lambda") => c.lambda = value,
        (GeneratorConfig::Count(c), "rho") => c.rho = value,
        _ => return Err(unknown()),
    }
    Ok(())
}

/// Replace the form of any generator.
pub fn with_form(mut cfg: GeneratorConfig, form: Form) -> GeneratorConfig {
    match &mut cfg {
        GeneratorConfig::Continuous(c) => c.form = form,
        GeneratorConfig::Binary(c) => c.form = form,
        GeneratorConfig::Count(c) => c.form = form,
    }
    cfg
}

/// One estimate on one replicate. Only the first CEE coordinate is summarized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRow {
    pub setting: usize,
    pub params: String,
    pub replicate: usize,
    pub seed: u64,
    pub method: String,
    pub truth: f64,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub covered: Option<bool>,
    pub runtime_s: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub setting: usize,
    pub params: String,
    pub method: String,
    pub n_ok: usize,
    pub failures: usize,
    pub truth: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    pub mse: f64,
    pub emp_sd: f64,
    pub mean_se: f64,
    pub coverage: f64,
    /// Baseline variance over this method's variance; empty without a baseline.
    pub re: Option<f64>,
    pub mean_runtime_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub metrics: Vec<MetricsRow>,
    pub raw: Vec<RawRow>,
}

impl StudyResult {
    pub fn metric(&self, setting: usize, method: &str) -> Option<&MetricsRow> {
        self.metrics.iter().find(|m| m.setting == setting && m.method == method)
    }

    /// Successful estimates of one method, ordered by replicate.
    pub fn estimates(&self, setting: usize, method: &str) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = self
            .raw
            .iter()
            .filter(|r| r.setting == setting && r.method == method)
            .filter_map(|r| r.estimate.map(|e| (r.replicate, e)))
            .collect();
        v.sort_by_key(|(r, _)| *r);
        v
    }
}

/// `var_baseline / var_target`; above 1 means the target is more efficient.
pub fn relative_efficiency(var_target: f64, var_baseline: f64) -> Result<f64> {
    if !(var_target > 0.0 && var_baseline > 0.0) {
        return Err(Error::InvalidArgument(format!("variances must be positive, got target {var_target} and baseline {var_baseline}")));
    }
    Ok(var_baseline / var_target)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with the `n - 1` divisor.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Percentile bootstrap interval for the RE of paired replicate estimates.
pub fn bootstrap_re_interval(target: &[f64], baseline: &[f64], draws: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if target.len() != baseline.len() || target.len() < 2 {
        return Err(Error::InvalidArgument("paired estimates of equal length >= 2 are required".into()));
    }
    let n = target.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut res = Vec::with_capacity(draws);
    let (mut bt, mut bb) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..draws {
        for k in 0..n {
            let j = rng.random_range(0..n);
            bt[k] = target[j];
            bb[k] = baseline[j];
        }
        if let Ok(re) = relative_efficiency(sample_variance(&bt), sample_variance(&bb)) {
            res.push(re);
        }
    }
    if res.is_empty() {
        return Err(Error::InvalidArgument("no bootstrap draw had positive variances".into()));
    }
    res.sort_by(f64::total_cmp);
    let q = |p: f64| res[((p * (res.len() - 1) as f64).round() as usize).min(res.len() - 1)];
    let a = (1.0 - level) / 2.0;
    Ok((q(a), q(1.0 - a)))
}

/// Worker pool capped by `EXCURSIONLAB_THREADS`.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let cap = match std::env::var(THREADS_ENV) {
        Ok(s) => Some(s.trim().parse::<usize>().ok().filter(|&k| k >= 1).ok_or_else(|| Error::InvalidArgument(format!("{THREADS_ENV} must be a positive integer, got \"{s}\"")))?),
        Err(_) => None,
    };
    let available = std::thread::available_parallelism().map(|k| k.get()).unwrap_or(1);
    let threads = cap.map_or(available, |c| c.min(available));
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

/// Estimate every method on replicate `replicate` of one setting.
pub fn run_replicate(config: &StudyConfig, setting: usize, params: &str, generator: &GeneratorConfig, replicate: usize) -> Result<Vec<RawRow>> {
    let seed = config.base_seed.wrapping_add(replicate as u64);
    let (panel, truth) = generator.clone().with_seed(seed).generate()?;
    let beta_star = truth.beta_star()[0];
    let mut opts = EstimateOptions::new(generator.link()).level(config.level).ssc(config.ssc).with_truth(truth);
    opts.solve = SolveOptions::default();
    Ok(config
        .methods
        .iter()
        .map(|entry| {
            let start = Instant::now();
            let out = estimate(&panel, &entry.method, &opts);
            let runtime_s = start.elapsed().as_secs_f64();
            let mut row = RawRow {
                setting,
                params: params.to_string(),
                replicate,
                seed,
                method: entry.label(),
                truth: beta_star,
                estimate: None,
                se: None,
                lower: None,
                upper: None,
                covered: None,
                runtime_s,
                error: None,
            };
            match out {
                Ok(rep) => {
                    let ci = rep.ci[0];
                    row.estimate = Some(rep.beta[0]);
                    row.se = Some(rep.se_used()[0]);
                    row.lower = Some(ci.lower);
                    row.upper = Some(ci.upper);
                    row.covered = Some(ci.contains(beta_star));
                }
                Err(e) => row.error = Some(format!("{}: {e}", e.kind())),
            }
            row
        })
        .collect())
}

fn aggregate(setting: usize, params: &str, label: &str, rows: &[&RawRow]) -> MetricsRow {
    let ok: Vec<&&RawRow> = rows.iter().filter(|r| r.estimate.is_some()).collect();
    let est: Vec<f64> = ok.iter().filter_map(|r| r.estimate).collect();
    let truth = rows.first().map_or(f64::NAN, |r| r.truth);
    let n_ok = est.len();
    let nan_if_empty = |v: f64| if n_ok == 0 { f64::NAN } else { v };
    let m = nan_if_empty(mean(&est));
    MetricsRow {
        setting,
        params: params.to_string(),
        method: label.to_string(),
        n_ok,
        failures: rows.len() - n_ok,
        truth,
        mean_estimate: m,
        bias: m - truth,
        mse: nan_if_empty(est.iter().map(|e| (e - truth) * (e - truth)).sum::<f64>() / n_ok as f64),
        emp_sd: sample_variance(&est).sqrt(),
        mean_se: nan_if_empty(mean(&ok.iter().filter_map(|r| r.se).collect::<Vec<_>>())),
        coverage: nan_if_empty(ok.iter().filter(|r| r.covered == Some(true)).count() as f64 / n_ok as f64),
        re: None,
        mean_runtime_s: mean(&rows.iter().map(|r| r.runtime_s).collect::<Vec<_>>()),
    }
}

/// Run every setting and replicate, aggregate, and write `metrics.csv`,
/// `raw.csv` and `config.json` when an output directory is configured.
pub fn run_study(config: &StudyConfig) -> Result<StudyResult> {
    config.validate()?;
    let settings = config.settings()?;
    let pool = thread_pool()?;
    let mut raw: Vec<RawRow> = Vec::new();
    for (s, (params, generator)) in settings.iter().enumerate() {
        info!("setting {s} ({params}): {} replicates", config.replicates);
        let rows: Vec<Vec<RawRow>> = pool.install(|| (0..config.replicates).into_par_iter().map(|r| run_replicate(config, s, params, generator, r)).collect::<Result<_>>())?;
        raw.extend(rows.into_iter().flatten());
    }
    let baseline = config.baseline_label();
    let mut metrics = Vec::new();
    for (s, (params, _)) in settings.iter().enumerate() {
        let mut block: Vec<MetricsRow> = config
            .methods
            .iter()
            .map(|m| {
                let label = m.label();
                let rows: Vec<&RawRow> = raw.iter().filter(|r| r.setting == s && r.method == label).collect();
                aggregate(s, params, &label, &rows)
            })
            .collect();
        for row in &block {
            if row.failures as f64 > MAX_FAILURE_FRACTION * config.replicates as f64 {
                let first = raw.iter().find(|r| r.setting == s && r.method == row.method && r.error.is_some()).and_then(|r| r.error.clone()).unwrap_or_default();
                return Err(Error::Study(format!("{} failed on {} of {} replicates in setting {s} ({params}); first error: {first}", row.method, row.failures, config.replicates)));
            }
        }
        if let Some(b) = &baseline {
            let var_b = block.iter().find(|r| &r.method == b).map(|r| r.emp_sd * r.emp_sd);
            for row in &mut block {
                row.re = var_b.and_then(|vb| relative_efficiency(row.emp_sd * row.emp_sd, vb).ok());
            }
        }
        metrics.extend(block);
    }
    let result = StudyResult { metrics, raw };
    if let Some(dir) = &config.output_dir {
        std::fs::create_dir_all(dir)?;
        write_rows_csv(&result.metrics, dir.join("metrics.csv"))?;
        write_rows_csv(&result.raw, dir.join("raw.csv"))?;
        write_json(config, dir.join("config.json"))?;
    }
    Ok(result)
}
