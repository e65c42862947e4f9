//! Simulated micro-randomized trials with continuous, binary and count outcomes.
//!
//! Every generator draws `Z_t ~ Unif[-2, 2]` and `A_t ~ Bernoulli(0.5)` at each
//! of `T` decision points, all of them available. The baseline mean
//! `mu_t(H_t, 0)` takes one of four [`Form`]s. Trajectory `i` uses stream `i`
//! of a ChaCha8 generator seeded with the configured seed, so panels are
//! deterministic functions of the configuration.
//!
//! History columns are `t`, `z` and, for binary and count outcomes, the lagged
//! outcome `y_lag` (zero at `t = 1`). The moderator is the intercept only.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use nalgebra::Cholesky;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cee::{phi_atom, LinkKind};
use crate::error::{Error, Result};
use crate::linalg::{sym_pinv, Matrix, PINV_REL_EPS};
use crate::panel::{DecisionPoint, Panel, PanelMeta, Trajectory};

pub const DEFAULT_HORIZON: usize = 10;
pub const RAND_PROB: f64 = 0.5;
pub const Z_LO: f64 = -2.0;
pub const Z_HI: f64 = 2.0;

pub mod truth {
    pub mod continuous {
        pub const BETA0: f64 = 0.5;
        pub const BETA1: f64 = 0.2;
        pub const ALPHA0: f64 = 1.0;
        pub const ALPHA1: f64 = 1.0;
        pub const ALPHA2: f64 = 1.0;
    }
    pub mod binary {
        pub const BETA0: f64 = 0.225;
        pub const BETA1: f64 = 0.025;
        pub const ALPHA0: f64 = -2.5;
        pub const ALPHA1: f64 = 1.0;
        pub const ALPHA2: f64 = 1.0;
        pub const ALPHA3: f64 = 0.05;
    }
    pub mod count {
        pub const BETA0: f64 = 0.1;
        pub const ALPHA0: f64 = -5.0;
        pub const ALPHA1: f64 = 0.8;
        pub const ALPHA2: f64 = 0.5;
    }
}

/// Default Monte Carlo budget (trajectories) for the oracle weights.
pub const DEFAULT_MC_BUDGET: usize = 1_000_000;
const ORACLE_SEED: u64 = 0x5EED_0DD5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Form {
    /// Linear (continuous) or log-linear (binary, count).
    #[serde(alias = "log_linear")]
    Linear,
    #[serde(alias = "sn")]
    SimpleNonlinear,
    Periodic,
    Step,
}

impl Form {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "linear" | "log_linear" => Ok(Form::Linear),
            "simple_nonlinear" | "sn" | "nonlinear" => Ok(Form::SimpleNonlinear),
            "periodic" => Ok(Form::Periodic),
            "step" => Ok(Form::Step),
            other => Err(Error::InvalidArgument(format!("unknown form `{other}`"))),
        }
    }
}

/// `6 x (1 - x)` on `[0, 1]`, zero outside.
pub fn beta22_pdf(x: f64) -> f64 {
    if (0.0..=1.0).contains(&x) {
        6.0 * x * (1.0 - x)
    } else {
        0.0
    }
}

fn even(k: f64) -> f64 {
    if (k.floor() as i64).rem_euclid(2) == 0 {
        1.0
    } else {
        0.0
    }
}

fn default_horizon() -> usize {
    DEFAULT_HORIZON
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousConfig {
    pub n: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    pub form: Form,
    #[serde(default)]
    pub lambda1: f64,
    #[serde(default)]
    pub lambda2: f64,
    #[serde(default = "one")]
    pub lambda3: f64,
    #[serde(default = "half")]
    pub rho: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn binary_rho() -> f64 {
    0.1
}
fn count_rho() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryConfig {
    pub n: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    pub form: Form,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "binary_rho")]
    pub rho: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountConfig {
    pub n: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    pub form: Form,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "count_rho")]
    pub rho: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ContinuousConfig {
    pub fn new(n: usize, form: Form) -> Self {
        ContinuousConfig { n, horizon: DEFAULT_HORIZON, form, lambda1: 0.0, lambda2: 0.0, lambda3: 1.0, rho: 0.5, seed: 0 }
    }

    /// `mu_t(H_t, 0)`.
    pub fn mu0(&self, t: usize, z: f64) -> f64 {
        use truth::continuous::*;
        let t = t as f64;
        match self.form {
            Form::Linear => ALPHA0 + ALPHA1 * t + ALPHA2 * z,
            Form::SimpleNonlinear => ALPHA0 + self.lambda1 * (beta22_pdf(z / 6.0 + 0.5) + beta22_pdf(t / self.horizon as f64)),
            Form::Periodic => ALPHA0 + self.lambda1 * (t.sin() + z.sin()),
            Form::Step => ALPHA0 + self.lambda1 * (even(t) + even(10.0 * z)),
        }
    }

    pub fn error_sd(&self, t: usize) -> f64 {
        ((t as f64 - 1.0) * self.lambda2 + self.lambda3).sqrt()
    }

    /// Cholesky factor of `Corr(eps_t, eps_u) = rho^{|t-u|/2}`.
    pub fn correlation_factor(&self) -> Result<Matrix> {
        let t = self.horizon;
        let corr = Matrix::from_fn(t, t, |a, b| if a == b { 1.0 } else { self.rho.powf((a as f64 - b as f64).abs() / 2.0) });
        Cholesky::new(corr)
            .map(|c| c.l())
            .ok_or_else(|| Error::Generator(format!("correlation matrix is not positive definite (rho = {})", self.rho)))
    }

    fn validate(&self) -> Result<()> {
        check_common(self.n, self.horizon)?;
        if !(self.lambda2 >= 0.0 && self.lambda3 >= 0.0) || !self.lambda1.is_finite() {
            return Err(Error::Generator("need lambda2, lambda3 >= 0 and finite lambda1".into()));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Generator(format!("rho must lie in [0, 1), got {}", self.rho)));
        }
        if self.lambda3 == 0.0 && self.lambda2 == 0.0 {
            return Err(Error::Generator("outcome variance is identically zero".into()));
        }
        Ok(())
    }
}

impl BinaryConfig {
    pub fn new(n: usize, form: Form) -> Self {
        BinaryConfig { n, horizon: DEFAULT_HORIZON, form, lambda: 0.0, rho: 0.1, seed: 0 }
    }

    /// `log mu_t(H_t, 0)`.
    pub fn log_mu0(&self, t: usize, z: f64, y_lag: f64) -> f64 {
        use truth::binary::*;
        let tt = t as f64;
        let big_t = self.horizon as f64;
        let drift = ALPHA3 * (tt - 1.0) / big_t;
        let l = self.lambda;
        match self.form {
            Form::Linear => ALPHA0 + ALPHA1 * tt / big_t + ALPHA2 * (z / 6.0 + 0.5) + self.rho * y_lag + drift,
            Form::SimpleNonlinear => {
                ALPHA0 + 2.0 * (1.0 - l) + 2.0 / 3.0 * l * (beta22_pdf(z / 6.0 + 0.5) + beta22_pdf(tt / big_t) + self.rho * y_lag) + drift
            }
            Form::Periodic => ALPHA0 + 2.0 * (1.0 - l) + 0.5 * l * ((tt / 5.0).sin() + z.sin() + 2.0) + self.rho * y_lag + drift,
            Form::Step => ALPHA0 + 2.0 * (1.0 - l) + l * (even(tt / 5.0) + even(2.0 * z)) + self.rho * y_lag + drift,
        }
    }

    pub fn mu(&self, t: usize, z: f64, y_lag: f64, a: bool) -> f64 {
        use truth::binary::*;
        let effect = if a { BETA0 + BETA1 * z } else { 0.0 };
        (effect + self.log_mu0(t, z, y_lag)).exp()
    }

    fn validate(&self) -> Result<()> {
        check_common(self.n, self.horizon)?;
        if !(0.0..=1.0).contains(&self.lambda) || !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::Generator("need lambda in [0, 1] and rho >= 0".into()));
        }
        Ok(())
    }
}

impl CountConfig {
    pub fn new(n: usize, form: Form) -> Self {
        CountConfig { n, horizon: DEFAULT_HORIZON, form, lambda: 0.0, rho: 0.01, seed: 0 }
    }

    pub fn log_mu0(&self, t: usize, y_lag: f64) -> f64 {
        use truth::count::*;
        let tt = t as f64;
        let lag = self.rho * y_lag;
        match self.form {
            Form::Linear => ALPHA0 + ALPHA1 * tt + lag,
            Form::SimpleNonlinear => ALPHA2 + self.lambda * beta22_pdf(tt / self.horizon as f64) + lag,
            Form::Periodic => ALPHA2 + self.lambda * tt.sin() + lag,
            Form::Step => ALPHA2 + self.lambda * even(tt) + lag,
        }
    }

    pub fn mu(&self, t: usize, y_lag: f64, a: bool) -> f64 {
        let effect = if a { truth::count::BETA0 } else { 0.0 };
        (effect + self.log_mu0(t, y_lag)).exp()
    }

    fn validate(&self) -> Result<()> {
        check_common(self.n, self.horizon)?;
        if !self.lambda.is_finite() || !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::Generator("need finite lambda and rho >= 0".into()));
        }
        Ok(())
    }
}

fn check_common(n: usize, horizon: usize) -> Result<()> {
    if n < 2 || horizon < 1 {
        return Err(Error::Generator(format!("need n >= 2 and T >= 1, got n = {n}, T = {horizon}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum GeneratorConfig {
    Continuous(ContinuousConfig),
    Binary(BinaryConfig),
    Count(CountConfig),
}

impl GeneratorConfig {
    pub fn n(&self) -> usize {
        match self {
            GeneratorConfig::Continuous(c) => c.n,
            GeneratorConfig::Binary(c) => c.n,
            GeneratorConfig::Count(c) => c.n,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            GeneratorConfig::Continuous(c) => c.horizon,
            GeneratorConfig::Binary(c) => c.horizon,
            GeneratorConfig::Count(c) => c.horizon,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            GeneratorConfig::Continuous(c) => c.seed,
            GeneratorConfig::Binary(c) => c.seed,
            GeneratorConfig::Count(c) => c.seed,
        }
    }

    pub fn form(&self) -> Form {
        match self {
            GeneratorConfig::Continuous(c) => c.form,
            GeneratorConfig::Binary(c) => c.form,
            GeneratorConfig::Count(c) => c.form,
        }
    }

    pub fn with_n(mut self, n: usize) -> Self {
        match &mut self {
            GeneratorConfig::Continuous(c) => c.n = n,
            GeneratorConfig::Binary(c) => c.n = n,
            GeneratorConfig::Count(c) => c.n = n,
        }
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        match &mut self {
            GeneratorConfig::Continuous(c) => c.seed = seed,
            GeneratorConfig::Binary(c) => c.seed = seed,
            GeneratorConfig::Count(c) => c.seed = seed,
        }
        self
    }

    /// Identity for continuous outcomes, log otherwise.
    pub fn link(&self) -> LinkKind {
        match self {
            GeneratorConfig::Continuous(_) => LinkKind::Identity,
            _ => LinkKind::Log,
        }
    }

    pub fn history_names(&self) -> Vec<String> {
        match self {
            GeneratorConfig::Continuous(_) => vec!["t".into(), "z".into()],
            _ => vec!["t".into(), "z".into(), "y_lag".into()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            GeneratorConfig::Continuous(c) => c.validate(),
            GeneratorConfig::Binary(c) => c.validate(),
            GeneratorConfig::Count(c) => c.validate(),
        }
    }

    /// `mu_t(h, a)` with `h = (t, z[, y_lag])`.
    pub fn mean(&self, t: usize, history: &[f64], a: bool) -> f64 {
        let z = history[1];
        match self {
            GeneratorConfig::Continuous(c) => {
                let effect = if a { truth::continuous::BETA0 + truth::continuous::BETA1 * z } else { 0.0 };
                effect + c.mu0(t, z)
            }
            GeneratorConfig::Binary(c) => c.mu(t, z, history[2], a),
            GeneratorConfig::Count(c) => c.mu(t, history[2], a),
        }
    }

    /// Marginal effect on the link scale at `S_t = {}`.
    pub fn beta_star(&self) -> f64 {
        match self {
            GeneratorConfig::Continuous(_) => truth::continuous::BETA0,
            GeneratorConfig::Count(_) => truth::count::BETA0,
            GeneratorConfig::Binary(c) => binary_marginal_effect(c),
        }
    }

    fn draw_trajectory(&self, rng: &mut ChaCha8Rng, chol: Option<&Matrix>) -> Result<Trajectory> {
        let horizon = self.horizon();
        let eps: Vec<f64> = match (self, chol) {
            (GeneratorConfig::Continuous(c), Some(l)) => {
                let std: Vec<f64> = (0..horizon).map(|_| rng.sample(StandardNormal)).collect();
                (0..horizon)
                    .map(|t0| c.error_sd(t0 + 1) * (0..=t0).map(|k| l[(t0, k)] * std[k]).sum::<f64>())
                    .collect()
            }
            _ => vec![],
        };
        let mut y_lag = 0.0;
        let mut points = Vec::with_capacity(horizon);
        for t0 in 0..horizon {
            let t = t0 + 1;
            let z: f64 = rng.random_range(Z_LO..Z_HI);
            let treat = rng.random_bool(RAND_PROB);
            let history = match self {
                GeneratorConfig::Continuous(_) => vec![t as f64, z],
                _ => vec![t as f64, z, y_lag],
            };
            let mean = self.mean(t, &history, treat);
            let outcome = match self {
                GeneratorConfig::Continuous(_) => mean + eps[t0],
                GeneratorConfig::Binary(_) => {
                    if !(mean > 0.0 && mean < 1.0) {
                        return Err(Error::Generator(format!(
                            "binary mean {mean} outside (0, 1) at t = {t}, z = {z}, y_lag = {y_lag} for {self:?}"
                        )));
                    }
                    if rng.random_bool(mean) {
                        1.0
                    } else {
                        0.0
                    }
                }
                GeneratorConfig::Count(_) => {
                    let dist = Poisson::new(mean).map_err(|e| Error::Generator(format!("Poisson mean {mean}: {e}")))?;
                    dist.sample(rng)
                }
            };
            y_lag = outcome;
            points.push(DecisionPoint { avail: true, prob: RAND_PROB, treat, outcome, history, moderator: vec![1.0] });
        }
        Ok(Trajectory::new(points))
    }

    fn factor(&self) -> Result<Option<Matrix>> {
        match self {
            GeneratorConfig::Continuous(c) => c.correlation_factor().map(Some),
            _ => Ok(None),
        }
    }

    /// Draw trajectories `range` with the configured seed.
    fn draw_range(&self, seed: u64, range: std::ops::Range<usize>) -> Result<Vec<Trajectory>> {
        let chol = self.factor()?;
        range
            .into_par_iter()
            .with_min_len(64)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                self.draw_trajectory(&mut rng, chol.as_ref())
            })
            .collect()
    }

    /// Draw a panel and its truth.
    pub fn generate(&self) -> Result<(Panel, TruthHandle)> {
        self.validate()?;
        let trajectories = self.draw_range(self.seed(), 0..self.n())?;
        let meta = PanelMeta { history_names: self.history_names(), moderator_names: vec!["1".into()] };
        let panel = Panel::new(trajectories, meta)?;
        Ok((panel, TruthHandle::new(self.clone())))
    }

    /// Key identifying the data-generating law, ignoring `n` and the seed.
    fn law_key(&self) -> String {
        let law = self.clone().with_n(0).with_seed(0);
        serde_json::to_string(&law).expect("config serializes")
    }
}

pub fn gen_continuous(cfg: &ContinuousConfig) -> Result<(Panel, TruthHandle)> {
    GeneratorConfig::Continuous(cfg.clone()).generate()
}

pub fn gen_binary(cfg: &BinaryConfig) -> Result<(Panel, TruthHandle)> {
    GeneratorConfig::Binary(cfg.clone()).generate()
}

pub fn gen_count(cfg: &CountConfig) -> Result<(Panel, TruthHandle)> {
    GeneratorConfig::Count(cfg.clone()).generate()
}

/// Composite Simpson rule on `[a, b]` with `m` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, m: usize) -> f64 {
    let h = (b - a) / m as f64;
    let mut s = f(a) + f(b);
    for k in 1..m {
        s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// `beta0 + log(int e^{beta1 z} g(z) dz / int g(z) dz)`, where `g` is the
/// `Z` factor of `mu_t(H_t, 0)`. The step form jumps at multiples of 1/2, so
/// the integral is split there.
fn binary_marginal_effect(c: &BinaryConfig) -> f64 {
    use truth::binary::*;
    let g = |z: f64| c.log_mu0(1, z, 0.0).exp();
    let mut num = 0.0;
    let mut den = 0.0;
    let pieces = ((Z_HI - Z_LO) / 0.5).round() as usize;
    for k in 0..pieces {
        let a = Z_LO + 0.5 * k as f64;
        let b = a + 0.5;
        // keep the evaluation points strictly inside each piece for the step form
        let (lo, hi) = (a + 1e-12, b - 1e-12);
        num += simpson(|z| (BETA1 * z).exp() * g(z), lo, hi, 400);
        den += simpson(g, lo, hi, 400);
    }
    BETA0 + (num / den).ln()
}

/// Known truth of a generator.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthHandle {
    pub config: GeneratorConfig,
    beta_star: f64,
}

impl TruthHandle {
    pub fn new(config: GeneratorConfig) -> Self {
        let beta_star = config.beta_star();
        TruthHandle { config, beta_star }
    }

    pub fn link(&self) -> LinkKind {
        self.config.link()
    }

    /// Marginal `beta*` (dimension 1).
    pub fn beta_star(&self) -> Vec<f64> {
        vec![self.beta_star]
    }

    /// The generator's own mean `mu*_t(h, a)`.
    pub fn mu(&self, t: usize, history: &[f64], a: bool) -> f64 {
        self.config.mean(t, history, a)
    }

    /// `d*_t(s)`; see [`oracle_dstar`].
    pub fn dstar(&self, t: usize, s: &[f64], mc_budget: usize) -> Result<Matrix> {
        oracle_dstar(self, t, s, mc_budget)
    }
}

type DstarCache = Mutex<HashMap<(String, usize), std::sync::Arc<Vec<Matrix>>>>;

fn dstar_cache() -> &'static DstarCache {
    static CACHE: OnceLock<DstarCache> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Monte Carlo `d*_t = E{d_beta phi_t(beta*, mu*)} [E{phi_t phi_t^T}]^+` at
/// `S_t = {}`, from `mc_budget` fresh trajectories. Results are cached per
/// generating law and budget; `s` must be the intercept row.
pub fn oracle_dstar(truth: &TruthHandle, t: usize, s: &[f64], mc_budget: usize) -> Result<Matrix> {
    if s.len() != 1 {
        return Err(Error::InvalidArgument("oracle weights are available for the marginal effect only".into()));
    }
    let all = oracle_dstar_all(truth, mc_budget)?;
    all.get(t.wrapping_sub(1))
        .cloned()
        .ok_or_else(|| Error::InvalidArgument(format!("t = {t} outside 1..={}", all.len())))
}

/// All `T` oracle weights at once.
pub fn oracle_dstar_all(truth: &TruthHandle, mc_budget: usize) -> Result<std::sync::Arc<Vec<Matrix>>> {
    if mc_budget < 2 {
        return Err(Error::InvalidArgument("Monte Carlo budget must be at least 2".into()));
    }
    let key = (truth.config.law_key(), mc_budget);
    if let Some(hit) = dstar_cache().lock().expect("cache lock").get(&key) {
        return Ok(hit.clone());
    }
    let cfg = &truth.config;
    cfg.validate()?;
    let horizon = cfg.horizon();
    let link = cfg.link();
    let beta = truth.beta_star();
    const CHUNK: usize = 10_000;
    let chunks = mc_budget.div_ceil(CHUNK);
    let partial: Vec<Vec<(f64, f64)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let range = c * CHUNK..((c + 1) * CHUNK).min(mc_budget);
            let chol = cfg.factor()?;
            let mut sums = vec![(0.0, 0.0); horizon];
            for i in range {
                let mut rng = ChaCha8Rng::seed_from_u64(ORACLE_SEED);
                rng.set_stream(i as u64);
                let traj = cfg.draw_trajectory(&mut rng, chol.as_ref())?;
                for (t0, pt) in traj.points.iter().enumerate() {
                    let mu1 = cfg.mean(t0 + 1, &pt.history, true);
                    let mu0 = cfg.mean(t0 + 1, &pt.history, false);
                    let atom = phi_atom(link, pt, mu1, mu0, &beta)?;
                    sums[t0].0 += atom.jac[(0, 0)];
                    sums[t0].1 += atom.value[0] * atom.value[0];
                }
            }
            Ok(sums)
        })
        .collect::<Result<_>>()?;
    let mut mats = Vec::with_capacity(horizon);
    for t0 in 0..horizon {
        let (j, v) = partial.iter().fold((0.0, 0.0), |acc, s| (acc.0 + s[t0].0, acc.1 + s[t0].1));
        let m = mc_budget as f64;
        let inv = sym_pinv(&Matrix::from_element(1, 1, v / m), PINV_REL_EPS)
            .ok_or_else(|| Error::Singular(format!("second moment of phi vanishes at t = {}", t0 + 1)))?;
        mats.push(Matrix::from_element(1, 1, j / m) * inv);
    }
    let mats = std::sync::Arc::new(mats);
    dstar_cache().lock().expect("cache lock").insert(key, mats.clone());
    Ok(mats)
}
