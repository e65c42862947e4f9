//! Outcome regressions `mu_t(h, a) = E(Y_{t+1} | H_t = h, A_t = a, I_t = 1)`.
//!
//! Each treatment arm gets its own predictor. Predictors are either fitted per
//! decision point or pooled over decision points (in which case the caller
//! should include `t` among the history features). Only available points of
//! the requested trajectories are read.

mod knn;
mod linear;
mod stack;
mod tree;

use std::fmt::Debug;
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::cee::LinkKind;
use crate::error::{Error, Result};
use crate::panel::Panel;

pub use knn::KnnModel;
pub use linear::{FeatureBasis, LinearModel, SplineBasis, SplineModel};
pub use stack::{fit_stack, StackModel};
pub use tree::{ForestParams, RandomForest, RegressionTree, TreeParams};

/// Default ridge penalty for the least-squares learners.
pub const DEFAULT_RIDGE: f64 = 1e-8;
pub const DEFAULT_KNOTS: usize = 5;

/// A fitted regression function.
pub trait Predictor: Send + Sync + Debug {
    fn predict(&self, x: &[f64]) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegressorKind {
    /// Mean outcome of the arm at each decision point; ignores features.
    PerTimeMean,
    /// A fixed prediction, used to freeze the nuisance at a chosen value.
    Constant { value: f64 },
    LinearLs {
        #[serde(default = "default_ridge")]
        ridge: f64,
    },
    /// `LinearLs` on an additive natural cubic spline expansion of the features.
    Spline {
        #[serde(default = "default_knots")]
        knots: usize,
        #[serde(default = "default_ridge")]
        ridge: f64,
    },
    KernelKnn { k: usize },
    Tree {
        #[serde(default)]
        max_depth: Option<usize>,
        min_leaf: usize,
    },
    Forest {
        #[serde(default = "default_trees")]
        n_trees: usize,
        #[serde(default = "default_depth")]
        max_depth: Option<usize>,
        #[serde(default = "default_min_leaf")]
        min_leaf: usize,
        #[serde(default = "default_subsample")]
        subsample: f64,
        #[serde(default)]
        seed: u64,
    },
    Stack { members: Vec<RegressorKind>, link: LinkKind },
}

fn default_ridge() -> f64 {
    DEFAULT_RIDGE
}
fn default_knots() -> usize {
    DEFAULT_KNOTS
}
fn default_trees() -> usize {
    200
}
fn default_depth() -> Option<usize> {
    Some(6)
}
fn default_min_leaf() -> usize {
    5
}
fn default_subsample() -> f64 {
    0.8
}

impl RegressorKind {
    pub fn forest_default(seed: u64) -> Self {
        RegressorKind::Forest {
            n_trees: default_trees(),
            max_depth: default_depth(),
            min_leaf: default_min_leaf(),
            subsample: default_subsample(),
            seed,
        }
    }

    pub fn spline_default() -> Self {
        RegressorKind::Spline { knots: DEFAULT_KNOTS, ridge: DEFAULT_RIDGE }
    }

    /// Parse a short learner name such as `linear_ls`, `spline:7`, `forest:100`,
    /// `knn:10`, `tree:4`, `constant:0` or `stack`, or a JSON object.
    /// `stack` combines linear_ls, spline and forest under `link`.
    pub fn parse(s: &str, link: LinkKind) -> Result<Self> {
        let s = s.trim();
        if s.starts_with('{') {
            let kind: RegressorKind = serde_json::from_str(s).map_err(|e| Error::InvalidArgument(format!("nuisance JSON: {e}")))?;
            kind.validate()?;
            return Ok(kind);
        }
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |default: f64| -> Result<f64> {
            arg.map_or(Ok(default), |a| a.trim().parse::<f64>().map_err(|_| Error::InvalidArgument(format!("bad argument `{a}` for nuisance `{name}`"))))
        };
        let kind = match name.to_ascii_lowercase().replace('-', "_").as_str() {
            "per_time_mean" | "mean" => RegressorKind::PerTimeMean,
            "constant" => RegressorKind::Constant { value: num(0.0)? },
            "linear_ls" | "linear" | "lm" => RegressorKind::LinearLs { ridge: num(DEFAULT_RIDGE)? },
            "spline" | "gam" => RegressorKind::Spline { knots: num(DEFAULT_KNOTS as f64)? as usize, ridge: DEFAULT_RIDGE },
            "kernel_knn" | "knn" => RegressorKind::KernelKnn { k: num(10.0)? as usize },
            "tree" => RegressorKind::Tree { max_depth: Some(num(4.0)? as usize), min_leaf: default_min_leaf() },
            "forest" | "rf" => match RegressorKind::forest_default(0) {
                RegressorKind::Forest { max_depth, min_leaf, subsample, seed, .. } => {
                    RegressorKind::Forest { n_trees: num(default_trees() as f64)? as usize, max_depth, min_leaf, subsample, seed }
                }
                other => other,
            },
            "stack" | "sl" => RegressorKind::Stack {
                members: vec![RegressorKind::LinearLs { ridge: DEFAULT_RIDGE }, RegressorKind::spline_default(), RegressorKind::forest_default(0)],
                link,
            },
            other => return Err(Error::InvalidArgument(format!("unknown nuisance learner `{other}`"))),
        };
        kind.validate()?;
        Ok(kind)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        match self {
            RegressorKind::PerTimeMean => Ok(()),
            RegressorKind::Constant { value } => {
                if value.is_finite() {
                    Ok(())
                } else {
                    bad("constant nuisance must be finite")
                }
            }
            RegressorKind::LinearLs { ridge } => {
                if *ridge >= 0.0 {
                    Ok(())
                } else {
                    bad("ridge must be nonnegative")
                }
            }
            RegressorKind::Spline { knots, ridge } => {
                if *knots >= 2 && *ridge >= 0.0 {
                    Ok(())
                } else {
                    bad("spline needs >= 2 knots and a nonnegative ridge")
                }
            }
            RegressorKind::KernelKnn { k } => {
                if *k >= 1 {
                    Ok(())
                } else {
                    bad("k must be positive")
                }
            }
            RegressorKind::Tree { max_depth, min_leaf } => {
                if *min_leaf >= 1 && max_depth.is_none_or(|d| d >= 1) {
                    Ok(())
                } else {
                    bad("tree hyperparameters must be positive")
                }
            }
            RegressorKind::Forest { n_trees, max_depth, min_leaf, subsample, .. } => {
                if *n_trees >= 1 && *min_leaf >= 1 && max_depth.is_none_or(|d| d >= 1) && *subsample > 0.0 && *subsample <= 1.0 {
                    Ok(())
                } else {
                    bad("forest hyperparameters must be positive with subsample in (0, 1]")
                }
            }
            RegressorKind::Stack { members, .. } => {
                if members.len() < 2 {
                    return bad("a stack needs at least two members");
                }
                members.iter().try_for_each(RegressorKind::validate)
            }
        }
    }

    /// Learners that only ever average training targets.
    pub fn is_piecewise_constant(&self) -> bool {
        matches!(
            self,
            RegressorKind::PerTimeMean | RegressorKind::Tree { .. } | RegressorKind::Forest { .. } | RegressorKind::KernelKnn { .. }
        )
    }
}

#[derive(Debug)]
struct MeanModel(f64);

impl Predictor for MeanModel {
    fn predict(&self, _x: &[f64]) -> f64 {
        self.0
    }
}

/// Fit one learner on `(x, y)`. `salt` perturbs the seed of randomized learners.
pub fn fit_regressor(kind: &RegressorKind, x: &[Vec<f64>], y: &[f64], salt: u64) -> Result<Box<dyn Predictor>> {
    kind.validate()?;
    if y.is_empty() {
        return Err(Error::Nuisance("no training rows".into()));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    Ok(match kind {
        RegressorKind::PerTimeMean => Box::new(MeanModel(mean)),
        RegressorKind::Constant { value } => Box::new(MeanModel(*value)),
        RegressorKind::LinearLs { ridge } => Box::new(LinearModel::fit(x, y, *ridge)),
        RegressorKind::Spline { knots, ridge } => Box::new(SplineModel::fit(x, y, *knots, *ridge)),
        RegressorKind::KernelKnn { k } => Box::new(KnnModel::fit(x, y, *k)),
        RegressorKind::Tree { max_depth, min_leaf } => {
            Box::new(RegressionTree::fit(x, y, &TreeParams { max_depth: *max_depth, min_leaf: *min_leaf, mtry: None }))
        }
        RegressorKind::Forest { n_trees, max_depth, min_leaf, subsample, seed } => Box::new(RandomForest::fit(
            x,
            y,
            &ForestParams {
                n_trees: *n_trees,
                max_depth: *max_depth,
                min_leaf: *min_leaf,
                subsample: *subsample,
                seed: seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt),
            },
        )),
        RegressorKind::Stack { members, link } => Box::new(fit_stack(members, x, y, *link, salt)?),
    })
}

/// How to fit the outcome regressions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSpec {
    #[serde(flatten)]
    pub kind: RegressorKind,
    /// One predictor per arm over all decision points instead of one per `(t, arm)`.
    #[serde(default)]
    pub pooled: bool,
    /// History columns used as features; all of them when absent.
    #[serde(default)]
    pub features: Option<Vec<String>>,
}

impl NuisanceSpec {
    pub fn new(kind: RegressorKind) -> Self {
        NuisanceSpec { kind, pooled: false, features: None }
    }

    pub fn pooled(mut self, pooled: bool) -> Self {
        self.pooled = pooled;
        self
    }

    pub fn features<S: Into<String>>(mut self, names: impl IntoIterator<Item = S>) -> Self {
        self.features = Some(names.into_iter().map(Into::into).collect());
        self
    }
}

#[derive(Debug, Clone)]
enum ArmModel {
    Pooled(Arc<dyn Predictor>),
    PerTime(Vec<Arc<dyn Predictor>>),
}

/// Fitted `mu_t(h, a)` for both arms.
#[derive(Debug, Clone)]
pub struct NuisanceFit {
    arms: [ArmModel; 2],
    features: Vec<usize>,
    n_history: usize,
    horizon: usize,
    pooled: bool,
    /// Held-out fold when fitted inside cross-fitting.
    pub fold: Option<usize>,
}

struct ArmRows {
    t: Vec<usize>,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
}

fn gather_arm(panel: &Panel, subset: &[usize], features: &[usize], arm: bool) -> ArmRows {
    let mut rows = ArmRows { t: vec![], x: vec![], y: vec![] };
    for &i in subset {
        for (t0, pt) in panel.trajectory(i).points.iter().enumerate() {
            if pt.avail && pt.treat == arm {
                rows.t.push(t0);
                rows.x.push(features.iter().map(|&j| pt.history[j]).collect());
                rows.y.push(pt.outcome);
            }
        }
    }
    rows
}

/// Step 1 of the two-stage estimator, restricted to the trajectories in `subset`.
pub fn fit_nuisance(panel: &Panel, spec: &NuisanceSpec, subset: &[usize]) -> Result<NuisanceFit> {
    spec.kind.validate()?;
    if subset.is_empty() {
        return Err(Error::Nuisance("empty training subset".into()));
    }
    if let Some(&bad) = subset.iter().find(|&&i| i >= panel.n()) {
        return Err(Error::InvalidArgument(format!("trajectory index {bad} out of range")));
    }
    let features = match &spec.features {
        Some(names) => panel.history_indices(names)?,
        None => (0..panel.meta().history_names.len()).collect(),
    };
    let horizon = panel.horizon();
    let per_time = !spec.pooled || spec.kind == RegressorKind::PerTimeMean;

    let mut arms = Vec::with_capacity(2);
    for (a, arm) in [false, true].into_iter().enumerate() {
        let rows = gather_arm(panel, subset, &features, arm);
        if rows.y.is_empty() {
            return Err(Error::Nuisance(format!("arm a = {a} has no available observations")));
        }
        let salt_base = (a as u64) << 32;
        if !per_time {
            let model = fit_regressor(&spec.kind, &rows.x, &rows.y, salt_base)?;
            arms.push(ArmModel::Pooled(Arc::from(model)));
            continue;
        }
        let mut pooled_fallback: Option<Arc<dyn Predictor>> = None;
        let mut models = Vec::with_capacity(horizon);
        for t0 in 0..horizon {
            let idx: Vec<usize> = (0..rows.y.len()).filter(|&k| rows.t[k] == t0).collect();
            if idx.is_empty() {
                warn!("no available observations for arm a = {a} at t = {}; using a pooled fit", t0 + 1);
                let fallback = match &pooled_fallback {
                    Some(m) => m.clone(),
                    None => {
                        let m: Arc<dyn Predictor> = Arc::from(fit_regressor(&spec.kind, &rows.x, &rows.y, salt_base | 0xFFFF)?);
                        pooled_fallback = Some(m.clone());
                        m
                    }
                };
                models.push(fallback);
                continue;
            }
            let x: Vec<Vec<f64>> = idx.iter().map(|&k| rows.x[k].clone()).collect();
            let y: Vec<f64> = idx.iter().map(|&k| rows.y[k]).collect();
            models.push(Arc::from(fit_regressor(&spec.kind, &x, &y, salt_base | t0 as u64)?));
        }
        arms.push(ArmModel::PerTime(models));
    }
    let arm1 = arms.pop().expect("two arms");
    let arm0 = arms.pop().expect("two arms");
    Ok(NuisanceFit {
        arms: [arm0, arm1],
        features,
        n_history: panel.meta().history_names.len(),
        horizon,
        pooled: !per_time,
        fold: None,
    })
}

impl NuisanceFit {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn is_pooled(&self) -> bool {
        self.pooled
    }

    /// `mu_t(history, a)` for one-based `t`.
    pub fn predict(&self, t: usize, history: &[f64], a: bool) -> Result<f64> {
        if t == 0 || t > self.horizon {
            return Err(Error::InvalidArgument(format!("t = {t} outside 1..={}", self.horizon)));
        }
        if history.len() != self.n_history {
            return Err(Error::InvalidArgument(format!(
                "history has {} features, the fit expects {}",
                history.len(),
                self.n_history
            )));
        }
        let x: Vec<f64> = self.features.iter().map(|&j| history[j]).collect();
        let model = match &self.arms[a as usize] {
            ArmModel::Pooled(m) => m,
            ArmModel::PerTime(ms) => &ms[t - 1],
        };
        Ok(model.predict(&x))
    }
}

/// Free-function form of [`NuisanceFit::predict`].
pub fn predict_mu(fit: &NuisanceFit, t: usize, history: &[f64], a: bool) -> Result<f64> {
    fit.predict(t, history, a)
}
