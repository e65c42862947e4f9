//! CEE estimators: WCLS and EMEE baselines, the two-stage estimator with and
//! without cross-fitting, and the oracle.

use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::cee::{emee_atom, phi_atom, wcls_atom, CeeSpec, LinkKind, StackedAtom};
use crate::dweights::{fit_dweights, DWeightFit, DWeightMode};
use crate::error::{Error, Result};
use crate::inference::{confidence_interval, correct_fit, CiSpec, Interval, Quantile};
use crate::linalg::{Matrix, Vector};
use crate::nuisance::{fit_nuisance, NuisanceFit, NuisanceSpec};
use crate::panel::{moderator_dim, validate_panel, Panel, DEFAULT_TAU};
use crate::simgen::{oracle_dstar_all, TruthHandle, DEFAULT_MC_BUDGET};
use crate::zestim::{crossfit_solve_detailed, solve_with, Decomposition, EstimatingSystem, SolveOptions, ZFit};

pub const DEFAULT_FOLDS: usize = 5;

fn default_folds() -> usize {
    DEFAULT_FOLDS
}
fn default_budget() -> usize {
    DEFAULT_MC_BUDGET
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MethodSpec {
    /// Weighted centered least squares; control design `(1, t/T)` plus `control` history columns.
    Wcls {
        #[serde(default)]
        control: Vec<String>,
    },
    /// Estimator of the marginal excursion effect (log link); same control design.
    Emee {
        #[serde(default)]
        control: Vec<String>,
    },
    TwoStage { nuisance: NuisanceSpec, dmode: DWeightMode },
    TwoStageCf {
        nuisance: NuisanceSpec,
        dmode: DWeightMode,
        #[serde(default = "default_folds")]
        folds: usize,
        #[serde(default)]
        seed: u64,
    },
    /// True `mu*` and Monte Carlo `d*`; needs a truth handle.
    Oracle {
        #[serde(default = "default_budget")]
        mc_budget: usize,
    },
}

impl MethodSpec {
    pub fn name(&self) -> &'static str {
        match self {
            MethodSpec::Wcls { .. } => "wcls",
            MethodSpec::Emee { .. } => "emee",
            MethodSpec::TwoStage { .. } => "two_stage",
            MethodSpec::TwoStageCf { .. } => "two_stage_cf",
            MethodSpec::Oracle { .. } => "oracle",
        }
    }

    fn check_link(&self, link: LinkKind) -> Result<()> {
        match (self, link) {
            (MethodSpec::Wcls { .. }, LinkKind::Log) => Err(Error::IncompatibleLink("WCLS requires the identity link".into())),
            (MethodSpec::Emee { .. }, LinkKind::Identity) => Err(Error::IncompatibleLink("EMEE requires the log link".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EstimateOptions {
    pub link: LinkKind,
    pub level: f64,
    /// Leverage-corrected sandwich for the intervals.
    pub ssc: bool,
    /// Overrides the default quantile rule of [`CiSpec::default_for`].
    pub quantile: Option<Quantile>,
    pub tau: f64,
    pub solve: SolveOptions,
    pub truth: Option<TruthHandle>,
}

impl EstimateOptions {
    pub fn new(link: LinkKind) -> Self {
        EstimateOptions { link, level: 0.95, ssc: true, quantile: None, tau: DEFAULT_TAU, solve: SolveOptions::default(), truth: None }
    }

    pub fn with_truth(mut self, truth: TruthHandle) -> Self {
        self.truth = Some(truth);
        self
    }

    pub fn level(mut self, level: f64) -> Self {
        self.level = level;
        self
    }

    pub fn ssc(mut self, on: bool) -> Self {
        self.ssc = on;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub method: MethodSpec,
    pub link: LinkKind,
    pub n: usize,
    pub horizon: usize,
    pub beta: Vec<f64>,
    pub beta_init: Option<Vec<f64>>,
    /// Row-major `p x p` sandwich covariance.
    pub cov: Vec<Vec<f64>>,
    pub cov_corrected: Option<Vec<Vec<f64>>>,
    pub se: Vec<f64>,
    pub se_corrected: Option<Vec<f64>>,
    /// Built from the corrected covariance when available and requested.
    pub ci: Vec<Interval>,
    pub level: f64,
    pub quantile: Quantile,
    pub iterations: usize,
    pub converged: bool,
    pub residual: f64,
    pub flags: Vec<String>,
}

impl EstimateReport {
    /// Standard errors used for the intervals.
    pub fn se_used(&self) -> &[f64] {
        self.se_corrected.as_deref().unwrap_or(&self.se)
    }
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Mean randomization probability over available points.
pub fn tilde_prob(panel: &Panel) -> Result<f64> {
    let (mut s, mut c) = (0.0, 0.0);
    for traj in panel.trajectories() {
        for pt in traj.points.iter().filter(|p| p.avail) {
            s += pt.prob;
            c += 1.0;
        }
    }
    if c == 0.0 {
        return Err(Error::InvalidArgument("panel has no available decision points".into()));
    }
    Ok(s / c)
}

// ---------------------------------------------------------------------------
// Baselines

struct BaselineSystem<'a> {
    panel: &'a Panel,
    spec: CeeSpec,
    control: Vec<usize>,
    q: usize,
    init: Vec<f64>,
}

impl BaselineSystem<'_> {
    fn b_t(&self, t0: usize, history: &[f64]) -> Vec<f64> {
        let horizon = self.panel.horizon() as f64;
        let mut b = Vec::with_capacity(2 + self.control.len());
        b.push(1.0);
        b.push((t0 + 1) as f64 / horizon);
        b.extend(self.control.iter().map(|&j| history[j]));
        b
    }

    fn atoms(&self, unit: usize, theta: &[f64]) -> Result<Vec<StackedAtom>> {
        let (alpha, beta) = theta.split_at(self.q);
        self.panel
            .trajectory(unit)
            .points
            .iter()
            .enumerate()
            .map(|(t0, pt)| {
                let b = self.b_t(t0, &pt.history);
                match self.spec.link {
                    LinkKind::Identity => wcls_atom(pt, &self.spec, alpha, beta, &b),
                    LinkKind::Log => emee_atom(pt, &self.spec, alpha, beta, &b),
                }
            })
            .collect()
    }
}

impl EstimatingSystem for BaselineSystem<'_> {
    type Nuisance = ();

    fn dim(&self) -> usize {
        self.q + self.spec.p
    }
    fn n_units(&self) -> usize {
        self.panel.n()
    }
    fn fit_nuisance(&self, _train: &[usize]) -> Result<()> {
        Ok(())
    }
    fn score(&self, unit: usize, theta: &[f64], _: &()) -> Result<Vector> {
        let mut m = Vector::zeros(self.dim());
        for a in self.atoms(unit, theta)? {
            m += a.value();
        }
        Ok(m)
    }
    fn score_jacobian(&self, unit: usize, theta: &[f64], _: &()) -> Result<Matrix> {
        Ok(self.score_and_jacobian(unit, theta, &())?.1)
    }
    fn score_and_jacobian(&self, unit: usize, theta: &[f64], _: &()) -> Result<(Vector, Matrix)> {
        let q = self.dim();
        let mut m = Vector::zeros(q);
        let mut j = Matrix::zeros(q, q);
        for a in self.atoms(unit, theta)? {
            m += a.value();
            j += a.jac();
        }
        Ok((m, j))
    }
    fn initial(&self, _: &()) -> Option<Vec<f64>> {
        Some(self.init.clone())
    }
    fn decompose(&self, unit: usize, theta: &[f64], _: &()) -> Option<Result<Decomposition>> {
        Some(self.atoms(unit, theta).map(|atoms| {
            let q = self.dim();
            let t = atoms.len();
            let mut d = Matrix::zeros(t, q);
            let mut r = Vector::zeros(t);
            let mut dr = Matrix::zeros(t, q);
            for (k, a) in atoms.iter().enumerate() {
                d.set_row(k, &(a.design.transpose() * a.weight));
                r[k] = a.resid;
                dr.set_row(k, &a.dresid.transpose());
            }
            Decomposition { d, r, dr }
        }))
    }
}

// ---------------------------------------------------------------------------
// Two-stage and oracle

/// Fitted `mu-hat` at every point and the `d`-weights, indexed by `i * T + t0`.
#[derive(Debug, Clone)]
pub struct CeeNuisance {
    pub mu1: Vec<f64>,
    pub mu0: Vec<f64>,
    /// `None` means `d_t = I`.
    pub d: Option<Vec<Matrix>>,
    pub beta_init: Option<Vec<f64>>,
    pub dweight_fallbacks: Vec<usize>,
}

enum Plan<'a> {
    Frozen(Arc<CeeNuisance>),
    TwoStage { spec: &'a NuisanceSpec, dmode: DWeightMode, solve: &'a SolveOptions },
}

struct CeeSystem<'a> {
    panel: &'a Panel,
    link: LinkKind,
    p: usize,
    /// Units of this system, as trajectory indices into `panel`.
    units: Vec<usize>,
    plan: Plan<'a>,
}

impl<'a> CeeSystem<'a> {
    fn new(panel: &'a Panel, link: LinkKind, p: usize, plan: Plan<'a>) -> Self {
        CeeSystem { panel, link, p, units: (0..panel.n()).collect(), plan }
    }

    fn atoms<'b>(&'b self, unit: usize, beta: &'b [f64], eta: &'b CeeNuisance) -> impl Iterator<Item = Result<(Option<&'b Matrix>, crate::cee::PhiAtom)>> + 'b {
        let i = self.units[unit];
        let horizon = self.panel.horizon();
        self.panel.trajectory(i).points.iter().enumerate().map(move |(t0, pt)| {
            let k = i * horizon + t0;
            let atom = phi_atom(self.link, pt, eta.mu1[k], eta.mu0[k], beta)?;
            Ok((eta.d.as_ref().map(|d| &d[k]), atom))
        })
    }

    /// Steps 1 to 3 on the trajectories `train` (indices into `panel`).
    fn two_stage_nuisance(&self, spec: &NuisanceSpec, dmode: DWeightMode, solve: &SolveOptions, train: &[usize]) -> Result<CeeNuisance> {
        let fit = fit_nuisance(self.panel, spec, train)?;
        let (mu1, mu0) = predict_all(self.panel, &fit)?;
        let unit_eta = Arc::new(CeeNuisance { mu1, mu0, d: None, beta_init: None, dweight_fallbacks: vec![] });
        let inner = CeeSystem { panel: self.panel, link: self.link, p: self.p, units: train.to_vec(), plan: Plan::Frozen(unit_eta.clone()) };
        let init = solve_with(&inner, &unit_eta, solve)?.into_result()?;
        let beta_init: Vec<f64> = init.theta.iter().copied().collect();
        drop(inner);
        let eta = Arc::try_unwrap(unit_eta).unwrap_or_else(|shared| (*shared).clone());
        if dmode == DWeightMode::Unit {
            return Ok(CeeNuisance { beta_init: Some(beta_init), ..eta });
        }
        let dfit = fit_dweights(self.panel, train, &fit, &beta_init, self.link, dmode)?;
        let d = eval_all(self.panel, &dfit)?;
        Ok(CeeNuisance { d: Some(d), beta_init: Some(beta_init), dweight_fallbacks: dfit.fallback_times.clone(), ..eta })
    }
}

fn predict_all(panel: &Panel, fit: &NuisanceFit) -> Result<(Vec<f64>, Vec<f64>)> {
    let horizon = panel.horizon();
    let mut mu1 = Vec::with_capacity(panel.n() * horizon);
    let mut mu0 = Vec::with_capacity(panel.n() * horizon);
    for traj in panel.trajectories() {
        for (t0, pt) in traj.points.iter().enumerate() {
            if pt.avail {
                mu1.push(fit.predict(t0 + 1, &pt.history, true)?);
                mu0.push(fit.predict(t0 + 1, &pt.history, false)?);
            } else {
                mu1.push(0.0);
                mu0.push(0.0);
            }
        }
    }
    Ok((mu1, mu0))
}

fn eval_all(panel: &Panel, dfit: &DWeightFit) -> Result<Vec<Matrix>> {
    let mut out = Vec::with_capacity(panel.n() * panel.horizon());
    for traj in panel.trajectories() {
        for (t0, pt) in traj.points.iter().enumerate() {
            out.push(dfit.eval(t0 + 1, &pt.moderator)?);
        }
    }
    Ok(out)
}

impl EstimatingSystem for CeeSystem<'_> {
    type Nuisance = Arc<CeeNuisance>;

    fn dim(&self) -> usize {
        self.p
    }
    fn n_units(&self) -> usize {
        self.units.len()
    }
    fn fit_nuisance(&self, train: &[usize]) -> Result<Arc<CeeNuisance>> {
        match &self.plan {
            Plan::Frozen(eta) => Ok(eta.clone()),
            Plan::TwoStage { spec, dmode, solve } => {
                let global: Vec<usize> = train.iter().map(|&u| self.units[u]).collect();
                self.two_stage_nuisance(spec, *dmode, solve, &global).map(Arc::new)
            }
        }
    }
    fn score(&self, unit: usize, beta: &[f64], eta: &Arc<CeeNuisance>) -> Result<Vector> {
        let mut m = Vector::zeros(self.p);
        for item in self.atoms(unit, beta, eta) {
            let (d, atom) = item?;
            match d {
                Some(d) => m += d * atom.value,
                None => m += atom.value,
            }
        }
        Ok(m)
    }
    fn score_jacobian(&self, unit: usize, beta: &[f64], eta: &Arc<CeeNuisance>) -> Result<Matrix> {
        Ok(self.score_and_jacobian(unit, beta, eta)?.1)
    }
    fn score_and_jacobian(&self, unit: usize, beta: &[f64], eta: &Arc<CeeNuisance>) -> Result<(Vector, Matrix)> {
        let mut m = Vector::zeros(self.p);
        let mut j = Matrix::zeros(self.p, self.p);
        for item in self.atoms(unit, beta, eta) {
            let (d, atom) = item?;
            match d {
                Some(d) => {
                    m += d * atom.value;
                    j += d * atom.jac;
                }
                None => {
                    m += atom.value;
                    j += atom.jac;
                }
            }
        }
        Ok((m, j))
    }
    fn decompose(&self, unit: usize, beta: &[f64], eta: &Arc<CeeNuisance>) -> Option<Result<Decomposition>> {
        let horizon = self.panel.horizon();
        let p = self.p;
        let build = || -> Result<Decomposition> {
            let mut d = Matrix::zeros(horizon, p);
            let mut r = Vector::zeros(horizon);
            let mut dr = Matrix::zeros(horizon, p);
            let point = |t0: usize| &self.panel.trajectory(self.units[unit]).points[t0];
            for (t0, item) in self.atoms(unit, beta, eta).enumerate() {
                let (dm, atom) = item?;
                let row = match dm {
                    Some(dm) => dm * &atom.dvec,
                    None => atom.dvec.clone(),
                };
                d.set_row(t0, &row.transpose());
                r[t0] = atom.resid;
                let f = Vector::from_column_slice(&point(t0).moderator);
                dr.set_row(t0, &(f.transpose() * atom.dresid));
            }
            Ok(d).map(|d| Decomposition { d, r, dr })
        };
        Some(build())
    }
}

// ---------------------------------------------------------------------------

fn report(method: &MethodSpec, panel: &Panel, opts: &EstimateOptions, fit: &ZFit, p: usize, beta_init: Option<Vec<f64>>, mut flags: Vec<String>) -> Result<EstimateReport> {
    let q = fit.theta.len();
    let off = q - p;
    let block = |m: &Matrix| m.view((off, off), (p, p)).into_owned();
    let beta: Vec<f64> = fit.theta.iter().skip(off).copied().collect();
    let cov = block(&fit.cov);
    let se: Vec<f64> = (0..p).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    let mut cov_corrected = None;
    if opts.ssc {
        match correct_fit(fit)? {
            Some(c) => {
                if c.refused {
                    flags.push("ssc_refused".into());
                } else {
                    if c.fallbacks > 0 {
                        flags.push(format!("ssc_fallbacks={}", c.fallbacks));
                    }
                    if fit.fold_of.is_some() {
                        flags.push("ssc_crossfit_experimental".into());
                    }
                    cov_corrected = Some(block(&c.cov));
                }
            }
            None => flags.push("ssc_unavailable".into()),
        }
    }
    let ci_spec = CiSpec { level: opts.level, quantile: opts.quantile.unwrap_or(CiSpec::default_for(opts.level, panel.n(), q).quantile) };
    let ci = confidence_interval(&beta, cov_corrected.as_ref().unwrap_or(&cov), &ci_spec)?;
    let se_corrected = cov_corrected.as_ref().map(|c| (0..p).map(|j| c[(j, j)].max(0.0).sqrt()).collect());
    Ok(EstimateReport {
        method: method.clone(),
        link: opts.link,
        n: panel.n(),
        horizon: panel.horizon(),
        beta,
        beta_init,
        cov: rows(&cov),
        cov_corrected: cov_corrected.as_ref().map(rows),
        se,
        se_corrected,
        ci,
        level: opts.level,
        quantile: ci_spec.quantile,
        iterations: fit.iterations,
        converged: fit.converged,
        residual: fit.residual,
        flags,
    })
}

/// Estimate the CEE parameters with `method`.
pub fn estimate(panel: &Panel, method: &MethodSpec, opts: &EstimateOptions) -> Result<EstimateReport> {
    method.check_link(opts.link)?;
    validate_panel(panel, opts.link, opts.tau).into_result()?;
    let p = moderator_dim(panel)?;
    let link = opts.link;
    match method {
        MethodSpec::Wcls { control } | MethodSpec::Emee { control } => {
            let spec = CeeSpec::new(link, p, Some(tilde_prob(panel)?))?;
            let control = panel.history_indices(control)?;
            let q = 2 + control.len();
            let mut init = vec![0.0; q + p];
            if link == LinkKind::Log {
                let (mut s, mut c) = (0.0, 0.0);
                for traj in panel.trajectories() {
                    for pt in traj.points.iter().filter(|p| p.avail) {
                        s += pt.outcome;
                        c += 1.0;
                    }
                }
                init[0] = (s / c).max(1e-8).ln();
            }
            let system = BaselineSystem { panel, spec, control, q, init };
            let fit = solve_with(&system, &(), &opts.solve)?.into_result()?;
            report(method, panel, opts, &fit, p, None, vec![])
        }
        MethodSpec::TwoStage { nuisance, dmode } => {
            let system = CeeSystem::new(panel, link, p, Plan::TwoStage { spec: nuisance, dmode: *dmode, solve: &opts.solve });
            let all: Vec<usize> = (0..panel.n()).collect();
            let eta = system.fit_nuisance(&all)?;
            let fit = solve_with(&system, &eta, &opts.solve)?.into_result()?;
            let flags = eta.dweight_fallbacks.iter().map(|t| format!("dweight_fallback_t={t}")).collect();
            report(method, panel, opts, &fit, p, eta.beta_init.clone(), flags)
        }
        MethodSpec::TwoStageCf { nuisance, dmode, folds, seed } => {
            let system = CeeSystem::new(panel, link, p, Plan::TwoStage { spec: nuisance, dmode: *dmode, solve: &opts.solve });
            let (fit, etas) = crossfit_solve_detailed(&system, *folds, *seed, &opts.solve)?;
            let fit = fit.into_result()?;
            let mut init = vec![0.0; p];
            for eta in &etas {
                for (acc, b) in init.iter_mut().zip(eta.beta_init.iter().flatten()) {
                    *acc += b / etas.len() as f64;
                }
            }
            let mut flags: Vec<String> = Vec::new();
            for (k, eta) in etas.iter().enumerate() {
                flags.extend(eta.dweight_fallbacks.iter().map(|t| format!("dweight_fallback_fold{k}_t={t}")));
            }
            report(method, panel, opts, &fit, p, Some(init), flags)
        }
        MethodSpec::Oracle { mc_budget } => {
            let truth = opts.truth.as_ref().ok_or_else(|| Error::InvalidArgument("the oracle estimator needs a truth handle".into()))?;
            if truth.link() != link {
                return Err(Error::IncompatibleLink(format!("truth uses the {} link", truth.link())));
            }
            if p != 1 || truth.config.horizon() != panel.horizon() {
                return Err(Error::InvalidArgument("the oracle supports the marginal effect on panels from its generator".into()));
            }
            let dstar = oracle_dstar_all(truth, *mc_budget)?;
            let horizon = panel.horizon();
            let mut mu1 = Vec::with_capacity(panel.n() * horizon);
            let mut mu0 = Vec::with_capacity(panel.n() * horizon);
            let mut d = Vec::with_capacity(panel.n() * horizon);
            for traj in panel.trajectories() {
                for (t0, pt) in traj.points.iter().enumerate() {
                    mu1.push(truth.mu(t0 + 1, &pt.history, true));
                    mu0.push(truth.mu(t0 + 1, &pt.history, false));
                    d.push(dstar[t0].clone());
                }
            }
            let eta = Arc::new(CeeNuisance { mu1, mu0, d: Some(d), beta_init: None, dweight_fallbacks: vec![] });
            let system = CeeSystem::new(panel, link, p, Plan::Frozen(eta.clone()));
            let fit = solve_with(&system, &eta, &opts.solve)?.into_result()?;
            report(method, panel, opts, &fit, p, None, vec![])
        }
    }
}

/// Cross-time Gram summary `|P_n phi_t phi_u^T|_F / sqrt(|.|_tt |.|_uu)` at `beta`.
pub fn diagnose_wa2(panel: &Panel, beta: &[f64], nuisance: &NuisanceFit, link: LinkKind) -> Result<Matrix> {
    let horizon = panel.horizon();
    let p = beta.len();
    let mut blocks = vec![Matrix::zeros(p, p); horizon * horizon];
    for traj in panel.trajectories() {
        let phis = traj
            .points
            .iter()
            .enumerate()
            .map(|(t0, pt)| {
                let (mu1, mu0) = if pt.avail {
                    (nuisance.predict(t0 + 1, &pt.history, true)?, nuisance.predict(t0 + 1, &pt.history, false)?)
                } else {
                    (0.0, 0.0)
                };
                Ok(phi_atom(link, pt, mu1, mu0, beta)?.value)
            })
            .collect::<Result<Vec<Vector>>>()?;
        for t in 0..horizon {
            for u in 0..horizon {
                blocks[t * horizon + u] += &phis[t] * phis[u].transpose();
            }
        }
    }
    let norms: Vec<f64> = blocks.iter().map(|b| b.norm() / panel.n() as f64).collect();
    Ok(Matrix::from_fn(horizon, horizon, |t, u| {
        let denom = (norms[t * horizon + t] * norms[u * horizon + u]).sqrt();
        if denom > 0.0 {
            norms[t * horizon + u] / denom
        } else if t == u {
            1.0
        } else {
            0.0
        }
    }))
}

/// Warn-and-continue helper for studies: the estimate or the error message.
pub fn try_estimate(panel: &Panel, method: &MethodSpec, opts: &EstimateOptions) -> std::result::Result<EstimateReport, String> {
    estimate(panel, method, opts).map_err(|e| {
        warn!("{} failed: {e}", method.name());
        e.to_string()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::RegressorKind;
    use crate::panel::{DecisionPoint, PanelMeta, Trajectory};
    use crate::simgen::{BinaryConfig, ContinuousConfig, Form, GeneratorConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn panel_from(n: usize, horizon: usize, seed: u64, y: impl Fn(bool, f64, &mut ChaCha8Rng) -> f64) -> Panel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trajectories = (0..n)
            .map(|_| {
                Trajectory::new(
                    (0..horizon)
                        .map(|t0| {
                            let z: f64 = rng.random_range(-1.0..1.0);
                            let treat = rng.random_bool(0.5);
                            let outcome = y(treat, z, &mut rng);
                            DecisionPoint { avail: true, prob: 0.5, treat, outcome, history: vec![(t0 + 1) as f64, z], moderator: vec![1.0] }
                        })
                        .collect(),
                )
            })
            .collect();
        Panel::new(trajectories, PanelMeta { history_names: vec!["t".into(), "z".into()], moderator_names: vec!["1".into()] }).unwrap()
    }

    fn frozen_zero() -> NuisanceSpec {
        NuisanceSpec::new(RegressorKind::Constant { value: 0.0 })
    }

    #[test]
    fn single_point_unit_weight_matches_hand_solve() {
        let panel = panel_from(15, 1, 3, |a, z, rng| if a { 1.0 } else { 0.0 } + z + rng.random_range(-1.0..1.0));
        let method = MethodSpec::TwoStage { nuisance: frozen_zero(), dmode: DWeightMode::Unit };
        let rep = estimate(&panel, &method, &EstimateOptions::new(LinkKind::Identity)).unwrap();
        // sum_i W_i (Y_i - (A_i - 0.5) beta) = 0 with W_i = 4 (A_i - 0.5)
        let (mut num, mut den) = (0.0, 0.0);
        for traj in panel.trajectories() {
            let pt = &traj.points[0];
            let w = 4.0 * (pt.a() - 0.5);
            num += w * pt.outcome;
            den += w * (pt.a() - 0.5);
        }
        assert!((rep.beta[0] - num / den).abs() < 1e-10);
    }

    #[test]
    fn deterministic_effect_is_recovered_by_every_identity_method() {
        let c = 0.7;
        let panel = panel_from(40, 3, 4, |a, _, _| if a { c } else { 0.0 });
        let methods = vec![
            MethodSpec::Wcls { control: vec![] },
            MethodSpec::TwoStage { nuisance: NuisanceSpec::new(RegressorKind::PerTimeMean), dmode: DWeightMode::Unit },
            MethodSpec::TwoStage { nuisance: NuisanceSpec::new(RegressorKind::LinearLs { ridge: 0.0 }), dmode: DWeightMode::Unit },
            MethodSpec::TwoStageCf { nuisance: NuisanceSpec::new(RegressorKind::PerTimeMean), dmode: DWeightMode::Unit, folds: 2, seed: 1 },
        ];
        for m in methods {
            let rep = estimate(&panel, &m, &EstimateOptions::new(LinkKind::Identity)).unwrap();
            assert!((rep.beta[0] - c).abs() < 1e-10, "{}: {:?}", m.name(), rep.beta);
        }
    }

    #[test]
    fn emee_null_effect_fixed_point() {
        let panel = panel_from(30, 4, 5, |_, _, _| 1.0);
        let rep = estimate(&panel, &MethodSpec::Emee { control: vec![] }, &EstimateOptions::new(LinkKind::Log)).unwrap();
        assert!(rep.beta[0].abs() < 1e-10);
    }

    #[test]
    fn incompatible_links_are_rejected() {
        let panel = panel_from(10, 2, 6, |_, _, _| 1.0);
        let err = estimate(&panel, &MethodSpec::Wcls { control: vec![] }, &EstimateOptions::new(LinkKind::Log)).unwrap_err();
        assert_eq!(err.kind(), "incompatible_link");
        let err = estimate(&panel, &MethodSpec::Emee { control: vec![] }, &EstimateOptions::new(LinkKind::Identity)).unwrap_err();
        assert_eq!(err.kind(), "incompatible_link");
        let err = estimate(&panel, &MethodSpec::Oracle { mc_budget: 100 }, &EstimateOptions::new(LinkKind::Identity)).unwrap_err();
        assert_eq!(err.kind(), "invalid_argument");
    }

    #[test]
    fn two_stage_identity_residual_matches_wcls_with_substituted_control() {
        // Remark: replacing b^T alpha in the WCLS residual by
        // (p~ + p - 1) f^T beta + (1 - p) mu1 + p mu0 gives the two-stage residual
        let pt = DecisionPoint { avail: true, prob: 0.3, treat: true, outcome: 2.4, history: vec![], moderator: vec![1.0, 0.5] };
        let beta = [0.4, -0.2];
        let (mu1, mu0, tilde) = (1.1, 0.6, 0.3);
        let gamma = 0.4 - 0.1;
        let control = (tilde + pt.prob - 1.0) * gamma + (1.0 - pt.prob) * mu1 + pt.prob * mu0;
        let spec = CeeSpec::new(LinkKind::Identity, 2, Some(tilde)).unwrap();
        let wcls = wcls_atom(&pt, &spec, &[control], &beta, &[1.0]).unwrap();
        let phi = phi_atom(LinkKind::Identity, &pt, mu1, mu0, &beta).unwrap();
        assert!((wcls.resid - phi.resid).abs() < 1e-14);
    }

    #[test]
    fn order_invariance() {
        let cfg = GeneratorConfig::Continuous(ContinuousConfig { seed: 2, lambda1: 1.0, ..ContinuousConfig::new(60, Form::Periodic) });
        let (panel, _) = cfg.generate().unwrap();
        let mut idx: Vec<usize> = (0..panel.n()).collect();
        idx.reverse();
        let reversed = panel.select(&idx).unwrap();
        let method = MethodSpec::TwoStage { nuisance: NuisanceSpec::new(RegressorKind::spline_default()).pooled(true), dmode: DWeightMode::PerTimeEmpirical };
        let a = estimate(&panel, &method, &EstimateOptions::new(LinkKind::Identity)).unwrap();
        let b = estimate(&reversed, &method, &EstimateOptions::new(LinkKind::Identity)).unwrap();
        assert!((a.beta[0] - b.beta[0]).abs() < 1e-10);
    }

    #[test]
    fn binary_methods_run_and_report_consistent_intervals() {
        let cfg = GeneratorConfig::Binary(BinaryConfig { seed: 3, lambda: 0.8, ..BinaryConfig::new(100, Form::SimpleNonlinear) });
        let (panel, truth) = cfg.generate().unwrap();
        let opts = EstimateOptions::new(LinkKind::Log).with_truth(truth);
        let methods = vec![
            MethodSpec::Emee { control: vec!["z".into()] },
            MethodSpec::TwoStage { nuisance: NuisanceSpec::new(RegressorKind::LinearLs { ridge: 1e-8 }).pooled(true), dmode: DWeightMode::default_for(LinkKind::Log) },
            MethodSpec::TwoStageCf {
                nuisance: NuisanceSpec::new(RegressorKind::Tree { max_depth: Some(3), min_leaf: 10 }).pooled(true),
                dmode: DWeightMode::AnalyticScalar,
                folds: 3,
                seed: 9,
            },
            MethodSpec::Oracle { mc_budget: 20_000 },
        ];
        for m in methods {
            let rep = estimate(&panel, &m, &opts).unwrap();
            assert!(rep.converged);
            assert!(rep.ci[0].lower <= rep.beta[0] && rep.beta[0] <= rep.ci[0].upper);
            assert!(rep.beta[0].abs() < 1.5, "{}: {:?}", m.name(), rep.beta);
            assert!(rep.se_corrected.is_some());
        }
    }

    #[test]
    fn wa2_summary_shape() {
        let panel = panel_from(50, 3, 8, |a, z, rng| if a { 0.3 } else { 0.0 } + z + rng.random_range(-1.0..1.0));
        let all: Vec<usize> = (0..50).collect();
        let nfit = fit_nuisance(&panel, &NuisanceSpec::new(RegressorKind::PerTimeMean), &all).unwrap();
        let g = diagnose_wa2(&panel, &[0.3], &nfit, LinkKind::Identity).unwrap();
        assert_eq!(g.shape(), (3, 3));
        for t in 0..3 {
            assert!((g[(t, t)] - 1.0).abs() < 1e-12);
            for u in 0..3 {
                assert!((g[(t, u)] - g[(u, t)]).abs() < 1e-12);
                assert!(g[(t, u)].is_finite());
            }
        }
        let one = panel_from(20, 1, 9, |_, z, _| z);
        let nfit = fit_nuisance(&one, &NuisanceSpec::new(RegressorKind::PerTimeMean), &(0..20).collect::<Vec<_>>()).unwrap();
        assert_eq!(diagnose_wa2(&one, &[0.0], &nfit, LinkKind::Identity).unwrap(), Matrix::from_element(1, 1, 1.0));
    }
}
