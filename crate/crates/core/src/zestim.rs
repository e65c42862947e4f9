//! Two-stage Z-estimation: fit a nuisance `eta`, then solve `P_n m(theta, eta) = 0`.
//!
//! [`solve_z`] fits the nuisance on all units, [`crossfit_solve`] fits it on
//! each fold's complement and solves the fold-averaged equation. Both return a
//! [`ZFit`] holding the solution, the bread `P_n d_theta m`, the meat
//! `P_n m m^T` and the sandwich covariance.

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{inverse, max_abs, max_abs_matrix, solve, Matrix, Vector};

/// Per-unit factorization `m_i = D_i^T r_i` with `d_theta m_i = D_i^T d_theta r_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    /// `T x q`.
    pub d: Matrix,
    /// Length `T`.
    pub r: Vector,
    /// `T x q`.
    pub dr: Matrix,
}

/// An estimating function over `n_units` independent units.
///
/// Implementations must be pure: the same arguments always give the same
/// output, and calls may run concurrently.
pub trait EstimatingSystem: Sync {
    type Nuisance: Send + Sync;

    fn dim(&self) -> usize;
    fn n_units(&self) -> usize;

    /// Fit the nuisance using only the units in `train`.
    fn fit_nuisance(&self, train: &[usize]) -> Result<Self::Nuisance>;

    fn score(&self, unit: usize, theta: &[f64], eta: &Self::Nuisance) -> Result<Vector>;

    fn score_jacobian(&self, unit: usize, theta: &[f64], eta: &Self::Nuisance) -> Result<Matrix>;

    fn score_and_jacobian(&self, unit: usize, theta: &[f64], eta: &Self::Nuisance) -> Result<(Vector, Matrix)> {
        Ok((self.score(unit, theta, eta)?, self.score_jacobian(unit, theta, eta)?))
    }

    /// Starting value overriding [`SolveOptions::theta0`].
    fn initial(&self, _eta: &Self::Nuisance) -> Option<Vec<f64>> {
        None
    }

    /// Residual form of the score, used by the small-sample correction.
    fn decompose(&self, _unit: usize, _theta: &[f64], _eta: &Self::Nuisance) -> Option<Result<Decomposition>> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Defaults to zero.
    pub theta0: Option<Vec<f64>>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { tol: 1e-10, max_iter: 100, max_halvings: 30, theta0: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    /// No step-halved iterate reduced the merit `|P_n m|_2`.
    LineSearchFailed,
    SingularBread,
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct ZFit {
    pub theta: Vector,
    /// `P_n d_theta m` at the solution (fold-averaged under cross-fitting).
    pub bread: Matrix,
    /// `P_n m m^T` at the solution (fold-averaged under cross-fitting).
    pub meat: Matrix,
    /// Asymptotic variance `bread^-1 meat bread^-T`.
    pub avar: Matrix,
    /// `avar / n`, the estimated covariance of `theta`.
    pub cov: Matrix,
    pub scores: Vec<Vector>,
    pub jacobians: Vec<Matrix>,
    pub decompositions: Option<Vec<Decomposition>>,
    /// `|P_n m(theta)|_inf`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub status: SolveStatus,
    /// Fold of each unit under cross-fitting.
    pub fold_of: Option<Vec<usize>>,
    /// Per-fold `P_{n,k} d_theta m`.
    pub fold_breads: Vec<Matrix>,
}

impl ZFit {
    pub fn n(&self) -> usize {
        self.scores.len()
    }

    /// Turn a failed solve into an error carrying the last iterate.
    pub fn into_result(self) -> Result<ZFit> {
        if self.converged {
            return Ok(self);
        }
        Err(Error::NonConvergence {
            iterations: self.iterations,
            residual: self.residual,
            reason: format!("{:?}", self.status),
            last: self.theta.iter().copied().collect(),
        })
    }
}

/// Which nuisance each unit uses and how much it weighs in `P_n`.
struct Layout<'a, E> {
    units: Vec<(usize, &'a E, f64)>,
}

impl<E: Sync> Layout<'_, E> {
    fn evaluate<S: EstimatingSystem<Nuisance = E>>(&self, system: &S, theta: &[f64]) -> Result<(Vector, Matrix, Vec<(Vector, Matrix)>)> {
        let q = system.dim();
        let per: Vec<(Vector, Matrix)> = self
            .units
            .par_iter()
            .with_min_len(32)
            .map(|&(i, eta, _)| system.score_and_jacobian(i, theta, eta))
            .collect::<Result<_>>()?;
        let mut g = Vector::zeros(q);
        let mut jac = Matrix::zeros(q, q);
        for ((m, dm), &(_, _, w)) in per.iter().zip(&self.units) {
            g.axpy(w, m, 1.0);
            jac += dm * w;
        }
        Ok((g, jac, per))
    }

    fn merit<S: EstimatingSystem<Nuisance = E>>(&self, system: &S, theta: &[f64]) -> Option<(f64, Vector)> {
        let per: Vec<Vector> = self
            .units
            .par_iter()
            .with_min_len(32)
            .map(|&(i, eta, _)| system.score(i, theta, eta))
            .collect::<Result<_>>()
            .ok()?;
        let mut g = Vector::zeros(system.dim());
        for (m, &(_, _, w)) in per.iter().zip(&self.units) {
            g.axpy(w, m, 1.0);
        }
        g.iter().all(|v| v.is_finite()).then(|| (g.norm(), g))
    }
}

fn finite(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn newton<S: EstimatingSystem>(system: &S, layout: &Layout<'_, S::Nuisance>, theta0: Vector, opts: &SolveOptions) -> Result<(Vector, SolveStatus, usize)> {
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let mut theta = theta0;
    let (mut g, mut jac, _) = layout.evaluate(system, theta.as_slice())?;
    if !finite(&g) {
        return Ok((theta, SolveStatus::NonFinite, 0));
    }
    for iter in 0..opts.max_iter {
        if max_abs(&g) <= opts.tol {
            return Ok((theta, SolveStatus::Converged, iter));
        }
        let Some(step) = solve(&jac, &g) else {
            return Ok((theta, SolveStatus::SingularBread, iter));
        };
        let merit = g.norm();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand = &theta - &step * t;
            if let Some((m, gc)) = layout.merit(system, cand.as_slice()) {
                if m < merit || max_abs(&gc) <= opts.tol {
                    accepted = Some(cand);
                    break;
                }
            }
            t *= 0.5;
        }
        let Some(next) = accepted else {
            // stationary to round-off: accept if the residual is already tiny
            let status = if max_abs(&g) <= opts.tol.sqrt() && max_abs(&step) <= 1e-10 * (1.0 + max_abs(&theta)) {
                SolveStatus::Converged
            } else {
                SolveStatus::LineSearchFailed
            };
            return Ok((theta, status, iter));
        };
        theta = next;
        let (g2, jac2, _) = layout.evaluate(system, theta.as_slice())?;
        g = g2;
        jac = jac2;
        debug!("newton iter {}: |g|_inf = {:e}", iter + 1, max_abs(&g));
        if !finite(&g) {
            return Ok((theta, SolveStatus::NonFinite, iter + 1));
        }
    }
    let status = if max_abs(&g) <= opts.tol { SolveStatus::Converged } else { SolveStatus::MaxIterations };
    Ok((theta, status, opts.max_iter))
}

fn start<S: EstimatingSystem>(system: &S, eta: &S::Nuisance, opts: &SolveOptions) -> Result<Vector> {
    let q = system.dim();
    let v = system.initial(eta).or_else(|| opts.theta0.clone()).unwrap_or_else(|| vec![0.0; q]);
    if v.len() != q {
        return Err(Error::InvalidArgument(format!("initial value has length {}, expected {q}", v.len())));
    }
    Ok(Vector::from_vec(v))
}

fn assemble<S: EstimatingSystem>(
    system: &S,
    layout: &Layout<'_, S::Nuisance>,
    theta: Vector,
    status: SolveStatus,
    iterations: usize,
    folds: Option<(Vec<usize>, usize)>,
) -> Result<ZFit> {
    let q = system.dim();
    let n = layout.units.len();
    let (g, bread, per) = layout.evaluate(system, theta.as_slice())?;
    let mut meat = Matrix::zeros(q, q);
    for ((m, _), &(_, _, w)) in per.iter().zip(&layout.units) {
        meat += m * m.transpose() * w;
    }
    let (avar, bread_ok) = match inverse(&bread) {
        Some(inv) => {
            let v = &inv * &meat * inv.transpose();
            ((&v + v.transpose()) * 0.5, true)
        }
        None => (Matrix::from_element(q, q, f64::NAN), false),
    };
    let cov = &avar / n as f64;
    let decompositions = layout
        .units
        .iter()
        .map(|&(i, eta, _)| system.decompose(i, theta.as_slice(), eta))
        .collect::<Option<Vec<_>>>()
        .map(|v| v.into_iter().collect::<Result<Vec<_>>>())
        .transpose()?;
    let (fold_of, fold_breads) = match folds {
        Some((fold_of, k)) => {
            let mut breads = vec![Matrix::zeros(q, q); k];
            let mut sizes = vec![0usize; k];
            for (idx, (_, dm)) in per.iter().enumerate() {
                breads[fold_of[idx]] += dm;
                sizes[fold_of[idx]] += 1;
            }
            for (b, s) in breads.iter_mut().zip(&sizes) {
                *b /= *s as f64;
            }
            (Some(fold_of), breads)
        }
        None => (None, vec![bread.clone()]),
    };
    let (scores, jacobians): (Vec<Vector>, Vec<Matrix>) = per.into_iter().unzip();
    let residual = max_abs(&g);
    let status = if status == SolveStatus::Converged && !bread_ok { SolveStatus::SingularBread } else { status };
    Ok(ZFit {
        theta,
        bread,
        meat,
        avar,
        cov,
        scores,
        jacobians,
        decompositions,
        residual,
        iterations,
        converged: status == SolveStatus::Converged,
        status,
        fold_of,
        fold_breads,
    })
}

/// Solve `P_n m(theta, eta) = 0` with `eta` fitted on all units.
pub fn solve_z<S: EstimatingSystem>(system: &S, opts: &SolveOptions) -> Result<ZFit> {
    let n = system.n_units();
    if n == 0 {
        return Err(Error::InvalidArgument("no units".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let eta = system.fit_nuisance(&all)?;
    solve_with(system, &eta, opts)
}

/// Solve with an already fitted nuisance.
pub fn solve_with<S: EstimatingSystem>(system: &S, eta: &S::Nuisance, opts: &SolveOptions) -> Result<ZFit> {
    let n = system.n_units();
    if n == 0 {
        return Err(Error::InvalidArgument("no units".into()));
    }
    let w = 1.0 / n as f64;
    let layout = Layout { units: (0..n).map(|i| (i, eta, w)).collect() };
    let theta0 = start(system, eta, opts)?;
    let (theta, status, iterations) = newton(system, &layout, theta0, opts)?;
    assemble(system, &layout, theta, status, iterations, None)
}

/// Random partition of `0..n` into `k` folds whose sizes differ by at most one.
pub fn partition(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || n < k {
        return Err(Error::InvalidArgument(format!("cross-fitting needs 2 <= K <= n, got K = {k}, n = {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut at = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut fold = idx[at..at + size].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        at += size;
    }
    Ok(folds)
}

/// Cross-fitted solve: `eta_k` is fitted on the complement of fold `k` and the
/// equation `K^-1 sum_k P_{n,k} m(theta, eta_k) = 0` is solved.
pub fn crossfit_solve<S: EstimatingSystem>(system: &S, k: usize, seed: u64, opts: &SolveOptions) -> Result<ZFit> {
    crossfit_solve_detailed(system, k, seed, opts).map(|(fit, _)| fit)
}

/// [`crossfit_solve`] that also returns the per-fold nuisances.
pub fn crossfit_solve_detailed<S: EstimatingSystem>(system: &S, k: usize, seed: u64, opts: &SolveOptions) -> Result<(ZFit, Vec<S::Nuisance>)> {
    let n = system.n_units();
    let folds = partition(n, k, seed)?;
    let mut fold_of = vec![0usize; n];
    for (f, fold) in folds.iter().enumerate() {
        for &i in fold {
            fold_of[i] = f;
        }
    }
    let etas: Vec<S::Nuisance> = (0..k)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
            system.fit_nuisance(&train).map_err(|e| Error::Fold { fold: f, reason: e.to_string() })
        })
        .collect::<Result<_>>()?;
    let units = (0..n).map(|i| (i, &etas[fold_of[i]], 1.0 / (k as f64 * folds[fold_of[i]].len() as f64))).collect();
    let layout = Layout { units };
    let theta0 = start(system, &etas[0], opts)?;
    let (theta, status, iterations) = newton(system, &layout, theta0, opts)?;
    let fit = assemble(system, &layout, theta, status, iterations, Some((fold_of, k)))?;
    drop(layout);
    Ok((fit, etas))
}

/// `|P_n d_theta m - FD(P_n m)|_inf / (1 + |P_n d_theta m|_inf)` with central differences.
pub fn finite_difference_gap<S: EstimatingSystem>(system: &S, eta: &S::Nuisance, theta: &[f64], step: f64) -> Result<f64> {
    let n = system.n_units();
    let q = system.dim();
    let w = 1.0 / n as f64;
    let layout = Layout { units: (0..n).map(|i| (i, eta, w)).collect() };
    let (_, jac, _) = layout.evaluate(system, theta)?;
    let mut fd = Matrix::zeros(q, q);
    for c in 0..q {
        let mut hi = theta.to_vec();
        let mut lo = theta.to_vec();
        hi[c] += step;
        lo[c] -= step;
        let (gh, _, _) = layout.evaluate(system, &hi)?;
        let (gl, _, _) = layout.evaluate(system, &lo)?;
        fd.set_column(c, &((gh - gl) / (2.0 * step)));
    }
    Ok(max_abs_matrix(&(&jac - fd)) / (1.0 + max_abs_matrix(&jac)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessEntry {
    pub label: String,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    /// Some coordinate has `|mean| > 4 se`.
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub n_mc: usize,
    pub entries: Vec<RobustnessEntry>,
}

impl RobustnessReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| !e.flagged)
    }
}

/// Monte Carlo check that `P m(theta_star, eta) = 0` for every supplied `eta`.
///
/// `sampler(i)` draws the `i`-th i.i.d. unit; `score(unit, theta, eta)` is the
/// estimating function.
pub fn check_global_robustness<D, E, F, G>(sampler: F, score: G, theta_star: &[f64], perturbations: &[(String, E)], n_mc: usize) -> Result<RobustnessReport>
where
    D: Send + Sync,
    E: Sync,
    F: Fn(usize) -> D + Sync,
    G: Fn(&D, &[f64], &E) -> Result<Vector> + Sync,
{
    if n_mc < 2 {
        return Err(Error::InvalidArgument("need at least two Monte Carlo draws".into()));
    }
    let units: Vec<D> = (0..n_mc).into_par_iter().map(&sampler).collect();
    let q = theta_star.len();
    let mut entries = Vec::with_capacity(perturbations.len());
    for (label, eta) in perturbations {
        let scores: Vec<Vector> = units.par_iter().map(|u| score(u, theta_star, eta)).collect::<Result<_>>()?;
        let mut sum = Vector::zeros(q);
        let mut sq = Vector::zeros(q);
        for s in &scores {
            sum += s;
            sq += s.component_mul(s);
        }
        let m = n_mc as f64;
        let mean = &sum / m;
        let var = (sq / m - mean.component_mul(&mean)) * (m / (m - 1.0));
        let se: Vec<f64> = var.iter().map(|v| (v.max(0.0) / m).sqrt()).collect();
        let flagged = mean.iter().zip(&se).any(|(mu, s)| mu.abs() > 4.0 * s);
        entries.push(RobustnessEntry { label: label.clone(), mean: mean.iter().copied().collect(), se, flagged });
    }
    Ok(RobustnessReport { n_mc, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// `m_i = x_i (y_i - x_i^T theta)`.
    struct Ols {
        x: Vec<Vector>,
        y: Vec<f64>,
    }

    impl EstimatingSystem for Ols {
        type Nuisance = ();
        fn dim(&self) -> usize {
            self.x[0].len()
        }
        fn n_units(&self) -> usize {
            self.y.len()
        }
        fn fit_nuisance(&self, _train: &[usize]) -> Result<()> {
            Ok(())
        }
        fn score(&self, i: usize, theta: &[f64], _: &()) -> Result<Vector> {
            let r = self.y[i] - self.x[i].dot(&Vector::from_column_slice(theta));
            Ok(&self.x[i] * r)
        }
        fn score_jacobian(&self, i: usize, _theta: &[f64], _: &()) -> Result<Matrix> {
            Ok(-(&self.x[i] * self.x[i].transpose()))
        }
        fn decompose(&self, i: usize, theta: &[f64], _: &()) -> Option<Result<Decomposition>> {
            let r = self.y[i] - self.x[i].dot(&Vector::from_column_slice(theta));
            Some(Ok(Decomposition {
                d: Matrix::from_row_slice(1, self.x[i].len(), self.x[i].as_slice()),
                r: Vector::from_element(1, r),
                dr: -Matrix::from_row_slice(1, self.x[i].len(), self.x[i].as_slice()),
            }))
        }
    }

    fn ols(n: usize, seed: u64) -> Ols {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vector> = (0..n).map(|_| Vector::from_vec(vec![1.0, rng.random_range(-1.0..1.0), rng.random::<f64>()])).collect();
        let y = x.iter().map(|xi| 0.5 - xi[1] + 2.0 * xi[2] + rng.random_range(-0.5..0.5)).collect();
        Ols { x, y }
    }

    #[test]
    fn linear_system_matches_normal_equations_in_one_step() {
        let sys = ols(200, 1);
        let fit = solve_z(&sys, &SolveOptions::default()).unwrap();
        let xm = Matrix::from_fn(200, 3, |i, j| sys.x[i][j]);
        let beta = (xm.transpose() * &xm).lu().solve(&(xm.transpose() * Vector::from_column_slice(&sys.y))).unwrap();
        assert!((&fit.theta - beta).amax() < 1e-10);
        assert!(fit.converged);
        assert_eq!(fit.iterations, 1);
        assert!((&fit.cov - fit.cov.transpose()).amax() < 1e-15);
        assert!(fit.decompositions.is_some());
    }

    /// `m_i = theta - c_i`.
    struct Mean(Vec<f64>);

    impl EstimatingSystem for Mean {
        type Nuisance = f64;
        fn dim(&self) -> usize {
            1
        }
        fn n_units(&self) -> usize {
            self.0.len()
        }
        fn fit_nuisance(&self, train: &[usize]) -> Result<f64> {
            Ok(train.len() as f64)
        }
        fn score(&self, i: usize, theta: &[f64], _: &f64) -> Result<Vector> {
            Ok(Vector::from_element(1, theta[0] - self.0[i]))
        }
        fn score_jacobian(&self, _: usize, _: &[f64], _: &f64) -> Result<Matrix> {
            Ok(Matrix::from_element(1, 1, 1.0))
        }
    }

    #[test]
    fn scalar_mean_and_sandwich() {
        let c = vec![1.0, 4.0, 2.0, 7.0, 6.0];
        let fit = solve_z(&Mean(c.clone()), &SolveOptions::default()).unwrap();
        let mean = 4.0;
        let var = c.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0;
        assert!((fit.theta[0] - mean).abs() < 1e-12);
        assert!((fit.avar[(0, 0)] - var).abs() < 1e-12);
        assert!((fit.cov[(0, 0)] - var / 5.0).abs() < 1e-12);
    }

    /// `m = theta^2 + 1` has no root; `m = 1` has a zero Jacobian.
    struct NoRoot(bool);

    impl EstimatingSystem for NoRoot {
        type Nuisance = ();
        fn dim(&self) -> usize {
            1
        }
        fn n_units(&self) -> usize {
            3
        }
        fn fit_nuisance(&self, _: &[usize]) -> Result<()> {
            Ok(())
        }
        fn score(&self, _: usize, theta: &[f64], _: &()) -> Result<Vector> {
            Ok(Vector::from_element(1, if self.0 { theta[0] * theta[0] + 1.0 } else { 1.0 }))
        }
        fn score_jacobian(&self, _: usize, theta: &[f64], _: &()) -> Result<Matrix> {
            Ok(Matrix::from_element(1, 1, if self.0 { 2.0 * theta[0] } else { 0.0 }))
        }
    }

    #[test]
    fn pathological_systems_do_not_converge() {
        for flat in [false, true] {
            let opts = SolveOptions { theta0: Some(vec![0.3]), ..Default::default() };
            let fit = solve_z(&NoRoot(flat), &opts).unwrap();
            assert!(!fit.converged);
            match fit.into_result() {
                Err(Error::NonConvergence { last, .. }) => assert_eq!(last.len(), 1),
                other => panic!("expected non-convergence, got {other:?}"),
            }
        }
    }

    #[test]
    fn partition_sizes_and_determinism() {
        let folds = partition(10, 3, 9).unwrap();
        let mut sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 3, 4]);
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(folds, partition(10, 3, 9).unwrap());
        assert!(partition(2, 3, 0).is_err());
        assert!(partition(5, 1, 0).is_err());
    }

    #[test]
    fn crossfit_with_unused_nuisance_matches_full_solve() {
        let sys = Mean((0..11).map(|i| (i * i) as f64 * 0.1).collect());
        let full = solve_z(&sys, &SolveOptions::default()).unwrap();
        for k in [2, 3] {
            let cf = crossfit_solve(&sys, k, 4, &SolveOptions::default()).unwrap();
            // equal-weight folds of unequal size shift the mean slightly; equal sizes agree exactly
            if 11 % k == 0 {
                assert!((cf.theta[0] - full.theta[0]).abs() < 1e-10);
            }
            assert!(cf.converged);
        }
        let sys = ols(120, 3);
        let full = solve_z(&sys, &SolveOptions::default()).unwrap();
        let cf = crossfit_solve(&sys, 2, 8, &SolveOptions::default()).unwrap();
        let again = crossfit_solve(&sys, 2, 8, &SolveOptions::default()).unwrap();
        assert_eq!(cf.theta, again.theta);
        // with equal fold sizes the fold-averaged OLS equation is the pooled one
        assert!((&cf.theta - &full.theta).amax() < 1e-10);
    }

    #[test]
    fn finite_difference_contract_holds_for_ols() {
        let sys = ols(50, 2);
        let gap = finite_difference_gap(&sys, &(), &[0.1, 0.2, -0.3], 1e-6).unwrap();
        assert!(gap < 1e-5);
    }

    #[test]
    fn robustness_harness_flags_non_robust_score() {
        let sampler = |i: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            let x: f64 = rng.random_range(-1.0..1.0);
            (x, 1.0 + x + rng.random_range(-1.0..1.0))
        };
        // m = y - eta(x) with eta(x) = 1 + x + offset: unbiased only at offset 0
        let score = |u: &(f64, f64), _theta: &[f64], offset: &f64| Ok(Vector::from_element(1, u.1 - (1.0 + u.0) - offset));
        let perturbations = [("truth".to_string(), 0.0), ("offset".to_string(), 0.5)];
        let report = check_global_robustness(sampler, score, &[0.0], &perturbations, 20_000).unwrap();
        assert!(!report.entries[0].flagged);
        assert!(report.entries[1].flagged);
        assert!(!report.all_pass());
    }
}
