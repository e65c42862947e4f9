//! Per-time weight matrices `d_t(s)` for the second-stage estimating equation.
//!
//! The efficient weight is `E{d_beta phi_t | S_t} [E{phi_t phi_t^T | S_t}]^+`,
//! evaluated at a preliminary `beta` and the fitted outcome regressions. The
//! conditional expectations are approximated in one of four ways, see
//! [`DWeightMode`].

use log::warn;
use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::cee::{phi_atom, LinkKind, PhiAtom};
use crate::error::{Error, Result};
use crate::linalg::{clip_eigenvalues, ridge_least_squares, sym_pinv, Matrix, Vector, PINV_REL_EPS};
use crate::nuisance::{NuisanceFit, SplineBasis};
use crate::panel::Panel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DWeightMode {
    /// `d_t = I_p`.
    Unit,
    /// Per-time sample means; ignores `s`.
    PerTimeEmpirical,
    /// Both expectations regressed on a spline basis of `(t, s)`, pooled over time.
    PooledSmoother {
        #[serde(default = "default_knots")]
        knots: usize,
    },
    /// Scalar ratio `E{dR/dgamma | s} / E{R^2 | s}` times the identity.
    AnalyticScalar,
}

fn default_knots() -> usize {
    5
}

impl DWeightMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "unit" => Ok(DWeightMode::Unit),
            "per_time" | "per_time_empirical" | "empirical" => Ok(DWeightMode::PerTimeEmpirical),
            "pooled" | "pooled_smoother" | "smoother" => Ok(DWeightMode::PooledSmoother { knots: default_knots() }),
            "scalar" | "analytic_scalar" => Ok(DWeightMode::AnalyticScalar),
            other => Err(Error::InvalidArgument(format!("unknown d-weight mode `{other}`"))),
        }
    }

    /// `PerTimeEmpirical` for the identity link, `PooledSmoother` for the log link.
    pub fn default_for(link: LinkKind) -> Self {
        match link {
            LinkKind::Identity => DWeightMode::PerTimeEmpirical,
            LinkKind::Log => DWeightMode::PooledSmoother { knots: default_knots() },
        }
    }
}

#[derive(Debug, Clone)]
enum Weights {
    Unit,
    PerTime(Vec<Matrix>),
    Pooled {
        basis: SplineBasis,
        /// Moderator columns that vary, fed to the basis after `t`.
        s_cols: Vec<usize>,
        /// One coefficient column per entry of the `p x p` numerator.
        num: Matrix,
        /// One coefficient column per upper-triangular entry of the second moment.
        den: Matrix,
        floor: f64,
    },
    Scalar {
        s_cols: Vec<usize>,
        /// Per-time coefficients (intercept first) of the two regressions.
        num: Vec<Vector>,
        den: Vec<Vector>,
        floor: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct DWeightFit {
    pub mode: DWeightMode,
    /// Relative eigenvalue threshold used when inverting second moments.
    pub eps: f64,
    /// One-based decision points that fell back to the identity weight.
    pub fallback_times: Vec<usize>,
    p: usize,
    horizon: usize,
    weights: Weights,
}

/// One available decision point's atom together with its weight factor.
#[derive(Debug, Clone)]
pub struct AtomRow {
    pub t0: usize,
    pub s: Vec<f64>,
    /// `(A - p) / (p (1 - p))`.
    pub w: f64,
    pub atom: PhiAtom,
}

/// Atoms at `beta` for every point of the trajectories in `subset`.
pub fn collect_atoms(panel: &Panel, subset: &[usize], nuisance: &NuisanceFit, beta: &[f64], link: LinkKind) -> Result<Vec<AtomRow>> {
    let mut rows = Vec::with_capacity(subset.len() * panel.horizon());
    for &i in subset {
        for (t0, pt) in panel.trajectory(i).points.iter().enumerate() {
            let (mu1, mu0) = if pt.avail {
                (nuisance.predict(t0 + 1, &pt.history, true)?, nuisance.predict(t0 + 1, &pt.history, false)?)
            } else {
                (0.0, 0.0)
            };
            let atom = phi_atom(link, pt, mu1, mu0, beta)?;
            let w = if pt.avail { (pt.a() - pt.prob) / (pt.prob * (1.0 - pt.prob)) } else { 0.0 };
            rows.push(AtomRow { t0, s: pt.moderator.clone(), w, atom });
        }
    }
    Ok(rows)
}

/// Step 3: fit `d_t` from the trajectories in `subset` at `beta_init`.
pub fn fit_dweights(
    panel: &Panel,
    subset: &[usize],
    nuisance: &NuisanceFit,
    beta_init: &[f64],
    link: LinkKind,
    mode: DWeightMode,
) -> Result<DWeightFit> {
    if beta_init.iter().any(|b| !b.is_finite()) {
        return Err(Error::InvalidArgument("beta_init must be finite".into()));
    }
    if mode == DWeightMode::Unit {
        return Ok(DWeightFit::unit(beta_init.len(), panel.horizon()));
    }
    let rows = collect_atoms(panel, subset, nuisance, beta_init, link)?;
    fit_from_atoms(&rows, beta_init.len(), panel.horizon(), mode)
}

fn varying_columns(rows: &[AtomRow], p: usize) -> Vec<usize> {
    (0..p)
        .filter(|&j| {
            let first = rows.first().map_or(0.0, |r| r.s[j]);
            rows.iter().any(|r| r.s[j] != first)
        })
        .collect()
}

fn upper_index(p: usize) -> Vec<(usize, usize)> {
    (0..p).flat_map(|a| (a..p).map(move |b| (a, b))).collect()
}

/// Fit from precomputed atoms (all points, unavailable ones included as zeros).
pub fn fit_from_atoms(rows: &[AtomRow], p: usize, horizon: usize, mode: DWeightMode) -> Result<DWeightFit> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no atoms to fit d-weights".into()));
    }
    let mut fallback_times = Vec::new();
    let weights = match mode {
        DWeightMode::Unit => Weights::Unit,
        DWeightMode::PerTimeEmpirical => {
            let mut mats = Vec::with_capacity(horizon);
            for t0 in 0..horizon {
                let mut jac = Matrix::zeros(p, p);
                let mut second = Matrix::zeros(p, p);
                let mut cnt = 0.0;
                for r in rows.iter().filter(|r| r.t0 == t0) {
                    jac += &r.atom.jac;
                    second += &r.atom.value * r.atom.value.transpose();
                    cnt += 1.0;
                }
                let d = if cnt > 0.0 { sym_pinv(&(second / cnt), PINV_REL_EPS).map(|inv| (jac / cnt) * inv) } else { None };
                match d {
                    Some(d) if d.iter().all(|v| v.is_finite()) => mats.push(d),
                    _ => {
                        warn!("d-weight second moment is singular at t = {}; using the identity", t0 + 1);
                        fallback_times.push(t0 + 1);
                        mats.push(Matrix::identity(p, p));
                    }
                }
            }
            Weights::PerTime(mats)
        }
        DWeightMode::PooledSmoother { knots } => {
            let s_cols = varying_columns(rows, p);
            let feats: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| std::iter::once(r.t0 as f64 + 1.0).chain(s_cols.iter().map(|&j| r.s[j])).collect())
                .collect();
            let basis = SplineBasis::fit(&feats, knots);
            let design = pooled_design(&basis, &feats);
            let pairs = upper_index(p);
            let mut num = Matrix::zeros(design.ncols(), p * p);
            let mut den = Matrix::zeros(design.ncols(), pairs.len());
            let mut global = Matrix::zeros(p, p);
            for r in rows {
                global += &r.atom.value * r.atom.value.transpose();
            }
            global /= rows.len() as f64;
            for a in 0..p {
                for b in 0..p {
                    let y = Vector::from_iterator(rows.len(), rows.iter().map(|r| r.atom.jac[(a, b)]));
                    num.set_column(a * p + b, &ridge_least_squares(&design, &y, 1e-10));
                }
            }
            for (c, &(a, b)) in pairs.iter().enumerate() {
                let y = Vector::from_iterator(rows.len(), rows.iter().map(|r| r.atom.value[a] * r.atom.value[b]));
                den.set_column(c, &ridge_least_squares(&design, &y, 1e-10));
            }
            let trace = global.trace();
            if !(trace > 0.0) {
                return Err(Error::Singular("pooled second moment of phi has no positive mass".into()));
            }
            let lam_min = SymmetricEigen::new(global.clone()).eigenvalues.min().max(0.0);
            let floor = (PINV_REL_EPS * trace / p as f64).max(0.01 * lam_min);
            Weights::Pooled { basis, s_cols, num, den, floor }
        }
        DWeightMode::AnalyticScalar => {
            let s_cols = varying_columns(rows, p);
            let mut num = Vec::with_capacity(horizon);
            let mut den = Vec::with_capacity(horizon);
            let mut floor = Vec::with_capacity(horizon);
            for t0 in 0..horizon {
                let at: Vec<&AtomRow> = rows.iter().filter(|r| r.t0 == t0).collect();
                let x = Matrix::from_fn(at.len(), s_cols.len() + 1, |i, c| if c == 0 { 1.0 } else { at[i].s[s_cols[c - 1]] });
                let yn = Vector::from_iterator(at.len(), at.iter().map(|r| r.w * r.atom.dresid));
                let yd = Vector::from_iterator(at.len(), at.iter().map(|r| (r.w * r.atom.resid).powi(2)));
                let mean_d = yd.mean();
                if at.is_empty() || !(mean_d > 0.0) {
                    warn!("scalar d-weight denominator vanishes at t = {}; using the identity", t0 + 1);
                    fallback_times.push(t0 + 1);
                    num.push(Vector::from_element(1, 1.0));
                    den.push(Vector::from_element(1, 1.0));
                    floor.push(1.0);
                    continue;
                }
                let (cn, cd) = if s_cols.is_empty() {
                    (Vector::from_element(1, yn.mean()), Vector::from_element(1, mean_d))
                } else {
                    (ridge_least_squares(&x, &yn, 0.0), ridge_least_squares(&x, &yd, 0.0))
                };
                num.push(cn);
                den.push(cd);
                floor.push(0.01 * mean_d);
            }
            Weights::Scalar { s_cols, num, den, floor }
        }
    };
    Ok(DWeightFit { mode, eps: PINV_REL_EPS, fallback_times, p, horizon, weights })
}

fn pooled_design(basis: &SplineBasis, feats: &[Vec<f64>]) -> Matrix {
    let w = basis.width() + 1;
    let mut m = Matrix::zeros(feats.len(), w);
    for (i, f) in feats.iter().enumerate() {
        m[(i, 0)] = 1.0;
        for (c, v) in basis.expand(f).into_iter().enumerate() {
            m[(i, c + 1)] = v;
        }
    }
    m
}

impl DWeightFit {
    pub fn unit(p: usize, horizon: usize) -> Self {
        DWeightFit { mode: DWeightMode::Unit, eps: PINV_REL_EPS, fallback_times: vec![], p, horizon, weights: Weights::Unit }
    }

    /// Weights that do not depend on `s`, one matrix per decision point.
    pub fn from_per_time(mats: Vec<Matrix>) -> Result<Self> {
        let p = mats.first().map(|m| m.nrows()).ok_or_else(|| Error::InvalidArgument("no weight matrices".into()))?;
        if mats.iter().any(|m| m.nrows() != p || m.ncols() != p || m.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidArgument("weight matrices must be finite and p x p".into()));
        }
        let horizon = mats.len();
        Ok(DWeightFit {
            mode: DWeightMode::PerTimeEmpirical,
            eps: PINV_REL_EPS,
            fallback_times: vec![],
            p,
            horizon,
            weights: Weights::PerTime(mats),
        })
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    /// Fitted conditional means `(E{d_beta phi | t, s}, E{phi phi^T | t, s})` of
    /// the pooled smoother, before flooring; `None` for other modes.
    pub fn pooled_moments(&self, t: usize, s: &[f64]) -> Option<(Matrix, Matrix)> {
        let Weights::Pooled { basis, s_cols, num, den, .. } = &self.weights else {
            return None;
        };
        let p = self.p;
        let feat: Vec<f64> = std::iter::once(t as f64).chain(s_cols.iter().map(|&j| s[j])).collect();
        let row = pooled_design(basis, std::slice::from_ref(&feat));
        let nv = &row * num;
        let dv = &row * den;
        let jac = Matrix::from_fn(p, p, |a, b| nv[(0, a * p + b)]);
        let mut second = Matrix::zeros(p, p);
        for (c, (a, b)) in upper_index(p).into_iter().enumerate() {
            second[(a, b)] = dv[(0, c)];
            second[(b, a)] = dv[(0, c)];
        }
        Some((jac, second))
    }

    /// `d_t(s)` for one-based `t`.
    pub fn eval(&self, t: usize, s: &[f64]) -> Result<Matrix> {
        if t == 0 || t > self.horizon {
            return Err(Error::InvalidArgument(format!("t = {t} outside 1..={}", self.horizon)));
        }
        if s.len() != self.p {
            return Err(Error::InvalidArgument(format!("moderator has length {}, expected {}", s.len(), self.p)));
        }
        let p = self.p;
        Ok(match &self.weights {
            Weights::Unit => Matrix::identity(p, p),
            Weights::PerTime(m) => m[t - 1].clone(),
            Weights::Pooled { floor, .. } => {
                let (jac, second) = self.pooled_moments(t, s).expect("pooled weights");
                let clipped = clip_eigenvalues(&second, *floor);
                match sym_pinv(&clipped, PINV_REL_EPS) {
                    Some(inv) => jac * inv,
                    None => Matrix::identity(p, p),
                }
            }
            Weights::Scalar { s_cols, num, den, floor } => {
                let x: Vec<f64> = std::iter::once(1.0).chain(s_cols.iter().map(|&j| s[j])).collect();
                let dot = |c: &Vector| if c.len() == 1 { c[0] } else { c.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() };
                let ratio = dot(&num[t - 1]) / dot(&den[t - 1]).max(floor[t - 1]);
                Matrix::identity(p, p) * ratio
            }
        })
    }
}

/// Free-function form of [`DWeightFit::eval`].
pub fn eval_dweight(fit: &DWeightFit, t: usize, s: &[f64]) -> Result<Matrix> {
    fit.eval(t, s)
}
