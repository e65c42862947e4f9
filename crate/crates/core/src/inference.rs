//! Confidence intervals and the leverage-corrected sandwich variance.
//!
//! The correction writes each unit's score as `m_i = D_i^T r_i` (a `T`-vector
//! of residuals mapped by a `T x q` weight matrix) and inflates residuals by
//! `(I - H_ii)^-1`, where `H_ii = n^-1 d_theta r_i M^-1 D_i^T` and `M` is the
//! bread.

use log::warn;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::linalg::{condition_number, inverse, Matrix, Vector};
use crate::zestim::{Decomposition, ZFit};

/// Condition-number limit for `I - H_ii`.
pub const LEVERAGE_COND_LIMIT: f64 = 1e12;
/// Largest fraction of units allowed to fall back before the correction is refused.
pub const MAX_FALLBACK_FRACTION: f64 = 0.10;
/// Below this many units the t quantile is used by default.
pub const SMALL_SAMPLE_N: usize = 50;

#[derive(Debug, Clone)]
pub struct CorrectionInputs<'a> {
    pub units: &'a [Decomposition],
    /// `M = P_n d_theta m`.
    pub bread: &'a Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correction {
    pub meat: Matrix,
    /// `M^-1 meat M^-T / n`; equal to the uncorrected covariance when refused.
    pub cov: Matrix,
    /// Units whose `I - H_ii` was ill-conditioned and kept their raw contribution.
    pub fallbacks: usize,
    /// More than [`MAX_FALLBACK_FRACTION`] of the units fell back.
    pub refused: bool,
}

fn sym(m: Matrix) -> Matrix {
    (&m + m.transpose()) * 0.5
}

/// Corrected meat contributions `D^T (I-H)^-1 r` for one group sharing `bread_inv`.
fn corrected_terms(units: &[Decomposition], bread_inv: &Matrix, n_group: usize) -> Result<(Vec<Vector>, usize)> {
    let mut out = Vec::with_capacity(units.len());
    let mut fallbacks = 0;
    for u in units {
        let t = u.r.len();
        if u.d.nrows() != t || u.dr.nrows() != t || u.d.ncols() != bread_inv.nrows() || u.dr.ncols() != bread_inv.nrows() {
            return Err(Error::InvalidArgument("decomposition shapes do not match the bread".into()));
        }
        let h = &u.dr * bread_inv * u.d.transpose() / n_group as f64;
        let ih = Matrix::identity(t, t) - h;
        let adjusted = if condition_number(&ih) <= LEVERAGE_COND_LIMIT {
            ih.lu().solve(&u.r)
        } else {
            None
        };
        match adjusted {
            Some(r) if r.iter().all(|v| v.is_finite()) => out.push(u.d.transpose() * r),
            _ => {
                fallbacks += 1;
                out.push(u.d.transpose() * &u.r);
            }
        }
    }
    Ok((out, fallbacks))
}

fn outer_mean(v: &[Vector], q: usize) -> Matrix {
    let mut m = Matrix::zeros(q, q);
    for x in v {
        m += x * x.transpose();
    }
    m / v.len().max(1) as f64
}

/// Leverage-corrected meat and covariance for a non-cross-fitted solve.
pub fn small_sample_correct(inputs: &CorrectionInputs<'_>) -> Result<Correction> {
    let n = inputs.units.len();
    let q = inputs.bread.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("no units to correct".into()));
    }
    let bread_inv = inverse(inputs.bread).ok_or_else(|| Error::Singular("bread is not invertible".into()))?;
    let raw: Vec<Vector> = inputs.units.iter().map(|u| u.d.transpose() * &u.r).collect();
    let (terms, fallbacks) = corrected_terms(inputs.units, &bread_inv, n)?;
    let refused = fallbacks as f64 > MAX_FALLBACK_FRACTION * n as f64;
    if fallbacks > 0 {
        warn!("small-sample correction: {fallbacks} of {n} units kept their uncorrected contribution");
    }
    let meat = if refused { outer_mean(&raw, q) } else { outer_mean(&terms, q) };
    let cov = sym(&bread_inv * &meat * bread_inv.transpose() / n as f64);
    Ok(Correction { meat, cov, fallbacks, refused })
}

/// Fold-local correction for a cross-fitted solve: each fold uses its own bread
/// and size, the corrected meats are averaged over folds.
pub fn small_sample_correct_folds(units: &[Decomposition], fold_of: &[usize], fold_breads: &[Matrix], bread: &Matrix) -> Result<Correction> {
    let n = units.len();
    let k = fold_breads.len();
    let q = bread.nrows();
    if fold_of.len() != n || n == 0 || k == 0 {
        return Err(Error::InvalidArgument("fold assignment does not match the units".into()));
    }
    let bread_inv = inverse(bread).ok_or_else(|| Error::Singular("bread is not invertible".into()))?;
    let mut meat = Matrix::zeros(q, q);
    let mut raw_meat = Matrix::zeros(q, q);
    let mut fallbacks = 0;
    for f in 0..k {
        let group: Vec<Decomposition> = units.iter().zip(fold_of).filter(|(_, &g)| g == f).map(|(u, _)| u.clone()).collect();
        if group.is_empty() {
            continue;
        }
        let inv = inverse(&fold_breads[f]).ok_or_else(|| Error::Singular(format!("bread of fold {f} is not invertible")))?;
        let (terms, fb) = corrected_terms(&group, &inv, group.len())?;
        fallbacks += fb;
        meat += outer_mean(&terms, q) / k as f64;
        let raw: Vec<Vector> = group.iter().map(|u| u.d.transpose() * &u.r).collect();
        raw_meat += outer_mean(&raw, q) / k as f64;
    }
    let refused = fallbacks as f64 > MAX_FALLBACK_FRACTION * n as f64;
    let meat = if refused { raw_meat } else { meat };
    let cov = sym(&bread_inv * &meat * bread_inv.transpose() / n as f64);
    Ok(Correction { meat, cov, fallbacks, refused })
}

/// Correct a solved system if it exposes the residual decomposition.
pub fn correct_fit(fit: &ZFit) -> Result<Option<Correction>> {
    let Some(units) = &fit.decompositions else {
        return Ok(None);
    };
    Ok(Some(match &fit.fold_of {
        Some(fold_of) => small_sample_correct_folds(units, fold_of, &fit.fold_breads, &fit.bread)?,
        None => small_sample_correct(&CorrectionInputs { units, bread: &fit.bread })?,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantile {
    Normal,
    StudentT { df: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CiSpec {
    pub level: f64,
    pub quantile: Quantile,
}

impl CiSpec {
    /// t with `n - q` degrees of freedom below [`SMALL_SAMPLE_N`] units, normal otherwise.
    pub fn default_for(level: f64, n: usize, q: usize) -> Self {
        let quantile = if n < SMALL_SAMPLE_N && n > q { Quantile::StudentT { df: (n - q) as f64 } } else { Quantile::Normal };
        CiSpec { level, quantile }
    }

    pub fn critical_value(&self) -> Result<f64> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidArgument(format!("confidence level must lie in (0, 1), got {}", self.level)));
        }
        let u = 0.5 + self.level / 2.0;
        Ok(match self.quantile {
            Quantile::Normal => Normal::standard().inverse_cdf(u),
            Quantile::StudentT { df } => StudentsT::new(0.0, 1.0, df)
                .map_err(|e| Error::InvalidArgument(format!("bad t distribution: {e}")))?
                .inverse_cdf(u),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

/// `beta_j +/- c sqrt(cov_jj)` per coordinate.
pub fn confidence_interval(beta: &[f64], cov: &Matrix, spec: &CiSpec) -> Result<Vec<Interval>> {
    if cov.nrows() != beta.len() || cov.ncols() != beta.len() {
        return Err(Error::InvalidArgument("covariance shape does not match beta".into()));
    }
    let c = spec.critical_value()?;
    beta.iter()
        .enumerate()
        .map(|(j, b)| {
            let v = cov[(j, j)];
            if !(v >= 0.0) {
                return Err(Error::InvalidArgument(format!("covariance diagonal {j} is {v}")));
            }
            let half = c * v.sqrt();
            Ok(Interval { lower: b - half, upper: b + half })
        })
        .collect()
}
