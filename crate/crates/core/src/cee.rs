//! Causal excursion effect algebra for the identity and log links.
//!
//! With a linear effect model `gamma_t = f_t' beta`, the estimating-function
//! atom at one decision point is
//!
//! ```text
//! phi_t = W_t I_t r_t f_t,      W_t = (A_t - p_t) / (p_t (1 - p_t))
//! identity: r_t = Y - (A + p - 1) f'b - (1 - p) mu1 - p mu0
//! log:      r_t = exp(-A f'b) Y - (1 - p) exp(-f'b) mu1 - p mu0
//! ```
//!
//! [`PhiAtom`] keeps the factorization `value = dvec * resid` so the small-sample
//! correction can work with per-time residuals directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::panel::DecisionPoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkKind {
    Identity,
    Log,
}

impl LinkKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "id" => Ok(LinkKind::Identity),
            "log" => Ok(LinkKind::Log),
            other => Err(Error::InvalidArgument(format!("unknown link `{other}`"))),
        }
    }
}

impl std::fmt::Display for LinkKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LinkKind::Identity => "identity",
            LinkKind::Log => "log",
        })
    }
}

/// Link, parameter dimension and (for the baselines) the numerator probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CeeSpec {
    pub link: LinkKind,
    pub p: usize,
    pub tilde_prob: Option<f64>,
}

impl CeeSpec {
    pub fn new(link: LinkKind, p: usize, tilde_prob: Option<f64>) -> Result<Self> {
        if p == 0 {
            return Err(Error::InvalidArgument("CEE dimension p must be >= 1".into()));
        }
        if let Some(pt) = tilde_prob {
            if !(pt > 0.0 && pt < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "numerator probability must lie in (0, 1), got {pt}"
                )));
            }
        }
        Ok(CeeSpec { link, p, tilde_prob })
    }
}

/// One decision point's contribution `phi_t(beta, mu)` and its pieces.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiAtom {
    pub value: Vector,
    /// `d phi_t / d beta'`.
    pub jac: Matrix,
    /// Braced residual term `r_t` (zero when unavailable).
    pub resid: f64,
    /// `d r_t / d gamma_t`; `d r_t / d beta' = dresid * f_t'`.
    pub dresid: f64,
    /// `W_t I_t f_t`, so that `value = dvec * resid`.
    pub dvec: Vector,
}

impl PhiAtom {
    fn zero(p: usize) -> Self {
        PhiAtom {
            value: Vector::zeros(p),
            jac: Matrix::zeros(p, p),
            resid: 0.0,
            dresid: 0.0,
            dvec: Vector::zeros(p),
        }
    }
}

fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("non-finite input to {what}")))
    }
}

/// `U_t`: the outcome with the immediate effect of `A_t` removed.
pub fn exposure_free_outcome(link: LinkKind, y: f64, a: bool, gamma: f64) -> Result<f64> {
    ensure_finite(&[y, gamma], "exposure_free_outcome")?;
    let a = if a { 1.0 } else { 0.0 };
    match link {
        LinkKind::Identity => Ok(y - a * gamma),
        LinkKind::Log => {
            if y < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "log link requires a nonnegative outcome, got {y}"
                )));
            }
            Ok(y * (-a * gamma).exp())
        }
    }
}

fn linear_predictor(f: &[f64], beta: &[f64]) -> Result<f64> {
    if f.len() != beta.len() {
        return Err(Error::InvalidArgument(format!(
            "moderator row has length {}, beta has length {}",
            f.len(),
            beta.len()
        )));
    }
    Ok(f.iter().zip(beta).map(|(a, b)| a * b).sum())
}

/// `phi_t(beta, mu)` with its analytic Jacobian and residual factorization.
pub fn phi_atom(link: LinkKind, point: &DecisionPoint, mu1: f64, mu0: f64, beta: &[f64]) -> Result<PhiAtom> {
    let p = beta.len();
    if !point.avail {
        if point.moderator.len() != p {
            return Err(Error::InvalidArgument("moderator/beta length mismatch".into()));
        }
        return Ok(PhiAtom::zero(p));
    }
    let prob = point.prob;
    if !(prob > 0.0 && prob < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "randomization probability must lie in (0, 1) at available points, got {prob}"
        )));
    }
    ensure_finite(&[mu1, mu0, point.outcome], "phi_atom")?;
    ensure_finite(beta, "phi_atom")?;
    let f = &point.moderator;
    let gamma = linear_predictor(f, beta)?;
    let a = point.a();
    let y = point.outcome;
    let w = (a - prob) / (prob * (1.0 - prob));

    let (resid, dresid) = match link {
        LinkKind::Identity => (
            y - (a + prob - 1.0) * gamma - (1.0 - prob) * mu1 - prob * mu0,
            -(a + prob - 1.0),
        ),
        LinkKind::Log => {
            let u = y * (-a * gamma).exp();
            let e1 = (1.0 - prob) * (-gamma).exp() * mu1;
            (u - e1 - prob * mu0, -a * u + e1)
        }
    };

    let fv = Vector::from_column_slice(f);
    let dvec = &fv * w;
    let value = &dvec * resid;
    let jac = &dvec * (fv.transpose() * dresid);
    Ok(PhiAtom { value, jac, resid, dresid, dvec })
}

/// `d phi_t / d beta'`; shares the arithmetic of [`phi_atom`].
pub fn phi_jacobian(link: LinkKind, point: &DecisionPoint, mu1: f64, beta: &[f64]) -> Result<Matrix> {
    // mu0 enters phi additively and drops out of the derivative.
    Ok(phi_atom(link, point, mu1, 0.0, beta)?.jac)
}

/// Stabilized inverse probability weight `W_t` of the baseline estimators.
pub fn stabilized_weight(a: bool, prob: f64, tilde_prob: f64) -> f64 {
    if a {
        tilde_prob / prob
    } else {
        (1.0 - tilde_prob) / (1.0 - prob)
    }
}

/// Summand of the WCLS/EMEE estimating equation for the stacked `(alpha, beta)`.
///
/// `value = weight * resid * design` and `jac = weight * design * dresid'`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedAtom {
    /// `I_t W_t`.
    pub weight: f64,
    /// `(b_t, (A_t - p~) f_t)`.
    pub design: Vector,
    pub resid: f64,
    /// `d resid / d (alpha, beta)'`.
    pub dresid: Vector,
}

impl StackedAtom {
    pub fn value(&self) -> Vector {
        &self.design * (self.weight * self.resid)
    }

    pub fn jac(&self) -> Matrix {
        &self.design * self.dresid.transpose() * self.weight
    }
}

fn stacked_parts(
    point: &DecisionPoint,
    spec: &CeeSpec,
    alpha: &[f64],
    beta: &[f64],
    b_t: &[f64],
) -> Result<(f64, f64, Vector, f64, f64)> {
    let tilde = spec
        .tilde_prob
        .ok_or_else(|| Error::InvalidArgument("baseline estimators need a numerator probability".into()))?;
    if alpha.len() != b_t.len() {
        return Err(Error::InvalidArgument("alpha and b_t lengths differ".into()));
    }
    let gamma = linear_predictor(&point.moderator, beta)?;
    let control: f64 = alpha.iter().zip(b_t).map(|(a, b)| a * b).sum();
    let a = point.a();
    let centered = a - tilde;
    let mut design = Vector::zeros(b_t.len() + beta.len());
    for (k, v) in b_t.iter().enumerate() {
        design[k] = *v;
    }
    for (k, v) in point.moderator.iter().enumerate() {
        design[b_t.len() + k] = centered * v;
    }
    let weight = if point.avail {
        let prob = point.prob;
        if !(prob > 0.0 && prob < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "randomization probability must lie in (0, 1) at available points, got {prob}"
            )));
        }
        stabilized_weight(point.treat, prob, tilde)
    } else {
        0.0
    };
    Ok((weight, gamma, design, control, centered))
}

/// WCLS summand: `I W [Y - b'alpha - (A - p~) f'beta] (b, (A - p~) f)`.
pub fn wcls_atom(point: &DecisionPoint, spec: &CeeSpec, alpha: &[f64], beta: &[f64], b_t: &[f64]) -> Result<StackedAtom> {
    if spec.link != LinkKind::Identity {
        return Err(Error::IncompatibleLink("WCLS requires the identity link".into()));
    }
    let (weight, gamma, design, control, centered) = stacked_parts(point, spec, alpha, beta, b_t)?;
    let resid = point.outcome - control - centered * gamma;
    let dresid = -design.clone();
    Ok(StackedAtom { weight, design, resid, dresid })
}

/// EMEE summand: `I W {exp(-A f'beta) Y - exp(b'alpha)} (b, (A - p~) f)`.
pub fn emee_atom(point: &DecisionPoint, spec: &CeeSpec, alpha: &[f64], beta: &[f64], b_t: &[f64]) -> Result<StackedAtom> {
    if spec.link != LinkKind::Log {
        return Err(Error::IncompatibleLink("EMEE requires the log link".into()));
    }
    if point.outcome < 0.0 {
        return Err(Error::InvalidArgument("EMEE requires nonnegative outcomes".into()));
    }
    let (weight, gamma, design, control, _) = stacked_parts(point, spec, alpha, beta, b_t)?;
    let a = point.a();
    let u = (-a * gamma).exp() * point.outcome;
    let base = control.exp();
    let resid = u - base;
    let q = b_t.len();
    let mut dresid = Vector::zeros(design.len());
    for k in 0..q {
        dresid[k] = -base * b_t[k];
    }
    for (k, v) in point.moderator.iter().enumerate() {
        dresid[q + k] = -a * u * v;
    }
    Ok(StackedAtom { weight, design, resid, dresid })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(avail: bool, treat: bool, prob: f64, y: f64, f: Vec<f64>) -> DecisionPoint {
        DecisionPoint { avail, prob, treat, outcome: y, history: vec![], moderator: f }
    }

    #[test]
    fn exposure_free_outcome_examples() {
        assert_eq!(exposure_free_outcome(LinkKind::Identity, 2.0, true, 0.5).unwrap(), 1.5);
        let v = exposure_free_outcome(LinkKind::Log, 3.0, true, 2f64.ln()).unwrap();
        assert!((v - 1.5).abs() < 1e-15);
        for link in [LinkKind::Identity, LinkKind::Log] {
            assert_eq!(exposure_free_outcome(link, 7.0, false, 123.4).unwrap(), 7.0);
        }
        assert!(exposure_free_outcome(LinkKind::Identity, f64::NAN, true, 0.0).is_err());
    }

    #[test]
    fn phi_atom_examples() {
        let off = pt(false, false, 0.5, 3.0, vec![1.0]);
        let atom = phi_atom(LinkKind::Identity, &off, 1.0, 2.0, &[0.4]).unwrap();
        assert_eq!(atom.value[0], 0.0);
        assert_eq!(atom.jac[(0, 0)], 0.0);
        assert_eq!(atom.dvec[0], 0.0);

        let treated = pt(true, true, 0.5, 1.0, vec![1.0]);
        let atom = phi_atom(LinkKind::Identity, &treated, 0.0, 0.0, &[0.0]).unwrap();
        assert_eq!(atom.value[0], 2.0);

        let control = pt(true, false, 0.5, 1.0, vec![1.0]);
        let atom = phi_atom(LinkKind::Log, &control, 0.0, 0.0, &[0.3]).unwrap();
        assert_eq!(atom.value[0], -2.0);
    }

    #[test]
    fn phi_jacobian_examples() {
        let off = pt(false, false, 0.5, 3.0, vec![1.0]);
        assert_eq!(phi_jacobian(LinkKind::Log, &off, 1.0, &[0.2]).unwrap()[(0, 0)], 0.0);
        let treated = pt(true, true, 0.5, 4.0, vec![1.0]);
        assert_eq!(phi_jacobian(LinkKind::Identity, &treated, 9.0, &[0.7]).unwrap()[(0, 0)], -1.0);
    }

    #[test]
    fn rejects_degenerate_probability() {
        let bad = pt(true, true, 1.0, 1.0, vec![1.0]);
        assert!(phi_atom(LinkKind::Identity, &bad, 0.0, 0.0, &[0.0]).is_err());
    }

    #[test]
    fn wcls_weights() {
        let spec = CeeSpec::new(LinkKind::Identity, 1, Some(0.5)).unwrap();
        let a = wcls_atom(&pt(true, true, 0.5, 1.0, vec![1.0]), &spec, &[0.0], &[0.0], &[1.0]).unwrap();
        assert_eq!(a.weight, 1.0);
        let z = wcls_atom(&pt(false, false, 0.5, 1.0, vec![1.0]), &spec, &[0.0], &[0.0], &[1.0]).unwrap();
        assert_eq!(z.value(), Vector::zeros(2));
        let spec = CeeSpec::new(LinkKind::Identity, 1, Some(0.4)).unwrap();
        let w = wcls_atom(&pt(true, false, 0.6, 1.0, vec![1.0]), &spec, &[0.0], &[0.0], &[1.0]).unwrap();
        assert!((w.weight - 1.5).abs() < 1e-15);
    }

    #[test]
    fn emee_residuals() {
        let spec = CeeSpec::new(LinkKind::Log, 1, Some(0.5)).unwrap();
        let y = 2.5_f64;
        let at_base = emee_atom(&pt(true, false, 0.5, y, vec![1.0]), &spec, &[y.ln()], &[0.0], &[1.0]).unwrap();
        assert!(at_base.resid.abs() < 1e-15);
        let off = emee_atom(&pt(false, false, 0.5, y, vec![1.0]), &spec, &[0.0], &[0.0], &[1.0]).unwrap();
        assert_eq!(off.value(), Vector::zeros(2));
        let treated = emee_atom(&pt(true, true, 0.5, 2.0, vec![1.0]), &spec, &[0.0], &[2f64.ln()], &[1.0]).unwrap();
        assert!(treated.resid.abs() < 1e-15);
        assert!(emee_atom(&pt(true, true, 0.5, 2.0, vec![1.0]), &CeeSpec::new(LinkKind::Identity, 1, Some(0.5)).unwrap(), &[0.0], &[0.0], &[1.0]).is_err());
    }
}
