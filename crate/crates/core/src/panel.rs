//! Micro-randomized trial panel: `n` trajectories of `T` decision points each.
//!
//! A [`Panel`] is immutable once built. Structural problems (ragged `T`,
//! non-finite numbers, history rows that do not match the column names) are
//! rejected by [`Panel::new`]; design constraints that depend on the analysis
//! (availability gating, positivity, nonnegative outcomes under the log link)
//! are reported by [`validate_panel`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cee::LinkKind;
use crate::error::{Error, Result};

/// Default positivity bound: available points need `tau <= prob <= 1 - tau`.
pub const DEFAULT_TAU: f64 = 0.01;

/// One decision point `t` of one participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionPoint {
    /// Availability indicator `I_t`.
    pub avail: bool,
    /// Randomization probability `p_t = P(A_t = 1 | H_t)`.
    pub prob: f64,
    /// Treatment `A_t`.
    pub treat: bool,
    /// Proximal outcome `Y_{t+1}`.
    pub outcome: f64,
    /// Features extracted from the history `H_t`, used only for nuisance fitting.
    pub history: Vec<f64>,
    /// Evaluated CEE design row `f_t(S_t)`.
    pub moderator: Vec<f64>,
}

impl DecisionPoint {
    pub fn a(&self) -> f64 {
        if self.treat {
            1.0
        } else {
            0.0
        }
    }

    pub fn i(&self) -> f64 {
        if self.avail {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<DecisionPoint>,
}

impl Trajectory {
    pub fn new(points: Vec<DecisionPoint>) -> Self {
        Trajectory { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Column names for the history and moderator features.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PanelMeta {
    pub history_names: Vec<String>,
    pub moderator_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    trajectories: Vec<Trajectory>,
    meta: PanelMeta,
}

impl Panel {
    pub fn new(trajectories: Vec<Trajectory>, meta: PanelMeta) -> Result<Self> {
        if trajectories.len() < 2 {
            return Err(Error::Structure(format!(
                "a panel needs at least 2 trajectories, got {}",
                trajectories.len()
            )));
        }
        let horizon = trajectories[0].len();
        if horizon == 0 {
            return Err(Error::Structure("trajectories must have T >= 1".into()));
        }
        let n_hist = meta.history_names.len();
        for (i, traj) in trajectories.iter().enumerate() {
            if traj.len() != horizon {
                return Err(Error::Structure(format!(
                    "trajectory {i} has {} decision points, expected T = {horizon}",
                    traj.len()
                )));
            }
            for (t0, pt) in traj.points.iter().enumerate() {
                let finite = pt.prob.is_finite()
                    && pt.outcome.is_finite()
                    && pt.history.iter().all(|v| v.is_finite())
                    && pt.moderator.iter().all(|v| v.is_finite());
                if !finite {
                    return Err(Error::Structure(format!(
                        "non-finite value in trajectory {i} at t = {}",
                        t0 + 1
                    )));
                }
                if pt.history.len() != n_hist {
                    return Err(Error::Structure(format!(
                        "trajectory {i} at t = {} has {} history features, expected {n_hist}",
                        t0 + 1,
                        pt.history.len()
                    )));
                }
            }
        }
        Ok(Panel { trajectories, meta })
    }

    /// Number of participants.
    pub fn n(&self) -> usize {
        self.trajectories.len()
    }

    /// Number of decision points per participant.
    pub fn horizon(&self) -> usize {
        self.trajectories[0].len()
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn trajectory(&self, i: usize) -> &Trajectory {
        &self.trajectories[i]
    }

    /// Decision point of trajectory `i` at zero-based time index `t0`.
    pub fn point(&self, i: usize, t0: usize) -> &DecisionPoint {
        &self.trajectories[i].points[t0]
    }

    pub fn meta(&self) -> &PanelMeta {
        &self.meta
    }

    pub fn history_index(&self, name: &str) -> Option<usize> {
        self.meta.history_names.iter().position(|n| n == name)
    }

    /// Resolve history column names to indices.
    pub fn history_indices(&self, names: &[String]) -> Result<Vec<usize>> {
        names
            .iter()
            .map(|name| {
                self.history_index(name).ok_or_else(|| {
                    Error::InvalidArgument(format!("unknown history column `{name}`"))
                })
            })
            .collect()
    }

    /// Copy of the panel keeping only the listed trajectories, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Panel> {
        let trajectories = indices
            .iter()
            .map(|&i| {
                self.trajectories
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::InvalidArgument(format!("trajectory index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Panel::new(trajectories, self.meta.clone())
    }

    /// Replace every moderator row with `formula` evaluated at that point.
    pub fn with_moderators(&self, formula: &ModeratorFormula) -> Result<Panel> {
        let horizon = self.horizon();
        let columns = formula.resolve(self)?;
        let mut trajectories = self.trajectories.clone();
        for traj in &mut trajectories {
            for (t0, pt) in traj.points.iter_mut().enumerate() {
                pt.moderator = columns
                    .iter()
                    .map(|term| term.eval(t0 + 1, horizon, &pt.history))
                    .collect();
            }
        }
        let meta = PanelMeta {
            history_names: self.meta.history_names.clone(),
            moderator_names: formula.terms.clone(),
        };
        Panel::new(trajectories, meta)
    }
}

/// Which design constraint a decision point violates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rule {
    TreatedWhileUnavailable,
    ProbabilityOutOfRange,
    NegativeOutcomeUnderLogLink,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rule::TreatedWhileUnavailable => "treated-while-unavailable",
            Rule::ProbabilityOutOfRange => "probability-out-of-range",
            Rule::NegativeOutcomeUnderLogLink => "negative-outcome-under-log-link",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub trajectory: usize,
    /// One-based decision point.
    pub t: usize,
    pub rule: Rule,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_pass(&self) -> bool {
        self.violations.is_empty()
    }

    /// Turn a failing report into an error listing the first few violations.
    pub fn into_result(self) -> Result<()> {
        if self.is_pass() {
            return Ok(());
        }
        let head: Vec<String> = self
            .violations
            .iter()
            .take(5)
            .map(|v| format!("{} (trajectory {}, t = {})", v.rule, v.trajectory, v.t))
            .collect();
        Err(Error::Structure(format!(
            "{} design violation(s): {}",
            self.violations.len(),
            head.join("; ")
        )))
    }
}

pub fn validate_panel(panel: &Panel, link: LinkKind, tau: f64) -> ValidationReport {
    let mut violations = Vec::new();
    for (i, traj) in panel.trajectories().iter().enumerate() {
        for (t0, pt) in traj.points.iter().enumerate() {
            let t = t0 + 1;
            if !pt.avail && pt.treat {
                violations.push(Violation { trajectory: i, t, rule: Rule::TreatedWhileUnavailable });
            }
            if pt.avail && !(pt.prob >= tau && pt.prob <= 1.0 - tau) {
                violations.push(Violation { trajectory: i, t, rule: Rule::ProbabilityOutOfRange });
            }
            if link == LinkKind::Log && pt.outcome < 0.0 {
                violations.push(Violation {
                    trajectory: i,
                    t,
                    rule: Rule::NegativeOutcomeUnderLogLink,
                });
            }
        }
    }
    ValidationReport { violations }
}

/// Common length `p` of every moderator row.
pub fn moderator_dim(panel: &Panel) -> Result<usize> {
    let p = panel.point(0, 0).moderator.len();
    for (i, traj) in panel.trajectories().iter().enumerate() {
        for (t0, pt) in traj.points.iter().enumerate() {
            if pt.moderator.len() != p {
                return Err(Error::Structure(format!(
                    "moderator row at trajectory {i}, t = {} has length {}, expected {p}",
                    t0 + 1,
                    pt.moderator.len()
                )));
            }
        }
    }
    if p == 0 {
        return Err(Error::Structure("moderator rows are empty".into()));
    }
    Ok(p)
}

/// Comma-separated CEE design such as `"1"`, `"1,t"` or `"1,t/T,z"`.
///
/// Terms: `1` (intercept), `t` (decision index), `t/T` (scaled index), or the
/// name of a history column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeratorFormula {
    pub terms: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
enum Term {
    One,
    Time,
    ScaledTime,
    History(usize),
}

impl Term {
    fn eval(self, t: usize, horizon: usize, history: &[f64]) -> f64 {
        match self {
            Term::One => 1.0,
            Term::Time => t as f64,
            Term::ScaledTime => t as f64 / horizon as f64,
            Term::History(j) => history[j],
        }
    }
}

impl ModeratorFormula {
    pub fn parse(spec: &str) -> Result<Self> {
        let terms: Vec<String> = spec
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if terms.is_empty() {
            return Err(Error::InvalidArgument("empty moderator formula".into()));
        }
        Ok(ModeratorFormula { terms })
    }

    pub fn marginal() -> Self {
        ModeratorFormula { terms: vec!["1".into()] }
    }

    fn resolve(&self, panel: &Panel) -> Result<Vec<Term>> {
        self.terms
            .iter()
            .map(|term| match term.as_str() {
                "1" => Ok(Term::One),
                "t" => Ok(Term::Time),
                "t/T" => Ok(Term::ScaledTime),
                name => panel
                    .history_index(name)
                    .map(Term::History)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown moderator term `{name}`"))),
            })
            .collect()
    }
}
