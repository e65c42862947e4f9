//! The two-stage estimating function stays unbiased however badly the outcome
//! regression is specified: a Monte Carlo check at the true effect, then the
//! estimator itself with the nuisance frozen at zero.
//!
//!     cargo run --release --example robustness_check

use excursionlab::cee::{phi_atom, LinkKind};
use excursionlab::dweights::DWeightMode;
use excursionlab::estimators::{estimate, EstimateOptions, MethodSpec};
use excursionlab::linalg::Vector;
use excursionlab::nuisance::{NuisanceSpec, RegressorKind};
use excursionlab::panel::Trajectory;
use excursionlab::simgen::{CountConfig, Form, GeneratorConfig};
use excursionlab::zestim::check_global_robustness;

fn main() -> excursionlab::Result<()> {
    let cfg = GeneratorConfig::Count(CountConfig { lambda: 1.0, seed: 2, ..CountConfig::new(50_000, Form::Periodic) });
    let (panel, truth) = cfg.generate()?;
    let sampler = |i: usize| panel.trajectory(i).clone();
    let score = |traj: &Trajectory, beta: &[f64], mu: &(f64, f64)| {
        let mut m = Vector::zeros(1);
        for pt in &traj.points {
            m += phi_atom(LinkKind::Log, pt, mu.0, mu.1, beta)?.value;
        }
        Ok(m)
    };
    let guesses: Vec<(String, (f64, f64))> = [(0.0, 0.0), (1.0, 1.0), (10.0, 0.5), (0.1, 30.0)].iter().map(|&g| (format!("mu1={} mu0={}", g.0, g.1), g)).collect();
    let report = check_global_robustness(sampler, score, &truth.beta_star(), &guesses, panel.n())?;
    for e in &report.entries {
        println!("{:<20} mean score {:+.4} (se {:.4}) {}", e.label, e.mean[0], e.se[0], if e.flagged { "BIASED" } else { "ok" });
    }

    let mut estimates = Vec::new();
    for r in 0..200 {
        let (panel, _) = cfg.clone().with_n(100).with_seed(100 + r).generate()?;
        let method = MethodSpec::TwoStage { nuisance: NuisanceSpec::new(RegressorKind::Constant { value: 3.0 }), dmode: DWeightMode::Unit };
        estimates.push(estimate(&panel, &method, &EstimateOptions::new(LinkKind::Log))?.beta[0]);
    }
    let mean = estimates.iter().sum::<f64>() / estimates.len() as f64;
    let sd = (estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (estimates.len() - 1) as f64).sqrt();
    println!("\nfrozen mu = 3: mean estimate {mean:.4} (MC se {:.4}), truth {:.4}", sd / (estimates.len() as f64).sqrt(), truth.beta_star()[0]);
    Ok(())
}
