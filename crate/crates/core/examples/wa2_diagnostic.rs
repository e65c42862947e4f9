//! Cross-time correlation of the estimating function. Near-zero off-diagonal
//! entries indicate that per-decision-point weighting is close to optimal.
//!
//!     cargo run --release --example wa2_diagnostic

use excursionlab::cee::LinkKind;
use excursionlab::estimators::diagnose_wa2;
use excursionlab::nuisance::{fit_nuisance, NuisanceSpec, RegressorKind};
use excursionlab::simgen::{ContinuousConfig, Form, GeneratorConfig};

fn main() -> excursionlab::Result<()> {
    for (rho, n) in [(0.0, 100), (0.0, 1000), (0.8, 1000)] {
        let cfg = GeneratorConfig::Continuous(ContinuousConfig { rho, horizon: 5, seed: 3, ..ContinuousConfig::new(n, Form::Linear) });
        let (panel, truth) = cfg.generate()?;
        let all: Vec<usize> = (0..n).collect();
        let fit = fit_nuisance(&panel, &NuisanceSpec::new(RegressorKind::LinearLs { ridge: 1e-8 }).pooled(true), &all)?;
        let g = diagnose_wa2(&panel, &truth.beta_star(), &fit, LinkKind::Identity)?;
        let off = (0..5).flat_map(|t| (0..5).filter(move |&u| u != t).map(move |u| (t, u))).map(|(t, u)| g[(t, u)]).fold(0.0, f64::max);
        println!("rho={rho} n={n}: max off-diagonal {off:.3}");
        for t in 0..5 {
            let row: Vec<String> = (0..5).map(|u| format!("{:.2}", g[(t, u)])).collect();
            println!("  {}", row.join(" "));
        }
    }
    Ok(())
}
