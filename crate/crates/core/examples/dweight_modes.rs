//! The four d-weight constructions on one log-link panel, and what they do to
//! the standard error.
//!
//!     cargo run --release --example dweight_modes

use excursionlab::cee::LinkKind;
use excursionlab::dweights::{fit_dweights, DWeightMode};
use excursionlab::estimators::{estimate, EstimateOptions, MethodSpec};
use excursionlab::nuisance::{fit_nuisance, NuisanceSpec, RegressorKind};
use excursionlab::simgen::{BinaryConfig, Form, GeneratorConfig};

fn main() -> excursionlab::Result<()> {
    let cfg = GeneratorConfig::Binary(BinaryConfig { lambda: 0.8, seed: 4, ..BinaryConfig::new(400, Form::SimpleNonlinear) });
    let (panel, _) = cfg.generate()?;
    let nuisance = NuisanceSpec::new(RegressorKind::spline_default()).pooled(true);
    let all: Vec<usize> = (0..panel.n()).collect();
    let fit = fit_nuisance(&panel, &nuisance, &all)?;
    let modes = [DWeightMode::Unit, DWeightMode::PerTimeEmpirical, DWeightMode::PooledSmoother { knots: 5 }, DWeightMode::AnalyticScalar];
    for mode in modes {
        let d = fit_dweights(&panel, &all, &fit, &[0.2], LinkKind::Log, mode)?;
        let per_t: Vec<String> = (1..=panel.horizon()).map(|t| d.eval(t, &[1.0]).map(|m| format!("{:.3}", m[(0, 0)]))).collect::<Result<_, _>>()?;
        let rep = estimate(&panel, &MethodSpec::TwoStage { nuisance: nuisance.clone(), dmode: mode }, &EstimateOptions::new(LinkKind::Log))?;
        println!("{mode:?}\n  d_t: {}\n  beta {:.4}  se {:.4}", per_t.join(" "), rep.beta[0], rep.se[0]);
    }
    Ok(())
}
