//! Monte Carlo relative efficiency of the two-stage estimator against WCLS
//! under nonstationary error variance.
//!
//!     cargo run --release --example efficiency_study -- [replicates] [lambda2]

use excursionlab::bench::{run_study, MethodEntry, StudyConfig};
use excursionlab::dweights::DWeightMode;
use excursionlab::estimators::MethodSpec;
use excursionlab::nuisance::{NuisanceSpec, RegressorKind};
use excursionlab::simgen::{ContinuousConfig, Form, GeneratorConfig};

fn main() -> excursionlab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let replicates = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let lambda2 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3.0);

    let generator = GeneratorConfig::Continuous(ContinuousConfig { lambda2, ..ContinuousConfig::new(100, Form::Linear) });
    let methods = vec![
        MethodEntry::new("wcls", MethodSpec::Wcls { control: vec![] }),
        MethodEntry::new(
            "two_stage",
            MethodSpec::TwoStage { nuisance: NuisanceSpec::new(RegressorKind::PerTimeMean), dmode: DWeightMode::PerTimeEmpirical },
        ),
        MethodEntry::new(
            "two_stage_cf",
            MethodSpec::TwoStageCf { nuisance: NuisanceSpec::new(RegressorKind::PerTimeMean), dmode: DWeightMode::PerTimeEmpirical, folds: 5, seed: 0 },
        ),
        MethodEntry::new("oracle", MethodSpec::Oracle { mc_budget: 200_000 }),
    ];
    let config = StudyConfig { base_seed: 1, ..StudyConfig::new(generator, methods, replicates) };

    let start = std::time::Instant::now();
    let result = run_study(&config)?;
    println!("{:<14} {:>9} {:>9} {:>9} {:>9} {:>7} {:>6}", "method", "bias", "emp_sd", "mean_se", "coverage", "RE", "sec");
    for m in &result.metrics {
        println!(
            "{:<14} {:>9.4} {:>9.4} {:>9.4} {:>9.3} {:>7.3} {:>6.3}",
            m.method,
            m.bias,
            m.emp_sd,
            m.mean_se,
            m.coverage,
            m.re.unwrap_or(f64::NAN),
            m.mean_runtime_s
        );
    }
    println!("{} replicates in {:.1}s", replicates, start.elapsed().as_secs_f64());
    Ok(())
}
