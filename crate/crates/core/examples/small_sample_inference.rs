//! Coverage of 95% intervals at small n with and without the leverage
//! correction of the sandwich.
//!
//!     cargo run --release --example small_sample_inference -- [replicates]

use excursionlab::bench::{run_study, MethodEntry, StudyConfig, SweepAxis};
use excursionlab::dweights::DWeightMode;
use excursionlab::estimators::MethodSpec;
use excursionlab::nuisance::{NuisanceSpec, RegressorKind};
use excursionlab::simgen::{BinaryConfig, Form, GeneratorConfig};

fn main() -> excursionlab::Result<()> {
    let replicates = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let generator = GeneratorConfig::Binary(BinaryConfig { lambda: 0.5, ..BinaryConfig::new(30, Form::Periodic) });
    let methods = vec![
        MethodEntry::new("emee", MethodSpec::Emee { control: vec![] }),
        MethodEntry::new("two_stage", MethodSpec::TwoStage { nuisance: NuisanceSpec::new(RegressorKind::LinearLs { ridge: 1e-8 }).pooled(true), dmode: DWeightMode::AnalyticScalar }),
    ];
    for ssc in [false, true] {
        let cfg = StudyConfig {
            ssc,
            sweep: vec![SweepAxis { param: "n".into(), values: vec![25.0, 50.0, 100.0] }],
            ..StudyConfig::new(generator.clone(), methods.clone(), replicates)
        };
        let res = run_study(&cfg)?;
        println!("small-sample correction {}", if ssc { "on" } else { "off" });
        for m in &res.metrics {
            println!("  {:<8} {:<10} coverage {:.3}  mean se {:.4}  sd {:.4}", m.params, m.method, m.coverage, m.mean_se, m.emp_sd);
        }
    }
    Ok(())
}
