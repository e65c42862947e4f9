//! Load a long-format panel CSV and compare estimators on it.
//! Without an argument a demo file is generated first.
//!
//!     cargo run --release --example estimate_from_csv -- [panel.csv] [identity|log]

use excursionlab::cee::LinkKind;
use excursionlab::dweights::DWeightMode;
use excursionlab::estimators::{estimate, EstimateOptions, MethodSpec};
use excursionlab::io::{load_panel_csv, write_panel_csv};
use excursionlab::nuisance::{NuisanceSpec, RegressorKind};
use excursionlab::panel::ModeratorFormula;
use excursionlab::simgen::{ContinuousConfig, Form, GeneratorConfig};

fn main() -> excursionlab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let path = match args.get(1) {
        Some(p) => p.into(),
        None => {
            let p = std::env::temp_dir().join("excursionlab_demo.csv");
            let cfg = GeneratorConfig::Continuous(ContinuousConfig { lambda1: 2.0, lambda2: 1.0, seed: 9, ..ContinuousConfig::new(150, Form::SimpleNonlinear) });
            write_panel_csv(&cfg.generate()?.0, &p)?;
            p
        }
    };
    let link = args.get(2).map(|s| LinkKind::parse(s)).transpose()?.unwrap_or(LinkKind::Identity);
    let panel = load_panel_csv(&path)?;
    println!("{}: n={} T={} history={:?}", path.display(), panel.n(), panel.horizon(), panel.meta().history_names);

    // marginal effect, then moderation by the scaled decision index
    for formula in ["1", "1,t/T"] {
        let panel = panel.with_moderators(&ModeratorFormula::parse(formula)?)?;
        let baseline = match link {
            LinkKind::Identity => MethodSpec::Wcls { control: vec![] },
            LinkKind::Log => MethodSpec::Emee { control: vec![] },
        };
        let methods = [
            baseline,
            MethodSpec::TwoStage { nuisance: NuisanceSpec::new(RegressorKind::spline_default()).pooled(true), dmode: DWeightMode::default_for(link) },
            MethodSpec::TwoStageCf { nuisance: NuisanceSpec::new(RegressorKind::forest_default(1)).pooled(true), dmode: DWeightMode::default_for(link), folds: 5, seed: 1 },
        ];
        println!("\nf_t = ({formula})");
        for m in methods {
            let rep = estimate(&panel, &m, &EstimateOptions::new(link))?;
            let coefs: Vec<String> = rep.beta.iter().zip(rep.se_used()).map(|(b, s)| format!("{b:.4} ({s:.4})")).collect();
            println!("  {:<13} {}", m.name(), coefs.join("  "));
        }
    }
    Ok(())
}
