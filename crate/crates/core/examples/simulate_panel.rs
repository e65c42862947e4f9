//! Draw one trial from each outcome generator, write it as panel CSV and
//! print the true marginal effect.
//!
//!     cargo run --release --example simulate_panel -- [out_dir]

use excursionlab::io::write_panel_csv;
use excursionlab::simgen::{BinaryConfig, ContinuousConfig, CountConfig, Form, GeneratorConfig};

fn main() -> excursionlab::Result<()> {
    let dir = std::env::args().nth(1).map(std::path::PathBuf::from).unwrap_or_else(std::env::temp_dir);
    std::fs::create_dir_all(&dir)?;
    let configs = [
        ("continuous", GeneratorConfig::Continuous(ContinuousConfig { lambda1: 2.0, lambda2: 1.0, seed: 1, ..ContinuousConfig::new(100, Form::Periodic) })),
        ("binary", GeneratorConfig::Binary(BinaryConfig { lambda: 0.5, seed: 1, ..BinaryConfig::new(100, Form::SimpleNonlinear) })),
        ("count", GeneratorConfig::Count(CountConfig { lambda: 1.0, seed: 1, ..CountConfig::new(100, Form::Step) })),
    ];
    for (name, cfg) in configs {
        let (panel, truth) = cfg.generate()?;
        let path = dir.join(format!("{name}.csv"));
        write_panel_csv(&panel, &path)?;
        let treated: f64 = panel.trajectories().iter().flat_map(|t| &t.points).map(|p| p.a()).sum();
        let mean_y: f64 = panel.trajectories().iter().flat_map(|t| &t.points).map(|p| p.outcome).sum::<f64>() / (panel.n() * panel.horizon()) as f64;
        println!(
            "{name:<10} n={} T={} treated={:.0}% mean outcome={mean_y:.3} true effect={:.4} -> {}",
            panel.n(),
            panel.horizon(),
            100.0 * treated / (panel.n() * panel.horizon()) as f64,
            truth.beta_star()[0],
            path.display()
        );
    }
    Ok(())
}
