//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails. `ACCEPTANCE_ONLY=4,7` restricts the run.

use std::collections::HashMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use excursionlab::bench::{bootstrap_re_interval, relative_efficiency, run_study, sample_variance, MethodEntry, StudyConfig, StudyResult, SweepAxis};
use excursionlab::cee::{emee_atom, phi_atom, phi_jacobian, wcls_atom, CeeSpec, LinkKind};
use excursionlab::dweights::{fit_dweights, DWeightMode};
use excursionlab::estimators::{estimate, EstimateOptions, MethodSpec};
use excursionlab::inference::{small_sample_correct, CorrectionInputs};
use excursionlab::linalg::{inverse, Matrix, Vector};
use excursionlab::nuisance::{fit_nuisance, NuisanceSpec, RegressorKind};
use excursionlab::panel::DecisionPoint;
use excursionlab::simgen::{BinaryConfig, ContinuousConfig, CountConfig, Form, GeneratorConfig};
use excursionlab::zestim::Decomposition;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Forest size used throughout the suite to keep the run within minutes.
const ACCEPTANCE_TREES: usize = 50;

fn forest() -> RegressorKind {
    match RegressorKind::forest_default(17) {
        RegressorKind::Forest { max_depth, min_leaf, subsample, seed, .. } => RegressorKind::Forest { n_trees: ACCEPTANCE_TREES, max_depth, min_leaf, subsample, seed },
        other => other,
    }
}

fn baseline(link: LinkKind) -> MethodEntry {
    match link {
        LinkKind::Identity => MethodEntry::new("wcls", MethodSpec::Wcls { control: vec![] }),
        LinkKind::Log => MethodEntry::new("emee", MethodSpec::Emee { control: vec![] }),
    }
}

fn two_stage(label: &str, kind: RegressorKind, pooled: bool, link: LinkKind) -> MethodEntry {
    MethodEntry::new(label, MethodSpec::TwoStage { nuisance: NuisanceSpec::new(kind).pooled(pooled), dmode: DWeightMode::default_for(link) })
}

fn two_stage_cf(label: &str, kind: RegressorKind, pooled: bool, link: LinkKind) -> MethodEntry {
    MethodEntry::new(label, MethodSpec::TwoStageCf { nuisance: NuisanceSpec::new(kind).pooled(pooled), dmode: DWeightMode::default_for(link), folds: 5, seed: 5 })
}

fn study(generator: GeneratorConfig, methods: Vec<MethodEntry>, replicates: usize, base_seed: u64) -> StudyResult {
    let cfg = StudyConfig { base_seed, ..StudyConfig::new(generator, methods, replicates) };
    run_study(&cfg).unwrap_or_else(|e| panic!("study failed: {e}"))
}

fn generators() -> Vec<(&'static str, GeneratorConfig)> {
    vec![
        ("continuous", GeneratorConfig::Continuous(ContinuousConfig::new(100, Form::Linear))),
        ("binary", GeneratorConfig::Binary(BinaryConfig::new(100, Form::Linear))),
        ("count", GeneratorConfig::Count(CountConfig::new(100, Form::Linear))),
    ]
}

fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).amax() / b.amax().max(1e-12)
}

// ---------------------------------------------------------------------------

fn random_point(rng: &mut ChaCha8Rng, p: usize, log: bool) -> DecisionPoint {
    let mut moderator = vec![1.0];
    moderator.extend((1..p).map(|_| rng.random_range(-1.0..1.0)));
    DecisionPoint {
        avail: true,
        prob: rng.random_range(0.2..0.8),
        treat: rng.random_bool(0.5),
        outcome: if log { rng.random_range(0.0..3.0) } else { rng.random_range(-2.0..2.0) },
        history: vec![],
        moderator,
    }
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut notes = Vec::new();

    // factorization phi = W I f r with independently coded residuals
    let mut fact_err: f64 = 0.0;
    let mut jac_err: f64 = 0.0;
    for k in 0..400 {
        let log = k % 2 == 1;
        let link = if log { LinkKind::Log } else { LinkKind::Identity };
        let pt = random_point(&mut rng, 3, log);
        let beta: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
        let (mu1, mu0) = (rng.random_range(0.2..2.0), rng.random_range(0.2..2.0));
        let atom = phi_atom(link, &pt, mu1, mu0, &beta).unwrap();
        let gamma: f64 = pt.moderator.iter().zip(&beta).map(|(f, b)| f * b).sum();
        let a = if pt.treat { 1.0 } else { 0.0 };
        let w = (a - pt.prob) / (pt.prob * (1.0 - pt.prob));
        let r = if log {
            (-a * gamma).exp() * pt.outcome - (1.0 - pt.prob) * (-gamma).exp() * mu1 - pt.prob * mu0
        } else {
            pt.outcome - (a + pt.prob - 1.0) * gamma - (1.0 - pt.prob) * mu1 - pt.prob * mu0
        };
        for j in 0..3 {
            fact_err = fact_err.max((atom.value[j] - w * pt.moderator[j] * r).abs());
        }
        // central differences of phi
        let h = 1e-6;
        let mut fd = Matrix::zeros(3, 3);
        for j in 0..3 {
            let mut bp = beta.clone();
            let mut bm = beta.clone();
            bp[j] += h;
            bm[j] -= h;
            let col = (phi_atom(link, &pt, mu1, mu0, &bp).unwrap().value - phi_atom(link, &pt, mu1, mu0, &bm).unwrap().value) / (2.0 * h);
            fd.set_column(j, &col);
        }
        let analytic = phi_jacobian(link, &pt, mu1, &beta).unwrap();
        if analytic.amax() > 1e-8 {
            jac_err = jac_err.max(rel_err(&analytic, &fd));
        }
        // baseline stacked atoms
        let spec = CeeSpec::new(link, 3, Some(0.5)).unwrap();
        let alpha = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
        let b_t = [1.0, rng.random_range(0.0..1.0)];
        let atom_at = |th: &[f64]| if log { emee_atom(&pt, &spec, &th[..2], &th[2..], &b_t).unwrap() } else { wcls_atom(&pt, &spec, &th[..2], &th[2..], &b_t).unwrap() };
        let theta: Vec<f64> = alpha.iter().chain(&beta).copied().collect();
        let mut fd = Matrix::zeros(5, 5);
        for j in 0..5 {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[j] += h;
            tm[j] -= h;
            fd.set_column(j, &((atom_at(&tp).value() - atom_at(&tm).value()) / (2.0 * h)));
        }
        let analytic = atom_at(&theta).jac();
        if analytic.amax() > 1e-8 {
            jac_err = jac_err.max(rel_err(&analytic, &fd));
        }
    }
    notes.push(format!("factorization max err {fact_err:.1e}, Jacobian max rel err {jac_err:.1e}"));
    let mut ok = fact_err < 1e-12 && jac_err < 1e-5;

    // scalar vs matrix d-weights at p = 1
    let mut d_err: f64 = 0.0;
    for (_, gen) in generators() {
        let (panel, _) = gen.clone().with_seed(3).generate().unwrap();
        let link = gen.link();
        let all: Vec<usize> = (0..panel.n()).collect();
        let nfit = fit_nuisance(&panel, &NuisanceSpec::new(RegressorKind::LinearLs { ridge: 1e-8 }).pooled(true), &all).unwrap();
        let beta = [0.2];
        let m = fit_dweights(&panel, &all, &nfit, &beta, link, DWeightMode::PerTimeEmpirical).unwrap();
        let s = fit_dweights(&panel, &all, &nfit, &beta, link, DWeightMode::AnalyticScalar).unwrap();
        for t in 1..=panel.horizon() {
            let (a, b) = (m.eval(t, &[1.0]).unwrap()[(0, 0)], s.eval(t, &[1.0]).unwrap()[(0, 0)]);
            d_err = d_err.max((a - b).abs() / a.abs().max(1e-12));
        }
    }
    notes.push(format!("scalar vs matrix d {d_err:.1e}"));
    ok &= d_err <= 1e-10;

    // identity link: Newton converges in one step
    let (panel, _) = GeneratorConfig::Continuous(ContinuousConfig { seed: 4, lambda2: 1.0, ..ContinuousConfig::new(200, Form::Periodic) }).generate().unwrap();
    let mut iters = Vec::new();
    for m in [
        MethodSpec::Wcls { control: vec!["z".into()] },
        MethodSpec::TwoStage { nuisance: NuisanceSpec::new(RegressorKind::spline_default()).pooled(true), dmode: DWeightMode::PerTimeEmpirical },
    ] {
        let rep = estimate(&panel, &m, &EstimateOptions::new(LinkKind::Identity)).unwrap();
        ok &= rep.converged && rep.iterations == 1 && rep.residual <= 1e-10;
        iters.push(rep.iterations);
    }
    notes.push(format!("identity-link Newton iterations {iters:?}"));

    // correlation of the generated continuous errors
    let cfg = ContinuousConfig { seed: 5, lambda2: 0.5, ..ContinuousConfig::new(100_000, Form::Linear) };
    let gen = GeneratorConfig::Continuous(cfg.clone());
    let (panel, _) = gen.generate().unwrap();
    let horizon = panel.horizon();
    let eps: Vec<Vec<f64>> = panel
        .trajectories()
        .iter()
        .map(|tr| tr.points.iter().enumerate().map(|(t0, p)| (p.outcome - gen.mean(t0 + 1, &p.history, p.treat)) / cfg.error_sd(t0 + 1)).collect())
        .collect();
    let n = eps.len() as f64;
    let mut corr_err: f64 = 0.0;
    for t in 0..horizon {
        for u in 0..t {
            let mt = eps.iter().map(|e| e[t]).sum::<f64>() / n;
            let mu = eps.iter().map(|e| e[u]).sum::<f64>() / n;
            let cov = eps.iter().map(|e| (e[t] - mt) * (e[u] - mu)).sum::<f64>() / n;
            let vt = eps.iter().map(|e| (e[t] - mt).powi(2)).sum::<f64>() / n;
            let vu = eps.iter().map(|e| (e[u] - mu).powi(2)).sum::<f64>() / n;
            let target = cfg.rho.powf((t - u) as f64 / 2.0);
            corr_err = corr_err.max((cov / (vt * vu).sqrt() - target).abs());
        }
    }
    notes.push(format!("correlation max err {corr_err:.4}"));
    ok &= corr_err < 0.03;

    // duplicated trajectory: corrected covariance = raw / (1 - 1/n)^2
    let (t, q, n) = (4, 2, 12);
    let d = Matrix::from_fn(t, q, |_, _| rng.random_range(-1.0..1.0));
    let dr = Matrix::from_fn(t, q, |_, _| rng.random_range(-1.0..1.0));
    let r = Vector::from_fn(t, |_, _| rng.random_range(-1.0..1.0));
    let units = vec![Decomposition { d: d.clone(), r: r.clone(), dr: dr.clone() }; n];
    let bread = d.transpose() * &dr;
    let c = small_sample_correct(&CorrectionInputs { units: &units, bread: &bread }).unwrap();
    let bi = inverse(&bread).unwrap();
    let m = d.transpose() * &r;
    let raw = &bi * (&m * m.transpose()) * bi.transpose() / n as f64;
    let expected = &raw / (1.0 - 1.0 / n as f64).powi(2);
    let ssc_err = rel_err(&c.cov, &expected);
    notes.push(format!("duplicated-trajectory correction rel err {ssc_err:.1e}"));
    ok &= ssc_err < 1e-10 && c.fallbacks == 0;

    check(ok, notes.join("; "))
}

fn criterion_2() -> Outcome {
    let gen = GeneratorConfig::Continuous(ContinuousConfig::new(300, Form::Linear));
    let frozen = MethodEntry::new("frozen", MethodSpec::TwoStage { nuisance: NuisanceSpec::new(RegressorKind::Constant { value: 0.0 }), dmode: DWeightMode::Unit });
    let res = study(gen, vec![frozen], 500, 2_000);
    let m = res.metric(0, "frozen").unwrap();
    let bound = 4.0 * m.emp_sd / (m.n_ok as f64).sqrt();
    check(m.failures == 0 && m.bias.abs() < bound, format!("mean {:.4}, |bias| {:.4} vs bound {:.4}", m.mean_estimate, m.bias.abs(), bound))
}

fn consistency_methods(link: LinkKind) -> Vec<MethodEntry> {
    let stack = RegressorKind::Stack { members: vec![RegressorKind::LinearLs { ridge: 1e-8 }, RegressorKind::spline_default(), forest()], link };
    let learners: Vec<(&str, RegressorKind, bool)> = vec![
        ("mean", RegressorKind::PerTimeMean, false),
        ("linear", RegressorKind::LinearLs { ridge: 1e-8 }, true),
        ("spline", RegressorKind::spline_default(), true),
        ("knn", RegressorKind::KernelKnn { k: 10 }, true),
        ("tree", RegressorKind::Tree { max_depth: Some(4), min_leaf: 5 }, true),
        ("forest", forest(), true),
        ("stack", stack, true),
    ];
    let mut methods = vec![baseline(link)];
    for (name, kind, pooled) in learners {
        methods.push(two_stage(&format!("ts_{name}"), kind.clone(), pooled, link));
        methods.push(two_stage_cf(&format!("cf_{name}"), kind, pooled, link));
    }
    methods.push(MethodEntry::new("oracle", MethodSpec::Oracle { mc_budget: 1_000_000 }));
    methods
}

fn criterion_3() -> Outcome {
    let ns = [30.0, 60.0, 100.0, 300.0];
    let mut ok = true;
    let mut notes = Vec::new();
    for (name, gen) in generators() {
        let methods = consistency_methods(gen.link());
        let labels: Vec<String> = methods.iter().map(MethodEntry::label).collect();
        let cfg = StudyConfig { base_seed: 3_000, sweep: vec![SweepAxis { param: "n".into(), values: ns.to_vec() }], ..StudyConfig::new(gen, methods, 500) };
        let res = match run_study(&cfg) {
            Ok(r) => r,
            Err(e) => {
                ok = false;
                notes.push(format!("{name}: {e}"));
                continue;
            }
        };
        let mut worst = (String::new(), 0);
        for label in &labels {
            let mse: Vec<f64> = (0..ns.len()).map(|s| res.metric(s, label).unwrap().mse).collect();
            let inversions = mse.windows(2).filter(|w| !(w[1] < w[0])).count();
            if inversions > 1 {
                ok = false;
                notes.push(format!("{name}/{label}: MSE {mse:.4?}"));
            }
            if inversions > worst.1 || worst.0.is_empty() {
                worst = (label.clone(), inversions);
            }
        }
        let base = &labels[0];
        let first = res.metric(0, base).unwrap().mse;
        let last = res.metric(ns.len() - 1, base).unwrap().mse;
        notes.push(format!("{name}: {} methods, {base} MSE {first:.4} -> {last:.4}, most inversions {} ({})", labels.len(), worst.1, worst.0));
    }
    check(ok, notes.join("; "))
}

fn efficiency_study() -> &'static StudyResult {
    static CELL: OnceLock<StudyResult> = OnceLock::new();
    CELL.get_or_init(|| {
        let gen = GeneratorConfig::Continuous(ContinuousConfig { lambda2: 3.0, ..ContinuousConfig::new(100, Form::Linear) });
        let methods = vec![
            baseline(LinkKind::Identity),
            two_stage("two_stage", RegressorKind::PerTimeMean, false, LinkKind::Identity),
            two_stage_cf("two_stage_cf", RegressorKind::PerTimeMean, false, LinkKind::Identity),
            MethodEntry::new("oracle", MethodSpec::Oracle { mc_budget: 1_000_000 }),
        ];
        study(gen, methods, 1000, 4_000)
    })
}

fn criterion_4() -> Outcome {
    let res = efficiency_study();
    let re = res.metric(0, "two_stage").unwrap().re.unwrap();
    let oracle_var = res.metric(0, "oracle").unwrap().emp_sd.powi(2);
    let worst = ["wcls", "two_stage", "two_stage_cf"]
        .iter()
        .map(|m| oracle_var / res.metric(0, m).unwrap().emp_sd.powi(2))
        .fold(0.0, f64::max);
    check(re >= 1.2 && worst <= 1.05, format!("RE(two_stage vs wcls) {re:.3}, max oracle variance ratio {worst:.3}"))
}

fn criterion_5() -> Outcome {
    let gen = GeneratorConfig::Continuous(ContinuousConfig { lambda1: 3.0, ..ContinuousConfig::new(100, Form::Periodic) });
    let spline = MethodEntry::new(
        "spline",
        MethodSpec::TwoStage { nuisance: NuisanceSpec::new(RegressorKind::spline_default()).pooled(true).features(["t", "z"]), dmode: DWeightMode::PerTimeEmpirical },
    );
    let res = study(gen, vec![baseline(LinkKind::Identity), spline], 1000, 5_000);
    let paired: HashMap<usize, f64> = res.estimates(0, "wcls").into_iter().collect();
    let (mut target, mut base) = (Vec::new(), Vec::new());
    for (r, e) in res.estimates(0, "spline") {
        if let Some(b) = paired.get(&r) {
            target.push(e);
            base.push(*b);
        }
    }
    let re = relative_efficiency(sample_variance(&target), sample_variance(&base)).unwrap();
    let (lo, hi) = bootstrap_re_interval(&target, &base, 2000, 0.95, 55).unwrap();
    check(lo > 1.0, format!("RE {re:.3}, 95% bootstrap interval [{lo:.3}, {hi:.3}]"))
}

fn coverage_studies() -> &'static Vec<(&'static str, StudyResult)> {
    static CELL: OnceLock<Vec<(&'static str, StudyResult)>> = OnceLock::new();
    CELL.get_or_init(|| {
        generators()
            .into_iter()
            .map(|(name, gen)| {
                let link = gen.link();
                let methods = vec![baseline(link), two_stage("ts_linear", RegressorKind::LinearLs { ridge: 1e-8 }, true, link), two_stage_cf("cf_forest", forest(), true, link)];
                (name, study(gen, methods, 1000, 6_000))
            })
            .collect()
    })
}

fn criterion_6() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for (name, res) in coverage_studies() {
        let parts: Vec<String> = res
            .metrics
            .iter()
            .map(|m| {
                ok &= (0.925..=0.975).contains(&m.coverage);
                format!("{}={:.3}", m.method, m.coverage)
            })
            .collect();
        notes.push(format!("{name}: {}", parts.join(" ")));
    }
    check(ok, notes.join("; "))
}

fn criterion_7() -> Outcome {
    let res = &coverage_studies()[0].1;
    let mut ok = true;
    let parts: Vec<String> = res
        .metrics
        .iter()
        .map(|m| {
            let ratio = m.mean_se / m.emp_sd;
            ok &= (ratio - 1.0).abs() <= 0.10;
            format!("{} SE/SD={ratio:.3}", m.method)
        })
        .collect();
    check(ok, parts.join(", "))
}

fn criterion_8() -> Outcome {
    let res = efficiency_study();
    let ratio = res.metric(0, "two_stage_cf").unwrap().mse / res.metric(0, "two_stage").unwrap().mse;
    check((ratio - 1.0).abs() < 0.15, format!("MSE ratio {ratio:.4}"))
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_excursionlab")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("{args:?} exited with {}: {}", out.status, String::from_utf8_lossy(&out.stderr)))
    }
}

fn criterion_9() -> Outcome {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let panel = dir.path().join("panel.csv");
    let p = |x: &Path| x.to_str().unwrap().to_string();
    run_cli(&["simulate", "--config", &p(&configs.join("continuous_linear_var3.json")), "--out", &p(&panel)])?;
    let report: serde_json::Value = serde_json::from_str(&run_cli(&["estimate", "--data", &p(&panel), "--link", "identity", "--method", "two-stage", "--nuisance", "per_time_mean", "--pooled", "off", "--dmode", "per_time_empirical", "--level", "0.95", "--ssc", "on"])?).map_err(|e| e.to_string())?;
    let beta = report["beta"][0].as_f64().ok_or("no beta in report")?;
    let out = dir.path().join("bench");
    run_cli(&["bench", "--config", &p(&configs.join("efficiency_study.json")), "--out", &p(&out)])?;
    let mut rdr = csv::Reader::from_path(out.join("metrics.csv")).map_err(|e| e.to_string())?;
    let headers = rdr.headers().map_err(|e| e.to_string())?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (c_method, c_re, c_sd) = (col("method"), col("re"), col("emp_sd"));
    let mut re = HashMap::new();
    let mut var = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        re.insert(rec[c_method].to_string(), rec[c_re].parse::<f64>().unwrap_or(f64::NAN));
        var.insert(rec[c_method].to_string(), rec[c_sd].parse::<f64>().unwrap().powi(2));
    }
    let ts_re = re["two_stage"];
    let worst = var.iter().filter(|(k, _)| k.as_str() != "oracle").map(|(_, v)| var["oracle"] / v).fold(0.0, f64::max);
    check(ts_re >= 1.2 && worst <= 1.05, format!("estimate beta {beta:.4}; bench RE {ts_re:.3}, max oracle variance ratio {worst:.3}"))
}

#[test]
fn acceptance() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: Vec<(usize, &str, fn() -> Outcome)> = vec![
        (1, "algebraic and unit checks", criterion_1),
        (2, "global robustness with frozen nuisance", criterion_2),
        (3, "MSE decreases with n", criterion_3),
        (4, "efficiency gain from variance weighting", criterion_4),
        (5, "efficiency gain from nonlinearity", criterion_5),
        (6, "coverage with small-sample correction", criterion_6),
        (7, "standard error calibration", criterion_7),
        (8, "cross-fitting neutrality", criterion_8),
        (9, "CLI simulate -> estimate -> bench", criterion_9),
    ];
    let mut failed = Vec::new();
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        // the raw handle is not captured by the harness, so the lines show without --nocapture
        let mut err = std::io::stderr();
        let _ = match outcome {
            Ok(detail) => writeln!(err, "criterion {id} PASS ({name}; {secs:.0}s): {detail}"),
            Err(detail) => {
                failed.push(id);
                writeln!(err, "criterion {id} FAIL ({name}; {secs:.0}s): {detail}")
            }
        };
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
