use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use excursionlab::bench::{run_study, StudyConfig};
use excursionlab::cee::LinkKind;
use excursionlab::dweights::DWeightMode;
use excursionlab::estimators::{diagnose_wa2, estimate, EstimateOptions, EstimateReport, MethodSpec};
use excursionlab::io::{load_panel_csv, read_json, write_json, write_panel, write_panel_csv, write_rows};
use excursionlab::nuisance::{fit_nuisance, NuisanceSpec, RegressorKind};
use excursionlab::panel::{validate_panel, ModeratorFormula, Panel, DEFAULT_TAU};
use excursionlab::simgen::{BinaryConfig, ContinuousConfig, CountConfig, Form, GeneratorConfig, TruthHandle, DEFAULT_MC_BUDGET};
use excursionlab::{Error, Result};

#[derive(Parser)]
#[command(name = "excursionlab", version, about = "Causal excursion effect estimation for micro-randomized trials")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic trial and write it as panel CSV.
    Simulate(SimulateArgs),
    /// Estimate causal excursion effects from a panel CSV.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo study from a JSON config and write metrics CSV.
    Bench(BenchArgs),
    /// Cross-time correlation summary of the estimating function.
    Diagnose(DiagnoseArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Outcome {
    Continuous,
    Binary,
    Count,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Wcls,
    Emee,
    TwoStage,
    TwoStageCf,
    Oracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct SimulateArgs {
    /// Generator config JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    outcome: Option<Outcome>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    /// linear, simple_nonlinear, periodic or step.
    #[arg(long)]
    form: Option<String>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Panel CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the resolved generator config (usable as --truth).
    #[arg(long)]
    truth_out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct NuisanceArgs {
    /// Outcome learner: per_time_mean, constant:V, linear_ls, spline[:knots],
    /// knn[:k], tree[:depth], forest[:trees], stack, or a JSON object.
    #[arg(long, default_value = "linear_ls")]
    nuisance: String,
    /// History columns used as learner features (default: all).
    #[arg(long, value_delimiter = ',')]
    features: Option<Vec<String>>,
    /// One learner across decision points (on) or one per decision point (off).
    #[arg(long, value_enum, default_value = "on")]
    pooled: Switch,
}

impl NuisanceArgs {
    fn spec(&self, link: LinkKind) -> Result<NuisanceSpec> {
        let mut spec = NuisanceSpec::new(RegressorKind::parse(&self.nuisance, link)?).pooled(self.pooled == Switch::On);
        if let Some(f) = &self.features {
            spec = spec.features(f.iter().cloned());
        }
        Ok(spec)
    }
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "identity")]
    link: String,
    #[arg(long, value_enum, default_value = "two-stage")]
    method: Method,
    #[command(flatten)]
    nuisance: NuisanceArgs,
    /// unit, per_time_empirical, pooled_smoother or analytic_scalar (default depends on the link).
    #[arg(long)]
    dmode: Option<String>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, value_enum, default_value = "on")]
    ssc: Switch,
    /// Extra history columns in the WCLS/EMEE control design.
    #[arg(long, value_delimiter = ',')]
    control: Vec<String>,
    /// Rebuild the CEE design from a formula such as "1,t"; default keeps the f_ columns.
    #[arg(long)]
    moderators: Option<String>,
    /// Generator config JSON supplying the truth for --method oracle.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MC_BUDGET)]
    mc_budget: usize,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the number of replicates.
    #[arg(long)]
    replicates: Option<usize>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "identity")]
    link: String,
    #[command(flatten)]
    nuisance: NuisanceArgs,
    /// CEE coefficients to evaluate at; default is the unit-weight two-stage fit.
    #[arg(long, value_delimiter = ',')]
    beta: Option<Vec<f64>>,
    #[arg(long)]
    moderators: Option<String>,
}

fn load(path: &PathBuf, moderators: &Option<String>) -> Result<Panel> {
    let panel = load_panel_csv(path)?;
    match moderators {
        Some(m) => panel.with_moderators(&ModeratorFormula::parse(m)?),
        None => Ok(panel),
    }
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let mut cfg: GeneratorConfig = match (&args.config, args.outcome) {
        (Some(path), _) => read_json(path)?,
        (None, Some(outcome)) => {
            let n = args.n.unwrap_or(100);
            let form = Form::parse(args.form.as_deref().unwrap_or("linear"))?;
            match outcome {
                Outcome::Continuous => GeneratorConfig::Continuous(ContinuousConfig::new(n, form)),
                Outcome::Binary => GeneratorConfig::Binary(BinaryConfig::new(n, form)),
                Outcome::Count => GeneratorConfig::Count(CountConfig::new(n, form)),
            }
        }
        (None, None) => return Err(Error::InvalidArgument("simulate needs --config or --outcome".into())),
    };
    let mut value = serde_json::to_value(&cfg)?;
    let obj = value.as_object_mut().expect("configs serialize as objects");
    let overrides = [
        ("n", args.n.map(|v| json!(v))),
        ("horizon", args.horizon.map(|v| json!(v))),
        ("form", args.form.as_deref().map(Form::parse).transpose()?.map(|f| json!(f))),
        ("lambda1", args.lambda1.map(|v| json!(v))),
        ("lambda2", args.lambda2.map(|v| json!(v))),
        ("lambda3", args.lambda3.map(|v| json!(v))),
        ("lambda", args.lambda.map(|v| json!(v))),
        ("rho", args.rho.map(|v| json!(v))),
        ("seed", args.seed.map(|v| json!(v))),
    ];
    for (key, v) in overrides {
        if let Some(v) = v {
            if !obj.contains_key(key) {
                return Err(Error::InvalidArgument(format!("--{key} does not apply to this outcome type")));
            }
            obj.insert(key.to_string(), v);
        }
    }
    cfg = serde_json::from_value(value)?;
    let (panel, truth) = cfg.generate()?;
    match &args.out {
        Some(path) => write_panel_csv(&panel, path)?,
        None => write_panel(&panel, std::io::stdout().lock())?,
    }
    if let Some(path) = &args.truth_out {
        write_json(&cfg, path)?;
    }
    if args.out.is_some() {
        let summary = json!({ "n": panel.n(), "horizon": panel.horizon(), "beta_star": truth.beta_star() });
        println!("{summary}");
    }
    Ok(())
}

fn report_csv(rep: &EstimateReport) -> String {
    let names = ["coef", "estimate", "se", "se_corrected", "lower", "upper"];
    let mut out = names.join(",") + "\n";
    for j in 0..rep.beta.len() {
        let corrected = rep.se_corrected.as_ref().map_or(String::new(), |s| s[j].to_string());
        out += &format!("{j},{},{},{corrected},{},{}\n", rep.beta[j], rep.se[j], rep.ci[j].lower, rep.ci[j].upper);
    }
    out
}

fn estimate_cmd(args: EstimateArgs) -> Result<()> {
    let link = LinkKind::parse(&args.link)?;
    let panel = load(&args.data, &args.moderators)?;
    let dmode = args.dmode.as_deref().map(DWeightMode::parse).transpose()?.unwrap_or(DWeightMode::default_for(link));
    let method = match args.method {
        Method::Wcls => MethodSpec::Wcls { control: args.control.clone() },
        Method::Emee => MethodSpec::Emee { control: args.control.clone() },
        Method::TwoStage => MethodSpec::TwoStage { nuisance: args.nuisance.spec(link)?, dmode },
        Method::TwoStageCf => MethodSpec::TwoStageCf { nuisance: args.nuisance.spec(link)?, dmode, folds: args.folds, seed: args.seed },
        Method::Oracle => MethodSpec::Oracle { mc_budget: args.mc_budget },
    };
    let mut opts = EstimateOptions::new(link).level(args.level).ssc(args.ssc == Switch::On);
    if let Some(path) = &args.truth {
        opts = opts.with_truth(TruthHandle::new(read_json(path)?));
    }
    let rep = estimate(&panel, &method, &opts)?;
    let text = match args.format {
        Format::Json => serde_json::to_string_pretty(&rep)? + "\n",
        Format::Csv => report_csv(&rep),
    };
    emit(&args.out, &text)
}

fn bench(args: BenchArgs) -> Result<()> {
    let mut cfg: StudyConfig = read_json(&args.config)?;
    if let Some(dir) = args.out {
        cfg.output_dir = Some(dir);
    }
    if let Some(r) = args.replicates {
        cfg.replicates = r;
    }
    let res = run_study(&cfg)?;
    match &cfg.output_dir {
        Some(dir) => println!("{}", json!({ "metrics": dir.join("metrics.csv"), "raw": dir.join("raw.csv"), "rows": res.metrics.len() })),
        None => write_rows(&res.metrics, std::io::stdout().lock())?,
    }
    Ok(())
}

fn diagnose(args: DiagnoseArgs) -> Result<()> {
    let link = LinkKind::parse(&args.link)?;
    let panel = load(&args.data, &args.moderators)?;
    let validation = validate_panel(&panel, link, DEFAULT_TAU);
    let spec = args.nuisance.spec(link)?;
    let beta = match args.beta {
        Some(b) => b,
        None => estimate(&panel, &MethodSpec::TwoStage { nuisance: spec.clone(), dmode: DWeightMode::Unit }, &EstimateOptions::new(link))?.beta,
    };
    let all: Vec<usize> = (0..panel.n()).collect();
    let fit = fit_nuisance(&panel, &spec, &all)?;
    let g = diagnose_wa2(&panel, &beta, &fit, link)?;
    let rows: Vec<Vec<f64>> = (0..g.nrows()).map(|i| g.row(i).iter().copied().collect()).collect();
    let off: Vec<f64> = (0..g.nrows()).flat_map(|i| (0..g.ncols()).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| g[(i, j)]).collect();
    let max_off = off.iter().copied().fold(0.0, f64::max);
    let out = json!({
        "beta": beta,
        "wa2": rows,
        "max_off_diagonal": max_off,
        "validation": validation,
    });
    emit(&None, &(serde_json::to_string_pretty(&out)? + "\n"))
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            return fail("usage", e.render().to_string().trim(), 2);
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Estimate(a) => estimate_cmd(a),
        Command::Bench(a) => bench(a),
        Command::Diagnose(a) => diagnose(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string(), 1),
    }
}
