//! Command-line front end for matched-design sensitivity analysis.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use senssolve::design::MatchedDesign;
use senssolve::inference::{
    changepoint, randomization_reference, run_test, test_dbar, Method, SensitivityReport,
};
use senssolve::separable::GammaModel;
use senssolve::simlab::{run_size_study, Scenario, SizeStudyTable};

#[derive(Parser)]
#[command(
    name = "senssolve",
    about = "Sensitivity analysis for average treatment effects in matched observational studies",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Alternative {
    Greater,
    Less,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Worst-case p-values for one method over a grid of gamma values.
    Analyze(AnalyzeArgs),
    /// Smallest gamma at which the worst-case p-value reaches alpha.
    Changepoint(ChangepointArgs),
    /// Monte Carlo size study for a generative scenario.
    Simulate(SimulateArgs),
    /// Reference distribution from biased randomizations.
    Randref(RandrefArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Delimited input with columns block_id, treated, outcome.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_parser = parse_method)]
    method: Method,
    /// Comma list (1.25,1.5) or range (1:0.25:2) of gamma values.
    #[arg(long, default_value = "1")]
    gamma: String,
    #[arg(long, default_value_t = 0.0)]
    tau0: f64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, value_enum, default_value_t = Alternative::Greater)]
    alternative: Alternative,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args)]
struct ChangepointArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_parser = parse_method)]
    method: Method,
    #[arg(long, default_value_t = 0.0)]
    tau0: f64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 20.0)]
    gamma_max: f64,
    #[arg(long, value_enum, default_value_t = Alternative::Greater)]
    alternative: Alternative,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario label: a..k, binary-a..binary-k, or appendixA.
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Number of replicates.
    #[arg(long = "M")]
    replicates: Option<usize>,
    /// Number of matched sets per replicate.
    #[arg(long = "B")]
    strata: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args)]
struct RandrefArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.0)]
    tau0: f64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Number of reference draws.
    #[arg(long = "M", default_value_t = 10_000)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse()
}

/// Parses "1.25,1.5,2" or "start:step:stop" into a gamma grid.
fn parse_gamma_grid(spec: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = spec.split(':').collect();
    let values = if parts.len() == 3 {
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| format!("invalid number {s:?} in gamma range"))
        };
        let (start, step, stop) = (parse(parts[0])?, parse(parts[1])?, parse(parts[2])?);
        if step <= 0.0 || stop < start {
            return Err(format!("invalid gamma range {spec:?}"));
        }
        let mut values = Vec::new();
        let mut k = 0usize;
        loop {
            let g = start + step * k as f64;
            if g > stop + 1e-12 {
                break;
            }
            values.push(g);
            k += 1;
        }
        values
    } else {
        spec.split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| format!("invalid gamma value {s:?}"))
            })
            .collect::<Result<Vec<f64>, String>>()?
    };
    if values.is_empty() {
        return Err("empty gamma grid".into());
    }
    if values.iter().any(|&g| g < 1.0) {
        return Err("gamma values must be >= 1".into());
    }
    Ok(values)
}

/// For a less-than alternative the outcomes are mirrored and tau0 negated,
/// so the greater-than machinery reports the lower-tail p-value.
fn oriented(design: MatchedDesign, tau0: f64, alt: Alternative) -> (MatchedDesign, f64) {
    match alt {
        Alternative::Greater => (design, tau0),
        Alternative::Less => (design.negated(), -tau0),
    }
}

fn report_lines_csv(reports: &[SensitivityReport]) -> String {
    let mut out = String::from(
        "method,gamma,tau0,statistic,expectation_bound,se,deviate,p_value,alpha,reject\n",
    );
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.result.method,
            r.result.gamma,
            r.result.tau0,
            r.result.statistic,
            r.result.worst_case_expectation,
            r.result.se,
            r.result.deviate,
            r.result.p_value,
            r.alpha,
            r.reject
        ));
    }
    out
}

fn report_lines_text(reports: &[SensitivityReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&format!(
            "{} gamma={:.4} p={:.6} statistic={:.6} bound={:.6} se={:.6} deviate={:.4} {}\n",
            r.result.method,
            r.result.gamma,
            r.result.p_value,
            r.result.statistic,
            r.result.worst_case_expectation,
            r.result.se,
            r.result.deviate,
            if r.reject { "REJECT" } else { "retain" }
        ));
    }
    out
}

fn size_table_csv(table: &SizeStudyTable) -> String {
    let mut out = String::from(
        "scenario,statistic,size,bias,bound,mean_deviate,sd_deviate,mean_solve_seconds,\
         max_solve_seconds,gamma,alpha,replicates,strata,seed\n",
    );
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in &table.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            table.scenario,
            row.statistic,
            row.size,
            row.bias,
            opt(row.bound),
            row.mean_deviate,
            row.sd_deviate,
            opt(row.mean_solve_seconds),
            opt(row.max_solve_seconds),
            table.gamma,
            table.alpha,
            table.replicates,
            table.strata,
            table.seed
        ));
    }
    out
}

fn run(cli: Cli) -> Result<String, senssolve::Error> {
    match cli.command {
        Command::Analyze(args) => {
            let gammas = parse_gamma_grid(&args.gamma)
                .map_err(|msg| senssolve::Error::BadRecord { line: 0, msg })?;
            let design = MatchedDesign::from_path(&args.input)?;
            let (design, tau0) = oriented(design, args.tau0, args.alternative);
            let mut reports = Vec::with_capacity(gammas.len());
            for gamma in gammas {
                let model = GammaModel::new(gamma)?;
                reports.push(run_test(args.method, &design, tau0, &model, args.alpha)?);
            }
            Ok(match args.format {
                Format::Json => serde_json::to_string_pretty(&reports).unwrap() + "\n",
                Format::Csv => report_lines_csv(&reports),
                Format::Text => report_lines_text(&reports),
            })
        }
        Command::Changepoint(args) => {
            let design = MatchedDesign::from_path(&args.input)?;
            let (design, tau0) = oriented(design, args.tau0, args.alternative);
            let cp = changepoint(&design, tau0, args.method, args.alpha, args.gamma_max)?;
            let payload = json!({
                "method": args.method.name(),
                "tau0": args.tau0,
                "alpha": args.alpha,
                "gamma_max": args.gamma_max,
                "changepoint": cp.gamma,
                "not_significant_at_one": cp.not_significant_at_one,
                "monotonicity_warning": cp.monotonicity_warning,
            });
            Ok(match args.format {
                Format::Json => serde_json::to_string_pretty(&payload).unwrap() + "\n",
                Format::Csv => format!(
                    "method,changepoint,not_significant_at_one,monotonicity_warning\n{},{},{},{}\n",
                    args.method.name(),
                    cp.gamma,
                    cp.not_significant_at_one,
                    cp.monotonicity_warning
                ),
                Format::Text => format!(
                    "{}: changepoint gamma = {:.4}{}{}\n",
                    args.method.name(),
                    cp.gamma,
                    if cp.not_significant_at_one {
                        " (not significant at gamma = 1)"
                    } else {
                        ""
                    },
                    if cp.monotonicity_warning {
                        " [warning: p-value not monotone on the check grid]"
                    } else {
                        ""
                    }
                ),
            })
        }
        Command::Simulate(args) => {
            let mut scenario = Scenario::from_label(&args.scenario)?.with_seed(args.seed);
            if let Some(g) = args.gamma {
                scenario = scenario.with_gamma(g);
            }
            if let Some(a) = args.alpha {
                scenario = scenario.with_alpha(a);
            }
            if let Some(m) = args.replicates {
                scenario = scenario.with_replicates(m);
            }
            if let Some(b) = args.strata {
                scenario = scenario.with_strata(b);
            }
            let table = run_size_study(&scenario, &scenario.default_methods())?;
            Ok(match args.format {
                Format::Json => serde_json::to_string_pretty(&table).unwrap() + "\n",
                Format::Csv => size_table_csv(&table),
                Format::Text => {
                    let mut out = format!(
                        "scenario {} (gamma={}, alpha={}, M={}, B={}, seed={})\n",
                        table.scenario,
                        table.gamma,
                        table.alpha,
                        table.replicates,
                        table.strata,
                        table.seed
                    );
                    for row in &table.rows {
                        out.push_str(&format!(
                            "  {:<10} size={:.3} bias={:+.3} {}\n",
                            row.statistic.to_string(),
                            row.size,
                            row.bias,
                            match (row.bound, row.mean_solve_seconds) {
                                (Some(b), _) => format!("bound={b:+.3}"),
                                (None, Some(t)) => format!("mean_solve={t:.3}s"),
                                _ => String::new(),
                            }
                        ));
                    }
                    out
                }
            })
        }
        Command::Randref(args) => {
            let design = MatchedDesign::from_path(&args.input)?;
            let model = GammaModel::new(args.gamma)?;
            let reference =
                randomization_reference(&design, args.tau0, &model, args.draws, args.seed)?;
            let observed = test_dbar(&design, args.tau0, &model, args.alpha)?;
            let critical = reference.critical_value(args.alpha);
            let payload = json!({
                "gamma": args.gamma,
                "tau0": args.tau0,
                "alpha": args.alpha,
                "draws": reference.count(),
                "seed": args.seed,
                "quantiles": {
                    "0.80": reference.quantile(0.80),
                    "0.90": reference.quantile(0.90),
                    "0.95": reference.quantile(0.95),
                    "0.975": reference.quantile(0.975),
                    "0.99": reference.quantile(0.99),
                },
                "critical_value": critical,
                "observed_deviate": observed.result.deviate,
                "reject_by_reference": observed.result.deviate >= critical,
                "normal_report": observed,
            });
            Ok(match args.format {
                Format::Json => serde_json::to_string_pretty(&payload).unwrap() + "\n",
                Format::Csv => format!(
                    "gamma,tau0,alpha,draws,seed,critical_value,observed_deviate,reject\n\
                     {},{},{},{},{},{},{},{}\n",
                    args.gamma,
                    args.tau0,
                    args.alpha,
                    reference.count(),
                    args.seed,
                    critical,
                    observed.result.deviate,
                    observed.result.deviate >= critical
                ),
                Format::Text => format!(
                    "reference critical value at alpha={}: {:.4}; observed deviate {:.4} => {}\n",
                    args.alpha,
                    critical,
                    observed.result.deviate,
                    if observed.result.deviate >= critical {
                        "REJECT"
                    } else {
                        "retain"
                    }
                ),
            })
        }
    }
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("SENSSOLVE_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .ok();
            }
            _ => {
                eprintln!("error: SENSSOLVE_THREADS must be a positive integer");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(output) => {
            print!("{output}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}
