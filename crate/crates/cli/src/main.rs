//! Command line for the multi-domain linear training toolkit. Subcommands:
//! `generate` (dataset CSVs), `train` (one method, one seed), `suite`
//! (multi-seed accuracy table), `detect` (target-risk bound sweep), and
//! `coefs` (coefficient group norms).
//!
//! Exit codes: 0 on success, 1 when any experiment cell failed, 2 on
//! configuration errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cic_core::methods::train_method;
use cic_core::suite::{
    aggregate_group_norms, build_seed_scenario, emit_table, group_norms_csv,
    run_detection_experiment, run_suite_detailed, scenario_groups,
};
use cic_core::{Method, MethodSpec, PenaltySpec, SuiteConfig, SuiteError, TableFormat};

#[derive(Parser)]
#[command(
    name = "cic",
    version,
    about = "Multi-domain linear-model toolkit: invariance penalties, label-shift \
             correction, and target-risk detection bounds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write scenario datasets as CSV files, one file per seed
    Generate(CommonOpts),
    /// Train one method on one seed and print a run summary as JSON
    Train(TrainOpts),
    /// Multi-seed accuracy table with grid-selected hyperparameters
    Suite(CommonOpts),
    /// Sweep the marginal-matching methods over the lambda grid and compare
    /// target-accuracy upper bounds against actual target accuracy
    Detect(CommonOpts),
    /// Coefficient L1 norms per coordinate group (defaults to the two
    /// marginal-matching methods unless --methods is given)
    Coefs(CommonOpts),
}

#[derive(Args)]
struct CommonOpts {
    /// JSON config file mirroring the suite config; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario preset name (scm-i, scm-ii, scm-iii, scm-iv, scm-binary,
    /// scm-binary-m<K>) or path to a scenario spec JSON file
    #[arg(long)]
    scenario: Option<String>,
    /// Comma-separated method names, or "all"
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Seeds: comma-separated values and/or ranges like 0..10 or 0..=9
    #[arg(long)]
    seeds: Option<String>,
    /// Distance for marginal/conditional penalties: mean or mmd
    #[arg(long)]
    penalty: Option<String>,
    /// Comma-separated penalty-strength grid
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    /// Comma-separated confidence-region levels in [0, 1)
    #[arg(long, value_delimiter = ',')]
    alpha_list: Option<Vec<f64>>,
    /// Output directory for artifacts
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads
    #[arg(long)]
    jobs: Option<usize>,
    /// Run the detection experiment even on scenarios with label shift
    #[arg(long)]
    force: bool,
    /// Use disjoint data splits for the stages of importance-weighted methods
    #[arg(long)]
    split: bool,
}

#[derive(Args)]
struct TrainOpts {
    #[command(flatten)]
    common: CommonOpts,
    /// Penalty strength of the trained method (single runs take one value;
    /// grid selection is a suite feature)
    #[arg(long)]
    lambda: Option<f64>,
    /// Penalty strength of the conditional-invariance pre-stage of staged
    /// methods (defaults to --lambda)
    #[arg(long)]
    lambda_cip: Option<f64>,
    /// Step size for the group reweighting method
    #[arg(long)]
    eta: Option<f64>,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<SuiteError> for CliError {
    fn from(e: SuiteError) -> Self {
        match e {
            SuiteError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(opts) => cmd_generate(&opts),
        Command::Train(opts) => cmd_train(&opts),
        Command::Suite(opts) => cmd_suite(&opts),
        Command::Detect(opts) => cmd_detect(&opts),
        Command::Coefs(opts) => cmd_coefs(&opts),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Config(_) => ExitCode::from(2),
                CliError::Runtime(_) => ExitCode::from(1),
            }
        }
    }
}

fn load_config(opts: &CommonOpts) -> Result<SuiteConfig, CliError> {
    let mut config: SuiteConfig = match &opts.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?
        }
        None => SuiteConfig::default(),
    };
    if let Some(s) = &opts.scenario {
        config.scenario = s.clone();
    }
    if let Some(names) = &opts.methods {
        config.methods = parse_methods(names)?;
    }
    if let Some(expr) = &opts.seeds {
        config.seeds = parse_seeds(expr)?;
    }
    if let Some(p) = &opts.penalty {
        config.penalty = p.parse().map_err(CliError::Config)?;
    }
    if let Some(grid) = &opts.lambda_grid {
        config.lambda_grid = grid.clone();
    }
    if let Some(alphas) = &opts.alpha_list {
        config.alpha_list = alphas.clone();
    }
    if let Some(dir) = &opts.out {
        config.out_dir = Some(dir.clone());
    }
    if let Some(jobs) = opts.jobs {
        config.jobs = jobs;
    }
    if opts.force {
        config.force = true;
    }
    if opts.split {
        config.split = true;
    }
    Ok(config)
}

fn parse_methods(names: &[String]) -> Result<Vec<Method>, CliError> {
    let mut methods = Vec::new();
    for name in names {
        if name.eq_ignore_ascii_case("all") {
            methods.extend(Method::ALL);
            continue;
        }
        let m: Method = name.parse().map_err(|e: String| {
            CliError::Config(format!(
                "{e}; known methods: {}",
                Method::ALL.map(|m| m.name()).join(", ")
            ))
        })?;
        methods.push(m);
    }
    Ok(methods)
}

fn parse_seeds(expr: &str) -> Result<Vec<u64>, CliError> {
    let bad = |t: &str| CliError::Config(format!("bad seed token `{t}`"));
    let mut seeds = Vec::new();
    for token in expr.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        if let Some((a, b)) = token.split_once("..") {
            let lo: u64 = a.trim().parse().map_err(|_| bad(token))?;
            let (inclusive, b) = match b.strip_prefix('=') {
                Some(rest) => (true, rest),
                None => (false, b),
            };
            let hi: u64 = b.trim().parse().map_err(|_| bad(token))?;
            let hi = if inclusive { hi + 1 } else { hi };
            if hi <= lo {
                return Err(CliError::Config(format!("empty seed range `{token}`")));
            }
            seeds.extend(lo..hi);
        } else {
            seeds.push(token.parse().map_err(|_| bad(token))?);
        }
    }
    if seeds.is_empty() {
        return Err(CliError::Config("no seeds given".into()));
    }
    Ok(seeds)
}

fn write_artifact(dir: &Path, name: &str, content: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, content)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn cmd_generate(opts: &CommonOpts) -> Result<bool, CliError> {
    let config = load_config(opts)?;
    let dir = config
        .out_dir
        .clone()
        .ok_or_else(|| CliError::Config("generate needs an output directory (--out)".into()))?;
    std::fs::create_dir_all(&dir)?;
    for &seed in &config.seeds {
        let (spec, data) = build_seed_scenario(&config, seed)?;
        let path = dir.join(format!("{}-seed{}.csv", spec.name, seed));
        cic_core::scm::save_datasets_csv(&path, &data)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        eprintln!("wrote {}", path.display());
    }
    Ok(true)
}

fn cmd_train(opts: &TrainOpts) -> Result<bool, CliError> {
    let config = load_config(&opts.common)?;
    let method = match config.methods.as_slice() {
        [one] => *one,
        _ => {
            return Err(CliError::Config(
                "train needs exactly one method (pass --methods <name>)".into(),
            ))
        }
    };
    let seed = *config
        .seeds
        .first()
        .ok_or_else(|| CliError::Config("train needs a seed".into()))?;

    let lambda = opts.lambda.unwrap_or(1.0);
    let mut spec = MethodSpec::defaults(method);
    spec.penalty = PenaltySpec::with_kind(config.penalty, lambda);
    spec.lambda_cip = opts.lambda_cip.or(opts.lambda).unwrap_or(1.0);
    if let Some(eta) = opts.eta {
        spec.groupdro_eta = eta;
    }
    spec.epochs = config.epochs;
    spec.batch_size = config.batch_size;
    spec.lr = config.lr;
    spec.split = config.split;

    let (scenario, data) = build_seed_scenario(&config, seed)?;
    let run = train_method(&spec, &scenario, &data, seed)
        .map_err(|e| CliError::Runtime(format!("{method} on {} seed {seed}: {e}", scenario.name)))?;

    let summary = serde_json::json!({
        "method": method.name(),
        "scenario": scenario.name,
        "seed": seed,
        "lambda": lambda,
        "lambda_cip": spec.lambda_cip,
        "epochs": spec.epochs,
        "metrics": run.metrics,
        "importance_weights": run.weights,
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    if let Some(dir) = &config.out_dir {
        write_artifact(
            dir,
            &format!("model-{}-seed{}.json", method.name().to_lowercase(), seed),
            &run.model.to_json(),
        )?;
    }
    Ok(true)
}

fn cmd_suite(opts: &CommonOpts) -> Result<bool, CliError> {
    let config = load_config(opts)?;
    let outcome = run_suite_detailed(&config)?;
    print!("{}", emit_table(&outcome.table, TableFormat::Csv));
    if let Some(dir) = &config.out_dir {
        write_artifact(dir, "table.csv", &emit_table(&outcome.table, TableFormat::Csv))?;
        write_artifact(dir, "table.json", &emit_table(&outcome.table, TableFormat::Json))?;
        write_artifact(dir, "table.md", &emit_table(&outcome.table, TableFormat::Markdown))?;
        let dump = serde_json::to_string_pretty(&outcome).expect("outcome serializes");
        write_artifact(dir, "outcome.json", &dump)?;
    }
    if outcome.failed_cells > 0 {
        eprintln!("{} cell(s) failed", outcome.failed_cells);
        return Ok(false);
    }
    Ok(true)
}

fn cmd_detect(opts: &CommonOpts) -> Result<bool, CliError> {
    let config = load_config(opts)?;
    let experiment = run_detection_experiment(&config)?;
    print!("{}", experiment.csv);
    if let Some(dir) = &config.out_dir {
        write_artifact(dir, "detection.csv", &experiment.csv)?;
    }
    if !experiment.failures.is_empty() {
        for failure in &experiment.failures {
            eprintln!("failed: {failure}");
        }
        return Ok(false);
    }
    Ok(true)
}

fn cmd_coefs(opts: &CommonOpts) -> Result<bool, CliError> {
    let mut config = load_config(opts)?;
    if opts.methods.is_none() {
        config.methods = vec![Method::Dip, Method::JointDip];
    }
    let outcome = run_suite_detailed(&config)?;
    let groups = scenario_groups(&config)?;
    let rows = aggregate_group_norms(&outcome, &groups);
    let csv = group_norms_csv(&rows);
    print!("{csv}");
    if let Some(dir) = &config.out_dir {
        write_artifact(dir, "coefs.csv", &csv)?;
    }
    if outcome.failed_cells > 0 {
        eprintln!("{} cell(s) failed", outcome.failed_cells);
        return Ok(false);
    }
    Ok(true)
}
