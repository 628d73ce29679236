//! Experiment harness: multi-seed suite runs with grid-selected
//! hyperparameters, accuracy tables, the detection-bound experiment, the
//! coefficient group-norm report, and the source-domain-count study.
//!
//! The unit of work is one (method, grid value, seed) cell. Cells are
//! independent and are distributed over a rayon pool of `jobs` threads;
//! aggregation folds results in a fixed order, so outputs are byte-identical
//! regardless of the parallelism degree.

use std::fmt::Write as _;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::detection_report;
use crate::label_shift::estimate_weights_from_data;
use crate::methods::{train_method_with_proxy, Method, MethodSpec, TrainedRun};
use crate::model::{weighted_cross_entropy_and_grad, LinearModel};
use crate::numerics::Rng;
use crate::penalty::{DistanceKind, PenaltySpec};
use crate::scm::{
    build_scenario, coordinate_group_norms, generate_scenario_data, CoordGroup, Dataset,
    ScenarioSpec, ScmError,
};
use crate::stream;

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error(transparent)]
    Scenario(#[from] ScmError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("table parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything a suite run needs. Serde defaults cover every field, so `{}`
/// is a valid config file; CLI flags override file values downstream.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    /// Scenario preset name, or a path to a scenario spec JSON file. A file
    /// spec is fixed, so unlike presets it does not redraw per-domain shift
    /// parameters for each seed.
    pub scenario: String,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Penalty-strength grid for methods with a distribution-matching or
    /// variance penalty.
    pub lambda_grid: Vec<f64>,
    /// Step-size grid for the group reweighting method.
    pub eta_grid: Vec<f64>,
    /// Confidence-region levels for the detection experiment.
    pub alpha_list: Vec<f64>,
    pub penalty: DistanceKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub jobs: usize,
    /// Use disjoint data splits for the stages of importance-weighted
    /// methods instead of reusing the full sample.
    pub split: bool,
    /// Let the detection experiment run on scenarios with label shift even
    /// though the bound's assumptions exclude it.
    pub force: bool,
    pub out_dir: Option<PathBuf>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            scenario: "scm-i".into(),
            methods: Method::ALL.to_vec(),
            seeds: (0..10).collect(),
            lambda_grid: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            eta_grid: vec![0.01, 0.1, 1.0, 10.0],
            alpha_list: vec![0.0, 0.25, 0.5, 0.75],
            penalty: DistanceKind::Mean,
            epochs: 50,
            batch_size: 100,
            lr: 0.01,
            jobs: 1,
            split: false,
            force: false,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub src_acc_mean: f64,
    pub src_acc_sd: f64,
    pub tar_acc_mean: f64,
    pub tar_acc_sd: f64,
}

/// Accuracy table in percent, one row per method, mean and sd over seeds.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Csv,
    Json,
    Markdown,
}

impl std::str::FromStr for TableFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(TableFormat::Csv),
            "json" => Ok(TableFormat::Json),
            "markdown" | "md" => Ok(TableFormat::Markdown),
            other => Err(format!("unknown table format `{other}`")),
        }
    }
}

/// One method's grid-selected result across all seeds.
#[derive(Debug, Clone, Serialize)]
pub struct MethodSelection {
    pub method: Method,
    /// The selected grid value (lambda, or eta for the group reweighting
    /// method); None for methods without a grid.
    pub chosen_hyper: Option<f64>,
    /// Penalty strength used for the conditional-invariance pre-stage of
    /// staged methods, selected jointly with the main grid value.
    pub proxy_lambda: Option<f64>,
    pub per_seed: Vec<SeedCell>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedCell {
    pub seed: u64,
    pub outcome: Result<TrainedRun, String>,
    pub validation_acc: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteOutcome {
    pub table: ResultTable,
    pub selections: Vec<MethodSelection>,
    /// Cells at the selected grid value whose training failed.
    pub failed_cells: usize,
}

/// Scenario, data, and validation rows for one seed, shared by every cell.
struct SeedContext {
    seed: u64,
    spec: ScenarioSpec,
    data: Vec<Dataset>,
    val_rows: Vec<usize>,
}

fn resolve_scenario(name: &str, rng: &mut Rng) -> Result<ScenarioSpec, SuiteError> {
    if std::path::Path::new(name).is_file() {
        let text = std::fs::read_to_string(name)?;
        let spec: ScenarioSpec = serde_json::from_str(&text)
            .map_err(|e| SuiteError::Config(format!("scenario file {name}: {e}")))?;
        spec.validate()?;
        Ok(spec)
    } else {
        Ok(build_scenario(name, rng)?)
    }
}

/// Scenario spec and datasets for one seed of a config. Presets redraw
/// their random shift parameters per seed; file-based specs are fixed.
pub fn build_seed_scenario(
    config: &SuiteConfig,
    seed: u64,
) -> Result<(ScenarioSpec, Vec<Dataset>), SuiteError> {
    let mut scenario_rng = Rng::new(seed).substream(stream::SCENARIO);
    let spec = resolve_scenario(&config.scenario, &mut scenario_rng)?;
    let data = generate_scenario_data(&spec, seed);
    Ok((spec, data))
}

fn build_context(config: &SuiteConfig, seed: u64) -> Result<SeedContext, SuiteError> {
    let (spec, data) = build_seed_scenario(config, seed)?;
    let n = data.last().expect("scenario has a target").len();
    let val_rows = Rng::new(seed).substream(stream::VALIDATION).sample_indices(n, (n / 10).max(1));
    Ok(SeedContext { seed, spec, data, val_rows })
}

fn build_contexts(config: &SuiteConfig) -> Result<Vec<SeedContext>, SuiteError> {
    config.seeds.iter().map(|&s| build_context(config, s)).collect()
}

fn validate_config(config: &SuiteConfig) -> Result<(), SuiteError> {
    let bad = |m: &str| Err(SuiteError::Config(m.into()));
    if config.seeds.is_empty() {
        return bad("seeds must be non-empty");
    }
    if config.lambda_grid.is_empty() {
        return bad("lambda_grid must be non-empty");
    }
    if config.lambda_grid.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return bad("lambda_grid values must be finite and non-negative");
    }
    if config.methods.contains(&Method::GroupDro) && config.eta_grid.is_empty() {
        return bad("eta_grid must be non-empty when the method list includes groupDRO");
    }
    if config.eta_grid.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return bad("eta_grid values must be finite and positive");
    }
    if config.alpha_list.iter().any(|v| !(0.0..1.0).contains(v)) {
        return bad("alpha values must lie in [0, 1)");
    }
    if config.batch_size == 0 {
        return bad("batch_size must be at least 1");
    }
    if !(config.lr.is_finite() && config.lr > 0.0) {
        return bad("lr must be finite and positive");
    }
    if config.jobs == 0 {
        return bad("jobs must be at least 1");
    }
    Ok(())
}

fn make_pool(jobs: usize) -> Result<rayon::ThreadPool, SuiteError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| SuiteError::Config(format!("worker pool: {e}")))
}

fn sorted_grid(values: &[f64]) -> Vec<f64> {
    let mut g = values.to_vec();
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

/// Grid values a method is tuned over; a single None entry means no tuning.
fn grid_values(method: Method, lambda_grid: &[f64], eta_grid: &[f64]) -> Vec<Option<f64>> {
    if method == Method::GroupDro {
        eta_grid.iter().map(|&v| Some(v)).collect()
    } else if method.uses_lambda() {
        lambda_grid.iter().map(|&v| Some(v)).collect()
    } else {
        vec![None]
    }
}

fn method_spec(
    config: &SuiteConfig,
    method: Method,
    hyper: Option<f64>,
    cip_lambda: f64,
) -> MethodSpec {
    let mut spec = MethodSpec::defaults(method);
    let lambda = if method.uses_lambda() { hyper.unwrap_or(1.0) } else { 1.0 };
    spec.penalty = PenaltySpec::with_kind(config.penalty, lambda);
    if method == Method::GroupDro {
        if let Some(eta) = hyper {
            spec.groupdro_eta = eta;
        }
    }
    spec.lambda_cip = cip_lambda;
    spec.epochs = config.epochs;
    spec.batch_size = config.batch_size;
    spec.lr = config.lr;
    spec.split = config.split;
    spec
}

fn accuracy_on_rows(model: &LinearModel, data: &Dataset, rows: &[usize]) -> f64 {
    let subset = data.select(rows);
    let preds = model.predict(&subset.x);
    let correct = preds.iter().zip(&subset.y).filter(|(a, b)| a == b).count();
    correct as f64 / rows.len() as f64
}

type CellResult = Result<(TrainedRun, f64), String>;

fn run_cell(
    config: &SuiteConfig,
    method: Method,
    hyper: Option<f64>,
    cip_lambda: f64,
    ctx: &SeedContext,
    frozen_proxy: Option<&LinearModel>,
) -> CellResult {
    let spec = method_spec(config, method, hyper, cip_lambda);
    let run = train_method_with_proxy(&spec, &ctx.spec, &ctx.data, ctx.seed, frozen_proxy)
        .map_err(|e| e.to_string())?;
    let target = ctx.data.last().expect("scenario has a target");
    let val_acc = accuracy_on_rows(&run.model, target, &ctx.val_rows);
    Ok((run, val_acc))
}

/// All cells of one method: `[grid index][seed index]`. Runs on the ambient
/// rayon pool. `proxies`, when given, holds one pre-trained per-seed proxy
/// model (from the conditional-invariance selection wave) that staged methods
/// reuse instead of retraining the identical model in every cell.
fn run_method_grid(
    config: &SuiteConfig,
    method: Method,
    grid: &[Option<f64>],
    cip_lambda: f64,
    contexts: &[SeedContext],
    proxies: Option<&[Option<LinearModel>]>,
) -> Vec<Vec<CellResult>> {
    let tasks: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..contexts.len()).map(move |s| (g, s)))
        .collect();
    let flat: Vec<CellResult> = tasks
        .par_iter()
        .map(|&(g, s)| {
            let frozen = proxies.and_then(|p| p[s].as_ref());
            run_cell(config, method, grid[g], cip_lambda, &contexts[s], frozen)
        })
        .collect();
    let mut out: Vec<Vec<CellResult>> = grid.iter().map(|_| Vec::new()).collect();
    for ((g, _), cell) in tasks.into_iter().zip(flat) {
        out[g].push(cell);
    }
    out
}

/// Pick the grid index with the highest mean validation accuracy over the
/// seeds where training succeeded. Grid values with no successful seed are
/// skipped; ties keep the earlier (smaller, since grids are sorted) value.
/// None when every grid value failed on every seed.
fn select_index(val_accs: &[Vec<Option<f64>>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (g, accs) in val_accs.iter().enumerate() {
        let ok: Vec<f64> = accs.iter().flatten().copied().collect();
        if ok.is_empty() {
            continue;
        }
        let mean = ok.iter().sum::<f64>() / ok.len() as f64;
        if best.map_or(true, |(_, b)| mean > b) {
            best = Some((g, mean));
        }
    }
    best.map(|(g, _)| g)
}

fn cell_val_accs(cells: &[Vec<CellResult>]) -> Vec<Vec<Option<f64>>> {
    cells
        .iter()
        .map(|row| row.iter().map(|c| c.as_ref().ok().map(|(_, v)| *v)).collect())
        .collect()
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Run every requested method over the seed list with grid-selected
/// hyperparameters, keeping per-seed runs and models for downstream reports.
///
/// The conditional-invariance method is trained first over the lambda grid;
/// its own table row reuses those runs, and methods with a
/// conditional-invariance pre-stage tune the pre-stage strength jointly with
/// their main penalty over the full grid product, reusing the wave's trained
/// models as frozen proxies.
pub fn run_suite_detailed(config: &SuiteConfig) -> Result<SuiteOutcome, SuiteError> {
    validate_config(config)?;
    if config.methods.is_empty() {
        return Ok(SuiteOutcome {
            table: ResultTable::default(),
            selections: Vec::new(),
            failed_cells: 0,
        });
    }
    let contexts = build_contexts(config)?;
    let pool = make_pool(config.jobs)?;
    pool.install(|| run_all(config, &contexts))
}

/// Convenience wrapper returning only the aggregated table.
pub fn run_suite(config: &SuiteConfig) -> Result<ResultTable, SuiteError> {
    run_suite_detailed(config).map(|outcome| outcome.table)
}

fn run_all(config: &SuiteConfig, contexts: &[SeedContext]) -> Result<SuiteOutcome, SuiteError> {
    let lambda_grid = sorted_grid(&config.lambda_grid);
    let eta_grid = sorted_grid(&config.eta_grid);
    let needs_cip = config
        .methods
        .iter()
        .any(|m| *m == Method::Cip || m.proxy() == Some(Method::Cip));

    let mut cip_cells: Option<Vec<Vec<CellResult>>> = None;
    let mut cip_proxies: Vec<Vec<Option<LinearModel>>> = Vec::new();
    if needs_cip {
        let grid = grid_values(Method::Cip, &lambda_grid, &eta_grid);
        let cells = run_method_grid(config, Method::Cip, &grid, 1.0, contexts, None);
        // Every wave cell doubles as a pre-stage model for the staged
        // methods: same method, penalty, lambda, seed, and data, so the
        // retrain it replaces would be bit-identical.
        cip_proxies = cells
            .iter()
            .map(|row| row.iter().map(|c| c.as_ref().ok().map(|(run, _)| run.model.clone())).collect())
            .collect();
        cip_cells = Some(cells);
    }

    let mut selections = Vec::with_capacity(config.methods.len());
    let mut rows = Vec::with_capacity(config.methods.len());
    let mut failed_cells = 0usize;
    for &method in &config.methods {
        // One entry per tried hyperparameter setting: the grid value of the
        // main penalty, the pre-stage strength where applicable, and the
        // resulting per-seed cells.
        let (hyper_of, proxy_of, cells): (Vec<Option<f64>>, Vec<Option<f64>>, Vec<Vec<CellResult>>) =
            if method == Method::Cip {
                let grid = grid_values(method, &lambda_grid, &eta_grid);
                let cells = cip_cells.clone().expect("needs_cip covers the plain method");
                let n = grid.len();
                (grid, vec![None; n], cells)
            } else if method.proxy() == Some(Method::Cip) {
                let main_grid = grid_values(method, &lambda_grid, &eta_grid);
                let (pairs, cells) =
                    run_joint_grid(config, method, &main_grid, &lambda_grid, &cip_proxies, contexts);
                let (hyper_of, proxy_of) =
                    pairs.into_iter().map(|(h, c)| (h, Some(c))).unzip();
                (hyper_of, proxy_of, cells)
            } else {
                let grid = grid_values(method, &lambda_grid, &eta_grid);
                let cells = run_method_grid(config, method, &grid, 1.0, contexts, None);
                let n = grid.len();
                (grid, vec![None; n], cells)
            };
        let best = select_index(&cell_val_accs(&cells)).unwrap_or(0);
        let chosen = &cells[best];

        let mut per_seed = Vec::with_capacity(contexts.len());
        let mut src = Vec::new();
        let mut tar = Vec::new();
        for (ctx, cell) in contexts.iter().zip(chosen.iter()) {
            match cell {
                Ok((run, val)) => {
                    src.push(run.metrics.src_acc * 100.0);
                    tar.push(run.metrics.tar_acc * 100.0);
                    per_seed.push(SeedCell {
                        seed: ctx.seed,
                        outcome: Ok(run.clone()),
                        validation_acc: Some(*val),
                    });
                }
                Err(message) => {
                    failed_cells += 1;
                    per_seed.push(SeedCell {
                        seed: ctx.seed,
                        outcome: Err(message.clone()),
                        validation_acc: None,
                    });
                }
            }
        }
        let (src_mean, src_sd) = mean_sd(&src);
        let (tar_mean, tar_sd) = mean_sd(&tar);
        rows.push(TableRow {
            method: method.name().to_string(),
            src_acc_mean: src_mean,
            src_acc_sd: src_sd,
            tar_acc_mean: tar_mean,
            tar_acc_sd: tar_sd,
        });
        selections.push(MethodSelection {
            method,
            chosen_hyper: hyper_of[best],
            proxy_lambda: proxy_of[best],
            per_seed,
        });
    }
    Ok(SuiteOutcome { table: ResultTable { rows }, selections, failed_cells })
}

/// All cells of one staged method over the product of its main grid and the
/// pre-stage strength grid. Pairs are ordered by (main value, pre-stage
/// value) ascending, so tie-breaking in selection prefers the smaller main
/// value first. `proxies[c][s]` is the wave model for pre-stage strength `c`
/// and seed position `s`.
fn run_joint_grid(
    config: &SuiteConfig,
    method: Method,
    main_grid: &[Option<f64>],
    cip_grid: &[f64],
    proxies: &[Vec<Option<LinearModel>>],
    contexts: &[SeedContext],
) -> (Vec<(Option<f64>, f64)>, Vec<Vec<CellResult>>) {
    let pairs: Vec<(usize, usize)> = (0..main_grid.len())
        .flat_map(|g| (0..cip_grid.len()).map(move |c| (g, c)))
        .collect();
    let tasks: Vec<(usize, usize)> = (0..pairs.len())
        .flat_map(|p| (0..contexts.len()).map(move |s| (p, s)))
        .collect();
    let flat: Vec<CellResult> = tasks
        .par_iter()
        .map(|&(p, s)| {
            let (g, c) = pairs[p];
            let frozen = proxies[c][s].as_ref();
            run_cell(config, method, main_grid[g], cip_grid[c], &contexts[s], frozen)
        })
        .collect();
    let mut cells: Vec<Vec<CellResult>> = pairs.iter().map(|_| Vec::new()).collect();
    for ((p, _), cell) in tasks.into_iter().zip(flat) {
        cells[p].push(cell);
    }
    let described: Vec<(Option<f64>, f64)> =
        pairs.into_iter().map(|(g, c)| (main_grid[g], cip_grid[c])).collect();
    (described, cells)
}

/// Render a table. CSV uses shortest-round-trip float formatting so a parse
/// of the output reproduces the table exactly; markdown rounds to one
/// decimal in the "mean±sd" style of the reference tables.
pub fn emit_table(table: &ResultTable, format: TableFormat) -> String {
    match format {
        TableFormat::Csv => {
            let mut out = String::from("method,src_acc_mean,src_acc_sd,tar_acc_mean,tar_acc_sd\n");
            for r in &table.rows {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    r.method, r.src_acc_mean, r.src_acc_sd, r.tar_acc_mean, r.tar_acc_sd
                )
                .expect("string write");
            }
            out
        }
        TableFormat::Json => {
            let mut out = serde_json::to_string_pretty(table).expect("table serializes");
            out.push('\n');
            out
        }
        TableFormat::Markdown => {
            let mut out = String::from("| Method | Source acc. | Target acc. |\n| --- | --- | --- |\n");
            for r in &table.rows {
                writeln!(
                    out,
                    "| {} | {:.1}\u{b1}{:.1} | {:.1}\u{b1}{:.1} |",
                    r.method, r.src_acc_mean, r.src_acc_sd, r.tar_acc_mean, r.tar_acc_sd
                )
                .expect("string write");
            }
            out
        }
    }
}

/// Parse a table back from its CSV rendering.
pub fn parse_table_csv(text: &str) -> Result<ResultTable, SuiteError> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l).unwrap_or("");
    if header != "method,src_acc_mean,src_acc_sd,tar_acc_mean,tar_acc_sd" {
        return Err(SuiteError::Parse { line: 1, message: format!("bad header `{header}`") });
    }
    let mut rows = Vec::new();
    for (ix, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(SuiteError::Parse {
                line: ix + 1,
                message: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let num = |j: usize| -> Result<f64, SuiteError> {
            fields[j].parse().map_err(|_| SuiteError::Parse {
                line: ix + 1,
                message: format!("bad number `{}`", fields[j]),
            })
        };
        rows.push(TableRow {
            method: fields[0].to_string(),
            src_acc_mean: num(1)?,
            src_acc_sd: num(2)?,
            tar_acc_mean: num(3)?,
            tar_acc_sd: num(4)?,
        });
    }
    Ok(ResultTable { rows })
}

/// One successful detection cell (a per-seed bound evaluation).
#[derive(Debug, Clone, Serialize)]
pub struct DetectRow {
    pub method: Method,
    pub lambda: f64,
    pub alpha: f64,
    pub seed: u64,
    pub accuracy_upper_bound: f64,
    pub actual_target_acc: f64,
    pub region_fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DetectionExperiment {
    pub rows: Vec<DetectRow>,
    pub csv: String,
    pub failures: Vec<String>,
    /// Penalty strength of the conditional-invariance proxy the bounds use.
    pub cip_lambda: f64,
}

/// Sweep the two marginal-matching methods over the lambda grid and evaluate
/// the target-risk bound at each confidence level against the actual target
/// accuracy, using a grid-selected conditional-invariance proxy per seed.
///
/// The bound assumes no label shift, so scenarios whose source and target
/// label distributions differ are rejected unless `force` is set.
pub fn run_detection_experiment(config: &SuiteConfig) -> Result<DetectionExperiment, SuiteError> {
    validate_config(config)?;
    let contexts = build_contexts(config)?;
    for ctx in &contexts {
        let target_probs = &ctx.spec.target_mechanism().label_probs;
        let shifted = ctx.spec.mechanisms[..ctx.spec.num_source_domains].iter().any(|m| {
            m.label_probs
                .iter()
                .zip(target_probs)
                .any(|(a, b)| (a - b).abs() > 1e-12)
        });
        if shifted && !config.force {
            return Err(SuiteError::Config(format!(
                "scenario `{}` has label shift between sources and target; the bound assumes \
                 none (pass force to run anyway)",
                ctx.spec.name
            )));
        }
    }

    let pool = make_pool(config.jobs)?;
    pool.install(|| detection_inner(config, &contexts))
}

fn detection_inner(
    config: &SuiteConfig,
    contexts: &[SeedContext],
) -> Result<DetectionExperiment, SuiteError> {
    let lambda_grid = sorted_grid(&config.lambda_grid);
    let eta_grid = sorted_grid(&config.eta_grid);

    // proxy stage: grid-select the conditional-invariance penalty strength
    let grid = grid_values(Method::Cip, &lambda_grid, &eta_grid);
    let cip_cells = run_method_grid(config, Method::Cip, &grid, 1.0, contexts, None);
    let best = select_index(&cell_val_accs(&cip_cells)).ok_or_else(|| {
        SuiteError::Config("proxy training failed on every lambda and seed".into())
    })?;
    let cip_lambda = grid[best].expect("lambda grid entries are Some");
    let proxies: Vec<Result<LinearModel, String>> = cip_cells[best]
        .iter()
        .map(|c| c.as_ref().map(|(run, _)| run.model.clone()).map_err(|e| e.clone()))
        .collect();
    let frozen: Vec<Option<LinearModel>> =
        proxies.iter().map(|r| r.as_ref().ok().cloned()).collect();

    // candidate stage: both marginal-matching methods over the whole grid
    let methods = [Method::Dip, Method::JointDip];
    let tasks: Vec<(usize, usize, usize)> = (0..methods.len())
        .flat_map(|m| {
            (0..lambda_grid.len())
                .flat_map(move |g| (0..contexts.len()).map(move |s| (m, g, s)))
        })
        .collect();
    let candidates: Vec<CellResult> = tasks
        .par_iter()
        .map(|&(m, g, s)| {
            let proxy = if methods[m].proxy() == Some(Method::Cip) {
                frozen[s].as_ref()
            } else {
                None
            };
            run_cell(config, methods[m], Some(lambda_grid[g]), cip_lambda, &contexts[s], proxy)
        })
        .collect();

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (&(m, g, s), cell) in tasks.iter().zip(&candidates) {
        let (method, lambda, ctx) = (methods[m], lambda_grid[g], &contexts[s]);
        let describe = |alpha: f64, err: &str| {
            format!("{} lambda {} alpha {} seed {}: {}", method, lambda, alpha, ctx.seed, err)
        };
        let proxy = match &proxies[s] {
            Ok(p) => p,
            Err(e) => {
                failures.push(format!("proxy seed {}: {}", ctx.seed, e));
                continue;
            }
        };
        let candidate = match cell {
            Ok((run, _)) => &run.model,
            Err(e) => {
                failures.push(describe(f64::NAN, e));
                continue;
            }
        };
        let source = &ctx.data[ctx.spec.dip_source_index - 1];
        let target = ctx.data.last().expect("scenario has a target");
        for &alpha in &config.alpha_list {
            match detection_report(candidate, proxy, source, target, alpha) {
                Ok(report) => rows.push(DetectRow {
                    method,
                    lambda,
                    alpha,
                    seed: ctx.seed,
                    accuracy_upper_bound: report.accuracy_upper_bound,
                    actual_target_acc: report.actual_target_acc.expect("labels supplied"),
                    region_fraction: report.region_fraction_target.expect("restricted"),
                }),
                Err(e) => failures.push(describe(alpha, &e.to_string())),
            }
        }
    }

    // deterministic ordering: method, lambda, alpha, seed
    rows.sort_by(|a, b| {
        a.method
            .name()
            .cmp(b.method.name())
            .then(a.lambda.total_cmp(&b.lambda))
            .then(a.alpha.total_cmp(&b.alpha))
            .then(a.seed.cmp(&b.seed))
    });
    let csv = detection_csv(&rows);
    Ok(DetectionExperiment { rows, csv, failures, cip_lambda })
}

fn detection_csv(rows: &[DetectRow]) -> String {
    let mut out =
        String::from("method,lambda,alpha,seed,accuracy_upper_bound,actual_target_acc,region_fraction\n");
    let mut group_start = 0;
    let flush_group = |out: &mut String, group: &[DetectRow]| {
        if group.is_empty() {
            return;
        }
        let mean = |f: fn(&DetectRow) -> f64| {
            group.iter().map(f).sum::<f64>() / group.len() as f64
        };
        writeln!(
            out,
            "{},{},{},mean,{},{},{}",
            group[0].method,
            group[0].lambda,
            group[0].alpha,
            mean(|r| r.accuracy_upper_bound),
            mean(|r| r.actual_target_acc),
            mean(|r| r.region_fraction)
        )
        .expect("string write");
    };
    for i in 0..rows.len() {
        let r = &rows[i];
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.method,
            r.lambda,
            r.alpha,
            r.seed,
            r.accuracy_upper_bound,
            r.actual_target_acc,
            r.region_fraction
        )
        .expect("string write");
        let group_over = match rows.get(i + 1) {
            Some(next) => {
                next.method != r.method || next.lambda != r.lambda || next.alpha != r.alpha
            }
            None => true,
        };
        if group_over {
            flush_group(&mut out, &rows[group_start..=i]);
            group_start = i + 1;
        }
    }
    out
}

/// Per-method mean of the coefficient column-block L1 norms over seeds.
#[derive(Debug, Clone, Serialize)]
pub struct GroupNormRow {
    pub method: Method,
    pub group: String,
    pub l1_mean: f64,
    pub l1_sd: f64,
}

/// Coordinate groups of the configured scenario (shared across seeds).
pub fn scenario_groups(config: &SuiteConfig) -> Result<Vec<CoordGroup>, SuiteError> {
    let seed = config.seeds.first().copied().unwrap_or(0);
    let mut rng = Rng::new(seed).substream(stream::SCENARIO);
    Ok(resolve_scenario(&config.scenario, &mut rng)?.coordinate_groups)
}

/// Aggregate coefficient group norms from a finished suite run.
pub fn aggregate_group_norms(outcome: &SuiteOutcome, groups: &[CoordGroup]) -> Vec<GroupNormRow> {
    let mut rows = Vec::new();
    for sel in &outcome.selections {
        let mut per_group: Vec<Vec<f64>> = groups.iter().map(|_| Vec::new()).collect();
        for cell in &sel.per_seed {
            if let Ok(run) = &cell.outcome {
                for (g, (_, norm)) in coordinate_group_norms(&run.model, groups).iter().enumerate()
                {
                    per_group[g].push(*norm);
                }
            }
        }
        for (g, group) in groups.iter().enumerate() {
            let (l1_mean, l1_sd) = mean_sd(&per_group[g]);
            rows.push(GroupNormRow {
                method: sel.method,
                group: group.name.clone(),
                l1_mean,
                l1_sd,
            });
        }
    }
    rows
}

pub fn group_norms_csv(rows: &[GroupNormRow]) -> String {
    let mut out = String::from("method,group,l1_mean,l1_sd\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.method, r.group, r.l1_mean, r.l1_sd).expect("string write");
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct DomainCountRow {
    pub num_sources: usize,
    pub chosen_lambda: f64,
    pub risk_diff_mean: f64,
    pub risk_diff_sd: f64,
}

/// How the gap between importance-weighted source risk and target risk
/// shrinks as source domains are added: for each M train the
/// conditional-invariance method on the binary preset with M sources and
/// report |target risk - mean weighted source risk| over seeds.
pub fn domain_count_study(
    config: &SuiteConfig,
    source_counts: &[usize],
) -> Result<Vec<DomainCountRow>, SuiteError> {
    validate_config(config)?;
    if source_counts.is_empty() {
        return Err(SuiteError::Config("source_counts must be non-empty".into()));
    }
    let pool = make_pool(config.jobs)?;
    pool.install(|| source_counts.iter().map(|&m| domain_count_point(config, m)).collect())
}

fn domain_count_point(config: &SuiteConfig, m: usize) -> Result<DomainCountRow, SuiteError> {
    let mut point_config = config.clone();
    point_config.scenario = format!("scm-binary-m{m}");
    let contexts = build_contexts(&point_config)?;
    let lambda_grid = sorted_grid(&config.lambda_grid);
    let grid = grid_values(Method::Cip, &lambda_grid, &config.eta_grid);
    let cells = run_method_grid(&point_config, Method::Cip, &grid, 1.0, &contexts, None);
    let best = select_index(&cell_val_accs(&cells)).ok_or_else(|| {
        SuiteError::Config(format!("training failed on every lambda and seed at M={m}"))
    })?;

    let mut diffs = Vec::new();
    for (ctx, cell) in contexts.iter().zip(&cells[best]) {
        if let Ok((run, _)) = cell {
            match weighted_risk_gap(&run.model, ctx) {
                Ok(diff) => diffs.push(diff),
                Err(e) => {
                    return Err(SuiteError::Config(format!(
                        "risk gap at M={m} seed {}: {e}",
                        ctx.seed
                    )))
                }
            }
        }
    }
    if diffs.is_empty() {
        return Err(SuiteError::Config(format!("no successful seed at M={m}")));
    }
    let (risk_diff_mean, risk_diff_sd) = mean_sd(&diffs);
    Ok(DomainCountRow {
        num_sources: m,
        chosen_lambda: grid[best].expect("lambda grid entries are Some"),
        risk_diff_mean,
        risk_diff_sd,
    })
}

/// |R_T(h) - (1/M) sum_m R_w^(m)(h)| in cross-entropy risk (the loss the
/// models are trained with), with per-class weights estimated from the
/// model's own confusion on each source. A model that is confidently wrong
/// on the target shows up much more strongly here than in accuracy.
fn weighted_risk_gap(model: &LinearModel, ctx: &SeedContext) -> Result<f64, String> {
    let target = ctx.data.last().expect("scenario has a target");
    let target_risk = cross_entropy_risk(model, target, None);
    let m = ctx.spec.num_source_domains;
    let mut sum = 0.0;
    for source in &ctx.data[..m] {
        let w = estimate_weights_from_data(model, source, &target.x).map_err(|e| e.to_string())?;
        sum += cross_entropy_risk(model, source, Some(&w));
    }
    Ok((target_risk - sum / m as f64).abs())
}

/// Mean cross-entropy over a dataset, each sample scaled by its class weight
/// when one is given.
fn cross_entropy_risk(model: &LinearModel, data: &Dataset, class_weights: Option<&[f64]>) -> f64 {
    let sample_weights: Vec<f64> = match class_weights {
        Some(w) => data.y.iter().map(|&y| w[y - 1]).collect(),
        None => vec![1.0; data.len()],
    };
    weighted_cross_entropy_and_grad(model, &data.x, &data.y, &sample_weights).0
}

pub fn domain_count_csv(rows: &[DomainCountRow]) -> String {
    let mut out = String::from("num_sources,chosen_lambda,risk_diff_mean,risk_diff_sd\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.num_sources, r.chosen_lambda, r.risk_diff_mean, r.risk_diff_sd)
            .expect("string write");
    }
    out
}
