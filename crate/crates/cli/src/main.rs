use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use kmeta::inference::{default_lambda_star, fit_target, MIN_TAU};
use kmeta::pretrain::pretrain;
use kmeta::rates::{classify_with_omega, gain_conditions, krr_optimal_lambda, RegimeReport, RegularityParams, GainReport, DEFAULT_OMEGA};
use kmeta::synthetic::{generate_world, SyntheticWorld, TaskId};
use kmeta::{SubspaceModel, TargetModel};
use kmeta_harness::report::fmt_real;
use kmeta_harness::{run_experiment, ExperimentConfig, LambdaChoice, RateReport};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "kmeta", version, about = "Kernel subspace meta-learning on synthetic worlds")]
struct Cli {
    /// Experiment config (TOML); the shipped default is used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seeds with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world.
    Synth(SynthArgs),
    /// Pretrain a subspace model on source tasks drawn from a world.
    Pretrain(PretrainArgs),
    /// Fit a target regressor in a learned subspace and predict.
    Infer(InferArgs),
    /// Regime, λ schedule and rate exponents for given regularity.
    Rates(RatesArgs),
    /// Run the configured sweep and write the CSV report.
    Experiment(ExperimentArgs),
    /// Summarize a CSV report: medians, slopes and failed cells.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Also draw this many target samples.
    #[arg(long, requires = "target_data")]
    target_samples: Option<usize>,
    /// Where to write the target samples (CSV).
    #[arg(long)]
    target_data: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    /// Saved world to draw source tasks from, instead of generating one.
    #[arg(long)]
    world: Option<PathBuf>,
    /// Number of source tasks; defaults to the first swept N.
    #[arg(long = "tasks")]
    n_tasks: Option<usize>,
    /// Per-half samples per task; defaults to the first swept n.
    #[arg(long)]
    n: Option<usize>,
    /// Pretraining λ; defaults to the first swept value.
    #[arg(long)]
    lambda: Option<f64>,
    /// Subspace dimension; defaults to the first swept s.
    #[arg(long)]
    s: Option<usize>,
    /// Omit the first-half regressors from the saved model.
    #[arg(long)]
    compact: bool,
}

#[derive(Args)]
struct InferArgs {
    /// Pretrained subspace model (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Target samples: CSV with input columns followed by a label column.
    #[arg(long)]
    target_data: PathBuf,
    /// Inputs to predict at (CSV, input columns only); defaults to the
    /// target inputs.
    #[arg(long)]
    query: Option<PathBuf>,
    /// Target ridge λ*; defaults to the theoretical schedule.
    #[arg(long)]
    lambda_star: Option<f64>,
    #[arg(long, default_value_t = MIN_TAU)]
    tau: f64,
    /// Also save the fitted target model (JSON).
    #[arg(long)]
    save_model: Option<PathBuf>,
}

#[derive(Args)]
struct RatesArgs {
    #[arg(long)]
    r: f64,
    #[arg(long)]
    p: f64,
    /// Embedding index; defaults to p.
    #[arg(long)]
    alpha: Option<f64>,
    /// Per-task sample count.
    #[arg(long)]
    n: f64,
    /// Number of source tasks.
    #[arg(long = "N")]
    n_tasks: f64,
    #[arg(long, default_value_t = DEFAULT_OMEGA)]
    omega: f64,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Summary output; defaults to `<out>.summary.toml` when --out is set.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// CSV report written by `experiment`.
    input: PathBuf,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(k) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(k).build_global().context("configuring threads")?;
    }
    match &cli.command {
        Command::Synth(a) => synth(&cli, a),
        Command::Pretrain(a) => pretrain_cmd(&cli, a),
        Command::Infer(a) => infer(&cli, a),
        Command::Rates(a) => rates(&cli, a),
        Command::Experiment(a) => experiment(&cli, a),
        Command::Report(a) => report(&cli, a),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default_config(),
    };
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    Ok(config)
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => fs::write(path, bytes).with_context(|| format!("writing {}", path.display())),
        None => io::stdout().write_all(bytes).context("writing stdout"),
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut text = serde_json::to_vec_pretty(v)?;
    text.push(b'\n');
    Ok(text)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn world_for(config: &ExperimentConfig) -> Result<SyntheticWorld> {
    Ok(generate_world(&config.world_config(config.seeds[0])?)?)
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let config = load_config(cli)?;
    let world = world_for(&config)?;
    if let (Some(m), Some(path)) = (a.target_samples, &a.target_data) {
        let (x, y) = world.sample_task(TaskId::Target, m, 0)?;
        fs::write(path, matrix_csv(&x, Some(("y", &y)))).with_context(|| format!("writing {}", path.display()))?;
    }
    emit(cli.out.as_deref(), &to_json(&world)?)
}

fn pretrain_cmd(cli: &Cli, a: &PretrainArgs) -> Result<()> {
    let config = load_config(cli)?;
    let world = match &a.world {
        Some(path) => read_json::<SyntheticWorld>(path)?,
        None => world_for(&config)?,
    };
    let sw = &config.sweep;
    let n_tasks = a.n_tasks.unwrap_or(sw.n_tasks[0]);
    let n = a.n.unwrap_or(sw.n[0]);
    let s = a.s.unwrap_or(sw.s[0]);
    let lambda = match a.lambda {
        Some(v) => v,
        None => match sw.lambda[0] {
            LambdaChoice::Fixed(v) => v,
            LambdaChoice::Regime => {
                kmeta::rates::classify_regime(&config.regularity_params()?, n as f64, n_tasks as f64)?.lambda
            }
            LambdaChoice::Krr => krr_optimal_lambda(&config.regularity_params()?, n as f64)?,
        },
    };
    let data = world.source_tasks(n_tasks, n, 0)?;
    let model = pretrain(world.kernel(), &data, lambda, s)?;
    let model = if a.compact { model.without_first_halves() } else { model };
    emit(cli.out.as_deref(), &to_json(&model)?)
}

fn infer(cli: &Cli, a: &InferArgs) -> Result<()> {
    let model: SubspaceModel<f64> = read_json(&a.model)?;
    let (x, y) = read_labeled(&a.target_data, model.dim())?;
    let lambda_star = match a.lambda_star {
        Some(v) => v,
        None => {
            let star = default_lambda_star(model.s(), x.nrows(), model.kernel().kappa_sq(), a.tau)?;
            if !star.sample_size_ok {
                eprintln!("warning: n_T = {} is below the sample size the default λ* assumes", x.nrows());
            }
            star.value
        }
    };
    let target: TargetModel<f64> = fit_target(Arc::new(model), &x, &y, lambda_star)?;
    if let Some(path) = &a.save_model {
        fs::write(path, to_json(&target)?).with_context(|| format!("writing {}", path.display()))?;
    }
    let query = match &a.query {
        Some(path) => read_inputs(path, x.ncols())?,
        None => x,
    };
    let pred = target.predict(&query)?;
    emit(cli.out.as_deref(), matrix_csv(&query, Some(("prediction", &pred))).as_bytes())
}

#[derive(Serialize)]
struct RatesOutput {
    r: f64,
    p: f64,
    alpha: f64,
    n: f64,
    #[serde(rename = "N")]
    n_tasks: f64,
    krr_lambda: f64,
    regime: RegimeReport,
    gain: GainReport,
}

fn rates(cli: &Cli, a: &RatesArgs) -> Result<()> {
    let params = RegularityParams::new(a.r, a.p, a.alpha.unwrap_or(a.p))?;
    let out = RatesOutput {
        r: params.r,
        p: params.p,
        alpha: params.alpha,
        n: a.n,
        n_tasks: a.n_tasks,
        krr_lambda: krr_optimal_lambda(&params, a.n)?,
        regime: classify_with_omega(&params, a.n, a.n_tasks, a.omega)?,
        gain: gain_conditions(&params, a.n)?,
    };
    emit(cli.out.as_deref(), toml::to_string(&out)?.as_bytes())
}

fn experiment(cli: &Cli, a: &ExperimentArgs) -> Result<()> {
    let config = load_config(cli)?;
    let report = run_experiment(&config)?;
    let out = cli.out.clone().or_else(|| config.output.as_ref().map(PathBuf::from));
    emit(out.as_deref(), report.to_csv_string().as_bytes())?;
    let summary_path = a.summary.clone().or_else(|| {
        out.as_ref().map(|p| {
            let mut name = p.file_stem().unwrap_or_default().to_os_string();
            name.push(".summary.toml");
            p.with_file_name(name)
        })
    });
    let summary = report.summary();
    if let Some(path) = summary_path {
        fs::write(&path, summary.to_toml()).with_context(|| format!("writing {}", path.display()))?;
    }
    if !summary.failed.is_empty() {
        eprintln!("{} of {} records failed", summary.failed.len(), summary.records);
    }
    Ok(())
}

fn report(cli: &Cli, a: &ReportArgs) -> Result<()> {
    let file = fs::File::open(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let report = RateReport::read_csv(file)?;
    emit(cli.out.as_deref(), report.summary().to_toml().as_bytes())
}

/// Rows of `x` as `x0,…,x{d-1}` plus an optional trailing column.
fn matrix_csv(x: &DMatrix<f64>, extra: Option<(&str, &DVector<f64>)>) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let mut header: Vec<String> = (0..x.ncols()).map(|j| format!("x{j}")).collect();
    if let Some((name, _)) = extra {
        header.push(name.to_string());
    }
    w.write_record(&header).expect("in-memory write");
    for i in 0..x.nrows() {
        let mut row: Vec<String> = x.row(i).iter().map(|&v| fmt_real(v)).collect();
        if let Some((_, col)) = extra {
            row.push(fmt_real(col[i]));
        }
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rd = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .with_context(|| format!("{}: row {} is not numeric", path.display(), i + 1))?;
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("{} has no data rows", path.display());
    }
    Ok(rows)
}

fn read_labeled(path: &Path, dim: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let rows = read_rows(path)?;
    if rows.iter().any(|r| r.len() != dim + 1) {
        bail!("{} must have {} input columns and one label column", path.display(), dim);
    }
    let x = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]);
    let y = DVector::from_fn(rows.len(), |i, _| rows[i][dim]);
    Ok((x, y))
}

fn read_inputs(path: &Path, dim: usize) -> Result<DMatrix<f64>> {
    let rows = read_rows(path)?;
    if rows.iter().any(|r| r.len() != dim) {
        bail!("{} must have {} input columns", path.display(), dim);
    }
    Ok(DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]))
}
