use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Map, Value};

use covloss::baselines::{brute_force_optimal, epsnet_partition, kmeans_partition};
use covloss::distribution::{snap_to_grid_indexed, unit_ball_scale};
use covloss::io::{read_csv_path, write_csv_path};
use covloss::partition::synthetic_data_for_rows;
use covloss::{
    build_partition, covariance_loss, equalize_min_cell_size, pin_partition, EmpiricalDistribution,
    GeneralConfig, Partition, PinningConfig,
};

const SCHEMA: u32 = 1;

/// Covariance-preserving clustering and k-anonymous synthetic data.
#[derive(Parser)]
#[command(name = "covloss", version)]
struct Cli {
    /// Log progress and warnings to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition the data and write a JSON report.
    Partition {
        #[command(flatten)]
        run: RunArgs,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also report tensor losses of these orders (1-4).
        #[arg(long, value_delimiter = ',')]
        tensor_orders: Vec<usize>,
    },
    /// Replace every row by the mean of its cell, merging small cells first.
    Synthesize {
        #[command(flatten)]
        run: RunArgs,
        /// Minimum rows per cell: `auto` for ⌊n/k⌋, or an integer.
        #[arg(long, default_value = "auto")]
        min_cell: MinCell,
        /// Synthetic CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Also write a JSON summary here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Loss over a grid of k values, algorithms and seeds.
    Sweep {
        #[command(flatten)]
        input: InputArgs,
        /// Comma-separated cluster budgets.
        #[arg(long, value_delimiter = ',', required = true)]
        k_list: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "general")]
        algos: Vec<Algo>,
        /// Number of seeds per (algorithm, k).
        #[arg(long, default_value_t = 32)]
        seeds: u64,
        /// First seed; run `i` uses `seed + i`.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        tuning: Tuning,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exhaustive optimum for tiny supports (at most 10 points).
    Oracle {
        #[command(flatten)]
        input: InputArgs,
        /// Cluster budget.
        #[arg(long)]
        k: usize,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct InputArgs {
    /// CSV file, one row per point.
    #[arg(long)]
    input: PathBuf,
    /// The last CSV column holds point weights.
    #[arg(long)]
    weights: bool,
    /// Divide all rows by the largest row norm when it exceeds 1.
    #[arg(long)]
    rescale: bool,
    /// Omit version and timestamp so identical runs give identical bytes.
    #[arg(long)]
    no_meta: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Maximum number of cells.
    #[arg(long)]
    k: usize,
    #[arg(long, value_enum, default_value = "general")]
    algo: Algo,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    tuning: Tuning,
}

#[derive(Args, Clone)]
struct Tuning {
    /// Constant of the reduced dimension `c log k`, in (0, 1/120).
    #[arg(long)]
    c: Option<f64>,
    /// Use the asymptotic constants instead of the practical ones.
    #[arg(long)]
    paper_mode: bool,
    /// Record per-cube rounding audits.
    #[arg(long)]
    audit: bool,
    /// Attempts before giving up: pinning redraws above its threshold,
    /// the general clusterer reseeds on budget overflow.
    #[arg(long, default_value_t = 16)]
    retries: usize,
    /// Lloyd iterations for k-means.
    #[arg(long, default_value_t = 50)]
    iters: usize,
    /// Cluster a grid-snapped copy of the data: `auto` for a spacing of γ/8
    /// (γ the general clusterer's cube side), or an explicit spacing.
    /// Losses and synthetic rows still use the original points.
    #[arg(long)]
    snap: Option<Snap>,
}

#[derive(Clone, Copy, Debug)]
enum Snap {
    Auto,
    Spacing(f64),
}

impl FromStr for Snap {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "auto" => Ok(Self::Auto),
            _ => s
                .parse()
                .map(Self::Spacing)
                .map_err(|_| format!("expected `auto` or a grid spacing, got `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Algo {
    Pinning,
    General,
    Kmeans,
    Epsnet,
}

#[derive(Clone, Copy, Debug)]
enum MinCell {
    Auto,
    Rows(usize),
}

impl FromStr for MinCell {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "auto" => Ok(Self::Auto),
            _ => s
                .parse()
                .map(Self::Rows)
                .map_err(|_| format!("expected `auto` or a row count, got `{s}`")),
        }
    }
}

struct Input {
    dist: EmpiricalDistribution,
    /// Support index of every CSV row; `None` for zero-weight rows.
    row_support: Vec<Option<usize>>,
    scale: f64,
    header: Option<Vec<String>>,
}

impl Input {
    fn summary(&self) -> Value {
        json!({
            "rows": self.row_support.len(),
            "support": self.dist.len(),
            "dim": self.dist.dim(),
            "scale": self.scale,
        })
    }
}

fn load(args: &InputArgs) -> Result<Input> {
    let csv = read_csv_path(&args.input, args.weights)?;
    let mut rows = csv.rows;
    let scale = if args.rescale { unit_ball_scale(&rows) } else { 1.0 };
    if scale != 1.0 {
        rows.iter_mut().flatten().for_each(|v| *v /= scale);
    }
    let (dist, row_support) = EmpiricalDistribution::from_rows_indexed(&rows, csv.weights.as_deref())
        .with_context(|| format!("reading {}", args.input.display()))?;
    Ok(Input {
        dist,
        row_support,
        scale,
        header: csv.header.filter(|h| !args.weights || h.len() > 1).map(|mut h| {
            if args.weights {
                h.pop();
            }
            h
        }),
    })
}

struct Run {
    partition: Partition,
    details: Map<String, Value>,
}

fn general_config(k: usize, seed: u64, t: &Tuning) -> GeneralConfig {
    let mut cfg = GeneralConfig::new(k, seed);
    cfg.practical_mode = !t.paper_mode;
    cfg.audit = t.audit;
    if let Some(c) = t.c {
        cfg.c = c;
    }
    cfg
}

/// Runs `algo`, on a snapped copy of the support when `--snap` is given,
/// and returns labels for the original support.
fn cluster(dist: &EmpiricalDistribution, algo: Algo, k: usize, seed: u64, t: &Tuning) -> Result<Run> {
    let spacing = match t.snap {
        None => return run_algo(dist, algo, k, seed, t),
        Some(_) if algo == Algo::Pinning => {
            log::warn!("--snap ignored for pinning: it would move points off the cube");
            return run_algo(dist, algo, k, seed, t);
        }
        Some(Snap::Spacing(e)) => e,
        Some(Snap::Auto) => {
            let cfg = general_config(k, seed, t);
            cfg.gamma(cfg.target_dim().min(dist.dim()).max(1)) / 8.0
        }
    };
    let (snapped, map) = snap_to_grid_indexed(dist, spacing)?;
    let mut run = run_algo(&snapped, algo, k, seed, t)?;
    let labels = map.iter().map(|&j| run.partition.label(j)).collect();
    run.partition = Partition::new(labels, k)?;
    run.details.insert("snap".into(), json!({"spacing": spacing, "support": snapped.len()}));
    Ok(run)
}

fn run_algo(dist: &EmpiricalDistribution, algo: Algo, k: usize, seed: u64, t: &Tuning) -> Result<Run> {
    let mut details = Map::new();
    let partition = match algo {
        Algo::Pinning => {
            let cfg = PinningConfig {
                max_retries: t.retries.max(1),
                ..PinningConfig::new(k, seed)
            };
            let out = pin_partition(dist, &cfg)?;
            details.insert("t".into(), json!(out.t));
            details.insert("S".into(), json!(out.pinned));
            details.insert("attempts".into(), json!(out.attempts));
            details.insert("accepted".into(), json!(out.accepted));
            details.insert("threshold".into(), json!(out.threshold));
            out.partition
        }
        Algo::General => {
            let mut cfg = general_config(k, seed, t);
            let mut attempt = 0;
            let out = loop {
                match build_partition(dist, &cfg) {
                    Err(covloss::Error::BudgetExceeded { .. }) if attempt + 1 < t.retries => {
                        attempt += 1;
                        cfg.seed = seed.wrapping_add(attempt as u64);
                        log::warn!("cluster budget exceeded; retrying with seed {}", cfg.seed);
                    }
                    other => break other?,
                }
            };
            details.insert("attempts".into(), json!(attempt + 1));
            details.insert("diagnostics".into(), serde_json::to_value(&out.diagnostics)?);
            out.partition
        }
        Algo::Kmeans => kmeans_partition(dist, k, seed, t.iters)?,
        Algo::Epsnet => epsnet_partition(dist, k)?,
    };
    Ok(Run { partition, details })
}

fn header(command: &str, no_meta: bool) -> Map<String, Value> {
    let mut out = Map::new();
    out.insert("schema".into(), json!(SCHEMA));
    out.insert("command".into(), json!(command));
    if !no_meta {
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        out.insert(
            "meta".into(),
            json!({"version": env!("CARGO_PKG_VERSION"), "timestamp": secs}),
        );
    }
    out
}

fn emit(value: &Map<String, Value>, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn partition_cmd(run: &RunArgs, out: Option<&Path>, orders: &[usize]) -> Result<()> {
    let input = load(&run.input)?;
    let result = cluster(&input.dist, run.algo, run.k, run.seed, &run.tuning)?;
    let report = covariance_loss(&input.dist, &result.partition, orders)?;
    let mut doc = header("partition", run.input.no_meta);
    doc.insert("algo".into(), json!(run.algo));
    doc.insert("k".into(), json!(run.k));
    doc.insert("seed".into(), json!(run.seed));
    doc.insert("input".into(), input.summary());
    doc.insert("loss".into(), json!(report.loss_frobenius));
    doc.insert("trivial_loss".into(), json!(report.trivial_loss()));
    doc.extend(result.details);
    doc.insert("report".into(), serde_json::to_value(&report)?);
    doc.insert("partition".into(), serde_json::to_value(&result.partition)?);
    emit(&doc, out)
}

fn synthesize_cmd(run: &RunArgs, min_cell: MinCell, out: &Path, report_path: Option<&Path>) -> Result<()> {
    let input = load(&run.input)?;
    let dist = &input.dist;
    let result = cluster(dist, run.algo, run.k, run.seed, &run.tuning)?;
    let rows: usize = dist.row_counts()?.iter().sum();
    let min_count = match min_cell {
        MinCell::Auto => rows / run.k.max(1),
        MinCell::Rows(r) => r,
    };
    let before = covariance_loss(dist, &result.partition, &[])?;
    let equalized = equalize_min_cell_size(dist, &result.partition, min_count)?;
    let after = covariance_loss(dist, &equalized, &[])?;

    let row_support: Vec<usize> = input.row_support.iter().flatten().copied().collect();
    let synth = synthetic_data_for_rows(dist, &equalized, &row_support)?;
    if synth.anonymity_level < min_count {
        bail!(
            "internal error: anonymity {} below the requested {min_count}",
            synth.anonymity_level
        );
    }
    let scaled: Vec<Vec<f64>> = synth
        .rows
        .iter()
        .map(|r| r.iter().map(|v| v * input.scale).collect())
        .collect();
    write_csv_path(out, input.header.as_deref(), &scaled)?;

    let mean_error = synth
        .mean()
        .iter()
        .zip(dist.mean())
        .map(|(a, b)| (a - b).abs() * input.scale)
        .fold(0.0, f64::max);
    let mut doc = header("synthesize", run.input.no_meta);
    doc.insert("algo".into(), json!(run.algo));
    doc.insert("k".into(), json!(run.k));
    doc.insert("seed".into(), json!(run.seed));
    doc.insert("input".into(), input.summary());
    doc.insert("min_cell".into(), json!(min_count));
    doc.insert("anonymity_level".into(), json!(synth.anonymity_level));
    doc.insert("cell_sizes".into(), json!(synth.cell_sizes));
    doc.insert("rows_written".into(), json!(synth.rows.len()));
    doc.insert("loss_before_merge".into(), json!(before.loss_frobenius));
    doc.insert("loss".into(), json!(after.loss_frobenius));
    doc.insert("trivial_loss".into(), json!(after.trivial_loss()));
    doc.insert("mean_error".into(), json!(mean_error));
    doc.extend(result.details);
    match report_path {
        Some(p) => emit(&doc, Some(p)),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct SweepRun {
    algo: Algo,
    k: usize,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cells: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

fn sweep_cmd(
    input_args: &InputArgs,
    ks: &[usize],
    algos: &[Algo],
    seeds: u64,
    base: u64,
    tuning: &Tuning,
    out: Option<&Path>,
) -> Result<()> {
    let input = load(input_args)?;
    let jobs: Vec<(Algo, usize, u64)> = algos
        .iter()
        .flat_map(|&a| ks.iter().flat_map(move |&k| (0..seeds).map(move |s| (a, k, base.wrapping_add(s)))))
        .collect();
    let runs: Vec<SweepRun> = jobs
        .par_iter()
        .map(|&(algo, k, seed)| {
            let outcome = cluster(&input.dist, algo, k, seed, tuning).and_then(|r| {
                let loss = covariance_loss(&input.dist, &r.partition, &[])?.loss_frobenius;
                Ok((loss, r.partition.cell_count()))
            });
            match outcome {
                Ok((loss, cells)) => SweepRun { algo, k, seed, loss: Some(loss), cells: Some(cells), error: None },
                Err(e) => SweepRun { algo, k, seed, loss: None, cells: None, error: Some(format!("{e:#}")) },
            }
        })
        .collect();

    let mut summary = Vec::new();
    for &algo in algos {
        for &k in ks {
            let mut losses: Vec<f64> = runs
                .iter()
                .filter(|r| r.algo == algo && r.k == k)
                .filter_map(|r| r.loss)
                .collect();
            losses.sort_by(f64::total_cmp);
            let mut row = json!({"algo": algo, "k": k, "runs": losses.len()});
            if !losses.is_empty() {
                row["median"] = json!(median(&losses));
                row["mean"] = json!(losses.iter().sum::<f64>() / losses.len() as f64);
                row["min"] = json!(losses[0]);
                row["max"] = json!(losses[losses.len() - 1]);
            }
            summary.push(row);
        }
    }
    let mut doc = header("sweep", input_args.no_meta);
    doc.insert("input".into(), input.summary());
    doc.insert("summary".into(), json!(summary));
    doc.insert("runs".into(), serde_json::to_value(&runs)?);
    emit(&doc, out)
}

fn oracle_cmd(input_args: &InputArgs, k: usize, out: Option<&Path>) -> Result<()> {
    let input = load(input_args)?;
    let (partition, loss) = brute_force_optimal(&input.dist, k)?;
    let mut doc = header("oracle", input_args.no_meta);
    doc.insert("k".into(), json!(k));
    doc.insert("input".into(), input.summary());
    doc.insert("loss".into(), json!(loss));
    doc.insert("partition".into(), serde_json::to_value(&partition)?);
    emit(&doc, out)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Partition { run, out, tensor_orders } => partition_cmd(run, out.as_deref(), tensor_orders),
        Command::Synthesize { run, min_cell, out, report } => {
            synthesize_cmd(run, *min_cell, out, report.as_deref())
        }
        Command::Sweep { input, k_list, algos, seeds, seed, tuning, out } => {
            sweep_cmd(input, k_list, algos, *seeds, *seed, tuning, out.as_deref())
        }
        Command::Oracle { input, k, out } => oracle_cmd(input, *k, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Error
        })
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let budget = e
                .chain()
                .filter_map(|c| c.downcast_ref::<covloss::Error>())
                .any(|c| matches!(c, covloss::Error::BudgetExceeded { .. }));
            ExitCode::from(if budget { 2 } else { 1 })
        }
    }
}
