//! File-based experiment pipeline: generate datasets, train NeuralRR, and
//! evaluate mechanisms, each step leaving a manifest next to its outputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use nrr_core::data::{generate_dataset, Dataset, Labeler};
use nrr_core::metrics::{
    evaluate, kendall_tau, mean_valuation_order, rank_pairs, write_csv, EvalSummary, MaxWelfare,
    Mechanism, NeuralRr, RoundRobin,
};
use nrr_core::model::nrr_order;
use nrr_core::soft::soft_rr_matrix;
use nrr_core::{
    round_robin, train, AgentPermutation, Matrix, NrrParams, RngStream, Temperature, TrainConfig,
    ValuationProfile,
};

pub const LOG_ENV: &str = "NRR_LOG";

#[derive(Debug, Parser)]
#[command(name = "nrr", version, about = "Learn and evaluate Round Robin agent orders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic dataset.
    Gen(GenArgs),
    /// Train NeuralRR over the temperature grid.
    Train(TrainArgs),
    /// Evaluate a mechanism on one or more datasets.
    Eval(EvalArgs),
    /// Compare SoftRR against Round Robin across temperatures.
    Converge(ConvergeArgs),
    /// Compare learned agent orders with mean-valuation orders.
    Orders(OrdersArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub agents: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub goods: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub count: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "muw")]
    pub labeler: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 3)]
    pub rank: usize,
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.1,0.01")]
    pub tau_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.1,0.01")]
    pub tau_prime_grid: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for the checkpoint, report, and loss curve.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Rr,
    Muw,
    Nrr,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub model: ModelKind,
    #[arg(long, required_if_eq("model", "nrr"))]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ConvergeArgs {
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub agents: u64,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    pub goods: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.05,0.001")]
    pub taus: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OrdersArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Record of one command invocation.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a, C: Serialize> {
    pub command: &'a str,
    pub config: &'a C,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    pub version: &'a str,
    pub duration_secs: f64,
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

/// Writes through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// `<artifact>.manifest.json`
pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut p = artifact.as_os_str().to_owned();
    p.push(".manifest.json");
    PathBuf::from(p)
}

fn write_manifest<C: Serialize>(
    at: &Path,
    command: &str,
    config: &C,
    inputs: &[&Path],
    outputs: &[&Path],
    seed: Option<u64>,
    started: Instant,
) -> Result<()> {
    let manifest = RunManifest {
        command,
        config,
        inputs: inputs.iter().map(|p| display(p)).collect(),
        outputs: outputs.iter().map(|p| display(p)).collect(),
        seed,
        version: env!("CARGO_PKG_VERSION"),
        duration_secs: started.elapsed().as_secs_f64(),
    };
    write_atomic(at, (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes())
}

fn load_data(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<NrrParams> {
    NrrParams::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn check_rank(params: &NrrParams, data: &Dataset, path: &Path) -> Result<()> {
    let limit = data.agents().min(data.goods());
    if params.rank > limit {
        bail!(
            "checkpoint rank {} is incompatible with {} ({}x{} profiles)",
            params.rank,
            path.display(),
            data.agents(),
            data.goods()
        );
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a).map(|digest| println!("{digest}")),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Converge(a) => cmd_converge(&a).map(|_| ()),
        Command::Orders(a) => cmd_orders(&a).map(|_| ()),
    }
}

/// Returns the SHA-256 digest of the written dataset.
pub fn cmd_gen(args: &GenArgs) -> Result<String> {
    let started = Instant::now();
    let labeler: Labeler = args.labeler.parse()?;
    let ds = generate_dataset(
        args.agents as usize,
        args.goods as usize,
        args.count as usize,
        args.seed,
        labeler,
    )?;
    write_atomic(&args.out, ds.to_json()?.as_bytes())?;
    log::info!(
        "wrote {} samples to {} ({} row redraws)",
        ds.len(),
        args.out.display(),
        ds.meta.resample_count
    );
    write_manifest(&manifest_path(&args.out), "gen", args, &[], &[&args.out], Some(args.seed), started)?;
    Ok(ds.digest()?)
}

pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub report: PathBuf,
    pub loss_curve: PathBuf,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutputs> {
    let started = Instant::now();
    let train_set = load_data(&args.train)?;
    let val_set = load_data(&args.val)?;
    if train_set.agents() != val_set.agents() || train_set.goods() != val_set.goods() {
        bail!(
            "training set is {}x{} but validation set is {}x{}",
            train_set.agents(),
            train_set.goods(),
            val_set.agents(),
            val_set.goods()
        );
    }
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        learning_rate: args.lr,
        lambda: args.lambda,
        tau_grid: args.tau_grid.clone(),
        tau_prime_grid: args.tau_prime_grid.clone(),
        seed: args.seed,
        rank: args.rank,
    };
    let (params, mut report) = train(&train_set, &val_set, &config)?;
    let out = TrainOutputs {
        checkpoint: args.out.join("checkpoint.json"),
        report: args.out.join("report.json"),
        loss_curve: args.out.join("loss_curve.csv"),
    };
    report.checkpoint = Some(display(&out.checkpoint));
    write_atomic(&out.checkpoint, (params.to_json()? + "\n").as_bytes())?;
    write_atomic(&out.report, report.to_json()?.as_bytes())?;
    let mut curve = Vec::new();
    report.write_loss_curve(&mut curve)?;
    write_atomic(&out.loss_curve, &curve)?;
    log::info!(
        "selected tau={} tau'={} with validation HD {:.4}",
        report.selected_tau,
        report.selected_tau_prime,
        report.selected_val_hd
    );
    write_manifest(
        &args.out.join("manifest.json"),
        "train",
        args,
        &[&args.train, &args.val],
        &[&out.checkpoint, &out.report, &out.loss_curve],
        Some(args.seed),
        started,
    )?;
    Ok(out)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<Vec<EvalSummary>> {
    let started = Instant::now();
    let model: Box<dyn Mechanism> = match args.model {
        ModelKind::Rr => Box::new(RoundRobin),
        ModelKind::Muw => Box::new(MaxWelfare),
        ModelKind::Nrr => {
            let Some(path) = &args.checkpoint else {
                bail!("--model nrr needs --checkpoint");
            };
            Box::new(NeuralRr(load_checkpoint(path)?))
        }
    };
    let mut summaries = Vec::with_capacity(args.data.len());
    for path in &args.data {
        let ds = load_data(path)?;
        if let (ModelKind::Nrr, Some(ck)) = (args.model, &args.checkpoint) {
            check_rank(&load_checkpoint(ck)?, &ds, path)?;
        }
        let s = evaluate(model.as_ref(), &ds).with_context(|| format!("evaluating on {}", path.display()))?;
        log::info!(
            "{} on {}: hd {:.4}, ef1 {:.3}, uwloss {:.4}",
            s.model,
            path.display(),
            s.hd_mean,
            s.ef1_ratio,
            s.uwloss_mean
        );
        summaries.push(s);
    }
    let mut csv = Vec::new();
    write_csv(&mut csv, &summaries)?;
    write_atomic(&args.out, &csv)?;
    let mut inputs: Vec<&Path> = args.data.iter().map(PathBuf::as_path).collect();
    if let Some(ck) = &args.checkpoint {
        inputs.push(ck);
    }
    write_manifest(&manifest_path(&args.out), "eval", args, &inputs, &[&args.out], None, started)?;
    Ok(summaries)
}

#[derive(Debug, Serialize)]
pub struct ConvergeRun {
    pub tau: f64,
    pub soft_rr: Vec<Vec<f64>>,
    /// Largest entry-wise gap to the Round Robin matrix.
    pub deviation: f64,
    /// Mean entry-wise gap to the Round Robin matrix.
    pub mean_deviation: f64,
}

#[derive(Debug, Serialize)]
pub struct ConvergeReport {
    pub agents: usize,
    pub goods: usize,
    pub seed: u64,
    pub valuations: Vec<Vec<f64>>,
    pub round_robin: Vec<Vec<f64>>,
    pub runs: Vec<ConvergeRun>,
}

/// Profile with entries uniform in `[0, 1)`.
pub fn unit_profile(n: usize, m: usize, seed: u64) -> Result<ValuationProfile> {
    let mut rng = RngStream::new(seed);
    let data = (0..n * m).map(|_| rng.unit()).collect();
    Ok(ValuationProfile::new(Matrix::from_vec(n, m, data)?)?)
}

pub fn cmd_converge(args: &ConvergeArgs) -> Result<ConvergeReport> {
    let started = Instant::now();
    if args.taus.is_empty() {
        bail!("--taus needs at least one temperature");
    }
    let taus = args
        .taus
        .iter()
        .map(|&t| Temperature::new(t))
        .collect::<nrr_core::Result<Vec<_>>>()?;
    let (n, m) = (args.agents as usize, args.goods as usize);
    let v = unit_profile(n, m, args.seed)?;
    let exact = round_robin(&v).to_matrix();
    let mut runs = Vec::with_capacity(taus.len());
    for tau in taus {
        let soft = soft_rr_matrix(&v, tau)?;
        let deviation = soft.max_abs_diff(&exact);
        let mean_deviation = soft
            .as_slice()
            .iter()
            .zip(exact.as_slice())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / (n * m) as f64;
        log::info!("tau {}: max deviation {deviation:.3e}, mean {mean_deviation:.3e}", tau.get());
        runs.push(ConvergeRun {
            tau: tau.get(),
            soft_rr: soft.to_rows(),
            deviation,
            mean_deviation,
        });
    }
    let report = ConvergeReport {
        agents: n,
        goods: m,
        seed: args.seed,
        valuations: v.matrix().to_rows(),
        round_robin: exact.to_rows(),
        runs,
    };
    write_atomic(&args.out, (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
    write_manifest(&manifest_path(&args.out), "converge", args, &[], &[&args.out], Some(args.seed), started)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderRow {
    pub sample_index: usize,
    pub learned_tau: f64,
    pub identity_tau: f64,
}

/// `<out>` with its extension replaced by `pairs.csv`.
pub fn pairs_path(out: &Path) -> PathBuf {
    out.with_extension("pairs.csv")
}

pub fn cmd_orders(args: &OrdersArgs) -> Result<Vec<OrderRow>> {
    let started = Instant::now();
    let params = load_checkpoint(&args.checkpoint)?;
    let ds = load_data(&args.data)?;
    if ds.agents() < 2 {
        bail!("Kendall's tau needs at least two agents; {} has one", args.data.display());
    }
    check_rank(&params, &ds, &args.data)?;
    let identity = AgentPermutation::identity(ds.agents());
    let mut rows = Vec::with_capacity(ds.len());
    let mut first_pairs = Vec::new();
    for (k, s) in ds.samples.iter().enumerate() {
        let reference = mean_valuation_order(&s.profile);
        let learned = nrr_order(&s.profile, &params)?;
        if k == 0 {
            first_pairs = rank_pairs(&reference, &learned);
        }
        rows.push(OrderRow {
            sample_index: k,
            learned_tau: kendall_tau(&learned, &reference)?,
            identity_tau: kendall_tau(&identity, &reference)?,
        });
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    write_atomic(&args.out, &w.into_inner()?)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["mean_valuation_rank", "learned_rank"])?;
    for (x, y) in &first_pairs {
        w.write_record([x.to_string(), y.to_string()])?;
    }
    let pairs = pairs_path(&args.out);
    write_atomic(&pairs, &w.into_inner()?)?;
    let n = rows.len() as f64;
    log::info!(
        "mean tau: learned {:.4}, identity {:.4}",
        rows.iter().map(|r| r.learned_tau).sum::<f64>() / n,
        rows.iter().map(|r| r.identity_tau).sum::<f64>() / n
    );
    write_manifest(
        &manifest_path(&args.out),
        "orders",
        args,
        &[&args.checkpoint, &args.data],
        &[&args.out, &pairs],
        None,
        started,
    )?;
    Ok(rows)
}
