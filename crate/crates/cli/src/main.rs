use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tokcomm_core::geometry::{
    estimate_normals, read_cloud, synth_dataset, synth_shape, write_cloud, ShapeKind, DEFAULT_NORMAL_K,
};
use tokcomm_core::harness::{
    constellation_stats, evaluate, load_checkpoint, save_checkpoint, train_with, Dataset, Trained,
};
use tokcomm_core::metrics::{chamfer, d1, d2, psnr, write_metric_csv};
use tokcomm_core::modulator::write_constellation_csv;
use tokcomm_core::{ChannelKind, ExperimentConfig, PointCloud};
use tokcomm_tensor::RandomSource;

/// Token-domain point cloud communication simulator.
#[derive(Parser)]
#[command(name = "tokcomm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint, run record and test metrics.
    Train(TrainArgs),
    /// Score a checkpoint over an SNR sweep; one CSV row per SNR.
    Eval(EvalArgs),
    /// Constellation usage of a checkpoint at one SNR.
    Stats(StatsArgs),
    /// Chamfer, D1 and D2 between two cloud files.
    Metrics(MetricsArgs),
    /// Generate synthetic point clouds.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; the desk defaults fill anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set epochs=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::desk(),
        };
        Ok(base.with_overrides(&self.overrides)?)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory of `.ply`/`.bin` clouds; synthetic shapes when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated SNR list in dB; defaults to the config's grid.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    snr: Vec<f64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Evaluate on a different channel than the one trained on.
    #[arg(long)]
    channel: Option<ChannelKind>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 10.0, allow_hyphen_values = true)]
    snr: f64,
    /// Keep Gumbel noise on while sampling symbols.
    #[arg(long)]
    gumbel: bool,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Also write the grid table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    reference: PathBuf,
    candidate: PathBuf,
    /// PSNR peak; the reference's largest absolute coordinate by default.
    #[arg(long)]
    peak: Option<f64>,
}

#[derive(Args)]
struct SynthArgs {
    /// sphere, cube-surface, torus, plane, or mixed (randomly deformed mix).
    #[arg(long, default_value = "mixed")]
    kind: String,
    #[arg(long, default_value_t = 256)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// File extension: ply or bin.
    #[arg(long, default_value = "ply")]
    format: String,
    #[arg(long, default_value = "shapes")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Stats(a) => run_stats(a),
        Command::Metrics(a) => run_metrics(a),
        Command::Synth(a) => run_synth(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dataset(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Dataset> {
    Ok(match dir {
        Some(d) => Dataset::from_dir(d, cfg.train.split, cfg.train.seed)
            .with_context(|| format!("reading clouds from {}", d.display()))?,
        None => Dataset::synthetic(cfg)?,
    })
}

fn load(path: &Path) -> Result<Trained> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn run_train(a: TrainArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let data = dataset(&cfg, a.data.as_deref())?;
    fs::create_dir_all(&a.out)?;
    let quiet = a.quiet;
    let mut trained = train_with(&cfg, &data, |r| {
        if !quiet {
            eprintln!(
                "epoch {:4}  lr {:.2e}  loss {:.5}  cd {:.5}  n_send {:.1}",
                r.epoch, r.lr, r.loss, r.cd, r.mean_n_send
            );
        }
    })?;
    let test = data.test_set();
    if !test.is_empty() {
        let (rows, counts) = evaluate(&trained, &test, &cfg.train.eval_snrs, cfg.train.eval_trials)?;
        let snr = cfg.train.eval_snrs.last().copied().unwrap_or(10.0);
        let (grid, _) = constellation_stats(&trained, &test, snr, false)?;
        write_metric_csv(fs::File::create(a.out.join("metrics.csv"))?, &rows)?;
        trained.record.evaluations = rows;
        trained.record.symbol_counts = counts;
        trained.record.constellation = grid;
    }
    save_checkpoint(&trained, &a.out.join("model.ckpt"))?;
    trained.record.save(&a.out.join("run.json"))?;
    fs::write(a.out.join("config.toml"), cfg.to_toml()?)?;
    if !quiet {
        eprintln!("wrote {}", a.out.display());
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let mut trained = load(&a.checkpoint)?;
    if let Some(kind) = a.channel {
        trained.config.train.channel = kind;
    }
    let snrs = if a.snr.is_empty() {
        trained.config.train.eval_snrs.clone()
    } else {
        a.snr
    };
    let trials = a.trials.unwrap_or(trained.config.train.eval_trials);
    let data = dataset(&trained.config, a.data.as_deref())?;
    let (rows, _) = evaluate(&trained, &data.test_set(), &snrs, trials)?;
    match a.out {
        Some(p) => write_metric_csv(fs::File::create(p)?, &rows)?,
        None => write_metric_csv(io::stdout().lock(), &rows)?,
    }
    Ok(())
}

fn run_stats(a: StatsArgs) -> Result<()> {
    let trained = load(&a.checkpoint)?;
    let data = dataset(&trained.config, a.data.as_deref())?;
    let (rows, entropy) = constellation_stats(&trained, &data.test_set(), a.snr, a.gumbel)?;
    if let Some(p) = &a.csv {
        write_constellation_csv(fs::File::create(p)?, &rows)?;
    }
    let summary = serde_json::json!({
        "snr_db": a.snr,
        "gumbel_noise": a.gumbel,
        "order": trained.config.model.order,
        "entropy_bits": entropy,
        "max_entropy_bits": (trained.config.model.order as f64).log2(),
        "grid": rows,
    });
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, &summary)?;
    writeln!(out)?;
    Ok(())
}

fn with_normals(cloud: PointCloud) -> Result<PointCloud> {
    if cloud.normals().is_some() {
        return Ok(cloud);
    }
    let k = DEFAULT_NORMAL_K.min(cloud.len().saturating_sub(1)).max(3);
    Ok(estimate_normals(&cloud, k)?.cloud)
}

fn run_metrics(a: MetricsArgs) -> Result<()> {
    let read = |p: &Path| -> Result<PointCloud> {
        with_normals(read_cloud(p).with_context(|| format!("reading {}", p.display()))?)
    };
    let x = read(&a.reference)?;
    let y = read(&a.candidate)?;
    let peak = a.peak.unwrap_or_else(|| x.peak());
    let (d1v, d2v) = (d1(&x, &y), d2(&x, &y)?);
    let mut out = io::stdout().lock();
    writeln!(out, "reference,candidate,cd,d1,d1_psnr,d2,d2_psnr,peak")?;
    writeln!(
        out,
        "{},{},{},{},{},{},{},{}",
        a.reference.display(),
        a.candidate.display(),
        chamfer(&x, &y),
        d1v,
        psnr(d1v, peak),
        d2v,
        psnr(d2v, peak),
        peak
    )?;
    Ok(())
}

fn run_synth(a: SynthArgs) -> Result<()> {
    if !matches!(a.format.as_str(), "ply" | "bin") {
        bail!("unknown format `{}` (expected ply or bin)", a.format);
    }
    let mut rng = RandomSource::new(a.seed);
    let clouds = if a.kind == "mixed" {
        synth_dataset(a.count, a.n, &mut rng)?
    } else {
        let kind: ShapeKind = a.kind.parse()?;
        (0..a.count)
            .map(|_| synth_shape(kind, a.n, &mut rng))
            .collect::<Result<Vec<_>, _>>()?
    };
    fs::create_dir_all(&a.out)?;
    for (i, c) in clouds.iter().enumerate() {
        write_cloud(&a.out.join(format!("{}_{i:04}.{}", a.kind, a.format)), c)?;
    }
    eprintln!("wrote {} clouds to {}", clouds.len(), a.out.display());
    Ok(())
}
