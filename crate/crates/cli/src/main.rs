use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ptgnn::bench::bench;
use ptgnn::checkpoint::Checkpoint;
use ptgnn::config::RunConfig;
use ptgnn::data::{generate_synthetic, load_dataset, save_dataset, SubjectRecording, SyntheticSpec};
use ptgnn::eval::{dataset_windows, evaluate, fit, run_cv, sweep, write_sweep_csv, MetricsReport};
use ptgnn::export::{export_graphs, write_embeddings_csv, Embeddings};
use ptgnn::model::Ablations;
use ptgnn::train::predict;

/// Cybersickness level prediction from sensor-aligned video embeddings.
#[derive(Parser)]
#[command(name = "ptgnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated ablation flags.
    #[arg(long)]
    ablation: Option<String>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset directory, or `synthetic:SPEC` such as `synthetic:subjects=10,noise=0.1`.
    #[arg(long)]
    data: String,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model on the whole dataset.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Cross-validate a configuration, or score a checkpoint.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Score this checkpoint instead of cross-validating.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Remove the sensor branch from a checkpoint.
    Strip {
        checkpoint: PathBuf,
        #[arg(long, default_value = "stripped")]
        out: PathBuf,
    },
    /// Batch-1 latency of the video path.
    Bench {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 50)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-validate every (window, difference window) cell.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',', default_value = "60,120,300")]
        windows: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "3,5,7")]
        kernels: Vec<usize>,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
    },
    /// Write paired sensor and video embeddings as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "embeddings")]
        out: PathBuf,
    },
    /// Write each modality's learned adjacency as CSV.
    ExportGraph {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "graph")]
        out: PathBuf,
    },
    /// Write a synthetic dataset to disk.
    GenData {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
}

fn run_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(flags) = &args.ablation {
        let extra = Ablations::parse(flags)?;
        for f in extra.names() {
            cfg.model.ablations.set(f, true)?;
        }
    }
    if let Ok(v) = std::env::var("PTGNN_THREADS") {
        let n: usize = v.parse().map_err(|_| ptgnn::Error::Config { field: "PTGNN_THREADS".into(), detail: format!("`{v}` is not a thread count") })?;
        cfg.parallel_folds = cfg.parallel_folds.min(n.max(1));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn synthetic_spec(data: &str) -> Result<Option<SyntheticSpec>> {
    Ok(match data.strip_prefix("synthetic") {
        Some(rest) => Some(SyntheticSpec::parse(rest.strip_prefix(':').unwrap_or(rest))?),
        None => None,
    })
}

fn load_data(args: &DataArgs) -> Result<Vec<SubjectRecording>> {
    Ok(match synthetic_spec(&args.data)? {
        Some(spec) => generate_synthetic(&spec)?,
        None => load_dataset(Path::new(&args.data))?,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| ptgnn::Error::io(dir, e))?;
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| ptgnn::Error::io(path, e))?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

fn print_report(r: &MetricsReport) {
    let p = &r.pooled;
    println!(
        "samples={} top1={:.2} top3={:.2} macro_f1={:.2} cosine={:.4} shuffled_cosine={:.4} align_mse={:.4} probe_top1={:.2}",
        p.samples, p.top1, p.top3, p.macro_f1, p.cosine, p.shuffled_cosine, p.align_mse, p.probe_top1
    );
}

fn cmd_train(run: &RunArgs, data: &DataArgs, out: &Path) -> Result<()> {
    let cfg = run_config(run)?;
    let dataset = load_data(data)?;
    create_dir(out)?;
    write_file(&out.join("config.txt"), &cfg.to_text())?;
    let log_path = out.join("steps.log");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| ptgnn::Error::io(log_path, e))?);
    let fitted = fit(&dataset, &cfg, Some(&mut log))?;
    log.flush()?;

    let mut epochs = String::from("epoch,train_loss,val_loss\n");
    for h in &fitted.outcome.history {
        epochs.push_str(&format!("{},{},{}\n", h.epoch, h.train_loss, h.val_loss));
    }
    write_file(&out.join("epochs.csv"), &epochs)?;
    let ck = Checkpoint::new(cfg.model.clone(), fitted.outcome.store);
    ck.save(&out.join("model.ckpt"))?;

    if let Some(msg) = fitted.outcome.diverged {
        match fitted.outcome.history.last() {
            Some(h) => eprintln!("training diverged; checkpoint holds the parameters after epoch {}", h.epoch),
            None => eprintln!("training diverged in the first epoch; checkpoint holds the initial parameters"),
        }
        return Err(ptgnn::Error::Numeric { location: msg }.into());
    }
    let report = fitted.report.context("missing report")?;
    report.write(out)?;
    println!("best_epoch={} epochs_run={}", fitted.outcome.best_epoch, fitted.outcome.history.len());
    print_report(&report);
    Ok(())
}

fn cmd_eval(run: &RunArgs, data: &DataArgs, checkpoint: Option<&Path>, out: &Path) -> Result<()> {
    let mut cfg = run_config(run)?;
    let dataset = load_data(data)?;
    let report = match checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.stripped {
                bail!(ptgnn::Error::Checkpoint("stripped checkpoint has no sensor branch to score alignment against".into()));
            }
            cfg.model = ck.config.clone();
            evaluate(&ck.store, &cfg, &dataset_windows(&dataset, &cfg)?)?
        }
        None => run_cv(&dataset, &cfg)?,
    };
    report.write(out)?;
    for f in &report.folds {
        println!("fold={} subjects={:?} top1={:.2} best_epoch={}", f.fold, f.test_subjects, f.metrics.top1, f.best_epoch);
    }
    print_report(&report);
    Ok(())
}

fn cmd_strip(checkpoint: &Path, out: &Path) -> Result<()> {
    let mut ck = load_checkpoint(checkpoint)?;
    let report = ck.strip();
    create_dir(out)?;
    ck.save(&out.join("model.ckpt"))?;
    write_file(&out.join("strip_report.json"), &serde_json::to_string_pretty(&report)?)?;
    if report.already_stripped {
        println!("notice: checkpoint was already stripped; nothing removed");
    }
    println!(
        "params {} -> {}, bytes {} -> {}, tensors removed {}",
        report.params_before, report.params_after, report.bytes_before, report.bytes_after, report.tensors_removed
    );
    Ok(())
}

fn cmd_bench(checkpoint: &Path, samples: usize, warmup: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let report = bench(&ck, samples, warmup, seed)?;
    let l = &report.latency;
    println!(
        "samples={} warmup={} mean_ms={:.3} p50_ms={:.3} p95_ms={:.3} p99_ms={:.3} model_mb={:.3} cpus={} cpu={}",
        l.samples,
        l.warmup,
        l.mean_ms,
        l.p50_ms,
        l.p95_ms,
        l.p99_ms,
        report.model_mb,
        report.machine.logical_cpus,
        report.machine.cpu_model.as_deref().unwrap_or("unknown")
    );
    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(&dir.join("bench.json"), &serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn cmd_sweep(run: &RunArgs, data: &DataArgs, windows: &[usize], kernels: &[usize], out: &Path) -> Result<()> {
    let cfg = run_config(run)?;
    let dataset = load_data(data)?;
    let cells = sweep(&dataset, windows, kernels, &cfg)?;
    create_dir(out)?;
    let path = out.join("sweep.csv");
    let mut f = File::create(&path).map_err(|e| ptgnn::Error::io(path, e))?;
    write_sweep_csv(&cells, &mut f)?;
    for c in &cells {
        match (&c.report, &c.error) {
            (Some(r), _) => println!("window={} kernel={} top1={:.2}", c.window, c.kernel, r.top1()),
            (None, Some(e)) => println!("window={} kernel={} skipped: {e}", c.window, c.kernel),
            (None, None) => {}
        }
    }
    Ok(())
}

fn cmd_export_embeddings(run: &RunArgs, data: &DataArgs, checkpoint: &Path, out: &Path) -> Result<()> {
    let mut cfg = run_config(run)?;
    let ck = load_checkpoint(checkpoint)?;
    if ck.stripped {
        bail!(ptgnn::Error::Checkpoint("stripped checkpoint cannot produce sensor embeddings".into()));
    }
    cfg.model = ck.config.clone();
    let windows = dataset_windows(&load_data(data)?, &cfg)?;
    let preds = predict(&ck.store, &cfg.model, &windows, 64)?;
    create_dir(out)?;
    let path = out.join("embeddings.csv");
    write_embeddings_csv(&Embeddings::from(&preds), &path)?;
    println!("{} rows -> {}", preds.labels.len(), path.display());
    Ok(())
}

fn cmd_export_graph(checkpoint: &Path, out: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    for path in export_graphs(&ck.store, out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_gen_data(data: &DataArgs, out: &Path) -> Result<()> {
    let spec = synthetic_spec(&data.data)?.context("gen-data needs --data synthetic:SPEC")?;
    let recs = generate_synthetic(&spec)?;
    save_dataset(&recs, out)?;
    println!("{} subjects -> {}", recs.len(), out.display());
    Ok(())
}

/// 2 for configuration and usage errors, 3 for numeric failures, 4 for I/O.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ptgnn::Error>() {
            return e.exit_code() as u8;
        }
        if cause.is::<std::io::Error>() {
            return 4;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { run, data, out } => cmd_train(run, data, out),
        Command::Eval { run, data, checkpoint, out } => cmd_eval(run, data, checkpoint.as_deref(), out),
        Command::Strip { checkpoint, out } => cmd_strip(checkpoint, out),
        Command::Bench { checkpoint, samples, warmup, seed, out } => cmd_bench(checkpoint, *samples, *warmup, *seed, out.as_deref()),
        Command::Sweep { run, data, windows, kernels, out } => cmd_sweep(run, data, windows, kernels, out),
        Command::ExportEmbeddings { run, data, checkpoint, out } => cmd_export_embeddings(run, data, checkpoint, out),
        Command::ExportGraph { checkpoint, out } => cmd_export_graph(checkpoint, out),
        Command::GenData { data, out } => cmd_gen_data(data, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
