use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dualscan::bench::scan_bench;
use dualscan::checkpoint::load_checkpoint;
use dualscan::config::RunConfig;
use dualscan::gradcheck::gradcheck_suite;
use dualscan::net::NetArch;
use dualscan::report::{report, ReportOptions};
use dualscan::synth::{load_dataset, save_dataset, synth_dataset};
use dualscan::train::{evaluate, sweep, thread_pool, train, RunOutput};
use dualscan_core::metrics::write_jsonl;
use dualscan_core::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "dualscan", version, about = "Boundary-guided dual-scan segmentation toolkit")]
struct Cli {
    /// Worker threads; 1 gives bit-reproducible training.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Finite-difference check of every parameter group.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Train on synthetic ring data.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra `key=value` overrides applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Named ablation: baseline, basm, cmsa, no_modulation, no_se_fusion, full.
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a PGM dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Per-image, per-class metric records (JSON lines).
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// One training run per value of a hyperparameter.
    Sweep {
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
    },
    /// Time the sequential and parallel scans.
    ScanBench {
        #[arg(long, default_value_t = 4096)]
        len: usize,
        #[arg(long, default_value_t = 16)]
        state: usize,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Summary JSON and heatmaps from a metric log.
    Report {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long)]
        no_bench: bool,
    },
    /// Write a synthetic dataset as PGM image/mask pairs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run_config(file: Option<&PathBuf>, overrides: &[String], threads: Option<usize>) -> Result<RunConfig> {
    let mut cfg = match file {
        Some(f) => RunConfig::load(f)?,
        None => RunConfig::default(),
    };
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(t) = threads {
        cfg.train.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads;
    match cli.cmd {
        Cmd::Gradcheck { seed, tol } => {
            let rows = gradcheck_suite(seed)?;
            let mut failed = 0;
            let mut case = String::new();
            for r in &rows {
                if r.case != case {
                    println!("{}", r.case);
                    case = r.case.clone();
                }
                let ok = r.passes(tol);
                failed += !ok as usize;
                println!(
                    "  {:<34} tensors {:>2}  max rel err {:.2e}  |grad| {:.3e}  {}",
                    r.group,
                    r.tensors,
                    r.max_rel_err,
                    r.grad_norm,
                    if ok { "ok" } else { "FAIL" }
                );
            }
            if failed > 0 {
                return Err(Error::Invariant(format!("{failed} parameter groups exceed relative error {tol:e}")));
            }
            println!("all {} groups within {tol:e}", rows.len());
        }
        Cmd::Train { config, overrides, ablation, out } => {
            let mut cfg = run_config(config.as_ref(), &overrides, threads)?;
            if let Some(a) = ablation {
                cfg = cfg.ablation(&a)?;
            }
            let r = train(&cfg, &RunOutput { dir: Some(out.clone()), verbose: true })?;
            println!(
                "{}",
                json!({"config_hash": r.config_hash, "mdice": r.last.mdice, "miou": r.last.miou,
                       "class_dice": r.last.class_dice, "seconds": r.seconds, "out": out.display().to_string()})
            );
        }
        Cmd::Eval { checkpoint, data, records } => {
            let (cfg, net) = load_checkpoint(&checkpoint)?;
            let arch = NetArch::from_config(&cfg);
            let samples = load_dataset(&data)?;
            let pool = thread_pool(threads.unwrap_or(cfg.train.threads))?;
            let e = evaluate(&net, &arch, &samples, &pool)?;
            if let Some(path) = records {
                let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
                for (i, m) in e.per_image.iter().enumerate() {
                    write_jsonl(&mut f, i, m)?;
                }
            }
            println!(
                "{}",
                json!({"images": samples.len(), "mdice": e.mdice, "miou": e.miou, "class_dice": e.class_dice, "class_hd95": e.class_hd95})
            );
        }
        Cmd::Sweep { param, values, config, overrides, out } => {
            let base = run_config(config.as_ref(), &overrides, threads)?;
            let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
            if values.is_empty() {
                return Err(Error::Config("--values is empty".into()));
            }
            let rows = sweep(&base, &param, &values, &RunOutput { dir: Some(out.clone()), verbose: true })?;
            println!("{:<10} {:>8} {:>8}", param, "mDice", "mIoU");
            for r in &rows {
                println!("{:<10} {:>8.4} {:>8.4}", r.value, r.mdice, r.miou);
            }
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&rows).expect("rows serialize"))?;
        }
        Cmd::ScanBench { len, state, channels, reps } => {
            let b = scan_bench(len, state, channels, reps)?;
            println!("{}", serde_json::to_string(&b).expect("bench serializes"));
        }
        Cmd::Report { log, checkpoint, out, sample, no_bench } => {
            let s = report(&log, &ReportOptions { checkpoint, out, sample, bench: !no_bench })?;
            println!("{}", serde_json::to_string_pretty(&s).expect("json value"));
        }
        Cmd::Synth { out, count, size, seed } => {
            save_dataset(&synth_dataset(seed, count, size), &out)?;
            println!("wrote {count} image/mask pairs to {}", out.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_) | Error::Format(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
