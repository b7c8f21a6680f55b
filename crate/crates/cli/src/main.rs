//! `defxattn` command-line driver.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use defxattn::complexity::{complexity_report, write_complexity_csv, write_complexity_summary, ComplexityConfig};
use defxattn::pipeline::checkpoint::Checkpoint;
use defxattn::pipeline::evaluate::{dump_grids, register};
use defxattn::pipeline::gradcheck::gradcheck_suite;
use defxattn::pipeline::train::{CHECKPOINT, LOSS_CSV};
use defxattn::pipeline::{evaluate, load_dataset, run_training, save_dataset, synth_dataset, RunConfig, SynthParams};
use defxattn::{Error, Result};

#[derive(Parser)]
#[command(name = "defxattn", version, about = "Deformable window cross-attention registration")]
struct Cli {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (into --out, else `data_dir`).
    Synth,
    /// Train on `data_dir`; writes the loss curve and best checkpoint to --out.
    Train,
    /// Evaluate a checkpoint on a dataset; writes metrics and dumps to --out.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; defaults to the checkpoint's `data_dir`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Complexity ledger for the attention mechanisms.
    Bench {
        /// Comma-separated presets (`full`, `desk`); empty for none.
        #[arg(long, default_value = "full,desk")]
        configs: String,
        /// Cross-check against counted multiplies.
        #[arg(long)]
        instrument: bool,
    },
    /// End-to-end gradient checks.
    Gradcheck,
    /// Dump deformable sampling grids of one pair as CSV.
    DumpGrid {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        pair: usize,
    },
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| cfg.out.clone())
}

fn synth(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let dir = cli.out.clone().unwrap_or_else(|| cfg.data_dir.clone());
    let params = SynthParams::from_run(cfg);
    let ds = synth_dataset(&params)?;
    save_dataset(&dir, &ds)?;
    println!("wrote {} pairs to {}", ds.pairs.len(), dir.display());
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<()> {
    let report = run_training(cfg, |r| {
        println!(
            "epoch {:>4}  iter {:>6}  loss {:.6}  ncc {:.6}  dice {:.6}  diff {:.6}  val_dice {:.4}",
            r.epoch, r.iterations, r.loss.total, r.loss.ncc, r.loss.dice, r.loss.diffusion, r.val_dice
        );
    })?;
    println!(
        "baseline val_dice {:.4}, best epoch {}; wrote {} and {} to {}",
        report.baseline_val_dice,
        report.best_epoch,
        LOSS_CSV,
        CHECKPOINT,
        cfg.out.display()
    );
    Ok(())
}

fn data_dir(data: &Option<PathBuf>, ck: &Checkpoint) -> PathBuf {
    data.clone().unwrap_or_else(|| ck.config.data_dir.clone())
}

fn eval(checkpoint: &Path, data: &Option<PathBuf>, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let rows = evaluate(checkpoint, &data_dir(data, &ck), out)?;
    for r in &rows {
        println!(
            "{}  dice {:.4} -> {:.4}  hd95 {:.3}  sdlogj {:.4}  %|J|<=0 {:.3}  %NDV {:.4}  field_rmse {:.4}",
            r.metrics.pair_id,
            r.dice_pre,
            r.dice_post,
            r.metrics.hd95,
            r.metrics.inv.sdlogj,
            r.metrics.inv.pct_nonpositive,
            r.metrics.inv.pct_ndv,
            r.field_rmse
        );
    }
    println!("wrote metrics for {} pairs to {}", rows.len(), out.display());
    Ok(())
}

fn bench(configs: &str, instrument: bool, out: &Path) -> Result<()> {
    let cfgs = configs
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| match s {
            "full" => Ok(ComplexityConfig::full()),
            "desk" => Ok(ComplexityConfig::desk()),
            other => Err(Error::Config(format!("unknown complexity preset `{other}`"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = complexity_report(&cfgs, instrument)?;
    fs::create_dir_all(out)?;
    let mut csv = Vec::new();
    write_complexity_csv(&rows, &mut csv)?;
    fs::write(out.join("complexity.csv"), &csv)?;
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(&csv)?;
    write_complexity_summary(&rows, &mut stdout)?;
    Ok(())
}

fn gradcheck(seed: u64) -> Result<bool> {
    let mut ok = true;
    for (name, rep) in gradcheck_suite(seed)? {
        let status = if rep.passed() { "pass" } else { "FAIL" };
        ok &= rep.passed();
        println!(
            "{status} {name}: {} entries, max rel err {:.3e} (tol {:.0e})",
            rep.entries.len(),
            rep.max_rel_err,
            rep.tol
        );
    }
    Ok(ok)
}

fn dump_grid(checkpoint: &Path, data: &Option<PathBuf>, pair: usize, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let store = ck.restore(&ck.config.model)?;
    let ds = load_dataset(&data_dir(data, &ck))?;
    let p = ds
        .pairs
        .get(pair)
        .ok_or_else(|| Error::Config(format!("pair {pair} out of range (dataset has {})", ds.pairs.len())))?;
    let reg = register(&store, &ck.config, p)?;
    let n = dump_grids(&reg.trace, out)?;
    println!("wrote {n} sampling grids to {}", out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = run_config(cli)?;
    let out = out_dir(cli, &cfg);
    match &cli.command {
        Command::Synth => synth(cli, &cfg)?,
        Command::Train => train(&cfg)?,
        Command::Eval { checkpoint, data } => eval(checkpoint, data, &out)?,
        Command::Bench { configs, instrument } => bench(configs, *instrument, &out)?,
        Command::Gradcheck => return gradcheck(cfg.seed),
        Command::DumpGrid { checkpoint, data, pair } => dump_grid(checkpoint, data, *pair, &out)?,
    }
    Ok(true)
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().to_string();
            eprintln!("E_USAGE: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("E_GRADCHECK: gradient check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("{}: {}", e.code(), one_line(&e.to_string()));
            ExitCode::from(1)
        }
    }
}
