use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mmpt::cli::{
    length_plot, run_pretrain, write_robustness, write_run_report, write_timing, Experiment, ExperimentConfig, RunReport,
};
use mmpt::error::{Error, Result};
use mmpt::exec::ExecMode;

/// Prefix tuning and baselines on a toy multimodal encoder-decoder.
#[derive(Parser)]
#[command(name = "mmpt", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "PEFT_SEED")]
    seed: Option<u64>,
    /// Output directory for reports, plots and checkpoints.
    #[arg(long, global = true, env = "PEFT_OUT_DIR")]
    out: Option<PathBuf>,
    /// Backbone checkpoint to load instead of pretraining.
    #[arg(long, global = true)]
    backbone: Option<PathBuf>,
    /// Drop the final encoder layer's prompt rows from the memory.
    #[arg(long, global = true)]
    strip_encoder_prompts: bool,
    /// Carry prompt outputs between layers instead of replacing them.
    #[arg(long, global = true)]
    carry_prompts: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a backbone and save it as backbone.pftf.
    Pretrain,
    /// Train the configured strategy on every task.
    Run,
    /// Prompt-length sweep.
    SweepLength {
        /// Overrides sweep.lengths, comma separated.
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
    },
    /// Encoder-only, decoder-only and both placements.
    SweepDepth,
    /// Plain prompt table versus MLP reparameterization.
    SweepReparam,
    /// Full finetuning, prefix, adapter and bitfit.
    Compare,
    /// FGSM robustness of prefix tuning versus finetuning.
    Attack,
    /// Time per 100 training samples across model scales.
    Timing,
}

fn config(args: &Args) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    if let Some(b) = &args.backbone {
        cfg.backbone = Some(b.clone());
    }
    cfg.prompt_flags = (args.strip_encoder_prompts, args.carry_prompts);
    cfg.validate()?;
    Ok(cfg)
}

fn finish(cfg: &ExperimentConfig, name: &str, report: &RunReport, err: Option<Error>) -> Result<()> {
    write_run_report(&cfg.out_dir, name, name, cfg.seed, report)?;
    for r in &report.rows {
        println!(
            "{:<14} l={:<4} {:<13} {:<6} {:<9} {}={} trainable={} ({:.4})",
            r.strategy,
            r.l.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
            r.placement.as_deref().unwrap_or("-"),
            r.reparam.as_deref().unwrap_or("-"),
            r.task,
            r.metric_name,
            r.metric.map(|m| format!("{m:.4}")).unwrap_or_else(|| r.status.clone()),
            r.trainable_count,
            r.trainable_fraction
        );
    }
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn execute(args: &Args) -> Result<()> {
    let cfg = config(args)?;
    let mode = ExecMode::default();
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml()?)?;
    if let Command::Pretrain = args.command {
        let (_, log, untrained) = run_pretrain(&cfg, mode)?;
        println!(
            "caption bleu4: pretrained {:.4}, untrained {:.4}",
            log.last("eval", "bleu4").unwrap_or(f64::NAN),
            untrained
        );
        return Ok(());
    }
    let exp = Experiment::prepare(cfg.clone(), mode)?;
    match &args.command {
        Command::Pretrain => unreachable!(),
        Command::Run => {
            let (r, e) = exp.run();
            finish(&cfg, "run", &r, e)
        }
        Command::SweepLength { lengths } => {
            let lengths = lengths.clone().unwrap_or_else(|| cfg.sweep.lengths.clone());
            let (r, e) = exp.sweep_length(&lengths);
            std::fs::write(cfg.out_dir.join("sweep_length.svg"), length_plot(&r))?;
            finish(&cfg, "sweep_length", &r, e)
        }
        Command::SweepDepth => {
            let (r, e) = exp.sweep_depth();
            finish(&cfg, "sweep_depth", &r, e)
        }
        Command::SweepReparam => {
            let (r, e) = exp.sweep_reparam();
            finish(&cfg, "sweep_reparam", &r, e)
        }
        Command::Compare => {
            let (r, e) = exp.compare_strategies();
            finish(&cfg, "compare", &r, e)
        }
        Command::Attack => {
            let per = exp.robustness()?;
            let (agg, trend) = write_robustness(&cfg.out_dir, &per, cfg.robustness.band)?;
            print!("{}", agg.to_csv());
            for t in trend {
                println!(
                    "{} eps={} prefix_rel={:?} finetune_rel={:?} matched={} holds={:?}",
                    t.task, t.epsilon, t.prefix_rel_drop, t.finetune_rel_drop, t.matched, t.holds
                );
            }
            Ok(())
        }
        Command::Timing => {
            let t = exp.time_per_100()?;
            write_timing(&cfg.out_dir, &t)?;
            print!("{}", t.to_csv());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match execute(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
