use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dar_core::harness::{
    alignment_oracle_check, compare, grad_check, sweep, CurveSet, ExperimentConfig, LOSS_TERMS,
};
use dar_core::model::load_checkpoint;
use dar_core::training::{evaluate_quality, generate_dataset, train, Branch, QualityReport};
use dar_core::{Error, Result};

const GRAD_TOLERANCE: f64 = 1e-4;
const ORACLE_TOLERANCE: f64 = 1e-9;

#[derive(Parser)]
#[command(name = "darsim", version, about = "Simultaneous transduction with monotonic attention: train, stream, sweep, compare")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config (training fields plus sweep settings).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides the training seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset to DIR/dataset.json.
    GenerateData,
    /// Phase-1 training, then one latency finetune per configured λ.
    Train,
    /// Full-read quality of each checkpoint on the test split.
    Evaluate,
    /// Every checkpoint at every step size; writes curves.json and curves.csv.
    Sweep,
    /// Paired BLEU gains of a treatment curve set over a baseline.
    Compare {
        #[arg(long, value_name = "FILE")]
        baseline: PathBuf,
        #[arg(long, value_name = "FILE")]
        treatment: PathBuf,
    },
    /// Finite-difference check of every loss term on a toy model.
    GradCheck,
    /// Expected alignment against exhaustive path enumeration.
    OracleCheck,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn print_report(name: &str, r: &QualityReport) {
    println!(
        "{name:<32} BLEU {:>6.2}  acc {:.3}  AL {:>6.2}  DAL {:>6.2}  read-ahead {:>5.2}",
        r.bleu, r.token_accuracy, r.al, r.dal, r.read_ahead
    );
}

fn run(cli: Cli) -> Result<bool> {
    let out = &cli.common.out;
    match cli.command {
        Command::GenerateData => {
            let cfg = load_config(&cli.common)?;
            let data = generate_dataset(&cfg.train.task)?;
            write_json(&out.join("dataset.json"), &data)?;
            println!(
                "{} train / {} dev / {} test, task hash {}",
                data.train.len(),
                data.dev.len(),
                data.test.len(),
                cfg.train.task.hash()
            );
        }
        Command::Train => {
            let cfg = load_config(&cli.common)?;
            let data = generate_dataset(&cfg.train.task)?;
            write_json(&out.join("config.json"), &cfg)?;
            let outcome = train(&cfg.train, &data, out)?;
            if let Some(last) = outcome.log.last() {
                println!(
                    "final: phase {} step {} loss {:.4} dev acc {:.3} dev BLEU {:.2}",
                    last.phase, last.step, last.loss, last.dev_token_accuracy, last.dev_bleu
                );
            }
            for path in &outcome.checkpoints {
                println!("checkpoint {}", path.display());
            }
        }
        Command::Evaluate => {
            let cfg = load_config(&cli.common)?;
            let data = generate_dataset(&cfg.train.task)?;
            let mut reports = Vec::new();
            for path in cfg.checkpoint_paths(out) {
                let (model, meta) = load_checkpoint(&path)?;
                let r = evaluate_quality(&model, &data.test, None, cfg.encoder_mode, Branch::Speech)?.report;
                print_report(&format!("{} λ={}", meta.name, meta.lambda), &r);
                reports.push((path, r));
            }
            write_json(&out.join("eval.json"), &reports)?;
        }
        Command::Sweep => {
            let cfg = load_config(&cli.common)?;
            let data = generate_dataset(&cfg.train.task)?;
            let set = sweep(&cfg.sweep_config(out), &data.test, cfg.train.seed, &cfg.train.task.hash())?;
            for p in &set.points {
                println!(
                    "{:<12} λ={:<5} step {:>3}  AL {:>6.2}  DAL {:>6.2}  BLEU {:>6.2}  acc {:.3}",
                    p.model, p.lambda, p.step_frames, p.al, p.dal, p.bleu, p.token_accuracy
                );
            }
            println!("wrote {} and {}", out.join("curves.json").display(), out.join("curves.csv").display());
        }
        Command::Compare { baseline, treatment } => {
            let a = CurveSet::read(&baseline)?;
            let b = CurveSet::read(&treatment)?;
            let c = compare(&a.points, &b.points)?;
            print!("{}", c.table());
            write_json(&out.join("comparison.json"), &c)?;
        }
        Command::GradCheck => {
            let seed = cli.common.seed.unwrap_or(1);
            let reports = grad_check(seed)?;
            let mut ok = true;
            for r in &reports {
                let pass = r.max_rel_err <= GRAD_TOLERANCE;
                ok &= pass;
                println!(
                    "{:<7} {:>5} params  max rel err {:.3e}  max abs err {:.3e}  {}",
                    r.term,
                    r.checked,
                    r.max_rel_err,
                    r.max_abs_err,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            debug_assert_eq!(reports.len(), LOSS_TERMS.len());
            write_json(&out.join("grad-check.json"), &reports)?;
            return Ok(ok);
        }
        Command::OracleCheck => {
            let seed = cli.common.seed.unwrap_or(1);
            let err = alignment_oracle_check(200, seed)?;
            println!("expected alignment vs path enumeration (I, J ≤ 5, H ≤ 2, 200 draws): max abs error {err:.3e}");
            return Ok(err <= ORACLE_TOLERANCE);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::MissingCheckpoint(_) = e {
                eprintln!("(points evaluated before the missing checkpoint were still written)");
            }
            ExitCode::FAILURE
        }
    }
}
