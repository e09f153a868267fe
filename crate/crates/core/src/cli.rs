//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::{LatseError, Result};
use crate::experiment::{
    load_classifier, load_summary, run_ablation, run_experiment, tabulate, RunOptions, RunSummary,
};
use crate::gradcheck::run_gradchecks;
use crate::margin::{check_principles, emit_curves, theta_grid, Family, MarginSpec};
use crate::synth::Dataset;
use crate::trainer::evaluate_student;

const ABOUT: &str = "Margin-softmax analysis and teacher-student embedding training.

Every command is deterministic: identical config, overrides and seed produce
byte-identical output files. Worker threads (LATSE_THREADS, default 1) only
change wall-clock time, never results.";

#[derive(Debug, Parser)]
#[command(name = "latse", version, about = ABOUT, long_about = ABOUT)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML config file; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, overriding `out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Sets both the run seed and the data seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Dotted-path override such as `loss.a=0.9`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Target logit curves of softmax, ArcFace, CosFace and the configured linear loss.
    Curves {
        #[arg(long, default_value_t = 0.01)]
        step: f64,
    },
    /// Principle audit (monotonicity and margin order) of the standard losses.
    Audit {
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
    },
    /// Analytic against finite-difference gradients.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
    /// Writes the synthetic dataset as PGM images plus a manifest.
    GenData,
    /// Trains the teacher (when the gate is on) and the student.
    Train {
        /// Continue from the saved state in the output directory.
        #[arg(long)]
        resume: bool,
        /// Save state and stop after this many student iterations.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Re-evaluates the student checkpoints of a run directory.
    Eval {
        /// Run directory; defaults to the output directory.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Component ablation table over several seeds.
    Compare {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Tabulate existing run directories instead of training.
        #[arg(long, num_args = 1..)]
        runs: Vec<PathBuf>,
    },
}

/// Loads the config and applies `--seed`, `--set` and `--out` in that order.
pub fn resolve_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.data.seed = seed;
    }
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Worker count from `LATSE_THREADS`.
pub fn thread_budget() -> Result<usize> {
    match std::env::var("LATSE_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(LatseError::Config(format!("LATSE_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn linear_spec(cfg: &ExperimentConfig) -> MarginSpec {
    if cfg.loss.family == Family::Linear {
        cfg.loss
    } else {
        MarginSpec::linear(0.88, 0.88, cfg.loss.s)
    }
}

fn file_stem(label: &str) -> String {
    let mut s: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c.to_ascii_lowercase() } else { '_' })
        .collect();
    while s.contains("__") {
        s = s.replace("__", "_");
    }
    s.trim_matches('_').to_string()
}

fn curves(cfg: &ExperimentConfig, step: f64) -> Result<PathBuf> {
    let s = cfg.loss.s;
    let specs = [MarginSpec::softmax(s), MarginSpec::arcface(s), MarginSpec::cosface(s), linear_spec(cfg)];
    let table = emit_curves(&specs, &theta_grid(0.0, std::f64::consts::PI, step))?;
    let path = cfg.out_dir.join("curves.csv");
    write(&path, &table.to_csv(&cfg.short_hash()))?;
    Ok(path)
}

fn audit(cfg: &ExperimentConfig, step: f64) -> Result<Vec<PathBuf>> {
    let s = cfg.loss.s;
    let mut specs = vec![MarginSpec::arcface(s), MarginSpec::cosface(s), linear_spec(cfg)];
    if !specs.contains(&cfg.loss) {
        specs.push(cfg.loss);
    }
    let hash = cfg.short_hash();
    let mut summary = format!("# config_hash = {hash}\nspec,p1_ok,p2_ok,margin_order_ok,p2_violations\n");
    let mut paths = Vec::new();
    for spec in &specs {
        let report = check_principles(spec, 0.0, std::f64::consts::PI, step)?;
        let path = cfg.out_dir.join(format!("audit_{}.txt", file_stem(&spec.label())));
        write(&path, &report.to_key_value(&hash))?;
        let intervals: Vec<String> = report
            .p2_violations
            .iter()
            .map(|i| format!("[{:.4};{:.4}]", i.start, i.end))
            .collect();
        summary.push_str(&format!(
            "\"{}\",{},{},{},{}\n",
            spec.label(),
            report.p1_ok,
            report.p2_ok,
            report.margin_order_ok.map_or("n/a".to_string(), |b| b.to_string()),
            intervals.join(" ")
        ));
        paths.push(path);
    }
    let path = cfg.out_dir.join("audit_summary.csv");
    write(&path, &summary)?;
    paths.push(path);
    Ok(paths)
}

fn eval_run(common: &CommonArgs, run: &Path) -> Result<PathBuf> {
    let saved = ExperimentConfig::load(&run.join("config.toml"))?;
    let student = load_classifier(run, "student", Some(saved.hash_tag()))?;
    let mut eff = saved;
    for o in &common.overrides {
        eff.apply_override(o)?;
    }
    eff.validate()?;
    let dataset = Dataset::generate(&eff.data)?;
    let report = evaluate_student(&eff, &student, &dataset)?;
    let dir = common.out.clone().unwrap_or_else(|| run.to_path_buf());
    let path = dir.join("eval.csv");
    write(&path, &report.to_csv(eff.seed, &eff.short_hash()))?;
    Ok(path)
}

fn compare(cfg: &ExperimentConfig, seeds: &[u64], runs: &[PathBuf]) -> Result<(PathBuf, String)> {
    let summaries: Vec<RunSummary> = if runs.is_empty() {
        if seeds.is_empty() {
            return Err(LatseError::Config("compare needs at least one seed".into()));
        }
        run_ablation(cfg, seeds, thread_budget()?)?
            .into_iter()
            .map(|r| r.summary)
            .collect()
    } else {
        runs.iter().map(|d| load_summary(d)).collect::<Result<_>>()?
    };
    let table = tabulate(&summaries)?;
    let path = cfg.out_dir.join("compare.csv");
    write(&path, &table)?;
    Ok((path, table))
}

/// Runs one command. Progress lines go to stdout.
pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    match &cli.command {
        Command::Curves { step } => println!("wrote {}", curves(&cfg, *step)?.display()),
        Command::Audit { step } => {
            for p in audit(&cfg, *step)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Gradcheck { cases } => {
            let report = run_gradchecks(cfg.seed, *cases);
            let path = cfg.out_dir.join("gradcheck.csv");
            let csv = report.to_csv(&cfg.short_hash());
            write(&path, &csv)?;
            print!("{csv}");
            if !report.all_passed() {
                let failed: Vec<&str> = report.rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
                return Err(LatseError::GradCheck(failed.join(", ")));
            }
        }
        Command::GenData => {
            let dataset = Dataset::generate(&cfg.data)?;
            dataset.export(&cfg.out_dir, &cfg.short_hash())?;
            println!("wrote dataset to {}", cfg.out_dir.display());
        }
        Command::Train { resume, stop_after } => {
            let opts = RunOptions { resume: *resume, stop_after: *stop_after };
            let run = run_experiment(&cfg, opts, None)?;
            let s = &run.summary;
            if run.eval.is_some() {
                println!(
                    "{} seed {}: verification {:.4}, rank-1 {:.4}, dloss {:.4}, gloss {:.4}",
                    s.variant, s.seed, s.verification_accuracy, s.rank1, s.final_dloss, s.final_gloss
                );
            } else {
                println!("stopped at iteration {}; state saved in {}", s.iterations, cfg.out_dir.display());
            }
        }
        Command::Eval { run } => {
            let dir = run.clone().unwrap_or_else(|| cfg.out_dir.clone());
            println!("wrote {}", eval_run(&cli.common, &dir)?.display());
        }
        Command::Compare { seeds, runs } => {
            let (path, table) = compare(&cfg, seeds, runs)?;
            print!("{table}");
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
