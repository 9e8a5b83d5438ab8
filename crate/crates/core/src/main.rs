use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use masil::concepts::bank_similarity;
use masil::config::RunConfig;
use masil::error::{Error, Result};
use masil::etf::{nc_metrics, NcReport};
use masil::runner::{
    ablation_suite, ablation_table, build_stream, cosine_analysis, evaluate, run_base_session,
    run_incremental_session, run_protocol, Variant,
};
use masil::{io, oracle};

/// Few-shot class-incremental learning with concept-induced simplex
/// classifiers.
#[derive(Debug, Parser)]
#[command(name = "masil", version)]
struct Cli {
    /// JSON run configuration (defaults apply to missing keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// LearnableCE, NcCE, NcEtf, NcEtfCF or MASIL.
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Output directory (default: config `out`, else ./masil-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Concept bank rank.
    #[arg(long = "v", global = true)]
    rank: Option<usize>,
    /// Fine-tuning anchor weight.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the base session and save the pipeline state.
    Base,
    /// Run the next incremental session on a saved state.
    Session,
    /// Run every session and write report.json and report.csv.
    Protocol,
    /// Run all five variants and write the comparison.
    Ablate,
    /// Collapse, bank and separability diagnostics of a saved state.
    Diagnose,
    /// Recompute the reference values and write oracle.json.
    Oracle,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_solver_failure() { 2 } else { 1 })
        }
    }
}

/// `MASIL_THREADS` caps the worker pool; 0 means a single thread.
fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("MASIL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::validation("MASIL_THREADS", format!("not a count: {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .map_err(|e| Error::validation("MASIL_THREADS", e.to_string()))
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(v) = &cli.variant {
        cfg.variant = v.parse()?;
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    if let Some(r) = cli.rank {
        cfg.bank.rank = Some(r);
    }
    if let Some(a) = cli.alpha {
        cfg.finetune.alpha = a;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from("masil-out"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value).expect("serializes"))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli)?;
    let dir = out_dir(&cfg);
    match cli.command {
        Command::Base => {
            let stream = build_stream(&cfg)?;
            let state = run_base_session(&stream, &cfg, cfg.variant)?;
            let acc = evaluate(&state, &stream.test_set(0))?;
            io::save_state(&dir, &state)?;
            std::fs::write(dir.join("config.json"), cfg.to_json())?;
            println!("{} base session: {acc:.2}% over {} classes", cfg.variant, state.seen_classes());
        }
        Command::Session => {
            let stream = build_stream(&cfg)?;
            let state = io::load_state(&dir)?;
            let t = state.session + 1;
            let inc = stream.increments.get(state.session).ok_or_else(|| {
                Error::validation(
                    "stream.sessions",
                    format!("all {} sessions already run", stream.sessions()),
                )
            })?;
            let next = run_incremental_session(&state, inc, &cfg)?;
            let acc = evaluate(&next, &stream.test_set(t))?;
            io::save_state(&dir, &next)?;
            println!("{} session {t}: {acc:.2}% over {} classes", next.variant, next.seen_classes());
        }
        Command::Protocol => {
            let stream = build_stream(&cfg)?;
            let mut report = run_protocol(&stream, &cfg, cfg.variant)?;
            if cfg.baseline != cfg.variant {
                let base = run_protocol(&stream, &cfg, cfg.baseline)?;
                report.compare_to(&base);
            } else {
                let same = report.clone();
                report.compare_to(&same);
            }
            io::save_report(&dir, &report)?;
            print!("{}", ablation_table(std::slice::from_ref(&report)));
        }
        Command::Ablate => {
            let stream = build_stream(&cfg)?;
            let reports = ablation_suite(&stream, &cfg)?;
            std::fs::create_dir_all(&dir)?;
            write_json(&dir.join("ablation.json"), &reports)?;
            let mut csv = String::from("variant,final,average,relative_improvement\n");
            for r in &reports {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    r.variant,
                    r.final_accuracy(),
                    r.average_accuracy,
                    r.relative_improvement.unwrap_or(0.0)
                ));
            }
            std::fs::write(dir.join("ablation.csv"), csv)?;
            for r in &reports {
                let sub = dir.join(r.variant.name());
                io::save_report(&sub, r)?;
            }
            print!("{}", ablation_table(&reports));
        }
        Command::Diagnose => {
            let stream = build_stream(&cfg)?;
            let state = io::load_state(&dir)?;
            let test = state.features(&stream.test_set(state.session))?;
            let train = state.memory.as_batch(state.extractor_dim())?;
            let report = Diagnosis {
                variant: state.variant,
                session: state.session,
                classes_seen: state.seen_classes(),
                collapse: nc_metrics(&test, state.classifier.effective_w().view())?,
                bank_similarity: state.bank.as_ref().map(bank_similarity).transpose()?,
                cos_train: cosine_analysis(&state, &train)?,
                cos_test: cosine_analysis(&state, &test)?,
            };
            write_json(&dir.join("diagnose.json"), &report)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("serializes"));
        }
        Command::Oracle => {
            let fixtures = oracle::generate()?;
            std::fs::create_dir_all(&dir)?;
            let path = dir.join("oracle.json");
            write_json(&path, &fixtures)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct Diagnosis {
    variant: Variant,
    session: usize,
    classes_seen: usize,
    collapse: NcReport,
    bank_similarity: Option<f64>,
    cos_train: f64,
    cos_test: f64,
}
