use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use personamem::config::Config;
use personamem::pipeline::Setting;
use personamem::run::{self, RunError, RunRequest};
use personamem_core::memory::Policy;

#[derive(Parser)]
#[command(name = "personamem", version, about = "Persona long-term memory experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline over a corpus and write a run directory.
    Run(RunArgs),
    /// Recount intra/inter-session contradictions from a finished run.
    Stats { run_dir: PathBuf },
    /// Rebuild memory from journals and compare with saved snapshots.
    Replay { path: PathBuf },
    /// Check a corpus file against the schema.
    ValidateCorpus { path: PathBuf },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Memory policies (refine, nli-remove, nli-recent, all, none). Repeatable.
    #[arg(long = "policy", value_parser = parse_policy)]
    policies: Vec<Policy>,
    /// Persona settings. Repeatable.
    #[arg(long = "setting", value_enum)]
    settings: Vec<Setting>,
    /// Evaluated sessions as `lo..hi` (inclusive).
    #[arg(long, value_parser = parse_sessions)]
    sessions: Option<(u32, u32)>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    mu: Option<f64>,
    /// Use the offline mock providers.
    #[arg(long)]
    dry_run: bool,
    /// Exact run directory (must not exist).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_policy(s: &str) -> Result<Policy, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_sessions(s: &str) -> Result<(u32, u32), String> {
    let (lo, hi) = s.split_once("..").ok_or("expected lo..hi")?;
    let lo: u32 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: u32 = hi.trim_start_matches('=').trim().parse().map_err(|e| format!("{e}"))?;
    if lo == 0 || lo > hi {
        return Err("sessions must satisfy 1 <= lo <= hi".into());
    }
    Ok((lo, hi))
}

fn run_cmd(args: RunArgs) -> Result<i32, RunError> {
    let mut config = Config::load(&args.config)?;
    if let Some(s) = args.sessions {
        config.run.eval_sessions = s;
    }
    if let Some(k) = args.k {
        config.run.k = k;
    }
    if let Some(mu) = args.mu {
        config.run.mu = mu;
    }
    let settings = if args.settings.is_empty() {
        vec![Setting::Gold, Setting::CometExp, Setting::NoMemory]
    } else {
        args.settings
    };
    let policies = if args.policies.is_empty() {
        vec![
            Policy::Refine,
            Policy::NliRemove,
            Policy::NliRecent,
            Policy::All,
            Policy::None,
        ]
    } else {
        args.policies
    };
    let summary = run::cmd_run(&RunRequest {
        config,
        settings,
        policies,
        dry_run: args.dry_run,
        out: args.out,
    })?;
    println!("{}", summary.dir.display());
    let r = &summary.report;
    println!(
        "responses={} degenerate={} over_length={} total_usd={:.4}",
        r.responses, r.degenerate, r.over_length, r.total_usd
    );
    Ok(summary.exit_code())
}

fn dispatch(cli: Cli) -> Result<i32, RunError> {
    match cli.command {
        Command::Run(args) => run_cmd(args),
        Command::Stats { run_dir } => {
            let rows = run::cmd_stats(&run_dir)?;
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for row in rows {
                w.serialize(row).map_err(std::io::Error::other)?;
            }
            w.flush()?;
            Ok(0)
        }
        Command::Replay { path } => {
            let checks = run::cmd_replay(&path)?;
            let mut failed = false;
            for c in &checks {
                let status = match c.matches_snapshot {
                    Some(true) => "ok",
                    Some(false) => {
                        failed = true;
                        "MISMATCH"
                    }
                    None => "no-snapshot",
                };
                println!(
                    "{status}\t{}\tevents={}\tactive={}",
                    c.journal.display(),
                    c.events,
                    c.active
                );
            }
            Ok(i32::from(failed))
        }
        Command::ValidateCorpus { path } => {
            let s = run::cmd_validate_corpus(&path)?;
            println!(
                "dialogues={} transcripts={} turns={} annotations={} unannotated_sessions={}",
                s.dialogues, s.transcripts, s.turns, s.annotations, s.unannotated_sessions
            );
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
