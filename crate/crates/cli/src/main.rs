use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedtgnn::config::RunConfig;
use fedtgnn::data::Schema;
use fedtgnn::experiment::{CellStatus, ExperimentResult, Method};
use fedtgnn::Result;
use fedtgnn_cli::{audit_tree, fetch, load, run_and_write, write_ablation};

#[derive(Parser)]
#[command(name = "fedtgnn", version, about = "Federated semi-supervised GNN simulator for clinical tables")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Copy a public dataset into data/<name>.csv, checking its shape and writing a checksum.
    Fetch {
        #[arg(long)]
        dataset: Schema,
        /// Local CSV or KEEL/ARFF file.
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Expected SHA-256 of the canonical CSV.
        #[arg(long)]
        checksum: Option<String>,
    },
    /// One method at one scarcity level, cross-validated.
    Run(RunArgs),
    /// Methods by scarcity levels.
    Grid(RunArgs),
    /// The full method against every single-component ablation.
    Ablate(RunArgs),
    /// Check dumped federation messages for patient-level payloads.
    Audit { dir: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    /// Method name; comma separated for `grid`.
    #[arg(long)]
    method: Option<String>,
    /// Missing-label ratio; comma separated for `grid`.
    #[arg(long)]
    scarcity: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    /// Comma-separated seeds, one per fold.
    #[arg(long)]
    seed_set: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    dump_messages: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.lr=0.005`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Run,
    Grid,
    Ablate,
}

fn resolve(args: &RunArgs, mode: Mode) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    match mode {
        Mode::Grid if args.config.is_none() => {
            cfg.methods = Method::all().into_iter().filter(|m| !matches!(m, Method::Without(_))).collect();
            cfg.scarcity = vec![0.1, 0.3, 0.5, 0.7, 0.8];
        }
        Mode::Ablate => cfg.methods = Method::ablations(),
        _ => {}
    }
    let path = |p: &PathBuf| p.to_string_lossy().into_owned();
    let flags = [
        ("data.dataset", args.dataset.clone()),
        ("experiment.methods", args.method.clone()),
        ("experiment.scarcity", args.scarcity.clone()),
        ("experiment.folds", args.folds.map(|f| f.to_string())),
        ("experiment.seeds", args.seed_set.clone()),
        ("experiment.out", args.out.as_ref().map(path)),
        ("experiment.jobs", args.jobs.map(|j| j.to_string())),
        ("experiment.dump_messages", args.dump_messages.as_ref().map(path)),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    for o in &args.overrides {
        let (key, value) = o
            .split_once('=')
            .ok_or_else(|| fedtgnn::Error::Config(format!("--set expects SECTION.KEY=VALUE, got {o:?}")))?;
        cfg.set(key.trim(), value)?;
    }
    if mode == Mode::Run && (cfg.methods.len() != 1 || cfg.scarcity.len() != 1) {
        return Err(fedtgnn::Error::Config("`run` takes exactly one method and one scarcity level; use `grid` for more".into()));
    }
    if mode == Mode::Ablate {
        cfg.methods = Method::ablations();
    }
    Ok(cfg)
}

fn report(result: &ExperimentResult) -> bool {
    for s in &result.summaries {
        eprintln!(
            "{:<16} rho={:<4} auroc {:.4} ± {:.4}  macro_f1 {:.4} ± {:.4}  ({} folds)",
            s.method, s.scarcity, s.auroc.mean, s.auroc.std, s.macro_f1.mean, s.macro_f1.std, s.completed_folds
        );
    }
    let bad = result.incomplete();
    for r in &bad {
        let (kind, reason) = match &r.status {
            CellStatus::Skipped { reason } => ("skipped", reason.as_str()),
            CellStatus::Failed { reason } => ("failed", reason.as_str()),
            CellStatus::Ok => continue,
        };
        eprintln!("{kind}: {} rho={} {} fold {}: {reason}", r.dataset, r.scarcity, r.method, r.fold);
    }
    bad.is_empty()
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Fetch {
            dataset,
            source,
            out,
            checksum,
        } => {
            let out = out.unwrap_or_else(|| PathBuf::from(format!("data/{}.csv", dataset.name())));
            let f = fetch(dataset, &source, &out, checksum.as_deref())?;
            eprintln!("wrote {} ({} rows, {} features), sha256 {}", f.path.display(), f.rows, f.features, f.checksum);
            Ok(true)
        }
        Command::Run(args) => experiment(&args, Mode::Run),
        Command::Grid(args) => experiment(&args, Mode::Grid),
        Command::Ablate(args) => experiment(&args, Mode::Ablate),
        Command::Audit { dir } => {
            let mut ok = true;
            for (path, r) in audit_tree(&dir)? {
                let verdict = if r.passed() { "pass" } else { "FAIL" };
                eprintln!("{verdict}: {} ({} files, {} fields)", path.display(), r.files_scanned, r.fields_scanned);
                for v in &r.violations {
                    eprintln!("  {v}");
                }
                ok &= r.passed();
            }
            Ok(ok)
        }
    }
}

fn experiment(args: &RunArgs, mode: Mode) -> Result<bool> {
    let cfg = resolve(args, mode)?;
    let data = load(&cfg)?;
    log::info!("{}: {} rows, {} features, {} silos", cfg.dataset.name(), data.n_rows(), data.n_features(), cfg.effective_silos());
    let result = run_and_write(&cfg, &data)?;
    if mode == Mode::Ablate {
        print!("{}", write_ablation(&result, &PathBuf::from(&cfg.out))?);
    }
    Ok(report(&result))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
