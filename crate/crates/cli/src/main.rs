use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use gwwalk_core::lab::{self, AnnealedParams, OracleParams, Outcome, QuenchedParams, SpeedParams, TrapParams, VarianceParams};
use gwwalk_core::{derive_seed, DerivedLaws, OffspringLaw, TreeHandle};

const GIT_DESCRIBE: &str = env!("GWWALK_GIT_DESCRIBE");

#[derive(Parser)]
#[command(name = "gwwalk", version, about = "Biased random walks on Galton-Watson trees with leaves")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Thresholds and regime labels for a list of biases.
    Regimes(Common),
    /// Speed by direct and regeneration estimators; block independence.
    Speed(Common),
    /// Standardized |X_n| over fresh trees against N(0,1).
    AnnealedClt(Common),
    /// Standardized |X_n| over many walks on a few fixed trees.
    QuenchedClt(Common),
    /// Second-moment trend of trap return times.
    TrapMoments(Common),
    /// Decomposition, kernel, branch heights and root excursions against exact oracles.
    OracleCompare(Common),
    /// Across-tree variance of quenched expectations as n grows.
    QuenchedVariance(Common),
    /// Print the first generations of one tree in the line-based text format.
    TreeDump(TreeDump),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Biases, comma separated or repeated.
    #[arg(long, value_delimiter = ',')]
    beta: Vec<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct TreeDump {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Replicate index; the tree seed is derived exactly as in the experiments.
    #[arg(long, default_value_t = 0)]
    index: u64,
    #[arg(long, default_value_t = 3)]
    depth: u32,
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    experiment: Option<String>,
    law: Option<OffspringLaw>,
    betas: Option<Vec<f64>>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    threads: Option<usize>,
    params: Option<serde_json::Value>,
}

#[derive(Debug, Serialize)]
struct Resolved {
    experiment: String,
    law: OffspringLaw,
    betas: Vec<f64>,
    seed: u64,
    out: PathBuf,
    threads: Option<usize>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Verdict,
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn default_law() -> OffspringLaw {
    OffspringLaw::new([(0, 0.25), (2, 0.75)]).expect("reference law is valid")
}

fn default_betas(experiment: &str) -> Vec<f64> {
    match experiment {
        "regimes" => vec![0.5, 2.0 / 3.0, 1.0, 2f64.sqrt(), 1.5, 1.8, 2.0, 2.5],
        "speed" => vec![1.0, 1.2, 1.4, 1.6, 1.8, 1.9],
        "annealed-clt" => vec![1.0, 1.8],
        "trap-moments" => vec![1.0, 1.5],
        "oracle-compare" => vec![2.0],
        _ => vec![1.0],
    }
}

fn read_config(path: Option<&Path>) -> Result<ConfigFile, Failure> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))
}

fn params<T: DeserializeOwned + Default>(value: Option<serde_json::Value>) -> Result<T, Failure> {
    match value {
        None => Ok(T::default()),
        Some(v) => serde_json::from_value(v).map_err(|e| Failure::Usage(format!("invalid params: {e}"))),
    }
}

fn resolve(experiment: &str, args: &Common, file: &ConfigFile) -> Result<Resolved, Failure> {
    if let Some(e) = &file.experiment {
        if e != experiment {
            return Err(Failure::Usage(format!("config is for experiment `{e}`, not `{experiment}`")));
        }
    }
    Ok(Resolved {
        experiment: experiment.to_string(),
        law: file.law.clone().unwrap_or_else(default_law),
        betas: if !args.beta.is_empty() {
            args.beta.clone()
        } else {
            file.betas.clone().unwrap_or_else(|| default_betas(experiment))
        },
        seed: args.seed.or(file.seed).unwrap_or(lab::DEFAULT_SEED),
        out: args.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from("results")),
        threads: args.threads.or(file.threads),
    })
}

fn run_experiment(experiment: &str, args: Common) -> Result<(), Failure> {
    let started = Instant::now();
    let mut file = read_config(args.config.as_deref())?;
    let cfg = resolve(experiment, &args, &file)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let laws = Arc::new(DerivedLaws::new(&cfg.law)?);
    let raw = file.params.take();
    let (outcome, params): (Outcome, serde_json::Value) = match experiment {
        "regimes" => (lab::regimes(&laws, &cfg.betas)?, json!({})),
        "speed" => {
            let p: SpeedParams = params(raw)?;
            (lab::speed(&laws, &cfg.betas, p, cfg.seed)?, json!(p))
        }
        "annealed-clt" => {
            let p: AnnealedParams = params(raw)?;
            (lab::annealed_clt_experiment(&laws, &cfg.betas, p, cfg.seed)?, json!(p))
        }
        "quenched-clt" => {
            let p: QuenchedParams = params(raw)?;
            (lab::quenched_clt_experiment(&laws, &cfg.betas, p, cfg.seed)?, json!(p))
        }
        "trap-moments" => {
            let p: TrapParams = params(raw)?;
            (lab::trap_moments_experiment(&laws, &cfg.betas, p, cfg.seed)?, json!(p))
        }
        "oracle-compare" => {
            let p: OracleParams = params(raw)?;
            (lab::oracle_compare(&laws, &cfg.betas, &p, cfg.seed)?, json!(p))
        }
        "quenched-variance" => {
            let p: VarianceParams = params(raw)?;
            (lab::quenched_variance_experiment(&laws, &cfg.betas, &p, cfg.seed)?, json!(p))
        }
        other => return Err(Failure::Usage(format!("unknown experiment `{other}`"))),
    };

    std::fs::create_dir_all(&cfg.out)?;
    let mut written = Vec::new();
    for (stem, table) in &outcome.tables {
        let path = cfg.out.join(format!("{stem}.csv"));
        std::fs::write(&path, table.to_csv())?;
        written.push(path);
    }
    let summary = json!({
        "experiment": experiment,
        "config": cfg,
        "params": params,
        "git_describe": GIT_DESCRIBE,
        "wall_clock_seconds": started.elapsed().as_secs_f64(),
        "pass": outcome.passed(),
        "checks": outcome.checks,
        "results": outcome.summary,
    });
    let json_path = cfg.out.join(format!("{experiment}.json"));
    std::fs::write(&json_path, serde_json::to_string_pretty(&summary)? + "\n")?;
    written.push(json_path);

    for c in &outcome.checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    for p in &written {
        println!("wrote {}", p.display());
    }
    if outcome.passed() {
        Ok(())
    } else {
        Err(Failure::Verdict)
    }
}

fn tree_dump(args: TreeDump) -> Result<(), Failure> {
    let file = read_config(args.config.as_deref())?;
    let law = file.law.unwrap_or_else(default_law);
    let seed = args.seed.or(file.seed).unwrap_or(lab::DEFAULT_SEED);
    let tree = TreeHandle::new(derive_seed(seed, "tree", args.index), Arc::new(DerivedLaws::new(&law)?));
    let text = tree.truncate(args.depth).to_text();
    match args.out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Regimes(a) => run_experiment("regimes", a),
        Command::Speed(a) => run_experiment("speed", a),
        Command::AnnealedClt(a) => run_experiment("annealed-clt", a),
        Command::QuenchedClt(a) => run_experiment("quenched-clt", a),
        Command::TrapMoments(a) => run_experiment("trap-moments", a),
        Command::OracleCompare(a) => run_experiment("oracle-compare", a),
        Command::QuenchedVariance(a) => run_experiment("quenched-variance", a),
        Command::TreeDump(a) => tree_dump(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verdict) => ExitCode::from(2),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
