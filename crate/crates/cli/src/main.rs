//! `repshare` command-line tool.

use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

use repshare::experiment::{
    default_noise_stage, noise_sweep_toy, run_noise_sweep, run_sweep, write_experiment_csv, write_noise_csv,
    write_sweep_csv, DEFAULT_SIGMAS,
};
use repshare::metrics::{correlation_report_json, read_accuracy_pairs, read_experiment_csv};
use repshare::planner::{summary_json, write_plans_jsonl};
use repshare::toy::DEFAULT_EVAL_SIZE;
use repshare::{
    correlate_table, enumerate_plans, fit_estimator, forward, forward_merged, gen_toy_pair, load_manifest, npy,
    read_dumps, select_plan, similarity_matrix, write_dumps, AccuracyEstimator, InjectionPoint, SelectMode,
    SharingMode, SimilarityMatrix,
};

#[derive(Parser)]
#[command(name = "repshare", version, about = "Similarity-guided layer sharing between models")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (defaults to one per core).
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy model pair, its weights and evaluation inputs.
    GenToy {
        #[arg(long)]
        out: PathBuf,
        /// Number of evaluation inputs.
        #[arg(long, default_value_t = DEFAULT_EVAL_SIZE as u32, value_parser = clap::value_parser!(u32).range(2..))]
        n: u32,
    },
    /// Run a model and write its per-stage outputs.
    Dump {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Similarity matrix between two dump sets.
    Cka {
        /// Donor dumps (dumps.json or its directory).
        #[arg(long)]
        a: PathBuf,
        /// Target dumps.
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = SharingMode::Cross)]
        mode: SharingMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a model with a shared representation injected at a stage.
    Exec {
        #[arg(long)]
        manifest: PathBuf,
        /// Injection point as `stage=<t>,rep=<path>`.
        #[arg(long, value_parser = parse_injection)]
        inject: Injection,
        /// Predictions file (NPY).
        #[arg(long)]
        out: PathBuf,
    },
    /// Share every donor stage into the target and measure fidelity.
    Sweep {
        #[arg(long)]
        donor: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long, default_value_t = SharingMode::Cross)]
        mode: SharingMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inject a model's own stage output plus Gaussian noise.
    NoiseSweep {
        /// Model to perturb; the toy pair's model B when omitted.
        #[arg(long, requires = "inputs")]
        manifest: Option<PathBuf>,
        #[arg(long, requires = "manifest")]
        inputs: Option<PathBuf>,
        /// Stage to perturb; the deepest valid cut before the output by default.
        #[arg(long)]
        stage: Option<usize>,
        /// Comma-separated noise scales, relative to the stage output's std.
        #[arg(long, value_delimiter = ',')]
        sigmas: Option<Vec<f64>>,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank metrics by |r| against accuracy over an experiment table.
    Correlate {
        /// CSV with header Acc,S,FLOPs,Size,Params.
        #[arg(long)]
        table: PathBuf,
        /// Output JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the similarity-to-accuracy estimator.
    Fit {
        /// CSV with an S column and an Acc, accuracy or fidelity column.
        #[arg(long)]
        table: PathBuf,
        /// Output JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Enumerate sharing plans and select one under a constraint.
    Plan(PlanArgs),
}

#[derive(Args)]
#[command(group(ArgGroup::new("constraint").required(true).args(["min_similarity", "budget"])))]
struct PlanArgs {
    /// Donor manifest.
    #[arg(long)]
    donor: PathBuf,
    /// Donor dumps (dumps.json or its directory).
    #[arg(long)]
    donor_dumps: PathBuf,
    /// Target manifest.
    #[arg(long)]
    target: PathBuf,
    /// Cross-stage similarity matrix JSON from `cka`.
    #[arg(long)]
    similarity: PathBuf,
    /// Estimator JSON from `fit`; the default estimator when omitted.
    #[arg(long)]
    estimator: Option<PathBuf>,
    /// Maximise savings over plans with at least this similarity.
    #[arg(long)]
    min_similarity: Option<f64>,
    /// Maximise estimated accuracy over plans saving at least this many bytes.
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone)]
struct Injection {
    stage: usize,
    rep: PathBuf,
}

fn parse_injection(s: &str) -> Result<Injection, String> {
    let (mut stage, mut rep) = (None, None);
    for part in s.split(',') {
        match part.split_once('=') {
            Some(("stage", v)) => stage = Some(v.parse::<usize>().map_err(|e| format!("stage '{v}': {e}"))?),
            Some(("rep", v)) if !v.is_empty() => rep = Some(PathBuf::from(v)),
            _ => return Err(format!("unexpected '{part}', expected stage=<t>,rep=<path>")),
        }
    }
    match (stage, rep) {
        (Some(stage), Some(rep)) => Ok(Injection { stage, rep }),
        _ => Err("expected stage=<t>,rep=<path>".into()),
    }
}

/// A failed run: message for stderr and the process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<repshare::Error> for Failure {
    fn from(e: repshare::Error) -> Self {
        Failure {
            code: if e.is_io() { 3 } else { 2 },
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure {
        code: 3,
        message: format!("{}: {e}", path.display()),
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

/// Writes `bytes` to a temporary sibling of `path`, then renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult {
    let dir = parent_dir(path);
    std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    let name = path.file_name().ok_or_else(|| io_failure(path, io::ErrorKind::InvalidInput.into()))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = std::fs::write(&tmp, bytes).and_then(|()| std::fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(io_failure(path, e));
    }
    Ok(())
}

/// Scratch directory beside an output directory. `commit` moves its contents
/// into the output; dropping it uncommitted deletes it.
struct Staging {
    dir: PathBuf,
    out: PathBuf,
}

impl Staging {
    fn new(out: &Path) -> CliResult<Self> {
        let parent = parent_dir(out);
        let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
        let dir = parent.join(format!(".{name}.staging-{}", std::process::id()));
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
        Ok(Staging { dir, out: out.to_path_buf() })
    }

    fn path(&self) -> &Path {
        &self.dir
    }

    fn commit(self) -> CliResult {
        if !self.out.exists() {
            return std::fs::rename(&self.dir, &self.out).map_err(|e| io_failure(&self.out, e));
        }
        let entries = std::fs::read_dir(&self.dir).map_err(|e| io_failure(&self.dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| io_failure(&self.dir, e))?;
            let dest = self.out.join(entry.file_name());
            if dest.is_dir() {
                std::fs::remove_dir_all(&dest).map_err(|e| io_failure(&dest, e))?;
            } else if dest.exists() {
                std::fs::remove_file(&dest).map_err(|e| io_failure(&dest, e))?;
            }
            std::fs::rename(entry.path(), &dest).map_err(|e| io_failure(&dest, e))?;
        }
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.dir);
    }
}

fn csv_bytes(write: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    write(&mut buf).expect("writing CSV to memory");
    buf
}

fn staged_file(staging: &Staging, name: &str, bytes: &[u8]) -> CliResult {
    let path = staging.path().join(name);
    std::fs::write(&path, bytes).map_err(|e| io_failure(&path, e))
}

fn gen_toy(seed: u64, n: u32, out: &Path) -> CliResult {
    let staging = Staging::new(out)?;
    gen_toy_pair(seed, n as usize, staging.path())?;
    staging.commit()?;
    println!("wrote toy pair (seed {seed}, {n} inputs) to {}", out.display());
    Ok(())
}

fn dump(manifest: &Path, inputs: &Path, out: &Path) -> CliResult {
    let g = load_manifest(manifest)?;
    let x = npy::read_tensor(inputs)?;
    let result = forward(&g, &x)?;
    let staging = Staging::new(out)?;
    write_dumps(&result.dumps, staging.path())?;
    staging.commit()?;
    println!(
        "wrote {} stage dumps of '{}' to {}",
        result.dumps.len(),
        g.name,
        out.join(&g.name).join("dumps.json").display()
    );
    Ok(())
}

fn cka_cmd(a: &Path, b: &Path, mode: SharingMode, out: &Path) -> CliResult {
    let (da, db) = (read_dumps(a)?, read_dumps(b)?);
    let sim = similarity_matrix(&da, &db, mode)?;
    let staging = Staging::new(out)?;
    staged_file(&staging, "similarity.json", sim.to_json().as_bytes())?;
    staged_file(&staging, "similarity.csv", &csv_bytes(|w| sim.write_csv(w)))?;
    staging.commit()?;
    println!("{mode} similarity of '{}' vs '{}' written to {}", da.model, db.model, out.display());
    Ok(())
}

fn exec(manifest: &Path, inject: &Injection, out: &Path) -> CliResult {
    let g = load_manifest(manifest)?;
    let rep = npy::read_tensor(&inject.rep)?;
    let inj = InjectionPoint::new(&g, inject.stage, rep)?;
    let predictions = forward_merged(&g, &inj)?;
    write_atomic(out, &npy::encode(&predictions)?)?;
    println!("wrote predictions {:?} to {}", predictions.shape(), out.display());
    Ok(())
}

fn sweep(donor: &Path, target: &Path, inputs: &Path, mode: SharingMode, out: &Path) -> CliResult {
    let (a, b) = (load_manifest(donor)?, load_manifest(target)?);
    let x = npy::read_tensor(inputs)?;
    let result = run_sweep(&a, &b, mode, &x)?;
    let staging = Staging::new(out)?;
    staged_file(&staging, "sweep.csv", &csv_bytes(|w| write_sweep_csv(&result.rows, w)))?;
    let table = result.experiment_rows(&b);
    staged_file(&staging, "experiments.csv", &csv_bytes(|w| write_experiment_csv(&table, w)))?;
    staged_file(&staging, "similarity.json", result.similarity.to_json().as_bytes())?;
    staging.commit()?;
    println!("{} sweep rows written to {}", result.rows.len(), out.display());
    Ok(())
}

fn noise_sweep(
    seed: u64,
    manifest: Option<&Path>,
    inputs: Option<&Path>,
    stage: Option<usize>,
    sigmas: &[f64],
    out: &Path,
) -> CliResult {
    let rows = match (manifest, inputs) {
        (Some(m), Some(i)) => {
            let g = load_manifest(m)?;
            let x = npy::read_tensor(i)?;
            let stage = match stage {
                Some(s) => s,
                None => default_noise_stage(&g)?,
            };
            run_noise_sweep(&g, &x, stage, seed, sigmas)?
        }
        _ => {
            if stage.is_some() {
                return Err(Failure {
                    code: 1,
                    message: "--stage needs --manifest and --inputs".into(),
                });
            }
            let work = Staging::new(&parent_dir(out).join("toy"))?;
            noise_sweep_toy(seed, sigmas, work.path())?
        }
    };
    write_atomic(out, &csv_bytes(|w| write_noise_csv(&rows, w)))?;
    println!("{} noise rows written to {}", rows.len(), out.display());
    Ok(())
}

fn correlate(table: &Path, out: &Path) -> CliResult {
    let rows = read_experiment_csv(table)?;
    let report = correlate_table(&rows)?;
    write_atomic(out, correlation_report_json(&report).as_bytes())?;
    for m in &report {
        match m.abs_r {
            Some(r) => println!("{:<7} |r| = {r:.4}", m.metric),
            None => println!("{:<7} |r| undefined", m.metric),
        }
    }
    Ok(())
}

fn fit(table: &Path, out: &Path) -> CliResult {
    let pairs = read_accuracy_pairs(table)?;
    let est = fit_estimator(&pairs)?;
    write_atomic(out, serde_json::to_string_pretty(&est).expect("estimator serializes").as_bytes())?;
    println!(
        "threshold {:.4}, floor {:.4}, line {:.4} * S + {:.4}",
        est.threshold, est.floor_value, est.slope, est.intercept
    );
    Ok(())
}

fn plan(args: &PlanArgs) -> CliResult {
    let donor = load_manifest(&args.donor)?;
    let target = load_manifest(&args.target)?;
    let dumps = read_dumps(&args.donor_dumps)?;
    let sim = SimilarityMatrix::read_json(&args.similarity)?;
    let est = match &args.estimator {
        Some(p) => AccuracyEstimator::read_json(p)?,
        None => AccuracyEstimator::default(),
    };
    let mode = match (args.min_similarity, args.budget) {
        (Some(min_similarity), _) => SelectMode::MaxSavings { min_similarity },
        (None, Some(budget_bytes)) => SelectMode::MaxAccuracy { budget_bytes },
        (None, None) => unreachable!("clap requires a constraint"),
    };
    let plans = enumerate_plans(&donor, &dumps, &target, &sim, &est)?;
    let selected = select_plan(&plans, mode);

    let staging = Staging::new(&args.out)?;
    let mut lines = Vec::new();
    write_plans_jsonl(&plans, &mut lines).expect("writing JSON lines to memory");
    staged_file(&staging, "plans.jsonl", &lines)?;
    staged_file(&staging, "summary.json", summary_json(&plans, mode, selected).as_bytes())?;
    staging.commit()?;
    match selected {
        Some(p) => println!(
            "selected {} stage {} -> {} stage {}: S = {:.4}, saves {} bytes, estimated accuracy {:.4}",
            p.donor_model, p.donor_stage, p.target_model, p.target_stage, p.similarity, p.savings_bytes,
            p.estimated_accuracy
        ),
        None => println!("no valid plan meets the constraint"),
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build_global()
            .map_err(|e| Failure { code: 1, message: format!("--threads: {e}") })?;
    }
    match &cli.command {
        Command::GenToy { out, n } => gen_toy(cli.seed, *n, out),
        Command::Dump { manifest, inputs, out } => dump(manifest, inputs, out),
        Command::Cka { a, b, mode, out } => cka_cmd(a, b, *mode, out),
        Command::Exec { manifest, inject, out } => exec(manifest, inject, out),
        Command::Sweep { donor, target, inputs, mode, out } => sweep(donor, target, inputs, *mode, out),
        Command::NoiseSweep { manifest, inputs, stage, sigmas, out } => noise_sweep(
            cli.seed,
            manifest.as_deref(),
            inputs.as_deref(),
            *stage,
            sigmas.as_deref().unwrap_or(&DEFAULT_SIGMAS),
            out,
        ),
        Command::Correlate { table, out } => correlate(table, out),
        Command::Fit { table, out } => fit(table, out),
        Command::Plan(args) => plan(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("REPSHARE_LOG", "error")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            log::debug!("exiting with code {}", f.code);
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
