//! Command-line driver: bundle adjustment, trajectory and map evaluation,
//! synthetic scene generation.
//!
//! Exit codes: 0 success, 2 input error, 3 solver failure, 4 evaluation
//! error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};
use sha2::{Digest, Sha256};
use surfel_ba::cloud_io::{
    read_cloud, read_trajectory, write_cloud, write_surfel_map, write_trajectory, Cloud, CloudFormat, TrajectoryFormat,
};
use surfel_ba::config::{KeyValues, PipelineConfig};
use surfel_ba::evaluation::{ate_stats, generate_scene, map_metrics, EvalReport, SceneSpec};
use surfel_ba::solver::{run_mad_ba, write_metrics_csv, SolverError};
use surfel_ba::Execution;

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "surfel-ba", version, about = "Surfel-based LiDAR bundle adjustment")]
struct Cli {
    /// Log progress to stderr (RUST_LOG takes precedence).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Refine a trajectory and build a surfel map from a config file.
    Ba {
        config: PathBuf,
        /// Override a config key, `key=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Absolute trajectory error after rigid alignment.
    EvalAte {
        estimate: PathBuf,
        reference: PathBuf,
        #[arg(long, default_value = "tum")]
        format: TrajectoryFormat,
        /// Largest timestamp gap for a matched pair, seconds.
        #[arg(long, default_value_t = 0.05)]
        max_dt: f64,
        /// Also write the report as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Accuracy, completion, Chamfer-L1 and F-score of a point map.
    EvalMap {
        map: PathBuf,
        reference: PathBuf,
        /// Cloud format of both files; inferred from the extension when absent.
        #[arg(long)]
        format: Option<CloudFormat>,
        /// Distances above this are excluded, meters.
        #[arg(long, default_value_t = 1.0)]
        overlap: f64,
        /// F-score inlier distance, meters.
        #[arg(long, default_value_t = 0.2)]
        f_threshold: f64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write a synthetic scene with clouds, trajectories, reference map and
    /// a ready-to-run `ba.cfg`.
    Synth {
        out_dir: PathBuf,
        /// Scene spec file; preset defaults are used for missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

/// Error carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl ToString) -> Self {
        Failure { code: 2, message: message.to_string() }
    }

    fn solver(message: impl ToString) -> Self {
        Failure { code: 3, message: message.to_string() }
    }

    fn evaluation(message: impl ToString) -> Self {
        Failure { code: 4, message: message.to_string() }
    }
}

impl From<surfel_ba::Error> for Failure {
    fn from(e: surfel_ba::Error) -> Self {
        use surfel_ba::Error as E;
        match &e {
            E::Solver(SolverError::InvalidInput(_)) => Failure::input(e),
            E::Solver(SolverError::Evaluation(_)) | E::Eval(_) => Failure::evaluation(e),
            E::Solver(_) => Failure::solver(e),
            E::CloudIo(_) | E::Config(_) | E::Geometry(_) => Failure::input(e),
        }
    }
}

/// Lifts a module error into a [`Failure`] with its module-tagged message.
fn tagged<E: Into<surfel_ba::Error>>(e: E) -> Failure {
    Failure::from(e.into())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::input(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| Failure::input(format!("cannot create {}: {e}", path.display())))
}

fn sha256_file(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::input(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Run record: tool version, command, configuration snapshot, and hashes
/// of every input and output file.
struct Manifest {
    text: String,
}

impl Manifest {
    fn new(command: &str, config: &str) -> Self {
        let mut text = format!("tool surfel-ba {VERSION}\ncommand {command}\n[config]\n{config}");
        if !text.ends_with('\n') {
            text.push('\n');
        }
        Manifest { text }
    }

    fn section(&mut self, name: &str, files: &[PathBuf], root: Option<&Path>) -> Result<(), Failure> {
        let _ = writeln!(self.text, "[{name}]");
        for f in files {
            let shown = root.and_then(|r| f.strip_prefix(r).ok()).unwrap_or(f);
            let _ = writeln!(self.text, "sha256 {} {}", sha256_file(f)?, shown.display());
        }
        Ok(())
    }

    fn write(&self, path: &Path) -> Result<(), Failure> {
        write_file(path, &self.text)
    }
}

/// Scan files in `dir` with the format's extension, sorted by name.
fn list_clouds(dir: &Path, format: CloudFormat) -> Result<Vec<PathBuf>, Failure> {
    let entries = fs::read_dir(dir).map_err(|e| Failure::input(format!("cannot list {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == format.extension()))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::input(format!("no .{} files in {}", format.extension(), dir.display())));
    }
    Ok(files)
}

fn set_threads(threads: usize) {
    #[cfg(feature = "parallel")]
    if threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            warn!("cannot set thread count: {e}");
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

fn cmd_ba(config_path: &Path, overrides: &[String]) -> Result<(), Failure> {
    let config = PipelineConfig::load(config_path, overrides).map_err(tagged)?;
    set_threads(config.threads);
    let files = list_clouds(&config.clouds, config.cloud_format)?;
    let clouds: Vec<Cloud> = files
        .iter()
        .enumerate()
        .map(|(k, f)| read_cloud(f, config.cloud_format, k))
        .collect::<Result<_, _>>()
        .map_err(tagged)?;
    let initial = read_trajectory(&config.initial_trajectory, config.trajectory_format).map_err(tagged)?;
    let ground_truth = match &config.ground_truth {
        Some(p) => Some(read_trajectory(p, config.trajectory_format).map_err(tagged)?),
        None => None,
    };
    info!("{} clouds from {}", clouds.len(), config.clouds.display());

    let out = run_mad_ba(&clouds, &initial, &config.ba, ground_truth.as_ref()).map_err(tagged)?;
    if !out.converged {
        warn!("stopped at the outer iteration cap before converging");
    }

    let dir = &config.output_dir;
    create_dir(dir)?;
    let trajectory = dir.join("trajectory.tum");
    let surfels = dir.join("surfels.ply");
    let csv = dir.join("iterations.csv");
    write_trajectory(&out.trajectory, &trajectory, TrajectoryFormat::Tum).map_err(tagged)?;
    write_surfel_map(&out.surfels.surfels, &surfels).map_err(tagged)?;
    write_metrics_csv(&out.metrics, &csv).map_err(tagged)?;

    let mut manifest = Manifest::new("ba", &config.to_text());
    let mut inputs = files;
    inputs.push(config.initial_trajectory.clone());
    inputs.extend(config.ground_truth.clone());
    manifest.section("inputs", &inputs, None)?;
    manifest.section("outputs", &[trajectory, surfels, csv], Some(dir))?;
    manifest.write(&dir.join("manifest.txt"))?;

    let last = out.metrics.last().expect("metrics include the initial state");
    println!("iterations {}", out.iterations());
    println!("converged {}", out.converged);
    println!("final_cost {:.9e}", last.total_cost);
    println!("surfels {}", last.surfels);
    if let Some(a) = last.ate_rms {
        println!("ate_rms_m {a:.9}");
    }
    println!("output {}", dir.display());
    Ok(())
}

fn print_report(report: &EvalReport, csv: Option<&Path>) -> Result<(), Failure> {
    print!("{}", report.to_text());
    if let Some(path) = csv {
        write_file(path, report.to_csv())?;
    }
    Ok(())
}

fn cmd_eval_ate(
    estimate: &Path,
    reference: &Path,
    format: TrajectoryFormat,
    max_dt: f64,
    csv: Option<&Path>,
) -> Result<(), Failure> {
    let est = read_trajectory(estimate, format).map_err(tagged)?;
    let gt = read_trajectory(reference, format).map_err(tagged)?;
    let stats = ate_stats(&est, &gt, max_dt).map_err(tagged)?;
    print_report(&EvalReport { ate: Some(stats), map: None }, csv)
}

fn infer_format(path: &Path) -> Result<CloudFormat, Failure> {
    path.extension()
        .and_then(|e| e.to_str())
        .and_then(|e| e.parse().ok())
        .ok_or_else(|| Failure::input(format!("cannot infer the cloud format of {}; pass --format", path.display())))
}

fn cmd_eval_map(
    map: &Path,
    reference: &Path,
    format: Option<CloudFormat>,
    overlap: f64,
    f_threshold: f64,
    csv: Option<&Path>,
) -> Result<(), Failure> {
    let map_format = format.map_or_else(|| infer_format(map), Ok)?;
    let ref_format = format.map_or_else(|| infer_format(reference), Ok)?;
    let m = read_cloud(map, map_format, 0).map_err(tagged)?;
    let g = read_cloud(reference, ref_format, 0).map_err(tagged)?;
    let metrics = map_metrics(&m.points, &g.points, overlap, f_threshold, Execution::Parallel).map_err(tagged)?;
    print_report(&EvalReport { ate: None, map: Some(metrics) }, csv)
}

fn cmd_synth(out_dir: &Path, spec_path: Option<&Path>, overrides: &[String]) -> Result<(), Failure> {
    let mut kv = match spec_path {
        Some(p) => KeyValues::read(p).map_err(tagged)?,
        None => KeyValues::default(),
    };
    for o in overrides {
        kv.set_pair(o).map_err(tagged)?;
    }
    let snapshot: String = kv.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    let spec = SceneSpec::from_key_values(kv).map_err(tagged)?;
    let scene = generate_scene(&spec, Execution::Parallel).map_err(tagged)?;

    let clouds_dir = out_dir.join("clouds");
    create_dir(&clouds_dir)?;
    let mut outputs = Vec::new();
    for (k, cloud) in scene.clouds.iter().enumerate() {
        let path = clouds_dir.join(format!("{k:06}.bin"));
        write_cloud(&cloud.points, &path, CloudFormat::KittiBin).map_err(tagged)?;
        outputs.push(path);
    }
    let gt = out_dir.join("ground_truth.tum");
    let initial = out_dir.join("initial.tum");
    let map = out_dir.join("gt_map.ply");
    let cfg = out_dir.join("ba.cfg");
    write_trajectory(&scene.ground_truth, &gt, TrajectoryFormat::Tum).map_err(tagged)?;
    write_trajectory(&scene.initial, &initial, TrajectoryFormat::Tum).map_err(tagged)?;
    write_cloud(&scene.gt_map, &map, CloudFormat::Ply).map_err(tagged)?;
    write_file(
        &cfg,
        "# Paths are relative to this file.\n\
         clouds = clouds\n\
         cloud_format = kitti-bin\n\
         initial_trajectory = initial.tum\n\
         ground_truth = ground_truth.tum\n\
         trajectory_format = tum\n\
         output_dir = ba_out\n",
    )?;
    outputs.extend([gt, initial, map, cfg]);

    let mut manifest = Manifest::new("synth", &snapshot);
    manifest.section("outputs", &outputs, Some(out_dir))?;
    manifest.write(&out_dir.join("manifest.txt"))?;
    println!("{} scans written to {}", scene.clouds.len(), out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Ba { config, overrides } => cmd_ba(config, overrides),
        Command::EvalAte { estimate, reference, format, max_dt, csv } => {
            cmd_eval_ate(estimate, reference, *format, *max_dt, csv.as_deref())
        }
        Command::EvalMap { map, reference, format, overlap, f_threshold, csv } => {
            cmd_eval_map(map, reference, *format, *overlap, *f_threshold, csv.as_deref())
        }
        Command::Synth { out_dir, spec, overrides } => cmd_synth(out_dir, spec.as_deref(), overrides),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
