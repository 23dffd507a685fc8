//! Command-line front end.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 filesystem
//! failure. Diagnostics go to stderr; metric lines go to stdout.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{
    case_metrics, cohort_summary, landmark_errors, load_landmarks, parse_values, save_error_table, save_metrics,
    transform_landmarks, CaseRecord,
};
use crate::model::save_checkpoint;
use crate::register::{register, RegistrationConfig, RegistrationMode};
use crate::synth::{generate_case, write_case_files, SynthConfig};
use crate::volume::{
    load_volume, rescale_to_u8, save_volume, sidecar_path, slice_values, write_pgm, Axis, Volume,
};
use crate::warp::{jacobian_determinant, load_field, save_field, warp_volume};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const THREADS_ENV: &str = "DEFREG_THREADS";

#[derive(Debug, Parser)]
#[command(name = "defreg", version, about = "Deformable registration of 3D volumes")]
pub struct Cli {
    /// Worker threads (0 = all cores). Falls back to DEFREG_THREADS.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Register a moving volume onto a fixed volume.
    Register(RegisterArgs),
    /// Landmark metrics for a field, or a cohort summary of values.
    Eval(EvalArgs),
    /// Generate a synthetic case with a known deformation.
    Synth(SynthArgs),
    /// Export a 2D slice of a volume or of a field's Jacobian as PGM.
    Slices(SlicesArgs),
    /// Print the tool version.
    Version,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    /// Fixed (reference) volume.
    #[arg(long)]
    pub fixed: PathBuf,
    /// Moving volume, deformed onto the fixed one.
    #[arg(long)]
    pub moving: PathBuf,
    /// Output displacement field (.dfield).
    #[arg(long)]
    pub out_field: PathBuf,
    /// Also write the moving volume warped by the result.
    #[arg(long)]
    pub out_warped: Option<PathBuf>,
    /// Report JSON [default: <out-field>.report.json]
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Run manifest [default: <out-field>.manifest.json]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Network weights after registration (convnet mode).
    #[arg(long)]
    pub out_checkpoint: Option<PathBuf>,
    /// JSON file with configuration fields; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Parameterization [default: freeform]
    #[arg(long, value_enum)]
    pub mode: Option<RegistrationMode>,
    /// Pyramid levels [default: 3 freeform, 1 convnet]
    #[arg(long)]
    pub levels: Option<usize>,
    /// Iterations per level [default: 200 freeform, 100 convnet]
    #[arg(long)]
    pub iters: Option<usize>,
    /// Per-level iterations, coarsest first, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub level_iters: Option<Vec<usize>>,
    /// Smoothness weight [default: 1.0]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// NCC window side in voxels, odd [default: 9]
    #[arg(long)]
    pub ncc_window: Option<usize>,
    /// Floor on the NCC denominator [default: 1e-5]
    #[arg(long)]
    pub variance_floor: Option<f64>,
    /// Adam learning rate [default: 1.0 freeform, 1e-4 convnet]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Relative loss change over 10 iterations that counts as converged [default: 1e-6]
    #[arg(long)]
    pub tol: Option<f64>,
    /// Wall-clock budget in seconds.
    #[arg(long)]
    pub max_seconds: Option<f64>,
    /// Seed for network initialization [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Network encoder depth [default: 3]
    #[arg(long)]
    pub net_levels: Option<usize>,
    /// Filters at the first network level [default: 8]
    #[arg(long)]
    pub base_filters: Option<usize>,
    /// Disable decoder batch normalization.
    #[arg(long)]
    pub no_batchnorm: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Summarize a column of per-case values instead of evaluating a field.
    #[arg(long, conflicts_with_all = ["field", "fixed_landmarks", "moving_landmarks"])]
    pub summarize: Option<PathBuf>,
    /// Displacement field produced by `register`.
    #[arg(long, required_unless_present = "summarize")]
    pub field: Option<PathBuf>,
    /// Landmarks on the fixed image (CSV id,x,y,z).
    #[arg(long, required_unless_present = "summarize")]
    pub fixed_landmarks: Option<PathBuf>,
    /// Corresponding landmarks on the moving image.
    #[arg(long, required_unless_present = "summarize")]
    pub moving_landmarks: Option<PathBuf>,
    /// Case label used in the output tables.
    #[arg(long, default_value = "case")]
    pub case: String,
    /// Metrics CSV; a JSON with per-landmark detail is written next to it.
    #[arg(long, default_value = "metrics.csv")]
    pub out: PathBuf,
    /// Long-format per-landmark errors (case,method,error).
    #[arg(long)]
    pub errors: Option<PathBuf>,
    /// Run manifest [default: <out>.manifest.json, or <summarize>.manifest.json]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Grid size [default: 48 48 48]
    #[arg(long, num_args = 3)]
    pub dims: Option<Vec<usize>>,
    /// Voxel spacing in mm [default: 1 1 1]
    #[arg(long, num_args = 3)]
    pub spacing: Option<Vec<f64>>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Large intensity blobs [default: 12]
    #[arg(long)]
    pub num_blobs: Option<usize>,
    /// Fine texture blobs per 1000 voxels [default: 8]
    #[arg(long)]
    pub texture_density: Option<f64>,
    /// Deformation bumps [default: 4]
    #[arg(long)]
    pub field_bumps: Option<usize>,
    /// Largest displacement in mm [default: 5]
    #[arg(long)]
    pub max_disp: Option<f64>,
    /// [default: 20]
    #[arg(long)]
    pub num_landmarks: Option<usize>,
    /// Gaussian noise added to the moving image [default: 0.02]
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Simulate a resection cavity in the moving image.
    #[arg(long)]
    pub cavity: bool,
}

#[derive(Debug, Args)]
pub struct SlicesArgs {
    /// Volume to slice.
    #[arg(long, conflicts_with = "field", required_unless_present = "field")]
    pub volume: Option<PathBuf>,
    /// Displacement field to slice.
    #[arg(long)]
    pub field: Option<PathBuf>,
    /// Render the Jacobian determinant of --field rather than its magnitude.
    #[arg(long, requires = "field")]
    pub jacobian: bool,
    /// Axis normal to the slice.
    #[arg(long, value_enum, default_value = "z")]
    pub axis: Axis,
    /// Slice index [default: middle of the axis]
    #[arg(long)]
    pub index: Option<usize>,
    /// Output PGM image.
    #[arg(long)]
    pub out: PathBuf,
}

/// Everything needed to rerun a command.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: Value,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub threads: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Digests of a file and, if present, its sidecar header.
fn digests(path: &Path) -> Result<Vec<InputDigest>> {
    let mut out = vec![InputDigest {
        path: path.display().to_string(),
        sha256: sha256_file(path)?,
    }];
    let side = sidecar_path(path);
    if side.exists() {
        out.push(InputDigest {
            path: side.display().to_string(),
            sha256: sha256_file(&side)?,
        });
    }
    Ok(out)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Recursively overlays `patch` onto `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn resolve<T: Serialize + serde::de::DeserializeOwned>(defaults: T, file: Option<&Path>) -> Result<T> {
    let Some(path) = file else {
        return Ok(defaults);
    };
    let mut v = serde_json::to_value(&defaults).expect("serializable");
    merge(&mut v, read_json(path)?);
    serde_json::from_value(v).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn registration_config(a: &RegisterArgs) -> Result<RegistrationConfig> {
    let file = a.config.as_deref().map(read_json).transpose()?;
    let file_mode = file
        .as_ref()
        .and_then(|v| v.get("mode"))
        .map(|m| serde_json::from_value::<RegistrationMode>(m.clone()))
        .transpose()
        .map_err(|e| Error::Config(format!("mode: {e}")))?;
    let mode = a.mode.or(file_mode).unwrap_or(RegistrationMode::Freeform);
    let mut cfg = resolve(RegistrationConfig::for_mode(mode), a.config.as_deref())?;
    cfg.mode = mode;
    if let Some(v) = a.levels {
        cfg.pyramid_levels = v;
    }
    if let Some(v) = a.iters {
        cfg.iterations_per_level = v;
        cfg.level_iterations = None;
    }
    if let Some(v) = &a.level_iters {
        cfg.level_iterations = Some(v.clone());
    }
    if let Some(v) = a.lambda {
        cfg.loss.reg_weight = v;
    }
    if let Some(v) = a.ncc_window {
        cfg.loss.ncc_window = v;
    }
    if let Some(v) = a.variance_floor {
        cfg.loss.variance_floor = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.tol {
        cfg.convergence_tol = v;
    }
    if a.max_seconds.is_some() {
        cfg.max_seconds = a.max_seconds;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.net_levels {
        cfg.convnet.levels = v;
    }
    if let Some(v) = a.base_filters {
        cfg.convnet.base_filters = v;
    }
    if a.no_batchnorm {
        cfg.convnet.use_batchnorm = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_register(a: &RegisterArgs, threads: usize) -> Result<()> {
    let start = Instant::now();
    let cfg = registration_config(a)?;
    let fixed = load_volume(&a.fixed)?;
    let moving = load_volume(&a.moving)?;
    let mut report = register(&fixed, &moving, &cfg)?;

    let mut outputs = vec![a.out_field.clone()];
    save_field(&report.field, &a.out_field)?;
    report.field_path = Some(a.out_field.display().to_string());
    if let Some(p) = &a.out_warped {
        save_volume(&warp_volume(&moving, &report.field), p)?;
        outputs.push(p.clone());
    }
    if let (Some(p), Some(net)) = (&a.out_checkpoint, &report.network) {
        save_checkpoint(net, p)?;
        report.checkpoint_path = Some(p.display().to_string());
        outputs.push(p.clone());
    }
    let report_path = a.report.clone().unwrap_or_else(|| with_suffix(&a.out_field, "report.json"));
    fs::write(&report_path, report.to_json() + "\n").map_err(|e| Error::io(&report_path, e))?;
    outputs.push(report_path);

    let last = report.final_loss();
    eprintln!(
        "registered in {:.1}s: {} iterations, stop {:?}, final loss {}",
        report.wall_seconds,
        report.iterations,
        report.stop_reason,
        last.map_or("n/a".into(), |l| format!("{:.6}", l.total)),
    );
    let mut inputs = digests(&a.fixed)?;
    inputs.extend(digests(&a.moving)?);
    let manifest = RunManifest {
        command: "register".into(),
        tool_version: VERSION.into(),
        config: serde_json::to_value(&cfg).expect("serializable"),
        inputs,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        threads,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    let mpath = a.manifest.clone().unwrap_or_else(|| with_suffix(&a.out_field, "manifest.json"));
    write_json(&mpath, &manifest)
}

fn cmd_eval(a: &EvalArgs, threads: usize) -> Result<()> {
    let start = Instant::now();
    if let Some(path) = &a.summarize {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s = cohort_summary(&parse_values(&text)?)?;
        println!(
            "n={} mean={:.4} stddev={:.4} median={:.4} q25={:.4} q75={:.4}",
            s.n, s.mean, s.stddev, s.median, s.q25, s.q75
        );
        let manifest = RunManifest {
            command: "eval".into(),
            tool_version: VERSION.into(),
            config: serde_json::json!({ "summarize": path, "summary": s }),
            inputs: digests(path)?,
            outputs: Vec::new(),
            threads,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        let mpath = a.manifest.clone().unwrap_or_else(|| with_suffix(path, "manifest.json"));
        return write_json(&mpath, &manifest);
    }
    let (Some(fpath), Some(flm), Some(mlm)) = (&a.field, &a.fixed_landmarks, &a.moving_landmarks) else {
        return Err(Error::Config("--field, --fixed-landmarks and --moving-landmarks are required".into()));
    };
    let field = load_field(fpath)?;
    let fixed = load_landmarks(flm)?;
    let moving = load_landmarks(mlm)?;
    let before = landmark_errors(&fixed, &moving)?;
    let mapped = transform_landmarks(&fixed, &field);
    if !mapped.clamped.is_empty() {
        eprintln!("warning: landmarks outside the field extent were clamped: {:?}", mapped.clamped);
    }
    let after = landmark_errors(&mapped.landmarks, &moving)?;
    let jac = jacobian_determinant(&field).ok();
    let metrics = case_metrics(&after, &before, jac.as_ref())?;
    println!(
        "case={} mae={:.4} robustness={:.4} mtre={:.4} initial_mae={:.4} folding={:.6}",
        a.case,
        metrics.mae_median,
        metrics.robustness,
        metrics.mtre,
        metrics.initial_mae_median,
        metrics.folding_fraction.unwrap_or(f64::NAN),
    );
    let mut outputs = vec![a.out.clone(), a.out.with_extension("json")];
    save_metrics(
        &[CaseRecord {
            case: a.case.clone(),
            metrics: metrics.clone(),
        }],
        &a.out,
    )?;
    if let Some(p) = &a.errors {
        let mut rows: Vec<(String, String, f64)> =
            before.iter().map(|&e| (a.case.clone(), "initial".into(), e)).collect();
        rows.extend(after.iter().map(|&e| (a.case.clone(), "method".into(), e)));
        save_error_table(&rows, p)?;
        outputs.push(p.clone());
    }
    let mut inputs = digests(fpath)?;
    inputs.extend(digests(flm)?);
    inputs.extend(digests(mlm)?);
    let manifest = RunManifest {
        command: "eval".into(),
        tool_version: VERSION.into(),
        config: serde_json::json!({ "case": a.case }),
        inputs,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        threads,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    let mpath = a.manifest.clone().unwrap_or_else(|| with_suffix(&a.out, "manifest.json"));
    write_json(&mpath, &manifest)
}

fn synth_config(a: &SynthArgs) -> Result<SynthConfig> {
    let mut cfg = resolve(SynthConfig::default(), a.config.as_deref())?;
    if let Some(d) = &a.dims {
        cfg.dims = [d[0], d[1], d[2]];
    }
    if let Some(s) = &a.spacing {
        cfg.spacing = [s[0], s[1], s[2]];
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.num_blobs {
        cfg.num_blobs = v;
    }
    if let Some(v) = a.texture_density {
        cfg.texture_density = v;
    }
    if let Some(v) = a.field_bumps {
        cfg.field_bumps = v;
    }
    if let Some(v) = a.max_disp {
        cfg.max_displacement = v;
    }
    if let Some(v) = a.num_landmarks {
        cfg.num_landmarks = v;
    }
    if let Some(v) = a.noise_sigma {
        cfg.noise_sigma = v;
    }
    if a.cavity {
        cfg.cavity = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_synth(a: &SynthArgs, threads: usize) -> Result<()> {
    let start = Instant::now();
    let cfg = synth_config(a)?;
    let case = generate_case(&cfg)?;
    let outputs = write_case_files(&case, &a.out)?;
    eprintln!(
        "synthetic case: max displacement {:.3} mm, min Jacobian {:.3}",
        case.info.max_displacement, case.info.min_jacobian
    );
    let mut config = serde_json::to_value(&cfg).expect("serializable");
    merge(&mut config, serde_json::json!({ "generation": case.info }));
    let manifest = RunManifest {
        command: "synth".into(),
        tool_version: VERSION.into(),
        config,
        inputs: Vec::new(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        threads,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&a.out.join("manifest.json"), &manifest)
}

fn cmd_slices(a: &SlicesArgs, threads: usize) -> Result<()> {
    let start = Instant::now();
    let (source, volume): (&Path, Volume) = match (&a.volume, &a.field) {
        (Some(v), _) => (v, load_volume(v)?),
        (None, Some(f)) => {
            let field = load_field(f)?;
            let v = if a.jacobian {
                jacobian_determinant(&field)?.to_volume()
            } else {
                let data = field.data().iter().map(|u| (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt()).collect();
                Volume::from_grid(*field.grid(), data)?
            };
            (f, v)
        }
        (None, None) => return Err(Error::Config("one of --volume or --field is required".into())),
    };
    let n = volume.dims()[a.axis.index()];
    let index = a.index.unwrap_or(n / 2);
    let (w, h, values) = slice_values(volume.grid(), volume.data(), a.axis, index)?;
    write_pgm(&a.out, w, h, &rescale_to_u8(&values))?;
    eprintln!(
        "slice {:?}={index}: {w}x{h}, values in [{:.4}, {:.4}]",
        a.axis,
        values.iter().cloned().fold(f64::INFINITY, f64::min),
        values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let manifest = RunManifest {
        command: "slices".into(),
        tool_version: VERSION.into(),
        config: serde_json::json!({
            "axis": a.axis,
            "index": index,
            "jacobian": a.jacobian,
        }),
        inputs: digests(source)?,
        outputs: vec![a.out.display().to_string()],
        threads,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&with_suffix(&a.out, "manifest.json"), &manifest)
}

/// `--threads`, then `DEFREG_THREADS`, then all cores (0).
fn thread_count(flag: Option<usize>) -> std::result::Result<usize, String> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| format!("{THREADS_ENV} must be a non-negative integer, got {v:?}")),
        Err(_) => Ok(0),
    }
}

fn dispatch(cli: &Cli, threads: usize) -> Result<()> {
    match &cli.command {
        Command::Register(a) => cmd_register(a, threads),
        Command::Eval(a) => cmd_eval(a, threads),
        Command::Synth(a) => cmd_synth(a, threads),
        Command::Slices(a) => cmd_slices(a, threads),
        Command::Version => {
            println!("defreg {VERSION}");
            Ok(())
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let threads = match thread_count(cli.threads) {
        Ok(n) => n,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 1;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return 2;
        }
    };
    let used = pool.current_num_threads();
    match pool.install(|| dispatch(&cli, used)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}
