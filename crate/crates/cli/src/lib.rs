//! Command-line surface of the registration engine.
//!
//! Exit codes: 0 success, 1 usage, 2 data or configuration error, 3 numeric
//! failure (divergence, non-finite values, failed gradient checks).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use nestedmorph::gradcheck::{run_suite, standard_suite, GradcheckCase, SUITE_TOLERANCE};
use nestedmorph::io::{export_curve_csv, load_volume, load_volume_as, save_json, save_volume, ReportFile, VolumeData};
use nestedmorph::metrics::{hd95, mask_from_volume, sdlogj, ssim, MASK_REL_THRESHOLD};
use nestedmorph::synth::{synth_pair, DEFAULT_SMOOTHNESS};
use nestedmorph::train::split_train_val;
use nestedmorph::{
    count_params, register, Checkpoint, Error, ModelConfig, Pair, Precision, Result, Scalar, Tensor, Trainer,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const MOVING_FILE: &str = "moving.nmv";
pub const FIXED_FILE: &str = "fixed.nmv";
pub const FIELD_FILE: &str = "field.nmv";
pub const LAST_CHECKPOINT: &str = "checkpoint.json";
pub const BEST_CHECKPOINT: &str = "best.json";
pub const CURVE_FILE: &str = "curve.csv";

#[derive(Parser, Debug)]
#[command(name = "nestedmorph", version, about = "Deformable 3D registration with NestedMorph")]
pub struct Cli {
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Writes synthetic moving/fixed pairs with their ground-truth fields.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Cubic extent of every volume.
        #[arg(long, default_value_t = 32)]
        shape: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Peak displacement in voxels.
        #[arg(long, default_value_t = 3.0)]
        amplitude: f64,
        #[arg(long, default_value_t = DEFAULT_SMOOTHNESS)]
        smoothness: f64,
        /// Number of pairs; pair i uses seed `seed + i`.
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Scalar width of the written volumes, 32 or 64.
        #[arg(long, default_value_t = 32)]
        precision: u8,
    },
    /// Trains a model on every pair under a data directory.
    Train {
        /// JSON model configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Registers one pair with a trained checkpoint.
    Register {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        out_field: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Also writes the warped moving volume.
        #[arg(long)]
        out_warped: Option<PathBuf>,
    },
    /// SSIM and HD95 between two volumes, plus SDlogJ of an optional field.
    Metrics {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        field: Option<PathBuf>,
    },
    /// Parameter counts per module.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference check of every backward rule.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite(_) | Error::Diverged { .. } => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match dispatch(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

/// Entry point for the binary.
pub fn cli_main(argv: Vec<OsString>) -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(argv, &mut stdout.lock(), &mut stderr.lock())
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> CmdResult {
    match &cli.command {
        Command::Synth {
            out: dir,
            shape,
            seed,
            amplitude,
            smoothness,
            count,
            precision,
        } => {
            let precision = parse_precision(*precision)?;
            synth_cmd(dir, *shape, *seed, *amplitude, *smoothness, *count, precision, cli.json, out)
        }
        Command::Train {
            config,
            data,
            out: dir,
            epochs,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(e) = epochs {
                cfg.optimizer.epochs = *e;
                cfg.validate()?;
            }
            match cfg.precision {
                Precision::F32 => train_cmd::<f32>(&cfg, data, dir, cli.json, out),
                Precision::F64 => train_cmd::<f64>(&cfg, data, dir, cli.json, out),
            }
        }
        Command::Register {
            checkpoint,
            moving,
            fixed,
            out_field,
            report,
            out_warped,
        } => {
            let ck = Checkpoint::load(checkpoint)?;
            let paths = RegisterPaths {
                moving,
                fixed,
                out_field,
                report,
                out_warped: out_warped.as_deref(),
            };
            match ck.config.precision {
                Precision::F32 => register_cmd::<f32>(&ck, &paths, cli.json, out),
                Precision::F64 => register_cmd::<f64>(&ck, &paths, cli.json, out),
            }
        }
        Command::Metrics { a, b, field } => metrics_cmd(a, b, field.as_deref(), cli.json, out),
        Command::Params { config } => {
            let cfg = load_config(config.as_deref())?;
            let table = count_params(&cfg)?;
            if cli.json {
                emit_json(out, &serde_json::to_value(&table).expect("table serializes"))
            } else {
                emit_text(out, &table.render())
            }
        }
        Command::Gradcheck { seed } => {
            let cases = standard_suite(*seed)?;
            run_gradcheck(&cases, cli.json, out)
        }
    }
}

fn parse_precision(bits: u8) -> std::result::Result<Precision, Failure> {
    Precision::try_from(bits).map_err(|message| Failure {
        code: EXIT_USAGE,
        message,
    })
}

fn emit_json(out: &mut dyn Write, value: &serde_json::Value) -> CmdResult {
    let text = serde_json::to_string_pretty(value).expect("json serializes");
    writeln!(out, "{text}").map_err(stdout_failure)
}

fn emit_text(out: &mut dyn Write, text: &str) -> CmdResult {
    write!(out, "{text}").map_err(stdout_failure)
}

fn stdout_failure(e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_DATA,
        message: format!("writing output: {e}"),
    }
}

fn load_config(path: Option<&Path>) -> Result<ModelConfig> {
    match path {
        None => Ok(ModelConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            ModelConfig::from_json(&text)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[allow(clippy::too_many_arguments)]
fn synth_cmd(
    dir: &Path,
    shape: usize,
    seed: u64,
    amplitude: f64,
    smoothness: f64,
    count: usize,
    precision: Precision,
    json: bool,
    out: &mut dyn Write,
) -> CmdResult {
    if count == 0 {
        return Err(Failure {
            code: EXIT_USAGE,
            message: "--count must be at least 1".into(),
        });
    }
    create_dir(dir)?;
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let s = seed + i as u64;
        let pair_dir = dir.join(format!("pair_{i:03}"));
        create_dir(&pair_dir)?;
        let p = synth_pair::<f64>(s, [shape; 3], amplitude, smoothness)?;
        let tensors = [(MOVING_FILE, &p.moving), (FIXED_FILE, &p.fixed), (FIELD_FILE, &p.field)];
        for (name, t) in tensors {
            match precision {
                Precision::F32 => save_volume(&pair_dir.join(name), &t.cast::<f32>())?,
                Precision::F64 => save_volume(&pair_dir.join(name), t)?,
            }
        }
        pairs.push(json!({
            "dir": pair_dir.display().to_string(),
            "seed": s,
            "amplitude": p.amplitude,
        }));
    }
    if json {
        emit_json(out, &json!({ "shape": [1, shape, shape, shape], "pairs": pairs }))
    } else {
        let mut text = String::new();
        for p in &pairs {
            text += &format!("wrote {} (seed {}, amplitude {})\n", p["dir"].as_str().unwrap_or(""), p["seed"], p["amplitude"]);
        }
        emit_text(out, &text)
    }
}

/// Pair directories under `dir`: `dir` itself when it holds a pair, else
/// every immediate subdirectory that does, sorted by name.
pub fn find_pairs(dir: &Path) -> Result<Vec<PathBuf>> {
    let holds = |d: &Path| d.join(MOVING_FILE).is_file() && d.join(FIXED_FILE).is_file();
    if holds(dir) {
        return Ok(vec![dir.to_path_buf()]);
    }
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() && holds(&path) {
            found.push(path);
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(Error::Config(format!(
            "no {MOVING_FILE}/{FIXED_FILE} pairs under {}",
            dir.display()
        )));
    }
    Ok(found)
}

fn load_pair<T: Scalar>(dir: &Path) -> Result<Pair<T>> {
    Pair::new(load_volume_as(&dir.join(MOVING_FILE))?, load_volume_as(&dir.join(FIXED_FILE))?)
}

fn train_cmd<T: Scalar>(cfg: &ModelConfig, data: &Path, dir: &Path, json: bool, out: &mut dyn Write) -> CmdResult {
    let dirs = find_pairs(data)?;
    let pairs = dirs.iter().map(|d| load_pair::<T>(d)).collect::<Result<Vec<_>>>()?;
    let (train, val) = if pairs.len() >= 2 {
        split_train_val(pairs, cfg.seed)
    } else {
        (pairs, Vec::new())
    };
    create_dir(dir)?;
    let mut trainer = Trainer::<T>::new(cfg)?;
    let mut text = String::new();
    for _ in 0..cfg.optimizer.epochs {
        let r = trainer.run_epoch(&train, &val)?;
        if !json {
            text += &format!(
                "epoch {:>4}  train loss {:.6}  val loss {:.6}  train ssim {:.4}  val ssim {:.4}\n",
                r.epoch, r.train_loss, r.val_loss, r.train_ssim, r.val_ssim
            );
        }
    }
    let last = trainer.checkpoint();
    let best = trainer.best_checkpoint();
    last.save(&dir.join(LAST_CHECKPOINT))?;
    best.save(&dir.join(BEST_CHECKPOINT))?;
    export_curve_csv(trainer.curve(), &dir.join(CURVE_FILE))?;
    if json {
        let final_record = trainer.curve().records.last();
        emit_json(
            out,
            &json!({
                "train_pairs": train.len(),
                "val_pairs": val.len(),
                "epochs": trainer.epoch(),
                "final": final_record,
                "best_val_ssim": best.best_val_ssim,
                "checkpoint": dir.join(LAST_CHECKPOINT).display().to_string(),
                "best_checkpoint": dir.join(BEST_CHECKPOINT).display().to_string(),
                "curve": dir.join(CURVE_FILE).display().to_string(),
                "config_hash": cfg.hash(),
            }),
        )
    } else {
        text += &format!(
            "trained on {} pairs ({} validation); checkpoints in {}\n",
            train.len(),
            val.len(),
            dir.display()
        );
        emit_text(out, &text)
    }
}

struct RegisterPaths<'a> {
    moving: &'a Path,
    fixed: &'a Path,
    out_field: &'a Path,
    report: &'a Path,
    out_warped: Option<&'a Path>,
}

fn register_cmd<T: Scalar>(ck: &Checkpoint, paths: &RegisterPaths, json: bool, out: &mut dyn Write) -> CmdResult {
    let moving = load_volume_as::<T>(paths.moving)?;
    let fixed = load_volume_as::<T>(paths.fixed)?;
    let reg = register(ck, &moving, &fixed)?;
    save_volume(paths.out_field, &reg.field)?;
    if let Some(p) = paths.out_warped {
        save_volume(p, &reg.warped)?;
    }
    let file = ReportFile::new(reg.report, ck.config.hash());
    save_json(paths.report, &file)?;
    if json {
        emit_json(out, &serde_json::to_value(&file).expect("report serializes"))
    } else {
        let r = &file.report;
        emit_text(
            out,
            &format!(
                "SSIM    {:.6}\nHD95    {:.6}\nSDlogJ  {:.6}\nNCC     {:.6}\nfolding {:.6}\n",
                r.ssim, r.hd95, r.sdlogj, r.ncc, r.nonpositive_jacobian_fraction
            ),
        )
    }
}

/// Metric value, or `None` with a warning when it is undefined for the input.
fn defined(value: Result<f64>, what: &str) -> Result<Option<f64>> {
    match value {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(msg)) => {
            log::warn!("{what} undefined: {msg}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn metrics_cmd(a: &Path, b: &Path, field: Option<&Path>, json: bool, out: &mut dyn Write) -> CmdResult {
    let a = load_volume(a)?.into_tensor::<f64>();
    let b = load_volume(b)?.into_tensor::<f64>();
    let s = ssim(&a, &b)?;
    let hd = defined(
        (|| hd95(&mask_from_volume(&a, MASK_REL_THRESHOLD)?, &mask_from_volume(&b, MASK_REL_THRESHOLD)?))(),
        "HD95",
    )?;
    let jac = match field {
        Some(p) => {
            let f: Tensor<f64> = match load_volume(p)? {
                VolumeData::F32(t) => t.cast(),
                VolumeData::F64(t) => t,
            };
            defined(sdlogj(&f).map(|j| j.sdlogj), "SDlogJ")?
        }
        None => None,
    };
    if json {
        emit_json(out, &json!({ "ssim": s, "hd95": hd, "sdlogj": jac }))
    } else {
        let show = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.6}"));
        emit_text(
            out,
            &format!("SSIM    {s:.6}\nHD95    {}\nSDlogJ  {}\n", show(hd), show(jac)),
        )
    }
}

/// Runs gradient-check cases; exit code 3 when any fails.
pub fn run_gradcheck(cases: &[GradcheckCase], json: bool, out: &mut dyn Write) -> CmdResult {
    let report = run_suite(cases, SUITE_TOLERANCE);
    if json {
        let rows: Vec<_> = report
            .results
            .iter()
            .map(|r| match &r.outcome {
                Ok(g) => json!({
                    "case": r.name,
                    "max_rel_error": g.max_rel_error,
                    "coords": g.coords_checked,
                    "pass": r.passes(report.tolerance),
                }),
                Err(e) => json!({ "case": r.name, "error": e.to_string(), "pass": false }),
            })
            .collect();
        emit_json(
            out,
            &json!({
                "tolerance": report.tolerance,
                "max_rel_error": report.max_rel_error(),
                "passed": report.passed(),
                "cases": rows,
            }),
        )?;
    } else {
        let mut text = String::new();
        for r in &report.results {
            let status = if r.passes(report.tolerance) { "ok  " } else { "FAIL" };
            match &r.outcome {
                Ok(g) => text += &format!("{status} {:<60} {:.3e}\n", r.name, g.max_rel_error),
                Err(e) => text += &format!("{status} {:<60} {e}\n", r.name),
            }
        }
        text += &format!(
            "{} cases, max relative error {:.3e} (tolerance {:.0e})\n",
            report.results.len(),
            report.max_rel_error(),
            report.tolerance
        );
        emit_text(out, &text)?;
    }
    if report.passed() {
        Ok(())
    } else {
        let failed = report.failures().count();
        Err(Failure {
            code: EXIT_NUMERIC,
            message: format!("{failed} gradient check case(s) failed"),
        })
    }
}
