//! The `fsdet` command line.
//!
//! Exit codes: 0 success, 1 a check failed, 2 configuration or input
//! error, 3 protocol violation.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::ablation::{run_ablation, to_csv, Axis, ExperimentData};
use crate::config::RunConfig;
use crate::datasets::{generate_synthetic, load_dataset, make_split, save_dataset_with, Dataset};
use crate::detector::{evaluate, fine_tune, finetune_set, train_base, Checkpoint, StepRecord};
use crate::error::{Error, Result};
use crate::gradsuite;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PROTOCOL: i32 = 3;

pub const CHECKPOINT_FILE: &str = "checkpoint.fsd";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const LOCK_FILE: &str = ".fsdet.lock";

#[derive(Parser, Debug)]
#[command(name = "fsdet", version, about = "Few-shot object detection: data, training, evaluation, checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// JSON run configuration merged over the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config value, e.g. `--set model.base.epochs=4`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub set: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AxisArg {
    Neck,
    Cbam,
    Stages,
    Loss,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        num_classes: Option<usize>,
        /// Leave out the novel classes of `data.split`.
        #[arg(long)]
        base_only: bool,
    },
    /// Train every parameter on base classes.
    TrainBase {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Fine-tune a base checkpoint on a K-shot set drawn from `--data`.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        shots: usize,
        #[arg(long)]
        split: String,
        #[arg(long)]
        seed: Option<u64>,
        /// The backbone is always frozen; `false` is rejected.
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        freeze_backbone: bool,
    },
    /// Score a checkpoint on a dataset; the report goes to stdout and `--out`.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and score every variant along one ablation axis.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long)]
        base_data: PathBuf,
        #[arg(long)]
        pool_data: PathBuf,
        #[arg(long)]
        test_data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "10")]
        shots: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Finite-difference gradient checks over the registered ops.
    Gradcheck {
        /// Run only these ops (default: all).
        #[arg(long)]
        op: Vec<String>,
        #[arg(long)]
        json: bool,
    },
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Protocol(_) => EXIT_PROTOCOL,
        Error::NonFiniteGradient { .. } => EXIT_CHECK_FAILED,
        _ => EXIT_CONFIG,
    }
}

/// Held for the lifetime of a command that writes into a run directory.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is in use by another run (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[derive(Serialize)]
struct Artifact {
    path: String,
    sha256: String,
    bytes: usize,
}

fn write_file(dir: &Path, name: &str, bytes: &[u8], artifacts: &mut Vec<Artifact>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    artifacts.push(Artifact {
        path: name.into(),
        sha256: crate::datasets::sha256_hex(bytes),
        bytes: bytes.len(),
    });
    Ok(())
}

fn write_manifest(dir: &Path, command: &str, config: &Value, seed: u64, extra: Value, artifacts: Vec<Artifact>) -> Result<()> {
    let m = json!({
        "tool": "fsdet",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": seed,
        "config": config,
        "details": extra,
        "artifacts": artifacts,
    });
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&m)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

struct StepLog {
    out: BufWriter<File>,
    path: PathBuf,
    last: Option<StepRecord>,
}

impl StepLog {
    fn create(dir: &Path) -> Result<Self> {
        let path = dir.join(LOG_FILE);
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            out: BufWriter::new(f),
            path,
            last: None,
        })
    }

    fn record(&mut self, r: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(r)?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))?;
        if r.step % 50 == 0 {
            eprintln!("{:?} step {} epoch {} loss {:.4}", r.phase, r.step, r.epoch, r.loss.total);
        }
        self.last = Some(r.clone());
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn load_checked(dir: &Path, image_size: (usize, usize)) -> Result<Dataset> {
    let d = load_dataset(dir)?;
    if let Some(img) = d.images.iter().find(|i| (i.height, i.width) != image_size) {
        return Err(Error::Config(format!(
            "{}: image {} is {}x{}, model expects {}x{}",
            dir.display(),
            img.id,
            img.height,
            img.width,
            image_size.0,
            image_size.1
        )));
    }
    Ok(d)
}

fn gen_data(mut c: RunConfig, out: &Path, base_only: bool) -> Result<()> {
    let spec = &mut c.data.synthetic;
    if base_only {
        let split = make_split(&spec.class_names(), &c.data.split)?;
        spec.allowed_classes = Some(split.base.clone());
    }
    c.validate()?;
    let _lock = RunLock::acquire(out)?;
    let cfg = c.to_value();
    let dataset = generate_synthetic(&c.data.synthetic, c.data.seed)?;
    let provenance = json!({"generator": cfg["data"], "seed": c.data.seed});
    save_dataset_with(&dataset, out, Some(provenance))?;
    let text = fs::read(out.join("annotations.json")).map_err(|e| Error::io(out, e))?;
    let artifacts = vec![Artifact {
        path: "annotations.json".into(),
        sha256: crate::datasets::sha256_hex(&text),
        bytes: text.len(),
    }];
    let counts: Vec<(String, usize)> = dataset.classes.iter().cloned().zip(dataset.class_counts()).collect();
    write_manifest(out, "gen-data", &cfg, c.data.seed, json!({"images": dataset.images.len(), "instances": counts}), artifacts)?;
    eprintln!("wrote {} images to {}", dataset.images.len(), out.display());
    Ok(())
}

fn train_base_cmd(c: RunConfig, data: &Path, out: &Path) -> Result<()> {
    let _lock = RunLock::acquire(out)?;
    let dataset = load_checked(data, c.model.image_size)?;
    let split = make_split(&dataset.classes, &c.train.split)?;
    let cfg = c.to_value();
    let mut log = StepLog::create(out)?;
    let mut ckpt = train_base(&dataset, &split, c.model.clone(), c.train.seed, |r, _| log.record(r))?;
    log.finish()?;
    ckpt.run_config = Some(cfg.clone());
    let mut artifacts = Vec::new();
    write_file(out, CHECKPOINT_FILE, &ckpt.to_bytes()?, &mut artifacts)?;
    write_manifest(
        out,
        "train-base",
        &cfg,
        c.train.seed,
        json!({"data": data, "split": split.id, "steps": ckpt.steps, "num_params": ckpt.detector.num_params()}),
        artifacts,
    )?;
    eprintln!("base checkpoint: {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn finetune_cmd(c: RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let base = Checkpoint::load(checkpoint)?;
    let _lock = RunLock::acquire(out)?;
    let pool = load_checked(data, base.detector.config.image_size)?;
    let split = make_split(&pool.classes, &c.train.split)?;
    let set = finetune_set(&pool, &split, base.detector.config.finetune_set, c.train.shots, c.train.seed)?;
    let cfg = c.to_value();
    let mut log = StepLog::create(out)?;
    let mut ckpt = fine_tune(&base, &set, &split, c.train.seed, |r, _| log.record(r))?;
    log.finish()?;
    ckpt.run_config = Some(cfg.clone());
    let mut artifacts = Vec::new();
    write_file(out, CHECKPOINT_FILE, &ckpt.to_bytes()?, &mut artifacts)?;
    let kshot: Vec<Value> = set
        .images
        .iter()
        .map(|img| {
            let used: Vec<&str> = img.targets().map(|a| set.classes[a.class].as_str()).collect();
            json!({"id": img.id, "instances": used})
        })
        .collect();
    let mut kshot_json = serde_json::to_string_pretty(&json!({"shots": c.train.shots, "seed": c.train.seed, "images": kshot}))?;
    kshot_json.push('\n');
    write_file(out, "kshot.json", kshot_json.as_bytes(), &mut artifacts)?;
    write_manifest(
        out,
        "finetune",
        &cfg,
        c.train.seed,
        json!({
            "base_checkpoint": checkpoint,
            "data": data,
            "split": split.id,
            "shots": c.train.shots,
            "steps": ckpt.steps,
            "bound_classes": ckpt.detector.layout.bound,
        }),
        artifacts,
    )?;
    eprintln!("fine-tuned checkpoint: {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn eval_cmd(c: RunConfig, checkpoint: &Path, data: &Path, out: &Path, shots: Option<usize>) -> Result<String> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let _lock = RunLock::acquire(out)?;
    let dataset = load_checked(data, ckpt.detector.config.image_size)?;
    let split = make_split(&dataset.classes, &c.train.split)?;
    let cfg = c.to_value();
    let mut report = evaluate(&ckpt, &dataset, &split, shots, c.train.seed, &c.eval.detect_options())?;
    report.config = Some(cfg.clone());
    let mut text = report.to_json()?;
    text.push('\n');
    let mut artifacts = Vec::new();
    write_file(out, REPORT_FILE, text.as_bytes(), &mut artifacts)?;
    write_manifest(
        out,
        "eval",
        &cfg,
        c.train.seed,
        json!({"checkpoint": checkpoint, "data": data, "split": split.id, "shots": shots}),
        artifacts,
    )?;
    Ok(text)
}

#[allow(clippy::too_many_arguments)]
fn ablate_cmd(
    c: RunConfig,
    axis: Axis,
    base: &Path,
    pool: &Path,
    test: &Path,
    out: &Path,
    shots: &[usize],
    seeds: &[u64],
) -> Result<String> {
    let _lock = RunLock::acquire(out)?;
    let size = c.model.image_size;
    let data = ExperimentData {
        base: load_checked(base, size)?,
        pool: load_checked(pool, size)?,
        test: load_checked(test, size)?,
    };
    let split = make_split(&data.base.classes, &c.train.split)?;
    let cfg = c.to_value();
    let rows = run_ablation(
        axis,
        &c.model,
        &data,
        &split,
        shots,
        seeds,
        c.train.seed,
        &c.eval.detect_options(),
        |m| eprintln!("ablation: {m}"),
    )?;
    let csv = to_csv(&rows, &cfg);
    let mut artifacts = Vec::new();
    write_file(out, "ablation.csv", csv.as_bytes(), &mut artifacts)?;
    write_manifest(
        out,
        "ablate",
        &cfg,
        c.train.seed,
        json!({"axis": axis, "shots": shots, "seeds": seeds, "split": split.id}),
        artifacts,
    )?;
    Ok(csv)
}

fn gradcheck_cmd(ops: &[String], as_json: bool) -> Result<i32> {
    let names: Vec<&str> = if ops.is_empty() {
        gradsuite::OPS.to_vec()
    } else {
        ops.iter().map(String::as_str).collect()
    };
    let mut rows = Vec::new();
    for op in names {
        let row = gradsuite::check(op).ok_or_else(|| {
            Error::Config(format!("unknown op '{op}' (registered: {})", gradsuite::OPS.join(", ")))
        })?;
        rows.push(row);
    }
    if as_json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
    } else {
        print!("{}", gradsuite::format_table(&rows));
    }
    Ok(if rows.iter().all(|r| r.passed) {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    })
}

fn resolve(cfg: &ConfigArgs, flags: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
    let mut c = RunConfig::resolve(cfg.config.as_deref(), &cfg.set)?;
    flags(&mut c);
    c.validate()?;
    Ok(c)
}

/// Runs a parsed command and returns its exit code.
pub fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData {
            cfg,
            out,
            seed,
            images,
            num_classes,
            base_only,
        } => {
            let c = resolve(&cfg, |c| {
                if let Some(s) = seed {
                    c.data.seed = s;
                }
                if let Some(n) = images {
                    c.data.synthetic.images = n;
                }
                if let Some(n) = num_classes {
                    c.data.synthetic.num_classes = n;
                }
            })?;
            gen_data(c, &out, base_only)?;
        }
        Command::TrainBase {
            cfg,
            data,
            out,
            seed,
            split,
        } => {
            let c = resolve(&cfg, |c| {
                if let Some(s) = seed {
                    c.train.seed = s;
                }
                if let Some(s) = split {
                    c.train.split = s;
                }
            })?;
            train_base_cmd(c, &data, &out)?;
        }
        Command::Finetune {
            cfg,
            checkpoint,
            data,
            out,
            shots,
            split,
            seed,
            freeze_backbone,
        } => {
            if !freeze_backbone {
                return Err(Error::Config(
                    "--freeze-backbone=false is not allowed: fine-tuning always keeps the backbone frozen".into(),
                ));
            }
            let c = resolve(&cfg, |c| {
                c.train.shots = shots;
                c.train.split = split;
                if let Some(s) = seed {
                    c.train.seed = s;
                }
            })?;
            finetune_cmd(c, &checkpoint, &data, &out)?;
        }
        Command::Eval {
            cfg,
            checkpoint,
            data,
            out,
            split,
            shots,
            seed,
        } => {
            let c = resolve(&cfg, |c| {
                if let Some(s) = split {
                    c.train.split = s;
                }
                if let Some(s) = seed {
                    c.train.seed = s;
                }
            })?;
            print!("{}", eval_cmd(c, &checkpoint, &data, &out, shots)?);
        }
        Command::Ablate {
            cfg,
            axis,
            base_data,
            pool_data,
            test_data,
            out,
            shots,
            seeds,
            split,
        } => {
            let c = resolve(&cfg, |c| {
                if let Some(s) = split {
                    c.train.split = s;
                }
            })?;
            let axis = match axis {
                AxisArg::Neck => Axis::Neck,
                AxisArg::Cbam => Axis::Cbam,
                AxisArg::Stages => Axis::Stages,
                AxisArg::Loss => Axis::Loss,
            };
            print!("{}", ablate_cmd(c, axis, &base_data, &pool_data, &test_data, &out, &shots, &seeds)?);
        }
        Command::Gradcheck { op, json } => return gradcheck_cmd(&op, json),
    }
    Ok(EXIT_OK)
}

/// Parses `args`, runs the command and maps errors to exit codes.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
