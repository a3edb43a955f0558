//! `mtor` command line: dataset generation, training, evaluation, parameter
//! sweeps, and the 2-D mean-teacher demo.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing input, 4 runtime
//! failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Args, Parser, Subcommand};
use mtor_core::consistency::LossFlags;

use mtor::config::{load_config, ConfigError, ExperimentConfig};
use mtor::dataset::{self, Domain};
use mtor::demo2d;
use mtor::evalcmd;
use mtor::manifest::{ManifestEvent, ManifestWriter, RunStatus};
use mtor::sweep::{self, SweepParam};
use mtor::trainer::{self, Variant};

const EXIT_CONFIG: u8 = 2;
const EXIT_MISSING: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

#[derive(Parser)]
#[command(name = "mtor", about = "Mean teacher with object relations, desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key overrides, e.g. --set train.lambda=0.5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, ConfigError> {
        load_config(self.config.as_deref(), &self.sets)
    }
}

fn default_out_root() -> PathBuf {
    std::env::var_os("MTOR_OUT_ROOT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source and target dataset splits.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset root directory.
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Regenerate even if a differing dataset exists.
        #[arg(long)]
        force: bool,
    },
    /// Pre-train on source and (for the mtor variant) adapt on target.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Training variant.
        #[arg(long, default_value = "mtor", value_parser = ["source_only", "mtor"])]
        variant: String,
        /// Consistency loss subset, e.g. rcl or rcl,egl,agl.
        #[arg(long, default_value = "rcl,egl,agl")]
        losses: String,
        /// Run directory name under the output root.
        #[arg(long)]
        run_id: Option<String>,
        /// Output root (env MTOR_OUT_ROOT, default ./runs).
        #[arg(long)]
        out_root: Option<PathBuf>,
        /// Continue from the latest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a run's final checkpoint on a split.
    Eval {
        /// Run directory produced by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "target", value_parser = ["source", "target"])]
        split: String,
        /// Evaluate the student weights instead of the EMA teacher.
        #[arg(long)]
        student: bool,
    },
    /// λ or α sensitivity sweep.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Parameter to sweep: lambda or alpha.
        #[arg(long)]
        param: String,
        /// Comma-separated values; defaults to the standard grid.
        #[arg(long)]
        values: Option<String>,
        /// Worker threads for sweep points.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long)]
        out_root: Option<PathBuf>,
    },
    /// Two-moons mean-teacher demo (four regimes + boundary rasters).
    Demo2d {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long)]
        out_root: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<ConfigError>().is_some() {
        return EXIT_CONFIG;
    }
    if let Some(m) = e.downcast_ref::<MissingInput>() {
        let _ = m;
        return EXIT_MISSING;
    }
    EXIT_RUNTIME
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct MissingInput(String);

fn missing(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(MissingInput(msg.into()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, data, force } => cmd_gen_data(&config, &data, force),
        Command::Train { config, data, variant, losses, run_id, out_root, resume } => {
            cmd_train(&config, &data, &variant, &losses, run_id, out_root, resume)
        }
        Command::Eval { run, data, split, student } => cmd_eval(&run, &data, &split, student),
        Command::Sweep { config, data, param, values, parallel, out_root } => {
            cmd_sweep(&config, &data, &param, values.as_deref(), parallel, out_root)
        }
        Command::Demo2d { seed, steps, out_root } => {
            let out = out_root.unwrap_or_else(default_out_root).join("demo2d");
            let results = demo2d::run_demo(seed, steps, &out)?;
            for r in &results {
                println!(
                    "{}: consistency {:.5} -> {:.5}",
                    r.regime.name(),
                    r.init_consistency,
                    r.final_consistency
                );
            }
            println!("demo artifacts in {}", out.display());
            Ok(())
        }
    }
}

const DATASET_STAMP: &str = "dataset-config.toml";

/// The portion of the config a dataset on disk depends on.
fn dataset_stamp(cfg: &ExperimentConfig) -> String {
    toml::to_string_pretty(&cfg.dataset).expect("serializable")
}

fn cmd_gen_data(config: &ConfigArgs, data: &Path, force: bool) -> Result<()> {
    let cfg = config.load()?;
    let stamp = dataset_stamp(&cfg);
    let stamp_path = data.join(DATASET_STAMP);
    if stamp_path.exists() {
        let existing = fs::read_to_string(&stamp_path)?;
        if existing == stamp && !force {
            println!("dataset at {} is up-to-date", data.display());
            return Ok(());
        }
        if !force {
            return Err(anyhow!(
                "dataset at {} was generated with a different config; rerun with --force",
                data.display()
            ));
        }
    }
    let spec = cfg.dataset.scene_spec();
    dataset::generate_dataset(
        &spec,
        &cfg.dataset.shift,
        cfg.dataset.size.source,
        cfg.dataset.size.target,
        data,
    )?;
    fs::create_dir_all(data)?;
    fs::write(&stamp_path, stamp)?;
    println!(
        "generated {} source + {} target samples at {}",
        cfg.dataset.size.source,
        cfg.dataset.size.target,
        data.display()
    );
    Ok(())
}

pub fn parse_losses(spec: &str) -> Result<LossFlags> {
    let mut flags = LossFlags { rcl: false, egl: false, agl: false };
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "rcl" => flags.rcl = true,
            "egl" => flags.egl = true,
            "agl" => flags.agl = true,
            other => {
                return Err(anyhow::Error::new(ConfigError::Invalid(format!(
                    "unknown loss '{other}' in --losses (expected rcl, egl, agl)"
                ))))
            }
        }
    }
    Ok(flags)
}

fn load_splits(
    data: &Path,
) -> Result<(Vec<dataset::DomainSample>, Vec<dataset::DomainSample>)> {
    if !data.join("source").join("annotations.json").exists() {
        return Err(missing(format!(
            "no dataset at {} (run `mtor gen-data` first)",
            data.display()
        )));
    }
    let source = dataset::read_split(&data.join("source"), Domain::Source)?;
    let target = dataset::read_split(&data.join("target"), Domain::Target)?;
    Ok((source, target))
}

fn cmd_train(
    config: &ConfigArgs,
    data: &Path,
    variant: &str,
    losses: &str,
    run_id: Option<String>,
    out_root: Option<PathBuf>,
    resume: bool,
) -> Result<()> {
    let cfg = config.load()?;
    let flags = parse_losses(losses)?;
    let variant = match variant {
        "source_only" => Variant::SourceOnly,
        _ => Variant::Mtor,
    };
    let (source, target) = load_splits(data)?;
    let run_id = run_id.unwrap_or_else(|| {
        format!(
            "{}-{}-seed{}",
            if variant == Variant::Mtor { "mtor" } else { "source_only" },
            cfg.hash(),
            cfg.train.seed
        )
    });
    let run_dir = out_root.unwrap_or_else(default_out_root).join(&run_id);
    fs::create_dir_all(&run_dir)?;
    let config_path = run_dir.join("config.toml");
    if resume && config_path.exists() {
        let existing = fs::read_to_string(&config_path)?;
        if existing != cfg.to_toml() {
            return Err(anyhow::Error::new(ConfigError::Invalid(format!(
                "--resume: config mismatch with {}",
                config_path.display()
            ))));
        }
    }
    fs::write(&config_path, cfg.to_toml())?;

    let man = if run_dir.join(mtor::manifest::MANIFEST_FILE).exists() {
        ManifestWriter::open(&run_dir)
    } else {
        ManifestWriter::create(&run_dir, &run_id, &cfg.hash())?
    };
    man.set_status(RunStatus::Running)?;
    let outcome =
        trainer::run_training(&cfg, &source, &target, variant, &flags, &run_dir, resume);
    match outcome {
        Ok(out) => {
            man.append(&ManifestEvent::Checkpoint {
                path: out.final_checkpoint.display().to_string(),
            })?;
            man.append(&ManifestEvent::MetricsFile {
                path: out.metrics_path.display().to_string(),
            })?;
            man.set_status(RunStatus::Done)?;
            println!("run {} complete: {}", run_id, run_dir.display());
            Ok(())
        }
        Err(e) => {
            man.set_status(RunStatus::Failed)?;
            Err(e)
        }
    }
}

fn cmd_eval(run: &Path, data: &Path, split: &str, student: bool) -> Result<()> {
    let config_path = run.join("config.toml");
    if !config_path.exists() {
        return Err(missing(format!("no config.toml in run dir {}", run.display())));
    }
    let cfg = load_config(Some(&config_path), &[])?;
    let ckpt_path = run.join("ckpt-final.json");
    if !ckpt_path.exists() {
        return Err(missing(format!("no checkpoint at {}", ckpt_path.display())));
    }
    let ckpt = trainer::Checkpoint::load(&ckpt_path)?;
    let pair = ckpt.restore(cfg.arch(), cfg.train.alpha);
    let weights = if student { &pair.student } else { &pair.teacher };

    let split_dir = data.join(split);
    if !split_dir.join("annotations.json").exists() {
        return Err(missing(format!("no split at {}", split_dir.display())));
    }
    let domain = if split == "source" { Domain::Source } else { Domain::Target };
    let samples = dataset::read_split(&split_dir, domain)?;
    let gts = dataset::read_eval_annotations(&split_dir)?;
    let names = dataset::category_names(&split_dir)?;
    let out_dir = run.join(format!("eval-{split}"));
    let art = evalcmd::write_eval_artifacts(weights, &samples, &gts, &names, &cfg, &out_dir)?;
    for &(c, ap) in &art.ap.per_category {
        println!("AP[{}] = {:.4}", names[c], ap);
    }
    println!("mAP@{} = {:.4}", cfg.eval.iou_thresh, art.ap.map);
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

fn cmd_sweep(
    config: &ConfigArgs,
    data: &Path,
    param: &str,
    values: Option<&str>,
    parallel: usize,
    out_root: Option<PathBuf>,
) -> Result<()> {
    let cfg = config.load()?;
    let param = SweepParam::parse(param)
        .map_err(|e| anyhow::Error::new(ConfigError::Invalid(e.to_string())))?;
    let values: Vec<f64> = match values {
        Some(list) => list
            .split(',')
            .map(|v| {
                v.trim().parse::<f64>().map_err(|_| {
                    anyhow::Error::new(ConfigError::Invalid(format!("bad sweep value '{v}'")))
                })
            })
            .collect::<Result<_>>()?,
        None => param.default_values(),
    };
    let (source, target) = load_splits(data)?;
    let gts = dataset::read_eval_annotations(&data.join("target"))?;
    let points = sweep::run_sweep(&cfg, param, &values, parallel, &source, &target, &gts)?;
    let out = out_root.unwrap_or_else(default_out_root).join(format!("sweep-{}", param.name()));
    fs::create_dir_all(&out)?;
    sweep::write_sweep_csv(param, &points, &out.join("sweep.csv"))?;
    sweep::plot_sweep(param, &points, &out.join("sweep.png"))?;
    for p in &points {
        println!("{} = {} -> mAP {:.4}", param.name(), p.value, p.map);
    }
    println!("sweep artifacts in {}", out.display());
    Ok(())
}
