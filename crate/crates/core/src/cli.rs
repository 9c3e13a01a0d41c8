//! Command-line front end. Each subcommand is a thin wrapper over library
//! calls; `run` returns the process exit code.
//!
//! Exit codes: 0 success, 1 internal numerical failure, 2 usage, config or
//! input error, 3 training divergence.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Parser, Subcommand, ValueEnum};

use crate::checkpoint::{check_resume, file_hash, load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{validation, Error, Result};
use crate::evaluation::{render_table, run_fid_protocol};
use crate::extrinsic::Gates;
use crate::generator::StyleWeightVector;
use crate::image_pipeline::{ingest_dataset, load_image, save_image, write_atomic};
use crate::model::{Stage, StyleModel, StylizeParams};
use crate::semantics::directions_json;
use crate::service::{serve, ServiceState};
use crate::trainer::{StageLossWeights, StageSchedule, Trainer, TrainingLog};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const DIVERGENCE_FILE: &str = "diverged.ckpt";

#[derive(Debug, Parser)]
#[command(name = "stylefuse", version, about = "Dual-path facial style transfer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run curriculum stages, writing stage<N>.ckpt and a JSON-lines log to
    /// the configured output directory.
    Train {
        /// TOML config; falls back to $STYLEFUSE_CONFIG.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Resume even if the checkpoint was written under another config.
        #[arg(long)]
        force: bool,
    },
    /// Stylize one image.
    Stylize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Extrinsic style source; defaults to the input itself.
        #[arg(long)]
        style: Option<PathBuf>,
        /// One value for every layer, or a comma-separated value per layer.
        #[arg(long, default_value = "1")]
        weights: String,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        sigma: f64,
        #[arg(long)]
        gamma1: Option<f64>,
        #[arg(long)]
        gamma2: Option<f64>,
        #[arg(long)]
        direction_rank: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the top semantic directions of the checkpoint's mapping network.
    Factorize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 5)]
        top: usize,
        /// JSON destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FID of one-shot stylizations against style references and test set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        style_dir: PathBuf,
        #[arg(long)]
        test_dir: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API for one checkpoint.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
    /// Write a default config file.
    InitConfig {
        out: PathBuf,
        /// Full-size model instead of the toy default.
        #[arg(long)]
        full_scale: bool,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Numerical { .. } | Error::Tensor(_) | Error::Service(_) => EXIT_FAILURE,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Divergence { checkpoint: Some(p), .. } = &e {
                eprintln!("last checkpoint: {}", p.display());
            }
            exit_code(&e)
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train {
            config,
            stage,
            resume,
            force,
        } => {
            let path = RunConfig::resolve_path(config.as_deref())?;
            let cfg = RunConfig::load(&path)?;
            let written = train(&cfg, base_dir(&path), stage, resume.as_deref(), force)?;
            for p in written {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Stylize {
            checkpoint,
            input,
            style,
            weights,
            sigma,
            gamma1,
            gamma2,
            direction_rank,
            out,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let res = model.config.model.resolution;
            let content = load_image(&input, res)?;
            let style = style.map(|p| load_image(p, res)).transpose()?;
            let mut params = StylizeParams::new(parse_weights(&weights, model.n_layers())?);
            params.sigma = sigma;
            params.gates = Gates { gamma1, gamma2 };
            params.direction_rank = direction_rank;
            save_image(&model.stylize(&content, style.as_ref(), &params)?, &out)
        }
        Command::Factorize { checkpoint, top, out } => {
            let model = load_checkpoint(&checkpoint)?;
            let json = directions_json(&model.directions(top)?);
            match out {
                Some(p) => write_atomic(&p, json.as_bytes()),
                None => {
                    println!("{json}");
                    Ok(())
                }
            }
        }
        Command::Eval {
            checkpoint,
            style_dir,
            test_dir,
            out,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let (res, seed) = (model.config.model.resolution, model.config.seed);
            let style = ingest_dataset(&style_dir, res, seed)?;
            let test = ingest_dataset(&test_dir, res, seed)?;
            let method = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
            let report = run_fid_protocol(&model, method, &style, &test)?;
            if let Some(p) = out {
                write_atomic(&p, report.to_json().as_bytes())?;
            }
            let mut stdout = std::io::stdout().lock();
            let _ = writeln!(stdout, "# {}", report.metadata.protocol);
            let _ = write!(stdout, "{}", render_table(&report, 3));
            Ok(())
        }
        Command::Serve { checkpoint, port, host } => {
            let hash = file_hash(&checkpoint)?;
            let model = load_checkpoint(&checkpoint)?;
            let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::Service(e.to_string()))?;
            runtime.block_on(serve(ServiceState::new(model, hash), SocketAddr::new(host, port)))
        }
        Command::InitConfig { out, full_scale } => {
            let cfg = if full_scale { RunConfig::full_scale() } else { RunConfig::default() };
            write_atomic(&out, cfg.to_toml_string().as_bytes())
        }
    }
}

fn base_dir(config_path: &Path) -> PathBuf {
    config_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// `"0.5"` broadcasts to every layer; `"0,0.5,1,..."` must list all of them.
pub fn parse_weights(spec: &str, layers: usize) -> Result<StyleWeightVector> {
    let values = spec
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Validation(format!("weight {s:?} is not a number")))
        })
        .collect::<Result<Vec<_>>>()?;
    match values.as_slice() {
        [v] => StyleWeightVector::filled(*v, layers),
        _ if values.len() == layers => StyleWeightVector::new(values),
        _ => validation(format!("got {} weights, model has {layers} layers", values.len())),
    }
}

fn stages_to_run(requested: StageArg, current: Stage) -> Vec<Stage> {
    match requested {
        StageArg::One => vec![Stage::I],
        StageArg::Two => vec![Stage::II],
        StageArg::Three => vec![Stage::III],
        StageArg::All => [Stage::I, Stage::II, Stage::III].into_iter().filter(|s| *s > current).collect(),
    }
}

/// Runs the requested stages and returns the checkpoints written. Relative
/// paths in the config resolve against `base`.
pub fn train(cfg: &RunConfig, base: PathBuf, stage: StageArg, resume: Option<&Path>, force: bool) -> Result<Vec<PathBuf>> {
    let mut model = match resume {
        Some(p) => {
            let m = load_checkpoint(p)?;
            check_resume(&m, cfg, force)?;
            m
        }
        None => StyleModel::new(cfg, DType::F32)?,
    };
    let out_dir = base.join(&cfg.paths.out_dir);
    std::fs::create_dir_all(&out_dir).map_err(crate::error::io_err(&out_dir))?;
    let stages = stages_to_run(stage, model.stage);
    let data = if stages.iter().any(|s| *s != Stage::II) {
        Some(ingest_dataset(base.join(&cfg.paths.data_dir), model.config.model.resolution, model.config.seed)?)
    } else {
        None
    };
    let weights = StageLossWeights::from_config(&model.config)?;
    let train_cfg = model.config.clone();
    let log = TrainingLog::with_file(out_dir.join(LOG_FILE))?;
    let mut trainer = Trainer::new(&mut model, log)?.with_divergence_checkpoint(out_dir.join(DIVERGENCE_FILE));
    let mut written = Vec::new();
    for s in stages {
        let report = match s {
            Stage::I => trainer.stage1(data.as_ref().expect("dataset loaded"))?,
            Stage::II => trainer.stage2(&StageSchedule::stage2(&train_cfg), weights)?,
            Stage::III => trainer.stage3(data.as_ref().expect("dataset loaded"), &StageSchedule::stage3(&train_cfg), weights)?,
            Stage::Pretrained => unreachable!("never requested"),
        };
        if let Some((start, end)) = report.start_end(10) {
            log::info!("stage {s}: smoothed total {start:.5} -> {end:.5}");
        }
        let n = match s {
            Stage::I => 1,
            Stage::II => 2,
            _ => 3,
        };
        let path = out_dir.join(format!("stage{n}.ckpt"));
        save_checkpoint(&*trainer.model, &path)?;
        written.push(path);
    }
    Ok(written)
}
