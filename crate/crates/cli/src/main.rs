use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use log::{info, LevelFilter};

use tfnet_core::boxes::GroundTruthFrame;
use tfnet_core::checkpoint::load_checkpoint;
use tfnet_core::config::RunConfig;
use tfnet_core::data::{load_clip, load_video_dir, synth_dataset, DatasetIndex, SynthSpec};
use tfnet_core::dct::{channels_for_lambda, frequency_volume, save_dctt};
use tfnet_core::head::{load_detections, save_detections};
use tfnet_core::imaging::RgbImage;
use tfnet_core::metrics::{format_report, frame_map};
use tfnet_core::trainer::{evaluate, format_sweep, save_saliency, saliency, sweep_channels, train, SaliencyTarget};
use tfnet_core::Error;

#[derive(Parser)]
#[command(name = "tfnet", version, about = "Two-branch (DCT + clip) action detector")]
struct Cli {
    /// Worker threads (1 gives bit-reproducible runs).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML); micro preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.batch_size=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p, &overrides)?,
            None => RunConfig::from_toml("", &overrides)?,
        };
        info!("effective config:\n{}", cfg.to_toml());
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the DCT channels of an image as a DCTT file.
    #[command(group(ArgGroup::new("keep").required(true).args(["lambda", "channels"])))]
    DctExport {
        #[arg(long)]
        image: PathBuf,
        /// Fraction of coefficients kept per component.
        #[arg(long)]
        lambda: Option<f64>,
        /// Channels kept per component (1..=64).
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic moving-shape dataset.
    SynthData {
        /// Dataset spec (TOML); defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Final checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration `iter loss lr` log; defaults to the checkpoint path with `.log`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Frame-mAP report of a checkpoint or a detection dump.
    Eval {
        #[arg(long, required_unless_present = "dets", conflicts_with = "dets")]
        ckpt: Option<PathBuf>,
        /// Score a detection dump against every labeled frame instead.
        #[arg(long)]
        dets: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Dataset split; the checkpoint's eval split by default, else `train`.
        #[arg(long)]
        split: Option<String>,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also write the checkpoint's detections.
        #[arg(long)]
        save_dets: Option<PathBuf>,
    },
    /// Guided-backprop saliency maps of one clip.
    Saliency {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of `frame_<n>.png` files.
        #[arg(long)]
        clip: PathBuf,
        /// First frame position; the last full clip by default.
        #[arg(long)]
        start: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate once per DCT channel count.
    SweepLambda {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Channel counts per component, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) => 4,
        _ => 3,
    }
}

fn init_logging() -> Result<(), String> {
    let level = match std::env::var("TFNET_LOG").as_deref() {
        Err(_) | Ok("info") => LevelFilter::Info,
        Ok("quiet") => LevelFilter::Off,
        Ok("debug") => LevelFilter::Debug,
        Ok(other) => return Err(format!("TFNET_LOG must be quiet, info or debug, not '{other}'")),
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .init();
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    if let Err(m) = init_logging() {
        eprintln!("ERROR 2: {m}");
        return ExitCode::from(2);
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("ERROR 2: --threads must be positive");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("thread pool is configured once");
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("ERROR {code}: {e}");
            ExitCode::from(code)
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_parent(path: &Path) -> Result<(), Error> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::DctExport {
            image,
            lambda,
            channels,
            out,
        } => {
            let keep = match (lambda, channels) {
                (_, Some(c)) => c,
                (Some(l), None) => channels_for_lambda(l)?,
                (None, None) => unreachable!("clap requires --lambda or --channels"),
            };
            let img = RgbImage::load(&image)?;
            let vol = frequency_volume(&img, keep)?;
            create_parent(&out)?;
            save_dctt(&out, &vol)?;
            info!(
                "wrote {} channels of {}×{} blocks to {}",
                vol.channels(),
                vol.block_rows(),
                vol.block_cols(),
                out.display()
            );
        }
        Command::SynthData {
            spec,
            overrides,
            seed,
            out,
        } => {
            let mut table: toml::Table = match &spec {
                Some(p) => std::fs::read_to_string(p)
                    .map_err(|e| Error::io(p, e))?
                    .parse()
                    .map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", p.display())))?,
                None => toml::Table::new(),
            };
            for o in &overrides {
                let (k, v) = o
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("'{o}' is not key=value")))?;
                let value = format!("v = {v}")
                    .parse::<toml::Table>()
                    .ok()
                    .and_then(|mut t| t.remove("v"))
                    .unwrap_or_else(|| toml::Value::String(v.to_string()));
                table.insert(k.trim().to_string(), value);
            }
            let spec: SynthSpec = toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(format!("synthetic spec: {e}")))?;
            synth_dataset(&spec, seed, &out)?;
            info!(
                "wrote {} clips of {} classes to {}",
                spec.classes * spec.clips_per_class,
                spec.classes,
                out.display()
            );
        }
        Command::Train { config, data, out, log } => {
            let cfg = config.load()?;
            let index = DatasetIndex::load(&data, &cfg.data.train_split)?;
            create_parent(&out)?;
            let log_path = log.unwrap_or_else(|| out.with_extension("log"));
            let mut log_file =
                std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
            let mut io_error = None;
            let result = train(&cfg, &index, Some(&out), &mut |s| {
                if io_error.is_none() {
                    if let Err(e) = writeln!(log_file, "{s}") {
                        io_error = Some(e);
                    }
                }
                log::debug!("{s}");
                if s.iteration % 50 == 0 {
                    info!("iter {} loss {:.5} lr {:e}", s.iteration, s.loss, s.lr);
                }
            });
            log_file.flush().map_err(|e| Error::io(&log_path, e))?;
            if let Some(e) = io_error {
                return Err(Error::io(&log_path, e));
            }
            let (_, summary) = result?;
            if summary.dropped_targets > 0 {
                info!("{} ground-truth boxes found no free anchor", summary.dropped_targets);
            }
            info!("trained {} iterations; checkpoint {}", summary.steps.len(), out.display());
        }
        Command::Eval {
            ckpt,
            dets,
            data,
            split,
            iou,
            report,
            save_dets,
        } => {
            let text = match (ckpt, dets) {
                (Some(ckpt), _) => {
                    let (mut model, cfg, _) = load_checkpoint(&ckpt)?;
                    let split = split.unwrap_or_else(|| cfg.data.eval_split.clone());
                    let index = DatasetIndex::load(&data, &split)?;
                    let ev = evaluate(&mut model, &cfg, &index, iou)?;
                    if let Some(p) = save_dets {
                        create_parent(&p)?;
                        save_detections(&p, &ev.detections)?;
                    }
                    format_report(&ev.report)
                }
                (None, Some(dets)) => {
                    let index = DatasetIndex::load(&data, split.as_deref().unwrap_or("train"))?;
                    let detections = load_detections(&dets)?;
                    let gts = labeled_frames(&index);
                    format_report(&frame_map(&detections, &gts, &index.classes, iou)?)
                }
                (None, None) => unreachable!("clap requires one of --ckpt and --dets"),
            };
            print!("{text}");
            if let Some(p) = report {
                create_parent(&p)?;
                write_text(&p, &text)?;
            }
        }
        Command::Saliency {
            ckpt,
            clip,
            start,
            out,
        } => {
            let (mut model, cfg, _) = load_checkpoint(&ckpt)?;
            let video = load_video_dir(&clip)?;
            let start = start.unwrap_or(video.frame_count().saturating_sub(cfg.clip.clip_depth));
            let sample = load_clip(&video, start, 1, &cfg.clip)?;
            let sal = saliency(&mut model, &cfg, &sample)?;
            let files = save_saliency(&out, &sal)?;
            match sal.target {
                SaliencyTarget::Detection {
                    class_id, score, cell, ..
                } => info!("objective: class {class_id} score {score:.4} at cell {cell:?}"),
                SaliencyTarget::MaxLogit {
                    class_id, logit, cell, ..
                } => info!("no detection above threshold; class {class_id} logit {logit:.4} at cell {cell:?}"),
            }
            info!("wrote {} maps to {}", files.len(), out.display());
        }
        Command::SweepLambda {
            config,
            data,
            values,
            iou,
            out,
        } => {
            let cfg = config.load()?;
            let train_index = DatasetIndex::load(&data, &cfg.data.train_split)?;
            let eval_index = DatasetIndex::load(&data, &cfg.data.eval_split)?;
            let rows = sweep_channels(&cfg, &train_index, &eval_index, &values, iou, &mut |c, s| {
                log::debug!("channels {c}: {s}");
            })?;
            let table = format_sweep(&rows);
            print!("{table}");
            if let Some(p) = out {
                create_parent(&p)?;
                write_text(&p, &table)?;
            }
        }
    }
    Ok(())
}

/// Every frame listed in the split's label files, in source pixels.
fn labeled_frames(index: &DatasetIndex) -> Vec<GroundTruthFrame> {
    index
        .videos
        .iter()
        .flat_map(|v| {
            v.labels.iter().map(move |(n, boxes)| GroundTruthFrame {
                frame_id: format!("{}/{n:05}", v.id),
                boxes: boxes.clone(),
            })
        })
        .collect()
}
