use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use clap::{Parser, Subcommand};
use log::info;

use kongnet::io::{read_points, read_rgb_png, write_points, PointRow};
use kongnet::model::{checkpoint, KongNet};
use kongnet::pipeline::config::{EvalFile, PostprocessFile, TrainFile};
use kongnet::pipeline::dataset::{load_patches, prepare_samples, save_patches};
use kongnet::pipeline::evaluate::{evaluate, Protocol};
use kongnet::pipeline::train::{loss_log_header, loss_log_row};
use kongnet::pipeline::{infer_large, Trainer, TtaMode, DEFAULT_OVERLAP};
use kongnet::postprocess::PostprocessConfig;
use kongnet::preprocess::TargetMode;
use kongnet::testkit::{synth_dataset, SynthSpec};
use kongnet::{Error, Result};

#[derive(Parser)]
#[command(name = "kongnet", version, about = "Nuclei detection and classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Detect nuclei in PNG images.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A PNG file or a directory of PNGs.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 256)]
        tile: usize,
        /// Defaults to `tile - 64`.
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long, default_value = "none")]
        tta: TtaMode,
        /// Preset name (monkey, puma, pannuke, conic, midog) or a TOML file.
        #[arg(long, default_value = "monkey")]
        postprocess: String,
        /// Also report detections of the overall class, when the model has one.
        #[arg(long)]
        keep_overall: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        /// froc, pannuke, global_f1 or per_image_f1.
        #[arg(long)]
        protocol: Protocol,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// TOML with radius, margin_um, mpp, area and fp_rates.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Matching radius in pixels; overrides the config.
        #[arg(long)]
        radius: Option<f64>,
        /// JSON report.
        #[arg(long)]
        out: PathBuf,
        /// FROC curve points as CSV.
        #[arg(long)]
        froc_csv: Option<PathBuf>,
    },
    /// Write a synthetic annotated dataset.
    Synth {
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// three_class or confusable.
        #[arg(long, default_value = "three_class")]
        preset: String,
        #[arg(long, default_value_t = 5)]
        dilation_diameter: usize,
        #[arg(long, default_value_t = 6.0)]
        match_radius: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume } => train(&config, resume.as_deref()),
        Command::Infer {
            checkpoint,
            input,
            tile,
            stride,
            tta,
            postprocess,
            keep_overall,
            out,
        } => {
            let stride = stride.unwrap_or(tile.saturating_sub(DEFAULT_OVERLAP).max(1));
            infer(&checkpoint, &input, tile, stride, tta, &postprocess, keep_overall, &out)
        }
        Command::Eval {
            protocol,
            pred,
            gt,
            config,
            radius,
            out,
            froc_csv,
        } => {
            let mut cfg = match config {
                Some(p) => EvalFile::load(&p)?,
                None => EvalFile::default(),
            };
            if radius.is_some() {
                cfg.radius = radius;
            }
            let report = evaluate(protocol, read_points(&pred)?, read_points(&gt)?, &cfg)?;
            std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            if let (Some(path), Some(csv)) = (froc_csv, report.froc_csv()) {
                std::fs::write(path, csv)?;
            }
            info!("wrote {}", out.display());
            Ok(())
        }
        Command::Synth {
            n,
            seed,
            preset,
            dilation_diameter,
            match_radius,
            out,
        } => {
            let spec = match preset.as_str() {
                "three_class" => SynthSpec::three_class(),
                "confusable" => SynthSpec::confusable(),
                other => return Err(Error::InvalidInput(format!("unknown synth preset `{other}`"))),
            };
            let classes = spec.class_spec(dilation_diameter, match_radius)?;
            let items: Vec<_> = synth_dataset(&spec, "synth", n, seed)?
                .into_iter()
                .map(|s| (s.patch, s.annotation))
                .collect();
            save_patches(&out, &items, &classes)?;
            info!("wrote {n} patches to {}", out.display());
            Ok(())
        }
    }
}

fn train(config: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = TrainFile::load(config)?;
    let annotated = cfg.annotated_classes()?;
    let items = load_patches(&cfg.data_dir, &annotated, cfg.mpp)?;
    let mode = if cfg.model.variant.has_segmentation() {
        TargetMode::Full
    } else {
        TargetMode::DetectionOnly
    };
    let samples = prepare_samples(&items, &annotated, mode, cfg.model.overall_class)?;
    info!("{} training patches", samples.len());
    let device = Device::Cpu;
    let mut trainer = match resume {
        Some(path) => Trainer::resume(path, cfg.train.clone(), samples, DType::F32, &device)?,
        None => {
            let model = KongNet::new(cfg.model.clone(), DType::F32, &device, cfg.model_seed)?;
            Trainer::new(model, cfg.output_classes()?, cfg.loss, cfg.train.clone(), samples)?
        }
    };
    info!(
        "{} parameters, {} steps",
        trainer.model().count_parameters(),
        trainer.total_steps()
    );
    let mut log_file = match &cfg.loss_log {
        Some(path) => {
            let append = resume.is_some() && path.exists();
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(append)
                .write(true)
                .truncate(!append)
                .open(path)?;
            let mut w = BufWriter::new(f);
            if !append {
                writeln!(w, "{}", loss_log_header(trainer.classes()))?;
            }
            Some(w)
        }
        None => None,
    };
    while trainer.step_index() < trainer.total_steps() {
        let entry = trainer.train_step()?;
        if let Some(w) = log_file.as_mut() {
            writeln!(w, "{}", loss_log_row(&entry))?;
        }
        if entry.step % 50 == 0 {
            info!("step {} lr {:.3e} loss {:.4}", entry.step, entry.lr, entry.loss.total);
        }
    }
    if let Some(mut w) = log_file {
        w.flush()?;
    }
    if let Some(dir) = cfg.output.parent() {
        std::fs::create_dir_all(dir)?;
    }
    trainer.save(&cfg.output)?;
    info!("saved {}", cfg.output.display());
    Ok(())
}

fn postprocess_configs(arg: &str, n_classes: usize) -> Result<Vec<PostprocessConfig>> {
    let path = Path::new(arg);
    let configs = if path.extension().is_some_and(|e| e == "toml") {
        PostprocessFile::load(path)?.classes
    } else {
        vec![PostprocessFile::preset(arg)?]
    };
    if configs.len() != 1 && configs.len() != n_classes {
        return Err(Error::InvalidConfig(format!(
            "{} postprocess entries for {n_classes} classes",
            configs.len()
        )));
    }
    Ok(configs)
}

fn input_images(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| {
        p.extension().is_some_and(|e| e == "png")
            && !p
                .file_stem()
                .and_then(|s| s.to_str())
                .is_some_and(|s| s.ends_with("_instances"))
    });
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidInput(format!("no PNG images in {}", input.display())));
    }
    Ok(files)
}

#[allow(clippy::too_many_arguments)]
fn infer(
    ckpt: &Path,
    input: &Path,
    tile: usize,
    stride: usize,
    tta: TtaMode,
    postprocess: &str,
    keep_overall: bool,
    out: &Path,
) -> Result<()> {
    let ck = checkpoint::load(ckpt, DType::F32, &Device::Cpu)?;
    let model = ck.model;
    let classes = ck.meta.classes;
    let n_proper = model.config().proper_classes();
    let configs = postprocess_configs(postprocess, classes.len())?;
    let mut rows = Vec::new();
    for path in input_images(input)? {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let image = read_rgb_png(&path, 0.5)?;
        let dets = infer_large(&model, image.pixels(), &configs, tile, stride, tta)?;
        info!("{id}: {} detections", dets.len());
        for d in dets.into_iter().filter(|d| keep_overall || d.class_index < n_proper) {
            rows.push(PointRow {
                id: id.clone(),
                x: d.x,
                y: d.y,
                class_name: classes.name(d.class_index).unwrap_or_default().to_string(),
                confidence: Some(d.confidence),
            });
        }
    }
    write_points(out, &rows)
}
