use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use avloc_core::datamodel::{
    load_audio, load_image, load_manifest, preprocess_audio, preprocess_image, Split,
};
use avloc_core::evaluation::evaluate;
use avloc_core::grounding::{binary_to_gray, map_to_gray, save_map_tensor};
use avloc_core::inference::confidence_score;
use avloc_core::training::{epoch_checkpoint_name, prepare_dataset, StepRecord, Trainer};
use avloc_core::{visualize, Checkpoint, Error, Localizer, RunConfig};

#[derive(Parser)]
#[command(
    name = "avloc",
    version,
    about = "Audio-driven sound source localization"
)]
struct Cli {
    /// Worker threads for per-sample work; defaults to the number of logical CPUs.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the audio projection network and masker scalars.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on an annotated manifest.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Localize the sound of one audio clip in one image.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Blend a confidence tensor over an image.
    Visualize {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        confidence: PathBuf,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Validation(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Train { config, out } => cmd_train(&config, &out),
        Command::Eval {
            config,
            checkpoint,
            manifest,
            out,
        } => cmd_eval(&config, &checkpoint, &manifest, &out),
        Command::Infer {
            config,
            checkpoint,
            image,
            audio,
            out,
        } => cmd_infer(&config, &checkpoint, &image, &audio, &out),
        Command::Visualize {
            image,
            confidence,
            out,
        } => cmd_visualize(&image, &confidence, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn create_dir(dir: &Path) -> avloc_core::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn cmd_train(config: &Path, out: &Path) -> avloc_core::Result<()> {
    let cfg = RunConfig::load(config)?;
    let manifest = cfg
        .data
        .train_manifest
        .clone()
        .ok_or_else(|| Error::Config {
            key: "data.train_manifest".into(),
            msg: "required for training".into(),
        })?;
    let backends = cfg.build_backends()?;
    let dataset = load_manifest(&manifest, Split::Train)?;
    let samples = prepare_dataset(&dataset, &cfg.data.audio, &cfg.data.image, &backends)?;

    create_dir(out)?;
    cfg.write_resolved(out)?;
    let ckpt_dir = out.join("checkpoints");
    if cfg.output.epoch_checkpoints {
        create_dir(&ckpt_dir)?;
    }
    let log_path = out.join("metrics.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_err(&log_path, e))?);

    let mut trainer = Trainer::new(cfg.train_config(), &backends, &samples)?;
    let epochs = trainer.config().epochs;
    let last = std::cell::Cell::new(None::<StepRecord>);
    let mut on_step = |r: &StepRecord| -> avloc_core::Result<()> {
        writeln!(log, "{}", serde_json::to_string(r)?).map_err(|e| io_err(&log_path, e))?;
        last.set(Some(*r));
        Ok(())
    };
    let mut on_epoch = |ck: &Checkpoint| -> avloc_core::Result<()> {
        if let Some(r) = last.get() {
            println!(
                "epoch {}/{epochs} loss {:.4} (acl_i {:.4}, acl_f {:.4}, reg {:.4})",
                ck.epoch, r.loss, r.acl_i, r.acl_f, r.reg
            );
        }
        if cfg.output.epoch_checkpoints {
            ck.save(ckpt_dir.join(epoch_checkpoint_name(ck.epoch)))?;
        }
        Ok(())
    };
    let final_ck = trainer.run(&mut on_step, &mut on_epoch)?;
    log.flush()
        .map_err(|e| io_err(&out.join("metrics.jsonl"), e))?;
    let final_path = out.join("final.ckpt");
    final_ck.save(&final_path)?;
    println!(
        "{} steps; checkpoint {}",
        final_ck.step,
        final_path.display()
    );
    Ok(())
}

fn cmd_eval(
    config: &Path,
    checkpoint: &Path,
    manifest: &Path,
    out: &Path,
) -> avloc_core::Result<()> {
    let cfg = RunConfig::load(config)?;
    let ck = Checkpoint::load(checkpoint)?;
    let backends = cfg.build_backends()?;
    let localizer = Localizer::from_checkpoint(&ck, &backends, cfg.inference.clone())?;
    let dataset = load_manifest(manifest, Split::Test)?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: manifest has no samples",
            manifest.display()
        )));
    }
    let mut report = evaluate(&localizer, &dataset, &cfg.data.audio, &cfg.data.image)?;
    report.config = serde_json::to_value(&cfg)?;

    create_dir(out)?;
    cfg.write_resolved(out)?;
    report.write_json(&out.join("report.json"))?;
    if cfg.output.per_sample_csv {
        report.write_csv(&out.join("per_sample.csv"))?;
    }
    println!("samples: {}", report.samples_evaluated);
    for line in report.summary_lines() {
        println!("{line}");
    }
    Ok(())
}

fn cmd_infer(
    config: &Path,
    checkpoint: &Path,
    image: &Path,
    audio: &Path,
    out: &Path,
) -> avloc_core::Result<()> {
    let cfg = RunConfig::load(config)?;
    if cfg.inference.threshold_is_degenerate() {
        eprintln!(
            "warning: inference.threshold = {} makes the binary map constant",
            cfg.inference.threshold
        );
    }
    let ck = Checkpoint::load(checkpoint)?;
    let backends = cfg.build_backends()?;
    let localizer = Localizer::from_checkpoint(&ck, &backends, cfg.inference.clone())?;

    let raw = load_image(image)?;
    let tensor = preprocess_image(&raw, &cfg.data.image)?;
    let (wav, sr) = load_audio(audio)?;
    let clip = preprocess_audio(&wav, sr, &cfg.data.audio)?;
    let map = localizer.localize_at(&tensor, &clip, raw.size())?;

    create_dir(out)?;
    cfg.write_resolved(out)?;
    map_to_gray(&map.confidence).save(out.join("confidence.png"))?;
    save_map_tensor(out.join("confidence.tensor"), &map.confidence)?;
    binary_to_gray(&map.binary).save(out.join("binary.png"))?;

    let (h, w) = map.confidence.dim();
    let peak = map
        .confidence
        .indexed_iter()
        .fold(((0, 0), f64::NEG_INFINITY), |best, (ix, &v)| {
            if v > best.1 {
                (ix, v)
            } else {
                best
            }
        });
    let area = map.binary.iter().filter(|v| **v).count() as f64 / (h * w) as f64;
    println!("confidence_score: {:.6}", confidence_score(&map));
    println!("peak: row {} col {}", peak.0 .0, peak.0 .1);
    println!("binary_area: {area:.6}");
    Ok(())
}

fn cmd_visualize(image: &Path, confidence: &Path, out: &Path) -> avloc_core::Result<()> {
    visualize::overlay_files(image, confidence, out)?;
    println!("{}", out.display());
    Ok(())
}
