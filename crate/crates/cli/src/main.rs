//! `personmae`: synthetic data, pre-training, retrieval evaluation and
//! sample inspection.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};

use personmae::checkpoint::Checkpoint;
use personmae::config::RunConfig;
use personmae::data::{
    format_label_filename, generate_synthetic_person, load_image_folder, read_image, write_png,
    ImageRecord, Split,
};
use personmae::eval::{compute_cmc_map, extract_features};
use personmae::inspect::write_inspection;
use personmae::rng::mix;
use personmae::trainer::{train_loop, Trainer};
use personmae::Error;

/// Cameras cycled through by `synth`, so every identity appears under
/// several camera ids.
const SYNTH_CAMERAS: usize = 6;

#[derive(Parser)]
#[command(
    name = "personmae",
    version,
    about = "Cross-region masked-autoencoder pre-training for person re-identification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labelled pedestrian dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        identities: usize,
        #[arg(long)]
        per_identity: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pre-train (or resume) from a run configuration.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Retrieval metrics of a checkpoint's online encoder.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        /// Directory for feature matrices and reports.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        max_rank: usize,
    },
    /// Dump the regions, mask and relation coordinates of one sample.
    Inspect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also render the pixel decoder's reconstruction.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn synth(out: &Path, identities: usize, per_identity: usize, seed: u64) -> personmae::Result<()> {
    if identities == 0 || per_identity == 0 {
        return Err(Error::InvalidArgument(
            "identities and per-identity must be positive".into(),
        ));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    for id in 0..identities {
        for j in 0..per_identity {
            let image = generate_synthetic_person(mix(&[seed, id as u64, j as u64]), id as i64);
            let camera = (j % SYNTH_CAMERAS + 1) as i64;
            let name = format_label_filename(id as i64, camera, &format!("{j:03}"), "png");
            write_png(image.pixels.view(), &out.join(name))?;
        }
    }
    info!(
        "wrote {} images to {}",
        identities * per_identity,
        out.display()
    );
    Ok(())
}

fn pretrain(config_path: &Path, resume: Option<&Path>) -> personmae::Result<()> {
    let run = RunConfig::load(config_path)?;
    let train_dir = run
        .train_dir
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("config sets no `train_dir`".into()))?;
    let manifest = load_image_folder(train_dir, Split::Pretrain)?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.model.config != run.model {
                return Err(Error::Checkpoint(format!(
                    "{} was trained with a different architecture than {}",
                    path.display(),
                    config_path.display()
                )));
            }
            if ckpt.train != run.train {
                warn!("training settings differ from the checkpoint; the checkpoint's are kept (except `epochs`)");
            }
            let mut trainer = Trainer::from_checkpoint(ckpt)?;
            trainer.config.epochs = run.train.epochs;
            trainer
        }
        None => Trainer::new(run.model, run.train)?,
    };
    std::fs::create_dir_all(&run.output_dir).map_err(|e| Error::Io {
        path: run.output_dir.clone(),
        source: e,
    })?;
    let settings = run.output_dir.join("config.txt");
    std::fs::write(&settings, run.to_text()).map_err(|e| Error::Io {
        path: settings,
        source: e,
    })?;
    info!(
        "{} images, {} epochs from epoch {}, output in {}",
        manifest.len(),
        trainer.config.epochs,
        trainer.epoch,
        run.output_dir.display()
    );
    let metrics = train_loop(&manifest, &mut trainer, Some(&run.output_dir))?;
    if let Some(last) = metrics.last() {
        info!(
            "finished at step {} with loss {:.5}",
            last.step, last.loss.total
        );
    }
    Ok(())
}

fn eval(
    checkpoint: &Path,
    query: &Path,
    gallery: &Path,
    out: Option<&Path>,
    max_rank: usize,
) -> personmae::Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let query = load_image_folder(query, Split::Query)?;
    let gallery = load_image_folder(gallery, Split::Gallery)?;
    let size = ckpt.model.config.image_size;
    let q = extract_features(&ckpt.model.online, size, &query)?;
    let g = extract_features(&ckpt.model.online, size, &gallery)?;
    let report = compute_cmc_map(&q, &g, max_rank)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        q.save(&dir.join("query_features.txt"))?;
        g.save(&dir.join("gallery_features.txt"))?;
        for (name, text) in [
            ("report.txt", report.to_table()),
            ("report.kv", report.to_key_values()),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
        }
    }
    eprint!("{}", report.to_table());
    println!("{}", report.summary_line());
    Ok(())
}

fn inspect(
    config: &Path,
    image: &Path,
    seed: u64,
    out: &Path,
    checkpoint: Option<&Path>,
) -> personmae::Result<()> {
    let run = RunConfig::load(config)?;
    let model = checkpoint
        .map(Checkpoint::load)
        .transpose()?
        .map(|c| c.model);
    let record = ImageRecord::new(read_image(image)?, -1, -1)?;
    let dump = write_inspection(
        &record,
        &run.model,
        &run.train.hyper(),
        seed,
        model.as_ref(),
        out,
    )?;
    info!(
        "pad {} shift {:?}, {} of {} patches masked",
        dump.sample.pad,
        dump.sample.shift,
        dump.sample.layout.masked_count(),
        dump.sample.layout.len()
    );
    for file in &dump.files {
        println!("{}", file.display());
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth {
            out,
            identities,
            per_identity,
            seed,
        } => synth(out, *identities, *per_identity, *seed),
        Command::Pretrain { config, resume } => pretrain(config, resume.as_deref()),
        Command::Eval {
            checkpoint,
            query,
            gallery,
            out,
            max_rank,
        } => eval(checkpoint, query, gallery, out.as_deref(), *max_rank),
        Command::Inspect {
            config,
            image,
            seed,
            out,
            checkpoint,
        } => inspect(config, image, *seed, out, checkpoint.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
