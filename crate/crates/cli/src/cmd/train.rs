use std::path::PathBuf;

use clap::Args;
use log::info;
use precipdiff_core::edm::{train, EdmConfig, EdmError, TrainHyper};
use precipdiff_core::nn::{build_unet, UNetConfig};
use precipdiff_core::pipeline::{Task, TaskModel};
use serde::{Deserialize, Serialize};

use super::dataset::{build_pairs, load_events, load_pairs, parse_task, read_index, INDEX_FILE};
use crate::error::CliError;
use crate::manifest::{create_dir, load_config, write_manifest, write_text};

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_task)]
    task: Option<Task>,
    /// A `build-dataset` output, or a `synth` output to tile on the fly.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use only the first N events (or pairs, for a built dataset).
    #[arg(long)]
    events: Option<usize>,
    /// Channels per U-Net level, comma separated.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    factor: Option<usize>,
    /// Correction tile size when tiling a `synth` output.
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub task: Task,
    pub data: PathBuf,
    pub events: Option<usize>,
    /// Empty selects the per-task default.
    pub channels: Vec<usize>,
    pub noise_embed_dim: usize,
    pub factor: usize,
    pub patch: usize,
    pub stride: usize,
    pub hyper: TrainHyper,
    pub edm: EdmConfig,
    pub out: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Correction,
            data: PathBuf::from("synth"),
            events: None,
            channels: Vec::new(),
            noise_embed_dim: 32,
            factor: 4,
            patch: 20,
            stride: 10,
            hyper: TrainHyper::default(),
            edm: EdmConfig::default(),
            out: PathBuf::from("model"),
        }
    }
}

pub fn default_channels(task: Task) -> Vec<usize> {
    match task {
        Task::Correction => vec![32, 64, 128],
        Task::Downscale => vec![128, 256, 256, 512],
    }
}

fn resolve(args: TrainArgs) -> Result<TrainConfig, CliError> {
    let mut c: TrainConfig = match &args.config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    c.task = args.task.unwrap_or(c.task);
    c.data = args.data.unwrap_or(c.data);
    c.events = args.events.or(c.events);
    c.channels = args.channels.unwrap_or(c.channels);
    if c.channels.is_empty() {
        c.channels = default_channels(c.task);
    }
    c.factor = args.factor.unwrap_or(c.factor);
    c.patch = args.patch.unwrap_or(c.patch);
    c.stride = args.stride.unwrap_or(c.stride);
    c.hyper.epochs = args.epochs.unwrap_or(c.hyper.epochs);
    c.hyper.batch_size = args.batch_size.unwrap_or(c.hyper.batch_size);
    c.hyper.lr = args.lr.unwrap_or(c.hyper.lr);
    c.hyper.seed = args.seed.unwrap_or(c.hyper.seed);
    c.out = args.out.unwrap_or(c.out);
    Ok(c)
}

/// Trains one task model; writes `model.pdckpt`, `loss.csv` and a manifest.
pub fn run(args: TrainArgs) -> Result<(), CliError> {
    let mut c = resolve(args)?;
    let pairs = if c.data.join(INDEX_FILE).is_file() {
        let index = read_index(&c.data)?;
        if index.task != c.task {
            return Err(CliError::Config(format!("dataset holds {} pairs, --task is {}", index.task, c.task)));
        }
        c.factor = index.factor;
        let n = c.events.unwrap_or(index.train.len()).min(index.train.len());
        load_pairs(&c.data, c.task, &index.train[..n])?
    } else {
        let ev = load_events(&c.data, c.task == Task::Correction)?;
        let n = c.events.unwrap_or(ev.hr.len()).min(ev.hr.len());
        let idx: Vec<usize> = (0..n).collect();
        build_pairs(c.task, &ev, &idx, c.factor, c.patch, c.stride)?
    };
    info!("training {} model on {} pairs, channels {:?}", c.task, pairs.len(), c.channels);
    let unet = UNetConfig { noise_embed_dim: c.noise_embed_dim, ..UNetConfig::new(&c.channels) };
    let mut model = build_unet(unet, c.hyper.seed).map_err(|e| CliError::Config(e.to_string()))?;
    let report = match train(&mut model, &pairs, &c.hyper, &c.edm) {
        Ok(r) => r,
        Err(EdmError::TrainingDivergence { sigma, step }) => {
            let steps_per_epoch = pairs.len().div_ceil(c.hyper.batch_size.max(1)).max(1);
            let completed = step.unwrap_or(0) / steps_per_epoch;
            return Err(CliError::Divergence(format!(
                "training diverged at step {} (sigma {sigma}); last finite epoch {}",
                step.unwrap_or(0),
                completed.checked_sub(1).map_or("none".to_string(), |e| e.to_string())
            )));
        }
        Err(e) => return Err(CliError::Config(e.to_string())),
    };
    create_dir(&c.out)?;
    let task_model = TaskModel { task: c.task, factor: c.factor, model, norm: report.normalization };
    task_model.save(c.out.join("model.pdckpt"))?;
    let mut csv = String::from("epoch,mean_loss\n");
    for (e, l) in report.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{e},{l}\n"));
    }
    write_text(&c.out.join("loss.csv"), &csv)?;
    if let (Some(first), Some(last)) = (report.epoch_losses.first(), report.epoch_losses.last()) {
        info!("loss {first:.4} -> {last:.4}");
    }
    write_manifest(&c.out.join("manifest.json"), "train", &c, &["model.pdckpt".into(), "loss.csv".into()])
}
