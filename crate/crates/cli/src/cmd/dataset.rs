use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use log::info;
use precipdiff_core::pipeline::{
    build_correction_dataset, build_downscale_dataset, rain_event_mask, split_train_test, Task, TrainingPair,
};
use precipdiff_core::raster::{read_pgrid, write_pgrid, PrecipGrid};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::manifest::{create_dir, event_key, list_grids, load_config, write_manifest, write_text};

pub const INDEX_FILE: &str = "dataset.json";

#[derive(Args, Debug)]
pub struct DatasetArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_task)]
    task: Option<Task>,
    /// Directory holding `hr/` and `sat/` grids, as written by `synth`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    factor: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// Keep events whose zero fraction is at most this value.
    #[arg(long)]
    zero_fraction_max: Option<f64>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn parse_task(s: &str) -> Result<Task, String> {
    match s {
        "correction" => Ok(Task::Correction),
        "downscale" => Ok(Task::Downscale),
        _ => Err(format!("unknown task `{s}` (expected correction or downscale)")),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub task: Task,
    pub data: PathBuf,
    pub factor: usize,
    pub patch: usize,
    pub stride: usize,
    pub zero_fraction_max: f64,
    pub train_fraction: f64,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            task: Task::Correction,
            data: PathBuf::from("synth"),
            factor: 4,
            patch: 20,
            stride: 10,
            zero_fraction_max: 0.5,
            train_fraction: 0.9,
            seed: 0,
            out: PathBuf::from("dataset"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairEntry {
    pub cond: String,
    pub residual: String,
    pub source_id: String,
}

/// Index of a dataset directory; paths are relative to it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub task: Task,
    pub factor: usize,
    pub train: Vec<PairEntry>,
    pub test: Vec<PairEntry>,
    pub train_events: Vec<String>,
    pub test_events: Vec<String>,
}

/// Event grids from a `synth`-style directory, keyed by file stem.
pub struct Events {
    pub keys: Vec<String>,
    pub hr: Vec<PrecipGrid>,
    pub sat: Vec<PrecipGrid>,
}

pub fn load_events(data: &Path, need_sat: bool) -> Result<Events, CliError> {
    let hr_files = list_grids(&data.join("hr"))?;
    let keys: Vec<String> = hr_files.iter().map(|p| event_key(p)).collect();
    let hr = hr_files.iter().map(read_pgrid).collect::<Result<Vec<_>, _>>()?;
    let sat = if need_sat {
        let sat_files = list_grids(&data.join("sat"))?;
        let sat_keys: Vec<String> = sat_files.iter().map(|p| event_key(p)).collect();
        if sat_keys != keys {
            return Err(CliError::Config(format!("{}: hr/ and sat/ hold different events", data.display())));
        }
        sat_files.iter().map(read_pgrid).collect::<Result<Vec<_>, _>>()?
    } else {
        Vec::new()
    };
    Ok(Events { keys, hr, sat })
}

/// Builds pairs for `task` from the events at `idx`.
pub fn build_pairs(
    task: Task,
    ev: &Events,
    idx: &[usize],
    factor: usize,
    patch: usize,
    stride: usize,
) -> Result<Vec<TrainingPair>, CliError> {
    let hr: Vec<PrecipGrid> = idx.iter().map(|&i| ev.hr[i].clone()).collect();
    Ok(match task {
        Task::Downscale => build_downscale_dataset(&hr, factor)?,
        Task::Correction => {
            let sat: Vec<PrecipGrid> = idx.iter().map(|&i| ev.sat[i].clone()).collect();
            build_correction_dataset(&sat, &hr, factor, patch, stride)?
        }
    })
}

fn resolve(args: DatasetArgs) -> Result<DatasetConfig, CliError> {
    let mut c: DatasetConfig = match &args.config {
        Some(p) => load_config(p)?,
        None => DatasetConfig::default(),
    };
    c.task = args.task.unwrap_or(c.task);
    c.data = args.data.unwrap_or(c.data);
    c.factor = args.factor.unwrap_or(c.factor);
    c.patch = args.patch.unwrap_or(c.patch);
    c.stride = args.stride.unwrap_or(c.stride);
    c.zero_fraction_max = args.zero_fraction_max.unwrap_or(c.zero_fraction_max);
    c.train_fraction = args.train_fraction.unwrap_or(c.train_fraction);
    c.seed = args.seed.unwrap_or(c.seed);
    c.out = args.out.unwrap_or(c.out);
    Ok(c)
}

fn write_split(dir: &Path, split: &str, pairs: &[TrainingPair]) -> Result<Vec<PairEntry>, CliError> {
    create_dir(&dir.join(split))?;
    pairs
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let cond = format!("{split}/cond_{k:05}.pgrid");
            let residual = format!("{split}/resid_{k:05}.pgrid");
            write_pgrid(&p.cond, dir.join(&cond))?;
            write_pgrid(&p.target_residual, dir.join(&residual))?;
            Ok(PairEntry { cond, residual, source_id: p.source_id.clone() })
        })
        .collect()
}

/// Filters rain events, splits them into train and test by event, and
/// writes the tiled pairs of each split.
pub fn run(args: DatasetArgs) -> Result<(), CliError> {
    let c = resolve(args)?;
    let ev = load_events(&c.data, c.task == Task::Correction)?;
    let mask = rain_event_mask(&ev.hr, c.zero_fraction_max)?;
    let idx: Vec<usize> = (0..ev.hr.len()).filter(|&i| mask[i]).collect();
    if idx.len() < 2 {
        return Err(CliError::Config(format!("only {} event(s) pass the rain filter", idx.len())));
    }
    let (train_idx, test_idx) = split_train_test(&idx, c.train_fraction, c.seed)?;
    let train = build_pairs(c.task, &ev, &train_idx, c.factor, c.patch, c.stride)?;
    let test = build_pairs(c.task, &ev, &test_idx, c.factor, c.patch, c.stride)?;
    create_dir(&c.out)?;
    let index = DatasetIndex {
        task: c.task,
        factor: c.factor,
        train: write_split(&c.out, "train", &train)?,
        test: write_split(&c.out, "test", &test)?,
        train_events: train_idx.iter().map(|&i| ev.keys[i].clone()).collect(),
        test_events: test_idx.iter().map(|&i| ev.keys[i].clone()).collect(),
    };
    write_text(&c.out.join(INDEX_FILE), &(serde_json::to_string_pretty(&index).expect("index serializes") + "\n"))?;
    info!("{} events kept, {} train / {} test pairs", idx.len(), train.len(), test.len());
    write_manifest(&c.out.join("manifest.json"), "build-dataset", &c, &[INDEX_FILE.to_string()])
}

pub fn read_index(dir: &Path) -> Result<DatasetIndex, CliError> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn load_pairs(dir: &Path, task: Task, entries: &[PairEntry]) -> Result<Vec<TrainingPair>, CliError> {
    entries
        .iter()
        .map(|e| {
            Ok(TrainingPair {
                cond: read_pgrid(dir.join(&e.cond))?,
                target_residual: read_pgrid(dir.join(&e.residual))?,
                task,
                source_id: e.source_id.clone(),
            })
        })
        .collect()
}
