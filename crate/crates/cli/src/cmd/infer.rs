use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use log::info;
use precipdiff_core::pipeline::{correct, downscale, InferConfig, TaskModel};
use precipdiff_core::raster::{read_pgrid, write_pgrid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::manifest::{create_dir, event_key, list_grids, load_config, write_manifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum InferMode {
    Correct,
    Downscale,
    Unified,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<InferMode>,
    /// A `.pgrid` file or a directory of them.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    corr_model: Option<PathBuf>,
    #[arg(long)]
    down_model: Option<PathBuf>,
    /// Sampler steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Samples averaged per output.
    #[arg(long)]
    ensemble: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// Also write the corrected stage in unified mode.
    #[arg(long)]
    emit_intermediate: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct InferCmdConfig {
    pub mode: InferMode,
    pub input: PathBuf,
    pub corr_model: Option<PathBuf>,
    pub down_model: Option<PathBuf>,
    pub infer: InferConfig,
    pub emit_intermediate: bool,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for InferCmdConfig {
    fn default() -> Self {
        Self {
            mode: InferMode::Unified,
            input: PathBuf::from("sat"),
            corr_model: None,
            down_model: None,
            infer: InferConfig::default(),
            emit_intermediate: false,
            seed: 0,
            out: PathBuf::from("infer"),
        }
    }
}

fn resolve(args: InferArgs) -> Result<InferCmdConfig, CliError> {
    let mut c: InferCmdConfig = match &args.config {
        Some(p) => load_config(p)?,
        None => InferCmdConfig::default(),
    };
    c.mode = args.mode.unwrap_or(c.mode);
    c.input = args.input.unwrap_or(c.input);
    c.corr_model = args.corr_model.or(c.corr_model);
    c.down_model = args.down_model.or(c.down_model);
    c.infer.edm.num_steps = args.steps.unwrap_or(c.infer.edm.num_steps);
    c.infer.ensemble = args.ensemble.unwrap_or(c.infer.ensemble);
    c.infer.patch_size = args.patch.unwrap_or(c.infer.patch_size);
    c.infer.patch_stride = args.stride.unwrap_or(c.infer.patch_stride);
    c.emit_intermediate |= args.emit_intermediate;
    c.seed = args.seed.unwrap_or(c.seed);
    c.out = args.out.unwrap_or(c.out);
    Ok(c)
}

fn load_model(path: Option<&Path>, flag: &str) -> Result<TaskModel, CliError> {
    let path = path.ok_or_else(|| CliError::Config(format!("{flag} is required for this mode")))?;
    Ok(TaskModel::load(path)?)
}

/// Writes `corrected/<event>.pgrid` and/or `downscaled/<event>.pgrid` per
/// input grid. Each input gets its own generator seeded from `seed` and its
/// position.
pub fn run(args: InferArgs) -> Result<(), CliError> {
    let c = resolve(args)?;
    let need_corr = c.mode != InferMode::Downscale;
    let need_down = c.mode != InferMode::Correct;
    let corr = if need_corr { Some(load_model(c.corr_model.as_deref(), "--corr-model")?) } else { None };
    let down = if need_down { Some(load_model(c.down_model.as_deref(), "--down-model")?) } else { None };
    let inputs = list_grids(&c.input)?;
    if inputs.is_empty() {
        return Err(CliError::Config(format!("no .pgrid inputs under {}", c.input.display())));
    }
    let emit_corr = c.mode == InferMode::Correct || (need_corr && c.emit_intermediate);
    if emit_corr {
        create_dir(&c.out.join("corrected"))?;
    }
    if need_down {
        create_dir(&c.out.join("downscaled"))?;
    }
    let mut outputs = Vec::new();
    for (i, path) in inputs.iter().enumerate() {
        let key = event_key(path);
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed.wrapping_add(i as u64));
        let mut grid = read_pgrid(path)?;
        if let Some(m) = &corr {
            grid = correct(&grid, m, &c.infer, &mut rng)?;
            if emit_corr {
                let name = format!("corrected/{key}.pgrid");
                write_pgrid(&grid, c.out.join(&name))?;
                outputs.push(name);
            }
        }
        if let Some(m) = &down {
            grid = downscale(&grid, m, m.factor, &c.infer, &mut rng)?;
            let name = format!("downscaled/{key}.pgrid");
            write_pgrid(&grid, c.out.join(&name))?;
            outputs.push(name);
        }
        info!("{}: done ({}/{})", path.display(), i + 1, inputs.len());
    }
    write_manifest(&c.out.join("manifest.json"), "infer", &c, &outputs)
}
