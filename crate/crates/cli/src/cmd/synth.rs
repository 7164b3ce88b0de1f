use std::path::PathBuf;

use clap::Args;
use log::info;
use precipdiff_core::pipeline::{apply_bias, synth_event, BiasOperatorParams, SynthParams};
use precipdiff_core::raster::{max_coarsen, write_pgrid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::manifest::{create_dir, load_config, write_manifest};

/// Seconds between consecutive synthetic events.
pub const EVENT_INTERVAL_S: i64 = 3600;

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// JSON config or an earlier manifest; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    events: Option<usize>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    #[arg(long)]
    factor: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub events: usize,
    pub rows: usize,
    pub cols: usize,
    pub factor: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub synth: SynthParams,
    pub bias: BiasOperatorParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            events: 32,
            rows: 64,
            cols: 64,
            factor: 4,
            seed: 0,
            out: PathBuf::from("synth"),
            synth: SynthParams::default(),
            bias: BiasOperatorParams::default(),
        }
    }
}

fn resolve(args: SynthArgs) -> Result<SynthConfig, CliError> {
    let mut c: SynthConfig = match &args.config {
        Some(p) => load_config(p)?,
        None => SynthConfig::default(),
    };
    c.events = args.events.unwrap_or(c.events);
    c.rows = args.rows.unwrap_or(c.rows);
    c.cols = args.cols.unwrap_or(c.cols);
    c.factor = args.factor.unwrap_or(c.factor);
    c.seed = args.seed.unwrap_or(c.seed);
    c.out = args.out.unwrap_or(c.out);
    Ok(c)
}

/// Writes `hr/evNNNN.pgrid` (radar-like truth) and `sat/evNNNN.pgrid`
/// (biased coarse view) for each event.
pub fn run(args: SynthArgs) -> Result<(), CliError> {
    let c = resolve(args)?;
    if c.events == 0 {
        return Err(CliError::Config("--events must be >= 1".into()));
    }
    let (hr_dir, sat_dir) = (c.out.join("hr"), c.out.join("sat"));
    create_dir(&hr_dir)?;
    create_dir(&sat_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut outputs = Vec::with_capacity(2 * c.events);
    for i in 0..c.events {
        let hr = synth_event(&mut rng, c.rows, c.cols, &c.synth, i as i64 * EVENT_INTERVAL_S)?;
        let sat = apply_bias(&max_coarsen(&hr, c.factor)?, &c.bias, &mut rng)?;
        let name = format!("ev{i:04}.pgrid");
        write_pgrid(&hr, hr_dir.join(&name))?;
        write_pgrid(&sat, sat_dir.join(&name))?;
        outputs.push(format!("hr/{name}"));
        outputs.push(format!("sat/{name}"));
    }
    info!("wrote {} events to {}", c.events, c.out.display());
    write_manifest(&c.out.join("manifest.json"), "synth", &c, &outputs)
}
