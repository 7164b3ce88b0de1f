use std::path::{Path, PathBuf};

use clap::Args;
use log::info;
use precipdiff_core::metrics::{evaluate_pooled, BinMode, EvalConfig, EvalReport};
use precipdiff_core::raster::{linear_upsample, read_pgrid, PrecipGrid};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::manifest::{create_dir, event_key, list_grids, load_config, write_manifest, write_text};

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Predictions to score against `--truth` (pooled mode).
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Staged mode: raw satellite grids, upsampled before scoring.
    #[arg(long)]
    raw: Option<PathBuf>,
    /// Staged mode: corrected grids, upsampled before scoring.
    #[arg(long)]
    corrected: Option<PathBuf>,
    /// Staged mode: corrected-then-downscaled grids.
    #[arg(long)]
    downscaled: Option<PathBuf>,
    /// Upsampling factor for the staged raw and corrected rows.
    #[arg(long)]
    factor: Option<usize>,
    #[arg(long)]
    ssim_window: Option<usize>,
    /// Sample one cell per `N × N` block for the error bins.
    #[arg(long)]
    neighborhood: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalCmdConfig {
    pub pred: Option<PathBuf>,
    pub truth: PathBuf,
    pub raw: Option<PathBuf>,
    pub corrected: Option<PathBuf>,
    pub downscaled: Option<PathBuf>,
    pub factor: usize,
    pub metrics: EvalConfig,
    pub out: PathBuf,
}

impl Default for EvalCmdConfig {
    fn default() -> Self {
        Self {
            pred: None,
            truth: PathBuf::from("truth"),
            raw: None,
            corrected: None,
            downscaled: None,
            factor: 4,
            metrics: EvalConfig::default(),
            out: PathBuf::from("eval"),
        }
    }
}

fn resolve(args: EvalArgs) -> Result<EvalCmdConfig, CliError> {
    let mut c: EvalCmdConfig = match &args.config {
        Some(p) => load_config(p)?,
        None => EvalCmdConfig::default(),
    };
    c.pred = args.pred.or(c.pred);
    c.truth = args.truth.unwrap_or(c.truth);
    c.raw = args.raw.or(c.raw);
    c.corrected = args.corrected.or(c.corrected);
    c.downscaled = args.downscaled.or(c.downscaled);
    c.factor = args.factor.unwrap_or(c.factor);
    c.metrics.ssim_window = args.ssim_window.unwrap_or(c.metrics.ssim_window);
    if let Some(factor) = args.neighborhood {
        c.metrics.bin_mode = BinMode::Neighborhood { factor, seed: 0 };
    }
    if let (Some(seed), BinMode::Neighborhood { factor, .. }) = (args.seed, c.metrics.bin_mode) {
        c.metrics.bin_mode = BinMode::Neighborhood { factor, seed };
    }
    c.out = args.out.unwrap_or(c.out);
    Ok(c)
}

/// Reads `pred` and `truth` grids and pairs them by event key. Mismatched
/// key sets are evaluation misuse.
fn paired(pred: &Path, truth: &Path) -> Result<Vec<(PrecipGrid, PrecipGrid)>, CliError> {
    let p = list_grids(pred)?;
    let t = list_grids(truth)?;
    let pk: Vec<String> = p.iter().map(|x| event_key(x)).collect();
    let tk: Vec<String> = t.iter().map(|x| event_key(x)).collect();
    // Two single files are compared regardless of their names.
    if !(p.len() == 1 && t.len() == 1) && pk != tk {
        return Err(CliError::EvalMisuse(format!(
            "{} holds {} grids and {} holds {}, with differing event names",
            pred.display(),
            p.len(),
            truth.display(),
            t.len()
        )));
    }
    if p.is_empty() {
        return Err(CliError::EvalMisuse(format!("no grids under {}", pred.display())));
    }
    p.iter().zip(&t).map(|(a, b)| Ok((read_pgrid(a)?, read_pgrid(b)?))).collect()
}

#[derive(Serialize)]
struct StageRow<'a> {
    stage: &'a str,
    report: EvalReport,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// Pooled mode writes `report.json` and `bins.csv`; staged mode scores raw
/// and corrected (both upsampled) and downscaled grids against truth and
/// writes `staged.json` and `staged.csv`.
pub fn run(args: EvalArgs) -> Result<(), CliError> {
    let c = resolve(args)?;
    create_dir(&c.out)?;
    let outputs: Vec<String> = match (&c.pred, &c.raw, &c.corrected, &c.downscaled) {
        (Some(pred), None, None, None) => {
            let report = evaluate_pooled(&paired(pred, &c.truth)?, &c.metrics)?;
            write_text(&c.out.join("report.json"), &(report.to_json() + "\n"))?;
            write_text(&c.out.join("bins.csv"), &report.bins_csv())?;
            info!("rmse {:.4} crps {:.4} over {} pixels", report.rmse, report.crps, report.n_pixels);
            vec!["report.json".into(), "bins.csv".into()]
        }
        (None, Some(raw), Some(corrected), Some(downscaled)) => {
            let stages = [("raw", raw, true), ("corrected", corrected, true), ("corrected+downscaled", downscaled, false)];
            let mut rows = Vec::new();
            for (stage, dir, upsample) in stages {
                let mut pairs = paired(dir, &c.truth)?;
                if upsample {
                    for (p, _) in pairs.iter_mut() {
                        *p = linear_upsample(p, c.factor)?;
                    }
                }
                rows.push(StageRow { stage, report: evaluate_pooled(&pairs, &c.metrics)? });
            }
            let mut csv = String::from("stage,rmse,crps,cc,ssim\n");
            for r in &rows {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.stage,
                    r.report.rmse,
                    r.report.crps,
                    fmt_opt(r.report.cc),
                    fmt_opt(r.report.ssim)
                ));
                info!("{}: rmse {:.4}", r.stage, r.report.rmse);
            }
            write_text(&c.out.join("staged.json"), &(serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n"))?;
            write_text(&c.out.join("staged.csv"), &csv)?;
            vec!["staged.json".into(), "staged.csv".into()]
        }
        _ => return Err(CliError::EvalMisuse("give either --pred, or all of --raw, --corrected and --downscaled".into())),
    };
    write_manifest(&c.out.join("manifest.json"), "eval", &c, &outputs)
}
