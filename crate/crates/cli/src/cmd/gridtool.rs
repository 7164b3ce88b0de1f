use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use precipdiff_core::raster::{bicubic_upsample, linear_upsample, max_coarsen, mean_coarsen, read_pgrid, write_csv, write_pgrid};
use serde::Serialize;

use crate::error::CliError;
use crate::manifest::write_manifest;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum GridOp {
    CoarsenMax,
    CoarsenMean,
    UpsampleLinear,
    UpsampleBicubic,
    ToCsv,
}

#[derive(Args, Debug, Serialize)]
pub struct GridToolArgs {
    #[arg(value_enum)]
    op: GridOp,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 4)]
    factor: usize,
}

/// Applies one raster operation; the manifest lands next to the output as
/// `<output>.manifest.json`.
pub fn run(args: GridToolArgs) -> Result<(), CliError> {
    let grid = read_pgrid(&args.input)?;
    let out = match args.op {
        GridOp::CoarsenMax => Some(max_coarsen(&grid, args.factor)?),
        GridOp::CoarsenMean => Some(mean_coarsen(&grid, args.factor)?),
        GridOp::UpsampleLinear => Some(linear_upsample(&grid, args.factor)?),
        GridOp::UpsampleBicubic => Some(bicubic_upsample(&grid, args.factor)?),
        GridOp::ToCsv => None,
    };
    match out {
        Some(g) => write_pgrid(&g, &args.output)?,
        None => {
            let file = File::create(&args.output).map_err(|e| CliError::io(&args.output, e))?;
            write_csv(&grid, BufWriter::new(file))?;
        }
    }
    let mut manifest = args.output.clone().into_os_string();
    manifest.push(".manifest.json");
    let name = args.output.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    write_manifest(&PathBuf::from(manifest), "grid-tool", &args, &[name])
}
