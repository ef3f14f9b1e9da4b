use std::path::PathBuf;

use rop::forward::split_seed;
use rop::io;
use rop::scan::{perturb_positions, ScanKind, ScanPattern};
use serde::Serialize;

use super::{emit, read_text, Context, STREAM_PERTURB};
use crate::error::{CliError, CliResult};
use crate::manifest::Recorder;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Dataset (`.ropt`) or positions CSV.
    pub input: PathBuf,
    /// Mean displacement in units of the nominal scan step.
    #[arg(long)]
    pub mean_dev: f64,
    /// Nominal scan step (nm); taken from the dataset geometry when omitted.
    #[arg(long)]
    pub dx: Option<f64>,
}

#[derive(Debug, Serialize)]
struct PerturbSettings {
    mean_dev: f64,
    dx_nm: f64,
}

pub fn run(ctx: &Context, args: &Args) -> CliResult<()> {
    ctx.create_out()?;
    let seed = ctx.seed.unwrap_or(0);
    let mut rec = Recorder::new("perturb", &ctx.out, seed, ctx.threads);
    rec.input(&args.input)?;
    let is_dataset = args.input.extension().is_some_and(|e| e == "ropt");
    let dataset = if is_dataset { Some(io::read_dataset(&args.input)?) } else { None };
    let dx = match (args.dx, &dataset) {
        (Some(dx), _) => dx,
        (None, Some(ds)) => ds.geometry().dx_nm(),
        (None, None) => return Err(CliError::Usage("--dx is required for a positions CSV".into())),
    };
    rec.config(&PerturbSettings {
        mean_dev: args.mean_dev,
        dx_nm: dx,
    })?;
    let positions = match &dataset {
        Some(ds) => ds.positions().to_vec(),
        None => ScanPattern::from_csv(&read_text(&args.input)?, dx)?.into_positions(),
    };
    let scan = ScanPattern::new(positions, dx, ScanKind::Perturbed)?;
    let moved = perturb_positions(&scan, args.mean_dev, split_seed(seed, STREAM_PERTURB))?;
    emit(&mut rec, "positions.csv", moved.to_csv().as_bytes())?;
    if let Some(ds) = &dataset {
        let shifted = ds.with_positions(moved.positions().to_vec())?;
        emit(&mut rec, "dataset.ropt", &io::encode_dataset(&shifted)?)?;
    }
    rec.finish()?;

    let mean = scan
        .positions()
        .iter()
        .zip(moved.positions())
        .map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1]))
        .sum::<f64>()
        / scan.len() as f64;
    println!("perturbed {} positions, mean displacement {:.4} nm ({:.3} dx)", scan.len(), mean, mean / dx);
    Ok(())
}
