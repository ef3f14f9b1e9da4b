use std::path::PathBuf;

use rop::io;
use serde::Serialize;

use super::{emit, Context};
use crate::error::{CliError, CliResult};
use crate::manifest::Recorder;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Dataset (`.ropt`).
    pub dataset: PathBuf,
    /// Bin factor; must divide the (trimmed) pattern width.
    #[arg(long, default_value_t = 1)]
    pub bin: usize,
    /// Central width kept after binning.
    #[arg(long)]
    pub crop: Option<usize>,
    /// Central width kept before binning, to make the width divisible.
    #[arg(long)]
    pub trim: Option<usize>,
    /// Simulation grid of the result (defaults to `m / bin`).
    #[arg(long)]
    pub grid: Option<usize>,
}

#[derive(Debug, Serialize)]
struct ReduceSettings {
    bin: usize,
    crop: Option<usize>,
    trim: Option<usize>,
    grid: Option<usize>,
}

pub fn run(ctx: &Context, args: &Args) -> CliResult<()> {
    if args.bin == 0 {
        return Err(CliError::Usage("--bin must be at least 1".into()));
    }
    ctx.create_out()?;
    let mut rec = Recorder::new("reduce", &ctx.out, ctx.seed.unwrap_or(0), ctx.threads);
    rec.config(&ReduceSettings {
        bin: args.bin,
        crop: args.crop,
        trim: args.trim,
        grid: args.grid,
    })?;
    rec.input(&args.dataset)?;
    let mut ds = io::read_dataset(&args.dataset)?;
    let before = ds.geometry().oversampling_ratio();
    if let Some(t) = args.trim {
        ds = ds.cropped(t)?;
    }
    ds = ds.binned(args.bin, None)?;
    if let Some(c) = args.crop {
        ds = ds.cropped(c)?;
    }
    if let Some(m) = args.grid {
        ds = ds.regridded(m)?;
    }
    emit(&mut rec, "dataset.ropt", &io::encode_dataset(&ds)?)?;
    rec.finish()?;

    let g = ds.geometry();
    println!("patterns: {} px, grid m = {}, support w = {:.4} nm", g.n(), g.m(), g.w_nm());
    println!("oversampling ratio: {:.4} (was {:.4})", g.oversampling_ratio(), before);
    Ok(())
}
