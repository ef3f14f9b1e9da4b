use std::path::PathBuf;

use rop::io;
use rop::optimizer::{mu_sweep, run_epochs};

use super::reconstruct::{prepare, record_inputs, Setup};
use super::{emit, input_with_sidecar, parse_list, Context};
use crate::config::{self, ReconstructConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::Recorder;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Dataset (`.ropt`).
    pub dataset: PathBuf,
    /// Reference potential volume (raw) to score against.
    #[arg(long)]
    pub truth: PathBuf,
    /// Comma-separated regularization weights.
    #[arg(long)]
    pub mu_grid: String,
}

pub fn run(ctx: &Context, args: &Args) -> CliResult<()> {
    let mu_grid: Vec<f64> = parse_list(&args.mu_grid, "mu")?;
    ctx.create_out()?;
    let mut rec = Recorder::new("sweep-mu", &ctx.out, ctx.seed.unwrap_or(0), ctx.threads);
    let path = ctx.require_config("sweep-mu")?;
    let mut cfg: ReconstructConfig = config::load(path)?;
    rec.config_path(path);
    rec.input(&args.dataset)?;
    input_with_sidecar(&mut rec, &args.truth)?;
    let ds = io::read_dataset(&args.dataset)?;
    let truth = io::read_volume(&args.truth)?;
    if cfg.object_px.is_none() {
        cfg.object_px = Some(truth.width());
    }
    rec.config(&cfg)?;
    record_inputs(&cfg, &mut rec)?;
    let truth_projected = truth.projected();

    let sweep = rec.stage("sweep", || {
        mu_sweep(&mu_grid, truth_projected.view(), |mu| {
            let mut run_cfg = cfg.clone();
            run_cfg.optimizer.mu = mu;
            let Setup { problem, mut state } = prepare(&ds, &run_cfg).map_err(into_core)?;
            run_epochs(&mut state, &run_cfg.optimizer, &problem)?;
            Ok(state.potential.projected())
        })
    })?;

    let sel = &sweep.selection;
    let mut csv = String::from("mu,rmse\n");
    for (mu, e) in sel.mu_grid.iter().zip(&sel.rmse) {
        csv.push_str(&format!("{mu:.17e},{e:.17e}\n"));
    }
    emit(&mut rec, "sweep.csv", csv.as_bytes())?;
    emit(&mut rec, "selection.json", &serde_json::to_vec_pretty(sel)?)?;
    rec.finish()?;

    let edge = if sel.boundary { " at the grid boundary" } else { "" };
    println!("selected mu = {} (rmse {:.6e}){edge}", sel.mu, sel.rmse[sel.index]);
    Ok(())
}

fn into_core(e: CliError) -> rop::RopError {
    match e {
        CliError::Core(e) => e,
        other => rop::RopError::InvalidArgument(other.to_string()),
    }
}
