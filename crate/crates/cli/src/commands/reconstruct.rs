use std::path::PathBuf;

use ndarray::Array2;
use rop::fields::{synthesize_probe, ComplexField, ProbeSpec};
use rop::forward::{calibrate_probe, Dataset, ForwardModel, PotentialVolume};
use rop::io;
use rop::optimizer::{run_epochs, OptimizerState, Problem};
use rop::scan::{ScanKind, ScanPattern};

use super::{default_object_px, emit, emit_with_sidecar, input_with_sidecar, read_text, Context};
use crate::config::{self, ReconstructConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::Recorder;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Dataset (`.ropt`).
    pub dataset: PathBuf,
    /// Overrides the slice count.
    #[arg(long)]
    pub slices: Option<usize>,
    /// Overrides the slice thickness (nm).
    #[arg(long)]
    pub dz: Option<f64>,
    /// Overrides the regularization weight.
    #[arg(long)]
    pub mu: Option<f64>,
    /// Overrides the epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
}

/// Loads the reconstruction config and applies flag overrides.
pub fn load_config(ctx: &Context, args: &Args, rec: &mut Recorder) -> CliResult<ReconstructConfig> {
    let path = ctx.require_config("reconstruct")?;
    let mut cfg: ReconstructConfig = config::load(path)?;
    rec.config_path(path);
    if let Some(z) = args.slices {
        cfg.slices = Some(z);
    }
    if let Some(dz) = args.dz {
        cfg.dz_nm = Some(dz);
    }
    if let Some(mu) = args.mu {
        cfg.optimizer.mu = mu;
    }
    if let Some(e) = args.epochs {
        cfg.optimizer.epochs = e;
    }
    cfg.optimizer.validate()?;
    Ok(cfg)
}

/// Initial state and problem for a dataset.
pub struct Setup {
    pub problem: Problem,
    pub state: OptimizerState,
}

/// Records the optional initialization files of a config.
pub fn record_inputs(cfg: &ReconstructConfig, rec: &mut Recorder) -> CliResult<()> {
    if let Some(p) = &cfg.positions {
        rec.input(p)?;
    }
    for p in [&cfg.potential, &cfg.probe].into_iter().flatten() {
        input_with_sidecar(rec, p)?;
    }
    Ok(())
}

pub fn prepare(ds: &Dataset, cfg: &ReconstructConfig) -> CliResult<Setup> {
    let g = ds.geometry();
    let slices = cfg.slices.unwrap_or(g.slices());
    let dz = cfg.dz_nm.unwrap_or(g.dz_nm());
    let model = ForwardModel::for_geometry(g, dz)?;
    let d = g.d_nm();

    let positions = match &cfg.positions {
        Some(p) => {
            let scan = ScanPattern::from_csv(&read_text(p)?, g.dx_nm())?;
            if scan.len() != ds.len() {
                return Err(CliError::Usage(format!(
                    "{} initial positions for {} patterns",
                    scan.len(),
                    ds.len()
                )));
            }
            scan.into_positions()
        }
        None => ds.positions().to_vec(),
    };

    let potential = match &cfg.potential {
        Some(p) => {
            let v = io::read_volume(p)?;
            if v.nslices() != slices {
                return Err(CliError::Usage(format!(
                    "initial potential has {} slices, expected {slices}",
                    v.nslices()
                )));
            }
            v.with_dz(dz)?
        }
        None => {
            let width = cfg
                .object_px
                .unwrap_or_else(|| default_object_px(&positions, d, g.m()));
            PotentialVolume::vacuum(slices, width, dz, d, cfg.shared_slices)?
        }
    };

    let mut probe = match &cfg.probe {
        Some(p) => io::read_field(p)?,
        None => synthesize_probe(&ProbeSpec::from_geometry(g, cfg.defocus_nm))?,
    };
    if cfg.calibrate_probe {
        probe = calibrate_probe(&probe, &model, ds)?;
    }

    let problem = Problem::new(model, ds.patterns_f64())?;
    let state = OptimizerState::new(potential, probe, positions, &cfg.optimizer);
    Ok(Setup { problem, state })
}

/// Writes potential, probe, positions, history and renderings.
pub fn write_outputs(
    rec: &mut Recorder,
    state: &OptimizerState,
    cfg: &ReconstructConfig,
    nominal_dx: f64,
) -> CliResult<()> {
    let out = rec.out_dir().to_path_buf();
    io::write_volume(&out.join("potential.raw"), &state.potential)?;
    emit_with_sidecar(rec, "potential.raw")?;
    io::write_field(&out.join("probe.raw"), &state.probe)?;
    emit_with_sidecar(rec, "probe.raw")?;
    let scan = ScanPattern::new(state.positions.clone(), nominal_dx, ScanKind::Perturbed)?;
    emit(rec, "positions.csv", scan.to_csv().as_bytes())?;
    emit(rec, "history.csv", io::history_csv(state.history()).as_bytes())?;
    write_images(rec, &state.potential, &state.probe, cfg.probe_gamma, cfg.fft_power)
}

pub fn write_images(
    rec: &mut Recorder,
    potential: &PotentialVolume,
    probe: &ComplexField,
    probe_gamma: f64,
    fft_power: f64,
) -> CliResult<()> {
    let out = rec.out_dir().to_path_buf();
    let projected: Array2<f64> = potential.projected().mapv(|c| c.re);
    io::write_gray16(&out.join("potential.png"), &projected)?;
    emit_with_sidecar(rec, "potential.png")?;
    let spectrum = io::weighted_fft_magnitude(&projected, fft_power);
    io::write_gray16(&out.join("potential_fft.png"), &spectrum)?;
    emit_with_sidecar(rec, "potential_fft.png")?;
    emit(rec, "probe.png", &io::encode_complex_hsv(probe.values(), probe_gamma)?)
}

pub fn run(ctx: &Context, args: &Args) -> CliResult<()> {
    ctx.create_out()?;
    let mut rec = Recorder::new("reconstruct", &ctx.out, ctx.seed.unwrap_or(0), ctx.threads);
    let cfg = load_config(ctx, args, &mut rec)?;
    rec.config(&cfg)?;
    rec.input(&args.dataset)?;
    let ds = io::read_dataset(&args.dataset)?;
    record_inputs(&cfg, &mut rec)?;
    let Setup { problem, mut state } = prepare(&ds, &cfg)?;

    let result = rec.stage("optimize", || run_epochs(&mut state, &cfg.optimizer, &problem));
    if let Err(e) = result {
        // keep the history that led to the failure
        emit(&mut rec, "history.csv", io::history_csv(state.history()).as_bytes())?;
        rec.finish()?;
        return Err(e.into());
    }
    write_outputs(&mut rec, &state, &cfg, ds.geometry().dx_nm())?;
    rec.finish()?;

    let last = state.history().last().map(|r| r.loss);
    println!(
        "{} epochs, {} evaluations, final loss {}",
        state.epoch(),
        state.evaluations(),
        last.map_or("n/a".to_string(), |l| format!("{l:.6e}"))
    );
    Ok(())
}
