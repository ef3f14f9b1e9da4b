use rop::fields::{synthesize_probe, ProbeSpec};
use rop::forward::{simulate_dataset, split_seed, PotentialVolume};
use rop::geometry::ExperimentGeometry;
use rop::io;
use rop::scan::{grid_scan, halton_disc, halton_square, ScanPattern};

use super::{emit, emit_with_sidecar, input_with_sidecar, read_text, Context, STREAM_NOISE};
use crate::config::{self, ScanConfig, SimulateConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::Recorder;

fn build_scan(cfg: &ScanConfig, rec: &mut Recorder) -> CliResult<ScanPattern> {
    Ok(match cfg {
        ScanConfig::Grid {
            nx,
            ny,
            step_nm,
            origin_nm,
        } => grid_scan(*nx, *ny, *step_nm)?.translated(*origin_nm),
        ScanConfig::HaltonDisc {
            count,
            diameter_nm,
            center_nm,
        } => halton_disc(*count, *diameter_nm)?.translated(*center_nm),
        ScanConfig::HaltonSquare {
            count,
            side_nm,
            origin_nm,
        } => halton_square(*count, *side_nm)?.translated(*origin_nm),
        ScanConfig::File { path } => {
            rec.input(path)?;
            let scan = ScanPattern::from_csv(&read_text(path)?, 1.0)?;
            let nominal = scan.mean_nearest_neighbor();
            let kind = scan.kind();
            ScanPattern::new(scan.into_positions(), if nominal > 0.0 { nominal } else { 1.0 }, kind)?
        }
    })
}

fn build_potential(cfg: &SimulateConfig, g: &ExperimentGeometry) -> CliResult<PotentialVolume> {
    let d = g.d_nm();
    let v = match (&cfg.structure, &cfg.potential) {
        (Some(_), Some(_)) => {
            return Err(CliError::Usage("give either a structure or a potential, not both".into()))
        }
        (Some(path), None) => {
            let atoms = io::parse_structure(&read_text(path)?)?;
            io::render_structure(&atoms, cfg.object_px, d, g.slices(), g.dz_nm())?
        }
        (None, Some(path)) => {
            let v = io::read_volume(path)?;
            if v.width() != cfg.object_px {
                return Err(CliError::Usage(format!(
                    "potential is {} px wide but object_px is {}",
                    v.width(),
                    cfg.object_px
                )));
            }
            if ((v.pitch_nm() - d) / d).abs() > 1e-9 {
                return Err(CliError::Usage(format!(
                    "potential pitch {} nm differs from the geometry pitch {d} nm",
                    v.pitch_nm()
                )));
            }
            v
        }
        (None, None) => PotentialVolume::vacuum(g.slices(), cfg.object_px, g.dz_nm(), d, false)?,
    };
    Ok(v)
}

pub fn run(ctx: &Context) -> CliResult<()> {
    let path = ctx.require_config("simulate")?;
    let mut cfg: SimulateConfig = config::load(path)?;
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    let geometry = ExperimentGeometry::try_from(cfg.geometry.clone())?;
    if cfg.object_px < geometry.m() {
        return Err(CliError::Usage(format!(
            "object_px {} is smaller than the probe window m = {}",
            cfg.object_px,
            geometry.m()
        )));
    }
    ctx.create_out()?;
    let mut rec = Recorder::new("simulate", &ctx.out, cfg.seed, ctx.threads);
    rec.config_path(path);
    rec.config(&cfg)?;

    if let Some(p) = &cfg.structure {
        rec.input(p)?;
    }
    if let Some(p) = &cfg.potential {
        input_with_sidecar(&mut rec, p)?;
    }
    let potential = rec.stage("potential", || build_potential(&cfg, &geometry))?;
    let probe = synthesize_probe(&ProbeSpec::from_geometry(&geometry, cfg.defocus_nm))?;
    let scan = build_scan(&cfg.scan, &mut rec)?;
    let noise_seed = split_seed(cfg.seed, STREAM_NOISE);
    let ds = rec.stage("simulate", || {
        simulate_dataset(&potential, &probe, scan.positions(), &geometry, cfg.dose, noise_seed)
    })?;

    emit(&mut rec, "dataset.ropt", &io::encode_dataset(&ds)?)?;
    io::write_volume(&ctx.out.join("potential.raw"), &potential)?;
    emit_with_sidecar(&mut rec, "potential.raw")?;
    io::write_field(&ctx.out.join("probe.raw"), &probe)?;
    emit_with_sidecar(&mut rec, "probe.raw")?;
    emit(&mut rec, "positions.csv", scan.to_csv().as_bytes())?;
    rec.finish()?;

    println!(
        "simulated {} patterns of {}x{} px; oversampling ratio {:.3}",
        ds.len(),
        geometry.n(),
        geometry.n(),
        geometry.oversampling_ratio()
    );
    Ok(())
}
