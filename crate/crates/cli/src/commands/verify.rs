use ndarray::Array3;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rop::fields::{synthesize_probe, ComplexField, ProbeSpec};
use rop::forward::{split_seed, ForwardModel, PotentialVolume};
use rop::grad::check_gradients;
use rop::loss::{LossConfig, Metric};
use serde::Serialize;

use super::{emit, Context, STREAM_VERIFY};
use crate::config::{self, VerifyConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::Recorder;

const PITCH_NM: f64 = 0.05;
const DZ_NM: f64 = 0.4;

/// Outcome for one random instance.
#[derive(Debug, Clone, Serialize)]
pub struct VerifyRow {
    pub slices: usize,
    pub patterns: usize,
    pub metric: Metric,
    pub mu: f64,
    pub seed: u64,
    pub potential: f64,
    pub probe: f64,
    pub positions: f64,
    pub passed: bool,
}

struct Instance {
    model: ForwardModel,
    v: PotentialVolume,
    probe: ComplexField,
    positions: Vec<[f64; 2]>,
    data: Array3<f64>,
}

/// Random weak complex potential, a band-limited probe with random defocus,
/// positions near the object centre and positive data.
fn instance(cfg: &VerifyConfig, z: usize, p: usize, seed: u64) -> CliResult<Instance> {
    let (m, n) = (cfg.m, cfg.n);
    let model = ForwardModel::new(0.00418, m, n, PITCH_NM, DZ_NM)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ProbeSpec {
        theta_con_mrad: 21.4 * 16.0 / m as f64,
        defocus_nm: 2.0 + 6.0 * rng.random::<f64>(),
        lambda_pm: 4.18,
        m,
        pitch_nm: PITCH_NM,
    };
    // a global phase keeps real and imaginary parts of the probe both active
    let probe = synthesize_probe(&spec)?.scaled(10.0);
    let phase = Complex64::from_polar(1.0, rng.random::<f64>() * std::f64::consts::TAU);
    let probe = ComplexField::new(probe.values().mapv(|c| c * phase), PITCH_NM)?;
    let vals = Array3::from_shape_fn((z, m, m), |_| {
        Complex64::new(0.5 * rng.random::<f64>(), 0.05 * rng.random::<f64>())
    });
    let v = PotentialVolume::new(vals, DZ_NM, PITCH_NM, false)?;
    let centre = 0.5 * m as f64 * PITCH_NM;
    let positions = (0..p)
        .map(|_| {
            [
                centre + 0.3 * (rng.random::<f64>() - 0.5),
                centre + 0.3 * (rng.random::<f64>() - 0.5),
            ]
        })
        .collect();
    let data = Array3::from_shape_fn((p, n, n), |_| 0.5 + rng.random::<f64>());
    Ok(Instance {
        model,
        v,
        probe,
        positions,
        data,
    })
}

/// Runs every combination in the config.
pub fn verify(cfg: &VerifyConfig, run_seed: u64) -> CliResult<Vec<VerifyRow>> {
    if cfg.n > cfg.m || cfg.m < 4 {
        return Err(CliError::Usage(format!("need 4 <= m and n <= m, got m={} n={}", cfg.m, cfg.n)));
    }
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        for &z in &cfg.slices {
            for &p in &cfg.patterns {
                let inst_seed = split_seed(split_seed(run_seed, STREAM_VERIFY) ^ seed, (z * 1000 + p) as u64);
                let inst = instance(cfg, z, p, inst_seed)?;
                for &metric in &cfg.metrics {
                    for &mu in &cfg.mus {
                        let loss = LossConfig::new(metric, mu);
                        let c = check_gradients(
                            &inst.model,
                            &inst.v,
                            &inst.probe,
                            &inst.positions,
                            inst.data.view(),
                            &loss,
                            cfg.derivative_filter,
                        )?;
                        let passed = c.potential < cfg.tol_potential
                            && c.probe < cfg.tol_probe
                            && c.positions < cfg.tol_positions;
                        rows.push(VerifyRow {
                            slices: z,
                            patterns: p,
                            metric,
                            mu,
                            seed,
                            potential: c.potential,
                            probe: c.probe,
                            positions: c.positions,
                            passed,
                        });
                    }
                }
            }
        }
    }
    Ok(rows)
}

pub fn run(ctx: &Context) -> CliResult<()> {
    let cfg: VerifyConfig = match &ctx.config {
        Some(p) => config::load(p)?,
        None => VerifyConfig::default(),
    };
    let seed = ctx.seed.unwrap_or(0);
    ctx.create_out()?;
    let mut rec = Recorder::new("verify-grad", &ctx.out, seed, ctx.threads);
    if let Some(p) = &ctx.config {
        rec.config_path(p);
    }
    rec.config(&cfg)?;
    let rows = rec.stage("verify", || verify(&cfg, seed))?;

    println!("{:>2} {:>2} {:>3} {:>6} {:>11} {:>11} {:>11}  result", "Z", "P", "err", "mu", "dV", "dProbe", "dR");
    for r in &rows {
        println!(
            "{:>2} {:>2} {:>3} {:>6} {:>11.3e} {:>11.3e} {:>11.3e}  {}",
            r.slices,
            r.patterns,
            r.metric,
            r.mu,
            r.potential,
            r.probe,
            r.positions,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    emit(&mut rec, "verify.json", &serde_json::to_vec_pretty(&rows)?)?;
    rec.finish()?;
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::Check(format!("{failed} of {} gradient checks out of tolerance", rows.len())));
    }
    Ok(())
}
