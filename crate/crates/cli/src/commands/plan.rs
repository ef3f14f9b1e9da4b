use std::path::PathBuf;

use rop::geometry::{ExperimentGeometry, GeometryDoc};
use serde::Serialize;

use super::Context;
use crate::config;
use crate::error::{CliError, CliResult};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Geometry JSON; `--config` is used when omitted.
    pub geometry: Option<PathBuf>,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
    /// Exit with a validation error when a design check fails.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Serialize)]
struct FindingRow<'a> {
    name: &'a str,
    passed: bool,
    value: f64,
    bound: f64,
    detail: &'a str,
}

#[derive(Debug, Serialize)]
struct PlanReport<'a> {
    oversampling_ratio: f64,
    widefield_ratio: f64,
    knowns: f64,
    unknowns: f64,
    theta_obs_mrad: f64,
    theta_cal_mrad: f64,
    findings: Vec<FindingRow<'a>>,
}

pub fn run(ctx: &Context, args: &Args) -> CliResult<()> {
    let path = match (&args.geometry, &ctx.config) {
        (Some(p), _) | (None, Some(p)) => p,
        (None, None) => return Err(CliError::Usage("plan needs a geometry file".into())),
    };
    let doc: GeometryDoc = config::load(path)?;
    let g = ExperimentGeometry::try_from(doc)?;
    let (knowns, unknowns) = g.knowns_unknowns()?;
    let design = g.design_check();
    let report = PlanReport {
        oversampling_ratio: g.oversampling_ratio(),
        widefield_ratio: g.oversampling_ratio_widefield(),
        knowns,
        unknowns,
        theta_obs_mrad: g.theta_obs_rad() * 1e3,
        theta_cal_mrad: g.theta_cal_rad() * 1e3,
        findings: design
            .findings
            .iter()
            .map(|f| FindingRow {
                name: f.name,
                passed: f.passed,
                value: f.value,
                bound: f.bound,
                detail: &f.detail,
            })
            .collect(),
    };
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("oversampling ratio   {:.4}", report.oversampling_ratio);
        println!("wide-field limit     {:.4}", report.widefield_ratio);
        println!("knowns / unknowns    {:.0} / {:.0}", knowns, unknowns);
        println!("theta_obs            {:.2} mrad", report.theta_obs_mrad);
        println!("theta_cal            {:.2} mrad", report.theta_cal_mrad);
        println!();
        println!("{design}");
    }
    if args.strict && !design.all_passed() {
        let failed: Vec<&str> = design.findings.iter().filter(|f| !f.passed).map(|f| f.name).collect();
        return Err(CliError::Design(format!("design checks failed: {}", failed.join(", "))));
    }
    Ok(())
}
