use std::path::PathBuf;

use ndarray::{Array2, Axis};
use rop::io;
use serde::Serialize;

use super::{emit, emit_with_sidecar, input_with_sidecar, Context};
use crate::error::{CliError, CliResult};
use crate::manifest::Recorder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Rendering {
    /// Grayscale for volumes and datasets, colour for fields.
    Auto,
    /// Real part (volumes: projected) as 16-bit grayscale.
    Gray,
    /// Amplitude as brightness, phase as hue.
    Hsv,
    /// Radially weighted Fourier magnitude of the real part.
    Fft,
}

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Raw field or volume (with sidecar), or a dataset (`.ropt`).
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    pub rendering: Rendering,
    /// Brightness exponent for colour renderings.
    #[arg(long, default_value_t = 0.25)]
    pub gamma: f64,
    /// Radial weighting exponent for Fourier renderings.
    #[arg(long, default_value_t = 0.4)]
    pub power: f64,
    /// Render this slice of a volume instead of the projection.
    #[arg(long)]
    pub slice: Option<usize>,
}

#[derive(Debug, Serialize)]
struct ExportSettings {
    rendering: Rendering,
    gamma: f64,
    power: f64,
    slice: Option<usize>,
}

pub fn run(ctx: &Context, args: &Args) -> CliResult<()> {
    ctx.create_out()?;
    let mut rec = Recorder::new("export", &ctx.out, ctx.seed.unwrap_or(0), ctx.threads);
    rec.config(&ExportSettings {
        rendering: args.rendering,
        gamma: args.gamma,
        power: args.power,
        slice: args.slice,
    })?;
    let stem = args
        .input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "export".into());
    let name = format!("{stem}.png");
    let out = ctx.out.join(&name);

    if args.input.extension().is_some_and(|e| e == "ropt") {
        rec.input(&args.input)?;
        let ds = io::read_dataset(&args.input)?;
        // mean pattern over all positions
        let mean: Array2<f64> = ds
            .patterns_f64()
            .mean_axis(Axis(0))
            .ok_or_else(|| CliError::Usage("dataset holds no patterns".into()))?;
        io::write_gray16(&out, &mean)?;
        emit_with_sidecar(&mut rec, &name)?;
        rec.finish()?;
        println!("wrote {}", out.display());
        return Ok(());
    }

    input_with_sidecar(&mut rec, &args.input)?;
    let side: io::RawSidecar = serde_json::from_slice(&std::fs::read(io::sidecar_path(&args.input))?)?;
    let values = match side.shape.len() {
        2 => io::read_field(&args.input)?.into_values(),
        3 => {
            let v = io::read_volume(&args.input)?;
            match args.slice {
                Some(z) if z < v.nslices() => v.slice(z).to_owned(),
                Some(z) => return Err(CliError::Usage(format!("slice {z} out of range 0..{}", v.nslices()))),
                None => v.projected(),
            }
        }
        k => return Err(CliError::Usage(format!("cannot render a {k}-dimensional array"))),
    };
    let rendering = match args.rendering {
        Rendering::Auto if side.shape.len() == 2 => Rendering::Hsv,
        Rendering::Auto => Rendering::Gray,
        r => r,
    };
    match rendering {
        Rendering::Hsv => emit(&mut rec, &name, &io::encode_complex_hsv(&values, args.gamma)?)?,
        Rendering::Gray | Rendering::Fft | Rendering::Auto => {
            let re = values.mapv(|c| c.re);
            let img = if rendering == Rendering::Fft {
                io::weighted_fft_magnitude(&re, args.power)
            } else {
                re
            };
            io::write_gray16(&out, &img)?;
            emit_with_sidecar(&mut rec, &name)?;
        }
    }
    rec.finish()?;
    println!("wrote {}", out.display());
    Ok(())
}
