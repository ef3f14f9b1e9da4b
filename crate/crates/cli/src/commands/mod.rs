pub mod export;
pub mod perturb;
pub mod plan;
pub mod reconstruct;
pub mod reduce;
pub mod simulate;
pub mod sweep;
pub mod verify;

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};
use crate::manifest::Recorder;

/// Random streams split from the run seed.
pub const STREAM_NOISE: u64 = 0;
pub const STREAM_PERTURB: u64 = 1;
pub const STREAM_VERIFY: u64 = 2;

#[derive(Debug)]
pub struct Context {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub threads: usize,
}

impl Context {
    pub fn require_config(&self, command: &str) -> CliResult<&Path> {
        self.config
            .as_deref()
            .ok_or_else(|| CliError::Usage(format!("{command} needs --config")))
    }

    pub fn create_out(&self) -> CliResult<()> {
        fs::create_dir_all(&self.out)?;
        Ok(())
    }
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `bytes` atomically into the output directory and records it.
pub fn emit(rec: &mut Recorder, name: &str, bytes: &[u8]) -> CliResult<()> {
    rop::io::atomic_write(&rec.out_dir().join(name), bytes)?;
    rec.output(name)?;
    Ok(())
}

/// Records a raw file written by a core writer together with its sidecar.
pub fn emit_with_sidecar(rec: &mut Recorder, name: &str) -> CliResult<()> {
    rec.output(name)?;
    rec.output(&format!("{name}.json"))?;
    Ok(())
}

/// Records an input file and, when present, its JSON sidecar.
pub fn input_with_sidecar(rec: &mut Recorder, path: &Path) -> CliResult<()> {
    rec.input(path)?;
    let side = rop::io::sidecar_path(path);
    if side.exists() {
        rec.input(&side)?;
    }
    Ok(())
}

/// Smallest even object width holding every probe window without wrapping.
pub fn default_object_px(positions: &[[f64; 2]], pitch_nm: f64, m: usize) -> usize {
    let span = |axis: usize| {
        let px = positions.iter().map(|p| (p[axis] / pitch_nm).round() as i64);
        let (lo, hi) = px.fold((i64::MAX, i64::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)));
        (hi - lo).max(0) as usize
    };
    let w = span(0).max(span(1)) + m;
    w + w % 2
}

pub fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> CliResult<Vec<T>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| CliError::Usage(format!("cannot parse {what} value '{s}'")))
        })
        .collect()
}
