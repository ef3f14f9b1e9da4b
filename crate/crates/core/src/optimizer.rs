//! Nonlinear conjugate gradients with Polak-Ribière directions and a cubic
//! line search, alternating over potential, probe and positions.

use std::fmt;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RopError};
use crate::fields::ComplexField;
use crate::forward::{Dataset, ForwardModel, PotentialVolume};
use crate::grad::{batched_gradients, DerivativeFilter, GradientBundle};
use crate::loss::{loss_batched, LossConfig, Metric, DEFAULT_LOG_FLOOR};

/// Parameter block updated during one sub-epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Potential,
    Probe,
    Positions,
}

impl Block {
    fn index(self) -> usize {
        match self {
            Block::Potential => 0,
            Block::Probe => 1,
            Block::Positions => 2,
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Block::Potential => "potential",
            Block::Probe => "probe",
            Block::Positions => "positions",
        })
    }
}

fn default_eps() -> f64 {
    DEFAULT_LOG_FLOOR
}

/// Reconstruction schedule and loss settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Initial step for the potential.
    pub alpha0: f64,
    /// Initial step for the probe.
    pub beta0: f64,
    /// Initial step for the positions.
    pub gamma0: f64,
    /// Potential iterations per epoch.
    pub potential_iters: usize,
    /// Probe iterations per epoch.
    pub probe_iters: usize,
    /// Position iterations per epoch.
    pub position_iters: usize,
    pub epochs: usize,
    pub metric: Metric,
    pub mu: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub update_probe: bool,
    #[serde(default)]
    pub update_positions: bool,
    #[serde(default)]
    pub derivative_filter: DerivativeFilter,
}

impl OptimizerConfig {
    /// Potential-only schedule with the given loss.
    pub fn potential_only(metric: Metric, mu: f64, alpha0: f64, iters: usize, epochs: usize) -> Self {
        OptimizerConfig {
            alpha0,
            beta0: 1.0,
            gamma0: 1.0,
            potential_iters: iters,
            probe_iters: 0,
            position_iters: 0,
            epochs,
            metric,
            mu,
            eps: DEFAULT_LOG_FLOOR,
            update_probe: false,
            update_positions: false,
            derivative_filter: DerivativeFilter::default(),
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            metric: self.metric,
            mu: self.mu,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha0", self.alpha0), ("beta0", self.beta0), ("gamma0", self.gamma0)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(RopError::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        self.loss().validate()?;
        let any = self.potential_iters > 0
            || (self.update_probe && self.probe_iters > 0)
            || (self.update_positions && self.position_iters > 0);
        if !any {
            return Err(RopError::InvalidArgument("no parameter block is scheduled for updates".into()));
        }
        Ok(())
    }

    fn schedule(&self) -> [(Block, usize); 3] {
        [
            (Block::Potential, self.potential_iters),
            (Block::Probe, if self.update_probe { self.probe_iters } else { 0 }),
            (Block::Positions, if self.update_positions { self.position_iters } else { 0 }),
        ]
    }
}

/// One accepted (or failed) iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub block: Block,
    pub iteration: usize,
    /// Batched loss after the step.
    pub loss: f64,
    /// Accepted step length, zero when the line search made no progress.
    pub step: f64,
    /// Norm of the block gradient the step was computed from.
    pub grad_norm: f64,
}

/// Parameters being reconstructed plus optimizer bookkeeping.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub potential: PotentialVolume,
    pub probe: ComplexField,
    pub positions: Vec<[f64; 2]>,
    steps: [f64; 3],
    epoch: usize,
    evaluations: usize,
    history: Vec<HistoryRecord>,
    /// Snapshots taken at the end of each epoch, when enabled.
    epoch_probes: Option<Vec<ComplexField>>,
    epoch_positions: Option<Vec<Vec<[f64; 2]>>>,
}

impl OptimizerState {
    pub fn new(potential: PotentialVolume, probe: ComplexField, positions: Vec<[f64; 2]>, cfg: &OptimizerConfig) -> Self {
        OptimizerState {
            potential,
            probe,
            positions,
            steps: [cfg.alpha0, cfg.beta0, cfg.gamma0],
            epoch: 0,
            evaluations: 0,
            history: Vec::new(),
            epoch_probes: None,
            epoch_positions: None,
        }
    }

    /// Keeps a copy of the probe and positions after every epoch.
    pub fn record_epoch_snapshots(&mut self) {
        self.epoch_probes = Some(Vec::new());
        self.epoch_positions = Some(Vec::new());
    }

    pub fn history(&self) -> &[HistoryRecord] {
        &self.history
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Forward-model batch evaluations so far (losses and gradients).
    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    /// Current step length per block.
    pub fn step(&self, block: Block) -> f64 {
        self.steps[block.index()]
    }

    pub fn epoch_probes(&self) -> &[ComplexField] {
        self.epoch_probes.as_deref().unwrap_or(&[])
    }

    pub fn epoch_positions(&self) -> &[Vec<[f64; 2]>] {
        self.epoch_positions.as_deref().unwrap_or(&[])
    }
}

/// Forward model plus measured data in double precision.
#[derive(Debug, Clone)]
pub struct Problem {
    model: ForwardModel,
    data: Array3<f64>,
}

impl Problem {
    pub fn new(model: ForwardModel, data: Array3<f64>) -> Result<Self> {
        let (p, r, c) = data.dim();
        if p == 0 || r != model.n() || c != model.n() {
            return Err(RopError::shape(format!("P x {0} x {0}", model.n()), format!("{p}x{r}x{c}")));
        }
        Ok(Problem { model, data })
    }

    /// Problem for a dataset, reconstructing on its geometry with the given slice thickness.
    pub fn from_dataset(ds: &Dataset, dz_nm: f64) -> Result<Self> {
        Self::new(ForwardModel::for_geometry(ds.geometry(), dz_nm)?, ds.patterns_f64())
    }

    pub fn model(&self) -> &ForwardModel {
        &self.model
    }

    pub fn data(&self) -> ArrayView3<'_, f64> {
        self.data.view()
    }
}

fn inner(a: &[Complex64], b: &[Complex64]) -> f64 {
    crate::loss::stable_sum(a.iter().zip(b).map(|(x, y)| x.re * y.re + x.im * y.im))
}

/// Polak-Ribière direction with non-negative β; steepest descent when the
/// previous gradient vanishes.
pub fn pr_direction(g: &[Complex64], g_prev: &[Complex64], d_prev: &[Complex64]) -> Result<Vec<Complex64>> {
    if g.len() != g_prev.len() || g.len() != d_prev.len() {
        return Err(RopError::shape(g.len(), format!("{} / {}", g_prev.len(), d_prev.len())));
    }
    let denom = inner(g_prev, g_prev);
    if denom == 0.0 || !denom.is_finite() {
        return Ok(g.to_vec());
    }
    let numer = crate::loss::stable_sum(
        g.iter()
            .zip(g_prev)
            .map(|(a, b)| a.re * (a.re - b.re) + a.im * (a.im - b.im)),
    );
    let beta = (numer / denom).max(0.0);
    Ok(g.iter().zip(d_prev).map(|(a, d)| a + d * beta).collect())
}

/// Outcome of a line search along `x - t d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearch {
    pub step: f64,
    pub value: f64,
    pub evaluations: usize,
    /// False when no tried step lowered the objective; `step` is then zero.
    pub progress: bool,
}

const MAX_BACKTRACKS: usize = 5;

/// Cubic-interpolation line search.
///
/// `phi(t)` is the objective along the search ray, `f0 = phi(0)` and `slope`
/// its derivative at zero. The cubic through `phi(0)`, `phi'(0)`, `phi(t0)`
/// and `phi(2 t0)` is minimized, the result clamped to `[t0/10, 10 t0]`,
/// and the lowest evaluated point is returned if it improves on `f0`.
/// Otherwise `t0` shrinks tenfold, at most five times.
pub fn cubic_line_search(mut phi: impl FnMut(f64) -> f64, f0: f64, slope: f64, t0: f64) -> Result<LineSearch> {
    if !(t0 > 0.0 && t0.is_finite()) {
        return Err(RopError::InvalidArgument(format!("initial step must be positive, got {t0}")));
    }
    if !f0.is_finite() || !slope.is_finite() {
        return Err(RopError::NonFinite("line search start".into()));
    }
    let mut t = t0;
    let mut evaluations = 0;
    for _ in 0..=MAX_BACKTRACKS {
        let f1 = phi(t);
        evaluations += 1;
        if !f1.is_finite() {
            t /= 10.0;
            continue;
        }
        let f2 = phi(2.0 * t);
        evaluations += 1;
        let mut candidates = vec![(t, f1)];
        if f2.is_finite() {
            candidates.push((2.0 * t, f2));
        }
        if let Some(s) = cubic_minimizer(f0, slope, t, f1, f2.is_finite().then_some(f2)) {
            let s = s.clamp(t / 10.0, 10.0 * t);
            if s != t && s != 2.0 * t {
                let fs = phi(s);
                evaluations += 1;
                if fs.is_finite() {
                    candidates.push((s, fs));
                }
            }
        }
        let (step, value) = candidates
            .into_iter()
            .fold((0.0, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best });
        if value < f0 {
            return Ok(LineSearch {
                step,
                value,
                evaluations,
                progress: true,
            });
        }
        t /= 10.0;
    }
    Ok(LineSearch {
        step: 0.0,
        value: f0,
        evaluations,
        progress: false,
    })
}

/// Minimizer of `f0 + g0 s + a s² + b s³` fitted through `(t, f1)` and, when
/// available, `(2t, f2)`; a quadratic fit otherwise. `None` without a local
/// minimum on the positive axis.
fn cubic_minimizer(f0: f64, g0: f64, t: f64, f1: f64, f2: Option<f64>) -> Option<f64> {
    let r1 = (f1 - f0 - g0 * t) / (t * t);
    let (a, b) = match f2 {
        Some(f2) => {
            let r2 = (f2 - f0 - 2.0 * g0 * t) / (4.0 * t * t);
            (2.0 * r1 - r2, (r2 - r1) / t)
        }
        None => (r1, 0.0),
    };
    // f'(s) = g0 + 2 a s + 3 b s²
    let tiny = 1e-12 * (a.abs() + (b * t).abs()).max(f64::MIN_POSITIVE);
    let s = if b.abs() <= tiny {
        if a > 0.0 {
            -g0 / (2.0 * a)
        } else {
            return None;
        }
    } else {
        let disc = a * a - 3.0 * b * g0;
        if disc < 0.0 {
            return None;
        }
        let denom = a + disc.sqrt();
        if denom == 0.0 {
            return None;
        }
        // root with f'' > 0, written to avoid cancellation
        -g0 / denom
    };
    (s.is_finite() && s > 0.0).then_some(s)
}

/// Per-iteration report from [`nonlinear_cg`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgIteration {
    pub iteration: usize,
    pub loss: f64,
    pub step: f64,
    pub grad_norm: f64,
}

/// Runs up to `iters` PR+ conjugate-gradient steps on a real-inner-product
/// space of complex vectors, restarting from steepest descent.
///
/// `value_and_grad` returns the objective and its gradient; `value` returns
/// only the objective (non-finite or failing evaluations count as +∞).
/// `step` carries the initial step in and the last accepted step out.
pub fn nonlinear_cg(
    x: &mut [Complex64],
    iters: usize,
    step: &mut f64,
    mut value_and_grad: impl FnMut(&[Complex64]) -> Result<(f64, Vec<Complex64>)>,
    mut value: impl FnMut(&[Complex64]) -> f64,
    mut on_iteration: impl FnMut(CgIteration),
) -> Result<()> {
    if iters == 0 {
        return Ok(());
    }
    let (mut f, mut g) = value_and_grad(x)?;
    if !f.is_finite() {
        return Err(RopError::NonFinite("objective at the starting point".into()));
    }
    let mut prev: Option<(Vec<Complex64>, Vec<Complex64>)> = None;
    let mut trial = vec![Complex64::default(); x.len()];
    for it in 0..iters {
        let grad_norm = inner(&g, &g).sqrt();
        if grad_norm == 0.0 {
            on_iteration(CgIteration { iteration: it, loss: f, step: 0.0, grad_norm });
            break;
        }
        let mut d = match &prev {
            Some((gp, dp)) => pr_direction(&g, gp, dp)?,
            None => g.clone(),
        };
        let mut restarted = prev.is_none();
        let ls = loop {
            let mut slope = -inner(&g, &d);
            if !(slope < 0.0) {
                d = g.clone();
                restarted = true;
                slope = -grad_norm * grad_norm;
            }
            let ls = cubic_line_search(
                |t| {
                    for ((y, &xi), &di) in trial.iter_mut().zip(x.iter()).zip(d.iter()) {
                        *y = xi - di * t;
                    }
                    value(&trial)
                },
                f,
                slope,
                *step,
            )?;
            if ls.progress || restarted {
                break ls;
            }
            // retry once along the gradient before giving up
            d = g.clone();
            restarted = true;
        };
        if !ls.progress {
            on_iteration(CgIteration { iteration: it, loss: f, step: 0.0, grad_norm });
            break;
        }
        for (xi, &di) in x.iter_mut().zip(d.iter()) {
            *xi -= di * ls.step;
        }
        *step = ls.step;
        on_iteration(CgIteration {
            iteration: it,
            loss: ls.value,
            step: ls.step,
            grad_norm,
        });
        if it + 1 == iters {
            break;
        }
        let (f_new, g_new) = value_and_grad(x)?;
        if !f_new.is_finite() {
            return Err(RopError::NonFinite("objective after an accepted step".into()));
        }
        prev = Some((std::mem::replace(&mut g, g_new), d));
        f = f_new;
    }
    Ok(())
}

fn potential_from(v: &PotentialVolume, x: &[Complex64]) -> PotentialVolume {
    let slices = Array3::from_shape_vec(v.slices().dim(), x.to_vec()).expect("block length matches");
    let mut out = v.clone();
    *out.slices_mut() = slices;
    out
}

fn probe_from(p: &ComplexField, x: &[Complex64]) -> ComplexField {
    let values = Array2::from_shape_vec(p.values().dim(), x.to_vec()).expect("block length matches");
    ComplexField::from_parts(values, p.pitch())
}

fn positions_from(x: &[Complex64]) -> Vec<[f64; 2]> {
    x.iter().map(|c| [c.re, c.im]).collect()
}

fn block_vector(state: &OptimizerState, block: Block) -> Vec<Complex64> {
    match block {
        Block::Potential => state.potential.slices().iter().copied().collect(),
        Block::Probe => state.probe.values().iter().copied().collect(),
        Block::Positions => state.positions.iter().map(|r| Complex64::new(r[0], r[1])).collect(),
    }
}

fn block_gradient(g: GradientBundle, block: Block) -> Vec<Complex64> {
    match block {
        Block::Potential => g.dv.into_raw_vec_and_offset().0,
        Block::Probe => g.dprobe.into_raw_vec_and_offset().0,
        Block::Positions => g.dr.iter().map(|r| Complex64::new(r[0], r[1])).collect(),
    }
}

fn run_block(state: &mut OptimizerState, block: Block, iters: usize, problem: &Problem, cfg: &OptimizerConfig) -> Result<()> {
    let loss_cfg = cfg.loss();
    let model = problem.model();
    let data = problem.data();
    let mut x = block_vector(state, block);
    let mut step = state.steps[block.index()];
    let base = state.clone_parameters();
    let mut evaluations = 0usize;
    let mut records = Vec::new();
    let epoch = state.epoch;

    let assemble = |x: &[Complex64]| -> (PotentialVolume, ComplexField, Vec<[f64; 2]>) {
        match block {
            Block::Potential => (potential_from(&base.0, x), base.1.clone(), base.2.clone()),
            Block::Probe => (base.0.clone(), probe_from(&base.1, x), base.2.clone()),
            Block::Positions => (base.0.clone(), base.1.clone(), positions_from(x)),
        }
    };
    let evals = std::cell::Cell::new(0usize);
    let result = nonlinear_cg(
        &mut x,
        iters,
        &mut step,
        |x| {
            evals.set(evals.get() + 1);
            let (v, p, r) = assemble(x);
            let (loss, g) = batched_gradients(model, &v, &p, &r, data, &loss_cfg, cfg.derivative_filter)?;
            Ok((loss, block_gradient(g, block)))
        },
        |x| {
            evals.set(evals.get() + 1);
            let (v, p, r) = assemble(x);
            if p.values().iter().any(|c| !c.is_finite()) {
                return f64::INFINITY;
            }
            loss_batched(model, &v, &p, &r, data, &loss_cfg).unwrap_or(f64::INFINITY)
        },
        |it| {
            records.push(HistoryRecord {
                epoch,
                block,
                iteration: it.iteration,
                loss: it.loss,
                step: it.step,
                grad_norm: it.grad_norm,
            })
        },
    );
    evaluations += evals.get();
    state.evaluations += evaluations;
    state.history.extend(records);
    match result {
        Ok(()) => {}
        Err(RopError::NonFinite(reason)) => return Err(RopError::Diverged { epoch, reason }),
        Err(e) => return Err(e),
    }
    let (v, p, r) = assemble(&x);
    state.potential = v;
    state.probe = p;
    state.positions = r;
    state.steps[block.index()] = step;
    Ok(())
}

impl OptimizerState {
    fn clone_parameters(&self) -> (PotentialVolume, ComplexField, Vec<[f64; 2]>) {
        (self.potential.clone(), self.probe.clone(), self.positions.clone())
    }
}

/// Runs `cfg.epochs` epochs: potential iterations, then probe, then positions.
///
/// On divergence the state keeps the last accepted parameters and the
/// history up to the failure.
pub fn run_epochs(state: &mut OptimizerState, cfg: &OptimizerConfig, problem: &Problem) -> Result<()> {
    cfg.validate()?;
    if state.positions.len() != problem.data().dim().0 {
        return Err(RopError::shape(problem.data().dim().0, state.positions.len()));
    }
    problem.model().check(&state.probe, &state.potential)?;
    for _ in 0..cfg.epochs {
        for (block, iters) in cfg.schedule() {
            if iters > 0 {
                run_block(state, block, iters, problem, cfg)?;
            }
        }
        state.epoch += 1;
        if let Some(p) = state.epoch_probes.as_mut() {
            p.push(state.probe.clone());
        }
        if let Some(r) = state.epoch_positions.as_mut() {
            r.push(state.positions.clone());
        }
    }
    Ok(())
}

/// Root mean squared difference.
pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(RopError::shape(a.len(), b.len()));
    }
    let sum = crate::loss::stable_sum(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)));
    Ok((sum / a.len() as f64).sqrt())
}

/// RMSE after removing the mean difference, insensitive to a constant offset
/// such as the arbitrary zero of a reconstructed phase.
pub fn aligned_rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(RopError::shape(a.len(), b.len()));
    }
    let offset = crate::loss::stable_sum(a.iter().zip(b).map(|(x, y)| x - y)) / a.len() as f64;
    let shifted: Vec<f64> = a.iter().map(|x| x - offset).collect();
    rmse(&shifted, b)
}

/// Pearson correlation coefficient.
pub fn correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(RopError::shape(a.len(), b.len()));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// RMSE between the intensity profiles of two probes.
pub fn probe_rmse(a: &ComplexField, b: &ComplexField) -> Result<f64> {
    rmse(&a.intensity().into_raw_vec_and_offset().0, &b.intensity().into_raw_vec_and_offset().0)
}

/// RMSE of the real part of two potential grids after offset alignment.
pub fn potential_rmse(a: ArrayView2<'_, Complex64>, b: ArrayView2<'_, Complex64>) -> Result<f64> {
    let ra: Vec<f64> = a.iter().map(|c| c.re).collect();
    let rb: Vec<f64> = b.iter().map(|c| c.re).collect();
    aligned_rmse(&ra, &rb)
}

/// Root mean squared Euclidean position error in units of `dx`.
pub fn position_rmse(a: &[[f64; 2]], b: &[[f64; 2]], dx: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(RopError::shape(a.len(), b.len()));
    }
    let sum: f64 = a.iter().zip(b).map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sum();
    Ok((sum / a.len() as f64).sqrt() / dx)
}

/// Mean Euclidean position error in units of `dx`.
pub fn mean_position_error(a: &[[f64; 2]], b: &[[f64; 2]], dx: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(RopError::shape(a.len(), b.len()));
    }
    let sum: f64 = a.iter().zip(b).map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()).sum();
    Ok(sum / a.len() as f64 / dx)
}

/// Choice of regularization weight from an RMSE curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuSelection {
    pub mu_grid: Vec<f64>,
    pub rmse: Vec<f64>,
    /// Index of the selected grid point.
    pub index: usize,
    pub mu: f64,
    /// Minimizer of the local cubic fit in `log10(mu)`, when interior.
    pub fitted_log10_mu: Option<f64>,
    /// Set when the smallest RMSE sits on the grid boundary.
    pub boundary: bool,
}

/// Fits a cubic in `log10(mu)` to the samples around the smallest RMSE and
/// returns the grid point closest to the fit's minimum.
pub fn select_mu(mu_grid: &[f64], rmse: &[f64]) -> Result<MuSelection> {
    if mu_grid.len() != rmse.len() {
        return Err(RopError::shape(mu_grid.len(), rmse.len()));
    }
    if mu_grid.len() < 4 {
        return Err(RopError::InvalidArgument("a mu sweep needs at least four samples".into()));
    }
    if mu_grid.iter().any(|&m| !(m > 0.0 && m.is_finite())) || rmse.iter().any(|r| !r.is_finite()) {
        return Err(RopError::InvalidArgument("mu samples must be positive and RMSE finite".into()));
    }
    if mu_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(RopError::InvalidArgument("mu grid must be strictly increasing".into()));
    }
    let k = rmse
        .iter()
        .enumerate()
        .fold(0, |best, (i, &r)| if r < rmse[best] { i } else { best });
    let last = mu_grid.len() - 1;
    let mut sel = MuSelection {
        mu_grid: mu_grid.to_vec(),
        rmse: rmse.to_vec(),
        index: k,
        mu: mu_grid[k],
        fitted_log10_mu: None,
        boundary: k == 0 || k == last,
    };
    if sel.boundary {
        return Ok(sel);
    }
    let lo = k.saturating_sub(2);
    let hi = (k + 2).min(last);
    let (lo, hi) = if hi - lo + 1 < 4 {
        if lo == 0 { (0, 3.min(last)) } else { (hi.saturating_sub(3), hi) }
    } else {
        (lo, hi)
    };
    let xs: Vec<f64> = mu_grid[lo..=hi].iter().map(|m| m.log10()).collect();
    let coeffs = polyfit(&xs, &rmse[lo..=hi], 3)?;
    // dense scan of the fitted window for its lowest point
    let (x0, x1) = (xs[0], xs[xs.len() - 1]);
    let samples = 2000;
    let best_x = (0..=samples)
        .map(|i| x0 + (x1 - x0) * i as f64 / samples as f64)
        .fold((x0, f64::INFINITY), |best, x| {
            let y = polyval(&coeffs, x);
            if y < best.1 {
                (x, y)
            } else {
                best
            }
        })
        .0;
    let nearest = (0..mu_grid.len())
        .min_by(|&a, &b| {
            let da = (mu_grid[a].log10() - best_x).abs();
            let db = (mu_grid[b].log10() - best_x).abs();
            da.total_cmp(&db)
        })
        .expect("non-empty grid");
    sel.index = nearest;
    sel.mu = mu_grid[nearest];
    sel.fitted_log10_mu = Some(best_x);
    Ok(sel)
}

/// Least-squares polynomial coefficients, constant term first.
fn polyfit(x: &[f64], y: &[f64], degree: usize) -> Result<Vec<f64>> {
    let cols = degree + 1;
    // centred abscissa keeps the normal equations well conditioned
    let centre = x.iter().sum::<f64>() / x.len() as f64;
    let mut ata = nalgebra::DMatrix::<f64>::zeros(cols, cols);
    let mut aty = nalgebra::DVector::<f64>::zeros(cols);
    for (&xi, &yi) in x.iter().zip(y) {
        let u = xi - centre;
        let powers = nalgebra::DVector::from_fn(cols, |p, _| u.powi(p as i32));
        aty += &powers * yi;
        ata += &powers * powers.transpose();
    }
    let coeffs = ata.lu().solve(&aty).ok_or_else(|| RopError::Domain("degenerate polynomial fit".into()))?;
    // re-expand around zero
    let mut out = vec![0.0; cols];
    for (p, &c) in coeffs.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate().take(p + 1) {
            *o += c * binomial(p, j) * (-centre).powi((p - j) as i32);
        }
    }
    Ok(out)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn polyval(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
}

/// Result of a regularization sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuSweep {
    pub selection: MuSelection,
}

/// Reconstructs once per `mu`, scores the real part of each result against
/// `truth` and selects the best weight with [`select_mu`].
pub fn mu_sweep(
    mu_grid: &[f64],
    truth: ArrayView2<'_, Complex64>,
    mut reconstruct: impl FnMut(f64) -> Result<Array2<Complex64>>,
) -> Result<MuSweep> {
    let mut errors = Vec::with_capacity(mu_grid.len());
    for &mu in mu_grid {
        let v = reconstruct(mu)?;
        if v.dim() != truth.dim() {
            return Err(RopError::shape(format!("{:?}", truth.dim()), format!("{:?}", v.dim())));
        }
        errors.push(potential_rmse(v.view(), truth)?);
    }
    Ok(MuSweep {
        selection: select_mu(mu_grid, &errors)?,
    })
}
