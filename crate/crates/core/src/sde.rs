//! Euler–Maruyama simulation of the decoupled SDE
//! `dX = b_t(X, mu_t) dt + sigma_t(X) dW` against a frozen measure flow.
//!
//! The drift only sees the flow through the interaction means `mu_t(h)`, so a
//! simulation is driven by that sequence (the "drive"). Brownian increments are
//! not stored: each path's increments are regenerated on demand from its
//! counter-based stream, which reproduces them bitwise.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::measures::{AtomSampler, MomentOrder, Observable, ParticleMeasure};
use crate::mckean::MeasureFlow;
use crate::model::{DriftModel, Scratch};
use crate::rng::{initial_uniform, BrownianStream};
use crate::scalar::pow_norm;
use crate::stats::{mean_stderr, Moments, CHUNK};
use crate::{Error, Result, Scalar};

/// Chunks simulated before their output is appended to the ensemble.
const WAVE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

#[derive(Serialize, Deserialize)]
struct GridRepr {
    horizon: f64,
    n_steps: usize,
}

impl TryFrom<GridRepr> for TimeGrid {
    type Error = Error;
    fn try_from(r: GridRepr) -> Result<Self> {
        TimeGrid::new(r.horizon, r.n_steps)
    }
}

impl From<TimeGrid> for GridRepr {
    fn from(g: TimeGrid) -> Self {
        GridRepr {
            horizon: g.horizon,
            n_steps: g.n_steps,
        }
    }
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Grid(format!("horizon {horizon} must be positive")));
        }
        if n_steps == 0 {
            return Err(Error::Grid("at least one step is required".into()));
        }
        Ok(Self { horizon, n_steps })
    }

    /// Grid with step `dt` up to `horizon`, which must be a multiple of `dt`.
    pub fn with_step(horizon: f64, dt: f64) -> Result<Self> {
        let n = (horizon / dt).round();
        if !(n >= 1.0) || ((n * dt - horizon).abs() > 1e-9 * horizon) {
            return Err(Error::Grid(format!("horizon {horizon} is not a multiple of dt = {dt}")));
        }
        Self::new(horizon, n as usize)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// `t_j = T j / n`; `t_n` is exactly `T`.
    pub fn time(&self, j: usize) -> f64 {
        self.horizon * (j as f64 / self.n_steps as f64)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|j| self.time(j)).collect()
    }

    pub fn index_of(&self, t: f64) -> Result<usize> {
        let j = (t / self.horizon * self.n_steps as f64).round();
        if j >= 0.0 && j <= self.n_steps as f64 && (self.time(j as usize) - t).abs() <= 1e-9 * self.horizon {
            Ok(j as usize)
        } else {
            Err(Error::NotGridPoint(t))
        }
    }
}

#[derive(Debug, Clone)]
pub enum InitialCondition<S: Scalar> {
    Point(Vec<S>),
    /// Initial states drawn i.i.d. from the law by inverse CDF.
    Law(ParticleMeasure<S>),
}

impl<S: Scalar> From<ParticleMeasure<S>> for InitialCondition<S> {
    fn from(mu: ParticleMeasure<S>) -> Self {
        InitialCondition::Law(mu)
    }
}

impl<S: Scalar> InitialCondition<S> {
    pub fn dim(&self) -> usize {
        match self {
            InitialCondition::Point(x) => x.len(),
            InitialCondition::Law(mu) => mu.dim(),
        }
    }

    pub(crate) fn prepare(&self) -> PreparedInitial<'_, S> {
        PreparedInitial {
            cond: self,
            sampler: match self {
                InitialCondition::Law(mu) if mu.len() > 1 => Some(mu.sampler()),
                _ => None,
            },
        }
    }
}

pub(crate) struct PreparedInitial<'a, S: Scalar> {
    cond: &'a InitialCondition<S>,
    sampler: Option<AtomSampler>,
}

impl<S: Scalar> PreparedInitial<'_, S> {
    /// Path `p` always uses the same uniform, so laws sharing a seed are
    /// coupled through their quantile functions.
    pub(crate) fn draw(&self, seed: u64, path: usize) -> &[S] {
        match (self.cond, &self.sampler) {
            (InitialCondition::Point(x), _) => x,
            (InitialCondition::Law(mu), None) => mu.atom(0),
            (InitialCondition::Law(mu), Some(s)) => mu.atom(s.index(initial_uniform(seed, path))),
        }
    }
}

/// Which grid indices keep per-path states.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recording {
    All,
    /// Initial and final states only.
    Terminal,
    Stride(usize),
    Indices(Vec<usize>),
}

impl Recording {
    pub fn resolve(&self, n_steps: usize) -> Result<Vec<usize>> {
        let mut idx = match self {
            Recording::All => (0..=n_steps).collect(),
            Recording::Terminal => vec![0, n_steps],
            Recording::Stride(s) => {
                if *s == 0 {
                    return Err(Error::InvalidArgument("recording stride must be positive".into()));
                }
                let mut v: Vec<usize> = (0..=n_steps).step_by(*s).collect();
                v.push(n_steps);
                v
            }
            Recording::Indices(v) => v.clone(),
        };
        idx.sort_unstable();
        idx.dedup();
        if let Some(&j) = idx.iter().find(|&&j| j > n_steps) {
            return Err(Error::NotRecorded(j));
        }
        Ok(idx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlowUp {
    pub path: usize,
    pub step: usize,
}

/// Per-step statistics over the valid paths of an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSummaries {
    summary_dim: usize,
    h: Vec<Moments>,
    moment: Vec<Moments>,
}

impl StepSummaries {
    fn new(n_points: usize, summary_dim: usize) -> Self {
        Self {
            summary_dim,
            h: vec![Moments::default(); n_points * summary_dim],
            moment: vec![Moments::default(); n_points],
        }
    }

    fn merge(&mut self, other: &StepSummaries) {
        self.h.iter_mut().zip(&other.h).for_each(|(a, b)| a.merge(b));
        self.moment.iter_mut().zip(&other.moment).for_each(|(a, b)| a.merge(b));
    }

    /// Statistics of each component of `h(X_{t_j})`.
    pub fn h(&self, j: usize) -> &[Moments] {
        &self.h[j * self.summary_dim..(j + 1) * self.summary_dim]
    }

    pub fn h_mean(&self, j: usize) -> Vec<f64> {
        self.h(j).iter().map(Moments::mean).collect()
    }

    /// Statistics of `|X_{t_j}|^k`.
    pub fn moment(&self, j: usize) -> &Moments {
        &self.moment[j]
    }
}

/// Monte-Carlo paths of the decoupled SDE.
#[derive(Debug, Clone)]
pub struct PathEnsemble<S> {
    pub(crate) grid: TimeGrid,
    pub(crate) seed: u64,
    pub(crate) n_paths: usize,
    pub(crate) dim: usize,
    pub(crate) noise_dim: usize,
    pub(crate) moment_order: MomentOrder,
    pub(crate) drive: Arc<[S]>,
    pub(crate) initial: Vec<S>,
    pub(crate) recorded: Vec<usize>,
    /// Time-major: `states[r]` holds all paths at grid index `recorded[r]`.
    pub(crate) states: Vec<Vec<S>>,
    pub(crate) valid: Vec<bool>,
    pub(crate) blowups: Vec<BlowUp>,
    pub(crate) summaries: StepSummaries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMeta {
    pub seed: u64,
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub n_valid: usize,
    pub dim: usize,
    pub noise_dim: usize,
    pub recorded: Vec<usize>,
    pub blowups: Vec<BlowUp>,
}

impl<S: Scalar> PathEnsemble<S> {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn moment_order(&self) -> MomentOrder {
        self.moment_order
    }

    pub fn is_valid(&self, path: usize) -> bool {
        self.valid[path]
    }

    pub fn blowups(&self) -> &[BlowUp] {
        &self.blowups
    }

    pub fn recorded_indices(&self) -> &[usize] {
        &self.recorded
    }

    pub fn summaries(&self) -> &StepSummaries {
        &self.summaries
    }

    /// The interaction means `mu_{t_j}(h)` the paths were driven by.
    pub fn drive(&self) -> &Arc<[S]> {
        &self.drive
    }

    pub fn initial_state(&self, path: usize) -> &[S] {
        &self.initial[path * self.dim..(path + 1) * self.dim]
    }

    fn slot(&self, j: usize) -> Result<usize> {
        self.recorded.binary_search(&j).map_err(|_| Error::NotRecorded(j))
    }

    /// All paths at grid index `j`, row-major `n_paths x d`.
    pub fn states_at(&self, j: usize) -> Result<&[S]> {
        Ok(&self.states[self.slot(j)?])
    }

    pub fn state(&self, path: usize, j: usize) -> Result<&[S]> {
        let s = self.states_at(j)?;
        Ok(&s[path * self.dim..(path + 1) * self.dim])
    }

    /// `n_steps x m` Brownian increments of one path, regenerated from its stream.
    pub fn increments(&self, path: usize) -> Vec<S> {
        let mut out = vec![S::zero(); self.grid.n_steps * self.noise_dim];
        let mut stream = BrownianStream::new(self.seed, path, self.grid.dt());
        for row in out.chunks_exact_mut(self.noise_dim) {
            stream.fill(row);
        }
        out
    }

    /// Re-integrates every path from its stored initial state and increments.
    pub fn replay(&self, model: &DriftModel<S>) -> Result<PathEnsemble<S>> {
        let init = |p: usize| self.initial_state(p).to_vec();
        simulate_core(
            model,
            self.drive.clone(),
            &init,
            &self.grid,
            self.n_paths,
            self.seed,
            &Recording::Indices(self.recorded.clone()),
        )
    }

    pub fn meta(&self) -> EnsembleMeta {
        EnsembleMeta {
            seed: self.seed,
            grid: self.grid,
            n_paths: self.n_paths,
            n_valid: self.n_valid(),
            dim: self.dim,
            noise_dim: self.noise_dim,
            recorded: self.recorded.clone(),
            blowups: self.blowups.clone(),
        }
    }

    /// Rows `path, step, x0, ..., x{d-1}` for the valid paths at recorded steps.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["path".to_string(), "step".to_string()];
        header.extend((0..self.dim).map(|i| format!("x{i}")));
        w.write_record(&header)?;
        for (r, &j) in self.recorded.iter().enumerate() {
            for p in (0..self.n_paths).filter(|&p| self.valid[p]) {
                let mut row = vec![p.to_string(), j.to_string()];
                row.extend(self.states[r][p * self.dim..(p + 1) * self.dim].iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_sidecar<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, &self.meta())?;
        Ok(())
    }
}

/// One Euler step with the diffusion matrix taken from the model.
pub(crate) struct Stepper<'a, S> {
    pub(crate) model: &'a DriftModel<S>,
    pub(crate) drive: &'a [S],
    pub(crate) grid: TimeGrid,
    pub(crate) dt: S,
}

pub(crate) struct StepScratch<S> {
    pub(crate) model: Scratch<S>,
    drift: Vec<S>,
}

impl<'a, S: Scalar> Stepper<'a, S> {
    pub(crate) fn new(model: &'a DriftModel<S>, drive: &'a [S], grid: TimeGrid) -> Result<Self> {
        if drive.len() != (grid.n_steps + 1) * model.summary_dim() {
            return Err(Error::GridMismatch);
        }
        Ok(Self {
            model,
            drive,
            grid,
            dt: S::lit(grid.dt()),
        })
    }

    pub(crate) fn scratch(&self) -> StepScratch<S> {
        StepScratch::new(self.model)
    }

    pub(crate) fn summary(&self, j: usize) -> &'a [S] {
        let n = self.model.summary_dim();
        &self.drive[j * n..(j + 1) * n]
    }

    pub(crate) fn time(&self, j: usize) -> S {
        S::lit(self.grid.time(j))
    }

    /// Advances `x` from `t_j` to `t_{j+1}`; false if the new state is not finite.
    pub(crate) fn advance(&self, j: usize, x: &mut [S], dw: &[S], scr: &mut StepScratch<S>) -> bool {
        euler_advance(self.model, self.time(j), self.summary(j), self.dt, x, dw, scr)
    }
}

impl<S: Scalar> StepScratch<S> {
    pub(crate) fn new(model: &DriftModel<S>) -> Self {
        StepScratch {
            model: model.scratch(),
            drift: vec![S::zero(); model.dim()],
        }
    }
}

/// Euler step at interaction summary `m`; false if the new state is not finite.
pub(crate) fn euler_advance<S: Scalar>(
    model: &DriftModel<S>,
    t: S,
    m: &[S],
    dt: S,
    x: &mut [S],
    dw: &[S],
    scr: &mut StepScratch<S>,
) -> bool {
    model.drift_at_summary(t, x, m, &mut scr.model, &mut scr.drift);
    euler_update(x, &scr.drift, &scr.model.sigma, dw, dt)
}

fn euler_update<S: Scalar>(x: &mut [S], drift: &[S], sigma: &[S], dw: &[S], dt: S) -> bool {
    let m = dw.len();
    let mut finite = true;
    for (i, xi) in x.iter_mut().enumerate() {
        let row = &sigma[i * m..(i + 1) * m];
        let noise = row.iter().zip(dw).fold(S::zero(), |a, (&s, &w)| a + s * w);
        *xi = *xi + drift[i] * dt + noise;
        finite &= xi.is_finite();
    }
    finite
}

/// Runs coupled copies of one path that share its Brownian increments.
///
/// `visit(j, states, dw)` sees the states at `t_j` and the increment that
/// carries them to `t_{j+1}` (`None` at the last grid point). Returns the step
/// at which a copy first became non-finite.
pub(crate) fn run_path<S: Scalar, F>(
    stepper: &Stepper<'_, S>,
    seed: u64,
    path: usize,
    xs: &mut [Vec<S>],
    scr: &mut StepScratch<S>,
    dw: &mut [S],
    mut visit: F,
) -> Option<usize>
where
    F: FnMut(usize, &[Vec<S>], Option<&[S]>),
{
    let mut stream = BrownianStream::new(seed, path, stepper.grid.dt());
    for j in 0..stepper.grid.n_steps {
        stream.fill(dw);
        visit(j, xs, Some(dw));
        let mut ok = true;
        for x in xs.iter_mut() {
            ok &= stepper.advance(j, x, dw, scr);
        }
        if !ok {
            return Some(j + 1);
        }
    }
    visit(stepper.grid.n_steps, xs, None);
    None
}

/// `x + b_t(x, mu_t) dt + sigma_t(x) dw`.
pub fn euler_step<S: Scalar>(
    model: &DriftModel<S>,
    t: S,
    x: &[S],
    mu_t: &ParticleMeasure<S>,
    dw: &[S],
    dt: S,
) -> Result<Vec<S>> {
    if !(dt > S::zero()) {
        return Err(Error::InvalidArgument(format!("step {dt} must be positive")));
    }
    if dw.len() != model.noise_dim() {
        return Err(Error::Dimension(format!("increment has {} components, expected {}", dw.len(), model.noise_dim())));
    }
    let drift = model.drift(t, x, mu_t)?;
    let mut sigma = vec![S::zero(); model.dim() * model.noise_dim()];
    model.diffusion(t, x, &mut sigma);
    let mut out = x.to_vec();
    if euler_update(&mut out, &drift, &sigma, dw, dt) {
        Ok(out)
    } else {
        Err(Error::BlowUp(t.as_f64()))
    }
}

/// Simulates against `flow`, recording every grid point.
pub fn simulate_decoupled<S: Scalar>(
    model: &DriftModel<S>,
    flow: &MeasureFlow<S>,
    x0: &InitialCondition<S>,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble<S>> {
    simulate_decoupled_with(model, flow, x0, grid, n_paths, seed, &Recording::All)
}

pub fn simulate_decoupled_with<S: Scalar>(
    model: &DriftModel<S>,
    flow: &MeasureFlow<S>,
    x0: &InitialCondition<S>,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    recording: &Recording,
) -> Result<PathEnsemble<S>> {
    if flow.grid() != grid {
        return Err(Error::GridMismatch);
    }
    if flow.summary_dim() != model.summary_dim() {
        return Err(Error::Dimension("flow summaries do not match the model's observable".into()));
    }
    simulate_driven(model, flow.drive().clone(), x0, grid, n_paths, seed, recording)
}

pub(crate) fn simulate_driven<S: Scalar>(
    model: &DriftModel<S>,
    drive: Arc<[S]>,
    x0: &InitialCondition<S>,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    recording: &Recording,
) -> Result<PathEnsemble<S>> {
    if x0.dim() != model.dim() {
        return Err(Error::Dimension(format!("initial condition in R^{}, model in R^{}", x0.dim(), model.dim())));
    }
    let prepared = x0.prepare();
    let init = |p: usize| prepared.draw(seed, p).to_vec();
    simulate_core(model, drive, &init, grid, n_paths, seed, recording)
}

struct ChunkOut<S> {
    initial: Vec<S>,
    states: Vec<Vec<S>>,
    valid: Vec<bool>,
    blowups: Vec<BlowUp>,
    summaries: StepSummaries,
}

fn simulate_core<S: Scalar>(
    model: &DriftModel<S>,
    drive: Arc<[S]>,
    init: &(dyn Fn(usize) -> Vec<S> + Sync),
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    recording: &Recording,
) -> Result<PathEnsemble<S>> {
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be positive".into()));
    }
    let recorded = recording.resolve(grid.n_steps)?;
    let stepper = Stepper::new(model, &drive, *grid)?;
    let (d, ns, np) = (model.dim(), model.summary_dim(), grid.n_steps + 1);
    let k = S::lit(model.moment_order().value());
    let h = model.observable();

    let run_chunk = |c: usize| -> ChunkOut<S> {
        let range = c * CHUNK..((c + 1) * CHUNK).min(n_paths);
        let len = range.len();
        let mut out = ChunkOut {
            initial: Vec::with_capacity(len * d),
            states: recorded.iter().map(|_| Vec::with_capacity(len * d)).collect(),
            valid: Vec::with_capacity(len),
            blowups: Vec::new(),
            summaries: StepSummaries::new(np, ns),
        };
        let mut scr = stepper.scratch();
        let mut dw = vec![S::zero(); model.noise_dim()];
        let mut hbuf = vec![S::zero(); np * ns];
        let mut mbuf = vec![S::zero(); np];
        for p in range {
            let x0 = init(p);
            out.initial.extend_from_slice(&x0);
            let mut xs = [x0];
            let mut r = 0;
            let blown = run_path(&stepper, seed, p, &mut xs, &mut scr, &mut dw, |j, xs, _| {
                let x = &xs[0];
                h.eval(x, &mut hbuf[j * ns..(j + 1) * ns]);
                mbuf[j] = pow_norm(x, k);
                while r < recorded.len() && recorded[r] == j {
                    out.states[r].extend_from_slice(x);
                    r += 1;
                }
            });
            if let Some(step) = blown {
                for s in &mut out.states[r..] {
                    s.extend(std::iter::repeat_n(S::nan(), d));
                }
                out.valid.push(false);
                out.blowups.push(BlowUp { path: p, step });
                continue;
            }
            out.valid.push(true);
            for (m, &v) in out.summaries.h.iter_mut().zip(&hbuf) {
                m.push(v.as_f64());
            }
            for (m, &v) in out.summaries.moment.iter_mut().zip(&mbuf) {
                m.push(v.as_f64());
            }
        }
        out
    };

    let n_chunks = n_paths.div_ceil(CHUNK);
    let mut ens = PathEnsemble {
        grid: *grid,
        seed,
        n_paths,
        dim: d,
        noise_dim: model.noise_dim(),
        moment_order: model.moment_order(),
        drive: drive.clone(),
        initial: Vec::with_capacity(n_paths * d),
        states: recorded.iter().map(|_| Vec::with_capacity(n_paths * d)).collect(),
        recorded: recorded.clone(),
        valid: Vec::with_capacity(n_paths),
        blowups: Vec::new(),
        summaries: StepSummaries::new(np, ns),
    };
    for wave in (0..n_chunks).step_by(WAVE) {
        let outs: Vec<ChunkOut<S>> = (wave..(wave + WAVE).min(n_chunks)).into_par_iter().map(run_chunk).collect();
        for o in outs {
            ens.initial.extend_from_slice(&o.initial);
            for (dst, src) in ens.states.iter_mut().zip(&o.states) {
                dst.extend_from_slice(src);
            }
            ens.valid.extend_from_slice(&o.valid);
            ens.blowups.extend_from_slice(&o.blowups);
            ens.summaries.merge(&o.summaries);
        }
    }
    if let Some(first) = ens.blowups.first() {
        if ens.blowups.len() == n_paths {
            return Err(Error::AllPathsInvalid {
                path: first.path,
                step: first.step,
            });
        }
        log::warn!(
            "{} of {n_paths} paths blew up and are excluded; first at path {}, step {}",
            ens.blowups.len(),
            first.path,
            first.step
        );
    }
    Ok(ens)
}

/// Monte-Carlo mean of a scalar observable over the valid paths at grid index
/// `j`, with its standard error.
pub fn functional_mean<S: Scalar>(ensemble: &PathEnsemble<S>, f: &Observable<S>, j: usize) -> Result<(S, S)> {
    if f.in_dim() != ensemble.dim || f.out_dim() != 1 {
        return Err(Error::Dimension("f must map the state space to R".into()));
    }
    let states = ensemble.states_at(j)?;
    let xs: Vec<&[S]> = states
        .chunks_exact(ensemble.dim)
        .zip(&ensemble.valid)
        .filter_map(|(x, &v)| v.then_some(x))
        .collect();
    check_growth(f, &xs, ensemble.moment_order);
    let mut buf = [S::zero()];
    let values: Vec<S> = xs
        .iter()
        .map(|x| {
            f.eval(x, &mut buf);
            buf[0]
        })
        .collect();
    Ok(mean_stderr(&values))
}

/// Warns when `|f| / (1 + |x|^k)` on the outermost sampled states is far above
/// its level on the bulk, a sign that `f` grows faster than order `k`.
pub fn check_growth<S: Scalar>(f: &Observable<S>, xs: &[&[S]], k: MomentOrder) -> bool {
    if xs.len() < 100 {
        return true;
    }
    let mut buf = [S::zero()];
    let mut pts: Vec<(f64, f64)> = xs
        .iter()
        .map(|x| {
            f.eval(x, &mut buf);
            let r = buf[0].abs().as_f64() / k.weight(x).as_f64();
            (crate::scalar::norm(x).as_f64(), r)
        })
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pts.len();
    let bulk = pts[..n / 2].iter().map(|p| p.1).fold(0.0, f64::max);
    let tail = pts[n - n / 100..].iter().map(|p| p.1).fold(0.0, f64::max);
    let ok = !(tail > 10.0 * bulk + 1e-12);
    if !ok {
        log::warn!("f / (1 + |x|^{}) reaches {tail:.3e} on outer states against {bulk:.3e} in the bulk", k.value());
    }
    ok
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::library::mean_field_ou;

    #[test]
    fn grid_points_are_reproducible() {
        let g = TimeGrid::new(1.0, 1000).unwrap();
        assert_eq!(g.time(1000), 1.0);
        assert_eq!(g.index_of(0.5).unwrap(), 500);
        assert_eq!(g.index_of(g.time(337)).unwrap(), 337);
        assert!(matches!(g.index_of(0.0005), Err(Error::NotGridPoint(_))));
        assert!(TimeGrid::new(0.0, 10).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert_eq!(TimeGrid::with_step(0.16, 1e-3).unwrap().n_steps(), 160);
    }

    #[test]
    fn grid_serde_validates() {
        let g: TimeGrid = serde_json::from_str(r#"{"horizon":2.0,"n_steps":4}"#).unwrap();
        assert_eq!(g.dt(), 0.5);
        assert!(serde_json::from_str::<TimeGrid>(r#"{"horizon":-1.0,"n_steps":4}"#).is_err());
    }

    #[test]
    fn euler_step_examples() {
        let zero = DriftModel::<f64>::builder("zero", 1, 1, 1).build().unwrap();
        let mu = ParticleMeasure::dirac(&[0.0]);
        assert_eq!(euler_step(&zero, 0.0, &[1.5], &mu, &[0.0], 0.1).unwrap(), vec![1.5]);
        assert_eq!(euler_step(&zero, 0.0, &[1.5], &mu, &[0.25], 0.1).unwrap(), vec![1.75]);
        let unit = DriftModel::<f64>::builder("unit", 1, 1, 1)
            .free_drift(|_, _, o| o[0] = 1.0)
            .diffusion(|_, _, o| o[0] = 0.0)
            .build()
            .unwrap();
        assert_eq!(euler_step(&unit, 0.0, &[0.0], &mu, &[0.7], 0.1).unwrap(), vec![0.1]);
        assert!(euler_step(&unit, 0.0, &[0.0], &mu, &[0.7], 0.0).is_err());
        let blow = DriftModel::<f64>::builder("blow", 1, 1, 1)
            .free_drift(|_, _, o| o[0] = f64::INFINITY)
            .build()
            .unwrap();
        assert!(matches!(euler_step(&blow, 0.0, &[0.0], &mu, &[0.0], 0.1), Err(Error::BlowUp(_))));
    }

    #[test]
    fn recording_resolution() {
        assert_eq!(Recording::Stride(3).resolve(7).unwrap(), vec![0, 3, 6, 7]);
        assert_eq!(Recording::Terminal.resolve(5).unwrap(), vec![0, 5]);
        assert_eq!(Recording::Indices(vec![4, 1, 4]).resolve(5).unwrap(), vec![1, 4]);
        assert!(Recording::Indices(vec![6]).resolve(5).is_err());
        assert!(Recording::Stride(0).resolve(5).is_err());
    }

    #[test]
    fn increments_match_those_used() {
        let model = mean_field_ou::<f64>(0.5, 1).unwrap();
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let flow = MeasureFlow::constant(&grid, &ParticleMeasure::dirac(&[0.0]), &model);
        let ens = simulate_decoupled(&model, &flow, &InitialCondition::Point(vec![1.0]), &grid, 3, 9).unwrap();
        let dw = ens.increments(2);
        let mut x = 1.0;
        for j in 0..20 {
            x = x + (-x) * grid.dt() + dw[j];
            assert_eq!(x, ens.state(2, j + 1).unwrap()[0]);
        }
    }
}
