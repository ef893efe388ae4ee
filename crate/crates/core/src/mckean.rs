//! Self-consistent measure flows of the McKean–Vlasov equation.
//!
//! [`picard_flow`] iterates `gamma -> Law(X^gamma)` on empirical flows with
//! common random numbers; [`particle_flow`] runs the interacting particle
//! system instead and serves as an independent cross-check.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::measures::{MomentOrder, Observable, ParticleMeasure};
use crate::model::{DriftModel, H2Probe};
use crate::rng::BrownianStream;
use crate::scalar::{norm, pow_norm};
use crate::sde::{euler_advance, simulate_driven, InitialCondition, PathEnsemble, Recording, StepScratch, TimeGrid};
use crate::stats::{Moments, CHUNK};
use crate::{Error, Result, Scalar};

/// At most this many atom coordinates are kept per automatically strided flow.
const FLOW_BUDGET: usize = 1 << 24;
/// Measures this small are compared with the exact weighted distance even
/// when their supports differ.
const SMALL_MEASURE: usize = 64;

/// A curve of laws on a time grid.
///
/// Atoms are kept at a subset of grid indices; the interaction means
/// `gamma_t(h)` and the `k`-th moments are kept at every grid point.
#[derive(Debug, Clone)]
pub struct MeasureFlow<S: Scalar> {
    grid: TimeGrid,
    indices: Vec<usize>,
    measures: Vec<ParticleMeasure<S>>,
    drive: Arc<[S]>,
    summary_dim: usize,
    moments: Vec<f64>,
    moment_order: MomentOrder,
    /// Standard errors of the interaction means and the moment per grid
    /// point, `summary_dim + 1` entries each; zero for exact laws and for
    /// particle systems.
    stderr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowMeta {
    pub grid: TimeGrid,
    pub recorded: Vec<usize>,
    pub moment_order: MomentOrder,
    pub interaction_means: Vec<Vec<f64>>,
    pub moments: Vec<f64>,
}

impl<S: Scalar> MeasureFlow<S> {
    /// Flow from one measure per grid point.
    pub fn from_measures(grid: &TimeGrid, measures: Vec<ParticleMeasure<S>>, model: &DriftModel<S>) -> Result<Self> {
        if measures.len() != grid.n_steps() + 1 {
            return Err(Error::GridMismatch);
        }
        if measures.iter().any(|m| m.dim() != model.dim()) {
            return Err(Error::Dimension("flow measures must live in the model's state space".into()));
        }
        let h = model.observable();
        let k = model.moment_order();
        let drive: Vec<S> = measures.iter().flat_map(|m| m.observable_mean(h)).collect();
        let moments = measures.iter().map(|m| m.moment(k).as_f64()).collect();
        Ok(Self {
            grid: *grid,
            indices: (0..=grid.n_steps()).collect(),
            measures,
            drive: drive.into(),
            summary_dim: h.out_dim(),
            moments,
            moment_order: k,
            stderr: vec![0.0; measures_len(grid) * (h.out_dim() + 1)],
        })
    }

    /// `gamma_t = mu` for all `t`.
    pub fn constant(grid: &TimeGrid, mu: &ParticleMeasure<S>, model: &DriftModel<S>) -> Self {
        let n = grid.n_steps() + 1;
        let m = mu.observable_mean(model.observable());
        let k = model.moment_order();
        Self {
            grid: *grid,
            indices: (0..n).collect(),
            measures: vec![mu.clone(); n],
            drive: m.iter().copied().cycle().take(n * m.len()).collect::<Vec<_>>().into(),
            summary_dim: m.len(),
            moments: vec![mu.moment(k).as_f64(); n],
            moment_order: k,
            stderr: vec![0.0; n * (m.len() + 1)],
        }
    }

    /// Empirical flow of the valid paths of an ensemble. Recorded states are
    /// moved, not copied.
    pub fn from_ensemble(ens: PathEnsemble<S>) -> Result<Self> {
        let n_points = ens.grid.n_steps() + 1;
        let ns = ens.drive.len() / n_points;
        let mut drive = Vec::with_capacity(n_points * ns);
        let mut moments = Vec::with_capacity(n_points);
        let mut stderr = Vec::with_capacity(n_points * (ns + 1));
        for j in 0..n_points {
            drive.extend(ens.summaries.h_mean(j).into_iter().map(S::lit));
            stderr.extend(ens.summaries.h(j).iter().map(Moments::stderr));
            moments.push(ens.summaries.moment(j).mean());
            stderr.push(ens.summaries.moment(j).stderr());
        }
        let n_valid = ens.n_valid();
        let weights = ParticleMeasure::<S>::uniform_weights(n_valid);
        let d = ens.dim;
        let all_valid = n_valid == ens.n_paths;
        let valid = ens.valid;
        let measures = ens
            .states
            .into_iter()
            .map(|atoms| {
                let atoms = if all_valid {
                    atoms
                } else {
                    atoms
                        .chunks_exact(d)
                        .zip(&valid)
                        .filter(|(_, &v)| v)
                        .flat_map(|(x, _)| x.iter().copied())
                        .collect()
                };
                ParticleMeasure::empirical(d, atoms, weights.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid: ens.grid,
            indices: ens.recorded,
            measures,
            drive: drive.into(),
            summary_dim: ns,
            moments,
            moment_order: ens.moment_order,
            stderr,
        })
    }

    /// Empirical flow whose time-zero law is the exact initial law `mu0`.
    pub fn from_ensemble_with_initial(ens: PathEnsemble<S>, mu0: &ParticleMeasure<S>, model: &DriftModel<S>) -> Result<Self> {
        let mut flow = Self::from_ensemble(ens)?;
        let m0 = mu0.observable_mean(model.observable());
        let mut drive = flow.drive.to_vec();
        drive[..flow.summary_dim].copy_from_slice(&m0);
        flow.drive = drive.into();
        flow.moments[0] = mu0.moment(flow.moment_order).as_f64();
        flow.stderr[..=flow.summary_dim].iter_mut().for_each(|v| *v = 0.0);
        match flow.indices.first() {
            Some(0) => flow.measures[0] = mu0.clone(),
            _ => {
                flow.indices.insert(0, 0);
                flow.measures.insert(0, mu0.clone());
            }
        }
        Ok(flow)
    }

    /// Standard errors of `interaction_mean(j)`.
    pub fn interaction_mean_stderr(&self, j: usize) -> &[f64] {
        let w = self.summary_dim + 1;
        &self.stderr[j * w..j * w + self.summary_dim]
    }

    pub fn moment_stderr(&self, j: usize) -> f64 {
        self.stderr[j * (self.summary_dim + 1) + self.summary_dim]
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Grid indices that carry measures.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn measures(&self) -> &[ParticleMeasure<S>] {
        &self.measures
    }

    pub fn measure(&self, j: usize) -> Result<&ParticleMeasure<S>> {
        self.indices
            .binary_search(&j)
            .map(|r| &self.measures[r])
            .map_err(|_| Error::NotRecorded(j))
    }

    pub fn initial(&self) -> Result<&ParticleMeasure<S>> {
        self.measure(0)
    }

    pub fn summary_dim(&self) -> usize {
        self.summary_dim
    }

    /// Interaction means at every grid point, row-major.
    pub fn drive(&self) -> &Arc<[S]> {
        &self.drive
    }

    /// `gamma_{t_j}(h)`.
    pub fn interaction_mean(&self, j: usize) -> &[S] {
        &self.drive[j * self.summary_dim..(j + 1) * self.summary_dim]
    }

    pub fn moment_order(&self) -> MomentOrder {
        self.moment_order
    }

    /// `gamma_{t_j}(|.|^k)`.
    pub fn moment(&self, j: usize) -> f64 {
        self.moments[j]
    }

    /// `gamma_t(f)` at the recorded indices.
    pub fn observable_means(&self, f: &Observable<S>) -> Vec<(usize, Vec<S>)> {
        self.indices
            .iter()
            .zip(&self.measures)
            .map(|(&j, m)| (j, m.observable_mean(f)))
            .collect()
    }

    pub fn meta(&self) -> FlowMeta {
        FlowMeta {
            grid: self.grid,
            recorded: self.indices.clone(),
            moment_order: self.moment_order,
            interaction_means: self
                .drive
                .chunks_exact(self.summary_dim)
                .map(|c| c.iter().map(|v| v.as_f64()).collect())
                .collect(),
            moments: self.moments.clone(),
        }
    }

    /// Rows `time, atom, x0, ..., x{d-1}, weight`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let d = self.measures.first().map_or(0, ParticleMeasure::dim);
        let mut header = vec!["time".to_string(), "atom".to_string()];
        header.extend((0..d).map(|i| format!("x{i}")));
        header.push("weight".into());
        w.write_record(&header)?;
        for (&j, m) in self.indices.iter().zip(&self.measures) {
            let t = self.grid.time(j).to_string();
            for (i, (x, wt)) in m.iter().enumerate() {
                let mut row = vec![t.clone(), i.to_string()];
                row.extend(x.iter().map(|v| v.to_string()));
                row.push(wt.to_string());
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowDistance {
    pub value: f64,
    /// Undiscounted distance at each compared grid index.
    pub per_time: Vec<(usize, f64)>,
    /// Whether any time point used the surrogate instead of the exact distance.
    pub surrogate_used: bool,
}

/// `sup_t e^{-lambda t} ||gamma_t - gamma~_t||_{k,var}` over the grid indices
/// where both flows carry measures.
///
/// The exact distance is used when the two atom clouds coincide, or when both
/// measures are small. Otherwise it degenerates to roughly the total mass and
/// is replaced by `|gamma_t(|.|^k) - gamma~_t(|.|^k)|` plus a coupling bound on
/// the bounded-Lipschitz distance.
pub fn flow_distance<S: Scalar>(f1: &MeasureFlow<S>, f2: &MeasureFlow<S>, lambda: f64, k: MomentOrder) -> Result<FlowDistance> {
    if f1.grid != f2.grid {
        return Err(Error::GridMismatch);
    }
    let common: Vec<usize> = f1.indices.iter().copied().filter(|j| f2.indices.binary_search(j).is_ok()).collect();
    if common.is_empty() {
        return Err(Error::NotRecorded(0));
    }
    let mut out = FlowDistance {
        value: 0.0,
        per_time: Vec::with_capacity(common.len()),
        surrogate_used: false,
    };
    for j in common {
        let (d, surrogate) = measure_distance(f1.measure(j)?, f2.measure(j)?, k)?;
        out.surrogate_used |= surrogate;
        out.value = out.value.max((-lambda * f1.grid.time(j)).exp() * d);
        out.per_time.push((j, d));
    }
    Ok(out)
}

fn measure_distance<S: Scalar>(a: &ParticleMeasure<S>, b: &ParticleMeasure<S>, k: MomentOrder) -> Result<(f64, bool)> {
    if a == b {
        return Ok((0.0, false));
    }
    if a.atoms_flat() == b.atoms_flat() || (a.len() <= SMALL_MEASURE && b.len() <= SMALL_MEASURE) {
        return Ok((a.weighted_tv(b, k)?.as_f64(), false));
    }
    if a.dim() != b.dim() {
        return Err(Error::Dimension("measures of different dimension".into()));
    }
    let gap = (a.moment(k).as_f64() - b.moment(k).as_f64()).abs();
    Ok((gap + coupling_cost(a, b), true))
}

/// Transport cost of `min(|x - y|, 2)` under an explicit coupling, an upper
/// bound on the bounded-Lipschitz distance. Same-size uniform clouds are
/// paired by index; otherwise mass is matched along cumulative weights, after
/// sorting in one dimension.
fn coupling_cost<S: Scalar>(a: &ParticleMeasure<S>, b: &ParticleMeasure<S>) -> f64 {
    let cost = |x: &[S], y: &[S]| {
        let diff: Vec<S> = x.iter().zip(y).map(|(&u, &v)| u - v).collect();
        norm(&diff).as_f64().min(2.0)
    };
    if a.len() == b.len() && a.weights()[..] == b.weights()[..] {
        return a.iter().zip(b.iter()).map(|((x, w), (y, _))| w.as_f64() * cost(x, y)).sum();
    }
    let order = |m: &ParticleMeasure<S>| {
        let mut idx: Vec<usize> = (0..m.len()).collect();
        if m.dim() == 1 {
            idx.sort_by(|&i, &j| m.atom(i)[0].partial_cmp(&m.atom(j)[0]).unwrap());
        }
        idx
    };
    let (oa, ob) = (order(a), order(b));
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a.weight(oa[0]).as_f64(), b.weight(ob[0]).as_f64());
    let mut total = 0.0;
    loop {
        let m = ra.min(rb);
        total += m * cost(a.atom(oa[i]), b.atom(ob[j]));
        ra -= m;
        rb -= m;
        if ra <= 0.0 {
            i += 1;
            if i == oa.len() {
                break;
            }
            ra = a.weight(oa[i]).as_f64();
        }
        if rb <= 0.0 {
            j += 1;
            if j == ob.len() {
                break;
            }
            rb = b.weight(ob[j]).as_f64();
        }
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PicardOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// Discount rate of the flow metric; `10 / T` when absent.
    pub lambda: Option<f64>,
    /// Grid stride at which iterates keep atoms; chosen to fit a memory
    /// budget when absent.
    pub stride: Option<usize>,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            max_iter: 20,
            tol: 1e-3,
            lambda: None,
            stride: None,
        }
    }
}

impl PicardOptions {
    pub fn lambda_for(&self, grid: &TimeGrid) -> f64 {
        self.lambda.unwrap_or(10.0 / grid.horizon())
    }

    pub fn stride_for(&self, grid: &TimeGrid, n_paths: usize, dim: usize) -> usize {
        self.stride
            .unwrap_or_else(|| ((grid.n_steps() + 1) * n_paths * dim).div_ceil(FLOW_BUDGET))
            .max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardTrace {
    /// `rho_lambda(gamma^{j+1}, gamma^j)` for each iteration.
    pub distances: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub surrogate_used: bool,
    pub lambda: f64,
    pub stride: usize,
}

/// Picard iteration `gamma^{j+1} = Law(X^{gamma^j})` from `gamma^0 = mu0`,
/// using the same seed at every iteration. Returns the last iterate.
pub fn picard_flow<S: Scalar>(
    model: &DriftModel<S>,
    mu0: &ParticleMeasure<S>,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    opts: &PicardOptions,
) -> Result<(MeasureFlow<S>, PicardTrace)> {
    let report = model.validate_h2(&H2Probe::default())?;
    if !report.pass {
        log::warn!(
            "model {} fails the structural bound check (growth {:.3e}, modulus {:.3e}); the Picard map may not contract",
            model.name(),
            report.growth_ratio,
            report.modulus_ratio
        );
    }
    let lambda = opts.lambda_for(grid);
    let stride = opts.stride_for(grid, n_paths, model.dim());
    let recording = Recording::Stride(stride);
    let x0 = InitialCondition::Law(mu0.clone());
    let mut gamma = MeasureFlow::constant(grid, mu0, model);
    let mut trace = PicardTrace {
        distances: Vec::new(),
        iterations: 0,
        converged: false,
        surrogate_used: false,
        lambda,
        stride,
    };
    for it in 1..=opts.max_iter {
        let ens = simulate_driven(model, gamma.drive.clone(), &x0, grid, n_paths, seed, &recording)?;
        let next = MeasureFlow::from_ensemble_with_initial(ens, mu0, model)?;
        let d = flow_distance(&next, &gamma, lambda, model.moment_order())?;
        log::debug!("picard iteration {it}: distance {:.3e}{}", d.value, if d.surrogate_used { " (surrogate)" } else { "" });
        trace.distances.push(d.value);
        trace.surrogate_used |= d.surrogate_used;
        trace.iterations = it;
        gamma = next;
        if d.value <= opts.tol {
            trace.converged = true;
            return Ok((gamma, trace));
        }
    }
    Err(Error::NonConvergence {
        what: "picard flow",
        iterations: trace.iterations,
        history: trace.distances,
    })
}

/// Empirical flow of `n_particles` particles, each driven by the current
/// empirical measure of all particles.
pub fn particle_flow<S: Scalar>(
    model: &DriftModel<S>,
    mu0: &ParticleMeasure<S>,
    grid: &TimeGrid,
    n_particles: usize,
    seed: u64,
) -> Result<MeasureFlow<S>> {
    particle_flow_with(model, &InitialCondition::Law(mu0.clone()), grid, n_particles, seed, &Recording::All, None)
}

fn measures_len(grid: &TimeGrid) -> usize {
    grid.n_steps() + 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyPoint {
    pub step: usize,
    pub t: f64,
    pub flow_mean: Vec<f64>,
    pub resimulated_mean: Vec<f64>,
    pub flow_moment: f64,
    pub resimulated_moment: f64,
    /// `|difference| / tolerance` for each mean component, then the moment.
    pub ratios: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub points: Vec<ConsistencyPoint>,
    pub worst_ratio: f64,
    pub pass: bool,
}

/// Re-simulates the decoupled equation from `mu0` against `flow` with a
/// fresh `seed` and compares interaction means and moments at every grid
/// point. The tolerance is three combined standard errors plus a round-off
/// floor.
pub fn self_consistency<S: Scalar>(
    model: &DriftModel<S>,
    flow: &MeasureFlow<S>,
    mu0: &ParticleMeasure<S>,
    n_paths: usize,
    seed: u64,
) -> Result<ConsistencyReport> {
    if flow.summary_dim != model.summary_dim() {
        return Err(Error::Dimension("flow and model summaries differ".into()));
    }
    let ens = simulate_driven(model, flow.drive.clone(), &InitialCondition::Law(mu0.clone()), &flow.grid, n_paths, seed, &Recording::Indices(vec![]))?;
    let eps = S::epsilon().as_f64();
    let ratio = |a: f64, sa: f64, b: f64, sb: f64| {
        let tol = 3.0 * sa.hypot(sb) + 64.0 * eps * (1.0 + a.abs() + b.abs());
        (a - b).abs() / tol
    };
    let mut points = Vec::with_capacity(measures_len(&flow.grid));
    let mut worst: f64 = 0.0;
    for j in 0..measures_len(&flow.grid) {
        let flow_mean: Vec<f64> = flow.interaction_mean(j).iter().map(|v| v.as_f64()).collect();
        let h = ens.summaries.h(j);
        let mom = ens.summaries.moment(j);
        let mut ratios: Vec<f64> = flow_mean
            .iter()
            .zip(flow.interaction_mean_stderr(j))
            .zip(h)
            .map(|((&a, &sa), m)| ratio(a, sa, m.mean(), m.stderr()))
            .collect();
        ratios.push(ratio(flow.moments[j], flow.moment_stderr(j), mom.mean(), mom.stderr()));
        worst = ratios.iter().fold(worst, |w, &r| w.max(r));
        points.push(ConsistencyPoint {
            step: j,
            t: flow.grid.time(j),
            flow_mean,
            resimulated_mean: h.iter().map(Moments::mean).collect(),
            flow_moment: flow.moments[j],
            resimulated_moment: mom.mean(),
            ratios,
        });
    }
    Ok(ConsistencyReport {
        points,
        worst_ratio: worst,
        pass: worst <= 1.0,
    })
}

/// Particle system with particle `i` using random stream `order[i]`.
pub fn particle_flow_with<S: Scalar>(
    model: &DriftModel<S>,
    x0: &InitialCondition<S>,
    grid: &TimeGrid,
    n_particles: usize,
    seed: u64,
    recording: &Recording,
    order: Option<&[usize]>,
) -> Result<MeasureFlow<S>> {
    if n_particles < 2 {
        return Err(Error::InvalidArgument("the particle system needs at least two particles".into()));
    }
    if x0.dim() != model.dim() {
        return Err(Error::Dimension("initial condition and model dimensions differ".into()));
    }
    let order: Vec<usize> = match order {
        Some(o) => {
            let mut seen = vec![false; n_particles];
            if o.len() != n_particles || o.iter().any(|&i| i >= n_particles || std::mem::replace(&mut seen[i], true)) {
                return Err(Error::InvalidArgument("order must be a permutation of the particles".into()));
            }
            o.to_vec()
        }
        None => (0..n_particles).collect(),
    };
    let recorded = recording.resolve(grid.n_steps())?;
    let (d, m, ns) = (model.dim(), model.noise_dim(), model.summary_dim());
    let dt = grid.dt();
    let sdt = S::lit(dt);
    let k = S::lit(model.moment_order().value());
    let h = model.observable();

    let prepared = x0.prepare();
    let mut states: Vec<S> = order.iter().flat_map(|&p| prepared.draw(seed, p).to_vec()).collect();
    let mut streams: Vec<BrownianStream> = order.iter().map(|&p| BrownianStream::new(seed, p, dt)).collect();
    let mut valid = vec![true; n_particles];
    let mut drive: Vec<S> = Vec::with_capacity((grid.n_steps() + 1) * ns);
    let mut moments = Vec::with_capacity(grid.n_steps() + 1);
    let mut measures = Vec::with_capacity(recorded.len());
    let mut blown = 0usize;

    for j in 0..=grid.n_steps() {
        let partial: Vec<(Vec<Moments>, Moments)> = states
            .par_chunks(CHUNK * d)
            .zip(valid.par_chunks(CHUNK))
            .map(|(xs, ok)| {
                let mut hm = vec![Moments::default(); ns];
                let mut km = Moments::default();
                let mut buf = vec![S::zero(); ns];
                for (x, _) in xs.chunks_exact(d).zip(ok).filter(|(_, &v)| v) {
                    h.eval(x, &mut buf);
                    hm.iter_mut().zip(&buf).for_each(|(a, b)| a.push(b.as_f64()));
                    km.push(pow_norm(x, k).as_f64());
                }
                (hm, km)
            })
            .collect();
        let mut hm = vec![Moments::default(); ns];
        let mut km = Moments::default();
        for (a, b) in &partial {
            hm.iter_mut().zip(a).for_each(|(x, y)| x.merge(y));
            km.merge(b);
        }
        if km.count == 0 {
            return Err(Error::AllPathsInvalid { path: 0, step: j });
        }
        let mean: Vec<S> = hm.iter().map(|v| S::lit(v.mean())).collect();
        drive.extend_from_slice(&mean);
        moments.push(km.mean());
        if recorded.binary_search(&j).is_ok() {
            let atoms: Vec<S> = states
                .chunks_exact(d)
                .zip(&valid)
                .filter(|(_, &v)| v)
                .flat_map(|(x, _)| x.iter().copied())
                .collect();
            measures.push(ParticleMeasure::empirical(d, atoms, ParticleMeasure::uniform_weights(km.count))?);
        }
        if j == grid.n_steps() {
            break;
        }
        let t = S::lit(grid.time(j));
        let newly: usize = states
            .par_chunks_mut(CHUNK * d)
            .zip(streams.par_chunks_mut(CHUNK))
            .zip(valid.par_chunks_mut(CHUNK))
            .map(|((xs, st), ok)| {
                let mut scr = StepScratch::new(model);
                let mut dw = vec![S::zero(); m];
                let mut lost = 0;
                for ((x, s), v) in xs.chunks_exact_mut(d).zip(st).zip(ok) {
                    s.fill(&mut dw);
                    if *v && !euler_advance(model, t, &mean, sdt, x, &dw, &mut scr) {
                        *v = false;
                        lost += 1;
                    }
                }
                lost
            })
            .sum();
        blown += newly;
    }
    if blown > 0 {
        log::warn!("{blown} of {n_particles} particles blew up and were removed");
    }
    Ok(MeasureFlow {
        grid: *grid,
        indices: recorded,
        measures,
        drive: drive.into(),
        summary_dim: ns,
        stderr: vec![0.0; moments.len() * (ns + 1)],
        moments,
        moment_order: model.moment_order(),
    })
}
