//! The Bismut weight `eta` and its martingale `M_t = int_0^t <eta_s, dW_s>`.
//!
//! For drifts of the form `F_t(x, mu(h))` the weight factorizes as
//!
//! ```text
//! eta_t = grad F_t(X_t^mu, m_t) (v_t + c_t),
//! v_t = E h(X_t^{mu,nu}) - E h(X_t^mu),
//! c_t = E[(h(X_t^mu) - m_t) M_t],
//! ```
//!
//! where `X^{mu,nu}` is the decoupled process started from `nu`. Only the
//! `n`-vector `c_t` is unknown; it is found by Picard iteration, each sweep
//! re-accumulating `M` along the `mu`-paths.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::measures::{Observable, ParticleMeasure};
use crate::mckean::MeasureFlow;
use crate::model::DriftModel;
use crate::rng::BrownianStream;
use crate::scalar::{dot, mat_vec};
use crate::sde::{run_path, InitialCondition, PathEnsemble, Recording, StepScratch, Stepper, TimeGrid};
use crate::stats::{par_chunks, Moments};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EtaOptions {
    pub max_iter: usize,
    /// Relative to `sup_t |c_t|`.
    pub tol: f64,
}

impl Default for EtaOptions {
    fn default() -> Self {
        Self { max_iter: 30, tol: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardDiagnostics {
    /// `sup_t |c^{j+1}_t - c^j_t|` per iteration.
    pub distances: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
enum EtaKind<S: Scalar> {
    Factorized {
        model: DriftModel<S>,
        means: Arc<[S]>,
        coeff: Vec<S>,
        coeff_stderr: Vec<f64>,
    },
    Deterministic {
        values: Vec<S>,
    },
}

/// Statistics of `M_{t_j}` over paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MartingaleStats {
    pub mean: f64,
    pub variance: f64,
    pub stderr: f64,
}

impl From<&Moments> for MartingaleStats {
    fn from(m: &Moments) -> Self {
        Self {
            mean: m.mean(),
            variance: m.variance(),
            stderr: m.stderr(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EtaProcess<S: Scalar> {
    grid: TimeGrid,
    noise_dim: usize,
    summary_dim: usize,
    kind: EtaKind<S>,
    decoupled: Vec<S>,
    corr: Vec<S>,
    martingale: Vec<MartingaleStats>,
    sup_eta: Vec<f64>,
}

impl<S: Scalar> EtaProcess<S> {
    /// A weight that does not depend on the path; `values[j]` applies on `[t_j, t_{j+1})`.
    pub fn deterministic(grid: &TimeGrid, values: Vec<Vec<S>>) -> Result<Self> {
        if values.len() != grid.n_steps() {
            return Err(Error::GridMismatch);
        }
        let m = values.first().map_or(0, Vec::len);
        if m == 0 || values.iter().any(|v| v.len() != m) {
            return Err(Error::Dimension("weights must share a positive dimension".into()));
        }
        let sup_eta = values.iter().map(|v| crate::scalar::norm(v).as_f64()).collect();
        Ok(Self {
            grid: *grid,
            noise_dim: m,
            summary_dim: 0,
            kind: EtaKind::Deterministic {
                values: values.into_iter().flatten().collect(),
            },
            decoupled: Vec::new(),
            corr: Vec::new(),
            martingale: Vec::new(),
            sup_eta,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self.kind, EtaKind::Deterministic { .. })
    }

    /// `eta_{t_j}` at state `x`, for `j < n_steps`.
    pub fn value(&self, j: usize, x: &[S]) -> Vec<S> {
        let mut out = vec![S::zero(); self.noise_dim];
        let mut grad = self.grad_buffer();
        self.eval(j, x, &mut grad, &mut out);
        out
    }

    fn grad_buffer(&self) -> Vec<S> {
        vec![S::zero(); self.noise_dim * self.summary_dim]
    }

    fn eval(&self, j: usize, x: &[S], grad: &mut [S], out: &mut [S]) {
        match &self.kind {
            EtaKind::Factorized { model, means, coeff, .. } => {
                let n = self.summary_dim;
                eval_factorized(model, S::lit(self.grid.time(j)), x, &means[j * n..(j + 1) * n], &coeff[j * n..(j + 1) * n], grad, out)
            }
            EtaKind::Deterministic { values } => out.copy_from_slice(&values[j * self.noise_dim..(j + 1) * self.noise_dim]),
        }
    }

    /// `v_{t_j} + c_{t_j}`, the vector multiplied by the interaction gradient.
    pub fn coefficients(&self, j: usize) -> &[S] {
        match &self.kind {
            EtaKind::Factorized { coeff, .. } => &coeff[j * self.summary_dim..(j + 1) * self.summary_dim],
            EtaKind::Deterministic { .. } => &[],
        }
    }

    pub fn coefficient_stderr(&self, j: usize) -> &[f64] {
        match &self.kind {
            EtaKind::Factorized { coeff_stderr, .. } => &coeff_stderr[j * self.summary_dim..(j + 1) * self.summary_dim],
            EtaKind::Deterministic { .. } => &[],
        }
    }

    /// `c_{t_j}`.
    pub fn correlation(&self, j: usize) -> &[S] {
        &self.corr[j * self.summary_dim..(j + 1) * self.summary_dim]
    }

    /// `v_{t_j}`.
    pub fn decoupled_term(&self, j: usize) -> &[S] {
        &self.decoupled[j * self.summary_dim..(j + 1) * self.summary_dim]
    }

    /// Statistics of `M_{t_j}` from the last sweep of the solver.
    pub fn martingale_stats(&self) -> &[MartingaleStats] {
        &self.martingale
    }

    /// `sup_paths |eta_{t_j}|` per step.
    pub fn sup_norm(&self) -> &[f64] {
        &self.sup_eta
    }

    /// Rows `time, sup_eta, c*, v*, m_mean, m_var`.
    pub fn write_summary_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let n = self.summary_dim;
        let mut header = vec!["time".to_string(), "sup_eta".to_string()];
        header.extend((0..n).map(|i| format!("c{i}")));
        header.extend((0..n).map(|i| format!("v{i}")));
        header.extend(["m_mean".to_string(), "m_var".to_string()]);
        w.write_record(&header)?;
        for j in 0..=self.grid.n_steps() {
            let mut row = vec![self.grid.time(j).to_string()];
            row.push(self.sup_eta.get(j).map_or(String::new(), |v| v.to_string()));
            if n > 0 {
                row.extend(self.correlation(j).iter().map(|v| v.to_string()));
                row.extend(self.decoupled_term(j).iter().map(|v| v.to_string()));
            }
            match self.martingale.get(j) {
                Some(s) => row.extend([s.mean.to_string(), s.variance.to_string()]),
                None => row.extend([String::new(), String::new()]),
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn eval_factorized<S: Scalar>(model: &DriftModel<S>, t: S, x: &[S], m: &[S], coeff: &[S], grad: &mut [S], out: &mut [S]) {
    model.interaction_grad(t, x, m, grad);
    mat_vec(grad, model.noise_dim(), model.summary_dim(), coeff, out);
}

/// Per-path initial states for a sweep.
pub(crate) type InitFn<'a, S> = &'a (dyn Fn(usize) -> Vec<S> + Sync);

/// One pass over all `mu`-paths, optionally coupled with `nu`-started copies
/// sharing their increments, accumulating the statistics the estimators need.
pub(crate) struct Sweep<'a, S: Scalar> {
    pub model: &'a DriftModel<S>,
    pub grid: TimeGrid,
    pub drive: &'a [S],
    pub seed: u64,
    pub n_paths: usize,
    pub mu_init: InitFn<'a, S>,
    pub nu_init: Option<InitFn<'a, S>>,
    pub include: Option<&'a [bool]>,
    /// Weight coefficients `v + c` per grid point; `M = 0` when absent.
    pub coeff: Option<&'a [S]>,
    /// Centering of `h(X^mu)` in the correlation statistic.
    pub center: Option<&'a [S]>,
    pub f: Option<&'a Observable<S>>,
    pub targets: &'a [usize],
}

#[derive(Debug, Clone, Default)]
pub(crate) struct SweepOut {
    pub n_included: usize,
    /// `h(X^nu) - h(X^mu)`, per grid point and component.
    pub dv: Vec<Moments>,
    /// `(h(X^mu) - center) M`.
    pub dc: Vec<Moments>,
    /// Sum of the two, one sample per path.
    pub resid: Vec<Moments>,
    pub m: Vec<Moments>,
    pub sup_eta: Vec<f64>,
    /// `f(X^nu) - f(X^mu)` at each target.
    pub semigroup: Vec<Moments>,
    /// `f(X^mu) M` at each target.
    pub martingale: Vec<Moments>,
    pub total: Vec<Moments>,
}

impl SweepOut {
    fn new(np: usize, n: usize, targets: usize) -> Self {
        Self {
            n_included: 0,
            dv: vec![Moments::default(); np * n],
            dc: vec![Moments::default(); np * n],
            resid: vec![Moments::default(); np * n],
            m: vec![Moments::default(); np],
            sup_eta: vec![0.0; np.saturating_sub(1)],
            semigroup: vec![Moments::default(); targets],
            martingale: vec![Moments::default(); targets],
            total: vec![Moments::default(); targets],
        }
    }

    fn merge(&mut self, o: &SweepOut) {
        self.n_included += o.n_included;
        for (a, b) in [(&mut self.dv, &o.dv), (&mut self.dc, &o.dc), (&mut self.resid, &o.resid), (&mut self.m, &o.m)] {
            a.iter_mut().zip(b).for_each(|(x, y)| x.merge(y));
        }
        for (a, b) in [
            (&mut self.semigroup, &o.semigroup),
            (&mut self.martingale, &o.martingale),
            (&mut self.total, &o.total),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| x.merge(y));
        }
        self.sup_eta.iter_mut().zip(&o.sup_eta).for_each(|(a, &b)| *a = a.max(b));
    }
}

impl<S: Scalar> Sweep<'_, S> {
    pub(crate) fn run(&self) -> Result<SweepOut> {
        let stepper = Stepper::new(self.model, self.drive, self.grid)?;
        let (n, m_dim) = (self.model.summary_dim(), self.model.noise_dim());
        let np = self.grid.n_steps() + 1;
        let nt = self.targets.len();
        let h = self.model.observable();
        let chunks = par_chunks(self.n_paths, |range| {
            let mut out = SweepOut::new(np, n, nt);
            let mut scr = StepScratch::new(self.model);
            let mut dw = vec![S::zero(); m_dim];
            let mut grad = vec![S::zero(); m_dim * n];
            let mut eta = vec![S::zero(); m_dim];
            let (mut hmu, mut hnu) = (vec![S::zero(); n], vec![S::zero(); n]);
            let mut fbuf = [S::zero()];
            // Per-path samples, committed once the path is known to be finite.
            let mut b_dv = vec![0.0; np * n];
            let mut b_dc = vec![0.0; np * n];
            let mut b_m = vec![0.0; np];
            let mut b_sup = vec![0.0; np.saturating_sub(1)];
            let mut b_f = vec![(0.0, 0.0); nt];
            for p in range {
                if self.include.is_some_and(|inc| !inc[p]) {
                    continue;
                }
                let mut xs = vec![(self.mu_init)(p)];
                if let Some(nu) = self.nu_init {
                    xs.push(nu(p));
                }
                let mut mart = S::zero();
                let mut target = 0;
                let blown = run_path(&stepper, self.seed, p, &mut xs, &mut scr, &mut dw, |j, xs, inc| {
                    let x = &xs[0];
                    h.eval(x, &mut hmu);
                    if let Some(xn) = xs.get(1) {
                        h.eval(xn, &mut hnu);
                        for i in 0..n {
                            b_dv[j * n + i] = (hnu[i] - hmu[i]).as_f64();
                        }
                    }
                    if let Some(center) = self.center {
                        for i in 0..n {
                            b_dc[j * n + i] = ((hmu[i] - center[j * n + i]) * mart).as_f64();
                        }
                    }
                    b_m[j] = mart.as_f64();
                    while target < nt && self.targets[target] == j {
                        let f = self.f.expect("targets need an observable");
                        f.eval(x, &mut fbuf);
                        let fmu = fbuf[0];
                        let sg = match xs.get(1) {
                            Some(xn) => {
                                f.eval(xn, &mut fbuf);
                                fbuf[0] - fmu
                            }
                            None => S::zero(),
                        };
                        b_f[target] = (sg.as_f64(), (fmu * mart).as_f64());
                        target += 1;
                    }
                    if let (Some(dw), Some(coeff)) = (inc, self.coeff) {
                        eval_factorized(
                            self.model,
                            stepper.time(j),
                            x,
                            stepper.summary(j),
                            &coeff[j * n..(j + 1) * n],
                            &mut grad,
                            &mut eta,
                        );
                        b_sup[j] = crate::scalar::norm(&eta).as_f64();
                        mart += dot(&eta, dw);
                    }
                });
                if blown.is_some() {
                    continue;
                }
                out.n_included += 1;
                let with_nu = self.nu_init.is_some();
                let with_c = self.center.is_some();
                for k in 0..np * n {
                    if with_nu {
                        out.dv[k].push(b_dv[k]);
                    }
                    if with_c {
                        out.dc[k].push(b_dc[k]);
                    }
                    if with_nu && with_c {
                        out.resid[k].push(b_dv[k] + b_dc[k]);
                    }
                }
                for (a, &b) in out.m.iter_mut().zip(&b_m) {
                    a.push(b);
                }
                for (a, &b) in out.sup_eta.iter_mut().zip(&b_sup) {
                    *a = a.max(b);
                }
                for (i, &(sg, mt)) in b_f.iter().enumerate() {
                    out.semigroup[i].push(sg);
                    out.martingale[i].push(mt);
                    out.total[i].push(sg + mt);
                }
            }
            out
        });
        let mut total = SweepOut::new(np, n, nt);
        for c in &chunks {
            total.merge(c);
        }
        if total.n_included == 0 {
            return Err(Error::AllPathsInvalid { path: 0, step: 0 });
        }
        Ok(total)
    }
}

fn means<S: Scalar>(ms: &[Moments]) -> Vec<S> {
    ms.iter().map(|m| S::lit(m.mean())).collect()
}

/// Solves the weight equation along `mu_paths` for the direction `nu`.
///
/// `mu_paths` must have been simulated against `flow`. The `nu`-started copies
/// are simulated internally with the same increments, their initial states
/// coupled to the `mu`-paths through the shared initial uniforms.
pub fn solve_eta<S: Scalar>(
    model: &DriftModel<S>,
    flow: &MeasureFlow<S>,
    mu_paths: &PathEnsemble<S>,
    nu: &ParticleMeasure<S>,
    opts: &EtaOptions,
) -> Result<(EtaProcess<S>, PicardDiagnostics)> {
    if mu_paths.grid() != flow.grid() {
        return Err(Error::GridMismatch);
    }
    if mu_paths.drive()[..] != flow.drive()[..] {
        return Err(Error::InvalidArgument("paths were not simulated against this flow".into()));
    }
    if nu.dim() != model.dim() {
        return Err(Error::Dimension("direction measure and model dimensions differ".into()));
    }
    let grid = *flow.grid();
    let np = grid.n_steps() + 1;
    let n = model.summary_dim();
    let seed = mu_paths.seed();
    let mu_init = |p: usize| mu_paths.initial_state(p).to_vec();
    let nu_cond = InitialCondition::Law(nu.clone());
    let nu_prep = nu_cond.prepare();
    let nu_init = |p: usize| nu_prep.draw(seed, p).to_vec();
    let center: Vec<S> = (0..np).flat_map(|j| mu_paths.summaries().h_mean(j)).map(S::lit).collect();
    let base = Sweep {
        model,
        grid,
        drive: &flow.drive()[..],
        seed,
        n_paths: mu_paths.n_paths(),
        mu_init: &mu_init,
        nu_init: Some(&nu_init),
        include: Some(&mu_paths.valid),
        coeff: None,
        center: None,
        f: None,
        targets: &[],
    };
    let first = base.run()?;
    let v: Vec<S> = means(&first.dv);
    let v_se: Vec<f64> = first.dv.iter().map(Moments::stderr).collect();

    let mut c = vec![S::zero(); np * n];
    let mut c_se = vec![0.0; np * n];
    let mut diag = PicardDiagnostics {
        distances: Vec::new(),
        converged: false,
        iterations: 0,
    };
    let mut last = SweepOut::default();
    for it in 1..=opts.max_iter {
        let coeff: Vec<S> = v.iter().zip(&c).map(|(&a, &b)| a + b).collect();
        let out = Sweep {
            nu_init: None,
            coeff: Some(&coeff),
            center: Some(&center),
            ..base
        }
        .run()?;
        let next: Vec<S> = means(&out.dc);
        let dist = next.iter().zip(&c).map(|(&a, &b)| (a - b).abs().as_f64()).fold(0.0, f64::max);
        let scale = next.iter().map(|a| a.abs().as_f64()).fold(0.0, f64::max);
        log::debug!("eta iteration {it}: sup |dc| = {dist:.3e} (scale {scale:.3e})");
        diag.distances.push(dist);
        diag.iterations = it;
        c = next;
        c_se = out.dc.iter().map(Moments::stderr).collect();
        last = out;
        if dist <= opts.tol * scale {
            diag.converged = true;
            break;
        }
    }
    if !diag.converged {
        return Err(Error::NonConvergence {
            what: "eta",
            iterations: diag.iterations,
            history: diag.distances,
        });
    }
    let coeff: Vec<S> = v.iter().zip(&c).map(|(&a, &b)| a + b).collect();
    let coeff_stderr = v_se.iter().zip(&c_se).map(|(a, b)| a.hypot(*b)).collect();
    let eta = EtaProcess {
        grid,
        noise_dim: model.noise_dim(),
        summary_dim: n,
        kind: EtaKind::Factorized {
            model: model.clone(),
            means: flow.drive().clone(),
            coeff,
            coeff_stderr,
        },
        decoupled: v,
        corr: c,
        martingale: last.m.iter().map(MartingaleStats::from).collect(),
        sup_eta: last.sup_eta,
    };
    Ok((eta, diag))
}

pub(crate) fn factorized_parts<S: Scalar>(eta: &EtaProcess<S>) -> Option<(&DriftModel<S>, &Arc<[S]>, &[S])> {
    match &eta.kind {
        EtaKind::Factorized { model, means, coeff, .. } => Some((model, means, coeff)),
        EtaKind::Deterministic { .. } => None,
    }
}

/// Per-path values of `M_t = sum_{t_j < t} <eta_{t_j}, dW_j>` at chosen grid indices.
#[derive(Debug, Clone)]
pub struct MartingaleValues<S> {
    pub indices: Vec<usize>,
    /// `values[r][p]` is `M` of path `p` at grid index `indices[r]`.
    pub values: Vec<Vec<S>>,
    pub valid: Vec<bool>,
}

impl<S: Scalar> MartingaleValues<S> {
    pub fn at(&self, j: usize) -> Result<&[S]> {
        let r = self.indices.binary_search(&j).map_err(|_| Error::NotRecorded(j))?;
        Ok(&self.values[r])
    }

    /// Mean and standard error over valid paths at grid index `j`.
    pub fn stats(&self, j: usize) -> Result<Moments> {
        let mut m = Moments::default();
        for (&v, &ok) in self.at(j)?.iter().zip(&self.valid) {
            if ok {
                m.push(v.as_f64());
            }
        }
        Ok(m)
    }
}

/// The discretized stochastic integral along `paths`, recorded at the
/// ensemble's recorded indices.
pub fn martingale_integral<S: Scalar>(eta: &EtaProcess<S>, paths: &PathEnsemble<S>) -> Result<MartingaleValues<S>> {
    martingale_integral_with(eta, paths, &Recording::Indices(paths.recorded_indices().to_vec()))
}

pub fn martingale_integral_with<S: Scalar>(
    eta: &EtaProcess<S>,
    paths: &PathEnsemble<S>,
    recording: &Recording,
) -> Result<MartingaleValues<S>> {
    if eta.grid != *paths.grid() {
        return Err(Error::GridMismatch);
    }
    if eta.noise_dim != paths.noise_dim() {
        return Err(Error::Dimension("weight and Brownian dimensions differ".into()));
    }
    let indices = recording.resolve(eta.grid.n_steps())?;
    let n_paths = paths.n_paths();
    let nr = indices.len();
    let chunks = match factorized_parts(eta) {
        Some((model, means, _)) => {
            if model.dim() != paths.dim() {
                return Err(Error::Dimension("weight model and paths live in different spaces".into()));
            }
            let stepper = Stepper::new(model, &paths.drive()[..], eta.grid)?;
            if means[..] != paths.drive()[..] {
                log::warn!("paths were driven by a different flow than the weight was solved on");
            }
            par_chunks(n_paths, |range| {
                let mut vals: Vec<Vec<S>> = vec![Vec::with_capacity(range.len()); nr];
                let mut ok = Vec::with_capacity(range.len());
                let mut scr = StepScratch::new(model);
                let mut dw = vec![S::zero(); eta.noise_dim];
                let mut grad = eta.grad_buffer();
                let mut e = vec![S::zero(); eta.noise_dim];
                for p in range {
                    let mut xs = [paths.initial_state(p).to_vec()];
                    let mut mart = S::zero();
                    let mut r = 0;
                    let blown = run_path(&stepper, paths.seed(), p, &mut xs, &mut scr, &mut dw, |j, xs, inc| {
                        while r < nr && indices[r] == j {
                            vals[r].push(mart);
                            r += 1;
                        }
                        if let Some(dw) = inc {
                            eta.eval(j, &xs[0], &mut grad, &mut e);
                            mart += dot(&e, dw);
                        }
                    });
                    for v in &mut vals[r..] {
                        v.push(S::nan());
                    }
                    ok.push(blown.is_none() && paths.is_valid(p));
                }
                (vals, ok)
            })
        }
        None => par_chunks(n_paths, |range| {
            let mut vals: Vec<Vec<S>> = vec![Vec::with_capacity(range.len()); nr];
            let mut ok = Vec::with_capacity(range.len());
            let mut dw = vec![S::zero(); eta.noise_dim];
            let mut e = vec![S::zero(); eta.noise_dim];
            let mut grad = Vec::new();
            for p in range {
                let mut stream = BrownianStream::new(paths.seed(), p, eta.grid.dt());
                let mut mart = S::zero();
                let mut r = 0;
                for j in 0..=eta.grid.n_steps() {
                    while r < nr && indices[r] == j {
                        vals[r].push(mart);
                        r += 1;
                    }
                    if j < eta.grid.n_steps() {
                        stream.fill(&mut dw);
                        eta.eval(j, &[], &mut grad, &mut e);
                        mart += dot(&e, &dw);
                    }
                }
                ok.push(paths.is_valid(p));
            }
            (vals, ok)
        }),
    };
    let mut out = MartingaleValues {
        indices,
        values: vec![Vec::with_capacity(n_paths); nr],
        valid: Vec::with_capacity(n_paths),
    };
    for (vals, ok) in chunks {
        for (dst, src) in out.values.iter_mut().zip(vals) {
            dst.extend(src);
        }
        out.valid.extend(ok);
    }
    Ok(out)
}

/// `eta_t = a delta e^{(a - 1) t}` for the mean-field Ornstein–Uhlenbeck model.
pub fn eta_ou_closed_form(a: f64, delta: f64, t: f64) -> f64 {
    a * delta * ((a - 1.0) * t).exp()
}

/// `c_t = delta (e^{(a - 1) t} - e^{-t})` for the same model.
pub fn correlation_ou_closed_form(a: f64, delta: f64, t: f64) -> f64 {
    delta * (((a - 1.0) * t).exp() - (-t).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualPoint {
    pub step: usize,
    pub t: f64,
    pub coefficient: Vec<f64>,
    pub right_side: Vec<f64>,
    pub tolerance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaResidual {
    pub points: Vec<ResidualPoint>,
    /// Largest `|rhs - coefficient| / tolerance`.
    pub worst_ratio: f64,
    pub pass: bool,
}

/// Re-evaluates the right side of the weight equation for the solved `eta`
/// on a fresh batch of paths and compares it with `eta`, per grid point.
///
/// Both sides share the factor `grad F(t, x, m_t)`, so the comparison is made
/// on the coefficient vectors. The tolerance is three combined standard
/// errors plus a round-off floor.
pub fn eta_residual<S: Scalar>(
    eta: &EtaProcess<S>,
    mu: &ParticleMeasure<S>,
    nu: &ParticleMeasure<S>,
    n_paths: usize,
    seed: u64,
) -> Result<EtaResidual> {
    let (model, means, coeff) =
        factorized_parts(eta).ok_or_else(|| Error::InvalidArgument("residual needs a solved weight".into()))?;
    let grid = eta.grid;
    let n = model.summary_dim();
    let np = grid.n_steps() + 1;
    let mu_cond = InitialCondition::Law(mu.clone());
    let nu_cond = InitialCondition::Law(nu.clone());
    let (mp, np_) = (mu_cond.prepare(), nu_cond.prepare());
    let mu_init = |p: usize| mp.draw(seed, p).to_vec();
    let nu_init = |p: usize| np_.draw(seed, p).to_vec();
    let out = Sweep {
        model,
        grid,
        drive: &means[..],
        seed,
        n_paths,
        mu_init: &mu_init,
        nu_init: Some(&nu_init),
        include: None,
        coeff: Some(coeff),
        center: Some(&means[..]),
        f: None,
        targets: &[],
    }
    .run()?;
    let eps = S::epsilon().as_f64();
    let mut points = Vec::with_capacity(np);
    let mut worst: f64 = 0.0;
    for j in 0..np {
        let se = eta.coefficient_stderr(j);
        let mut p = ResidualPoint {
            step: j,
            t: grid.time(j),
            coefficient: Vec::with_capacity(n),
            right_side: Vec::with_capacity(n),
            tolerance: Vec::with_capacity(n),
        };
        for i in 0..n {
            let lhs = coeff[j * n + i].as_f64();
            let r = &out.resid[j * n + i];
            let rhs = r.mean();
            let scale = 1.0 + lhs.abs() + rhs.abs();
            let tol = 3.0 * se[i].hypot(r.stderr()) + 64.0 * eps * scale;
            worst = worst.max((rhs - lhs).abs() / tol);
            p.coefficient.push(lhs);
            p.right_side.push(rhs);
            p.tolerance.push(tol);
        }
        points.push(p);
    }
    Ok(EtaResidual {
        points,
        worst_ratio: worst,
        pass: worst <= 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mckean::{picard_flow, PicardOptions};
    use crate::model::library::mean_field_ou;
    use crate::sde::simulate_decoupled_with;

    #[test]
    fn closed_form_examples() {
        assert_eq!(eta_ou_closed_form(0.5, 0.0, 0.7), 0.0);
        assert_eq!(eta_ou_closed_form(0.5, 1.0, 0.0), 0.5);
        assert!((eta_ou_closed_form(0.5, 1.0, 1.0) - 0.3032653298563167).abs() < 1e-15);
        assert_eq!(correlation_ou_closed_form(0.5, 1.0, 0.0), 0.0);
    }

    #[test]
    fn zero_weight_gives_zero_martingale() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let model = mean_field_ou::<f64>(0.5, 1).unwrap();
        let flow = MeasureFlow::constant(&grid, &ParticleMeasure::dirac(&[0.0]), &model);
        let paths = simulate_decoupled_with(&model, &flow, &InitialCondition::Point(vec![0.0]), &grid, 100, 1, &Recording::Terminal).unwrap();
        let eta = EtaProcess::deterministic(&grid, vec![vec![0.0]; 10]).unwrap();
        let m = martingale_integral(&eta, &paths).unwrap();
        assert!(m.at(10).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_unit_weight_is_the_increment() {
        let grid = TimeGrid::new(0.5, 1).unwrap();
        let model = mean_field_ou::<f64>(0.5, 2).unwrap();
        let flow = MeasureFlow::constant(&grid, &ParticleMeasure::dirac(&[0.0, 0.0]), &model);
        let paths =
            simulate_decoupled_with(&model, &flow, &InitialCondition::Point(vec![0.0, 0.0]), &grid, 50, 4, &Recording::All).unwrap();
        let eta = EtaProcess::deterministic(&grid, vec![vec![1.0, 0.0]]).unwrap();
        let m = martingale_integral(&eta, &paths).unwrap();
        for p in 0..50 {
            assert_eq!(m.at(1).unwrap()[p], paths.increments(p)[0]);
            assert_eq!(m.at(0).unwrap()[p], 0.0);
        }
    }

    #[test]
    fn identical_direction_gives_zero_weight() {
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let model = mean_field_ou::<f64>(0.5, 1).unwrap();
        let mu = ParticleMeasure::uniform(vec![vec![-1.0], vec![1.0]]).unwrap();
        let (flow, _) = picard_flow(&model, &mu, &grid, 1000, 2, &PicardOptions::default()).unwrap();
        let paths = simulate_decoupled_with(&model, &flow, &InitialCondition::Law(mu.clone()), &grid, 1000, 2, &Recording::Terminal).unwrap();
        let (eta, diag) = solve_eta(&model, &flow, &paths, &mu, &EtaOptions::default()).unwrap();
        assert!(diag.converged);
        assert_eq!(diag.iterations, 1);
        for j in 0..=20 {
            assert_eq!(eta.coefficients(j), &[0.0]);
        }
    }

    #[test]
    fn constant_observable_gives_zero_weight() {
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let model = DriftModel::<f64>::builder("const-h", 1, 1, 1)
            .free_drift(|_, x, o| o[0] = -x[0])
            .interaction(|_, _, m, o| o[0] = m[0].sin(), |_, _, m, o| o[0] = m[0].cos())
            .observable(Observable::new(1, 1, |_, o| o[0] = 2.0))
            .build()
            .unwrap();
        let mu = ParticleMeasure::dirac(&[0.0]);
        let nu = ParticleMeasure::dirac(&[3.0]);
        let (flow, _) = picard_flow(&model, &mu, &grid, 500, 2, &PicardOptions::default()).unwrap();
        let paths = simulate_decoupled_with(&model, &flow, &InitialCondition::Law(mu), &grid, 500, 2, &Recording::Terminal).unwrap();
        let (eta, _) = solve_eta(&model, &flow, &paths, &nu, &EtaOptions::default()).unwrap();
        assert!(eta.sup_norm().iter().all(|&v| v == 0.0));
        assert_eq!(eta.value(3, &[1.0]), vec![0.0]);
    }

    #[test]
    fn summary_csv_has_one_row_per_grid_point() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let eta = EtaProcess::deterministic(&grid, vec![vec![1.0]; 4]).unwrap();
        let mut buf = Vec::new();
        eta.write_summary_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.starts_with("time,sup_eta,m_mean,m_var"));
    }
}
