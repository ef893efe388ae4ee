//! Extrinsic derivative of `mu -> P_t f(mu) = E f(X_t^mu)` in direction `nu`:
//!
//! ```text
//! D_nu P_t f(mu) = int P_t^mu f d(nu - mu) + E[f(X_t^mu) M_t]
//! ```
//!
//! with `M` the martingale of the Bismut weight. Two independent oracles are
//! provided: difference quotients of the full nonlinear semigroup along
//! `(1 - eps) mu + eps nu`, and Girsanov reweighting of `mu`-paths.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::eta::{factorized_parts, solve_eta, EtaOptions, EtaProcess, PicardDiagnostics, Sweep};
use crate::mckean::{picard_flow, MeasureFlow, PicardOptions, PicardTrace};
use crate::measures::{Observable, ParticleMeasure};
use crate::model::DriftModel;
use crate::scalar::{dot, norm_sq};
use crate::sde::{check_growth, run_path, simulate_decoupled_with, InitialCondition, PathEnsemble, Recording, StepScratch, Stepper, TimeGrid};
use crate::stats::{log_log_slope, par_chunks, Moments};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeEstimate {
    pub value: f64,
    pub stderr: f64,
    /// `int P_t^mu f d(nu - mu)`.
    pub term_semigroup: f64,
    /// `E[f(X_t^mu) M_t]`.
    pub term_martingale: f64,
    pub stderr_semigroup: f64,
    pub stderr_martingale: f64,
    pub n_paths: usize,
    pub n_valid: usize,
    pub seed: u64,
    pub t: f64,
}

impl DerivativeEstimate {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Header plus one row: `value, stderr, term_semigroup, term_martingale, config_hash, seed`.
    pub fn write_csv<W: Write>(&self, writer: W, config_hash: &str) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "value", "stderr", "term_semigroup", "term_martingale", "config_hash", "seed"])?;
        w.write_record([
            self.t.to_string(),
            self.value.to_string(),
            self.stderr.to_string(),
            self.term_semigroup.to_string(),
            self.term_martingale.to_string(),
            config_hash.to_string(),
            self.seed.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorOptions {
    pub picard: PicardOptions,
    pub eta: EtaOptions,
}

/// Everything produced by one run of the estimator.
#[derive(Debug, Clone)]
pub struct BismutRun<S: Scalar> {
    pub estimates: Vec<DerivativeEstimate>,
    pub flow: MeasureFlow<S>,
    pub picard: PicardTrace,
    pub eta: EtaProcess<S>,
    pub eta_diagnostics: PicardDiagnostics,
}

fn sorted_targets(grid: &TimeGrid, times: &[f64]) -> Result<Vec<usize>> {
    if times.is_empty() {
        return Err(Error::InvalidArgument("no target times".into()));
    }
    let mut idx = times.iter().map(|&t| grid.index_of(t)).collect::<Result<Vec<_>>>()?;
    idx.sort_unstable();
    idx.dedup();
    Ok(idx)
}

fn check_f<S: Scalar>(model: &DriftModel<S>, f: &Observable<S>) -> Result<()> {
    if f.in_dim() != model.dim() || f.out_dim() != 1 {
        return Err(Error::Dimension("f must map the state space to R".into()));
    }
    Ok(())
}

fn spot_check_growth<S: Scalar>(flow: &MeasureFlow<S>, f: &Observable<S>, j: usize) {
    let r = flow.indices().partition_point(|&i| i <= j);
    if let Some(mu) = r.checked_sub(1).map(|r| &flow.measures()[r]) {
        let xs: Vec<&[S]> = mu.iter().map(|(x, _)| x).collect();
        check_growth(f, &xs, flow.moment_order());
    }
}

/// Bismut estimate at a single time `t`, with default solver settings.
#[allow(clippy::too_many_arguments)]
pub fn extrinsic_derivative<S: Scalar>(
    model: &DriftModel<S>,
    mu: &ParticleMeasure<S>,
    nu: &ParticleMeasure<S>,
    f: &Observable<S>,
    t: f64,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<DerivativeEstimate> {
    let run = extrinsic_derivative_with(model, mu, nu, f, &[t], grid, n_paths, seed, &EstimatorOptions::default())?;
    Ok(run.estimates.into_iter().next().expect("one target"))
}

/// Bismut estimates at several times from one flow solve and one weight.
///
/// The flow, the `mu`-paths, the `nu`-paths and the weight all use `seed`, so
/// every difference is taken under common random numbers.
#[allow(clippy::too_many_arguments)]
pub fn extrinsic_derivative_with<S: Scalar>(
    model: &DriftModel<S>,
    mu: &ParticleMeasure<S>,
    nu: &ParticleMeasure<S>,
    f: &Observable<S>,
    times: &[f64],
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    opts: &EstimatorOptions,
) -> Result<BismutRun<S>> {
    check_f(model, f)?;
    let targets = sorted_targets(grid, times)?;
    let (flow, picard) = picard_flow(model, mu, grid, n_paths, seed, &opts.picard)?;
    spot_check_growth(&flow, f, *targets.last().unwrap());
    let mu_paths = simulate_decoupled_with(model, &flow, &InitialCondition::Law(mu.clone()), grid, n_paths, seed, &Recording::Indices(vec![]))?;
    let (eta, eta_diagnostics) = solve_eta(model, &flow, &mu_paths, nu, &opts.eta)?;
    let (_, means, coeff) = factorized_parts(&eta).expect("solved weight is factorized");

    let nu_cond = InitialCondition::Law(nu.clone());
    let nu_prep = nu_cond.prepare();
    let mu_init = |p: usize| mu_paths.initial_state(p).to_vec();
    let nu_init = |p: usize| nu_prep.draw(seed, p).to_vec();
    let out = Sweep {
        model,
        grid: *grid,
        drive: &means[..],
        seed,
        n_paths,
        mu_init: &mu_init,
        nu_init: Some(&nu_init),
        include: Some(&mu_paths.valid),
        coeff: Some(coeff),
        center: None,
        f: Some(f),
        targets: &targets,
    }
    .run()?;
    let estimates = targets
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            let term_semigroup = out.semigroup[i].mean();
            let term_martingale = out.martingale[i].mean();
            DerivativeEstimate {
                value: term_semigroup + term_martingale,
                stderr: out.total[i].stderr(),
                term_semigroup,
                term_martingale,
                stderr_semigroup: out.semigroup[i].stderr(),
                stderr_martingale: out.martingale[i].stderr(),
                n_paths,
                n_valid: out.n_included,
                seed,
                t: grid.time(j),
            }
        })
        .collect();
    Ok(BismutRun {
        estimates,
        flow,
        picard,
        eta,
        eta_diagnostics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuotientEstimate {
    pub eps: f64,
    pub value: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteDifferenceResult {
    pub t: f64,
    pub per_eps: Vec<QuotientEstimate>,
    /// Richardson extrapolation from the two smallest `eps`.
    pub extrapolated: f64,
    pub extrapolated_stderr: f64,
    pub n_paths: usize,
    pub seed: u64,
}

/// Finite-difference oracle at a single time with default Picard settings.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_derivative<S: Scalar>(
    model: &DriftModel<S>,
    mu: &ParticleMeasure<S>,
    nu: &ParticleMeasure<S>,
    f: &Observable<S>,
    t: f64,
    eps_list: &[f64],
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<FiniteDifferenceResult> {
    let mut r = finite_difference_derivative_with(model, mu, nu, f, &[t], eps_list, grid, n_paths, seed, &PicardOptions::default())?;
    Ok(r.remove(0))
}

/// `(P_t f(pi_eps) - P_t f(mu)) / eps` with `pi_eps = (1 - eps) mu + eps nu`.
///
/// Each law gets its own self-consistent flow; all runs share the seed, and
/// initial states are coupled through a common uniform per path, so the
/// quotient is formed path by path.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_derivative_with<S: Scalar>(
    model: &DriftModel<S>,
    mu: &ParticleMeasure<S>,
    nu: &ParticleMeasure<S>,
    f: &Observable<S>,
    times: &[f64],
    eps_list: &[f64],
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    opts: &PicardOptions,
) -> Result<Vec<FiniteDifferenceResult>> {
    check_f(model, f)?;
    if eps_list.is_empty() || eps_list.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
        return Err(Error::InvalidArgument("eps values must lie in (0, 1)".into()));
    }
    let targets = sorted_targets(grid, times)?;
    let values_for = |law: &ParticleMeasure<S>| -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
        let (flow, _) = picard_flow(model, law, grid, n_paths, seed, opts)?;
        let ens = simulate_decoupled_with(model, &flow, &InitialCondition::Law(law.clone()), grid, n_paths, seed, &Recording::Indices(targets.clone()))?;
        let mut buf = [S::zero()];
        let vals = targets
            .iter()
            .map(|&j| {
                ens.states_at(j).map(|s| {
                    s.chunks_exact(model.dim())
                        .map(|x| {
                            f.eval(x, &mut buf);
                            buf[0].as_f64()
                        })
                        .collect()
                })
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Ok((vals, ens.valid))
    };
    let (base, base_ok) = values_for(mu)?;
    let mut eps_sorted = eps_list.to_vec();
    eps_sorted.sort_by(|a, b| b.total_cmp(a));
    let mut quotients: Vec<(f64, Vec<Vec<f64>>, Vec<bool>)> = Vec::new();
    for &eps in &eps_sorted {
        let law = mu.mix(nu, S::lit(eps))?;
        let (vals, ok) = values_for(&law)?;
        let ok: Vec<bool> = ok.iter().zip(&base_ok).map(|(&a, &b)| a && b).collect();
        let q = vals
            .iter()
            .zip(&base)
            .map(|(v, b)| v.iter().zip(b).map(|(x, y)| (x - y) / eps).collect())
            .collect();
        quotients.push((eps, q, ok));
    }
    let moments = |xs: &[f64], ok: &[bool]| {
        let mut m = Moments::default();
        xs.iter().zip(ok).filter(|(_, &v)| v).for_each(|(&x, _)| m.push(x));
        m
    };
    let mut results = Vec::with_capacity(targets.len());
    for (ti, &j) in targets.iter().enumerate() {
        let per_eps: Vec<QuotientEstimate> = quotients
            .iter()
            .map(|(eps, q, ok)| {
                let m = moments(&q[ti], ok);
                QuotientEstimate {
                    eps: *eps,
                    value: m.mean(),
                    stderr: m.stderr(),
                }
            })
            .collect();
        let (extrapolated, extrapolated_stderr) = match quotients.len() {
            1 => (per_eps[0].value, per_eps[0].stderr),
            len => {
                let (e1, q1, ok1) = &quotients[len - 2];
                let (e2, q2, ok2) = &quotients[len - 1];
                let ok: Vec<bool> = ok1.iter().zip(ok2).map(|(&a, &b)| a && b).collect();
                let r: Vec<f64> = q1[ti].iter().zip(&q2[ti]).map(|(a, b)| (e1 * b - e2 * a) / (e1 - e2)).collect();
                let m = moments(&r, &ok);
                (m.mean(), m.stderr())
            }
        };
        results.push(FiniteDifferenceResult {
            t: grid.time(j),
            per_eps,
            extrapolated,
            extrapolated_stderr,
            n_paths,
            seed,
        });
    }
    Ok(results)
}

/// Likelihood ratios turning `base_flow` dynamics into `target_flow` dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GirsanovWeight {
    pub weights: Vec<f64>,
    pub log_weights: Vec<f64>,
    /// `int_0^t |xi_s|^2 ds` per path.
    pub shift_energy: Vec<f64>,
    pub valid: Vec<bool>,
    pub effective_sample_size: f64,
}

impl GirsanovWeight {
    /// Mean of the weights over valid paths and its standard error.
    pub fn mean_stderr(&self) -> (f64, f64) {
        let mut m = Moments::default();
        self.weights.iter().zip(&self.valid).filter(|(_, &v)| v).for_each(|(&w, _)| m.push(w));
        (m.mean(), m.stderr())
    }
}

/// Importance-sampling estimate of `E f(X_t)` under the `target_flow`
/// dynamics from paths simulated under `base_flow`.
///
/// `xi_s = F(s, X_s, m^target_s) - F(s, X_s, m^base_s)` and
/// `log R_t = sum <xi, dW> - (1/2) sum |xi|^2 dt`.
pub fn girsanov_reweighted_mean<S: Scalar>(
    model: &DriftModel<S>,
    base_flow: &MeasureFlow<S>,
    target_flow: &MeasureFlow<S>,
    paths: &PathEnsemble<S>,
    f: &Observable<S>,
    t: f64,
) -> Result<(f64, f64, GirsanovWeight)> {
    check_f(model, f)?;
    if base_flow.grid() != paths.grid() || target_flow.grid() != paths.grid() {
        return Err(Error::GridMismatch);
    }
    if paths.drive()[..] != base_flow.drive()[..] {
        return Err(Error::InvalidArgument("paths were not simulated under the base flow".into()));
    }
    let grid = *paths.grid();
    let jt = grid.index_of(t)?;
    let stepper = Stepper::new(model, &base_flow.drive()[..], grid)?;
    let m = model.noise_dim();
    let dt = grid.dt();
    let chunks = par_chunks(paths.n_paths(), |range| {
        let mut scr = StepScratch::new(model);
        let mut dw = vec![S::zero(); m];
        let (mut fb, mut ft) = (vec![S::zero(); m], vec![S::zero(); m]);
        let mut fbuf = [S::zero()];
        let mut rows = Vec::with_capacity(range.len());
        for p in range {
            let mut xs = [paths.initial_state(p).to_vec()];
            let (mut log_r, mut energy, mut fx) = (0.0_f64, 0.0_f64, 0.0_f64);
            let blown = run_path(&stepper, paths.seed(), p, &mut xs, &mut scr, &mut dw, |j, xs, inc| {
                if j == jt {
                    f.eval(&xs[0], &mut fbuf);
                    fx = fbuf[0].as_f64();
                }
                if let (Some(dw), true) = (inc, j < jt) {
                    let s = stepper.time(j);
                    model.interaction(s, &xs[0], stepper.summary(j), &mut fb);
                    model.interaction(s, &xs[0], target_flow.interaction_mean(j), &mut ft);
                    let xi: Vec<S> = ft.iter().zip(&fb).map(|(&a, &b)| a - b).collect();
                    let sq = norm_sq(&xi).as_f64();
                    log_r += dot(&xi, dw).as_f64() - 0.5 * sq * dt;
                    energy += sq * dt;
                }
            });
            let ok = paths.is_valid(p) && blown.is_none_or(|step| step > jt) && log_r.is_finite();
            rows.push((log_r, energy, fx, ok));
        }
        rows
    });
    let mut w = GirsanovWeight {
        weights: Vec::with_capacity(paths.n_paths()),
        log_weights: Vec::with_capacity(paths.n_paths()),
        shift_energy: Vec::with_capacity(paths.n_paths()),
        valid: Vec::with_capacity(paths.n_paths()),
        effective_sample_size: 0.0,
    };
    let mut est = Moments::default();
    let (mut s1, mut s2) = (0.0, 0.0);
    for (log_r, energy, fx, ok) in chunks.into_iter().flatten() {
        let r = log_r.exp();
        w.weights.push(r);
        w.log_weights.push(log_r);
        w.shift_energy.push(energy);
        w.valid.push(ok);
        if ok {
            est.push(fx * r);
            s1 += r;
            s2 += r * r;
        }
    }
    w.effective_sample_size = if s2 > 0.0 { s1 * s1 / s2 } else { 0.0 };
    let n_valid = est.count as f64;
    if w.effective_sample_size < 0.1 * n_valid {
        log::warn!(
            "effective sample size {:.0} is below 10% of {} paths; the reweighted estimate is unreliable",
            w.effective_sample_size,
            est.count
        );
    }
    Ok((est.mean(), est.stderr(), w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub t: f64,
    pub term_martingale: f64,
    pub stderr_martingale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayProbe {
    pub rows: Vec<DecayRow>,
    /// Power-law exponent of `|term_martingale|` against `t`; absent when
    /// some entry is exactly zero.
    pub exponent: Option<f64>,
    /// Exponent at least one half, or all entries exactly zero.
    pub vanishes: bool,
}

/// `|E[f(X_t^mu) M_t]|` at small times from a single run on a grid of step `dt`
/// up to the largest requested time.
#[allow(clippy::too_many_arguments)]
pub fn small_time_decay_probe<S: Scalar>(
    model: &DriftModel<S>,
    mu: &ParticleMeasure<S>,
    nu: &ParticleMeasure<S>,
    f: &Observable<S>,
    t_list: &[f64],
    dt: f64,
    n_paths: usize,
    seed: u64,
    opts: &EstimatorOptions,
) -> Result<DecayProbe> {
    if t_list.is_empty() || t_list.windows(2).any(|w| w[0] >= w[1]) || t_list[0] <= 0.0 {
        return Err(Error::InvalidArgument("decay times must be positive and increasing".into()));
    }
    let grid = TimeGrid::with_step(*t_list.last().unwrap(), dt)?;
    let run = extrinsic_derivative_with(model, mu, nu, f, t_list, &grid, n_paths, seed, opts)?;
    let rows: Vec<DecayRow> = run
        .estimates
        .iter()
        .map(|e| DecayRow {
            t: e.t,
            term_martingale: e.term_martingale,
            stderr_martingale: e.stderr_martingale,
        })
        .collect();
    let mags: Vec<f64> = rows.iter().map(|r| r.term_martingale.abs()).collect();
    let (exponent, vanishes) = if mags.iter().all(|&m| m == 0.0) {
        (None, true)
    } else if mags.contains(&0.0) || rows.len() < 2 {
        (None, false)
    } else {
        let ts: Vec<f64> = rows.iter().map(|r| r.t).collect();
        let e = log_log_slope(&ts, &mags);
        (Some(e), e >= 0.5)
    };
    Ok(DecayProbe { rows, exponent, vanishes })
}
