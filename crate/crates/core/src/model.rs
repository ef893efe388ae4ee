//! Coefficients of the distribution-dependent SDE
//!
//! ```text
//! dX_t = [ b0_t(X_t) + sigma_t(X_t) F_t(X_t, L(X_t)(h)) ] dt + sigma_t(X_t) dW_t
//! ```
//!
//! The measure enters only through the mean of the observable `h`, so the
//! extrinsic derivative of the measure-dependent drift part is
//! `grad F_t(x, mu(h)) (h(y) - mu(h))`, centered under `mu`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::measures::{MomentOrder, Observable, ParticleMeasure};
use crate::rng::{stream, Purpose};
use crate::scalar::{mat_vec, norm, pow_norm};
use crate::{Error, Result, Scalar};

/// `(t, x) -> out`.
pub type StateMap<S> = Arc<dyn Fn(S, &[S], &mut [S]) + Send + Sync>;
/// `(t, x, m) -> out`, with `m` the interaction summary `mu(h)`.
pub type InteractionMap<S> = Arc<dyn Fn(S, &[S], &[S], &mut [S]) + Send + Sync>;
pub type ScalarMap<S> = Arc<dyn Fn(S) -> S + Send + Sync>;

#[derive(Clone)]
pub struct DriftModel<S> {
    name: String,
    dim: usize,
    noise_dim: usize,
    summary_dim: usize,
    free_drift: StateMap<S>,
    diffusion: StateMap<S>,
    interaction: InteractionMap<S>,
    interaction_grad: InteractionMap<S>,
    observable: Observable<S>,
    moment_order: MomentOrder,
    bound: ScalarMap<S>,
    modulus: ScalarMap<S>,
}

impl<S> fmt::Debug for DriftModel<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriftModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .field("summary_dim", &self.summary_dim)
            .field("moment_order", &self.moment_order)
            .finish_non_exhaustive()
    }
}

/// Reusable buffers for drift evaluations along a path.
#[derive(Debug, Clone)]
pub struct Scratch<S> {
    pub(crate) sigma: Vec<S>,
    pub(crate) inter: Vec<S>,
}

pub struct DriftModelBuilder<S> {
    name: String,
    dim: usize,
    noise_dim: usize,
    summary_dim: usize,
    free_drift: Option<StateMap<S>>,
    diffusion: Option<StateMap<S>>,
    interaction: Option<(InteractionMap<S>, InteractionMap<S>)>,
    observable: Option<Observable<S>>,
    moment_order: MomentOrder,
    bound: Option<ScalarMap<S>>,
    modulus: Option<ScalarMap<S>>,
}

impl<S: Scalar> DriftModelBuilder<S> {
    pub fn free_drift(mut self, f: impl Fn(S, &[S], &mut [S]) + Send + Sync + 'static) -> Self {
        self.free_drift = Some(Arc::new(f));
        self
    }

    /// Row-major `dim x noise_dim` diffusion matrix.
    pub fn diffusion(mut self, f: impl Fn(S, &[S], &mut [S]) + Send + Sync + 'static) -> Self {
        self.diffusion = Some(Arc::new(f));
        self
    }

    /// `F(t, x, m)` with values in `R^noise_dim` and its gradient in `m`,
    /// row-major `noise_dim x summary_dim`.
    pub fn interaction(
        mut self,
        f: impl Fn(S, &[S], &[S], &mut [S]) + Send + Sync + 'static,
        grad: impl Fn(S, &[S], &[S], &mut [S]) + Send + Sync + 'static,
    ) -> Self {
        self.interaction = Some((Arc::new(f), Arc::new(grad)));
        self
    }

    pub fn observable(mut self, h: Observable<S>) -> Self {
        self.observable = Some(h);
        self
    }

    pub fn moment_order(mut self, k: MomentOrder) -> Self {
        self.moment_order = k;
        self
    }

    /// The bound process `K_t`.
    pub fn bound(mut self, f: impl Fn(S) -> S + Send + Sync + 'static) -> Self {
        self.bound = Some(Arc::new(f));
        self
    }

    /// The modulus `alpha`, increasing with `alpha(0+) = 0`.
    pub fn modulus(mut self, f: impl Fn(S) -> S + Send + Sync + 'static) -> Self {
        self.modulus = Some(Arc::new(f));
        self
    }

    pub fn build(self) -> Result<DriftModel<S>> {
        let (dim, m, n) = (self.dim, self.noise_dim, self.summary_dim);
        if dim == 0 || m == 0 || n == 0 {
            return Err(Error::Dimension("model dimensions must be positive".into()));
        }
        let diffusion = match self.diffusion {
            Some(s) => s,
            None if dim == m => Arc::new(move |_: S, _: &[S], out: &mut [S]| {
                out.iter_mut().for_each(|v| *v = S::zero());
                for i in 0..dim {
                    out[i * dim + i] = S::one();
                }
            }) as StateMap<S>,
            None => return Err(Error::Dimension("a non-square model needs an explicit diffusion".into())),
        };
        let observable = match self.observable {
            Some(h) => h,
            None if n == dim => Observable::identity(dim),
            None => return Err(Error::Dimension("summary dimension differs from state; pass h".into())),
        };
        if observable.in_dim() != dim || observable.out_dim() != n {
            return Err(Error::Dimension(format!(
                "h maps R^{} -> R^{}, expected R^{dim} -> R^{n}",
                observable.in_dim(),
                observable.out_dim()
            )));
        }
        let (interaction, interaction_grad) = self.interaction.unwrap_or_else(|| {
            let zero: InteractionMap<S> = Arc::new(|_, _, _, out: &mut [S]| out.iter_mut().for_each(|v| *v = S::zero()));
            (zero.clone(), zero)
        });
        let model = DriftModel {
            name: self.name,
            dim,
            noise_dim: m,
            summary_dim: n,
            free_drift: self
                .free_drift
                .unwrap_or_else(|| Arc::new(|_, _, out: &mut [S]| out.iter_mut().for_each(|v| *v = S::zero()))),
            diffusion,
            interaction,
            interaction_grad,
            observable,
            moment_order: self.moment_order,
            bound: self.bound.unwrap_or_else(|| Arc::new(|_| S::one())),
            modulus: self.modulus.unwrap_or_else(|| Arc::new(|r| r)),
        };
        model.check_gradient()?;
        Ok(model)
    }
}

impl<S: Scalar> DriftModel<S> {
    pub fn builder(name: impl Into<String>, dim: usize, noise_dim: usize, summary_dim: usize) -> DriftModelBuilder<S> {
        DriftModelBuilder {
            name: name.into(),
            dim,
            noise_dim,
            summary_dim,
            free_drift: None,
            diffusion: None,
            interaction: None,
            observable: None,
            moment_order: MomentOrder::new(1.0).unwrap(),
            bound: None,
            modulus: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn summary_dim(&self) -> usize {
        self.summary_dim
    }

    pub fn observable(&self) -> &Observable<S> {
        &self.observable
    }

    pub fn moment_order(&self) -> MomentOrder {
        self.moment_order
    }

    pub fn bound(&self, t: S) -> S {
        (self.bound)(t)
    }

    pub fn modulus(&self, r: S) -> S {
        (self.modulus)(r)
    }

    pub fn scratch(&self) -> Scratch<S> {
        Scratch {
            sigma: vec![S::zero(); self.dim * self.noise_dim],
            inter: vec![S::zero(); self.noise_dim],
        }
    }

    pub fn free_drift(&self, t: S, x: &[S], out: &mut [S]) {
        (self.free_drift)(t, x, out)
    }

    pub fn diffusion(&self, t: S, x: &[S], out: &mut [S]) {
        (self.diffusion)(t, x, out)
    }

    /// `F_t(x, m)`, the measure-dependent drift part `b^(1)` at summary `m`.
    pub fn interaction(&self, t: S, x: &[S], m: &[S], out: &mut [S]) {
        (self.interaction)(t, x, m, out)
    }

    pub fn interaction_grad(&self, t: S, x: &[S], m: &[S], out: &mut [S]) {
        (self.interaction_grad)(t, x, m, out)
    }

    /// Drift with the diffusion matrix left in `scratch.sigma`.
    pub(crate) fn drift_at_summary(&self, t: S, x: &[S], m: &[S], scratch: &mut Scratch<S>, out: &mut [S]) {
        self.free_drift(t, x, out);
        self.diffusion(t, x, &mut scratch.sigma);
        self.interaction(t, x, m, &mut scratch.inter);
        let cols = self.noise_dim;
        for (r, o) in out.iter_mut().enumerate() {
            let row = &scratch.sigma[r * cols..(r + 1) * cols];
            *o += row.iter().zip(&scratch.inter).fold(S::zero(), |a, (&s, &f)| a + s * f);
        }
    }

    /// `b_t(x, mu) = b0_t(x) + sigma_t(x) F_t(x, mu(h))`.
    pub fn drift(&self, t: S, x: &[S], mu: &ParticleMeasure<S>) -> Result<Vec<S>> {
        if x.len() != self.dim || mu.dim() != self.dim {
            return Err(Error::Dimension(format!("state and measure must live in R^{}", self.dim)));
        }
        let m = mu.observable_mean(&self.observable);
        let mut out = vec![S::zero(); self.dim];
        self.drift_at_summary(t, x, &m, &mut self.scratch(), &mut out);
        Ok(out)
    }

    /// `grad F_t(x, m) (h(y) - m)` for a given summary `m`.
    pub fn derivative_at_summary(&self, t: S, x: &[S], m: &[S], y: &[S]) -> Vec<S> {
        let n = self.summary_dim;
        let mut grad = vec![S::zero(); self.noise_dim * n];
        self.interaction_grad(t, x, m, &mut grad);
        let mut centered = self.observable.eval_vec(y);
        for (c, &mi) in centered.iter_mut().zip(m) {
            *c -= mi;
        }
        let mut out = vec![S::zero(); self.noise_dim];
        mat_vec(&grad, self.noise_dim, n, &centered, &mut out);
        out
    }

    /// Extrinsic derivative of `mu -> F_t(x, mu(h))` in the direction `delta_y`.
    pub fn extrinsic_drift_derivative(&self, t: S, x: &[S], mu: &ParticleMeasure<S>, y: &[S]) -> Vec<S> {
        let m = mu.observable_mean(&self.observable);
        self.derivative_at_summary(t, x, &m, y)
    }

    fn check_gradient(&self) -> Result<()> {
        let (n, m) = (self.summary_dim, self.noise_dim);
        let (step, tol) = if S::epsilon().as_f64() < 1e-10 { (1e-6, 1e-5) } else { (5e-3, 5e-2) };
        let h = S::lit(step);
        let mut plus = vec![S::zero(); m];
        let mut minus = vec![S::zero(); m];
        let mut grad = vec![S::zero(); m * n];
        for probe in 0..8u64 {
            let mut rng = stream(0, Purpose::Probe, probe);
            let t = S::lit(rng.random_range(0.0..1.0));
            let x: Vec<S> = (0..self.dim).map(|_| S::lit(rng.random_range(-2.0..2.0))).collect();
            let s: Vec<S> = (0..n).map(|_| S::lit(rng.random_range(-2.0..2.0))).collect();
            self.interaction_grad(t, &x, &s, &mut grad);
            for j in 0..n {
                let mut sp = s.clone();
                let mut sm = s.clone();
                sp[j] += h;
                sm[j] -= h;
                self.interaction(t, &x, &sp, &mut plus);
                self.interaction(t, &x, &sm, &mut minus);
                for i in 0..m {
                    let fd = ((plus[i] - minus[i]) / (h + h)).as_f64();
                    let g = grad[i * n + j].as_f64();
                    if !g.is_finite() || (fd - g).abs() > tol * g.abs().max(1.0) {
                        return Err(Error::GradientCheck(format!(
                            "model {}: entry ({i},{j}) is {g}, finite difference gives {fd}",
                            self.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Numerical spot-check of the growth bound and the modulus bound on the
    /// extrinsic derivative of the interaction drift.
    ///
    /// The infimum over centering constants is replaced by the `mu`-mean of
    /// the derivative, which vanishes for this drift family; the reported
    /// growth ratio is therefore an upper bound on the true one.
    pub fn validate_h2(&self, probe: &H2Probe<S>) -> Result<H2Report> {
        let d = self.dim;
        let k = self.moment_order;
        let mut measures: Vec<ParticleMeasure<S>> = Vec::new();
        for i in 0..probe.n_measures {
            let mut rng = stream(probe.seed, Purpose::Probe, 1_000_000 + i as u64);
            let atoms: Vec<Vec<S>> = (0..probe.atoms_per_measure.max(1))
                .map(|_| (0..d).map(|_| S::lit(rng.random_range(-probe.atom_radius..=probe.atom_radius))).collect())
                .collect();
            let raw: Vec<f64> = atoms.iter().map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let weights = raw.iter().map(|w| S::lit(w / total)).collect();
            measures.push(ParticleMeasure::new(atoms, weights)?);
        }
        measures.extend(probe.extra_measures.iter().cloned());
        if measures.iter().any(|mu| mu.dim() != d) {
            return Err(Error::Dimension("probe measures must live in the model's state space".into()));
        }
        let summaries: Vec<Vec<S>> = measures.iter().map(|mu| mu.observable_mean(&self.observable)).collect();
        let moments: Vec<f64> = measures.iter().map(|mu| mu.moment(k).as_f64()).collect();

        let mut report = H2Report::default();
        for p in 0..probe.n_points {
            let mut rng = stream(probe.seed, Purpose::Probe, p as u64);
            let t = rng.random_range(0.0..=probe.t_max);
            let x: Vec<S> = (0..d).map(|_| S::lit(rng.random_range(-probe.x_radius..=probe.x_radius))).collect();
            let y: Vec<S> = (0..d).map(|_| S::lit(rng.random_range(-probe.y_radius..=probe.y_radius))).collect();
            let st = S::lit(t);
            let big_k = self.bound(st).as_f64();
            let y_weight = pow_norm(&y, S::lit(k.value())).as_f64();
            let derivs: Vec<Vec<S>> = summaries.iter().map(|m| self.derivative_at_summary(st, &x, m, &y)).collect();
            for (i, mu) in measures.iter().enumerate() {
                // Centering at the mu-average of the derivative.
                let centre = self.centering(st, &x, mu, &summaries[i]);
                let dev: Vec<S> = derivs[i].iter().zip(&centre).map(|(&a, &c)| a - c).collect();
                let ratio = norm(&dev).as_f64() / (big_k * (1.0 + y_weight));
                report.evaluations += 1;
                if ratio > report.growth_ratio {
                    report.growth_ratio = ratio;
                    report.growth_worst = Some(ProbeRecord::new(t, &x, &y, &summaries[i], None));
                }
                for (j, nu) in measures.iter().enumerate().skip(i + 1) {
                    let dist = mu.weighted_tv(nu, k)?;
                    if dist <= S::zero() {
                        continue;
                    }
                    let diff: Vec<S> = derivs[i].iter().zip(&derivs[j]).map(|(&a, &b)| a - b).collect();
                    let denom = big_k * self.modulus(dist).as_f64() * (1.0 + y_weight + moments[i] + moments[j]);
                    let ratio = norm(&diff).as_f64() / denom;
                    if ratio > report.modulus_ratio {
                        report.modulus_ratio = ratio;
                        report.modulus_worst = Some(ProbeRecord::new(t, &x, &y, &summaries[i], Some(&summaries[j])));
                    }
                }
            }
        }
        report.growth_pass = report.growth_ratio <= 1.0;
        report.modulus_pass = report.modulus_ratio <= 1.0;
        report.pass = report.growth_pass && report.modulus_pass;
        Ok(report)
    }

    fn centering(&self, t: S, x: &[S], mu: &ParticleMeasure<S>, m: &[S]) -> Vec<S> {
        let mut acc = vec![S::zero(); self.noise_dim];
        for (y, w) in mu.iter() {
            for (a, v) in acc.iter_mut().zip(self.derivative_at_summary(t, x, m, y)) {
                *a += w * v;
            }
        }
        acc
    }
}

/// Sampling box for [`DriftModel::validate_h2`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar", default)]
pub struct H2Probe<S: Scalar> {
    pub n_points: usize,
    pub t_max: f64,
    pub x_radius: f64,
    pub y_radius: f64,
    pub atom_radius: f64,
    pub atoms_per_measure: usize,
    pub n_measures: usize,
    pub extra_measures: Vec<ParticleMeasure<S>>,
    pub seed: u64,
}

impl<S: Scalar> Default for H2Probe<S> {
    fn default() -> Self {
        Self {
            n_points: 64,
            t_max: 1.0,
            x_radius: 2.0,
            y_radius: 5.0,
            atom_radius: 1.0,
            atoms_per_measure: 3,
            n_measures: 8,
            extra_measures: Vec::new(),
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub mu_summary: Vec<f64>,
    pub nu_summary: Option<Vec<f64>>,
}

impl ProbeRecord {
    fn new<S: Scalar>(t: f64, x: &[S], y: &[S], mu: &[S], nu: Option<&[S]>) -> Self {
        let v = |s: &[S]| s.iter().map(|v| v.as_f64()).collect::<Vec<_>>();
        Self {
            t,
            x: v(x),
            y: v(y),
            mu_summary: v(mu),
            nu_summary: nu.map(v),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct H2Report {
    /// Max of `|D b1(x, mu)(y) - c| / (K_t (1 + |y|^k))`.
    pub growth_ratio: f64,
    /// Max of `|D b1(x, mu)(y) - D b1(x, nu)(y)| / (K_t alpha(||mu - nu||) (1 + |y|^k + mu(|.|^k) + nu(|.|^k)))`.
    pub modulus_ratio: f64,
    pub growth_pass: bool,
    pub modulus_pass: bool,
    pub pass: bool,
    pub evaluations: usize,
    pub growth_worst: Option<ProbeRecord>,
    pub modulus_worst: Option<ProbeRecord>,
}

/// Distribution-dependent stochastic Hamiltonian system on
/// `(position, momentum) in R^d1 x R^d2`:
///
/// ```text
/// dX1 = Z1_t(X) dt
/// dX2 = Z2_t(X, L(X)(h)) dt + sigma~_t(X) dB_t
/// ```
#[derive(Clone)]
pub struct HamiltonianModel<S> {
    pub name: String,
    pub position_dim: usize,
    pub momentum_dim: usize,
    pub summary_dim: usize,
    pub kinetic: StateMap<S>,
    pub force: InteractionMap<S>,
    /// Gradient of the force in the summary, row-major `d2 x n`.
    pub force_grad: InteractionMap<S>,
    /// Invertible `d2 x d2` noise block.
    pub noise: StateMap<S>,
    pub observable: Observable<S>,
    pub moment_order: MomentOrder,
}

impl<S: Scalar> HamiltonianModel<S> {
    pub fn dim(&self) -> usize {
        self.position_dim + self.momentum_dim
    }

    pub fn noise_block(&self, t: S, x: &[S]) -> Vec<S> {
        let mut out = vec![S::zero(); self.momentum_dim * self.momentum_dim];
        (self.noise)(t, x, &mut out);
        out
    }

    pub fn condition_number(&self, t: S, x: &[S]) -> Result<S> {
        linalg::condition_number(&self.noise_block(t, x), self.momentum_dim)
    }

    /// Largest noise-block condition number over random probe states.
    pub fn max_condition_number(&self, n_probes: usize, radius: f64, seed: u64) -> Result<f64> {
        let mut worst: f64 = 1.0;
        for p in 0..n_probes {
            let mut rng = stream(seed, Purpose::Probe, 2_000_000 + p as u64);
            let t = S::lit(rng.random_range(0.0..1.0));
            let x: Vec<S> = (0..self.dim()).map(|_| S::lit(rng.random_range(-radius..=radius))).collect();
            worst = worst.max(self.condition_number(t, &x)?.as_f64());
        }
        Ok(worst)
    }

    /// Embeds as `b0 = (Z1, 0)`, `sigma = diag(0, sigma~)`,
    /// `b1 = (0, sigma~^{-1} Z2)` with a `d`-dimensional Brownian motion.
    pub fn into_drift_model(self) -> Result<DriftModel<S>> {
        let cond = self.max_condition_number(16, 2.0, 11)?;
        log::debug!("{}: noise block condition number <= {cond:.3e}", self.name);
        let (d1, d2, n) = (self.position_dim, self.momentum_dim, self.summary_dim);
        let d = d1 + d2;
        let kinetic = self.kinetic.clone();
        let noise = self.noise.clone();
        let noise_f = self.noise.clone();
        let noise_g = self.noise.clone();
        let force = self.force.clone();
        let force_grad = self.force_grad.clone();
        DriftModel::builder(self.name, d, d, n)
            .free_drift(move |t, x, out| {
                kinetic(t, x, &mut out[..d1]);
                out[d1..].iter_mut().for_each(|v| *v = S::zero());
            })
            .diffusion(move |t, x, out| {
                out.iter_mut().for_each(|v| *v = S::zero());
                let mut block = vec![S::zero(); d2 * d2];
                noise(t, x, &mut block);
                for r in 0..d2 {
                    for c in 0..d2 {
                        out[(d1 + r) * d + d1 + c] = block[r * d2 + c];
                    }
                }
            })
            .interaction(
                move |t, x, m, out| {
                    let mut block = vec![S::zero(); d2 * d2];
                    noise_f(t, x, &mut block);
                    let mut z2 = vec![S::zero(); d2];
                    force(t, x, m, &mut z2);
                    out[..d1].iter_mut().for_each(|v| *v = S::zero());
                    match linalg::solve(&block, d2, &z2) {
                        Ok(v) => out[d1..].copy_from_slice(&v),
                        Err(_) => out[d1..].iter_mut().for_each(|v| *v = S::nan()),
                    }
                },
                move |t, x, m, out| {
                    let mut block = vec![S::zero(); d2 * d2];
                    noise_g(t, x, &mut block);
                    let mut g = vec![S::zero(); d2 * n];
                    force_grad(t, x, m, &mut g);
                    out[..d1 * n].iter_mut().for_each(|v| *v = S::zero());
                    match linalg::inverse(&block, d2) {
                        Ok(inv) => {
                            for r in 0..d2 {
                                for c in 0..n {
                                    out[(d1 + r) * n + c] = (0..d2).map(|j| inv[r * d2 + j] * g[j * n + c]).sum();
                                }
                            }
                        }
                        Err(_) => out[d1 * n..].iter_mut().for_each(|v| *v = S::nan()),
                    }
                },
            )
            .observable(self.observable)
            .moment_order(self.moment_order)
            .build()
    }
}

/// Built-in models selectable by name.
pub mod library {
    use super::*;

    fn neg_identity<S: Scalar>(_: S, x: &[S], out: &mut [S]) {
        for (o, &v) in out.iter_mut().zip(x) {
            *o = -v;
        }
    }

    /// `dX = (-X + a E[X]) dt + dW` in `R^dim`. The mean solves `m' = (a - 1) m`.
    pub fn mean_field_ou<S: Scalar>(a: f64, dim: usize) -> Result<DriftModel<S>> {
        let sa = S::lit(a);
        DriftModel::builder("mean-field-ou", dim, dim, dim)
            .free_drift(neg_identity)
            .interaction(
                move |_, _, m, out| {
                    for (o, &v) in out.iter_mut().zip(m) {
                        *o = sa * v;
                    }
                },
                move |_, _, _, out| {
                    out.iter_mut().for_each(|v| *v = S::zero());
                    for i in 0..dim {
                        out[i * dim + i] = sa;
                    }
                },
            )
            .moment_order(MomentOrder::new(1.0)?)
            .bound(move |_| S::lit(a.abs().max(f64::MIN_POSITIVE)))
            .build()
    }

    /// `dX = (-X + tanh(E[X])) dt + dW`, componentwise.
    pub fn tanh_interaction<S: Scalar>(dim: usize) -> Result<DriftModel<S>> {
        DriftModel::builder("tanh-interaction", dim, dim, dim)
            .free_drift(neg_identity)
            .interaction(
                |_, _, m: &[S], out: &mut [S]| {
                    for (o, &v) in out.iter_mut().zip(m) {
                        *o = v.tanh();
                    }
                },
                move |_, _, m, out| {
                    out.iter_mut().for_each(|v| *v = S::zero());
                    for i in 0..dim {
                        let c = m[i].cosh();
                        out[i * dim + i] = S::one() / (c * c);
                    }
                },
            )
            .moment_order(MomentOrder::new(1.0)?)
            .build()
    }

    /// `dX = (-X + E[X]^2) dt + dW` in one dimension; its derivative grows with the mean.
    pub fn quadratic_interaction<S: Scalar>() -> Result<DriftModel<S>> {
        DriftModel::builder("quadratic-interaction", 1, 1, 1)
            .free_drift(neg_identity)
            .interaction(|_, _, m, out| out[0] = m[0] * m[0], |_, _, m, out| out[0] = m[0] + m[0])
            .moment_order(MomentOrder::new(1.0)?)
            .build()
    }

    /// Drift independent of the law: `F = c`.
    pub fn constant_interaction<S: Scalar>(dim: usize, c: f64) -> Result<DriftModel<S>> {
        let sc = S::lit(c);
        DriftModel::builder("constant-interaction", dim, dim, dim)
            .free_drift(neg_identity)
            .interaction(
                move |_, _, _, out| out.iter_mut().for_each(|v| *v = sc),
                |_, _, _, out| out.iter_mut().for_each(|v| *v = S::zero()),
            )
            .build()
    }

    /// Kinetic Langevin dynamics with mean-field harmonic attraction:
    /// `dq = p dt`, `dp = (-friction p - stiffness q + coupling E[q]) dt + noise dB`.
    pub fn hamiltonian_kinetic<S: Scalar>(
        dim: usize,
        friction: f64,
        stiffness: f64,
        coupling: f64,
        noise: f64,
    ) -> Result<HamiltonianModel<S>> {
        if noise == 0.0 {
            return Err(Error::Singular);
        }
        let (fr, st, cp, sn) = (S::lit(friction), S::lit(stiffness), S::lit(coupling), S::lit(noise));
        Ok(HamiltonianModel {
            name: "hamiltonian-kinetic".into(),
            position_dim: dim,
            momentum_dim: dim,
            summary_dim: dim,
            kinetic: Arc::new(move |_, x, out| out.copy_from_slice(&x[dim..])),
            force: Arc::new(move |_, x, m, out| {
                for i in 0..dim {
                    out[i] = -fr * x[dim + i] - st * x[i] + cp * m[i];
                }
            }),
            force_grad: Arc::new(move |_, _, _, out| {
                out.iter_mut().for_each(|v| *v = S::zero());
                for i in 0..dim {
                    out[i * dim + i] = cp;
                }
            }),
            noise: Arc::new(move |_, _, out| {
                out.iter_mut().for_each(|v| *v = S::zero());
                for i in 0..dim {
                    out[i * dim + i] = sn;
                }
            }),
            observable: Observable::new(2 * dim, dim, move |x, out| out.copy_from_slice(&x[..dim])),
            moment_order: MomentOrder::new(1.0)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::library::*;
    use super::*;

    fn d1(x: f64) -> ParticleMeasure<f64> {
        ParticleMeasure::dirac(&[x])
    }

    #[test]
    fn ou_drift_examples() {
        let ou = mean_field_ou::<f64>(0.5, 1).unwrap();
        assert_eq!(ou.drift(0.0, &[2.0], &d1(0.0)).unwrap(), vec![-2.0]);
        assert_eq!(ou.drift(0.0, &[2.0], &d1(2.0)).unwrap(), vec![-1.0]);
    }

    #[test]
    fn hamiltonian_drift_is_kinetic_coupling() {
        let ham = HamiltonianModel::<f64> {
            name: "free".into(),
            position_dim: 1,
            momentum_dim: 1,
            summary_dim: 1,
            kinetic: Arc::new(|_, x, out| out[0] = x[1]),
            force: Arc::new(|_, _, _, out| out[0] = 0.0),
            force_grad: Arc::new(|_, _, _, out| out[0] = 0.0),
            noise: Arc::new(|_, _, out| out[0] = 1.0),
            observable: Observable::new(2, 1, |x, o| o[0] = x[0]),
            moment_order: MomentOrder::new(1.0).unwrap(),
        };
        let model = ham.into_drift_model().unwrap();
        let mu = ParticleMeasure::dirac(&[0.0, 0.0]);
        assert_eq!(model.drift(0.0, &[0.0, 3.0], &mu).unwrap(), vec![3.0, 0.0]);
    }

    #[test]
    fn hamiltonian_embedding_matches_direct_evaluation() {
        let ham = hamiltonian_kinetic::<f64>(2, 0.7, 1.3, 0.4, 2.0).unwrap();
        let model = ham.clone().into_drift_model().unwrap();
        let mu = ParticleMeasure::uniform(vec![vec![0.5, -1.0, 0.2, 0.1], vec![-0.3, 0.4, 1.0, -2.0]]).unwrap();
        let m = mu.observable_mean(&ham.observable);
        for x in [[0.1, 0.2, 0.3, 0.4], [-1.0, 2.0, 0.5, -0.5]] {
            let got = model.drift(0.25, &x, &mu).unwrap();
            let mut z1 = vec![0.0; 2];
            (ham.kinetic)(0.25, &x, &mut z1);
            let mut z2 = vec![0.0; 2];
            (ham.force)(0.25, &x, &m, &mut z2);
            for i in 0..2 {
                assert!((got[i] - z1[i]).abs() < 1e-14);
                assert!((got[2 + i] - z2[i]).abs() < 1e-14);
            }
        }
        assert!((ham.condition_number(0.0, &[0.0; 4]).unwrap() - 1.0).abs() < 1e-14);
        assert!(hamiltonian_kinetic::<f64>(1, 1.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn extrinsic_derivative_examples() {
        let ou = mean_field_ou::<f64>(0.5, 1).unwrap();
        assert_eq!(ou.extrinsic_drift_derivative(0.0, &[0.3], &d1(0.0), &[2.0]), vec![1.0]);
        let th = tanh_interaction::<f64>(1).unwrap();
        let sym = ParticleMeasure::uniform(vec![vec![-1.0], vec![1.0]]).unwrap();
        assert!((th.extrinsic_drift_derivative(0.0, &[0.0], &sym, &[1.7])[0] - 1.7).abs() < 1e-15);
        let c = constant_interaction::<f64>(1, 3.0).unwrap();
        assert_eq!(c.extrinsic_drift_derivative(0.0, &[0.0], &sym, &[4.0]), vec![0.0]);
    }

    #[test]
    fn tanh_derivative_matches_mixing_difference_quotient() {
        let th = tanh_interaction::<f64>(1).unwrap();
        let mu = ParticleMeasure::uniform(vec![vec![-1.0], vec![1.0]]).unwrap();
        let y = 0.8;
        let base = th.drift(0.0, &[0.0], &mu).unwrap()[0];
        let eps = 1e-6;
        let mixed = mu.mix(&d1(y), eps).unwrap();
        let q = (th.drift(0.0, &[0.0], &mixed).unwrap()[0] - base) / eps;
        assert!((q - y).abs() < 1e-5, "{q}");
    }

    #[test]
    fn derivative_is_centered() {
        let th = tanh_interaction::<f64>(1).unwrap();
        let mu = ParticleMeasure::new(vec![vec![-2.0], vec![0.5], vec![3.0]], vec![0.2, 0.5, 0.3]).unwrap();
        let mean: f64 = mu
            .iter()
            .map(|(y, w)| w * th.extrinsic_drift_derivative(0.1, &[0.4], &mu, y)[0])
            .sum();
        assert!(mean.abs() < 1e-10);
    }

    #[test]
    fn mixing_drift_difference_is_first_order() {
        let th = tanh_interaction::<f64>(1).unwrap();
        let mu = ParticleMeasure::uniform(vec![vec![-1.0], vec![0.0], vec![1.0]]).unwrap();
        let nu = ParticleMeasure::dirac(&[2.0]);
        let base = th.drift(0.0, &[0.3], &mu).unwrap()[0];
        let slope = 2.0; // sech^2(0) (nu(h) - mu(h))
        let mut errs = Vec::new();
        for eps in [1e-2, 1e-3, 1e-4] {
            let q = (th.drift(0.0, &[0.3], &mu.mix(&nu, eps).unwrap()).unwrap()[0] - base) / eps;
            errs.push((q - slope).abs());
        }
        assert!(errs[0] < 0.05 && errs[1] < errs[0] / 5.0 && errs[2] < errs[1] / 5.0, "{errs:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let bad = DriftModel::<f64>::builder("bad", 1, 1, 1)
            .interaction(|_, _, m, o| o[0] = m[0].sin(), |_, _, m, o| o[0] = m[0].sin())
            .build();
        assert!(matches!(bad, Err(Error::GradientCheck(_))));
    }

    #[test]
    fn dimension_errors() {
        let r = DriftModel::<f64>::builder("x", 2, 1, 2).build();
        assert!(matches!(r, Err(Error::Dimension(_))));
        let ou = mean_field_ou::<f64>(0.5, 1).unwrap();
        assert!(ou.drift(0.0, &[1.0, 2.0], &d1(0.0)).is_err());
    }

    #[test]
    fn ou_passes_validation_within_grid_search_bound() {
        let ou = mean_field_ou::<f64>(0.5, 1).unwrap();
        let report = ou.validate_h2(&H2Probe::default()).unwrap();
        // Growth ratio is |y - m| / (1 + |y|) here; grid search over the probe box.
        let mut grid_max: f64 = 0.0;
        for i in 0..=200 {
            let m = -1.0 + 2.0 * i as f64 / 200.0;
            for j in 0..=1000 {
                let y = -5.0 + 10.0 * j as f64 / 1000.0;
                grid_max = grid_max.max((y - m).abs() / (1.0 + y.abs()));
            }
        }
        assert!(grid_max <= 1.0);
        assert!(report.growth_ratio <= grid_max + 1e-12);
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn constant_interaction_has_zero_ratios() {
        let c = constant_interaction::<f64>(1, 1.0).unwrap();
        let r = c.validate_h2(&H2Probe::default()).unwrap();
        assert!(r.pass);
        assert_eq!(r.growth_ratio, 0.0);
        assert_eq!(r.modulus_ratio, 0.0);
    }

    #[test]
    fn quadratic_fails_growth_bound_at_large_mean() {
        let q = quadratic_interaction::<f64>().unwrap();
        let probe = H2Probe {
            extra_measures: vec![d1(100.0)],
            ..H2Probe::default()
        };
        let r = q.validate_h2(&probe).unwrap();
        assert!(!r.growth_pass);
        assert!(!r.pass);
        // At m = 100 the ratio is 200 |y - 100| / (1 + |y|) >= 200 * 95 / 6 on |y| <= 5.
        assert!(r.growth_ratio > 3000.0, "{}", r.growth_ratio);
        assert_eq!(r.growth_worst.unwrap().mu_summary, vec![100.0]);
    }
}
