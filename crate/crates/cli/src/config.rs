//! Experiment configuration: one JSON file, echoed back with every default
//! filled in so that a run directory is self-describing.

use std::path::{Path, PathBuf};

use ddsde::{library, DriftModel, EtaOptions, HamiltonianModel, H2Probe, Observable, ParticleMeasure, PicardOptions, Scalar, TimeGrid};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    MeanFieldOu {
        a: f64,
        #[serde(default = "one")]
        dim: usize,
    },
    Tanh {
        #[serde(default = "one")]
        dim: usize,
    },
    Quadratic,
    Constant {
        #[serde(default = "one")]
        dim: usize,
        c: f64,
    },
    HamiltonianKinetic {
        #[serde(default = "one")]
        dim: usize,
        friction: f64,
        stiffness: f64,
        coupling: f64,
        noise: f64,
    },
}

fn one() -> usize {
    1
}

impl ModelSpec {
    pub fn build<S: Scalar>(&self) -> ddsde::Result<DriftModel<S>> {
        match *self {
            ModelSpec::MeanFieldOu { a, dim } => library::mean_field_ou(a, dim),
            ModelSpec::Tanh { dim } => library::tanh_interaction(dim),
            ModelSpec::Quadratic => library::quadratic_interaction(),
            ModelSpec::Constant { dim, c } => library::constant_interaction(dim, c),
            ModelSpec::HamiltonianKinetic {
                dim,
                friction,
                stiffness,
                coupling,
                noise,
            } => library::hamiltonian_kinetic(dim, friction, stiffness, coupling, noise)?.into_drift_model(),
        }
    }

    /// The position/momentum form, for Hamiltonian models only.
    pub fn hamiltonian<S: Scalar>(&self) -> ddsde::Result<HamiltonianModel<S>> {
        match *self {
            ModelSpec::HamiltonianKinetic {
                dim,
                friction,
                stiffness,
                coupling,
                noise,
            } => library::hamiltonian_kinetic(dim, friction, stiffness, coupling, noise),
            _ => Err(ddsde::Error::InvalidArgument("not a Hamiltonian model".into())),
        }
    }
}

/// A measure given inline or read from a `.json` or `.csv` file. Relative
/// paths are resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeasureSpec {
    Inline {
        atoms: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
    },
    File {
        file: PathBuf,
    },
}

impl MeasureSpec {
    fn load(&self, base: &Path) -> Result<ParticleMeasure<f64>, CliError> {
        match self {
            MeasureSpec::Inline { atoms, weights } => {
                let w = weights.clone().unwrap_or_else(|| vec![1.0 / atoms.len().max(1) as f64; atoms.len()]);
                Ok(ParticleMeasure::new(atoms.clone(), w)?)
            }
            MeasureSpec::File { file } => {
                let path = if file.is_absolute() { file.clone() } else { base.join(file) };
                let text = std::fs::read_to_string(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                match path.extension().and_then(|e| e.to_str()) {
                    Some("csv") => Ok(ParticleMeasure::read_csv(text.as_bytes())?),
                    _ => Ok(ParticleMeasure::from_json(&text)?),
                }
            }
        }
    }

    fn inline(mu: &ParticleMeasure<f64>) -> Self {
        MeasureSpec::Inline {
            atoms: mu.iter().map(|(x, _)| x.to_vec()).collect(),
            weights: Some(mu.weights().to_vec()),
        }
    }
}

pub fn measure<S: Scalar>(mu: &ParticleMeasure<f64>) -> ddsde::Result<ParticleMeasure<S>> {
    ParticleMeasure::new(
        mu.iter().map(|(x, _)| x.iter().map(|&v| S::lit(v)).collect()).collect(),
        mu.weights().iter().map(|&w| S::lit(w)).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bounded {
    Tanh,
    Sin,
    Cos,
    Gaussian,
    /// `1{x > 0}`.
    Step,
}

/// The test function `f`, always evaluated on one state component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FSpec {
    Id {
        #[serde(default)]
        component: usize,
    },
    /// `|x|^p`.
    Power {
        p: f64,
        #[serde(default)]
        component: usize,
    },
    Bounded {
        name: Bounded,
        #[serde(default)]
        component: usize,
    },
    /// Piecewise-linear interpolation through `(x, y)`, constant outside.
    Table {
        x: Vec<f64>,
        y: Vec<f64>,
        #[serde(default)]
        component: usize,
    },
}

impl Default for FSpec {
    fn default() -> Self {
        FSpec::Id { component: 0 }
    }
}

impl FSpec {
    fn component(&self) -> usize {
        match *self {
            FSpec::Id { component } | FSpec::Power { component, .. } | FSpec::Bounded { component, .. } | FSpec::Table { component, .. } => {
                component
            }
        }
    }

    fn check(&self, dim: usize) -> Result<(), CliError> {
        if self.component() >= dim {
            return Err(CliError::Config(format!("f component {} out of range for dimension {dim}", self.component())));
        }
        if let FSpec::Table { x, y, .. } = self {
            if x.is_empty() || x.len() != y.len() || x.windows(2).any(|w| w[0] >= w[1]) {
                return Err(CliError::Config("table f needs matching, strictly increasing x and y".into()));
            }
        }
        if let FSpec::Power { p, .. } = self {
            if !p.is_finite() || *p < 0.0 {
                return Err(CliError::Config("power f needs a finite p >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn build<S: Scalar>(&self, dim: usize) -> Observable<S> {
        let i = self.component();
        match self.clone() {
            FSpec::Id { .. } => Observable::new(dim, 1, move |x, o| o[0] = x[i]),
            FSpec::Power { p, .. } => {
                let sp = S::lit(p);
                if p == 2.0 {
                    Observable::new(dim, 1, move |x: &[S], o: &mut [S]| o[0] = x[i] * x[i])
                } else {
                    Observable::new(dim, 1, move |x: &[S], o: &mut [S]| o[0] = x[i].abs().powf(sp))
                }
            }
            FSpec::Bounded { name, .. } => Observable::new(dim, 1, move |x: &[S], o: &mut [S]| {
                let v = x[i];
                o[0] = match name {
                    Bounded::Tanh => v.tanh(),
                    Bounded::Sin => v.sin(),
                    Bounded::Cos => v.cos(),
                    Bounded::Gaussian => (-v * v).exp(),
                    Bounded::Step => {
                        if v > S::zero() {
                            S::one()
                        } else {
                            S::zero()
                        }
                    }
                }
            }),
            FSpec::Table { x: xs, y: ys, .. } => {
                let xs: Vec<S> = xs.into_iter().map(S::lit).collect();
                let ys: Vec<S> = ys.into_iter().map(S::lit).collect();
                Observable::new(dim, 1, move |x: &[S], o: &mut [S]| o[0] = interpolate(&xs, &ys, x[i]))
            }
        }
    }
}

fn interpolate<S: Scalar>(xs: &[S], ys: &[S], v: S) -> S {
    let r = xs.partition_point(|&a| a <= v);
    if r == 0 {
        return ys[0];
    }
    if r == xs.len() {
        return ys[r - 1];
    }
    let (x0, x1, y0, y1) = (xs[r - 1], xs[r], ys[r - 1], ys[r]);
    y0 + (y1 - y0) * (v - x0) / (x1 - x0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecaySpec {
    pub times: Vec<f64>,
    /// Step of the probe grid; the experiment grid's step when absent.
    pub dt: Option<f64>,
}

impl Default for DecaySpec {
    fn default() -> Self {
        Self {
            times: vec![0.01, 0.04, 0.16],
            dt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationSpec {
    /// Re-simulate the solved flow and compare means and moments.
    pub flow_check: bool,
    /// Re-evaluate the weight equation on fresh paths (needs `nu`).
    pub eta_check: bool,
    /// Seed of the fresh paths; `seed + 1` when absent.
    pub check_seed: Option<u64>,
}

impl Default for ValidationSpec {
    fn default() -> Self {
        Self {
            flow_check: true,
            eta_check: true,
            check_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub precision: Precision,
    pub mu: MeasureSpec,
    #[serde(default)]
    pub nu: Option<MeasureSpec>,
    #[serde(default)]
    pub f: FSpec,
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub seed: u64,
    /// Evaluation time; the horizon when absent.
    #[serde(default)]
    pub t: Option<f64>,
    #[serde(default)]
    pub picard: PicardOptions,
    #[serde(default)]
    pub eta: EtaOptions,
    #[serde(default = "default_eps")]
    pub fd_eps: Vec<f64>,
    #[serde(default)]
    pub decay: DecaySpec,
    #[serde(default)]
    pub probe: H2Probe<f64>,
    #[serde(default)]
    pub validation: ValidationSpec,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// The probe grid, checking that every decay time lies on it.
pub fn decay_grid(times: &[f64], dt: f64) -> ddsde::Result<TimeGrid> {
    let grid = TimeGrid::with_step(*times.last().expect("non-empty"), dt)?;
    for &t in times {
        grid.index_of(t)?;
    }
    Ok(grid)
}

fn default_eps() -> Vec<f64> {
    vec![0.1, 0.05, 0.025]
}

/// A checked configuration with every default made explicit and file
/// measures inlined.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub mu: ParticleMeasure<f64>,
    pub nu: Option<ParticleMeasure<f64>>,
    pub hash: String,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("malformed config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Resolved, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text)?.resolve(&base)
    }

    /// Fills defaults, inlines measures and checks that every subcommand's
    /// inputs can be built.
    pub fn resolve(mut self, base: &Path) -> Result<Resolved, CliError> {
        let model = self.model.build::<f64>()?;
        let d = model.dim();
        let mu = self.mu.load(base)?;
        let nu = self.nu.as_ref().map(|n| n.load(base)).transpose()?;
        for m in std::iter::once(&mu).chain(nu.as_ref()) {
            if m.dim() != d {
                return Err(CliError::Config(format!("measure dimension {} does not match model dimension {d}", m.dim())));
            }
        }
        self.f.check(d)?;
        if self.n_paths < 2 {
            return Err(CliError::Config("n_paths must be at least 2".into()));
        }
        let t = self.t.unwrap_or(self.grid.horizon());
        self.grid.index_of(t)?;
        self.t = Some(t);
        self.picard.lambda = Some(self.picard.lambda_for(&self.grid));
        self.picard.stride = Some(self.picard.stride_for(&self.grid, self.n_paths, d));
        if !(self.picard.tol > 0.0 && self.eta.tol > 0.0) || self.picard.max_iter == 0 || self.eta.max_iter == 0 {
            return Err(CliError::Config("tolerances must be positive and iteration caps non-zero".into()));
        }
        if self.fd_eps.is_empty() || self.fd_eps.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
            return Err(CliError::Config("fd_eps must be non-empty and lie in (0, 1)".into()));
        }
        let times = &self.decay.times;
        if times.is_empty() || times[0] <= 0.0 || times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CliError::Config("decay times must be positive and increasing".into()));
        }
        let fits = |dt: f64| decay_grid(times, dt).is_ok();
        let dt = self.decay.dt.unwrap_or_else(|| [self.grid.dt(), 1e-3].into_iter().find(|&dt| fits(dt)).unwrap_or(self.grid.dt()));
        self.decay.dt = Some(dt);
        self.validation.check_seed = Some(self.validation.check_seed.unwrap_or(self.seed.wrapping_add(1)));
        self.mu = MeasureSpec::inline(&mu);
        self.nu = nu.as_ref().map(MeasureSpec::inline);
        let hash = self.hash();
        Ok(Resolved { config: self, mu, nu, hash })
    }

    /// SHA-256 of the canonical JSON, ignoring where outputs go.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn t(&self) -> f64 {
        self.t.unwrap_or(self.grid.horizon())
    }
}

impl Resolved {
    pub fn nu(&self) -> Result<&ParticleMeasure<f64>, CliError> {
        self.nu.as_ref().ok_or_else(|| CliError::Config("this command needs a direction measure `nu`".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const OU: &str = r#"{
        "model": {"kind": "mean-field-ou", "a": 0.5},
        "mu": {"atoms": [[0.0]]},
        "nu": {"atoms": [[1.0]]},
        "grid": {"horizon": 1.0, "n_steps": 10},
        "n_paths": 100,
        "seed": 1
    }"#;

    #[test]
    fn defaults_are_materialized() {
        let r = ExperimentConfig::parse(OU).unwrap().resolve(Path::new(".")).unwrap();
        let c = &r.config;
        assert_eq!(c.t, Some(1.0));
        assert_eq!(c.picard.lambda, Some(10.0));
        assert_eq!(c.picard.stride, Some(1));
        assert_eq!(c.fd_eps, vec![0.1, 0.05, 0.025]);
        assert_eq!(c.decay.dt, Some(1e-3));
        assert_eq!(c.validation.check_seed, Some(2));
        assert_eq!(c.mu, MeasureSpec::Inline { atoms: vec![vec![0.0]], weights: Some(vec![1.0]) });
    }

    #[test]
    fn round_trip_and_hash_stability() {
        let r = ExperimentConfig::parse(OU).unwrap().resolve(Path::new(".")).unwrap();
        let text = serde_json::to_string_pretty(&r.config).unwrap();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, r.config);
        let again = back.clone().resolve(Path::new(".")).unwrap();
        assert_eq!(again.hash, r.hash);
        let mut moved = r.config.clone();
        moved.output_dir = Some("elsewhere".into());
        assert_eq!(moved.hash(), r.hash);
        let mut reseeded = r.config.clone();
        reseeded.seed = 2;
        assert_ne!(reseeded.hash(), r.hash);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(ExperimentConfig::parse("{").is_err());
        assert!(ExperimentConfig::parse(&OU.replace("\"seed\": 1", "\"seed\": 1, \"typo\": 3")).is_err());
        let off_grid = OU.replace("\"seed\": 1", "\"seed\": 1, \"t\": 0.55");
        assert!(ExperimentConfig::parse(&off_grid).unwrap().resolve(Path::new(".")).is_err());
        let wrong_dim = OU.replace("[[1.0]]", "[[1.0, 2.0]]");
        assert!(ExperimentConfig::parse(&wrong_dim).unwrap().resolve(Path::new(".")).is_err());
        let bad_grid = OU.replace("\"n_steps\": 10", "\"n_steps\": 0");
        assert!(ExperimentConfig::parse(&bad_grid).is_err());
    }

    #[test]
    fn observables() {
        let x = [0.5_f64, -2.0];
        let eval = |f: FSpec| f.build::<f64>(2).eval_vec(&x)[0];
        assert_eq!(eval(FSpec::Id { component: 1 }), -2.0);
        assert_eq!(eval(FSpec::Power { p: 2.0, component: 1 }), 4.0);
        assert_eq!(eval(FSpec::Power { p: 3.0, component: 1 }), 8.0);
        assert_eq!(eval(FSpec::Bounded { name: Bounded::Step, component: 0 }), 1.0);
        let table = |v: f64| {
            let f = FSpec::Table { x: vec![0.0, 1.0], y: vec![0.0, 2.0], component: 0 }.build::<f64>(1);
            f.eval_vec(&[v])[0]
        };
        assert_eq!(table(-1.0), 0.0);
        assert_eq!(table(0.25), 0.5);
        assert_eq!(table(3.0), 2.0);
    }
}
