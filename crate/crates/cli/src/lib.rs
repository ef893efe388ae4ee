//! Configuration-driven front end for the `ddsde` estimators.
//!
//! Each subcommand reads one JSON config, writes its artifacts into an
//! output directory and maps the outcome to an exit code:
//! `0` success, `1` configuration error (nothing written), `2` a validation
//! check failed, `3` an iteration did not converge.

pub mod config;
pub mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ddsde::{
    eta_residual, extrinsic_derivative_with, finite_difference_derivative_with, picard_flow, self_consistency,
    simulate_decoupled_with, small_time_decay_probe, solve_eta, EstimatorOptions, InitialCondition, Recording, Scalar,
};
use serde::Serialize;

pub use config::{ExperimentConfig, Resolved};
pub use report::{compare_report, CompareReport, CompareRow, Seeded, Stamped};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("config hashes differ: {left} vs {right}")]
    HashMismatch { left: String, right: String },
    #[error(transparent)]
    Core(#[from] ddsde::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use ddsde::Error as E;
        match self {
            CliError::Core(E::NonConvergence { .. } | E::AllPathsInvalid { .. } | E::BlowUp(_)) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    SolveFlow,
    EstimateDerivative,
    CompareOracles,
    ValidateModel,
    DecayProbe,
}

/// What a finished command reports back: `false` means a check failed.
pub struct Outcome {
    pub pass: bool,
    pub summary: String,
}

#[derive(Serialize)]
struct RunInfo<'a> {
    command: Command,
    config_hash: &'a str,
    seed: u64,
    workers: usize,
    started_unix: f64,
    finished_unix: f64,
    exit_code: i32,
    version: &'static str,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Runs one subcommand and returns its exit code. Diagnostics go to
/// standard error.
pub fn run(command: Command, config_path: &Path, output: Option<&Path>) -> i32 {
    let started = now();
    let resolved = match ExperimentConfig::load(config_path) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let Some(out) = output.map(Path::to_path_buf).or_else(|| resolved.config.output_dir.clone()) else {
        eprintln!("error: configuration error: no output directory (use -o or output_dir)");
        return 1;
    };
    if let Err(e) = precheck(command, &resolved) {
        eprintln!("error: {e}");
        return 1;
    }
    let result = fs::create_dir_all(&out)
        .map_err(CliError::from)
        .and_then(|_| write_json(&out.join("config.json"), &resolved.config))
        .and_then(|_| execute(command, &resolved, &out));
    let code = match &result {
        Ok(o) => {
            eprintln!("{}", o.summary);
            if o.pass {
                0
            } else {
                2
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Core(ddsde::Error::NonConvergence { history, .. }) = e {
                eprintln!("distance history: {history:?}");
            }
            e.exit_code()
        }
    };
    let info = RunInfo {
        command,
        config_hash: &resolved.hash,
        seed: resolved.config.seed,
        workers: rayon::current_num_threads(),
        started_unix: started,
        finished_unix: now(),
        exit_code: code,
        version: env!("CARGO_PKG_VERSION"),
    };
    if out.is_dir() {
        if let Err(e) = write_json(&out.join("run.json"), &info) {
            eprintln!("warning: could not write run.json: {e}");
        }
    }
    code
}

fn precheck(command: Command, r: &Resolved) -> Result<(), CliError> {
    match command {
        Command::EstimateDerivative | Command::CompareOracles => r.nu().map(|_| ()),
        Command::DecayProbe => {
            r.nu()?;
            config::decay_grid(&r.config.decay.times, r.config.decay.dt.unwrap_or(r.config.grid.dt()))?;
            Ok(())
        }
        Command::SolveFlow | Command::ValidateModel => Ok(()),
    }
}

pub fn execute(command: Command, r: &Resolved, out: &Path) -> Result<Outcome, CliError> {
    match r.config.precision {
        config::Precision::F64 => execute_as::<f64>(command, r, out),
        config::Precision::F32 => execute_as::<f32>(command, r, out),
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Core(e.into()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn stamp<T>(r: &Resolved, data: T) -> Stamped<T> {
    Stamped {
        config_hash: r.hash.clone(),
        data,
    }
}

fn stamp_seeded<T>(r: &Resolved, data: T) -> Stamped<Seeded<T>> {
    stamp(r, Seeded { seed: r.config.seed, data })
}

#[derive(Serialize)]
struct EstimateArtifact<'a> {
    #[serde(flatten)]
    estimate: &'a ddsde::DerivativeEstimate,
    picard: &'a ddsde::PicardTrace,
    eta: &'a ddsde::PicardDiagnostics,
}

fn execute_as<S: Scalar>(command: Command, r: &Resolved, out: &Path) -> Result<Outcome, CliError> {
    let c = &r.config;
    let model = c.model.build::<S>()?;
    let mu = config::measure::<S>(&r.mu)?;
    let f = c.f.build::<S>(model.dim());
    let opts = EstimatorOptions {
        picard: c.picard,
        eta: c.eta,
    };
    let file = |name: &str| -> PathBuf { out.join(name) };
    match command {
        Command::SolveFlow => {
            let result = picard_flow(&model, &mu, &c.grid, c.n_paths, c.seed, &c.picard);
            let (flow, trace) = match result {
                Ok(v) => v,
                Err(e) => {
                    if let ddsde::Error::NonConvergence { iterations, history, .. } = &e {
                        #[derive(Serialize)]
                        struct Failed<'a> {
                            converged: bool,
                            iterations: usize,
                            distances: &'a [f64],
                        }
                        let failed = Failed {
                            converged: false,
                            iterations: *iterations,
                            distances: history,
                        };
                        write_json(&file("flow.json"), &stamp_seeded(r, failed))?;
                    }
                    return Err(e.into());
                }
            };
            let mut w = fs::File::create(file("flow.csv"))?;
            flow.write_csv(&mut w)?;
            #[derive(Serialize)]
            struct FlowArtifact {
                trace: ddsde::PicardTrace,
                flow: ddsde::mckean::FlowMeta,
            }
            write_json(&file("flow.json"), &stamp_seeded(r, FlowArtifact { trace: trace.clone(), flow: flow.meta() }))?;
            Ok(Outcome {
                pass: true,
                summary: format!("flow converged in {} iterations (last distance {:.3e})", trace.iterations, trace.distances.last().copied().unwrap_or(0.0)),
            })
        }
        Command::EstimateDerivative => {
            let nu = config::measure::<S>(r.nu()?)?;
            let run = extrinsic_derivative_with(&model, &mu, &nu, &f, &[c.t()], &c.grid, c.n_paths, c.seed, &opts)?;
            let e = &run.estimates[0];
            let artifact = EstimateArtifact {
                estimate: e,
                picard: &run.picard,
                eta: &run.eta_diagnostics,
            };
            write_json(&file("estimate.json"), &stamp(r, artifact))?;
            e.write_csv(fs::File::create(file("estimate.csv"))?, &r.hash)?;
            run.eta.write_summary_csv(fs::File::create(file("eta.csv"))?)?;
            Ok(Outcome {
                pass: true,
                summary: format!("estimate {:.6} +- {:.2e} (semigroup {:.6}, martingale {:.6})", e.value, e.stderr, e.term_semigroup, e.term_martingale),
            })
        }
        Command::CompareOracles => {
            let nu = config::measure::<S>(r.nu()?)?;
            let run = extrinsic_derivative_with(&model, &mu, &nu, &f, &[c.t()], &c.grid, c.n_paths, c.seed, &opts)?;
            let e = &run.estimates[0];
            write_json(
                &file("estimate.json"),
                &stamp(
                    r,
                    EstimateArtifact {
                        estimate: e,
                        picard: &run.picard,
                        eta: &run.eta_diagnostics,
                    },
                ),
            )?;
            let fd = finite_difference_derivative_with(&model, &mu, &nu, &f, &[c.t()], &c.fd_eps, &c.grid, c.n_paths, c.seed, &c.picard)?
                .remove(0);
            let fd = stamp(r, fd);
            write_json(&file("fd.json"), &fd)?;
            let report = compare_report(&stamp(r, e.clone()), &fd)?;
            report.write_csv(fs::File::create(file("compare.csv"))?)?;
            fs::write(file("compare.md"), report.markdown())?;
            Ok(Outcome {
                pass: report.pass,
                summary: report.markdown(),
            })
        }
        Command::ValidateModel => validate(r, &model, &mu, out),
        Command::DecayProbe => {
            let nu = config::measure::<S>(r.nu()?)?;
            let dt = c.decay.dt.unwrap_or(c.grid.dt());
            let probe = small_time_decay_probe(&model, &mu, &nu, &f, &c.decay.times, dt, c.n_paths, c.seed, &opts)?;
            let mut text = String::from("t,term_martingale,stderr_martingale,config_hash,seed\n");
            for row in &probe.rows {
                text.push_str(&format!("{},{},{},{},{}\n", row.t, row.term_martingale, row.stderr_martingale, r.hash, c.seed));
            }
            fs::write(file("decay.csv"), text)?;
            write_json(&file("decay.json"), &stamp_seeded(r, &probe))?;
            Ok(Outcome {
                pass: probe.vanishes,
                summary: match probe.exponent {
                    Some(e) => format!("martingale term decays with exponent {e:.3}"),
                    None => "martingale term has zero entries; no exponent fitted".into(),
                },
            })
        }
    }
}

#[derive(Serialize)]
struct Validation {
    pass: bool,
    structural: ddsde::H2Report,
    #[serde(skip_serializing_if = "Option::is_none")]
    noise_condition_number: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    flow: Option<FlowCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eta: Option<EtaCheck>,
    notes: Vec<String>,
}

#[derive(Serialize)]
struct FlowCheck {
    pass: bool,
    worst_ratio: f64,
    picard: ddsde::PicardTrace,
}

#[derive(Serialize)]
struct EtaCheck {
    pass: bool,
    worst_ratio: f64,
    iterations: usize,
}

fn validate<S: Scalar>(r: &Resolved, model: &ddsde::DriftModel<S>, mu: &ddsde::ParticleMeasure<S>, out: &Path) -> Result<Outcome, CliError> {
    let c = &r.config;
    let probe = ddsde::H2Probe::<S> {
        n_points: c.probe.n_points,
        t_max: c.probe.t_max,
        x_radius: c.probe.x_radius,
        y_radius: c.probe.y_radius,
        atom_radius: c.probe.atom_radius,
        atoms_per_measure: c.probe.atoms_per_measure,
        n_measures: c.probe.n_measures,
        extra_measures: c.probe.extra_measures.iter().map(config::measure::<S>).collect::<ddsde::Result<_>>()?,
        seed: c.probe.seed,
    };
    let structural = model.validate_h2(&probe)?;
    let mut v = Validation {
        pass: structural.pass,
        structural,
        noise_condition_number: None,
        flow: None,
        eta: None,
        notes: Vec::new(),
    };
    if let config::ModelSpec::HamiltonianKinetic { .. } = c.model {
        if let Ok(h) = c.model.hamiltonian::<S>() {
            v.noise_condition_number = Some(h.max_condition_number(16, 2.0, 11)?);
        }
    }
    if !v.pass {
        v.notes.push("structural bounds violated; flow and weight checks skipped".into());
    } else if c.validation.flow_check || c.validation.eta_check {
        let check_seed = c.validation.check_seed.unwrap_or(c.seed.wrapping_add(1));
        let (flow, picard) = picard_flow(model, mu, &c.grid, c.n_paths, c.seed, &c.picard)?;
        if c.validation.flow_check {
            let rep = self_consistency(model, &flow, mu, c.n_paths, check_seed)?;
            v.pass &= rep.pass;
            v.flow = Some(FlowCheck {
                pass: rep.pass,
                worst_ratio: rep.worst_ratio,
                picard: picard.clone(),
            });
        }
        match (&r.nu, c.validation.eta_check) {
            (Some(nu), true) => {
                let nu = config::measure::<S>(nu)?;
                let paths = simulate_decoupled_with(model, &flow, &InitialCondition::Law(mu.clone()), &c.grid, c.n_paths, c.seed, &Recording::Indices(vec![]))?;
                let (eta, diag) = solve_eta(model, &flow, &paths, &nu, &c.eta)?;
                let rep = eta_residual(&eta, mu, &nu, c.n_paths, check_seed)?;
                v.pass &= rep.pass;
                v.eta = Some(EtaCheck {
                    pass: rep.pass,
                    worst_ratio: rep.worst_ratio,
                    iterations: diag.iterations,
                });
            }
            (None, true) => v.notes.push("no direction measure; weight check skipped".into()),
            _ => {}
        }
    }
    write_json(&out.join("validation.json"), &stamp_seeded(r, &v))?;
    let summary = format!(
        "{}: growth ratio {:.3e}, modulus ratio {:.3e}{}{}",
        if v.pass { "PASS" } else { "FAIL" },
        v.structural.growth_ratio,
        v.structural.modulus_ratio,
        v.flow.as_ref().map_or(String::new(), |f| format!(", flow consistency {:.2}", f.worst_ratio)),
        v.eta.as_ref().map_or(String::new(), |e| format!(", weight residual {:.2}", e.worst_ratio)),
    );
    Ok(Outcome { pass: v.pass, summary })
}
