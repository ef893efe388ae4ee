use std::io::Write;

use ddsde::{DerivativeEstimate, FiniteDifferenceResult};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// An output payload stamped with the configuration it came from. The
/// payload carries its own `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    #[serde(flatten)]
    pub data: T,
}

/// Payloads without a seed of their own get one alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeded<T> {
    pub seed: u64,
    #[serde(flatten)]
    pub data: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    pub value: f64,
    pub stderr: f64,
    /// Against the Bismut estimate, with errors combined in quadrature.
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub config_hash: String,
    pub seed: u64,
    pub t: f64,
    pub rows: Vec<CompareRow>,
    /// Bismut against the extrapolated quotient.
    pub z: f64,
    pub pass: bool,
}

fn z_score(a: f64, sa: f64, b: f64, sb: f64) -> f64 {
    let d = a - b;
    if d == 0.0 {
        return 0.0;
    }
    d / sa.hypot(sb)
}

/// Tabulates the Bismut estimate against the difference quotients.
/// Passes iff the extrapolated quotient is within three combined standard
/// errors.
pub fn compare_report(
    bismut: &Stamped<DerivativeEstimate>,
    fd: &Stamped<FiniteDifferenceResult>,
) -> Result<CompareReport, CliError> {
    if bismut.config_hash != fd.config_hash {
        return Err(CliError::HashMismatch {
            left: bismut.config_hash.clone(),
            right: fd.config_hash.clone(),
        });
    }
    let (b, f) = (&bismut.data, &fd.data);
    if b.t != f.t {
        return Err(CliError::Config(format!("estimates at different times: {} and {}", b.t, f.t)));
    }
    let mut rows = vec![CompareRow {
        method: "bismut".into(),
        value: b.value,
        stderr: b.stderr,
        z: 0.0,
    }];
    rows.extend(f.per_eps.iter().map(|q| CompareRow {
        method: format!("fd eps={}", q.eps),
        value: q.value,
        stderr: q.stderr,
        z: z_score(q.value, q.stderr, b.value, b.stderr),
    }));
    let z = z_score(f.extrapolated, f.extrapolated_stderr, b.value, b.stderr);
    rows.push(CompareRow {
        method: "fd richardson".into(),
        value: f.extrapolated,
        stderr: f.extrapolated_stderr,
        z,
    });
    Ok(CompareReport {
        config_hash: bismut.config_hash.clone(),
        seed: b.seed,
        t: b.t,
        rows,
        z,
        pass: z.abs() <= 3.0,
    })
}

impl CompareReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "method,t,value,stderr,z,config_hash,seed")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{},{},{}", r.method, self.t, r.value, r.stderr, r.z, self.config_hash, self.seed)?;
        }
        Ok(())
    }

    pub fn markdown(&self) -> String {
        let mut s = format!("config `{}`, seed {}, t = {}\n\n", self.config_hash, self.seed, self.t);
        s.push_str("| method | value | stderr | z |\n|---|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!("| {} | {:.6} | {:.2e} | {:.2} |\n", r.method, r.value, r.stderr, r.z));
        }
        s.push_str(&format!("\n**{}** (|z| = {:.2})\n", if self.pass { "PASS" } else { "FAIL" }, self.z.abs()));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ddsde::QuotientEstimate;

    fn est(value: f64) -> DerivativeEstimate {
        DerivativeEstimate {
            value,
            stderr: 0.01,
            term_semigroup: value,
            term_martingale: 0.0,
            stderr_semigroup: 0.01,
            stderr_martingale: 0.0,
            n_paths: 10,
            n_valid: 10,
            seed: 1,
            t: 1.0,
        }
    }

    fn fd(value: f64) -> FiniteDifferenceResult {
        FiniteDifferenceResult {
            t: 1.0,
            per_eps: vec![QuotientEstimate { eps: 0.1, value, stderr: 0.01 }],
            extrapolated: value,
            extrapolated_stderr: 0.01,
            n_paths: 10,
            seed: 1,
        }
    }

    fn stamp<T>(hash: &str, data: T) -> Stamped<T> {
        Stamped { config_hash: hash.into(), data }
    }

    #[test]
    fn identical_values_pass_with_zero_z() {
        let r = compare_report(&stamp("h", est(0.6)), &stamp("h", fd(0.6))).unwrap();
        assert_eq!(r.z, 0.0);
        assert!(r.pass);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
        assert!(r.markdown().contains("PASS"));
    }

    #[test]
    fn distant_values_fail() {
        let r = compare_report(&stamp("h", est(0.6)), &stamp("h", fd(0.7))).unwrap();
        assert!(!r.pass);
        assert!((r.z - 0.1 / 0.01f64.hypot(0.01)).abs() < 1e-9);
    }

    #[test]
    fn hash_mismatch_is_rejected() {
        assert!(matches!(
            compare_report(&stamp("a", est(0.6)), &stamp("b", fd(0.6))),
            Err(CliError::HashMismatch { .. })
        ));
    }
}
