//! Finitely supported probability measures on `R^d`.
//!
//! Atoms are stored flat (`len * dim` scalars). Weights live behind an `Arc`
//! so the many empirical measures of a simulated flow can share one uniform
//! weight vector.
//!
//! The convention `|x|^0 = 1` holds everywhere, including `x = 0`, so the
//! weighted total-variation distance of order zero is twice the classical
//! total variation.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::scalar::pow_norm;
use crate::{Error, Result, Scalar};

/// Moment order `k >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct MomentOrder(f64);

impl MomentOrder {
    pub fn new(k: f64) -> Result<Self> {
        if k.is_finite() && k >= 0.0 {
            Ok(Self(k))
        } else {
            Err(Error::InvalidArgument(format!("moment order {k} must be finite and >= 0")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `1 + |x|^k`, the weight function of the `k`-th order distance.
    pub fn weight<S: Scalar>(self, x: &[S]) -> S {
        S::one() + pow_norm(x, S::lit(self.0))
    }
}

impl TryFrom<f64> for MomentOrder {
    type Error = Error;
    fn try_from(k: f64) -> Result<Self> {
        Self::new(k)
    }
}

impl From<MomentOrder> for f64 {
    fn from(k: MomentOrder) -> f64 {
        k.0
    }
}

/// Vector-valued function on `R^d`, e.g. the interaction observable `h`.
#[derive(Clone)]
pub struct Observable<S> {
    in_dim: usize,
    out_dim: usize,
    func: Arc<dyn Fn(&[S], &mut [S]) + Send + Sync>,
}

impl<S: Scalar> Observable<S> {
    pub fn new<F>(in_dim: usize, out_dim: usize, func: F) -> Self
    where
        F: Fn(&[S], &mut [S]) + Send + Sync + 'static,
    {
        Self {
            in_dim,
            out_dim,
            func: Arc::new(func),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(dim, dim, |x, out| out.copy_from_slice(x))
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    #[inline]
    pub fn eval(&self, x: &[S], out: &mut [S]) {
        (self.func)(x, out)
    }

    pub fn eval_vec(&self, x: &[S]) -> Vec<S> {
        let mut out = vec![S::zero(); self.out_dim];
        self.eval(x, &mut out);
        out
    }
}

impl<S> std::fmt::Debug for Observable<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Observable")
            .field("in_dim", &self.in_dim)
            .field("out_dim", &self.out_dim)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(try_from = "MeasureRepr<S>", into = "MeasureRepr<S>")]
#[serde(bound = "S: Scalar")]
pub struct ParticleMeasure<S> {
    dim: usize,
    atoms: Vec<S>,
    weights: Arc<[S]>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
struct MeasureRepr<S> {
    atoms: Vec<Vec<S>>,
    weights: Vec<S>,
}

impl<S: Scalar> TryFrom<MeasureRepr<S>> for ParticleMeasure<S> {
    type Error = Error;
    fn try_from(r: MeasureRepr<S>) -> Result<Self> {
        ParticleMeasure::new(r.atoms, r.weights)
    }
}

impl<S: Scalar> From<ParticleMeasure<S>> for MeasureRepr<S> {
    fn from(m: ParticleMeasure<S>) -> Self {
        MeasureRepr {
            atoms: m.iter().map(|(a, _)| a.to_vec()).collect(),
            weights: m.weights.to_vec(),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for ParticleMeasure<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut list = f.debug_list();
        for (a, w) in self.iter().take(8) {
            list.entry(&(a, w));
        }
        if self.len() > 8 {
            list.entry(&format_args!("... {} atoms", self.len()));
        }
        list.finish()
    }
}

impl<S: Scalar> PartialEq for ParticleMeasure<S> {
    /// Representation equality: same atoms in the same order with the same weights.
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.atoms == other.atoms && self.weights[..] == other.weights[..]
    }
}

fn weight_tolerance<S: Scalar>(n: usize) -> f64 {
    1e-12_f64.max(4.0 * n as f64 * S::epsilon().as_f64())
}

/// Exact-equality key for an atom; `-0.0` and `0.0` share a key.
fn atom_key<S: Scalar>(atom: &[S]) -> Vec<u64> {
    atom.iter()
        .map(|&x| {
            let v = x.as_f64();
            if v == 0.0 {
                0
            } else {
                v.to_bits()
            }
        })
        .collect()
}

impl<S: Scalar> ParticleMeasure<S> {
    pub fn new(atoms: Vec<Vec<S>>, weights: Vec<S>) -> Result<Self> {
        let dim = atoms
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::InvalidMeasure("no atoms".into()))?;
        if atoms.iter().any(|a| a.len() != dim) {
            return Err(Error::InvalidMeasure("atoms have differing dimensions".into()));
        }
        let flat = atoms.into_iter().flatten().collect();
        Self::from_flat(dim, flat, weights.into())
    }

    /// Builds a measure from flat row-major atoms.
    pub fn from_flat(dim: usize, atoms: Vec<S>, weights: Arc<[S]>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidMeasure("dimension must be positive".into()));
        }
        if atoms.is_empty() {
            return Err(Error::InvalidMeasure("no atoms".into()));
        }
        if atoms.len() != dim * weights.len() {
            return Err(Error::InvalidMeasure(format!(
                "{} coordinates do not form {} atoms of dimension {dim}",
                atoms.len(),
                weights.len()
            )));
        }
        if atoms.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidMeasure("non-finite atom coordinate".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < S::zero()) {
            return Err(Error::InvalidMeasure("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().map(|w| w.as_f64()).sum();
        if (total - 1.0).abs() > weight_tolerance::<S>(weights.len()) {
            return Err(Error::InvalidMeasure(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { dim, atoms, weights })
    }

    pub fn dirac(point: &[S]) -> Self {
        Self::from_flat(point.len(), point.to_vec(), Arc::from(vec![S::one()]))
            .expect("a finite point is a valid Dirac measure")
    }

    pub fn uniform(points: Vec<Vec<S>>) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![S::one() / S::of_usize(n.max(1)); n])
    }

    /// Uniform empirical measure over flat atoms, sharing `weights` (which must
    /// hold `1/n` repeated `n` times).
    pub fn empirical(dim: usize, atoms: Vec<S>, weights: Arc<[S]>) -> Result<Self> {
        Self::from_flat(dim, atoms, weights)
    }

    pub fn uniform_weights(n: usize) -> Arc<[S]> {
        Arc::from(vec![S::one() / S::of_usize(n); n])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn atom(&self, i: usize) -> &[S] {
        &self.atoms[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight(&self, i: usize) -> S {
        self.weights[i]
    }

    pub fn atoms_flat(&self) -> &[S] {
        &self.atoms
    }

    pub fn weights(&self) -> &Arc<[S]> {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[S], S)> + '_ {
        self.atoms.chunks_exact(self.dim).zip(self.weights.iter().copied())
    }

    /// `mu(|.|^k)`.
    pub fn moment(&self, k: MomentOrder) -> S {
        let k = S::lit(k.value());
        self.iter().map(|(x, w)| w * pow_norm(x, k)).sum()
    }

    /// `mu(h)`, the weighted mean of an observable.
    pub fn observable_mean(&self, h: &Observable<S>) -> Vec<S> {
        let mut acc = vec![S::zero(); h.out_dim()];
        let mut buf = vec![S::zero(); h.out_dim()];
        for (x, w) in self.iter() {
            h.eval(x, &mut buf);
            for (a, &b) in acc.iter_mut().zip(&buf) {
                *a += w * b;
            }
        }
        acc
    }

    pub fn mean(&self) -> Vec<S> {
        let mut acc = vec![S::zero(); self.dim];
        for (x, w) in self.iter() {
            for (a, &b) in acc.iter_mut().zip(x) {
                *a += w * b;
            }
        }
        acc
    }

    /// Weight differences over the union of supports, keyed by exact
    /// coordinates. Entries follow `self`'s atom order, then `other`'s new atoms.
    fn merged<'a>(&'a self, other: &'a Self) -> Vec<(&'a [S], S, S)> {
        let mut index: HashMap<Vec<u64>, usize> = HashMap::with_capacity(self.len() + other.len());
        let mut entries: Vec<(&[S], S, S)> = Vec::with_capacity(self.len() + other.len());
        for (x, w) in self.iter() {
            match index.entry(atom_key(x)) {
                std::collections::hash_map::Entry::Occupied(e) => entries[*e.get()].1 += w,
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(entries.len());
                    entries.push((x, w, S::zero()));
                }
            }
        }
        for (x, w) in other.iter() {
            match index.entry(atom_key(x)) {
                std::collections::hash_map::Entry::Occupied(e) => entries[*e.get()].2 += w,
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(entries.len());
                    entries.push((x, S::zero(), w));
                }
            }
        }
        entries
    }

    /// `||mu - nu||_{k,var} = sup_{|f| <= 1 + |.|^k} |mu(f) - nu(f)|`.
    ///
    /// For finitely supported measures the supremum is attained pointwise, so
    /// this is `sum_x (1 + |x|^k) |mu({x}) - nu({x})|` over the union of supports.
    pub fn weighted_tv(&self, other: &Self, k: MomentOrder) -> Result<S> {
        if self.dim != other.dim {
            return Err(Error::Dimension(format!("measures of dimension {} and {}", self.dim, other.dim)));
        }
        if self == other {
            return Ok(S::zero());
        }
        // Summing in coordinate order makes the result symmetric bit for bit.
        let mut entries = self.merged(other);
        entries.sort_unstable_by(|p, q| p.0.iter().zip(q.0).map(|(a, b)| a.as_f64().total_cmp(&b.as_f64())).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
        Ok(entries.into_iter().map(|(x, a, b)| k.weight(x) * (a - b).abs()).sum())
    }

    /// `(1 - eps) mu + eps nu`, with coinciding atoms merged.
    pub fn mix(&self, other: &Self, eps: S) -> Result<Self> {
        if !(eps >= S::zero() && eps <= S::one()) {
            return Err(Error::MixWeight(eps.as_f64()));
        }
        if self.dim != other.dim {
            return Err(Error::Dimension(format!("measures of dimension {} and {}", self.dim, other.dim)));
        }
        if eps == S::zero() || self == other {
            return Ok(self.clone());
        }
        if eps == S::one() {
            return Ok(other.clone());
        }
        let keep = S::one() - eps;
        let entries = self.merged(other);
        let mut atoms = Vec::with_capacity(entries.len() * self.dim);
        let mut weights = Vec::with_capacity(entries.len());
        for (x, a, b) in entries {
            atoms.extend_from_slice(x);
            weights.push(keep * a + eps * b);
        }
        Self::from_flat(self.dim, atoms, weights.into())
    }

    pub fn sampler(&self) -> AtomSampler {
        let mut acc = 0.0;
        let cumulative = self
            .weights
            .iter()
            .map(|w| {
                acc += w.as_f64();
                acc
            })
            .collect();
        AtomSampler { cumulative }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One atom per row, coordinates then weight, with a header row.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.dim).map(|i| format!("x{i}")).collect();
        header.push("weight".into());
        w.write_record(&header)?;
        for (x, wt) in self.iter() {
            let row: Vec<String> = x.iter().chain(std::iter::once(&wt)).map(|v| v.to_string()).collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut atoms = Vec::new();
        let mut weights = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|s| s.trim().parse::<f64>().map(S::lit))
                .collect::<std::result::Result<Vec<S>, _>>()
                .map_err(|e| Error::InvalidMeasure(format!("bad number in CSV: {e}")))?;
            let (w, x) = vals
                .split_last()
                .ok_or_else(|| Error::InvalidMeasure("empty CSV row".into()))?;
            if x.is_empty() {
                return Err(Error::InvalidMeasure("CSV row has no coordinates".into()));
            }
            atoms.push(x.to_vec());
            weights.push(*w);
        }
        Self::new(atoms, weights)
    }
}

/// Inverse-CDF selection of atoms by a uniform in `[0, 1)`, following atom order.
#[derive(Debug, Clone)]
pub struct AtomSampler {
    cumulative: Vec<f64>,
}

impl AtomSampler {
    pub fn index(&self, u: f64) -> usize {
        self.cumulative
            .partition_point(|&c| c <= u)
            .min(self.cumulative.len() - 1)
    }
}

/// Free-function forms of the measure operations.
pub fn moment<S: Scalar>(mu: &ParticleMeasure<S>, k: MomentOrder) -> S {
    mu.moment(k)
}

pub fn weighted_tv<S: Scalar>(mu: &ParticleMeasure<S>, nu: &ParticleMeasure<S>, k: MomentOrder) -> Result<S> {
    mu.weighted_tv(nu, k)
}

pub fn mix<S: Scalar>(mu: &ParticleMeasure<S>, nu: &ParticleMeasure<S>, eps: S) -> Result<ParticleMeasure<S>> {
    mu.mix(nu, eps)
}

pub fn observable_mean<S: Scalar>(mu: &ParticleMeasure<S>, h: &Observable<S>) -> Vec<S> {
    mu.observable_mean(h)
}
