//! Information processing capacity.
//!
//! A reservoir driven by i.i.d. `u_n ~ U[-1, 1]` is probed with targets built
//! from products of normalized Legendre polynomials of delayed inputs. The
//! capacity of a target is the fraction of its variance reproduced by the best
//! linear readout of the (centered) states. Finite-sample bias is removed per
//! term with cyclic-shift surrogates of the target.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use rayon::prelude::*;
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::rng::{self, streams};

/// Upper bound on the number of enumerated basis terms.
pub const MAX_BASIS_TERMS: usize = 1_000_000;

/// Legendre polynomial of degree `d`, scaled to unit variance under U[-1, 1].
pub fn legendre(d: usize, x: f64) -> f64 {
    let p = match d {
        0 => 1.0,
        1 => x,
        _ => {
            let (mut p0, mut p1) = (1.0, x);
            for k in 1..d {
                let k = k as f64;
                let p2 = ((2.0 * k + 1.0) * x * p1 - k * p0) / (k + 1.0);
                p0 = p1;
                p1 = p2;
            }
            p1
        }
    };
    p * ((2 * d + 1) as f64).sqrt()
}

/// Product of Legendre factors, one per distinct delay.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BasisTerm {
    /// `(delay, degree)` pairs sorted by delay.
    pub factors: Vec<(usize, usize)>,
}

impl BasisTerm {
    pub fn new(mut factors: Vec<(usize, usize)>) -> Result<Self> {
        factors.sort_unstable();
        if factors.is_empty() {
            return Err(Error::config("basis term needs at least one factor"));
        }
        if factors.iter().any(|&(_, d)| d == 0) {
            return Err(Error::config("basis term degrees must be >= 1"));
        }
        if factors.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::config("basis term delays must be distinct"));
        }
        Ok(Self { factors })
    }

    pub fn total_degree(&self) -> usize {
        self.factors.iter().map(|f| f.1).sum()
    }

    pub fn max_delay(&self) -> usize {
        self.factors.iter().map(|f| f.0).max().unwrap_or(0)
    }

    pub fn delays(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.0).collect()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.1).collect()
    }

    /// Target value at time `n`; needs `n >= max_delay`.
    pub fn evaluate(&self, input: &[f64], n: usize) -> f64 {
        self.factors.iter().map(|&(k, d)| legendre(d, input[n - k])).product()
    }

    /// Target series aligned with `input[start..]`.
    pub fn target(&self, input: &[f64], start: usize) -> Vec<f64> {
        (start..input.len()).map(|n| self.evaluate(input, n)).collect()
    }
}

impl fmt::Display for BasisTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &(k, d) in &self.factors {
            if k == 0 {
                write!(f, "P{d}(u_n)")?;
            } else {
                write!(f, "P{d}(u_{{n-{k}}})")?;
            }
        }
        Ok(())
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Number of terms `enumerate_basis(max_delay, max_degree)` would produce.
pub fn basis_size(max_delay: usize, max_degree: usize) -> u128 {
    let mut total = 0u128;
    for t in 1..=max_degree {
        for m in 1..=t.min(max_delay) {
            total = total.saturating_add(binomial(max_delay, m).saturating_mul(binomial(t - 1, m - 1)));
        }
    }
    total
}

fn combinations(n: usize, m: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(m);
    fn rec(start: usize, n: usize, m: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == m {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, m, cur, out);
            cur.pop();
        }
    }
    rec(0, n, m, &mut cur, &mut out);
    out
}

/// Compositions of `t` into `m` positive parts, lexicographic.
fn compositions(t: usize, m: usize) -> Vec<Vec<usize>> {
    if m == 1 {
        return vec![vec![t]];
    }
    let mut out = Vec::new();
    for first in 1..=t - (m - 1) {
        for mut rest in compositions(t - first, m - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// All terms with delays in `[0, max_delay)` and total degree in `[1, max_degree]`,
/// ordered by total degree, factor count, delays, degrees.
pub fn enumerate_basis(max_delay: usize, max_degree: usize) -> Result<Vec<BasisTerm>> {
    if max_delay == 0 || max_degree == 0 {
        return Err(Error::config("IPC needs max_delay >= 1 and max_degree >= 1"));
    }
    if basis_size(max_delay, max_degree) > MAX_BASIS_TERMS as u128 {
        return Err(Error::BasisOverflow { limit: MAX_BASIS_TERMS });
    }
    let mut terms = Vec::new();
    for t in 1..=max_degree {
        for m in 1..=t.min(max_delay) {
            let comps = compositions(t, m);
            for delays in combinations(max_delay, m) {
                for degrees in &comps {
                    terms.push(BasisTerm {
                        factors: delays.iter().copied().zip(degrees.iter().copied()).collect(),
                    });
                }
            }
        }
    }
    Ok(terms)
}

/// Delay-line reservoir `x_n = (u_n, ..., u_{n-taps+1})`, zero-padded at the start.
pub fn delay_line_states(input: &[f64], taps: usize) -> Vec<Vec<f64>> {
    (0..input.len())
        .map(|n| (0..taps).map(|k| if n >= k { input[n - k] } else { 0.0 }).collect())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn centered(z: &[f64]) -> Vec<f64> {
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    z.iter().map(|v| v - mean).collect()
}

/// Orthonormal basis of the centered state span.
///
/// Least squares with an intercept is a projection onto this span, so a bias
/// column contributes nothing and rank-deficient states are handled by
/// dropping dependent columns.
#[derive(Debug, Clone)]
pub struct Projector {
    q: Vec<Vec<f64>>,
    n_samples: usize,
    n_features: usize,
}

impl Projector {
    /// Relative residual norm below which a column counts as dependent.
    pub const RANK_TOL: f64 = 1e-10;

    /// `states` holds one row per sample.
    pub fn new(states: &[Vec<f64>]) -> Result<Self> {
        let n_samples = states.len();
        let n_features = states.first().map_or(0, Vec::len);
        if n_samples < 2 {
            return Err(Error::TooShort { needed: 2, got: n_samples });
        }
        if let Some(row) = states.iter().find(|r| r.len() != n_features) {
            return Err(Error::DimensionMismatch { expected: n_features, got: row.len() });
        }
        let mut q: Vec<Vec<f64>> = Vec::new();
        for j in 0..n_features {
            let col: Vec<f64> = states.iter().map(|r| r[j]).collect();
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("state column {j} is not finite")));
            }
            let mut v = centered(&col);
            let norm0 = dot(&v, &v).sqrt();
            if norm0 == 0.0 {
                continue;
            }
            for _ in 0..2 {
                for qi in &q {
                    let c = dot(qi, &v);
                    v.iter_mut().zip(qi).for_each(|(a, b)| *a -= c * b);
                }
            }
            let norm = dot(&v, &v).sqrt();
            if norm <= Self::RANK_TOL * norm0 {
                continue;
            }
            v.iter_mut().for_each(|a| *a /= norm);
            q.push(v);
        }
        Ok(Self { q, n_samples, n_features })
    }

    pub fn rank(&self) -> usize {
        self.q.len()
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// `1 - min_w |z - z̄ - Xw|² / |z - z̄|²`.
    pub fn capacity(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.n_samples {
            return Err(Error::DimensionMismatch { expected: self.n_samples, got: z.len() });
        }
        let zc = centered(z);
        let var = dot(&zc, &zc);
        if var <= 1e-300 || !var.is_finite() {
            return Err(Error::DegenerateTarget);
        }
        Ok(self.q.iter().map(|qi| dot(qi, &zc).powi(2)).sum::<f64>() / var)
    }
}

/// Capacity of `z` given states `X` (one row per sample).
pub fn capacity(states: &[Vec<f64>], z: &[f64]) -> Result<f64> {
    Projector::new(states)?.capacity(z)
}

/// Capacities of a target against cyclic shifts of itself, via FFT
/// cross-correlation with every basis column.
struct SurrogateBank {
    spectra: Vec<Vec<Complex<f64>>>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    shifts: Vec<usize>,
}

impl SurrogateBank {
    fn new(proj: &Projector, shifts: Vec<usize>) -> Self {
        let n = proj.n_samples;
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        let spectra = proj
            .q
            .chunks(2)
            .map(|pair| {
                // two real columns packed into one complex transform
                let mut buf: Vec<Complex<f64>> = (0..n)
                    .map(|t| Complex::new(pair[0][t], pair.get(1).map_or(0.0, |c| c[t])))
                    .collect();
                forward.process(&mut buf);
                buf
            })
            .collect();
        Self { spectra, forward, inverse, shifts }
    }

    /// Surrogate capacities of a centered target with squared norm `var`.
    fn capacities(&self, zc: &[f64], var: f64) -> Vec<f64> {
        let n = zc.len();
        let mut zf: Vec<Complex<f64>> = zc.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.forward.process(&mut zf);
        let mut acc = vec![0.0; self.shifts.len()];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for packed in &self.spectra {
            // packed = A + iB with A, B the spectra of two real columns
            for k in 0..n {
                let pk = packed[k];
                let pm = packed[(n - k) % n].conj();
                let a = (pk + pm) * 0.5;
                let b = (pk - pm) * Complex::new(0.0, -0.5);
                buf[k] = a.conj() * zf[k] + Complex::new(0.0, 1.0) * (b.conj() * zf[k]);
            }
            self.inverse.process(&mut buf);
            for (slot, &s) in acc.iter_mut().zip(&self.shifts) {
                let c = buf[s] / n as f64;
                *slot += c.re * c.re + c.im * c.im;
            }
        }
        acc.into_iter().map(|v| v / var).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IpcConfig {
    pub max_delay: usize,
    pub max_degree: usize,
    pub surrogates: usize,
    /// Threshold is mean + `sigma` standard deviations of surrogate capacities.
    pub sigma: f64,
    /// Leading samples dropped before evaluation (at least `max_delay - 1`).
    pub washout: usize,
    /// Evaluation length after washout for runs that generate their own drive.
    pub samples: usize,
    /// Surrogate stream seed; runs set it from their master seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for IpcConfig {
    fn default() -> Self {
        Self { max_delay: 10, max_degree: 4, surrogates: 100, sigma: 4.0, washout: 0, samples: 50_000, seed: 0 }
    }
}

impl IpcConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.max_delay == 0 {
            errs.push("ipc.max_delay must be >= 1".to_string());
        }
        if self.max_degree == 0 {
            errs.push("ipc.max_degree must be >= 1".to_string());
        }
        if self.surrogates < 2 {
            errs.push("ipc.surrogates must be >= 2".to_string());
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            errs.push("ipc.sigma must be finite and >= 0".to_string());
        }
        if errs.is_empty() { Ok(()) } else { Err(Error::Config(errs)) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityEntry {
    pub term: BasisTerm,
    /// Raw capacity.
    pub capacity: f64,
    pub threshold: f64,
    /// Capacity after thresholding (0 when at or below threshold).
    pub thresholded: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacitySpectrum {
    pub entries: Vec<CapacityEntry>,
    pub total: f64,
    pub by_degree: BTreeMap<usize, f64>,
    /// Keyed by the largest delay in the term.
    pub by_delay: BTreeMap<usize, f64>,
    pub n_samples: usize,
    /// Linearly independent centered features.
    pub rank: usize,
    pub n_features: usize,
    /// Every entry fell below its threshold.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectrumSummary {
    pub total: f64,
    pub by_degree: BTreeMap<usize, f64>,
    pub by_delay: BTreeMap<usize, f64>,
    pub n_samples: usize,
    pub rank: usize,
    pub n_features: usize,
    pub n_terms: usize,
    pub degenerate: bool,
}

impl CapacitySpectrum {
    /// Thresholded sum over degree-1 terms.
    pub fn memory_capacity(&self) -> f64 {
        self.by_degree.get(&1).copied().unwrap_or(0.0)
    }

    pub fn get(&self, term: &BasisTerm) -> Option<&CapacityEntry> {
        self.entries.iter().find(|e| &e.term == term)
    }

    /// Entries with positive thresholded capacity, largest first.
    pub fn major(&self, count: usize) -> Vec<&CapacityEntry> {
        let mut v: Vec<&CapacityEntry> = self.entries.iter().filter(|e| e.thresholded > 0.0).collect();
        v.sort_by(|a, b| b.thresholded.total_cmp(&a.thresholded));
        v.truncate(count);
        v
    }

    pub fn summary(&self) -> SpectrumSummary {
        SpectrumSummary {
            total: self.total,
            by_degree: self.by_degree.clone(),
            by_delay: self.by_delay.clone(),
            n_samples: self.n_samples,
            rank: self.rank,
            n_features: self.n_features,
            n_terms: self.entries.len(),
            degenerate: self.degenerate,
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "term,delays,degrees,capacity,thresholded")?;
        let join = |v: Vec<usize>| v.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
        for e in &self.entries {
            writeln!(
                w,
                "{},{},{},{},{}",
                e.term,
                join(e.term.delays()),
                join(e.term.degrees()),
                fmt_f64(e.capacity),
                fmt_f64(e.thresholded)
            )?;
        }
        Ok(())
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn export(&self, dir: &Path, stem: &str) -> Result<()> {
        let f = std::fs::File::create(dir.join(format!("{stem}.csv")))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_csv(&mut w)?;
        w.flush()?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&self.summary())?)?;
        Ok(())
    }
}

/// Thresholded capacity spectrum of `states` driven by `input` (both indexed by time).
pub fn total_ipc(states: &[Vec<f64>], input: &[f64], cfg: &IpcConfig) -> Result<CapacitySpectrum> {
    cfg.validate()?;
    if states.len() != input.len() {
        return Err(Error::DimensionMismatch { expected: input.len(), got: states.len() });
    }
    if let Some(u) = input.iter().find(|u| !(u.abs() <= 1.0)) {
        return Err(Error::config(format!("IPC input {u} outside [-1, 1]")));
    }
    let start = cfg.washout.max(cfg.max_delay - 1);
    let n = input.len().saturating_sub(start);
    let needed = start + 2 * cfg.max_delay + 2;
    if input.len() < needed {
        return Err(Error::TooShort { needed, got: input.len() });
    }
    let basis = enumerate_basis(cfg.max_delay, cfg.max_degree)?;
    let proj = Projector::new(&states[start..])?;

    let mut rng = rng::stream(cfg.seed, streams::SURROGATE);
    let shifts: Vec<usize> = (0..cfg.surrogates)
        .map(|_| rng.random_range(cfg.max_delay..=n - cfg.max_delay))
        .collect();
    let bank = SurrogateBank::new(&proj, shifts);

    let entries = basis
        .into_par_iter()
        .map(|term| {
            let z = term.target(input, start);
            let capacity = proj.capacity(&z)?;
            let zc = centered(&z);
            let var = dot(&zc, &zc);
            let sur = bank.capacities(&zc, var);
            let mean = sur.iter().sum::<f64>() / sur.len() as f64;
            let sd = (sur.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (sur.len() - 1) as f64).sqrt();
            let threshold = mean + cfg.sigma * sd;
            let thresholded = if capacity > threshold { capacity } else { 0.0 };
            Ok(CapacityEntry { term, capacity, threshold, thresholded })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut by_degree = BTreeMap::new();
    let mut by_delay = BTreeMap::new();
    for e in &entries {
        *by_degree.entry(e.term.total_degree()).or_insert(0.0) += e.thresholded;
        *by_delay.entry(e.term.max_delay()).or_insert(0.0) += e.thresholded;
    }
    let total = entries.iter().map(|e| e.thresholded).sum();
    let degenerate = entries.iter().all(|e| e.thresholded == 0.0);
    Ok(CapacitySpectrum {
        entries,
        total,
        by_degree,
        by_delay,
        n_samples: n,
        rank: proj.rank(),
        n_features: proj.n_features(),
        degenerate,
    })
}

/// Reads an external `(states.csv, input.csv)` pair. The input is the column
/// named `u` if present, else the first column.
pub fn load_external(states: &Path, input: &Path) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let (_, x) = crate::io::read_numeric_csv(states)?;
    let (header, rows) = crate::io::read_numeric_csv(input)?;
    let col = header.iter().position(|h| h == "u").unwrap_or(0);
    let u = rows
        .iter()
        .map(|r| r.get(col).copied().ok_or_else(|| Error::config(format!("{} has an empty row", input.display()))))
        .collect::<Result<Vec<f64>>>()?;
    if x.len() != u.len() {
        return Err(Error::config(format!("states have {} rows but input has {}", x.len(), u.len())));
    }
    Ok((x, u))
}
