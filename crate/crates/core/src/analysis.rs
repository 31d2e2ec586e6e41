//! Post-processing: spectra, delay embeddings, per-period minima,
//! bifurcation diagrams and regime classification.

use std::fmt::Write as _;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loops::{Reservoir, TeacherScaling};
use crate::readout::{self, ReadoutWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectrumMethod {
    Periodogram,
    Welch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEstimate {
    pub frequencies: Vec<f64>,
    /// One-sided power spectral density; `Σ power·Δf` equals the variance.
    pub power: Vec<f64>,
    pub method: SpectrumMethod,
    pub resolution: f64,
}

pub const WELCH_SEGMENTS: usize = 8;
pub const MIN_SPECTRUM_LEN: usize = 16;

impl SpectrumEstimate {
    /// Frequency of the largest non-DC bin.
    pub fn dominant_frequency(&self) -> f64 {
        let mut best = (0.0, f64::NEG_INFINITY);
        for (f, p) in self.frequencies.iter().zip(&self.power).skip(1) {
            if *p > best.1 {
                best = (*f, *p);
            }
        }
        best.0
    }

    /// Power-weighted refinement of the dominant peak over its two neighbours.
    pub fn dominant_frequency_interpolated(&self) -> f64 {
        let n = self.power.len();
        let k = (1..n).max_by(|a, b| self.power[*a].total_cmp(&self.power[*b])).unwrap_or(0);
        let lo = k.saturating_sub(1).max(1);
        let hi = (k + 1).min(n - 1);
        let (num, den) = (lo..=hi).fold((0.0, 0.0), |(a, b), i| (a + self.frequencies[i] * self.power[i], b + self.power[i]));
        if den > 0.0 { num / den } else { self.frequencies[k] }
    }

    pub fn total_power(&self) -> f64 {
        self.power.iter().sum::<f64>() * self.resolution
    }

    /// Share of total power held by the single largest bin.
    pub fn peak_fraction(&self) -> f64 {
        let total: f64 = self.power.iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        self.power.iter().copied().fold(0.0, f64::max) / total
    }

    /// Fewest bins that together hold `fraction` of the power.
    pub fn bins_for_fraction(&self, fraction: f64) -> usize {
        let total: f64 = self.power.iter().sum();
        if total <= 0.0 {
            return 0;
        }
        let mut sorted = self.power.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let mut acc = 0.0;
        for (i, p) in sorted.iter().enumerate() {
            acc += p;
            if acc >= fraction * total {
                return i + 1;
            }
        }
        sorted.len()
    }
}

fn demeaned(series: &[f64]) -> Vec<f64> {
    let mean = series.iter().sum::<f64>() / series.len() as f64;
    series.iter().map(|v| v - mean).collect()
}

/// One-sided `|FFT|²` of `x`, already scaled by the window energy.
fn one_sided(x: &[f64], window: &[f64], dt: f64) -> Vec<f64> {
    let n = x.len();
    let mut buf: Vec<Complex<f64>> = x.iter().zip(window).map(|(v, w)| Complex::new(v * w, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let energy: f64 = window.iter().map(|w| w * w).sum();
    let half = n / 2;
    (0..=half)
        .map(|k| {
            let mut p = buf[k].norm_sqr() * dt / energy;
            if k != 0 && !(n % 2 == 0 && k == half) {
                p *= 2.0;
            }
            p
        })
        .collect()
}

pub fn power_spectrum(series: &[f64], sample_interval: f64, method: SpectrumMethod) -> Result<SpectrumEstimate> {
    if series.len() < MIN_SPECTRUM_LEN {
        return Err(Error::TooShort { needed: MIN_SPECTRUM_LEN, got: series.len() });
    }
    if !(sample_interval > 0.0) {
        return Err(Error::config("sample interval must be positive"));
    }
    let x = demeaned(series);
    let (seg_len, power) = match method {
        SpectrumMethod::Periodogram => {
            let w = vec![1.0; x.len()];
            (x.len(), one_sided(&x, &w, sample_interval))
        }
        SpectrumMethod::Welch => {
            // 8 half-overlapping segments span 4.5 segment lengths
            let seg = (2 * x.len()) / (WELCH_SEGMENTS + 1);
            let hop = seg / 2;
            let w: Vec<f64> = (0..seg)
                .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / seg as f64).cos())
                .collect();
            let mut acc = vec![0.0; seg / 2 + 1];
            for s in 0..WELCH_SEGMENTS {
                let part = demeaned(&x[s * hop..s * hop + seg]);
                for (a, p) in acc.iter_mut().zip(one_sided(&part, &w, sample_interval)) {
                    *a += p / WELCH_SEGMENTS as f64;
                }
            }
            (seg, acc)
        }
    };
    let resolution = 1.0 / (seg_len as f64 * sample_interval);
    Ok(SpectrumEstimate {
        frequencies: (0..power.len()).map(|k| k as f64 * resolution).collect(),
        power,
        method,
        resolution,
    })
}

/// Vectors `(y_t, y_{t+ℓ}, …, y_{t+(m−1)ℓ})`.
pub fn delay_embed(series: &[f64], dimension: usize, lag: usize) -> Result<Vec<Vec<f64>>> {
    if dimension == 0 {
        return Err(Error::config("embedding dimension must be at least 1"));
    }
    let span = (dimension - 1) * lag;
    if series.len() <= span {
        return Err(Error::TooShort { needed: span + 1, got: series.len() });
    }
    Ok((0..series.len() - span)
        .map(|t| (0..dimension).map(|j| series[t + j * lag]).collect())
        .collect())
}

/// Strict local minima; a flat run bounded by larger values counts once at its midpoint.
pub fn local_minima(series: &[f64]) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    let n = series.len();
    let mut i = 1;
    while i + 1 < n {
        if series[i - 1] > series[i] {
            let mut j = i;
            while j + 1 < n && series[j + 1] == series[i] {
                j += 1;
            }
            if j + 1 < n && series[j + 1] > series[i] {
                out.push(((i + j) / 2, series[i]));
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimaReport {
    /// Minima count for each complete period.
    pub counts: Vec<usize>,
    pub values: Vec<f64>,
    pub positions: Vec<usize>,
}

impl MinimaReport {
    /// Most frequent per-period count (smaller wins ties).
    pub fn modal_count(&self) -> usize {
        let max = self.counts.iter().copied().max().unwrap_or(0);
        let mut hist = vec![0usize; max + 1];
        for c in &self.counts {
            hist[*c] += 1;
        }
        hist.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))).map_or(0, |(i, _)| i)
    }
}

pub fn local_minima_per_period(series: &[f64], period_steps: usize) -> Result<MinimaReport> {
    if period_steps < 3 {
        return Err(Error::config("period must span at least 3 samples"));
    }
    if series.len() < 3 * period_steps {
        return Err(Error::TooShort { needed: 3 * period_steps, got: series.len() });
    }
    let periods = series.len() / period_steps;
    let mut counts = vec![0; periods];
    let mut values = Vec::new();
    let mut positions = Vec::new();
    for (pos, v) in local_minima(series) {
        let p = pos / period_steps;
        if p < periods {
            counts[p] += 1;
            values.push(v);
            positions.push(pos);
        }
    }
    Ok(MinimaReport { counts, values, positions })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiagramMode {
    /// Local minima of each series.
    Minima,
    /// Every post-transient sample.
    Samples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BifurcationDiagram {
    pub parameters: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
    pub mode: DiagramMode,
}

pub const DEFAULT_TRANSIENT_FRACTION: f64 = 0.25;

pub fn bifurcation_diagram(
    parameters: &[f64],
    runs: &[Vec<f64>],
    transient_fraction: f64,
    mode: DiagramMode,
) -> Result<BifurcationDiagram> {
    if parameters.len() != runs.len() {
        return Err(Error::DimensionMismatch { expected: parameters.len(), got: runs.len() });
    }
    if !(0.0..1.0).contains(&transient_fraction) {
        return Err(Error::config("transient fraction must lie in [0, 1)"));
    }
    let mut order: Vec<usize> = (0..parameters.len()).collect();
    order.sort_by(|a, b| parameters[*a].total_cmp(&parameters[*b]));
    let mut params = Vec::with_capacity(order.len());
    let mut samples = Vec::with_capacity(order.len());
    for i in order {
        let run = &runs[i];
        let tail = &run[(run.len() as f64 * transient_fraction) as usize..];
        let s = match mode {
            DiagramMode::Samples => tail.to_vec(),
            DiagramMode::Minima => local_minima(tail).into_iter().map(|m| m.1).collect(),
        };
        params.push(parameters[i]);
        samples.push(s);
    }
    Ok(BifurcationDiagram { parameters: params, samples, mode })
}

impl BifurcationDiagram {
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.parameters
            .iter()
            .zip(&self.samples)
            .flat_map(|(p, s)| s.iter().map(move |v| vec![*p, *v]))
            .collect()
    }
}

/// Drives each grid value for `hold` intervals and compares the final
/// prediction (teacher units, component 0) with `truth`.
pub fn one_step_map_error<R: Reservoir + ?Sized>(
    res: &mut R,
    w: &ReadoutWeights,
    scaling: &TeacherScaling,
    grid: &[f64],
    hold: usize,
    load: f64,
    truth: impl Fn(f64) -> f64,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for &y in grid {
        let u = scaling.maps[0].forward(y);
        let mut last = Vec::new();
        for _ in 0..hold.max(1) {
            last = res.drive(u, load)?;
        }
        let pred = scaling.maps[0].inverse(readout::predict(w, &last)?[0]);
        worst = worst.max((pred - truth(y)).abs());
    }
    Ok(worst)
}

/// RMS Euclidean distance from each delay vector of `series` to the nearest
/// point of `reference` (a densely sampled closed curve in the same
/// embedding).
pub fn delay_curve_rms(series: &[f64], lag: usize, reference: &[[f64; 2]]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::TooShort { needed: 1, got: 0 });
    }
    let pts = delay_embed(series, 2, lag)?;
    let sum: f64 = pts
        .iter()
        .map(|p| {
            reference
                .iter()
                .map(|r| (p[0] - r[0]).powi(2) + (p[1] - r[1]).powi(2))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Ok((sum / pts.len() as f64).sqrt())
}

/// Delay curve `(f(θ), f(θ + shift))` of a periodic function sampled at `count` phases over one period.
pub fn periodic_delay_curve(f: impl Fn(f64) -> f64, shift: f64, count: usize) -> Vec<[f64; 2]> {
    (0..count)
        .map(|i| {
            let th = 2.0 * std::f64::consts::PI * i as f64 / count as f64;
            [f(th), f(th + shift)]
        })
        .collect()
}

/// `count` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![lo],
        _ => (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "period")]
pub enum Regime {
    FixedPoint,
    Periodic(usize),
    Aperiodic,
}

pub const MAX_DETECTED_PERIOD: usize = 64;

/// Classifies a post-transient series. Fixed point when the spread is below
/// `tol`; periodic with the smallest `p ≤ 64` whose lagged RMS difference is
/// below `tol`; aperiodic otherwise. `tol` is absolute.
pub fn classify_regime(series: &[f64], tol: f64) -> Regime {
    let n = series.len();
    if n < 2 {
        return Regime::FixedPoint;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let sd = (series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    if sd < tol {
        return Regime::FixedPoint;
    }
    for p in 1..=MAX_DETECTED_PERIOD.min(n / 3) {
        let rms = (series[p..].iter().zip(series).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (n - p) as f64).sqrt();
        if rms < tol {
            return Regime::Periodic(p);
        }
    }
    Regime::Aperiodic
}

/// Spectral breadth: bins needed for 90% of the power (Welch when long enough).
pub fn spectral_breadth(series: &[f64], dt: f64) -> Result<usize> {
    let method = if series.len() >= 256 { SpectrumMethod::Welch } else { SpectrumMethod::Periodogram };
    Ok(power_spectrum(series, dt, method)?.bins_for_fraction(0.9))
}

/// Coarse regime read from spread and spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectralRegime {
    /// Noise around a fixed point.
    Static,
    /// 90% of the power in at most a tenth of the bins.
    Narrowband,
    Broadband,
}

pub const NARROWBAND_BIN_FRACTION: f64 = 0.1;

/// `static_sd` is the spread below which a non-narrowband series counts as static.
pub fn spectral_regime(series: &[f64], dt: f64, static_sd: f64) -> Result<SpectralRegime> {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let sd = (series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd <= 1e-12 * mean.abs().max(1.0) {
        return Ok(SpectralRegime::Static);
    }
    let method = if series.len() >= 256 { SpectrumMethod::Welch } else { SpectrumMethod::Periodogram };
    let s = power_spectrum(series, dt, method)?;
    let bins = s.power.len() as f64;
    if (s.bins_for_fraction(0.9) as f64) <= NARROWBAND_BIN_FRACTION * bins {
        Ok(SpectralRegime::Narrowband)
    } else if sd < static_sd {
        Ok(SpectralRegime::Static)
    } else {
        Ok(SpectralRegime::Broadband)
    }
}

/// Index `k` of the first adjacent pair with `regimes[k] == from` and `regimes[k + 1] == to`.
pub fn find_transition(regimes: &[SpectralRegime], from: SpectralRegime, to: SpectralRegime) -> Option<usize> {
    regimes.windows(2).position(|w| w[0] == from && w[1] == to)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: y.len() });
    }
    if x.len() < 2 {
        return Err(Error::TooShort { needed: 2, got: x.len() });
    }
    pearson(&ranks(x), &ranks(y))
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateTarget);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Gnuplot script plotting columns `x_col:y_col` of a CSV file.
pub fn gnuplot_script(csv: &str, x_col: usize, y_col: usize, title: &str, xlabel: &str, ylabel: &str, points: bool) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "set datafile separator ','");
    let _ = writeln!(s, "set key off");
    let _ = writeln!(s, "set title '{title}'");
    let _ = writeln!(s, "set xlabel '{xlabel}'");
    let _ = writeln!(s, "set ylabel '{ylabel}'");
    let style = if points { "points pt 7 ps 0.3" } else { "lines" };
    let _ = writeln!(s, "plot '{csv}' every ::1 using {x_col}:{y_col} with {style}");
    s
}
