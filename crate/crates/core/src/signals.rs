//! Drive and teacher signals: the piecewise-constant pressure schedule, the
//! logistic map, the Rössler flow and seeded uniform pressure sequences.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Sinusoid,
    UniformRandom,
    ExternalSequence,
}

/// Piecewise-constant control pressure `u(t) = magnitude * u_n + bias`, held
/// for `interval` seconds per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSchedule {
    /// MPa
    pub magnitude: f64,
    /// MPa
    pub bias: f64,
    /// Input interval tau (s).
    pub interval: f64,
    /// Sinusoid period T (s); ignored by the other kinds.
    pub period: f64,
    pub kind: ScheduleKind,
}

impl Default for InputSchedule {
    fn default() -> Self {
        Self {
            magnitude: 0.2,
            bias: 0.3,
            interval: 0.1,
            period: 1.2,
            kind: ScheduleKind::Sinusoid,
        }
    }
}

impl InputSchedule {
    pub fn sinusoid(magnitude: f64, bias: f64, interval: f64, period: f64) -> Self {
        Self {
            magnitude,
            bias,
            interval,
            period,
            kind: ScheduleKind::Sinusoid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.interval > 0.0) || !self.interval.is_finite() {
            return Err(Error::InvalidSchedule(format!(
                "interval must be positive, got {}",
                self.interval
            )));
        }
        if self.kind == ScheduleKind::Sinusoid && !(self.period > 0.0) {
            return Err(Error::InvalidSchedule(format!(
                "sinusoid period must be positive, got {}",
                self.period
            )));
        }
        Ok(())
    }

    /// Number of steps per sinusoid period, when `period / interval` is integral.
    pub fn steps_per_period(&self) -> Option<usize> {
        let ratio = self.period / self.interval;
        let rounded = ratio.round();
        ((ratio - rounded).abs() < 1e-9 && rounded >= 1.0).then_some(rounded as usize)
    }
}

/// Normalised sinusoidal drive `u_n = sin(2π τ/T n)`.
pub fn sine_drive(n: usize, schedule: &InputSchedule) -> Result<f64> {
    if schedule.kind != ScheduleKind::Sinusoid {
        return Err(Error::InvalidSchedule("schedule is not a sinusoid".into()));
    }
    if schedule.period == 0.0 || !schedule.period.is_finite() {
        return Err(Error::InvalidSchedule(format!(
            "sinusoid period must be non-zero, got {}",
            schedule.period
        )));
    }
    Ok((2.0 * PI * schedule.interval / schedule.period * n as f64).sin())
}

pub fn sine_sequence(count: usize, schedule: &InputSchedule) -> Result<Vec<f64>> {
    (0..count).map(|n| sine_drive(n, schedule)).collect()
}

/// Sinusoidal control pressures `A u_n + B`.
pub fn pressure_sequence(count: usize, schedule: &InputSchedule) -> Result<Vec<f64>> {
    (0..count).map(|n| to_pressure(sine_drive(n, schedule)?, schedule)).collect()
}

/// Affine map from normalised drive to control pressure (MPa).
pub fn to_pressure(u: f64, schedule: &InputSchedule) -> Result<f64> {
    let p = schedule.magnitude * u + schedule.bias;
    if p < 0.0 {
        return Err(Error::NegativePressure { pressure: p });
    }
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticParams {
    pub a: f64,
    pub y0: f64,
}

impl Default for LogisticParams {
    fn default() -> Self {
        Self { a: 3.7, y0: 0.3 }
    }
}

#[inline]
pub fn logistic_step(y: f64, p: &LogisticParams) -> f64 {
    p.a * y * (1.0 - y)
}

/// `count` iterates starting from `y0` (inclusive).
pub fn logistic_series(p: &LogisticParams, count: usize) -> Vec<f64> {
    let mut y = p.y0;
    (0..count)
        .map(|_| {
            let cur = y;
            y = logistic_step(y, p);
            cur
        })
        .collect()
}

/// Logistic orbits restarted from `U(0, 1)` every `restart_every` steps.
/// Returns `(inputs, successors)` with `successors[n] = f(inputs[n])`.
pub fn logistic_restarted(p: &LogisticParams, count: usize, restart_every: usize, rng: &mut rng::Rng) -> (Vec<f64>, Vec<f64>) {
    let mut inputs = Vec::with_capacity(count);
    let mut succ = Vec::with_capacity(count);
    let mut y = p.y0;
    for n in 0..count {
        if restart_every > 0 && n > 0 && n % restart_every == 0 {
            y = rng.random::<f64>();
        }
        let next = logistic_step(y, p);
        inputs.push(y);
        succ.push(next);
        y = next;
    }
    (inputs, succ)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RosslerParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// RK4 step (s).
    pub dt: f64,
    /// Teacher sampling interval (s); a positive multiple of `dt`.
    pub sample_interval: f64,
    /// Transient discarded before the first teacher sample (s).
    pub transient: f64,
    pub y_init: [f64; 3],
}

impl Default for RosslerParams {
    fn default() -> Self {
        Self {
            a: 0.2,
            b: 0.2,
            c: 5.7,
            dt: 0.01,
            sample_interval: 0.5,
            transient: 100.0,
            y_init: [1.0, 1.0, 0.0],
        }
    }
}

impl RosslerParams {
    fn substeps_per_sample(&self) -> Result<usize> {
        if !(self.dt > 0.0) {
            return Err(Error::InvalidSchedule(format!("dt must be positive, got {}", self.dt)));
        }
        let ratio = self.sample_interval / self.dt;
        let k = ratio.round();
        if k < 1.0 || (ratio - k).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::InvalidSchedule(format!(
                "sample interval {} is not a positive multiple of dt {}",
                self.sample_interval, self.dt
            )));
        }
        Ok(k as usize)
    }
}

pub fn rossler_derivative(y: &[f64; 3], p: &RosslerParams) -> [f64; 3] {
    [
        -y[1] - y[2],
        y[0] + p.a * y[1],
        p.b + y[0] * y[2] - p.c * y[2],
    ]
}

/// One classical RK4 step of the Rössler flow over `p.dt`.
pub fn rossler_step(y: &[f64; 3], p: &RosslerParams) -> Result<[f64; 3]> {
    rossler_step_with(y, p, p.dt)
}

fn rossler_step_with(y: &[f64; 3], p: &RosslerParams, h: f64) -> Result<[f64; 3]> {
    let add = |a: &[f64; 3], k: &[f64; 3], s: f64| [a[0] + s * k[0], a[1] + s * k[1], a[2] + s * k[2]];
    let k1 = rossler_derivative(y, p);
    let k2 = rossler_derivative(&add(y, &k1, h / 2.0), p);
    let k3 = rossler_derivative(&add(y, &k2, h / 2.0), p);
    let k4 = rossler_derivative(&add(y, &k3, h), p);
    let next = [
        y[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        y[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        y[2] + h / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
    ];
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence(format!("Rössler state became non-finite from {y:?}")));
    }
    Ok(next)
}

/// Dense trajectory of the Rössler flow, one entry per RK4 step (`steps + 1`
/// points including the initial state). No transient is discarded.
pub fn rossler_trajectory(p: &RosslerParams, steps: usize) -> Result<Vec<[f64; 3]>> {
    let mut out = Vec::with_capacity(steps + 1);
    let mut y = p.y_init;
    out.push(y);
    for _ in 0..steps {
        y = rossler_step(&y, p)?;
        out.push(y);
    }
    Ok(out)
}

/// Teacher samples of the full 3-state, taken every `sample_interval` after
/// discarding `transient` seconds.
pub fn rossler_teacher(p: &RosslerParams, count: usize) -> Result<Vec<[f64; 3]>> {
    let per_sample = p.substeps_per_sample()?;
    let mut y = p.y_init;
    let transient_steps = (p.transient / p.dt).round() as usize;
    for _ in 0..transient_steps {
        y = rossler_step(&y, p)?;
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(y);
        for _ in 0..per_sample {
            y = rossler_step(&y, p)?;
        }
    }
    Ok(out)
}

/// i.i.d. uniform values on `[lo, hi]` from a seeded ChaCha8 stream.
pub fn uniform_sequence(count: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng::seeded(seed);
    uniform_from(&mut rng, count, lo, hi)
}

pub fn uniform_from(rng: &mut rng::Rng, count: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..count).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
}

/// Second-order NARMA target for inputs `u`:
/// `y_{n+1} = 0.4 y_n + 0.4 y_n y_{n-1} + 0.6 u_n³ + 0.1`, starting from zero.
/// Element `n` of the result is `y_{n+1}`.
pub fn narma2(u: &[f64]) -> Vec<f64> {
    let (mut y_prev, mut y) = (0.0, 0.0);
    u.iter()
        .map(|&un| {
            let next = 0.4 * y + 0.4 * y * y_prev + 0.6 * un.powi(3) + 0.1;
            y_prev = y;
            y = next;
            next
        })
        .collect()
}

/// Writes a sequence as `step,value` CSV.
pub fn write_sequence_csv<W: Write>(mut w: W, values: &[f64]) -> Result<()> {
    writeln!(w, "step,value")?;
    for (i, v) in values.iter().enumerate() {
        writeln!(w, "{i},{}", crate::io::fmt_f64(*v))?;
    }
    Ok(())
}
