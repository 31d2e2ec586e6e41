//! Reservoir state construction: time-multiplexed sensor vectors for the
//! physical muscle and the echo-state-network baseline.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pam::SensorFrame;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sensor {
    Pressure,
    Length,
    Resistance,
    Load,
}

impl Sensor {
    pub const ALL: [Sensor; 4] = [Sensor::Pressure, Sensor::Length, Sensor::Resistance, Sensor::Load];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Sensor::Pressure => "pressure",
            Sensor::Length => "length",
            Sensor::Resistance => "resistance",
            Sensor::Load => "load",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiplexConfig {
    /// Samples per input interval (L).
    pub samples_per_interval: usize,
    pub sensors: Vec<Sensor>,
    pub include_bias: bool,
}

impl Default for MultiplexConfig {
    fn default() -> Self {
        Self {
            samples_per_interval: 5,
            sensors: Sensor::ALL.to_vec(),
            include_bias: true,
        }
    }
}

impl MultiplexConfig {
    pub fn with_sensors(sensors: &[Sensor]) -> Self {
        Self {
            sensors: sensors.to_vec(),
            ..Self::default()
        }
    }

    /// Sensors in canonical order, deduplicated.
    pub fn ordered_sensors(&self) -> Vec<Sensor> {
        let mut s = self.sensors.clone();
        s.sort();
        s.dedup();
        s
    }

    pub fn dimension(&self) -> usize {
        self.ordered_sensors().len() * self.samples_per_interval + usize::from(self.include_bias)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.samples_per_interval == 0 {
            errs.push("multiplex.samples_per_interval must be at least 1".to_string());
        }
        if self.sensors.is_empty() {
            errs.push("multiplex.sensors must not be empty".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Column names matching [`harvest`] output.
    pub fn feature_names(&self) -> Vec<String> {
        let sensors = self.ordered_sensors();
        let mut names = Vec::with_capacity(self.dimension());
        for k in 0..self.samples_per_interval {
            for s in &sensors {
                names.push(format!("{}_{k}", s.name()));
            }
        }
        if self.include_bias {
            names.push("bias".into());
        }
        names
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReservoirVector {
    pub values: Vec<f64>,
    pub step: usize,
}

/// Builds `x_n = [s(t); s(t + τ/L); …; s(t + τ(L−1)/L); 1]` from the `L`
/// frames of interval `step`, keeping only the masked sensors.
pub fn harvest(frames: &[SensorFrame], cfg: &MultiplexConfig, step: usize) -> Result<ReservoirVector> {
    if frames.len() != cfg.samples_per_interval {
        return Err(Error::Harvest {
            expected: cfg.samples_per_interval,
            got: frames.len(),
        });
    }
    cfg.validate()?;
    let sensors = cfg.ordered_sensors();
    let mut values = Vec::with_capacity(cfg.dimension());
    for frame in frames {
        let channels = frame.channels();
        values.extend(sensors.iter().map(|s| channels[s.index()]));
    }
    if cfg.include_bias {
        values.push(1.0);
    }
    Ok(ReservoirVector { values, step })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EsnParams {
    pub nodes: usize,
    /// Input scale A_in.
    pub input_scale: f64,
    /// Coupling magnitude A_cp; equals the spectral radius of the scaled internal matrix.
    pub coupling: f64,
    /// Weight stream seed; runs set it from their master seed.
    #[serde(skip)]
    pub seed: u64,
    pub input_dim: usize,
}

impl Default for EsnParams {
    fn default() -> Self {
        Self {
            nodes: 100,
            input_scale: 1.0,
            coupling: 0.9,
            seed: 1,
            input_dim: 1,
        }
    }
}

/// Echo state network with tanh nodes. `internal` is normalised to unit
/// spectral radius; the coupling is applied at every step.
#[derive(Debug, Clone)]
pub struct Esn {
    pub params: EsnParams,
    pub internal: DMatrix<f64>,
    pub input: DMatrix<f64>,
}

const SPECTRAL_TOL: f64 = 1e-9;
const SPECTRAL_MAX_ITER: usize = 10_000;
const SPECTRAL_WINDOW: usize = 50;

/// Spectral radius by block power iteration with Rayleigh–Ritz extraction.
///
/// A block of up to six vectors is iterated and re-orthonormalised; the
/// largest-modulus eigenvalue of the projected block matrix estimates the
/// spectral radius, which copes with complex-conjugate dominant pairs.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::DimensionMismatch { expected: n, got: m.ncols() });
    }
    if n == 0 {
        return Ok(0.0);
    }
    if n == 1 {
        return Ok(m[(0, 0)].abs());
    }
    let block = n.min(6);
    // deterministic start: columns of a fixed pseudo-random pattern
    let mut q = DMatrix::from_fn(n, block, |i, j| {
        let x = ((i * 7919 + j * 104_729 + 13) % 1009) as f64 / 1009.0;
        x - 0.5 + if i == j { 1.0 } else { 0.0 }
    });
    orthonormalize(&mut q);
    // Ritz values oscillate when the block splits a conjugate pair, so
    // convergence is judged on the spread over a trailing window.
    let mut window = std::collections::VecDeque::with_capacity(SPECTRAL_WINDOW);
    for _ in 0..SPECTRAL_MAX_ITER {
        let z = m * &q;
        let projected = q.transpose() * &z;
        let ritz = projected
            .complex_eigenvalues()
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max);
        q = z;
        if orthonormalize(&mut q) == 0 {
            // nilpotent-like block collapsed to zero
            return Ok(ritz);
        }
        if window.len() == SPECTRAL_WINDOW {
            window.pop_front();
        }
        window.push_back(ritz);
        if window.len() == SPECTRAL_WINDOW {
            let (lo, hi) = window.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            if hi - lo <= SPECTRAL_TOL * ritz.max(f64::MIN_POSITIVE) {
                return Ok(ritz);
            }
        }
    }
    Err(Error::Init(format!(
        "spectral radius did not converge within {SPECTRAL_MAX_ITER} iterations"
    )))
}

/// Modified Gram–Schmidt in place; returns the number of non-degenerate columns.
fn orthonormalize(q: &mut DMatrix<f64>) -> usize {
    let mut rank = 0;
    for j in 0..q.ncols() {
        for k in 0..j {
            let dot = q.column(j).dot(&q.column(k));
            let ck = q.column(k).clone_owned();
            q.column_mut(j).axpy(-dot, &ck, 1.0);
        }
        let norm = q.column(j).norm();
        if norm > 1e-300 {
            q.column_mut(j).scale_mut(1.0 / norm);
            rank += 1;
        } else {
            q.column_mut(j).fill(0.0);
        }
    }
    rank
}

impl Esn {
    pub fn new(params: EsnParams) -> Result<Self> {
        if params.nodes == 0 {
            return Err(Error::Init("node count must be at least 1".into()));
        }
        if params.coupling < 0.0 {
            return Err(Error::Init("coupling must be non-negative".into()));
        }
        let n = params.nodes;
        let mut rng = rng::stream(params.seed, rng::streams::ESN_WEIGHTS);
        let mut uniform = move || 2.0 * rng.random::<f64>() - 1.0;
        let mut internal = DMatrix::from_fn(n, n, |_, _| uniform());
        let input = DMatrix::from_fn(n, params.input_dim, |_, _| uniform());
        let rho = spectral_radius(&internal)?;
        if !(rho > 0.0) {
            return Err(Error::Init("internal matrix has zero spectral radius".into()));
        }
        internal /= rho;
        Ok(Self { params, internal, input })
    }

    pub fn zero_state(&self) -> DVector<f64> {
        DVector::zeros(self.params.nodes)
    }

    /// `x_t = tanh(A_cp W x_{t−1} + A_in W_in u_t)`.
    pub fn step(&self, state: &DVector<f64>, u: &[f64]) -> Result<DVector<f64>> {
        if state.len() != self.params.nodes {
            return Err(Error::DimensionMismatch { expected: self.params.nodes, got: state.len() });
        }
        if u.len() != self.params.input_dim {
            return Err(Error::DimensionMismatch { expected: self.params.input_dim, got: u.len() });
        }
        let mut pre = &self.internal * state * self.params.coupling;
        let u = DVector::from_column_slice(u);
        pre.gemv(self.params.input_scale, &self.input, &u, 1.0);
        Ok(pre.map(f64::tanh))
    }

    /// Readout features `[x; 1]`.
    pub fn features(state: &DVector<f64>) -> Vec<f64> {
        let mut v: Vec<f64> = state.iter().copied().collect();
        v.push(1.0);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(v: f64) -> SensorFrame {
        SensorFrame { pressure: v, length: 10.0 + v, resistance: 20.0 + v, load: 30.0 + v }
    }

    #[test]
    fn harvest_smallest_case() {
        let cfg = MultiplexConfig { samples_per_interval: 1, sensors: vec![Sensor::Pressure], include_bias: true };
        let x = harvest(&[frame(0.3)], &cfg, 0).unwrap();
        assert_eq!(x.values, vec![0.3, 1.0]);
    }

    #[test]
    fn harvest_dimensions() {
        let frames: Vec<_> = (0..5).map(|k| frame(k as f64)).collect();
        let all = MultiplexConfig::default();
        assert_eq!(harvest(&frames, &all, 0).unwrap().values.len(), 21);
        let no_load = MultiplexConfig::with_sensors(&[Sensor::Pressure, Sensor::Length, Sensor::Resistance]);
        assert_eq!(harvest(&frames, &no_load, 0).unwrap().values.len(), 16);
        assert_eq!(no_load.dimension(), 16);
        assert_eq!(no_load.feature_names().len(), 16);
    }

    #[test]
    fn harvest_order_and_bias() {
        let frames: Vec<_> = (0..2).map(|k| frame(k as f64)).collect();
        let cfg = MultiplexConfig {
            samples_per_interval: 2,
            sensors: vec![Sensor::Resistance, Sensor::Pressure],
            include_bias: true,
        };
        let x = harvest(&frames, &cfg, 3).unwrap();
        assert_eq!(x.values, vec![0.0, 20.0, 1.0, 21.0, 1.0]);
        assert_eq!(x.step, 3);
        assert_eq!(cfg.feature_names(), vec!["pressure_0", "resistance_0", "pressure_1", "resistance_1", "bias"]);
    }

    #[test]
    fn harvest_rejects_wrong_frame_count() {
        let cfg = MultiplexConfig::default();
        let err = harvest(&[frame(0.0)], &cfg, 0).unwrap_err();
        assert!(matches!(err, Error::Harvest { expected: 5, got: 1 }));
    }

    #[test]
    fn esn_is_deterministic_per_seed() {
        let p = EsnParams { nodes: 20, seed: 5, ..Default::default() };
        let a = Esn::new(p).unwrap();
        let b = Esn::new(p).unwrap();
        assert_eq!(a.internal, b.internal);
        assert_eq!(a.input, b.input);
        let c = Esn::new(EsnParams { seed: 6, ..p }).unwrap();
        assert_ne!(a.internal, c.internal);
    }

    #[test]
    fn esn_single_node() {
        let esn = Esn::new(EsnParams { nodes: 1, ..Default::default() }).unwrap();
        assert!((esn.internal[(0, 0)].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn esn_zero_in_zero_out() {
        let esn = Esn::new(EsnParams { nodes: 30, ..Default::default() }).unwrap();
        let x = esn.step(&esn.zero_state(), &[0.0]).unwrap();
        assert!(x.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn esn_without_coupling_is_memoryless() {
        let esn = Esn::new(EsnParams { nodes: 30, coupling: 0.0, ..Default::default() }).unwrap();
        let mut s = esn.zero_state();
        for u in [0.3, -0.7, 0.1] {
            s = esn.step(&s, &[u]).unwrap();
        }
        let fresh = esn.step(&DVector::from_element(30, 0.9), &[0.1]).unwrap();
        assert_eq!(s, fresh);
    }

    #[test]
    fn esn_states_stay_in_open_unit_interval() {
        let esn = Esn::new(EsnParams { nodes: 40, coupling: 1.2, ..Default::default() }).unwrap();
        let mut s = esn.zero_state();
        for t in 0..200 {
            s = esn.step(&s, &[(t as f64 * 0.37).sin() * 3.0]).unwrap();
            assert!(s.iter().all(|v| v.abs() < 1.0));
        }
        assert_eq!(Esn::features(&s).last(), Some(&1.0));
    }

    #[test]
    fn esn_fading_memory_below_unit_coupling() {
        let esn = Esn::new(EsnParams { nodes: 50, coupling: 0.7, ..Default::default() }).unwrap();
        let mut s = DVector::from_element(50, 0.5);
        let mut norms = Vec::new();
        for _ in 0..200 {
            s = esn.step(&s, &[0.0]).unwrap();
            norms.push(s.norm());
        }
        assert!(norms[199] < 1e-12, "final norm {}", norms[199]);
    }

    #[test]
    fn esn_step_checks_dimensions() {
        let esn = Esn::new(EsnParams { nodes: 4, ..Default::default() }).unwrap();
        assert!(esn.step(&DVector::zeros(3), &[0.0]).is_err());
        assert!(esn.step(&DVector::zeros(4), &[0.0, 1.0]).is_err());
    }

    fn schur_radius(m: &DMatrix<f64>) -> f64 {
        m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn power_iteration_matches_schur() {
        for seed in 1..=5u64 {
            let mut r = rng::stream(seed, 99);
            let m = DMatrix::from_fn(40, 40, |_, _| r.random_range(-1.0..1.0));
            let a = spectral_radius(&m).unwrap();
            let s = schur_radius(&m);
            assert!((a - s).abs() < 1e-8 * a, "seed {seed}: {a} vs {s}");
        }
    }

    #[test]
    fn coupling_equals_spectral_radius() {
        for nodes in [50usize, 600] {
            for seed in 1..=10u64 {
                let esn = Esn::new(EsnParams { nodes, coupling: 0.9, seed, ..Default::default() }).unwrap();
                let rho = spectral_radius(&(&esn.internal * esn.params.coupling)).unwrap();
                assert!((rho - 0.9).abs() < 1e-6, "N={nodes} seed={seed} rho={rho}");
                if nodes == 50 {
                    assert!((schur_radius(&esn.internal) - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn harvest_ignores_sensor_listing_order(perm in proptest::sample::subsequence(Sensor::ALL.to_vec(), 1..=4), rev in proptest::bool::ANY, v in -5.0f64..5.0) {
            let mut listed = perm.clone();
            if rev {
                listed.reverse();
            }
            let a = MultiplexConfig::with_sensors(&perm);
            let b = MultiplexConfig::with_sensors(&listed);
            let frames: Vec<SensorFrame> = (0..5).map(|k| frame(v + k as f64)).collect();
            proptest::prop_assert_eq!(harvest(&frames, &a, 0).unwrap(), harvest(&frames, &b, 0).unwrap());
        }
    }
}
