//! Open-loop driving, teacher-forced training and clipped closed-loop
//! feedback, with external load schedules.

use nalgebra::DVector;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pam::{Pam, SensorFrame};
use crate::readout::{self, Normal, ReadoutWeights};
use crate::reservoir::{harvest, Esn, MultiplexConfig};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRange {
    pub u_min: f64,
    pub u_max: f64,
}

impl Default for ClipRange {
    fn default() -> Self {
        Self { u_min: 0.0, u_max: 0.5 }
    }
}

impl ClipRange {
    pub fn validate(&self) -> Result<()> {
        if self.u_min < self.u_max {
            Ok(())
        } else {
            Err(Error::config(format!("clip range needs u_min < u_max, got [{}, {}]", self.u_min, self.u_max)))
        }
    }

    pub fn contains(&self, u: f64) -> bool {
        u >= self.u_min && u <= self.u_max
    }

    /// `contains` with a rounding slack of `tol` on both edges.
    pub fn contains_within(&self, u: f64, tol: f64) -> bool {
        u >= self.u_min - tol && u <= self.u_max + tol
    }
}

/// Clamps the previous output into the admissible control range.
pub fn clip_feedback(y_prev: f64, range: &ClipRange) -> f64 {
    if y_prev < range.u_min {
        range.u_min
    } else if y_prev > range.u_max {
        range.u_max
    } else {
        y_prev
    }
}

/// Piecewise-constant external load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadSchedule {
    /// `(load N, hold steps)` in order.
    pub plateaus: Vec<(f64, usize)>,
}

impl LoadSchedule {
    pub fn constant(load: f64, steps: usize) -> Self {
        Self { plateaus: vec![(load, steps)] }
    }

    /// `from`, `from + step`, … up to and including `to`.
    pub fn sweep(from: f64, to: f64, step: f64, hold: usize) -> Result<Self> {
        if !(step > 0.0) || to < from {
            return Err(Error::config("load sweep needs step > 0 and to >= from"));
        }
        let count = ((to - from) / step + 1e-9).floor() as usize + 1;
        let plateaus = (0..count).map(|i| (from + step * i as f64, hold)).collect();
        let s = Self { plateaus };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.plateaus.is_empty() {
            errs.push("load schedule is empty".to_string());
        }
        for (i, (load, hold)) in self.plateaus.iter().enumerate() {
            if *hold == 0 {
                errs.push(format!("load plateau {i} has zero hold steps"));
            }
            if !(0.0..=400.0).contains(load) {
                errs.push(format!("load plateau {i} ({load} N) outside [0, 400] N"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn total_steps(&self) -> usize {
        self.plateaus.iter().map(|p| p.1).sum()
    }

    /// Load at step `n`; the last plateau extends indefinitely.
    pub fn load_at(&self, n: usize) -> f64 {
        let mut acc = 0;
        for &(load, hold) in &self.plateaus {
            acc += hold;
            if n < acc {
                return load;
            }
        }
        self.plateaus.last().map_or(0.0, |p| p.0)
    }

    pub fn loads(&self) -> Vec<f64> {
        self.plateaus.iter().map(|p| p.0).collect()
    }
}

/// Affine map `v ↦ gain·v + offset` between teacher units and pressure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub gain: f64,
    pub offset: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { gain: 1.0, offset: 0.0 };

    pub fn forward(&self, v: f64) -> f64 {
        self.gain * v + self.offset
    }

    pub fn inverse(&self, p: f64) -> f64 {
        (p - self.offset) / self.gain
    }
}

/// Per-dimension teacher ↔ pressure maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherScaling {
    pub maps: Vec<Affine>,
}

pub const TEACHER_PRESSURE_RANGE: (f64, f64) = (0.1, 0.5);

impl TeacherScaling {
    /// Maps each teacher column's observed range onto `target`.
    pub fn fit(teacher: &[Vec<f64>], target: (f64, f64)) -> Result<Self> {
        let k = teacher.first().map_or(0, Vec::len);
        if k == 0 {
            return Err(Error::TooShort { needed: 1, got: 0 });
        }
        let mut maps = Vec::with_capacity(k);
        for c in 0..k {
            let (lo, hi) = teacher
                .iter()
                .map(|r| r[c])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            maps.push(Self::range_map((lo, hi), target)?);
        }
        Ok(Self { maps })
    }

    pub fn range_map(from: (f64, f64), to: (f64, f64)) -> Result<Affine> {
        if !(from.1 > from.0) {
            return Err(Error::DegenerateTarget);
        }
        let gain = (to.1 - to.0) / (from.1 - from.0);
        Ok(Affine { gain, offset: to.0 - gain * from.0 })
    }

    pub fn uniform(map: Affine, dims: usize) -> Self {
        Self { maps: vec![map; dims] }
    }

    pub fn dims(&self) -> usize {
        self.maps.len()
    }

    pub fn forward(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.maps).map(|(v, m)| m.forward(*v)).collect()
    }

    pub fn inverse(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.maps).map(|(v, m)| m.inverse(*v)).collect()
    }
}

/// Ornstein–Uhlenbeck perturbation added to the nominal load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadDisturbance {
    /// Stationary standard deviation (N).
    pub std: f64,
    /// Correlation time (s).
    pub correlation_time: f64,
}

impl Default for LoadDisturbance {
    fn default() -> Self {
        Self { std: 0.0, correlation_time: 2.0 }
    }
}

#[derive(Debug, Clone)]
struct OuState {
    cfg: LoadDisturbance,
    value: f64,
    rng: Rng,
}

impl OuState {
    fn advance(&mut self, h: f64) -> f64 {
        let decay = (-h / self.cfg.correlation_time).exp();
        let xi: f64 = self.rng.sample(StandardNormal);
        self.value = self.value * decay + self.cfg.std * (1.0 - decay * decay).sqrt() * xi;
        self.value
    }
}

/// Anything that turns one control value per input interval into a feature vector.
pub trait Reservoir {
    fn feature_dim(&self) -> usize;

    /// Applies `u` for one interval under nominal load `load`, returning `x_n`.
    fn drive(&mut self, u: f64, load: f64) -> Result<Vec<f64>>;
}

/// One sensor sample with its timing and the noise-free length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorLogRow {
    pub step: usize,
    pub sub: usize,
    pub time: f64,
    pub u: f64,
    pub frame: SensorFrame,
    pub true_length: f64,
    pub true_resistance: f64,
}

pub const SENSOR_LOG_HEADER: [&str; 10] = [
    "step", "sub", "time", "u", "pressure", "length", "resistance", "load", "true_length", "true_resistance",
];

impl SensorLogRow {
    pub fn to_row(&self) -> Vec<f64> {
        vec![
            self.step as f64,
            self.sub as f64,
            self.time,
            self.u,
            self.frame.pressure,
            self.frame.length,
            self.frame.resistance,
            self.frame.load,
            self.true_length,
            self.true_resistance,
        ]
    }
}

/// Simulated muscle sampled `L` times per input interval.
#[derive(Debug, Clone)]
pub struct PamReservoir {
    pub pam: Pam,
    pub multiplex: MultiplexConfig,
    /// Input interval τ (s).
    pub interval: f64,
    pub log: Option<Vec<SensorLogRow>>,
    disturbance: Option<OuState>,
    step: usize,
    /// Noise-free length at the end of the last interval.
    pub last_true_length: f64,
}

impl PamReservoir {
    pub fn new(pam: Pam, multiplex: MultiplexConfig, interval: f64) -> Result<Self> {
        multiplex.validate()?;
        if !(interval > 0.0) {
            return Err(Error::config("input interval must be positive"));
        }
        let l = pam.state.length;
        Ok(Self {
            pam,
            multiplex,
            interval,
            log: None,
            disturbance: None,
            step: 0,
            last_true_length: l,
        })
    }

    pub fn with_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn with_disturbance(mut self, cfg: LoadDisturbance, master_seed: u64) -> Self {
        self.set_disturbance(cfg, master_seed);
        self
    }

    /// Replaces the load disturbance; `std = 0` removes it.
    pub fn set_disturbance(&mut self, cfg: LoadDisturbance, master_seed: u64) {
        self.disturbance = (cfg.std > 0.0).then(|| OuState {
            cfg,
            value: 0.0,
            rng: rng::stream(master_seed, rng::streams::LOAD_DISTURBANCE),
        });
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn take_log(&mut self) -> Vec<SensorLogRow> {
        self.log.as_mut().map(std::mem::take).unwrap_or_default()
    }
}

impl Reservoir for PamReservoir {
    fn feature_dim(&self) -> usize {
        self.multiplex.dimension()
    }

    fn drive(&mut self, u: f64, load: f64) -> Result<Vec<f64>> {
        let l = self.multiplex.samples_per_interval;
        let h = self.interval / l as f64;
        let mut frames = Vec::with_capacity(l);
        for k in 0..l {
            let f_ex = load + self.disturbance.as_ref().map_or(0.0, |d| d.value);
            let frame = self.pam.sample(f_ex)?;
            if let Some(log) = self.log.as_mut() {
                log.push(SensorLogRow {
                    step: self.step,
                    sub: k,
                    time: self.step as f64 * self.interval + k as f64 * h,
                    u,
                    frame,
                    true_length: self.pam.state.length,
                    true_resistance: self.pam.resistance()?,
                });
            }
            frames.push(frame);
            let step = self.step;
            self.pam.advance(h, u, f_ex).map_err(|e| match e {
                Error::SimulationBlowup { length, lo, hi, .. } => Error::SimulationBlowup { step, length, lo, hi },
                other => other,
            })?;
            if let Some(d) = self.disturbance.as_mut() {
                d.advance(h);
            }
        }
        self.last_true_length = self.pam.state.length;
        let x = harvest(&frames, &self.multiplex, self.step)?;
        self.step += 1;
        Ok(x.values)
    }
}

/// Echo state network fed with `gain·u + offset`; load is ignored.
#[derive(Debug, Clone)]
pub struct EsnReservoir {
    pub esn: Esn,
    pub state: DVector<f64>,
    pub input_map: Affine,
}

impl EsnReservoir {
    pub fn new(esn: Esn, input_map: Affine) -> Self {
        let state = esn.zero_state();
        Self { esn, state, input_map }
    }
}

impl Reservoir for EsnReservoir {
    fn feature_dim(&self) -> usize {
        self.esn.params.nodes + 1
    }

    fn drive(&mut self, u: f64, _load: f64) -> Result<Vec<f64>> {
        self.state = self.esn.step(&self.state, &[self.input_map.forward(u)])?;
        Ok(Esn::features(&self.state))
    }
}

/// Drives `res` with `drive[n]` under `loads.load_at(n)` for `steps` intervals.
pub fn run_open_loop<R: Reservoir + ?Sized>(
    res: &mut R,
    drive: &[f64],
    steps: usize,
    loads: &LoadSchedule,
) -> Result<Vec<Vec<f64>>> {
    if drive.len() < steps {
        return Err(Error::TooShort { needed: steps, got: drive.len() });
    }
    drive[..steps]
        .iter()
        .enumerate()
        .map(|(n, &u)| res.drive(u, loads.load_at(n)))
        .collect()
}

/// Gaussian AR(1) perturbation added to the teacher drive during teacher
/// forcing: stationary std (MPa) and correlation length in input intervals
/// (0 for white). Targets stay clean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveNoise {
    pub std: f64,
    pub correlation_steps: f64,
}

impl DriveNoise {
    pub const OFF: DriveNoise = DriveNoise { std: 0.0, correlation_steps: 0.0 };
}

impl Default for DriveNoise {
    fn default() -> Self {
        Self { std: 0.008, correlation_steps: 25.0 }
    }
}

struct Ar1 {
    phi: f64,
    std: f64,
    value: f64,
    rng: Rng,
}

impl Ar1 {
    fn new(cfg: DriveNoise, rng: Rng) -> Self {
        let phi = if cfg.correlation_steps > 0.0 { (-1.0 / cfg.correlation_steps).exp() } else { 0.0 };
        Self { phi, std: cfg.std, value: 0.0, rng }
    }

    fn next(&mut self) -> f64 {
        if self.std == 0.0 {
            return 0.0;
        }
        let xi: f64 = self.rng.sample(StandardNormal);
        self.value = self.phi * self.value + self.std * (1.0 - self.phi * self.phi).sqrt() * xi;
        self.value
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitProtocol {
    Teacher,
    Zero,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopProtocol {
    pub n_wash: usize,
    pub n_train: usize,
    /// Open-loop steps between training and the closed-loop switch.
    pub n_init: usize,
    pub clip: ClipRange,
    pub lambda: f64,
    /// Output component fed back as control.
    pub feedback_index: usize,
    pub training_noise: DriveNoise,
}

impl Default for LoopProtocol {
    fn default() -> Self {
        Self {
            n_wash: 1000,
            n_train: 4000,
            n_init: 1000,
            clip: ClipRange::default(),
            lambda: readout::DEFAULT_LAMBDA,
            feedback_index: 0,
            training_noise: DriveNoise::default(),
        }
    }
}

/// Harvested teacher-forcing data for one load condition.
#[derive(Debug, Clone)]
pub struct TeacherData {
    pub features: Vec<Vec<f64>>,
    /// Scaled `y_{n+1}`, aligned with `features`.
    pub targets: Vec<Vec<f64>>,
    pub n_wash: usize,
}

impl TeacherData {
    pub fn normal(&self) -> Result<Normal> {
        Normal::from_rows(&self.features[self.n_wash..], &self.targets[self.n_wash..])
    }
}

/// Teacher-forcing pairs in teacher units: `targets[n]` is the successor of
/// `inputs[n]`. A plain trajectory gives `targets[n] = inputs[n + 1]`;
/// restarted trajectories break that chain at the restart points only.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSeries {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl TeacherSeries {
    pub fn from_trajectory(traj: &[Vec<f64>]) -> Self {
        let n = traj.len().saturating_sub(1);
        Self {
            inputs: traj[..n].to_vec(),
            targets: traj[1..].to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Drives with scaled `inputs[n][feedback]` (plus the protocol's training
/// noise, clipped) and records `(x_n, scaled targets[n])` for
/// `n_wash + n_train` steps.
pub fn teacher_force<R: Reservoir + ?Sized>(
    res: &mut R,
    teacher: &TeacherSeries,
    scaling: &TeacherScaling,
    proto: &LoopProtocol,
    load: f64,
    seed: u64,
) -> Result<TeacherData> {
    let steps = proto.n_wash + proto.n_train;
    if teacher.len() < steps || teacher.targets.len() != teacher.inputs.len() {
        return Err(Error::TooShort { needed: steps, got: teacher.len().min(teacher.targets.len()) });
    }
    proto.clip.validate()?;
    if proto.feedback_index >= scaling.dims() {
        return Err(Error::config("feedback index exceeds teacher dimension"));
    }
    let mut noise = Ar1::new(proto.training_noise, rng::stream(seed, rng::streams::TRAINING_NOISE));
    let mut features = Vec::with_capacity(steps);
    let mut targets = Vec::with_capacity(steps);
    for n in 0..steps {
        let scaled = scaling.forward(&teacher.inputs[n]);
        let u = scaled[proto.feedback_index];
        if !proto.clip.contains_within(u, 1e-12) {
            return Err(Error::config(format!("scaled teacher {u} MPa at step {n} lies outside the clip range")));
        }
        let u = clip_feedback(u + noise.next(), &proto.clip);
        features.push(res.drive(u, load)?);
        targets.push(scaling.forward(&teacher.targets[n]));
    }
    Ok(TeacherData { features, targets, n_wash: proto.n_wash })
}

/// Fits one readout on the stacked training rows of every condition.
pub fn fit_teacher(data: &[&TeacherData], lambda: f64) -> Result<ReadoutWeights> {
    let mut acc: Option<Normal> = None;
    let mut rows = 0;
    for d in data {
        let n = d.normal()?;
        rows += d.features.len() - d.n_wash;
        match acc.as_mut() {
            Some(a) => a.add(&n)?,
            None => acc = Some(n),
        }
    }
    let acc = acc.ok_or(Error::TooShort { needed: 1, got: 0 })?;
    let w = acc.solve(lambda)?;
    Ok(ReadoutWeights {
        w_out: (0..w.nrows()).map(|i| w.row(i).iter().copied().collect()).collect(),
        ridge_lambda: lambda,
        train_start: data.first().map_or(0, |d| d.n_wash),
        train_end: rows,
    })
}

/// Teacher forcing at a single load followed by a ridge fit.
pub fn teacher_force_train<R: Reservoir + ?Sized>(
    res: &mut R,
    teacher: &TeacherSeries,
    scaling: &TeacherScaling,
    proto: &LoopProtocol,
    load: f64,
    seed: u64,
) -> Result<(ReadoutWeights, TeacherData)> {
    let data = teacher_force(res, teacher, scaling, proto, load, seed)?;
    let w = fit_teacher(&[&data], proto.lambda)?;
    Ok((w, data))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Init,
    Closed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopRow {
    pub step: usize,
    pub phase: Phase,
    pub load: f64,
    /// Applied control (MPa).
    pub u: f64,
    /// Readout output in teacher units.
    pub y: Vec<f64>,
}

impl LoopRow {
    pub fn to_row(&self) -> Vec<f64> {
        let mut r = vec![
            self.step as f64,
            match self.phase {
                Phase::Init => 0.0,
                Phase::Closed => 1.0,
            },
            self.load,
            self.u,
        ];
        r.extend(&self.y);
        r
    }
}

pub fn loop_header(dims: usize) -> Vec<String> {
    let mut h: Vec<String> = ["step", "closed", "load", "u"].iter().map(|s| s.to_string()).collect();
    h.extend((0..dims).map(|k| format!("y{k}")));
    h
}

/// Init phase (`proto.n_init` open-loop steps under `init`, at the first
/// plateau's load) followed by clipped feedback through the load schedule.
/// `teacher_tail` supplies the teacher for [`InitProtocol::Teacher`].
pub fn run_closed_loop<R: Reservoir + ?Sized>(
    res: &mut R,
    w: &ReadoutWeights,
    scaling: &TeacherScaling,
    proto: &LoopProtocol,
    init: InitProtocol,
    teacher_tail: &[Vec<f64>],
    schedule: &LoadSchedule,
    seed: u64,
) -> Result<Vec<LoopRow>> {
    proto.clip.validate()?;
    schedule.validate()?;
    if w.output_dim() != scaling.dims() {
        return Err(Error::DimensionMismatch { expected: scaling.dims(), got: w.output_dim() });
    }
    let fi = proto.feedback_index;
    let init_load = schedule.load_at(0);
    let mut init_rng = rng::stream(seed, rng::streams::INIT_PROTOCOL);
    let mut rows = Vec::with_capacity(proto.n_init + schedule.total_steps());
    let mut y_prev = vec![0.0; scaling.dims()];
    let mut step = 0usize;
    for n in 0..proto.n_init {
        let u = match init {
            InitProtocol::Teacher => {
                let t = teacher_tail
                    .get(n)
                    .ok_or(Error::TooShort { needed: proto.n_init, got: teacher_tail.len() })?;
                clip_feedback(scaling.forward(t)[fi], &proto.clip)
            }
            InitProtocol::Zero => proto.clip.u_min.max(0.0),
            InitProtocol::Random => init_rng.random_range(proto.clip.u_min..proto.clip.u_max),
        };
        let x = res.drive(u, init_load)?;
        y_prev = checked_predict(w, &x, step)?;
        rows.push(LoopRow { step, phase: Phase::Init, load: init_load, u, y: scaling.inverse(&y_prev) });
        step += 1;
    }
    for n in 0..schedule.total_steps() {
        let load = schedule.load_at(n);
        let u = clip_feedback(y_prev[fi], &proto.clip);
        debug_assert!(proto.clip.contains(u));
        let x = res.drive(u, load)?;
        y_prev = checked_predict(w, &x, step)?;
        rows.push(LoopRow { step, phase: Phase::Closed, load, u, y: scaling.inverse(&y_prev) });
        step += 1;
    }
    Ok(rows)
}

fn checked_predict(w: &ReadoutWeights, x: &[f64], step: usize) -> Result<Vec<f64>> {
    let y = readout::predict(w, x)?;
    if y.iter().all(|v| v.is_finite()) {
        Ok(y)
    } else {
        Err(Error::FeedbackDivergence { last_stable_step: step.saturating_sub(1) })
    }
}

/// Closed-loop outputs of component `k` (teacher units) during the feedback phase.
pub fn closed_outputs(rows: &[LoopRow], k: usize) -> Vec<f64> {
    rows.iter().filter(|r| r.phase == Phase::Closed).map(|r| r.y[k]).collect()
}
