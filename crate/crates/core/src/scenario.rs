//! Named experiment protocols and their run bundles.
//!
//! Every run writes `config.json` (resolved config, content hash, RNG tag),
//! `sensors.csv`, `output.csv`, `weights.csv` where a readout is trained, and
//! `summary.json`. Scenario-specific tables sit next to them.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{self, DiagramMode, SpectralRegime, SpectrumMethod};
use crate::config::{RunConfig, Scenario, TeacherKind};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, read_numeric_csv};
use crate::ipc::{self, CapacitySpectrum};
use crate::loops::{
    self, closed_outputs, fit_teacher, run_closed_loop, run_open_loop, teacher_force, Affine, EsnReservoir,
    InitProtocol, LoadDisturbance, LoadSchedule, LoopRow, PamReservoir, Reservoir, SensorLogRow, TeacherData,
    TeacherScaling, TeacherSeries, TEACHER_PRESSURE_RANGE,
};
use crate::pam::{self, Pam};
use crate::readout::{self, fit_rows, nmse, predict_rows, ReadoutWeights};
use crate::reservoir::{Esn, EsnParams, MultiplexConfig, Sensor};
use crate::rng::{self, streams, RNG_ALGORITHM};
use crate::signals::{self, InputSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: String,
    pub seed: u64,
    pub config_hash: String,
    /// One-line result.
    pub headline: String,
    pub metrics: BTreeMap<String, Value>,
}

type Metrics = BTreeMap<String, Value>;

/// Runs `cfg.scenario` and writes its bundle into `out`.
pub fn run_scenario(cfg: &RunConfig, out: &Path) -> Result<Summary> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let hash = cfg.hash()?;
    let bundle_cfg = json!({ "config": cfg, "hash": hash, "rng": RNG_ALGORITHM });
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&bundle_cfg)? + "\n")?;
    let mut m = Metrics::new();
    let headline = match cfg.scenario {
        Scenario::SensorEmulation => sensor_emulation(cfg, out, &mut m)?,
        Scenario::Narma2 => narma2(cfg, out, &mut m)?,
        Scenario::EmbedSine | Scenario::EmbedRossler => embed(cfg, out, &mut m)?,
        Scenario::EmbedLogistic => embed_logistic(cfg, out, &mut m)?,
        Scenario::BifurcationA | Scenario::BifurcationB | Scenario::BifurcationC | Scenario::BifurcationD => {
            bifurcation(cfg, out, &mut m)?
        }
        Scenario::IpcSensors => ipc_sensors(cfg, out, &mut m)?,
        Scenario::PamSweep => pam_sweep(cfg, out, &mut m)?,
    };
    let summary = Summary {
        scenario: cfg.scenario.name().to_string(),
        seed: cfg.seed,
        config_hash: hash,
        headline,
        metrics: m,
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

// ---------------------------------------------------------------- writers

fn csv_writer(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

pub fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv_writer(path)?;
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    crate::io::write_table(&mut w, &header, rows)?;
    w.flush()?;
    Ok(())
}

fn strings(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn write_weights(path: &Path, w: &ReadoutWeights, names: &[String]) -> Result<()> {
    let mut f = csv_writer(path)?;
    let outs: Vec<String> = (0..w.output_dim()).map(|k| format!("w{k}")).collect();
    writeln!(f, "feature,{}", outs.join(","))?;
    for (name, row) in names.iter().zip(&w.w_out) {
        let vals: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        writeln!(f, "{name},{}", vals.join(","))?;
    }
    f.flush()?;
    Ok(())
}

fn write_sensor_log(path: &Path, log: &[SensorLogRow], every: usize) -> Result<()> {
    let rows = log
        .iter()
        .filter(|r| every > 0 && r.step % every == 0)
        .map(SensorLogRow::to_row);
    write_csv(path, &strings(&loops::SENSOR_LOG_HEADER), rows)
}

fn write_loop(path: &Path, rows: &[LoopRow]) -> Result<()> {
    let dims = rows.first().map_or(1, |r| r.y.len());
    write_csv(path, &loops::loop_header(dims), rows.iter().map(LoopRow::to_row))
}

// ---------------------------------------------------------------- building blocks

fn new_pam(cfg: &RunConfig, seed: u64) -> Pam {
    Pam::new(
        cfg.geometry,
        cfg.dynamics,
        cfg.calibration,
        cfg.noise,
        rng::stream(seed, streams::SENSOR_NOISE),
    )
}

fn pam_reservoir(cfg: &RunConfig, multiplex: MultiplexConfig, seed: u64) -> Result<PamReservoir> {
    Ok(PamReservoir::new(new_pam(cfg, seed), multiplex, cfg.schedule.interval)?
        .with_log()
        .with_disturbance(cfg.load.disturbance, seed))
}

fn esn_params(cfg: &RunConfig, nodes: usize, coupling: f64, seed: u64) -> EsnParams {
    EsnParams { nodes, coupling, seed, ..cfg.esn }
}

/// Uniform `u_n` on `[lo, hi]` from the drive stream and its control pressures.
fn uniform_drive(cfg: &RunConfig, count: usize, lo: f64, hi: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut r = rng::stream(cfg.seed, streams::DRIVE);
    let u = signals::uniform_from(&mut r, count, lo, hi);
    let p = u.iter().map(|&v| signals::to_pressure(v, &cfg.schedule)).collect::<Result<Vec<_>>>()?;
    Ok((u, p))
}

/// Maps the drive's pressure range onto `[-1, 1]` for an ESN input.
fn esn_input_map(s: &InputSchedule, lo: f64, hi: f64) -> Result<Affine> {
    let (a, b) = (s.magnitude * lo + s.bias, s.magnitude * hi + s.bias);
    TeacherScaling::range_map((a.min(b), a.max(b)), (-1.0, 1.0))
}

fn esn_features(params: EsnParams, input_map: Affine, drive: &[f64]) -> Result<Vec<Vec<f64>>> {
    let mut res = EsnReservoir::new(Esn::new(params)?, input_map);
    run_open_loop(&mut res, drive, drive.len(), &LoadSchedule::constant(0.0, drive.len().max(1)))
}

fn select_columns(x: &[Vec<f64>], all: &[String], keep: &[String]) -> Vec<Vec<f64>> {
    let idx: Vec<usize> = keep.iter().filter_map(|k| all.iter().position(|a| a == k)).collect();
    x.iter().map(|r| idx.iter().map(|&i| r[i]).collect()).collect()
}

fn column(rows: &[f64]) -> Vec<Vec<f64>> {
    rows.iter().map(|&v| vec![v]).collect()
}

fn fit_eval(x: &[Vec<f64>], y: &[f64], train: Range<usize>, eval: Range<usize>, lambda: f64) -> Result<(ReadoutWeights, Vec<f64>, f64)> {
    if eval.end > x.len() || train.end > x.len() {
        return Err(Error::TooShort { needed: eval.end.max(train.end), got: x.len() });
    }
    let w = fit_rows(&x[train.clone()], &column(&y[train]), lambda)?;
    let pred: Vec<f64> = predict_rows(&w, &x[eval.clone()])?.into_iter().map(|p| p[0]).collect();
    let e = nmse(&pred, &y[eval])?;
    Ok((w, pred, e))
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

// ---------------------------------------------------------------- studies

/// Ridge NMSE on `eval` when training on the first `size` rows after `n_wash`.
pub fn size_curve(x: &[Vec<f64>], y: &[f64], n_wash: usize, sizes: &[usize], eval: Range<usize>, lambda: f64) -> Result<Vec<f64>> {
    sizes
        .iter()
        .map(|&s| {
            if s == 0 || n_wash + s > eval.start {
                return Err(Error::config(format!(
                    "training size {s} exceeds the {} rows available before evaluation",
                    eval.start.saturating_sub(n_wash)
                )));
            }
            Ok(fit_eval(x, y, n_wash..n_wash + s, eval.clone(), lambda)?.2)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub size: usize,
    pub prc: f64,
    pub esn: f64,
}

/// NMSE versus training size for the physical reservoir and an ESN comparator
/// harvested on the same drive.
pub fn training_size_study(
    x_prc: &[Vec<f64>],
    x_esn: &[Vec<f64>],
    y: &[f64],
    n_wash: usize,
    sizes: &[usize],
    eval: Range<usize>,
    lambda: f64,
) -> Result<Vec<SizeRow>> {
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("training sizes must be ascending"));
    }
    let prc = size_curve(x_prc, y, n_wash, sizes, eval.clone(), lambda)?;
    let esn = size_curve(x_esn, y, n_wash, sizes, eval, lambda)?;
    Ok(sizes
        .iter()
        .zip(prc.into_iter().zip(esn))
        .map(|(&size, (prc, esn))| SizeRow { size, prc, esn })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearch {
    pub best: f64,
    /// `(A_cp, mean validation NMSE over seeds)`.
    pub table: Vec<(f64, f64)>,
}

/// Open-loop task for the ESN grid search: drive, target, split.
pub struct EsnTask<'a> {
    pub drive: &'a [f64],
    pub target: &'a [f64],
    pub input_map: Affine,
    pub n_wash: usize,
    pub n_train: usize,
    pub lambda: f64,
}

/// Picks A_cp by validation NMSE (last 10% of the training rows, fitted on
/// the rest), averaged over `seeds`; ties go to the smaller coupling.
pub fn esn_gridsearch(task: &EsnTask<'_>, base: EsnParams, grid: &[f64], seeds: &[u64]) -> Result<GridSearch> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::config("grid search needs at least one coupling and one seed"));
    }
    let n_val = (task.n_train / 10).max(1);
    let fit = task.n_wash..task.n_wash + task.n_train - n_val;
    let val = fit.end..task.n_wash + task.n_train;
    if fit.is_empty() || val.end > task.drive.len() {
        return Err(Error::TooShort { needed: val.end, got: task.drive.len() });
    }
    let drive = &task.drive[..val.end];
    let table = grid
        .par_iter()
        .map(|&a| {
            let scores = seeds
                .iter()
                .map(|&seed| {
                    let x = esn_features(EsnParams { coupling: a, seed, ..base }, task.input_map, drive)?;
                    Ok(fit_eval(&x, task.target, fit.clone(), val.clone(), task.lambda)?.2)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((a, scores.iter().sum::<f64>() / scores.len() as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<&(f64, f64)> = table.iter().collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let best = order
        .iter()
        .fold(None::<(f64, f64)>, |acc, &&(a, s)| match acc {
            Some((_, bs)) if !(s < bs) => acc,
            _ => Some((a, s)),
        })
        .map_or(grid[0], |b| b.0);
    Ok(GridSearch { best, table })
}

// ---------------------------------------------------------------- open loop

fn sensor_emulation(cfg: &RunConfig, out: &Path, m: &mut Metrics) -> Result<String> {
    let r = &cfg.readout;
    let pool = cfg.study.sizes.iter().copied().max().unwrap_or(0).max(r.n_train);
    let total = r.n_wash + pool + r.n_eval;
    let eval = r.n_wash + pool..total;
    let train = r.n_wash..r.n_wash + r.n_train;
    let (_, pressures) = uniform_drive(cfg, total, 0.0, 1.0)?;

    let multiplex = cfg.multiplex.clone();
    let names = multiplex.feature_names();
    let mut res = pam_reservoir(cfg, multiplex.clone(), cfg.seed)?;
    let x = run_open_loop(&mut res, &pressures, total, &LoadSchedule::constant(cfg.load.nominal, total))?;
    let log = res.take_log();
    let last = multiplex.samples_per_interval - 1;
    let target: Vec<f64> = log.iter().filter(|l| l.sub == last).map(|l| l.true_length).collect();

    let off_sensors: Vec<Sensor> = multiplex.ordered_sensors().into_iter().filter(|s| *s != Sensor::Load).collect();
    let off_names = MultiplexConfig { sensors: off_sensors, ..multiplex.clone() }.feature_names();
    let x_off = select_columns(&x, &names, &off_names);

    let (w_on, p_on, nmse_on) = fit_eval(&x, &target, train.clone(), eval.clone(), r.lambda)?;
    let (_, p_off, nmse_off) = fit_eval(&x_off, &target, train.clone(), eval.clone(), r.lambda)?;

    let input_map = esn_input_map(&cfg.schedule, 0.0, 1.0)?;
    let same_nodes = names.len() - usize::from(multiplex.include_bias);
    let task = EsnTask { drive: &pressures, target: &target, input_map, n_wash: r.n_wash, n_train: r.n_train, lambda: r.lambda };
    let gs = esn_gridsearch(&task, esn_params(cfg, same_nodes, cfg.esn.coupling, cfg.seed), &cfg.study.coupling_grid, &cfg.study.grid_seeds)?;
    let x_small = esn_features(esn_params(cfg, same_nodes, gs.best, cfg.seed), input_map, &pressures)?;
    let (_, _, nmse_esn) = fit_eval(&x_small, &target, train, eval.clone(), r.lambda)?;

    if !cfg.study.sizes.is_empty() {
        let base = esn_params(cfg, cfg.study.esn_nodes, cfg.esn.coupling, cfg.seed);
        let gs_big = esn_gridsearch(&task, base, &cfg.study.coupling_grid, &cfg.study.grid_seeds)?;
        let x_big = esn_features(EsnParams { coupling: gs_big.best, ..base }, input_map, &pressures)?;
        m.insert("esn_large_best_coupling".into(), json!(gs_big.best));
        let rows = training_size_study(&x, &x_big, &target, r.n_wash, &cfg.study.sizes, eval.clone(), r.lambda)?;
        let x_fixed = esn_features(base, input_map, &pressures)?;
        let fixed = size_curve(&x_fixed, &target, r.n_wash, &cfg.study.sizes, eval.clone(), r.lambda)?;
        write_csv(
            &out.join("training_size.csv"),
            &strings(&["size", "prc_nmse", "esn_nmse", "esn_default_coupling_nmse"]),
            rows.iter().zip(&fixed).map(|(s, f)| vec![s.size as f64, s.prc, s.esn, *f]),
        )?;
        let spread = |v: &[f64]| v.iter().cloned().fold(f64::MIN, f64::max) / v.iter().cloned().fold(f64::MAX, f64::min);
        let prc: Vec<f64> = rows.iter().map(|s| s.prc).collect();
        let first_last = |v: &[f64]| v[0] / v[v.len() - 1];
        let esn: Vec<f64> = rows.iter().map(|s| s.esn).collect();
        m.insert("training_size".into(), json!(rows));
        m.insert("prc_size_ratio".into(), json!(spread(&prc)));
        m.insert("esn_small_over_large".into(), json!(first_last(&esn)));
        m.insert("esn_default_coupling_small_over_large".into(), json!(first_last(&fixed)));
    }

    write_sensor_log(&out.join("sensors.csv"), &log, cfg.analysis.sensor_log_every)?;
    write_csv(
        &out.join("output.csv"),
        &strings(&["step", "target", "prediction_loads_on", "prediction_loads_off"]),
        eval.clone().zip(p_on.iter().zip(&p_off)).map(|(n, (a, b))| vec![n as f64, target[n], *a, *b]),
    )?;
    write_weights(&out.join("weights.csv"), &w_on, &names)?;
    write_csv(
        &out.join("esn_gridsearch.csv"),
        &strings(&["coupling", "validation_nmse"]),
        gs.table.iter().map(|(a, s)| vec![*a, *s]),
    )?;
    m.insert("nmse_loads_on".into(), json!(nmse_on));
    m.insert("nmse_loads_off".into(), json!(nmse_off));
    m.insert("nmse_esn_same_size".into(), json!(nmse_esn));
    m.insert("esn_best_coupling".into(), json!(gs.best));
    Ok(format!("length emulation NMSE loads-on {nmse_on:.3e}, loads-off {nmse_off:.3e}, ESN({same_nodes}) {nmse_esn:.3e}"))
}

fn narma2(cfg: &RunConfig, out: &Path, m: &mut Metrics) -> Result<String> {
    let r = &cfg.readout;
    let total = r.n_wash + r.n_train + r.n_eval;
    let (_, pressures) = uniform_drive(cfg, total, 0.0, 1.0)?;
    let target = signals::narma2(&pressures);
    let names = cfg.multiplex.feature_names();
    let mut res = pam_reservoir(cfg, cfg.multiplex.clone(), cfg.seed)?;
    let x = run_open_loop(&mut res, &pressures, total, &LoadSchedule::constant(cfg.load.nominal, total))?;
    let train = r.n_wash..r.n_wash + r.n_train;
    let eval = train.end..total;
    let (w, pred, e) = fit_eval(&x, &target, train.clone(), eval.clone(), r.lambda)?;

    let nodes = if cfg.study.esn_nodes > 0 { cfg.study.esn_nodes } else { names.len() - usize::from(cfg.multiplex.include_bias) };
    let input_map = esn_input_map(&cfg.schedule, 0.0, 1.0)?;
    let task = EsnTask { drive: &pressures, target: &target, input_map, n_wash: r.n_wash, n_train: r.n_train, lambda: r.lambda };
    let gs = esn_gridsearch(&task, esn_params(cfg, nodes, cfg.esn.coupling, cfg.seed), &cfg.study.coupling_grid, &cfg.study.grid_seeds)?;
    let xe = esn_features(esn_params(cfg, nodes, gs.best, cfg.seed), input_map, &pressures)?;
    let (_, _, e_esn) = fit_eval(&xe, &target, train, eval.clone(), r.lambda)?;

    write_sensor_log(&out.join("sensors.csv"), &res.take_log(), cfg.analysis.sensor_log_every)?;
    write_csv(
        &out.join("output.csv"),
        &strings(&["step", "u", "target", "prediction"]),
        eval.zip(&pred).map(|(n, p)| vec![n as f64, pressures[n], target[n], *p]),
    )?;
    write_weights(&out.join("weights.csv"), &w, &names)?;
    write_csv(
        &out.join("esn_gridsearch.csv"),
        &strings(&["coupling", "validation_nmse"]),
        gs.table.iter().map(|(a, s)| vec![*a, *s]),
    )?;
    m.insert("nmse".into(), json!(e));
    m.insert("nmse_esn".into(), json!(e_esn));
    m.insert("esn_nodes".into(), json!(nodes));
    m.insert("esn_best_coupling".into(), json!(gs.best));
    Ok(format!("NARMA2 NMSE {e:.4} (ESN({nodes}) {e_esn:.4})"))
}

// ---------------------------------------------------------------- closed loop

/// Teacher-forcing pairs and the continuation used by the teacher init.
struct Teacher {
    series: TeacherSeries,
    tail: Vec<Vec<f64>>,
}

fn build_teacher(cfg: &RunConfig, condition: usize) -> Result<Teacher> {
    let p = &cfg.closed_loop.protocol;
    let len = p.n_wash + p.n_train;
    let extra = p.n_init + 1;
    let t = &cfg.teacher;
    let traj: Vec<Vec<f64>> = match t.kind {
        TeacherKind::Sine => {
            let s = InputSchedule::sinusoid(1.0, 0.0, cfg.schedule.interval, t.periods[condition]);
            column(&signals::sine_sequence(len + extra, &s)?)
        }
        TeacherKind::Logistic if t.restart_every > 0 => {
            let mut r = rng::stream(cfg.seed, streams::DRIVE);
            let (inputs, targets) = signals::logistic_restarted(&t.logistic, len, t.restart_every, &mut r);
            let tail = column(&signals::logistic_series(&t.logistic, p.n_init.max(1)));
            return Ok(Teacher { series: TeacherSeries { inputs: column(&inputs), targets: column(&targets) }, tail });
        }
        TeacherKind::Logistic => column(&signals::logistic_series(&t.logistic, len + extra)),
        TeacherKind::Rossler => signals::rossler_teacher(&t.rossler, len + extra)?.into_iter().map(|v| v.to_vec()).collect(),
        TeacherKind::None => return Err(Error::config("scenario needs a teacher (teacher.kind)")),
    };
    Ok(Teacher { series: TeacherSeries::from_trajectory(&traj[..=len]), tail: traj[len..].to_vec() })
}

fn teacher_scaling(cfg: &RunConfig, teachers: &[Teacher]) -> Result<TeacherScaling> {
    let dims = teachers[0].series.inputs[0].len();
    match cfg.teacher.teacher_range {
        Some(r) => Ok(TeacherScaling::uniform(TeacherScaling::range_map(r, TEACHER_PRESSURE_RANGE)?, dims)),
        None => {
            let all: Vec<Vec<f64>> = teachers.iter().flat_map(|t| t.series.inputs.iter().chain(&t.series.targets).cloned()).collect();
            TeacherScaling::fit(&all, TEACHER_PRESSURE_RANGE)
        }
    }
}

struct Trained {
    w: ReadoutWeights,
    scaling: TeacherScaling,
    teachers: Vec<Teacher>,
    train_nmse: f64,
}

/// Teacher forcing on every training condition in order, then one joint fit.
fn train<R: Reservoir + ?Sized>(res: &mut R, cfg: &RunConfig) -> Result<Trained> {
    let conditions = match cfg.teacher.kind {
        TeacherKind::Sine => cfg.teacher.periods.len(),
        _ => 1,
    };
    let teachers: Vec<Teacher> = (0..conditions).map(|i| build_teacher(cfg, i)).collect::<Result<_>>()?;
    let scaling = teacher_scaling(cfg, &teachers)?;
    let proto = &cfg.closed_loop.protocol;
    let data: Vec<TeacherData> = teachers
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let seed = if i == 0 { cfg.seed } else { rng::child_seed(cfg.seed, i as u64) };
            teacher_force(res, &t.series, &scaling, proto, cfg.teacher.loads[i], seed)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&TeacherData> = data.iter().collect();
    let w = fit_teacher(&refs, proto.lambda)?;
    let (mut pred, mut tgt) = (Vec::new(), Vec::new());
    for d in &data {
        pred.extend(predict_rows(&w, &d.features[d.n_wash..])?);
        tgt.extend(d.targets[d.n_wash..].iter().cloned());
    }
    let train_nmse = readout::nmse_multi(&pred, &tgt)?;
    Ok(Trained { w, scaling, teachers, train_nmse })
}

fn init_name(i: InitProtocol) -> &'static str {
    match i {
        InitProtocol::Teacher => "teacher",
        InitProtocol::Zero => "zero",
        InitProtocol::Random => "random",
    }
}

fn loop_weight_names(cfg: &RunConfig) -> Vec<String> {
    cfg.multiplex.feature_names()
}

/// Attractor metrics of a sine embedding: RMS distance of delay points to the
/// target's delay ellipse over the analysis window, relative to the teacher sd.
pub fn sine_cycle_rms(closed: &[f64], interval: f64, period: f64, settle: usize, window: usize) -> Result<f64> {
    let end = (settle + window + 1).min(closed.len());
    if end <= settle + 1 {
        return Err(Error::TooShort { needed: settle + 2, got: closed.len() });
    }
    let shift = 2.0 * std::f64::consts::PI * interval / period;
    let curve = analysis::periodic_delay_curve(f64::sin, shift, 2000);
    Ok(analysis::delay_curve_rms(&closed[settle..end], 1, &curve)? * std::f64::consts::SQRT_2)
}

fn embed(cfg: &RunConfig, out: &Path, m: &mut Metrics) -> Result<String> {
    let interval = cfg.schedule.interval;
    let mut res = pam_reservoir(cfg, cfg.multiplex.clone(), cfg.seed)?;
    let tr = train(&mut res, cfg)?;
    let train_log = res.take_log();
    if !cfg.load.disturb_closed_loop {
        res.set_disturbance(LoadDisturbance { std: 0.0, ..cfg.load.disturbance }, cfg.seed);
    }
    let schedule = LoadSchedule::constant(cfg.load.nominal, cfg.closed_loop.closed_steps);
    let mut per_init = Vec::new();
    let mut headline = String::new();
    for (k, &init) in cfg.closed_loop.inits.iter().enumerate() {
        let mut r = res.clone();
        let rows = run_closed_loop(&mut r, &tr.w, &tr.scaling, &cfg.closed_loop.protocol, init, &tr.teachers[0].tail, &schedule, cfg.seed)?;
        let closed = closed_outputs(&rows, 0);
        let settle = cfg.analysis.settle.min(closed.len() / 2);
        let spec = analysis::power_spectrum(&closed[settle..], interval, SpectrumMethod::Welch)?;
        let mut entry = json!({
            "init": init_name(init),
            "dominant_frequency": spec.dominant_frequency_interpolated(),
            "peak_fraction": spec.peak_fraction(),
        });
        if cfg.teacher.kind == TeacherKind::Sine {
            let rms = sine_cycle_rms(&closed, interval, cfg.teacher.periods[0], settle, cfg.analysis.window)?;
            entry["cycle_rms"] = json!(rms);
        } else {
            let dims = rows[0].y.len();
            let teacher_spec = analysis::power_spectrum(
                &tr.teachers[0].series.inputs.iter().map(|v| v[0]).collect::<Vec<_>>(),
                interval,
                SpectrumMethod::Welch,
            )?;
            entry["teacher_dominant_frequency"] = json!(teacher_spec.dominant_frequency_interpolated());
            entry["output_ranges"] = json!((0..dims)
                .map(|d| {
                    let v = closed_outputs(&rows, d);
                    (v.iter().cloned().fold(f64::MAX, f64::min), v.iter().cloned().fold(f64::MIN, f64::max))
                })
                .collect::<Vec<_>>());
        }
        if k == 0 {
            write_loop(&out.join("output.csv"), &rows)?;
            let mut log = train_log.clone();
            log.extend(r.take_log());
            write_sensor_log(&out.join("sensors.csv"), &log, cfg.analysis.sensor_log_every)?;
            headline = format!(
                "closed-loop dominant frequency {:.4} Hz (train NMSE {:.2e})",
                spec.dominant_frequency_interpolated(),
                tr.train_nmse
            );
        } else {
            write_loop(&out.join(format!("output_{}.csv", init_name(init))), &rows)?;
        }
        per_init.push(entry);
    }
    if cfg.teacher.kind == TeacherKind::Sine {
        let worst = per_init.iter().filter_map(|e| e["cycle_rms"].as_f64()).fold(0.0, f64::max);
        m.insert("worst_cycle_rms".into(), json!(worst));
        headline += &format!(", worst cycle RMS {worst:.4}");
    }
    m.insert("dominant_frequency".into(), per_init[0]["dominant_frequency"].clone());
    m.insert("train_nmse".into(), json!(tr.train_nmse));
    m.insert("inits".into(), json!(per_init));
    write_weights(&out.join("weights.csv"), &tr.w, &loop_weight_names(cfg))?;
    Ok(headline)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticEmbedding {
    pub grid_error: f64,
    pub in_unit_interval: bool,
    pub peak_fraction: f64,
    pub train_nmse: f64,
}

fn logistic_run<R: Reservoir + ?Sized>(res: &mut R, cfg: &RunConfig) -> Result<(LogisticEmbedding, Vec<LoopRow>, ReadoutWeights)> {
    let tr = train(res, cfg)?;
    let a = cfg.teacher.logistic.a;
    let grid = analysis::linspace(0.05, 0.95, cfg.analysis.grid_points);
    let grid_error = analysis::one_step_map_error(res, &tr.w, &tr.scaling, &grid, cfg.analysis.grid_hold, cfg.load.nominal, |y| {
        a * y * (1.0 - y)
    })?;
    let schedule = LoadSchedule::constant(cfg.load.nominal, cfg.closed_loop.closed_steps);
    let rows = run_closed_loop(
        res,
        &tr.w,
        &tr.scaling,
        &cfg.closed_loop.protocol,
        cfg.closed_loop.inits[0],
        &tr.teachers[0].tail,
        &schedule,
        cfg.seed,
    )?;
    let closed = closed_outputs(&rows, 0);
    let settle = cfg.analysis.settle.min(closed.len() / 2);
    let spec = analysis::power_spectrum(&closed[settle..], cfg.schedule.interval, SpectrumMethod::Welch)?;
    let summary = LogisticEmbedding {
        grid_error,
        in_unit_interval: closed.iter().all(|v| (0.0..=1.0).contains(v)),
        peak_fraction: spec.peak_fraction(),
        train_nmse: tr.train_nmse,
    };
    Ok((summary, rows, tr.w))
}

fn embed_logistic(cfg: &RunConfig, out: &Path, m: &mut Metrics) -> Result<String> {
    let range = cfg.teacher.teacher_range.unwrap_or((0.0, 1.0));
    let to_pressure = TeacherScaling::range_map(range, TEACHER_PRESSURE_RANGE)?;
    let input_map = Affine { gain: 1.0 / to_pressure.gain, offset: -to_pressure.offset / to_pressure.gain };
    let mut esn = EsnReservoir::new(Esn::new(esn_params(cfg, cfg.esn.nodes, cfg.esn.coupling, cfg.seed))?, input_map);
    let (esn_sum, esn_rows, esn_w) = logistic_run(&mut esn, cfg)?;

    let mut res = pam_reservoir(cfg, cfg.multiplex.clone(), cfg.seed)?;
    let (pam_sum, pam_rows, pam_w) = logistic_run(&mut res, cfg)?;

    write_loop(&out.join("output.csv"), &esn_rows)?;
    write_loop(&out.join("output_pam.csv"), &pam_rows)?;
    let esn_names: Vec<String> = (0..cfg.esn.nodes).map(|i| format!("node_{i}")).chain(["bias".to_string()]).collect();
    write_weights(&out.join("weights.csv"), &esn_w, &esn_names)?;
    write_weights(&out.join("weights_pam.csv"), &pam_w, &loop_weight_names(cfg))?;
    write_sensor_log(&out.join("sensors.csv"), &res.take_log(), cfg.analysis.sensor_log_every)?;
    m.insert("esn".into(), json!(esn_sum));
    m.insert("pam".into(), json!(pam_sum));
    Ok(format!(
        "one-step map error ESN {:.4} / PAM {:.4}; ESN closed loop in [0,1]: {}, peak fraction {:.3}",
        esn_sum.grid_error, pam_sum.grid_error, esn_sum.in_unit_interval, esn_sum.peak_fraction
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub load: f64,
    pub dominant_frequency: f64,
    pub sd: f64,
    pub peak_fraction: f64,
    /// Welch bins holding 90% of the power.
    pub breadth: usize,
    pub regime: SpectralRegime,
    pub minima_per_period: f64,
}

fn regime_code(r: SpectralRegime) -> f64 {
    match r {
        SpectralRegime::Static => 0.0,
        SpectralRegime::Narrowband => 1.0,
        SpectralRegime::Broadband => 2.0,
    }
}

/// Per-plateau spectral analysis of a closed-loop sweep.
pub fn analyze_plateaus(closed: &[f64], schedule: &LoadSchedule, interval: f64, discard: f64, static_sd: f64) -> Result<Vec<Plateau>> {
    let mut start = 0;
    let mut out = Vec::with_capacity(schedule.plateaus.len());
    for &(load, hold) in &schedule.plateaus {
        let seg = closed
            .get(start + (hold as f64 * discard) as usize..start + hold)
            .ok_or(Error::TooShort { needed: start + hold, got: closed.len() })?;
        start += hold;
        let spec = analysis::power_spectrum(seg, interval, SpectrumMethod::Welch)?;
        let (_, sd) = mean_sd(seg);
        let minima = analysis::local_minima(seg).len() as f64;
        let f = spec.dominant_frequency_interpolated();
        let periods = (seg.len() as f64 * interval * f).max(1.0);
        out.push(Plateau {
            load,
            dominant_frequency: f,
            sd,
            peak_fraction: spec.peak_fraction(),
            breadth: spec.bins_for_fraction(0.9),
            regime: analysis::spectral_regime(seg, interval, static_sd)?,
            minima_per_period: minima / periods,
        });
    }
    Ok(out)
}

fn expected_transition(sc: Scenario) -> Option<(SpectralRegime, SpectralRegime)> {
    use SpectralRegime::*;
    match sc {
        Scenario::BifurcationA => Some((Narrowband, Static)),
        Scenario::BifurcationC => Some((Broadband, Narrowband)),
        Scenario::BifurcationD => Some((Narrowband, Broadband)),
        _ => None,
    }
}

fn bifurcation(cfg: &RunConfig, out: &Path, m: &mut Metrics) -> Result<String> {
    let interval = cfg.schedule.interval;
    let mut res = pam_reservoir(cfg, cfg.multiplex.clone(), cfg.seed)?;
    let tr = train(&mut res, cfg)?;
    if !cfg.load.disturb_closed_loop {
        res.set_disturbance(LoadDisturbance { std: 0.0, ..cfg.load.disturbance }, cfg.seed);
    }
    let schedule = cfg.load.sweep.schedule()?;
    let rows = run_closed_loop(
        &mut res,
        &tr.w,
        &tr.scaling,
        &cfg.closed_loop.protocol,
        cfg.closed_loop.inits[0],
        &tr.teachers[0].tail,
        &schedule,
        cfg.seed,
    )?;
    let closed = closed_outputs(&rows, 0);
    let teacher0: Vec<f64> = tr.teachers[0].series.inputs.iter().map(|v| v[0]).collect();
    let static_sd = cfg.analysis.static_sd_fraction * mean_sd(&teacher0).1;
    let plateaus = analyze_plateaus(&closed, &schedule, interval, cfg.analysis.transient_fraction, static_sd)?;

    let mut runs = Vec::new();
    let mut start = 0;
    for &(_, hold) in &schedule.plateaus {
        runs.push(closed[start..start + hold].to_vec());
        start += hold;
    }
    let diagram = analysis::bifurcation_diagram(&schedule.loads(), &runs, cfg.analysis.transient_fraction, DiagramMode::Samples)?;
    write_csv(&out.join("bifurcation.csv"), &strings(&["load", "y"]), diagram.to_rows())?;
    write_csv(
        &out.join("plateaus.csv"),
        &strings(&["load", "dominant_frequency", "sd", "peak_fraction", "breadth", "regime", "minima_per_period"]),
        plateaus.iter().map(|p| {
            vec![p.load, p.dominant_frequency, p.sd, p.peak_fraction, p.breadth as f64, regime_code(p.regime), p.minima_per_period]
        }),
    )?;
    write_loop(&out.join("output.csv"), &rows)?;
    write_weights(&out.join("weights.csv"), &tr.w, &loop_weight_names(cfg))?;
    write_sensor_log(&out.join("sensors.csv"), &res.take_log(), cfg.analysis.sensor_log_every)?;

    let regimes: Vec<SpectralRegime> = plateaus.iter().map(|p| p.regime).collect();
    m.insert("train_nmse".into(), json!(tr.train_nmse));
    m.insert("plateaus".into(), json!(plateaus));
    let headline = if cfg.scenario == Scenario::BifurcationB {
        let loads: Vec<f64> = plateaus.iter().map(|p| p.load).collect();
        let freqs: Vec<f64> = plateaus.iter().map(|p| p.dominant_frequency).collect();
        let rho = analysis::spearman(&loads, &freqs)?;
        m.insert("spearman_load_frequency".into(), json!(rho));
        m.insert("frequency_first".into(), json!(freqs[0]));
        m.insert("frequency_last".into(), json!(freqs[freqs.len() - 1]));
        format!(
            "dominant frequency {:.3} Hz at {} N -> {:.3} Hz at {} N, Spearman {rho:.3}",
            freqs[0],
            loads[0],
            freqs[freqs.len() - 1],
            loads[loads.len() - 1]
        )
    } else {
        let (from, to) = expected_transition(cfg.scenario).expect("bifurcation A/C/D");
        let found = analysis::find_transition(&regimes, from, to);
        let load = found.map(|i| plateaus[i + 1].load);
        m.insert("transition_from".into(), json!(from));
        m.insert("transition_to".into(), json!(to));
        m.insert("transition_load".into(), json!(load));
        match load {
            Some(l) => format!("{from:?} -> {to:?} at {l} N"),
            None => format!("no {from:?} -> {to:?} transition along the sweep"),
        }
    };
    Ok(headline)
}

// ---------------------------------------------------------------- IPC and sweeps

fn ipc_sensors(cfg: &RunConfig, out: &Path, m: &mut Metrics) -> Result<String> {
    let total = cfg.ipc.washout + cfg.ipc.samples;
    let (u, pressures) = uniform_drive(cfg, total, -1.0, 1.0)?;
    let names = cfg.multiplex.feature_names();
    let mut res = pam_reservoir(cfg, cfg.multiplex.clone(), cfg.seed)?;
    let x = run_open_loop(&mut res, &pressures, total, &LoadSchedule::constant(cfg.load.nominal, total))?;
    write_sensor_log(&out.join("sensors.csv"), &res.take_log(), cfg.analysis.sensor_log_every)?;
    write_csv(&out.join("input.csv"), &strings(&["u"]), u.iter().map(|&v| vec![v]))?;
    write_csv(&out.join("states.csv"), &names, x.iter().cloned())?;

    let icfg = ipc::IpcConfig { seed: cfg.seed, ..cfg.ipc.clone() };
    let mut sets: Vec<(String, Vec<String>)> = cfg
        .multiplex
        .ordered_sensors()
        .into_iter()
        .map(|s| {
            let keep = MultiplexConfig { sensors: vec![s], include_bias: false, ..cfg.multiplex.clone() }.feature_names();
            (s.name().to_string(), keep)
        })
        .collect();
    sets.push(("all".into(), names.clone()));
    let mut totals = BTreeMap::new();
    let mut table = Vec::new();
    for (label, keep) in &sets {
        let xs = select_columns(&x, &names, keep);
        let spec: CapacitySpectrum = ipc::total_ipc(&xs, &u, &icfg)?;
        spec.export(out, &format!("ipc_{label}"))?;
        let major: Vec<Value> = spec.major(5).iter().map(|e| json!([e.term.to_string(), e.thresholded])).collect();
        table.push(json!({
            "set": label,
            "total": spec.total,
            "rank": spec.rank,
            "features": spec.n_features,
            "memory_capacity": spec.memory_capacity(),
            "by_degree": spec.by_degree,
            "major": major,
            "degenerate": spec.degenerate,
        }));
        totals.insert(label.clone(), spec.total);
    }
    write_csv(
        &out.join("output.csv"),
        &strings(&["set", "total"]),
        totals.values().enumerate().map(|(i, t)| vec![i as f64, *t]),
    )?;
    m.insert("ipc".into(), json!(table));
    m.insert("totals".into(), json!(totals));
    let parts: Vec<String> = totals.iter().map(|(k, v)| format!("{k} {v:.3}")).collect();
    Ok(format!("IPC totals: {}", parts.join(", ")))
}

fn pam_sweep(cfg: &RunConfig, out: &Path, m: &mut Metrics) -> Result<String> {
    let sw = &cfg.load.sweep;
    let count = ((sw.to - sw.from) / sw.step + 1e-9).floor() as usize + 1;
    let loads: Vec<f64> = (0..count).map(|i| sw.from + sw.step * i as f64).collect();

    let static_rows: Vec<Vec<f64>> = loads
        .par_iter()
        .flat_map_iter(|&load| {
            cfg.study.pressures.iter().map(move |&p| {
                let l = pam::static_equilibrium(p, load, &cfg.dynamics, &cfg.geometry).unwrap_or(f64::NAN);
                vec![load, p, l]
            })
        })
        .collect();
    write_csv(&out.join("sweep_length.csv"), &strings(&["load", "pressure", "length"]), static_rows)?;

    let steps_per_period = cfg
        .schedule
        .steps_per_period()
        .ok_or_else(|| Error::config("schedule.period must be a whole number of intervals"))?;
    let l = cfg.multiplex.samples_per_interval;
    let period_samples = steps_per_period * l;
    let steps = cfg.study.periods * steps_per_period;
    let drive = signals::pressure_sequence(steps, &cfg.schedule)?;
    let per_load = loads
        .par_iter()
        .enumerate()
        .map(|(i, &load)| {
            let seed = rng::child_seed(cfg.seed, i as u64);
            let mut res = PamReservoir::new(new_pam(cfg, seed), cfg.multiplex.clone(), cfg.schedule.interval)?.with_log();
            run_open_loop(&mut res, &drive, steps, &LoadSchedule::constant(load, steps))?;
            let log = res.take_log();
            let r: Vec<f64> = log.iter().map(|s| s.true_resistance).collect();
            let tail = &r[r.len() - cfg.study.keep_periods * period_samples..];
            let report = analysis::local_minima_per_period(tail, period_samples)?;
            Ok((load, report, if i == 0 { log } else { Vec::new() }))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut modal = Vec::new();
    let mut minima_rows = Vec::new();
    let mut log0 = Vec::new();
    for (load, report, log) in per_load {
        modal.push(report.modal_count());
        minima_rows.extend(report.values.iter().map(|v| vec![load, *v]));
        if !log.is_empty() {
            log0 = log;
        }
    }
    write_csv(&out.join("output.csv"), &strings(&["load", "resistance_minimum"]), minima_rows)?;
    write_csv(
        &out.join("minima.csv"),
        &strings(&["load", "modal_minima_per_period"]),
        loads.iter().zip(&modal).map(|(l, c)| vec![*l, *c as f64]),
    )?;
    write_sensor_log(&out.join("sensors.csv"), &log0, cfg.analysis.sensor_log_every)?;
    let mut pattern = modal.clone();
    pattern.dedup();
    let text: Vec<String> = pattern.iter().map(usize::to_string).collect();
    m.insert("modal_minima".into(), json!(modal));
    m.insert("pattern".into(), json!(pattern));
    let changes: Vec<f64> = modal.windows(2).enumerate().filter(|(_, w)| w[0] != w[1]).map(|(i, _)| loads[i + 1]).collect();
    m.insert("change_loads".into(), json!(changes));
    Ok(format!("resistance minima per period along load: {} (changes at {:?} N)", text.join(" -> "), changes))
}

// ---------------------------------------------------------------- reports

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Report {
    Spectra,
    Bifurcation,
    Attractor,
}

impl std::str::FromStr for Report {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectra" => Ok(Report::Spectra),
            "bifurcation" => Ok(Report::Bifurcation),
            "attractor" => Ok(Report::Attractor),
            _ => Err(Error::config(format!("unknown report `{s}` (spectra|bifurcation|attractor)"))),
        }
    }
}

/// Closed-loop rows of a bundle's `output.csv`: (load, y0) per feedback step.
fn closed_series(dir: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let (header, rows) = read_numeric_csv(&dir.join("output.csv"))?;
    let col = |name: &str| header.iter().position(|h| h == name);
    let (Some(c), Some(l), Some(y)) = (col("closed"), col("load"), col("y0")) else {
        return Err(Error::config(format!("{} has no closed-loop output", dir.display())));
    };
    Ok(rows.iter().filter(|r| r[c] == 1.0).map(|r| (r[l], r[y])).unzip())
}

/// Writes `report_<kind>.csv` and a gnuplot script into the bundle.
pub fn analyze_bundle(dir: &Path, report: Report) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(dir.join("config.json"))
        .map_err(|e| Error::config(format!("{} is not a run bundle: {e}", dir.display())))?;
    let wrapped: Value = serde_json::from_str(&text)?;
    let cfg: RunConfig = serde_json::from_value(wrapped.get("config").cloned().unwrap_or(wrapped))
        .map_err(|e| Error::config(format!("bundle config: {e}")))?;
    let interval = cfg.schedule.interval;
    let (loads, ys) = closed_series(dir)?;
    let (name, header, rows, xl, yl, points) = match report {
        Report::Spectra => {
            let s = analysis::power_spectrum(&ys, interval, SpectrumMethod::Welch)?;
            let rows: Vec<Vec<f64>> = s.frequencies.iter().zip(&s.power).map(|(f, p)| vec![*f, *p]).collect();
            ("spectra", ["frequency", "power"], rows, "frequency (Hz)", "power", false)
        }
        Report::Attractor => {
            let pts = analysis::delay_embed(&ys, 2, 1)?;
            ("attractor", ["y_n", "y_n+1"], pts, "y_n", "y_{n+1}", true)
        }
        Report::Bifurcation => {
            let mut params = Vec::new();
            let mut runs: Vec<Vec<f64>> = Vec::new();
            for (l, y) in loads.iter().zip(&ys) {
                if params.last() != Some(l) {
                    params.push(*l);
                    runs.push(Vec::new());
                }
                runs.last_mut().expect("pushed").push(*y);
            }
            let d = analysis::bifurcation_diagram(&params, &runs, cfg.analysis.transient_fraction, DiagramMode::Samples)?;
            ("bifurcation", ["load", "y"], d.to_rows(), "load (N)", "y", true)
        }
    };
    let csv = dir.join(format!("report_{name}.csv"));
    write_csv(&csv, &strings(&header), rows)?;
    let gp = dir.join(format!("report_{name}.gp"));
    fs::write(&gp, analysis::gnuplot_script(&format!("report_{name}.csv"), 1, 2, name, xl, yl, points))?;
    Ok(vec![csv, gp])
}
