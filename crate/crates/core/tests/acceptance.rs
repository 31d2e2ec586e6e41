//! Acceptance run: one line per criterion, non-zero exit if any fails.
//!
//! `cargo test --test acceptance` runs everything; a numeric argument
//! (`cargo test --test acceptance -- 6`) runs a single criterion.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use pamrc::config::{RunConfig, Scenario};
use pamrc::ipc::{self, IpcConfig};
use pamrc::loops::{run_open_loop, Affine, EsnReservoir, LoadSchedule};
use pamrc::pam::{
    loop_area, pam_step, quasi_static_path, static_equilibrium, static_residual, PamDynParams, PamGeometry,
    PamState,
};
use pamrc::readout::{fit_rows, normal_equation_residual, predict_rows};
use pamrc::reservoir::{Esn, EsnParams};
use pamrc::scenario::{run_scenario, Summary};
use pamrc::signals;
use rand::Rng as _;

struct Check {
    pass: bool,
    detail: String,
}

impl Check {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn run(scenario: Scenario, dir: &Path) -> Summary {
    run_scenario(&RunConfig::defaults(scenario), dir).expect("scenario run")
}

fn metric(s: &Summary, key: &str) -> f64 {
    s.metrics[key].as_f64().unwrap_or(f64::NAN)
}

// 1
fn ridge() -> Check {
    let mut worst = 0.0f64;
    for seed in 1..=5 {
        let mut r = pamrc::rng::seeded(seed);
        let x: Vec<Vec<f64>> = (0..1000).map(|_| (0..21).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()).collect();
        let y: Vec<Vec<f64>> = (0..1000).map(|_| vec![r.random::<f64>(), r.random::<f64>()]).collect();
        for lambda in [0.0, 1e-6, 1.0] {
            let w = fit_rows(&x, &y, lambda).unwrap();
            worst = worst.max(normal_equation_residual(&x, &y, &w).unwrap());
        }
    }
    let mut r = pamrc::rng::seeded(99);
    let x: Vec<Vec<f64>> = (0..21).map(|i| (0..21).map(|j| if i == j { 3.0 } else { r.random::<f64>() - 0.5 }).collect()).collect();
    let y: Vec<Vec<f64>> = (0..21).map(|_| vec![r.random::<f64>()]).collect();
    let w = fit_rows(&x, &y, 0.0).unwrap();
    let interp = predict_rows(&w, &x)
        .unwrap()
        .iter()
        .flatten()
        .zip(y.iter().flatten())
        .map(|(p, t)| (p - t).abs())
        .fold(0.0, f64::max);
    Check::new(
        worst <= 1e-8 && interp <= 1e-10,
        format!("max relative normal-equation residual {worst:.2e}, interpolation error {interp:.2e}"),
    )
}

// 2
fn ipc_rank_bound() -> Check {
    let cfg = IpcConfig { samples: 50_000, seed: 1, ..IpcConfig::default() };
    let u = signals::uniform_sequence(50_000, -1.0, 1.0, 11);
    let mut ok = true;
    let mut parts = Vec::new();
    let mut slowest = 0.0f64;
    for n in [3usize, 5, 10] {
        let x = ipc::delay_line_states(&u, n);
        let t = Instant::now();
        let s = ipc::total_ipc(&x, &u, &cfg).unwrap();
        slowest = slowest.max(t.elapsed().as_secs_f64());
        ok &= s.total >= 0.95 * n as f64 && s.total <= n as f64 + 0.01;
        parts.push(format!("delay line {n}: {:.4}", s.total));
    }

    let esn = Esn::new(EsnParams { nodes: 20, coupling: 0.9, seed: 1, ..EsnParams::default() }).unwrap();
    let mut res = EsnReservoir::new(esn, Affine::IDENTITY);
    let u2 = signals::uniform_sequence(20_000, -1.0, 1.0, 12);
    let x = run_open_loop(&mut res, &u2, u2.len(), &LoadSchedule::constant(0.0, u2.len())).unwrap();
    let s = ipc::total_ipc(&x, &u2, &IpcConfig { washout: 500, ..cfg.clone() }).unwrap();
    ok &= s.total <= s.n_features as f64 + 0.01;
    parts.push(format!("ESN-20: {:.3} <= {}", s.total, s.n_features));

    let dir = tempfile::tempdir().unwrap();
    let summary = run(Scenario::IpcSensors, dir.path());
    for set in summary.metrics["ipc"].as_array().unwrap() {
        let total = set["total"].as_f64().unwrap();
        let features = set["features"].as_u64().unwrap() as f64;
        ok &= total <= features + 0.01;
        parts.push(format!("PAM {}: {total:.3} <= {features}", set["set"].as_str().unwrap()));
    }
    ok &= slowest <= 120.0;
    parts.push(format!("D=10 K=4 on 5e4 samples in {slowest:.1} s"));
    Check::new(ok, parts.join("; "))
}

// 3
fn esn_radius() -> Check {
    let mut worst = 0.0f64;
    for nodes in [50usize, 600] {
        for seed in 1..=10 {
            for coupling in [0.5, 0.9, 1.2] {
                let esn = Esn::new(EsnParams { nodes, coupling, seed, ..EsnParams::default() }).unwrap();
                let m: DMatrix<f64> = &esn.internal * coupling;
                let rho = m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
                worst = worst.max((rho - coupling).abs());
            }
        }
    }
    Check::new(worst <= 1e-6, format!("max |rho(A_cp W) - A_cp| {worst:.2e} (Schur eigenvalues)"))
}

fn sine_lengths(params: &PamDynParams, dt: f64) -> Vec<f64> {
    let g = PamGeometry::default();
    let mut st = PamState::at_rest(&g);
    let sub = (0.02 / dt).round() as usize;
    let mut out = Vec::new();
    for n in 0..9 * 12 {
        let u = 0.3 + 0.2 * (2.0 * std::f64::consts::PI * n as f64 / 12.0).sin();
        for _ in 0..5 {
            out.push(st.length);
            for _ in 0..sub {
                st = pam_step(&st, u, 150.0, dt, params, &g).unwrap();
            }
        }
    }
    out
}

// 4
fn pam_sanity() -> Check {
    let g = PamGeometry::default();
    let p = PamDynParams::default();
    let mut band_ok = true;
    let mut worst_ratio = 0.0f64;
    for (u, load) in [(0.1, 100.0), (0.3, 150.0), (0.5, 250.0), (0.2, 220.0)] {
        let mut st = PamState::at_rest(&g);
        for _ in 0..30_000 {
            st = pam_step(&st, u, load, p.dt, &p, &g).unwrap();
        }
        // bisection is independent of the Newton solver
        let (mut lo, mut hi) = (0.6 * g.l0, 1.4 * g.l0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if static_residual(mid, u, load, &p, &g) > 0.0 { lo = mid } else { hi = mid }
        }
        let newton = static_equilibrium(u, load, &p, &g).unwrap();
        band_ok &= (newton - 0.5 * (lo + hi)).abs() < 1e-8;
        let band = p.c_coul / (p.a_elas + p.d_force * g.schulze_stiffness(newton, u));
        worst_ratio = worst_ratio.max((st.length - newton).abs() / band);
    }
    band_ok &= worst_ratio <= 1.01;

    let up: Vec<f64> = (0..=200).map(|i| 0.1 + 0.4 * i as f64 / 200.0).collect();
    let cycle: Vec<f64> = up.iter().chain(up.iter().rev()).copied().collect();
    let area = |c: f64| {
        let q = PamDynParams { c_coul: c, ..p };
        let start = static_equilibrium(cycle[0], 150.0, &q, &g).unwrap();
        loop_area(&cycle, &quasi_static_path(&cycle, 150.0, start, &q, &g).unwrap()).abs()
    };
    let (with, without) = (area(p.c_coul), area(0.0));
    let hyst_ok = with > 0.0 && without < 1e-9 * with;

    let a = sine_lengths(&p, 1e-3);
    let b = sine_lengths(&p, 5e-4);
    let sup = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    Check::new(
        band_ok && hyst_ok && sup < 1e-4,
        format!(
            "dynamic rest offset {worst_ratio:.3} stiction-band widths from the static balance; loop area {with:.3e} (C>0) vs {without:.1e} (C=0); RK4 self-convergence {sup:.2e} mm"
        ),
    )
}

// 5
fn thickness_and_minima() -> Check {
    let g = PamGeometry::default();
    let h = 25.0 / 1000.0;
    let grid: Vec<f64> = (0..=1000).map(|i| 95.0 + h * i as f64).collect();
    let arg = grid
        .iter()
        .copied()
        .max_by(|a, b| g.thickness(*a).unwrap().total_cmp(&g.thickness(*b).unwrap()))
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let s = run(Scenario::PamSweep, dir.path());
    let pattern: Vec<u64> = s.metrics["pattern"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    Check::new(
        (arg - g.l0).abs() <= h && pattern == [1, 2, 1],
        format!("thickness argmax {arg:.3} mm (l0 {}); minima pattern {pattern:?}, changes at {}", g.l0, s.metrics["change_loads"]),
    )
}

// 6
fn limit_cycle() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let s = run(Scenario::EmbedSine, dir.path());
    let target = 1.0 / 1.2;
    let mut ok = true;
    let mut parts = Vec::new();
    for init in s.metrics["inits"].as_array().unwrap() {
        let f = init["dominant_frequency"].as_f64().unwrap();
        let rms = init["cycle_rms"].as_f64().unwrap();
        ok &= (f - target).abs() <= 0.05 * target && rms <= 0.05;
        parts.push(format!("{}: {f:.4} Hz, RMS {rms:.4}", init["init"].as_str().unwrap()));
    }
    Check::new(ok, parts.join("; "))
}

// 7
fn logistic() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let s = run(Scenario::EmbedLogistic, dir.path());
    let (esn, pam) = (&s.metrics["esn"], &s.metrics["pam"]);
    let err = esn["grid_error"].as_f64().unwrap();
    let inside = esn["in_unit_interval"].as_bool().unwrap();
    let peak = esn["peak_fraction"].as_f64().unwrap();
    Check::new(
        err < 0.05 && inside && peak <= 0.5,
        format!(
            "ESN-100 map error {err:.4}, outputs in [0,1]: {inside}, peak bin {peak:.3}; simulated PAM map error {:.4}, peak bin {:.3}",
            pam["grid_error"].as_f64().unwrap(),
            pam["peak_fraction"].as_f64().unwrap()
        ),
    )
}

// 8
fn bifurcation_b() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let s = run(Scenario::BifurcationB, dir.path());
    let rho = metric(&s, "spearman_load_frequency");
    let freqs: Vec<f64> = s.metrics["plateaus"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["dominant_frequency"].as_f64().unwrap())
        .collect();
    let (lo, hi) = (0.95 / 2.4, 1.05 / 1.2);
    let bracketed = freqs.iter().all(|f| (lo..=hi).contains(f));
    Check::new(
        rho.abs() > 0.9 && bracketed,
        format!(
            "Spearman {rho:.3}; frequency {:.3} Hz at 100 N to {:.3} Hz at 250 N, all within [1/2.4, 1/1.2]±5%: {bracketed}",
            freqs[0],
            freqs[freqs.len() - 1]
        ),
    )
}

// 9
fn bifurcations_acd() -> Check {
    let mut ok = true;
    let mut parts = Vec::new();
    for sc in [Scenario::BifurcationA, Scenario::BifurcationC, Scenario::BifurcationD] {
        let dir = tempfile::tempdir().unwrap();
        let s = run(sc, dir.path());
        let load = &s.metrics["transition_load"];
        ok &= !load.is_null();
        parts.push(format!("{}: {}", sc.name(), s.headline));
    }
    Check::new(ok, parts.join("; "))
}

// 10
fn sensor_emulation() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let s = run(Scenario::SensorEmulation, dir.path());
    let secs = t.elapsed().as_secs_f64();
    let (on, off) = (metric(&s, "nmse_loads_on"), metric(&s, "nmse_loads_off"));
    let prc_ratio = metric(&s, "prc_size_ratio");
    let esn_ratio = metric(&s, "esn_small_over_large");
    Check::new(
        on < 0.1 && on <= off && prc_ratio < 3.0 && esn_ratio > 3.0 && secs <= 600.0,
        format!(
            "NMSE loads-on {on:.3e}, loads-off {off:.3e}; PRC size spread {prc_ratio:.2}; grid-searched ESN-600 NMSE(100)/NMSE(10000) {esn_ratio:.2} (A_cp {}; default A_cp gives {:.1}); {secs:.0} s",
            s.metrics["esn_large_best_coupling"],
            metric(&s, "esn_default_coupling_small_over_large")
        ),
    )
}

fn csv_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "csv"))
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect()
}

// 11
fn determinism() -> Check {
    let mut ok = true;
    let mut files = 0;
    for sc in [
        Scenario::Narma2,
        Scenario::EmbedSine,
        Scenario::EmbedLogistic,
        Scenario::BifurcationD,
        Scenario::PamSweep,
        Scenario::IpcSensors,
    ] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run(sc, a.path());
        run(sc, b.path());
        let (ca, cb) = (csv_bytes(a.path()), csv_bytes(b.path()));
        files += ca.len();
        ok &= !ca.is_empty() && ca == cb;
    }
    Check::new(ok, format!("{files} CSV files byte-identical across two runs of six scenarios"))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 11] = [
        ("ridge correctness", ridge),
        ("IPC rank bound", ipc_rank_bound),
        ("ESN spectral radius", esn_radius),
        ("PAM model sanity", pam_sanity),
        ("thickness and resistance structure", thickness_and_minima),
        ("limit-cycle embedding", limit_cycle),
        ("logistic embedding", logistic),
        ("bifurcation B frequency ordering", bifurcation_b),
        ("bifurcations A/C/D regime change", bifurcations_acd),
        ("sensor emulation", sensor_emulation),
        ("determinism", determinism),
    ];
    let only: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let t = Instant::now();
        let check = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Check::new(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!check.pass);
        println!(
            "criterion {:>2} {:<36} {} ({:.1} s) {}",
            i + 1,
            name,
            if check.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            check.detail
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
