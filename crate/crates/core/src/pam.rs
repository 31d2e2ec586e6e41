//! McKibben pneumatic artificial muscle: rubber-thickness geometry, Schulze
//! contraction force, the length dynamics and the four sensor channels.
//!
//! Units throughout: length mm, time s, pressure MPa, force N. The muscle
//! length `l` is simulated directly; the elastic term restores towards the
//! equilibrium length `l0`, and positive displacement means extension.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Rest geometry of the rubber tube and braid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PamGeometry {
    /// Equilibrium length (mm).
    pub l0: f64,
    /// Equilibrium outer diameter (mm).
    pub outer_diameter: f64,
    /// Equilibrium inner diameter (mm); also the Schulze reference diameter.
    pub inner_diameter: f64,
    /// Braid angle at equilibrium (rad).
    pub braid_angle: f64,
    /// Linear length → outer-diameter fit: `slope * l + intercept` (mm).
    pub outer_fit_slope: f64,
    pub outer_fit_intercept: f64,
    /// Length (mm) converting the Schulze expression `π D0 p / 4 ...`
    /// (N/mm for D0 in mm and p in MPa) into newtons.
    pub force_length_scale: f64,
}

impl Default for PamGeometry {
    fn default() -> Self {
        Self {
            l0: 108.0,
            outer_diameter: 11.0,
            inner_diameter: 9.0,
            braid_angle: std::f64::consts::FRAC_PI_6,
            outer_fit_slope: -0.3382,
            outer_fit_intercept: 47.525,
            force_length_scale: 9.0,
        }
    }
}

impl PamGeometry {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.l0 > 0.0) {
            errs.push(format!("geometry.l0 must be positive, got {}", self.l0));
        }
        if !(self.outer_diameter > self.inner_diameter && self.inner_diameter > 0.0) {
            errs.push(format!(
                "geometry requires outer_diameter > inner_diameter > 0, got {} / {}",
                self.outer_diameter, self.inner_diameter
            ));
        }
        if !(self.braid_angle > 0.0 && self.braid_angle < std::f64::consts::FRAC_PI_2) {
            errs.push(format!("geometry.braid_angle must lie in (0, π/2), got {}", self.braid_angle));
        }
        if !(self.force_length_scale > 0.0) {
            errs.push("geometry.force_length_scale must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Rubber volume `π((D_out/2)² − (D_in/2)²) l0` (mm³).
    pub fn rubber_volume(&self) -> f64 {
        let ro = self.outer_diameter / 2.0;
        let ri = self.inner_diameter / 2.0;
        std::f64::consts::PI * (ro * ro - ri * ri) * self.l0
    }

    /// Inner radius at equilibrium, derived from the outer-radius fit and the
    /// rubber volume so that the inner radius is continuous at `l0`.
    pub fn r0(&self) -> f64 {
        let r_out = self.outer_fit_value(self.l0) / 2.0;
        (r_out * r_out - self.rubber_volume() / (self.l0 * std::f64::consts::PI)).sqrt()
    }

    fn outer_fit_value(&self, length: f64) -> f64 {
        self.outer_fit_slope * length + self.outer_fit_intercept
    }

    /// Outer radius R(l). The linear fit yields a diameter (10.999 mm at
    /// 108 mm); half of it is returned.
    pub fn outer_radius(&self, length: f64) -> Result<f64> {
        if !(length > 0.0) {
            return Err(Error::Geometry(format!("length must be positive, got {length}")));
        }
        let r = self.outer_fit_value(length) / 2.0;
        if !(r > 0.0) {
            return Err(Error::Geometry(format!("non-positive outer radius {r} at length {length}")));
        }
        Ok(r)
    }

    /// Inner radius r(l): constant when extended, volume-conserving when contracted.
    pub fn inner_radius(&self, length: f64) -> Result<f64> {
        let r_out = self.outer_radius(length)?;
        if length >= self.l0 {
            return Ok(self.r0());
        }
        let radicand = r_out * r_out - self.rubber_volume() / (length * std::f64::consts::PI);
        if radicand < 0.0 {
            return Err(Error::Geometry(format!(
                "negative inner-radius radicand {radicand} at length {length}"
            )));
        }
        Ok(radicand.sqrt())
    }

    /// Wall thickness d = R − r (mm). Peaks at `l0`.
    pub fn thickness(&self, length: f64) -> Result<f64> {
        Ok(self.outer_radius(length)? - self.inner_radius(length)?)
    }

    /// Schulze contraction force (N) at `length` and `pressure` (MPa).
    pub fn schulze_force(&self, length: f64, pressure: f64) -> f64 {
        let strain = (self.l0 - length) / self.l0;
        let (s, c) = self.braid_angle.sin_cos();
        let one_minus = 1.0 - strain;
        std::f64::consts::PI * self.inner_diameter * pressure / 4.0 / s
            * (3.0 * one_minus * one_minus * c - 1.0)
            * self.force_length_scale
    }

    /// d F / d l of the Schulze force at fixed pressure.
    pub fn schulze_stiffness(&self, length: f64, pressure: f64) -> f64 {
        let strain = (self.l0 - length) / self.l0;
        let (s, c) = self.braid_angle.sin_cos();
        std::f64::consts::PI * self.inner_diameter * pressure / 4.0 / s
            * (6.0 * (1.0 - strain) * c / self.l0)
            * self.force_length_scale
    }

    /// Contraction strain at which the Schulze force vanishes.
    pub fn zero_force_strain(&self) -> f64 {
        1.0 - (3.0 * self.braid_angle.cos()).powf(-0.5)
    }
}

/// Coefficients of the length dynamics
/// `l̈ = −A (l − l0) − B l̇ − C tanh(l̇/δ) + D (F_ex − F_preload − F_pre(l, p))`
/// together with the first-order lag from control to measured pressure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PamDynParams {
    /// Elastic coefficient (1/s²).
    pub a_elas: f64,
    /// Viscous coefficient (1/s).
    pub b_visc: f64,
    /// Coulomb friction magnitude (mm/s²).
    pub c_coul: f64,
    /// Force gain (mm/s² per N).
    pub d_force: f64,
    /// Velocity scale of the smoothed sign (mm/s).
    pub sgn_smooth_delta: f64,
    /// Control → measured pressure lag (s).
    pub pressure_lag_tau: f64,
    /// Constant contractile force of the sleeve/end fittings (N).
    pub preload: f64,
    /// Fixed RK4 step (s).
    pub dt: f64,
}

impl Default for PamDynParams {
    fn default() -> Self {
        Self {
            a_elas: 6353.0,
            b_visc: 80.05,
            c_coul: 4000.0,
            d_force: 254.0,
            sgn_smooth_delta: 10.0,
            pressure_lag_tau: 0.02,
            preload: 130.0,
            dt: 1e-3,
        }
    }
}

impl PamDynParams {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("dynamics.a_elas", self.a_elas),
            ("dynamics.b_visc", self.b_visc),
            ("dynamics.c_coul", self.c_coul),
            ("dynamics.d_force", self.d_force),
            ("dynamics.pressure_lag_tau", self.pressure_lag_tau),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                errs.push(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(self.sgn_smooth_delta > 0.0) {
            errs.push("dynamics.sgn_smooth_delta must be positive".into());
        }
        if !(self.dt > 0.0) {
            errs.push("dynamics.dt must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Length change per newton of static load.
    pub fn compliance(&self) -> f64 {
        self.d_force / self.a_elas
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PamState {
    /// mm
    pub length: f64,
    /// mm/s
    pub velocity: f64,
    /// MPa
    pub pressure: f64,
}

impl PamState {
    pub fn at_rest(geom: &PamGeometry) -> Self {
        Self {
            length: geom.l0,
            velocity: 0.0,
            pressure: 0.0,
        }
    }
}

/// Four sampled channels, in fixed order pressure, length, resistance, load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorFrame {
    pub pressure: f64,
    pub length: f64,
    pub resistance: f64,
    pub load: f64,
}

impl SensorFrame {
    pub fn channels(&self) -> [f64; 4] {
        [self.pressure, self.length, self.resistance, self.load]
    }
}

/// Affine thickness → resistance calibration, `slope * d + offset` with `slope > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResistanceCalibration {
    pub slope: f64,
    pub offset: f64,
}

impl Default for ResistanceCalibration {
    fn default() -> Self {
        Self {
            slope: 0.2,
            offset: 0.8,
        }
    }
}

pub fn resistance_of(thickness: f64, calib: &ResistanceCalibration) -> f64 {
    calib.slope * thickness + calib.offset
}

/// Standard deviations of additive Gaussian sensor noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// MPa
    pub pressure: f64,
    /// mm
    pub length: f64,
    pub resistance: f64,
    /// N
    pub load: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            pressure: 5e-4,
            length: 1e-2,
            resistance: 1e-4,
            load: 0.5,
        }
    }
}

impl NoiseConfig {
    pub fn silent() -> Self {
        Self {
            pressure: 0.0,
            length: 0.0,
            resistance: 0.0,
            load: 0.0,
        }
    }
}

/// Net acceleration (mm/s²) of the length ODE.
pub fn acceleration(
    length: f64,
    velocity: f64,
    pressure: f64,
    f_ex: f64,
    params: &PamDynParams,
    geom: &PamGeometry,
) -> f64 {
    -params.a_elas * (length - geom.l0) - params.b_visc * velocity
        - params.c_coul * (velocity / params.sgn_smooth_delta).tanh()
        + params.d_force * (f_ex - params.preload - geom.schulze_force(length, pressure))
}

/// Static force residual (mm/s²) at rest; zero at the frictionless equilibrium.
pub fn static_residual(length: f64, pressure: f64, f_ex: f64, params: &PamDynParams, geom: &PamGeometry) -> f64 {
    acceleration(length, 0.0, pressure, f_ex, params, geom)
}

fn derivative(
    s: &PamState,
    u_control: f64,
    f_ex: f64,
    params: &PamDynParams,
    geom: &PamGeometry,
) -> [f64; 3] {
    let dp = if params.pressure_lag_tau > 0.0 {
        (u_control - s.pressure) / params.pressure_lag_tau
    } else {
        0.0
    };
    [
        s.velocity,
        acceleration(s.length, s.velocity, s.pressure, f_ex, params, geom),
        dp,
    ]
}

/// Advances the muscle by one RK4 step of `dt` under constant control
/// pressure and external load. Pressure relaxes towards `u_control` with the
/// configured lag (instantaneously when the lag is zero).
pub fn pam_step(
    state: &PamState,
    u_control: f64,
    f_ex: f64,
    dt: f64,
    params: &PamDynParams,
    geom: &PamGeometry,
) -> Result<PamState> {
    let start = if params.pressure_lag_tau > 0.0 {
        *state
    } else {
        PamState { pressure: u_control, ..*state }
    };
    let shift = |s: &PamState, k: &[f64; 3], h: f64| PamState {
        length: s.length + h * k[0],
        velocity: s.velocity + h * k[1],
        pressure: s.pressure + h * k[2],
    };
    let k1 = derivative(&start, u_control, f_ex, params, geom);
    let k2 = derivative(&shift(&start, &k1, dt / 2.0), u_control, f_ex, params, geom);
    let k3 = derivative(&shift(&start, &k2, dt / 2.0), u_control, f_ex, params, geom);
    let k4 = derivative(&shift(&start, &k3, dt), u_control, f_ex, params, geom);
    let combine = |i: usize| (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) * dt / 6.0;
    let next = PamState {
        length: start.length + combine(0),
        velocity: start.velocity + combine(1),
        pressure: start.pressure + combine(2),
    };
    let (lo, hi) = (0.5 * geom.l0, 1.5 * geom.l0);
    if !next.length.is_finite() || next.length < lo || next.length > hi || !next.velocity.is_finite() {
        return Err(Error::SimulationBlowup {
            step: 0,
            length: next.length,
            lo,
            hi,
        });
    }
    Ok(next)
}

/// Frictionless static equilibrium length by Newton iteration on the force balance.
pub fn static_equilibrium(pressure: f64, f_ex: f64, params: &PamDynParams, geom: &PamGeometry) -> Result<f64> {
    let mut l = geom.l0;
    for _ in 0..100 {
        let f = static_residual(l, pressure, f_ex, params, geom);
        let df = -params.a_elas - params.d_force * geom.schulze_stiffness(l, pressure);
        let step = f / df;
        l -= step;
        if step.abs() < 1e-13 * geom.l0 {
            return Ok(l);
        }
    }
    Err(Error::Numerical("static equilibrium Newton solve did not converge".into()))
}

/// Quasi-static length path under slowly varying pressure with a Coulomb
/// stiction band: the muscle stays put while the static residual lies inside
/// `±c_coul`, otherwise it moves to the nearest band edge.
pub fn quasi_static_path(
    pressures: &[f64],
    f_ex: f64,
    start_length: f64,
    params: &PamDynParams,
    geom: &PamGeometry,
) -> Result<Vec<f64>> {
    let mut l = start_length;
    let mut out = Vec::with_capacity(pressures.len());
    for &p in pressures {
        let r = static_residual(l, p, f_ex, params, geom);
        if r > params.c_coul || r < -params.c_coul {
            let edge = if r > 0.0 { params.c_coul } else { -params.c_coul };
            // solve residual(l) = edge
            for _ in 0..100 {
                let f = static_residual(l, p, f_ex, params, geom) - edge;
                let df = -params.a_elas - params.d_force * geom.schulze_stiffness(l, p);
                let step = f / df;
                l -= step;
                if step.abs() < 1e-13 * geom.l0 {
                    break;
                }
            }
        }
        out.push(l);
    }
    Ok(out)
}

/// Signed area enclosed by a closed polyline (shoelace formula).
pub fn loop_area(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len());
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let j = (i + 1) % n;
        acc += xs[i] * ys[j] - xs[j] * ys[i];
    }
    acc / 2.0
}

/// Muscle simulator: state, parameters and a private sensor-noise stream.
#[derive(Debug, Clone)]
pub struct Pam {
    pub geometry: PamGeometry,
    pub params: PamDynParams,
    pub calibration: ResistanceCalibration,
    pub noise: NoiseConfig,
    pub state: PamState,
    noise_rng: Rng,
}

impl Pam {
    pub fn new(
        geometry: PamGeometry,
        params: PamDynParams,
        calibration: ResistanceCalibration,
        noise: NoiseConfig,
        noise_rng: Rng,
    ) -> Self {
        Self {
            state: PamState::at_rest(&geometry),
            geometry,
            params,
            calibration,
            noise,
            noise_rng,
        }
    }

    /// Integrates for `duration` seconds at constant control and load.
    pub fn advance(&mut self, duration: f64, u_control: f64, f_ex: f64) -> Result<()> {
        let steps = (duration / self.params.dt).round().max(0.0) as usize;
        for _ in 0..steps {
            self.state = pam_step(&self.state, u_control, f_ex, self.params.dt, &self.params, &self.geometry)?;
        }
        Ok(())
    }

    /// Noise-free resistance for the current length.
    pub fn resistance(&self) -> Result<f64> {
        Ok(resistance_of(self.geometry.thickness(self.state.length)?, &self.calibration))
    }

    /// Samples the four channels for the current state.
    pub fn sample(&mut self, f_ex: f64) -> Result<SensorFrame> {
        sample_sensors(
            &self.state,
            f_ex,
            &self.geometry,
            &self.calibration,
            &self.noise,
            &mut self.noise_rng,
        )
    }
}

pub fn sample_sensors(
    state: &PamState,
    f_ex: f64,
    geom: &PamGeometry,
    calib: &ResistanceCalibration,
    noise: &NoiseConfig,
    rng: &mut Rng,
) -> Result<SensorFrame> {
    let mut gauss = |std: f64| {
        if std > 0.0 {
            std * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        }
    };
    let resistance = resistance_of(geom.thickness(state.length)?, calib);
    Ok(SensorFrame {
        pressure: state.pressure + gauss(noise.pressure),
        length: state.length + gauss(noise.length),
        resistance: resistance + gauss(noise.resistance),
        load: f_ex + gauss(noise.load),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::local_minima_per_period;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn geom() -> PamGeometry {
        PamGeometry::default()
    }

    fn sine_pressure(n: usize) -> f64 {
        0.3 + 0.2 * (2.0 * PI * n as f64 / 12.0).sin()
    }

    /// Noise-free (length, resistance) sampled five times per 0.1 s interval.
    fn run_sine(params: &PamDynParams, load: f64, periods: usize, dt: f64) -> (Vec<f64>, Vec<f64>) {
        let g = geom();
        let calib = ResistanceCalibration::default();
        let mut st = PamState::at_rest(&g);
        let sub = (0.02 / dt).round() as usize;
        let (mut ls, mut rs) = (Vec::new(), Vec::new());
        for n in 0..periods * 12 {
            let u = sine_pressure(n);
            for _ in 0..5 {
                ls.push(st.length);
                rs.push(resistance_of(g.thickness(st.length).unwrap(), &calib));
                for _ in 0..sub {
                    st = pam_step(&st, u, load, dt, params, &g).unwrap();
                }
            }
        }
        (ls, rs)
    }

    fn run_to_rest(u: f64, load: f64, params: &PamDynParams) -> PamState {
        let g = geom();
        let mut st = PamState::at_rest(&g);
        for _ in 0..30_000 {
            st = pam_step(&st, u, load, params.dt, params, &g).unwrap();
        }
        st
    }

    #[test]
    fn schulze_force_zero_pressure_and_zero_strain_point() {
        let g = geom();
        assert_eq!(g.schulze_force(100.0, 0.0), 0.0);
        assert_abs_diff_eq!(g.zero_force_strain(), 0.3796, epsilon = 1e-4);
        let l_star = g.l0 * (1.0 - g.zero_force_strain());
        assert_abs_diff_eq!(g.schulze_force(l_star, 0.4), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn outer_radius_values() {
        let g = geom();
        assert_abs_diff_eq!(g.outer_radius(108.0).unwrap(), 5.4997, epsilon = 1e-4);
        assert_abs_diff_eq!(g.outer_radius(100.0).unwrap(), 6.8525, epsilon = 1e-4);
        assert!(g.outer_radius(0.0).is_err());
        assert!(g.outer_radius(200.0).is_err());
    }

    #[test]
    fn inner_radius_branches() {
        let g = geom();
        assert_abs_diff_eq!(g.inner_radius(108.0).unwrap(), 4.5, epsilon = 1e-3);
        assert_eq!(g.inner_radius(115.0).unwrap(), g.r0());
        let v = PI * (5.5f64.powi(2) - 4.5f64.powi(2)) * 108.0;
        assert_abs_diff_eq!(g.rubber_volume(), 3392.92, epsilon = 0.01);
        let expected = (6.8525f64.powi(2) - v / (100.0 * PI)).sqrt();
        assert_abs_diff_eq!(g.inner_radius(100.0).unwrap(), expected, epsilon = 1e-3);
    }

    #[test]
    fn thickness_peaks_at_l0_and_is_continuous() {
        let g = geom();
        assert_abs_diff_eq!(g.thickness(108.0).unwrap(), 1.0, epsilon = 0.01);
        assert!(g.thickness(103.0).unwrap() < g.thickness(108.0).unwrap());
        assert!(g.thickness(113.0).unwrap() < g.thickness(108.0).unwrap());
        let jump = (g.thickness(108.0 - 1e-6).unwrap() - g.thickness(108.0 + 1e-6).unwrap()).abs();
        assert!(jump < 1e-6, "jump {jump}");
    }

    #[test]
    fn thickness_and_resistance_argmax_at_l0() {
        let g = geom();
        let calib = ResistanceCalibration::default();
        for cells in [251usize, 1000, 2501] {
            let h = 25.0 / (cells - 1) as f64;
            let grid: Vec<f64> = (0..cells).map(|i| 95.0 + h * i as f64).collect();
            let d: Vec<f64> = grid.iter().map(|&l| g.thickness(l).unwrap()).collect();
            let r: Vec<f64> = d.iter().map(|&t| resistance_of(t, &calib)).collect();
            let arg = |v: &[f64]| (0..v.len()).max_by(|a, b| v[*a].total_cmp(&v[*b])).unwrap();
            assert!((grid[arg(&d)] - g.l0).abs() <= h);
            assert_eq!(arg(&d), arg(&r));
        }
    }

    #[test]
    fn resistance_identity_calibration() {
        let c = ResistanceCalibration { slope: 1.0, offset: 0.0 };
        assert_eq!(resistance_of(1.0, &c), 1.0);
    }

    #[test]
    fn comes_to_rest_at_static_balance() {
        let p = PamDynParams::default();
        let g = geom();
        for (u, load) in [(0.1, 100.0), (0.3, 150.0), (0.5, 250.0)] {
            let st = run_to_rest(u, load, &p);
            assert!(st.velocity.abs() < 1e-6, "velocity {}", st.velocity);
            // inside the Coulomb stiction band around the frictionless balance
            assert!(static_residual(st.length, st.pressure, load, &p, &g).abs() <= p.c_coul * (1.0 + 1e-9));
            let newton = static_equilibrium(u, load, &p, &g).unwrap();
            let band = p.c_coul / (p.a_elas + p.d_force * g.schulze_stiffness(newton, u));
            assert!((st.length - newton).abs() <= band * 1.01);
        }
    }

    #[test]
    fn frictionless_rest_matches_newton() {
        let p = PamDynParams { c_coul: 0.0, ..Default::default() };
        let g = geom();
        let st = run_to_rest(0.3, 180.0, &p);
        assert_abs_diff_eq!(st.length, static_equilibrium(0.3, 180.0, &p, &g).unwrap(), epsilon = 1e-6);
    }

    #[test]
    fn static_trends_in_pressure_and_load() {
        let p = PamDynParams::default();
        let g = geom();
        let l = |u: f64, f: f64| static_equilibrium(u, f, &p, &g).unwrap();
        assert!(l(0.4, 150.0) < l(0.2, 150.0));
        assert!(l(0.3, 200.0) > l(0.3, 150.0));
    }

    #[test]
    fn blowup_is_reported() {
        let p = PamDynParams::default();
        let g = geom();
        let mut st = PamState::at_rest(&g);
        let mut err = None;
        for _ in 0..10_000 {
            match pam_step(&st, 0.0, 5_000.0, p.dt, &p, &g) {
                Ok(s) => st = s,
                Err(e) => {
                    err = Some(e);
                    break;
                }
            }
        }
        assert!(matches!(err, Some(Error::SimulationBlowup { .. })));
    }

    #[test]
    fn rk4_self_convergence() {
        let p = PamDynParams::default();
        let (a, _) = run_sine(&p, 150.0, 9, 1e-3);
        let (b, _) = run_sine(&p, 150.0, 9, 5e-4);
        let sup = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(sup < 1e-4, "sup {sup}");
    }

    #[test]
    fn hysteresis_iff_coulomb_friction() {
        let g = geom();
        let up: Vec<f64> = (0..=200).map(|i| 0.1 + 0.4 * i as f64 / 200.0).collect();
        let cycle: Vec<f64> = up.iter().chain(up.iter().rev()).copied().collect();
        let area = |c: f64| {
            let p = PamDynParams { c_coul: c, ..Default::default() };
            let start = static_equilibrium(cycle[0], 150.0, &p, &g).unwrap();
            let path = quasi_static_path(&cycle, 150.0, start, &p, &g).unwrap();
            loop_area(&cycle, &path).abs()
        };
        let with = area(10.0);
        assert!(with > 0.0);
        assert!(area(PamDynParams::default().c_coul) > with);
        assert!(area(0.0) < 1e-9 * with);
    }

    #[test]
    fn dynamic_loop_encloses_area() {
        let p = PamDynParams::default();
        let (ls, _) = run_sine(&p, 150.0, 6, 1e-3);
        let tail = &ls[ls.len() - 60..];
        let press: Vec<f64> = (0..60).map(|k| sine_pressure((ls.len() - 60 + k) / 5)).collect();
        assert!(loop_area(&press, tail).abs() > 0.0);
    }

    #[test]
    fn resistance_minima_follow_one_two_one() {
        let p = PamDynParams::default();
        let mut modal = Vec::new();
        for load in (100..=250).step_by(10) {
            let (_, rs) = run_sine(&p, load as f64, 12, 1e-3);
            let tail = &rs[rs.len() - 6 * 60..];
            modal.push(local_minima_per_period(tail, 60).unwrap().modal_count());
        }
        let mut pattern = modal.clone();
        pattern.dedup();
        assert_eq!(pattern, vec![1, 2, 1], "modal counts {modal:?}");
    }

    #[test]
    fn silent_sensors_equal_model() {
        let g = geom();
        let c = ResistanceCalibration::default();
        let st = PamState { length: 104.0, velocity: 1.0, pressure: 0.25 };
        let f = sample_sensors(&st, 120.0, &g, &c, &NoiseConfig::silent(), &mut rng::seeded(1)).unwrap();
        assert_eq!(f.channels(), [0.25, 104.0, resistance_of(g.thickness(104.0).unwrap(), &c), 120.0]);
    }

    #[test]
    fn load_channel_uncorrelated_with_input() {
        let g = geom();
        let c = ResistanceCalibration::default();
        let inputs = crate::signals::uniform_sequence(10_000, 0.1, 0.5, 3);
        let mut r = rng::seeded(5);
        let loads: Vec<f64> = inputs
            .iter()
            .map(|&u| {
                let st = PamState { length: 105.0, velocity: 0.0, pressure: u };
                sample_sensors(&st, 150.0, &g, &c, &NoiseConfig::default(), &mut r).unwrap().load
            })
            .collect();
        let rho = crate::analysis::pearson(&inputs, &loads).unwrap();
        assert!(rho.abs() < 0.05, "rho {rho}");
    }

    #[test]
    fn identical_seeds_give_identical_frames() {
        let mk = || Pam::new(geom(), PamDynParams::default(), ResistanceCalibration::default(), NoiseConfig::default(), rng::seeded(9));
        let (mut a, mut b) = (mk(), mk());
        for _ in 0..20 {
            a.advance(0.02, 0.3, 150.0).unwrap();
            b.advance(0.02, 0.3, 150.0).unwrap();
            assert_eq!(a.sample(150.0).unwrap(), b.sample(150.0).unwrap());
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(PamGeometry { inner_diameter: 12.0, ..geom() }.validate().is_err());
        assert!(PamGeometry { braid_angle: 2.0, ..geom() }.validate().is_err());
        assert!(PamDynParams { sgn_smooth_delta: 0.0, ..Default::default() }.validate().is_err());
        assert!(PamDynParams { b_visc: -1.0, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn schulze_homogeneous_in_pressure(l in 70.0f64..130.0, p in 0.0f64..1.0) {
            let g = geom();
            let a = g.schulze_force(l, 2.0 * p);
            let b = 2.0 * g.schulze_force(l, p);
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }

        #[test]
        fn outer_radius_decreasing(l1 in 60.0f64..130.0, dl in 0.01f64..10.0) {
            let g = geom();
            prop_assert!(g.outer_radius(l1).unwrap() > g.outer_radius(l1 + dl).unwrap());
        }

        #[test]
        fn resistance_increasing_in_thickness(d1 in 0.1f64..2.0, dd in 1e-6f64..1.0) {
            let c = ResistanceCalibration::default();
            prop_assert!(resistance_of(d1, &c) < resistance_of(d1 + dd, &c));
        }
    }
}
