//! Deterministic machines with a uniform reset/step interface.
//!
//! Three families share one I/O contract (a [`ControlDelta`] in, a
//! [`MotionDelta`] out):
//!
//! * vehicles: a planar bicycle model with actuator integration, a
//!   temperature-dependent tire grip and a sinusoidal road grade;
//! * LTI: a stable 4-state linear state-space system;
//! * stateless: a fixed 3×3 map squashed by `tanh` (or left linear).
//!
//! Only vehicles depend on both their fixed parameters and a dynamic state.
//! The other two exist as ablations with closed-form oracles.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{mix, SplitMix64};

/// Simulation tick, seconds.
pub const DT: f64 = 0.1;
/// Gravitational acceleration, m/s².
pub const GRAVITY: f64 = 9.81;
/// Ambient and initial tire temperature, K.
pub const AMBIENT_TEMP: f64 = 300.0;
/// Per-channel bound on control deltas.
pub const CONTROL_LIMIT: f64 = 0.2;
/// Target spectral radius for LTI state matrices.
pub const LTI_RADIUS: f64 = 0.95;

const FLEET_SHARED_TAG: u64 = 0xF1EE_75AA;
const LTI_POWER_ITERS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MachineError {
    #[error("machine {machine_id}: invalid spec: {reason}")]
    InvalidSpec { machine_id: u32, reason: String },
    #[error("control delta out of range: {0:?} (each component must be finite and within ±{CONTROL_LIMIT})")]
    InvalidInput([f64; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MachineClass {
    Suv,
    Hatch,
    Sport,
    Gt,
    Track,
    Lti,
    Stateless,
}

impl MachineClass {
    pub const ALL: [MachineClass; 7] = [
        MachineClass::Suv,
        MachineClass::Hatch,
        MachineClass::Sport,
        MachineClass::Gt,
        MachineClass::Track,
        MachineClass::Lti,
        MachineClass::Stateless,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MachineClass::Suv => "SUV",
            MachineClass::Hatch => "HATCH",
            MachineClass::Sport => "SPORT",
            MachineClass::Gt => "GT",
            MachineClass::Track => "TRACK",
            MachineClass::Lti => "LTI",
            MachineClass::Stateless => "STATELESS",
        }
    }

    pub fn is_vehicle(self) -> bool {
        !matches!(self, MachineClass::Lti | MachineClass::Stateless)
    }
}

impl fmt::Display for MachineClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MachineClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MachineClass::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown machine class `{s}`"))
    }
}

/// Fixed physical character of a vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    pub mass: f64,
    pub f_max: f64,
    pub b_max: f64,
    pub mu0: f64,
    pub c_drag: f64,
    pub c_rr: f64,
    pub wheelbase: f64,
    pub delta_max: f64,
    pub v_max: f64,
    pub t_opt: f64,
    pub k_heat: f64,
    pub k_cool: f64,
    pub k_temp_sens: f64,
    pub slope_amp: f64,
    pub slope_period: f64,
    /// Nuisance tag. Never read by the dynamics.
    pub year: i32,
}

impl VehicleParams {
    fn validate(&self) -> Result<(), String> {
        let positive = [
            ("mass", self.mass),
            ("f_max", self.f_max),
            ("b_max", self.b_max),
            ("mu0", self.mu0),
            ("c_drag", self.c_drag),
            ("c_rr", self.c_rr),
            ("wheelbase", self.wheelbase),
            ("delta_max", self.delta_max),
            ("v_max", self.v_max),
            ("t_opt", self.t_opt),
            ("k_heat", self.k_heat),
            ("k_cool", self.k_cool),
            ("k_temp_sens", self.k_temp_sens),
            ("slope_amp", self.slope_amp),
            ("slope_period", self.slope_period),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{name} must be finite and > 0, got {v}"));
            }
        }
        if !(0.5..=2.5).contains(&self.mu0) {
            return Err(format!("mu0 must lie in [0.5, 2.5], got {}", self.mu0));
        }
        if self.delta_max >= PI / 2.0 {
            return Err(format!("delta_max must be below pi/2, got {}", self.delta_max));
        }
        if !(1960..=2020).contains(&self.year) {
            return Err(format!("year must lie in [1960, 2020], got {}", self.year));
        }
        Ok(())
    }
}

/// Dynamic state of a vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleState {
    pub pos_x: f64,
    pub pos_y: f64,
    pub pos_z: f64,
    pub heading: f64,
    pub speed: f64,
    pub arc_length: f64,
    pub tire_temp: f64,
    pub a_thr: f64,
    pub a_brk: f64,
    pub a_str: f64,
}

impl VehicleState {
    pub fn at_rest() -> Self {
        Self {
            pos_x: 0.0,
            pos_y: 0.0,
            pos_z: 0.0,
            heading: 0.0,
            speed: 0.0,
            arc_length: 0.0,
            tire_temp: AMBIENT_TEMP,
            a_thr: 0.0,
            a_brk: 0.0,
            a_str: 0.0,
        }
    }
}

/// Effective tire grip for a given temperature.
pub fn effective_grip(p: &VehicleParams, tire_temp: f64) -> f64 {
    let falloff = 1.0 - p.k_temp_sens * (tire_temp - p.t_opt).abs() / p.t_opt;
    p.mu0 * falloff.clamp(0.5, 1.0)
}

/// `x_{k+1} = A x_k + B u_k`, `y_k = C x_k + D u_k`, all row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtiParams {
    pub a_matrix: [[f64; 4]; 4],
    pub b_matrix: [[f64; 3]; 4],
    pub c_matrix: [[f64; 4]; 3],
    pub d_matrix: [[f64; 3]; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

/// `y = 2 * act(W u)` on the raw control delta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatelessParams {
    pub weights: [[f64; 3]; 3],
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MachineParams {
    Vehicle(VehicleParams),
    Lti(LtiParams),
    Stateless(StatelessParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineSpec {
    pub machine_id: u32,
    pub class: MachineClass,
    pub params: MachineParams,
    pub seed: u64,
}

impl MachineSpec {
    pub fn vehicle(&self) -> Option<&VehicleParams> {
        match &self.params {
            MachineParams::Vehicle(p) => Some(p),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), MachineError> {
        let fail = |reason: String| MachineError::InvalidSpec {
            machine_id: self.machine_id,
            reason,
        };
        match (&self.params, self.class) {
            (MachineParams::Vehicle(p), c) if c.is_vehicle() => p.validate().map_err(fail),
            (MachineParams::Lti(p), MachineClass::Lti) => {
                let all = p.a_matrix.iter().flatten()
                    .chain(p.b_matrix.iter().flatten())
                    .chain(p.c_matrix.iter().flatten())
                    .chain(p.d_matrix.iter().flatten());
                if all.into_iter().all(|v| v.is_finite()) {
                    Ok(())
                } else {
                    Err(fail("non-finite LTI matrix entry".into()))
                }
            }
            (MachineParams::Stateless(p), MachineClass::Stateless) => {
                if p.weights.iter().flatten().all(|v| v.is_finite()) {
                    Ok(())
                } else {
                    Err(fail("non-finite stateless weight".into()))
                }
            }
            (_, class) => Err(fail(format!("parameter family does not match class {class}"))),
        }
    }
}

/// One tick of control: the change applied to throttle, brake and steering.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlDelta {
    pub d_throttle: f64,
    pub d_brake: f64,
    pub d_steer: f64,
}

impl ControlDelta {
    pub fn new(d_throttle: f64, d_brake: f64, d_steer: f64) -> Self {
        Self { d_throttle, d_brake, d_steer }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.d_throttle, self.d_brake, self.d_steer]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn validate(&self) -> Result<(), MachineError> {
        let a = self.to_array();
        if a.iter().all(|v| v.is_finite() && v.abs() <= CONTROL_LIMIT) {
            Ok(())
        } else {
            Err(MachineError::InvalidInput(a))
        }
    }
}

/// Positional change over one tick, world frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MotionDelta {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl MotionDelta {
    pub fn new(dx: f64, dy: f64, dz: f64) -> Self {
        Self { dx, dy, dz }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.dx, self.dy, self.dz]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

#[derive(Debug, Clone, PartialEq)]
enum MachineState {
    Vehicle(VehicleState),
    Lti([f64; 4]),
    Stateless,
}

/// A live machine: an immutable spec plus mutable state.
#[derive(Debug, Clone)]
pub struct Machine {
    spec: MachineSpec,
    state: MachineState,
}

impl Machine {
    /// Validates `spec` and places the machine at its rest state.
    pub fn init(spec: MachineSpec) -> Result<Self, MachineError> {
        spec.validate()?;
        let state = match &spec.params {
            MachineParams::Vehicle(_) => MachineState::Vehicle(VehicleState::at_rest()),
            MachineParams::Lti(_) => MachineState::Lti([0.0; 4]),
            MachineParams::Stateless(_) => MachineState::Stateless,
        };
        Ok(Self { spec, state })
    }

    pub fn spec(&self) -> &MachineSpec {
        &self.spec
    }

    pub fn vehicle_state(&self) -> Option<&VehicleState> {
        match &self.state {
            MachineState::Vehicle(s) => Some(s),
            _ => None,
        }
    }

    pub fn lti_state(&self) -> Option<[f64; 4]> {
        match &self.state {
            MachineState::Lti(x) => Some(*x),
            _ => None,
        }
    }

    /// Advance one tick.
    pub fn step(&mut self, input: ControlDelta) -> Result<MotionDelta, MachineError> {
        input.validate()?;
        let out = match (&self.spec.params, &mut self.state) {
            (MachineParams::Vehicle(p), MachineState::Vehicle(s)) => vehicle_step(p, s, input),
            (MachineParams::Lti(p), MachineState::Lti(x)) => lti_step(p, x, input),
            (MachineParams::Stateless(p), MachineState::Stateless) => stateless_step(p, input),
            _ => unreachable!("state family is fixed by init"),
        };
        Ok(out)
    }
}

fn vehicle_step(p: &VehicleParams, s: &mut VehicleState, u: ControlDelta) -> MotionDelta {
    s.a_thr = (s.a_thr + u.d_throttle).clamp(0.0, 1.0);
    s.a_brk = (s.a_brk + u.d_brake).clamp(0.0, 1.0);
    s.a_str = (s.a_str + u.d_steer).clamp(-1.0, 1.0);

    let mu = effective_grip(p, s.tire_temp);
    let grip_accel = mu * GRAVITY;

    let moving = if s.speed > 0.0 { 1.0 } else { 0.0 };
    let f_drive = s.a_thr * p.f_max * (1.0 - s.speed / p.v_max).max(0.0);
    let f_brake = s.a_brk * p.b_max * moving;
    let f_resist = p.c_drag * s.speed * s.speed + p.c_rr * p.mass * GRAVITY * moving;

    let a_long = ((f_drive - f_brake - f_resist) / p.mass).clamp(-grip_accel, grip_accel);
    s.speed = (s.speed + a_long * DT).max(0.0);

    let steer = p.delta_max * s.a_str;
    let mut yaw_rate = s.speed * steer.tan() / p.wheelbase;
    if (s.speed * yaw_rate).abs() > grip_accel {
        yaw_rate = yaw_rate.signum() * grip_accel / s.speed.max(1e-6);
    }
    s.heading += yaw_rate * DT;

    s.tire_temp += DT
        * (p.k_heat * (a_long.abs() + (s.speed * yaw_rate).abs()) * s.speed
            - p.k_cool * (s.tire_temp - AMBIENT_TEMP));

    let dx = s.speed * s.heading.cos() * DT;
    let dy = s.speed * s.heading.sin() * DT;
    s.arc_length += s.speed * DT;
    let dz = p.slope_amp * (2.0 * PI * s.arc_length / p.slope_period).sin() * s.speed * DT;

    s.pos_x += dx;
    s.pos_y += dy;
    s.pos_z += dz;
    MotionDelta::new(dx, dy, dz)
}

fn lti_step(p: &LtiParams, x: &mut [f64; 4], u: ControlDelta) -> MotionDelta {
    let u = u.to_array();
    let mut y = [0.0; 3];
    for (i, yi) in y.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..4 {
            acc += p.c_matrix[i][j] * x[j];
        }
        for j in 0..3 {
            acc += p.d_matrix[i][j] * u[j];
        }
        *yi = acc;
    }
    let mut next = [0.0; 4];
    for (i, ni) in next.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..4 {
            acc += p.a_matrix[i][j] * x[j];
        }
        for j in 0..3 {
            acc += p.b_matrix[i][j] * u[j];
        }
        *ni = acc;
    }
    *x = next;
    MotionDelta::from_array(y)
}

fn stateless_step(p: &StatelessParams, u: ControlDelta) -> MotionDelta {
    let u = u.to_array();
    let mut y = [0.0; 3];
    for (i, yi) in y.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..3 {
            acc += p.weights[i][j] * u[j];
        }
        *yi = match p.activation {
            Activation::Tanh => acc.tanh() * 2.0,
            Activation::Identity => acc * 2.0,
        };
    }
    MotionDelta::from_array(y)
}

/// Per-class sampling ranges for the parameters that distinguish classes.
#[derive(Debug, Clone, Copy)]
pub struct ClassRanges {
    pub mass: (f64, f64),
    /// Newtons.
    pub f_max: (f64, f64),
    pub mu0: (f64, f64),
}

pub fn class_ranges(class: MachineClass) -> Option<ClassRanges> {
    let r = |mass, f_kn: (f64, f64), mu0| ClassRanges {
        mass,
        f_max: (f_kn.0 * 1e3, f_kn.1 * 1e3),
        mu0,
    };
    Some(match class {
        MachineClass::Suv => r((2000.0, 2500.0), (4.0, 6.0), (0.8, 0.9)),
        MachineClass::Hatch => r((1100.0, 1400.0), (3.0, 5.0), (0.9, 1.0)),
        MachineClass::Sport => r((1300.0, 1600.0), (6.0, 9.0), (1.0, 1.2)),
        MachineClass::Gt => r((1400.0, 1600.0), (8.0, 11.0), (1.1, 1.3)),
        MachineClass::Track => r((600.0, 800.0), (12.0, 16.0), (1.6, 2.0)),
        MachineClass::Lti | MachineClass::Stateless => return None,
    })
}

/// Sample a fleet. Machine ids run `0..N` in class order (the order of
/// [`MachineClass::ALL`]), then index within class.
///
/// Road grade (`slope_amp`, `slope_period`) is drawn once per fleet from
/// `mix([fleet_seed, FLEET_SHARED_TAG])`. Each machine draws from its own
/// stream seeded `mix([fleet_seed, machine_id])`; see `sample_vehicle`,
/// `sample_lti` and `sample_stateless` for the draw orders.
pub fn spawn_fleet(fleet_seed: u64, counts: &BTreeMap<MachineClass, usize>) -> Vec<MachineSpec> {
    let mut shared = SplitMix64::new(mix(&[fleet_seed, FLEET_SHARED_TAG]));
    let slope_amp = shared.uniform(0.05, 0.08);
    let slope_period = shared.uniform(400.0, 600.0);

    let mut fleet = Vec::new();
    for (&class, &count) in counts {
        for _ in 0..count {
            let machine_id = fleet.len() as u32;
            let seed = mix(&[fleet_seed, machine_id as u64]);
            let mut rng = SplitMix64::new(seed);
            let params = match class_ranges(class) {
                Some(ranges) => MachineParams::Vehicle(sample_vehicle(&mut rng, ranges, slope_amp, slope_period)),
                None if class == MachineClass::Lti => MachineParams::Lti(sample_lti(&mut rng)),
                None => MachineParams::Stateless(sample_stateless(&mut rng)),
            };
            fleet.push(MachineSpec { machine_id, class, params, seed });
        }
    }
    fleet
}

/// Draw order: mass, f_max, mu0, c_drag, c_rr, wheelbase, delta_max, v_max,
/// t_opt, k_heat, k_cool, k_temp_sens, year.
fn sample_vehicle(rng: &mut SplitMix64, r: ClassRanges, slope_amp: f64, slope_period: f64) -> VehicleParams {
    let mass = rng.uniform(r.mass.0, r.mass.1);
    let f_max = rng.uniform(r.f_max.0, r.f_max.1);
    let mu0 = rng.uniform(r.mu0.0, r.mu0.1);
    let c_drag = rng.uniform(0.3, 0.5);
    let c_rr = rng.uniform(0.01, 0.02);
    let wheelbase = rng.uniform(2.4, 3.0);
    let delta_max = rng.uniform(0.4, 0.6);
    let v_max = rng.uniform(40.0, 90.0);
    let t_opt = rng.uniform(350.0, 380.0);
    let k_heat = rng.uniform(0.02, 0.05);
    let k_cool = rng.uniform(0.05, 0.1);
    let k_temp_sens = rng.uniform(0.5, 1.0);
    let year = rng.range_inclusive(1960, 2020) as i32;
    VehicleParams {
        mass,
        f_max,
        b_max: 1.5 * f_max,
        mu0,
        c_drag,
        c_rr,
        wheelbase,
        delta_max,
        v_max,
        t_opt,
        k_heat,
        k_cool,
        k_temp_sens,
        slope_amp,
        slope_period,
        year,
    }
}

/// Draw order: A, B, C, D, each row-major, uniform in `[-1, 1)`. A is then
/// rescaled so its spectral radius is at most [`LTI_RADIUS`].
fn sample_lti(rng: &mut SplitMix64) -> LtiParams {
    let mut a_matrix = [[0.0; 4]; 4];
    let mut b_matrix = [[0.0; 3]; 4];
    let mut c_matrix = [[0.0; 4]; 3];
    let mut d_matrix = [[0.0; 3]; 3];
    a_matrix.iter_mut().flatten().for_each(|v| *v = rng.symmetric());
    b_matrix.iter_mut().flatten().for_each(|v| *v = rng.symmetric());
    c_matrix.iter_mut().flatten().for_each(|v| *v = rng.symmetric());
    d_matrix.iter_mut().flatten().for_each(|v| *v = rng.symmetric());

    let rho = spectral_radius_bound(&a_matrix);
    if rho.is_finite() && rho > 0.0 {
        let scale = LTI_RADIUS / rho;
        a_matrix.iter_mut().flatten().for_each(|v| *v *= scale);
    }
    LtiParams { a_matrix, b_matrix, c_matrix, d_matrix }
}

/// Upper estimate of the spectral radius: `‖A^k‖_F^(1/k)` with k = 100,
/// computed by repeated multiplication with per-step renormalization.
/// Gelfand's bound guarantees the estimate is never below the true radius.
pub fn spectral_radius_bound(a: &[[f64; 4]; 4]) -> f64 {
    let mut power = [[0.0; 4]; 4];
    for (i, row) in power.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let mut log_norm = 0.0;
    for _ in 0..LTI_POWER_ITERS {
        let mut next = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a[i][k] * power[k][j];
                }
                next[i][j] = acc;
            }
        }
        let norm = next.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        log_norm += norm.ln();
        next.iter_mut().flatten().for_each(|v| *v /= norm);
        power = next;
    }
    (log_norm / LTI_POWER_ITERS as f64).exp()
}

/// Draw order: W row-major, uniform in `[-1, 1)`.
fn sample_stateless(rng: &mut SplitMix64) -> StatelessParams {
    let mut weights = [[0.0; 3]; 3];
    weights.iter_mut().flatten().for_each(|v| *v = rng.symmetric());
    StatelessParams { weights, activation: Activation::Tanh }
}
