//! Analytic plant: rigid-body attitude dynamics with three reaction wheels,
//! environmental disturbance torques, wheel friction, and an RK4 integrator.
//!
//! Body dynamics (control torque `N_c`, external torque `N_e`):
//!
//! ```text
//! ω̇ = -I_s⁻¹ S(ω) I_s ω - I_s⁻¹ S(ω) I_rw ω_rw + I_s⁻¹ N_c + I_s⁻¹ N_e
//! ω̇_rw = I_rw⁻¹ u_rw - ω̇
//! q̇ = ½ Ω[ω] q
//! ```
//!
//! Inside the integrator the wheel reaction torque on the body is taken as
//! `N_c = -u_rw + I_rw ω̇` (motor reaction plus the inertial reaction of the
//! wheel's body-rate component), which makes the pair of equations exchange
//! momentum exactly: with no external torque, `d/dt (I_s ω + I_rw ω_rw) =
//! -ω × (I_s ω + I_rw ω_rw)` and the momentum norm is conserved to
//! integrator precision.

use crate::quat::{quat_deriv, Quaternion};
use crate::{CoreError, Result};
use nalgebra::{Matrix3, Vector3};

/// Maximum wheel speed, rad/s (6000 rpm).
pub const OMEGA_RW_MAX: f64 = 6000.0 * core::f64::consts::TAU / 60.0;

/// Skew-symmetric cross-product matrix: `S(ω) v = ω × v`.
pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -w.z, w.y, //
        w.z, 0.0, -w.x, //
        -w.y, w.x, 0.0,
    )
}

/// Full plant state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyState {
    /// Attitude (body relative to inertial), unit, `q0 ≥ 0`.
    pub q: Quaternion,
    /// Body rates, rad/s.
    pub omega: Vector3<f64>,
    /// Wheel speeds relative to the body, rad/s.
    pub omega_rw: Vector3<f64>,
    /// Body angular acceleration at this state, rad/s².
    pub omega_dot: Vector3<f64>,
}

impl BodyState {
    pub fn at_rest(q: Quaternion) -> Self {
        BodyState {
            q: q.normalized().canonicalized(),
            omega: Vector3::zeros(),
            omega_rw: Vector3::zeros(),
            omega_dot: Vector3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.is_finite()
            && self.omega.iter().all(|v| v.is_finite())
            && self.omega_rw.iter().all(|v| v.is_finite())
            && self.omega_dot.iter().all(|v| v.is_finite())
    }
}

/// Mass and actuator properties of the spacecraft.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpacecraftParams {
    pub inertia: Matrix3<f64>,
    pub inertia_rw: Matrix3<f64>,
    pub mass: f64,
    /// Wheel torque bound, N·m (per wheel).
    pub u_max: f64,
    /// Wheel speed bound, rad/s (per wheel).
    pub omega_rw_max: f64,
    inertia_inv: Matrix3<f64>,
    inertia_rw_inv: Matrix3<f64>,
    /// Inverse of the effective body inertia `I_s - I_rw`.
    inertia_eff_inv: Matrix3<f64>,
}

impl SpacecraftParams {
    pub fn new(
        inertia: Matrix3<f64>,
        inertia_rw: Matrix3<f64>,
        mass: f64,
        u_max: f64,
        omega_rw_max: f64,
    ) -> Result<Self> {
        if (inertia - inertia.transpose()).abs().max() > 1e-12 {
            return Err(CoreError::InvalidParams("inertia matrix not symmetric"));
        }
        if !is_positive_definite(&inertia) {
            return Err(CoreError::InvalidParams(
                "inertia matrix not positive-definite",
            ));
        }
        for i in 0..3 {
            for j in 0..3 {
                if i != j && inertia_rw[(i, j)] != 0.0 {
                    return Err(CoreError::InvalidParams("wheel inertia not diagonal"));
                }
            }
            if inertia_rw[(i, i)] <= 0.0 {
                return Err(CoreError::InvalidParams(
                    "wheel inertia not positive-definite",
                ));
            }
        }
        if !(u_max > 0.0) {
            return Err(CoreError::InvalidParams("u_max must be positive"));
        }
        if !(omega_rw_max > 0.0) {
            return Err(CoreError::InvalidParams("omega_rw_max must be positive"));
        }
        let inertia_inv = inertia
            .try_inverse()
            .ok_or(CoreError::InvalidParams("inertia matrix singular"))?;
        let inertia_rw_inv = inertia_rw
            .try_inverse()
            .ok_or(CoreError::InvalidParams("wheel inertia singular"))?;
        let inertia_eff_inv = (inertia - inertia_rw)
            .try_inverse()
            .ok_or(CoreError::InvalidParams("effective inertia singular"))?;
        Ok(SpacecraftParams {
            inertia,
            inertia_rw,
            mass,
            u_max,
            omega_rw_max,
            inertia_inv,
            inertia_rw_inv,
            inertia_eff_inv,
        })
    }

    /// The stock cubesat parameter set used throughout the toolkit.
    pub fn nominal() -> Self {
        let inertia = Matrix3::new(
            5.700, 0.045, 0.002, //
            0.045, 3.300, 0.012, //
            0.002, 0.012, 6.100,
        );
        let inertia_rw = Matrix3::from_diagonal(&Vector3::new(0.001, 0.001, 0.001));
        SpacecraftParams::new(inertia, inertia_rw, 58.0, 0.05, OMEGA_RW_MAX)
            .expect("nominal parameters are valid")
    }

    pub fn inertia_inv(&self) -> &Matrix3<f64> {
        &self.inertia_inv
    }

    pub fn inertia_rw_inv(&self) -> &Matrix3<f64> {
        &self.inertia_rw_inv
    }

    pub fn inertia_eff_inv(&self) -> &Matrix3<f64> {
        &self.inertia_eff_inv
    }

    /// The nine inertia values fed to the regressor: the six unique entries
    /// of `I_s` (upper triangle, row-major) followed by the wheel inertia
    /// diagonal.
    pub fn inertia_context(&self) -> [f64; 9] {
        let i = &self.inertia;
        let r = &self.inertia_rw;
        [
            i[(0, 0)],
            i[(0, 1)],
            i[(0, 2)],
            i[(1, 1)],
            i[(1, 2)],
            i[(2, 2)],
            r[(0, 0)],
            r[(1, 1)],
            r[(2, 2)],
        ]
    }

    /// Returns a copy with the body inertia congruence-scaled by per-axis
    /// factors (`I'_ij = I_ij √(s_i s_j)`, preserving symmetry and
    /// positive-definiteness) and the mass scaled by `mass_scale`.
    pub fn perturbed(&self, axis_scales: [f64; 3], mass_scale: f64) -> Result<Self> {
        let mut inertia = self.inertia;
        for i in 0..3 {
            for j in 0..3 {
                inertia[(i, j)] *= (axis_scales[i] * axis_scales[j]).sqrt();
            }
        }
        SpacecraftParams::new(
            inertia,
            self.inertia_rw,
            self.mass * mass_scale,
            self.u_max,
            self.omega_rw_max,
        )
    }
}

fn is_positive_definite(m: &Matrix3<f64>) -> bool {
    // Sylvester's criterion on the leading principal minors.
    m[(0, 0)] > 0.0
        && (m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]) > 0.0
        && m.determinant() > 0.0
}

/// Environmental disturbance model on a circular low-Earth orbit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisturbanceConfig {
    pub enabled: bool,
    pub gravity_gradient_enabled: bool,
    /// Residual magnetic dipole of the spacecraft, A·m² (body frame).
    pub magnetic_dipole: Vector3<f64>,
    pub drag_coefficient: f64,
    /// Aerodynamic reference area, m².
    pub reference_area: f64,
    /// Orbital rate n, rad/s.
    pub orbital_rate: f64,
}

impl DisturbanceConfig {
    /// 550 km circular orbit with typical small-satellite residuals.
    pub fn leo_default() -> Self {
        DisturbanceConfig {
            enabled: true,
            gravity_gradient_enabled: true,
            magnetic_dipole: Vector3::new(0.05, 0.05, 0.05),
            drag_coefficient: 2.2,
            reference_area: 0.01,
            orbital_rate: 1.0965e-3,
        }
    }

    pub fn disabled() -> Self {
        DisturbanceConfig {
            enabled: false,
            gravity_gradient_enabled: false,
            magnetic_dipole: Vector3::zeros(),
            drag_coefficient: 0.0,
            reference_area: 0.0,
            orbital_rate: 1.0965e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled && !(self.orbital_rate > 0.0) {
            return Err(CoreError::InvalidParams(
                "orbital_rate must be positive when disturbances are enabled",
            ));
        }
        Ok(())
    }
}

// Geomagnetic dipole field strength at the orbit radius (equatorial surface
// value 3.12e-5 T scaled by (R_E/r)³ for a 550 km orbit) and the dipole tilt.
const GEOMAGNETIC_B_ORBIT: f64 = 3.12e-5 * 0.7803;
const DIPOLE_TILT_RAD: f64 = 11.5 * core::f64::consts::PI / 180.0;
// Free-molecular dynamic pressure ½ρv² at the orbit (ρ ≈ 1e-12 kg/m³,
// v ≈ 7.59 km/s) and the center-of-pressure offset lever arm.
const DRAG_DYNAMIC_PRESSURE: f64 = 0.5 * 1.0e-12 * 7.589e3 * 7.589e3;
const DRAG_LEVER_ARM: Vector3<f64> = Vector3::new(0.02, 0.02, 0.02);

/// Total environmental torque in the body frame at orbit phase
/// `phase = n·t` (radians along the circular orbit).
///
/// Components: gravity gradient `3n² r̂ × I_s r̂`, residual magnetic dipole
/// `m × B` in a tilted-dipole field, and a drag torque from a fixed
/// center-of-pressure offset. All are ≤ 1e-4 N·m for the nominal spacecraft.
pub fn disturbance_torque(
    state: &BodyState,
    config: &DisturbanceConfig,
    params: &SpacecraftParams,
    phase: f64,
) -> Vector3<f64> {
    if !config.enabled {
        return Vector3::zeros();
    }
    let n = config.orbital_rate;
    // Inertial geometry of the circular orbit: radial and along-track units.
    let r_hat_i = Vector3::new(phase.cos(), phase.sin(), 0.0);
    let v_hat_i = Vector3::new(-phase.sin(), phase.cos(), 0.0);

    let mut torque = Vector3::zeros();

    if config.gravity_gradient_enabled {
        let r_hat_b = state.q.inertial_to_body(&r_hat_i);
        torque += 3.0 * n * n * r_hat_b.cross(&(params.inertia * r_hat_b));
    }

    // Tilted-dipole geomagnetic field evaluated at the orbit position.
    let dipole_i = Vector3::new(DIPOLE_TILT_RAD.sin(), 0.0, DIPOLE_TILT_RAD.cos());
    let b_i = GEOMAGNETIC_B_ORBIT * (3.0 * dipole_i.dot(&r_hat_i) * r_hat_i - dipole_i);
    let b_b = state.q.inertial_to_body(&b_i);
    torque += config.magnetic_dipole.cross(&b_b);

    // Drag force along the (reversed) velocity with a fixed CP offset.
    let drag_force = DRAG_DYNAMIC_PRESSURE * config.drag_coefficient * config.reference_area;
    let v_hat_b = state.q.inertial_to_body(&v_hat_i);
    torque += DRAG_LEVER_ARM.cross(&(-drag_force * v_hat_b));

    torque
}

/// Wheel bearing friction parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrictionConfig {
    /// Viscous coefficient, N·m·s/rad.
    pub viscous_coeff: f64,
    /// Nominal activation point as a fraction of the wheel speed limit.
    pub activation_fraction: f64,
    /// Uniform jitter applied to the activation fraction, per wheel.
    pub activation_jitter: f64,
}

impl FrictionConfig {
    pub fn nominal() -> Self {
        FrictionConfig {
            viscous_coeff: 1e-5,
            activation_fraction: 0.5,
            activation_jitter: 0.125,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.viscous_coeff < 0.0 {
            return Err(CoreError::InvalidParams("viscous_coeff must be ≥ 0"));
        }
        let lo = self.activation_fraction - self.activation_jitter;
        let hi = self.activation_fraction + self.activation_jitter;
        if lo < 0.0 || hi > 1.0 {
            return Err(CoreError::InvalidParams(
                "activation fraction ± jitter must stay within [0, 1]",
            ));
        }
        Ok(())
    }
}

/// Friction with activation speeds frozen for one simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrictionModel {
    pub config: FrictionConfig,
    /// Per-wheel activation speed, rad/s.
    pub activation_speed: Vector3<f64>,
}

impl FrictionModel {
    /// Draws per-wheel activation speeds uniformly from
    /// `(activation_fraction ± activation_jitter) · omega_rw_max`.
    pub fn sample<R: rand::Rng>(config: FrictionConfig, omega_rw_max: f64, rng: &mut R) -> Self {
        let mut activation = Vector3::zeros();
        for i in 0..3 {
            let f = config.activation_fraction
                + config.activation_jitter * rng.gen_range(-1.0..=1.0);
            activation[i] = f * omega_rw_max;
        }
        FrictionModel {
            config,
            activation_speed: activation,
        }
    }

    pub fn torque(&self, omega_rw: &Vector3<f64>) -> Vector3<f64> {
        friction_torque(omega_rw, &self.config, &self.activation_speed)
    }
}

/// Bearing friction torque on each wheel: viscous (`-c·ω_rw`) below the
/// activation speed, clamped at `-c·a·sign(ω_rw)` beyond it.
pub fn friction_torque(
    omega_rw: &Vector3<f64>,
    config: &FrictionConfig,
    activation_speed: &Vector3<f64>,
) -> Vector3<f64> {
    let mut t = Vector3::zeros();
    for i in 0..3 {
        let a = activation_speed[i];
        t[i] = -config.viscous_coeff * omega_rw[i].clamp(-a, a);
    }
    t
}

/// Body angular acceleration for a given control torque `N_c` and external
/// torque `N_e`:
///
/// `ω̇ = I_s⁻¹ (-S(ω) I_s ω - S(ω) I_rw ω_rw + N_c + N_e)`
pub fn angular_accel(
    state: &BodyState,
    n_c: &Vector3<f64>,
    n_e: &Vector3<f64>,
    params: &SpacecraftParams,
) -> Vector3<f64> {
    let gyro = state.omega.cross(&(params.inertia * state.omega))
        + state.omega.cross(&(params.inertia_rw * state.omega_rw));
    params.inertia_inv() * (-gyro + n_c + n_e)
}

/// Wheel angular acceleration for applied wheel torque `u_rw`:
/// `ω̇_rw = I_rw⁻¹ u_rw - ω̇`.
pub fn rw_accel(
    omega_dot: &Vector3<f64>,
    u_rw: &Vector3<f64>,
    params: &SpacecraftParams,
) -> Vector3<f64> {
    params.inertia_rw_inv() * u_rw - omega_dot
}

/// Body angular acceleration with the wheel reaction folded in
/// (momentum-consistent form used by the integrator):
///
/// `ω̇ = (I_s - I_rw)⁻¹ (-S(ω)(I_s ω + I_rw ω_rw) - u_rw + N_e)`
pub fn plant_angular_accel(
    omega: &Vector3<f64>,
    omega_rw: &Vector3<f64>,
    u_rw: &Vector3<f64>,
    n_e: &Vector3<f64>,
    params: &SpacecraftParams,
) -> Vector3<f64> {
    let momentum = params.inertia * omega + params.inertia_rw * omega_rw;
    params.inertia_eff_inv() * (-omega.cross(&momentum) - u_rw + n_e)
}

#[derive(Clone, Copy)]
struct Derivative {
    qdot: nalgebra::Vector4<f64>,
    omega_dot: Vector3<f64>,
    omega_rw_dot: Vector3<f64>,
}

fn plant_deriv(
    q: &Quaternion,
    omega: &Vector3<f64>,
    omega_rw: &Vector3<f64>,
    u_cmd: &Vector3<f64>,
    friction: Option<&FrictionModel>,
    disturbances: &DisturbanceConfig,
    params: &SpacecraftParams,
    phase: f64,
) -> Derivative {
    let u_app = match friction {
        Some(f) => u_cmd + f.torque(omega_rw),
        None => *u_cmd,
    };
    let probe = BodyState {
        q: *q,
        omega: *omega,
        omega_rw: *omega_rw,
        omega_dot: Vector3::zeros(),
    };
    let n_e = disturbance_torque(&probe, disturbances, params, phase);
    let omega_dot = plant_angular_accel(omega, omega_rw, &u_app, &n_e, params);
    Derivative {
        qdot: quat_deriv(q, omega),
        omega_dot,
        omega_rw_dot: params.inertia_rw_inv() * u_app - omega_dot,
    }
}

/// One classic RK4 step of the full plant over `dt`, starting at simulation
/// time `t` (used for the orbit phase of the disturbance models).
///
/// The commanded wheel torque is clamped to `±u_max`; a wheel sitting at its
/// speed limit has any outward torque command zeroed. The quaternion is
/// renormalized and canonicalized after the step, wheel speeds are clamped to
/// `±omega_rw_max`, and the stored `omega_dot` is the analytic acceleration
/// evaluated at the new state.
pub fn rk4_step(
    state: &BodyState,
    u_rw: &Vector3<f64>,
    dt: f64,
    t: f64,
    disturbances: &DisturbanceConfig,
    friction: Option<&FrictionModel>,
    params: &SpacecraftParams,
) -> Result<BodyState> {
    debug_assert!(dt > 0.0);
    let mut u = Vector3::zeros();
    for i in 0..3 {
        u[i] = u_rw[i].clamp(-params.u_max, params.u_max);
        // Saturated wheel: drop torque that would push it further out.
        if state.omega_rw[i] >= params.omega_rw_max && u[i] > 0.0 {
            u[i] = 0.0;
        }
        if state.omega_rw[i] <= -params.omega_rw_max && u[i] < 0.0 {
            u[i] = 0.0;
        }
    }

    let n = config_rate(disturbances);
    let q0 = state.q.as_vector();
    let (w0, wr0) = (state.omega, state.omega_rw);

    let k1 = plant_deriv(&state.q, &w0, &wr0, &u, friction, disturbances, params, n * t);
    let half = 0.5 * dt;
    let q_k2 = Quaternion::from_vector(q0 + half * k1.qdot);
    let k2 = plant_deriv(
        &q_k2,
        &(w0 + half * k1.omega_dot),
        &(wr0 + half * k1.omega_rw_dot),
        &u,
        friction,
        disturbances,
        params,
        n * (t + half),
    );
    let q_k3 = Quaternion::from_vector(q0 + half * k2.qdot);
    let k3 = plant_deriv(
        &q_k3,
        &(w0 + half * k2.omega_dot),
        &(wr0 + half * k2.omega_rw_dot),
        &u,
        friction,
        disturbances,
        params,
        n * (t + half),
    );
    let q_k4 = Quaternion::from_vector(q0 + dt * k3.qdot);
    let k4 = plant_deriv(
        &q_k4,
        &(w0 + dt * k3.omega_dot),
        &(wr0 + dt * k3.omega_rw_dot),
        &u,
        friction,
        disturbances,
        params,
        n * (t + dt),
    );

    let sixth = dt / 6.0;
    let q_new = Quaternion::from_vector(
        q0 + sixth * (k1.qdot + 2.0 * k2.qdot + 2.0 * k3.qdot + k4.qdot),
    )
    .normalized()
    .canonicalized();
    let omega_new =
        w0 + sixth * (k1.omega_dot + 2.0 * k2.omega_dot + 2.0 * k3.omega_dot + k4.omega_dot);
    let mut omega_rw_new = wr0
        + sixth
            * (k1.omega_rw_dot + 2.0 * k2.omega_rw_dot + 2.0 * k3.omega_rw_dot + k4.omega_rw_dot);
    for i in 0..3 {
        omega_rw_new[i] = omega_rw_new[i].clamp(-params.omega_rw_max, params.omega_rw_max);
    }

    let final_deriv = plant_deriv(
        &q_new,
        &omega_new,
        &omega_rw_new,
        &u,
        friction,
        disturbances,
        params,
        n * (t + dt),
    );
    let new_state = BodyState {
        q: q_new,
        omega: omega_new,
        omega_rw: omega_rw_new,
        omega_dot: final_deriv.omega_dot,
    };
    if !new_state.is_finite() {
        return Err(CoreError::Integration { step: 0 });
    }
    Ok(new_state)
}

fn config_rate(disturbances: &DisturbanceConfig) -> f64 {
    if disturbances.enabled {
        disturbances.orbital_rate
    } else {
        0.0
    }
}

/// Propagates the plant over `duration` with a fixed commanded torque,
/// stepping at `dt` from time `t0`. Reports the failing step on a
/// non-finite state.
pub fn propagate(
    state: &BodyState,
    u_rw: &Vector3<f64>,
    duration: f64,
    dt: f64,
    t0: f64,
    disturbances: &DisturbanceConfig,
    friction: Option<&FrictionModel>,
    params: &SpacecraftParams,
) -> Result<BodyState> {
    let steps = (duration / dt + 0.5) as usize;
    let mut s = *state;
    for step in 0..steps {
        s = rk4_step(
            &s,
            u_rw,
            dt,
            t0 + step as f64 * dt,
            disturbances,
            friction,
            params,
        )
        .map_err(|_| CoreError::Integration { step })?;
    }
    Ok(s)
}
