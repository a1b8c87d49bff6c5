//! Model-predictive attitude controllers.
//!
//! Three controllers share one stepping interface:
//! - nonlinear MPC by direct single shooting over the torque sequence, with
//!   the plant propagated by either the learned regressor or the analytic
//!   rigid-body model and gradients obtained by reverse accumulation through
//!   the rollout;
//! - linear MPC on the small-angle state `{q_vec, ω}` as a box-constrained
//!   quadratic program solved exactly by an active-set method;
//! - the hybrid controller, which runs the nonlinear solver at large attitude
//!   error and hands over to the linear one below a threshold (with
//!   hysteresis on the way back).
//!
//! All controllers work in the error frame: the current attitude is replaced
//! by the error quaternion to the target, so regulation always drives toward
//! the identity.

use crate::dynamics::{BodyState, SpacecraftParams};
use crate::mlp::{ForwardCache, GradientBuffer, MlpModel};
use crate::quat::{attitude_error_deg, quat_deriv, Quaternion};
use crate::training::PlantContext;
use crate::{CoreError, Result};
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector, SMatrix, Vector3, Vector4, Vector6};

/// Stage/terminal weights on the 13-value MPC state
/// `{1-e0, e1, e2, e3, ω, ω_rw, ω̇}` plus the torque weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcCost {
    pub q_weights: [f64; 13],
    /// Diagonal torque magnitude weight.
    pub c_weight: f64,
    /// Diagonal torque slew weight.
    pub r_weight: f64,
}

impl MpcCost {
    pub fn nominal() -> Self {
        MpcCost {
            q_weights: [
                10000.0, 10000.0, 10000.0, 10000.0, //
                1e-2, 1e-2, 1e-2, //
                1e-4, 1e-4, 1e-4, //
                1e-2, 1e-2, 1e-2,
            ],
            c_weight: 1e-1,
            r_weight: 1e-1,
        }
    }

    /// `xᵀQx` at a rollout state (error-frame quaternion).
    fn state_cost(&self, s: &BodyState) -> f64 {
        let w = &self.q_weights;
        let e0 = 1.0 - s.q.q0;
        let mut c = w[0] * e0 * e0
            + w[1] * s.q.q1 * s.q.q1
            + w[2] * s.q.q2 * s.q.q2
            + w[3] * s.q.q3 * s.q.q3;
        for a in 0..3 {
            c += w[4 + a] * s.omega[a] * s.omega[a];
            c += w[7 + a] * s.omega_rw[a] * s.omega_rw[a];
            c += w[10 + a] * s.omega_dot[a] * s.omega_dot[a];
        }
        c
    }

    fn state_cost_grad(&self, s: &BodyState) -> StateAdjoint {
        let w = &self.q_weights;
        StateAdjoint {
            q: Vector4::new(
                -2.0 * w[0] * (1.0 - s.q.q0),
                2.0 * w[1] * s.q.q1,
                2.0 * w[2] * s.q.q2,
                2.0 * w[3] * s.q.q3,
            ),
            omega: Vector3::new(
                2.0 * w[4] * s.omega[0],
                2.0 * w[5] * s.omega[1],
                2.0 * w[6] * s.omega[2],
            ),
            omega_rw: Vector3::new(
                2.0 * w[7] * s.omega_rw[0],
                2.0 * w[8] * s.omega_rw[1],
                2.0 * w[9] * s.omega_rw[2],
            ),
            omega_dot: Vector3::new(
                2.0 * w[10] * s.omega_dot[0],
                2.0 * w[11] * s.omega_dot[1],
                2.0 * w[12] * s.omega_dot[2],
            ),
        }
    }
}

/// What propagates the state inside the nonlinear MPC.
#[derive(Clone)]
pub enum DynamicsOracle<'a> {
    /// Learned regressor; `inertia_ctx` is the controller's (possibly wrong)
    /// inertia estimate fed to the model input.
    Learned {
        model: &'a MlpModel,
        inertia_ctx: [f64; 9],
    },
    /// Analytic rigid-body model with the controller's parameter estimate.
    Analytic { plant: PlantContext },
}

impl<'a> DynamicsOracle<'a> {
    pub fn analytic(params: &SpacecraftParams) -> Self {
        DynamicsOracle::Analytic {
            plant: PlantContext::from_inertia_ctx(&params.inertia_context())
                .expect("valid params give a valid context"),
        }
    }

    pub fn learned(model: &'a MlpModel, params: &SpacecraftParams) -> Self {
        DynamicsOracle::Learned {
            model,
            inertia_ctx: params.inertia_context(),
        }
    }

    fn inertia_rw(&self) -> Vector3<f64> {
        match self {
            DynamicsOracle::Learned { inertia_ctx, .. } => {
                Vector3::new(inertia_ctx[6], inertia_ctx[7], inertia_ctx[8])
            }
            DynamicsOracle::Analytic { plant } => plant.inertia_rw,
        }
    }

    /// Predicted body-rate increment Δω̂ over one period.
    fn delta_omega(
        &self,
        state: &BodyState,
        u: &Vector3<f64>,
        dt: f64,
        cache: &mut ForwardCache,
    ) -> Result<Vector3<f64>> {
        match self {
            DynamicsOracle::Learned { model, inertia_ctx } => {
                let mut x = [0.0f64; 21];
                for a in 0..3 {
                    x[a] = state.omega[a];
                    x[3 + a] = state.omega_rw[a];
                    x[6 + a] = u[a];
                    x[9 + a] = state.omega_dot[a];
                }
                x[12..21].copy_from_slice(inertia_ctx);
                model.predict_first(&x, cache)
            }
            DynamicsOracle::Analytic { plant } => {
                Ok(dt * plant.accel(&state.omega, &state.omega_rw, u))
            }
        }
    }

    /// Vector-Jacobian product of `delta_omega`: given `γ = ∂L/∂Δω̂`, returns
    /// the pullbacks onto (ω, ω_rw, ω̇, u).
    fn delta_omega_vjp(
        &self,
        state: &BodyState,
        dt: f64,
        cache: &ForwardCache,
        gamma: &Vector3<f64>,
    ) -> Result<(Vector3<f64>, Vector3<f64>, Vector3<f64>, Vector3<f64>)> {
        match self {
            DynamicsOracle::Learned { model, .. } => {
                let mut upstream = vec![0.0; model.config.output_dim()];
                upstream[0] = gamma.x;
                upstream[1] = gamma.y;
                upstream[2] = gamma.z;
                // parameter gradients are discarded; only input pullbacks matter
                let mut sink = GradientBuffer::zeros_like(model);
                let ig = model.backward(cache, &upstream, &mut sink)?;
                Ok((
                    Vector3::new(ig[0], ig[1], ig[2]),
                    Vector3::new(ig[3], ig[4], ig[5]),
                    Vector3::new(ig[9], ig[10], ig[11]),
                    Vector3::new(ig[6], ig[7], ig[8]),
                ))
            }
            DynamicsOracle::Analytic { plant } => {
                let (j_w, j_rw) = plant.accel_jacobians(&state.omega, &state.omega_rw);
                Ok((
                    dt * j_w.transpose() * gamma,
                    dt * j_rw.transpose() * gamma,
                    Vector3::zeros(),
                    -dt * plant.inertia_inv.transpose() * gamma,
                ))
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct StateAdjoint {
    q: Vector4<f64>,
    omega: Vector3<f64>,
    omega_rw: Vector3<f64>,
    omega_dot: Vector3<f64>,
}

fn clamp_torque(u: &Vector3<f64>, u_max: f64) -> Vector3<f64> {
    Vector3::new(
        u.x.clamp(-u_max, u_max),
        u.y.clamp(-u_max, u_max),
        u.z.clamp(-u_max, u_max),
    )
}

#[derive(Debug, Clone, Default)]
struct StepRecord {
    u_clamped: Vector3<f64>,
    /// Pre-normalization quaternion vector and its norm.
    q_raw: Vector4<f64>,
    q_raw_norm: f64,
}

/// One prediction step: Δω̂ from the oracle, acceleration `Δω̂/Δt`, wheel
/// speeds advanced by the wheel dynamics, quaternion advanced with the
/// pre-step rate and renormalized. The torque is clamped to the box first.
pub fn predict_step(
    oracle: &DynamicsOracle<'_>,
    state: &BodyState,
    u: &Vector3<f64>,
    dt: f64,
    u_max: f64,
) -> Result<BodyState> {
    let mut cache = ForwardCache::default();
    let mut record = StepRecord::default();
    predict_step_recorded(oracle, state, u, dt, u_max, &mut cache, &mut record)
}

fn predict_step_recorded(
    oracle: &DynamicsOracle<'_>,
    state: &BodyState,
    u: &Vector3<f64>,
    dt: f64,
    u_max: f64,
    cache: &mut ForwardCache,
    record: &mut StepRecord,
) -> Result<BodyState> {
    let u = clamp_torque(u, u_max);
    let dw = oracle.delta_omega(state, &u, dt, cache)?;
    if !dw.iter().all(|v| v.is_finite()) {
        return Err(CoreError::ModelCorrupt("non-finite dynamics prediction"));
    }
    let omega_dot = dw / dt;
    let inertia_rw = oracle.inertia_rw();
    let omega_rw = state.omega_rw
        + dt * Vector3::new(u.x / inertia_rw.x, u.y / inertia_rw.y, u.z / inertia_rw.z)
        - dw;
    let q_raw = state.q.as_vector() + dt * quat_deriv(&state.q, &state.omega);
    let q_raw_norm = q_raw.norm();
    let q = Quaternion::from_vector(q_raw / q_raw_norm);
    record.u_clamped = u;
    record.q_raw = q_raw;
    record.q_raw_norm = q_raw_norm;
    Ok(BodyState {
        q,
        omega: state.omega + dw,
        omega_rw,
        omega_dot,
    })
}

/// Nonlinear MPC problem description.
pub struct MpcProblem<'a> {
    pub horizon: usize,
    pub cost: MpcCost,
    pub oracle: DynamicsOracle<'a>,
    pub u_max: f64,
    pub dt: f64,
    /// Major-iteration budget per solve.
    pub max_iterations: usize,
}

impl<'a> MpcProblem<'a> {
    pub fn nominal(oracle: DynamicsOracle<'a>) -> Self {
        MpcProblem {
            horizon: 10,
            cost: MpcCost::nominal(),
            oracle,
            u_max: 0.05,
            dt: 0.1,
            max_iterations: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NmpcSolution {
    pub torques: Vec<Vector3<f64>>,
    pub cost: f64,
    pub iterations: usize,
    /// Set when the solver could not produce a finite improving iterate and
    /// fell back to the best candidate seen.
    pub degraded: bool,
}

/// Rollout cost of a torque sequence (∞ if the rollout leaves finite range).
fn rollout_cost(
    problem: &MpcProblem<'_>,
    state0: &BodyState,
    torques: &[Vector3<f64>],
    u_prev: &Vector3<f64>,
) -> f64 {
    let mut cache = ForwardCache::default();
    let mut record = StepRecord::default();
    let mut cost = 0.0;
    let mut state = *state0;
    let mut last_u = *u_prev;
    for u in torques {
        cost += problem.cost.state_cost(&state);
        let u_c = clamp_torque(u, problem.u_max);
        cost += problem.cost.c_weight * u_c.norm_squared();
        let du = u_c - last_u;
        cost += problem.cost.r_weight * du.norm_squared();
        last_u = u_c;
        state = match predict_step_recorded(
            &problem.oracle,
            &state,
            &u_c,
            problem.dt,
            problem.u_max,
            &mut cache,
            &mut record,
        ) {
            Ok(s) => s,
            Err(_) => return f64::INFINITY,
        };
        if !state.is_finite() {
            return f64::INFINITY;
        }
    }
    cost += problem.cost.state_cost(&state);
    if cost.is_finite() {
        cost
    } else {
        f64::INFINITY
    }
}

/// Rollout cost and its gradient with respect to every torque in the
/// sequence, by reverse accumulation through the oracle.
fn rollout_cost_grad(
    problem: &MpcProblem<'_>,
    state0: &BodyState,
    torques: &[Vector3<f64>],
    u_prev: &Vector3<f64>,
) -> Result<(f64, Vec<Vector3<f64>>)> {
    let n = torques.len();
    let dt = problem.dt;
    let inertia_rw = problem.oracle.inertia_rw();
    let irw_inv = Vector3::new(1.0 / inertia_rw.x, 1.0 / inertia_rw.y, 1.0 / inertia_rw.z);

    // forward sweep, recording everything the reverse sweep needs
    let mut states = Vec::with_capacity(n + 1);
    let mut caches: Vec<ForwardCache> = (0..n).map(|_| ForwardCache::default()).collect();
    let mut records: Vec<StepRecord> = vec![StepRecord::default(); n];
    let mut cost = 0.0;
    let mut state = *state0;
    let mut last_u = *u_prev;
    states.push(state);
    for k in 0..n {
        cost += problem.cost.state_cost(&state);
        let u_c = clamp_torque(&torques[k], problem.u_max);
        cost += problem.cost.c_weight * u_c.norm_squared();
        let du = u_c - last_u;
        cost += problem.cost.r_weight * du.norm_squared();
        last_u = u_c;
        state = predict_step_recorded(
            &problem.oracle,
            &state,
            &u_c,
            dt,
            problem.u_max,
            &mut caches[k],
            &mut records[k],
        )?;
        if !state.is_finite() {
            return Err(CoreError::ModelCorrupt("non-finite rollout state"));
        }
        states.push(state);
    }
    cost += problem.cost.state_cost(&state);

    // reverse sweep
    let mut grad = vec![Vector3::zeros(); n];
    let mut adj = problem.cost.state_cost_grad(&states[n]);
    for k in (0..n).rev() {
        let pre = &states[k];
        let rec = &records[k];
        let u_c = rec.u_clamped;

        // quadratic torque terms
        grad[k] += 2.0 * problem.cost.c_weight * u_c;
        let prev = if k == 0 {
            *u_prev
        } else {
            records[k - 1].u_clamped
        };
        grad[k] += 2.0 * problem.cost.r_weight * (u_c - prev);
        if k + 1 < n {
            grad[k] -= 2.0 * problem.cost.r_weight * (records[k + 1].u_clamped - u_c);
        }

        // normalization pullback: q' = q_raw/‖q_raw‖
        let qn = rec.q_raw / rec.q_raw_norm;
        let lam_raw = (adj.q - qn * qn.dot(&adj.q)) / rec.q_raw_norm;
        // through q: q_raw = q + dt·½Ω[ω]q
        let omega_m = crate::quat::omega_matrix(&pre.omega);
        let new_q = lam_raw + 0.5 * dt * omega_m.transpose() * lam_raw;
        // through ω in the kinematics: ∂(Ω[ω]q)/∂ω = G(q)
        let g_q = quat_rate_jacobian(&pre.q);
        let mut new_omega = 0.5 * dt * g_q.transpose() * lam_raw;

        // γ = ∂L/∂Δω̂ collects every use of the increment
        let gamma = adj.omega - adj.omega_rw + adj.omega_dot / dt;
        let (d_w, d_wrw, d_wdot, d_u) =
            problem.oracle.delta_omega_vjp(pre, dt, &caches[k], &gamma)?;

        new_omega += adj.omega + d_w;
        let new_omega_rw = adj.omega_rw + d_wrw;
        let new_omega_dot = d_wdot;
        grad[k] += d_u + dt * irw_inv.component_mul(&adj.omega_rw);

        adj = StateAdjoint {
            q: new_q,
            omega: new_omega,
            omega_rw: new_omega_rw,
            omega_dot: new_omega_dot,
        };
        let direct = problem.cost.state_cost_grad(pre);
        adj.q += direct.q;
        adj.omega += direct.omega;
        adj.omega_rw += direct.omega_rw;
        adj.omega_dot += direct.omega_dot;
    }
    Ok((cost, grad))
}

/// `∂(Ω[ω]q)/∂ω` — a 4×3 matrix in the quaternion components.
fn quat_rate_jacobian(q: &Quaternion) -> SMatrix<f64, 4, 3> {
    SMatrix::<f64, 4, 3>::new(
        -q.q1, -q.q2, -q.q3, //
        q.q0, -q.q3, q.q2, //
        q.q3, q.q0, -q.q1, //
        -q.q2, q.q1, q.q0,
    )
}

/// Direct single-shooting solve: projected gradient descent with a spectral
/// step and backtracking, warm-started from `warm_start` and always
/// considering the zero sequence as a candidate. The returned sequence never
/// costs more than the zero sequence.
pub fn solve_nonlinear_mpc(
    problem: &MpcProblem<'_>,
    current: &BodyState,
    target: &Quaternion,
    warm_start: Option<&[Vector3<f64>]>,
    u_prev: &Vector3<f64>,
) -> NmpcSolution {
    let n = problem.horizon;
    // error-frame state: regulate the error quaternion to identity
    let state0 = BodyState {
        q: current.q.error_from(target),
        omega: current.omega,
        omega_rw: current.omega_rw,
        omega_dot: current.omega_dot,
    };

    let zero = vec![Vector3::zeros(); n];
    let zero_cost = rollout_cost(problem, &state0, &zero, u_prev);
    let mut best = zero.clone();
    let mut best_cost = zero_cost;
    if let Some(w) = warm_start {
        if w.len() == n {
            let warm: Vec<Vector3<f64>> =
                w.iter().map(|u| clamp_torque(u, problem.u_max)).collect();
            let c = rollout_cost(problem, &state0, &warm, u_prev);
            if c < best_cost {
                best = warm;
                best_cost = c;
            }
        }
    }
    if !best_cost.is_finite() {
        // even the zero rollout diverged: report degraded zero torque
        return NmpcSolution {
            torques: zero,
            cost: zero_cost,
            iterations: 0,
            degraded: true,
        };
    }

    let mut u = best.clone();
    let mut step = 1.0; // spectral estimate, refreshed after the first move
    let mut prev_u: Option<Vec<Vector3<f64>>> = None;
    let mut prev_grad: Option<Vec<Vector3<f64>>> = None;
    let mut iterations = 0;
    let mut degraded = false;

    for _ in 0..problem.max_iterations {
        iterations += 1;
        let (c, grad) = match rollout_cost_grad(problem, &state0, &u, u_prev) {
            Ok(v) => v,
            Err(_) => {
                degraded = true;
                break;
            }
        };
        let mut cost = c;
        if cost < best_cost {
            best_cost = cost;
            best.clear();
            best.extend_from_slice(&u);
        }

        // Barzilai–Borwein step from the last accepted move
        if let (Some(pu), Some(pg)) = (&prev_u, &prev_grad) {
            let mut ss = 0.0;
            let mut sy = 0.0;
            for k in 0..n {
                let s = u[k] - pu[k];
                let y = grad[k] - pg[k];
                ss += s.dot(&s);
                sy += s.dot(&y);
            }
            if sy > 1e-300 {
                step = (ss / sy).clamp(1e-6, 1e6);
            }
        }

        // projected backtracking line search
        let mut alpha = step;
        let mut moved = false;
        for _ in 0..30 {
            let trial: Vec<Vector3<f64>> = (0..n)
                .map(|k| clamp_torque(&(u[k] - alpha * grad[k]), problem.u_max))
                .collect();
            let decrease: f64 = (0..n).map(|k| grad[k].dot(&(u[k] - trial[k]))).sum();
            if decrease <= 1e-18 {
                break; // projection returned (numerically) the same point
            }
            let trial_cost = rollout_cost(problem, &state0, &trial, u_prev);
            if trial_cost <= cost - 1e-4 * decrease {
                prev_u = Some(u.clone());
                prev_grad = Some(grad.clone());
                u = trial;
                cost = trial_cost;
                moved = true;
                break;
            }
            alpha *= 0.5;
        }
        if cost < best_cost {
            best_cost = cost;
            best.clear();
            best.extend_from_slice(&u);
        }
        if !moved {
            break; // stationary within the budget
        }
    }

    NmpcSolution {
        torques: best,
        cost: best_cost,
        iterations,
        degraded,
    }
}

// ---------------------------------------------------------------------------
// Linear state-space MPC
// ---------------------------------------------------------------------------

/// Discrete small-angle model over `{q_vec, ω}` with body-torque input.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: SMatrix<f64, 6, 6>,
    pub b: SMatrix<f64, 6, 3>,
    /// Diagonal state weight (uniform).
    pub q_weight: f64,
    pub dt: f64,
}

/// Zero-order-hold discretization of the small-angle kinematics
/// `q̇_vec = ω/2`, `ω̇ = I_s⁻¹ τ` (exact: the continuous A is nilpotent).
pub fn build_linear_model(params: &SpacecraftParams, dt: f64) -> LinearModel {
    let mut a = SMatrix::<f64, 6, 6>::identity();
    for i in 0..3 {
        a[(i, 3 + i)] = 0.5 * dt;
    }
    let isinv = params.inertia_inv();
    let mut b = SMatrix::<f64, 6, 3>::zeros();
    for i in 0..3 {
        for j in 0..3 {
            b[(i, j)] = 0.25 * dt * dt * isinv[(i, j)];
            b[(3 + i, j)] = dt * isinv[(i, j)];
        }
    }
    LinearModel {
        a,
        b,
        q_weight: 1000.0,
        dt,
    }
}

/// Linear MPC with box torque constraints, solved exactly (KKT residual
/// below 1e-8) by a primal active-set method on the condensed QP.
pub struct LinearMpc {
    pub model: LinearModel,
    pub horizon: usize,
    pub c_weight: f64,
    pub r_weight: f64,
    pub u_max: f64,
    /// Condensed Hessian (half of `∇²J`; constant across solves).
    h: DMatrix<f64>,
    /// Maps the initial state to the linear term.
    f_map: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct LinearMpcSolution {
    pub torques: Vec<Vector3<f64>>,
    pub cost: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
}

impl LinearMpc {
    pub fn new(
        model: LinearModel,
        horizon: usize,
        c_weight: f64,
        r_weight: f64,
        u_max: f64,
    ) -> Self {
        let n = horizon;
        let m = 3 * n;
        // G: stacked reachability map, rows are states x_1..x_n
        let mut g = DMatrix::<f64>::zeros(6 * n, m);
        let mut a_pow = vec![SMatrix::<f64, 6, 6>::identity(); n + 1];
        for k in 1..=n {
            a_pow[k] = model.a * a_pow[k - 1];
        }
        for k in 1..=n {
            for j in 0..k {
                let block = a_pow[k - 1 - j] * model.b;
                for r in 0..6 {
                    for c in 0..3 {
                        g[((k - 1) * 6 + r, j * 3 + c)] = block[(r, c)];
                    }
                }
            }
        }
        // D: first differences (Δu_0 = u_0; the τ_prev part is a linear term)
        let mut d = DMatrix::<f64>::zeros(m, m);
        for i in 0..m {
            d[(i, i)] = 1.0;
            if i >= 3 {
                d[(i, i - 3)] = -1.0;
            }
        }
        let h = model.q_weight * g.transpose() * &g
            + c_weight * DMatrix::<f64>::identity(m, m)
            + r_weight * d.transpose() * d;
        let mut a_stack = DMatrix::<f64>::zeros(6 * n, 6);
        for k in 1..=n {
            for r in 0..6 {
                for c in 0..6 {
                    a_stack[((k - 1) * 6 + r, c)] = a_pow[k][(r, c)];
                }
            }
        }
        let f_map = model.q_weight * g.transpose() * a_stack;
        LinearMpc {
            model,
            horizon,
            c_weight,
            r_weight,
            u_max,
            h,
            f_map,
        }
    }

    /// Solves for the body-torque sequence from the error state
    /// `{q_vec, ω}` and the previously applied body torque.
    pub fn solve(&self, x0: &Vector6<f64>, tau_prev: &Vector3<f64>) -> LinearMpcSolution {
        let m = 3 * self.horizon;
        let mut f = DVector::<f64>::zeros(m);
        let fx = &self.f_map * DVector::from_column_slice(x0.as_slice());
        f.copy_from(&fx);
        for i in 0..3 {
            f[i] -= self.r_weight * tau_prev[i];
        }

        // active-set iterations: exact solve on the free variables
        let mut active: Vec<i8> = vec![0; m]; // -1 lower, 0 free, +1 upper
        let mut u = DVector::<f64>::zeros(m);
        let mut iterations = 0;
        loop {
            iterations += 1;
            let free: Vec<usize> = (0..m).filter(|&i| active[i] == 0).collect();
            if !free.is_empty() {
                let nf = free.len();
                let mut h_ff = DMatrix::<f64>::zeros(nf, nf);
                let mut rhs = DVector::<f64>::zeros(nf);
                for (ri, &i) in free.iter().enumerate() {
                    let mut acc = -f[i];
                    for j in 0..m {
                        if active[j] != 0 {
                            acc -= self.h[(i, j)] * (active[j] as f64 * self.u_max);
                        }
                    }
                    rhs[ri] = acc;
                    for (ci, &j) in free.iter().enumerate() {
                        h_ff[(ri, ci)] = self.h[(i, j)];
                    }
                }
                let sol = h_ff
                    .lu()
                    .solve(&rhs)
                    .expect("condensed Hessian is positive-definite");
                for (ri, &i) in free.iter().enumerate() {
                    u[i] = sol[ri];
                }
            }
            for i in 0..m {
                if active[i] != 0 {
                    u[i] = active[i] as f64 * self.u_max;
                }
            }

            // primal violation: clamp the worst offender and resolve
            let mut worst = 1e-12;
            let mut worst_i = None;
            for i in 0..m {
                if active[i] == 0 {
                    let over = u[i].abs() - self.u_max;
                    if over > worst {
                        worst = over;
                        worst_i = Some(i);
                    }
                }
            }
            if let Some(i) = worst_i {
                if iterations < 4 * m {
                    active[i] = if u[i] > 0.0 { 1 } else { -1 };
                    continue;
                }
            }

            // dual violation: release the worst mis-signed multiplier
            let g = &self.h * &u + &f;
            let mut worst = 1e-12;
            let mut worst_i = None;
            for i in 0..m {
                match active[i] {
                    1 if g[i] > worst => {
                        worst = g[i];
                        worst_i = Some(i);
                    }
                    -1 if -g[i] > worst => {
                        worst = -g[i];
                        worst_i = Some(i);
                    }
                    _ => {}
                }
            }
            match worst_i {
                Some(i) if iterations < 4 * m => {
                    active[i] = 0;
                }
                _ => break,
            }
        }

        // projected-gradient fixed-point residual
        let g = &self.h * &u + &f;
        let mut kkt = 0.0f64;
        for i in 0..m {
            let proj = (u[i] - g[i]).clamp(-self.u_max, self.u_max);
            kkt = kkt.max((u[i] - proj).abs());
        }

        let torques: Vec<Vector3<f64>> = (0..self.horizon)
            .map(|k| Vector3::new(u[3 * k], u[3 * k + 1], u[3 * k + 2]))
            .collect();
        let cost = self.rollout_cost(x0, &torques, tau_prev);
        LinearMpcSolution {
            torques,
            cost,
            kkt_residual: kkt,
            iterations,
        }
    }

    /// Explicit cost of a torque sequence under the linear model.
    pub fn rollout_cost(
        &self,
        x0: &Vector6<f64>,
        torques: &[Vector3<f64>],
        tau_prev: &Vector3<f64>,
    ) -> f64 {
        let mut x = *x0;
        let mut cost = 0.0;
        let mut last = *tau_prev;
        for tau in torques {
            cost += self.model.q_weight * x.norm_squared();
            cost += self.c_weight * tau.norm_squared();
            cost += self.r_weight * (tau - last).norm_squared();
            last = *tau;
            x = self.model.a * x + self.model.b * tau;
        }
        cost + self.model.q_weight * x.norm_squared()
    }
}

// ---------------------------------------------------------------------------
// Controllers
// ---------------------------------------------------------------------------

/// Which dynamics the active solver used for a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerMode {
    Nonlinear,
    Linear,
}

impl core::fmt::Display for ControllerMode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ControllerMode::Nonlinear => write!(f, "nonlinear"),
            ControllerMode::Linear => write!(f, "linear"),
        }
    }
}

/// Per-step controller output.
#[derive(Debug, Clone, Copy)]
pub struct ControlStep {
    /// Wheel torque to apply, already within ±u_max.
    pub u_rw: Vector3<f64>,
    pub mode: ControllerMode,
    pub solver_iterations: usize,
    pub cost: f64,
    pub degraded: bool,
}

/// Hybrid switching thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HybridConfig {
    pub switch_threshold_deg: f64,
    /// Extra margin before switching back to the nonlinear stage.
    pub hysteresis_deg: f64,
}

impl HybridConfig {
    pub fn nominal() -> Self {
        HybridConfig {
            switch_threshold_deg: 1.0,
            hysteresis_deg: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.switch_threshold_deg > self.hysteresis_deg && self.hysteresis_deg >= 0.0) {
            return Err(CoreError::InvalidParams(
                "switch threshold must exceed the (non-negative) hysteresis",
            ));
        }
        Ok(())
    }
}

/// The stepping controller: nonlinear-only, linear-only, or hybrid.
pub struct Controller<'a> {
    problem: Option<MpcProblem<'a>>,
    linear: Option<LinearMpc>,
    hybrid: Option<HybridConfig>,
    mode: ControllerMode,
    warm: Option<Vec<Vector3<f64>>>,
    u_prev: Vector3<f64>,
    target: Quaternion,
}

impl<'a> Controller<'a> {
    /// Nonlinear MPC for the whole maneuver.
    pub fn nonlinear(problem: MpcProblem<'a>, target: Quaternion) -> Self {
        Controller {
            problem: Some(problem),
            linear: None,
            hybrid: None,
            mode: ControllerMode::Nonlinear,
            warm: None,
            u_prev: Vector3::zeros(),
            target,
        }
    }

    /// Linear MPC for the whole maneuver.
    pub fn linear(linear: LinearMpc, target: Quaternion) -> Self {
        Controller {
            problem: None,
            linear: Some(linear),
            hybrid: None,
            mode: ControllerMode::Linear,
            warm: None,
            u_prev: Vector3::zeros(),
            target,
        }
    }

    /// Nonlinear stage that hands over to the linear stage below the
    /// switching threshold.
    pub fn hybrid(
        problem: MpcProblem<'a>,
        linear: LinearMpc,
        config: HybridConfig,
        target: Quaternion,
    ) -> Self {
        Controller {
            problem: Some(problem),
            linear: Some(linear),
            hybrid: Some(config),
            mode: ControllerMode::Nonlinear,
            warm: None,
            u_prev: Vector3::zeros(),
            target,
        }
    }

    pub fn mode(&self) -> ControllerMode {
        self.mode
    }

    pub fn last_applied(&self) -> Vector3<f64> {
        self.u_prev
    }

    /// Computes the wheel torque for the observed state.
    pub fn step(&mut self, observed: &BodyState) -> ControlStep {
        if let Some(config) = self.hybrid {
            let err = attitude_error_deg(&observed.q.error_from(&self.target));
            match self.mode {
                ControllerMode::Nonlinear if err < config.switch_threshold_deg => {
                    self.mode = ControllerMode::Linear;
                }
                ControllerMode::Linear
                    if err > config.switch_threshold_deg + config.hysteresis_deg =>
                {
                    self.mode = ControllerMode::Nonlinear;
                }
                _ => {}
            }
        }

        match self.mode {
            ControllerMode::Nonlinear => {
                let problem = self.problem.as_ref().expect("nonlinear stage configured");
                let solution = solve_nonlinear_mpc(
                    problem,
                    observed,
                    &self.target,
                    self.warm.as_deref(),
                    &self.u_prev,
                );
                // shift for the next warm start
                let mut warm: Vec<Vector3<f64>> = solution.torques[1..].to_vec();
                if let Some(last) = solution.torques.last() {
                    warm.push(*last);
                }
                self.warm = Some(warm);
                let u = clamp_torque(&solution.torques[0], problem.u_max);
                self.u_prev = u;
                ControlStep {
                    u_rw: u,
                    mode: ControllerMode::Nonlinear,
                    solver_iterations: solution.iterations,
                    cost: solution.cost,
                    degraded: solution.degraded,
                }
            }
            ControllerMode::Linear => {
                let linear = self.linear.as_ref().expect("linear stage configured");
                let e = observed.q.error_from(&self.target);
                let x0 = Vector6::new(
                    e.q1,
                    e.q2,
                    e.q3,
                    observed.omega.x,
                    observed.omega.y,
                    observed.omega.z,
                );
                // the decision variable is body torque; wheels apply its negative
                let tau_prev = -self.u_prev;
                let solution = linear.solve(&x0, &tau_prev);
                let u = clamp_torque(&(-solution.torques[0]), linear.u_max);
                self.u_prev = u;
                ControlStep {
                    u_rw: u,
                    mode: ControllerMode::Linear,
                    solver_iterations: solution.iterations,
                    cost: solution.cost,
                    degraded: solution.kkt_residual > 1e-8,
                }
            }
        }
    }
}
