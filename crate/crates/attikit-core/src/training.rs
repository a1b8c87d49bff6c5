//! Loss functions, multi-step rollout supervision, Lagrangian-dual weight
//! adaptation, and the mini-batch training loop.
//!
//! The regressor predicts `S` body-rate increments in one forward pass. Both
//! losses walk the predicted trajectory with the commanded torque held
//! constant:
//!
//! - data term: per-axis RMSE of `Δω̂` against the recorded `Δω`, normalized
//!   by the training-set σ_Δω and averaged over axes and steps;
//! - physics term: per-axis NRMSE of the acceleration residual
//!   `Δω̂/Δt - f(ω̂, ω̂_rw, u)` (with `f` the rigid-body dynamics at the
//!   *predicted* states and zero external torque), normalized by the standard
//!   deviation of the accelerations that `f` produces on the batch's recorded
//!   states, plus `p` times the mean squared mismatch in total angular
//!   momentum magnitude.
//!
//! The two are blended as `(1-β)·L_DD + β·L_PI`; in dual mode β is driven by
//! a multiplier ascending on the violation of `L_PI ≤ ε`.

use crate::dataset::{DatasetSplit, MODEL_INPUT_DIM};
use crate::mlp::{ForwardCache, GradientBuffer, MlpModel};
use crate::{CoreError, Result};
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Controller timestep used by the losses (the dataset sampling period).
pub const LOSS_DT: f64 = 0.1;

/// Which objective drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// β pinned to zero: only the data term.
    DataDriven,
    /// β adapted by dual ascent on `L_PI ≤ ε`.
    LagrangianDual,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight `p` on the momentum term inside `L_PI`.
    pub momentum_weight: f64,
    pub beta_init: f64,
    /// Dual ascent rate (per epoch).
    pub dual_step: f64,
    /// Constraint level ε for `L_PI`.
    pub target_eps: f64,
    /// Controller timestep Δt.
    pub dt: f64,
    pub mode: LossMode,
}

impl LossConfig {
    pub fn data_driven() -> Self {
        LossConfig {
            momentum_weight: 1e-2,
            beta_init: 0.0,
            dual_step: 1e-2,
            target_eps: 0.0,
            dt: LOSS_DT,
            mode: LossMode::DataDriven,
        }
    }

    pub fn lagrangian_dual(target_eps: f64) -> Self {
        LossConfig {
            momentum_weight: 1e-2,
            beta_init: 0.0,
            dual_step: 1e-2,
            target_eps,
            dt: LOSS_DT,
            mode: LossMode::LagrangianDual,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.momentum_weight < 0.0 {
            return Err(CoreError::InvalidParams("momentum_weight must be ≥ 0"));
        }
        if !(0.0..=1.0).contains(&self.beta_init) {
            return Err(CoreError::InvalidParams("beta_init must be in [0, 1]"));
        }
        if !(self.dual_step > 0.0) {
            return Err(CoreError::InvalidParams("dual_step must be positive"));
        }
        if !(self.dt > 0.0) {
            return Err(CoreError::InvalidParams("dt must be positive"));
        }
        Ok(())
    }
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub dd: f64,
    pub omega_dot: f64,
    pub h: f64,
}

impl LossValues {
    /// `L_PI = L_ω̇ + p·L_h`.
    pub fn pi(&self, momentum_weight: f64) -> f64 {
        self.omega_dot + momentum_weight * self.h
    }

    pub fn is_finite(&self) -> bool {
        self.dd.is_finite() && self.omega_dot.is_finite() && self.h.is_finite()
    }
}

/// `(1-β)·L_DD + β·L_PI`.
pub fn loss_total(l_dd: f64, l_pi: f64, beta: f64) -> f64 {
    (1.0 - beta) * l_dd + beta * l_pi
}

/// One dual-ascent step: `λ ← max(0, λ + step·(L_PI - ε))` with
/// `β = λ/(1+λ)`, mapping the current β back to its multiplier first.
/// The result always stays in `[0, 1)`.
pub fn dual_update(beta: f64, l_pi: f64, target_eps: f64, dual_step: f64) -> f64 {
    let beta = beta.clamp(0.0, 1.0 - 1e-12);
    let lambda = beta / (1.0 - beta);
    let lambda = (lambda + dual_step * (l_pi - target_eps)).max(0.0);
    lambda / (1.0 + lambda)
}

/// Per-sample inertia context reconstructed for the physics terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantContext {
    pub inertia: Matrix3<f64>,
    pub inertia_inv: Matrix3<f64>,
    /// Wheel inertia diagonal.
    pub inertia_rw: Vector3<f64>,
}

impl PlantContext {
    pub fn from_inertia_ctx(ctx: &[f64; 9]) -> Result<Self> {
        let inertia = Matrix3::new(
            ctx[0], ctx[1], ctx[2], //
            ctx[1], ctx[3], ctx[4], //
            ctx[2], ctx[4], ctx[5],
        );
        let inertia_inv = inertia
            .try_inverse()
            .ok_or(CoreError::Construction("sample inertia is singular"))?;
        Ok(PlantContext {
            inertia,
            inertia_inv,
            inertia_rw: Vector3::new(ctx[6], ctx[7], ctx[8]),
        })
    }

    /// Rigid-body acceleration `f(ω, ω_rw, u) = I_s⁻¹(-ω×(I_sω + I_rw∘ω_rw) - u)`
    /// with zero external torque and the wheel command reacting on the body.
    pub fn accel(&self, omega: &Vector3<f64>, omega_rw: &Vector3<f64>, u: &Vector3<f64>) -> Vector3<f64> {
        let m = self.inertia * omega + self.inertia_rw.component_mul(omega_rw);
        self.inertia_inv * (-omega.cross(&m) - u)
    }

    /// Jacobians of `accel` with respect to ω and ω_rw.
    pub fn accel_jacobians(
        &self,
        omega: &Vector3<f64>,
        omega_rw: &Vector3<f64>,
    ) -> (Matrix3<f64>, Matrix3<f64>) {
        let m = self.inertia * omega + self.inertia_rw.component_mul(omega_rw);
        let j_omega = self.inertia_inv
            * (-crate::dynamics::skew(omega) * self.inertia + crate::dynamics::skew(&m));
        let j_rw = self.inertia_inv
            * (-crate::dynamics::skew(omega) * Matrix3::from_diagonal(&self.inertia_rw));
        (j_omega, j_rw)
    }
}

/// One rollout start: the regressor input plus `S` steps of recorded truth.
#[derive(Debug, Clone)]
pub struct RolloutSample {
    pub input: [f64; MODEL_INPUT_DIM],
    /// True `Δω` at steps 1..=S.
    pub targets: Vec<Vector3<f64>>,
    /// True wheel speeds at steps 0..=S.
    pub true_omega_rw: Vec<Vector3<f64>>,
    pub plant: PlantContext,
}

impl RolloutSample {
    pub fn omega0(&self) -> Vector3<f64> {
        Vector3::new(self.input[0], self.input[1], self.input[2])
    }

    pub fn torque(&self) -> Vector3<f64> {
        Vector3::new(self.input[6], self.input[7], self.input[8])
    }

    /// True body rate at step `s` (cumulative sum of targets).
    pub fn true_omega(&self, s: usize) -> Vector3<f64> {
        let mut w = self.omega0();
        for t in 0..s {
            w += self.targets[t];
        }
        w
    }
}

/// A batch of rollout starts with a common horizon.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub horizon: usize,
    pub samples: Vec<RolloutSample>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Assembles rollout samples for dataset rows `starts`; every start must
    /// have `horizon` consecutive follow-up rows in the same simulation.
    pub fn from_split(split: &DatasetSplit, starts: &[usize], horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(CoreError::Construction("rollout horizon must be ≥ 1"));
        }
        let samples = &split.samples;
        let mut out = Vec::with_capacity(starts.len());
        for &i in starts {
            if !start_is_eligible(split, i, horizon) {
                return Err(CoreError::Construction(
                    "rollout would cross a trajectory boundary",
                ));
            }
            let s0 = &samples[i];
            let mut targets = Vec::with_capacity(horizon);
            let mut true_omega_rw = Vec::with_capacity(horizon + 1);
            true_omega_rw.push(s0.omega_rw());
            for s in 0..horizon {
                targets.push(samples[i + s].target());
                true_omega_rw.push(samples[i + s + 1].omega_rw());
            }
            out.push(RolloutSample {
                input: s0.model_input(),
                targets,
                true_omega_rw,
                plant: PlantContext::from_inertia_ctx(&s0.inertia_ctx)?,
            });
        }
        Ok(RolloutBatch {
            horizon,
            samples: out,
        })
    }
}

/// Whether dataset row `i` can seed a `horizon`-step rollout without leaving
/// its simulation.
pub fn start_is_eligible(split: &DatasetSplit, i: usize, horizon: usize) -> bool {
    let samples = &split.samples;
    if i + horizon >= samples.len() {
        return false;
    }
    let s0 = &samples[i];
    let sn = &samples[i + horizon];
    sn.sim_id == s0.sim_id && sn.step_id == s0.step_id + horizon as u32
}

/// Filters `indices` down to eligible rollout starts, preserving order.
pub fn eligible_starts(split: &DatasetSplit, indices: &[usize], horizon: usize) -> Vec<usize> {
    indices
        .iter()
        .copied()
        .filter(|&i| start_is_eligible(split, i, horizon))
        .collect()
}

// ---------------------------------------------------------------------------
// Loss evaluation over predicted increment sequences
// ---------------------------------------------------------------------------

/// Everything the loss (and its gradient) needs about one evaluated batch.
pub struct SequenceEval {
    pub values: LossValues,
    /// Per-step, per-axis RMSE of the data term.
    rmse_dd: Vec<[f64; 3]>,
    /// Per-step, per-axis RMSE of the acceleration residual.
    rmse_resid: Vec<[f64; 3]>,
    /// Per-axis σ of the physics accelerations on the recorded states.
    sigma_accel: [f64; 3],
    /// Per sample and step: prediction error, residual, predicted states,
    /// and momentum terms.
    err: Vec<Vector3<f64>>,
    resid: Vec<Vector3<f64>>,
    omega_hat: Vec<Vector3<f64>>,    // states 0..=S per sample
    omega_rw_hat: Vec<Vector3<f64>>, // states 0..=S per sample
    m_hat: Vec<Vector3<f64>>,        // momentum vector at steps 1..=S
    h_diff: Vec<f64>,                // ĥ - h_true at steps 1..=S
}

/// Evaluates both losses for externally supplied prediction sequences
/// (`preds[i]` holds sample i's `S` predicted increments). This is the single
/// code path shared by training, validation, and the evaluation metrics.
pub fn sequence_losses(
    preds: &[Vec<Vector3<f64>>],
    batch: &RolloutBatch,
    sigma_dw: &[f64; 3],
    dt: f64,
) -> SequenceEval {
    let s_len = batch.horizon;
    let b = batch.len();
    debug_assert_eq!(preds.len(), b);

    let mut err = vec![Vector3::zeros(); b * s_len];
    let mut resid = vec![Vector3::zeros(); b * s_len];
    let mut omega_hat = vec![Vector3::zeros(); b * (s_len + 1)];
    let mut omega_rw_hat = vec![Vector3::zeros(); b * (s_len + 1)];
    let mut m_hat = vec![Vector3::zeros(); b * s_len];
    let mut h_diff = vec![0.0; b * s_len];

    let mut sum_e2 = vec![[0.0f64; 3]; s_len];
    let mut sum_r2 = vec![[0.0f64; 3]; s_len];
    let mut accel_sum = [0.0f64; 3];
    let mut accel_sq = [0.0f64; 3];
    let mut h_total = 0.0f64;

    for (i, sample) in batch.samples.iter().enumerate() {
        let u = sample.torque();
        let mut w_hat = sample.omega0();
        let mut wrw_hat = sample.true_omega_rw[0];
        omega_hat[i * (s_len + 1)] = w_hat;
        omega_rw_hat[i * (s_len + 1)] = wrw_hat;
        let mut w_true = w_hat;
        let irw_inv_u = Vector3::new(
            u.x / sample.plant.inertia_rw.x,
            u.y / sample.plant.inertia_rw.y,
            u.z / sample.plant.inertia_rw.z,
        );

        for s in 0..s_len {
            // σ reference: physics acceleration on the recorded state
            let f_true = sample
                .plant
                .accel(&w_true, &sample.true_omega_rw[s], &u);
            for a in 0..3 {
                accel_sum[a] += f_true[a];
                accel_sq[a] += f_true[a] * f_true[a];
            }

            let dw_hat = preds[i][s];
            let e = dw_hat - sample.targets[s];
            err[i * s_len + s] = e;
            for a in 0..3 {
                sum_e2[s][a] += e[a] * e[a];
            }

            // residual of the predicted trajectory against the dynamics
            let f_hat = sample.plant.accel(&w_hat, &wrw_hat, &u);
            let r = dw_hat / dt - f_hat;
            resid[i * s_len + s] = r;
            for a in 0..3 {
                sum_r2[s][a] += r[a] * r[a];
            }

            // advance predicted and true states
            w_hat += dw_hat;
            wrw_hat += dt * irw_inv_u - dw_hat;
            omega_hat[i * (s_len + 1) + s + 1] = w_hat;
            omega_rw_hat[i * (s_len + 1) + s + 1] = wrw_hat;
            w_true += sample.targets[s];

            let m = sample.plant.inertia * w_hat
                + sample.plant.inertia_rw.component_mul(&wrw_hat);
            let m_true = sample.plant.inertia * w_true
                + sample
                    .plant
                    .inertia_rw
                    .component_mul(&sample.true_omega_rw[s + 1]);
            let d = m.norm() - m_true.norm();
            m_hat[i * s_len + s] = m;
            h_diff[i * s_len + s] = d;
            h_total += d * d;
        }
    }

    let bn = b as f64;
    let count = (b * s_len) as f64;
    let mut sigma_accel = [0.0f64; 3];
    for a in 0..3 {
        let mean = accel_sum[a] / count;
        let var = (accel_sq[a] / count - mean * mean).max(0.0);
        sigma_accel[a] = var.sqrt().max(1e-12);
    }

    let mut rmse_dd = vec![[0.0f64; 3]; s_len];
    let mut rmse_resid = vec![[0.0f64; 3]; s_len];
    let mut l_dd = 0.0;
    let mut l_resid = 0.0;
    for s in 0..s_len {
        for a in 0..3 {
            rmse_dd[s][a] = (sum_e2[s][a] / bn).sqrt();
            rmse_resid[s][a] = (sum_r2[s][a] / bn).sqrt();
            l_dd += rmse_dd[s][a] / sigma_dw[a];
            l_resid += rmse_resid[s][a] / sigma_accel[a];
        }
    }
    let norm = (3 * s_len) as f64;
    let values = LossValues {
        dd: l_dd / norm,
        omega_dot: l_resid / norm,
        h: h_total / count,
    };

    SequenceEval {
        values,
        rmse_dd,
        rmse_resid,
        sigma_accel,
        err,
        resid,
        omega_hat,
        omega_rw_hat,
        m_hat,
        h_diff,
    }
}

/// Runs the model on every batch sample and collects the predicted
/// increment sequences.
pub fn predict_sequences(
    model: &MlpModel,
    batch: &RolloutBatch,
    caches: &mut Vec<ForwardCache>,
) -> Result<Vec<Vec<Vector3<f64>>>> {
    let s_len = batch.horizon;
    if model.config.horizon != s_len {
        return Err(CoreError::Usage("batch horizon differs from model horizon"));
    }
    if caches.len() < batch.len() {
        caches.resize_with(batch.len(), ForwardCache::default);
    }
    let mut preds = Vec::with_capacity(batch.len());
    for (i, sample) in batch.samples.iter().enumerate() {
        let out = model.forward_cached(&sample.input, &mut caches[i])?;
        let seq: Vec<Vector3<f64>> = (0..s_len)
            .map(|s| Vector3::new(out[3 * s], out[3 * s + 1], out[3 * s + 2]))
            .collect();
        preds.push(seq);
    }
    Ok(preds)
}

/// Forward-only rollout losses for a batch.
pub fn rollout_losses(model: &MlpModel, batch: &RolloutBatch, dt: f64) -> Result<LossValues> {
    let mut caches = Vec::new();
    let preds = predict_sequences(model, batch, &mut caches)?;
    Ok(sequence_losses(&preds, batch, &model.normalization.target_std, dt).values)
}

/// Rollout losses plus the gradient of `(1-β)·L_DD + β·(L_ω̇ + p·L_h)`
/// accumulated into `grads`.
///
/// With `β = 0` the physics terms contribute nothing to the gradient and
/// none of their adjoint code runs.
pub fn rollout_losses_grad(
    model: &MlpModel,
    batch: &RolloutBatch,
    config: &LossConfig,
    beta: f64,
    grads: &mut GradientBuffer,
    caches: &mut Vec<ForwardCache>,
) -> Result<LossValues> {
    let s_len = batch.horizon;
    let b = batch.len();
    let dt = config.dt;
    let preds = predict_sequences(model, batch, caches)?;
    let eval = sequence_losses(&preds, batch, &model.normalization.target_std, dt);

    let sigma_dw = &model.normalization.target_std;
    let bn = b as f64;
    let norm = (3 * s_len) as f64;
    let w_dd = 1.0 - beta;
    let w_pi = beta;

    let mut upstream = vec![0.0f64; 3 * s_len];
    for (i, sample) in batch.samples.iter().enumerate() {
        upstream.iter_mut().for_each(|v| *v = 0.0);
        let mut adj_w = Vector3::zeros();
        let mut adj_wrw = Vector3::zeros();
        for s in (0..s_len).rev() {
            // momentum-term adjoint lands on the step-s+1 states
            if w_pi > 0.0 {
                let m = eval.m_hat[i * s_len + s];
                let m_norm = m.norm();
                if m_norm > 0.0 {
                    let gm = (w_pi * config.momentum_weight * 2.0 * eval.h_diff[i * s_len + s]
                        / (bn * s_len as f64))
                        * (m / m_norm);
                    adj_w += sample.plant.inertia * gm;
                    adj_wrw += sample.plant.inertia_rw.component_mul(&gm);
                }
            }

            // direct gradients of the step-s terms in Δω̂_s
            let mut g = Vector3::zeros();
            let e = eval.err[i * s_len + s];
            for a in 0..3 {
                let rm = eval.rmse_dd[s][a];
                if rm > 0.0 {
                    g[a] += w_dd * e[a] / (bn * rm * sigma_dw[a] * norm);
                }
            }
            let gr = if w_pi > 0.0 {
                let r = eval.resid[i * s_len + s];
                let mut gr = Vector3::zeros();
                for a in 0..3 {
                    let rm = eval.rmse_resid[s][a];
                    if rm > 0.0 {
                        gr[a] = w_pi * r[a] / (bn * rm * eval.sigma_accel[a] * norm);
                    }
                }
                g += gr / dt;
                gr
            } else {
                Vector3::zeros()
            };
            g += adj_w - adj_wrw;
            upstream[3 * s] = g.x;
            upstream[3 * s + 1] = g.y;
            upstream[3 * s + 2] = g.z;

            // move the adjoints onto the step-s states (through the residual's
            // dependence on the pre-step predicted state)
            if w_pi > 0.0 {
                let w_prev = eval.omega_hat[i * (s_len + 1) + s];
                let wrw_prev = eval.omega_rw_hat[i * (s_len + 1) + s];
                let (j_w, j_rw) = sample.plant.accel_jacobians(&w_prev, &wrw_prev);
                adj_w -= j_w.transpose() * gr;
                adj_wrw -= j_rw.transpose() * gr;
            }
        }
        model.backward(&caches[i], &upstream, grads)?;
    }
    Ok(eval.values)
}

// ---------------------------------------------------------------------------
// Stand-alone single-step loss forms
// ---------------------------------------------------------------------------

/// Normalized RMSE of predicted against true increments: per-axis RMSE over
/// the batch divided by the per-axis σ, averaged over axes.
pub fn loss_dd(pred: &[Vector3<f64>], target: &[Vector3<f64>], sigma_dw: &[f64; 3]) -> f64 {
    debug_assert_eq!(pred.len(), target.len());
    let bn = pred.len() as f64;
    let mut loss = 0.0;
    for a in 0..3 {
        let mut sum = 0.0;
        for (p, t) in pred.iter().zip(target.iter()) {
            let e = p[a] - t[a];
            sum += e * e;
        }
        loss += (sum / bn).sqrt() / sigma_dw[a];
    }
    loss / 3.0
}

/// NRMSE of the implied acceleration `Δω̂/Δt` against the rigid-body
/// acceleration at the given states, normalized per axis by the σ of those
/// physics accelerations over the batch.
pub fn loss_omega_dot(
    pred_dw: &[Vector3<f64>],
    omega: &[Vector3<f64>],
    omega_rw: &[Vector3<f64>],
    torque: &[Vector3<f64>],
    plant: &PlantContext,
    dt: f64,
) -> f64 {
    let bn = pred_dw.len() as f64;
    let mut sum_r2 = [0.0f64; 3];
    let mut accel_sum = [0.0f64; 3];
    let mut accel_sq = [0.0f64; 3];
    for i in 0..pred_dw.len() {
        let f = plant.accel(&omega[i], &omega_rw[i], &torque[i]);
        let r = pred_dw[i] / dt - f;
        for a in 0..3 {
            sum_r2[a] += r[a] * r[a];
            accel_sum[a] += f[a];
            accel_sq[a] += f[a] * f[a];
        }
    }
    let mut loss = 0.0;
    for a in 0..3 {
        let mean = accel_sum[a] / bn;
        let sigma = ((accel_sq[a] / bn - mean * mean).max(0.0)).sqrt().max(1e-12);
        loss += (sum_r2[a] / bn).sqrt() / sigma;
    }
    loss / 3.0
}

/// Mean squared mismatch between predicted and recorded total angular
/// momentum magnitude after one step; the predicted wheel speed follows the
/// wheel dynamics driven by the implied acceleration.
#[allow(clippy::too_many_arguments)]
pub fn loss_h(
    pred_dw: &[Vector3<f64>],
    omega: &[Vector3<f64>],
    omega_rw: &[Vector3<f64>],
    torque: &[Vector3<f64>],
    target_dw: &[Vector3<f64>],
    omega_rw_next: &[Vector3<f64>],
    plant: &PlantContext,
    dt: f64,
) -> f64 {
    let bn = pred_dw.len() as f64;
    let mut total = 0.0;
    for i in 0..pred_dw.len() {
        let irw_inv_u = Vector3::new(
            torque[i].x / plant.inertia_rw.x,
            torque[i].y / plant.inertia_rw.y,
            torque[i].z / plant.inertia_rw.z,
        );
        let wrw_hat = omega_rw[i] + dt * irw_inv_u - pred_dw[i];
        let m_hat = plant.inertia * (omega[i] + pred_dw[i])
            + plant.inertia_rw.component_mul(&wrw_hat);
        let m_true = plant.inertia * (omega[i] + target_dw[i])
            + plant.inertia_rw.component_mul(&omega_rw_next[i]);
        let d = m_hat.norm() - m_true.norm();
        total += d * d;
    }
    total / bn
}

// ---------------------------------------------------------------------------
// Optimizer and training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before the rate is halved.
    pub lr_patience: usize,
    /// Epochs without validation improvement before stopping.
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Evaluate the physics terms for the history even when they do not
    /// drive training.
    pub track_physics: bool,
}

impl TrainConfig {
    pub fn nominal(seed: u64) -> Self {
        TrainConfig {
            batch_size: 16384,
            epochs: 500,
            learning_rate: 1e-3,
            lr_patience: 20,
            early_stop_patience: 50,
            seed,
            track_physics: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(CoreError::InvalidParams("batch_size and epochs must be ≥ 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(CoreError::InvalidParams("learning_rate must be positive"));
        }
        Ok(())
    }
}

/// First-order adaptive-moment optimizer over the flat parameter vector.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub beta: f64,
    pub train_dd: f64,
    pub train_pi: f64,
    pub val_dd: f64,
    pub val_pi: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation checkpoint.
    pub model: MlpModel,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub final_beta: f64,
}

fn flat_gradient(grads: &GradientBuffer) -> Vec<f64> {
    let mut out = Vec::new();
    for l in 0..grads.weights.len() {
        out.extend_from_slice(&grads.weights[l]);
        out.extend_from_slice(&grads.biases[l]);
    }
    out
}

/// Mini-batch training with the configured loss mode. Deterministic in the
/// seed; returns the best-validation checkpoint and the per-epoch history.
pub fn train(
    model: MlpModel,
    split: &DatasetSplit,
    train_config: &TrainConfig,
    loss_config: &LossConfig,
) -> Result<TrainOutcome> {
    train_with_callback(model, split, train_config, loss_config, |_, _| {})
}

/// [`train`] with a per-epoch observer. The callback receives each epoch's
/// stats and, when the epoch improved the validation metric, the new best
/// model (for checkpointing).
pub fn train_with_callback<F>(
    mut model: MlpModel,
    split: &DatasetSplit,
    train_config: &TrainConfig,
    loss_config: &LossConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochStats, Option<&MlpModel>),
{
    train_config.validate()?;
    loss_config.validate()?;
    model.validate()?;
    let horizon = model.config.horizon;

    let mut train_starts = eligible_starts(split, &split.train, horizon);
    let val_starts = eligible_starts(split, &split.val, horizon);
    if train_starts.is_empty() || val_starts.is_empty() {
        return Err(CoreError::Construction(
            "no rollout-eligible samples in train or validation split",
        ));
    }
    // order independence from the incoming split permutation
    train_starts.sort_unstable();
    let mut val_sorted = val_starts;
    val_sorted.sort_unstable();
    let val_batch = RolloutBatch::from_split(split, &val_sorted, horizon)?;

    let batch_size = train_config.batch_size.min(train_starts.len());
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    rng.set_stream(0x747261696e); // dedicated stream for batch shuffling

    let mut params = model.flatten_params();
    let mut adam = Adam::new(params.len());
    let mut grads = GradientBuffer::zeros_like(&model);
    let mut caches: Vec<ForwardCache> = Vec::new();
    let mut beta = match loss_config.mode {
        LossMode::DataDriven => 0.0,
        LossMode::LagrangianDual => loss_config.beta_init,
    };

    let mut history = Vec::with_capacity(train_config.epochs);
    let mut best_val = f64::INFINITY;
    let mut best_params = params.clone();
    let mut best_epoch = 0usize;
    let mut since_best = 0usize;
    let mut since_lr_drop = 0usize;
    let mut lr = train_config.learning_rate;

    for epoch in 0..train_config.epochs {
        use rand::seq::SliceRandom;
        train_starts.shuffle(&mut rng);

        let mut dd_sum = 0.0;
        let mut pi_sum = 0.0;
        let mut seen = 0usize;
        for chunk in train_starts.chunks(batch_size) {
            let batch = RolloutBatch::from_split(split, chunk, horizon)?;
            grads.reset();
            let values =
                rollout_losses_grad(&model, &batch, loss_config, beta, &mut grads, &mut caches)?;
            if !values.is_finite() {
                return Err(CoreError::Divergence { epoch });
            }
            let flat = flat_gradient(&grads);
            adam.step(&mut params, &flat, lr);
            model.set_params_from_flat(&params)?;
            dd_sum += values.dd * chunk.len() as f64;
            pi_sum += values.pi(loss_config.momentum_weight) * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_dd = dd_sum / seen as f64;
        let train_pi = pi_sum / seen as f64;

        let (val_dd, val_pi) = if train_config.track_physics
            || loss_config.mode == LossMode::LagrangianDual
        {
            let v = rollout_losses(&model, &val_batch, loss_config.dt)?;
            (v.dd, v.pi(loss_config.momentum_weight))
        } else {
            // physics path untouched: evaluate only the data term, with the
            // exact accumulation order of `sequence_losses`
            let mut eval_caches = Vec::new();
            let preds = predict_sequences(&model, &val_batch, &mut eval_caches)?;
            let sigma = &model.normalization.target_std;
            let mut sum_e2 = vec![[0.0f64; 3]; horizon];
            for (i, sample) in val_batch.samples.iter().enumerate() {
                for s in 0..horizon {
                    let e = preds[i][s] - sample.targets[s];
                    for a in 0..3 {
                        sum_e2[s][a] += e[a] * e[a];
                    }
                }
            }
            let bn = val_batch.len() as f64;
            let mut l_dd = 0.0;
            for row in sum_e2.iter() {
                for a in 0..3 {
                    l_dd += (row[a] / bn).sqrt() / sigma[a];
                }
            }
            (l_dd / (3 * horizon) as f64, f64::NAN)
        };
        if !val_dd.is_finite() {
            return Err(CoreError::Divergence { epoch });
        }

        if loss_config.mode == LossMode::LagrangianDual {
            beta = dual_update(beta, train_pi, loss_config.target_eps, loss_config.dual_step);
        }

        let stats = EpochStats {
            epoch,
            lr,
            beta,
            train_dd,
            train_pi,
            val_dd,
            val_pi,
        };
        history.push(stats);

        if val_dd < best_val {
            best_val = val_dd;
            best_params.copy_from_slice(&params);
            best_epoch = epoch;
            since_best = 0;
            since_lr_drop = 0;
            on_epoch(&stats, Some(&model));
        } else {
            on_epoch(&stats, None);
            since_best += 1;
            since_lr_drop += 1;
            if since_lr_drop >= train_config.lr_patience && lr > 1e-6 {
                lr *= 0.5;
                since_lr_drop = 0;
            }
            if since_best >= train_config.early_stop_patience {
                break;
            }
        }
    }

    model.set_params_from_flat(&best_params)?;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        final_beta: beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_split, extract_samples, run_excitation_sim, CampaignConfig};
    use crate::mlp::{MlpConfig, ModelNormalization};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn tiny_split(seed: u64) -> DatasetSplit {
        let config = CampaignConfig {
            n_simulations: 2,
            n_perturbed: 1,
            duration: 10.0,
            ..CampaignConfig::nominal(seed)
        };
        let mut samples = Vec::new();
        for i in 0..config.total_runs() {
            samples.extend(extract_samples(&run_excitation_sim(&config, i).unwrap()));
        }
        build_split(samples, 0.67, seed).unwrap()
    }

    #[test]
    fn loss_total_blend() {
        assert_eq!(loss_total(2.0, 4.0, 0.0), 2.0);
        assert_eq!(loss_total(2.0, 4.0, 1.0), 4.0);
        assert_eq!(loss_total(2.0, 4.0, 0.5), 3.0);
    }

    #[test]
    fn dual_update_behaviour() {
        // λ = 1 ⇒ β = 0.5
        let beta = 0.5;
        // zero violation keeps β fixed
        assert_relative_eq!(dual_update(beta, 1.0, 1.0, 0.1), 0.5, epsilon = 1e-12);
        // repeated satisfaction drives β to 0
        let mut b = 0.5;
        for _ in 0..2000 {
            b = dual_update(b, 0.0, 1.0, 0.1);
        }
        assert!(b < 1e-9, "β did not relax: {b}");
        // violation is monotone increasing
        let mut prev = 0.0;
        let mut b = 0.0;
        for _ in 0..50 {
            b = dual_update(b, 2.0, 1.0, 0.1);
            assert!(b >= prev);
            assert!((0.0..1.0).contains(&b));
            prev = b;
        }
    }

    #[test]
    fn loss_dd_cases() {
        let sigma = [0.1, 0.2, 0.4];
        let target: Vec<Vector3<f64>> = (0..8)
            .map(|i| Vector3::new(i as f64 * 0.01, -0.02, 0.03))
            .collect();
        assert_eq!(loss_dd(&target, &target, &sigma), 0.0);
        // constant one-axis offset of σ contributes exactly 1/3 (mean over axes)
        let pred: Vec<Vector3<f64>> = target
            .iter()
            .map(|t| t + Vector3::new(sigma[0], 0.0, 0.0))
            .collect();
        assert_relative_eq!(loss_dd(&pred, &target, &sigma), 1.0 / 3.0, epsilon = 1e-12);
        // permutation invariance
        let mut pred2 = pred.clone();
        let mut target2 = target.clone();
        pred2.reverse();
        target2.reverse();
        assert_eq!(
            loss_dd(&pred, &target, &sigma),
            loss_dd(&pred2, &target2, &sigma)
        );
    }

    #[test]
    fn loss_omega_dot_cases() {
        let plant =
            PlantContext::from_inertia_ctx(&[5.7, 0.045, 0.002, 3.3, 0.012, 6.1, 1e-3, 1e-3, 1e-3])
                .unwrap();
        let omega = [
            Vector3::new(0.05, -0.02, 0.04),
            Vector3::new(-0.01, 0.03, 0.02),
        ];
        let omega_rw = [Vector3::new(10.0, 5.0, -4.0), Vector3::new(-8.0, 2.0, 6.0)];
        let torque = [
            Vector3::new(0.01, -0.02, 0.005),
            Vector3::new(-0.004, 0.03, 0.01),
        ];
        let dt = 0.1;
        // exact physics prediction zeroes the loss
        let exact: Vec<Vector3<f64>> = (0..2)
            .map(|i| dt * plant.accel(&omega[i], &omega_rw[i], &torque[i]))
            .collect();
        assert_relative_eq!(
            loss_omega_dot(&exact, &omega, &omega_rw, &torque, &plant, dt),
            0.0,
            epsilon = 1e-12
        );
        // doubling the error doubles the loss (homogeneity of the numerator)
        let off: Vec<Vector3<f64>> = exact
            .iter()
            .map(|e| e + Vector3::new(1e-4, -2e-4, 3e-4))
            .collect();
        let off2: Vec<Vector3<f64>> = exact
            .iter()
            .map(|e| e + 2.0 * Vector3::new(1e-4, -2e-4, 3e-4))
            .collect();
        let l1 = loss_omega_dot(&off, &omega, &omega_rw, &torque, &plant, dt);
        let l2 = loss_omega_dot(&off2, &omega, &omega_rw, &torque, &plant, dt);
        assert_relative_eq!(l2, 2.0 * l1, epsilon = 1e-10);

        // two-sample pencil check of the full formula
        let pred = [
            exact[0] + Vector3::new(1e-4, 0.0, 0.0),
            exact[1] - Vector3::new(2e-4, 0.0, 0.0),
        ];
        let f0 = plant.accel(&omega[0], &omega_rw[0], &torque[0]);
        let f1 = plant.accel(&omega[1], &omega_rw[1], &torque[1]);
        let mut expected = 0.0;
        for a in 0..3 {
            let r0 = pred[0][a] / dt - f0[a];
            let r1 = pred[1][a] / dt - f1[a];
            let rmse = ((r0 * r0 + r1 * r1) / 2.0).sqrt();
            let mean = (f0[a] + f1[a]) / 2.0;
            let sigma = (((f0[a] * f0[a] + f1[a] * f1[a]) / 2.0 - mean * mean).max(0.0))
                .sqrt()
                .max(1e-12);
            expected += rmse / sigma;
        }
        expected /= 3.0;
        assert_relative_eq!(
            loss_omega_dot(&pred, &omega, &omega_rw, &torque, &plant, dt),
            expected,
            epsilon = 1e-12
        );
    }

    #[test]
    fn loss_h_cases() {
        let plant =
            PlantContext::from_inertia_ctx(&[5.7, 0.045, 0.002, 3.3, 0.012, 6.1, 1e-3, 1e-3, 1e-3])
                .unwrap();
        let dt = 0.1;
        let omega = [Vector3::new(0.05, -0.02, 0.04)];
        let omega_rw = [Vector3::new(10.0, 5.0, -4.0)];
        let torque = [Vector3::new(0.01, -0.02, 0.005)];
        let target = [Vector3::new(1e-3, -2e-3, 5e-4)];
        // the recorded next wheel speed implied by the same propagation rule
        let irw_inv_u = torque[0] / 1e-3;
        let wrw_next = [omega_rw[0] + dt * irw_inv_u - target[0]];
        // perfect prediction (and implied wheel speed) zeroes the loss
        assert_relative_eq!(
            loss_h(&target, &omega, &omega_rw, &torque, &target, &wrw_next, &plant, dt),
            0.0,
            epsilon = 1e-18
        );
        // single-sample pencil check
        let pred = [target[0] + Vector3::new(2e-4, 1e-4, -1e-4)];
        let wrw_hat = omega_rw[0] + dt * irw_inv_u - pred[0];
        let m_hat = plant.inertia * (omega[0] + pred[0]) + 1e-3 * wrw_hat;
        let m_true = plant.inertia * (omega[0] + target[0]) + 1e-3 * wrw_next[0];
        let expected = (m_hat.norm() - m_true.norm()).powi(2);
        assert_relative_eq!(
            loss_h(&pred, &omega, &omega_rw, &torque, &target, &wrw_next, &plant, dt),
            expected,
            epsilon = 1e-15
        );
        // invariance under a global rotation of all vectors and inertia
        let rot = crate::quat::Quaternion::from_axis_angle(Vector3::new(0.3, -1.0, 0.5), 0.8)
            .rotation_matrix();
        let rotate = |v: &Vector3<f64>| rot * v;
        let mut ctx = [0.0; 9];
        let ri = rot * plant.inertia * rot.transpose();
        ctx[0] = ri[(0, 0)];
        ctx[1] = ri[(0, 1)];
        ctx[2] = ri[(0, 2)];
        ctx[3] = ri[(1, 1)];
        ctx[4] = ri[(1, 2)];
        ctx[5] = ri[(2, 2)];
        // wheel inertia is isotropic (1e-3·I) so its rotation is itself
        ctx[6] = 1e-3;
        ctx[7] = 1e-3;
        ctx[8] = 1e-3;
        let plant_rot = PlantContext::from_inertia_ctx(&ctx).unwrap();
        let l_rot = loss_h(
            &[rotate(&pred[0])],
            &[rotate(&omega[0])],
            &[rotate(&omega_rw[0])],
            &[rotate(&torque[0])],
            &[rotate(&target[0])],
            &[rotate(&wrw_next[0])],
            &plant_rot,
            dt,
        );
        let l = loss_h(&pred, &omega, &omega_rw, &torque, &target, &wrw_next, &plant, dt);
        assert_relative_eq!(l_rot, l, epsilon = 1e-12);
    }

    #[test]
    fn single_step_rollout_matches_standalone_losses() {
        let split = tiny_split(3);
        let starts = eligible_starts(&split, &split.train, 1);
        let batch = RolloutBatch::from_split(&split, &starts[..64], 1).unwrap();
        // all samples share the nominal plant in campaign run 0; restrict to a
        // uniform-plant batch for the standalone form
        let plant = batch.samples[0].plant;
        let uniform: Vec<&RolloutSample> = batch
            .samples
            .iter()
            .filter(|s| s.plant == plant)
            .collect();
        let preds: Vec<Vec<Vector3<f64>>> = batch
            .samples
            .iter()
            .map(|s| alloc::vec![s.targets[0] * 1.1])
            .collect();
        let sigma = [1e-3, 1e-3, 1e-3];
        let eval = sequence_losses(&preds, &batch, &sigma, LOSS_DT);
        // dd must agree exactly with the standalone form on the same batch
        let p: Vec<Vector3<f64>> = preds.iter().map(|s| s[0]).collect();
        let t: Vec<Vector3<f64>> = batch.samples.iter().map(|s| s.targets[0]).collect();
        assert_relative_eq!(eval.values.dd, loss_dd(&p, &t, &sigma), epsilon = 1e-14);
        assert!(uniform.len() > 4);
    }

    #[test]
    fn perfect_physics_oracle_gives_zero_losses() {
        // synthetic data that follows the loss's own propagation exactly
        let plant =
            PlantContext::from_inertia_ctx(&[5.7, 0.045, 0.002, 3.3, 0.012, 6.1, 1e-3, 1e-3, 1e-3])
                .unwrap();
        let dt = 0.1;
        let horizon = 3;
        let u = Vector3::new(0.01, -0.005, 0.02);
        let mut w = Vector3::new(0.04, -0.03, 0.05);
        let mut wrw = Vector3::new(5.0, -3.0, 8.0);
        let mut input = [0.0; MODEL_INPUT_DIM];
        input[0] = w.x;
        input[1] = w.y;
        input[2] = w.z;
        input[3] = wrw.x;
        input[4] = wrw.y;
        input[5] = wrw.z;
        input[6] = u.x;
        input[7] = u.y;
        input[8] = u.z;
        let ctx = [5.7, 0.045, 0.002, 3.3, 0.012, 6.1, 1e-3, 1e-3, 1e-3];
        input[12..21].copy_from_slice(&ctx);
        let mut targets = Vec::new();
        let mut true_omega_rw = alloc::vec![wrw];
        for _ in 0..horizon {
            let dw = dt * plant.accel(&w, &wrw, &u);
            targets.push(dw);
            w += dw;
            wrw += dt * (u / 1e-3) - dw;
            true_omega_rw.push(wrw);
        }
        let sample = RolloutSample {
            input,
            targets: targets.clone(),
            true_omega_rw,
            plant,
        };
        let batch = RolloutBatch {
            horizon,
            samples: alloc::vec![sample],
        };
        let eval = sequence_losses(&[targets], &batch, &[1e-3; 3], dt);
        assert!(eval.values.dd.abs() < 1e-12);
        assert!(eval.values.omega_dot.abs() < 1e-9, "{}", eval.values.omega_dot);
        assert!(eval.values.h.abs() < 1e-18);
    }

    #[test]
    fn two_step_rollout_matches_sequential_hand_computation() {
        let plant =
            PlantContext::from_inertia_ctx(&[5.7, 0.0, 0.0, 3.3, 0.0, 6.1, 1e-3, 1e-3, 1e-3])
                .unwrap();
        let dt = 0.1;
        let u = Vector3::new(0.02, 0.0, -0.01);
        let w0 = Vector3::new(0.03, -0.02, 0.01);
        let wrw0 = Vector3::new(4.0, 2.0, -1.0);
        let targets = alloc::vec![
            Vector3::new(1e-3, 2e-3, -1e-3),
            Vector3::new(-2e-3, 1e-3, 5e-4),
        ];
        let true_wrw = alloc::vec![
            wrw0,
            Vector3::new(5.0, 2.5, -1.5),
            Vector3::new(6.0, 3.0, -2.0),
        ];
        let preds = alloc::vec![
            Vector3::new(1.2e-3, 1.8e-3, -0.7e-3),
            Vector3::new(-1.5e-3, 0.5e-3, 1e-3),
        ];
        let mut input = [0.0; MODEL_INPUT_DIM];
        input[0] = w0.x;
        input[1] = w0.y;
        input[2] = w0.z;
        input[3] = wrw0.x;
        input[4] = wrw0.y;
        input[5] = wrw0.z;
        input[6] = u.x;
        input[7] = u.y;
        input[8] = u.z;
        input[12..21].copy_from_slice(&[5.7, 0.0, 0.0, 3.3, 0.0, 6.1, 1e-3, 1e-3, 1e-3]);
        let sample = RolloutSample {
            input,
            targets: targets.clone(),
            true_omega_rw: true_wrw.clone(),
            plant,
        };
        let batch = RolloutBatch {
            horizon: 2,
            samples: alloc::vec![sample],
        };
        let sigma = [2e-3, 2e-3, 2e-3];
        let eval = sequence_losses(&[preds.clone()], &batch, &sigma, dt);

        // sequential hand computation
        let irw_inv_u = u / 1e-3;
        // step 1
        let mut w_hat = w0;
        let mut wrw_hat = wrw0;
        let mut w_true = w0;
        let mut dd = 0.0;
        let mut rr = 0.0;
        let mut h = 0.0;
        let mut accels = Vec::new();
        for s in 0..2 {
            accels.push(plant.accel(&w_true, &true_wrw[s], &u));
            let e = preds[s] - targets[s];
            w_hat += preds[s];
            wrw_hat += dt * irw_inv_u - preds[s];
            w_true += targets[s];
            let m_hat = plant.inertia * w_hat + 1e-3 * wrw_hat;
            let m_true = plant.inertia * w_true + 1e-3 * true_wrw[s + 1];
            h += (m_hat.norm() - m_true.norm()).powi(2);
            // single-sample batch: per-step RMSE is |e| per axis
            for a in 0..3 {
                dd += e[a].abs() / sigma[a];
            }
        }
        dd /= 6.0;
        h /= 2.0;
        // σ of the two physics accelerations per axis
        let mut sigma_f = [0.0; 3];
        for a in 0..3 {
            let mean = (accels[0][a] + accels[1][a]) / 2.0;
            let var = ((accels[0][a] * accels[0][a] + accels[1][a] * accels[1][a]) / 2.0
                - mean * mean)
                .max(0.0);
            sigma_f[a] = var.sqrt().max(1e-12);
        }
        // residuals recomputed sequentially
        let mut w_hat = w0;
        let mut wrw_hat = wrw0;
        for s in 0..2 {
            let f_hat = plant.accel(&w_hat, &wrw_hat, &u);
            let r = preds[s] / dt - f_hat;
            for a in 0..3 {
                rr += r[a].abs() / sigma_f[a];
            }
            w_hat += preds[s];
            wrw_hat += dt * irw_inv_u - preds[s];
        }
        rr /= 6.0;

        assert_relative_eq!(eval.values.dd, dd, epsilon = 1e-12);
        assert_relative_eq!(eval.values.omega_dot, rr, epsilon = 1e-12);
        assert_relative_eq!(eval.values.h, h, epsilon = 1e-15);
    }

    #[test]
    fn rollout_gradient_matches_finite_differences() {
        // toy net, S = 3, β strictly inside (0, 1) so every term contributes
        let split = tiny_split(17);
        let horizon = 3;
        let config = MlpConfig {
            input_dim: MODEL_INPUT_DIM,
            hidden_layers: 2,
            hidden_units: 4,
            horizon,
        };
        let model = MlpModel::init(
            config,
            ModelNormalization::from_dataset(&split.normalization),
            5,
        )
        .unwrap();
        let starts = eligible_starts(&split, &split.train, horizon);
        let batch = RolloutBatch::from_split(&split, &starts[..6], horizon).unwrap();
        let loss_config = LossConfig {
            target_eps: 0.0,
            ..LossConfig::lagrangian_dual(0.0)
        };
        let beta = 0.37;

        let mut grads = GradientBuffer::zeros_like(&model);
        let mut caches = Vec::new();
        let values =
            rollout_losses_grad(&model, &batch, &loss_config, beta, &mut grads, &mut caches)
                .unwrap();
        assert!(values.is_finite());
        let analytic = flat_gradient(&grads);

        let loss_of = |m: &MlpModel| -> f64 {
            let v = rollout_losses(m, &batch, loss_config.dt).unwrap();
            loss_total(v.dd, v.pi(loss_config.momentum_weight), beta)
        };
        let flat = model.flatten_params();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // spot-check a deterministic subset of parameters (all layers hit)
        let n = flat.len();
        let mut picks: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.35)).collect();
        picks.extend_from_slice(&[0, n / 2, n - 1]);
        for &p in &picks {
            let mut m_plus = model.clone();
            let mut m_minus = model.clone();
            let mut fp = flat.clone();
            fp[p] += h;
            m_plus.set_params_from_flat(&fp).unwrap();
            fp[p] -= 2.0 * h;
            m_minus.set_params_from_flat(&fp).unwrap();
            let fd = (loss_of(&m_plus) - loss_of(&m_minus)) / (2.0 * h);
            let denom = fd.abs().max(analytic[p].abs()).max(1e-7);
            worst = worst.max((fd - analytic[p]).abs() / denom);
        }
        assert!(worst < 1e-4, "max relative rollout-gradient error {worst:.3e}");
    }

    #[test]
    fn dd_mode_is_bitwise_independent_of_physics_path() {
        let split = tiny_split(23);
        let config = MlpConfig {
            input_dim: MODEL_INPUT_DIM,
            hidden_layers: 2,
            hidden_units: 8,
            horizon: 4,
        };
        let model = MlpModel::init(
            config,
            ModelNormalization::from_dataset(&split.normalization),
            7,
        )
        .unwrap();
        let tc = TrainConfig {
            batch_size: 512,
            epochs: 3,
            track_physics: true,
            ..TrainConfig::nominal(11)
        };
        let tc_no_physics = TrainConfig {
            track_physics: false,
            ..tc
        };
        let lc = LossConfig::data_driven();
        let a = train(model.clone(), &split, &tc, &lc).unwrap();
        let b = train(model, &split, &tc_no_physics, &lc).unwrap();
        assert_eq!(a.model.flatten_params(), b.model.flatten_params());
        for (ha, hb) in a.history.iter().zip(b.history.iter()) {
            assert_eq!(ha.train_dd.to_bits(), hb.train_dd.to_bits());
            assert_eq!(ha.val_dd.to_bits(), hb.val_dd.to_bits());
            assert_eq!(ha.beta, 0.0);
        }
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let split = tiny_split(29);
        let config = MlpConfig {
            input_dim: MODEL_INPUT_DIM,
            hidden_layers: 2,
            hidden_units: 8,
            horizon: 4,
        };
        let model = MlpModel::init(
            config,
            ModelNormalization::from_dataset(&split.normalization),
            3,
        )
        .unwrap();
        let tc = TrainConfig {
            batch_size: 1024,
            epochs: 8,
            ..TrainConfig::nominal(31)
        };
        let lc = LossConfig::data_driven();
        let a = train(model.clone(), &split, &tc, &lc).unwrap();
        let b = train(model, &split, &tc, &lc).unwrap();
        assert_eq!(a.model.flatten_params(), b.model.flatten_params());
        assert_eq!(a.history.len(), b.history.len());
        let first = a.history.first().unwrap().val_dd;
        let best = a.history.iter().map(|h| h.val_dd).fold(f64::INFINITY, f64::min);
        assert!(best < first, "no improvement: {first} → {best}");
    }

    #[test]
    fn ld_mode_moves_beta() {
        let split = tiny_split(37);
        let config = MlpConfig {
            input_dim: MODEL_INPUT_DIM,
            hidden_layers: 2,
            hidden_units: 8,
            horizon: 4,
        };
        let model = MlpModel::init(
            config,
            ModelNormalization::from_dataset(&split.normalization),
            3,
        )
        .unwrap();
        let tc = TrainConfig {
            batch_size: 1024,
            epochs: 5,
            ..TrainConfig::nominal(41)
        };
        let lc = LossConfig::lagrangian_dual(0.0); // unreachable target ⇒ β must grow
        let out = train(model, &split, &tc, &lc).unwrap();
        assert!(out.final_beta > 0.0);
        assert!(out.history.iter().all(|h| (0.0..1.0).contains(&h.beta)));
    }
}
