//! Regressor metrics, Monte-Carlo closed-loop campaigns, and their
//! summaries.
//!
//! The Monte-Carlo protocol: each run draws an initial attitude error
//! uniformly in the configured angle range about a random axis, perturbs the
//! *plant's* inertia and mass once (the controller keeps its nominal
//! estimate), corrupts only the controller's observed state with per-step
//! Gaussian noise, and enables wheel friction. The plant always integrates
//! the uncorrupted truth; settling and steady-state metrics are computed on
//! the truth.

use crate::control::{
    build_linear_model, Controller, ControllerMode, DynamicsOracle, HybridConfig, LinearMpc,
    MpcProblem,
};
use crate::dataset::DatasetSplit;
use crate::dynamics::{
    rk4_step, BodyState, DisturbanceConfig, FrictionConfig, FrictionModel, SpacecraftParams,
};
use crate::mlp::{ForwardCache, MlpModel};
use crate::quat::{attitude_error_deg, Quaternion};
use crate::stats::quartiles;
use crate::training::{eligible_starts, sequence_losses, RolloutBatch};
use crate::{CoreError, Result};
use alloc::vec::Vec;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Mean relative error, percent: `100·mean(‖Δω̂ - Δω‖ / max(‖Δω‖, floor))`.
pub fn mre(pred: &[Vector3<f64>], target: &[Vector3<f64>]) -> f64 {
    debug_assert_eq!(pred.len(), target.len());
    const FLOOR: f64 = 1e-12;
    let mut sum = 0.0;
    for (p, t) in pred.iter().zip(target.iter()) {
        sum += (p - t).norm() / t.norm().max(FLOOR);
    }
    100.0 * sum / pred.len() as f64
}

/// Physics error of a prediction sequence: the physics-informed loss
/// (`L_ω̇ + p·L_h`), evaluated through the identical code path as training.
pub fn physics_error(
    preds: &[Vec<Vector3<f64>>],
    batch: &RolloutBatch,
    sigma_dw: &[f64; 3],
    dt: f64,
    momentum_weight: f64,
) -> f64 {
    sequence_losses(preds, batch, sigma_dw, dt).values.pi(momentum_weight)
}

/// Recursive self-loop predictions: the model's first output is fed back
/// into its own input (rates, accelerations, and wheel speeds advanced with
/// the torque held constant) for `batch.horizon` steps.
pub fn self_loop_predictions(
    model: &MlpModel,
    batch: &RolloutBatch,
) -> Result<Vec<Vec<Vector3<f64>>>> {
    let s_len = batch.horizon;
    let mut cache = ForwardCache::default();
    let mut preds = Vec::with_capacity(batch.len());
    for sample in &batch.samples {
        let mut x = sample.input;
        let mut seq = Vec::with_capacity(s_len);
        let u = sample.torque();
        let irw_inv_u = Vector3::new(
            u.x / sample.plant.inertia_rw.x,
            u.y / sample.plant.inertia_rw.y,
            u.z / sample.plant.inertia_rw.z,
        );
        for _ in 0..s_len {
            let dw = model.predict_first(&x, &mut cache)?;
            if !dw.iter().all(|v| v.is_finite()) {
                return Err(CoreError::ModelCorrupt("self-loop diverged"));
            }
            seq.push(dw);
            // feed the prediction back: ω, ω̇, ω_rw take their predicted values
            for a in 0..3 {
                x[a] += dw[a];
                x[3 + a] += 0.1 * irw_inv_u[a] - dw[a];
                x[9 + a] = dw[a] / 0.1;
            }
        }
        preds.push(seq);
    }
    Ok(preds)
}

/// Table-style regressor metrics on the validation split.
#[derive(Debug, Clone)]
pub struct RegressorMetrics {
    pub mre_single: f64,
    pub physics_single: f64,
    pub mre_self_loop: f64,
    pub physics_self_loop: f64,
    /// Per-simulation self-loop MRE (sim id, value) for paired tests.
    pub per_sim_self_loop_mre: Vec<(u32, f64)>,
}

/// Evaluates single-step and self-loop metrics on the validation members of
/// the split.
pub fn evaluate_regressor(
    model: &MlpModel,
    split: &DatasetSplit,
    momentum_weight: f64,
    dt: f64,
) -> Result<RegressorMetrics> {
    let horizon = model.config.horizon;
    let mut val = eligible_starts(split, &split.val, horizon);
    val.sort_unstable();
    if val.is_empty() {
        return Err(CoreError::Construction("no eligible validation starts"));
    }
    let batch = RolloutBatch::from_split(split, &val, horizon)?;
    let sigma = &model.normalization.target_std;

    // single-step: first预 predicted increment only, on a one-step batch
    let single_batch = RolloutBatch::from_split(split, &val, 1)?;
    let mut cache = ForwardCache::default();
    let mut single_preds: Vec<Vec<Vector3<f64>>> = Vec::with_capacity(val.len());
    for sample in &batch.samples {
        let dw = model.predict_first(&sample.input, &mut cache)?;
        single_preds.push(alloc::vec![dw]);
    }
    let single_pred_flat: Vec<Vector3<f64>> = single_preds.iter().map(|s| s[0]).collect();
    let single_target_flat: Vec<Vector3<f64>> =
        single_batch.samples.iter().map(|s| s.targets[0]).collect();
    let mre_single = mre(&single_pred_flat, &single_target_flat);
    let physics_single = physics_error(&single_preds, &single_batch, sigma, dt, momentum_weight);

    // self-loop over the full horizon
    let self_preds = self_loop_predictions(model, &batch)?;
    let mut flat_pred = Vec::new();
    let mut flat_target = Vec::new();
    for (seq, sample) in self_preds.iter().zip(batch.samples.iter()) {
        for s in 0..horizon {
            flat_pred.push(seq[s]);
            flat_target.push(sample.targets[s]);
        }
    }
    let mre_self_loop = mre(&flat_pred, &flat_target);
    let physics_self_loop = physics_error(&self_preds, &batch, sigma, dt, momentum_weight);

    // per-simulation pairing for significance tests
    let mut per_sim: Vec<(u32, f64)> = Vec::new();
    let mut i = 0;
    while i < batch.samples.len() {
        let sim = split.samples[val[i]].sim_id;
        let mut pred = Vec::new();
        let mut target = Vec::new();
        let mut j = i;
        while j < batch.samples.len() && split.samples[val[j]].sim_id == sim {
            for s in 0..horizon {
                pred.push(self_preds[j][s]);
                target.push(batch.samples[j].targets[s]);
            }
            j += 1;
        }
        per_sim.push((sim, mre(&pred, &target)));
        i = j;
    }

    Ok(RegressorMetrics {
        mre_single,
        physics_single,
        mre_self_loop,
        physics_self_loop,
        per_sim_self_loop_mre: per_sim,
    })
}

// ---------------------------------------------------------------------------
// Monte-Carlo closed-loop campaigns
// ---------------------------------------------------------------------------

/// Noise, uncertainty, and protocol settings of one campaign.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    /// Per-step Gaussian σ as a fraction of each observed value.
    pub state_noise_frac: f64,
    /// Uniform half-range of the plant inertia perturbation (per axis).
    pub inertia_err_frac: f64,
    /// Uniform half-range of the plant mass perturbation.
    pub mass_err_frac: f64,
    pub friction: Option<FrictionConfig>,
    /// Initial attitude error range, radians.
    pub init_error_lo: f64,
    pub init_error_hi: f64,
    pub n_runs: usize,
    /// Maneuver length, s.
    pub duration: f64,
    pub control_period: f64,
    pub integration_dt: f64,
    pub seed: u64,
}

impl NoiseConfig {
    /// Full noise/uncertainty/friction protocol at desk scale.
    pub fn full(seed: u64, n_runs: usize) -> Self {
        NoiseConfig {
            state_noise_frac: 0.03,
            inertia_err_frac: 0.10,
            mass_err_frac: 0.20,
            friction: Some(FrictionConfig::nominal()),
            init_error_lo: core::f64::consts::FRAC_PI_8,
            init_error_hi: core::f64::consts::FRAC_PI_2,
            n_runs,
            duration: 360.0,
            control_period: 0.1,
            integration_dt: 0.001,
            seed,
        }
    }

    /// Same protocol with every disturbance of the observation removed.
    pub fn noise_free(seed: u64, n_runs: usize) -> Self {
        NoiseConfig {
            state_noise_frac: 0.0,
            inertia_err_frac: 0.0,
            mass_err_frac: 0.0,
            friction: None,
            ..NoiseConfig::full(seed, n_runs)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_noise_frac < 0.0 || self.inertia_err_frac < 0.0 || self.mass_err_frac < 0.0
        {
            return Err(CoreError::InvalidParams("noise fractions must be ≥ 0"));
        }
        if !(self.init_error_hi > self.init_error_lo && self.init_error_lo >= 0.0) {
            return Err(CoreError::InvalidParams("degenerate initial error range"));
        }
        if self.n_runs == 0 {
            return Err(CoreError::InvalidParams("campaign needs at least one run"));
        }
        Ok(())
    }
}

/// Which controller a campaign exercises.
#[derive(Clone, Copy)]
pub enum ControllerSpec<'a> {
    /// Nonlinear MPC with the learned dynamics for the whole maneuver.
    LearnedNmpc(&'a MlpModel),
    /// Learned nonlinear stage with linear hand-over (the hybrid scheme).
    HybridLearned(&'a MlpModel),
    /// Nonlinear MPC with the analytic model.
    AnalyticNmpc,
    /// Linear MPC for the whole maneuver.
    Linear,
}

impl<'a> ControllerSpec<'a> {
    pub fn tag(&self) -> &'static str {
        match self {
            ControllerSpec::LearnedNmpc(_) => "mlp-ld",
            ControllerSpec::HybridLearned(_) => "mlp-ld+linear",
            ControllerSpec::AnalyticNmpc => "nonlinear",
            ControllerSpec::Linear => "linear",
        }
    }

    fn build(&self, nominal: &'a SpacecraftParams) -> Controller<'a> {
        let target = Quaternion::IDENTITY;
        let linear_mpc = || LinearMpc::new(build_linear_model(nominal, 0.1), 10, 0.1, 0.1, 0.05);
        match self {
            ControllerSpec::LearnedNmpc(model) => Controller::nonlinear(
                MpcProblem::nominal(DynamicsOracle::learned(model, nominal)),
                target,
            ),
            ControllerSpec::HybridLearned(model) => Controller::hybrid(
                MpcProblem::nominal(DynamicsOracle::learned(model, nominal)),
                linear_mpc(),
                HybridConfig::nominal(),
                target,
            ),
            ControllerSpec::AnalyticNmpc => Controller::nonlinear(
                MpcProblem::nominal(DynamicsOracle::analytic(nominal)),
                target,
            ),
            ControllerSpec::Linear => Controller::linear(linear_mpc(), target),
        }
    }
}

/// One row of a closed-loop trace, sampled at the control period.
#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub t: f64,
    pub mode: ControllerMode,
    pub error_deg: f64,
    pub omega: Vector3<f64>,
    pub omega_rw: Vector3<f64>,
    pub u: Vector3<f64>,
    pub solver_iterations: usize,
    pub cost: f64,
}

/// Outcome of one Monte-Carlo run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub run_id: usize,
    /// First time the error drops below 1° and stays there; ∞ if never.
    pub settling_time: f64,
    /// Mean error over the final minute, degrees.
    pub steady_state_error_deg: f64,
    pub rms_torque: f64,
    pub mode_switches: usize,
    pub failed: bool,
    pub trace: Vec<TraceRow>,
}

const SETTLE_THRESHOLD_DEG: f64 = 1.0;
const STEADY_STATE_WINDOW: f64 = 60.0;

/// Runs one Monte-Carlo maneuver. Deterministic in `(config.seed, run_id)`.
pub fn run_mc_single(
    spec: &ControllerSpec<'_>,
    config: &NoiseConfig,
    run_id: usize,
) -> Result<RunResult> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0x6d63_0000 + run_id as u64);

    let nominal = SpacecraftParams::nominal();
    // plant truth: parameters perturbed once per run
    let plant_params = if config.inertia_err_frac > 0.0 || config.mass_err_frac > 0.0 {
        let scales = [
            1.0 + config.inertia_err_frac * rng.gen_range(-1.0..=1.0),
            1.0 + config.inertia_err_frac * rng.gen_range(-1.0..=1.0),
            1.0 + config.inertia_err_frac * rng.gen_range(-1.0..=1.0),
        ];
        let mass_scale = 1.0 + config.mass_err_frac * rng.gen_range(-1.0..=1.0);
        nominal.perturbed(scales, mass_scale)?
    } else {
        nominal
    };
    let friction = config
        .friction
        .map(|f| FrictionModel::sample(f, plant_params.omega_rw_max, &mut rng));

    // rest-to-rest: error angle uniform in the configured range, random axis
    let axis = loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        if v.norm() > 1e-6 {
            break v;
        }
    };
    let angle = rng.gen_range(config.init_error_lo..=config.init_error_hi);
    let mut truth = BodyState::at_rest(Quaternion::from_axis_angle(axis, angle));

    let mut controller = spec.build(&nominal);
    let disturbances = DisturbanceConfig::leo_default();
    let steps = (config.duration / config.control_period + 0.5) as usize;
    let substeps = (config.control_period / config.integration_dt + 0.5) as usize;

    let mut trace = Vec::with_capacity(steps);
    let mut failed = false;
    let mut mode_switches = 0;
    let mut last_mode: Option<ControllerMode> = None;
    let mut torque_sq_sum = 0.0;

    'run: for step in 0..steps {
        let observed = observe(&truth, config.state_noise_frac, &mut rng);
        let out = controller.step(&observed);
        if out.degraded && !out.cost.is_finite() {
            failed = true;
        }
        if let Some(m) = last_mode {
            if m != out.mode {
                mode_switches += 1;
            }
        }
        last_mode = Some(out.mode);
        torque_sq_sum += out.u_rw.norm_squared();
        trace.push(TraceRow {
            t: step as f64 * config.control_period,
            mode: out.mode,
            error_deg: attitude_error_deg(&truth.q),
            omega: truth.omega,
            omega_rw: truth.omega_rw,
            u: out.u_rw,
            solver_iterations: out.solver_iterations,
            cost: out.cost,
        });

        let t0 = step as f64 * config.control_period;
        for sub in 0..substeps {
            match rk4_step(
                &truth,
                &out.u_rw,
                config.integration_dt,
                t0 + sub as f64 * config.integration_dt,
                &disturbances,
                friction.as_ref(),
                &plant_params,
            ) {
                Ok(s) => truth = s,
                Err(_) => {
                    failed = true;
                    break 'run;
                }
            }
        }
    }

    // metrics from the truth trace
    let errors: Vec<f64> = trace.iter().map(|r| r.error_deg).collect();
    let settling_time = settling_time_from_errors(&errors, config.control_period, failed);
    let window_start = config.duration - STEADY_STATE_WINDOW;
    let tail: Vec<f64> = trace
        .iter()
        .filter(|r| r.t >= window_start)
        .map(|r| r.error_deg)
        .collect();
    let steady_state_error_deg = if tail.is_empty() || failed {
        f64::INFINITY
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    };
    let rms_torque = (torque_sq_sum / trace.len().max(1) as f64).sqrt();

    Ok(RunResult {
        run_id,
        settling_time,
        steady_state_error_deg,
        rms_torque,
        mode_switches,
        failed,
        trace,
    })
}

/// First time the error drops below the threshold for good.
fn settling_time_from_errors(errors: &[f64], dt: f64, failed: bool) -> f64 {
    if failed || errors.is_empty() {
        return f64::INFINITY;
    }
    let mut settle_idx = None;
    for (i, &e) in errors.iter().enumerate() {
        if e < SETTLE_THRESHOLD_DEG {
            if settle_idx.is_none() {
                settle_idx = Some(i);
            }
        } else {
            settle_idx = None;
        }
    }
    match settle_idx {
        Some(i) => i as f64 * dt,
        None => f64::INFINITY,
    }
}

/// The controller's observation: truth with per-component multiplicative
/// Gaussian noise; the quaternion is renormalized and canonicalized.
fn observe(truth: &BodyState, noise_frac: f64, rng: &mut ChaCha8Rng) -> BodyState {
    if noise_frac == 0.0 {
        return *truth;
    }
    let mut noisy = |v: f64| -> f64 {
        let xi: f64 = rng.sample(StandardNormal);
        v * (1.0 + noise_frac * xi)
    };
    let q = Quaternion::new(
        noisy(truth.q.q0),
        noisy(truth.q.q1),
        noisy(truth.q.q2),
        noisy(truth.q.q3),
    )
    .normalized()
    .canonicalized();
    let v3 = |v: &Vector3<f64>, rng: &mut ChaCha8Rng| {
        Vector3::new(
            v.x * (1.0 + noise_frac * rng.sample::<f64, _>(StandardNormal)),
            v.y * (1.0 + noise_frac * rng.sample::<f64, _>(StandardNormal)),
            v.z * (1.0 + noise_frac * rng.sample::<f64, _>(StandardNormal)),
        )
    };
    BodyState {
        q,
        omega: v3(&truth.omega, rng),
        omega_rw: v3(&truth.omega_rw, rng),
        omega_dot: v3(&truth.omega_dot, rng),
    }
}

/// Aggregate statistics of one campaign.
#[derive(Debug, Clone)]
pub struct CampaignSummary {
    pub n_runs: usize,
    pub n_failed: usize,
    pub n_unsettled: usize,
    /// (q1, median, q3) of settling time over settled runs, s.
    pub settling_quartiles: (f64, f64, f64),
    /// (q1, median, q3) of steady-state error, degrees.
    pub steady_state_quartiles: (f64, f64, f64),
    pub median_rms_torque: f64,
    /// Set when ≥ 10% of runs never settle: the settling median is then not
    /// representative and the campaign counts as failed.
    pub campaign_failed: bool,
}

/// Deterministic reduction of run results, ordered by run index.
pub fn summarize_campaign(results: &[RunResult]) -> CampaignSummary {
    let n_runs = results.len();
    let n_failed = results.iter().filter(|r| r.failed).count();
    let settled: Vec<f64> = results
        .iter()
        .filter(|r| r.settling_time.is_finite())
        .map(|r| r.settling_time)
        .collect();
    let n_unsettled = n_runs - settled.len();
    let sse: Vec<f64> = results
        .iter()
        .filter(|r| r.steady_state_error_deg.is_finite())
        .map(|r| r.steady_state_error_deg)
        .collect();
    let rms: Vec<f64> = results.iter().map(|r| r.rms_torque).collect();
    let campaign_failed = n_unsettled * 10 >= n_runs.max(1) && n_unsettled > 0;
    CampaignSummary {
        n_runs,
        n_failed,
        n_unsettled,
        settling_quartiles: quartiles(&settled),
        steady_state_quartiles: quartiles(&sse),
        median_rms_torque: crate::stats::median(&rms),
        campaign_failed,
    }
}
