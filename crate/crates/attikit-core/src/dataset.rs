//! Excitation campaigns and the supervised transition dataset.
//!
//! A campaign runs many independent closed-loop simulations under a
//! quaternion-feedback excitation law, samples each trajectory at the control
//! period, and turns interior steps into supervised pairs: the 12 state and
//! command values (plus the run's 9 inertia values) map to the next change in
//! body rate, `y = ω_{t+1} - ω_t`. The angular acceleration entering the
//! input is the first-order backward difference of the stored trajectory.

use crate::dynamics::{rk4_step, BodyState, DisturbanceConfig, SpacecraftParams};
use crate::quat::Quaternion;
use crate::{CoreError, Result};
use alloc::vec::Vec;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INPUT_DIM: usize = 12;
pub const CONTEXT_DIM: usize = 9;
pub const MODEL_INPUT_DIM: usize = INPUT_DIM + CONTEXT_DIM;
pub const TARGET_DIM: usize = 3;

/// Configuration of one data-generation campaign.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CampaignConfig {
    /// Simulations with the stock spacecraft parameters.
    pub n_simulations: usize,
    /// Extra simulations with randomly varied inertia and mass.
    pub n_perturbed: usize,
    /// Length of each simulation, s.
    pub duration: f64,
    /// Control and sampling period, s.
    pub control_period: f64,
    /// Integrator step, s.
    pub integration_dt: f64,
    /// Initial wheel speeds are uniform in ±this, rpm.
    pub rw_init_rpm: f64,
    /// Relative half-range of the per-axis inertia variation.
    pub inertia_variation: f64,
    /// Relative half-range of the mass variation.
    pub mass_variation: f64,
    /// Excitation feedback gains (wheel torque per unit quaternion vector
    /// part / body rate).
    pub kp: f64,
    pub kd: f64,
    pub disturbances: DisturbanceConfig,
    pub seed: u64,
}

impl CampaignConfig {
    pub fn nominal(seed: u64) -> Self {
        CampaignConfig {
            n_simulations: 300,
            n_perturbed: 50,
            duration: 180.0,
            control_period: 0.1,
            integration_dt: 0.001,
            rw_init_rpm: 300.0,
            inertia_variation: 0.10,
            mass_variation: 0.10,
            kp: 0.03,
            kd: 0.4,
            disturbances: DisturbanceConfig::leo_default(),
            seed,
        }
    }

    pub fn total_runs(&self) -> usize {
        self.n_simulations + self.n_perturbed
    }

    pub fn steps_per_period(&self) -> usize {
        (self.control_period / self.integration_dt + 0.5) as usize
    }

    pub fn control_steps(&self) -> usize {
        (self.duration / self.control_period + 0.5) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_runs() == 0 {
            return Err(CoreError::InvalidParams("campaign has no simulations"));
        }
        if !(self.duration > 0.0 && self.control_period > 0.0 && self.integration_dt > 0.0) {
            return Err(CoreError::InvalidParams("durations must be positive"));
        }
        let ratio = self.control_period / self.integration_dt;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return Err(CoreError::InvalidParams(
                "control_period must be an integer multiple of integration_dt",
            ));
        }
        if self.rw_init_rpm < 0.0 {
            return Err(CoreError::InvalidParams("rw_init_rpm must be ≥ 0"));
        }
        self.disturbances.validate()
    }
}

/// One excitation run sampled at the control period.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub sim_id: u32,
    pub control_dt: f64,
    /// `control_steps + 1` states.
    pub states: Vec<BodyState>,
    /// Commanded (clamped) wheel torque over each period.
    pub torques: Vec<Vector3<f64>>,
    pub params: SpacecraftParams,
}

/// Uniformly random unit quaternion (subgroup-algorithm construction),
/// canonicalized.
pub fn random_attitude<R: Rng>(rng: &mut R) -> Quaternion {
    let u1: f64 = rng.gen_range(0.0..1.0);
    let u2: f64 = rng.gen_range(0.0..core::f64::consts::TAU);
    let u3: f64 = rng.gen_range(0.0..core::f64::consts::TAU);
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    Quaternion::new(a * u2.sin(), a * u2.cos(), b * u3.sin(), b * u3.cos())
        .normalized()
        .canonicalized()
}

/// Runs one excitation simulation of the campaign. Runs are independent and
/// deterministic: each draws from its own RNG stream keyed by `sim_index`.
///
/// Runs with index `>= n_simulations` use parameter-perturbed spacecraft.
pub fn run_excitation_sim(config: &CampaignConfig, sim_index: usize) -> Result<Trajectory> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1 + sim_index as u64);

    let nominal = SpacecraftParams::nominal();
    let params = if sim_index >= config.n_simulations {
        let scales = [
            1.0 + config.inertia_variation * rng.gen_range(-1.0..=1.0),
            1.0 + config.inertia_variation * rng.gen_range(-1.0..=1.0),
            1.0 + config.inertia_variation * rng.gen_range(-1.0..=1.0),
        ];
        let mass_scale = 1.0 + config.mass_variation * rng.gen_range(-1.0..=1.0);
        nominal.perturbed(scales, mass_scale)?
    } else {
        nominal
    };

    let rw_init = config.rw_init_rpm * core::f64::consts::TAU / 60.0;
    let omega_rw0 = Vector3::new(
        rng.gen_range(-rw_init..=rw_init),
        rng.gen_range(-rw_init..=rw_init),
        rng.gen_range(-rw_init..=rw_init),
    );
    let mut state = BodyState {
        q: random_attitude(&mut rng),
        omega: Vector3::zeros(),
        omega_rw: omega_rw0,
        omega_dot: Vector3::zeros(),
    };

    let control_steps = config.control_steps();
    let substeps = config.steps_per_period();
    let mut states = Vec::with_capacity(control_steps + 1);
    let mut torques = Vec::with_capacity(control_steps);
    states.push(state);

    for step in 0..control_steps {
        let u = excitation_torque(&state, config.kp, config.kd, params.u_max);
        torques.push(u);
        let t0 = step as f64 * config.control_period;
        for sub in 0..substeps {
            state = rk4_step(
                &state,
                &u,
                config.integration_dt,
                t0 + sub as f64 * config.integration_dt,
                &config.disturbances,
                None,
                &params,
            )
            .map_err(|_| CoreError::Integration {
                step: sim_index, // report which run failed
            })?;
        }
        states.push(state);
    }

    Ok(Trajectory {
        sim_id: sim_index as u32,
        control_dt: config.control_period,
        states,
        torques,
        params,
    })
}

/// Quaternion-feedback excitation law: wheel torque `kp·q_vec + kd·ω`,
/// clamped per axis (the wheel reaction then applies `-u` to the body,
/// regulating toward the identity attitude).
pub fn excitation_torque(state: &BodyState, kp: f64, kd: f64, u_max: f64) -> Vector3<f64> {
    let q = state.q.canonicalized();
    let mut u = kp * q.vector_part() + kd * state.omega;
    for i in 0..3 {
        u[i] = u[i].clamp(-u_max, u_max);
    }
    u
}

/// One supervised pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionSample {
    pub sim_id: u32,
    pub step_id: u32,
    /// `{ω, ω_rw, u_rw, ω̇}` in SI units; `ω̇` is the backward difference
    /// `(ω_t - ω_{t-1}) / Δt`.
    pub x: [f64; INPUT_DIM],
    /// `Δω = ω_{t+1} - ω_t`.
    pub y: [f64; TARGET_DIM],
    /// Six unique body-inertia entries plus the wheel-inertia diagonal.
    pub inertia_ctx: [f64; CONTEXT_DIM],
}

impl TransitionSample {
    /// The 21-value regressor input: state/command block then inertia block.
    pub fn model_input(&self) -> [f64; MODEL_INPUT_DIM] {
        let mut v = [0.0; MODEL_INPUT_DIM];
        v[..INPUT_DIM].copy_from_slice(&self.x);
        v[INPUT_DIM..].copy_from_slice(&self.inertia_ctx);
        v
    }

    pub fn omega(&self) -> Vector3<f64> {
        Vector3::new(self.x[0], self.x[1], self.x[2])
    }

    pub fn omega_rw(&self) -> Vector3<f64> {
        Vector3::new(self.x[3], self.x[4], self.x[5])
    }

    pub fn torque(&self) -> Vector3<f64> {
        Vector3::new(self.x[6], self.x[7], self.x[8])
    }

    pub fn omega_dot(&self) -> Vector3<f64> {
        Vector3::new(self.x[9], self.x[10], self.x[11])
    }

    pub fn target(&self) -> Vector3<f64> {
        Vector3::new(self.y[0], self.y[1], self.y[2])
    }
}

/// Extracts one sample per interior control step `t ∈ [1, T-1]`. Step 0 has
/// no backward difference and the final state has no target, so a trajectory
/// with `T+1` states yields `T-1` samples.
pub fn extract_samples(traj: &Trajectory) -> Vec<TransitionSample> {
    assert!(traj.states.len() >= 3, "trajectory too short to extract");
    assert_eq!(traj.states.len(), traj.torques.len() + 1);
    let dt = traj.control_dt;
    let ctx = traj.params.inertia_context();
    let mut samples = Vec::with_capacity(traj.states.len() - 2);
    for t in 1..traj.states.len() - 1 {
        let w_prev = traj.states[t - 1].omega;
        let w = traj.states[t].omega;
        let w_next = traj.states[t + 1].omega;
        let wdot = (w - w_prev) / dt;
        let wrw = traj.states[t].omega_rw;
        let u = traj.torques[t];
        let dw = w_next - w;
        samples.push(TransitionSample {
            sim_id: traj.sim_id,
            step_id: t as u32,
            x: [
                w.x, w.y, w.z, wrw.x, wrw.y, wrw.z, u.x, u.y, u.z, wdot.x, wdot.y, wdot.z,
            ],
            y: [dw.x, dw.y, dw.z],
            inertia_ctx: ctx,
        });
    }
    samples
}

/// Per-feature input statistics and per-axis target scale, computed from the
/// training split only.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub input_mean: [f64; MODEL_INPUT_DIM],
    pub input_std: [f64; MODEL_INPUT_DIM],
    /// σ_Δω per axis.
    pub target_std: [f64; TARGET_DIM],
}

impl Normalization {
    pub fn is_finite(&self) -> bool {
        self.input_mean.iter().all(|v| v.is_finite())
            && self.input_std.iter().all(|v| v.is_finite() && *v > 0.0)
            && self.target_std.iter().all(|v| v.is_finite() && *v > 0.0)
    }
}

/// The full sample set with train/validation membership.
///
/// Samples are kept in `(sim_id, step_id)` order so that the sample at step
/// `t+1` of the same run is the next element — multi-step rollout targets are
/// reconstructed from consecutive rows.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub samples: Vec<TransitionSample>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub normalization: Normalization,
    pub ratio: f64,
    pub split_seed: u64,
}

impl DatasetSplit {
    /// Index ranges of each simulation in `samples`.
    pub fn sim_ranges(&self) -> Vec<(u32, core::ops::Range<usize>)> {
        let mut out = Vec::new();
        let mut start = 0usize;
        for i in 1..=self.samples.len() {
            if i == self.samples.len() || self.samples[i].sim_id != self.samples[start].sim_id {
                out.push((self.samples[start].sim_id, start..i));
                start = i;
            }
        }
        out
    }

    /// Z-scores a raw model input.
    pub fn normalize_input(&self, x: &[f64; MODEL_INPUT_DIM]) -> [f64; MODEL_INPUT_DIM] {
        let mut z = [0.0; MODEL_INPUT_DIM];
        for i in 0..MODEL_INPUT_DIM {
            z[i] = (x[i] - self.normalization.input_mean[i]) / self.normalization.input_std[i];
        }
        z
    }
}

/// Deterministic train/validation membership for `n` samples: a seeded
/// shuffle of `0..n` cut at `round(ratio·n)`.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    use rand::seq::SliceRandom;
    indices.shuffle(&mut rng);
    let n_train = (ratio * n as f64).round() as usize;
    let val = indices.split_off(n_train);
    (indices, val)
}

/// Shuffles samples into train/validation at `ratio` and computes the input
/// and target statistics from the training members only.
///
/// Samples are sorted into `(sim_id, step_id)` order first, so membership
/// depends only on the sample set, the ratio, and the seed.
pub fn build_split(
    mut samples: Vec<TransitionSample>,
    ratio: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if samples.len() < 100 {
        return Err(CoreError::Construction("need at least 100 samples to split"));
    }
    if !(0.0 < ratio && ratio < 1.0) {
        return Err(CoreError::Construction("split ratio must be in (0, 1)"));
    }
    samples.sort_by_key(|s| (s.sim_id, s.step_id));
    let (train, val) = split_indices(samples.len(), ratio, seed);

    let normalization = compute_normalization(&samples, &train)?;
    Ok(DatasetSplit {
        samples,
        train,
        val,
        normalization,
        ratio,
        split_seed: seed,
    })
}

fn compute_normalization(samples: &[TransitionSample], train: &[usize]) -> Result<Normalization> {
    let n = train.len() as f64;
    let mut mean = [0.0; MODEL_INPUT_DIM];
    for &i in train {
        let x = samples[i].model_input();
        for (m, v) in mean.iter_mut().zip(x.iter()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = [0.0; MODEL_INPUT_DIM];
    for &i in train {
        let x = samples[i].model_input();
        for j in 0..MODEL_INPUT_DIM {
            let d = x[j] - mean[j];
            var[j] += d * d;
        }
    }
    let mut std = [0.0; MODEL_INPUT_DIM];
    for j in 0..MODEL_INPUT_DIM {
        let s = (var[j] / n).sqrt();
        // A feature that never varies (e.g. inertia context in a campaign
        // without perturbed runs) is left unscaled.
        std[j] = if s > 1e-12 { s } else { 1.0 };
    }

    let mut tmean = [0.0; TARGET_DIM];
    for &i in train {
        for j in 0..TARGET_DIM {
            tmean[j] += samples[i].y[j];
        }
    }
    for m in tmean.iter_mut() {
        *m /= n;
    }
    let mut tvar = [0.0; TARGET_DIM];
    for &i in train {
        for j in 0..TARGET_DIM {
            let d = samples[i].y[j] - tmean[j];
            tvar[j] += d * d;
        }
    }
    let mut target_std = [0.0; TARGET_DIM];
    for j in 0..TARGET_DIM {
        target_std[j] = (tvar[j] / n).sqrt();
        if !(target_std[j] > 0.0) {
            return Err(CoreError::Construction(
                "degenerate campaign: target variance is zero",
            ));
        }
    }
    Ok(Normalization {
        input_mean: mean,
        input_std: std,
        target_std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::plant_angular_accel;
    use approx::assert_relative_eq;

    fn small_campaign(seed: u64) -> CampaignConfig {
        CampaignConfig {
            n_simulations: 2,
            n_perturbed: 1,
            duration: 6.0,
            control_period: 0.1,
            integration_dt: 0.001,
            ..CampaignConfig::nominal(seed)
        }
    }

    #[test]
    fn nominal_shapes() {
        let config = small_campaign(42);
        let traj = run_excitation_sim(&config, 0).unwrap();
        assert_eq!(traj.states.len(), 61);
        assert_eq!(traj.torques.len(), 60);
        let full = CampaignConfig::nominal(1);
        assert_eq!(full.control_steps(), 1800);
        assert_eq!(full.steps_per_period(), 100);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let config = small_campaign(7);
        let a = run_excitation_sim(&config, 1).unwrap();
        let b = run_excitation_sim(&config, 1).unwrap();
        assert_eq!(a.states.len(), b.states.len());
        for (sa, sb) in a.states.iter().zip(b.states.iter()) {
            assert_eq!(sa, sb);
        }
        for (ta, tb) in a.torques.iter().zip(b.torques.iter()) {
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn zero_gain_zero_disturbance_keeps_wheels_constant() {
        let mut config = small_campaign(3);
        config.kp = 0.0;
        config.kd = 0.0;
        config.disturbances = DisturbanceConfig::disabled();
        let traj = run_excitation_sim(&config, 0).unwrap();
        let w0 = traj.states[0].omega_rw;
        for s in &traj.states {
            assert_relative_eq!(s.omega_rw, w0, epsilon = 1e-12);
        }
    }

    #[test]
    fn excitation_regulates_attitude() {
        let mut config = small_campaign(11);
        config.duration = 120.0;
        let traj = run_excitation_sim(&config, 0).unwrap();
        let first = crate::quat::attitude_error_deg(&traj.states[0].q);
        let last = crate::quat::attitude_error_deg(&traj.states.last().unwrap().q);
        assert!(last < first, "excitation did not regulate: {first}° → {last}°");
        assert!(last < 5.0, "final error too large: {last}°");
    }

    #[test]
    fn extract_counts_and_identities() {
        let config = small_campaign(5);
        let traj = run_excitation_sim(&config, 0).unwrap();
        let samples = extract_samples(&traj);
        assert_eq!(samples.len(), traj.states.len() - 2);
        let dt = traj.control_dt;
        for s in &samples {
            let t = s.step_id as usize;
            // construction identities against the stored trajectory
            let w = traj.states[t].omega;
            let bd = (w - traj.states[t - 1].omega) / dt;
            assert_relative_eq!(s.omega(), w, epsilon = 1e-15);
            for a in 0..3 {
                assert_relative_eq!(s.x[9 + a], bd[a], epsilon = 1e-15);
                assert_relative_eq!(s.y[a], traj.states[t + 1].omega[a] - w[a], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn constant_rate_trajectory_gives_zero_features() {
        let params = SpacecraftParams::nominal();
        let state = BodyState::at_rest(Quaternion::IDENTITY);
        let traj = Trajectory {
            sim_id: 0,
            control_dt: 0.1,
            states: alloc::vec![state; 5],
            torques: alloc::vec![Vector3::zeros(); 4],
            params,
        };
        for s in extract_samples(&traj) {
            assert_eq!(s.target(), Vector3::zeros());
            assert_eq!(s.omega_dot(), Vector3::zeros());
        }
    }

    #[test]
    fn backward_difference_tracks_analytic_accel() {
        // Backward differencing is first-order: the error against the
        // analytic acceleration shrinks roughly linearly with the period.
        let config = small_campaign(13);
        let run = |period: f64| {
            let mut c = config;
            c.control_period = period;
            c.duration = 4.0;
            let traj = run_excitation_sim(&c, 0).unwrap();
            let samples = extract_samples(&traj);
            let mut worst = 0.0_f64;
            for s in &samples {
                let u = s.torque();
                let analytic = plant_angular_accel(
                    &s.omega(),
                    &s.omega_rw(),
                    &u,
                    &Vector3::zeros(),
                    &traj.params,
                );
                worst = worst.max((s.omega_dot() - analytic).amax());
            }
            worst
        };
        let coarse = run(0.1);
        let fine = run(0.05);
        assert!(coarse < 2e-3, "backward difference far from analytic: {coarse}");
        let ratio = coarse / fine;
        assert!(
            (1.4..3.5).contains(&ratio),
            "not first-order: coarse {coarse:.3e}, fine {fine:.3e}"
        );
    }

    #[test]
    fn split_counts_and_determinism() {
        let config = small_campaign(19);
        let mut samples = Vec::new();
        for i in 0..config.total_runs() {
            samples.extend(extract_samples(&run_excitation_sim(&config, i).unwrap()));
        }
        let n = samples.len();
        let split = build_split(samples.clone(), 0.67, 99).unwrap();
        assert_eq!(split.train.len(), (0.67 * n as f64).round() as usize);
        assert_eq!(split.train.len() + split.val.len(), n);
        let again = build_split(samples, 0.67, 99).unwrap();
        assert_eq!(split.train, again.train);
        assert_eq!(split.val, again.val);
        // disjoint membership
        let mut all: Vec<usize> = split.train.iter().chain(split.val.iter()).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
    }

    #[test]
    fn split_ratio_arithmetic() {
        let (train, val) = split_indices(1000, 0.67, 1);
        assert_eq!(train.len(), 670);
        assert_eq!(val.len(), 330);
    }

    #[test]
    fn normalization_zscores_train_inputs() {
        let config = small_campaign(23);
        let mut samples = Vec::new();
        for i in 0..config.total_runs() {
            samples.extend(extract_samples(&run_excitation_sim(&config, i).unwrap()));
        }
        let split = build_split(samples, 0.67, 4).unwrap();
        let n = split.train.len() as f64;
        let mut mean = [0.0; MODEL_INPUT_DIM];
        let mut var = [0.0; MODEL_INPUT_DIM];
        for &i in &split.train {
            let z = split.normalize_input(&split.samples[i].model_input());
            for j in 0..MODEL_INPUT_DIM {
                mean[j] += z[j];
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        for &i in &split.train {
            let z = split.normalize_input(&split.samples[i].model_input());
            for j in 0..MODEL_INPUT_DIM {
                let d = z[j] - mean[j];
                var[j] += d * d;
            }
        }
        for j in 0..MODEL_INPUT_DIM {
            let std = (var[j] / n).sqrt();
            assert!(mean[j].abs() < 1e-10, "feature {j} mean {}", mean[j]);
            if split.normalization.input_std[j] != 1.0 {
                assert!((std - 1.0).abs() < 1e-10, "feature {j} std {std}");
            } else {
                // constant feature (unperturbed wheel inertia): centered only
                assert!(std.abs() < 1e-10, "constant feature {j} std {std}");
            }
        }
    }

    #[test]
    fn perturbed_runs_carry_different_context() {
        let config = small_campaign(29);
        let nominal_ctx = SpacecraftParams::nominal().inertia_context();
        let nominal_run = run_excitation_sim(&config, 0).unwrap();
        assert_eq!(nominal_run.params.inertia_context(), nominal_ctx);
        let perturbed_run = run_excitation_sim(&config, config.n_simulations).unwrap();
        assert_ne!(perturbed_run.params.inertia_context(), nominal_ctx);
    }

    #[test]
    fn split_rejects_tiny_sets() {
        let config = small_campaign(31);
        let traj = run_excitation_sim(&config, 0).unwrap();
        let samples: Vec<_> = extract_samples(&traj).into_iter().take(50).collect();
        assert!(build_split(samples, 0.67, 1).is_err());
    }
}
