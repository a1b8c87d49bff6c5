//! Command configuration files: flat-key TOML, one file per command, with
//! CLI flags overriding file keys. Unknown keys are rejected and missing
//! required keys are reported by name.

use attikit_core::dataset::CampaignConfig;
use attikit_core::dynamics::{DisturbanceConfig, FrictionConfig};
use attikit_core::eval::NoiseConfig;
use attikit_core::mlp::MlpConfig;
use attikit_core::training::{LossConfig, LossMode, TrainConfig};
use serde::Deserialize;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Invalid { path: String, message: String },
    #[error("missing required key `{key}` (set it in the config file or pass {flag})")]
    MissingKey { key: &'static str, flag: &'static str },
    #[error("invalid value for `{key}`: {message}")]
    BadValue { key: &'static str, message: String },
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.display().to_string(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| ConfigError::Invalid {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

fn d_n_simulations() -> usize {
    300
}
fn d_n_perturbed() -> usize {
    50
}
fn d_duration() -> f64 {
    180.0
}
fn d_control_period() -> f64 {
    0.1
}
fn d_integration_dt() -> f64 {
    0.001
}
fn d_rw_init_rpm() -> f64 {
    300.0
}
fn d_variation() -> f64 {
    0.10
}
fn d_kp() -> f64 {
    0.03
}
fn d_kd() -> f64 {
    0.4
}
fn d_split_ratio() -> f64 {
    0.67
}
fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub seed: Option<u64>,
    #[serde(default = "d_n_simulations")]
    pub n_simulations: usize,
    #[serde(default = "d_n_perturbed")]
    pub n_perturbed: usize,
    #[serde(default = "d_duration")]
    pub duration: f64,
    #[serde(default = "d_control_period")]
    pub control_period: f64,
    #[serde(default = "d_integration_dt")]
    pub integration_dt: f64,
    #[serde(default = "d_rw_init_rpm")]
    pub rw_init_rpm: f64,
    #[serde(default = "d_variation")]
    pub inertia_variation: f64,
    #[serde(default = "d_variation")]
    pub mass_variation: f64,
    #[serde(default = "d_kp")]
    pub kp: f64,
    #[serde(default = "d_kd")]
    pub kd: f64,
    #[serde(default = "d_true")]
    pub disturbances_enabled: bool,
    #[serde(default = "d_split_ratio")]
    pub split_ratio: f64,
}

impl GenDataConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        read_toml(path)
    }

    pub fn resolve(&self, seed_flag: Option<u64>) -> Result<(CampaignConfig, f64), ConfigError> {
        let seed = seed_flag
            .or(self.seed)
            .ok_or(ConfigError::MissingKey {
                key: "seed",
                flag: "--seed",
            })?;
        if !(0.0 < self.split_ratio && self.split_ratio < 1.0) {
            return Err(ConfigError::BadValue {
                key: "split_ratio",
                message: format!("{} is not in (0, 1)", self.split_ratio),
            });
        }
        let disturbances = if self.disturbances_enabled {
            DisturbanceConfig::leo_default()
        } else {
            DisturbanceConfig::disabled()
        };
        Ok((
            CampaignConfig {
                n_simulations: self.n_simulations,
                n_perturbed: self.n_perturbed,
                duration: self.duration,
                control_period: self.control_period,
                integration_dt: self.integration_dt,
                rw_init_rpm: self.rw_init_rpm,
                inertia_variation: self.inertia_variation,
                mass_variation: self.mass_variation,
                kp: self.kp,
                kd: self.kd,
                disturbances,
                seed,
            },
            self.split_ratio,
        ))
    }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn d_batch_size() -> usize {
    16384
}
fn d_epochs() -> usize {
    500
}
fn d_learning_rate() -> f64 {
    1e-3
}
fn d_lr_patience() -> usize {
    20
}
fn d_early_stop() -> usize {
    50
}
fn d_hidden_layers() -> usize {
    4
}
fn d_hidden_units() -> usize {
    16
}
fn d_horizon() -> usize {
    10
}
fn d_momentum_weight() -> f64 {
    1e-2
}
fn d_dual_step() -> f64 {
    1e-2
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFileConfig {
    pub seed: Option<u64>,
    /// `dd` or `ld`.
    pub mode: Option<String>,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "d_lr_patience")]
    pub lr_patience: usize,
    #[serde(default = "d_early_stop")]
    pub early_stop_patience: usize,
    #[serde(default = "d_hidden_layers")]
    pub hidden_layers: usize,
    #[serde(default = "d_hidden_units")]
    pub hidden_units: usize,
    #[serde(default = "d_horizon")]
    pub horizon: usize,
    #[serde(default = "d_momentum_weight")]
    pub momentum_weight: f64,
    #[serde(default = "d_dual_step")]
    pub dual_step: f64,
    #[serde(default)]
    pub beta_init: f64,
    /// Constraint level for the dual mode; when absent, a data-driven
    /// pre-pass estimates it as half its converged physics loss.
    pub target_eps: Option<f64>,
}

pub struct ResolvedTrain {
    pub seed: u64,
    pub mode: LossMode,
    pub mlp: MlpConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub target_eps: Option<f64>,
}

impl TrainFileConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        read_toml(path)
    }

    pub fn resolve(
        &self,
        mode_flag: Option<&str>,
        seed_flag: Option<u64>,
    ) -> Result<ResolvedTrain, ConfigError> {
        let seed = seed_flag.or(self.seed).ok_or(ConfigError::MissingKey {
            key: "seed",
            flag: "--seed",
        })?;
        let mode_str = mode_flag
            .map(str::to_owned)
            .or_else(|| self.mode.clone())
            .ok_or(ConfigError::MissingKey {
                key: "mode",
                flag: "--mode",
            })?;
        let mode = match mode_str.as_str() {
            "dd" => LossMode::DataDriven,
            "ld" => LossMode::LagrangianDual,
            other => {
                return Err(ConfigError::BadValue {
                    key: "mode",
                    message: format!("`{other}` is not one of dd, ld"),
                })
            }
        };
        let mlp = MlpConfig {
            input_dim: attikit_core::dataset::MODEL_INPUT_DIM,
            hidden_layers: self.hidden_layers,
            hidden_units: self.hidden_units,
            horizon: self.horizon,
        };
        let train = TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            lr_patience: self.lr_patience,
            early_stop_patience: self.early_stop_patience,
            seed,
            track_physics: true,
        };
        let loss = LossConfig {
            momentum_weight: self.momentum_weight,
            beta_init: self.beta_init,
            dual_step: self.dual_step,
            target_eps: self.target_eps.unwrap_or(0.0),
            dt: attikit_core::training::LOSS_DT,
            mode,
        };
        Ok(ResolvedTrain {
            seed,
            mode,
            mlp,
            train,
            loss,
            target_eps: self.target_eps,
        })
    }
}

// ---------------------------------------------------------------------------
// simulate / mc
// ---------------------------------------------------------------------------

fn d_state_noise() -> f64 {
    0.03
}
fn d_inertia_err() -> f64 {
    0.10
}
fn d_mass_err() -> f64 {
    0.20
}
fn d_friction_coeff() -> f64 {
    1e-5
}
fn d_friction_fraction() -> f64 {
    0.5
}
fn d_friction_jitter() -> f64 {
    0.125
}
fn d_init_lo_deg() -> f64 {
    22.5
}
fn d_init_hi_deg() -> f64 {
    90.0
}
fn d_mc_duration() -> f64 {
    360.0
}
fn d_n_runs() -> usize {
    30
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McFileConfig {
    pub seed: Option<u64>,
    /// mlp-ld | mlp-ld+linear | nonlinear | linear.
    pub controller: Option<String>,
    #[serde(default = "d_n_runs")]
    pub n_runs: usize,
    #[serde(default = "d_state_noise")]
    pub state_noise_frac: f64,
    #[serde(default = "d_inertia_err")]
    pub inertia_err_frac: f64,
    #[serde(default = "d_mass_err")]
    pub mass_err_frac: f64,
    #[serde(default = "d_true")]
    pub friction_enabled: bool,
    #[serde(default = "d_friction_coeff")]
    pub friction_viscous_coeff: f64,
    #[serde(default = "d_friction_fraction")]
    pub friction_activation_fraction: f64,
    #[serde(default = "d_friction_jitter")]
    pub friction_activation_jitter: f64,
    #[serde(default = "d_init_lo_deg")]
    pub init_error_lo_deg: f64,
    #[serde(default = "d_init_hi_deg")]
    pub init_error_hi_deg: f64,
    #[serde(default = "d_mc_duration")]
    pub duration: f64,
    #[serde(default = "d_control_period")]
    pub control_period: f64,
    #[serde(default = "d_integration_dt")]
    pub integration_dt: f64,
}

impl McFileConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        read_toml(path)
    }

    pub fn resolve(
        &self,
        controller_flag: Option<&str>,
        seed_flag: Option<u64>,
        runs_flag: Option<usize>,
    ) -> Result<(String, NoiseConfig), ConfigError> {
        let seed = seed_flag.or(self.seed).ok_or(ConfigError::MissingKey {
            key: "seed",
            flag: "--seed",
        })?;
        let controller = controller_flag
            .map(str::to_owned)
            .or_else(|| self.controller.clone())
            .ok_or(ConfigError::MissingKey {
                key: "controller",
                flag: "--controller",
            })?;
        let friction = if self.friction_enabled {
            Some(FrictionConfig {
                viscous_coeff: self.friction_viscous_coeff,
                activation_fraction: self.friction_activation_fraction,
                activation_jitter: self.friction_activation_jitter,
            })
        } else {
            None
        };
        let noise = NoiseConfig {
            state_noise_frac: self.state_noise_frac,
            inertia_err_frac: self.inertia_err_frac,
            mass_err_frac: self.mass_err_frac,
            friction,
            init_error_lo: self.init_error_lo_deg.to_radians(),
            init_error_hi: self.init_error_hi_deg.to_radians(),
            n_runs: runs_flag.unwrap_or(self.n_runs),
            duration: self.duration,
            control_period: self.control_period,
            integration_dt: self.integration_dt,
            seed,
        };
        Ok((controller, noise))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use tempfile::NamedTempFile;

    fn write_config(text: &str) -> NamedTempFile {
        let mut f = NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn gen_data_defaults_and_seed() {
        let f = write_config("seed = 42\n");
        let config = GenDataConfig::load(f.path()).unwrap();
        let (campaign, ratio) = config.resolve(None).unwrap();
        assert_eq!(campaign.seed, 42);
        assert_eq!(campaign.n_simulations, 300);
        assert_eq!(ratio, 0.67);
        // flag wins over file
        let (campaign, _) = config.resolve(Some(7)).unwrap();
        assert_eq!(campaign.seed, 7);
    }

    #[test]
    fn missing_seed_is_named() {
        let f = write_config("n_simulations = 5\n");
        let config = GenDataConfig::load(f.path()).unwrap();
        let err = config.resolve(None).unwrap_err();
        assert!(err.to_string().contains("`seed`"), "{err}");
    }

    #[test]
    fn unknown_key_is_named() {
        let f = write_config("seed = 1\nnot_a_key = 2\n");
        let err = GenDataConfig::load(f.path()).unwrap_err();
        assert!(err.to_string().contains("not_a_key"), "{err}");
    }

    #[test]
    fn train_mode_parsing() {
        let f = write_config("seed = 1\nmode = \"ld\"\nepochs = 10\n");
        let config = TrainFileConfig::load(f.path()).unwrap();
        let resolved = config.resolve(None, None).unwrap();
        assert_eq!(resolved.mode, LossMode::LagrangianDual);
        assert_eq!(resolved.train.epochs, 10);
        // flag beats the file
        let resolved = config.resolve(Some("dd"), None).unwrap();
        assert_eq!(resolved.mode, LossMode::DataDriven);
        let err = config.resolve(Some("bogus"), None).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn mc_resolution() {
        let f = write_config("seed = 5\ncontroller = \"linear\"\nn_runs = 4\n");
        let config = McFileConfig::load(f.path()).unwrap();
        let (controller, noise) = config.resolve(None, None, None).unwrap();
        assert_eq!(controller, "linear");
        assert_eq!(noise.n_runs, 4);
        assert!(noise.friction.is_some());
        assert!((noise.init_error_lo - 22.5f64.to_radians()).abs() < 1e-15);
        let (_, noise) = config.resolve(None, Some(9), Some(2)).unwrap();
        assert_eq!(noise.seed, 9);
        assert_eq!(noise.n_runs, 2);
    }
}
