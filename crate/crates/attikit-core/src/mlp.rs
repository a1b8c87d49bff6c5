//! Feed-forward regressor mapping the 21-value state/inertia input to an
//! `S`-step trajectory of body-rate increments, with exact reverse-mode
//! gradients for both training and gradient-based control.
//!
//! Hidden layers use `tanh` (the controller differentiates through the
//! model, so a smooth activation is required); the output layer is linear.
//! Inputs are z-scored and outputs de-normalized with statistics frozen from
//! the training split, so the public surface always works in physical units
//! (rad/s).

use crate::dataset::{Normalization, MODEL_INPUT_DIM, TARGET_DIM};
use crate::{CoreError, Result};
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Architecture of the regressor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpConfig {
    pub input_dim: usize,
    /// Number of tanh layers (the linear output layer is extra).
    pub hidden_layers: usize,
    pub hidden_units: usize,
    /// Steps predicted per forward pass; the output has `3·horizon` values.
    pub horizon: usize,
}

impl MlpConfig {
    /// The production configuration: 4×16 tanh layers, 10-step output.
    pub fn nominal() -> Self {
        MlpConfig {
            input_dim: MODEL_INPUT_DIM,
            hidden_layers: 4,
            hidden_units: 16,
            horizon: 10,
        }
    }

    pub fn output_dim(&self) -> usize {
        TARGET_DIM * self.horizon
    }

    /// Layer sizes from input to output.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 2);
        dims.push(self.input_dim);
        for _ in 0..self.hidden_layers {
            dims.push(self.hidden_units);
        }
        dims.push(self.output_dim());
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.horizon == 0 {
            return Err(CoreError::InvalidParams("mlp dims must be positive"));
        }
        if self.hidden_layers > 0 && self.hidden_units == 0 {
            return Err(CoreError::InvalidParams("hidden_units must be positive"));
        }
        Ok(())
    }
}

/// Input/output scaling frozen into a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelNormalization {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    /// σ_Δω per axis, tiled across the `S` output steps.
    pub target_std: [f64; TARGET_DIM],
}

impl ModelNormalization {
    pub fn identity(input_dim: usize) -> Self {
        ModelNormalization {
            input_mean: vec![0.0; input_dim],
            input_std: vec![1.0; input_dim],
            target_std: [1.0; TARGET_DIM],
        }
    }

    pub fn from_dataset(n: &Normalization) -> Self {
        ModelNormalization {
            input_mean: n.input_mean.to_vec(),
            input_std: n.input_std.to_vec(),
            target_std: n.target_std,
        }
    }
}

/// The regressor: per-layer row-major weights and biases, plus normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub config: MlpConfig,
    /// `weights[l][row * in_dim + col]`, shape `(out_dim, in_dim)`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub normalization: ModelNormalization,
}

/// Activations recorded by a forward pass, consumed by `backward`.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    /// `a[0]` is the z-scored input; `a[l+1]` the post-activation of layer l.
    activations: Vec<Vec<f64>>,
    /// Raw (normalized) output of the final linear layer.
    raw_output: Vec<f64>,
    valid: bool,
}

/// Per-parameter gradient accumulators, same shapes as the model.
#[derive(Debug, Clone)]
pub struct GradientBuffer {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl GradientBuffer {
    pub fn zeros_like(model: &MlpModel) -> Self {
        GradientBuffer {
            weights: model.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn reset(&mut self) {
        for w in self.weights.iter_mut() {
            w.iter_mut().for_each(|v| *v = 0.0);
        }
        for b in self.biases.iter_mut() {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in self.weights.iter_mut() {
            w.iter_mut().for_each(|v| *v *= s);
        }
        for b in self.biases.iter_mut() {
            b.iter_mut().for_each(|v| *v *= s);
        }
    }
}

impl MlpModel {
    /// Fan-scaled uniform weights (`U(-b, b)` with `b = √(6/(fan_in+fan_out))`),
    /// zero biases, deterministic in `seed`.
    pub fn init(config: MlpConfig, normalization: ModelNormalization, seed: u64) -> Result<Self> {
        config.validate()?;
        if normalization.input_mean.len() != config.input_dim
            || normalization.input_std.len() != config.input_dim
        {
            return Err(CoreError::InvalidParams(
                "normalization length does not match input_dim",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x6d6c70); // independent of campaign streams
        let dims = config.layer_dims();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut w = vec![0.0; fan_in * fan_out];
            for v in w.iter_mut() {
                *v = rng.gen_range(-bound..=bound);
            }
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(MlpModel {
            config,
            weights,
            biases,
            normalization,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.config.layer_dims();
        if self.weights.len() != dims.len() - 1 || self.biases.len() != dims.len() - 1 {
            return Err(CoreError::ModelCorrupt("layer count mismatch"));
        }
        for l in 0..self.weights.len() {
            if self.weights[l].len() != dims[l] * dims[l + 1]
                || self.biases[l].len() != dims[l + 1]
            {
                return Err(CoreError::ModelCorrupt("layer shape mismatch"));
            }
            if !self.weights[l].iter().all(|v| v.is_finite())
                || !self.biases[l].iter().all(|v| v.is_finite())
            {
                return Err(CoreError::ModelCorrupt("non-finite parameters"));
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Forward pass in physical units. Writes activations into `cache`.
    ///
    /// The returned slice (borrowed from `cache`) holds the de-normalized
    /// increments: step `s` is `output[3s..3s+3]` rad/s.
    pub fn forward_cached<'c>(&self, x: &[f64], cache: &'c mut ForwardCache) -> Result<&'c [f64]> {
        if x.len() != self.config.input_dim {
            return Err(CoreError::Usage("input length mismatch"));
        }
        let dims = self.config.layer_dims();
        let n_layers = self.weights.len();
        if cache.activations.len() != n_layers + 1 {
            cache.activations = dims.iter().map(|&d| vec![0.0; d]).collect();
            cache.raw_output = vec![0.0; self.config.output_dim()];
        }

        for i in 0..x.len() {
            cache.activations[0][i] =
                (x[i] - self.normalization.input_mean[i]) / self.normalization.input_std[i];
        }
        for l in 0..n_layers {
            let (inputs, rest) = cache.activations.split_at_mut(l + 1);
            let a_in = &inputs[l];
            let a_out = &mut rest[0];
            let w = &self.weights[l];
            let b = &self.biases[l];
            let in_dim = dims[l];
            let last = l + 1 == n_layers;
            for (row, out) in a_out.iter_mut().enumerate() {
                let mut acc = b[row];
                let wrow = &w[row * in_dim..(row + 1) * in_dim];
                for (wv, av) in wrow.iter().zip(a_in.iter()) {
                    acc += wv * av;
                }
                *out = if last { acc } else { acc.tanh() };
            }
        }
        let raw = cache.activations[n_layers].clone();
        for (k, r) in raw.iter().enumerate() {
            cache.raw_output[k] = r * self.normalization.target_std[k % TARGET_DIM];
            if !cache.raw_output[k].is_finite() {
                cache.valid = false;
                return Err(CoreError::ModelCorrupt("non-finite forward output"));
            }
        }
        // keep the raw (normalized) output in the last activation slot for
        // backward; raw_output carries the physical values
        cache.activations[n_layers] = raw;
        cache.valid = true;
        Ok(&cache.raw_output)
    }

    /// Convenience forward pass that allocates its own cache.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut cache = ForwardCache::default();
        self.forward_cached(x, &mut cache)?;
        Ok(cache.raw_output)
    }

    /// First predicted increment `Δω̂_{t+1}` (inference mode uses only the
    /// first 3 of the `3S` outputs).
    pub fn predict_first(&self, x: &[f64], cache: &mut ForwardCache) -> Result<Vector3<f64>> {
        let out = self.forward_cached(x, cache)?;
        Ok(Vector3::new(out[0], out[1], out[2]))
    }

    /// Reverse pass: accumulates `∂(upstream·output)/∂θ` into `grads` and
    /// returns the gradient with respect to the physical input.
    ///
    /// `upstream` is the loss gradient with respect to the *physical*
    /// (de-normalized) output.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        grads: &mut GradientBuffer,
    ) -> Result<Vec<f64>> {
        if !cache.valid {
            return Err(CoreError::Usage("backward called before forward"));
        }
        if upstream.len() != self.config.output_dim() {
            return Err(CoreError::Usage("upstream gradient length mismatch"));
        }
        let dims = self.config.layer_dims();
        let n_layers = self.weights.len();

        // de-normalization: d raw = upstream · σ_target
        let mut delta: Vec<f64> = upstream
            .iter()
            .enumerate()
            .map(|(k, g)| g * self.normalization.target_std[k % TARGET_DIM])
            .collect();

        for l in (0..n_layers).rev() {
            let in_dim = dims[l];
            let a_in = &cache.activations[l];
            if l != n_layers - 1 {
                // tanh'(z) expressed through the stored activation
                let a_out = &cache.activations[l + 1];
                for (d, a) in delta.iter_mut().zip(a_out.iter()) {
                    *d *= 1.0 - a * a;
                }
            }
            let dw = &mut grads.weights[l];
            let db = &mut grads.biases[l];
            for (row, d) in delta.iter().enumerate() {
                db[row] += d;
                let dwrow = &mut dw[row * in_dim..(row + 1) * in_dim];
                for (dv, av) in dwrow.iter_mut().zip(a_in.iter()) {
                    *dv += d * av;
                }
            }
            let w = &self.weights[l];
            let mut next = vec![0.0; in_dim];
            for (row, d) in delta.iter().enumerate() {
                let wrow = &w[row * in_dim..(row + 1) * in_dim];
                for (nv, wv) in next.iter_mut().zip(wrow.iter()) {
                    *nv += d * wv;
                }
            }
            delta = next;
        }

        // z-scoring: d x_physical = d x_normalized / σ_input
        for (i, d) in delta.iter_mut().enumerate() {
            *d /= self.normalization.input_std[i];
        }
        Ok(delta)
    }

    /// Flat view of all parameters (weights then biases, layer by layer).
    /// Used by the optimizer and the model file format.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in 0..self.weights.len() {
            out.extend_from_slice(&self.weights[l]);
            out.extend_from_slice(&self.biases[l]);
        }
        out
    }

    pub fn set_params_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(CoreError::ModelCorrupt("parameter count mismatch"));
        }
        let mut offset = 0;
        for l in 0..self.weights.len() {
            let wlen = self.weights[l].len();
            self.weights[l].copy_from_slice(&flat[offset..offset + wlen]);
            offset += wlen;
            let blen = self.biases[l].len();
            self.biases[l].copy_from_slice(&flat[offset..offset + blen]);
            offset += blen;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy_config() -> MlpConfig {
        MlpConfig {
            input_dim: 4,
            hidden_layers: 2,
            hidden_units: 3,
            horizon: 1,
        }
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let config = toy_config();
        let mut model =
            MlpModel::init(config, ModelNormalization::identity(config.input_dim), 1).unwrap();
        for w in model.weights.iter_mut() {
            w.iter_mut().for_each(|v| *v = 0.0);
        }
        let out = model.forward(&[0.3, -0.2, 1.0, 0.5]).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let config = MlpConfig::nominal();
        let model =
            MlpModel::init(config, ModelNormalization::identity(config.input_dim), 3).unwrap();
        let x: Vec<f64> = (0..config.input_dim).map(|i| (i as f64) * 0.1 - 1.0).collect();
        assert_eq!(model.forward(&x).unwrap(), model.forward(&x).unwrap());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let config = MlpConfig::nominal();
        let a = MlpModel::init(config, ModelNormalization::identity(config.input_dim), 9).unwrap();
        let b = MlpModel::init(config, ModelNormalization::identity(config.input_dim), 9).unwrap();
        assert_eq!(a.weights, b.weights);
        let dims = config.layer_dims();
        for (l, w) in a.weights.iter().enumerate() {
            let bound = (6.0 / (dims[l] + dims[l + 1]) as f64).sqrt();
            assert!(w.iter().all(|v| v.abs() <= bound));
        }
        assert!(a.biases.iter().all(|b| b.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn init_output_scale_is_order_one() {
        use rand::Rng;
        let config = MlpConfig::nominal();
        let model =
            MlpModel::init(config, ModelNormalization::identity(config.input_dim), 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut max_abs = 0.0_f64;
        for _ in 0..100 {
            let x: Vec<f64> = (0..config.input_dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let out = model.forward(&x).unwrap();
            for v in out {
                max_abs = max_abs.max(v.abs());
            }
        }
        assert!(max_abs > 1e-3 && max_abs < 10.0, "init scale {max_abs}");
    }

    #[test]
    fn single_unit_matches_hand_computation() {
        let config = MlpConfig {
            input_dim: 2,
            hidden_layers: 1,
            hidden_units: 1,
            horizon: 1,
        };
        let mut model =
            MlpModel::init(config, ModelNormalization::identity(2), 1).unwrap();
        model.weights[0] = vec![0.3, -0.7];
        model.biases[0] = vec![0.1];
        model.weights[1] = vec![1.5, -2.0, 0.25];
        model.biases[1] = vec![0.01, 0.02, 0.03];
        let x = [0.4, 0.9];
        let h = (0.3_f64 * 0.4 - 0.7 * 0.9 + 0.1).tanh();
        let expected = [1.5 * h + 0.01, -2.0 * h + 0.02, 0.25 * h + 0.03];
        let out = model.forward(&x).unwrap();
        for (o, e) in out.iter().zip(expected.iter()) {
            assert_relative_eq!(o, e, epsilon = 1e-15);
        }
    }

    #[test]
    fn linear_net_input_gradient_is_weight_row() {
        // no hidden layers -> identity activation chain
        let config = MlpConfig {
            input_dim: 3,
            hidden_layers: 0,
            hidden_units: 0,
            horizon: 1,
        };
        let mut model = MlpModel::init(config, ModelNormalization::identity(3), 2).unwrap();
        model.weights[0] = vec![
            0.5, -1.0, 2.0, //
            0.0, 3.0, -0.5, //
            1.0, 1.0, 1.0,
        ];
        let mut cache = ForwardCache::default();
        model.forward_cached(&[0.1, 0.2, 0.3], &mut cache).unwrap();
        let mut grads = GradientBuffer::zeros_like(&model);
        let g = model.backward(&cache, &[1.0, 0.0, 0.0], &mut grads).unwrap();
        assert_eq!(g, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn backward_without_forward_is_usage_error() {
        let config = toy_config();
        let model =
            MlpModel::init(config, ModelNormalization::identity(config.input_dim), 1).unwrap();
        let cache = ForwardCache::default();
        let mut grads = GradientBuffer::zeros_like(&model);
        let err = model.backward(&cache, &[0.0; 3], &mut grads).unwrap_err();
        assert!(matches!(err, CoreError::Usage(_)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let config = toy_config();
        let model =
            MlpModel::init(config, ModelNormalization::identity(config.input_dim), 7).unwrap();
        let mut cache = ForwardCache::default();
        model.forward_cached(&[0.5, -0.5, 0.25, 1.0], &mut cache).unwrap();
        let mut grads = GradientBuffer::zeros_like(&model);
        let g = model.backward(&cache, &[0.0; 3], &mut grads).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(grads.weights.iter().all(|w| w.iter().all(|v| *v == 0.0)));
        assert!(grads.biases.iter().all(|b| b.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        use rand::Rng;
        // non-trivial normalization so those code paths are checked too
        let config = MlpConfig {
            input_dim: 4,
            hidden_layers: 2,
            hidden_units: 3,
            horizon: 2,
        };
        let normalization = ModelNormalization {
            input_mean: vec![0.1, -0.2, 0.3, 0.0],
            input_std: vec![0.5, 2.0, 1.5, 0.8],
            target_std: [0.9, 1.1, 1.3],
        };
        let model = MlpModel::init(config, normalization, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let upstream: Vec<f64> = (0..config.output_dim())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();

        let mut cache = ForwardCache::default();
        model.forward_cached(&x, &mut cache).unwrap();
        let mut grads = GradientBuffer::zeros_like(&model);
        let input_grad = model.backward(&cache, &upstream, &mut grads).unwrap();

        let loss = |m: &MlpModel| -> f64 {
            let out = m.forward(&x).unwrap();
            out.iter().zip(upstream.iter()).map(|(o, u)| o * u).sum()
        };
        let h = 1e-6;
        let flat = model.flatten_params();
        let mut worst: f64 = 0.0;
        for p in 0..flat.len() {
            let mut plus = model.clone();
            let mut minus = model.clone();
            let mut fp = flat.clone();
            fp[p] += h;
            plus.set_params_from_flat(&fp).unwrap();
            fp[p] -= 2.0 * h;
            minus.set_params_from_flat(&fp).unwrap();
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            // recover the analytic gradient in the same flat order
            let mut analytic = Vec::new();
            for l in 0..grads.weights.len() {
                analytic.extend_from_slice(&grads.weights[l]);
                analytic.extend_from_slice(&grads.biases[l]);
            }
            let denom = fd.abs().max(analytic[p].abs()).max(1e-8);
            worst = worst.max((fd - analytic[p]).abs() / denom);
        }
        assert!(worst < 1e-5, "max relative gradient error {worst:.3e}");

        // input gradient against finite differences
        let mut worst_in: f64 = 0.0;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let f = |xv: &[f64]| -> f64 {
                let out = model.forward(xv).unwrap();
                out.iter().zip(upstream.iter()).map(|(o, u)| o * u).sum()
            };
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let denom = fd.abs().max(input_grad[i].abs()).max(1e-8);
            worst_in = worst_in.max((fd - input_grad[i]).abs() / denom);
        }
        assert!(worst_in < 1e-5, "max relative input-gradient error {worst_in:.3e}");
    }

    #[test]
    fn lipschitz_on_bounded_inputs() {
        use rand::Rng;
        let config = MlpConfig::nominal();
        let model =
            MlpModel::init(config, ModelNormalization::identity(config.input_dim), 31).unwrap();
        // product of spectral-norm bounds (Frobenius upper bound) is a valid
        // Lipschitz constant for the tanh chain
        let mut lip = 1.0;
        for w in &model.weights {
            lip *= w.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let x: Vec<f64> = (0..config.input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut dx = x.clone();
            let i = rng.gen_range(0..config.input_dim);
            let delta = rng.gen_range(-0.05..0.05);
            dx[i] += delta;
            let a = model.forward(&x).unwrap();
            let b = model.forward(&dx).unwrap();
            let dist: f64 = a
                .iter()
                .zip(b.iter())
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            assert!(
                dist <= lip * delta.abs() + 1e-12,
                "not Lipschitz: {dist} > {lip}·{}",
                delta.abs()
            );
        }
    }
}
