//! One-hidden-layer rectifier regressor trained with mini-batch SGD and a
//! plateau learning-rate schedule.
//!
//! The model is generic over its parameter type: filters use `f32`, the
//! gradient check runs the same code with `f64`. Gradients are always
//! accumulated in `f64`.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait Scalar: Float + FromPrimitive + ToPrimitive + Send + Sync + std::fmt::Debug + 'static {}
impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel<T: Scalar = f32> {
    input_dim: usize,
    /// `hidden_dim x input_dim`, row `j` feeds hidden unit `j`.
    weights1: Vec<T>,
    bias1: Vec<T>,
    weights2: Vec<T>,
    bias2: T,
}

/// Parameter gradients, always 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights1: Vec<f64>,
    pub bias1: Vec<f64>,
    pub weights2: Vec<f64>,
    pub bias2: f64,
}

impl Gradients {
    pub fn zeros(dim: usize) -> Self {
        Gradients {
            weights1: vec![0.0; dim * dim],
            bias1: vec![0.0; dim],
            weights2: vec![0.0; dim],
            bias2: 0.0,
        }
    }

    fn clear(&mut self) {
        self.weights1.fill(0.0);
        self.bias1.fill(0.0);
        self.weights2.fill(0.0);
        self.bias2 = 0.0;
    }

    /// All entries in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.weights1.clone();
        v.extend(&self.bias1);
        v.extend(&self.weights2);
        v.push(self.bias2);
        v
    }
}

pub fn init_model(m: usize, seed: u64) -> Result<MlpModel<f32>> {
    MlpModel::init(m, seed)
}

impl<T: Scalar> MlpModel<T> {
    /// Weights uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
    pub fn init(m: usize, seed: u64) -> Result<Self> {
        if m < 2 {
            return Err(Error::invalid(format!("model input dimension must be >= 2, got {m}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (m as f64).sqrt();
        let mut draw = |count: usize| -> Vec<T> {
            (0..count)
                .map(|_| T::from_f64(rng.gen_range(-bound..bound)).unwrap())
                .collect()
        };
        let weights1 = draw(m * m);
        let weights2 = draw(m);
        Ok(MlpModel {
            input_dim: m,
            weights1,
            bias1: vec![T::zero(); m],
            weights2,
            bias2: T::zero(),
        })
    }

    pub fn zeros(m: usize) -> Self {
        MlpModel {
            input_dim: m,
            weights1: vec![T::zero(); m * m],
            bias1: vec![T::zero(); m],
            weights2: vec![T::zero(); m],
            bias2: T::zero(),
        }
    }

    pub fn from_parts(weights1: Vec<T>, bias1: Vec<T>, weights2: Vec<T>, bias2: T) -> Result<Self> {
        let m = bias1.len();
        if m < 2 || weights1.len() != m * m || weights2.len() != m {
            return Err(Error::invalid("inconsistent parameter shapes"));
        }
        let model = MlpModel {
            input_dim: m,
            weights1,
            bias1,
            weights2,
            bias2,
        };
        if !model.is_finite() {
            return Err(Error::invalid("non-finite parameter"));
        }
        Ok(model)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.bias1.len()
    }

    pub fn weights1(&self) -> &[T] {
        &self.weights1
    }

    pub fn bias1(&self) -> &[T] {
        &self.bias1
    }

    pub fn weights2(&self) -> &[T] {
        &self.weights2
    }

    pub fn bias2(&self) -> T {
        self.bias2
    }

    pub fn param_count(&self) -> usize {
        self.weights1.len() + self.bias1.len() + self.weights2.len() + 1
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|p| p.is_finite())
    }

    fn params(&self) -> impl Iterator<Item = T> + '_ {
        self.weights1
            .iter()
            .chain(&self.bias1)
            .chain(&self.weights2)
            .copied()
            .chain(std::iter::once(self.bias2))
    }

    fn param_mut(&mut self, index: usize) -> &mut T {
        let n1 = self.weights1.len();
        let h = self.bias1.len();
        match index {
            i if i < n1 => &mut self.weights1[i],
            i if i < n1 + h => &mut self.bias1[i - n1],
            i if i < n1 + 2 * h => &mut self.weights2[i - n1 - h],
            _ => &mut self.bias2,
        }
    }

    #[inline]
    fn pre_activation(&self, j: usize, x: &[T]) -> T {
        let row = &self.weights1[j * self.input_dim..(j + 1) * self.input_dim];
        self.bias1[j] + dot(row, x)
    }

    /// Prediction for one input.
    pub fn forward(&self, x: &[T]) -> Result<T> {
        if x.len() != self.input_dim {
            return Err(Error::invalid(format!(
                "input has length {}, model expects {}",
                x.len(),
                self.input_dim
            )));
        }
        Ok(self.predict(x))
    }

    /// Unchecked [`forward`](Self::forward).
    #[inline]
    pub fn predict(&self, x: &[T]) -> T {
        debug_assert_eq!(x.len(), self.input_dim);
        let mut out = self.bias2;
        for j in 0..self.bias1.len() {
            let z = self.pre_activation(j, x);
            if z > T::zero() {
                out = out + self.weights2[j] * z;
            }
        }
        out
    }

    /// Adds `scale * d(prediction - y)^2 / d(params)` into `grads`; returns
    /// the squared error.
    pub fn accumulate_gradients(&self, x: &[T], y: f64, scale: f64, grads: &mut Gradients, hidden: &mut Vec<f64>) -> f64 {
        hidden.clear();
        let mut out = self.bias2.to_f64().unwrap();
        for j in 0..self.bias1.len() {
            let z = self.pre_activation(j, x).to_f64().unwrap();
            let a = z.max(0.0);
            hidden.push(if z > 0.0 { a } else { -0.0 });
            out += self.weights2[j].to_f64().unwrap() * a;
        }
        let residual = out - y;
        let d_out = 2.0 * residual * scale;
        grads.bias2 += d_out;
        for j in 0..self.bias1.len() {
            let h = hidden[j];
            if !(h > 0.0) {
                continue;
            }
            grads.weights2[j] += d_out * h;
            let d_hidden = d_out * self.weights2[j].to_f64().unwrap();
            grads.bias1[j] += d_hidden;
            let row = &mut grads.weights1[j * self.input_dim..(j + 1) * self.input_dim];
            for (g, xi) in row.iter_mut().zip(x) {
                *g += d_hidden * xi.to_f64().unwrap();
            }
        }
        residual * residual
    }

    fn apply(&mut self, grads: &Gradients, lr: f64) {
        let step = |p: &mut T, g: f64| *p = *p - T::from_f64(lr * g).unwrap();
        self.weights1.iter_mut().zip(&grads.weights1).for_each(|(p, g)| step(p, *g));
        self.bias1.iter_mut().zip(&grads.bias1).for_each(|(p, g)| step(p, *g));
        self.weights2.iter_mut().zip(&grads.weights2).for_each(|(p, g)| step(p, *g));
        step(&mut self.bias2, grads.bias2);
    }

    /// Mean squared error over a dataset.
    pub fn mse(&self, inputs: &[&[T]], targets: &[f64]) -> f64 {
        if inputs.is_empty() {
            return 0.0;
        }
        let total: f64 = inputs
            .iter()
            .zip(targets)
            .map(|(x, y)| {
                let r = self.predict(x).to_f64().unwrap() - y;
                r * r
            })
            .sum();
        total / inputs.len() as f64
    }
}

impl MlpModel<f32> {
    /// Little-endian binary32 parameters: weights1, bias1, weights2, bias2.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.params().flat_map(f32::to_le_bytes).collect()
    }

    pub fn from_bytes(bytes: &[u8], m: usize) -> Result<Self> {
        let expected = 4 * (m * m + 2 * m + 1);
        if bytes.len() != expected {
            return Err(Error::Format {
                offset: bytes.len().min(expected) as u64,
                message: format!("filter weights need {expected} bytes, got {}", bytes.len()),
            });
        }
        let vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (w1, rest) = vals.split_at(m * m);
        let (b1, rest) = rest.split_at(m);
        let (w2, rest) = rest.split_at(m);
        MlpModel::from_parts(w1.to_vec(), b1.to_vec(), w2.to_vec(), rest[0])
    }

    pub fn byte_size(&self) -> usize {
        4 * self.param_count()
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..LANES {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let mut sum = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        sum = sum + *x * *y;
    }
    sum
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub min_lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub plateau_patience: usize,
    /// Relative validation improvement that resets the plateau counter.
    pub plateau_min_delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 0.01,
            lr_decay_factor: 10.0,
            min_lr: 1e-5,
            max_epochs: 1000,
            batch_size: 32,
            plateau_patience: 20,
            plateau_min_delta: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > self.min_lr && self.min_lr > 0.0) {
            return Err(Error::invalid("learning rates must satisfy initial_lr > min_lr > 0"));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("max_epochs and batch_size must be >= 1"));
        }
        if !(self.lr_decay_factor > 1.0) {
            return Err(Error::invalid("lr_decay_factor must be > 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// Epoch whose parameters were returned (0 = initial parameters).
    pub best_epoch: usize,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    /// Learning rate used in each epoch.
    pub lr_trajectory: Vec<f64>,
    /// Validation loss at every epoch boundary, starting with the initial
    /// parameters.
    pub val_losses: Vec<f64>,
}

/// Minimize mean squared error with mini-batch SGD. Returns the parameters
/// with the lowest validation loss seen at any epoch boundary.
pub fn train<T: Scalar>(
    model: MlpModel<T>,
    inputs: &[&[T]],
    targets: &[f64],
    val_inputs: &[&[T]],
    val_targets: &[f64],
    cfg: &TrainConfig,
) -> Result<(MlpModel<T>, TrainReport)> {
    cfg.validate()?;
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::invalid(format!(
            "need matching non-empty inputs and targets, got {} and {}",
            inputs.len(),
            targets.len()
        )));
    }
    if val_inputs.len() != val_targets.len() {
        return Err(Error::invalid("validation inputs and targets differ in length"));
    }
    if targets.iter().chain(val_targets).any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::invalid("targets must be finite and non-negative"));
    }
    let dim = model.input_dim;
    if inputs.iter().chain(val_inputs).any(|x| x.len() != dim) {
        return Err(Error::invalid("input length does not match model dimension"));
    }

    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut grads = Gradients::zeros(dim);
    let mut hidden = Vec::with_capacity(dim);
    let monitor = |m: &MlpModel<T>| {
        if val_inputs.is_empty() {
            m.mse(inputs, targets)
        } else {
            m.mse(val_inputs, val_targets)
        }
    };

    let mut lr = cfg.initial_lr;
    let mut decays = 0i32;
    let mut best = model.clone();
    let mut best_val = monitor(&model);
    let mut best_epoch = 0;
    let mut plateau_ref = best_val;
    let mut stale = 0;
    let mut report = TrainReport {
        epochs_run: 0,
        best_epoch: 0,
        final_train_loss: f64::NAN,
        final_val_loss: best_val,
        lr_trajectory: Vec::new(),
        val_losses: vec![best_val],
    };

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.clear();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                epoch_loss += model.accumulate_gradients(inputs[i], targets[i], scale, &mut grads, &mut hidden);
            }
            model.apply(&grads, lr);
        }
        epoch_loss /= inputs.len() as f64;
        report.lr_trajectory.push(lr);
        report.epochs_run = epoch;
        let val = monitor(&model);
        if !epoch_loss.is_finite() || !val.is_finite() || !model.is_finite() {
            return Err(Error::Diverged {
                epoch,
                lr,
                loss: if epoch_loss.is_finite() { val } else { epoch_loss },
            });
        }
        report.val_losses.push(val);
        if val < best_val {
            best_val = val;
            best = model.clone();
            best_epoch = epoch;
        }
        if val < plateau_ref * (1.0 - cfg.plateau_min_delta) {
            plateau_ref = val;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.plateau_patience {
                decays += 1;
                lr = cfg.initial_lr / cfg.lr_decay_factor.powi(decays);
                stale = 0;
                plateau_ref = plateau_ref.min(val);
                // tolerate rounding in the repeated division
                if lr < cfg.min_lr * (1.0 - 1e-9) {
                    break;
                }
            }
        }
    }
    report.best_epoch = best_epoch;
    report.final_val_loss = best_val;
    report.final_train_loss = best.mse(inputs, targets);
    Ok((best, report))
}

/// Largest relative difference between analytic gradients of the squared
/// error and central finite differences with step `1e-5`.
pub fn gradient_check(model: &MlpModel<f64>, x: &[f64], y: f64) -> Result<f64> {
    if x.len() != model.input_dim {
        return Err(Error::invalid("input length does not match model dimension"));
    }
    let analytic = analytic_gradients(model, x, y).flatten();
    let numeric = numeric_gradients(model, x, y, 1e-5);
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max))
}

pub fn analytic_gradients(model: &MlpModel<f64>, x: &[f64], y: f64) -> Gradients {
    let mut g = Gradients::zeros(model.input_dim);
    let mut hidden = Vec::new();
    model.accumulate_gradients(x, y, 1.0, &mut g, &mut hidden);
    g
}

/// Central finite differences of `(predict(x) - y)^2`, in parameter order.
pub fn numeric_gradients(model: &MlpModel<f64>, x: &[f64], y: f64, h: f64) -> Vec<f64> {
    let mut probe = model.clone();
    let loss = |m: &MlpModel<f64>| (m.predict(x) - y).powi(2);
    (0..model.param_count())
        .map(|i| {
            let orig = *probe.param_mut(i);
            *probe.param_mut(i) = orig + h;
            let up = loss(&probe);
            *probe.param_mut(i) = orig - h;
            let down = loss(&probe);
            *probe.param_mut(i) = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Smallest pre-activation magnitude for `x`; finite-difference checks are
/// only meaningful away from the rectifier kink.
pub fn min_abs_pre_activation(model: &MlpModel<f64>, x: &[f64]) -> f64 {
    (0..model.hidden_dim())
        .map(|j| model.pre_activation(j, x).abs())
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(data: &[Vec<f32>]) -> Vec<&[f32]> {
        data.iter().map(Vec::as_slice).collect()
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = init_model(8, 1).unwrap();
        let b = init_model(8, 1).unwrap();
        let c = init_model(8, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.weights1().len(), 64);
        let bound = 1.0 / 8f32.sqrt();
        assert!(a.weights1().iter().all(|w| w.abs() < bound));
        assert!(a.bias1().iter().all(|&b| b == 0.0));
        assert!(init_model(1, 0).is_err());
    }

    #[test]
    fn forward_cases() {
        let zero = MlpModel::<f32>::zeros(4);
        assert_eq!(zero.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 0.0);
        assert!(zero.forward(&[1.0]).is_err());

        // h1 = relu(x1 - x2 + 0.5) = 2.5, h2 = relu(2 x1 + x2 - 3) = 0
        // out = 1 + 2 * 2.5 - 1 * 0 = 6
        let m = MlpModel::from_parts(vec![1.0f64, -1.0, 2.0, 1.0], vec![0.5, -3.0], vec![2.0, -1.0], 1.0).unwrap();
        assert_eq!(m.forward(&[1.0, -1.0]).unwrap(), 6.0);
        // h1 = relu(0 + 0.5) = 0.5, h2 = relu(3 + 1.5 - 3) = 1.5 -> 1 + 1 - 1.5
        assert_eq!(m.forward(&[1.5, 1.5]).unwrap(), 0.5);

        let big = init_model(16, 3).unwrap();
        let x: Vec<f32> = (0..16).map(|i| (i as f32 - 8.0) * 100.0).collect();
        assert!(big.forward(&x).unwrap().is_finite());
    }

    #[test]
    fn bytes_roundtrip() {
        let m = init_model(6, 4).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(bytes.len(), 4 * (36 + 12 + 1));
        assert_eq!(MlpModel::from_bytes(&bytes, 6).unwrap(), m);
        assert!(MlpModel::from_bytes(&bytes[1..], 6).is_err());
    }

    fn random_input(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
        (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..10 {
            let m = 2 + trial % 9;
            let model = MlpModel::<f64>::init(m, trial as u64).unwrap();
            let mut x = random_input(&mut rng, m);
            while min_abs_pre_activation(&model, &x) < 1e-6 {
                x = random_input(&mut rng, m);
            }
            let err = gradient_check(&model, &x, rng.gen_range(0.0..5.0)).unwrap();
            assert!(err < 1e-4, "trial {trial}: {err}");
        }
    }

    #[test]
    fn zero_model_is_stationary() {
        let g = analytic_gradients(&MlpModel::zeros(5), &[1.0, 2.0, 3.0, 4.0, 5.0], 0.0);
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_weight_only_rescales_its_own_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = MlpModel::<f64>::init(6, 9).unwrap();
        let x = random_input(&mut rng, 6);
        let y = 0.3;
        let j = (0..6).find(|&j| model.pre_activation(j, &x) > 1e-3).expect("an active unit");
        let before = analytic_gradients(&model, &x, y);
        let delta = 0.25;
        let mut moved = model.clone();
        moved.weights2[j] += delta;
        // keep the residual fixed so only the direct dependence remains
        let y2 = y + delta * model.pre_activation(j, &x);
        let after = analytic_gradients(&moved, &x, y2);
        let ratio = moved.weights2[j] / model.weights2[j];
        for i in 0..6 {
            let row = |g: &Gradients| g.weights1[i * 6..(i + 1) * 6].to_vec();
            if i == j {
                for (a, b) in row(&after).iter().zip(row(&before)) {
                    assert!((a - b * ratio).abs() < 1e-12);
                }
                assert!((after.bias1[i] - before.bias1[i] * ratio).abs() < 1e-12);
            } else {
                for (a, b) in row(&after).iter().zip(row(&before)) {
                    assert!((a - b).abs() < 1e-12);
                }
                assert!((after.bias1[i] - before.bias1[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fits_a_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<Vec<f32>> = (0..200).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let targets = vec![3.0; 200];
        let model = init_model(8, 1).unwrap();
        let zero_mse = model.mse(&rows(&data), &targets);
        let cfg = TrainConfig {
            max_epochs: 200,
            ..TrainConfig::default()
        };
        let (fit, report) = train(model, &rows(&data[..160]), &targets[..160], &rows(&data[160..]), &targets[160..], &cfg).unwrap();
        assert!(report.final_train_loss <= zero_mse);
        for x in &data[..160] {
            let p = fit.predict(x) as f64;
            assert!((p - 3.0).abs() < 0.3, "{p}");
        }
    }

    #[test]
    fn fits_a_linear_target_with_a_valid_schedule() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<Vec<f32>> = (0..500).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        // shifted so targets stay non-negative
        let targets: Vec<f64> = data.iter().map(|x| x.iter().map(|&v| v as f64).sum::<f64>() + 8.0).collect();
        let mean = targets.iter().sum::<f64>() / 500.0;
        let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / 500.0;
        let cfg = TrainConfig {
            seed: 3,
            ..TrainConfig::default()
        };
        let (_, report) = train(init_model(8, 2).unwrap(), &rows(&data[..400]), &targets[..400], &rows(&data[400..]), &targets[400..], &cfg).unwrap();
        assert!(report.final_val_loss < 0.05 * var, "{} vs {}", report.final_val_loss, var);

        let lrs = &report.lr_trajectory;
        for w in lrs.windows(2) {
            assert!(w[1] <= w[0]);
            if w[1] < w[0] {
                assert!((w[0] / w[1] - 10.0).abs() < 1e-9);
            }
        }
        assert!(report.val_losses.iter().all(|&v| report.final_val_loss <= v));
    }

    #[test]
    fn training_is_deterministic_and_validates() {
        let data: Vec<Vec<f32>> = (0..40).map(|i| vec![i as f32 / 40.0; 4]).collect();
        let targets: Vec<f64> = (0..40).map(|i| i as f64 / 10.0).collect();
        let cfg = TrainConfig {
            max_epochs: 30,
            seed: 9,
            ..TrainConfig::default()
        };
        let run = || train(init_model(4, 1).unwrap(), &rows(&data), &targets, &[], &[], &cfg).unwrap();
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a, b);
        assert_eq!(ra, rb);

        assert!(train(init_model(4, 1).unwrap(), &rows(&data), &targets[..3], &[], &[], &cfg).is_err());
        let neg = vec![-1.0; 40];
        assert!(train(init_model(4, 1).unwrap(), &rows(&data), &neg, &[], &[], &cfg).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let data: Vec<Vec<f32>> = (0..20).map(|i| vec![1000.0 + i as f32; 4]).collect();
        let targets = vec![1.0e6; 20];
        let cfg = TrainConfig {
            initial_lr: 10.0,
            ..TrainConfig::default()
        };
        match train(init_model(4, 1).unwrap(), &rows(&data), &targets, &[], &[], &cfg) {
            Err(Error::Diverged { epoch, lr, .. }) => {
                assert!(epoch >= 1);
                assert_eq!(lr, 10.0);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
