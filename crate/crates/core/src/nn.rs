//! Trainable-parameter storage, layer building blocks, the AdamW optimizer,
//! and the reduce-on-plateau learning-rate scheduler.

use crate::error::{Error, Result};
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// A single trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

/// Flat, name-addressed collection of parameters. Models hold `ParamId`
/// handles; sharing a handle between two branches shares the tensor.
pub struct ParamStore<T: Scalar> {
    params: Vec<Parameter<T>>,
    names: Vec<String>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), names: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { value, grad, trainable });
        self.names.push(name.into());
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Fold gradients produced by `Tape::backward` into the store.
    pub fn accumulate(&mut self, param_grads: &[(ParamId, Tensor<T>)]) {
        for (id, g) in param_grads {
            let dst = self.params[id.0].grad.data_mut();
            for (a, &b) in dst.iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
    }

    /// Put a parameter's current value on a tape as a parameter leaf.
    pub fn leaf(&self, tape: &mut Tape<T>, id: ParamId) -> Var {
        tape.param_leaf(id, self.params[id.0].value.clone())
    }
}

/// Fan-in scaled normal init for conv / linear weights.
pub fn he_normal<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T>
where
    StandardNormal: Distribution<T>,
{
    let std = T::from_f64((2.0 / fan_in as f64).sqrt());
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| {
        let z: T = StandardNormal.sample(rng);
        z * std
    }).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// One 3^3 convolution layer (weights live in a `ParamStore`).
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl ConvLayer {
    pub fn build<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self
    where
        StandardNormal: Distribution<T>,
    {
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(&[out_channels, in_channels, 3, 3, 3], in_channels * 27, rng),
            true,
        );
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), true));
        ConvLayer { weight, bias, in_channels, out_channels, stride }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = store.leaf(tape, self.weight);
        let b = self.bias.map(|id| store.leaf(tape, id));
        tape.conv3d(x, w, b, self.stride)
    }
}

/// Batch-normalization layer state: learnable gamma/beta plus running
/// statistics updated during training.
#[derive(Debug, Clone)]
pub struct BatchNormState<T: Scalar> {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn build(store: &mut ParamStore<T>, name: &str, channels: usize, momentum: T, eps: T) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()), true);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true);
        BatchNormState {
            gamma,
            beta,
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Forward pass; in training mode the running statistics are updated as
    /// `new = (1 - momentum) * old + momentum * batch`.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        training: bool,
    ) -> Result<Var> {
        let gamma = store.leaf(tape, self.gamma);
        let beta = store.leaf(tape, self.beta);
        if training {
            let (out, mean, var) = tape.batch_norm_train(x, gamma, beta, self.eps)?;
            let m = self.momentum;
            for c in 0..self.running_mean.len() {
                self.running_mean[c] = (T::one() - m) * self.running_mean[c] + m * mean[c];
                self.running_var[c] = (T::one() - m) * self.running_var[c] + m * var[c];
            }
            Ok(out)
        } else {
            tape.batch_norm_infer(x, gamma, beta, &self.running_mean, &self.running_var, self.eps)
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl LinearLayer {
    pub fn build<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self
    where
        StandardNormal: Distribution<T>,
    {
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(&[out_features, in_features], in_features, rng),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]), true);
        LinearLayer { weight, bias, in_features, out_features }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = store.leaf(tape, self.weight);
        let b = store.leaf(tape, self.bias);
        tape.linear(x, w, b)
    }
}

/// AdamW with decoupled weight decay:
/// θ ← θ − lr·(m̂/(√v̂ + eps) + wd·θ).
pub struct AdamW<T: Scalar> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    step: u64,
    moments1: Vec<Tensor<T>>,
    moments2: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, lr: T, weight_decay: T) -> Self {
        let moments1 = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        let moments2 = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        AdamW {
            lr,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            weight_decay,
            step: 0,
            moments1,
            moments2,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for (i, id) in store.ids().enumerate().collect::<Vec<_>>() {
            if !store.param(id).trainable {
                continue;
            }
            let grad = store.grad(id).clone();
            let m = self.moments1[i].data_mut();
            let v = self.moments2[i].data_mut();
            let g = grad.data();
            let theta = store.value_mut(id).data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (T::one() - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (T::one() - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                theta[j] = theta[j]
                    - self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * theta[j]);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlateauMode {
    Minimize,
    Maximize,
}

/// Reduce-on-plateau scheduler: after `patience` consecutive epochs without
/// improvement the learning rate is multiplied by `factor`, floored at
/// `min_lr`.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub mode: PlateauMode,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    lr: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(mode: PlateauMode, initial_lr: f64, factor: f64, patience: usize, min_lr: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&factor) {
            return Err(Error::config("plateau factor must be in (0,1)".to_string()));
        }
        Ok(PlateauScheduler {
            mode,
            factor,
            patience,
            min_lr,
            lr: initial_lr,
            best: None,
            bad_epochs: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feed one epoch's monitored metric; returns the (possibly reduced)
    /// learning rate.
    pub fn step(&mut self, metric: f64) -> f64 {
        let improved = match self.best {
            None => true,
            Some(best) => match self.mode {
                PlateauMode::Maximize => metric > best,
                PlateauMode::Minimize => metric < best,
            },
        };
        if improved {
            self.best = Some(metric);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}
