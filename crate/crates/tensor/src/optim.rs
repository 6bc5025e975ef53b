//! Named parameters and AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Linear warmup to the base rate, then cosine decay to zero.
    WarmupCosine { warmup_steps: u64, total_steps: u64 },
}

#[derive(Clone, Copy, Debug)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
        }
    }
}

impl OptimizerConfig {
    /// Learning-rate multiplier at 1-based step `t`.
    pub fn lr_multiplier(&self, t: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::WarmupCosine { warmup_steps, total_steps } => {
                if warmup_steps > 0 && t <= warmup_steps {
                    t as f64 / warmup_steps as f64
                } else {
                    let total = total_steps.max(warmup_steps + 1);
                    let progress =
                        (t - warmup_steps) as f64 / (total - warmup_steps) as f64;
                    0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Option<Tensor<S>>,
    pub moment1: Tensor<S>,
    pub moment2: Tensor<S>,
    pub step_count: u64,
}

/// A model's parameters, unique by name, iterated in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<S> {
    params: Vec<Parameter<S>>,
    index: BTreeMap<String, usize>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<S>) -> Result<(), TensorError> {
        if self.index.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        let shape = value.shape().to_vec();
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: None,
            moment1: Tensor::zeros(&shape),
            moment2: Tensor::zeros(&shape),
            step_count: 0,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<S>, TensorError> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<S>, TensorError> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(TensorError::UnknownParam(name.to_string())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `delta` into each named parameter's gradient accumulator.
    pub fn accumulate_grads(
        &mut self,
        deltas: impl IntoIterator<Item = (usize, Tensor<S>)>,
    ) {
        for (i, delta) in deltas {
            let p = &mut self.params[i];
            match &mut p.grad {
                Some(g) => {
                    for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                        *a += *b;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_index(&self, i: usize) -> &Parameter<S> {
        &self.params[i]
    }
}

/// Binds parameters onto a tape during forward construction and remembers
/// which tape variable corresponds to which parameter.
pub struct Binder<'a, S> {
    set: &'a ParamSet<S>,
    bound: Vec<(usize, Var)>,
}

impl<'a, S: Scalar> Binder<'a, S> {
    pub fn new(set: &'a ParamSet<S>) -> Self {
        Self { set, bound: Vec::new() }
    }

    pub fn bind(&mut self, tape: &mut Tape<S>, name: &str) -> Result<Var, TensorError> {
        let idx = self
            .set
            .index_of(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let var = tape.leaf(self.set.by_index(idx).value.clone(), true);
        self.bound.push((idx, var));
        Ok(var)
    }

    /// Gradients of every bound parameter after `tape.backward`.
    pub fn collect_grads(&self, tape: &Tape<S>) -> Vec<(usize, Tensor<S>)> {
        self.bound
            .iter()
            .filter_map(|&(idx, var)| tape.grad(var).map(|g| (idx, g.clone())))
            .collect()
    }
}

/// One AdamW step over every parameter with a populated gradient.
///
/// Decoupled decay: p <- p * (1 - lr_t * wd) before the moment update is applied.
pub fn adamw_step<S: Scalar>(
    set: &mut ParamSet<S>,
    config: &OptimizerConfig,
) -> Result<(), TensorError> {
    for p in set.iter_mut() {
        let Some(grad) = p.grad.take() else { continue };
        if grad.data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::NanGradient(p.name.clone()));
        }
        p.step_count += 1;
        let t = p.step_count;
        let lr = S::from_f64(config.learning_rate * config.lr_multiplier(t));
        if lr == S::zero() {
            continue;
        }
        let b1 = S::from_f64(config.beta1);
        let b2 = S::from_f64(config.beta2);
        let eps = S::from_f64(config.epsilon);
        let wd = S::from_f64(config.weight_decay);
        let bc1 = S::one() - S::from_f64(config.beta1.powi(t as i32));
        let bc2 = S::one() - S::from_f64(config.beta2.powi(t as i32));
        let one = S::one();
        for i in 0..grad.numel() {
            let g = grad.data()[i];
            let m = b1 * p.moment1.data()[i] + (one - b1) * g;
            let v = b2 * p.moment2.data()[i] + (one - b2) * g * g;
            p.moment1.data_mut()[i] = m;
            p.moment2.data_mut()[i] = v;
            let mhat = m / bc1;
            let vhat = v / bc2;
            let w = p.value.data()[i];
            p.value.data_mut()[i] = w * (one - lr * wd) - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
