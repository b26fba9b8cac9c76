//! Adam with decoupled weight decay.
//!
//! The Adam update (bias-corrected first and second moments) is applied first,
//! then decoupled decay `param -= lr * wd * param`. Gradients are zeroed after
//! each step, and every parameter is asserted finite.

use super::TokenClassifier;

/// Optimizer hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub weight_decay: f32,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second-moment accumulators for one parameter tensor.
#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl Moments {
    pub fn new(len: usize) -> Self {
        Moments {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One AdamW update over a flat tensor; zeroes the gradient afterwards.
pub fn adamw_update(cfg: &OptimConfig, mom: &mut Moments, data: &mut [f32], grad: &mut [f32]) {
    debug_assert_eq!(data.len(), mom.m.len());
    debug_assert_eq!(data.len(), grad.len());
    mom.step += 1;
    let bc1 = 1.0 - (cfg.beta1 as f64).powi(mom.step as i32);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(mom.step as i32);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let lr = cfg.learning_rate;
    let wd = cfg.weight_decay;
    for i in 0..data.len() {
        let g = grad[i];
        let m = b1 * mom.m[i] + (1.0 - b1) * g;
        let v = b2 * mom.v[i] + (1.0 - b2) * g * g;
        mom.m[i] = m;
        mom.v[i] = v;
        let m_hat = (m as f64 / bc1) as f32;
        let v_hat = (v as f64 / bc2) as f32;
        data[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        data[i] -= lr * wd * data[i];
        grad[i] = 0.0;
    }
}

/// Moment state for all five model tensors plus the shared step count.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimConfig,
    pub step: u64,
    moments: Vec<Moments>,
}

impl OptimizerState {
    pub fn new(model: &TokenClassifier, config: OptimConfig) -> Self {
        let moments = model
            .tensors()
            .iter()
            .map(|t| Moments::new(t.len()))
            .collect();
        OptimizerState {
            config,
            step: 0,
            moments,
        }
    }

    /// Drop all accumulated moments, keeping the hyperparameters.
    pub fn reset(&mut self) {
        for mom in &mut self.moments {
            *mom = Moments::new(mom.m.len());
        }
        self.step = 0;
    }
}

/// Apply one AdamW step to every model tensor and zero the gradients.
///
/// Panics if any parameter becomes non-finite; a NaN here means the math
/// upstream is broken and training results would be garbage.
pub fn optimizer_step(model: &mut TokenClassifier, state: &mut OptimizerState) {
    state.step += 1;
    let cfg = state.config.clone();
    for (tensor, mom) in model.tensors_mut().into_iter().zip(&mut state.moments) {
        let Tensor2 { data, grad } = split(tensor);
        adamw_update(&cfg, mom, data, grad);
    }
    model.version += 1;
    assert!(
        model.all_finite(),
        "non-finite parameter after optimizer step {}",
        state.step
    );
}

struct Tensor2<'a> {
    data: &'a mut [f32],
    grad: &'a mut [f32],
}

fn split(t: &mut super::Tensor) -> Tensor2<'_> {
    Tensor2 {
        data: &mut t.data,
        grad: &mut t.grad,
    }
}
