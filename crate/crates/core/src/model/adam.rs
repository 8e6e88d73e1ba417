//! Adam optimizer and the batched training step.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use super::{build_sequence, LossReport, Model, ModelError, TrainExample};

/// Defaults follow the training recipe: lr 1e-4, beta1 0.9, beta2 0.999.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment accumulators, one pair per parameter tensor in the
/// model's fixed visit order.
pub struct AdamState {
    t: u64,
    moments: Vec<(Array2<f64>, Array2<f64>)>,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let mut moments = Vec::new();
        model.visit_params(&mut |p| {
            moments.push((Array2::zeros(p.w.raw_dim()), Array2::zeros(p.w.raw_dim())));
        });
        Self { t: 0, moments }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainStats {
    /// Eq. (1) loss over the batch, summed and per-token.
    pub loss: LossReport,
}

/// One Adam update over a batch: gradients of the per-token mean loss,
/// restricted to each example's loss mask.
pub fn train_step(
    model: &mut Model,
    batch: &[TrainExample],
    opt: &AdamConfig,
    state: &mut AdamState,
    rng: &mut ChaCha8Rng,
) -> Result<TrainStats, ModelError> {
    assert!(!batch.is_empty(), "empty batch");
    // token count is known from the plans alone; pre-compute so one pass
    // yields gradients of the batch mean
    let mut total_tokens = 0usize;
    for ex in batch {
        let plan =
            build_sequence(&model.cfg, &model.vocab, ex.timbre.as_ref(), ex.midi.as_ref(), &ex.audio)?;
        total_tokens += plan.target_tokens();
    }
    if total_tokens == 0 {
        return Err(ModelError::EmptyMask);
    }

    model.zero_grads();
    let scale = 1.0 / total_tokens as f64;
    let mut sum = 0.0;
    for (item, ex) in batch.iter().enumerate() {
        let report = model.forward_backward(ex, scale, rng).map_err(|e| match e {
            ModelError::NonFiniteLoss { value, .. } => ModelError::NonFiniteLoss { value, item },
            other => other,
        })?;
        sum += report.sum;
    }
    if !sum.is_finite() {
        return Err(ModelError::NonFiniteLoss { value: sum, item: 0 });
    }

    // Adam with bias correction
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let mut idx = 0usize;
    let mut count = 0usize;
    model.visit_params(&mut |_| count += 1);
    if count != state.moments.len() {
        return Err(ModelError::OptimizerShapeMismatch { got: state.moments.len(), expected: count });
    }
    let moments = &mut state.moments;
    model.visit_params_mut(&mut |p| {
        let (m, v) = &mut moments[idx];
        idx += 1;
        ndarray::Zip::from(&mut p.w).and(&p.g).and(m).and(v).for_each(|w, &g, m, v| {
            *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
            *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *w -= opt.lr * mhat / (vhat.sqrt() + opt.eps);
        });
    });

    Ok(TrainStats {
        loss: LossReport { sum, mean: sum / total_tokens as f64, tokens: total_tokens },
    })
}
