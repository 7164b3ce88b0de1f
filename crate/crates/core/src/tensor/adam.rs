use super::{ParamStore, Tensor, TensorError};

/// Bias-corrected Adam optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Zeroed moments shaped like `params`, with the usual β defaults.
    pub fn new(params: &ParamStore, learning_rate: f64) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update. Rejects the whole step if any gradient entry is non-finite,
/// leaving parameters and state untouched.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState) -> Result<(), TensorError> {
    if grads.len() != params.len() || state.first_moment.len() != params.len() || state.second_moment.len() != params.len() {
        return Err(TensorError::InvalidShape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(TensorError::InvalidShape(format!("adam: `{name}` is {:?}, gradient {:?}", p.shape(), g.shape())));
        }
        if !g.is_finite() {
            return Err(TensorError::NonFiniteGradient(name.to_string()));
        }
    }
    for (i, p) in params.tensors().iter().enumerate() {
        if state.first_moment[i].shape() != p.shape() || state.second_moment[i].shape() != p.shape() {
            return Err(TensorError::InvalidShape(format!("adam: moment shape mismatch for `{}`", params.names()[i])));
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}
