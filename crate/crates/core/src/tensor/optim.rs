use super::{Result, Scalar, Tensor, TensorError};

/// Adam moments and hyperparameters. Moment buffers are allocated on the
/// first step and must keep matching the parameter list afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(lr: T, beta1: T, beta2: T, eps: T) -> Self {
        OptimizerState {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update. Every parameter must carry a gradient.
pub fn adam_step<T: Scalar>(params: &mut [&mut Tensor<T>], state: &mut OptimizerState<T>) -> Result<()> {
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(TensorError::MissingGrad(i));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() || params.iter().zip(&state.m).any(|(p, m)| p.numel() != m.len()) {
        return Err(TensorError::Invalid {
            op: "adam_step",
            msg: "parameter list changed between steps".into(),
        });
    }
    state.t += 1;
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let c1 = T::one() - state.beta1.powi(t);
    let c2 = T::one() - state.beta2.powi(t);
    let (b1, b2) = (state.beta1, state.beta2);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.grad().expect("checked above").to_vec();
        for (((w, mi), vi), gi) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w = *w - state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping. Parameters without gradients are skipped.
pub fn clip_grad_norm<T: Scalar>(params: &mut [&mut Tensor<T>], max_norm: T) -> T {
    let norm = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|&x| x * x)
        .sum::<T>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / (norm + T::lit(1e-6));
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                for x in g.iter_mut() {
                    *x = *x * scale;
                }
            }
        }
    }
    norm
}
