//! Adam optimizer over a flat list of named tensors.

use super::tensor::Tensor;
use super::NumericsError;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update. Deterministic given inputs; `params`, `grads`, and the
/// state must line up pairwise in shape and order.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), NumericsError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NumericsError::InvalidArg {
            op: "adam_step",
            detail: format!(
                "param/grad/state count mismatch: {}/{}/{}",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if state.m[i].shape() != p.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "adam_step",
                lhs: state.m[i].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }

    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for ((p, g), (m, v)) in
        params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let mdat = m.data_mut();
        let vdat = v.data_mut();
        let pdat = p.data_mut();
        for i in 0..pdat.len() {
            let gi = g.data()[i];
            mdat[i] = cfg.beta1 * mdat[i] + (1.0 - cfg.beta1) * gi;
            vdat[i] = cfg.beta2 * vdat[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = mdat[i] / bc1;
            let vhat = vdat[i] / bc2;
            pdat[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0, 3.0]);
        let g = Tensor::zeros(&[3]);
        let mut state = AdamState::new(&[&p]);
        let before = p.clone();
        adam_step(&mut [&mut p], &[&g], &mut state, &AdamConfig::with_learning_rate(0.1)).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // With bias correction, the very first update is
        //   -lr * g / (|g| + eps * sqrt(1-beta2))  ~= -lr * sign(g)
        let lr = 0.01;
        let cfg = AdamConfig::with_learning_rate(lr);
        let mut p = Tensor::from_vec(vec![0.5, -0.25]);
        let g = Tensor::from_vec(vec![2.0, -3.0]);
        let mut state = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[&g], &mut state, &cfg).unwrap();

        for (i, (&pv, &gv)) in p.data().iter().zip([0.5, -0.25].iter()).enumerate() {
            let gi = g.data()[i];
            let mhat = (1.0 - cfg.beta1) * gi / (1.0 - cfg.beta1);
            let vhat = (1.0 - cfg.beta2) * gi * gi / (1.0 - cfg.beta2);
            let expected = gv - lr * mhat / (vhat.sqrt() + cfg.epsilon);
            assert_relative_eq!(pv, expected, max_relative = 1e-12);
            // Direction is -sign(g) up to the epsilon correction.
            assert_eq!(pv < gv, gi > 0.0);
        }
    }

    #[test]
    fn deterministic_across_identical_calls() {
        let cfg = AdamConfig::with_learning_rate(0.05);
        let run = || {
            let mut p = Tensor::from_vec(vec![1.0, 2.0]);
            let g = Tensor::from_vec(vec![0.3, -0.7]);
            let mut state = AdamState::new(&[&p]);
            for _ in 0..5 {
                adam_step(&mut [&mut p], &[&g], &mut state, &cfg).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Tensor::from_vec(vec![1.0, 2.0]);
        let g = Tensor::from_vec(vec![1.0]);
        let mut state = AdamState::new(&[&p]);
        assert!(adam_step(&mut [&mut p], &[&g], &mut state, &AdamConfig::with_learning_rate(0.1))
            .is_err());
    }
}
