use serde::{Deserialize, Serialize};

use super::{AutodiffError, Tensor};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { v: m.clone(), m, t: 0 }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, hyper: &Adam, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<(), AutodiffError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(AutodiffError::InvalidTensor(format!(
                "adam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(AutodiffError::InvalidTensor(format!(
                    "adam slot {i}: param {:?}, grad {:?}, state {:?}",
                    p.shape(),
                    g.shape(),
                    self.m[i].shape()
                )));
            }
        }

        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - hyper.beta1.powi(t);
        let bc2 = 1.0 - hyper.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (j, &gj) in g.data().iter().enumerate() {
                md[j] = hyper.beta1 * md[j] + (1.0 - hyper.beta1) * gj;
                vd[j] = hyper.beta2 * vd[j] + (1.0 - hyper.beta2) * gj * gj;
                let m_hat = md[j] / bc1;
                let v_hat = vd[j] / bc2;
                pd[j] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let mut state = AdamState::new([&p]);
        let g = Tensor::vector(vec![0.3, -4.0, 0.0]);
        state.step(&Adam::new(0.01), &mut [&mut p], &[g]).unwrap();
        // m̂ = g and v̂ = g², so the update is lr·g/(|g| + ε).
        let expected = [1.0 - 0.01 * 0.3 / (0.3 + 1e-8), -2.0 + 0.01 * 4.0 / (4.0 + 1e-8), 0.5];
        for (a, b) in p.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_scalar_recurrence_over_several_steps() {
        let hyper = Adam { lr: 0.1, beta1: 0.8, beta2: 0.9, eps: 1e-6 };
        let grads = [0.5, -1.0, 2.0, 0.25];
        let mut p = Tensor::scalar(3.0);
        let mut state = AdamState::new([&p]);
        let (mut x, mut m, mut v) = (3.0f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            state.step(&hyper, &mut [&mut p], &[Tensor::scalar(g)]).unwrap();
            m = 0.8 * m + 0.2 * g;
            v = 0.9 * v + 0.1 * g * g;
            let n = (t + 1) as i32;
            x -= 0.1 * (m / (1.0 - 0.8f64.powi(n))) / ((v / (1.0 - 0.9f64.powi(n))).sqrt() + 1e-6);
            assert!((p.item() - x).abs() < 1e-14);
        }
        assert_eq!(state.t, 4);
    }

    #[test]
    fn mismatched_slots_rejected() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let mut state = AdamState::new([&p]);
        assert!(state.step(&Adam::new(0.1), &mut [&mut p], &[Tensor::vector(vec![1.0])]).is_err());
        assert!(state.step(&Adam::new(0.1), &mut [&mut p], &[]).is_err());
        assert_eq!(state.t, 0);
    }
}
