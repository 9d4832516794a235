//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 3e-4;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zero moments for parameters shaped like `params`; β1 = 0.9,
    /// β2 = 0.999, ε = 1e-8.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        AdamState {
            v: m.clone(),
            m,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update of every parameter in place.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: &[Tensor],
        lr: f64,
    ) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        let mut params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} params, {} grads, {} moments",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("param {:?}, grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (k, &gk) in g.data().iter().enumerate() {
                md[k] = b1 * md[k] + (1.0 - b1) * gk;
                vd[k] = b2 * vd[k] + (1.0 - b2) * gk * gk;
                let mhat = md[k] / c1;
                let vhat = vd[k] / c2;
                pd[k] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    state.step(params.iter_mut(), grads, lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::vector(&[1.0, -2.0])];
        let mut st = AdamState::new(&params);
        adam_step(&mut params, &[Tensor::zeros(&[2])], &mut st, 3e-4).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // step 1: mhat = g, vhat = g², so Δ = -lr·g/(|g| + ε)
        let g = 0.37;
        let lr = 3e-4;
        let mut params = vec![Tensor::vector(&[0.0])];
        let mut st = AdamState::new(&params);
        adam_step(&mut params, &[Tensor::vector(&[g])], &mut st, lr).unwrap();
        let expected = -lr * g / (g + 1e-8);
        assert!((params[0].data()[0] - expected).abs() < 1e-18);
        assert!((params[0].data()[0] + lr).abs() < 1e-10);
    }

    #[test]
    fn equal_gradients_get_equal_updates() {
        let mut params = vec![Tensor::vector(&[0.5, 0.5])];
        let mut st = AdamState::new(&params);
        for _ in 0..5 {
            adam_step(&mut params, &[Tensor::vector(&[0.2, 0.2])], &mut st, 1e-2).unwrap();
        }
        assert_eq!(params[0].data()[0], params[0].data()[1]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = vec![Tensor::vector(&[0.0, 0.0])];
        let mut st = AdamState::new(&params);
        assert!(adam_step(&mut params, &[Tensor::zeros(&[3])], &mut st, 1e-3).is_err());
    }

    #[test]
    fn second_moment_stays_non_negative() {
        let mut params = vec![Tensor::vector(&[0.0, 1.0, 2.0])];
        let mut st = AdamState::new(&params);
        for s in 0..10 {
            let g = Tensor::vector(&[-1.0 * s as f64, 0.5, -3.0]);
            adam_step(&mut params, &[g], &mut st, 1e-3).unwrap();
        }
        assert!(st.v[0].data().iter().all(|&v| v >= 0.0));
    }
}
