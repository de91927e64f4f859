use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::{Scalar, Tensor};

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

/// Adam with per-parameter moment state keyed by name.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T) -> Self {
        Self::with_betas(lr, T::lit(0.9), T::lit(0.999), T::lit(1e-8))
    }

    pub fn with_betas(lr: T, beta1: T, beta2: T, eps: T) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update to every named parameter from its `grad` field.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
    {
        for (name, p) in params {
            let g = p
                .grad()
                .ok_or_else(|| Error::Contract(format!("adam step on `{name}` without gradient")))?
                .to_vec();
            let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![T::zero(); g.len()],
                v: vec![T::zero(); g.len()],
                t: 0,
            });
            if st.m.len() != g.len() {
                return Err(Error::Shape(format!("parameter `{name}` changed size")));
            }
            st.t += 1;
            let bc1 = T::one() - self.beta1.powi(st.t);
            let bc2 = T::one() - self.beta2.powi(st.t);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                st.m[i] = self.beta1 * st.m[i] + (T::one() - self.beta1) * g[i];
                st.v[i] = self.beta2 * st.v[i] + (T::one() - self.beta2) * g[i] * g[i];
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                *x -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut adam = Adam::new(0.1f64);
        let mut p = Tensor::zeros(&[2]);
        let err = adam.step([("w", &mut p)]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let mut adam = Adam::new(0.1f64);
        let mut p = Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap();
        p.set_grad(vec![3.0, -0.5]).unwrap();
        adam.step([("w", &mut p)]).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut adam = Adam::new(0.05f64);
        let mut p = Tensor::from_f64(&[1], &[4.0]).unwrap();
        for _ in 0..500 {
            let x = p.data()[0];
            p.set_grad(vec![2.0 * (x - 1.5)]).unwrap();
            adam.step([("x", &mut p)]).unwrap();
        }
        assert!((p.data()[0] - 1.5).abs() < 1e-2);
    }
}
