//! Adam with per-tensor state keyed by parameter name.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::ParamGroup;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    state: HashMap<String, Moments>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.state.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.state.is_empty()
    }

    /// Updates every tensor of `group` named in `grads`; others are untouched.
    pub fn step(&mut self, group: &mut dyn ParamGroup, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        let mut seen = 0;
        for (name, param) in group.named_mut() {
            let Some(g) = grads.get(&name) else { continue };
            if g.shape() != param.shape() {
                return Err(Error::Contract(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    param.shape()
                )));
            }
            seen += 1;
            let st = self.state.entry(name).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                step: 0,
            });
            st.step += 1;
            let c1 = 1.0 - BETA1.powi(st.step);
            let c2 = 1.0 - BETA2.powi(st.step);
            for (((p, &gi), m), v) in param.data_mut().iter_mut().zip(g.data()).zip(&mut st.m).zip(&mut st.v) {
                *m = BETA1 * *m + (1.0 - BETA1) * gi;
                *v = BETA2 * *v + (1.0 - BETA2) * gi * gi;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
            }
        }
        if seen != grads.len() {
            return Err(Error::Contract("gradient names do not match the parameter group".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct One(Tensor);

    impl ParamGroup for One {
        fn named(&self) -> Vec<(String, &Tensor)> {
            vec![("x".into(), &self.0)]
        }
        fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
            vec![("x".into(), &mut self.0)]
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = One(Tensor::vector(vec![1.0, -1.0]));
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), Tensor::vector(vec![3.0, -0.5]));
        let mut adam = Adam::new();
        adam.step(&mut p, &grads, 0.1).unwrap();
        assert!((p.0.data()[0] - 0.9).abs() < 1e-8);
        assert!((p.0.data()[1] + 0.9).abs() < 1e-8);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = One(Tensor::vector(vec![5.0]));
        let mut adam = Adam::new();
        for _ in 0..2000 {
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), Tensor::vector(vec![2.0 * (p.0.data()[0] - 2.0)]));
            adam.step(&mut p, &grads, 0.05).unwrap();
        }
        assert!((p.0.data()[0] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn unknown_gradient_name_is_rejected() {
        let mut p = One(Tensor::vector(vec![0.0]));
        let mut grads = BTreeMap::new();
        grads.insert("y".to_string(), Tensor::vector(vec![1.0]));
        assert!(Adam::new().step(&mut p, &grads, 0.1).is_err());
    }
}
