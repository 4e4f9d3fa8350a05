//! Per-domain linear forecasting heads.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{uniform_weight, ParamGroup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub domain_id: usize,
    /// `(rows · D) × F`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl HeadParams {
    pub fn init(domain_id: usize, rows: usize, d_model: usize, horizon: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            domain_id,
            weight: uniform_weight(rng, rows * d_model, horizon),
            bias: Tensor::zeros(&[horizon]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn horizon(&self) -> usize {
        self.weight.cols()
    }

    pub fn same_shape(&self, other: &HeadParams) -> bool {
        self.weight.shape() == other.weight.shape()
    }
}

impl ParamGroup for HeadParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        vec![("head.weight".to_string(), &self.weight), ("head.bias".to_string(), &self.bias)]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("head.weight".to_string(), &mut self.weight), ("head.bias".to_string(), &mut self.bias)]
    }
}

/// Flattens `R` row-major and maps it to a `1 × F` forecast.
pub fn predict(g: &mut Graph<'_>, reps: Var, weight: Var, bias: Var) -> Result<Var> {
    let flat_len = g.value(reps).len();
    let expected = g.value(weight).rows();
    if flat_len != expected {
        return Err(Error::Contract(format!(
            "head expects {expected} flattened features, representations have {flat_len}"
        )));
    }
    let flat = g.flatten(reps)?;
    let y = g.matmul(flat, weight)?;
    Ok(g.add_row(y, bias)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn run(reps: &Tensor, head: &HeadParams) -> Result<Tensor> {
        let mut g = Graph::new();
        let (r, w, b) = (g.constant(reps), g.constant(&head.weight), g.constant(&head.bias));
        let y = predict(&mut g, r, w, b)?;
        Ok(g.value(y).clone())
    }

    #[test]
    fn zero_weight_returns_bias() {
        let head = HeadParams { domain_id: 0, weight: Tensor::zeros(&[6, 3]), bias: Tensor::vector(vec![1.0, -2.0, 0.5]) };
        let reps = Tensor::full(&[2, 3], 7.0);
        assert_eq!(run(&reps, &head).unwrap().data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn one_hot_weight_reads_flat_position() {
        let reps = Tensor::matrix(3, 4, (0..12).map(|v| v as f64).collect()).unwrap();
        for k in 0..12 {
            let mut w = Tensor::zeros(&[12, 1]);
            w.data_mut()[k] = 1.0;
            let head = HeadParams { domain_id: 0, weight: w, bias: Tensor::zeros(&[1]) };
            assert_eq!(run(&reps, &head).unwrap().data(), &[reps.data()[k]]);
        }
    }

    #[test]
    fn shapes_for_prompted_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = HeadParams::init(0, 12 + 6, 64, 24, &mut rng);
        assert_eq!(head.weight.shape(), &[1152, 24]);
        let reps = Tensor::zeros(&[18, 64]);
        assert_eq!(run(&reps, &head).unwrap().shape(), &[1, 24]);
        let wrong = Tensor::zeros(&[17, 64]);
        assert!(matches!(run(&wrong, &head), Err(Error::Contract(_))));
        let other = HeadParams::init(3, 18, 64, 24, &mut rng);
        assert!(head.same_shape(&other));
    }
}
