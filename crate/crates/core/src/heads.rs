//! The shared attentive-pooling layer and shared dense classifier that both
//! teacher and student states flow through. One parameter object serves both
//! paths; sharing is structural, not a value constraint.

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use alloc::string::String;
use alloc::vec::Vec;

/// Attentive pooling: `score_i = query . tanh(H_i W + b)`, attention over
/// unmasked positions, output is the attention-weighted sum of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingParams {
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub query: Tensor,
}

impl PoolingParams {
    pub fn init(hidden_dim: usize, attn_dim: usize, rng: &mut Rng) -> Self {
        PoolingParams {
            proj_w: Tensor::randn(&[hidden_dim, attn_dim], crate::encoder::INIT_STD, rng)
                .with_grad(),
            proj_b: Tensor::zeros(&[attn_dim]).with_grad(),
            query: Tensor::randn(&[attn_dim], crate::encoder::INIT_STD, rng).with_grad(),
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        alloc::vec![
            (String::from("proj_w"), &self.proj_w),
            (String::from("proj_b"), &self.proj_b),
            (String::from("query"), &self.query),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        alloc::vec![
            (String::from("proj_w"), &mut self.proj_w),
            (String::from("proj_b"), &mut self.proj_b),
            (String::from("query"), &mut self.query),
        ]
    }

    pub fn lease(&self, tape: &mut Tape, prefix: &str, trainable: bool) -> Result<PoolVars> {
        let lease_one = |tape: &mut Tape, name: &str, t: &Tensor| -> Result<Var> {
            if trainable {
                tape.param(&alloc::format!("{prefix}.{name}"), t)
            } else {
                Ok(tape.input(t))
            }
        };
        Ok(PoolVars {
            proj_w: lease_one(tape, "proj_w", &self.proj_w)?,
            proj_b: lease_one(tape, "proj_b", &self.proj_b)?,
            query: lease_one(tape, "query", &self.query)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PoolVars {
    pub proj_w: Var,
    pub proj_b: Var,
    pub query: Var,
}

/// Single affine map from a pooled embedding to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DenseParams {
    pub fn init(hidden_dim: usize, num_classes: usize, rng: &mut Rng) -> Self {
        DenseParams {
            weight: Tensor::randn(&[hidden_dim, num_classes], crate::encoder::INIT_STD, rng)
                .with_grad(),
            bias: Tensor::zeros(&[num_classes]).with_grad(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        alloc::vec![
            (String::from("w"), &self.weight),
            (String::from("b"), &self.bias),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        alloc::vec![
            (String::from("w"), &mut self.weight),
            (String::from("b"), &mut self.bias),
        ]
    }

    pub fn lease(&self, tape: &mut Tape, prefix: &str, trainable: bool) -> Result<DenseVars> {
        let (weight, bias) = if trainable {
            (
                tape.param(&alloc::format!("{prefix}.w"), &self.weight)?,
                tape.param(&alloc::format!("{prefix}.b"), &self.bias)?,
            )
        } else {
            (tape.input(&self.weight), tape.input(&self.bias))
        };
        Ok(DenseVars { weight, bias })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

/// Pool a hidden-state matrix `[seq, hidden]` into one `[hidden]` vector.
/// Masked positions are excluded from the score softmax, so the attention
/// weights form a probability vector over the valid positions.
pub fn attentive_pool(tape: &mut Tape, pool: &PoolVars, h: Var, mask: &[bool]) -> Result<Var> {
    if !mask.iter().any(|&m| m) {
        return Err(CoreError::Input(
            "attentive_pool: every position is masked".into(),
        ));
    }
    let proj = tape.matmul(h, pool.proj_w)?;
    let proj = tape.add_row(proj, pool.proj_b)?;
    let act = tape.tanh(proj);
    let scores = tape.matvec(act, pool.query)?;
    let alpha = tape.masked_softmax(scores, mask)?;
    tape.weighted_sum_rows(alpha, h)
}

/// Class logits for a pooled embedding: `h W + b`.
pub fn classify(tape: &mut Tape, dense: &DenseVars, h: Var) -> Result<Var> {
    let scores = tape.vecmat(h, dense.weight)?;
    tape.add(scores, dense.bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn pool_output(pool: &PoolingParams, h: &Tensor, mask: &[bool]) -> Vec<f64> {
        let mut tape = Tape::new();
        let vars = pool.lease(&mut tape, "pool", true).unwrap();
        let hv = tape.input(h);
        let out = attentive_pool(&mut tape, &vars, hv, mask).unwrap();
        tape.value(out).data().to_vec()
    }

    #[test]
    fn identical_rows_pool_to_that_row() {
        let mut rng = Rng::new(1);
        let pool = PoolingParams::init(4, 2, &mut rng);
        let row = [0.3, -0.7, 1.1, 0.0];
        let h = Tensor::matrix(3, 4, row.iter().cycle().take(12).cloned().collect()).unwrap();
        let out = pool_output(&pool, &h, &[true; 3]);
        for (o, r) in out.iter().zip(&row) {
            assert!((o - r).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_evaluated_example() {
        // H = I2, proj = I2, bias = 0, query = [1, 0]:
        // scores = [tanh(1), 0], alpha = softmax(scores), out = alpha.
        let pool = PoolingParams {
            proj_w: Tensor::matrix(2, 2, alloc::vec![1.0, 0.0, 0.0, 1.0])
                .unwrap()
                .with_grad(),
            proj_b: Tensor::zeros(&[2]).with_grad(),
            query: Tensor::vector(alloc::vec![1.0, 0.0]).with_grad(),
        };
        let h = Tensor::matrix(2, 2, alloc::vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = pool_output(&pool, &h, &[true, true]);

        // independent scalar evaluation
        let s0 = libm::tanh(1.0);
        let e0 = libm::exp(s0);
        let alpha0 = e0 / (e0 + 1.0);
        assert!((out[0] - alpha0).abs() < 1e-12);
        assert!((out[1] - (1.0 - alpha0)).abs() < 1e-12);
        // frozen four-digit values
        assert!((out[0] - 0.6816).abs() < 5e-4);
        assert!((out[1] - 0.3184).abs() < 5e-4);
    }

    #[test]
    fn single_unmasked_row_is_returned_exactly() {
        let mut rng = Rng::new(3);
        let pool = PoolingParams::init(3, 5, &mut rng);
        let h = Tensor::matrix(3, 3, (0..9).map(|i| i as f64 * 0.37 - 1.0).collect()).unwrap();
        let out = pool_output(&pool, &h, &[false, true, false]);
        assert_eq!(out.as_slice(), h.row(1));
    }

    #[test]
    fn fully_masked_pool_is_an_input_error() {
        let mut rng = Rng::new(3);
        let pool = PoolingParams::init(2, 2, &mut rng);
        let mut tape = Tape::new();
        let vars = pool.lease(&mut tape, "pool", true).unwrap();
        let h = tape.input(&Tensor::matrix(2, 2, alloc::vec![1.0; 4]).unwrap());
        assert!(matches!(
            attentive_pool(&mut tape, &vars, h, &[false, false]),
            Err(CoreError::Input(_))
        ));
    }

    #[test]
    fn classify_constant_and_basis_cases() {
        let dense = DenseParams {
            weight: Tensor::matrix(2, 2, alloc::vec![2.0, 0.0, 5.0, -1.0])
                .unwrap()
                .with_grad(),
            bias: Tensor::vector(alloc::vec![0.5, -0.5]).with_grad(),
        };
        let mut tape = Tape::new();
        let vars = dense.lease(&mut tape, "dense", true).unwrap();

        // zero weight behaves as a constant map onto the bias
        let zero_dense = DenseParams {
            weight: Tensor::zeros(&[2, 2]).with_grad(),
            bias: Tensor::vector(alloc::vec![0.7, 0.9]).with_grad(),
        };
        let zvars = zero_dense.lease(&mut tape, "zd", true).unwrap();
        let h = tape.input(&Tensor::vector(alloc::vec![13.0, -4.0]));
        let logits = classify(&mut tape, &zvars, h).unwrap();
        assert_eq!(tape.value(logits).data(), &[0.7, 0.9]);

        // basis vector picks out a weight row
        let e1 = tape.input(&Tensor::vector(alloc::vec![1.0, 0.0]));
        let logits = classify(&mut tape, &vars, e1).unwrap();
        assert_eq!(tape.value(logits).data(), &[2.5, -0.5]);
    }

    #[test]
    fn classify_gradient_matches_finite_differences() {
        let mut rng = Rng::new(17);
        let eval = |dense: &DenseParams| -> (f64, Tensor) {
            let mut tape = Tape::new();
            let vars = dense.lease(&mut tape, "dense", true).unwrap();
            let h = tape.input(&Tensor::vector(alloc::vec![0.4, -0.2, 0.9]));
            let logits = classify(&mut tape, &vars, h).unwrap();
            let loss = tape.ce_one_hot(logits, 1).unwrap();
            let grads = tape.backward(loss).unwrap();
            (tape.scalar_value(loss), grads.get("dense.w").unwrap().clone())
        };
        let dense = DenseParams::init(3, 2, &mut rng);
        let (_, analytic) = eval(&dense);
        let h = 1e-5;
        for j in 0..analytic.len() {
            let mut plus = dense.clone();
            plus.weight.data_mut()[j] += h;
            let mut minus = dense.clone();
            minus.weight.data_mut()[j] -= h;
            let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            assert!(
                crate::check::rel_err(analytic.data()[j], fd) < 1e-4,
                "weight coord {j}"
            );
        }
    }

    proptest! {
        // pooled output stays inside the convex hull of the rows
        #[test]
        fn pool_output_in_convex_hull(values in proptest::collection::vec(-3.0f64..3.0, 12)) {
            let mut rng = Rng::new(11);
            let pool = PoolingParams::init(3, 4, &mut rng);
            let h = Tensor::matrix(4, 3, values).unwrap();
            let out = pool_output(&pool, &h, &[true; 4]);
            for j in 0..3 {
                let col: Vec<f64> = (0..4).map(|i| h.at(i, j)).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out[j] >= lo - 1e-9 && out[j] <= hi + 1e-9);
            }
        }
    }
}
