//! Fully connected update functions used by both GNNs.
//!
//! An `Mlp` is a chain of linear layers with ReLU between them; a one-layer
//! MLP with `relu_output` applies the activation to its single layer.
//! Weights are stored (out, in); inputs are row-per-node matrices.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gnn::params::ParamSet;
use crate::gnn::tape::{Tape, Var};

/// Parameter-slot layout of one MLP inside a `ParamSet`.
#[derive(Debug, Clone)]
pub struct Mlp {
    /// (weight slot, bias slot) per layer.
    pub layers: Vec<(usize, usize)>,
    /// Apply ReLU after the final layer too.
    pub relu_output: bool,
}

impl Mlp {
    /// Register a fresh MLP in `params` with uniform(−1/√fan_in, 1/√fan_in)
    /// initialization.
    pub fn register(
        params: &mut ParamSet,
        name: &str,
        dims: &[usize],
        relu_output: bool,
        rng: &mut ChaCha8Rng,
    ) -> Mlp {
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight =
                Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-bound..bound));
            let bias = Array2::from_shape_fn((1, fan_out), |_| rng.gen_range(-bound..bound));
            let ws = params.push(&format!("{name}.w{i}"), weight);
            let bs = params.push(&format!("{name}.b{i}"), bias);
            layers.push((ws, bs));
        }
        Mlp {
            layers,
            relu_output,
        }
    }

    pub fn input_dim(&self, params: &ParamSet) -> usize {
        params.value(self.layers[0].0).ncols()
    }

    pub fn output_dim(&self, params: &ParamSet) -> usize {
        params.value(self.layers[self.layers.len() - 1].0).nrows()
    }
}

/// Tape forward pass: rows of `input` are independent samples.
pub fn mlp_forward(tape: &mut Tape, params: &ParamSet, mlp: &Mlp, input: Var) -> Result<Var> {
    let mut cur = input;
    let expected = mlp.input_dim(params);
    if tape.value(input).ncols() != expected {
        return Err(Error::ShapeMismatch {
            context: "mlp input",
            expected,
            found: tape.value(input).ncols(),
        });
    }
    for (i, (ws, bs)) in mlp.layers.iter().enumerate() {
        let w = tape.param(*ws, params.value(*ws).clone());
        let b = tape.param(*bs, params.value(*bs).clone());
        let lin = tape.matmul_nt(cur, w);
        cur = tape.add_row(lin, b);
        if i + 1 < mlp.layers.len() || mlp.relu_output {
            cur = tape.relu(cur);
        }
    }
    Ok(cur)
}

/// Tape-free forward pass for inference.
pub fn mlp_forward_plain(params: &ParamSet, mlp: &Mlp, input: &Array2<f64>) -> Array2<f64> {
    let mut cur = input.clone();
    for (i, (ws, bs)) in mlp.layers.iter().enumerate() {
        let w = params.value(*ws);
        let b = params.value(*bs);
        cur = cur.dot(&w.t()) + b;
        if i + 1 < mlp.layers.len() || mlp.relu_output {
            cur.mapv_inplace(|v| v.max(0.0));
        }
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn identity_weights_pass_nonnegative_features() {
        let mut params = ParamSet::new();
        let w = params.push("m.w0", Array2::eye(3));
        let b = params.push("m.b0", Array2::zeros((1, 3)));
        let mlp = Mlp {
            layers: vec![(w, b)],
            relu_output: true,
        };
        let x = array![[0.5, 0.0, 2.0]];
        let y = mlp_forward_plain(&params, &mlp, &x);
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut params = ParamSet::new();
        let w = params.push("m.w0", Array2::zeros((2, 3)));
        let b = params.push("m.b0", array![[0.7, -0.4]]);
        let mlp = Mlp {
            layers: vec![(w, b)],
            relu_output: false,
        };
        let y = mlp_forward_plain(&params, &mlp, &array![[1.0, 2.0, 3.0]]);
        assert_eq!(y, array![[0.7, -0.4]]);
    }

    #[test]
    fn tape_and_plain_forward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        let mlp = Mlp::register(&mut params, "f", &[4, 8, 8], false, &mut rng);
        let x = Array2::from_shape_fn((5, 4), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let plain = mlp_forward_plain(&params, &mlp, &x);
        let mut tape = Tape::new();
        let xin = tape.constant(x.clone());
        let out = mlp_forward(&mut tape, &params, &mlp, xin).unwrap();
        // Reference: straightforward re-implementation.
        let mut cur = x;
        for (i, (ws, bs)) in mlp.layers.iter().enumerate() {
            cur = cur.dot(&params.value(*ws).t()) + params.value(*bs);
            if i + 1 < mlp.layers.len() {
                cur.mapv_inplace(|v| v.max(0.0));
            }
        }
        let max_err = (tape.value(out) - &plain)
            .iter()
            .chain((tape.value(out) - &cur).iter())
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        assert!(max_err == 0.0);
    }

    #[test]
    fn rejects_wrong_input_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = ParamSet::new();
        let mlp = Mlp::register(&mut params, "f", &[4, 2], false, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Array2::zeros((1, 3)));
        assert!(mlp_forward(&mut tape, &params, &mlp, x).is_err());
    }
}
