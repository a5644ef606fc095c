use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{layout_of, uniform_block, Block, Cotangent, InputWindow, Predictor};
use crate::error::{Error, Result};
use crate::linalg::{matvec_acc, matvec_t_acc, outer_acc};

/// `ŷ = W x_t + b` over the most recent measurement only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub n: usize,
    pub d_in: usize,
    pub d_out: usize,
    #[serde(default = "default_bias")]
    pub bias: bool,
}

fn default_bias() -> bool {
    true
}

impl LinearModel {
    pub fn new(n: usize, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            n,
            d_in,
            d_out,
            bias,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d_in == 0 || self.d_out == 0 {
            return Err(Error::config("model.architecture", "linear dimensions must be positive"));
        }
        if self.d_out > self.d_in {
            return Err(Error::config("model.architecture.d_out", "must not exceed the measurement dimension"));
        }
        Ok(())
    }

    pub(crate) fn init_values(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut v = Vec::new();
        uniform_block(rng, self.d_out * self.d_in, self.d_in, &mut v);
        if self.bias {
            uniform_block(rng, self.d_out, self.d_in, &mut v);
        }
        v
    }
}

impl Predictor for LinearModel {
    fn input_dim(&self) -> usize {
        self.d_in
    }

    fn output_dim(&self) -> usize {
        self.d_out
    }

    fn window_len(&self) -> usize {
        self.n
    }

    fn layout(&self) -> Vec<Block> {
        let bias = if self.bias { self.d_out } else { 0 };
        layout_of(&[("weight", self.d_out * self.d_in), ("bias", bias)])
    }

    fn forward(&self, theta: &[f64], x: &InputWindow) -> Vec<f64> {
        let nw = self.d_out * self.d_in;
        let mut y = if self.bias {
            theta[nw..nw + self.d_out].to_vec()
        } else {
            vec![0.0; self.d_out]
        };
        matvec_acc(&theta[..nw], self.d_out, self.d_in, x.newest(), &mut y);
        y
    }

    fn is_linear_in_params(&self) -> bool {
        true
    }

    fn backward(&self, theta: &[f64], x: &InputWindow, seed: &[f64]) -> Result<Cotangent> {
        let nw = self.d_out * self.d_in;
        let mut cot = Cotangent::zeros(theta.len(), x);
        outer_acc(&mut cot.params[..nw], seed, x.newest());
        if self.bias {
            cot.params[nw..nw + self.d_out].copy_from_slice(seed);
        }
        matvec_t_acc(&theta[..nw], self.d_out, self.d_in, seed, &mut cot.window[0]);
        Ok(cot)
    }
}
