use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{layout_of, uniform_block, Block, Cotangent, InputWindow, Predictor};
use crate::error::{Error, Result};
use crate::linalg::{matvec_acc, matvec_t_acc, outer_acc};

/// One tanh hidden layer over the whole window, flattened most-recent-first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub n: usize,
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
}

struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    end: usize,
}

impl MlpModel {
    pub fn new(n: usize, d_in: usize, hidden: usize, d_out: usize) -> Self {
        Self {
            n,
            d_in,
            hidden,
            d_out,
        }
    }

    fn fan_in(&self) -> usize {
        self.n * self.d_in
    }

    fn offsets(&self) -> Offsets {
        let w1 = 0;
        let b1 = w1 + self.hidden * self.fan_in();
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.d_out * self.hidden;
        Offsets {
            w1,
            b1,
            w2,
            b2,
            end: b2 + self.d_out,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d_in == 0 || self.hidden == 0 || self.d_out == 0 {
            return Err(Error::config("model.architecture", "mlp dimensions must be positive"));
        }
        if self.d_out > self.d_in {
            return Err(Error::config("model.architecture.d_out", "must not exceed the measurement dimension"));
        }
        Ok(())
    }

    pub(crate) fn init_values(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut v = Vec::new();
        uniform_block(rng, self.hidden * self.fan_in(), self.fan_in(), &mut v);
        uniform_block(rng, self.hidden, self.fan_in(), &mut v);
        uniform_block(rng, self.d_out * self.hidden, self.hidden, &mut v);
        uniform_block(rng, self.d_out, self.hidden, &mut v);
        v
    }

    fn hidden_layer(&self, theta: &[f64], u: &[f64]) -> Vec<f64> {
        let o = self.offsets();
        let mut a = theta[o.b1..o.w2].to_vec();
        matvec_acc(&theta[o.w1..o.b1], self.hidden, u.len(), u, &mut a);
        a.iter_mut().for_each(|v| *v = v.tanh());
        a
    }
}

fn flatten_window(x: &InputWindow) -> Vec<f64> {
    x.steps.iter().flatten().copied().collect()
}

impl Predictor for MlpModel {
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
        layout_of(&[
            ("w1", self.hidden * self.fan_in()),
            ("b1", self.hidden),
            ("w2", self.d_out * self.hidden),
            ("b2", self.d_out),
        ])
    }

    fn forward(&self, theta: &[f64], x: &InputWindow) -> Vec<f64> {
        let o = self.offsets();
        let h = self.hidden_layer(theta, &flatten_window(x));
        let mut y = theta[o.b2..o.end].to_vec();
        matvec_acc(&theta[o.w2..o.b2], self.d_out, self.hidden, &h, &mut y);
        y
    }

    fn backward(&self, theta: &[f64], x: &InputWindow, seed: &[f64]) -> Result<Cotangent> {
        let o = self.offsets();
        let u = flatten_window(x);
        let h = self.hidden_layer(theta, &u);
        let mut cot = Cotangent::zeros(theta.len(), x);

        outer_acc(&mut cot.params[o.w2..o.b2], seed, &h);
        cot.params[o.b2..o.end].copy_from_slice(seed);

        let mut h_bar = vec![0.0; self.hidden];
        matvec_t_acc(&theta[o.w2..o.b2], self.d_out, self.hidden, seed, &mut h_bar);
        let a_bar: Vec<f64> = h_bar.iter().zip(&h).map(|(g, t)| g * (1.0 - t * t)).collect();

        outer_acc(&mut cot.params[o.w1..o.b1], &a_bar, &u);
        cot.params[o.b1..o.w2].copy_from_slice(&a_bar);

        let mut u_bar = vec![0.0; u.len()];
        matvec_t_acc(&theta[o.w1..o.b1], self.hidden, u.len(), &a_bar, &mut u_bar);
        for (k, chunk) in u_bar.chunks(self.d_in).enumerate() {
            cot.window[k].copy_from_slice(chunk);
        }
        Ok(cot)
    }
}
