//! Toy encoder–decoder–classifier.
//!
//! The encoder is a single GRU cell run over the window from oldest to
//! newest measurement, starting from a zero state. Its final state `h`
//! feeds
//!
//! * a linear decoder predicting the displacement of the next measurement,
//!   `ŷ = x_t[..d_out] + W_d h + b_d`, and
//! * a two-layer classifier, `logits = W_2 tanh(W_1 h + b_1) + b_2`.
//!
//! GRU convention:
//!
//! ```text
//! z  = σ(W_z x + U_z h + b_z)
//! r  = σ(W_r x + U_r h + b_r)
//! c  = tanh(W_h x + U_h (r ⊙ h) + b_h)
//! h' = (1 - z) ⊙ c + z ⊙ h
//! ```

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{layout_of, uniform_block, Block, Cotangent, InputWindow, Predictor};
use crate::error::{Error, Result};
use crate::linalg::{matvec_acc, matvec_t_acc, outer_acc, sigmoid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentModel {
    pub n: usize,
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
    /// Number of intent classes; 0 drops the classifier head.
    #[serde(default)]
    pub classes: usize,
    #[serde(default)]
    pub classifier_hidden: usize,
}

pub(crate) const MAX_HIDDEN: usize = 16;

#[derive(Clone, Copy)]
struct Offsets {
    wz: usize,
    wr: usize,
    wh: usize,
    uz: usize,
    ur: usize,
    uh: usize,
    bz: usize,
    br: usize,
    bh: usize,
    dw: usize,
    db: usize,
    c1: usize,
    cb1: usize,
    c2: usize,
    cb2: usize,
    end: usize,
}

struct Trace {
    /// `h[s]` is the state before consuming chronological step `s`.
    h: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
}

impl Trace {
    fn last(&self) -> &[f64] {
        self.h.last().expect("trace holds at least the initial state")
    }
}

impl RecurrentModel {
    pub fn new(
        n: usize,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        classes: usize,
        classifier_hidden: usize,
    ) -> Self {
        Self {
            n,
            d_in,
            hidden,
            d_out,
            classes,
            classifier_hidden,
        }
    }

    fn offsets(&self) -> Offsets {
        let (h, d, o) = (self.hidden, self.d_in, self.d_out);
        let (k, ch) = if self.classes > 0 {
            (self.classes, self.classifier_hidden)
        } else {
            (0, 0)
        };
        let wz = 0;
        let wr = wz + h * d;
        let wh = wr + h * d;
        let uz = wh + h * d;
        let ur = uz + h * h;
        let uh = ur + h * h;
        let bz = uh + h * h;
        let br = bz + h;
        let bh = br + h;
        let dw = bh + h;
        let db = dw + o * h;
        let c1 = db + o;
        let cb1 = c1 + ch * h;
        let c2 = cb1 + ch;
        let cb2 = c2 + k * ch;
        Offsets {
            wz,
            wr,
            wh,
            uz,
            ur,
            uh,
            bz,
            br,
            bh,
            dw,
            db,
            c1,
            cb1,
            c2,
            cb2,
            end: cb2 + k,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d_in == 0 || self.hidden == 0 || self.d_out == 0 {
            return Err(Error::config("model.architecture", "recurrent dimensions must be positive"));
        }
        if self.hidden > MAX_HIDDEN {
            return Err(Error::config(
                "model.architecture.hidden",
                format!("toy encoder supports at most {MAX_HIDDEN} hidden units"),
            ));
        }
        if self.d_out > self.d_in {
            return Err(Error::config("model.architecture.d_out", "must not exceed the measurement dimension"));
        }
        if self.classes == 1 {
            return Err(Error::config("model.architecture.classes", "need 0 or at least 2 classes"));
        }
        if self.classes > 0 && self.classifier_hidden == 0 {
            return Err(Error::config(
                "model.architecture.classifier_hidden",
                "classifier needs a hidden layer",
            ));
        }
        Ok(())
    }

    pub(crate) fn init_values(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let (h, d, o) = (self.hidden, self.d_in, self.d_out);
        let mut v = Vec::with_capacity(self.offsets().end);
        for _ in 0..3 {
            uniform_block(rng, h * d, h, &mut v);
        }
        for _ in 0..3 {
            uniform_block(rng, h * h, h, &mut v);
        }
        for _ in 0..3 {
            uniform_block(rng, h, h, &mut v);
        }
        uniform_block(rng, o * h, h, &mut v);
        uniform_block(rng, o, h, &mut v);
        if self.classes > 0 {
            let ch = self.classifier_hidden;
            uniform_block(rng, ch * h, h, &mut v);
            uniform_block(rng, ch, h, &mut v);
            uniform_block(rng, self.classes * ch, ch, &mut v);
            uniform_block(rng, self.classes, ch, &mut v);
        }
        v
    }

    fn encode(&self, theta: &[f64], x: &InputWindow) -> Trace {
        let o = self.offsets();
        let (hd, d) = (self.hidden, self.d_in);
        let n = x.len();
        let mut trace = Trace {
            h: Vec::with_capacity(n + 1),
            z: Vec::with_capacity(n),
            r: Vec::with_capacity(n),
            c: Vec::with_capacity(n),
        };
        let mut h = vec![0.0; hd];
        for s in 0..n {
            let xs = &x.steps[n - 1 - s];

            let mut z = theta[o.bz..o.br].to_vec();
            matvec_acc(&theta[o.wz..o.wr], hd, d, xs, &mut z);
            matvec_acc(&theta[o.uz..o.ur], hd, hd, &h, &mut z);
            z.iter_mut().for_each(|v| *v = sigmoid(*v));

            let mut r = theta[o.br..o.bh].to_vec();
            matvec_acc(&theta[o.wr..o.wh], hd, d, xs, &mut r);
            matvec_acc(&theta[o.ur..o.uh], hd, hd, &h, &mut r);
            r.iter_mut().for_each(|v| *v = sigmoid(*v));

            let rh: Vec<f64> = r.iter().zip(&h).map(|(a, b)| a * b).collect();
            let mut c = theta[o.bh..o.dw].to_vec();
            matvec_acc(&theta[o.wh..o.uz], hd, d, xs, &mut c);
            matvec_acc(&theta[o.uh..o.bz], hd, hd, &rh, &mut c);
            c.iter_mut().for_each(|v| *v = v.tanh());

            let next: Vec<f64> = (0..hd).map(|i| (1.0 - z[i]) * c[i] + z[i] * h[i]).collect();
            trace.h.push(std::mem::replace(&mut h, next));
            trace.z.push(z);
            trace.r.push(r);
            trace.c.push(c);
        }
        trace.h.push(h);
        trace
    }

    /// Back-propagates `h_bar` (adjoint of the final state) through the
    /// unrolled encoder, accumulating into `cot`.
    fn encoder_backward(
        &self,
        theta: &[f64],
        x: &InputWindow,
        trace: &Trace,
        mut h_bar: Vec<f64>,
        cot: &mut Cotangent,
    ) {
        let o = self.offsets();
        let (hd, d) = (self.hidden, self.d_in);
        let n = x.len();
        let g = &mut cot.params;
        for s in (0..n).rev() {
            let xs = &x.steps[n - 1 - s];
            let (h, z, r, c) = (&trace.h[s], &trace.z[s], &trace.r[s], &trace.c[s]);

            let mut prev_bar: Vec<f64> = (0..hd).map(|i| h_bar[i] * z[i]).collect();
            let ac_bar: Vec<f64> = (0..hd)
                .map(|i| h_bar[i] * (1.0 - z[i]) * (1.0 - c[i] * c[i]))
                .collect();
            let az_bar: Vec<f64> = (0..hd)
                .map(|i| h_bar[i] * (h[i] - c[i]) * z[i] * (1.0 - z[i]))
                .collect();

            let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
            outer_acc(&mut g[o.wh..o.uz], &ac_bar, xs);
            outer_acc(&mut g[o.uh..o.bz], &ac_bar, &rh);
            g[o.bh..o.dw].iter_mut().zip(&ac_bar).for_each(|(a, b)| *a += b);

            let mut rh_bar = vec![0.0; hd];
            matvec_t_acc(&theta[o.uh..o.bz], hd, hd, &ac_bar, &mut rh_bar);
            let ar_bar: Vec<f64> = (0..hd)
                .map(|i| rh_bar[i] * h[i] * r[i] * (1.0 - r[i]))
                .collect();
            for i in 0..hd {
                prev_bar[i] += rh_bar[i] * r[i];
            }

            outer_acc(&mut g[o.wz..o.wr], &az_bar, xs);
            outer_acc(&mut g[o.uz..o.ur], &az_bar, h);
            g[o.bz..o.br].iter_mut().zip(&az_bar).for_each(|(a, b)| *a += b);
            matvec_t_acc(&theta[o.uz..o.ur], hd, hd, &az_bar, &mut prev_bar);

            outer_acc(&mut g[o.wr..o.wh], &ar_bar, xs);
            outer_acc(&mut g[o.ur..o.uh], &ar_bar, h);
            g[o.br..o.bh].iter_mut().zip(&ar_bar).for_each(|(a, b)| *a += b);
            matvec_t_acc(&theta[o.ur..o.uh], hd, hd, &ar_bar, &mut prev_bar);

            let x_bar = &mut cot.window[n - 1 - s];
            matvec_t_acc(&theta[o.wh..o.uz], hd, d, &ac_bar, x_bar);
            matvec_t_acc(&theta[o.wz..o.wr], hd, d, &az_bar, x_bar);
            matvec_t_acc(&theta[o.wr..o.wh], hd, d, &ar_bar, x_bar);

            h_bar = prev_bar;
        }
    }

    fn classifier_hidden_layer(&self, theta: &[f64], h: &[f64]) -> Vec<f64> {
        let o = self.offsets();
        let mut a = theta[o.cb1..o.c2].to_vec();
        matvec_acc(&theta[o.c1..o.cb1], self.classifier_hidden, self.hidden, h, &mut a);
        a.iter_mut().for_each(|v| *v = v.tanh());
        a
    }
}

impl Predictor for RecurrentModel {
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
        let (h, d, o) = (self.hidden, self.d_in, self.d_out);
        let (k, ch) = if self.classes > 0 {
            (self.classes, self.classifier_hidden)
        } else {
            (0, 0)
        };
        layout_of(&[
            ("enc.w_z", h * d),
            ("enc.w_r", h * d),
            ("enc.w_h", h * d),
            ("enc.u_z", h * h),
            ("enc.u_r", h * h),
            ("enc.u_h", h * h),
            ("enc.b_z", h),
            ("enc.b_r", h),
            ("enc.b_h", h),
            ("dec.w", o * h),
            ("dec.b", o),
            ("cls.w1", ch * h),
            ("cls.b1", ch),
            ("cls.w2", k * ch),
            ("cls.b2", k),
        ])
    }

    fn forward(&self, theta: &[f64], x: &InputWindow) -> Vec<f64> {
        let o = self.offsets();
        let trace = self.encode(theta, x);
        let mut y: Vec<f64> = x.newest()[..self.d_out]
            .iter()
            .zip(&theta[o.db..o.c1])
            .map(|(a, b)| a + b)
            .collect();
        matvec_acc(&theta[o.dw..o.db], self.d_out, self.hidden, trace.last(), &mut y);
        y
    }

    fn backward(&self, theta: &[f64], x: &InputWindow, seed: &[f64]) -> Result<Cotangent> {
        let o = self.offsets();
        let trace = self.encode(theta, x);
        let mut cot = Cotangent::zeros(theta.len(), x);
        outer_acc(&mut cot.params[o.dw..o.db], seed, trace.last());
        cot.params[o.db..o.c1].copy_from_slice(seed);
        cot.window[0][..self.d_out].copy_from_slice(seed);
        let mut h_bar = vec![0.0; self.hidden];
        matvec_t_acc(&theta[o.dw..o.db], self.d_out, self.hidden, seed, &mut h_bar);
        self.encoder_backward(theta, x, &trace, h_bar, &mut cot);
        Ok(cot)
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn intent_logits(&self, theta: &[f64], x: &InputWindow) -> Result<Vec<f64>> {
        if self.classes == 0 {
            return Err(Error::Unsupported("model has no classifier head".into()));
        }
        let o = self.offsets();
        let trace = self.encode(theta, x);
        let a = self.classifier_hidden_layer(theta, trace.last());
        let mut logits = theta[o.cb2..o.end].to_vec();
        matvec_acc(&theta[o.c2..o.cb2], self.classes, self.classifier_hidden, &a, &mut logits);
        Ok(logits)
    }

    fn intent_backward(&self, theta: &[f64], x: &InputWindow, seed: &[f64]) -> Result<Cotangent> {
        if self.classes == 0 {
            return Err(Error::Unsupported("model has no classifier head".into()));
        }
        let o = self.offsets();
        let ch = self.classifier_hidden;
        let trace = self.encode(theta, x);
        let a = self.classifier_hidden_layer(theta, trace.last());
        let mut cot = Cotangent::zeros(theta.len(), x);
        outer_acc(&mut cot.params[o.c2..o.cb2], seed, &a);
        cot.params[o.cb2..o.end].copy_from_slice(seed);
        let mut a_bar = vec![0.0; ch];
        matvec_t_acc(&theta[o.c2..o.cb2], self.classes, ch, seed, &mut a_bar);
        let pre_bar: Vec<f64> = a_bar.iter().zip(&a).map(|(g, t)| g * (1.0 - t * t)).collect();
        outer_acc(&mut cot.params[o.c1..o.cb1], &pre_bar, trace.last());
        cot.params[o.cb1..o.c2].copy_from_slice(&pre_bar);
        let mut h_bar = vec![0.0; self.hidden];
        matvec_t_acc(&theta[o.c1..o.cb1], ch, self.hidden, &pre_bar, &mut h_bar);
        self.encoder_backward(theta, x, &trace, h_bar, &mut cot);
        Ok(cot)
    }
}
