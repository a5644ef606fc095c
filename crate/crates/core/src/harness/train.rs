use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::TrainConfig;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::linalg::softmax;
use crate::model::{rollout, rollout_vjp, Model, Predictor};
use crate::optimizers::{adam_step, AdamHyper, Adapter};

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean minibatch loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Minibatch Adam on the mean rollout loss
/// `(1/(m·d_out)) ‖Ŷ - Y‖²`, plus `ce_weight` times the intent cross-entropy
/// when the model has a classifier head and the samples carry labels.
pub fn offline_train(
    init: &Model,
    samples: &[Sample],
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if config.batch == 0 {
        return Err(Error::config("train.batch", "must be positive"));
    }
    let arch = &init.architecture;
    let use_ce = arch.num_classes() > 0 && config.ce_weight > 0.0 && samples.iter().all(|s| s.intent.is_some());
    let hyper = AdamHyper {
        lr: config.lr,
        ..AdamHyper::default()
    };
    let mut state = Adapter::Adam(hyper.clone()).init_state(init.params.values());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut loss_trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in order.chunks(config.batch) {
            let theta: Vec<f64> = state.theta.iter().copied().collect();
            let parts: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| sample_loss_grad(arch, &theta, &samples[i], use_ce, config.ce_weight))
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grad: DVector<f64> = DVector::zeros(theta.len());
            let mut loss = 0.0_f64;
            for (l, g) in parts.into_iter() {
                loss += l * scale;
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += b * scale);
            }
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    message: format!("non-finite loss or gradient (loss = {loss})"),
                });
            }
            state = adam_step(&state, &grad, &hyper);
            epoch_loss += loss;
            batches += 1;
        }
        loss_trace.push(epoch_loss / batches as f64);
    }
    let model = Model {
        architecture: arch.clone(),
        seed: Some(seed),
        params: init.params.with_values(state.theta.iter().copied().collect())?,
    };
    Ok(TrainOutcome { model, loss_trace })
}

fn sample_loss_grad<P: Predictor + ?Sized>(
    model: &P,
    theta: &[f64],
    sample: &Sample,
    use_ce: bool,
    ce_weight: f64,
) -> Result<(f64, Vec<f64>)> {
    let d_out = model.output_dim();
    let m = sample.y.len();
    let pred = rollout(model, theta, &sample.x, m)?;
    let norm = 1.0 / (m * d_out) as f64;
    let mut loss = 0.0;
    let adjoint: Vec<Vec<f64>> = pred
        .steps
        .iter()
        .zip(&sample.y.steps)
        .map(|(p, y)| {
            p.iter()
                .zip(y)
                .map(|(a, b)| {
                    let r = a - b;
                    loss += r * r * norm;
                    2.0 * r * norm
                })
                .collect()
        })
        .collect();
    let mut grad = rollout_vjp(model, theta, &sample.x, &adjoint)?;
    if use_ce {
        let label = sample.intent.expect("checked by caller");
        let probs = softmax(&model.intent_logits(theta, &sample.x)?);
        loss -= ce_weight * probs[label].max(f64::MIN_POSITIVE).ln();
        let seed: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(k, p)| ce_weight * (p - f64::from(u8::from(k == label))))
            .collect();
        let cot = model.intent_backward(theta, &sample.x, &seed)?;
        grad.iter_mut().zip(cot.params).for_each(|(g, c)| *g += c);
    }
    Ok((loss, grad))
}
