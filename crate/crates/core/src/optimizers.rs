//! Online adapters.
//!
//! Every adapter consumes the one-step Jacobian `H` (`d_out x q`, `q` the
//! number of adaptable parameters) and the residual `y - ŷ`, and returns a
//! new [`AdapterState`] with `θ ← θ + V`. Gradient baselines use
//! `g = -Hᵀ·residual`, the gradient of `½‖residual‖²`.
//!
//! The Kalman recursion follows the forgetting-factor form
//!
//! ```text
//! K  = P Hᵀ (H P Hᵀ + σ_r I)⁻¹
//! θ' = θ + K r
//! P' = λ⁻¹ (P - K H P + σ_q I)
//! ```
//!
//! Note that `σ_q I` sits inside the `λ⁻¹(·)` bracket, so the injected
//! process noise is inflated by `1/λ` as well. A textbook EKF adds it after
//! the division; set `q_outside_lambda` for that variant.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite_mat, all_finite_vec, condition_estimate, solve_spd, symmetrize};
use crate::model::{jacobian, predict_one_step, AdaptableMask, InputWindow, Predictor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MekfHyper {
    #[serde(default = "d_p0")]
    pub p0: f64,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_sigma_r")]
    pub sigma_r: f64,
    #[serde(default)]
    pub sigma_q: f64,
    /// Step-size EMA factor; only read by `mekf_ema`.
    #[serde(default = "d_mu")]
    pub mu_v: f64,
    /// Covariance EMA factor; only read by `mekf_ema`.
    #[serde(default = "d_mu")]
    pub mu_p: f64,
    #[serde(default)]
    pub q_outside_lambda: bool,
}

fn d_p0() -> f64 {
    1.0
}
fn d_lambda() -> f64 {
    0.98
}
fn d_sigma_r() -> f64 {
    1.0
}
fn d_mu() -> f64 {
    0.3
}

impl Default for MekfHyper {
    fn default() -> Self {
        Self {
            p0: d_p0(),
            lambda: d_lambda(),
            sigma_r: d_sigma_r(),
            sigma_q: 0.0,
            mu_v: d_mu(),
            mu_p: d_mu(),
            q_outside_lambda: false,
        }
    }
}

impl MekfHyper {
    pub fn validate(&self, field: &str) -> Result<()> {
        let f = |name: &str| format!("{field}.{name}");
        if !(self.p0 > 0.0 && self.p0.is_finite()) {
            return Err(Error::config(f("p0"), "must be > 0"));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::config(f("lambda"), "must satisfy 0 < lambda <= 1"));
        }
        if !(self.sigma_r > 0.0 && self.sigma_r.is_finite()) {
            return Err(Error::config(f("sigma_r"), "must be > 0"));
        }
        if !(self.sigma_q >= 0.0 && self.sigma_q.is_finite()) {
            return Err(Error::config(f("sigma_q"), "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.mu_v) {
            return Err(Error::config(f("mu_v"), "must satisfy 0 <= mu_v < 1"));
        }
        if !(0.0..1.0).contains(&self.mu_p) {
            return Err(Error::config(f("mu_p"), "must satisfy 0 <= mu_p < 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdHyper {
    #[serde(default = "d_sgd_lr")]
    pub lr: f64,
}

fn d_sgd_lr() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentumHyper {
    #[serde(default = "d_momentum_lr")]
    pub lr: f64,
    #[serde(default = "d_momentum")]
    pub mu: f64,
}

/// `lr / (1 - mu)` matches the plain SGD step.
fn d_momentum_lr() -> f64 {
    0.001
}

fn d_momentum() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    #[serde(default = "d_adam_lr")]
    pub lr: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
}

fn d_adam_lr() -> f64 {
    0.001
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: d_adam_lr(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlsHyper {
    #[serde(default = "d_p0")]
    pub p0: f64,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
}

/// Adapter selection, keyed by `kind` in configuration documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Adapter {
    /// No adaptation; the frozen offline model.
    None,
    Mekf(MekfHyper),
    MekfEma(MekfHyper),
    Sgd(SgdHyper),
    Momentum(MomentumHyper),
    Adam(AdamHyper),
    Amsgrad(AdamHyper),
    Rls(RlsHyper),
}

impl Adapter {
    pub fn key(&self) -> &'static str {
        match self {
            Adapter::None => "none",
            Adapter::Mekf(_) => "mekf",
            Adapter::MekfEma(_) => "mekf_ema",
            Adapter::Sgd(_) => "sgd",
            Adapter::Momentum(_) => "momentum",
            Adapter::Adam(_) => "adam",
            Adapter::Amsgrad(_) => "amsgrad",
            Adapter::Rls(_) => "rls",
        }
    }

    /// Default hyperparameters for a string key.
    pub fn from_key(key: &str) -> Result<Self> {
        Ok(match key {
            "none" => Adapter::None,
            "mekf" => Adapter::Mekf(MekfHyper::default()),
            "mekf_ema" => Adapter::MekfEma(MekfHyper::default()),
            "sgd" => Adapter::Sgd(SgdHyper { lr: d_sgd_lr() }),
            "momentum" => Adapter::Momentum(MomentumHyper {
                lr: d_momentum_lr(),
                mu: d_momentum(),
            }),
            "adam" => Adapter::Adam(AdamHyper::default()),
            "amsgrad" => Adapter::Amsgrad(AdamHyper::default()),
            "rls" => Adapter::Rls(RlsHyper {
                p0: d_p0(),
                lambda: d_lambda(),
            }),
            other => return Err(Error::config("adapter.kind", format!("unknown adapter `{other}`"))),
        })
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{field}.{name}"), "must be > 0"))
            }
        };
        let unit = |v: f64, name: &str| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{field}.{name}"), "must lie in [0, 1)"))
            }
        };
        match self {
            Adapter::None => Ok(()),
            Adapter::Mekf(h) | Adapter::MekfEma(h) => h.validate(field),
            Adapter::Sgd(h) => positive(h.lr, "lr"),
            Adapter::Momentum(h) => {
                positive(h.lr, "lr")?;
                unit(h.mu, "mu")
            }
            Adapter::Adam(h) | Adapter::Amsgrad(h) => {
                positive(h.lr, "lr")?;
                positive(h.eps, "eps")?;
                unit(h.beta1, "beta1")?;
                unit(h.beta2, "beta2")
            }
            Adapter::Rls(h) => {
                positive(h.p0, "p0")?;
                if h.lambda > 0.0 && h.lambda <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::config(format!("{field}.lambda"), "must satisfy 0 < lambda <= 1"))
                }
            }
        }
    }

    pub fn is_noop(&self) -> bool {
        matches!(self, Adapter::None)
    }

    /// Fresh state around the masked initial parameters. `P = p0·I` for the
    /// covariance-based adapters; all buffers zero.
    pub fn init_state(&self, theta: &[f64]) -> AdapterState {
        let q = theta.len();
        let p = match self {
            Adapter::Mekf(h) | Adapter::MekfEma(h) => DMatrix::identity(q, q) * h.p0,
            Adapter::Rls(h) => DMatrix::identity(q, q) * h.p0,
            _ => DMatrix::zeros(0, 0),
        };
        let moments = match self {
            Adapter::Adam(_) => Moments::zeros(q, false),
            Adapter::Amsgrad(_) => Moments::zeros(q, true),
            _ => Moments::zeros(0, false),
        };
        AdapterState {
            theta: DVector::from_column_slice(theta),
            p,
            v: DVector::zeros(q),
            moments,
        }
    }

    /// One update from a Jacobian and residual.
    pub fn step(
        &self,
        state: &AdapterState,
        h: &DMatrix<f64>,
        residual: &DVector<f64>,
    ) -> Result<AdapterState> {
        match self {
            Adapter::None => Ok(state.clone()),
            Adapter::Mekf(hy) => mekf_step(state, h, residual, hy).map(|(s, _)| s),
            Adapter::MekfEma(hy) => mekf_ema_step(state, h, residual, hy),
            Adapter::Sgd(hy) => Ok(sgd_step(state, &gradient(h, residual), hy.lr)),
            Adapter::Momentum(hy) => Ok(momentum_step(state, &gradient(h, residual), hy.lr, hy.mu)),
            Adapter::Adam(hy) => Ok(adam_step(state, &gradient(h, residual), hy)),
            Adapter::Amsgrad(hy) => Ok(amsgrad_step(state, &gradient(h, residual), hy)),
            Adapter::Rls(hy) => rls_step(state, h, residual, hy.lambda),
        }
    }
}

/// First/second moment accumulators for Adam-style baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: DVector<f64>,
    pub second: DVector<f64>,
    /// Running maximum of `second` (Amsgrad only, empty otherwise).
    pub second_max: DVector<f64>,
    pub t: u64,
}

impl Moments {
    fn zeros(q: usize, with_max: bool) -> Self {
        Self {
            first: DVector::zeros(q),
            second: DVector::zeros(q),
            second_max: DVector::zeros(if with_max { q } else { 0 }),
            t: 0,
        }
    }
}

/// Adapter-internal state. Updates return a new value and never touch the
/// input.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    /// Current estimate of the adaptable parameters.
    pub theta: DVector<f64>,
    /// Parameter covariance (`0 x 0` for gradient baselines).
    pub p: DMatrix<f64>,
    /// Last applied step `V_t`.
    pub v: DVector<f64>,
    pub moments: Moments,
}

impl AdapterState {
    pub fn is_finite(&self) -> bool {
        all_finite_vec(&self.theta) && all_finite_mat(&self.p) && all_finite_vec(&self.v)
    }
}

/// `y - ŷ` and its Euclidean norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Innovation {
    pub residual: DVector<f64>,
    pub error: f64,
}

impl Innovation {
    pub fn new(y: &[f64], y_hat: &[f64]) -> Result<Self> {
        if y.len() != y_hat.len() {
            return Err(Error::Dimension {
                what: "observation",
                expected: y_hat.len(),
                found: y.len(),
            });
        }
        let residual = DVector::from_iterator(y.len(), y.iter().zip(y_hat).map(|(a, b)| a - b));
        let error = residual.norm();
        Ok(Self { residual, error })
    }
}

/// `g = -Hᵀ r`.
pub fn gradient(h: &DMatrix<f64>, residual: &DVector<f64>) -> DVector<f64> {
    -(h.transpose() * residual)
}

fn check_kalman_dims(state: &AdapterState, h: &DMatrix<f64>, residual: &DVector<f64>) -> Result<()> {
    let q = state.theta.len();
    if h.ncols() != q || state.p.shape() != (q, q) {
        return Err(Error::Dimension {
            what: "jacobian columns",
            expected: q,
            found: h.ncols(),
        });
    }
    if residual.len() != h.nrows() {
        return Err(Error::Dimension {
            what: "residual",
            expected: h.nrows(),
            found: residual.len(),
        });
    }
    Ok(())
}

/// Gain `K` and the covariance term `K H P`.
fn kalman_gain(
    p: &DMatrix<f64>,
    h: &DMatrix<f64>,
    noise: f64,
    lambda: f64,
    sigma_r: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let hp = h * p;
    let mut s = &hp * h.transpose();
    for i in 0..s.nrows() {
        s[(i, i)] += noise;
    }
    // P and S are symmetric, so K = P Hᵀ S⁻¹ = (S⁻¹ H P)ᵀ.
    let kt = solve_spd(&s, &hp).ok_or_else(|| Error::Numerical {
        message: "innovation covariance is singular".into(),
        lambda,
        sigma_r,
        condition: condition_estimate(&s),
    })?;
    let k = kt.transpose();
    let khp = &k * &hp;
    Ok((k, khp))
}

fn propagate_covariance(p: &DMatrix<f64>, khp: &DMatrix<f64>, hyper: &MekfHyper) -> DMatrix<f64> {
    let mut next = p - khp;
    if hyper.q_outside_lambda {
        next /= hyper.lambda;
        for i in 0..next.nrows() {
            next[(i, i)] += hyper.sigma_q;
        }
    } else {
        for i in 0..next.nrows() {
            next[(i, i)] += hyper.sigma_q;
        }
        next /= hyper.lambda;
    }
    next
}

fn check_kalman_hyper(lambda: f64, sigma_r: f64) -> Result<()> {
    if !(lambda > 0.0) {
        return Err(Error::config("adapter.lambda", "must be > 0"));
    }
    if !(sigma_r > 0.0) {
        return Err(Error::config("adapter.sigma_r", "must be > 0"));
    }
    Ok(())
}

/// Forgetting-factor EKF step. Returns the new state and the applied step
/// `V_t = K·r`.
pub fn mekf_step(
    state: &AdapterState,
    h: &DMatrix<f64>,
    residual: &DVector<f64>,
    hyper: &MekfHyper,
) -> Result<(AdapterState, DVector<f64>)> {
    check_kalman_hyper(hyper.lambda, hyper.sigma_r)?;
    check_kalman_dims(state, h, residual)?;
    let (k, khp) = kalman_gain(&state.p, h, hyper.sigma_r, hyper.lambda, hyper.sigma_r)?;
    let step = &k * residual;
    let mut p = propagate_covariance(&state.p, &khp, hyper);
    symmetrize(&mut p);
    let next = AdapterState {
        theta: &state.theta + &step,
        p,
        v: step.clone(),
        moments: state.moments.clone(),
    };
    Ok((next, step))
}

/// EKF step with exponential moving averages on the step (`μ_v`) and on the
/// covariance (`μ_p`).
///
/// `μ_v = μ_p = 0` reproduces [`mekf_step`] bit for bit. The EMA factors are
/// not range-checked here.
pub fn mekf_ema_step(
    state: &AdapterState,
    h: &DMatrix<f64>,
    residual: &DVector<f64>,
    hyper: &MekfHyper,
) -> Result<AdapterState> {
    check_kalman_hyper(hyper.lambda, hyper.sigma_r)?;
    check_kalman_dims(state, h, residual)?;
    let (k, khp) = kalman_gain(&state.p, h, hyper.sigma_r, hyper.lambda, hyper.sigma_r)?;
    let raw = &k * residual;
    let v = &state.v * hyper.mu_v + raw * (1.0 - hyper.mu_v);
    let p_star = propagate_covariance(&state.p, &khp, hyper);
    let mut p = &state.p * hyper.mu_p + p_star * (1.0 - hyper.mu_p);
    symmetrize(&mut p);
    Ok(AdapterState {
        theta: &state.theta + &v,
        p,
        v,
        moments: state.moments.clone(),
    })
}

pub fn sgd_step(state: &AdapterState, grad: &DVector<f64>, lr: f64) -> AdapterState {
    let mut next = state.clone();
    next.theta = &state.theta - grad * lr;
    next.v = -(grad * lr);
    next
}

/// Heavy-ball momentum: `V = μ V - lr·g`, `θ += V`.
pub fn momentum_step(state: &AdapterState, grad: &DVector<f64>, lr: f64, mu: f64) -> AdapterState {
    let mut next = state.clone();
    next.v = &state.v * mu - grad * lr;
    next.theta = &state.theta + &next.v;
    next
}

fn adam_like(state: &AdapterState, grad: &DVector<f64>, hyper: &AdamHyper, amsgrad: bool) -> AdapterState {
    let mut next = state.clone();
    let m = &mut next.moments;
    m.t += 1;
    m.first = &state.moments.first * hyper.beta1 + grad * (1.0 - hyper.beta1);
    m.second = &state.moments.second * hyper.beta2 + grad.component_mul(grad) * (1.0 - hyper.beta2);
    let t = m.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let denom_source = if amsgrad {
        m.second_max = state.moments.second_max.zip_map(&m.second, f64::max);
        &m.second_max
    } else {
        &m.second
    };
    let step = DVector::from_iterator(
        grad.len(),
        m.first.iter().zip(denom_source.iter()).map(|(mf, s)| {
            let denom = (s / bc2).sqrt() + hyper.eps;
            -hyper.lr * (mf / bc1) / denom
        }),
    );
    next.theta = &state.theta + &step;
    next.v = step;
    next
}

/// Bias-corrected Adam.
pub fn adam_step(state: &AdapterState, grad: &DVector<f64>, hyper: &AdamHyper) -> AdapterState {
    adam_like(state, grad, hyper, false)
}

/// Adam with the running maximum of the second moment in the denominator.
pub fn amsgrad_step(state: &AdapterState, grad: &DVector<f64>, hyper: &AdamHyper) -> AdapterState {
    adam_like(state, grad, hyper, true)
}

/// Exponentially weighted recursive least squares for models linear in
/// their parameters (`ŷ = H θ`):
///
/// ```text
/// K  = P Hᵀ (λ I + H P Hᵀ)⁻¹
/// θ' = θ + K r
/// P' = (P - K H P) / λ
/// ```
///
/// With `P_rls = λ P_ekf / σ_r` the trajectory coincides with [`mekf_step`]
/// at `σ_q = 0`.
pub fn rls_step(
    state: &AdapterState,
    h: &DMatrix<f64>,
    residual: &DVector<f64>,
    lambda: f64,
) -> Result<AdapterState> {
    if !(lambda > 0.0) {
        return Err(Error::config("adapter.lambda", "must be > 0"));
    }
    check_kalman_dims(state, h, residual)?;
    let (k, khp) = kalman_gain(&state.p, h, lambda, lambda, lambda)?;
    let step = &k * residual;
    let mut p = (&state.p - khp) / lambda;
    symmetrize(&mut p);
    Ok(AdapterState {
        theta: &state.theta + &step,
        p,
        v: step,
        moments: state.moments.clone(),
    })
}

/// Binds a model, its frozen base parameters, and the mask of adaptable
/// entries.
#[derive(Debug, Clone, Copy)]
pub struct AdaptContext<'a, P: Predictor + ?Sized> {
    pub model: &'a P,
    pub base: &'a [f64],
    pub mask: &'a AdaptableMask,
}

impl<'a, P: Predictor + ?Sized> AdaptContext<'a, P> {
    pub fn new(model: &'a P, base: &'a [f64], mask: &'a AdaptableMask) -> Self {
        Self { model, base, mask }
    }

    /// Full parameter vector with the adapted subset written in.
    pub fn compose(&self, subset: &DVector<f64>) -> Vec<f64> {
        let mut values = self.base.to_vec();
        for (&i, &v) in self.mask.indices().iter().zip(subset.iter()) {
            values[i] = v;
        }
        values
    }

    pub fn predict(&self, state: &AdapterState, x: &InputWindow) -> Result<Vec<f64>> {
        predict_one_step(self.model, &self.compose(&state.theta), x)
    }
}

/// One supervised adaptation step from the previous input window and the
/// newly observed `y`. The prediction `ŷ` is recomputed from `state`.
pub fn adapt<P: Predictor + ?Sized>(
    adapter: &Adapter,
    state: &AdapterState,
    ctx: &AdaptContext<'_, P>,
    x_prev: &InputWindow,
    y: &[f64],
) -> Result<AdapterState> {
    if adapter.is_noop() {
        return Ok(state.clone());
    }
    if matches!(adapter, Adapter::Rls(_)) && !ctx.model.is_linear_in_params() {
        return Err(Error::Unsupported(
            "rls applies only to models linear in their parameters".into(),
        ));
    }
    let theta = ctx.compose(&state.theta);
    let y_hat = predict_one_step(ctx.model, &theta, x_prev)?;
    let innovation = Innovation::new(y, &y_hat)?;
    let h = jacobian(ctx.model, &theta, x_prev, ctx.mask)?;
    let next = adapter.step(state, &h, &innovation.residual)?;
    if !next.is_finite() {
        return Err(Error::NonFinite("adapter state"));
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(theta: f64, p: f64) -> AdapterState {
        AdapterState {
            theta: DVector::from_element(1, theta),
            p: DMatrix::from_element(1, 1, p),
            v: DVector::zeros(1),
            moments: Moments::zeros(0, false),
        }
    }

    fn hyper(lambda: f64) -> MekfHyper {
        MekfHyper {
            p0: 1.0,
            lambda,
            sigma_r: 1.0,
            sigma_q: 0.0,
            mu_v: 0.0,
            mu_p: 0.0,
            q_outside_lambda: false,
        }
    }

    #[test]
    fn scalar_kalman_update_closed_form() {
        // θ=1, P=1, H=2, y=3, ŷ=2: S = 2·1·2 + 1 = 5, K = 2/5, P' = 1 - 0.4·2 = 0.2.
        let h = DMatrix::from_element(1, 1, 2.0);
        let r = DVector::from_element(1, 1.0);
        let (next, step) = mekf_step(&scalar_state(1.0, 1.0), &h, &r, &hyper(1.0)).unwrap();
        assert!((step[0] - 0.4).abs() < 1e-12);
        assert!((next.theta[0] - 1.4).abs() < 1e-12);
        assert!((next.p[(0, 0)] - 0.2).abs() < 1e-12);

        let (half, _) = mekf_step(&scalar_state(1.0, 1.0), &h, &r, &hyper(0.5)).unwrap();
        assert!((half.theta[0] - 1.4).abs() < 1e-12);
        assert!((half.p[(0, 0)] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn process_noise_placement() {
        let h = DMatrix::from_element(1, 1, 2.0);
        let r = DVector::from_element(1, 1.0);
        let mut hy = hyper(0.5);
        hy.sigma_q = 0.1;
        let (inside, _) = mekf_step(&scalar_state(1.0, 1.0), &h, &r, &hy).unwrap();
        assert!((inside.p[(0, 0)] - (0.2 + 0.1) / 0.5).abs() < 1e-12);
        hy.q_outside_lambda = true;
        let (outside, _) = mekf_step(&scalar_state(1.0, 1.0), &h, &r, &hy).unwrap();
        assert!((outside.p[(0, 0)] - (0.2 / 0.5 + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_lambda_is_a_config_error() {
        let h = DMatrix::from_element(1, 1, 2.0);
        let r = DVector::from_element(1, 1.0);
        let err = mekf_step(&scalar_state(1.0, 1.0), &h, &r, &hyper(0.0)).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn singular_innovation_reports_diagnostics() {
        // A covariance with a large negative direction makes S singular.
        let h = DMatrix::from_element(1, 1, 1.0);
        let r = DVector::from_element(1, 1.0);
        let err = mekf_step(&scalar_state(0.0, -1.0), &h, &r, &hyper(0.98)).unwrap_err();
        match err {
            Error::Numerical { lambda, sigma_r, .. } => {
                assert_eq!(lambda, 0.98);
                assert_eq!(sigma_r, 1.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ema_momentum_recurrence() {
        let h = DMatrix::from_element(1, 1, 2.0);
        let r = DVector::zeros(1);
        let mut state = scalar_state(0.0, 1.0);
        state.v[0] = 1.0;
        let mut hy = hyper(1.0);
        hy.mu_v = 0.3;
        let next = mekf_ema_step(&state, &h, &r, &hy).unwrap();
        assert!((next.v[0] - 0.3).abs() < 1e-15);
        assert!((next.theta[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn ema_with_unit_mu_p_freezes_covariance() {
        let h = DMatrix::from_row_slice(1, 2, &[1.0, -0.5]);
        let r = DVector::from_element(1, 0.7);
        let mut state = scalar_state(0.0, 1.0);
        state.theta = DVector::from_column_slice(&[0.1, 0.2]);
        state.p = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 2.0]);
        state.v = DVector::zeros(2);
        let mut hy = hyper(0.9);
        hy.mu_p = 1.0;
        let next = mekf_ema_step(&state, &h, &r, &hy).unwrap();
        assert_eq!(next.p, state.p);
    }

    #[test]
    fn sgd_definition() {
        let state = Adapter::Sgd(SgdHyper { lr: 0.1 }).init_state(&[0.0, 0.0]);
        let g = DVector::from_column_slice(&[1.0, -2.0]);
        let next = sgd_step(&state, &g, 0.1);
        assert!((next.theta[0] + 0.1).abs() < 1e-15);
        assert!((next.theta[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let hy = AdamHyper {
            lr: 0.01,
            ..AdamHyper::default()
        };
        let state = Adapter::Adam(hy.clone()).init_state(&[0.0]);
        let next = adam_step(&state, &DVector::from_element(1, 1.0), &hy);
        // m̂ = 1, v̂ = 1  ->  Δ = -0.01 / (1 + 1e-8)
        assert!((next.theta[0] + 0.01 / (1.0 + 1e-8)).abs() < 1e-15);

        let still = adam_step(&state, &DVector::zeros(1), &hy);
        assert_eq!(still.theta[0], 0.0);
    }

    #[test]
    fn amsgrad_uses_running_max() {
        let hy = AdamHyper::default();
        let state = Adapter::Amsgrad(hy.clone()).init_state(&[0.0]);
        let s1 = amsgrad_step(&state, &DVector::from_element(1, 10.0), &hy);
        let s2 = amsgrad_step(&s1, &DVector::from_element(1, 0.1), &hy);
        assert!(s2.moments.second_max[0] >= s2.moments.second[0]);
        assert_eq!(s2.moments.second_max[0], s1.moments.second[0]);
    }

    #[test]
    fn rls_rank_one_projection() {
        // Large prior: one observation moves θ onto the regressor's level set.
        let state = Adapter::Rls(RlsHyper { p0: 1e8, lambda: 1.0 }).init_state(&[0.0, 0.0]);
        let phi = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        let r = DVector::from_element(1, 5.0);
        let next = rls_step(&state, &phi, &r, 1.0).unwrap();
        // Minimum-norm solution of 3a + 4b = 5 is (0.6, 0.8).
        assert!((next.theta[0] - 0.6).abs() < 1e-6);
        assert!((next.theta[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn innovation_norm() {
        let inn = Innovation::new(&[3.0, 4.0], &[0.0, 0.0]).unwrap();
        assert_eq!(inn.error, 5.0);
        assert_eq!(Innovation::new(&[1.0], &[1.0]).unwrap().error, 0.0);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(Adapter::from_key("lbfgs").is_err());
        for key in ["none", "mekf", "mekf_ema", "sgd", "momentum", "adam", "amsgrad", "rls"] {
            assert_eq!(Adapter::from_key(key).unwrap().key(), key);
        }
    }
}
