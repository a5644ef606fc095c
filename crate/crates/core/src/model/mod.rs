//! One-step predictors, multi-step rollout, and exact Jacobians.
//!
//! Every model maps an [`InputWindow`] of `n` measurements (most recent
//! first) to the next measurement's first `d_out` components. Parameters are
//! held outside the model in a flat [`ParameterVector`] so adapters can work
//! on plain vectors.

mod linear;
mod mlp;
mod recurrent;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use linear::LinearModel;
pub use mlp::MlpModel;
pub use recurrent::RecurrentModel;

/// `d_out x |mask|` matrix of partial derivatives of the one-step output.
pub type JacobianMatrix = DMatrix<f64>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat model parameters plus the block layout that maps them onto the
/// model's weight matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    layout: Vec<Block>,
    values: Vec<f64>,
}

impl ParameterVector {
    pub fn new(layout: Vec<Block>, values: Vec<f64>) -> Result<Self> {
        let mut expected_offset = 0;
        for block in &layout {
            if block.offset != expected_offset {
                return Err(Error::Argument(format!(
                    "block `{}` starts at {} but previous blocks end at {}",
                    block.name, block.offset, expected_offset
                )));
            }
            expected_offset += block.len;
        }
        if expected_offset != values.len() {
            return Err(Error::Dimension {
                what: "parameter vector",
                expected: expected_offset,
                found: values.len(),
            });
        }
        Ok(Self { layout, values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &[Block] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|b| b.name == name)
            .map(|b| &self.values[b.offset..b.offset + b.len])
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.layout.clone(), values)
    }

    /// Copies `subset` into the positions selected by `mask`.
    pub fn with_masked(&self, mask: &AdaptableMask, subset: &[f64]) -> Result<Self> {
        let mut values = self.values.clone();
        mask.scatter(subset, &mut values)?;
        Ok(Self {
            layout: self.layout.clone(),
            values,
        })
    }
}

/// Sorted positions into a [`ParameterVector`] that an adapter may change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptableMask {
    indices: Vec<usize>,
}

impl AdaptableMask {
    pub fn new(indices: Vec<usize>, num_params: usize) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument(
                "mask indices must be strictly increasing".into(),
            ));
        }
        if let Some(&last) = indices.last() {
            if last >= num_params {
                return Err(Error::Argument(format!(
                    "mask index {last} out of bounds for {num_params} parameters"
                )));
            }
        }
        Ok(Self { indices })
    }

    pub fn all(num_params: usize) -> Self {
        Self {
            indices: (0..num_params).collect(),
        }
    }

    /// Selects every block whose name is in `names` or starts with one of
    /// the entries ending in `.` (e.g. `"enc."`).
    pub fn from_blocks(layout: &[Block], names: &[&str]) -> Result<Self> {
        let mut indices = Vec::new();
        for block in layout {
            let hit = names.iter().any(|n| {
                if n.ends_with('.') {
                    block.name.starts_with(n)
                } else {
                    block.name == *n
                }
            });
            if hit {
                indices.extend(block.offset..block.offset + block.len);
            }
        }
        if indices.is_empty() {
            return Err(Error::Argument(format!(
                "no parameter block matches {names:?}"
            )));
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn gather(&self, values: &[f64]) -> Vec<f64> {
        self.indices.iter().map(|&i| values[i]).collect()
    }

    pub fn scatter(&self, subset: &[f64], values: &mut [f64]) -> Result<()> {
        if subset.len() != self.indices.len() {
            return Err(Error::Dimension {
                what: "masked parameters",
                expected: self.indices.len(),
                found: subset.len(),
            });
        }
        for (&i, &v) in self.indices.iter().zip(subset) {
            values[i] = v;
        }
        Ok(())
    }
}

/// `n` measurement vectors, `steps[0]` being the most recent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputWindow {
    pub steps: Vec<Vec<f64>>,
}

impl InputWindow {
    pub fn new(steps: Vec<Vec<f64>>) -> Self {
        Self { steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn newest(&self) -> &[f64] {
        &self.steps[0]
    }

    /// Feeds a prediction back: `y` overwrites the leading components of a
    /// copy of the newest measurement, which is pushed to the front; the
    /// oldest entry drops out.
    pub fn shifted(&self, y: &[f64]) -> InputWindow {
        let mut next = self.steps[0].clone();
        next[..y.len()].copy_from_slice(y);
        let mut steps = Vec::with_capacity(self.steps.len());
        steps.push(next);
        steps.extend(self.steps[..self.steps.len() - 1].iter().cloned());
        InputWindow { steps }
    }
}

/// `m` predicted (or observed) future vectors, earliest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputWindow {
    pub steps: Vec<Vec<f64>>,
}

impl OutputWindow {
    pub fn new(steps: Vec<Vec<f64>>) -> Self {
        Self { steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Keeps the first `d_out` components of every step.
    pub fn project(&self, d_out: usize) -> OutputWindow {
        OutputWindow {
            steps: self.steps.iter().map(|s| s[..d_out].to_vec()).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.steps.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentDistribution {
    pub probabilities: Vec<f64>,
}

impl IntentDistribution {
    pub fn argmax(&self) -> usize {
        self.probabilities
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            })
            .0
    }
}

/// Gradient of a scalar with respect to parameters and window entries.
#[derive(Debug, Clone)]
pub struct Cotangent {
    pub params: Vec<f64>,
    pub window: Vec<Vec<f64>>,
}

impl Cotangent {
    pub(crate) fn zeros(num_params: usize, x: &InputWindow) -> Self {
        Self {
            params: vec![0.0; num_params],
            window: x.steps.iter().map(|s| vec![0.0; s.len()]).collect(),
        }
    }
}

/// A differentiable one-step predictor `f_1(θ, X)`.
///
/// Implementations may assume that `theta` and `x` have already been
/// dimension-checked; the free functions in this module do that.
pub trait Predictor {
    /// Measurement dimension `d`.
    fn input_dim(&self) -> usize;
    /// One-step output dimension `d_out` (`<= d`).
    fn output_dim(&self) -> usize;
    /// Window length `n`.
    fn window_len(&self) -> usize;
    fn layout(&self) -> Vec<Block>;

    fn num_params(&self) -> usize {
        self.layout().iter().map(|b| b.len).sum()
    }

    fn forward(&self, theta: &[f64], x: &InputWindow) -> Vec<f64>;

    /// True when `f_1` is linear in θ (the Jacobian does not depend on θ).
    fn is_linear_in_params(&self) -> bool {
        false
    }

    /// Reverse-mode product `seedᵀ · ∂f_1/∂(θ, X)`.
    fn backward(&self, _theta: &[f64], _x: &InputWindow, _seed: &[f64]) -> Result<Cotangent> {
        Err(Error::Unsupported("model has no analytic derivative".into()))
    }

    fn num_classes(&self) -> usize {
        0
    }

    fn intent_logits(&self, _theta: &[f64], _x: &InputWindow) -> Result<Vec<f64>> {
        Err(Error::Unsupported("model has no classifier head".into()))
    }

    /// Reverse-mode product through the classifier logits.
    fn intent_backward(
        &self,
        _theta: &[f64],
        _x: &InputWindow,
        _seed: &[f64],
    ) -> Result<Cotangent> {
        Err(Error::Unsupported("model has no classifier head".into()))
    }
}

fn check_inputs<P: Predictor + ?Sized>(model: &P, theta: &[f64], x: &InputWindow) -> Result<()> {
    let p = model.num_params();
    if theta.len() != p {
        return Err(Error::Dimension {
            what: "parameter vector",
            expected: p,
            found: theta.len(),
        });
    }
    if x.len() != model.window_len() {
        return Err(Error::Dimension {
            what: "input window length",
            expected: model.window_len(),
            found: x.len(),
        });
    }
    for step in &x.steps {
        if step.len() != model.input_dim() {
            return Err(Error::Dimension {
                what: "measurement",
                expected: model.input_dim(),
                found: step.len(),
            });
        }
    }
    Ok(())
}

pub fn flatten_params(model: &Model) -> ParameterVector {
    model.params.clone()
}

pub fn predict_one_step<P: Predictor + ?Sized>(
    model: &P,
    theta: &[f64],
    x: &InputWindow,
) -> Result<Vec<f64>> {
    check_inputs(model, theta, x)?;
    Ok(model.forward(theta, x))
}

/// Iterates the one-step map `m` times, feeding each prediction back as the
/// newest measurement. Components beyond `d_out` keep their last observed
/// value.
pub fn rollout<P: Predictor + ?Sized>(
    model: &P,
    theta: &[f64],
    x: &InputWindow,
    m: usize,
) -> Result<OutputWindow> {
    if m < 1 {
        return Err(Error::Argument("rollout horizon must be at least 1".into()));
    }
    check_inputs(model, theta, x)?;
    let mut window = x.clone();
    let mut steps = Vec::with_capacity(m);
    for k in 0..m {
        let y = model.forward(theta, &window);
        if k + 1 < m {
            window = window.shifted(&y);
        }
        steps.push(y);
    }
    Ok(OutputWindow { steps })
}

/// Gradient of `Σ_k ⟨adjoint[k], Ŷ_k⟩` with respect to θ, back-propagated
/// through the feedback loop of [`rollout`].
pub fn rollout_vjp<P: Predictor + ?Sized>(
    model: &P,
    theta: &[f64],
    x: &InputWindow,
    adjoint: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let m = adjoint.len();
    if m < 1 {
        return Err(Error::Argument("rollout horizon must be at least 1".into()));
    }
    check_inputs(model, theta, x)?;
    let d_out = model.output_dim();
    let mut windows = Vec::with_capacity(m);
    windows.push(x.clone());
    for k in 0..m - 1 {
        let y = model.forward(theta, &windows[k]);
        let next = windows[k].shifted(&y);
        windows.push(next);
    }

    let mut grad = vec![0.0; theta.len()];
    // Adjoint of the window that step k consumed, accumulated from later steps.
    let mut window_bar: Option<Vec<Vec<f64>>> = None;
    for k in (0..m).rev() {
        let mut y_bar = adjoint[k].clone();
        let mut carried: Option<Vec<Vec<f64>>> = None;
        if let Some(wb) = window_bar.take() {
            // windows[k+1] = shift(windows[k], y_k)
            y_bar
                .iter_mut()
                .zip(&wb[0][..d_out])
                .for_each(|(a, b)| *a += b);
            let n = wb.len();
            let mut prev: Vec<Vec<f64>> = windows[k].steps.iter().map(|s| vec![0.0; s.len()]).collect();
            for (c, v) in prev[0][d_out..].iter_mut().zip(&wb[0][d_out..]) {
                *c += v;
            }
            for i in 0..n - 1 {
                for (c, v) in prev[i].iter_mut().zip(&wb[i + 1]) {
                    *c += v;
                }
            }
            carried = Some(prev);
        }
        let cot = model.backward(theta, &windows[k], &y_bar)?;
        grad.iter_mut().zip(&cot.params).for_each(|(g, c)| *g += c);
        let mut wb = cot.window;
        if let Some(prev) = carried {
            for (a, b) in wb.iter_mut().zip(prev) {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
        }
        window_bar = Some(wb);
    }
    Ok(grad)
}

/// Exact Jacobian of the one-step output with respect to the masked
/// parameters, one reverse pass per output coordinate.
pub fn jacobian<P: Predictor + ?Sized>(
    model: &P,
    theta: &[f64],
    x: &InputWindow,
    mask: &AdaptableMask,
) -> Result<JacobianMatrix> {
    check_inputs(model, theta, x)?;
    let d_out = model.output_dim();
    let mut jac = DMatrix::zeros(d_out, mask.len());
    let mut seed = vec![0.0; d_out];
    for i in 0..d_out {
        seed.fill(0.0);
        seed[i] = 1.0;
        let cot = model.backward(theta, x, &seed)?;
        for (j, &idx) in mask.indices().iter().enumerate() {
            jac[(i, j)] = cot.params[idx];
        }
    }
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("jacobian"));
    }
    Ok(jac)
}

/// Central-difference Jacobian; column `j` is
/// `(f_1(θ + h e_j) - f_1(θ - h e_j)) / 2h`.
pub fn fd_jacobian<P: Predictor + ?Sized>(
    model: &P,
    theta: &[f64],
    x: &InputWindow,
    mask: &AdaptableMask,
    h: f64,
) -> Result<JacobianMatrix> {
    if !(h > 0.0) {
        return Err(Error::Argument("perturbation size must be positive".into()));
    }
    check_inputs(model, theta, x)?;
    let d_out = model.output_dim();
    let mut jac = DMatrix::zeros(d_out, mask.len());
    let mut probe = theta.to_vec();
    for (j, &idx) in mask.indices().iter().enumerate() {
        probe[idx] = theta[idx] + h;
        let plus = model.forward(&probe, x);
        probe[idx] = theta[idx] - h;
        let minus = model.forward(&probe, x);
        probe[idx] = theta[idx];
        for i in 0..d_out {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

pub fn classify_intent<P: Predictor + ?Sized>(
    model: &P,
    theta: &[f64],
    x: &InputWindow,
) -> Result<IntentDistribution> {
    check_inputs(model, theta, x)?;
    let logits = model.intent_logits(theta, x)?;
    Ok(IntentDistribution {
        probabilities: crate::linalg::softmax(&logits),
    })
}

/// The model zoo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Linear(LinearModel),
    Mlp(MlpModel),
    Recurrent(RecurrentModel),
}

macro_rules! dispatch {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            Architecture::Linear($m) => $e,
            Architecture::Mlp($m) => $e,
            Architecture::Recurrent($m) => $e,
        }
    };
}

impl Architecture {
    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Linear(_) => "linear",
            Architecture::Mlp(_) => "mlp",
            Architecture::Recurrent(_) => "recurrent",
        }
    }

    /// Validates the shape parameters.
    pub fn validate(&self) -> Result<()> {
        dispatch!(self, m => m.validate())
    }

    fn init_values(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        dispatch!(self, m => m.init_values(rng))
    }

    /// Blocks adapted when no mask is configured: the encoder for the
    /// recurrent model, everything otherwise.
    pub fn default_mask(&self) -> AdaptableMask {
        match self {
            Architecture::Recurrent(_) => AdaptableMask::from_blocks(&self.layout(), &["enc."])
                .expect("recurrent model always has encoder blocks"),
            _ => AdaptableMask::all(self.num_params()),
        }
    }
}

impl Predictor for Architecture {
    fn input_dim(&self) -> usize {
        dispatch!(self, m => m.input_dim())
    }
    fn output_dim(&self) -> usize {
        dispatch!(self, m => m.output_dim())
    }
    fn window_len(&self) -> usize {
        dispatch!(self, m => m.window_len())
    }
    fn layout(&self) -> Vec<Block> {
        dispatch!(self, m => m.layout())
    }
    fn forward(&self, theta: &[f64], x: &InputWindow) -> Vec<f64> {
        dispatch!(self, m => m.forward(theta, x))
    }
    fn is_linear_in_params(&self) -> bool {
        dispatch!(self, m => m.is_linear_in_params())
    }
    fn backward(&self, theta: &[f64], x: &InputWindow, seed: &[f64]) -> Result<Cotangent> {
        dispatch!(self, m => m.backward(theta, x, seed))
    }
    fn num_classes(&self) -> usize {
        dispatch!(self, m => m.num_classes())
    }
    fn intent_logits(&self, theta: &[f64], x: &InputWindow) -> Result<Vec<f64>> {
        dispatch!(self, m => m.intent_logits(theta, x))
    }
    fn intent_backward(&self, theta: &[f64], x: &InputWindow, seed: &[f64]) -> Result<Cotangent> {
        dispatch!(self, m => m.intent_backward(theta, x, seed))
    }
}

/// An architecture together with concrete weights. This is the document
/// written by `mekf train` and read by the other commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub architecture: Architecture,
    pub seed: Option<u64>,
    pub params: ParameterVector,
}

impl Model {
    /// Seeded initialization: every block uniform in `±1/sqrt(fan_in)`.
    pub fn init(architecture: Architecture, seed: u64) -> Result<Self> {
        architecture.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = architecture.init_values(&mut rng);
        let params = ParameterVector::new(architecture.layout(), values)?;
        Ok(Self {
            architecture,
            seed: Some(seed),
            params,
        })
    }

    pub fn with_params(architecture: Architecture, values: Vec<f64>) -> Result<Self> {
        architecture.validate()?;
        let params = ParameterVector::new(architecture.layout(), values)?;
        Ok(Self {
            architecture,
            seed: None,
            params,
        })
    }

    /// Rebuilds the model from a flat vector; the layout must match.
    pub fn unflatten(&self, params: &ParameterVector) -> Result<Model> {
        if params.layout() != self.params.layout() {
            return Err(Error::Argument(
                "parameter layout does not match the architecture".into(),
            ));
        }
        Ok(Model {
            architecture: self.architecture.clone(),
            seed: self.seed,
            params: params.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Model = serde_json::from_str(text)?;
        model.architecture.validate()?;
        if model.params.layout() != model.architecture.layout().as_slice() {
            return Err(Error::Argument(
                "stored layout does not match the architecture".into(),
            ));
        }
        Ok(model)
    }
}

pub(crate) fn uniform_block(rng: &mut ChaCha8Rng, len: usize, fan_in: usize, out: &mut Vec<f64>) {
    use rand::Rng;
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    out.extend((0..len).map(|_| rng.random_range(-bound..bound)));
}

/// Builds a layout from `(name, len)` pairs.
pub(crate) fn layout_of(blocks: &[(&str, usize)]) -> Vec<Block> {
    let mut offset = 0;
    blocks
        .iter()
        .filter(|(_, len)| *len > 0)
        .map(|&(name, len)| {
            let b = Block {
                name: name.to_string(),
                offset,
                len,
            };
            offset += len;
            b
        })
        .collect()
}
