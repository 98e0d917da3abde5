//! MLP feature extractor, bias-free classifier heads, Bernoulli weight
//! masks and SGD, with hand-derived backward passes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernel::{bernoulli_matrix, Matrix, RngStream};
use crate::scalar::Real;

/// Fully connected layer `x·W + b`, `W` of shape `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct DenseLayer<T> {
    pub weights: Matrix<T>,
    /// Row vector of shape `1 × out`.
    pub bias: Matrix<T>,
}

impl<T: Real> DenseLayer<T> {
    /// Fan-in scaled uniform weights in `±√(6 / fan_in)`, zero bias.
    pub fn random(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        Self {
            weights: Matrix::from_fn(fan_in, fan_out, |_, _| T::lit(rng.symmetric(bound))),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.cols()
    }
}

/// Stack of dense layers, each followed by a rectifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct FeatureExtractor<T> {
    input_dim: usize,
    layers: Vec<DenseLayer<T>>,
    frozen: bool,
}

/// Intermediate values of a forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ExtractorCache<T> {
    /// Input to each layer.
    inputs: Vec<Matrix<T>>,
    /// Pre-activation output of each layer.
    pre: Vec<Matrix<T>>,
    pub output: Matrix<T>,
}

impl<T: Real> FeatureExtractor<T> {
    pub fn new(input_dim: usize, layers: Vec<DenseLayer<T>>) -> Result<Self> {
        let mut dim = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            if layer.input_dim() != dim || layer.bias.shape() != (1, layer.output_dim()) {
                return Err(Error::shape(
                    "FeatureExtractor::new",
                    format!("layer {i} expects input {dim}"),
                ));
            }
            dim = layer.output_dim();
        }
        Ok(Self {
            input_dim,
            layers,
            frozen: false,
        })
    }

    /// Zero-depth extractor: the identity on inputs.
    pub fn identity(input_dim: usize) -> Self {
        Self {
            input_dim,
            layers: Vec::new(),
            frozen: false,
        }
    }

    pub fn random(input_dim: usize, widths: &[usize], rng: &mut RngStream) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut dim = input_dim;
        for &w in widths {
            layers.push(DenseLayer::random(dim, w, rng));
            dim = w;
        }
        Self {
            input_dim,
            layers,
            frozen: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, DenseLayer::output_dim)
    }

    pub fn layers(&self) -> &[DenseLayer<T>] {
        &self.layers
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// `z = f(x; θ)`.
    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = h.matmul(&layer.weights)?.add_bias(layer.bias.data())?.relu();
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &Matrix<T>) -> Result<ExtractorCache<T>> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let a = h.matmul(&layer.weights)?.add_bias(layer.bias.data())?;
            let next = a.relu();
            inputs.push(h);
            pre.push(a);
            h = next;
        }
        Ok(ExtractorCache {
            inputs,
            pre,
            output: h,
        })
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(Error::shape(
                "forward_features",
                format!("input has {} columns, extractor expects {}", x.cols(), self.input_dim),
            ));
        }
        Ok(())
    }

    /// Gradients `[dW_0, db_0, dW_1, db_1, ...]` given `∂L/∂z`.
    pub fn backward(&self, cache: &ExtractorCache<T>, grad_out: &Matrix<T>) -> Result<Vec<Matrix<T>>> {
        let mut grads = vec![Matrix::zeros(0, 0); 2 * self.layers.len()];
        let mut delta = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let da = delta.hadamard(&cache.pre[i].relu_grad())?;
            grads[2 * i] = cache.inputs[i].t_matmul(&da)?;
            grads[2 * i + 1] = Matrix::new(1, da.cols(), da.col_sums())?;
            if i > 0 {
                delta = da.matmul_t(&layer.weights)?;
            }
        }
        Ok(grads)
    }

    /// One optimizer step. Fails once the extractor is frozen.
    pub fn apply_update(&mut self, grads: &[Matrix<T>], opt: &mut Sgd<T>) -> Result<()> {
        if self.frozen {
            return Err(Error::State("feature extractor is frozen".into()));
        }
        let mut params: Vec<&mut Matrix<T>> = Vec::with_capacity(2 * self.layers.len());
        for layer in &mut self.layers {
            params.push(&mut layer.weights);
            params.push(&mut layer.bias);
        }
        opt.step(&mut params, grads, None)
    }

    /// SHA-256 over the bit patterns of every parameter.
    pub fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for layer in &self.layers {
            for m in [&layer.weights, &layer.bias] {
                hasher.update((m.rows() as u64).to_le_bytes());
                hasher.update((m.cols() as u64).to_le_bytes());
                for x in m.data() {
                    hasher.update(x.as_f64().to_bits().to_le_bytes());
                }
            }
        }
        hasher.update([u8::from(self.frozen)]);
        to_hex(&hasher.finalize())
    }
}

pub(crate) fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Nonlinearity between the two bottleneck layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    fn apply<T: Real>(self, a: &Matrix<T>) -> Matrix<T> {
        match self {
            Activation::Relu => a.relu(),
            Activation::Identity => a.clone(),
        }
    }

    fn grad<T: Real>(self, a: &Matrix<T>) -> Matrix<T> {
        match self {
            Activation::Relu => a.relu_grad(),
            Activation::Identity => Matrix::ones(a.rows(), a.cols()),
        }
    }
}

/// Shape of a classifier head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    Bottleneck { hidden: usize, activation: Activation },
}

impl HeadKind {
    /// Bottleneck with the default width `max(2K, d/2)`.
    pub fn default_bottleneck(dim: usize, num_classes: usize) -> Self {
        HeadKind::Bottleneck {
            hidden: default_hidden(dim, num_classes),
            activation: Activation::Relu,
        }
    }
}

pub fn default_hidden(dim: usize, num_classes: usize) -> usize {
    (2 * num_classes).max(dim / 2)
}

/// Bias-free classifier: `z·W` or `act(z·W1)·W2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", bound = "T: Real")]
pub enum Head<T> {
    Linear {
        weights: Matrix<T>,
    },
    Bottleneck {
        w1: Matrix<T>,
        w2: Matrix<T>,
        activation: Activation,
    },
}

/// Forward intermediates of a head.
#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    /// Effective (masked) weights used in the pass.
    effective: Vec<Matrix<T>>,
    input: Matrix<T>,
    pre_hidden: Option<Matrix<T>>,
    hidden: Option<Matrix<T>>,
    pub logits: Matrix<T>,
}

/// Per-weight-matrix gradients and the gradient with respect to the head input.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads<T> {
    pub weights: Vec<Matrix<T>>,
    pub input: Matrix<T>,
}

impl<T: Real> Head<T> {
    /// Fan-in scaled uniform weights in `±1/√fan_in`.
    pub fn random(dim: usize, num_classes: usize, kind: HeadKind, rng: &mut RngStream) -> Result<Self> {
        let uniform = |rows: usize, cols: usize, rng: &mut RngStream| {
            let bound = 1.0 / (rows as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| T::lit(rng.symmetric(bound)))
        };
        if dim == 0 || num_classes == 0 {
            return Err(Error::domain("head dimensions must be positive"));
        }
        Ok(match kind {
            HeadKind::Linear => Head::Linear {
                weights: uniform(dim, num_classes, rng),
            },
            HeadKind::Bottleneck { hidden, activation } => {
                if hidden < num_classes {
                    return Err(Error::domain(format!(
                        "bottleneck width {hidden} below class count {num_classes}"
                    )));
                }
                Head::Bottleneck {
                    w1: uniform(dim, hidden, rng),
                    w2: uniform(hidden, num_classes, rng),
                    activation,
                }
            }
        })
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Linear { .. } => HeadKind::Linear,
            Head::Bottleneck { w1, activation, .. } => HeadKind::Bottleneck {
                hidden: w1.cols(),
                activation: *activation,
            },
        }
    }

    pub fn weights(&self) -> Vec<&Matrix<T>> {
        match self {
            Head::Linear { weights } => vec![weights],
            Head::Bottleneck { w1, w2, .. } => vec![w1, w2],
        }
    }

    pub fn weights_mut(&mut self) -> Vec<&mut Matrix<T>> {
        match self {
            Head::Linear { weights } => vec![weights],
            Head::Bottleneck { w1, w2, .. } => vec![w1, w2],
        }
    }

    pub fn weight_shapes(&self) -> Vec<(usize, usize)> {
        self.weights().iter().map(|w| w.shape()).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.weights()[0].rows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights().last().expect("head has weights").cols()
    }

    fn activation(&self) -> Activation {
        match self {
            Head::Linear { .. } => Activation::Identity,
            Head::Bottleneck { activation, .. } => *activation,
        }
    }

    /// Forward pass with optional masks applied elementwise to the weights.
    pub fn forward(&self, z: &Matrix<T>, masks: Option<&[Matrix<T>]>) -> Result<HeadCache<T>> {
        if z.cols() != self.input_dim() {
            return Err(Error::shape(
                "head forward",
                format!("features have {} columns, head expects {}", z.cols(), self.input_dim()),
            ));
        }
        let effective: Vec<Matrix<T>> = match masks {
            None => self.weights().into_iter().cloned().collect(),
            Some(masks) => {
                if masks.len() != self.weights().len() {
                    return Err(Error::shape("head forward", "one mask per weight matrix required"));
                }
                self.weights()
                    .into_iter()
                    .zip(masks)
                    .map(|(w, m)| m.hadamard(w))
                    .collect::<Result<_>>()?
            }
        };
        match effective.as_slice() {
            [w] => Ok(HeadCache {
                logits: z.matmul(w)?,
                effective,
                input: z.clone(),
                pre_hidden: None,
                hidden: None,
            }),
            [w1, w2] => {
                let a = z.matmul(w1)?;
                let h = self.activation().apply(&a);
                Ok(HeadCache {
                    logits: h.matmul(w2)?,
                    effective,
                    input: z.clone(),
                    pre_hidden: Some(a),
                    hidden: Some(h),
                })
            }
            _ => unreachable!("heads have one or two weight matrices"),
        }
    }

    pub fn logits(&self, z: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.forward(z, None)?.logits)
    }

    /// Backpropagates `∂L/∂logits` to `∂L/∂(M ⊙ W)` for every weight matrix
    /// and to the head input.
    pub fn backward(&self, cache: &HeadCache<T>, grad_logits: &Matrix<T>) -> Result<HeadGrads<T>> {
        match (cache.effective.as_slice(), &cache.hidden, &cache.pre_hidden) {
            ([w], None, None) => Ok(HeadGrads {
                weights: vec![cache.input.t_matmul(grad_logits)?],
                input: grad_logits.matmul_t(w)?,
            }),
            ([w1, w2], Some(h), Some(a)) => {
                let dw2 = h.t_matmul(grad_logits)?;
                let dh = grad_logits.matmul_t(w2)?;
                let da = dh.hadamard(&self.activation().grad(a))?;
                Ok(HeadGrads {
                    weights: vec![cache.input.t_matmul(&da)?, dw2],
                    input: da.matmul_t(w1)?,
                })
            }
            _ => Err(Error::State("head cache does not match head".into())),
        }
    }
}

/// Which weight matrices of a head receive random masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScope {
    #[default]
    All,
    FinalOnly,
}

/// A head together with its current binary masks and retention probability.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedHead<T> {
    head: Head<T>,
    masks: Option<Vec<Matrix<T>>>,
    q: Option<f64>,
    scope: MaskScope,
}

/// Builds a freshly initialised head with all-ones masks and no `q`.
pub fn reinit_head<T: Real>(
    dim: usize,
    num_classes: usize,
    kind: HeadKind,
    scope: MaskScope,
    rng: &mut RngStream,
) -> Result<MaskedHead<T>> {
    Ok(MaskedHead::new(Head::random(dim, num_classes, kind, rng)?, scope))
}

impl<T: Real> MaskedHead<T> {
    pub fn new(head: Head<T>, scope: MaskScope) -> Self {
        let masks = Some(head.weights().iter().map(|w| Matrix::ones(w.rows(), w.cols())).collect());
        Self {
            head,
            masks,
            q: None,
            scope,
        }
    }

    pub fn head(&self) -> &Head<T> {
        &self.head
    }

    pub fn into_head(self) -> Head<T> {
        self.head
    }

    pub fn masks(&self) -> Option<&[Matrix<T>]> {
        self.masks.as_deref()
    }

    pub fn q(&self) -> Option<f64> {
        self.q
    }

    pub fn scope(&self) -> MaskScope {
        self.scope
    }

    pub fn set_all_ones(&mut self) {
        self.masks = Some(
            self.head
                .weights()
                .iter()
                .map(|w| Matrix::ones(w.rows(), w.cols()))
                .collect(),
        );
    }

    pub fn clear_masks(&mut self) {
        self.masks = None;
    }

    /// Installs caller-built masks; they must be binary and shaped like the weights.
    pub fn set_masks(&mut self, masks: Vec<Matrix<T>>) -> Result<()> {
        let shapes = self.head.weight_shapes();
        if masks.len() != shapes.len() || masks.iter().zip(&shapes).any(|(m, s)| m.shape() != *s) {
            return Err(Error::shape("set_masks", "mask shapes must match weight shapes"));
        }
        if masks
            .iter()
            .flat_map(|m| m.data())
            .any(|&x| x != T::zero() && x != T::one())
        {
            return Err(Error::domain("masks must be binary"));
        }
        self.masks = Some(masks);
        Ok(())
    }

    /// Draws fresh Bernoulli(`q`) masks. Under [`MaskScope::FinalOnly`] all
    /// but the last weight matrix keep an all-ones mask.
    pub fn sample_masks(&mut self, q: f64, rng: &mut RngStream) -> Result<()> {
        let shapes = self.head.weight_shapes();
        let last = shapes.len() - 1;
        let masks = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| match self.scope {
                MaskScope::FinalOnly if i != last => Ok(Matrix::ones(r, c)),
                _ => bernoulli_matrix(r, c, q, rng),
            })
            .collect::<Result<Vec<_>>>()?;
        self.masks = Some(masks);
        self.q = Some(q);
        Ok(())
    }

    fn require_masks(&self) -> Result<&[Matrix<T>]> {
        self.masks
            .as_deref()
            .ok_or_else(|| Error::State("masks are not set".into()))
    }

    pub fn masked_forward(&self, z: &Matrix<T>) -> Result<HeadCache<T>> {
        self.head.forward(z, Some(self.require_masks()?))
    }

    /// `z·(M ⊙ W)`, or `act(z·(M1 ⊙ W1))·(M2 ⊙ W2)` for the bottleneck.
    pub fn masked_logits(&self, z: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.masked_forward(z)?.logits)
    }

    /// Gradients from an explicit `∂L/∂logits`.
    ///
    /// With `restrict` the result is `M ⊙ ∂L/∂(M ⊙ W)`, which equals the
    /// true `∂L/∂W`. Without it the gradient of the effective weights is
    /// returned unmasked, so masked coordinates still receive updates.
    pub fn backward_from_logits(
        &self,
        cache: &HeadCache<T>,
        grad_logits: &Matrix<T>,
        restrict: bool,
    ) -> Result<HeadGrads<T>> {
        let mut grads = self.head.backward(cache, grad_logits)?;
        if restrict {
            let masks = self.require_masks()?;
            for (g, m) in grads.weights.iter_mut().zip(masks) {
                *g = g.hadamard(m)?;
            }
        }
        Ok(grads)
    }

    /// Cross-entropy gradient: `∂L/∂logits = (probs − targets) / B`, then
    /// the masked chain rule.
    pub fn masked_backward(
        &self,
        z: &Matrix<T>,
        probs: &Matrix<T>,
        targets: &Matrix<T>,
    ) -> Result<HeadGrads<T>> {
        let cache = self.masked_forward(z)?;
        if probs.shape() != cache.logits.shape() || targets.shape() != probs.shape() {
            return Err(Error::shape(
                "masked_backward",
                format!(
                    "probs {:?}, targets {:?}, logits {:?}",
                    probs.shape(),
                    targets.shape(),
                    cache.logits.shape()
                ),
            ));
        }
        let batch = T::from_count(z.rows().max(1));
        let grad_logits = probs.sub(targets)?.scale(T::one() / batch);
        self.backward_from_logits(&cache, &grad_logits, true)
    }

    /// Optimizer step on the head weights. With `restrict`, coordinates whose
    /// mask is zero keep both their weight and optimizer state.
    pub fn apply_update(&mut self, grads: &HeadGrads<T>, opt: &mut Sgd<T>, restrict: bool) -> Result<()> {
        let freeze = if restrict {
            Some(self.require_masks()?.to_vec())
        } else {
            None
        };
        let mut params = self.head.weights_mut();
        opt.step(&mut params, &grads.weights, freeze.as_deref())
    }
}

/// Stochastic gradient descent with optional momentum and weight decay.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Matrix<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn plain(lr: f64) -> Self {
        Self::new(lr, 0.0, 0.0)
    }

    /// `v ← μ·v + g + λ·w; w ← w − lr·v`, skipping coordinates where
    /// `active` is zero.
    pub fn step(
        &mut self,
        params: &mut [&mut Matrix<T>],
        grads: &[Matrix<T>],
        active: Option<&[Matrix<T>]>,
    ) -> Result<()> {
        if params.len() != grads.len() || active.is_some_and(|a| a.len() != params.len()) {
            return Err(Error::shape("Sgd::step", "parameter/gradient count mismatch"));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::State("optimizer bound to a different parameter set".into()));
        }
        let lr = T::lit(self.lr);
        let mu = T::lit(self.momentum);
        let wd = T::lit(self.weight_decay);
        for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            if param.shape() != grad.shape() || self.velocity[i].shape() != grad.shape() {
                return Err(Error::shape(
                    "Sgd::step",
                    format!("param {:?} vs grad {:?}", param.shape(), grad.shape()),
                ));
            }
            let mask = active.map(|a| a[i].data());
            let vel = self.velocity[i].data_mut();
            for (j, (w, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                if mask.is_some_and(|m| m[j] == T::zero()) {
                    continue;
                }
                let mut step = g;
                if self.weight_decay != 0.0 {
                    step = step + wd * *w;
                }
                if self.momentum != 0.0 {
                    vel[j] = mu * vel[j] + step;
                    step = vel[j];
                }
                *w = *w - lr * step;
            }
        }
        Ok(())
    }
}
