//! Dense MLP engine: forward trace, exact backprop of the full objective,
//! plain SGD and the training loop.
//!
//! The objective on a batch is
//!
//! ```text
//! mean CE + λ·mean inhibition + β·mean lateral + l1·Σ|W| + l2·ΣW²
//! ```
//!
//! where the two gate regularizers range over the hidden layers that carry a
//! forgetting gate, and the weight penalties over dense weights only.

use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, Samples};
use crate::error::{Error, Result};
use crate::forgetting::{gate_backward, gate_forward, ForgettingLayerState};
use crate::matrix::Matrix;
use crate::regularizers::{reg_terms, LateralKind};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out × in`
    weights: Matrix,
    bias: Vec<f64>,
    activation: Activation,
    /// Kept weights; `None` means unpruned.
    mask: Option<Vec<bool>>,
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::InvalidArgument(format!(
                "bias length {} for {} outputs",
                bias.len(),
                weights.rows()
            )));
        }
        Ok(Self {
            weights,
            bias,
            activation,
            mask: None,
        })
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }
}

/// Architecture, regularisation and optimisation settings of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    pub layer_sizes: Vec<usize>,
    /// Attach a forgetting gate to every hidden layer.
    pub forgetting: bool,
    pub shortcut: bool,
    pub rho: f64,
    pub lambda: f64,
    pub beta: f64,
    pub lateral: LateralKind,
    pub l1: f64,
    pub l2: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            layer_sizes: vec![784, 128, 256, 10],
            forgetting: true,
            shortcut: true,
            rho: 10.0,
            lambda: 1e-2,
            beta: 1e-4,
            lateral: LateralKind::Weighted,
            l1: 0.0,
            l2: 0.0,
            lr: 0.05,
            epochs: 5,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl MlpConfig {
    /// Plain network: no gates and no regularisation.
    pub fn vanilla(layer_sizes: Vec<usize>) -> Self {
        Self {
            layer_sizes,
            forgetting: false,
            lambda: 0.0,
            beta: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.layer_sizes.len() < 2 {
            return bad("need at least an input and an output size".into());
        }
        if self.layer_sizes.contains(&0) {
            return bad("layer sizes must be positive".into());
        }
        if self.forgetting && !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad(format!("rho must be > 0, got {}", self.rho));
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("beta", self.beta),
            ("l1", self.l1),
            ("l2", self.l2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }
}

/// Optimiser loop settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Parameters (or anything shaped like them) for one dense layer and its gate.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub gate: Option<Vec<f64>>,
}

/// A value per trainable parameter, laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub layers: Vec<LayerParams>,
}

pub type Gradients = ParamSet;

/// Address of one scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRef {
    Weight { layer: usize, row: usize, col: usize },
    Bias { layer: usize, index: usize },
    Gate { layer: usize, index: usize },
}

impl std::fmt::Display for ParamRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamRef::Weight { layer, row, col } => write!(f, "layer {layer} weight[{row},{col}]"),
            ParamRef::Bias { layer, index } => write!(f, "layer {layer} bias[{index}]"),
            ParamRef::Gate { layer, index } => write!(f, "layer {layer} gate weight[{index}]"),
        }
    }
}

impl ParamSet {
    pub fn get(&self, r: ParamRef) -> f64 {
        match r {
            ParamRef::Weight { layer, row, col } => self.layers[layer].weights.get(row, col),
            ParamRef::Bias { layer, index } => self.layers[layer].bias[index],
            ParamRef::Gate { layer, index } => self.layers[layer].gate.as_ref().expect("no gate")[index],
        }
    }

    /// Every scalar address, in layer order: weights, bias, gate.
    pub fn refs(&self) -> Vec<ParamRef> {
        let mut out = Vec::new();
        for (l, p) in self.layers.iter().enumerate() {
            for row in 0..p.weights.rows() {
                for col in 0..p.weights.cols() {
                    out.push(ParamRef::Weight { layer: l, row, col });
                }
            }
            for index in 0..p.bias.len() {
                out.push(ParamRef::Bias { layer: l, index });
            }
            if let Some(g) = &p.gate {
                for index in 0..g.len() {
                    out.push(ParamRef::Gate { layer: l, index });
                }
            }
        }
        out
    }

    pub fn zeros_like(&self) -> ParamSet {
        self.map(|_| 0.0)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamSet {
        ParamSet {
            layers: self
                .layers
                .iter()
                .map(|p| LayerParams {
                    weights: p.weights.map(&f),
                    bias: p.bias.iter().map(|&x| f(x)).collect(),
                    gate: p.gate.as_ref().map(|g| g.iter().map(|&x| f(x)).collect()),
                })
                .collect(),
        }
    }

    /// Visit matching slices of `self` and `other` (same layout).
    pub fn zip_slices_mut(&mut self, other: &ParamSet, mut f: impl FnMut(&mut [f64], &[f64])) {
        assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            f(a.weights.data_mut(), b.weights.data());
            f(&mut a.bias, &b.bias);
            if let (Some(x), Some(y)) = (a.gate.as_mut(), b.gate.as_ref()) {
                f(x, y);
            }
        }
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &ParamSet) {
        self.zip_slices_mut(other, |a, b| {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        });
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for p in &self.layers {
            out.push(p.weights.data());
            out.push(&p.bias);
            if let Some(g) = &p.gate {
                out.push(g);
            }
        }
        out
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.slices().into_iter().flat_map(|s| s.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loss components of one batch (means over the batch).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub inhibition: f64,
    pub lateral: f64,
    /// `l1·Σ|W| + l2·ΣW²` plus any externally added penalty.
    pub penalty: f64,
    pub total: f64,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    version: u64,
    /// Input to each dense layer.
    pub inputs: Vec<Matrix>,
    /// Pre-activation of each dense layer.
    pub pre: Vec<Matrix>,
    /// Post-activation `h` of each dense layer (logits for the last).
    pub post: Vec<Matrix>,
    /// Gate values of each hidden layer that has a forgetting gate.
    pub sigma: Vec<Option<Matrix>>,
    /// Softmax of the logits.
    pub probs: Matrix,
}

impl ActivationTrace {
    /// Output of hidden layer `l` as seen by the next layer (after gating).
    pub fn hidden_output(&self, l: usize) -> &Matrix {
        &self.inputs[l + 1]
    }

    pub fn logits(&self) -> &Matrix {
        self.post.last().expect("trace has layers")
    }
}

/// Per-layer backprop quantities with one row per sample.
struct Deltas {
    /// dL/d(pre-activation)
    dz: Vec<Matrix>,
    /// per-sample dL/d(gate weights)
    gate: Vec<Option<Matrix>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layers: Vec<DenseLayer>,
    gates: Vec<Option<ForgettingLayerState>>,
    config: MlpConfig,
    #[serde(skip)]
    version: u64,
}

impl MlpModel {
    /// Seeded initialisation: weights uniform in ±sqrt(6/(fan_in+fan_out)),
    /// biases and inhibitory weights zero.
    pub fn new(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let sizes = &config.layer_sizes;
        let n_layers = sizes.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Matrix::from_fn(fan_out, fan_in, |_, _| rng.uniform(-limit, limit));
            let act = if l + 1 == n_layers {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layers.push(DenseLayer::new(w, vec![0.0; fan_out], act)?);
        }
        let mut gates = Vec::with_capacity(n_layers - 1);
        for &n in &sizes[1..n_layers] {
            gates.push(if config.forgetting {
                Some(ForgettingLayerState::new(n, config.rho, config.shortcut)?)
            } else {
                None
            });
        }
        Ok(Self {
            layers,
            gates,
            config,
            version: 0,
        })
    }

    /// Assemble a model from explicit layers. `gates` has one entry per
    /// hidden layer.
    pub fn from_parts(
        layers: Vec<DenseLayer>,
        gates: Vec<Option<ForgettingLayerState>>,
        config: MlpConfig,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("model needs at least one layer".into()));
        }
        if gates.len() + 1 != layers.len() {
            return Err(Error::InvalidConfig(format!(
                "{} gates for {} hidden layers",
                gates.len(),
                layers.len() - 1
            )));
        }
        for l in 1..layers.len() {
            if layers[l].in_dim() != layers[l - 1].out_dim() {
                return Err(Error::Shape {
                    layer: l,
                    expected: format!("{} inputs", layers[l - 1].out_dim()),
                    actual: format!("{} inputs", layers[l].in_dim()),
                });
            }
        }
        for (l, g) in gates.iter().enumerate() {
            if let Some(g) = g {
                if g.len() != layers[l].out_dim() {
                    return Err(Error::Shape {
                        layer: l,
                        expected: format!("gate width {}", layers[l].out_dim()),
                        actual: format!("gate width {}", g.len()),
                    });
                }
            }
        }
        Ok(Self {
            layers,
            gates,
            config,
            version: 0,
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &DenseLayer {
        &self.layers[l]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_hidden(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::out_dim)
    }

    pub fn hidden_width(&self, l: usize) -> usize {
        self.layers[l].out_dim()
    }

    pub fn gate(&self, l: usize) -> Option<&ForgettingLayerState> {
        self.gates.get(l).and_then(Option::as_ref)
    }

    pub fn gates(&self) -> &[Option<ForgettingLayerState>] {
        &self.gates
    }

    pub fn has_gates(&self) -> bool {
        self.gates.iter().any(Option::is_some)
    }

    /// Mutation counter; a trace is valid only for the version it was
    /// produced at.
    pub fn version(&self) -> u64 {
        self.version
    }

    fn touch(&mut self) {
        self.version += 1;
    }

    pub fn params(&self) -> ParamSet {
        ParamSet {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, d)| LayerParams {
                    weights: d.weights.clone(),
                    bias: d.bias.clone(),
                    gate: self.gate(l).map(|g| g.weights().to_vec()),
                })
                .collect(),
        }
    }

    pub fn param(&self, r: ParamRef) -> f64 {
        match r {
            ParamRef::Weight { layer, row, col } => self.layers[layer].weights.get(row, col),
            ParamRef::Bias { layer, index } => self.layers[layer].bias[index],
            ParamRef::Gate { layer, index } => self.gate(layer).expect("no gate").weights()[index],
        }
    }

    pub fn set_param(&mut self, r: ParamRef, v: f64) {
        match r {
            ParamRef::Weight { layer, row, col } => self.layers[layer].weights.set(row, col, v),
            ParamRef::Bias { layer, index } => self.layers[layer].bias[index] = v,
            ParamRef::Gate { layer, index } => {
                self.gates[layer].as_mut().expect("no gate").weights_mut()[index] = v
            }
        }
        self.touch();
    }

    /// Overwrite every parameter from a set with the same layout.
    pub fn set_params(&mut self, p: &ParamSet) -> Result<()> {
        if p.layers.len() != self.layers.len() {
            return Err(Error::InvalidArgument("parameter layout mismatch".into()));
        }
        for (l, lp) in p.layers.iter().enumerate() {
            let d = &mut self.layers[l];
            if lp.weights.shape() != d.weights.shape() || lp.bias.len() != d.bias.len() {
                return Err(Error::InvalidArgument(format!("parameter shape mismatch at layer {l}")));
            }
            d.weights = lp.weights.clone();
            d.bias = lp.bias.clone();
            if let (Some(g), Some(src)) = (self.gates.get_mut(l).and_then(Option::as_mut), &lp.gate) {
                g.weights_mut().copy_from_slice(src);
            }
        }
        self.enforce_masks();
        self.touch();
        Ok(())
    }

    /// Mutable access to one layer's dense weights; bumps the version.
    pub fn weights_mut(&mut self, l: usize) -> &mut Matrix {
        self.touch();
        &mut self.layers[l].weights
    }

    /// Replace a dense layer (same shape); bumps the version.
    pub fn replace_layer(&mut self, l: usize, layer: DenseLayer) -> Result<DenseLayer> {
        let old = &self.layers[l];
        if old.weights.shape() != layer.weights.shape() {
            return Err(Error::Shape {
                layer: l,
                expected: format!("{:?}", old.weights.shape()),
                actual: format!("{:?}", layer.weights.shape()),
            });
        }
        self.touch();
        Ok(std::mem::replace(&mut self.layers[l], layer))
    }

    /// Install per-layer keep masks on the dense weights. Masked weights are
    /// zeroed and stay zero under [`sgd_step`].
    pub fn set_weight_masks(&mut self, masks: Vec<Option<Vec<bool>>>) -> Result<()> {
        if masks.len() != self.layers.len() {
            return Err(Error::InvalidArgument("one mask slot per layer required".into()));
        }
        for (l, m) in masks.iter().enumerate() {
            if let Some(m) = m {
                if m.len() != self.layers[l].weights.data().len() {
                    return Err(Error::InvalidArgument(format!("mask size mismatch at layer {l}")));
                }
            }
        }
        for (d, m) in self.layers.iter_mut().zip(masks) {
            d.mask = m;
        }
        self.enforce_masks();
        self.touch();
        Ok(())
    }

    fn enforce_masks(&mut self) {
        for d in &mut self.layers {
            if let Some(m) = &d.mask {
                for (w, &keep) in d.weights.data_mut().iter_mut().zip(m) {
                    if !keep {
                        *w = 0.0;
                    }
                }
            }
        }
    }

    /// Count of dense weights not removed by a mask.
    pub fn kept_weights(&self) -> usize {
        self.layers
            .iter()
            .map(|d| match &d.mask {
                Some(m) => m.iter().filter(|&&k| k).count(),
                None => d.weights.data().len(),
            })
            .sum()
    }

    pub fn forward(&self, batch: &Matrix) -> Result<ActivationTrace> {
        self.forward_impl(batch, None)
    }

    /// Forward pass with the units flagged in `removed` of hidden layer
    /// `layer` forced to zero output.
    pub fn forward_ablated(&self, batch: &Matrix, layer: usize, removed: &[bool]) -> Result<ActivationTrace> {
        if layer >= self.num_hidden() || removed.len() != self.hidden_width(layer) {
            return Err(Error::InvalidArgument(format!(
                "ablation mask of {} units for hidden layer {layer}",
                removed.len()
            )));
        }
        self.forward_impl(batch, Some((layer, removed)))
    }

    fn forward_impl(&self, batch: &Matrix, ablate: Option<(usize, &[bool])>) -> Result<ActivationTrace> {
        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        let mut post = Vec::with_capacity(n_layers);
        let mut sigma = Vec::with_capacity(n_layers - 1);
        let mut x = batch.clone();
        for (l, d) in self.layers.iter().enumerate() {
            if x.cols() != d.in_dim() {
                return Err(Error::Shape {
                    layer: l,
                    expected: format!("{} input columns", d.in_dim()),
                    actual: format!("{} columns", x.cols()),
                });
            }
            let mut z = x.matmul_nt(&d.weights);
            z.add_row_broadcast(&d.bias);
            let mut h = z.map(|v| d.activation.apply(v));
            if let Some((al, removed)) = ablate {
                if al == l {
                    for r in 0..h.rows() {
                        for (v, &gone) in h.row_mut(r).iter_mut().zip(removed) {
                            if gone {
                                *v = 0.0;
                            }
                        }
                    }
                }
            }
            inputs.push(x);
            let next = if l + 1 < n_layers {
                match self.gate(l) {
                    Some(g) => {
                        let out = gate_forward(&h, g.weights(), g.rho(), g.shortcut());
                        sigma.push(Some(out.sigma));
                        out.h_out
                    }
                    None => {
                        sigma.push(None);
                        h.clone()
                    }
                }
            } else {
                Matrix::zeros(0, 0)
            };
            pre.push(z);
            post.push(h);
            x = next;
        }
        let probs = softmax_rows(post.last().expect("layers"));
        Ok(ActivationTrace {
            version: self.version,
            inputs,
            pre,
            post,
            sigma,
            probs,
        })
    }

    fn check_trace(&self, trace: &ActivationTrace, labels: &[usize]) -> Result<()> {
        if trace.version != self.version {
            return Err(Error::StaleTrace {
                trace: trace.version,
                model: self.version,
            });
        }
        if labels.len() != trace.probs.rows() {
            return Err(Error::Shape {
                layer: self.layers.len() - 1,
                expected: format!("{} labels", trace.probs.rows()),
                actual: format!("{} labels", labels.len()),
            });
        }
        let c = self.num_classes();
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {c} classes")));
        }
        Ok(())
    }

    fn gated_layers(&self) -> Vec<usize> {
        (0..self.num_hidden()).filter(|&l| self.gate(l).is_some()).collect()
    }

    fn weight_penalty(&self) -> f64 {
        let (l1, l2) = (self.config.l1, self.config.l2);
        if l1 == 0.0 && l2 == 0.0 {
            return 0.0;
        }
        self.layers
            .iter()
            .flat_map(|d| d.weights.data())
            .map(|&w| l1 * w.abs() + l2 * w * w)
            .sum()
    }

    /// Objective value on a batch without computing gradients.
    pub fn loss(&self, batch: &Matrix, labels: &[usize]) -> Result<LossBreakdown> {
        let trace = self.forward(batch)?;
        self.check_trace(&trace, labels)?;
        let task = cross_entropy(&trace.probs, labels);
        let (inhibition, lateral, _) = self.reg_pass(&trace, false);
        Ok(self.combine(task, inhibition, lateral))
    }

    fn combine(&self, task: f64, inhibition: f64, lateral: f64) -> LossBreakdown {
        let penalty = self.weight_penalty();
        LossBreakdown {
            task,
            inhibition,
            lateral,
            penalty,
            total: task + self.config.lambda * inhibition + self.config.beta * lateral + penalty,
        }
    }

    /// Batch-mean regularizer losses and, when asked, per-sample gradient
    /// matrices `(dL/dσ, dL/dh)` for each gated layer, scaled by 1/B.
    #[allow(clippy::type_complexity)]
    fn reg_pass(
        &self,
        trace: &ActivationTrace,
        with_grads: bool,
    ) -> (f64, f64, Vec<Option<(Matrix, Matrix)>>) {
        let gated = self.gated_layers();
        let mut grads: Vec<Option<(Matrix, Matrix)>> = vec![None; self.num_hidden()];
        if gated.is_empty() {
            return (0.0, 0.0, grads);
        }
        let b = trace.probs.rows();
        let inv_b = 1.0 / b as f64;
        let (lambda, beta, lateral) = (self.config.lambda, self.config.beta, self.config.lateral);
        if with_grads {
            for &l in &gated {
                let n = self.hidden_width(l);
                grads[l] = Some((Matrix::zeros(b, n), Matrix::zeros(b, n)));
            }
        }
        let mut inh = 0.0;
        let mut lat = 0.0;
        for r in 0..b {
            let hs: Vec<&[f64]> = gated.iter().map(|&l| trace.post[l].row(r)).collect();
            let ss: Vec<&[f64]> = gated
                .iter()
                .map(|&l| trace.sigma[l].as_ref().expect("gated").row(r))
                .collect();
            let t = reg_terms(&hs, &ss, lambda, beta, lateral);
            inh += t.loss_inhibition;
            lat += t.loss_lateral;
            if with_grads {
                for (k, &l) in gated.iter().enumerate() {
                    let (gs, gh) = grads[l].as_mut().expect("allocated");
                    for (dst, src) in gs.row_mut(r).iter_mut().zip(&t.grad_sigma[k]) {
                        *dst = src * inv_b;
                    }
                    for (dst, src) in gh.row_mut(r).iter_mut().zip(&t.grad_h[k]) {
                        *dst = src * inv_b;
                    }
                }
            }
        }
        (inh * inv_b, lat * inv_b, grads)
    }

    /// Backpropagate `dlogits` (and optional regularizer gradients) through
    /// the network, keeping per-sample rows. `heads` replaces the last layer
    /// with one layer per row group.
    fn deltas(
        &self,
        trace: &ActivationTrace,
        dlogits: Matrix,
        reg: &[Option<(Matrix, Matrix)>],
        heads: Option<(&[Vec<usize>], &[DenseLayer])>,
    ) -> Deltas {
        let n_layers = self.layers.len();
        let mut dz: Vec<Matrix> = vec![Matrix::zeros(0, 0); n_layers];
        let mut gate: Vec<Option<Matrix>> = vec![None; n_layers];
        let mut g = dlogits;
        for l in (0..n_layers).rev() {
            let d = &self.layers[l];
            if d.activation != Activation::Identity {
                let pre = trace.pre[l].data();
                for (x, &p) in g.data_mut().iter_mut().zip(pre) {
                    *x *= d.activation.derivative(p);
                }
            }
            if l == 0 {
                dz[l] = g;
                break;
            }
            // dL/d(output of hidden layer l-1)
            let upstream = match heads {
                Some((groups, layers)) if l == n_layers - 1 => {
                    let mut up = Matrix::zeros(g.rows(), d.in_dim());
                    for (rows, head) in groups.iter().zip(layers) {
                        if rows.is_empty() {
                            continue;
                        }
                        let part = g.select_rows(rows).matmul(&head.weights);
                        for (k, &r) in rows.iter().enumerate() {
                            up.row_mut(r).copy_from_slice(part.row(k));
                        }
                    }
                    up
                }
                _ => g.matmul(&d.weights),
            };
            dz[l] = g;
            let h = &trace.post[l - 1];
            let reg_l = reg.get(l - 1).and_then(Option::as_ref);
            g = match (self.gate(l - 1), trace.sigma[l - 1].as_ref()) {
                (Some(st), Some(sigma)) => {
                    let gg = gate_backward(
                        &upstream,
                        h,
                        sigma,
                        st.weights(),
                        st.rho(),
                        st.shortcut(),
                        reg_l.map(|(gs, _)| gs),
                    );
                    gate[l - 1] = Some(gg.grad_w_per_sample);
                    let mut gh = gg.grad_h;
                    if let Some((_, reg_h)) = reg_l {
                        gh.axpy(1.0, reg_h);
                    }
                    gh
                }
                _ => upstream,
            };
        }
        Deltas { dz, gate }
    }

    fn reduce(&self, trace: &ActivationTrace, deltas: &Deltas) -> Gradients {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, _)| LayerParams {
                weights: deltas.dz[l].matmul_tn(&trace.inputs[l]),
                bias: deltas.dz[l].col_sums(),
                gate: deltas.gate[l].as_ref().map(Matrix::col_sums),
            })
            .collect();
        Gradients { layers }
    }

    /// Gradient of the full objective w.r.t. every parameter, plus the loss
    /// components of the batch.
    pub fn backward(&self, trace: &ActivationTrace, labels: &[usize]) -> Result<(Gradients, LossBreakdown)> {
        self.check_trace(trace, labels)?;
        let task = cross_entropy(&trace.probs, labels);
        let b = labels.len() as f64;
        let mut dlogits = trace.probs.clone();
        for (r, &y) in labels.iter().enumerate() {
            let row = dlogits.row_mut(r);
            row[y] -= 1.0;
            row.iter_mut().for_each(|x| *x /= b);
        }
        let (inhibition, lateral, reg) = self.reg_pass(trace, true);
        let deltas = self.deltas(trace, dlogits, &reg, None);
        let mut grads = self.reduce(trace, &deltas);
        let (l1, l2) = (self.config.l1, self.config.l2);
        if l1 != 0.0 || l2 != 0.0 {
            for (gp, d) in grads.layers.iter_mut().zip(&self.layers) {
                for (g, &w) in gp.weights.data_mut().iter_mut().zip(d.weights.data()) {
                    *g += l1 * sign(w) + 2.0 * l2 * w;
                }
            }
        }
        Ok((grads, self.combine(task, inhibition, lateral)))
    }

    /// Gradients for a batch whose row `r` is scored by `heads[row_head[r]]`
    /// instead of the model's own last layer. Returns trunk gradients (the
    /// last layer's entries are zero), one gradient per head and the losses.
    pub fn backward_multihead(
        &self,
        batch: &Matrix,
        labels: &[usize],
        row_head: &[usize],
        heads: &[DenseLayer],
    ) -> Result<(Gradients, Vec<LayerParams>, LossBreakdown)> {
        let last = self.layers.len() - 1;
        let own = &self.layers[last];
        if let Some(h) = heads.iter().find(|h| h.weights.shape() != own.weights.shape() || h.activation != own.activation) {
            return Err(Error::Shape {
                layer: last,
                expected: format!("head of shape {:?}", own.weights.shape()),
                actual: format!("{:?}", h.weights.shape()),
            });
        }
        if row_head.len() != batch.rows() || row_head.iter().any(|&t| t >= heads.len()) {
            return Err(Error::InvalidArgument("row_head must name one head per batch row".into()));
        }
        let mut groups = vec![Vec::new(); heads.len()];
        for (r, &t) in row_head.iter().enumerate() {
            groups[t].push(r);
        }
        let mut trace = self.forward(batch)?;
        let (b, c) = (batch.rows(), own.out_dim());
        let mut z = Matrix::zeros(b, c);
        for (rows, head) in groups.iter().zip(heads) {
            if rows.is_empty() {
                continue;
            }
            let mut part = trace.inputs[last].select_rows(rows).matmul_nt(&head.weights);
            part.add_row_broadcast(&head.bias);
            for (k, &r) in rows.iter().enumerate() {
                z.row_mut(r).copy_from_slice(part.row(k));
            }
        }
        let h = z.map(|v| own.activation.apply(v));
        trace.probs = softmax_rows(&h);
        trace.pre[last] = z;
        trace.post[last] = h;
        self.check_trace(&trace, labels)?;

        let task = cross_entropy(&trace.probs, labels);
        let mut dlogits = trace.probs.clone();
        for (r, &y) in labels.iter().enumerate() {
            let row = dlogits.row_mut(r);
            row[y] -= 1.0;
            row.iter_mut().for_each(|x| *x /= b as f64);
        }
        let (inhibition, lateral, reg) = self.reg_pass(&trace, true);
        let deltas = self.deltas(&trace, dlogits, &reg, Some((&groups, heads)));
        let mut grads = self.reduce(&trace, &deltas);
        grads.layers[last].weights = Matrix::zeros(c, own.in_dim());
        grads.layers[last].bias = vec![0.0; c];
        let (l1, l2) = (self.config.l1, self.config.l2);
        let penalize = |g: &mut Matrix, w: &Matrix| {
            if l1 != 0.0 || l2 != 0.0 {
                for (g, &w) in g.data_mut().iter_mut().zip(w.data()) {
                    *g += l1 * sign(w) + 2.0 * l2 * w;
                }
            }
        };
        for (gp, d) in grads.layers[..last].iter_mut().zip(&self.layers) {
            penalize(&mut gp.weights, &d.weights);
        }
        let head_grads = groups
            .iter()
            .zip(heads)
            .map(|(rows, head)| {
                let (mut weights, bias) = if rows.is_empty() {
                    (Matrix::zeros(c, own.in_dim()), vec![0.0; c])
                } else {
                    let dz = deltas.dz[last].select_rows(rows);
                    (dz.matmul_tn(&trace.inputs[last].select_rows(rows)), dz.col_sums())
                };
                penalize(&mut weights, &head.weights);
                LayerParams { weights, bias, gate: None }
            })
            .collect();
        Ok((grads, head_grads, self.combine(task, inhibition, lateral)))
    }

    /// Sum over the batch of squared per-sample gradients of the negative
    /// log-likelihood `-log p(y|x)` (no regularizers).
    pub fn squared_nll_grads(&self, trace: &ActivationTrace, labels: &[usize]) -> Result<ParamSet> {
        self.check_trace(trace, labels)?;
        let mut dlogits = trace.probs.clone();
        for (r, &y) in labels.iter().enumerate() {
            dlogits.row_mut(r)[y] -= 1.0;
        }
        let none: Vec<Option<(Matrix, Matrix)>> = vec![None; self.num_hidden()];
        let deltas = self.deltas(trace, dlogits, &none, None);
        let sq = |m: &Matrix| m.map(|x| x * x);
        let layers = (0..self.layers.len())
            .map(|l| {
                let dz2 = sq(&deltas.dz[l]);
                LayerParams {
                    // per-sample weight grad is dz ⊗ x, so its square is dz² ⊗ x²
                    weights: dz2.matmul_tn(&sq(&trace.inputs[l])),
                    bias: dz2.col_sums(),
                    gate: deltas.gate[l].as_ref().map(|g| sq(g).col_sums()),
                }
            })
            .collect();
        Ok(ParamSet { layers })
    }

    /// Reset and re-measure every gate's importance Ω over `data`.
    pub fn measure_importance(&mut self, data: &dyn Samples, batch_size: usize) -> Result<()> {
        for g in self.gates.iter_mut().flatten() {
            g.reset_importance();
        }
        let n = data.len();
        let mut start = 0;
        while start < n {
            let end = (start + batch_size.max(1)).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let (x, _) = data.gather(&idx);
            let trace = self.forward(&x)?;
            for (g, s) in self.gates.iter_mut().zip(&trace.sigma) {
                if let (Some(g), Some(s)) = (g.as_mut(), s) {
                    g.accumulate_importance(s);
                }
            }
            start = end;
        }
        Ok(())
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            s += *x;
        }
        row.iter_mut().for_each(|x| *x /= s);
    }
    out
}

/// Mean negative log-likelihood of the true labels.
pub fn cross_entropy(probs: &Matrix, labels: &[usize]) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| -probs.get(r, y).max(f64::MIN_POSITIVE).ln())
        .sum();
    total / labels.len().max(1) as f64
}

/// `θ ← θ − lr·∇θ`. Masked weights stay exactly zero.
pub fn sgd_step(model: &mut MlpModel, grads: &Gradients, lr: f64) -> Result<()> {
    if grads.layers.len() != model.layers.len() {
        return Err(Error::InvalidArgument("gradient layout mismatch".into()));
    }
    for (l, (gp, d)) in grads.layers.iter().zip(&model.layers).enumerate() {
        if gp.weights.shape() != d.weights.shape() || gp.bias.len() != d.bias.len() {
            return Err(Error::Shape {
                layer: l,
                expected: format!("{:?}", d.weights.shape()),
                actual: format!("{:?}", gp.weights.shape()),
            });
        }
        if gp.gate.as_ref().map(Vec::len) != model.gate(l).map(ForgettingLayerState::len) {
            return Err(Error::InvalidArgument(format!("gate gradient mismatch at layer {l}")));
        }
    }
    for r in grads.refs() {
        if !grads.get(r).is_finite() {
            if let ParamRef::Weight { layer, .. } = r {
                if model.layers[layer].mask.is_some() {
                    continue;
                }
            }
            return Err(Error::NonFiniteGradient { param: r.to_string() });
        }
    }
    if lr == 0.0 {
        return Ok(());
    }
    for (l, gp) in grads.layers.iter().enumerate() {
        let d = &mut model.layers[l];
        for (w, g) in d.weights.data_mut().iter_mut().zip(gp.weights.data()) {
            *w -= lr * g;
        }
        for (b, g) in d.bias.iter_mut().zip(&gp.bias) {
            *b -= lr * g;
        }
        if let (Some(st), Some(gg)) = (model.gates.get_mut(l).and_then(Option::as_mut), &gp.gate) {
            for (w, g) in st.weights_mut().iter_mut().zip(gg) {
                *w -= lr * g;
            }
        }
    }
    model.enforce_masks();
    model.touch();
    Ok(())
}

/// `θ ← θ − lr·∇θ` for a single detached layer.
pub fn sgd_step_layer(layer: &mut DenseLayer, grads: &LayerParams, lr: f64) -> Result<()> {
    if grads.weights.shape() != layer.weights.shape() || grads.bias.len() != layer.bias.len() {
        return Err(Error::InvalidArgument("layer gradient shape mismatch".into()));
    }
    if !grads.weights.is_finite() || grads.bias.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { param: "head".into() });
    }
    for (w, g) in layer.weights.data_mut().iter_mut().zip(grads.weights.data()) {
        *w -= lr * g;
    }
    for (b, g) in layer.bias.iter_mut().zip(&grads.bias) {
        *b -= lr * g;
    }
    if let Some(mask) = &layer.mask {
        for (w, &keep) in layer.weights.data_mut().iter_mut().zip(mask) {
            if !keep {
                *w = 0.0;
            }
        }
    }
    Ok(())
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss_task: f64,
    pub loss_inhibition: f64,
    pub loss_lateral: f64,
    pub loss_total: f64,
}

/// Mean gate value of one unit over one epoch of training batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SigmaRecord {
    pub epoch: usize,
    pub layer: usize,
    pub neuron: usize,
    pub sigma_mean: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub losses: Vec<LossRecord>,
    pub sigma: Vec<SigmaRecord>,
}

/// Extra objective term added on every step (e.g. a consolidation penalty).
/// Adds its gradient into `grads` and returns its value.
pub trait Penalty {
    fn apply(&self, model: &MlpModel, grads: &mut Gradients) -> f64;
}

/// Train with the optimiser settings stored in the model's config.
pub fn train(model: &mut MlpModel, data: &dyn Samples) -> Result<TrainLog> {
    let schedule = model.config().schedule();
    train_with(model, data, schedule, None)
}

/// Mini-batch SGD over `data`. Batch order for epoch `e` is fixed by
/// `schedule.seed ^ e`.
pub fn train_with(
    model: &mut MlpModel,
    data: &dyn Samples,
    schedule: Schedule,
    penalty: Option<&dyn Penalty>,
) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.input_dim() != model.input_dim() {
        return Err(Error::Shape {
            layer: 0,
            expected: format!("{} input columns", model.input_dim()),
            actual: format!("{} columns", data.input_dim()),
        });
    }
    if schedule.batch_size == 0 || !(schedule.lr > 0.0) {
        return Err(Error::InvalidConfig("batch_size must be >= 1 and lr > 0".into()));
    }
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..schedule.epochs {
        let mut sigma_sum: Vec<Option<Vec<f64>>> = model
            .gates
            .iter()
            .map(|g| g.as_ref().map(|g| vec![0.0; g.len()]))
            .collect();
        let mut seen = 0usize;
        for idx in batch_iter(data.len(), schedule.batch_size, schedule.seed, epoch as u64) {
            let (x, y) = data.gather(&idx);
            let trace = model.forward(&x)?;
            let (mut grads, mut loss) = model.backward(&trace, &y)?;
            if let Some(p) = penalty {
                let extra = p.apply(model, &mut grads);
                loss.penalty += extra;
                loss.total += extra;
            }
            if !loss.total.is_finite() {
                return Err(Error::Diverged { step, loss: loss.total });
            }
            for (acc, s) in sigma_sum.iter_mut().zip(&trace.sigma) {
                if let (Some(acc), Some(s)) = (acc.as_mut(), s) {
                    for (a, c) in acc.iter_mut().zip(s.col_sums()) {
                        *a += c;
                    }
                }
            }
            seen += idx.len();
            sgd_step(model, &grads, schedule.lr).map_err(|e| match e {
                Error::NonFiniteGradient { .. } => Error::Diverged { step, loss: loss.total },
                other => other,
            })?;
            log.losses.push(LossRecord {
                step,
                epoch,
                loss_task: loss.task,
                loss_inhibition: loss.inhibition,
                loss_lateral: loss.lateral,
                loss_total: loss.total,
            });
            step += 1;
        }
        for (layer, acc) in sigma_sum.iter().enumerate() {
            if let Some(acc) = acc {
                for (neuron, s) in acc.iter().enumerate() {
                    log.sigma.push(SigmaRecord {
                        epoch,
                        layer,
                        neuron,
                        sigma_mean: s / seen as f64,
                    });
                }
            }
        }
    }
    Ok(log)
}

/// Accuracy overall and per class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    pub predictions: Vec<usize>,
}

pub const EVAL_BATCH: usize = 1000;

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn evaluate_impl(model: &MlpModel, data: &dyn Samples, ablate: Option<(usize, &[bool])>) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let c = model.num_classes();
    let mut correct = vec![0usize; c];
    let mut total = vec![0usize; c];
    let mut predictions = Vec::with_capacity(data.len());
    let n = data.len();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (x, y) = data.gather(&idx);
        let trace = match ablate {
            Some((l, removed)) => model.forward_ablated(&x, l, removed)?,
            None => model.forward(&x)?,
        };
        for (r, &label) in y.iter().enumerate() {
            let p = argmax(trace.logits().row(r));
            predictions.push(p);
            if label < c {
                total[label] += 1;
                if p == label {
                    correct[label] += 1;
                }
            }
        }
        start = end;
    }
    let all: usize = correct.iter().sum();
    Ok(Evaluation {
        accuracy: all as f64 / n as f64,
        per_class: correct
            .iter()
            .zip(&total)
            .map(|(&k, &t)| if t == 0 { 0.0 } else { k as f64 / t as f64 })
            .collect(),
        predictions,
    })
}

pub fn evaluate(model: &MlpModel, data: &dyn Samples) -> Result<Evaluation> {
    evaluate_impl(model, data, None)
}

pub fn evaluate_ablated(model: &MlpModel, data: &dyn Samples, layer: usize, removed: &[bool]) -> Result<Evaluation> {
    evaluate_impl(model, data, Some((layer, removed)))
}
