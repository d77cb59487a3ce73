//! The network: MLP backbone, one task-attention module (TAM) per task, an
//! expanding linear classifier and an optional EMA shadow copy.
//!
//! A TAM maps the backbone representation `r` to a vector of transformation
//! coefficients that gates `r` element-wise before the classifier.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Sgd, Tape, Tensor, Var};
use crate::seed::rng_for;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    None,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(v),
            Activation::Tanh => tape.tanh(v),
            Activation::Sigmoid => tape.sigmoid(v),
            Activation::None => v,
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::None => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `[out × in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    /// Fan-in scaled uniform init, `U(-1/√in, 1/√in)` for weights and bias.
    pub fn init(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let w = draw(output * input);
        let b = draw(output);
        Linear {
            weight: Tensor::new(vec![output, input], w).expect("sized"),
            bias: Tensor::vector(b),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// `act(x · Wᵀ + b)` for each row of `x`, without a tape.
    fn eval_rows(&self, x: &Tensor, act: Activation) -> Tensor {
        let (rows, out) = (x.rows(), self.output_dim());
        let mut data = Vec::with_capacity(rows * out);
        for r in 0..rows {
            let xr = x.row(r);
            for o in 0..out {
                let w = self.weight.row(o);
                let z: f64 = xr.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()
                    + self.bias.data()[o];
                data.push(act.eval(z));
            }
        }
        Tensor::new(vec![rows, out], data).expect("sized")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TamVariant {
    /// Undercomplete autoencoder `D → d → D`.
    Autoencoder,
    /// Two-layer perceptron `D → D → D`.
    Mlp,
    /// Single linear layer `D → D`.
    Linear,
    /// No learnable layer: the activation applied to `r` directly.
    GateOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "TamConfigSpec")]
pub struct TamConfig {
    pub variant: TamVariant,
    /// Latent width `d` of the autoencoder variant.
    pub bottleneck: usize,
    pub encoder_activation: Activation,
    pub output_activation: Activation,
}

/// Partial TAM config; missing fields come from the variant's preset.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TamConfigSpec {
    #[serde(default = "default_variant")]
    variant: TamVariant,
    #[serde(default = "default_bottleneck")]
    bottleneck: usize,
    encoder_activation: Option<Activation>,
    output_activation: Option<Activation>,
}

fn default_variant() -> TamVariant {
    TamVariant::Autoencoder
}

fn default_bottleneck() -> usize {
    8
}

impl From<TamConfigSpec> for TamConfig {
    fn from(s: TamConfigSpec) -> Self {
        let p = TamConfig::preset(s.variant, s.bottleneck);
        TamConfig {
            encoder_activation: s.encoder_activation.unwrap_or(p.encoder_activation),
            output_activation: s.output_activation.unwrap_or(p.output_activation),
            ..p
        }
    }
}

impl Default for TamConfig {
    fn default() -> Self {
        TamConfig::preset(default_variant(), default_bottleneck())
    }
}

impl TamConfig {
    /// Activations used for each variant in the TAM ablation grid.
    pub fn preset(variant: TamVariant, bottleneck: usize) -> Self {
        let (encoder_activation, output_activation) = match variant {
            TamVariant::Autoencoder | TamVariant::Mlp => (Activation::Relu, Activation::Sigmoid),
            TamVariant::Linear => (Activation::None, Activation::None),
            TamVariant::GateOnly => (Activation::None, Activation::Sigmoid),
        };
        TamConfig {
            variant,
            bottleneck,
            encoder_activation,
            output_activation,
        }
    }

    /// Parameters of one TAM over a `dim`-wide representation.
    pub fn param_count(&self, dim: usize) -> usize {
        match self.variant {
            TamVariant::Autoencoder => 2 * dim * self.bottleneck + self.bottleneck + dim,
            TamVariant::Mlp => 2 * (dim * dim + dim),
            TamVariant::Linear => dim * dim + dim,
            TamVariant::GateOnly => 0,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.variant == TamVariant::Autoencoder && !(1..dim).contains(&self.bottleneck) {
            return Err(Error::Config(format!(
                "autoencoder TAM must be undercomplete: bottleneck {} vs representation {dim}",
                self.bottleneck
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tam {
    pub config: TamConfig,
    /// Feature extractor (first layer); absent for `Linear` and `GateOnly`.
    pub encoder: Option<Linear>,
    /// Feature selector (output layer); absent for `GateOnly`.
    pub selector: Option<Linear>,
}

impl Tam {
    pub fn new(config: TamConfig, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate(dim)?;
        let (encoder, selector) = match config.variant {
            TamVariant::Autoencoder => (
                Some(Linear::init(dim, config.bottleneck, rng)),
                Some(Linear::init(config.bottleneck, dim, rng)),
            ),
            TamVariant::Mlp => (
                Some(Linear::init(dim, dim, rng)),
                Some(Linear::init(dim, dim, rng)),
            ),
            TamVariant::Linear => (None, Some(Linear::init(dim, dim, rng))),
            TamVariant::GateOnly => (None, None),
        };
        Ok(Tam {
            config,
            encoder,
            selector,
        })
    }

    pub fn param_count(&self) -> usize {
        self.encoder.as_ref().map_or(0, Linear::param_count)
            + self.selector.as_ref().map_or(0, Linear::param_count)
    }

    fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.encoder.iter().chain(self.selector.iter())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.encoder.iter_mut().chain(self.selector.iter_mut())
    }

    /// Encoder output after its activation; `None` when there is no
    /// separate encoder layer.
    pub fn encode(&self, r: &Tensor) -> Option<Tensor> {
        self.encoder
            .as_ref()
            .map(|e| e.eval_rows(r, self.config.encoder_activation))
    }

    /// Transformation coefficients for each row of `r`.
    pub fn forward(&self, r: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = BoundTam::bind(self, &mut tape, false);
        let rv = tape.constant(r.clone());
        let out = bound.forward(&mut tape, rv)?;
        Ok(tape.value(out).clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    /// One row per class, `[C × D]`.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Classifier {
    fn new(dim: usize, with_bias: bool) -> Self {
        Classifier {
            weight: Tensor::zeros(&[0, dim]),
            bias: with_bias.then(|| Tensor::zeros(&[0])),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    /// Appends rows; existing rows are untouched.
    fn expand(&mut self, rows: &[Vec<f64>], biases: &[f64]) {
        let dim = self.weight.cols();
        let c = self.num_classes() + rows.len();
        let mut w = std::mem::replace(&mut self.weight, Tensor::zeros(&[0, dim])).into_data();
        rows.iter().for_each(|r| w.extend_from_slice(r));
        self.weight = Tensor::new(vec![c, dim], w).expect("sized");
        if let Some(b) = self.bias.take() {
            let mut b = b.into_data();
            b.extend_from_slice(biases);
            self.bias = Some(Tensor::vector(b));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInit {
    Zero,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// Width `D` of the common representation.
    pub repr_dim: usize,
    pub use_tams: bool,
    pub tam: TamConfig,
    pub classifier_bias: bool,
    pub classifier_init: ClassifierInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 32,
            hidden: vec![128],
            repr_dim: 64,
            use_tams: true,
            tam: TamConfig::default(),
            classifier_bias: true,
            classifier_init: ClassifierInit::Zero,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.repr_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.use_tams {
            self.tam.validate(self.repr_dim)?;
        }
        Ok(())
    }
}

/// Parameter tensors of one copy of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    /// ReLU follows every layer, including the last.
    pub backbone: Vec<Linear>,
    pub tams: Vec<Tam>,
    pub classifier: Classifier,
}

/// Which parameter groups receive gradients when a network is bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub backbone: bool,
    pub classifier: bool,
    /// Index of the only TAM that is trainable.
    pub tam: Option<usize>,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        backbone: false,
        classifier: false,
        tam: None,
    };

    pub fn all_but_past_tams(current_tam: Option<usize>) -> Self {
        Trainable {
            backbone: true,
            classifier: true,
            tam: current_tam,
        }
    }
}

impl Network {
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.backbone {
            out.extend([&l.weight, &l.bias]);
        }
        for tam in &self.tams {
            for l in tam.layers() {
                out.extend([&l.weight, &l.bias]);
            }
        }
        out.push(&self.classifier.weight);
        out.extend(self.classifier.bias.iter());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.backbone {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for tam in &mut self.tams {
            for l in tam.layers_mut() {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out.push(&mut self.classifier.weight);
        out.extend(self.classifier.bias.iter_mut());
        out
    }

    pub fn repr_dim(&self) -> usize {
        self.backbone.last().map_or(0, Linear::output_dim)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: Trainable) -> BoundNetwork {
        let mut order = Vec::new();
        let mut leaf = |tape: &mut Tape, t: &Tensor, train: bool| {
            let v = if train {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            order.push(v);
            v
        };
        let backbone = self
            .backbone
            .iter()
            .map(|l| {
                (
                    leaf(tape, &l.weight, trainable.backbone),
                    leaf(tape, &l.bias, trainable.backbone),
                )
            })
            .collect();
        let tams = self
            .tams
            .iter()
            .enumerate()
            .map(|(k, tam)| {
                let train = trainable.tam == Some(k);
                let mut layer = |l: &Linear| (leaf(tape, &l.weight, train), leaf(tape, &l.bias, train));
                let encoder = tam.encoder.as_ref().map(&mut layer);
                let selector = tam.selector.as_ref().map(&mut layer);
                BoundTam {
                    config: tam.config,
                    encoder,
                    selector,
                }
            })
            .collect();
        let cw = leaf(tape, &self.classifier.weight, trainable.classifier);
        let cb = self
            .classifier
            .bias
            .as_ref()
            .map(|b| leaf(tape, b, trainable.classifier));
        BoundNetwork {
            backbone,
            tams,
            classifier: (cw, cb),
            order,
        }
    }

    /// Applies one SGD step using the gradients recorded on `tape`.
    pub fn apply_sgd(&mut self, bound: &BoundNetwork, tape: &Tape, sgd: &Sgd) -> Result<()> {
        for (t, v) in self.tensors_mut().into_iter().zip(&bound.order) {
            if let Some(g) = tape.grad(*v) {
                sgd.step(t, g)?;
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn frozen<T>(&self, f: impl FnOnce(&mut Tape, &BoundNetwork) -> Result<T>) -> Result<T> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, Trainable::NONE);
        f(&mut tape, &bound)
    }

    /// Backbone output for each row of `x`.
    pub fn representation(&self, x: &Tensor) -> Result<Tensor> {
        self.frozen(|tape, b| {
            let xv = tape.constant(x.clone());
            let r = b.represent(tape, xv)?;
            Ok(tape.value(r).clone())
        })
    }

    /// `g(τᵏ(r) ⊗ r)` with `r = f(x)`, or `g(f(x))` when `tam` is `None`.
    pub fn logits(&self, x: &Tensor, tam: Option<usize>) -> Result<Tensor> {
        self.frozen(|tape, b| {
            let xv = tape.constant(x.clone());
            let out = match tam {
                Some(k) => b.forward_with_tam(tape, xv, k)?,
                None => b.forward_plain(tape, xv)?,
            };
            Ok(tape.value(out).clone())
        })
    }

    /// Per-row logits where row `i` is gated by TAM `routes[i]`.
    pub fn logits_routed(&self, x: &Tensor, routes: &[usize]) -> Result<Tensor> {
        self.frozen(|tape, b| {
            let xv = tape.constant(x.clone());
            let r = b.represent(tape, xv)?;
            let out = b.forward_routed(tape, r, routes)?;
            Ok(tape.value(out).clone())
        })
    }

    /// TAM outputs `τᵏ(r)` for every TAM.
    pub fn gates(&self, r: &Tensor) -> Result<Vec<Tensor>> {
        self.tams.iter().map(|t| t.forward(r)).collect()
    }

    /// Matching criterion: for each row of `r`, the TAM whose output has
    /// the smallest squared distance to `r`. Ties go to the lowest index.
    pub fn route(&self, r: &Tensor) -> Result<Vec<usize>> {
        if self.tams.is_empty() {
            return Err(Error::arg("no TAMs to route between"));
        }
        let gates = self.gates(r)?;
        Ok(route_rows(r, &gates.iter().collect::<Vec<_>>()))
    }
}

/// Row-wise argmin over `gates` of `‖gate_row − r_row‖²`.
pub fn route_rows(r: &Tensor, gates: &[&Tensor]) -> Vec<usize> {
    (0..r.rows())
        .map(|i| {
            let rr = r.row(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, g) in gates.iter().enumerate() {
                let d: f64 = g.row(i).iter().zip(rr).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct BoundTam {
    config: TamConfig,
    encoder: Option<(Var, Var)>,
    selector: Option<(Var, Var)>,
}

impl BoundTam {
    fn bind(tam: &Tam, tape: &mut Tape, trainable: bool) -> Self {
        let mut layer = |l: &Linear| {
            if trainable {
                (tape.param(l.weight.clone()), tape.param(l.bias.clone()))
            } else {
                (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
            }
        };
        let encoder = tam.encoder.as_ref().map(&mut layer);
        let selector = tam.selector.as_ref().map(&mut layer);
        BoundTam {
            config: tam.config,
            encoder,
            selector,
        }
    }

    pub fn encode(&self, tape: &mut Tape, r: Var) -> Result<Option<Var>> {
        match self.encoder {
            Some((w, b)) => {
                let h = tape.linear(r, w, Some(b))?;
                Ok(Some(self.config.encoder_activation.apply(tape, h)))
            }
            None => Ok(None),
        }
    }

    pub fn forward(&self, tape: &mut Tape, r: Var) -> Result<Var> {
        let h = self.encode(tape, r)?.unwrap_or(r);
        let z = match self.selector {
            Some((w, b)) => tape.linear(h, w, Some(b))?,
            None => h,
        };
        Ok(self.config.output_activation.apply(tape, z))
    }

    pub fn encoder_vars(&self) -> Option<(Var, Var)> {
        self.encoder
    }

    pub fn selector_vars(&self) -> Option<(Var, Var)> {
        self.selector
    }
}

/// A [`Network`] whose tensors live on a tape.
#[derive(Clone, Debug)]
pub struct BoundNetwork {
    backbone: Vec<(Var, Var)>,
    tams: Vec<BoundTam>,
    classifier: (Var, Option<Var>),
    order: Vec<Var>,
}

impl BoundNetwork {
    /// Tape variables in [`Network::tensors`] order.
    pub fn vars(&self) -> &[Var] {
        &self.order
    }

    pub fn num_tams(&self) -> usize {
        self.tams.len()
    }

    pub fn tam(&self, k: usize) -> Result<&BoundTam> {
        self.tams
            .get(k)
            .ok_or_else(|| Error::arg(format!("TAM index {k} out of range ({})", self.tams.len())))
    }

    pub fn represent(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for &(w, b) in &self.backbone {
            let z = tape.linear(h, w, Some(b))?;
            h = tape.relu(z);
        }
        Ok(h)
    }

    pub fn gate(&self, tape: &mut Tape, k: usize, r: Var) -> Result<Var> {
        self.tam(k)?.forward(tape, r)
    }

    pub fn classify(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let (w, b) = self.classifier;
        if tape.value(w).rows() == 0 {
            return Err(Error::arg("classifier has no classes yet"));
        }
        tape.linear(h, w, b)
    }

    pub fn gated_logits(&self, tape: &mut Tape, gate: Var, r: Var) -> Result<Var> {
        let h = tape.mul(gate, r)?;
        self.classify(tape, h)
    }

    pub fn forward_with_tam(&self, tape: &mut Tape, x: Var, k: usize) -> Result<Var> {
        self.tam(k)?;
        let r = self.represent(tape, x)?;
        let g = self.gate(tape, k, r)?;
        self.gated_logits(tape, g, r)
    }

    pub fn forward_plain(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let r = self.represent(tape, x)?;
        self.classify(tape, r)
    }

    /// Gate built row by row from the TAMs named in `routes`. Rows not
    /// routed to a TAM receive no gradient through it.
    pub fn routed_gate(&self, tape: &mut Tape, r: Var, routes: &[usize]) -> Result<Var> {
        let rows = tape.value(r).rows();
        if routes.len() != rows {
            return Err(Error::dim("routed_gate", tape.value(r).shape(), &[routes.len()]));
        }
        let mut used: Vec<usize> = routes.to_vec();
        used.sort_unstable();
        used.dedup();
        if let [only] = used[..] {
            return self.gate(tape, only, r);
        }
        let cols = tape.value(r).cols();
        let mut acc: Option<Var> = None;
        for k in used {
            let g = self.gate(tape, k, r)?;
            let mut mask = Tensor::zeros(&[rows, cols]);
            for (i, _) in routes.iter().enumerate().filter(|(_, &t)| t == k) {
                mask.row_mut(i).fill(1.0);
            }
            let m = tape.constant(mask);
            let part = tape.mul(g, m)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, part)?,
                None => part,
            });
        }
        acc.ok_or_else(|| Error::arg("empty batch"))
    }

    pub fn forward_routed(&self, tape: &mut Tape, r: Var, routes: &[usize]) -> Result<Var> {
        let g = self.routed_gate(tape, r, routes)?;
        self.gated_logits(tape, g, r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmaConfig {
    pub enabled: bool,
    /// Decay `η`.
    pub decay: f64,
    /// Update rate `γ`: probability that a step updates the shadow.
    pub update_rate: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        EmaConfig {
            enabled: true,
            decay: 0.9,
            update_rate: 1.0,
        }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        if !unit(self.decay) || !unit(self.update_rate) {
            return Err(Error::Config("EMA decay and update rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Stochastically updated exponential moving average of the working model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmaShadow {
    pub net: Network,
    pub decay: f64,
    pub update_rate: f64,
    rng: ChaCha8Rng,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub backbone: usize,
    pub per_tam: Vec<usize>,
    pub classifier: usize,
    /// Parameters held by the EMA shadow (0 when disabled).
    pub ema: usize,
    pub total: usize,
}

impl ParameterCounts {
    pub fn tams(&self) -> usize {
        self.per_tam.iter().sum()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TamilModel {
    pub format_version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub tasks_started: usize,
    pub net: Network,
    pub ema: Option<EmaShadow>,
}

impl TamilModel {
    pub fn new(config: ModelConfig, ema: Option<EmaConfig>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "backbone-init", 0);
        let mut widths = vec![config.input_dim];
        widths.extend(&config.hidden);
        widths.push(config.repr_dim);
        let backbone = widths
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], &mut rng))
            .collect();
        let net = Network {
            backbone,
            tams: Vec::new(),
            classifier: Classifier::new(config.repr_dim, config.classifier_bias),
        };
        let ema = match ema {
            Some(e) if e.enabled => {
                e.validate()?;
                Some(EmaShadow {
                    net: net.clone(),
                    decay: e.decay,
                    update_rate: e.update_rate,
                    rng: rng_for(seed, "ema", 0),
                })
            }
            _ => None,
        };
        Ok(TamilModel {
            format_version: CHECKPOINT_VERSION,
            config,
            seed,
            tasks_started: 0,
            net,
            ema,
        })
    }

    pub fn num_tams(&self) -> usize {
        self.net.tams.len()
    }

    pub fn num_classes(&self) -> usize {
        self.net.classifier.num_classes()
    }

    /// Task boundary: a freshly initialised TAM (when TAMs are enabled)
    /// and `new_classes` classifier rows. The EMA shadow receives copies.
    pub fn add_task(&mut self, new_classes: usize) -> Result<()> {
        let index = self.tasks_started as u64;
        if self.config.use_tams {
            let mut rng = rng_for(self.seed, "tam-init", index);
            let tam = Tam::new(self.config.tam, self.config.repr_dim, &mut rng)?;
            if let Some(ema) = &mut self.ema {
                ema.net.tams.push(tam.clone());
            }
            self.net.tams.push(tam);
        }
        let dim = self.config.repr_dim;
        let mut rng = rng_for(self.seed, "classifier-init", index);
        let bound = 1.0 / (dim as f64).sqrt();
        let mut draw = || match self.config.classifier_init {
            ClassifierInit::Zero => 0.0,
            ClassifierInit::Uniform => rng.random_range(-bound..bound),
        };
        let rows: Vec<Vec<f64>> = (0..new_classes)
            .map(|_| (0..dim).map(|_| draw()).collect())
            .collect();
        let biases: Vec<f64> = (0..new_classes).map(|_| draw()).collect();
        self.net.classifier.expand(&rows, &biases);
        if let Some(ema) = &mut self.ema {
            ema.net.classifier.expand(&rows, &biases);
        }
        self.tasks_started += 1;
        Ok(())
    }

    pub fn forward_with_tam(&self, x: &Tensor, k: usize) -> Result<Tensor> {
        self.net.logits(x, Some(k))
    }

    pub fn ema_forward(&self, x: &Tensor, k: Option<usize>) -> Result<Tensor> {
        let ema = self.ema.as_ref().ok_or_else(|| Error::arg("EMA is disabled"))?;
        ema.net.logits(x, k)
    }

    pub fn ema_forward_routed(&self, x: &Tensor, routes: &[usize]) -> Result<Tensor> {
        let ema = self.ema.as_ref().ok_or_else(|| Error::arg("EMA is disabled"))?;
        ema.net.logits_routed(x, routes)
    }

    /// Draws `u ~ U(0,1)`; when `γ > u` every shadow parameter becomes
    /// `η·shadow + (1−η)·working`. Returns whether the update fired.
    pub fn ema_update(&mut self) -> Result<bool> {
        let ema = self.ema.as_mut().ok_or_else(|| Error::arg("EMA is disabled"))?;
        let u: f64 = ema.rng.random();
        if ema.update_rate <= u {
            return Ok(false);
        }
        let eta = ema.decay;
        for (s, w) in ema.net.tensors_mut().into_iter().zip(self.net.tensors()) {
            for (a, b) in s.data_mut().iter_mut().zip(w.data()) {
                *a = eta * *a + (1.0 - eta) * b;
            }
        }
        Ok(true)
    }

    pub fn count_parameters(&self) -> ParameterCounts {
        let backbone = self.net.backbone.iter().map(Linear::param_count).sum();
        let per_tam: Vec<usize> = self.net.tams.iter().map(Tam::param_count).collect();
        let classifier = self.net.classifier.param_count();
        let working = backbone + per_tam.iter().sum::<usize>() + classifier;
        let ema = self.ema.as_ref().map_or(0, |e| e.net.param_count());
        ParameterCounts {
            backbone,
            per_tam,
            classifier,
            ema,
            total: working + ema,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: TamilModel = serde_json::from_str(&fs::read_to_string(path)?)?;
        if model.format_version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint version {}",
                model.format_version
            )));
        }
        model.config.validate()?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg(input: usize, repr: usize, d: usize) -> ModelConfig {
        ModelConfig {
            input_dim: input,
            hidden: vec![8],
            repr_dim: repr,
            use_tams: true,
            tam: TamConfig::preset(TamVariant::Autoencoder, d),
            classifier_bias: true,
            classifier_init: ClassifierInit::Zero,
        }
    }

    fn zero_tam(dim: usize, d: usize) -> Tam {
        Tam {
            config: TamConfig::preset(TamVariant::Autoencoder, d),
            encoder: Some(Linear::zeros(dim, d)),
            selector: Some(Linear::zeros(d, dim)),
        }
    }

    #[test]
    fn partial_tam_config_uses_preset() {
        let c: TamConfig = serde_json::from_str(r#"{"variant": "linear"}"#).unwrap();
        assert_eq!(c, TamConfig::preset(TamVariant::Linear, 8));
        let c: TamConfig = serde_json::from_str(r#"{"bottleneck": 4, "output_activation": "tanh"}"#).unwrap();
        assert_eq!(c.output_activation, Activation::Tanh);
        assert_eq!(c.encoder_activation, Activation::Relu);
        assert_eq!(c.bottleneck, 4);
        let full = TamConfig::preset(TamVariant::Mlp, 3);
        let back: TamConfig = serde_json::from_str(&serde_json::to_string(&full).unwrap()).unwrap();
        assert_eq!(back, full);
        assert!(serde_json::from_str::<TamConfig>(r#"{"width": 4}"#).is_err());
    }

    #[test]
    fn zero_tam_outputs_half() {
        let tam = zero_tam(6, 2);
        let r = Tensor::from_rows(&[[1.0, -2.0, 3.0, 0.0, 5.0, 6.0]]).unwrap();
        let g = tam.forward(&r).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn gate_only_is_sigmoid_of_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tam = Tam::new(TamConfig::preset(TamVariant::GateOnly, 0), 3, &mut rng).unwrap();
        assert_eq!(tam.param_count(), 0);
        let r = Tensor::from_rows(&[[0.0, 2.0, -1.0]]).unwrap();
        let g = tam.forward(&r).unwrap();
        for (a, x) in g.data().iter().zip(r.data()) {
            assert_eq!(*a, sigmoid(*x));
        }
    }

    #[test]
    fn autoencoder_matches_hand_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tam = Tam::new(TamConfig::preset(TamVariant::Autoencoder, 2), 6, &mut rng).unwrap();
        let r: Vec<f64> = (0..6).map(|i| (i as f64 - 2.5) * 0.7).collect();
        let g = tam.forward(&Tensor::from_rows(std::slice::from_ref(&r)).unwrap()).unwrap();
        let enc = tam.encoder.as_ref().unwrap();
        let sel = tam.selector.as_ref().unwrap();
        let h: Vec<f64> = (0..2)
            .map(|j| {
                let z: f64 = (0..6).map(|i| enc.weight.data()[j * 6 + i] * r[i]).sum::<f64>()
                    + enc.bias.data()[j];
                z.max(0.0)
            })
            .collect();
        for o in 0..6 {
            let z: f64 = (0..2).map(|j| sel.weight.data()[o * 2 + j] * h[j]).sum::<f64>()
                + sel.bias.data()[o];
            let expected = 1.0 / (1.0 + (-z).exp());
            assert!((g.data()[o] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn undercomplete_is_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for d in [8, 9, 0] {
            assert!(Tam::new(TamConfig::preset(TamVariant::Autoencoder, d), 8, &mut rng).is_err());
        }
        assert!(TamilModel::new(cfg(4, 8, 8), None, 0).is_err());
    }

    #[test]
    fn tam_parameter_formula() {
        let c = TamConfig::preset(TamVariant::Autoencoder, 64);
        assert_eq!(c.param_count(512), 66_112);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tam = Tam::new(TamConfig::preset(TamVariant::Autoencoder, 3), 10, &mut rng).unwrap();
        assert_eq!(tam.param_count(), 2 * 10 * 3 + 3 + 10);
        for v in [TamVariant::Mlp, TamVariant::Linear, TamVariant::GateOnly] {
            let c = TamConfig::preset(v, 3);
            let tam = Tam::new(c, 10, &mut rng).unwrap();
            assert_eq!(tam.param_count(), c.param_count(10));
        }
    }

    #[test]
    fn add_task_grows_and_preserves() {
        let mut m = TamilModel::new(cfg(4, 6, 2), Some(EmaConfig::default()), 1).unwrap();
        assert_eq!(m.count_parameters().tams(), 0);
        m.add_task(2).unwrap();
        m.net.classifier.weight.data_mut().iter_mut().for_each(|v| *v = 0.25);
        let before = m.net.classifier.weight.clone();
        let tam0 = m.net.tams[0].clone();
        for _ in 0..4 {
            m.add_task(2).unwrap();
        }
        assert_eq!(m.num_tams(), 5);
        assert_eq!(m.num_classes(), 10);
        assert_eq!(&m.net.classifier.weight.data()[..before.len()], before.data());
        assert_eq!(m.net.tams[0], tam0);
        let ema = m.ema.as_ref().unwrap();
        assert_eq!(ema.net.tams.len(), 5);
        assert_eq!(ema.net.classifier.num_classes(), 10);
    }

    #[test]
    fn ema_doubles_parameter_count() {
        let mut with = TamilModel::new(cfg(4, 6, 2), Some(EmaConfig::default()), 1).unwrap();
        let mut without = TamilModel::new(cfg(4, 6, 2), None, 1).unwrap();
        for _ in 0..3 {
            with.add_task(2).unwrap();
            without.add_task(2).unwrap();
        }
        assert_eq!(with.count_parameters().total, 2 * without.count_parameters().total);
    }

    #[test]
    fn identity_and_annihilating_gates() {
        let mut m = TamilModel::new(cfg(3, 4, 2), None, 2).unwrap();
        m.add_task(3).unwrap();
        m.net.classifier.weight.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.1);
        let x = Tensor::from_rows(&[[0.5, -1.0, 2.0], [1.0, 1.0, 1.0]]).unwrap();
        // selector producing +∞-like pre-activations saturates sigmoid to 1
        let tam = &mut m.net.tams[0];
        let sel = tam.selector.as_mut().unwrap();
        sel.weight.data_mut().fill(0.0);
        sel.bias.data_mut().fill(1e3);
        let gated = m.forward_with_tam(&x, 0).unwrap();
        let plain = m.net.logits(&x, None).unwrap();
        assert_eq!(gated, plain);

        let sel = m.net.tams[0].selector.as_mut().unwrap();
        sel.bias.data_mut().fill(-1e3);
        let gated = m.forward_with_tam(&x, 0).unwrap();
        assert!(gated.data().iter().all(|&v| v == 0.0));
        assert!(m.forward_with_tam(&x, 1).is_err());
    }

    #[test]
    fn ema_edge_cases() {
        let base = || {
            let mut m = TamilModel::new(cfg(3, 4, 2), Some(EmaConfig::default()), 3).unwrap();
            m.add_task(2).unwrap();
            m.net.tensors_mut().into_iter().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v += 1.0));
            m
        };
        let mut m = base();
        m.ema.as_mut().unwrap().update_rate = 0.0;
        let shadow = m.ema.as_ref().unwrap().net.clone();
        for _ in 0..50 {
            assert!(!m.ema_update().unwrap());
        }
        assert_eq!(m.ema.as_ref().unwrap().net, shadow);

        let mut m = base();
        let e = m.ema.as_mut().unwrap();
        e.update_rate = 1.0;
        e.decay = 1.0;
        let shadow = e.net.clone();
        assert!(m.ema_update().unwrap());
        assert_eq!(m.ema.as_ref().unwrap().net, shadow);

        let mut m = base();
        let e = m.ema.as_mut().unwrap();
        e.update_rate = 1.0;
        e.decay = 0.0;
        assert!(m.ema_update().unwrap());
        assert_eq!(m.ema.as_ref().unwrap().net, m.net);
    }

    #[test]
    fn ema_forward_tracks_averaged_parameters() {
        let mut m = TamilModel::new(cfg(3, 4, 2), Some(EmaConfig::default()), 4).unwrap();
        m.add_task(2).unwrap();
        let x = Tensor::from_rows(&[[0.3, -0.2, 0.9]]).unwrap();
        assert_eq!(m.ema_forward(&x, Some(0)).unwrap(), m.forward_with_tam(&x, 0).unwrap());
        assert_eq!(m.ema_forward(&x, Some(0)).unwrap(), m.ema_forward(&x, Some(0)).unwrap());

        let old = m.net.clone();
        m.net.tensors_mut().into_iter().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = *v * 0.5 + 0.1));
        let e = m.ema.as_mut().unwrap();
        e.update_rate = 1.0;
        e.decay = 0.5;
        m.ema_update().unwrap();
        let mut averaged = old.clone();
        for (a, w) in averaged.tensors_mut().into_iter().zip(m.net.tensors()) {
            a.data_mut().iter_mut().zip(w.data()).for_each(|(s, w)| *s = 0.5 * *s + 0.5 * w);
        }
        let expected = averaged.logits(&x, Some(0)).unwrap();
        let got = m.ema_forward(&x, Some(0)).unwrap();
        for (a, b) in got.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn routing_picks_closest_gate_with_low_index_ties() {
        let r = Tensor::from_rows(&[[0.5, 0.5], [1.0, 0.0]]).unwrap();
        let g0 = Tensor::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap();
        let g1 = Tensor::from_rows(&[[0.5, 0.5], [1.0, 0.0]]).unwrap();
        assert_eq!(route_rows(&r, &[&g0, &g1]), vec![0, 1]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut m = TamilModel::new(cfg(3, 4, 2), Some(EmaConfig::default()), 9).unwrap();
        m.add_task(2).unwrap();
        m.add_task(2).unwrap();
        m.save(&path).unwrap();
        let mut loaded = TamilModel::load(&path).unwrap();
        assert_eq!(loaded.net, m.net);
        assert_eq!(loaded.ema.as_ref().unwrap().net, m.ema.as_ref().unwrap().net);
        let e = loaded.ema.as_mut().unwrap();
        e.update_rate = 0.5;
        m.ema.as_mut().unwrap().update_rate = 0.5;
        let a: Vec<bool> = (0..20).map(|_| loaded.ema_update().unwrap()).collect();
        let b: Vec<bool> = (0..20).map(|_| m.ema_update().unwrap()).collect();
        assert_eq!(a, b);
    }
}
