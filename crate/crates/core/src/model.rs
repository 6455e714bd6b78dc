//! The prediction model `f = h ∘ g`: an MLP encoder with a bottleneck (`g`)
//! followed by a linear classifier (`h`), trained with SGD + momentum under a
//! cosine learning-rate schedule.
//!
//! Gradients are derived by hand; there is no autodiff.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numkit::{softmax_rows, Matrix, Rng};
use crate::{Error, Result};

const FORMAT_MAGIC: &str = "dmapl-model";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    pub input_dim: usize,
    /// Widths of the ReLU encoder layers before the bottleneck.
    pub hidden_dims: Vec<usize>,
    pub bottleneck_dim: usize,
    pub num_classes: usize,
    pub bottleneck_activation: Activation,
}

impl ModelArch {
    /// (in, out) for every layer, in forward order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.bottleneck_dim);
        dims.push(self.num_classes);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.bottleneck_dim == 0
            || self.num_classes == 0
            || self.hidden_dims.contains(&0)
        {
            return Err(Error::InvalidArgument(format!(
                "all layer widths must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Fully connected layer computing `x Wᵀ + b`; `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_out, fan_in),
            bias: vec![0.0; fan_out],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut layer = Self::zeros(fan_in, fan_out);
        for w in layer.weight.data_mut() {
            *w = rng.uniform(-limit, limit);
        }
        layer
    }

    pub fn fan_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.rows()
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), self.fan_out());
        for i in 0..x.rows() {
            let xi = x.row(i);
            let oi = out.row_mut(i);
            for (o, (wj, bj)) in oi.iter_mut().zip(self.weight.iter_rows().zip(&self.bias)) {
                *o = bj + wj.iter().zip(xi).map(|(w, v)| w * v).sum::<f64>();
            }
        }
        out
    }

    fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Bottleneck outputs `g(x)`, the input of the classifier head.
    pub features: Matrix,
    pub logits: Matrix,
    pub probs: Matrix,
}

/// Per-layer parameter gradients, laid out like [`Model::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| Dense::zeros(l.fan_in(), l.fan_out()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: ModelArch,
    layers: Vec<Dense>,
}

struct Trace {
    /// Input of each layer; `inputs[0]` is the batch.
    inputs: Vec<Matrix>,
    /// Pre-activation output of each layer.
    pre: Vec<Matrix>,
}

impl Model {
    pub fn new(arch: ModelArch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| Dense::glorot(i, o, rng))
            .collect();
        Ok(Self { arch, layers })
    }

    pub fn from_layers(arch: ModelArch, layers: Vec<Dense>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "expected {} layers, got {}",
                shapes.len(),
                layers.len()
            )));
        }
        for (k, ((i, o), l)) in shapes.iter().zip(&layers).enumerate() {
            if (l.fan_in(), l.fan_out()) != (*i, *o) || l.bias.len() != *o {
                return Err(Error::ArchitectureMismatch(format!(
                    "layer {k} is {}x{}, expected {o}x{i}",
                    l.fan_out(),
                    l.fan_in()
                )));
            }
        }
        Ok(Self { arch, layers })
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    /// Number of layers that belong to the encoder backbone (everything
    /// before the bottleneck).
    pub fn backbone_layers(&self) -> usize {
        self.arch.hidden_dims.len()
    }

    fn activation(&self, layer: usize) -> Activation {
        let last = self.layers.len() - 1;
        if layer == last {
            Activation::Identity
        } else if layer == last - 1 {
            self.arch.bottleneck_activation
        } else {
            Activation::Relu
        }
    }

    fn trace(&self, batch: &Matrix) -> Result<Trace> {
        if batch.cols() != self.arch.input_dim {
            return Err(Error::Shape(format!(
                "batch has {} columns, model expects {}",
                batch.cols(),
                self.arch.input_dim
            )));
        }
        let mut inputs = vec![batch.clone()];
        let mut pre = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&inputs[k]);
            if k + 1 < self.layers.len() {
                let mut a = z.clone();
                if self.activation(k) == Activation::Relu {
                    a.map_inplace(|v| v.max(0.0));
                }
                inputs.push(a);
            }
            pre.push(z);
        }
        Ok(Trace { inputs, pre })
    }

    pub fn forward(&self, batch: &Matrix) -> Result<ForwardOutput> {
        let mut trace = self.trace(batch)?;
        let logits = trace.pre.pop().expect("model has layers");
        let features = trace.inputs.pop().expect("model has layers");
        let probs = softmax_rows(&logits)?;
        Ok(ForwardOutput {
            features,
            logits,
            probs,
        })
    }

    /// Exact parameter gradients given `∂loss/∂logits`. The forward pass is
    /// recomputed; ReLU'(0) is taken as 0.
    pub fn backward(&self, batch: &Matrix, grad_logits: &Matrix) -> Result<Gradients> {
        if grad_logits.rows() != batch.rows() || grad_logits.cols() != self.arch.num_classes {
            return Err(Error::Shape(format!(
                "logit gradient is {}x{}, expected {}x{}",
                grad_logits.rows(),
                grad_logits.cols(),
                batch.rows(),
                self.arch.num_classes
            )));
        }
        let trace = self.trace(batch)?;
        let mut grads = Gradients::zeros_like(self);
        let mut delta = grad_logits.clone();
        for k in (0..self.layers.len()).rev() {
            let input = &trace.inputs[k];
            let g = &mut grads.layers[k];
            for n in 0..delta.rows() {
                let d = delta.row(n);
                let x = input.row(n);
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    g.bias[o] += dv;
                    for (gw, xv) in g.weight.row_mut(o).iter_mut().zip(x) {
                        *gw += dv * xv;
                    }
                }
            }
            if k == 0 {
                break;
            }
            let w = &self.layers[k].weight;
            let mut prev = Matrix::zeros(delta.rows(), w.cols());
            for n in 0..delta.rows() {
                let p = prev.row_mut(n);
                for (o, &dv) in delta.row(n).iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    for (pv, wv) in p.iter_mut().zip(w.row(o)) {
                        *pv += dv * wv;
                    }
                }
            }
            if self.activation(k - 1) == Activation::Relu {
                let z = &trace.pre[k - 1];
                for (pv, zv) in prev.data_mut().iter_mut().zip(z.data()) {
                    if *zv <= 0.0 {
                        *pv = 0.0;
                    }
                }
            }
            delta = prev;
        }
        Ok(grads)
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    /// Versioned plain-text serialization with 17 significant digits.
    pub fn to_text(&self) -> String {
        let a = &self.arch;
        let mut s = String::new();
        let join = |v: &[usize]| {
            v.iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(s, "{FORMAT_MAGIC} {FORMAT_VERSION}");
        let _ = writeln!(s, "input_dim {}", a.input_dim);
        let _ = writeln!(s, "hidden_dims {}", join(&a.hidden_dims));
        let _ = writeln!(s, "bottleneck_dim {}", a.bottleneck_dim);
        let _ = writeln!(s, "num_classes {}", a.num_classes);
        let _ = writeln!(s, "activation relu");
        let _ = writeln!(s, "bottleneck_activation {}", a.bottleneck_activation.name());
        let _ = writeln!(s, "layers {}", self.layers.len());
        let fmt_row = |row: &[f64]| {
            row.iter()
                .map(|v| format!("{v:.16e}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        for (k, l) in self.layers.iter().enumerate() {
            let _ = writeln!(s, "layer {k} {} {}", l.fan_out(), l.fan_in());
            for row in l.weight.iter_rows() {
                let _ = writeln!(s, "{}", fmt_row(row));
            }
            let _ = writeln!(s, "{}", fmt_row(&l.bias));
        }
        s
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut r = LineReader::new(text, origin);

        let (n, v) = r.keyed(FORMAT_MAGIC)?;
        if v != [FORMAT_VERSION.to_string()] {
            return Err(r.error(n, format!("unsupported model format version {v:?}")));
        }
        let input_dim = r.keyed_usize("input_dim")?;
        let (n, v) = r.keyed("hidden_dims")?;
        let hidden_dims = v
            .iter()
            .map(|s| r.usize_at(n, s))
            .collect::<Result<Vec<_>>>()?;
        let bottleneck_dim = r.keyed_usize("bottleneck_dim")?;
        let num_classes = r.keyed_usize("num_classes")?;
        let (n, v) = r.keyed("activation")?;
        if v != ["relu"] {
            return Err(r.error(n, format!("unsupported encoder activation {v:?}")));
        }
        let (n, v) = r.keyed("bottleneck_activation")?;
        let bottleneck_activation = v
            .first()
            .and_then(|s| Activation::parse(s))
            .ok_or_else(|| r.error(n, format!("unknown activation {v:?}")))?;
        let arch = ModelArch {
            input_dim,
            hidden_dims,
            bottleneck_dim,
            num_classes,
            bottleneck_activation,
        };
        let shapes = arch.layer_shapes();
        let (n, v) = r.keyed("layers")?;
        let count = r.usize_at(n, v.first().map_or("", String::as_str))?;
        if count != shapes.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "{}:{n}: file declares {count} layers but its dimensions imply {}",
                origin.display(),
                shapes.len()
            )));
        }

        let mut layers = Vec::with_capacity(count);
        for (k, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let (n, v) = r.keyed("layer")?;
            if v != [k.to_string(), fan_out.to_string(), fan_in.to_string()] {
                return Err(Error::ArchitectureMismatch(format!(
                    "{}:{n}: layer header {v:?} does not match expected [{k}, {fan_out}, {fan_in}]",
                    origin.display()
                )));
            }
            let mut weight = Vec::with_capacity(fan_in * fan_out);
            for _ in 0..fan_out {
                weight.extend(r.floats(fan_in)?);
            }
            let bias = r.floats(fan_out)?;
            layers.push(Dense {
                weight: Matrix::from_vec(fan_out, fan_in, weight)?,
                bias,
            });
        }
        if let Some((n, l)) = r.next_line() {
            return Err(Error::ArchitectureMismatch(format!(
                "{}:{n}: trailing content '{l}' after the last declared layer",
                origin.display()
            )));
        }
        Model::from_layers(arch, layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }

    /// Loads a model and checks it matches `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &ModelArch) -> Result<Self> {
        let model = Self::load(path)?;
        if model.arch() != expected {
            return Err(Error::ArchitectureMismatch(format!(
                "file has {:?}, expected {:?}",
                model.arch(),
                expected
            )));
        }
        Ok(model)
    }
}

struct LineReader<'a> {
    lines: Box<dyn Iterator<Item = (usize, &'a str)> + 'a>,
    origin: &'a Path,
}

impl<'a> LineReader<'a> {
    fn new(text: &'a str, origin: &'a Path) -> Self {
        let lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        Self {
            lines: Box::new(lines),
            origin,
        }
    }

    fn error(&self, line: usize, message: String) -> Error {
        Error::parse(self.origin, line, message)
    }

    fn next_line(&mut self) -> Option<(usize, &'a str)> {
        self.lines.next()
    }

    fn expect_line(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.next_line()
            .ok_or_else(|| self.error(0, format!("unexpected end of file, expected {what}")))
    }

    fn keyed(&mut self, key: &str) -> Result<(usize, Vec<String>)> {
        let (n, l) = self.expect_line(key)?;
        let mut parts = l.split_whitespace();
        if parts.next() != Some(key) {
            return Err(self.error(n, format!("expected '{key}', found '{l}'")));
        }
        Ok((n, parts.map(str::to_string).collect()))
    }

    fn usize_at(&self, line: usize, s: &str) -> Result<usize> {
        s.parse()
            .map_err(|_| self.error(line, format!("expected an integer, found '{s}'")))
    }

    fn keyed_usize(&mut self, key: &str) -> Result<usize> {
        let (n, v) = self.keyed(key)?;
        if v.len() != 1 {
            return Err(self.error(n, format!("'{key}' takes exactly one value")));
        }
        self.usize_at(n, &v[0])
    }

    fn floats(&mut self, len: usize) -> Result<Vec<f64>> {
        let (n, l) = self.expect_line("parameter row")?;
        let row = l
            .split_whitespace()
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| self.error(n, format!("bad parameter '{s}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != len {
            return Err(self.error(n, format!("expected {len} values, found {}", row.len())));
        }
        Ok(row)
    }
}

/// `η_1 + ½(η_0 − η_1)(1 + cos(tπ/N))`. Steps past `N` are clamped to `η_1`.
pub fn cosine_lr(t: usize, total_steps: usize, eta_0: f64, eta_1: f64) -> f64 {
    let n = total_steps.max(1);
    if t > n {
        log::warn!("lr step {t} exceeds schedule length {n}; clamping to eta_1");
        return eta_1;
    }
    // Endpoints are returned verbatim; the formula itself can be off by an ulp.
    if t == 0 {
        return eta_0;
    }
    if t == n {
        return eta_1;
    }
    eta_1 + 0.5 * (eta_0 - eta_1) * (1.0 + (t as f64 * std::f64::consts::PI / n as f64).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub eta_0: f64,
    pub eta_1: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, t: usize) -> f64 {
        cosine_lr(t, self.total_steps, self.eta_0, self.eta_1)
    }
}

/// SGD with heavy-ball momentum and L2 weight decay on weights (not biases):
/// `v ← m·v + (g + λ·w)`, `w ← w − lr(t)·v`.
///
/// Backbone layers (the hidden encoder layers) may run on their own
/// schedule; by default everything follows `head`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub head: CosineSchedule,
    pub backbone: Option<CosineSchedule>,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64, head: CosineSchedule) -> Self {
        Self {
            momentum,
            weight_decay,
            head,
            backbone: None,
            velocity: None,
        }
    }

    pub fn with_backbone_schedule(mut self, schedule: CosineSchedule) -> Self {
        self.backbone = Some(schedule);
        self
    }

    pub fn velocity(&self) -> Option<&Gradients> {
        self.velocity.as_ref()
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients, t: usize) -> Result<()> {
        if grads.layers.len() != model.layers.len() {
            return Err(Error::Shape("gradient layer count differs from model".into()));
        }
        for (k, (g, l)) in grads.layers.iter().zip(&model.layers).enumerate() {
            if g.weight.rows() != l.weight.rows()
                || g.weight.cols() != l.weight.cols()
                || g.bias.len() != l.bias.len()
            {
                return Err(Error::Shape(format!("gradient for layer {k} has wrong shape")));
            }
            if !g.weight.is_finite() {
                return Err(Error::Divergence(format!("layer {k} weight gradient")));
            }
            if !g.bias.iter().all(|v| v.is_finite()) {
                return Err(Error::Divergence(format!("layer {k} bias gradient")));
            }
        }
        let backbone_layers = model.backbone_layers();
        let velocity = self
            .velocity
            .get_or_insert_with(|| Gradients::zeros_like(model));
        for (k, ((layer, g), v)) in model
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut velocity.layers)
            .enumerate()
        {
            let schedule = match self.backbone {
                Some(s) if k < backbone_layers => s,
                _ => self.head,
            };
            let lr = schedule.lr(t);
            for ((w, gw), vw) in layer
                .weight
                .data_mut()
                .iter_mut()
                .zip(g.weight.data())
                .zip(v.weight.data_mut())
            {
                *vw = self.momentum * *vw + (gw + self.weight_decay * *w);
                *w -= lr * *vw;
            }
            for ((b, gb), vb) in layer.bias.iter_mut().zip(&g.bias).zip(&mut v.bias) {
                *vb = self.momentum * *vb + gb;
                *b -= lr * *vb;
            }
            if !layer.is_finite() {
                return Err(Error::Divergence(format!("layer {k} parameters")));
            }
        }
        Ok(())
    }
}
