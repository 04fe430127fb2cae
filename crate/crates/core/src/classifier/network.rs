//! Small feed-forward convolutional network with exact reverse-mode gradients.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{softmax_cross_entropy, Classifier, ClassifierOutput};
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

/// Activation shape `(channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    AvgPool2,
    MaxPool2,
    Relu,
    /// Stride 1, zero "same" padding, odd square kernel.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        /// `[out][in][ky][kx]`
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
    Dense {
        inputs: usize,
        outputs: usize,
        /// `[out][in]`
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
}

impl Layer {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Layer::Conv2d {
            in_channels,
            out_channels,
            kernel,
            weights: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn dense(inputs: usize, outputs: usize) -> Self {
        Layer::Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn output_shape(&self, s: Shape) -> Result<Shape> {
        match self {
            Layer::AvgPool2 | Layer::MaxPool2 => {
                if s.h < 2 || s.w < 2 {
                    return Err(Error::shape(format!("cannot pool a {}x{} activation", s.h, s.w)));
                }
                Ok(Shape {
                    c: s.c,
                    h: s.h / 2,
                    w: s.w / 2,
                })
            }
            Layer::Relu => Ok(s),
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                weights,
                bias,
            } => {
                if s.c != *in_channels {
                    return Err(Error::shape(format!(
                        "conv expects {in_channels} channels, got {}",
                        s.c
                    )));
                }
                if kernel % 2 == 0 || weights.len() != out_channels * in_channels * kernel * kernel || bias.len() != *out_channels {
                    return Err(Error::shape("malformed conv layer"));
                }
                Ok(Shape {
                    c: *out_channels,
                    h: s.h,
                    w: s.w,
                })
            }
            Layer::Dense {
                inputs,
                outputs,
                weights,
                bias,
            } => {
                if s.len() != *inputs {
                    return Err(Error::shape(format!("dense expects {inputs} inputs, got {}", s.len())));
                }
                if weights.len() != inputs * outputs || bias.len() != *outputs {
                    return Err(Error::shape("malformed dense layer"));
                }
                Ok(Shape {
                    c: *outputs,
                    h: 1,
                    w: 1,
                })
            }
        }
    }

    fn params(&self) -> Option<(&[f64], &[f64])> {
        match self {
            Layer::Conv2d { weights, bias, .. } | Layer::Dense { weights, bias, .. } => Some((weights, bias)),
            _ => None,
        }
    }

    fn params_mut(&mut self) -> Option<(&mut Vec<f64>, &mut Vec<f64>)> {
        match self {
            Layer::Conv2d { weights, bias, .. } | Layer::Dense { weights, bias, .. } => Some((weights, bias)),
            _ => None,
        }
    }

    fn forward(&self, input: &[f64], s: Shape, out_shape: Shape) -> Vec<f64> {
        match self {
            Layer::AvgPool2 => pool_forward(input, s, out_shape, false),
            Layer::MaxPool2 => pool_forward(input, s, out_shape, true),
            Layer::Relu => input.iter().map(|&v| v.max(0.0)).collect(),
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                weights,
                bias,
            } => {
                let padded = pad(input, s, kernel / 2);
                conv_forward(&padded, s, *in_channels, *out_channels, *kernel, weights, bias)
            }
            Layer::Dense {
                inputs,
                outputs,
                weights,
                bias,
            } => (0..*outputs)
                .map(|o| {
                    let row = &weights[o * inputs..(o + 1) * inputs];
                    bias[o] + dot(row, input)
                })
                .collect(),
        }
    }

    /// Returns the input gradient, accumulating parameter gradients into
    /// `param_grad` when given.
    fn backward(
        &self,
        input: &[f64],
        s: Shape,
        out_shape: Shape,
        grad_out: &[f64],
        param_grad: Option<(&mut [f64], &mut [f64])>,
    ) -> Vec<f64> {
        match self {
            Layer::AvgPool2 => {
                let mut g = vec![0.0; s.len()];
                for c in 0..s.c {
                    for y in 0..out_shape.h {
                        for x in 0..out_shape.w {
                            let v = 0.25 * grad_out[(c * out_shape.h + y) * out_shape.w + x];
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                g[(c * s.h + 2 * y + dy) * s.w + 2 * x + dx] += v;
                            }
                        }
                    }
                }
                g
            }
            Layer::MaxPool2 => {
                let mut g = vec![0.0; s.len()];
                for c in 0..s.c {
                    for y in 0..out_shape.h {
                        for x in 0..out_shape.w {
                            let mut best = (c * s.h + 2 * y) * s.w + 2 * x;
                            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                let i = (c * s.h + 2 * y + dy) * s.w + 2 * x + dx;
                                if input[i] > input[best] {
                                    best = i;
                                }
                            }
                            g[best] += grad_out[(c * out_shape.h + y) * out_shape.w + x];
                        }
                    }
                }
                g
            }
            Layer::Relu => input
                .iter()
                .zip(grad_out)
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                .collect(),
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                weights,
                ..
            } => {
                if let Some((gw, gb)) = param_grad {
                    let padded = pad(input, s, kernel / 2);
                    conv_param_grad(&padded, s, *in_channels, *out_channels, *kernel, grad_out, gw, gb);
                }
                conv_input_grad(s, *in_channels, *out_channels, *kernel, weights, grad_out)
            }
            Layer::Dense {
                inputs,
                outputs,
                weights,
                ..
            } => {
                if let Some((gw, gb)) = param_grad {
                    for o in 0..*outputs {
                        let g = grad_out[o];
                        gb[o] += g;
                        if g != 0.0 {
                            axpy(g, input, &mut gw[o * inputs..(o + 1) * inputs]);
                        }
                    }
                }
                let mut gi = vec![0.0; *inputs];
                for o in 0..*outputs {
                    let g = grad_out[o];
                    if g != 0.0 {
                        axpy(g, &weights[o * inputs..(o + 1) * inputs], &mut gi);
                    }
                }
                gi
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn pool_forward(input: &[f64], s: Shape, o: Shape, max: bool) -> Vec<f64> {
    let mut out = vec![0.0; o.len()];
    for c in 0..s.c {
        for y in 0..o.h {
            let r0 = (c * s.h + 2 * y) * s.w;
            let r1 = r0 + s.w;
            for x in 0..o.w {
                let a = input[r0 + 2 * x];
                let b = input[r0 + 2 * x + 1];
                let cc = input[r1 + 2 * x];
                let d = input[r1 + 2 * x + 1];
                out[(c * o.h + y) * o.w + x] = if max {
                    a.max(b).max(cc).max(d)
                } else {
                    0.25 * (a + b + cc + d)
                };
            }
        }
    }
    out
}

fn pad(input: &[f64], s: Shape, p: usize) -> Vec<f64> {
    if p == 0 {
        return input.to_vec();
    }
    let hp = s.h + 2 * p;
    let wp = s.w + 2 * p;
    let mut out = vec![0.0; s.c * hp * wp];
    for c in 0..s.c {
        for y in 0..s.h {
            let src = &input[(c * s.h + y) * s.w..][..s.w];
            out[(c * hp + y + p) * wp + p..][..s.w].copy_from_slice(src);
        }
    }
    out
}

fn conv_forward(padded: &[f64], s: Shape, cin: usize, cout: usize, k: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let p = k / 2;
    let hp = s.h + 2 * p;
    let wp = s.w + 2 * p;
    let plane = s.h * s.w;
    let mut out = vec![0.0; cout * plane];
    for oc in 0..cout {
        let dst = &mut out[oc * plane..(oc + 1) * plane];
        dst.fill(b[oc]);
        for ic in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((oc * cin + ic) * k + ky) * k + kx];
                    for y in 0..s.h {
                        let src = &padded[(ic * hp + y + ky) * wp + kx..][..s.w];
                        axpy(wv, src, &mut dst[y * s.w..(y + 1) * s.w]);
                    }
                }
            }
        }
    }
    out
}

fn conv_input_grad(s: Shape, cin: usize, cout: usize, k: usize, w: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let p = k / 2;
    let hp = s.h + 2 * p;
    let wp = s.w + 2 * p;
    let plane = s.h * s.w;
    let mut gpad = vec![0.0; cin * hp * wp];
    for oc in 0..cout {
        let g = &grad_out[oc * plane..(oc + 1) * plane];
        for ic in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((oc * cin + ic) * k + ky) * k + kx];
                    for y in 0..s.h {
                        let dst = &mut gpad[(ic * hp + y + ky) * wp + kx..][..s.w];
                        axpy(wv, &g[y * s.w..(y + 1) * s.w], dst);
                    }
                }
            }
        }
    }
    let mut out = vec![0.0; cin * plane];
    for ic in 0..cin {
        for y in 0..s.h {
            out[(ic * s.h + y) * s.w..][..s.w].copy_from_slice(&gpad[(ic * hp + y + p) * wp + p..][..s.w]);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_param_grad(
    padded: &[f64],
    s: Shape,
    cin: usize,
    cout: usize,
    k: usize,
    grad_out: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let p = k / 2;
    let hp = s.h + 2 * p;
    let wp = s.w + 2 * p;
    let plane = s.h * s.w;
    for oc in 0..cout {
        let g = &grad_out[oc * plane..(oc + 1) * plane];
        gb[oc] += g.iter().sum::<f64>();
        for ic in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    for y in 0..s.h {
                        acc += dot(&g[y * s.w..(y + 1) * s.w], &padded[(ic * hp + y + ky) * wp + kx..][..s.w]);
                    }
                    gw[((oc * cin + ic) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
}

/// Per-layer parameter gradients, `None` for parameter-free layers.
pub type ParamGrads = Vec<Option<(Vec<f64>, Vec<f64>)>>;

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    /// Input of every layer, then the final logits.
    activations: Vec<Vec<f64>>,
}

impl ForwardTape {
    pub fn logits(&self) -> &[f64] {
        self.activations.last().expect("tape holds at least the input")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub input_height: usize,
    pub input_width: usize,
    pub labels: Vec<String>,
    pub layers: Vec<Layer>,
    #[serde(skip)]
    shapes: Vec<Shape>,
}

const MODEL_FORMAT: &str = "stripelight-model";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize)]
struct ModelDocOut<'a> {
    format: &'static str,
    version: u32,
    #[serde(flatten)]
    model: &'a Model,
}

#[derive(Deserialize)]
struct ModelDocIn {
    format: String,
    version: u32,
    #[serde(flatten)]
    model: Model,
}

impl Model {
    pub fn new(input_height: usize, input_width: usize, labels: Vec<String>, layers: Vec<Layer>) -> Result<Self> {
        let mut m = Self {
            input_height,
            input_width,
            labels,
            layers,
            shapes: Vec::new(),
        };
        m.compute_shapes()?;
        Ok(m)
    }

    fn compute_shapes(&mut self) -> Result<()> {
        let mut s = Shape {
            c: CHANNELS,
            h: self.input_height,
            w: self.input_width,
        };
        let mut shapes = vec![s];
        for layer in &self.layers {
            s = layer.output_shape(s)?;
            shapes.push(s);
        }
        if s.len() != self.labels.len() || s.h != 1 || s.w != 1 {
            return Err(Error::shape(format!(
                "network emits {} outputs for {} labels",
                s.len(),
                self.labels.len()
            )));
        }
        if self.labels.is_empty() {
            return Err(Error::shape("model needs at least one class"));
        }
        self.shapes = shapes;
        Ok(())
    }

    /// Two conv+pool stages and one hidden dense layer, preceded by a 2x2
    /// average pool, He-initialized from `seed`.
    pub fn reference(input_height: usize, input_width: usize, labels: Vec<String>, seed: u64) -> Result<Self> {
        Self::reference_with_widths(input_height, input_width, labels, [8, 16], 32, seed)
    }

    pub fn reference_with_widths(
        input_height: usize,
        input_width: usize,
        labels: Vec<String>,
        conv_channels: [usize; 2],
        hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        let k = labels.len();
        let flat = conv_channels[1] * (input_height / 8) * (input_width / 8);
        let layers = vec![
            Layer::AvgPool2,
            Layer::conv(CHANNELS, conv_channels[0], 3),
            Layer::Relu,
            Layer::MaxPool2,
            Layer::conv(conv_channels[0], conv_channels[1], 3),
            Layer::Relu,
            Layer::MaxPool2,
            Layer::dense(flat, hidden),
            Layer::Relu,
            Layer::dense(hidden, k),
        ];
        let mut m = Self::new(input_height, input_width, labels, layers)?;
        m.init_he(seed);
        Ok(m)
    }

    /// He-normal weights, zero biases.
    pub fn init_he(&mut self, seed: u64) {
        let mut rng = crate::rng::stream_rng(seed, 0);
        for layer in &mut self.layers {
            let fan_in = match layer {
                Layer::Conv2d {
                    in_channels, kernel, ..
                } => *in_channels * *kernel * *kernel,
                Layer::Dense { inputs, .. } => *inputs,
                _ => continue,
            };
            let std = (2.0 / fan_in as f64).sqrt();
            if let Some((w, b)) = layer.params_mut() {
                for v in w.iter_mut() {
                    *v = std * normal(&mut rng);
                }
                b.fill(0.0);
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn input_shape(&self) -> Shape {
        self.shapes[0]
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    pub fn zero_grads(&self) -> ParamGrads {
        self.layers
            .iter()
            .map(|l| l.params().map(|(w, b)| (vec![0.0; w.len()], vec![0.0; b.len()])))
            .collect()
    }

    /// Mutable parameter tensors in a fixed order (weights then bias per layer).
    pub fn param_tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            if let Some((w, b)) = layer.params_mut() {
                out.push(w);
                out.push(b);
            }
        }
        out
    }

    fn check_input(&self, image: &Image) -> Result<()> {
        if image.dims() != (self.input_height, self.input_width) {
            return Err(Error::shape(format!(
                "model expects {}x{} input, got {:?}",
                self.input_height,
                self.input_width,
                image.dims()
            )));
        }
        Ok(())
    }

    pub fn forward_tape(&self, image: &Image) -> Result<ForwardTape> {
        self.check_input(image)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(image.data().to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.forward(&activations[i], self.shapes[i], self.shapes[i + 1]);
            activations.push(next);
        }
        Ok(ForwardTape { activations })
    }

    pub fn logits(&self, image: &Image) -> Result<Vec<f64>> {
        self.check_input(image)?;
        let mut act = image.data().to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            act = layer.forward(&act, self.shapes[i], self.shapes[i + 1]);
        }
        Ok(act)
    }

    /// Backpropagates `grad_logits` through the tape. Returns the input
    /// gradient; parameter gradients are accumulated when `grads` is given.
    pub fn backward(&self, tape: &ForwardTape, grad_logits: &[f64], mut grads: Option<&mut ParamGrads>) -> Vec<f64> {
        let mut g = grad_logits.to_vec();
        for i in (0..self.layers.len()).rev() {
            let pg = grads
                .as_deref_mut()
                .and_then(|gs| gs[i].as_mut())
                .map(|(w, b)| (w.as_mut_slice(), b.as_mut_slice()));
            g = self.layers[i].backward(&tape.activations[i], self.shapes[i], self.shapes[i + 1], &g, pg);
        }
        g
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelDocOut {
            format: MODEL_FORMAT,
            version: MODEL_VERSION,
            model: self,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocIn = serde_json::from_str(text)?;
        if doc.format != MODEL_FORMAT || doc.version != MODEL_VERSION {
            return Err(Error::Parse(format!(
                "unsupported model document {:?} v{}",
                doc.format, doc.version
            )));
        }
        let mut m = doc.model;
        m.compute_shapes()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }
}

impl Classifier for Model {
    fn num_classes(&self) -> usize {
        self.labels.len()
    }

    fn labels(&self) -> Vec<String> {
        self.labels.clone()
    }

    fn forward(&self, image: &Image) -> Result<ClassifierOutput> {
        ClassifierOutput::from_logits(self.logits(image)?)
    }

    fn loss_and_input_gradient(&self, image: &Image, target: usize) -> Result<(f64, Image)> {
        let k = self.num_classes();
        if target >= k {
            return Err(Error::InvalidClass { index: target, classes: k });
        }
        let tape = self.forward_tape(image)?;
        let (loss, grad_logits) = softmax_cross_entropy(tape.logits(), target);
        let g = self.backward(&tape, &grad_logits, None);
        Ok((loss, Image::from_planar(image.height(), image.width(), g)?))
    }
}

/// Standard normal draw via Box-Muller.
fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
