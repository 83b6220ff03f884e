//! Forward and backward passes for block-sequential networks.
//!
//! Networks here are plain chains of layers, so reverse mode reduces to
//! replaying the chain backwards over the activations recorded on the way
//! in. Dot products accumulate in `f64` and store `f32`, which keeps results
//! bit-deterministic for a fixed loop order and tight enough for
//! finite-difference checks.

use rand::Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{MaskedTensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    Same,
}

fn default_true() -> bool {
    true
}

/// One layer of a block.
///
/// `linear` flattens all non-batch input dims, so it can follow a conv.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Linear {
        in_features: usize,
        out_features: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        padding: Padding,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Relu,
}

impl LayerSpec {
    pub fn linear(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Linear {
            in_features,
            out_features,
            bias: true,
        }
    }

    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, padding: Padding) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            padding,
            bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Linear {
                in_features,
                out_features,
                ..
            } if in_features == 0 || out_features == 0 => {
                invalid(format!("linear dims must be positive, got {in_features}x{out_features}"))
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                padding,
                ..
            } => {
                if in_channels == 0 || out_channels == 0 || kernel_h == 0 || kernel_w == 0 {
                    return invalid("conv2d dims must be positive");
                }
                if padding == Padding::Same && (kernel_h % 2 == 0 || kernel_w % 2 == 0) {
                    return invalid("same padding requires odd kernel sizes");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Weight and conv kernels are maskable; biases and relu are not.
    pub fn is_maskable(&self) -> bool {
        !matches!(self, LayerSpec::Relu)
    }

    pub fn has_bias(&self) -> bool {
        match *self {
            LayerSpec::Linear { bias, .. } | LayerSpec::Conv2d { bias, .. } => bias,
            LayerSpec::Relu => false,
        }
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Linear {
                in_features,
                out_features,
                ..
            } => Some(vec![out_features, in_features]),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => Some(vec![out_channels, in_channels, kernel_h, kernel_w]),
            LayerSpec::Relu => None,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().map_or(0, |s| s.iter().product())
    }

    /// Output channel / feature count (bias length).
    pub fn fan_out(&self) -> usize {
        match *self {
            LayerSpec::Linear { out_features, .. } => out_features,
            LayerSpec::Conv2d { out_channels, .. } => out_channels,
            LayerSpec::Relu => 0,
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Linear { in_features, .. } => in_features,
            LayerSpec::Conv2d {
                in_channels,
                kernel_h,
                kernel_w,
                ..
            } => in_channels * kernel_h * kernel_w,
            LayerSpec::Relu => 0,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Linear {
                in_features,
                out_features,
                ..
            } => {
                let n: usize = input.iter().product();
                if n != in_features {
                    return Err(Error::Shape {
                        context: "linear input".into(),
                        expected: vec![in_features],
                        got: input.to_vec(),
                    });
                }
                Ok(vec![out_features])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                padding,
                ..
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(Error::Shape {
                        context: "conv2d input (C,H,W)".into(),
                        expected: vec![in_channels, 0, 0],
                        got: input.to_vec(),
                    });
                }
                let (ph, pw) = pads(padding, kernel_h, kernel_w);
                let (h, w) = (input[1] + 2 * ph, input[2] + 2 * pw);
                if h < kernel_h || w < kernel_w {
                    return Err(Error::Shape {
                        context: "conv2d kernel larger than input".into(),
                        expected: vec![kernel_h, kernel_w],
                        got: input.to_vec(),
                    });
                }
                Ok(vec![out_channels, h - kernel_h + 1, w - kernel_w + 1])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
        }
    }
}

fn pads(padding: Padding, kh: usize, kw: usize) -> (usize, usize) {
    match padding {
        Padding::Valid => (0, 0),
        Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
    }
}

/// A layer with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Option<MaskedTensor>,
    pub bias: Option<Tensor>,
}

impl Layer {
    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero bias, dense mask.
    pub fn init(spec: LayerSpec, rng: &mut StreamRng) -> Result<Self> {
        spec.validate()?;
        let weight = match spec.weight_shape() {
            Some(shape) => {
                let bound = (6.0 / spec.fan_in() as f64).sqrt() as f32;
                let dist = Uniform::new_inclusive(-bound, bound)
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                let n = shape.iter().product();
                let data: Vec<f32> = (0..n).map(|_| rng.sample(dist)).collect();
                Some(MaskedTensor::dense(Tensor::new(shape, data)?))
            }
            None => None,
        };
        let bias = spec
            .has_bias()
            .then(|| Tensor::zeros(vec![spec.fan_out()]));
        Ok(Self { spec, weight, bias })
    }

    pub fn with_params(spec: LayerSpec, weight: Option<MaskedTensor>, bias: Option<Tensor>) -> Result<Self> {
        spec.validate()?;
        if spec.weight_shape().as_deref() != weight.as_ref().map(|w| w.shape()) {
            return Err(Error::Shape {
                context: "layer weight".into(),
                expected: spec.weight_shape().unwrap_or_default(),
                got: weight.map(|w| w.shape().to_vec()).unwrap_or_default(),
            });
        }
        let want_bias = spec.has_bias().then(|| vec![spec.fan_out()]);
        if want_bias.as_deref() != bias.as_ref().map(|b| b.shape()) {
            return Err(Error::Shape {
                context: "layer bias".into(),
                expected: want_bias.unwrap_or_default(),
                got: bias.map(|b| b.shape().to_vec()).unwrap_or_default(),
            });
        }
        Ok(Self { spec, weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out_shape = self.spec.output_shape(&x.shape()[1..])?;
        let batch = x.rows();
        match self.spec {
            LayerSpec::Linear {
                in_features,
                out_features,
                ..
            } => {
                let w = self.weight.as_ref().expect("linear weight").data();
                let mut y = Vec::with_capacity(batch * out_features);
                for b in 0..batch {
                    let xb = x.row(b);
                    for o in 0..out_features {
                        let wo = &w[o * in_features..(o + 1) * in_features];
                        let mut acc = self.bias.as_ref().map_or(0.0, |bias| bias.data()[o] as f64);
                        for (xi, wi) in xb.iter().zip(wo) {
                            acc += *xi as f64 * *wi as f64;
                        }
                        y.push(acc as f32);
                    }
                }
                Tensor::new(vec![batch, out_features], y)
            }
            LayerSpec::Conv2d { .. } => self.conv_forward(x, &out_shape),
            LayerSpec::Relu => {
                let data = x.data().iter().map(|&v| if v > 0.0 || v.is_nan() { v } else { 0.0 }).collect();
                Tensor::new(x.shape().to_vec(), data)
            }
        }
    }

    fn conv_geometry(&self, x_shape: &[usize], out_shape: &[usize]) -> ConvGeom {
        let LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            padding,
            ..
        } = self.spec
        else {
            unreachable!("conv geometry on non-conv layer")
        };
        let (ph, pw) = pads(padding, kernel_h, kernel_w);
        ConvGeom {
            c: in_channels,
            o: out_channels,
            kh: kernel_h,
            kw: kernel_w,
            ph,
            pw,
            h: x_shape[2],
            w: x_shape[3],
            ho: out_shape[1],
            wo: out_shape[2],
        }
    }

    fn conv_forward(&self, x: &Tensor, out_shape: &[usize]) -> Result<Tensor> {
        let g = self.conv_geometry(x.shape(), out_shape);
        let batch = x.rows();
        let w = self.weight.as_ref().expect("conv weight").data();
        let xd = x.data();
        let mut y = vec![0f32; batch * g.o * g.ho * g.wo];
        let mut acc = vec![0f64; g.ho * g.wo];
        for b in 0..batch {
            for o in 0..g.o {
                let b0 = self.bias.as_ref().map_or(0.0, |bias| bias.data()[o] as f64);
                acc.iter_mut().for_each(|a| *a = b0);
                for c in 0..g.c {
                    let xc = &xd[(b * g.c + c) * g.h * g.w..(b * g.c + c + 1) * g.h * g.w];
                    for u in 0..g.kh {
                        for v in 0..g.kw {
                            let wv = w[((o * g.c + c) * g.kh + u) * g.kw + v] as f64;
                            if wv == 0.0 {
                                continue;
                            }
                            for i in 0..g.ho {
                                let Some(r) = (i + u).checked_sub(g.ph).filter(|&r| r < g.h) else {
                                    continue;
                                };
                                for j in 0..g.wo {
                                    if let Some(s) = (j + v).checked_sub(g.pw).filter(|&s| s < g.w) {
                                        acc[i * g.wo + j] += wv * xc[r * g.w + s] as f64;
                                    }
                                }
                            }
                        }
                    }
                }
                let base = (b * g.o + o) * g.ho * g.wo;
                for (dst, a) in y[base..base + g.ho * g.wo].iter_mut().zip(&acc) {
                    *dst = *a as f32;
                }
            }
        }
        Tensor::new(vec![batch, g.o, g.ho, g.wo], y)
    }

    /// Gradients of this layer given its recorded input and the upstream
    /// gradient. Weight gradients are dense (every position); callers mask
    /// them when only the active set is wanted.
    pub fn backward(&self, x: &Tensor, grad_out: &Tensor) -> Result<(LayerGrads, Tensor)> {
        let batch = x.rows();
        match self.spec {
            LayerSpec::Linear {
                in_features,
                out_features,
                ..
            } => {
                if grad_out.shape() != [batch, out_features] {
                    return Err(Error::Shape {
                        context: "linear upstream gradient".into(),
                        expected: vec![batch, out_features],
                        got: grad_out.shape().to_vec(),
                    });
                }
                let w = self.weight.as_ref().expect("linear weight").data();
                let g = grad_out.data();
                let mut dx = vec![0f32; batch * in_features];
                let mut acc = vec![0f64; in_features];
                for b in 0..batch {
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    for o in 0..out_features {
                        let gbo = g[b * out_features + o] as f64;
                        if gbo == 0.0 {
                            continue;
                        }
                        for (a, wi) in acc.iter_mut().zip(&w[o * in_features..(o + 1) * in_features]) {
                            *a += gbo * *wi as f64;
                        }
                    }
                    for (d, a) in dx[b * in_features..(b + 1) * in_features].iter_mut().zip(&acc) {
                        *d = *a as f32;
                    }
                }
                let mut dw = vec![0f32; out_features * in_features];
                for o in 0..out_features {
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    for b in 0..batch {
                        let gbo = g[b * out_features + o] as f64;
                        if gbo == 0.0 {
                            continue;
                        }
                        for (a, xi) in acc.iter_mut().zip(x.row(b)) {
                            *a += gbo * *xi as f64;
                        }
                    }
                    for (d, a) in dw[o * in_features..(o + 1) * in_features].iter_mut().zip(&acc) {
                        *d = *a as f32;
                    }
                }
                let db = self.bias.as_ref().map(|_| {
                    let data = (0..out_features)
                        .map(|o| (0..batch).map(|b| g[b * out_features + o] as f64).sum::<f64>() as f32)
                        .collect();
                    Tensor::new(vec![out_features], data).expect("bias grad shape")
                });
                Ok((
                    LayerGrads {
                        weight: Some(Tensor::new(vec![out_features, in_features], dw)?),
                        bias: db,
                    },
                    Tensor::new(x.shape().to_vec(), dx)?,
                ))
            }
            LayerSpec::Conv2d { .. } => self.conv_backward(x, grad_out),
            LayerSpec::Relu => {
                if grad_out.shape() != x.shape() {
                    return Err(Error::Shape {
                        context: "relu upstream gradient".into(),
                        expected: x.shape().to_vec(),
                        got: grad_out.shape().to_vec(),
                    });
                }
                let dx = x
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                Ok((LayerGrads::default(), Tensor::new(x.shape().to_vec(), dx)?))
            }
        }
    }

    fn conv_backward(&self, x: &Tensor, grad_out: &Tensor) -> Result<(LayerGrads, Tensor)> {
        let out_shape = self.spec.output_shape(&x.shape()[1..])?;
        let batch = x.rows();
        let mut expected = vec![batch];
        expected.extend(&out_shape);
        if grad_out.shape() != expected.as_slice() {
            return Err(Error::Shape {
                context: "conv2d upstream gradient".into(),
                expected,
                got: grad_out.shape().to_vec(),
            });
        }
        let g = self.conv_geometry(x.shape(), &out_shape);
        let w = self.weight.as_ref().expect("conv weight").data();
        let (xd, gd) = (x.data(), grad_out.data());
        let plane_in = g.h * g.w;
        let plane_out = g.ho * g.wo;
        let mut dw = vec![0f64; g.o * g.c * g.kh * g.kw];
        let mut dx = vec![0f64; xd.len()];
        for b in 0..batch {
            for o in 0..g.o {
                let go = &gd[(b * g.o + o) * plane_out..(b * g.o + o + 1) * plane_out];
                for c in 0..g.c {
                    let xoff = (b * g.c + c) * plane_in;
                    for u in 0..g.kh {
                        for v in 0..g.kw {
                            let widx = ((o * g.c + c) * g.kh + u) * g.kw + v;
                            let wv = w[widx] as f64;
                            let mut acc = 0f64;
                            for i in 0..g.ho {
                                let Some(r) = (i + u).checked_sub(g.ph).filter(|&r| r < g.h) else {
                                    continue;
                                };
                                for j in 0..g.wo {
                                    if let Some(s) = (j + v).checked_sub(g.pw).filter(|&s| s < g.w) {
                                        let gij = go[i * g.wo + j] as f64;
                                        acc += gij * xd[xoff + r * g.w + s] as f64;
                                        dx[xoff + r * g.w + s] += gij * wv;
                                    }
                                }
                            }
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
        let db = self.bias.as_ref().map(|_| {
            let data = (0..g.o)
                .map(|o| {
                    (0..batch)
                        .flat_map(|b| gd[(b * g.o + o) * plane_out..(b * g.o + o + 1) * plane_out].iter())
                        .map(|&v| v as f64)
                        .sum::<f64>() as f32
                })
                .collect();
            Tensor::new(vec![g.o], data).expect("bias grad shape")
        });
        Ok((
            LayerGrads {
                weight: Some(Tensor::new(
                    vec![g.o, g.c, g.kh, g.kw],
                    dw.into_iter().map(|v| v as f32).collect(),
                )?),
                bias: db,
            },
            Tensor::new(x.shape().to_vec(), dx.into_iter().map(|v| v as f32).collect())?,
        ))
    }
}

struct ConvGeom {
    c: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerGrads {
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

/// Per-parameter gradients of one [`Sequential`], shaped like its parameters.
///
/// When `dense` is set the weight gradients also carry values at masked-out
/// positions (the true partial derivative of the masked network there).
/// Otherwise those positions are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrads>,
    pub dense: bool,
}

impl GradientSet {
    /// Copy with masked-out weight positions zeroed.
    pub fn active_view(&self, net: &Sequential) -> GradientSet {
        let layers = self
            .layers
            .iter()
            .zip(&net.layers)
            .map(|(g, layer)| {
                let weight = g.weight.as_ref().map(|gw| {
                    let mut gw = gw.clone();
                    if let Some(w) = &layer.weight {
                        for (v, &m) in gw.data_mut().iter_mut().zip(w.mask()) {
                            if !m {
                                *v = 0.0;
                            }
                        }
                    }
                    gw
                });
                LayerGrads {
                    weight,
                    bias: g.bias.clone(),
                }
            })
            .collect();
        GradientSet { layers, dense: false }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|g| {
            g.weight.as_ref().is_none_or(Tensor::is_finite) && g.bias.as_ref().is_none_or(Tensor::is_finite)
        })
    }
}

/// Activations recorded during a forward pass: the input of every layer.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    inputs: Vec<Tensor>,
}

/// An ordered chain of layers (a backbone, a head, or a whole network).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    /// Forward pass that keeps every layer input for [`Sequential::backward`].
    pub fn forward_recorded(&self, x: &Tensor) -> Result<(Tensor, Trace)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let next = layer.forward(&h)?;
            inputs.push(h);
            h = next;
        }
        Ok((h, Trace { inputs }))
    }

    /// Reverse pass. Returns parameter gradients and the gradient with
    /// respect to the network input.
    pub fn backward(&self, trace: &Trace, grad_out: &Tensor, dense: bool) -> Result<(GradientSet, Tensor)> {
        if trace.inputs.len() != self.layers.len() || (trace.inputs.is_empty() && !self.layers.is_empty()) {
            return Err(Error::NoRecordedForward);
        }
        let mut grads = vec![LayerGrads::default(); self.layers.len()];
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (lg, gx) = layer.backward(&trace.inputs[i], &g)?;
            grads[i] = lg;
            g = gx;
        }
        let set = GradientSet { layers: grads, dense: true };
        let set = if dense { set } else { set.active_view(self) };
        Ok((set, g))
    }

    pub fn maskable_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.weight.is_some())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn masks_hold(&self) -> bool {
        self.layers
            .iter()
            .filter_map(|l| l.weight.as_ref())
            .all(MaskedTensor::invariant_holds)
    }

    /// Mutable access to one scalar parameter, bypassing the mask; used by
    /// finite-difference probing of active positions only.
    fn param_mut(&mut self, p: ParamRef) -> &mut f32 {
        let layer = &mut self.layers[p.layer];
        if p.bias {
            &mut layer.bias.as_mut().expect("bias").data_mut()[p.index]
        } else {
            &mut layer.weight.as_mut().expect("weight").values_mut_raw()[p.index]
        }
    }

    /// Every active scalar parameter (active weights and all biases).
    fn active_params(&self) -> Vec<ParamRef> {
        let mut out = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            if let Some(w) = &layer.weight {
                out.extend(w.mask().iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| ParamRef {
                    layer: li,
                    bias: false,
                    index: i,
                }));
            }
            if let Some(b) = &layer.bias {
                out.extend((0..b.len()).map(|i| ParamRef {
                    layer: li,
                    bias: true,
                    index: i,
                }));
            }
        }
        out
    }

    fn zero_grads(&self) -> GradientSet {
        GradientSet {
            layers: self
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: l.weight.as_ref().map(|w| Tensor::zeros(w.shape().to_vec())),
                    bias: l.bias.as_ref().map(|b| Tensor::zeros(b.shape().to_vec())),
                })
                .collect(),
            dense: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ParamRef {
    layer: usize,
    bias: bool,
    index: usize,
}

/// Result of softmax cross-entropy over a batch of logits.
#[derive(Debug, Clone)]
pub struct CrossEntropy {
    /// Mean negative log-likelihood of the targets, in nats.
    pub loss: f64,
    pub probs: Tensor,
    probs64: Vec<f64>,
    targets: Vec<usize>,
    classes: usize,
}

impl CrossEntropy {
    /// Gradient of `scale * loss` with respect to the logits.
    pub fn grad(&self, scale: f64) -> Tensor {
        let batch = self.targets.len();
        let k = scale / batch as f64;
        let data = self
            .probs64
            .chunks(self.classes)
            .zip(&self.targets)
            .flat_map(|(row, &t)| {
                row.iter()
                    .enumerate()
                    .map(move |(c, &p)| (k * (p - if c == t { 1.0 } else { 0.0 })) as f32)
            })
            .collect();
        Tensor::new(vec![batch, self.classes], data).expect("grad shape")
    }

    pub fn probs64(&self) -> &[f64] {
        &self.probs64
    }
}

/// Row-wise softmax in `f64`.
pub fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / z).collect()
        })
        .collect()
}

/// Softmax cross-entropy, mean over the batch.
pub fn loss_forward(logits: &Tensor, targets: &[usize]) -> Result<CrossEntropy> {
    if logits.shape().len() != 2 || logits.rows() != targets.len() {
        return Err(Error::Shape {
            context: "loss logits".into(),
            expected: vec![targets.len(), 0],
            got: logits.shape().to_vec(),
        });
    }
    let classes = logits.shape()[1];
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return invalid(format!("target {t} out of range for {classes} classes"));
    }
    let mut loss = 0f64;
    let mut probs64 = Vec::with_capacity(logits.len());
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let log_z = max + z.ln();
        loss += log_z - row[t] as f64;
        probs64.extend(row.iter().map(|&v| (v as f64 - log_z).exp()));
    }
    loss /= targets.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let probs = Tensor::new(
        logits.shape().to_vec(),
        probs64.iter().map(|&p| p as f32).collect(),
    )?;
    Ok(CrossEntropy {
        loss,
        probs,
        probs64,
        targets: targets.to_vec(),
        classes,
    })
}

/// Central-difference estimate of the loss gradient for every active
/// parameter of `net`. Masked-out positions are left at zero.
///
/// The step actually taken is `fl(θ+ε) − fl(θ−ε)`, which removes the `f32`
/// representation error of the perturbation from the quotient.
pub fn finite_difference_gradient(net: &Sequential, x: &Tensor, targets: &[usize], eps: f32) -> Result<GradientSet> {
    if !(eps > 0.0) || !eps.is_finite() {
        return invalid(format!("finite-difference eps must be positive, got {eps}"));
    }
    let loss_at = |n: &Sequential| -> Result<f64> { Ok(loss_forward(&n.forward(x)?, targets)?.loss) };
    let mut probe = net.clone();
    let mut grads = net.zero_grads();
    for p in net.active_params() {
        let orig = *probe.param_mut(p);
        let hi = orig + eps;
        let lo = orig - eps;
        *probe.param_mut(p) = hi;
        let l_hi = loss_at(&probe)?;
        *probe.param_mut(p) = lo;
        let l_lo = loss_at(&probe)?;
        *probe.param_mut(p) = orig;
        let est = ((l_hi - l_lo) / (hi as f64 - lo as f64)) as f32;
        let g = &mut grads.layers[p.layer];
        let slot = if p.bias { g.bias.as_mut() } else { g.weight.as_mut() };
        slot.expect("grad slot").data_mut()[p.index] = est;
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn linear(w: &[f32], mask: &[bool], out: usize, inp: usize, bias: Option<Vec<f32>>) -> Layer {
        let wt = MaskedTensor::new(Tensor::new(vec![out, inp], w.to_vec()).unwrap(), mask.to_vec()).unwrap();
        let spec = LayerSpec::Linear {
            in_features: inp,
            out_features: out,
            bias: bias.is_some(),
        };
        Layer::with_params(spec, Some(wt), bias.map(|b| Tensor::new(vec![out], b).unwrap())).unwrap()
    }

    fn row(v: &[f32]) -> Tensor {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity() {
        let l = linear(&[1., 0., 0., 1.], &[true; 4], 2, 2, Some(vec![0., 0.]));
        assert_eq!(l.forward(&row(&[3., -1.])).unwrap().data(), &[3., -1.]);
    }

    #[test]
    fn linear_respects_mask() {
        let l = linear(&[1., 2., 3., 4.], &[true, false, true, true], 2, 2, Some(vec![0., 0.]));
        assert_eq!(l.forward(&row(&[1., 1.])).unwrap().data(), &[1., 7.]);
    }

    #[test]
    fn relu_clamps() {
        let l = Layer::init(LayerSpec::Relu, &mut stream(0, &[])).unwrap();
        assert_eq!(l.forward(&row(&[-2., 0., 5.])).unwrap().data(), &[0., 0., 5.]);
    }

    #[test]
    fn shape_mismatch_reports_dims() {
        let l = linear(&[1., 0., 0., 1.], &[true; 4], 2, 2, None);
        let err = l.forward(&row(&[1., 2., 3.])).unwrap_err();
        assert!(err.to_string().contains("[2]"), "{err}");
        assert!(err.to_string().contains("[3]"), "{err}");
    }

    #[test]
    fn loss_symmetric_case() {
        let ce = loss_forward(&row(&[0., 0.]), &[0]).unwrap();
        assert!((ce.loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(ce.probs.data(), &[0.5, 0.5]);
        let two = loss_forward(&Tensor::from_rows(&[vec![0., 0.], vec![0., 0.]]).unwrap(), &[0, 1]).unwrap();
        assert!((two.loss - ce.loss).abs() < 1e-15);
    }

    #[test]
    fn loss_large_margin() {
        // -ln(sigmoid(10)) = ln(1 + e^-10)
        let ce = loss_forward(&row(&[10., 0.]), &[0]).unwrap();
        let expected = (1.0f64 + (-10.0f64).exp()).ln();
        assert!((ce.loss - expected).abs() < 1e-12);
        assert!((ce.loss - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn loss_rejects_bad_target() {
        assert!(loss_forward(&row(&[0., 0.]), &[2]).is_err());
    }

    #[test]
    fn one_parameter_hand_gradient() {
        // logits = [θx, 0] via a 2x1 weight with the second row masked out.
        let l = linear(&[2.0, 0.0], &[true, false], 2, 1, None);
        let net = Sequential::new(vec![l]);
        let x = row(&[3.0]);
        let (logits, trace) = net.forward_recorded(&x).unwrap();
        let ce = loss_forward(&logits, &[0]).unwrap();
        let (g, _) = net.backward(&trace, &ce.grad(1.0), false).unwrap();
        let p0 = 1.0 / (1.0 + (-6.0f64).exp());
        let expected = 3.0 * (p0 - 1.0);
        let got = g.layers[0].weight.as_ref().unwrap().data()[0] as f64;
        assert!((got - expected).abs() < 1e-7 * expected.abs().max(1.0));
        // Active view hides the masked position; the dense view exposes it.
        assert_eq!(g.layers[0].weight.as_ref().unwrap().data()[1], 0.0);
        let (gd, _) = net.backward(&trace, &ce.grad(1.0), true).unwrap();
        let hidden = gd.layers[0].weight.as_ref().unwrap().data()[1];
        assert!(hidden.is_finite() && hidden != 0.0);

        let fd = finite_difference_gradient(&net, &x, &[0], 1e-3).unwrap();
        let est = fd.layers[0].weight.as_ref().unwrap().data()[0] as f64;
        assert!((est - expected).abs() / expected.abs() < 1e-4, "{est} vs {expected}");
    }

    #[test]
    fn zero_input_kills_weight_grad() {
        let mut rng = stream(1, &[]);
        let net = Sequential::new(vec![Layer::init(LayerSpec::linear(3, 2), &mut rng).unwrap()]);
        let x = Tensor::zeros(vec![4, 3]);
        let (logits, trace) = net.forward_recorded(&x).unwrap();
        let ce = loss_forward(&logits, &[0, 1, 0, 0]).unwrap();
        let (g, _) = net.backward(&trace, &ce.grad(1.0), true).unwrap();
        assert!(g.layers[0].weight.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.layers[0].bias.as_ref().unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn backward_without_forward_rejected() {
        let mut rng = stream(1, &[]);
        let net = Sequential::new(vec![Layer::init(LayerSpec::linear(2, 2), &mut rng).unwrap()]);
        let err = net.backward(&Trace::default(), &Tensor::zeros(vec![1, 2]), false);
        assert!(matches!(err, Err(Error::NoRecordedForward)));
    }

    #[test]
    fn finite_difference_rejects_zero_eps() {
        let net = Sequential::default();
        assert!(finite_difference_gradient(&net, &row(&[1.0]), &[0], 0.0).is_err());
    }

    #[test]
    fn constant_model_has_zero_estimate() {
        // All weights masked out: output is bias only, which is independent of the input.
        let l = linear(&[0.3, -0.2, 0.1, 0.4], &[false; 4], 2, 2, Some(vec![0.5, -0.5]));
        let net = Sequential::new(vec![l]);
        let fd = finite_difference_gradient(&net, &row(&[1.0, 2.0]), &[0], 1e-3).unwrap();
        assert!(fd.layers[0].weight.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_same_padding_identity_kernel() {
        let spec = LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel_h: 3,
            kernel_w: 3,
            padding: Padding::Same,
            bias: false,
        };
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = MaskedTensor::dense(Tensor::new(vec![1, 1, 3, 3], k).unwrap());
        let l = Layer::with_params(spec, Some(w), None).unwrap();
        let x = Tensor::new(vec![1, 1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let y = l.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 3]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_valid_sums_window() {
        let spec = LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel_h: 2,
            kernel_w: 2,
            padding: Padding::Valid,
            bias: true,
        };
        let w = MaskedTensor::new(Tensor::new(vec![1, 1, 2, 2], vec![1.; 4]).unwrap(), vec![true, true, true, false]).unwrap();
        let l = Layer::with_params(spec, Some(w), Some(Tensor::new(vec![1], vec![0.5]).unwrap())).unwrap();
        let x = Tensor::new(vec![1, 1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let y = l.forward(&x).unwrap();
        // windows [[1,2],[4,5]] and [[2,3],[5,6]] without bottom-right
        assert_eq!(y.data(), &[1. + 2. + 4. + 0.5, 2. + 3. + 5. + 0.5]);
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut rng = stream(9, &[1]);
            Sequential::new(vec![
                Layer::init(LayerSpec::conv(2, 3, 3, Padding::Same), &mut rng).unwrap(),
                Layer::init(LayerSpec::Relu, &mut rng).unwrap(),
                Layer::init(LayerSpec::linear(3 * 4 * 4, 5), &mut rng).unwrap(),
            ])
        };
        let x = Tensor::new(vec![2, 2, 4, 4], (0..64).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let a = build().forward(&x).unwrap();
        let b = build().forward(&x).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
