//! Small quantizable convolutional networks.
//!
//! A [`Model`] is built from a list of [`LayerSpec`]s. Parameters live in a
//! flat store (weights, biases, BN affine terms and quantizer scales), and
//! layers refer to them by index. Weight layers carry a weight quantizer and
//! an input activation quantizer; BN layers carry none.

mod exec;
mod graph;
pub mod zoo;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use exec::{BnMode, ExecTrace};
pub use graph::{build_train_graph, TrainGraph};

use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;
use crate::normstats::{NormStats, DEFAULT_BN_MOMENTUM};
use crate::oscillation::{OscillationTracker, DEFAULT_EMA_MOMENTUM};
use crate::quant::{mse_range_init, quantize_forward, EstimatorKind, QuantizerState};
use crate::tensor::Tensor;

/// Bit-width of the first and last weight layer.
pub const EDGE_LAYER_BITS: u32 = 8;
/// Quantizer scales are kept above this after every update.
pub const MIN_SCALE: f64 = 1e-6;

fn one() -> usize {
    1
}

/// One entry of a model description. Convolutions use "same" zero padding
/// (`kernel / 2`) and no bias; they are expected to be followed by BN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        weight_bits: Option<u32>,
    },
    DepthwiseConv {
        channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        weight_bits: Option<u32>,
    },
    PointwiseConv {
        in_channels: usize,
        out_channels: usize,
        #[serde(default)]
        weight_bits: Option<u32>,
    },
    Linear {
        in_features: usize,
        out_features: usize,
        #[serde(default)]
        weight_bits: Option<u32>,
    },
    Bn {
        channels: usize,
    },
    Relu,
    Relu6,
    Flatten,
    GlobalPool,
    /// `x + body(x)`; the body must preserve the shape.
    Residual {
        body: Vec<LayerSpec>,
    },
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight_bits: None,
        }
    }

    pub fn depthwise(channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec::DepthwiseConv {
            channels,
            kernel,
            stride,
            weight_bits: None,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec::PointwiseConv {
            in_channels,
            out_channels,
            weight_bits: None,
        }
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Linear {
            in_features,
            out_features,
            weight_bits: None,
        }
    }

    pub fn bn(channels: usize) -> Self {
        LayerSpec::Bn { channels }
    }

    fn has_weights(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { .. }
                | LayerSpec::DepthwiseConv { .. }
                | LayerSpec::PointwiseConv { .. }
                | LayerSpec::Linear { .. }
        )
    }

    fn weight_layer_count(specs: &[LayerSpec]) -> usize {
        specs
            .iter()
            .map(|s| match s {
                LayerSpec::Residual { body } => Self::weight_layer_count(body),
                s if s.has_weights() => 1,
                _ => 0,
            })
            .sum()
    }
}

/// Network-wide quantization settings. `None` bit-widths leave the
/// corresponding tensors in full precision.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub weight_bits: Option<u32>,
    pub act_bits: Option<u32>,
    pub estimator: EstimatorKind,
}

impl QuantSpec {
    pub fn full_precision() -> Self {
        QuantSpec {
            weight_bits: None,
            act_bits: None,
            estimator: EstimatorKind::Ste,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    Conv,
    Depthwise,
    Pointwise,
    Linear,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv {
        weight: usize,
        geom: ConvGeometry,
        wq: Option<usize>,
        aq: Option<usize>,
    },
    Linear {
        weight: usize,
        bias: usize,
        wq: Option<usize>,
        aq: Option<usize>,
    },
    Bn {
        gamma: usize,
        beta: usize,
        norm: usize,
    },
    Relu,
    Relu6,
    Flatten,
    GlobalPool,
    Residual {
        body: Vec<Layer>,
    },
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Weight quantizer of one layer; the scale lives in the parameter store.
#[derive(Clone, Debug)]
pub struct WeightQuant {
    pub name: String,
    pub param: usize,
    pub scale: usize,
    pub state: QuantizerState,
    pub kind: WeightKind,
    pub fanin: usize,
    pub tracker: Option<OscillationTracker>,
}

/// Input activation quantizer of one weight layer.
#[derive(Clone, Debug)]
pub struct ActQuant {
    pub name: String,
    pub scale: usize,
    pub state: QuantizerState,
    pub bits: u32,
}

/// A batch-norm layer's running statistics plus the kind and fan-in of the
/// weight layer feeding it.
#[derive(Clone, Debug)]
pub struct Norm {
    pub name: String,
    pub stats: NormStats,
    pub source: Option<(WeightKind, usize)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub params: Vec<Param>,
    pub norms: Vec<Norm>,
    pub weight_quant: Vec<WeightQuant>,
    pub act_quant: Vec<ActQuant>,
    /// Quantizers are bypassed until [`Model::calibrate`] runs.
    pub quant_active: bool,
}

/// Weights contributing to one output channel.
pub fn fanin_per_output(spec: &LayerSpec) -> Result<usize> {
    match *spec {
        LayerSpec::Conv {
            in_channels, kernel, ..
        } => Ok(in_channels * kernel * kernel),
        LayerSpec::DepthwiseConv { kernel, .. } => Ok(kernel * kernel),
        LayerSpec::PointwiseConv { in_channels, .. } => Ok(in_channels),
        LayerSpec::Linear { in_features, .. } => Ok(in_features),
        _ => Err(Error::Invalid(format!("{spec:?} has no weights"))),
    }
}

struct Builder<'a> {
    quant: &'a QuantSpec,
    rng: ChaCha8Rng,
    params: Vec<Param>,
    norms: Vec<Norm>,
    weight_quant: Vec<WeightQuant>,
    act_quant: Vec<ActQuant>,
    weight_layers: usize,
    seen_weight_layers: usize,
    spec_index: usize,
    last_weight: Option<(WeightKind, usize)>,
}

impl Builder<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Layer {
            index: self.spec_index,
            message: message.into(),
        }
    }

    fn push_param(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    fn kaiming(&mut self, shape: &[usize], fanin: usize) -> Tensor {
        let bound = (6.0 / fanin as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("length matches shape")
    }

    /// Creates the weight parameter and its quantizers.
    fn weight_layer(
        &mut self,
        path: &str,
        shape: &[usize],
        fanin: usize,
        kind: WeightKind,
        requested_bits: Option<u32>,
    ) -> Result<(usize, Option<usize>, Option<usize>)> {
        let weight = self.kaiming(shape, fanin);
        let weight = self.push_param(format!("{path}.weight"), weight);
        let edge = self.seen_weight_layers == 0 || self.seen_weight_layers + 1 == self.weight_layers;
        self.seen_weight_layers += 1;
        self.last_weight = Some((kind, fanin));

        let mut wq = None;
        if let Some(default_bits) = self.quant.weight_bits {
            let mut bits = requested_bits.unwrap_or(default_bits);
            if edge && bits != EDGE_LAYER_BITS {
                log::warn!(
                    "layer {}: first and last weight layers use {EDGE_LAYER_BITS}-bit weights, ignoring {bits}",
                    self.spec_index
                );
                bits = EDGE_LAYER_BITS;
            }
            let state = QuantizerState::new(bits, true, 1.0)
                .and_then(|q| q.with_estimator(self.quant.estimator))
                .map_err(|e| self.err(e.to_string()))?;
            let scale = self.push_param(format!("{path}.weight_scale"), Tensor::scalar(1.0));
            self.weight_quant.push(WeightQuant {
                name: path.to_string(),
                param: weight,
                scale,
                state,
                kind,
                fanin,
                tracker: None,
            });
            wq = Some(self.weight_quant.len() - 1);
        }

        let mut aq = None;
        if let Some(bits) = self.quant.act_bits {
            let state = QuantizerState::new(bits, false, 1.0).map_err(|e| self.err(e.to_string()))?;
            let scale = self.push_param(format!("{path}.act_scale"), Tensor::scalar(1.0));
            self.act_quant.push(ActQuant {
                name: path.to_string(),
                scale,
                state,
                bits,
            });
            aq = Some(self.act_quant.len() - 1);
        }
        Ok((weight, wq, aq))
    }

    fn conv(
        &mut self,
        path: &str,
        shape: &mut Vec<usize>,
        (c_in, c_out, kernel, stride, groups): (usize, usize, usize, usize, usize),
        kind: WeightKind,
        bits: Option<u32>,
    ) -> Result<Layer> {
        if shape.len() != 3 {
            return Err(self.err(format!("convolution needs a [C, H, W] input, got {shape:?}")));
        }
        if shape[0] != c_in {
            return Err(self.err(format!("expects {c_in} input channels, got {}", shape[0])));
        }
        if kernel == 0 || stride == 0 || c_out == 0 {
            return Err(self.err("kernel, stride and channel counts must be positive"));
        }
        let geom = ConvGeometry {
            stride,
            pad: kernel / 2,
            groups,
        };
        let out = crate::kernels::conv2d_output_shape(
            &[1, shape[0], shape[1], shape[2]],
            &[c_out, c_in / groups, kernel, kernel],
            geom,
        )
        .map_err(|e| self.err(e.to_string()))?;
        let fanin = c_in / groups * kernel * kernel;
        let (weight, wq, aq) = self.weight_layer(path, &[c_out, c_in / groups, kernel, kernel], fanin, kind, bits)?;
        *shape = out[1..].to_vec();
        Ok(Layer::Conv { weight, geom, wq, aq })
    }

    fn layers(&mut self, specs: &[LayerSpec], prefix: &str, shape: &mut Vec<usize>) -> Result<Vec<Layer>> {
        let mut out = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let path = format!("{prefix}{i}");
            let layer = match *spec {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    weight_bits,
                } => self.conv(
                    &path,
                    shape,
                    (in_channels, out_channels, kernel, stride, 1),
                    WeightKind::Conv,
                    weight_bits,
                )?,
                LayerSpec::DepthwiseConv {
                    channels,
                    kernel,
                    stride,
                    weight_bits,
                } => self.conv(
                    &path,
                    shape,
                    (channels, channels, kernel, stride, channels),
                    WeightKind::Depthwise,
                    weight_bits,
                )?,
                LayerSpec::PointwiseConv {
                    in_channels,
                    out_channels,
                    weight_bits,
                } => self.conv(
                    &path,
                    shape,
                    (in_channels, out_channels, 1, 1, 1),
                    WeightKind::Pointwise,
                    weight_bits,
                )?,
                LayerSpec::Linear {
                    in_features,
                    out_features,
                    weight_bits,
                } => {
                    if shape.len() != 1 || shape[0] != in_features {
                        return Err(self.err(format!("linear layer expects [{in_features}] features, got {shape:?}")));
                    }
                    if out_features == 0 {
                        return Err(self.err("linear layer needs at least one output"));
                    }
                    let (weight, wq, aq) = self.weight_layer(
                        &path,
                        &[out_features, in_features],
                        in_features,
                        WeightKind::Linear,
                        weight_bits,
                    )?;
                    let bias = self.push_param(format!("{path}.bias"), Tensor::zeros(&[out_features]));
                    *shape = vec![out_features];
                    Layer::Linear { weight, bias, wq, aq }
                }
                LayerSpec::Bn { channels } => {
                    if shape.is_empty() || shape[0] != channels {
                        return Err(self.err(format!("batch norm over {channels} channels, got {shape:?}")));
                    }
                    let gamma = self.push_param(format!("{path}.gamma"), Tensor::full(&[channels], 1.0));
                    let beta = self.push_param(format!("{path}.beta"), Tensor::zeros(&[channels]));
                    self.norms.push(Norm {
                        name: path.clone(),
                        stats: NormStats::new(channels, DEFAULT_BN_MOMENTUM),
                        source: self.last_weight,
                    });
                    Layer::Bn {
                        gamma,
                        beta,
                        norm: self.norms.len() - 1,
                    }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Relu6 => Layer::Relu6,
                LayerSpec::Flatten => {
                    *shape = vec![shape.iter().product()];
                    Layer::Flatten
                }
                LayerSpec::GlobalPool => {
                    if shape.len() != 3 {
                        return Err(self.err(format!("global pooling needs [C, H, W], got {shape:?}")));
                    }
                    *shape = vec![shape[0]];
                    Layer::GlobalPool
                }
                LayerSpec::Residual { ref body } => {
                    let index = self.spec_index;
                    let before = shape.clone();
                    self.spec_index += 1;
                    let body = self.layers(body, &format!("{path}.body."), shape)?;
                    if *shape != before {
                        return Err(Error::Layer {
                            index,
                            message: format!("residual body maps {before:?} to {shape:?}"),
                        });
                    }
                    out.push(Layer::Residual { body });
                    continue;
                }
            };
            self.spec_index += 1;
            out.push(layer);
        }
        Ok(out)
    }
}

/// Builds a model with deterministic Kaiming-uniform weights.
///
/// Layer errors carry the pre-order index of the offending spec.
pub fn build_model(specs: &[LayerSpec], input_shape: &[usize], quant: &QuantSpec, seed: u64) -> Result<Model> {
    if specs.is_empty() {
        return Err(Error::Config("model has no layers".into()));
    }
    if let Some(b) = quant.weight_bits {
        crate::quant::grid_bounds(b, true)?;
    }
    quant.estimator.validate()?;
    let mut b = Builder {
        quant,
        rng: ChaCha8Rng::seed_from_u64(seed),
        params: Vec::new(),
        norms: Vec::new(),
        weight_quant: Vec::new(),
        act_quant: Vec::new(),
        weight_layers: LayerSpec::weight_layer_count(specs),
        seen_weight_layers: 0,
        spec_index: 0,
        last_weight: None,
    };
    let mut shape = input_shape.to_vec();
    let layers = b.layers(specs, "layers.", &mut shape)?;
    if shape.len() != 1 {
        return Err(Error::Config(format!(
            "model must end in [classes] logits, ends in {shape:?}"
        )));
    }
    Ok(Model {
        input_shape: input_shape.to_vec(),
        layers,
        params: b.params,
        norms: b.norms,
        weight_quant: b.weight_quant,
        act_quant: b.act_quant,
        quant_active: false,
    })
}

impl Model {
    pub fn num_classes(&self) -> usize {
        fn last(layers: &[Layer], params: &[Param]) -> Option<usize> {
            layers.iter().rev().find_map(|l| match l {
                Layer::Linear { bias, .. } => Some(params[*bias].value.len()),
                Layer::Residual { body } => last(body, params),
                _ => None,
            })
        }
        last(&self.layers, &self.params).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Quantizer state of weight slot `k` with the current learned scale.
    pub fn weight_state(&self, k: usize) -> QuantizerState {
        let wq = &self.weight_quant[k];
        QuantizerState {
            scale: self.params[wq.scale].value.item(),
            ..wq.state
        }
    }

    pub fn act_state(&self, k: usize) -> QuantizerState {
        let aq = &self.act_quant[k];
        QuantizerState {
            scale: self.params[aq.scale].value.item(),
            ..aq.state
        }
    }

    /// Integer weights of slot `k`, with frozen entries pinned.
    pub fn weight_ints(&self, k: usize) -> Result<Vec<i64>> {
        let wq = &self.weight_quant[k];
        let (_, mut ints) = quantize_forward(&self.params[wq.param].value, &self.weight_state(k))?;
        if let Some(t) = &wq.tracker {
            for (i, v) in ints.iter_mut().enumerate() {
                if t.frozen()[i] {
                    *v = t.frozen_int()[i];
                }
            }
        }
        Ok(ints)
    }

    /// The weights used in the forward pass of slot `k`.
    pub fn effective_weight(&self, k: usize) -> Result<Tensor> {
        let wq = &self.weight_quant[k];
        let s = self.params[wq.scale].value.item();
        let ints = self.weight_ints(k)?;
        Tensor::new(
            self.params[wq.param].value.shape().to_vec(),
            ints.into_iter().map(|v| s * v as f64).collect(),
        )
    }

    /// Initializes every quantizer from the current weights and the
    /// activations produced by `calibration`, creates the oscillation
    /// trackers and switches quantization on.
    pub fn calibrate(&mut self, calibration: &Tensor) -> Result<()> {
        for k in 0..self.weight_quant.len() {
            let wq = &self.weight_quant[k];
            let s = mse_range_init(&self.params[wq.param].value, wq.state.bits, true)?;
            let slot = wq.scale;
            self.params[slot].value = Tensor::scalar(s);
        }
        if !self.act_quant.is_empty() {
            let was = self.quant_active;
            self.quant_active = false;
            let mut trace = ExecTrace::capturing(self);
            self.forward_batches(vec![calibration.clone()], BnMode::Running, Some(&mut trace))?;
            self.quant_active = was;
            for (k, captured) in trace.act_inputs.into_iter().enumerate() {
                let x = captured.ok_or_else(|| Error::Invalid(format!("activation quantizer {k} saw no input")))?;
                let signed = x.data().iter().any(|&v| v < 0.0);
                let bits = self.act_quant[k].bits;
                let s = mse_range_init(&x, bits, signed)?;
                self.act_quant[k].state = QuantizerState::new(bits, signed, s)?;
                let slot = self.act_quant[k].scale;
                self.params[slot].value = Tensor::scalar(s);
            }
        }
        self.quant_active = true;
        self.reset_trackers(DEFAULT_EMA_MOMENTUM)
    }

    pub fn reset_trackers(&mut self, momentum: f64) -> Result<()> {
        for k in 0..self.weight_quant.len() {
            let ints = {
                let wq = &self.weight_quant[k];
                quantize_forward(&self.params[wq.param].value, &self.weight_state(k))?.1
            };
            self.weight_quant[k].tracker = Some(OscillationTracker::new(&ints, momentum)?);
        }
        Ok(())
    }

    pub fn trackers(&self) -> impl Iterator<Item = &OscillationTracker> {
        self.weight_quant.iter().filter_map(|w| w.tracker.as_ref())
    }

    /// Fraction of all tracked weights that oscillate with `f > f_min` and
    /// are not frozen.
    pub fn oscillating_fraction(&self, f_min: f64) -> f64 {
        let (count, total) = self
            .trackers()
            .fold((0, 0), |(c, t), tr| (c + tr.oscillating_count(f_min), t + tr.len()));
        if total == 0 {
            0.0
        } else {
            count as f64 / total as f64
        }
    }

    pub fn frozen_fraction(&self) -> f64 {
        let (count, total) = self
            .trackers()
            .fold((0, 0), |(c, t), tr| (c + tr.frozen_count(), t + tr.len()));
        if total == 0 {
            0.0
        } else {
            count as f64 / total as f64
        }
    }

    /// Named tensors describing the full model state.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        out.push((
            "model.quant_active".into(),
            Tensor::scalar(if self.quant_active { 1.0 } else { 0.0 }),
        ));
        for n in &self.norms {
            out.push((
                format!("{}.running_mean", n.name),
                Tensor::from_vec(n.stats.mean.clone()),
            ));
            out.push((format!("{}.running_var", n.name), Tensor::from_vec(n.stats.var.clone())));
        }
        for a in &self.act_quant {
            out.push((
                format!("{}.act_signed", a.name),
                Tensor::scalar(if a.state.signed { 1.0 } else { 0.0 }),
            ));
        }
        for w in &self.weight_quant {
            let Some(t) = &w.tracker else { continue };
            let ints = |v: &[i64]| Tensor::from_vec(v.iter().map(|&k| k as f64).collect());
            let p = format!("{}.tracker", w.name);
            out.push((format!("{p}.momentum"), Tensor::scalar(t.momentum())));
            out.push((format!("{p}.f"), Tensor::from_vec(t.frequencies().to_vec())));
            out.push((format!("{p}.last_change"), ints(t.last_change())));
            out.push((format!("{p}.prev_int"), ints(t.current_int())));
            out.push((format!("{p}.ema"), Tensor::from_vec(t.integer_ema().to_vec())));
            out.push((
                format!("{p}.frozen"),
                Tensor::from_vec(t.frozen().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()),
            ));
            out.push((format!("{p}.frozen_int"), ints(t.frozen_int())));
        }
        out
    }

    /// Loads named tensors produced by [`Model::state_tensors`] of a model
    /// with the same architecture. Parameters missing from `tensors` keep
    /// their value when `strict` is false.
    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>, strict: bool) -> Result<()> {
        let fetch = |name: &str, shape: &[usize]| -> Result<Option<Tensor>> {
            match tensors.get(name) {
                Some(t) if t.shape() == shape => Ok(Some(t.clone())),
                Some(t) => Err(Error::shape(name, t.shape(), shape)),
                None if strict => Err(Error::Invalid(format!("state is missing tensor {name}"))),
                None => Ok(None),
            }
        };
        for p in &mut self.params {
            if let Some(t) = fetch(&p.name, p.value.shape())? {
                p.value = t;
            }
        }
        if let Some(t) = fetch("model.quant_active", &[1])? {
            self.quant_active = t.item() != 0.0;
        }
        for n in &mut self.norms {
            let c = n.stats.channels();
            let mean = fetch(&format!("{}.running_mean", n.name), &[c])?;
            let var = fetch(&format!("{}.running_var", n.name), &[c])?;
            if let (Some(m), Some(v)) = (mean, var) {
                n.stats.mean = m.into_data();
                n.stats.var = v.into_data();
            }
        }
        for k in 0..self.act_quant.len() {
            if let Some(t) = fetch(&format!("{}.act_signed", self.act_quant[k].name), &[1])? {
                let scale = self.params[self.act_quant[k].scale].value.item();
                self.act_quant[k].state = QuantizerState::new(self.act_quant[k].bits, t.item() != 0.0, scale)?;
            }
        }
        for k in 0..self.weight_quant.len() {
            let len = self.params[self.weight_quant[k].param].value.len();
            let p = format!("{}.tracker", self.weight_quant[k].name);
            let Some(f) = tensors.get(&format!("{p}.f")) else {
                self.weight_quant[k].tracker = None;
                continue;
            };
            let get = |suffix: &str| -> Result<Tensor> {
                let name = format!("{p}.{suffix}");
                let t = tensors
                    .get(&name)
                    .ok_or_else(|| Error::Invalid(format!("state is missing tensor {name}")))?;
                if t.len() != if suffix == "momentum" { 1 } else { len } {
                    return Err(Error::shape(&name, t.shape(), &[len]));
                }
                Ok(t.clone())
            };
            let ints = |t: Tensor| t.data().iter().map(|&v| v as i64).collect::<Vec<_>>();
            let tracker = OscillationTracker::from_parts(
                get("momentum")?.item(),
                get("f")?.into_data(),
                ints(get("last_change")?),
                ints(get("prev_int")?),
                get("ema")?.into_data(),
                get("frozen")?.data().iter().map(|&v| v != 0.0).collect(),
                ints(get("frozen_int")?),
            )?;
            if f.len() != len {
                return Err(Error::shape(&p, f.shape(), &[len]));
            }
            self.weight_quant[k].tracker = Some(tracker);
        }
        Ok(())
    }

    /// Copies every parameter and BN statistic with a matching name from
    /// `other`; quantizer scales and trackers are left alone.
    pub fn copy_weights_from(&mut self, other: &Model) -> Result<()> {
        let by_name: BTreeMap<&str, &Tensor> = other.params.iter().map(|p| (p.name.as_str(), &p.value)).collect();
        for p in &mut self.params {
            if p.name.ends_with("_scale") {
                continue;
            }
            match by_name.get(p.name.as_str()) {
                Some(t) if t.shape() == p.value.shape() => p.value = (*t).clone(),
                Some(t) => return Err(Error::shape(&p.name, t.shape(), p.value.shape())),
                None => return Err(Error::Invalid(format!("source model lacks {}", p.name))),
            }
        }
        if other.norms.len() != self.norms.len() {
            return Err(Error::Invalid("models differ in batch-norm layers".into()));
        }
        for (a, b) in self.norms.iter_mut().zip(&other.norms) {
            a.stats = b.stats.clone();
        }
        Ok(())
    }

    /// Scale parameters are clamped to stay positive.
    pub fn clamp_scales(&mut self) {
        let slots: Vec<usize> = self
            .weight_quant
            .iter()
            .map(|w| w.scale)
            .chain(self.act_quant.iter().map(|a| a.scale))
            .collect();
        for s in slots {
            let v = self.params[s].value.data_mut();
            v[0] = v[0].max(MIN_SCALE);
        }
    }

    /// For every parameter, the frozen mask of its tracker if it has one.
    pub fn frozen_masks(&self) -> Vec<Option<&[bool]>> {
        let mut out = vec![None; self.params.len()];
        for w in &self.weight_quant {
            if let Some(t) = &w.tracker {
                if t.any_frozen() {
                    out[w.param] = Some(t.frozen());
                }
            }
        }
        out
    }

    pub fn set_estimator(&mut self, estimator: EstimatorKind) -> Result<()> {
        estimator.validate()?;
        for w in &mut self.weight_quant {
            w.state.estimator = estimator;
        }
        Ok(())
    }
}
