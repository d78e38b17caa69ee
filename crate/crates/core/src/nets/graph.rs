//! Autodiff graph of one training step.

use super::{Layer, Model};
use crate::autodiff::ops::{
    Add, BatchNormTrain, Conv2d, GlobalAvgPool, Linear, Relu, Relu6, Reshape, SoftmaxCrossEntropy,
};
use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::normstats::BN_EPS;
use crate::oscillation::DampenPenalty;
use crate::quant::{EstimatorKind, FakeQuantize};
use crate::tensor::Tensor;

pub struct TrainGraph {
    pub graph: Graph,
    /// Task loss plus the dampening penalty.
    pub loss: NodeId,
    pub task_loss: NodeId,
    pub logits: NodeId,
    pub penalty: Option<NodeId>,
    /// Graph leaf of every model parameter.
    pub params: Vec<NodeId>,
    /// `(norm index, input node)` of every BN layer.
    pub norm_inputs: Vec<(usize, NodeId)>,
}

struct GraphBuilder<'a> {
    model: &'a Model,
    graph: Graph,
    params: Vec<NodeId>,
    norm_inputs: Vec<(usize, NodeId)>,
    penalties: Vec<NodeId>,
    lambda: f64,
    batch: usize,
}

impl GraphBuilder<'_> {
    fn weight(&mut self, weight: usize, wq: Option<usize>) -> Result<NodeId> {
        let w = self.params[weight];
        let (Some(k), true) = (wq, self.model.quant_active) else {
            return Ok(w);
        };
        let slot = &self.model.weight_quant[k];
        let s = self.params[slot.scale];
        let frozen = slot
            .tracker
            .as_ref()
            .filter(|t| t.any_frozen())
            .map(|t| t.frozen_ints());
        let state = self.model.weight_state(k);
        if self.lambda > 0.0 {
            let pen = self.graph.apply(
                DampenPenalty {
                    state,
                    lambda: self.lambda,
                },
                &[w, s],
            )?;
            self.penalties.push(pen);
        }
        self.graph.apply(FakeQuantize { state, frozen }, &[w, s])
    }

    fn activation(&mut self, x: NodeId, aq: Option<usize>) -> Result<NodeId> {
        let (Some(k), true) = (aq, self.model.quant_active) else {
            return Ok(x);
        };
        let s = self.params[self.model.act_quant[k].scale];
        let state = crate::quant::QuantizerState {
            estimator: EstimatorKind::Ste,
            ..self.model.act_state(k)
        };
        self.graph.apply(FakeQuantize { state, frozen: None }, &[x, s])
    }

    fn layers(&mut self, layers: &[Layer], mut x: NodeId) -> Result<NodeId> {
        for layer in layers {
            x = match layer {
                Layer::Conv { weight, geom, wq, aq } => {
                    let xin = self.activation(x, *aq)?;
                    let w = self.weight(*weight, *wq)?;
                    self.graph.apply(Conv2d(*geom), &[xin, w])?
                }
                Layer::Linear { weight, bias, wq, aq } => {
                    let xin = self.activation(x, *aq)?;
                    let w = self.weight(*weight, *wq)?;
                    let b = self.params[*bias];
                    self.graph.apply(Linear, &[xin, w, b])?
                }
                Layer::Bn { gamma, beta, norm } => {
                    self.norm_inputs.push((*norm, x));
                    let (g, b) = (self.params[*gamma], self.params[*beta]);
                    self.graph.apply(BatchNormTrain { eps: BN_EPS }, &[x, g, b])?
                }
                Layer::Relu => self.graph.apply(Relu, &[x])?,
                Layer::Relu6 => self.graph.apply(Relu6, &[x])?,
                Layer::Flatten => {
                    let rest = self.graph.shape(x).iter().skip(1).product();
                    self.graph.apply(Reshape(vec![self.batch, rest]), &[x])?
                }
                Layer::GlobalPool => self.graph.apply(GlobalAvgPool, &[x])?,
                Layer::Residual { body } => {
                    let y = self.layers(body, x)?;
                    self.graph.apply(Add, &[x, y])?
                }
            };
        }
        Ok(x)
    }
}

/// Graph of the mean cross-entropy of `model` on one batch, plus the
/// dampening penalty over every quantized weight tensor when `lambda > 0`.
/// BN layers use batch statistics.
pub fn build_train_graph(model: &Model, x: Tensor, labels: Vec<usize>, lambda: f64) -> Result<TrainGraph> {
    let batch = x.shape().first().copied().unwrap_or(0);
    let mut graph = Graph::new();
    let params = model.params.iter().map(|p| graph.param(p.value.clone())).collect();
    let input = graph.constant(x);
    let mut b = GraphBuilder {
        model,
        graph,
        params,
        norm_inputs: Vec::new(),
        penalties: Vec::new(),
        lambda,
        batch,
    };
    let logits = b.layers(&model.layers, input)?;
    let task_loss = b.graph.apply(SoftmaxCrossEntropy { labels }, &[logits])?;
    let mut penalty = None;
    for p in std::mem::take(&mut b.penalties) {
        penalty = Some(match penalty {
            None => p,
            Some(acc) => b.graph.apply(Add, &[acc, p])?,
        });
    }
    let loss = match penalty {
        Some(p) => b.graph.apply(Add, &[task_loss, p])?,
        None => task_loss,
    };
    Ok(TrainGraph {
        graph: b.graph,
        loss,
        task_loss,
        logits,
        penalty,
        params: b.params,
        norm_inputs: b.norm_inputs,
    })
}
