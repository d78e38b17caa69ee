//! Graph-free forward execution over a list of batches, used for
//! evaluation, calibration, BN re-estimation and drift diagnostics.

use super::{Layer, Model};
use crate::autodiff::ops::{affine_normalize, linear_forward};
use crate::error::{Error, Result};
use crate::kernels::{channel_moments, conv2d};
use crate::normstats::{ChannelAccumulator, BN_EPS};
use crate::quant::quantize_forward;
use crate::tensor::Tensor;

/// How batch-norm layers normalize.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Running statistics.
    Running,
    /// Each batch's own statistics; running statistics are not touched.
    Batch,
    /// Exact statistics over all batches, computed layer by layer and
    /// written back as the new running statistics.
    Reestimate,
}

/// Optional side outputs of a forward pass.
#[derive(Clone, Debug, Default)]
pub struct ExecTrace {
    /// Input of each activation quantizer in the first batch.
    pub act_inputs: Vec<Option<Tensor>>,
    /// Per-channel statistics of every BN input over all batches.
    pub norm_inputs: Vec<Option<ChannelAccumulator>>,
    capture_acts: bool,
    collect_norms: bool,
}

impl ExecTrace {
    pub fn capturing(model: &Model) -> Self {
        ExecTrace {
            act_inputs: vec![None; model.act_quant.len()],
            capture_acts: true,
            ..Default::default()
        }
    }

    pub fn collecting(model: &Model) -> Self {
        ExecTrace {
            norm_inputs: model
                .norms
                .iter()
                .map(|n| Some(ChannelAccumulator::new(n.stats.channels())))
                .collect(),
            collect_norms: true,
            ..Default::default()
        }
    }
}

struct Runner<'a> {
    model: &'a Model,
    weights: Vec<Option<Tensor>>,
    mode: BnMode,
    trace: Option<&'a mut ExecTrace>,
    updates: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

fn each(xs: Vec<Tensor>, f: impl Fn(Tensor) -> Result<Tensor>) -> Result<Vec<Tensor>> {
    xs.into_iter().map(f).collect()
}

impl<'a> Runner<'a> {
    fn new(model: &'a Model, mode: BnMode, trace: Option<&'a mut ExecTrace>) -> Result<Self> {
        let mut weights = vec![None; model.params.len()];
        if model.quant_active {
            for k in 0..model.weight_quant.len() {
                weights[model.weight_quant[k].param] = Some(model.effective_weight(k)?);
            }
        }
        Ok(Runner {
            model,
            weights,
            mode,
            trace,
            updates: vec![None; model.norms.len()],
        })
    }

    fn weight(&self, id: usize) -> &Tensor {
        self.weights[id].as_ref().unwrap_or(&self.model.params[id].value)
    }

    fn activation(&mut self, aq: Option<usize>, xs: Vec<Tensor>) -> Result<Vec<Tensor>> {
        let Some(k) = aq else { return Ok(xs) };
        if let Some(trace) = self.trace.as_deref_mut() {
            if trace.capture_acts && trace.act_inputs[k].is_none() {
                trace.act_inputs[k] = xs.first().cloned();
            }
        }
        if !self.model.quant_active {
            return Ok(xs);
        }
        let q = self.model.act_state(k);
        each(xs, |x| Ok(quantize_forward(&x, &q)?.0))
    }

    fn run(&mut self, layers: &[Layer], mut xs: Vec<Tensor>) -> Result<Vec<Tensor>> {
        let params = &self.model.params;
        for layer in layers {
            xs = match layer {
                Layer::Conv { weight, geom, aq, .. } => {
                    let xs = self.activation(*aq, xs)?;
                    let w = self.weight(*weight);
                    each(xs, |x| conv2d(&x, w, *geom))?
                }
                Layer::Linear { weight, bias, aq, .. } => {
                    let xs = self.activation(*aq, xs)?;
                    let w = self.weight(*weight);
                    each(xs, |x| linear_forward(&x, w, &params[*bias].value))?
                }
                Layer::Bn { gamma, beta, norm } => {
                    let (g, b) = (&params[*gamma].value, &params[*beta].value);
                    if let Some(trace) = self.trace.as_deref_mut() {
                        if trace.collect_norms {
                            let acc = trace.norm_inputs[*norm].as_mut().expect("accumulator per norm");
                            for x in &xs {
                                acc.add(x)?;
                            }
                        }
                    }
                    match self.mode {
                        BnMode::Running => {
                            let st = &self.model.norms[*norm].stats;
                            each(xs, |x| affine_normalize(&x, &st.mean, &st.var, BN_EPS, g, b))?
                        }
                        BnMode::Batch => each(xs, |x| {
                            let (m, v) = channel_moments(&x)?;
                            affine_normalize(&x, &m, &v, BN_EPS, g, b)
                        })?,
                        BnMode::Reestimate => {
                            let mut acc = ChannelAccumulator::new(self.model.norms[*norm].stats.channels());
                            for x in &xs {
                                acc.add(x)?;
                            }
                            let (m, v) = acc.finish();
                            let out = each(xs, |x| affine_normalize(&x, &m, &v, BN_EPS, g, b))?;
                            self.updates[*norm] = Some((m, v));
                            out
                        }
                    }
                }
                Layer::Relu => each(xs, |x| Ok(x.map(|v| v.max(0.0))))?,
                Layer::Relu6 => each(xs, |x| Ok(x.map(|v| v.clamp(0.0, 6.0))))?,
                Layer::Flatten => each(xs, |x| {
                    let n = x.shape()[0];
                    let rest = x.len() / n.max(1);
                    x.reshape(&[n, rest])
                })?,
                Layer::GlobalPool => each(xs, |x| {
                    let s = x.shape().to_vec();
                    if s.len() != 4 {
                        return Err(Error::Invalid(format!("global pooling needs NCHW, got {s:?}")));
                    }
                    let hw = s[2] * s[3];
                    let data = x.data().chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect();
                    Tensor::new(vec![s[0], s[1]], data)
                })?,
                Layer::Residual { body } => {
                    let ys = self.run(body, xs.clone())?;
                    xs.into_iter()
                        .zip(ys)
                        .map(|(x, y)| x.zip_map(&y, |a, b| a + b))
                        .collect::<Result<_>>()?
                }
            };
        }
        Ok(xs)
    }
}

impl Model {
    fn check_inputs(&self, xs: &[Tensor]) -> Result<()> {
        for x in xs {
            if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
                return Err(Error::shape("model input", x.shape(), &self.input_shape));
            }
        }
        Ok(())
    }

    /// Forward pass over several batches without building a graph.
    pub fn forward_batches(&self, xs: Vec<Tensor>, mode: BnMode, trace: Option<&mut ExecTrace>) -> Result<Vec<Tensor>> {
        if mode == BnMode::Reestimate {
            return Err(Error::Invalid(
                "re-estimation mutates the model; use reestimate_bn".into(),
            ));
        }
        self.check_inputs(&xs)?;
        let mut runner = Runner::new(self, mode, trace)?;
        runner.run(&self.layers, xs)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = self.forward_batches(vec![x.clone()], BnMode::Running, None)?;
        Ok(out.pop().expect("one output per batch"))
    }

    /// Replaces every BN layer's running statistics with the exact mean and
    /// population variance of its inputs over `batches`, layer by layer.
    pub fn reestimate_bn(&mut self, batches: &[Tensor]) -> Result<()> {
        if batches.is_empty() {
            return Err(Error::Invalid(
                "batch-norm re-estimation needs at least one batch".into(),
            ));
        }
        self.check_inputs(batches)?;
        let updates = {
            let mut runner = Runner::new(self, BnMode::Reestimate, None)?;
            runner.run(&self.layers, batches.to_vec())?;
            runner.updates
        };
        for (norm, update) in self.norms.iter_mut().zip(updates) {
            if let Some((m, v)) = update {
                norm.stats.set(m, v);
            }
        }
        Ok(())
    }
}
