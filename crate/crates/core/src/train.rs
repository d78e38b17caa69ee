//! The QAT pipeline: full-precision pretraining, quantizer calibration, the
//! training loop with oscillation tracking and remedies, evaluation with and
//! without BN re-estimation, and the checkpoint-level reports.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ops::softmax_rows;
use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nets::{build_model, build_train_graph, zoo, BnMode, ExecTrace, Model, QuantSpec, WeightKind};
use crate::normstats::{batch_statistics, kl_summary, KlSummary};
use crate::optim::SgdState;
use crate::oscillation::{
    anneal_binary, freeze_step, oscillating_levels, sample_oscillating, AnnealConfig, FreezeConfig,
    OSCILLATION_REPORT_THRESHOLD,
};
use crate::schedule::CosineSchedule;
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.oqat";
pub const LAST_GOOD_FILE: &str = "last_good.oqat";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.json";

const PRETRAIN_STREAM: u64 = 0x5052_4554;
const QAT_STREAM: u64 = 0x0051_4154;

fn epoch_seed(seed: u64, stream: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.rotate_left(17) ^ epoch as u64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub task_loss: f64,
}

/// One SGD step on a batch: forward, BN running-statistics update, backward
/// and a parameter update that leaves frozen weights untouched. The model is
/// unchanged when the loss or any gradient is not finite.
pub fn train_step(
    model: &mut Model,
    opt: &mut SgdState,
    x: Tensor,
    labels: Vec<usize>,
    lambda: f64,
) -> Result<StepOutcome> {
    let mut tg = build_train_graph(model, x, labels, lambda)?;
    let loss = tg.graph.forward(tg.loss)?.item();
    let task_loss = tg
        .graph
        .value(tg.task_loss)
        .ok_or(Error::NotEvaluated(tg.task_loss.index()))?
        .item();
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("training loss became {loss}")));
    }
    let mut grads = tg.graph.backward(tg.loss)?;
    let grads: Vec<Option<Tensor>> = tg.params.iter().map(|&p| grads.take(p)).collect();
    if let Some(slot) = grads.iter().position(|g| g.as_ref().is_some_and(|g| !g.all_finite())) {
        return Err(Error::Diverged(format!(
            "gradient of {} is not finite",
            model.params[slot].name
        )));
    }
    for &(norm, node) in &tg.norm_inputs {
        let input = tg.graph.value(node).ok_or(Error::NotEvaluated(node.index()))?;
        let (mean, var) = batch_statistics(input)?;
        model.norms[norm].stats.update_running(&mean, &var);
    }
    let masks: Vec<Option<Vec<bool>>> = model
        .frozen_masks()
        .into_iter()
        .map(|m| m.map(<[bool]>::to_vec))
        .collect();
    for (slot, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            opt.step_slot(slot, &mut model.params[slot].value, g, masks[slot].as_deref())?;
        }
    }
    model.clamp_scales();
    Ok(StepOutcome { loss, task_loss })
}

/// Records the new integer weights in every tracker, then freezes against
/// the scheduled threshold or just advances the integer EMA.
pub fn track_weights(model: &mut Model, freeze: Option<&FreezeConfig>, step: u64) -> Result<usize> {
    let mut newly = 0;
    for k in 0..model.weight_quant.len() {
        let ints = model.weight_ints(k)?;
        let Some(t) = model.weight_quant[k].tracker.as_mut() else {
            continue;
        };
        t.track_step(&ints)?;
        match freeze {
            Some(cfg) => newly += freeze_step(t, cfg, step).len(),
            None => t.update_integer_ema(),
        }
    }
    Ok(newly)
}

/// Inputs of `data` in consecutive chunks of at most `batch` samples.
pub fn input_batches(data: &Dataset, batch: usize) -> Vec<Tensor> {
    let idx: Vec<usize> = (0..data.len()).collect();
    idx.chunks(batch.max(1)).map(|c| data.gather(c).0).collect()
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        )
        .0
}

/// Top-1 accuracy with running BN statistics.
pub fn accuracy(model: &Model, data: &Dataset, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Invalid("accuracy of an empty dataset".into()));
    }
    let outputs = model.forward_batches(input_batches(data, batch), BnMode::Running, None)?;
    let mut correct = 0;
    let mut i = 0;
    for out in outputs {
        let k = out.shape()[1];
        for row in out.data().chunks(k) {
            if argmax(row) == data.labels[i] {
                correct += 1;
            }
            i += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mean cross-entropy over `batches`, each batch normalized with its own
/// statistics.
pub fn task_loss(model: &Model, batches: &[(Tensor, Vec<usize>)]) -> Result<f64> {
    let xs = batches.iter().map(|(x, _)| x.clone()).collect();
    let outputs = model.forward_batches(xs, BnMode::Batch, None)?;
    let (mut total, mut count) = (0.0, 0usize);
    for (out, (_, labels)) in outputs.iter().zip(batches) {
        let k = out.shape()[1];
        let p = softmax_rows(out);
        for (row, &l) in p.chunks(k).zip(labels) {
            total -= row[l].max(f64::MIN_POSITIVE).ln();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Invalid("task loss over no samples".into()));
    }
    Ok(total / count as f64)
}

/// KL drift of one BN layer's running statistics from the statistics of its
/// actual inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerKl {
    pub name: String,
    pub source: Option<WeightKind>,
    pub fanin: Option<usize>,
    pub max: f64,
    pub mean: f64,
}

/// Per-layer drift of the running statistics from the exact statistics
/// observed on `batches` (forward pass with running statistics).
pub fn kl_report(model: &Model, batches: &[Tensor]) -> Result<Vec<LayerKl>> {
    if batches.is_empty() {
        return Err(Error::Invalid("KL report needs at least one batch".into()));
    }
    let mut trace = ExecTrace::collecting(model);
    model.forward_batches(batches.to_vec(), BnMode::Running, Some(&mut trace))?;
    let mut out = Vec::new();
    for (norm, acc) in model.norms.iter().zip(trace.norm_inputs) {
        let Some(acc) = acc.filter(|a| !a.is_empty()) else {
            continue;
        };
        let (pm, pv) = acc.finish();
        let KlSummary { max, mean } = kl_summary(&pm, &pv, &norm.stats.mean, &norm.stats.var)?;
        out.push(LayerKl {
            name: norm.name.clone(),
            source: norm.source.map(|s| s.0),
            fanin: norm.source.map(|s| s.1),
            max,
            mean,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub pre_bn_accuracy: f64,
    pub post_bn_accuracy: f64,
    pub kl: Vec<LayerKl>,
}

/// Accuracy with the training-time running statistics, accuracy after
/// re-estimating them on `bn_batches` (on a copy), and the drift of the
/// running statistics.
pub fn evaluate(model: &Model, eval: &Dataset, bn_batches: &[Tensor], batch: usize) -> Result<EvalRecord> {
    let pre_bn_accuracy = accuracy(model, eval, batch)?;
    let kl = kl_report(model, bn_batches)?;
    let mut re = model.clone();
    re.reestimate_bn(bn_batches)?;
    let post_bn_accuracy = accuracy(&re, eval, batch)?;
    Ok(EvalRecord {
        pre_bn_accuracy,
        post_bn_accuracy,
        kl,
    })
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub task_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub f_th: Option<f64>,
    pub oscillating_fraction: f64,
    pub frozen_fraction: f64,
    pub mean_frequency: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<EvalRecord>,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(line).map_err(|e| Error::Parse {
                offset,
                message: format!("bad metrics record: {e}"),
            })?);
        }
        offset += line.len() as u64;
    }
    Ok(out)
}

fn mean_frequency(model: &Model) -> f64 {
    let (sum, n) = model.trackers().fold((0.0, 0), |(s, n), t| {
        (s + t.frequencies().iter().sum::<f64>(), n + t.len())
    });
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn model_specs(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<crate::nets::LayerSpec>> {
    zoo::by_name(&cfg.model, data.sample_shape(), data.classes)
}

/// Batches used for BN re-estimation and drift reports: the first
/// `bn_reestimate_batches` training batches in order.
pub fn bn_batches(cfg: &ExperimentConfig, train: &Dataset) -> Vec<Tensor> {
    input_batches(train, cfg.optimizer.batch_size)
        .into_iter()
        .filter(|b| b.shape()[0] > 1)
        .take(cfg.bn_reestimate_batches)
        .collect()
}

fn check_dataset(train: &Dataset, eval: &Dataset, batch: usize) -> Result<()> {
    if train.len() < batch.max(2) || eval.is_empty() {
        return Err(Error::Config(format!(
            "dataset too small: {} training samples for batch size {batch}, {} eval samples",
            train.len(),
            eval.len()
        )));
    }
    if train.sample_shape() != eval.sample_shape() {
        return Err(Error::Config(format!(
            "train samples {:?} and eval samples {:?} differ in shape",
            train.sample_shape(),
            eval.sample_shape()
        )));
    }
    Ok(())
}

/// Full-precision training from a seeded initialization.
pub fn pretrain(cfg: &ExperimentConfig, train: &Dataset) -> Result<Model> {
    let specs = model_specs(cfg, train)?;
    let mut model = build_model(&specs, train.sample_shape(), &QuantSpec::full_precision(), cfg.seed)?;
    let o = &cfg.optimizer;
    let per_epoch = train.batches(o.batch_size).len() as u64;
    let total = per_epoch * o.pretrain_epochs as u64;
    if total == 0 {
        return Ok(model);
    }
    let lr0 = o.pretrain_lr.unwrap_or(o.lr);
    let sched = CosineSchedule::new(lr0, 0.0, total)?;
    let mut opt = SgdState::new(lr0, o.momentum)?;
    let mut step = 0;
    for epoch in 0..o.pretrain_epochs {
        for (x, labels) in train.shuffled_batches(o.batch_size, epoch_seed(cfg.seed, PRETRAIN_STREAM, epoch)) {
            opt.lr = sched.value(step).max(f64::MIN_POSITIVE);
            let out = train_step(&mut model, &mut opt, x, labels, 0.0)?;
            log::debug!("pretrain step {step} loss {:.5}", out.loss);
            step += 1;
        }
        log::info!("pretrain epoch {} done", epoch + 1);
    }
    Ok(model)
}

/// The quantized copy of a full-precision model: same architecture with
/// quantizers, weights copied, quantizers calibrated, trackers reset.
pub fn quantized_from(cfg: &ExperimentConfig, fp: &Model, train: &Dataset) -> Result<Model> {
    let specs = model_specs(cfg, train)?;
    let mut model = build_model(&specs, train.sample_shape(), &cfg.quant.spec(), cfg.seed)?;
    model.copy_weights_from(fp)?;
    let n = cfg.optimizer.batch_size.min(train.len());
    let (calib, _) = train.gather(&(0..n).collect::<Vec<_>>());
    model.calibrate(&calib)?;
    let momentum = match cfg.remedy {
        crate::config::Remedy::Freeze { momentum, .. } => momentum,
        _ => cfg.ema_momentum,
    };
    model.reset_trackers(momentum)?;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub steps: u64,
    pub fp_accuracy: f64,
    pub final_loss: f64,
    pub pre_bn_accuracy: f64,
    pub post_bn_accuracy: f64,
    pub oscillating_fraction: f64,
    pub frozen_fraction: f64,
    pub kl: Vec<LayerKl>,
}

pub struct QatRun {
    pub model: Model,
    pub records: Vec<MetricsRecord>,
    pub summary: TrainSummary,
}

/// Quantization-aware training starting from `fp`. When `out` is given the
/// metrics log is streamed there, and on divergence the last good model is
/// saved before the error is returned.
pub fn run_qat(
    cfg: &ExperimentConfig,
    fp: &Model,
    train: &Dataset,
    eval: &Dataset,
    out: Option<&Path>,
) -> Result<QatRun> {
    check_dataset(train, eval, cfg.optimizer.batch_size)?;
    let o = &cfg.optimizer;
    let fp_accuracy = accuracy(fp, eval, o.batch_size)?;
    let mut model = quantized_from(cfg, fp, train)?;
    let per_epoch = train.batches(o.batch_size).len() as u64;
    let total = per_epoch * o.epochs as u64;
    let lr_sched = CosineSchedule::new(o.lr, 0.0, total.max(1))?;
    let dampen = cfg.remedy.dampen(total)?;
    let freeze = cfg.remedy.freeze(total)?;
    let bn = bn_batches(cfg, train);
    let mut opt = SgdState::new(o.lr, o.momentum)?;
    let mut log = match out {
        Some(dir) => Some(BufWriter::new(File::create(dir.join(METRICS_FILE))?)),
        None => None,
    };
    let mut records = Vec::with_capacity(total as usize);
    let mut step = 0u64;
    let mut last_eval = None;
    let mut final_loss = f64::NAN;
    for epoch in 0..o.epochs {
        let batches = train.shuffled_batches(o.batch_size, epoch_seed(cfg.seed, QAT_STREAM, epoch));
        let n = batches.len();
        for (i, (x, labels)) in batches.into_iter().enumerate() {
            let lr = lr_sched.value(step);
            opt.lr = lr.max(f64::MIN_POSITIVE);
            let lambda = dampen.map(|d| d.lambda.value(step));
            let outcome = match train_step(&mut model, &mut opt, x, labels, lambda.unwrap_or(0.0)) {
                Ok(o) => o,
                Err(e @ Error::Diverged(_)) => {
                    if let Some(dir) = out {
                        if let Some(w) = log.as_mut() {
                            w.flush()?;
                        }
                        checkpoint::save(&dir.join(LAST_GOOD_FILE), &model.state_tensors())?;
                    }
                    return Err(Error::Diverged(format!("step {step}: {e}")));
                }
                Err(e) => return Err(e),
            };
            let f_th = freeze.map(|f| f.threshold.value(step));
            track_weights(&mut model, freeze.as_ref(), step)?;
            let eval_record = if i + 1 == n {
                let r = evaluate(&model, eval, &bn, o.batch_size)?;
                log::info!(
                    "epoch {} step {step}: loss {:.4} pre-BN {:.4} post-BN {:.4} osc {:.4}",
                    epoch + 1,
                    outcome.loss,
                    r.pre_bn_accuracy,
                    r.post_bn_accuracy,
                    model.oscillating_fraction(OSCILLATION_REPORT_THRESHOLD)
                );
                last_eval = Some(r.clone());
                Some(r)
            } else {
                None
            };
            let rec = MetricsRecord {
                step,
                epoch,
                lr,
                loss: outcome.loss,
                task_loss: outcome.task_loss,
                lambda,
                f_th,
                oscillating_fraction: model.oscillating_fraction(OSCILLATION_REPORT_THRESHOLD),
                frozen_fraction: model.frozen_fraction(),
                mean_frequency: mean_frequency(&model),
                eval: eval_record,
            };
            if let Some(w) = log.as_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n")?;
            }
            final_loss = outcome.loss;
            records.push(rec);
            step += 1;
        }
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    let last = match last_eval {
        Some(r) => r,
        None => evaluate(&model, eval, &bn, o.batch_size)?,
    };
    let summary = TrainSummary {
        seed: cfg.seed,
        steps: step,
        fp_accuracy,
        final_loss,
        pre_bn_accuracy: last.pre_bn_accuracy,
        post_bn_accuracy: last.post_bn_accuracy,
        oscillating_fraction: model.oscillating_fraction(OSCILLATION_REPORT_THRESHOLD),
        frozen_fraction: model.frozen_fraction(),
        kl: last.kl,
    };
    Ok(QatRun {
        model,
        records,
        summary,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Pretraining, QAT and the run artifacts: config copy, metrics log,
/// checkpoint (training-time BN statistics) and summary.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let (train, eval) = cfg.datasets()?;
    check_dataset(&train, &eval, cfg.optimizer.batch_size)?;
    let dir = cfg.output_dir.as_path();
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join(CONFIG_FILE), cfg)?;
    let fp = pretrain(cfg, &train)?;
    let run = run_qat(cfg, &fp, &train, &eval, Some(dir))?;
    checkpoint::save(&dir.join(CHECKPOINT_FILE), &run.model.state_tensors())?;
    write_json(&dir.join(SUMMARY_FILE), &run.summary)?;
    Ok(run.summary)
}

/// Rebuilds the configured quantized model and loads a checkpoint into it.
pub fn load_checkpoint(cfg: &ExperimentConfig, train: &Dataset, path: &Path) -> Result<Model> {
    let specs = model_specs(cfg, train)?;
    let mut model = build_model(&specs, train.sample_shape(), &cfg.quant.spec(), cfg.seed)?;
    let tensors: BTreeMap<String, Tensor> = checkpoint::load(path)?.into_iter().collect();
    model.load_state(&tensors, true)?;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReestimateLayer {
    pub name: String,
    pub source: Option<WeightKind>,
    pub fanin: Option<usize>,
    pub before: KlSummary,
    pub after: KlSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReestimateReport {
    pub batches: usize,
    pub layers: Vec<ReestimateLayer>,
}

/// Re-estimates the BN statistics of `model` on `batches` and reports the
/// drift before and after. Models without BN are left alone.
pub fn reestimate(model: &mut Model, batches: &[Tensor]) -> Result<ReestimateReport> {
    if model.norms.is_empty() {
        log::warn!("model has no batch-norm layers; nothing to re-estimate");
        return Ok(ReestimateReport {
            batches: batches.len(),
            layers: Vec::new(),
        });
    }
    let before = kl_report(model, batches)?;
    model.reestimate_bn(batches)?;
    let after = kl_report(model, batches)?;
    let layers = before
        .into_iter()
        .zip(after)
        .map(|(b, a)| ReestimateLayer {
            name: b.name,
            source: b.source,
            fanin: b.fanin,
            before: KlSummary {
                max: b.max,
                mean: b.mean,
            },
            after: KlSummary {
                max: a.max,
                mean: a.mean,
            },
        })
        .collect();
    Ok(ReestimateReport {
        batches: batches.len(),
        layers,
    })
}

/// `(weight slot, index, low level, high level)` of every unfrozen weight
/// with `f > f_min` that moved between two distinct levels.
pub fn oscillating_weights(model: &Model, f_min: f64) -> Vec<(usize, usize, i64, i64)> {
    let mut out = Vec::new();
    for (k, wq) in model.weight_quant.iter().enumerate() {
        let Some(t) = &wq.tracker else { continue };
        for i in 0..t.len() {
            if t.frozen()[i] || t.frequencies()[i] <= f_min {
                continue;
            }
            let (lo, hi) = oscillating_levels(t, i);
            if lo != hi {
                out.push((k, i, lo, hi));
            }
        }
    }
    out
}

/// Places latent weight `i` of slot `k` on the center of integer level `v`.
pub fn set_weight_int(model: &mut Model, k: usize, i: usize, v: i64) {
    let (param, s) = {
        let wq = &model.weight_quant[k];
        (wq.param, model.params[wq.scale].value.item())
    };
    model.params[param].value.data_mut()[i] = s * v as f64;
}

fn require_trackers(model: &Model) -> Result<()> {
    if model.weight_quant.is_empty() || model.weight_quant.iter().any(|w| w.tracker.is_none()) {
        return Err(Error::Config(
            "checkpoint has no oscillation tracker state; retrain with quantization enabled".into(),
        ));
    }
    Ok(())
}

/// Fixed batches on which sampled and annealed losses are measured.
pub fn loss_batches(cfg: &ExperimentConfig, train: &Dataset) -> Vec<(Tensor, Vec<usize>)> {
    let n = cfg.post.loss_samples.min(train.len());
    train.slice(0, n).batches(cfg.optimizer.batch_size.min(n).max(1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub oscillating_weights: usize,
    pub checkpoint_loss: f64,
    pub trials: usize,
    pub losses: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub best: f64,
}

/// Task loss of `trials` stochastic roundings of the oscillating weights.
pub fn sample_report(
    model: &Model,
    batches: &[(Tensor, Vec<usize>)],
    trials: usize,
    seed: u64,
) -> Result<SampleReport> {
    require_trackers(model)?;
    if trials == 0 {
        return Err(Error::Config("at least one trial is needed".into()));
    }
    let checkpoint_loss = task_loss(model, batches)?;
    let osc = oscillating_weights(model, OSCILLATION_REPORT_THRESHOLD);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut m = model.clone();
        for k in 0..m.weight_quant.len() {
            let t = m.weight_quant[k].tracker.as_ref().expect("checked above");
            let ints = sample_oscillating(t, OSCILLATION_REPORT_THRESHOLD, &mut rng);
            for &(kk, i, _, _) in osc.iter().filter(|e| e.0 == k) {
                set_weight_int(&mut m, kk, i, ints[i]);
            }
        }
        losses.push(task_loss(&m, batches)?);
    }
    let mean = losses.iter().sum::<f64>() / trials as f64;
    let std = (losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / trials as f64).sqrt();
    let best = losses.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(SampleReport {
        oscillating_weights: osc.len(),
        checkpoint_loss,
        trials,
        losses,
        mean,
        std,
        best,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealReport {
    pub oscillating_weights: usize,
    pub checkpoint_loss: f64,
    pub loss: f64,
    pub proposals: usize,
    pub evaluations: usize,
    pub accepted: usize,
}

/// Simulated annealing over the two levels of every oscillating weight,
/// starting from the checkpoint's integers. Returns the report and the
/// model with the best assignment applied.
pub fn anneal_report(
    model: &Model,
    batches: &[(Tensor, Vec<usize>)],
    proposals_per_weight: usize,
    seed: u64,
) -> Result<(AnnealReport, Model)> {
    require_trackers(model)?;
    let osc = oscillating_weights(model, OSCILLATION_REPORT_THRESHOLD);
    let mut m = model.clone();
    let initial: Vec<bool> = osc
        .iter()
        .map(|&(k, i, _, hi)| {
            model.weight_quant[k]
                .tracker
                .as_ref()
                .expect("checked above")
                .current_int()[i]
                == hi
        })
        .collect();
    let cfg = AnnealConfig {
        proposals: proposals_per_weight * osc.len(),
        ..AnnealConfig::for_size(osc.len())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let result = anneal_binary(
        &initial,
        |bits: &[bool]| {
            for (&(k, i, lo, hi), &b) in osc.iter().zip(bits) {
                set_weight_int(&mut m, k, i, if b { hi } else { lo });
            }
            task_loss(&m, batches)
        },
        &cfg,
        &mut rng,
    )?;
    for (&(k, i, lo, hi), &b) in osc.iter().zip(&result.assignment) {
        set_weight_int(&mut m, k, i, if b { hi } else { lo });
    }
    Ok((
        AnnealReport {
            oscillating_weights: osc.len(),
            checkpoint_loss: result.initial_loss,
            loss: result.loss,
            proposals: cfg.proposals,
            evaluations: result.evaluations,
            accepted: result.accepted,
        },
        m,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerOscillation {
    pub name: String,
    pub kind: WeightKind,
    pub fanin: usize,
    pub bits: u32,
    pub weights: usize,
    pub oscillating_fraction: f64,
    pub frozen_fraction: f64,
    pub mean_frequency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogCheck {
    pub records: usize,
    pub contiguous: bool,
    pub final_oscillating_fraction: Option<f64>,
    pub matches_checkpoint: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub oscillating_fraction: f64,
    pub frozen_fraction: f64,
    pub layers: Vec<LayerOscillation>,
    pub kl: Vec<LayerKl>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub log: Option<LogCheck>,
}

/// Oscillation and BN-drift report of a checkpoint, cross-checked against
/// its metrics log when one is given.
pub fn analyze(model: &Model, bn: &[Tensor], log: Option<&[MetricsRecord]>) -> Result<Analysis> {
    require_trackers(model)?;
    let layers = model
        .weight_quant
        .iter()
        .map(|wq| {
            let t = wq.tracker.as_ref().expect("checked above");
            LayerOscillation {
                name: wq.name.clone(),
                kind: wq.kind,
                fanin: wq.fanin,
                bits: wq.state.bits,
                weights: t.len(),
                oscillating_fraction: t.oscillating_fraction(OSCILLATION_REPORT_THRESHOLD),
                frozen_fraction: t.frozen_count() as f64 / t.len().max(1) as f64,
                mean_frequency: t.mean_frequency(),
            }
        })
        .collect();
    let oscillating_fraction = model.oscillating_fraction(OSCILLATION_REPORT_THRESHOLD);
    let log = log.map(|records| {
        let contiguous = records.iter().enumerate().all(|(i, r)| r.step == i as u64);
        let final_oscillating_fraction = records.last().map(|r| r.oscillating_fraction);
        LogCheck {
            records: records.len(),
            contiguous,
            final_oscillating_fraction,
            matches_checkpoint: final_oscillating_fraction == Some(oscillating_fraction),
        }
    });
    Ok(Analysis {
        oscillating_fraction,
        frozen_fraction: model.frozen_fraction(),
        layers,
        kl: kl_report(model, bn)?,
        log,
    })
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{"seed": 5, "model": "toy_dwnet",
                "dataset": {"source": "synthetic", "classes": 3, "height": 8, "width": 8,
                            "train_samples": 96, "eval_samples": 32, "noise": 0.05},
                "optimizer": {"pretrain_epochs": 1, "epochs": 2, "batch_size": 16, "lr": 0.05},
                "bn_reestimate_batches": 3}"#,
        )
        .unwrap()
    }

    #[test]
    fn qat_log_is_contiguous_with_eval_per_epoch() {
        let cfg = tiny_config();
        let (train, eval) = cfg.datasets().unwrap();
        let fp = pretrain(&cfg, &train).unwrap();
        let run = run_qat(&cfg, &fp, &train, &eval, None).unwrap();
        assert_eq!(run.records.len(), 12);
        for (i, r) in run.records.iter().enumerate() {
            assert_eq!(r.step, i as u64);
            assert!((0.0..=1.0).contains(&r.oscillating_fraction));
            assert_eq!(r.eval.is_some(), i % 6 == 5);
        }
        assert!((0.0..=1.0).contains(&run.summary.post_bn_accuracy));
    }

    #[test]
    fn frozen_integers_never_change() {
        let mut cfg = tiny_config();
        cfg.remedy = crate::config::Remedy::Freeze {
            threshold: crate::config::Endpoints {
                start: 0.02,
                end: 0.011,
            },
            momentum: 0.01,
        };
        let (train, _) = cfg.datasets().unwrap();
        let fp = pretrain(&cfg, &train).unwrap();
        let mut model = quantized_from(&cfg, &fp, &train).unwrap();
        let freeze = cfg.remedy.freeze(30).unwrap().unwrap();
        let mut opt = SgdState::new(0.2, 0.9).unwrap();
        let mut pinned: BTreeMap<(usize, usize), i64> = BTreeMap::new();
        for step in 0..30u64 {
            for (x, l) in train.shuffled_batches(16, step).into_iter().take(1) {
                train_step(&mut model, &mut opt, x, l, 0.0).unwrap();
            }
            track_weights(&mut model, Some(&freeze), step).unwrap();
            for k in 0..model.weight_quant.len() {
                let ints = model.weight_ints(k).unwrap();
                let t = model.weight_quant[k].tracker.as_ref().unwrap();
                for (&key, &v) in pinned.iter().filter(|(key, _)| key.0 == k) {
                    assert!(t.frozen()[key.1]);
                    assert_eq!(ints[key.1], v);
                }
                for i in 0..t.len() {
                    if t.frozen()[i] {
                        pinned.entry((k, i)).or_insert(ints[i]);
                    }
                }
            }
        }
        assert!(!pinned.is_empty(), "nothing froze");
    }

    #[test]
    fn reestimation_zeroes_drift_and_is_idempotent() {
        let cfg = tiny_config();
        let (train, eval) = cfg.datasets().unwrap();
        let fp = pretrain(&cfg, &train).unwrap();
        let mut model = run_qat(&cfg, &fp, &train, &eval, None).unwrap().model;
        let bn = bn_batches(&cfg, &train);
        let report = reestimate(&mut model, &bn).unwrap();
        assert!(!report.layers.is_empty());
        for l in &report.layers {
            assert!(l.after.max.abs() <= 1e-9, "{l:?}");
        }
        let params: Vec<Tensor> = model.params.iter().map(|p| p.value.clone()).collect();
        let stats: Vec<_> = model.norms.iter().map(|n| n.stats.clone()).collect();
        reestimate(&mut model, &bn).unwrap();
        let stats2: Vec<_> = model.norms.iter().map(|n| n.stats.clone()).collect();
        assert_eq!(params, model.params.iter().map(|p| p.value.clone()).collect::<Vec<_>>());
        for (a, b) in stats.iter().zip(&stats2) {
            for (x, y) in a.mean.iter().zip(&b.mean).chain(a.var.iter().zip(&b.var)) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn no_oscillations_means_equal_losses() {
        let cfg = tiny_config();
        let (train, _) = cfg.datasets().unwrap();
        let fp = pretrain(&cfg, &train).unwrap();
        let model = quantized_from(&cfg, &fp, &train).unwrap();
        let batches = loss_batches(&cfg, &train);
        let s = sample_report(&model, &batches, 3, 1).unwrap();
        assert_eq!(s.oscillating_weights, 0);
        assert!(s.losses.iter().all(|&l| l == s.checkpoint_loss));
        let (a, _) = anneal_report(&model, &batches, 50, 1).unwrap();
        assert_eq!(a.loss, a.checkpoint_loss);
    }

    #[test]
    fn untracked_model_is_rejected() {
        let cfg = tiny_config();
        let (train, _) = cfg.datasets().unwrap();
        let fp = pretrain(&cfg, &train).unwrap();
        let err = sample_report(&fp, &loss_batches(&cfg, &train), 1, 0).unwrap_err();
        assert!(err.is_config());
    }
}
