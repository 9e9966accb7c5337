//! Mini-batch training for every strategy.
//!
//! Each example in a batch gets its own tape and its own random stream
//! (`derive(seed, [step, j])`), so examples can run on any thread. Their
//! gradients are summed in example order, which keeps training bitwise
//! reproducible whether or not the parallel feature is on.
//!
//! Per-example losses are pre-scaled so their sum is the batch objective:
//! `CE/m − β_t·ΣH/N` for vmask and `CE/m + β_t·ΣKL/N` for IBA, where `m`
//! is the batch size and `N` the number of real tokens in the batch.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::checkpoint::Checkpoint;
use crate::corpus::{DatasetSplit, Example};
use crate::error::{Error, Result};
use crate::exec;
use crate::models::{MaskLayer, Mode, Model, Strategy};
use crate::rng;
use crate::tensorgrad::{Grad, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Target coefficient of the entropy bonus (vmask) or information
    /// penalty (iba).
    pub beta: f64,
    /// Steps over which β ramps linearly from 0; `None` means two epochs.
    pub anneal_steps: Option<usize>,
    /// Gumbel-softmax temperature.
    pub tau: f64,
    pub l2_weight: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Vmask,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            epochs: 10,
            batch_size: 32,
            beta: 0.1,
            anneal_steps: None,
            tau: 0.5,
            l2_weight: 1e-3,
            early_stop_patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be finite and non-negative", self.lr));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm {} must be positive", self.clip_norm));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.beta >= 0.0) {
            return bad(format!("beta {} must be non-negative", self.beta));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau {} must be positive", self.tau));
        }
        if !(self.l2_weight >= 0.0) {
            return bad(format!("l2_weight {} must be non-negative", self.l2_weight));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }

    pub fn resolved_anneal_steps(&self, n_train: usize) -> usize {
        self.anneal_steps.unwrap_or(2 * self.steps_per_epoch(n_train))
    }
}

/// `β_target · min(1, step / anneal_steps)`; constant when `anneal_steps == 0`.
pub fn kl_anneal(step: usize, beta_target: f64, anneal_steps: usize) -> f64 {
    if anneal_steps == 0 {
        return beta_target;
    }
    beta_target * (step as f64 / anneal_steps as f64).min(1.0)
}

/// Scales every gradient by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g *= s;
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamParams {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lr: c.lr,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }
}

/// First and second moments per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[&mut Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// One bias-corrected Adam update at step `t ≥ 1`. Parameters whose
/// gradient is `None` are frozen and left untouched.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Option<Vec<f64>>], state: &mut AdamState, hp: AdamParams, t: u64) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidArgument("adam step counter starts at 1".into()));
    }
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape("adam_step", &[params.len()], &[grads.len(), state.m.len()]));
    }
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let Some(g) = &grads[i] else { continue };
        if g.len() != p.numel() {
            return Err(Error::shape("adam_step", p.shape(), &[g.len()]));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            m[k] = hp.beta1 * m[k] + (1.0 - hp.beta1) * g[k];
            v[k] = hp.beta2 * v[k] + (1.0 - hp.beta2) * g[k] * g[k];
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            *w -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Epoch means of the batch objective and its parts.
    pub loss: f64,
    pub ce: f64,
    pub reg: f64,
    pub beta_t: f64,
    pub dev_acc: f64,
    /// Mean dev cross-entropy; breaks ties between equal dev accuracies.
    pub dev_ce: f64,
}

pub fn history_jsonl(history: &[EpochRecord]) -> Result<String> {
    let mut out = String::new();
    for r in history {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev accuracy, ties going
    /// to the lower dev cross-entropy.
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
}

struct ExampleGrads {
    ce: f64,
    reg: f64,
    grads: Vec<(usize, Grad)>,
}

/// Gradient and loss parts of one batch. Public so benchmarks can time it.
pub struct BatchGrads {
    pub grads: Vec<Option<Vec<f64>>>,
    pub ce: f64,
    pub reg: f64,
}

/// Forward and backward over `batch`, reduced in example order.
pub fn batch_gradients(model: &Model, batch: &[&Example], beta_t: f64, seed: u64, step: usize, l2_weight: f64) -> Result<BatchGrads> {
    let m = batch.len();
    if m == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n_tokens: usize = batch.iter().map(|e| e.true_length).sum();
    let per_example = exec::try_map_range(m, |j| -> Result<ExampleGrads> {
        let ex = batch[j];
        let mut r = rng::derive(seed, &[1, step as u64, j as u64]);
        let mut tape = Tape::new();
        let out = model.forward_example(&mut tape, ex, Mode::Train, &mut r, None)?;
        let ce = tape.cross_entropy(out.logits, &[ex.label])?;
        let ce_val = tape.value(ce).item();
        let mut loss = tape.scale(ce, 1.0 / m as f64);
        let mut reg = 0.0;
        if let Some(h) = out.entropy_sum {
            let bonus = tape.scale(h, beta_t / n_tokens as f64);
            reg -= tape.value(bonus).item();
            loss = tape.sub(loss, bonus)?;
        }
        if let Some(kl) = out.info_sum {
            let pen = tape.scale(kl, beta_t / n_tokens as f64);
            reg += tape.value(pen).item();
            loss = tape.add(loss, pen)?;
        }
        tape.backward(loss)?;
        let grads = out
            .params
            .iter()
            .filter_map(|&(i, v)| tape.grad_raw(v).map(|g| (i, g.clone())))
            .collect();
        Ok(ExampleGrads { ce: ce_val, reg, grads })
    })?;

    let refs = model.tensors();
    let mut grads: Vec<Option<Vec<f64>>> = refs.iter().map(|p| p.trainable.then(|| vec![0.0; p.tensor.numel()])).collect();
    let (mut ce, mut reg) = (0.0, 0.0);
    for eg in &per_example {
        ce += eg.ce / m as f64;
        reg += eg.reg;
        for (i, g) in &eg.grads {
            if let Some(dst) = grads[*i].as_mut() {
                g.add_to(dst, 1.0);
            }
        }
    }

    if model.strategy == Strategy::L2 && l2_weight > 0.0 {
        let mut tape = Tape::new();
        let mut vars = Vec::new();
        for (i, p) in refs.iter().enumerate() {
            if p.trainable && p.name != "embedding" {
                vars.push((i, tape.param(p.tensor)));
            }
        }
        let just_vars: Vec<_> = vars.iter().map(|&(_, v)| v).collect();
        let pen = baselines::l2_penalty(&mut tape, &just_vars, l2_weight)?;
        reg += tape.value(pen).item();
        tape.backward(pen)?;
        for (i, v) in vars {
            if let (Some(dst), Some(g)) = (grads[i].as_mut(), tape.grad_raw(v)) {
                g.add_to(dst, 1.0);
            }
        }
    }
    Ok(BatchGrads { grads, ce, reg })
}

/// Dev accuracy (percent) and mean dev cross-entropy in inference mode.
pub fn dev_scores(model: &Model, dev: &[Example]) -> Result<(f64, f64)> {
    if dev.is_empty() {
        return Err(Error::InvalidArgument("empty dev set".into()));
    }
    let per = exec::try_map_range(dev.len(), |i| -> Result<(bool, f64)> {
        let logits = model.logits(&dev[i], None)?;
        let p = crate::models::softmax(&logits);
        let label = dev[i].label;
        Ok((crate::models::argmax(&logits) == label, -p[label].max(f64::MIN_POSITIVE).ln()))
    })?;
    let n = dev.len() as f64;
    let acc = 100.0 * per.iter().filter(|x| x.0).count() as f64 / n;
    let ce = per.iter().map(|x| x.1).sum::<f64>() / n;
    Ok((acc, ce))
}

/// Trains `model` in place and returns the best-dev checkpoint together
/// with one history record per epoch.
pub fn train(model: &mut Model, data: &DatasetSplit, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if model.strategy != config.strategy {
        return Err(Error::InvalidArgument(format!(
            "model strategy {} does not match config strategy {}",
            model.strategy.name(),
            config.strategy.name()
        )));
    }
    if data.train.is_empty() || data.dev.is_empty() {
        return Err(Error::InvalidArgument("training needs non-empty train and dev sets".into()));
    }
    if model.vocab_len() != data.vocab.len() {
        return Err(Error::InvalidArgument(format!(
            "model vocabulary size {} does not match data {}",
            model.vocab_len(),
            data.vocab.len()
        )));
    }
    model.spec.validate(data.max_len)?;
    if let MaskLayer::Vmask { tau, .. } = &mut model.mask {
        *tau = config.tau;
    }
    let config_json = serde_json::to_value(config)?;
    let anneal = config.resolved_anneal_steps(data.train.len());
    let hp = AdamParams::from(config);
    let mut state = AdamState::new(&model.tensors_mut());
    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut best_score: Option<(f64, f64)> = None;
    let mut since_best = 0;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 1..=config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::derive(config.seed, &[0, epoch as u64]));
        let (mut loss_sum, mut ce_sum, mut reg_sum, mut n_batches) = (0.0, 0.0, 0.0, 0usize);
        let mut beta_t = 0.0;
        for chunk in order.chunks(config.batch_size) {
            beta_t = kl_anneal(step, config.beta, anneal);
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data.train[i]).collect();
            let BatchGrads { mut grads, ce, reg } = batch_gradients(model, &batch, beta_t, config.seed, step, config.l2_weight)?;
            let loss = ce + reg;
            let mut dense: Vec<Vec<f64>> = grads.iter_mut().filter_map(Option::take).collect();
            let norm = clip_gradients(&mut dense, config.clip_norm);
            if !loss.is_finite() || !norm.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    beta_t,
                    grad_norm: norm,
                    detail: format!("ce={ce} reg={reg}"),
                });
            }
            let mut it = dense.into_iter();
            let trainable: Vec<bool> = model.tensors().iter().map(|p| p.trainable).collect();
            let grads: Vec<Option<Vec<f64>>> = trainable.iter().map(|&t| if t { it.next() } else { None }).collect();
            step += 1;
            adam_step(&mut model.tensors_mut(), &grads, &mut state, hp, step as u64)?;
            loss_sum += loss;
            ce_sum += ce;
            reg_sum += reg;
            n_batches += 1;
        }
        let (dev_acc, dev_ce) = dev_scores(model, &data.dev)?;
        let nb = n_batches as f64;
        let record = EpochRecord {
            epoch,
            step,
            loss: loss_sum / nb,
            ce: ce_sum / nb,
            reg: reg_sum / nb,
            beta_t,
            dev_acc,
            dev_ce,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} ce {:.4} reg {:.4} beta_t {:.4} dev_acc {:.2}",
            record.loss,
            record.ce,
            record.reg,
            record.beta_t,
            record.dev_acc
        );
        history.push(record);
        if best_score.is_none_or(|(acc, ce)| dev_acc > acc || (dev_acc == acc && dev_ce < ce)) {
            best_score = Some((dev_acc, dev_ce));
            best = Some(Checkpoint {
                model: model.clone(),
                vocab: data.vocab.clone(),
                config: config_json.clone(),
                epoch,
                dev_accuracy: Some(dev_acc),
            });
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.early_stop_patience {
                log::info!("early stop after epoch {epoch}: no dev improvement for {since_best} epochs");
                break;
            }
        }
    }
    let best = match best {
        Some(b) => b,
        None => Checkpoint {
            model: model.clone(),
            vocab: data.vocab.clone(),
            config: config_json,
            epoch: 0,
            dev_accuracy: None,
        },
    };
    Ok(TrainOutcome { best, history })
}
