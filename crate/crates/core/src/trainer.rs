use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{backward, GradMode, Tape};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{BnMode, Model, ParamKind, BN_MOMENTUM};
use crate::seeds::derive_seed;
use crate::tensor::{l2_norm, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs (0-based) at whose start the learning rate is multiplied by `decay_factor`.
    /// Empty means 50% and 75% of `epochs`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            lr: 0.05,
            decay_epochs: Vec::new(),
            decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("lr and weight decay must be ≥ 0 and momentum in [0, 1)"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::invalid("decay factor must lie in (0, 1] so the schedule is non-increasing"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let milestones = if self.decay_epochs.is_empty() {
            vec![self.epochs / 2, self.epochs * 3 / 4]
        } else {
            self.decay_epochs.clone()
        };
        let drops = milestones.iter().filter(|&&m| m > 0 && epoch >= m).count();
        self.lr * self.decay_factor.powi(drops as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

pub fn write_history_csv(history: &[EpochMetrics], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,train_loss,val_loss,val_acc")?;
    for m in history {
        writeln!(f, "{},{},{},{}", m.epoch, m.train_loss, m.val_loss, m.val_acc)?;
    }
    f.flush()?;
    Ok(())
}

/// Eval-mode mean cross-entropy and accuracy.
pub fn evaluate(model: &Model, dataset: &Dataset, batch: usize) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation dataset".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in dataset.samples.chunks(batch.max(1)) {
        let tape = Tape::new();
        let vars = model.bind_constants(&tape)?;
        let x = tape.constant(Tensor::stack(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?)?;
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        let logits = model.forward(&vars, x, BnMode::Eval)?.logits;
        loss += logits.softmax_cross_entropy(&labels)?.item()? * chunk.len() as f64;
        let k = model.num_classes();
        let lv = logits.value();
        for (row, &y) in lv.data().chunks(k).zip(&labels) {
            correct += (crate::nn::argmax(row) == y) as usize;
        }
    }
    Ok((loss / dataset.len() as f64, correct as f64 / dataset.len() as f64))
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochMetrics>,
}

/// Minibatch SGD with momentum and a step schedule. BN layers use batch statistics and
/// update their running averages with the (biased) batch variance. Parameters are rounded to checkpoint precision at the end.
pub fn train(model: &Model, train_set: &Dataset, val_set: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let mut model = model.clone();
    let trainable: Vec<usize> =
        model.params().iter().enumerate().filter(|(_, p)| p.kind.trainable()).map(|(i, _)| i).collect();
    let mut velocity: Vec<Vec<f64>> = trainable.iter().map(|&i| vec![0.0; model.params()[i].value.numel()]).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch as u64)));
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            // batchnorm needs more than one value per channel
            if batch.len() < 2 && train_set.len() >= 2 {
                continue;
            }
            let tape = Tape::new();
            let vars = model.bind(&tape, |_, p| p.kind.trainable())?;
            let images: Vec<&Tensor> = batch.iter().map(|&i| &train_set.samples[i].image).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train_set.samples[i].label).collect();
            let x = tape.constant(Tensor::stack(&images)?)?;
            let out = model.forward(&vars, x, BnMode::Train)?;
            let loss = out.logits.softmax_cross_entropy(&labels)?;
            let loss_value = loss.item()?;
            if !loss_value.is_finite() {
                return Err(Error::NonFinite { op: "training loss" });
            }
            loss_sum += loss_value * batch.len() as f64;
            let wrt: Vec<_> = trainable.iter().map(|&i| vars[i]).collect();
            let grads = backward(loss, &wrt, GradMode::First)?;
            for (mean_idx, var_idx, mean, var) in out.bn_batch_stats {
                let rm = model.param_mut(mean_idx);
                for (r, m) in rm.data_mut().iter_mut().zip(mean.data()) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
                let rv = model.param_mut(var_idx);
                for (r, v) in rv.data_mut().iter_mut().zip(var.data()) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
            }
            for (slot, &pi) in trainable.iter().enumerate() {
                let decay = match model.params()[pi].kind {
                    ParamKind::ConvWeight | ParamKind::DenseWeight => config.weight_decay,
                    _ => 0.0,
                };
                let g = grads.grads[slot].value();
                let vel = &mut velocity[slot];
                let p = model.param_mut(pi);
                for ((w, v), &gi) in p.data_mut().iter_mut().zip(vel.iter_mut()).zip(g.data()) {
                    *v = config.momentum * *v + gi + decay * *w;
                    *w -= lr * *v;
                }
            }
        }
        let (val_loss, val_acc) = evaluate(&model, val_set, 256)?;
        let m = EpochMetrics { epoch, train_loss: loss_sum / train_set.len() as f64, val_loss, val_acc };
        log::info!("epoch {} lr {lr:.4} train_loss {:.4} val_loss {:.4} val_acc {:.4}", epoch, m.train_loss, val_loss, val_acc);
        history.push(m);
    }
    model.round_to_storage();
    Ok(TrainOutcome { model, history })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    MostSalient,
    Random,
    LeastSalient,
}

impl SelectionMode {
    pub const ALL: [SelectionMode; 3] = [SelectionMode::MostSalient, SelectionMode::Random, SelectionMode::LeastSalient];

    pub fn as_str(self) -> &'static str {
        match self {
            SelectionMode::MostSalient => "most_salient",
            SelectionMode::Random => "random",
            SelectionMode::LeastSalient => "least_salient",
        }
    }
}

/// Default limit on the number of tunable filters, as a fraction of all filters.
pub const FINETUNE_FILTER_CAP: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneStep {
    pub filter_ids: Vec<usize>,
    pub step_size: f64,
    pub mode: SelectionMode,
    /// Permits more than [`FINETUNE_FILTER_CAP`] of the filters to be tuned.
    #[serde(default)]
    pub allow_over_cap: bool,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: Model,
    pub corrected: bool,
    /// The restricted gradient was zero and no update was applied.
    pub zero_gradient: bool,
    pub loss_before: f64,
    pub loss_after: f64,
}

fn sample_loss(model: &Model, image: &Tensor, label: usize) -> Result<(f64, usize)> {
    let tape = Tape::new();
    let vars = model.bind_constants(&tape)?;
    let x = tape.constant(Tensor::stack(&[image])?)?;
    let logits = model.forward(&vars, x, BnMode::Eval)?.logits;
    let pred = crate::nn::argmax(logits.value().data());
    Ok((logits.softmax_cross_entropy(&[label])?.item()?, pred))
}

/// Gradient of the eval-mode cross-entropy of one sample w.r.t. the parameters selected by `pick`.
fn param_grads(model: &Model, image: &Tensor, label: usize, pick: impl Fn(usize) -> bool) -> Result<Vec<(usize, Tensor)>> {
    let tape = Tape::new();
    let vars = model.bind(&tape, |i, _| pick(i))?;
    let x = tape.constant(Tensor::stack(&[image])?)?;
    let loss = model.forward(&vars, x, BnMode::Eval)?.logits.softmax_cross_entropy(&[label])?;
    let idx: Vec<usize> = (0..vars.len()).filter(|&i| pick(i)).collect();
    let wrt: Vec<_> = idx.iter().map(|&i| vars[i]).collect();
    let grads = backward(loss, &wrt, GradMode::First)?;
    Ok(idx.into_iter().zip(grads.grads.iter().map(|g| (*g.value()).clone())).collect())
}

/// One normalized gradient-descent step on the kernel weights of `step.filter_ids`, with
/// every other parameter (and all batchnorm statistics) frozen. The update has L2 norm
/// exactly `step.step_size` unless the restricted gradient is zero.
pub fn targeted_finetune(model: &Model, image: &Tensor, label: usize, step: &FinetuneStep) -> Result<FinetuneOutcome> {
    let reg = model.registry();
    let cap = (FINETUNE_FILTER_CAP * reg.filter_count() as f64).floor().max(1.0) as usize;
    if step.filter_ids.len() > cap && !step.allow_over_cap {
        return Err(Error::invalid(format!(
            "{} filters exceed the fine-tuning cap of {cap}; set allow_over_cap to override",
            step.filter_ids.len()
        )));
    }
    if let Some(&k) = step.filter_ids.iter().find(|&&k| k >= reg.filter_count()) {
        return Err(Error::invalid(format!("filter id {k} out of range")));
    }
    if !(step.step_size >= 0.0) {
        return Err(Error::invalid("step size must be non-negative"));
    }
    let (loss_before, pred_before) = sample_loss(model, image, label)?;
    let kernel_params: Vec<usize> = reg.layers().iter().map(|l| l.param).collect();
    let grads = param_grads(model, image, label, |i| kernel_params.contains(&i))?;
    let grad_of = |param: usize| &grads.iter().find(|(i, _)| *i == param).expect("kernel grad").1;
    let mut picked: Vec<(usize, std::ops::Range<usize>)> = Vec::new();
    let mut sq = 0.0;
    for &k in &step.filter_ids {
        let f = &reg.filters()[k];
        let layer = &reg.layers()[f.layer_id];
        let per = layer.weights_per_filter();
        let range = f.channel * per..(f.channel + 1) * per;
        sq += grad_of(layer.param).data()[range.clone()].iter().map(|g| g * g).sum::<f64>();
        picked.push((layer.param, range));
    }
    let norm = sq.sqrt();
    let mut out = model.clone();
    if norm == 0.0 || step.step_size == 0.0 {
        return Ok(FinetuneOutcome {
            model: out,
            corrected: pred_before == label,
            zero_gradient: norm == 0.0,
            loss_before,
            loss_after: loss_before,
        });
    }
    let scale = step.step_size / norm;
    picked.sort_by_key(|(p, r)| (*p, r.start));
    picked.dedup();
    for (param, range) in picked {
        let g = grad_of(param).data()[range.clone()].to_vec();
        let w = out.param_mut(param);
        for (wi, gi) in w.data_mut()[range].iter_mut().zip(g) {
            *wi -= scale * gi;
        }
    }
    let (loss_after, pred_after) = sample_loss(&out, image, label)?;
    Ok(FinetuneOutcome { model: out, corrected: pred_after == label, zero_gradient: false, loss_before, loss_after })
}

/// The same normalized step with every trainable parameter tunable.
pub fn full_network_finetune(model: &Model, image: &Tensor, label: usize, step_size: f64) -> Result<FinetuneOutcome> {
    let (loss_before, pred_before) = sample_loss(model, image, label)?;
    let trainable: Vec<bool> = model.params().iter().map(|p| p.kind.trainable()).collect();
    let grads = param_grads(model, image, label, |i| trainable[i])?;
    let norm = grads.iter().map(|(_, g)| l2_norm(g.data()).powi(2)).sum::<f64>().sqrt();
    let mut out = model.clone();
    if norm == 0.0 || step_size == 0.0 {
        return Ok(FinetuneOutcome {
            model: out,
            corrected: pred_before == label,
            zero_gradient: norm == 0.0,
            loss_before,
            loss_after: loss_before,
        });
    }
    for (i, g) in &grads {
        let w = out.param_mut(*i);
        for (wi, gi) in w.data_mut().iter_mut().zip(g.data()) {
            *wi -= step_size / norm * gi;
        }
    }
    let (loss_after, pred_after) = sample_loss(&out, image, label)?;
    Ok(FinetuneOutcome { model: out, corrected: pred_after == label, zero_gradient: false, loss_before, loss_after })
}
