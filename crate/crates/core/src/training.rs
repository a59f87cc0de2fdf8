//! Optimisation and evaluation.
//!
//! Batch gradients are computed in two passes. First every sample is run
//! forward on its own tape. The batch loss then couples the samples only
//! through their logits and head weights, so its gradient with respect to
//! those values is computed analytically and fed back into each tape as
//! the seed of an independent backward sweep. Per-sample gradients are
//! summed in sample order, which keeps results identical between the
//! sequential and parallel executors.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data_synth::{derive_seed, perturb_for_eval, Dataset, PerturbOptions, PerturbationKind};
use crate::error::{Error, Result};
use crate::losses::{bce, bce_logit_grads, diversity_grads, diversity_loss};
use crate::metrics::{accuracy, average_precision, MetricsReport, THRESHOLD};
use crate::model::{Architecture, Model, ModelConfig, PreparedSample};
use crate::numerics::{grad_check_sampled, sigmoid, GradCheckReport, ParamStore, Stencil, Tape, Tensor};
use crate::par::Execution;

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape("optimizer", &[grads.len()], &[store.len()]));
        }
        for (p, g) in store.iter().zip(grads) {
            if g.shape() != p.value.shape() {
                return Err(Error::shape("optimizer", g.shape(), p.value.shape()));
            }
            if !g.is_finite() {
                return Err(Error::Training(format!("non-finite gradient for {}", p.name())));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let decay = 1.0 - self.lr * self.weight_decay;
        for (((p, g), m), v) in store.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let gi = g.data()[i];
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                values[i] = values[i] * decay - self.lr * update;
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without an improvement larger than `min_delta`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub best: Option<f64>,
    pub stale: usize,
    pub lr: f64,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_delta: f64) -> Self {
        Self {
            factor,
            patience,
            min_delta,
            best: None,
            stale: 0,
            lr,
        }
    }

    pub fn step(&mut self, metric: f64) -> f64 {
        match self.best {
            Some(best) if metric <= best + self.min_delta => {
                self.stale += 1;
                if self.stale >= self.patience {
                    self.lr *= self.factor;
                    self.stale = 0;
                }
            }
            _ => {
                self.best = Some(metric);
                self.stale = 0;
            }
        }
        self.lr
    }
}

/// Which terms of the objective are optimised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossTerms {
    /// `ce + η·div`.
    Combined,
    CeOnly,
    DivOnly,
}

impl LossTerms {
    fn weights(self, eta: f64) -> (f64, f64) {
        match self {
            LossTerms::Combined => (1.0, eta),
            LossTerms::CeOnly => (1.0, 0.0),
            LossTerms::DivOnly => (0.0, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Early stopping after this many epochs without a new best.
    pub patience: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_delta: f64,
    pub seed: u64,
    pub loss: LossTerms,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 1e-4,
            weight_decay: 0.05,
            patience: 10,
            plateau_patience: 3,
            plateau_factor: 0.5,
            min_delta: 1e-4,
            seed: 0,
            loss: LossTerms::Combined,
        }
    }
}

impl TrainConfig {
    /// 30 epochs at batch 16 and lr 1e-3.
    pub fn toy() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.weight_decay >= 0.0 && self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::Config("invalid optimiser settings".into()));
        }
        Ok(())
    }
}

/// Model and training settings in one JSON object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            train: TrainConfig::toy(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchResult {
    pub loss: f64,
    pub ce: f64,
    pub div: f64,
    pub logits: Vec<f64>,
    /// `weights[l][i]`, empty without the controller.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub grads: Vec<Tensor>,
}

struct Forward<'p> {
    tape: Tape<'p>,
    logit: crate::numerics::NodeId,
    weights: Vec<crate::numerics::NodeId>,
}

fn forward_all<'p>(
    arch: &Architecture,
    store: &'p ParamStore,
    samples: &[&PreparedSample],
    exec: Execution,
) -> Result<Vec<Forward<'p>>> {
    exec.map(samples, |s| {
        let mut tape = Tape::new(store);
        let trace = arch.forward_tape(&mut tape, s)?;
        let weights = trace.layers.iter().filter_map(|l| l.weights).collect();
        Ok(Forward {
            tape,
            logit: trace.logit,
            weights,
        })
    })
    .into_iter()
    .collect()
}

fn objective(fwd: &[Forward<'_>], labels: &[bool], terms: LossTerms, eta: f64) -> Result<(f64, f64, f64, Vec<f64>, Vec<Vec<Vec<f64>>>)> {
    let logits: Vec<f64> = fwd.iter().map(|f| f.tape.value(f.logit).item()).collect();
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let layers = fwd.first().map_or(0, |f| f.weights.len());
    let weights: Vec<Vec<Vec<f64>>> = (0..layers)
        .map(|l| fwd.iter().map(|f| f.tape.value(f.weights[l]).data().to_vec()).collect())
        .collect();
    let ce = bce(&probs, labels)?;
    let div = diversity_loss(&weights)?;
    let (wc, wd) = terms.weights(eta);
    Ok((wc * ce + wd * div, ce, div, logits, weights))
}

/// Batch objective value only.
pub fn batch_loss(
    arch: &Architecture,
    store: &ParamStore,
    samples: &[&PreparedSample],
    labels: &[bool],
    terms: LossTerms,
    exec: Execution,
) -> Result<f64> {
    let fwd = forward_all(arch, store, samples, exec)?;
    Ok(objective(&fwd, labels, terms, arch.config.eta)?.0)
}

/// Batch objective and its gradient for every parameter.
pub fn batch_gradients(
    arch: &Architecture,
    store: &ParamStore,
    samples: &[&PreparedSample],
    labels: &[bool],
    terms: LossTerms,
    exec: Execution,
) -> Result<BatchResult> {
    let fwd = forward_all(arch, store, samples, exec)?;
    let (loss, ce, div, logits, weights) = objective(&fwd, labels, terms, arch.config.eta)?;
    let (wc, wd) = terms.weights(arch.config.eta);
    let d_logit = bce_logit_grads(&logits, labels)?;
    let d_weights = diversity_grads(&weights)?;
    let indexed: Vec<(usize, &Forward<'_>)> = fwd.iter().enumerate().collect();
    let per_sample: Vec<Result<Vec<Tensor>>> = exec.map(&indexed, |&(i, f)| {
        let mut seeds = vec![(f.logit, Tensor::scalar(wc * d_logit[i]))];
        for (l, &node) in f.weights.iter().enumerate() {
            let g: Vec<f64> = d_weights[l][i].iter().map(|v| wd * v).collect();
            seeds.push((node, Tensor::row(g)));
        }
        Ok(f.tape.backward(&seeds)?.into_dense(store))
    });
    let mut grads: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    for g in per_sample {
        for (acc, gi) in grads.iter_mut().zip(g?) {
            acc.add_assign(&gi);
        }
    }
    Ok(BatchResult {
        loss,
        ce,
        div,
        logits,
        weights,
        grads,
    })
}

/// Finite-difference check of [`batch_gradients`] for the combined objective.
pub fn check_model_gradients(
    model: &Model,
    samples: &[PreparedSample],
    labels: &[bool],
    eps: f64,
    sample: Option<(usize, u64)>,
    stencil: Stencil,
) -> Result<GradCheckReport> {
    let refs: Vec<&PreparedSample> = samples.iter().collect();
    let seq = Execution::Sequential;
    let r = batch_gradients(&model.arch, &model.store, &refs, labels, LossTerms::Combined, seq)?;
    grad_check_sampled(&model.store, &r.grads, eps, sample, stencil, |s| {
        batch_loss(&model.arch, s, &refs, labels, LossTerms::Combined, seq)
    })
}

/// Probabilities for prepared samples.
pub fn predict(model: &Model, samples: &[PreparedSample], exec: Execution) -> Result<Vec<f64>> {
    exec.map(samples, |s| Ok(sigmoid(model.forward_prepared(s)?.logit))).into_iter().collect()
}

/// Mean pairwise cosine of per-sample head weights over the given samples.
pub fn mean_weight_cosine(model: &Model, samples: &[PreparedSample], exec: Execution) -> Result<f64> {
    let outs: Vec<_> = exec.map(samples, |s| model.forward_prepared(s)).into_iter().collect::<Result<_>>()?;
    let layers = model.config().layers;
    let weights: Vec<Vec<Vec<f64>>> = (0..layers)
        .map(|l| outs.iter().map(|o| o.layers[l].weights.clone()).collect())
        .collect();
    diversity_loss(&weights)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub ce: f64,
    pub div: f64,
    pub val_acc: f64,
    pub val_ap: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Model,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub history: Vec<EpochRecord>,
}

/// Labelled, prepared samples.
#[derive(Clone, Debug, Default)]
pub struct Split {
    pub samples: Vec<PreparedSample>,
    pub labels: Vec<bool>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn prepare_dataset(arch: &Architecture, dataset: &Dataset, exec: Execution) -> Result<Split> {
    let samples = exec
        .map_range(dataset.len(), |i| {
            let (image, lm) = dataset.read(i)?;
            arch.prepare(&image, &lm)
        })
        .into_iter()
        .collect::<Result<_>>()?;
    Ok(Split {
        samples,
        labels: dataset.labels(),
    })
}

fn val_metrics(model: &Model, val: &Split, exec: Execution) -> Result<(f64, f64)> {
    let probs = predict(model, &val.samples, exec)?;
    let acc = accuracy(&probs, &val.labels, THRESHOLD)?;
    let ap = average_precision(&probs, &val.labels).unwrap_or(0.0);
    Ok((acc, ap))
}

/// Runs the optimisation loop. `on_epoch` sees every record as it is made;
/// `on_best` sees each new best model.
pub fn train(
    mut model: Model,
    train_set: &Split,
    val_set: &Split,
    cfg: &TrainConfig,
    exec: Execution,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
    mut on_best: impl FnMut(&Model) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Training("empty training or validation split".into()));
    }
    let mut opt = AdamW::new(&model.store, cfg.lr, cfg.weight_decay);
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.min_delta);
    let mut history = Vec::new();
    let mut best: Option<(Model, usize, f64)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let (mut loss_sum, mut ce_sum, mut div_sum) = (0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&PreparedSample> = chunk.iter().map(|&i| &train_set.samples[i]).collect();
            let labels: Vec<bool> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let r = batch_gradients(&model.arch, &model.store, &samples, &labels, cfg.loss, exec).map_err(|e| match e {
                Error::NonFinite(op) => Error::Training(format!("non-finite value in {op} at epoch {epoch}, batch {b}")),
                other => other,
            })?;
            if !r.loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss at epoch {epoch}, batch {b}")));
            }
            opt.step(&mut model.store, &r.grads)
                .map_err(|e| Error::Training(format!("epoch {epoch}, batch {b}: {e}")))?;
            let w = chunk.len() as f64;
            loss_sum += r.loss * w;
            ce_sum += r.ce * w;
            div_sum += r.div * w;
        }
        let n = train_set.len() as f64;
        let (val_acc, val_ap) = val_metrics(&model, val_set, exec)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            ce: ce_sum / n,
            div: div_sum / n,
            val_acc,
            val_ap,
            lr: opt.lr,
        };
        on_epoch(&record)?;
        history.push(record);
        opt.lr = sched.step(val_acc);

        if best.as_ref().is_none_or(|(_, _, acc)| val_acc > *acc) {
            on_best(&model)?;
            best = Some((model.clone(), epoch, val_acc));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (best, best_epoch, best_val_acc) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_acc,
        history,
    })
}

/// Trains from manifests, writing `model.ckpt` (best) and `history.jsonl`.
pub fn train_to_dir(cfg: &RunConfig, train_manifest: &Path, val_manifest: &Path, out_dir: &Path, exec: Execution) -> Result<TrainOutcome> {
    let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let train_set = prepare_dataset(&model.arch, &Dataset::load(train_manifest)?, exec)?;
    let val_set = prepare_dataset(&model.arch, &Dataset::load(val_manifest)?, exec)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let hist_path = out_dir.join("history.jsonl");
    let ckpt_path = out_dir.join("model.ckpt");
    let mut hist = fs::File::create(&hist_path).map_err(|e| Error::io(format!("creating {}", hist_path.display()), e))?;
    train(
        model,
        &train_set,
        &val_set,
        &cfg.train,
        exec,
        |r| {
            let line = serde_json::to_string(r)?;
            writeln!(hist, "{line}").map_err(|e| Error::io(format!("writing {}", hist_path.display()), e))
        },
        |m| save_checkpoint(m, &ckpt_path),
    )
}

/// Metrics for `model` on `samples` after the named perturbation has been
/// applied to each image with probability 0.5.
pub fn evaluate_model(
    model: &Model,
    dataset: &Dataset,
    kind: PerturbationKind,
    seed: u64,
    opts: PerturbOptions,
    exec: Execution,
) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::Metric("empty evaluation set".into()));
    }
    let probs: Vec<f64> = exec
        .map_range(dataset.len(), |i| {
            let (mut image, lm) = dataset.read(i)?;
            model.arch.check_image(&image)?;
            if let Some(p) = perturb_for_eval(&image, kind, seed, i, opts) {
                image = p;
            }
            Ok(sigmoid(model.forward(&image, &lm)?.logit))
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let labels = dataset.labels();
    Ok(MetricsReport {
        acc: accuracy(&probs, &labels, THRESHOLD)?,
        ap: average_precision(&probs, &labels)?,
        n: probs.len(),
        threshold: THRESHOLD,
        perturbation: kind.name().to_string(),
        seed,
    })
}

pub fn evaluate(checkpoint: &Path, manifest: &Path, kind: PerturbationKind, seed: u64, opts: PerturbOptions, exec: Execution) -> Result<MetricsReport> {
    let model = load_checkpoint(checkpoint)?;
    evaluate_model(&model, &Dataset::load(manifest)?, kind, seed, opts, exec)
}
