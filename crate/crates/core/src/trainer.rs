//! Teacher-forced training with validation-driven checkpoint selection.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Sample, Scene, Vocabulary};
use crate::decoder::DecodeConfig;
use crate::error::{Error, Result};
use crate::eval::{descriptiveness_report, EvalContext, EvalReport, RetrievalPool};
use crate::model::Parameters;
use crate::objectives::{mle_loss, pad_labels, FirstToken, Objective};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Optimizer {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::default()),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointMetric {
    #[default]
    ValRetrievalR1,
    ValLoss,
}

impl CheckpointMetric {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "val_retrieval_r1" | "val_r1" => Ok(Self::ValRetrievalR1),
            "val_loss" => Ok(Self::ValLoss),
            _ => Err(Error::Config(format!("unknown checkpoint metric {s:?}"))),
        }
    }
}

/// Stop once the best validation loss has not improved by `min_rel_improvement`
/// (relative) for `patience` consecutive epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub patience: usize,
    pub min_rel_improvement: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            patience: 3,
            min_rel_improvement: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub first_token: FirstToken,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub checkpoint_metric: CheckpointMetric,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub early_stop: Option<EarlyStop>,
    /// Decoder used for the per-epoch validation metrics.
    pub decode: DecodeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Mle,
            first_token: FirstToken::default(),
            epochs: 10,
            batch_size: 32,
            learning_rate: 3e-4,
            optimizer: Optimizer::default(),
            seed: 0,
            checkpoint_metric: CheckpointMetric::default(),
            grad_clip: Some(5.0),
            early_stop: None,
            decode: DecodeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if let Objective::Mixed { lambda } = self.objective {
            if !(0.0..=1.0).contains(&lambda) {
                return Err(Error::MixingWeight(lambda));
            }
        }
        Ok(())
    }
}

/// One row per completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub epoch: usize,
    pub objective: String,
    pub train_loss: f64,
    pub val_loss: f64,
    pub mean_caption_length: f64,
    pub lexical_diversity: usize,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub oracle_precision: f64,
    pub ppl_proxy: f64,
}

impl RunMetrics {
    pub fn from_report(epoch: usize, objective: &str, train_loss: f64, val_loss: f64, r: &EvalReport) -> Self {
        Self {
            epoch,
            objective: objective.to_string(),
            train_loss,
            val_loss,
            mean_caption_length: r.mean_caption_length,
            lexical_diversity: r.lexical_diversity,
            r_at_1: r.r_at_1,
            r_at_5: r.r_at_5,
            oracle_precision: r.oracle_precision,
            ppl_proxy: r.ppl_proxy,
        }
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[RunMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{other:?}")),
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<RunMetrics>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{other:?}")),
    })?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Training and validation partitions of a corpus.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub val_pool: RetrievalPool,
    pub eval: EvalContext,
}

impl Split {
    /// Holds out the last `val_fraction` of scenes (at least one).
    pub fn new(corpus: &Corpus, val_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&val_fraction) || corpus.scenes.len() < 2 {
            return Err(Error::Config(format!(
                "cannot hold out {val_fraction} of {} scenes",
                corpus.scenes.len()
            )));
        }
        let n = corpus.scenes.len();
        let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
        let val_scenes: &[Scene] = &corpus.scenes[n - n_val..];
        let first_val = val_scenes[0].scene_id;
        let (val, train): (Vec<Sample>, Vec<Sample>) =
            corpus.samples.iter().cloned().partition(|s| s.scene_id >= first_val);
        let eval = EvalContext::new(&corpus.inventory, &corpus.vocab, val.iter().map(|s| s.caption.as_slice()));
        Ok(Self {
            train,
            val,
            val_pool: RetrievalPool::from_scenes(val_scenes),
            eval,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.eval.vocab
    }
}

fn batch_inputs(batch: &[&Sample]) -> (Array2<f64>, Vec<Vec<u32>>, Vec<Vec<u32>>) {
    let n_features = batch[0].features.len();
    let mut features = Array2::zeros((batch.len(), n_features));
    for (b, s) in batch.iter().enumerate() {
        for (j, &bit) in s.features.iter().enumerate() {
            features[[b, j]] = bit as f64;
        }
    }
    let inputs = batch.iter().map(|s| s.caption[..s.caption.len() - 1].to_vec()).collect();
    let labels = batch.iter().map(|s| s.caption[1..].to_vec()).collect();
    (features, inputs, labels)
}

/// Mean full-vocabulary cross-entropy over all non-PAD validation positions.
pub fn validation_loss(params: &Parameters, samples: &[Sample], pad: u32, batch_size: usize) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    let refs: Vec<&Sample> = samples.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let (features, inputs, labels) = batch_inputs(chunk);
        let (logits, _) = params.forward(features.view(), &inputs)?;
        let out = mle_loss(logits.values.view(), pad_labels(&labels, pad).view(), pad)?;
        sum += out.report.total * out.report.n_tokens as f64;
        n += out.report.n_tokens;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Validation metrics for a parameter snapshot.
pub fn evaluate(params: &Parameters, split: &Split, decode: &DecodeConfig) -> Result<(f64, EvalReport)> {
    let val_loss = validation_loss(params, &split.val, split.vocab().pad(), 64)?;
    let report = descriptiveness_report(params, &split.val_pool, decode, &split.eval)?;
    Ok((val_loss, report))
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

fn apply_update(params: &mut Parameters, grad: &Parameters, cfg: &TrainConfig, adam: &mut AdamState) {
    let lr = cfg.learning_rate;
    let p = params.as_mut_slice();
    let g = grad.as_slice();
    match cfg.optimizer {
        Optimizer::Sgd => {
            for (w, d) in p.iter_mut().zip(g) {
                *w -= lr * d;
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            adam.t += 1;
            let c1 = 1.0 - beta1.powi(adam.t);
            let c2 = 1.0 - beta2.powi(adam.t);
            for i in 0..p.len() {
                adam.m[i] = beta1 * adam.m[i] + (1.0 - beta1) * g[i];
                adam.v[i] = beta2 * adam.v[i] + (1.0 - beta2) * g[i] * g[i];
                p[i] -= lr * (adam.m[i] / c1) / ((adam.v[i] / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Parameters,
    /// 1-based epoch of `best`.
    pub best_epoch: usize,
    pub last: Parameters,
    pub history: Vec<RunMetrics>,
}

fn better(metric: CheckpointMetric, candidate: &RunMetrics, incumbent: &RunMetrics) -> bool {
    match metric {
        CheckpointMetric::ValRetrievalR1 => candidate.r_at_1 > incumbent.r_at_1,
        CheckpointMetric::ValLoss => candidate.val_loss < incumbent.val_loss,
    }
}

/// Trains from `params`, evaluating on the validation split after every epoch.
/// Ties in the checkpoint metric keep the earliest epoch.
pub fn train(params: Parameters, split: &Split, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(params, split, config, |_| {})
}

/// Like [`train`], calling `on_epoch` after each completed epoch.
pub fn train_with(
    mut params: Parameters,
    split: &Split,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&RunMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    let vocab = split.vocab();
    if params.config().vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocabulary {} does not match corpus vocabulary {}",
            params.config().vocab_size,
            vocab.len()
        )));
    }
    let longest = split.train.iter().chain(&split.val).map(|s| s.caption.len()).max().unwrap_or(0);
    if longest > params.config().max_len {
        return Err(Error::LengthOverflow {
            len: longest,
            max_len: params.config().max_len,
        });
    }
    if split.train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState {
        m: vec![0.0; params.len()],
        v: vec![0.0; params.len()],
        t: 0,
    };
    let name = config.objective.name();
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut history: Vec<RunMetrics> = Vec::with_capacity(config.epochs);
    let mut best: Option<(Parameters, usize)> = None;
    let mut plateau = (f64::INFINITY, 0usize);

    for epoch in 1..=config.epochs {
        let last_good = params.clone();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut tokens) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &split.train[i]).collect();
            let (features, inputs, labels) = batch_inputs(&batch);
            let (logits, trace) = params.forward(features.view(), &inputs)?;
            let out = match config
                .objective
                .evaluate(logits.values.view(), &labels, vocab, config.first_token, &mut rng)
            {
                Ok(out) if out.report.total.is_finite() => out,
                Ok(_) | Err(Error::NonFiniteLogits { .. }) => {
                    return Err(Error::Diverged {
                        epoch,
                        last_good: Box::new(last_good),
                    })
                }
                Err(e) => return Err(e),
            };
            loss_sum += out.report.total * out.report.n_tokens as f64;
            tokens += out.report.n_tokens;
            let mut grad = params.backward(&trace, out.grad.view())?;
            let norm = grad.norm();
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    last_good: Box::new(last_good),
                });
            }
            if let Some(clip) = config.grad_clip {
                if norm > clip {
                    grad.scale(clip / norm);
                }
            }
            apply_update(&mut params, &grad, config, &mut adam);
            if !params.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    last_good: Box::new(last_good),
                });
            }
        }
        let (val_loss, report) = evaluate(&params, split, &config.decode)?;
        let row = RunMetrics::from_report(epoch, &name, loss_sum / tokens.max(1) as f64, val_loss, &report);
        on_epoch(&row);
        let improved = match &best {
            None => true,
            Some((_, e)) => better(config.checkpoint_metric, &row, &history[*e - 1]),
        };
        if improved {
            best = Some((params.clone(), epoch));
        }
        history.push(row);

        if let Some(stop) = config.early_stop {
            if val_loss < plateau.0 * (1.0 - stop.min_rel_improvement) {
                plateau = (val_loss, 0);
            } else {
                plateau.1 += 1;
                if plateau.1 >= stop.patience {
                    break;
                }
            }
        }
    }
    let (best, best_epoch) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: params,
        history,
    })
}

/// Stage one on its own: MLE with early stopping forced on.
pub fn two_stage_base(params: Parameters, split: &Split, base: &TrainConfig) -> Result<TrainOutcome> {
    two_stage_base_with(params, split, base, |_| {})
}

pub fn two_stage_base_with(
    params: Parameters,
    split: &Split,
    base: &TrainConfig,
    on_epoch: impl FnMut(&RunMetrics),
) -> Result<TrainOutcome> {
    if base.objective != Objective::Mle {
        return Err(Error::Config("stage one must train with mle".into()));
    }
    let mut base = base.clone();
    base.early_stop.get_or_insert_with(EarlyStop::default);
    train_with(params, split, &base, on_epoch)
}

#[derive(Clone, Debug)]
pub struct TwoStageOutcome {
    pub base: TrainOutcome,
    pub further: TrainOutcome,
}

/// MLE until the validation loss plateaus, then further training from the
/// stage-one checkpoint.
pub fn two_stage(
    params: Parameters,
    split: &Split,
    base: &TrainConfig,
    further: &TrainConfig,
) -> Result<TwoStageOutcome> {
    let stage_one = two_stage_base(params, split, base)?;
    let stage_two = train(stage_one.best.clone(), split, further)?;
    Ok(TwoStageOutcome {
        base: stage_one,
        further: stage_two,
    })
}
