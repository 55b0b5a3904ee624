//! Minibatch training with Adam, evaluation, and metric logging.
//!
//! A run is single-threaded and draws from two streams derived from its
//! seed: one shuffles the training rows each epoch, the other samples drop
//! masks. Batches walk the shuffled order without replacement and the last
//! short batch of an epoch is kept.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::autograd::backward;
use crate::data::{permutation, DatasetSplits, Split};
use crate::error::{KanError, Result};
use crate::loss::{loss_eval, predict, LossKind};
use crate::network::KanNetwork;
use crate::rng::{derived_rng, seeded_rng, KanRng};

const SHUFFLE_STREAM: u64 = 1;
const MASK_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub loss: LossKind,
    /// Validation metrics are logged every `eval_every` updates and after
    /// the last one.
    pub eval_every: usize,
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            learning_rate: 0.01,
            adam: AdamConfig::default(),
            seed: 0,
            loss: LossKind::default(),
            eval_every: 100,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(KanError::InvalidConfig("steps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(KanError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(KanError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.eval_every == 0 {
            return Err(KanError::InvalidConfig("eval_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricLog {
    pub records: Vec<MetricRecord>,
}

impl MetricLog {
    pub fn push(&mut self, record: MetricRecord) {
        debug_assert!(self.records.last().is_none_or(|r| r.step <= record.step));
        self.records.push(record);
    }

    pub fn last(&self, split: &str) -> Option<&MetricRecord> {
        self.records.iter().rev().find(|r| r.split == split)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }
}

/// Check that the network output width fits the loss and class count.
pub fn check_output_width(net: &KanNetwork, loss: LossKind, n_classes: usize) -> Result<()> {
    if loss == LossKind::BinaryLogistic && n_classes != 2 {
        return Err(KanError::InvalidConfig(format!(
            "binary_logistic needs 2 classes, dataset has {n_classes}"
        )));
    }
    let want = loss.output_width(n_classes);
    if net.n_outputs() != want {
        return Err(KanError::InvalidConfig(format!(
            "network has {} outputs, {} loss with {n_classes} classes needs {want}",
            net.n_outputs(),
            serde_json::to_string(&loss)?.trim_matches('"')
        )));
    }
    Ok(())
}

/// Accuracy and mean loss of an eval-mode forward pass over a split.
pub fn evaluate(net: &KanNetwork, split: &Split, loss: LossKind) -> Result<(f64, f64)> {
    if split.is_empty() {
        return Err(KanError::EmptySplit("cannot evaluate on zero rows".into()));
    }
    // eval mode draws no masks, so the stream is never touched
    let logits = net.forward(split.features.view(), false, &mut seeded_rng(0))?;
    let (mean_loss, _) = loss_eval(logits.view(), &split.labels, loss)?;
    let correct = predict(logits.view(), loss)
        .iter()
        .zip(&split.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok((correct as f64 / split.len() as f64, mean_loss))
}

/// Resumable training state: drive it one update at a time with `step`.
pub struct Trainer<'a> {
    net: KanNetwork,
    train: &'a Split,
    config: TrainConfig,
    adam: Adam,
    params: Vec<f64>,
    shuffle_rng: KanRng,
    mask_rng: KanRng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(net: KanNetwork, train: &'a Split, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(KanError::EmptySplit("training split has no rows".into()));
        }
        if train.n_features() != net.n_inputs() {
            return Err(KanError::DimensionMismatch(format!(
                "training data has {} features, network expects {}",
                train.n_features(),
                net.n_inputs()
            )));
        }
        let params = net.params();
        Ok(Self {
            adam: Adam::new(params.len(), config.learning_rate, config.adam),
            params,
            shuffle_rng: derived_rng(config.seed, &[SHUFFLE_STREAM]),
            mask_rng: derived_rng(config.seed, &[MASK_STREAM]),
            order: Vec::new(),
            cursor: 0,
            step: 0,
            net,
            train,
            config,
        })
    }

    /// Updates performed so far.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn network(&self) -> &KanNetwork {
        &self.net
    }

    pub fn into_network(self) -> KanNetwork {
        self.net
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.order = permutation(self.train.len(), &mut self.shuffle_rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.config.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }

    /// One minibatch update; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let rows = self.next_batch();
        let batch = self.train.select(&rows);
        let (logits, cache) = self.net.forward_cached(batch.features.view(), true, &mut self.mask_rng)?;
        let (loss, grad) = loss_eval(logits.view(), &batch.labels, self.config.loss)?;
        if !loss.is_finite() {
            return Err(KanError::NonFiniteLoss { step: self.step });
        }
        let grads = backward(&self.net, &cache, grad.view())?.flatten();
        self.adam
            .step(&mut self.params, &grads)
            .map_err(|index| KanError::NonFiniteGradient { step: self.step, index })?;
        self.net.set_params(&self.params)?;
        self.step += 1;
        Ok(loss)
    }
}

/// Train a copy of `net` for exactly `config.steps` updates.
pub fn train(net: &KanNetwork, data: &DatasetSplits, config: &TrainConfig) -> Result<(KanNetwork, MetricLog)> {
    check_output_width(net, config.loss, data.n_classes)?;
    let start = Instant::now();
    let mut trainer = Trainer::new(net.clone(), &data.train, config.clone())?;
    let mut log = MetricLog::default();
    let stamp = |log: &mut MetricLog, net: &KanNetwork, step: usize, split: &str, s: &Split| -> Result<()> {
        let (accuracy, loss) = evaluate(net, s, config.loss)?;
        log.push(MetricRecord {
            step,
            split: split.to_string(),
            loss,
            accuracy,
            wall_time: config.record_wall_time.then(|| start.elapsed().as_secs_f64()),
        });
        Ok(())
    };
    while trainer.steps_done() < config.steps {
        trainer.step()?;
        let step = trainer.steps_done();
        let last = step == config.steps;
        if (step % config.eval_every == 0 || last) && !data.valid.is_empty() {
            stamp(&mut log, trainer.network(), step, "valid", &data.valid)?;
        }
        if last && !data.test.is_empty() {
            stamp(&mut log, trainer.network(), step, "test", &data.test)?;
        }
    }
    Ok((trainer.into_network(), log))
}
