use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{compute_loss, loss_mask, LossKind};
use super::optim::{clip_gradients, Optimizer, OptimizerKind};
use crate::data::{build_vocab, corpus_instances, make_batch, batch_indices, ContextWindow, Instance, SenseCorpus, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, SenseInventory};
use crate::io;
use crate::model::{ArchitectureConfig, Checkpoint, DecodeMode, Dropout, Model, VocabSizes};
use crate::tensor::Graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub clip_norm: f64,
    /// Learning-rate multiplier for decoder-side parameters.
    pub decoder_lr_ratio: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub loss: LossKind,
    /// Surface forms rarer than this become `<unk>`.
    pub min_count: usize,
    pub window: ContextWindow,
    /// After selection, retrain from scratch on train + dev for the best
    /// number of epochs.
    pub refit: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 10,
            epochs: 50,
            dropout: 0.1,
            clip_norm: 50.0,
            decoder_lr_ratio: 5.0,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
            loss: LossKind::Sequence,
            min_count: 1,
            window: ContextWindow::default(),
            refit: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !(self.decoder_lr_ratio.is_finite() && self.decoder_lr_ratio >= 1.0) {
            return bad("decoder_lr_ratio must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub dev_f1: Option<f64>,
    pub weights: [Option<f64>; 3],
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Fusion weights before the first update.
    pub initial_weights: [Option<f64>; 3],
    pub epochs: Vec<EpochRecord>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainLog {
    /// `epoch,loss,dev_f1,w1,w2,w3,seconds`, one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,dev_f1,w1,w2,w3,seconds\n");
        for r in &self.epochs {
            let [w1, w2, w3] = r.weights.map(cell);
            let _ = writeln!(out, "{},{},{},{w1},{w2},{w3},{}", r.epoch, r.loss, cell(r.dev_f1), r.seconds);
        }
        out
    }

    /// `epoch,w1,w2,w3`, starting with the initial values at epoch 0.
    pub fn weights_csv(&self) -> String {
        let mut out = String::from("epoch,w1,w2,w3\n");
        let rows = std::iter::once((0, self.initial_weights)).chain(self.epochs.iter().map(|r| (r.epoch, r.weights)));
        for (e, w) in rows {
            let [w1, w2, w3] = w.map(cell);
            let _ = writeln!(out, "{e},{w1},{w2},{w3}");
        }
        out
    }

    /// The log with wall-clock times zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> TrainLog {
        let mut l = self.clone();
        l.epochs.iter_mut().for_each(|r| r.seconds = 0.0);
        l
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        io::write_atomic(&dir.join("train_log.csv"), self.to_csv().as_bytes())?;
        io::write_atomic(&dir.join("weights.csv"), self.weights_csv().as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Parameters of the selected epoch (or of the refit run).
    pub checkpoint: Checkpoint,
    pub inventory: SenseInventory,
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_dev_f1: Option<f64>,
}

impl TrainOutcome {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.checkpoint.save(dir)?;
        self.inventory.save(dir)
    }
}

/// Called after every epoch with the record just appended.
pub type EpochHook<'a> = &'a mut dyn FnMut(&EpochRecord);

/// Trains on the `train` split of `corpus`, selecting the epoch with the best
/// `dev` F1 (the last epoch when there is no dev split).
pub fn train(corpus: &SenseCorpus, arch: &ArchitectureConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_hook(corpus, arch, cfg, &mut |_| {})
}

pub fn train_with_hook(
    corpus: &SenseCorpus,
    arch: &ArchitectureConfig,
    cfg: &TrainConfig,
    hook: EpochHook<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    arch.validate()?;
    let train = SenseCorpus::subset(corpus.split(Split::Train));
    let dev = SenseCorpus::subset(corpus.split(Split::Dev));
    let dev = (!dev.is_empty()).then_some(&dev);
    let selected = fit(&train, dev, arch, cfg, cfg.epochs, hook)?;
    match dev {
        Some(dev) if cfg.refit => {
            let both = SenseCorpus::subset(train.sentences.iter().chain(&dev.sentences));
            let refit = fit(&both, None, arch, cfg, selected.best_epoch, &mut |_| {})?;
            Ok(TrainOutcome {
                checkpoint: refit.checkpoint,
                inventory: refit.inventory,
                ..selected
            })
        }
        _ => Ok(selected),
    }
}

fn fit(
    train: &SenseCorpus,
    dev: Option<&SenseCorpus>,
    arch: &ArchitectureConfig,
    cfg: &TrainConfig,
    epochs: usize,
    hook: EpochHook<'_>,
) -> Result<TrainOutcome> {
    let vocab = build_vocab(train, cfg.min_count);
    let inventory = SenseInventory::build(train, &vocab);
    let (model, mut params) = Model::new(arch, VocabSizes::of(&vocab), cfg.seed)?;
    let instances = corpus_instances(train, &vocab, cfg.window);
    if instances.is_empty() {
        return Err(Error::Usage("the training split has no sense-tagged tokens".into()));
    }
    let eval_opts = EvalOptions {
        window: cfg.window,
        batch_size: cfg.batch_size.max(16),
        ..Default::default()
    };
    let mut optimizer = Optimizer::new(cfg.optimizer, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut log = TrainLog {
        initial_weights: model.fusion_weights(&params),
        epochs: Vec::with_capacity(epochs),
    };
    let mut best = Checkpoint {
        model: model.clone(),
        params: params.clone(),
        vocab: vocab.clone(),
    };
    let (mut best_epoch, mut best_f1) = (0, None::<f64>);
    for epoch in 1..=epochs {
        let start = Instant::now();
        let shuffle = rng.next_u64();
        let mut dropout = Dropout::new(cfg.dropout, rng.next_u64());
        let (mut total, mut batches) = (0.0, 0);
        for group in batch_indices(instances.len(), cfg.batch_size, Some(shuffle)) {
            let refs: Vec<&Instance> = group.iter().map(|&i| &instances[i]).collect();
            let batch = make_batch(&refs)?;
            let mut g = Graph::new();
            let out = model.forward(&mut g, &params, &batch, DecodeMode::TeacherForced, &mut dropout, false)?;
            let mask = loss_mask(&batch, cfg.loss);
            let loss = compute_loss(&mut g, out.log_probs, &batch.target, &mask)?;
            let value = g.value(loss).item().expect("scalar loss");
            if !value.is_finite() {
                return Err(diverged(epoch, best, inventory, log, best_epoch, best_f1));
            }
            g.backward(loss)?;
            params.accumulate_grads(&g);
            if let Err(e) = clip_gradients(&mut params, cfg.clip_norm) {
                log::warn!("epoch {epoch}: {e}");
                return Err(diverged(epoch, best, inventory, log, best_epoch, best_f1));
            }
            optimizer.step(&mut params, cfg.learning_rate, cfg.decoder_lr_ratio);
            total += value;
            batches += 1;
        }
        let dev_f1 = match dev {
            Some(d) => Some(evaluate(&model, &params, &vocab, &inventory, d, &eval_opts, "train", "dev")?.overall().f1),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            loss: total / batches as f64,
            dev_f1,
            weights: model.fusion_weights(&params),
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: loss {:.5} dev_f1 {}", record.loss, cell(dev_f1));
        let improved = match (dev_f1, best_f1) {
            (Some(f), Some(b)) => f > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            best.params = params.clone();
            best_epoch = epoch;
            best_f1 = dev_f1;
        }
        hook(&record);
        log.epochs.push(record);
    }
    Ok(TrainOutcome {
        checkpoint: best,
        inventory,
        log,
        best_epoch,
        best_dev_f1: best_f1,
    })
}

fn diverged(
    epoch: usize,
    checkpoint: Checkpoint,
    inventory: SenseInventory,
    log: TrainLog,
    best_epoch: usize,
    best_dev_f1: Option<f64>,
) -> Error {
    Error::Diverged {
        epoch,
        last_good: Box::new(TrainOutcome {
            checkpoint,
            inventory,
            log,
            best_epoch,
            best_dev_f1,
        }),
    }
}
