//! Joint SGD training of the localizer and classifier.
//!
//! Each batch loss is the mean of the per-image objectives. Items are run one
//! graph at a time and their gradients summed in a fixed order, so a run is
//! bitwise reproducible for a given seed.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::datagen::{derive_seed, TrainingSet};
use crate::error::{Error, Result};
use crate::models::{Checkpoint, ModelConfig, Networks, ParamSet, RngState};
use crate::objectives::{ObjectiveConfig, Variant};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint.json";

const SHUFFLE_STREAM: u64 = 0x5348_5546;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Weight of the background regularizer; zero turns it off.
    pub lambda: f64,
    pub t_init: f64,
    /// Multiplies t after every epoch.
    pub t_growth: f64,
    pub t_max: f64,
    pub variant: Variant,
    pub seed: u64,
    /// Write `checkpoint_epoch_NNNN.json` every this many epochs; 0 writes
    /// only the final checkpoint.
    pub checkpoint_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 16,
            lr: 0.01,
            momentum: 0.9,
            lambda: 1.0,
            t_init: 1.0,
            t_growth: 1.05,
            t_max: 10.0,
            variant: Variant::Sem,
            seed: 0,
            checkpoint_every: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.t_init > 0.0 && self.t_init.is_finite() && self.t_max.is_finite()) {
            return bad(format!("t_init must be > 0, got {}", self.t_init));
        }
        if self.t_init > self.t_max {
            return bad(format!("t_init {} exceeds t_max {}", self.t_init, self.t_max));
        }
        if !(self.t_growth >= 1.0 && self.t_growth.is_finite()) {
            return bad(format!("t_growth must be >= 1, got {}", self.t_growth));
        }
        self.model.validate()
    }

    pub fn objective(&self, t: f64, omega_size: usize) -> ObjectiveConfig {
        ObjectiveConfig {
            variant: self.variant,
            lambda: self.lambda,
            t,
            num_classes: self.model.num_classes,
            omega_size,
        }
    }

    /// Barrier parameter in effect during `epoch` (0-based).
    pub fn t_at(&self, epoch: usize) -> f64 {
        let mut t = self.t_init;
        for _ in 0..epoch {
            t = (t * self.t_growth).min(self.t_max);
        }
        t
    }
}

/// Epoch-level means over every training image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub loss: f64,
    pub cross_entropy: f64,
    pub regularizer: f64,
    pub barrier: f64,
    /// Mean soft foreground size as a fraction of the image.
    pub fg_fraction: f64,
    pub t: f64,
    pub lambda: f64,
    /// Percentage of training images whose foreground posterior picks the
    /// wrong class.
    pub train_error_pct: f64,
}

impl TrainLogRecord {
    /// Difference between the logged total and its weighted components.
    pub fn recombination_error(&self) -> f64 {
        (self.cross_entropy + self.lambda * self.regularizer + self.barrier - self.loss).abs()
    }
}

/// Classical momentum: `v = momentum * v + g; w -= lr * v`.
pub fn sgd_step(w: &mut Tensor, grad: &[f64], lr: f64, momentum: f64, velocity: &mut Tensor) -> Result<()> {
    if grad.len() != w.numel() || velocity.shape() != w.shape() {
        return Err(Error::ShapeMismatch {
            op: "sgd_step",
            lhs: w.shape().to_vec(),
            rhs: if velocity.shape() != w.shape() {
                velocity.shape().to_vec()
            } else {
                vec![grad.len()]
            },
        });
    }
    for ((wi, vi), gi) in w.data_mut().iter_mut().zip(velocity.data_mut()).zip(grad) {
        *vi = momentum * *vi + gi;
        *wi -= lr * *vi;
    }
    Ok(())
}

/// Visiting order of `n` items in `epoch`; depends only on `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ SHUFFLE_STREAM, epoch as u64));
    order.shuffle(&mut rng);
    order
}

fn zeros_like(params: &ParamSet) -> Vec<Tensor> {
    params.iter().map(|p| Tensor::zeros(p.value.shape())).collect()
}

/// Training state that can be stepped one epoch at a time.
pub struct Trainer<'a> {
    config: TrainConfig,
    data: &'a TrainingSet,
    networks: Networks,
    loc_velocity: Vec<Tensor>,
    cls_velocity: Vec<Tensor>,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    /// Seeds the weights from `config.seed`.
    pub fn new(data: &'a TrainingSet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let networks = Networks::init(&config.model, &mut rng)?;
        Self::with_networks(data, config, networks)
    }

    /// Starts from given weights, e.g. a deliberately bad initialization.
    pub fn with_networks(data: &'a TrainingSet, config: TrainConfig, networks: Networks) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        if networks.config != config.model {
            return Err(Error::Config("network shapes differ from the model config".into()));
        }
        if data.num_classes() != config.model.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model expects {}",
                data.num_classes(),
                config.model.num_classes
            )));
        }
        if let Some(item) = data.items().iter().find(|i| i.label >= config.model.num_classes) {
            return Err(Error::InvalidArgument(format!(
                "image {} has label {} out of range",
                item.id, item.label
            )));
        }
        let loc_velocity = zeros_like(networks.localizer.params());
        let cls_velocity = zeros_like(networks.classifier.params());
        Ok(Self {
            config,
            data,
            networks,
            loc_velocity,
            cls_velocity,
            epoch: 0,
        })
    }

    pub fn networks(&self) -> &Networks {
        &self.networks
    }

    pub fn networks_mut(&mut self) -> &mut Networks {
        &mut self.networks
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let omega = self.data.height() * self.data.width();
        Checkpoint::new(
            &self.networks,
            self.config.objective(self.config.t_at(self.epoch), omega),
            Some(self.config.clone()),
            self.epoch,
            RngState {
                seed: self.config.seed,
                next_epoch: self.epoch,
            },
        )
    }

    pub fn run_epoch(&mut self) -> Result<TrainLogRecord> {
        let t = self.config.t_at(self.epoch);
        let omega = self.data.height() * self.data.width();
        let objective = self.config.objective(t, omega);
        let items = self.data.items();
        let order = epoch_order(items.len(), self.config.seed, self.epoch);

        let (mut loss, mut ce, mut reg, mut barrier, mut fg, mut wrong) = (0.0, 0.0, 0.0, 0.0, 0.0, 0usize);
        for (batch, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let mut loc_grad: Vec<Vec<f64>> = self.loc_velocity.iter().map(|v| vec![0.0; v.numel()]).collect();
            let mut cls_grad: Vec<Vec<f64>> = self.cls_velocity.iter().map(|v| vec![0.0; v.numel()]).collect();
            for &i in chunk {
                let item = &items[i];
                // with finite weights and images the forward pass stays in every
                // op's domain, so a domain error here means something diverged
                let (mut g, bound, out) = match self.networks.forward(&item.image, Some(item.label), &objective) {
                    Err(Error::Domain { op, msg }) => {
                        return Err(Error::NonFiniteLoss {
                            epoch: self.epoch,
                            batch,
                            dump: format!("image {} (label {}): {op}: {msg}", item.id, item.label),
                        })
                    }
                    other => other?,
                };
                let terms = out.terms.expect("label supplied");
                let values = terms.values(&g);
                if !values.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch: self.epoch,
                        batch,
                        dump: format!(
                            "image {} (label {}): total={} cross_entropy={} regularizer={} barrier={} s_plus={} s_minus={}",
                            item.id,
                            item.label,
                            values.total,
                            values.cross_entropy,
                            values.regularizer,
                            values.barrier,
                            g.scalar(out.s_plus),
                            g.scalar(out.s_minus)
                        ),
                    });
                }
                g.backward(terms.total)?;
                for (acc, v) in loc_grad.iter_mut().zip(bound.localizer.vars()) {
                    acc.iter_mut().zip(g.grad(*v)).for_each(|(a, b)| *a += b);
                }
                for (acc, v) in cls_grad.iter_mut().zip(bound.classifier.vars()) {
                    acc.iter_mut().zip(g.grad(*v)).for_each(|(a, b)| *a += b);
                }
                loss += values.total;
                ce += values.cross_entropy;
                reg += values.regularizer;
                barrier += values.barrier;
                fg += g.scalar(out.s_plus) / omega as f64;
                if out.p_hat_fg.argmax(&g) != item.label {
                    wrong += 1;
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            let (lr, mu) = (self.config.lr, self.config.momentum);
            let loc = self.networks.localizer.params_mut().iter_mut();
            for ((p, grad), v) in loc.zip(&mut loc_grad).zip(&mut self.loc_velocity) {
                grad.iter_mut().for_each(|x| *x *= scale);
                sgd_step(&mut p.value, grad, lr, mu, v)?;
            }
            let cls = self.networks.classifier.params_mut().iter_mut();
            for ((p, grad), v) in cls.zip(&mut cls_grad).zip(&mut self.cls_velocity) {
                grad.iter_mut().for_each(|x| *x *= scale);
                sgd_step(&mut p.value, grad, lr, mu, v)?;
            }
        }

        let n = items.len() as f64;
        let record = TrainLogRecord {
            epoch: self.epoch,
            loss: loss / n,
            cross_entropy: ce / n,
            regularizer: reg / n,
            barrier: barrier / n,
            fg_fraction: fg / n,
            t,
            lambda: self.config.lambda,
            train_error_pct: 100.0 * wrong as f64 / n,
        };
        self.epoch += 1;
        Ok(record)
    }
}

/// Result of a complete run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<TrainLogRecord>,
    /// Final checkpoint path when an output directory was given.
    pub checkpoint_path: Option<PathBuf>,
}

/// Runs every epoch. With `out_dir`, appends one JSON line per epoch to
/// `train_log.jsonl`, writes periodic checkpoints and a final `checkpoint.json`.
pub fn train(data: &TrainingSet, config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let trainer = Trainer::new(data, config.clone())?;
    run(trainer, out_dir)
}

/// Like [`train`] but continues from an existing trainer state.
pub fn run(mut trainer: Trainer<'_>, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            Some((path, BufWriter::new(file)))
        }
        None => None,
    };
    let mut log = Vec::new();
    while trainer.epoch() < trainer.config().epochs {
        let record = trainer.run_epoch()?;
        if let Some((path, w)) = writer.as_mut() {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path.as_path(), e))?;
        }
        log.push(record);
        let every = trainer.config().checkpoint_every;
        if let Some(dir) = out_dir {
            if every > 0 && trainer.epoch() % every == 0 {
                let path = dir.join(format!("checkpoint_epoch_{:04}.json", trainer.epoch()));
                trainer.checkpoint().save(&path)?;
            }
        }
    }
    let checkpoint = trainer.checkpoint();
    let checkpoint_path = match out_dir {
        Some(dir) => {
            let path = dir.join(FINAL_CHECKPOINT);
            checkpoint.save(&path)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome {
        checkpoint,
        log,
        checkpoint_path,
    })
}
