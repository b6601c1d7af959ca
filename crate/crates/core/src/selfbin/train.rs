//! The epoch loop: set `nu_e`, refresh constrained weights, run one pass of
//! minibatch Adam, log metrics and take weight-histogram snapshots.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Model, Pass};
use crate::selfbin::adam::{adam_step, AdamConfig, AdamState};
use crate::selfbin::hist::{histogram_snapshot, HistogramPair, DEFAULT_BINS};
use crate::selfbin::schedule::NuSchedule;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub nu_start: f64,
    pub nu_end: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub augment: bool,
    pub hist_bins: usize,
    /// Epochs after which weight histograms are recorded; empty means first and last.
    pub hist_epochs: Vec<usize>,
    /// Epochs after which a full training snapshot is kept.
    pub checkpoint_epochs: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            nu_start: 1.0,
            nu_end: 1000.0,
            adam: AdamConfig::default(),
            seed: 0,
            augment: false,
            hist_bins: DEFAULT_BINS,
            hist_epochs: Vec::new(),
            checkpoint_epochs: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Result<NuSchedule> {
        NuSchedule::for_epochs(self.nu_start, self.nu_end, self.epochs)
    }

    fn wants_hist(&self, epoch: usize) -> bool {
        if self.hist_epochs.is_empty() {
            epoch == 0 || epoch + 1 == self.epochs
        } else {
            self.hist_epochs.contains(&epoch)
        }
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub nu: f64,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    /// `None` when there is no validation split.
    pub val_acc: Option<f64>,
}

/// Weight histograms of one layer after one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistRecord {
    /// Ordinal among the conv/dense layers.
    pub layer: usize,
    pub epoch: usize,
    pub hist: HistogramPair,
}

/// Everything needed to resume or export a model: latent `P`, BN state
/// and optimizer moments. Soft weights are re-derived from `P` on load.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound(
    serialize = "F: Scalar + Serialize",
    deserialize = "F: Scalar + serde::de::DeserializeOwned"
))]
pub struct Checkpoint<F = f32> {
    pub epoch: usize,
    pub nu: f64,
    pub model: Model<F>,
    pub adam: Vec<AdamState<F>>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<F = f32> {
    pub model: Model<F>,
    pub adam: Vec<AdamState<F>>,
    pub log: Vec<EpochMetrics>,
    pub histograms: Vec<HistRecord>,
    pub checkpoints: Vec<Checkpoint<F>>,
    pub final_nu: f64,
}

impl<F: Scalar> TrainOutcome<F> {
    pub fn checkpoint(&self) -> Checkpoint<F> {
        Checkpoint {
            epoch: self.log.last().map_or(0, |m| m.epoch),
            nu: self.final_nu,
            model: self.model.clone(),
            adam: self.adam.clone(),
        }
    }
}

const EVAL_BATCH: usize = 256;

/// Fraction of `data` classified correctly under `pass`.
pub fn evaluate<F: Scalar>(model: &Model<F>, data: &Dataset, pass: &Pass<F>) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let preds = predict_all(model, data, pass)?;
    let correct = preds
        .iter()
        .zip(&data.labels)
        .filter(|(p, &l)| **p == l as usize)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

pub fn predict_all<F: Scalar>(model: &Model<F>, data: &Dataset, pass: &Pass<F>) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    for batch in data.sequential(EVAL_BATCH) {
        let x = model.encoding.encode(&batch.raw, batch.shape)?;
        out.extend(model.predict(&x, pass)?);
    }
    Ok(out)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng.gen()
}

/// Trains `model` on `train_set`, validating on `val_set` after every epoch.
pub fn train<F: Scalar>(
    mut model: Model<F>,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<F>> {
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if train_set.shape != model.input_shape {
        return Err(Error::shape(format!(
            "dataset images {:?} do not match model input {:?}",
            train_set.shape, model.input_shape
        )));
    }
    let schedule = cfg.schedule()?;
    let mut adam: Vec<AdamState<F>> = model.params().into_iter().map(AdamState::for_param).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut histograms = Vec::new();
    let mut checkpoints = Vec::new();
    let mut nu_f = cfg.nu_start;

    for epoch in 0..cfg.epochs {
        nu_f = schedule.nu_at(epoch)?;
        let nu = F::of(nu_f);
        model.sync_weights(nu);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        let stream = train_set.stream(cfg.batch_size, epoch_seed(cfg.seed, epoch), cfg.augment);
        for (batch_idx, batch) in stream.enumerate() {
            // BatchNorm needs at least two samples per channel
            if batch.labels.len() < 2 {
                continue;
            }
            let x = model.encoding.encode(&batch.raw, batch.shape)?;
            let (loss, hits) = model.loss_and_grads(&x, &batch.labels, nu)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            model.for_each_param(|id, _, p, g| adam_step(&cfg.adam, &mut adam[id], p, g, epoch))?;
            model.sync_weights(nu);
            loss_sum += loss * batch.labels.len() as f64;
            correct += hits;
            seen += batch.labels.len();
        }

        let val_acc = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(&model, val_set, &Pass::eval(nu))?)
        };
        let seen_f = seen.max(1) as f64;
        log.push(EpochMetrics {
            epoch,
            nu: nu_f,
            lr: cfg.adam.lr_at(epoch),
            train_loss: loss_sum / seen_f,
            train_acc: correct as f64 / seen_f,
            val_acc,
        });
        if cfg.wants_hist(epoch) {
            for (layer, (_, cw)) in model.weight_layers().enumerate() {
                histograms.push(HistRecord {
                    layer,
                    epoch,
                    hist: histogram_snapshot(cw, cfg.hist_bins, nu),
                });
            }
        }
        if cfg.checkpoint_epochs.contains(&epoch) {
            checkpoints.push(Checkpoint {
                epoch,
                nu: nu_f,
                model: model.clone(),
                adam: adam.clone(),
            });
        }
    }

    Ok(TrainOutcome {
        model,
        adam,
        log,
        histograms,
        checkpoints,
        final_nu: nu_f,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_blobs, BlobsSpec};
    use crate::graph::{expand_arch, parse_arch, InputEncoding};
    use crate::selfbin::weights::BinarizeMode;

    fn toy(mode: BinarizeMode, epochs: usize, seed: u64) -> (TrainOutcome, Dataset) {
        let data = synthetic_blobs(&BlobsSpec {
            n: 400,
            ..BlobsSpec::default()
        })
        .unwrap();
        let (tr, va) = data.split(0.25);
        let specs = expand_arch(&parse_arch("dense:16, dense:2").unwrap(), mode).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::build(&specs, tr.shape, mode, InputEncoding::Int8, &mut rng).unwrap();
        let cfg = TrainConfig {
            epochs,
            batch_size: 32,
            seed,
            ..TrainConfig::default()
        };
        (train(model, &tr, &va, &cfg).unwrap(), va)
    }

    #[test]
    fn schedule_endpoints_in_log() {
        let (out, _) = toy(BinarizeMode::Soft, 4, 1);
        assert_eq!(out.log[0].nu, 1.0);
        assert_eq!(out.log.last().unwrap().nu, 1000.0);
        assert_eq!(out.log[0].lr, 1e-3);
        assert_eq!(out.histograms.len(), 2 * 2);
    }

    #[test]
    fn same_seed_same_log() {
        let (a, _) = toy(BinarizeMode::Soft, 3, 9);
        let (b, _) = toy(BinarizeMode::Soft, 3, 9);
        assert_eq!(a.log, b.log);
        assert_eq!(a.model.params(), b.model.params());
    }

    #[test]
    fn hard_mode_keeps_latent_clipped() {
        let (out, _) = toy(BinarizeMode::HardSte, 3, 2);
        for (_, cw) in out.model.weight_layers() {
            assert!(cw.p.data().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn empty_training_set_rejected() {
        let data = synthetic_blobs(&BlobsSpec::default()).unwrap();
        let empty = data.subset(&[]);
        let specs = expand_arch(&parse_arch("dense:2").unwrap(), BinarizeMode::Soft).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model: Model = Model::build(&specs, data.shape, BinarizeMode::Soft, InputEncoding::Int8, &mut rng).unwrap();
        assert!(train(model, &empty, &empty, &TrainConfig::default()).is_err());
    }
}
