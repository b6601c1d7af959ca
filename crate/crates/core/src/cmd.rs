//! The pipeline commands: train, export, infer, bench and hist. Every
//! artifact is written atomically (temp file in the same directory, then rename).

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{bench_csv, plot_data, run_bench, BenchConfig, BenchResult, BnVariant, ReferenceLine};
use crate::binrt::runtime::{encode_input, predictions_csv, run_frozen, Scores};
use crate::config::{EncodingKind, RunConfig};
use crate::data::{load_dataset, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::freeze::{deserialize, freeze_model, serialize, FrozenModel};
use crate::graph::{expand_arch, InputEncoding, Model, Pass};
use crate::selfbin::hist::{histogram_snapshot, HistogramPair};
use crate::selfbin::train::{evaluate, train, Checkpoint, EpochMetrics, HistRecord};
use crate::selfbin::weights::BinarizeMode;

/// Environment variable that overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "SBNN_OUT_DIR";

pub const METRICS_FILE: &str = "metrics.csv";
pub const HIST_FILE: &str = "hist.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// Writes `bytes` to a temporary sibling of `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("`{}` is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub const METRICS_HEADER: &str = "epoch,nu,lr,train_loss,train_acc,val_acc";

pub fn metrics_csv(log: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for m in log {
        let val = m.val_acc.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            m.epoch, m.nu, m.lr, m.train_loss, m.train_acc, val
        );
    }
    s
}

pub const HIST_HEADER: &str = "layer,epoch,bin_center,pre_density,post_density";

pub fn hist_csv(records: &[HistRecord]) -> String {
    let mut s = format!("{HIST_HEADER}\n");
    for r in records {
        let h: &HistogramPair = &r.hist;
        for i in 0..h.bin_centers.len() {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.layer, r.epoch, h.bin_centers[i], h.pre_density[i], h.post_density[i]
            );
        }
    }
    s
}

/// Final evaluation written next to the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_nu: f64,
    pub final_train_acc: f64,
    /// Validation accuracy with the training-time weights at the final `nu`.
    pub val_acc: Option<f64>,
    /// Validation accuracy of the frozen model run by the integer runtime.
    pub frozen_val_acc: Option<f64>,
    pub val_records: usize,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub summary: TrainSummary,
    pub checkpoint: Checkpoint,
    pub out_dir: PathBuf,
}

pub fn checkpoint_path(out_dir: &Path, epoch: Option<usize>) -> PathBuf {
    match epoch {
        None => out_dir.join(CHECKPOINT_FILE),
        Some(e) => out_dir.join(format!("checkpoint_epoch{e:04}.json")),
    }
}

fn encoding_for(kind: EncodingKind, train_set: &Dataset) -> InputEncoding {
    match kind {
        EncodingKind::Median => InputEncoding::Median(train_set.channel_medians()),
        EncodingKind::Int8 => InputEncoding::Int8,
    }
}

/// Fraction of `data` classified correctly by the frozen model.
pub fn frozen_accuracy(model: &FrozenModel, data: &Dataset) -> Result<(f64, Scores)> {
    let mut all = Scores {
        classes: model.num_classes(),
        data: Vec::with_capacity(data.len() * model.num_classes()),
    };
    for batch in data.sequential(256) {
        let input = encode_input(model, &batch.raw, batch.shape)?;
        all.data.extend(run_frozen(model, &input)?.data);
    }
    let correct = all
        .argmax()
        .iter()
        .zip(&data.labels)
        .filter(|(p, &l)| **p == l as usize)
        .count();
    Ok((correct as f64 / data.len().max(1) as f64, all))
}

pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    let data = load_dataset(&cfg.dataset)?;
    let (train_set, val_set) = data.split(cfg.val_fraction);
    let specs = expand_arch(&cfg.arch, cfg.mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model: Model = Model::build(
        &specs,
        data.shape,
        cfg.mode,
        encoding_for(cfg.input_encoding, &train_set),
        &mut rng,
    )?;
    if model.num_classes != data.num_classes {
        return Err(Error::Config(format!(
            "classifier has {} outputs but the dataset has {} classes",
            model.num_classes, data.num_classes
        )));
    }
    let outcome = train(model, &train_set, &val_set, &cfg.train_config())?;
    let final_nu = outcome.final_nu;

    let val_acc = if val_set.is_empty() {
        None
    } else {
        Some(evaluate(&outcome.model, &val_set, &Pass::eval(final_nu as f32))?)
    };
    let frozen_val_acc = if val_set.is_empty() || has_full_precision(&outcome.model) {
        None
    } else {
        let frozen = freeze_model(&outcome.model, cfg.use_alpha_fold, final_nu)?;
        Some(frozen_accuracy(&frozen, &val_set)?.0)
    };
    let summary = TrainSummary {
        epochs: cfg.epochs,
        final_nu,
        final_train_acc: outcome.log.last().map_or(0.0, |m| m.train_acc),
        val_acc,
        frozen_val_acc,
        val_records: val_set.len(),
    };

    write_atomic(&out_dir.join(METRICS_FILE), metrics_csv(&outcome.log).as_bytes())?;
    write_atomic(&out_dir.join(HIST_FILE), hist_csv(&outcome.histograms).as_bytes())?;
    for ck in &outcome.checkpoints {
        write_atomic(&checkpoint_path(out_dir, Some(ck.epoch)), &serde_json::to_vec(ck)?)?;
    }
    let checkpoint = outcome.checkpoint();
    write_atomic(&checkpoint_path(out_dir, None), &serde_json::to_vec(&checkpoint)?)?;
    write_atomic(&out_dir.join(SUMMARY_FILE), &serde_json::to_vec_pretty(&summary)?)?;
    write_atomic(&out_dir.join("config.conf"), cfg.serialize().as_bytes())?;
    Ok(TrainReport {
        summary,
        checkpoint,
        out_dir: out_dir.to_path_buf(),
    })
}

fn has_full_precision(model: &Model) -> bool {
    model.weight_layers().any(|(_, w)| w.full_precision)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let mut ck: Checkpoint = serde_json::from_slice(&bytes)?;
    ck.model.sync_weights(ck.nu as f32);
    Ok(ck)
}

pub fn cmd_export(checkpoint: &Path, out: &Path, use_alpha: bool) -> Result<FrozenModel> {
    let ck = load_checkpoint(checkpoint)?;
    let frozen = freeze_model(
        &ck.model,
        use_alpha || ck.model.mode == BinarizeMode::HardSteWithAlpha,
        ck.nu,
    )?;
    write_atomic(out, &serialize(&frozen)?)?;
    Ok(frozen)
}

pub fn load_frozen(path: &Path) -> Result<FrozenModel> {
    deserialize(&fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferReport {
    pub records: usize,
    pub accuracy: f64,
}

/// Runs the frozen model on `data` (optionally only its last `val_fraction`)
/// and writes the predictions CSV.
pub fn cmd_infer(model: &Path, data: &DatasetSpec, val_fraction: Option<f64>, out: &Path) -> Result<InferReport> {
    let frozen = load_frozen(model)?;
    let mut dataset = load_dataset(data)?;
    if let Some(f) = val_fraction {
        dataset = dataset.split(f).1;
    }
    let (accuracy, scores) = frozen_accuracy(&frozen, &dataset)?;
    write_atomic(out, predictions_csv(&scores).as_bytes())?;
    Ok(InferReport {
        records: dataset.len(),
        accuracy,
    })
}

pub fn cmd_bench(
    dims: [usize; 3],
    batches: &[usize],
    cfg: &BenchConfig,
    reference_lines: Vec<ReferenceLine>,
    out_dir: &Path,
) -> Result<Vec<BenchResult>> {
    if !crate::bench::variants_agree(dims, 1, cfg.seed) {
        return Err(Error::InvalidModel(
            "variants disagree on power-of-two parameters".into(),
        ));
    }
    let mut results = Vec::new();
    for v in BnVariant::ALL {
        results.extend(run_bench(v, dims, batches, cfg)?);
    }
    write_atomic(&out_dir.join("bench.csv"), bench_csv(&results).as_bytes())?;
    let plot = plot_data(dims, &results, reference_lines);
    write_atomic(&out_dir.join("bench_plot.json"), &serde_json::to_vec_pretty(&plot)?)?;
    Ok(results)
}

/// Histogram CSV over the weight layers of each checkpoint, tagged with its epoch.
pub fn cmd_hist(checkpoints: &[PathBuf], bins: usize, out: &Path) -> Result<Vec<HistRecord>> {
    let mut records = Vec::new();
    for path in checkpoints {
        let ck = load_checkpoint(path)?;
        for (layer, (_, cw)) in ck.model.weight_layers().enumerate() {
            records.push(HistRecord {
                layer,
                epoch: ck.epoch,
                hist: histogram_snapshot(cw, bins, ck.nu as f32),
            });
        }
    }
    write_atomic(out, hist_csv(&records).as_bytes())?;
    Ok(records)
}
