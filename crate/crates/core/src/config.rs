//! Run configuration as flat `key = value` lines with `#` comments.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::{BlobsSpec, DatasetSpec};
use crate::error::{Error, Result};
use crate::graph::{format_arch, parse_arch, ArchLayer};
use crate::selfbin::adam::AdamConfig;
use crate::selfbin::train::TrainConfig;
use crate::selfbin::weights::BinarizeMode;

/// How the first layer sees raw bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodingKind {
    Median,
    Int8,
}

impl EncodingKind {
    pub fn name(self) -> &'static str {
        match self {
            EncodingKind::Median => "median",
            EncodingKind::Int8 => "int8",
        }
    }
}

impl FromStr for EncodingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "median" => Ok(EncodingKind::Median),
            "int8" => Ok(EncodingKind::Int8),
            other => Err(Error::Config(format!("unknown input_encoding `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: Vec<ArchLayer>,
    pub dataset: DatasetSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub nu_start: f64,
    pub nu_end: f64,
    pub mode: BinarizeMode,
    pub use_alpha_fold: bool,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub lr: f64,
    pub lr_decay: f64,
    pub val_fraction: f64,
    pub input_encoding: EncodingKind,
    pub augment: bool,
    pub hist_bins: usize,
    pub hist_epochs: Vec<usize>,
    pub checkpoint_epochs: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            arch: parse_arch("dense:32, dense:2").expect("default architecture parses"),
            dataset: DatasetSpec::Blobs(BlobsSpec::default()),
            epochs: 30,
            batch_size: 128,
            nu_start: 1.0,
            nu_end: 1000.0,
            mode: BinarizeMode::Soft,
            use_alpha_fold: false,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            lr: adam.lr0,
            lr_decay: adam.decay,
            val_fraction: 0.2,
            input_encoding: EncodingKind::Median,
            augment: false,
            hist_bins: crate::selfbin::hist::DEFAULT_BINS,
            hist_epochs: Vec::new(),
            checkpoint_epochs: Vec::new(),
        }
    }
}

fn parse_list(v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::Config(format!("bad list entry `{t}`"))))
        .collect()
}

fn join_list(v: &[usize]) -> String {
    v.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(Error::Config(format!("bad boolean `{other}`"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |what: &str| Error::Config(format!("line {}: bad {what} `{value}`", lineno + 1));
            match key {
                "arch" => cfg.arch = parse_arch(value)?,
                "dataset" => cfg.dataset = value.parse()?,
                "epochs" => cfg.epochs = value.parse().map_err(|_| num(key))?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| num(key))?,
                "nu_start" => cfg.nu_start = value.parse().map_err(|_| num(key))?,
                "nu_end" => cfg.nu_end = value.parse().map_err(|_| num(key))?,
                "mode" => cfg.mode = value.parse()?,
                "use_alpha_fold" => cfg.use_alpha_fold = parse_bool(value)?,
                "seed" => cfg.seed = value.parse().map_err(|_| num(key))?,
                "output_dir" => cfg.output_dir = PathBuf::from(value),
                "lr" => cfg.lr = value.parse().map_err(|_| num(key))?,
                "lr_decay" => cfg.lr_decay = value.parse().map_err(|_| num(key))?,
                "val_fraction" => cfg.val_fraction = value.parse().map_err(|_| num(key))?,
                "input_encoding" => cfg.input_encoding = value.parse()?,
                "augment" => cfg.augment = parse_bool(value)?,
                "hist_bins" => cfg.hist_bins = value.parse().map_err(|_| num(key))?,
                "hist_epochs" => cfg.hist_epochs = parse_list(value)?,
                "checkpoint_epochs" => cfg.checkpoint_epochs = parse_list(value)?,
                other => return Err(Error::Config(format!("line {}: unknown key `{other}`", lineno + 1))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "arch = {}", format_arch(&self.arch));
        let _ = writeln!(s, "dataset = {}", self.dataset);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "nu_start = {}", self.nu_start);
        let _ = writeln!(s, "nu_end = {}", self.nu_end);
        let _ = writeln!(s, "mode = {}", self.mode);
        let _ = writeln!(s, "use_alpha_fold = {}", self.use_alpha_fold);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "output_dir = {}", self.output_dir.display());
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "lr_decay = {}", self.lr_decay);
        let _ = writeln!(s, "val_fraction = {}", self.val_fraction);
        let _ = writeln!(s, "input_encoding = {}", self.input_encoding.name());
        let _ = writeln!(s, "augment = {}", self.augment);
        let _ = writeln!(s, "hist_bins = {}", self.hist_bins);
        let _ = writeln!(s, "hist_epochs = {}", join_list(&self.hist_epochs));
        let _ = writeln!(s, "checkpoint_epochs = {}", join_list(&self.checkpoint_epochs));
        s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs < 1 {
            return fail("epochs must be >= 1");
        }
        if self.batch_size < 2 {
            return fail("batch_size must be >= 2 for BatchNorm statistics");
        }
        if !(self.nu_start > 0.0 && self.nu_end >= self.nu_start && self.nu_end.is_finite()) {
            return fail("schedule endpoints must satisfy 0 < nu_start <= nu_end");
        }
        if !(self.lr > 0.0 && self.lr_decay > 0.0) {
            return fail("lr and lr_decay must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail("val_fraction must lie in [0, 1)");
        }
        if self.hist_bins == 0 {
            return fail("hist_bins must be positive");
        }
        if self.arch.is_empty() {
            return fail("arch is empty");
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            nu_start: self.nu_start,
            nu_end: self.nu_end,
            adam: AdamConfig {
                lr0: self.lr,
                decay: self.lr_decay,
                ..AdamConfig::default()
            },
            seed: self.seed,
            augment: self.augment,
            hist_bins: self.hist_bins,
            hist_epochs: self.hist_epochs.clone(),
            checkpoint_epochs: self.checkpoint_epochs.clone(),
        }
    }
}
