//! Mask-generator training: Adam on generator + scaler parameters against
//! normalised MOS, reference-disjoint validation, resumable checkpoints and
//! the ablation drivers.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Manifest};
use crate::data::{filter_ablation, AblationFilter, DatasetSplit, PairLoader, QualityRecord, DEFAULT_SHORT_SIDE};
use crate::error::{Error, Result};
use crate::evaluation::{score_split, srcc, MetricSpec};
use crate::image::{stack, Image};
use crate::masking::EnhancedMetric;
use crate::metrics::{MetricContext, MetricId, Orientation};
use crate::nn::seeded_rng;
use crate::ops;

pub mod ablation;
mod adam;

pub use adam::{Adam, AdamConfig};

pub const LOG_HEADER: &str = "step,epoch,loss,val_srcc";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub metric: MetricId,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub filter: AblationFilter,
    /// `None` trains at native resolution.
    pub short_side: Option<usize>,
    /// Fraction of references held out for model selection; 0 disables.
    pub val_fraction: f64,
    /// Stops early (mid-epoch if need be) after this many optimiser steps.
    #[serde(default)]
    pub max_steps: Option<u64>,
    pub ppd: f64,
}

impl TrainConfig {
    pub fn new(metric: MetricId) -> Self {
        Self {
            metric,
            learning_rate: 1e-4,
            weight_decay: 1e-6,
            batch_size: 4,
            epochs: 30,
            seed: 0,
            filter: AblationFilter::default(),
            short_side: Some(DEFAULT_SHORT_SIDE),
            val_fraction: 0.1,
            max_steps: None,
            ppd: crate::metrics::DEFAULT_PPD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(0.0..0.9).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 0.9)");
        }
        if self.short_side.is_some_and(|s| s < Image::MIN_SIDE) {
            return bad("short_side must be at least 32");
        }
        if !(self.ppd > 0.0) {
            return bad("ppd must be positive");
        }
        Ok(())
    }

    pub fn digest(&self) -> Result<String> {
        checkpoint::config_digest(self)
    }
}

pub fn steps_per_epoch(records: usize, batch_size: usize) -> usize {
    records.div_ceil(batch_size)
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    /// Batches of `epoch` already consumed.
    pub batch_in_epoch: u64,
    /// Sum and count of this epoch's batch losses; f64 bits for exactness.
    pub epoch_loss_bits: u64,
    pub epoch_batches: u64,
    pub best_val_srcc: Option<f64>,
    pub best_checkpoint: Option<String>,
}

impl TrainState {
    fn fresh() -> Self {
        Self {
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            epoch_loss_bits: 0f64.to_bits(),
            epoch_batches: 0,
            best_val_srcc: None,
            best_checkpoint: None,
        }
    }

    pub fn running_loss(&self) -> f64 {
        f64::from_bits(self.epoch_loss_bits) / self.epoch_batches.max(1) as f64
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Best-on-validation checkpoint, or the final one without validation.
    pub checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps: u64,
    pub best_val_srcc: Option<f64>,
    /// Per-epoch mean training loss.
    pub epoch_losses: Vec<f64>,
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    ctx: &'a MetricContext,
    model: EnhancedMetric,
    opt: Adam,
    state: TrainState,
    out_dir: PathBuf,
    log: fs::File,
    loader: PairLoader,
}

impl Run<'_> {
    fn save(&self, path: &Path) -> Result<()> {
        let manifest = Manifest {
            metric: self.cfg.metric.as_str().into(),
            init_seed: self.model.init_seed,
            config_digest: self.cfg.digest()?,
            step: self.state.step,
            epoch: self.state.epoch,
            meta: serde_json::json!({ "config": self.cfg, "state": self.state }),
            tensors: vec![],
        };
        let mut records = self.model.records();
        records.extend(self.opt.records());
        checkpoint::write(path, manifest, &records)
    }

    /// Mean loss over a batch; pairs of differing size are evaluated in
    /// same-size groups and weighted by group size.
    fn batch_loss(&self, batch: &[&QualityRecord]) -> Result<Tensor> {
        let mut groups: BTreeMap<(usize, usize), Vec<(Image, Image, f64)>> = BTreeMap::new();
        for rec in batch {
            let (r, d) = self.loader.load(rec)?;
            groups.entry(r.dims()).or_default().push((r, d, rec.mos));
        }
        let mut total: Option<Tensor> = None;
        for items in groups.values() {
            let rs: Vec<&Image> = items.iter().map(|x| &x.0).collect();
            let ds: Vec<&Image> = items.iter().map(|x| &x.1).collect();
            let mos: Vec<f32> = items.iter().map(|x| x.2 as f32).collect();
            let mos = Tensor::new(mos.as_slice(), &candle_core::Device::Cpu)?;
            let l = self.model.training_loss(self.ctx, &stack(&rs)?, &stack(&ds)?, &mos)?;
            let l = (l * (items.len() as f64 / batch.len() as f64))?;
            total = Some(match total {
                Some(t) => (t + l)?,
                None => l,
            });
        }
        total.ok_or_else(|| Error::EmptySplit("empty batch".into()))
    }

    fn validate(&self, val: &DatasetSplit) -> Result<Option<f64>> {
        let spec = MetricSpec::Enhanced(Box::new(self.model.clone()));
        let (scores, mos) = score_split(self.ctx, &spec, val, &self.loader)?;
        let oriented: Vec<f64> = match self.cfg.metric.orientation() {
            Orientation::HigherBetter => scores,
            Orientation::LowerBetter => scores.iter().map(|v| -v).collect(),
        };
        if oriented.len() < 3 {
            return Ok(None);
        }
        srcc(&oriented, &mos)
    }

    fn log_line(&mut self, loss: f64, val: Option<f64>) -> Result<()> {
        let val = val.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(self.log, "{},{},{:.8},{}", self.state.step, self.state.epoch, loss, val)
            .map_err(|e| Error::io(self.out_dir.join("train_log.csv"), e))
    }
}

/// Trains from scratch into `out_dir`.
pub fn train(cfg: &TrainConfig, data: &DatasetSplit, ctx: &MetricContext, out_dir: impl AsRef<Path>) -> Result<TrainOutcome> {
    run(cfg, data, ctx, out_dir.as_ref(), None)
}

/// Continues a run from a checkpoint written by [`train`] (typically
/// `last.ckpt`). `cfg` may differ from the original only in `epochs` and
/// `max_steps`.
pub fn resume(
    cfg: &TrainConfig,
    data: &DatasetSplit,
    ctx: &MetricContext,
    out_dir: impl AsRef<Path>,
    from: impl AsRef<Path>,
) -> Result<TrainOutcome> {
    run(cfg, data, ctx, out_dir.as_ref(), Some(from.as_ref()))
}

fn run(cfg: &TrainConfig, data: &DatasetSplit, ctx: &MetricContext, out_dir: &Path, from: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let filtered = filter_ablation(data, &cfg.filter)?;
    let (train_split, val_split) = if cfg.val_fraction > 0.0 && filtered.ref_ids().len() >= 2 {
        let (t, v) = filtered.split_by_refs(cfg.val_fraction, cfg.seed)?;
        (t, Some(v))
    } else {
        (filtered, None)
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let model = EnhancedMetric::new(cfg.metric, cfg.seed)?;
    let mut opt = Adam::new(model.params(), AdamConfig::new(cfg.learning_rate, cfg.weight_decay))?;
    let mut state = TrainState::fresh();
    if let Some(path) = from {
        let (manifest, tensors) = checkpoint::read(path)?;
        if manifest.metric != cfg.metric.as_str() || manifest.init_seed != cfg.seed {
            return Err(Error::Checkpoint(format!(
                "{} was trained for {} (seed {}), not {} (seed {})",
                path.display(),
                manifest.metric,
                manifest.init_seed,
                cfg.metric,
                cfg.seed
            )));
        }
        let old: TrainConfig = serde_json::from_value(manifest.meta["config"].clone())?;
        let comparable = TrainConfig {
            epochs: cfg.epochs,
            max_steps: cfg.max_steps,
            ..old
        };
        if &comparable != cfg {
            return Err(Error::Checkpoint(format!(
                "{}: configuration differs beyond epochs/max_steps",
                path.display()
            )));
        }
        state = serde_json::from_value(manifest.meta["state"].clone())?;
        model.load_tensors(&tensors)?;
        opt.load(&tensors, state.step)?;
    }

    let log_path = out_dir.join("train_log.csv");
    let fresh_log = from.is_none() || !log_path.exists();
    let mut log = if fresh_log {
        fs::File::create(&log_path)
    } else {
        OpenOptions::new().append(true).open(&log_path)
    }
    .map_err(|e| Error::io(&log_path, e))?;
    if fresh_log {
        writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;
    }

    let mut r = Run {
        cfg,
        ctx,
        model,
        opt,
        state,
        out_dir: out_dir.to_path_buf(),
        log,
        loader: PairLoader::new(cfg.short_side),
    };
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let mut epoch_losses = Vec::new();
    let n_batches = steps_per_epoch(train_split.len(), cfg.batch_size) as u64;

    'epochs: while (r.state.epoch as usize) < cfg.epochs {
        let mut order: Vec<usize> = (0..train_split.len()).collect();
        order.shuffle(&mut seeded_rng(cfg.seed, r.state.epoch + 1));
        while r.state.batch_in_epoch < n_batches {
            if cfg.max_steps.is_some_and(|m| r.state.step >= m) {
                break 'epochs;
            }
            let start = (r.state.batch_in_epoch as usize) * cfg.batch_size;
            let idx = &order[start..(start + cfg.batch_size).min(order.len())];
            let batch: Vec<&QualityRecord> = idx.iter().map(|&i| &train_split.records[i]).collect();
            let loss = r.batch_loss(&batch)?;
            let value = ops::scalar(&loss)?;
            if !value.is_finite() {
                log::error!("non-finite loss at step {}; last good checkpoint kept", r.state.step + 1);
                return Err(Error::NonFinite {
                    step: r.state.step + 1,
                    records: idx.to_vec(),
                });
            }
            let grads = loss.backward()?;
            r.opt.apply(&grads)?;
            r.state.step += 1;
            r.state.batch_in_epoch += 1;
            r.state.epoch_loss_bits = (f64::from_bits(r.state.epoch_loss_bits) + value).to_bits();
            r.state.epoch_batches += 1;
            r.log_line(value, None)?;
        }
        let mean_loss = r.state.running_loss();
        epoch_losses.push(mean_loss);
        let val = match &val_split {
            Some(v) => r.validate(v)?,
            None => None,
        };
        log::info!(
            "epoch {} done: step {}, mean loss {:.6}, val srcc {:?}",
            r.state.epoch + 1,
            r.state.step,
            mean_loss,
            val
        );
        r.state.epoch += 1;
        r.state.batch_in_epoch = 0;
        r.state.epoch_loss_bits = 0f64.to_bits();
        r.state.epoch_batches = 0;
        if let Some(v) = val {
            writeln!(r.log, "{},{},{:.8},{:.6}", r.state.step, r.state.epoch, mean_loss, v)
                .map_err(|e| Error::io(&log_path, e))?;
            if r.state.best_val_srcc.is_none_or(|b| v > b) {
                r.state.best_val_srcc = Some(v);
                r.state.best_checkpoint = Some(BEST_CHECKPOINT.into());
                r.save(&best_path)?;
            }
        }
        r.save(&last_path)?;
    }
    r.save(&last_path)?;
    let checkpoint = if r.state.best_checkpoint.is_some() { best_path } else { last_path.clone() };
    Ok(TrainOutcome {
        checkpoint,
        last_checkpoint: last_path,
        log: log_path,
        steps: r.state.step,
        best_val_srcc: r.state.best_val_srcc,
        epoch_losses,
    })
}

/// Reads `step -> loss` pairs from a training log (per-step rows only).
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<(u64, f64)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() == 4 && cols[3].is_empty() {
            if let (Ok(s), Ok(l)) = (cols[0].parse(), cols[2].parse()) {
                out.push((s, l));
            }
        }
    }
    Ok(out)
}
