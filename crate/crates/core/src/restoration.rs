//! Denoising with MAE vs. E-MAE as the training loss.
//!
//! A plain residual CNN (conv-ReLU stack predicting the noise, no batch
//! norm) is trained on random patches with additive Gaussian noise. With the
//! E-MAE loss the mask generator comes from a trained checkpoint and stays
//! frozen: gradients flow through it into the denoiser, but only denoiser
//! parameters are updated.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, Manifest, Record};
use crate::error::{Error, Result};
use crate::image::{stack, Image};
use crate::masking::EnhancedMetric;
use crate::metrics::{MetricContext, MetricId};
use crate::nn::{seeded_rng, Conv2d, Param};
use crate::ops;
use crate::training::{Adam, AdamConfig};

pub const DEFAULT_DEPTH: usize = 17;
pub const DEFAULT_WIDTH: usize = 64;
/// Upper end of the training noise range, on the 8-bit scale.
pub const MAX_TRAIN_SIGMA: f64 = 50.0;
pub const TEST_SIGMAS: [f64; 4] = [15.0, 25.0, 50.0, 60.0];
pub const REPORT_HEADER: &str = "loss,dataset,sigma,psnr,ssim,lpips,e_mae";
pub const LOG_HEADER: &str = "step,loss";

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DenoiseLoss {
    #[serde(rename = "mae")]
    Mae,
    #[serde(rename = "e-mae")]
    EMae,
}

impl DenoiseLoss {
    pub fn as_str(self) -> &'static str {
        match self {
            DenoiseLoss::Mae => "mae",
            DenoiseLoss::EMae => "e-mae",
        }
    }
}

impl std::fmt::Display for DenoiseLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DenoiseLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mae" => Ok(DenoiseLoss::Mae),
            "e-mae" | "emae" => Ok(DenoiseLoss::EMae),
            _ => Err(Error::InvalidInput(format!("unknown denoising loss '{s}' (expected mae or e-mae)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseConfig {
    /// Noise standard deviation range on the 8-bit scale.
    pub sigma_range: (f64, f64),
    pub loss: DenoiseLoss,
    pub train_root: PathBuf,
    /// Trained E-MAE checkpoint; required for the e-mae loss.
    pub emae_checkpoint: Option<PathBuf>,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub patch_size: usize,
    pub learning_rate: f64,
    pub depth: usize,
    pub width: usize,
    pub seed: u64,
}

impl DenoiseConfig {
    pub fn new(loss: DenoiseLoss, train_root: impl Into<PathBuf>) -> Self {
        Self {
            sigma_range: (0.0, MAX_TRAIN_SIGMA),
            loss,
            train_root: train_root.into(),
            emae_checkpoint: None,
            epochs: 10,
            steps_per_epoch: 200,
            max_steps: None,
            batch_size: 8,
            patch_size: 40,
            learning_rate: 1e-3,
            depth: DEFAULT_DEPTH,
            width: DEFAULT_WIDTH,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.sigma_range;
        if !(0.0 <= lo && lo <= hi && hi <= MAX_TRAIN_SIGMA) {
            return Err(Error::Config(format!(
                "noise sigma range must lie within [0, {MAX_TRAIN_SIGMA}], got [{lo}, {hi}]"
            )));
        }
        if self.depth < 2 || self.width == 0 {
            return Err(Error::Config("denoiser needs depth >= 2 and width >= 1".into()));
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size, epochs and steps per epoch must be positive".into()));
        }
        if self.patch_size < Image::MIN_SIDE {
            return Err(Error::Config(format!("patch size must be at least {}", Image::MIN_SIDE)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.loss == DenoiseLoss::EMae {
            match &self.emae_checkpoint {
                None => return Err(Error::Checkpoint("the e-mae loss needs a trained E-MAE checkpoint".into())),
                Some(p) if !p.is_file() => {
                    return Err(Error::Checkpoint(format!("E-MAE checkpoint {} not found", p.display())))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        let full = (self.epochs * self.steps_per_epoch) as u64;
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// `depth` 3x3 convolutions with ReLU in between; predicts the noise and
/// subtracts it from the input.
#[derive(Clone, Debug)]
pub struct Denoiser {
    layers: Vec<Conv2d>,
    pub init_seed: u64,
}

impl Denoiser {
    pub fn new(depth: usize, width: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed, 2);
        let layers = (0..depth)
            .map(|i| {
                let c_in = if i == 0 { 3 } else { width };
                let c_out = if i + 1 == depth { 3 } else { width };
                Conv2d::new(c_in, c_out, 3, &mut rng, DType::F32)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, init_seed: seed })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.layers[0].weight.dim(0).unwrap_or(0)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok((x - h)?)
    }

    /// Denoises one image, clamping the result to [0, 1].
    pub fn denoise(&self, noisy: &Tensor) -> Result<Image> {
        let out = self.forward(&noisy.unsqueeze(0)?)?.clamp(0f32, 1f32)?;
        Image::from_tensor(&out.squeeze(0)?)
    }

    pub fn params(&self) -> Vec<Param> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params(&format!("denoiser.conv{i}")))
            .collect()
    }

    fn records(&self) -> Vec<Record> {
        self.params()
            .into_iter()
            .map(|p| Record {
                layer: p.name.rsplit_once('.').map_or("", |x| x.0).to_string(),
                name: p.name,
                tensor: p.var.as_tensor().clone(),
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>, loss: DenoiseLoss, step: u64, meta: serde_json::Value) -> Result<()> {
        let manifest = Manifest {
            metric: format!("denoiser-{loss}"),
            init_seed: self.init_seed,
            config_digest: checkpoint::config_digest(&meta)?,
            step,
            epoch: 0,
            meta,
            tensors: vec![],
        };
        checkpoint::write(path, manifest, &self.records())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (manifest, tensors) = checkpoint::read(path.as_ref())?;
        let depth = (0..).take_while(|i| tensors.contains_key(&format!("denoiser.conv{i}.weight"))).count();
        if depth < 2 {
            return Err(Error::Checkpoint(format!("{} holds no denoiser", path.as_ref().display())));
        }
        let width = tensors["denoiser.conv0.weight"].dim(0)?;
        let model = Self::new(depth, width, manifest.init_seed)?;
        for p in model.params() {
            let t = tensors
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks '{}'", p.name)))?;
            if t.dims() != p.var.dims() {
                return Err(Error::Checkpoint(format!("'{}' has shape {:?}", p.name, t.dims())));
            }
            p.var.set(&t.to_dtype(DType::F32)?)?;
        }
        Ok(model)
    }
}

/// SHA-256 over the named tensors of `params`, in name order.
pub fn param_fingerprint(params: &[Param]) -> Result<String> {
    let mut sorted: Vec<&Param> = params.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let mut h = Sha256::new();
    for p in sorted {
        h.update(p.name.as_bytes());
        for v in p.var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if ok && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Ingestion(format!("no images found in {}", dir.display())));
    }
    Ok(out)
}

/// Per-patch noise levels, uniform in `range` (8-bit scale).
pub fn sample_sigmas(rng: &mut ChaCha8Rng, n: usize, range: (f64, f64)) -> Vec<f64> {
    (0..n)
        .map(|_| if range.1 > range.0 { rng.random_range(range.0..=range.1) } else { range.0 })
        .collect()
}

/// Adds N(0, (sigma/255)^2) noise, unclipped.
pub fn add_gaussian_noise(clean: &Tensor, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n = clean.elem_count();
    let normal = Normal::new(0.0f32, (sigma / 255.0) as f32).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let noise: Vec<f32> = (0..n).map(|_| normal.sample(rng)).collect();
    let noise = Tensor::from_vec(noise, clean.shape(), &Device::Cpu)?;
    Ok((clean.to_dtype(DType::F32)? + noise)?)
}

struct PatchSampler {
    images: Vec<Image>,
    size: usize,
}

impl PatchSampler {
    fn new(root: &Path, size: usize) -> Result<Self> {
        let images = list_images(root)?
            .iter()
            .map(Image::load)
            .collect::<Result<Vec<_>>>()?;
        if let Some(small) = images.iter().find(|i| i.height() < size || i.width() < size) {
            return Err(Error::InvalidInput(format!(
                "training image of size {:?} is smaller than the {size}px patch",
                small.dims()
            )));
        }
        Ok(Self { images, size })
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let img = &self.images[rng.random_range(0..self.images.len())];
        let y = rng.random_range(0..=img.height() - self.size);
        let x = rng.random_range(0..=img.width() - self.size);
        let mut t = img.tensor().narrow(1, y, self.size)?.narrow(2, x, self.size)?.contiguous()?;
        if rng.random_bool(0.5) {
            t = t.flip(&[2])?;
        }
        Ok(t.contiguous()?)
    }
}

#[derive(Clone, Debug)]
pub struct DenoiseOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub losses: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// Fingerprint of the frozen E-MAE parameters, checked unchanged after
    /// training.
    pub frozen_fingerprint: Option<String>,
}

fn load_frozen_emae(path: &Path) -> Result<EnhancedMetric> {
    let m = EnhancedMetric::load(path)?;
    if m.base != MetricId::Mae {
        return Err(Error::Checkpoint(format!(
            "{} is an {} checkpoint; the denoising loss needs e-mae",
            path.display(),
            m.name()
        )));
    }
    Ok(m)
}

pub fn train_denoiser(cfg: &DenoiseConfig, ctx: &MetricContext, out_dir: impl AsRef<Path>) -> Result<DenoiseOutcome> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let emae = match cfg.loss {
        DenoiseLoss::EMae => Some(load_frozen_emae(cfg.emae_checkpoint.as_deref().unwrap_or(Path::new("")))?),
        DenoiseLoss::Mae => None,
    };
    let frozen_before = emae.as_ref().map(|m| param_fingerprint(&m.params())).transpose()?;

    let sampler = PatchSampler::new(&cfg.train_root, cfg.patch_size)?;
    let model = Denoiser::new(cfg.depth, cfg.width, cfg.seed)?;
    let mut opt = Adam::new(model.params(), AdamConfig::new(cfg.learning_rate, 0.0))?;
    let mut rng = seeded_rng(cfg.seed, 3);

    let log_path = out_dir.join(format!("denoise_{}.log.csv", cfg.loss));
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;

    let mut losses = Vec::new();
    let mut all_sigmas = Vec::new();
    for step in 1..=cfg.total_steps() {
        let sigmas = sample_sigmas(&mut rng, cfg.batch_size, cfg.sigma_range);
        let mut clean = Vec::with_capacity(cfg.batch_size);
        let mut noisy = Vec::with_capacity(cfg.batch_size);
        for &s in &sigmas {
            let c = sampler.sample(&mut rng)?;
            noisy.push(add_gaussian_noise(&c, s, &mut rng)?);
            clean.push(c);
        }
        all_sigmas.extend(&sigmas);
        let clean = Tensor::stack(&clean, 0)?;
        let noisy = Tensor::stack(&noisy, 0)?;
        let out = model.forward(&noisy)?;
        let loss = match &emae {
            None => (out - &clean)?.abs()?.mean_all()?,
            Some(m) => m.forward(ctx, &clean, &out)?.score.mean_all()?,
        };
        let value = ops::scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { step, records: vec![] });
        }
        // Gradients also reach the frozen generator; only the denoiser's
        // parameters are handed to the optimizer.
        opt.apply(&loss.backward()?)?;
        writeln!(log, "{step},{value}").map_err(|e| Error::io(&log_path, e))?;
        losses.push(value);
    }

    if let (Some(m), Some(before)) = (&emae, &frozen_before) {
        if &param_fingerprint(&m.params())? != before {
            return Err(Error::Checkpoint("frozen E-MAE parameters changed during denoiser training".into()));
        }
    }
    let checkpoint = out_dir.join(format!("denoiser_{}.ckpt", cfg.loss));
    let meta = serde_json::json!({ "config": cfg, "frozen_emae": frozen_before });
    model.save(&checkpoint, cfg.loss, losses.len() as u64, meta)?;
    Ok(DenoiseOutcome {
        checkpoint,
        log: log_path,
        losses,
        sigmas: all_sigmas,
        frozen_fingerprint: frozen_before,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseRow {
    pub loss: String,
    pub dataset: String,
    pub sigma: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
    pub e_mae: f64,
    pub images: usize,
}

fn noise_stream(set: usize, image: usize, sigma: f64) -> u64 {
    ((set as u64 * 100_000 + image as u64) << 16) | (sigma.round() as u64 & 0xffff)
}

/// Mean PSNR / SSIM / LPIPS / E-MAE of each denoiser on each test set at
/// each noise level. Noise is seeded per (set, image, sigma), so all models
/// see identical inputs. LPIPS is reported only when backbone weights are
/// loaded in `ctx`.
pub fn evaluate_denoisers(
    models: &[(String, PathBuf)],
    test_sets: &[(String, PathBuf)],
    sigmas: &[f64],
    ctx: &MetricContext,
    emae: &EnhancedMetric,
    seed: u64,
) -> Result<Vec<DenoiseRow>> {
    let loaded = models
        .iter()
        .map(|(name, p)| Ok((name.clone(), Denoiser::load(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let with_lpips = ctx.deep.as_ref().is_some_and(|d| d.lpips.is_some());
    let mut rows = Vec::new();
    for (si, (set_name, dir)) in test_sets.iter().enumerate() {
        let images = list_images(dir)?
            .iter()
            .map(Image::load)
            .collect::<Result<Vec<_>>>()?;
        for &sigma in sigmas {
            let noisy: Vec<Tensor> = images
                .iter()
                .enumerate()
                .map(|(ii, img)| add_gaussian_noise(img.tensor(), sigma, &mut seeded_rng(seed, noise_stream(si, ii, sigma))))
                .collect::<Result<_>>()?;
            for (name, model) in &loaded {
                let mut acc = [0.0f64; 4];
                for (img, n) in images.iter().zip(&noisy) {
                    let out = model.denoise(n)?;
                    let (r, d) = (img.batch()?, out.batch()?);
                    acc[0] += ops::scalar(&ctx.compute(MetricId::Psnr, &r, &d)?.score)?;
                    acc[1] += ops::scalar(&ctx.compute(MetricId::Ssim, &r, &d)?.score)?;
                    if with_lpips {
                        acc[2] += ops::scalar(&ctx.compute(MetricId::Lpips, &r, &d)?.score)?;
                    }
                    acc[3] += ops::scalar(&emae.forward(ctx, &stack(&[img])?, &stack(&[&out])?)?.score)?;
                }
                let n = images.len() as f64;
                rows.push(DenoiseRow {
                    loss: name.clone(),
                    dataset: set_name.clone(),
                    sigma,
                    psnr: acc[0] / n,
                    ssim: acc[1] / n,
                    lpips: with_lpips.then_some(acc[2] / n),
                    e_mae: acc[3] / n,
                    images: images.len(),
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_denoise_report(rows: &[DenoiseRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in rows {
        let lpips = r.lpips.map(|v| format!("{v:.6}")).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{:.4},{:.6},{},{:.6}\n",
            r.loss, r.dataset, r.sigma, r.psnr, r.ssim, lpips, r.e_mae
        ));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// At one noise level, averaged over test sets: does the MAE-trained model
/// win PSNR, and does the E-MAE-trained model win the E-MAE score?
pub fn directions(rows: &[DenoiseRow], mae: &str, emae: &str, sigma: f64) -> Option<(bool, bool)> {
    let mean = |label: &str| -> Option<(f64, f64)> {
        let sel: Vec<&DenoiseRow> = rows
            .iter()
            .filter(|r| r.loss == label && (r.sigma - sigma).abs() < 1e-9)
            .collect();
        if sel.is_empty() {
            return None;
        }
        let n = sel.len() as f64;
        Some((
            sel.iter().map(|r| r.psnr).sum::<f64>() / n,
            sel.iter().map(|r| r.e_mae).sum::<f64>() / n,
        ))
    };
    let (a, b) = (mean(mae)?, mean(emae)?);
    Some((a.0 >= b.0, b.1 <= a.1))
}

#[derive(Clone, Debug)]
pub struct DemoOutcome {
    pub rows: Vec<DenoiseRow>,
    pub report: PathBuf,
    pub checkpoints: BTreeMap<String, PathBuf>,
}

/// Trains an MAE and an E-MAE denoiser per seed and evaluates all of them.
/// Model labels are `mae` / `e-mae`, suffixed with `@seed` when more than
/// one seed is run.
pub fn run_denoise_demo(
    base: &DenoiseConfig,
    seeds: &[u64],
    test_sets: &[(String, PathBuf)],
    sigmas: &[f64],
    ctx: &MetricContext,
    out_dir: impl AsRef<Path>,
) -> Result<DemoOutcome> {
    let out_dir = out_dir.as_ref();
    let emae_path = base
        .emae_checkpoint
        .clone()
        .ok_or_else(|| Error::Checkpoint("the denoising demo needs a trained E-MAE checkpoint".into()))?;
    let emae = load_frozen_emae(&emae_path)?;
    let mut checkpoints = BTreeMap::new();
    for &seed in seeds {
        for loss in [DenoiseLoss::Mae, DenoiseLoss::EMae] {
            let cfg = DenoiseConfig { loss, seed, ..base.clone() };
            let label = if seeds.len() > 1 { format!("{loss}@{seed}") } else { loss.to_string() };
            let dir = out_dir.join(format!("seed{seed}"));
            let o = train_denoiser(&cfg, ctx, &dir)?;
            checkpoints.insert(label, o.checkpoint);
        }
    }
    let models: Vec<(String, PathBuf)> = checkpoints.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let rows = evaluate_denoisers(&models, test_sets, sigmas, ctx, &emae, base.seed)?;
    let report = out_dir.join("denoise_report.csv");
    write_denoise_report(&rows, &report)?;
    Ok(DemoOutcome { rows, report, checkpoints })
}
