//! Learned visual masking: a small CNN predicts a per-pixel weight in (0, 1)
//! from a reference/distorted pair, and the same weight multiplies both
//! inputs before the base metric sees them.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use candle_core::{DType, Tensor, TensorId};

use crate::checkpoint::{self, Manifest, Record};
use crate::deep::DeepMetrics;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{check_pair, ms_ssim_with, ErrorMap, MetricContext, MetricId, MetricOutput, MetricResult};
use crate::nn::{seeded_rng, Conv2d, Linear, Param};
use crate::ops;

pub const HIDDEN_CHANNELS: usize = 64;
pub const SCALER_WIDTH: usize = 32;
/// Layer name used for the single generator of image-space metrics.
pub const IMAGE_LAYER: &str = "image";

static NEXT_GENERATOR_ID: AtomicU64 = AtomicU64::new(1);

/// Observations collected by [`trace`].
#[derive(Clone, Debug, PartialEq)]
pub enum MaskEvent {
    Predicted { generator: u64, dims: Vec<usize> },
    Applied { mask: TensorId, dims: Vec<usize> },
}

thread_local! {
    static TRACE: RefCell<Option<Vec<MaskEvent>>> = const { RefCell::new(None) };
}

fn record(ev: impl FnOnce() -> MaskEvent) {
    TRACE.with(|t| {
        if let Some(v) = t.borrow_mut().as_mut() {
            v.push(ev());
        }
    });
}

/// Runs `f` and returns every mask prediction and application it made on
/// this thread.
pub fn trace<T>(f: impl FnOnce() -> T) -> (T, Vec<MaskEvent>) {
    TRACE.with(|t| *t.borrow_mut() = Some(Vec::new()));
    let out = f();
    let events = TRACE.with(|t| t.borrow_mut().take()).unwrap_or_default();
    (out, events)
}

/// A `(N, 1, H, W)` weight map in (0, 1).
#[derive(Clone, Debug)]
pub struct Mask {
    pub values: Tensor,
}

impl Mask {
    /// First sample as a plain map.
    pub fn to_map(&self) -> Result<ErrorMap> {
        ErrorMap::from_tensor(&self.values.get(0)?)
    }
}

/// Conv3x3(2C->64) ReLU, Conv3x3(64->64) ReLU x2, Conv3x3(64->1) Sigmoid.
#[derive(Clone, Debug)]
pub struct MaskGenerator {
    channels: usize,
    layers: Vec<Conv2d>,
    id: u64,
}

impl MaskGenerator {
    /// `channels` is C of each input; the network sees the 2C concatenation.
    pub fn new(channels: usize, seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = seeded_rng(seed, 0);
        let widths = [2 * channels, HIDDEN_CHANNELS, HIDDEN_CHANNELS, HIDDEN_CHANNELS, 1];
        let layers = widths
            .windows(2)
            .map(|w| Conv2d::new(w[0], w[1], 3, &mut rng, dtype))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            channels,
            layers,
            id: NEXT_GENERATOR_ID.fetch_add(1, Ordering::Relaxed),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Identity shared by clones, for checking that one generator serves
    /// several call sites.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn predict_mask(&self, r: &Tensor, d: &Tensor) -> Result<Mask> {
        check_pair(r, d)?;
        let c = r.dim(1)?;
        if c != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "mask generator expects {} channels per input, got {c}",
                self.channels
            )));
        }
        let mut h = Tensor::cat(&[r, d], 1)?;
        let last = self.layers.len() - 1;
        for (i, conv) in self.layers.iter().enumerate() {
            h = conv.forward(&h)?;
            h = if i == last { ops::sigmoid(&h)? } else { h.relu()? };
        }
        record(|| MaskEvent::Predicted {
            generator: self.id,
            dims: r.dims().to_vec(),
        });
        Ok(Mask { values: h })
    }

    /// Sets every output-layer weight to zero and its bias to `bias`, so the
    /// mask becomes the constant `sigmoid(bias)`.
    pub fn force_output(&self, bias: f64) -> Result<()> {
        let out = self.layers.last().expect("four layers");
        out.weight.set(&out.weight.zeros_like()?)?;
        out.bias.set(&out.bias.ones_like()?.affine(bias, 0.0)?)?;
        Ok(())
    }

    pub fn output_bias(&self) -> &candle_core::Var {
        &self.layers.last().expect("four layers").bias
    }

    pub fn params(&self, prefix: &str) -> Vec<Param> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, c)| c.params(&format!("{prefix}.conv{i}")))
            .collect()
    }
}

/// Multiplies both inputs by the same mask, broadcasting over channels.
pub fn apply_mask(mask: &Tensor, r: &Tensor, d: &Tensor) -> Result<(Tensor, Tensor)> {
    check_pair(r, d)?;
    let (mn, mc, mh, mw) = mask.dims4()?;
    let (n, _, h, w) = r.dims4()?;
    if mc != 1 || (mh, mw) != (h, w) || (mn != n && mn != 1) {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} does not match inputs {:?}",
            mask.dims(),
            r.dims()
        )));
    }
    record(|| MaskEvent::Applied {
        mask: mask.id(),
        dims: mask.dims().to_vec(),
    });
    Ok((r.broadcast_mul(mask)?, d.broadcast_mul(mask)?))
}

/// Training-only calibration MLP 1 -> 32 -> 32 -> 1 onto (0, 1).
#[derive(Clone, Debug)]
pub struct ScalerNetwork {
    layers: Vec<Linear>,
}

impl ScalerNetwork {
    pub fn new(seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = seeded_rng(seed, 1);
        let widths = [1, SCALER_WIDTH, SCALER_WIDTH, 1];
        let layers = widths
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], &mut rng, dtype))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    /// `(N,)` raw metric scores to `(N,)` predicted normalised MOS.
    pub fn forward(&self, score: &Tensor) -> Result<Tensor> {
        let mut h = score.reshape(((), 1))?;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            h = if i == last { ops::sigmoid(&h)? } else { h.relu()? };
        }
        Ok(h.flatten_all()?)
    }

    pub fn params(&self, prefix: &str) -> Vec<Param> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params(&format!("{prefix}.fc{i}")))
            .collect()
    }
}

/// A base metric plus its learned mask generator(s) and training scaler.
#[derive(Clone, Debug)]
pub struct EnhancedMetric {
    pub base: MetricId,
    /// One per compared stage for feature-space metrics, otherwise one.
    pub generators: Vec<MaskGenerator>,
    pub layer_names: Vec<String>,
    pub scaler: ScalerNetwork,
    pub init_seed: u64,
}

impl EnhancedMetric {
    pub fn new(base: MetricId, seed: u64) -> Result<Self> {
        Self::with_dtype(base, seed, DType::F32)
    }

    pub fn with_dtype(base: MetricId, seed: u64, dtype: DType) -> Result<Self> {
        let (names, channels) = if base.is_feature_space() {
            (DeepMetrics::layer_names(base), DeepMetrics::layer_channels(base))
        } else {
            (vec![IMAGE_LAYER.to_string()], vec![3])
        };
        let generators = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| MaskGenerator::new(c, seed.wrapping_add(1000 * (i as u64 + 1)), dtype))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            base,
            generators,
            layer_names: names,
            scaler: ScalerNetwork::new(seed, dtype)?,
            init_seed: seed,
        })
    }

    pub fn name(&self) -> String {
        format!("e-{}", self.base)
    }

    /// Forces every generator to the constant mask `sigmoid(bias)`.
    pub fn force_output(&self, bias: f64) -> Result<()> {
        self.generators.iter().try_for_each(|g| g.force_output(bias))
    }

    /// Differentiable enhanced evaluation of an NCHW batch.
    pub fn forward(&self, ctx: &MetricContext, r: &Tensor, d: &Tensor) -> Result<MetricOutput> {
        match self.base {
            MetricId::MsSsim => {
                let g = &self.generators[0];
                let hook = |a: &Tensor, b: &Tensor| -> Result<(Tensor, Tensor)> {
                    let m = g.predict_mask(a, b)?;
                    apply_mask(&m.values, a, b)
                };
                ms_ssim_with(r, d, Some(&hook))
            }
            m if m.is_feature_space() => {
                let hook = |l: usize, a: &Tensor, b: &Tensor| -> Result<Tensor> {
                    Ok(self.generators[l].predict_mask(a, b)?.values)
                };
                ctx.deep()?.compute(m, r, d, Some(&hook))
            }
            m => {
                let mask = self.generators[0].predict_mask(r, d)?;
                let (mr, md) = apply_mask(&mask.values, r, d)?;
                ctx.compute(m, &mr, &md)
            }
        }
    }

    /// Masks the metric would use, by stage name. For MS-SSIM this is the
    /// finest scale only.
    pub fn masks(&self, ctx: &MetricContext, r: &Tensor, d: &Tensor) -> Result<Vec<(String, Mask)>> {
        if self.base.is_feature_space() {
            let deep = ctx.deep()?;
            let fr = deep.features(self.base, r)?;
            let fd = deep.features(self.base, d)?;
            fr.iter()
                .zip(&fd)
                .zip(&self.generators)
                .zip(&self.layer_names)
                .map(|(((a, b), g), n)| Ok((n.clone(), g.predict_mask(a, b)?)))
                .collect()
        } else {
            Ok(vec![(self.layer_names[0].clone(), self.generators[0].predict_mask(r, d)?)])
        }
    }

    pub fn evaluate(&self, ctx: &MetricContext, r: &Image, d: &Image) -> Result<MetricResult> {
        let out = self.forward(ctx, &r.batch()?, &d.batch()?)?;
        MetricResult::from_output(self.name(), self.base.orientation(), &out)
    }

    /// Mean over the batch of `(S(score) - mos)^2`.
    pub fn training_loss(&self, ctx: &MetricContext, r: &Tensor, d: &Tensor, mos: &Tensor) -> Result<Tensor> {
        let out = self.forward(ctx, r, d)?;
        let pred = self.scaler.forward(&out.score)?;
        Ok((pred - mos.to_dtype(out.score.dtype())?)?.sqr()?.mean_all()?)
    }

    pub fn generator_params(&self) -> Vec<Param> {
        self.generators
            .iter()
            .zip(&self.layer_names)
            .flat_map(|(g, n)| g.params(&format!("generator.{n}")))
            .collect()
    }

    pub fn params(&self) -> Vec<Param> {
        let mut p = self.generator_params();
        p.extend(self.scaler.params("scaler"));
        p
    }

    fn layer_of(&self, name: &str) -> String {
        name.strip_prefix("generator.")
            .and_then(|s| s.split('.').next())
            .unwrap_or("scaler")
            .to_string()
    }

    /// Checkpoint records for every trainable tensor.
    pub fn records(&self) -> Vec<Record> {
        self.params()
            .into_iter()
            .map(|p| Record {
                layer: self.layer_of(&p.name),
                name: p.name,
                tensor: p.var.as_tensor().clone(),
            })
            .collect()
    }

    /// Overwrites parameters from checkpoint tensors, matched by name.
    pub fn load_tensors(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for p in self.params() {
            let t = tensors
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks '{}'", p.name)))?;
            if t.dims() != p.var.dims() {
                return Err(Error::Checkpoint(format!(
                    "'{}': shape {:?} in file, {:?} expected",
                    p.name,
                    t.dims(),
                    p.var.dims()
                )));
            }
            p.var.set(&t.to_dtype(p.var.dtype())?)?;
        }
        Ok(())
    }

    pub fn from_checkpoint(manifest: &Manifest, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let base: MetricId = manifest.metric.parse()?;
        let e = Self::new(base, manifest.init_seed)?;
        e.load_tensors(tensors)?;
        Ok(e)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (m, t) = checkpoint::read(path)?;
        Self::from_checkpoint(&m, &t)
    }

    /// Writes a weights-only checkpoint.
    pub fn save(&self, path: impl AsRef<Path>, config_digest: &str, meta: serde_json::Value) -> Result<()> {
        let manifest = Manifest {
            metric: self.base.as_str().into(),
            init_seed: self.init_seed,
            config_digest: config_digest.into(),
            step: 0,
            epoch: 0,
            meta,
            tensors: vec![],
        };
        checkpoint::write(path, manifest, &self.records())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{rand_image, rand_pair};
    use candle_core::Device;

    #[test]
    fn zero_output_layer_gives_half() {
        let g = MaskGenerator::new(3, 1, DType::F32).unwrap();
        g.force_output(0.0).unwrap();
        let (r, d) = rand_pair(12, 9, 2);
        let m = g
            .predict_mask(&r.to_dtype(DType::F32).unwrap(), &d.to_dtype(DType::F32).unwrap())
            .unwrap();
        assert_eq!(m.values.dims(), &[1, 1, 12, 9]);
        assert!(ops::to_f64_vec(&m.values).unwrap().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let g = MaskGenerator::new(64, 1, DType::F64).unwrap();
        let (r, d) = rand_pair(8, 8, 2);
        assert!(matches!(g.predict_mask(&r, &d), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn apply_mask_matches_loop_and_checks_size() {
        let (r, d) = rand_pair(5, 4, 3);
        let m = rand_image(5, 4, 4).narrow(1, 0, 1).unwrap();
        let (mr, md) = apply_mask(&m, &r, &d).unwrap();
        let (rv, mv, mrv) = (
            r.get(0).unwrap().to_vec3::<f64>().unwrap(),
            m.get(0).unwrap().to_vec3::<f64>().unwrap(),
            mr.get(0).unwrap().to_vec3::<f64>().unwrap(),
        );
        for c in 0..3 {
            for y in 0..5 {
                for x in 0..4 {
                    assert_eq!(mrv[c][y][x], rv[c][y][x] * mv[0][y][x]);
                }
            }
        }
        assert_eq!(md.dims(), d.dims());
        let bad = Tensor::ones((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(apply_mask(&bad, &r, &d).is_err());
    }

    #[test]
    fn scaler_saturates_inside_unit_interval() {
        let s = ScalerNetwork::new(3, DType::F64).unwrap();
        let x = Tensor::new(&[-1e6f64, 0.0, 1e6], &Device::Cpu).unwrap();
        for v in ops::to_f64_vec(&s.forward(&x).unwrap()).unwrap() {
            assert!((0.0..=1.0).contains(&v) && v.is_finite());
        }
        for p in s.params("s") {
            p.var.set(&p.var.zeros_like().unwrap()).unwrap();
        }
        assert_eq!(ops::to_f64_vec(&s.forward(&x).unwrap()).unwrap(), vec![0.5; 3]);
    }

    #[test]
    fn generator_counts_follow_the_base_metric() {
        assert_eq!(EnhancedMetric::new(MetricId::Mae, 0).unwrap().generators.len(), 1);
        assert_eq!(EnhancedMetric::new(MetricId::Lpips, 0).unwrap().generators.len(), 5);
        let e = EnhancedMetric::new(MetricId::Dists, 0).unwrap();
        assert_eq!(e.generators.len(), 6);
        assert_eq!(e.generators[0].channels(), 3);
    }

    #[test]
    fn checkpoint_roundtrip_restores_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ckpt");
        let a = EnhancedMetric::new(MetricId::Ssim, 11).unwrap();
        a.save(&path, "d", serde_json::Value::Null).unwrap();
        let b = EnhancedMetric::load(&path).unwrap();
        for (p, q) in a.params().iter().zip(b.params()) {
            assert_eq!(p.name, q.name);
            assert_eq!(
                ops::to_f64_vec(p.var.as_tensor()).unwrap(),
                ops::to_f64_vec(q.var.as_tensor()).unwrap()
            );
        }
    }
}
