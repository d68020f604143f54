//! Feature-space metrics on a frozen VGG16 trunk: VGG-L1, LPIPS and DISTS.

use std::path::Path;

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::masking::apply_mask;
use crate::metrics::{check_pair, MetricId, MetricOutput};
use crate::ops;

pub mod dists;
pub mod lpips;
pub mod vgg;
pub mod weights;

pub use dists::DistsWeights;
pub use lpips::LpipsHeads;
pub use vgg::{FeaturePyramid, Pooling, Vgg16, LAYER_CHANNELS, LAYER_NAMES};
pub use weights::{InputNorm, WeightStore};

/// Receives `(layer index, reference features, distorted features)` and
/// returns a `(N, 1, Hl, Wl)` mask for that layer.
pub type LayerHook<'a> = &'a dyn Fn(usize, &Tensor, &Tensor) -> Result<Tensor>;

/// The frozen backbone plus the metric-specific heads that were found.
pub struct DeepMetrics {
    pub vgg: Vgg16,
    pub lpips: Option<LpipsHeads>,
    pub dists: Option<DistsWeights>,
}

impl DeepMetrics {
    /// Builds from a loaded store. LPIPS/DISTS heads are optional at this
    /// point; asking for a metric whose weights are absent is an error unless
    /// `dists_fallback` permits the equal-weight DISTS variant.
    pub fn from_store(store: &WeightStore, dists_fallback: bool) -> Result<Self> {
        let vgg = Vgg16::from_store(store)?;
        let lpips = if store.contains(&lpips::head_name(0)) {
            Some(LpipsHeads::from_store(store)?)
        } else {
            None
        };
        let dists = if store.contains("dists.alpha") {
            Some(DistsWeights::from_store(store)?)
        } else if dists_fallback {
            log::warn!("DISTS weights absent; using equal channel weights");
            Some(DistsWeights::equal())
        } else {
            None
        };
        Ok(Self { vgg, lpips, dists })
    }

    pub fn load(manifest: impl AsRef<Path>, dists_fallback: bool) -> Result<Self> {
        Self::from_store(&WeightStore::load(manifest)?, dists_fallback)
    }

    /// Seeded random trunk with uniform LPIPS heads and equal DISTS weights.
    /// Scores are not perceptually meaningful; shapes and gradients are.
    pub fn random(seed: u64) -> Result<Self> {
        Ok(Self {
            vgg: Vgg16::random(seed)?,
            lpips: Some(LpipsHeads::uniform()?),
            dists: Some(DistsWeights::equal()),
        })
    }

    /// Names of the stages a metric compares, in order.
    pub fn layer_names(metric: MetricId) -> Vec<String> {
        let mut names: Vec<String> = LAYER_NAMES.iter().map(|s| s.to_string()).collect();
        if metric == MetricId::Dists {
            names.insert(0, "input".into());
        }
        names
    }

    pub fn layer_channels(metric: MetricId) -> Vec<usize> {
        if metric == MetricId::Dists {
            dists::STAGE_CHANNELS.to_vec()
        } else {
            LAYER_CHANNELS.to_vec()
        }
    }

    /// ImageNet-normalised max-pooled pyramid of a `[0, 1]` NCHW batch.
    pub fn extract_features(&self, x: &Tensor) -> Result<FeaturePyramid> {
        self.vgg.forward(&self.vgg.normalize(x)?, Pooling::Max)
    }

    /// The stage tensors a given metric compares.
    pub fn features(&self, metric: MetricId, x: &Tensor) -> Result<Vec<Tensor>> {
        match metric {
            MetricId::Vgg => Ok(self.extract_features(x)?.tensors()),
            MetricId::Lpips => Ok(self.vgg.forward(&lpips::scale_input(x)?, Pooling::Max)?.tensors()),
            MetricId::Dists => {
                let mut t = self.vgg.forward(&self.vgg.normalize(x)?, Pooling::L2)?.tensors();
                t.insert(0, x.clone());
                Ok(t)
            }
            m => Err(Error::InvalidInput(format!("{m} is not a feature-space metric"))),
        }
    }

    pub fn compute(&self, metric: MetricId, r: &Tensor, d: &Tensor, hook: Option<LayerHook<'_>>) -> Result<MetricOutput> {
        let (_, _, h, w) = check_pair(r, d)?;
        let fr = self.features(metric, r)?;
        let fd = self.features(metric, d)?;
        let masks = match hook {
            Some(f) => Some(
                fr.iter()
                    .zip(&fd)
                    .enumerate()
                    .map(|(l, (a, b))| f(l, a, b))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        match metric {
            MetricId::Vgg => vgg_l1_from_features(&fr, &fd, masks.as_deref()),
            MetricId::Lpips => {
                let heads = self
                    .lpips
                    .as_ref()
                    .ok_or_else(|| Error::Weights("LPIPS linear weights not loaded".into()))?;
                lpips::lpips_from_features(&fr, &fd, heads, masks.as_deref(), (h, w))
            }
            MetricId::Dists => {
                let wts = self.dists.as_ref().ok_or_else(|| {
                    Error::Weights("DISTS weights not loaded (pass the equal-weight fallback flag to use it)".into())
                })?;
                dists::dists_from_features(&fr, &fd, wts, masks.as_deref())
            }
            m => Err(Error::InvalidInput(format!("{m} is not a feature-space metric"))),
        }
    }

    pub fn vgg_l1(&self, r: &Tensor, d: &Tensor) -> Result<MetricOutput> {
        self.compute(MetricId::Vgg, r, d, None)
    }

    pub fn lpips(&self, r: &Tensor, d: &Tensor) -> Result<MetricOutput> {
        self.compute(MetricId::Lpips, r, d, None)
    }

    pub fn dists(&self, r: &Tensor, d: &Tensor) -> Result<MetricOutput> {
        self.compute(MetricId::Dists, r, d, None)
    }
}

/// Sum over layers of the mean absolute feature difference. The error map
/// is the channel-mean difference of the first layer.
pub fn vgg_l1_from_features(fr: &[Tensor], fd: &[Tensor], masks: Option<&[Tensor]>) -> Result<MetricOutput> {
    let mut score: Option<Tensor> = None;
    let mut first_map = None;
    for (l, (a, b)) in fr.iter().zip(fd).enumerate() {
        let diff = match masks {
            Some(m) => {
                let (ma, mb) = apply_mask(&m[l], a, b)?;
                (ma - mb)?
            }
            None => (a - b)?,
        }
        .abs()?;
        let s = ops::mean_per_sample(&diff)?;
        score = Some(match score {
            Some(acc) => (acc + s)?,
            None => s,
        });
        if l == 0 {
            first_map = Some(diff.mean_keepdim(1)?);
        }
    }
    Ok(MetricOutput {
        score: score.ok_or_else(|| Error::InvalidInput("empty feature pyramid".into()))?,
        error_map: first_map,
    })
}
