//! Full-reference metrics. Every metric is written against NCHW tensors so
//! that it can act as a differentiable training objective, and returns a
//! per-sample score plus an optional per-pixel error map.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::deep::DeepMetrics;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::ops;

pub mod flip;
pub mod pixel;
pub mod ssim;

pub use flip::{flip, DEFAULT_PPD};
pub use pixel::{mae, psnr, PSNR_CAP_DB};
pub use ssim::{ms_ssim, ms_ssim_with, ssim, MS_SSIM_WEIGHTS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricId {
    Mae,
    Psnr,
    Ssim,
    MsSsim,
    Flip,
    Vgg,
    Lpips,
    Dists,
}

impl MetricId {
    pub const ALL: [MetricId; 8] = [
        MetricId::Mae,
        MetricId::Psnr,
        MetricId::Ssim,
        MetricId::MsSsim,
        MetricId::Flip,
        MetricId::Vgg,
        MetricId::Lpips,
        MetricId::Dists,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricId::Mae => "mae",
            MetricId::Psnr => "psnr",
            MetricId::Ssim => "ssim",
            MetricId::MsSsim => "ms-ssim",
            MetricId::Flip => "flip",
            MetricId::Vgg => "vgg",
            MetricId::Lpips => "lpips",
            MetricId::Dists => "dists",
        }
    }

    pub fn orientation(self) -> Orientation {
        match self {
            MetricId::Psnr | MetricId::Ssim | MetricId::MsSsim => Orientation::HigherBetter,
            _ => Orientation::LowerBetter,
        }
    }

    /// Feature-space metrics compare VGG activations rather than pixels.
    pub fn is_feature_space(self) -> bool {
        matches!(self, MetricId::Vgg | MetricId::Lpips | MetricId::Dists)
    }

    /// Error maps of these metrics are unbounded and get squashed by a
    /// sigmoid before rendering.
    pub fn is_unbounded(self) -> bool {
        matches!(self, MetricId::Mae | MetricId::Vgg | MetricId::Psnr | MetricId::Lpips)
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        MetricId::ALL
            .into_iter()
            .find(|m| m.as_str() == key || (key == "msssim" && *m == MetricId::MsSsim))
            .ok_or_else(|| {
                Error::InvalidInput(format!(
                    "unknown metric '{s}' (expected one of mae, psnr, ssim, ms-ssim, flip, vgg, lpips, dists)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    LowerBetter,
    HigherBetter,
}

/// Differentiable metric output for a batch.
#[derive(Clone, Debug)]
pub struct MetricOutput {
    /// Shape `(N,)`.
    pub score: Tensor,
    /// Shape `(N, 1, H, W)`, lower = less error.
    pub error_map: Option<Tensor>,
}

/// A single-pair metric evaluation detached from the autodiff graph.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricResult {
    pub metric: String,
    pub score: f64,
    pub orientation: Orientation,
    #[serde(skip)]
    pub error_map: Option<ErrorMap>,
}

impl MetricResult {
    /// Takes the first sample of a batch output.
    pub fn from_output(metric: impl Into<String>, orientation: Orientation, out: &MetricOutput) -> Result<Self> {
        let score = ops::to_f64_vec(&out.score)?
            .first()
            .copied()
            .ok_or_else(|| Error::InvalidInput("empty metric batch".into()))?;
        let error_map = out
            .error_map
            .as_ref()
            .map(|m| ErrorMap::from_tensor(&m.get(0)?))
            .transpose()?;
        Ok(Self {
            metric: metric.into(),
            score,
            orientation,
            error_map,
        })
    }
}

/// A single-channel `H x W` map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ErrorMap {
    /// Accepts `(1, H, W)` or `(H, W)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = if t.rank() == 3 { t.squeeze(0)? } else { t.clone() };
        let (h, w) = t.dims2()?;
        let data = t
            .to_dtype(candle_core::DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }
}

/// Everything a metric evaluation may need beyond the two images: the
/// viewing distance for FLIP and the frozen backbone for feature metrics.
#[derive(Clone)]
pub struct MetricContext {
    pub ppd: f64,
    pub deep: Option<Arc<DeepMetrics>>,
}

impl Default for MetricContext {
    fn default() -> Self {
        Self {
            ppd: DEFAULT_PPD,
            deep: None,
        }
    }
}

impl MetricContext {
    pub fn with_deep(deep: Arc<DeepMetrics>) -> Self {
        Self {
            deep: Some(deep),
            ..Self::default()
        }
    }

    pub fn deep(&self) -> Result<&DeepMetrics> {
        self.deep
            .as_deref()
            .ok_or_else(|| Error::Weights("feature-space metrics need backbone weights (see --weights)".into()))
    }

    /// Differentiable batch evaluation on NCHW tensors in `[0, 1]`.
    pub fn compute(&self, id: MetricId, r: &Tensor, d: &Tensor) -> Result<MetricOutput> {
        match id {
            MetricId::Mae => mae(r, d),
            MetricId::Psnr => psnr(r, d),
            MetricId::Ssim => ssim(r, d),
            MetricId::MsSsim => ms_ssim(r, d),
            MetricId::Flip => flip(r, d, self.ppd),
            MetricId::Vgg | MetricId::Lpips | MetricId::Dists => self.deep()?.compute(id, r, d, None),
        }
    }

    pub fn evaluate(&self, id: MetricId, r: &Image, d: &Image) -> Result<MetricResult> {
        let out = self.compute(id, &r.batch()?, &d.batch()?)?;
        MetricResult::from_output(id.as_str(), id.orientation(), &out)
    }
}

pub(crate) fn check_pair(r: &Tensor, d: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if r.dims() != d.dims() {
        return Err(Error::ShapeMismatch(format!(
            "reference {:?} vs distorted {:?}",
            r.dims(),
            d.dims()
        )));
    }
    Ok(r.dims4()?)
}
