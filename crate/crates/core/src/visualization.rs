//! Error-map and mask rendering.
//!
//! Error maps are coloured with a fixed 256-entry inferno table (dark = low
//! error); masks are rendered as grayscale (0 = black, 1 = white). Each PNG
//! gets a JSON sidecar with the normalization constants so the render can be
//! reproduced or inverted.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use image::{GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::masking::EnhancedMetric;
use crate::metrics::{ErrorMap, MetricContext, MetricId, MetricResult};

pub const CONTRAST_FACTORS: [f64; 3] = [0.5, 1.0, 2.0];

/// Value the 95th-percentile error is mapped to by [`calibrate_slope`].
pub const P95_TARGET: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Colormap {
    Inferno,
    Gray,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Normalization {
    /// Values are clamped to [0, 1].
    None,
    /// `2 sigmoid(k x) - 1`, for non-negative unbounded maps.
    Sigmoid { k: f64 },
}

impl Normalization {
    pub fn apply(&self, x: f64) -> f64 {
        let x = if x.is_nan() { 0.0 } else { x };
        match *self {
            Normalization::None => x.clamp(0.0, 1.0),
            // 2 sigma(t) - 1 == tanh(t / 2)
            Normalization::Sigmoid { k } => (0.5 * k * x).tanh().clamp(0.0, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderSpec {
    pub colormap: Colormap,
    pub normalization: Normalization,
    pub output: PathBuf,
}

impl RenderSpec {
    pub fn new(colormap: Colormap, normalization: Normalization, output: impl Into<PathBuf>) -> Self {
        Self {
            colormap,
            normalization,
            output: output.into(),
        }
    }

    /// The default spec for a metric's error map: unbounded maps go through
    /// the sigmoid with slope `k`, bounded ones are used as-is.
    pub fn for_metric(metric: MetricId, k: f64, output: impl Into<PathBuf>) -> Self {
        let normalization = if is_unbounded(metric) {
            Normalization::Sigmoid { k }
        } else {
            Normalization::None
        };
        Self::new(Colormap::Inferno, normalization, output)
    }

    pub fn validate(&self) -> Result<()> {
        if let Normalization::Sigmoid { k } = self.normalization {
            if !(k.is_finite() && k > 0.0) {
                return Err(Error::InvalidInput(format!("sigmoid slope must be positive, got {k}")));
            }
        }
        Ok(())
    }

    pub fn sidecar_path(&self) -> PathBuf {
        self.output.with_extension("json")
    }
}

/// Metrics whose error maps are not confined to [0, 1].
pub fn is_unbounded(metric: MetricId) -> bool {
    matches!(metric, MetricId::Mae | MetricId::Psnr | MetricId::Vgg | MetricId::Lpips)
}

/// Slope placing the 95th percentile of `values` at [`P95_TARGET`].
pub fn calibrate_slope<'a>(maps: impl IntoIterator<Item = &'a ErrorMap>) -> Result<f64> {
    let mut all: Vec<f32> = maps
        .into_iter()
        .flat_map(|m| m.data.iter().copied())
        .filter(|v| v.is_finite())
        .collect();
    if all.is_empty() {
        return Err(Error::InvalidInput("no finite error values to calibrate on".into()));
    }
    all.sort_by(f32::total_cmp);
    let idx = ((all.len() - 1) as f64 * 0.95).round() as usize;
    let p95 = all[idx] as f64;
    if p95 <= 0.0 {
        return Err(Error::InvalidInput(
            "95th-percentile error is zero; cannot calibrate the sigmoid slope".into(),
        ));
    }
    // 2 sigma(k p) - 1 = t  <=>  k p = ln((1 + t) / (1 - t))
    Ok(((1.0 + P95_TARGET) / (1.0 - P95_TARGET)).ln() / p95)
}

fn inferno() -> &'static [[u8; 3]; 256] {
    static TABLE: OnceLock<[[u8; 3]; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [[0u8; 3]; 256];
        let rows = include_str!("../data/inferno.txt")
            .lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let mut n = 0;
        for (slot, line) in table.iter_mut().zip(rows) {
            let v = u32::from_str_radix(line.trim(), 16).expect("bad colormap entry");
            *slot = [(v >> 16) as u8, (v >> 8) as u8, v as u8];
            n += 1;
        }
        assert_eq!(n, 256, "colormap table must have 256 entries");
        table
    })
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Colour for a normalized value in [0, 1].
pub fn colorize(colormap: Colormap, v: f64) -> [u8; 3] {
    let q = quantize(v);
    match colormap {
        Colormap::Inferno => inferno()[q as usize],
        Colormap::Gray => [q; 3],
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RenderInfo {
    pub image: PathBuf,
    pub width: usize,
    pub height: usize,
    pub colormap: Colormap,
    pub normalization: Normalization,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contrast_factor: Option<f64>,
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn save(img: impl FnOnce(&Path) -> image::ImageResult<()>, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    img(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write_sidecar(spec: &RenderSpec, info: &RenderInfo) -> Result<()> {
    let path = spec.sidecar_path();
    let text = serde_json::to_string_pretty(info)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Writes `map` through `spec` without a sidecar.
pub fn render_map(map: &ErrorMap, spec: &RenderSpec) -> Result<()> {
    spec.validate()?;
    let (w, h) = (map.width as u32, map.height as u32);
    match spec.colormap {
        Colormap::Gray => {
            let data = map
                .data
                .iter()
                .map(|&v| quantize(spec.normalization.apply(v as f64)))
                .collect();
            let img = GrayImage::from_raw(w, h, data)
                .ok_or_else(|| Error::InvalidInput("map buffer size mismatch".into()))?;
            save(|p| img.save_with_format(p, ImageFormat::Png), &spec.output)
        }
        cm => {
            let data = map
                .data
                .iter()
                .flat_map(|&v| colorize(cm, spec.normalization.apply(v as f64)))
                .collect();
            let img = RgbImage::from_raw(w, h, data)
                .ok_or_else(|| Error::InvalidInput("map buffer size mismatch".into()))?;
            save(|p| img.save_with_format(p, ImageFormat::Png), &spec.output)
        }
    }
}

/// Renders a metric's error map (darker = lower error) plus a JSON sidecar.
pub fn render_error_map(result: &MetricResult, spec: &RenderSpec) -> Result<RenderInfo> {
    let map = result.error_map.as_ref().ok_or_else(|| {
        Error::InvalidInput(format!("metric '{}' does not produce an error map", result.metric))
    })?;
    render_map(map, spec)?;
    let info = RenderInfo {
        image: spec.output.clone(),
        width: map.width,
        height: map.height,
        colormap: spec.colormap,
        normalization: spec.normalization,
        metric: Some(result.metric.clone()),
        score: Some(result.score),
        contrast_factor: None,
    };
    write_sidecar(spec, &info)?;
    Ok(info)
}

/// Grayscale mask render: 0 -> black, 1 -> white. The spec's colormap and
/// normalization are overridden to keep mask renders comparable.
pub fn render_mask(mask: &ErrorMap, spec: &RenderSpec) -> Result<RenderInfo> {
    let spec = RenderSpec::new(Colormap::Gray, Normalization::None, spec.output.clone());
    render_map(mask, &spec)?;
    let info = RenderInfo {
        image: spec.output.clone(),
        width: mask.width,
        height: mask.height,
        colormap: spec.colormap,
        normalization: spec.normalization,
        metric: None,
        score: None,
        contrast_factor: None,
    };
    write_sidecar(&spec, &info)?;
    Ok(info)
}

/// The first (input-resolution) mask of an enhanced metric for one pair.
pub fn primary_mask(ctx: &MetricContext, metric: &EnhancedMetric, r: &Image, d: &Image) -> Result<ErrorMap> {
    let masks = metric.masks(ctx, &r.batch()?, &d.batch()?)?;
    let (_, m) = masks
        .first()
        .ok_or_else(|| Error::InvalidInput("enhanced metric has no mask generators".into()))?;
    m.to_map()
}

#[derive(Clone, Debug)]
pub struct SweepItem {
    pub factor: f64,
    pub mask: ErrorMap,
    pub info: RenderInfo,
}

/// Masks for contrast-scaled copies of the pair (scaled about mid-grey and
/// clipped), written as `<stem>_x<factor>.png` under `out_dir`.
pub fn contrast_sweep(
    ctx: &MetricContext,
    metric: &EnhancedMetric,
    r: &Image,
    d: &Image,
    factors: &[f64],
    out_dir: &Path,
    stem: &str,
) -> Result<Vec<SweepItem>> {
    if factors.is_empty() || factors.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(Error::InvalidInput(format!("contrast factors must be positive, got {factors:?}")));
    }
    let mut out = Vec::with_capacity(factors.len());
    for &factor in factors {
        let (rs, ds) = if factor == 1.0 {
            (r.clone(), d.clone())
        } else {
            (r.scale_contrast(factor)?, d.scale_contrast(factor)?)
        };
        let mask = primary_mask(ctx, metric, &rs, &ds)?;
        let path = out_dir.join(format!("{stem}_x{factor}.png"));
        let spec = RenderSpec::new(Colormap::Gray, Normalization::None, path);
        let mut info = render_mask(&mask, &spec)?;
        info.contrast_factor = Some(factor);
        write_sidecar(&spec, &info)?;
        out.push(SweepItem { factor, mask, info });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> ErrorMap {
        ErrorMap {
            height: h,
            width: w,
            data: (0..h * w).map(|i| f(i / w, i % w)).collect(),
        }
    }

    fn luma(c: [u8; 3]) -> f64 {
        0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64
    }

    #[test]
    fn sigmoid_normalization_closed_form() {
        let k = 2.0;
        let n = Normalization::Sigmoid { k };
        assert_eq!(n.apply(0.0), 0.0);
        assert!((n.apply(3f64.ln() / k) - 0.5).abs() < 1e-12);
        assert!(n.apply(1e9) <= 1.0);
    }

    #[test]
    fn colormap_is_dark_to_bright() {
        let lum: Vec<f64> = (0..=255).map(|i| luma(colorize(Colormap::Inferno, i as f64 / 255.0))).collect();
        assert!(lum.windows(2).all(|w| w[1] >= w[0]), "inferno luma not monotone");
        assert!(lum[0] < 5.0 && lum[255] > 200.0);
    }

    #[test]
    fn slope_maps_p95_to_target() {
        let m = map(10, 10, |y, x| (y * 10 + x) as f32 / 100.0);
        let k = calibrate_slope([&m]).unwrap();
        let p95 = 0.94f64; // index round(99 * 0.95) = 94
        assert!((Normalization::Sigmoid { k }.apply(p95) - P95_TARGET).abs() < 1e-9);
        assert!(calibrate_slope([&map(4, 4, |_, _| 0.0)]).is_err());
    }

    #[test]
    fn rejects_bad_slope_and_missing_map() {
        let dir = tempfile::tempdir().unwrap();
        let spec = RenderSpec::new(Colormap::Inferno, Normalization::Sigmoid { k: 0.0 }, dir.path().join("a.png"));
        assert!(spec.validate().is_err());
        let r = MetricResult {
            metric: "dists".into(),
            score: 0.1,
            orientation: crate::metrics::Orientation::LowerBetter,
            error_map: None,
        };
        let spec = RenderSpec::for_metric(MetricId::Dists, 1.0, dir.path().join("b.png"));
        assert!(render_error_map(&r, &spec).is_err());
    }

    #[test]
    fn zero_map_renders_darkest_and_ramp_is_monotone() {
        let dir = tempfile::tempdir().unwrap();
        let r = MetricResult {
            metric: "mae".into(),
            score: 0.0,
            orientation: crate::metrics::Orientation::LowerBetter,
            error_map: Some(map(8, 8, |_, _| 0.0)),
        };
        let spec = RenderSpec::for_metric(MetricId::Mae, 5.0, dir.path().join("zero.png"));
        render_error_map(&r, &spec).unwrap();
        let img = image::open(&spec.output).unwrap().to_rgb8();
        let darkest = colorize(Colormap::Inferno, 0.0);
        assert!(img.pixels().all(|p| p.0 == darkest));
        assert!(spec.sidecar_path().exists());

        let ramp = map(1, 64, |_, x| x as f32 / 16.0);
        let spec = RenderSpec::for_metric(MetricId::Mae, 1.0, dir.path().join("ramp.png"));
        render_map(&ramp, &spec).unwrap();
        let img = image::open(&spec.output).unwrap().to_rgb8();
        let lum: Vec<f64> = img.pixels().map(|p| luma(p.0)).collect();
        assert!(lum.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn mask_render_is_gray_and_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let m = map(6, 5, |_, _| 0.5);
        let spec = RenderSpec::new(Colormap::Inferno, Normalization::None, dir.path().join("m.png"));
        render_mask(&m, &spec).unwrap();
        let first = std::fs::read(&spec.output).unwrap();
        let img = image::open(&spec.output).unwrap().to_luma8();
        assert!(img.pixels().all(|p| p.0[0] == 128));
        render_mask(&m, &spec).unwrap();
        assert_eq!(first, std::fs::read(&spec.output).unwrap());
    }

    #[test]
    fn sweep_writes_one_file_per_factor() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = MetricContext::default();
        let em = EnhancedMetric::new(MetricId::Mae, 3).unwrap();
        let s = crate::data::synthetic::noise_stimulus(32, 1).unwrap();
        let items = contrast_sweep(&ctx, &em, &s.reference, &s.distorted, &CONTRAST_FACTORS, dir.path(), "s").unwrap();
        assert_eq!(items.len(), 3);
        let direct = primary_mask(&ctx, &em, &s.reference, &s.distorted).unwrap();
        assert_eq!(items[1].mask, direct);
        let pngs = std::fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
            .count();
        assert_eq!(pngs, 3);
    }
}
