//! Single- and multi-scale SSIM on Rec.709 luma.

use candle_core::Tensor;

use super::{check_pair, MetricOutput};
use crate::error::{Error, Result};
use crate::ops::{self, Border};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 1e-4;
pub const C2: f64 = 9e-4;
pub const LUMA_709: [f64; 3] = [0.2126, 0.7152, 0.0722];
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Smallest side for which all five MS-SSIM scales still fit the window.
pub const MS_SSIM_MIN_SIDE: usize = WINDOW << 4;

// keeps negative contrast-structure terms from producing NaN under powf
const CS_FLOOR: f64 = 1e-6;

/// Local SSIM statistics over valid 11x11 windows.
pub struct SsimMaps {
    /// `(N, 1, H - 10, W - 10)`
    pub ssim: Tensor,
    /// Contrast-structure term, same shape as `ssim`.
    pub cs: Tensor,
}

pub fn luma(x: &Tensor) -> Result<Tensor> {
    ops::channel_dot(x, &LUMA_709)
}

/// SSIM statistics for single-channel inputs `(N, 1, H, W)`.
pub fn ssim_maps(x: &Tensor, y: &Tensor) -> Result<SsimMaps> {
    let g = ops::gaussian_taps(WINDOW, SIGMA);
    let blur = |t: &Tensor| ops::separable_filter(t, &g, &g, Border::Valid);
    let mu_x = blur(x)?;
    let mu_y = blur(y)?;
    let mu_xx = mu_x.sqr()?;
    let mu_yy = mu_y.sqr()?;
    let mu_xy = (&mu_x * &mu_y)?;
    let s_xx = (blur(&x.sqr()?)? - &mu_xx)?;
    let s_yy = (blur(&y.sqr()?)? - &mu_yy)?;
    let s_xy = (blur(&(x * y)?)? - &mu_xy)?;

    let cs = (s_xy.affine(2.0, C2)? / (&s_xx + &s_yy)?.affine(1.0, C2)?)?;
    let lum = (mu_xy.affine(2.0, C1)? / (&mu_xx + &mu_yy)?.affine(1.0, C1)?)?;
    Ok(SsimMaps {
        ssim: (lum * &cs)?,
        cs,
    })
}

fn check_window(h: usize, w: usize, min: usize, what: &str) -> Result<()> {
    if h < min || w < min {
        return Err(Error::InvalidInput(format!(
            "{what} needs both sides >= {min}, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Turns a valid-window SSIM map into an input-sized `1 - SSIM` error map.
fn error_map_from(ssim: &Tensor) -> Result<Tensor> {
    let r = WINDOW / 2;
    let e = ssim.affine(-1.0, 1.0)?;
    Ok(e.pad_with_same(2, r, r)?.pad_with_same(3, r, r)?)
}

pub fn ssim(r: &Tensor, d: &Tensor) -> Result<MetricOutput> {
    let (_, _, h, w) = check_pair(r, d)?;
    check_window(h, w, WINDOW, "SSIM")?;
    let maps = ssim_maps(&luma(r)?, &luma(d)?)?;
    Ok(MetricOutput {
        score: ops::mean_per_sample(&maps.ssim)?,
        error_map: Some(error_map_from(&maps.ssim)?),
    })
}

pub fn ms_ssim(r: &Tensor, d: &Tensor) -> Result<MetricOutput> {
    ms_ssim_with(r, d, None)
}

/// Per-scale input transform, used to mask each scale before comparison.
pub type ScaleHook<'a> = &'a dyn Fn(&Tensor, &Tensor) -> Result<(Tensor, Tensor)>;

/// Five-scale MS-SSIM with 2x2 mean-pool downsampling. When `hook` is given
/// it is applied to the RGB pair at every scale before luma conversion.
pub fn ms_ssim_with(r: &Tensor, d: &Tensor, hook: Option<ScaleHook<'_>>) -> Result<MetricOutput> {
    let (_, _, h, w) = check_pair(r, d)?;
    check_window(h, w, MS_SSIM_MIN_SIDE, "MS-SSIM")?;

    let mut r = r.clone();
    let mut d = d.clone();
    let mut score: Option<Tensor> = None;
    let mut error_map = None;
    for (scale, &weight) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let (rs, ds) = match hook {
            Some(f) => f(&r, &d)?,
            None => (r.clone(), d.clone()),
        };
        let maps = ssim_maps(&luma(&rs)?, &luma(&ds)?)?;
        if scale == 0 {
            error_map = Some(error_map_from(&maps.ssim)?);
        }
        let last = scale + 1 == MS_SSIM_WEIGHTS.len();
        let term = if last { &maps.ssim } else { &maps.cs };
        let factor = ops::mean_per_sample(term)?.maximum(CS_FLOOR)?.powf(weight)?;
        score = Some(match score {
            Some(s) => (s * factor)?,
            None => factor,
        });
        if !last {
            r = ops::crop_even(&r)?.avg_pool2d(2)?;
            d = ops::crop_even(&d)?.avg_pool2d(2)?;
        }
    }
    Ok(MetricOutput {
        score: score.expect("five scales"),
        error_map,
    })
}
