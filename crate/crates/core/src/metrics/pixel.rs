use candle_core::Tensor;

use super::{check_pair, MetricOutput};
use crate::error::Result;
use crate::ops;

/// Value reported for identical inputs, where PSNR diverges.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Mean absolute error over pixels and channels; map is the channel mean.
pub fn mae(r: &Tensor, d: &Tensor) -> Result<MetricOutput> {
    check_pair(r, d)?;
    let diff = (r - d)?.abs()?;
    Ok(MetricOutput {
        score: ops::mean_per_sample(&diff)?,
        error_map: Some(diff.mean_keepdim(1)?),
    })
}

/// PSNR with unit peak, capped at [`PSNR_CAP_DB`]. The map holds the
/// per-pixel squared error averaged over channels.
pub fn psnr(r: &Tensor, d: &Tensor) -> Result<MetricOutput> {
    check_pair(r, d)?;
    let sq = (r - d)?.sqr()?;
    let mse = ops::mean_per_sample(&sq)?;
    let pos = mse.gt(0.0)?;
    let safe = pos.where_cond(&mse, &mse.ones_like()?)?;
    let db = safe.log()?.affine(-10.0 / std::f64::consts::LN_10, 0.0)?;
    let cap = db.ones_like()?.affine(PSNR_CAP_DB, 0.0)?;
    let score = pos.where_cond(&db, &cap)?.minimum(&cap)?;
    Ok(MetricOutput {
        score,
        error_map: Some(sq.mean_keepdim(1)?),
    })
}
