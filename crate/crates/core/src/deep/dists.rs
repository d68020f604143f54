//! DISTS: SSIM-style comparison of global feature statistics. Per channel,
//! a "texture" term compares means and a "structure" term compares
//! variances and covariance; both are mixed by learned weights.

use candle_core::Tensor;

use super::weights::WeightStore;
use crate::error::{Error, Result};
use crate::masking::apply_mask;
use crate::metrics::MetricOutput;
use crate::ops;

/// Channel counts of the input stage followed by the five VGG taps.
pub const STAGE_CHANNELS: [usize; 6] = [3, 64, 128, 256, 512, 512];
const C1: f64 = 1e-6;
const C2: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct DistsWeights {
    /// Mean-term weights, one per channel across all stages (1475 total).
    pub alpha: Vec<f64>,
    /// Correlation-term weights, same layout.
    pub beta: Vec<f64>,
    /// True when these are the equal-weight fallback rather than trained values.
    pub fallback: bool,
}

impl DistsWeights {
    pub fn total_channels() -> usize {
        STAGE_CHANNELS.iter().sum()
    }

    pub fn from_store(store: &WeightStore) -> Result<Self> {
        let read = |name: &str| -> Result<Vec<f64>> {
            let t = store
                .get(name)
                .map_err(|_| Error::Weights(format!("missing DISTS weights '{name}'")))?;
            let v = ops::to_f64_vec(t)?;
            if v.len() != Self::total_channels() {
                return Err(Error::Weights(format!(
                    "{name}: expected {} values, found {}",
                    Self::total_channels(),
                    v.len()
                )));
            }
            Ok(v)
        };
        Ok(Self {
            alpha: read("dists.alpha")?,
            beta: read("dists.beta")?,
            fallback: false,
        })
    }

    pub fn equal() -> Self {
        let n = Self::total_channels();
        Self {
            alpha: vec![1.0; n],
            beta: vec![1.0; n],
            fallback: true,
        }
    }
}

/// Global per-channel statistics of one stage, each `(N, C, 1, 1)`.
pub struct StageStats {
    pub mean_x: Tensor,
    pub mean_y: Tensor,
    pub var_x: Tensor,
    pub var_y: Tensor,
    pub cov: Tensor,
}

pub fn stage_stats(x: &Tensor, y: &Tensor) -> Result<StageStats> {
    let mean_x = x.mean_keepdim((2, 3))?;
    let mean_y = y.mean_keepdim((2, 3))?;
    let var_x = x.broadcast_sub(&mean_x)?.sqr()?.mean_keepdim((2, 3))?;
    let var_y = y.broadcast_sub(&mean_y)?.sqr()?.mean_keepdim((2, 3))?;
    let cov = ((x * y)?.mean_keepdim((2, 3))? - (&mean_x * &mean_y)?)?;
    Ok(StageStats {
        mean_x,
        mean_y,
        var_x,
        var_y,
        cov,
    })
}

/// DISTS distance over `[input, relu1_2, ..., relu5_3]` stages.
pub fn dists_from_features(
    fr: &[Tensor],
    fd: &[Tensor],
    weights: &DistsWeights,
    masks: Option<&[Tensor]>,
) -> Result<MetricOutput> {
    if fr.len() != STAGE_CHANNELS.len() || fd.len() != STAGE_CHANNELS.len() {
        return Err(Error::InvalidInput(format!(
            "DISTS expects {} stages, got {} and {}",
            STAGE_CHANNELS.len(),
            fr.len(),
            fd.len()
        )));
    }
    let w_sum: f64 = weights.alpha.iter().sum::<f64>() + weights.beta.iter().sum::<f64>();
    let mut offset = 0;
    let mut total: Option<Tensor> = None;
    for (k, (x, y)) in fr.iter().zip(fd).enumerate() {
        let c = STAGE_CHANNELS[k];
        let (x, y) = match masks {
            Some(m) => apply_mask(&m[k], x, y)?,
            None => (x.clone(), y.clone()),
        };
        let st = stage_stats(&x, &y)?;
        let s1 = ((&st.mean_x * &st.mean_y)?.affine(2.0, C1)?
            / (st.mean_x.sqr()? + st.mean_y.sqr()?)?.affine(1.0, C1)?)?;
        let s2 = (st.cov.affine(2.0, C2)? / (&st.var_x + &st.var_y)?.affine(1.0, C2)?)?;
        let a: Vec<f64> = weights.alpha[offset..offset + c].iter().map(|v| v / w_sum).collect();
        let b: Vec<f64> = weights.beta[offset..offset + c].iter().map(|v| v / w_sum).collect();
        let a = ops::const_like(&a, &[1, c, 1, 1], &x)?;
        let b = ops::const_like(&b, &[1, c, 1, 1], &x)?;
        let term = (s1.broadcast_mul(&a)? + s2.broadcast_mul(&b)?)?.flatten_from(1)?.sum(1)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
        offset += c;
    }
    let score = total.expect("six stages").affine(-1.0, 1.0)?;
    Ok(MetricOutput {
        score,
        error_map: None,
    })
}
