//! LPIPS: channel-normalised VGG activations, squared difference weighted by
//! learned per-channel linear heads, averaged spatially and summed over layers.

use candle_core::Tensor;

use super::vgg::LAYER_CHANNELS;
use super::weights::WeightStore;
use crate::error::{Error, Result};
use crate::masking::apply_mask;
use crate::metrics::MetricOutput;
use crate::ops;

/// Input scaling of the LPIPS release, applied to `[-1, 1]` input.
pub const SHIFT: [f64; 3] = [-0.030, -0.088, -0.188];
pub const SCALE: [f64; 3] = [0.458, 0.448, 0.450];
const EPS: f64 = 1e-10;

/// Per-layer non-negative channel weights, each `(1, C, 1, 1)`.
#[derive(Clone, Debug)]
pub struct LpipsHeads {
    pub heads: Vec<Tensor>,
}

pub fn head_name(layer: usize) -> String {
    format!("lpips.lin{layer}")
}

impl LpipsHeads {
    pub fn from_store(store: &WeightStore) -> Result<Self> {
        let mut heads = Vec::new();
        for (l, &c) in LAYER_CHANNELS.iter().enumerate() {
            let name = head_name(l);
            let t = store
                .get(&name)
                .map_err(|_| Error::Weights(format!("missing LPIPS linear weights '{name}'")))?;
            if t.elem_count() != c {
                return Err(Error::Weights(format!(
                    "{name}: expected {c} channel weights, found {}",
                    t.elem_count()
                )));
            }
            heads.push(t.reshape((1, c, 1, 1))?);
        }
        Ok(Self { heads })
    }

    /// All channels weighted equally; useful when the published heads are
    /// unavailable and for tests.
    pub fn uniform() -> Result<Self> {
        let heads = LAYER_CHANNELS
            .iter()
            .map(|&c| Tensor::full(1.0f32 / c as f32, (1, c, 1, 1), &candle_core::Device::Cpu))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { heads })
    }
}

/// Maps `[0, 1]` RGB to the network input used by LPIPS.
pub fn scale_input(x: &Tensor) -> Result<Tensor> {
    let shift = ops::const_like(&SHIFT, &[1, 3, 1, 1], x)?;
    let scale = ops::const_like(&SCALE, &[1, 3, 1, 1], x)?;
    Ok(x.affine(2.0, -1.0)?.broadcast_sub(&shift)?.broadcast_div(&scale)?)
}

fn unit_normalize(f: &Tensor) -> Result<Tensor> {
    let norm = f.sqr()?.sum_keepdim(1)?.sqrt()?.affine(1.0, EPS)?;
    Ok(f.broadcast_div(&norm)?)
}

/// LPIPS distance between two pyramids. Masks, when given, weight the
/// unit-normalised activations of each layer (the channel normalisation
/// would otherwise cancel a per-pixel factor).
pub fn lpips_from_features(
    fr: &[Tensor],
    fd: &[Tensor],
    heads: &LpipsHeads,
    masks: Option<&[Tensor]>,
    out_hw: (usize, usize),
) -> Result<MetricOutput> {
    let mut score: Option<Tensor> = None;
    let mut map: Option<Tensor> = None;
    for (l, (a, b)) in fr.iter().zip(fd).enumerate() {
        let (na, nb) = (unit_normalize(a)?, unit_normalize(b)?);
        let (na, nb) = match masks {
            Some(m) => apply_mask(&m[l], &na, &nb)?,
            None => (na, nb),
        };
        let w = heads.heads[l].to_dtype(a.dtype())?;
        let layer_map = (na - nb)?.sqr()?.broadcast_mul(&w)?.sum_keepdim(1)?;
        let s = ops::mean_per_sample(&layer_map)?;
        score = Some(match score {
            Some(acc) => (acc + s)?,
            None => s,
        });
        let up = layer_map.detach().upsample_nearest2d(out_hw.0, out_hw.1)?;
        map = Some(match map {
            Some(acc) => (acc + up)?,
            None => up,
        });
    }
    Ok(MetricOutput {
        score: score.ok_or_else(|| Error::InvalidInput("empty feature pyramid".into()))?,
        error_map: map,
    })
}
