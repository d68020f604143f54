//! Small differentiable building blocks shared by the metrics and networks.
//!
//! Everything here works on NCHW tensors of any float dtype so the same code
//! path serves f32 inference and f64 gradient checks.

use candle_core::{DType, Tensor};

use crate::error::Result;

/// Logistic sigmoid written through `tanh` so that neither the value nor the
/// gradient overflows for large |x|.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

/// `sqrt(x)` for `x >= 0` with a zero (not NaN) gradient at `x == 0`.
pub fn safe_sqrt(x: &Tensor) -> Result<Tensor> {
    safe_powf(x, 0.5)
}

/// `x^p` for `x >= 0` that evaluates to exactly 0 at `x == 0` with a zero
/// gradient there.
pub fn safe_powf(x: &Tensor, p: f64) -> Result<Tensor> {
    let pos = x.gt(0.0)?;
    let ones = x.ones_like()?;
    let xs = pos.where_cond(x, &ones)?;
    let zeros = x.zeros_like()?;
    Ok(pos.where_cond(&xs.powf(p)?, &zeros)?)
}

/// Elementwise `base^exponent` for `base >= 0` and a tensor-valued exponent.
/// Zero bases map to zero.
pub fn safe_pow_tensor(base: &Tensor, exponent: &Tensor) -> Result<Tensor> {
    let pos = base.gt(0.0)?;
    let ones = base.ones_like()?;
    let bs = pos.where_cond(base, &ones)?;
    let v = (bs.log()? * exponent)?.exp()?;
    Ok(pos.where_cond(&v, &base.zeros_like()?)?)
}

/// Builds a tensor with the given values, shape and the dtype/device of `like`.
pub fn const_like(values: &[f64], shape: &[usize], like: &Tensor) -> Result<Tensor> {
    let t = Tensor::from_slice(values, shape, like.device())?;
    Ok(t.to_dtype(like.dtype())?)
}

/// Normalised 1-D Gaussian of `size` taps (odd) and standard deviation `sigma`.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let mut taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Border {
    /// Output shrinks by `k - 1` along the filtered axis.
    Valid,
    /// Edge pixels are replicated so the output keeps the input size.
    Replicate,
}

/// Runs a single-channel kernel over every channel independently by folding
/// channels into the batch axis.
pub fn depthwise(
    x: &Tensor,
    kernel: &[f64],
    kh: usize,
    kw: usize,
    padding: usize,
    stride: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let k = const_like(kernel, &[1, 1, kh, kw], x)?;
    let y = x.contiguous()?.reshape((n * c, 1, h, w))?.conv2d(&k, padding, stride, 1, 1)?;
    let (_, _, ho, wo) = y.dims4()?;
    Ok(y.reshape((n, c, ho, wo))?)
}

/// Depthwise separable filter: `vertical` runs along H, `horizontal` along W.
pub fn separable_filter(
    x: &Tensor,
    vertical: &[f64],
    horizontal: &[f64],
    border: Border,
) -> Result<Tensor> {
    let kv = vertical.len();
    let kh = horizontal.len();
    let mut x = x.clone();
    if border == Border::Replicate {
        x = x
            .pad_with_same(2, kv / 2, kv / 2)?
            .pad_with_same(3, kh / 2, kh / 2)?;
    }
    let y = depthwise(&x, vertical, kv, 1, 0, 1)?;
    depthwise(&y, horizontal, 1, kh, 0, 1)
}

/// Dense 2-D depthwise filter with replicated borders. `kernel` is row-major
/// with odd side `k`.
pub fn filter2d_replicate(x: &Tensor, kernel: &[f64], k: usize) -> Result<Tensor> {
    let r = k / 2;
    let xp = x.pad_with_same(2, r, r)?.pad_with_same(3, r, r)?;
    depthwise(&xp, kernel, k, k, 0, 1)
}

/// Applies a 3x3 colour matrix over the channel axis of an NCHW tensor.
pub fn color_matrix(x: &Tensor, m: &[[f64; 3]; 3]) -> Result<Tensor> {
    let flat: Vec<f64> = m.iter().flatten().copied().collect();
    let w = const_like(&flat, &[3, 3, 1, 1], x)?;
    Ok(x.conv2d(&w, 0, 1, 1, 1)?)
}

/// Weighted sum over channels, keeping a singleton channel axis.
pub fn channel_dot(x: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let w = const_like(weights, &[1, weights.len(), 1, 1], x)?;
    Ok(x.broadcast_mul(&w)?.sum_keepdim(1)?)
}

/// Per-sample mean over all non-batch axes, giving shape `(N,)`.
pub fn mean_per_sample(x: &Tensor) -> Result<Tensor> {
    let n = x.dim(0)?;
    Ok(x.reshape((n, ()))?.mean(1)?)
}

/// Crops H and W down to even sizes so 2x2 pooling covers every pixel.
pub fn crop_even(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.narrow(2, 0, h - h % 2)?.narrow(3, 0, w - w % 2)?)
}

/// 2x2 max pooling, stride 2, odd edges dropped. Built from a reshape and
/// two max reductions because candle's own max-pool backward scales the
/// gradient by the fraction of maxima in each window instead of dividing.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let x = crop_even(x)?;
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h / 2, 2, w / 2, 2))?.max(5)?.max(3)?)
}

pub fn is_float(dtype: DType) -> bool {
    matches!(dtype, DType::F32 | DType::F64 | DType::F16 | DType::BF16)
}

/// Returns the scalar value of a single-element tensor as f64.
pub fn scalar(x: &Tensor) -> Result<f64> {
    Ok(x.flatten_all()?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?
        .first()
        .copied()
        .unwrap_or(f64::NAN))
}

/// Copies an `(N, ...)` tensor into per-sample f64 vectors.
pub fn to_f64_vec(x: &Tensor) -> Result<Vec<f64>> {
    Ok(x.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}
