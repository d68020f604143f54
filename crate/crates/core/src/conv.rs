//! Stride-1 "same" convolution with odd square kernels, as a custom op.
//!
//! Values match `Tensor::conv2d(w, k / 2, 1, 1, 1)`. The point is speed on a
//! CPU: im2col + a single gemm per sample, and a backward pass that computes
//! the input gradient as another forward convolution (flipped kernel) and
//! skips it entirely when the input is a constant.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor, WithDType};

use crate::error::Result;

pub fn same_conv(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    let (_, cw, k, k2) = w.dims4()?;
    if c != cw || k != k2 || k % 2 == 0 {
        return Err(crate::Error::ShapeMismatch(format!(
            "same_conv: input {:?} vs kernel {:?}",
            x.dims(),
            w.dims()
        )));
    }
    Ok(x.apply_op2(w, SameConv)?)
}

struct SameConv;

/// `dL/dw` from the input and the output gradient; no backward of its own.
struct KernelGrad {
    k: usize,
}

fn dense<T: WithDType>(s: &[T], l: &Layout) -> Vec<T> {
    if let Some((a, b)) = l.contiguous_offsets() {
        return s[a..b].to_vec();
    }
    let (dims, stride) = (l.dims(), l.stride());
    let n = l.shape().elem_count();
    let mut idx = vec![0usize; dims.len()];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let off: usize = idx.iter().zip(stride).map(|(i, s)| i * s).sum();
        out.push(s[l.start_offset() + off]);
        for d in (0..dims.len()).rev() {
            idx[d] += 1;
            if idx[d] < dims[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// `(C, H, W)` -> `(C*k*k, H*W)`, zero padded by `k / 2`.
fn im2col<T: WithDType>(x: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let p = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y + ky;
                    if sy < p || sy - p >= h {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[(sy - p) * w..(sy - p + 1) * w];
                    // dst[x] = src[x + kx - p]
                    let lo = p.saturating_sub(kx).min(w);
                    let hi = (w + p).saturating_sub(kx).min(w);
                    dst[..lo].fill(T::zero());
                    if hi > lo {
                        dst[lo..hi].copy_from_slice(&src[lo + kx - p..hi + kx - p]);
                    }
                    dst[hi.max(lo)..].fill(T::zero());
                }
            }
        }
    }
}

/// `dst (m x n) = [dst +] a (m x k) * b (k x n)`, with explicit strides
/// given as (row stride, column stride).
#[allow(clippy::too_many_arguments)]
fn gemm<T: WithDType>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    dst_rs: usize,
    dst_cs: usize,
    accumulate: bool,
    a: &[T],
    a_rs: usize,
    a_cs: usize,
    b: &[T],
    b_rs: usize,
    b_cs: usize,
) {
    assert!(m == 0 || n == 0 || dst.len() > (m - 1) * dst_rs + (n - 1) * dst_cs);
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * a_rs + (k - 1) * a_cs);
    assert!(n == 0 || k == 0 || b.len() > (k - 1) * b_rs + (n - 1) * b_cs);
    // SAFETY: the asserts above keep every index the kernel touches in bounds.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            dst_cs as isize,
            dst_rs as isize,
            accumulate,
            a.as_ptr(),
            a_cs as isize,
            a_rs as isize,
            b.as_ptr(),
            b_cs as isize,
            b_rs as isize,
            T::one(),
            T::one(),
            false,
            false,
            false,
            gemm::Parallelism::None,
        )
    }
}

fn conv_fwd<T: WithDType>(x: &[T], xs: &[usize], w: &[T], ws: &[usize]) -> Vec<T> {
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, k) = (ws[0], ws[2]);
    let (hw, ckk) = (h * wd, c * k * k);
    let mut out = vec![T::zero(); n * co * hw];
    let mut col = vec![T::zero(); ckk * hw];
    for b in 0..n {
        im2col(&x[b * c * hw..(b + 1) * c * hw], c, h, wd, k, &mut col);
        let dst = &mut out[b * co * hw..(b + 1) * co * hw];
        gemm(co, hw, ckk, dst, hw, 1, false, w, ckk, 1, &col, hw, 1);
    }
    out
}

fn kernel_grad<T: WithDType>(x: &[T], xs: &[usize], g: &[T], co: usize, k: usize) -> Vec<T> {
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (hw, ckk) = (h * wd, c * k * k);
    let mut out = vec![T::zero(); co * ckk];
    let mut col = vec![T::zero(); ckk * hw];
    for b in 0..n {
        im2col(&x[b * c * hw..(b + 1) * c * hw], c, h, wd, k, &mut col);
        // dW (co x ckk) += G_b (co x hw) * col^T (hw x ckk)
        gemm(co, ckk, hw, &mut out, ckk, 1, b > 0, &g[b * co * hw..(b + 1) * co * hw], hw, 1, &col, 1, hw);
    }
    out
}

macro_rules! dispatch {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let ($a, $b) = (dense(a, $l1), dense(b, $l2));
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let ($a, $b) = (dense(a, $l1), dense(b, $l2));
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("same_conv needs two f32 or two f64 tensors"),
        }
    };
}

impl CustomOp2 for SameConv {
    fn name(&self) -> &'static str {
        "same-conv"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (xs, ws) = (l1.dims(), l2.dims());
        let out = dispatch!(s1, l1, s2, l2, |x, w| conv_fwd(&x, xs, &w, ws));
        Ok((out, Shape::from((xs[0], ws[0], xs[2], xs[3]))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad_x = if x.track_op() {
            // correlation with the spatially flipped, in/out-swapped kernel
            let wf = w.flip(&[2, 3])?.transpose(0, 1)?;
            Some(grad.apply_op2(&wf, SameConv)?)
        } else {
            None
        };
        let grad_w = if w.track_op() {
            let k = w.dim(2)?;
            Some(x.detach().apply_op2_no_bwd(&grad.detach(), &KernelGrad { k })?)
        } else {
            None
        };
        Ok((grad_x, grad_w))
    }
}

impl CustomOp2 for KernelGrad {
    fn name(&self) -> &'static str {
        "same-conv-kernel-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (xs, co) = (l1.dims(), l2.dims()[1]);
        let k = self.k;
        let out = dispatch!(s1, l1, s2, l2, |x, g| kernel_grad(&x, xs, &g, co, k));
        Ok((out, Shape::from((co, xs[1], k, k))))
    }
}
