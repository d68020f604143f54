//! LDR-FLIP: a colour pipeline (CSF filtering in YCxCz, Hunt-adjusted HyAB
//! distance) combined with an edge/point feature pipeline on luminance.

use candle_core::Tensor;

use super::{check_pair, MetricOutput};
use crate::error::{Error, Result};
use crate::ops;

/// Pixels per degree for a 0.7 m viewing distance on a 0.7 m wide 4K display.
pub const DEFAULT_PPD: f64 = 67.0;

const QC: f64 = 0.7;
const PC: f64 = 0.4;
const PT: f64 = 0.95;
const GW: f64 = 0.082;
const QF: f64 = 0.5;

const LINRGB_TO_XYZ: [[f64; 3]; 3] = [
    [10135552.0 / 24577794.0, 8788810.0 / 24577794.0, 4435075.0 / 24577794.0],
    [2613072.0 / 12288897.0, 8788810.0 / 12288897.0, 887015.0 / 12288897.0],
    [1425312.0 / 73733382.0, 8788810.0 / 73733382.0, 70074185.0 / 73733382.0],
];

const XYZ_TO_LINRGB: [[f64; 3]; 3] = [
    [3.241003275, -1.537398934, -0.498615861],
    [-0.969224334, 1.875930071, 0.041554224],
    [0.055639423, -0.204011202, 1.057148933],
];

// (a1, b1, a2, b2) of the sum-of-Gaussians CSF per opponent channel
const CSF_PARAMS: [(f64, f64, f64, f64); 3] = [
    (1.0, 0.0047, 0.0, 1e-5),
    (1.0, 0.0053, 0.0, 1e-5),
    (34.1, 0.04, 13.5, 0.025),
];
const CSF_MAX_SCALE: f64 = 0.04;

fn white_point() -> [f64; 3] {
    let mut w = [0.0; 3];
    for (i, row) in LINRGB_TO_XYZ.iter().enumerate() {
        w[i] = row.iter().sum();
    }
    w
}

fn srgb_to_linear(x: &Tensor) -> Result<Tensor> {
    let hi = x.affine(1.0 / 1.055, 0.055 / 1.055)?.maximum(0.0)?.powf(2.4)?;
    let lo = x.affine(1.0 / 12.92, 0.0)?;
    Ok(x.gt(0.04045)?.where_cond(&hi, &lo)?)
}

fn add_channel_offset(x: &Tensor, offset: [f64; 3]) -> Result<Tensor> {
    Ok(x.broadcast_add(&ops::const_like(&offset, &[1, 3, 1, 1], x)?)?)
}

fn linear_to_ycxcz(lin: &Tensor) -> Result<Tensor> {
    let w = white_point();
    let a = [
        [0.0, 116.0 / w[1], 0.0],
        [500.0 / w[0], -500.0 / w[1], 0.0],
        [0.0, 200.0 / w[1], -200.0 / w[2]],
    ];
    let xyz = ops::color_matrix(lin, &LINRGB_TO_XYZ)?;
    add_channel_offset(&ops::color_matrix(&xyz, &a)?, [-16.0, 0.0, 0.0])
}

fn ycxcz_to_linear(c: &Tensor) -> Result<Tensor> {
    let w = white_point();
    let b = [
        [w[0] / 116.0, w[0] / 500.0, 0.0],
        [w[1] / 116.0, 0.0, 0.0],
        [w[2] / 116.0, 0.0, -w[2] / 200.0],
    ];
    let xyz = add_channel_offset(
        &ops::color_matrix(c, &b)?,
        [w[0] * 16.0 / 116.0, w[1] * 16.0 / 116.0, w[2] * 16.0 / 116.0],
    )?;
    ops::color_matrix(&xyz, &XYZ_TO_LINRGB)
}

/// Linear RGB to Hunt-adjusted CIELAB.
fn linear_to_hunt_lab(lin: &Tensor) -> Result<Tensor> {
    let w = white_point();
    let mut m = LINRGB_TO_XYZ;
    for (i, row) in m.iter_mut().enumerate() {
        row.iter_mut().for_each(|v| *v /= w[i]);
    }
    let t = ops::color_matrix(lin, &m)?;
    let delta: f64 = 6.0 / 29.0;
    let d3 = delta.powi(3);
    let above = t.gt(d3)?;
    let safe = above.where_cond(&t, &t.ones_like()?)?;
    let f = above.where_cond(
        &safe.powf(1.0 / 3.0)?,
        &t.affine(1.0 / (3.0 * delta * delta), 4.0 / 29.0)?,
    )?;
    let fx = f.narrow(1, 0, 1)?;
    let fy = f.narrow(1, 1, 1)?;
    let fz = f.narrow(1, 2, 1)?;
    let l = fy.affine(116.0, -16.0)?;
    let a = (&fx - &fy)?.affine(500.0, 0.0)?;
    let b = (&fy - &fz)?.affine(200.0, 0.0)?;
    let a = (&l * a)?.affine(0.01, 0.0)?;
    let b = (&l * b)?.affine(0.01, 0.0)?;
    Ok(Tensor::cat(&[&l, &a, &b], 1)?)
}

fn hunt_lab_scalar(rgb: [f64; 3]) -> [f64; 3] {
    let w = white_point();
    let mut t = [0.0; 3];
    for i in 0..3 {
        t[i] = (0..3).map(|j| LINRGB_TO_XYZ[i][j] * rgb[j]).sum::<f64>() / w[i];
    }
    let delta: f64 = 6.0 / 29.0;
    let f = t.map(|v| {
        if v > delta.powi(3) {
            v.cbrt()
        } else {
            v / (3.0 * delta * delta) + 4.0 / 29.0
        }
    });
    let l = 116.0 * f[1] - 16.0;
    [
        l,
        0.01 * l * 500.0 * (f[0] - f[1]),
        0.01 * l * 200.0 * (f[1] - f[2]),
    ]
}

/// Largest colour error: HyAB distance between pure green and pure blue.
fn max_color_error() -> f64 {
    let g = hunt_lab_scalar([0.0, 1.0, 0.0]);
    let b = hunt_lab_scalar([0.0, 0.0, 1.0]);
    let hyab = (g[0] - b[0]).abs() + ((g[1] - b[1]).powi(2) + (g[2] - b[2]).powi(2)).sqrt();
    hyab.powf(QC)
}

/// Spatial CSF kernel for one opponent channel, side `2r + 1`.
pub fn csf_kernel(ppd: f64, channel: usize) -> (Vec<f64>, usize) {
    let (a1, b1, a2, b2) = CSF_PARAMS[channel];
    let pi = std::f64::consts::PI;
    let r = (3.0 * (CSF_MAX_SCALE / (2.0 * pi * pi)).sqrt() * ppd).ceil() as i64;
    let dx = 1.0 / ppd;
    let side = (2 * r + 1) as usize;
    let mut k = Vec::with_capacity(side * side);
    for iy in -r..=r {
        for ix in -r..=r {
            let z = ((ix as f64 * dx).powi(2)) + ((iy as f64 * dx).powi(2));
            let g = a1 * (pi / b1).sqrt() * (-pi * pi * z / b1).exp()
                + a2 * (pi / b2).sqrt() * (-pi * pi * z / b2).exp();
            k.push(g);
        }
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    (k, side)
}

#[derive(Clone, Copy)]
enum Feature {
    Edge,
    Point,
}

/// Horizontal edge/point detector; the vertical one is its transpose.
fn feature_kernel(ppd: f64, kind: Feature) -> (Vec<f64>, usize) {
    let sd = 0.5 * GW * ppd;
    let r = (3.0 * sd).ceil() as i64;
    let side = (2 * r + 1) as usize;
    let mut k = Vec::with_capacity(side * side);
    for y in -r..=r {
        for x in -r..=r {
            let (xf, yf) = (x as f64, y as f64);
            let g = (-(xf * xf + yf * yf) / (2.0 * sd * sd)).exp();
            k.push(match kind {
                Feature::Edge => -xf * g,
                Feature::Point => (xf * xf / (sd * sd) - 1.0) * g,
            });
        }
    }
    let neg: f64 = -k.iter().filter(|v| **v < 0.0).sum::<f64>();
    let pos: f64 = k.iter().filter(|v| **v > 0.0).sum();
    k.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v /= neg
        } else {
            *v /= pos
        }
    });
    (k, side)
}

fn transpose(k: &[f64], side: usize) -> Vec<f64> {
    let mut t = vec![0.0; k.len()];
    for y in 0..side {
        for x in 0..side {
            t[x * side + y] = k[y * side + x];
        }
    }
    t
}

fn csf_filter(ycxcz: &Tensor, ppd: f64) -> Result<Tensor> {
    let kernels: Vec<(Vec<f64>, usize)> = (0..3).map(|c| csf_kernel(ppd, c)).collect();
    let side = kernels[0].1;
    let flat: Vec<f64> = kernels.into_iter().flat_map(|(k, _)| k).collect();
    let r = side / 2;
    let w = ops::const_like(&flat, &[3, 1, side, side], ycxcz)?;
    let xp = ycxcz.pad_with_same(2, r, r)?.pad_with_same(3, r, r)?;
    Ok(xp.conv2d(&w, 0, 1, 1, 3)?)
}

/// Magnitudes of (edge, point) responses on normalised luminance `(N,1,H,W)`.
fn feature_magnitudes(y: &Tensor, ppd: f64) -> Result<(Tensor, Tensor)> {
    let (edge, side) = feature_kernel(ppd, Feature::Edge);
    let (point, _) = feature_kernel(ppd, Feature::Point);
    let mut flat = Vec::with_capacity(4 * side * side);
    flat.extend_from_slice(&edge);
    flat.extend(transpose(&edge, side));
    flat.extend_from_slice(&point);
    flat.extend(transpose(&point, side));
    let r = side / 2;
    let w = ops::const_like(&flat, &[4, 1, side, side], y)?;
    let yp = y.pad_with_same(2, r, r)?.pad_with_same(3, r, r)?;
    let f = yp.conv2d(&w, 0, 1, 1, 1)?.sqr()?;
    let edges = ops::safe_sqrt(&f.narrow(1, 0, 2)?.sum_keepdim(1)?)?;
    let points = ops::safe_sqrt(&f.narrow(1, 2, 2)?.sum_keepdim(1)?)?;
    Ok((edges, points))
}

/// LDR-FLIP error map in `[0, 1]`; score is the map mean (lower is better).
pub fn flip(r: &Tensor, d: &Tensor, ppd: f64) -> Result<MetricOutput> {
    let (_, c, _, _) = check_pair(r, d)?;
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("FLIP needs RGB input, got {c} channels")));
    }
    if !(ppd > 0.0 && ppd.is_finite()) {
        return Err(Error::InvalidInput(format!("pixels per degree must be positive, got {ppd}")));
    }
    let yr = linear_to_ycxcz(&srgb_to_linear(r)?)?;
    let yd = linear_to_ycxcz(&srgb_to_linear(d)?)?;

    // colour pipeline
    let prep = |c: &Tensor| -> Result<Tensor> {
        let lin = ycxcz_to_linear(&csf_filter(c, ppd)?)?.clamp(0.0, 1.0)?;
        linear_to_hunt_lab(&lin)
    };
    let diff = (prep(&yr)? - prep(&yd)?)?;
    let dl = diff.narrow(1, 0, 1)?.abs()?;
    let dab = ops::safe_sqrt(&diff.narrow(1, 1, 2)?.sqr()?.sum_keepdim(1)?)?;
    let hyab = ops::safe_powf(&(dl + dab)?, QC)?;
    let cmax = max_color_error();
    let pccmax = PC * cmax;
    let color = hyab.lt(pccmax)?.where_cond(
        &hyab.affine(PT / pccmax, 0.0)?,
        &hyab.affine((1.0 - PT) / (cmax - pccmax), PT - pccmax * (1.0 - PT) / (cmax - pccmax))?,
    )?;

    // feature pipeline
    let lum = |c: &Tensor| -> Result<Tensor> { Ok(c.narrow(1, 0, 1)?.affine(1.0 / 116.0, 16.0 / 116.0)?) };
    let (er, pr) = feature_magnitudes(&lum(&yr)?, ppd)?;
    let (ed, pd) = feature_magnitudes(&lum(&yd)?, ppd)?;
    let fe = (er - ed)?.abs()?;
    let fp = (pr - pd)?.abs()?;
    let feat = ops::safe_powf(&fe.maximum(&fp)?.affine(std::f64::consts::FRAC_1_SQRT_2, 0.0)?, QF)?;

    let map = ops::safe_pow_tensor(&color, &feat.affine(-1.0, 1.0)?)?;
    Ok(MetricOutput {
        score: ops::mean_per_sample(&map)?,
        error_map: Some(map),
    })
}
