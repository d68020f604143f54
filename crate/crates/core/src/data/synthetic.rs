//! Procedural MOS-labelled pairs and region-annotated stimuli.
//!
//! Scores come from a simple contrast-masking model: an error counts less
//! where the reference has high local contrast. The data exist so the
//! training and evaluation pipelines can be exercised end to end without
//! the licensed datasets; they are not a substitute for human ratings.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops;
use image::Rgb32FImage;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::seeded_rng;

pub const NOISE: u32 = 1;
pub const BLUR: u32 = 2;
const NOISE_SIGMA: [f32; 5] = [0.02, 0.04, 0.07, 0.11, 0.16];
const BLUR_SIGMA: [f32; 5] = [0.6, 1.0, 1.6, 2.4, 3.5];

/// Planar luma-ish buffer used while synthesising.
#[derive(Clone)]
pub struct Canvas {
    pub h: usize,
    pub w: usize,
    /// Interleaved RGB.
    pub px: Vec<f32>,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            px: vec![0.0; h * w * 3],
        }
    }

    pub fn to_image(&self) -> Result<Image> {
        // quantise like an 8-bit file would
        let q = self.px.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect();
        Image::from_hwc(self.h, self.w, q)
    }

    fn luma(&self, y: usize, x: usize) -> f32 {
        let i = (y * self.w + x) * 3;
        0.2126 * self.px[i] + 0.7152 * self.px[i + 1] + 0.0722 * self.px[i + 2]
    }
}

/// Smooth background with one textured rectangle; returns the canvas and a
/// per-pixel "textured" flag.
pub fn textured_scene(h: usize, w: usize, rng: &mut ChaCha8Rng) -> (Canvas, Vec<bool>) {
    let mut c = Canvas::new(h, w);
    let base: [f32; 3] = [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)];
    let (gy, gx) = (rng.random_range(-0.15..0.15f32), rng.random_range(-0.15..0.15f32));
    let (th, tw) = (rng.random_range(h / 3..=h / 2), rng.random_range(w / 3..=w / 2));
    let (ty, tx) = (rng.random_range(0..=h - th), rng.random_range(0..=w - tw));
    let freq = rng.random_range(0.6..1.3f32);
    let phase = rng.random_range(0.0..6.28f32);
    let mut tex = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let smooth = gy * (y as f32 / h as f32 - 0.5) + gx * (x as f32 / w as f32 - 0.5);
            let inside = (ty..ty + th).contains(&y) && (tx..tx + tw).contains(&x);
            let t = if inside {
                let a = (x as f32 * freq + phase).sin() * (y as f32 * freq * 0.8).cos();
                0.3 * a + 0.08 * rng.random_range(-1.0..1.0f32)
            } else {
                0.0
            };
            tex[y * w + x] = inside;
            for ch in 0..3 {
                c.px[(y * w + x) * 3 + ch] = (base[ch] + smooth + t).clamp(0.0, 1.0);
            }
        }
    }
    (c, tex)
}

/// Flat halves separated by vertical and horizontal edges; returns the
/// canvas and a per-pixel "near an edge" flag.
pub fn edge_chart(h: usize, w: usize, rng: &mut ChaCha8Rng) -> (Canvas, Vec<bool>) {
    let mut c = Canvas::new(h, w);
    let bands = rng.random_range(3..6usize);
    let lo = rng.random_range(0.1..0.35f32);
    let hi = rng.random_range(0.65..0.9f32);
    let period = (w / bands).max(4);
    for y in 0..h {
        for x in 0..w {
            let v = if ((x / period) + (y * 2 / h)) % 2 == 0 { lo } else { hi };
            for ch in 0..3 {
                c.px[(y * w + x) * 3 + ch] = v;
            }
        }
    }
    let mut edge = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = c.luma(y, x);
            let mut near = false;
            for dy in -2i64..=2 {
                for dx in -2i64..=2 {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        near |= (c.luma(yy as usize, xx as usize) - v).abs() > 0.1;
                    }
                }
            }
            edge[y * w + x] = near;
        }
    }
    (c, edge)
}

pub fn add_noise(c: &Canvas, sigma: f32, rng: &mut ChaCha8Rng) -> Canvas {
    let n = Normal::new(0.0f32, sigma).expect("finite sigma");
    let mut out = c.clone();
    out.px.iter_mut().for_each(|v| *v = (*v + n.sample(rng)).clamp(0.0, 1.0));
    out
}

pub fn blur(c: &Canvas, sigma: f32) -> Canvas {
    let img = Rgb32FImage::from_raw(c.w as u32, c.h as u32, c.px.clone()).expect("buffer size");
    let b = imageops::blur(&img, sigma);
    Canvas {
        h: c.h,
        w: c.w,
        px: b.into_raw(),
    }
}

/// Per-pixel local standard deviation of luma over a 7x7 window.
pub fn local_contrast(c: &Canvas) -> Vec<f32> {
    let mut out = vec![0.0; c.h * c.w];
    for y in 0..c.h {
        for x in 0..c.w {
            let (mut s, mut s2, mut n) = (0.0f32, 0.0f32, 0.0f32);
            for yy in y.saturating_sub(3)..(y + 4).min(c.h) {
                for xx in x.saturating_sub(3)..(x + 4).min(c.w) {
                    let v = c.luma(yy, xx);
                    s += v;
                    s2 += v * v;
                    n += 1.0;
                }
            }
            let m = s / n;
            out[y * c.w + x] = (s2 / n - m * m).max(0.0).sqrt();
        }
    }
    out
}

/// Quality in (0, 1] under the masking model.
pub fn masked_quality(r: &Canvas, d: &Canvas) -> f64 {
    let contrast = local_contrast(r);
    let mut acc = 0.0f64;
    for (i, c) in contrast.iter().enumerate() {
        let mut e = 0.0f32;
        for ch in 0..3 {
            e += (r.px[i * 3 + ch] - d.px[i * 3 + ch]).abs();
        }
        acc += (e / 3.0 / (0.02 + 4.0 * c)) as f64;
    }
    (-0.6 * acc / contrast.len() as f64).exp()
}

/// Writes `n_refs` scenes x {noise, blur} x 5 levels plus `manifest.csv`.
/// Returns the manifest path.
pub fn write_dataset(dir: impl AsRef<Path>, n_refs: usize, side: usize, seed: u64) -> Result<PathBuf> {
    let dir = dir.as_ref();
    if side < Image::MIN_SIDE {
        return Err(Error::InvalidInput(format!("side must be at least {}", Image::MIN_SIDE)));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = seeded_rng(seed, 0x5917);
    let mut rows = vec!["ref_path,dist_path,score,distortion_type,distortion_level".to_string()];
    for r in 0..n_refs {
        let (scene, _) = textured_scene(side, side, &mut rng);
        let scene = Canvas {
            px: scene.to_image()?.to_hwc()?,
            ..scene
        };
        let ref_name = format!("S{:03}.png", r + 1);
        scene.to_image()?.save_png(dir.join(&ref_name))?;
        for t in [NOISE, BLUR] {
            for l in 1..=5u32 {
                let d = match t {
                    NOISE => add_noise(&scene, NOISE_SIGMA[l as usize - 1], &mut rng),
                    _ => blur(&scene, BLUR_SIGMA[l as usize - 1]),
                };
                let d = Canvas {
                    px: d.to_image()?.to_hwc()?,
                    ..d
                };
                let name = format!("S{:03}_{t:02}_{l:02}.png", r + 1);
                d.to_image()?.save_png(dir.join(&name))?;
                rows.push(format!("{ref_name},{name},{:.6},{t},{l}", masked_quality(&scene, &d)));
            }
        }
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, rows.join("\n") + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// A region-annotated pair: `region[i]` marks the pixels of interest
/// (texture for noise stimuli, edges for blur stimuli).
pub struct Stimulus {
    pub reference: Image,
    pub distorted: Image,
    pub region: Vec<bool>,
}

pub fn noise_stimulus(side: usize, seed: u64) -> Result<Stimulus> {
    let mut rng = seeded_rng(seed, 0x7e57);
    let (scene, tex) = textured_scene(side, side, &mut rng);
    let d = add_noise(&scene, 0.06, &mut rng);
    Ok(Stimulus {
        reference: scene.to_image()?,
        distorted: d.to_image()?,
        region: tex,
    })
}

pub fn blur_stimulus(side: usize, seed: u64) -> Result<Stimulus> {
    let mut rng = seeded_rng(seed, 0xb1u64);
    let (chart, edges) = edge_chart(side, side, &mut rng);
    let d = blur(&chart, 1.5);
    Ok(Stimulus {
        reference: chart.to_image()?,
        distorted: d.to_image()?,
        region: edges,
    })
}

/// Mean of `values` inside and outside `region`.
pub fn region_means(values: &[f32], region: &[bool]) -> (f64, f64) {
    let (mut a, mut na, mut b, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (v, &r) in values.iter().zip(region) {
        if r {
            a += *v as f64;
            na += 1;
        } else {
            b += *v as f64;
            nb += 1;
        }
    }
    (a / na.max(1) as f64, b / nb.max(1) as f64)
}
