//! Independent reference implementations used by the integration tests.
//! Written for clarity, not speed; none of them call into the library's
//! own statistics or filtering code.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------- correlation oracles ----------

/// Average ranks by counting: 1 + #smaller + 0.5 * #equal-others.
pub fn count_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&a| {
            let less = v.iter().filter(|&&b| b < a).count() as f64;
            let eq = v.iter().filter(|&&b| b == a).count() as f64 - 1.0;
            1.0 + less + 0.5 * eq
        })
        .collect()
}

pub fn pearson_naive(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

pub fn srcc_oracle(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson_naive(&count_ranks(x), &count_ranks(y))
}

/// Kendall tau-b straight from its pair-counting definition.
pub fn krcc_oracle(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let (mut s, mut n0, mut tx, mut ty) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..n {
        for j in i + 1..n {
            let a = (x[i] - x[j]).signum() * if x[i] == x[j] { 0.0 } else { 1.0 };
            let b = (y[i] - y[j]).signum() * if y[i] == y[j] { 0.0 } else { 1.0 };
            s += a * b;
            n0 += 1.0;
            if a == 0.0 {
                tx += 1.0;
            }
            if b == 0.0 {
                ty += 1.0;
            }
        }
    }
    let d = ((n0 - tx) * (n0 - ty)).sqrt();
    (d > 0.0).then(|| s / d)
}

fn logistic(p: &[f64; 4], x: f64) -> f64 {
    (p[0] - p[1]) / (1.0 + (-(x - p[2]) / p[3].abs()).exp()) + p[1]
}

/// Plain Nelder-Mead on R^4.
pub fn nelder_mead(f: &dyn Fn(&[f64; 4]) -> f64, x0: [f64; 4], scale: f64, iters: usize) -> ([f64; 4], f64) {
    let mut simplex: Vec<([f64; 4], f64)> = (0..5)
        .map(|i| {
            let mut p = x0;
            if i > 0 {
                p[i - 1] += scale * (1.0 + p[i - 1].abs());
            }
            (p, f(&p))
        })
        .collect();
    let comb = |a: &[f64; 4], b: &[f64; 4], t: f64| -> [f64; 4] {
        let mut o = [0.0; 4];
        for k in 0..4 {
            o[k] = a[k] + t * (b[k] - a[k]);
        }
        o
    };
    for _ in 0..iters {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = simplex[4].1 - simplex[0].1;
        if spread.abs() <= 1e-16 * simplex[0].1.abs().max(1e-300) {
            break;
        }
        let mut c = [0.0; 4];
        for s in &simplex[..4] {
            for k in 0..4 {
                c[k] += s.0[k] / 4.0;
            }
        }
        let worst = simplex[4].0;
        let r = comb(&c, &worst, -1.0);
        let fr = f(&r);
        if fr < simplex[0].1 {
            let e = comb(&c, &worst, -2.0);
            let fe = f(&e);
            simplex[4] = if fe < fr { (e, fe) } else { (r, fr) };
        } else if fr < simplex[3].1 {
            simplex[4] = (r, fr);
        } else {
            let k = comb(&c, &worst, 0.5);
            let fk = f(&k);
            if fk < simplex[4].1 {
                simplex[4] = (k, fk);
            } else {
                let best = simplex[0].0;
                for s in simplex.iter_mut().skip(1) {
                    s.0 = comb(&best, &s.0, 0.5);
                    s.1 = f(&s.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0]
}

/// PLCC after a logistic fit found by restarted Nelder-Mead, with the same
/// standardisation and linear-fallback rule as the library. Returns
/// `(plcc, linear_fallback)`.
pub fn plcc_oracle(scores: &[f64], mos: &[f64]) -> (Option<f64>, bool) {
    let (p, fb, _) = plcc_oracle_fit(scores, mos);
    (p, fb)
}

/// As [`plcc_oracle`], also returning the residual sum of squares reached.
pub fn plcc_oracle_fit(scores: &[f64], mos: &[f64]) -> (Option<f64>, bool, f64) {
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let sd = (scores.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let z: Vec<f64> = scores.iter().map(|v| (v - mean) / sd).collect();
    let sse = |p: &[f64; 4]| -> f64 {
        let v: f64 = z.iter().zip(mos).map(|(&a, &b)| (logistic(p, a) - b).powi(2)).sum();
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let ymax = mos.iter().cloned().fold(f64::MIN, f64::max);
    let ymin = mos.iter().cloned().fold(f64::MAX, f64::min);
    let mut zs = z.clone();
    zs.sort_by(f64::total_cmp);
    let med = if zs.len() % 2 == 1 {
        zs[zs.len() / 2]
    } else {
        0.5 * (zs[zs.len() / 2 - 1] + zs[zs.len() / 2])
    };
    // dense multi-start: the library's own starts plus a grid of centres
    // between sorted samples and widths from near-step to near-linear
    let mut starts: Vec<(f64, f64)> = [(0.0, 1.0), (0.5, 1.0), (-0.5, 1.0), (0.0, 0.5), (0.0, 2.0)]
        .iter()
        .map(|&(dc, fd)| (med + dc, fd))
        .collect();
    for w in zs.windows(2) {
        for d in [0.01, 0.1, 0.5, 1.0, 3.0] {
            starts.push((0.5 * (w[0] + w[1]), d));
        }
    }
    let mut rough: Vec<([f64; 4], f64)> = Vec::new();
    for (c, d) in starts {
        for (a, b) in [(ymax, ymin), (ymin, ymax)] {
            rough.push(nelder_mead(&sse, [a, b, c, d], 0.1, 1500));
            // a simplex as wide as the start would step clean over a
            // near-step basin between two close samples
            if d < 1.0 {
                rough.push(nelder_mead(&sse, [a, b, c, d], 0.1 * d, 1500));
            }
        }
    }
    rough.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut best: Option<([f64; 4], f64)> = None;
    for start in rough.into_iter().take(4) {
        let mut cur = start;
        // restarts shake the simplex out of premature collapse
        for _ in 0..8 {
            let next = nelder_mead(&sse, cur.0, 0.01, 20_000);
            if next.1 >= cur.1 {
                break;
            }
            cur = next;
        }
        if best.is_none_or(|b| cur.1 < b.1) {
            best = Some(cur);
        }
    }
    let my = mos.iter().sum::<f64>() / n;
    let szz: f64 = z.iter().map(|v| v * v).sum();
    let slope = z.iter().zip(mos).map(|(a, b)| a * (b - my)).sum::<f64>() / szz;
    let lin_sse: f64 = z.iter().zip(mos).map(|(a, b)| (my + slope * a - b).powi(2)).sum();
    let sst: f64 = mos.iter().map(|b| (b - my).powi(2)).sum();
    match best {
        Some((p, c)) if c <= lin_sse + 1e-2 * sst => {
            let pred: Vec<f64> = z.iter().map(|&v| logistic(&p, v)).collect();
            (pearson_naive(&pred, mos), false, c)
        }
        _ => (pearson_naive(scores, mos).map(f64::abs), true, lin_sse),
    }
}

/// Scores/MOS pairs shaped like IQA data: a noisy monotone relation.
pub fn iqa_like(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let a = rng.random_range(0.6..1.0);
    let b = rng.random_range(0.0..0.3);
    let c = rng.random_range(-1.0..1.0);
    let d = rng.random_range(0.3..1.5);
    let noise = rng.random_range(0.01..0.08);
    let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-2.5..2.5)).collect();
    let mos = scores
        .iter()
        .map(|&x| {
            let e: f64 = StandardNormal.sample(rng);
            logistic(&[a, b, c, d], x) + noise * e
        })
        .collect();
    (scores, mos)
}

/// Random columns with deliberate ties.
pub fn tied_column(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let levels = rng.random_range(2..=n.max(2));
    (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.37 - 1.0).collect()
}

// ---------- image oracles ----------

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// Rec.709 luma of an `(1, 3, H, W)` image as rows.
pub fn luma_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (_, _, h, w) = t.dims4().unwrap();
    let v = to_vec(t);
    let k = [0.2126, 0.7152, 0.0722];
    (0..h)
        .map(|y| {
            (0..w)
                .map(|x| (0..3).map(|c| k[c] * v[c * h * w + y * w + x]).sum())
                .collect()
        })
        .collect()
}

/// Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5), by direct
/// summation over each window.
pub fn ssim_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> (f64, f64) {
    let (h, w) = (a.len(), a[0].len());
    let mut g = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let (mut s_sum, mut cs_sum, mut count) = (0.0, 0.0, 0.0);
    for y in 0..=h - 11 {
        for x in 0..=w - 11 {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wt = g[i][j] / total;
                    let (p, q) = (a[y + i][x + j], b[y + i][x + j]);
                    mx += wt * p;
                    my += wt * q;
                    xx += wt * p * p;
                    yy += wt * q * q;
                    xy += wt * p * q;
                }
            }
            let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
            let cs = (2.0 * cxy + c2) / (vx + vy + c2);
            let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
            s_sum += l * cs;
            cs_sum += cs;
            count += 1.0;
        }
    }
    (s_sum / count, cs_sum / count)
}

/// 2x2 mean pooling of an RGB image held as a tensor, dropping odd edges.
pub fn pool2(t: &Tensor) -> Tensor {
    let (n, c, h, w) = t.dims4().unwrap();
    let (ho, wo) = (h / 2, w / 2);
    let v = to_vec(t);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        for y in 0..ho {
            for x in 0..wo {
                let at = |yy: usize, xx: usize| v[p * h * w + yy * w + xx];
                out.push(0.25 * (at(2 * y, 2 * x) + at(2 * y + 1, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x + 1)));
            }
        }
    }
    Tensor::from_vec(out, (n, c, ho, wo), &Device::Cpu).unwrap()
}

pub fn ms_ssim_oracle(r: &Tensor, d: &Tensor) -> f64 {
    let weights = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let (mut r, mut d) = (r.clone(), d.clone());
    let mut out = 1.0;
    for (s, wgt) in weights.iter().enumerate() {
        let (ssim, cs) = ssim_oracle(&luma_rows(&r), &luma_rows(&d));
        let term: f64 = if s == 4 { ssim } else { cs };
        out *= term.max(1e-6).powf(*wgt);
        r = pool2(&r);
        d = pool2(&d);
    }
    out
}

// ---------- gradient checking ----------

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    /// Worst relative error `|a - n| / max(|a|, |n|, 1e-8)` over accepted probes.
    pub worst: f64,
    pub accepted: usize,
    /// Directions drawn, including those rejected as non-smooth.
    pub drawn: usize,
}

impl GradReport {
    pub fn passes(&self, probes: usize, tol: f64) -> bool {
        self.accepted >= probes && self.worst <= tol
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "worst rel err {:.2e} over {} probes ({} drawn)", self.worst, self.accepted, self.drawn)
    }
}

/// Central differences of `eval(dir, h) = f(x + h * dir)` along random unit
/// directions, compared with `analytic . dir`.
///
/// ReLU, max and abs make the checked functions piecewise smooth, and a
/// step that straddles a kink gives a meaningless difference quotient. A
/// direction is therefore only used when the central differences at `eps`
/// and `eps / 2` agree to 1e-3 relative; that screen looks at function
/// values only, never at the analytic gradient. At most `10 * probes`
/// directions are drawn.
pub fn screened_check(
    analytic: &[f64],
    eval: &mut dyn FnMut(&[f64], f64) -> f64,
    probes: usize,
    eps: f64,
    seed: u64,
) -> GradReport {
    let mut r = rng(seed);
    let mut rep = GradReport { worst: 0.0, accepted: 0, drawn: 0 };
    while rep.accepted < probes && rep.drawn < 10 * probes {
        rep.drawn += 1;
        let mut v: Vec<f64> = (0..analytic.len()).map(|_| StandardNormal.sample(&mut r)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        let full = (eval(&v, eps) - eval(&v, -eps)) / (2.0 * eps);
        let half = (eval(&v, eps / 2.0) - eval(&v, -eps / 2.0)) / eps;
        if (full - half).abs() > 1e-3 * full.abs().max(half.abs()).max(1e-8) {
            continue;
        }
        let a: f64 = analytic.iter().zip(&v).map(|(p, q)| p * q).sum();
        rep.worst = rep.worst.max((a - full).abs() / a.abs().max(full.abs()).max(1e-8));
        rep.accepted += 1;
    }
    rep
}

/// Analytic gradient of a scalar function of one tensor.
pub fn grad_of(f: &dyn Fn(&Tensor) -> Tensor, x: &Tensor) -> Tensor {
    let v = Var::from_tensor(x).unwrap();
    let y = f(v.as_tensor());
    let g = y.backward().unwrap();
    g.get(v.as_tensor()).cloned().unwrap_or_else(|| v.zeros_like().unwrap())
}

/// Checks `d f / d x` for a scalar-valued tensor function at `eps = 1e-3`.
pub fn input_grad_check(f: &dyn Fn(&Tensor) -> Tensor, x: &Tensor, probes: usize, seed: u64) -> GradReport {
    input_grad_check_eps(f, x, probes, 1e-3, seed)
}

pub fn input_grad_check_eps(f: &dyn Fn(&Tensor) -> Tensor, x: &Tensor, probes: usize, eps: f64, seed: u64) -> GradReport {
    let g = to_vec(&grad_of(f, x));
    let mut eval = |dir: &[f64], h: f64| {
        let d = Tensor::from_vec(dir.to_vec(), x.shape(), &Device::Cpu).unwrap().to_dtype(x.dtype()).unwrap();
        to_vec(&f(&(x + (d * h).unwrap()).unwrap()))[0]
    };
    screened_check(&g, &mut eval, probes, eps, seed)
}

/// Same check over a set of parameters, perturbed jointly. Parameters are
/// restored afterwards.
pub fn param_grad_check(vars: &[Var], f: &dyn Fn() -> Tensor, probes: usize, seed: u64) -> GradReport {
    let grads = f().backward().unwrap();
    let g: Vec<f64> = vars
        .iter()
        .flat_map(|v| grads.get(v.as_tensor()).map(to_vec).unwrap_or_else(|| vec![0.0; v.elem_count()]))
        .collect();
    let orig: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().copy().unwrap()).collect();
    let mut eval = |dir: &[f64], h: f64| {
        let mut off = 0;
        for (v, o) in vars.iter().zip(&orig) {
            let n = o.elem_count();
            let d = Tensor::from_vec(dir[off..off + n].to_vec(), o.shape(), &Device::Cpu)
                .unwrap()
                .to_dtype(o.dtype())
                .unwrap();
            v.set(&(o + (d * h).unwrap()).unwrap()).unwrap();
            off += n;
        }
        to_vec(&f())[0]
    };
    let rep = screened_check(&g, &mut eval, probes, 1e-3, seed);
    for (v, o) in vars.iter().zip(&orig) {
        v.set(o).unwrap();
    }
    rep
}
