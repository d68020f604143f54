//! Rank and linear correlation coefficients plus the four-parameter
//! logistic mapping used before PLCC.

use nalgebra::{Matrix4, Vector4};

use crate::error::{Error, Result};

fn check(x: &[f64], y: &[f64], min_n: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!(
            "column lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < min_n {
        return Err(Error::InvalidInput(format!(
            "need at least {min_n} pairs, got {}",
            x.len()
        )));
    }
    if let Some(v) = x.iter().chain(y).find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite value {v}")));
    }
    Ok(())
}

/// 1-based ranks; tied values share the average of their ranks.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation; `None` when either column is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation. `Ok(None)` flags a constant column.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    check(x, y, 3)?;
    Ok(pearson(&ranks(x), &ranks(y)))
}

/// Kendall tau-b. `Ok(None)` flags a constant column.
pub fn krcc(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    check(x, y, 3)?;
    let n = x.len();
    let (mut conc, mut disc, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let a = (x[i] - x[j]).partial_cmp(&0.0).expect("finite");
            let b = (y[i] - y[j]).partial_cmp(&0.0).expect("finite");
            use std::cmp::Ordering::Equal;
            match (a, b) {
                (Equal, Equal) => {}
                (Equal, _) => tx += 1,
                (_, Equal) => ty += 1,
                _ if a == b => conc += 1,
                _ => disc += 1,
            }
        }
    }
    let n1 = (conc + disc + tx) as f64;
    let n2 = (conc + disc + ty) as f64;
    if n1 == 0.0 || n2 == 0.0 {
        return Ok(None);
    }
    Ok(Some(((conc - disc) as f64 / (n1 * n2).sqrt()).clamp(-1.0, 1.0)))
}

/// `(a - b) / (1 + exp(-(x - c) / |d|)) + b`
pub fn logistic4(p: &[f64; 4], x: f64) -> f64 {
    let [a, b, c, d] = *p;
    (a - b) / (1.0 + (-(x - c) / d.abs()).exp()) + b
}

#[derive(Clone, Debug, PartialEq)]
pub struct FittedPlcc {
    /// `None` when the fitted predictions or the targets are constant.
    pub plcc: Option<f64>,
    /// Logistic parameters `(a, b, c, d)` in the original score units. With
    /// the linear fallback these are `(slope, intercept, NaN, NaN)`.
    pub params: [f64; 4],
    pub linear_fallback: bool,
}

fn sse(p: &[f64; 4], x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(&a, &b)| (logistic4(p, a) - b).powi(2)).sum()
}

/// Levenberg-Marquardt from one starting point.
fn levenberg_marquardt(mut p: [f64; 4], x: &[f64], y: &[f64], max_iter: usize) -> Option<([f64; 4], f64)> {
    let mut cost = sse(&p, x, y);
    let mut lambda = 1e-3;
    for _ in 0..max_iter {
        let mut jtj = Matrix4::<f64>::zeros();
        let mut jtr = Vector4::<f64>::zeros();
        let (a, b, c, d) = (p[0], p[1], p[2], p[3]);
        let ad = d.abs().max(1e-300);
        for (&xi, &yi) in x.iter().zip(y) {
            let s = 1.0 / (1.0 + (-(xi - c) / ad).exp());
            let ds = s * (1.0 - s);
            let r = (a - b) * s + b - yi;
            let j = Vector4::new(
                s,
                1.0 - s,
                -(a - b) * ds / ad,
                -(a - b) * ds * (xi - c) / (ad * ad) * d.signum(),
            );
            jtj += j * j.transpose();
            jtr += j * r;
        }
        let mut improved = false;
        for _ in 0..30 {
            let mut m = jtj;
            for k in 0..4 {
                m[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = m.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let q = [p[0] + step[0], p[1] + step[1], p[2] + step[2], p[3] + step[3]];
            let qc = sse(&q, x, y);
            if qc.is_finite() && qc <= cost {
                let rel = (cost - qc) / cost.max(1e-300);
                let small_step = step.norm() <= 1e-12 * (1.0 + Vector4::from(p).norm());
                p = q;
                cost = qc;
                lambda = (lambda / 10.0).max(1e-15);
                improved = true;
                if rel < 1e-15 || small_step {
                    return Some((p, cost));
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e15 {
                break;
            }
        }
        if !improved {
            break;
        }
    }
    p.iter().all(|v| v.is_finite()).then_some((p, cost))
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Midpoints between consecutive sorted values, thinned to at most 15
/// evenly spaced ones.
fn start_centres(z: &[f64]) -> Vec<f64> {
    let mut s = z.to_vec();
    s.sort_by(f64::total_cmp);
    let mids: Vec<f64> = s.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    const MAX: usize = 15;
    if mids.len() <= MAX {
        return mids;
    }
    (0..MAX).map(|i| mids[(i * (mids.len() - 1)) / (MAX - 1)]).collect()
}

/// Fits the four-parameter logistic from `scores` to `mos` and returns the
/// Pearson correlation of the mapped scores with `mos`.
///
/// Scores are standardised before fitting, so the result does not depend
/// on their affine scale. Starts: a = max mos, b = min mos, c = median,
/// d = std, four jittered (c, d) variants and a grid of centres between
/// the sorted scores, each tried in both orientations; the lowest residual
/// wins.
pub fn plcc_fitted(scores: &[f64], mos: &[f64]) -> Result<FittedPlcc> {
    check(scores, mos, 8)?;
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let std = (scores.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let ymax = mos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ymin = mos.iter().copied().fold(f64::INFINITY, f64::min);
    if std == 0.0 || ymax == ymin {
        return Ok(FittedPlcc {
            plcc: None,
            params: [ymax, ymin, mean, std],
            linear_fallback: false,
        });
    }
    let z: Vec<f64> = scores.iter().map(|v| (v - mean) / std).collect();
    let c0 = median(&z);
    let mut starts: Vec<(f64, f64)> = [(0.0, 1.0), (0.5, 1.0), (-0.5, 1.0), (0.0, 0.5), (0.0, 2.0)]
        .iter()
        .map(|&(dc, fd)| (c0 + dc, fd))
        .collect();
    // The SSE surface has several basins on small or clustered samples, so
    // also start from centres spread over the data at several widths.
    for c in start_centres(&z) {
        for d in [0.01, 0.1, 0.5, 1.0, 3.0] {
            starts.push((c, d));
        }
    }
    // Short runs from every start, then the most promising few are run to
    // convergence; some optima lie far out along a slowly descending valley.
    let mut rough: Vec<([f64; 4], f64)> = Vec::new();
    for (c, d) in starts {
        for (a, b) in [(ymax, ymin), (ymin, ymax)] {
            rough.extend(levenberg_marquardt([a, b, c, d], &z, mos, 200));
        }
    }
    rough.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut best: Option<([f64; 4], f64)> = None;
    for (p0, _) in rough.into_iter().take(3) {
        if let Some((p, c)) = levenberg_marquardt(p0, &z, mos, 20_000) {
            if best.as_ref().is_none_or(|(_, bc)| c < *bc) {
                best = Some((p, c));
            }
        }
    }

    // least-squares line for the divergence check / fallback
    let my = mos.iter().sum::<f64>() / n;
    let szz: f64 = z.iter().map(|v| v * v).sum();
    let slope = z.iter().zip(mos).map(|(a, b)| a * (b - my)).sum::<f64>() / szz;
    let lin_sse: f64 = z.iter().zip(mos).map(|(a, b)| (my + slope * a - b).powi(2)).sum();
    let sst: f64 = mos.iter().map(|b| (b - my).powi(2)).sum();

    match best {
        Some((p, cost)) if cost <= lin_sse + 1e-2 * sst => {
            let pred: Vec<f64> = z.iter().map(|&v| logistic4(&p, v)).collect();
            Ok(FittedPlcc {
                plcc: pearson(&pred, mos),
                params: [p[0], p[1], mean + std * p[2], std * p[3].abs()],
                linear_fallback: false,
            })
        }
        _ => Ok(FittedPlcc {
            plcc: pearson(scores, mos).map(f64::abs),
            params: [slope / std, my - slope * mean / std, f64::NAN, f64::NAN],
            linear_fallback: true,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotone_examples() {
        let close = |v: Option<f64>, t: f64| (v.unwrap() - t).abs() < 1e-12;
        assert!(close(srcc(&[1.0, 2.0, 3.0], &[0.1, 0.5, 0.9]).unwrap(), 1.0));
        assert!(close(srcc(&[1.0, 2.0, 3.0], &[0.9, 0.5, 0.1]).unwrap(), -1.0));
        let k = krcc(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap().unwrap();
        assert!((k - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(krcc(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap(), Some(1.0));
    }

    #[test]
    fn degenerate_columns_are_flagged() {
        assert_eq!(srcc(&[1.0, 1.0, 1.0], &[0.1, 0.5, 0.9]).unwrap(), None);
        assert_eq!(krcc(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap(), None);
        assert!(srcc(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(plcc_fitted(&[1.0; 10], &[0.5; 10]).unwrap().plcc.is_none());
    }

    #[test]
    fn average_ranks_for_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn recovers_synthetic_logistic() {
        let truth = [0.9, 0.1, 2.0, 0.7];
        let x: Vec<f64> = (0..40).map(|i| i as f64 * 0.1).collect();
        let y: Vec<f64> = x.iter().map(|&v| logistic4(&truth, v)).collect();
        let f = plcc_fitted(&x, &y).unwrap();
        assert!(!f.linear_fallback);
        assert!((f.plcc.unwrap() - 1.0).abs() < 1e-9);
        for (p, t) in f.params.iter().zip(truth) {
            assert!((p - t).abs() < 1e-3, "{:?}", f.params);
        }
    }

    #[test]
    fn linear_and_anticorrelated_data() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.1 + 0.04 * v).collect();
        let up = plcc_fitted(&x, &y).unwrap().plcc.unwrap();
        assert!(up > 1.0 - 1e-4);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let down = plcc_fitted(&neg, &y).unwrap().plcc.unwrap();
        assert!((up.abs() - down.abs()).abs() < 1e-9);
    }
}
