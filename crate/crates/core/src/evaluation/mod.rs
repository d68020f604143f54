//! Correlation statistics and the dataset benchmark runner.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, PairLoader};
use crate::error::{Error, Result};
use crate::masking::EnhancedMetric;
use crate::metrics::{MetricContext, MetricId, Orientation};

pub mod stats;

pub use stats::{krcc, logistic4, pearson, plcc_fitted, ranks, srcc, FittedPlcc};

pub const CSV_HEADER: &str = "dataset,metric,plcc,srcc,krcc,n,fit_a,fit_b,fit_c,fit_d,flags";

/// A metric to benchmark: a base metric or a trained enhanced variant.
pub enum MetricSpec {
    Base(MetricId),
    Enhanced(Box<EnhancedMetric>),
}

impl MetricSpec {
    pub fn label(&self) -> String {
        match self {
            MetricSpec::Base(m) => m.to_string(),
            MetricSpec::Enhanced(e) => e.name(),
        }
    }

    pub fn orientation(&self) -> Orientation {
        match self {
            MetricSpec::Base(m) => m.orientation(),
            MetricSpec::Enhanced(e) => e.base.orientation(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub dataset: String,
    pub metric: String,
    pub plcc: f64,
    pub srcc: f64,
    pub krcc: f64,
    pub n: usize,
    pub fit: [f64; 4],
    pub flags: Vec<String>,
}

/// Correlations of `scores` against `mos`. Scores of lower-is-better
/// metrics are negated first so that a good metric correlates positively.
pub fn correlate(
    dataset: &str,
    metric: &str,
    orientation: Orientation,
    scores: &[f64],
    mos: &[f64],
) -> Result<CorrelationReport> {
    let oriented: Vec<f64> = match orientation {
        Orientation::HigherBetter => scores.to_vec(),
        Orientation::LowerBetter => scores.iter().map(|v| -v).collect(),
    };
    let mut flags = Vec::new();
    let mut unwrap = |v: Option<f64>, name: &str| {
        v.unwrap_or_else(|| {
            flags.push(format!("degenerate_{name}"));
            f64::NAN
        })
    };
    let s = unwrap(srcc(&oriented, mos)?, "srcc");
    let k = unwrap(krcc(&oriented, mos)?, "krcc");
    let (p, fit) = if oriented.len() >= 8 {
        let f = plcc_fitted(&oriented, mos)?;
        let p = unwrap(f.plcc, "plcc");
        if f.linear_fallback {
            flags.push("linear_fallback".into());
        }
        (p, f.params)
    } else {
        flags.push("too_few_for_fit".into());
        (f64::NAN, [f64::NAN; 4])
    };
    Ok(CorrelationReport {
        dataset: dataset.into(),
        metric: metric.into(),
        plcc: p,
        srcc: s,
        krcc: k,
        n: scores.len(),
        fit,
        flags,
    })
}

/// Raw metric scores and MOS for every record of a split.
pub fn score_split(
    ctx: &MetricContext,
    spec: &MetricSpec,
    split: &DatasetSplit,
    loader: &PairLoader,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut scores = Vec::with_capacity(split.len());
    let mut mos = Vec::with_capacity(split.len());
    for rec in &split.records {
        let (r, d) = loader.load(rec)?;
        let res = match spec {
            MetricSpec::Base(m) => ctx.evaluate(*m, &r, &d)?,
            MetricSpec::Enhanced(e) => e.evaluate(ctx, &r, &d)?,
        };
        if !res.score.is_finite() {
            return Err(Error::InvalidInput(format!(
                "{} produced a non-finite score on {}",
                spec.label(),
                rec.dist_path.display()
            )));
        }
        scores.push(res.score);
        mos.push(rec.mos);
    }
    Ok((scores, mos))
}

/// One report per (metric, dataset); all metrics see identical
/// preprocessed pairs.
pub fn benchmark(
    ctx: &MetricContext,
    metrics: &[MetricSpec],
    datasets: &[DatasetSplit],
    short_side: Option<usize>,
) -> Result<Vec<CorrelationReport>> {
    let mut out = Vec::new();
    for ds in datasets {
        let loader = PairLoader::new(short_side);
        for spec in metrics {
            log::info!("scoring {} on {} ({} pairs)", spec.label(), ds.name, ds.len());
            let (scores, mos) = score_split(ctx, spec, ds, &loader)?;
            out.push(correlate(&ds.name, &spec.label(), spec.orientation(), &scores, &mos)?);
        }
    }
    Ok(out)
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "nan".into()
    }
}

pub fn reports_to_csv(reports: &[CorrelationReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        let row = [
            r.dataset.clone(),
            r.metric.clone(),
            fmt(r.plcc),
            fmt(r.srcc),
            fmt(r.krcc),
            r.n.to_string(),
            fmt(r.fit[0]),
            fmt(r.fit[1]),
            fmt(r.fit[2]),
            fmt(r.fit[3]),
            r.flags.join(";"),
        ];
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Writes `<stem>.csv` and `<stem>.json` next to each other.
pub fn write_reports(path: impl AsRef<Path>, reports: &[CorrelationReport]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let csv_path = path.with_extension("csv");
    fs::write(&csv_path, reports_to_csv(reports)).map_err(|e| Error::io(&csv_path, e))?;
    let json_path = path.with_extension("json");
    let json = serde_json::to_string_pretty(reports)?;
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}
