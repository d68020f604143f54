//! Training-data ablations: distortion levels, number of reference scenes
//! and distortion categories. Each variant is trained into its own
//! directory and scored on every test split.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{train, TrainConfig};
use crate::data::{category_types, filter_ablation, AblationFilter, DatasetKind, DatasetSplit, PairLoader, RefSelection};
use crate::error::{Error, Result};
use crate::evaluation::{correlate, score_split, MetricSpec};
use crate::masking::EnhancedMetric;
use crate::metrics::MetricContext;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub dataset: String,
    pub srcc: f64,
    pub plcc: f64,
    pub krcc: f64,
    pub n: usize,
    /// Empty for untrained baselines.
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeSummary {
    pub size: usize,
    pub dataset: String,
    pub runs: usize,
    pub mean_srcc: f64,
    pub std_srcc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub kind: String,
    pub metric: String,
    pub rows: Vec<AblationRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub summary: Vec<SizeSummary>,
}

impl AblationReport {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn srcc(&self, variant: &str, dataset: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.dataset == dataset)
            .map(|r| r.srcc)
    }
}

fn evaluate_rows(
    ctx: &MetricContext,
    spec: &MetricSpec,
    variant: &str,
    checkpoint: &str,
    tests: &[DatasetSplit],
    short_side: Option<usize>,
) -> Result<Vec<AblationRow>> {
    let loader = PairLoader::new(short_side);
    tests
        .iter()
        .map(|t| {
            let (scores, mos) = score_split(ctx, spec, t, &loader)?;
            let c = correlate(&t.name, &spec.label(), spec.orientation(), &scores, &mos)?;
            Ok(AblationRow {
                variant: variant.into(),
                dataset: t.name.clone(),
                srcc: c.srcc,
                plcc: c.plcc,
                krcc: c.krcc,
                n: c.n,
                checkpoint: checkpoint.into(),
            })
        })
        .collect()
}

fn train_and_score(
    cfg: &TrainConfig,
    data: &DatasetSplit,
    tests: &[DatasetSplit],
    ctx: &MetricContext,
    out_dir: &Path,
    variant: &str,
) -> Result<Vec<AblationRow>> {
    let dir = out_dir.join(variant);
    log::info!("ablation variant {variant}: {}", cfg.filter.describe());
    let outcome = train(cfg, data, ctx, &dir)?;
    let model = EnhancedMetric::load(&outcome.checkpoint)?;
    evaluate_rows(
        ctx,
        &MetricSpec::Enhanced(Box::new(model)),
        variant,
        &outcome.checkpoint.to_string_lossy(),
        tests,
        cfg.short_side,
    )
}

/// Five single-level variants plus the all-levels model.
pub fn run_ablation_levels(
    base: &TrainConfig,
    data: &DatasetSplit,
    tests: &[DatasetSplit],
    ctx: &MetricContext,
    out_dir: impl AsRef<Path>,
) -> Result<AblationReport> {
    let out_dir = out_dir.as_ref();
    let levels: BTreeSet<u32> = data.records.iter().filter_map(|r| r.distortion_level).collect();
    if levels.is_empty() {
        return Err(Error::InvalidInput(format!("{} has no distortion levels", data.name)));
    }
    let mut rows = Vec::new();
    for &l in &levels {
        let cfg = TrainConfig {
            filter: AblationFilter {
                levels: Some([l].into()),
                ..base.filter.clone()
            },
            ..base.clone()
        };
        rows.extend(train_and_score(&cfg, data, tests, ctx, out_dir, &format!("level{l}"))?);
    }
    rows.extend(train_and_score(base, data, tests, ctx, out_dir, "all")?);
    Ok(AblationReport {
        kind: "levels".into(),
        metric: base.metric.to_string(),
        rows,
        summary: vec![],
    })
}

/// Random subsets of `sizes` reference scenes, `runs_per_size` seeds each;
/// a size covering every scene is trained once.
pub fn run_ablation_refs(
    base: &TrainConfig,
    data: &DatasetSplit,
    tests: &[DatasetSplit],
    ctx: &MetricContext,
    out_dir: impl AsRef<Path>,
    sizes: &[usize],
    runs_per_size: usize,
) -> Result<AblationReport> {
    let out_dir = out_dir.as_ref();
    let total = data.ref_ids().len();
    if let Some(&s) = sizes.iter().find(|&&s| s == 0 || s > total) {
        return Err(Error::InvalidInput(format!("cannot sample {s} of {total} reference scenes")));
    }
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &size in sizes {
        let runs = if size == total { 1 } else { runs_per_size.max(1) };
        let mut per_run = Vec::new();
        for run in 0..runs {
            let filter = if size == total {
                base.filter.clone()
            } else {
                AblationFilter {
                    refs: Some(RefSelection::Random {
                        count: size,
                        seed: base.seed.wrapping_add(run as u64),
                    }),
                    ..base.filter.clone()
                }
            };
            let cfg = TrainConfig {
                filter,
                seed: base.seed.wrapping_add(run as u64),
                ..base.clone()
            };
            let r = train_and_score(&cfg, data, tests, ctx, out_dir, &format!("refs{size}_run{run}"))?;
            per_run.extend(r.iter().cloned());
            rows.extend(r);
        }
        for t in tests {
            let v: Vec<f64> = per_run.iter().filter(|r| r.dataset == t.name).map(|r| r.srcc).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len().max(2) - 1) as f64;
            summary.push(SizeSummary {
                size,
                dataset: t.name.clone(),
                runs: v.len(),
                mean_srcc: mean,
                std_srcc: if v.len() > 1 { var.sqrt() } else { 0.0 },
            });
        }
    }
    Ok(AblationReport {
        kind: "refs".into(),
        metric: base.metric.to_string(),
        rows,
        summary,
    })
}

/// Splits a test set into category subsets (plus "all") for the category
/// table's columns.
pub fn category_columns(test: &DatasetSplit, kind: DatasetKind, groups: &[&str]) -> Result<Vec<DatasetSplit>> {
    let mut out = Vec::new();
    for g in groups {
        let mut s = match category_types(kind, g)? {
            None => test.clone(),
            Some(types) => filter_ablation(
                test,
                &AblationFilter {
                    types: Some(types),
                    ..Default::default()
                },
            )?,
        };
        s.name = format!("{}-{g}", test.name);
        out.push(s);
    }
    Ok(out)
}

/// Variants trained on category groups of the training set (e.g. `noise`,
/// `blur`, `noise&blur`, `all`), preceded by the untrained base metric row.
pub fn run_ablation_categories(
    base: &TrainConfig,
    data: &DatasetSplit,
    data_kind: DatasetKind,
    groups: &[&str],
    tests: &[DatasetSplit],
    ctx: &MetricContext,
    out_dir: impl AsRef<Path>,
) -> Result<AblationReport> {
    let out_dir = out_dir.as_ref();
    let mut rows = evaluate_rows(ctx, &MetricSpec::Base(base.metric), &base.metric.to_string(), "", tests, base.short_side)?;
    for g in groups {
        let cfg = TrainConfig {
            filter: AblationFilter {
                types: category_types(data_kind, g)?,
                ..base.filter.clone()
            },
            ..base.clone()
        };
        let variant = format!("e-{}({g})", base.metric);
        let dir_name = g.replace('&', "_");
        let mut r = train_and_score(&cfg, data, tests, ctx, out_dir, &dir_name)?;
        r.iter_mut().for_each(|row| row.variant = variant.clone());
        rows.extend(r);
    }
    Ok(AblationReport {
        kind: "categories".into(),
        metric: base.metric.to_string(),
        rows,
        summary: vec![],
    })
}
