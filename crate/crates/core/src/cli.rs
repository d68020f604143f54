//! Command-line front end.
//!
//! Every flag can also be given in a flat `key = value` config file passed
//! with `--config`; keys are the long flag names without dashes-prefix
//! (`data-root = /data/kadid10k`). Flags on the command line win. Exit codes:
//! 0 success, 2 invalid usage or input, 1 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::{
    category_groups, filter_ablation, load_dataset, synthetic, AblationFilter, DatasetKind, DatasetSplit, RefSelection,
};
use crate::deep::DeepMetrics;
use crate::error::{Error, Result};
use crate::evaluation::{benchmark, write_reports, MetricSpec};
use crate::image::Image;
use crate::masking::EnhancedMetric;
use crate::metrics::{MetricContext, MetricId, DEFAULT_PPD};
use crate::restoration::{run_denoise_demo, DenoiseConfig, DenoiseLoss, TEST_SIGMAS};
use crate::training::ablation::{run_ablation_categories, run_ablation_levels, run_ablation_refs};
use crate::training::{resume, train, TrainConfig};
use crate::visualization::{
    calibrate_slope, contrast_sweep, primary_mask, render_error_map, render_mask, RenderSpec, CONTRAST_FACTORS,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "vismask", version, about = "Learned visual masking for image quality metrics")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Train an enhanced metric's mask generator on a quality dataset.
    Train(TrainCmd),
    /// Correlate metrics with human scores on test datasets.
    Eval(EvalCmd),
    /// Render a metric's error map for one image pair.
    Errmap(ErrmapCmd),
    /// Render the learned mask for one image pair.
    Maskviz(MaskvizCmd),
    /// Run a training ablation (levels, refs or categories).
    Ablate(AblateCmd),
    /// Train denoisers with MAE and E-MAE losses and compare them.
    DenoiseDemo(DenoiseCmd),
    /// Write a small synthetic quality dataset (for smoke tests and demos).
    MakeSynthetic(SynthCmd),
}

#[derive(Debug, Args, Serialize)]
struct Common {
    /// Flat key = value file providing defaults for any flag.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Backbone weight manifest, needed by vgg, lpips and dists.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Allow equal DISTS weights when the manifest lacks them.
    #[arg(long)]
    dists_fallback: bool,
    /// Pixels per degree for FLIP.
    #[arg(long, default_value_t = DEFAULT_PPD)]
    ppd: f64,
}

#[derive(Debug, Args, Serialize)]
struct TrainOpts {
    #[arg(long, default_value = "mae")]
    metric: String,
    /// Dataset directory (or a manifest.csv for --dataset csv).
    #[arg(long)]
    data_root: PathBuf,
    #[arg(long, default_value = "kadid")]
    dataset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1e-6)]
    weight_decay: f64,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    /// Resize so the short side has this length; 0 keeps native size.
    #[arg(long, default_value_t = crate::data::DEFAULT_SHORT_SIDE)]
    short_side: usize,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Train only on these distortion levels.
    #[arg(long, value_delimiter = ',')]
    levels: Vec<u32>,
    /// Train only on these distortion type ids, or a category name.
    #[arg(long)]
    types: Option<String>,
    /// Train only on this many randomly chosen references.
    #[arg(long)]
    refs: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct TrainCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainOpts,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct EvalCmd {
    #[command(flatten)]
    common: Common,
    /// Comma-separated `kind` or `kind=PATH` entries.
    #[arg(long, value_delimiter = ',')]
    datasets: Vec<String>,
    /// Parent directory for datasets given without a path.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Base metrics to report; defaults to the pixel metrics, plus the
    /// feature-space ones when weights are given.
    #[arg(long, value_delimiter = ',')]
    metrics: Vec<String>,
    /// Directory of enhanced-metric checkpoints (*.ckpt) to add.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = crate::data::DEFAULT_SHORT_SIDE)]
    short_side: usize,
}

#[derive(Debug, Args, Serialize)]
struct PairArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    dist: PathBuf,
    #[arg(long)]
    metric: Option<String>,
    /// Enhanced-metric checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output PNG; a JSON sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ErrmapCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    pair: PairArgs,
    /// Sigmoid slope for unbounded maps; calibrated on the map if absent.
    #[arg(long)]
    slope: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
struct MaskvizCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    pair: PairArgs,
    /// Also render masks at x0.5, x1 and x2 contrast.
    #[arg(long)]
    contrast_sweep: bool,
}

#[derive(Debug, Args, Serialize)]
struct AblateCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainOpts,
    /// levels, refs or categories.
    #[arg(long)]
    ablation: String,
    /// Test datasets, as for `eval --datasets`.
    #[arg(long, value_delimiter = ',')]
    test_datasets: Vec<String>,
    #[arg(long)]
    test_root: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "10,20,40,60,81")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    runs: usize,
    #[arg(long, value_delimiter = ',', default_value = "noise,blur,noise&blur,all")]
    groups: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct DenoiseCmd {
    #[command(flatten)]
    common: Common,
    /// Directory of clean training images.
    #[arg(long)]
    train_root: PathBuf,
    /// Comma-separated test image directories (`name=PATH` or `PATH`).
    #[arg(long, value_delimiter = ',')]
    test_roots: Vec<String>,
    #[arg(long)]
    emae_checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_values_t = TEST_SIGMAS)]
    sigmas: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 200)]
    steps_per_epoch: usize,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 40)]
    patch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = crate::restoration::DEFAULT_DEPTH)]
    depth: usize,
    #[arg(long, default_value_t = crate::restoration::DEFAULT_WIDTH)]
    width: usize,
}

#[derive(Debug, Args, Serialize)]
struct SynthCmd {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    refs: usize,
    #[arg(long, default_value_t = 64)]
    side: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A user-facing failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidInput(_)
            | Error::ShapeMismatch(_)
            | Error::Config(_)
            | Error::EmptySplit(_)
            | Error::MissingScoreFile { .. } => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses a flat `key = value` file: `#` starts a comment, blank lines are
/// ignored, and `true`/`false` toggle switches.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split_once('#').map_or(raw, |x| x.0).trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", i + 1)))?;
        let k = k.trim().trim_start_matches("--").replace('_', "-");
        if k.is_empty() {
            return Err(Error::Config(format!("config line {}: empty key", i + 1)));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

fn find_config(args: &[String]) -> Option<PathBuf> {
    let mut it = args.iter();
    let mut found = None;
    while let Some(a) = it.next() {
        if a == "--config" {
            found = it.next().map(PathBuf::from);
        } else if let Some(p) = a.strip_prefix("--config=") {
            found = Some(PathBuf::from(p));
        }
    }
    found
}

/// Inserts config-file values as flags right after the subcommand so that
/// later command-line occurrences override them.
fn expand_config(args: Vec<String>) -> CliResult<Vec<String>> {
    let Some(path) = find_config(&args) else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let entries = parse_config(&text).map_err(Failure::from)?;
    let mut injected = Vec::new();
    for (k, v) in entries {
        if k == "config" {
            continue;
        }
        match v.as_str() {
            "true" => injected.push(format!("--{k}")),
            "false" => {}
            _ => {
                injected.push(format!("--{k}"));
                injected.push(v);
            }
        }
    }
    let sub = args.iter().skip(1).position(|a| !a.starts_with('-')).map(|i| i + 2);
    let Some(at) = sub else {
        return Ok(args);
    };
    let mut out = args[..at].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[at..]);
    Ok(out)
}

#[derive(Serialize)]
struct EffectiveConfig<'a> {
    tool: &'static str,
    version: &'static str,
    git_revision: Option<&'static str>,
    argv: &'a [String],
    command: &'a Command,
}

fn write_effective_config(path: &Path, argv: &[String], command: &Command) -> CliResult<()> {
    let cfg = EffectiveConfig {
        tool: "vismask",
        version: env!("CARGO_PKG_VERSION"),
        git_revision: option_env!("VISMASK_GIT_REV"),
        argv,
        command,
    };
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::from(Error::io(dir, e)))?;
    }
    let text = serde_json::to_string_pretty(&cfg).map_err(|e| Failure::from(Error::from(e)))?;
    fs::write(path, text + "\n").map_err(|e| Failure::from(Error::io(path, e)))
}

/// `foo.png` -> `foo.config.json`; directories get `effective_config.json`.
fn config_path_for(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        return out.join("effective_config.json");
    }
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    out.with_file_name(format!("{stem}.config.json"))
}

fn context(common: &Common) -> CliResult<MetricContext> {
    if !(common.ppd > 0.0 && common.ppd.is_finite()) {
        return Err(usage("--ppd must be positive"));
    }
    let mut ctx = match &common.weights {
        Some(p) => {
            if !p.exists() {
                return Err(usage(format!("weights manifest {} does not exist", p.display())));
            }
            MetricContext::with_deep(Arc::new(DeepMetrics::load(p, common.dists_fallback)?))
        }
        None => MetricContext::default(),
    };
    ctx.ppd = common.ppd;
    Ok(ctx)
}

fn parse_metric(s: &str) -> CliResult<MetricId> {
    s.parse::<MetricId>().map_err(Failure::from)
}

fn short_side(v: usize) -> Option<usize> {
    (v > 0).then_some(v)
}

fn default_dir(kind: DatasetKind) -> &'static str {
    match kind {
        DatasetKind::Kadid => "kadid10k",
        DatasetKind::Tid2013 => "tid2013",
        DatasetKind::Csiq => "csiq",
        DatasetKind::Pipal => "pipal",
        DatasetKind::Csv => "manifest.csv",
    }
}

/// `kind` (under `root`) or `kind=PATH`.
fn resolve_dataset(spec: &str, root: Option<&Path>) -> CliResult<(DatasetKind, PathBuf)> {
    let (kind, path) = match spec.split_once('=') {
        Some((k, p)) => (k.parse::<DatasetKind>()?, PathBuf::from(p)),
        None => {
            let kind = spec.parse::<DatasetKind>()?;
            let root = root.ok_or_else(|| usage(format!("dataset '{spec}' needs a path (kind=PATH) or --data-root")))?;
            (kind, root.join(default_dir(kind)))
        }
    };
    if !path.exists() {
        return Err(usage(format!("data root {} does not exist", path.display())));
    }
    Ok((kind, path))
}

fn load_test_sets(specs: &[String], root: Option<&Path>) -> CliResult<Vec<DatasetSplit>> {
    let specs: Vec<&String> = specs.iter().filter(|s| !s.trim().is_empty()).collect();
    if specs.is_empty() {
        return Err(usage("no datasets given"));
    }
    specs
        .iter()
        .map(|s| {
            let (kind, path) = resolve_dataset(s, root)?;
            Ok(load_dataset(path, kind)?.with_role(crate::data::Role::Test))
        })
        .collect()
}

fn train_config(opts: &TrainOpts, ppd: f64) -> CliResult<(TrainConfig, DatasetSplit, DatasetKind)> {
    let metric = parse_metric(&opts.metric)?;
    let kind: DatasetKind = opts.dataset.parse()?;
    if !opts.data_root.exists() {
        return Err(usage(format!("data root {} does not exist", opts.data_root.display())));
    }
    let data = load_dataset(&opts.data_root, kind)?;
    let types = match &opts.types {
        None => None,
        Some(t) if t.chars().all(|c| c.is_ascii_digit() || c == ',' || c == ' ') => Some(
            t.split(',')
                .filter(|x| !x.trim().is_empty())
                .map(|x| x.trim().parse::<u32>().map_err(|e| usage(format!("--types: {e}"))))
                .collect::<CliResult<_>>()?,
        ),
        Some(group) => crate::data::category_types(kind, group)?,
    };
    let filter = AblationFilter {
        levels: (!opts.levels.is_empty()).then(|| opts.levels.iter().copied().collect()),
        refs: opts.refs.map(|count| RefSelection::Random { count, seed: opts.seed }),
        types,
    };
    let cfg = TrainConfig {
        learning_rate: opts.lr,
        weight_decay: opts.weight_decay,
        batch_size: opts.batch_size,
        epochs: opts.epochs,
        seed: opts.seed,
        filter,
        short_side: short_side(opts.short_side),
        val_fraction: opts.val_fraction,
        max_steps: opts.max_steps,
        ppd,
        ..TrainConfig::new(metric)
    };
    cfg.validate()?;
    // fail on an empty filter before any work is done
    filter_ablation(&data, &cfg.filter)?;
    Ok((cfg, data, kind))
}

fn cmd_train(c: &TrainCmd, argv: &[String], command: &Command) -> CliResult<()> {
    let ctx = context(&c.common)?;
    let (cfg, data, _) = train_config(&c.train, c.common.ppd)?;
    write_effective_config(&config_path_for(&c.out, true), argv, command)?;
    let outcome = match &c.resume {
        Some(from) => resume(&cfg, &data, &ctx, &c.out, from)?,
        None => train(&cfg, &data, &ctx, &c.out)?,
    };
    println!("checkpoint: {}", outcome.checkpoint.display());
    println!("steps: {}", outcome.steps);
    if let Some(v) = outcome.best_val_srcc {
        println!("best validation srcc: {v:.4}");
    }
    Ok(())
}

fn enhanced_checkpoints(dir: &Path) -> CliResult<Vec<MetricSpec>> {
    if !dir.is_dir() {
        return Err(usage(format!("checkpoint directory {} does not exist", dir.display())));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Failure::from(Error::io(dir, e)))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        match EnhancedMetric::load(&p) {
            Ok(m) => out.push(MetricSpec::Enhanced(Box::new(m))),
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    Ok(out)
}

fn cmd_eval(c: &EvalCmd, argv: &[String], command: &Command) -> CliResult<()> {
    let ctx = context(&c.common)?;
    let datasets = load_test_sets(&c.datasets, c.data_root.as_deref())?;
    let mut metrics: Vec<MetricSpec> = if c.metrics.is_empty() {
        MetricId::ALL
            .iter()
            .filter(|m| ctx.deep.is_some() || !m.is_feature_space())
            .map(|&m| MetricSpec::Base(m))
            .collect()
    } else {
        c.metrics
            .iter()
            .map(|m| parse_metric(m).map(MetricSpec::Base))
            .collect::<CliResult<_>>()?
    };
    if let Some(dir) = &c.checkpoints {
        metrics.extend(enhanced_checkpoints(dir)?);
    }
    write_effective_config(&config_path_for(&c.report, false), argv, command)?;
    let reports = benchmark(&ctx, &metrics, &datasets, short_side(c.short_side))?;
    write_reports(&c.report, &reports)?;
    println!("report: {}", c.report.with_extension("csv").display());
    for r in &reports {
        println!(
            "{:<10} {:<12} srcc {:.4} plcc {:.4} krcc {:.4}",
            r.dataset, r.metric, r.srcc, r.plcc, r.krcc
        );
    }
    Ok(())
}

fn load_pair(p: &PairArgs) -> CliResult<(Image, Image)> {
    for f in [&p.reference, &p.dist] {
        if !f.is_file() {
            return Err(usage(format!("image {} does not exist", f.display())));
        }
    }
    let r = Image::load(&p.reference)?;
    let d = Image::load(&p.dist)?;
    if r.dims() != d.dims() {
        return Err(usage(format!(
            "reference is {:?} but distorted image is {:?}",
            r.dims(),
            d.dims()
        )));
    }
    Ok((r, d))
}

fn load_enhanced(p: &PairArgs) -> CliResult<Option<EnhancedMetric>> {
    let Some(path) = &p.checkpoint else {
        return Ok(None);
    };
    if !path.is_file() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    let m = EnhancedMetric::load(path)?;
    if let Some(name) = &p.metric {
        if parse_metric(name)? != m.base {
            return Err(usage(format!("--metric {name} does not match the checkpoint ({})", m.name())));
        }
    }
    Ok(Some(m))
}

fn cmd_errmap(c: &ErrmapCmd, argv: &[String], command: &Command) -> CliResult<()> {
    let ctx = context(&c.common)?;
    let (r, d) = load_pair(&c.pair)?;
    let enhanced = load_enhanced(&c.pair)?;
    let metric = match (&enhanced, &c.pair.metric) {
        (Some(m), _) => m.base,
        (None, Some(name)) => parse_metric(name)?,
        (None, None) => return Err(usage("errmap needs --metric or --checkpoint")),
    };
    let result = match &enhanced {
        Some(m) => m.evaluate(&ctx, &r, &d)?,
        None => ctx.evaluate(metric, &r, &d)?,
    };
    let Some(map) = result.error_map.as_ref() else {
        return Err(usage(format!("{} does not produce an error map", result.metric)));
    };
    let k = match c.slope {
        Some(k) => k,
        None => calibrate_slope([map]).unwrap_or(1.0),
    };
    let spec = RenderSpec::for_metric(metric, k, &c.pair.out);
    write_effective_config(&config_path_for(&c.pair.out, false), argv, command)?;
    render_error_map(&result, &spec)?;
    println!("{} = {:.6}", result.metric, result.score);
    println!("error map: {}", c.pair.out.display());
    Ok(())
}

fn cmd_maskviz(c: &MaskvizCmd, argv: &[String], command: &Command) -> CliResult<()> {
    let ctx = context(&c.common)?;
    let (r, d) = load_pair(&c.pair)?;
    let m = load_enhanced(&c.pair)?.ok_or_else(|| usage("maskviz needs --checkpoint"))?;
    write_effective_config(&config_path_for(&c.pair.out, false), argv, command)?;
    if c.contrast_sweep {
        let dir = c.pair.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let stem = c.pair.out.file_stem().and_then(|s| s.to_str()).unwrap_or("mask");
        for item in contrast_sweep(&ctx, &m, &r, &d, &CONTRAST_FACTORS, dir, stem)? {
            println!("x{}: {}", item.factor, item.info.image.display());
        }
    } else {
        let mask = primary_mask(&ctx, &m, &r, &d)?;
        render_mask(&mask, &RenderSpec::for_metric(MetricId::Mae, 1.0, &c.pair.out))?;
        println!("mask: {}", c.pair.out.display());
    }
    Ok(())
}

fn cmd_ablate(c: &AblateCmd, argv: &[String], command: &Command) -> CliResult<()> {
    let ctx = context(&c.common)?;
    let (cfg, data, kind) = train_config(&c.train, c.common.ppd)?;
    let tests = load_test_sets(&c.test_datasets, c.test_root.as_deref())?;
    write_effective_config(&config_path_for(&c.out, true), argv, command)?;
    let report = match c.ablation.as_str() {
        "levels" => run_ablation_levels(&cfg, &data, &tests, &ctx, &c.out)?,
        "refs" => {
            if c.sizes.is_empty() || c.runs == 0 {
                return Err(usage("--sizes and --runs must be non-empty / positive"));
            }
            run_ablation_refs(&cfg, &data, &tests, &ctx, &c.out, &c.sizes, c.runs)?
        }
        "categories" => {
            let known = category_groups();
            for g in &c.groups {
                if g != "all" && g != "noise&blur" && !known.get(kind.as_str()).is_some_and(|m| m.contains_key(g)) {
                    return Err(usage(format!("unknown category group '{g}' for {kind}")));
                }
            }
            let groups: Vec<&str> = c.groups.iter().map(String::as_str).collect();
            run_ablation_categories(&cfg, &data, kind, &groups, &tests, &ctx, &c.out)?
        }
        other => return Err(usage(format!("unknown ablation '{other}' (expected levels, refs or categories)"))),
    };
    let path = c.out.join(format!("ablation_{}.json", c.ablation));
    report.write(&path)?;
    println!("report: {} ({} rows)", path.display(), report.rows.len());
    Ok(())
}

fn cmd_denoise(c: &DenoiseCmd, argv: &[String], command: &Command) -> CliResult<()> {
    let ctx = context(&c.common)?;
    if !c.train_root.is_dir() {
        return Err(usage(format!("training directory {} does not exist", c.train_root.display())));
    }
    if !c.emae_checkpoint.is_file() {
        return Err(usage(format!("E-MAE checkpoint {} does not exist", c.emae_checkpoint.display())));
    }
    let tests: Vec<(String, PathBuf)> = c
        .test_roots
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| match s.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(s);
                let n = p.file_name().and_then(|n| n.to_str()).unwrap_or(s).to_string();
                (n, p)
            }
        })
        .collect();
    if tests.is_empty() {
        return Err(usage("no test directories given"));
    }
    if let Some((_, p)) = tests.iter().find(|(_, p)| !p.is_dir()) {
        return Err(usage(format!("test directory {} does not exist", p.display())));
    }
    if c.seeds.is_empty() || c.sigmas.iter().any(|s| !(*s >= 0.0)) {
        return Err(usage("--seeds must be non-empty and --sigmas non-negative"));
    }
    let cfg = DenoiseConfig {
        emae_checkpoint: Some(c.emae_checkpoint.clone()),
        epochs: c.epochs,
        steps_per_epoch: c.steps_per_epoch,
        max_steps: c.max_steps,
        batch_size: c.batch_size,
        patch_size: c.patch_size,
        learning_rate: c.lr,
        depth: c.depth,
        width: c.width,
        seed: c.seeds[0],
        ..DenoiseConfig::new(DenoiseLoss::Mae, &c.train_root)
    };
    cfg.validate()?;
    write_effective_config(&config_path_for(&c.out, true), argv, command)?;
    let o = run_denoise_demo(&cfg, &c.seeds, &tests, &c.sigmas, &ctx, &c.out)?;
    println!("report: {}", o.report.display());
    Ok(())
}

fn cmd_synth(c: &SynthCmd, argv: &[String], command: &Command) -> CliResult<()> {
    if c.refs == 0 || c.side < Image::MIN_SIDE {
        return Err(usage(format!("need --refs >= 1 and --side >= {}", Image::MIN_SIDE)));
    }
    let manifest = synthetic::write_dataset(&c.out, c.refs, c.side, c.seed)?;
    write_effective_config(&config_path_for(&c.out, true), argv, command)?;
    println!("manifest: {}", manifest.display());
    Ok(())
}

fn dispatch(command: &Command, argv: &[String]) -> CliResult<()> {
    match command {
        Command::Train(c) => cmd_train(c, argv, command),
        Command::Eval(c) => cmd_eval(c, argv, command),
        Command::Errmap(c) => cmd_errmap(c, argv, command),
        Command::Maskviz(c) => cmd_maskviz(c, argv, command),
        Command::Ablate(c) => cmd_ablate(c, argv, command),
        Command::DenoiseDemo(c) => cmd_denoise(c, argv, command),
        Command::MakeSynthetic(c) => cmd_synth(c, argv, command),
    }
}

/// Runs the tool on `args` (including the program name) and returns the
/// process exit code.
pub fn run(args: Vec<String>) -> i32 {
    let argv = match expand_config(args) {
        Ok(a) => a,
        Err(f) => {
            eprintln!("error: {}", f.message);
            return f.code;
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli.command, &argv) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
