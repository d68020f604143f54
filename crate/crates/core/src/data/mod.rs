//! MOS-labelled dataset ingestion, score normalisation and preprocessing.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use image::imageops::{self, FilterType};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::seeded_rng;

mod loaders;
pub mod synthetic;

pub use loaders::{load_csv_manifest, load_csiq, load_kadid, load_pipal, load_tid2013};

/// Short side used for both training and evaluation.
pub const DEFAULT_SHORT_SIDE: usize = 224;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityRecord {
    /// Identifier of the pristine scene, shared by all its distortions.
    pub ref_id: String,
    pub ref_path: PathBuf,
    pub dist_path: PathBuf,
    pub mos_raw: f64,
    /// `[0, 1]`, 1 = best quality.
    pub mos: f64,
    pub distortion_type: u32,
    pub distortion_level: Option<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub name: String,
    pub role: Role,
    pub records: Vec<QualityRecord>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ref_ids(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.ref_id.clone()).collect()
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    fn derive(&self, suffix: &str, records: Vec<QualityRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptySplit(format!("{}{suffix}", self.name)));
        }
        Ok(Self {
            name: format!("{}{suffix}", self.name),
            role: self.role,
            records,
        })
    }

    /// Holds out `fraction` of the references (at least one) as a
    /// validation split. Reference-disjoint, seeded.
    pub fn split_by_refs(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        let mut refs: Vec<String> = self.ref_ids().into_iter().collect();
        if refs.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "{}: need at least two references for a validation split",
                self.name
            )));
        }
        refs.shuffle(&mut seeded_rng(seed, 0x5eed));
        let n_val = ((refs.len() as f64 * fraction).round() as usize).clamp(1, refs.len() - 1);
        let val: BTreeSet<&String> = refs[..n_val].iter().collect();
        let (v, t): (Vec<_>, Vec<_>) = self.records.iter().cloned().partition(|r| val.contains(&r.ref_id));
        Ok((self.derive("", t)?, self.derive("-val", v)?.with_role(Role::Test)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Kadid,
    Tid2013,
    Csiq,
    Pipal,
    /// Generic `ref_path,dist_path,score` manifest.
    Csv,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Kadid => "kadid",
            DatasetKind::Tid2013 => "tid2013",
            DatasetKind::Csiq => "csiq",
            DatasetKind::Pipal => "pipal",
            DatasetKind::Csv => "csv",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "kadid" | "kadid10k" | "kadid-10k" => Ok(DatasetKind::Kadid),
            "tid" | "tid2013" => Ok(DatasetKind::Tid2013),
            "csiq" => Ok(DatasetKind::Csiq),
            "pipal" => Ok(DatasetKind::Pipal),
            "csv" => Ok(DatasetKind::Csv),
            other => Err(Error::InvalidInput(format!(
                "unknown dataset '{other}' (expected kadid, tid2013, csiq, pipal or csv)"
            ))),
        }
    }
}

pub fn load_dataset(root: impl AsRef<Path>, kind: DatasetKind) -> Result<DatasetSplit> {
    let root = root.as_ref();
    let split = match kind {
        DatasetKind::Kadid => load_kadid(root)?,
        DatasetKind::Tid2013 => load_tid2013(root)?,
        DatasetKind::Csiq => load_csiq(root)?,
        DatasetKind::Pipal => load_pipal(root)?,
        DatasetKind::Csv => load_csv_manifest(root)?,
    };
    check_files(&split)?;
    Ok(split)
}

fn check_files(split: &DatasetSplit) -> Result<()> {
    let mut missing: BTreeSet<PathBuf> = BTreeSet::new();
    for r in &split.records {
        for p in [&r.ref_path, &r.dist_path] {
            if !p.is_file() {
                missing.insert(p.clone());
            }
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::UnreadableRecords {
            paths: missing.into_iter().collect(),
        })
    }
}

/// Affine map of `raw` from `[lo, hi]` onto `[0, 1]`; with `flip` the
/// orientation is reversed so 1 stays "best".
pub(crate) fn normalize(raw: f64, lo: f64, hi: f64, flip: bool) -> f64 {
    let t = if hi > lo { (raw - lo) / (hi - lo) } else { 0.5 };
    let t = t.clamp(0.0, 1.0);
    if flip {
        1.0 - t
    } else {
        t
    }
}

/// Resizes so the shorter side equals `short_side`, preserving aspect ratio,
/// with an antialiased bilinear (triangle) filter.
pub fn preprocess(img: &Image, short_side: usize) -> Result<Image> {
    if short_side < Image::MIN_SIDE {
        return Err(Error::InvalidInput(format!(
            "short side must be at least {}, got {short_side}",
            Image::MIN_SIDE
        )));
    }
    let (h, w) = img.dims();
    if h.min(w) == short_side {
        return Ok(img.clone());
    }
    let (nh, nw) = target_size(h, w, short_side);
    let src = img.to_rgb32f()?;
    let mut out = imageops::resize(&src, nw as u32, nh as u32, FilterType::Triangle);
    out.pixels_mut()
        .for_each(|p| p.0.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0)));
    Image::from_rgb32f(&out)
}

pub fn target_size(h: usize, w: usize, short_side: usize) -> (usize, usize) {
    if h <= w {
        let nw = (w as f64 * short_side as f64 / h as f64).round() as usize;
        (short_side, nw)
    } else {
        let nh = (h as f64 * short_side as f64 / w as f64).round() as usize;
        (nh, short_side)
    }
}

/// Loads and preprocesses both images of a record, caching references.
pub struct PairLoader {
    short_side: Option<usize>,
    refs: Mutex<HashMap<PathBuf, Image>>,
}

impl PairLoader {
    /// `None` keeps native resolution.
    pub fn new(short_side: Option<usize>) -> Self {
        Self {
            short_side,
            refs: Mutex::new(HashMap::new()),
        }
    }

    fn prep(&self, img: Image) -> Result<Image> {
        match self.short_side {
            Some(s) => preprocess(&img, s),
            None => Ok(img),
        }
    }

    pub fn load(&self, rec: &QualityRecord) -> Result<(Image, Image)> {
        let cached = self.refs.lock().expect("cache lock").get(&rec.ref_path).cloned();
        let (r_native, r) = match cached {
            Some(r) => (None, r),
            None => {
                let native = Image::load(&rec.ref_path)?;
                let r = self.prep(native.clone())?;
                self.refs
                    .lock()
                    .expect("cache lock")
                    .insert(rec.ref_path.clone(), r.clone());
                (Some(native), r)
            }
        };
        let d_native = Image::load(&rec.dist_path)?;
        if let Some(rn) = r_native {
            if rn.dims() != d_native.dims() {
                return Err(dims_error(rec, rn.dims(), d_native.dims()));
            }
        }
        let d = self.prep(d_native)?;
        if d.dims() != r.dims() {
            return Err(dims_error(rec, r.dims(), d.dims()));
        }
        Ok((r, d))
    }
}

fn dims_error(rec: &QualityRecord, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::ShapeMismatch(format!(
        "{} is {}x{} but {} is {}x{}",
        rec.ref_path.display(),
        a.0,
        a.1,
        rec.dist_path.display(),
        b.0,
        b.1
    ))
}

/// How to restrict the set of reference scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RefSelection {
    Ids(BTreeSet<String>),
    /// `count` scenes drawn without replacement using `seed`.
    Random { count: usize, seed: u64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationFilter {
    pub levels: Option<BTreeSet<u32>>,
    pub refs: Option<RefSelection>,
    pub types: Option<BTreeSet<u32>>,
}

impl AblationFilter {
    pub fn is_empty(&self) -> bool {
        self.levels.is_none() && self.refs.is_none() && self.types.is_none()
    }

    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        if let Some(l) = &self.levels {
            parts.push(format!("levels={}", join(l)));
        }
        match &self.refs {
            Some(RefSelection::Ids(ids)) => parts.push(format!("refs={}", ids.len())),
            Some(RefSelection::Random { count, seed }) => parts.push(format!("refs={count}@{seed}")),
            None => {}
        }
        if let Some(t) = &self.types {
            parts.push(format!("types={}", join(t)));
        }
        if parts.is_empty() {
            "all".into()
        } else {
            parts.join(";")
        }
    }
}

fn join<T: ToString>(s: &BTreeSet<T>) -> String {
    s.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn filter_ablation(split: &DatasetSplit, filter: &AblationFilter) -> Result<DatasetSplit> {
    if filter.is_empty() {
        return Ok(split.clone());
    }
    let present_levels: BTreeSet<u32> = split.records.iter().filter_map(|r| r.distortion_level).collect();
    let present_types: BTreeSet<u32> = split.records.iter().map(|r| r.distortion_type).collect();
    let present_refs = split.ref_ids();

    if let Some(levels) = &filter.levels {
        if let Some(l) = levels.iter().find(|l| !present_levels.contains(l)) {
            return Err(Error::InvalidInput(format!("{}: no distortion level {l}", split.name)));
        }
    }
    if let Some(types) = &filter.types {
        if let Some(t) = types.iter().find(|t| !present_types.contains(t)) {
            return Err(Error::InvalidInput(format!("{}: no distortion type {t}", split.name)));
        }
    }
    let refs: Option<BTreeSet<String>> = match &filter.refs {
        None => None,
        Some(RefSelection::Ids(ids)) => {
            if let Some(r) = ids.iter().find(|r| !present_refs.contains(*r)) {
                return Err(Error::InvalidInput(format!("{}: no reference '{r}'", split.name)));
            }
            Some(ids.clone())
        }
        Some(RefSelection::Random { count, seed }) => {
            if *count > present_refs.len() {
                return Err(Error::InvalidInput(format!(
                    "{}: asked for {count} references but only {} exist",
                    split.name,
                    present_refs.len()
                )));
            }
            let mut all: Vec<String> = present_refs.iter().cloned().collect();
            all.shuffle(&mut seeded_rng(*seed, 0x4ef5));
            Some(all.into_iter().take(*count).collect())
        }
    };
    let records: Vec<QualityRecord> = split
        .records
        .iter()
        .filter(|r| {
            filter
                .levels
                .as_ref()
                .is_none_or(|l| r.distortion_level.is_some_and(|v| l.contains(&v)))
                && filter.types.as_ref().is_none_or(|t| t.contains(&r.distortion_type))
                && refs.as_ref().is_none_or(|s| s.contains(&r.ref_id))
        })
        .cloned()
        .collect();
    split.derive(&format!("[{}]", filter.describe()), records)
}

/// Distortion-type groups per dataset (e.g. "noise", "blur").
pub fn category_groups() -> &'static BTreeMap<String, BTreeMap<String, Vec<u32>>> {
    static GROUPS: std::sync::OnceLock<BTreeMap<String, BTreeMap<String, Vec<u32>>>> = std::sync::OnceLock::new();
    GROUPS.get_or_init(|| {
        serde_json::from_str(include_str!("../../data/categories.json")).expect("bundled category table parses")
    })
}

/// Types in `group` for `dataset`. `"all"` yields `None` (no filter);
/// `a&b` unions groups.
pub fn category_types(dataset: DatasetKind, group: &str) -> Result<Option<BTreeSet<u32>>> {
    if group == "all" {
        return Ok(None);
    }
    let key = match dataset {
        DatasetKind::Kadid => "kadid",
        DatasetKind::Tid2013 => "tid2013",
        other => {
            return Err(Error::InvalidInput(format!(
                "no distortion category table for {other}"
            )))
        }
    };
    let table = &category_groups()[key];
    let mut out = BTreeSet::new();
    for g in group.split(['&', '+']) {
        let g = g.trim();
        let ids = table
            .get(g)
            .ok_or_else(|| Error::InvalidInput(format!("unknown category '{g}' for {key}")))?;
        out.extend(ids.iter().copied());
    }
    Ok(Some(out))
}
