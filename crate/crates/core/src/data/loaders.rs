//! Per-dataset score-file parsers. Each one maps the published layout onto
//! [`QualityRecord`]s with `mos` in `[0, 1]`, 1 = best.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use super::{normalize, DatasetSplit, QualityRecord, Role};
use crate::error::{Error, Result};

/// KADID-10k DMOS is on the 1..5 rating scale, higher = better.
pub const KADID_RANGE: (f64, f64) = (1.0, 5.0);
/// TID2013 MOS is on 0..9, higher = better.
pub const TID_RANGE: (f64, f64) = (0.0, 9.0);

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingScoreFile { expected: path })
    }
}

/// Case-insensitive file lookup within one directory. Published archives
/// disagree with their own score files on case (`I01.BMP` vs `i01.bmp`).
struct DirIndex {
    dir: PathBuf,
    files: HashMap<String, PathBuf>,
}

impl DirIndex {
    fn new(dir: PathBuf) -> Self {
        let files = fs::read_dir(&dir)
            .map(|rd| {
                rd.filter_map(|e| e.ok())
                    .map(|e| (e.file_name().to_string_lossy().to_lowercase(), e.path()))
                    .collect()
            })
            .unwrap_or_default();
        Self { dir, files }
    }

    /// Falls back to the literal path so a missing file is reported by name.
    fn resolve(&self, name: &str) -> PathBuf {
        self.files
            .get(&name.to_lowercase())
            .cloned()
            .unwrap_or_else(|| self.dir.join(name))
    }

    /// First existing `stem.<ext>` among `exts`.
    fn resolve_stem(&self, stem: &str, exts: &[&str]) -> PathBuf {
        exts.iter()
            .map(|e| format!("{stem}.{e}").to_lowercase())
            .find_map(|n| self.files.get(&n).cloned())
            .unwrap_or_else(|| self.dir.join(format!("{stem}.{}", exts[0])))
    }
}

fn split(name: &str, records: Vec<QualityRecord>) -> Result<DatasetSplit> {
    if records.is_empty() {
        return Err(Error::Ingestion(format!("{name}: score file has no records")));
    }
    Ok(DatasetSplit {
        name: name.into(),
        role: Role::Test,
        records,
    })
}

fn parse_f64(s: &str, ctx: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Ingestion(format!("{ctx}: '{s}' is not a number")))
}

/// Splits `I01_05_03.png` into ("I01", 5, 3).
fn parse_coded_name(name: &str) -> Option<(String, u32, u32)> {
    let stem = Path::new(name).file_stem()?.to_str()?;
    let mut it = stem.split('_');
    let r = it.next()?.to_string();
    let t = it.next()?.parse().ok()?;
    let l = it.next()?.parse().ok()?;
    Some((r, t, l))
}

/// `dmos.csv` (`dist_img,ref_img,dmos,var`) with images in `images/`.
pub fn load_kadid(root: &Path) -> Result<DatasetSplit> {
    let score_file = require(root.join("dmos.csv"))?;
    let images = DirIndex::new(root.join("images"));
    let mut rdr = csv::Reader::from_path(&score_file).map_err(|e| Error::Ingestion(e.to_string()))?;
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::Ingestion(format!("{}: {e}", score_file.display())))?;
        let ctx = format!("{} row {}", score_file.display(), i + 2);
        let (dist, refn, raw) = match (row.get(0), row.get(1), row.get(2)) {
            (Some(a), Some(b), Some(c)) => (a.trim(), b.trim(), parse_f64(c, &ctx)?),
            _ => return Err(Error::Ingestion(format!("{ctx}: expected dist_img,ref_img,dmos"))),
        };
        let (ref_id, t, l) =
            parse_coded_name(dist).ok_or_else(|| Error::Ingestion(format!("{ctx}: unexpected name '{dist}'")))?;
        records.push(QualityRecord {
            ref_id,
            ref_path: images.resolve(refn),
            dist_path: images.resolve(dist),
            mos_raw: raw,
            mos: normalize(raw, KADID_RANGE.0, KADID_RANGE.1, false),
            distortion_type: t,
            distortion_level: Some(l),
        });
    }
    Ok(split("kadid", records)?.with_role(Role::Train))
}

/// `mos_with_names.txt` lines `<mos> <name>`, with `reference_images/` and
/// `distorted_images/`.
pub fn load_tid2013(root: &Path) -> Result<DatasetSplit> {
    let score_file = require(root.join("mos_with_names.txt"))?;
    let text = fs::read_to_string(&score_file).map_err(|e| Error::io(&score_file, e))?;
    let refs = DirIndex::new(root.join("reference_images"));
    let dists = DirIndex::new(root.join("distorted_images"));
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let ctx = format!("{} line {}", score_file.display(), i + 1);
        let mut parts = line.split_whitespace();
        let (raw, name) = match (parts.next(), parts.next()) {
            (Some(a), Some(b)) => (parse_f64(a, &ctx)?, b),
            _ => return Err(Error::Ingestion(format!("{ctx}: expected '<mos> <name>'"))),
        };
        let (r, t, l) =
            parse_coded_name(name).ok_or_else(|| Error::Ingestion(format!("{ctx}: unexpected name '{name}'")))?;
        let ref_id = r.to_uppercase();
        records.push(QualityRecord {
            ref_path: refs.resolve_stem(&ref_id, &["bmp", "png"]),
            dist_path: dists.resolve(name),
            ref_id,
            mos_raw: raw,
            mos: normalize(raw, TID_RANGE.0, TID_RANGE.1, false),
            distortion_type: t,
            distortion_level: Some(l),
        });
    }
    split("tid2013", records)
}

/// `csiq_dmos.csv` (`image,dst_type,dst_lev,dmos`) exported from the
/// published spreadsheet, `src_imgs/<image>.png` and
/// `dst_imgs/<type>/<image>.<type>.<lev>.png`. DMOS is on [0, 1], lower =
/// better.
pub fn load_csiq(root: &Path) -> Result<DatasetSplit> {
    let score_file = require(root.join("csiq_dmos.csv"))?;
    let refs = DirIndex::new(root.join("src_imgs"));
    let mut rdr = csv::Reader::from_path(&score_file).map_err(|e| Error::Ingestion(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| Error::Ingestion(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Ingestion(format!("{}: missing column '{name}'", score_file.display())))
    };
    let (ci, ct, cl, cd) = (col("image")?, col("dst_type")?, col("dst_lev")?, col("dmos")?);
    let mut type_ids: BTreeMap<String, u32> = BTreeMap::new();
    let mut dist_dirs: HashMap<String, DirIndex> = HashMap::new();
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::Ingestion(format!("{}: {e}", score_file.display())))?;
        let ctx = format!("{} row {}", score_file.display(), i + 2);
        let get = |c: usize| row.get(c).map(str::trim).unwrap_or("");
        let image = get(ci).to_string();
        let dtype = get(ct).to_lowercase();
        let lev: u32 = get(cl)
            .parse()
            .map_err(|_| Error::Ingestion(format!("{ctx}: bad dst_lev")))?;
        let raw = parse_f64(get(cd), &ctx)?;
        let next = type_ids.len() as u32 + 1;
        let tid = *type_ids.entry(dtype.clone()).or_insert(next);
        let dir = dist_dirs
            .entry(dtype.clone())
            .or_insert_with(|| DirIndex::new(root.join("dst_imgs").join(&dtype)));
        records.push(QualityRecord {
            ref_path: refs.resolve_stem(&image, &["png"]),
            dist_path: dir.resolve(&format!("{image}.{dtype}.{lev}.png")),
            ref_id: image,
            mos_raw: raw,
            mos: normalize(raw, 0.0, 1.0, true),
            distortion_type: tid,
            distortion_level: Some(lev),
        });
    }
    split("csiq", records)
}

/// `Train_Label/*.txt` lines `<dist name>,<elo score>`, `Train_Ref/`,
/// `Train_Dist/`. ELO scores have no fixed scale, so the empirical range is
/// used.
pub fn load_pipal(root: &Path) -> Result<DatasetSplit> {
    let label_dir = root.join("Train_Label");
    if !label_dir.is_dir() {
        return Err(Error::MissingScoreFile { expected: label_dir });
    }
    let refs = DirIndex::new(root.join("Train_Ref"));
    let dists = DirIndex::new(root.join("Train_Dist"));
    let mut files: Vec<PathBuf> = fs::read_dir(&label_dir)
        .map_err(|e| Error::io(&label_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::MissingScoreFile {
            expected: label_dir.join("*.txt"),
        });
    }
    let mut records = Vec::new();
    for f in files {
        let text = fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let ctx = format!("{} line {}", f.display(), i + 1);
            let (name, score) = line
                .split_once(',')
                .ok_or_else(|| Error::Ingestion(format!("{ctx}: expected '<name>,<score>'")))?;
            let name = name.trim();
            let stem = Path::new(name).file_stem().and_then(|s| s.to_str()).unwrap_or(name);
            let mut parts = stem.split('_');
            let ref_id = parts.next().unwrap_or(stem).to_string();
            let t = parts.next().and_then(|s| s.parse().ok()).unwrap_or(0);
            let ext = Path::new(name).extension().and_then(|e| e.to_str()).unwrap_or("bmp");
            records.push(QualityRecord {
                ref_path: refs.resolve(&format!("{ref_id}.{ext}")),
                dist_path: dists.resolve(name),
                ref_id,
                mos_raw: parse_f64(score, &ctx)?,
                mos: 0.0,
                distortion_type: t,
                distortion_level: None,
            });
        }
    }
    normalize_empirically(&mut records);
    split("pipal", records)
}

fn normalize_empirically(records: &mut [QualityRecord]) {
    let lo = records.iter().map(|r| r.mos_raw).fold(f64::INFINITY, f64::min);
    let hi = records.iter().map(|r| r.mos_raw).fold(f64::NEG_INFINITY, f64::max);
    for r in records {
        r.mos = normalize(r.mos_raw, lo, hi, false);
    }
}

/// Generic manifest with header `ref_path,dist_path,score` (higher =
/// better) and optional `distortion_type`, `distortion_level` columns.
/// `root` is the CSV itself or a directory holding `manifest.csv`; relative
/// paths resolve against the CSV's directory.
pub fn load_csv_manifest(root: &Path) -> Result<DatasetSplit> {
    let file = if root.is_dir() { root.join("manifest.csv") } else { root.to_path_buf() };
    let file = require(file)?;
    let base = file.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut rdr = csv::Reader::from_path(&file).map_err(|e| Error::Ingestion(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| Error::Ingestion(e.to_string()))?.clone();
    let find = |n: &str| headers.iter().position(|h| h.trim() == n);
    let (cr, cd, cs) = match (find("ref_path"), find("dist_path"), find("score")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => {
            return Err(Error::Ingestion(format!(
                "{}: header must contain ref_path,dist_path,score",
                file.display()
            )))
        }
    };
    let (ct, cl) = (find("distortion_type"), find("distortion_level"));
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::Ingestion(format!("{}: {e}", file.display())))?;
        let ctx = format!("{} row {}", file.display(), i + 2);
        let get = |c: usize| row.get(c).map(str::trim).unwrap_or("");
        let ref_path = base.join(get(cr));
        let ref_id = Path::new(get(cr))
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        records.push(QualityRecord {
            ref_id,
            ref_path,
            dist_path: base.join(get(cd)),
            mos_raw: parse_f64(get(cs), &ctx)?,
            mos: 0.0,
            distortion_type: ct.and_then(|c| get(c).parse().ok()).unwrap_or(0),
            distortion_level: cl.and_then(|c| get(c).parse().ok()),
        });
    }
    normalize_empirically(&mut records);
    let name = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    split(&name, records)
}
