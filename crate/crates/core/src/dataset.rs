//! Tile manifests, magnification-proportion sampling and procedural
//! synthetic tiles.
//!
//! A manifest file is UTF-8 text: the header line `#pathryoshka-manifest v1`
//! followed by one `path<TAB>magnification<TAB>label` record per line, where
//! magnification is `10x`, `20x` or `40x` and the label may be empty.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use image::RgbImage;
use log::warn;
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, splitmix64};

pub const MANIFEST_HEADER: &str = "#pathryoshka-manifest v1";
pub const MIN_TILE_SIZE: u32 = 224;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Magnification {
    #[serde(rename = "10x")]
    X10,
    #[serde(rename = "20x")]
    X20,
    #[serde(rename = "40x")]
    X40,
}

impl Magnification {
    pub const ALL: [Magnification; 3] = [Magnification::X10, Magnification::X20, Magnification::X40];
}

impl fmt::Display for Magnification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Magnification::X10 => "10x",
            Magnification::X20 => "20x",
            Magnification::X40 => "40x",
        })
    }
}

impl FromStr for Magnification {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "10x" => Ok(Magnification::X10),
            "20x" => Ok(Magnification::X20),
            "40x" => Ok(Magnification::X40),
            other => Err(Error::config(format!("unknown magnification '{other}'"))),
        }
    }
}

/// Where a tile's pixels live.
#[derive(Clone, Debug)]
pub enum ImageRef {
    Path(PathBuf),
    Memory(Arc<RgbImage>),
}

#[derive(Clone, Debug)]
pub struct TileRecord {
    pub image: ImageRef,
    pub magnification: Magnification,
    pub source_id: String,
    pub label: Option<String>,
    /// Source raster size, when known.
    pub size: Option<(u32, u32)>,
}

impl TileRecord {
    pub fn load_rgb8(&self) -> Result<Arc<RgbImage>> {
        match &self.image {
            ImageRef::Memory(img) => Ok(Arc::clone(img)),
            ImageRef::Path(p) => {
                let img = image::open(p).map_err(|source| Error::Image {
                    path: p.clone(),
                    source,
                })?;
                Ok(Arc::new(img.to_rgb8()))
            }
        }
    }

    pub fn load(&self) -> Result<Image> {
        Ok(Image::from_rgb8(self.load_rgb8()?.as_ref()))
    }
}

/// Paper proportions: 20% at 10x, 40% at 20x, 40% at 40x.
pub fn default_proportions() -> BTreeMap<Magnification, f64> {
    BTreeMap::from([
        (Magnification::X10, 0.2),
        (Magnification::X20, 0.4),
        (Magnification::X40, 0.4),
    ])
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub records: Vec<TileRecord>,
    pub proportions: BTreeMap<Magnification, f64>,
    pub seed: u64,
    /// Files skipped during a folder scan (undecodable or too small).
    pub skipped: usize,
    /// Class list of the manifest this one was cut from, so that subsets
    /// share label indices.
    pub class_names: Option<Vec<String>>,
}

impl DatasetManifest {
    pub fn new(records: Vec<TileRecord>, proportions: BTreeMap<Magnification, f64>, seed: u64) -> Result<Self> {
        let m = Self {
            records,
            proportions,
            seed,
            skipped: 0,
            class_names: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.proportions.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("magnification proportions sum to {total}, expected 1")));
        }
        if let Some((m, p)) = self.proportions.iter().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
            return Err(Error::config(format!("proportion for {m} out of range: {p}")));
        }
        if let Some(r) = self.records.iter().find(|r| !self.proportions.contains_key(&r.magnification)) {
            return Err(Error::config(format!(
                "record {} has magnification {} missing from proportions",
                r.source_id, r.magnification
            )));
        }
        Ok(())
    }

    /// Sorted distinct labels; class indices follow this order.
    pub fn classes(&self) -> Vec<String> {
        if let Some(c) = &self.class_names {
            return c.clone();
        }
        let mut v: Vec<String> = self.records.iter().filter_map(|r| r.label.clone()).collect();
        v.sort();
        v.dedup();
        v
    }

    /// Class index per record, or `None` when any record is unlabeled.
    pub fn label_indices(&self) -> Option<Vec<usize>> {
        let classes = self.classes();
        self.records
            .iter()
            .map(|r| r.label.as_ref().map(|l| classes.binary_search(l).unwrap()))
            .collect()
    }

    /// Keep only the records at `indices` (in that order).
    pub fn subset(&self, indices: &[usize]) -> DatasetManifest {
        DatasetManifest {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            proportions: self.proportions.clone(),
            seed: self.seed,
            skipped: 0,
            class_names: Some(self.classes()),
        }
    }

    /// Deterministic split into (train, test) keeping every `1/test_every`-th
    /// record of each class for testing.
    pub fn split(&self, test_every: usize) -> (DatasetManifest, DatasetManifest) {
        let mut seen: BTreeMap<Option<String>, usize> = BTreeMap::new();
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, r) in self.records.iter().enumerate() {
            let c = seen.entry(r.label.clone()).or_default();
            if *c % test_every.max(2) == test_every.max(2) - 1 {
                test.push(i);
            } else {
                train.push(i);
            }
            *c += 1;
        }
        (self.subset(&train), self.subset(&test))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            let p = match &r.image {
                ImageRef::Path(p) => p,
                ImageRef::Memory(_) => {
                    return Err(Error::config("in-memory tiles cannot be written to a manifest"));
                }
            };
            let ps = p.to_string_lossy();
            if ps.contains('\t') || ps.contains('\n') {
                return Err(Error::config(format!("path contains a tab or newline: {ps}")));
            }
            out.push_str(&format!("{ps}\t{}\t{}\n", r.magnification, r.label.as_deref().unwrap_or("")));
        }
        let mut f = fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    /// Parse a manifest file. Relative paths resolve against the manifest's
    /// directory. Proportions default to the 20/40/40 split restricted to the
    /// magnifications present.
    pub fn read(path: &Path) -> Result<DatasetManifest> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == MANIFEST_HEADER => {}
            _ => {
                return Err(Error::ManifestParse {
                    line: 1,
                    message: format!("expected header '{MANIFEST_HEADER}'"),
                })
            }
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::ManifestParse {
                    line: i + 1,
                    message: format!("expected 3 tab-separated fields, got {}", fields.len()),
                });
            }
            let mag = fields[1].parse().map_err(|e: Error| Error::ManifestParse {
                line: i + 1,
                message: e.to_string(),
            })?;
            let p = PathBuf::from(fields[0]);
            let p = if p.is_absolute() { p } else { base.join(p) };
            records.push(TileRecord {
                source_id: fields[0].to_string(),
                image: ImageRef::Path(p),
                magnification: mag,
                label: (!fields[2].is_empty()).then(|| fields[2].to_string()),
                size: None,
            });
        }
        if records.is_empty() {
            return Err(Error::EmptyDataset(path.display().to_string()));
        }
        let proportions = proportions_for_present(&records);
        DatasetManifest::new(records, proportions, 0)
    }
}

/// The default proportions renormalized over magnifications actually present.
pub fn proportions_for_present(records: &[TileRecord]) -> BTreeMap<Magnification, f64> {
    let defaults = default_proportions();
    let present: Vec<Magnification> = Magnification::ALL
        .into_iter()
        .filter(|m| records.iter().any(|r| r.magnification == *m))
        .collect();
    let total: f64 = present.iter().map(|m| defaults[m]).sum();
    present.into_iter().map(|m| (m, defaults[&m] / total)).collect()
}

/// How folder names map to labels during a scan.
#[derive(Clone, Debug)]
pub enum LabelRule {
    /// Label is the name of the file's immediate parent folder (below root).
    ParentFolder,
    /// Label is looked up from the parent folder name; unmapped folders get none.
    Mapping(BTreeMap<String, String>),
}

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "tif", "tiff"];

/// One record per decodable image below `root`, ordered lexicographically by
/// path. Undecodable or undersized files are counted in `skipped`.
pub fn scan_image_folder(root: &Path, magnification: Magnification, label_rule: Option<&LabelRule>) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("not a directory: {}", root.display()),
        )));
    }
    let mut paths: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();

    let mut records = Vec::new();
    let mut skipped = 0;
    for p in paths {
        let dims = match image::image_dimensions(&p).and_then(|_| image::open(&p)) {
            Ok(img) => (img.width(), img.height()),
            Err(e) => {
                warn!("skipping undecodable tile {}: {e}", p.display());
                skipped += 1;
                continue;
            }
        };
        if dims.0 < MIN_TILE_SIZE || dims.1 < MIN_TILE_SIZE {
            warn!("skipping tile {} smaller than {MIN_TILE_SIZE}px: {dims:?}", p.display());
            skipped += 1;
            continue;
        }
        let parent = p
            .parent()
            .filter(|d| *d != root)
            .and_then(|d| d.file_name())
            .map(|n| n.to_string_lossy().into_owned());
        let label = match label_rule {
            None => None,
            Some(LabelRule::ParentFolder) => parent,
            Some(LabelRule::Mapping(map)) => parent.and_then(|f| map.get(&f).cloned()),
        };
        let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().into_owned();
        records.push(TileRecord {
            image: ImageRef::Path(p),
            magnification,
            source_id: rel,
            label,
            size: Some(dims),
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no decodable images in {} ({skipped} skipped)",
            root.display()
        )));
    }
    let mut m = DatasetManifest::new(records, BTreeMap::from([(magnification, 1.0)]), 0)?;
    m.skipped = skipped;
    Ok(m)
}

/// Largest-remainder apportionment of `n` draws over the proportions.
/// Remainder ties go to the lower magnification.
pub fn allocate_counts(n: usize, proportions: &BTreeMap<Magnification, f64>) -> BTreeMap<Magnification, usize> {
    let mut counts: BTreeMap<Magnification, usize> = BTreeMap::new();
    let mut rema: Vec<(Magnification, f64)> = Vec::new();
    let mut assigned = 0;
    for (&m, &p) in proportions {
        let exact = n as f64 * p;
        let base = exact.floor() as usize;
        counts.insert(m, base);
        assigned += base;
        rema.push((m, exact - base as f64));
    }
    rema.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for (m, _) in rema.iter().cycle().take(n.saturating_sub(assigned)) {
        *counts.get_mut(m).unwrap() += 1;
    }
    counts
}

/// Indices into `manifest.records` drawn per magnification proportion.
pub fn sample_indices_by_proportion(manifest: &DatasetManifest, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::config("sample size must be at least 1"));
    }
    if manifest.is_empty() {
        return Err(Error::EmptyDataset("cannot sample from an empty manifest".into()));
    }
    let counts = allocate_counts(n, &manifest.proportions);
    let mut rng = rng::stream(seed, &[0x5a4d_504c]);
    let mut out = Vec::with_capacity(n);
    for (&mag, &count) in &counts {
        if count == 0 {
            continue;
        }
        let pool: Vec<usize> = (0..manifest.len())
            .filter(|&i| manifest.records[i].magnification == mag)
            .collect();
        if pool.is_empty() {
            return Err(Error::InsufficientTiles {
                magnification: mag.to_string(),
                proportion: manifest.proportions[&mag],
            });
        }
        if count <= pool.len() {
            out.extend(pool.choose_multiple(&mut rng, count).copied());
        } else {
            out.extend((0..count).map(|_| *pool.choose(&mut rng).unwrap()));
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

pub fn sample_by_proportion(manifest: &DatasetManifest, n: usize, seed: u64) -> Result<Vec<TileRecord>> {
    Ok(sample_indices_by_proportion(manifest, n, seed)?
        .into_iter()
        .map(|i| manifest.records[i].clone())
        .collect())
}

// Integer-only texture synthesis so tiles are bit-identical on every platform.

const DIRECTIONS: [(i64, i64); 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (2, 1), (1, 2), (-1, 2), (-2, 1)];

fn hash3(a: u64, b: u64, c: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(a) ^ b) ^ c)
}

fn blend(a: [i64; 3], b: [i64; 3], w: i64) -> [i64; 3] {
    [0, 1, 2].map(|c| (a[c] * (256 - w) + b[c] * w) / 256)
}

/// Procedural H&E-like texture for `(seed, class, index)`.
///
/// Classes differ in stripe orientation and period, stain palette, and
/// nucleus density and size; per-image jitter makes the classes overlap.
pub fn synthetic_tile(seed: u64, class: usize, index: usize, size: u32) -> RgbImage {
    let c = class as i64;
    let h = |k: u64| hash3(seed, (class as u64) << 32 | index as u64, k);
    let jitter = |k: u64, span: i64| (h(k) % (2 * span as u64 + 1)) as i64 - span;

    let (dx, dy) = DIRECTIONS[class % DIRECTIONS.len()];
    let period = 14 + 6 * ((c / 8) % 4) + 5 * (c % 3) + jitter(1, 2);
    let phase = (h(2) % 4096) as i64;
    let amp = 90 + 20 * (c % 4) + jitter(3, 25);

    let bright = jitter(4, 10);
    let eosin = [226 - 9 * (c % 4) + bright, 150 + 11 * (c % 3) + bright, 196 + 7 * (c % 5) + bright];
    let stripe = [eosin[0] - 60, eosin[1] - 55 - 6 * (c % 2), eosin[2] - 30];
    let hema = [88 + 12 * (c % 3) + jitter(5, 8), 52 + 8 * (c % 4), 138 + 10 * (c % 2) + jitter(6, 8)];

    let s = size as i64;
    let n_blobs = (5 + 4 * (c % 4) + jitter(7, 3)).max(1) * s * s / (256 * 256);
    let radius = 5 + 3 * (c % 3) + jitter(8, 1);
    let blobs: Vec<(i64, i64, i64)> = (0..n_blobs as u64)
        .map(|b| {
            let r = radius + (h(100 + 3 * b) % 3) as i64 - 1;
            ((h(101 + 3 * b) % size as u64) as i64, (h(102 + 3 * b) % size as u64) as i64, r)
        })
        .collect();

    RgbImage::from_fn(size, size, |x, y| {
        let (x, y) = (x as i64, y as i64);
        let proj = (x * dx + y * dy + phase).rem_euclid(period);
        let tri = ((2 * proj - period).abs() * 256) / period;
        let mut px = blend(eosin, stripe, tri * amp / 256);
        for &(bx, by, r) in &blobs {
            let d2 = (x - bx) * (x - bx) + (y - by) * (y - by);
            if d2 <= r * r {
                px = hema;
                break;
            }
        }
        let noise = (hash3(seed ^ 0x6e6f_6973_65, (index as u64) << 20 | class as u64, (y * s + x) as u64) % 17) as i64 - 8;
        image::Rgb(px.map(|v| (v + noise).clamp(0, 255) as u8))
    })
}

/// `classes × per_class` labeled in-memory tiles. Labels are `class{i}`;
/// magnifications cycle 10x, 20x, 20x, 40x, 40x.
pub fn synthetic_tile_dataset(seed: u64, classes: usize, per_class: usize, size: u32) -> Result<DatasetManifest> {
    if size < MIN_TILE_SIZE {
        return Err(Error::InvalidSize {
            size,
            min: MIN_TILE_SIZE,
        });
    }
    if classes < 2 {
        return Err(Error::config("synthetic dataset needs at least 2 classes"));
    }
    if per_class == 0 {
        return Err(Error::EmptyDataset("per-class count is zero".into()));
    }
    let mut records = Vec::with_capacity(classes * per_class);
    for i in 0..per_class {
        for c in 0..classes {
            let mag = match (i * classes + c) % 5 {
                0 => Magnification::X10,
                1 | 2 => Magnification::X20,
                _ => Magnification::X40,
            };
            records.push(TileRecord {
                image: ImageRef::Memory(Arc::new(synthetic_tile(seed, c, i, size))),
                magnification: mag,
                source_id: format!("syn-{seed}-c{c}-{i}"),
                label: Some(format!("class{c}")),
                size: Some((size, size)),
            });
        }
    }
    DatasetManifest::new(records, default_proportions(), seed)
}

/// Write every in-memory tile as PNG under `dir/<label>/` and return a
/// path-backed manifest (also written to `dir/manifest.tsv`).
pub fn materialize(manifest: &DatasetManifest, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(manifest.len());
    for r in &manifest.records {
        let sub = r.label.clone().unwrap_or_else(|| "unlabeled".into());
        fs::create_dir_all(dir.join(&sub))?;
        let rel = PathBuf::from(&sub).join(format!("{}.png", r.source_id));
        let img = r.load_rgb8()?;
        img.save(dir.join(&rel)).map_err(|source| Error::Image {
            path: dir.join(&rel),
            source,
        })?;
        records.push(TileRecord {
            image: ImageRef::Path(rel.clone()),
            source_id: rel.to_string_lossy().into_owned(),
            ..r.clone()
        });
    }
    let rel_manifest = DatasetManifest {
        records,
        ..manifest.clone()
    };
    rel_manifest.write(&dir.join("manifest.tsv"))?;
    let mut resolved = rel_manifest;
    for r in &mut resolved.records {
        if let ImageRef::Path(p) = &r.image {
            r.image = ImageRef::Path(dir.join(p));
        }
    }
    Ok(resolved)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform_manifest(per_mag: usize) -> DatasetManifest {
        let mut records = Vec::new();
        for m in Magnification::ALL {
            for i in 0..per_mag {
                records.push(TileRecord {
                    image: ImageRef::Path(format!("{m}/{i}.png").into()),
                    magnification: m,
                    source_id: format!("{m}-{i}"),
                    label: None,
                    size: None,
                });
            }
        }
        DatasetManifest::new(records, default_proportions(), 0).unwrap()
    }

    fn count(m: &BTreeMap<Magnification, usize>) -> [usize; 3] {
        Magnification::ALL.map(|k| m.get(&k).copied().unwrap_or(0))
    }

    #[test]
    fn paper_proportions_for_ten() {
        assert_eq!(count(&allocate_counts(10, &default_proportions())), [2, 4, 4]);
    }

    #[test]
    fn largest_remainder_for_seven() {
        // 1.4, 2.8, 2.8 -> floors 1,2,2; the two .8 remainders win.
        assert_eq!(count(&allocate_counts(7, &default_proportions())), [1, 3, 3]);
    }

    #[test]
    fn single_magnification() {
        let mut m = uniform_manifest(3);
        m.proportions = BTreeMap::from([(Magnification::X10, 1.0), (Magnification::X20, 0.0), (Magnification::X40, 0.0)]);
        let s = sample_by_proportion(&m, 1, 4).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].magnification, Magnification::X10);
    }

    #[test]
    fn sampled_counts_follow_proportions() {
        let m = uniform_manifest(20);
        let s = sample_by_proportion(&m, 10, 1).unwrap();
        let mut c = BTreeMap::new();
        for r in &s {
            *c.entry(r.magnification).or_insert(0usize) += 1;
        }
        assert_eq!(count(&c), [2, 4, 4]);
        // Without replacement when the pool is large enough.
        let mut ids: Vec<_> = s.iter().map(|r| r.source_id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 10);
    }

    #[test]
    fn oversampling_uses_replacement() {
        let m = uniform_manifest(1);
        let s = sample_by_proportion(&m, 20, 2).unwrap();
        assert_eq!(s.len(), 20);
    }

    #[test]
    fn missing_magnification_is_insufficient() {
        let mut m = uniform_manifest(2);
        m.records.retain(|r| r.magnification != Magnification::X40);
        assert!(matches!(
            sample_by_proportion(&m, 5, 0),
            Err(Error::InsufficientTiles { .. })
        ));
    }

    #[test]
    fn proportions_must_sum_to_one() {
        let mut m = uniform_manifest(1);
        m.proportions.insert(Magnification::X10, 0.3);
        assert!(m.validate().is_err());
    }

    proptest! {
        #[test]
        fn counts_sum_to_n(n in 1usize..5000, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let props = BTreeMap::from([
                (Magnification::X10, lo),
                (Magnification::X20, hi - lo),
                (Magnification::X40, 1.0 - hi),
            ]);
            let counts = allocate_counts(n, &props);
            prop_assert_eq!(counts.values().sum::<usize>(), n);
            for (m, c) in &counts {
                prop_assert!((*c as f64 - n as f64 * props[m]).abs() < 1.0 + 1e-9);
            }
        }

        #[test]
        fn sampling_is_deterministic(seed in any::<u64>(), n in 1usize..40) {
            let m = uniform_manifest(5);
            let a = sample_indices_by_proportion(&m, n, seed).unwrap();
            let b = sample_indices_by_proportion(&m, n, seed).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let m = synthetic_tile_dataset(0, 4, 50, 256).unwrap();
        assert_eq!(m.len(), 200);
        assert_eq!(m.classes().len(), 4);
        let a = synthetic_tile(0, 2, 7, 256);
        let b = synthetic_tile(0, 2, 7, 256);
        assert_eq!(a.as_raw(), b.as_raw());
        assert_ne!(a.as_raw(), synthetic_tile(1, 2, 7, 256).as_raw());
    }

    #[test]
    fn synthetic_rejects_small_tiles() {
        assert!(matches!(
            synthetic_tile_dataset(0, 4, 1, 200),
            Err(Error::InvalidSize { size: 200, .. })
        ));
    }

    #[test]
    fn synthetic_pixels_are_pinned() {
        // Integer-only synthesis: a frozen checksum catches platform drift.
        let img = synthetic_tile(0, 1, 3, 224);
        let sum: u64 = img.as_raw().iter().map(|&v| v as u64).sum();
        let fnv = img.as_raw().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
        assert_eq!((sum, fnv), SYNTHETIC_PIN);
    }

    const SYNTHETIC_PIN: (u64, u64) = (28265814, 7677826413585603973);

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = synthetic_tile_dataset(3, 2, 2, 224).unwrap();
        let disk = materialize(&m, dir.path()).unwrap();
        let back = DatasetManifest::read(&dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(back.len(), 4);
        let text = fs::read_to_string(dir.path().join("manifest.tsv")).unwrap();
        assert!(text.starts_with("#pathryoshka-manifest v1\n"));
        assert_eq!(text.lines().nth(1).unwrap(), "class0/syn-3-c0-0.png\t10x\tclass0");
        for (a, b) in disk.records.iter().zip(&back.records) {
            assert_eq!(a.load_rgb8().unwrap().as_raw(), b.load_rgb8().unwrap().as_raw());
            assert_eq!(a.label, b.label);
            assert_eq!(a.magnification, b.magnification);
        }
    }
}
