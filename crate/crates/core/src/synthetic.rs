//! Procedural toy dataset with known identity and pathology factors, plus
//! ingestion of external image datasets into the same on-disk layout.
//!
//! Each image is a textured background shape (the identity) over a dark
//! field. Pathology classes occupy four fixed corner regions with
//! class-specific textures, composited last. The generator samples identities
//! whose shape stays clear of those regions, so a class's pixels are fully
//! determined by (class on/off, pixel noise seed) — that separability is what
//! makes swap and transfer metrics sharp.
//!
//! Layout: `root/{train,test}/img_%06d.png` (8-bit grayscale) +
//! `root/{train,test}/meta.jsonl` + `root/manifest.json`.

use crate::error::{Error, Result};
use crate::rng::{child_rng, child_seed, rng_from};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

/// Largest number of pathology classes the renderer can place in disjoint
/// canonical regions.
pub const MAX_CLASSES: usize = 4;

/// Default number of pathology classes (P0..P3).
pub const DEFAULT_N_CLS: usize = 4;

pub const DEFAULT_IMAGE_SIZE: usize = 64;

const BACKGROUND: f64 = 0.08;
const NOISE_SIGMA: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Disc, ShapeKind::Square, ShapeKind::Triangle];

    pub fn index(self) -> usize {
        match self {
            ShapeKind::Disc => 0,
            ShapeKind::Square => 1,
            ShapeKind::Triangle => 2,
        }
    }
}

/// Ground-truth identity factors of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityFactors {
    pub shape_kind: ShapeKind,
    /// (row, col) in pixels.
    pub center: (f64, f64),
    /// in [0.5, 1.0]; shape radius is `scale * 0.18 * image_size`.
    pub scale: f64,
    /// in [0, 2*pi)
    pub texture_phase: f64,
}

pub fn shape_radius(scale: f64, image_size: usize) -> f64 {
    scale * 0.18 * image_size as f64
}

impl IdentityFactors {
    /// The full shape must sit inside the image and scale in its range.
    pub fn validate(&self, image_size: usize) -> Result<()> {
        let s = image_size as f64;
        if !(0.5..=1.0).contains(&self.scale) {
            return Err(Error::Data(format!(
                "scale {} outside [0.5, 1.0]",
                self.scale
            )));
        }
        let r = shape_radius(self.scale, image_size);
        let (cr, cc) = self.center;
        if cr - r < 0.0 || cc - r < 0.0 || cr + r > s - 1.0 || cc + r > s - 1.0 {
            return Err(Error::Data(format!(
                "center ({cr:.1},{cc:.1}) with radius {r:.1} leaves the {image_size}x{image_size} bounds"
            )));
        }
        Ok(())
    }
}

/// Binary pathology label vector; all-zeros is the valid "no finding" case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathologyLabels {
    pub labels: Vec<u8>,
}

impl PathologyLabels {
    pub fn none(n_cls: usize) -> Self {
        PathologyLabels {
            labels: vec![0; n_cls],
        }
    }

    pub fn from_active(active: &[usize], n_cls: usize) -> Self {
        let mut labels = vec![0u8; n_cls];
        for &c in active {
            labels[c] = 1;
        }
        PathologyLabels { labels }
    }

    pub fn active(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn validate(&self, n_cls: usize) -> Result<()> {
        if self.labels.len() != n_cls {
            return Err(Error::Shape {
                context: "pathology labels",
                expected: vec![n_cls],
                got: vec![self.labels.len()],
            });
        }
        if self.labels.iter().any(|&v| v > 1) {
            return Err(Error::Data("labels must be 0/1".into()));
        }
        Ok(())
    }
}

/// Condition string for a label set: "no finding" or "findings: P1, P3".
pub fn condition_text(labels: &PathologyLabels) -> String {
    let active = labels.active();
    if active.is_empty() {
        "no finding".to_string()
    } else {
        let names: Vec<String> = active.iter().map(|c| format!("P{c}")).collect();
        format!("findings: {}", names.join(", "))
    }
}

/// Parses a condition string back into labels. Accepts the full template and
/// bare class lists ("P1", "P1,P3").
pub fn parse_condition(text: &str, n_cls: usize) -> Result<PathologyLabels> {
    let t = text.trim().to_lowercase();
    if t.is_empty() || t == "no finding" || t == "none" {
        return Ok(PathologyLabels::none(n_cls));
    }
    let body = t.strip_prefix("findings:").unwrap_or(&t);
    let mut labels = vec![0u8; n_cls];
    for tok in body.split(',') {
        let tok = tok.trim();
        if tok.is_empty() {
            continue;
        }
        let idx: usize = tok
            .strip_prefix('p')
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| Error::Data(format!("unknown class token '{tok}'")))?;
        if idx >= n_cls {
            return Err(Error::Data(format!(
                "class token '{tok}' out of range (n_cls = {n_cls})"
            )));
        }
        labels[idx] = 1;
    }
    Ok(PathologyLabels { labels })
}

/// One oracle-checkable sample.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub image: Array2<f64>,
    pub identity: IdentityFactors,
    pub pathology: PathologyLabels,
    pub condition_text: String,
}

/// Center (row, col) and radius of class `c`'s canonical corner region.
pub fn blob_region(c: usize, image_size: usize) -> ((f64, f64), f64) {
    let s = image_size as f64;
    let near = 0.11 * s;
    let far = 0.89 * s;
    let centers = [
        (near, near),
        (near, far),
        (far, near),
        (far, far),
    ];
    (centers[c], 0.09 * s)
}

/// Boolean mask of class `c`'s region.
pub fn blob_mask(c: usize, image_size: usize) -> Array2<bool> {
    let ((br, bc), rad) = blob_region(c, image_size);
    Array2::from_shape_fn((image_size, image_size), |(i, j)| {
        let di = i as f64 - br;
        let dj = j as f64 - bc;
        di * di + dj * dj <= rad * rad
    })
}

fn inside_shape(id: &IdentityFactors, r: f64, i: f64, j: f64) -> bool {
    let di = i - id.center.0;
    let dj = j - id.center.1;
    match id.shape_kind {
        ShapeKind::Disc => di * di + dj * dj <= r * r,
        ShapeKind::Square => di.abs().max(dj.abs()) <= r * 0.82,
        ShapeKind::Triangle => {
            // apex up, base down, inscribed in radius r
            let top = -r;
            let base = r * 0.75;
            if di < top || di > base {
                return false;
            }
            let frac = (di - top) / (base - top);
            dj.abs() <= frac * r * 0.95
        }
    }
}

fn blob_value(c: usize, i: usize, j: usize, dist: f64, rad: f64) -> f64 {
    match c {
        // solid bright disc
        0 => 0.92,
        // ring: bright band, dark core
        1 => {
            if dist >= 0.55 * rad {
                0.88
            } else {
                0.18
            }
        }
        // diagonal stripes
        2 => {
            if ((i + j) / 3) % 2 == 0 {
                0.9
            } else {
                0.25
            }
        }
        // checkerboard
        _ => {
            if (i / 3 + j / 3) % 2 == 0 {
                0.93
            } else {
                0.2
            }
        }
    }
}

/// Renders a sample. Pure in (identity, pathology, seed): the background
/// shape comes from identity alone, pixel noise from the seed alone, and each
/// active class overwrites its canonical region last.
pub fn render_sample(
    identity: &IdentityFactors,
    pathology: &PathologyLabels,
    rng_seed: u64,
    image_size: usize,
) -> Result<SyntheticSample> {
    identity.validate(image_size)?;
    if pathology.labels.len() > MAX_CLASSES {
        return Err(Error::Shape {
            context: "pathology labels",
            expected: vec![MAX_CLASSES],
            got: vec![pathology.labels.len()],
        });
    }
    pathology.validate(pathology.labels.len())?;

    let s = image_size;
    let r = shape_radius(identity.scale, s);
    let mut img = Array2::<f64>::from_elem((s, s), BACKGROUND);

    // identity: textured shape
    for i in 0..s {
        for j in 0..s {
            let (fi, fj) = (i as f64, j as f64);
            if inside_shape(identity, r, fi, fj) {
                let diag = (fi - identity.center.0) + (fj - identity.center.1);
                let freq = std::f64::consts::TAU / (0.45 * s as f64);
                let tex = (identity.texture_phase + diag * freq).sin();
                img[[i, j]] = 0.55 + 0.28 * tex;
            }
        }
    }

    // pixel noise, then pathology regions composited last
    let mut rng = rng_from(rng_seed);
    for v in img.iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v += NOISE_SIGMA * n;
    }

    for (c, &on) in pathology.labels.iter().enumerate() {
        if on == 0 {
            continue;
        }
        let ((br, bc), rad) = blob_region(c, s);
        for i in 0..s {
            for j in 0..s {
                let di = i as f64 - br;
                let dj = j as f64 - bc;
                let dist = (di * di + dj * dj).sqrt();
                if dist <= rad {
                    img[[i, j]] = blob_value(c, i, j, dist, rad);
                }
            }
        }
    }

    img.mapv_inplace(|v| v.clamp(0.0, 1.0));

    Ok(SyntheticSample {
        image: img,
        identity: identity.clone(),
        pathology: pathology.clone(),
        condition_text: condition_text(pathology),
    })
}

/// Samples identity factors from the generator's canonical domain: the shape
/// stays clear of every pathology region.
pub fn sample_identity(rng: &mut impl Rng, image_size: usize) -> IdentityFactors {
    let s = image_size as f64;
    let kind = ShapeKind::ALL[rng.gen_range(0..3)];
    let center = (
        rng.gen_range(0.36 * s..0.64 * s),
        rng.gen_range(0.36 * s..0.64 * s),
    );
    IdentityFactors {
        shape_kind: kind,
        center,
        scale: rng.gen_range(0.5..1.0),
        texture_phase: rng.gen_range(0.0..std::f64::consts::TAU),
    }
}

// ---------------------------------------------------------------------------
// dataset generation

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Requested per-class frequency in (0, 1].
    pub class_frequencies: Vec<f64>,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            n_train: 1000,
            n_test: 200,
            class_frequencies: vec![0.25; DEFAULT_N_CLS],
            image_size: DEFAULT_IMAGE_SIZE,
            seed: 0,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("split sizes must be > 0".into()));
        }
        if self.class_frequencies.is_empty() || self.class_frequencies.len() > MAX_CLASSES {
            return Err(Error::Config(format!(
                "class_frequencies must have 1..={MAX_CLASSES} entries"
            )));
        }
        for &f in &self.class_frequencies {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("frequency {f} outside (0, 1]")));
            }
        }
        if self.image_size < 16 {
            return Err(Error::Config("image_size must be >= 16".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitStats {
    pub count: usize,
    pub class_counts: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub source: String,
    pub image_size: usize,
    pub n_cls: usize,
    pub seed: u64,
    pub class_frequencies: Vec<f64>,
    pub train: SplitStats,
    pub test: SplitStats,
}

impl DatasetManifest {
    pub fn path(root: &Path) -> PathBuf {
        root.join("manifest.json")
    }

    pub fn load(root: &Path) -> Result<Self> {
        let p = Self::path(root);
        let data = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&data)?)
    }

    pub fn save(&self) -> Result<()> {
        let p = Self::path(&self.root);
        let data = serde_json::to_string_pretty(self)?;
        fs::write(&p, data).map_err(|e| Error::io(&p, e))
    }

    /// Hash of the manifest contents, used for report provenance.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_string(self).unwrap_or_default().as_bytes());
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MetaRow {
    file: String,
    labels: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    identity: Option<IdentityFactors>,
    condition_text: String,
}

/// Per-class label assignment hitting the requested counts exactly
/// (quota = round(freq * n), drawn without replacement per class).
fn assign_labels(n: usize, freqs: &[f64], seed: u64) -> Vec<PathologyLabels> {
    let n_cls = freqs.len();
    let mut labels = vec![PathologyLabels::none(n_cls); n];
    for (c, &f) in freqs.iter().enumerate() {
        let quota = ((f * n as f64).round() as usize).min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = child_rng(seed, 1_000_000 + c as u64);
        // Fisher-Yates prefix shuffle
        for i in 0..quota {
            let j = rng.gen_range(i..n);
            idx.swap(i, j);
        }
        for &i in idx.iter().take(quota) {
            labels[i].labels[c] = 1;
        }
    }
    labels
}

fn write_split(
    root: &Path,
    split: &str,
    cfg: &GenerateConfig,
    n: usize,
    seed_offset: u64,
) -> Result<SplitStats> {
    let dir = root.join(split);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let labels = assign_labels(n, &cfg.class_frequencies, child_seed(cfg.seed, seed_offset));

    let samples: Vec<Result<(String, MetaRow)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let sample_seed = child_seed(cfg.seed, seed_offset * 1_000_003 + i as u64);
            let mut rng = rng_from(child_seed(sample_seed, 1));
            let identity = sample_identity(&mut rng, cfg.image_size);
            let sample = render_sample(
                &identity,
                &labels[i],
                child_seed(sample_seed, 2),
                cfg.image_size,
            )?;
            let file = format!("img_{i:06}.png");
            write_png(&dir.join(&file), &sample.image)?;
            Ok((
                file.clone(),
                MetaRow {
                    file,
                    labels: sample.pathology.labels.clone(),
                    identity: Some(sample.identity.clone()),
                    condition_text: sample.condition_text.clone(),
                },
            ))
        })
        .collect();

    let meta_path = dir.join("meta.jsonl");
    let mut meta =
        fs::File::create(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut class_counts = vec![0usize; cfg.class_frequencies.len()];
    for s in samples {
        let (_, row) = s?;
        for (c, &v) in row.labels.iter().enumerate() {
            class_counts[c] += v as usize;
        }
        let line = serde_json::to_string(&row)?;
        writeln!(meta, "{line}").map_err(|e| Error::io(&meta_path, e))?;
    }
    Ok(SplitStats {
        count: n,
        class_counts,
    })
}

/// Generates the full dataset on disk; realized per-class counts match the
/// requested frequencies within one sample.
pub fn generate_dataset(root: &Path, cfg: &GenerateConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let train = write_split(root, "train", cfg, cfg.n_train, 1)?;
    let test = write_split(root, "test", cfg, cfg.n_test, 2)?;
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        source: "synthetic".into(),
        image_size: cfg.image_size,
        n_cls: cfg.class_frequencies.len(),
        seed: cfg.seed,
        class_frequencies: cfg.class_frequencies.clone(),
        train,
        test,
    };
    manifest.save()?;
    Ok(manifest)
}

pub fn write_png(path: &Path, image: &Array2<f64>) -> Result<()> {
    let (h, w) = image.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let v = (image[[i, j]].clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(j as u32, i as u32, image::Luma([v]));
        }
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Loads any supported image as grayscale [0,1] at its native size.
fn load_gray(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let g16 = img.to_luma16();
    let (w, h) = g16.dimensions();
    Ok(Array2::from_shape_fn(
        (h as usize, w as usize),
        |(i, j)| g16.get_pixel(j as u32, i as u32)[0] as f64 / 65535.0,
    ))
}

fn resize_gray(img: &Array2<f64>, size: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    if h == size && w == size {
        return img.clone();
    }
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            buf.put_pixel(
                j as u32,
                i as u32,
                image::Luma([(img[[i, j]].clamp(0.0, 1.0) * 65535.0).round() as u16]),
            );
        }
    }
    let resized = image::imageops::resize(
        &buf,
        size as u32,
        size as u32,
        image::imageops::FilterType::Triangle,
    );
    Array2::from_shape_fn((size, size), |(i, j)| {
        resized.get_pixel(j as u32, i as u32)[0] as f64 / 65535.0
    })
}

#[derive(Debug, Clone, Deserialize)]
struct ExternalLabelRow {
    file: String,
    labels: Vec<u8>,
}

/// Ingests a directory of real images plus a JSONL label file into the
/// standard dataset layout (train split). Every image must have a label row;
/// orphans and undecodable files are listed in the error.
pub fn ingest_external(
    dir: &Path,
    labels_jsonl: &Path,
    out_root: &Path,
    image_size: usize,
) -> Result<DatasetManifest> {
    let file = fs::File::open(labels_jsonl).map_err(|e| Error::io(labels_jsonl, e))?;
    let mut label_map = std::collections::BTreeMap::new();
    let mut n_cls = 0usize;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(labels_jsonl, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ExternalLabelRow = serde_json::from_str(&line)?;
        n_cls = n_cls.max(row.labels.len());
        label_map.insert(row.file.clone(), row.labels);
    }
    if label_map.is_empty() {
        return Err(Error::Data("label file has no rows".into()));
    }

    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Data(format!("no images found in {}", dir.display())));
    }

    let mut orphans = Vec::new();
    let mut undecodable = Vec::new();
    let mut rows = Vec::new();
    for path in &entries {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let Some(labels) = label_map.get(&name) else {
            orphans.push(name);
            continue;
        };
        match load_gray(path) {
            Ok(img) => rows.push((name, labels.clone(), resize_gray(&img, image_size))),
            Err(_) => undecodable.push(name),
        }
    }
    if !orphans.is_empty() {
        return Err(Error::Data(format!(
            "images without a label row: {}",
            orphans.join(", ")
        )));
    }
    if !undecodable.is_empty() {
        return Err(Error::Data(format!(
            "undecodable images: {}",
            undecodable.join(", ")
        )));
    }

    let train_dir = out_root.join("train");
    let test_dir = out_root.join("test");
    fs::create_dir_all(&train_dir).map_err(|e| Error::io(&train_dir, e))?;
    fs::create_dir_all(&test_dir).map_err(|e| Error::io(&test_dir, e))?;

    let meta_path = train_dir.join("meta.jsonl");
    let mut meta = fs::File::create(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut class_counts = vec![0usize; n_cls];
    for (i, (_, labels, img)) in rows.iter().enumerate() {
        let file = format!("img_{i:06}.png");
        write_png(&train_dir.join(&file), img)?;
        let mut padded = labels.clone();
        padded.resize(n_cls, 0);
        for (c, &v) in padded.iter().enumerate() {
            class_counts[c] += v as usize;
        }
        let row = MetaRow {
            file,
            labels: padded.clone(),
            identity: None,
            condition_text: condition_text(&PathologyLabels { labels: padded }),
        };
        let line = serde_json::to_string(&row)?;
        writeln!(meta, "{line}").map_err(|e| Error::io(&meta_path, e))?;
    }
    // empty test split keeps the layout uniform
    let test_meta = test_dir.join("meta.jsonl");
    fs::File::create(&test_meta).map_err(|e| Error::io(&test_meta, e))?;

    let n = rows.len();
    let manifest = DatasetManifest {
        root: out_root.to_path_buf(),
        source: "external".into(),
        image_size,
        n_cls,
        seed: 0,
        class_frequencies: class_counts
            .iter()
            .map(|&c| (c as f64 / n as f64).max(f64::MIN_POSITIVE))
            .collect(),
        train: SplitStats {
            count: n,
            class_counts,
        },
        test: SplitStats {
            count: 0,
            class_counts: vec![0; n_cls],
        },
    };
    manifest.save()?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// loading

/// A dataset split held in memory (images as f32 to halve the footprint).
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub image: Array2<f32>,
    pub labels: Vec<u8>,
    pub identity: Option<IdentityFactors>,
    pub condition_text: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<LoadedSample>,
}

impl Dataset {
    pub fn load(root: &Path, split: &str) -> Result<Self> {
        let manifest = DatasetManifest::load(root)?;
        let dir = root.join(split);
        let meta_path = dir.join("meta.jsonl");
        let file = fs::File::open(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let rows: Vec<MetaRow> = BufReader::new(file)
            .lines()
            .filter_map(|l| l.ok())
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(&l).map_err(Error::from))
            .collect::<Result<_>>()?;

        let samples: Vec<Result<LoadedSample>> = rows
            .par_iter()
            .map(|row| {
                let img = load_gray(&dir.join(&row.file))?;
                Ok(LoadedSample {
                    image: img.mapv(|v| v as f32),
                    labels: row.labels.clone(),
                    identity: row.identity.clone(),
                    condition_text: row.condition_text.clone(),
                })
            })
            .collect();
        let samples = samples.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(Dataset { manifest, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.manifest.image_size
    }

    pub fn n_cls(&self) -> usize {
        self.manifest.n_cls
    }

    /// (b,1,h,w) f64 batch for the given indices.
    pub fn batch_images(&self, idx: &[usize]) -> ndarray::ArrayD<f64> {
        let s = self.image_size();
        let mut out = ndarray::ArrayD::zeros(ndarray::IxDyn(&[idx.len(), 1, s, s]));
        for (bi, &i) in idx.iter().enumerate() {
            let img = &self.samples[i].image;
            for r in 0..s {
                for c in 0..s {
                    out[[bi, 0, r, c]] = img[[r, c]] as f64;
                }
            }
        }
        out
    }

    /// (b, n_cls) f64 label matrix.
    pub fn batch_labels(&self, idx: &[usize]) -> ndarray::ArrayD<f64> {
        let n_cls = self.n_cls();
        let mut out = ndarray::ArrayD::zeros(ndarray::IxDyn(&[idx.len(), n_cls]));
        for (bi, &i) in idx.iter().enumerate() {
            for (c, &v) in self.samples[i].labels.iter().enumerate() {
                out[[bi, c]] = v as f64;
            }
        }
        out
    }

    pub fn indices_with_class(&self, c: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.samples[i].labels.get(c).copied().unwrap_or(0) == 1)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_identity() -> IdentityFactors {
        IdentityFactors {
            shape_kind: ShapeKind::Disc,
            center: (32.0, 32.0),
            scale: 0.8,
            texture_phase: 1.0,
        }
    }

    #[test]
    fn no_pathology_render_is_clean_and_deterministic() {
        let id = default_identity();
        let labels = PathologyLabels::none(4);
        let a = render_sample(&id, &labels, 7, 64).unwrap();
        let b = render_sample(&id, &labels, 7, 64).unwrap();
        assert_eq!(a.image, b.image, "same inputs and seed must be bit-identical");
        assert!(a.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a.condition_text, "no finding");

        // an active class changes pixels only inside its region
        let with_p0 = render_sample(&id, &PathologyLabels::from_active(&[0], 4), 7, 64).unwrap();
        let mask = blob_mask(0, 64);
        for i in 0..64 {
            for j in 0..64 {
                if mask[[i, j]] {
                    continue;
                }
                assert_eq!(a.image[[i, j]], with_p0.image[[i, j]], "pixel ({i},{j})");
            }
        }
        assert_ne!(a.image, with_p0.image);
    }

    #[test]
    fn identity_edits_never_touch_blob_regions() {
        // generator-domain identities, same labels and seed
        let mut rng = rng_from(11);
        for trial in 0..5 {
            let id_a = sample_identity(&mut rng, 64);
            let id_b = sample_identity(&mut rng, 64);
            let labels = PathologyLabels::from_active(&[trial % 4], 4);
            let a = render_sample(&id_a, &labels, 99, 64).unwrap();
            let b = render_sample(&id_b, &labels, 99, 64).unwrap();
            for c in 0..4 {
                let mask = blob_mask(c, 64);
                for i in 0..64 {
                    for j in 0..64 {
                        if mask[[i, j]] {
                            assert_eq!(
                                a.image[[i, j]],
                                b.image[[i, j]],
                                "class {c} region pixel ({i},{j}) changed with identity"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn out_of_bounds_center_is_rejected() {
        let mut id = default_identity();
        id.center = (3.0, 32.0);
        assert!(render_sample(&id, &PathologyLabels::none(4), 0, 64).is_err());
    }

    #[test]
    fn wrong_label_length_is_rejected() {
        let id = default_identity();
        let labels = PathologyLabels { labels: vec![0; 9] };
        assert!(render_sample(&id, &labels, 0, 64).is_err());
    }

    #[test]
    fn condition_text_template_and_parser_roundtrip() {
        let l = PathologyLabels::from_active(&[1, 3], 4);
        assert_eq!(condition_text(&l), "findings: P1, P3");
        assert_eq!(parse_condition("findings: P1, P3", 4).unwrap(), l);
        assert_eq!(parse_condition("P1,P3", 4).unwrap(), l);
        assert_eq!(
            parse_condition("no finding", 4).unwrap(),
            PathologyLabels::none(4)
        );
        assert!(parse_condition("Q7", 4).is_err());
        assert!(parse_condition("P9", 4).is_err());
    }

    #[test]
    fn quota_assignment_hits_requested_counts() {
        let labels = assign_labels(1000, &[0.25, 0.25, 0.25, 0.02], 3);
        let counts: Vec<usize> = (0..4)
            .map(|c| labels.iter().filter(|l| l.labels[c] == 1).count())
            .collect();
        assert_eq!(counts[0], 250);
        assert_eq!(counts[1], 250);
        assert_eq!(counts[2], 250);
        assert_eq!(counts[3], 20, "P3 at 2% of 1000 must be 20±1");
        // empirical rate within the binomial 3-sigma band
        for c in 0..3 {
            let rate = counts[c] as f64 / 1000.0;
            assert!((0.22..=0.28).contains(&rate));
        }
    }

    #[test]
    fn generate_dataset_is_deterministic_and_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenerateConfig {
            n_train: 24,
            n_test: 8,
            class_frequencies: vec![0.5, 0.25, 0.25, 0.25],
            image_size: 32,
            seed: 42,
        };
        let m1 = generate_dataset(&dir.path().join("a"), &cfg).unwrap();
        let m2 = generate_dataset(&dir.path().join("b"), &cfg).unwrap();
        assert_eq!(m1.train.class_counts, m2.train.class_counts);

        let bytes_a = fs::read(dir.path().join("a/train/img_000003.png")).unwrap();
        let bytes_b = fs::read(dir.path().join("b/train/img_000003.png")).unwrap();
        assert_eq!(bytes_a, bytes_b, "same seed must produce identical files");

        let ds = Dataset::load(&dir.path().join("a"), "train").unwrap();
        assert_eq!(ds.len(), 24);
        assert_eq!(ds.image_size(), 32);
        assert_eq!(ds.samples[0].image.dim(), (32, 32));
        assert!(ds.samples[0].identity.is_some());
        assert_eq!(m1.train.class_counts[0], 12);
    }

    #[test]
    fn ingest_accepts_matching_labels_and_rejects_orphans() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src");
        fs::create_dir_all(&src).unwrap();
        for i in 0..3 {
            let img = Array2::from_elem((20, 20), 0.25 + 0.2 * i as f64);
            write_png(&src.join(format!("ext_{i}.png")), &img).unwrap();
        }
        let labels = dir.path().join("labels.jsonl");
        fs::write(
            &labels,
            r#"{"file":"ext_0.png","labels":[1,0]}
{"file":"ext_1.png","labels":[0,1]}
{"file":"ext_2.png","labels":[0,0]}
"#,
        )
        .unwrap();
        let out = dir.path().join("out");
        let m = ingest_external(&src, &labels, &out, 16).unwrap();
        assert_eq!(m.train.count, 3);
        assert_eq!(m.n_cls, 2);
        let ds = Dataset::load(&out, "train").unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.samples[0].image.dim(), (16, 16));

        // two label rows for three files: the orphan must be named
        let labels2 = dir.path().join("labels2.jsonl");
        fs::write(
            &labels2,
            r#"{"file":"ext_0.png","labels":[1,0]}
{"file":"ext_1.png","labels":[0,1]}
"#,
        )
        .unwrap();
        let err = ingest_external(&src, &labels2, &dir.path().join("out2"), 16).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("ext_2.png"), "error must name the orphan: {msg}");
    }

    #[test]
    fn ingest_normalizes_16bit_input() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src");
        fs::create_dir_all(&src).unwrap();
        // 16-bit ramp spanning the full range
        let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(32, 32);
        for i in 0..32u32 {
            for j in 0..32u32 {
                let v = ((i * 32 + j) * 65535 / 1023) as u16;
                buf.put_pixel(j, i, image::Luma([v]));
            }
        }
        buf.save(src.join("ramp.png")).unwrap();
        let labels = dir.path().join("labels.jsonl");
        fs::write(&labels, "{\"file\":\"ramp.png\",\"labels\":[1]}\n").unwrap();
        let out = dir.path().join("out");
        ingest_external(&src, &labels, &out, 32).unwrap();
        let ds = Dataset::load(&out, "train").unwrap();
        let max = ds.samples[0]
            .image
            .iter()
            .cloned()
            .fold(f32::MIN, f32::max);
        assert!(max <= 1.0, "normalized max must be <= 1.0, got {max}");
        assert!(max > 0.9, "ramp should reach near full scale, got {max}");
    }
}
