//! Synthetic glyph-face dataset with ground-truth identity and attribute
//! factors, directory ingestion, splits, verification pairs and the
//! on-disk dataset layout.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageFormat, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::rng;

/// Attribute factors drawn per sample, in canonical order.
pub const FACTOR_NAMES: [&str; 5] = ["hue", "background", "smile", "rotation", "scale"];

const TAG_GEOMETRY: u64 = 1;
const TAG_FACTORS: u64 = 2;
const TAG_SPLIT: u64 = 3;
const TAG_PAIRS: u64 = 4;

const TEST_FRACTION: f64 = 0.2;
const VAL_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Identity-defining shape parameters. Fixed per identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    /// Horizontal over vertical face radius.
    pub aspect: f64,
    /// Half the distance between the eyes, relative to the horizontal radius.
    pub eye_spacing: f64,
    /// Eye height above the face centre, relative to the vertical radius.
    pub eye_height: f64,
    pub eye_size: f64,
    pub nose_length: f64,
    /// Half mouth width, relative to the horizontal radius.
    pub mouth_width: f64,
}

impl Geometry {
    pub fn for_identity(seed: u64, identity: usize) -> Self {
        let mut r = rng::stream(seed, &[TAG_GEOMETRY, identity as u64]);
        Self {
            aspect: r.gen_range(0.62..1.0),
            eye_spacing: r.gen_range(0.25..0.58),
            eye_height: r.gen_range(0.12..0.36),
            eye_size: r.gen_range(0.07..0.15),
            nose_length: r.gen_range(0.10..0.38),
            mouth_width: r.gen_range(0.22..0.55),
        }
    }
}

/// Per-sample attribute factors, each in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Factors {
    pub hue: f64,
    pub background: f64,
    pub smile: f64,
    pub rotation: f64,
    pub scale: f64,
}

impl Factors {
    pub fn neutral() -> Self {
        Self {
            hue: 0.0,
            background: 0.0,
            smile: 0.0,
            rotation: 0.0,
            scale: 0.0,
        }
    }

    pub fn draw(seed: u64, identity: usize, index: usize) -> Self {
        let mut r = rng::stream(seed, &[TAG_FACTORS, identity as u64, index as u64]);
        let mut u = || r.gen_range(-1.0..=1.0);
        Self {
            hue: u(),
            background: u(),
            smile: u(),
            rotation: u(),
            scale: u(),
        }
    }

    pub fn values(&self) -> [f64; 5] {
        [self.hue, self.background, self.smile, self.rotation, self.scale]
    }

    pub fn to_map(&self) -> BTreeMap<String, f64> {
        FACTOR_NAMES
            .iter()
            .zip(self.values())
            .map(|(n, v)| (n.to_string(), v))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorSample {
    /// `(3, S, S)` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub identity: usize,
    pub index: usize,
    /// Empty for ingested images.
    pub factors: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub identity: usize,
    pub index: usize,
    pub split: Split,
    /// Relative image path inside an exported dataset.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic,
    Directory { root: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n_id: usize,
    /// Zero for ingested datasets with uneven identity sizes.
    pub samples_per_id: usize,
    pub image_size: usize,
    pub source: DatasetSource,
    pub identity_names: Vec<String>,
    pub samples: Vec<SampleEntry>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<FactorSample>,
}

/// Images and labels of one split, ready for training.
#[derive(Debug, Clone, Default)]
pub struct LabeledSet {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    /// Positions of these samples in the parent dataset.
    pub source_indices: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .samples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split(&self, split: Split) -> LabeledSet {
        let idx = self.split_indices(split);
        LabeledSet {
            images: idx.iter().map(|&i| self.samples[i].image.clone()).collect(),
            labels: idx.iter().map(|&i| self.samples[i].identity).collect(),
            source_indices: idx,
        }
    }
}

// ---------------------------------------------------------------------------
// rendering

fn face_color(hue: f64) -> [f64; 3] {
    [0.75 - 0.20 * hue, 0.66 + 0.04 * hue, 0.62 + 0.28 * hue]
}

const EYE_COLOR: [f64; 3] = [0.08, 0.08, 0.14];
const MOUTH_COLOR: [f64; 3] = [0.55, 0.08, 0.15];
const FACE_RADIUS: f64 = 0.80;

enum Region {
    Background,
    Face,
    Nose,
    Mouth,
    Eye,
}

// Classifies a point given in normalized image coordinates `[-1, 1]^2`
// (y pointing down).
fn classify_point(g: &Geometry, f: &Factors, px: f64, py: f64) -> Region {
    let angle = 0.35 * f.rotation;
    let scale = 1.0 + 0.12 * f.scale;
    let (s, c) = angle.sin_cos();
    // inverse rotation then inverse scale
    let x = (c * px + s * py) / scale;
    let y = (-s * px + c * py) / scale;

    let ry = FACE_RADIUS;
    let rx = ry * g.aspect;
    if (x / rx).powi(2) + (y / ry).powi(2) > 1.0 {
        return Region::Background;
    }
    let ex = g.eye_spacing * rx;
    let ey = -g.eye_height * ry;
    let er = g.eye_size * ry;
    if (x - ex).powi(2) + (y - ey).powi(2) <= er * er || (x + ex).powi(2) + (y - ey).powi(2) <= er * er {
        return Region::Eye;
    }
    let mw = g.mouth_width * rx;
    if x.abs() <= mw {
        let t = x / mw;
        let mouth_y = 0.50 * ry + 0.40 * ry * f.smile * (0.5 - t * t);
        if (y - mouth_y).abs() <= 0.07 {
            return Region::Mouth;
        }
    }
    if x.abs() <= 0.045 && y >= -0.05 * ry && y <= (g.nose_length + 0.02) * ry {
        return Region::Nose;
    }
    Region::Face
}

fn supersample(size: usize, mut f: impl FnMut(f64, f64) -> [f64; 3]) -> Vec<f32> {
    const SS: usize = 2;
    let mut out = vec![0.0f32; 3 * size * size];
    let plane = size * size;
    let sub = (size * SS) as f64;
    for py in 0..size {
        for px in 0..size {
            let mut acc = [0.0; 3];
            for sy in 0..SS {
                for sx in 0..SS {
                    let u = ((px * SS + sx) as f64 + 0.5) / sub * 2.0 - 1.0;
                    let v = ((py * SS + sy) as f64 + 0.5) / sub * 2.0 - 1.0;
                    let c = f(u, v);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            for k in 0..3 {
                let v = (acc[k] / (SS * SS) as f64).clamp(0.0, 1.0);
                // quantized to 8 bits so PNG export is lossless
                out[k * plane + py * size + px] = (v * 255.0).round() as f32 / 255.0;
            }
        }
    }
    out
}

/// Renders one glyph face, 2x supersampled and quantized to 8 bits.
pub fn render(g: &Geometry, f: &Factors, size: usize) -> Result<Tensor<f32>> {
    if size < 16 {
        return Err(Error::invalid(format!("image size must be >= 16, got {size}")));
    }
    let bg = 0.5 + 0.3 * f.background;
    let face = face_color(f.hue);
    let nose = face.map(|c| c * 0.62);
    let data = supersample(size, |u, v| match classify_point(g, f, u, v) {
        Region::Background => [bg; 3],
        Region::Face => face,
        Region::Nose => nose,
        Region::Mouth => MOUTH_COLOR,
        Region::Eye => EYE_COLOR,
    });
    Tensor::new(vec![3, size, size], data)
}

/// Fractional face coverage per pixel (`S*S` values in `[0, 1]`).
pub fn face_mask(g: &Geometry, f: &Factors, size: usize) -> Vec<f32> {
    let cover = supersample(size, |u, v| match classify_point(g, f, u, v) {
        Region::Background => [0.0; 3],
        _ => [1.0; 3],
    });
    cover[..size * size].to_vec()
}

// ---------------------------------------------------------------------------
// splits

fn split_counts(n: usize) -> (usize, usize) {
    if n < 2 {
        return (0, 0);
    }
    let test = ((n as f64 * TEST_FRACTION).round() as usize).clamp(1, n - 1);
    let rest = n - test;
    let val = if rest >= 3 {
        ((rest as f64 * VAL_FRACTION).round() as usize).max(1)
    } else {
        0
    };
    (test, val)
}

fn assign_splits(seed: u64, identity: usize, n: usize) -> Vec<Split> {
    let (test, val) = split_counts(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[TAG_SPLIT, identity as u64]));
    let mut splits = vec![Split::Train; n];
    for (rank, &k) in order.iter().enumerate() {
        if rank < test {
            splits[k] = Split::Test;
        } else if rank < test + val {
            splits[k] = Split::Val;
        }
    }
    splits
}

fn image_path(identity: usize, index: usize) -> String {
    format!("images/{identity:04}/{index:04}.png")
}

/// Deterministic synthetic dataset: `n_id * samples_per_id` samples,
/// identity-major order.
pub fn generate(seed: u64, n_id: usize, samples_per_id: usize, size: usize, exec: Execution) -> Result<Dataset> {
    if n_id < 2 {
        return Err(Error::invalid(format!("n_id must be >= 2, got {n_id}")));
    }
    if samples_per_id < 4 {
        return Err(Error::invalid(format!("samples_per_id must be >= 4, got {samples_per_id}")));
    }
    if size < 16 {
        return Err(Error::invalid(format!("image size must be >= 16, got {size}")));
    }
    let geometries: Vec<Geometry> = (0..n_id).map(|i| Geometry::for_identity(seed, i)).collect();
    let total = n_id * samples_per_id;
    let samples = par::map_indexed(exec, total, |i| {
        let (id, k) = (i / samples_per_id, i % samples_per_id);
        let factors = Factors::draw(seed, id, k);
        render(&geometries[id], &factors, size).map(|image| FactorSample {
            image,
            identity: id,
            index: k,
            factors: factors.to_map(),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut entries = Vec::with_capacity(total);
    for id in 0..n_id {
        for (k, split) in assign_splits(seed, id, samples_per_id).into_iter().enumerate() {
            entries.push(SampleEntry {
                identity: id,
                index: k,
                split,
                path: image_path(id, k),
            });
        }
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            seed,
            n_id,
            samples_per_id,
            image_size: size,
            source: DatasetSource::Synthetic,
            identity_names: (0..n_id).map(|i| format!("{i:04}")).collect(),
            samples: entries,
        },
        samples,
    })
}

// ---------------------------------------------------------------------------
// verification pairs

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VerificationPair {
    /// Indices into the dataset.
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

/// `n_pairs / 2` same-identity and `n_pairs - n_pairs / 2` different-identity
/// pairs from one split, seeded. Pairs are distinct while the split allows.
pub fn make_pairs(ds: &Dataset, split: Split, n_pairs: usize, seed: u64) -> Result<Vec<VerificationPair>> {
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in ds.split_indices(split) {
        by_id.entry(ds.samples[i].identity).or_default().push(i);
    }
    let eligible: Vec<&Vec<usize>> = by_id.values().filter(|v| v.len() >= 2).collect();
    if eligible.len() < 2 {
        return Err(Error::invalid(format!(
            "{split:?} split needs >= 2 identities with >= 2 samples, found {}",
            eligible.len()
        )));
    }
    let mut r = rng::stream(seed, &[TAG_PAIRS]);
    let n_same = n_pairs / 2;
    let n_diff = n_pairs - n_same;

    let mut same_pool: Vec<(usize, usize)> = eligible
        .iter()
        .flat_map(|v| (0..v.len()).flat_map(move |i| (i + 1..v.len()).map(move |j| (v[i], v[j]))))
        .collect();
    same_pool.shuffle(&mut r);
    let mut pairs: Vec<VerificationPair> = (0..n_same)
        .map(|k| {
            let (a, b) = same_pool[k % same_pool.len()];
            VerificationPair { a, b, same: true }
        })
        .collect();

    let ids: Vec<&Vec<usize>> = by_id.values().collect();
    let max_diff: usize = {
        let total: usize = ids.iter().map(|v| v.len()).sum();
        let within: usize = ids.iter().map(|v| v.len() * v.len()).sum();
        (total * total - within) / 2
    };
    let mut seen = HashSet::new();
    while pairs.len() < n_same + n_diff {
        let ia = r.gen_range(0..ids.len());
        let mut ib = r.gen_range(0..ids.len() - 1);
        if ib >= ia {
            ib += 1;
        }
        let a = ids[ia][r.gen_range(0..ids[ia].len())];
        let b = ids[ib][r.gen_range(0..ids[ib].len())];
        let key = (a.min(b), a.max(b));
        if seen.len() < max_diff && !seen.insert(key) {
            continue;
        }
        pairs.push(VerificationPair { a, b, same: false });
    }
    Ok(pairs)
}

// ---------------------------------------------------------------------------
// attribute labels

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeLabels {
    pub names: Vec<String>,
    /// `labels[attribute][sample]`.
    pub labels: Vec<Vec<bool>>,
}

/// Label 1 where the factor is positive.
pub fn binarize_factors(samples: &[&FactorSample]) -> Result<AttributeLabels> {
    let mut labels = vec![Vec::with_capacity(samples.len()); FACTOR_NAMES.len()];
    for s in samples {
        for (a, name) in FACTOR_NAMES.iter().enumerate() {
            let v = s.factors.get(*name).ok_or_else(|| {
                Error::invalid(format!(
                    "sample {}/{} has no factor '{name}'",
                    s.identity, s.index
                ))
            })?;
            labels[a].push(*v > 0.0);
        }
    }
    Ok(AttributeLabels {
        names: FACTOR_NAMES.iter().map(|s| s.to_string()).collect(),
        labels,
    })
}

// ---------------------------------------------------------------------------
// image I/O

pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("tensor_to_rgb", format!("{s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|k| (d[k * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    }))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for k in 0..3 {
            data[k * plane + i] = p.0[k] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("rgb layout")
}

pub fn encode_png(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let img = tensor_to_rgb(t)?;
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|e| Error::Image {
        path: PathBuf::from("<memory>"),
        message: e.to_string(),
    })?;
    Ok(buf.into_inner())
}

/// Decodes PNG bytes into `(3, S, S)`, resizing bilinearly when needed.
pub fn decode_png(bytes: &[u8], size: usize) -> Result<Tensor<f32>> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| Error::Image {
        path: PathBuf::from("<memory>"),
        message: e.to_string(),
    })?;
    Ok(rgb_to_tensor(&fit(img.to_rgb8(), size)))
}

/// Decodes PNG bytes that must already be `size x size`.
pub fn decode_png_exact(bytes: &[u8], size: usize) -> Result<Tensor<f32>> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| Error::Image {
        path: PathBuf::from("<memory>"),
        message: e.to_string(),
    })?;
    if img.width() as usize != size || img.height() as usize != size {
        return Err(Error::shape(
            "decode_png_exact",
            format!("expected {size}x{size}, got {}x{}", img.width(), img.height()),
        ));
    }
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

fn fit(img: RgbImage, size: usize) -> RgbImage {
    if img.width() as usize == size && img.height() as usize == size {
        img
    } else {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    }
}

pub fn load_png(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(rgb_to_tensor(&fit(img.to_rgb8(), size)))
}

pub fn save_png(t: &Tensor<f32>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    tensor_to_rgb(t)?.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// on-disk layout

/// Writes `manifest.json`, `images/<id>/<index>.png` and `factors.csv`.
pub fn export(ds: &Dataset, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (entry, sample) in ds.manifest.samples.iter().zip(&ds.samples) {
        save_png(&sample.image, &out.join(&entry.path))?;
    }
    let manifest = serde_json::to_string_pretty(&ds.manifest)?;
    let mpath = out.join("manifest.json");
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;

    let mut csv = String::from("identity,index,");
    csv.push_str(&FACTOR_NAMES.join(","));
    csv.push('\n');
    for s in &ds.samples {
        if s.factors.is_empty() {
            continue;
        }
        csv.push_str(&format!("{},{}", s.identity, s.index));
        for name in FACTOR_NAMES {
            csv.push_str(&format!(",{}", s.factors.get(name).copied().unwrap_or(f64::NAN)));
        }
        csv.push('\n');
    }
    let cpath = out.join("factors.csv");
    fs::write(&cpath, csv).map_err(|e| Error::io(&cpath, e))
}

fn parse_factors(path: &Path) -> Result<BTreeMap<(usize, usize), BTreeMap<String, f64>>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(BTreeMap::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    if header.len() < 2 || header[0] != "identity" || header[1] != "index" {
        return Err(Error::invalid(format!("{}: bad header", path.display())));
    }
    let mut out = BTreeMap::new();
    for (ln, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        let bad = || Error::invalid(format!("{}: line {}", path.display(), ln + 2));
        if cols.len() != header.len() {
            return Err(bad());
        }
        let id = cols[0].parse().map_err(|_| bad())?;
        let idx = cols[1].parse().map_err(|_| bad())?;
        let mut map = BTreeMap::new();
        for (name, v) in header[2..].iter().zip(&cols[2..]) {
            map.insert(name.to_string(), v.parse::<f64>().map_err(|_| bad())?);
        }
        out.insert((id, idx), map);
    }
    Ok(out)
}

/// Reads a dataset written by [`export`].
pub fn load(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let mut factors = parse_factors(&dir.join("factors.csv"))?;
    let samples = manifest
        .samples
        .iter()
        .map(|e| {
            Ok(FactorSample {
                image: load_png(&dir.join(&e.path), manifest.image_size)?,
                identity: e.identity,
                index: e.index,
                factors: factors.remove(&(e.identity, e.index)).unwrap_or_default(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, samples })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    v.sort();
    Ok(v)
}

/// Ingests `root/<identity-name>/<image>.png`. Identities are labelled in
/// lexicographic order of their directory names.
pub fn ingest_directory(root: &Path, size: usize, seed: u64) -> Result<Dataset> {
    if size < 16 {
        return Err(Error::invalid(format!("image size must be >= 16, got {size}")));
    }
    let mut names = Vec::new();
    let mut entries = Vec::new();
    let mut samples = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = dir.file_name().unwrap_or_default().to_string_lossy().to_string();
        let id = names.len();
        let mut images = Vec::new();
        for file in sorted_entries(&dir)? {
            let is_png = file
                .extension()
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false);
            if !is_png {
                continue;
            }
            match load_png(&file, size) {
                Ok(img) => images.push((file, img)),
                Err(e) => log::warn!("skipping unreadable image: {e}"),
            }
        }
        if images.is_empty() {
            log::warn!("identity '{name}' has no readable images; skipped");
            continue;
        }
        if images.len() < 2 {
            log::warn!("identity '{name}' has fewer than 2 images");
        }
        names.push(name);
        let splits = assign_splits(seed, id, images.len());
        for (k, ((file, img), split)) in images.into_iter().zip(splits).enumerate() {
            let rel = file.strip_prefix(root).unwrap_or(&file).to_string_lossy().to_string();
            entries.push(SampleEntry {
                identity: id,
                index: k,
                split,
                path: rel,
            });
            samples.push(FactorSample {
                image: img,
                identity: id,
                index: k,
                factors: BTreeMap::new(),
            });
        }
    }
    if names.len() < 2 {
        return Err(Error::invalid(format!(
            "{}: need at least 2 identity directories with images",
            root.display()
        )));
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            seed,
            n_id: names.len(),
            samples_per_id: 0,
            image_size: size,
            source: DatasetSource::Directory {
                root: root.display().to_string(),
            },
            identity_names: names,
            samples: entries,
        },
        samples,
    })
}
