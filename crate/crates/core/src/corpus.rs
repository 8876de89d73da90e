//! Procedural base images, conversation templates, manifests and splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distortion::{apply_distortion, DistortionClass, DistortionSpec};
use crate::error::{Error, Result};
use crate::image::{check_dims, mean_and_variance, RgbImage, LUMA};
use crate::parallel;
use crate::rng::{stable_hash, CounterRng};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const IMAGE_PLACEHOLDER: &str = "<image>";

const FINETUNE_PROMPT: &str = "Looking at the <image> above, what is the synthetic distortion in the image?";
const OPTIONS_SUFFIX: &str = " Select from the following options: 1. Blur; 2. Noise; 3. Brightness; 4. Compression; 5. Contrast; 6. Colorfulness; 7. Jitter; 8. Clean";
/// Shared answer prefix; the class word follows it.
pub const ANSWER_PREFIX: &str = "The image has some";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    Finetune,
    BaselineOptions,
}

pub fn render_prompt(mode: PromptMode) -> String {
    match mode {
        PromptMode::Finetune => FINETUNE_PROMPT.to_string(),
        PromptMode::BaselineOptions => format!("{FINETUNE_PROMPT}{OPTIONS_SUFFIX}"),
    }
}

pub fn render_answer(class: DistortionClass) -> String {
    format!("{ANSWER_PREFIX} {}.", class.word())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub prompt: String,
    pub answer: String,
}

impl Conversation {
    pub fn for_class(class: DistortionClass) -> Self {
        Self {
            prompt: render_prompt(PromptMode::Finetune),
            answer: render_answer(class),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    Gradient,
    Checker,
    GaussianBlobs,
    ColorField,
    BandLimitedNoise,
}

impl Generator {
    pub const ALL: [Generator; 5] = [
        Generator::Gradient,
        Generator::Checker,
        Generator::GaussianBlobs,
        Generator::ColorField,
        Generator::BandLimitedNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Generator::Gradient => "gradient",
            Generator::Checker => "checker",
            Generator::GaussianBlobs => "gaussian-blobs",
            Generator::ColorField => "color-field",
            Generator::BandLimitedNoise => "band-limited-noise",
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown base generator {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseImageSpec {
    pub generator: Generator,
    pub seed: u64,
    pub size: usize,
}

// Target statistics every base image is normalized to.
const BASE_LUMA_MEAN: f64 = 0.5;
const BASE_LUMA_STD: f64 = 0.18;
const BASE_CHROMA_RMS: f64 = 0.08;

/// Renders a deterministic, non-constant square base image.
///
/// Each generator draws its structure and a few hard-edged rectangles are
/// stamped on top. Colour is then low-passed so fine detail lives in luma
/// only, the image is normalized to fixed luma mean/std and chroma RMS, and
/// a fine luma texture tops the detail up to a fixed level. Clean images
/// thus share one calibrated operating point that every distortion moves
/// away from.
pub fn generate_base_image(spec: &BaseImageSpec) -> Result<RgbImage> {
    let n = spec.size;
    check_dims(n, n)?;
    let rng = CounterRng::new(spec.seed, 100 + spec.generator as u64);
    let color = |i: u64| [rng.uniform(i), rng.uniform(i + 1), rng.uniform(i + 2)];
    let mut px = vec![0.0; n * n * 3];
    let put = |px: &mut Vec<f64>, x: usize, y: usize, c: [f64; 3]| {
        px[(y * n + x) * 3..(y * n + x) * 3 + 3].copy_from_slice(&c);
    };

    match spec.generator {
        Generator::Gradient => {
            // Dark-to-bright in luma from left to right, with a guaranteed gap.
            let a = color(0).map(|v| 0.4 * v);
            let b = color(3).map(|v| 0.6 + 0.4 * v);
            for y in 0..n {
                for x in 0..n {
                    let t = x as f64 / (n - 1) as f64;
                    put(&mut px, x, y, [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t));
                }
            }
        }
        Generator::Checker => {
            let cell = [8, 10, 12, 16][(rng.bits(10) % 4) as usize];
            let (ox, oy) = ((rng.bits(11) % cell as u64) as usize, (rng.bits(12) % cell as u64) as usize);
            let (a, b) = (color(0), color(3));
            for y in 0..n {
                for x in 0..n {
                    let on = ((x + ox) / cell + (y + oy) / cell) % 2 == 0;
                    put(&mut px, x, y, if on { a } else { b });
                }
            }
        }
        Generator::GaussianBlobs => {
            let bg = color(0);
            let blobs: Vec<([f64; 3], f64, f64, f64)> = (0..6)
                .map(|k| {
                    let base = 10 + 10 * k as u64;
                    (
                        color(base),
                        rng.uniform(base + 3) * n as f64,
                        rng.uniform(base + 4) * n as f64,
                        n as f64 * (0.06 + 0.14 * rng.uniform(base + 5)),
                    )
                })
                .collect();
            for y in 0..n {
                for x in 0..n {
                    let mut c = bg;
                    for (col, cx, cy, s) in &blobs {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        let wgt = (-d2 / (2.0 * s * s)).exp();
                        for ch in 0..3 {
                            c[ch] = c[ch] * (1.0 - wgt) + col[ch] * wgt;
                        }
                    }
                    put(&mut px, x, y, c);
                }
            }
        }
        Generator::ColorField => {
            let sites: Vec<(f64, f64, [f64; 3])> = (0..8)
                .map(|k| {
                    let base = 10 + 10 * k as u64;
                    (rng.uniform(base) * n as f64, rng.uniform(base + 1) * n as f64, color(base + 2))
                })
                .collect();
            for y in 0..n {
                for x in 0..n {
                    let nearest = sites
                        .iter()
                        .min_by(|a, b| {
                            let da = (x as f64 - a.0).powi(2) + (y as f64 - a.1).powi(2);
                            let db = (x as f64 - b.0).powi(2) + (y as f64 - b.1).powi(2);
                            da.total_cmp(&db)
                        })
                        .expect("non-empty site list");
                    put(&mut px, x, y, nearest.2);
                }
            }
        }
        Generator::BandLimitedNoise => {
            // Sum of sinusoids with wavelengths between 8 and 32 pixels.
            let waves: Vec<(f64, f64, [f64; 3])> = (0..12)
                .map(|k| {
                    let base = 10 + 10 * k as u64;
                    let freq = (1.0 / 32.0 + rng.uniform(base) * (1.0 / 8.0 - 1.0 / 32.0)) * std::f64::consts::TAU;
                    let angle = rng.uniform(base + 1) * std::f64::consts::TAU;
                    (
                        freq * angle.cos(),
                        freq * angle.sin(),
                        [0, 1, 2].map(|c| rng.uniform(base + 2 + c) * std::f64::consts::TAU),
                    )
                })
                .collect();
            for y in 0..n {
                for x in 0..n {
                    let mut c = [0.0; 3];
                    for (fx, fy, phase) in &waves {
                        for ch in 0..3 {
                            c[ch] += (fx * x as f64 + fy * y as f64 + phase[ch]).sin();
                        }
                    }
                    put(&mut px, x, y, c);
                }
            }
        }
    }

    // Hard-edged detail rectangles, kept off the first and last columns.
    for k in 0..4u64 {
        let base = 500 + 10 * k;
        let rw = 3 + (rng.bits(base) % 8) as usize;
        let rh = 3 + (rng.bits(base + 1) % 8) as usize;
        let x0 = 2 + (rng.bits(base + 2) % (n - rw - 3) as u64) as usize;
        let y0 = (rng.bits(base + 3) % (n - rh) as u64) as usize;
        let mut c = color(base + 4);
        if spec.generator == Generator::BandLimitedNoise {
            // Sinusoid sums span roughly [-3, 3].
            c = c.map(|v| 6.0 * v - 3.0);
        }
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                put(&mut px, x, y, c);
            }
        }
    }

    smooth_chroma(&mut px, n);
    normalize_statistics(&mut px);
    calibrate_texture(&mut px, n, &rng);
    RgbImage::from_unit(n, n, &px)
}

// Chroma is blurred with this sigma so colour carries only coarse structure.
const CHROMA_SIGMA: f64 = 3.0;
// Target interior luma Laplacian energy of a finished base image.
const TARGET_DETAIL: f64 = 0.15;

/// Low-passes the chroma planes while keeping luma untouched.
fn smooth_chroma(px: &mut [f64], n: usize) {
    let luma: Vec<f64> = px.chunks_exact(3).map(|p| luma_of([p[0], p[1], p[2]])).collect();
    let chroma: Vec<f64> = px.chunks_exact(3).zip(&luma).flat_map(|(p, y)| [p[0] - y, p[1] - y, p[2] - y]).collect();
    let smooth = crate::distortion::gaussian_blur(&chroma, n, n, CHROMA_SIGMA);
    for ((p, y), c) in px.chunks_exact_mut(3).zip(&luma).zip(smooth.chunks_exact(3)) {
        for ch in 0..3 {
            p[ch] = y + c[ch];
        }
    }
}

/// Mean absolute 4-neighbour Laplacian of the luma plane over interior pixels.
fn interior_detail(px: &[f64], n: usize) -> f64 {
    let luma: Vec<f64> = px.chunks_exact(3).map(|p| luma_of([p[0], p[1], p[2]])).collect();
    let at = |x: usize, y: usize| luma[y * n + x];
    let mut total = 0.0;
    for y in 1..n - 1 {
        for x in 1..n - 1 {
            total += (4.0 * at(x, y) - at(x - 1, y) - at(x + 1, y) - at(x, y - 1) - at(x, y + 1)).abs();
        }
    }
    total / ((n - 2) * (n - 2)) as f64
}

/// Adds a luma-only texture of short-wavelength sinusoids (3 to 8 px), scaled
/// so the normalized image reaches a fixed amount of fine detail. Images whose
/// structure already exceeds the target get no texture.
fn calibrate_texture(px: &mut [f64], n: usize, rng: &CounterRng) {
    let waves: Vec<(f64, f64, f64)> = (0..6)
        .map(|k| {
            let base = 900 + 10 * k as u64;
            let wavelength = 3.0 + 5.0 * rng.uniform(base);
            let angle = rng.uniform(base + 1) * std::f64::consts::PI;
            let f = std::f64::consts::TAU / wavelength;
            (f * angle.cos(), f * angle.sin(), rng.uniform(base + 2) * std::f64::consts::TAU)
        })
        .collect();
    let texture: Vec<f64> = (0..n * n)
        .map(|i| {
            let (x, y) = ((i % n) as f64, (i / n) as f64);
            // The outermost columns stay untextured so the gradient ramp keeps
            // its dark left edge and bright right edge.
            let edge = i % n == 0 || i % n == n - 1;
            if edge {
                0.0
            } else {
                waves.iter().map(|(fx, fy, ph)| (fx * x + fy * y + ph).sin()).sum()
            }
        })
        .collect();
    let (_, var) = mean_and_variance(&texture);
    if var <= 1e-12 {
        return;
    }
    let unit = 1.0 / var.sqrt();
    let with = |amp: f64| {
        let mut out = px.to_vec();
        for (p, t) in out.chunks_exact_mut(3).zip(&texture) {
            for c in p.iter_mut() {
                *c += amp * unit * t;
            }
        }
        normalize_statistics(&mut out);
        out
    };
    if interior_detail(px, n) >= TARGET_DETAIL {
        return;
    }
    // Detail grows monotonically with the texture amplitude; bisect.
    let (mut lo, mut hi) = (0.0, 0.5);
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if interior_detail(&with(mid), n) < TARGET_DETAIL {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    px.copy_from_slice(&with(hi));
}

fn luma_of(c: [f64; 3]) -> f64 {
    LUMA[0] * c[0] + LUMA[1] * c[1] + LUMA[2] * c[2]
}

fn normalize_statistics(px: &mut [f64]) {
    let luma: Vec<f64> = px.chunks_exact(3).map(|p| luma_of([p[0], p[1], p[2]])).collect();
    let (mean, var) = mean_and_variance(&luma);
    let gain = if var > 1e-12 { BASE_LUMA_STD / var.sqrt() } else { 1.0 };
    let chroma_sq: f64 = px
        .chunks_exact(3)
        .zip(&luma)
        .map(|(p, y)| p.iter().map(|c| (c - y).powi(2)).sum::<f64>())
        .sum();
    let chroma_rms = (chroma_sq / px.len() as f64).sqrt();
    let cgain = if chroma_rms > 1e-12 { BASE_CHROMA_RMS / chroma_rms } else { 1.0 };
    for (p, y) in px.chunks_exact_mut(3).zip(&luma) {
        let ny = BASE_LUMA_MEAN + (y - mean) * gain;
        for c in p.iter_mut() {
            *c = ny + (*c - y) * cgain;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    /// Relative to the manifest's directory (or absolute for external imports).
    pub image_path: String,
    pub class: DistortionClass,
    pub severity: u8,
    pub seed: u64,
    /// `None` for externally imported images.
    pub base: Option<BaseImageSpec>,
    /// `None` until the corpus is split.
    pub split: Option<Split>,
    pub conversation: Conversation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    pub records: Vec<SampleRecord>,
    pub class_counts: BTreeMap<DistortionClass, usize>,
}

impl Manifest {
    pub fn new(mut records: Vec<SampleRecord>) -> Result<Self> {
        records.sort_by(|a, b| a.id.cmp(&b.id));
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::validation(format!("duplicate sample id {:?}", r.id)));
            }
        }
        let class_counts = count_classes(&records);
        Ok(Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            config_digest: None,
            records,
            class_counts,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Integrity(format!(
                "manifest schema_version {} is not supported (expected {})",
                self.schema_version, MANIFEST_SCHEMA_VERSION
            )));
        }
        if count_classes(&self.records) != self.class_counts {
            return Err(Error::validation("class_counts disagree with records"));
        }
        let ids: BTreeSet<&str> = self.records.iter().map(|r| r.id.as_str()).collect();
        if ids.len() != self.records.len() {
            return Err(Error::validation("duplicate sample ids in manifest"));
        }
        Ok(())
    }

    /// Records of one split, in manifest order.
    pub fn split(&self, split: Split) -> Manifest {
        let records: Vec<SampleRecord> = self
            .records
            .iter()
            .filter(|r| r.split == Some(split))
            .cloned()
            .collect();
        let class_counts = count_classes(&records);
        Manifest {
            schema_version: self.schema_version,
            config_digest: self.config_digest.clone(),
            records,
            class_counts,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Resolves a record's image path against the manifest directory.
    pub fn image_location(root: &Path, record: &SampleRecord) -> PathBuf {
        let p = Path::new(&record.image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            root.join(p)
        }
    }

    /// Loads every record's image from disk, in record order.
    pub fn load_images(&self, root: &Path) -> Result<Vec<RgbImage>> {
        parallel::install(|| {
            self.records
                .par_iter()
                .map(|r| RgbImage::load_png(&Self::image_location(root, r)))
                .collect()
        })
    }
}

fn count_classes(records: &[SampleRecord]) -> BTreeMap<DistortionClass, usize> {
    let mut counts = BTreeMap::new();
    for r in records {
        *counts.entry(r.class).or_insert(0) += 1;
    }
    counts
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGE_DIR: &str = "images";

/// Planned record for sample `k` of `class`; image bytes are produced separately.
fn plan_record(class: DistortionClass, k: usize, image_size: usize, master_seed: u64) -> SampleRecord {
    let id = format!("{}_{:05}", class.word(), k);
    let seed = stable_hash(master_seed, &id);
    // Severity cycles fastest, the generator every five samples, so each
    // (generator, severity) pair is equally represented.
    let severity = if class == DistortionClass::Clean { 0 } else { (k % 5) as u8 + 1 };
    let generator = Generator::ALL[(k / 5) % Generator::ALL.len()];
    SampleRecord {
        image_path: format!("{IMAGE_DIR}/{id}.png"),
        id,
        class,
        severity,
        seed,
        base: Some(BaseImageSpec {
            generator,
            seed: stable_hash(seed, "base"),
            size: image_size,
        }),
        split: None,
        conversation: Conversation::for_class(class),
    }
}

/// Renders the image a planned synthetic record refers to.
pub fn render_record(record: &SampleRecord) -> Result<RgbImage> {
    let base = record
        .base
        .as_ref()
        .ok_or_else(|| Error::validation(format!("record {} has no base image spec", record.id)))?;
    let img = generate_base_image(base)?;
    apply_distortion(
        &img,
        &DistortionSpec {
            class: record.class,
            severity: record.severity,
            seed: record.seed,
        },
    )
}

/// Generates a class-balanced corpus under `out_dir` and persists its manifest.
pub fn build_corpus(count_per_class: usize, image_size: usize, master_seed: u64, out_dir: &Path) -> Result<Manifest> {
    if count_per_class == 0 {
        return Err(Error::domain("count_per_class must be at least 1"));
    }
    check_dims(image_size, image_size)?;
    let image_dir = out_dir.join(IMAGE_DIR);
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;

    let records: Vec<SampleRecord> = DistortionClass::ALL
        .into_iter()
        .flat_map(|class| (0..count_per_class).map(move |k| (class, k)))
        .map(|(class, k)| plan_record(class, k, image_size, master_seed))
        .collect();

    parallel::install(|| {
        records.par_iter().try_for_each(|r| {
            let img = render_record(r)?;
            img.save_png(&out_dir.join(&r.image_path))
        })
    })?;

    let manifest = Manifest::new(records)?;
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Stratified random split: per class, `round(train_fraction * n)` records go to train.
pub fn split_corpus(manifest: &Manifest, train_fraction: f64, seed: u64) -> Result<Manifest> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::domain(format!("train_fraction {train_fraction} must lie in (0, 1)")));
    }
    let mut by_class: BTreeMap<DistortionClass, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_class.entry(r.class).or_default().push(i);
    }
    let mut out = manifest.clone();
    for (class, mut idx) in by_class {
        if idx.len() < 2 {
            return Err(Error::domain(format!(
                "class {class} has {} sample(s); at least 2 are needed to split",
                idx.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(seed, class.word()));
        idx.shuffle(&mut rng);
        let n_train = (train_fraction * idx.len() as f64).round() as usize;
        for (rank, &i) in idx.iter().enumerate() {
            out.records[i].split = Some(if rank < n_train { Split::Train } else { Split::Test });
        }
    }
    Ok(out)
}

/// Target of an external distortion name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelTarget {
    Class(DistortionClass),
    Skip,
}

impl FromStr for LabelTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("skip") {
            Ok(LabelTarget::Skip)
        } else {
            s.parse().map(LabelTarget::Class)
        }
    }
}

/// Parses a JSON object mapping external distortion names to class words or `"skip"`.
pub fn parse_label_map(json: &str) -> Result<BTreeMap<String, LabelTarget>> {
    let raw: BTreeMap<String, String> = serde_json::from_str(json)?;
    raw.into_iter().map(|(k, v)| Ok((k, v.parse()?))).collect()
}

/// Imports a CSV (`image,distortion[,...]`) whose image paths are relative to the CSV.
pub fn import_external_manifest(path: &Path, label_map: &BTreeMap<String, LabelTarget>) -> Result<Manifest> {
    let root = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::validation(format!("{other:?}")),
        })?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::validation(format!("{} lacks a {name:?} column", path.display())))
    };
    let (img_col, dist_col) = (col("image")?, col("distortion")?);

    let mut rows = Vec::new();
    for row in reader.records() {
        let row = row?;
        let field = |i: usize| row.get(i).map(str::trim).unwrap_or_default().to_string();
        rows.push((field(img_col), field(dist_col)));
    }

    let unmapped: BTreeSet<&str> = rows
        .iter()
        .map(|(_, d)| d.as_str())
        .filter(|d| !label_map.contains_key(*d))
        .collect();
    if !unmapped.is_empty() {
        let names: Vec<&str> = unmapped.into_iter().collect();
        return Err(Error::validation(format!("unmapped distortion names: {}", names.join(", "))));
    }

    let mut missing = Vec::new();
    let mut records = Vec::new();
    for (i, (image, distortion)) in rows.iter().enumerate() {
        let LabelTarget::Class(class) = label_map[distortion] else {
            continue;
        };
        let location = root.join(image);
        if !location.is_file() {
            missing.push(image.clone());
            continue;
        }
        records.push(SampleRecord {
            id: format!("ext_{i:06}"),
            image_path: location.to_string_lossy().into_owned(),
            class,
            severity: 0,
            seed: 0,
            base: None,
            split: None,
            conversation: Conversation::for_class(class),
        });
    }
    if !missing.is_empty() {
        return Err(Error::validation(format!("missing image files: {}", missing.join(", "))));
    }
    Manifest::new(records)
}
