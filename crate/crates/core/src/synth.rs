//! Procedural stand-in for sagittal vertebra slices with known compression.
//!
//! Each image shows a vertical stack of bright rounded-rectangle bodies on a
//! dark background. Only the center body is compressed; its measured height
//! is the ground truth behind every grade label. [`measure_height_reduction`]
//! reads the compression back from pixels so generated or edited images can
//! be checked against the same oracle.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;

pub const MAX_COMPRESSION: f64 = 0.75;

/// Fraction of the center body's height that has been lost.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct CompressionFraction(f64);

impl CompressionFraction {
    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=MAX_COMPRESSION).contains(&value) {
            return Err(Error::OutOfRange(format!(
                "compression {value} outside [0, {MAX_COMPRESSION}]"
            )));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Genant grade.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Grade {
    G0 = 0,
    G1 = 1,
    G2 = 2,
    G3 = 3,
}

impl Grade {
    pub const ALL: [Grade; 4] = [Grade::G0, Grade::G1, Grade::G2, Grade::G3];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "G{}", self.index())
    }
}

/// Genant thresholds with the healthy band ending at 7.5 %.
pub fn grade_from_compression(c: CompressionFraction) -> Grade {
    let c = c.value();
    if c <= 0.075 {
        Grade::G0
    } else if c <= 0.25 {
        Grade::G1
    } else if c <= 0.40 {
        Grade::G2
    } else {
        Grade::G3
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn id(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }
}

/// Geometry and appearance of generated images. Lengths are fractions of the
/// image size so the same parameters work at every resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub image_size: usize,
    /// Number of stacked bodies; odd, the middle one is the center body.
    pub body_count: usize,
    pub body_height: f64,
    pub gap: f64,
    /// Smallest visible slice of each clipped neighbor.
    pub min_neighbor_visible: f64,
    pub body_width: (f64, f64),
    pub corner_radius: f64,
    /// Extra anterior compression relative to the mean, in units of `c`.
    pub wedge: f64,
    pub jitter_x: f64,
    pub background: (f64, f64),
    pub body_intensity: (f64, f64),
    pub noise_sigma: f64,
    pub blur_radius: usize,
    pub supersample: usize,
    /// Foreground threshold used by the measurement oracle.
    pub threshold: f64,
    /// Half-width of the central measurement strip.
    pub strip_half_width: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            body_count: 3,
            body_height: 0.40,
            gap: 0.12,
            min_neighbor_visible: 0.05,
            body_width: (0.55, 0.70),
            corner_radius: 0.08,
            wedge: 0.3,
            jitter_x: 0.04,
            background: (0.05, 0.20),
            body_intensity: (0.80, 0.95),
            noise_sigma: 0.05,
            blur_radius: 1,
            supersample: 4,
            threshold: 0.5,
            strip_half_width: 0.08,
        }
    }
}

impl GeneratorConfig {
    pub fn with_size(image_size: usize) -> Self {
        Self {
            image_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::InvalidConfig(m));
        if self.image_size < 8 {
            return err(format!("image_size {} too small", self.image_size));
        }
        if self.body_count == 0 || self.body_count.is_multiple_of(2) {
            return err(format!("body_count must be odd, got {}", self.body_count));
        }
        if self.body_height <= 0.0 || self.gap < 0.0 {
            return err("body_height must be positive and gap non-negative".into());
        }
        let neighbors = if self.body_count > 1 { 2.0 * self.min_neighbor_visible } else { 0.0 };
        let extent = self.body_height + 2.0 * self.gap + neighbors;
        if extent > 1.0 {
            return err(format!(
                "body heights + gaps exceed image height ({extent:.3} of the image)"
            ));
        }
        if !(0.0..1.0 / 3.0).contains(&self.wedge) {
            return err(format!("wedge {} must be in [0, 1/3)", self.wedge));
        }
        let (w0, w1) = self.body_width;
        if !(0.0 < w0 && w0 <= w1 && w1 + 2.0 * self.jitter_x <= 1.0) {
            return err("body_width range must fit inside the image".into());
        }
        if self.background.1 >= self.threshold || self.body_intensity.0 <= self.threshold {
            return err("threshold must separate background and body intensities".into());
        }
        if self.supersample == 0 {
            return err("supersample must be positive".into());
        }
        Ok(())
    }

    fn px(&self, frac: f64) -> f64 {
        frac * self.image_size as f64
    }

    /// Unscaled body height in pixels.
    pub fn reference_height_px(&self) -> f64 {
        self.px(self.body_height)
    }
}

/// Grayscale image with its ground-truth labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub size: usize,
    pub pixels: Vec<f32>,
    pub compression: CompressionFraction,
    pub grade: Grade,
    pub fractured: bool,
    pub split: Split,
    pub graded: bool,
}

struct Body {
    cx: f64,
    half_width: f64,
    center_y: f64,
    height: f64,
    compression: f64,
    intensity: f64,
}

impl Body {
    /// Top and bottom edge at column `x`. Only a compressed body has a
    /// sloped top plate: the anterior (left) corner drops faster.
    fn edges(&self, x: f64, wedge: f64) -> (f64, f64) {
        let c = self.compression;
        let xn = ((x - self.cx) / self.half_width).clamp(-1.0, 1.0);
        let bottom = self.center_y + self.height * (1.0 - c) / 2.0;
        let local = self.height * (1.0 - c * (1.0 + wedge * -xn));
        (bottom - local, bottom)
    }

    fn contains(&self, x: f64, y: f64, wedge: f64, radius: f64) -> bool {
        let (left, right) = (self.cx - self.half_width, self.cx + self.half_width);
        if x < left || x > right {
            return false;
        }
        let (top, bottom) = self.edges(x, wedge);
        if y < top || y > bottom {
            return false;
        }
        let r = radius.min(self.half_width).min((bottom - top) / 2.0);
        let dx = (left + r - x).max(x - (right - r)).max(0.0);
        let dy = (top + r - y).max(y - (bottom - r)).max(0.0);
        dx * dx + dy * dy <= r * r
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn box_blur(img: &[f64], size: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return img.to_vec();
    }
    let r = radius as isize;
    let n = size as isize;
    let mut out = vec![0.0; img.len()];
    for y in 0..n {
        for x in 0..n {
            let (mut acc, mut cnt) = (0.0, 0.0);
            for yy in (y - r).max(0)..=(y + r).min(n - 1) {
                for xx in (x - r).max(0)..=(x + r).min(n - 1) {
                    acc += img[(yy * n + xx) as usize];
                    cnt += 1.0;
                }
            }
            out[(y * n + x) as usize] = acc / cnt;
        }
    }
    out
}

/// Renders one image; pure function of its arguments.
///
/// The returned labels use split `train` and `graded = false`; dataset
/// generation overrides them.
pub fn render_vertebra_column(
    compression: CompressionFraction,
    style_seed: u64,
    config: &GeneratorConfig,
) -> Result<LabeledImage> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(style_seed);
    let size = config.image_size;
    let background = uniform(&mut rng, config.background);
    let base_intensity = uniform(&mut rng, config.body_intensity);
    let width = uniform(&mut rng, config.body_width);
    let jitter = rng.random_range(-1.0..=1.0) * config.px(config.jitter_x);
    let cx = size as f64 / 2.0 + jitter;
    let cy = size as f64 / 2.0;
    let pitch = config.px(config.body_height + config.gap);
    let center_index = config.body_count / 2;
    let (lo, hi) = config.body_intensity;
    let bodies: Vec<Body> = (0..config.body_count)
        .map(|i| {
            let k = i as f64 - center_index as f64;
            let shade = (base_intensity + rng.random_range(-0.03..=0.03)).clamp(lo, hi);
            Body {
                cx,
                half_width: config.px(width) / 2.0,
                center_y: cy + k * pitch,
                height: config.reference_height_px(),
                compression: if i == center_index { compression.value() } else { 0.0 },
                intensity: shade,
            }
        })
        .collect();
    let radius = config.px(config.corner_radius);
    let ss = config.supersample;
    let mut img = vec![0.0; size * size];
    for py in 0..size {
        for px in 0..size {
            let mut acc = 0.0;
            for sy in 0..ss {
                for sx in 0..ss {
                    let x = px as f64 + (sx as f64 + 0.5) / ss as f64;
                    let y = py as f64 + (sy as f64 + 0.5) / ss as f64;
                    acc += bodies
                        .iter()
                        .find(|b| b.contains(x, y, config.wedge, radius))
                        .map_or(background, |b| b.intensity);
                }
            }
            img[py * size + px] = acc / (ss * ss) as f64;
        }
    }
    for v in img.iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v += config.noise_sigma * n;
    }
    let pixels = box_blur(&img, size, config.blur_radius)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0) as f32)
        .collect();
    let grade = grade_from_compression(compression);
    Ok(LabeledImage {
        size,
        pixels,
        compression,
        grade,
        fractured: grade >= Grade::G2,
        split: Split::Train,
        graded: false,
    })
}

/// Reads the center body's height reduction back from pixels.
///
/// Locates the center body horizontally from above-threshold pixels in its
/// band, then integrates normalized intensity down each column of a narrow
/// strip around the body's middle. Background and body levels are the
/// medians of the strip pixels below and above the threshold, which gives a
/// sub-pixel height estimate that is compared against the unscaled
/// reference height.
pub fn measure_height_reduction(pixels: &[f32], config: &GeneratorConfig) -> Result<f64> {
    let size = config.image_size;
    if pixels.len() != size * size {
        return Err(Error::shape(size * size, pixels.len()));
    }
    let cy = size as f64 / 2.0;
    let half_band = (config.reference_height_px() + config.px(config.gap)) / 2.0;
    let rows: Vec<usize> = (0..size)
        .filter(|&y| ((y as f64 + 0.5) - cy).abs() <= half_band)
        .collect();
    let thr = config.threshold as f32;
    // All bodies share one horizontal center; the healthy neighbors keep
    // the extent visible when the anterior end of a crushed body vanishes.
    let occupied: Vec<usize> = (0..size)
        .filter(|&x| (0..size).any(|y| pixels[y * size + x] >= thr))
        .collect();
    let (Some(&left), Some(&right)) = (occupied.first(), occupied.last()) else {
        return Err(Error::MeasurementFailed("no foreground in the center band".into()));
    };
    let mid = (left + right) as f64 / 2.0;
    let half = config.px(config.strip_half_width).max(1.0);
    let strip: Vec<usize> = (0..size)
        .filter(|&x| (x as f64 - mid).abs() <= half)
        .collect();
    let values: Vec<f64> = strip
        .iter()
        .flat_map(|&x| rows.iter().map(move |&y| f64::from(pixels[y * size + x])))
        .collect();
    let median = |mut v: Vec<f64>| -> Option<f64> {
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some(v[v.len() / 2])
    };
    let thr = config.threshold;
    if !values.iter().any(|&v| v >= thr) {
        return Err(Error::MeasurementFailed("no foreground in the measurement strip".into()));
    }
    // Plateau pixels: foreground rows of each strip column minus the two
    // blurred rows at either end. A thin body has no plateau and borrows
    // its level from the rest of the image.
    let plateau: Vec<f64> = values
        .chunks(rows.len())
        .flat_map(|col| {
            let fgs: Vec<f64> = col.iter().copied().filter(|&v| v >= thr).collect();
            let n = fgs.len();
            fgs.into_iter().skip(2).take(n.saturating_sub(4))
        })
        .collect();
    let fg = if plateau.len() >= 2 * strip.len() {
        median(plateau)
    } else {
        median(pixels.iter().map(|&v| f64::from(v)).filter(|&v| v >= thr).collect())
    }
    .unwrap_or(1.0);
    // Background comes from band pixels well clear of the body; blurred
    // edge pixels inside the strip would bias it upward.
    let clear: Vec<f64> = rows
        .iter()
        .flat_map(|&y| {
            (0..size)
                .filter(|&x| x + 2 <= left || x >= right + 3)
                .map(move |x| f64::from(pixels[y * size + x]))
        })
        .filter(|&v| v < thr)
        .collect();
    let bg = match median(clear) {
        Some(v) => v,
        None => median(pixels.iter().map(|&v| f64::from(v)).filter(|&v| v < thr).collect()).unwrap_or(0.0),
    };
    let height = values.iter().map(|v| (v - bg) / (fg - bg)).sum::<f64>() / strip.len() as f64;
    Ok(1.0 - height / config.reference_height_px())
}

/// Sampling law for a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Probability that a sample is compressed at all.
    pub compressed_fraction: f64,
    pub healthy_range: (f64, f64),
    pub compressed_range: (f64, f64),
    /// Fraction of compressed samples whose grade is exposed.
    pub graded_fraction: f64,
    pub seed: u64,
    pub generator: GeneratorConfig,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_train: 3000,
            n_val: 200,
            n_test: 600,
            compressed_fraction: 0.2,
            healthy_range: (0.0, 0.05),
            compressed_range: (0.10, 0.70),
            graded_fraction: 0.5,
            seed: 1,
            generator: GeneratorConfig::default(),
        }
    }
}

impl DatasetSpec {
    /// Class balance modeled on the source data: about 10.4 % of samples
    /// are G2/G3 and 220 of 1248 compressed samples carry a grade.
    pub fn paper_like() -> Self {
        Self {
            // 3/4 of the compressed range is G2 or G3.
            compressed_fraction: 1248.0 / 12019.0 / 0.75,
            graded_fraction: 220.0 / 1248.0,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" | "desk" => Ok(Self::default()),
            "paper-like" => Ok(Self::paper_like()),
            other => Err(Error::InvalidConfig(format!("unknown dataset preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if self.n_train + self.n_val + self.n_test == 0 {
            return Err(Error::InvalidConfig("dataset must contain at least one image".into()));
        }
        for (name, v) in [
            ("compressed_fraction", self.compressed_fraction),
            ("graded_fraction", self.graded_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::OutOfRange(format!("{name} = {v} outside [0, 1]")));
            }
        }
        for (name, (lo, hi)) in [
            ("healthy_range", self.healthy_range),
            ("compressed_range", self.compressed_range),
        ] {
            if !(0.0 <= lo && lo <= hi && hi <= MAX_COMPRESSION) {
                return Err(Error::OutOfRange(format!("{name} = ({lo}, {hi}) invalid")));
            }
        }
        Ok(())
    }

    fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }
}

/// SplitMix64 finalizer; decorrelates per-image seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn image_seed(global: u64, split: Split, index: usize) -> u64 {
    mix(mix(mix(global) ^ split.id()) ^ index as u64)
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// One row of `manifest.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub filename: String,
    pub split: Split,
    pub compression: f64,
    pub grade: Grade,
    pub fractured: bool,
    pub graded: bool,
}

/// A generated dataset held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub records: Vec<ManifestRecord>,
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = (&ManifestRecord, &LabeledImage)> {
        self.records
            .iter()
            .zip(&self.images)
            .filter(move |(r, _)| r.split == split)
    }
}

/// Samples and renders every image of `spec` in memory.
pub fn generate_dataset(spec: &DatasetSpec, exec: Exec) -> Result<Dataset> {
    spec.validate()?;
    let jobs: Vec<(Split, usize)> = Split::ALL
        .iter()
        .flat_map(|&s| (0..spec.count(s)).map(move |i| (s, i)))
        .collect();
    let rendered = exec.try_map(&jobs, |&(split, index)| -> Result<(ManifestRecord, LabeledImage)> {
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed(spec.seed, split, index));
        let compressed = rng.random_bool(spec.compressed_fraction);
        let range = if compressed { spec.compressed_range } else { spec.healthy_range };
        let c = CompressionFraction::new(round6(uniform(&mut rng, range)))?;
        let graded = compressed && rng.random_bool(spec.graded_fraction);
        let style: u64 = rng.random();
        let mut img = render_vertebra_column(c, style, &spec.generator)?;
        img.split = split;
        img.graded = graded;
        let record = ManifestRecord {
            filename: format!("{}_{index:05}.png", split.as_str()),
            split,
            compression: c.value(),
            grade: img.grade,
            fractured: img.fractured,
            graded,
        };
        Ok((record, img))
    })?;
    let (records, images) = rendered.into_iter().unzip();
    Ok(Dataset {
        spec: spec.clone(),
        records,
        images,
    })
}

pub const MANIFEST_HEADER: &str = "filename,split,compression,grade,fractured,graded";

pub fn manifest_csv(records: &[ManifestRecord]) -> String {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{:.6},{},{},{}\n",
            r.filename,
            r.split.as_str(),
            r.compression,
            r.grade.index(),
            r.fractured as u8,
            r.graded as u8
        ));
    }
    out
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestRecord>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(Error::format(path, "unexpected manifest header"));
    }
    let flag = |s: &str, line: usize| match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(Error::format(path, format!("line {line}: bad boolean {s:?}"))),
    };
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let n = i + 2;
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 6 {
                return Err(Error::format(path, format!("line {n}: expected 6 fields")));
            }
            let compression: f64 = f[2]
                .parse()
                .map_err(|_| Error::format(path, format!("line {n}: bad compression")))?;
            let grade = f[3]
                .parse::<usize>()
                .ok()
                .and_then(Grade::from_index)
                .ok_or_else(|| Error::format(path, format!("line {n}: bad grade")))?;
            Ok(ManifestRecord {
                filename: f[0].to_string(),
                split: f[1].parse()?,
                compression,
                grade,
                fractured: flag(f[4], n)?,
                graded: flag(f[5], n)?,
            })
        })
        .collect()
}

/// Generator parameters and seed stored next to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub seed: u64,
    pub spec: DatasetSpec,
}

pub fn save_png(path: &Path, pixels: &[f32], size: usize) -> Result<()> {
    let mut img = GrayImage::new(size as u32, size as u32);
    for (i, p) in img.pixels_mut().enumerate() {
        *p = Luma([(pixels[i].clamp(0.0, 1.0) * 255.0).round() as u8]);
    }
    img.save(path)?;
    Ok(())
}

/// Saves a horizontal strip of equally sized square images.
pub fn save_png_strip(path: &Path, images: &[Vec<f32>], size: usize) -> Result<()> {
    let mut img = GrayImage::new((size * images.len()) as u32, size as u32);
    for (k, px) in images.iter().enumerate() {
        for y in 0..size {
            for x in 0..size {
                let v = (px[y * size + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                img.put_pixel((k * size + x) as u32, y as u32, Luma([v]));
            }
        }
    }
    img.save(path)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<(Vec<f32>, usize)> {
    let img = image::open(path)?.to_luma8();
    if img.width() != img.height() {
        return Err(Error::format(path, "image is not square"));
    }
    let size = img.width() as usize;
    Ok((img.pixels().map(|p| p.0[0] as f32 / 255.0).collect(), size))
}

pub fn save_raw(path: &Path, pixels: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = pixels.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_raw(path: &Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(path, "raw image length not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

/// Loads an image, preferring the lossless `.f32` sidecar when present.
pub fn load_image(path: &Path) -> Result<(Vec<f32>, usize)> {
    let raw = path.with_extension("f32");
    if raw.exists() {
        let px = load_raw(&raw)?;
        let size = (px.len() as f64).sqrt().round() as usize;
        if size * size != px.len() {
            return Err(Error::format(&raw, "raw image is not square"));
        }
        return Ok((px, size));
    }
    load_png(path)
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const INFO_FILE: &str = "dataset.json";

/// Writes PNGs (plus `.f32` sidecars when `raw`), the manifest and the
/// generator parameter block into `dir`.
pub fn write_dataset(dir: &Path, dataset: &Dataset, raw: bool, exec: Exec) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pairs: Vec<(&ManifestRecord, &LabeledImage)> = dataset.records.iter().zip(&dataset.images).collect();
    exec.try_map(&pairs, |(r, img)| -> Result<()> {
        let path = dir.join(&r.filename);
        save_png(&path, &img.pixels, img.size)?;
        if raw {
            save_raw(&path.with_extension("f32"), &img.pixels)?;
        }
        Ok(())
    })?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut f = std::fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    f.write_all(manifest_csv(&dataset.records).as_bytes())
        .map_err(|e| Error::io(&manifest, e))?;
    let info = DatasetInfo {
        seed: dataset.spec.seed,
        spec: dataset.spec.clone(),
    };
    let info_path = dir.join(INFO_FILE);
    std::fs::write(&info_path, serde_json::to_string_pretty(&info)? + "\n").map_err(|e| Error::io(&info_path, e))
}

/// A dataset read back from disk.
#[derive(Clone, Debug)]
pub struct StoredDataset {
    pub dir: PathBuf,
    pub info: DatasetInfo,
    pub records: Vec<ManifestRecord>,
    pub images: Vec<Vec<f32>>,
}

impl StoredDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = (&ManifestRecord, &Vec<f32>)> {
        self.records
            .iter()
            .zip(&self.images)
            .filter(move |(r, _)| r.split == split)
    }

    pub fn generator(&self) -> &GeneratorConfig {
        &self.info.spec.generator
    }
}

pub fn load_dataset(dir: &Path, exec: Exec) -> Result<StoredDataset> {
    let manifest = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let records = parse_manifest(&text, &manifest)?;
    let info_path = dir.join(INFO_FILE);
    let info: DatasetInfo = serde_json::from_str(
        &std::fs::read_to_string(&info_path).map_err(|e| Error::io(&info_path, e))?,
    )?;
    let size = info.spec.generator.image_size;
    let images = exec.try_map(&records, |r| -> Result<Vec<f32>> {
        let path = dir.join(&r.filename);
        let (px, s) = load_image(&path)?;
        if s != size {
            return Err(Error::shape(format!("{size}x{size}"), format!("{s}x{s} in {}", path.display())));
        }
        Ok(px)
    })?;
    Ok(StoredDataset {
        dir: dir.to_path_buf(),
        info,
        records,
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(v: f64) -> CompressionFraction {
        CompressionFraction::new(v).unwrap()
    }

    #[test]
    fn grade_thresholds() {
        assert_eq!(grade_from_compression(c(0.0)), Grade::G0);
        assert_eq!(grade_from_compression(c(0.15)), Grade::G1);
        assert_eq!(grade_from_compression(c(0.30)), Grade::G2);
        assert_eq!(grade_from_compression(c(0.50)), Grade::G3);
        assert_eq!(grade_from_compression(c(0.075)), Grade::G0);
        assert_eq!(grade_from_compression(c(0.25)), Grade::G1);
        assert_eq!(grade_from_compression(c(0.40)), Grade::G2);
    }

    #[test]
    fn grade_monotone_on_grid() {
        let grades: Vec<Grade> = (0..1000)
            .map(|i| grade_from_compression(c(MAX_COMPRESSION * i as f64 / 999.0)))
            .collect();
        assert!(grades.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(grades[0], Grade::G0);
        assert_eq!(grades[999], Grade::G3);
    }

    #[test]
    fn compression_range_checked() {
        assert!(CompressionFraction::new(-0.01).is_err());
        assert!(CompressionFraction::new(0.76).is_err());
        assert!(CompressionFraction::new(0.75).is_ok());
    }

    #[test]
    fn zero_compression_bodies_equal_height() {
        let cfg = GeneratorConfig::default();
        for seed in 0..5 {
            let img = render_vertebra_column(c(0.0), seed, &cfg).unwrap();
            let r = measure_height_reduction(&img.pixels, &cfg).unwrap();
            assert!(r.abs() <= 0.08, "seed {seed}: {r}");
        }
    }

    #[test]
    fn render_is_deterministic() {
        let cfg = GeneratorConfig::default();
        let a = render_vertebra_column(c(0.37), 99, &cfg).unwrap();
        let b = render_vertebra_column(c(0.37), 99, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        let other = render_vertebra_column(c(0.37), 100, &cfg).unwrap();
        assert_ne!(a.pixels, other.pixels);
    }

    #[test]
    fn measurement_round_trip() {
        let cfg = GeneratorConfig::default();
        let img = render_vertebra_column(c(0.5), 7, &cfg).unwrap();
        let r = measure_height_reduction(&img.pixels, &cfg).unwrap();
        assert!((0.42..=0.58).contains(&r), "{r}");
        let img = render_vertebra_column(c(0.45), 3, &cfg).unwrap();
        let r = measure_height_reduction(&img.pixels, &cfg).unwrap();
        assert!((r - 0.45).abs() <= 0.08, "{r}");
    }

    #[test]
    fn measurement_fails_on_black() {
        let cfg = GeneratorConfig::default();
        let err = measure_height_reduction(&vec![0.0; 32 * 32], &cfg).unwrap_err();
        assert_eq!(err.code(), "measurement-failed");
    }

    #[test]
    fn oversized_stack_rejected() {
        let cfg = GeneratorConfig {
            body_height: 0.7,
            gap: 0.15,
            ..GeneratorConfig::default()
        };
        let err = render_vertebra_column(c(0.1), 0, &cfg).unwrap_err();
        assert_eq!(err.code(), "invalid-config");
    }

    #[test]
    fn large_image_measurement_is_tighter() {
        let cfg = GeneratorConfig::with_size(96);
        for (i, v) in [0.0, 0.2, 0.35, 0.6].into_iter().enumerate() {
            let img = render_vertebra_column(c(v), i as u64, &cfg).unwrap();
            let r = measure_height_reduction(&img.pixels, &cfg).unwrap();
            assert!((r - v).abs() <= 0.04, "{v}: {r}");
        }
    }

    fn small_spec(seed: u64) -> DatasetSpec {
        DatasetSpec {
            n_train: 150,
            n_val: 20,
            n_test: 30,
            seed,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn dataset_is_deterministic_and_consistent() {
        let a = generate_dataset(&small_spec(1), Exec::Parallel).unwrap();
        let b = generate_dataset(&small_spec(1), Exec::Sequential).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.images, b.images);
        for r in &a.records {
            assert_eq!(grade_from_compression(c(r.compression)), r.grade);
            assert_eq!(r.fractured, r.grade >= Grade::G2);
            assert!(!(0.05 < r.compression && r.compression < 0.10));
            if r.graded {
                assert!(r.compression >= 0.10);
            }
        }
        let names: std::collections::HashSet<_> = a.records.iter().map(|r| &r.filename).collect();
        assert_eq!(names.len(), a.records.len());
        assert_eq!(a.split(Split::Test).count(), 30);
        let c = generate_dataset(&small_spec(2), Exec::Parallel).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn paper_like_fractured_fraction() {
        let spec = DatasetSpec {
            n_train: 6000,
            n_val: 0,
            n_test: 0,
            generator: GeneratorConfig::with_size(8),
            ..DatasetSpec::paper_like()
        };
        let mut spec = spec;
        spec.generator.min_neighbor_visible = 0.0;
        let ds = generate_dataset(&spec, Exec::Parallel).unwrap();
        let frac = ds.records.iter().filter(|r| r.fractured).count() as f64 / 6000.0;
        assert!((frac - 1248.0 / 12019.0).abs() < 0.015, "{frac}");
    }

    #[test]
    fn invalid_specs_rejected() {
        let zero = DatasetSpec {
            n_train: 0,
            n_val: 0,
            n_test: 0,
            ..DatasetSpec::default()
        };
        assert!(generate_dataset(&zero, Exec::Sequential).is_err());
        let bad = DatasetSpec {
            graded_fraction: 1.5,
            ..small_spec(1)
        };
        assert_eq!(generate_dataset(&bad, Exec::Sequential).unwrap_err().code(), "out-of-range");
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&small_spec(4), Exec::Parallel).unwrap();
        write_dataset(dir.path(), &ds, true, Exec::Parallel).unwrap();
        let back = load_dataset(dir.path(), Exec::Parallel).unwrap();
        assert_eq!(back.records, ds.records);
        for (a, b) in back.images.iter().zip(&ds.images) {
            assert_eq!(a, &b.pixels);
        }
        let (png, size) = load_png(&dir.path().join(&ds.records[0].filename)).unwrap();
        assert_eq!(size, 32);
        for (a, b) in png.iter().zip(&ds.images[0].pixels) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(text.starts_with("filename,split,compression,grade,fractured,graded\n"));
        assert!(text.lines().nth(1).unwrap().split(',').nth(2).unwrap().split('.').nth(1).unwrap().len() == 6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn oracle_tracks_true_compression(v in 0.0f64..0.75, seed in any::<u64>()) {
            let cfg = GeneratorConfig::default();
            let img = render_vertebra_column(c(v), seed, &cfg).unwrap();
            let r = measure_height_reduction(&img.pixels, &cfg).unwrap();
            prop_assert!((r - v).abs() <= 0.08, "true {} measured {}", v, r);
        }
    }
}
