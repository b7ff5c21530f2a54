//! Dataset ingestion, stratified fold assignment and the synthetic corpus.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::image::GrayImage;
use crate::regions::{canonical_template, write_landmarks, LandmarkSet};
use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("manifest parse error on line {line}: {reason}")]
    ParseError { line: usize, reason: String },
    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt image {path}: {reason}")]
    CorruptImage { path: String, reason: String },
    #[error("class {0} has too few samples for the requested folds")]
    TooFewSamples(Label),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Binary class label; 0 = female, 1 = male.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Female = 0,
    Male = 1,
}

impl Label {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Female),
            1 => Some(Label::Male),
            _ => None,
        }
    }

    #[inline]
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    /// `+1.0` for male, `-1.0` for female.
    #[inline]
    pub fn sign(self) -> f64 {
        match self {
            Label::Male => 1.0,
            Label::Female => -1.0,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Label::Male => Label::Female,
            Label::Female => Label::Male,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Male => "male",
            Label::Female => "female",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub image_path: PathBuf,
    pub landmark_path: PathBuf,
    pub label: Label,
}

impl SampleRecord {
    /// Image and landmark paths resolved against `base` when relative.
    pub fn resolved(&self, base: &Path) -> (PathBuf, PathBuf) {
        (base.join(&self.image_path), base.join(&self.landmark_path))
    }
}

/// Parses a manifest: `id<TAB>image<TAB>landmarks<TAB>label`, `#` comments.
pub fn parse_manifest(text: &str) -> Result<Vec<SampleRecord>, CorpusError> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(CorpusError::ParseError {
                line: line_no,
                reason: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let label = fields[3]
            .trim()
            .parse::<u8>()
            .ok()
            .and_then(Label::from_u8)
            .ok_or_else(|| CorpusError::ParseError {
                line: line_no,
                reason: format!("label must be 0 or 1, got `{}`", fields[3]),
            })?;
        let id = fields[0].trim();
        if id.is_empty() {
            return Err(CorpusError::ParseError {
                line: line_no,
                reason: "empty sample id".into(),
            });
        }
        if !seen.insert(id.to_string()) {
            return Err(CorpusError::DuplicateId(id.to_string()));
        }
        records.push(SampleRecord {
            sample_id: id.to_string(),
            image_path: PathBuf::from(fields[1]),
            landmark_path: PathBuf::from(fields[2]),
            label,
        });
    }
    Ok(records)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => CorpusError::MissingFile(path.display().to_string()),
        _ => CorpusError::Io(e),
    })?;
    parse_manifest(&text)
}

pub fn format_manifest(records: &[SampleRecord]) -> String {
    let mut out = String::from("# sample_id\timage\tlandmarks\tlabel\n");
    for r in records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.sample_id,
            r.image_path.display(),
            r.landmark_path.display(),
            r.label.as_u8()
        ));
    }
    out
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[SampleRecord]) -> io::Result<()> {
    fs::write(path, format_manifest(records))
}

/// Loads a PGM or PNG and converts it to 8-bit gray. Colour pixels use
/// `0.299 R + 0.587 G + 0.114 B`, rounded half up.
pub fn load_gray_image(path: impl AsRef<Path>) -> Result<GrayImage, CorpusError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => CorpusError::MissingFile(path.display().to_string()),
        _ => CorpusError::Io(e),
    })?;
    decode_gray_image(&bytes).map_err(|e| match e {
        CorpusError::CorruptImage { reason, .. } => CorpusError::CorruptImage {
            path: path.display().to_string(),
            reason,
        },
        other => other,
    })
}

pub fn decode_gray_image(bytes: &[u8]) -> Result<GrayImage, CorpusError> {
    use image::{DynamicImage, ImageFormat};

    let format = image::guess_format(bytes)
        .map_err(|e| CorpusError::UnsupportedFormat(e.to_string()))?;
    if !matches!(format, ImageFormat::Pnm | ImageFormat::Png) {
        return Err(CorpusError::UnsupportedFormat(format!("{format:?}")));
    }
    let decoded = image::load_from_memory_with_format(bytes, format).map_err(|e| {
        CorpusError::CorruptImage {
            path: String::new(),
            reason: e.to_string(),
        }
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let pixels = match decoded {
        DynamicImage::ImageLuma8(buf) => buf.into_raw(),
        DynamicImage::ImageLumaA8(buf) => buf.pixels().map(|p| p.0[0]).collect(),
        DynamicImage::ImageLuma16(buf) => buf.pixels().map(|p| (p.0[0] >> 8) as u8).collect(),
        other => other
            .to_rgb8()
            .pixels()
            .map(|p| luma(p.0[0], p.0[1], p.0[2]))
            .collect(),
    };
    GrayImage::new(w, h, pixels).map_err(|e| CorpusError::CorruptImage {
        path: String::new(),
        reason: e.to_string(),
    })
}

/// BT.601 luma with half-up rounding, in exact integer arithmetic.
#[inline]
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    ((299 * u32::from(r) + 587 * u32::from(g) + 114 * u32::from(b) + 500) / 1000) as u8
}

/// Binary PGM (P5) encoding.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.pixels());
    out
}

pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage) -> io::Result<()> {
    fs::write(path, encode_pgm(img))
}

/// Fold index per record, aligned with the record slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    k: usize,
    assignments: Vec<usize>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fold_of(&self, index: usize) -> usize {
        self.assignments[index]
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn by_id<'a>(&self, records: &'a [SampleRecord]) -> HashMap<&'a str, usize> {
        records
            .iter()
            .zip(&self.assignments)
            .map(|(r, &f)| (r.sample_id.as_str(), f))
            .collect()
    }

    /// `(train, test)` record indices for one fold.
    pub fn train_test(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.assignments.len()).partition(|&i| self.assignments[i] != fold)
    }
}

/// Stratified, seed-deterministic k-fold assignment.
///
/// Each class is shuffled and dealt round-robin; the second class continues
/// dealing where the first stopped so overall fold sizes differ by at most one.
pub fn make_folds(records: &[SampleRecord], k: usize, seed: u64) -> Result<FoldSplit, CorpusError> {
    let labels: Vec<Label> = records.iter().map(|r| r.label).collect();
    stratified_folds(&labels, k, seed)
}

/// [`make_folds`] over bare labels.
pub fn stratified_folds(labels: &[Label], k: usize, seed: u64) -> Result<FoldSplit, CorpusError> {
    if k < 2 {
        return Err(CorpusError::InvalidArgument(format!("k must be >= 2, got {k}")));
    }
    let mut rng = seed::rng(seed);
    let mut assignments = vec![usize::MAX; labels.len()];
    let mut next = 0usize;
    for class in [Label::Female, Label::Male] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < k {
            return Err(CorpusError::TooFewSamples(class));
        }
        idx.shuffle(&mut rng);
        for i in idx {
            assignments[i] = next % k;
            next += 1;
        }
    }
    Ok(FoldSplit { k, assignments })
}

/// Knobs for the synthetic two-class corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Probability that a facial patch shows the other class's texture.
    pub flip_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_per_class: 60,
            image_size: 160,
            seed: 7,
            flip_prob: 0.2,
        }
    }
}

/// Facial patches carrying class texture, in unit coordinates
/// `(x0, y0, x1, y1)` on the canonical template.
pub const SYNTH_PATCHES: [(f64, f64, f64, f64); 8] = [
    (0.23, 0.28, 0.41, 0.42), // left eye
    (0.59, 0.28, 0.77, 0.42), // right eye
    (0.26, 0.10, 0.74, 0.25), // forehead
    (0.45, 0.42, 0.55, 0.56), // nose bridge
    (0.41, 0.57, 0.59, 0.65), // nose base
    (0.36, 0.69, 0.64, 0.80), // mouth
    (0.18, 0.46, 0.40, 0.66), // left cheek
    (0.60, 0.46, 0.82, 0.66), // right cheek
];

/// Renders one synthetic face. Every patch carries stripes whose
/// orientation encodes a class: horizontal for male, vertical for female.
pub fn render_synthetic_face(size: usize, patch_classes: &[Label], rng: &mut impl Rng) -> GrayImage {
    let noise = Normal::new(0.0, 6.0).expect("valid sigma");
    let brightness = rng.random_range(-20.0..20.0);
    let tilt: f64 = rng.random_range(-0.15..0.15);
    let s = size as f64;
    let mut field: Vec<f64> = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64 / s, (i / size) as f64 / s);
            let dx = x - 0.5;
            let dy = y - 0.5;
            // soft oval face on a darker background
            let face = if (dx / 0.36).powi(2) + (dy / 0.46).powi(2) <= 1.0 { 150.0 } else { 70.0 };
            face + brightness + 30.0 * tilt * (x - y) + noise.sample(rng)
        })
        .collect();
    for (patch, &class) in SYNTH_PATCHES.iter().zip(patch_classes) {
        let period = rng.random_range(3.5..5.5);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let amplitude = rng.random_range(25.0..40.0);
        let x0 = (patch.0 * s).round() as usize;
        let y0 = (patch.1 * s).round() as usize;
        let x1 = (patch.2 * s).round() as usize;
        let y1 = (patch.3 * s).round() as usize;
        for y in y0..y1.min(size) {
            for x in x0..x1.min(size) {
                let t = match class {
                    Label::Male => y as f64,
                    Label::Female => x as f64,
                };
                field[y * size + x] += amplitude * (std::f64::consts::TAU * t / period + phase).sin();
            }
        }
    }
    GrayImage::new(
        size,
        size,
        field.into_iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect(),
    )
    .expect("square buffer")
}

/// Writes `2 * n_per_class` images, landmark files and a `manifest.tsv`
/// into `out_dir`. Output bytes depend only on the config.
pub fn generate_synthetic_corpus(
    cfg: &SynthConfig,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<SampleRecord>, CorpusError> {
    if cfg.n_per_class < 1 {
        return Err(CorpusError::InvalidArgument("n_per_class must be >= 1".into()));
    }
    if cfg.image_size < 64 {
        return Err(CorpusError::InvalidArgument("image_size must be >= 64".into()));
    }
    if !(0.0..=1.0).contains(&cfg.flip_prob) {
        return Err(CorpusError::InvalidArgument("flip_prob must be in [0, 1]".into()));
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let landmarks: LandmarkSet = canonical_template(cfg.image_size as f64);
    let mut rng = seed::rng(seed::derive(cfg.seed, "synth"));
    let mut records = Vec::with_capacity(2 * cfg.n_per_class);
    for i in 0..cfg.n_per_class {
        for label in [Label::Female, Label::Male] {
            let patch_classes: Vec<Label> = SYNTH_PATCHES
                .iter()
                .map(|_| {
                    if rng.random_bool(cfg.flip_prob) {
                        label.other()
                    } else {
                        label
                    }
                })
                .collect();
            let img = render_synthetic_face(cfg.image_size, &patch_classes, &mut rng);
            let id = format!("{}_{:04}", label.name(), i);
            let image_name = format!("{id}.pgm");
            let lm_name = format!("{id}.pts");
            write_pgm(out_dir.join(&image_name), &img)?;
            write_landmarks(out_dir.join(&lm_name), &landmarks)?;
            records.push(SampleRecord {
                sample_id: id,
                image_path: PathBuf::from(image_name),
                landmark_path: PathBuf::from(lm_name),
                label,
            });
        }
    }
    let mut f = fs::File::create(out_dir.join("manifest.tsv"))?;
    f.write_all(format_manifest(&records).as_bytes())?;
    Ok(records)
}
