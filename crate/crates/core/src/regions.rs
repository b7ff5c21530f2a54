//! Facial regions from 49-point landmarks, cropping, and grid tiling.
//!
//! Landmark numbering used throughout (0-based here, image-left first):
//!
//! | points  | part                         |
//! |---------|------------------------------|
//! | 0..5    | left brow                    |
//! | 5..10   | right brow                   |
//! | 10..14  | nose bridge (top to bottom)  |
//! | 14..19  | nose base (left to right)    |
//! | 19..25  | left eye                     |
//! | 25..31  | right eye                    |
//! | 31..43  | outer lip, from left corner  |
//! | 43..49  | inner lip, from left corner  |
//!
//! All index knowledge lives in [`hull_indices`] and [`mirror_index`] so a
//! different landmark ordering only needs those two functions remapped.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::image::GrayImage;

pub const LANDMARK_COUNT: usize = 49;

/// Fraction of a hull's extent added on each side.
const PAD_FRACTION: f64 = 0.10;
/// A hull side is widened to at least this fraction of the other side.
const MIN_ASPECT: f64 = 0.5;
/// Forehead height as a multiple of the inter-ocular distance.
const FOREHEAD_IOD_FACTOR: f64 = 0.6;

#[derive(Debug, thiserror::Error)]
pub enum RegionError {
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("expected 49 landmark points, found {0}")]
    WrongPointCount(usize),
    #[error("landmark parse error on line {0}")]
    ParseError(usize),
    #[error("region {0} is degenerate")]
    DegenerateRegion(RegionId),
    #[error("box {x0}..{x1} x {y0}..{y1} exceeds {width}x{height} image")]
    OutOfBounds {
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
        width: usize,
        height: usize,
    },
    #[error("region of {width}x{height} is too small for a {grid}x{grid} grid")]
    RegionTooSmall {
        width: usize,
        height: usize,
        grid: usize,
    },
    #[error("grid size must be 2, 3 or 4, got {0}")]
    BadGrid(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

/// 49 ordered facial landmark points in pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<Point>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Point>) -> Result<Self, RegionError> {
        if points.len() != LANDMARK_COUNT {
            return Err(RegionError::WrongPointCount(points.len()));
        }
        if let Some(i) = points
            .iter()
            .position(|p| !p.x.is_finite() || !p.y.is_finite())
        {
            return Err(RegionError::ParseError(i + 1));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| Point {
                    x: p.x + dx,
                    y: p.y + dy,
                })
                .collect(),
        }
    }

    /// Horizontal mirror about an image of the given width; point indices
    /// are relabelled so that "left" stays the image-left feature.
    pub fn mirrored(&self, width: f64) -> Self {
        Self {
            points: (0..LANDMARK_COUNT)
                .map(|i| {
                    let p = self.points[mirror_index(i)];
                    Point {
                        x: width - p.x,
                        y: p.y,
                    }
                })
                .collect(),
        }
    }
}

/// The ten facial regions, in their stable ordinal order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RegionId {
    LeftEye = 0,
    RightEye = 1,
    CompleteEye = 2,
    Forehead = 3,
    Lip = 4,
    Nose = 5,
    LowerNose = 6,
    LeftFace = 7,
    UpperNose = 8,
    RightFace = 9,
}

impl RegionId {
    pub const COUNT: usize = 10;

    pub const ALL: [RegionId; 10] = [
        RegionId::LeftEye,
        RegionId::RightEye,
        RegionId::CompleteEye,
        RegionId::Forehead,
        RegionId::Lip,
        RegionId::Nose,
        RegionId::LowerNose,
        RegionId::LeftFace,
        RegionId::UpperNose,
        RegionId::RightFace,
    ];

    #[inline]
    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            RegionId::LeftEye => "left_eye",
            RegionId::RightEye => "right_eye",
            RegionId::CompleteEye => "complete_eye",
            RegionId::Forehead => "forehead",
            RegionId::Lip => "lip",
            RegionId::Nose => "nose",
            RegionId::LowerNose => "lower_nose",
            RegionId::LeftFace => "left_face",
            RegionId::UpperNose => "upper_nose",
            RegionId::RightFace => "right_face",
        }
    }
}

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegionId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RegionId::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| format!("unknown region `{s}`"))
    }
}

/// Axis-aligned pixel box, `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionBox {
    pub region: RegionId,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl RegionBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridSpec(usize);

impl GridSpec {
    pub fn new(n: usize) -> Result<Self, RegionError> {
        match n {
            2..=4 => Ok(Self(n)),
            _ => Err(RegionError::BadGrid(n)),
        }
    }

    #[inline]
    pub fn n(self) -> usize {
        self.0
    }

    pub fn cells(self) -> usize {
        self.0 * self.0
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{0}x{0}", self.0)
    }
}

pub fn load_landmarks(path: impl AsRef<Path>) -> Result<LandmarkSet, RegionError> {
    let path = path.as_ref();
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(RegionError::MissingFile(path.display().to_string()))
        }
        Err(source) => {
            return Err(RegionError::Io {
                path: path.display().to_string(),
                source,
            })
        }
    };
    parse_landmarks(&text)
}

pub fn parse_landmarks(text: &str) -> Result<LandmarkSet, RegionError> {
    let mut points = Vec::with_capacity(LANDMARK_COUNT);
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<f64, RegionError> {
            tok.and_then(|t| t.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or(RegionError::ParseError(i + 1))
        };
        let x = parse(it.next())?;
        let y = parse(it.next())?;
        if it.next().is_some() {
            return Err(RegionError::ParseError(i + 1));
        }
        points.push(Point { x, y });
    }
    LandmarkSet::new(points)
}

pub fn format_landmarks(lm: &LandmarkSet) -> String {
    let mut out = String::new();
    for p in lm.points() {
        out.push_str(&format!("{} {}\n", p.x, p.y));
    }
    out
}

pub fn write_landmarks(path: impl AsRef<Path>, lm: &LandmarkSet) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(format_landmarks(lm).as_bytes())
}

/// Landmark indices whose hull defines a region. Forehead and CompleteEye
/// are derived from other boxes and return an empty slice.
pub fn hull_indices(region: RegionId) -> Vec<usize> {
    const LEFT_BROW: std::ops::Range<usize> = 0..5;
    const RIGHT_BROW: std::ops::Range<usize> = 5..10;
    const BRIDGE: std::ops::Range<usize> = 10..14;
    const BASE: std::ops::Range<usize> = 14..19;
    const LEFT_EYE: std::ops::Range<usize> = 19..25;
    const RIGHT_EYE: std::ops::Range<usize> = 25..31;
    const MOUTH: std::ops::Range<usize> = 31..49;
    // Mouth points on the image-left half, midline included.
    const MOUTH_LEFT: [usize; 10] = [31, 32, 33, 34, 40, 41, 42, 43, 44, 48];

    match region {
        RegionId::LeftEye => LEFT_EYE.chain(LEFT_BROW).collect(),
        RegionId::RightEye => RIGHT_EYE.chain(RIGHT_BROW).collect(),
        RegionId::UpperNose => BRIDGE.collect(),
        RegionId::LowerNose => BASE.collect(),
        RegionId::Nose => BRIDGE.chain(BASE).collect(),
        RegionId::Lip => MOUTH.collect(),
        RegionId::LeftFace => LEFT_BROW
            .chain(LEFT_EYE)
            .chain(BRIDGE)
            .chain(14..17)
            .chain(MOUTH_LEFT)
            .collect(),
        RegionId::RightFace => hull_indices(RegionId::LeftFace)
            .into_iter()
            .map(mirror_index)
            .collect(),
        RegionId::Forehead | RegionId::CompleteEye => Vec::new(),
    }
}

/// Index of the point that a horizontal mirror maps onto point `i`.
pub fn mirror_index(i: usize) -> usize {
    match i {
        0..=9 => 9 - i,
        10..=13 => i,
        14..=18 => 32 - i,
        // Eyes: outer corner, upper pair, inner corner, lower pair.
        19..=22 => 47 - i,
        23 | 24 => 53 - i,
        25..=28 => 47 - i,
        29 | 30 => 53 - i,
        // Outer lip: corners 31/37, top 32..36, bottom 38..42.
        31..=37 => 68 - i,
        38..=42 => 80 - i,
        // Inner lip: corners 43/46, top 44/45, bottom 47/48.
        43..=46 => 89 - i,
        47 | 48 => 95 - i,
        _ => panic!("landmark index {i} out of range"),
    }
}

#[derive(Debug, Clone, Copy)]
struct Extent {
    min_x: f64,
    max_x: f64,
    min_y: f64,
    max_y: f64,
}

impl Extent {
    fn of(points: impl IntoIterator<Item = Point>) -> Self {
        let mut e = Extent {
            min_x: f64::INFINITY,
            max_x: f64::NEG_INFINITY,
            min_y: f64::INFINITY,
            max_y: f64::NEG_INFINITY,
        };
        for p in points {
            e.min_x = e.min_x.min(p.x);
            e.max_x = e.max_x.max(p.x);
            e.min_y = e.min_y.min(p.y);
            e.max_y = e.max_y.max(p.y);
        }
        e
    }

    fn to_box(self, region: RegionId, width: usize, height: usize) -> Result<RegionBox, RegionError> {
        let mut w = self.max_x - self.min_x;
        let mut h = self.max_y - self.min_y;
        if w <= 0.0 && h <= 0.0 {
            return Err(RegionError::DegenerateRegion(region));
        }
        let cx = 0.5 * (self.min_x + self.max_x);
        let cy = 0.5 * (self.min_y + self.max_y);
        w = w.max(MIN_ASPECT * h);
        h = h.max(MIN_ASPECT * w);
        let half_w = 0.5 * w * (1.0 + 2.0 * PAD_FRACTION);
        let half_h = 0.5 * h * (1.0 + 2.0 * PAD_FRACTION);

        let clip = |v: f64, hi: usize| v.clamp(0.0, hi as f64) as usize;
        let x0 = clip((cx - half_w).floor(), width);
        let x1 = clip((cx + half_w).ceil(), width);
        let y0 = clip((cy - half_h).floor(), height);
        let y1 = clip((cy + half_h).ceil(), height);
        if x1 <= x0 || y1 <= y0 {
            return Err(RegionError::DegenerateRegion(region));
        }
        Ok(RegionBox {
            region,
            x0,
            y0,
            x1,
            y1,
        })
    }
}

fn centroid(points: &[Point]) -> Point {
    let n = points.len() as f64;
    Point {
        x: points.iter().map(|p| p.x).sum::<f64>() / n,
        y: points.iter().map(|p| p.y).sum::<f64>() / n,
    }
}

fn box_for(
    lm: &LandmarkSet,
    region: RegionId,
    width: usize,
    height: usize,
) -> Result<RegionBox, RegionError> {
    let pts = lm.points();
    match region {
        RegionId::CompleteEye => {
            let l = box_for(lm, RegionId::LeftEye, width, height)?;
            let r = box_for(lm, RegionId::RightEye, width, height)?;
            Ok(RegionBox {
                region,
                x0: l.x0.min(r.x0),
                y0: l.y0.min(r.y0),
                x1: l.x1.max(r.x1),
                y1: l.y1.max(r.y1),
            })
        }
        RegionId::Forehead => {
            let brows = Extent::of(pts[0..10].iter().copied());
            let le = centroid(&pts[19..25]);
            let re = centroid(&pts[25..31]);
            let iod = (le.x - re.x).hypot(le.y - re.y);
            Extent {
                min_x: brows.min_x,
                max_x: brows.max_x,
                min_y: brows.min_y - FOREHEAD_IOD_FACTOR * iod,
                max_y: brows.min_y,
            }
            .to_box(region, width, height)
        }
        _ => Extent::of(hull_indices(region).into_iter().map(|i| pts[i])).to_box(region, width, height),
    }
}

/// One box per region, in [`RegionId::ALL`] order.
pub fn extract_region_boxes(
    lm: &LandmarkSet,
    width: usize,
    height: usize,
) -> Result<Vec<RegionBox>, RegionError> {
    RegionId::ALL
        .iter()
        .map(|&r| box_for(lm, r, width, height))
        .collect()
}

/// Like [`extract_region_boxes`], but a failing region yields its own error
/// instead of aborting the others.
pub fn extract_region_boxes_lenient(
    lm: &LandmarkSet,
    width: usize,
    height: usize,
) -> Vec<Result<RegionBox, RegionError>> {
    RegionId::ALL
        .iter()
        .map(|&r| box_for(lm, r, width, height))
        .collect()
}

pub fn crop(img: &GrayImage, b: &RegionBox) -> Result<GrayImage, RegionError> {
    if b.x1 > img.width() || b.y1 > img.height() || b.x1 <= b.x0 || b.y1 <= b.y0 {
        return Err(RegionError::OutOfBounds {
            x0: b.x0,
            y0: b.y0,
            x1: b.x1,
            y1: b.y1,
            width: img.width(),
            height: img.height(),
        });
    }
    Ok(GrayImage::from_fn(b.width(), b.height(), |x, y| {
        img.get(b.x0 + x, b.y0 + y)
    }))
}

/// Splits `len` into `n` contiguous runs; the first `len % n` runs get one
/// extra element.
pub fn split_ranges(len: usize, n: usize) -> Vec<std::ops::Range<usize>> {
    let base = len / n;
    let extra = len % n;
    let mut start = 0;
    (0..n)
        .map(|i| {
            let size = base + usize::from(i < extra);
            let r = start..start + size;
            start += size;
            r
        })
        .collect()
}

/// Tiles an image into `n x n` cells, row-major.
pub fn grid_cells(img: &GrayImage, grid: GridSpec) -> Result<Vec<GrayImage>, RegionError> {
    let n = grid.n();
    if img.width() < n || img.height() < n {
        return Err(RegionError::RegionTooSmall {
            width: img.width(),
            height: img.height(),
            grid: n,
        });
    }
    let cols = split_ranges(img.width(), n);
    let rows = split_ranges(img.height(), n);
    let mut cells = Vec::with_capacity(n * n);
    for ry in &rows {
        for rx in &cols {
            cells.push(GrayImage::from_fn(rx.len(), ry.len(), |x, y| {
                img.get(rx.start + x, ry.start + y)
            }));
        }
    }
    Ok(cells)
}

/// Canonical frontal face template scaled to a square image of side `size`.
/// It is symmetric under [`LandmarkSet::mirrored`].
pub fn canonical_template(size: f64) -> LandmarkSet {
    const UNIT: [(f64, f64); LANDMARK_COUNT] = [
        // left brow
        (0.22, 0.31),
        (0.27, 0.28),
        (0.32, 0.27),
        (0.37, 0.28),
        (0.42, 0.30),
        // right brow
        (0.58, 0.30),
        (0.63, 0.28),
        (0.68, 0.27),
        (0.73, 0.28),
        (0.78, 0.31),
        // nose bridge
        (0.50, 0.38),
        (0.50, 0.44),
        (0.50, 0.50),
        (0.50, 0.56),
        // nose base
        (0.43, 0.58),
        (0.46, 0.61),
        (0.50, 0.625),
        (0.54, 0.61),
        (0.57, 0.58),
        // left eye
        (0.26, 0.38),
        (0.30, 0.355),
        (0.36, 0.355),
        (0.40, 0.38),
        (0.36, 0.40),
        (0.30, 0.40),
        // right eye
        (0.60, 0.38),
        (0.64, 0.355),
        (0.70, 0.355),
        (0.74, 0.38),
        (0.70, 0.40),
        (0.64, 0.40),
        // outer lip
        (0.37, 0.74),
        (0.41, 0.715),
        (0.45, 0.70),
        (0.50, 0.705),
        (0.55, 0.70),
        (0.59, 0.715),
        (0.63, 0.74),
        (0.59, 0.77),
        (0.55, 0.785),
        (0.50, 0.79),
        (0.45, 0.785),
        (0.41, 0.77),
        // inner lip
        (0.40, 0.74),
        (0.46, 0.73),
        (0.54, 0.73),
        (0.60, 0.74),
        (0.54, 0.75),
        (0.46, 0.75),
    ];
    LandmarkSet {
        points: UNIT
            .iter()
            .map(|&(u, v)| Point {
                x: u * size,
                y: v * size,
            })
            .collect(),
    }
}
