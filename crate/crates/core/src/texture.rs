//! Local binary patterns, Kirsch compass responses and the Compass-LBP
//! region descriptor.
//!
//! Neighbour order for an LBP code is clockwise from the top-left pixel:
//!
//! ```text
//! 0  1  2
//! 7  c  3
//! 6  5  4
//! ```
//!
//! Bit `p` is set when neighbour `p` is greater than or equal to the centre,
//! and carries weight `2^p`.

use std::sync::OnceLock;

use crate::image::GrayImage;
use crate::regions::{split_ranges, GridSpec};

/// Number of bins in a uniform-LBP histogram.
pub const UNIFORM_BINS: usize = 59;
pub const DIRECTIONS: usize = 8;

/// (dx, dy) offsets of the eight neighbours in code-bit order.
const RING: [(isize, isize); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TextureError {
    #[error("image of {width}x{height} is smaller than 3x3")]
    ImageTooSmall { width: usize, height: usize },
    #[error("region of {width}x{height} is too small for a {grid}x{grid} grid (needs {min}x{min})")]
    RegionTooSmall {
        width: usize,
        height: usize,
        grid: usize,
        min: usize,
    },
}

/// LBP code of a row-major 3x3 window.
pub fn lbp_code(window: &[u8; 9]) -> u8 {
    let center = window[4];
    RING.iter().enumerate().fold(0u8, |code, (p, &(dx, dy))| {
        let idx = ((dy + 1) * 3 + dx + 1) as usize;
        code | (u8::from(window[idx] >= center) << p)
    })
}

/// Bits of a code in neighbour order, bit 0 first.
pub fn bit_string(code: u8) -> String {
    (0..8)
        .map(|p| if code >> p & 1 == 1 { '1' } else { '0' })
        .collect()
}

/// Dense LBP over interior pixels; output is `(w-2) x (h-2)`.
pub fn lbp_image(img: &GrayImage) -> Result<GrayImage, TextureError> {
    check_min_size(img.width(), img.height())?;
    let (w, h) = (img.width(), img.height());
    let src = img.pixels();
    let mut out = Vec::with_capacity((w - 2) * (h - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let c = src[y * w + x];
            let mut code = 0u8;
            for (p, &(dx, dy)) in RING.iter().enumerate() {
                let n = src[(y as isize + dy) as usize * w + (x as isize + dx) as usize];
                code |= u8::from(n >= c) << p;
            }
            out.push(code);
        }
    }
    Ok(GrayImage::new(w - 2, h - 2, out).expect("size computed above"))
}

fn check_min_size(width: usize, height: usize) -> Result<(), TextureError> {
    if width < 3 || height < 3 {
        Err(TextureError::ImageTooSmall { width, height })
    } else {
        Ok(())
    }
}

/// Number of circular 0/1 transitions in an 8-bit pattern.
pub fn transitions(code: u8) -> u32 {
    (code ^ code.rotate_right(1)).count_ones()
}

/// Lookup from LBP code to uniform-histogram bin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UniformMap {
    table: [u8; 256],
}

impl UniformMap {
    pub const NON_UNIFORM_BIN: u8 = 58;

    fn build() -> Self {
        let mut table = [Self::NON_UNIFORM_BIN; 256];
        let mut next = 0u8;
        for code in 0..=255u8 {
            if transitions(code) <= 2 {
                table[code as usize] = next;
                next += 1;
            }
        }
        debug_assert_eq!(next, 58);
        Self { table }
    }

    #[inline]
    pub fn bin(&self, code: u8) -> usize {
        self.table[code as usize] as usize
    }

    pub fn is_uniform(&self, code: u8) -> bool {
        self.table[code as usize] != Self::NON_UNIFORM_BIN
    }
}

pub fn uniform_map() -> &'static UniformMap {
    static MAP: OnceLock<UniformMap> = OnceLock::new();
    MAP.get_or_init(UniformMap::build)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    North,
    NorthEast,
    East,
    SouthEast,
    South,
    SouthWest,
    West,
    NorthWest,
}

impl Direction {
    pub const ALL: [Direction; 8] = [
        Direction::North,
        Direction::NorthEast,
        Direction::East,
        Direction::SouthEast,
        Direction::South,
        Direction::SouthWest,
        Direction::West,
        Direction::NorthWest,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            Direction::North => "N",
            Direction::NorthEast => "NE",
            Direction::East => "E",
            Direction::SouthEast => "SE",
            Direction::South => "S",
            Direction::SouthWest => "SW",
            Direction::West => "W",
            Direction::NorthWest => "NW",
        }
    }
}

/// A 3x3 Kirsch compass mask. The five-coefficient side faces `direction`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KirschMask {
    pub direction: Direction,
    pub coefficients: [[i32; 3]; 3],
}

impl KirschMask {
    fn from_ring(direction: Direction, ring: [i32; 8]) -> Self {
        let mut coefficients = [[0; 3]; 3];
        for (k, &(dx, dy)) in RING.iter().enumerate() {
            coefficients[(dy + 1) as usize][(dx + 1) as usize] = ring[k];
        }
        Self {
            direction,
            coefficients,
        }
    }

    /// Outer ring clockwise from top-left.
    pub fn ring(&self) -> [i32; 8] {
        let mut ring = [0; 8];
        for (k, &(dx, dy)) in RING.iter().enumerate() {
            ring[k] = self.coefficients[(dy + 1) as usize][(dx + 1) as usize];
        }
        ring
    }

    /// The same mask with its outer ring turned 45 degrees clockwise.
    pub fn rotated_clockwise(&self) -> [i32; 8] {
        let mut ring = self.ring();
        ring.rotate_right(1);
        ring
    }

    /// Correlation with the 3x3 neighbourhood centred at `(x, y)`,
    /// replicating border pixels.
    #[inline]
    pub fn response_at(&self, img: &GrayImage, x: usize, y: usize) -> i32 {
        let mut acc = 0i32;
        for (my, row) in self.coefficients.iter().enumerate() {
            for (mx, &c) in row.iter().enumerate() {
                let px = img.get_clamped(x as isize + mx as isize - 1, y as isize + my as isize - 1);
                acc += c * i32::from(px);
            }
        }
        acc
    }
}

/// The eight Kirsch masks, starting at North and turning clockwise.
pub fn kirsch_masks() -> [KirschMask; 8] {
    let mut ring = [5, 5, 5, -3, -3, -3, -3, -3];
    let mut out = [KirschMask::from_ring(Direction::North, ring); 8];
    for (i, &dir) in Direction::ALL.iter().enumerate() {
        out[i] = KirschMask::from_ring(dir, ring);
        ring.rotate_right(1);
    }
    out
}

/// Signed edge response, same size as the input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeResponse {
    pub width: usize,
    pub height: usize,
    pub values: Vec<i32>,
}

impl EdgeResponse {
    /// Affine min/max rescale into `[0, 255]`, rounding half up. A constant
    /// response maps to all zeros.
    pub fn rescaled(&self) -> GrayImage {
        let lo = self.values.iter().copied().min().unwrap_or(0) as i64;
        let hi = self.values.iter().copied().max().unwrap_or(0) as i64;
        let range = hi - lo;
        let pixels = if range == 0 {
            vec![0; self.values.len()]
        } else {
            self.values
                .iter()
                .map(|&v| ((2 * 255 * (v as i64 - lo) + range) / (2 * range)) as u8)
                .collect()
        };
        GrayImage::new(self.width, self.height, pixels).expect("same dimensions")
    }
}

/// Kirsch correlation with replicate padding.
pub fn convolve_edge_response(img: &GrayImage, mask: &KirschMask) -> Result<EdgeResponse, TextureError> {
    check_min_size(img.width(), img.height())?;
    let (w, h) = (img.width(), img.height());
    let src = img.pixels();
    let k = mask.coefficients;
    let mut values = vec![0i32; w * h];
    for y in 0..h {
        let rows = [y.saturating_sub(1), y, (y + 1).min(h - 1)];
        for x in 0..w {
            let cols = [x.saturating_sub(1), x, (x + 1).min(w - 1)];
            let mut acc = 0i32;
            for (ky, &ry) in rows.iter().enumerate() {
                let row = &src[ry * w..ry * w + w];
                for (kx, &cx) in cols.iter().enumerate() {
                    acc += k[ky][kx] * i32::from(row[cx]);
                }
            }
            values[y * w + x] = acc;
        }
    }
    Ok(EdgeResponse {
        width: w,
        height: h,
        values,
    })
}

/// Histogram layout for each (cell, direction) block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum LbpBins {
    #[default]
    Uniform,
    /// All 256 raw codes; ablation only.
    Full,
}

impl LbpBins {
    pub fn len(self) -> usize {
        match self {
            LbpBins::Uniform => UNIFORM_BINS,
            LbpBins::Full => 256,
        }
    }

    #[inline]
    fn bin(self, code: u8) -> usize {
        match self {
            LbpBins::Uniform => uniform_map().bin(code),
            LbpBins::Full => code as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionDescriptor {
    pub grid: GridSpec,
    pub bins: LbpBins,
    pub values: Vec<f64>,
}

impl RegionDescriptor {
    pub fn block_len(&self) -> usize {
        self.bins.len()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.bins.len())
    }
}

/// Descriptor length for a grid and bin layout.
pub fn descriptor_len(grid: GridSpec, bins: LbpBins) -> usize {
    grid.cells() * DIRECTIONS * bins.len()
}

/// Smallest region side accepted for a grid: every cell at least 3x3.
pub fn min_region_side(grid: GridSpec) -> usize {
    3 * grid.n()
}

/// Compass-LBP descriptor of one region image. Blocks are ordered
/// cell-major (row-major cells), direction-minor, each L1-normalised.
pub fn colbp_descriptor(
    region_img: &GrayImage,
    grid: GridSpec,
    bins: LbpBins,
) -> Result<RegionDescriptor, TextureError> {
    let min = min_region_side(grid);
    if region_img.width() < min || region_img.height() < min {
        return Err(TextureError::RegionTooSmall {
            width: region_img.width(),
            height: region_img.height(),
            grid: grid.n(),
            min,
        });
    }
    let n = grid.n();
    let nb = bins.len();
    let mut values = vec![0.0; descriptor_len(grid, bins)];
    let masks = kirsch_masks();

    for (d, mask) in masks.iter().enumerate() {
        let codes = lbp_image(&convolve_edge_response(region_img, mask)?.rescaled())?;
        let cols = split_ranges(codes.width(), n);
        let rows = split_ranges(codes.height(), n);
        for (ci, (ry, rx)) in rows
            .iter()
            .flat_map(|ry| cols.iter().map(move |rx| (ry, rx)))
            .enumerate()
        {
            let block = &mut values[(ci * DIRECTIONS + d) * nb..(ci * DIRECTIONS + d + 1) * nb];
            for y in ry.clone() {
                for x in rx.clone() {
                    block[bins.bin(codes.get(x, y))] += 1.0;
                }
            }
            let total = (rx.len() * ry.len()) as f64;
            block.iter_mut().for_each(|v| *v /= total);
        }
    }
    Ok(RegionDescriptor { grid, bins, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn flat_window_sets_every_bit() {
        assert_eq!(lbp_code(&[7; 9]), 255);
    }

    #[test]
    fn dominant_centre_clears_every_bit() {
        assert_eq!(lbp_code(&[1, 2, 3, 4, 9, 5, 6, 7, 8]), 0);
    }

    #[test]
    fn clockwise_sign_pattern_example() {
        // Centre 29; neighbours clockwise from top-left are >=, >=, >=, <,
        // >=, >=, <, < the centre.
        let window = [
            35, 29, 60, //
            10, 29, 12, //
            5, 44, 31,
        ];
        let code = lbp_code(&window);
        assert_eq!(bit_string(code), "11101100");
        assert_eq!(code, 0b0011_0111);
    }

    #[test]
    fn lbp_image_shape_and_single_window() {
        let img = GrayImage::from_fn(3, 3, |x, y| (x * 31 + y * 17) as u8);
        let codes = lbp_image(&img).unwrap();
        assert_eq!((codes.width(), codes.height()), (1, 1));
        let window: [u8; 9] = img.pixels().try_into().unwrap();
        assert_eq!(codes.get(0, 0), lbp_code(&window));
        assert!(lbp_image(&GrayImage::filled(2, 5, 0)).is_err());
    }

    #[test]
    fn constant_image_gives_all_ones_codes() {
        let codes = lbp_image(&GrayImage::filled(6, 5, 90)).unwrap();
        assert!(codes.pixels().iter().all(|&c| c == 255));
    }

    #[test]
    fn uniform_map_layout() {
        let map = uniform_map();
        assert_eq!(transitions(0), 0);
        assert!(map.is_uniform(0));
        assert_eq!(map.bin(0), 0);
        assert_eq!(transitions(0b0101_0101), 8);
        assert_eq!(map.bin(85), 58);
        assert_eq!((0..=255u8).filter(|&c| transitions(c) <= 2).count(), 58);
        // bins of uniform codes increase with the code value
        let bins: Vec<usize> = (0..=255u8).filter(|&c| map.is_uniform(c)).map(|c| map.bin(c)).collect();
        assert_eq!(bins, (0..58).collect::<Vec<_>>());
    }

    #[test]
    fn kirsch_masks_are_zero_sum_rotations() {
        let masks = kirsch_masks();
        assert_eq!(masks[0].coefficients, [[5, 5, 5], [-3, 0, -3], [-3, -3, -3]]);
        for m in &masks {
            let flat: Vec<i32> = m.coefficients.iter().flatten().copied().collect();
            assert_eq!(flat.iter().sum::<i32>(), 0);
            assert_eq!(flat.iter().filter(|&&c| c == 5).count(), 3);
            assert_eq!(flat.iter().filter(|&&c| c == -3).count(), 5);
            assert_eq!(m.coefficients[1][1], 0);
        }
        for i in 0..8 {
            assert_eq!(masks[i].rotated_clockwise(), masks[(i + 1) % 8].ring());
        }
        let mut ring = masks[0].ring();
        for _ in 0..8 {
            ring.rotate_right(1);
        }
        assert_eq!(ring, masks[0].ring());
        assert_eq!(masks[2].coefficients, [[-3, -3, 5], [-3, 0, 5], [-3, -3, 5]]);
    }

    #[test]
    fn step_edges_select_the_facing_mask() {
        let masks = kirsch_masks();
        let argmax = |img: &GrayImage| {
            let r: Vec<i32> = masks.iter().map(|m| m.response_at(img, 1, 1)).collect();
            let best = *r.iter().max().unwrap();
            assert_eq!(r.iter().filter(|&&v| v == best).count(), 1, "{r:?}");
            masks[r.iter().position(|&v| v == best).unwrap()].direction
        };
        let bright_left = GrayImage::from_fn(3, 3, |x, _| if x == 0 { 200 } else { 0 });
        let bright_right = GrayImage::from_fn(3, 3, |x, _| if x == 2 { 200 } else { 0 });
        let bright_top = GrayImage::from_fn(3, 3, |_, y| if y == 0 { 200 } else { 0 });
        assert_eq!(argmax(&bright_left), Direction::West);
        assert_eq!(argmax(&bright_right), Direction::East);
        assert_eq!(argmax(&bright_top), Direction::North);
    }

    #[test]
    fn constant_image_has_zero_response() {
        let img = GrayImage::filled(5, 4, 123);
        for m in kirsch_masks() {
            let r = convolve_edge_response(&img, &m).unwrap();
            assert!(r.values.iter().all(|&v| v == 0));
            assert!(r.rescaled().pixels().iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn impulse_response_is_mirrored_mask() {
        let mut img = GrayImage::filled(7, 7, 0);
        img.set(3, 3, 10);
        let north = kirsch_masks()[0];
        let r = convolve_edge_response(&img, &north).unwrap();
        for y in 0..7 {
            for x in 0..7 {
                let (dx, dy) = (x as isize - 3, y as isize - 3);
                let expected = if dx.abs() <= 1 && dy.abs() <= 1 {
                    10 * north.coefficients[(1 - dy) as usize][(1 - dx) as usize]
                } else {
                    0
                };
                assert_eq!(r.values[y * 7 + x], expected, "({x},{y})");
            }
        }
    }

    #[test]
    fn rescale_spans_full_range() {
        let r = EdgeResponse { width: 3, height: 1, values: vec![-10, 0, 10] };
        assert_eq!(r.rescaled().pixels(), &[0, 128, 255]);
    }

    #[test]
    fn descriptor_lengths_and_mass() {
        let img = GrayImage::from_fn(20, 17, |x, y| ((x * 37 + y * 91) % 251) as u8);
        for n in 2..=4 {
            let grid = GridSpec::new(n).unwrap();
            let d = colbp_descriptor(&img, grid, LbpBins::Uniform).unwrap();
            assert_eq!(d.values.len(), n * n * 472);
            for b in d.blocks() {
                assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        let d = colbp_descriptor(&img, GridSpec::new(4).unwrap(), LbpBins::Uniform).unwrap();
        assert_eq!(d.values.len(), 7552);
        let full = colbp_descriptor(&img, GridSpec::new(2).unwrap(), LbpBins::Full).unwrap();
        assert_eq!(full.values.len(), 4 * 8 * 256);
    }

    #[test]
    fn descriptor_rejects_small_regions() {
        let img = GrayImage::filled(11, 30, 3);
        assert!(matches!(
            colbp_descriptor(&img, GridSpec::new(4).unwrap(), LbpBins::Uniform),
            Err(TextureError::RegionTooSmall { .. })
        ));
        assert!(colbp_descriptor(&img, GridSpec::new(3).unwrap(), LbpBins::Uniform).is_ok());
    }

    proptest! {
        #[test]
        fn offset_leaves_descriptor_unchanged(
            seed in any::<u64>(),
            offset in 0u8..40,
            w in 12usize..24,
            h in 12usize..24,
        ) {
            let img = GrayImage::from_fn(w, h, |x, y| {
                let v = seed.wrapping_mul(x as u64 * 131 + y as u64 * 7919 + 1) >> 56;
                (v as u8) % 200
            });
            let shifted = GrayImage::from_fn(w, h, |x, y| img.get(x, y) + offset);
            let grid = GridSpec::new(2).unwrap();
            prop_assert_eq!(
                colbp_descriptor(&img, grid, LbpBins::Uniform).unwrap(),
                colbp_descriptor(&shifted, grid, LbpBins::Uniform).unwrap()
            );
        }
    }
}
