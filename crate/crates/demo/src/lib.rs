//! WebAssembly bindings behind `www/index.html`: render a synthetic face,
//! inspect its compass edge and LBP maps, and play with score fusion.

use rand::Rng;
use regionfuse::classify::RegionScores;
use regionfuse::corpus::render_synthetic_face;
use regionfuse::fusion::{fuse, ga_optimize, FusionError, FusionWeights, GaConfig};
use regionfuse::regions::{canonical_template, crop, extract_region_boxes_lenient};
use regionfuse::texture::{colbp_descriptor, convolve_edge_response, kirsch_masks, lbp_image, LbpBins, TextureError};
use regionfuse::{seed, GrayImage, GridSpec, Label, RegionBox, RegionId};
use thiserror::Error;
use wasm_bindgen::prelude::*;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("image size {0} is outside 64..=512")]
    BadSize(usize),
    #[error("direction {0} is not in 0..8")]
    BadDirection(usize),
    #[error("region {0} is not in 0..10")]
    BadRegion(usize),
    #[error("region {0} lies outside the image")]
    RegionUnavailable(&'static str),
    #[error("grid: {0}")]
    Grid(String),
    #[error(transparent)]
    Texture(#[from] TextureError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

impl From<DemoError> for JsValue {
    fn from(e: DemoError) -> Self {
        JsError::new(&e.to_string()).into()
    }
}

/// A rendered face together with its ten region boxes.
#[wasm_bindgen]
pub struct Face {
    image: GrayImage,
    boxes: Vec<Option<RegionBox>>,
}

impl Face {
    pub fn generate(size: usize, seed_value: u64, male: bool, flip_prob: f64) -> Result<Face, DemoError> {
        if !(64..=512).contains(&size) {
            return Err(DemoError::BadSize(size));
        }
        let label = if male { Label::Male } else { Label::Female };
        let mut rng = seed::rng(seed_value);
        let flip = flip_prob.clamp(0.0, 1.0);
        let patches: Vec<Label> = (0..regionfuse::corpus::SYNTH_PATCHES.len())
            .map(|_| if rng.random_bool(flip) { label.other() } else { label })
            .collect();
        let image = render_synthetic_face(size, &patches, &mut rng);
        let boxes = extract_region_boxes_lenient(&canonical_template(size as f64), size, size)
            .into_iter()
            .map(Result::ok)
            .collect();
        Ok(Face { image, boxes })
    }

    pub fn image(&self) -> &GrayImage {
        &self.image
    }

    fn mask(direction: usize) -> Result<regionfuse::texture::KirschMask, DemoError> {
        kirsch_masks().get(direction).copied().ok_or(DemoError::BadDirection(direction))
    }

    pub fn edge_map(&self, direction: usize) -> Result<GrayImage, DemoError> {
        Ok(convolve_edge_response(&self.image, &Self::mask(direction)?)?.rescaled())
    }

    pub fn lbp_map(&self, direction: usize) -> Result<GrayImage, DemoError> {
        Ok(lbp_image(&self.edge_map(direction)?)?)
    }

    /// Compass-LBP descriptor of one region.
    pub fn descriptor(&self, region: usize, grid: usize) -> Result<Vec<f64>, DemoError> {
        let id = RegionId::from_ordinal(region).ok_or(DemoError::BadRegion(region))?;
        let b = self.boxes[region].ok_or(DemoError::RegionUnavailable(id.name()))?;
        let g = GridSpec::new(grid).map_err(|e| DemoError::Grid(e.to_string()))?;
        let patch = crop(&self.image, &b).map_err(|_| DemoError::RegionUnavailable(id.name()))?;
        Ok(colbp_descriptor(&patch, g, LbpBins::Uniform)?.values)
    }
}

#[wasm_bindgen]
impl Face {
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, seed: u64, male: bool, flip_prob: f64) -> Result<Face, JsValue> {
        Ok(Self::generate(size, seed, male, flip_prob)?)
    }

    pub fn size(&self) -> usize {
        self.image.width()
    }

    pub fn pixels(&self) -> Vec<u8> {
        self.image.pixels().to_vec()
    }

    /// `x0, y0, x1, y1` per region; a region that could not be placed is all zeros.
    pub fn region_boxes(&self) -> Vec<u32> {
        self.boxes
            .iter()
            .flat_map(|b| match b {
                Some(b) => [b.x0, b.y0, b.x1, b.y1].map(|v| v as u32),
                None => [0; 4],
            })
            .collect()
    }

    /// Rescaled Kirsch response for direction 0 (N) to 7 (NW), same size as the face.
    #[wasm_bindgen(js_name = edgeMap)]
    pub fn edge_map_js(&self, direction: usize) -> Result<Vec<u8>, JsValue> {
        Ok(self.edge_map(direction)?.pixels().to_vec())
    }

    /// LBP codes of that response, two pixels smaller on each axis.
    #[wasm_bindgen(js_name = lbpMap)]
    pub fn lbp_map_js(&self, direction: usize) -> Result<Vec<u8>, JsValue> {
        Ok(self.lbp_map(direction)?.pixels().to_vec())
    }

    #[wasm_bindgen(js_name = regionDescriptor)]
    pub fn descriptor_js(&self, region: usize, grid: usize) -> Result<Vec<f64>, JsValue> {
        Ok(self.descriptor(region, grid)?)
    }
}

/// Region names in ordinal order, comma separated.
#[wasm_bindgen(js_name = regionNames)]
pub fn region_names() -> String {
    RegionId::ALL.map(RegionId::name).join(",")
}

/// Fused male/female scores for one sample from per-region male
/// probabilities and weights.
pub fn fuse_one(p_male: &[f64], weights: &[f64]) -> Result<(f64, f64), DemoError> {
    let scores: Vec<Vec<RegionScores>> = p_male
        .iter()
        .enumerate()
        .map(|(i, &p)| vec![RegionScores::new(RegionId::ALL[i % RegionId::COUNT], p.clamp(0.0, 1.0))])
        .collect();
    let w = FusionWeights::new(weights.to_vec())?;
    let f = fuse(&scores, &w)?[0];
    Ok((f.male, f.female))
}

/// Returns the weighted sums `[male, female]`; the larger one wins, ties go male.
#[wasm_bindgen(js_name = fuseScores)]
pub fn fuse_scores(p_male: &[f64], weights: &[f64]) -> Result<Vec<f64>, JsValue> {
    let (m, f) = fuse_one(p_male, weights)?;
    Ok(vec![m, f])
}

/// Outcome of a GA run on simulated region scores.
#[wasm_bindgen]
pub struct Evolved {
    weights: Vec<f64>,
    error: f64,
    history: Vec<f64>,
    region_errors: Vec<f64>,
}

#[wasm_bindgen]
impl Evolved {
    pub fn weights(&self) -> Vec<f64> {
        self.weights.clone()
    }

    pub fn error(&self) -> f64 {
        self.error
    }

    /// Best error after each generation, initial population first.
    pub fn history(&self) -> Vec<f64> {
        self.history.clone()
    }

    /// Error of each region on its own.
    #[wasm_bindgen(js_name = regionErrors)]
    pub fn region_errors(&self) -> Vec<f64> {
        self.region_errors.clone()
    }
}

/// Simulates `samples` labelled samples where region `i` votes correctly with
/// probability `accuracy[i]`, then learns fusion weights on them.
pub fn evolve(accuracy: &[f64], samples: usize, generations: usize, seed_value: u64) -> Result<Evolved, DemoError> {
    let mut rng = seed::rng(seed::derive(seed_value, "demo-scores"));
    let labels: Vec<Label> = (0..samples.max(2))
        .map(|i| if i % 2 == 0 { Label::Male } else { Label::Female })
        .collect();
    let scores: Vec<Vec<RegionScores>> = accuracy
        .iter()
        .enumerate()
        .map(|(i, &q)| {
            let region = RegionId::ALL[i % RegionId::COUNT];
            labels
                .iter()
                .map(|&l| {
                    let confidence = rng.random_range(0.5..1.0);
                    let p_true = if rng.random_bool(q.clamp(0.0, 1.0)) { confidence } else { 1.0 - confidence };
                    RegionScores::new(region, if l == Label::Male { p_true } else { 1.0 - p_true })
                })
                .collect()
        })
        .collect();
    let region_errors = scores
        .iter()
        .map(|s| s.iter().zip(&labels).filter(|(s, l)| s.predicted() != **l).count() as f64 / labels.len() as f64)
        .collect();
    let cfg = GaConfig {
        generations,
        seed: seed_value,
        ..GaConfig::default()
    };
    let out = ga_optimize(&scores, &labels, &cfg)?;
    Ok(Evolved {
        weights: out.weights.as_slice().to_vec(),
        error: out.error,
        history: out.history,
        region_errors,
    })
}

#[wasm_bindgen(js_name = evolveWeights)]
pub fn evolve_weights(accuracy: &[f64], samples: usize, generations: usize, seed: u64) -> Result<Evolved, JsValue> {
    Ok(evolve(accuracy, samples, generations, seed)?)
}
