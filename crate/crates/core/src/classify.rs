//! Per-region linear max-margin classifier with Platt-calibrated
//! probabilities, and the binary model file.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;

use crate::corpus::Label;
use crate::regions::{GridSpec, RegionId};
use crate::seed;
use crate::selection::{fit_selector, FittedSelector, IfsConfig, SelectionError};
use crate::texture::LbpBins;

pub const MODEL_MAGIC: &[u8; 4] = b"RFGM";
pub const MODEL_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ClassifyError {
    #[error("training data contains a single class")]
    SingleClass,
    #[error("solver did not converge after {0} iterations")]
    DidNotConverge(usize),
    #[error("expected {expected} columns, got {found}")]
    ColumnMismatch { expected: usize, found: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file version {found} is not supported (expected {MODEL_VERSION})")]
    VersionMismatch { found: u16 },
    #[error("model file checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Selection(#[from] SelectionError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmConfig {
    pub c: f64,
    /// Stop when the maximal KKT violation drops below this.
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            tolerance: 1e-6,
            max_iter: 100_000,
        }
    }
}

/// Hyperplane plus calibration and the feature provenance it was fit on.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub region: RegionId,
    pub grid: GridSpec,
    pub bins: LbpBins,
    /// Width of the full descriptor the selector indexes into.
    pub input_dim: usize,
    pub selected: Vec<usize>,
    pub w: Vec<f64>,
    pub b: f64,
    pub platt_a: f64,
    pub platt_b: f64,
    pub svm_c: f64,
    pub calibration_fraction: f64,
}

impl LinearModel {
    #[inline]
    pub fn decision<'a>(&self, x: impl IntoIterator<Item = &'a f64>) -> f64 {
        self.w.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.b
    }

    /// Calibrated probability of the male class for a decision value.
    #[inline]
    pub fn probability(&self, f: f64) -> f64 {
        platt_probability(self.platt_a, self.platt_b, f)
    }
}

/// Solution of the soft-margin problem on already-selected features.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperplane {
    pub w: Vec<f64>,
    pub b: f64,
    pub iterations: usize,
}

impl Hyperplane {
    pub fn decision<'a>(&self, x: impl IntoIterator<Item = &'a f64>) -> f64 {
        self.w.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.b
    }
}

fn labels_present(labels: &[Label]) -> bool {
    labels.contains(&Label::Male) && labels.contains(&Label::Female)
}

/// Minimises `0.5 |w|^2 + C sum hinge(y (w.x + b))` with an unregularised
/// offset, via the dual and maximal-violating-pair SMO steps. The seed only
/// fixes the order samples are visited in, which decides ties.
pub fn train_linear_svm(
    x: ArrayView2<f64>,
    labels: &[Label],
    cfg: &SvmConfig,
    seed: u64,
) -> Result<Hyperplane, ClassifyError> {
    let (m, d) = x.dim();
    if labels.len() != m {
        return Err(ClassifyError::LengthMismatch(labels.len(), m));
    }
    if !labels_present(labels) {
        return Err(ClassifyError::SingleClass);
    }
    if !(cfg.c > 0.0) {
        return Err(ClassifyError::InvalidParameter(format!("C must be > 0, got {}", cfg.c)));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut seed::rng(seed));
    let xs = x.select(ndarray::Axis(0), &order);
    let y: Vec<f64> = order.iter().map(|&i| labels[i].sign()).collect();

    let gram: Array2<f64> = xs.dot(&xs.t());
    let q = |i: usize, j: usize| y[i] * y[j] * gram[[i, j]];
    let c = cfg.c;
    let mut alpha = vec![0.0; m];
    let mut grad = vec![-1.0; m];
    let tau = 1e-12;

    let mut iter = 0;
    loop {
        // i maximises -y G over I_up, j minimises it over I_low.
        let mut gmax = f64::NEG_INFINITY;
        let mut gmin = f64::INFINITY;
        let (mut bi, mut bj) = (usize::MAX, usize::MAX);
        for t in 0..m {
            let v = -y[t] * grad[t];
            let up = (y[t] > 0.0 && alpha[t] < c) || (y[t] < 0.0 && alpha[t] > 0.0);
            let low = (y[t] > 0.0 && alpha[t] > 0.0) || (y[t] < 0.0 && alpha[t] < c);
            if up && v > gmax {
                gmax = v;
                bi = t;
            }
            if low && v < gmin {
                gmin = v;
                bj = t;
            }
        }
        if bi == usize::MAX || bj == usize::MAX || gmax - gmin < cfg.tolerance {
            break;
        }
        if iter >= cfg.max_iter {
            return Err(ClassifyError::DidNotConverge(iter));
        }
        iter += 1;

        let (i, j) = (bi, bj);
        let (old_i, old_j) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let quad = (q(i, i) + q(j, j) + 2.0 * q(i, j)).max(tau);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (q(i, i) + q(j, j) - 2.0 * q(i, j)).max(tau);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..m {
            grad[t] += q(t, i) * di + q(t, j) * dj;
        }
    }

    // Offset from free vectors, else the midpoint of the feasible interval.
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    let mut sum_free = 0.0;
    let mut n_free = 0usize;
    for t in 0..m {
        let yg = y[t] * grad[t];
        let at_upper = alpha[t] >= c;
        let at_lower = alpha[t] <= 0.0;
        if at_upper {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if at_lower {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 {
        sum_free / n_free as f64
    } else {
        (ub + lb) / 2.0
    };

    let mut w = vec![0.0; d];
    for t in 0..m {
        if alpha[t] != 0.0 {
            let coef = alpha[t] * y[t];
            for (wk, xk) in w.iter_mut().zip(xs.row(t)) {
                *wk += coef * xk;
            }
        }
    }
    Ok(Hyperplane {
        w,
        b: -rho,
        iterations: iter,
    })
}

#[inline]
pub fn platt_probability(a: f64, b: f64, f: f64) -> f64 {
    let z = a * f + b;
    // numerically stable 1 / (1 + exp(z))
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

/// Fits `p(male | f) = 1 / (1 + exp(a f + b))` by Newton's method with
/// backtracking on the regularised-target log-likelihood.
pub fn fit_platt(decisions: &[f64], labels: &[Label]) -> Result<(f64, f64), ClassifyError> {
    const MAX_ITER: usize = 100;
    const MIN_STEP: f64 = 1e-10;
    const SIGMA: f64 = 1e-12;
    const EPS: f64 = 1e-5;

    if decisions.len() != labels.len() {
        return Err(ClassifyError::LengthMismatch(decisions.len(), labels.len()));
    }
    if !labels_present(labels) {
        return Err(ClassifyError::SingleClass);
    }
    let prior1 = labels.iter().filter(|&&l| l == Label::Male).count() as f64;
    let prior0 = labels.len() as f64 - prior1;
    let hi = (prior1 + 1.0) / (prior1 + 2.0);
    let lo = 1.0 / (prior0 + 2.0);
    let t: Vec<f64> = labels
        .iter()
        .map(|&l| if l == Label::Male { hi } else { lo })
        .collect();

    let objective = |a: f64, b: f64| -> f64 {
        decisions
            .iter()
            .zip(&t)
            .map(|(&f, &ti)| {
                let z = f * a + b;
                if z >= 0.0 {
                    ti * z + (1.0 + (-z).exp()).ln()
                } else {
                    (ti - 1.0) * z + (1.0 + z.exp()).ln()
                }
            })
            .sum()
    };

    let mut a = 0.0;
    let mut b = ((prior0 + 1.0) / (prior1 + 1.0)).ln();
    let mut fval = objective(a, b);
    for iter in 0..MAX_ITER {
        let (mut h11, mut h22, mut h21, mut g1, mut g2) = (SIGMA, SIGMA, 0.0, 0.0, 0.0);
        for (&f, &ti) in decisions.iter().zip(&t) {
            let z = f * a + b;
            let (p, q) = if z >= 0.0 {
                let e = (-z).exp();
                (e / (1.0 + e), 1.0 / (1.0 + e))
            } else {
                let e = z.exp();
                (1.0 / (1.0 + e), e / (1.0 + e))
            };
            let d2 = p * q;
            h11 += f * f * d2;
            h22 += d2;
            h21 += f * d2;
            let d1 = ti - p;
            g1 += f * d1;
            g2 += d1;
        }
        if g1.abs() < EPS && g2.abs() < EPS {
            return Ok((a, b));
        }
        let det = h11 * h22 - h21 * h21;
        let da = -(h22 * g1 - h21 * g2) / det;
        let db = -(-h21 * g1 + h11 * g2) / det;
        let gd = g1 * da + g2 * db;
        let mut step = 1.0;
        while step >= MIN_STEP {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = objective(na, nb);
            if nf < fval + 1e-4 * step * gd {
                a = na;
                b = nb;
                fval = nf;
                break;
            }
            step /= 2.0;
        }
        if step < MIN_STEP {
            // Line search stalled: the current point is as good as it gets.
            return if a.is_finite() && b.is_finite() {
                Ok((a, b))
            } else {
                Err(ClassifyError::DidNotConverge(iter))
            };
        }
    }
    if a.is_finite() && b.is_finite() {
        Ok((a, b))
    } else {
        Err(ClassifyError::DidNotConverge(MAX_ITER))
    }
}

/// Calibrated probabilities for one region and one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionScores {
    pub region: RegionId,
    pub p_male: f64,
    pub p_female: f64,
}

impl RegionScores {
    pub fn new(region: RegionId, p_male: f64) -> Self {
        Self {
            region,
            p_male,
            p_female: 1.0 - p_male,
        }
    }

    /// Neutral pair used when a region could not be extracted.
    pub fn neutral(region: RegionId) -> Self {
        Self::new(region, 0.5)
    }

    /// Argmax class, ties go to male.
    pub fn predicted(&self) -> Label {
        predict_pair(self.p_male, self.p_female)
    }
}

#[inline]
pub fn predict_pair(male: f64, female: f64) -> Label {
    if male >= female {
        Label::Male
    } else {
        Label::Female
    }
}

/// Scores rows that are already projected onto the model's selected features.
pub fn score(model: &LinearModel, x: ArrayView2<f64>) -> Result<Vec<RegionScores>, ClassifyError> {
    if x.ncols() != model.w.len() {
        return Err(ClassifyError::ColumnMismatch {
            expected: model.w.len(),
            found: x.ncols(),
        });
    }
    Ok(x.rows()
        .into_iter()
        .map(|row| {
            let f = model.decision(row);
            RegionScores::new(model.region, model.probability(f))
        })
        .collect())
}

/// Scores one full descriptor through the model's feature selection.
pub fn score_descriptor(model: &LinearModel, descriptor: &[f64]) -> Result<RegionScores, ClassifyError> {
    if descriptor.len() != model.input_dim {
        return Err(ClassifyError::ColumnMismatch {
            expected: model.input_dim,
            found: descriptor.len(),
        });
    }
    let f = model
        .selected
        .iter()
        .zip(&model.w)
        .map(|(&i, w)| w * descriptor[i])
        .sum::<f64>()
        + model.b;
    Ok(RegionScores::new(model.region, model.probability(f)))
}

/// 2x2 confusion counts with male as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub male_as_male: usize,
    pub male_as_female: usize,
    pub female_as_male: usize,
    pub female_as_female: usize,
}

impl Confusion {
    pub fn from_predictions(predicted: &[Label], truth: &[Label]) -> Result<Self, ClassifyError> {
        if predicted.len() != truth.len() {
            return Err(ClassifyError::LengthMismatch(predicted.len(), truth.len()));
        }
        let mut c = Confusion::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            match (t, p) {
                (Label::Male, Label::Male) => c.male_as_male += 1,
                (Label::Male, Label::Female) => c.male_as_female += 1,
                (Label::Female, Label::Male) => c.female_as_male += 1,
                (Label::Female, Label::Female) => c.female_as_female += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.male_as_male + self.male_as_female + self.female_as_male + self.female_as_female
    }

    pub fn add(&mut self, other: &Confusion) {
        self.male_as_male += other.male_as_male;
        self.male_as_female += other.male_as_female;
        self.female_as_male += other.female_as_male;
        self.female_as_female += other.female_as_female;
    }

    pub fn accuracy(&self) -> Accuracy {
        let pct = |num: usize, den: usize| {
            if den == 0 {
                f64::NAN
            } else {
                100.0 * num as f64 / den as f64
            }
        };
        Accuracy {
            male: pct(self.male_as_male, self.male_as_male + self.male_as_female),
            female: pct(self.female_as_female, self.female_as_female + self.female_as_male),
            overall: pct(self.male_as_male + self.female_as_female, self.total()),
        }
    }
}

/// Percentages per class and overall.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    pub male: f64,
    pub female: f64,
    pub overall: f64,
}

pub fn region_accuracy(scores: &[RegionScores], labels: &[Label]) -> Result<Accuracy, ClassifyError> {
    if scores.len() != labels.len() {
        return Err(ClassifyError::LengthMismatch(scores.len(), labels.len()));
    }
    let predicted: Vec<Label> = scores.iter().map(RegionScores::predicted).collect();
    Ok(Confusion::from_predictions(&predicted, labels)?.accuracy())
}

/// Trains the SVM on `svm_rows` and calibrates on `calib_rows`; both index
/// into `x` and `labels`, whose columns are already selected.
#[allow(clippy::too_many_arguments)]
pub fn fit_calibrated(
    x: ArrayView2<f64>,
    labels: &[Label],
    svm_rows: &[usize],
    calib_rows: &[usize],
    cfg: &SvmConfig,
    seed: u64,
) -> Result<(Hyperplane, f64, f64), ClassifyError> {
    let xs = x.select(ndarray::Axis(0), svm_rows);
    let ys: Vec<Label> = svm_rows.iter().map(|&i| labels[i]).collect();
    let plane = train_linear_svm(xs.view(), &ys, cfg, seed)?;
    let f: Vec<f64> = calib_rows
        .iter()
        .map(|&i| plane.decision(x.row(i)))
        .collect();
    let yc: Vec<Label> = calib_rows.iter().map(|&i| labels[i]).collect();
    let (a, b) = fit_platt(&f, &yc)?;
    Ok((plane, a, b))
}

/// Seeded stratified split of `rows` into (fit, calibration) with roughly
/// `fraction` of each class held out; each side keeps both classes.
pub fn calibration_split(
    rows: &[usize],
    labels: &[Label],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), ClassifyError> {
    let mut rng = seed::rng(seed);
    let mut fit = Vec::new();
    let mut calib = Vec::new();
    for class in [Label::Female, Label::Male] {
        let mut members: Vec<usize> = rows.iter().copied().filter(|&i| labels[i] == class).collect();
        if members.len() < 2 {
            return Err(ClassifyError::SingleClass);
        }
        members.shuffle(&mut rng);
        let n_cal = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        calib.extend_from_slice(&members[..n_cal]);
        fit.extend_from_slice(&members[n_cal..]);
    }
    fit.sort_unstable();
    calib.sort_unstable();
    Ok((fit, calib))
}

/// Everything needed to fit one selector + classifier + calibration block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    pub ifs: IfsConfig,
    pub svm: SvmConfig,
    pub calibration_fraction: f64,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            ifs: IfsConfig::default(),
            svm: SvmConfig::default(),
            calibration_fraction: 0.2,
        }
    }
}

/// A fitted block, before it is tagged with a region.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedBlock {
    pub selector: FittedSelector,
    pub plane: Hyperplane,
    pub platt_a: f64,
    pub platt_b: f64,
}

impl FittedBlock {
    pub fn into_model(self, region: RegionId, grid: GridSpec, bins: LbpBins, cfg: &BlockConfig) -> LinearModel {
        LinearModel {
            region,
            grid,
            bins,
            input_dim: self.selector.n_features(),
            selected: self.selector.selected().to_vec(),
            w: self.plane.w,
            b: self.plane.b,
            platt_a: self.platt_a,
            platt_b: self.platt_b,
            svm_c: cfg.svm.c,
            calibration_fraction: cfg.calibration_fraction,
        }
    }
}

/// Fits the selector on `fit_rows` and `calib_rows` together (it never
/// sees labels), trains on `fit_rows` and calibrates on `calib_rows`.
pub fn fit_block(
    x: ArrayView2<f64>,
    labels: &[Label],
    fit_rows: &[usize],
    calib_rows: &[usize],
    cfg: &BlockConfig,
    svm_seed: u64,
) -> Result<FittedBlock, ClassifyError> {
    let mut train_rows: Vec<usize> = fit_rows.iter().chain(calib_rows).copied().collect();
    train_rows.sort_unstable();
    let train = x.select(ndarray::Axis(0), &train_rows);
    let selector = fit_selector(train.view(), &cfg.ifs)?;
    drop(train);
    let projected = selector.transform(x)?;
    let (plane, platt_a, platt_b) =
        fit_calibrated(projected.view(), labels, fit_rows, calib_rows, &cfg.svm, svm_seed)?;
    Ok(FittedBlock {
        selector,
        plane,
        platt_a,
        platt_b,
    })
}

// --- model file -----------------------------------------------------------

mod tag {
    pub const REGION: u8 = 1;
    pub const GRID: u8 = 2;
    pub const BINS: u8 = 3;
    pub const INPUT_DIM: u8 = 4;
    pub const SELECTED: u8 = 5;
    pub const W: u8 = 6;
    pub const B: u8 = 7;
    pub const PLATT_A: u8 = 8;
    pub const PLATT_B: u8 = 9;
    pub const SVM_C: u8 = 10;
    pub const CALIBRATION: u8 = 11;
}

fn push_field(out: &mut Vec<u8>, tag: u8, payload: &[u8]) {
    out.push(tag);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
}

fn f64s(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// `RFGM`, u16 version, u16 field count, `(tag u8, len u32, payload)*`,
/// CRC32 of everything before it. Little-endian throughout.
pub fn encode_model(model: &LinearModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&11u16.to_le_bytes());
    push_field(&mut out, tag::REGION, &[model.region.ordinal() as u8]);
    push_field(&mut out, tag::GRID, &[model.grid.n() as u8]);
    push_field(&mut out, tag::BINS, &(model.bins.len() as u16).to_le_bytes());
    push_field(&mut out, tag::INPUT_DIM, &(model.input_dim as u32).to_le_bytes());
    let sel: Vec<u8> = model
        .selected
        .iter()
        .flat_map(|&i| (i as u32).to_le_bytes())
        .collect();
    push_field(&mut out, tag::SELECTED, &sel);
    push_field(&mut out, tag::W, &f64s(&model.w));
    push_field(&mut out, tag::B, &f64s(&[model.b]));
    push_field(&mut out, tag::PLATT_A, &f64s(&[model.platt_a]));
    push_field(&mut out, tag::PLATT_B, &f64s(&[model.platt_b]));
    push_field(&mut out, tag::SVM_C, &f64s(&[model.svm_c]));
    push_field(&mut out, tag::CALIBRATION, &f64s(&[model.calibration_fraction]));
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<LinearModel, ClassifyError> {
    let malformed = |s: &str| ClassifyError::Malformed(s.to_string());
    if bytes.len() < 6 || &bytes[..4] != MODEL_MAGIC {
        return Err(malformed("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != MODEL_VERSION {
        return Err(ClassifyError::VersionMismatch { found: version });
    }
    if bytes.len() < 12 {
        return Err(ClassifyError::ChecksumMismatch);
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(ClassifyError::ChecksumMismatch);
    }

    let count = u16::from_le_bytes([body[6], body[7]]) as usize;
    let mut pos = 8;
    let mut fields: Vec<(u8, &[u8])> = Vec::with_capacity(count);
    for _ in 0..count {
        if pos + 5 > body.len() {
            return Err(malformed("truncated field header"));
        }
        let t = body[pos];
        let len = u32::from_le_bytes(body[pos + 1..pos + 5].try_into().expect("4 bytes")) as usize;
        pos += 5;
        if pos + len > body.len() {
            return Err(malformed("truncated field"));
        }
        fields.push((t, &body[pos..pos + len]));
        pos += len;
    }
    if pos != body.len() {
        return Err(malformed("trailing bytes"));
    }
    let field = |t: u8| -> Result<&[u8], ClassifyError> {
        fields
            .iter()
            .find(|(ft, _)| *ft == t)
            .map(|(_, p)| *p)
            .ok_or_else(|| ClassifyError::Malformed(format!("missing field {t}")))
    };
    let read_f64s = |p: &[u8]| -> Result<Vec<f64>, ClassifyError> {
        if p.len() % 8 != 0 {
            return Err(ClassifyError::Malformed("bad f64 payload".into()));
        }
        Ok(p.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    };
    let scalar = |t: u8| -> Result<f64, ClassifyError> {
        read_f64s(field(t)?)?
            .first()
            .copied()
            .ok_or_else(|| ClassifyError::Malformed(format!("empty field {t}")))
    };

    let region = field(tag::REGION)?
        .first()
        .and_then(|&v| RegionId::from_ordinal(v as usize))
        .ok_or_else(|| malformed("bad region"))?;
    let grid = field(tag::GRID)?
        .first()
        .and_then(|&v| GridSpec::new(v as usize).ok())
        .ok_or_else(|| malformed("bad grid"))?;
    let bins = match field(tag::BINS)? {
        [lo, hi] => match u16::from_le_bytes([*lo, *hi]) {
            59 => LbpBins::Uniform,
            256 => LbpBins::Full,
            _ => return Err(malformed("bad bin count")),
        },
        _ => return Err(malformed("bad bin field")),
    };
    let input_dim = match field(tag::INPUT_DIM)? {
        p if p.len() == 4 => u32::from_le_bytes(p.try_into().expect("4 bytes")) as usize,
        _ => return Err(malformed("bad input dim")),
    };
    let sel_bytes = field(tag::SELECTED)?;
    if sel_bytes.len() % 4 != 0 {
        return Err(malformed("bad selected payload"));
    }
    let selected: Vec<usize> = sel_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let w = read_f64s(field(tag::W)?)?;
    if w.len() != selected.len() || selected.iter().any(|&i| i >= input_dim) {
        return Err(malformed("weights and selection disagree"));
    }
    Ok(LinearModel {
        region,
        grid,
        bins,
        input_dim,
        selected,
        w,
        b: scalar(tag::B)?,
        platt_a: scalar(tag::PLATT_A)?,
        platt_b: scalar(tag::PLATT_B)?,
        svm_c: scalar(tag::SVM_C)?,
        calibration_fraction: scalar(tag::CALIBRATION)?,
    })
}

pub fn save_model(path: impl AsRef<Path>, model: &LinearModel) -> Result<(), ClassifyError> {
    fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<LinearModel, ClassifyError> {
    decode_model(&fs::read(path)?)
}
