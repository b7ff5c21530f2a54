//! Weighted fusion of region scores, the genetic search that learns the
//! weights, and the single-classifier concatenation baseline.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;

use crate::classify::{fit_block, predict_pair, BlockConfig, ClassifyError, Confusion, RegionScores};
use crate::corpus::{FoldSplit, Label};
use crate::seed;

/// Floor on roulette slots so a wheel never has zero total.
const ROULETTE_FLOOR: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum FusionError {
    #[error("score lists disagree in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("all fusion weights are zero")]
    AllZeroWeights,
    #[error("weight {index} is {value}, outside [0, 1]")]
    WeightOutOfRange { index: usize, value: f64 },
    #[error("fitness set is degenerate: {0}")]
    DegenerateFitnessSet(String),
    #[error("invalid GA configuration: {0}")]
    InvalidConfig(String),
    #[error("feature matrices disagree in row count: {0} vs {1}")]
    RowMismatch(usize, usize),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
}

/// One weight per region, each in `[0, 1]`, not all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights(Vec<f64>);

impl FusionWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self, FusionError> {
        for (index, &value) in weights.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(FusionError::WeightOutOfRange { index, value });
            }
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(FusionError::AllZeroWeights);
        }
        Ok(Self(weights))
    }

    pub fn uniform(r: usize) -> Self {
        Self(vec![1.0; r])
    }

    pub fn one_hot(r: usize, k: usize) -> Self {
        let mut w = vec![0.0; r];
        w[k] = 1.0;
        Self(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Fused class scores for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedScore {
    pub male: f64,
    pub female: f64,
}

impl FusedScore {
    pub fn predicted(&self) -> Label {
        predict_pair(self.male, self.female)
    }

    /// Scores rescaled to sum to one.
    pub fn normalized(&self) -> (f64, f64) {
        let total = self.male + self.female;
        (self.male / total, self.female / total)
    }
}

fn check_shape(scores: &[Vec<RegionScores>], r: usize) -> Result<usize, FusionError> {
    if scores.len() != r {
        return Err(FusionError::LengthMismatch(scores.len(), r));
    }
    let n = scores.first().map_or(0, Vec::len);
    for list in scores {
        if list.len() != n {
            return Err(FusionError::LengthMismatch(list.len(), n));
        }
    }
    Ok(n)
}

fn fuse_raw<'a>(
    scores: &'a [Vec<RegionScores>],
    weights: &'a [f64],
    n: usize,
) -> impl Iterator<Item = FusedScore> + 'a {
    (0..n).map(move |s| {
        let mut male = 0.0;
        let mut female = 0.0;
        for (list, &a) in scores.iter().zip(weights) {
            male += a * list[s].p_male;
            female += a * list[s].p_female;
        }
        FusedScore { male, female }
    })
}

/// `C = sum_i a_i C_i` over region score lists (outer index = region).
pub fn fuse(scores: &[Vec<RegionScores>], weights: &FusionWeights) -> Result<Vec<FusedScore>, FusionError> {
    let n = check_shape(scores, weights.len())?;
    Ok(fuse_raw(scores, weights.as_slice(), n).collect())
}

/// Fraction of samples whose fused prediction differs from the label.
pub fn fitness(weights: &FusionWeights, scores: &[Vec<RegionScores>], labels: &[Label]) -> Result<f64, FusionError> {
    let n = check_shape(scores, weights.len())?;
    if labels.len() != n {
        return Err(FusionError::LengthMismatch(labels.len(), n));
    }
    Ok(error_of(scores, weights.as_slice(), labels))
}

fn error_of(scores: &[Vec<RegionScores>], weights: &[f64], labels: &[Label]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    if weights.iter().all(|&w| w == 0.0) {
        return 1.0;
    }
    let wrong = fuse_raw(scores, weights, labels.len())
        .zip(labels)
        .filter(|(f, &l)| f.predicted() != l)
        .count();
    wrong as f64 / labels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaConfig {
    pub population_size: usize,
    pub generations: usize,
    pub crossover_prob: f64,
    pub mutation_prob: f64,
    pub elitism_count: usize,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population_size: 50,
            generations: 100,
            crossover_prob: 0.8,
            mutation_prob: 0.01,
            elitism_count: 2,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        let bad = |s: String| Err(FusionError::InvalidConfig(s));
        if self.population_size < 2 {
            return bad(format!("population size {} < 2", self.population_size));
        }
        if !(0.0..=1.0).contains(&self.crossover_prob) {
            return bad(format!("crossover probability {} not in [0,1]", self.crossover_prob));
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) {
            return bad(format!("mutation probability {} not in [0,1]", self.mutation_prob));
        }
        if self.elitism_count >= self.population_size {
            return bad(format!(
                "elitism count {} must be below population size {}",
                self.elitism_count, self.population_size
            ));
        }
        Ok(())
    }
}

/// Result of a GA run.
#[derive(Debug, Clone, PartialEq)]
pub struct GaOutcome {
    pub weights: FusionWeights,
    pub error: f64,
    /// Best error of the initial population.
    pub initial_best: f64,
    /// Best-ever error after each evaluated generation, starting with the
    /// initial population.
    pub history: Vec<f64>,
}

/// Learns fusion weights from a random initial population.
pub fn ga_optimize(scores: &[Vec<RegionScores>], labels: &[Label], cfg: &GaConfig) -> Result<GaOutcome, FusionError> {
    cfg.validate()?;
    let r = scores.len();
    let mut rng = seed::rng(seed::derive(cfg.seed, "ga-init"));
    let population: Vec<Vec<f64>> = (0..cfg.population_size)
        .map(|_| (0..r).map(|_| rng.random::<f64>()).collect())
        .collect();
    ga_optimize_from(scores, labels, cfg, population)
}

/// Runs the GA from a given population; its size overrides the config.
pub fn ga_optimize_from(
    scores: &[Vec<RegionScores>],
    labels: &[Label],
    cfg: &GaConfig,
    mut population: Vec<Vec<f64>>,
) -> Result<GaOutcome, FusionError> {
    let r = scores.len();
    if r < 2 {
        return Err(FusionError::DegenerateFitnessSet(format!("need at least 2 regions, got {r}")));
    }
    let n = check_shape(scores, r)?;
    if labels.len() != n {
        return Err(FusionError::LengthMismatch(labels.len(), n));
    }
    if !(labels.contains(&Label::Male) && labels.contains(&Label::Female)) {
        return Err(FusionError::DegenerateFitnessSet("fitness set needs both classes".into()));
    }
    let pop_size = population.len();
    if pop_size < 2 || population.iter().any(|c| c.len() != r) {
        return Err(FusionError::InvalidConfig("bad initial population".into()));
    }
    let elite = cfg.elitism_count.min(pop_size - 1);
    let mut rng = seed::rng(seed::derive(cfg.seed, "ga-breed"));

    let evaluate = |pop: &[Vec<f64>]| -> Vec<f64> { pop.par_iter().map(|c| error_of(scores, c, labels)).collect() };

    let mut errors = evaluate(&population);
    let mut best_idx = argmin(&errors);
    let mut best = (population[best_idx].clone(), errors[best_idx]);
    let initial_best = best.1;
    let mut history = vec![best.1];

    for _ in 0..cfg.generations {
        // Elites first, ranked by error then index for a stable order.
        let mut order: Vec<usize> = (0..pop_size).collect();
        order.sort_by(|&a, &b| errors[a].total_cmp(&errors[b]).then(a.cmp(&b)));
        let mut next: Vec<Vec<f64>> = order[..elite].iter().map(|&i| population[i].clone()).collect();

        let slots: Vec<f64> = errors.iter().map(|e| (1.0 - e).max(ROULETTE_FLOOR)).collect();
        let all_equal = errors.iter().all(|&e| e == errors[0]);
        let total: f64 = slots.iter().sum();
        let spin = |rng: &mut rand_chacha::ChaCha8Rng| -> usize {
            if all_equal {
                return rng.random_range(0..pop_size);
            }
            let mut t = rng.random::<f64>() * total;
            for (i, s) in slots.iter().enumerate() {
                if t < *s {
                    return i;
                }
                t -= s;
            }
            pop_size - 1
        };

        while next.len() < pop_size {
            let mut a = population[spin(&mut rng)].clone();
            let mut b = population[spin(&mut rng)].clone();
            if rng.random::<f64>() < cfg.crossover_prob {
                let point = rng.random_range(1..r);
                for g in point..r {
                    std::mem::swap(&mut a[g], &mut b[g]);
                }
            }
            for child in [&mut a, &mut b] {
                for gene in child.iter_mut() {
                    if rng.random::<f64>() < cfg.mutation_prob {
                        *gene = rng.random::<f64>();
                    }
                    *gene = gene.clamp(0.0, 1.0);
                }
            }
            next.push(a);
            if next.len() < pop_size {
                next.push(b);
            }
        }
        population = next;
        errors = evaluate(&population);
        best_idx = argmin(&errors);
        if errors[best_idx] < best.1 {
            best = (population[best_idx].clone(), errors[best_idx]);
        }
        history.push(best.1);
    }

    let weights = FusionWeights::new(best.0).map_err(|_| {
        FusionError::DegenerateFitnessSet("no chromosome with a non-zero weight".into())
    })?;
    Ok(GaOutcome {
        weights,
        error: best.1,
        initial_best,
        history,
    })
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

/// Outcome of the concatenation baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatOutcome {
    pub width: usize,
    pub per_fold: Vec<Confusion>,
    pub confusion: Confusion,
}

impl ConcatOutcome {
    /// Overall accuracy as a fraction in [0, 1].
    pub fn accuracy(&self) -> f64 {
        self.confusion.accuracy().overall / 100.0
    }
}

/// Column-concatenates every region's features and runs one
/// selector + classifier block per fold. Calibration rows come from
/// `calibration_rows(fold, train_rows)`, so the caller decides the split.
pub fn concat_baseline(
    region_features: &[Array2<f64>],
    labels: &[Label],
    folds: &FoldSplit,
    cfg: &BlockConfig,
    seed_root: u64,
    calibration_rows: impl Fn(usize, &[usize]) -> Result<(Vec<usize>, Vec<usize>), ClassifyError>,
) -> Result<ConcatOutcome, FusionError> {
    let first = region_features
        .first()
        .ok_or_else(|| FusionError::DegenerateFitnessSet("no regions".into()))?;
    let rows = first.nrows();
    for m in region_features {
        if m.nrows() != rows {
            return Err(FusionError::RowMismatch(m.nrows(), rows));
        }
    }
    if labels.len() != rows {
        return Err(FusionError::RowMismatch(labels.len(), rows));
    }
    let views: Vec<ArrayView2<f64>> = region_features.iter().map(|m| m.view()).collect();
    let x = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
    let mut per_fold = Vec::with_capacity(folds.k());
    let mut confusion = Confusion::default();
    for fold in 0..folds.k() {
        let (train, test) = folds.train_test(fold);
        let (fit_rows, calib_rows) = calibration_rows(fold, &train)?;
        let block = fit_block(
            x.view(),
            labels,
            &fit_rows,
            &calib_rows,
            cfg,
            seed::derive_indexed(seed_root, "concat-svm", fold as u64),
        )?;
        let xt = x.select(Axis(0), &test);
        let projected = block
            .selector
            .transform(xt.view())
            .map_err(ClassifyError::from)?;
        let predicted: Vec<Label> = projected
            .rows()
            .into_iter()
            .map(|row| {
                let f = block.plane.decision(row);
                let p = crate::classify::platt_probability(block.platt_a, block.platt_b, f);
                predict_pair(p, 1.0 - p)
            })
            .collect();
        let truth: Vec<Label> = test.iter().map(|&i| labels[i]).collect();
        let c = Confusion::from_predictions(&predicted, &truth)?;
        confusion.add(&c);
        per_fold.push(c);
    }
    Ok(ConcatOutcome {
        width: x.ncols(),
        per_fold,
        confusion,
    })
}
