//! End-to-end runs: descriptor extraction, k-fold training and evaluation,
//! model bundles, prediction, timing and the grid-size sweep.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;

use crate::classify::{
    calibration_split, encode_model, fit_block, load_model, save_model, score_descriptor, BlockConfig,
    ClassifyError, Confusion, LinearModel, RegionScores, SvmConfig,
};
use crate::corpus::{self, load_gray_image, CorpusError, FoldSplit, Label, SampleRecord};
use crate::fusion::{concat_baseline, fuse, ga_optimize, FusionError, FusionWeights, GaConfig};
use crate::image::GrayImage;
use crate::regions::{crop, extract_region_boxes_lenient, load_landmarks, GridSpec, LandmarkSet, RegionError, RegionId};
use crate::seed;
use crate::selection::IfsConfig;
use crate::texture::{colbp_descriptor, descriptor_len, LbpBins};

const BUNDLE_FILE: &str = "bundle.tsv";
const WEIGHTS_FILE: &str = "weights.tsv";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("sample {sample_id}: {source}")]
    Sample {
        sample_id: String,
        #[source]
        source: Box<PipelineError>,
    },
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error("{context}: {source}")]
    Classify {
        context: String,
        #[source]
        source: ClassifyError,
    },
    #[error("fold {fold}: {source}")]
    Fusion {
        fold: usize,
        #[source]
        source: FusionError,
    },
    #[error("model bundle incomplete: {0}")]
    BundleIncomplete(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Broad failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Usage,
    Data,
    Numeric,
}

impl PipelineError {
    pub fn kind(&self) -> FailureKind {
        match self {
            PipelineError::InvalidConfig(_) => FailureKind::Usage,
            PipelineError::Sample { source, .. } => source.kind(),
            PipelineError::Classify { source, .. } => match source {
                ClassifyError::Io(_)
                | ClassifyError::VersionMismatch { .. }
                | ClassifyError::ChecksumMismatch
                | ClassifyError::Malformed(_) => FailureKind::Data,
                _ => FailureKind::Numeric,
            },
            PipelineError::Fusion { .. } => FailureKind::Numeric,
            PipelineError::Corpus(CorpusError::InvalidArgument(_)) => FailureKind::Usage,
            PipelineError::Corpus(_)
            | PipelineError::Region(_)
            | PipelineError::BundleIncomplete(_)
            | PipelineError::Io { .. } => FailureKind::Data,
        }
    }

    fn in_sample(self, sample_id: &str) -> Self {
        PipelineError::Sample {
            sample_id: sample_id.to_string(),
            source: Box::new(self),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn classify_err(context: impl Into<String>) -> impl FnOnce(ClassifyError) -> PipelineError {
    let context = context.into();
    move |source| PipelineError::Classify { context, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Fusion,
    Concat,
    PerRegion,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Fusion => "fusion",
            Mode::Concat => "concat",
            Mode::PerRegion => "per-region",
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fusion" => Ok(Mode::Fusion),
            "concat" => Ok(Mode::Concat),
            "per-region" => Ok(Mode::PerRegion),
            _ => Err(format!("unknown mode `{s}` (expected fusion, concat or per-region)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub grid: GridSpec,
    pub bins: LbpBins,
    pub ifs: IfsConfig,
    pub svm_c: f64,
    pub calibration_fraction: f64,
    pub ga: GaConfig,
    pub folds: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub mode: Mode,
    /// Learn one weight vector from every fold's calibration scores instead
    /// of one per fold.
    pub global_weights: bool,
}

impl RunConfig {
    pub fn new(manifest: impl Into<PathBuf>) -> Self {
        Self {
            manifest: manifest.into(),
            grid: GridSpec::new(4).expect("valid grid"),
            bins: LbpBins::Uniform,
            ifs: IfsConfig::default(),
            svm_c: 1.0,
            calibration_fraction: 0.2,
            ga: GaConfig::default(),
            folds: 5,
            seed: 7,
            out: None,
            mode: Mode::Fusion,
            global_weights: false,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |s: String| Err(PipelineError::InvalidConfig(s));
        self.ifs
            .validate()
            .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        self.ga
            .validate()
            .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        if !(self.svm_c > 0.0 && self.svm_c.is_finite()) {
            return bad(format!("svm C must be a positive number, got {}", self.svm_c));
        }
        if !(self.calibration_fraction > 0.0 && self.calibration_fraction < 1.0) {
            return bad(format!(
                "calibration fraction {} not in (0,1)",
                self.calibration_fraction
            ));
        }
        if self.folds < 2 {
            return bad(format!("need at least 2 folds, got {}", self.folds));
        }
        Ok(())
    }

    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            ifs: self.ifs,
            svm: SvmConfig {
                c: self.svm_c,
                ..SvmConfig::default()
            },
            calibration_fraction: self.calibration_fraction,
        }
    }
}

/// Named sub-seeds of a run.
#[derive(Debug, Clone, Copy)]
pub struct Seeds {
    pub root: u64,
}

impl Seeds {
    pub fn folds(&self) -> u64 {
        seed::derive(self.root, "folds")
    }

    pub fn calibration(&self, fold: usize) -> u64 {
        seed::derive_indexed(self.root, "calibration", fold as u64)
    }

    pub fn svm(&self, region: RegionId, fold: usize) -> u64 {
        seed::derive_indexed(self.root, &format!("svm/{}", region.name()), fold as u64)
    }

    pub fn ga(&self, fold: usize) -> u64 {
        seed::derive_indexed(self.root, "ga", fold as u64)
    }

    pub fn concat(&self) -> u64 {
        seed::derive(self.root, "concat")
    }

    /// One line per named stream; `fold` index `k` is the final model.
    pub fn manifest(&self, k: usize) -> String {
        let mut s = format!("stream\tfold\tseed\nroot\t-\t{}\nfolds\t-\t{}\n", self.root, self.folds());
        for fold in 0..=k {
            let _ = writeln!(s, "calibration\t{fold}\t{}", self.calibration(fold));
            let _ = writeln!(s, "ga\t{fold}\t{}", self.ga(fold));
            for r in RegionId::ALL {
                let _ = writeln!(s, "svm/{}\t{fold}\t{}", r.name(), self.svm(r, fold));
            }
        }
        let _ = writeln!(s, "concat\t-\t{}", self.concat());
        s
    }
}

/// Region descriptors for a whole corpus, one matrix per region.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<SampleRecord>,
    pub labels: Vec<Label>,
    pub grid: GridSpec,
    pub bins: LbpBins,
    /// `features[region]` is `samples x descriptor_len`; rows of failed
    /// regions are zero.
    pub features: Vec<Array2<f64>>,
    /// `failed[region][sample]`
    pub failed: Vec<Vec<bool>>,
    /// Wall-clock extraction time per image, milliseconds.
    pub extract_ms: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn failure_counts(&self) -> Vec<usize> {
        self.failed.iter().map(|f| f.iter().filter(|&&x| x).count()).collect()
    }
}

/// Descriptors for all ten regions of one image. A region that cannot be
/// cropped or described comes back as `Err` with the reason.
pub fn describe_regions(
    img: &GrayImage,
    lm: &LandmarkSet,
    grid: GridSpec,
    bins: LbpBins,
) -> Vec<Result<Vec<f64>, String>> {
    extract_region_boxes_lenient(lm, img.width(), img.height())
        .into_iter()
        .map(|b| {
            let b = b.map_err(|e| e.to_string())?;
            let region = crop(img, &b).map_err(|e| e.to_string())?;
            colbp_descriptor(&region, grid, bins)
                .map(|d| d.values)
                .map_err(|e| e.to_string())
        })
        .collect()
}

fn load_sample(record: &SampleRecord, base: &Path) -> Result<(GrayImage, LandmarkSet), PipelineError> {
    let (img_path, lm_path) = record.resolved(base);
    let img = load_gray_image(&img_path).map_err(|e| PipelineError::from(e).in_sample(&record.sample_id))?;
    let lm = load_landmarks(&lm_path).map_err(|e| PipelineError::from(e).in_sample(&record.sample_id))?;
    Ok((img, lm))
}

/// Loads every sample and extracts region descriptors in parallel.
pub fn build_dataset(
    records: Vec<SampleRecord>,
    base: &Path,
    grid: GridSpec,
    bins: LbpBins,
) -> Result<Dataset, PipelineError> {
    let per_sample: Vec<(Vec<Result<Vec<f64>, String>>, f64)> = records
        .par_iter()
        .map(|rec| {
            let (img, lm) = load_sample(rec, base)?;
            let start = Instant::now();
            let d = describe_regions(&img, &lm, grid, bins);
            Ok((d, start.elapsed().as_secs_f64() * 1e3))
        })
        .collect::<Result<_, PipelineError>>()?;

    let dim = descriptor_len(grid, bins);
    let n = records.len();
    let mut features = vec![Array2::zeros((n, dim)); RegionId::COUNT];
    let mut failed = vec![vec![false; n]; RegionId::COUNT];
    let mut extract_ms = Vec::with_capacity(n);
    for (s, (descs, ms)) in per_sample.into_iter().enumerate() {
        extract_ms.push(ms);
        for (r, d) in descs.into_iter().enumerate() {
            match d {
                Ok(v) => features[r].row_mut(s).assign(&ndarray::ArrayView1::from(&v)),
                Err(_) => failed[r][s] = true,
            }
        }
    }
    Ok(Dataset {
        labels: records.iter().map(|r| r.label).collect(),
        records,
        grid,
        bins,
        features,
        failed,
        extract_ms,
    })
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, PipelineError> {
    let records = corpus::load_manifest(&cfg.manifest)?;
    let base = cfg.manifest.parent().unwrap_or(Path::new("."));
    build_dataset(records, base, cfg.grid, cfg.bins)
}

/// Everything fitted for one fold (or for the final model).
#[derive(Debug, Clone, PartialEq)]
pub struct FoldFit {
    pub models: Vec<LinearModel>,
    pub calib_rows: Vec<usize>,
    /// `calib_scores[region][i]` for `calib_rows[i]`.
    pub calib_scores: Vec<Vec<RegionScores>>,
}

fn region_scores(model: &LinearModel, data: &Dataset, rows: &[usize]) -> Result<Vec<RegionScores>, PipelineError> {
    let r = model.region.ordinal();
    rows.iter()
        .map(|&i| {
            if data.failed[r][i] {
                Ok(RegionScores::neutral(model.region))
            } else {
                let row = data.features[r].row(i);
                score_descriptor(model, &row.to_vec())
                    .map_err(classify_err(format!("scoring {}", data.records[i].sample_id)))
            }
        })
        .collect()
}

/// Fits all ten region blocks on `train` rows with the given seed index.
/// Only `labels[train]` is consulted.
pub fn fit_fold(
    data: &Dataset,
    labels: &[Label],
    train: &[usize],
    cfg: &RunConfig,
    index: usize,
) -> Result<FoldFit, PipelineError> {
    let seeds = Seeds { root: cfg.seed };
    let block = cfg.block();
    let (fit_rows, calib_rows) = calibration_split(train, labels, cfg.calibration_fraction, seeds.calibration(index))
        .map_err(classify_err(format!("calibration split for fold {index}")))?;

    let models: Vec<LinearModel> = RegionId::ALL
        .par_iter()
        .map(|&region| {
            let r = region.ordinal();
            let ok = |rows: &[usize]| -> Vec<usize> { rows.iter().copied().filter(|&i| !data.failed[r][i]).collect() };
            let fb = fit_block(
                data.features[r].view(),
                labels,
                &ok(&fit_rows),
                &ok(&calib_rows),
                &block,
                seeds.svm(region, index),
            )
            .map_err(classify_err(format!("fold {index}, region {region}")))?;
            Ok(fb.into_model(region, data.grid, data.bins, &block))
        })
        .collect::<Result<_, PipelineError>>()?;

    let calib_scores = models
        .iter()
        .map(|m| region_scores(m, data, &calib_rows))
        .collect::<Result<_, _>>()?;
    Ok(FoldFit {
        models,
        calib_rows,
        calib_scores,
    })
}

fn learn_weights(
    scores: &[Vec<RegionScores>],
    labels: &[Label],
    cfg: &RunConfig,
    seed_index: usize,
) -> Result<FusionWeights, PipelineError> {
    let ga = GaConfig {
        seed: Seeds { root: cfg.seed }.ga(seed_index),
        ..cfg.ga
    };
    ga_optimize(scores, labels, &ga)
        .map(|o| o.weights)
        .map_err(|source| PipelineError::Fusion {
            fold: seed_index,
            source,
        })
}

/// Confusion counts for one scope, per fold and pooled.
#[derive(Debug, Clone, PartialEq)]
pub struct ScopeRow {
    pub scope: String,
    pub per_fold: Vec<Confusion>,
    pub total: Confusion,
}

impl ScopeRow {
    fn new(scope: impl Into<String>) -> Self {
        Self {
            scope: scope.into(),
            per_fold: Vec::new(),
            total: Confusion::default(),
        }
    }

    fn push(&mut self, c: Confusion) {
        self.total.add(&c);
        self.per_fold.push(c);
    }

    /// Mean of per-fold overall accuracies.
    pub fn fold_mean(&self) -> f64 {
        self.per_fold.iter().map(|c| c.accuracy().overall).sum::<f64>() / self.per_fold.len() as f64
    }
}

/// Wall-clock measurements, kept out of the deterministic report files.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Timings {
    pub extract_ms_per_image: f64,
    pub train_ms_per_fold: f64,
    pub test_ms_per_image: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub grid: GridSpec,
    pub bins: LbpBins,
    pub folds: usize,
    pub samples: usize,
    pub seed: u64,
    pub mode: Mode,
    pub global_weights: bool,
    pub regions: Vec<ScopeRow>,
    pub fused: Option<ScopeRow>,
    pub concat: Option<ScopeRow>,
    pub weights: Vec<FusionWeights>,
    pub region_failures: Vec<usize>,
    pub timings: Timings,
}

impl EvaluationReport {
    pub fn best_region(&self) -> &ScopeRow {
        self.regions
            .iter()
            .max_by(|a, b| {
                a.total
                    .accuracy()
                    .overall
                    .total_cmp(&b.total.accuracy().overall)
                    .then(b.scope.cmp(&a.scope))
            })
            .expect("ten regions")
    }

    fn rows(&self) -> impl Iterator<Item = &ScopeRow> {
        self.regions.iter().chain(&self.fused).chain(&self.concat)
    }

    /// Every row's confusion matrices must add up to the fold sizes.
    pub fn check_consistency(&self, fold_sizes: &[usize]) -> Result<(), String> {
        for row in self.rows() {
            for (c, &n) in row.per_fold.iter().zip(fold_sizes) {
                if c.total() != n {
                    return Err(format!("{}: confusion sums to {} not {}", row.scope, c.total(), n));
                }
            }
            if row.total.total() != self.samples {
                return Err(format!("{}: pooled confusion sums to {}", row.scope, row.total.total()));
            }
            let a = row.total.accuracy();
            let c = row.total;
            let recount = 100.0 * (c.male_as_male + c.female_as_female) as f64 / c.total() as f64;
            if (a.overall - recount).abs() > 1e-9 {
                return Err(format!("{}: overall accuracy disagrees with counts", row.scope));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "regionfuse evaluation");
        let _ = writeln!(
            s,
            "grid {}  bins {}  folds {}  samples {}  seed {}  mode {}{}",
            self.grid,
            self.bins.len(),
            self.folds,
            self.samples,
            self.seed,
            self.mode,
            if self.global_weights { "  weights global" } else { "" }
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<14} {:>8} {:>8} {:>8} {:>10}", "scope", "male", "female", "overall", "fold-mean");
        for row in self.rows() {
            let a = row.total.accuracy();
            let _ = writeln!(
                s,
                "{:<14} {:>8.2} {:>8.2} {:>8.2} {:>10.2}",
                row.scope,
                a.male,
                a.female,
                a.overall,
                row.fold_mean()
            );
        }
        for row in self.fused.iter().chain(&self.concat) {
            let c = row.total;
            let _ = writeln!(s);
            let _ = writeln!(s, "confusion ({})      predicted male  predicted female", row.scope);
            let _ = writeln!(s, "  actual male    {:>16} {:>17}", c.male_as_male, c.male_as_female);
            let _ = writeln!(s, "  actual female  {:>16} {:>17}", c.female_as_male, c.female_as_female);
        }
        let _ = writeln!(s);
        let _ = write!(s, "{:<14}", "overall/fold");
        for f in 0..self.folds {
            let _ = write!(s, " {:>8}", format!("fold{f}"));
        }
        let _ = writeln!(s);
        for row in self.rows() {
            let _ = write!(s, "{:<14}", row.scope);
            for c in &row.per_fold {
                let _ = write!(s, " {:>8.2}", c.accuracy().overall);
            }
            let _ = writeln!(s);
        }
        if !self.weights.is_empty() {
            let _ = writeln!(s);
            let _ = write!(s, "{:<14}", "weights");
            for f in 0..self.weights.len() {
                let _ = write!(s, " {:>8}", format!("fold{f}"));
            }
            let _ = writeln!(s);
            for r in RegionId::ALL {
                let _ = write!(s, "{:<14}", r.name());
                for w in &self.weights {
                    let _ = write!(s, " {:>8.4}", w.as_slice()[r.ordinal()]);
                }
                let _ = writeln!(s);
            }
        }
        let failures: usize = self.region_failures.iter().sum();
        let _ = writeln!(s);
        let _ = writeln!(s, "region failures (neutral scores): {failures}");
        s
    }

    /// `metric <TAB> scope <TAB> value`, one metric per line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric\tscope\tvalue\n");
        let mut line = |m: &str, scope: &str, v: String| {
            let _ = writeln!(s, "{m}\t{scope}\t{v}");
        };
        line("grid", "run", self.grid.n().to_string());
        line("bins", "run", self.bins.len().to_string());
        line("folds", "run", self.folds.to_string());
        line("samples", "run", self.samples.to_string());
        line("seed", "run", self.seed.to_string());
        line("mode", "run", self.mode.to_string());
        for row in self.regions.iter().chain(&self.fused).chain(&self.concat) {
            let a = row.total.accuracy();
            line("accuracy_male", &row.scope, format!("{:.6}", a.male));
            line("accuracy_female", &row.scope, format!("{:.6}", a.female));
            line("accuracy_overall", &row.scope, format!("{:.6}", a.overall));
            line("accuracy_fold_mean", &row.scope, format!("{:.6}", row.fold_mean()));
            let c = row.total;
            line("confusion_male_as_male", &row.scope, c.male_as_male.to_string());
            line("confusion_male_as_female", &row.scope, c.male_as_female.to_string());
            line("confusion_female_as_male", &row.scope, c.female_as_male.to_string());
            line("confusion_female_as_female", &row.scope, c.female_as_female.to_string());
            for (f, c) in row.per_fold.iter().enumerate() {
                line(
                    "accuracy_overall",
                    &format!("fold{f}/{}", row.scope),
                    format!("{:.6}", c.accuracy().overall),
                );
            }
        }
        for (f, w) in self.weights.iter().enumerate() {
            for r in RegionId::ALL {
                line("weight", &format!("fold{f}/{}", r.name()), format!("{:.6}", w.as_slice()[r.ordinal()]));
            }
        }
        for r in RegionId::ALL {
            line("region_failures", r.name(), self.region_failures[r.ordinal()].to_string());
        }
        s
    }

    pub fn timing_table(&self) -> String {
        let t = self.timings;
        format!(
            "stage\tms\nfeature_extraction_per_image\t{:.3}\ntraining_per_fold\t{:.3}\ntesting_per_image\t{:.3}\n",
            t.extract_ms_per_image, t.train_ms_per_fold, t.test_ms_per_image
        )
    }
}

/// Result of [`evaluate`]: the report plus the fitted artefacts.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvaluationReport,
    pub folds: FoldSplit,
    pub fits: Vec<FoldFit>,
}

fn labels_at(labels: &[Label], rows: &[usize]) -> Vec<Label> {
    rows.iter().map(|&i| labels[i]).collect()
}

/// k-fold evaluation on an already extracted dataset.
pub fn evaluate(data: &Dataset, cfg: &RunConfig) -> Result<Evaluation, PipelineError> {
    cfg.validate()?;
    let seeds = Seeds { root: cfg.seed };
    let folds = corpus::stratified_folds(&data.labels, cfg.folds, seeds.folds())?;
    let k = folds.k();
    let labels = &data.labels;
    let mut regions: Vec<ScopeRow> = RegionId::ALL.iter().map(|r| ScopeRow::new(r.name())).collect();
    let mut fits = Vec::with_capacity(k);
    let mut test_scores: Vec<Vec<Vec<RegionScores>>> = Vec::with_capacity(k);
    let mut train_ms = 0.0;
    let mut test_ms = 0.0;

    for fold in 0..k {
        let (train, test) = folds.train_test(fold);
        let start = Instant::now();
        let fit = fit_fold(data, labels, &train, cfg, fold)?;
        train_ms += start.elapsed().as_secs_f64() * 1e3;

        let start = Instant::now();
        let scores: Vec<Vec<RegionScores>> = fit
            .models
            .iter()
            .map(|m| region_scores(m, data, &test))
            .collect::<Result<_, _>>()?;
        test_ms += start.elapsed().as_secs_f64() * 1e3;
        let truth = labels_at(labels, &test);
        for (row, s) in regions.iter_mut().zip(&scores) {
            let predicted: Vec<Label> = s.iter().map(RegionScores::predicted).collect();
            row.push(
                Confusion::from_predictions(&predicted, &truth)
                    .map_err(classify_err(format!("fold {fold} accuracy")))?,
            );
        }
        fits.push(fit);
        test_scores.push(scores);
    }

    let mut weights = Vec::new();
    let mut fused = None;
    if cfg.mode == Mode::Fusion {
        let start = Instant::now();
        if cfg.global_weights {
            let pooled: Vec<Vec<RegionScores>> = (0..RegionId::COUNT)
                .map(|r| fits.iter().flat_map(|f| f.calib_scores[r].iter().copied()).collect())
                .collect();
            let pooled_labels: Vec<Label> = fits.iter().flat_map(|f| labels_at(labels, &f.calib_rows)).collect();
            let w = learn_weights(&pooled, &pooled_labels, cfg, k + 1)?;
            weights = vec![w; k];
        } else {
            for (fold, fit) in fits.iter().enumerate() {
                weights.push(learn_weights(&fit.calib_scores, &labels_at(labels, &fit.calib_rows), cfg, fold)?);
            }
        }
        train_ms += start.elapsed().as_secs_f64() * 1e3;

        let start = Instant::now();
        let mut row = ScopeRow::new("fused");
        for fold in 0..k {
            let (_, test) = folds.train_test(fold);
            let f = fuse(&test_scores[fold], &weights[fold]).map_err(|source| PipelineError::Fusion { fold, source })?;
            let predicted: Vec<Label> = f.iter().map(|s| s.predicted()).collect();
            row.push(
                Confusion::from_predictions(&predicted, &labels_at(labels, &test))
                    .map_err(classify_err(format!("fold {fold} fused accuracy")))?,
            );
        }
        test_ms += start.elapsed().as_secs_f64() * 1e3;
        fused = Some(row);
    }

    let concat = if cfg.mode == Mode::Concat {
        let root = cfg.seed;
        let frac = cfg.calibration_fraction;
        let out = concat_baseline(&data.features, labels, &folds, &cfg.block(), seeds.concat(), |fold, train| {
            calibration_split(train, labels, frac, Seeds { root }.calibration(fold))
        })
        .map_err(|source| PipelineError::Fusion { fold: 0, source })?;
        let mut row = ScopeRow::new("concat");
        for c in out.per_fold {
            row.push(c);
        }
        Some(row)
    } else {
        None
    };

    let n = data.len() as f64;
    let report = EvaluationReport {
        grid: data.grid,
        bins: data.bins,
        folds: k,
        samples: data.len(),
        seed: cfg.seed,
        mode: cfg.mode,
        global_weights: cfg.global_weights,
        regions,
        fused,
        concat,
        weights,
        region_failures: data.failure_counts(),
        timings: Timings {
            extract_ms_per_image: data.extract_ms.iter().sum::<f64>() / n,
            train_ms_per_fold: train_ms / k as f64,
            test_ms_per_image: test_ms / n,
        },
    };
    let sizes: Vec<usize> = (0..k).map(|f| folds.train_test(f).1.len()).collect();
    report
        .check_consistency(&sizes)
        .map_err(|e| PipelineError::InvalidConfig(format!("internal report inconsistency: {e}")))?;
    Ok(Evaluation { report, folds, fits })
}

/// A deployable ensemble: ten region models plus fusion weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub models: Vec<LinearModel>,
    pub weights: FusionWeights,
}

/// Fits the ensemble on every sample.
pub fn fit_final(data: &Dataset, cfg: &RunConfig) -> Result<Bundle, PipelineError> {
    cfg.validate()?;
    let all: Vec<usize> = (0..data.len()).collect();
    let index = cfg.folds;
    let fit = fit_fold(data, &data.labels, &all, cfg, index)?;
    let weights = learn_weights(&fit.calib_scores, &labels_at(&data.labels, &fit.calib_rows), cfg, index)?;
    Ok(Bundle {
        models: fit.models,
        weights,
    })
}

pub fn format_weights(w: &FusionWeights) -> String {
    let mut s = String::new();
    for r in RegionId::ALL {
        // Shortest form that parses back to the same bits.
        let _ = writeln!(s, "{}\t{}", r.name(), w.as_slice()[r.ordinal()]);
    }
    s
}

pub fn parse_weights(text: &str) -> Result<FusionWeights, PipelineError> {
    let bad = |m: String| PipelineError::BundleIncomplete(m);
    let mut w = vec![f64::NAN; RegionId::COUNT];
    for line in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
        let (name, value) = line
            .split_once('\t')
            .ok_or_else(|| bad(format!("bad weights line `{line}`")))?;
        let region: RegionId = name.parse().map_err(bad)?;
        w[region.ordinal()] = value
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad weight `{value}`")))?;
    }
    if let Some(r) = w.iter().position(|v| v.is_nan()) {
        return Err(bad(format!("no weight for {}", RegionId::ALL[r])));
    }
    FusionWeights::new(w).map_err(|e| bad(e.to_string()))
}

/// Writes `bundle.tsv`, `weights.tsv` and one `.rfgm` per region.
pub fn save_bundle(dir: &Path, bundle: &Bundle) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = String::from("# regionfuse bundle v1\n");
    for m in &bundle.models {
        let file = format!("{}.rfgm", m.region.name());
        let path = dir.join(&file);
        save_model(&path, m).map_err(classify_err(format!("writing {}", path.display())))?;
        let _ = writeln!(manifest, "model\t{}\t{file}", m.region.name());
    }
    let _ = writeln!(manifest, "weights\t{WEIGHTS_FILE}");
    let path = dir.join(WEIGHTS_FILE);
    fs::write(&path, format_weights(&bundle.weights)).map_err(io_err(&path))?;
    let path = dir.join(BUNDLE_FILE);
    fs::write(&path, manifest).map_err(io_err(&path))?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<Bundle, PipelineError> {
    let path = dir.join(BUNDLE_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|_| PipelineError::BundleIncomplete(format!("{} not found", path.display())))?;
    let mut models: Vec<Option<LinearModel>> = vec![None; RegionId::COUNT];
    let mut weights = None;
    for line in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
        let fields: Vec<&str> = line.split('\t').collect();
        match fields.as_slice() {
            ["model", region, file] => {
                let region: RegionId = region.parse().map_err(PipelineError::BundleIncomplete)?;
                let p = dir.join(file);
                if !p.exists() {
                    return Err(PipelineError::BundleIncomplete(format!("{} not found", p.display())));
                }
                let m = load_model(&p).map_err(classify_err(format!("reading {}", p.display())))?;
                if m.region != region {
                    return Err(PipelineError::BundleIncomplete(format!(
                        "{} holds region {} not {region}",
                        p.display(),
                        m.region
                    )));
                }
                models[region.ordinal()] = Some(m);
            }
            ["weights", file] => {
                let p = dir.join(file);
                let t = fs::read_to_string(&p)
                    .map_err(|_| PipelineError::BundleIncomplete(format!("{} not found", p.display())))?;
                weights = Some(parse_weights(&t)?);
            }
            _ => return Err(PipelineError::BundleIncomplete(format!("bad bundle line `{line}`"))),
        }
    }
    let mut out = Vec::with_capacity(RegionId::COUNT);
    for (r, m) in models.into_iter().enumerate() {
        out.push(m.ok_or_else(|| PipelineError::BundleIncomplete(format!("no model for {}", RegionId::ALL[r])))?);
    }
    let grid = out[0].grid;
    if out.iter().any(|m| m.grid != grid || m.bins != out[0].bins) {
        return Err(PipelineError::BundleIncomplete("models disagree on grid or bins".into()));
    }
    Ok(Bundle {
        models: out,
        weights: weights.ok_or_else(|| PipelineError::BundleIncomplete("no weights entry".into()))?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: Label,
    pub p_male: f64,
    pub p_female: f64,
    pub regions: Vec<RegionScores>,
    pub failed_regions: Vec<RegionId>,
}

impl Prediction {
    pub fn line(&self) -> String {
        format!(
            "class={} p_male={:.6} p_female={:.6}",
            self.label.name(),
            self.p_male,
            self.p_female
        )
    }
}

pub fn predict_image(bundle: &Bundle, img: &GrayImage, lm: &LandmarkSet) -> Result<Prediction, PipelineError> {
    let m0 = &bundle.models[0];
    let descs = describe_regions(img, lm, m0.grid, m0.bins);
    let mut failed_regions = Vec::new();
    let mut regions = Vec::with_capacity(RegionId::COUNT);
    for (m, d) in bundle.models.iter().zip(descs) {
        match d {
            Ok(v) => regions.push(score_descriptor(m, &v).map_err(classify_err(format!("region {}", m.region)))?),
            Err(_) => {
                failed_regions.push(m.region);
                regions.push(RegionScores::neutral(m.region));
            }
        }
    }
    let lists: Vec<Vec<RegionScores>> = regions.iter().map(|s| vec![*s]).collect();
    let f = fuse(&lists, &bundle.weights).map_err(|source| PipelineError::Fusion { fold: 0, source })?[0];
    let (p_male, p_female) = f.normalized();
    Ok(Prediction {
        label: f.predicted(),
        p_male,
        p_female,
        regions,
        failed_regions,
    })
}

pub fn predict(bundle_dir: &Path, image: &Path, landmarks: &Path) -> Result<Prediction, PipelineError> {
    let bundle = load_bundle(bundle_dir)?;
    let img = load_gray_image(image)?;
    let lm = load_landmarks(landmarks)?;
    predict_image(&bundle, &img, &lm)
}

/// Runs [`evaluate`] and, when `cfg.out` is set, writes the report files,
/// per-fold bundles and a final bundle fitted on every sample.
pub fn train_eval(cfg: &RunConfig) -> Result<Evaluation, PipelineError> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let eval = evaluate(&data, cfg)?;
    if let Some(out) = &cfg.out {
        write_outputs(out, &data, cfg, &eval)?;
    }
    Ok(eval)
}

/// Writes report files, per-fold bundles and the final bundle into `out`.
pub fn write_outputs(out: &Path, data: &Dataset, cfg: &RunConfig, eval: &Evaluation) -> Result<(), PipelineError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let write = |name: &str, text: String| -> Result<(), PipelineError> {
        let p = out.join(name);
        fs::write(&p, text).map_err(io_err(&p))
    };
    write("report.txt", eval.report.to_text())?;
    write("report.tsv", eval.report.to_tsv())?;
    write("timing.tsv", eval.report.timing_table())?;
    write("seeds.tsv", Seeds { root: cfg.seed }.manifest(cfg.folds))?;
    let mut folds = String::from("sample_id\tfold\n");
    for (r, f) in data.records.iter().zip(eval.folds.assignments()) {
        let _ = writeln!(folds, "{}\t{f}", r.sample_id);
    }
    write("folds.tsv", folds)?;
    if cfg.mode != Mode::Fusion {
        return Ok(());
    }
    for (k, fit) in eval.fits.iter().enumerate() {
        let bundle = Bundle {
            models: fit.models.clone(),
            weights: eval.report.weights[k].clone(),
        };
        save_bundle(&out.join(format!("fold_{k}")), &bundle)?;
    }
    save_bundle(&out.join("model"), &fit_final(data, cfg)?)
}

/// Accuracy against grid size on one corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSweep {
    pub rows: Vec<(GridSpec, EvaluationReport)>,
}

impl GridSweep {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("grid\tfeatures_per_region\tfused_overall\tbest_region\tbest_region_overall\n");
        for (g, r) in &self.rows {
            let best = r.best_region();
            let fused = r.fused.as_ref().map_or(f64::NAN, |f| f.total.accuracy().overall);
            let _ = writeln!(
                s,
                "{g}\t{}\t{:.2}\t{}\t{:.2}",
                descriptor_len(*g, r.bins),
                fused,
                best.scope,
                best.total.accuracy().overall
            );
        }
        s
    }
}

pub fn grid_sweep(cfg: &RunConfig, grids: &[GridSpec]) -> Result<GridSweep, PipelineError> {
    cfg.validate()?;
    let records = corpus::load_manifest(&cfg.manifest)?;
    let base = cfg.manifest.parent().unwrap_or(Path::new("."));
    let mut rows = Vec::with_capacity(grids.len());
    for &g in grids {
        let data = build_dataset(records.clone(), base, g, cfg.bins)?;
        let run = RunConfig {
            grid: g,
            mode: Mode::Fusion,
            ..cfg.clone()
        };
        rows.push((g, evaluate(&data, &run)?.report));
    }
    Ok(GridSweep { rows })
}

/// Outcome of refitting each fold with the test labels scrambled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeakCheck {
    /// Per fold: models, selectors and weights bit-identical.
    pub identical: Vec<bool>,
}

impl LeakCheck {
    pub fn passed(&self) -> bool {
        self.identical.iter().all(|&b| b)
    }
}

/// Refits every fold with each test label flipped and compares model bytes
/// and fusion weights with the original fit.
pub fn leak_check(data: &Dataset, cfg: &RunConfig) -> Result<LeakCheck, PipelineError> {
    cfg.validate()?;
    let folds = corpus::stratified_folds(&data.labels, cfg.folds, Seeds { root: cfg.seed }.folds())?;
    let mut identical = Vec::with_capacity(folds.k());
    for fold in 0..folds.k() {
        let (train, test) = folds.train_test(fold);
        let mut scrambled = data.labels.clone();
        for &i in &test {
            scrambled[i] = scrambled[i].other();
        }
        let a = fit_fold(data, &data.labels, &train, cfg, fold)?;
        let b = fit_fold(data, &scrambled, &train, cfg, fold)?;
        let wa = learn_weights(&a.calib_scores, &labels_at(&data.labels, &a.calib_rows), cfg, fold)?;
        let wb = learn_weights(&b.calib_scores, &labels_at(&scrambled, &b.calib_rows), cfg, fold)?;
        let same_models = a
            .models
            .iter()
            .zip(&b.models)
            .all(|(x, y)| encode_model(x) == encode_model(y));
        let same_weights = wa
            .as_slice()
            .iter()
            .zip(wb.as_slice())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        identical.push(same_models && same_weights && a.calib_rows == b.calib_rows);
    }
    Ok(LeakCheck { identical })
}
