use std::path::PathBuf;
use std::sync::OnceLock;

use ndarray::Axis;
use regionfuse::classify::{calibration_split, fit_block, predict_pair, platt_probability, BlockConfig, Confusion};
use regionfuse::corpus::{generate_synthetic_corpus, load_gray_image, stratified_folds, SynthConfig};
use regionfuse::fusion::concat_baseline;
use regionfuse::pipeline::{self, Dataset, Mode, RunConfig, Seeds};
use regionfuse::regions::load_landmarks;
use regionfuse::selection::keep_count;
use regionfuse::{seed, GridSpec, Label, RegionId};
use tempfile::TempDir;

struct Fixture {
    _dir: TempDir,
    manifest: PathBuf,
    data: Dataset,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let synth = SynthConfig {
            n_per_class: 20,
            image_size: 112,
            seed: 3,
            flip_prob: 0.2,
        };
        generate_synthetic_corpus(&synth, dir.path()).unwrap();
        let manifest = dir.path().join("manifest.tsv");
        let data = pipeline::load_dataset(&config(&manifest)).unwrap();
        Fixture {
            _dir: dir,
            manifest,
            data,
        }
    })
}

fn config(manifest: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::new(manifest);
    cfg.grid = GridSpec::new(2).unwrap();
    cfg.ga.generations = 30;
    cfg
}

#[test]
fn keep_fraction_sweep() {
    let f = fixture();
    for keep in [0.1, 0.2, 0.5] {
        let mut cfg = config(&f.manifest);
        cfg.ifs.keep_fraction = keep;
        let eval = pipeline::evaluate(&f.data, &cfg).unwrap();
        let width = f.data.features[0].ncols();
        for fit in &eval.fits {
            for m in &fit.models {
                assert_eq!(m.selected.len(), keep_count(width, keep));
            }
        }
        let fused = eval.report.fused.as_ref().unwrap();
        assert_eq!(fused.total.total(), f.data.len());
        assert!(fused.total.accuracy().overall > 60.0, "keep {keep}: {}", eval.report.to_text());
    }
}

#[test]
fn bundle_round_trip_and_prediction() {
    let f = fixture();
    let cfg = config(&f.manifest);
    let bundle = pipeline::fit_final(&f.data, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    pipeline::save_bundle(dir.path(), &bundle).unwrap();
    assert_eq!(pipeline::load_bundle(dir.path()).unwrap(), bundle);

    let base = f.manifest.parent().unwrap();
    let mut right = 0;
    for rec in &f.data.records {
        let (img_path, lm_path) = rec.resolved(base);
        let p = pipeline::predict(dir.path(), &img_path, &lm_path).unwrap();
        let img = load_gray_image(&img_path).unwrap();
        let lm = load_landmarks(&lm_path).unwrap();
        assert_eq!(pipeline::predict_image(&bundle, &img, &lm).unwrap(), p);
        assert!((p.p_male + p.p_female - 1.0).abs() < 1e-12);
        assert!(p.line().starts_with(&format!("class={} p_male=", p.label.name())));
        right += usize::from(p.label == rec.label);
    }
    // Training images should be almost all remembered.
    assert!(right * 10 >= f.data.len() * 9, "{right} of {}", f.data.len());
}

#[test]
fn regions_outside_the_image_fall_back_to_neutral() {
    let f = fixture();
    let bundle = pipeline::fit_final(&f.data, &config(&f.manifest)).unwrap();
    let (img_path, lm_path) = f.data.records[0].resolved(f.manifest.parent().unwrap());
    let img = load_gray_image(&img_path).unwrap();
    let lm = load_landmarks(&lm_path).unwrap().translated(-60.0, 0.0);
    let p = pipeline::predict_image(&bundle, &img, &lm).unwrap();
    assert!(!p.failed_regions.is_empty());
    for r in &p.failed_regions {
        let s = p.regions[r.ordinal()];
        assert_eq!((s.p_male, s.p_female), (0.5, 0.5));
    }
}

#[test]
fn concat_of_one_region_is_the_plain_block() {
    let f = fixture();
    let cfg = config(&f.manifest);
    let labels = &f.data.labels;
    let folds = stratified_folds(labels, cfg.folds, 99).unwrap();
    let block = BlockConfig::default();
    let region = RegionId::Lip.ordinal();
    let split = |fold: usize, train: &[usize]| calibration_split(train, labels, 0.2, fold as u64);
    let single = concat_baseline(&f.data.features[region..=region], labels, &folds, &block, 5, split).unwrap();

    let x = &f.data.features[region];
    let mut manual = Confusion::default();
    for fold in 0..folds.k() {
        let (train, test) = folds.train_test(fold);
        let (fit_rows, calib_rows) = split(fold, &train).unwrap();
        let fb = fit_block(x.view(), labels, &fit_rows, &calib_rows, &block, seed::derive_indexed(5, "concat-svm", fold as u64))
            .unwrap();
        let xt = fb.selector.transform(x.select(Axis(0), &test).view()).unwrap();
        let predicted: Vec<Label> = xt
            .rows()
            .into_iter()
            .map(|row| {
                let p = platt_probability(fb.platt_a, fb.platt_b, fb.plane.decision(row));
                predict_pair(p, 1.0 - p)
            })
            .collect();
        let truth: Vec<Label> = test.iter().map(|&i| labels[i]).collect();
        manual.add(&Confusion::from_predictions(&predicted, &truth).unwrap());
    }
    assert_eq!(single.confusion, manual);
    assert_eq!(single.width, x.ncols());

    let pair = concat_baseline(&f.data.features[..2], labels, &folds, &block, 5, split).unwrap();
    assert_eq!(pair.width, f.data.features[0].ncols() + f.data.features[1].ncols());
}

#[test]
fn modes_shape_the_report() {
    let f = fixture();
    let mut cfg = config(&f.manifest);
    cfg.mode = Mode::PerRegion;
    let r = pipeline::evaluate(&f.data, &cfg).unwrap().report;
    assert!(r.fused.is_none() && r.concat.is_none() && r.weights.is_empty());
    assert_eq!(r.regions.len(), RegionId::COUNT);

    cfg.mode = Mode::Concat;
    let r = pipeline::evaluate(&f.data, &cfg).unwrap().report;
    assert_eq!(r.concat.as_ref().unwrap().total.total(), f.data.len());
    assert!(r.to_tsv().contains("accuracy_overall\tconcat\t"));

    cfg.mode = Mode::Fusion;
    cfg.global_weights = true;
    let r = pipeline::evaluate(&f.data, &cfg).unwrap().report;
    assert!(r.weights.windows(2).all(|w| w[0] == w[1]));
    assert!(r.to_text().contains("weights global"));
}

#[test]
fn outputs_and_seed_manifest() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let mut cfg = config(&f.manifest);
    cfg.out = Some(out.path().to_path_buf());
    let eval = pipeline::evaluate(&f.data, &cfg).unwrap();
    pipeline::write_outputs(out.path(), &f.data, &cfg, &eval).unwrap();
    for name in ["report.txt", "report.tsv", "timing.tsv", "seeds.tsv", "folds.tsv", "model/weights.tsv"] {
        assert!(out.path().join(name).is_file(), "{name} missing");
    }
    for k in 0..cfg.folds {
        assert!(out.path().join(format!("fold_{k}")).is_dir());
    }
    let seeds = std::fs::read_to_string(out.path().join("seeds.tsv")).unwrap();
    assert_eq!(seeds, Seeds { root: cfg.seed }.manifest(cfg.folds));
    let folds = std::fs::read_to_string(out.path().join("folds.tsv")).unwrap();
    assert_eq!(folds.lines().count(), f.data.len() + 1);

    let weights = std::fs::read_to_string(out.path().join("model/weights.tsv")).unwrap();
    let parsed = pipeline::parse_weights(&weights).unwrap();
    assert_eq!(pipeline::format_weights(&parsed), weights);
}

#[test]
fn leak_check_passes_on_a_small_corpus() {
    let f = fixture();
    assert!(pipeline::leak_check(&f.data, &config(&f.manifest)).unwrap().passed());
}

#[test]
fn different_seeds_change_the_split() {
    let f = fixture();
    let a = stratified_folds(&f.data.labels, 5, Seeds { root: 1 }.folds()).unwrap();
    let b = stratified_folds(&f.data.labels, 5, Seeds { root: 2 }.folds()).unwrap();
    assert_ne!(a, b);
}
