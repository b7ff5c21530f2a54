use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_regionfuse"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn text(o: &Output) -> (String, String) {
    (String::from_utf8_lossy(&o.stdout).into(), String::from_utf8_lossy(&o.stderr).into())
}

/// A small corpus plus one trained run, shared by the tests below.
struct Trained {
    dir: TempDir,
}

impl Trained {
    fn corpus(&self) -> PathBuf {
        self.dir.path().join("corpus")
    }
    fn manifest(&self) -> String {
        self.corpus().join("manifest.tsv").display().to_string()
    }
    fn out(&self) -> PathBuf {
        self.dir.path().join("run")
    }
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let t = Trained {
            dir: tempfile::tempdir().unwrap(),
        };
        let corpus = t.corpus().display().to_string();
        let o = run(&["synth", "--out", &corpus, "--n-per-class", "10", "--image-size", "96", "--seed", "5"]);
        assert!(o.status.success(), "{:?}", text(&o));
        let out = t.out().display().to_string();
        let o = run(&[
            "train-eval", "--manifest", &t.manifest(), "--grid", "2", "--ga-gens", "10", "--out", &out,
        ]);
        assert!(o.status.success(), "{:?}", text(&o));
        t
    })
}

fn sample(t: &Trained, id: &str) -> (String, String) {
    let c = t.corpus();
    let path = |ext: &str| c.join(format!("{id}.{ext}")).display().to_string();
    (path("pgm"), path("pts"))
}

#[test]
fn train_eval_writes_reports_and_bundles() {
    let t = trained();
    for name in ["report.txt", "report.tsv", "timing.tsv", "seeds.tsv", "folds.tsv", "model/bundle.tsv"] {
        assert!(t.out().join(name).is_file(), "{name} missing");
    }
    let report = std::fs::read_to_string(t.out().join("report.txt")).unwrap();
    assert!(report.contains("grid 2x2"));
    assert!(report.contains("fused"));
}

#[test]
fn predict_prints_one_line() {
    let t = trained();
    let (image, landmarks) = sample(t, "male_0001");
    let model = t.out().join("model").display().to_string();
    let o = run(&["predict", "--model", &model, "--image", &image, "--landmarks", &landmarks]);
    let (stdout, stderr) = text(&o);
    assert!(o.status.success(), "{stderr}");
    let line = stdout.trim();
    let parts: Vec<&str> = line.split(' ').collect();
    assert_eq!(parts.len(), 3, "{line}");
    assert!(parts[0] == "class=male" || parts[0] == "class=female");
    let pm: f64 = parts[1].strip_prefix("p_male=").unwrap().parse().unwrap();
    let pf: f64 = parts[2].strip_prefix("p_female=").unwrap().parse().unwrap();
    assert!((pm + pf - 1.0).abs() < 2e-6);
    assert_eq!(parts[1].split('.').nth(1).unwrap().len(), 6);
}

#[test]
fn missing_landmarks_exit_with_data_error() {
    let t = trained();
    let (image, _) = sample(t, "female_0000");
    let model = t.out().join("model").display().to_string();
    let o = run(&["predict", "--model", &model, "--image", &image, "--landmarks", "/nonexistent/lm.txt"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(text(&o).1.contains("missing file"), "{}", text(&o).1);
}

#[test]
fn bad_usage_exits_with_two() {
    assert_eq!(run(&["train-eval"]).status.code(), Some(2));
    assert_eq!(run(&["train-eval", "--manifest", "m.tsv", "--grid", "5"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(
        run(&["train-eval", "--manifest", "m.tsv", "--ga-mutation", "1.5"]).status.code(),
        Some(2)
    );
}

#[test]
fn missing_manifest_is_a_data_error() {
    let o = run(&["train-eval", "--manifest", "/nonexistent/manifest.tsv"]);
    assert_eq!(o.status.code(), Some(3));
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, body).unwrap();
    p.display().to_string()
}

#[test]
fn config_file_fills_in_and_flags_override() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("manifest = {:?}\ngrid = 3\nga-gens = 5\nfolds = 3\nmode = \"per-region\"\n", t.manifest()),
    );
    let o = run(&["train-eval", "--config", &cfg, "--grid", "2"]);
    let (stdout, stderr) = text(&o);
    assert!(o.status.success(), "{stderr}");
    assert!(stdout.contains("grid 2x2"), "{stdout}");
    assert!(stdout.contains("folds 3"), "{stdout}");
    assert!(stdout.contains("mode per-region"), "{stdout}");

    let bad = write_config(dir.path(), "gird = 3\n");
    assert_eq!(run(&["train-eval", "--config", &bad]).status.code(), Some(2));
}

#[test]
fn timing_prints_three_stages() {
    let t = trained();
    let o = run(&["timing", "--manifest", &t.manifest(), "--grid", "2", "--ga-gens", "5", "--mode", "per-region"]);
    let (stdout, stderr) = text(&o);
    assert!(o.status.success(), "{stderr}");
    let rows: Vec<&str> = stdout.lines().collect();
    assert_eq!(rows[0], "stage\tms");
    let stages: Vec<&str> = rows[1..].iter().map(|r| r.split('\t').next().unwrap()).collect();
    assert_eq!(stages, ["feature_extraction_per_image", "training_per_fold", "testing_per_image"]);
    for r in &rows[1..] {
        let ms: f64 = r.split('\t').nth(1).unwrap().parse().unwrap();
        assert!(ms >= 0.0);
    }
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut trees = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = run(&["synth", "--out", out.to_str().unwrap(), "--n-per-class", "2", "--image-size", "64"]);
        assert!(o.status.success());
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&out)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
            })
            .collect();
        files.sort();
        trees.push(files);
    }
    assert_eq!(trees[0], trees[1]);
    assert_eq!(trees[0].iter().filter(|(n, _)| n.ends_with(".pts")).count(), 4);
}
