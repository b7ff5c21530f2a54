//! Run options from flags and an optional TOML file. Flags win over the
//! file, the file wins over built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use regionfuse::pipeline::{Mode, RunConfig};
use regionfuse::texture::LbpBins;
use regionfuse::GridSpec;
use serde::Deserialize;

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Tab-separated manifest: sample_id, image, landmarks, label.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// TOML file with any of the options below (flags override it).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Cells per side of the descriptor grid.
    #[arg(long, value_parser = clap::value_parser!(u8).range(2..=4))]
    pub grid: Option<u8>,
    #[arg(long)]
    pub keep_fraction: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub r_factor: Option<f64>,
    #[arg(long)]
    pub svm_c: Option<f64>,
    #[arg(long)]
    pub ga_pop: Option<usize>,
    #[arg(long)]
    pub ga_gens: Option<usize>,
    #[arg(long)]
    pub ga_crossover: Option<f64>,
    #[arg(long)]
    pub ga_mutation: Option<f64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// fusion, concat or per-region.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Output directory for reports and model bundles.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Learn one weight vector across folds instead of one per fold.
    #[arg(long)]
    pub global_weights: bool,
    /// Use all 256 LBP codes instead of the 59 uniform bins.
    #[arg(long)]
    pub full_lbp: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct FileConfig {
    pub manifest: Option<PathBuf>,
    pub grid: Option<u8>,
    pub keep_fraction: Option<f64>,
    pub alpha: Option<f64>,
    pub r_factor: Option<f64>,
    pub svm_c: Option<f64>,
    pub ga_pop: Option<usize>,
    pub ga_gens: Option<usize>,
    pub ga_crossover: Option<f64>,
    pub ga_mutation: Option<f64>,
    pub folds: Option<usize>,
    pub seed: Option<u64>,
    pub mode: Option<String>,
    pub out: Option<PathBuf>,
    pub global_weights: Option<bool>,
    pub full_lbp: Option<bool>,
}

pub fn read_file_config(path: &Path) -> Result<FileConfig, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig, String> {
        let file = match &self.config {
            Some(p) => read_file_config(p)?,
            None => FileConfig::default(),
        };
        self.merge(&file)
    }

    pub fn merge(&self, file: &FileConfig) -> Result<RunConfig, String> {
        let manifest = self
            .manifest
            .clone()
            .or_else(|| file.manifest.clone())
            .ok_or("--manifest is required (flag or config file)")?;
        let mut cfg = RunConfig::new(manifest);
        macro_rules! pick {
            ($field:ident) => {
                self.$field.or(file.$field)
            };
        }
        if let Some(g) = pick!(grid) {
            cfg.grid = GridSpec::new(g as usize).map_err(|e| e.to_string())?;
        }
        if let Some(v) = pick!(keep_fraction) {
            cfg.ifs.keep_fraction = v;
        }
        if let Some(v) = pick!(alpha) {
            cfg.ifs.alpha = v;
        }
        if let Some(v) = pick!(r_factor) {
            cfg.ifs.r_factor = v;
        }
        if let Some(v) = pick!(svm_c) {
            cfg.svm_c = v;
        }
        if let Some(v) = pick!(ga_pop) {
            cfg.ga.population_size = v;
        }
        if let Some(v) = pick!(ga_gens) {
            cfg.ga.generations = v;
        }
        if let Some(v) = pick!(ga_crossover) {
            cfg.ga.crossover_prob = v;
        }
        if let Some(v) = pick!(ga_mutation) {
            cfg.ga.mutation_prob = v;
        }
        if let Some(v) = pick!(folds) {
            cfg.folds = v;
        }
        if let Some(v) = pick!(seed) {
            cfg.seed = v;
        }
        cfg.mode = match (self.mode, &file.mode) {
            (Some(m), _) => m,
            (None, Some(s)) => s.parse()?,
            (None, None) => Mode::Fusion,
        };
        cfg.out = self.out.clone().or_else(|| file.out.clone());
        cfg.global_weights = self.global_weights || file.global_weights.unwrap_or(false);
        if self.full_lbp || file.full_lbp.unwrap_or(false) {
            cfg.bins = LbpBins::Full;
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file: FileConfig = toml::from_str("manifest = \"a.tsv\"\ngrid = 3\nsvm-c = 2.0\nseed = 11\n").unwrap();
        let args = RunArgs {
            grid: Some(2),
            ..RunArgs::default()
        };
        let cfg = args.merge(&file).unwrap();
        assert_eq!(cfg.grid.n(), 2);
        assert_eq!(cfg.svm_c, 2.0);
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.folds, 5);
        assert_eq!(cfg.ga.crossover_prob, 0.8);
        assert_eq!(cfg.manifest, PathBuf::from("a.tsv"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("gird = 3\n").is_err());
    }

    #[test]
    fn manifest_is_required() {
        assert!(RunArgs::default().merge(&FileConfig::default()).is_err());
    }

    #[test]
    fn out_of_range_values_fail_validation() {
        let args = RunArgs {
            manifest: Some("m.tsv".into()),
            ga_mutation: Some(2.0),
            ..RunArgs::default()
        };
        assert!(args.merge(&FileConfig::default()).is_err());
    }
}
