//! One declarative TOML document covering every tunable in the toolkit.
//!
//! The top-level `seed`, `scale` and `kernel` govern the whole run; the
//! copies embedded in the `[train]` section are overwritten from them at
//! load time so a document can never describe two different runs at once.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::{FrlConfig, GanDiscConfig};
use crate::nmd::{NmdConfig, NmdTrainConfig};
use crate::resample::{KernelKind, ResamplerSpec};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scale: usize,
    pub kernel: KernelKind,
    pub nmd: NmdConfig,
    pub nmd_train: NmdTrainConfig,
    pub generator: FrlConfig,
    pub gan: GanDiscConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            seed: 0,
            scale: 4,
            kernel: KernelKind::Bicubic,
            nmd: NmdConfig::desk(),
            nmd_train: NmdTrainConfig::default(),
            generator: FrlConfig::desk(),
            gan: GanDiscConfig::desk(),
            train: TrainConfig::default(),
            weights: LossWeights::natsr(),
        }
    }
}

impl RunConfig {
    /// Copies the governing top-level fields into the train section.
    fn normalize(&mut self) {
        self.train.seed = self.seed;
        self.train.scale = self.scale;
        self.train.kernel = self.kernel;
    }

    pub fn validate(&self) -> Result<()> {
        self.spec()?;
        self.nmd.validate()?;
        self.nmd_train.validate()?;
        self.generator.validate()?;
        self.gan.validate()?;
        self.train.validate()?;
        self.weights.validate()?;
        Ok(())
    }

    pub fn spec(&self) -> Result<ResamplerSpec> {
        ResamplerSpec::new(self.scale, self.kernel)
    }

    /// CLI `--seed` override; keeps the embedded copies in sync.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    /// CLI `--threads` override for every module that parallelizes.
    pub fn override_threads(&mut self, threads: usize) {
        self.train.threads = threads;
        self.nmd_train.threads = threads;
    }

    /// Serialized form; parsing it back reproduces this config exactly.
    pub fn echo(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization cannot fail")
    }
}

/// Parses, normalizes and validates a config document. An empty document
/// yields the desk-scale defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg: RunConfig =
        toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
    cfg.normalize();
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &std::path::Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::ConfigParse(format!("{}: {}", path.display(), e)))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_desk_preset() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.nmd.widths, vec![8, 16, 32]);
        assert_eq!(cfg.generator.features, 32);
        assert_eq!(cfg.train.lr_patch, 12);
    }

    #[test]
    fn scale_five_names_the_constraint() {
        let err = parse_config("scale = 5").unwrap_err().to_string();
        assert!(err.contains("scale must be 2 or 4"), "got: {err}");
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = parse_config("frobnicate = 1").unwrap_err().to_string();
        assert!(err.contains("frobnicate"), "got: {err}");
        let err = parse_config("[train]\nwarmth = 2").unwrap_err().to_string();
        assert!(err.contains("warmth"), "got: {err}");
    }

    #[test]
    fn out_of_range_section_values_fail_validation() {
        assert!(parse_config("[train]\nhalve_at = 3.0").is_err());
        assert!(parse_config("[weights]\nlambda1 = -1.0").is_err());
        assert!(parse_config("[nmd]\nwidths = []").is_err());
    }

    #[test]
    fn top_level_fields_govern_the_train_section() {
        let cfg = parse_config("scale = 2\nseed = 9\n[train]\nscale = 4\nseed = 3").unwrap();
        assert_eq!(cfg.train.scale, 2);
        assert_eq!(cfg.train.seed, 9);
    }

    #[test]
    fn echo_round_trips_a_modified_config() {
        let mut cfg = RunConfig::default();
        cfg.seed = 1234;
        cfg.scale = 2;
        cfg.train.lr_patch = 8;
        cfg.train.lr = 5e-4;
        cfg.weights.lambda2 = 0.25;
        cfg.normalize();
        cfg.validate().unwrap();
        let reparsed = parse_config(&cfg.echo()).unwrap();
        assert_eq!(reparsed, cfg);
    }

    #[test]
    fn kernel_names_parse_in_lowercase() {
        assert_eq!(parse_config("kernel = \"ideal\"").unwrap().kernel, KernelKind::Ideal);
        assert_eq!(parse_config("kernel = \"bicubic\"").unwrap().kernel, KernelKind::Bicubic);
        assert!(parse_config("kernel = \"Bicubic\"").is_err());
    }

    #[test]
    fn shipped_presets_parse_and_validate() {
        let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
        let paper = load_config(&root.join("configs/paper.toml")).unwrap();
        assert_eq!(paper.scale, 4);
        assert_eq!(paper.train.lr_patch, 48);
        assert_eq!(paper.train.lr, 2e-4);
        assert_eq!(paper.weights, LossWeights::natsr());
        assert_eq!(paper.nmd, NmdConfig::default());
        assert_eq!(paper.generator, FrlConfig::default());
        let desk = load_config(&root.join("configs/desk.toml")).unwrap();
        desk.validate().unwrap();
    }
}
