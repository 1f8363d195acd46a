//! Run configuration: one TOML document covering data, model, training and
//! evaluation, with every key optional.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::SyntheticConfig;
use crate::detector::DetectorConfig;
use crate::engine::{EngineConfig, Mitigation, TaskSchedule};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed. Data generation, initialization, shuffling, augmentation
    /// and proposal ranking all take their seed from it.
    pub seed: u64,
    /// Default output directory; not part of the config hash.
    pub output_dir: Option<PathBuf>,
    pub data: SyntheticConfig,
    pub detector: DetectorConfig,
    pub engine: EngineConfig,
    pub mitigation: Mitigation,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Malformed {
            path: origin.to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPrerequisite(path.to_path_buf()));
        }
        Self::from_toml_str(&fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Copy with the master seed propagated into every component seed.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        c.data.seed = c.seed;
        c.detector.init_seed = c.seed;
        c.engine.seed = c.seed;
        c.engine.selective_search.seed = c.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.detector.validate()?;
        if self.data.image_size as usize != self.detector.image_size {
            return Err(Error::InvalidArgument(format!(
                "data.image_size {} differs from detector.image_size {}",
                self.data.image_size, self.detector.image_size
            )));
        }
        self.engine.validate(self.detector.n_queries)?;
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<TaskSchedule> {
        TaskSchedule::new(self.data.groups.clone())
    }

    /// SHA-256 over the canonical JSON form of the resolved config, without
    /// the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.resolved();
        c.output_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(RunConfig::from_toml_str("", "-").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_tables_keep_other_defaults() {
        let c = RunConfig::from_toml_str("seed = 3\n[engine.pseudo]\nk = 2\n", "-").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.engine.pseudo.k, 2);
        assert_eq!(c.engine.pseudo.k_ss, 5);
        assert_eq!(c.engine.owl_epochs, 5);
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let err = RunConfig::from_toml_str("[engine]\nepochs = 3\n", "cfg.toml").unwrap_err();
        let Error::Malformed { path, message } = err else { panic!("{err:?}") };
        assert_eq!(path, "cfg.toml");
        assert!(message.contains("line 2"), "{message}");
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.engine.loss.con = 0.5;
        c.mitigation.replay = false;
        assert_eq!(RunConfig::from_toml_str(&c.to_toml(), "-").unwrap(), c);
    }

    #[test]
    fn hash_tracks_content_not_output_dir() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output_dir = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.engine.pseudo.delta = 0.6;
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn seed_reaches_every_component() {
        let c = RunConfig {
            seed: 9,
            ..RunConfig::default()
        }
        .resolved();
        assert_eq!(
            (c.data.seed, c.detector.init_seed, c.engine.seed, c.engine.selective_search.seed),
            (9, 9, 9, 9)
        );
    }

    #[test]
    fn mismatched_image_sizes_are_rejected() {
        let mut c = RunConfig::default();
        c.detector.image_size = 32;
        assert!(c.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }
}
