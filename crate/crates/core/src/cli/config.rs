use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{DatasetFormat, SynthSpec};
use crate::lexicon::DictionaryConfig;
use crate::pipeline::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    /// Guessed from the extension when absent.
    pub format: Option<DatasetFormat>,
    pub dev_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    pub k: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { k: 5 }
    }
}

/// The declarative run configuration. Relative paths in a config file are
/// resolved against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub lexicon: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub jobs: Option<usize>,
    pub data: DataConfig,
    pub dictionary: DictionaryConfig,
    pub train: TrainConfig,
    pub cv: CvConfig,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lexicon: None,
            embeddings: None,
            output_dir: PathBuf::from("kesdt-out"),
            jobs: None,
            data: DataConfig::default(),
            dictionary: DictionaryConfig::default(),
            train: TrainConfig::default(),
            cv: CvConfig::default(),
            synth: SynthSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            cfg.resolve_relative_to(base);
        }
        Ok(cfg)
    }

    fn resolve_relative_to(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            self.lexicon.as_mut(),
            self.embeddings.as_mut(),
            self.data.path.as_mut(),
            self.data.dev_path.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(format!("config serialization: {e}")))
    }

    /// Range checks on every section.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.dictionary.validate()?;
        self.synth.validate()?;
        if self.cv.k < 2 {
            return Err(Error::Config(format!("cv.k must be at least 2, got {}", self.cv.k)));
        }
        if self.jobs == Some(0) {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        Ok(())
    }

    /// Every configured input path must exist.
    pub fn check_paths(&self) -> Result<()> {
        for p in [&self.lexicon, &self.embeddings, &self.data.path, &self.data.dev_path]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(Error::Config(format!("{}: file does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn data_format(&self, path: &Path) -> DatasetFormat {
        self.data.format.unwrap_or_else(|| DatasetFormat::from_path(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[train]\nlearning_rat = 0.1").is_err());
        assert!(RunConfig::from_toml("[train.encoder]\nd_model = 8\nwidth = 2").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.lexicon = Some("lex.txt".into());
        cfg.train.epochs = 3;
        cfg.train.encoder.d_model = 32;
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn stopwords_survive_deserialization() {
        let cfg = RunConfig::from_toml("[dictionary]\nmin_word_length = 4").unwrap();
        assert_eq!(cfg.dictionary.min_word_length, 4);
        assert!(cfg.dictionary.stopwords.contains("the"));
    }

    #[test]
    fn range_checks() {
        let bad = RunConfig::from_toml("[train]\nepochs = 0").unwrap();
        assert!(bad.validate().is_err());
        let bad = RunConfig::from_toml("[cv]\nk = 1").unwrap();
        assert!(bad.validate().is_err());
        let bad = RunConfig::from_toml("[train]\nlearning_rate = -1.0").unwrap();
        assert!(bad.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn relative_paths_follow_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "lexicon = \"lex.txt\"\n[data]\npath = \"/abs/data.jsonl\"\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.lexicon.unwrap(), dir.path().join("lex.txt"));
        assert_eq!(cfg.data.path.unwrap(), PathBuf::from("/abs/data.jsonl"));
        assert!(cfg.output_dir.starts_with(dir.path()));
    }
}
