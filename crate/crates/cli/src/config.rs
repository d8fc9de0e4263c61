//! JSON run configurations. Every field has a default; unknown fields are
//! rejected with their path.

use std::path::Path;

use priorseg::contrastive::ContrastiveConfig;
use priorseg::fewshot::EpisodeConfig;
use priorseg::patch::{FelzParams, SlicParams};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub classes: usize,
    pub size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { count: 1000, classes: 8, size: 64 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchesConfig {
    pub slic: SlicParams,
    pub felz: FelzParams,
}

/// Episode training, map dumps and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeRunConfig {
    pub folds: usize,
    pub fold: usize,
    /// Episodes dumped by `maps`.
    pub map_episodes: usize,
    pub episode: EpisodeConfig,
}

impl Default for EpisodeRunConfig {
    fn default() -> Self {
        Self { folds: 4, fold: 0, map_episodes: 4, episode: EpisodeConfig::default() }
    }
}

impl EpisodeRunConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.fold >= self.folds {
            return Err(CliError::Usage(format!("invalid config field `fold`: {} is not below folds={}", self.fold, self.folds)));
        }
        self.episode.validate().map_err(|e| CliError::Usage(format!("invalid config field `episode`: {e}")))
    }
}

pub fn validate_pretrain(c: &ContrastiveConfig) -> CliResult<()> {
    c.validate().map_err(|e| CliError::Usage(format!("invalid config: {e}")))
}

/// Reads `path` (or returns defaults when absent), reporting the field path
/// of the first error.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        CliError::Usage(format!("config error in {} at `{field}`: {}", path.display(), e.inner()))
    })
}

pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("config serialises");
    out.push(b'\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_json() {
        let c = EpisodeRunConfig { fold: 2, ..Default::default() };
        let back: EpisodeRunConfig = serde_json::from_slice(&to_json(&c)).unwrap();
        assert_eq!(back, c);
        let p = ContrastiveConfig { epochs: 3, ..Default::default() };
        assert_eq!(serde_json::from_slice::<ContrastiveConfig>(&to_json(&p)).unwrap(), p);
    }

    #[test]
    fn errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"episode": {"lr": "fast"}}"#).unwrap();
        let err = load::<EpisodeRunConfig>(Some(&path)).unwrap_err();
        assert!(err.to_string().contains("episode.lr"), "{err}");
        std::fs::write(&path, r#"{"tau": 0.1, "bogus": 1}"#).unwrap();
        let err = load::<ContrastiveConfig>(Some(&path)).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }
}
