use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::concepts::{ConceptTable, Mixture};
use crate::diffusion::{BaseTrainConfig, NoiseSchedule, DEFAULT_X0_CLIP};
use crate::doco::UnlearnConfig;
use crate::error::{Error, Result};

/// Replaces the generating distribution of one concept with an isotropic Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptOverride {
    pub id: String,
    pub mean: [f64; 2],
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConceptsSection {
    /// Seed for the concept embeddings.
    pub seed: u64,
    pub overrides: Vec<ConceptOverride>,
}

impl Default for ConceptsSection {
    fn default() -> Self {
        Self {
            seed: 7,
            overrides: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    pub timesteps: usize,
    pub x0_clip: Option<f64>,
    pub train: BaseTrainConfig,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            timesteps: 100,
            x0_clip: Some(DEFAULT_X0_CLIP),
            train: BaseTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Samples per condition.
    pub n: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { n: 4000, seed: 3 }
    }
}

/// One experiment. Every field has a default, so `{}` (or an empty file) describes the
/// canonical run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub concepts: ConceptsSection,
    pub diffusion: DiffusionSection,
    pub unlearn: UnlearnConfig,
    pub eval: EvalSection,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            concepts: ConceptsSection::default(),
            diffusion: DiffusionSection::default(),
            unlearn: UnlearnConfig::default(),
            eval: EvalSection::default(),
            output: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// Parses a JSON document. Whitespace-only input is the empty config.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Ok(Self::default());
        }
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::Config(format!("config file {} not found", path.display()))
            }
            _ => Error::io(path, e),
        })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn table(&self) -> Result<ConceptTable> {
        let mut table = ConceptTable::default_table(self.concepts.seed);
        for o in &self.concepts.overrides {
            let c = table
                .concepts
                .iter_mut()
                .find(|c| c.id == o.id)
                .ok_or_else(|| {
                    Error::Config(format!("concepts.overrides: unknown concept id `{}`", o.id))
                })?;
            c.gen = Mixture::isotropic(o.mean, o.sigma);
        }
        table.validate()?;
        Ok(table)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.diffusion.timesteps)?.with_x0_clip(self.diffusion.x0_clip)
    }

    /// Checks every section against the resolved table.
    pub fn validate(&self) -> Result<ConceptTable> {
        let table = self.table()?;
        self.schedule()?;
        self.unlearn.validate(&table)?;
        if self.eval.n < 3 {
            return Err(Error::Config(format!(
                "eval.n must be at least 3, got {}",
                self.eval.n
            )));
        }
        if self.diffusion.train.batch == 0 {
            return Err(Error::Config(
                "diffusion.train.batch must be positive".into(),
            ));
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_documents_are_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::parse(" \n").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::parse("{}").unwrap(), RunConfig::default());
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn round_trips_through_json() {
        let mut c = RunConfig::default();
        c.unlearn.lambda = 0.25;
        c.eval.n = 17;
        assert_eq!(RunConfig::parse(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_fields_cite_the_location() {
        let err = RunConfig::parse("{\n  \"eval\": {\"n\": 10, \"bogus\": 1}\n}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("bogus"), "{msg}");
    }

    #[test]
    fn overrides_must_name_existing_concepts() {
        let c = RunConfig::parse(
            r#"{"concepts": {"overrides": [{"id": "nope", "mean": [0, 0], "sigma": 1}]}}"#,
        )
        .unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = RunConfig::parse(
            r#"{"concepts": {"overrides": [{"id": "east", "mean": [3, -3], "sigma": 0.2}]}}"#,
        )
        .unwrap();
        let t = c.validate().unwrap();
        assert_eq!(t.get("east").unwrap().gen.components[0].mean, [3.0, -3.0]);
    }

    #[test]
    fn retain_ids_are_checked() {
        let c = RunConfig::parse(r#"{"unlearn": {"retain": ["blob", "ghost"]}}"#).unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
