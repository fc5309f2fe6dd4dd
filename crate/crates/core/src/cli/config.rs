use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::objective::ObjectiveConfig;
use crate::training::{OptimConfig, Stage, StageConfig, SynthConfig, TrainSetup};
use crate::views::ViewConfig;

pub const SEED_ENV: &str = "MMV_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Generator seed for synthetic datasets.
    pub seed: u64,
    pub n_2d: usize,
    pub n_3d: usize,
    /// Trailing fraction of each modality held out for probe evaluation.
    pub test_fraction: f64,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 7,
            n_2d: 400,
            n_3d: 400,
            test_fraction: 0.375,
            synth: SynthConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!("data.test_fraction {} not in [0, 1)", self.test_fraction)));
        }
        self.synth.validate()
    }

    /// Number of leading samples of a modality assigned to the train split.
    pub fn train_count(&self, n: usize) -> usize {
        n - (n as f64 * self.test_fraction).floor() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_boot: usize,
    /// Reference samples per modality pooled to fit patch PCA maps.
    pub pca_reference: usize,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_boot: 1000,
            pca_reference: 8,
            probe: ProbeConfig::default(),
        }
    }
}

/// The whole configuration of a run. Every field has a default; unknown keys
/// are rejected with their full path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub views: ViewConfig,
    pub objective: ObjectiveConfig,
    pub stage: StageConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            encoder: EncoderConfig::default(),
            views: ViewConfig::default(),
            objective: ObjectiveConfig::default(),
            stage: StageConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Key paths present in `doc` but absent from `schema`.
fn unknown_keys(doc: &toml::Table, schema: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in doc {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, schema.get(k)) {
            (_, None) => out.push(path),
            (toml::Value::Table(d), Some(toml::Value::Table(s))) => unknown_keys(d, s, &path, out),
            _ => {}
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        let schema = toml::Table::try_from(RunConfig::default()).expect("default config serializes");
        let mut unknown = Vec::new();
        unknown_keys(&doc, &schema, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config key(s): {}", unknown.join(", "))));
        }
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("config error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                RunConfig::from_toml(&text)
            }
        }
    }

    /// Applies a `MMV_SEED` override; returns the seed when one was applied.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<Option<u64>> {
        let Some(v) = value else {
            return Ok(None);
        };
        let seed = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        self.seed = seed;
        Ok(Some(seed))
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate().map_err(as_config)?;
        self.views.validate().map_err(as_config)?;
        self.objective.validate()?;
        self.stage.validate()?;
        self.optim.validate()?;
        self.data.validate()?;
        self.eval.probe.validate()?;
        if self.eval.n_boot == 0 {
            return Err(Error::Config("eval.n_boot must be at least 1".into()));
        }
        Ok(())
    }

    /// The fully defaulted config as TOML; echoed into every artifact.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// This config with `stage` applied (initialization and batch mix
    /// follow the stage).
    pub fn with_stage(&self, stage: Stage) -> Self {
        RunConfig {
            stage: self.stage.for_stage(stage),
            ..self.clone()
        }
    }

    pub fn train_setup(&self) -> TrainSetup {
        TrainSetup {
            seed: self.seed,
            encoder: self.encoder.clone(),
            views: self.views.clone(),
            objective: self.objective.clone(),
            optim: self.optim.clone(),
            stage: self.stage.clone(),
            config_echo: self.resolved(),
        }
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Config(m),
        e => e,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.resolved()).unwrap(), c);
        assert_eq!(RunConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn unknown_keys_named_with_path() {
        let e = RunConfig::from_toml("[objective]\nlamda = 0.1\n").unwrap_err().to_string();
        assert!(e.contains("objective.lamda"), "{e}");
        let e = RunConfig::from_toml("sed = 3\n[data.synth]\nnoize = 1\n").unwrap_err().to_string();
        assert!(e.contains("sed") && e.contains("data.synth.noize"), "{e}");
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in ["[objective]\nlambda = 2.0\n", "[encoder]\nheads = 5\n", "[optim]\nlr = -1.0\n"] {
            assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn seed_override() {
        let mut c = RunConfig::default();
        assert_eq!(c.apply_seed_override(None).unwrap(), None);
        assert_eq!(c.apply_seed_override(Some("42")).unwrap(), Some(42));
        assert_eq!(c.seed, 42);
        assert!(c.apply_seed_override(Some("x")).is_err());
    }
}
