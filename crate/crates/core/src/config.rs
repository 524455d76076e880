//! Run configuration: one TOML file with a section per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attributor::AttributorTrainConfig;
use crate::classifier::ClassifierConfig;
use crate::eval::experiments::{PerturbationConfig, RandomizationConfig};
use crate::eval::report::{LocalizationConfig, PERCENTILES};
use crate::inpainter::InpainterConfig;
use crate::synth::{splitmix64, SynthConfig};
use crate::{Error, Result};

/// SHA-256 of the canonical TOML serialization of `value`.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let text = toml::to_string(value).expect("config serializes to TOML");
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub percentiles: Vec<u32>,
    pub localization: LocalizationConfig,
    pub perturbation: PerturbationConfig,
    pub randomization: RandomizationConfig,
    /// Repeated sweeps over the test set when measuring throughput.
    pub benchmark_repetitions: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            percentiles: PERCENTILES.to_vec(),
            localization: LocalizationConfig::default(),
            perturbation: PerturbationConfig::default(),
            randomization: RandomizationConfig::default(),
            benchmark_repetitions: 10,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, every stage seed is derived from it.
    pub seed: Option<u64>,
    /// Run directory; relative paths resolve against the output root.
    pub output: Option<PathBuf>,
    pub synth: SynthConfig,
    pub classifier: ClassifierConfig,
    pub inpainter: InpainterConfig,
    pub attributor: AttributorTrainConfig,
    pub eval: EvalConfig,
}

/// Stages in dependency order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Classifier,
    Inpainter,
    Attributor,
}

#[derive(Serialize)]
struct StageKey<'a> {
    synth: &'a SynthConfig,
    classifier: Option<&'a ClassifierConfig>,
    inpainter: Option<&'a InpainterConfig>,
    attributor: Option<&'a AttributorTrainConfig>,
}

fn derive(seed: u64, stage: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stage)) >> 1
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Sets a dotted key, e.g. `classifier.epochs=5`. The value is parsed
    /// as a TOML value, falling back to a plain string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::config(e.to_string()))?;
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("override key {key:?}: {part} is not a section")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            node = table
                .get_mut(*part)
                .ok_or_else(|| Error::config(format!("unknown config section {part:?} in {key:?}")))?;
        }
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("override {assignment:?}: {e}")))?;
        Ok(())
    }

    /// Copy with stage seeds derived from the global seed, if one is set.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        if let Some(s) = self.seed {
            c.synth.master_seed = derive(s, 1);
            c.classifier.seed = derive(s, 2);
            c.inpainter.seed = derive(s, 3);
            c.attributor.seed = derive(s, 4);
            c.eval.perturbation.seed = derive(s, 5);
            c.eval.randomization.seed = derive(s, 6);
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        if self.eval.percentiles.iter().any(|&p| p == 0 || p >= 100) {
            return Err(Error::config("percentiles must lie in (0, 100)"));
        }
        if self.eval.benchmark_repetitions == 0 {
            return Err(Error::config("benchmark_repetitions must be positive"));
        }
        Ok(())
    }

    /// Hash of everything a stage's artifact depends on.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let c = self.resolved();
        if stage == Stage::Synth {
            return fingerprint(&c.synth);
        }
        let upto = |s: Stage| stage as u8 >= s as u8;
        fingerprint(&StageKey {
            synth: &c.synth,
            classifier: upto(Stage::Classifier).then_some(&c.classifier),
            inpainter: upto(Stage::Inpainter).then_some(&c.inpainter),
            attributor: upto(Stage::Attributor).then_some(&c.attributor),
        })
    }

    /// The run directory under `root` (or `output` itself when absolute).
    pub fn run_dir(&self, root: &Path) -> PathBuf {
        match &self.output {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => root.join(p),
            None => root.join("run"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[classifier]\nepochz = 3\n").is_err());
        assert!(RunConfig::from_toml("colour = 1\n").is_err());
    }

    #[test]
    fn overrides() {
        let mut c = RunConfig::default();
        c.apply_override("classifier.epochs=3").unwrap();
        c.apply_override("seed = 9").unwrap();
        c.apply_override("attributor.optimizer=adam").unwrap();
        c.apply_override("attributor.learning_rate.high=0.01").unwrap();
        assert_eq!(c.classifier.epochs, 3);
        assert_eq!(c.seed, Some(9));
        assert_eq!(c.attributor.learning_rate.high, 0.01);
        assert!(c.apply_override("classifier.nope=1").is_err());
        assert!(c.apply_override("nosection.x=1").is_err());
        assert!(c.apply_override("classifier.epochs=many").is_err());
        assert!(c.apply_override("noequals").is_err());
    }

    #[test]
    fn stage_hashes_follow_dependencies() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.attributor.lambda = 0.25;
        assert_eq!(a.stage_hash(Stage::Classifier), b.stage_hash(Stage::Classifier));
        assert_ne!(a.stage_hash(Stage::Attributor), b.stage_hash(Stage::Attributor));
        let mut c = a.clone();
        c.seed = Some(1);
        assert_ne!(a.stage_hash(Stage::Synth), c.stage_hash(Stage::Synth));
    }
}
