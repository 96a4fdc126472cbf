//! The pipeline configuration file: one TOML document with a table per stage.
//! Missing keys take their defaults, unknown keys are rejected and every
//! stage is validated on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentSpec;
use crate::error::{Error, Result};
use crate::evaluate::EvalProtocol;
use crate::loss::LossConfig;
use crate::mining::MiningConfig;
use crate::riv::RivConfig;
use crate::synthetic::{revisit_session, SessionConfig, WorldConfig};
use crate::trainer::{ModelConfig, TrainConfig, TrainSetup};

/// The two-session synthetic benchmark plus two further traversals of the same
/// world used for training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub world: WorldConfig,
    pub reference: SessionConfig,
    pub revisit: SessionConfig,
    /// Seeds of the training traversals, styled like `reference` and `revisit`.
    pub train_session_seeds: [u64; 2],
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            world: WorldConfig::default(),
            reference: SessionConfig::default(),
            revisit: revisit_session(12, 1000.0),
            train_session_seeds: [21, 22],
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.reference.validate()?;
        self.revisit.validate()?;
        let eval = [self.reference.seed, self.revisit.seed];
        if self.train_session_seeds.iter().any(|s| eval.contains(s)) {
            return Err(Error::Config("synthetic: training sessions must differ from the evaluation sessions".into()));
        }
        Ok(())
    }

    pub fn train_sessions(&self) -> [SessionConfig; 2] {
        let [a, b] = self.train_session_seeds;
        [SessionConfig { seed: a, ..self.reference }, SessionConfig { seed: b, ..self.revisit }]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub riv: RivConfig,
    pub model: ModelConfig,
    pub augment: AugmentSpec,
    pub mining: MiningConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalProtocol,
    pub synthetic: SyntheticConfig,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The bundled desk-scale setup.
    pub fn desk() -> Self {
        Self::parse(include_str!("../../../configs/desk.toml")).expect("bundled desk config is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train_setup().validate()?;
        self.augment.validate_for(self.riv.width)?;
        self.eval.validate()?;
        self.synthetic.validate()
    }

    pub fn train_setup(&self) -> TrainSetup {
        TrainSetup {
            riv: self.riv,
            model: self.model,
            mining: self.mining,
            loss: self.loss,
            augment: self.augment,
            train: self.train,
        }
    }
}
