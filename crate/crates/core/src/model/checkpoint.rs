//! Versioned JSON checkpoints: model configuration plus the flat parameter vector.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FactoredConfig, FactoredModel, JointConfig, JointModel};
use crate::baselines::{VanillaConfig, VanillaModel};
use crate::error::{Error, Result};

pub const FORMAT: &str = "rcrl-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "snake_case")]
pub enum ModelKind {
    Br(JointConfig),
    BrFactored(FactoredConfig),
    Vanilla(VanillaConfig),
    Bc(VanillaConfig),
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Br(_) => "br",
            ModelKind::BrFactored(_) => "br_factored",
            ModelKind::Vanilla(_) => "vanilla",
            ModelKind::Bc(_) => "bc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelKind,
    pub gamma: f64,
    /// Largest initial RTG among training episodes; the Max strategy's target.
    pub max_dataset_rtg: f64,
    pub params: Vec<f64>,
}

/// A model restored from a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadedModel {
    Br(JointModel),
    BrFactored(FactoredModel),
    Vanilla(VanillaModel),
    Bc(VanillaModel),
}

impl Checkpoint {
    pub fn new(model: ModelKind, gamma: f64, max_dataset_rtg: f64, params: Vec<f64>) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            model,
            gamma,
            max_dataset_rtg,
            params,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(Error::CheckpointMismatch(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        Ok(ck)
    }

    /// Fails unless the stored configuration equals `expected`.
    pub fn expect_config(&self, expected: &ModelKind) -> Result<()> {
        if &self.model != expected {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint holds a {} model with a different configuration",
                self.model.name()
            )));
        }
        Ok(())
    }

    pub fn restore(&self) -> Result<LoadedModel> {
        let p = self.params.clone();
        Ok(match &self.model {
            ModelKind::Br(c) => LoadedModel::Br(JointModel::from_params(*c, p)?),
            ModelKind::BrFactored(c) => LoadedModel::BrFactored(FactoredModel::from_params(*c, p)?),
            ModelKind::Vanilla(c) => LoadedModel::Vanilla(VanillaModel::from_params(*c, p)?),
            ModelKind::Bc(c) => LoadedModel::Bc(VanillaModel::from_params(*c, p)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bucket::BucketSpec;
    use crate::model::{FeatureSpec, Init};

    fn joint() -> JointModel {
        let cfg = JointConfig {
            features: FeatureSpec::OneHot { n_states: 3 },
            n_actions: 2,
            buckets: BucketSpec::new(0.0, 1.0, 5).unwrap(),
        };
        JointModel::new(cfg, Init::Default, 4).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = joint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        Checkpoint::new(ModelKind::Br(*m.config()), 0.9, 0.729, m.params().to_vec())
            .save(&path)
            .unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.restore().unwrap(), LoadedModel::Br(m.clone()));
        ck.expect_config(&ModelKind::Br(*m.config())).unwrap();
    }

    #[test]
    fn mismatches_are_errors() {
        let m = joint();
        let mut other = *m.config();
        other.n_actions = 3;
        let ck = Checkpoint::new(ModelKind::Br(*m.config()), 0.9, 1.0, m.params().to_vec());
        assert!(matches!(ck.expect_config(&ModelKind::Br(other)), Err(Error::CheckpointMismatch(_))));
        let short = Checkpoint::new(ModelKind::Br(other), 0.9, 1.0, m.params().to_vec());
        assert!(matches!(short.restore(), Err(Error::CheckpointMismatch(_))));
        assert!(matches!(Checkpoint::load("/nonexistent/ck.json"), Err(Error::MissingFile(_))));
    }
}
