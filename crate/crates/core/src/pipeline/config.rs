use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{PartConfig, ThetaPreset};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::synth::{AugmentConfig, SynthSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    /// Linear warm-up length in epochs before the cosine decay.
    pub warmup_epochs: usize,
    pub eval_every: usize,
    pub ids_per_batch: usize,
    pub instances_per_id: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.04,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 60,
            warmup_epochs: 3,
            eval_every: 10,
            ids_per_batch: 8,
            instances_per_id: 4,
        }
    }
}

impl OptimConfig {
    /// Settings at the scale of the original benchmarks.
    pub fn benchmark_scale() -> Self {
        Self {
            lr: 0.008,
            epochs: 320,
            warmup_epochs: 0,
            eval_every: 20,
            ids_per_batch: 16,
            ..Self::default()
        }
    }

    pub fn batch_size(&self) -> usize {
        self.ids_per_batch * self.instances_per_id
    }
}

/// Where the dataset lives and how to synthesize it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Directory holding `spec.json` and the split manifests.
    pub root: PathBuf,
    pub synth: SynthSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            synth: SynthSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub cmc_k: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { cmc_k: 10, batch_size: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub parts: PartConfig,
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            parts: PartConfig::from_preset(5, ThetaPreset::Market1501).expect("five-part grouping exists"),
            data: DataConfig::default(),
            augment: AugmentConfig::default(),
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Cross-section consistency checks; paths are checked by the commands.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        self.parts.validate()?;
        self.data.synth.validate()?;
        if self.parts.num_parts() != self.model.num_parts {
            return bad(format!(
                "parts lists {} parts but model.num_parts = {}",
                self.parts.num_parts(),
                self.model.num_parts
            ));
        }
        if self.parts.num_fragments() != self.data.synth.num_fragments() {
            return bad(format!(
                "parts maps {} fragments but the data provides {}",
                self.parts.num_fragments(),
                self.data.synth.num_fragments()
            ));
        }
        if self.model.num_classes != self.data.synth.num_train_ids {
            return bad(format!(
                "model.num_classes = {} but there are {} training identities",
                self.model.num_classes, self.data.synth.num_train_ids
            ));
        }
        if (self.model.image_h, self.model.image_w) != (self.data.synth.image_h, self.data.synth.image_w) {
            return bad("model and data image sizes differ".into());
        }
        if self.model.num_cameras < self.data.synth.camera_count {
            return bad("model.num_cameras is smaller than the data camera count".into());
        }
        if !(self.loss.lambda_pose >= 0.0) {
            return bad(format!("loss.lambda_pose = {} must be ≥ 0", self.loss.lambda_pose));
        }
        let o = &self.optim;
        if o.epochs == 0 || o.eval_every == 0 || o.ids_per_batch < 2 || o.instances_per_id < 2 {
            return bad("optim needs epochs, eval_every ≥ 1 and at least 2 ids × 2 instances per batch".into());
        }
        if o.instances_per_id > self.data.synth.train_images_per_id || o.ids_per_batch > self.data.synth.num_train_ids {
            return bad("batch layout asks for more ids or instances than the data has".into());
        }
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad(format!("optim.lr = {} must be positive", o.lr));
        }
        Ok(())
    }
}
