//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//! model = "toy"                 # or "paper", or a full [model] table
//!
//! [quantization]
//! attn_groups = 2               # fine-grained groups of the attention map
//! tensors."blocks.0.attn" = { partition = "value_uniform" }
//!
//! [policy]                      # tensor id -> "static" | "dynamic"
//! "blocks.1.v.out" = "static"
//!
//! [train]
//! stage1_epochs = 40
//!
//! [data]
//! train_seed = 1
//!
//! [paths]
//! checkpoint_dir = "runs/toy"
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use fbpt_core::binmodules::model::{BinFlags, Model, ModelConfig};
use fbpt_core::cost::{CostKnobs, CostReport};
use fbpt_core::hybridize::HybridPolicy;
use fbpt_core::quantize::{Mode, PartitionStrategy};
use fbpt_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Models larger than this many parameters are refused at parse time.
const MAX_PARAMS: f64 = 5e7;
const MAX_WIDTH: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSection {
    Preset(String),
    Explicit(ModelConfig),
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection::Preset("toy".into())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecOverride {
    pub partition: Option<PartitionStrategy>,
}

/// Group counts and partition strategy replace the model's; `tensors`
/// overrides the partition of single activation tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantSection {
    pub qkv_groups: Option<usize>,
    pub attn_groups: Option<usize>,
    pub partition: Option<PartitionStrategy>,
    pub tensors: BTreeMap<String, SpecOverride>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// directory with `train/<class>/` and `test/<class>/` point files;
    /// the synthetic dataset is used when absent
    pub dir: Option<PathBuf>,
    pub train_seed: u64,
    pub test_seed: u64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            train_seed: 1,
            test_seed: 2,
            train_per_class: 50,
            test_per_class: 20,
            noise: 0.01,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub checkpoint_dir: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// model initialization and shuffling seed
    pub seed: u64,
    pub model: ModelSection,
    pub quantization: QuantSection,
    pub policy: BTreeMap<String, Mode>,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
    pub cost: CostKnobs,
}

#[derive(Debug, PartialEq)]
pub struct ConfigError {
    pub source: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.source, self.message)
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    /// Parse and validate. Every failure is a [`ConfigError`] naming the
    /// line or key at fault.
    pub fn parse(text: &str, source: &str) -> Result<Self, ConfigError> {
        let err = |message: String| ConfigError {
            source: source.to_string(),
            message,
        };
        let cfg: RunConfig = toml::from_str(text).map_err(|e| err(e.to_string().trim_end().to_string()))?;
        cfg.validate().map_err(err)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            source: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn model_config(&self) -> Result<ModelConfig, String> {
        let mut c = match &self.model {
            ModelSection::Preset(p) if p == "toy" => ModelConfig::toy(),
            ModelSection::Preset(p) if p == "paper" => ModelConfig::paper(),
            ModelSection::Preset(p) => return Err(format!("key `model`: unknown preset `{p}` (expected `toy`, `paper` or a table)")),
            ModelSection::Explicit(c) => c.clone(),
        };
        let q = &self.quantization;
        c.qkv_groups = q.qkv_groups.unwrap_or(c.qkv_groups);
        c.attn_groups = q.attn_groups.unwrap_or(c.attn_groups);
        c.partition = q.partition.unwrap_or(c.partition);
        Ok(c)
    }

    pub fn policy_overrides(&self) -> HybridPolicy {
        let mut p = HybridPolicy::default();
        p.assignments.clear();
        for (id, &m) in &self.policy {
            p.register(id.clone(), m);
        }
        p
    }

    fn validate(&self) -> Result<(), String> {
        let mc = self.model_config()?;
        let widths = [mc.num_points, mc.embed_dim, mc.attn_dim, mc.fuse_dim, mc.classes]
            .into_iter()
            .chain(mc.point_mlps.iter().copied())
            .chain(mc.head_hidden.iter().copied())
            .chain(mc.stages.iter().flat_map(|s| s.mlps.iter().copied().chain([s.samples, s.neighbors])));
        if widths.into_iter().any(|w| w > MAX_WIDTH) || mc.blocks > 64 || mc.stages.len() > 8 {
            return Err(format!("key `model`: dimensions above {MAX_WIDTH}, more than 64 blocks or 8 stages are not supported"));
        }
        mc.validate().map_err(|e| format!("table `model` or `quantization`: {e}"))?;
        let params = CostReport::for_config(&mc, &HybridPolicy::default(), BinFlags::NONE, CostKnobs::default())
            .totals
            .param_bits_fp as f64
            / 32.0;
        if params > MAX_PARAMS {
            return Err(format!("key `model`: {params:.0} parameters exceeds the limit of {MAX_PARAMS:.0}"));
        }
        self.train.validate().map_err(|e| format!("table `train`: {e}"))?;
        let d = &self.data;
        if d.dir.is_none() && (d.train_per_class == 0 || d.test_per_class == 0) {
            return Err("table `data`: clouds per class must be positive".into());
        }
        if !(d.noise >= 0.0 && d.noise.is_finite()) {
            return Err(format!("key `data.noise`: {} is not a valid standard deviation", d.noise));
        }
        if mc.num_points < 64 && d.dir.is_none() {
            return Err("key `model`: the synthetic dataset needs at least 64 points per cloud".into());
        }
        let model = Model::new(mc, &self.policy_overrides(), 0).map_err(|e| format!("table `policy`: {e}"))?;
        for id in self.quantization.tensors.keys() {
            let spec = model
                .specs
                .get(id)
                .ok_or_else(|| format!("key `quantization.tensors.\"{id}\"`: no activation tensor with this id"))?;
            if spec.fine_groups == 1 {
                return Err(format!("key `quantization.tensors.\"{id}\"`: `{id}` is not a fine-grained tensor"));
            }
        }
        Ok(())
    }

    /// Fresh model with the policy and quantizer overrides applied.
    pub fn build_model(&self) -> anyhow::Result<Model> {
        let mc = self.model_config().map_err(anyhow::Error::msg)?;
        let mut model = Model::new(mc, &self.policy_overrides(), self.seed)?;
        for (id, o) in &self.quantization.tensors {
            let spec = model.specs.get_mut(id).expect("checked at parse");
            if let Some(p) = o.partition {
                spec.partition = p;
            }
        }
        Ok(model)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bad(text: &str) -> String {
        RunConfig::parse(text, "t.toml").unwrap_err().to_string()
    }

    #[test]
    fn empty_config_is_the_toy_default() {
        let c = RunConfig::parse("", "t.toml").unwrap();
        assert_eq!(c.model_config().unwrap(), ModelConfig::toy());
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn diagnostics_name_the_problem() {
        assert!(bad("seed = 1\nbogus = 2\n").contains("bogus"));
        assert!(bad("[train]\nstage1_epochs = -1\n").contains("line 2"));
        assert!(bad("[train]\nlearning_rate = 0.0\n").contains("train"));
        assert!(bad("model = \"huge\"\n").contains("unknown preset"));
        assert!(bad("[policy]\n\"blocks.9.q.out\" = \"static\"\n").contains("blocks.9.q.out"));
        assert!(bad("[policy]\n\"blocks.0.q.out\" = \"sometimes\"\n").contains("sometimes"));
        assert!(bad("[quantization]\nattn_groups = 3\n").contains("group count 3"));
        assert!(bad("[quantization.tensors]\n\"fuse.in\" = { partition = \"percentile\" }\n").contains("not a fine-grained"));
        assert!(bad("[quantization.tensors]\n\"nope\" = {}\n").contains("nope"));
        assert!(bad("[quantization.tensors]\n\"blocks.0.attn\" = { fine_groups = 2 }\n").contains("fine_groups"));
        assert!(bad("[data]\nnoise = -1.0\n").contains("data.noise"));
        assert!(bad("seed = ").contains("line 1"));
    }

    #[test]
    fn oversized_models_are_refused() {
        let t = "[model]\nnum_points = 1024\nembed_dim = 60000\nstages = []\nblocks = 1\nattn_dim = 8\nfuse_dim = 8\nclasses = 2\n";
        assert!(bad(t).contains("parameters"));
        let t = "[model]\nnum_points = 100000000\nembed_dim = 8\nstages = []\nblocks = 1\nattn_dim = 8\nfuse_dim = 8\nclasses = 2\n";
        assert!(bad(t).contains("dimensions"));
    }

    #[test]
    fn overrides_reach_the_model() {
        let c = RunConfig::parse(
            "[quantization]\nattn_groups = 2\ntensors.\"blocks.1.attn\" = { partition = \"value_uniform\" }\n[policy]\n\"blocks.0.v.out\" = \"static\"\n",
            "t.toml",
        )
        .unwrap();
        let m = c.build_model().unwrap();
        assert_eq!(m.specs["blocks.1.attn"].fine_groups, 2);
        assert_eq!(m.specs["blocks.1.attn"].partition, PartitionStrategy::ValueUniform);
        assert_eq!(m.specs["blocks.0.v.out"].mode, Mode::Static);
        let plain = RunConfig::parse("", "t.toml").unwrap().build_model().unwrap();
        assert_ne!(m.arch_hash(), plain.arch_hash());
    }
}
