//! Run configuration: one TOML file with a section per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ultradp_core::eval::FinetuneConfig;
use ultradp_core::gnn::Backbone;
use ultradp_core::model::ModelConfig;
use ultradp_core::prompt::DEFAULT_EPSILON;
use ultradp_core::train::TrainConfig;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub edges: PathBuf,
    pub features: PathBuf,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    /// Share of edges removed before any stage and kept for link probing.
    #[serde(default = "default_holdout")]
    pub link_holdout: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_holdout() -> f64 {
    0.05
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: Backbone,
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { backbone: Backbone::Gat, layers: 3, hidden_dim: 64, heads: 8 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    /// Walk length `t` of the position encoding.
    pub step: usize,
    /// Anchor count; `⌈n / 100⌉` when absent.
    pub anchors: Option<usize>,
    pub w_pos: f64,
    pub epsilon: f64,
}

impl Default for PromptSection {
    fn default() -> Self {
        Self { step: 9, anchors: None, w_pos: 1.0, epsilon: DEFAULT_EPSILON }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub link_probe: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { shots: vec![8], seeds: vec![0, 1, 2, 3, 4], link_probe: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub prompt: PromptSection,
    #[serde(default)]
    pub pretrain: TrainConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

/// The sections that determine a checkpoint.
#[derive(Serialize)]
struct Hashed<'a> {
    data: &'a DataSection,
    model: &'a ModelSection,
    prompt: &'a PromptSection,
    pretrain: &'a TrainConfig,
}

impl RunConfig {
    /// Parses and validates `path`. Relative paths inside are taken from the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::reading(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.data.edges = base.join(&cfg.data.edges);
        cfg.data.features = base.join(&cfg.data.features);
        cfg.data.labels = cfg.data.labels.map(|l| base.join(l));
        cfg.out_dir = base.join(&cfg.out_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(0.0..1.0).contains(&self.data.link_holdout) {
            return bad(format!("data.link_holdout {} outside [0, 1)", self.data.link_holdout));
        }
        if self.prompt.step == 0 {
            return bad("prompt.step must be at least 1".into());
        }
        if self.prompt.anchors == Some(0) {
            return bad("prompt.anchors must be positive".into());
        }
        if !(self.prompt.epsilon > 0.0) {
            return bad("prompt.epsilon must be positive".into());
        }
        if self.eval.shots.is_empty() || self.eval.shots.contains(&0) {
            return bad("eval.shots must list positive shot counts".into());
        }
        if self.eval.seeds.is_empty() {
            return bad("eval.seeds must not be empty".into());
        }
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.model_config(1, 1).gnn().validate()?;
        Ok(())
    }

    pub fn model_config(&self, feature_dim: usize, num_anchors: usize) -> ModelConfig {
        let mut mc = ModelConfig::new(self.model.backbone, feature_dim, num_anchors, self.pretrain.tasks.len());
        mc.layers = self.model.layers;
        mc.hidden_dim = self.model.hidden_dim;
        mc.heads = self.model.heads;
        mc.w_pos = self.prompt.w_pos;
        mc.epsilon = self.prompt.epsilon;
        mc
    }

    /// Longest walk any stage reads from the reachability cache.
    pub fn max_step(&self) -> usize {
        self.prompt.step.max(self.pretrain.knn_step)
    }

    /// JSON echo of the hashed sections, stored in checkpoints.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self.hashed()).expect("config serialises")
    }

    /// SHA-256 over the data, model, prompt and pre-training sections.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.hashed()).expect("config serialises");
        format!("{:x}", Sha256::digest(bytes))
    }

    fn hashed(&self) -> Hashed<'_> {
        Hashed { data: &self.data, model: &self.model, prompt: &self.prompt, pretrain: &self.pretrain }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    const MINIMAL: &str = "[data]\nedges = \"e.tsv\"\nfeatures = \"f.udpm\"\n";

    #[test]
    fn defaults_fill_in() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.prompt.step, 9);
        assert_eq!(c.pretrain.k, 4);
        assert_eq!(c.eval.shots, vec![8]);
        assert_eq!(c.data.link_holdout, 0.05);
    }

    #[test]
    fn unknown_keys_and_bad_values() {
        assert!(parse(&format!("{MINIMAL}[model]\nwidth = 3\n")).is_err());
        assert!(parse(&format!("{MINIMAL}colour = 1\n")).is_err());
        assert!(parse("[data]\nedges = \"e.tsv\"\n").is_err());
        assert!(parse(&format!("{MINIMAL}[pretrain]\nlr = \"fast\"\n")).is_err());
        let weights = "[pretrain]\ntasks = [{ task = \"edge\", weight = 0.3 }, { task = \"knn\", weight = 0.3 }]\n";
        let e = parse(&format!("{MINIMAL}{weights}")).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn hash_ignores_eval_and_output() {
        let a = parse(MINIMAL).unwrap();
        let b = parse(&format!("out_dir = \"elsewhere\"\n{MINIMAL}[eval]\nshots = [1, 4]\n")).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = parse(&format!("{MINIMAL}[pretrain]\nseed = 3\n")).unwrap();
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
