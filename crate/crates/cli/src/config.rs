use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pixelrep::model::{ModelConfig, SourceMode};
use pixelrep::pixeltok::WindowConfig;
use pixelrep::textimage::RenderConfig;
use pixelrep::trainkit::{SamplerConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceVocab {
    /// One segmenter over all languages, temperature-weighted.
    Joint,
    /// Per-language segmenters of `src_size` each, united.
    Union,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub src_size: usize,
    pub tgt_size: usize,
    pub src_kind: SourceVocab,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            src_size: 2000,
            tgt_size: 1000,
            src_kind: SourceVocab::Joint,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// Directory holding train.tsv, valid.tsv and optionally test.tsv.
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub render: RenderConfig,
    #[serde(default)]
    pub window: WindowConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub vocab: VocabConfig,
    #[serde(default)]
    pub data: DataPaths,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    /// Paper-scale architecture with desk-scale training defaults.
    pub fn preset(name: &str) -> Option<Self> {
        let model = ModelConfig::preset(name)?;
        let vocab = VocabConfig {
            src_size: model.v_src.unwrap_or(0),
            tgt_size: model.v_tgt,
            src_kind: SourceVocab::Joint,
        };
        Some(Self {
            render: RenderConfig::with_height(model.window.h as u32),
            window: model.window,
            model,
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            vocab,
            data: DataPaths::default(),
            seed: 0,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn validate(&self) -> Result<()> {
        self.render.validate().context("render")?;
        self.window.validate().context("window")?;
        self.model.validate().context("model")?;
        self.train.validate().context("train")?;
        self.sampler.validate().context("sampler")?;
        if self.model.window != self.window {
            bail!("model.window: must equal window");
        }
        if self.model.source_mode == SourceMode::Pixel && self.render.canvas_height as usize != self.window.h {
            bail!("render.canvas_height: must equal window.h");
        }
        if self.vocab.tgt_size <= 5 {
            bail!("vocab.tgt_size: too small");
        }
        if self.model.source_mode == SourceMode::Subword && self.vocab.src_size <= 5 {
            bail!("vocab.src_size: too small");
        }
        if let Some(dir) = &self.data.dir {
            for f in ["train.tsv", "valid.tsv"] {
                if !dir.join(f).is_file() {
                    bail!("data.dir: {} has no {f}", dir.display());
                }
            }
        }
        Ok(())
    }
}
