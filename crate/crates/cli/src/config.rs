//! TOML run configuration. Every field has a default; unknown keys are errors.

use std::path::{Path, PathBuf};

use hlora_core::adapter::HLoraConfig;
use hlora_core::data::SuiteSize;
use hlora_core::model::ModelConfig;
use hlora_core::train::{ProtocolConfig, SweepConfig};
use hlora_core::vision::EncoderConfig;
use hlora_core::{Error, Result, TaskType};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const CONFIG_FORMAT: &str = "hlora-config v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub format: String,
    pub seed: u64,
    pub model: ModelSection,
    pub vq: VqSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub sweep: SweepSection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format: CONFIG_FORMAT.into(),
            seed: 0,
            model: ModelSection::default(),
            vq: VqSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            sweep: SweepSection::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq: usize,
    pub ff_hidden: usize,
    pub align_hidden: usize,
    pub image_size: usize,
    pub concrete_tap: usize,
    pub abstract_tap: usize,
    pub tap_split: usize,
    pub shared_rank: usize,
    pub shared_alpha: f64,
    pub encoder: EncoderSection,
    pub comp: PluginSection,
    pub gen: PluginSection,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            d_model: m.d_model,
            layers: m.layers,
            heads: m.heads,
            max_seq: m.max_seq,
            ff_hidden: m.ff_hidden,
            align_hidden: m.align_hidden,
            image_size: m.image_size,
            concrete_tap: m.concrete_tap,
            abstract_tap: m.abstract_tap,
            tap_split: m.tap_split,
            shared_rank: m.shared_rank,
            shared_alpha: m.shared_alpha,
            encoder: EncoderSection::from(&m.encoder),
            comp: m.comp.into(),
            gen: m.gen.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub patch_size: usize,
    pub d_vis: usize,
    pub mixing: Vec<f64>,
    pub gain: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self::from(&EncoderConfig::default())
    }
}

impl From<&EncoderConfig> for EncoderSection {
    fn from(e: &EncoderConfig) -> Self {
        Self {
            patch_size: e.patch_size,
            d_vis: e.d_vis,
            mixing: e.mixing.clone(),
            gain: e.gain,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginSection {
    pub rank: usize,
    pub experts: usize,
    pub alpha: f64,
}

impl From<HLoraConfig> for PluginSection {
    fn from(c: HLoraConfig) -> Self {
        Self {
            rank: c.rank,
            experts: c.experts,
            alpha: c.alpha,
        }
    }
}

impl From<PluginSection> for HLoraConfig {
    fn from(c: PluginSection) -> Self {
        Self {
            rank: c.rank,
            experts: c.experts,
            alpha: c.alpha,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqSection {
    pub codebook_size: usize,
    pub d_code: usize,
}

impl Default for VqSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            codebook_size: m.codebook_size,
            d_code: m.d_code,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub comp_train: usize,
    pub gen_train: usize,
    pub comp_val: usize,
    pub gen_val: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SuiteSize::default();
        Self {
            comp_train: s.comp_train,
            gen_train: s.gen_train,
            comp_val: s.comp_val,
            gen_val: s.gen_val,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps_1c: usize,
    pub steps_1g: usize,
    pub steps_2: usize,
    pub steps_3c: usize,
    pub steps_3g: usize,
    pub batch: usize,
    pub lr_align: f64,
    pub lr_harmonize: f64,
    pub lr_tune: f64,
    pub lr_mixed: f64,
    pub warmup_frac: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip: f64,
    pub mixture_frac: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let p = ProtocolConfig::default();
        Self {
            steps_1c: p.steps_1c,
            steps_1g: p.steps_1g,
            steps_2: p.steps_2,
            steps_3c: p.steps_3c,
            steps_3g: p.steps_3g,
            batch: p.batch,
            lr_align: p.lr_align,
            lr_harmonize: p.lr_harmonize,
            lr_tune: p.lr_tune,
            lr_mixed: p.lr_mixed,
            warmup_frac: p.warmup_frac,
            clip: p.clip.unwrap_or(0.0),
            mixture_frac: p.mixture_frac,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub ratios: Vec<f64>,
    pub primary: String,
    pub primary_count: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            ratios: vec![0.0, 0.25, 0.5, 1.0],
            primary: "comp".into(),
            primary_count: 300,
            epochs: 6,
            batch: 8,
            lr: 3e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub metrics: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
            metrics: "metrics.csv".into(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        if cfg.format != CONFIG_FORMAT {
            return Err(Error::Config(format!(
                "config format {:?}, expected {CONFIG_FORMAT:?}",
                cfg.format
            )));
        }
        cfg.model_config().validate()?;
        cfg.sweep_config()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The effective config with every default written out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            d_model: m.d_model,
            layers: m.layers,
            heads: m.heads,
            max_seq: m.max_seq,
            ff_hidden: m.ff_hidden,
            align_hidden: m.align_hidden,
            image_size: m.image_size,
            encoder: EncoderConfig {
                patch_size: m.encoder.patch_size,
                d_vis: m.encoder.d_vis,
                mixing: m.encoder.mixing.clone(),
                gain: m.encoder.gain,
            },
            concrete_tap: m.concrete_tap,
            abstract_tap: m.abstract_tap,
            tap_split: m.tap_split,
            comp: m.comp.into(),
            gen: m.gen.into(),
            shared_rank: m.shared_rank,
            shared_alpha: m.shared_alpha,
            codebook_size: self.vq.codebook_size,
            d_code: self.vq.d_code,
        }
    }

    pub fn suite_size(&self) -> SuiteSize {
        SuiteSize {
            comp_train: self.data.comp_train,
            gen_train: self.data.gen_train,
            comp_val: self.data.comp_val,
            gen_val: self.data.gen_val,
        }
    }

    pub fn protocol(&self) -> ProtocolConfig {
        let t = &self.train;
        ProtocolConfig {
            steps_1c: t.steps_1c,
            steps_1g: t.steps_1g,
            steps_2: t.steps_2,
            steps_3c: t.steps_3c,
            steps_3g: t.steps_3g,
            batch: t.batch,
            lr_align: t.lr_align,
            lr_harmonize: t.lr_harmonize,
            lr_tune: t.lr_tune,
            lr_mixed: t.lr_mixed,
            warmup_frac: t.warmup_frac,
            clip: (t.clip > 0.0).then_some(t.clip),
            mixture_frac: t.mixture_frac,
        }
    }

    pub fn sweep_config(&self) -> Result<SweepConfig> {
        let s = &self.sweep;
        Ok(SweepConfig {
            ratios: s.ratios.clone(),
            primary: s.primary.parse::<TaskType>()?,
            primary_count: s.primary_count,
            epochs: s.epochs,
            batch: s.batch,
            lr: s.lr,
        })
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
