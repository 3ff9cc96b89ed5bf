use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptConfig, CycleMode};
use crate::audiomap::LlmConfig;
use crate::data::{CorruptionKind, CorruptionSpec, DatasetSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// No adaptation.
    SourceOnly,
    /// Consistency and alignment only, no pseudo labels.
    AlignConsOnly,
    FullAudio,
    FullAudioSelect,
    FullAudioEnsemble,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::SourceOnly => "source_only",
            Variant::AlignConsOnly => "align_cons_only",
            Variant::FullAudio => "full_audio",
            Variant::FullAudioSelect => "full_audio_select",
            Variant::FullAudioEnsemble => "full_audio_ensemble",
        }
    }

    pub fn uses_audio(self) -> bool {
        !matches!(self, Variant::SourceOnly | Variant::AlignConsOnly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapperKind {
    #[default]
    Lexical,
    Llm,
    /// Replay of a mapping cache.
    Fixture,
    /// Ground-truth labels.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsSource {
    /// Statistics of the model's own training split.
    #[default]
    SameDistribution,
    /// Statistics of the training split of an independently generated dataset.
    Shifted,
}

/// One table column: a variant plus optional overrides of the shared
/// settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "ArmInput")]
pub struct ArmSpec {
    pub label: String,
    pub variant: Variant,
    pub tau: Option<usize>,
    pub cycle: Option<CycleMode>,
    /// Percent of samples whose pseudo label is kept.
    pub availability: Option<f64>,
    pub s: Option<usize>,
    pub alpha: Option<f64>,
    pub lr: Option<f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ArmInput {
    Bare(Variant),
    Full(ArmFields),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ArmFields {
    label: Option<String>,
    variant: Variant,
    tau: Option<usize>,
    cycle: Option<CycleMode>,
    availability: Option<f64>,
    s: Option<usize>,
    alpha: Option<f64>,
    lr: Option<f64>,
}

impl From<ArmInput> for ArmSpec {
    fn from(input: ArmInput) -> Self {
        match input {
            ArmInput::Bare(v) => ArmSpec::new(v),
            ArmInput::Full(f) => {
                let mut a = ArmSpec {
                    label: String::new(),
                    variant: f.variant,
                    tau: f.tau,
                    cycle: f.cycle,
                    availability: f.availability,
                    s: f.s,
                    alpha: f.alpha,
                    lr: f.lr,
                };
                a.label = f.label.unwrap_or_else(|| a.default_label());
                a
            }
        }
    }
}

impl ArmSpec {
    pub fn new(variant: Variant) -> Self {
        Self { label: variant.name().into(), variant, tau: None, cycle: None, availability: None, s: None, alpha: None, lr: None }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Variant name with any overrides in brackets, e.g. `full_audio[tau=4,cycle=fixed]`.
    pub fn default_label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(t) = self.tau {
            parts.push(format!("tau={t}"));
        }
        if let Some(c) = self.cycle {
            parts.push(format!("cycle={}", if c == CycleMode::Fixed { "fixed" } else { "flexible" }));
        }
        if let Some(a) = self.availability {
            parts.push(format!("m={a}"));
        }
        if let Some(s) = self.s {
            parts.push(format!("s={s}"));
        }
        if let Some(a) = self.alpha {
            parts.push(format!("alpha={a}"));
        }
        if let Some(l) = self.lr {
            parts.push(format!("lr={l}"));
        }
        if parts.is_empty() {
            self.variant.name().into()
        } else {
            format!("{}[{}]", self.variant.name(), parts.join(","))
        }
    }

    /// The shared adaptation settings with this arm's overrides applied.
    pub fn adapt_config(&self, base: &AdaptConfig) -> AdaptConfig {
        let mut c = base.clone();
        if let Some(t) = self.tau {
            c.tau = t;
        }
        if let Some(m) = self.cycle {
            c.cycle = m;
        }
        if let Some(s) = self.s {
            c.s = s;
        }
        if let Some(a) = self.alpha {
            c.alpha = a;
        }
        if let Some(l) = self.lr {
            c.lr = l;
        }
        c.use_select = matches!(self.variant, Variant::FullAudioSelect);
        c.use_ensemble = matches!(self.variant, Variant::FullAudioEnsemble);
        c
    }

    pub fn availability_percent(&self, base: f64) -> f64 {
        self.availability.unwrap_or(base)
    }
}

/// Source model architecture and training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    pub layer_widths: Vec<usize>,
    pub patch: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self { layer_widths: vec![16, 16], patch: 2, epochs: 15, lr: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Generated per seed unless `dataset_path` is set.
    pub dataset: DatasetSpec,
    /// A saved dataset used for every seed.
    pub dataset_path: Option<PathBuf>,
    pub corruptions: Vec<CorruptionSpec>,
    pub arms: Vec<ArmSpec>,
    pub adapt: AdaptConfig,
    pub mapper: MapperKind,
    /// Percent of samples whose pseudo label is kept.
    pub availability: f64,
    pub seeds: Vec<u64>,
    pub train_stats_source: StatsSource,
    pub source: SourceConfig,
    pub llm: LlmConfig,
    pub mapping_cache: Option<PathBuf>,
    pub prompt_template: Option<PathBuf>,
    pub include_records: bool,
    /// Run seeds on separate threads.
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let sev5 = |kind| CorruptionSpec { kind, severity: 5 };
        Self {
            dataset: DatasetSpec::default(),
            dataset_path: None,
            corruptions: vec![
                sev5(CorruptionKind::Gaussian),
                sev5(CorruptionKind::Salt),
                sev5(CorruptionKind::Pepper),
                sev5(CorruptionKind::Contrast),
            ],
            arms: vec![
                ArmSpec::new(Variant::SourceOnly),
                ArmSpec::new(Variant::AlignConsOnly),
                ArmSpec::new(Variant::FullAudio),
            ],
            adapt: AdaptConfig::default(),
            mapper: MapperKind::Lexical,
            availability: 100.0,
            seeds: vec![0],
            train_stats_source: StatsSource::SameDistribution,
            source: SourceConfig::default(),
            llm: LlmConfig::default(),
            mapping_cache: None,
            prompt_template: None,
            include_records: true,
            parallel: true,
        }
    }
}

fn json_config_error(e: serde_json::Error) -> Error {
    Error::config("config", e.to_string())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(json_config_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative paths inside it are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(json_config_error)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset_path, &mut cfg.mapping_cache, &mut cfg.prompt_template].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must not be empty"));
        }
        if self.corruptions.is_empty() {
            return Err(Error::config("corruptions", "must not be empty"));
        }
        for c in &self.corruptions {
            c.validate()?;
        }
        if self.arms.is_empty() {
            return Err(Error::config("arms", "must not be empty"));
        }
        let pct = |field: &str, v: f64| {
            if (0.0..=100.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(field, format!("must lie in [0, 100], got {v}")))
            }
        };
        pct("availability", self.availability)?;
        self.adapt.validate()?;
        let mut labels = HashSet::new();
        for arm in &self.arms {
            if !labels.insert(arm.label.as_str()) {
                return Err(Error::config("arms", format!("duplicate arm label {:?}", arm.label)));
            }
            if let Some(a) = arm.availability {
                pct(&format!("arms.{}.availability", arm.label), a)?;
            }
            arm.adapt_config(&self.adapt)
                .validate()
                .map_err(|e| Error::config(format!("arms.{}", arm.label), e.to_string()))?;
        }
        if self.dataset_path.is_none() {
            self.dataset.validate()?;
        }
        if self.source.layer_widths.is_empty() || self.source.layer_widths.contains(&0) {
            return Err(Error::config("source.layer_widths", "need at least one layer, all widths >= 1"));
        }
        if !(self.source.lr.is_finite() && self.source.lr > 0.0) {
            return Err(Error::config("source.lr", "must be positive"));
        }
        if let Some(layers) = &self.adapt.align_layers {
            if let Some(&l) = layers.iter().find(|&&l| l >= self.source.layer_widths.len()) {
                return Err(Error::config("adapt.align_layers", format!("layer {l} does not exist")));
            }
        }
        match self.mapper {
            MapperKind::Fixture if self.mapping_cache.is_none() => {
                return Err(Error::config("mapping_cache", "the fixture mapper replays a mapping cache; set its path"));
            }
            MapperKind::Llm => self.llm.validate()?,
            _ => {}
        }
        Ok(())
    }
}
