//! Training configuration, presets and strict JSON parsing with `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::augment::AugmentProfile;
use crate::data::{self, LabeledExample, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{Backbone, ModelConfig};

/// Environment variable that overrides the CIFAR-10 root directory.
pub const DATA_ROOT_ENV: &str = "MHCT_DATA_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    /// The full method.
    None,
    /// A single head trained on its own confidence-thresholded pseudo-labels.
    OneHead,
    /// One strong view per example, shared by every head.
    OneStrong,
    /// Pseudo-labels predicted on the original (unaugmented) images.
    NoWeak,
    /// Every head starts from the same initial weights.
    SameInit,
    /// Evaluation uses the trained weights instead of their moving average.
    NoEma,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        AblationVariant::None,
        AblationVariant::OneHead,
        AblationVariant::OneStrong,
        AblationVariant::NoWeak,
        AblationVariant::SameInit,
        AblationVariant::NoEma,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::None => "none",
            AblationVariant::OneHead => "one-head",
            AblationVariant::OneStrong => "one-strong",
            AblationVariant::NoWeak => "no-weak",
            AblationVariant::SameInit => "same-init",
            AblationVariant::NoEma => "no-ema",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == name).ok_or_else(|| {
            let valid: Vec<_> = Self::ALL.iter().map(|v| v.name()).collect();
            Error::config(format!(
                "unknown ablation variant `{name}`; valid variants: {}",
                valid.join(", ")
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSettings {
    pub backbone: Backbone,
    pub width_factor: usize,
    pub split_point: usize,
    pub head_channels: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        num_classes: usize,
        per_class: usize,
        image_size: usize,
        seed: u64,
        noise: f32,
        test_per_class: usize,
    },
    Cifar10 {
        /// Directory holding `data_batch_{1..5}.bin` and `test_batch.bin`.
        root: Option<PathBuf>,
    },
}

/// Offset between the synthetic train and test generator seeds.
const SYNTHETIC_TEST_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

impl DatasetConfig {
    pub fn num_classes(&self) -> usize {
        match self {
            DatasetConfig::Synthetic { num_classes, .. } => *num_classes,
            DatasetConfig::Cifar10 { .. } => data::CIFAR_CLASSES,
        }
    }

    /// Loads `(train, test)`; the CIFAR root may be overridden by [`DATA_ROOT_ENV`].
    pub fn load(&self) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
        match self {
            DatasetConfig::Synthetic {
                num_classes,
                per_class,
                image_size,
                seed,
                noise,
                test_per_class,
            } => {
                let spec = |per_class, seed| SyntheticSpec {
                    num_classes: *num_classes,
                    per_class,
                    image_size: *image_size,
                    seed,
                    noise: *noise,
                };
                let train = data::make_synthetic_dataset(&spec(*per_class, *seed))?;
                let test = data::make_synthetic_dataset(&spec(
                    *test_per_class,
                    seed.wrapping_add(SYNTHETIC_TEST_SEED_OFFSET),
                ))?;
                Ok((train, test))
            }
            DatasetConfig::Cifar10 { root } => {
                let root = std::env::var_os(DATA_ROOT_ENV)
                    .map(PathBuf::from)
                    .or_else(|| root.clone())
                    .ok_or_else(|| {
                        Error::config(format!(
                            "no CIFAR-10 directory configured; set dataset.root or {DATA_ROOT_ENV} \
                             to the folder containing data_batch_1.bin .. test_batch.bin"
                        ))
                    })?;
                if !root.is_dir() {
                    return Err(Error::config(format!(
                        "CIFAR-10 directory {} does not exist; download the binary version and \
                         point dataset.root or {DATA_ROOT_ENV} at it",
                        root.display()
                    )));
                }
                data::load_cifar10_dir(&root)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub num_heads: usize,
    pub lambda_u: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub total_iterations: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub augment: AugmentProfile,
    pub ablation_variant: AblationVariant,
    pub confidence_threshold: f64,
    pub eval_interval: u64,
    pub seed: u64,
    pub n_labeled: usize,
    pub model: ModelSettings,
    pub dataset: DatasetConfig,
    /// Log pseudo-label accuracy against held-back labels (diagnostic only).
    pub log_pseudo_acc: bool,
}

pub const PRESETS: [&str; 2] = ["cifar10-wrn28-2", "desk"];

impl TrainConfig {
    /// Hyper-parameters for WRN 28-2 on CIFAR-10 with 4000 labels.
    pub fn cifar10_wrn28_2() -> Self {
        Self {
            num_heads: 3,
            lambda_u: 1.0,
            batch_labeled: 64,
            batch_unlabeled: 448,
            total_iterations: 1 << 20,
            learning_rate: 0.3,
            momentum: 0.9,
            weight_decay: 0.0005,
            ema_decay: 0.999,
            augment: AugmentProfile::cifar(),
            ablation_variant: AblationVariant::None,
            confidence_threshold: 0.95,
            eval_interval: 10_000,
            seed: 0,
            n_labeled: 4000,
            model: ModelSettings {
                backbone: Backbone::Wrn28,
                width_factor: 2,
                split_point: 2,
                head_channels: None,
            },
            dataset: DatasetConfig::Cifar10 { root: None },
            log_pseudo_acc: false,
        }
    }

    /// CPU-sized run on the procedural dataset.
    pub fn desk() -> Self {
        Self {
            batch_labeled: 16,
            batch_unlabeled: 48,
            total_iterations: 2000,
            learning_rate: 0.03,
            ema_decay: 0.99,
            eval_interval: 500,
            n_labeled: 40,
            model: ModelSettings {
                backbone: Backbone::SmallCnn,
                width_factor: 4,
                split_point: 2,
                head_channels: None,
            },
            dataset: DatasetConfig::Synthetic {
                num_classes: 4,
                per_class: 250,
                image_size: 16,
                seed: 0,
                noise: 0.2,
                test_per_class: 100,
            },
            ..Self::cifar10_wrn28_2()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "cifar10-wrn28-2" => Ok(Self::cifar10_wrn28_2()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::config(format!(
                "unknown preset `{other}`; valid presets: {}",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Parses a JSON object over a preset (key `preset`, default
    /// `cifar10-wrn28-2`), then applies dotted-path `key=value` overrides.
    /// Unknown keys anywhere are rejected.
    pub fn from_json_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text)?;
        let obj = doc
            .as_object_mut()
            .ok_or_else(|| Error::config("configuration must be a JSON object"))?;
        let mut preset = match obj.remove("preset") {
            Some(Value::String(s)) => s,
            Some(_) => return Err(Error::config("`preset` must be a string")),
            None => PRESETS[0].to_owned(),
        };
        let mut sets = Vec::with_capacity(overrides.len());
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{o}` is not key=value")))?;
            if key == "preset" {
                preset = raw.to_owned();
            } else {
                sets.push((key.to_owned(), raw.to_owned()));
            }
        }
        let mut merged = serde_json::to_value(Self::preset(&preset)?)?;
        merge(&mut merged, doc, "")?;
        for (key, raw) in sets {
            let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
            set_path(&mut merged, &key, value)?;
        }
        let config: Self = serde_json::from_value(merged)
            .map_err(|e| Error::config(format!("configuration rejected: {e}")))?;
        let config = config.resolved();
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_with_overrides(&text, overrides)
    }

    /// Applies variant-implied settings (the one-head variant forces a single head).
    pub fn resolved(mut self) -> Self {
        if self.ablation_variant == AblationVariant::OneHead {
            self.num_heads = 1;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 {
            return Err(Error::config("num_heads must be at least 1"));
        }
        if !(self.lambda_u >= 0.0 && self.lambda_u.is_finite()) {
            return Err(Error::config("lambda_u must be a finite non-negative number"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::config("ema_decay must lie in [0, 1]"));
        }
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold <= 1.0) {
            return Err(Error::config("confidence_threshold must lie in (0, 1]"));
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return Err(Error::config("batch sizes must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("eval_interval must be at least 1"));
        }
        if self.ablation_variant == AblationVariant::OneHead && self.num_heads != 1 {
            return Err(Error::config("the one-head variant requires num_heads = 1"));
        }
        self.augment.validate()?;
        self.model_config()?.validate()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            num_heads: self.num_heads,
            num_classes: self.dataset.num_classes(),
            backbone: self.model.backbone,
            width_factor: self.model.width_factor,
            split_point: self.model.split_point,
            head_channels: self.model.head_channels,
            same_head_init: self.ablation_variant == AblationVariant::SameInit,
        })
    }
}

fn merge(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            // Switching a tagged union's variant replaces the whole object.
            if let (Some(old), Some(new)) = (b.get("kind"), p.get("kind")) {
                if old != new {
                    *b = Map::new();
                }
            }
            for (k, v) in p {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &sub)?,
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p;
            Ok(())
        }
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("`{key}`: `{part}` is not inside an object")))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) && !(*part == "strong_ops" || *part == "head_channels") {
                return Err(Error::config(format!("unknown configuration key `{key}`")));
            }
            obj.insert((*part).to_owned(), value);
            return Ok(());
        }
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| Error::config(format!("unknown configuration key `{key}`")))?;
    }
    unreachable!("split yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_defaults() {
        let c = TrainConfig::cifar10_wrn28_2();
        assert_eq!((c.batch_labeled, c.batch_unlabeled), (64, 448));
        assert_eq!(c.lambda_u, 1.0);
        assert_eq!(c.learning_rate, 0.3);
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.weight_decay, 0.0005);
        assert_eq!(c.confidence_threshold, 0.95);
        assert_eq!(c.total_iterations, 1 << 20);
    }

    #[test]
    fn overrides_apply() {
        let c = TrainConfig::from_json_with_overrides(
            r#"{"preset": "desk", "seed": 4}"#,
            &["total_iterations=10".into(), "model.width_factor=2".into()],
        )
        .unwrap();
        assert_eq!(c.total_iterations, 10);
        assert_eq!(c.seed, 4);
        assert_eq!(c.model.width_factor, 2);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(TrainConfig::from_json_with_overrides(r#"{"bogus": 1}"#, &[]).is_err());
        assert!(TrainConfig::from_json_with_overrides(r#"{"model": {"depth": 3}}"#, &[]).is_err());
        assert!(TrainConfig::from_json_with_overrides("{}", &["nope=1".into()]).is_err());
        assert!(TrainConfig::from_json_with_overrides("{}", &["model.nope=1".into()]).is_err());
    }

    #[test]
    fn one_head_forces_single_head() {
        let c = TrainConfig::from_json_with_overrides(
            r#"{"preset": "desk"}"#,
            &["ablation_variant=one-head".into()],
        )
        .unwrap();
        assert_eq!(c.num_heads, 1);
        assert_eq!(c.ablation_variant, AblationVariant::OneHead);
    }

    #[test]
    fn dataset_kind_switch() {
        let c = TrainConfig::from_json_with_overrides(
            r#"{"dataset": {"kind": "synthetic", "num_classes": 3, "per_class": 4,
                "image_size": 8, "seed": 1, "noise": 0.1, "test_per_class": 2}}"#,
            &[],
        )
        .unwrap();
        assert_eq!(c.dataset.num_classes(), 3);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(TrainConfig::from_json_with_overrides("{}", &["ema_decay=1.5".into()]).is_err());
        assert!(TrainConfig::from_json_with_overrides("{}", &["lambda_u=-1".into()]).is_err());
        assert!(TrainConfig::from_json_with_overrides("{}", &["confidence_threshold=0".into()]).is_err());
        assert!(TrainConfig::from_json_with_overrides("{}", &["ablation_variant=sideways".into()]).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in AblationVariant::ALL {
            assert_eq!(AblationVariant::parse(v.name()).unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        let err = AblationVariant::parse("bad").unwrap_err().to_string();
        assert!(err.contains("one-strong"));
    }

    #[test]
    fn missing_cifar_root_has_hint() {
        let c = TrainConfig::cifar10_wrn28_2();
        if std::env::var_os(DATA_ROOT_ENV).is_none() {
            let err = c.dataset.load().unwrap_err().to_string();
            assert!(err.contains(DATA_ROOT_ENV));
        }
    }
}
