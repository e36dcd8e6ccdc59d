//! Run configuration: a single JSON file merged with flat dotted-key
//! overrides (`--train.lr 0.0001`), precedence flags > file > defaults.
//! Unknown keys are rejected before any compute runs.

use crate::data::{io::FrameFormat, SynthConfig};
use crate::error::{Error, Result};
use crate::loss::{LossConfig, ValueDomain, WeightScheme};
use crate::model::ModelConfig;
use crate::trainer::{ConfigDigests, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Which weight table the losses and balanced errors use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchemeConfig {
    /// Rain-rate table (mm/h).
    Hko,
    /// Reflectivity table (dBZ).
    Srad,
    /// Reflectivity-style table rescaled onto [0, 1].
    Normalized,
    Uniform,
    Custom {
        thresholds: Vec<f64>,
        weights: Vec<f64>,
        domain: ValueDomain,
    },
}

impl Default for SchemeConfig {
    fn default() -> Self {
        SchemeConfig::Normalized
    }
}

impl SchemeConfig {
    pub fn build(&self) -> Result<WeightScheme> {
        Ok(match self {
            SchemeConfig::Hko => WeightScheme::hko_rainrate(),
            SchemeConfig::Srad => WeightScheme::srad_dbz(),
            SchemeConfig::Normalized => WeightScheme::normalized_default(),
            SchemeConfig::Uniform => WeightScheme::uniform(ValueDomain::Normalized),
            SchemeConfig::Custom {
                thresholds,
                weights,
                domain,
            } => WeightScheme::new(thresholds.clone(), weights.clone(), *domain)?,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda_pixel: f64,
    pub lambda_gdl: f64,
    pub gdl_exponent: i32,
    pub scheme: SchemeConfig,
}

impl Default for LossSection {
    fn default() -> Self {
        let base = LossConfig::default();
        LossSection {
            lambda_pixel: base.lambda_pixel,
            lambda_gdl: base.lambda_gdl,
            gdl_exponent: base.gdl_exponent,
            scheme: SchemeConfig::default(),
        }
    }
}

impl LossSection {
    pub fn to_parts(&self) -> Result<(LossConfig, WeightScheme)> {
        let cfg = LossConfig {
            lambda_pixel: self.lambda_pixel,
            lambda_gdl: self.lambda_gdl,
            gdl_exponent: self.gdl_exponent,
        };
        cfg.validate()?;
        Ok((cfg, self.scheme.build()?))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root directory (written by gen-data, read by train/evaluate).
    pub root: String,
    pub format: FrameFormat,
    /// Observations consumed and future steps predicted per sample.
    pub j: usize,
    pub k: usize,
    pub window_stride: usize,
    /// Activity floor for the abrupt-all-zero filter.
    pub eps_act: f64,
    pub synth: SynthConfig,
    pub train_sequences: usize,
    pub val_sequences: usize,
    pub test_sequences: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: "data".into(),
            format: FrameFormat::Pgm,
            j: 4,
            k: 6,
            window_stride: 1,
            eps_act: 1e-3,
            synth: SynthConfig::default(),
            train_sequences: 64,
            val_sequences: 8,
            test_sequences: 8,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.j < 2 {
            return Err(Error::Config("data.j must be at least 2 (flow needs a frame pair)".into()));
        }
        if self.k < 1 || self.window_stride < 1 {
            return Err(Error::Config("data.k and data.window_stride must be >= 1".into()));
        }
        if self.eps_act < 0.0 {
            return Err(Error::Config("data.eps_act must be >= 0".into()));
        }
        self.synth.validate()
    }

    /// Synth settings for one split: distinct seed stream and sequence count.
    pub fn synth_for_split(&self, split: &str) -> Result<SynthConfig> {
        let (offset, count) = match split {
            "train" => (0u64, self.train_sequences),
            "val" => (1, self.val_sequences),
            "test" => (2, self.test_sequences),
            other => {
                return Err(Error::Config(format!(
                    "unknown split {other} (expected train, val or test)"
                )))
            }
        };
        Ok(SynthConfig {
            seed: self.synth.seed.wrapping_add(offset.wrapping_mul(0x9e37_79b9)),
            num_sequences: count,
            ..self.synth.clone()
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Skill thresholds in the data's intensity domain; empty derives them
    /// from the weight scheme's boundaries.
    pub thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { thresholds: vec![] }
    }
}

impl EvalConfig {
    pub fn thresholds_for(&self, scheme: &WeightScheme) -> Vec<f64> {
        if !self.thresholds.is_empty() {
            self.thresholds.clone()
        } else if !scheme.thresholds.is_empty() {
            scheme.thresholds.clone()
        } else {
            vec![0.25, 0.5]
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub precision: Precision,
    pub out: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.loss.to_parts()?;
        let (h, w) = (self.data.synth.height, self.data.synth.width);
        if (self.model.input_height, self.model.input_width) != (h, w) {
            return Err(Error::Config(format!(
                "model input {}x{} does not match synth frames {h}x{w}",
                self.model.input_height, self.model.input_width
            )));
        }
        Ok(())
    }

    pub fn digests(&self) -> ConfigDigests {
        ConfigDigests {
            model: crate::trainer::digest_of(&self.model),
            data: crate::trainer::digest_of(&self.data),
            loss: crate::trainer::digest_of(&self.loss),
        }
    }
}

/// A default config whose model matches the default synthetic frame size.
impl RunConfig {
    pub fn desk_default() -> Self {
        let data = DataConfig::default();
        let model = ModelConfig {
            input_height: data.synth.height,
            input_width: data.synth.width,
            ..ModelConfig::default()
        };
        RunConfig {
            out: "out".into(),
            data,
            model,
            ..RunConfig::default()
        }
    }
}

fn parse_override_value(raw: &str) -> serde_json::Value {
    // Accept JSON scalars/arrays; anything unparsable is a plain string.
    serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()))
}

fn set_path(root: &mut serde_json::Value, path: &str, value: serde_json::Value) -> Result<()> {
    let mut cursor = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("override key '{path}' has an empty segment")));
        }
        if !cursor.is_object() {
            return Err(Error::Config(format!(
                "override key '{path}': segment '{part}' is not an object"
            )));
        }
        let map = cursor.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cursor = map
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("paths have at least one segment")
}

/// Parses a config from raw JSON bytes (strict: unknown keys are errors).
pub fn parse_config(bytes: &[u8]) -> Result<RunConfig> {
    let value: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| Error::Config(format!("config JSON: {e}")))?;
    from_value(value)
}

fn from_value(value: serde_json::Value) -> Result<RunConfig> {
    let cfg: RunConfig =
        serde_json::from_value(value).map_err(|e| Error::Config(format!("config: {e}")))?;
    Ok(cfg)
}

/// Loads the file (when given), applies dotted-key overrides, and validates.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut value = match path {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p.display().to_string(), e))?;
            serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("config JSON: {e}")))?
        }
        None => serde_json::to_value(RunConfig::desk_default()).expect("default serializes"),
    };
    for (key, raw) in overrides {
        set_path(&mut value, key, parse_override_value(raw))?;
    }
    let cfg = from_value(value)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        RunConfig::desk_default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let r = parse_config(br#"{"trian": {}}"#);
        assert!(matches!(r, Err(Error::Config(_))));
        let r2 = parse_config(br#"{"train": {"lr": 0.1, "warp_speed": 9}}"#);
        assert!(matches!(r2, Err(Error::Config(_))));
    }

    #[test]
    fn overrides_beat_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        let mut base = RunConfig::desk_default();
        base.train.lr = 0.5;
        std::fs::write(&path, serde_json::to_vec(&base).unwrap()).unwrap();
        let cfg = load_config(
            Some(&path),
            &[
                ("train.lr".to_string(), "0.0001".to_string()),
                ("model.flow_hidden".to_string(), "32".to_string()),
                ("data.synth.seed".to_string(), "7".to_string()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 0.0001);
        assert_eq!(cfg.model.flow_hidden, 32);
        assert_eq!(cfg.data.synth.seed, 7);
    }

    #[test]
    fn bad_override_key_is_a_validation_error() {
        let r = load_config(None, &[("train.does_not_exist".into(), "1".into())]);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn negative_blob_radius_is_named_in_the_error() {
        let err = load_config(None, &[("data.synth.radius".into(), "[-1.0, 2.0]".into())])
            .unwrap_err()
            .to_string();
        assert!(err.contains("radius"), "{err}");
    }

    #[test]
    fn scheme_configs_build() {
        for (cfg, first_weight) in [
            (SchemeConfig::Hko, 1.0),
            (SchemeConfig::Srad, 1.0),
            (SchemeConfig::Normalized, 1.0),
            (SchemeConfig::Uniform, 1.0),
        ] {
            assert_eq!(cfg.build().unwrap().weights[0], first_weight);
        }
        let custom = SchemeConfig::Custom {
            thresholds: vec![0.5],
            weights: vec![1.0, 4.0],
            domain: ValueDomain::Normalized,
        };
        assert_eq!(custom.build().unwrap().pixel_weight(0.7), 4.0);
    }

    #[test]
    fn split_seed_derivation_is_stable_and_distinct() {
        let data = DataConfig::default();
        let a = data.synth_for_split("train").unwrap();
        let b = data.synth_for_split("val").unwrap();
        let c = data.synth_for_split("test").unwrap();
        assert_eq!(a.seed, data.synth.seed);
        assert_ne!(b.seed, c.seed);
        assert_eq!(a.num_sequences, 64);
        assert_eq!(b.num_sequences, 8);
        assert!(data.synth_for_split("dev").is_err());
    }

    #[test]
    fn mismatched_model_and_frame_size_rejected() {
        let mut cfg = RunConfig::desk_default();
        cfg.model.input_height = 64;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn digest_changes_with_any_section() {
        let base = RunConfig::desk_default();
        let d0 = base.digests();
        let mut other = base.clone();
        other.loss.lambda_gdl = 0.5;
        let d1 = other.digests();
        assert_eq!(d0.model, d1.model);
        assert_ne!(d0.loss, d1.loss);
    }
}
