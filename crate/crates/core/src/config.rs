//! Run configuration: one TOML file with a table per component, plus
//! `key=value` overrides from the command line. Unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::linking::LinkConfig;
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset root holding `train/` and `eval/`.
    pub data: PathBuf,
    /// Run directory for checkpoints, traces, detections and reports.
    pub run: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            run: "runs/default".into(),
        }
    }
}

/// Which published ablation a sweep mirrors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    /// Clip length T = 1 against the configured T.
    Temporal,
    /// Time-wise attention and knot refinement on/off.
    Components,
    /// Inputs of the 3-D head.
    Head3dInputs,
    /// λ_loc / λ_cls pairs.
    LossWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub sweep: Sweep,
    pub seeds: Vec<u64>,
    /// Training steps per arm (every arm gets the same budget).
    pub steps: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            sweep: Sweep::Components,
            seeds: vec![0, 1, 2],
            steps: 3000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub link: LinkConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
    pub ablate: AblateConfig,
}

impl RunConfig {
    /// Parse TOML text after applying `a.b.c=value` overrides; values are
    /// read as TOML and fall back to plain strings.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.size != self.synth.size {
            return Err(Error::Config(format!(
                "model.size {} differs from synth.size {}",
                self.model.size, self.synth.size
            )));
        }
        if self.model.knots != self.synth.knots {
            return Err(Error::Config(format!(
                "model.knots {} differs from synth.knots {}",
                self.model.knots, self.synth.knots
            )));
        }
        if self.model.num_classes < self.synth.num_classes {
            return Err(Error::Config(format!(
                "model.num_classes {} cannot hold synth.num_classes {}",
                self.model.num_classes, self.synth.num_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.eval.iou_threshold) || !(0.0..=1.0).contains(&self.decode.threshold) {
            return Err(Error::Config("thresholds must lie in [0, 1]".into()));
        }
        if self.ablate.seeds.is_empty() {
            return Err(Error::Config("ablate.seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key is present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(RunConfig::from_toml("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["bogus = 1", "[model]\nwidth = 3", "[train.loss]\nlambda = 2.0"] {
            assert!(matches!(RunConfig::from_toml(text, &[]), Err(Error::Config(_))), "{text}");
        }
        assert!(RunConfig::from_toml("", &["model.nope=1".into()]).is_err());
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::from_toml(
            "[train]\nsteps = 5",
            &[
                "train.steps=9".into(),
                "model.twa.enabled=false".into(),
                "paths.run=out/x".into(),
                "model.head3d_inputs=[\"raw_clip\", \"heatmaps\"]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.steps, 9);
        assert!(!cfg.model.twa.enabled);
        assert_eq!(cfg.paths.run, PathBuf::from("out/x"));
        assert_eq!(cfg.model.head3d_inputs.len(), 2);
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::from_toml("", &["train.steps=3".into()]).unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap(), &[]).unwrap(), cfg);
    }

    #[test]
    fn cross_checks() {
        assert!(RunConfig::from_toml("[model]\nknots = 2", &[]).is_err());
        assert!(RunConfig::from_toml("[model]\nnum_classes = 2", &[]).is_err());
    }
}
