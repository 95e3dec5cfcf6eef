//! `key=value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. A `preset` key selects the
//! model defaults before the other keys apply, whatever its position.
//! Unknown and duplicate keys are errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::backbone::ModelConfig;
use crate::data::SceneSpec;
use crate::error::{cfg_err, Error, Result};
use crate::train::TrainConfig;

/// Parses `key=value` lines into `key -> (line number, value)`.
pub fn parse_kv(text: &str, source: &str) -> Result<BTreeMap<String, (usize, String)>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::parse(
                source,
                i + 1,
                format!("expected key=value, got {line:?}"),
            ));
        };
        let k = k.trim().to_string();
        if k.is_empty() {
            return Err(Error::parse(source, i + 1, "empty key"));
        }
        if out
            .insert(k.clone(), (i + 1, v.trim().to_string()))
            .is_some()
        {
            return Err(Error::parse(source, i + 1, format!("duplicate key {k:?}")));
        }
    }
    Ok(out)
}

/// Everything a CLI run can be configured with.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scene: SceneSpec,
    pub n_clips: usize,
}

impl RunConfig {
    pub fn from_preset(preset: &str) -> Result<Self> {
        let model = ModelConfig::preset(preset)?;
        let d = SceneSpec::default();
        let scene = SceneSpec {
            rows: d.rows.min(model.height / 8).max(1),
            cols: d.cols.min(model.width / 8).max(1),
            frames: model.frames * model.sampling_stride,
            frame_stride: model.sampling_stride,
            height: model.height,
            width: model.width,
            num_classes: model.num_classes.max(2),
            ..d
        };
        Ok(Self {
            preset: preset.to_string(),
            model,
            train: TrainConfig::default(),
            scene,
            n_clips: 200,
        })
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let kv = parse_kv(text, source)?;
        let preset = kv.get("preset").map(|(_, v)| v.as_str()).unwrap_or("toy");
        let mut cfg = Self::from_preset(preset)?;
        for (k, (line, v)) in &kv {
            if k == "preset" {
                continue;
            }
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::parse(source, *line, m),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies one key; unknown keys are config errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "n_clips" {
            self.n_clips = value
                .trim()
                .parse()
                .map_err(|_| cfg_err!("n_clips: bad value {value:?}"))?;
            return Ok(());
        }
        if self.model.set(key, value)?
            || self.train.set(key, value)?
            || self.scene.set(key, value)?
        {
            return Ok(());
        }
        Err(cfg_err!("unknown key {key:?}"))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.scene.validate()
    }

    /// Resolved configuration as sorted `key=value` lines.
    pub fn to_lines(&self) -> Vec<String> {
        let mut kv: Vec<(String, String)> = vec![
            ("preset".into(), self.preset.clone()),
            ("n_clips".into(), self.n_clips.to_string()),
        ];
        kv.extend(self.model.to_kv());
        kv.extend(self.train.to_kv());
        kv.extend(self.scene.to_kv());
        kv.into_iter().map(|(k, v)| format!("{k}={v}")).collect()
    }
}
