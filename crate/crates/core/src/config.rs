//! Flat `key = value` configuration files and command-line overrides.
//!
//! Every config struct is plain serde data. Overrides are applied through its
//! JSON form: a key must already exist, and the new value is parsed to the
//! type of the current one. This rejects unknown keys and bad values with a
//! configuration error.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::heads::Paradigm;
use crate::model::ModelConfig;
use crate::task::Task;

/// Parses `key = value` lines. Blank lines and lines starting with `#` are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::config(format!("line {}: expected `key = value`, got {line:?}", i + 1)));
        };
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::config(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses one `--set key=value` argument.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::config(format!("override {s:?} is not of the form key=value"))),
    }
}

/// Reads a config file: flat `key = value`, or a JSON object such as a
/// previously written `resolved_config.json`.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })?;
        let Value::Object(map) = v else {
            return Err(Error::config(format!("{} is not a JSON object", path.display())));
        };
        return Ok(map
            .into_iter()
            .map(|(k, v)| {
                let s = match v {
                    Value::String(s) => s,
                    Value::Null => String::new(),
                    other => other.to_string(),
                };
                (k, s)
            })
            .collect());
    }
    parse_kv(&text)
}

fn parse_as(key: &str, current: &Value, raw: &str) -> Result<Value> {
    let bad = |what: &str| Error::config(format!("{key} = {raw:?}: expected {what}"));
    Ok(match current {
        Value::Bool(_) => match raw {
            "true" | "1" | "yes" => Value::Bool(true),
            "false" | "0" | "no" => Value::Bool(false),
            _ => return Err(bad("a boolean")),
        },
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad("a non-negative integer"))?),
        Value::Number(_) => {
            let f: f64 = raw.parse().map_err(|_| bad("a number"))?;
            if !f.is_finite() {
                return Err(bad("a finite number"));
            }
            Value::from(f)
        }
        Value::String(_) => Value::String(raw.to_string()),
        // Optional values: empty means unset.
        Value::Null => {
            if raw.is_empty() {
                Value::Null
            } else if let Ok(n) = raw.parse::<u64>() {
                Value::from(n)
            } else {
                Value::String(raw.to_string())
            }
        }
        _ => return Err(bad("a scalar")),
    })
}

/// Applies `pairs` in order on top of `base`.
pub fn apply<T: Serialize + DeserializeOwned>(base: &T, pairs: &[(String, String)]) -> Result<T> {
    let mut v = serde_json::to_value(base).expect("config serializes");
    let map = v.as_object_mut().expect("config is a struct");
    for (k, raw) in pairs {
        let Some(current) = map.get(k) else {
            let known: Vec<&str> = map.keys().map(String::as_str).collect();
            return Err(Error::config(format!("unknown key {k:?}; known keys: {}", known.join(", "))));
        };
        let new = parse_as(k, current, raw)?;
        map.insert(k.clone(), new);
    }
    serde_json::from_value(v).map_err(|e| Error::config(format!("invalid configuration: {e}")))
}

/// Flat string view used to diff two configs.
pub fn to_flat(cfg: &impl Serialize) -> BTreeMap<String, String> {
    let v = serde_json::to_value(cfg).expect("config serializes");
    v.as_object()
        .expect("config is a struct")
        .iter()
        .map(|(k, v)| (k.clone(), v.to_string()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub paradigm: Paradigm,
    pub shared_encoder: bool,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub head_layers: usize,
    pub codebook_size: usize,
    pub patch: usize,
    pub max_text_len: usize,
    pub diffusion_steps: usize,
    pub fm_steps: usize,
    pub maskgit_iters: usize,
    pub mar_mlp_layers: usize,
    pub task_token: bool,

    pub lambda_pixel: f64,
    pub lambda_depth: f64,
    pub lambda_seg: f64,
    pub lambda_und: f64,

    pub steps: usize,
    pub batch_size: usize,
    pub accum: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub text_warmup_steps: usize,
    pub post_phase_pixel_steps: usize,
    pub vq_fit_scenes: usize,

    pub checkpoint_every: usize,
    /// Held-out generation losses every this many steps; 0 disables.
    pub eval_every: usize,
    pub n_heldout: usize,

    /// Ablation schedule.
    pub pretrain_steps: usize,
    pub row_steps: usize,

    /// Eval scenes scored by generation metrics; 0 means all.
    pub n_eval_gen: usize,

    pub seed: u64,
    /// Empty means `<output root>/data`.
    pub data_dir: String,
    pub out_dir: String,
    pub init_from: Option<String>,
    pub resume: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        TrainConfig {
            paradigm: m.paradigm,
            shared_encoder: m.shared_encoder,
            d: m.d,
            layers: m.layers,
            heads: m.heads,
            enc_layers: m.enc_layers,
            head_layers: m.head_layers,
            codebook_size: m.codebook_size,
            patch: m.patch,
            max_text_len: m.max_text_len,
            diffusion_steps: m.diffusion_steps,
            fm_steps: m.fm_steps,
            maskgit_iters: m.maskgit_iters,
            mar_mlp_layers: m.mar_mlp_layers,
            task_token: m.task_token,
            lambda_pixel: 1.0,
            lambda_depth: 1.0,
            lambda_seg: 1.0,
            lambda_und: 1.0,
            steps: 2000,
            batch_size: 16,
            accum: 1,
            lr: 3e-4,
            weight_decay: 0.01,
            grad_clip: 1.0,
            text_warmup_steps: 500,
            post_phase_pixel_steps: 0,
            vq_fit_scenes: 256,
            checkpoint_every: 500,
            eval_every: 100,
            n_heldout: 16,
            pretrain_steps: 2000,
            row_steps: 1000,
            n_eval_gen: 0,
            seed: 0,
            data_dir: String::new(),
            out_dir: String::new(),
            init_from: None,
            resume: None,
        }
    }
}

impl TrainConfig {
    pub fn weight(&self, task: Task) -> f64 {
        match task {
            Task::Und => self.lambda_und,
            Task::Pixel => self.lambda_pixel,
            Task::Depth => self.lambda_depth,
            Task::Seg => self.lambda_seg,
        }
    }

    pub fn set_weights(&mut self, w: [f64; 4]) {
        [self.lambda_pixel, self.lambda_depth, self.lambda_seg, self.lambda_und] = w;
    }

    pub fn active_tasks(&self) -> Vec<Task> {
        Task::ALL.into_iter().filter(|&t| self.weight(t) > 0.0).collect()
    }

    pub fn model_config(&self, image_size: usize) -> ModelConfig {
        ModelConfig {
            paradigm: self.paradigm,
            shared_encoder: self.shared_encoder,
            d: self.d,
            layers: self.layers,
            heads: self.heads,
            enc_layers: self.enc_layers,
            head_layers: self.head_layers,
            codebook_size: self.codebook_size,
            patch: self.patch,
            image_size,
            max_text_len: self.max_text_len,
            diffusion_steps: self.diffusion_steps,
            fm_steps: self.fm_steps,
            maskgit_iters: self.maskgit_iters,
            mar_mlp_layers: self.mar_mlp_layers,
            task_token: self.task_token,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("lambda_pixel", self.lambda_pixel),
            ("lambda_depth", self.lambda_depth),
            ("lambda_seg", self.lambda_seg),
            ("lambda_und", self.lambda_und),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(format!("{name} must be a non-negative number (got {w})")));
            }
        }
        if self.active_tasks().is_empty() {
            return Err(Error::config("all loss weights are zero"));
        }
        for (name, v) in [("batch_size", self.batch_size), ("accum", self.accum), ("vq_fit_scenes", self.vq_fit_scenes)] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr must be > 0"));
        }
        if self.grad_clip < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config("grad_clip and weight_decay must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_eval: usize,
    pub image_size: usize,
    pub n_objects: usize,
    pub min_objects: usize,
    pub seed: u64,
    pub out_dir: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n_train: 1000, n_eval: 200, image_size: 32, n_objects: 3, min_objects: 2, seed: 0, out_dir: String::new() }
    }
}

impl DataConfig {
    pub fn spec(&self) -> crate::scene::SceneSpec {
        crate::scene::SceneSpec {
            image_size: self.image_size,
            n_objects: self.n_objects,
            min_objects: Some(self.min_objects),
            ..Default::default()
        }
    }
}

/// Settings of the `eval` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: String,
    /// Empty means the checkpoint's own `data_dir`.
    pub data_dir: String,
    /// `eval` or `train`; the latter needs `allow_train_eval`.
    pub split: String,
    pub allow_train_eval: bool,
    /// Scenes scored by generation metrics; 0 means all.
    pub n_eval_gen: usize,
    /// Rows of `eval_grid.png`; 0 skips the grid.
    pub grid_rows: usize,
    pub seed: u64,
    pub out_dir: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            checkpoint: String::new(),
            data_dir: String::new(),
            split: "eval".into(),
            allow_train_eval: false,
            n_eval_gen: 0,
            grid_rows: 4,
            seed: 0,
            out_dir: String::new(),
        }
    }
}

/// Settings of the `generate` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub checkpoint: String,
    pub data_dir: String,
    /// pixel, depth or seg.
    pub task: String,
    pub split: String,
    pub count: usize,
    /// Fixed prompt text; empty samples one from the task's pool per scene.
    pub prompt: String,
    pub seed: u64,
    pub out_dir: String,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            checkpoint: String::new(),
            data_dir: String::new(),
            task: "pixel".into(),
            split: "eval".into(),
            count: 4,
            prompt: String::new(),
            seed: 0,
            out_dir: String::new(),
        }
    }
}
