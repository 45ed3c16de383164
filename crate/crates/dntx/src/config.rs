//! Run configuration: one JSON document with `dataset`, `model`, `train`,
//! `eval` and `serve` sections. Unknown keys are rejected; dotted command
//! line overrides are applied to the JSON before it is typed.

use std::path::{Path, PathBuf};

use dntx_core::audio_exp::AudioExpConfig;
use dntx_core::decouple::DecoupleConfig;
use dntx_core::metrics::{ClassifierConfig, EvidenceConfig, GeometrySource};
use dntx_core::pipeline::ModelConfig;
use dntx_core::synth::DatasetConfig;
use dntx_core::train::{PerceptualMode, Split, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const SEED_ENV: &str = "DNTX_SEED";
pub const SECTIONS: [&str; 5] = ["dataset", "model", "train", "eval", "serve"];

/// End-to-end training settings, with the two pre-training stages nested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub perceptual_mode: PerceptualMode,
    pub eval_every: usize,
    pub target_psnr: Option<f64>,
    pub target_ssim: Option<f64>,
    pub audit: bool,
    /// Clip ids trained end to end; all clips when absent.
    pub clips: Option<Vec<String>>,
    pub split: Split,
    pub decouple: DecoupleConfig,
    pub audio: AudioExpConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            batch_size: t.batch_size,
            max_steps: t.max_steps,
            seed: t.seed,
            perceptual_mode: t.perceptual_mode,
            eval_every: t.eval_every,
            target_psnr: t.target_psnr,
            target_ssim: t.target_ssim,
            audit: t.audit,
            clips: None,
            split: Split::Train,
            decouple: DecoupleConfig::default(),
            audio: AudioExpConfig::default(),
        }
    }
}

impl TrainSection {
    pub fn end_to_end(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            seed: self.seed,
            perceptual_mode: self.perceptual_mode,
            eval_every: self.eval_every,
            target_psnr: self.target_psnr,
            target_ssim: self.target_ssim,
            audit: self.audit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub split: Split,
    pub source: GeometrySource,
    /// Train frame classifiers for the cross-entropy columns.
    pub classifiers: bool,
    pub classifier: ClassifierConfig,
    pub evidence: EvidenceConfig,
    /// Frames timed per stage by `bench`.
    pub bench_frames: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: Split::Test,
            source: GeometrySource::Audio,
            classifiers: true,
            classifier: ClassifierConfig::default(),
            evidence: EvidenceConfig::default(),
            bench_frames: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub bind: String,
    pub fps: f64,
    /// Maximum intensity change per second.
    pub slew: f64,
    /// Clip id whose audio, pose and background drive sessions; the first
    /// clip when absent.
    pub clip: Option<String>,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self { bind: "127.0.0.1:8640".into(), fps: 20.0, slew: 2.0, clip: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub serve: ServeSection,
    /// Run seed; when set it replaces every section seed.
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            serve: ServeSection::default(),
            seed: None,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Parses `section.key.sub=value`. The value is read as JSON and falls back
/// to a plain string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value)> {
    let (path, raw) = s.split_once('=').ok_or_else(|| Error::Config(format!("override {s:?} lacks `=`")))?;
    let keys: Vec<String> = path.split('.').map(str::to_string).collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override path {path:?} has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((keys, value))
}

/// Sets a dotted path, creating intermediate objects.
pub fn apply_override(doc: &mut Value, keys: &[String], value: Value) -> Result<()> {
    let mut cur = doc;
    for (i, k) in keys.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| Error::Config(format!("`{}` is not a section", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert(k.clone(), value);
            return Ok(());
        }
        cur = obj.entry(k.clone()).or_insert_with(|| Value::Object(Default::default()));
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
    }
    unreachable!("non-empty path")
}

/// Splits `--section.key=value` arguments out of a command line.
pub fn extract_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    for a in args {
        match a.strip_prefix("--") {
            Some(body) if body.contains('=') && SECTIONS.iter().any(|s| body.starts_with(&format!("{s}."))) => overrides.push(body.to_string()),
            _ => rest.push(a),
        }
    }
    (rest, overrides)
}

/// Where the run seed came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSource {
    Flag,
    Config,
    Environment,
    Defaults,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub config: RunConfig,
    pub seed_source: SeedSource,
}

/// File, then overrides, then `output_dir`, then the seed: `--seed` beats the
/// config's `seed`, which beats `DNTX_SEED`.
pub fn resolve(
    file: Option<&Path>,
    overrides: &[String],
    seed_flag: Option<u64>,
    env_seed: Option<&str>,
    out: Option<&Path>,
) -> Result<Resolved> {
    let mut doc = match file {
        Some(p) => {
            let s = std::fs::read_to_string(p).map_err(Error::io(p))?;
            serde_json::from_str(&s).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    if !doc.is_object() {
        return Err(Error::Config("configuration must be a JSON object".into()));
    }
    for o in overrides {
        let (keys, v) = parse_override(o)?;
        apply_override(&mut doc, &keys, v)?;
    }
    let mut config: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(o) = out {
        config.output_dir = o.to_path_buf();
    }
    let env = match env_seed {
        Some(s) => Some(s.trim().parse::<u64>().map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?),
        None => None,
    };
    let (seed, seed_source) = match (seed_flag, config.seed, env) {
        (Some(s), _, _) => (Some(s), SeedSource::Flag),
        (None, Some(s), _) => (Some(s), SeedSource::Config),
        (None, None, Some(s)) => (Some(s), SeedSource::Environment),
        _ => (None, SeedSource::Defaults),
    };
    if let Some(s) = seed {
        config.apply_seed(s);
    }
    config.validate()?;
    Ok(Resolved { config, seed_source })
}

impl RunConfig {
    /// Every section seed is derived from the run seed by a fixed offset.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.dataset.seed = seed;
        self.model.seed = seed.wrapping_add(1);
        self.train.seed = seed.wrapping_add(2);
        self.train.decouple.seed = seed.wrapping_add(3);
        self.train.audio.seed = seed.wrapping_add(4);
        self.eval.classifier.seed = seed.wrapping_add(5);
        self.eval.evidence.seed = seed.wrapping_add(6);
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.end_to_end().validate()?;
        if (self.model.height, self.model.width) != (self.dataset.height, self.dataset.width) {
            return Err(Error::Config(format!(
                "model renders {}x{} but dataset frames are {}x{}",
                self.model.height, self.model.width, self.dataset.height, self.dataset.width
            )));
        }
        if !(self.serve.fps > 0.0) || !(self.serve.slew > 0.0) {
            return Err(Error::Config("serve.fps and serve.slew must be positive".into()));
        }
        if self.eval.bench_frames == 0 {
            return Err(Error::Config("eval.bench_frames must be positive".into()));
        }
        Ok(())
    }

    /// Writes `config.resolved.json` into the output directory.
    pub fn write_resolved(&self, seed_source: SeedSource) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.output_dir).map_err(Error::io(&self.output_dir))?;
        let path = self.output_dir.join("config.resolved.json");
        let doc = serde_json::json!({ "config": self, "seed_source": seed_source });
        std::fs::write(&path, serde_json::to_string_pretty(&doc).expect("serializable")).map_err(Error::io(&path))?;
        Ok(path)
    }
}
