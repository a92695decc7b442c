//! Run configuration files: `key = value` lines, `#` starts a comment.
//! Unknown keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::dataio::{StopPattern, SynthOptions};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("d_app", "appearance feature channels"),
    ("d_mid", "hidden channels of both stream encoders"),
    ("d_h", "memory state channels"),
    ("kernel", "memory convolution kernel size (odd)"),
    ("stride", "feature grid stride, a power of two"),
    ("bidirectional", "run the memory in both temporal directions"),
    ("appearance", "appearance input: stub, rgb or none"),
    ("motion", "motion input: stub or constant"),
    ("memory", "memory module: gru, rnn or none (parameter-matched conv stack)"),
    ("stack_layers", "layers of the memoryless conv stack"),
    ("learning_rate", "initial learning rate"),
    ("lr_decay", "learning-rate factor applied after every epoch"),
    ("weight_decay", "decoupled weight decay"),
    ("clip_bound", "elementwise gradient clipping bound"),
    ("rho", "RMSProp averaging factor"),
    ("eps", "RMSProp epsilon"),
    ("batch_frames", "frames per batch (unroll length)"),
    ("iterations", "memory training iterations"),
    ("aug_fraction", "share of batches with stop-and-go augmentation"),
    ("stop_share", "share of augmented batches freezing the tail"),
    ("freeze_len", "frozen frames per augmented batch"),
    ("crop", "square training crop in pixels, 0 for full frames"),
    ("pretrain_iterations", "stream encoder pretraining iterations"),
    ("pretrain_lr", "stream encoder pretraining learning rate"),
    ("log_every", "iterations between progress lines"),
    ("rng_seed", "seed for batch sampling and initialisation"),
    ("height", "synthetic frame height"),
    ("width", "synthetic frame width"),
    ("frames", "synthetic clip length"),
    ("min_objects", "fewest objects per synthetic clip"),
    ("max_objects", "most objects per synthetic clip (at most 3)"),
    ("distractor_prob", "chance that an extra object never moves"),
    ("stop_prob", "chance that a moving object pauses"),
    ("camera_prob", "chance of camera motion"),
    ("min_speed", "slowest object speed, pixels per frame"),
    ("max_speed", "fastest object speed, pixels per frame"),
    ("max_camera_speed", "fastest camera speed, pixels per frame"),
    ("min_size", "smallest object radius or half side"),
    ("max_size", "largest object radius or half side"),
    ("stop_pattern", "random, tail:K or head:K"),
    ("data_dir", "default dataset directory"),
    ("out_dir", "default output directory"),
];

impl std::fmt::Display for StopPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StopPattern::Random => f.write_str("random"),
            StopPattern::Tail(k) => write!(f, "tail:{k}"),
            StopPattern::Head(k) => write!(f, "head:{k}"),
        }
    }
}

impl std::str::FromStr for StopPattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("stop_pattern: expected random, tail:K or head:K, got '{s}'"));
        if s == "random" {
            return Ok(StopPattern::Random);
        }
        let (kind, k) = s.split_once(':').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        match kind {
            "tail" => Ok(StopPattern::Tail(k)),
            "head" => Ok(StopPattern::Head(k)),
            _ => Err(bad()),
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

impl SynthOptions {
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("height".into(), self.height.to_string()),
            ("width".into(), self.width.to_string()),
            ("frames".into(), self.frames.to_string()),
            ("min_objects".into(), self.min_objects.to_string()),
            ("max_objects".into(), self.max_objects.to_string()),
            ("distractor_prob".into(), self.distractor_prob.to_string()),
            ("stop_prob".into(), self.stop_prob.to_string()),
            ("camera_prob".into(), self.camera_prob.to_string()),
            ("min_speed".into(), self.min_speed.to_string()),
            ("max_speed".into(), self.max_speed.to_string()),
            ("max_camera_speed".into(), self.max_camera_speed.to_string()),
            ("min_size".into(), self.min_size.to_string()),
            ("max_size".into(), self.max_size.to_string()),
            ("stop_pattern".into(), self.stop_pattern.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "frames" => self.frames = parse(key, value)?,
            "min_objects" => self.min_objects = parse(key, value)?,
            "max_objects" => self.max_objects = parse(key, value)?,
            "distractor_prob" => self.distractor_prob = parse(key, value)?,
            "stop_prob" => self.stop_prob = parse(key, value)?,
            "camera_prob" => self.camera_prob = parse(key, value)?,
            "min_speed" => self.min_speed = parse(key, value)?,
            "max_speed" => self.max_speed = parse(key, value)?,
            "max_camera_speed" => self.max_camera_speed = parse(key, value)?,
            "min_size" => self.min_size = parse(key, value)?,
            "max_size" => self.max_size = parse(key, value)?,
            "stop_pattern" => self.stop_pattern = value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthOptions,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? || self.train.set(key, value)? || self.synth.set(key, value)? {
            return Ok(());
        }
        match key {
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{line}'", no + 1))
            })?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = self.model.to_pairs();
        out.extend(self.train.to_pairs());
        out.extend(self.synth.to_pairs());
        for (k, v) in [("data_dir", &self.data_dir), ("out_dir", &self.out_dir)] {
            if let Some(p) = v {
                out.push((k.into(), p.display().to_string()));
            }
        }
        out
    }

    /// The configuration as a commented file that parses back to itself.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_pairs() {
            let doc = KEYS.iter().find(|(n, _)| *n == k).map(|(_, d)| *d).unwrap_or("");
            let _ = writeln!(out, "# {doc}\n{k} = {v}");
        }
        out
    }
}
