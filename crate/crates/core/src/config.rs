//! Experiment configuration: a versioned, sectioned `key = value` text file.
//!
//! ```text
//! version = 1
//! seed = 0
//!
//! [encoder]
//! embed_dim = 32
//! prompted_layers = 0, 1, 2
//!
//! [prompt]
//! method = iprompt
//! pool_size = 20
//! ```
//!
//! `#` starts a comment. Unknown sections or keys are errors; omitted keys
//! keep their defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SyntheticSpec;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::harness::{LearnerConfig, Method, OffsetMode, PretrainConfig, TrainConfig};
use crate::head::ImportanceSource;
use crate::prompts::Insertion;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub pretrain_classes: usize,
    pub pretrain_per_class: usize,
    pub noise: f64,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            per_class: 40,
            test_per_class: 40,
            pretrain_classes: 64,
            pretrain_per_class: 30,
            noise: 12.0,
            jitter: 0.06,
            seed: 0,
        }
    }
}

/// Pretraining classes come from a different recipe seed, so they never
/// coincide with the continual classes.
const PRETRAIN_SALT: u64 = 0x5EED_0F_BA5E;

impl DataConfig {
    pub fn continual_spec(&self, image_size: usize, channels: usize) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.classes,
            per_class_count: self.per_class,
            image_size,
            channels,
            seed: self.seed,
            noise: self.noise,
            jitter: self.jitter,
        }
    }

    pub fn pretrain_spec(&self, image_size: usize, channels: usize) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.pretrain_classes,
            per_class_count: self.pretrain_per_class,
            seed: self.seed ^ PRETRAIN_SALT,
            ..self.continual_spec(image_size, channels)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub backbone: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            backbone: "backbone.ipvt".into(),
            reports: "reports".into(),
        }
    }
}

impl PathsConfig {
    /// Paths relative to `root`; absolute paths are kept.
    pub fn under(&self, root: &Path) -> PathsConfig {
        PathsConfig {
            data_dir: root.join(&self.data_dir),
            backbone: root.join(&self.backbone),
            reports: root.join(&self.reports),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub learner: LearnerConfig,
    pub schedule: String,
    /// Class-to-task assignment seed; the run seed when unset.
    pub schedule_seed: Option<u64>,
    pub training: TrainConfig,
    pub pretrain: PretrainConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    /// A reduced desk setup: 16-pixel images, four layers, eight classes in
    /// four tasks.
    fn default() -> Self {
        Self {
            seed: 0,
            encoder: EncoderConfig {
                image_size: 16,
                patch_size: 4,
                channels: 3,
                embed_dim: 32,
                num_heads: 4,
                num_layers: 4,
                mlp_ratio: 2.0,
                prompted_layers: vec![0, 1, 2],
            },
            learner: LearnerConfig::default(),
            schedule: "B0-Inc2".into(),
            schedule_seed: None,
            training: TrainConfig {
                lr: 0.003,
                ..TrainConfig::default()
            },
            pretrain: PretrainConfig {
                epochs: 10,
                ..PretrainConfig::default()
            },
            data: DataConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn cfg_err(line: usize, key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        key: key.to_string(),
        message: message.into(),
    }
}

fn parse_num<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| {
        cfg_err(
            line,
            key,
            format!("cannot parse `{v}` as {}", std::any::type_name::<T>()),
        )
    })
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(cfg_err(
            line,
            key,
            format!("expected true or false, got `{v}`"),
        )),
    }
}

fn parse_list(line: usize, key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| parse_num(line, key, s.trim()))
        .collect()
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .unwrap_or(v)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut section = String::new();
        let mut version = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| cfg_err(line, content, "unterminated section header"))?
                    .trim();
                if ![
                    "encoder", "prompt", "schedule", "training", "pretrain", "data", "paths",
                ]
                .contains(&name)
                {
                    return Err(cfg_err(line, name, "unknown section"));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| cfg_err(line, content, "expected `key = value`"))?;
            let (key, value) = (key.trim(), unquote(value.trim()));
            if section.is_empty() && key == "version" {
                version = Some(parse_num::<u32>(line, key, value)?);
                continue;
            }
            cfg.set(&section, key, value, line)?;
        }
        match version {
            Some(CONFIG_VERSION) => {}
            Some(v) => return Err(cfg_err(0, "version", format!("unsupported version {v}"))),
            None => return Err(cfg_err(0, "version", "missing `version = 1`")),
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::parse(&text)
    }

    fn set(&mut self, section: &str, key: &str, v: &str, line: usize) -> Result<()> {
        let unknown = || Err(cfg_err(line, key, format!("unknown key in [{section}]")));
        match section {
            "" => match key {
                "seed" => self.seed = parse_num(line, key, v)?,
                _ => return Err(cfg_err(line, key, "unknown top-level key")),
            },
            "encoder" => {
                let e = &mut self.encoder;
                match key {
                    "image_size" => e.image_size = parse_num(line, key, v)?,
                    "patch_size" => e.patch_size = parse_num(line, key, v)?,
                    "channels" => e.channels = parse_num(line, key, v)?,
                    "embed_dim" => e.embed_dim = parse_num(line, key, v)?,
                    "num_heads" => e.num_heads = parse_num(line, key, v)?,
                    "num_layers" => e.num_layers = parse_num(line, key, v)?,
                    "mlp_ratio" => e.mlp_ratio = parse_num(line, key, v)?,
                    "prompted_layers" => e.prompted_layers = parse_list(line, key, v)?,
                    _ => return unknown(),
                }
            }
            "prompt" => {
                let l = &mut self.learner;
                match key {
                    "method" => {
                        l.method = v
                            .parse()
                            .map_err(|e: Error| cfg_err(line, key, e.to_string()))?
                    }
                    "pool_size" => l.pool.pool_size = parse_num(line, key, v)?,
                    "prompt_length" => l.pool.prompt_length = parse_num(line, key, v)?,
                    "shared" => l.pool.shared = parse_bool(line, key, v)?,
                    "offsets" => {
                        l.offsets = match v {
                            "keyvalue" => OffsetMode::KeyValue,
                            "prenorm" => OffsetMode::PreNorm,
                            _ => return Err(cfg_err(line, key, "expected keyvalue or prenorm")),
                        }
                    }
                    "importance" => {
                        l.importance = match v {
                            "last" => ImportanceSource::LastPrompted,
                            "first" => ImportanceSource::FirstPrompted,
                            _ => return Err(cfg_err(line, key, "expected last or first")),
                        }
                    }
                    "insertion" => {
                        l.insertion = match v {
                            "prefix" => Insertion::Prefix,
                            "prompt-tuning" => Insertion::PromptTuning,
                            _ => {
                                return Err(cfg_err(line, key, "expected prefix or prompt-tuning"))
                            }
                        }
                    }
                    "key_pull" => l.key_pull = parse_num(line, key, v)?,
                    _ => return unknown(),
                }
            }
            "schedule" => match key {
                "spec" => self.schedule = v.to_string(),
                "seed" => self.schedule_seed = Some(parse_num(line, key, v)?),
                _ => return unknown(),
            },
            "training" => {
                let t = &mut self.training;
                match key {
                    "epochs" => t.epochs = parse_num(line, key, v)?,
                    "batch_size" => t.batch_size = parse_num(line, key, v)?,
                    "lr" => t.lr = parse_num(line, key, v)?,
                    "online_points" => t.online_points = parse_num(line, key, v)?,
                    "eval_batch" => t.eval_batch = parse_num(line, key, v)?,
                    "timing" => t.timing = parse_bool(line, key, v)?,
                    _ => return unknown(),
                }
            }
            "pretrain" => {
                let p = &mut self.pretrain;
                match key {
                    "epochs" => p.epochs = parse_num(line, key, v)?,
                    "batch_size" => p.batch_size = parse_num(line, key, v)?,
                    "lr" => p.lr = parse_num(line, key, v)?,
                    "seed" => p.seed = parse_num(line, key, v)?,
                    _ => return unknown(),
                }
            }
            "data" => {
                let d = &mut self.data;
                match key {
                    "classes" => d.classes = parse_num(line, key, v)?,
                    "per_class" => d.per_class = parse_num(line, key, v)?,
                    "test_per_class" => d.test_per_class = parse_num(line, key, v)?,
                    "pretrain_classes" => d.pretrain_classes = parse_num(line, key, v)?,
                    "pretrain_per_class" => d.pretrain_per_class = parse_num(line, key, v)?,
                    "noise" => d.noise = parse_num(line, key, v)?,
                    "jitter" => d.jitter = parse_num(line, key, v)?,
                    "seed" => d.seed = parse_num(line, key, v)?,
                    _ => return unknown(),
                }
            }
            "paths" => {
                let p = &mut self.paths;
                match key {
                    "data_dir" => p.data_dir = v.into(),
                    "backbone" => p.backbone = v.into(),
                    "reports" => p.reports = v.into(),
                    _ => return unknown(),
                }
            }
            _ => unreachable!("sections are checked on entry"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |key: &str, e: Error| cfg_err(0, key, e.to_string());
        self.encoder.validate().map_err(|e| wrap("encoder", e))?;
        self.training.validate().map_err(|e| wrap("training", e))?;
        let d = &self.data;
        if d.classes == 0 || d.per_class == 0 || d.test_per_class == 0 {
            return Err(cfg_err(
                0,
                "data",
                "class and sample counts must be positive",
            ));
        }
        if d.pretrain_classes == 0 || d.pretrain_per_class == 0 {
            return Err(cfg_err(
                0,
                "data",
                "pretraining class and sample counts must be positive",
            ));
        }
        let p = &self.pretrain;
        if p.epochs == 0 || p.batch_size == 0 || !(p.lr > 0.0 && p.lr.is_finite()) {
            return Err(cfg_err(
                0,
                "pretrain",
                "epochs, batch_size and lr must be positive",
            ));
        }
        if self.learner.pool.prompt_length == 0 && self.learner.method != Method::Finetune {
            return Err(cfg_err(
                0,
                "prompt_length",
                "must be positive for prompt methods",
            ));
        }
        crate::harness::build_schedule(&self.schedule, d.classes, 0)
            .map_err(|e| wrap("spec", e))?;
        Ok(())
    }

    pub fn schedule_seed(&self) -> u64 {
        self.schedule_seed.unwrap_or(self.seed)
    }

    /// Canonical text form; parsing it gives back the same config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let e = &self.encoder;
        let l = &self.learner;
        let t = &self.training;
        let p = &self.pretrain;
        let d = &self.data;
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        };
        let _ = writeln!(s, "version = {CONFIG_VERSION}\nseed = {}\n", self.seed);
        let _ = writeln!(
            s,
            "[encoder]\nimage_size = {}\npatch_size = {}\nchannels = {}\nembed_dim = {}\nnum_heads = {}\nnum_layers = {}\nmlp_ratio = {:?}\nprompted_layers = {}\n",
            e.image_size, e.patch_size, e.channels, e.embed_dim, e.num_heads, e.num_layers, e.mlp_ratio,
            list(&e.prompted_layers)
        );
        let _ = writeln!(
            s,
            "[prompt]\nmethod = {}\npool_size = {}\nprompt_length = {}\nshared = {}\noffsets = {}\nimportance = {}\ninsertion = {}\nkey_pull = {:?}\n",
            l.method,
            l.pool.pool_size,
            l.pool.prompt_length,
            l.pool.shared,
            match l.offsets {
                OffsetMode::KeyValue => "keyvalue",
                OffsetMode::PreNorm => "prenorm",
            },
            match l.importance {
                ImportanceSource::LastPrompted => "last",
                ImportanceSource::FirstPrompted => "first",
            },
            match l.insertion {
                Insertion::Prefix => "prefix",
                Insertion::PromptTuning => "prompt-tuning",
            },
            l.key_pull
        );
        let _ = writeln!(s, "[schedule]\nspec = {}", self.schedule);
        if let Some(seed) = self.schedule_seed {
            let _ = writeln!(s, "seed = {seed}");
        }
        let _ = writeln!(
            s,
            "\n[training]\nepochs = {}\nbatch_size = {}\nlr = {:?}\nonline_points = {}\neval_batch = {}\ntiming = {}\n",
            t.epochs, t.batch_size, t.lr, t.online_points, t.eval_batch, t.timing
        );
        let _ = writeln!(
            s,
            "[pretrain]\nepochs = {}\nbatch_size = {}\nlr = {:?}\nseed = {}\n",
            p.epochs, p.batch_size, p.lr, p.seed
        );
        let _ = writeln!(
            s,
            "[data]\nclasses = {}\nper_class = {}\ntest_per_class = {}\npretrain_classes = {}\npretrain_per_class = {}\nnoise = {:?}\njitter = {:?}\nseed = {}\n",
            d.classes, d.per_class, d.test_per_class, d.pretrain_classes, d.pretrain_per_class, d.noise, d.jitter, d.seed
        );
        let _ = write!(
            s,
            "[paths]\ndata_dir = {}\nbackbone = {}\nreports = {}\n",
            self.paths.data_dir.display(),
            self.paths.backbone.display(),
            self.paths.reports.display()
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_text_round_trips() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let mut other = cfg.clone();
        other.schedule_seed = Some(9);
        other.learner.offsets = OffsetMode::PreNorm;
        other.encoder.mlp_ratio = 1.5;
        assert_eq!(ExperimentConfig::parse(&other.to_text()).unwrap(), other);
    }

    #[test]
    fn overrides_apply() {
        let text = "version = 1\nseed = 4 # run seed\n[prompt]\nmethod = finetune\npool_size = 0\n[schedule]\nspec = sizes:3,5\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.learner.method, Method::Finetune);
        assert_eq!(cfg.learner.pool.pool_size, 0);
        assert_eq!(cfg.schedule, "sizes:3,5");
        assert_eq!(cfg.schedule_seed(), 4);
    }

    #[test]
    fn diagnostics_name_line_and_key() {
        let err = ExperimentConfig::parse("version = 1\n[training]\nepochz = 3\n").unwrap_err();
        assert!(
            matches!(err, Error::Config { line: 3, ref key, .. } if key == "epochz"),
            "{err}"
        );
        let err = ExperimentConfig::parse("version = 1\n[training]\nlr = fast\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 3, ref key, .. } if key == "lr"));
        let err = ExperimentConfig::parse("version = 1\n[nope]\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }));
        assert!(ExperimentConfig::parse("[training]\nepochs = 3\n").is_err());
        assert!(ExperimentConfig::parse("version = 2\n").is_err());
        assert!(ExperimentConfig::parse("version = 1\n[schedule]\nspec = B0-Inc0\n").is_err());
        assert!(ExperimentConfig::parse("version = 1\n[encoder]\nembed_dim = 30\n").is_err());
    }
}
