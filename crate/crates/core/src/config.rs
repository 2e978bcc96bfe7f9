//! Run configuration: a flat key-value text format with dotted section
//! prefixes (`stage1.lambda = 20`, `attack.epsilon = 10/255`). Epsilon
//! values are parsed as exact rationals before conversion so configs
//! never suffer float-literal drift. One top-level seed drives every
//! stage; the GENAF_SEED environment variable overrides it.

use crate::attack::{AttackConfig, NormP};
use crate::error::{Error, Result};
use crate::model::ArchSpec;
use crate::pretrain::PretrainConfig;
use crate::sensitivity::RcConfig;
use crate::stage1::{AdvSchedule, GraphFeatures, Stage1Config};
use crate::stage2::Stage2Config;
use crate::util::sha256_hex;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub experiment_name: String,
    pub output_root: String,
    pub seed: u64,
    /// Checkpoint directory of a provisioned encoder; pre-trains one
    /// when absent.
    pub encoder: Option<String>,
    pub data_train: String,
    pub data_test: String,
    pub arch: ArchSpec,
    pub pretrain: PretrainConfig,
    pub stage1: Stage1Config,
    pub rc: RcConfig,
    pub stage2: Stage2Config,
    /// Evaluation attack.
    pub attack: AttackConfig,
    pub uap_passes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            experiment_name: "experiment".into(),
            output_root: "runs".into(),
            seed: 0,
            encoder: None,
            data_train: String::new(),
            data_test: String::new(),
            arch: ArchSpec::desk(2),
            pretrain: PretrainConfig::default(),
            stage1: Stage1Config::default(),
            rc: RcConfig::default(),
            stage2: Stage2Config::default(),
            attack: AttackConfig::default(),
            uap_passes: 2,
        }
    }
}

impl RunConfig {
    /// Desk-scale preset: synthetic shape datasets, batch 128, 20/20
    /// epochs, and a 5-step training attack; the evaluation attack stays
    /// at the 10-step default.
    pub fn desk(seed: u64) -> Self {
        let mut cfg = RunConfig::default();
        let ds = 7700 + 10 * seed;
        cfg.experiment_name = "desk".into();
        cfg.pretrain.dataset_path = format!("synth:shapes:4:5000:32:{ds}");
        cfg.data_train = format!("synth:shapes:2:1600:32:{}", ds + 1);
        cfg.data_test = format!("synth:shapes:2:400:32:{}", ds + 2);
        cfg.pretrain.epochs = 8;
        cfg.stage1.epochs = 20;
        cfg.stage1.batch_size = 128;
        cfg.stage1.attack.steps = 5;
        cfg.stage1.attack.step_size = cfg.stage1.attack.epsilon / 2.0;
        cfg.stage2.epochs = 20;
        cfg.stage2.batch_size = 128;
        cfg.set_seed(seed);
        cfg
    }

    /// Propagates one seed into every stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.pretrain.augmentation_seed = seed;
        self.stage1.seed = seed;
        self.rc.seed = seed;
        self.stage2.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment_name.is_empty() {
            return Err(Error::Config("experiment_name must not be empty".into()));
        }
        if self.output_root.is_empty() {
            return Err(Error::Config("output_root must not be empty".into()));
        }
        if self.data_train.is_empty() || self.data_test.is_empty() {
            return Err(Error::Config("data.train and data.test are required".into()));
        }
        self.pretrain.validate()?;
        self.stage1.validate()?;
        self.rc.validate()?;
        self.stage2.validate()?;
        self.attack.validate()
    }

    /// Canonical flat serialization; parsing it back reproduces the
    /// identical byte sequence.
    pub fn to_flat_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("experiment_name", self.experiment_name.clone());
        kv("output_root", self.output_root.clone());
        kv("seed", self.seed.to_string());
        kv("encoder", self.encoder.clone().unwrap_or_default());
        kv("data.train", self.data_train.clone());
        kv("data.test", self.data_test.clone());
        kv("arch.input_channels", self.arch.input_channels.to_string());
        kv("arch.input_height", self.arch.input_height.to_string());
        kv("arch.input_width", self.arch.input_width.to_string());
        kv(
            "arch.conv_channels",
            self.arch
                .conv_channels
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv(
            "arch.conv_strides",
            self.arch
                .conv_strides
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("arch.feature_dim", self.arch.feature_dim.to_string());
        kv("arch.num_classes", self.arch.num_classes.to_string());
        kv("arch.bn_eps", self.arch.bn_eps.to_string());
        kv("arch.bn_momentum", self.arch.bn_momentum.to_string());
        kv("pretrain.dataset_path", self.pretrain.dataset_path.clone());
        kv("pretrain.epochs", self.pretrain.epochs.to_string());
        kv("pretrain.batch_size", self.pretrain.batch_size.to_string());
        kv("pretrain.temperature", self.pretrain.temperature.to_string());
        kv("pretrain.lr", self.pretrain.lr.to_string());
        kv("stage1.lambda", self.stage1.lambda.to_string());
        kv("stage1.lr_encoder", self.stage1.lr_encoder.to_string());
        kv("stage1.lr_classifier", self.stage1.lr_classifier.to_string());
        kv("stage1.epochs", self.stage1.epochs.to_string());
        kv("stage1.batch_size", self.stage1.batch_size.to_string());
        kv(
            "stage1.adv_schedule",
            match self.stage1.adv_schedule {
                AdvSchedule::PerBatch => "per_batch".into(),
                AdvSchedule::Precomputed => "precomputed".into(),
            },
        );
        kv(
            "stage1.graph_features",
            match self.stage1.graph_features {
                GraphFeatures::Logits => "logits".into(),
                GraphFeatures::Encoder => "encoder".into(),
            },
        );
        kv("stage1.attack.epsilon", self.stage1.attack.epsilon.to_string());
        kv("stage1.attack.norm_p", self.stage1.attack.norm_p.to_string());
        kv("stage1.attack.steps", self.stage1.attack.steps.to_string());
        kv(
            "stage1.attack.step_size",
            self.stage1.attack.step_size.to_string(),
        );
        kv(
            "stage1.attack.random_start",
            self.stage1.attack.random_start.to_string(),
        );
        kv("rc.gamma", self.rc.gamma.to_string());
        kv("rc.norm_p", self.rc.norm_p.to_string());
        kv("rc.ascent_steps", self.rc.ascent_steps.to_string());
        kv("rc.eval_subset_size", self.rc.eval_subset_size.to_string());
        kv("stage2.topk_ratio", self.stage2.topk_ratio.to_string());
        kv("stage2.lr", self.stage2.lr.to_string());
        kv("stage2.epochs", self.stage2.epochs.to_string());
        kv("stage2.batch_size", self.stage2.batch_size.to_string());
        kv("attack.epsilon", self.attack.epsilon.to_string());
        kv("attack.norm_p", self.attack.norm_p.to_string());
        kv("attack.steps", self.attack.steps.to_string());
        kv("attack.step_size", self.attack.step_size.to_string());
        kv("attack.random_start", self.attack.random_start.to_string());
        kv("eval.uap_passes", self.uap_passes.to_string());
        s
    }

    pub fn config_hash(&self) -> String {
        sha256_hex(self.to_flat_text().as_bytes())
    }

    pub fn from_flat_text(text: &str) -> Result<Self> {
        let map = parse_flat(text)?;
        Self::from_map(map)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut map = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::io(p.display().to_string(), e))?;
                parse_flat(&text)?
            }
            None => BTreeMap::new(),
        };
        for (k, v) in overrides {
            map.insert(k.clone(), v.clone());
        }
        if let Ok(seed) = std::env::var("GENAF_SEED") {
            let seed = seed
                .trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("GENAF_SEED '{seed}' is not an integer")))?;
            map.insert("seed".into(), seed.to_string());
        }
        Self::from_map(map)
    }

    fn from_map(mut map: BTreeMap<String, String>) -> Result<Self> {
        let seed = match map.remove("seed") {
            Some(s) => parse_int(&s, "seed")?,
            None => 0,
        };
        let preset = map.remove("preset");
        let mut cfg = match preset.as_deref() {
            None | Some("default") => {
                let mut c = RunConfig::default();
                c.set_seed(seed);
                c
            }
            Some("desk") => RunConfig::desk(seed),
            Some(other) => {
                return Err(Error::Config(format!("unknown preset '{other}'")));
            }
        };
        for (key, value) in map {
            cfg.apply(&key, &value)?;
        }
        Ok(cfg)
    }

    /// Applies one dotted key.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value '{value}' for {what}"));
        match key {
            "experiment_name" => self.experiment_name = value.into(),
            "output_root" => self.output_root = value.into(),
            "seed" => self.set_seed(parse_int(value, key)?),
            "encoder" => {
                self.encoder = if value.is_empty() {
                    None
                } else {
                    Some(value.into())
                }
            }
            "data.train" => self.data_train = value.into(),
            "data.test" => self.data_test = value.into(),
            "arch.input_channels" => self.arch.input_channels = parse_usize(value, key)?,
            "arch.input_height" => self.arch.input_height = parse_usize(value, key)?,
            "arch.input_width" => self.arch.input_width = parse_usize(value, key)?,
            "arch.conv_channels" => self.arch.conv_channels = parse_usize_list(value, key)?,
            "arch.conv_strides" => self.arch.conv_strides = parse_usize_list(value, key)?,
            "arch.feature_dim" => self.arch.feature_dim = parse_usize(value, key)?,
            "arch.num_classes" => self.arch.num_classes = parse_usize(value, key)?,
            "arch.bn_eps" => self.arch.bn_eps = parse_rational(value).map_err(|_| bad(key))?,
            "arch.bn_momentum" => {
                self.arch.bn_momentum = parse_rational(value).map_err(|_| bad(key))?
            }
            "pretrain.dataset_path" => self.pretrain.dataset_path = value.into(),
            "pretrain.epochs" => self.pretrain.epochs = parse_usize(value, key)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse_usize(value, key)?,
            "pretrain.temperature" => {
                self.pretrain.temperature = parse_rational(value).map_err(|_| bad(key))?
            }
            "pretrain.lr" => self.pretrain.lr = parse_rational(value).map_err(|_| bad(key))?,
            "stage1.lambda" => self.stage1.lambda = parse_rational(value).map_err(|_| bad(key))?,
            "stage1.lr_encoder" => {
                self.stage1.lr_encoder = parse_rational(value).map_err(|_| bad(key))?
            }
            "stage1.lr_classifier" => {
                self.stage1.lr_classifier = parse_rational(value).map_err(|_| bad(key))?
            }
            "stage1.epochs" => self.stage1.epochs = parse_usize(value, key)?,
            "stage1.batch_size" => self.stage1.batch_size = parse_usize(value, key)?,
            "stage1.adv_schedule" => {
                self.stage1.adv_schedule = match value {
                    "per_batch" => AdvSchedule::PerBatch,
                    "precomputed" => AdvSchedule::Precomputed,
                    _ => return Err(bad(key)),
                }
            }
            "stage1.graph_features" => {
                self.stage1.graph_features = match value {
                    "logits" => GraphFeatures::Logits,
                    "encoder" => GraphFeatures::Encoder,
                    _ => return Err(bad(key)),
                }
            }
            "stage1.attack.epsilon" => {
                self.stage1.attack.epsilon = parse_rational(value).map_err(|_| bad(key))?
            }
            "stage1.attack.norm_p" => {
                self.stage1.attack.norm_p = parse_norm(value).ok_or_else(|| bad(key))?
            }
            "stage1.attack.steps" => self.stage1.attack.steps = parse_usize(value, key)?,
            "stage1.attack.step_size" => {
                self.stage1.attack.step_size = parse_rational(value).map_err(|_| bad(key))?
            }
            "stage1.attack.random_start" => {
                self.stage1.attack.random_start = parse_bool(value).ok_or_else(|| bad(key))?
            }
            "rc.gamma" => self.rc.gamma = parse_rational(value).map_err(|_| bad(key))?,
            "rc.norm_p" => self.rc.norm_p = parse_norm(value).ok_or_else(|| bad(key))?,
            "rc.ascent_steps" => self.rc.ascent_steps = parse_usize(value, key)?,
            "rc.eval_subset_size" => self.rc.eval_subset_size = parse_usize(value, key)?,
            "stage2.topk_ratio" => {
                self.stage2.topk_ratio = parse_rational(value).map_err(|_| bad(key))?
            }
            "stage2.lr" => self.stage2.lr = parse_rational(value).map_err(|_| bad(key))?,
            "stage2.epochs" => self.stage2.epochs = parse_usize(value, key)?,
            "stage2.batch_size" => self.stage2.batch_size = parse_usize(value, key)?,
            "attack.epsilon" => {
                self.attack.epsilon = parse_rational(value).map_err(|_| bad(key))?
            }
            "attack.norm_p" => self.attack.norm_p = parse_norm(value).ok_or_else(|| bad(key))?,
            "attack.steps" => self.attack.steps = parse_usize(value, key)?,
            "attack.step_size" => {
                self.attack.step_size = parse_rational(value).map_err(|_| bad(key))?
            }
            "attack.random_start" => {
                self.attack.random_start = parse_bool(value).ok_or_else(|| bad(key))?
            }
            "eval.uap_passes" => self.uap_passes = parse_usize(value, key)?,
            other => {
                return Err(Error::Config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are
/// skipped, duplicate keys are an error.
pub fn parse_flat(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected 'key = value', got '{raw}'",
                lineno + 1
            )));
        };
        let key = k.trim().to_string();
        let value = v.trim().to_string();
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::Config(format!(
                "line {}: duplicate key '{key}'",
                lineno + 1
            )));
        }
    }
    Ok(map)
}

/// Parses either a rational `a/b` (exact integer division in f64) or a
/// plain float literal.
pub fn parse_rational(s: &str) -> Result<f64> {
    let s = s.trim();
    if let Some((num, den)) = s.split_once('/') {
        let n: i64 = num
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad rational numerator in '{s}'")))?;
        let d: i64 = den
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad rational denominator in '{s}'")))?;
        if d == 0 {
            return Err(Error::Config(format!("zero denominator in '{s}'")));
        }
        Ok(n as f64 / d as f64)
    } else {
        s.parse::<f64>()
            .map_err(|_| Error::Config(format!("bad numeric value '{s}'")))
    }
}

fn parse_int(s: &str, key: &str) -> Result<u64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad integer '{s}' for {key}")))
}

fn parse_usize(s: &str, key: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad integer '{s}' for {key}")))
}

fn parse_usize_list(s: &str, key: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| parse_usize(p, key))
        .collect::<Result<Vec<_>>>()
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}

fn parse_norm(s: &str) -> Option<NormP> {
    match s {
        "inf" => Some(NormP::Inf),
        "2" => Some(NormP::L2),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rational_epsilon_is_exact() {
        assert_eq!(parse_rational("10/255").unwrap(), 10.0 / 255.0);
        assert_eq!(parse_rational("0.05").unwrap(), 0.05);
        assert!(parse_rational("1/0").is_err());
        assert!(parse_rational("x").is_err());
    }

    #[test]
    fn flat_text_roundtrip_is_byte_identical() {
        let cfg = RunConfig::desk(7);
        let text = cfg.to_flat_text();
        let back = RunConfig::from_flat_text(&text).unwrap();
        assert_eq!(back.to_flat_text(), text);
        assert_eq!(back.config_hash(), cfg.config_hash());
    }

    #[test]
    fn parse_applies_overrides_and_preset() {
        let text = "preset = desk\nseed = 3\nstage1.lambda = 5\nattack.epsilon = 8/255\n";
        let cfg = RunConfig::from_flat_text(text).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.stage1.seed, 3);
        assert_eq!(cfg.stage1.lambda, 5.0);
        assert_eq!(cfg.attack.epsilon, 8.0 / 255.0);
        // Desk preset pinned values survive.
        assert_eq!(cfg.stage1.batch_size, 128);
        assert_eq!(cfg.stage1.epochs, 20);
        assert_eq!(cfg.stage2.epochs, 20);
    }

    #[test]
    fn unknown_keys_and_dupes_are_config_errors() {
        assert!(matches!(
            RunConfig::from_flat_text("nope = 1\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            parse_flat("a = 1\na = 2\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            parse_flat("just some words\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let map = parse_flat("# header\n\nseed = 9 # trailing\n").unwrap();
        assert_eq!(map.get("seed").unwrap(), "9");
    }

    #[test]
    fn env_seed_overrides_config() {
        // Env-var test kept hermetic by setting and removing the var.
        std::env::set_var("GENAF_SEED", "99");
        let cfg = RunConfig::load(None, &[("preset".into(), "desk".into())]).unwrap();
        std::env::remove_var("GENAF_SEED");
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.stage2.seed, 99);
    }
}
