//! Run configuration: a `key = value` file with `[section]` headers, merged
//! over defaults and overridden by command-line settings.
//!
//! ```text
//! seed = 7
//! [model]
//! preset = micro
//! [train]
//! episodes = 300
//! ```
//!
//! Keys outside any section are top-level; inside `[s]` a key `k` is
//! addressed as `s.k`. Lines starting with `#` or `;` are comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::EvalOptions;
use crate::optim::DecayMode;
use crate::trainer::TrainConfig;
use crate::vit::{ConfigError, ViTConfig};

/// Environment variable consulted for the seed when neither file nor flags set one.
pub const SEED_ENV: &str = "PROTOVIT_SEED";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigFileError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: &'static str },
    #[error("line {line}: duplicate key {key:?}")]
    Duplicate { line: usize, key: String },
    #[error("{origin}: unknown key {key:?}")]
    UnknownKey { origin: String, key: String },
    #[error("{origin}: bad value {value:?} for {key}: {reason}")]
    BadValue {
        origin: String,
        key: String,
        value: String,
        reason: String,
    },
    #[error(transparent)]
    Model(#[from] ConfigError),
}

/// Parsed file: fully qualified key → (value, 1-based line).
pub type ConfigEntries = BTreeMap<String, (String, usize)>;

fn valid_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

pub fn parse_config(text: &str) -> Result<ConfigEntries, ConfigFileError> {
    let mut out = ConfigEntries::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') || s.starts_with(';') {
            continue;
        }
        if let Some(rest) = s.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or(ConfigFileError::Syntax {
                    line,
                    reason: "unterminated section header",
                })?
                .trim();
            if !valid_ident(name) {
                return Err(ConfigFileError::Syntax {
                    line,
                    reason: "bad section name",
                });
            }
            section = name.to_owned();
            continue;
        }
        let (k, v) = s.split_once('=').ok_or(ConfigFileError::Syntax {
            line,
            reason: "expected key = value",
        })?;
        let k = k.trim();
        if !valid_ident(k) {
            return Err(ConfigFileError::Syntax { line, reason: "bad key" });
        }
        let key = if section.is_empty() {
            k.to_owned()
        } else {
            format!("{section}.{k}")
        };
        if out.contains_key(&key) {
            return Err(ConfigFileError::Duplicate { line, key });
        }
        out.insert(key, (v.trim().to_owned(), line));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl FromStr for Dtype {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(format!("unknown dtype {other:?} (expected f32 or f64)")),
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub episodes: usize,
    pub repeats: usize,
    pub workers: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            episodes: 100,
            repeats: 1,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub root: PathBuf,
    pub train_split: String,
    pub val_split: String,
    pub test_split: String,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            train_split: "train".into(),
            val_split: "val".into(),
            test_split: "test".into(),
        }
    }
}

/// Everything a command needs, with a default for every field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    /// Overrides the preset's dropout rate when set.
    pub drop_rate: Option<f64>,
    pub dtype: Dtype,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub data: DataSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut train = TrainConfig::default();
        train.augment.target_size = ViTConfig::small().image_size;
        Self {
            preset: "small".into(),
            drop_rate: None,
            dtype: Dtype::F32,
            train,
            eval: EvalSection::default(),
            data: DataSection::default(),
        }
    }
}

/// Every settable key, in the order used by [`RunConfig::to_text`].
pub const KEYS: &[&str] = &[
    "seed",
    "dtype",
    "distance",
    "model.preset",
    "model.drop_rate",
    "train.episodes",
    "train.eval_freq",
    "train.val_episodes",
    "train.clip_max_norm",
    "train.meta_batch",
    "train.max_skip_fraction",
    "optim.mode",
    "optim.lr",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "optim.weight_decay",
    "episode.ways",
    "episode.shots",
    "episode.queries",
    "augment.hflip_prob",
    "augment.max_rotation_degrees",
    "augment.normalize_mean",
    "augment.normalize_std",
    "eval.episodes",
    "eval.repeats",
    "eval.workers",
    "data.root",
    "data.train_split",
    "data.val_split",
    "data.test_split",
];

fn parse<V: FromStr>(v: &str) -> Result<V, String>
where
    V::Err: std::fmt::Display,
{
    v.parse::<V>().map_err(|e| e.to_string())
}

fn parse_triple(v: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = v.split(',').map(|p| parse::<f64>(p.trim())).collect::<Result<_, _>>()?;
    <[f64; 3]>::try_from(parts).map_err(|p| format!("expected 3 comma-separated numbers, got {}", p.len()))
}

fn triple_text(t: &[f64; 3]) -> String {
    format!("{},{},{}", t[0], t[1], t[2])
}

impl RunConfig {
    /// Backbone configuration from the preset plus overrides.
    pub fn model(&self) -> Result<ViTConfig, ConfigError> {
        let mut m = ViTConfig::preset(&self.preset)?;
        if let Some(r) = self.drop_rate {
            m.drop_rate = r;
        }
        m.validate()?;
        Ok(m)
    }

    /// Sets one key. `origin` labels errors (e.g. `"line 4"`, `"--episodes"`).
    pub fn set(&mut self, key: &str, value: &str, origin: &str) -> Result<(), ConfigFileError> {
        let bad = |reason: String| ConfigFileError::BadValue {
            origin: origin.to_owned(),
            key: key.to_owned(),
            value: value.to_owned(),
            reason,
        };
        let r: Result<(), String> = (|| {
            let t = &mut self.train;
            match key {
                "seed" => t.seed = parse(value)?,
                "dtype" => return self.set_dtype(value),
                "distance" => t.distance = parse(value)?,
                "model.preset" => {
                    let m = ViTConfig::preset(value).map_err(|e| e.to_string())?;
                    t.augment.target_size = m.image_size;
                    self.preset = value.to_owned();
                }
                "model.drop_rate" => return self.set_drop_rate(value),
                "train.episodes" => t.episodes = parse(value)?,
                "train.eval_freq" => t.eval_freq = parse(value)?,
                "train.val_episodes" => t.val_episodes = parse(value)?,
                "train.clip_max_norm" => t.clip_max_norm = parse(value)?,
                "train.meta_batch" => t.meta_batch = parse(value)?,
                "train.max_skip_fraction" => t.max_skip_fraction = parse(value)?,
                "optim.mode" => t.optim.mode = parse::<DecayMode>(value)?,
                "optim.lr" => t.optim.lr = parse(value)?,
                "optim.beta1" => t.optim.beta1 = parse(value)?,
                "optim.beta2" => t.optim.beta2 = parse(value)?,
                "optim.eps" => t.optim.eps = parse(value)?,
                "optim.weight_decay" => t.optim.weight_decay = parse(value)?,
                "episode.ways" => t.spec.ways = parse(value)?,
                "episode.shots" => t.spec.shots = parse(value)?,
                "episode.queries" => t.spec.queries = parse(value)?,
                "augment.hflip_prob" => t.augment.hflip_prob = parse(value)?,
                "augment.max_rotation_degrees" => t.augment.max_rotation_degrees = parse(value)?,
                "augment.normalize_mean" => t.augment.normalize_mean = parse_triple(value)?,
                "augment.normalize_std" => t.augment.normalize_std = parse_triple(value)?,
                _ => return self.set_other(key, value),
            }
            Ok(())
        })();
        match r {
            Ok(()) => Ok(()),
            Err(e) if e.is_empty() && !KEYS.contains(&key) => Err(ConfigFileError::UnknownKey {
                origin: origin.to_owned(),
                key: key.to_owned(),
            }),
            Err(e) => Err(bad(e)),
        }
    }

    fn set_dtype(&mut self, value: &str) -> Result<(), String> {
        self.dtype = parse(value)?;
        Ok(())
    }

    fn set_drop_rate(&mut self, value: &str) -> Result<(), String> {
        self.drop_rate = Some(parse(value)?);
        Ok(())
    }

    fn set_other(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "eval.episodes" => self.eval.episodes = parse(value)?,
            "eval.repeats" => self.eval.repeats = parse(value)?,
            "eval.workers" => self.eval.workers = parse(value)?,
            "data.root" => self.data.root = PathBuf::from(value),
            "data.train_split" => self.data.train_split = value.to_owned(),
            "data.val_split" => self.data.val_split = value.to_owned(),
            "data.test_split" => self.data.test_split = value.to_owned(),
            _ => return Err(String::new()),
        }
        Ok(())
    }

    /// Applies parsed entries in line order, so `model.preset` resets the
    /// image size before anything that follows it.
    pub fn apply(&mut self, entries: &ConfigEntries) -> Result<(), ConfigFileError> {
        let mut by_line: Vec<(&String, &(String, usize))> = entries.iter().collect();
        by_line.sort_by_key(|(_, (_, line))| *line);
        for (k, (v, line)) in by_line {
            self.set(k, v, &format!("line {line}"))?;
        }
        Ok(())
    }

    /// Resolves defaults < file < overrides, consulting [`SEED_ENV`] when
    /// neither the file nor the overrides set `seed`.
    pub fn resolve(file: Option<&str>, overrides: &[(String, String)], env_seed: Option<&str>) -> Result<Self, ConfigFileError> {
        Self::resolve_onto(RunConfig::default(), file, overrides, env_seed)
    }

    /// Like [`resolve`](Self::resolve) but starting from `base` instead of
    /// the defaults.
    pub fn resolve_onto(
        base: RunConfig,
        file: Option<&str>,
        overrides: &[(String, String)],
        env_seed: Option<&str>,
    ) -> Result<Self, ConfigFileError> {
        let mut cfg = base;
        let entries = match file {
            Some(text) => parse_config(text)?,
            None => ConfigEntries::new(),
        };
        let seed_given = entries.contains_key("seed") || overrides.iter().any(|(k, _)| k == "seed");
        if let (false, Some(s)) = (seed_given, env_seed) {
            cfg.set("seed", s.trim(), SEED_ENV)?;
        }
        cfg.apply(&entries)?;
        for (k, v) in overrides {
            cfg.set(k, v, "command line")?;
        }
        cfg.model()?;
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        Some(match key {
            "seed" => t.seed.to_string(),
            "dtype" => self.dtype.to_string(),
            "distance" => t.distance.to_string(),
            "model.preset" => self.preset.clone(),
            "model.drop_rate" => self.drop_rate.or_else(|| self.model().ok().map(|m| m.drop_rate))?.to_string(),
            "train.episodes" => t.episodes.to_string(),
            "train.eval_freq" => t.eval_freq.to_string(),
            "train.val_episodes" => t.val_episodes.to_string(),
            "train.clip_max_norm" => t.clip_max_norm.to_string(),
            "train.meta_batch" => t.meta_batch.to_string(),
            "train.max_skip_fraction" => t.max_skip_fraction.to_string(),
            "optim.mode" => t.optim.mode.to_string(),
            "optim.lr" => t.optim.lr.to_string(),
            "optim.beta1" => t.optim.beta1.to_string(),
            "optim.beta2" => t.optim.beta2.to_string(),
            "optim.eps" => t.optim.eps.to_string(),
            "optim.weight_decay" => t.optim.weight_decay.to_string(),
            "episode.ways" => t.spec.ways.to_string(),
            "episode.shots" => t.spec.shots.to_string(),
            "episode.queries" => t.spec.queries.to_string(),
            "augment.hflip_prob" => t.augment.hflip_prob.to_string(),
            "augment.max_rotation_degrees" => t.augment.max_rotation_degrees.to_string(),
            "augment.normalize_mean" => triple_text(&t.augment.normalize_mean),
            "augment.normalize_std" => triple_text(&t.augment.normalize_std),
            "eval.episodes" => self.eval.episodes.to_string(),
            "eval.repeats" => self.eval.repeats.to_string(),
            "eval.workers" => self.eval.workers.to_string(),
            "data.root" => self.data.root.display().to_string(),
            "data.train_split" => self.data.train_split.clone(),
            "data.val_split" => self.data.val_split.clone(),
            "data.test_split" => self.data.test_split.clone(),
            _ => return None,
        })
    }

    /// The resolved configuration as a config file; parsing it back yields
    /// an equal `RunConfig`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in KEYS {
            let (sec, name) = key.split_once('.').unwrap_or(("", key));
            if sec != section {
                let _ = writeln!(out, "\n[{sec}]");
                section = sec;
            }
            let value = self.get(key).unwrap_or_default();
            if *key == "model.drop_rate" && self.drop_rate.is_none() {
                // the preset's rate; left commented so a later preset change still applies
                let _ = writeln!(out, "# {name} = {value}");
            } else {
                let _ = writeln!(out, "{name} = {value}");
            }
        }
        out
    }

    pub fn eval_options(&self, seed: u64) -> EvalOptions {
        EvalOptions {
            spec: self.train.spec,
            episodes: self.eval.episodes,
            seed,
            workers: self.eval.workers,
            distance: self.train.distance,
            augment: self.train.augment.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_sections_and_comments() {
        let e = parse_config("seed = 3\n# note\n[train]\nepisodes = 20\n\n; other\n[episode]\nways=4\n").unwrap();
        assert_eq!(e["seed"], ("3".into(), 1));
        assert_eq!(e["train.episodes"], ("20".into(), 4));
        assert_eq!(e["episode.ways"].0, "4");
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        assert_eq!(
            parse_config("[train]\nepisodes 20\n"),
            Err(ConfigFileError::Syntax {
                line: 2,
                reason: "expected key = value"
            })
        );
        assert!(matches!(parse_config("[train\n"), Err(ConfigFileError::Syntax { line: 1, .. })));
        assert!(matches!(parse_config("a = 1\na = 2\n"), Err(ConfigFileError::Duplicate { line: 2, .. })));
        assert!(matches!(parse_config(" = 2\n"), Err(ConfigFileError::Syntax { .. })));
    }

    #[test]
    fn precedence_defaults_file_flags() {
        let file = "seed = 5\n[train]\nepisodes = 20\neval_freq = 4\n";
        let flags = vec![("train.episodes".to_string(), "30".to_string())];
        let c = RunConfig::resolve(Some(file), &flags, Some("9")).unwrap();
        assert_eq!(c.train.episodes, 30);
        assert_eq!(c.train.eval_freq, 4);
        assert_eq!(c.train.seed, 5);
        assert_eq!(c.train.val_episodes, 50);
    }

    #[test]
    fn env_seed_is_a_fallback() {
        let c = RunConfig::resolve(None, &[], Some("11")).unwrap();
        assert_eq!(c.train.seed, 11);
        let c = RunConfig::resolve(None, &[("seed".into(), "12".into())], Some("11")).unwrap();
        assert_eq!(c.train.seed, 12);
        assert_eq!(RunConfig::resolve(None, &[], None).unwrap().train.seed, 42);
        assert!(RunConfig::resolve(None, &[], Some("x")).is_err());
    }

    #[test]
    fn preset_sets_image_size() {
        let c = RunConfig::resolve(Some("[model]\npreset = micro\n"), &[], None).unwrap();
        assert_eq!(c.train.augment.target_size, 32);
        assert_eq!(c.model().unwrap(), ViTConfig::micro());
        assert_eq!(RunConfig::default().train.augment.target_size, 224);
    }

    #[test]
    fn unknown_and_bad_values() {
        let err = RunConfig::resolve(Some("[train]\nepochs = 3\n"), &[], None).unwrap_err();
        assert!(matches!(err, ConfigFileError::UnknownKey { ref origin, .. } if origin == "line 2"));
        let err = RunConfig::resolve(None, &[("train.episodes".into(), "-1".into())], None).unwrap_err();
        assert!(err.to_string().starts_with("command line"), "{err}");
        assert!(RunConfig::resolve(Some("distance = cosine\n"), &[], None).is_err());
        assert!(RunConfig::resolve(Some("[model]\npreset = huge\n"), &[], None).is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("model.preset", "micro", "t").unwrap();
        c.set("optim.lr", "0.00031", "t").unwrap();
        c.set("augment.normalize_mean", "0.485,0.456,0.406", "t").unwrap();
        c.set("distance", "unsquared", "t").unwrap();
        let back = RunConfig::resolve(Some(&c.to_text()), &[], None).unwrap();
        assert_eq!(back.to_text(), c.to_text());
        assert_eq!(back.train, c.train);
        for k in KEYS {
            assert!(c.get(k).is_some(), "{k}");
        }
    }

    proptest! {
        #[test]
        fn parser_never_panics(text in "[ -~\n]{0,200}") {
            let _ = parse_config(&text);
        }
    }
}
