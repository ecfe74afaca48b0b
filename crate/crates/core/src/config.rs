//! Run configuration: `[model]`, `[train]` and `[data]` sections of
//! `key = value` lines.
//!
//! A dotted key outside any section may carry its section as a prefix
//! (`train.patience = 9`); keys without a known prefix belong to `[model]`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{holdout_trials, split_by_user, DataError, Modality, ProcessedTrial, Split};
use crate::model::ModelConfig;
use crate::train::{Phase, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    At { file: String, line: usize, msg: String },
    #[error("{file}: {msg}")]
    Invalid { file: String, msg: String },
}

/// How held-out data is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Holdout {
    /// Validation and test users never appear in training.
    User,
    /// Validation and test trials are drawn from every user.
    Trial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Dataset directory; the `--data` flag takes precedence.
    pub dir: String,
    pub seed: u64,
    pub test_frac: f64,
    pub val_frac: f64,
    pub holdout: Holdout,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: String::new(),
            seed: 42,
            test_frac: 0.15,
            val_frac: 0.15,
            holdout: Holdout::User,
        }
    }
}

/// Trial indices of each split, ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct Partition {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl DataConfig {
    /// Splits `trials` by user or, for [`Holdout::Trial`], takes a share of
    /// every user's trials for test and then for validation.
    pub fn partition(&self, trials: &[ProcessedTrial]) -> Result<Partition, DataError> {
        let users: Vec<&str> = trials.iter().map(|t| t.user_id.as_str()).collect();
        let mut part = Partition::default();
        match self.holdout {
            Holdout::User => {
                let ids: Vec<String> = users.iter().map(|u| u.to_string()).collect();
                let split = split_by_user(&ids, self.seed, self.test_frac, self.val_frac)?;
                for (i, u) in users.iter().enumerate() {
                    match split.of(u) {
                        Some(Split::Train) => part.train.push(i),
                        Some(Split::Val) => part.val.push(i),
                        Some(Split::Test) => part.test.push(i),
                        None => unreachable!("every user is assigned"),
                    }
                }
            }
            Holdout::Trial => {
                let all: std::collections::BTreeSet<&str> = users.iter().copied().collect();
                part.test = holdout_trials(&users, &all, self.test_frac, self.seed);
                let rest: Vec<usize> = (0..trials.len()).filter(|i| part.test.binary_search(i).is_err()).collect();
                let rest_users: Vec<&str> = rest.iter().map(|&i| users[i]).collect();
                let val = holdout_trials(&rest_users, &all, self.val_frac, self.seed.wrapping_add(1));
                part.val = val.iter().map(|&k| rest[k]).collect();
                part.train = rest.into_iter().filter(|i| part.val.binary_search(i).is_err()).collect();
            }
        }
        if part.train.is_empty() || part.val.is_empty() || part.test.is_empty() {
            return Err(DataError::Invalid(format!(
                "split left an empty set (train {}, val {}, test {})",
                part.train.len(),
                part.val.len(),
                part.test.len()
            )));
        }
        Ok(part)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    /// Integer >= the bound.
    Int(u64),
    /// Float in `[lo, hi]`, or `[lo, hi)` when `open` is set.
    Float { lo: f64, hi: f64, open: bool },
    /// Float > 0.
    Positive,
    Bool,
    Text,
    Choice(&'static [&'static str]),
    Modalities,
    Triple,
}

struct Key {
    name: String,
    pointer: String,
    kind: Kind,
}

const PROB: Kind = Kind::Float {
    lo: 0.0,
    hi: 1.0,
    open: true,
};
const UNIT: Kind = Kind::Float {
    lo: 0.0,
    hi: 1.0,
    open: false,
};

fn keys() -> Vec<Key> {
    let mut out = Vec::new();
    let mut add = |name: &str, pointer: &str, kind: Kind| {
        out.push(Key {
            name: name.to_string(),
            pointer: pointer.to_string(),
            kind,
        })
    };
    for m in Modality::ALL {
        add(&format!("model.dims.{m}"), &format!("/model/modality_dims/{m}"), Kind::Int(1));
    }
    add("model.seq_len", "/model/seq_len", Kind::Int(1));
    add("model.t_reduced", "/model/t_reduced", Kind::Int(1));
    for (sec, field) in [("enc", "enc"), ("fusion", "fusion")] {
        add(&format!("model.{sec}.d_model"), &format!("/model/{field}/d_model"), Kind::Int(1));
        add(&format!("model.{sec}.heads"), &format!("/model/{field}/heads"), Kind::Int(1));
        add(&format!("model.{sec}.ffn_dim"), &format!("/model/{field}/ffn_dim"), Kind::Int(1));
        add(&format!("model.{sec}.dropout"), &format!("/model/{field}/dropout"), PROB);
    }
    add("model.enc.depth", "/model/encoder_depth", Kind::Int(0));
    add("model.proj_dim", "/model/proj_dim", Kind::Int(1));
    add("model.use_stim_emo", "/model/use_stim_emo", Kind::Bool);
    add("model.stim_emo_dim", "/model/stim_emo_dim", Kind::Int(1));
    add("model.modalities", "/model/enabled_modalities", Kind::Modalities);
    add(
        "model.condition_emotion_on_personality",
        "/model/condition_emotion_on_personality",
        Kind::Bool,
    );
    add("model.summary_dim", "/model/summary_dim", Kind::Int(1));
    add("model.trial_dim", "/model/trial_dim", Kind::Int(1));
    add("model.personality_dropout", "/model/personality_dropout", PROB);
    add("model.emotion_dropout", "/model/emotion_dropout", PROB);
    add("model.trial_dropout", "/model/trial_dropout", PROB);
    for p in Phase::ALL {
        add(&format!("train.alpha_{p}"), &format!("/train/{p}/alpha"), UNIT);
        add(&format!("train.epochs_{p}"), &format!("/train/{p}/epochs"), Kind::Int(0));
        add(&format!("train.base_lr_{p}"), &format!("/train/{p}/base_lr"), Kind::Positive);
        add(
            &format!("train.personality_lr_{p}"),
            &format!("/train/{p}/personality_lr"),
            Kind::Positive,
        );
        add(&format!("train.emotion_lr_{p}"), &format!("/train/{p}/emotion_lr"), Kind::Positive);
        add(
            &format!("train.gamma_{p}"),
            &format!("/train/{p}/gamma"),
            Kind::Float {
                lo: f64::MIN_POSITIVE,
                hi: 1.0,
                open: false,
            },
        );
    }
    add("train.patience", "/train/patience", Kind::Int(1));
    add(
        "train.epsilon",
        "/train/epsilon",
        Kind::Float {
            lo: 0.0,
            hi: f64::MAX,
            open: false,
        },
    );
    add("train.batch_size", "/train/batch_size", Kind::Int(2));
    for (i, g) in ["base", "personality", "emotion"].iter().enumerate() {
        add(
            &format!("train.weight_decay_{g}"),
            &format!("/train/weight_decay/{i}"),
            Kind::Float {
                lo: 0.0,
                hi: f64::MAX,
                open: false,
            },
        );
    }
    add("train.class_weights_valence", "/train/class_weights/valence", Kind::Triple);
    add("train.class_weights_arousal", "/train/class_weights/arousal", Kind::Triple);
    add("train.seed", "/train/seed", Kind::Int(0));
    add("data.dir", "/data/dir", Kind::Text);
    add("data.seed", "/data/seed", Kind::Int(0));
    add("data.test_frac", "/data/test_frac", PROB);
    add("data.val_frac", "/data/val_frac", PROB);
    add("data.holdout", "/data/holdout", Kind::Choice(&["user", "trial"]));
    out
}

const SECTIONS: [&str; 3] = ["model", "train", "data"];

fn strip_comment(line: &str) -> &str {
    let mut in_quote = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_quote = !in_quote,
            '#' | ';' if !in_quote => return &line[..i],
            _ => {}
        }
    }
    line
}

fn unquote(s: &str) -> &str {
    let s = s.trim();
    s.strip_prefix('"').and_then(|r| r.strip_suffix('"')).unwrap_or(s)
}

fn list_items(raw: &str) -> Vec<String> {
    let s = raw.trim();
    let s = s.strip_prefix('[').and_then(|r| r.strip_suffix(']')).unwrap_or(s);
    s.split(',')
        .map(|x| unquote(x).to_string())
        .filter(|x| !x.is_empty())
        .collect()
}

fn parse_value(key: &Key, raw: &str) -> Result<Value, String> {
    let v = unquote(raw);
    match key.kind {
        Kind::Int(min) => {
            let n: u64 = v
                .parse()
                .map_err(|_| format!("{}: expected a non-negative integer, got `{v}`", key.name))?;
            if n < min {
                return Err(format!("{}: must be at least {min}, got {n}", key.name));
            }
            Ok(Value::from(n))
        }
        Kind::Float { lo, hi, open } => {
            let x: f64 = v
                .parse()
                .map_err(|_| format!("{}: expected a number, got `{v}`", key.name))?;
            let ok = x >= lo && if open { x < hi } else { x <= hi };
            if !ok || !x.is_finite() {
                let upper = if open { ")" } else { "]" };
                return Err(format!("{}: {x} out of range [{lo}, {hi}{upper}", key.name));
            }
            Ok(Value::from(x))
        }
        Kind::Positive => {
            let x: f64 = v
                .parse()
                .map_err(|_| format!("{}: expected a number, got `{v}`", key.name))?;
            if !(x > 0.0 && x.is_finite()) {
                return Err(format!("{}: must be positive, got {x}", key.name));
            }
            Ok(Value::from(x))
        }
        Kind::Bool => match v {
            "true" | "yes" | "on" | "1" => Ok(Value::Bool(true)),
            "false" | "no" | "off" | "0" => Ok(Value::Bool(false)),
            _ => Err(format!("{}: expected true or false, got `{v}`", key.name)),
        },
        Kind::Text => Ok(Value::from(v)),
        Kind::Choice(opts) => {
            if opts.contains(&v) {
                Ok(Value::from(v))
            } else {
                Err(format!("{}: expected one of {}, got `{v}`", key.name, opts.join(", ")))
            }
        }
        Kind::Modalities => {
            let mut ms = Vec::new();
            for item in list_items(raw) {
                let m: Modality = item.parse().map_err(|e| format!("{}: {e}", key.name))?;
                if !ms.contains(&m) {
                    ms.push(m);
                }
            }
            if ms.is_empty() {
                return Err(format!("{}: at least one modality must be enabled", key.name));
            }
            ms.sort_by_key(|m| m.index());
            Ok(Value::from(ms.iter().map(|m| m.name()).collect::<Vec<_>>()))
        }
        Kind::Triple => {
            let items = list_items(raw);
            let xs: Result<Vec<f64>, _> = items.iter().map(|s| s.parse::<f64>()).collect();
            match xs {
                Ok(xs) if xs.len() == 3 && xs.iter().all(|x| *x > 0.0 && x.is_finite()) => Ok(Value::from(xs)),
                _ => Err(format!("{}: expected three positive numbers, got `{raw}`", key.name)),
            }
        }
    }
}

/// Parses config text. `file` labels error messages.
pub fn parse_config_str(text: &str, file: &str) -> Result<RunConfig, ConfigError> {
    let table = keys();
    let mut value = serde_json::to_value(RunConfig::default()).expect("config serializes");
    let at = |line: usize, msg: String| ConfigError::At {
        file: file.to_string(),
        line,
        msg,
    };
    let mut section: Option<&str> = None;
    let mut assigned: Vec<(usize, &Key)> = Vec::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = strip_comment(raw_line).trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| at(line_no, format!("malformed section header `{line}`")))?
                .trim();
            section = Some(
                SECTIONS
                    .iter()
                    .find(|s| **s == name)
                    .ok_or_else(|| at(line_no, format!("unknown section [{name}] (expected model, train or data)")))?,
            );
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| at(line_no, format!("expected `key = value`, got `{line}`")))?;
        let k = k.trim();
        let full = match section {
            Some(s) => format!("{s}.{k}"),
            None if SECTIONS.iter().any(|s| k.starts_with(&format!("{s}."))) => k.to_string(),
            None => format!("model.{k}"),
        };
        let key = table
            .iter()
            .find(|key| key.name == full)
            .ok_or_else(|| at(line_no, format!("unknown key `{full}`")))?;
        let parsed = parse_value(key, v).map_err(|m| at(line_no, m))?;
        if matches!(key.kind, Kind::Triple) && value["train"]["class_weights"].is_null() {
            value["train"]["class_weights"] = serde_json::json!({"valence": [1.0, 1.0, 1.0], "arousal": [1.0, 1.0, 1.0]});
        }
        *value
            .pointer_mut(&key.pointer)
            .unwrap_or_else(|| panic!("config key {} points at a missing field", key.name)) = parsed;
        assigned.retain(|(_, k)| k.name != key.name);
        assigned.push((line_no, key));
    }
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| ConfigError::Invalid {
        file: file.to_string(),
        msg: e.to_string(),
    })?;
    let check = cfg
        .model
        .validate()
        .and_then(|()| cfg.train.validate())
        .and_then(|()| {
            if cfg.data.test_frac + cfg.data.val_frac >= 1.0 {
                Err("data: test_frac + val_frac must be below 1".to_string())
            } else {
                Ok(())
            }
        });
    if let Err(msg) = check {
        // point at the latest line whose key names every part of the message it touches
        let line = assigned
            .iter()
            .rev()
            .find(|(_, k)| {
                let parts: Vec<&str> = k.name.split('.').skip(1).collect();
                parts.iter().all(|p| msg.contains(p))
            })
            .map(|(l, _)| *l);
        return Err(match line {
            Some(line) => at(line, msg),
            None => ConfigError::Invalid {
                file: file.to_string(),
                msg,
            },
        });
    }
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_str(&text, &path.display().to_string())
}

/// Applies a `MUMT_SEED` value to the training and split seeds.
pub fn apply_seed_override(cfg: &mut RunConfig, seed: Option<&str>) -> Result<(), ConfigError> {
    if let Some(s) = seed {
        let n: u64 = s.trim().parse().map_err(|_| ConfigError::Invalid {
            file: "MUMT_SEED".into(),
            msg: format!("expected a non-negative integer, got `{s}`"),
        })?;
        cfg.train.seed = n;
        cfg.data.seed = n;
    }
    Ok(())
}

/// Renders every key with its effective value, in a form `parse_config_str` reads back.
pub fn effective_config(cfg: &RunConfig) -> String {
    let value = serde_json::to_value(cfg).expect("config serializes");
    let mut out = String::new();
    let mut current = String::new();
    for key in keys() {
        let (section, name) = key.name.split_once('.').expect("sectioned key");
        if section != current {
            if !current.is_empty() {
                out.push('\n');
            }
            let _ = writeln!(out, "[{section}]");
            current = section.to_string();
        }
        let v = value.pointer(&key.pointer);
        let text = match v {
            None | Some(Value::Null) => {
                // class weights left to the data
                let _ = writeln!(out, "# {name} = <from training split>");
                continue;
            }
            Some(Value::Array(items)) => items
                .iter()
                .map(|x| match x {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect::<Vec<_>>()
                .join(", "),
            Some(Value::String(s)) if s.is_empty() || s.contains(['#', ';']) => format!("\"{s}\""),
            Some(Value::String(s)) => s.clone(),
            Some(other) => other.to_string(),
        };
        let _ = writeln!(out, "{name} = {text}");
    }
    out
}
