//! Plain-text run configuration: UTF-8 `key = value` lines with `#`
//! comments.
//!
//! Serializing a parsed [`RunConfig`] yields its canonical form: every key,
//! in a fixed order, with defaults filled in. Feeding the canonical form
//! back reproduces the same configuration.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pipeline::TrainConfig;
use crate::segnet::ModelConfig;

pub type KeyValues = Vec<(String, String)>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse_kv(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(Error::ConfigParse {
                line,
                msg: format!("expected 'key = value', found '{content}'"),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(Error::ConfigParse {
                line,
                msg: "empty key".into(),
            });
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(Error::ConfigParse {
                line,
                msg: format!("duplicate key '{key}' (first set on line {})", prev.line),
            });
        }
        out.push(Entry {
            line,
            key: key.to_string(),
            value: value.to_string(),
        });
    }
    Ok(out)
}

pub(crate) fn parse_num<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("invalid number '{value}'"))
}

pub(crate) fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, found '{value}'")),
    }
}

pub(crate) fn parse_list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, String> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_num(v.trim())).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data_dir: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model.in_channels != 1 {
            return Err(Error::Config(
                "in_channels must be 1; later stages add the fed-back channel themselves".into(),
            ));
        }
        self.model.validate()?;
        self.train.validate()
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        let mut block_lengths = Vec::new();
        for e in parse_kv(text)? {
            let err = |msg: String| Error::ConfigParse { line: e.line, msg };
            let path = || (!e.value.is_empty()).then(|| PathBuf::from(&e.value));
            match e.key.as_str() {
                "data_dir" => config.data_dir = path(),
                "out_dir" => config.out_dir = path(),
                key => {
                    let owned = match config.model.apply(key, &e.value).map_err(err)? {
                        true => {
                            if key.starts_with("block_") {
                                block_lengths.push((e.line, config.model.blocks.len()));
                            }
                            true
                        }
                        false => config.train.apply(key, &e.value).map_err(err)?,
                    };
                    if !owned {
                        return Err(err(format!("unknown key '{key}'")));
                    }
                }
            }
        }
        crate::segnet::config::check_block_lists(&block_lengths)?;
        config.validate()?;
        Ok(config)
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        writeln!(f, "# paths")?;
        writeln!(f, "data_dir = {}", show(&self.data_dir))?;
        writeln!(f, "out_dir = {}", show(&self.out_dir))?;
        writeln!(f, "# model")?;
        for (k, v) in self.model.to_kv() {
            writeln!(f, "{k} = {v}")?;
        }
        writeln!(f, "# training")?;
        for (k, v) in self.train.to_kv() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
