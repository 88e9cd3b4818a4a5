//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every error carries
//! the 1-based line and column of the offending text.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::attention::MessagePassingMode;
use crate::data::{Shift, SyntheticSpec};
use crate::error::{Error, Result};
use crate::pseudo_label::Metric;
use crate::trainer::{Scheme, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    key: String,
    value: String,
    line: usize,
    key_col: usize,
    value_col: usize,
}

/// Parsed `key = value` pairs in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyValues {
    path: String,
    entries: Vec<Entry>,
}

impl KeyValues {
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let err = |line, column, message: String| Error::ConfigParse {
            path: path.to_owned(),
            line,
            column,
            message,
        };
        let mut entries: Vec<Entry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim_start();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let indent = raw.len() - trimmed.len();
            let Some(eq) = raw.find('=') else {
                return Err(err(line, indent + 1, "expected `key = value`".into()));
            };
            let key_part = &raw[..eq];
            let key = key_part.trim();
            if key.is_empty() {
                return Err(err(line, eq + 1, "missing key before `=`".into()));
            }
            let key_col = indent + 1;
            if let Some(bad) = key.find(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '-')) {
                return Err(err(line, key_col + bad, format!("invalid character in key {key:?}")));
            }
            let value_part = &raw[eq + 1..];
            let value = value_part.trim();
            let value_col = eq + 2 + (value_part.len() - value_part.trim_start().len());
            let key = key.replace('-', "_");
            if let Some(prev) = entries.iter().find(|e| e.key == key) {
                return Err(err(
                    line,
                    key_col,
                    format!("duplicate key {key:?} (first set on line {})", prev.line),
                ));
            }
            entries.push(Entry {
                key,
                value: value.to_owned(),
                line,
                key_col,
                value_col,
            });
        }
        Ok(KeyValues {
            path: path.to_owned(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.key.as_str())
    }

    pub fn get_raw(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|e| e.key == key).map(|e| e.value.as_str())
    }

    /// Takes `key` out of the set, returning its raw value.
    pub fn remove(&mut self, key: &str) -> Option<String> {
        let i = self.entries.iter().position(|e| e.key == key)?;
        Some(self.entries.remove(i).value)
    }

    /// Fails on the first key not in `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self.entries.iter().find(|e| !allowed.contains(&e.key.as_str())) {
            Some(e) => Err(Error::ConfigParse {
                path: self.path.clone(),
                line: e.line,
                column: e.key_col,
                message: format!("unknown key {:?}", e.key),
            }),
            None => Ok(()),
        }
    }

    /// Typed value of `key`, if present.
    pub fn get<T: ConfigValue>(&self, key: &str) -> Result<Option<T>> {
        let Some(e) = self.entries.iter().find(|e| e.key == key) else {
            return Ok(None);
        };
        T::parse_value(&e.value)
            .map(Some)
            .map_err(|message| Error::ConfigParse {
                path: self.path.clone(),
                line: e.line,
                column: e.value_col,
                message: format!("{key}: {message}"),
            })
    }

    fn set<T: ConfigValue>(&self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }
}

/// Values that can appear on the right of `=`.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
}

macro_rules! from_str_value {
    ($($t:ty => $what:literal),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|_| format!("expected {}, got {s:?}", $what))
            }
        }
    )*};
}

from_str_value!(usize => "a non-negative integer", u64 => "a non-negative integer", u32 => "a non-negative integer", f64 => "a number");

impl ConfigValue for bool {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            _ => Err(format!("expected true or false, got {s:?}")),
        }
    }
}

macro_rules! enum_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                <$t>::from_str(s).map_err(|e| e.to_string())
            }
        }
    )*};
}

enum_value!(MessagePassingMode, Scheme, Metric);

pub const TRAIN_KEYS: &[&str] = &[
    "scheme",
    "mode",
    "iterations_1",
    "iterations_2",
    "lr",
    "momentum",
    "weight_decay",
    "batch_size",
    "seed",
    "gumbel_temperature",
    "gumbel_noise",
    "gumbel_seed",
    "grl_lambda_max",
    "grl_gamma",
    "grl_constant",
    "image_size",
    "patch_size",
    "in_channels",
    "embed_dim",
    "depth",
    "heads",
    "mlp_ratio",
    "num_classes",
    "num_group_tokens",
    "masked_depth",
    "st_gate",
    "layer_norm_eps",
    "metric",
    "disc_hidden_ratio",
    "eval_every",
    "record_time",
];

pub const SPEC_KEYS: &[&str] = &[
    "num_classes",
    "train_per_class",
    "eval_per_class",
    "image_size",
    "channels",
    "brightness",
    "texture",
    "noise",
    "hue_degrees",
    "seed",
];

/// Overlays the keys present in `kv` onto `base`. An unset `masked_depth`
/// follows `depth`.
pub fn train_config(kv: &KeyValues, base: &TrainConfig) -> Result<TrainConfig> {
    kv.check_keys(TRAIN_KEYS)?;
    let mut c = base.clone();
    let depth_before = c.model.depth;
    kv.set("scheme", &mut c.scheme)?;
    kv.set("mode", &mut c.model.mode)?;
    kv.set("iterations_1", &mut c.iterations_1)?;
    kv.set("iterations_2", &mut c.iterations_2)?;
    kv.set("lr", &mut c.lr)?;
    kv.set("momentum", &mut c.momentum)?;
    kv.set("weight_decay", &mut c.weight_decay)?;
    kv.set("batch_size", &mut c.batch_size)?;
    kv.set("seed", &mut c.seed)?;
    kv.set("gumbel_temperature", &mut c.gumbel.temperature)?;
    kv.set("gumbel_noise", &mut c.gumbel.noise_enabled)?;
    kv.set("gumbel_seed", &mut c.gumbel.rng_seed)?;
    kv.set("grl_lambda_max", &mut c.grl.lambda_max)?;
    kv.set("grl_gamma", &mut c.grl.gamma)?;
    kv.set("grl_constant", &mut c.grl.constant)?;
    kv.set("image_size", &mut c.model.image_size)?;
    kv.set("patch_size", &mut c.model.patch_size)?;
    kv.set("in_channels", &mut c.model.in_channels)?;
    kv.set("embed_dim", &mut c.model.embed_dim)?;
    kv.set("depth", &mut c.model.depth)?;
    kv.set("heads", &mut c.model.heads)?;
    kv.set("mlp_ratio", &mut c.model.mlp_ratio)?;
    kv.set("num_classes", &mut c.model.num_classes)?;
    kv.set("num_group_tokens", &mut c.model.num_group_tokens)?;
    if kv.get_raw("masked_depth").is_none() && c.model.masked_depth == depth_before {
        c.model.masked_depth = c.model.depth;
    }
    kv.set("masked_depth", &mut c.model.masked_depth)?;
    kv.set("st_gate", &mut c.model.st_gate)?;
    kv.set("layer_norm_eps", &mut c.model.layer_norm_eps)?;
    kv.set("metric", &mut c.metric)?;
    kv.set("disc_hidden_ratio", &mut c.disc_hidden_ratio)?;
    kv.set("eval_every", &mut c.eval_every)?;
    kv.set("record_time", &mut c.record_time)?;
    c.validate()?;
    Ok(c)
}

pub fn synthetic_spec(kv: &KeyValues, base: &SyntheticSpec) -> Result<SyntheticSpec> {
    kv.check_keys(SPEC_KEYS)?;
    let mut s = base.clone();
    kv.set("num_classes", &mut s.num_classes)?;
    kv.set("train_per_class", &mut s.train_per_class)?;
    kv.set("eval_per_class", &mut s.eval_per_class)?;
    kv.set("image_size", &mut s.image_size)?;
    kv.set("channels", &mut s.channels)?;
    kv.set("brightness", &mut s.shift.brightness)?;
    kv.set("texture", &mut s.shift.texture)?;
    kv.set("noise", &mut s.shift.noise)?;
    kv.set("hue_degrees", &mut s.shift.hue_degrees)?;
    kv.set("seed", &mut s.seed)?;
    s.validate()?;
    Ok(s)
}

/// Every training key with its resolved value, one per line, in a fixed
/// order. Parsing the output reproduces `c`.
pub fn render_train(c: &TrainConfig) -> String {
    let m = &c.model;
    let mut s = String::new();
    let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
    put("scheme", c.scheme.to_string());
    put("mode", m.mode.to_string());
    put("iterations_1", c.iterations_1.to_string());
    put("iterations_2", c.iterations_2.to_string());
    put("lr", c.lr.to_string());
    put("momentum", c.momentum.to_string());
    put("weight_decay", c.weight_decay.to_string());
    put("batch_size", c.batch_size.to_string());
    put("seed", c.seed.to_string());
    put("gumbel_temperature", c.gumbel.temperature.to_string());
    put("gumbel_noise", c.gumbel.noise_enabled.to_string());
    put("gumbel_seed", c.gumbel.rng_seed.to_string());
    put("grl_lambda_max", c.grl.lambda_max.to_string());
    put("grl_gamma", c.grl.gamma.to_string());
    put("grl_constant", c.grl.constant.to_string());
    put("image_size", m.image_size.to_string());
    put("patch_size", m.patch_size.to_string());
    put("in_channels", m.in_channels.to_string());
    put("embed_dim", m.embed_dim.to_string());
    put("depth", m.depth.to_string());
    put("heads", m.heads.to_string());
    put("mlp_ratio", m.mlp_ratio.to_string());
    put("num_classes", m.num_classes.to_string());
    put("num_group_tokens", m.num_group_tokens.to_string());
    put("masked_depth", m.masked_depth.to_string());
    put("st_gate", m.st_gate.to_string());
    put("layer_norm_eps", m.layer_norm_eps.to_string());
    put("metric", c.metric.name().to_string());
    put("disc_hidden_ratio", c.disc_hidden_ratio.to_string());
    put("eval_every", c.eval_every.to_string());
    put("record_time", c.record_time.to_string());
    s
}

pub fn render_spec(s: &SyntheticSpec) -> String {
    let Shift {
        brightness,
        texture,
        noise,
        hue_degrees,
    } = s.shift;
    let mut out = String::new();
    for (k, v) in [
        ("num_classes", s.num_classes.to_string()),
        ("train_per_class", s.train_per_class.to_string()),
        ("eval_per_class", s.eval_per_class.to_string()),
        ("image_size", s.image_size.to_string()),
        ("channels", s.channels.to_string()),
        ("brightness", brightness.to_string()),
        ("texture", texture.to_string()),
        ("noise", noise.to_string()),
        ("hue_degrees", hue_degrees.to_string()),
        ("seed", s.seed.to_string()),
    ] {
        writeln!(out, "{k} = {v}").unwrap();
    }
    out
}
