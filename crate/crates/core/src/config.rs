//! Model configuration and the flat `key = value` config file format.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Captioning backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    /// Two-layer recurrent attention decoder.
    UpDown,
    Transformer,
}

impl FromStr for Backbone {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "updown" | "ud" | "up-down" => Ok(Backbone::UpDown),
            "transformer" | "tr" => Ok(Backbone::Transformer),
            _ => Err(Error::Config(format!("unknown backbone `{s}`"))),
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::UpDown => "updown",
            Backbone::Transformer => "transformer",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub d_v: usize,
    pub d_l: usize,
    pub d_h: usize,
    pub d_a: usize,
    pub d_e: usize,
    pub d_u: usize,
    pub d_s: usize,
    pub d_sem: usize,
    pub d_tr: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Decoder layer whose cross-attention is exported; `None` = last.
    pub attn_layer: Option<usize>,
    /// Weight of the relational-captioning term.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::UpDown,
            d_v: 64,
            d_l: 32,
            d_h: 64,
            d_a: 32,
            d_e: 32,
            d_u: 64,
            d_s: 32,
            d_sem: 16,
            d_tr: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            attn_layer: None,
            lambda: 0.7,
            seed: 42,
        }
    }
}

impl ModelConfig {
    /// A very small configuration for gradient checks and unit tests.
    pub fn tiny(backbone: Backbone) -> Self {
        Self {
            backbone,
            d_v: 5,
            d_l: 4,
            d_h: 3,
            d_a: 3,
            d_e: 3,
            d_u: 4,
            d_s: 3,
            d_sem: 2,
            d_tr: 4,
            heads: 2,
            enc_layers: 1,
            dec_layers: 2,
            attn_layer: None,
            lambda: 0.7,
            seed: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_v", self.d_v),
            ("d_l", self.d_l),
            ("d_h", self.d_h),
            ("d_a", self.d_a),
            ("d_e", self.d_e),
            ("d_u", self.d_u),
            ("d_s", self.d_s),
            ("d_sem", self.d_sem),
            ("d_tr", self.d_tr),
            ("heads", self.heads),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_tr.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide d_tr ({})",
                self.heads, self.d_tr
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if let Some(l) = self.attn_layer {
            if l >= self.dec_layers {
                return Err(Error::Config(format!(
                    "attn_layer {l} out of range for {} decoder layers",
                    self.dec_layers
                )));
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, kv: &KvConfig) -> Result<()> {
        kv.set(&mut self.backbone, "backbone")?;
        kv.set(&mut self.d_v, "d_v")?;
        kv.set(&mut self.d_l, "d_l")?;
        kv.set(&mut self.d_h, "d_h")?;
        kv.set(&mut self.d_a, "d_a")?;
        kv.set(&mut self.d_e, "d_e")?;
        kv.set(&mut self.d_u, "d_u")?;
        kv.set(&mut self.d_s, "d_s")?;
        kv.set(&mut self.d_sem, "d_sem")?;
        kv.set(&mut self.d_tr, "d_tr")?;
        kv.set(&mut self.heads, "heads")?;
        kv.set(&mut self.enc_layers, "enc_layers")?;
        kv.set(&mut self.dec_layers, "dec_layers")?;
        if let Some(l) = kv.get::<usize>("attn_layer")? {
            self.attn_layer = Some(l);
        }
        kv.set(&mut self.lambda, "lambda")?;
        kv.set(&mut self.seed, "seed")?;
        self.validate()
    }

    pub const KEYS: &'static [&'static str] = &[
        "backbone",
        "d_v",
        "d_l",
        "d_h",
        "d_a",
        "d_e",
        "d_u",
        "d_s",
        "d_sem",
        "d_tr",
        "heads",
        "enc_layers",
        "dec_layers",
        "attn_layer",
        "lambda",
        "seed",
    ];
}

/// Flat `key = value` configuration. `#` starts a comment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    /// Entries of `other` win.
    pub fn merge(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::Config(format!("bad value `{v}` for `{key}`: {e}"))),
        }
    }

    pub fn set<T: FromStr>(&self, slot: &mut T, key: &str) -> Result<()>
    where
        T::Err: fmt::Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Errors on any key not in `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for k in self.entries.keys() {
            if !known.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
