//! Run configuration: one flat file of dotted `key = value` lines.
//!
//! Every key has a default (see [`RunConfig::default`]); a file or a
//! `--set key=value` override only names the keys it changes. Unknown keys
//! are rejected with the offending key in the message.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::data::SyntheticCorpusSpec;
use crate::error::{bail, Error, Result};
use crate::eval::EvalConfig;
use crate::lm::{LmConfig, PretrainConfig};
use crate::ppo::{DaptConfig, PpoConfig};
use crate::reward::{MtlConfig, MtlTrainConfig};
use crate::rng::derive_seed;

/// Keys filled from the master seed rather than read.
const DERIVED: [&str; 2] = ["data.seed", "eval.seed"];

/// Policy architecture; the vocabulary size comes from the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmArch {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub max_seq_len: usize,
    pub tie_embeddings: bool,
}

impl LmArch {
    pub fn with_vocab(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            vocab_size,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            max_seq_len: self.max_seq_len,
            tie_embeddings: self.tie_embeddings,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardArch {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub tasks: Vec<u8>,
}

impl RewardArch {
    pub fn with_vocab(&self, vocab_size: usize) -> MtlConfig {
        MtlConfig {
            vocab_size,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            max_seq_len: self.max_seq_len,
            dropout: self.dropout,
            tasks: self.tasks.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every component stream is derived from it.
    pub seed: u64,
    /// Corpus generator. Its seed is the master seed, and the evaluation
    /// seed is derived from it.
    pub data: SyntheticCorpusSpec,
    pub lm: LmArch,
    pub pretrain: PretrainConfig,
    pub reward: RewardArch,
    pub mtl: MtlTrainConfig,
    pub ppo: PpoConfig,
    pub dapt: DaptConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let seed = 7;
        let lm = LmConfig::desk(0);
        let reward = MtlConfig::desk(0);
        RunConfig {
            seed,
            data: SyntheticCorpusSpec {
                seed,
                ..SyntheticCorpusSpec::default()
            },
            lm: LmArch {
                n_layers: lm.n_layers,
                n_heads: lm.n_heads,
                d_model: lm.d_model,
                max_seq_len: lm.max_seq_len,
                tie_embeddings: lm.tie_embeddings,
            },
            pretrain: PretrainConfig::default(),
            reward: RewardArch {
                n_layers: reward.n_layers,
                n_heads: reward.n_heads,
                d_model: reward.d_model,
                max_seq_len: reward.max_seq_len,
                dropout: reward.dropout,
                tasks: reward.tasks,
            },
            mtl: MtlTrainConfig::default(),
            ppo: PpoConfig::default(),
            dapt: DaptConfig::default(),
            eval: EvalConfig {
                seed: derive_seed(seed, "eval"),
                ..EvalConfig::default()
            },
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_owned(), other.clone());
        }
    }
}

fn set_path(root: &mut toml::Table, key: &str, value: Value) {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("nonempty key");
    let mut t = root;
    for p in parts {
        t = t
            .entry(p)
            .or_insert_with(|| Value::Table(toml::Table::new()))
            .as_table_mut()
            .expect("default layout is a table here");
    }
    t.insert(last.to_owned(), value);
}

/// Parses the right-hand side of `--set key=value`; bare words are strings.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_owned()))
}

impl RunConfig {
    /// TOML form with the derived seeds zeroed (they may not fit an i64).
    fn to_value(&self) -> Value {
        let mut echo = self.clone();
        echo.eval.seed = 0;
        Value::try_from(echo).expect("config serializes")
    }

    fn defaults_flat() -> BTreeMap<String, Value> {
        let v = RunConfig::default().to_value();
        let mut flat = BTreeMap::new();
        flatten("", &v, &mut flat);
        for k in DERIVED {
            flat.remove(k);
        }
        flat
    }

    /// Every documented key with its default value, in key order.
    pub fn default_keys() -> Vec<(String, String)> {
        Self::defaults_flat().into_iter().map(|(k, v)| (k, v.to_string())).collect()
    }

    /// Defaults, then the file's keys, then `key=value` overrides.
    pub fn resolve(file: Option<&str>, overrides: &[String]) -> Result<Self> {
        let known = Self::defaults_flat();
        let mut given: Vec<(String, Value)> = Vec::new();
        if let Some(text) = file {
            let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
            let mut flat = BTreeMap::new();
            flatten("", &Value::Table(table), &mut flat);
            given.extend(flat);
        }
        for o in overrides {
            let Some((k, v)) = o.split_once('=') else {
                bail!(Config, "override {o:?} is not of the form key=value");
            };
            given.push((k.trim().to_owned(), parse_value(v.trim())));
        }
        let mut root = match RunConfig::default().to_value() {
            Value::Table(t) => t,
            _ => unreachable!("config is a table"),
        };
        for (k, v) in given {
            let Some(default) = known.get(&k) else {
                bail!(Config, "unknown config key {k:?}");
            };
            let v = match (default, v) {
                (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
                (_, v) => v,
            };
            if std::mem::discriminant(default) != std::mem::discriminant(&v) {
                bail!(Config, "config key {k:?} expects a {}, got {v}", default.type_str());
            }
            set_path(&mut root, &k, v);
        }
        let mut cfg: RunConfig = Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.data.seed = cfg.seed;
        cfg.eval.seed = derive_seed(cfg.seed, "eval");
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::resolve(Some(&text), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.lm.with_vocab(2).validate()?;
        self.reward.with_vocab(2).validate()?;
        self.ppo.validate()?;
        self.eval.validate()?;
        if self.pretrain.batch_size == 0 || self.mtl.batch_size == 0 || self.dapt.batch_size == 0 {
            bail!(Config, "batch sizes must be positive");
        }
        Ok(())
    }

    /// Flat `key = value` text that [`RunConfig::resolve`] reads back to
    /// the same config.
    pub fn to_flat_toml(&self) -> String {
        let v = self.to_value();
        let mut flat = BTreeMap::new();
        flatten("", &v, &mut flat);
        for k in DERIVED {
            flat.remove(k);
        }
        let mut out = String::from("# effective run configuration\n");
        for (k, v) in flat {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}
