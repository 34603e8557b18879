//! Record schemas, line-delimited JSON I/O and the synthetic corpus.

mod synth;

pub use synth::{make_toy_data, sample_documents, Corpus, Doc, Lexicon, SyntheticCorpusSpec, IDENTITY_PROMPT_GROUPS};

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

pub const SUBTYPES: [&str; 6] = [
    "severe_toxicity",
    "obscene",
    "threat",
    "insult",
    "identity_attack",
    "sexual_explicit",
];
pub const GENDER: [&str; 4] = ["female", "male", "transgender", "other_gender"];
pub const RELIGION: [&str; 6] = ["christian", "jewish", "muslim", "atheist", "buddhist", "other_religion"];
pub const RACE: [&str; 5] = ["asian", "black", "latino", "white", "other_race_or_ethnicity"];
pub const ORIENTATION: [&str; 3] = ["heterosexual", "homosexual_gay_or_lesbian", "other_sexual_orientation"];

/// Every identity attribute, in task order.
pub fn identity_labels() -> impl Iterator<Item = &'static str> {
    GENDER.into_iter().chain(RELIGION).chain(RACE).chain(ORIENTATION)
}

/// One labeled comment. Fractions are shares of raters in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MtlExample {
    pub text: String,
    pub toxicity: f64,
    pub subtypes: BTreeMap<String, f64>,
    pub identities: Option<BTreeMap<String, f64>>,
}

impl MtlExample {
    pub fn validate(&self) -> Result<()> {
        let fractions = std::iter::once(("toxicity", self.toxicity))
            .chain(self.subtypes.iter().map(|(k, &v)| (k.as_str(), v)))
            .chain(self.identities.iter().flatten().map(|(k, &v)| (k.as_str(), v)));
        for (k, v) in fractions {
            if !(0.0..=1.0).contains(&v) {
                bail!(Data, "{k} fraction {v} outside [0, 1]");
            }
        }
        for s in SUBTYPES {
            if !self.subtypes.contains_key(s) {
                bail!(Data, "missing subtype field {s:?}");
            }
        }
        if let Some(ids) = &self.identities {
            for l in identity_labels() {
                if !ids.contains_key(l) {
                    bail!(Data, "identity fields must be all present or all absent; {l:?} is missing");
                }
            }
        }
        Ok(())
    }
}

/// A generation prompt. `toxicity` is the label of the source document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRecord {
    pub text: String,
    pub toxicity: Option<f64>,
    pub group: Option<String>,
}

/// Reads one JSON value per line. A final line without a newline is a
/// partial write and is rejected rather than silently dropped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut raw = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if !raw.is_empty() && !raw.ends_with('\n') {
        bail!(Data, "{}: last record is not newline-terminated (partial write)", path.display());
    }
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

/// Appends records, one `write_all` per line.
pub fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        let mut line = serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
        line.push('\n');
        f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Replaces `path` with exactly `records`.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    File::create(path).map_err(|e| Error::io(path, e))?;
    append_jsonl(path, records)
}

/// One document per line.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(raw.lines().filter(|l| !l.trim().is_empty()).map(str::to_owned).collect())
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut body = lines.join("\n");
    if !body.is_empty() {
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}
