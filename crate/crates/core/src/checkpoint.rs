//! Checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (kind, config echo, vocabulary, array table, rng streams,
//! optimizer metadata, trainer state), then the raw little-endian arrays
//! back to back. Offsets in the array table are relative to the payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{bail, Error, Result};
use crate::lm::{Lm, LmConfig};
use crate::ppo::{KlControllerState, PpoConfig, PpoTrainer};
use crate::reward::{MtlConfig, MtlModel};
use crate::rng::{stream, RngState};
use crate::tensor::{Adam, AdamConfig, DType, Float, OptimizerState, ParamSet};
use crate::vocab::Vocab;

pub const MAGIC: &[u8; 8] = b"DETOXCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Policy,
    Reward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayMeta {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    offset: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerMeta {
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    kind: ModelKind,
    config: Value,
    vocab: Vocab,
    arrays: Vec<ArrayMeta>,
    rng: BTreeMap<String, RngState>,
    optimizer: Option<OptimizerMeta>,
    state: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn from_slice<F: Float>(xs: &[F]) -> Self {
        match F::DTYPE {
            DType::F32 => ArrayData::F32(xs.iter().map(|x| x.f64() as f32).collect()),
            DType::F64 => ArrayData::F64(xs.iter().map(|x| x.f64()).collect()),
        }
    }

    pub fn to_vec<F: Float>(&self) -> Vec<F> {
        match self {
            ArrayData::F32(v) => v.iter().map(|&x| F::of(x as f64)).collect(),
            ArrayData::F64(v) => v.iter().map(|&x| F::of(x)).collect(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::F32(_) => DType::F32,
            ArrayData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    /// Architecture config of the stored model.
    pub config: Value,
    pub vocab: Vocab,
    pub arrays: Vec<NamedArray>,
    pub rng: BTreeMap<String, RngState>,
    pub optimizer: Option<OptimizerMeta>,
    /// Free-form trainer state (step counters, controller state, run config).
    pub state: Value,
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Checkpoint(e.to_string())
}

impl Checkpoint {
    fn new(kind: ModelKind, config: Value, vocab: Vocab) -> Self {
        Checkpoint {
            kind,
            config,
            vocab,
            arrays: Vec::new(),
            rng: BTreeMap::new(),
            optimizer: None,
            state: Value::Null,
        }
    }

    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Stores every parameter as `{prefix}{name}`.
    pub fn put_params<F: Float>(&mut self, prefix: &str, params: &ParamSet<F>) {
        for (name, t) in params.iter() {
            self.arrays.push(NamedArray {
                name: format!("{prefix}{name}"),
                shape: t.shape().to_vec(),
                data: ArrayData::from_slice(t.data()),
            });
        }
    }

    /// Fills `params` from `{prefix}{name}` arrays; every parameter must be
    /// present with the same shape.
    pub fn take_params<F: Float>(&self, prefix: &str, params: &mut ParamSet<F>) -> Result<()> {
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_owned()).collect();
        for name in names {
            let key = format!("{prefix}{name}");
            let Some(a) = self.array(&key) else {
                bail!(Checkpoint, "checkpoint has no array {key}");
            };
            params.set_values(&name, &a.shape, a.data.to_vec())?;
        }
        let expected = params.len();
        let stored = self
            .arrays
            .iter()
            .filter(|a| a.name.strip_prefix(prefix).is_some_and(|n| !n.contains('/')))
            .count();
        if stored != expected {
            bail!(
                Checkpoint,
                "checkpoint has {stored} arrays under {prefix:?}, the model has {expected}"
            );
        }
        Ok(())
    }

    pub fn put_optimizer<F: Float>(&mut self, opt: &Adam<F>, params: &ParamSet<F>) {
        for (i, (name, t)) in params.iter().enumerate() {
            for (which, buf) in [("adam.m/", &opt.state.m[i]), ("adam.v/", &opt.state.v[i])] {
                self.arrays.push(NamedArray {
                    name: format!("{which}{name}"),
                    shape: t.shape().to_vec(),
                    data: ArrayData::from_slice(buf),
                });
            }
        }
        self.optimizer = Some(OptimizerMeta {
            config: opt.config,
            step: opt.state.step,
        });
    }

    pub fn take_optimizer<F: Float>(&self, params: &ParamSet<F>) -> Result<Adam<F>> {
        let Some(meta) = self.optimizer else {
            bail!(Checkpoint, "checkpoint carries no optimizer state");
        };
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for (name, t) in params.iter() {
            for (which, out) in [("adam.m/", &mut m), ("adam.v/", &mut v)] {
                let key = format!("{which}{name}");
                let Some(a) = self.array(&key) else {
                    bail!(Checkpoint, "checkpoint has no array {key}");
                };
                if a.shape != t.shape() {
                    bail!(Checkpoint, "{key}: shape {:?} vs parameter {:?}", a.shape, t.shape());
                }
                out.push(a.data.to_vec());
            }
        }
        Ok(Adam {
            config: meta.config,
            state: OptimizerState { m, v, step: meta.step },
        })
    }

    pub fn from_policy<F: Float>(lm: &Lm<F>, vocab: &Vocab) -> Self {
        let config = serde_json::to_value(&lm.config).expect("config serializes");
        let mut ck = Checkpoint::new(ModelKind::Policy, config, vocab.clone());
        ck.put_params("model/", &lm.params);
        ck
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            bail!(Checkpoint, "expected a {kind:?} checkpoint, found {:?}", self.kind);
        }
        Ok(())
    }

    pub fn to_policy<F: Float>(&self) -> Result<Lm<F>> {
        self.expect_kind(ModelKind::Policy)?;
        let config: LmConfig = serde_json::from_value(self.config.clone()).map_err(json_err)?;
        if config.vocab_size != self.vocab.len() {
            bail!(
                Checkpoint,
                "policy expects {} words, stored vocabulary has {}",
                config.vocab_size,
                self.vocab.len()
            );
        }
        let mut lm = Lm::new(config, &mut stream(0, "checkpoint"))?;
        self.take_params("model/", &mut lm.params)?;
        Ok(lm)
    }

    pub fn from_reward<F: Float>(model: &MtlModel<F>) -> Self {
        let config = serde_json::to_value(&model.config).expect("config serializes");
        let mut ck = Checkpoint::new(ModelKind::Reward, config, model.vocab.clone());
        ck.put_params("model/", &model.params);
        ck
    }

    pub fn to_reward<F: Float>(&self) -> Result<MtlModel<F>> {
        self.expect_kind(ModelKind::Reward)?;
        let config: MtlConfig = serde_json::from_value(self.config.clone()).map_err(json_err)?;
        let mut model = MtlModel::new(config, self.vocab.clone(), &mut stream(0, "checkpoint"))?;
        self.take_params("model/", &mut model.params)?;
        Ok(model)
    }

    /// Policy, frozen reference, optimizer, controller, rng and step count.
    pub fn from_trainer<F: Float>(trainer: &PpoTrainer<F>, vocab: &Vocab) -> Self {
        let mut ck = Checkpoint::from_policy(&trainer.policy, vocab);
        ck.put_params("reference/", &trainer.reference.params);
        ck.put_optimizer(&trainer.optimizer, &trainer.policy.params);
        ck.rng.insert("ppo".into(), RngState::capture(&trainer.rng));
        ck.state = serde_json::json!({
            "ppo": trainer.config,
            "kl": trainer.kl,
            "step": trainer.step,
        });
        ck
    }

    pub fn to_trainer<F: Float>(&self) -> Result<PpoTrainer<F>> {
        let policy = self.to_policy::<F>()?;
        let mut reference = policy.clone();
        self.take_params("reference/", &mut reference.params)?;
        let optimizer = self.take_optimizer(&policy.params)?;
        let field = |k: &str| -> Result<Value> {
            match self.state.get(k) {
                Some(v) => Ok(v.clone()),
                None => bail!(Checkpoint, "checkpoint has no trainer state field {k:?}"),
            }
        };
        let config: PpoConfig = serde_json::from_value(field("ppo")?).map_err(json_err)?;
        let kl: KlControllerState = serde_json::from_value(field("kl")?).map_err(json_err)?;
        let step: usize = serde_json::from_value(field("step")?).map_err(json_err)?;
        let Some(rng) = self.rng.get("ppo") else {
            bail!(Checkpoint, "checkpoint has no ppo rng stream");
        };
        Ok(PpoTrainer {
            config,
            policy,
            reference,
            optimizer,
            kl,
            rng: rng.restore()?,
            step,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut metas = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            metas.push(ArrayMeta {
                name: a.name.clone(),
                shape: a.shape.clone(),
                dtype: a.data.dtype(),
                offset: payload.len() as u64,
            });
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let header = Header {
            version: FORMAT_VERSION,
            kind: self.kind,
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            arrays: metas,
            rng: self.rng.clone(),
            optimizer: self.optimizer,
            state: self.state.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            bail!(Checkpoint, "not a checkpoint file (bad magic or too short)");
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            bail!(Checkpoint, "format version {version} is not supported (expected {FORMAT_VERSION})");
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let Some(hend) = usize::try_from(hlen)
            .ok()
            .and_then(|h| h.checked_add(20))
            .filter(|&e| e <= bytes.len())
        else {
            bail!(Checkpoint, "header length {hlen} runs past the end of the file");
        };
        let header: Header = serde_json::from_slice(&bytes[20..hend]).map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
        if header.version != version {
            bail!(
                Checkpoint,
                "header version {} disagrees with prefix version {version}",
                header.version
            );
        }
        let payload = &bytes[hend..];
        let mut expected = 0u64;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for m in header.arrays {
            if m.offset != expected {
                bail!(Checkpoint, "array {} starts at {}, expected {expected}", m.name, m.offset);
            }
            let n: usize = m.shape.iter().product();
            let size = (n * m.dtype.size()) as u64;
            let end = expected + size;
            if end > payload.len() as u64 {
                bail!(
                    Checkpoint,
                    "array {} is truncated ({} of {size} bytes)",
                    m.name,
                    payload.len() as u64 - expected.min(payload.len() as u64)
                );
            }
            let raw = &payload[expected as usize..end as usize];
            let data = match m.dtype {
                DType::F32 => ArrayData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect()),
                DType::F64 => ArrayData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect()),
            };
            arrays.push(NamedArray {
                name: m.name,
                shape: m.shape,
                data,
            });
            expected = end;
        }
        if expected != payload.len() as u64 {
            bail!(
                Checkpoint,
                "{} trailing bytes after the last array",
                payload.len() as u64 - expected
            );
        }
        Ok(Checkpoint {
            kind: header.kind,
            config: header.config,
            vocab: header.vocab,
            arrays,
            rng: header.rng,
            optimizer: header.optimizer,
            state: header.state,
        })
    }

    /// Writes to a sibling temp file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingCheckpoint(path.into())),
            Err(e) => return Err(Error::io(path, e)),
        };
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ppo::PpoConfig;

    fn lm() -> (Lm<f32>, Vocab) {
        let vocab = Vocab::build(["a", "b", "c", "d"]);
        let cfg = LmConfig {
            vocab_size: vocab.len(),
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            max_seq_len: 24,
            tie_embeddings: false,
        };
        (Lm::new(cfg, &mut stream(3, "init")).unwrap(), vocab)
    }

    fn bits(ps: &ParamSet<f32>) -> Vec<Vec<u32>> {
        ps.iter().map(|(_, t)| t.data().iter().map(|x| x.to_bits()).collect()).collect()
    }

    #[test]
    fn policy_round_trip_is_bit_exact() {
        let (m, vocab) = lm();
        let bytes = Checkpoint::from_policy(&m, &vocab).to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.vocab, vocab);
        assert_eq!(bits(&back.to_policy::<f32>().unwrap().params), bits(&m.params));
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn every_truncation_is_an_error() {
        let (m, vocab) = lm();
        let bytes = Checkpoint::from_policy(&m, &vocab).to_bytes();
        for cut in [0, 7, 19, 20, 100, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Checkpoint(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let (m, vocab) = lm();
        let mut bytes = Checkpoint::from_policy(&m, &vocab).to_bytes();
        bytes[8] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
    }

    #[test]
    fn wrong_kind_and_shape_are_rejected() {
        let (m, vocab) = lm();
        let mut ck = Checkpoint::from_policy(&m, &vocab);
        assert!(ck.to_reward::<f32>().is_err());
        ck.arrays[0].shape = vec![1, ck.arrays[0].data.len()];
        let err = ck.to_policy::<f32>().unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn missing_file_is_a_missing_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let err = Checkpoint::load(&dir.path().join("nope.ckpt")).unwrap_err();
        assert!(matches!(err, Error::MissingCheckpoint(_)));
    }

    #[test]
    fn trainer_state_survives_a_save() {
        let (m, vocab) = lm();
        let cfg = PpoConfig {
            batch_size: 2,
            ..PpoConfig::default()
        };
        let mut t = PpoTrainer::new(m, cfg, stream(3, "ppo")).unwrap();
        t.step = 5;
        t.kl.beta = 0.37;
        t.optimizer.state.step = 9;
        t.optimizer.state.m[0][0] = 0.25;
        let back: PpoTrainer<f32> = Checkpoint::from_bytes(&Checkpoint::from_trainer(&t, &vocab).to_bytes())
            .unwrap()
            .to_trainer()
            .unwrap();
        assert_eq!(
            (back.step, back.kl.clone(), back.config.clone()),
            (5, t.kl.clone(), t.config.clone())
        );
        assert_eq!(back.optimizer.state, t.optimizer.state);
        assert_eq!(RngState::capture(&back.rng), RngState::capture(&t.rng));
        assert_eq!(bits(&back.reference.params), bits(&t.reference.params));
    }
}
