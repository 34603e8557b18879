//! Multitask toxicity classifier: shared encoder, one head per task.

mod train;

pub use train::{
    evaluate_binary, train_anti_curriculum, train_single_task_ablation, BinaryMetrics, MtlTrainConfig, ScheduleEntry, Targets, TaskData,
    TaskDatasets,
};

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{MtlExample, GENDER, ORIENTATION, RACE, RELIGION, SUBTYPES};
use crate::error::{bail, Result};
use crate::rng;
use crate::tensor::block::{Block, INIT_STD};
use crate::tensor::{init_normal, AttnMask, Float, Graph, NodeId, ParamId, ParamSet, Tensor};
use crate::vocab::{Vocab, CLS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    /// Mutually exclusive labels, softmax cross-entropy.
    Categorical,
    /// Independent labels, per-label binary cross-entropy.
    Multilabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub id: u8,
    pub objective: &'static str,
    pub labels: Vec<&'static str>,
    pub mode: TaskMode,
}

pub const TOXIC_LABELS: [&str; 2] = ["toxic", "nontoxic"];

/// The six tasks: toxicity, subtype, then gender, religion, race and sexual
/// orientation identities.
pub fn task_specs() -> Vec<TaskSpec> {
    let multi = |id, objective, labels: &[&'static str]| TaskSpec {
        id,
        objective,
        labels: labels.to_vec(),
        mode: TaskMode::Multilabel,
    };
    vec![
        TaskSpec {
            id: 1,
            objective: "toxicity",
            labels: TOXIC_LABELS.to_vec(),
            mode: TaskMode::Categorical,
        },
        multi(2, "toxicity subtype", &SUBTYPES),
        multi(3, "gender identity", &GENDER),
        multi(4, "religion identity", &RELIGION),
        multi(5, "race or ethnicity identity", &RACE),
        multi(6, "sexual orientation identity", &ORIENTATION),
    ]
}

pub fn task(id: u8) -> Result<TaskSpec> {
    match task_specs().into_iter().find(|t| t.id == id) {
        Some(t) => Ok(t),
        None => bail!(Config, "unknown task id {id}; tasks are 1 to 6"),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task1Label {
    Toxic,
    Nontoxic,
    Excluded,
}

/// At least half the raters: toxic. Nobody: nontoxic. Anything between is
/// left out of the toxicity task.
pub fn derive_task1_labels(example: &MtlExample) -> Task1Label {
    task1_label(example.toxicity)
}

pub fn task1_label(toxicity: f64) -> Task1Label {
    if toxicity >= 0.5 {
        Task1Label::Toxic
    } else if toxicity == 0.0 {
        Task1Label::Nontoxic
    } else {
        Task1Label::Excluded
    }
}

/// `1 - 2p`: +1 for certainly clean text, -1 for certainly toxic.
pub fn reward_from_toxicity(p_toxic: f64) -> f64 {
    1.0 - 2.0 * p_toxic
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MtlConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    /// Task ids that get a head.
    pub tasks: Vec<u8>,
}

impl MtlConfig {
    pub fn desk(vocab_size: usize) -> Self {
        MtlConfig {
            vocab_size,
            n_layers: 2,
            n_heads: 4,
            d_model: 128,
            max_seq_len: 256,
            dropout: 0.1,
            tasks: (1..=6).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            bail!(Config, "d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads);
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Config, "dropout {} outside [0, 1)", self.dropout);
        }
        if !self.tasks.contains(&1) {
            bail!(Config, "the toxicity task (1) needs a head");
        }
        for &t in &self.tasks {
            task(t)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Head {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
pub struct MtlModel<F: Float = f32> {
    pub config: MtlConfig,
    pub vocab: Vocab,
    pub params: ParamSet<F>,
    tok_emb: ParamId,
    seg_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    heads: BTreeMap<u8, Head>,
}

impl<F: Float> MtlModel<F> {
    pub fn new<R: Rng + ?Sized>(config: MtlConfig, vocab: Vocab, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            bail!(
                Config,
                "vocabulary has {} words but vocab_size is {}",
                vocab.len(),
                config.vocab_size
            );
        }
        let d = config.d_model;
        let mut ps = ParamSet::new();
        let tok_emb = ps.add("tok_emb", init_normal(&[config.vocab_size, d], INIT_STD, rng));
        let seg_emb = ps.add("seg_emb", init_normal(&[2, d], INIT_STD, rng));
        let pos_emb = ps.add("pos_emb", init_normal(&[config.max_seq_len, d], INIT_STD, rng));
        let blocks = (0..config.n_layers)
            .map(|l| Block::new(&mut ps, &format!("enc{l}"), d, config.n_heads, rng))
            .collect();
        let lnf_g = ps.add("ln_f.g", Tensor::new(vec![d], vec![F::one(); d])?);
        let lnf_b = ps.add("ln_f.b", Tensor::zeros(&[d]));
        let mut heads = BTreeMap::new();
        for &t in &config.tasks {
            let n = task(t)?.labels.len();
            let w = ps.add(format!("head{t}.w"), init_normal(&[d, n], INIT_STD, rng));
            let b = ps.add(format!("head{t}.b"), Tensor::zeros(&[n]));
            heads.insert(t, Head { w, b });
        }
        Ok(MtlModel {
            config,
            vocab,
            params: ps,
            tok_emb,
            seg_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            heads,
        })
    }

    pub fn cast<G: Float>(&self) -> MtlModel<G> {
        MtlModel {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.cast(),
            tok_emb: self.tok_emb,
            seg_emb: self.seg_emb,
            pos_emb: self.pos_emb,
            blocks: self.blocks.clone(),
            lnf_g: self.lnf_g,
            lnf_b: self.lnf_b,
            heads: self.heads.clone(),
        }
    }

    pub fn zero_heads(&mut self) {
        for h in self.heads.values() {
            self.params.get_mut(h.w).data_mut().fill(F::zero());
            self.params.get_mut(h.b).data_mut().fill(F::zero());
        }
    }

    /// `<cls>` followed by the words, truncated to `max_seq_len`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![CLS];
        ids.extend(self.vocab.encode(text));
        ids.truncate(self.config.max_seq_len);
        ids
    }

    /// Final-layer embedding of the `<cls>` token, `[batch, d]`, with
    /// head dropout applied when `dropout_rng` is given.
    pub fn encode(&self, g: &mut Graph<F>, batch: &[Vec<usize>], dropout_rng: Option<&mut rng::Rng>) -> Result<NodeId> {
        if batch.is_empty() {
            bail!(Data, "empty batch");
        }
        let seq = batch.iter().map(Vec::len).max().expect("nonempty");
        if seq > self.config.max_seq_len {
            bail!(Context, "input of {seq} tokens exceeds max_seq_len {}", self.config.max_seq_len);
        }
        let lens: Vec<usize> = batch.iter().map(Vec::len).collect();
        if lens.contains(&0) {
            bail!(Data, "empty input sequence");
        }
        let mut ids = vec![crate::vocab::PAD; batch.len() * seq];
        for (b, x) in batch.iter().enumerate() {
            if let Some(&bad) = x.iter().find(|&&i| i >= self.config.vocab_size) {
                bail!(Index, "token id {bad} outside vocabulary of {}", self.config.vocab_size);
            }
            ids[b * seq..b * seq + x.len()].copy_from_slice(x);
        }
        let ps = &self.params;
        let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..seq).collect();
        let (tok, seg, pos) = (g.param(ps, self.tok_emb), g.param(ps, self.seg_emb), g.param(ps, self.pos_emb));
        let te = g.embedding(tok, &ids);
        let se = g.embedding(seg, &vec![0; ids.len()]);
        let pe = g.embedding(pos, &positions);
        let x = g.add(te, se);
        let mut x = g.add(x, pe);
        let mask = AttnMask::KeyPadding(lens);
        for (l, blk) in self.blocks.iter().enumerate() {
            x = blk.forward(g, ps, x, batch.len(), seq, &mask);
            crate::tensor::block::check_finite(g.value(x).data(), l)?;
        }
        let (lg, lb) = (g.param(ps, self.lnf_g), g.param(ps, self.lnf_b));
        let h = g.layer_norm(x, lg, lb);
        let first: Vec<usize> = (0..batch.len()).map(|b| b * seq).collect();
        let c = g.rows(h, &first);
        Ok(match dropout_rng {
            Some(r) if self.config.dropout > 0.0 => g.dropout(c, self.config.dropout, r),
            _ => c,
        })
    }

    /// Head logits `[batch, labels]` for `task`.
    pub fn head_logits(&self, g: &mut Graph<F>, c: NodeId, task_id: u8) -> Result<NodeId> {
        task(task_id)?;
        let Some(h) = self.heads.get(&task_id) else {
            bail!(Config, "model has no head for task {task_id}");
        };
        let (w, b) = (g.param(&self.params, h.w), g.param(&self.params, h.b));
        Ok(g.linear(c, w, Some(b)))
    }

    /// Per-label probabilities for `text` under `task_id`.
    pub fn mtl_forward(&self, text: &str, task_id: u8) -> Result<Vec<f64>> {
        Ok(self.predict(&[text], task_id)?.remove(0))
    }

    /// Batched [`MtlModel::mtl_forward`], without dropout.
    pub fn predict(&self, texts: &[&str], task_id: u8) -> Result<Vec<Vec<f64>>> {
        let spec = task(task_id)?;
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(128) {
            let ids: Vec<Vec<usize>> = chunk.iter().map(|t| self.tokenize(t)).collect();
            let mut g = Graph::new();
            let c = self.encode(&mut g, &ids, None)?;
            let logits = self.head_logits(&mut g, c, task_id)?;
            let v = g.value(logits);
            for r in 0..chunk.len() {
                let row: Vec<f64> = v.row(r).iter().map(|x| x.f64()).collect();
                out.push(match spec.mode {
                    TaskMode::Categorical => {
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
                        let z: f64 = e.iter().sum();
                        e.into_iter().map(|x| x / z).collect()
                    }
                    TaskMode::Multilabel => row.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect(),
                });
            }
        }
        Ok(out)
    }

    /// Probability of the `toxic` label of the toxicity task.
    pub fn toxicity_score(&self, text: &str) -> Result<f64> {
        Ok(self.toxicity_scores(&[text])?[0])
    }

    pub fn toxicity_scores(&self, texts: &[&str]) -> Result<Vec<f64>> {
        Ok(self.predict(texts, 1)?.into_iter().map(|p| p[0]).collect())
    }

    /// Mean task loss on a batch of raw examples, without dropout.
    pub fn mtl_loss(&self, batch: &[MtlExample], task_id: u8) -> Result<f64> {
        let data = TaskData::build(batch, self, task_id, true)?;
        let mut g = Graph::new();
        let idx: Vec<usize> = (0..data.len()).collect();
        let loss = train::loss_node(self, &mut g, &data, &idx, None)?;
        Ok(g.value(loss).data()[0].f64())
    }
}
