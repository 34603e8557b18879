//! Decoder-only language model used as the policy.

mod sample;
mod train;

pub use sample::{decode_greedy, nucleus, pick_greedy, sample_nucleus, Decoding, GenerationParams};
pub use train::{mean_nll, perplexity, pretrain_nll, LossCurve, PretrainConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::block::{check_finite, Block, LayerCache, INIT_STD};
use crate::tensor::{init_normal, kernels, AttnMask, Float, Graph, NodeId, ParamId, ParamSet, Tensor};
use crate::vocab::{Vocab, BOS, EOS};

/// Continuations are capped at this many tokens by default.
pub const MAX_NEW_TOKENS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub max_seq_len: usize,
    pub tie_embeddings: bool,
}

impl LmConfig {
    pub fn desk(vocab_size: usize) -> Self {
        LmConfig {
            vocab_size,
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            max_seq_len: 48,
            tie_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            bail!(Config, "d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads);
        }
        if self.vocab_size < 2 {
            bail!(Config, "vocab_size must be at least 2");
        }
        if self.max_seq_len < 1 + MAX_NEW_TOKENS {
            bail!(
                Config,
                "max_seq_len {} leaves no room for a prompt plus {MAX_NEW_TOKENS} new tokens",
                self.max_seq_len
            );
        }
        Ok(())
    }
}

/// Token ids with the prompt/continuation boundary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub prompt_len: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, prompt_len: usize, vocab_size: usize) -> Result<Self> {
        if prompt_len > ids.len() {
            bail!(Data, "prompt_len {prompt_len} exceeds sequence length {}", ids.len());
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab_size) {
            bail!(Index, "token id {bad} outside vocabulary of {vocab_size}");
        }
        Ok(TokenSequence { ids, prompt_len })
    }

    /// `<bos>` followed by the prompt words.
    pub fn prompt(vocab: &Vocab, text: &str) -> Self {
        let mut ids = vec![BOS];
        ids.extend(vocab.encode(text));
        let prompt_len = ids.len();
        TokenSequence { ids, prompt_len }
    }

    pub fn prompt_ids(&self) -> &[usize] {
        &self.ids[..self.prompt_len]
    }

    pub fn continuation(&self) -> &[usize] {
        &self.ids[self.prompt_len..]
    }

    pub fn with_continuation(&self, cont: &[usize]) -> Self {
        let mut ids = self.prompt_ids().to_vec();
        ids.extend_from_slice(cont);
        TokenSequence {
            ids,
            prompt_len: self.prompt_len,
        }
    }
}

/// `<bos> words <eos>`, as seen during pretraining.
pub fn document_ids(vocab: &Vocab, text: &str) -> Vec<usize> {
    let mut ids = vec![BOS];
    ids.extend(vocab.encode(text));
    ids.push(EOS);
    ids
}

/// Per-sequence, per-layer key/value cache for incremental decoding.
#[derive(Clone, Debug)]
pub struct KvCache<F> {
    layers: Vec<LayerCache<F>>,
}

impl<F> KvCache<F> {
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct Lm<F: Float = f32> {
    pub config: LmConfig,
    pub params: ParamSet<F>,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head: Option<ParamId>,
}

impl<F: Float> Lm<F> {
    pub fn new<R: Rng + ?Sized>(config: LmConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (v, d) = (config.vocab_size, config.d_model);
        let mut ps = ParamSet::new();
        let tok_emb = ps.add("tok_emb", init_normal(&[v, d], INIT_STD, rng));
        let pos_emb = ps.add("pos_emb", init_normal(&[config.max_seq_len, d], INIT_STD, rng));
        let blocks = (0..config.n_layers)
            .map(|l| Block::new(&mut ps, &format!("h{l}"), d, config.n_heads, rng))
            .collect();
        let lnf_g = ps.add("ln_f.g", Tensor::new(vec![d], vec![F::one(); d])?);
        let lnf_b = ps.add("ln_f.b", Tensor::zeros(&[d]));
        let head = (!config.tie_embeddings).then(|| ps.add("head.w", init_normal(&[d, v], INIT_STD, rng)));
        Ok(Lm {
            config,
            params: ps,
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            head,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<G: Float>(&self) -> Lm<G> {
        Lm {
            config: self.config.clone(),
            params: self.params.cast(),
            tok_emb: self.tok_emb,
            pos_emb: self.pos_emb,
            blocks: self.blocks.clone(),
            lnf_g: self.lnf_g,
            lnf_b: self.lnf_b,
            head: self.head,
        }
    }

    /// Zeroes the token embeddings (and the untied head), giving a model
    /// whose next-token distribution is uniform everywhere.
    pub fn zero_output(&mut self) {
        self.params.get_mut(self.tok_emb).data_mut().fill(F::zero());
        if let Some(h) = self.head {
            self.params.get_mut(h).data_mut().fill(F::zero());
        }
    }

    /// Logits `[batch * seq, V]` for a right-padded batch of ids.
    pub fn forward(&self, g: &mut Graph<F>, ids: &[usize], batch: usize, seq: usize) -> Result<NodeId> {
        if seq > self.config.max_seq_len {
            bail!(Context, "sequence of {seq} tokens exceeds max_seq_len {}", self.config.max_seq_len);
        }
        if ids.len() != batch * seq {
            bail!(Shape, "{} ids for a {batch}x{seq} batch", ids.len());
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            bail!(Index, "token id {bad} outside vocabulary of {}", self.config.vocab_size);
        }
        let ps = &self.params;
        let tok = g.param(ps, self.tok_emb);
        let pos = g.param(ps, self.pos_emb);
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let te = g.embedding(tok, ids);
        let pe = g.embedding(pos, &positions);
        let mut x = g.add(te, pe);
        for (l, blk) in self.blocks.iter().enumerate() {
            x = blk.forward(g, ps, x, batch, seq, &AttnMask::Causal);
            check_finite(g.value(x).data(), l)?;
        }
        let (lg, lb) = (g.param(ps, self.lnf_g), g.param(ps, self.lnf_b));
        let h = g.layer_norm(x, lg, lb);
        Ok(match self.head {
            None => g.matmul(h, tok, true),
            Some(w) => {
                let w = g.param(ps, w);
                g.matmul(h, w, false)
            }
        })
    }

    pub fn new_cache(&self) -> KvCache<F> {
        KvCache {
            layers: vec![LayerCache::default(); self.config.n_layers],
        }
    }

    /// Appends `chunks[i]` to `caches[i]` and returns next-token logits for
    /// every appended position, rows in chunk order.
    pub fn extend(&self, caches: &mut [KvCache<F>], chunks: &[&[usize]]) -> Result<Tensor<F>> {
        if caches.len() != chunks.len() {
            bail!(Shape, "{} caches for {} chunks", caches.len(), chunks.len());
        }
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let n: usize = chunks.iter().map(|c| c.len()).sum();
        let tok = self.params.get(self.tok_emb).data();
        let pos = self.params.get(self.pos_emb).data();
        let mut x = vec![F::zero(); n * d];
        let mut ranges = Vec::with_capacity(chunks.len());
        let mut row = 0;
        for (chunk, cache) in chunks.iter().zip(caches.iter()) {
            let start = cache.len();
            if start + chunk.len() > self.config.max_seq_len {
                bail!(
                    Context,
                    "sequence of {} tokens exceeds max_seq_len {}",
                    start + chunk.len(),
                    self.config.max_seq_len
                );
            }
            for (j, &id) in chunk.iter().enumerate() {
                if id >= v {
                    bail!(Index, "token id {id} outside vocabulary of {v}");
                }
                let dst = &mut x[(row + j) * d..(row + j + 1) * d];
                let (te, pe) = (&tok[id * d..(id + 1) * d], &pos[(start + j) * d..(start + j + 1) * d]);
                for k in 0..d {
                    dst[k] = te[k] + pe[k];
                }
            }
            ranges.push(row..row + chunk.len());
            row += chunk.len();
        }
        for (l, blk) in self.blocks.iter().enumerate() {
            let mut layer: Vec<&mut LayerCache<F>> = caches.iter_mut().map(|c| &mut c.layers[l]).collect();
            blk.infer(&self.params, &mut x, &ranges, &mut layer);
            check_finite(&x, l)?;
        }
        let mut h = vec![F::zero(); n * d];
        kernels::layer_norm_forward(
            &x,
            d,
            self.params.get(self.lnf_g).data(),
            self.params.get(self.lnf_b).data(),
            &mut h,
        );
        let mut logits = vec![F::zero(); n * v];
        match self.head {
            None => kernels::gemm(n, d, v, &h, false, tok, true, &mut logits, false),
            Some(w) => kernels::gemm(n, d, v, &h, false, self.params.get(w).data(), false, &mut logits, false),
        }
        check_finite(&logits, self.config.n_layers)?;
        Tensor::new(vec![n, v], logits)
    }

    /// Logits for the token following `seq`.
    pub fn next_token_logits(&self, seq: &[usize]) -> Result<Vec<F>> {
        if seq.is_empty() {
            bail!(Data, "next_token_logits needs a nonempty sequence");
        }
        let mut cache = [self.new_cache()];
        let logits = self.extend(&mut cache, &[seq])?;
        Ok(logits.row(seq.len() - 1).to_vec())
    }

    /// Log-probability of every continuation token given everything
    /// before it.
    pub fn sequence_log_prob(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        Ok(self.batch_log_probs(std::slice::from_ref(seq))?.remove(0))
    }

    /// [`Lm::sequence_log_prob`] over several sequences in one pass.
    pub fn batch_log_probs(&self, seqs: &[TokenSequence]) -> Result<Vec<Vec<f64>>> {
        for s in seqs {
            if s.prompt_len == 0 && !s.ids.is_empty() {
                bail!(Data, "scoring needs at least one conditioning token");
            }
        }
        let inputs: Vec<&[usize]> = seqs.iter().map(|s| &s.ids[..s.ids.len().saturating_sub(1)]).collect();
        let mut caches: Vec<_> = seqs.iter().map(|_| self.new_cache()).collect();
        let logits = self.extend(&mut caches, &inputs)?;
        let v = self.config.vocab_size;
        let mut out = Vec::with_capacity(seqs.len());
        let mut row = 0;
        let mut lsm = vec![F::zero(); v];
        for (s, inp) in seqs.iter().zip(&inputs) {
            let mut lp = Vec::with_capacity(s.ids.len() - s.prompt_len);
            for t in s.prompt_len..s.ids.len() {
                crate::tensor::log_softmax(logits.row(row + t - 1), &mut lsm);
                lp.push(lsm[s.ids[t]].f64());
            }
            row += inp.len();
            out.push(lp);
        }
        Ok(out)
    }

    /// Continuation log-probabilities on the tape, flattened in sequence
    /// order. Returns the `[n_tokens]` node and the token count per sequence.
    pub fn continuation_log_probs(&self, g: &mut Graph<F>, seqs: &[TokenSequence]) -> Result<(NodeId, Vec<usize>)> {
        let (ids, batch, seq) = pad_inputs(seqs);
        let logits = self.forward(g, &ids, batch, seq)?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut counts = Vec::with_capacity(seqs.len());
        for (b, s) in seqs.iter().enumerate() {
            if s.prompt_len == 0 {
                bail!(Data, "scoring needs at least one conditioning token");
            }
            for t in s.prompt_len..s.ids.len() {
                rows.push(b * seq + t - 1);
                targets.push(s.ids[t]);
            }
            counts.push(s.ids.len() - s.prompt_len);
        }
        let picked = g.rows(logits, &rows);
        Ok((g.log_softmax_gather(picked, &targets)?, counts))
    }
}

/// Right-pads every sequence's inputs (all ids but the last) with `<pad>`.
fn pad_inputs(seqs: &[TokenSequence]) -> (Vec<usize>, usize, usize) {
    let seq = seqs.iter().map(|s| s.ids.len().saturating_sub(1)).max().unwrap_or(0).max(1);
    let mut ids = vec![crate::vocab::PAD; seqs.len() * seq];
    for (b, s) in seqs.iter().enumerate() {
        let n = s.ids.len().saturating_sub(1);
        ids[b * seq..b * seq + n].copy_from_slice(&s.ids[..n]);
    }
    (ids, seqs.len(), seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    pub(crate) fn tiny(vocab: usize) -> LmConfig {
        LmConfig {
            vocab_size: vocab,
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            max_seq_len: 24,
            tie_embeddings: true,
        }
    }

    #[test]
    fn config_checks_heads_and_length() {
        let mut c = tiny(10);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny(10);
        c.max_seq_len = 20;
        assert!(c.validate().is_err());
        assert!(LmConfig::desk(512).validate().is_ok());
    }

    #[test]
    fn zero_output_model_is_uniform() {
        let mut m = Lm::<f64>::new(tiny(10), &mut stream(0, "init")).unwrap();
        m.zero_output();
        let logits = m.next_token_logits(&[BOS, 5, 6]).unwrap();
        assert!(logits.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn overlength_is_a_context_error() {
        let m = Lm::<f32>::new(tiny(10), &mut stream(0, "init")).unwrap();
        let seq = vec![5; 25];
        assert!(matches!(m.next_token_logits(&seq), Err(crate::Error::Context(_))));
        assert!(matches!(m.next_token_logits(&[]), Err(crate::Error::Data(_))));
    }

    #[test]
    fn cached_logits_match_the_tape() {
        let m = Lm::<f64>::new(tiny(12), &mut stream(1, "init")).unwrap();
        let ids = [BOS, 5, 7, 9, 11, 6];
        let mut g = Graph::new();
        let node = m.forward(&mut g, &ids, 1, ids.len()).unwrap();
        let full = g.value(node).clone();
        let mut cache = [m.new_cache()];
        let a = m.extend(&mut cache, &[&ids[..4]]).unwrap();
        let b = m.extend(&mut cache, &[&ids[4..]]).unwrap();
        let got: Vec<f64> = a.data().iter().chain(b.data()).copied().collect();
        for (x, y) in got.iter().zip(full.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_and_cached_log_probs_agree() {
        let m = Lm::<f64>::new(tiny(12), &mut stream(2, "init")).unwrap();
        let seqs = vec![
            TokenSequence::new(vec![BOS, 5, 6, 7, 8], 2, 12).unwrap(),
            TokenSequence::new(vec![BOS, 9, 10], 1, 12).unwrap(),
        ];
        let cached = m.batch_log_probs(&seqs).unwrap();
        let mut g = Graph::new();
        let (node, counts) = m.continuation_log_probs(&mut g, &seqs).unwrap();
        assert_eq!(counts, vec![3, 2]);
        let flat: Vec<f64> = cached.concat();
        for (x, y) in flat.iter().zip(g.value(node).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
