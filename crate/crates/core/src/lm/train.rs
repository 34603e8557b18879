use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Lm;
use crate::error::{bail, Result};
use crate::rng::Rng;
use crate::tensor::{Adam, AdamConfig, Float, Graph};
use crate::vocab::PAD;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Linear decay of the learning rate to zero over `steps`.
    pub linear_decay: bool,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Held-out NLL is recorded every this many steps (and at the end).
    pub eval_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1500,
            batch_size: 32,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            linear_decay: true,
            clip_norm: 1.0,
            eval_every: 250,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    /// Mean token NLL of each training batch.
    pub train: Vec<f64>,
    /// `(step, mean held-out NLL)`; step 0 is the untrained model.
    pub held_out: Vec<(usize, f64)>,
}

/// Mean next-token NLL (nats) over every predicted token of `docs`.
pub fn mean_nll<F: Float>(model: &Lm<F>, docs: &[Vec<usize>]) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in docs.chunks(64) {
        let seqs: Vec<_> = chunk
            .iter()
            .map(|d| super::TokenSequence {
                ids: d.clone(),
                prompt_len: 1.min(d.len()),
            })
            .collect();
        for lp in model.batch_log_probs(&seqs)? {
            total -= lp.iter().sum::<f64>();
            count += lp.len();
        }
    }
    if count == 0 {
        bail!(Data, "no tokens to score");
    }
    Ok(total / count as f64)
}

/// `exp(mean token NLL)` over the corpus.
pub fn perplexity<F: Float>(model: &Lm<F>, docs: &[Vec<usize>]) -> Result<f64> {
    Ok(mean_nll(model, docs)?.exp())
}

/// Teacher-forced next-token training with Adam.
pub fn pretrain_nll<F: Float>(
    model: &mut Lm<F>,
    corpus: &[Vec<usize>],
    held_out: &[Vec<usize>],
    config: &PretrainConfig,
    rng: &mut Rng,
) -> Result<LossCurve> {
    let docs: Vec<&Vec<usize>> = corpus.iter().filter(|d| d.len() >= 2).collect();
    if docs.is_empty() {
        bail!(Data, "pretraining corpus has no document with at least two tokens");
    }
    if config.batch_size == 0 {
        bail!(Config, "batch_size must be positive");
    }
    let max_len = model.config.max_seq_len + 1;
    let mut opt = Adam::new(config.adam, &model.params);
    let mut curve = LossCurve::default();
    if !held_out.is_empty() {
        curve.held_out.push((0, mean_nll(model, held_out)?));
    }
    let mut order: Vec<usize> = (0..docs.len()).collect();
    let mut cursor = order.len();
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            batch.push(&docs[order[cursor]][..docs[order[cursor]].len().min(max_len)]);
            cursor += 1;
        }
        let seq = batch.iter().map(|d| d.len() - 1).max().expect("nonempty batch");
        let mut ids = vec![PAD; batch.len() * seq];
        let mut targets = vec![None; batch.len() * seq];
        for (b, d) in batch.iter().enumerate() {
            for t in 0..d.len() - 1 {
                ids[b * seq + t] = d[t];
                targets[b * seq + t] = Some(d[t + 1]);
            }
        }
        let mut g = Graph::new();
        let logits = model.forward(&mut g, &ids, batch.len(), seq)?;
        let loss = g.cross_entropy(logits, &targets)?;
        let value = g.value(loss).data()[0].f64();
        if !value.is_finite() {
            bail!(Numerical, "training loss became {value} at step {step}");
        }
        let grads = g.backward(loss);
        model.params.zero_grads();
        g.accumulate(&grads, &mut model.params);
        if config.clip_norm > 0.0 {
            model.params.clip_grad_norm(config.clip_norm);
        }
        if config.linear_decay {
            opt.config.lr = config.adam.lr * (1.0 - step as f64 / config.steps as f64);
        }
        opt.step(&mut model.params)?;
        curve.train.push(value);
        let done = step + 1;
        if !held_out.is_empty() && (done == config.steps || (config.eval_every > 0 && done % config.eval_every == 0)) {
            curve.held_out.push((done, mean_nll(model, held_out)?));
        }
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{LmConfig, TokenSequence};
    use crate::rng::stream;
    use crate::vocab::{BOS, EOS};

    fn tiny(vocab: usize) -> LmConfig {
        LmConfig {
            vocab_size: vocab,
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            max_seq_len: 24,
            tie_embeddings: true,
        }
    }

    fn quick(steps: usize) -> PretrainConfig {
        PretrainConfig {
            steps,
            batch_size: 4,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            linear_decay: false,
            clip_norm: 1.0,
            eval_every: 0,
        }
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let mut m = Lm::<f64>::new(tiny(50), &mut stream(0, "init")).unwrap();
        m.zero_output();
        let docs = vec![vec![BOS, 7, 9, 11, EOS], vec![BOS, 40, EOS]];
        assert!((perplexity(&m, &docs).unwrap() - 50.0).abs() < 1e-9);
        let seq = TokenSequence::new(vec![BOS, 7, 8, 9], 1, 50).unwrap();
        let total: f64 = m.sequence_log_prob(&seq).unwrap().iter().sum();
        assert!((total + 3.0 * 50f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn untrained_nll_starts_near_ln_v() {
        let m = Lm::<f32>::new(tiny(30), &mut stream(1, "init")).unwrap();
        let docs = vec![vec![BOS, 5, 6, 7, 8, EOS]; 3];
        // Tied embeddings give the current token a small head start, so the
        // start sits slightly above ln V.
        let nll = mean_nll(&m, &docs).unwrap();
        assert!((nll - 30f64.ln()).abs() < 0.2, "{nll}");
    }

    #[test]
    fn single_sequence_is_memorised() {
        let mut m = Lm::<f32>::new(tiny(12), &mut stream(2, "init")).unwrap();
        let doc = vec![BOS, 5, 9, 6, 11, 7, 10, 8, EOS];
        let curve = pretrain_nll(
            &mut m,
            std::slice::from_ref(&doc),
            std::slice::from_ref(&doc),
            &quick(150),
            &mut stream(2, "data"),
        )
        .unwrap();
        let last = curve.held_out.last().unwrap().1;
        assert!(last < 0.02, "{last}");
        assert!(curve.held_out[0].1 > 2.0);
    }

    #[test]
    fn alternating_corpus_predicts_b_after_a() {
        let (a, b) = (5, 6);
        let doc: Vec<usize> = std::iter::once(BOS).chain((0..10).flat_map(|_| [a, b])).collect();
        let mut m = Lm::<f32>::new(tiny(8), &mut stream(3, "init")).unwrap();
        pretrain_nll(&mut m, &[doc], &[], &quick(100), &mut stream(3, "data")).unwrap();
        let logits = m.next_token_logits(&[BOS, a, b, a]).unwrap();
        assert_eq!(crate::lm::pick_greedy(&logits), b);
    }

    #[test]
    fn empty_corpus_is_a_data_error() {
        let mut m = Lm::<f32>::new(tiny(8), &mut stream(4, "init")).unwrap();
        let err = pretrain_nll(&mut m, &[vec![BOS]], &[], &quick(1), &mut stream(4, "data")).unwrap_err();
        assert!(matches!(err, crate::Error::Data(_)));
    }
}
