use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Lm, TokenSequence, MAX_NEW_TOKENS};
use crate::error::{bail, Result};
use crate::rng::{stream, Rng};
use crate::tensor::Float;
use crate::vocab::EOS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationParams {
    pub top_p: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub num_samples: usize,
    pub seed: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            top_p: 0.9,
            temperature: 1.0,
            max_new_tokens: MAX_NEW_TOKENS,
            num_samples: 20,
            seed: 0,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            bail!(Config, "top_p must lie in (0, 1], got {}", self.top_p);
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            bail!(Config, "temperature must be positive, got {}", self.temperature);
        }
        if self.num_samples == 0 {
            bail!(Config, "num_samples must be at least 1");
        }
        Ok(())
    }

    pub fn decoding(&self) -> Decoding {
        Decoding::Nucleus {
            top_p: self.top_p,
            temperature: self.temperature,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decoding {
    Nucleus { top_p: f64, temperature: f64 },
    Greedy,
}

/// Smallest prefix of the probability-sorted vocabulary whose mass reaches
/// `top_p`, renormalized. Ties keep the lower id first.
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        kept.push((i, probs[i]));
        mass += probs[i];
        if mass >= top_p {
            break;
        }
    }
    for (_, p) in &mut kept {
        *p /= mass;
    }
    kept
}

/// Argmax with ties going to the lowest id.
pub fn pick_greedy<F: Float>(logits: &[F]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate().skip(1) {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

fn pick_nucleus<F: Float>(logits: &[F], top_p: f64, temperature: f64, rng: &mut Rng) -> usize {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(l.f64()));
    let mut probs: Vec<f64> = logits.iter().map(|&l| ((l.f64() - max) / temperature).exp()).collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    let kept = nucleus(&probs, top_p);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(i, p) in &kept {
        acc += p;
        if u < acc {
            return i;
        }
    }
    kept.last().expect("nucleus is never empty").0
}

impl<F: Float> Lm<F> {
    /// Continues every prompt until `<eos>` (kept in the output) or
    /// `max_new` tokens. Sampling draws from `rng` in prompt order.
    pub fn generate(&self, prompts: &[&[usize]], max_new: usize, decoding: Decoding, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
        if let Some(p) = prompts.iter().find(|p| p.len() + max_new > self.config.max_seq_len) {
            bail!(
                Context,
                "prompt of {} tokens plus {max_new} new tokens exceeds max_seq_len {}",
                p.len(),
                self.config.max_seq_len
            );
        }
        let mut caches: Vec<_> = prompts.iter().map(|_| self.new_cache()).collect();
        let logits = self.extend(&mut caches, prompts)?;
        let mut last: Vec<Vec<F>> = Vec::with_capacity(prompts.len());
        let mut row = 0;
        for p in prompts {
            if p.is_empty() {
                bail!(Data, "generation needs a nonempty prompt");
            }
            row += p.len();
            last.push(logits.row(row - 1).to_vec());
        }
        let mut out = vec![Vec::with_capacity(max_new); prompts.len()];
        let mut active: Vec<usize> = (0..prompts.len()).collect();
        for step in 0..max_new {
            let mut next = Vec::with_capacity(active.len());
            for &i in &active {
                let tok = match decoding {
                    Decoding::Greedy => pick_greedy(&last[i]),
                    Decoding::Nucleus { top_p, temperature } => pick_nucleus(&last[i], top_p, temperature, rng),
                };
                out[i].push(tok);
                next.push(tok);
            }
            let keep: Vec<usize> = (0..active.len()).filter(|&j| next[j] != EOS).collect();
            if step + 1 == max_new || keep.is_empty() {
                break;
            }
            active = keep.iter().map(|&j| active[j]).collect();
            let toks: Vec<[usize; 1]> = keep.iter().map(|&j| [next[j]]).collect();
            let chunks: Vec<&[usize]> = toks.iter().map(|t| &t[..]).collect();
            let mut sub: Vec<_> = active
                .iter()
                .map(|&i| std::mem::replace(&mut caches[i], self.new_cache()))
                .collect();
            let logits = self.extend(&mut sub, &chunks)?;
            for (k, (&i, c)) in active.iter().zip(sub).enumerate() {
                caches[i] = c;
                last[i] = logits.row(k).to_vec();
            }
        }
        Ok(out)
    }
}

/// `params.num_samples` nucleus continuations of `seq`, reproducible from
/// `params.seed`.
pub fn sample_nucleus<F: Float>(model: &Lm<F>, seq: &TokenSequence, params: &GenerationParams) -> Result<Vec<TokenSequence>> {
    params.validate()?;
    let mut rng = stream(params.seed, "sampling");
    let prompts = vec![seq.ids.as_slice(); params.num_samples];
    let conts = model.generate(&prompts, params.max_new_tokens, params.decoding(), &mut rng)?;
    Ok(conts
        .into_iter()
        .map(|c| TokenSequence {
            prompt_len: seq.ids.len(),
            ids: seq.ids.iter().copied().chain(c).collect(),
        })
        .collect())
}

pub fn decode_greedy<F: Float>(model: &Lm<F>, seq: &TokenSequence, max_new: usize) -> Result<TokenSequence> {
    // The rng is never touched on the greedy path.
    let mut rng = stream(0, "greedy");
    let cont = model.generate(&[&seq.ids], max_new, Decoding::Greedy, &mut rng)?.remove(0);
    Ok(TokenSequence {
        prompt_len: seq.ids.len(),
        ids: seq.ids.iter().copied().chain(cont).collect(),
    })
}
