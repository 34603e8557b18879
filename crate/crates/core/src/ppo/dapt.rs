use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::lm::{document_ids, pretrain_nll, Lm, LossCurve, PretrainConfig};
use crate::reward::{task1_label, Task1Label};
use crate::rng::Rng;
use crate::tensor::{AdamConfig, Float};
use crate::vocab::Vocab;

/// A document with its toxicity fraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledDocument {
    pub text: String,
    pub toxicity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DaptConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub linear_decay: bool,
    pub clip_norm: f64,
}

impl Default for DaptConfig {
    fn default() -> Self {
        DaptConfig {
            epochs: 1,
            batch_size: 32,
            adam: AdamConfig {
                lr: 5e-5,
                ..AdamConfig::default()
            },
            linear_decay: true,
            clip_norm: 1.0,
        }
    }
}

/// Continued next-token training on documents labeled nontoxic. Any other
/// document is rejected before training starts.
pub fn train_dapt_baseline<F: Float>(
    policy: &mut Lm<F>,
    vocab: &Vocab,
    docs: &[LabeledDocument],
    config: &DaptConfig,
    rng: &mut Rng,
) -> Result<LossCurve> {
    if vocab.len() != policy.config.vocab_size {
        bail!(
            Config,
            "vocabulary has {} words but the policy expects {}",
            vocab.len(),
            policy.config.vocab_size
        );
    }
    for (i, d) in docs.iter().enumerate() {
        if task1_label(d.toxicity) != Task1Label::Nontoxic {
            bail!(
                Data,
                "document {i} has toxicity {} and does not belong in a nontoxic corpus",
                d.toxicity
            );
        }
    }
    if config.batch_size == 0 {
        bail!(Config, "dapt.batch_size must be positive");
    }
    let corpus: Vec<Vec<usize>> = docs.iter().map(|d| document_ids(vocab, &d.text)).collect();
    let pc = PretrainConfig {
        steps: config.epochs * corpus.len().div_ceil(config.batch_size),
        batch_size: config.batch_size,
        adam: config.adam,
        linear_decay: config.linear_decay,
        clip_norm: config.clip_norm,
        eval_every: 0,
    };
    pretrain_nll(policy, &corpus, &[], &pc, rng)
}
