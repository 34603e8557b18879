use detox_core::lm::{decode_greedy, nucleus, perplexity, pretrain_nll, Decoding, Lm, LmConfig, PretrainConfig, TokenSequence};
use detox_core::rng::stream;
use detox_core::tensor::{log_softmax, AdamConfig, Graph};
use detox_core::vocab::BOS;
use proptest::prelude::*;
use rand::Rng as _;

fn small_lm(vocab: usize, seed: u64) -> Lm<f64> {
    let config = LmConfig {
        vocab_size: vocab,
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        max_seq_len: 24,
        tie_embeddings: seed.is_multiple_of(2),
    };
    let mut lm = Lm::new(config, &mut stream(seed, "init")).unwrap();
    // Wider weights than the 0.02 init so the distributions are far from uniform.
    let mut rng = stream(seed, "spread");
    for id in lm.params.ids().collect::<Vec<_>>() {
        for v in lm.params.get_mut(id).data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    lm
}

/// A model whose next-token logits are `logits` whatever the context.
fn fixed_lm(logits: &[f64]) -> Lm<f64> {
    let v = logits.len();
    let mut lm = Lm::<f64>::new(
        LmConfig {
            vocab_size: v,
            n_layers: 1,
            n_heads: 2,
            d_model: v,
            max_seq_len: 24,
            tie_embeddings: true,
        },
        &mut stream(0, "init"),
    )
    .unwrap();
    let eye: Vec<f64> = (0..v * v).map(|i| f64::from(i / v == i % v)).collect();
    lm.params.set_values("tok_emb", &[v, v], eye).unwrap();
    lm.params.set_values("ln_f.g", &[v], vec![0.0; v]).unwrap();
    lm.params.set_values("ln_f.b", &[v], logits.to_vec()).unwrap();
    lm
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn vanishing_top_p_is_greedy(seed in any::<u64>(), prompt in prop::collection::vec(5usize..12, 1..6)) {
        let lm = small_lm(12, seed);
        let mut rng = stream(seed, "sampling");
        let a = lm.generate(&[&prompt], 10, Decoding::Nucleus { top_p: 1e-12, temperature: 1.0 }, &mut rng).unwrap();
        let b = lm.generate(&[&prompt], 10, Decoding::Greedy, &mut rng).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn logits_ignore_the_future(seed in any::<u64>(), ids in prop::collection::vec(0usize..12, 2..16), t in 0usize..15, other in 0usize..12) {
        let t = t % (ids.len() - 1);
        let lm = small_lm(12, seed);
        let logits = |ids: &[usize]| {
            let mut g = Graph::new();
            let out = lm.forward(&mut g, ids, 1, ids.len()).unwrap();
            g.value(out).data().to_vec()
        };
        let base = logits(&ids);
        let mut moved = ids.clone();
        for v in &mut moved[t + 1..] {
            *v = (*v + other) % 12;
        }
        let out = logits(&moved);
        prop_assert_eq!(&base[..(t + 1) * 12], &out[..(t + 1) * 12]);
    }

    #[test]
    fn greedy_tokens_beat_any_substitute(seed in any::<u64>(), step in 0usize..8, sub in 0usize..12) {
        let lm = small_lm(12, seed);
        let prompt = TokenSequence { ids: vec![BOS, 7, 9], prompt_len: 3 };
        let greedy = decode_greedy(&lm, &prompt, 8).unwrap();
        let step = step % greedy.continuation().len();
        let mut cont = greedy.continuation().to_vec();
        cont[step] = sub;
        let perturbed = greedy.with_continuation(&cont);
        let lg = lm.sequence_log_prob(&greedy).unwrap();
        let lp = lm.sequence_log_prob(&perturbed).unwrap();
        prop_assert!(lg[step] >= lp[step]);
    }
}

#[test]
fn nucleus_draws_follow_the_renormalized_head() {
    let logits = [-4.0, -3.0, -2.0, -2.5, -1.0, -0.3, 0.0, 0.7];
    let lm = fixed_lm(&logits);
    let mut probs: Vec<f64> = logits.iter().map(|l: &f64| l.exp()).collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    let kept = nucleus(&probs, 0.9);
    assert!(kept.len() < probs.len());

    let n = 100_000;
    let mut counts = vec![0usize; logits.len()];
    let mut rng = stream(5, "sampling");
    let prompts = vec![&[BOS][..]; 5_000];
    for _ in 0..n / prompts.len() {
        for c in lm
            .generate(
                &prompts,
                1,
                Decoding::Nucleus {
                    top_p: 0.9,
                    temperature: 1.0,
                },
                &mut rng,
            )
            .unwrap()
        {
            counts[c[0]] += 1;
        }
    }
    let expected: Vec<f64> = (0..logits.len())
        .map(|i| kept.iter().find(|k| k.0 == i).map_or(0.0, |k| k.1))
        .collect();
    for (i, (&c, &p)) in counts.iter().zip(&expected).enumerate() {
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!(
            (c as f64 - n as f64 * p).abs() <= 3.0 * sd,
            "token {i}: {c} draws, expected {}",
            n as f64 * p
        );
    }
}

#[test]
fn perplexity_matches_a_tape_oracle() {
    let lm = small_lm(12, 3);
    let mut rng = stream(3, "text");
    let docs: Vec<Vec<usize>> = (0..9)
        .map(|_| (0..rng.random_range(2..20)).map(|_| rng.random_range(0..12)).collect())
        .collect();
    let (mut nll, mut count) = (0.0, 0);
    for d in &docs {
        let mut g = Graph::new();
        let out = lm.forward(&mut g, d, 1, d.len()).unwrap();
        let logits = g.value(out);
        let mut row = vec![0.0; 12];
        for t in 1..d.len() {
            log_softmax(logits.row(t - 1), &mut row);
            nll -= row[d[t]];
            count += 1;
        }
    }
    let oracle = (nll / count as f64).exp();
    let got = perplexity(&lm, &docs).unwrap();
    assert!((got - oracle).abs() <= 1e-9 * oracle, "{got} vs {oracle}");
}

const A: usize = 5;
const K: usize = 5;

/// Start distribution and transition matrix over tokens `A..A + K`.
fn grammar() -> ([f64; K], [[f64; K]; K]) {
    (
        [0.4, 0.3, 0.1, 0.1, 0.1],
        [
            [0.05, 0.6, 0.2, 0.05, 0.1],
            [0.1, 0.05, 0.05, 0.7, 0.1],
            [0.5, 0.1, 0.1, 0.1, 0.2],
            [0.2, 0.2, 0.5, 0.05, 0.05],
            [0.7, 0.1, 0.05, 0.05, 0.1],
        ],
    )
}

fn draw(p: &[f64], rng: &mut impl rand::Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &q) in p.iter().enumerate() {
        acc += q;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[test]
fn bigram_model_recovers_generator_frequencies() {
    const LEN: usize = 10;
    let (start, trans) = grammar();
    let mut rng = stream(11, "grammar");
    let docs: Vec<Vec<usize>> = (0..3000)
        .map(|_| {
            let mut d = vec![BOS, A + draw(&start, &mut rng)];
            while d.len() < LEN + 1 {
                let prev = d[d.len() - 1] - A;
                d.push(A + draw(&trans[prev], &mut rng));
            }
            d
        })
        .collect();
    let config = LmConfig {
        vocab_size: A + K,
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        max_seq_len: 24,
        tie_embeddings: true,
    };
    let mut lm = Lm::<f32>::new(config, &mut stream(11, "init")).unwrap();
    let pc = PretrainConfig {
        steps: 600,
        batch_size: 32,
        adam: AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
        linear_decay: true,
        clip_norm: 1.0,
        eval_every: 600,
    };
    pretrain_nll(&mut lm, &docs, &docs[..100], &pc, &mut stream(11, "pretrain")).unwrap();

    // Exact frequencies: the chain's marginal at each of the LEN positions.
    let mut uni = [0.0; A + K];
    let mut bi = vec![0.0; (A + K) * (A + K)];
    let mut marg = start;
    for t in 0..LEN {
        for i in 0..K {
            uni[A + i] += marg[i] / LEN as f64;
            if t + 1 < LEN {
                for j in 0..K {
                    bi[(A + i) * (A + K) + A + j] += marg[i] * trans[i][j] / (LEN - 1) as f64;
                }
            }
        }
        let mut next = [0.0; K];
        for i in 0..K {
            for j in 0..K {
                next[j] += marg[i] * trans[i][j];
            }
        }
        marg = next;
    }

    let mut rng = stream(11, "sampling");
    let prompts = vec![&[BOS][..]; 10_100];
    let samples = lm
        .generate(
            &prompts,
            LEN,
            Decoding::Nucleus {
                top_p: 1.0,
                temperature: 1.0,
            },
            &mut rng,
        )
        .unwrap();
    let (mut u, mut b) = (vec![0.0; A + K], vec![0.0; (A + K) * (A + K)]);
    let (mut nu, mut nb) = (0.0, 0.0);
    for s in &samples {
        for (k, &t) in s.iter().enumerate() {
            u[t] += 1.0;
            nu += 1.0;
            if k > 0 {
                b[s[k - 1] * (A + K) + t] += 1.0;
                nb += 1.0;
            }
        }
    }
    assert!(nu >= 100_000.0);
    u.iter_mut().for_each(|x| *x /= nu);
    b.iter_mut().for_each(|x| *x /= nb);
    let (tu, tb) = (tv(&u, &uni), tv(&b, &bi));
    assert!(tu < 0.05 && tb < 0.05, "unigram TV {tu:.4}, bigram TV {tb:.4}");
}

#[test]
fn pretraining_loss_falls_window_by_window() {
    let mut rng = stream(2, "tiny");
    let docs: Vec<Vec<usize>> = (0..16).map(|_| (0..12).map(|_| rng.random_range(5..14)).collect()).collect();
    let mut lm = Lm::<f32>::new(
        LmConfig {
            vocab_size: 14,
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            max_seq_len: 24,
            tie_embeddings: true,
        },
        &mut stream(2, "init"),
    )
    .unwrap();
    let pc = PretrainConfig {
        steps: 100,
        batch_size: 16,
        adam: AdamConfig {
            lr: 3e-3,
            ..AdamConfig::default()
        },
        linear_decay: false,
        clip_norm: 0.0,
        eval_every: 100,
    };
    let curve = pretrain_nll(&mut lm, &docs, &docs, &pc, &mut stream(2, "pretrain")).unwrap();
    let windows: Vec<f64> = curve.train.chunks(10).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
}
