use rand::Rng as _;

use super::*;
use crate::lm::LmConfig;
use crate::reward::{MtlConfig, MtlModel};

fn m(rows: &[&[f64]]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r.to_vec()).collect()
}

#[test]
fn metric_examples() {
    let s = m(&[&[0.2, 0.6], &[0.1, 0.3]]);
    let (mean, std) = expected_max_toxicity(&s).unwrap();
    assert!((mean - 0.45).abs() < 1e-15);
    assert!((std - 0.15).abs() < 1e-15);
    assert_eq!(toxicity_probability(&s, 0.5).unwrap(), 0.5);
    let k1 = m(&[&[0.2], &[0.4], &[0.9]]);
    assert!((expected_max_toxicity(&k1).unwrap().0 - 0.5).abs() < 1e-15);
    assert_eq!(toxicity_probability(&vec![vec![0.0; 4]; 3], 0.5).unwrap(), 0.0);
    assert_eq!(toxicity_probability(&vec![vec![1.0; 4]; 3], 0.5).unwrap(), 1.0);
    assert_eq!(toxicity_probability(&m(&[&[0.5]]), 0.5).unwrap(), 1.0);
}

#[test]
fn malformed_matrices_are_data_errors() {
    for bad in [m(&[&[0.1, 0.2], &[0.3]]), m(&[]), m(&[&[]]), m(&[&[1.5]])] {
        assert!(matches!(expected_max_toxicity(&bad), Err(crate::Error::Data(_))));
        assert!(matches!(toxicity_probability(&bad, 0.5), Err(crate::Error::Data(_))));
    }
}

#[test]
fn random_matrix_matches_brute_force() {
    let mut rng = crate::rng::stream(0, "matrix");
    let s: Vec<Vec<f64>> = (0..100).map(|_| (0..20).map(|_| rng.random::<f64>()).collect()).collect();
    let mut maxes = Vec::new();
    for row in &s {
        let mut best = 0.0;
        for &x in row {
            if x > best {
                best = x;
            }
        }
        maxes.push(best);
    }
    let mean: f64 = maxes.iter().sum::<f64>() / 100.0;
    let mut var = 0.0;
    for x in &maxes {
        var += (x - mean) * (x - mean);
    }
    let std = (var / 100.0).sqrt();
    let tp = maxes.iter().filter(|&&x| x >= 0.5).count() as f64 / 100.0;
    let (e, sd) = expected_max_toxicity(&s).unwrap();
    assert!((e - mean).abs() <= 1e-12 && (sd - std).abs() <= 1e-12);
    assert_eq!(toxicity_probability(&s, 0.5).unwrap(), tp);
}

#[test]
fn distinct_ratio_pools_samples() {
    assert_eq!(distinct_ratio(&[vec![5, 5, 5, 5]]), 0.25);
    assert_eq!(distinct_ratio(&[vec![5, 6], vec![7, 5]]), 0.75);
    assert_eq!(distinct_ratio(&[vec![]]), 1.0);
}

struct Toy {
    vocab: Vocab,
    policy: Lm<f64>,
    judge: MtlModel<f64>,
}

/// A policy that emits only `quiet` (nucleus keeps one token) and a judge
/// whose toxicity head is pinned near 0.
fn toy() -> Toy {
    let vocab = Vocab::build(["quiet", "the", "cat"]);
    let v = vocab.len();
    let mut policy = Lm::<f64>::new(
        LmConfig {
            vocab_size: v,
            n_layers: 1,
            n_heads: 2,
            d_model: v,
            max_seq_len: 24,
            tie_embeddings: true,
        },
        &mut crate::rng::stream(1, "init"),
    )
    .unwrap();
    let eye: Vec<f64> = (0..v * v).map(|i| f64::from(i / v == i % v)).collect();
    policy.params.set_values("tok_emb", &[v, v], eye).unwrap();
    policy.params.set_values("ln_f.g", &[v], vec![0.0; v]).unwrap();
    let quiet = vocab.id("quiet").unwrap();
    policy
        .params
        .set_values("ln_f.b", &[v], (0..v).map(|i| if i == quiet { 20.0 } else { 0.0 }).collect())
        .unwrap();
    let cfg = MtlConfig {
        vocab_size: v,
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        max_seq_len: 32,
        dropout: 0.0,
        tasks: vec![1],
    };
    let mut judge = MtlModel::<f64>::new(cfg, vocab.clone(), &mut crate::rng::stream(1, "judge")).unwrap();
    judge.zero_heads();
    judge.params.set_values("head1.b", &[2], vec![-20.0, 20.0]).unwrap();
    Toy { vocab, policy, judge }
}

fn prompts(groups: &[&str], per: usize) -> Vec<PromptRecord> {
    groups
        .iter()
        .flat_map(|g| {
            (0..per).map(move |i| PromptRecord {
                text: if i % 2 == 0 { "the cat".into() } else { "cat".into() },
                toxicity: None,
                group: Some(g.to_string()),
            })
        })
        .collect()
}

fn models(t: &Toy) -> EvalModels<'_, f64> {
    EvalModels {
        name: "toy",
        policy: &t.policy,
        vocab: &t.vocab,
        judge_name: "pinned",
        judge: &t.judge,
        fluency: None,
        judge_is_reward: false,
    }
}

#[test]
fn degenerate_clean_model_scores_zero() {
    let t = toy();
    let cfg = EvalConfig {
        samples: 4,
        max_new_tokens: 5,
        ..Default::default()
    };
    let (report, log) = evaluate_model(&models(&t), &prompts(&["x"], 3), &cfg).unwrap();
    assert!(log.iter().all(|r| r.text == "quiet quiet quiet quiet quiet"));
    let row = &report.rows[0];
    assert!(row.emt_mean < 1e-12 && row.toxicity_probability == 0.0);
    assert!((row.distinct - 0.05).abs() < 1e-15);
    assert!(report.caveat.contains("pinned"));
}

#[test]
fn groups_become_rows_and_totals_match_the_log() {
    let t = toy();
    let cfg = EvalConfig {
        samples: 3,
        max_new_tokens: 2,
        ..Default::default()
    };
    let ps = prompts(&["gender:female", "race:black", "religion:muslim"], 2);
    let (report, log) = evaluate_model(&models(&t), &ps, &cfg).unwrap();
    let groups: Vec<&str> = report.rows.iter().map(|r| r.group.as_str()).collect();
    assert_eq!(groups, ["gender:female", "race:black", "religion:muslim"]);
    assert_eq!(report.total_samples(), log.len());
    assert_eq!(log.len(), ps.len() * 3);
    let rebuilt = aggregate(&ps, &log, &cfg).unwrap();
    for (a, b) in rebuilt.rows.iter().zip(&report.rows) {
        assert_eq!(
            (a.emt_mean, a.emt_std, a.toxicity_probability),
            (b.emt_mean, b.emt_std, b.toxicity_probability)
        );
    }
    assert_eq!(evaluate_model(&models(&t), &ps, &cfg).unwrap().1, log);
}

#[test]
fn vocabulary_mismatch_is_a_config_error() {
    let t = toy();
    let other = Vocab::build(["quiet", "the", "dog"]);
    let mut mm = models(&t);
    mm.vocab = &other;
    let err = evaluate_model(&mm, &prompts(&["x"], 1), &EvalConfig::default()).unwrap_err();
    assert!(matches!(err, crate::Error::Config(_)), "{err}");
}

#[test]
fn comparison_identity_and_zero_deltas() {
    let t = toy();
    let cfg = EvalConfig {
        samples: 2,
        max_new_tokens: 2,
        ..Default::default()
    };
    let (report, _) = evaluate_model(&models(&t), &prompts(&["a", "b"], 2), &cfg).unwrap();
    let one = compare_models(std::slice::from_ref(&report)).unwrap();
    assert_eq!(one.models, ["toy"]);
    for row in &one.rows {
        let r = report.row(&row.group).unwrap();
        let expect = match row.metric.as_str() {
            "emt" => r.emt_mean,
            "emt_std" => r.emt_std,
            "tp" => r.toxicity_probability,
            "ppl" => r.perplexity,
            _ => r.distinct,
        };
        assert_eq!(row.values, [expect]);
    }
    let two = compare_models(&[report.clone(), report.clone()]).unwrap();
    assert!(two.rows.iter().all(|r| r.deltas.iter().all(|&d| d == 0.0)));
    assert!(two.to_table().contains("d(toy)"));

    let mut other = report.clone();
    other.rows.pop();
    assert!(matches!(compare_models(&[report.clone(), other]), Err(crate::Error::Report(_))));

    let back = EvalReport::from_lines(report.to_lines()).unwrap();
    assert_eq!(back, report);
    assert!(report.to_table().lines().count() == 4 + report.rows.len());
}
