use detox_core::data::{append_jsonl, read_jsonl, sample_documents, PromptRecord, SyntheticCorpusSpec};
use detox_core::eval::{aggregate, expected_max_toxicity, toxicity_probability, EvalConfig, GenerationRecord};
use detox_core::rng::stream;
use detox_core::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..12, 1usize..8).prop_flat_map(|(n, k)| prop::collection::vec(prop::collection::vec(0.0f64..=1.0, k), n))
}

proptest! {
    #[test]
    fn metrics_ignore_sample_and_prompt_order(s in matrix(), seed in any::<u64>()) {
        let mut rng = stream(seed, "shuffle");
        let mut t = s.clone();
        for row in &mut t {
            row.shuffle(&mut rng);
        }
        t.shuffle(&mut rng);
        let (a, b) = (expected_max_toxicity(&s).unwrap(), expected_max_toxicity(&t).unwrap());
        prop_assert!((a.0 - b.0).abs() <= 1e-12 && (a.1 - b.1).abs() <= 1e-12);
        prop_assert_eq!(toxicity_probability(&s, 0.5).unwrap(), toxicity_probability(&t, 0.5).unwrap());
    }

    #[test]
    fn probability_falls_as_the_threshold_rises(s in matrix(), lo in 0.0f64..=1.0, hi in 0.0f64..=1.0) {
        let (lo, hi) = (lo.min(hi), lo.max(hi));
        prop_assert!(toxicity_probability(&s, hi).unwrap() <= toxicity_probability(&s, lo).unwrap());
    }

    #[test]
    fn emt_bounds(s in matrix(), thr in 0.01f64..0.99) {
        let (emt, _) = expected_max_toxicity(&s).unwrap();
        let all: Vec<f64> = s.iter().flatten().copied().collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        prop_assert!(emt >= mean - 1e-12);
        if toxicity_probability(&s, thr).unwrap() == 0.0 {
            prop_assert!(emt < thr);
        }
    }

    #[test]
    fn report_is_a_function_of_the_log(scores in prop::collection::vec(0.0f64..=1.0, 12), seed in any::<u64>()) {
        let prompts: Vec<PromptRecord> = (0..4)
            .map(|i| PromptRecord { text: format!("p{i}"), toxicity: None, group: Some(["a", "b"][i % 2].into()) })
            .collect();
        let mut log: Vec<GenerationRecord> = scores
            .iter()
            .enumerate()
            .map(|(i, &t)| GenerationRecord { prompt_id: i / 3, sample_id: i % 3, text: String::new(), toxicity: t })
            .collect();
        let cfg = EvalConfig::default();
        let first = aggregate(&prompts, &log, &cfg).unwrap();
        prop_assert_eq!(&first, &aggregate(&prompts, &log, &cfg).unwrap());
        log.shuffle(&mut stream(seed, "log"));
        let again = aggregate(&prompts, &log, &cfg).unwrap();
        for (x, y) in first.rows.iter().zip(&again.rows) {
            prop_assert_eq!(&x.group, &y.group);
            prop_assert_eq!(x.toxicity_probability, y.toxicity_probability);
            prop_assert!((x.emt_mean - y.emt_mean).abs() <= 1e-12);
        }
    }

    #[test]
    fn truncated_jsonl_never_loses_a_record_silently(n in 1usize..6, cut in 0.0f64..1.0) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let records: Vec<GenerationRecord> = (0..n)
            .map(|i| GenerationRecord { prompt_id: i, sample_id: 0, text: format!("text {i}"), toxicity: i as f64 / 10.0 })
            .collect();
        append_jsonl(&path, &records).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let keep = (cut * bytes.len() as f64) as usize;
        std::fs::write(&path, &bytes[..keep]).unwrap();
        let complete = bytes[..keep].iter().filter(|&&b| b == b'\n').count();
        match read_jsonl::<GenerationRecord>(&path) {
            Ok(back) => {
                prop_assert_eq!(back.len(), complete);
                prop_assert_eq!(&back[..], &records[..complete]);
            }
            Err(e) => {
                prop_assert!(matches!(e, Error::Data(_)));
                prop_assert!(keep > 0 && bytes[keep - 1] != b'\n');
            }
        }
    }
}

fn within_3_sigma(hits: usize, n: usize, p: f64) -> bool {
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    (hits as f64 - n as f64 * p).abs() <= 3.0 * sd
}

#[test]
fn generated_label_rates_match_the_spec() {
    let spec = SyntheticCorpusSpec::default();
    let n = 10_000;
    let docs = sample_documents(&spec, n, &mut stream(spec.seed, "rates")).unwrap();
    let p_hostile = (1.0 - spec.identity_rate) * spec.toxic_rate + spec.identity_rate * spec.identity_toxic_rate;
    let hostile = docs.iter().filter(|d| d.hostile).count();
    let toxic = docs.iter().filter(|d| d.toxicity >= 0.5).count();
    let marked = docs.iter().filter(|d| d.marker_count() > 0).count();
    assert!(within_3_sigma(hostile, n, p_hostile), "{hostile} hostile of {n}, rate {p_hostile}");
    assert!(within_3_sigma(toxic, n, spec.expected_toxic_share()), "{toxic} toxic of {n}");
    assert_eq!(marked, toxic);
    let mild = docs.iter().filter(|d| d.hostile && d.toxicity < 0.5).count();
    assert!(within_3_sigma(mild, hostile, spec.mild_share), "{mild} mild of {hostile} hostile");
    assert!(docs.iter().filter(|d| !d.hostile).all(|d| d.toxicity == 0.0));
}
