use detox_core::rng::stream;
use detox_core::tensor::{attention_head, init_normal, softmax_in_place, Adam, AdamConfig, Graph, ParamSet, Tensor};
use proptest::prelude::*;

fn causal(n: usize) -> Tensor<f64> {
    let m: Vec<f64> = (0..n * n).map(|k| if k % n <= k / n { 0.0 } else { f64::NEG_INFINITY }).collect();
    Tensor::from_f64(&[n, n], &m).unwrap()
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(xs in prop::collection::vec(-60.0f64..60.0, 1..40), masked in prop::collection::vec(any::<bool>(), 40)) {
        let mut row = xs.clone();
        for (i, v) in row.iter_mut().enumerate().skip(1) {
            if masked[i] {
                *v = f64::NEG_INFINITY;
            }
        }
        let mut single: Vec<f32> = row.iter().map(|&v| v as f32).collect();
        softmax_in_place(&mut row);
        softmax_in_place(&mut single);
        prop_assert!(row.iter().all(|&p| p >= 0.0));
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!(single.iter().all(|&p| p >= 0.0));
        prop_assert!((single.iter().map(|&p| f64::from(p)).sum::<f64>() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn cross_entropy_matches_a_direct_sum(
        logits in prop::collection::vec(-8.0f64..8.0, 5 * 6),
        targets in prop::collection::vec(0usize..5, 6),
    ) {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_f64(&[6, 5], &logits).unwrap());
        let t: Vec<Option<usize>> = targets.iter().map(|&t| Some(t)).collect();
        let loss = g.cross_entropy(z, &t).unwrap();
        let mut oracle = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            let row = &logits[r * 5..r * 5 + 5];
            let mut z = 0.0;
            for &l in row {
                z += l.exp();
            }
            oracle += z.ln() - row[y];
        }
        oracle /= 6.0;
        prop_assert!((g.value(loss).data()[0] - oracle).abs() <= 1e-12);
    }

    #[test]
    fn causal_head_ignores_later_tokens(seed in any::<u64>(), n in 2usize..8, t in 0usize..7, bump in -3.0f64..3.0) {
        let t = t % (n - 1);
        let mut rng = stream(seed, "attn");
        let h = init_normal::<f64, _>(&[n, 6], 1.0, &mut rng);
        let w: Vec<Tensor<f64>> = (0..3).map(|_| init_normal(&[6, 4], 0.5, &mut rng)).collect();
        let base = attention_head(&h, &w[0], &w[1], &w[2], &causal(n)).unwrap();
        let mut moved = h.clone();
        for v in &mut moved.data_mut()[(t + 1) * 6..] {
            *v += bump;
        }
        let out = attention_head(&moved, &w[0], &w[1], &w[2], &causal(n)).unwrap();
        prop_assert_eq!(&base.data()[..(t + 1) * 4], &out.data()[..(t + 1) * 4]);
    }

    #[test]
    fn adam_replays_identically(seed in any::<u64>(), steps in 1usize..6, decay in 0.0f64..0.1) {
        let run = || {
            let mut rng = stream(seed, "adam");
            let mut ps = ParamSet::<f32>::new();
            ps.add("w", init_normal(&[3, 4], 1.0, &mut rng));
            ps.add("b", init_normal(&[4], 1.0, &mut rng));
            let mut opt = Adam::new(AdamConfig { weight_decay: decay, ..AdamConfig::default() }, &ps);
            for _ in 0..steps {
                for id in ps.ids().collect::<Vec<_>>() {
                    let g: Vec<f32> = init_normal::<f32, _>(&[ps.get(id).len()], 1.0, &mut rng).into_data();
                    ps.get_mut(id).grad_mut().unwrap().copy_from_slice(&g);
                }
                opt.step(&mut ps).unwrap();
            }
            (ps.iter().map(|(_, t)| t.data().to_vec()).collect::<Vec<_>>(), opt.state)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        prop_assert_eq!(a, b);
        prop_assert_eq!(sa, sb);
    }
}
