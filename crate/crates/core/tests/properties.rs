use proptest::prelude::*;

use freqlab::dls::{top_k, DlsConfig};
use freqlab::model::{rope_rotate, RopeTables};
use freqlab::tensor::{Graph, Tensor};
use freqlab::train::checkpoint::{Checkpoint, Record};
use freqlab::train::config::RunConfig;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn head(max_pairs: usize) -> impl Strategy<Value = Vec<f64>> {
    (1..=max_pairs).prop_flat_map(|p| prop::collection::vec(-2.0f64..2.0, 2 * p))
}

proptest! {
    #[test]
    fn rope_depends_only_on_relative_position(
        (q, k) in head(32).prop_flat_map(|q| { let n = q.len(); (Just(q), prop::collection::vec(-2.0f64..2.0, n)) }),
        t1 in 0usize..4096, t2 in 0usize..4096, s in 0usize..4096,
    ) {
        let r = |z: &[f64], t| rope_rotate(z, t, 10000.0).unwrap();
        let a = dot(&r(&q, t1), &r(&k, t2));
        let b = dot(&r(&q, t1 + s), &r(&k, t2 + s));
        prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }

    #[test]
    fn rope_preserves_norm(z in head(32), t in 0usize..100_000) {
        let n0 = dot(&z, &z).sqrt();
        let rz = rope_rotate(&z, t, 10000.0).unwrap();
        prop_assert!((dot(&rz, &rz).sqrt() - n0).abs() <= 1e-12);
    }

    #[test]
    fn rope_tables_agree_with_the_scalar_rotation(z in head(8), seq in 1usize..12) {
        let d_h = z.len();
        let data: Vec<f64> = (0..seq).flat_map(|t| z.iter().map(move |v| v * (t as f64 + 1.0))).collect();
        let tables = RopeTables::<f64>::new(seq, d_h, 500.0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[seq, d_h], data.clone()).unwrap());
        let y = tables.apply(&mut g, x).unwrap();
        for t in 0..seq {
            let want = rope_rotate(&data[t * d_h..(t + 1) * d_h], t, 500.0).unwrap();
            let got = &g.value(y).data()[t * d_h..(t + 1) * d_h];
            for (a, b) in got.iter().zip(&want) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn top_k_keeps_the_largest_scores(scores in prop::collection::vec(0.0f64..1.0, 1..40), ratio in 0.05f64..=1.0) {
        let cfg = DlsConfig { k_ratio: ratio, ..DlsConfig::default() };
        let k = cfg.k(scores.len());
        let set = top_k(&scores, k);
        prop_assert_eq!(set.len(), k);
        let floor = set.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        for (i, &s) in scores.iter().enumerate() {
            if !set.contains(&i) {
                prop_assert!(s <= floor);
            }
        }
    }

    #[test]
    fn checkpoints_round_trip(values in prop::collection::vec(any::<f64>(), 0..64), words in prop::collection::vec(any::<u64>(), 0..8)) {
        let ckpt = Checkpoint {
            config: RunConfig::default().to_text(),
            records: vec![
                Record::f64s("a", values),
                Record::u64s("b", words),
                Record::tensor("c", &Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 * 0.5)),
            ],
        };
        let bytes = ckpt.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn config_text_round_trips(rank in 1usize..256, k_ratio in 0.05f64..=1.0, lr in 1e-6f64..1.0, seed in any::<u64>()) {
        let text = format!("rank = {rank}\nk_ratio = {k_ratio}\nlr = {lr}\nseed = {seed}\n");
        let c = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }
}
