use hlora_core::adapter::{
    hlora_forward, moelora_forward_reference, HLoraSubmodule, Linear, LoraAdapter, OpCounter, RouterLayer, ScaleMode,
};
use hlora_core::rng::stream;
use hlora_core::text;
use hlora_core::train::spearman;
use hlora_core::vq::{from_token_ids, quantize, to_token_ids, Codebook, IndexSequence, VocabularyMap};
use hlora_core::{Graph, ParamGroup, ParamStore, TaskType, Tensor};
use proptest::prelude::*;

fn naive_matmul(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            for k in 0..n {
                out[i * p + j] += a[i * n + k] * b[k * p + j];
            }
        }
    }
    out
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn matmul_matches_triple_loop((m, n, p, a, b) in (1usize..7, 1usize..7, 1usize..7)
        .prop_flat_map(|(m, n, p)| (Just(m), Just(n), Just(p), matrix(m, n), matrix(n, p))))
    {
        let mut g = Graph::new();
        let av = g.constant(Tensor::new([m, n], a.clone()).unwrap());
        let bv = g.constant(Tensor::new([n, p], b.clone()).unwrap());
        let c = g.matmul(av, bv).unwrap();
        let want = naive_matmul(&a, &b, m, n, p);
        for (x, y) in g.value(c).data().iter().zip(&want) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn softmax_rows_are_distributions((m, n, a) in (1usize..6, 1usize..8)
        .prop_flat_map(|(m, n)| (Just(m), Just(n), prop::collection::vec(-50.0f64..50.0, m * n))))
    {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([m, n], a).unwrap());
        let s = g.softmax_rows(x).unwrap();
        let t = g.value(s);
        for r in 0..m {
            let row = t.row(r);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn merged_forward_equals_expert_loop(
        tokens in 1usize..6,
        d_in in 1usize..12,
        d_out in 1usize..12,
        rank in 1usize..4,
        k in prop::sample::select(vec![1usize, 2, 4, 8]),
        alpha in 0.5f64..16.0,
        seed in any::<u64>(),
    ) {
        let rank = rank.min(d_in).min(d_out);
        let mut rng = stream(seed, "prop.merge");
        let mut store = ParamStore::new();
        let g0 = ParamGroup::CompPlugin;
        let base = Linear::init(&mut store, "base", g0, d_in, d_out, true, 1.0, &mut rng);
        let experts: Vec<LoraAdapter> = (0..k)
            .map(|i| {
                let a = Tensor::randn([d_in, rank], 1.0, &mut rng);
                let b = Tensor::randn([rank, d_out], 1.0, &mut rng);
                LoraAdapter::from_tensors(&mut store, &format!("e{i}"), g0, a, b, alpha).unwrap()
            })
            .collect();
        let router = RouterLayer::init(&mut store, "router", g0, d_in, k, &mut rng).unwrap();
        let sub = HLoraSubmodule::from_experts(&mut store, "m", g0, TaskType::Comprehension, &experts, router.clone()).unwrap();
        let x = Tensor::randn([tokens, d_in], 1.0, &mut rng);

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let merged = hlora_forward(&mut g, &store, xv, &base, &sub, &mut OpCounter::new()).unwrap();
        let mut g2 = Graph::new();
        let xv2 = g2.constant(x);
        let reference = moelora_forward_reference(&mut g2, &store, xv2, &base, &experts, &router, ScaleMode::Merged, &mut OpCounter::new()).unwrap();
        for (a, b) in g.value(merged).data().iter().zip(g2.value(reference).data()) {
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0));
        }
        let blocks = sub.expert_blocks(&store);
        for (e, (a, b)) in experts.iter().zip(&blocks) {
            prop_assert_eq!(store.tensor(e.a), a);
            prop_assert_eq!(store.tensor(e.b), b);
        }
    }

    #[test]
    fn quantize_is_exhaustive_nearest(
        (_k, _d, codes, z) in (2usize..10, 1usize..5)
            .prop_flat_map(|(k, d)| (Just(k), Just(d), prop::collection::vec(prop::collection::vec(-2i32..3, d), k), prop::collection::vec(-2.0f64..2.0, d)))
    ) {
        let mut distinct: Vec<Vec<f64>> = Vec::new();
        for c in codes {
            let c: Vec<f64> = c.into_iter().map(f64::from).collect();
            if !distinct.contains(&c) {
                distinct.push(c);
            }
        }
        prop_assume!(distinct.len() >= 2);
        let cb = Codebook::new(distinct.clone()).unwrap();
        for (j, c) in distinct.iter().enumerate() {
            prop_assert_eq!(quantize(c, &cb).unwrap(), j);
        }
        let dist = |c: &[f64]| c.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let best = distinct.iter().map(|c| dist(c)).fold(f64::INFINITY, f64::min);
        let want = distinct.iter().position(|c| dist(c) == best).unwrap();
        prop_assert_eq!(quantize(&z, &cb).unwrap(), want);
    }

    #[test]
    fn token_mapping_is_a_bijection(ids in prop::collection::vec(0usize..64, 9)) {
        let vm = VocabularyMap::new(text::text_vocab_size(), 64).unwrap();
        let seq = IndexSequence::new(ids, (3, 3), 64).unwrap();
        let tokens = to_token_ids(&seq, &vm).unwrap();
        prop_assert!(tokens.iter().all(|&t| vm.is_vq(t)));
        prop_assert!(!tokens.contains(&vm.start_img()) && !tokens.contains(&vm.end_img()));
        prop_assert_eq!(from_token_ids(&tokens, (3, 3), &vm).unwrap(), seq);
    }

    #[test]
    fn spearman_sign_follows_monotone_maps(xs in prop::collection::btree_set(-100i32..100, 3..10)) {
        let xs: Vec<f64> = xs.into_iter().map(f64::from).collect();
        let up: Vec<f64> = xs.iter().map(|x| x.powi(3) + 1.0).collect();
        let down: Vec<f64> = xs.iter().map(|x| (-x).exp()).collect();
        prop_assert!((spearman(&xs, &up) - 1.0).abs() < 1e-12);
        prop_assert!((spearman(&xs, &down) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn text_round_trips(words in prop::collection::vec(0usize..34, 1..8)) {
        let rendered = text::detokenize(&words);
        prop_assert_eq!(text::tokenize(&rendered).unwrap(), words);
    }
}
