use proptest::prelude::*;
use xmash::adversarial::{softmax_neg, train, Mode, TrainConfig};
use xmash::dataio::{generate_synthetic, FeatureMatrix, Split, SyntheticConfig};
use xmash::eval::{average_precision, evaluate_task, interpolated_precision, topk_precision};
use xmash::graph::{build_knn_graph, Metric};
use xmash::index::{encode_corpus, search};
use xmash::Direction;

#[test]
fn train_encode_search_round_trip() {
    let data = generate_synthetic(&SyntheticConfig { num_pairs: 150, num_clusters: 3, seed: 2, ..Default::default() })
        .unwrap();
    let split = Split::random(data.len(), 0.1, 2).unwrap();
    let db = data.subset(&split.db).unwrap();
    let cfg = TrainConfig {
        mode: Mode::Ugach,
        bits: 16,
        dim_common: 32,
        epochs: 4,
        pool_size: 30,
        lr0: 0.05,
        seed: 2,
        ..Default::default()
    };
    let gi = build_knn_graph(db.image(), cfg.graph_k, cfg.graph_metric).unwrap();
    let gt = build_knn_graph(db.text(), cfg.graph_k, cfg.graph_metric).unwrap();
    let out = train(&data, &split, (&gi, &gt), &cfg).unwrap();
    assert_eq!(out.history.len(), 4);
    assert!(out.history.iter().all(|r| r.disc_loss.is_finite()));

    // well separated clusters are easy even after a few epochs
    for task in Direction::BOTH {
        let report = evaluate_task(&out.disc, &data, &split, task, &[10]).unwrap();
        assert!(report.map > 0.6, "{task}: {}", report.map);
        assert_eq!(report.num_queries_evaluated, split.query.len());
    }

    let texts = encode_corpus(&out.disc, db.text(), xmash::Modality::Text).unwrap();
    let hits = search(&texts, texts.row(7), None).unwrap();
    assert_eq!(hits.len(), db.len());
    assert_eq!(hits[0].distance, 0);
}

fn ranking() -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), 1..40)
}

proptest! {
    #[test]
    fn ap_lies_in_unit_interval(rel in ranking()) {
        if let Some(ap) = average_precision(&rel) {
            prop_assert!(ap > 0.0 && ap <= 1.0);
        } else {
            prop_assert!(!rel.contains(&true));
        }
    }

    #[test]
    fn ap_is_one_when_relevant_items_lead(hits in 1usize..20, misses in 0usize..20) {
        let rel: Vec<bool> = (0..hits + misses).map(|i| i < hits).collect();
        prop_assert_eq!(average_precision(&rel), Some(1.0));
    }

    #[test]
    fn swapping_a_miss_ahead_of_a_hit_lowers_ap(rel in ranking(), i in 0usize..40) {
        let i = i % rel.len();
        if i + 1 < rel.len() && rel[i] && !rel[i + 1] {
            let mut worse = rel.clone();
            worse.swap(i, i + 1);
            prop_assert!(average_precision(&worse).unwrap() < average_precision(&rel).unwrap());
        }
    }

    #[test]
    fn interpolated_precision_never_increases(rel in ranking()) {
        prop_assume!(rel.contains(&true));
        let pr = interpolated_precision(&rel).unwrap();
        prop_assert!(pr.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn topk_at_full_length_is_the_relevant_fraction(rel in ranking()) {
        prop_assume!(rel.contains(&true));
        let n = rel.len();
        let p = topk_precision(std::slice::from_ref(&rel), &[n]).unwrap()[0].1;
        let frac = rel.iter().filter(|&&r| r).count() as f64 / n as f64;
        prop_assert!((p - frac).abs() < 1e-12);
    }

    #[test]
    fn generator_softmax_is_a_distribution(d in prop::collection::vec(0.0f64..200.0, 1..100)) {
        let p = softmax_neg(&d);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&v| v > 0.0));
        let closest = d.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        prop_assert!(p.iter().all(|&v| v <= p[closest]));
    }

    #[test]
    fn knn_graph_has_degree_k_and_no_self_loops(
        (n, dim, values) in (2usize..30, 1usize..5)
            .prop_flat_map(|(n, dim)| (Just(n), Just(dim), prop::collection::vec(0.1f32..1.1, n * dim))),
        k_seed in any::<usize>(),
        cosine in any::<bool>(),
    ) {
        let fm = FeatureMatrix::new(n, dim, values).unwrap();
        let k = 1 + k_seed % (n - 1);
        let metric = if cosine { Metric::Cosine } else { Metric::Euclidean };
        let g = build_knn_graph(&fm, k, metric).unwrap();
        for q in 0..n {
            let nb = g.neighbors(q);
            prop_assert_eq!(nb.len(), k);
            prop_assert!(!nb.contains(&q));
            let mut sorted = nb.to_vec();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), k);
        }
    }
}
