use alc_core::data_io::{build_dataset, generate, RunConfig, SyntheticSpec};
use alc_core::diffmath::GradTape;
use alc_core::encoder::TextRecord;
use alc_core::evaluation::{predict, EvalReport};
use alc_core::gradsuite::MicroProblem;
use alc_core::losses::{total_loss, triplet_base_loss, FeatureBank, ObjectiveConfig};
use alc_core::mining::Dataset;
use alc_core::trainer::{train, Sampler, TrainConfig};
use rand_chacha::ChaCha8Rng;

fn small(cfg: TrainConfig) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        blocking_size: 3,
        dim: 8,
        d_in: 16,
        buckets: 1024,
        ..cfg
    }
}

fn catalog(seed: u64) -> Dataset {
    let spec = SyntheticSpec {
        num_labels: 40,
        num_train_queries: 60,
        num_test_queries: 0,
        families: 5,
        seed,
        ..SyntheticSpec::default()
    };
    let data = generate(&spec).unwrap();
    build_dataset(data.labels, data.train).unwrap()
}

/// 50 queries that each spell out their own label.
fn separable() -> Dataset {
    let words = ["red", "blue", "green", "amber", "violet"];
    let things = [
        "kettle", "lamp", "chair", "drill", "sofa", "mixer", "rake", "tent", "scale", "clock",
    ];
    let labels: Vec<TextRecord> = (0..50)
        .map(|i| TextRecord {
            id: i as u64,
            text: format!("{} {} {}", words[i % 5], things[i / 5], i),
        })
        .collect();
    let queries = labels
        .iter()
        .map(|l| TextRecord {
            id: 1000 + l.id,
            text: l.text.clone(),
        })
        .collect();
    Dataset {
        labels,
        queries,
        positives: (0..50).map(|i| vec![i]).collect(),
    }
}

#[test]
fn separable_loss_decreases() {
    let cfg = small(TrainConfig {
        epochs: 12,
        seed: 4,
        ..TrainConfig::default()
    });
    let out = train(&separable(), &cfg).unwrap();
    let totals: Vec<f64> = out.log.iter().map(|e| e.total).collect();
    let avg: Vec<f64> = totals
        .windows(3)
        .map(|w| w.iter().sum::<f64>() / 3.0)
        .collect();
    // windows covering the first 10 epochs
    for pair in avg[..8].windows(2) {
        assert!(pair[1] < pair[0], "{totals:?}");
    }
}

#[test]
fn ablated_objective_is_the_base_loss() {
    for seed in 0..10 {
        let mut problem = MicroProblem::new(seed);
        problem.objective = ObjectiveConfig {
            beta1: 0.0,
            beta2: 0.0,
            tcm: None,
            ..problem.objective
        };
        let bank = FeatureBank {
            queries: &problem.query_features,
            labels: &problem.label_features,
        };
        let mut tape = GradTape::new();
        let vars = tape.register_params(&problem.params);
        let (total, parts, _) = total_loss::<ChaCha8Rng>(
            &mut tape,
            &vars,
            &problem.model,
            &problem.batch,
            &bank,
            &problem.objective,
            None,
        )
        .unwrap();
        let value = tape.value(total).item();
        assert_eq!(value.to_bits(), parts.base.to_bits());
        assert_eq!((parts.tcm, parts.xe_ql, parts.xe_qb), (0.0, 0.0, 0.0));

        // independent recomputation from the embeddings
        let enc = &problem.model.encoder;
        let q = enc.embed_all(
            &problem.params,
            &problem.query_features.iter().collect::<Vec<_>>(),
        );
        let l = enc.embed_all(
            &problem.params,
            &problem.label_features.iter().collect::<Vec<_>>(),
        );
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let b = &problem.batch;
        let per_query: Vec<f64> = (0..b.len())
            .filter(|&s| !b.neg_pools[s].is_empty())
            .map(|s| {
                let qv = &q[b.query_ids[s]];
                let negs: Vec<f64> = b.neg_pools[s].iter().map(|&n| dot(qv, &l[n])).collect();
                triplet_base_loss(dot(qv, &l[b.pos_label_ids[s]]), &negs, 0.3).unwrap()
            })
            .collect();
        let want = per_query.iter().sum::<f64>() / per_query.len() as f64;
        assert!((value - want).abs() < 1e-12, "{value} vs {want}");
    }
}

#[test]
fn ablated_training_logs_zero_auxiliary_terms() {
    let cfg = small(TrainConfig {
        epochs: 1,
        beta1: 0.0,
        beta2: 0.0,
        tcm_enabled: false,
        ..TrainConfig::default()
    });
    let out = train(&catalog(1), &cfg).unwrap();
    let e = out.log[0];
    assert_eq!((e.tcm, e.xe_ql, e.xe_qb), (0.0, 0.0, 0.0));
    assert_eq!(e.total.to_bits(), e.base.to_bits());
}

#[test]
fn four_configurations_run_from_config_text() {
    let dataset = catalog(2);
    let configs = [
        "beta1 = 0\nbeta2 = 0\ntcm_enabled = false\n",
        "beta1 = 1.0\nbeta2 = 0.5\ntcm_enabled = false\n",
        "beta1 = 0\nbeta2 = 0\ntcm_enabled = true\n",
        "beta1 = 1.0\nbeta2 = 0.5\ntcm_enabled = true\n",
    ];
    for text in configs {
        let text = format!("{text}epochs = 2\nbatch_size = 8\nblocking_size = 3\ndim = 8\nd_in = 16\nbuckets = 1024\n");
        let cfg = RunConfig::parse(&text, "inline").unwrap().train;
        let out = train(&dataset, &cfg).unwrap();
        assert_eq!(out.log.len(), 2);
        for e in &out.log {
            assert!((e.total - e.recomputed_total(cfg.beta1, cfg.beta2)).abs() <= 1e-12);
            assert_eq!(e.tcm == 0.0, !cfg.tcm_enabled, "{text}");
            assert_eq!(e.xe_ql == 0.0, cfg.beta1 == 0.0, "{text}");
        }
    }
}

#[test]
fn same_seed_same_bits() {
    let dataset = catalog(3);
    for sampler in [Sampler::Cluster, Sampler::Ance] {
        let cfg = small(TrainConfig {
            epochs: 3,
            seed: 11,
            sampler,
            refresh_cadence: 2,
            ..TrainConfig::default()
        });
        let a = train(&dataset, &cfg).unwrap();
        let b = train(&dataset, &cfg).unwrap();
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert_eq!(a.log, b.log);
        let ra = EvalReport::new(
            &predict(&a.checkpoint.model(), &a.checkpoint.params, &dataset).unwrap(),
            0.85,
            50,
        )
        .unwrap();
        let rb = EvalReport::new(
            &predict(&b.checkpoint.model(), &b.checkpoint.params, &dataset).unwrap(),
            0.85,
            50,
        )
        .unwrap();
        assert_eq!(ra.to_json(), rb.to_json());

        let other = train(&dataset, &TrainConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(other.checkpoint.to_bytes(), a.checkpoint.to_bytes());
    }
}

#[test]
fn training_leaves_the_dataset_alone_and_logs_consistent_totals() {
    let dataset = catalog(4);
    let before = dataset.clone();
    let cfg = small(TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    });
    let out = train(&dataset, &cfg).unwrap();
    assert_eq!(dataset, before);
    for e in &out.log {
        assert!((e.total - e.recomputed_total(cfg.beta1, cfg.beta2)).abs() <= 1e-12);
    }
    // every batch produced one blocking per query; the trainer errors out
    // on a blocking without exactly one positive
    assert!(out.stats.blockings >= dataset.num_queries() * cfg.epochs - out.stats.skipped_queries);
}
