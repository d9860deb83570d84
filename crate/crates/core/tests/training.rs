mod common;

use common::*;
use idea_core::adapter::FusionConfig;
use idea_core::harness::evaluate;
use idea_core::synthetic::{SyntheticBenchmark, SyntheticSpec};
use idea_core::tidea::{
    load_checkpoint, loss_and_grads, save_checkpoint, tidea_logits_batch, train, CheckpointMeta,
    Components, LabeledSplit, LrSchedule, TrainConfig, TrainableState,
};
use rand::Rng;

fn bench(seed: u64, noise: f64) -> SyntheticBenchmark {
    SyntheticBenchmark::generate(&SyntheticSpec {
        num_classes: 5,
        dim: 16,
        train_per_class: 8,
        val_per_class: 10,
        test_points: 200,
        image_noise: noise,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn run(
    b: &SyntheticBenchmark,
    k: usize,
    components: Components,
    tc: &TrainConfig,
) -> idea_core::tidea::TrainOutcome {
    let cache = b.cache(k, 3).unwrap();
    train(
        &cache,
        &b.head,
        LabeledSplit::new(cache.images(), cache.labels()).unwrap(),
        LabeledSplit::new(&b.val.0, &b.val.1).unwrap(),
        &FusionConfig::default(),
        components,
        tc,
    )
    .unwrap()
}

#[test]
fn same_seed_same_history_and_state() {
    let b = bench(1, 0.25);
    let tc = TrainConfig {
        learning_rate: 0.5,
        epochs: 8,
        batch_size: 7,
        seed: 42,
        ..TrainConfig::default()
    };
    let a = run(&b, 4, Components::default(), &tc);
    let c = run(&b, 4, Components::default(), &tc);
    assert_eq!(a.history, c.history);
    assert_eq!(a.state, c.state);
    assert_eq!(a.best_epoch, c.best_epoch);
}

#[test]
fn zero_learning_rate_keeps_zero_state() {
    let b = bench(2, 0.25);
    let tc = TrainConfig {
        learning_rate: 0.0,
        epochs: 1,
        ..TrainConfig::default()
    };
    let out = run(&b, 4, Components::default(), &tc);
    assert!(out.state.w_proj().iter().all(|&v| v == 0.0));
    assert!(out.state.e_bias().iter().all(|&v| v == 0.0));
}

#[test]
fn no_components_is_a_no_op() {
    let b = bench(3, 0.25);
    let tc = TrainConfig {
        learning_rate: 1.0,
        epochs: 3,
        ..TrainConfig::default()
    };
    let out = run(&b, 4, Components::NONE, &tc);
    assert!(out
        .state
        .w_proj()
        .iter()
        .chain(out.state.e_bias())
        .all(|&v| v == 0.0));
}

#[test]
fn separable_clusters_reach_high_validation_accuracy() {
    let b = bench(4, 0.05);
    let tc = TrainConfig {
        learning_rate: 0.5,
        epochs: 10,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let out = run(&b, 8, Components::default(), &tc);
    assert!(
        out.best_val_accuracy.unwrap() >= 0.95,
        "{:?}",
        out.best_val_accuracy
    );
}

#[test]
fn disabled_components_stay_zero() {
    let b = bench(5, 0.25);
    let tc = TrainConfig {
        learning_rate: 1.0,
        epochs: 3,
        batch_size: 5,
        ..TrainConfig::default()
    };
    let proj_only = run(
        &b,
        4,
        Components {
            proj: true,
            bias: false,
        },
        &tc,
    );
    assert!(proj_only.state.e_bias().iter().all(|&v| v == 0.0));
    assert!(proj_only.state.w_proj().iter().any(|&v| v != 0.0));
    let bias_only = run(
        &b,
        4,
        Components {
            proj: false,
            bias: true,
        },
        &tc,
    );
    assert!(bias_only.state.w_proj().iter().all(|&v| v == 0.0));
    assert!(bias_only.state.e_bias().iter().any(|&v| v != 0.0));
}

#[test]
fn full_model_is_not_worse_than_ablations_on_average() {
    let tc = TrainConfig {
        learning_rate: 0.5,
        epochs: 10,
        batch_size: 8,
        lr_schedule: LrSchedule::Cosine,
        ..TrainConfig::default()
    };
    let subsets = [
        Components {
            proj: true,
            bias: true,
        },
        Components {
            proj: false,
            bias: true,
        },
        Components {
            proj: true,
            bias: false,
        },
    ];
    let mut means = [0.0f64; 3];
    for seed in 0..5 {
        let b = bench(100 + seed, 0.3);
        let cache = b.cache(4, 3).unwrap();
        for (i, c) in subsets.iter().enumerate() {
            let out = run(&b, 4, *c, &tc);
            let logits = tidea_logits_batch(
                &cache,
                &b.head,
                &out.state,
                &b.test.0,
                &FusionConfig::default(),
            )
            .unwrap();
            means[i] += evaluate(&logits, &b.test.1).unwrap().top1_accuracy / 5.0;
        }
    }
    assert!(means[0] >= means[1] - 0.005, "{means:?}");
    assert!(means[0] >= means[2] - 0.005, "{means:?}");
}

#[test]
fn gradients_match_finite_differences_for_every_flag_combination() {
    let mut rng = rng(77);
    for combo in [(true, true), (true, false), (false, true), (false, false)] {
        let components = Components {
            proj: combo.0,
            bias: combo.1,
        };
        let inst = random_instance(&mut rng);
        let (n, k, d) = (inst.n, inst.k, inst.d);
        let mut state = TrainableState::for_cache(&inst.cache, components);
        for v in state.w_proj_mut() {
            *v = rng.random_range(-0.1..0.1);
        }
        for v in state.e_bias_mut() {
            *v = rng.random_range(-0.1..0.1);
        }
        let batch = unit_matrix(&mut rng, 4, d);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..n)).collect();
        let cfg = FusionConfig::new(0.4, 1.5, 2.0).unwrap();
        let got = loss_and_grads(&inst.cache, &inst.head, &state, &batch, &labels, &cfg).unwrap();

        let images = rows64(inst.cache.images());
        let texts = rows64(inst.cache.texts());
        let protos = rows64(inst.head.prototypes());
        let loss_at = |w: &[f64], e: &[f64]| {
            let w: Vec<Vec<f64>> = w.chunks(d).map(<[f64]>::to_vec).collect();
            let e: Vec<Vec<f64>> = e.chunks(d).map(<[f64]>::to_vec).collect();
            let logits: Vec<Vec<f64>> = batch
                .iter_rows()
                .map(|x| {
                    let x: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
                    reference_logits(
                        &images,
                        &texts,
                        &protos,
                        components.proj.then_some(&w[..]),
                        components.bias.then_some(&e[..]),
                        &x,
                        n,
                        k,
                        0.4,
                        1.5,
                        2.0,
                    )
                })
                .collect();
            reference_loss(&logits, &labels)
        };
        assert!((loss_at(state.w_proj(), state.e_bias()) - got.loss).abs() < 1e-9);
        let h = 1e-6;
        let w0 = state.w_proj().to_vec();
        let e0 = state.e_bias().to_vec();
        for (idx, analytic) in got.grads.w_proj.iter().enumerate() {
            if !components.proj {
                assert_eq!(*analytic, 0.0);
                continue;
            }
            let (mut p, mut m) = (w0.clone(), w0.clone());
            p[idx] += h;
            m[idx] -= h;
            let fd = (loss_at(&p, &e0) - loss_at(&m, &e0)) / (2.0 * h);
            assert!(
                (fd - analytic).abs() <= 1e-4 * fd.abs().max(1e-3),
                "w[{idx}] {fd} vs {analytic}"
            );
        }
        for (idx, analytic) in got.grads.e_bias.iter().enumerate() {
            if !components.bias {
                assert_eq!(*analytic, 0.0);
                continue;
            }
            let (mut p, mut m) = (e0.clone(), e0.clone());
            p[idx] += h;
            m[idx] -= h;
            let fd = (loss_at(&w0, &p) - loss_at(&w0, &m)) / (2.0 * h);
            assert!(
                (fd - analytic).abs() <= 1e-4 * fd.abs().max(1e-3),
                "e[{idx}] {fd} vs {analytic}"
            );
        }
    }
}

#[test]
fn checkpoint_round_trip_within_f32() {
    let b = bench(6, 0.25);
    let tc = TrainConfig {
        learning_rate: 1.0,
        epochs: 2,
        batch_size: 5,
        ..TrainConfig::default()
    };
    let out = run(&b, 4, Components::default(), &tc);
    let dir = tempfile::tempdir().unwrap();
    let meta = CheckpointMeta {
        fusion: FusionConfig::default(),
        train: tc.clone(),
        epoch: out.best_epoch,
        val_accuracy: out.best_val_accuracy,
        enable_proj: true,
        enable_bias: true,
        dim: out.state.dim(),
        cache_rows: out.state.cache_rows(),
    };
    save_checkpoint(dir.path(), &out.state, &meta).unwrap();
    let (state, back) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back, meta);
    for (a, b) in state
        .w_proj()
        .iter()
        .zip(out.state.w_proj())
        .chain(state.e_bias().iter().zip(out.state.e_bias()))
    {
        assert_eq!(*a, f64::from(*b as f32));
    }
}

#[test]
fn invalid_training_configs_are_rejected() {
    let b = bench(7, 0.25);
    let cache = b.cache(2, 0).unwrap();
    for tc in [
        TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
    ] {
        assert!(train(
            &cache,
            &b.head,
            LabeledSplit::new(cache.images(), cache.labels()).unwrap(),
            LabeledSplit::new(&b.val.0, &b.val.1).unwrap(),
            &FusionConfig::default(),
            Components::default(),
            &tc,
        )
        .is_err());
    }
}
