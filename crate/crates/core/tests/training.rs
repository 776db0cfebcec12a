use gatefuse::data::{model_dims, pad_batch, synth_generate, Batch, InteractionMode, SyntheticSpec, Video};
use gatefuse::model::{infer, AblationConfig, ForwardOptions, Modality, ModelParams, FUSIONS};
use gatefuse::training::probe::probe_accuracy;
use gatefuse::training::{
    batch_loss_and_grads, evaluate, train, write_history_csv, AdamState, TrainConfig, TrainOutcome,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn synth(n: usize, mode: InteractionMode, noise: f64, seed: u64) -> Vec<Video> {
    synth_generate(&SyntheticSpec {
        n_videos: n,
        mode,
        modality_noise: [noise; 3],
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn run(data: &[Video], val: &[Video], cfg: &TrainConfig) -> TrainOutcome<f64> {
    let dims = model_dims(data, cfg.hidden).unwrap();
    let model = ModelParams::new(dims, cfg.ablation, cfg.seed).unwrap();
    train(model, data, val, cfg).unwrap()
}

#[test]
fn redundant_features_are_linearly_decodable() {
    let data = synth(120, InteractionMode::Redundant, 0.0, 4);
    let (train, test) = data.split_at(90);
    for m in Modality::ALL {
        let acc = probe_accuracy(train, test, &[m]);
        assert!(acc > 0.95, "{m:?}: {acc}");
    }
}

#[test]
fn xor_features_are_not_linearly_decodable_alone() {
    let data = synth(400, InteractionMode::Xor, 0.0, 5);
    let (train, test) = data.split_at(300);
    for m in Modality::ALL {
        let acc = probe_accuracy(train, test, &[m]);
        assert!((acc - 0.5).abs() <= 0.05, "{m:?}: {acc}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn full_batch_loss_descends(
        seed in any::<u64>(),
        lr in 1e-4f64..=1e-3,
        mode in prop::sample::select(vec![InteractionMode::Xor, InteractionMode::Majority, InteractionMode::Redundant]),
    ) {
        let data = synth(6, mode, 0.1, seed);
        let dims = model_dims(&data, 4).unwrap();
        let mut model = ModelParams::<f64>::new(dims, AblationConfig::B6, seed).unwrap();
        let batch: Batch<f64> = pad_batch(&data).unwrap();
        let mut adam = AdamState::new(&model.store, lr);
        let mut losses = Vec::new();
        for _ in 0..6 {
            let (loss, grads) = batch_loss_and_grads(&model, &batch, &ForwardOptions::eval(), |_| 0).unwrap();
            losses.push(loss);
            adam.step(&mut model.store, &grads).unwrap();
        }
        prop_assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{:?}", losses);
    }
}

#[test]
fn small_redundant_set_is_memorised() {
    let data = synth(10, InteractionMode::Redundant, 0.0, 11);
    // Batch size scaled to the set so an epoch still holds several steps.
    let cfg = TrainConfig {
        hidden: 8,
        batch_size: 2,
        ..Default::default()
    };
    let out = run(&data, &data, &cfg);
    let acc = evaluate(&out.model, &data).unwrap().accuracy;
    assert!(acc >= 0.99, "train accuracy {acc}");
    assert_eq!(out.history.len(), 75);
}

#[test]
fn same_seed_same_history_and_parameters() {
    let data = synth(12, InteractionMode::Xor, 0.15, 2);
    let (tr, val) = data.split_at(9);
    let cfg = TrainConfig {
        hidden: 4,
        epochs: 4,
        seed: 21,
        batch_size: 4,
        ..Default::default()
    };
    let a = run(tr, val, &cfg);
    let b = run(tr, val, &cfg);
    let csv = |o: &TrainOutcome<f64>| {
        let mut buf = Vec::new();
        write_history_csv(&mut buf, &o.history).unwrap();
        buf
    };
    assert_eq!(csv(&a), csv(&b));
    let bits = |o: &TrainOutcome<f64>| -> Vec<u64> {
        o.model
            .store
            .tensors()
            .iter()
            .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    assert_eq!(bits(&a), bits(&b));

    let other = run(tr, val, &TrainConfig { seed: 22, ..cfg });
    assert_ne!(bits(&a), bits(&other));
}

#[test]
fn best_validation_epoch_is_returned() {
    let data = synth(16, InteractionMode::Majority, 0.1, 8);
    let (tr, val) = data.split_at(12);
    let cfg = TrainConfig {
        hidden: 4,
        epochs: 6,
        batch_size: 4,
        lr: 0.01,
        ..Default::default()
    };
    let out = run(tr, val, &cfg);
    let best = out.best_epoch.unwrap();
    let best_acc = out.history[best - 1].val_acc;
    assert!(out.history.iter().all(|r| r.val_acc <= best_acc));
    assert!(out.history[..best - 1].iter().all(|r| r.val_acc < best_acc));
    assert_eq!(evaluate(&out.model, val).unwrap().accuracy, best_acc);
}

#[test]
fn no_validation_split_keeps_final_parameters() {
    let data = synth(6, InteractionMode::Majority, 0.0, 1);
    let cfg = TrainConfig {
        hidden: 3,
        epochs: 2,
        ..Default::default()
    };
    let out = run(&data, &[], &cfg);
    assert_eq!(out.best_epoch, None);
    assert!(out
        .history
        .iter()
        .all(|r| r.val_acc.is_nan() && r.train_loss.is_finite()));
}

fn mean_gate(model: &ModelParams<f64>, videos: &[Video]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in videos {
        let feats = Modality::ALL.map(|m| v.matrix::<f64>(m));
        let mask = vec![true; v.len()];
        let input = gatefuse::model::VideoInput {
            features: [&feats[0], &feats[1], &feats[2]],
            mask: &mask,
        };
        let (_, trace) = infer(
            model,
            &input,
            &ForwardOptions::eval(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        for f in 0..FUSIONS.len() {
            for g in trace.gates[f].as_ref().unwrap() {
                sum += g;
                n += 1;
            }
        }
    }
    sum / n as f64
}

#[test]
fn interaction_data_opens_the_gates() {
    let cfg = TrainConfig {
        hidden: 8,
        ..Default::default()
    };
    let xor = synth(80, InteractionMode::Xor, 0.0, 3);
    let redundant = synth(80, InteractionMode::Redundant, 0.0, 3);
    let gx = mean_gate(&run(&xor, &[], &cfg).model, &xor);
    let gr = mean_gate(&run(&redundant, &[], &cfg).model, &redundant);
    assert!(gx > gr, "xor mean gate {gx} vs redundant {gr}");
}
