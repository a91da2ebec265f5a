mod common;

use seqex_core::blackbox::{
    batch_loss_and_gradients, categorize, forward_trace, predict, train, train_with_history, BlackboxError, LayerTrace,
    NetworkParams, TrainConfig,
};
use seqex_core::dataset::{ImageInstance, InstanceId, LabeledDataset, IMAGE_PIXELS};

#[test]
fn analytic_gradients_match_finite_differences() {
    let params = NetworkParams::init(11);
    let images = common::sparse_images(2, 0.2, 5);
    let refs: Vec<&[f64]> = images.iter().map(|v| v.as_slice()).collect();
    let targets = [1.0, 0.0];
    let (_, grads) = batch_loss_and_gradients(&params, &refs, &targets);
    let checks = common::finite_difference_check(&params, &refs, &targets, &grads.tensors, 1e-4, 48, 2);
    assert_eq!(checks.len(), 10);
    for check in checks {
        // Probes that flip a ReLU or pooling winner are skipped; at least half must survive.
        assert!(
            check.checked >= check.skipped.max(1),
            "{}: only {} usable probes ({} skipped)",
            check.name,
            check.checked,
            check.skipped
        );
        assert!(
            check.relative_error <= 1e-3,
            "{}: relative error {:.3e} over {} entries",
            check.name,
            check.relative_error,
            check.checked
        );
    }
}

#[test]
fn loss_decreases_over_first_epochs_on_toy_set() {
    let data = common::toy_dataset(64, 3);
    let config = TrainConfig {
        epochs: 3,
        batch_size: 16,
        seed: 4,
        ..TrainConfig::default()
    };
    let (_, losses) = train_with_history(&data, &config).unwrap();
    assert_eq!(losses.len(), 3);
    assert!(losses.iter().all(|l| l.is_finite()));
    assert!(losses[1] < losses[0] && losses[2] < losses[1], "{losses:?}");
}

#[test]
fn training_rejects_degenerate_sets() {
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    assert!(matches!(
        train(&LabeledDataset::default(), &cfg),
        Err(BlackboxError::EmptyTrainSet)
    ));
    let one_class = LabeledDataset::new(
        (0..4)
            .map(|i| ImageInstance {
                id: InstanceId(i),
                pixels: vec![0.5; IMAGE_PIXELS],
                class: 1,
            })
            .collect(),
    );
    assert!(matches!(
        train(&one_class, &cfg),
        Err(BlackboxError::SingleClassTrainSet)
    ));
}

#[test]
fn training_is_deterministic_per_seed() {
    let data = common::toy_dataset(32, 8);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        seed: 21,
        ..TrainConfig::default()
    };
    assert_eq!(train(&data, &cfg).unwrap(), train(&data, &cfg).unwrap());
}

#[test]
fn trace_matches_predict_and_has_seven_layers() {
    let params = NetworkParams::init(2);
    let img = ImageInstance {
        id: InstanceId(0),
        pixels: common::random_images(1, 9).remove(0),
        class: 1,
    };
    let trace = forward_trace(&params, &img.pixels).unwrap();
    assert_eq!(trace.layers.len(), 7);
    let pred = predict(&params, &img).unwrap();
    assert_eq!(trace.logit(), pred.logit);
    assert_eq!(predict(&params, &img).unwrap(), pred);
    for layer in &trace.layers {
        if let LayerTrace::MaxPool {
            input, output, argmax, ..
        } = layer
        {
            for (o, &src) in argmax.iter().enumerate() {
                let (c, rem) = (o / (output.height * output.width), o % (output.height * output.width));
                let (y, x) = (rem / output.width, rem % output.width);
                let sc = src / (input.height * input.width);
                let srem = src % (input.height * input.width);
                let (sy, sx) = (srem / input.width, srem % input.width);
                assert_eq!(sc, c);
                assert!(sy / 2 == y && sx / 2 == x, "argmax outside its 2x2 window");
                assert_eq!(input.data[src], output.data[o]);
            }
        }
    }
}

#[test]
fn categorize_partitions_toy_predictions() {
    let data = common::toy_dataset(40, 1);
    let params = train(
        &data,
        &TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let cats = categorize(&params, &data).unwrap();
    assert_eq!(cats.len(), data.len());
    let mut seen: Vec<u32> = seqex_core::blackbox::Possibility::ALL
        .iter()
        .flat_map(|&p| cats.list(p).iter().map(|e| e.id.0))
        .collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..40).collect::<Vec<_>>());
}
