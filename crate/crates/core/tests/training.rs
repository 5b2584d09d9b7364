//! Trainer sanity checks on a tiny synthetic dataset.

use std::path::Path;

use effnet3d::data::{make_batch, synth_generate, ClipSpec, Manifest, Normalization, Split, SynthConfig};
use effnet3d::layers::{Layer, Mode, Slot};
use effnet3d::model::{Model, ModelConfig};
use effnet3d::optim::{Sgd, SgdConfig};
use effnet3d::trainer::{evaluate, sha256_hex, softmax_cross_entropy, TrainConfig, TrainOutputs, Trainer};
use effnet3d::Error;

const CLIP: ClipSpec = ClipSpec {
    clip_len: 8,
    height: 32,
    width: 32,
    normalization: Normalization::HALF,
};

fn dataset(root: &Path) -> Manifest {
    let cfg = SynthConfig {
        videos: 8,
        frames: 16,
        height: 36,
        width: 64,
        seed: 5,
        train_frac: 0.5,
    };
    synth_generate(root, &cfg).unwrap()
}

fn tiny_model(seed: u64) -> Model {
    let mut cfg = ModelConfig::b0(2).truncate_stages(2).unwrap();
    cfg.width_mult = 0.25;
    cfg.resolution = [8, 32, 32];
    cfg.bn_decay = 0.9;
    cfg.dropout = 0.0;
    Model::build(&cfg, seed).unwrap()
}

fn train_config(lr0: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 2,
        eval_batch_size: 4,
        sgd: SgdConfig {
            lr0,
            ..SgdConfig::default()
        },
        patience: 10,
        seed: 3,
        clip: CLIP,
        augment: None,
    }
}

fn params(model: &Model) -> Vec<(String, Vec<f32>)> {
    let trainable: Vec<String> = model
        .tensor_shapes()
        .into_iter()
        .filter(|(_, _, t)| *t)
        .map(|(n, _, _)| n)
        .collect();
    model
        .named_tensors()
        .into_iter()
        .filter(|(n, _)| trainable.contains(n))
        .map(|(n, t)| (n, t.into_data()))
        .collect()
}

fn state_hash(model: &Model) -> String {
    let mut bytes = Vec::new();
    for (name, t) in model.named_tensors() {
        bytes.extend(name.as_bytes());
        t.data().iter().for_each(|v| bytes.extend(v.to_le_bytes()));
    }
    sha256_hex(&bytes)
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = dataset(tmp.path());
    let mut model = tiny_model(1);
    let before = params(&model);
    let outputs = TrainOutputs {
        checkpoint: tmp.path().join("ck.dn3d"),
        metrics_csv: tmp.path().join("m.csv"),
    };
    let report = Trainer::train(&mut model, tmp.path(), &manifest, &train_config(0.0, 2), &outputs, &mut |_| {}).unwrap();
    assert!(report.steps > 0);
    assert_eq!(params(&model), before);
}

#[test]
fn loss_decreases_on_a_fixed_batch() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = dataset(tmp.path());
    let records = manifest.split(Split::Train);
    let batch = make_batch(tmp.path(), &records, &CLIP, Mode::Eval, None, 0).unwrap();
    let mut model = tiny_model(2);
    let mut sgd = Sgd::new(SgdConfig {
        lr0: 0.01,
        ..SgdConfig::default()
    })
    .unwrap();
    let mut losses = Vec::new();
    for _ in 0..6 {
        let logits = model.forward(&batch.clips, Mode::Train).unwrap();
        let (loss, dlogits) = softmax_cross_entropy(&logits, &batch.labels).unwrap();
        losses.push(loss);
        model.backward(&dlogits).unwrap();
        sgd.step(&mut model).unwrap();
    }
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn evaluation_is_batch_size_invariant_and_side_effect_free() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = dataset(tmp.path());
    let records: Vec<_> = manifest.videos.iter().collect();
    let mut model = tiny_model(3);
    let before = state_hash(&model);
    let one = evaluate(&mut model, tmp.path(), &records, &CLIP, 1).unwrap();
    let all = evaluate(&mut model, tmp.path(), &records, &CLIP, 32).unwrap();
    assert_eq!(state_hash(&model), before);
    assert_eq!(one.confusion, all.confusion);
    assert!((one.loss - all.loss).abs() <= 1e-5, "{} vs {}", one.loss, all.loss);

    // Confusion rows sum to the per-class counts.
    for (label, row) in all.confusion.iter().enumerate() {
        let count = records.iter().filter(|r| r.label.index() == label).count();
        assert_eq!(row.iter().sum::<usize>(), count);
    }
}

#[test]
fn nan_weight_reports_divergence_step() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = dataset(tmp.path());
    let mut model = tiny_model(4);
    model.visit("", &mut |name, slot| {
        if let (Slot::Param(p), "stem.conv.weight") = (slot, name) {
            p.value.data_mut()[0] = f32::NAN;
        }
    });
    let outputs = TrainOutputs {
        checkpoint: tmp.path().join("ck.dn3d"),
        metrics_csv: tmp.path().join("m.csv"),
    };
    let err = Trainer::train(&mut model, tmp.path(), &manifest, &train_config(0.01, 1), &outputs, &mut |_| {}).unwrap_err();
    assert!(matches!(err, Error::Divergence { step: 1 }), "{err}");
}
