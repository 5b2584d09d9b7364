//! End-to-end acceptance checks. Each test prints one line:
//! `ACCEPTANCE <criterion>: PASS|FAIL (<details>)`.
//!
//! Run with `cargo test -p effnet3d-cli --test acceptance -- --nocapture`.

#[path = "../../core/tests/common/gradcheck.rs"]
#[allow(dead_code)]
mod gradcheck;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use effnet3d::checkpoint::{Checkpoint, CheckpointHeader};
use effnet3d::data::{synth_generate, ClipSpec, Manifest, Normalization, Split, SynthConfig, VideoRecord};
use effnet3d::layers::{BatchNorm3d, Conv3d, Dense, GlobalAvgPool3d, Layer, Mode, Slot, SqueezeExcite, Swish};
use effnet3d::model::{b0_stage_table, BlockArgs, MbConv, MbConvSpec, Model, ModelConfig};
use effnet3d::optim::{Decision, EarlyStop, Sgd, SgdConfig};
use effnet3d::trainer::{evaluate, sha256_hex, EpochMetrics, TrainConfig, TrainOutputs, Trainer};
use effnet3d::{ConvGeometry, Error, Tensor};
use gradcheck::{check, check_with_step, random_tensor, GradReport, FINE_STEP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Timing-sensitive criteria must not overlap.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(criterion: &str, pass: bool, details: String) {
    println!(
        "ACCEPTANCE {criterion}: {} ({details})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{criterion} failed: {details}");
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_effnet3d"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn effnet3d");
    assert!(
        out.status.success(),
        "{cmd:?} failed with {:?}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

#[test]
fn parameter_budget() {
    let _g = serial();
    let start = Instant::now();
    let out = run_ok(bin().args(["inspect", "--variant", "b0", "--classes", "2"]));
    let elapsed = start.elapsed();
    let total: usize = out
        .lines()
        .find_map(|l| l.strip_prefix("total params: "))
        .expect("total line")
        .trim()
        .parse()
        .unwrap();
    let rel = (total as f64 - 4.69e6) / 4.69e6;
    report(
        "parameter-budget",
        rel.abs() <= 0.12 && elapsed < Duration::from_secs(5),
        format!("total {total}, {:+.2}% vs 4.69M, {:.2?}", rel * 100.0, elapsed),
    );
}

fn randomize<L: Layer<f64>>(layer: &mut L, rng: &mut ChaCha8Rng) {
    layer.visit("", &mut |name, slot| match slot {
        Slot::Param(p) => p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5)),
        Slot::Buffer(b) if name.ends_with("running_var") => {
            b.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5))
        }
        Slot::Buffer(b) => b.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2)),
    });
}

#[test]
fn gradient_correctness() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut results: Vec<(String, GradReport)> = Vec::new();

    for (k, s, groups) in [(3, 1, 1), (3, 2, 1), (5, 2, 4), (1, 1, 1)] {
        let mut conv = Conv3d::<f64>::new(4, 4, ConvGeometry::cubic(k, s).unwrap(), groups, true).unwrap();
        randomize(&mut conv, &mut rng);
        let x = random_tensor(&[2, 4, 5, 6, 6], &mut rng, 1.0);
        results.push((format!("conv3d k{k} s{s} g{groups}"), check(&mut conv, &x, Mode::Train, 1)));
    }
    for mode in [Mode::Train, Mode::Eval] {
        let mut bn = BatchNorm3d::<f64>::new(3, 0.997, 1e-3).unwrap();
        randomize(&mut bn, &mut rng);
        let x = random_tensor(&[2, 3, 3, 4, 4], &mut rng, 1.0);
        results.push((format!("batchnorm3d {mode:?}"), check(&mut bn, &x, mode, 2)));
    }
    let x = random_tensor(&[2, 3, 2, 3, 3], &mut rng, 3.0);
    results.push(("swish".into(), check(&mut Swish::new(), &x, Mode::Train, 3)));
    let mut se = SqueezeExcite::<f64>::new(6, 2).unwrap();
    randomize(&mut se, &mut rng);
    let x = random_tensor(&[2, 6, 2, 3, 3], &mut rng, 1.0);
    results.push(("squeeze-excite".into(), check(&mut se, &x, Mode::Train, 4)));
    let x = random_tensor(&[2, 3, 2, 3, 4], &mut rng, 1.0);
    results.push(("global-avg-pool".into(), check(&mut GlobalAvgPool3d::new(), &x, Mode::Train, 5)));
    let mut dense = Dense::<f64>::new(5, 3).unwrap();
    randomize(&mut dense, &mut rng);
    let x = random_tensor(&[4, 5], &mut rng, 1.0);
    results.push(("dense".into(), check(&mut dense, &x, Mode::Train, 6)));
    let spec = MbConvSpec {
        in_ch: 4,
        out_ch: 4,
        kernel: 3,
        stride: 1,
        expand_ratio: 6,
        se_ratio: 0.25,
    };
    let mut block = MbConv::<f64>::new(spec, 0.997, 1e-3, 0.0, 0).unwrap();
    randomize(&mut block, &mut rng);
    let x = random_tensor(&[2, 4, 3, 4, 4], &mut rng, 1.0);
    results.push((
        "mbconv".into(),
        check_with_step(&mut block, &x, Mode::Train, 7, FINE_STEP),
    ));

    let mut cfg = ModelConfig::b0(2);
    cfg.resolution = [4, 8, 8];
    cfg.stem_ch = 8;
    cfg.head_ch = 16;
    cfg.dropout = 0.0;
    cfg.stage_table = vec![BlockArgs::new(1, 8, 8, 3, 1, 1), BlockArgs::new(1, 8, 16, 3, 2, 6)];
    let mut micro = Model::<f64>::build(&cfg, 3).unwrap();
    let x = random_tensor(&[1, 3, 4, 8, 8], &mut rng, 1.0);
    results.push((
        "2-block micro-model".into(),
        check_with_step(&mut micro, &x, Mode::Train, 8, FINE_STEP),
    ));

    let elapsed = start.elapsed();
    for (name, r) in &results {
        println!("  {name}: {} entries, worst rel err {:.2e}", r.checked, r.worst);
    }
    let (worst_name, worst) = results
        .iter()
        .map(|(n, r)| (n.as_str(), r.worst))
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    report(
        "gradient-correctness",
        worst <= 1e-5 && elapsed < Duration::from_secs(120),
        format!(
            "{} cases, worst {worst:.2e} ({worst_name}), {:.1?}",
            results.len(),
            elapsed
        ),
    );
}

#[test]
fn convolution_oracle() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut combos: BTreeSet<(usize, usize)> =
        b0_stage_table().iter().map(|b| (b.kernel, b.stride)).collect();
    combos.insert((1, 1));
    let combos: Vec<_> = combos.into_iter().collect();
    let mut worst = 0.0f64;
    let mut seen = BTreeSet::new();
    for draw in 0..20 {
        let (k, s) = if draw < combos.len() {
            combos[draw]
        } else {
            combos[rng.random_range(0..combos.len())]
        };
        let cin = rng.random_range(1..=4) * 2;
        let depthwise = rng.random::<bool>();
        let (cout, groups) = if depthwise { (cin, cin) } else { (rng.random_range(1..=5), 1) };
        let mut conv = Conv3d::<f64>::new(cin, cout, ConvGeometry::cubic(k, s).unwrap(), groups, rng.random()).unwrap();
        randomize(&mut conv, &mut rng);
        let dims = [
            rng.random_range(1..=2),
            cin,
            rng.random_range(1..=6),
            rng.random_range(3..=8),
            rng.random_range(3..=8),
        ];
        let x = random_tensor(&dims, &mut rng, 1.0);
        let fast = conv.infer(&x).unwrap();
        let slow = conv.forward_direct(&x).unwrap();
        assert_eq!(fast.dims(), slow.dims());
        for (a, b) in fast.data().iter().zip(slow.data()) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
        seen.insert((k, s));
    }
    let elapsed = start.elapsed();
    report(
        "convolution-oracle",
        worst <= 1e-6 && seen.len() == combos.len() && elapsed < Duration::from_secs(60),
        format!(
            "20 draws over kernel/stride {combos:?}, worst rel err {worst:.2e}, {:.2?}",
            elapsed
        ),
    );
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    v[v.len() / 2]
}

#[test]
fn performance_property() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn(vec![1, 32, 16, 28, 28], |_| rng.random_range(-1.0f32..1.0)).unwrap();
    let mut dw = Conv3d::<f32>::new(32, 32, ConvGeometry::cubic(3, 1).unwrap(), 32, false).unwrap();
    let mut pw = Conv3d::<f32>::new(32, 32, ConvGeometry::cubic(1, 1).unwrap(), 1, false).unwrap();
    dw.init_fan_out(&mut rng);
    pw.init_fan_out(&mut rng);

    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (fast, slow, diff) = pool.install(|| {
        let time = |f: &dyn Fn() -> Tensor<f32>| {
            let runs: Vec<Duration> = (0..5)
                .map(|_| {
                    let t = Instant::now();
                    std::hint::black_box(f());
                    t.elapsed()
                })
                .collect();
            median(runs)
        };
        let im2col = || pw.infer(&dw.infer(&x).unwrap()).unwrap();
        let naive = || pw.forward_direct(&dw.forward_direct(&x).unwrap()).unwrap();
        let diff = im2col()
            .data()
            .iter()
            .zip(naive().data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        (time(&im2col), time(&naive), diff)
    });
    let speedup = slow.as_secs_f64() / fast.as_secs_f64();
    report(
        "performance",
        speedup >= 2.0,
        format!(
            "median of 5, 1 thread: im2col {fast:.2?}, naive {slow:.2?}, speedup {speedup:.2}x, max |diff| {diff:.1e}"
        ),
    );
}

#[test]
fn training_protocol_conformance() {
    let _g = serial();
    let dump = run_ok(bin().arg("config"));
    let expected = fs::read_to_string(golden("default_config.txt")).unwrap();
    let value = |k: &str| {
        dump.lines()
            .find_map(|l| l.strip_prefix(&format!("{k} = ")))
            .unwrap_or("")
            .to_string()
    };
    let quoted = [
        ("lr", "0.0002"),
        ("momentum", "0.5"),
        ("decay", "0.0000001"),
        ("batch", "32"),
        ("bn_decay", "0.997"),
        ("clip_len", "32"),
        ("height", "112"),
        ("width", "112"),
    ];
    let mismatched: Vec<_> = quoted.iter().filter(|(k, v)| value(k) != *v).collect();
    report(
        "training-protocol",
        dump == expected && mismatched.is_empty(),
        format!(
            "golden diff {}, quoted-value mismatches {mismatched:?}",
            if dump == expected { "empty" } else { "NON-EMPTY" }
        ),
    );
}

const DESK_TRAIN_FLAGS: &[&str] = &[
    "--width-mult", "0.25", "--stages", "2", "--clip-len", "16", "--height", "64", "--width", "64",
    "--epochs", "30", "--batch", "4", "--lr", "0.05", "--bn-decay", "0.9", "--no-augment", "--seed", "7",
];

#[test]
fn desk_scale_learning() {
    let _g = serial();
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("synth");
    let out = tmp.path().join("run");
    run_ok(bin().args(["synth", "--videos", "64", "--seed", "7", "--height", "72", "--width", "128", "--out"]).arg(&data));
    let summary = run_ok(bin().args(["train", "--data"]).arg(&data).arg("--out").arg(&out).args(DESK_TRAIN_FLAGS));
    let metrics: serde_json::Value = serde_json::from_str(
        &run_ok(bin().args(["eval", "--data"]).arg(&data).arg("--checkpoint").arg(out.join("checkpoint.dn3d"))),
    )
    .unwrap();
    let summary: serde_json::Value = serde_json::from_str(&summary).unwrap();
    let acc = metrics["accuracy"].as_f64().unwrap();
    let elapsed = start.elapsed();
    let epochs = summary["epochs_run"].as_u64().unwrap();
    report(
        "desk-scale-learning",
        acc >= 0.9 && epochs <= 30 && elapsed <= Duration::from_secs(20 * 60),
        format!(
            "val accuracy {acc:.3} on {} clips, {epochs} epochs, best epoch {}, {:.0?}",
            metrics["samples"], summary["best_epoch"], elapsed
        ),
    );
}

fn desk_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::b0(2).truncate_stages(2).unwrap();
    cfg.width_mult = 0.25;
    cfg.resolution = [16, 64, 64];
    cfg.bn_decay = 0.9;
    cfg
}

fn desk_clip() -> ClipSpec {
    ClipSpec {
        clip_len: 16,
        height: 64,
        width: 64,
        normalization: Normalization::HALF,
    }
}

#[test]
fn overfit_four_videos() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("synth");
    let cfg = SynthConfig {
        videos: 4,
        frames: 49,
        height: 72,
        width: 128,
        seed: 7,
        train_frac: 1.0,
    };
    let manifest = synth_generate(&data, &cfg).unwrap();
    let subset: Vec<&VideoRecord> = manifest.videos.iter().collect();
    let tc = TrainConfig {
        epochs: 50,
        batch_size: 2,
        eval_batch_size: 4,
        sgd: SgdConfig {
            lr0: 0.05,
            ..SgdConfig::default()
        },
        patience: 50,
        seed: 7,
        clip: desk_clip(),
        augment: None,
    };
    let outputs = TrainOutputs {
        checkpoint: tmp.path().join("ck.dn3d"),
        metrics_csv: tmp.path().join("m.csv"),
    };
    let mut model = Model::build(&desk_model_config(), 7).unwrap();
    let mut first_perfect = None;
    let mut epoch = 0;
    let trainer = Trainer::new(tc.clone(), &data, subset.clone(), outputs);
    let clip = tc.clip;
    let report_ = trainer
        .fit_with_validator(
            &mut model,
            &mut |m: &mut Model| {
                epoch += 1;
                let r = evaluate(m, &data, &subset, &clip, 4)?;
                if r.accuracy == 1.0 && first_perfect.is_none() {
                    first_perfect = Some(epoch);
                }
                Ok(r)
            },
            &mut |_| {},
        )
        .unwrap();
    let best_train = report_.history.iter().map(|l| l.train.accuracy).fold(0.0, f64::max);
    report(
        "overfit-4-videos",
        first_perfect.is_some(),
        format!(
            "eval-mode accuracy on the 4 training videos first reached 1.0 at epoch {first_perfect:?} of 50; best train-mode accuracy {best_train:.2}"
        ),
    );
}

fn small_dataset(root: &Path) -> Manifest {
    synth_generate(
        root,
        &SynthConfig {
            videos: 8,
            frames: 20,
            height: 36,
            width: 64,
            seed: 3,
            train_frac: 0.5,
        },
    )
    .unwrap()
}

#[test]
fn early_stopping_restores_best() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("synth");
    let manifest = small_dataset(&data);
    let mut cfg = desk_model_config();
    cfg.resolution = [8, 32, 32];
    let tc = TrainConfig {
        epochs: 40,
        batch_size: 2,
        eval_batch_size: 4,
        sgd: SgdConfig {
            lr0: 0.05,
            ..SgdConfig::default()
        },
        patience: 10,
        seed: 1,
        clip: ClipSpec {
            clip_len: 8,
            height: 32,
            width: 32,
            normalization: Normalization::HALF,
        },
        augment: None,
    };
    let outputs = TrainOutputs {
        checkpoint: tmp.path().join("ck.dn3d"),
        metrics_csv: tmp.path().join("m.csv"),
    };
    let mut model = Model::build(&cfg, 1).unwrap();
    let mut snapshots = Vec::new();
    let trainer = Trainer::new(tc.clone(), &data, manifest.split(Split::Train), outputs.clone());
    let r = trainer
        .fit_with_validator(
            &mut model,
            &mut |m: &mut Model| {
                snapshots.push(m.named_tensors());
                Ok(EpochMetrics {
                    epoch: 0,
                    loss: 0.5,
                    accuracy: 0.5,
                    confusion: vec![vec![1, 1], vec![1, 1]],
                })
            },
            &mut |_| {},
        )
        .unwrap();
    let bytes = fs::read(&outputs.checkpoint).unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let restored = model.named_tensors();
    let moved = snapshots.last() != snapshots.first();
    let stop_epoch = r.history.len();
    let pass = stop_epoch == tc.patience + 2
        && r.stopped_early
        && r.best_epoch == Some(1)
        && ck.header.epoch == 1
        && sha256_hex(&bytes) == r.checkpoint_sha256
        && restored == snapshots[0]
        && moved;
    report(
        "early-stopping",
        pass,
        format!(
            "constant val loss: stopped after epoch {stop_epoch} (patience {} + 2 = {}), best epoch {:?}, checkpoint epoch {}, sha256 {}..., restored weights equal epoch-1 snapshot: {}, weights moved during training: {moved}",
            tc.patience,
            tc.patience + 2,
            r.best_epoch,
            ck.header.epoch,
            &r.checkpoint_sha256[..12],
            restored == snapshots[0]
        ),
    );
}

#[test]
fn determinism() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("synth");
    small_dataset(&data);
    let train = |dir: &str| {
        let out = tmp.path().join(dir);
        run_ok(
            bin()
                .args(["--deterministic", "train", "--data"])
                .arg(&data)
                .arg("--out")
                .arg(&out)
                .args([
                    "--width-mult", "0.25", "--stages", "2", "--clip-len", "8", "--height", "32", "--width",
                    "32", "--epochs", "3", "--batch", "2", "--lr", "0.05", "--dropout", "0.2", "--seed", "11",
                ]),
        );
        (
            fs::read(out.join("checkpoint.dn3d")).unwrap(),
            fs::read(out.join("metrics.csv")).unwrap(),
        )
    };
    let (ck_a, csv_a) = train("a");
    let (ck_b, csv_b) = train("b");
    report(
        "determinism",
        ck_a == ck_b && csv_a == csv_b && csv_a.split(|&b| b == b'\n').count() > 2,
        format!(
            "augmented 3-epoch runs: checkpoints {} ({} bytes), metric CSVs {}",
            if ck_a == ck_b { "identical" } else { "DIFFER" },
            ck_a.len(),
            if csv_a == csv_b { "identical" } else { "DIFFER" }
        ),
    );
}

#[test]
fn checkpoint_format() {
    let _g = serial();
    let mut cfg = desk_model_config();
    cfg.resolution = [8, 32, 32];
    let model = Model::build(&cfg, 4).unwrap();
    let mut sgd = Sgd::new(SgdConfig::default()).unwrap();
    for (name, dims, trainable) in model.tensor_shapes() {
        if trainable {
            sgd.set_velocity(name, Tensor::full(dims, 0.25f32).unwrap());
        }
    }
    let header = CheckpointHeader {
        model: cfg.clone(),
        step: 0,
        epoch: 2,
        seed: 4,
        best_val_loss: Some(0.4),
        best_val_accuracy: Some(0.9),
        early_stop: Some(EarlyStop::new(10)),
        sgd: None,
        clip: Some(desk_clip()),
    };
    let tmp = tempfile::tempdir().unwrap();
    let (p1, p2) = (tmp.path().join("a.dn3d"), tmp.path().join("b.dn3d"));
    Checkpoint::capture(&model, Some(&sgd), header).save(&p1).unwrap();
    Checkpoint::load(&p1).unwrap().save(&p2).unwrap();
    let bytes = fs::read(&p1).unwrap();
    let roundtrip = bytes == fs::read(&p2).unwrap();

    let truncated = Checkpoint::from_bytes(&bytes[..bytes.len() - 1]);
    // The first tensor's first dim sits after magic, version, header length,
    // header, tensor count, name length, name, dtype and rank.
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let name_at = 12 + header_len + 4;
    let name_len = u16::from_le_bytes(bytes[name_at..name_at + 2].try_into().unwrap()) as usize;
    let dim_at = name_at + 2 + name_len + 2;
    let mut flipped = bytes.clone();
    flipped[dim_at] ^= 0x01;
    let shape = Checkpoint::from_bytes(&flipped);
    let mut magic = bytes.clone();
    magic[..4].copy_from_slice(b"XXXX");
    let bad_magic = Checkpoint::from_bytes(&magic);

    let kinds = [
        matches!(truncated, Err(Error::Truncated(_))),
        matches!(&shape, Err(Error::TensorShapeMismatch { name, .. }) if name == "stem.conv.weight"),
        matches!(bad_magic, Err(Error::BadMagic { .. })),
    ];
    report(
        "checkpoint-format",
        roundtrip && kinds.iter().all(|&k| k),
        format!(
            "save-load-save identical: {roundtrip}; truncate 1 byte -> {}; flip dim byte -> {}; bad magic -> {}",
            describe(&truncated),
            describe(&shape),
            describe(&bad_magic)
        ),
    );
}

fn describe(r: &Result<Checkpoint, Error>) -> String {
    match r {
        Ok(_) => "loaded (no error)".into(),
        Err(e) => e.to_string(),
    }
}

#[test]
fn early_stop_monitor_decisions() {
    let _g = serial();
    let mut es = EarlyStop::new(10);
    let decisions: Vec<Decision> = (1..=12).map(|e| es.update(e, 0.5).unwrap()).collect();
    report(
        "early-stopping-monitor",
        decisions[0] == Decision::Improved
            && decisions[1..11].iter().all(|&d| d == Decision::Continue)
            && decisions[11] == Decision::Stop,
        format!("decisions for 12 constant losses: {decisions:?}"),
    );
}
