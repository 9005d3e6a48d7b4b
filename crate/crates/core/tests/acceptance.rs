//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.
//!
//! Run with `cargo test -p bdae-core --test acceptance -- --nocapture`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use bdae_core::data::{
    augment_all, load_inputs, slice_count, split_dataset, synth_dataset, Cohort, Manifest, ModelInput,
    PreprocessConfig, SampleRecord, Sequence, SplitLevel, SynthOptions,
};
use bdae_core::metrics::{macro_summary, per_class_metrics, summary, ClassMetrics, ConfusionMatrix};
use bdae_core::model::{evaluate, fit, layer_shapes, model_gradcheck, ArchConfig, Checkpoint, ModelGraph, TrainConfig};
use bdae_core::nifti::{decode_volume, encode_volume, parse_header, Endianness, NiftiVolume};
use bdae_core::nn::gradcheck::{layer_suite, GradCheckOptions};
use bdae_core::Tensor;
use byteorder::{BigEndian, ByteOrder, LittleEndian};

/// Layer rows as printed: name, output shape, parameter count.
const TABLE_1: [(&str, &str, usize); 27] = [
    ("conv3d_1", "(None, 80, 80, 80, 32)", 896),
    ("batch_normalization_1", "(None, 80, 80, 80, 32)", 128),
    ("max_pooling3d_1", "(None, 80, 40, 40, 32)", 0),
    ("conv3d_2", "(None, 78, 38, 38, 64)", 55360),
    ("conv3d_3", "(None, 76, 36, 36, 64)", 110656),
    ("conv3d_4", "(None, 74, 34, 34, 64)", 110656),
    ("conv3d_5", "(None, 72, 32, 32, 64)", 110656),
    ("batch_normalization_2", "(None, 72, 32, 32, 64)", 256),
    ("max_pooling3d_2", "(None, 72, 16, 16, 64)", 0),
    ("dropout_1", "(None, 72, 16, 16, 64)", 0),
    ("conv3d_6", "(None, 70, 14, 14, 128)", 221312),
    ("conv3d_7", "(None, 68, 12, 12, 128)", 442496),
    ("batch_normalization_3", "(None, 68, 12, 12, 128)", 512),
    ("max_pooling3d_3", "(None, 68, 6, 6, 128)", 0),
    ("dropout_2", "(None, 68, 6, 6, 128)", 0),
    ("conv3d_8", "(None, 67, 5, 5, 256)", 262400),
    ("conv3d_9", "(None, 66, 4, 4, 256)", 524544),
    ("conv3d_10", "(None, 64, 2, 2, 256)", 1769728),
    ("batch_normalization_4", "(None, 64, 2, 2, 256)", 1024),
    ("max_pooling3d_4", "(None, 64, 1, 1, 256)", 0),
    ("dropout_3", "(None, 64, 1, 1, 256)", 0),
    ("flatten_1", "(None, 16384)", 0),
    ("dense_1", "(None, 1024)", 16778240),
    ("dropout_4", "(None, 1024)", 0),
    ("dense_2", "(None, 512)", 524800),
    ("dropout_5", "(None, 512)", 0),
    ("dense_3", "(None, 6)", 3078),
];

fn criterion_1() {
    let rows = layer_shapes(&ArchConfig::canonical(1)).unwrap();
    assert_eq!(rows.len(), TABLE_1.len());
    for (row, (name, shape, _)) in rows.iter().zip(TABLE_1) {
        assert_eq!(row.spec.name, name);
        assert_eq!(row.output.to_string(), shape, "{name}");
    }
}

fn criterion_2() {
    let rows = layer_shapes(&ArchConfig::canonical(1)).unwrap();
    for (row, (name, _, params)) in rows.iter().zip(TABLE_1) {
        assert_eq!(row.params(), params, "{name}");
    }
    let model = ModelGraph::<f32>::new(ArchConfig::canonical(1), 0).unwrap();
    assert_eq!(model.count_params(), (20_916_742, 20_915_782, 960));
    assert_eq!(rows.iter().map(|r| r.params()).sum::<usize>(), 20_916_742);
}

fn criterion_3() {
    let opts = GradCheckOptions::default();
    for r in layer_suite(None, &opts).unwrap() {
        println!("    {r}");
        assert!(r.passed() && r.max_rel_error < 1e-4, "{r}");
    }
    for r in model_gradcheck(&ArchConfig::tiny(1), &opts, 11).unwrap() {
        println!("    {r}");
        assert!(r.passed() && r.max_rel_error < 1e-4, "{r}");
        assert!(r.coordinates > 0);
    }
}

fn table(rows: [(f64, f64, f64, u64); 6]) -> Vec<ClassMetrics> {
    rows.iter()
        .zip(Cohort::ALL)
        .map(|(&(precision, recall, f1, support), c)| ClassMetrics {
            class: c.name().to_string(),
            precision,
            recall,
            f1,
            support,
        })
        .collect()
}

/// Printed cells carry two decimals of a percentage; some are truncated
/// rather than rounded, so a cell matches when it is within 0.01 below or above.
fn matches_cell(value: f64, cell: f64) -> bool {
    (value * 100.0 - cell).abs() < 0.01
}

fn criterion_4() {
    let t1w = table([
        (0.96, 0.92, 0.94, 25),
        (0.91, 0.91, 0.91, 23),
        (0.81, 0.88, 0.84, 24),
        (0.62, 0.80, 0.70, 20),
        (0.71, 0.68, 0.69, 25),
        (0.90, 0.74, 0.81, 35),
    ]);
    let fusion = table([
        (1.00, 0.87, 0.93, 15),
        (0.88, 1.00, 0.94, 15),
        (1.00, 0.94, 0.97, 18),
        (1.00, 1.00, 1.00, 19),
        (0.94, 0.84, 0.89, 19),
        (0.87, 0.96, 0.92, 28),
    ]);
    let plain = table([
        (1.00, 0.85, 0.92, 13),
        (0.75, 1.00, 0.86, 15),
        (1.00, 0.79, 0.88, 19),
        (0.86, 0.86, 0.86, 14),
        (0.89, 1.00, 0.94, 16),
        (1.00, 0.97, 0.99, 37),
    ]);
    let s = macro_summary(&t1w, 0.0);
    assert!(matches_cell(s.macro_precision, 81.83), "{}", s.macro_precision);
    assert!(matches_cell(s.macro_recall, 82.16), "{}", s.macro_recall);
    let s = macro_summary(&fusion, 0.0);
    assert!(matches_cell(s.macro_precision, 94.83), "{}", s.macro_precision);
    assert!(matches_cell(s.macro_recall, 93.5), "{}", s.macro_recall);
    let s = macro_summary(&plain, 0.0);
    assert!(matches_cell(s.macro_precision, 91.66), "{}", s.macro_precision);
    assert!(matches_cell(s.macro_recall, 91.16), "{}", s.macro_recall);

    // a confusion matrix consistent with the fusion table, rows = true class
    let counts = vec![
        vec![13, 2, 0, 0, 0, 0],
        vec![0, 15, 0, 0, 0, 0],
        vec![0, 0, 17, 0, 0, 1],
        vec![0, 0, 0, 19, 0, 0],
        vec![0, 0, 0, 0, 16, 3],
        vec![0, 0, 0, 0, 1, 27],
    ];
    let names = Cohort::ALL.iter().map(|c| c.name().to_string()).collect();
    let cm = ConfusionMatrix::from_counts(names, counts).unwrap();
    for (got, want) in per_class_metrics(&cm).iter().zip(&fusion) {
        assert_eq!((got.precision * 100.0).round(), want.precision * 100.0, "{}", got.class);
        assert_eq!((got.recall * 100.0).round(), want.recall * 100.0, "{}", got.class);
        assert_eq!((got.f1 * 100.0).round(), want.f1 * 100.0, "{}", got.class);
        assert_eq!(got.support, want.support);
    }
    assert_eq!((summary(&cm).overall_accuracy * 100.0).round(), 94.0);
}

fn fake_manifest(n: usize, sequences: &[Sequence]) -> Manifest {
    let records = (0..n)
        .map(|i| {
            let seq = sequences[i % sequences.len()];
            let cohort = Cohort::ALL[i % 6];
            SampleRecord::new(
                format!("scan{i:04}.nii"),
                format!("sub{:04}", i / sequences.len()),
                seq,
                cohort.window().0,
            )
            .unwrap()
        })
        .collect();
    Manifest::new(records).unwrap()
}

fn criterion_5() {
    let (train, val) = split_dataset(&fake_manifest(190, &[Sequence::T1w]), 0.8, 1, SplitLevel::Scan).unwrap();
    assert_eq!((train.len(), val.len()), (152, 38));

    let small = Tensor::<f32>::zeros(&[2, 2, 4, 1]).unwrap();
    let inputs: Vec<ModelInput> = (0..152)
        .map(|i| ModelInput {
            volume: small.clone(),
            label: i % 6,
            sources: vec![],
        })
        .collect();
    assert_eq!(augment_all(&inputs, 1).unwrap().len(), 608);
    assert_eq!(augment_all(&inputs[..38], 1).unwrap().len(), 152);

    assert_eq!(slice_count(152), 36_480);
    assert_eq!(slice_count(608), 145_920);
    assert_eq!(slice_count(456), 109_440);

    let all = [Sequence::T1w, Sequence::T2w, Sequence::PDw];
    let (train, val) = split_dataset(&fake_manifest(570, &all), 0.8, 1, SplitLevel::Scan).unwrap();
    assert_eq!((train.len(), val.len()), (456, 114));
}

fn synth_inputs(dir: &Path, per_cohort: usize, seed: u64) -> (Manifest, PreprocessConfig) {
    let m = synth_dataset(dir, seed, per_cohort, &SynthOptions::default()).unwrap();
    let cfg = PreprocessConfig {
        extent: ArchConfig::desk(1).input_extent,
        ..Default::default()
    };
    (m, cfg)
}

fn criterion_6() {
    let dir = tempfile::tempdir().unwrap();
    let (m, cfg) = synth_inputs(dir.path(), 2, 21);
    let train = load_inputs(&m, &cfg).unwrap();
    assert_eq!(train.len(), 12);
    let mut model = ModelGraph::<f32>::new(ArchConfig::desk(1), 21).unwrap();
    let initial = evaluate(&model, &train, 8).unwrap().loss;
    println!("    initial loss {initial:.4} (ln 6 = {:.4})", 6f64.ln());
    assert!((initial - 6f64.ln()).abs() <= 0.3);
    let cfg = TrainConfig {
        epochs: 200,
        seed: 21,
        target_train_loss: Some(0.01),
        optimizer: bdae_core::nn::RmspropConfig {
            lr: 1e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    let history = fit(&mut model, &train, &[], &cfg).unwrap();
    let last = history.last().unwrap();
    println!(
        "    epoch {} train_loss {:.5} train_acc {:.3}",
        last.epoch, last.train_loss, last.train_acc
    );
    assert!(last.epoch <= 200);
    assert_eq!(last.train_acc, 1.0);
}

fn criterion_7() {
    let dir = tempfile::tempdir().unwrap();
    let (m, cfg) = synth_inputs(dir.path(), 30, 33);
    let (train_m, val_m) = split_dataset(&m, 0.8, 33, SplitLevel::Scan).unwrap();
    let train = load_inputs(&train_m, &cfg).unwrap();
    let val = load_inputs(&val_m, &cfg).unwrap();
    assert_eq!((train.len(), val.len()), (144, 36));
    let mut model = ModelGraph::<f32>::new(ArchConfig::desk(1), 33).unwrap();
    let cfg = TrainConfig {
        epochs: 12,
        seed: 33,
        optimizer: bdae_core::nn::RmspropConfig {
            lr: 1e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    fit(&mut model, &train, &val, &cfg).unwrap();
    let eval = evaluate(&model, &val, 8).unwrap();
    println!(
        "    validation accuracy {:.4} on {} held-out scans",
        eval.accuracy,
        val.len()
    );
    assert!(eval.accuracy >= 0.9);
}

fn criterion_8() {
    // float32 write/read is bitwise, including awkward values
    let mut values: Vec<f32> = (0..5 * 4 * 3).map(|i| (i as f32 * 0.37).sin() * 1e3).collect();
    values[0] = f32::MIN_POSITIVE;
    values[1] = -0.0;
    values[2] = f32::MAX;
    let vol = NiftiVolume::from_tensor(Tensor::from_vec(&[3, 4, 5], values.clone()).unwrap(), [0.5, 1.0, 2.0]).unwrap();
    let bytes = encode_volume(&vol).unwrap();
    let back = decode_volume(bytes.clone()).unwrap();
    assert_eq!(back.dims(), [3, 4, 5]);
    assert_eq!(back.header.spatial_dims(), [5, 4, 3]);
    assert_eq!(back.spacing(), [0.5, 1.0, 2.0]);
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(back.voxels.data()), bits(&values));
    assert_eq!(encode_volume(&back).unwrap(), bytes);

    // the same file written big-endian decodes to the same voxels
    let mut header = parse_header(&bytes).unwrap();
    header.endianness = Endianness::Big;
    let mut big = header.to_bytes().to_vec();
    big.resize(header.vox_offset as usize, 0);
    for chunk in bytes[header.vox_offset as usize..].chunks(4) {
        let mut b = [0u8; 4];
        BigEndian::write_f32(&mut b, LittleEndian::read_f32(chunk));
        big.extend_from_slice(&b);
    }
    assert_ne!(big, bytes);
    let from_big = decode_volume(big).unwrap();
    assert_eq!(bits(from_big.voxels.data()), bits(&values));
    assert_eq!(from_big.spacing(), back.spacing());
}

fn criterion_9() {
    let dir = tempfile::tempdir().unwrap();
    let (m, _) = synth_inputs(dir.path(), 1, 5);
    let cfg = PreprocessConfig {
        extent: ArchConfig::tiny(1).input_extent,
        ..Default::default()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let run = || {
        pool.install(|| {
            let inputs = augment_all(&load_inputs(&m, &cfg).unwrap(), 1).unwrap();
            let mut model = ModelGraph::<f32>::new(ArchConfig::tiny(1), 5).unwrap();
            let tc = TrainConfig {
                epochs: 3,
                batch_size: 4,
                seed: 5,
                ..Default::default()
            };
            let history = fit(&mut model, &inputs, &inputs[..6], &tc).unwrap();
            let ckpt = Checkpoint::new(model, 3, br#"{"seed":5}"#).to_bytes();
            (history.to_csv(), ckpt)
        })
    };
    let (h1, c1) = run();
    let (h2, c2) = run();
    assert_eq!(h1, h2);
    assert_eq!(c1, c2);
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn()); 9] = [
        ("1 layer output shapes", criterion_1),
        ("2 parameter counts", criterion_2),
        ("3 gradient suite", criterion_3),
        ("4 metric reproduction", criterion_4),
        ("5 dataset arithmetic", criterion_5),
        ("6 overfit 12 samples", criterion_6),
        ("7 learnability", criterion_7),
        ("8 NIfTI round-trip and endianness", criterion_8),
        ("9 determinism", criterion_9),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        let start = Instant::now();
        let ok = catch_unwind(AssertUnwindSafe(check)).is_ok();
        println!(
            "{} criterion {name} ({:.1?})",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed()
        );
        if !ok {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
