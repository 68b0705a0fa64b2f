use flora_core::arch::{build_architecture, HeadKind};
use flora_core::data::{synth_dataset, DatasetIndex};
use flora_core::layers::Mode;
use flora_core::optim::{OptimizerConfig, OptimizerKind};
use flora_core::train::{
    evaluate, finetune, fit, load_checkpoint, pretrain_then_finetune, read_checkpoint, run_sweep,
    save_checkpoint, train, write_checkpoint, Checkpoint, CheckpointError, Subset, SweepData, SweepSpec,
    TrainConfig, TrainError,
};
use flora_core::arch::ArchDescriptor;
use flora_core::{Model, Rng, Tensor};

fn all_ids(index: &DatasetIndex) -> Vec<usize> {
    (0..index.len()).collect()
}

fn mini(name: &str, classes: usize) -> ArchDescriptor {
    build_architecture(name, [32, 32, 3], classes, HeadKind::Gap).unwrap()
}

fn sgd(lr: f64, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        optimizer: OptimizerConfig::new(OptimizerKind::Sgd).with_learning_rate(lr),
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn mini_mobilenet_memorizes_synthetic_set() {
    let data = synth_dataset(4, 8, 32, 1).unwrap();
    let ids = all_ids(&data);
    let mut model = Model::<f32>::new(mini("mini_mobilenet", 4), 0).unwrap();
    let config = sgd(0.05, 200, 0);
    let mut reached = None;
    let report = fit(&mut model, Subset::new(&data, &ids), None, &config, |r| {
        if r.train_acc == 1.0 && reached.is_none() {
            reached = Some(r.epoch);
        }
    })
    .unwrap();
    assert_eq!(report.history.len(), 200);
    assert!(reached.is_some(), "final train acc {}", report.history.last().unwrap().train_acc);
    let eval = evaluate(&model, Subset::new(&data, &ids), 32).unwrap();
    assert!(eval.metrics.top1_accuracy >= 0.9, "{}", eval.metrics.top1_accuracy);
}

#[test]
fn one_epoch_of_100_samples_is_four_steps() {
    let data = synth_dataset(4, 25, 32, 2).unwrap();
    let ids = all_ids(&data);
    let mut model = Model::<f32>::new(mini("mini_mobilenet", 4), 0).unwrap();
    let report = fit(&mut model, Subset::new(&data, &ids), None, &sgd(0.01, 1, 0), |_| {}).unwrap();
    assert_eq!(report.steps, 4);
    assert_eq!(report.history.len(), 1);
}

fn snapshot(model: &Model<f32>, nodes: std::ops::Range<usize>) -> Vec<Vec<u32>> {
    model.layers()[nodes]
        .iter()
        .flat_map(|l| l.params.iter().map(|p| p.values.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn freeze_contract_holds_for_every_ratio() {
    let data = synth_dataset(3, 6, 32, 3).unwrap();
    let ids = all_ids(&data);
    for name in ["mini_mobilenet", "mini_densenet", "mini_xception"] {
        for ratio in [0.25, 0.5, 0.75] {
            let desc = mini(name, 3);
            let initial = Model::<f32>::new(desc.clone(), 5).unwrap();
            let mut config = sgd(0.05, 2, 5);
            config.freeze_ratio = ratio;
            let ckpt = train(&desc, Subset::new(&data, &ids), None, &config).unwrap();
            let frozen = ckpt.model.freeze_plan().frozen_nodes;
            assert!(frozen > 0);
            assert_eq!(snapshot(&initial, 0..frozen), snapshot(&ckpt.model, 0..frozen), "{name} {ratio}");
            let n = desc.nodes.len();
            assert_ne!(snapshot(&initial, frozen..n), snapshot(&ckpt.model, frozen..n), "{name} {ratio}");
        }
    }
}

#[test]
fn training_is_deterministic() {
    let data = synth_dataset(3, 5, 32, 4).unwrap();
    let ids = all_ids(&data);
    let mut config = sgd(0.05, 2, 9);
    config.batch_size = 4;
    config.augment = Some(flora_core::data::AugmentConfig::standard());
    let desc = mini("mini_xception", 3);
    let a = train(&desc, Subset::new(&data, &ids), None, &config).unwrap();
    let b = train(&desc, Subset::new(&data, &ids), None, &config).unwrap();
    let n = desc.nodes.len();
    assert_eq!(snapshot(&a.model, 0..n), snapshot(&b.model, 0..n));
    assert_eq!(a.history, b.history);
}

#[test]
fn first_batch_loss_is_near_ln_k() {
    // A single init can sit 30% off; the check is on the mean over inits.
    for (name, k) in [("mini_mobilenet", 4), ("mini_densenet", 6), ("mini_xception", 3)] {
        let data = synth_dataset(k, 8, 32, 6).unwrap();
        let ids = all_ids(&data);
        let seeds = 0..8u64;
        let mean = seeds
            .clone()
            .map(|seed| {
                let mut model = Model::<f32>::new(mini(name, k), seed).unwrap();
                fit(&mut model, Subset::new(&data, &ids), None, &sgd(0.01, 1, seed), |_| {})
                    .unwrap()
                    .first_batch_loss
            })
            .sum::<f64>()
            / seeds.count() as f64;
        let ln_k = (k as f64).ln();
        assert!((mean - ln_k).abs() <= 0.2 * ln_k, "{name}: {mean} vs {ln_k}");
    }
}

#[test]
fn history_has_validation_in_inference_mode() {
    let data = synth_dataset(3, 6, 32, 7).unwrap();
    let val = synth_dataset(3, 2, 32, 8).unwrap();
    let (ids, vids) = (all_ids(&data), all_ids(&val));
    let mut model = Model::<f32>::new(mini("mini_mobilenet", 3), 2).unwrap();
    let mut config = sgd(0.05, 3, 2);
    config.augment_validation = false;
    let report = fit(&mut model, Subset::new(&data, &ids), Some(Subset::new(&val, &vids)), &config, |_| {}).unwrap();
    assert_eq!(report.history.len(), 3);
    let last = report.history.last().unwrap();
    let eval = evaluate(&model, Subset::new(&val, &vids), 32).unwrap();
    assert!((last.val_loss.unwrap() - eval.loss).abs() < 1e-9);
    assert_eq!(last.val_acc.unwrap(), eval.metrics.top1_accuracy);
}

#[test]
fn divergence_aborts_with_diagnostics() {
    let data = synth_dataset(3, 4, 32, 9).unwrap();
    let ids = all_ids(&data);
    let mut model = Model::<f32>::new(mini("mini_mobilenet", 3), 3).unwrap();
    let err = fit(&mut model, Subset::new(&data, &ids), None, &sgd(1e30, 5, 3), |_| {}).unwrap_err();
    match &err {
        TrainError::NonFinite { epoch, location, .. } => {
            assert!(*epoch < 5);
            let loc = location.as_ref().expect("a parameter went non-finite");
            assert!(!loc.layer.is_empty());
        }
        other => panic!("unexpected {other}"),
    }
    assert!(err.to_string().contains("non-finite loss at epoch"));
}

#[test]
fn transfer_learning_workflow() {
    let source = synth_dataset(4, 6, 32, 10).unwrap();
    let target = synth_dataset(3, 6, 32, 11).unwrap();
    let (sids, tids) = (all_ids(&source), all_ids(&target));
    let desc = mini("mini_mobilenet", 3);
    let pre = sgd(0.05, 30, 1);
    let (src_ckpt, tuned) = pretrain_then_finetune(
        &desc,
        Subset::new(&source, &sids),
        Subset::new(&target, &tids),
        None,
        &pre,
        &sgd(0.05, 150, 2),
    )
    .unwrap();
    assert_eq!(src_ckpt.model.num_classes(), 4);
    assert_eq!(tuned.model.num_classes(), 3);
    let head = tuned.model.layers().last().unwrap();
    assert_eq!(head.output_feature_shape(), &[3]);
    let eval = evaluate(&tuned.model, Subset::new(&target, &tids), 32).unwrap();
    assert_eq!(eval.metrics.top1_accuracy, 1.0);

    let mut frozen_cfg = sgd(0.05, 3, 2);
    frozen_cfg.freeze_ratio = 0.75;
    let frozen = finetune(&src_ckpt, HeadKind::Gap, Subset::new(&target, &tids), None, &frozen_cfg).unwrap();
    let nodes = frozen.model.freeze_plan().frozen_nodes;
    assert_eq!(snapshot(&src_ckpt.model, 0..nodes), snapshot(&frozen.model, 0..nodes));

    let other = Checkpoint::new(Model::new(mini("mini_densenet", 4), 0).unwrap(), source.class_names.clone());
    let mismatch = finetune(&other, HeadKind::Gap, Subset::new(&target, &tids), None, &frozen_cfg);
    assert!(mismatch.is_ok(), "densenet base re-headed for its own topology");
    let mut wrong = Model::<f32>::new(mini("mini_xception", 3), 0).unwrap();
    assert!(matches!(
        flora_core::train::transfer_base(&src_ckpt.model, &mut wrong),
        Err(TrainError::BaseMismatch(_))
    ));
}

fn random_inputs(seed: u64, n: usize) -> Tensor<f32> {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(&[n, 32, 32, 3], |_| rng.uniform() as f32).unwrap()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let data = synth_dataset(3, 4, 32, 12).unwrap();
    let ids = all_ids(&data);
    let mut config = sgd(0.05, 2, 4);
    config.freeze_ratio = 0.25;
    let ckpt = train(&mini("mini_densenet", 3), Subset::new(&data, &ids), None, &config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.class_names, ckpt.class_names);
    assert_eq!(back.history, ckpt.history);
    assert_eq!(back.train_config, ckpt.train_config);
    assert_eq!(back.model.freeze_plan(), ckpt.model.freeze_plan());
    for seed in 0..10 {
        let x = random_inputs(seed, 1);
        let a = ckpt.model.infer(&x).unwrap();
        let b = back.model.infer(&x).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}

fn bytes_of(ckpt: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, ckpt).unwrap();
    buf
}

fn header_end(bytes: &[u8]) -> usize {
    20 + u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize
}

#[test]
fn tampered_checkpoints_are_rejected_with_names() {
    let model = Model::<f32>::new(mini("mini_mobilenet", 3), 0).unwrap();
    let names = vec!["a".to_string(), "b".into(), "c".into()];
    let bytes = bytes_of(&Checkpoint::new(model, names));

    // First record is conv1/kernel [3,3,3,8]; grow its leading extent.
    let mut grown = bytes.clone();
    let extent0 = header_end(&bytes) + 8;
    grown[extent0] = 4;
    match read_checkpoint(&mut grown.as_slice()) {
        Err(CheckpointError::BlobShape { param, .. }) => assert_eq!(param, "conv1/kernel"),
        other => panic!("{other:?}"),
    }

    let truncated = &bytes[..bytes.len() - 10];
    match read_checkpoint(&mut &truncated[..]) {
        Err(CheckpointError::Blob { param, .. }) => assert_eq!(param, "predictions/bias"),
        other => panic!("{other:?}"),
    }

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(read_checkpoint(&mut bad_magic.as_slice()), Err(CheckpointError::BadMagic { .. })));
    let mut bad_version = bytes.clone();
    bad_version[8] = 9;
    assert!(matches!(read_checkpoint(&mut bad_version.as_slice()), Err(CheckpointError::Version { found: 9 })));

    let mut extra = bytes.clone();
    let tail = bytes[header_end(&bytes)..].to_vec();
    extra.extend_from_slice(&tail[..tail.len().min(8 + 2 + 8 + 4)]);
    assert!(matches!(read_checkpoint(&mut extra.as_slice()), Err(CheckpointError::BlobCount { .. })));
}

#[test]
fn full_size_checkpoint_reverifies_counts() {
    let desc = build_architecture("mobilenet", [224, 224, 3], 16, HeadKind::Gap).unwrap();
    let mut model = Model::<f32>::new(desc, 0).unwrap();
    model.apply_freeze(0.5).unwrap();
    let names: Vec<String> = (0..16).map(|i| format!("species_{i}")).collect();
    let bytes = bytes_of(&Checkpoint::new(model, names));
    let back = read_checkpoint(&mut bytes.as_slice()).unwrap();
    let counts = back.model.param_counts();
    assert_eq!(counts.total, 3_245_264);
    assert_eq!(counts.non_trainable, 291_008);

    let text = String::from_utf8_lossy(&bytes[20..header_end(&bytes)]).into_owned();
    let tampered_header = text.replacen("\"total\": 3245264", "\"total\": 3245265", 1);
    assert_ne!(text, tampered_header);
    let mut tampered = bytes[..20].to_vec();
    tampered[12..20].copy_from_slice(&(tampered_header.len() as u64).to_le_bytes());
    tampered.extend_from_slice(tampered_header.as_bytes());
    tampered.extend_from_slice(&bytes[header_end(&bytes)..]);
    assert!(matches!(
        read_checkpoint(&mut tampered.as_slice()),
        Err(CheckpointError::ParamCounts { .. })
    ));
}

#[test]
fn optimizer_sweep_has_one_row_per_cell() {
    let train_set = synth_dataset(3, 4, 32, 13).unwrap();
    let test_set = synth_dataset(3, 2, 32, 14).unwrap();
    let (tr, te) = (all_ids(&train_set), all_ids(&test_set));
    let data = SweepData {
        train: Subset::new(&train_set, &tr),
        validation: None,
        test: Subset::new(&test_set, &te),
    };
    let mut spec = SweepSpec::new(vec!["mini_mobilenet".into()], OptimizerKind::ALL.to_vec(), vec![0.0]);
    spec.input_size = Some(32);
    spec.config.epochs = 1;
    let result = run_sweep(&spec, data, |_| {}).unwrap();
    assert_eq!(result.rows.len(), 7);
    for row in &result.rows {
        assert!(row.is_ok(), "{:?}", row.error);
        for v in [row.accuracy, row.loss, row.precision, row.recall, row.f1] {
            assert!(v.is_some_and(f64::is_finite));
        }
    }
    let kinds: Vec<OptimizerKind> = result.rows.iter().map(|r| r.optimizer).collect();
    assert_eq!(kinds, OptimizerKind::ALL.to_vec());

    let mut spec = SweepSpec::new(vec!["mini_densenet".into()], vec![OptimizerKind::Sgd], vec![0.25, 0.5, 0.75]);
    spec.input_size = Some(32);
    spec.config.epochs = 1;
    let result = run_sweep(&spec, data, |_| {}).unwrap();
    assert_eq!(result.rows.len(), 3);
    assert_eq!(result.to_csv().lines().count(), 4);

    let empty = SweepSpec::new(vec!["mini_densenet".into()], vec![], vec![0.0]);
    assert!(run_sweep(&empty, data, |_| {}).is_err());
}

#[test]
fn sweep_records_failed_cells_and_continues() {
    let train_set = synth_dataset(3, 4, 32, 15).unwrap();
    let ids = all_ids(&train_set);
    let data = SweepData {
        train: Subset::new(&train_set, &ids),
        validation: None,
        test: Subset::new(&train_set, &ids),
    };
    let mut spec = SweepSpec::new(
        vec!["mini_mobilenet".into()],
        vec![OptimizerKind::Sgd, OptimizerKind::Adam],
        vec![0.0],
    );
    spec.optimizers[0].learning_rate = 1e30;
    spec.input_size = Some(32);
    spec.config.epochs = 3;
    let result = run_sweep(&spec, data, |_| {}).unwrap();
    assert_eq!(result.rows.len(), 2);
    assert!(!result.rows[0].is_ok());
    assert!(result.rows[1].is_ok());
    assert!(result.render_table().contains("failed:"));
}

#[test]
fn training_forward_and_backward_leave_infer_consistent() {
    let mut model = Model::<f32>::new(mini("mini_mobilenet", 3), 0).unwrap();
    let x = random_inputs(1, 2);
    let before = model.infer(&x).unwrap();
    let again = model.forward(&x, Mode::Infer).unwrap();
    assert_eq!(before.data(), again.data());
}
