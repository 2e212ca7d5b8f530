use std::collections::HashSet;
use std::fs;

use candle_core::{DType, Device};

use fashion_rag::dataset::{generate_toy_dataset, toy_split, CaptionSpec, Split};
use fashion_rag::diffusion::{load_checkpoint, train_stage1, train_stage2, Example, FashionRag, TrainConfig, TrainOutput};
use fashion_rag::pipeline::{load_split, prepare_samples, Catalog, RetrievalScope};
use fashion_rag::Profile;

fn model() -> FashionRag {
    FashionRag::new(Profile::Desk, 0, DType::F32, &Device::Cpu).unwrap()
}

#[test]
fn broken_samples_are_rejected_and_loading_continues() {
    let dir = tempfile::tempdir().unwrap();
    let summary = generate_toy_dataset(dir.path(), 16, 3, &Profile::Desk.dims()).unwrap();
    let train_ids: Vec<usize> = (0..16).filter(|i| toy_split(*i) == Split::Train).collect();
    let category_dir = |i: usize| dir.path().join(summary.garments[i].1.category.dir_name());
    let (bad_kp, bad_img, no_mask) = (train_ids[0], train_ids[1], train_ids[2]);
    fs::write(category_dir(bad_kp).join(format!("keypoints/s{bad_kp:04}.txt")), "1 2 x\n").unwrap();
    fs::write(category_dir(bad_img).join(format!("images/s{bad_img:04}.png")), b"not a png").unwrap();
    fs::remove_file(category_dir(no_mask).join(format!("masks/s{no_mask:04}.png"))).unwrap();

    let m = model();
    let (loaded, rejected) = load_split(dir.path(), Split::Train, &m).unwrap();
    let rejected_ids: HashSet<String> = rejected.iter().map(|r| r.sample_id.clone()).collect();
    let want: HashSet<String> = [bad_kp, bad_img, no_mask].iter().map(|i| format!("s{i:04}")).collect();
    assert_eq!(rejected_ids, want);
    assert_eq!(loaded.len(), train_ids.len() - 3);
    let reason = |i: usize| &rejected.iter().find(|r| r.sample_id == format!("s{i:04}")).unwrap().reason;
    assert!(reason(bad_kp).contains("keypoint"), "{}", reason(bad_kp));
    assert!(reason(no_mask).contains("mask"), "{}", reason(no_mask));

    let (test, rejected) = load_split(dir.path(), Split::Test, &m).unwrap();
    assert!(rejected.is_empty());
    assert_eq!(test.len(), 4);
}

#[test]
fn evaluation_retrieval_never_returns_test_garments() {
    let dir = tempfile::tempdir().unwrap();
    generate_toy_dataset(dir.path(), 32, 4, &Profile::Desk.dims()).unwrap();
    let m = model();
    let (catalog, report) = Catalog::build(dir.path()).unwrap();
    assert_eq!(report.failed(), 0);
    let (test, _) = load_split(dir.path(), Split::Test, &m).unwrap();
    let held_out: HashSet<String> = test.iter().map(|s| s.annotation.garment_id.clone()).collect();
    let scope = RetrievalScope::evaluation(&test);
    let prepared = prepare_samples(&m, test, &catalog, CaptionSpec::default(), &scope, None).unwrap();
    for p in &prepared {
        assert_eq!(p.example.retrieved_ids.len(), 3);
        assert_eq!(p.example.retrieved.len(), 3);
        for id in &p.example.retrieved_ids {
            assert!(!held_out.contains(id), "{} retrieved held-out {id}", p.example.sample_id);
        }
    }
}

#[test]
fn checkpoints_resume_both_stages() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("toy");
    generate_toy_dataset(&data_dir, 8, 0, &Profile::Desk.dims()).unwrap();
    let mut m = model();
    let catalog = Catalog::build(&data_dir).unwrap().0;
    let (train, _) = load_split(&data_dir, Split::Train, &m).unwrap();
    let data: Vec<Example> = prepare_samples(&m, train, &catalog, CaptionSpec::default(), &RetrievalScope::training(), None)
        .unwrap()
        .into_iter()
        .map(|p| p.example)
        .collect();
    let cfg = TrainConfig {
        steps: 2,
        batch_size: 2,
        lr: 1e-3,
        weight_decay: 0.01,
        seed: 1,
        cond_dropout: 0.1,
        checkpoint_every: 0,
    };
    let out = TrainOutput {
        checkpoint_dir: dir.path().join("ckpt"),
        loss_log: dir.path().join("loss.tsv"),
    };
    let r1 = train_stage1(&mut m, &data, &cfg, Some(&out)).unwrap();
    let path1 = r1.checkpoints.last().unwrap();
    let loaded = load_checkpoint(path1, DType::F32, &Device::Cpu).unwrap();
    assert_eq!(loaded.meta.step, 2);
    assert!(!loaded.model.has_pose());
    assert_eq!(
        loaded.model.adapter_params.content_hash().unwrap(),
        m.adapter_params.content_hash().unwrap()
    );
    assert_eq!(fs::read_to_string(&out.loss_log).unwrap().lines().count(), 2);

    let mut resumed = loaded.model;
    let r2 = train_stage2(&mut resumed, &data, &cfg, Some(&out)).unwrap();
    let loaded = load_checkpoint(r2.checkpoints.last().unwrap(), DType::F32, &Device::Cpu).unwrap();
    assert!(loaded.model.has_pose());
    assert_eq!(
        loaded.model.unet_params.content_hash().unwrap(),
        resumed.unet_params.content_hash().unwrap()
    );
    assert_ne!(
        loaded.model.unet_params.content_hash().unwrap(),
        m.unet_params.content_hash().unwrap()
    );
}
