mod common;

use std::fs;
use std::path::Path;

use clipdet::checkpoint;
use clipdet::error::Error;
use clipdet::harness::{
    export_maps, fewshot_count, generate_toy_data, ingest_dataset, load_model, run_experiment, save_model,
    subsample_fewshot, train, prepare, Dataset, DatasetSpec, Domain, ExperimentConfig, RunManifest, Split,
};
use clipdet::model::{TcmModel, Toggles};
use clipdet::tensor::Tensor;

fn write_png(path: &Path, w: u32, h: u32) {
    image::RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 7) as u8, (y * 5) as u8, 90])).save(path).unwrap();
}

#[test]
fn ingestion_examples() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("mini");
    fs::create_dir_all(root.join("images")).unwrap();
    fs::create_dir_all(root.join("annotations")).unwrap();
    write_png(&root.join("images/a.png"), 120, 60);
    fs::write(
        root.join("annotations/gt_a.txt"),
        "10,10,100,10,100,40,10,40,hello\n20,45,60,45,60,55,20,55,###\n",
    )
    .unwrap();
    let ds = ingest_dataset(&DatasetSpec::at(&root, Split::Train)).unwrap();
    assert_eq!(ds.name, "mini");
    assert_eq!(ds.len(), 1);
    let inst = &ds.samples[0].instances;
    assert_eq!(inst[0].polygon, vec![[10.0, 10.0], [100.0, 10.0], [100.0, 40.0], [10.0, 40.0]]);
    assert!(!inst[0].ignore);
    assert_eq!(inst[0].transcription.as_deref(), Some("hello"));
    assert!(inst[1].ignore);

    fs::write(root.join("annotations/gt_a.txt"), "1,1,5,1,5,5,1,5,ok\n1,2,3,4,5,x\n").unwrap();
    match ingest_dataset(&DatasetSpec::at(&root, Split::Train)) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a parse error, got {other:?}"),
    }

    write_png(&root.join("images/b.png"), 32, 32);
    fs::write(root.join("annotations/gt_a.txt"), "").unwrap();
    assert!(matches!(
        ingest_dataset(&DatasetSpec::at(&root, Split::Train)),
        Err(Error::NotFound(p)) if p.ends_with("gt_b.txt")
    ));
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["images", "annotations"] {
        let mut names: Vec<_> = fs::read_dir(root.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn toy_data_is_reproducible_and_valid() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate_toy_data(&dir.path().join("one"), 20, 7, 64, Domain::A).unwrap();
    generate_toy_data(&dir.path().join("two"), 20, 7, 64, Domain::A).unwrap();
    let (x, y) = (read_tree(&dir.path().join("one")), read_tree(&dir.path().join("two")));
    assert_eq!(x.len(), 40);
    assert_eq!(x, y);

    let ds = ingest_dataset(&a).unwrap();
    assert_eq!(ds.len(), 20);
    for s in &ds.samples {
        assert!(!s.instances.is_empty());
        for inst in &s.instances {
            assert!(inst.is_valid(), "{}: {:?}", s.name, inst.polygon);
            assert!(clipdet::geometry::is_simple(&inst.polygon));
        }
    }
    assert!(generate_toy_data(&dir.path().join("none"), 0, 7, 64, Domain::A).is_err());
}

/// Mean and variance of background pixels (outside every word box).
fn background_stats(root: &Path) -> Vec<(f64, f64)> {
    let ds = ingest_dataset(&DatasetSpec::at(root, Split::Train)).unwrap();
    ds.samples
        .iter()
        .map(|s| {
            let img = image::open(root.join("images").join(format!("{}.png", s.name))).unwrap().to_luma8();
            let vals: Vec<f64> = img
                .enumerate_pixels()
                .filter(|(x, y, _)| {
                    let (cx, cy) = (*x as f64 + 0.5, *y as f64 + 0.5);
                    !s.instances.iter().any(|i| clipdet::geometry::contains(&i.polygon, cx, cy))
                })
                .map(|(_, _, p)| p.0[0] as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            (mean, var)
        })
        .collect()
}

#[test]
fn toy_domains_have_separated_backgrounds() {
    let dir = tempfile::tempdir().unwrap();
    let (ra, rb) = (dir.path().join("a"), dir.path().join("b"));
    generate_toy_data(&ra, 20, 3, 64, Domain::A).unwrap();
    generate_toy_data(&rb, 20, 3, 64, Domain::B).unwrap();
    let (sa, sb) = (background_stats(&ra), background_stats(&rb));
    let min_a = sa.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let max_b = sb.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    assert!(min_a > max_b + 20.0, "means overlap: A min {min_a}, B max {max_b}");
    let var = |s: &[(f64, f64)]| s.iter().map(|v| v.1).sum::<f64>() / s.len() as f64;
    assert!(var(&sb) > 1.5 * var(&sa), "variances {} vs {}", var(&sa), var(&sb));
}

#[test]
fn fewshot_counts_on_two_hundred_images() {
    let dir = tempfile::tempdir().unwrap();
    let spec = generate_toy_data(&dir.path().join("big"), 200, 11, 32, Domain::A).unwrap();
    let ds = ingest_dataset(&spec).unwrap();
    let names = |d: &Dataset| d.samples.iter().map(|s| s.name.clone()).collect::<Vec<_>>();
    for (ratio, want) in [(0.1, 20), (0.3, 60), (0.5, 100), (1.0, 200)] {
        assert_eq!(fewshot_count(200, ratio).unwrap(), want);
        let a = subsample_fewshot(&ds, ratio, 5).unwrap();
        let b = subsample_fewshot(&ds, ratio, 5).unwrap();
        assert_eq!(a.len(), want);
        assert_eq!(names(&a), names(&b));
        if ratio < 1.0 {
            assert_ne!(names(&a), names(&subsample_fewshot(&ds, ratio, 6).unwrap()));
        } else {
            assert_eq!(names(&a), names(&ds));
        }
    }
    assert_eq!(fewshot_count(1000, 0.1).unwrap(), 100);
    assert!(subsample_fewshot(&ds, 0.001, 5).is_err());
}

fn tiny_experiment(root: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for kv in ["steps=3", "batch_size=2", "toy_count=3", "toy_size=32"] {
        cfg.apply_override(kv).unwrap();
    }
    cfg.toy.dir = root.join("toy");
    cfg.train_sets = vec![cfg.toy.dir.clone()];
    cfg.output_dir = root.join("run");
    cfg
}

#[test]
fn exported_maps_match_grid_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_experiment(dir.path());
    let spec = generate_toy_data(&cfg.toy.dir, 2, 1, 48, Domain::A).unwrap();
    let model = TcmModel::new(cfg.model.clone()).unwrap();
    let ck = dir.path().join("untrained.ckpt");
    save_model(&ck, &model, &cfg).unwrap();
    cfg.checkpoint = Some(ck);
    cfg.input = Some(spec.images_dir.join("toy_0000.png"));
    let out = export_maps(&cfg).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].grid, (6, 6));
    let maps_dir = cfg.output_dir.join("maps");
    for name in ["image_embedding", "visual_prompt", "score"] {
        let png = image::open(maps_dir.join(format!("toy_0000_{name}.png"))).unwrap();
        assert_eq!((png.width(), png.height()), (6, 6));
        let raw = checkpoint::read_array(&maps_dir.join(format!("toy_0000_{name}.bin"))).unwrap();
        assert_eq!(raw.shape(), &[6, 6]);
        if name == "visual_prompt" {
            assert!(raw.data().iter().all(|&v| v == 0.0), "untrained visual prompt must vanish");
        }
    }
    let t = Tensor::new(&[2, 3], vec![0.5, -1.0, 1e-300, f64::MAX, 0.0, 3.25]).unwrap();
    let p = dir.path().join("t.bin");
    checkpoint::write_array(&p, &t).unwrap();
    assert_eq!(checkpoint::read_array(&p).unwrap(), t);
}

#[test]
fn trained_checkpoint_reloads_to_identical_maps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_experiment(dir.path());
    let spec = generate_toy_data(&cfg.toy.dir, 3, 2, 32, Domain::B).unwrap();
    let outcome = run_experiment(&cfg).unwrap();
    let (loaded, loaded_cfg, manifest) = load_model(&outcome.checkpoint).unwrap();
    assert_eq!(loaded_cfg.train.steps, 3);
    assert_eq!(manifest.tensors.len(), loaded.store.len());

    let mut model = TcmModel::new(cfg.model.clone()).unwrap();
    let data = prepare(&ingest_dataset(&spec).unwrap(), model.stride()).unwrap();
    train(&mut model, &data, &cfg.train, cfg.factors()).unwrap();
    let (a, b) = (model.maps(&data[0].image).unwrap(), loaded.maps(&data[0].image).unwrap());
    assert_eq!(a.prob, b.prob);
    assert_eq!(a.fused.data(), b.fused.data());
    assert_eq!(a.score, b.score);
}

#[test]
fn failed_run_leaves_failed_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_experiment(dir.path());
    cfg.train_sets = vec![dir.path().join("missing")];
    let err = run_experiment(&cfg).unwrap_err();
    assert!(matches!(err, Error::NotFound(_)));
    let text = fs::read_to_string(cfg.output_dir.join("manifest.json")).unwrap();
    let m: RunManifest = serde_json::from_str(&text).unwrap();
    assert_eq!(m.status, "failed");
    assert_eq!(m.error.unwrap().kind, "not_found");
}

#[test]
fn lambda_zero_leg_drops_auxiliary_term() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_experiment(dir.path());
    cfg.apply_override("lambda=0").unwrap();
    let spec = generate_toy_data(&cfg.toy.dir, 2, 4, 32, Domain::A).unwrap();
    let model = TcmModel::new(cfg.model.clone()).unwrap();
    let data = prepare(&ingest_dataset(&spec).unwrap(), model.stride()).unwrap();
    let (v, _) = model.gradients(&data[0].image, &data[0].targets).unwrap();
    assert!(v.aux.unwrap() > 0.0);
    assert_eq!(v.total, v.det);
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.legs.len(), 1);
    assert_eq!(out.legs[0].report.config["lambda"], "0");
}

#[test]
fn baseline_has_no_text_branch_parameters() {
    let mut cfg = ExperimentConfig::default();
    cfg.model.toggles = Toggles::NONE;
    let m = TcmModel::new(cfg.model.clone()).unwrap();
    let c = m.param_count();
    assert_eq!(c.total(), c.image_encoder + c.head);
    assert_eq!(m.store.len(), m.store.ids_with_prefix("image_encoder.").count() + m.store.ids_with_prefix("head.").count());
}

#[test]
fn augmented_training_is_toy_only_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_experiment(dir.path());
    cfg.apply_override("augment=true").unwrap();
    cfg.validate().unwrap();
    let spec = generate_toy_data(&cfg.toy.dir, 3, 6, 32, Domain::A).unwrap();
    let data = prepare(&ingest_dataset(&spec).unwrap(), 8).unwrap();
    let run = || {
        let mut m = TcmModel::new(cfg.model.clone()).unwrap();
        let log = train(&mut m, &data, &cfg.train, cfg.factors()).unwrap();
        (log, m.maps(&data[0].image).unwrap().prob)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a.final_loss.to_bits(), b.final_loss.to_bits());
    assert_eq!(pa, pb);
    let mut plain = cfg.clone();
    plain.apply_override("augment=false").unwrap();
    let mut m = TcmModel::new(plain.model.clone()).unwrap();
    let c = train(&mut m, &data, &plain.train, plain.factors()).unwrap();
    assert_ne!(a.final_loss.to_bits(), c.final_loss.to_bits());

    cfg.model.encoder.toy_mode = false;
    assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
}
