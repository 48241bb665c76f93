use std::path::Path;

use psmm::datasyn::{synth_dataset, SynthConfig};
use psmm::diffcore::{Gradients, ParamStore, Tensor};
use psmm::netgraph::{BackboneSpec, BranchMode, FusionVariant, NetConfig, SampleInput};
use psmm::protocols::ManifestEntry;
use psmm::trainer::{
    adam_step, train, AdamConfig, AdamState, AugmentConfig, Dataset, GeoTransform, Model, SlotMap, TrainConfig,
    TrainError, TrainOutput,
};
use psmm::Modality;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus(dir: &Path) -> Vec<ManifestEntry> {
    let cfg = SynthConfig {
        subjects_per_ethnicity: 5,
        frame_size: 16,
        clip_len: 8,
        ..SynthConfig::default()
    };
    synth_dataset(&cfg, dir, false, None).unwrap()
}

fn net(mods: Vec<Modality>, variant: FusionVariant) -> NetConfig {
    NetConfig {
        spec: BackboneSpec::tiny(),
        variant,
        modalities: mods,
        branches: BranchMode::Both,
    }
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr: 1e-3,
        decay_epochs: vec![],
        batch_size: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn adam_constant_gradient_approaches_lr_sign() {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::vector(vec![0.0, 0.0])).unwrap();
    let mut g = Gradients::zeros_like(&p);
    *g.by_index_mut(0) = Tensor::vector(vec![0.7, -2.5]);
    let mut st = AdamState::new(&p);
    let lr = 1e-3;
    let mut prev = p.get("w").unwrap().clone();
    for _ in 0..10_000 {
        adam_step(&mut p, &g, &mut st, lr, &AdamConfig::default()).unwrap();
        let cur = p.get("w").unwrap().clone();
        let step: Vec<f64> = cur.data().iter().zip(prev.data()).map(|(a, b)| a - b).collect();
        prev = cur;
        if st.step == 10_000 {
            assert!((step[0] + lr).abs() < 1e-3 * lr, "{step:?}");
            assert!((step[1] - lr).abs() < 1e-3 * lr, "{step:?}");
        }
    }
    // zero gradient: parameters unchanged, moments decay
    let mut zero = Gradients::zeros_like(&p);
    *zero.by_index_mut(0) = Tensor::vector(vec![0.0, 0.0]);
    let mut fresh = AdamState::new(&p);
    let before = p.clone();
    adam_step(&mut p, &zero, &mut fresh, lr, &AdamConfig::default()).unwrap();
    assert_eq!(p, before);
}

#[test]
fn augmentation_moves_static_and_dynamic_together() {
    let n = 12;
    let coords = |axis: usize| {
        Tensor::new(
            vec![1, n, n],
            (0..n * n).map(|i| if axis == 0 { (i % n) as f64 } else { (i / n) as f64 }).collect(),
        )
        .unwrap()
    };
    let (xs, ys) = (coords(0), coords(1));
    let cfg = AugmentConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let aug = cfg.sample(&mut rng);
        let (sx, dx) = aug.apply_pair(Modality::Depth, &xs, &xs);
        assert_eq!(sx, dx);
        let (sy, _) = aug.apply_pair(Modality::Depth, &ys, &ys);
        for y in 0..n {
            for x in 0..n {
                let nx = (x as f64 + 0.5) / n as f64 * 2.0 - 1.0;
                let ny = (y as f64 + 0.5) / n as f64 * 2.0 - 1.0;
                let (u, v) = aug.geo.source_of(nx, ny);
                let (px, py) = ((u + 1.0) / 2.0 * n as f64 - 0.5, (v + 1.0) / 2.0 * n as f64 - 0.5);
                // interior samples reproduce the mapped coordinate exactly
                if px >= 0.0 && py >= 0.0 && px <= (n - 1) as f64 - 1e-9 && py <= (n - 1) as f64 - 1e-9 {
                    assert!((sx.data()[y * n + x] - px).abs() < 1e-9);
                    assert!((sy.data()[y * n + x] - py).abs() < 1e-9);
                }
            }
        }
    }
    // colour jitter touches only the RGB static image
    let rgb = Tensor::filled(&[3, 4, 4], 0.5);
    let aug = psmm::trainer::Augmentation {
        geo: GeoTransform::IDENTITY,
        brightness: 0.1,
        contrast: 0.0,
    };
    let (s, d) = aug.apply_pair(Modality::Color, &rgb, &rgb);
    assert!(s.data().iter().all(|&v| (v - 0.6).abs() < 1e-12));
    assert_eq!(d, rgb);
    let grey = Tensor::filled(&[1, 4, 4], 0.5);
    assert_eq!(aug.apply_pair(Modality::Ir, &grey, &grey).0, grey);
}

#[test]
fn overfits_a_single_repeated_sample() {
    let dir = tempfile::tempdir().unwrap();
    let entries = corpus(dir.path());
    let one: Vec<ManifestEntry> = entries
        .iter()
        .filter(|e| e.modality == Modality::Depth && e.subject_id == 1)
        .take(1)
        .cloned()
        .collect();
    let data = Dataset::load(dir.path(), &one, &SlotMap::identity(&[Modality::Depth]), 16, 7).unwrap();
    let model = Model::init(net(vec![Modality::Depth], FusionVariant::SdnetOnly), 3).unwrap();
    let cfg = TrainConfig {
        batch_size: 1,
        augment: AugmentConfig::none(),
        ..quick(200)
    };
    let out = train(model, &data, None, &cfg, &TrainOutput::default()).unwrap();
    let first = out.logs[0].loss.total;
    assert!((first - 4.0 * std::f64::consts::LN_2).abs() < 1e-12, "{first}");
    let below = out.logs.iter().position(|l| l.loss.total < 1e-2);
    assert!(below.is_some(), "final loss {}", out.logs.last().unwrap().loss.total);
}

#[test]
fn same_seed_same_run_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let entries = corpus(dir.path());
    let train_entries: Vec<_> = entries.iter().filter(|e| e.subject_id <= 2).cloned().collect();
    let data = Dataset::load(dir.path(), &train_entries, &SlotMap::identity(&Modality::ALL), 16, 7).unwrap();
    let run = |out: &Path, deterministic: bool| {
        let model = Model::init(net(Modality::ALL.to_vec(), FusionVariant::Psmm), 9).unwrap();
        let cfg = TrainConfig {
            deterministic,
            ..quick(2)
        };
        let o = TrainOutput {
            dir: Some(out.to_path_buf()),
            header: Some("run=test".into()),
        };
        train(model, &data, Some(&data), &cfg, &o).unwrap()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run(a.path(), true);
    let rb = run(b.path(), true);
    assert_eq!(ra.logs[0].loss.total.to_bits(), rb.logs[0].loss.total.to_bits());
    assert!((ra.logs[0].loss.total - 13.0 * std::f64::consts::LN_2).abs() < 1.0);
    for f in ["model.ckpt", "epoch_001.ckpt", "epoch_002.ckpt", "model.cfg"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let log = std::fs::read_to_string(a.path().join("train_log.jsonl")).unwrap();
    assert!(log.starts_with("# run=test\n"));
    assert_eq!(log.lines().count(), 3);
    assert!(log.contains("\"groups\""));
    let loaded = Model::load_dir(a.path()).unwrap();
    assert_eq!(loaded.params, ra.model.params);
    let set = loaded.score_dataset(&data, Some("t")).unwrap();
    assert_eq!(set, ra.model.score_dataset(&data, Some("t")).unwrap());
    assert!(set.entries.iter().all(|e| (0.0..=1.0).contains(&e.score)));
}

#[test]
fn non_finite_loss_aborts_and_keeps_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let entries = corpus(dir.path());
    let one: Vec<ManifestEntry> = entries
        .iter()
        .filter(|e| e.modality == Modality::Depth && e.subject_id == 1)
        .take(1)
        .cloned()
        .collect();
    let clean = Dataset::load(dir.path(), &one, &SlotMap::identity(&[Modality::Depth]), 16, 7).unwrap();
    let mut poisoned = clean.clone();
    let clip = poisoned.recordings[0].clips.get_mut(&Modality::Depth).unwrap();
    clip.frames[5] = clip.frames[5].map(|_| f64::NAN);
    // find a seed whose first sampled frame is clean but a later one is not
    let mut seen = false;
    for seed in 0..40 {
        let out = tempfile::tempdir().unwrap();
        let model = Model::init(net(vec![Modality::Depth], FusionVariant::SdnetOnly), 0).unwrap();
        let cfg = TrainConfig {
            seed,
            batch_size: 1,
            ..quick(8)
        };
        let o = TrainOutput {
            dir: Some(out.path().to_path_buf()),
            header: None,
        };
        match train(model, &poisoned, None, &cfg, &o) {
            Err(TrainError::NonFiniteLoss { epoch, last_good, .. }) if epoch > 0 => {
                let path = last_good.unwrap();
                assert_eq!(path, out.path().join(format!("epoch_{epoch:03}.ckpt")));
                assert!(psmm::diffcore::load_checkpoint(&path).unwrap().iter().all(|(_, t)| t.is_finite()));
                assert!(!out.path().join(format!("epoch_{:03}.ckpt", epoch + 1)).exists());
                seen = true;
                break;
            }
            Err(TrainError::NonFiniteLoss { last_good, .. }) => assert!(last_good.is_none()),
            other => assert!(other.is_ok(), "{other:?}"),
        }
    }
    assert!(seen);
}

#[test]
fn missing_modality_is_an_error() {
    let model = Model::init(net(Modality::ALL.to_vec(), FusionVariant::Psmm), 0).unwrap();
    let z = Tensor::zeros(&[1, 16, 16]);
    let input = SampleInput::new().with(Modality::Depth, z.clone(), z);
    assert!(model.score(&input).is_err());
}
