use fsdet::datasets::{generate_synthetic, make_split, Dataset, DatasetSpec, SplitSpec};
use fsdet::detector::{evaluate, fine_tune, finetune_set, train_base, Checkpoint, DetectOptions, DetectorConfig, FinetuneSet, Phase};
use fsdet::params::Group;
use fsdet::Error;

fn micro() -> DetectorConfig {
    let mut c = DetectorConfig::micro();
    c.base.epochs = 1;
    c.finetune.epochs = 1;
    c
}

fn data(images: usize, seed: u64, base_only: bool) -> (Dataset, SplitSpec) {
    let mut spec = DatasetSpec {
        images,
        image_size: 64,
        object_size: [10.0, 24.0],
        ..DatasetSpec::default()
    };
    let split = make_split(&spec.class_names(), "synthetic").unwrap();
    if base_only {
        spec.allowed_classes = Some(split.base.clone());
    }
    (generate_synthetic(&spec, seed).unwrap(), split)
}

fn snapshot(c: &Checkpoint, group: Group) -> Vec<(String, Vec<f64>)> {
    c.detector
        .store
        .iter()
        .filter(|(_, p)| p.group == group)
        .map(|(_, p)| (p.name.clone(), p.value.data().to_vec()))
        .collect()
}

#[test]
fn two_phase_training_freezes_the_backbone() {
    let (base, split) = data(6, 1, true);
    let (pool, _) = data(80, 2, false);
    let mut steps = 0;
    let ckpt = train_base(&base, &split, micro(), 0, |r, _| {
        assert_eq!(r.phase, Phase::Base);
        assert!(r.loss.total.is_finite());
        steps += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(ckpt.steps, steps);
    assert_eq!(ckpt.phase, Phase::Base);

    let set = finetune_set(&pool, &split, FinetuneSet::Balanced, 1, 5).unwrap();
    let ft = fine_tune(&ckpt, &set, &split, 5, |_, _| Ok(())).unwrap();
    assert_eq!(ft.phase, Phase::Finetuned);
    assert_eq!(snapshot(&ft, Group::Backbone), snapshot(&ckpt, Group::Backbone));
    assert_ne!(snapshot(&ft, Group::Neck), snapshot(&ckpt, Group::Neck));
    assert_eq!(ft.detector.layout.bound.len(), split.novel.len());

    let again = fine_tune(&ft, &set, &split, 5, |_, _| Ok(())).unwrap_err();
    assert!(matches!(again, Error::Protocol(_)));
}

#[test]
fn base_training_rejects_novel_instances() {
    let (mixed, split) = data(10, 3, false);
    let e = train_base(&mixed, &split, micro(), 0, |_, _| Ok(())).unwrap_err();
    assert!(matches!(e, Error::Protocol(_)), "{e}");
}

#[test]
fn runs_are_reproducible_and_checkpoints_round_trip() {
    let (base, split) = data(4, 1, true);
    let (test, _) = data(4, 9, false);
    let a = train_base(&base, &split, micro(), 7, |_, _| Ok(())).unwrap();
    let b = train_base(&base, &split, micro(), 7, |_, _| Ok(())).unwrap();
    let bytes = a.to_bytes().unwrap();
    assert_eq!(bytes, b.to_bytes().unwrap());

    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("c.fsd");
    a.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let opts = DetectOptions::default();
    let r1 = evaluate(&a, &test, &split, None, 0, &opts).unwrap();
    let r2 = evaluate(&back, &test, &split, None, 0, &opts).unwrap();
    assert_eq!(r1.to_json().unwrap(), r2.to_json().unwrap());
}

#[test]
fn corrupt_checkpoint_is_an_error() {
    let (base, split) = data(2, 1, true);
    let mut c = micro();
    c.base.epochs = 1;
    let ckpt = train_base(&base, &split, c, 0, |_, _| Ok(())).unwrap();
    let mut bytes = ckpt.to_bytes().unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 0xff;
    assert!(Checkpoint::from_bytes(&bytes).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..n / 3]).is_err());
}
