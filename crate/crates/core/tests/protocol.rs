use proptest::prelude::*;

use fsdet::datasets::{
    generate_synthetic, load_dataset, make_split, sample_k_shot, save_dataset, Dataset, DatasetSpec, DIOR_CLASSES,
    NWPU_CLASSES,
};

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn pool() -> Dataset {
    let spec = DatasetSpec {
        images: 300,
        image_size: 64,
        object_size: [10.0, 24.0],
        ..DatasetSpec::default()
    };
    generate_synthetic(&spec, 21).unwrap()
}

#[test]
fn named_splits_partition_the_catalogue() {
    let dior = names(&DIOR_CLASSES);
    for id in ["dior-1", "dior-2", "dior-3", "dior-4"] {
        let s = make_split(&dior, id).unwrap();
        assert_eq!(s.novel.len(), 5, "{id}");
        assert_eq!(s.base.len() + s.novel.len(), dior.len());
        assert!(s.base.iter().all(|c| !s.novel.contains(c)));
    }
    assert_eq!(
        make_split(&dior, "dior-1").unwrap().novel_names(&dior),
        ["baseball field", "basketball court", "bridge", "chimney", "ship"]
    );
    let nwpu = names(&NWPU_CLASSES);
    assert_eq!(
        make_split(&nwpu, "nwpu").unwrap().novel_names(&nwpu),
        ["airplane", "baseball diamond", "tennis court"]
    );
    assert!(make_split(&dior, "dior-5").is_err());
    assert!(make_split(&nwpu, "dior-1").is_err());
}

#[test]
fn k_shot_draw_is_exact() {
    let pool = pool();
    let classes: Vec<usize> = (0..pool.classes.len()).collect();
    for k in [1, 3, 5, 10, 20] {
        let set = sample_k_shot(&pool, &classes, k, 3).unwrap();
        assert!(set.class_counts().iter().all(|&c| c == k), "K={k}: {:?}", set.class_counts());
    }
    assert!(sample_k_shot(&pool, &classes, 10_000, 0).is_err());
}

#[test]
fn k_shot_is_seeded() {
    let pool = pool();
    let classes = [0, 7];
    let a = sample_k_shot(&pool, &classes, 5, 9).unwrap();
    let b = sample_k_shot(&pool, &classes, 5, 9).unwrap();
    let c = sample_k_shot(&pool, &classes, 5, 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn saved_dataset_is_byte_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        images: 6,
        ..DatasetSpec::default()
    };
    let d = generate_synthetic(&spec, 4).unwrap();
    save_dataset(&d, &tmp.path().join("a")).unwrap();
    let back = load_dataset(&tmp.path().join("a")).unwrap();
    assert_eq!(back, d);
    save_dataset(&back, &tmp.path().join("b")).unwrap();
    let read = |p: &str| std::fs::read(tmp.path().join(p).join("annotations.json")).unwrap();
    assert_eq!(read("a"), read("b"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn k_shot_never_exceeds_k(k in 1usize..6, seed: u64, mask in 1u8..=255) {
        let spec = DatasetSpec { images: 60, image_size: 64, object_size: [10.0, 24.0], ..DatasetSpec::default() };
        let pool = generate_synthetic(&spec, 8).unwrap();
        let classes: Vec<usize> = (0..8).filter(|c| mask & (1 << c) != 0).collect();
        let counts = pool.class_counts();
        match sample_k_shot(&pool, &classes, k, seed) {
            Ok(set) => {
                let got = set.class_counts();
                for c in 0..8 {
                    if classes.contains(&c) {
                        prop_assert_eq!(got[c], k);
                    } else {
                        prop_assert_eq!(got[c], 0);
                    }
                }
            }
            Err(_) => prop_assert!(classes.iter().any(|&c| counts[c] < k)),
        }
    }
}
