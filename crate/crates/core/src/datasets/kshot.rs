//! Instance-level K-shot sampling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

/// Visits images in a seeded random order and takes every image holding a
/// requested class that still has fewer than `k` instances. Inside a taken
/// image, instances are kept while their class is below `k`; surplus
/// instances and instances of other classes are kept as ignore regions.
pub fn sample_k_shot(dataset: &Dataset, classes: &[usize], k: usize, seed: u64) -> Result<Dataset> {
    if k == 0 {
        return Err(Error::invalid("sample_k_shot", "K must be at least 1"));
    }
    let n = dataset.classes.len();
    if let Some(&c) = classes.iter().find(|&&c| c >= n) {
        return Err(Error::invalid("sample_k_shot", format!("class id {c} not in a catalogue of {n}")));
    }
    let available = dataset.class_counts();
    if classes.iter().any(|&c| available[c] < k) {
        let counts = classes
            .iter()
            .map(|&c| format!("{}={}", dataset.classes[c], available[c]))
            .collect::<Vec<_>>()
            .join(", ");
        return Err(Error::InsufficientInstances { k, counts });
    }

    let mut wanted = vec![false; n];
    for &c in classes {
        wanted[c] = true;
    }
    let mut order: Vec<usize> = (0..dataset.images.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut taken = vec![0usize; n];
    let mut images = Vec::new();
    for i in order {
        if classes.iter().all(|&c| taken[c] == k) {
            break;
        }
        let img = &dataset.images[i];
        if !img.targets().any(|a| wanted[a.class] && taken[a.class] < k) {
            continue;
        }
        let mut img = img.clone();
        for a in &mut img.annotations {
            if !a.ignore && wanted[a.class] && taken[a.class] < k {
                taken[a.class] += 1;
            } else {
                a.ignore = true;
            }
        }
        images.push(img);
    }
    Ok(Dataset {
        classes: dataset.classes.clone(),
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BBox;
    use crate::datasets::{AnnotatedImage, Annotation};

    fn toy(per_image: &[&[usize]]) -> Dataset {
        Dataset {
            classes: vec!["a".into(), "b".into(), "c".into()],
            images: per_image
                .iter()
                .enumerate()
                .map(|(i, cls)| AnnotatedImage {
                    id: format!("i{i}"),
                    width: 8,
                    height: 8,
                    pixels: vec![0; 8 * 8 * 3],
                    annotations: cls
                        .iter()
                        .map(|&c| Annotation {
                            bbox: BBox::raw(0.0, 0.0, 4.0, 4.0),
                            class: c,
                            ignore: false,
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn single_object_images() {
        let lists: Vec<Vec<usize>> = (0..30).map(|i| vec![i % 3]).collect();
        let refs: Vec<&[usize]> = lists.iter().map(|v| v.as_slice()).collect();
        let d = toy(&refs);
        let s = sample_k_shot(&d, &[0, 1], 3, 1).unwrap();
        assert_eq!(s.images.len(), 6);
        assert_eq!(s.class_counts(), vec![3, 3, 0]);
    }

    #[test]
    fn insufficient_reports_counts() {
        let d = toy(&[&[0], &[0], &[1]]);
        let err = sample_k_shot(&d, &[0, 1], 2, 0).unwrap_err().to_string();
        assert!(err.contains("a=2") && err.contains("b=1"), "{err}");
    }

    #[test]
    fn deterministic() {
        let lists: Vec<Vec<usize>> = (0..40).map(|i| vec![i % 3, (i / 3) % 3, 1]).collect();
        let refs: Vec<&[usize]> = lists.iter().map(|v| v.as_slice()).collect();
        let d = toy(&refs);
        let a = sample_k_shot(&d, &[0, 2], 5, 9).unwrap();
        assert_eq!(a, sample_k_shot(&d, &[0, 2], 5, 9).unwrap());
        assert_eq!(a.class_counts(), vec![5, 0, 5]);
    }
}
