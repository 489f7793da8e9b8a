use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BinaryMask, Episode, FoldSpec, SegDataset, SupportPair};
use crate::{Error, Result};

/// Extra draws allowed after an infeasible one before sampling gives up.
pub const SAMPLING_RETRY_BUDGET: usize = 100;

/// Draws one episode: a query uniformly over the corpus, a class uniformly
/// over the classes in its raster, then `k` distinct other images that
/// contain that class. Masks are binarized to the chosen class.
pub fn sample_episode<R: Rng + ?Sized>(dataset: &SegDataset, k: usize, rng: &mut R) -> Result<Episode> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Sampling {
            attempts: 0,
            reason: "empty dataset".into(),
        });
    }
    for _ in 0..=SAMPLING_RETRY_BUDGET {
        let query = rng.random_range(0..dataset.len());
        let classes = dataset.classes_in(query);
        if classes.is_empty() {
            continue;
        }
        let class_id = classes[rng.random_range(0..classes.len())];
        let others: Vec<usize> = dataset
            .carriers(class_id)
            .iter()
            .copied()
            .filter(|&i| i != query)
            .collect();
        if others.len() < k {
            continue;
        }
        let picks = index::sample(rng, others.len(), k);
        let support = picks
            .iter()
            .map(|p| {
                let i = others[p];
                let s = dataset.sample(i);
                SupportPair {
                    image_index: i,
                    image: s.image.clone(),
                    mask: BinaryMask::from_labels(&s.labels, class_id),
                }
            })
            .collect();
        let q = dataset.sample(query);
        return Ok(Episode {
            class_id,
            query_index: query,
            query_image: q.image.clone(),
            query_mask: BinaryMask::from_labels(&q.labels, class_id),
            support,
        });
    }
    Err(Error::Sampling {
        attempts: SAMPLING_RETRY_BUDGET + 1,
        reason: format!("no drawn class had {} other carrier images", k),
    })
}

/// `n` episodes drawn from a ChaCha8 stream seeded with `seed`. The dataset
/// must already be remapped to the fold's test labels.
pub fn benchmark_set(dataset: &SegDataset, fold: &FoldSpec, n: usize, k: usize, seed: u64) -> Result<Vec<Episode>> {
    if let Some(bad) = dataset
        .present_classes()
        .into_iter()
        .find(|c| !fold.test_labels.contains(c))
    {
        return Err(Error::Dataset(format!(
            "benchmark dataset still contains class {bad}, which is not a test label of fold {}",
            fold.fold_index
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_episode(dataset, k, &mut rng)).collect()
}

/// One line per episode: `query_id<TAB>class_id<TAB>support_id,support_id,…`.
pub fn manifest_text(dataset: &SegDataset, episodes: &[Episode]) -> String {
    let mut out = String::new();
    for e in episodes {
        let supports: Vec<&str> = e
            .support
            .iter()
            .map(|s| dataset.sample(s.image_index).id.as_str())
            .collect();
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            dataset.sample(e.query_index).id,
            e.class_id,
            supports.join(",")
        ));
    }
    out
}

/// Rebuilds episodes recorded by [`manifest_text`].
pub fn episodes_from_manifest(dataset: &SegDataset, text: &str) -> Result<Vec<Episode>> {
    let lookup = |id: &str, line: usize| {
        dataset
            .index_of(id)
            .ok_or_else(|| Error::Dataset(format!("manifest line {line}: unknown sample `{id}`")))
    };
    let mut episodes = Vec::new();
    for (n, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [query, class, supports] = fields[..] else {
            return Err(Error::Dataset(format!("manifest line {n}: expected 3 fields")));
        };
        let class_id: u8 = class
            .parse()
            .map_err(|_| Error::Dataset(format!("manifest line {n}: bad class `{class}`")))?;
        let qi = lookup(query, n)?;
        let q = dataset.sample(qi);
        let support = supports
            .split(',')
            .map(|id| {
                let i = lookup(id, n)?;
                let s = dataset.sample(i);
                Ok(SupportPair {
                    image_index: i,
                    image: s.image.clone(),
                    mask: BinaryMask::from_labels(&s.labels, class_id),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let e = Episode {
            class_id,
            query_index: qi,
            query_image: q.image.clone(),
            query_mask: BinaryMask::from_labels(&q.labels, class_id),
            support,
        };
        e.validate()?;
        episodes.push(e);
    }
    Ok(episodes)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::dataset::{build_folds, Catalog, GrayImage, RgbImage, Sample};

    fn single_class(n: usize, class_of: impl Fn(usize) -> u8, classes: u8) -> SegDataset {
        let samples = (0..n)
            .map(|i| Sample {
                id: format!("{i:04}"),
                image: Arc::new(RgbImage::from_pixel(4, 4, image::Rgb([i as u8, 0, 0]))),
                labels: Arc::new(GrayImage::from_fn(4, 4, |x, _| {
                    image::Luma([if x < 2 { class_of(i) } else { 0 }])
                })),
            })
            .collect();
        let catalog = Catalog::new((1..=classes).map(|c| (c, format!("c{c}")))).unwrap();
        SegDataset::new(samples, catalog).unwrap()
    }

    #[test]
    fn two_images_force_the_other_as_support() {
        let ds = single_class(2, |_| 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let e = sample_episode(&ds, 1, &mut rng).unwrap();
            assert_eq!(e.support[0].image_index, 1 - e.query_index);
            e.validate().unwrap();
        }
    }

    #[test]
    fn infeasible_k_fails_after_budget() {
        let ds = single_class(2, |_| 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        match sample_episode(&ds, 2, &mut rng) {
            Err(Error::Sampling { attempts, .. }) => assert_eq!(attempts, SAMPLING_RETRY_BUDGET + 1),
            other => panic!("expected sampling failure, got {other:?}"),
        }
    }

    #[test]
    fn query_classes_are_uniform_on_balanced_data() {
        let ds = single_class(50, |i| (i % 5) as u8 + 1, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 5];
        let n = 10_000;
        for _ in 0..n {
            let e = sample_episode(&ds, 1, &mut rng).unwrap();
            counts[e.class_id as usize - 1] += 1;
        }
        let expected = n as f64 / 5.0;
        for c in counts {
            assert!((c as f64 - expected).abs() <= 0.05 * expected, "{counts:?}");
        }
    }

    #[test]
    fn benchmark_is_reproducible_and_replayable() {
        let ds = single_class(30, |i| (i % 2) as u8 + 1, 2);
        let fold = build_folds(2, 2, 0).unwrap();
        let a = benchmark_set(&ds, &fold, 40, 3, 11).unwrap();
        let b = benchmark_set(&ds, &fold, 40, 3, 11).unwrap();
        assert_eq!(a, b);
        assert!(benchmark_set(&ds, &fold, 0, 1, 11).unwrap().is_empty());
        let replay = episodes_from_manifest(&ds, &manifest_text(&ds, &a)).unwrap();
        assert_eq!(replay, a);
    }

    #[test]
    fn benchmark_rejects_unremapped_data() {
        let ds = single_class(10, |i| (i % 2) as u8 + 1, 2);
        let fold = build_folds(2, 1, 0).unwrap();
        assert!(benchmark_set(&ds, &fold, 5, 1, 0).is_err());
    }
}
