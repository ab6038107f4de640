//! N-way K-shot episode and Siamese pair sampling.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetManifest, SplitSection};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// A sampled task. `support` is ordered by (class, shot); `query` by (class, index).
/// Local label `l` refers to global class `classes[l]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

impl Episode {
    pub fn support_labels(&self) -> Vec<usize> {
        (0..self.way).flat_map(|c| std::iter::repeat(c).take(self.shot)).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        (0..self.way)
            .flat_map(|c| std::iter::repeat(c).take(self.queries_per_class))
            .collect()
    }

    /// Local label of a global class id, if the class is in the episode.
    pub fn local_label(&self, class_id: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class_id)
    }

    /// One-hot `[N·K, N]` support labels.
    pub fn support_one_hot<T: Element>(&self) -> Tensor<T> {
        one_hot(&self.support_labels(), self.way)
    }
}

pub fn one_hot<T: Element>(labels: &[usize], classes: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.set(&[i, l], T::one());
    }
    t
}

/// Sample `way` classes from `section` without replacement, then `shot + queries`
/// distinct records from each.
pub fn sample_episode<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    section: SplitSection,
    way: usize,
    shot: usize,
    queries: usize,
    rng: &mut R,
) -> Result<Episode> {
    if way == 0 || shot == 0 || queries == 0 {
        return Err(Error::invalid("sample_episode", format!("way, shot and queries must be positive ({way}/{shot}/{queries})")));
    }
    let pool = manifest.section_classes(section);
    if pool.len() < way {
        return Err(Error::Data(format!(
            "{} split has {} classes, episode needs {way}",
            section.name(),
            pool.len()
        )));
    }
    let per_class = shot + queries;
    if let Some(&c) = pool.iter().find(|&&c| manifest.records_of_class(c).len() < per_class) {
        return Err(Error::Data(format!(
            "class `{}` has {} records, episode needs {per_class}",
            manifest.classes[c],
            manifest.records_of_class(c).len()
        )));
    }
    let classes: Vec<usize> = sample(rng, pool.len(), way).into_iter().map(|i| pool[i]).collect();
    let mut support = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(way * queries);
    for &c in &classes {
        let records = manifest.records_of_class(c);
        let picked = sample(rng, records.len(), per_class);
        let picked: Vec<usize> = picked.into_iter().map(|i| records[i]).collect();
        support.extend_from_slice(&picked[..shot]);
        query.extend_from_slice(&picked[shot..]);
    }
    Ok(Episode {
        way,
        shot,
        queries_per_class: queries,
        classes,
        support,
        query,
    })
}

/// Labelled record pairs for contrastive training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairBatch {
    /// `(a, b, same)` with `same = 1` iff the records share a class.
    pub pairs: Vec<(usize, usize, u8)>,
    pub positive_fraction: f64,
}

impl PairBatch {
    pub fn positives(&self) -> usize {
        self.pairs.iter().filter(|p| p.2 == 1).count()
    }

    pub fn same_labels<T: Element>(&self) -> Tensor<T> {
        Tensor::new(&[self.pairs.len()], self.pairs.iter().map(|p| T::from_f64(p.2 as f64)).collect()).expect("sized")
    }
}

/// `round(batch · fraction)` positive pairs and the rest negative, shuffled.
/// No record is ever paired with itself.
pub fn sample_pairs<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    section: SplitSection,
    batch: usize,
    positive_fraction: f64,
    rng: &mut R,
) -> Result<PairBatch> {
    if !(0.0..=1.0).contains(&positive_fraction) {
        return Err(Error::invalid("sample_pairs", format!("positive fraction {positive_fraction} outside [0, 1]")));
    }
    let classes = manifest.section_classes(section);
    if classes.len() < 2 {
        return Err(Error::Data(format!(
            "{} split has {} classes, pair sampling needs 2",
            section.name(),
            classes.len()
        )));
    }
    let positives = (batch as f64 * positive_fraction).round() as usize;
    let multi: Vec<usize> = classes
        .iter()
        .copied()
        .filter(|&c| manifest.records_of_class(c).len() >= 2)
        .collect();
    if positives > 0 && multi.is_empty() {
        return Err(Error::Data("positive pairs requested but every class has a single record".into()));
    }
    let mut pairs = Vec::with_capacity(batch);
    for _ in 0..positives {
        let c = multi[rng.gen_range(0..multi.len())];
        let records = manifest.records_of_class(c);
        let ij = sample(rng, records.len(), 2);
        pairs.push((records[ij.index(0)], records[ij.index(1)], 1));
    }
    for _ in positives..batch {
        let ij = sample(rng, classes.len(), 2);
        let (ra, rb) = (
            manifest.records_of_class(classes[ij.index(0)]),
            manifest.records_of_class(classes[ij.index(1)]),
        );
        pairs.push((ra[rng.gen_range(0..ra.len())], rb[rng.gen_range(0..rb.len())], 0));
    }
    pairs.shuffle(rng);
    Ok(PairBatch {
        pairs,
        positive_fraction,
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted local label per query row of `predictions: [N·Q, N]`.
pub fn predicted_labels<T: Element>(predictions: &Tensor<T>, episode: &Episode) -> Result<Vec<usize>> {
    let expected = [episode.query.len(), episode.way];
    if predictions.shape() != expected {
        return Err(Error::shape("episode_accuracy", predictions.shape(), &expected));
    }
    Ok((0..expected[0]).map(|i| argmax(predictions.row(i))).collect())
}

/// Fraction of queries whose argmax matches the true local label.
pub fn episode_accuracy<T: Element>(predictions: &Tensor<T>, episode: &Episode) -> Result<f64> {
    let predicted = predicted_labels(predictions, episode)?;
    let correct = predicted.iter().zip(episode.query_labels()).filter(|(p, t)| **p == *t).count();
    Ok(correct as f64 / predicted.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{ClassSplit, ImageRecord};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn manifest(counts: &[usize]) -> DatasetManifest {
        let classes: Vec<String> = (0..counts.len()).map(|c| format!("c{c}")).collect();
        let mut records = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                records.push(ImageRecord {
                    path: format!("{c}/{i}").into(),
                    class_name: classes[c].clone(),
                    class_id: c,
                    variant: 0,
                });
            }
        }
        let split = ClassSplit {
            base: (0..counts.len()).collect(),
            ..Default::default()
        };
        DatasetManifest::new(records, classes, split, 8, vec![]).unwrap()
    }

    #[test]
    fn five_way_five_shot_shape() {
        let m = manifest(&[10; 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = sample_episode(&m, SplitSection::Base, 5, 5, 2, &mut rng).unwrap();
        assert_eq!((e.support.len(), e.query.len()), (25, 10));
        assert!(e.query_labels().iter().all(|&l| l < 5));
        for (i, &r) in e.support.iter().enumerate() {
            assert_eq!(e.local_label(m.records[r].class_id), Some(i / 5));
        }
        assert!(e.support.iter().all(|s| !e.query.contains(s)));
    }

    #[test]
    fn minimal_episode() {
        let m = manifest(&[2, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = sample_episode(&m, SplitSection::Base, 1, 1, 1, &mut rng).unwrap();
        assert_eq!(e.query_labels(), vec![0]);
    }

    #[test]
    fn insufficient_classes_or_records_report_counts() {
        let m = manifest(&[3, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_episode(&m, SplitSection::Base, 3, 1, 1, &mut rng).unwrap_err().to_string();
        assert!(err.contains('2') && err.contains('3'), "{err}");
        let err = sample_episode(&m, SplitSection::Base, 2, 2, 2, &mut rng).unwrap_err().to_string();
        assert!(err.contains("has 3") && err.contains("needs 4"), "{err}");
        assert!(sample_episode(&m, SplitSection::Test, 1, 1, 1, &mut rng).is_err());
    }

    #[test]
    fn pair_extremes_and_impossible_positives() {
        let m = manifest(&[4, 4, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let all_pos = sample_pairs(&m, SplitSection::Base, 20, 1.0, &mut rng).unwrap();
        assert!(all_pos.pairs.iter().all(|p| p.2 == 1));
        let all_neg = sample_pairs(&m, SplitSection::Base, 20, 0.0, &mut rng).unwrap();
        assert!(all_neg.pairs.iter().all(|p| p.2 == 0));
        let singles = manifest(&[1, 1, 1]);
        assert!(sample_pairs(&singles, SplitSection::Base, 4, 0.5, &mut rng).is_err());
        assert!(sample_pairs(&singles, SplitSection::Base, 4, 0.0, &mut rng).is_ok());
        assert!(sample_pairs(&manifest(&[5]), SplitSection::Base, 4, 0.5, &mut rng).is_err());
    }

    #[test]
    fn tie_break_to_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.2, 0.2]), 0);
        assert_eq!(argmax(&[0.1, 0.3, 0.3]), 1);
        let m = manifest(&[3; 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = sample_episode(&m, SplitSection::Base, 5, 1, 2, &mut rng).unwrap();
        let uniform = Tensor::<f64>::full(&[10, 5], 0.2);
        assert_eq!(episode_accuracy(&uniform, &e).unwrap(), 0.2);
        let perfect = one_hot::<f64>(&e.query_labels(), 5);
        assert_eq!(episode_accuracy(&perfect, &e).unwrap(), 1.0);
        assert!(episode_accuracy(&Tensor::<f64>::zeros(&[9, 5]), &e).is_err());
    }
}
