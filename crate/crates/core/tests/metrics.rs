use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use ssmnet::metrics::*;
use ssmnet::Tensor;

/// Direct transcription of the silhouette definition.
fn silhouette_oracle(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = points.len();
    let dist = |i: usize, j: usize| -> f64 {
        points[i].iter().zip(&points[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    let k = labels.iter().max().unwrap() + 1;
    let mut s = 0.0;
    for i in 0..n {
        let same: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if same.is_empty() {
            continue;
        }
        let a = same.iter().map(|&j| dist(i, j)).sum::<f64>() / same.len() as f64;
        let mut b = f64::INFINITY;
        for c in 0..k {
            if c == labels[i] {
                continue;
            }
            let members: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
            if members.is_empty() {
                continue;
            }
            b = b.min(members.iter().map(|&j| dist(i, j)).sum::<f64>() / members.len() as f64);
        }
        if a.max(b) > 0.0 {
            s += (b - a) / a.max(b);
        }
    }
    s / n as f64
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
    let n = rng.gen_range(2..=64);
    let d = rng.gen_range(1..=5);
    let k = rng.gen_range(2..=n.min(6));
    let points = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
    let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    labels[0] = 0;
    labels[1] = 1;
    (points, labels)
}

fn tensor(points: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(points).unwrap()
}

#[test]
fn silhouette_matches_direct_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..100 {
        let (p, l) = random_instance(&mut rng);
        let s = silhouette(&tensor(&p), &l).unwrap();
        assert!((-1.0..=1.0).contains(&s));
        assert!((s - silhouette_oracle(&p, &l)).abs() <= 1e-9);
    }
}

#[test]
fn silhouette_invariances() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let n = rng.gen_range(4..30);
        let p: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
        let l: Vec<usize> = (0..n).map(|i| if i < 2 { i } else { rng.gen_range(0..3) }).collect();
        let base = silhouette(&tensor(&p), &l).unwrap();

        let theta: f64 = rng.gen_range(0.0..6.28);
        let (s, c) = theta.sin_cos();
        let moved: Vec<Vec<f64>> = p.iter().map(|q| vec![c * q[0] - s * q[1] + 4.0, s * q[0] + c * q[1] - 1.5]).collect();
        assert!((silhouette(&tensor(&moved), &l).unwrap() - base).abs() <= 1e-9);

        let perm = [2, 0, 1];
        let relabelled: Vec<usize> = l.iter().map(|&x| perm[x]).collect();
        assert_eq!(silhouette(&tensor(&p), &relabelled).unwrap().to_bits(), base.to_bits());
    }
}

#[test]
fn separated_blobs_recovered_for_many_seeds() {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for (c, centre) in [[0.0, 0.0], [10.0, 0.0]].iter().enumerate() {
            for _ in 0..25 {
                rows.push(vec![centre[0] + noise.sample(&mut rng), centre[1] + noise.sample(&mut rng)]);
                truth.push(c);
            }
        }
        let a = kmeans(&tensor(&rows), 2, seed, KMeansConfig::default()).unwrap();
        let flip = a.labels[0] != truth[0];
        for (l, t) in a.labels.iter().zip(&truth) {
            assert_eq!(if flip { 1 - l } else { *l }, *t, "seed {seed}");
        }
    }
}

#[test]
fn kmeans_is_seeded_and_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<Vec<f64>> = (0..80).map(|_| (0..4).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
    let p = tensor(&rows);
    let a = kmeans(&p, 5, 9, KMeansConfig::default()).unwrap();
    assert_eq!(a, kmeans(&p, 5, 9, KMeansConfig::default()).unwrap());
    assert!(a.inertia_history.windows(2).all(|w| w[1] <= w[0]));
    let inertia: f64 = (0..80)
        .map(|i| rows[i].iter().zip(a.centroids.row(a.labels[i])).map(|(x, c)| (x - c).powi(2)).sum::<f64>())
        .sum();
    assert!((inertia - a.inertia).abs() < 1e-9);
}

#[test]
fn confusion_matches_tally() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let truth: Vec<usize> = (0..100).map(|_| rng.gen_range(0..5)).collect();
    let pred: Vec<usize> = (0..100).map(|_| rng.gen_range(0..5)).collect();
    let cm = confusion(&pred, &truth, 5).unwrap();
    assert_eq!(cm.total(), 100);
    for c in 0..5 {
        assert_eq!(cm.row_sum(c), truth.iter().filter(|&&t| t == c).count() as u64);
        assert_eq!(cm.col_sum(c), pred.iter().filter(|&&p| p == c).count() as u64);
    }
    let correct = pred.iter().zip(&truth).filter(|(p, t)| p == t).count();
    assert_eq!(cm.accuracy(), correct as f64 / 100.0);
    assert_eq!(f1_scores(&cm).micro_f1, cm.accuracy());
}

#[test]
fn f1_matches_per_definition_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let n = rng.gen_range(0..60);
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..5)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..5)).collect();
        let f = f1_scores(&confusion(&pred, &truth, 5).unwrap());
        let mut sum = 0.0;
        for c in 0..5 {
            let tp = (0..n).filter(|&i| pred[i] == c && truth[i] == c).count() as f64;
            let fp = (0..n).filter(|&i| pred[i] == c && truth[i] != c).count() as f64;
            let fneg = (0..n).filter(|&i| pred[i] != c && truth[i] == c).count() as f64;
            let expected = if tp + fp == 0.0 || tp + fneg == 0.0 {
                0.0
            } else {
                let (p, r) = (tp / (tp + fp), tp / (tp + fneg));
                if p + r == 0.0 {
                    0.0
                } else {
                    2.0 * p * r / (p + r)
                }
            };
            assert!((f.per_class[c] - expected).abs() <= 1e-12);
            sum += expected;
        }
        assert!((f.macro_f1 - sum / 5.0).abs() <= 1e-12);
    }
}
