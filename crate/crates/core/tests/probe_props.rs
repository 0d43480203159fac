use catssl::probe::{
    accuracy, average_precision, mean_average_precision, train_probe, ProbeConfig,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

#[test]
fn shuffled_labels_give_chance_accuracy() {
    // 40 trials x 20 test samples; the standard error of the mean at p = 0.25 is about 0.015.
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let trials = 40;
    let cfg = ProbeConfig {
        epochs: 100,
        lr: 0.5,
        seed: 0,
    };
    let mut total = 0.0;
    for _ in 0..trials {
        let x = gaussian(&mut rng, 80, 8);
        let mut y: Vec<usize> = (0..80).map(|i| i % 4).collect();
        y.shuffle(&mut rng);
        let head = train_probe(&x[..60], &y[..60], 4, &cfg).unwrap();
        total += accuracy(&head, &x[60..], &y[60..]).unwrap();
    }
    let mean = total / trials as f64;
    assert!((mean - 0.25).abs() <= 0.06, "mean shuffled accuracy {mean}");
}

#[test]
fn zero_epochs_is_the_seeded_random_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = gaussian(&mut rng, 20, 5);
    let y: Vec<usize> = (0..20).map(|i| i % 3).collect();
    let cfg = ProbeConfig {
        epochs: 0,
        lr: 0.5,
        seed: 9,
    };
    let a = train_probe(&x, &y, 3, &cfg).unwrap();
    let b = train_probe(&x, &y, 3, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.bias.iter().all(|&v| v == 0.0));
    assert!(a.weight.iter().all(|v| v.abs() < 0.1));
}

#[test]
fn random_scores_sit_near_the_positive_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, draws, rate) = (200, 200, 0.3);
    let mut sum = 0.0;
    for _ in 0..draws {
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(rate)).collect();
        if !labels.contains(&true) {
            continue;
        }
        let scores: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        sum += average_precision(&scores, &labels).unwrap();
    }
    let mean = sum / draws as f64;
    assert!((mean - rate).abs() < 0.05, "mean AP {mean}");
}

#[test]
fn perfect_ranking_is_one() {
    let scores = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.7, 0.3]];
    let labels = vec![vec![true, false], vec![false, true], vec![true, false]];
    assert_eq!(mean_average_precision(&scores, &labels).unwrap().map, 1.0);
}

proptest! {
    #[test]
    fn ap_is_invariant_under_monotone_maps(
        scores in prop::collection::vec(-10.0f64..10.0, 2..30),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<bool> = scores.iter().map(|_| rng.gen_bool(0.4)).collect();
        labels[0] = true;
        let mapped: Vec<f64> = scores.iter().map(|s| (s * 0.3).exp() * 2.0 + 1.0).collect();
        prop_assert_eq!(average_precision(&scores, &labels), average_precision(&mapped, &labels));
    }

    #[test]
    fn accuracy_counts_partition_the_set(seed in any::<u64>(), n in 4usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian(&mut rng, n, 3);
        let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let head = train_probe(&x, &y, 2, &ProbeConfig { epochs: 5, lr: 0.5, seed }).unwrap();
        let correct = x.iter().zip(&y).filter(|(f, &l)| head.predict(f) == l).count();
        let acc = accuracy(&head, &x, &y).unwrap();
        prop_assert_eq!(acc, correct as f64 / n as f64);
    }
}
