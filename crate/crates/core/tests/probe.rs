mod common;

use common::gaussian;
use common::gradcheck::{naive_loss, random_batch, random_model, relative_errors};
use docprobe::features::{Materialized, SequenceSet};
use docprobe::probe::{attention_pool, train, ProbeConfig, ProbeModel};
use ndarray::{Array1, Array2, ArrayView2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for instance in 0..25 {
        let d = rng.random_range(1..=8);
        let nhid = rng.random_range(1..=4);
        let c = rng.random_range(2..=3);
        let model = random_model(d, nhid, c, &mut rng);
        let batch = random_batch(d, c, &mut rng);
        let views: Vec<(ArrayView2<'_, f32>, usize)> = batch.iter().map(|(x, y)| (x.view(), *y)).collect();
        let (loss, _) = model.loss_and_grads(&views, None).unwrap();
        assert!((loss - naive_loss(&model, &batch)).abs() < 1e-10, "instance {instance}: loss");
        let errors = relative_errors(&model, &batch, 1e-4);
        assert!(errors.iter().all(|&e| e <= 1e-4), "instance {instance}: {errors:?}");
    }
}

#[test]
fn dropout_masks_enter_the_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = random_model(3, 4, 2, &mut rng);
    let batch = random_batch(3, 2, &mut rng);
    let views: Vec<(ArrayView2<'_, f32>, usize)> = batch.iter().map(|(x, y)| (x.view(), *y)).collect();
    let ones = Array2::<f64>::ones((batch.len(), 4));
    let (l0, g0) = model.loss_and_grads(&views, None).unwrap();
    let (l1, g1) = model.loss_and_grads(&views, Some(&ones)).unwrap();
    assert_eq!(l0, l1);
    assert_eq!(g0, g1);
    let mut mask = ones.clone();
    mask.column_mut(0).fill(0.0);
    let (_, g2) = model.loss_and_grads(&views, Some(&mask)).unwrap();
    assert!(g2.w2.row(0).iter().all(|&v| v == 0.0));
}

fn matrix_strategy() -> impl Strategy<Value = Array2<f32>> {
    (1usize..6, 1usize..6).prop_flat_map(|(t, d)| {
        prop::collection::vec(-10.0f32..10.0, t * d).prop_map(move |v| Array2::from_shape_vec((t, d), v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn pooled_vector_lies_in_row_hull(x in matrix_strategy(), qs in prop::collection::vec(-3.0f64..3.0, 5)) {
        let q = Array1::from_iter(qs.into_iter().cycle().take(x.ncols()));
        let (v, alpha) = attention_pool(q.view(), x.view()).unwrap();
        prop_assert!(alpha.iter().all(|&a| a >= 0.0));
        prop_assert!((alpha.sum() - 1.0).abs() < 1e-9);
        for j in 0..x.ncols() {
            let col = x.column(j);
            let lo = col.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
            let hi = col.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            prop_assert!(v[j] >= lo - 1e-9 && v[j] <= hi + 1e-9);
        }
    }

    #[test]
    fn forward_probabilities_are_distributions(seed in any::<u64>(), x in matrix_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = ProbeModel::init(x.ncols(), 3, 3, &mut rng);
        let p = model.forward(x.view(), 0.0, false, &mut rng).unwrap();
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.sum() - 1.0).abs() < 1e-6);
        let p_train = model.forward(x.view(), 0.0, true, &mut rng).unwrap();
        prop_assert_eq!(p, p_train);
    }

    #[test]
    fn checkpoint_round_trip_is_f32_exact(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = ProbeModel::init(4, 3, 2, &mut rng);
        let back = ProbeModel::from_checkpoint_bytes(&model.to_checkpoint_bytes()).unwrap();
        for (a, b) in model.groups().iter().zip(back.groups().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert_eq!(*x as f32, *y as f32);
            }
        }
    }
}

fn toy_split(n: usize, d: usize, rng: &mut ChaCha8Rng) -> SequenceSet {
    let mut set = SequenceSet::default();
    for i in 0..n {
        let label = i % 2;
        let shift = if label == 1 { 1.0 } else { -1.0 };
        let t = rng.random_range(1..=3);
        let x = Array2::from_shape_fn((t, d), |(_, j)| if j == 0 { shift + 0.3 * gaussian(rng) as f32 } else { gaussian(rng) as f32 });
        set.push(x, label);
    }
    set
}

fn toy_data(seed: u64) -> Materialized {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Materialized {
        n_classes: 2,
        hidden_dim: 6,
        train: toy_split(120, 6, &mut rng),
        dev: toy_split(40, 6, &mut rng),
        test: toy_split(40, 6, &mut rng),
    }
}

#[test]
fn training_is_deterministic_and_learns() {
    let data = toy_data(1);
    let config = ProbeConfig {
        nhid: 16,
        max_epoch: 60,
        tenacity: 5,
        seed: 9,
        ..ProbeConfig::default()
    };
    let (m1, r1) = train(&config, &data).unwrap();
    let (m2, r2) = train(&config, &data).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(m1, m2);
    assert!(r1.test_accuracy > 0.9, "{r1:?}");
    assert_eq!(r1.best_dev_accuracy(), r1.dev_accuracy_curve.iter().cloned().fold(0.0, f64::max));
    // ties keep the earlier epoch
    let first_best = r1
        .dev_accuracy_curve
        .iter()
        .position(|&a| a == r1.best_dev_accuracy())
        .unwrap();
    assert_eq!(r1.best_epoch, first_best);
}

#[test]
fn tenacity_bounds_the_epoch_count() {
    let data = toy_data(2);
    let config = ProbeConfig {
        nhid: 8,
        max_epoch: 500,
        tenacity: 3,
        ..ProbeConfig::default()
    };
    let (_, report) = train(&config, &data).unwrap();
    let curve = &report.dev_accuracy_curve;
    assert!(report.epochs_run() < 500);
    assert_eq!(report.epochs_run(), report.best_epoch + 1 + 3);
    assert!(curve[report.best_epoch + 1..].iter().all(|&a| a <= curve[report.best_epoch]));

    let short = ProbeConfig { max_epoch: 2, tenacity: 10, ..config };
    let (_, r) = train(&short, &data).unwrap();
    assert_eq!(r.epochs_run(), 2);
    assert_eq!(r.stopped_reason, docprobe::probe::StopReason::MaxEpoch);
}

#[test]
fn dropout_training_runs_and_is_seeded() {
    let data = toy_data(3);
    let config = ProbeConfig {
        nhid: 8,
        dropout: 0.3,
        max_epoch: 20,
        tenacity: 5,
        seed: 4,
        ..ProbeConfig::default()
    };
    let (_, a) = train(&config, &data).unwrap();
    let (_, b) = train(&config, &data).unwrap();
    assert_eq!(a, b);
}

#[test]
fn empty_split_is_an_error() {
    let mut data = toy_data(4);
    data.dev = SequenceSet::default();
    assert!(train(&ProbeConfig::default(), &data).is_err());
}
