//! Finite-difference oracle for the probe gradients.

use docprobe::probe::ProbeModel;
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::gaussian;

/// Mean cross-entropy written out with scalar loops.
pub fn naive_loss(m: &ProbeModel, batch: &[(Array2<f32>, usize)]) -> f64 {
    let d = m.query.len();
    let nhid = m.b1.len();
    let c = m.b2.len();
    let mut total = 0.0;
    for (x, y) in batch {
        let t = x.nrows();
        let scores: Vec<f64> = (0..t)
            .map(|i| (0..d).map(|j| x[[i, j]] as f64 * m.query[j]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let v: Vec<f64> = (0..d).map(|j| (0..t).map(|i| e[i] / z * x[[i, j]] as f64).sum()).collect();
        let h: Vec<f64> = (0..nhid)
            .map(|k| {
                let a = (0..d).map(|j| v[j] * m.w1[[j, k]]).sum::<f64>() + m.b1[k];
                1.0 / (1.0 + (-a).exp())
            })
            .collect();
        let logits: Vec<f64> = (0..c).map(|o| (0..nhid).map(|k| h[k] * m.w2[[k, o]]).sum::<f64>() + m.b2[o]).collect();
        let lmax = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = lmax + logits.iter().map(|l| (l - lmax).exp()).sum::<f64>().ln();
        total += lse - logits[*y];
    }
    total / batch.len() as f64
}

pub fn random_model(d: usize, nhid: usize, c: usize, rng: &mut ChaCha8Rng) -> ProbeModel {
    let mut m = ProbeModel::zeros(d, nhid, c);
    for g in m.groups_mut() {
        for v in g.iter_mut() {
            *v = 0.7 * gaussian(rng);
        }
    }
    m
}

pub fn random_batch(d: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<(Array2<f32>, usize)> {
    let b = rng.random_range(1..=3);
    (0..b)
        .map(|_| {
            let t = rng.random_range(1..=5);
            (Array2::from_shape_fn((t, d), |_| rng.random_range(-1.5f32..1.5)), rng.random_range(0..c))
        })
        .collect()
}

/// Worst element-wise relative error `|a - n| / max(|a|, |n|, 1e-6)` per
/// parameter group, between analytic and central-difference gradients.
pub fn relative_errors(model: &ProbeModel, batch: &[(Array2<f32>, usize)], eps: f64) -> [f64; 5] {
    let views: Vec<(ArrayView2<'_, f32>, usize)> = batch.iter().map(|(x, y)| (x.view(), *y)).collect();
    let (_, grads) = model.loss_and_grads(&views, None).unwrap();
    let mut worst = [0.0f64; 5];
    for (gi, analytic) in grads.groups().iter().enumerate() {
        for i in 0..analytic.len() {
            let mut plus = model.clone();
            plus.groups_mut()[gi][i] += eps;
            let mut minus = model.clone();
            minus.groups_mut()[gi][i] -= eps;
            let numeric = (naive_loss(&plus, batch) - naive_loss(&minus, batch)) / (2.0 * eps);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst[gi] = worst[gi].max(rel);
        }
    }
    worst
}
