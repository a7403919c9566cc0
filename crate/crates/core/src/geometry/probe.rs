//! Linear separability probe: stratified k-fold logistic regression over
//! concatenated pair features (label 1 = parallel, 0 = non-parallel).

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CurveMeta, MetricKind, SimilarityCurve};
use crate::error::{Error, Result};

const EPOCHS: usize = 120;
const LEARNING_RATE: f64 = 0.8;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Full-batch gradient descent on standardized features. Convex objective,
/// zero init, fixed schedule: deterministic for a given fold assignment.
struct Logistic {
    weights: Array1<f64>,
    bias: f64,
    mean: Array1<f64>,
    std: Array1<f64>,
}

impl Logistic {
    fn fit(features: &Array2<f64>, labels: &[f64]) -> Logistic {
        let n = features.nrows();
        let d = features.ncols();
        let mean = features.mean_axis(ndarray::Axis(0)).expect("n > 0");
        let mut std = Array1::<f64>::zeros(d);
        for j in 0..d {
            let var: f64 = (0..n)
                .map(|i| (features[(i, j)] - mean[j]).powi(2))
                .sum::<f64>()
                / n as f64;
            std[j] = var.sqrt().max(1e-9);
        }
        let x = {
            let mut x = features.clone();
            for i in 0..n {
                for j in 0..d {
                    x[(i, j)] = (x[(i, j)] - mean[j]) / std[j];
                }
            }
            x
        };
        let mut weights = Array1::<f64>::zeros(d);
        let mut bias = 0.0f64;
        for _ in 0..EPOCHS {
            let mut grad_w = Array1::<f64>::zeros(d);
            let mut grad_b = 0.0;
            for i in 0..n {
                let p = sigmoid(x.row(i).dot(&weights) + bias);
                let err = p - labels[i];
                grad_w.scaled_add(err, &x.row(i));
                grad_b += err;
            }
            weights.scaled_add(-LEARNING_RATE / n as f64, &grad_w);
            bias -= LEARNING_RATE / n as f64 * grad_b;
        }
        Logistic {
            weights,
            bias,
            mean,
            std,
        }
    }

    fn predict(&self, row: ndarray::ArrayView1<f64>) -> f64 {
        let z: f64 = row
            .iter()
            .zip(self.weights.iter())
            .zip(self.mean.iter().zip(self.std.iter()))
            .map(|((x, w), (m, s))| w * (x - m) / s)
            .sum::<f64>()
            + self.bias;
        if sigmoid(z) > 0.5 {
            1.0
        } else {
            0.0
        }
    }
}

/// Stratified fold ids: each class is shuffled seeded, then dealt
/// round-robin into `folds` bins.
fn stratified_folds(n: usize, folds: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut fold_of = vec![0usize; n];
    for (pos, &idx) in order.iter().enumerate() {
        fold_of[idx] = pos % folds;
    }
    fold_of
}

/// Per-layer mean held-out accuracy of a linear probe separating parallel
/// from non-parallel concatenated pair features.
pub fn separability_probe(
    parallel: &[Array2<f64>],
    nonparallel: &[Array2<f64>],
    folds: usize,
    seed: u64,
) -> Result<SimilarityCurve> {
    if folds < 2 {
        return Err(Error::InvalidArgument("folds must be >= 2".into()));
    }
    if parallel.len() != nonparallel.len() {
        return Err(Error::Shape(
            "parallel and non-parallel layer counts differ".into(),
        ));
    }
    if parallel.is_empty() {
        return Err(Error::EmptyInput("no layers to probe".into()));
    }
    let mut values = Vec::with_capacity(parallel.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (pos_m, neg_m) in parallel.iter().zip(nonparallel) {
        let n_pos = pos_m.nrows();
        let n_neg = neg_m.nrows();
        if n_pos == 0 || n_neg == 0 {
            return Err(Error::EmptyInput("a probe class is empty".into()));
        }
        if n_pos < folds || n_neg < folds {
            return Err(Error::InvalidArgument(format!(
                "class sizes ({n_pos}, {n_neg}) below fold count {folds}"
            )));
        }
        if pos_m.ncols() != neg_m.ncols() {
            return Err(Error::Shape("feature widths differ between classes".into()));
        }
        let pos_folds = stratified_folds(n_pos, folds, &mut rng);
        let neg_folds = stratified_folds(n_neg, folds, &mut rng);
        let mut correct = 0usize;
        let mut total = 0usize;
        for fold in 0..folds {
            let mut train_rows = Vec::new();
            let mut train_labels = Vec::new();
            let mut test: Vec<(ndarray::ArrayView1<f64>, f64)> = Vec::new();
            for i in 0..n_pos {
                if pos_folds[i] == fold {
                    test.push((pos_m.row(i), 1.0));
                } else {
                    train_rows.push(pos_m.row(i));
                    train_labels.push(1.0);
                }
            }
            for i in 0..n_neg {
                if neg_folds[i] == fold {
                    test.push((neg_m.row(i), 0.0));
                } else {
                    train_rows.push(neg_m.row(i));
                    train_labels.push(0.0);
                }
            }
            let mut train = Array2::<f64>::zeros((train_rows.len(), pos_m.ncols()));
            for (i, r) in train_rows.iter().enumerate() {
                train.row_mut(i).assign(r);
            }
            let clf = Logistic::fit(&train, &train_labels);
            for (row, label) in test {
                if clf.predict(row) == label {
                    correct += 1;
                }
                total += 1;
            }
        }
        values.push(Some(correct as f64 / total as f64));
    }
    Ok(SimilarityCurve::new(
        MetricKind::SeparabilityAcc,
        1,
        values,
        CurveMeta::condition("none"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn gaussian_cloud(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |(_, j)| {
            rng.random_range(-1.0..1.0) + if j == 0 { shift } else { 0.0 }
        })
    }

    #[test]
    fn separable_classes_reach_high_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let pos = gaussian_cloud(&mut rng, 60, 6, 5.0);
        let neg = gaussian_cloud(&mut rng, 60, 6, -5.0);
        let curve = separability_probe(&[pos], &[neg], 5, 3).unwrap();
        assert!(curve.values[0].unwrap() >= 0.99);
    }

    #[test]
    fn shuffled_labels_sit_at_chance() {
        // Same distribution for both classes: held-out accuracy ~ 0.5.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pos = gaussian_cloud(&mut rng, 500, 6, 0.0);
        let neg = gaussian_cloud(&mut rng, 500, 6, 0.0);
        let curve = separability_probe(&[pos], &[neg], 10, 4).unwrap();
        let acc = curve.values[0].unwrap();
        assert!(
            (acc - 0.5).abs() <= 0.08,
            "chance-level accuracy expected, got {acc}"
        );
    }

    #[test]
    fn probe_is_deterministic_under_fixed_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let pos = vec![gaussian_cloud(&mut rng, 40, 4, 1.0)];
        let neg = vec![gaussian_cloud(&mut rng, 40, 4, -1.0)];
        let a = separability_probe(&pos, &neg, 4, 9).unwrap();
        let b = separability_probe(&pos, &neg, 4, 9).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn small_classes_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let pos = gaussian_cloud(&mut rng, 3, 4, 1.0);
        let neg = gaussian_cloud(&mut rng, 40, 4, -1.0);
        assert!(separability_probe(&[pos], &[neg], 5, 0).is_err());
    }
}
