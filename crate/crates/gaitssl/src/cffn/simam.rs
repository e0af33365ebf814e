//! Parameter-free energy-based salience and the feature drop built on it.

use crate::real::Real;
use ndarray::Array2;

/// Per-activation salience in (0, 1) for (N, D) feature batches.
///
/// For each sample the activations are treated as one channel: with mean mu
/// and variance var, the energy of activation x is
/// `((x - mu)^2 + 2 var + 2 lambda) / (4 (var + lambda))` and the salience is
/// its sigmoid. Salience is strictly monotone in the squared deviation from
/// the mean; a constant channel yields equal salience everywhere.
pub fn simam_energy<R: Real>(x: &Array2<R>, lambda: R) -> Array2<R> {
    let (n, d) = (x.nrows(), x.ncols());
    let dm = R::fr(d as f64);
    let mut out = Array2::<R>::zeros((n, d));
    let two = R::fr(2.0);
    let four = R::fr(4.0);
    for i in 0..n {
        let row = x.row(i);
        let mu = row.iter().fold(R::zero(), |a, &b| a + b) / dm;
        let var = row.iter().fold(R::zero(), |a, &b| a + (b - mu) * (b - mu)) / dm;
        let denom = four * (var + lambda);
        for j in 0..d {
            let dev = x[[i, j]] - mu;
            let energy = (dev * dev + two * var + two * lambda) / denom;
            out[[i, j]] = sigmoid(energy);
        }
    }
    out
}

fn sigmoid<R: Real>(v: R) -> R {
    R::one() / (R::one() + (-v).exp())
}

/// Zero the `floor(drop_ratio * D)` highest-salience activations per sample.
/// Returns the dropped features and the kept-entry mask used for gradient
/// propagation. Ties break toward the lower index.
pub fn simam_drop<R: Real>(
    x: &Array2<R>,
    drop_ratio: f64,
    lambda: R,
) -> (Array2<R>, Array2<R>) {
    let (n, d) = (x.nrows(), x.ncols());
    let k = (drop_ratio * d as f64).floor() as usize;
    let mut y = x.clone();
    let mut mask = Array2::<R>::ones((n, d));
    if k == 0 {
        return (y, mask);
    }
    let salience = simam_energy(x, lambda);
    for i in 0..n {
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| {
            salience[[i, b]]
                .partial_cmp(&salience[[i, a]])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        for &j in order.iter().take(k) {
            y[[i, j]] = R::zero();
            mask[[i, j]] = R::zero();
        }
    }
    (y, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn constant_channel_gives_equal_salience() {
        let x = Array2::<f64>::from_elem((2, 8), 3.5);
        let s = simam_energy(&x, 1e-4);
        for i in 0..2 {
            for j in 1..8 {
                assert!((s[[i, j]] - s[[i, 0]]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn farthest_activation_has_max_salience() {
        let mut rng = RngStream::new(1);
        for _ in 0..50 {
            let x = Array2::from_shape_fn((1, 16), |_| rng.uniform(-2.0, 2.0));
            let s = simam_energy(&x, 1e-4);
            let mu: f64 = x.row(0).sum() / 16.0;
            let far = (0..16)
                .max_by(|&a, &b| {
                    let da = (x[[0, a]] - mu).abs();
                    let db = (x[[0, b]] - mu).abs();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            let smax = (0..16)
                .max_by(|&a, &b| s[[0, a]].partial_cmp(&s[[0, b]]).unwrap())
                .unwrap();
            assert_eq!(far, smax);
        }
    }

    #[test]
    fn salience_lies_strictly_inside_unit_interval() {
        let mut rng = RngStream::new(2);
        for _ in 0..100 {
            let x = Array2::from_shape_fn((3, 32), |_| rng.uniform(-50.0, 50.0));
            let s = simam_energy(&x, 1e-4);
            assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn zero_ratio_is_identity() {
        let mut rng = RngStream::new(3);
        let x = Array2::from_shape_fn((4, 128), |_| rng.uniform(-1.0, 1.0));
        let (y, mask) = simam_drop(&x, 0.0, 1e-4);
        assert_eq!(y, x);
        assert!(mask.iter().all(|&m| m == 1.0));
    }

    #[test]
    fn quarter_ratio_zeroes_exactly_32_of_128() {
        let mut rng = RngStream::new(4);
        let x = Array2::from_shape_fn((4, 128), |_| rng.uniform(-1.0, 1.0));
        let (y, mask) = simam_drop(&x, 0.25, 1e-4);
        for i in 0..4 {
            let zeroed = (0..128).filter(|&j| mask[[i, j]] == 0.0).count();
            assert_eq!(zeroed, 32);
            let zero_values = (0..128).filter(|&j| y[[i, j]] == 0.0).count();
            assert!(zero_values >= 32);
        }
    }

    #[test]
    fn dropped_set_matches_sorted_salience_oracle() {
        let mut rng = RngStream::new(5);
        let x = Array2::from_shape_fn((2, 64), |_| rng.uniform(-1.0, 1.0));
        let (_, mask) = simam_drop(&x, 0.25, 1e-4);
        let salience = simam_energy(&x, 1e-4);
        for i in 0..2 {
            let mut pairs: Vec<(f64, usize)> =
                (0..64).map(|j| (salience[[i, j]], j)).collect();
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let expected: std::collections::BTreeSet<usize> =
                pairs.iter().take(16).map(|&(_, j)| j).collect();
            let got: std::collections::BTreeSet<usize> =
                (0..64).filter(|&j| mask[[i, j]] == 0.0).collect();
            assert_eq!(got, expected);
        }
    }
}
