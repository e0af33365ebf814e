//! Fisher linear discriminant projection of embeddings to 2-D for plotting.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;

pub struct LdaProjection {
    /// (N, 2) projected points.
    pub points: Array2<f64>,
    /// Mean of each class's projected points, keyed by class index.
    pub class_means: Vec<(usize, [f64; 2])>,
    /// The two discriminant directions as rows.
    pub basis: Array2<f64>,
}

/// Project embeddings onto the two leading Fisher discriminant directions.
/// The within-class scatter is regularized by `eps * I`.
pub fn lda_projection(
    embeddings: &Array2<f64>,
    labels: &[usize],
    eps: f64,
) -> Result<LdaProjection> {
    let n = embeddings.nrows();
    let d = embeddings.ncols();
    if n != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "discriminant projection".into(),
            expected: format!("{n} labels"),
            found: format!("{}", labels.len()),
        });
    }
    let classes: Vec<usize> = {
        let mut c: Vec<usize> = labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    if classes.len() < 2 {
        return Err(Error::InvalidConfig(
            "discriminant projection needs at least 2 classes".into(),
        ));
    }
    for &c in &classes {
        let count = labels.iter().filter(|&&l| l == c).count();
        if count < 3 {
            return Err(Error::InvalidConfig(format!(
                "class {c} has {count} samples, need at least 3"
            )));
        }
    }

    let global_mean: DVector<f64> = {
        let mut mu = DVector::zeros(d);
        for i in 0..n {
            for j in 0..d {
                mu[j] += embeddings[[i, j]];
            }
        }
        mu / n as f64
    };

    let mut sw = DMatrix::<f64>::zeros(d, d);
    let mut sb = DMatrix::<f64>::zeros(d, d);
    let mut class_mean_vectors = Vec::new();
    for &c in &classes {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        let mut mu = DVector::zeros(d);
        for &i in &members {
            for j in 0..d {
                mu[j] += embeddings[[i, j]];
            }
        }
        mu /= members.len() as f64;
        for &i in &members {
            let mut diff = DVector::zeros(d);
            for j in 0..d {
                diff[j] = embeddings[[i, j]] - mu[j];
            }
            sw += &diff * diff.transpose();
        }
        let bdiff = &mu - &global_mean;
        sb += members.len() as f64 * &bdiff * bdiff.transpose();
        class_mean_vectors.push((c, mu));
    }
    for j in 0..d {
        sw[(j, j)] += eps;
    }

    // Whiten by the Cholesky factor of Sw and solve the symmetric problem.
    let chol = nalgebra::Cholesky::new(sw).ok_or(Error::SingularScatter)?;
    let l_inv = chol
        .l()
        .clone()
        .try_inverse()
        .ok_or(Error::SingularScatter)?;
    let m = &l_inv * sb * l_inv.transpose();
    let sym = nalgebra::SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        sym.eigenvalues[b]
            .partial_cmp(&sym.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut basis = Array2::<f64>::zeros((2, d));
    for (k, &idx) in order.iter().take(2).enumerate() {
        let u = sym.eigenvectors.column(idx);
        let wdir = l_inv.transpose() * u;
        let norm = wdir.norm().max(1e-300);
        for j in 0..d {
            basis[[k, j]] = wdir[j] / norm;
        }
    }

    let mut points = Array2::<f64>::zeros((n, 2));
    for i in 0..n {
        for k in 0..2 {
            let mut acc = 0.0;
            for j in 0..d {
                acc += embeddings[[i, j]] * basis[[k, j]];
            }
            points[[i, k]] = acc;
        }
    }
    let class_means = class_mean_vectors
        .into_iter()
        .map(|(c, mu)| {
            let mut pm = [0.0; 2];
            for k in 0..2 {
                for j in 0..d {
                    pm[k] += mu[j] * basis[[k, j]];
                }
            }
            (c, pm)
        })
        .collect();

    Ok(LdaProjection {
        points,
        class_means,
        basis,
    })
}

/// Between-class over within-class variance of projected points; higher means
/// better separation.
pub fn fisher_ratio(points: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = points.nrows();
    let dims = points.ncols();
    let classes: Vec<usize> = {
        let mut c: Vec<usize> = labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    let mut global = vec![0.0; dims];
    for i in 0..n {
        for k in 0..dims {
            global[k] += points[[i, k]];
        }
    }
    for g in &mut global {
        *g /= n as f64;
    }
    let mut within = 0.0;
    let mut between = 0.0;
    for &c in &classes {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        let mut mu = vec![0.0; dims];
        for &i in &members {
            for k in 0..dims {
                mu[k] += points[[i, k]];
            }
        }
        for m in &mut mu {
            *m /= members.len() as f64;
        }
        for &i in &members {
            for k in 0..dims {
                let d = points[[i, k]] - mu[k];
                within += d * d;
            }
        }
        for k in 0..dims {
            let d = mu[k] - global[k];
            between += members.len() as f64 * d * d;
        }
    }
    between / within.max(1e-300)
}

/// Tab-separated `x<TAB>y<TAB>label` rows for external plotting.
pub fn points_to_tsv(points: &Array2<f64>, labels: &[usize]) -> String {
    let mut out = String::from("x\ty\tlabel\n");
    for (i, &label) in labels.iter().enumerate() {
        out.push_str(&format!(
            "{:.6}\t{:.6}\t{}\n",
            points[[i, 0]],
            points[[i, 1]],
            label
        ));
    }
    out
}
