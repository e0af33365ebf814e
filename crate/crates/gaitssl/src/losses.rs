//! Contrastive losses: InfoNCE over the memory bank, conditional contrastive
//! distributions, and the distributional divergence loss aligning the strong
//! view to the general view.
//!
//! All softmax/log-sum-exp computations subtract the row maximum first. The
//! gradient helpers treat the key embeddings, the bank and the target
//! distributions as constants; gradients flow only into the query-side
//! embeddings.

use crate::error::{Error, Result};
use crate::real::Real;
use ndarray::{Array1, Array2, ArrayView1};

/// Logits [pos, m_1, ..., m_M] / tau for one query.
fn logits<R: Real>(
    query: &ArrayView1<R>,
    pos: &ArrayView1<R>,
    bank: &Array2<R>,
    tau: R,
) -> Array1<R> {
    let m = bank.nrows();
    let mut out = Array1::<R>::zeros(m + 1);
    out[0] = dot(query, pos) / tau;
    for (i, row) in bank.rows().into_iter().enumerate() {
        out[i + 1] = dot(query, &row) / tau;
    }
    out
}

fn dot<R: Real>(a: &ArrayView1<R>, b: &ArrayView1<R>) -> R {
    a.iter().zip(b.iter()).fold(R::zero(), |acc, (&x, &y)| acc + x * y)
}

fn log_sum_exp<R: Real>(l: &Array1<R>) -> R {
    let max = l.iter().fold(R::neg_infinity(), |a, &b| a.max(b));
    let sum = l.iter().fold(R::zero(), |a, &b| a + (b - max).exp());
    max + sum.ln()
}

fn softmax<R: Real>(l: &Array1<R>) -> Array1<R> {
    let lse = log_sum_exp(l);
    l.mapv(|v| (v - lse).exp())
}

fn check_bank<R: Real>(bank: &Array2<R>) -> Result<()> {
    if bank.nrows() == 0 {
        return Err(Error::EmptyBank);
    }
    Ok(())
}

/// The conditional contrastive distribution
/// [p(pos | query), p(m_1 | query), ..., p(m_M | query)].
pub fn conditional_distribution<R: Real>(
    query: &ArrayView1<R>,
    pos: &ArrayView1<R>,
    bank: &Array2<R>,
    tau: R,
) -> Result<Array1<R>> {
    check_bank(bank)?;
    Ok(softmax(&logits(query, pos, bank, tau)))
}

/// InfoNCE: -log of the positive's probability under the conditional
/// distribution.
pub fn infonce_loss<R: Real>(
    query: &ArrayView1<R>,
    pos: &ArrayView1<R>,
    bank: &Array2<R>,
    tau: R,
) -> Result<R> {
    check_bank(bank)?;
    let l = logits(query, pos, bank, tau);
    Ok(log_sum_exp(&l) - l[0])
}

/// Shannon entropy of a distribution, in nats.
pub fn entropy<R: Real>(p: &Array1<R>) -> R {
    p.iter().fold(R::zero(), |acc, &v| {
        if v > R::zero() {
            acc - v * v.ln()
        } else {
            acc
        }
    })
}

/// Per-sample distributional divergence terms for one query triple:
/// cross-entropy of p(.|z3) and p(.|z3'), each under the target p(.|z2).
pub fn ddm_loss<R: Real>(
    z1: &ArrayView1<R>,
    z2: &ArrayView1<R>,
    z3: &ArrayView1<R>,
    z3_dropped: &ArrayView1<R>,
    bank: &Array2<R>,
    tau: R,
) -> Result<(R, R, R)> {
    check_bank(bank)?;
    let target = conditional_distribution(z2, z1, bank, tau)?;
    let q3 = log_softmax(&logits(z3, z1, bank, tau));
    let q3d = log_softmax(&logits(z3_dropped, z1, bank, tau));
    let l_d1 = cross_entropy_from_logp(&target, &q3);
    let l_d2 = cross_entropy_from_logp(&target, &q3d);
    let half = R::fr(0.5);
    Ok((l_d1, l_d2, half * (l_d1 + l_d2)))
}

fn log_softmax<R: Real>(l: &Array1<R>) -> Array1<R> {
    let lse = log_sum_exp(l);
    l.mapv(|v| v - lse)
}

fn cross_entropy_from_logp<R: Real>(target: &Array1<R>, logq: &Array1<R>) -> R {
    -target
        .iter()
        .zip(logq.iter())
        .fold(R::zero(), |acc, (&p, &lq)| acc + p * lq)
}

/// Batched InfoNCE with the query-side gradient of the mean loss.
pub struct InfoNceBatch<R: Real> {
    pub loss: R,
    pub dquery: Array2<R>,
}

pub fn infonce_batch_with_grad<R: Real>(
    z_query: &Array2<R>,
    z_pos: &Array2<R>,
    bank: &Array2<R>,
    tau: R,
) -> Result<InfoNceBatch<R>> {
    check_bank(bank)?;
    let n = z_query.nrows();
    debug_assert_eq!(z_pos.nrows(), n);
    let inv_n = R::fr(1.0 / n as f64);
    let sims = z_query.dot(&bank.t()); // (N, M)
    let mut loss = R::zero();
    let mut probs_bank = Array2::<R>::zeros(sims.raw_dim());
    let mut pos_coeff = Array1::<R>::zeros(n);
    for i in 0..n {
        let pos_logit = dot(&z_query.row(i), &z_pos.row(i)) / tau;
        let row = sims.row(i).mapv(|v| v / tau);
        let max = row.iter().fold(pos_logit, |a, &b| a.max(b));
        let sum_bank = row.iter().fold(R::zero(), |a, &b| a + (b - max).exp());
        let denom = (pos_logit - max).exp() + sum_bank;
        let lse = max + denom.ln();
        loss += lse - pos_logit;
        let p0 = (pos_logit - lse).exp();
        pos_coeff[i] = p0 - R::one();
        for j in 0..bank.nrows() {
            probs_bank[[i, j]] = (row[j] - lse).exp();
        }
    }
    loss *= inv_n;
    // dL/dq_i = (1/(tau N)) [(p0 - 1) pos_i + sum_j p_ij bank_j]
    let mut dquery = probs_bank.dot(bank);
    for i in 0..n {
        let c = pos_coeff[i];
        let pos_row = z_pos.row(i);
        for (k, g) in dquery.row_mut(i).iter_mut().enumerate() {
            *g = (*g + c * pos_row[k]) * inv_n / tau;
        }
    }
    Ok(InfoNceBatch { loss, dquery })
}

/// Batched distributional divergence with gradients of the combined loss
/// L_d = (L_d1 + L_d2)/2 with respect to z3 and the dropped z3'.
pub struct DdmBatch<R: Real> {
    pub l_d1: R,
    pub l_d2: R,
    pub l_d: R,
    pub dz3: Array2<R>,
    pub dz3_dropped: Array2<R>,
}

pub fn ddm_batch_with_grad<R: Real>(
    z1: &Array2<R>,
    z2: &Array2<R>,
    z3: &Array2<R>,
    z3_dropped: &Array2<R>,
    bank: &Array2<R>,
    tau: R,
) -> Result<DdmBatch<R>> {
    check_bank(bank)?;
    let n = z1.nrows();
    let inv_n = R::fr(1.0 / n as f64);
    let half = R::fr(0.5);
    let mut l_d1 = R::zero();
    let mut l_d2 = R::zero();
    let mut dz3 = Array2::<R>::zeros(z3.raw_dim());
    let mut dz3d = Array2::<R>::zeros(z3_dropped.raw_dim());
    for i in 0..n {
        let target = conditional_distribution(&z2.row(i), &z1.row(i), bank, tau)?;
        for (branch, (z, dz)) in [
            (0usize, (z3.row(i), dz3.row_mut(i))),
            (1usize, (z3_dropped.row(i), dz3d.row_mut(i))),
        ] {
            let lg = logits(&z, &z1.row(i), bank, tau);
            let logq = log_softmax(&lg);
            let ce = cross_entropy_from_logp(&target, &logq);
            if branch == 0 {
                l_d1 += ce;
            } else {
                l_d2 += ce;
            }
            // d ce / d logits = q - target; chain to the embedding.
            let q = logq.mapv(|v| v.exp());
            let mut dz = dz;
            let coeff0 = (q[0] - target[0]) * half * inv_n / tau;
            for (k, g) in dz.iter_mut().enumerate() {
                *g += coeff0 * z1.row(i)[k];
            }
            for (j, bank_row) in bank.rows().into_iter().enumerate() {
                let cj = (q[j + 1] - target[j + 1]) * half * inv_n / tau;
                for (k, g) in dz.iter_mut().enumerate() {
                    *g += cj * bank_row[k];
                }
            }
        }
    }
    l_d1 *= inv_n;
    l_d2 *= inv_n;
    Ok(DdmBatch {
        l_d1,
        l_d2,
        l_d: half * (l_d1 + l_d2),
        dz3,
        dz3_dropped: dz3d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn unit<R: Real>(v: Vec<f64>) -> Array1<R> {
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Array1::from_vec(v.into_iter().map(|x| R::fr(x / norm)).collect())
    }

    fn orthogonal_bank() -> Array2<f64> {
        let mut bank = Array2::<f64>::zeros((2, 4));
        bank[[0, 1]] = 1.0;
        bank[[1, 2]] = 1.0;
        bank
    }

    #[test]
    fn infonce_matches_closed_form_two_orthogonal_negatives() {
        // Positive similarity 1, two negatives at 0, tau = 0.07:
        // loss = ln(1 + 2 exp(-1/tau)) which is about 1.249e-6.
        let z = unit::<f64>(vec![1.0, 0.0, 0.0, 0.0]);
        let bank = orthogonal_bank();
        let loss = infonce_loss(&z.view(), &z.view(), &bank, 0.07).unwrap();
        let expected = (2.0 * (-1.0f64 / 0.07).exp()).ln_1p();
        let rel = (loss - expected).abs() / expected;
        assert!(rel < 1e-9, "loss {loss:e} vs {expected:e}");
        assert!((loss - 1.249e-6).abs() / 1.249e-6 < 1e-3);
    }

    #[test]
    fn infonce_huge_temperature_is_uniform() {
        let z = unit::<f64>(vec![0.3, -0.5, 0.8, 0.1]);
        let pos = unit::<f64>(vec![-0.2, 0.9, 0.1, 0.3]);
        let bank = orthogonal_bank();
        let loss = infonce_loss(&z.view(), &pos.view(), &bank, 1e9).unwrap();
        let expected = (1.0f64 + bank.nrows() as f64).ln();
        assert!((loss - expected).abs() < 1e-6);
    }

    #[test]
    fn infonce_decreases_as_positive_similarity_rises() {
        let bank = orthogonal_bank();
        let q = unit::<f64>(vec![1.0, 0.0, 0.0, 0.0]);
        let mut last = f64::INFINITY;
        for sim in [0.0f64, 0.3, 0.6, 0.9, 0.99] {
            let pos = unit::<f64>(vec![sim, (1.0 - sim * sim).sqrt(), 0.0, 0.0]);
            let loss = infonce_loss(&q.view(), &pos.view(), &bank, 0.07).unwrap();
            assert!(loss < last, "loss must fall as similarity grows");
            last = loss;
        }
    }

    #[test]
    fn infonce_errors_on_empty_bank() {
        let z = unit::<f64>(vec![1.0, 0.0, 0.0, 0.0]);
        let empty = Array2::<f64>::zeros((0, 4));
        assert!(matches!(
            infonce_loss(&z.view(), &z.view(), &empty, 0.07),
            Err(Error::EmptyBank)
        ));
    }

    #[test]
    fn conditional_uniform_when_similarities_are_equal() {
        // Query orthogonal to the positive and every bank entry.
        let q = unit::<f64>(vec![0.0, 0.0, 0.0, 1.0]);
        let pos = unit::<f64>(vec![1.0, 0.0, 0.0, 0.0]);
        let bank = orthogonal_bank();
        let p = conditional_distribution(&q.view(), &pos.view(), &bank, 0.07).unwrap();
        for &v in p.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conditional_sums_to_one_on_random_inputs() {
        let mut rng = RngStream::new(1);
        for _ in 0..1000 {
            let q = unit::<f64>((0..8).map(|_| rng.uniform(-1.0, 1.0)).collect());
            let pos = unit::<f64>((0..8).map(|_| rng.uniform(-1.0, 1.0)).collect());
            let mut bank = Array2::<f64>::zeros((5, 8));
            for mut row in bank.rows_mut() {
                let r = unit::<f64>((0..8).map(|_| rng.uniform(-1.0, 1.0)).collect());
                row.assign(&r);
            }
            let p = conditional_distribution(&q.view(), &pos.view(), &bank, 0.07).unwrap();
            let sum: f64 = p.sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn conditional_closed_form_with_perfect_positive() {
        let z = unit::<f64>(vec![1.0, 0.0, 0.0, 0.0]);
        let bank = orthogonal_bank();
        let p = conditional_distribution(&z.view(), &z.view(), &bank, 0.07).unwrap();
        let expected = 1.0 - 2.0 * (-1.0f64 / 0.07).exp();
        assert!((p[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn infonce_equals_neg_log_of_first_conditional_entry() {
        let mut rng = RngStream::new(2);
        for _ in 0..50 {
            let q = unit::<f64>((0..6).map(|_| rng.uniform(-1.0, 1.0)).collect());
            let pos = unit::<f64>((0..6).map(|_| rng.uniform(-1.0, 1.0)).collect());
            let mut bank = Array2::<f64>::zeros((4, 6));
            for mut row in bank.rows_mut() {
                row.assign(&unit::<f64>((0..6).map(|_| rng.uniform(-1.0, 1.0)).collect()));
            }
            let p = conditional_distribution(&q.view(), &pos.view(), &bank, 0.07).unwrap();
            let loss = infonce_loss(&q.view(), &pos.view(), &bank, 0.07).unwrap();
            assert!((loss - (-p[0].ln())).abs() < 1e-9);
        }
    }

    #[test]
    fn ddm_equals_entropy_when_strong_equals_general() {
        let mut rng = RngStream::new(3);
        let z1 = unit::<f64>((0..6).map(|_| rng.uniform(-1.0, 1.0)).collect());
        let z2 = unit::<f64>((0..6).map(|_| rng.uniform(-1.0, 1.0)).collect());
        let mut bank = Array2::<f64>::zeros((3, 6));
        for mut row in bank.rows_mut() {
            row.assign(&unit::<f64>((0..6).map(|_| rng.uniform(-1.0, 1.0)).collect()));
        }
        let (l_d1, l_d2, l_d) =
            ddm_loss(&z1.view(), &z2.view(), &z2.view(), &z2.view(), &bank, 0.07).unwrap();
        let target = conditional_distribution(&z2.view(), &z1.view(), &bank, 0.07).unwrap();
        let h = entropy(&target);
        assert!((l_d1 - h).abs() < 1e-12);
        assert!((l_d2 - h).abs() < 1e-12);
        assert!((l_d - h).abs() < 1e-12);
    }

    #[test]
    fn ddm_is_bounded_below_by_target_entropy() {
        let mut rng = RngStream::new(4);
        for _ in 0..200 {
            let dims = 6;
            let z1 = unit::<f64>((0..dims).map(|_| rng.uniform(-1.0, 1.0)).collect());
            let z2 = unit::<f64>((0..dims).map(|_| rng.uniform(-1.0, 1.0)).collect());
            let z3 = unit::<f64>((0..dims).map(|_| rng.uniform(-1.0, 1.0)).collect());
            let z3d = unit::<f64>((0..dims).map(|_| rng.uniform(-1.0, 1.0)).collect());
            let mut bank = Array2::<f64>::zeros((4, dims));
            for mut row in bank.rows_mut() {
                row.assign(&unit::<f64>(
                    (0..dims).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                ));
            }
            let (l_d1, l_d2, _) =
                ddm_loss(&z1.view(), &z2.view(), &z3.view(), &z3d.view(), &bank, 0.07).unwrap();
            let target = conditional_distribution(&z2.view(), &z1.view(), &bank, 0.07).unwrap();
            let h = entropy(&target);
            assert!(l_d1 >= h - 1e-12);
            assert!(l_d2 >= h - 1e-12);
        }
    }

    #[test]
    fn ddm_matches_bruteforce_double_sum_on_three_negatives() {
        // Oracle: evaluate the cross-entropy double sum over the 4 outcomes
        // directly from exponentials, no log-sum-exp tricks.
        let mut rng = RngStream::new(5);
        let dims = 5;
        let tau = 0.07;
        for _ in 0..50 {
            let z1 = unit::<f64>((0..dims).map(|_| rng.uniform(-1.0, 1.0)).collect());
            let z2 = unit::<f64>((0..dims).map(|_| rng.uniform(-1.0, 1.0)).collect());
            let z3 = unit::<f64>((0..dims).map(|_| rng.uniform(-1.0, 1.0)).collect());
            let z3d = unit::<f64>((0..dims).map(|_| rng.uniform(-1.0, 1.0)).collect());
            let mut bank = Array2::<f64>::zeros((3, dims));
            for mut row in bank.rows_mut() {
                row.assign(&unit::<f64>(
                    (0..dims).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                ));
            }
            let dist = |q: &Array1<f64>| -> Vec<f64> {
                let mut raw = vec![(q.dot(&z1) / tau).exp()];
                for row in bank.rows() {
                    raw.push((q.dot(&row.to_owned()) / tau).exp());
                }
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            };
            let p = dist(&z2);
            let q3 = dist(&z3);
            let q3d = dist(&z3d);
            let ce = |p: &[f64], q: &[f64]| -> f64 {
                p.iter().zip(q).map(|(a, b)| -a * b.ln()).sum()
            };
            let expect_d1 = ce(&p, &q3);
            let expect_d2 = ce(&p, &q3d);
            let (l_d1, l_d2, l_d) =
                ddm_loss(&z1.view(), &z2.view(), &z3.view(), &z3d.view(), &bank, tau).unwrap();
            assert!((l_d1 - expect_d1).abs() < 1e-9 * expect_d1.max(1.0));
            assert!((l_d2 - expect_d2).abs() < 1e-9 * expect_d2.max(1.0));
            assert!((l_d - 0.5 * (expect_d1 + expect_d2)).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_losses_match_single_sample_means() {
        let mut rng = RngStream::new(6);
        let n = 4;
        let dims = 6;
        let m = 5;
        let mk_batch = |rng: &mut RngStream| {
            let mut out = Array2::<f64>::zeros((n, dims));
            for mut row in out.rows_mut() {
                row.assign(&unit::<f64>(
                    (0..dims).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                ));
            }
            out
        };
        let z1 = mk_batch(&mut rng);
        let z2 = mk_batch(&mut rng);
        let z3 = mk_batch(&mut rng);
        let z3d = mk_batch(&mut rng);
        let mut bank = Array2::<f64>::zeros((m, dims));
        for mut row in bank.rows_mut() {
            row.assign(&unit::<f64>(
                (0..dims).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            ));
        }
        let info = infonce_batch_with_grad(&z2, &z1, &bank, 0.07).unwrap();
        let mean_single: f64 = (0..n)
            .map(|i| infonce_loss(&z2.row(i), &z1.row(i), &bank, 0.07).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((info.loss - mean_single).abs() < 1e-12);

        let ddm = ddm_batch_with_grad(&z1, &z2, &z3, &z3d, &bank, 0.07).unwrap();
        let mut sum1 = 0.0;
        let mut sum2 = 0.0;
        for i in 0..n {
            let (a, b, _) = ddm_loss(
                &z1.row(i),
                &z2.row(i),
                &z3.row(i),
                &z3d.row(i),
                &bank,
                0.07,
            )
            .unwrap();
            sum1 += a;
            sum2 += b;
        }
        assert!((ddm.l_d1 - sum1 / n as f64).abs() < 1e-12);
        assert!((ddm.l_d2 - sum2 / n as f64).abs() < 1e-12);
    }

    #[test]
    fn temperature_rescaling_preserves_argmax() {
        let mut rng = RngStream::new(7);
        for _ in 0..50 {
            let q = unit::<f64>((0..6).map(|_| rng.uniform(-1.0, 1.0)).collect());
            let pos = unit::<f64>((0..6).map(|_| rng.uniform(-1.0, 1.0)).collect());
            let mut bank = Array2::<f64>::zeros((4, 6));
            for mut row in bank.rows_mut() {
                row.assign(&unit::<f64>((0..6).map(|_| rng.uniform(-1.0, 1.0)).collect()));
            }
            let argmax = |p: &Array1<f64>| {
                (0..p.len())
                    .max_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap())
                    .unwrap()
            };
            let p1 = conditional_distribution(&q.view(), &pos.view(), &bank, 0.07).unwrap();
            let p2 = conditional_distribution(&q.view(), &pos.view(), &bank, 0.7).unwrap();
            assert_eq!(argmax(&p1), argmax(&p2));
        }
    }
}
