//! Cosine similarity scoring between query and candidate embeddings, the
//! in-batch score matrix, and true-label cross entropy.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("zero-norm embedding at row {0}; encoder output is degenerate")]
    ZeroVector(usize),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("label {label} out of range for {candidates} candidates")]
    BadLabel { label: usize, candidates: usize },
    #[error("score matrix contains a non-finite entry")]
    NonFinite,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Raw cosine similarities plus the temperature used for the softmax view.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    pub raw: Array2<f64>,
    pub temperature: f64,
}

impl ScoreMatrix {
    /// Temperature-scaled scores, `raw / τ`.
    pub fn scaled(&self) -> Array2<f64> {
        &self.raw / self.temperature
    }

    pub fn dim(&self) -> (usize, usize) {
        self.raw.dim()
    }
}

pub fn cosine_score(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64, ScoringError> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 {
        return Err(ScoringError::ZeroVector(0));
    }
    if nb == 0.0 {
        return Err(ScoringError::ZeroVector(1));
    }
    Ok(a.dot(&b) / (na * nb))
}

fn row_norms(m: ArrayView2<f64>) -> Result<Array1<f64>, ScoringError> {
    let mut norms = Array1::zeros(m.nrows());
    for (i, row) in m.rows().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if n == 0.0 {
            return Err(ScoringError::ZeroVector(i));
        }
        norms[i] = n;
    }
    Ok(norms)
}

/// Entry (i, j) is cos(query_i, candidate_j); the stored matrix is raw and
/// the temperature only applies through [`ScoreMatrix::scaled`].
pub fn score_matrix(
    queries: ArrayView2<f64>,
    candidates: ArrayView2<f64>,
    temperature: f64,
) -> Result<ScoreMatrix, ScoringError> {
    if !(temperature > 0.0) {
        return Err(ScoringError::BadTemperature(temperature));
    }
    if queries.ncols() != candidates.ncols() {
        return Err(ScoringError::ShapeMismatch(format!(
            "query dim {} vs candidate dim {}",
            queries.ncols(),
            candidates.ncols()
        )));
    }
    let qn = row_norms(queries)?;
    let cn = row_norms(candidates)?;
    let mut raw = queries.dot(&candidates.t());
    for ((i, j), v) in raw.indexed_iter_mut() {
        *v /= qn[i] * cn[j];
    }
    Ok(ScoreMatrix { raw, temperature })
}

/// Gradients of a loss through the cosine matrix back to both embedding
/// matrices. `d_raw` holds ∂loss/∂raw-cosine entries.
pub fn score_matrix_backward(
    queries: ArrayView2<f64>,
    candidates: ArrayView2<f64>,
    raw: &Array2<f64>,
    d_raw: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>), ScoringError> {
    if raw.dim() != d_raw.dim() {
        return Err(ScoringError::ShapeMismatch("gradient vs matrix".into()));
    }
    let qn = row_norms(queries)?;
    let cn = row_norms(candidates)?;
    let mut dq = Array2::zeros(queries.dim());
    let mut dc = Array2::zeros(candidates.dim());
    let d = queries.ncols();
    for i in 0..queries.nrows() {
        for j in 0..candidates.nrows() {
            let g = d_raw[[i, j]];
            if g == 0.0 {
                continue;
            }
            let s = raw[[i, j]];
            let denom = qn[i] * cn[j];
            // d cos/d q = c/(|q||c|) − s·q/|q|²  (and symmetrically for c)
            for k in 0..d {
                dq[[i, k]] += g * (candidates[[j, k]] / denom - s * queries[[i, k]] / (qn[i] * qn[i]));
                dc[[j, k]] += g * (queries[[i, k]] / denom - s * candidates[[j, k]] / (cn[j] * cn[j]));
            }
        }
    }
    Ok((dq, dc))
}

fn softmax_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean over rows of −log softmax(scaled row)[label].
pub fn cross_entropy_loss(matrix: &ScoreMatrix, labels: &[usize]) -> Result<f64, ScoringError> {
    Ok(cross_entropy_with_grad(matrix, labels)?.0)
}

/// Loss plus its gradient with respect to the raw (untempered) scores.
pub fn cross_entropy_with_grad(
    matrix: &ScoreMatrix,
    labels: &[usize],
) -> Result<(f64, Array2<f64>), ScoringError> {
    let (rows, cols) = matrix.dim();
    if labels.len() != rows {
        return Err(ScoringError::ShapeMismatch(format!(
            "{} labels for {rows} rows",
            labels.len()
        )));
    }
    if matrix.raw.iter().any(|v| !v.is_finite()) {
        return Err(ScoringError::NonFinite);
    }
    for &l in labels {
        if l >= cols {
            return Err(ScoringError::BadLabel {
                label: l,
                candidates: cols,
            });
        }
    }
    let scaled = matrix.scaled();
    let probs = softmax_rows(&scaled);
    let mut loss = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        loss -= probs[[i, l]].ln();
    }
    loss /= rows as f64;

    // d loss/d raw = (softmax − onehot) / (rows · τ)
    let mut grad = probs;
    for (i, &l) in labels.iter().enumerate() {
        grad[[i, l]] -= 1.0;
    }
    grad /= rows as f64 * matrix.temperature;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn cosine_basics() {
        let v = array![0.3, -1.2, 0.7];
        assert!((cosine_score(v.view(), v.view()).unwrap() - 1.0).abs() < 1e-12);
        let x = array![1.0, 0.0];
        let y = array![0.0, 1.0];
        assert_eq!(cosine_score(x.view(), y.view()).unwrap(), 0.0);
        let z = array![1.0, 1.0];
        assert!(
            (cosine_score(x.view(), z.view()).unwrap() - 0.7071067811865475).abs() < 1e-14
        );
        let zero = array![0.0, 0.0];
        assert!(matches!(
            cosine_score(zero.view(), z.view()),
            Err(ScoringError::ZeroVector(_))
        ));
    }

    #[test]
    fn matrix_identity_and_scale_invariance() {
        let v = array![[0.6, 0.8]];
        let m = score_matrix(v.view(), v.view(), 1.0).unwrap();
        assert!((m.raw[[0, 0]] - 1.0).abs() < 1e-12);

        let q = array![[1.0, 2.0], [0.5, -1.0]];
        let c = array![[2.0, 0.3], [0.0, 1.0]];
        let a = score_matrix(q.view(), c.view(), 0.05).unwrap();
        let scaled_q = &q * 3.7;
        let b = score_matrix(scaled_q.view(), c.view(), 0.05).unwrap();
        for (x, y) in a.raw.iter().zip(b.raw.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        // scaled view divides by τ
        assert!((a.scaled()[[0, 0]] - a.raw[[0, 0]] / 0.05).abs() < 1e-12);
    }

    #[test]
    fn matrix_matches_per_entry_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let q = Array2::from_shape_fn((3, 4), |_| rng.random::<f64>() - 0.5);
        let c = Array2::from_shape_fn((3, 4), |_| rng.random::<f64>() - 0.5);
        let m = score_matrix(q.view(), c.view(), 1.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let o = cosine_score(q.row(i), c.row(j)).unwrap();
                assert!((m.raw[[i, j]] - o).abs() < 1e-12);
            }
        }
        assert!(m.raw.iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
    }

    #[test]
    fn zero_norm_row_rejected() {
        let q = array![[0.0, 0.0], [1.0, 0.0]];
        let c = array![[1.0, 1.0]];
        assert!(matches!(
            score_matrix(q.view(), c.view(), 1.0),
            Err(ScoringError::ZeroVector(0))
        ));
    }

    #[test]
    fn uniform_rows_give_ln_c() {
        let m = ScoreMatrix {
            raw: Array2::zeros((2, 5)),
            temperature: 1.0,
        };
        let loss = cross_entropy_loss(&m, &[0, 3]).unwrap();
        assert!((loss - (5.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn wide_margin_drives_loss_to_zero() {
        let m = ScoreMatrix {
            raw: array![[60.0, 0.0, 0.0]],
            temperature: 1.0,
        };
        let loss = cross_entropy_loss(&m, &[0]).unwrap();
        assert!(loss >= 0.0 && loss < 1e-20);
    }

    #[test]
    fn frozen_softmax_oracle_value() {
        let m = ScoreMatrix {
            raw: array![[2.0, 0.0, 0.0]],
            temperature: 1.0,
        };
        let loss = cross_entropy_loss(&m, &[0]).unwrap();
        assert!((loss - 0.2395447662218845).abs() < 1e-14);
    }

    #[test]
    fn non_finite_and_bad_label_rejected() {
        let m = ScoreMatrix {
            raw: array![[f64::NAN, 0.0]],
            temperature: 1.0,
        };
        assert!(matches!(
            cross_entropy_loss(&m, &[0]),
            Err(ScoringError::NonFinite)
        ));
        let ok = ScoreMatrix {
            raw: array![[0.5, 0.0]],
            temperature: 1.0,
        };
        assert!(matches!(
            cross_entropy_loss(&ok, &[2]),
            Err(ScoringError::BadLabel { .. })
        ));
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let raw = Array2::from_shape_fn((3, 3), |_| rng.random::<f64>() * 2.0 - 1.0);
        let labels = [2usize, 0, 1];
        let m = ScoreMatrix {
            raw: raw.clone(),
            temperature: 0.1,
        };
        let (_, grad) = cross_entropy_with_grad(&m, &labels).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let mut plus = raw.clone();
                plus[[i, j]] += h;
                let mut minus = raw.clone();
                minus[[i, j]] -= h;
                let lp = cross_entropy_loss(
                    &ScoreMatrix { raw: plus, temperature: 0.1 },
                    &labels,
                )
                .unwrap();
                let lm = cross_entropy_loss(
                    &ScoreMatrix { raw: minus, temperature: 0.1 },
                    &labels,
                )
                .unwrap();
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - grad[[i, j]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cosine_backward_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let q = Array2::from_shape_fn((2, 3), |_| rng.random::<f64>() - 0.5);
        let c = Array2::from_shape_fn((4, 3), |_| rng.random::<f64>() - 0.5);
        let weights = Array2::from_shape_fn((2, 4), |_| rng.random::<f64>() - 0.5);
        let loss = |q: &Array2<f64>, c: &Array2<f64>| -> f64 {
            let m = score_matrix(q.view(), c.view(), 1.0).unwrap();
            (&m.raw * &weights).sum()
        };
        let base = score_matrix(q.view(), c.view(), 1.0).unwrap();
        let (dq, dc) = score_matrix_backward(q.view(), c.view(), &base.raw, &weights).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for k in 0..3 {
                let mut plus = q.clone();
                plus[[i, k]] += h;
                let mut minus = q.clone();
                minus[[i, k]] -= h;
                let fd = (loss(&plus, &c) - loss(&minus, &c)) / (2.0 * h);
                assert!((fd - dq[[i, k]]).abs() < 1e-7);
            }
        }
        for j in 0..4 {
            for k in 0..3 {
                let mut plus = c.clone();
                plus[[j, k]] += h;
                let mut minus = c.clone();
                minus[[j, k]] -= h;
                let fd = (loss(&q, &plus) - loss(&q, &minus)) / (2.0 * h);
                assert!((fd - dc[[j, k]]).abs() < 1e-7);
            }
        }
    }

    proptest! {
        /// Adding a constant to every entry of a row never changes the loss.
        #[test]
        fn softmax_shift_invariance(shift in -5.0f64..5.0, seed in 0u64..100) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let raw = Array2::from_shape_fn((2, 4), |_| rng.random::<f64>());
            let labels = [1usize, 3];
            let a = cross_entropy_loss(&ScoreMatrix { raw: raw.clone(), temperature: 1.0 }, &labels).unwrap();
            let mut shifted = raw;
            for mut row in shifted.rows_mut() {
                row += shift;
            }
            let b = cross_entropy_loss(&ScoreMatrix { raw: shifted, temperature: 1.0 }, &labels).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!(a >= 0.0);
        }

        /// Positive rescaling of an embedding row never changes the argmax.
        #[test]
        fn argmax_invariant_under_rescaling(c in 0.01f64..100.0, seed in 0u64..100) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let q = Array2::from_shape_fn((1, 6), |_| rng.random::<f64>() - 0.5);
            let cands = Array2::from_shape_fn((5, 6), |_| rng.random::<f64>() - 0.5);
            let base = score_matrix(q.view(), cands.view(), 1.0).unwrap();
            let scaled_q = &q * c;
            let scaled = score_matrix(scaled_q.view(), cands.view(), 1.0).unwrap();
            let argmax = |m: &ScoreMatrix| {
                m.raw.row(0)
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            };
            prop_assert_eq!(argmax(&base), argmax(&scaled));
        }
    }
}
