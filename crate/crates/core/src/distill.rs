//! Distillation losses: masked-feature matching, score-matrix matching, the
//! weighted combination with true-label cross entropy, and the two classic
//! comparators (temperature-softened logits KL, skip-mapped feature MSE).

use ndarray::{Array2, Array3, ArrayView3};
use thiserror::Error;

use crate::scoring::ScoreMatrix;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("weight {name} = {value} outside [0, 0.5]")]
    BadWeight { name: &'static str, value: f64 },
    #[error("alpha + beta = {0} exceeds 1")]
    WeightSumTooLarge(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("masked position {position} out of range for sequence length {len}")]
    BadMaskedPosition { position: usize, len: usize },
    #[error("softening temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("student layer {0} has no mapped teacher layer")]
    UnmappedLayer(usize),
}

/// Loss mixing weights for the three-signal objective; the cross-entropy
/// coefficient is 1 − α − β.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillWeights {
    alpha: f64,
    beta: f64,
}

impl DistillWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, DistillError> {
        for (name, value) in [("alpha", alpha), ("beta", beta)] {
            if !(0.0..=0.5).contains(&value) || value.is_nan() {
                return Err(DistillError::BadWeight { name, value });
            }
        }
        Ok(Self { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// The grid searched when sweeping: {0, 0.05, …, 0.5}.
    pub fn grid() -> Vec<f64> {
        (0..=10).map(|i| i as f64 * 0.05).collect()
    }
}

/// Teacher and student token features over one tower's batch, with the
/// masked positions both models consumed.
pub struct FeaturePair<'a> {
    pub teacher: ArrayView3<'a, f64>,
    pub student: ArrayView3<'a, f64>,
    pub masked_positions: &'a [Vec<usize>],
}

/// Masked-feature loss value; `active` is false when nothing was masked, in
/// which case the value is exactly zero and the weight is dropped from the
/// combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MgfdLoss {
    pub value: f64,
    pub active: bool,
}

impl MgfdLoss {
    pub fn inactive() -> Self {
        Self {
            value: 0.0,
            active: false,
        }
    }
}

fn check_pair(pair: &FeaturePair) -> Result<(), DistillError> {
    if pair.teacher.dim() != pair.student.dim() {
        return Err(DistillError::ShapeMismatch(format!(
            "teacher {:?} vs student {:?}",
            pair.teacher.dim(),
            pair.student.dim()
        )));
    }
    let (bsz, t_len, _) = pair.student.dim();
    if pair.masked_positions.len() != bsz {
        return Err(DistillError::ShapeMismatch(format!(
            "{} position lists for batch of {bsz}",
            pair.masked_positions.len()
        )));
    }
    for positions in pair.masked_positions {
        for &p in positions {
            if p >= t_len {
                return Err(DistillError::BadMaskedPosition {
                    position: p,
                    len: t_len,
                });
            }
        }
    }
    Ok(())
}

/// Mean squared error between teacher and student feature vectors at the
/// masked positions only, averaged over every masked position (and feature
/// dimension) across all supplied pairs.
pub fn mgfd_loss(pairs: &[FeaturePair]) -> Result<MgfdLoss, DistillError> {
    mgfd_loss_with_grads(pairs).map(|(loss, _)| loss)
}

/// Loss plus gradients with respect to each pair's student features.
/// Gradients are zero everywhere except the masked positions.
pub fn mgfd_loss_with_grads(
    pairs: &[FeaturePair],
) -> Result<(MgfdLoss, Vec<Array3<f64>>), DistillError> {
    let mut total_positions = 0usize;
    for pair in pairs {
        check_pair(pair)?;
        total_positions += pair.masked_positions.iter().map(Vec::len).sum::<usize>();
    }
    let mut grads: Vec<Array3<f64>> = pairs
        .iter()
        .map(|p| Array3::zeros(p.student.dim()))
        .collect();
    if total_positions == 0 {
        return Ok((MgfdLoss::inactive(), grads));
    }
    let d = pairs[0].student.dim().2;
    let denom = (total_positions * d) as f64;
    let mut sum_sq = 0.0;
    for (pair, grad) in pairs.iter().zip(grads.iter_mut()) {
        for (b, positions) in pair.masked_positions.iter().enumerate() {
            for &pos in positions {
                for i in 0..d {
                    let diff = pair.student[[b, pos, i]] - pair.teacher[[b, pos, i]];
                    sum_sq += diff * diff;
                    grad[[b, pos, i]] = 2.0 * diff / denom;
                }
            }
        }
    }
    Ok((
        MgfdLoss {
            value: sum_sq / denom,
            active: true,
        },
        grads,
    ))
}

/// Whether the score match covers the full matrix or only the per-triple
/// diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreDistillMode {
    Matrix,
    Diagonal,
}

/// Mean squared error between the raw (untempered) student and teacher
/// cosine matrices.
pub fn score_distill_loss(
    student: &ScoreMatrix,
    teacher: &ScoreMatrix,
    mode: ScoreDistillMode,
) -> Result<f64, DistillError> {
    score_distill_with_grad(student, teacher, mode).map(|(l, _)| l)
}

/// Loss plus its gradient with respect to the student's raw scores.
pub fn score_distill_with_grad(
    student: &ScoreMatrix,
    teacher: &ScoreMatrix,
    mode: ScoreDistillMode,
) -> Result<(f64, Array2<f64>), DistillError> {
    if student.dim() != teacher.dim() {
        return Err(DistillError::ShapeMismatch(format!(
            "student {:?} vs teacher {:?}",
            student.dim(),
            teacher.dim()
        )));
    }
    let (rows, cols) = student.dim();
    let mut grad = Array2::zeros((rows, cols));
    let mut loss = 0.0;
    match mode {
        ScoreDistillMode::Matrix => {
            let n = (rows * cols) as f64;
            for i in 0..rows {
                for j in 0..cols {
                    let diff = student.raw[[i, j]] - teacher.raw[[i, j]];
                    loss += diff * diff / n;
                    grad[[i, j]] = 2.0 * diff / n;
                }
            }
        }
        ScoreDistillMode::Diagonal => {
            let n = rows.min(cols) as f64;
            for i in 0..rows.min(cols) {
                let diff = student.raw[[i, i]] - teacher.raw[[i, i]];
                loss += diff * diff / n;
                grad[[i, i]] = 2.0 * diff / n;
            }
        }
    }
    Ok((loss, grad))
}

/// Weighted three-signal objective:
/// (1 − α − β)·CE + α·score + β·masked-feature. When the masked-feature loss
/// is inactive its weight is forced to zero, so a zero-mask stage reduces to
/// (1 − α)·CE + α·score.
pub fn combined_loss(
    ce: f64,
    score: f64,
    mgfd: MgfdLoss,
    weights: DistillWeights,
) -> Result<f64, DistillError> {
    let beta = if mgfd.active { weights.beta } else { 0.0 };
    let alpha = weights.alpha;
    if alpha + beta > 1.0 {
        return Err(DistillError::WeightSumTooLarge(alpha + beta));
    }
    Ok((1.0 - alpha - beta) * ce + alpha * score + beta * mgfd.value)
}

/// Temperature-softened logits distillation: mean over rows of
/// KL(teacher ‖ student) at temperature `t_soft`, scaled by `t_soft²`.
pub fn lkd_loss(
    student: &ScoreMatrix,
    teacher: &ScoreMatrix,
    t_soft: f64,
) -> Result<f64, DistillError> {
    lkd_with_grad(student, teacher, t_soft).map(|(l, _)| l)
}

pub fn lkd_with_grad(
    student: &ScoreMatrix,
    teacher: &ScoreMatrix,
    t_soft: f64,
) -> Result<(f64, Array2<f64>), DistillError> {
    if !(t_soft > 0.0) {
        return Err(DistillError::BadTemperature(t_soft));
    }
    if student.dim() != teacher.dim() {
        return Err(DistillError::ShapeMismatch(format!(
            "student {:?} vs teacher {:?}",
            student.dim(),
            teacher.dim()
        )));
    }
    let (rows, _) = student.dim();
    let soften = |m: &Array2<f64>| -> Array2<f64> {
        let mut out = m / t_soft;
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
    };
    let p_teacher = soften(&teacher.raw);
    let p_student = soften(&student.raw);
    let mut loss = 0.0;
    for (pt, ps) in p_teacher.iter().zip(p_student.iter()) {
        if *pt > 0.0 {
            loss += pt * (pt / ps).ln();
        }
    }
    loss *= t_soft * t_soft / rows as f64;
    // ∂/∂s of −Σ p_T log softmax(s/T) is (p_S − p_T)/T; the T² and row mean
    // factors fold in to give T·(p_S − p_T)/rows.
    let grad = (&p_student - &p_teacher) * (t_soft / rows as f64);
    Ok((loss, grad))
}

/// Skip-mapped feature distillation: MSE between L2-normalized pooled hidden
/// states at each mapped (student, teacher) layer pair, averaged over mapped
/// layers, the batch, and feature dimensions.
///
/// `layer_map[j]` names the teacher layer for student layer j, using the same
/// stride formula as layer selection. Pooling is a mean over positions with
/// an attention flag.
pub fn pkd_loss(
    student_layers: &[Array3<f64>],
    teacher_layers: &[Array3<f64>],
    layer_map: &[usize],
    flags: &[Vec<bool>],
) -> Result<f64, DistillError> {
    pkd_with_grads(student_layers, teacher_layers, layer_map, flags).map(|(l, _)| l)
}

fn pooled_rows(features: &Array3<f64>, flags: &[Vec<bool>]) -> Array2<f64> {
    let (bsz, _, d) = features.dim();
    let mut out = Array2::zeros((bsz, d));
    for b in 0..bsz {
        let n = flags[b].iter().filter(|&&f| f).count().max(1) as f64;
        for (pos, &real) in flags[b].iter().enumerate() {
            if real {
                for i in 0..d {
                    out[[b, i]] += features[[b, pos, i]] / n;
                }
            }
        }
    }
    out
}

/// Loss plus gradients with respect to each student layer's token features.
pub fn pkd_with_grads(
    student_layers: &[Array3<f64>],
    teacher_layers: &[Array3<f64>],
    layer_map: &[usize],
    flags: &[Vec<bool>],
) -> Result<(f64, Vec<Array3<f64>>), DistillError> {
    if layer_map.len() != student_layers.len() {
        return Err(DistillError::UnmappedLayer(layer_map.len()));
    }
    let mut grads: Vec<Array3<f64>> = student_layers
        .iter()
        .map(|l| Array3::zeros(l.dim()))
        .collect();
    if student_layers.is_empty() {
        return Ok((0.0, grads));
    }
    let (bsz, _, d) = student_layers[0].dim();
    let n_layers = student_layers.len() as f64;
    let denom = n_layers * bsz as f64 * d as f64;
    let mut loss = 0.0;
    for (j, (s_feats, grad)) in student_layers.iter().zip(grads.iter_mut()).enumerate() {
        let t_idx = layer_map[j];
        let t_feats = teacher_layers
            .get(t_idx)
            .ok_or(DistillError::UnmappedLayer(j))?;
        if s_feats.dim() != t_feats.dim() {
            return Err(DistillError::ShapeMismatch(format!(
                "student layer {j} {:?} vs teacher layer {t_idx} {:?}",
                s_feats.dim(),
                t_feats.dim()
            )));
        }
        let s_pooled = pooled_rows(s_feats, flags);
        let t_pooled = pooled_rows(t_feats, flags);
        for b in 0..bsz {
            let s_row = s_pooled.row(b);
            let t_row = t_pooled.row(b);
            let s_norm = s_row.dot(&s_row).sqrt().max(1e-12);
            let t_norm = t_row.dot(&t_row).sqrt().max(1e-12);
            let mut d_pooled = vec![0.0; d];
            let mut dot_vhat_dvhat = 0.0;
            for i in 0..d {
                let sh = s_row[i] / s_norm;
                let th = t_row[i] / t_norm;
                let diff = sh - th;
                loss += diff * diff / denom;
                d_pooled[i] = 2.0 * diff / denom;
                dot_vhat_dvhat += sh * d_pooled[i];
            }
            // back through the normalization, then spread over pooled positions
            let n_pos = flags[b].iter().filter(|&&f| f).count().max(1) as f64;
            for (pos, &real) in flags[b].iter().enumerate() {
                if real {
                    for i in 0..d {
                        let sh = s_row[i] / s_norm;
                        let dv = (d_pooled[i] - sh * dot_vhat_dvhat) / s_norm;
                        grad[[b, pos, i]] += dv / n_pos;
                    }
                }
            }
        }
    }
    Ok((loss, grads))
}

/// Mean pooled rows for external callers (diagnostics and tests).
pub fn mean_pool(features: &Array3<f64>, flags: &[Vec<bool>]) -> Array2<f64> {
    pooled_rows(features, flags)
}

/// L2-normalized copy of each row.
pub fn normalize_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt().max(1e-12);
        row /= norm;
    }
    out
}
