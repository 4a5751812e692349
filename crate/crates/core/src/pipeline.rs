//! Two-stage training orchestration: a cross-entropy baseline, an optional
//! same-size re-distillation pass, then grade-by-grade compression where each
//! trained student becomes the next stage's teacher. Includes the AdamW
//! optimizer with linear learning-rate decay and the run-directory artifact
//! layout.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{
    combined_loss, lkd_with_grad, mgfd_loss_with_grads, pkd_with_grads, score_distill_with_grad,
    DistillError, DistillWeights, FeaturePair, MgfdLoss, ScoreDistillMode,
};
use crate::encoder::{
    backward, encode_with_trace, layer_selection, EncoderConfig, EncoderError, OutputGradients,
};
use crate::eval::{evaluate_split, EvalError, EvalOptions, RankingMetrics};
use crate::kg::{FilterIndex, KnowledgeGraph, Split};
use crate::model::{save_checkpoint, BiEncoder, BiEncoderGrads, CheckpointError};
use crate::scoring::{cross_entropy_with_grad, score_matrix, score_matrix_backward, ScoringError};
use crate::text::{
    apply_mask, build_hr_sequence, build_tail_sequence, MaskedBatch, TextError, TokenSequence,
    Vocabulary,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("training diverged in stage {stage} at step {step}: non-finite loss")]
    Diverged { stage: String, step: usize },
    #[error("non-finite gradient for parameter {tensor}")]
    NonFiniteGradient { tensor: String },
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("teacher model required for distillation strategies")]
    TeacherRequired,
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("invalid schedule: {0}")]
    BadSchedule(String),
    #[error("teacher checkpoint changed during stage {0}")]
    TeacherMutated(String),
    #[error("failed to write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl PipelineError {
    /// True for failures of the numeric kind (divergence, non-finite values).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            PipelineError::Diverged { .. }
                | PipelineError::NonFiniteGradient { .. }
                | PipelineError::NonFiniteLoss
                | PipelineError::Scoring(ScoringError::NonFinite)
        )
    }
}

/// Stable sub-seed derivation so every random stream is a pure function of
/// the run seed plus a purpose tag.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut mix = |byte: u8| {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    for b in base.to_le_bytes() {
        mix(b);
    }
    for b in tag.bytes() {
        mix(b);
    }
    for b in index.to_le_bytes() {
        mix(b);
    }
    h
}

pub fn derive_rng(base: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, index))
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Learning rate decays linearly from the peak to zero across the budgeted
/// number of optimizer steps.
#[derive(Debug, Clone, Copy)]
pub struct LinearDecay {
    pub peak: f64,
    pub total_steps: usize,
}

impl LinearDecay {
    pub fn rate(&self, step: usize) -> f64 {
        let total = self.total_steps.max(1);
        let remaining = total.saturating_sub(step) as f64;
        self.peak * remaining / total as f64
    }
}

/// Step counter plus first/second-moment accumulators aligned with the
/// model's tensor enumeration.
pub struct TrainState {
    pub step: usize,
    pub schedule: LinearDecay,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl TrainState {
    pub fn new(model: &BiEncoder, schedule: LinearDecay) -> Self {
        let sizes: Vec<usize> = model.tensors().iter().map(|(_, t)| t.len()).collect();
        Self {
            step: 0,
            schedule,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.schedule.rate(self.step)
    }
}

/// One decoupled-weight-decay update on a flat parameter slice. Updated
/// parameters are snapped to the nearest f32 so checkpoints stay bit-exact.
pub fn adamw_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: usize,
    lr: f64,
    opt: &AdamW,
) {
    let bc1 = 1.0 - opt.beta1.powi(step as i32);
    let bc2 = 1.0 - opt.beta2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        let mut p = params[i];
        p -= lr * opt.weight_decay * p;
        m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g;
        v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p -= lr * m_hat / (v_hat.sqrt() + opt.epsilon);
        params[i] = p as f32 as f64;
    }
}

/// Applies one AdamW step over every tensor of the model.
pub fn optimizer_step(
    state: &mut TrainState,
    model: &mut BiEncoder,
    grads: &BiEncoderGrads,
    opt: &AdamW,
) -> Result<(), PipelineError> {
    for (name, g) in grads.tensors() {
        if g.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(PipelineError::NonFiniteGradient { tensor: name });
        }
    }
    let lr = state.learning_rate();
    state.step += 1;
    let step = state.step;
    let grad_tensors = grads.tensors();
    for (idx, (name, mut p)) in model.tensors_mut().into_iter().enumerate() {
        debug_assert_eq!(name, grad_tensors[idx].0);
        adamw_update(
            p.as_slice_mut(),
            grad_tensors[idx].1.as_slice(),
            &mut state.m[idx],
            &mut state.v[idx],
            step,
            lr,
            opt,
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// schedule types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Pmd,
    NoMgfd,
    Lkd,
    Pkd,
    None,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pmd" => Ok(Strategy::Pmd),
            "no-mgfd" => Ok(Strategy::NoMgfd),
            "lkd" => Ok(Strategy::Lkd),
            "pkd" => Ok(Strategy::Pkd),
            "none" => Ok(Strategy::None),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Pmd => "pmd",
            Strategy::NoMgfd => "no-mgfd",
            Strategy::Lkd => "lkd",
            Strategy::Pkd => "pkd",
            Strategy::None => "none",
        }
    }

    /// Only the masked-feature strategy actually masks inputs.
    pub fn uses_masking(&self) -> bool {
        matches!(self, Strategy::Pmd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Decreasing,
    Fixed,
}

impl std::str::FromStr for MaskMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "decreasing" => Ok(MaskMode::Decreasing),
            "fixed" => Ok(MaskMode::Fixed),
            other => Err(format!("unknown mask mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    LayerSelect,
    Copy,
    Fresh,
}

impl std::str::FromStr for InitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "layer-select" => Ok(InitMode::LayerSelect),
            "copy" => Ok(InitMode::Copy),
            "fresh" => Ok(InitMode::Fresh),
            other => Err(format!("unknown init mode `{other}`")),
        }
    }
}

/// One distillation stage: the student depth, its mask rate, loss weights,
/// and training budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSpec {
    pub grade: usize,
    pub mask_rate: f64,
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub init: InitMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillSchedule {
    pub stages: Vec<StageSpec>,
    pub mode: MaskMode,
    pub strategy: Strategy,
}

impl DistillSchedule {
    /// Builds a schedule from grade and mask-rate lists. In fixed mode every
    /// stage reuses the first rate. The first stage warm-starts by copy, the
    /// rest by layer selection.
    #[allow(clippy::too_many_arguments)]
    pub fn from_lists(
        grades: &[usize],
        rates: &[f64],
        alpha: f64,
        beta: f64,
        epochs: usize,
        learning_rate: f64,
        batch_size: usize,
        mode: MaskMode,
        strategy: Strategy,
    ) -> Result<Self, PipelineError> {
        if grades.len() != rates.len() {
            return Err(PipelineError::BadSchedule(format!(
                "{} grades but {} mask rates",
                grades.len(),
                rates.len()
            )));
        }
        let stages = grades
            .iter()
            .zip(rates)
            .enumerate()
            .map(|(i, (&grade, &rate))| StageSpec {
                grade,
                mask_rate: match mode {
                    MaskMode::Decreasing => rate,
                    MaskMode::Fixed => rates[0],
                },
                alpha,
                beta,
                epochs,
                learning_rate,
                batch_size,
                init: if i == 0 {
                    InitMode::Copy
                } else {
                    InitMode::LayerSelect
                },
            })
            .collect();
        Ok(Self {
            stages,
            mode,
            strategy,
        })
    }

    pub fn validate(&self, teacher_layers: usize) -> Result<(), PipelineError> {
        if self.stages.is_empty() {
            return Err(PipelineError::BadSchedule("no stages".into()));
        }
        for pair in self.stages.windows(2) {
            if pair[1].grade >= pair[0].grade {
                return Err(PipelineError::BadSchedule(
                    "grades must strictly decrease across stages".into(),
                ));
            }
        }
        if self.stages[0].grade > teacher_layers {
            return Err(PipelineError::BadSchedule(format!(
                "first grade {} exceeds teacher depth {teacher_layers}",
                self.stages[0].grade
            )));
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if !(0.0..=0.5).contains(&stage.mask_rate) || stage.mask_rate.is_nan() {
                return Err(PipelineError::BadSchedule(format!(
                    "stage {i}: mask rate {} outside [0, 0.5]",
                    stage.mask_rate
                )));
            }
            DistillWeights::new(stage.alpha, stage.beta)?;
            if stage.epochs == 0 || stage.batch_size == 0 {
                return Err(PipelineError::BadSchedule(format!(
                    "stage {i}: epochs and batch size must be positive"
                )));
            }
            if !(stage.learning_rate > 0.0) {
                return Err(PipelineError::BadSchedule(format!(
                    "stage {i}: learning rate must be positive"
                )));
            }
        }
        match self.mode {
            MaskMode::Decreasing => {
                for pair in self.stages.windows(2) {
                    if pair[1].mask_rate > pair[0].mask_rate {
                        return Err(PipelineError::BadSchedule(
                            "mask rate must be non-increasing in decreasing mode".into(),
                        ));
                    }
                }
            }
            MaskMode::Fixed => {
                let first = self.stages[0].mask_rate;
                if self.stages.iter().any(|s| s.mask_rate != first) {
                    return Err(PipelineError::BadSchedule(
                        "mask rate must be constant in fixed mode".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Which block's token features feed the masked-feature loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureLayer {
    Final,
    Index(usize),
}

impl FeatureLayer {
    fn resolve(&self, layers: usize) -> Result<usize, PipelineError> {
        match self {
            FeatureLayer::Final => Ok(layers),
            FeatureLayer::Index(k) => {
                if *k == 0 || *k > layers {
                    Err(PipelineError::BadSchedule(format!(
                        "feature layer {k} outside 1..={layers}"
                    )))
                } else {
                    Ok(*k)
                }
            }
        }
    }
}

/// Knobs shared by every stage of a run.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub seed: u64,
    pub max_len: usize,
    pub weight_decay: f64,
    pub temperature: f64,
    pub score_mode: ScoreDistillMode,
    pub lkd_temperature: f64,
    pub feature_layer: FeatureLayer,
    pub mask_tail: bool,
    /// Score against every entity instead of in-batch tails.
    pub full_softmax: bool,
    pub eval_batch: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            seed: 7,
            max_len: 64,
            weight_decay: 0.01,
            temperature: 0.05,
            score_mode: ScoreDistillMode::Matrix,
            lkd_temperature: 2.0,
            feature_layer: FeatureLayer::Final,
            mask_tail: true,
            full_softmax: false,
            eval_batch: 64,
        }
    }
}

// ---------------------------------------------------------------------------
// one training step
// ---------------------------------------------------------------------------

/// Per-component loss values for one step.
#[derive(Debug, Clone, Copy)]
pub struct LossComponents {
    pub total: f64,
    pub ce: f64,
    pub score: f64,
    pub mgfd: f64,
    pub mgfd_active: bool,
    pub lkd: f64,
    pub pkd: f64,
}

pub struct StepOptions {
    pub strategy: Strategy,
    pub weights: DistillWeights,
    pub temperature: f64,
    pub score_mode: ScoreDistillMode,
    pub lkd_temperature: f64,
    pub feature_layer: FeatureLayer,
}

/// Computes the strategy's combined loss on one masked batch and the exact
/// gradients for every student parameter. The teacher (when present) is
/// read-only and runs in evaluation mode on the same masked inputs.
pub fn training_step(
    student: &BiEncoder,
    teacher: Option<&BiEncoder>,
    batch: &MaskedBatch,
    labels: &[usize],
    opts: &StepOptions,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(LossComponents, BiEncoderGrads), PipelineError> {
    let (s_hr, s_hr_trace) =
        encode_with_trace(&student.hr, &batch.hr, dropout_rng.as_deref_mut())?;
    let (s_tail, s_tail_trace) =
        encode_with_trace(&student.tail, &batch.tails, dropout_rng.as_deref_mut())?;
    let s_matrix = score_matrix(s_hr.pooled.view(), s_tail.pooled.view(), opts.temperature)?;
    let (ce, d_ce_raw) = cross_entropy_with_grad(&s_matrix, labels)?;

    let mut components = LossComponents {
        total: 0.0,
        ce,
        score: 0.0,
        mgfd: 0.0,
        mgfd_active: false,
        lkd: 0.0,
        pkd: 0.0,
    };

    let mut hr_out_grads = OutputGradients::default();
    let mut tail_out_grads = OutputGradients::default();
    let mut alpha_value = 0.0;
    let mut d_alpha_raw: Option<Array2<f64>> = None;
    let mut beta_loss = MgfdLoss::inactive();

    let weights = if matches!(opts.strategy, Strategy::None) {
        DistillWeights::new(0.0, 0.0)?
    } else {
        opts.weights
    };

    if !matches!(opts.strategy, Strategy::None) {
        let teacher = teacher.ok_or(PipelineError::TeacherRequired)?;
        let (t_hr, t_hr_trace) = encode_with_trace(&teacher.hr, &batch.hr, None)?;
        let (t_tail, t_tail_trace) = encode_with_trace(&teacher.tail, &batch.tails, None)?;
        let t_matrix =
            score_matrix(t_hr.pooled.view(), t_tail.pooled.view(), opts.temperature)?;

        match opts.strategy {
            Strategy::Pmd | Strategy::NoMgfd => {
                let (value, grad) =
                    score_distill_with_grad(&s_matrix, &t_matrix, opts.score_mode)?;
                components.score = value;
                alpha_value = value;
                d_alpha_raw = Some(grad);
            }
            Strategy::Lkd | Strategy::Pkd => {
                let (value, grad) = lkd_with_grad(&s_matrix, &t_matrix, opts.lkd_temperature)?;
                components.lkd = value;
                alpha_value = value;
                d_alpha_raw = Some(grad);
            }
            Strategy::None => unreachable!(),
        }

        match opts.strategy {
            Strategy::Pmd => {
                let k_s = opts.feature_layer.resolve(student.config().layers)?;
                let k_t = opts.feature_layer.resolve(teacher.config().layers)?;
                let pairs = [
                    FeaturePair {
                        teacher: t_hr_trace.layer_output(k_t).view(),
                        student: s_hr_trace.layer_output(k_s).view(),
                        masked_positions: &batch.hr_masked,
                    },
                    FeaturePair {
                        teacher: t_tail_trace.layer_output(k_t).view(),
                        student: s_tail_trace.layer_output(k_s).view(),
                        masked_positions: &batch.tail_masked,
                    },
                ];
                let (loss, mut grads) = mgfd_loss_with_grads(&pairs)?;
                components.mgfd = loss.value;
                components.mgfd_active = loss.active;
                beta_loss = loss;
                if loss.active && weights.beta() > 0.0 {
                    let tail_grad = grads.pop().expect("two pairs");
                    let hr_grad = grads.pop().expect("two pairs");
                    hr_out_grads
                        .layer_features
                        .push((k_s, hr_grad * weights.beta()));
                    tail_out_grads
                        .layer_features
                        .push((k_s, tail_grad * weights.beta()));
                }
            }
            Strategy::Pkd => {
                let l_s = student.config().layers;
                let l_t = teacher.config().layers;
                let map = layer_selection(l_t, l_s);
                let collect = |trace: &crate::encoder::ForwardTrace, layers: usize| {
                    (1..=layers)
                        .map(|k| trace.layer_output(k).clone())
                        .collect::<Vec<_>>()
                };
                let s_hr_layers = collect(&s_hr_trace, l_s);
                let t_hr_layers = collect(&t_hr_trace, l_t);
                let s_tail_layers = collect(&s_tail_trace, l_s);
                let t_tail_layers = collect(&t_tail_trace, l_t);
                let (hr_value, hr_grads) = pkd_with_grads(
                    &s_hr_layers,
                    &t_hr_layers,
                    &map,
                    s_hr_trace.attention_flags(),
                )?;
                let (tail_value, tail_grads) = pkd_with_grads(
                    &s_tail_layers,
                    &t_tail_layers,
                    &map,
                    s_tail_trace.attention_flags(),
                )?;
                // mean over the two towers
                let value = 0.5 * (hr_value + tail_value);
                components.pkd = value;
                beta_loss = MgfdLoss {
                    value,
                    active: true,
                };
                if weights.beta() > 0.0 {
                    for (j, g) in hr_grads.into_iter().enumerate() {
                        hr_out_grads
                            .layer_features
                            .push((j + 1, g * (0.5 * weights.beta())));
                    }
                    for (j, g) in tail_grads.into_iter().enumerate() {
                        tail_out_grads
                            .layer_features
                            .push((j + 1, g * (0.5 * weights.beta())));
                    }
                }
            }
            Strategy::NoMgfd | Strategy::Lkd => {}
            Strategy::None => unreachable!(),
        }
    }

    components.total = combined_loss(ce, alpha_value, beta_loss, weights)?;
    if !components.total.is_finite() {
        return Err(PipelineError::NonFiniteLoss);
    }

    let alpha_eff = if d_alpha_raw.is_some() {
        weights.alpha()
    } else {
        0.0
    };
    let beta_eff = if beta_loss.active { weights.beta() } else { 0.0 };
    let ce_coeff = 1.0 - alpha_eff - beta_eff;
    let mut d_raw = d_ce_raw * ce_coeff;
    if let Some(da) = d_alpha_raw {
        d_raw += &(da * alpha_eff);
    }
    let (d_hr_pooled, d_tail_pooled) = score_matrix_backward(
        s_hr.pooled.view(),
        s_tail.pooled.view(),
        &s_matrix.raw,
        &d_raw,
    )?;
    hr_out_grads.pooled = Some(d_hr_pooled);
    tail_out_grads.pooled = Some(d_tail_pooled);

    let hr_grads = backward(&student.hr, &s_hr_trace, &hr_out_grads)?;
    let tail_grads = backward(&student.tail, &s_tail_trace, &tail_out_grads)?;
    Ok((
        components,
        BiEncoder {
            hr: hr_grads,
            tail: tail_grads,
        },
    ))
}

// ---------------------------------------------------------------------------
// data preparation and the stage loop
// ---------------------------------------------------------------------------

/// Tokenized inputs cached once per run: one query sequence per train triple
/// and one candidate sequence per entity.
pub struct PreparedData<'a> {
    pub graph: &'a KnowledgeGraph,
    pub vocab: &'a Vocabulary,
    pub filter: &'a FilterIndex,
    hr_seqs: Vec<TokenSequence>,
    tail_seqs: Vec<TokenSequence>,
}

impl<'a> PreparedData<'a> {
    pub fn build(
        graph: &'a KnowledgeGraph,
        vocab: &'a Vocabulary,
        filter: &'a FilterIndex,
        max_len: usize,
    ) -> Result<Self, TextError> {
        let hr_seqs = graph
            .train
            .iter()
            .map(|t| build_hr_sequence(graph, t.head, t.relation, vocab, max_len))
            .collect::<Result<_, _>>()?;
        let tail_seqs = (0..graph.num_entities())
            .map(|e| build_tail_sequence(graph, e, vocab, max_len))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            graph,
            vocab,
            filter,
            hr_seqs,
            tail_seqs,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRow {
    pub stage: String,
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub score: f64,
    pub mgfd: f64,
    pub mgfd_active: bool,
    pub lkd: f64,
    pub pkd: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValRow {
    pub stage: String,
    pub epoch: usize,
    pub val_mrr: f64,
}

/// In-memory training and validation logs, flushed to CSV by the run layer.
#[derive(Debug, Default)]
pub struct RunLogs {
    pub steps: Vec<StepRow>,
    pub epochs: Vec<ValRow>,
}

impl RunLogs {
    pub fn steps_csv(&self) -> String {
        let mut out =
            String::from("stage,step,lr,ce,score,mgfd,mgfd_active,lkd,pkd,total\n");
        for r in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.stage,
                r.step,
                r.lr,
                r.ce,
                r.score,
                r.mgfd,
                r.mgfd_active,
                r.lkd,
                r.pkd,
                r.total
            ));
        }
        out
    }

    pub fn val_csv(&self) -> String {
        let mut out = String::from("stage,epoch,val_mrr\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{},{}\n", r.stage, r.epoch, r.val_mrr));
        }
        out
    }
}

/// Result of one trained stage: the best-validation model and its traces.
pub struct StageResult {
    pub model: BiEncoder,
    pub best_val_mrr: f64,
    pub steps_run: usize,
}

struct StageAlgo {
    name: String,
    stage_index: u64,
    strategy: Strategy,
    mask_rate: f64,
    weights: DistillWeights,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    step_budget: Option<usize>,
}

fn run_training_loop(
    mut student: BiEncoder,
    teacher: Option<&BiEncoder>,
    algo: &StageAlgo,
    data: &PreparedData,
    settings: &TrainSettings,
    logs: &mut RunLogs,
) -> Result<StageResult, PipelineError> {
    let graph = data.graph;
    let n_train = graph.train.len();
    if n_train == 0 {
        return Err(PipelineError::BadSchedule("empty train split".into()));
    }
    let steps_per_epoch = n_train.div_ceil(algo.batch_size);
    let planned = algo.epochs * steps_per_epoch;
    let total_steps = algo.step_budget.unwrap_or(planned).min(planned);
    let mut state = TrainState::new(
        &student,
        LinearDecay {
            peak: algo.learning_rate,
            total_steps,
        },
    );
    let opt = AdamW {
        weight_decay: settings.weight_decay,
        ..AdamW::default()
    };
    let step_opts = StepOptions {
        strategy: algo.strategy,
        weights: algo.weights,
        temperature: settings.temperature,
        score_mode: settings.score_mode,
        lkd_temperature: settings.lkd_temperature,
        feature_layer: settings.feature_layer,
    };
    let eval_opts = EvalOptions {
        max_len: settings.max_len,
        batch_size: settings.eval_batch,
        raw: false,
        collect_records: false,
    };
    let effective_rate = if algo.strategy.uses_masking() {
        algo.mask_rate
    } else {
        0.0
    };
    let stage_seed = derive_seed(settings.seed, "stage", algo.stage_index);
    let use_dropout = student.config().dropout > 0.0;

    let mut best: Option<(f64, BiEncoder)> = None;
    let mut global_step = 0usize;

    'epochs: for epoch in 0..algo.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut derive_rng(stage_seed, "shuffle", epoch as u64));
        for chunk in order.chunks(algo.batch_size) {
            if global_step >= total_steps {
                break 'epochs;
            }
            let hr_batch: Vec<TokenSequence> =
                chunk.iter().map(|&i| data.hr_seqs[i].clone()).collect();
            let (tail_batch, labels): (Vec<TokenSequence>, Vec<usize>) =
                if settings.full_softmax {
                    (
                        data.tail_seqs.clone(),
                        chunk.iter().map(|&i| graph.train[i].tail).collect(),
                    )
                } else {
                    (
                        chunk
                            .iter()
                            .map(|&i| data.tail_seqs[graph.train[i].tail].clone())
                            .collect(),
                        (0..chunk.len()).collect(),
                    )
                };
            let mut mask_rng = derive_rng(stage_seed, "mask", global_step as u64);
            let batch = apply_mask(
                &hr_batch,
                &tail_batch,
                effective_rate,
                settings.mask_tail,
                &mut mask_rng,
            )?;
            let mut dropout_rng = if use_dropout {
                Some(derive_rng(stage_seed, "dropout", global_step as u64))
            } else {
                None
            };
            let step_result = training_step(
                &student,
                teacher,
                &batch,
                &labels,
                &step_opts,
                dropout_rng.as_mut(),
            );
            let (components, grads) = match step_result {
                Ok(ok) => ok,
                Err(PipelineError::NonFiniteLoss) => {
                    return Err(PipelineError::Diverged {
                        stage: algo.name.clone(),
                        step: global_step,
                    })
                }
                Err(other) => return Err(other),
            };
            logs.steps.push(StepRow {
                stage: algo.name.clone(),
                step: global_step,
                lr: state.learning_rate(),
                ce: components.ce,
                score: components.score,
                mgfd: components.mgfd,
                mgfd_active: components.mgfd_active,
                lkd: components.lkd,
                pkd: components.pkd,
                total: components.total,
            });
            optimizer_step(&mut state, &mut student, &grads, &opt)?;
            global_step += 1;
        }

        if !graph.valid.is_empty() {
            let (metrics, _) = evaluate_split(
                &student,
                graph,
                data.vocab,
                data.filter,
                Split::Valid,
                &eval_opts,
            )?;
            logs.epochs.push(ValRow {
                stage: algo.name.clone(),
                epoch,
                val_mrr: metrics.mrr,
            });
            if best.as_ref().is_none_or(|(mrr, _)| metrics.mrr > *mrr) {
                best = Some((metrics.mrr, student.clone()));
            }
        }
    }

    let (best_val_mrr, model) = best.unwrap_or((f64::NAN, student));
    Ok(StageResult {
        model,
        best_val_mrr,
        steps_run: global_step,
    })
}

/// Trains the bi-encoder with cross entropy only (no teacher, no masking).
pub fn train_baseline(
    config: &EncoderConfig,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    data: &PreparedData,
    settings: &TrainSettings,
    logs: &mut RunLogs,
) -> Result<StageResult, PipelineError> {
    train_scratch(
        config,
        epochs,
        learning_rate,
        batch_size,
        None,
        data,
        settings,
        logs,
    )
}

/// Cross-entropy-only training with an optional hard cap on optimizer steps
/// (for budget-matched comparisons); the cap also sets the decay horizon.
#[allow(clippy::too_many_arguments)]
pub fn train_scratch(
    config: &EncoderConfig,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    step_budget: Option<usize>,
    data: &PreparedData,
    settings: &TrainSettings,
    logs: &mut RunLogs,
) -> Result<StageResult, PipelineError> {
    let student = BiEncoder::init(config, derive_seed(settings.seed, "baseline-init", 0))?;
    run_training_loop(
        student,
        None,
        &StageAlgo {
            name: "baseline".into(),
            stage_index: 0,
            strategy: Strategy::None,
            mask_rate: 0.0,
            weights: DistillWeights::new(0.0, 0.0)?,
            epochs,
            learning_rate,
            batch_size,
            step_budget,
        },
        data,
        settings,
        logs,
    )
}

fn init_student(
    teacher: &BiEncoder,
    stage: &StageSpec,
    stage_index: u64,
    settings: &TrainSettings,
) -> Result<BiEncoder, PipelineError> {
    let config = teacher.config().at_layers(stage.grade);
    match stage.init {
        InitMode::Copy => {
            if teacher.config().layers != stage.grade {
                return Err(PipelineError::ArchitectureMismatch(format!(
                    "copy init needs matching depth: teacher {} vs grade {}",
                    teacher.config().layers,
                    stage.grade
                )));
            }
            Ok(teacher.clone())
        }
        InitMode::LayerSelect => Ok(teacher.select_layers(&config)?),
        InitMode::Fresh => Ok(BiEncoder::init(
            &config,
            derive_seed(settings.seed, "stage-init", stage_index),
        )?),
    }
}

/// Runs one distillation stage against a frozen teacher.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    teacher: &BiEncoder,
    stage: &StageSpec,
    stage_index: u64,
    strategy: Strategy,
    data: &PreparedData,
    settings: &TrainSettings,
    logs: &mut RunLogs,
    step_budget: Option<usize>,
) -> Result<StageResult, PipelineError> {
    let student = init_student(teacher, stage, stage_index, settings)?;
    run_training_loop(
        student,
        Some(teacher),
        &StageAlgo {
            name: format!("stage-{}", stage.grade),
            stage_index,
            strategy,
            mask_rate: stage.mask_rate,
            weights: DistillWeights::new(stage.alpha, stage.beta)?,
            epochs: stage.epochs,
            learning_rate: stage.learning_rate,
            batch_size: stage.batch_size,
            step_budget,
        },
        data,
        settings,
        logs,
    )
}

/// Same-size re-distillation of a trained model under the masked-feature
/// objective; the output becomes the top-grade teacher.
#[allow(clippy::too_many_arguments)]
pub fn pre_distill(
    teacher: &BiEncoder,
    mask_rate: f64,
    weights: DistillWeights,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    data: &PreparedData,
    settings: &TrainSettings,
    logs: &mut RunLogs,
) -> Result<StageResult, PipelineError> {
    let stage = StageSpec {
        grade: teacher.config().layers,
        mask_rate,
        alpha: weights.alpha(),
        beta: weights.beta(),
        epochs,
        learning_rate,
        batch_size,
        init: InitMode::Copy,
    };
    run_stage(
        teacher, &stage, 1, Strategy::Pmd, data, settings, logs, None,
    )
}

/// Runs every stage of the schedule, wiring each trained student in as the
/// next stage's teacher. `on_stage` fires after each completed stage so
/// callers can persist checkpoints before a later stage can fail.
pub fn progressive_distill(
    first_teacher: &BiEncoder,
    schedule: &DistillSchedule,
    data: &PreparedData,
    settings: &TrainSettings,
    logs: &mut RunLogs,
    mut on_stage: impl FnMut(usize, &StageSpec, &StageResult) -> Result<(), PipelineError>,
) -> Result<Vec<StageResult>, PipelineError> {
    schedule.validate(first_teacher.config().layers)?;
    let mut results = Vec::new();
    let mut teacher = first_teacher.clone();
    for (i, stage) in schedule.stages.iter().enumerate() {
        let result = run_stage(
            &teacher,
            stage,
            (i + 1) as u64,
            schedule.strategy,
            data,
            settings,
            logs,
            None,
        )?;
        teacher = result.model.clone();
        on_stage(i, stage, &result)?;
        results.push(result);
    }
    Ok(results)
}

// ---------------------------------------------------------------------------
// run directory orchestration
// ---------------------------------------------------------------------------

/// The per-grade report written as JSON next to each checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub grade: usize,
    pub parameter_count: u64,
    pub mask_rate: f64,
    pub alpha: f64,
    pub beta: f64,
    #[serde(rename = "MR")]
    pub mr: f64,
    #[serde(rename = "MRR")]
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub seed: u64,
    pub wall_clock_seconds: f64,
}

impl StageReport {
    pub fn from_metrics(
        grade: usize,
        parameter_count: u64,
        mask_rate: f64,
        alpha: f64,
        beta: f64,
        metrics: &RankingMetrics,
        seed: u64,
        wall_clock_seconds: f64,
    ) -> Self {
        Self {
            grade,
            parameter_count,
            mask_rate,
            alpha,
            beta,
            mr: metrics.mr,
            mrr: metrics.mrr,
            hits1: metrics.hits1,
            hits3: metrics.hits3,
            hits10: metrics.hits10,
            seed,
            wall_clock_seconds,
        }
    }
}

/// Everything the full pipeline needs beyond the prepared data.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub encoder: EncoderConfig,
    pub schedule: DistillSchedule,
    pub baseline_epochs: usize,
    pub baseline_learning_rate: f64,
    pub baseline_batch_size: usize,
    pub settings: TrainSettings,
}

pub struct RunSummary {
    pub baseline_report: StageReport,
    pub stage_reports: Vec<StageReport>,
    pub dir: PathBuf,
}

fn write_file(path: &Path, contents: &str) -> Result<(), PipelineError> {
    fs::write(path, contents).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_report(dir: &Path, name: &str, report: &StageReport) -> Result<(), PipelineError> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write_file(&dir.join(name), &(json + "\n"))
}

fn test_metrics(
    model: &BiEncoder,
    data: &PreparedData,
    settings: &TrainSettings,
) -> Result<RankingMetrics, PipelineError> {
    let opts = EvalOptions {
        max_len: settings.max_len,
        batch_size: settings.eval_batch,
        raw: false,
        collect_records: false,
    };
    let (metrics, _) = evaluate_split(
        model,
        data.graph,
        data.vocab,
        data.filter,
        Split::Test,
        &opts,
    )?;
    Ok(metrics)
}

/// Trains baseline plus schedule and lays out the run directory: the frozen
/// config snapshot, the vocabulary, one checkpoint and one metrics report
/// per stage, and the append-only training/validation logs. Completed stage
/// artifacts survive a later stage's failure.
pub fn execute_run(
    dir: &Path,
    config_snapshot: &str,
    plan: &RunPlan,
    data: &PreparedData,
) -> Result<RunSummary, PipelineError> {
    fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write_file(&dir.join("config.txt"), config_snapshot)?;
    data.vocab
        .save(&dir.join("vocab.txt"))
        .map_err(PipelineError::Text)?;

    let settings = &plan.settings;
    let mut logs = RunLogs::default();
    let flush_logs = |logs: &RunLogs| -> Result<(), PipelineError> {
        write_file(&dir.join("train_log.csv"), &logs.steps_csv())?;
        write_file(&dir.join("val_log.csv"), &logs.val_csv())
    };

    let started = Instant::now();
    let baseline = match train_baseline(
        &plan.encoder,
        plan.baseline_epochs,
        plan.baseline_learning_rate,
        plan.baseline_batch_size,
        data,
        settings,
        &mut logs,
    ) {
        Ok(result) => result,
        Err(e) => {
            flush_logs(&logs)?;
            return Err(e);
        }
    };
    let baseline_path = dir.join("baseline.pmdc");
    save_checkpoint(&baseline_path, &baseline.model)?;
    let metrics = test_metrics(&baseline.model, data, settings)?;
    let baseline_report = StageReport::from_metrics(
        plan.encoder.layers,
        baseline.model.num_params(),
        0.0,
        0.0,
        0.0,
        &metrics,
        settings.seed,
        started.elapsed().as_secs_f64(),
    );
    write_report(dir, "metrics-baseline.json", &baseline_report)?;
    log::info!(
        "baseline done: test MRR {:.4}, best val MRR {:.4}",
        metrics.mrr,
        baseline.best_val_mrr
    );

    let mut stage_reports = Vec::new();
    if !matches!(plan.schedule.strategy, Strategy::None) {
        let mut teacher_path = baseline_path.clone();
        let mut stage_clock = Instant::now();
        let outcome = progressive_distill(
            &baseline.model,
            &plan.schedule,
            data,
            settings,
            &mut logs,
            |_, stage, result| {
                let teacher_before = fs::read(&teacher_path).map_err(|source| {
                    PipelineError::Io {
                        path: teacher_path.clone(),
                        source,
                    }
                })?;
                let ckpt = dir.join(format!("stage-{}.pmdc", stage.grade));
                save_checkpoint(&ckpt, &result.model)?;
                let metrics = test_metrics(&result.model, data, settings)?;
                let effective_rate = if plan.schedule.strategy.uses_masking() {
                    stage.mask_rate
                } else {
                    0.0
                };
                let report = StageReport::from_metrics(
                    stage.grade,
                    result.model.num_params(),
                    effective_rate,
                    stage.alpha,
                    stage.beta,
                    &metrics,
                    settings.seed,
                    stage_clock.elapsed().as_secs_f64(),
                );
                write_report(dir, &format!("metrics-{}.json", stage.grade), &report)?;
                let teacher_after =
                    fs::read(&teacher_path).map_err(|source| PipelineError::Io {
                        path: teacher_path.clone(),
                        source,
                    })?;
                if teacher_before != teacher_after {
                    return Err(PipelineError::TeacherMutated(format!(
                        "stage-{}",
                        stage.grade
                    )));
                }
                log::info!(
                    "stage-{} done: test MRR {:.4}, params {}",
                    stage.grade,
                    metrics.mrr,
                    result.model.num_params()
                );
                stage_reports.push(report);
                teacher_path = ckpt;
                stage_clock = Instant::now();
                Ok(())
            },
        );
        if let Err(e) = outcome {
            flush_logs(&logs)?;
            return Err(e);
        }
    }

    flush_logs(&logs)?;
    Ok(RunSummary {
        baseline_report,
        stage_reports,
        dir: dir.to_path_buf(),
    })
}
