//! A small post-norm transformer encoder tower with hand-derived reverse-mode
//! gradients, a closed-form parameter count, and stride-based layer selection
//! for initializing shallower students from a deeper teacher.

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::TokenSequence;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    BadConfig(String),
    #[error("sequence length {len} exceeds configured max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenIdOutOfRange { id: usize, vocab: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("incompatible tower configs: {0}")]
    IncompatibleConfigs(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Cls,
}

/// Architecture of one tower; `layers` is the grade being trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub feed_forward: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub pooling: Pooling,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.layers == 0
            || self.hidden == 0
            || self.heads == 0
            || self.feed_forward == 0
            || self.vocab_size == 0
            || self.max_len == 0
        {
            return Err(EncoderError::BadConfig("all dimensions must be >= 1".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(EncoderError::BadConfig(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EncoderError::BadConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Same architecture at a different depth.
    pub fn at_layers(&self, layers: usize) -> EncoderConfig {
        EncoderConfig {
            layers,
            ..self.clone()
        }
    }
}

/// Closed-form number of scalar parameters in one tower.
pub fn count_params(config: &EncoderConfig) -> u64 {
    let d = config.hidden as u64;
    let ff = config.feed_forward as u64;
    let per_layer = 4 * (d * d + d) + (d * ff + ff) + (ff * d + d) + 4 * d;
    (config.vocab_size as u64) * d + (config.max_len as u64) * d + 2 * d
        + (config.layers as u64) * per_layer
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: Array1<f64>,
    pub shift: Array1<f64>,
}

impl LayerNormParams {
    fn ones(d: usize) -> Self {
        Self {
            gain: Array1::ones(d),
            shift: Array1::zeros(d),
        }
    }

    fn zeros(d: usize) -> Self {
        Self {
            gain: Array1::zeros(d),
            shift: Array1::zeros(d),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayerParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub norm1: LayerNormParams,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub norm2: LayerNormParams,
}

impl EncoderLayerParams {
    fn zeros(d: usize, ff: usize) -> Self {
        Self {
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            norm1: LayerNormParams::zeros(d),
            w1: Array2::zeros((d, ff)),
            b1: Array1::zeros(ff),
            w2: Array2::zeros((ff, d)),
            b2: Array1::zeros(d),
            norm2: LayerNormParams::zeros(d),
        }
    }
}

/// All weights of one tower. The same structure doubles as the gradient
/// bundle returned by [`backward`].
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub embedding_norm: LayerNormParams,
    pub layers: Vec<EncoderLayerParams>,
}

pub type EncoderGrads = EncoderParams;

pub enum TensorView<'a> {
    V1(&'a Array1<f64>),
    V2(&'a Array2<f64>),
}

pub enum TensorViewMut<'a> {
    V1(&'a mut Array1<f64>),
    V2(&'a mut Array2<f64>),
}

impl TensorView<'_> {
    pub fn len(&self) -> usize {
        match self {
            TensorView::V1(a) => a.len(),
            TensorView::V2(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_slice(&self) -> &[f64] {
        match self {
            TensorView::V1(a) => a.as_slice().expect("standard layout"),
            TensorView::V2(a) => a.as_slice().expect("standard layout"),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorView::V1(a) => a.shape().to_vec(),
            TensorView::V2(a) => a.shape().to_vec(),
        }
    }
}

impl TensorViewMut<'_> {
    pub fn len(&self) -> usize {
        match self {
            TensorViewMut::V1(a) => a.len(),
            TensorViewMut::V2(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_slice_mut(&mut self) -> &mut [f64] {
        match self {
            TensorViewMut::V1(a) => a.as_slice_mut().expect("standard layout"),
            TensorViewMut::V2(a) => a.as_slice_mut().expect("standard layout"),
        }
    }
}

impl EncoderParams {
    pub fn zeros(config: &EncoderConfig) -> Self {
        let d = config.hidden;
        Self {
            config: config.clone(),
            token_embedding: Array2::zeros((config.vocab_size, d)),
            position_embedding: Array2::zeros((config.max_len, d)),
            embedding_norm: LayerNormParams::zeros(d),
            layers: (0..config.layers)
                .map(|_| EncoderLayerParams::zeros(d, config.feed_forward))
                .collect(),
        }
    }

    /// Named tensors in a fixed order shared with [`tensors_mut`].
    pub fn tensors(&self) -> Vec<(String, TensorView<'_>)> {
        let mut out: Vec<(String, TensorView)> = vec![
            ("token_embedding".into(), TensorView::V2(&self.token_embedding)),
            ("position_embedding".into(), TensorView::V2(&self.position_embedding)),
            ("embedding_norm.gain".into(), TensorView::V1(&self.embedding_norm.gain)),
            ("embedding_norm.shift".into(), TensorView::V1(&self.embedding_norm.shift)),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer.{i}.attn.wq"), TensorView::V2(&layer.wq)));
            out.push((format!("layer.{i}.attn.bq"), TensorView::V1(&layer.bq)));
            out.push((format!("layer.{i}.attn.wk"), TensorView::V2(&layer.wk)));
            out.push((format!("layer.{i}.attn.bk"), TensorView::V1(&layer.bk)));
            out.push((format!("layer.{i}.attn.wv"), TensorView::V2(&layer.wv)));
            out.push((format!("layer.{i}.attn.bv"), TensorView::V1(&layer.bv)));
            out.push((format!("layer.{i}.attn.wo"), TensorView::V2(&layer.wo)));
            out.push((format!("layer.{i}.attn.bo"), TensorView::V1(&layer.bo)));
            out.push((format!("layer.{i}.norm1.gain"), TensorView::V1(&layer.norm1.gain)));
            out.push((format!("layer.{i}.norm1.shift"), TensorView::V1(&layer.norm1.shift)));
            out.push((format!("layer.{i}.ffn.w1"), TensorView::V2(&layer.w1)));
            out.push((format!("layer.{i}.ffn.b1"), TensorView::V1(&layer.b1)));
            out.push((format!("layer.{i}.ffn.w2"), TensorView::V2(&layer.w2)));
            out.push((format!("layer.{i}.ffn.b2"), TensorView::V1(&layer.b2)));
            out.push((format!("layer.{i}.norm2.gain"), TensorView::V1(&layer.norm2.gain)));
            out.push((format!("layer.{i}.norm2.shift"), TensorView::V1(&layer.norm2.shift)));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, TensorViewMut<'_>)> {
        let mut out: Vec<(String, TensorViewMut)> = vec![
            ("token_embedding".into(), TensorViewMut::V2(&mut self.token_embedding)),
            ("position_embedding".into(), TensorViewMut::V2(&mut self.position_embedding)),
            ("embedding_norm.gain".into(), TensorViewMut::V1(&mut self.embedding_norm.gain)),
            ("embedding_norm.shift".into(), TensorViewMut::V1(&mut self.embedding_norm.shift)),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer.{i}.attn.wq"), TensorViewMut::V2(&mut layer.wq)));
            out.push((format!("layer.{i}.attn.bq"), TensorViewMut::V1(&mut layer.bq)));
            out.push((format!("layer.{i}.attn.wk"), TensorViewMut::V2(&mut layer.wk)));
            out.push((format!("layer.{i}.attn.bk"), TensorViewMut::V1(&mut layer.bk)));
            out.push((format!("layer.{i}.attn.wv"), TensorViewMut::V2(&mut layer.wv)));
            out.push((format!("layer.{i}.attn.bv"), TensorViewMut::V1(&mut layer.bv)));
            out.push((format!("layer.{i}.attn.wo"), TensorViewMut::V2(&mut layer.wo)));
            out.push((format!("layer.{i}.attn.bo"), TensorViewMut::V1(&mut layer.bo)));
            out.push((format!("layer.{i}.norm1.gain"), TensorViewMut::V1(&mut layer.norm1.gain)));
            out.push((format!("layer.{i}.norm1.shift"), TensorViewMut::V1(&mut layer.norm1.shift)));
            out.push((format!("layer.{i}.ffn.w1"), TensorViewMut::V2(&mut layer.w1)));
            out.push((format!("layer.{i}.ffn.b1"), TensorViewMut::V1(&mut layer.b1)));
            out.push((format!("layer.{i}.ffn.w2"), TensorViewMut::V2(&mut layer.w2)));
            out.push((format!("layer.{i}.ffn.b2"), TensorViewMut::V1(&mut layer.b2)));
            out.push((format!("layer.{i}.norm2.gain"), TensorViewMut::V1(&mut layer.norm2.gain)));
            out.push((format!("layer.{i}.norm2.shift"), TensorViewMut::V1(&mut layer.norm2.shift)));
        }
        out
    }

    /// Total scalar parameter count; always equals [`count_params`].
    pub fn num_params(&self) -> u64 {
        self.tensors().iter().map(|(_, t)| t.len() as u64).sum()
    }
}

/// Truncated-normal weight init (std 0.02, cut at two standard deviations),
/// zero biases, unit normalization gains. Values are snapped to the nearest
/// 32-bit float so checkpoints round-trip without loss.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams, EncoderError> {
    config.validate()?;
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = move || -> f64 {
        loop {
            let x: f64 = rng.sample::<f64, _>(StandardNormal) * INIT_STD;
            let snapped = x as f32 as f64;
            if snapped.abs() <= 2.0 * INIT_STD {
                return snapped;
            }
        }
    };
    let mut params = EncoderParams::zeros(config);
    params.embedding_norm = LayerNormParams::ones(config.hidden);
    for v in params.token_embedding.iter_mut() {
        *v = sample();
    }
    for v in params.position_embedding.iter_mut() {
        *v = sample();
    }
    for layer in params.layers.iter_mut() {
        for w in [
            &mut layer.wq,
            &mut layer.wk,
            &mut layer.wv,
            &mut layer.wo,
            &mut layer.w1,
            &mut layer.w2,
        ] {
            for v in w.iter_mut() {
                *v = sample();
            }
        }
        layer.norm1 = LayerNormParams::ones(config.hidden);
        layer.norm2 = LayerNormParams::ones(config.hidden);
    }
    Ok(params)
}

/// Copies every `stride`-spaced teacher layer into a shallower student:
/// student layer j takes teacher layer ceil((j+1)·L_T / L_S) − 1.
/// Embeddings and the embedding normalization are copied verbatim.
pub fn select_layers(
    teacher: &EncoderParams,
    student_config: &EncoderConfig,
) -> Result<EncoderParams, EncoderError> {
    student_config.validate()?;
    let t = &teacher.config;
    if t.hidden != student_config.hidden
        || t.heads != student_config.heads
        || t.feed_forward != student_config.feed_forward
        || t.vocab_size != student_config.vocab_size
        || t.max_len != student_config.max_len
    {
        return Err(EncoderError::IncompatibleConfigs(
            "width compression unsupported; hidden/heads/ff/vocab/max_len must match".into(),
        ));
    }
    if student_config.layers > t.layers {
        return Err(EncoderError::IncompatibleConfigs(format!(
            "student has more layers ({}) than teacher ({})",
            student_config.layers, t.layers
        )));
    }
    let mut student = EncoderParams::zeros(student_config);
    student.token_embedding = teacher.token_embedding.clone();
    student.position_embedding = teacher.position_embedding.clone();
    student.embedding_norm = teacher.embedding_norm.clone();
    for (j, map) in layer_selection(t.layers, student_config.layers)
        .into_iter()
        .enumerate()
    {
        student.layers[j] = teacher.layers[map].clone();
    }
    Ok(student)
}

/// The stride map used by both layer selection and skip-layer feature
/// distillation: student layer j ↦ teacher layer ceil((j+1)·L_T/L_S) − 1.
pub fn layer_selection(teacher_layers: usize, student_layers: usize) -> Vec<usize> {
    (0..student_layers)
        .map(|j| ((j + 1) * teacher_layers).div_ceil(student_layers) - 1)
        .collect()
}

/// Final-layer token features plus one pooled vector per sequence.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub token_features: Array3<f64>,
    pub pooled: Array2<f64>,
}

struct LayerTrace {
    q: Array3<f64>,
    k: Array3<f64>,
    v: Array3<f64>,
    probs: Array4<f64>,
    attn_concat: Array3<f64>,
    attn_drop: Option<Array3<f64>>,
    xhat1: Array3<f64>,
    inv_std1: Array2<f64>,
    x1: Array3<f64>,
    h_pre: Array3<f64>,
    h_act: Array3<f64>,
    ffn_drop: Option<Array3<f64>>,
    xhat2: Array3<f64>,
    inv_std2: Array2<f64>,
}

/// Everything [`backward`] needs from a forward pass; also exposes the
/// per-block hidden states used by feature-level distillation.
pub struct ForwardTrace {
    ids: Vec<Vec<usize>>,
    flags: Vec<Vec<bool>>,
    emb_drop: Option<Array3<f64>>,
    xhat0: Array3<f64>,
    inv_std0: Array2<f64>,
    /// Index 0 is the embedding-norm output; index l ≥ 1 is block l's output.
    block_io: Vec<Array3<f64>>,
    layers: Vec<LayerTrace>,
    pool_counts: Vec<f64>,
}

impl ForwardTrace {
    /// Hidden state after block `k` (1-based); `k = layers` is the final one.
    pub fn layer_output(&self, k: usize) -> &Array3<f64> {
        &self.block_io[k]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn attention_flags(&self) -> &[Vec<bool>] {
        &self.flags
    }
}

fn linear(x: &Array3<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array3<f64> {
    let (bsz, t, d_in) = x.dim();
    let d_out = w.dim().1;
    let x2 = x
        .view()
        .into_shape_with_order((bsz * t, d_in))
        .expect("standard layout");
    let mut y2 = x2.dot(w);
    y2 += &b.view().insert_axis(Axis(0));
    y2.into_shape_with_order((bsz, t, d_out)).expect("same size")
}

/// Accumulates dW, db and returns dX for y = x·w + b.
fn linear_backward(
    x: &Array3<f64>,
    w: &Array2<f64>,
    dy: &Array3<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array1<f64>,
) -> Array3<f64> {
    let (bsz, t, d_in) = x.dim();
    let d_out = w.dim().1;
    let x2 = x
        .view()
        .into_shape_with_order((bsz * t, d_in))
        .expect("standard layout");
    let dy2 = dy
        .view()
        .into_shape_with_order((bsz * t, d_out))
        .expect("standard layout");
    *dw += &x2.t().dot(&dy2);
    *db += &dy2.sum_axis(Axis(0));
    dy2.dot(&w.t())
        .into_shape_with_order((bsz, t, d_in))
        .expect("same size")
}

fn layer_norm(
    x: &Array3<f64>,
    norm: &LayerNormParams,
) -> (Array3<f64>, Array3<f64>, Array2<f64>) {
    let (bsz, t, d) = x.dim();
    let mut xhat = Array3::zeros((bsz, t, d));
    let mut inv_std = Array2::zeros((bsz, t));
    let mut y = Array3::zeros((bsz, t, d));
    let gain = norm.gain.as_slice().expect("standard layout");
    let shift = norm.shift.as_slice().expect("standard layout");
    let xs = x.as_slice().expect("standard layout");
    let xh = xhat.as_slice_mut().expect("standard layout");
    let ys = y.as_slice_mut().expect("standard layout");
    let istds = inv_std.as_slice_mut().expect("standard layout");
    for row in 0..bsz * t {
        let off = row * d;
        let xrow = &xs[off..off + d];
        let mean = xrow.iter().sum::<f64>() / d as f64;
        let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        istds[row] = istd;
        for i in 0..d {
            let h = (xrow[i] - mean) * istd;
            xh[off + i] = h;
            ys[off + i] = gain[i] * h + shift[i];
        }
    }
    (y, xhat, inv_std)
}

fn layer_norm_backward(
    dy: &Array3<f64>,
    xhat: &Array3<f64>,
    inv_std: &Array2<f64>,
    norm: &LayerNormParams,
    dgain: &mut Array1<f64>,
    dshift: &mut Array1<f64>,
) -> Array3<f64> {
    let (bsz, t, d) = dy.dim();
    let mut dx = Array3::zeros((bsz, t, d));
    let gain = norm.gain.as_slice().expect("standard layout");
    let dgain = dgain.as_slice_mut().expect("standard layout");
    let dshift = dshift.as_slice_mut().expect("standard layout");
    let dys = dy.as_slice().expect("standard layout");
    let xhs = xhat.as_slice().expect("standard layout");
    let istds = inv_std.as_slice().expect("standard layout");
    let dxs = dx.as_slice_mut().expect("standard layout");
    for row in 0..bsz * t {
        let off = row * d;
        let dyr = &dys[off..off + d];
        let xhr = &xhs[off..off + d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for i in 0..d {
            let g = dyr[i];
            let xh = xhr[i];
            dgain[i] += g * xh;
            dshift[i] += g;
            let dxh = g * gain[i];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh;
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let istd = istds[row];
        for i in 0..d {
            let dxh = dyr[i] * gain[i];
            dxs[off + i] = istd * (dxh - mean_dxhat - xhr[i] * mean_dxhat_xhat);
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn dropout_mask(
    shape: (usize, usize, usize),
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Array3<f64> {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mut mask = Array3::zeros(shape);
    for v in mask.iter_mut() {
        *v = if rng.random::<f64>() < keep { scale } else { 0.0 };
    }
    mask
}

/// Forward pass in evaluation mode (dropout off).
pub fn encode(
    params: &EncoderParams,
    seqs: &[TokenSequence],
) -> Result<EncoderOutput, EncoderError> {
    encode_with_trace(params, seqs, None).map(|(out, _)| out)
}

/// Forward pass keeping every intermediate needed by [`backward`]. Passing a
/// random stream enables dropout at the configured rate.
pub fn encode_with_trace(
    params: &EncoderParams,
    seqs: &[TokenSequence],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(EncoderOutput, ForwardTrace), EncoderError> {
    let cfg = &params.config;
    if seqs.is_empty() {
        return Err(EncoderError::EmptyBatch);
    }
    let t_len = seqs[0].len();
    if t_len > cfg.max_len {
        return Err(EncoderError::SequenceTooLong {
            len: t_len,
            max_len: cfg.max_len,
        });
    }
    let bsz = seqs.len();
    let d = cfg.hidden;
    let heads = cfg.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut ids = Vec::with_capacity(bsz);
    let mut flags = Vec::with_capacity(bsz);
    for seq in seqs {
        if seq.len() != t_len {
            return Err(EncoderError::ShapeMismatch(
                "all sequences in a batch must share one length".into(),
            ));
        }
        for &id in &seq.ids {
            if id >= cfg.vocab_size {
                return Err(EncoderError::TokenIdOutOfRange {
                    id,
                    vocab: cfg.vocab_size,
                });
            }
        }
        ids.push(seq.ids.clone());
        flags.push(seq.attention.clone());
    }

    // token + position embeddings
    let mut emb = Array3::zeros((bsz, t_len, d));
    {
        let es = emb.as_slice_mut().expect("standard layout");
        let tok_table = params.token_embedding.as_slice().expect("standard layout");
        let pos_table = params
            .position_embedding
            .as_slice()
            .expect("standard layout");
        for b in 0..bsz {
            for pos in 0..t_len {
                let off = (b * t_len + pos) * d;
                let trow = &tok_table[ids[b][pos] * d..(ids[b][pos] + 1) * d];
                let prow = &pos_table[pos * d..(pos + 1) * d];
                for i in 0..d {
                    es[off + i] = trow[i] + prow[i];
                }
            }
        }
    }
    let (mut x, xhat0, inv_std0) = layer_norm(&emb, &params.embedding_norm);

    let use_dropout = cfg.dropout > 0.0 && dropout_rng.is_some();
    let emb_drop = if use_dropout {
        let mask = dropout_mask((bsz, t_len, d), cfg.dropout, dropout_rng.as_deref_mut().unwrap());
        x *= &mask;
        Some(mask)
    } else {
        None
    };

    let mut block_io = Vec::with_capacity(cfg.layers + 1);
    block_io.push(x.clone());
    let mut layer_traces = Vec::with_capacity(cfg.layers);

    for layer in &params.layers {
        let q = linear(&x, &layer.wq, &layer.bq);
        let k = linear(&x, &layer.wk, &layer.bk);
        let v = linear(&x, &layer.wv, &layer.bv);

        let mut probs = Array4::zeros((bsz, heads, t_len, t_len));
        let mut attn_concat = Array3::zeros((bsz, t_len, d));
        for b in 0..bsz {
            for h in 0..heads {
                let lo = h * dh;
                let hi = lo + dh;
                let qh = q.slice(s![b, .., lo..hi]);
                let kh = k.slice(s![b, .., lo..hi]);
                let vh = v.slice(s![b, .., lo..hi]);
                let mut scores = qh.dot(&kh.t());
                scores *= scale;
                // row-wise softmax; masked keys contribute exactly zero
                {
                    let flag_row = &flags[b];
                    let ss = scores.as_slice_mut().expect("standard layout");
                    for i in 0..t_len {
                        let off = i * t_len;
                        let mut max = f64::NEG_INFINITY;
                        for (j, &real) in flag_row.iter().enumerate() {
                            if real && ss[off + j] > max {
                                max = ss[off + j];
                            }
                        }
                        let mut sum = 0.0;
                        for (j, &real) in flag_row.iter().enumerate() {
                            let val = if real { (ss[off + j] - max).exp() } else { 0.0 };
                            ss[off + j] = val;
                            sum += val;
                        }
                        for j in 0..t_len {
                            ss[off + j] /= sum;
                        }
                    }
                }
                let ctx = scores.dot(&vh);
                attn_concat.slice_mut(s![b, .., lo..hi]).assign(&ctx);
                probs.slice_mut(s![b, h, .., ..]).assign(&scores);
            }
        }

        let mut attn_out = linear(&attn_concat, &layer.wo, &layer.bo);
        let attn_drop = if use_dropout {
            let mask =
                dropout_mask((bsz, t_len, d), cfg.dropout, dropout_rng.as_deref_mut().unwrap());
            attn_out *= &mask;
            Some(mask)
        } else {
            None
        };

        let res1 = &x + &attn_out;
        let (x1, xhat1, inv_std1) = layer_norm(&res1, &layer.norm1);

        let h_pre = linear(&x1, &layer.w1, &layer.b1);
        let h_act = h_pre.mapv(gelu);
        let mut ffn_out = linear(&h_act, &layer.w2, &layer.b2);
        let ffn_drop = if use_dropout {
            let mask =
                dropout_mask((bsz, t_len, d), cfg.dropout, dropout_rng.as_deref_mut().unwrap());
            ffn_out *= &mask;
            Some(mask)
        } else {
            None
        };

        let res2 = &x1 + &ffn_out;
        let (x2, xhat2, inv_std2) = layer_norm(&res2, &layer.norm2);

        layer_traces.push(LayerTrace {
            q,
            k,
            v,
            probs,
            attn_concat,
            attn_drop,
            xhat1,
            inv_std1,
            x1,
            h_pre,
            h_act,
            ffn_drop,
            xhat2,
            inv_std2,
        });
        x = x2;
        block_io.push(x.clone());
    }

    let mut pooled = Array2::zeros((bsz, d));
    let mut pool_counts = vec![0.0; bsz];
    {
        let xs = x.as_slice().expect("standard layout");
        let ps = pooled.as_slice_mut().expect("standard layout");
        match cfg.pooling {
            Pooling::Mean => {
                for b in 0..bsz {
                    let n = flags[b].iter().filter(|&&f| f).count().max(1) as f64;
                    pool_counts[b] = n;
                    let prow = &mut ps[b * d..(b + 1) * d];
                    for (pos, &real) in flags[b].iter().enumerate() {
                        if real {
                            let off = (b * t_len + pos) * d;
                            for i in 0..d {
                                prow[i] += xs[off + i] / n;
                            }
                        }
                    }
                }
            }
            Pooling::Cls => {
                for b in 0..bsz {
                    pool_counts[b] = 1.0;
                    let off = b * t_len * d;
                    ps[b * d..(b + 1) * d].copy_from_slice(&xs[off..off + d]);
                }
            }
        }
    }

    let output = EncoderOutput {
        token_features: x,
        pooled,
    };
    let trace = ForwardTrace {
        ids,
        flags,
        emb_drop,
        xhat0,
        inv_std0,
        block_io,
        layers: layer_traces,
        pool_counts,
    };
    Ok((output, trace))
}

/// Gradients flowing into the encoder outputs: any combination of the pooled
/// vector, the final token features, and per-block hidden states
/// (1-based block index).
#[derive(Debug, Clone, Default)]
pub struct OutputGradients {
    pub pooled: Option<Array2<f64>>,
    pub token_features: Option<Array3<f64>>,
    pub layer_features: Vec<(usize, Array3<f64>)>,
}

/// Exact reverse-mode gradients for every parameter of the tower.
pub fn backward(
    params: &EncoderParams,
    trace: &ForwardTrace,
    output_grads: &OutputGradients,
) -> Result<EncoderGrads, EncoderError> {
    let cfg = &params.config;
    let (bsz, t_len, d) = trace.block_io[0].dim();
    let heads = cfg.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut grads = EncoderParams::zeros(cfg);

    let mut dx = Array3::<f64>::zeros((bsz, t_len, d));
    if let Some(dp) = &output_grads.pooled {
        if dp.dim() != (bsz, d) {
            return Err(EncoderError::ShapeMismatch("pooled gradient shape".into()));
        }
        let dps = dp.as_slice().expect("standard layout");
        let dxs = dx.as_slice_mut().expect("standard layout");
        match cfg.pooling {
            Pooling::Mean => {
                for b in 0..bsz {
                    let n = trace.pool_counts[b];
                    let drow = &dps[b * d..(b + 1) * d];
                    for (pos, &real) in trace.flags[b].iter().enumerate() {
                        if real {
                            let off = (b * t_len + pos) * d;
                            for i in 0..d {
                                dxs[off + i] += drow[i] / n;
                            }
                        }
                    }
                }
            }
            Pooling::Cls => {
                for b in 0..bsz {
                    let off = b * t_len * d;
                    for i in 0..d {
                        dxs[off + i] += dps[b * d + i];
                    }
                }
            }
        }
    }
    if let Some(dt) = &output_grads.token_features {
        if dt.dim() != (bsz, t_len, d) {
            return Err(EncoderError::ShapeMismatch(
                "token feature gradient shape".into(),
            ));
        }
        dx += dt;
    }
    let mut injections: Vec<Option<&Array3<f64>>> = vec![None; cfg.layers];
    for (k, grad) in &output_grads.layer_features {
        if *k == 0 || *k > cfg.layers {
            return Err(EncoderError::ShapeMismatch(format!(
                "layer feature index {k} outside 1..={}",
                cfg.layers
            )));
        }
        if grad.dim() != (bsz, t_len, d) {
            return Err(EncoderError::ShapeMismatch(
                "layer feature gradient shape".into(),
            ));
        }
        injections[k - 1] = Some(grad);
    }

    for (l, (layer, lt)) in params.layers.iter().zip(&trace.layers).enumerate().rev() {
        if let Some(inj) = injections[l] {
            dx += inj;
        }
        let x_in = &trace.block_io[l];
        let g = &mut grads.layers[l];

        // LN2
        let dres2 = layer_norm_backward(
            &dx,
            &lt.xhat2,
            &lt.inv_std2,
            &layer.norm2,
            &mut g.norm2.gain,
            &mut g.norm2.shift,
        );
        // residual: res2 = x1 + dropout(ffn)
        let mut dx1 = dres2.clone();
        let mut dffn = dres2;
        if let Some(mask) = &lt.ffn_drop {
            dffn *= mask;
        }
        // ffn second linear
        let dh_act = linear_backward(&lt.h_act, &layer.w2, &dffn, &mut g.w2, &mut g.b2);
        let dh_pre = &dh_act * &lt.h_pre.mapv(gelu_grad);
        dx1 += &linear_backward(&lt.x1, &layer.w1, &dh_pre, &mut g.w1, &mut g.b1);

        // LN1
        let dres1 = layer_norm_backward(
            &dx1,
            &lt.xhat1,
            &lt.inv_std1,
            &layer.norm1,
            &mut g.norm1.gain,
            &mut g.norm1.shift,
        );
        // residual: res1 = x_in + dropout(attn)
        let mut dattn = dres1.clone();
        let mut dx_next = dres1;
        if let Some(mask) = &lt.attn_drop {
            dattn *= mask;
        }
        let dconcat = linear_backward(&lt.attn_concat, &layer.wo, &dattn, &mut g.wo, &mut g.bo);

        let mut dq = Array3::<f64>::zeros((bsz, t_len, d));
        let mut dk = Array3::<f64>::zeros((bsz, t_len, d));
        let mut dv = Array3::<f64>::zeros((bsz, t_len, d));
        for b in 0..bsz {
            for h in 0..heads {
                let lo = h * dh;
                let hi = lo + dh;
                let p = lt.probs.slice(s![b, h, .., ..]);
                let dctx = dconcat.slice(s![b, .., lo..hi]);
                let vh = lt.v.slice(s![b, .., lo..hi]);
                let dp = dctx.dot(&vh.t());
                dv.slice_mut(s![b, .., lo..hi])
                    .assign(&p.t().dot(&dctx));
                // softmax backward per row
                let mut ds = Array2::<f64>::zeros((t_len, t_len));
                {
                    let ps = p.to_slice().expect("contiguous block");
                    let dps = dp.as_slice().expect("standard layout");
                    let dss = ds.as_slice_mut().expect("standard layout");
                    for i in 0..t_len {
                        let off = i * t_len;
                        let mut dot = 0.0;
                        for j in 0..t_len {
                            dot += dps[off + j] * ps[off + j];
                        }
                        for j in 0..t_len {
                            dss[off + j] = ps[off + j] * (dps[off + j] - dot) * scale;
                        }
                    }
                }
                let qh = lt.q.slice(s![b, .., lo..hi]);
                let kh = lt.k.slice(s![b, .., lo..hi]);
                dq.slice_mut(s![b, .., lo..hi]).assign(&ds.dot(&kh));
                dk.slice_mut(s![b, .., lo..hi]).assign(&ds.t().dot(&qh));
            }
        }
        dx_next += &linear_backward(x_in, &layer.wq, &dq, &mut g.wq, &mut g.bq);
        dx_next += &linear_backward(x_in, &layer.wk, &dk, &mut g.wk, &mut g.bk);
        dx_next += &linear_backward(x_in, &layer.wv, &dv, &mut g.wv, &mut g.bv);
        dx = dx_next;
    }

    // embedding dropout, norm, and scatter into the embedding tables
    if let Some(mask) = &trace.emb_drop {
        dx *= mask;
    }
    let demb = layer_norm_backward(
        &dx,
        &trace.xhat0,
        &trace.inv_std0,
        &params.embedding_norm,
        &mut grads.embedding_norm.gain,
        &mut grads.embedding_norm.shift,
    );
    {
        let dembs = demb.as_slice().expect("standard layout");
        let gtok = grads
            .token_embedding
            .as_slice_mut()
            .expect("standard layout");
        let gpos = grads
            .position_embedding
            .as_slice_mut()
            .expect("standard layout");
        for b in 0..bsz {
            for pos in 0..t_len {
                let tok = trace.ids[b][pos];
                let off = (b * t_len + pos) * d;
                let trow = &mut gtok[tok * d..(tok + 1) * d];
                for i in 0..d {
                    trow[i] += dembs[off + i];
                }
                let prow = &mut gpos[pos * d..(pos + 1) * d];
                for i in 0..d {
                    prow[i] += dembs[off + i];
                }
            }
        }
    }
    Ok(grads)
}
