//! Word-level vocabulary, fixed-length token sequences for the two encoder
//! towers, and the random masking operation shared by teacher and student.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::kg::{EntityId, KnowledgeGraph, RelationId};

pub const CLS_ID: usize = 0;
pub const SEP_ID: usize = 1;
pub const PAD_ID: usize = 2;
pub const MASK_ID: usize = 3;
pub const UNK_ID: usize = 4;
/// Number of reserved ids at the bottom of every vocabulary.
pub const NUM_SPECIALS: usize = 5;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("corpus is empty, cannot build a vocabulary")]
    EmptyCorpus,
    #[error("vocabulary max_size must exceed the {NUM_SPECIALS} reserved ids")]
    MaxSizeTooSmall,
    #[error("max_len {0} is too small, need at least 8")]
    MaxLenTooSmall(usize),
    #[error("mask rate {0} outside [0, 1]")]
    BadMaskRate(f64),
    #[error("entity `{0}` has no usable text (empty name and description)")]
    EmptyEntityText(String),
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Lowercased alphanumeric word tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            for lower in ch.to_lowercase() {
                current.push(lower);
            }
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Token → id map with five reserved specials at ids 0–4.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from every entity name/description and relation name in the
    /// graph. Tokens with corpus frequency below `min_freq` are dropped, and
    /// the vocabulary is capped at `max_size` ids total (specials included),
    /// keeping the most frequent tokens and breaking ties lexicographically.
    pub fn build(
        graph: &KnowledgeGraph,
        min_freq: usize,
        max_size: usize,
    ) -> Result<Self, TextError> {
        if max_size <= NUM_SPECIALS {
            return Err(TextError::MaxSizeTooSmall);
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut feed = |text: &str| {
            for token in tokenize(text) {
                *counts.entry(token).or_insert(0) += 1;
            }
        };
        for entity in &graph.entities {
            feed(&entity.name);
            feed(&entity.description);
        }
        for relation in &graph.relations {
            feed(&relation.name);
        }
        if counts.is_empty() {
            return Err(TextError::EmptyCorpus);
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - NUM_SPECIALS);
        Ok(Self::from_tokens(
            ranked.into_iter().map(|(t, _)| t).collect(),
        ))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), NUM_SPECIALS + i))
            .collect();
        Self { tokens, index }
    }

    /// Total id count, specials included.
    pub fn len(&self) -> usize {
        NUM_SPECIALS + self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id for a token, falling back to UNK.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        match id {
            CLS_ID => Some("[CLS]"),
            SEP_ID => Some("[SEP]"),
            PAD_ID => Some("[PAD]"),
            MASK_ID => Some("[MASK]"),
            UNK_ID => Some("[UNK]"),
            _ => self.tokens.get(id - NUM_SPECIALS).map(String::as_str),
        }
    }

    pub fn ids_for(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// One corpus token per line; line k holds the token with id k + 5.
    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        let mut body = self.tokens.join("\n");
        if !body.is_empty() {
            body.push('\n');
        }
        fs::write(path, body).map_err(|source| TextError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let raw = fs::read_to_string(path).map_err(|source| TextError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_tokens(
            raw.lines().map(str::to_string).collect(),
        ))
    }
}

/// Fixed-length token ids with attention and maskability flags.
///
/// `attention[t]` is false exactly on PAD positions; `maskable[t]` marks
/// tokens eligible for masking (everything except CLS, SEP, and PAD).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub attention: Vec<bool>,
    pub maskable: Vec<bool>,
}

impl TokenSequence {
    fn from_content(content: Vec<usize>, max_len: usize) -> Self {
        debug_assert!(content.len() <= max_len);
        let mut ids = content;
        let real = ids.len();
        ids.resize(max_len, PAD_ID);
        let attention: Vec<bool> = (0..max_len).map(|t| t < real).collect();
        let maskable: Vec<bool> = ids
            .iter()
            .enumerate()
            .map(|(t, &id)| t < real && id != CLS_ID && id != SEP_ID)
            .collect();
        Self {
            ids,
            attention,
            maskable,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-PAD positions.
    pub fn real_len(&self) -> usize {
        self.attention.iter().filter(|&&a| a).count()
    }
}

fn truncated_layout(parts: &mut [&mut Vec<usize>], budget: usize) {
    // Drop tokens from the last part first, then work backwards.
    let mut used: usize = parts.iter().map(|p| p.len()).sum();
    for part in parts.iter_mut().rev() {
        if used <= budget {
            break;
        }
        let cut = (used - budget).min(part.len());
        part.truncate(part.len() - cut);
        used -= cut;
    }
}

/// Query-side input: `CLS name description SEP relation SEP` padded to
/// `max_len`. The description is truncated first when over length, so the
/// name and relation text survive whenever they fit.
pub fn build_hr_sequence(
    graph: &KnowledgeGraph,
    head: EntityId,
    relation: RelationId,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<TokenSequence, TextError> {
    if max_len < 8 {
        return Err(TextError::MaxLenTooSmall(max_len));
    }
    let entity = &graph.entities[head];
    let mut name = vocab.ids_for(&entity.name);
    let mut desc = vocab.ids_for(&entity.description);
    let mut rel = vocab.ids_for(&graph.relations[relation].name);

    let budget = max_len - 3; // CLS and two SEPs
    truncated_layout(&mut [&mut name, &mut rel, &mut desc], budget);

    let mut content = Vec::with_capacity(max_len);
    content.push(CLS_ID);
    content.extend_from_slice(&name);
    content.extend_from_slice(&desc);
    content.push(SEP_ID);
    content.extend_from_slice(&rel);
    content.push(SEP_ID);
    Ok(TokenSequence::from_content(content, max_len))
}

/// Candidate-side input: `CLS name description SEP` padded to `max_len`.
///
/// Entities whose name and description both tokenize to nothing cannot be
/// scored and are rejected.
pub fn build_tail_sequence(
    graph: &KnowledgeGraph,
    tail: EntityId,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<TokenSequence, TextError> {
    if max_len < 8 {
        return Err(TextError::MaxLenTooSmall(max_len));
    }
    let entity = &graph.entities[tail];
    let mut name = vocab.ids_for(&entity.name);
    let mut desc = vocab.ids_for(&entity.description);
    if name.is_empty() && desc.is_empty() {
        return Err(TextError::EmptyEntityText(entity.key.clone()));
    }

    let budget = max_len - 2; // CLS and one SEP
    truncated_layout(&mut [&mut name, &mut desc], budget);

    let mut content = Vec::with_capacity(max_len);
    content.push(CLS_ID);
    content.extend_from_slice(&name);
    content.extend_from_slice(&desc);
    content.push(SEP_ID);
    Ok(TokenSequence::from_content(content, max_len))
}

/// Query and candidate sequences after one shared masking draw.
///
/// The recorded positions are exactly the tokens replaced by MASK; both the
/// teacher and the student consume this same batch.
#[derive(Debug, Clone)]
pub struct MaskedBatch {
    pub hr: Vec<TokenSequence>,
    pub tails: Vec<TokenSequence>,
    pub hr_masked: Vec<Vec<usize>>,
    pub tail_masked: Vec<Vec<usize>>,
    pub mask_rate: f64,
}

impl MaskedBatch {
    pub fn total_masked(&self) -> usize {
        self.hr_masked.iter().map(Vec::len).sum::<usize>()
            + self.tail_masked.iter().map(Vec::len).sum::<usize>()
    }
}

fn mask_sequences(
    seqs: &[TokenSequence],
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<TokenSequence>, Vec<Vec<usize>>) {
    let mut out = Vec::with_capacity(seqs.len());
    let mut positions = Vec::with_capacity(seqs.len());
    for seq in seqs {
        let mut masked = seq.clone();
        let mut hit = Vec::new();
        for (t, &eligible) in seq.maskable.iter().enumerate() {
            if eligible && rng.random::<f64>() < rate {
                masked.ids[t] = MASK_ID;
                hit.push(t);
            }
        }
        out.push(masked);
        positions.push(hit);
    }
    (out, positions)
}

/// Independently replaces each maskable token by MASK with probability
/// `rate`. At rate 0 the input passes through untouched and the random
/// stream is not consumed. When `mask_tail` is false only the query side is
/// masked.
pub fn apply_mask(
    hr: &[TokenSequence],
    tails: &[TokenSequence],
    rate: f64,
    mask_tail: bool,
    rng: &mut ChaCha8Rng,
) -> Result<MaskedBatch, TextError> {
    if !(0.0..=1.0).contains(&rate) || rate.is_nan() {
        return Err(TextError::BadMaskRate(rate));
    }
    if rate == 0.0 {
        return Ok(MaskedBatch {
            hr: hr.to_vec(),
            tails: tails.to_vec(),
            hr_masked: vec![Vec::new(); hr.len()],
            tail_masked: vec![Vec::new(); tails.len()],
            mask_rate: rate,
        });
    }
    let (hr_out, hr_masked) = mask_sequences(hr, rate, rng);
    let (tail_out, tail_masked) = if mask_tail {
        mask_sequences(tails, rate, rng)
    } else {
        (tails.to_vec(), vec![Vec::new(); tails.len()])
    };
    Ok(MaskedBatch {
        hr: hr_out,
        tails: tail_out,
        hr_masked,
        tail_masked,
        mask_rate: rate,
    })
}
