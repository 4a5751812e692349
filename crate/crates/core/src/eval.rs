//! Entity-ranking link prediction under the filtered protocol, with mean
//! rank, mean reciprocal rank, and hits@{1,3,10}.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use thiserror::Error;

use crate::encoder::{encode, EncoderError};
use crate::kg::{EntityId, FilterIndex, KnowledgeGraph, Split};
use crate::model::BiEncoder;
use crate::scoring::{cosine_score, ScoringError};
use crate::text::{build_hr_sequence, build_tail_sequence, TextError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no ranks to aggregate")]
    EmptyRanks,
    #[error("true tail {0} is in the filter set; the known-tail index is inconsistent")]
    TrueTailFiltered(EntityId),
    #[error("graph must be augmented with inverse triples before evaluation")]
    NotAugmented,
    #[error("metrics invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

/// Aggregate ranking quality over one evaluation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub mr: f64,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub n: usize,
}

impl RankingMetrics {
    /// Checks the arithmetic relations every report must satisfy.
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.hits1 <= self.hits3 && self.hits3 <= self.hits10) {
            return Err(EvalError::Invariant(format!(
                "hits ordering broken: {} / {} / {}",
                self.hits1, self.hits3, self.hits10
            )));
        }
        if self.mrr * (1.0 + 1e-12) < 1.0 / self.mr {
            return Err(EvalError::Invariant(format!(
                "reciprocal-rank mean {} below 1/mean-rank {}",
                self.mrr,
                1.0 / self.mr
            )));
        }
        if self.mrr * (1.0 + 1e-12) < self.hits1 {
            return Err(EvalError::Invariant(
                "mean reciprocal rank below hits@1".into(),
            ));
        }
        if self.mr < 1.0 || !(0.0..=1.0 + 1e-12).contains(&self.mrr) {
            return Err(EvalError::Invariant("metric out of range".into()));
        }
        Ok(())
    }
}

/// Aggregates a list of ranks (each ≥ 1).
pub fn compute_metrics(ranks: &[usize]) -> Result<RankingMetrics, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::EmptyRanks);
    }
    let n = ranks.len() as f64;
    let mr = ranks.iter().map(|&r| r as f64).sum::<f64>() / n;
    let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
    let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    let metrics = RankingMetrics {
        mr,
        mrr,
        hits1: hits(1),
        hits3: hits(3),
        hits10: hits(10),
        n: ranks.len(),
    };
    metrics.validate()?;
    Ok(metrics)
}

/// Rank of the true tail among all candidates given precomputed scores.
/// Filtered candidates are skipped; ties count against the model.
pub fn rank_from_scores(
    scores: ArrayView1<f64>,
    true_tail: EntityId,
    filter: &HashSet<EntityId>,
) -> Result<usize, EvalError> {
    if filter.contains(&true_tail) {
        return Err(EvalError::TrueTailFiltered(true_tail));
    }
    let s_true = scores[true_tail];
    let mut rank = 1usize;
    for (j, &s) in scores.iter().enumerate() {
        if j == true_tail || filter.contains(&j) {
            continue;
        }
        if s >= s_true {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Scores every candidate by cosine against the query embedding and ranks
/// the true tail under the filtered protocol.
pub fn rank_entities(
    hr_embedding: ArrayView1<f64>,
    all_tail_embeddings: ArrayView2<f64>,
    true_tail: EntityId,
    filter: &HashSet<EntityId>,
) -> Result<usize, EvalError> {
    let mut scores = Array1::zeros(all_tail_embeddings.nrows());
    for (j, row) in all_tail_embeddings.rows().into_iter().enumerate() {
        scores[j] = cosine_score(hr_embedding, row)?;
    }
    rank_from_scores(scores.view(), true_tail, filter)
}

/// One evaluated query, for the optional per-query report.
#[derive(Debug, Clone, Serialize)]
pub struct QueryRecord {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub direction: &'static str,
    pub raw_rank: usize,
    pub filtered_rank: usize,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub max_len: usize,
    pub batch_size: usize,
    /// Disables filtering (every candidate competes).
    pub raw: bool,
    pub collect_records: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            max_len: 64,
            batch_size: 64,
            raw: false,
            collect_records: false,
        }
    }
}

/// Normalized embeddings for every entity, encoded once with the tail tower.
pub fn encode_all_tails(
    model: &BiEncoder,
    graph: &KnowledgeGraph,
    vocab: &crate::text::Vocabulary,
    opts: &EvalOptions,
) -> Result<Array2<f64>, EvalError> {
    let n = graph.num_entities();
    let d = model.config().hidden;
    let mut out = Array2::zeros((n, d));
    let mut start = 0usize;
    while start < n {
        let end = (start + opts.batch_size).min(n);
        let seqs: Vec<_> = (start..end)
            .map(|e| build_tail_sequence(graph, e, vocab, opts.max_len))
            .collect::<Result<_, _>>()?;
        let output = encode(&model.tail, &seqs)?;
        for (i, row) in output.pooled.rows().into_iter().enumerate() {
            out.row_mut(start + i).assign(&row);
        }
        start = end;
    }
    Ok(out)
}

/// Ranks every query of the split in both directions (inverse triples are
/// part of the split after augmentation) and aggregates one metric set.
pub fn evaluate_split(
    model: &BiEncoder,
    graph: &KnowledgeGraph,
    vocab: &crate::text::Vocabulary,
    filter_index: &FilterIndex,
    split: Split,
    opts: &EvalOptions,
) -> Result<(RankingMetrics, Vec<QueryRecord>), EvalError> {
    if !graph.augmented {
        return Err(EvalError::NotAugmented);
    }
    let triples = graph.split(split);
    if triples.is_empty() {
        return Err(EvalError::EmptyRanks);
    }

    let tails = encode_all_tails(model, graph, vocab, opts)?;
    // normalize candidate rows once; cosine becomes a dot product
    let mut tail_norms = Array1::zeros(tails.nrows());
    for (i, row) in tails.rows().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            return Err(EvalError::Scoring(ScoringError::ZeroVector(i)));
        }
        tail_norms[i] = norm;
    }
    let tails_unit = &tails / &tail_norms.view().insert_axis(ndarray::Axis(1));

    let mut ranks = Vec::with_capacity(triples.len());
    let mut records = Vec::new();
    let empty = HashSet::new();

    let mut start = 0usize;
    while start < triples.len() {
        let end = (start + opts.batch_size).min(triples.len());
        let seqs: Vec<_> = triples[start..end]
            .iter()
            .map(|t| build_hr_sequence(graph, t.head, t.relation, vocab, opts.max_len))
            .collect::<Result<_, _>>()?;
        let output = encode(&model.hr, &seqs)?;
        for (i, triple) in triples[start..end].iter().enumerate() {
            let q = output.pooled.row(i);
            let norm = q.dot(&q).sqrt();
            if norm == 0.0 {
                return Err(EvalError::Scoring(ScoringError::ZeroVector(start + i)));
            }
            let scores = tails_unit.dot(&q) / norm;

            let mut filter: HashSet<EntityId> = if opts.raw {
                HashSet::new()
            } else {
                filter_index
                    .tails(triple.head, triple.relation)
                    .cloned()
                    .unwrap_or_default()
            };
            filter.remove(&triple.tail);

            let filtered_rank = rank_from_scores(scores.view(), triple.tail, &filter)?;
            ranks.push(filtered_rank);
            if opts.collect_records {
                let raw_rank = rank_from_scores(scores.view(), triple.tail, &empty)?;
                records.push(QueryRecord {
                    head: graph.entities[triple.head].key.clone(),
                    relation: graph.relations[triple.relation].key.clone(),
                    tail: graph.entities[triple.tail].key.clone(),
                    direction: if graph.relations[triple.relation].inverse {
                        "inverse"
                    } else {
                        "forward"
                    },
                    raw_rank,
                    filtered_rank,
                });
            }
        }
        start = end;
    }

    let metrics = compute_metrics(&ranks)?;
    Ok((metrics, records))
}
