//! Integration tests for the training pipeline: full-objective gradient
//! checks against finite differences, determinism, warm-start equalities,
//! and batched-versus-brute-force evaluation.

use std::collections::HashSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use pmd_core::distill::{DistillWeights, ScoreDistillMode};
use pmd_core::encoder::{encode, EncoderConfig, Pooling};
use pmd_core::eval::{evaluate_split, rank_entities, EvalOptions};
use pmd_core::kg::{add_inverse_triples, build_filter_index, load_graph, FilterIndex, KnowledgeGraph, Split};
use pmd_core::model::BiEncoder;
use pmd_core::pipeline::{
    derive_rng, pre_distill, train_baseline, training_step, FeatureLayer, PreparedData, RunLogs,
    StepOptions, Strategy, TrainSettings,
};
use pmd_core::synthetic::{generate_files, SyntheticConfig};
use pmd_core::text::{apply_mask, build_hr_sequence, build_tail_sequence, Vocabulary};

struct World {
    _dir: TempDir,
    graph: KnowledgeGraph,
    vocab: Vocabulary,
    filter: FilterIndex,
}

fn tiny_world(specimens: usize, seed: u64) -> World {
    let dir = TempDir::new().unwrap();
    let cfg = SyntheticConfig {
        specimens,
        values_per_family: 4,
        train_facts: 5,
        valid_facts: 1,
    };
    generate_files(&cfg, seed, dir.path()).unwrap();
    let graph = load_graph(
        &dir.path().join("train.tsv"),
        &dir.path().join("valid.tsv"),
        &dir.path().join("test.tsv"),
        &dir.path().join("descriptions.json"),
    )
    .unwrap();
    let graph = add_inverse_triples(graph).unwrap();
    let vocab = Vocabulary::build(&graph, 1, 5000).unwrap();
    let filter = build_filter_index(&graph);
    World {
        _dir: dir,
        graph,
        vocab,
        filter,
    }
}

fn tiny_encoder(layers: usize, hidden: usize, max_len: usize) -> EncoderConfig {
    EncoderConfig {
        layers,
        hidden,
        heads: 2,
        feed_forward: hidden * 2,
        vocab_size: 0, // filled by callers
        max_len,
        dropout: 0.0,
        pooling: Pooling::Mean,
    }
}

fn settings(seed: u64, max_len: usize) -> TrainSettings {
    TrainSettings {
        seed,
        max_len,
        eval_batch: 32,
        ..TrainSettings::default()
    }
}

/// Builds one fixed masked batch over the first few train triples.
fn fixed_batch(
    world: &World,
    max_len: usize,
    batch: usize,
    rate: f64,
) -> (pmd_core::text::MaskedBatch, Vec<usize>) {
    let triples = &world.graph.train[..batch];
    let hr: Vec<_> = triples
        .iter()
        .map(|t| build_hr_sequence(&world.graph, t.head, t.relation, &world.vocab, max_len).unwrap())
        .collect();
    let tails: Vec<_> = triples
        .iter()
        .map(|t| build_tail_sequence(&world.graph, t.tail, &world.vocab, max_len).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(999);
    let masked = apply_mask(&hr, &tails, rate, true, &mut rng).unwrap();
    let labels = (0..batch).collect();
    (masked, labels)
}

fn check_step_gradients(strategy: Strategy, rate: f64, coords: usize, seed: u64) {
    let world = tiny_world(12, seed);
    let max_len = 24;
    let mut cfg = tiny_encoder(2, 16, max_len);
    cfg.vocab_size = world.vocab.len();
    let student = BiEncoder::init(&cfg, 11).unwrap();
    let teacher = BiEncoder::init(&cfg, 12).unwrap();
    let (batch, labels) = fixed_batch(&world, max_len, 4, rate);
    let opts = StepOptions {
        strategy,
        weights: DistillWeights::new(0.1, 0.1).unwrap(),
        temperature: 0.05,
        score_mode: ScoreDistillMode::Matrix,
        lkd_temperature: 2.0,
        feature_layer: FeatureLayer::Final,
    };

    let (_, grads) = training_step(&student, Some(&teacher), &batch, &labels, &opts, None).unwrap();
    let loss_of = |model: &BiEncoder| {
        training_step(model, Some(&teacher), &batch, &labels, &opts, None)
            .unwrap()
            .0
            .total
    };

    let names: Vec<String> = student.tensors().iter().map(|(n, _)| n.clone()).collect();
    let mut pick = ChaCha8Rng::seed_from_u64(777);
    let step = 1e-4;
    for _ in 0..coords {
        let ti = pick.random_range(0..names.len());
        let len = student.tensors()[ti].1.len();
        let ci = pick.random_range(0..len);
        let mut plus = student.clone();
        plus.tensors_mut()[ti].1.as_slice_mut()[ci] += step;
        let mut minus = student.clone();
        minus.tensors_mut()[ti].1.as_slice_mut()[ci] -= step;
        let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * step);
        let analytic = grads.tensors()[ti].1.as_slice()[ci];
        let denom = analytic.abs().max(fd.abs()).max(1e-4);
        assert!(
            (analytic - fd).abs() / denom < 1e-3,
            "{strategy:?} {}[{ci}]: analytic {analytic} vs fd {fd}",
            names[ti]
        );
    }
}

#[test]
fn pmd_objective_gradients_match_finite_differences() {
    check_step_gradients(Strategy::Pmd, 0.25, 40, 51);
}

#[test]
fn lkd_objective_gradients_match_finite_differences() {
    check_step_gradients(Strategy::Lkd, 0.0, 25, 52);
}

#[test]
fn pkd_objective_gradients_match_finite_differences() {
    check_step_gradients(Strategy::Pkd, 0.0, 25, 53);
}

#[test]
fn baseline_loss_is_pure_cross_entropy_and_drops() {
    let world = tiny_world(16, 3);
    let max_len = 24;
    let mut cfg = tiny_encoder(1, 16, max_len);
    cfg.vocab_size = world.vocab.len();
    let set = settings(5, max_len);
    let data = PreparedData::build(&world.graph, &world.vocab, &world.filter, max_len).unwrap();
    let mut logs = RunLogs::default();
    let result = train_baseline(&cfg, 4, 3e-3, 16, &data, &set, &mut logs).unwrap();
    assert!(result.steps_run > 0);

    // every step row is CE-only: total equals ce, other components zero
    for row in &logs.steps {
        assert_eq!(row.total, row.ce);
        assert_eq!(row.score, 0.0);
        assert_eq!(row.mgfd, 0.0);
        assert!(!row.mgfd_active);
    }
    // the loss trend is downward: mean of last epoch below mean of first
    let per_epoch = logs.steps.len() / 4;
    let mean = |rows: &[pmd_core::pipeline::StepRow]| {
        rows.iter().map(|r| r.total).sum::<f64>() / rows.len() as f64
    };
    assert!(mean(&logs.steps[3 * per_epoch..]) < mean(&logs.steps[..per_epoch]));
    // per-epoch validation MRR was logged
    assert_eq!(logs.epochs.len(), 4);
}

#[test]
fn training_is_bit_reproducible_for_a_fixed_seed() {
    let world = tiny_world(10, 4);
    let max_len = 24;
    let mut cfg = tiny_encoder(1, 16, max_len);
    cfg.vocab_size = world.vocab.len();
    let data = PreparedData::build(&world.graph, &world.vocab, &world.filter, max_len).unwrap();

    let run = || {
        let set = settings(21, max_len);
        let mut logs = RunLogs::default();
        train_baseline(&cfg, 2, 3e-3, 8, &data, &set, &mut logs)
            .unwrap()
            .model
    };
    let a = run();
    let b = run();
    assert!(a.bit_equal(&b));

    let set = settings(22, max_len);
    let mut logs = RunLogs::default();
    let c = train_baseline(&cfg, 2, 3e-3, 8, &data, &set, &mut logs)
        .unwrap()
        .model;
    assert!(!a.bit_equal(&c));
}

#[test]
fn copy_init_step_zero_distillation_losses_vanish() {
    let world = tiny_world(12, 6);
    let max_len = 24;
    let mut cfg = tiny_encoder(2, 16, max_len);
    cfg.vocab_size = world.vocab.len();
    let teacher = BiEncoder::init(&cfg, 33).unwrap();
    let student = teacher.clone(); // copy warm start
    let (batch, labels) = fixed_batch(&world, max_len, 4, 0.2);
    let opts = StepOptions {
        strategy: Strategy::Pmd,
        weights: DistillWeights::new(0.1, 0.1).unwrap(),
        temperature: 0.05,
        score_mode: ScoreDistillMode::Matrix,
        lkd_temperature: 2.0,
        feature_layer: FeatureLayer::Final,
    };
    let (components, _) =
        training_step(&student, Some(&teacher), &batch, &labels, &opts, None).unwrap();
    assert_eq!(components.score, 0.0);
    assert_eq!(components.mgfd, 0.0);
    assert!(components.mgfd_active);
    assert!(components.ce > 0.0);
}

#[test]
fn pre_distill_copy_of_teacher_evaluates_identically() {
    let world = tiny_world(12, 7);
    let max_len = 24;
    let mut cfg = tiny_encoder(2, 16, max_len);
    cfg.vocab_size = world.vocab.len();
    let teacher = BiEncoder::init(&cfg, 44).unwrap();
    let student = teacher.clone();
    let opts = EvalOptions {
        max_len,
        batch_size: 16,
        ..EvalOptions::default()
    };
    let (a, _) = evaluate_split(&teacher, &world.graph, &world.vocab, &world.filter, Split::Test, &opts).unwrap();
    let (b, _) = evaluate_split(&student, &world.graph, &world.vocab, &world.filter, Split::Test, &opts).unwrap();
    assert_eq!(a, b);
}

#[test]
fn pre_distill_rejects_architecture_mismatch() {
    let world = tiny_world(10, 8);
    let max_len = 24;
    let mut cfg = tiny_encoder(2, 16, max_len);
    cfg.vocab_size = world.vocab.len();
    let teacher = BiEncoder::init(&cfg, 1).unwrap();
    // a 1-layer "copy" of a 2-layer teacher cannot exist
    let data = PreparedData::build(&world.graph, &world.vocab, &world.filter, max_len).unwrap();
    let set = settings(5, max_len);
    let mut logs = RunLogs::default();
    let shallow = teacher
        .select_layers(&cfg.at_layers(1))
        .unwrap();
    let err = pre_distill(
        &shallow,
        0.2,
        DistillWeights::new(0.1, 0.1).unwrap(),
        1,
        1e-3,
        8,
        &data,
        &set,
        &mut logs,
    );
    // same-depth pre-distillation works; mismatch is exercised through the
    // stage init path below
    assert!(err.is_ok());
    let stage = pmd_core::pipeline::StageSpec {
        grade: 2,
        mask_rate: 0.2,
        alpha: 0.1,
        beta: 0.1,
        epochs: 1,
        learning_rate: 1e-3,
        batch_size: 8,
        init: pmd_core::pipeline::InitMode::Copy,
    };
    let out = pmd_core::pipeline::run_stage(
        &shallow, &stage, 1, Strategy::Pmd, &data, &set, &mut logs, None,
    );
    assert!(matches!(
        out,
        Err(pmd_core::pipeline::PipelineError::ArchitectureMismatch(_))
    ));
}

#[test]
fn divergence_reports_stage_and_step() {
    let world = tiny_world(10, 9);
    let max_len = 24;
    let mut cfg = tiny_encoder(1, 16, max_len);
    cfg.vocab_size = world.vocab.len();
    let mut model = BiEncoder::init(&cfg, 2).unwrap();
    model.hr.token_embedding[[0, 0]] = f64::NAN;
    let (batch, labels) = fixed_batch(&world, max_len, 4, 0.0);
    let opts = StepOptions {
        strategy: Strategy::None,
        weights: DistillWeights::new(0.0, 0.0).unwrap(),
        temperature: 0.05,
        score_mode: ScoreDistillMode::Matrix,
        lkd_temperature: 2.0,
        feature_layer: FeatureLayer::Final,
    };
    let err = training_step(&model, None, &batch, &labels, &opts, None).unwrap_err();
    assert!(err.is_numeric(), "unexpected error kind: {err}");
}

#[test]
fn batched_evaluation_matches_per_query_brute_force() {
    let world = tiny_world(6, 10); // 6 specimens + 32 totems = 38 entities
    let max_len = 24;
    let mut cfg = tiny_encoder(1, 16, max_len);
    cfg.vocab_size = world.vocab.len();
    let model = BiEncoder::init(&cfg, 77).unwrap();
    let opts = EvalOptions {
        max_len,
        batch_size: 7, // awkward batch size on purpose
        ..EvalOptions::default()
    };
    let (metrics, _) = evaluate_split(
        &model,
        &world.graph,
        &world.vocab,
        &world.filter,
        Split::Test,
        &opts,
    )
    .unwrap();

    // brute force: one query at a time, scalar cosine ranking
    let tails: Vec<_> = (0..world.graph.num_entities())
        .map(|e| build_tail_sequence(&world.graph, e, &world.vocab, max_len).unwrap())
        .collect();
    let tail_emb = encode(&model.tail, &tails).unwrap().pooled;
    let mut ranks = Vec::new();
    for t in world.graph.split(Split::Test) {
        let hr = build_hr_sequence(&world.graph, t.head, t.relation, &world.vocab, max_len).unwrap();
        let q = encode(&model.hr, &[hr]).unwrap().pooled;
        let mut filter: HashSet<usize> = world
            .filter
            .tails(t.head, t.relation)
            .cloned()
            .unwrap_or_default();
        filter.remove(&t.tail);
        ranks.push(rank_entities(q.row(0), tail_emb.view(), t.tail, &filter).unwrap());
    }
    let brute = pmd_core::eval::compute_metrics(&ranks).unwrap();
    assert_eq!(metrics, brute);
}

#[test]
fn cached_tail_evaluation_is_bit_identical_to_recomputation() {
    let world = tiny_world(8, 12);
    let max_len = 24;
    let mut cfg = tiny_encoder(1, 16, max_len);
    cfg.vocab_size = world.vocab.len();
    let model = BiEncoder::init(&cfg, 3).unwrap();
    let opts = EvalOptions {
        max_len,
        batch_size: 16,
        ..EvalOptions::default()
    };
    let a = evaluate_split(&model, &world.graph, &world.vocab, &world.filter, Split::Valid, &opts)
        .unwrap()
        .0;
    let b = evaluate_split(&model, &world.graph, &world.vocab, &world.filter, Split::Valid, &opts)
        .unwrap()
        .0;
    assert_eq!(a, b);
    assert_eq!(a.mr.to_bits(), b.mr.to_bits());
    assert_eq!(a.mrr.to_bits(), b.mrr.to_bits());
}

#[test]
fn mask_streams_differ_per_step_but_reproduce_per_seed() {
    let a = derive_rng(9, "mask", 0).random::<u64>();
    let b = derive_rng(9, "mask", 1).random::<u64>();
    let c = derive_rng(9, "mask", 0).random::<u64>();
    assert_ne!(a, b);
    assert_eq!(a, c);
}

/// Pilot for calibrating the long-running acceptance configurations; run
/// manually with `cargo test -p pmd-core --test training -- --ignored pilot`.
#[test]
#[ignore]
fn pilot_baseline_timing_and_quality() {
    let dir = TempDir::new().unwrap();
    let cfg = SyntheticConfig::default();
    generate_files(&cfg, 7, dir.path()).unwrap();
    let graph = load_graph(
        &dir.path().join("train.tsv"),
        &dir.path().join("valid.tsv"),
        &dir.path().join("test.tsv"),
        &dir.path().join("descriptions.json"),
    )
    .unwrap();
    let graph = add_inverse_triples(graph).unwrap();
    let vocab = Vocabulary::build(&graph, 1, 5000).unwrap();
    let filter = build_filter_index(&graph);
    let max_len = 32;

    let enc = EncoderConfig {
        layers: 4,
        hidden: 64,
        heads: 4,
        feed_forward: 128,
        vocab_size: vocab.len(),
        max_len,
        dropout: 0.0,
        pooling: Pooling::Mean,
    };
    let set = settings(7, max_len);
    let data = PreparedData::build(&graph, &vocab, &filter, max_len).unwrap();
    let mut logs = RunLogs::default();
    let start = std::time::Instant::now();
    let result = train_baseline(&enc, 10, 3e-3, 32, &data, &set, &mut logs).unwrap();
    let elapsed = start.elapsed();
    println!(
        "pilot: {} steps in {:.1}s ({:.3}s/step), best val MRR {:.4}",
        result.steps_run,
        elapsed.as_secs_f64(),
        elapsed.as_secs_f64() / result.steps_run as f64,
        result.best_val_mrr,
    );
    for row in &logs.epochs {
        println!("  epoch {}: val MRR {:.4}", row.epoch, row.val_mrr);
    }
}
