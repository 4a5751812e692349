//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde_json::json;

use pmd_core::distill::DistillWeights;
use pmd_core::eval::{evaluate_split, EvalOptions};
use pmd_core::kg::{add_inverse_triples, build_filter_index, load_graph, KnowledgeGraph, Split};
use pmd_core::model::{load_checkpoint, save_checkpoint};
use pmd_core::pipeline::{
    execute_run, pre_distill, PipelineError, PreparedData, RunLogs, StageReport,
};
use pmd_core::synthetic::{generate_files, SyntheticConfig};
use pmd_core::text::Vocabulary;

use crate::config::RunConfig;

/// Process exit classes: 2 config, 3 data, 4 numeric failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitClass {
    Config = 2,
    Data = 3,
    Numeric = 4,
}

#[derive(Debug)]
pub struct CmdError {
    pub class: ExitClass,
    pub error: anyhow::Error,
}

pub type CmdResult<T = ()> = Result<T, CmdError>;

pub fn config_err(error: impl Into<anyhow::Error>) -> CmdError {
    CmdError {
        class: ExitClass::Config,
        error: error.into(),
    }
}

pub fn data_err(error: impl Into<anyhow::Error>) -> CmdError {
    CmdError {
        class: ExitClass::Data,
        error: error.into(),
    }
}

fn pipeline_err(error: PipelineError) -> CmdError {
    let class = if error.is_numeric() {
        ExitClass::Numeric
    } else {
        ExitClass::Data
    };
    CmdError {
        class,
        error: error.into(),
    }
}

fn refuse_overwrite(path: &Path, force: bool) -> CmdResult {
    if path.exists() && !force {
        return Err(config_err(anyhow!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn load_augmented_graph(cfg: &RunConfig) -> CmdResult<KnowledgeGraph> {
    let [train, valid, test, desc] = cfg.require_data().map_err(config_err)?;
    let graph = load_graph(train, valid, test, desc).map_err(data_err)?;
    add_inverse_triples(graph).map_err(data_err)
}

fn prepared_dir(cfg: &RunConfig) -> CmdResult<PathBuf> {
    Ok(cfg.require_out_dir().map_err(config_err)?.join("prepared"))
}

fn load_prepared_vocab(cfg: &RunConfig) -> CmdResult<Vocabulary> {
    let path = prepared_dir(cfg)?.join("vocab.txt");
    if !path.exists() {
        return Err(config_err(anyhow!(
            "missing {}; run `pmd prepare` first",
            path.display()
        )));
    }
    Vocabulary::load(&path).map_err(data_err)
}

pub fn cmd_gen_synth(
    out: &Path,
    specimens: usize,
    values: usize,
    train_facts: usize,
    valid_facts: usize,
    seed: u64,
) -> CmdResult {
    let cfg = SyntheticConfig {
        specimens,
        values_per_family: values,
        train_facts,
        valid_facts,
    };
    let dataset = generate_files(&cfg, seed, out).map_err(data_err)?;
    println!(
        "wrote synthetic dataset to {}: {} entities, {} relations, {}/{}/{} train/valid/test",
        out.display(),
        dataset.entities.len(),
        dataset.num_relations(),
        dataset.train.len(),
        dataset.valid.len(),
        dataset.test.len()
    );
    Ok(())
}

pub fn cmd_prepare(cfg: &RunConfig, force: bool) -> CmdResult {
    cfg.validate().map_err(config_err)?;
    let out = prepared_dir(cfg)?;
    refuse_overwrite(&out, force)?;

    let [train, valid, test, desc] = cfg.require_data().map_err(config_err)?;
    let graph = load_graph(train, valid, test, desc).map_err(data_err)?;
    let stats_pre = (
        graph.num_entities(),
        graph.num_relations(),
        graph.train.len(),
        graph.valid.len(),
        graph.test.len(),
    );
    let unseen = graph.entities.iter().filter(|e| e.unseen).count();
    let graph = add_inverse_triples(graph).map_err(data_err)?;
    let vocab =
        Vocabulary::build(&graph, cfg.vocab_min_freq, cfg.vocab_max_size).map_err(data_err)?;
    let filter = build_filter_index(&graph);

    fs::create_dir_all(&out)
        .with_context(|| format!("cannot create {}", out.display()))
        .map_err(data_err)?;
    vocab.save(&out.join("vocab.txt")).map_err(data_err)?;
    let stats = json!({
        "entities": stats_pre.0,
        "relations": stats_pre.1,
        "train": stats_pre.2,
        "valid": stats_pre.3,
        "test": stats_pre.4,
        "augmented_relations": graph.num_relations(),
        "augmented_train": graph.train.len(),
        "augmented_valid": graph.valid.len(),
        "augmented_test": graph.test.len(),
        "unseen_entities": unseen,
        "vocab_size": vocab.len(),
        "filter_keys": filter.len(),
    });
    let stats_text = serde_json::to_string_pretty(&stats).expect("stats serialize");
    fs::write(out.join("stats.json"), stats_text.clone() + "\n")
        .with_context(|| "cannot write stats.json")
        .map_err(data_err)?;

    println!("prepared dataset at {}", out.display());
    println!("  entities           {}", stats_pre.0);
    println!("  relations          {}", stats_pre.1);
    println!("  train triples      {}", stats_pre.2);
    println!("  valid triples      {}", stats_pre.3);
    println!("  test triples       {}", stats_pre.4);
    println!("  after augmentation {} relations, {} train", graph.num_relations(), graph.train.len());
    println!("  unseen entities    {unseen}");
    println!("  vocabulary size    {}", vocab.len());
    Ok(())
}

fn render_report_table(reports: &[StageReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>6} {:>12} {:>10} {:>6} {:>6} {:>9} {:>7} {:>7} {:>7} {:>7}",
        "grade", "params", "mask_rate", "alpha", "beta", "MR", "MRR", "h@1", "h@3", "h@10"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:>6} {:>12} {:>10} {:>6} {:>6} {:>9.3} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            r.grade, r.parameter_count, r.mask_rate, r.alpha, r.beta, r.mr, r.mrr, r.hits1,
            r.hits3, r.hits10
        );
    }
    out
}

pub fn cmd_run(cfg: &RunConfig, force: bool) -> CmdResult {
    cfg.validate().map_err(config_err)?;
    let vocab = load_prepared_vocab(cfg)?;
    let run_dir = cfg.require_out_dir().map_err(config_err)?.join("run");
    refuse_overwrite(&run_dir, force)?;

    let graph = load_augmented_graph(cfg)?;
    let filter = build_filter_index(&graph);
    let data = PreparedData::build(&graph, &vocab, &filter, cfg.seq_max_len)
        .map_err(|e| data_err(anyhow!(e)))?;
    let plan = cfg.run_plan(vocab.len()).map_err(config_err)?;
    let snapshot = cfg.to_config_text();

    let summary = execute_run(&run_dir, &snapshot, &plan, &data).map_err(pipeline_err)?;
    let mut reports = vec![summary.baseline_report.clone()];
    reports.extend(summary.stage_reports.iter().cloned());
    println!("run complete: {}", summary.dir.display());
    print!("{}", render_report_table(&reports));
    Ok(())
}

pub fn cmd_sweep_mask(
    cfg: &RunConfig,
    rates: &[f64],
    baseline: Option<&Path>,
    force: bool,
) -> CmdResult {
    cfg.validate().map_err(config_err)?;
    for &rate in rates {
        if !(0.0..=1.0).contains(&rate) || rate.is_nan() {
            return Err(config_err(anyhow!("mask rate {rate} outside [0, 1]")));
        }
    }
    let baseline_path = baseline
        .map(Path::to_path_buf)
        .or_else(|| cfg.run_baseline_ckpt.clone())
        .ok_or_else(|| {
            config_err(anyhow!(
                "sweep-mask needs a trained baseline (pass --baseline or set run.baseline_ckpt)"
            ))
        })?;
    let teacher = load_checkpoint(&baseline_path).map_err(data_err)?;

    let vocab = load_prepared_vocab(cfg)?;
    if vocab.len() != teacher.config().vocab_size {
        return Err(data_err(anyhow!(
            "vocabulary size {} does not match checkpoint vocab size {}",
            vocab.len(),
            teacher.config().vocab_size
        )));
    }
    let graph = load_augmented_graph(cfg)?;
    let filter = build_filter_index(&graph);
    let max_len = teacher.config().max_len;
    let data = PreparedData::build(&graph, &vocab, &filter, max_len)
        .map_err(|e| data_err(anyhow!(e)))?;
    let mut settings = cfg.settings();
    settings.max_len = max_len;

    let out = cfg.require_out_dir().map_err(config_err)?.join("sweep");
    refuse_overwrite(&out, force)?;
    fs::create_dir_all(&out)
        .with_context(|| format!("cannot create {}", out.display()))
        .map_err(data_err)?;

    let weights =
        DistillWeights::new(cfg.schedule_alpha, cfg.schedule_beta).map_err(config_err)?;
    let mut csv = String::from("rate,MR,MRR,hits1,hits3,hits10\n");
    for &rate in rates {
        let mut logs = RunLogs::default();
        let result = pre_distill(
            &teacher,
            rate,
            weights,
            cfg.train_epochs,
            cfg.train_lr,
            cfg.train_batch_size,
            &data,
            &settings,
            &mut logs,
        )
        .map_err(pipeline_err)?;
        let ckpt = out.join(format!("pre-distill-{rate}.pmdc"));
        save_checkpoint(&ckpt, &result.model).map_err(data_err)?;
        let opts = EvalOptions {
            max_len,
            batch_size: 64,
            raw: cfg.eval_raw,
            collect_records: false,
        };
        let (metrics, _) =
            evaluate_split(&result.model, &graph, &vocab, &filter, Split::Test, &opts)
                .map_err(|e| data_err(anyhow!(e)))?;
        let _ = writeln!(
            csv,
            "{rate},{},{},{},{},{}",
            metrics.mr, metrics.mrr, metrics.hits1, metrics.hits3, metrics.hits10
        );
        println!(
            "rate {rate}: MRR {:.4}, hits@1 {:.4}, hits@10 {:.4}",
            metrics.mrr, metrics.hits1, metrics.hits10
        );
    }
    let csv_path = out.join("sweep_mask.csv");
    fs::write(&csv_path, &csv)
        .with_context(|| format!("cannot write {}", csv_path.display()))
        .map_err(data_err)?;
    println!("wrote {}", csv_path.display());
    Ok(())
}

pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: Split,
    out_path: Option<&Path>,
) -> CmdResult {
    cfg.validate().map_err(config_err)?;
    let model = load_checkpoint(checkpoint).map_err(data_err)?;
    let vocab = load_prepared_vocab(cfg)?;
    if vocab.len() != model.config().vocab_size {
        return Err(data_err(anyhow!(
            "vocabulary size {} does not match checkpoint vocab size {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let graph = load_augmented_graph(cfg)?;
    let filter = build_filter_index(&graph);
    let opts = EvalOptions {
        max_len: model.config().max_len,
        batch_size: 64,
        raw: cfg.eval_raw,
        collect_records: cfg.eval_ranks_csv,
    };
    let (metrics, records) = evaluate_split(&model, &graph, &vocab, &filter, split, &opts)
        .map_err(|e| data_err(anyhow!(e)))?;

    let report = json!({
        "split": split.name(),
        "checkpoint": checkpoint.display().to_string(),
        "grade": model.config().layers,
        "parameter_count": model.num_params(),
        "raw_protocol": cfg.eval_raw,
        "MR": metrics.mr,
        "MRR": metrics.mrr,
        "hits1": metrics.hits1,
        "hits3": metrics.hits3,
        "hits10": metrics.hits10,
        "n": metrics.n,
        "seed": cfg.run_seed,
    });
    let text = serde_json::to_string_pretty(&report).expect("report serialize") + "\n";
    let out_file = match out_path {
        Some(p) => p.to_path_buf(),
        None => cfg
            .require_out_dir()
            .map_err(config_err)?
            .join(format!("eval-{}.json", split.name())),
    };
    if let Some(parent) = out_file.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).ok();
        }
    }
    fs::write(&out_file, &text)
        .with_context(|| format!("cannot write {}", out_file.display()))
        .map_err(data_err)?;
    print!("{text}");

    if cfg.eval_ranks_csv {
        let mut csv = String::from("head,relation,tail,direction,raw_rank,filtered_rank\n");
        for r in &records {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{}",
                r.head, r.relation, r.tail, r.direction, r.raw_rank, r.filtered_rank
            );
        }
        let csv_path = out_file.with_extension("ranks.csv");
        fs::write(&csv_path, csv)
            .with_context(|| format!("cannot write {}", csv_path.display()))
            .map_err(data_err)?;
        println!("wrote {}", csv_path.display());
    }
    Ok(())
}

pub fn cmd_report(inputs: &[PathBuf], run_dir: Option<&Path>) -> CmdResult {
    let mut paths: Vec<PathBuf> = inputs.to_vec();
    if let Some(dir) = run_dir {
        let entries = fs::read_dir(dir)
            .with_context(|| format!("cannot read {}", dir.display()))
            .map_err(data_err)?;
        for entry in entries {
            let path = entry.map_err(|e| data_err(anyhow!(e)))?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name.starts_with("metrics-") && name.ends_with(".json") {
                paths.push(path);
            }
        }
    }
    if paths.is_empty() {
        return Err(config_err(anyhow!(
            "no metrics files given; pass paths or --run-dir"
        )));
    }
    paths.sort();
    let mut reports = Vec::new();
    for path in &paths {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))
            .map_err(data_err)?;
        let report: StageReport = serde_json::from_str(&text)
            .with_context(|| format!("{} is not a metrics report", path.display()))
            .map_err(data_err)?;
        reports.push(report);
    }
    reports.sort_by(|a, b| b.grade.cmp(&a.grade).then(
        a.mask_rate.partial_cmp(&b.mask_rate).unwrap_or(std::cmp::Ordering::Equal),
    ));
    print!("{}", render_report_table(&reports));
    Ok(())
}
