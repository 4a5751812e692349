//! Line-oriented key-value run configuration with dotted section keys.
//!
//! Resolution order: built-in defaults, then the config file, then the
//! `PMD_SEED` environment variable (seed only), then `--set key=value`
//! flags. The fully resolved configuration serializes back to the same
//! format and is persisted verbatim into every run directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use pmd_core::distill::{DistillWeights, ScoreDistillMode};
use pmd_core::encoder::{EncoderConfig, Pooling};
use pmd_core::pipeline::{
    DistillSchedule, FeatureLayer, MaskMode, RunPlan, Strategy, TrainSettings,
};

/// Fully resolved configuration for every subcommand.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data_train: Option<PathBuf>,
    pub data_valid: Option<PathBuf>,
    pub data_test: Option<PathBuf>,
    pub data_descriptions: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub vocab_min_freq: usize,
    pub vocab_max_size: usize,
    pub seq_max_len: usize,
    pub mask_tail: bool,
    pub enc_layers: usize,
    pub enc_hidden: usize,
    pub enc_heads: usize,
    pub enc_ff: usize,
    pub enc_dropout: f64,
    pub enc_pooling: Pooling,
    pub score_temperature: f64,
    pub score_distill_mode: ScoreDistillMode,
    pub score_full_softmax: bool,
    pub feature_layer: FeatureLayer,
    pub lkd_temperature: f64,
    pub train_epochs: usize,
    pub train_baseline_epochs: Option<usize>,
    pub train_batch_size: usize,
    pub train_lr: f64,
    pub train_weight_decay: f64,
    pub schedule_grades: Vec<usize>,
    pub schedule_mask_rates: Vec<f64>,
    pub schedule_alpha: f64,
    pub schedule_beta: f64,
    pub schedule_mode: MaskMode,
    pub run_strategy: Strategy,
    pub run_seed: u64,
    pub run_baseline_ckpt: Option<PathBuf>,
    pub eval_raw: bool,
    pub eval_ranks_csv: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_train: None,
            data_valid: None,
            data_test: None,
            data_descriptions: None,
            out_dir: None,
            vocab_min_freq: 1,
            vocab_max_size: 30_000,
            seq_max_len: 64,
            mask_tail: true,
            enc_layers: 4,
            enc_hidden: 128,
            enc_heads: 4,
            enc_ff: 256,
            enc_dropout: 0.1,
            enc_pooling: Pooling::Mean,
            score_temperature: 0.05,
            score_distill_mode: ScoreDistillMode::Matrix,
            score_full_softmax: false,
            feature_layer: FeatureLayer::Final,
            lkd_temperature: 2.0,
            train_epochs: 50,
            train_baseline_epochs: None,
            train_batch_size: 32,
            train_lr: 3e-4,
            train_weight_decay: 0.01,
            schedule_grades: vec![4, 3, 2, 1],
            schedule_mask_rates: vec![0.2, 0.1, 0.05, 0.0],
            schedule_alpha: 0.1,
            schedule_beta: 0.1,
            schedule_mode: MaskMode::Decreasing,
            run_strategy: Strategy::Pmd,
            run_seed: 7,
            run_baseline_ckpt: None,
            eval_raw: false,
            eval_ranks_csv: false,
        }
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => bail!("{key}: expected a boolean, got `{other}`"),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| anyhow!("{key}: bad value `{value}`: {e}"))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num::<T>(key, s))
        .collect()
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "data.train" => self.data_train = Some(PathBuf::from(value)),
            "data.valid" => self.data_valid = Some(PathBuf::from(value)),
            "data.test" => self.data_test = Some(PathBuf::from(value)),
            "data.descriptions" => self.data_descriptions = Some(PathBuf::from(value)),
            "out.dir" => self.out_dir = Some(PathBuf::from(value)),
            "vocab.min_freq" => self.vocab_min_freq = parse_num(key, value)?,
            "vocab.max_size" => self.vocab_max_size = parse_num(key, value)?,
            "seq.max_len" => self.seq_max_len = parse_num(key, value)?,
            "mask.tail" => self.mask_tail = parse_bool(key, value)?,
            "encoder.layers" => self.enc_layers = parse_num(key, value)?,
            "encoder.hidden" => self.enc_hidden = parse_num(key, value)?,
            "encoder.heads" => self.enc_heads = parse_num(key, value)?,
            "encoder.ff" => self.enc_ff = parse_num(key, value)?,
            "encoder.dropout" => self.enc_dropout = parse_num(key, value)?,
            "encoder.pooling" => {
                self.enc_pooling = match value {
                    "mean" => Pooling::Mean,
                    "cls" => Pooling::Cls,
                    other => bail!("encoder.pooling: expected mean|cls, got `{other}`"),
                }
            }
            "score.temperature" => self.score_temperature = parse_num(key, value)?,
            "score.distill_mode" => {
                self.score_distill_mode = match value {
                    "matrix" => ScoreDistillMode::Matrix,
                    "diagonal" => ScoreDistillMode::Diagonal,
                    other => bail!("score.distill_mode: expected matrix|diagonal, got `{other}`"),
                }
            }
            "score.full_softmax" => self.score_full_softmax = parse_bool(key, value)?,
            "distill.feature_layer" => {
                self.feature_layer = if value == "final" {
                    FeatureLayer::Final
                } else {
                    FeatureLayer::Index(parse_num(key, value)?)
                }
            }
            "distill.lkd_temperature" => self.lkd_temperature = parse_num(key, value)?,
            "train.epochs" => self.train_epochs = parse_num(key, value)?,
            "train.baseline_epochs" => {
                self.train_baseline_epochs = Some(parse_num(key, value)?)
            }
            "train.batch_size" => self.train_batch_size = parse_num(key, value)?,
            "train.lr" => self.train_lr = parse_num(key, value)?,
            "train.weight_decay" => self.train_weight_decay = parse_num(key, value)?,
            "schedule.grades" => self.schedule_grades = parse_list(key, value)?,
            "schedule.mask_rates" => self.schedule_mask_rates = parse_list(key, value)?,
            "schedule.alpha" => self.schedule_alpha = parse_num(key, value)?,
            "schedule.beta" => self.schedule_beta = parse_num(key, value)?,
            "schedule.mode" => {
                self.schedule_mode = value.parse().map_err(|e| anyhow!("schedule.mode: {e}"))?
            }
            "run.strategy" => {
                self.run_strategy = value.parse().map_err(|e| anyhow!("run.strategy: {e}"))?
            }
            "run.seed" => self.run_seed = parse_num(key, value)?,
            "run.baseline_ckpt" => self.run_baseline_ckpt = Some(PathBuf::from(value)),
            "eval.raw" => self.eval_raw = parse_bool(key, value)?,
            "eval.ranks_csv" => self.eval_ranks_csv = parse_bool(key, value)?,
            unknown => bail!("unknown config key `{unknown}`"),
        }
        Ok(())
    }

    /// Parses a config file: `key = value` lines, `#` comments, blank lines.
    pub fn parse_file_contents(&mut self, contents: &str, source: &str) -> Result<()> {
        for (idx, raw_line) in contents.lines().enumerate() {
            let line = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("{source}:{}: expected `key = value`", idx + 1);
            };
            self.apply(key.trim(), value.trim())
                .with_context(|| format!("{source}:{}", idx + 1))?;
        }
        Ok(())
    }

    /// Loads defaults, file, `PMD_SEED`, then `--set` overrides.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let mut config = RunConfig::default();
        let contents = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        config.parse_file_contents(&contents, &path.display().to_string())?;
        if let Ok(seed) = std::env::var("PMD_SEED") {
            config.run_seed = parse_num("PMD_SEED", seed.trim())?;
        }
        for pair in overrides {
            let Some((key, value)) = pair.split_once('=') else {
                bail!("--set expects key=value, got `{pair}`");
            };
            config.apply(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    /// Serializes every key in canonical order; the output re-parses to an
    /// identical configuration.
    pub fn to_config_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |key: &str, value: String| {
            let _ = writeln!(out, "{key} = {value}");
        };
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        if self.data_train.is_some() {
            kv("data.train", path(&self.data_train));
            kv("data.valid", path(&self.data_valid));
            kv("data.test", path(&self.data_test));
            kv("data.descriptions", path(&self.data_descriptions));
        }
        if self.out_dir.is_some() {
            kv("out.dir", path(&self.out_dir));
        }
        kv("vocab.min_freq", self.vocab_min_freq.to_string());
        kv("vocab.max_size", self.vocab_max_size.to_string());
        kv("seq.max_len", self.seq_max_len.to_string());
        kv("mask.tail", self.mask_tail.to_string());
        kv("encoder.layers", self.enc_layers.to_string());
        kv("encoder.hidden", self.enc_hidden.to_string());
        kv("encoder.heads", self.enc_heads.to_string());
        kv("encoder.ff", self.enc_ff.to_string());
        kv("encoder.dropout", format!("{}", self.enc_dropout));
        kv(
            "encoder.pooling",
            match self.enc_pooling {
                Pooling::Mean => "mean".into(),
                Pooling::Cls => "cls".into(),
            },
        );
        kv("score.temperature", format!("{}", self.score_temperature));
        kv(
            "score.distill_mode",
            match self.score_distill_mode {
                ScoreDistillMode::Matrix => "matrix".into(),
                ScoreDistillMode::Diagonal => "diagonal".into(),
            },
        );
        kv("score.full_softmax", self.score_full_softmax.to_string());
        kv(
            "distill.feature_layer",
            match self.feature_layer {
                FeatureLayer::Final => "final".into(),
                FeatureLayer::Index(k) => k.to_string(),
            },
        );
        kv("distill.lkd_temperature", format!("{}", self.lkd_temperature));
        kv("train.epochs", self.train_epochs.to_string());
        kv(
            "train.baseline_epochs",
            self.baseline_epochs().to_string(),
        );
        kv("train.batch_size", self.train_batch_size.to_string());
        kv("train.lr", format!("{}", self.train_lr));
        kv("train.weight_decay", format!("{}", self.train_weight_decay));
        kv(
            "schedule.grades",
            self.schedule_grades
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        kv(
            "schedule.mask_rates",
            self.schedule_mask_rates
                .iter()
                .map(|r| format!("{r}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("schedule.alpha", format!("{}", self.schedule_alpha));
        kv("schedule.beta", format!("{}", self.schedule_beta));
        kv(
            "schedule.mode",
            match self.schedule_mode {
                MaskMode::Decreasing => "decreasing".into(),
                MaskMode::Fixed => "fixed".into(),
            },
        );
        kv("run.strategy", self.run_strategy.name().to_string());
        kv("run.seed", self.run_seed.to_string());
        if let Some(p) = &self.run_baseline_ckpt {
            kv("run.baseline_ckpt", p.display().to_string());
        }
        kv("eval.raw", self.eval_raw.to_string());
        kv("eval.ranks_csv", self.eval_ranks_csv.to_string());
        out
    }

    pub fn baseline_epochs(&self) -> usize {
        self.train_baseline_epochs.unwrap_or(self.train_epochs)
    }

    pub fn require_data(&self) -> Result<[&Path; 4]> {
        match (
            &self.data_train,
            &self.data_valid,
            &self.data_test,
            &self.data_descriptions,
        ) {
            (Some(a), Some(b), Some(c), Some(d)) => Ok([a, b, c, d]),
            _ => bail!(
                "config must set data.train, data.valid, data.test, and data.descriptions"
            ),
        }
    }

    pub fn require_out_dir(&self) -> Result<&Path> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| anyhow!("config must set out.dir"))
    }

    /// Full validation before any compute starts.
    pub fn validate(&self) -> Result<()> {
        if self.vocab_max_size <= 5 {
            bail!("vocab.max_size must exceed the 5 reserved ids");
        }
        if self.seq_max_len < 8 {
            bail!("seq.max_len must be at least 8");
        }
        if self.train_batch_size == 0 || self.train_epochs == 0 {
            bail!("train.batch_size and train.epochs must be positive");
        }
        if !(self.train_lr > 0.0) {
            bail!("train.lr must be positive");
        }
        if !(self.score_temperature > 0.0) {
            bail!("score.temperature must be positive");
        }
        if !(self.lkd_temperature > 0.0) {
            bail!("distill.lkd_temperature must be positive");
        }
        if !(0.0..1.0).contains(&self.enc_dropout) {
            bail!("encoder.dropout must lie in [0, 1)");
        }
        DistillWeights::new(self.schedule_alpha, self.schedule_beta)
            .map_err(|e| anyhow!("schedule weights: {e}"))?;
        if self.enc_hidden == 0 || self.enc_heads == 0 || self.enc_hidden % self.enc_heads != 0 {
            bail!("encoder.hidden must be a positive multiple of encoder.heads");
        }
        if self.schedule_grades.len() != self.schedule_mask_rates.len() {
            bail!(
                "schedule.grades has {} entries but schedule.mask_rates has {}",
                self.schedule_grades.len(),
                self.schedule_mask_rates.len()
            );
        }
        if !matches!(self.run_strategy, Strategy::None) {
            self.schedule()?.validate(self.enc_layers).map_err(|e| anyhow!(e))?;
        }
        Ok(())
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            layers: self.enc_layers,
            hidden: self.enc_hidden,
            heads: self.enc_heads,
            feed_forward: self.enc_ff,
            vocab_size,
            max_len: self.seq_max_len,
            dropout: self.enc_dropout,
            pooling: self.enc_pooling,
        }
    }

    pub fn settings(&self) -> TrainSettings {
        TrainSettings {
            seed: self.run_seed,
            max_len: self.seq_max_len,
            weight_decay: self.train_weight_decay,
            temperature: self.score_temperature,
            score_mode: self.score_distill_mode,
            lkd_temperature: self.lkd_temperature,
            feature_layer: self.feature_layer,
            mask_tail: self.mask_tail,
            full_softmax: self.score_full_softmax,
            eval_batch: 64,
        }
    }

    pub fn schedule(&self) -> Result<DistillSchedule> {
        DistillSchedule::from_lists(
            &self.schedule_grades,
            &self.schedule_mask_rates,
            self.schedule_alpha,
            self.schedule_beta,
            self.train_epochs,
            self.train_lr,
            self.train_batch_size,
            self.schedule_mode,
            self.run_strategy,
        )
        .map_err(|e| anyhow!(e))
    }

    pub fn run_plan(&self, vocab_size: usize) -> Result<RunPlan> {
        Ok(RunPlan {
            encoder: self.encoder_config(vocab_size),
            schedule: self.schedule()?,
            baseline_epochs: self.baseline_epochs(),
            baseline_learning_rate: self.train_lr,
            baseline_batch_size: self.train_batch_size,
            settings: self.settings(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// parse → serialize → parse is a fixpoint
    fn reparse(config: &RunConfig) -> Result<RunConfig> {
        let mut out = RunConfig::default();
        out.parse_file_contents(&config.to_config_text(), "<memory>")?;
        Ok(out)
    }

    #[test]
    fn defaults_follow_canonical_schedule() {
        let c = RunConfig::default();
        assert_eq!(c.schedule_grades, vec![4, 3, 2, 1]);
        assert_eq!(c.schedule_mask_rates, vec![0.2, 0.1, 0.05, 0.0]);
        assert_eq!(c.schedule_alpha, 0.1);
        assert_eq!(c.run_seed, 7);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut c = RunConfig::default();
        assert!(c.apply("bogus.key", "1").is_err());
        assert!(c
            .parse_file_contents("vocab.min_freq = 2\nnope = 3\n", "t")
            .is_err());
    }

    #[test]
    fn serialization_round_trips() {
        let mut c = RunConfig::default();
        c.apply("data.train", "data/train.tsv").unwrap();
        c.apply("data.valid", "data/valid.tsv").unwrap();
        c.apply("data.test", "data/test.tsv").unwrap();
        c.apply("data.descriptions", "data/desc.json").unwrap();
        c.apply("out.dir", "runs/x").unwrap();
        c.apply("encoder.hidden", "64").unwrap();
        c.apply("schedule.mask_rates", "0.3,0.2,0.1,0").unwrap();
        c.apply("run.strategy", "lkd").unwrap();
        let text = c.to_config_text();
        let d = reparse(&c).unwrap();
        assert_eq!(text, d.to_config_text());
        assert_eq!(d.enc_hidden, 64);
        assert_eq!(d.schedule_mask_rates, vec![0.3, 0.2, 0.1, 0.0]);
        assert_eq!(d.run_strategy, Strategy::Lkd);
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let mut c = RunConfig::default();
        c.parse_file_contents(
            "# a comment\n\nvocab.min_freq = 3  # trailing\n",
            "t",
        )
        .unwrap();
        assert_eq!(c.vocab_min_freq, 3);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = RunConfig::default();
        c.apply("schedule.alpha", "0.7").unwrap();
        assert!(c.validate().is_err());

        let mut c = RunConfig::default();
        c.apply("schedule.grades", "4,3").unwrap();
        assert!(c.validate().is_err()); // rate list length mismatch

        let mut c = RunConfig::default();
        c.apply("encoder.hidden", "30").unwrap(); // not divisible by 4 heads
        assert!(c.validate().is_err());

        let mut c = RunConfig::default();
        c.apply("schedule.grades", "4,3,2,1").unwrap();
        c.apply("schedule.mask_rates", "0.2,0.3,0.1,0").unwrap();
        assert!(c.validate().is_err()); // increasing rate in decreasing mode

        RunConfig::default().validate().unwrap();
    }
}
