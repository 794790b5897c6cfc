//! Flat key = value run configuration.
//!
//! One key per line, `#` starts a comment, unknown keys are rejected with
//! the offending name. `to_text` emits the canonical form that checkpoints
//! embed, so a loaded checkpoint round-trips byte for byte.

use crate::error::{CliError, Result};
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classify,
    Recsys,
    Retrieval,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::Recsys => "recsys",
            Task::Retrieval => "retrieval",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Joint,
    Disjoint,
    StudentOnly,
    TeacherOnly,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Joint => "joint",
            Mode::Disjoint => "disjoint",
            Mode::StudentOnly => "student-only",
            Mode::TeacherOnly => "teacher-only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Mind,
    Jsonl,
}

impl DataSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            DataSource::Synthetic => "synthetic",
            DataSource::Mind => "mind",
            DataSource::Jsonl => "jsonl",
        }
    }
}

/// Everything a run needs; every field has a documented default.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub mode: Mode,

    // encoder geometry
    pub teacher_layers: usize,
    pub k: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub attn_dim: usize,
    pub max_seq_len: usize,
    pub dropout: f64,

    // distillation
    pub temperature: f64,
    pub beta: f64,
    pub enable_hidden_layer_loss: bool,
    pub enable_pooled_hidden_loss: bool,
    pub enable_distill_loss: bool,
    pub enable_momentum: bool,
    pub prob_temperature: bool,
    pub mix_embedding: bool,

    // optimization
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub teacher_epochs: Option<usize>,
    pub eval_every: usize,
    pub seed: u64,

    // data
    pub data: DataSource,
    pub synthetic_vocab: usize,
    pub synthetic_classes: usize,
    pub synthetic_seq_len: usize,
    pub synthetic_signal: f64,
    pub synthetic_indicators: usize,
    pub synthetic_flip: f64,
    pub synthetic_train: usize,
    pub synthetic_val: usize,
    pub synthetic_test: usize,
    pub synthetic_topics: usize,
    pub synthetic_history_max: usize,
    pub synthetic_negatives: usize,
    pub synthetic_affinity: f64,
    pub synthetic_query_len: usize,
    pub synthetic_doc_len: usize,
    pub mind_news: Option<String>,
    pub mind_behaviors: Option<String>,
    pub retrieval_train: Option<String>,
    pub retrieval_test: Option<String>,
    pub vocab_cap: usize,
    pub history_cap: usize,

    // run
    pub out_dir: String,
    pub init_from: Option<String>,
    pub resume_from: Option<String>,
    pub bench_passes: usize,
    pub bench_warmup: usize,
    pub beta_sweep: Vec<f64>,
    pub gradcheck_coords: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Classify,
            mode: Mode::Joint,
            teacher_layers: 4,
            k: 2,
            hidden_dim: 32,
            num_heads: 4,
            ffn_dim: 64,
            attn_dim: 16,
            max_seq_len: 16,
            dropout: 0.2,
            temperature: 1.0,
            beta: 0.1,
            enable_hidden_layer_loss: true,
            enable_pooled_hidden_loss: true,
            enable_distill_loss: true,
            enable_momentum: true,
            prob_temperature: false,
            mix_embedding: false,
            lr: 1e-3,
            batch_size: 32,
            epochs: 3,
            teacher_epochs: None,
            eval_every: 1,
            seed: 7,
            data: DataSource::Synthetic,
            synthetic_vocab: 200,
            synthetic_classes: 4,
            synthetic_seq_len: 12,
            synthetic_signal: 0.7,
            synthetic_indicators: 8,
            synthetic_flip: 0.5,
            synthetic_train: 5000,
            synthetic_val: 500,
            synthetic_test: 1000,
            synthetic_topics: 4,
            synthetic_history_max: 8,
            synthetic_negatives: 4,
            synthetic_affinity: 1.0,
            synthetic_query_len: 8,
            synthetic_doc_len: 16,
            mind_news: None,
            mind_behaviors: None,
            retrieval_train: None,
            retrieval_test: None,
            vocab_cap: 20000,
            history_cap: 8,
            out_dir: String::from("out"),
            init_from: None,
            resume_from: None,
            bench_passes: 1000,
            bench_warmup: 100,
            beta_sweep: vec![0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3],
            gradcheck_coords: 200,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(CliError::Config(format!("{key}: `{v}` is not a boolean"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse `{v}`")))
}

impl RunConfig {
    /// Parse the flat key = value format; `# comments` and blank lines are
    /// skipped, unknown keys are errors naming the key.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut beta_given = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            let (key, v) = (key.trim(), value.trim());
            match key {
                "task" => {
                    cfg.task = match v {
                        "classify" => Task::Classify,
                        "recsys" => Task::Recsys,
                        "retrieval" => Task::Retrieval,
                        _ => {
                            return Err(CliError::Config(format!(
                                "task: `{v}` is not one of classify|recsys|retrieval"
                            )))
                        }
                    }
                }
                "mode" => {
                    cfg.mode = match v {
                        "joint" => Mode::Joint,
                        "disjoint" => Mode::Disjoint,
                        "student-only" => Mode::StudentOnly,
                        "teacher-only" => Mode::TeacherOnly,
                        _ => {
                            return Err(CliError::Config(format!(
                                "mode: `{v}` is not one of joint|disjoint|student-only|teacher-only"
                            )))
                        }
                    }
                }
                "teacher_layers" => cfg.teacher_layers = parse_num(key, v)?,
                "k" => cfg.k = parse_num(key, v)?,
                "hidden_dim" => cfg.hidden_dim = parse_num(key, v)?,
                "num_heads" => cfg.num_heads = parse_num(key, v)?,
                "ffn_dim" => cfg.ffn_dim = parse_num(key, v)?,
                "attn_dim" => cfg.attn_dim = parse_num(key, v)?,
                "max_seq_len" => cfg.max_seq_len = parse_num(key, v)?,
                "dropout" => cfg.dropout = parse_num(key, v)?,
                "temperature" => cfg.temperature = parse_num(key, v)?,
                "beta" => {
                    cfg.beta = parse_num(key, v)?;
                    beta_given = true;
                }
                "enable_hidden_layer_loss" => cfg.enable_hidden_layer_loss = parse_bool(key, v)?,
                "enable_pooled_hidden_loss" => cfg.enable_pooled_hidden_loss = parse_bool(key, v)?,
                "enable_distill_loss" => cfg.enable_distill_loss = parse_bool(key, v)?,
                "enable_momentum" => cfg.enable_momentum = parse_bool(key, v)?,
                "prob_temperature" => cfg.prob_temperature = parse_bool(key, v)?,
                "mix_embedding" => cfg.mix_embedding = parse_bool(key, v)?,
                "lr" => cfg.lr = parse_num(key, v)?,
                "batch_size" => cfg.batch_size = parse_num(key, v)?,
                "epochs" => cfg.epochs = parse_num(key, v)?,
                "teacher_epochs" => cfg.teacher_epochs = Some(parse_num(key, v)?),
                "eval_every" => cfg.eval_every = parse_num(key, v)?,
                "seed" => cfg.seed = parse_num(key, v)?,
                "data" => {
                    cfg.data = match v {
                        "synthetic" => DataSource::Synthetic,
                        "mind" => DataSource::Mind,
                        "jsonl" => DataSource::Jsonl,
                        _ => {
                            return Err(CliError::Config(format!(
                                "data: `{v}` is not one of synthetic|mind|jsonl"
                            )))
                        }
                    }
                }
                "synthetic_vocab" => cfg.synthetic_vocab = parse_num(key, v)?,
                "synthetic_classes" => cfg.synthetic_classes = parse_num(key, v)?,
                "synthetic_seq_len" => cfg.synthetic_seq_len = parse_num(key, v)?,
                "synthetic_signal" => cfg.synthetic_signal = parse_num(key, v)?,
                "synthetic_indicators" => cfg.synthetic_indicators = parse_num(key, v)?,
                "synthetic_flip" => cfg.synthetic_flip = parse_num(key, v)?,
                "synthetic_train" => cfg.synthetic_train = parse_num(key, v)?,
                "synthetic_val" => cfg.synthetic_val = parse_num(key, v)?,
                "synthetic_test" => cfg.synthetic_test = parse_num(key, v)?,
                "synthetic_topics" => cfg.synthetic_topics = parse_num(key, v)?,
                "synthetic_history_max" => cfg.synthetic_history_max = parse_num(key, v)?,
                "synthetic_negatives" => cfg.synthetic_negatives = parse_num(key, v)?,
                "synthetic_affinity" => cfg.synthetic_affinity = parse_num(key, v)?,
                "synthetic_query_len" => cfg.synthetic_query_len = parse_num(key, v)?,
                "synthetic_doc_len" => cfg.synthetic_doc_len = parse_num(key, v)?,
                "mind_news" => cfg.mind_news = Some(v.to_string()),
                "mind_behaviors" => cfg.mind_behaviors = Some(v.to_string()),
                "retrieval_train" => cfg.retrieval_train = Some(v.to_string()),
                "retrieval_test" => cfg.retrieval_test = Some(v.to_string()),
                "vocab_cap" => cfg.vocab_cap = parse_num(key, v)?,
                "history_cap" => cfg.history_cap = parse_num(key, v)?,
                "out_dir" => cfg.out_dir = v.to_string(),
                "init_from" => cfg.init_from = Some(v.to_string()),
                "resume_from" => cfg.resume_from = Some(v.to_string()),
                "bench_passes" => cfg.bench_passes = parse_num(key, v)?,
                "bench_warmup" => cfg.bench_warmup = parse_num(key, v)?,
                "beta_sweep" => {
                    cfg.beta_sweep = v
                        .split(',')
                        .map(|s| parse_num::<f64>(key, s.trim()))
                        .collect::<Result<Vec<f64>>>()?;
                }
                "gradcheck_coords" => cfg.gradcheck_coords = parse_num(key, v)?,
                _ => {
                    return Err(CliError::Config(format!(
                        "line {}: unknown key `{key}`",
                        lineno + 1
                    )))
                }
            }
        }
        if !beta_given && cfg.task == Task::Recsys {
            cfg.beta = tandem_core::distill::BETA_RECSYS;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.teacher_layers == 0 || self.teacher_layers % self.k != 0 {
            return Err(CliError::Config(format!(
                "teacher_layers ({}) must be a positive multiple of k ({})",
                self.teacher_layers, self.k
            )));
        }
        if self.hidden_dim == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(CliError::Config(format!(
                "hidden_dim ({}) must be a positive multiple of num_heads ({})",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CliError::Config(format!(
                "dropout ({}) outside [0, 1)",
                self.dropout
            )));
        }
        if self.temperature <= 0.0 {
            return Err(CliError::Config(format!(
                "temperature ({}) must be positive",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(CliError::Config(format!(
                "beta ({}) outside [0, 1]",
                self.beta
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 {
            return Err(CliError::Config(
                "batch_size, epochs and eval_every must be positive".into(),
            ));
        }
        match self.data {
            DataSource::Mind => {
                if self.mind_news.is_none() || self.mind_behaviors.is_none() {
                    return Err(CliError::Config(
                        "data = mind needs mind_news and mind_behaviors paths".into(),
                    ));
                }
            }
            DataSource::Jsonl => {
                if self.task != Task::Retrieval {
                    return Err(CliError::Config(
                        "data = jsonl is only defined for the retrieval task".into(),
                    ));
                }
                if self.retrieval_train.is_none() || self.retrieval_test.is_none() {
                    return Err(CliError::Config(
                        "data = jsonl needs retrieval_train and retrieval_test paths".into(),
                    ));
                }
            }
            DataSource::Synthetic => {}
        }
        Ok(())
    }

    /// Canonical serialization; parsing it reproduces `self` exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("task", self.task.as_str().into());
        kv("mode", self.mode.as_str().into());
        kv("teacher_layers", self.teacher_layers.to_string());
        kv("k", self.k.to_string());
        kv("hidden_dim", self.hidden_dim.to_string());
        kv("num_heads", self.num_heads.to_string());
        kv("ffn_dim", self.ffn_dim.to_string());
        kv("attn_dim", self.attn_dim.to_string());
        kv("max_seq_len", self.max_seq_len.to_string());
        kv("dropout", format!("{:?}", self.dropout));
        kv("temperature", format!("{:?}", self.temperature));
        kv("beta", format!("{:?}", self.beta));
        kv(
            "enable_hidden_layer_loss",
            self.enable_hidden_layer_loss.to_string(),
        );
        kv(
            "enable_pooled_hidden_loss",
            self.enable_pooled_hidden_loss.to_string(),
        );
        kv("enable_distill_loss", self.enable_distill_loss.to_string());
        kv("enable_momentum", self.enable_momentum.to_string());
        kv("prob_temperature", self.prob_temperature.to_string());
        kv("mix_embedding", self.mix_embedding.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        if let Some(te) = self.teacher_epochs {
            kv("teacher_epochs", te.to_string());
        }
        kv("eval_every", self.eval_every.to_string());
        kv("seed", self.seed.to_string());
        kv("data", self.data.as_str().into());
        kv("synthetic_vocab", self.synthetic_vocab.to_string());
        kv("synthetic_classes", self.synthetic_classes.to_string());
        kv("synthetic_seq_len", self.synthetic_seq_len.to_string());
        kv("synthetic_signal", format!("{:?}", self.synthetic_signal));
        kv("synthetic_indicators", self.synthetic_indicators.to_string());
        kv("synthetic_flip", format!("{:?}", self.synthetic_flip));
        kv("synthetic_train", self.synthetic_train.to_string());
        kv("synthetic_val", self.synthetic_val.to_string());
        kv("synthetic_test", self.synthetic_test.to_string());
        kv("synthetic_topics", self.synthetic_topics.to_string());
        kv(
            "synthetic_history_max",
            self.synthetic_history_max.to_string(),
        );
        kv("synthetic_negatives", self.synthetic_negatives.to_string());
        kv(
            "synthetic_affinity",
            format!("{:?}", self.synthetic_affinity),
        );
        kv("synthetic_query_len", self.synthetic_query_len.to_string());
        kv("synthetic_doc_len", self.synthetic_doc_len.to_string());
        if let Some(p) = &self.mind_news {
            kv("mind_news", p.clone());
        }
        if let Some(p) = &self.mind_behaviors {
            kv("mind_behaviors", p.clone());
        }
        if let Some(p) = &self.retrieval_train {
            kv("retrieval_train", p.clone());
        }
        if let Some(p) = &self.retrieval_test {
            kv("retrieval_test", p.clone());
        }
        kv("vocab_cap", self.vocab_cap.to_string());
        kv("history_cap", self.history_cap.to_string());
        kv("out_dir", self.out_dir.clone());
        if let Some(p) = &self.init_from {
            kv("init_from", p.clone());
        }
        if let Some(p) = &self.resume_from {
            kv("resume_from", p.clone());
        }
        kv("bench_passes", self.bench_passes.to_string());
        kv("bench_warmup", self.bench_warmup.to_string());
        kv(
            "beta_sweep",
            self.beta_sweep
                .iter()
                .map(|b| format!("{b:?}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("gradcheck_coords", self.gradcheck_coords.to_string());
        s
    }

    pub fn student_layers(&self) -> usize {
        self.teacher_layers / self.k
    }
}
