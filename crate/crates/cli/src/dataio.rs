//! Dataset assembly: file loading for MIND TSV and retrieval JSONL plus
//! the synthetic generators, normalized into per-task splits.

use crate::config::{DataSource, RunConfig, Task};
use crate::error::{CliError, Result};
use std::path::Path;
use tandem_core::data::{
    assemble_mind, gen_synthetic_classification, gen_synthetic_impressions,
    gen_synthetic_retrieval, parse_behaviors_tsv, parse_news_tsv, tokenize, ClassifySample,
    ImpressionSample, ImpressionSpec, NewsText, RetrievalSample, RetrievalSpec, SyntheticSpec,
    Vocab,
};

#[derive(Debug, Clone)]
pub struct ClassifyData {
    pub train: Vec<ClassifySample>,
    pub val: Vec<ClassifySample>,
    pub test: Vec<ClassifySample>,
    pub num_classes: usize,
    pub vocab_size: usize,
    pub bayes_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RecsysData {
    pub train: Vec<ImpressionSample>,
    pub val: Vec<ImpressionSample>,
    pub test: Vec<ImpressionSample>,
    pub vocab_size: usize,
    pub planted_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RetrievalData {
    pub train: Vec<RetrievalSample>,
    pub test: Vec<RetrievalSample>,
    pub vocab_size: usize,
}

#[derive(Debug, Clone)]
pub enum TaskData {
    Classify(ClassifyData),
    Recsys(RecsysData),
    Retrieval(RetrievalData),
}

impl TaskData {
    pub fn vocab_size(&self) -> usize {
        match self {
            TaskData::Classify(d) => d.vocab_size,
            TaskData::Recsys(d) => d.vocab_size,
            TaskData::Retrieval(d) => d.vocab_size,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            TaskData::Classify(d) => d.num_classes,
            // the dense head is unused by the two-tower tasks
            _ => 2,
        }
    }
}

fn read_file(path: &str) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {path}: {e}")))
}

/// Retrieval JSONL: one object per line with fields `query` (string),
/// `doc` (string), `label` (0 or 1).
pub fn parse_retrieval_jsonl(
    content: &str,
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<Vec<RetrievalSample>> {
    let mut out = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| {
            CliError::Data(format!("retrieval line {}: invalid JSON: {e}", lineno + 1))
        })?;
        let query = value
            .get("query")
            .and_then(|v| v.as_str())
            .ok_or_else(|| {
                CliError::Data(format!("retrieval line {}: missing `query`", lineno + 1))
            })?;
        let doc = value.get("doc").and_then(|v| v.as_str()).ok_or_else(|| {
            CliError::Data(format!("retrieval line {}: missing `doc`", lineno + 1))
        })?;
        let label = match value.get("label").and_then(|v| v.as_u64()) {
            Some(0) => false,
            Some(1) => true,
            _ => {
                return Err(CliError::Data(format!(
                    "retrieval line {}: `label` must be 0 or 1",
                    lineno + 1
                )))
            }
        };
        let (q_tokens, q_mask) = tokenize(vocab, query, max_seq_len);
        let (d_tokens, d_mask) = tokenize(vocab, doc, max_seq_len);
        if !q_mask.iter().any(|&m| m) || !d_mask.iter().any(|&m| m) {
            return Err(CliError::Data(format!(
                "retrieval line {}: empty query or document after tokenization",
                lineno + 1
            )));
        }
        out.push(RetrievalSample {
            query: NewsText {
                tokens: q_tokens,
                mask: q_mask,
            },
            doc: NewsText {
                tokens: d_tokens,
                mask: d_mask,
            },
            label,
        });
    }
    Ok(out)
}

/// Vocab file: one token per line; line number - 1 + reserved offset = id.
pub fn load_vocab_file(path: &Path) -> Result<Vocab> {
    let content = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read vocab {}: {e}", path.display())))?;
    Ok(Vocab::from_tokens(
        content.lines().map(|l| l.to_string()).collect(),
    ))
}

pub fn save_vocab_file(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut text = String::new();
    for token in vocab.tokens() {
        text.push_str(token);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn build_data(cfg: &RunConfig) -> Result<TaskData> {
    match (cfg.task, cfg.data) {
        (Task::Classify, DataSource::Synthetic) => {
            let spec = SyntheticSpec {
                seed: cfg.seed,
                vocab_size: cfg.synthetic_vocab,
                num_classes: cfg.synthetic_classes,
                seq_len: cfg.synthetic_seq_len.min(cfg.max_seq_len),
                signal: cfg.synthetic_signal,
                indicators_per_class: cfg.synthetic_indicators,
                flip_rate: cfg.synthetic_flip,
                train_size: cfg.synthetic_train,
                val_size: cfg.synthetic_val,
                test_size: cfg.synthetic_test,
            };
            let data = gen_synthetic_classification(&spec)?;
            Ok(TaskData::Classify(ClassifyData {
                train: data.train,
                val: data.val,
                test: data.test,
                num_classes: data.num_classes,
                vocab_size: data.vocab_size,
                bayes_accuracy: Some(data.bayes_accuracy),
            }))
        }
        (Task::Classify, DataSource::Mind) | (Task::Recsys, DataSource::Mind) => {
            let news = read_file(cfg.mind_news.as_ref().expect("validated"))?;
            let behaviors = read_file(cfg.mind_behaviors.as_ref().expect("validated"))?;
            let dataset = assemble_mind(
                parse_news_tsv(&news)?,
                parse_behaviors_tsv(&behaviors)?,
                cfg.max_seq_len,
                cfg.vocab_cap,
                cfg.history_cap,
            )?;
            if cfg.task == Task::Classify {
                Ok(TaskData::Classify(ClassifyData {
                    num_classes: dataset.categories.len(),
                    vocab_size: dataset.vocab.len(),
                    train: dataset.classify_train,
                    val: dataset.classify_val,
                    test: dataset.classify_test,
                    bayes_accuracy: None,
                }))
            } else {
                Ok(TaskData::Recsys(RecsysData {
                    vocab_size: dataset.vocab.len(),
                    train: dataset.impressions_train,
                    val: dataset.impressions_val,
                    test: dataset.impressions_test,
                    planted_auc: None,
                }))
            }
        }
        (Task::Recsys, DataSource::Synthetic) => {
            let spec = ImpressionSpec {
                seed: cfg.seed,
                num_topics: cfg.synthetic_topics,
                vocab_size: cfg.synthetic_vocab,
                seq_len: cfg.synthetic_seq_len.min(cfg.max_seq_len),
                history_max: cfg.synthetic_history_max.min(cfg.history_cap),
                negatives_per_positive: cfg.synthetic_negatives,
                topic_affinity: cfg.synthetic_affinity,
                train_size: cfg.synthetic_train,
                test_size: cfg.synthetic_val + cfg.synthetic_test,
            };
            let data = gen_synthetic_impressions(&spec)?;
            let mut eval = data.test;
            let test = eval.split_off(cfg.synthetic_val.min(eval.len()));
            Ok(TaskData::Recsys(RecsysData {
                train: data.train,
                val: eval,
                test,
                vocab_size: data.vocab_size,
                planted_auc: Some(data.planted_auc),
            }))
        }
        (Task::Retrieval, DataSource::Synthetic) => {
            if cfg.synthetic_query_len > cfg.max_seq_len || cfg.synthetic_doc_len > cfg.max_seq_len
            {
                return Err(CliError::Config(
                    "synthetic query/doc length exceeds max_seq_len".into(),
                ));
            }
            let spec = RetrievalSpec {
                seed: cfg.seed,
                num_topics: cfg.synthetic_topics,
                vocab_size: cfg.synthetic_vocab,
                query_len: cfg.synthetic_query_len,
                doc_len: cfg.synthetic_doc_len,
                train_size: cfg.synthetic_train,
                test_size: cfg.synthetic_test,
            };
            let data = gen_synthetic_retrieval(&spec)?;
            Ok(TaskData::Retrieval(RetrievalData {
                train: data.train,
                test: data.test,
                vocab_size: data.vocab_size,
            }))
        }
        (Task::Retrieval, DataSource::Jsonl) => {
            let train_text = read_file(cfg.retrieval_train.as_ref().expect("validated"))?;
            let test_text = read_file(cfg.retrieval_test.as_ref().expect("validated"))?;
            // vocabulary from the training split only
            let mut words = Vec::new();
            for line in train_text.lines().filter(|l| !l.trim().is_empty()) {
                if let Ok(v) = serde_json::from_str::<serde_json::Value>(line) {
                    for field in ["query", "doc"] {
                        if let Some(s) = v.get(field).and_then(|x| x.as_str()) {
                            words.extend(tandem_core::data::split_words(s));
                        }
                    }
                }
            }
            let vocab = Vocab::build(words.iter().map(|s| s.as_str()), cfg.vocab_cap);
            let train = parse_retrieval_jsonl(&train_text, &vocab, cfg.max_seq_len)?;
            let test = parse_retrieval_jsonl(&test_text, &vocab, cfg.max_seq_len)?;
            Ok(TaskData::Retrieval(RetrievalData {
                train,
                test,
                vocab_size: vocab.len(),
            }))
        }
        (task, source) => Err(CliError::Config(format!(
            "data source {} is not defined for task {}",
            source.as_str(),
            task.as_str()
        ))),
    }
}
