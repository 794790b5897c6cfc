//! Tokenization, vocabulary, MIND-format parsing and seeded synthetic
//! dataset generators.
//!
//! Parsing works on in-memory strings; the CLI crate owns the file IO.
//! Generators draw every random choice through the integer path of [`Rng`],
//! so a spec plus a seed pins a dataset bit for bit.

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

/// Padding token id.
pub const PAD: usize = 0;
/// Unknown-token id.
pub const UNK: usize = 1;
/// Number of reserved ids at the bottom of every vocabulary.
pub const RESERVED: usize = 2;

/// Frequency-ordered token table with reserved PAD/UNK slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    ids: BTreeMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocab {
    /// Build from a token stream: tokens ranked by descending frequency,
    /// ties broken lexicographically, capped at `max_size` total ids
    /// (including the reserved ones).
    pub fn build<'a>(tokens: impl Iterator<Item = &'a str>, max_size: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for tok in tokens {
            *counts.entry(tok).or_insert(0) += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let keep = max_size.saturating_sub(RESERVED);
        let tokens: Vec<String> = ranked
            .into_iter()
            .take(keep)
            .map(|(t, _)| t.to_string())
            .collect();
        Self::from_tokens(tokens)
    }

    /// Rebuild from an ordered token list (the vocab-file layout: line
    /// number minus one plus the reserved offset is the id).
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i + RESERVED))
            .collect();
        Vocab { ids, tokens }
    }

    pub fn id_of(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    /// Total id count including reserved slots; the embedding-table size.
    pub fn len(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Lowercased maximal alphanumeric runs; punctuation is a boundary.
pub fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            for lc in ch.to_lowercase() {
                current.push(lc);
            }
        } else if !current.is_empty() {
            words.push(core::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Token ids and a validity mask: lowercase, split, map through the vocab
/// with UNK fallback, truncate to `max_seq_len`, pad with PAD.
pub fn tokenize(vocab: &Vocab, text: &str, max_seq_len: usize) -> (Vec<usize>, Vec<bool>) {
    let words = split_words(text);
    let mut ids: Vec<usize> = words
        .iter()
        .take(max_seq_len)
        .map(|w| vocab.id_of(w))
        .collect();
    let mut mask = alloc::vec![true; ids.len()];
    while ids.len() < max_seq_len {
        ids.push(PAD);
        mask.push(false);
    }
    (ids, mask)
}

/// One classification instance: a tokenized title and its class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifySample {
    pub tokens: Vec<usize>,
    pub mask: Vec<bool>,
    pub label: usize,
}

/// A tokenized news text.
#[derive(Debug, Clone, PartialEq)]
pub struct NewsText {
    pub tokens: Vec<usize>,
    pub mask: Vec<bool>,
}

/// One recommendation instance: clicked history plus a labeled candidate
/// set (at least one candidate; history may be empty for cold users).
#[derive(Debug, Clone, PartialEq)]
pub struct ImpressionSample {
    pub history: Vec<NewsText>,
    pub candidates: Vec<NewsText>,
    pub labels: Vec<bool>,
}

impl ImpressionSample {
    pub fn positive_index(&self) -> Option<usize> {
        self.labels.iter().position(|&l| l)
    }
}

/// One retrieval instance: query text, document text, relevance.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalSample {
    pub query: NewsText,
    pub doc: NewsText,
    pub label: bool,
}

/// One parsed news entry.
#[derive(Debug, Clone, PartialEq)]
pub struct NewsRecord {
    pub id: String,
    pub category: usize,
    pub title: NewsText,
}

/// Raw behaviors row before news-id resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorRecord {
    pub history: Vec<String>,
    pub candidates: Vec<(String, bool)>,
}

/// MIND news TSV: `id \t category \t subcategory \t title \t ...`.
pub fn parse_news_tsv(content: &str) -> Result<Vec<(String, String, String)>> {
    let mut rows = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 4 {
            return Err(CoreError::Input(format!(
                "news line {}: expected at least 4 tab-separated fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        rows.push((
            fields[0].to_string(),
            fields[1].to_string(),
            fields[3].to_string(),
        ));
    }
    Ok(rows)
}

/// MIND behaviors TSV: `impression id \t user \t time \t history \t
/// impressions`, where history is space-separated news ids and impressions
/// are space-separated `newsid-label` pairs.
pub fn parse_behaviors_tsv(content: &str) -> Result<Vec<BehaviorRecord>> {
    let mut rows = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 5 {
            return Err(CoreError::Input(format!(
                "behaviors line {}: expected 5 tab-separated fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let history: Vec<String> = fields[3]
            .split_whitespace()
            .map(|s| s.to_string())
            .collect();
        let mut candidates = Vec::new();
        for item in fields[4].split_whitespace() {
            let Some((id, label)) = item.rsplit_once('-') else {
                return Err(CoreError::Input(format!(
                    "behaviors line {}: malformed impression entry `{item}`",
                    lineno + 1
                )));
            };
            let label = match label {
                "1" => true,
                "0" => false,
                other => {
                    return Err(CoreError::Input(format!(
                        "behaviors line {}: label `{other}` is not 0 or 1",
                        lineno + 1
                    )));
                }
            };
            candidates.push((id.to_string(), label));
        }
        if candidates.is_empty() {
            return Err(CoreError::Input(format!(
                "behaviors line {}: empty impression list",
                lineno + 1
            )));
        }
        rows.push(BehaviorRecord {
            history,
            candidates,
        });
    }
    Ok(rows)
}

/// Everything assembled from one MIND news + behaviors pair.
#[derive(Debug, Clone)]
pub struct MindDataset {
    pub vocab: Vocab,
    pub categories: Vec<String>,
    pub news: BTreeMap<String, NewsRecord>,
    pub impressions_train: Vec<ImpressionSample>,
    pub impressions_val: Vec<ImpressionSample>,
    pub impressions_test: Vec<ImpressionSample>,
    pub classify_train: Vec<ClassifySample>,
    pub classify_val: Vec<ClassifySample>,
    pub classify_test: Vec<ClassifySample>,
    /// Behaviors entries referencing unknown news ids, skipped.
    pub skipped_unknown_news: usize,
}

/// Build datasets from parsed MIND rows. Behaviors are split by log order
/// (train/validation/test by the given fractions, a stand-in for the
/// chronological split); the classification test set keeps only news that
/// never appear in train or validation behaviors.
pub fn assemble_mind(
    news_rows: Vec<(String, String, String)>,
    behavior_rows: Vec<BehaviorRecord>,
    max_seq_len: usize,
    vocab_cap: usize,
    history_cap: usize,
) -> Result<MindDataset> {
    if news_rows.is_empty() {
        return Err(CoreError::Input("no news records".into()));
    }
    let mut all_words: Vec<String> = Vec::new();
    for (_, _, title) in &news_rows {
        all_words.extend(split_words(title));
    }
    let vocab = Vocab::build(all_words.iter().map(|s| s.as_str()), vocab_cap);

    let mut categories: Vec<String> = news_rows.iter().map(|(_, c, _)| c.clone()).collect();
    categories.sort();
    categories.dedup();
    let cat_id: BTreeMap<&str, usize> = categories
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();

    let mut news: BTreeMap<String, NewsRecord> = BTreeMap::new();
    for (id, category, title) in &news_rows {
        if split_words(title).is_empty() {
            return Err(CoreError::Input(format!("news {id}: empty title")));
        }
        let (tokens, mask) = tokenize(&vocab, title, max_seq_len);
        news.insert(
            id.clone(),
            NewsRecord {
                id: id.clone(),
                category: cat_id[category.as_str()],
                title: NewsText { tokens, mask },
            },
        );
    }

    if behavior_rows.is_empty() {
        return Err(CoreError::Input("no behaviors records".into()));
    }
    let n = behavior_rows.len();
    let mut skipped = 0usize;
    let mut impressions = [Vec::new(), Vec::new(), Vec::new()];
    let mut seen: [BTreeSet<&str>; 3] = [BTreeSet::new(), BTreeSet::new(), BTreeSet::new()];

    for (row_idx, row) in behavior_rows.iter().enumerate() {
        // 8/1/1 by log order, a stand-in for the chronological split
        let bucket = row_idx * 10 / n;
        let split = match bucket {
            0..=7 => 0,
            8 => 1,
            _ => 2,
        };
        let mut history = Vec::new();
        for id in row.history.iter().rev().take(history_cap).rev() {
            match news.get(id.as_str()) {
                Some(rec) => {
                    seen[split].insert(&rec.id);
                    history.push(rec.title.clone());
                }
                None => skipped += 1,
            }
        }
        let mut candidates = Vec::new();
        let mut labels = Vec::new();
        for (id, label) in &row.candidates {
            match news.get(id.as_str()) {
                Some(rec) => {
                    seen[split].insert(&rec.id);
                    candidates.push(rec.title.clone());
                    labels.push(*label);
                }
                None => skipped += 1,
            }
        }
        if candidates.is_empty() {
            continue;
        }
        impressions[split].push(ImpressionSample {
            history,
            candidates,
            labels,
        });
    }

    let classify_of = |ids: &BTreeSet<&str>, exclude: &[&BTreeSet<&str>]| -> Vec<ClassifySample> {
        ids.iter()
            .filter(|id| !exclude.iter().any(|set| set.contains(*id)))
            .map(|id| {
                let rec = &news[*id];
                ClassifySample {
                    tokens: rec.title.tokens.clone(),
                    mask: rec.title.mask.clone(),
                    label: rec.category,
                }
            })
            .collect()
    };
    let (seen_train, seen_val, seen_test) = (&seen[0], &seen[1], &seen[2]);
    let classify_train = classify_of(seen_train, &[]);
    let classify_val = classify_of(seen_val, &[seen_train]);
    let classify_test = classify_of(seen_test, &[seen_train, seen_val]);

    let [impressions_train, impressions_val, impressions_test] = impressions;
    Ok(MindDataset {
        vocab,
        categories,
        news,
        impressions_train,
        impressions_val,
        impressions_test,
        classify_train,
        classify_val,
        classify_test,
        skipped_unknown_news: skipped,
    })
}

/// Generator settings for the synthetic classification task.
///
/// Each sample is `seq_len` background tokens; with probability `signal`
/// one class-indicative token is planted at a random position. Every
/// class owns `indicators_per_class` disjoint indicator tokens, so the
/// planted token decodes the label exactly and background tokens carry no
/// class information.
///
/// With probability `flip_rate` a planted sample instead carries the
/// indicator of the previous class plus a shift-marker token, and only the
/// indicator-marker pair decodes the label. A classifier that is linear
/// over summed token embeddings cannot express the conditional shift, so
/// the flip portion of the task rewards the composition the encoder
/// layers provide.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub seq_len: usize,
    pub signal: f64,
    pub indicators_per_class: usize,
    pub flip_rate: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(CoreError::Config("need at least 2 classes".into()));
        }
        if self.seq_len == 0 {
            return Err(CoreError::Config("need seq_len >= 1".into()));
        }
        if self.indicators_per_class == 0 {
            return Err(CoreError::Config(
                "need at least one indicator token per class".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.signal) {
            return Err(CoreError::Config(format!(
                "signal strength {} outside [0, 1]",
                self.signal
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_rate) {
            return Err(CoreError::Config(format!(
                "flip_rate {} outside [0, 1]",
                self.flip_rate
            )));
        }
        if self.flip_rate > 0.0 && self.seq_len < 2 {
            return Err(CoreError::Config(
                "flip marker needs seq_len >= 2".into(),
            ));
        }
        if self.vocab_size < RESERVED + self.num_classes * self.indicators_per_class + 2 {
            return Err(CoreError::Config(format!(
                "vocab_size {} too small for {} classes x {} indicators plus background",
                self.vocab_size, self.num_classes, self.indicators_per_class
            )));
        }
        Ok(())
    }

    /// Accuracy of the optimal decision rule on this generator:
    /// `signal + (1 - signal) / num_classes`.
    pub fn bayes_accuracy(&self) -> f64 {
        self.signal + (1.0 - self.signal) / self.num_classes as f64
    }
}

/// Synthetic classification splits plus the generator's own ceiling.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClassification {
    pub train: Vec<ClassifySample>,
    pub val: Vec<ClassifySample>,
    pub test: Vec<ClassifySample>,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub bayes_accuracy: f64,
}

pub fn gen_synthetic_classification(spec: &SyntheticSpec) -> Result<SyntheticClassification> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let c = spec.num_classes;
    let per_class = spec.indicators_per_class;
    let marker_base = RESERVED + c * per_class;
    let background_lo = marker_base + 1;
    let background_n = spec.vocab_size - background_lo;
    let bernoulli = |rng: &mut Rng, p: f64| (rng.next_u64() >> 11) < (p * (1u64 << 53) as f64) as u64;

    let gen_one = |rng: &mut Rng| -> ClassifySample {
        let label = rng.below(c);
        let mut tokens: Vec<usize> =
            (0..spec.seq_len).map(|_| background_lo + rng.below(background_n)).collect();
        if bernoulli(rng, spec.signal) {
            let flipped = bernoulli(rng, spec.flip_rate);
            if flipped {
                let indicated = (label + c - 1) % c;
                let indicator = RESERVED + indicated * per_class + rng.below(per_class);
                let positions = rng.sample_indices(spec.seq_len, 2);
                tokens[positions[0]] = indicator;
                tokens[positions[1]] = marker_base;
            } else {
                let indicator = RESERVED + label * per_class + rng.below(per_class);
                let position = rng.below(spec.seq_len);
                tokens[position] = indicator;
            }
        }
        ClassifySample {
            mask: alloc::vec![true; tokens.len()],
            tokens,
            label,
        }
    };

    let train = (0..spec.train_size).map(|_| gen_one(&mut rng)).collect();
    let val = (0..spec.val_size).map(|_| gen_one(&mut rng)).collect();
    let test = (0..spec.test_size).map(|_| gen_one(&mut rng)).collect();
    Ok(SyntheticClassification {
        train,
        val,
        test,
        vocab_size: spec.vocab_size,
        num_classes: c,
        bayes_accuracy: spec.bayes_accuracy(),
    })
}

/// Generator settings for synthetic impressions: users with a planted
/// topic preference click on-topic news; candidates mix one positive with
/// `negatives_per_positive` off-topic negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpressionSpec {
    pub seed: u64,
    pub num_topics: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub history_max: usize,
    pub negatives_per_positive: usize,
    /// Probability that the positive candidate matches the user's topic;
    /// 1 plants a perfectly separable preference, 0 removes the signal.
    pub topic_affinity: f64,
    pub train_size: usize,
    pub test_size: usize,
}

impl ImpressionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_topics < 2 {
            return Err(CoreError::Config("need at least 2 topics".into()));
        }
        if self.vocab_size < RESERVED + self.num_topics + 1 {
            return Err(CoreError::Config("vocab too small for topics".into()));
        }
        if self.history_max == 0 {
            return Err(CoreError::Config("history_max must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.topic_affinity) {
            return Err(CoreError::Config("topic_affinity outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImpressions {
    pub train: Vec<ImpressionSample>,
    pub test: Vec<ImpressionSample>,
    pub vocab_size: usize,
    /// AUC of the planted topic-match oracle over the test split.
    pub planted_auc: f64,
}

pub fn gen_synthetic_impressions(spec: &ImpressionSpec) -> Result<SyntheticImpressions> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let t = spec.num_topics;
    let background_lo = RESERVED + t;
    let background_n = spec.vocab_size - background_lo;

    // a news title: its topic token plus background filler, topic token
    // placed at a random position
    let gen_news = |rng: &mut Rng, topic: usize| -> NewsText {
        let mut tokens: Vec<usize> =
            (0..spec.seq_len).map(|_| background_lo + rng.below(background_n)).collect();
        let pos = rng.below(spec.seq_len);
        tokens[pos] = RESERVED + topic;
        NewsText {
            mask: alloc::vec![true; tokens.len()],
            tokens,
        }
    };

    // returns the sample plus the planted relevance of each candidate
    let gen_one = |rng: &mut Rng| -> (ImpressionSample, Vec<bool>, usize) {
        let user_topic = rng.below(t);
        let hist_len = 1 + rng.below(spec.history_max);
        let history: Vec<NewsText> = (0..hist_len).map(|_| gen_news(rng, user_topic)).collect();

        // With probability `topic_affinity` the impression follows the
        // planted preference (positive on-topic, negatives off-topic);
        // otherwise every candidate topic is uniform, erasing the signal.
        let affine = (rng.next_u64() >> 11) < (spec.topic_affinity * (1u64 << 53) as f64) as u64;
        let mut candidates = Vec::with_capacity(1 + spec.negatives_per_positive);
        let mut labels = Vec::with_capacity(1 + spec.negatives_per_positive);
        let pos_topic = if affine { user_topic } else { rng.below(t) };
        candidates.push(gen_news(rng, pos_topic));
        labels.push(true);
        for _ in 0..spec.negatives_per_positive {
            let neg_topic = if affine {
                (user_topic + 1 + rng.below(t - 1)) % t
            } else {
                rng.below(t)
            };
            candidates.push(gen_news(rng, neg_topic));
            labels.push(false);
        }
        // shuffle candidates and labels together
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        rng.shuffle(&mut order);
        let candidates: Vec<NewsText> = order.iter().map(|&i| candidates[i].clone()).collect();
        let labels_shuffled: Vec<bool> = order.iter().map(|&i| labels[i]).collect();
        (
            ImpressionSample {
                history,
                candidates,
                labels: labels_shuffled,
            },
            order.iter().map(|&i| labels[i]).collect(),
            user_topic,
        )
    };

    let train: Vec<ImpressionSample> =
        (0..spec.train_size).map(|_| gen_one(&mut rng).0).collect();

    // planted oracle on the test split: score = topic match with the user
    let mut test = Vec::with_capacity(spec.test_size);
    let mut oracle_aucs = Vec::new();
    for _ in 0..spec.test_size {
        let (sample, _, user_topic) = gen_one(&mut rng);
        let topic_of = |news: &NewsText| -> usize {
            news.tokens
                .iter()
                .find(|&&id| id >= RESERVED && id < RESERVED + t)
                .map(|&id| id - RESERVED)
                .expect("every synthetic news carries a topic token")
        };
        let scores: Vec<f64> = sample
            .candidates
            .iter()
            .map(|c| if topic_of(c) == user_topic { 1.0 } else { 0.0 })
            .collect();
        let labels: Vec<bool> = sample.labels.clone();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            oracle_aucs.push(crate::metrics::auc(&crate::metrics::RankedImpression {
                scores,
                labels,
            })?);
        }
        test.push(sample);
    }
    let planted_auc = if oracle_aucs.is_empty() {
        f64::NAN
    } else {
        oracle_aucs.iter().sum::<f64>() / oracle_aucs.len() as f64
    };

    Ok(SyntheticImpressions {
        train,
        test,
        vocab_size: spec.vocab_size,
        planted_auc,
    })
}

/// Generator settings for the synthetic retrieval task: a query and a
/// document share a topic (label 1) or not (label 0), split half and half.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalSpec {
    pub seed: u64,
    pub num_topics: usize,
    pub vocab_size: usize,
    pub query_len: usize,
    pub doc_len: usize,
    pub train_size: usize,
    pub test_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRetrieval {
    pub train: Vec<RetrievalSample>,
    pub test: Vec<RetrievalSample>,
    pub vocab_size: usize,
}

pub fn gen_synthetic_retrieval(spec: &RetrievalSpec) -> Result<SyntheticRetrieval> {
    if spec.num_topics < 2 {
        return Err(CoreError::Config("need at least 2 topics".into()));
    }
    if spec.vocab_size < RESERVED + spec.num_topics + 1 {
        return Err(CoreError::Config("vocab too small for topics".into()));
    }
    let mut rng = Rng::new(spec.seed);
    let t = spec.num_topics;
    let background_lo = RESERVED + t;
    let background_n = spec.vocab_size - background_lo;

    let gen_text = |rng: &mut Rng, topic: usize, len: usize| -> NewsText {
        let mut tokens: Vec<usize> =
            (0..len).map(|_| background_lo + rng.below(background_n)).collect();
        let pos = rng.below(len);
        tokens[pos] = RESERVED + topic;
        NewsText {
            mask: alloc::vec![true; tokens.len()],
            tokens,
        }
    };

    let gen_one = |rng: &mut Rng| -> RetrievalSample {
        let topic = rng.below(t);
        let label = rng.below(2) == 1;
        let doc_topic = if label {
            topic
        } else {
            (topic + 1 + rng.below(t - 1)) % t
        };
        RetrievalSample {
            query: gen_text(rng, topic, spec.query_len),
            doc: gen_text(rng, doc_topic, spec.doc_len),
            label,
        }
    };

    let train = (0..spec.train_size).map(|_| gen_one(&mut rng)).collect();
    let test = (0..spec.test_size).map(|_| gen_one(&mut rng)).collect();
    Ok(SyntheticRetrieval {
        train,
        test,
        vocab_size: spec.vocab_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_case_folds_and_pads() {
        let vocab = Vocab::from_tokens(alloc::vec!["hello".to_string(), "world".to_string()]);
        let (ids, mask) = tokenize(&vocab, "Hello, hello", 4);
        assert_eq!(ids, alloc::vec![2, 2, PAD, PAD]);
        assert_eq!(mask, alloc::vec![true, true, false, false]);
    }

    #[test]
    fn tokenize_empty_is_all_pad() {
        let vocab = Vocab::from_tokens(alloc::vec![]);
        let (ids, mask) = tokenize(&vocab, "", 3);
        assert_eq!(ids, alloc::vec![PAD; 3]);
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let vocab = Vocab::from_tokens(alloc::vec!["known".to_string()]);
        let (ids, _) = tokenize(&vocab, "unknownword known", 2);
        assert_eq!(ids, alloc::vec![UNK, 2]);
    }

    #[test]
    fn vocab_build_orders_by_frequency_then_lexicographic() {
        let tokens = ["b", "a", "b", "c", "a", "b"];
        let vocab = Vocab::build(tokens.iter().copied(), 10);
        assert_eq!(vocab.id_of("b"), 2); // most frequent
        assert_eq!(vocab.id_of("a"), 3);
        assert_eq!(vocab.id_of("c"), 4);
        // cap: only the top token kept
        let capped = Vocab::build(tokens.iter().copied(), 3);
        assert_eq!(capped.id_of("b"), 2);
        assert_eq!(capped.id_of("a"), UNK);
        assert_eq!(capped.len(), 3);
    }

    #[test]
    fn behaviors_fixture_parses_history_and_candidates() {
        let content = "1\tu1\t11/11/2019 9:05:58 AM\tn1 n2\tn3-1 n4-0\n";
        let rows = parse_behaviors_tsv(content).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].history, alloc::vec!["n1".to_string(), "n2".to_string()]);
        assert_eq!(
            rows[0].candidates,
            alloc::vec![("n3".to_string(), true), ("n4".to_string(), false)]
        );
    }

    #[test]
    fn malformed_lines_name_the_line_number() {
        let bad_news = "n1\tsports\n";
        match parse_news_tsv(bad_news) {
            Err(CoreError::Input(msg)) => assert!(msg.contains("line 1")),
            other => panic!("expected input error, got {other:?}"),
        }
        let bad_behaviors = "1\tu1\ttime\tn1\tn3-x\n";
        match parse_behaviors_tsv(bad_behaviors) {
            Err(CoreError::Input(msg)) => assert!(msg.contains("line 1")),
            other => panic!("expected input error, got {other:?}"),
        }
    }

    #[test]
    fn news_fixture_round_trip() {
        let news = "n1\tsports\tsoccer\tTeam wins big game\tbody\nn2\tfinance\tstocks\tMarkets fall again\tbody\n";
        let rows = parse_news_tsv(news).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].0, "n1");
        assert_eq!(rows[1].1, "finance");
        assert_eq!(rows[1].2, "Markets fall again");
    }

    fn mind_fixture() -> MindDataset {
        // 10 behaviors rows: first 8 train, 1 val, 1 test by order.
        let news = "n1\tsports\ts\talpha beta\tx\n\
                    n2\tsports\ts\tbeta gamma\tx\n\
                    n3\tfinance\tf\tgamma delta\tx\n\
                    n4\tfinance\tf\tdelta alpha\tx\n\
                    n5\tnews\tn\tepsilon zeta\tx\n";
        let mut behaviors = String::new();
        for i in 0..8 {
            behaviors.push_str(&format!("{i}\tu\ttime\tn1 n2\tn3-1 n4-0\n"));
        }
        behaviors.push_str("8\tu\ttime\tn2\tn1-0 n3-1\n"); // val
        behaviors.push_str("9\tu\ttime\tn1\tn5-1 n2-0\n"); // test: only n5 is new
        assemble_mind(
            parse_news_tsv(news).unwrap(),
            parse_behaviors_tsv(&behaviors).unwrap(),
            8,
            64,
            50,
        )
        .unwrap()
    }

    #[test]
    fn classification_test_split_excludes_seen_news() {
        let data = mind_fixture();
        let test_ids: Vec<usize> = data.classify_test.iter().map(|s| s.label).collect();
        // test split contains exactly n5 (category "news")
        assert_eq!(data.classify_test.len(), 1);
        let news_cat = data.categories.iter().position(|c| c == "news").unwrap();
        assert_eq!(test_ids, alloc::vec![news_cat]);
        // and its tokens are not any train news id
        assert_eq!(data.impressions_train.len(), 8);
        assert_eq!(data.impressions_val.len(), 1);
        assert_eq!(data.impressions_test.len(), 1);
    }

    #[test]
    fn unknown_behavior_news_are_skipped_and_counted() {
        let news = "n1\tsports\ts\talpha beta\tx\n";
        let behaviors = "0\tu\ttime\tn1 nMISSING\tn1-1 nGONE-0\n";
        let data = assemble_mind(
            parse_news_tsv(news).unwrap(),
            parse_behaviors_tsv(behaviors).unwrap(),
            8,
            64,
            50,
        )
        .unwrap();
        assert_eq!(data.skipped_unknown_news, 2);
        assert_eq!(data.impressions_train[0].candidates.len(), 1);
    }

    fn classify_spec(signal: f64) -> SyntheticSpec {
        SyntheticSpec {
            seed: 424242,
            vocab_size: 40,
            num_classes: 4,
            seq_len: 8,
            signal,
            indicators_per_class: 2,
            flip_rate: 0.5,
            train_size: 50,
            val_size: 10,
            test_size: 10,
        }
    }

    #[test]
    fn synthetic_classification_bayes_accuracy() {
        assert_eq!(classify_spec(1.0).bayes_accuracy(), 1.0);
        assert_eq!(classify_spec(0.0).bayes_accuracy(), 0.25);
        let spec = classify_spec(0.7);
        assert!((spec.bayes_accuracy() - 0.775).abs() < 1e-12);
    }

    #[test]
    fn synthetic_classification_is_seed_deterministic() {
        let spec = classify_spec(0.7);
        let a = gen_synthetic_classification(&spec).unwrap();
        let b = gen_synthetic_classification(&spec).unwrap();
        assert_eq!(a, b);
        let mut other = spec.clone();
        other.seed += 1;
        let c = gen_synthetic_classification(&other).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn planted_indicator_and_marker_decode_the_label() {
        let spec = classify_spec(1.0);
        let data = gen_synthetic_classification(&spec).unwrap();
        let c = spec.num_classes;
        let span = c * spec.indicators_per_class;
        let marker_base = RESERVED + span;
        let mut flipped_seen = 0;
        for sample in &data.train {
            let indicated = sample
                .tokens
                .iter()
                .find(|&&t| (RESERVED..RESERVED + span).contains(&t))
                .map(|&t| (t - RESERVED) / spec.indicators_per_class)
                .expect("signal 1.0 plants an indicator in every sample");
            let shift = usize::from(sample.tokens.contains(&marker_base));
            assert_eq!((indicated + shift) % c, sample.label);
            flipped_seen += usize::from(shift > 0);
        }
        assert!(flipped_seen > 0, "flip_rate 0.5 should plant markers");
    }

    fn impression_spec(affinity: f64) -> ImpressionSpec {
        ImpressionSpec {
            seed: 777,
            num_topics: 4,
            vocab_size: 40,
            seq_len: 6,
            history_max: 4,
            negatives_per_positive: 4,
            topic_affinity: affinity,
            train_size: 20,
            test_size: 200,
        }
    }

    #[test]
    fn planted_oracle_auc_matches_affinity_regime() {
        let separable = gen_synthetic_impressions(&impression_spec(1.0)).unwrap();
        assert_eq!(separable.planted_auc, 1.0);
        let free = gen_synthetic_impressions(&impression_spec(0.0)).unwrap();
        assert!((free.planted_auc - 0.5).abs() < 0.1);
    }

    #[test]
    fn synthetic_impressions_are_seed_deterministic() {
        let spec = impression_spec(1.0);
        let a = gen_synthetic_impressions(&spec).unwrap();
        let b = gen_synthetic_impressions(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn impressions_have_exactly_one_positive() {
        let data = gen_synthetic_impressions(&impression_spec(1.0)).unwrap();
        for s in data.train.iter().chain(&data.test) {
            assert_eq!(s.labels.iter().filter(|&&l| l).count(), 1);
            assert_eq!(s.candidates.len(), 5);
            assert!(!s.history.is_empty());
        }
    }

    #[test]
    fn synthetic_retrieval_is_deterministic_and_labeled_by_topic_match() {
        let spec = RetrievalSpec {
            seed: 5,
            num_topics: 3,
            vocab_size: 30,
            query_len: 4,
            doc_len: 8,
            train_size: 30,
            test_size: 30,
        };
        let a = gen_synthetic_retrieval(&spec).unwrap();
        let b = gen_synthetic_retrieval(&spec).unwrap();
        assert_eq!(a, b);
        let topic_of = |text: &NewsText| {
            text.tokens
                .iter()
                .find(|&&id| (RESERVED..RESERVED + 3).contains(&id))
                .copied()
                .unwrap()
        };
        for s in &a.train {
            assert_eq!(s.label, topic_of(&s.query) == topic_of(&s.doc));
        }
    }
}
