//! Latent topic model over the training corpus: a collapsed Gibbs sampler,
//! the per-word and per-document topic vectors the summarizer conditions on,
//! and the binary model file the CLI reads and writes.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{Document, Vocabulary, UNK};

pub const DEFAULT_TOPICS: usize = 512;
pub const DEFAULT_BETA: f64 = 0.01;
pub const DEFAULT_TRAIN_SWEEPS: usize = 200;
pub const DEFAULT_INFER_SWEEPS: usize = 50;
/// Fraction of distinct training tokens treated as stopwords for topic bags.
pub const STOPWORD_FRACTION: f64 = 0.001;

/// Standard symmetric document-topic prior for a given topic count.
pub fn default_alpha(topics: usize) -> f64 {
    50.0 / topics as f64
}

const MAGIC: &[u8; 8] = b"XSFTOPC1";

#[derive(Debug, Error)]
pub enum LdaError {
    #[error("topic model needs a corpus with at least one token")]
    EmptyCorpus,
    #[error("bad topic model settings: {0}")]
    BadConfig(String),
    #[error("bad topic model file: {0}")]
    BadModelFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A trained topic model: raw assignment counts plus the normalized
/// topic-word distributions derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicModel {
    pub topics: usize,
    pub vocab_size: usize,
    pub alpha: f64,
    pub beta: f64,
    /// topics x vocab_size, row-major.
    pub topic_word_counts: Vec<u32>,
    pub topic_totals: Vec<u64>,
    /// topics x vocab_size, row-major; row k is (counts + beta)/(total + V*beta).
    pub phi: Vec<f64>,
}

impl TopicModel {
    fn from_counts(
        topics: usize,
        vocab_size: usize,
        alpha: f64,
        beta: f64,
        topic_word_counts: Vec<u32>,
        topic_totals: Vec<u64>,
    ) -> Self {
        let vbeta = vocab_size as f64 * beta;
        let mut phi = vec![0.0; topics * vocab_size];
        for k in 0..topics {
            let denom = topic_totals[k] as f64 + vbeta;
            for w in 0..vocab_size {
                phi[k * vocab_size + w] = (topic_word_counts[k * vocab_size + w] as f64 + beta) / denom;
            }
        }
        TopicModel { topics, vocab_size, alpha, beta, topic_word_counts, topic_totals, phi }
    }

    pub fn phi_row(&self, k: usize) -> &[f64] {
        &self.phi[k * self.vocab_size..(k + 1) * self.vocab_size]
    }

    /// Total assignment count per word across all topics. Zero means the
    /// word never entered the sampler (stopword, reserved id, or absent).
    pub fn word_totals(&self) -> Vec<u64> {
        let mut totals = vec![0u64; self.vocab_size];
        for counts in self.topic_word_counts.chunks(self.vocab_size) {
            for (total, &count) in totals.iter_mut().zip(counts) {
                *total += count as u64;
            }
        }
        totals
    }

    pub fn save(&self, path: &Path) -> Result<(), LdaError> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&(self.topics as u64).to_le_bytes())?;
        out.write_all(&(self.vocab_size as u64).to_le_bytes())?;
        out.write_all(&self.alpha.to_le_bytes())?;
        out.write_all(&self.beta.to_le_bytes())?;
        for x in &self.phi {
            out.write_all(&x.to_le_bytes())?;
        }
        for t in &self.topic_totals {
            out.write_all(&t.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    /// Loads a model file and rebuilds the integer count table from phi and
    /// the stored totals, verifying the two agree.
    pub fn load(path: &Path) -> Result<Self, LdaError> {
        let file = File::open(path)?;
        let file_len = file.metadata()?.len();
        let mut input = BufReader::new(file);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(LdaError::BadModelFile("unrecognized header".into()));
        }
        let topics = read_u64(&mut input)? as usize;
        let vocab_size = read_u64(&mut input)? as usize;
        let alpha = read_f64(&mut input)?;
        let beta = read_f64(&mut input)?;
        if topics == 0 || vocab_size == 0 {
            return Err(LdaError::BadModelFile("zero-sized model".into()));
        }
        if !valid_prior(alpha) || !valid_prior(beta) {
            return Err(LdaError::BadModelFile(format!("bad priors alpha={alpha} beta={beta}")));
        }
        let cells = topics
            .checked_mul(vocab_size)
            .ok_or_else(|| LdaError::BadModelFile("model dimensions overflow".into()))?;
        let expect = 40 + (cells as u64) * 8 + (topics as u64) * 8;
        if file_len != expect {
            return Err(LdaError::BadModelFile(format!(
                "expected {expect} bytes for a {topics}x{vocab_size} model, found {file_len}"
            )));
        }
        let mut phi = vec![0.0; cells];
        for x in phi.iter_mut() {
            *x = read_f64(&mut input)?;
        }
        let mut topic_totals = vec![0u64; topics];
        for t in topic_totals.iter_mut() {
            *t = read_u64(&mut input)?;
        }
        let vbeta = vocab_size as f64 * beta;
        let mut topic_word_counts = vec![0u32; cells];
        for k in 0..topics {
            let denom = topic_totals[k] as f64 + vbeta;
            let mut row_sum: u64 = 0;
            for w in 0..vocab_size {
                let raw = phi[k * vocab_size + w] * denom - beta;
                let count = raw.round();
                if count < 0.0 || (count - raw).abs() > 0.01 || count > u32::MAX as f64 {
                    return Err(LdaError::BadModelFile(format!(
                        "phi[{k}][{w}] does not encode an integer count"
                    )));
                }
                topic_word_counts[k * vocab_size + w] = count as u32;
                row_sum += count as u64;
            }
            if row_sum != topic_totals[k] {
                return Err(LdaError::BadModelFile(format!(
                    "topic {k} counts sum to {row_sum}, header says {}",
                    topic_totals[k]
                )));
            }
        }
        Ok(TopicModel { topics, vocab_size, alpha, beta, topic_word_counts, topic_totals, phi })
    }
}

fn read_u64(input: &mut impl Read) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(input: &mut impl Read) -> std::io::Result<f64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn valid_prior(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

/// Collapsed Gibbs sampler over token bags. Exposed so callers can observe
/// the count tables between sweeps; `train_lda` wraps the common case.
pub struct GibbsSampler {
    topics: usize,
    vocab_size: usize,
    alpha: f64,
    beta: f64,
    bags: Vec<Vec<usize>>,
    assignments: Vec<Vec<usize>>,
    /// docs x topics, row-major.
    doc_topic: Vec<u32>,
    /// vocab_size x topics, word-major so the sampling loop is contiguous.
    word_topic: Vec<u32>,
    topic_totals: Vec<u64>,
    total_tokens: u64,
    rng: ChaCha8Rng,
    weights: Vec<f64>,
}

impl GibbsSampler {
    pub fn new(
        bags: Vec<Vec<usize>>,
        vocab_size: usize,
        topics: usize,
        alpha: f64,
        beta: f64,
        seed: u64,
    ) -> Result<Self, LdaError> {
        if topics < 2 {
            return Err(LdaError::BadConfig(format!("need at least 2 topics, got {topics}")));
        }
        if !valid_prior(alpha) || !valid_prior(beta) {
            return Err(LdaError::BadConfig(format!("priors must be positive: alpha={alpha} beta={beta}")));
        }
        for bag in &bags {
            if let Some(&id) = bag.iter().find(|&&id| id >= vocab_size) {
                return Err(LdaError::BadConfig(format!(
                    "token id {id} outside vocabulary of size {vocab_size}"
                )));
            }
        }
        let total_tokens: u64 = bags.iter().map(|b| b.len() as u64).sum();
        if total_tokens == 0 {
            return Err(LdaError::EmptyCorpus);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut doc_topic = vec![0u32; bags.len() * topics];
        let mut word_topic = vec![0u32; vocab_size * topics];
        let mut topic_totals = vec![0u64; topics];
        let mut assignments = Vec::with_capacity(bags.len());
        for (d, bag) in bags.iter().enumerate() {
            let mut z = Vec::with_capacity(bag.len());
            for &w in bag {
                let k = rng.random_range(0..topics);
                doc_topic[d * topics + k] += 1;
                word_topic[w * topics + k] += 1;
                topic_totals[k] += 1;
                z.push(k);
            }
            assignments.push(z);
        }
        Ok(GibbsSampler {
            topics,
            vocab_size,
            alpha,
            beta,
            bags,
            assignments,
            doc_topic,
            word_topic,
            topic_totals,
            total_tokens,
            rng,
            weights: vec![0.0; topics],
        })
    }

    /// One full pass reassigning every token.
    pub fn sweep(&mut self) {
        let k = self.topics;
        let vbeta = self.vocab_size as f64 * self.beta;
        for d in 0..self.bags.len() {
            for j in 0..self.bags[d].len() {
                let w = self.bags[d][j];
                let old = self.assignments[d][j];
                self.doc_topic[d * k + old] -= 1;
                self.word_topic[w * k + old] -= 1;
                self.topic_totals[old] -= 1;
                let mut total = 0.0;
                for t in 0..k {
                    let weight = (self.doc_topic[d * k + t] as f64 + self.alpha)
                        * (self.word_topic[w * k + t] as f64 + self.beta)
                        / (self.topic_totals[t] as f64 + vbeta);
                    self.weights[t] = weight;
                    total += weight;
                }
                let new = sample_index(&self.weights, total, &mut self.rng);
                self.doc_topic[d * k + new] += 1;
                self.word_topic[w * k + new] += 1;
                self.topic_totals[new] += 1;
                self.assignments[d][j] = new;
            }
        }
    }

    pub fn topic_totals(&self) -> &[u64] {
        &self.topic_totals
    }

    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    /// Per-document topic counts, docs x topics row-major.
    pub fn doc_topic_counts(&self) -> &[u32] {
        &self.doc_topic
    }

    pub fn to_model(&self) -> TopicModel {
        let (k, v) = (self.topics, self.vocab_size);
        let mut counts = vec![0u32; k * v];
        for w in 0..v {
            for t in 0..k {
                counts[t * v + w] = self.word_topic[w * k + t];
            }
        }
        TopicModel::from_counts(k, v, self.alpha, self.beta, counts, self.topic_totals.clone())
    }
}

fn sample_index<R: Rng>(weights: &[f64], total: f64, rng: &mut R) -> usize {
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Trains a topic model by `sweeps` full Gibbs passes over the bags.
pub fn train_lda(
    bags: Vec<Vec<usize>>,
    vocab_size: usize,
    topics: usize,
    alpha: f64,
    beta: f64,
    sweeps: usize,
    seed: u64,
) -> Result<TopicModel, LdaError> {
    if sweeps == 0 {
        return Err(LdaError::BadConfig("need at least one sweep".into()));
    }
    let mut sampler = GibbsSampler::new(bags, vocab_size, topics, alpha, beta, seed)?;
    for _ in 0..sweeps {
        sampler.sweep();
    }
    Ok(sampler.to_model())
}

/// Per-word topic distributions, one normalized row per vocabulary id.
#[derive(Debug, Clone, PartialEq)]
pub struct WordTopics {
    topics: usize,
    rows: Vec<f64>,
}

impl WordTopics {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let topics = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == topics), "ragged topic rows");
        WordTopics { topics, rows: rows.into_iter().flatten().collect() }
    }

    pub fn topics(&self) -> usize {
        self.topics
    }

    pub fn words(&self) -> usize {
        self.rows.len().checked_div(self.topics).unwrap_or(0)
    }

    pub fn row(&self, word: usize) -> &[f64] {
        &self.rows[word * self.topics..(word + 1) * self.topics]
    }
}

/// Inverts the topic-word distributions into per-word topic rows:
/// row[w][k] is proportional to phi[k][w] * p(k) with p(k) the share of all
/// assignments held by topic k. Words the sampler never saw get uniform rows.
pub fn word_topic_dist(model: &TopicModel) -> WordTopics {
    let (k, v) = (model.topics, model.vocab_size);
    let grand_total: u64 = model.topic_totals.iter().sum();
    let word_totals = model.word_totals();
    let uniform = 1.0 / k as f64;
    let mut rows = vec![0.0; v * k];
    for w in 0..v {
        let row = &mut rows[w * k..(w + 1) * k];
        if word_totals[w] == 0 || grand_total == 0 {
            row.fill(uniform);
            continue;
        }
        let mut sum = 0.0;
        for (t, slot) in row.iter_mut().enumerate() {
            let weight = model.phi[t * v + w] * (model.topic_totals[t] as f64 / grand_total as f64);
            *slot = weight;
            sum += weight;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    WordTopics { topics: k, rows }
}

/// Gibbs sampler for a single document against a frozen model. Exposed so
/// the count-conservation invariant can be checked between sweeps.
pub struct DocTopicSampler {
    topics: usize,
    alpha: f64,
    /// phi column per distinct live word in the bag.
    columns: Vec<Vec<f64>>,
    /// Column index per retained token.
    tokens: Vec<usize>,
    assignments: Vec<usize>,
    counts: Vec<u32>,
    rng: ChaCha8Rng,
    weights: Vec<f64>,
}

impl DocTopicSampler {
    /// Words the model never counted (stopwords, reserved ids, out-of-range
    /// ids) are dropped from the bag.
    pub fn new(model: &TopicModel, bag: &[usize], seed: u64) -> Self {
        let (k, v) = (model.topics, model.vocab_size);
        let word_totals = model.word_totals();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut column_of: HashMap<usize, usize> = HashMap::new();
        let mut columns: Vec<Vec<f64>> = Vec::new();
        let mut tokens = Vec::new();
        for &w in bag {
            if w >= v || word_totals[w] == 0 {
                continue;
            }
            let col = *column_of.entry(w).or_insert_with(|| {
                columns.push((0..k).map(|t| model.phi[t * v + w]).collect());
                columns.len() - 1
            });
            tokens.push(col);
        }
        let mut counts = vec![0u32; k];
        let mut assignments = Vec::with_capacity(tokens.len());
        for _ in &tokens {
            let t = rng.random_range(0..k);
            counts[t] += 1;
            assignments.push(t);
        }
        DocTopicSampler {
            topics: k,
            alpha: model.alpha,
            columns,
            tokens,
            assignments,
            counts,
            rng,
            weights: vec![0.0; k],
        }
    }

    pub fn sweep(&mut self) {
        for j in 0..self.tokens.len() {
            let col = &self.columns[self.tokens[j]];
            let old = self.assignments[j];
            self.counts[old] -= 1;
            let mut total = 0.0;
            for ((slot, &affinity), &count) in
                self.weights.iter_mut().zip(col).zip(&self.counts)
            {
                let weight = affinity * (count as f64 + self.alpha);
                *slot = weight;
                total += weight;
            }
            let new = sample_index(&self.weights, total, &mut self.rng);
            self.counts[new] += 1;
            self.assignments[j] = new;
        }
    }

    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn topic_counts(&self) -> &[u32] {
        &self.counts
    }

    /// Smoothed topic proportions from the current assignment.
    pub fn estimate(&self) -> Vec<f64> {
        let n = self.tokens.len() as f64;
        let denom = n + self.topics as f64 * self.alpha;
        self.counts.iter().map(|&c| (c as f64 + self.alpha) / denom).collect()
    }
}

/// Infers a document's topic proportions with the model held fixed. An empty
/// or fully-skipped bag yields the uniform prior vector.
pub fn infer_doc_topics(model: &TopicModel, bag: &[usize], sweeps: usize, seed: u64) -> Vec<f64> {
    let mut sampler = DocTopicSampler::new(model, bag, seed);
    for _ in 0..sweeps {
        sampler.sweep();
    }
    sampler.estimate()
}

/// The most frequent 0.1% of distinct body tokens, as vocabulary ids. These
/// are kept out of topic bags but stay in the seq2seq vocabulary.
pub fn stopword_ids(docs: &[Document], vocab: &Vocabulary) -> HashSet<usize> {
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for doc in docs {
        for sentence in &doc.sentences {
            for tok in sentence {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
    }
    if counts.is_empty() {
        return HashSet::new();
    }
    let keep = ((counts.len() as f64) * STOPWORD_FRACTION).ceil() as usize;
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.into_iter().take(keep).filter_map(|(t, _)| vocab.id_of(t)).collect()
}

/// Body tokens as a topic bag: in-vocabulary ids with reserved ids and
/// stopwords removed.
pub fn doc_bag(doc: &Document, vocab: &Vocabulary, stopwords: &HashSet<usize>) -> Vec<usize> {
    doc.sentences
        .iter()
        .flatten()
        .filter_map(|t| vocab.id_of(t))
        .filter(|id| *id > UNK && !stopwords.contains(id))
        .collect()
}
