//! Beam-search decoding and raw-text summarization over trained artifacts.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::convs2s::{
    bind, decode_step, embed_source, encode, ModelError, ModelParams, TopicVectors,
};
use crate::corpus::{
    split_sentences, tokenize, CorpusError, EncodedPair, Vocabulary, BOS, EOS, MAX_SOURCE_TOKENS,
    MAX_TARGET_TOKENS, PAD, UNK,
};
use crate::diffcore::{log_softmax, Tape};
use crate::topiclda::{infer_doc_topics, word_topic_dist, LdaError, TopicModel, WordTopics};

/// Gibbs sweeps used to infer an unseen document's topic mixture.
pub const DOC_TOPIC_SWEEPS: usize = 50;
/// Fixed seed for topic inference so the same document always summarizes
/// the same way.
pub const TOPIC_SEED: u64 = 0;

#[derive(Debug, Error)]
pub enum InferError {
    #[error("document has no source tokens")]
    EmptySource,
    #[error("model variant {0} is topic-conditioned but no topic model was given")]
    TopicModelMissing(&'static str),
    #[error("topic model has {have} topics but the model embeds {want}")]
    TopicCountMismatch { have: usize, want: usize },
    #[error("topic model covers {have} words but the vocabulary has {want}")]
    TopicVocabTooSmall { have: usize, want: usize },
    #[error("vocabulary has {have} entries but the model was sized for {max}")]
    VocabTooLarge { have: usize, max: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Lda(#[from] LdaError),
}

/// Beam-search settings. `max_len` caps emitted tokens (the start token is
/// not counted) and is further clamped to the model's target position table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    pub max_len: usize,
    /// Rank finished hypotheses by per-token log-probability instead of the
    /// raw sum. Off by default: raw model score.
    pub length_normalize: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { beam: 10, max_len: MAX_TARGET_TOKENS, length_normalize: false }
    }
}

/// One decoder hypothesis: the token path starting at the start token, the
/// summed log-probability of every emitted token, and whether decoding has
/// stopped (stop token emitted or length cap reached).
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub token_ids: Vec<usize>,
    pub logprob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens emitted after the start token.
    pub fn emitted(&self) -> &[usize] {
        &self.token_ids[1..]
    }

    /// Emitted tokens with the trailing stop token, if any, removed.
    pub fn summary_ids(&self) -> &[usize] {
        let emitted = self.emitted();
        match emitted.last() {
            Some(&EOS) => &emitted[..emitted.len() - 1],
            _ => emitted,
        }
    }

    fn score(&self, length_normalize: bool) -> f64 {
        if length_normalize && self.token_ids.len() > 1 {
            self.logprob / (self.token_ids.len() - 1) as f64
        } else {
            self.logprob
        }
    }
}

/// Synchronous beam search over the decoder. Each step expands every live
/// hypothesis over the vocabulary (padding and start tokens are never
/// emitted), keeps the `beam` best extensions by total log-probability, and
/// retires finished ones. Ties prefer the earlier parent, then the lower
/// token id. Returns every finished hypothesis, best first; with
/// `length_normalize` the final ranking divides each score by its emitted
/// length. A beam of one is exactly greedy decoding.
pub fn beam_search(
    params: &ModelParams,
    source: &EncodedPair,
    topics: TopicVectors,
    beam: &BeamConfig,
) -> Result<Vec<Hypothesis>, ModelError> {
    assert!(beam.beam >= 1, "beam width starts at one");
    assert!(beam.max_len >= 1, "must be allowed to emit at least one token");
    assert!(!source.source_ids.is_empty(), "source must be non-empty");
    let config = params.config();
    let cap = beam.max_len.min(config.max_tgt_positions);

    let mut pool: Vec<Hypothesis> = Vec::new();
    let mut live =
        vec![Hypothesis { token_ids: vec![BOS], logprob: 0.0, finished: false }];
    while !live.is_empty() {
        // A fresh tape per step keeps memory flat; all candidates share the
        // one encoder pass on it.
        let mut tape = Tape::new();
        let bound = bind(&mut tape, params)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = embed_source(
            &mut tape,
            &bound,
            config,
            &source.source_ids,
            &source.source_positions,
            topics,
            false,
            &mut rng,
        )?;
        let enc = encode(&mut tape, &bound, config, e, false, &mut rng)?;

        // (parent index, token, total logprob)
        let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
        for (parent, hyp) in live.iter().enumerate() {
            let logits =
                decode_step(&mut tape, &bound, config, &enc, &hyp.token_ids, topics.doc_topic)?;
            let steps = log_softmax(&logits);
            for (token, lp) in steps.iter().enumerate() {
                if token == PAD || token == BOS {
                    continue;
                }
                candidates.push((parent, token, hyp.logprob + lp));
            }
        }
        candidates.sort_by(|a, b| {
            b.2.total_cmp(&a.2).then_with(|| a.0.cmp(&b.0)).then_with(|| a.1.cmp(&b.1))
        });
        candidates.truncate(beam.beam);

        let mut next_live = Vec::new();
        for (parent, token, logprob) in candidates {
            let mut token_ids = live[parent].token_ids.clone();
            token_ids.push(token);
            let finished = token == EOS || token_ids.len() > cap;
            let hyp = Hypothesis { token_ids, logprob, finished };
            if finished {
                pool.push(hyp);
            } else {
                next_live.push(hyp);
            }
        }
        live = next_live;
    }

    pool.sort_by(|a, b| {
        b.score(beam.length_normalize)
            .total_cmp(&a.score(beam.length_normalize))
            .then_with(|| a.token_ids.cmp(&b.token_ids))
    });
    Ok(pool)
}

#[derive(Debug)]
struct TopicContext {
    model: TopicModel,
    word_topics: WordTopics,
}

/// A trained model plus the artifacts needed to take raw article text all
/// the way to a summary string.
#[derive(Debug)]
pub struct Summarizer {
    params: ModelParams,
    vocab: Vocabulary,
    topics: Option<TopicContext>,
    beam: BeamConfig,
}

impl Summarizer {
    /// Validates that the artifacts fit together. Topic-conditioned variants
    /// require a topic model whose topic count matches the model's topic
    /// embedding width; the plain variant ignores any topic model passed.
    pub fn new(
        params: ModelParams,
        vocab: Vocabulary,
        topic_model: Option<TopicModel>,
        beam: BeamConfig,
    ) -> Result<Self, InferError> {
        let config = params.config();
        if vocab.len() > config.vocab_size {
            return Err(InferError::VocabTooLarge { have: vocab.len(), max: config.vocab_size });
        }
        let variant = config.variant;
        let conditioned = variant.enc_word_topics()
            || variant.enc_doc_topic_product()
            || variant.dec_doc_topic();
        let topics = if conditioned {
            let model =
                topic_model.ok_or(InferError::TopicModelMissing(variant.name()))?;
            if model.topics != config.f_prime {
                return Err(InferError::TopicCountMismatch {
                    have: model.topics,
                    want: config.f_prime,
                });
            }
            if model.vocab_size < vocab.len() {
                return Err(InferError::TopicVocabTooSmall {
                    have: model.vocab_size,
                    want: vocab.len(),
                });
            }
            let word_topics = word_topic_dist(&model);
            Some(TopicContext { model, word_topics })
        } else {
            None
        };
        Ok(Summarizer { params, vocab, topics, beam })
    }

    /// Loads the model checkpoint, vocabulary file, and optional topic model
    /// from disk.
    pub fn from_files(
        checkpoint: &Path,
        vocab: &Path,
        topic_model: Option<&Path>,
        beam: BeamConfig,
    ) -> Result<Self, InferError> {
        let params = ModelParams::load(checkpoint)?;
        let vocab = Vocabulary::load(vocab)?;
        let topics = topic_model.map(TopicModel::load).transpose()?;
        Summarizer::new(params, vocab, topics, beam)
    }

    pub fn config(&self) -> &crate::convs2s::ModelConfig {
        self.params.config()
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Summarizes raw article text: sentence-split, tokenize, encode,
    /// infer the document's topic mixture, beam-search, detokenize the best
    /// hypothesis. The same text always yields the same summary.
    pub fn summarize(&self, raw_document: &str) -> Result<String, InferError> {
        let tokens: Vec<String> =
            split_sentences(raw_document).iter().flat_map(|s| tokenize(s)).collect();
        self.summarize_tokens(&tokens)
    }

    /// Summarizes an already-tokenized document body.
    pub fn summarize_tokens(&self, tokens: &[String]) -> Result<String, InferError> {
        if tokens.is_empty() {
            return Err(InferError::EmptySource);
        }
        let config = self.params.config();
        let limit = MAX_SOURCE_TOKENS.min(config.max_src_positions);
        let source_ids = self.vocab.encode(&tokens[..tokens.len().min(limit)]);
        let source = EncodedPair {
            source_positions: (0..source_ids.len()).collect(),
            source_ids,
            target_ids: vec![EOS],
        };

        let hyps = match &self.topics {
            Some(ctx) => {
                // The topic bag covers the whole document, not just the
                // truncated model input; reserved ids never enter bags.
                let bag: Vec<usize> = tokens
                    .iter()
                    .filter_map(|t| self.vocab.id_of(t))
                    .filter(|&id| id > UNK)
                    .collect();
                let doc_topic =
                    infer_doc_topics(&ctx.model, &bag, DOC_TOPIC_SWEEPS, TOPIC_SEED);
                let rows: Vec<Vec<f64>> = source
                    .source_ids
                    .iter()
                    .map(|&id| ctx.word_topics.row(id).to_vec())
                    .collect();
                let topics = TopicVectors { word_topics: &rows, doc_topic: &doc_topic };
                beam_search(&self.params, &source, topics, &self.beam)?
            }
            None => beam_search(&self.params, &source, TopicVectors::default(), &self.beam)?,
        };
        let best = hyps.first().expect("beam search returns at least one hypothesis");
        Ok(self.vocab.decode(best.summary_ids()).join(" "))
    }
}
