//! Command-line pipeline: corpus preprocessing, topic-model and summarizer
//! training, decoding, evaluation, and corpus analysis.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::convs2s::{ModelConfig, ModelError, Variant};
use crate::corpus::{
    encode_pair, load_jsonl, save_jsonl, split_corpus, tokenize, CorpusError, Document,
    Vocabulary,
};
use crate::evalsuite::{
    evaluate_system, ext_oracle, lead, random_sentence, EvalError, SystemReport,
};
use crate::inference::{BeamConfig, InferError, Summarizer, DOC_TOPIC_SWEEPS, TOPIC_SEED};
use crate::topiclda::{
    doc_bag, infer_doc_topics, stopword_ids, train_lda, word_topic_dist, LdaError, TopicModel,
};
use crate::trainer::{train, TrainError, TrainPair, TrainerConfig};

const EXIT_OK: i32 = 0;
const EXIT_USAGE: i32 = 1;
const EXIT_DATA: i32 = 2;

/// Topic-model training settings; `alpha` defaults to 50/topics when unset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LdaSettings {
    pub topics: usize,
    pub alpha: Option<f64>,
    pub beta: f64,
    pub iters: usize,
}

impl Default for LdaSettings {
    fn default() -> Self {
        LdaSettings { topics: 512, alpha: None, beta: 0.01, iters: 200 }
    }
}

impl LdaSettings {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(50.0 / self.topics as f64)
    }
}

/// Everything one experiment needs, loadable from a single JSON file;
/// command-line flags override individual fields.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub lda: LdaSettings,
    pub seed: u64,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) => m,
        }
    }
}

macro_rules! data_errors {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_errors!(
    CorpusError,
    LdaError,
    ModelError,
    TrainError,
    InferError,
    EvalError,
    io::Error,
    serde_json::Error
);

#[derive(Parser)]
#[command(
    name = "xsumforge",
    about = "Single-sentence news summarization: topic-conditioned convolutional \
             seq2seq with extractive baselines and ROUGE evaluation",
    version
)]
struct Cli {
    /// JSON pipeline config; flags override individual fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every stochastic component.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Tokenize a corpus, build the vocabulary, and split train/val/test.
    Preprocess(PreprocessArgs),
    /// Train the topic model on a corpus split.
    TrainLda(TrainLdaArgs),
    /// Train the summarization model.
    Train(TrainArgs),
    /// Summarize documents with a trained model.
    Summarize(SummarizeArgs),
    /// Score system outputs against reference summaries.
    Evaluate(EvaluateArgs),
    /// Corpus statistics, gold novelty, and extractive baseline scores.
    AnalyzeCorpus(AnalyzeArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// JSONL corpus file, or a directory of article HTML pages.
    #[arg(long)]
    input: PathBuf,
    /// Directory for train/val/test JSONL and the vocabulary.
    #[arg(long)]
    out_dir: PathBuf,
    /// Vocabulary size cap, reserved ids included.
    #[arg(long, default_value_t = 50_000)]
    vocab_cap: usize,
    /// Train,validation,test ratios; must sum to 1.
    #[arg(long, default_value = "0.90,0.05,0.05")]
    ratios: String,
}

#[derive(Args)]
struct TrainLdaArgs {
    /// JSONL corpus to fit topics on (normally the training split).
    #[arg(long)]
    corpus: PathBuf,
    /// Vocabulary file from `preprocess`.
    #[arg(long)]
    vocab: PathBuf,
    /// Output path for the trained topic model.
    #[arg(long)]
    out: PathBuf,
    /// Number of topics.
    #[arg(long)]
    topics: Option<usize>,
    /// Gibbs sweeps.
    #[arg(long)]
    iters: Option<usize>,
    /// Document-topic prior; defaults to 50/topics.
    #[arg(long)]
    alpha: Option<f64>,
    /// Topic-word prior.
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training split JSONL.
    #[arg(long)]
    train: PathBuf,
    /// Validation split JSONL.
    #[arg(long)]
    val: PathBuf,
    /// Vocabulary file.
    #[arg(long)]
    vocab: PathBuf,
    /// Trained topic model; required for topic-conditioned variants.
    #[arg(long)]
    topics: Option<PathBuf>,
    /// Directory for checkpoints and the training log.
    #[arg(long)]
    out_dir: PathBuf,
    /// Model variant: plain, enc_t, enc_t_dec_tD, enc_ttD, enc_ttD_dec_tD.
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Args)]
struct SummarizeArgs {
    /// Model checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Vocabulary file.
    #[arg(long)]
    vocab: PathBuf,
    /// Topic model; required for topic-conditioned checkpoints.
    #[arg(long)]
    topics: Option<PathBuf>,
    /// Beam width.
    #[arg(long, default_value_t = 10)]
    beam: usize,
    /// Cap on emitted summary tokens.
    #[arg(long)]
    max_len: Option<usize>,
    /// Rank beam hypotheses by per-token log-probability.
    #[arg(long)]
    length_normalize: bool,
    /// JSONL documents to summarize; stdin when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output JSONL path; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// System outputs as JSONL records {"id", "summary"}.
    #[arg(long)]
    outputs: PathBuf,
    /// Reference corpus JSONL (summaries and source documents).
    #[arg(long)]
    refs: PathBuf,
    /// Apply Porter stemming before matching.
    #[arg(long)]
    stemmed: bool,
    /// System name used in the report.
    #[arg(long, default_value = "system")]
    name: String,
    /// Also write the report as JSON to this path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Corpus JSONL to analyze.
    #[arg(long)]
    corpus: PathBuf,
    /// Also write the analysis as JSON to this path.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` and runs one subcommand. Exit codes: 0 success, 1 usage
/// error, 2 data error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let config = match load_pipeline_config(cli.config.as_deref(), cli.seed) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}", e.message());
            return e.code();
        }
    };
    let result = match cli.cmd {
        Cmd::Preprocess(a) => cmd_preprocess(&a, &config),
        Cmd::TrainLda(a) => cmd_train_lda(&a, &config),
        Cmd::Train(a) => cmd_train(&a, &config),
        Cmd::Summarize(a) => cmd_summarize(&a),
        Cmd::Evaluate(a) => cmd_evaluate(&a),
        Cmd::AnalyzeCorpus(a) => cmd_analyze(&a, &config),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn load_pipeline_config(
    path: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<PipelineConfig, CliError> {
    let mut config = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Data(format!("bad config {}: {e}", p.display())))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = seed_override {
        config.seed = seed;
        config.trainer.seed = seed;
    }
    Ok(config)
}

fn require_exists(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{what} not found: {}", path.display())))
    }
}

fn parse_ratios(text: &str) -> Result<(f64, f64, f64), CliError> {
    let parts: Vec<&str> = text.split(',').collect();
    let bad = || CliError::Usage(format!("bad --ratios {text:?}; expected three numbers like 0.9,0.05,0.05"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut vals = [0.0; 3];
    for (v, p) in vals.iter_mut().zip(&parts) {
        *v = p.trim().parse().map_err(|_| bad())?;
    }
    Ok((vals[0], vals[1], vals[2]))
}

/// Loads documents from a JSONL file or, for a directory, from every
/// contained `.html` page in filename order.
fn read_input_docs(input: &Path) -> Result<Vec<Document>, CliError> {
    require_exists(input, "input corpus")?;
    if input.is_dir() {
        let mut pages: Vec<PathBuf> = fs::read_dir(input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension().and_then(|x| x.to_str()).is_some_and(|x| {
                    x.eq_ignore_ascii_case("html") || x.eq_ignore_ascii_case("htm")
                })
            })
            .collect();
        pages.sort();
        let mut docs = Vec::new();
        for page in pages {
            let id = page.file_stem().and_then(|s| s.to_str()).unwrap_or("page").to_string();
            let html = fs::read_to_string(&page)?;
            match Document::from_html(&id, &html) {
                Ok(doc) => docs.push(doc),
                Err(e) => info!("skipping {}: {e}", page.display()),
            }
        }
        Ok(docs)
    } else {
        Ok(load_jsonl(input)?)
    }
}

fn cmd_preprocess(a: &PreprocessArgs, config: &PipelineConfig) -> Result<(), CliError> {
    let ratios = parse_ratios(&a.ratios)?;
    let docs = read_input_docs(&a.input)?;
    if docs.is_empty() {
        return Err(CliError::Data(format!("no usable documents in {}", a.input.display())));
    }
    fs::create_dir_all(&a.out_dir)?;
    let vocab = Vocabulary::build(&docs, a.vocab_cap)?;
    let (train_docs, val_docs, test_docs) = split_corpus(docs, ratios, config.seed)?;
    vocab.save(&a.out_dir.join("vocab.tsv"))?;
    save_jsonl(&a.out_dir.join("train.jsonl"), &train_docs)?;
    save_jsonl(&a.out_dir.join("val.jsonl"), &val_docs)?;
    save_jsonl(&a.out_dir.join("test.jsonl"), &test_docs)?;
    println!(
        "wrote {} train / {} val / {} test documents, vocabulary of {} tokens, to {}",
        train_docs.len(),
        val_docs.len(),
        test_docs.len(),
        vocab.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn cmd_train_lda(a: &TrainLdaArgs, config: &PipelineConfig) -> Result<(), CliError> {
    let mut lda = config.lda.clone();
    if let Some(k) = a.topics {
        lda.topics = k;
    }
    if let Some(iters) = a.iters {
        lda.iters = iters;
    }
    if let Some(alpha) = a.alpha {
        lda.alpha = Some(alpha);
    }
    if let Some(beta) = a.beta {
        lda.beta = beta;
    }
    let docs = load_docs(&a.corpus)?;
    let vocab = load_vocab(&a.vocab)?;
    let stopwords = stopword_ids(&docs, &vocab);
    let bags: Vec<Vec<usize>> =
        docs.iter().map(|d| doc_bag(d, &vocab, &stopwords)).collect();
    let model = train_lda(
        bags,
        vocab.len(),
        lda.topics,
        lda.alpha(),
        lda.beta,
        lda.iters,
        config.seed,
    )?;
    model.save(&a.out)?;
    println!(
        "trained {}-topic model on {} documents ({} sweeps), saved to {}",
        lda.topics,
        docs.len(),
        lda.iters,
        a.out.display()
    );
    Ok(())
}

/// Encodes documents into training pairs, attaching topic vectors when the
/// variant is topic-conditioned. Documents whose encoding fails are skipped
/// with a log line.
fn build_pairs(
    docs: &[Document],
    vocab: &Vocabulary,
    topics: Option<(&TopicModel, &std::collections::HashSet<usize>)>,
) -> Result<Vec<TrainPair>, CliError> {
    let conditioned = topics.is_some();
    let word_rows = topics.map(|(m, _)| word_topic_dist(m));
    let mut pairs = Vec::with_capacity(docs.len());
    for doc in docs {
        let pair = match encode_pair(doc, vocab) {
            Ok(p) => p,
            Err(e) => {
                info!("skipping {}: {e}", doc.id);
                continue;
            }
        };
        let (word_topics, doc_topic) = if conditioned {
            let (model, stopwords) = topics.unwrap();
            let bag = doc_bag(doc, vocab, stopwords);
            let doc_topic = infer_doc_topics(model, &bag, DOC_TOPIC_SWEEPS, TOPIC_SEED);
            let rows = word_rows.as_ref().unwrap();
            let word_topics =
                pair.source_ids.iter().map(|&id| rows.row(id).to_vec()).collect();
            (word_topics, doc_topic)
        } else {
            (Vec::new(), Vec::new())
        };
        pairs.push(TrainPair { pair, word_topics, doc_topic });
    }
    if pairs.is_empty() {
        return Err(CliError::Data("no encodable documents".into()));
    }
    Ok(pairs)
}

fn cmd_train(a: &TrainArgs, config: &PipelineConfig) -> Result<(), CliError> {
    let mut model_config = config.model;
    if let Some(v) = &a.variant {
        model_config.variant = v.parse::<Variant>().map_err(CliError::Usage)?;
    }
    let train_docs = load_docs(&a.train)?;
    let val_docs = load_docs(&a.val)?;
    let vocab = load_vocab(&a.vocab)?;
    if model_config.vocab_size != vocab.len() {
        info!(
            "sizing model vocabulary to the artifact: {} -> {}",
            model_config.vocab_size,
            vocab.len()
        );
        model_config.vocab_size = vocab.len();
    }

    let variant = model_config.variant;
    let conditioned = variant.enc_word_topics()
        || variant.enc_doc_topic_product()
        || variant.dec_doc_topic();
    let topic_model = match (&a.topics, conditioned) {
        (Some(path), true) => {
            require_exists(path, "topic model")?;
            let model = TopicModel::load(path)?;
            if model.topics != model_config.f_prime {
                info!(
                    "sizing topic embedding width to the artifact: {} -> {}",
                    model_config.f_prime, model.topics
                );
                model_config.f_prime = model.topics;
            }
            if model.vocab_size < vocab.len() {
                return Err(CliError::Data(format!(
                    "topic model covers {} words but the vocabulary has {}",
                    model.vocab_size,
                    vocab.len()
                )));
            }
            Some(model)
        }
        (None, true) => {
            return Err(CliError::Usage(format!(
                "variant {} is topic-conditioned: pass --topics PATH",
                variant.name()
            )));
        }
        (_, false) => None,
    };

    let stopwords = stopword_ids(&train_docs, &vocab);
    let topics = topic_model.as_ref().map(|m| (m, &stopwords));
    let train_pairs = build_pairs(&train_docs, &vocab, topics)?;
    let val_pairs = build_pairs(&val_docs, &vocab, topics)?;

    let state = train(&model_config, &config.trainer, &train_pairs, &val_pairs, Some(&a.out_dir))?;
    state.params.save(&a.out_dir.join("model.ckpt"))?;
    let resolved = PipelineConfig { model: model_config, ..config.clone() };
    fs::write(
        a.out_dir.join("config.json"),
        serde_json::to_string_pretty(&resolved)?,
    )?;
    let last = state.history.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} pairs; validation perplexity {:.4}; artifacts in {}",
        state.history.len(),
        train_pairs.len(),
        last.val_ppl,
        a.out_dir.display()
    );
    Ok(())
}

#[derive(Deserialize)]
struct InputRecord {
    id: String,
    document: DocText,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DocText {
    Text(String),
    Sentences(Vec<String>),
}

#[derive(Serialize, Deserialize)]
struct OutputRecord {
    id: String,
    summary: String,
}

fn read_jsonl_values<R: BufRead, T: serde::de::DeserializeOwned>(
    reader: R,
    what: &str,
) -> Result<Vec<T>, CliError> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| CliError::Data(format!("bad {what} record at line {}: {e}", idx + 1)))?;
        records.push(record);
    }
    Ok(records)
}

fn cmd_summarize(a: &SummarizeArgs) -> Result<(), CliError> {
    require_exists(&a.ckpt, "checkpoint")?;
    require_exists(&a.vocab, "vocabulary")?;
    if let Some(t) = &a.topics {
        require_exists(t, "topic model")?;
    }
    let mut beam = BeamConfig {
        beam: a.beam,
        length_normalize: a.length_normalize,
        ..BeamConfig::default()
    };
    if a.beam == 0 {
        return Err(CliError::Usage("--beam must be at least 1".into()));
    }
    if let Some(cap) = a.max_len {
        if cap == 0 {
            return Err(CliError::Usage("--max-len must be at least 1".into()));
        }
        beam.max_len = cap;
    }
    let summarizer = Summarizer::from_files(&a.ckpt, &a.vocab, a.topics.as_deref(), beam)?;

    let records: Vec<InputRecord> = match &a.input {
        Some(path) => {
            require_exists(path, "input")?;
            read_jsonl_values(BufReader::new(File::open(path)?), "input")?
        }
        None => read_jsonl_values(io::stdin().lock(), "input")?,
    };
    let mut out: Box<dyn Write> = match &a.output {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(io::stdout().lock()),
    };
    for record in records {
        let summary = match record.document {
            DocText::Text(text) => summarizer.summarize(&text),
            DocText::Sentences(sents) => {
                let tokens: Vec<String> =
                    sents.iter().flat_map(|s| tokenize(s)).collect();
                summarizer.summarize_tokens(&tokens)
            }
        };
        let summary = match summary {
            Ok(s) => s,
            Err(InferError::EmptySource) => {
                return Err(CliError::Data(format!("document {} has no source tokens", record.id)));
            }
            Err(e) => return Err(e.into()),
        };
        let line = serde_json::to_string(&OutputRecord { id: record.id, summary })?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    require_exists(&a.outputs, "outputs")?;
    let records: Vec<OutputRecord> =
        read_jsonl_values(BufReader::new(File::open(&a.outputs)?), "output")?;
    let docs = load_docs(&a.refs)?;

    let mut outputs = BTreeMap::new();
    for record in records {
        if outputs.insert(record.id.clone(), tokenize(&record.summary)).is_some() {
            return Err(CliError::Data(format!("duplicate output id {}", record.id)));
        }
    }
    let mut refs = BTreeMap::new();
    let mut sources = BTreeMap::new();
    for doc in &docs {
        refs.insert(doc.id.clone(), doc.summary.clone());
        sources.insert(doc.id.clone(), doc.body_tokens());
    }
    let report = evaluate_system(&outputs, &refs, &sources, a.stemmed)?;
    print!("{}", report.render_text(&a.name));
    if let Some(path) = &a.out {
        fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

/// Corpus statistics alongside gold-summary novelty and the extractive
/// baselines scored against the gold summaries.
#[derive(Debug, Serialize, Deserialize)]
pub struct CorpusAnalysis {
    pub documents: usize,
    pub avg_document_tokens: f64,
    pub avg_document_sentences: f64,
    pub avg_summary_tokens: f64,
    pub gold_novelty_pct: [f64; 4],
    pub systems: BTreeMap<String, SystemReport>,
}

impl CorpusAnalysis {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("documents: {}\n", self.documents));
        out.push_str(&format!(
            "avg document: {:.2} tokens in {:.2} sentences\n",
            self.avg_document_tokens, self.avg_document_sentences
        ));
        out.push_str(&format!("avg summary: {:.2} tokens\n", self.avg_summary_tokens));
        let n = &self.gold_novelty_pct;
        out.push_str(&format!(
            "gold novel n-grams (%): 1: {:.2}  2: {:.2}  3: {:.2}  4: {:.2}\n",
            n[0], n[1], n[2], n[3]
        ));
        out.push_str(&format!(
            "\n{:<12} {:>8} {:>8} {:>8} {:>10}\n",
            "system", "R1-F1", "R2-F1", "RL-F1", "novel-1(%)"
        ));
        for (name, report) in &self.systems {
            out.push_str(&format!(
                "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>10.2}\n",
                name,
                report.rouge.r1.f1,
                report.rouge.r2.f1,
                report.rouge.rl.f1,
                report.novelty.pct_novel[0]
            ));
        }
        out
    }
}

fn analyze_corpus_inner(docs: &[Document], seed: u64) -> Result<CorpusAnalysis, CliError> {
    if docs.is_empty() {
        return Err(CliError::Data("corpus has no documents".into()));
    }
    let mut refs = BTreeMap::new();
    let mut sources = BTreeMap::new();
    for doc in docs {
        refs.insert(doc.id.clone(), doc.summary.clone());
        sources.insert(doc.id.clone(), doc.body_tokens());
    }

    let mut lead_out = BTreeMap::new();
    let mut oracle_out = BTreeMap::new();
    let mut random_out = BTreeMap::new();
    for (i, doc) in docs.iter().enumerate() {
        lead_out.insert(doc.id.clone(), lead(doc)?);
        oracle_out.insert(doc.id.clone(), ext_oracle(doc, &doc.summary)?.0);
        random_out.insert(doc.id.clone(), random_sentence(doc, seed.wrapping_add(i as u64))?);
    }

    let gold = evaluate_system(&refs, &refs, &sources, false)?;
    let mut systems = BTreeMap::new();
    systems.insert("lead".to_string(), evaluate_system(&lead_out, &refs, &sources, false)?);
    systems.insert(
        "ext-oracle".to_string(),
        evaluate_system(&oracle_out, &refs, &sources, false)?,
    );
    systems.insert(
        "random".to_string(),
        evaluate_system(&random_out, &refs, &sources, false)?,
    );

    let n = docs.len() as f64;
    let doc_tokens: usize = docs.iter().map(|d| d.body_token_count()).sum();
    let doc_sentences: usize = docs.iter().map(|d| d.sentences.len()).sum();
    Ok(CorpusAnalysis {
        documents: docs.len(),
        avg_document_tokens: doc_tokens as f64 / n,
        avg_document_sentences: doc_sentences as f64 / n,
        avg_summary_tokens: gold.mean_output_tokens,
        gold_novelty_pct: gold.novelty.pct_novel,
        systems,
    })
}

fn cmd_analyze(a: &AnalyzeArgs, config: &PipelineConfig) -> Result<(), CliError> {
    let docs = load_docs(&a.corpus)?;
    let analysis = analyze_corpus_inner(&docs, config.seed)?;
    print!("{}", analysis.render_text());
    if let Some(path) = &a.out {
        fs::write(path, serde_json::to_string_pretty(&analysis)?)?;
    }
    Ok(())
}

fn load_docs(path: &Path) -> Result<Vec<Document>, CliError> {
    require_exists(path, "corpus")?;
    let docs = load_jsonl(path)?;
    if docs.is_empty() {
        return Err(CliError::Data(format!("no usable documents in {}", path.display())));
    }
    Ok(docs)
}

fn load_vocab(path: &Path) -> Result<Vocabulary, CliError> {
    require_exists(path, "vocabulary")?;
    Ok(Vocabulary::load(path)?)
}
