//! Summary scoring: ROUGE-1/2/L, the LEAD / RANDOM / EXT-ORACLE extractive
//! baselines, novel n-gram analysis, and whole-corpus system reports.

mod porter;

pub use porter::stem as porter_stem;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Document;
use crate::threads;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reference summary has no tokens")]
    EmptyReference,
    #[error("document has no sentences")]
    EmptyDocument,
    #[error("no reference summary for output id {0:?}")]
    MissingReference(String),
    #[error("no source document for output id {0:?}")]
    MissingSource(String),
    #[error("no system output for reference id {0:?}")]
    MissingOutput(String),
}

/// Precision, recall, and their harmonic mean for one overlap statistic.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_overlap(overlap: f64, candidate_units: f64, reference_units: f64) -> Self {
        let precision = if candidate_units > 0.0 { overlap / candidate_units } else { 0.0 };
        let recall = if reference_units > 0.0 { overlap / reference_units } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        RougeScore { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScores {
    pub r1: RougeScore,
    pub r2: RougeScore,
    pub rl: RougeScore,
}

impl RougeScores {
    /// The single objective used to rank sentences: mean of the three F1s.
    pub fn mean_f1(&self) -> f64 {
        (self.r1.f1 + self.r2.f1 + self.rl.f1) / 3.0
    }
}

/// Percentage of summary n-gram types absent from the source, n = 1..=4.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoveltyReport {
    pub pct_novel: [f64; 4],
}

impl NoveltyReport {
    /// Novelty percentage for n-gram order `n` in 1..=4.
    pub fn for_n(&self, n: usize) -> f64 {
        self.pct_novel[n - 1]
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u32> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

fn ngram_score(candidate: &[String], reference: &[String], n: usize) -> RougeScore {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let overlap: u64 = cand
        .iter()
        .map(|(gram, &c)| refs.get(gram).map_or(0, |&r| c.min(r) as u64))
        .sum();
    let cand_total = candidate.len().saturating_sub(n - 1) as f64;
    let ref_total = reference.len().saturating_sub(n - 1) as f64;
    RougeScore::from_overlap(overlap as f64, cand_total, ref_total)
}

/// Longest common subsequence length via a two-row dynamic program.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-1/2/L of a candidate against a single reference, unstemmed.
pub fn rouge(candidate: &[String], reference: &[String]) -> Result<RougeScores, EvalError> {
    rouge_with(candidate, reference, false)
}

/// As [`rouge`], optionally Porter-stemming both sides first.
pub fn rouge_with(
    candidate: &[String],
    reference: &[String],
    stemmed: bool,
) -> Result<RougeScores, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let stem_all = |tokens: &[String]| tokens.iter().map(|t| porter_stem(t)).collect::<Vec<_>>();
    let (cand_store, ref_store);
    let (cand, refr): (&[String], &[String]) = if stemmed {
        cand_store = stem_all(candidate);
        ref_store = stem_all(reference);
        (&cand_store, &ref_store)
    } else {
        (candidate, reference)
    };
    let lcs = lcs_len(cand, refr) as f64;
    Ok(RougeScores {
        r1: ngram_score(cand, refr, 1),
        r2: ngram_score(cand, refr, 2),
        rl: RougeScore::from_overlap(lcs, cand.len() as f64, refr.len() as f64),
    })
}

/// First sentence of the document.
pub fn lead(doc: &Document) -> Result<Vec<String>, EvalError> {
    doc.sentences.first().cloned().ok_or(EvalError::EmptyDocument)
}

/// Uniformly chosen sentence, deterministic under the seed.
pub fn random_sentence(doc: &Document, seed: u64) -> Result<Vec<String>, EvalError> {
    if doc.sentences.is_empty() {
        return Err(EvalError::EmptyDocument);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(doc.sentences[rng.random_range(0..doc.sentences.len())].clone())
}

/// The document sentence with the best mean ROUGE F1 against the gold
/// summary; ties go to the earliest sentence.
pub fn ext_oracle(doc: &Document, gold: &[String]) -> Result<(Vec<String>, RougeScores), EvalError> {
    if doc.sentences.is_empty() {
        return Err(EvalError::EmptyDocument);
    }
    if gold.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let mut best: Option<(f64, usize, RougeScores)> = None;
    for (i, sentence) in doc.sentences.iter().enumerate() {
        let scores = rouge(sentence, gold)?;
        let objective = scores.mean_f1();
        if best.as_ref().is_none_or(|(b, _, _)| objective > *b) {
            best = Some((objective, i, scores));
        }
    }
    let (_, i, scores) = best.expect("at least one sentence");
    Ok((doc.sentences[i].clone(), scores))
}

/// (novel types, total types) per n-gram order 1..=4.
pub fn novelty_counts(summary: &[String], doc_tokens: &[String]) -> [(u64, u64); 4] {
    let mut out = [(0, 0); 4];
    for (slot, n) in out.iter_mut().zip(1usize..) {
        if summary.len() < n {
            continue;
        }
        let seen: HashSet<&[String]> = if doc_tokens.len() >= n {
            doc_tokens.windows(n).collect()
        } else {
            HashSet::new()
        };
        let types: HashSet<&[String]> = summary.windows(n).collect();
        let novel = types.iter().filter(|g| !seen.contains(**g)).count() as u64;
        *slot = (novel, types.len() as u64);
    }
    out
}

/// Share of summary n-gram types that never occur in the source document.
pub fn novelty(summary: &[String], doc_tokens: &[String]) -> NoveltyReport {
    let counts = novelty_counts(summary, doc_tokens);
    let mut pct = [0.0; 4];
    for (p, (novel, total)) in pct.iter_mut().zip(counts) {
        if total > 0 {
            *p = 100.0 * novel as f64 / total as f64;
        }
    }
    NoveltyReport { pct_novel: pct }
}

fn pool_novelty(sums: &[(u64, u64); 4]) -> NoveltyReport {
    let mut pct = [0.0; 4];
    for (p, (novel, total)) in pct.iter_mut().zip(sums) {
        if *total > 0 {
            *p = 100.0 * *novel as f64 / *total as f64;
        }
    }
    NoveltyReport { pct_novel: pct }
}

/// Corpus-level report for one system: per-document ROUGE means, pooled
/// novelty against the sources, and mean output length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub documents: usize,
    pub rouge: RougeScores,
    pub novelty: NoveltyReport,
    pub mean_output_tokens: f64,
}

impl SystemReport {
    /// Aligned plain-text rendering of the report.
    pub fn render_text(&self, name: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "system: {name} ({} documents)", self.documents);
        let _ = writeln!(out, "{:<8} {:>9} {:>9} {:>9}", "metric", "P", "R", "F1");
        for (label, s) in
            [("ROUGE-1", self.rouge.r1), ("ROUGE-2", self.rouge.r2), ("ROUGE-L", self.rouge.rl)]
        {
            let _ = writeln!(
                out,
                "{label:<8} {:>9.4} {:>9.4} {:>9.4}",
                s.precision, s.recall, s.f1
            );
        }
        let n = &self.novelty.pct_novel;
        let _ = writeln!(
            out,
            "novel n-grams (%): 1: {:.2}  2: {:.2}  3: {:.2}  4: {:.2}",
            n[0], n[1], n[2], n[3]
        );
        let _ = writeln!(out, "mean output length: {:.2} tokens", self.mean_output_tokens);
        out
    }
}

/// Scores one system over a corpus. Keys of all three maps must coincide;
/// documents are scored in parallel and reduced in sorted-id order.
pub fn evaluate_system(
    outputs: &BTreeMap<String, Vec<String>>,
    refs: &BTreeMap<String, Vec<String>>,
    sources: &BTreeMap<String, Vec<String>>,
    stemmed: bool,
) -> Result<SystemReport, EvalError> {
    for id in outputs.keys() {
        if !refs.contains_key(id) {
            return Err(EvalError::MissingReference(id.clone()));
        }
        if !sources.contains_key(id) {
            return Err(EvalError::MissingSource(id.clone()));
        }
    }
    if let Some(id) = refs.keys().find(|id| !outputs.contains_key(*id)) {
        return Err(EvalError::MissingOutput(id.clone()));
    }
    type ScoredDoc = (RougeScores, [(u64, u64); 4], usize);
    let ids: Vec<&String> = outputs.keys().collect();
    let scored: Result<Vec<ScoredDoc>, EvalError> =
        threads::pool().install(|| {
            ids.par_iter()
                .map(|id| {
                    let output = &outputs[*id];
                    let scores = rouge_with(output, &refs[*id], stemmed)?;
                    Ok((scores, novelty_counts(output, &sources[*id]), output.len()))
                })
                .collect()
        });
    let scored = scored?;
    let n = scored.len();
    let mut rouge_sum = RougeScores::default();
    let mut novelty_sum = [(0u64, 0u64); 4];
    let mut token_sum = 0usize;
    for (scores, novel, len) in &scored {
        for (acc, s) in [
            (&mut rouge_sum.r1, scores.r1),
            (&mut rouge_sum.r2, scores.r2),
            (&mut rouge_sum.rl, scores.rl),
        ] {
            acc.precision += s.precision;
            acc.recall += s.recall;
            acc.f1 += s.f1;
        }
        for (acc, x) in novelty_sum.iter_mut().zip(novel) {
            acc.0 += x.0;
            acc.1 += x.1;
        }
        token_sum += len;
    }
    if n > 0 {
        for s in [&mut rouge_sum.r1, &mut rouge_sum.r2, &mut rouge_sum.rl] {
            s.precision /= n as f64;
            s.recall /= n as f64;
            s.f1 /= n as f64;
        }
    }
    Ok(SystemReport {
        documents: n,
        rouge: rouge_sum,
        novelty: pool_novelty(&novelty_sum),
        mean_output_tokens: if n > 0 { token_sum as f64 / n as f64 } else { 0.0 },
    })
}
