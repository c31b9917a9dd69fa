//! Evaluation metrics over token sequences.
//!
//! All metrics see pre-indexed tokens, never strings, so they are
//! invariant under consistent vocabulary re-indexing. Formulas:
//!
//! * BLEU-4: geometric mean of clipped 1..4-gram precisions times the
//!   brevity penalty; zero counts are smoothed with epsilon `1e-9`.
//! * ROUGE-L: LCS-based F-score with `beta = 1.2`,
//!   `F = (1 + b^2) R P / (R + b^2 P)`.
//! * CIDEr: TF-IDF n-gram (1..4) cosine similarity, averaged over n and
//!   references, scaled by 10; `IDF = ln(corpus size / doc frequency)`.
//! * METEOR-lite: exact-match unigram alignment maximizing matches and
//!   then minimizing chunks, `F = 10 P R / (R + 9 P)`,
//!   `penalty = 0.5 (chunks / matches)^3`, score `F (1 - penalty)`.
//!   The synonym and stemming stages of full METEOR are deliberately
//!   absent; matching is exact token equality.
//! * Diversity: number of distinct token sequences.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use thiserror::Error;

pub const BLEU_EPSILON: f64 = 1e-9;
pub const ROUGE_BETA: f64 = 1.2;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate corpus: {0}")]
    DegenerateCorpus(String),
}

/// Mean and population standard deviation of `|target - generated|`.
pub fn entropy_error_stats(pairs: &[(f64, f64)]) -> Result<(f64, f64), MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Domain(
            "entropy error statistics need at least one pair".into(),
        ));
    }
    let errors: Vec<f64> = pairs.iter().map(|(t, g)| (t - g).abs()).collect();
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut counts: HashMap<&[u32], usize> = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU-4 of a candidate against one or more references.
pub fn bleu4(candidate: &[u32], references: &[&[u32]]) -> Result<f64, MetricsError> {
    if references.is_empty() {
        return Err(MetricsError::Domain("bleu needs at least one reference".into()));
    }
    if candidate.is_empty() {
        return Err(MetricsError::Domain("bleu candidate is empty".into()));
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand_counts = ngram_counts(candidate, n);
        let total: usize = cand_counts.values().sum();
        let p = if total == 0 {
            BLEU_EPSILON
        } else {
            let mut clipped = 0usize;
            for (gram, &count) in &cand_counts {
                let max_ref = references
                    .iter()
                    .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                clipped += count.min(max_ref);
            }
            if clipped == 0 {
                BLEU_EPSILON / total as f64
            } else {
                clipped as f64 / total as f64
            }
        };
        log_sum += p.ln();
    }
    let c = candidate.len() as f64;
    let r = closest_reference_length(candidate.len(), references) as f64;
    let brevity = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(brevity * (log_sum / 4.0).exp())
}

/// Reference length closest to the candidate's; ties favor the shorter.
fn closest_reference_length(cand_len: usize, references: &[&[u32]]) -> usize {
    let mut best = references[0].len();
    for r in references.iter().skip(1) {
        let len = r.len();
        let d_new = (len as i64 - cand_len as i64).abs();
        let d_best = (best as i64 - cand_len as i64).abs();
        if d_new < d_best || (d_new == d_best && len < best) {
            best = len;
        }
    }
    best
}

fn lcs_length(a: &[u32], b: &[u32]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-score with `beta = 1.2`; zero when the sequences share no
/// common subsequence.
pub fn rouge_l(candidate: &[u32], reference: &[u32]) -> Result<f64, MetricsError> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(MetricsError::Domain("rouge inputs must be nonempty".into()));
    }
    let lcs = lcs_length(candidate, reference) as f64;
    if lcs == 0.0 {
        return Ok(0.0);
    }
    let recall = lcs / reference.len() as f64;
    let precision = lcs / candidate.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    Ok((1.0 + b2) * recall * precision / (recall + b2 * precision))
}

/// One evaluation unit for CIDEr: a candidate with the references of
/// its own image.
#[derive(Debug, Clone)]
pub struct CiderEntry {
    pub candidate: Vec<u32>,
    pub references: Vec<Vec<u32>>,
}

/// Corpus CIDEr: mean over entries of the IDF-weighted n-gram cosine
/// similarity, scaled by 10. The corpus must hold at least two entries;
/// with one, every document frequency equals the corpus size and all
/// IDF weights vanish.
pub fn cider(corpus: &[CiderEntry]) -> Result<f64, MetricsError> {
    if corpus.len() < 2 {
        return Err(MetricsError::DegenerateCorpus(format!(
            "cider needs at least 2 images, got {}",
            corpus.len()
        )));
    }
    for entry in corpus {
        if entry.candidate.is_empty() || entry.references.is_empty() {
            return Err(MetricsError::Domain(
                "cider entries need a candidate and at least one reference".into(),
            ));
        }
    }
    let n_images = corpus.len() as f64;
    let mut total = 0.0;
    // Ordered maps keep every floating-point accumulation in a fixed
    // order, so repeated runs produce bit-identical scores.
    for n in 1..=4 {
        // Document frequency over images: an n-gram counts once per
        // image whose reference set contains it.
        let mut df: BTreeMap<Vec<u32>, usize> = BTreeMap::new();
        for entry in corpus {
            let mut seen: HashSet<Vec<u32>> = HashSet::new();
            for r in &entry.references {
                for w in r.windows(n) {
                    seen.insert(w.to_vec());
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        for entry in corpus {
            let cand_vec = tf_idf_vector(&entry.candidate, n, &df, n_images);
            let cand_norm = cand_vec.values().map(|v| v * v).sum::<f64>().sqrt();
            let mut sim_sum = 0.0;
            for r in &entry.references {
                let ref_vec = tf_idf_vector(r, n, &df, n_images);
                let ref_norm = ref_vec.values().map(|v| v * v).sum::<f64>().sqrt();
                if cand_norm == 0.0 || ref_norm == 0.0 {
                    continue;
                }
                let mut dot = 0.0;
                for (g, &cv) in &cand_vec {
                    if let Some(&rv) = ref_vec.get(g) {
                        dot += cv * rv;
                    }
                }
                sim_sum += dot / (cand_norm * ref_norm);
            }
            total += sim_sum / entry.references.len() as f64;
        }
    }
    Ok(10.0 * total / (4.0 * n_images))
}

fn tf_idf_vector<'a>(
    tokens: &'a [u32],
    n: usize,
    df: &BTreeMap<Vec<u32>, usize>,
    n_images: f64,
) -> BTreeMap<&'a [u32], f64> {
    let mut counts: BTreeMap<&[u32], usize> = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
        .into_iter()
        .map(|(g, c)| {
            let idf = match df.get(g) {
                Some(&d) if d > 0 => (n_images / d as f64).ln(),
                _ => n_images.ln(),
            };
            (g, c as f64 * idf)
        })
        .collect()
}

/// Exact-match alignment statistics: maximum unigram matches, and the
/// minimum chunk count among alignments achieving that maximum.
pub fn meteor_alignment(candidate: &[u32], reference: &[u32]) -> (usize, usize) {
    let mut cand_counts: HashMap<u32, usize> = HashMap::new();
    for &t in candidate {
        *cand_counts.entry(t).or_insert(0) += 1;
    }
    let mut ref_counts: HashMap<u32, usize> = HashMap::new();
    for &t in reference {
        *ref_counts.entry(t).or_insert(0) += 1;
    }
    let matches: usize = cand_counts
        .iter()
        .map(|(t, &c)| c.min(ref_counts.get(t).copied().unwrap_or(0)))
        .sum();
    if matches == 0 {
        return (0, 0);
    }

    // Depth-first search over injective alignments of candidate
    // positions to equal-token reference positions, tracking how many
    // matches remain reachable so non-maximal branches are cut early.
    struct Search<'a> {
        candidate: &'a [u32],
        reference: &'a [u32],
        target_matches: usize,
        best_chunks: usize,
        memo: HashMap<(usize, u64, usize, usize), usize>,
    }
    const NO_PREV: usize = usize::MAX;
    impl Search<'_> {
        /// Max matches achievable from candidate position `i` given the
        /// used-reference mask.
        fn remaining_possible(&self, i: usize, used: u64) -> usize {
            let mut avail: HashMap<u32, usize> = HashMap::new();
            for (j, &t) in self.reference.iter().enumerate() {
                if used & (1 << j) == 0 {
                    *avail.entry(t).or_insert(0) += 1;
                }
            }
            let mut need: HashMap<u32, usize> = HashMap::new();
            for &t in &self.candidate[i..] {
                *need.entry(t).or_insert(0) += 1;
            }
            need.iter()
                .map(|(t, &c)| c.min(avail.get(t).copied().unwrap_or(0)))
                .sum()
        }

        fn go(&mut self, i: usize, used: u64, done: usize, prev: usize, chunks: usize) {
            if done + self.remaining_possible(i, used) < self.target_matches {
                return;
            }
            if chunks >= self.best_chunks {
                return;
            }
            if done == self.target_matches {
                self.best_chunks = chunks;
                return;
            }
            let key = (i, used, prev, done);
            if let Some(&seen) = self.memo.get(&key) {
                if seen <= chunks {
                    return;
                }
            }
            self.memo.insert(key, chunks);
            // Leave position i unmatched.
            self.go(i + 1, used, done, NO_PREV, chunks);
            // Or match it to any unused reference slot of equal token.
            for j in 0..self.reference.len() {
                if used & (1 << j) == 0 && self.reference[j] == self.candidate[i] {
                    let adjacent = prev != NO_PREV && j == prev + 1;
                    let next_chunks = if adjacent { chunks } else { chunks + 1 };
                    self.go(i + 1, used | (1 << j), done + 1, j, next_chunks);
                }
            }
        }
    }
    assert!(reference.len() <= 64, "reference too long for alignment search");
    let mut search = Search {
        candidate,
        reference,
        target_matches: matches,
        best_chunks: matches + 1,
        memo: HashMap::new(),
    };
    search.go(0, 0, 0, NO_PREV, 0);
    (matches, search.best_chunks)
}

/// Exact-match METEOR variant; see the module docs for the formula.
pub fn meteor_lite(candidate: &[u32], reference: &[u32]) -> Result<f64, MetricsError> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(MetricsError::Domain("meteor inputs must be nonempty".into()));
    }
    let (matches, chunks) = meteor_alignment(candidate, reference);
    if matches == 0 {
        return Ok(0.0);
    }
    let precision = matches as f64 / candidate.len() as f64;
    let recall = matches as f64 / reference.len() as f64;
    let f_mean = 10.0 * precision * recall / (recall + 9.0 * precision);
    let ratio = chunks as f64 / matches as f64;
    let penalty = 0.5 * ratio * ratio * ratio;
    Ok(f_mean * (1.0 - penalty))
}

/// Number of distinct token sequences.
pub fn diversity(questions: &[Vec<u32>]) -> usize {
    let set: HashSet<&Vec<u32>> = questions.iter().collect();
    set.len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfigInfo {
    pub rouge_beta: f64,
    pub bleu_epsilon: f64,
    pub meteor: String,
    pub similarity_reference: String,
}

impl Default for MetricConfigInfo {
    fn default() -> Self {
        Self {
            rouge_beta: ROUGE_BETA,
            bleu_epsilon: BLEU_EPSILON,
            meteor: "exact-match variant without synonym or stemming stages".into(),
            similarity_reference: "source question".into(),
        }
    }
}

/// Aggregate evaluation results over one sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean_abs_entropy_error: f64,
    pub std_abs_entropy_error: f64,
    pub bleu4: f64,
    pub cider: f64,
    pub meteor_lite: f64,
    pub rouge_l: f64,
    pub diversity: usize,
    pub n_samples: usize,
    pub metric_config: MetricConfigInfo,
}

/// Build a report from completed samples. Similarity scores compare
/// each generated question against its source question (end tokens
/// stripped); entropy errors compare target against generated entropy.
pub fn compute_report(
    samples: &[crate::training::RephraseSample],
) -> Result<MetricsReport, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Domain("no samples to report on".into()));
    }
    let mut pairs = Vec::with_capacity(samples.len());
    let mut bleu_sum = 0.0;
    let mut rouge_sum = 0.0;
    let mut meteor_sum = 0.0;
    let mut cider_entries = Vec::with_capacity(samples.len());
    let mut generated_sequences = Vec::with_capacity(samples.len());
    for s in samples {
        let (t, g) = match (s.target_entropy, s.generated_entropy) {
            (Some(t), Some(g)) => (t, g),
            _ => {
                return Err(MetricsError::Domain(
                    "sample is missing target or generated entropy".into(),
                ))
            }
        };
        pairs.push((t, g));
        let generated = s.generated.as_ref().ok_or_else(|| {
            MetricsError::Domain("sample is missing its generated question".into())
        })?;
        let cand = generated.content();
        let source = s.source.content();
        let cand = if cand.is_empty() { &generated.tokens[..] } else { cand };
        let source = if source.is_empty() { &s.source.tokens[..] } else { source };
        bleu_sum += bleu4(cand, &[source])?;
        rouge_sum += rouge_l(cand, source)?;
        meteor_sum += meteor_lite(cand, source)?;
        cider_entries.push(CiderEntry {
            candidate: cand.to_vec(),
            references: vec![source.to_vec()],
        });
        generated_sequences.push(generated.tokens.clone());
    }
    let (mean, std) = entropy_error_stats(&pairs)?;
    let n = samples.len() as f64;
    Ok(MetricsReport {
        mean_abs_entropy_error: mean,
        std_abs_entropy_error: std,
        bleu4: bleu_sum / n,
        cider: cider(&cider_entries)?,
        meteor_lite: meteor_sum / n,
        rouge_l: rouge_sum / n,
        diversity: diversity(&generated_sequences),
        n_samples: samples.len(),
        metric_config: MetricConfigInfo::default(),
    })
}
