//! Brute-force reference implementations of the evaluation metrics.
//!
//! These are written from the metric definitions directly, favoring
//! obviousness over speed, and deliberately share no code with the
//! library implementations they check.

use std::collections::BTreeSet;

fn ngrams(tokens: &[u32], n: usize) -> Vec<Vec<u32>> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n)
        .map(|i| tokens[i..i + n].to_vec())
        .collect()
}

fn count_of(grams: &[Vec<u32>], gram: &[u32]) -> usize {
    grams.iter().filter(|g| g.as_slice() == gram).count()
}

/// Sentence BLEU-4: clipped modified precisions with epsilon smoothing
/// on zero counts, geometric mean, brevity penalty against the closest
/// reference length (ties to the shorter).
pub fn bleu4(candidate: &[u32], references: &[&[u32]]) -> f64 {
    const EPS: f64 = 1e-9;
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand_grams = ngrams(candidate, n);
        let p = if cand_grams.is_empty() {
            EPS
        } else {
            let distinct: BTreeSet<Vec<u32>> = cand_grams.iter().cloned().collect();
            let mut clipped = 0usize;
            for gram in &distinct {
                let in_cand = count_of(&cand_grams, gram);
                let max_ref = references
                    .iter()
                    .map(|r| count_of(&ngrams(r, n), gram))
                    .max()
                    .unwrap_or(0);
                clipped += in_cand.min(max_ref);
            }
            if clipped == 0 {
                EPS / cand_grams.len() as f64
            } else {
                clipped as f64 / cand_grams.len() as f64
            }
        };
        log_sum += p.ln() / 4.0;
    }
    let c = candidate.len() as f64;
    let mut best_len = references[0].len();
    for r in &references[1..] {
        let d = (r.len() as i64 - candidate.len() as i64).abs();
        let best_d = (best_len as i64 - candidate.len() as i64).abs();
        if d < best_d || (d == best_d && r.len() < best_len) {
            best_len = r.len();
        }
    }
    let bp = if c > best_len as f64 {
        1.0
    } else {
        (1.0 - best_len as f64 / c).exp()
    };
    bp * log_sum.exp()
}

/// Longest common subsequence by definition: recursive with a plain
/// memo over index pairs.
fn lcs(a: &[u32], b: &[u32], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
    if i == a.len() || j == b.len() {
        return 0;
    }
    if let Some(v) = memo[i][j] {
        return v;
    }
    let v = if a[i] == b[j] {
        1 + lcs(a, b, i + 1, j + 1, memo)
    } else {
        lcs(a, b, i + 1, j, memo).max(lcs(a, b, i, j + 1, memo))
    };
    memo[i][j] = Some(v);
    v
}

/// ROUGE-L F-score with beta 1.2.
pub fn rouge_l(candidate: &[u32], reference: &[u32]) -> f64 {
    let mut memo = vec![vec![None; reference.len()]; candidate.len()];
    let l = if candidate.is_empty() || reference.is_empty() {
        0
    } else {
        lcs(candidate, reference, 0, 0, &mut memo)
    } as f64;
    if l == 0.0 {
        return 0.0;
    }
    let r = l / reference.len() as f64;
    let p = l / candidate.len() as f64;
    let b2 = 1.2 * 1.2;
    (1.0 + b2) * r * p / (r + b2 * p)
}

/// Exhaustive METEOR alignment: enumerate every injective mapping of
/// candidate positions onto equal-token reference positions, keeping
/// the ones with the most matches and, among those, the fewest chunks.
fn best_alignment(
    candidate: &[u32],
    reference: &[u32],
    i: usize,
    used: &mut Vec<bool>,
    pairs: &mut Vec<(usize, usize)>,
    best: &mut (usize, usize),
) {
    if i == candidate.len() {
        let matches = pairs.len();
        let mut chunks = 0;
        let mut sorted = pairs.clone();
        sorted.sort();
        for (k, &(c, r)) in sorted.iter().enumerate() {
            if k == 0 || sorted[k - 1] != (c - 1, r.wrapping_sub(1)) {
                chunks += 1;
            }
        }
        if matches > best.0 || (matches == best.0 && matches > 0 && chunks < best.1) {
            *best = (matches, chunks);
        }
        return;
    }
    best_alignment(candidate, reference, i + 1, used, pairs, best);
    for j in 0..reference.len() {
        if !used[j] && reference[j] == candidate[i] {
            used[j] = true;
            pairs.push((i, j));
            best_alignment(candidate, reference, i + 1, used, pairs, best);
            pairs.pop();
            used[j] = false;
        }
    }
}

/// Exact-match METEOR variant per the pinned formula.
pub fn meteor_lite(candidate: &[u32], reference: &[u32]) -> f64 {
    let mut best = (0usize, usize::MAX);
    let mut used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    best_alignment(candidate, reference, 0, &mut used, &mut pairs, &mut best);
    let (matches, chunks) = best;
    if matches == 0 {
        return 0.0;
    }
    let p = matches as f64 / candidate.len() as f64;
    let r = matches as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let frag = chunks as f64 / matches as f64;
    f_mean * (1.0 - 0.5 * frag * frag * frag)
}

/// CIDEr over explicit n-gram universes: tf * idf vectors, cosine per
/// reference, averaged over n in 1..=4 and over references, times 10,
/// averaged over the corpus.
pub fn cider(entries: &[(Vec<u32>, Vec<Vec<u32>>)]) -> f64 {
    let n_images = entries.len() as f64;
    let mut total = 0.0;
    for n in 1..=4 {
        // Universe of n-grams seen anywhere.
        let mut universe: BTreeSet<Vec<u32>> = BTreeSet::new();
        for (cand, refs) in entries {
            universe.extend(ngrams(cand, n));
            for r in refs {
                universe.extend(ngrams(r, n));
            }
        }
        let universe: Vec<Vec<u32>> = universe.into_iter().collect();
        let idf: Vec<f64> = universe
            .iter()
            .map(|g| {
                let df = entries
                    .iter()
                    .filter(|(_, refs)| refs.iter().any(|r| count_of(&ngrams(r, n), g) > 0))
                    .count();
                if df == 0 {
                    n_images.ln()
                } else {
                    (n_images / df as f64).ln()
                }
            })
            .collect();
        let vector = |tokens: &[u32]| -> Vec<f64> {
            let grams = ngrams(tokens, n);
            universe
                .iter()
                .zip(&idf)
                .map(|(g, &w)| count_of(&grams, g) as f64 * w)
                .collect()
        };
        for (cand, refs) in entries {
            let cv = vector(cand);
            let cnorm = cv.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut sim = 0.0;
            for r in refs {
                let rv = vector(r);
                let rnorm = rv.iter().map(|v| v * v).sum::<f64>().sqrt();
                if cnorm > 0.0 && rnorm > 0.0 {
                    let dot: f64 = cv.iter().zip(&rv).map(|(a, b)| a * b).sum();
                    sim += dot / (cnorm * rnorm);
                }
            }
            total += sim / refs.len() as f64;
        }
    }
    10.0 * total / (4.0 * n_images)
}

/// Distinct count by sort and dedup.
pub fn diversity(questions: &[Vec<u32>]) -> usize {
    let mut sorted = questions.to_vec();
    sorted.sort();
    sorted.dedup();
    sorted.len()
}
