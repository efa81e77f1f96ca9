//! Caption metrics (BLEU-1..4, CIDEr, ROUGE-L), a reference-free alignment
//! score, the linear-probe harness and per-region evaluation reports.
//!
//! Metrics operate on token lists produced by [`tokenize`], which is the
//! tokenizer's own normalisation, so hypotheses and references are split
//! identically.

mod probe;
mod report;

use std::collections::HashMap;

pub use probe::{auc, encoder_features, linear_probe, ProbeConfig, ProbeReport};
pub use report::{evaluate, EvalReport, MetricRow, RegionResult, ScoredExample};

use crate::autograd::{Graph, Real};
use crate::error::{Error, Result};
use crate::model::Model;

/// Maximum n-gram order for BLEU and CIDEr.
pub const MAX_N: usize = 4;
/// Recall weight of the ROUGE-L F-measure (β²).
pub const ROUGE_BETA_SQ: f64 = 1.2;

pub fn tokenize(text: &str) -> Vec<String> {
    crate::tokenizer::normalize(text)
}

type Gram<'a> = &'a [String];

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Gram<'_>, usize> {
    let mut out = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

fn check_corpus(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<()> {
    if cands.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if cands.len() != refs.len() {
        return Err(Error::InvalidArgument(format!("{} candidates but {} reference sets", cands.len(), refs.len())));
    }
    if refs.iter().any(|r| r.is_empty()) {
        return Err(Error::InvalidArgument("every candidate needs at least one reference".into()));
    }
    Ok(())
}

/// Corpus BLEU-1 through BLEU-`max_n` (uniform weights, no smoothing).
/// The brevity penalty uses, per candidate, the reference length closest
/// to the candidate's (the shorter on ties).
pub fn bleu_scores(cands: &[Vec<String>], refs: &[Vec<Vec<String>>], max_n: usize) -> Result<Vec<f64>> {
    check_corpus(cands, refs)?;
    if max_n == 0 {
        return Err(Error::InvalidArgument("BLEU order must be at least 1".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, rs) in cands.iter().zip(refs) {
        cand_len += c.len();
        ref_len += rs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(c.len()), l))
            .expect("non-empty reference set");
        for n in 1..=max_n {
            let cc = ngram_counts(c, n);
            let mut max_ref: HashMap<Gram<'_>, usize> = HashMap::new();
            for r in rs {
                for (g, k) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &cc {
                matched[n - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    let bp = if cand_len == 0 {
        0.0
    } else if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let mut out = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    for n in 0..max_n {
        if matched[n] == 0 || total[n] == 0 {
            log_sum = f64::NEG_INFINITY;
        } else {
            log_sum += (matched[n] as f64 / total[n] as f64).ln();
        }
        out.push(if log_sum.is_finite() { bp * (log_sum / (n + 1) as f64).exp() } else { 0.0 });
    }
    Ok(out)
}

/// Corpus BLEU-`n`.
pub fn bleu(cands: &[Vec<String>], refs: &[Vec<Vec<String>>], n: usize) -> Result<f64> {
    Ok(bleu_scores(cands, refs, n)?[n - 1])
}

/// TF-IDF vector of one text for one n-gram order.
fn tfidf<'a>(tokens: &'a [String], n: usize, df: &HashMap<Gram<'_>, usize>, log_n: f64) -> HashMap<Gram<'a>, f64> {
    ngram_counts(tokens, n)
        .into_iter()
        .map(|(g, k)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (g, k as f64 * (log_n - d.ln()))
        })
        .collect()
}

fn cosine(a: &HashMap<Gram<'_>, f64>, b: &HashMap<Gram<'_>, f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Per-candidate CIDEr (plain, not CIDEr-D). Document frequencies count
/// each example's reference set once; scores are the mean over n = 1..4 of
/// the mean cosine to each reference, times 10.
pub fn cider_scores(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<Vec<f64>> {
    check_corpus(cands, refs)?;
    let log_n = (cands.len() as f64).ln();
    let mut scores = vec![0.0; cands.len()];
    for n in 1..=MAX_N {
        let mut df: HashMap<Gram<'_>, usize> = HashMap::new();
        for rs in refs {
            let mut seen: Vec<Gram<'_>> = rs.iter().flat_map(|r| ngram_counts(r, n).into_keys()).collect();
            seen.sort_unstable();
            seen.dedup();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        for (i, (c, rs)) in cands.iter().zip(refs).enumerate() {
            let vc = tfidf(c, n, &df, log_n);
            let sim: f64 = rs.iter().map(|r| cosine(&vc, &tfidf(r, n, &df, log_n))).sum::<f64>() / rs.len() as f64;
            scores[i] += sim;
        }
    }
    Ok(scores.into_iter().map(|s| 10.0 * s / MAX_N as f64).collect())
}

/// Corpus CIDEr: mean of [`cider_scores`].
pub fn cider(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<f64> {
    let s = cider_scores(cands, refs)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure of one candidate: precision over the candidate length,
/// recall over the reference length, best reference wins.
pub fn rouge_l(cand: &[String], refs: &[Vec<String>]) -> f64 {
    refs.iter()
        .map(|r| {
            let l = lcs(cand, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / cand.len() as f64;
            let rc = l / r.len() as f64;
            (1.0 + ROUGE_BETA_SQ) * p * rc / (rc + ROUGE_BETA_SQ * p)
        })
        .fold(0.0, f64::max)
}

/// Mean ROUGE-L over a corpus.
pub fn rouge_l_corpus(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<f64> {
    check_corpus(cands, refs)?;
    Ok(cands.iter().zip(refs).map(|(c, r)| rouge_l(c, r)).sum::<f64>() / cands.len() as f64)
}

/// Cosine between each example's pooled image embedding and the embedding
/// of `reports[i]` (full token sequences, BOS … EOS), using the trained
/// alignment heads. `pixels` holds `reports.len()` examples.
pub fn alignment_score<F: Real>(model: &Model<F>, pixels: ndarray::Array2<F>, reports: &[&[usize]]) -> Result<Vec<f64>> {
    if !model.has_ipg() {
        return Err(Error::NoAlignmentHeads);
    }
    let mut sess = model.session(Graph::new());
    let features = sess.encode_image(pixels, reports.len())?;
    let iv = sess.pool_image(features)?;
    let tv = sess.embed_report(reports)?;
    let (a, b) = (sess.g.value(iv), sess.g.value(tv));
    Ok(a.rows()
        .into_iter()
        .zip(b.rows())
        .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p.as_f64() * q.as_f64()).sum::<f64>().clamp(-1.0, 1.0))
        .collect())
}

#[cfg(test)]
mod tests;
