//! Recall@k and the viewer-distribution diagnostics: local variation,
//! best-viewer perplexity, and viewer-embedding similarity.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::DualEncoder;
use crate::error::{MvrError, Result};
use crate::scoring::{log_sum_exp, score_pair};
use crate::text::{Passage, TrainExample, Vocab};

pub const DEFAULT_KS: [usize; 3] = [5, 20, 100];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub n_queries: usize,
}

/// Fraction of queries with any gold id among the first `k` results, for each `k`.
/// An empty result list counts as a miss.
pub fn recall_at_k(results: &[Vec<String>], gold: &[Vec<String>], ks: &[usize]) -> Result<EvalReport> {
    if results.len() != gold.len() {
        return Err(MvrError::invalid(format!(
            "{} result lists for {} queries",
            results.len(),
            gold.len()
        )));
    }
    if ks.contains(&0) {
        return Err(MvrError::invalid("recall cutoffs must be >= 1"));
    }
    let mut first_hit = Vec::with_capacity(gold.len());
    for (i, (res, g)) in results.iter().zip(gold).enumerate() {
        if g.is_empty() {
            return Err(MvrError::invalid(format!("query {i} has no gold ids")));
        }
        first_hit.push(res.iter().position(|d| g.contains(d)));
    }
    let n = gold.len();
    let recall_at = ks
        .iter()
        .map(|&k| {
            let hits = first_hit.iter().filter(|r| matches!(r, Some(r) if *r < k)).count();
            (k, if n == 0 { 0.0 } else { hits as f64 / n as f64 })
        })
        .collect();
    Ok(EvalReport { recall_at, n_queries: n })
}

/// How individual viewer scores are normalized before computing local variation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreNormalization {
    /// Softmax over the k scores at temperature 1.
    #[default]
    Softmax,
    Raw,
    /// Rescaled to [0, 1]; all-equal scores map to 0.
    MinMax,
}

impl ScoreNormalization {
    pub fn apply(&self, scores: &[f64]) -> Vec<f64> {
        match self {
            ScoreNormalization::Raw => scores.to_vec(),
            ScoreNormalization::Softmax => {
                let lse = log_sum_exp(scores.iter().copied());
                scores.iter().map(|s| (s - lse).exp()).collect()
            }
            ScoreNormalization::MinMax => {
                let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let span = hi - lo;
                scores
                    .iter()
                    .map(|s| if span > 0.0 { (s - lo) / span } else { 0.0 })
                    .collect()
            }
        }
    }
}

/// Max score minus the mean of the other k-1 scores.
pub fn local_variation(scores: &[f64]) -> Result<f64> {
    let k = scores.len();
    if k < 2 {
        return Err(MvrError::invalid(format!("local variation needs k >= 2 scores, got {k}")));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scores.iter().sum();
    Ok(max - (sum - max) / (k - 1) as f64)
}

/// exp(entropy) of one document's best-viewer distribution.
pub fn group_perplexity(best_viewers: &[usize]) -> Result<f64> {
    if best_viewers.is_empty() {
        return Err(MvrError::invalid("perplexity group has no queries"));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &v in best_viewers {
        *counts.entry(v).or_default() += 1;
    }
    let n = best_viewers.len() as f64;
    let entropy: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp())
}

/// Mean per-document perplexity over `groups` (one list of best-viewer
/// indexes per document).
pub fn perplexity(groups: &[Vec<usize>]) -> Result<f64> {
    if groups.is_empty() {
        return Err(MvrError::invalid("perplexity needs at least one document"));
    }
    let total = groups
        .iter()
        .map(|g| group_perplexity(g))
        .sum::<Result<f64>>()?;
    Ok(total / groups.len() as f64)
}

/// Mean cosine similarity over all pairs of rows; `None` for fewer than two rows.
pub fn mean_pairwise_cosine(views: ArrayView2<f64>) -> Option<f64> {
    let k = views.nrows();
    if k < 2 {
        return None;
    }
    let norms: Vec<f64> = views.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..k {
        for j in i + 1..k {
            let denom = norms[i] * norms[j];
            total += if denom > 0.0 {
                views.row(i).dot(&views.row(j)) / denom
            } else {
                0.0
            };
            pairs += 1;
        }
    }
    Some(total / pairs as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewDiagnostics {
    /// Mean best-viewer perplexity over documents with at least two queries.
    pub ppl: Option<f64>,
    /// Mean local variation over all (query, gold document) pairs.
    pub lv: Option<f64>,
    /// Best-viewer counts over all (query, gold document) pairs.
    pub viewer_hit_histogram: Vec<usize>,
    /// Mean pairwise cosine among a document's viewer embeddings, averaged over documents.
    pub mean_viewer_cosine: Option<f64>,
    pub normalization: ScoreNormalization,
    pub n_viewers: usize,
    pub n_pairs: usize,
    pub n_docs: usize,
    pub n_ppl_docs: usize,
}

impl ViewDiagnostics {
    /// `viewer,hits` lines with a header.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("viewer,hits\n");
        for (v, c) in self.viewer_hit_histogram.iter().enumerate() {
            writeln!(out, "{v},{c}").expect("write to String");
        }
        out
    }
}

/// Scores every eval query against its first gold document and summarizes
/// which viewers win. Documents with fewer than two queries contribute to LV,
/// the histogram and cosine, but not to PPL.
pub fn collapse_report(
    model: &DualEncoder,
    vocab: &Vocab,
    corpus: &[Passage],
    examples: &[TrainExample],
    normalization: ScoreNormalization,
) -> Result<ViewDiagnostics> {
    let by_id: BTreeMap<&str, &Passage> = corpus.iter().map(|p| (p.doc_id.as_str(), p)).collect();
    let mut queries_of: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for ex in examples {
        let gold = ex
            .positive_ids
            .first()
            .ok_or_else(|| MvrError::invalid(format!("query {:?} has no gold ids", ex.query)))?;
        if !by_id.contains_key(gold.as_str()) {
            return Err(MvrError::invalid(format!("gold doc_id {gold} not in corpus")));
        }
        queries_of.entry(gold.as_str()).or_default().push(ex.query.as_str());
    }
    if queries_of.is_empty() {
        return Err(MvrError::invalid("collapse report needs at least one eval query"));
    }
    let k = model.config.n_viewers;
    let docs: Vec<(&str, &Vec<&str>)> = queries_of.iter().map(|(d, q)| (*d, q)).collect();

    struct DocStats {
        best: Vec<usize>,
        lv: Vec<f64>,
        cosine: Option<f64>,
    }
    let stats: Vec<DocStats> = docs
        .par_iter()
        .map(|(doc_id, queries)| {
            let p = by_id[doc_id];
            let views = model.embed_document(&model.document_sequence(p, vocab)?)?;
            let mut best = Vec::with_capacity(queries.len());
            let mut lv = Vec::with_capacity(queries.len());
            for q in queries.iter() {
                let qe = model.embed_query(&model.query_sequence(q, vocab)?)?;
                let b = score_pair(qe.query_vector(), views.views.view())?;
                best.push(b.best_viewer);
                if k >= 2 {
                    lv.push(local_variation(&normalization.apply(&b.individual))?);
                }
            }
            Ok(DocStats {
                best,
                lv,
                cosine: mean_pairwise_cosine(views.views.view()),
            })
        })
        .collect::<Result<_>>()?;

    let mut histogram = vec![0usize; k];
    let mut lv_sum = 0.0;
    let mut lv_n = 0usize;
    let mut cos_sum = 0.0;
    let mut cos_n = 0usize;
    let mut ppl_groups = Vec::new();
    let mut n_pairs = 0;
    for s in &stats {
        for &b in &s.best {
            histogram[b] += 1;
        }
        n_pairs += s.best.len();
        lv_sum += s.lv.iter().sum::<f64>();
        lv_n += s.lv.len();
        if let Some(c) = s.cosine {
            cos_sum += c;
            cos_n += 1;
        }
        if s.best.len() >= 2 {
            ppl_groups.push(s.best.clone());
        }
    }
    let ppl = if ppl_groups.is_empty() {
        log::warn!("no document has two or more eval queries; perplexity skipped");
        None
    } else {
        Some(perplexity(&ppl_groups)?)
    };
    Ok(ViewDiagnostics {
        ppl,
        lv: (lv_n > 0).then(|| lv_sum / lv_n as f64),
        viewer_hit_histogram: histogram,
        mean_viewer_cosine: (cos_n > 0).then(|| cos_sum / cos_n as f64),
        normalization,
        n_viewers: k,
        n_pairs,
        n_docs: stats.len(),
        n_ppl_docs: ppl_groups.len(),
    })
}
