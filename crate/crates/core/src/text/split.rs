//! Corpus-splitting baselines: sentence-level passages and k equal-length chunks.

use std::collections::HashMap;

use log::warn;

use crate::error::{MvrError, Result};

use super::{tokenize, Passage, TrainExample, PAD_TOKEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    Sentence,
    KEqual(usize),
}

/// Split ids are `<doc_id>#<index>`.
fn split_id(doc_id: &str, i: usize) -> String {
    format!("{doc_id}#{i}")
}

/// Splits on `.`, `!` or `?` followed by whitespace or end of text.
fn sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    for (j, &(idx, c)) in chars.iter().enumerate() {
        if matches!(c, '.' | '!' | '?') {
            let next = chars.get(j + 1).map(|&(_, n)| n);
            if next.is_none() || next.is_some_and(char::is_whitespace) {
                let end = idx + c.len_utf8();
                let s = text[start..end].trim();
                if !tokenize(s).is_empty() {
                    out.push(s.to_string());
                }
                start = end;
            }
        }
    }
    let tail = text[start..].trim();
    if !tokenize(tail).is_empty() {
        out.push(tail.to_string());
    }
    if out.is_empty() {
        out.push(text.trim().to_string());
    }
    out
}

fn equal_chunks(doc_id: &str, text: &str, k: usize) -> Vec<String> {
    let toks = tokenize(text);
    if toks.len() < k {
        warn!("passage {doc_id} has {} tokens, fewer than k={k}; kept as one chunk", toks.len());
        return vec![toks.join(" ")];
    }
    let chunk = toks.len().div_ceil(k);
    (0..k)
        .map(|i| {
            let lo = (i * chunk).min(toks.len());
            let hi = ((i + 1) * chunk).min(toks.len());
            let mut words: Vec<&str> = toks[lo..hi].iter().map(String::as_str).collect();
            words.resize(chunk, PAD_TOKEN);
            words.join(" ")
        })
        .collect()
}

fn contains_subsequence(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

fn overlap(query: &[String], split: &[String]) -> usize {
    query.iter().filter(|q| split.contains(q)).count()
}

/// Rewrites a corpus into sentence-level or k-equal passages and remaps the
/// examples onto them.
///
/// A positive maps to every split containing one of the example's answer
/// strings; with no answers (or no match) it maps to the split sharing the
/// most query tokens. Negatives map to all splits of the original negatives.
pub fn split_corpus(
    corpus: &[Passage],
    examples: &[TrainExample],
    mode: SplitMode,
) -> Result<(Vec<Passage>, Vec<TrainExample>)> {
    if let SplitMode::KEqual(k) = mode {
        if k < 2 {
            return Err(MvrError::config(format!("k_equal split needs k >= 2, got {k}")));
        }
    }
    let mut new_corpus = Vec::new();
    let mut splits_of: HashMap<&str, Vec<(String, Vec<String>)>> = HashMap::new();
    for p in corpus {
        let pieces = match mode {
            SplitMode::Sentence => sentences(&p.text),
            SplitMode::KEqual(k) => equal_chunks(&p.doc_id, &p.text, k),
        };
        let entry = splits_of.entry(p.doc_id.as_str()).or_default();
        for (i, text) in pieces.into_iter().enumerate() {
            let id = split_id(&p.doc_id, i);
            entry.push((id.clone(), tokenize(&text)));
            new_corpus.push(Passage::new(id, p.title.clone(), text));
        }
    }

    let lookup = |id: &str| {
        splits_of
            .get(id)
            .ok_or_else(|| MvrError::invalid(format!("example references unknown doc_id {id}")))
    };

    let mut new_examples = Vec::with_capacity(examples.len());
    for ex in examples {
        let query_toks = tokenize(&ex.query);
        let answer_toks: Vec<Vec<String>> = ex.answers.iter().map(|a| tokenize(a)).collect();
        let mut positives = Vec::new();
        for pid in &ex.positive_ids {
            let splits = lookup(pid)?;
            let with_answer: Vec<&String> = splits
                .iter()
                .filter(|(_, toks)| answer_toks.iter().any(|a| contains_subsequence(toks, a)))
                .map(|(id, _)| id)
                .collect();
            if with_answer.is_empty() {
                let best = splits
                    .iter()
                    .enumerate()
                    .max_by(|(ia, a), (ib, b)| {
                        overlap(&query_toks, &a.1)
                            .cmp(&overlap(&query_toks, &b.1))
                            .then(ib.cmp(ia))
                    })
                    .map(|(_, (id, _))| id.clone())
                    .expect("every passage yields at least one split");
                positives.push(best);
            } else {
                positives.extend(with_answer.into_iter().cloned());
            }
        }
        let mut negatives = Vec::new();
        for nid in &ex.negative_ids {
            negatives.extend(lookup(nid)?.iter().map(|(id, _)| id.clone()));
        }
        negatives.retain(|n| !positives.contains(n));
        new_examples.push(TrainExample {
            query: ex.query.clone(),
            positive_ids: positives,
            negative_ids: negatives,
            answers: ex.answers.clone(),
            segment: ex.segment,
        });
    }
    Ok((new_corpus, new_examples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn hundred_tokens_into_four_chunks_of_25() {
        let corpus = vec![Passage::new("d", "", words(100))];
        let (out, _) = split_corpus(&corpus, &[], SplitMode::KEqual(4)).unwrap();
        assert_eq!(out.len(), 4);
        for p in &out {
            assert_eq!(tokenize(&p.text).len(), 25);
        }
        assert_eq!(out[1].doc_id, "d#1");
        assert!(out[1].text.starts_with("w25 "));
    }

    #[test]
    fn uneven_chunks_pad_the_last() {
        let corpus = vec![Passage::new("d", "", words(10))];
        let (out, _) = split_corpus(&corpus, &[], SplitMode::KEqual(4)).unwrap();
        let lens: Vec<usize> = out.iter().map(|p| tokenize(&p.text).len()).collect();
        assert_eq!(lens, vec![3, 3, 3, 3]);
        assert_eq!(tokenize(&out[3].text), ["w9", "[PAD]", "[PAD]"]);
    }

    #[test]
    fn short_passage_stays_whole() {
        let corpus = vec![Passage::new("d", "", "a b")];
        let (out, _) = split_corpus(&corpus, &[], SplitMode::KEqual(4)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].text, "a b");
    }

    #[test]
    fn k_below_two_is_rejected() {
        assert!(split_corpus(&[], &[], SplitMode::KEqual(1)).is_err());
    }

    #[test]
    fn one_sentence_passage_is_identity() {
        let corpus = vec![Passage::new("d", "t", "Just one sentence here.")];
        let (out, _) = split_corpus(&corpus, &[], SplitMode::Sentence).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].text, "Just one sentence here.");
        assert_eq!(out[0].title, "t");
    }

    #[test]
    fn positive_follows_the_answer_sentence() {
        let corpus = vec![
            Passage::new("p", "", "The sky is blue. Grass grows fast. Paris is in France! Rivers flow."),
            Passage::new("n", "", "Cats purr. Dogs bark."),
        ];
        let mut ex = TrainExample::new("where is paris", vec!["p".into()], vec!["n".into()]);
        ex.answers = vec!["France".into()];
        let (out, exs) = split_corpus(&corpus, &[ex], SplitMode::Sentence).unwrap();
        assert_eq!(out.len(), 6);
        assert_eq!(exs[0].positive_ids, vec!["p#2".to_string()]);
        assert_eq!(exs[0].negative_ids, vec!["n#0".to_string(), "n#1".to_string()]);
    }

    #[test]
    fn without_answers_positive_is_best_overlap() {
        let corpus = vec![Passage::new("p", "", "alpha beta. gamma delta. delta epsilon gamma.")];
        let ex = TrainExample::new("gamma delta epsilon", vec!["p".into()], vec![]);
        let (_, exs) = split_corpus(&corpus, &[ex], SplitMode::Sentence).unwrap();
        assert_eq!(exs[0].positive_ids, vec!["p#2".to_string()]);
    }

    proptest! {
        #[test]
        fn equal_split_conserves_tokens_when_divisible(k in 2usize..6, per in 1usize..20) {
            let corpus = vec![Passage::new("d", "", words(k * per))];
            let (out, _) = split_corpus(&corpus, &[], SplitMode::KEqual(k)).unwrap();
            let total: usize = out.iter().map(|p| tokenize(&p.text).len()).sum();
            prop_assert_eq!(total, k * per);
            prop_assert_eq!(out.len(), k);
        }
    }
}
