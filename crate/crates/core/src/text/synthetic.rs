//! Synthetic multi-view corpus: each document concatenates segments drawn from
//! distinct topic vocabularies, and each query samples one segment.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MvrError, Result};

use super::{Passage, TrainExample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_docs: usize,
    pub segments_per_doc: usize,
    pub vocab_size: usize,
    /// Training queries generated per document segment.
    pub queries_per_segment: usize,
    /// Held-out queries generated per document segment.
    pub eval_queries_per_segment: usize,
    pub seed: u64,
    /// Words per topic; topics partition the vocabulary.
    pub topic_size: usize,
    pub segment_len: usize,
    pub query_len: usize,
    /// Query tokens replaced by uniformly random vocabulary words.
    pub noise_tokens: usize,
    /// Hard negatives per query, drawn from documents sharing the query's topic.
    pub hard_negatives: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_docs: 500,
            segments_per_doc: 4,
            vocab_size: 2000,
            queries_per_segment: 1,
            eval_queries_per_segment: 1,
            seed: 7,
            topic_size: 50,
            segment_len: 8,
            query_len: 5,
            noise_tokens: 1,
            hard_negatives: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn n_topics(&self) -> usize {
        self.vocab_size / self.topic_size.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MvrError::config(m));
        if self.segments_per_doc == 0 {
            return bad("segments_per_doc must be at least 1".into());
        }
        if self.vocab_size < self.segments_per_doc * 10 {
            return bad(format!(
                "vocab_size {} < 10 x segments_per_doc ({}): topics would not be separable",
                self.vocab_size, self.segments_per_doc
            ));
        }
        if self.n_docs == 0 {
            return bad("n_docs must be at least 1".into());
        }
        if self.topic_size == 0 || self.n_topics() < self.segments_per_doc {
            return bad(format!(
                "{} topics of size {} cannot fill {} distinct segments",
                self.n_topics(),
                self.topic_size,
                self.segments_per_doc
            ));
        }
        if self.segment_len == 0 || self.segment_len > self.topic_size {
            return bad("segment_len must be in 1..=topic_size".into());
        }
        if self.query_len == 0 || self.noise_tokens >= self.query_len {
            return bad("query_len must exceed noise_tokens".into());
        }
        if self.query_len - self.noise_tokens > self.segment_len {
            return bad("query signal tokens exceed segment_len".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub corpus: Vec<Passage>,
    pub train: Vec<TrainExample>,
    pub eval: Vec<TrainExample>,
    /// Topic index of every segment, per document.
    pub doc_topics: Vec<Vec<usize>>,
    /// Tokens of every segment, per document.
    pub doc_segments: Vec<Vec<Vec<String>>>,
}

pub fn word(topic: usize, j: usize) -> String {
    format!("t{topic}w{j}")
}

pub fn doc_id(i: usize) -> String {
    format!("d{i:05}")
}

/// Deterministic in `spec`. Segments are joined as sentences, so a sentence
/// split recovers them.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_topics = spec.n_topics();
    let all_words: Vec<String> = (0..n_topics)
        .flat_map(|t| (0..spec.topic_size).map(move |j| word(t, j)))
        .collect();
    let topic_ids: Vec<usize> = (0..n_topics).collect();
    let word_ids: Vec<usize> = (0..spec.topic_size).collect();

    let mut corpus = Vec::with_capacity(spec.n_docs);
    let mut doc_topics = Vec::with_capacity(spec.n_docs);
    let mut doc_segments = Vec::with_capacity(spec.n_docs);
    let mut docs_by_topic: Vec<Vec<usize>> = vec![Vec::new(); n_topics];
    for d in 0..spec.n_docs {
        let topics: Vec<usize> = topic_ids
            .choose_multiple(&mut rng, spec.segments_per_doc)
            .copied()
            .collect();
        let segments: Vec<Vec<String>> = topics
            .iter()
            .map(|&t| {
                word_ids
                    .choose_multiple(&mut rng, spec.segment_len)
                    .map(|&j| word(t, j))
                    .collect()
            })
            .collect();
        for &t in &topics {
            docs_by_topic[t].push(d);
        }
        let text = segments
            .iter()
            .map(|s| format!("{}.", s.join(" ")))
            .collect::<Vec<_>>()
            .join(" ");
        corpus.push(Passage::new(doc_id(d), "", text));
        doc_topics.push(topics);
        doc_segments.push(segments);
    }

    let make_queries = |per_segment: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::new();
        for d in 0..spec.n_docs {
            for (s, seg) in doc_segments[d].iter().enumerate() {
                for _ in 0..per_segment {
                    let mut toks: Vec<String> = seg
                        .choose_multiple(rng, spec.query_len - spec.noise_tokens)
                        .cloned()
                        .collect();
                    for _ in 0..spec.noise_tokens {
                        toks.push(all_words.choose(rng).unwrap().clone());
                    }
                    toks.shuffle(rng);
                    let topic = doc_topics[d][s];
                    let candidates: Vec<usize> =
                        docs_by_topic[topic].iter().copied().filter(|&o| o != d).collect();
                    let mut negatives: Vec<String> = Vec::new();
                    let mut guard = 0;
                    while negatives.len() < spec.hard_negatives && guard < 16 * spec.hard_negatives.max(1) {
                        guard += 1;
                        let pick = if candidates.is_empty() {
                            rng.random_range(0..spec.n_docs)
                        } else {
                            *candidates.choose(rng).unwrap()
                        };
                        let id = doc_id(pick);
                        if pick != d && !negatives.contains(&id) {
                            negatives.push(id);
                        }
                    }
                    let mut ex = TrainExample::new(toks.join(" "), vec![doc_id(d)], negatives);
                    ex.segment = Some(s);
                    out.push(ex);
                }
            }
        }
        out
    };
    let train = make_queries(spec.queries_per_segment, &mut rng);
    let eval = make_queries(spec.eval_queries_per_segment, &mut rng);

    Ok(SyntheticData {
        corpus,
        train,
        eval,
        doc_topics,
        doc_segments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_docs: 50,
            segments_per_doc: 4,
            vocab_size: 400,
            topic_size: 20,
            seed,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn deterministic_for_a_fixed_seed() {
        let a = generate_synthetic(&small(7)).unwrap();
        let b = generate_synthetic(&small(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&small(8)).unwrap();
        assert_ne!(a.corpus, c.corpus);
    }

    #[test]
    fn single_segment_documents() {
        let spec = SyntheticSpec {
            segments_per_doc: 1,
            ..small(1)
        };
        let data = generate_synthetic(&spec).unwrap();
        assert!(data.doc_topics.iter().all(|t| t.len() == 1));
        assert!(data.train.iter().all(|e| e.segment == Some(0)));
        assert_eq!(data.train.len(), 50);
    }

    #[test]
    fn separable_vocab_is_required() {
        let spec = SyntheticSpec {
            vocab_size: 39,
            ..small(1)
        };
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn query_overlaps_its_segment_topic() {
        let spec = small(7);
        let data = generate_synthetic(&spec).unwrap();
        let ex = data
            .eval
            .iter()
            .find(|e| e.positive_ids[0] == doc_id(9) && e.segment == Some(2))
            .unwrap();
        let topic = data.doc_topics[9][2];
        let toks = tokenize(&ex.query);
        let in_topic = toks
            .iter()
            .filter(|t| t.starts_with(&format!("t{topic}w")))
            .count();
        assert!(in_topic as f64 / toks.len() as f64 >= 0.6);
        let seg = &data.doc_segments[9][2];
        assert!(toks.iter().filter(|t| seg.contains(t)).count() >= spec.query_len - spec.noise_tokens);
    }

    #[test]
    fn negatives_are_other_documents() {
        let data = generate_synthetic(&small(3)).unwrap();
        for ex in data.train.iter().chain(&data.eval) {
            ex.validate().unwrap();
            assert_eq!(ex.negative_ids.len(), 1);
        }
        assert_eq!(data.train.len(), 200);
        assert_eq!(data.eval.len(), 200);
    }
}
