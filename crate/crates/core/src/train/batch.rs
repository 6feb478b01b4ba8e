use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::DualEncoder;
use crate::error::{MvrError, Result};
use crate::text::{EncodedSequence, Passage, TrainExample, Vocab};

use super::TrainConfig;

/// Corpus and examples tokenized once up front; examples refer to documents by index.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub doc_ids: Vec<String>,
    pub docs: Vec<EncodedSequence>,
    pub queries: Vec<EncodedSequence>,
    /// Per example: positive doc indices (first is the training positive).
    pub positives: Vec<Vec<usize>>,
    pub hard_negatives: Vec<Vec<usize>>,
}

impl TrainData {
    pub fn prepare(
        model: &DualEncoder,
        vocab: &Vocab,
        corpus: &[Passage],
        examples: &[TrainExample],
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let index: HashMap<&str, usize> = corpus
            .iter()
            .enumerate()
            .map(|(i, p)| (p.doc_id.as_str(), i))
            .collect();
        let resolve = |id: &String| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| MvrError::invalid(format!("example references unknown doc_id {id}")))
        };
        let docs = corpus
            .iter()
            .map(|p| model.document_sequence(p, vocab))
            .collect::<Result<Vec<_>>>()?;
        let mut queries = Vec::with_capacity(examples.len());
        let mut positives = Vec::with_capacity(examples.len());
        let mut hard_negatives = Vec::with_capacity(examples.len());
        for ex in examples {
            ex.validate()?;
            queries.push(model.query_sequence(&ex.query, vocab)?);
            positives.push(ex.positive_ids.iter().map(resolve).collect::<Result<Vec<_>>>()?);
            if ex.negative_ids.len() < cfg.hard_negatives_per_query {
                return Err(MvrError::invalid(format!(
                    "example {:?} has {} negatives, {} requested",
                    ex.query,
                    ex.negative_ids.len(),
                    cfg.hard_negatives_per_query
                )));
            }
            hard_negatives.push(
                ex.negative_ids[..cfg.hard_negatives_per_query]
                    .iter()
                    .map(resolve)
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(TrainData {
            doc_ids: corpus.iter().map(|p| p.doc_id.clone()).collect(),
            docs,
            queries,
            positives,
            hard_negatives,
        })
    }

    pub fn n_examples(&self) -> usize {
        self.queries.len()
    }

    /// Example order for `epoch`, a pure function of (seed, epoch), cut into batches.
    pub fn epoch_batches(&self, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.n_examples()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
    }
}

/// One mini-batch: the distinct documents it touches and, per query, which of
/// them are its positive and negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainBatch {
    pub examples: Vec<usize>,
    /// Corpus indices of the documents to encode.
    pub docs: Vec<usize>,
    /// Per query: index into `docs` of its positive.
    pub positive: Vec<usize>,
    /// Per query: indices into `docs` of its negatives.
    pub negatives: Vec<Vec<usize>>,
}

impl TrainBatch {
    /// Pairs each query with its positive, its own hard negatives, and (when
    /// enabled) the other queries' positives. Any document that is one of the
    /// query's own positives is never used as its negative.
    pub fn build(data: &TrainData, examples: &[usize], cfg: &TrainConfig) -> Result<Self> {
        if !cfg.in_batch_negatives && cfg.hard_negatives_per_query == 0 {
            return Err(MvrError::config("no negatives: enable in-batch negatives or request hard negatives"));
        }
        let mut docs: Vec<usize> = Vec::new();
        let mut slot: HashMap<usize, usize> = HashMap::new();
        let mut intern = |doc: usize, docs: &mut Vec<usize>| {
            *slot.entry(doc).or_insert_with(|| {
                docs.push(doc);
                docs.len() - 1
            })
        };
        let batch_pos: Vec<usize> = examples.iter().map(|&e| data.positives[e][0]).collect();
        let positive: Vec<usize> = batch_pos.iter().map(|&d| intern(d, &mut docs)).collect();
        let mut negatives = Vec::with_capacity(examples.len());
        for (qi, &e) in examples.iter().enumerate() {
            let own = &data.positives[e];
            let mut negs: Vec<usize> = Vec::new();
            let mut push = |d: usize, negs: &mut Vec<usize>, docs: &mut Vec<usize>| {
                if !own.contains(&d) {
                    let s = intern(d, docs);
                    if !negs.contains(&s) {
                        negs.push(s);
                    }
                }
            };
            for &d in &data.hard_negatives[e] {
                push(d, &mut negs, &mut docs);
            }
            if cfg.in_batch_negatives {
                for (qj, &d) in batch_pos.iter().enumerate() {
                    if qj != qi {
                        push(d, &mut negs, &mut docs);
                    }
                }
            }
            negatives.push(negs);
        }
        Ok(TrainBatch {
            examples: examples.to_vec(),
            docs,
            positive,
            negatives,
        })
    }
}
