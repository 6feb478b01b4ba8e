//! Tokenization, vocabulary, corpus ingestion and the viewer-prefixed input layout.
//!
//! Documents are laid out as `[VIE_1]..[VIE_n] ∘ title ∘ [SEP] ∘ body ∘ [SEP]`
//! (the title part is dropped when empty). Every viewer token sits at position
//! id 0 and content tokens count up from 1. Queries use a single `[VIE_0]`.

mod split;
mod synthetic;
mod vocab;

use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{MvrError, Result};
use crate::io::{read_jsonl, write_jsonl};

pub use split::{split_corpus, SplitMode};
pub use synthetic::{generate_synthetic, SyntheticData, SyntheticSpec};
pub use vocab::{
    doc_viewer_id, viewer_token, Vocab, PAD_ID, PAD_TOKEN, SEP_ID, SEP_TOKEN, UNK_ID, UNK_TOKEN, VIEWER_BASE_ID,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub doc_id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

impl Passage {
    pub fn new(doc_id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        Passage {
            doc_id: doc_id.into(),
            title: title.into(),
            text: text.into(),
        }
    }
}

/// A query with its gold and negative documents.
///
/// `answers` and `segment` are optional extras: answer strings drive positive
/// remapping in [`split_corpus`], `segment` is synthetic-generator metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub query: String,
    pub positive_ids: Vec<String>,
    #[serde(default)]
    pub negative_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment: Option<usize>,
}

impl TrainExample {
    pub fn new(query: impl Into<String>, positive_ids: Vec<String>, negative_ids: Vec<String>) -> Self {
        TrainExample {
            query: query.into(),
            positive_ids,
            negative_ids,
            answers: Vec::new(),
            segment: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.positive_ids.is_empty() {
            return Err(MvrError::invalid(format!(
                "example {:?} has no positive ids",
                self.query
            )));
        }
        if let Some(dup) = self.negative_ids.iter().find(|n| self.positive_ids.contains(n)) {
            return Err(MvrError::invalid(format!(
                "example {:?} lists {dup} as both positive and negative",
                self.query
            )));
        }
        Ok(())
    }
}

fn token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[[A-Z]+(?:_[0-9]+)?\]|[\p{L}\p{N}]+").unwrap())
}

/// Lowercased whitespace/punctuation split. Bracketed upper-case special
/// tokens such as `[PAD]` survive as single tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    token_regex()
        .find_iter(text)
        .map(|m| {
            let s = m.as_str();
            if vocab::is_special(s) {
                s.to_string()
            } else {
                s.to_lowercase()
            }
        })
        .collect()
}

/// Token ids plus position ids, and which rows of the final hidden states
/// are read out as embeddings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSequence {
    pub ids: Vec<u32>,
    pub positions: Vec<u32>,
    pub view_rows: Vec<usize>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Appends `n` PAD tokens (position id 0) after the last token.
    pub fn padded(mut self, n: usize) -> Self {
        self.ids.extend(std::iter::repeat_n(PAD_ID, n));
        self.positions.extend(std::iter::repeat_n(0, n));
        self
    }
}

fn content_ids(p: &Passage, vocab: &Vocab) -> Vec<u32> {
    let mut ids = Vec::new();
    let title = tokenize(&p.title);
    if !title.is_empty() {
        ids.extend(title.iter().map(|t| vocab.lookup(t)));
        ids.push(SEP_ID);
    }
    ids.extend(tokenize(&p.text).iter().map(|t| vocab.lookup(t)));
    ids
}

fn assemble(prefix: Vec<u32>, content: Vec<u32>, max_len: usize, view_rows: Vec<usize>) -> Result<EncodedSequence> {
    let n_prefix = prefix.len();
    if max_len < n_prefix + 1 {
        return Err(MvrError::config(format!(
            "max_len {max_len} cannot hold {n_prefix} prefix tokens plus [SEP]"
        )));
    }
    let budget = max_len - n_prefix - 1;
    let mut ids = prefix;
    ids.extend(content.into_iter().take(budget));
    ids.push(SEP_ID);
    let positions = (0..ids.len())
        .map(|i| if i < n_prefix { 0 } else { (i - n_prefix + 1) as u32 })
        .collect();
    Ok(EncodedSequence {
        ids,
        positions,
        view_rows,
    })
}

/// `[VIE_1..VIE_n] ∘ passage ∘ [SEP]`, truncated to `max_len` with `[SEP]` kept last.
pub fn encode_document_tokens(
    p: &Passage,
    vocab: &Vocab,
    n_viewers: usize,
    max_len: usize,
) -> Result<EncodedSequence> {
    if n_viewers == 0 {
        return Err(MvrError::config("n_viewers must be at least 1"));
    }
    if n_viewers > vocab.n_viewers() {
        return Err(MvrError::config(format!(
            "{n_viewers} viewers requested but the vocabulary registers {}",
            vocab.n_viewers()
        )));
    }
    let prefix = (0..n_viewers).map(doc_viewer_id).collect();
    assemble(prefix, content_ids(p, vocab), max_len, (0..n_viewers).collect())
}

/// First-k-token views: a single `[VIE_1]` prefix, with the first `k` rows
/// (the prefix plus the first `k - 1` content tokens) read out as views.
pub fn encode_document_first_k(p: &Passage, vocab: &Vocab, k: usize, max_len: usize) -> Result<EncodedSequence> {
    if k == 0 {
        return Err(MvrError::config("k must be at least 1"));
    }
    let seq = assemble(vec![doc_viewer_id(0)], content_ids(p, vocab), max_len, (0..k).collect())?;
    if seq.len() < k {
        return Err(MvrError::invalid(format!(
            "document {} has {} tokens, fewer than the {k} views requested",
            p.doc_id,
            seq.len()
        )));
    }
    Ok(seq)
}

/// `[VIE_0] ∘ query ∘ [SEP]`, unknown tokens mapped to `[UNK]`.
pub fn encode_query_tokens(query: &str, vocab: &Vocab, max_len: usize) -> Result<EncodedSequence> {
    let toks = tokenize(query);
    if toks.is_empty() {
        return Err(MvrError::invalid("empty query"));
    }
    let content = toks.iter().map(|t| vocab.lookup(t)).collect();
    assemble(vec![VIEWER_BASE_ID], content, max_len, vec![0])
}

pub fn read_corpus(path: &Path) -> Result<Vec<Passage>> {
    let corpus: Vec<Passage> = read_jsonl(path)?;
    let mut seen = std::collections::HashSet::new();
    for p in &corpus {
        if !seen.insert(p.doc_id.as_str()) {
            return Err(MvrError::invalid(format!("duplicate doc_id {} in {}", p.doc_id, path.display())));
        }
    }
    Ok(corpus)
}

pub fn write_corpus(path: &Path, corpus: &[Passage]) -> Result<()> {
    write_jsonl(path, corpus)
}

pub fn read_examples(path: &Path) -> Result<Vec<TrainExample>> {
    let examples: Vec<TrainExample> = read_jsonl(path)?;
    for ex in &examples {
        ex.validate()?;
    }
    Ok(examples)
}

pub fn write_examples(path: &Path, examples: &[TrainExample]) -> Result<()> {
    write_jsonl(path, examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        let corpus = vec![Passage::new("d0", "", "x y who"), Passage::new("d1", "", "x")];
        Vocab::build(&corpus, 100, 4).unwrap()
    }

    #[test]
    fn tokenizer_lowercases_and_drops_punctuation() {
        assert_eq!(tokenize("Hello, World! It's [PAD]"), ["hello", "world", "it", "s", "[PAD]"]);
    }

    #[test]
    fn document_layout_with_three_viewers() {
        let v = vocab();
        let seq = encode_document_tokens(&Passage::new("d", "", "x y"), &v, 3, 64).unwrap();
        let (x, y) = (v.id("x").unwrap(), v.id("y").unwrap());
        assert_eq!(seq.ids, vec![4, 5, 6, x, y, SEP_ID]);
        assert_eq!(v.token(4), Some("[VIE_1]"));
        assert_eq!(v.token(6), Some("[VIE_3]"));
        assert_eq!(seq.positions, vec![0, 0, 0, 1, 2, 3]);
        assert_eq!(seq.view_rows, vec![0, 1, 2]);
    }

    #[test]
    fn single_viewer_layout() {
        let v = vocab();
        let seq = encode_document_tokens(&Passage::new("d", "", "x y"), &v, 1, 64).unwrap();
        assert_eq!(seq.positions, vec![0, 1, 2, 3]);
        assert_eq!(seq.ids[0], doc_viewer_id(0));
    }

    #[test]
    fn long_body_is_truncated_with_sep_last() {
        let v = vocab();
        let body = vec!["x"; 200].join(" ");
        let seq = encode_document_tokens(&Passage::new("d", "", body), &v, 4, 32).unwrap();
        assert_eq!(seq.len(), 32);
        assert_eq!(*seq.ids.last().unwrap(), SEP_ID);
    }

    #[test]
    fn too_many_viewers_is_an_error() {
        let v = vocab();
        assert!(encode_document_tokens(&Passage::new("d", "", "x"), &v, 5, 64).is_err());
        assert!(encode_document_tokens(&Passage::new("d", "", "x"), &v, 0, 64).is_err());
    }

    #[test]
    fn title_is_separated_from_body() {
        let v = vocab();
        let seq = encode_document_tokens(&Passage::new("d", "who", "x"), &v, 1, 64).unwrap();
        assert_eq!(seq.ids, vec![4, v.id("who").unwrap(), SEP_ID, v.id("x").unwrap(), SEP_ID]);
    }

    #[test]
    fn query_layout() {
        let v = vocab();
        let seq = encode_query_tokens("who", &v, 32).unwrap();
        assert_eq!(seq.ids, vec![VIEWER_BASE_ID, v.id("who").unwrap(), SEP_ID]);
        assert_eq!(seq.positions, vec![0, 1, 2]);
        let oov = encode_query_tokens("who zebra", &v, 32).unwrap();
        assert_eq!(oov.ids[2], UNK_ID);
        assert!(encode_query_tokens("  ?! ", &v, 32).is_err());
        let long = vec!["who"; 512].join(" ");
        assert_eq!(encode_query_tokens(&long, &v, 32).unwrap().len(), 32);
    }

    #[test]
    fn first_k_views_read_leading_rows() {
        let v = vocab();
        let seq = encode_document_first_k(&Passage::new("d", "", "x y x y"), &v, 3, 64).unwrap();
        assert_eq!(seq.view_rows, vec![0, 1, 2]);
        assert_eq!(seq.ids[0], doc_viewer_id(0));
        assert!(encode_document_first_k(&Passage::new("d", "", "x"), &v, 4, 64).is_err());
    }

    #[test]
    fn example_validation() {
        assert!(TrainExample::new("q", vec![], vec![]).validate().is_err());
        assert!(TrainExample::new("q", vec!["a".into()], vec!["a".into()]).validate().is_err());
        assert!(TrainExample::new("q", vec!["a".into()], vec!["b".into()]).validate().is_ok());
    }

    proptest! {
        #[test]
        fn viewer_positions_zero_and_content_increasing(
            words in proptest::collection::vec("[a-z]{1,4}", 0..80),
            n in 1usize..4,
            max_len in 6usize..48,
        ) {
            let v = vocab();
            let seq = encode_document_tokens(&Passage::new("d", "", words.join(" ")), &v, n, max_len).unwrap();
            prop_assert!(seq.len() <= max_len);
            prop_assert!(seq.positions[..n].iter().all(|&p| p == 0));
            for (i, w) in seq.positions[n..].windows(2).enumerate() {
                prop_assert_eq!(w[1], w[0] + 1, "row {}", i);
            }
            prop_assert_eq!(seq.positions[n], 1);
        }
    }
}
