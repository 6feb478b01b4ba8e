use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{MvrError, Result};
use crate::io::atomic_write;

use super::{tokenize, Passage};

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const SEP_TOKEN: &str = "[SEP]";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
/// Id of `[VIE_0]`, the query's viewer token; `[VIE_i]` is `VIEWER_BASE_ID + i`.
pub const VIEWER_BASE_ID: u32 = 3;

/// Token id of the document viewer read out as view `i` (0-based), i.e. `[VIE_{i+1}]`.
pub fn doc_viewer_id(i: usize) -> u32 {
    VIEWER_BASE_ID + 1 + i as u32
}

pub fn viewer_token(i: usize) -> String {
    format!("[VIE_{i}]")
}

/// Token table with a fixed special-token prefix: `[PAD]`, `[UNK]`, `[SEP]`,
/// then `[VIE_0]..[VIE_n]` (`[VIE_0]` for queries, the rest for documents),
/// then content tokens by descending frequency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    /// Document viewers supported; `n_viewers + 1` viewer tokens are registered.
    n_viewers: usize,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>, n_viewers: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            tokens,
            index,
            n_viewers,
        }
    }

    /// Builds a vocabulary from the `max_vocab` most frequent content tokens.
    /// Frequency ties break lexicographically.
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a Passage>,
        max_vocab: usize,
        n_viewers: usize,
    ) -> Result<Vocab> {
        if n_viewers == 0 {
            return Err(MvrError::config("n_viewers must be at least 1"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut n_passages = 0usize;
        for p in corpus {
            n_passages += 1;
            for tok in tokenize(&p.title).into_iter().chain(tokenize(&p.text)) {
                if is_special(&tok) {
                    continue;
                }
                *counts.entry(tok).or_default() += 1;
            }
        }
        if n_passages == 0 {
            return Err(MvrError::invalid("cannot build a vocabulary from an empty corpus"));
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_vocab);

        let mut tokens = vec![
            PAD_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
            SEP_TOKEN.to_string(),
        ];
        tokens.extend((0..=n_viewers).map(viewer_token));
        tokens.extend(ranked.into_iter().map(|(t, _)| t));
        Ok(Vocab::from_tokens(tokens, n_viewers))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of document viewer tokens (`[VIE_1]..[VIE_n]`).
    pub fn n_viewers(&self) -> usize {
        self.n_viewers
    }

    /// Id of `[VIE_i]`, for `i` in `0..=n_viewers`.
    pub fn viewer_id(&self, i: usize) -> Option<u32> {
        (i <= self.n_viewers).then(|| VIEWER_BASE_ID + i as u32)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Id for a token, falling back to `[UNK]`.
    pub fn lookup(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// One `id<TAB>token` line per entry, ordered by id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(&format!("{i}\t{t}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Vocab> {
        let mut tokens = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (id, tok) = line
                .split_once('\t')
                .ok_or_else(|| MvrError::invalid(format!("vocab line {}: missing tab", lineno + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| MvrError::invalid(format!("vocab line {}: bad id", lineno + 1)))?;
            if id != tokens.len() {
                return Err(MvrError::invalid(format!(
                    "vocab line {}: ids must be dense and sorted, found {id}",
                    lineno + 1
                )));
            }
            tokens.push(tok.to_string());
        }
        let fixed = [PAD_TOKEN, UNK_TOKEN, SEP_TOKEN];
        if tokens.len() < 4 || tokens[..3].iter().zip(fixed).any(|(a, b)| a != b) {
            return Err(MvrError::invalid("vocab must start with [PAD], [UNK], [SEP], [VIE_0]"));
        }
        let n_viewer_tokens = tokens[3..]
            .iter()
            .enumerate()
            .take_while(|(i, t)| **t == viewer_token(*i))
            .count();
        if n_viewer_tokens < 2 {
            return Err(MvrError::invalid("vocab must register [VIE_0] and at least one document viewer"));
        }
        let n_viewers = n_viewer_tokens - 1;
        Ok(Vocab::from_tokens(tokens, n_viewers))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = fs::read_to_string(path).map_err(|e| MvrError::io(path, e))?;
        Vocab::from_text(&text)
    }
}

pub(crate) fn is_special(tok: &str) -> bool {
    tok.starts_with('[') && tok.ends_with(']')
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(texts: &[&str]) -> Vec<Passage> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Passage::new(format!("d{i}"), "", *t))
            .collect()
    }

    #[test]
    fn tiny_corpus_contains_all_tokens_and_specials() {
        let v = Vocab::build(&corpus(&["a b", "b c"]), 10, 2).unwrap();
        for t in ["a", "b", "c", "[PAD]", "[UNK]", "[SEP]", "[VIE_0]", "[VIE_1]", "[VIE_2]"] {
            assert!(v.contains(t), "missing {t}");
        }
        assert_eq!(v.len(), 9);
        assert_eq!(v.id("[PAD]"), Some(PAD_ID));
        assert_eq!(v.viewer_id(1), Some(4));
        assert_eq!(v.viewer_id(2), Some(doc_viewer_id(1)));
        assert_eq!(v.viewer_id(3), None);
    }

    #[test]
    fn max_vocab_keeps_most_frequent() {
        let v = Vocab::build(&corpus(&["a b", "b c"]), 1, 2).unwrap();
        assert!(v.contains("b"));
        assert!(!v.contains("a"));
        assert!(!v.contains("c"));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(Vocab::build(&corpus(&[]), 10, 2).is_err());
    }

    #[test]
    fn text_round_trip_is_stable() {
        let v = Vocab::build(&corpus(&["the cat sat", "the dog"]), 100, 3).unwrap();
        let back = Vocab::from_text(&v.to_text()).unwrap();
        assert_eq!(v, back);
        assert_eq!(back.n_viewers(), 3);
    }

    #[test]
    fn rejects_sparse_ids() {
        assert!(Vocab::from_text("0\t[PAD]\n2\t[UNK]\n").is_err());
    }
}
