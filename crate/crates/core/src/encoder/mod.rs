//! Dual encoder producing one query embedding and `n_viewers` document embeddings.
//!
//! Each side is a token + position embedding followed by `n_layers` post-norm
//! transformer blocks. Gradients are hand-derived (see [`ForwardPass::backward`]).

mod block;
mod params;

use ndarray::{Array2, ArrayView1, Axis};

use crate::error::{MvrError, Result};
use crate::text::{
    encode_document_first_k, encode_document_tokens, encode_query_tokens, EncodedSequence, Passage,
    doc_viewer_id, Vocab, PAD_ID, VIEWER_BASE_ID,
};

pub use params::{EncoderConfig, EncoderGrad, EncoderParams, LayerParams, ViewMode};

use block::{block_backward, block_forward, BlockCache};

/// Final hidden states at the view rows: `n_viewers` rows for a document, one for a query.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewEmbedding {
    pub views: Array2<f64>,
}

impl MultiViewEmbedding {
    pub fn n_views(&self) -> usize {
        self.views.nrows()
    }

    pub fn dim(&self) -> usize {
        self.views.ncols()
    }

    pub fn view(&self, i: usize) -> ArrayView1<'_, f64> {
        self.views.row(i)
    }

    /// The single query vector (row 0).
    pub fn query_vector(&self) -> ArrayView1<'_, f64> {
        self.views.row(0)
    }
}

/// Activations of one forward pass, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    ids: Vec<u32>,
    positions: Vec<u32>,
    caches: Vec<BlockCache>,
    n_heads: usize,
    pub embedding: MultiViewEmbedding,
}

impl EncoderParams {
    /// Runs the encoder over `seq` and returns the hidden states at `seq.view_rows`.
    pub fn forward(&self, cfg: &EncoderConfig, seq: &EncodedSequence) -> Result<ForwardPass> {
        if seq.ids.len() != seq.positions.len() {
            return Err(MvrError::invalid("ids and positions differ in length"));
        }
        if seq.view_rows.is_empty() || seq.view_rows.iter().any(|&r| r >= seq.len()) {
            return Err(MvrError::invalid("view rows must be non-empty and inside the sequence"));
        }
        if let Some(&bad) = seq.ids.iter().find(|&&id| id as usize >= self.tok_emb.nrows()) {
            return Err(MvrError::invalid(format!("token id {bad} outside the vocabulary")));
        }
        if let Some(&bad) = seq.positions.iter().find(|&&p| p as usize >= self.pos_emb.nrows()) {
            return Err(MvrError::invalid(format!("position id {bad} exceeds max_len")));
        }
        let d = self.d_model();
        let len = seq.len();
        let mut x = Array2::zeros((len, d));
        for (i, (&id, &pos)) in seq.ids.iter().zip(&seq.positions).enumerate() {
            let mut row = x.row_mut(i);
            row.assign(&self.tok_emb.row(id as usize));
            row += &self.pos_emb.row(pos as usize);
        }
        let key_mask: Vec<bool> = seq.ids.iter().map(|&id| id != PAD_ID).collect();
        let all_rows: Vec<usize> = (0..len).collect();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let rows = if l + 1 == self.layers.len() {
                &seq.view_rows
            } else {
                &all_rows
            };
            let (out, cache) = block_forward(layer, cfg.n_heads, &x, rows, &key_mask);
            caches.push(cache);
            x = out;
        }
        Ok(ForwardPass {
            ids: seq.ids.clone(),
            positions: seq.positions.clone(),
            caches,
            n_heads: cfg.n_heads,
            embedding: MultiViewEmbedding { views: x },
        })
    }

    /// Document forward; the sequence must carry the prefix its view mode expects.
    pub fn forward_doc(&self, cfg: &EncoderConfig, seq: &EncodedSequence) -> Result<ForwardPass> {
        match cfg.view_mode {
            ViewMode::Viewers => {
                let prefix_ok = seq.len() > cfg.n_viewers
                    && (0..cfg.n_viewers).all(|i| seq.ids[i] == doc_viewer_id(i))
                    && seq.view_rows == (0..cfg.n_viewers).collect::<Vec<_>>();
                if !prefix_ok {
                    return Err(MvrError::invalid(format!(
                        "document sequence lacks the {}-viewer prefix",
                        cfg.n_viewers
                    )));
                }
            }
            ViewMode::FirstK => {
                if seq.ids.first() != Some(&doc_viewer_id(0)) || seq.view_rows.len() != cfg.n_viewers {
                    return Err(MvrError::invalid("document sequence lacks the leading [VIE_0]"));
                }
            }
        }
        self.forward(cfg, seq)
    }

    pub fn forward_query(&self, cfg: &EncoderConfig, seq: &EncodedSequence) -> Result<ForwardPass> {
        if seq.ids.first() != Some(&VIEWER_BASE_ID) || seq.view_rows != [0] {
            return Err(MvrError::invalid("query sequence lacks the [VIE_0] prefix"));
        }
        self.forward(cfg, seq)
    }
}

impl ForwardPass {
    /// Reverse pass for an upstream gradient at the output embeddings.
    pub fn backward(&self, params: &EncoderParams, d_out: &Array2<f64>) -> Result<EncoderGrad> {
        if d_out.raw_dim() != self.embedding.views.raw_dim() {
            return Err(MvrError::DimensionMismatch {
                expected: self.embedding.views.len(),
                actual: d_out.len(),
            });
        }
        let mut grad = EncoderGrad::zeros_for(params);
        let mut d_x = d_out.clone();
        for (l, cache) in self.caches.iter().enumerate().rev() {
            d_x = block_backward(&params.layers[l], self.n_heads, cache, &d_x, &mut grad.layers[l]);
        }
        for (i, row) in d_x.axis_iter(Axis(0)).enumerate() {
            let id = self.ids[i];
            let d = row.len();
            *grad
                .tok_rows
                .entry(id)
                .or_insert_with(|| ndarray::Array1::zeros(d)) += &row;
            let mut pos = grad.pos_emb.row_mut(self.positions[i] as usize);
            pos += &row;
        }
        Ok(grad)
    }
}

/// Query-side and document-side encoders, initialized identically.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub config: EncoderConfig,
    pub query: EncoderParams,
    pub doc: EncoderParams,
}

impl DualEncoder {
    pub fn init(config: EncoderConfig) -> Result<Self> {
        let query = EncoderParams::init(&config)?;
        let doc = query.clone();
        Ok(DualEncoder { config, query, doc })
    }

    pub fn query_params(&self) -> &EncoderParams {
        if self.config.tied {
            &self.doc
        } else {
            &self.query
        }
    }

    pub fn document_sequence(&self, p: &Passage, vocab: &Vocab) -> Result<EncodedSequence> {
        match self.config.view_mode {
            ViewMode::Viewers => encode_document_tokens(p, vocab, self.config.n_viewers, self.config.max_len),
            ViewMode::FirstK => encode_document_first_k(p, vocab, self.config.n_viewers, self.config.max_len),
        }
    }

    pub fn query_sequence(&self, q: &str, vocab: &Vocab) -> Result<EncodedSequence> {
        encode_query_tokens(q, vocab, self.config.max_len)
    }

    pub fn embed_document(&self, seq: &EncodedSequence) -> Result<MultiViewEmbedding> {
        Ok(self.doc.forward_doc(&self.config, seq)?.embedding)
    }

    pub fn embed_query(&self, seq: &EncodedSequence) -> Result<MultiViewEmbedding> {
        Ok(self.query_params().forward_query(&self.config, seq)?.embedding)
    }

    /// All parameters in a fixed order: query encoder then document encoder.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.query.tensors();
        t.extend(self.doc.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.query.tensors_mut();
        t.extend(self.doc.tensors_mut());
        t
    }

    pub fn zeros_like(&self) -> DualEncoder {
        DualEncoder {
            config: self.config.clone(),
            query: self.query.zeros_like(),
            doc: self.doc.zeros_like(),
        }
    }
}

#[cfg(test)]
mod tests;
