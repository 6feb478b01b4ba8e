//! Multi-vector inner-product index: one entry per (document, viewer), with
//! per-document max aggregation of hits.

mod hnsw;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::DualEncoder;
use crate::error::{MvrError, Result};
use crate::io::atomic_write;
use crate::text::{Passage, Vocab};

pub use hnsw::{AnnParams, HnswGraph};

pub const INDEX_FORMAT: &str = "mvr-index";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub format: String,
    pub version: u32,
    /// Entries per document.
    pub k: usize,
    pub dim: usize,
    pub count: usize,
    pub n_docs: usize,
    pub checkpoint_hash: Option<String>,
    pub ann: AnnParams,
    /// Whether a search graph was built; it is rebuilt from `ann` on load.
    #[serde(default)]
    pub graph: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry<'a> {
    pub doc_id: &'a str,
    pub viewer_id: usize,
    pub vector: &'a [f32],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub doc_id: String,
    pub score: f64,
    pub best_viewer: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SearchMode {
    Flat,
    /// Graph search with the given beam width (`None`: the index default).
    Ann { ef: Option<usize> },
}

/// Vectors stored as f32, row-major; entries of a document are contiguous.
#[derive(Debug, Clone)]
pub struct MultiVectorIndex {
    k: usize,
    dim: usize,
    doc_ids: Vec<String>,
    doc_lookup: HashMap<String, u32>,
    entry_doc: Vec<u32>,
    entry_viewer: Vec<u32>,
    vectors: Vec<f32>,
    checkpoint_hash: Option<String>,
    ann: AnnParams,
    graph: Option<HnswGraph>,
}

impl PartialEq for MultiVectorIndex {
    fn eq(&self, other: &Self) -> bool {
        self.k == other.k
            && self.dim == other.dim
            && self.doc_ids == other.doc_ids
            && self.entry_doc == other.entry_doc
            && self.entry_viewer == other.entry_viewer
            && self.vectors.iter().map(|x| x.to_bits()).eq(other.vectors.iter().map(|x| x.to_bits()))
            && self.checkpoint_hash == other.checkpoint_hash
            && self.ann == other.ann
            && self.has_graph() == other.has_graph()
    }
}

#[inline]
fn dot(q: &[f64], v: &[f32]) -> f64 {
    q.iter().zip(v).map(|(a, &b)| a * b as f64).sum()
}

/// Sorts by score descending, then doc_id ascending.
fn rank(hits: &mut [SearchHit]) {
    hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.doc_id.cmp(&b.doc_id)));
}

impl MultiVectorIndex {
    pub fn new(k: usize, dim: usize) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(MvrError::invalid("index needs k >= 1 and dim >= 1"));
        }
        Ok(MultiVectorIndex {
            k,
            dim,
            doc_ids: Vec::new(),
            doc_lookup: HashMap::new(),
            entry_doc: Vec::new(),
            entry_viewer: Vec::new(),
            vectors: Vec::new(),
            checkpoint_hash: None,
            ann: AnnParams::default(),
            graph: None,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entry_doc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entry_doc.is_empty()
    }

    pub fn n_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn checkpoint_hash(&self) -> Option<&str> {
        self.checkpoint_hash.as_deref()
    }

    pub fn set_checkpoint_hash(&mut self, hash: Option<String>) {
        self.checkpoint_hash = hash;
    }

    pub fn ann_params(&self) -> &AnnParams {
        &self.ann
    }

    pub fn entry(&self, i: usize) -> IndexEntry<'_> {
        IndexEntry {
            doc_id: &self.doc_ids[self.entry_doc[i] as usize],
            viewer_id: self.entry_viewer[i] as usize,
            vector: &self.vectors[i * self.dim..(i + 1) * self.dim],
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = IndexEntry<'_>> {
        (0..self.len()).map(|i| self.entry(i))
    }

    /// Adds the k view vectors of one document. Invalidates the graph.
    pub fn add_document(&mut self, doc_id: &str, views: ArrayView2<f64>) -> Result<()> {
        if views.ncols() != self.dim {
            return Err(MvrError::DimensionMismatch {
                expected: self.dim,
                actual: views.ncols(),
            });
        }
        if views.nrows() != self.k {
            return Err(MvrError::DimensionMismatch {
                expected: self.k,
                actual: views.nrows(),
            });
        }
        if self.doc_lookup.contains_key(doc_id) {
            return Err(MvrError::invalid(format!("doc_id {doc_id} already indexed")));
        }
        let d = self.doc_ids.len() as u32;
        self.doc_lookup.insert(doc_id.to_string(), d);
        self.doc_ids.push(doc_id.to_string());
        for (v, row) in views.rows().into_iter().enumerate() {
            self.entry_doc.push(d);
            self.entry_viewer.push(v as u32);
            self.vectors.extend(row.iter().map(|&x| x as f32));
        }
        self.graph = None;
        Ok(())
    }

    /// Builds (or rebuilds) the search graph with `params`.
    pub fn build_graph(&mut self, params: AnnParams) -> Result<()> {
        self.graph = Some(HnswGraph::build(&self.vectors, self.dim, params)?);
        self.ann = params;
        Ok(())
    }

    pub fn has_graph(&self) -> bool {
        self.graph.is_some()
    }

    fn check_query(&self, query: &[f64], top_k: usize) -> Result<()> {
        if top_k == 0 {
            return Err(MvrError::invalid("top_k must be at least 1"));
        }
        if query.len() != self.dim {
            return Err(MvrError::DimensionMismatch {
                expected: self.dim,
                actual: query.len(),
            });
        }
        Ok(())
    }

    /// Keeps each document's best entry among `entries` (lowest viewer on ties)
    /// and returns the `top_k` best documents.
    fn group_max(&self, query: &[f64], entries: impl Iterator<Item = usize>, top_k: usize) -> Vec<SearchHit> {
        let mut best: HashMap<u32, (f64, u32)> = HashMap::new();
        for i in entries {
            let s = dot(query, &self.vectors[i * self.dim..(i + 1) * self.dim]);
            let v = self.entry_viewer[i];
            best.entry(self.entry_doc[i])
                .and_modify(|b| {
                    if s > b.0 || (s == b.0 && v < b.1) {
                        *b = (s, v);
                    }
                })
                .or_insert((s, v));
        }
        let mut hits: Vec<SearchHit> = best
            .into_iter()
            .map(|(d, (score, v))| SearchHit {
                doc_id: self.doc_ids[d as usize].clone(),
                score,
                best_viewer: v as usize,
            })
            .collect();
        rank(&mut hits);
        hits.truncate(top_k);
        hits
    }

    /// Exact search: scores every entry, keeps per-document max, returns `top_k` documents.
    pub fn search_flat(&self, query: &[f64], top_k: usize) -> Result<Vec<SearchHit>> {
        self.check_query(query, top_k)?;
        Ok(self.group_max(query, 0..self.len(), top_k))
    }

    /// Graph search for `overfetch * top_k * k` raw entries, then the same
    /// group-max merge. Requires [`Self::build_graph`] first.
    pub fn search_ann(&self, query: &[f64], top_k: usize, ef: Option<usize>) -> Result<Vec<SearchHit>> {
        self.check_query(query, top_k)?;
        if self.is_empty() {
            return Ok(Vec::new());
        }
        let graph = self
            .graph
            .as_ref()
            .ok_or_else(|| MvrError::invalid("graph not built; call build_graph first"))?;
        let n = self.ann.overfetch * top_k * self.k;
        if n >= self.len() {
            return Ok(self.group_max(query, 0..self.len(), top_k));
        }
        let ids = graph.search(query, n, ef.unwrap_or(self.ann.ef_search));
        Ok(self.group_max(query, ids.into_iter().map(|i| i as usize), top_k))
    }

    pub fn search(&self, query: &[f64], top_k: usize, mode: SearchMode) -> Result<Vec<SearchHit>> {
        match mode {
            SearchMode::Flat => self.search_flat(query, top_k),
            SearchMode::Ann { ef } => self.search_ann(query, top_k, ef),
        }
    }

    /// Searches many queries in parallel; output order matches input order.
    pub fn search_many(&self, queries: &[Vec<f64>], top_k: usize, mode: SearchMode) -> Result<Vec<Vec<SearchHit>>> {
        queries
            .par_iter()
            .map(|q| self.search(q, top_k, mode))
            .collect()
    }

    pub fn manifest(&self) -> IndexManifest {
        IndexManifest {
            format: INDEX_FORMAT.to_string(),
            version: INDEX_VERSION,
            k: self.k,
            dim: self.dim,
            count: self.len(),
            n_docs: self.n_docs(),
            checkpoint_hash: self.checkpoint_hash.clone(),
            ann: self.ann,
            graph: self.has_graph(),
        }
    }

    /// Writes `manifest.json`, `vectors.bin` (f32 little-endian) and `ids.tsv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| MvrError::io(dir, e))?;
        let bytes: Vec<u8> = self.vectors.iter().flat_map(|x| x.to_le_bytes()).collect();
        atomic_write(&dir.join("vectors.bin"), &bytes)?;
        let mut ids = String::new();
        for i in 0..self.len() {
            let e = self.entry(i);
            writeln!(ids, "{}\t{}", e.doc_id, e.viewer_id).expect("write to String");
        }
        atomic_write(&dir.join("ids.tsv"), ids.as_bytes())?;
        let mut manifest = serde_json::to_vec_pretty(&self.manifest())?;
        manifest.push(b'\n');
        atomic_write(&dir.join("manifest.json"), &manifest)
    }

    /// Loads an index saved by [`Self::save`]. Graph construction is
    /// deterministic in its parameters, so a saved graph is rebuilt rather than stored.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let text = std::fs::read_to_string(&mpath).map_err(|e| MvrError::io(&mpath, e))?;
        let m: IndexManifest = serde_json::from_str(&text).map_err(|e| MvrError::Corrupt {
            path: mpath.clone(),
            message: e.to_string(),
        })?;
        if m.format != INDEX_FORMAT {
            return Err(MvrError::Corrupt {
                path: mpath,
                message: format!("unknown format {:?}", m.format),
            });
        }
        if m.version != INDEX_VERSION {
            return Err(MvrError::Version {
                expected: INDEX_VERSION,
                found: m.version,
            });
        }
        let vpath = dir.join("vectors.bin");
        let bytes = std::fs::read(&vpath).map_err(|e| MvrError::io(&vpath, e))?;
        if bytes.len() != m.count * m.dim * 4 {
            return Err(MvrError::Corrupt {
                path: vpath,
                message: format!("{} bytes, expected {}", bytes.len(), m.count * m.dim * 4),
            });
        }
        let vectors: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();

        let ipath = dir.join("ids.tsv");
        let ids = std::fs::read_to_string(&ipath).map_err(|e| MvrError::io(&ipath, e))?;
        let mut index = MultiVectorIndex::new(m.k, m.dim)?;
        index.checkpoint_hash = m.checkpoint_hash;
        index.ann = m.ann;
        for (ln, line) in ids.lines().enumerate() {
            let parse_err = |message: &str| MvrError::Parse {
                path: ipath.clone(),
                line: ln + 1,
                message: message.to_string(),
            };
            let (doc, viewer) = line.split_once('\t').ok_or_else(|| parse_err("expected doc_id<TAB>viewer_id"))?;
            let viewer: u32 = viewer.parse().map_err(|_| parse_err("viewer_id is not an integer"))?;
            if viewer as usize >= m.k {
                return Err(parse_err("viewer_id out of range"));
            }
            let d = match index.doc_lookup.get(doc) {
                Some(&d) => d,
                None => {
                    let d = index.doc_ids.len() as u32;
                    index.doc_lookup.insert(doc.to_string(), d);
                    index.doc_ids.push(doc.to_string());
                    d
                }
            };
            index.entry_doc.push(d);
            index.entry_viewer.push(viewer);
        }
        if index.entry_doc.len() != m.count {
            return Err(MvrError::Corrupt {
                path: ipath,
                message: format!("{} entries, manifest says {}", index.entry_doc.len(), m.count),
            });
        }
        index.vectors = vectors;
        if m.graph {
            index.build_graph(m.ann)?;
        }
        Ok(index)
    }
}

/// Encodes every passage with the document encoder and indexes all its views.
pub fn build_index(model: &DualEncoder, vocab: &Vocab, corpus: &[Passage], checkpoint_hash: Option<String>) -> Result<MultiVectorIndex> {
    let views = corpus
        .par_iter()
        .map(|p| model.embed_document(&model.document_sequence(p, vocab)?))
        .collect::<Result<Vec<_>>>()?;
    let mut index = MultiVectorIndex::new(model.config.n_viewers, model.config.d_model)?;
    for (p, v) in corpus.iter().zip(&views) {
        index.add_document(&p.doc_id, v.views.view())?;
    }
    index.set_checkpoint_hash(checkpoint_hash);
    Ok(index)
}

/// Encodes queries with the query encoder.
pub fn embed_queries(model: &DualEncoder, vocab: &Vocab, queries: &[String]) -> Result<Vec<Vec<f64>>> {
    queries
        .par_iter()
        .map(|q| {
            let e = model.embed_query(&model.query_sequence(q, vocab)?)?;
            Ok(e.query_vector().to_vec())
        })
        .collect()
}

/// Mean fraction of each query's flat top-`top_k` documents that graph search also returns.
pub fn flat_ann_agreement(index: &MultiVectorIndex, queries: &[Vec<f64>], top_k: usize, ef: Option<usize>) -> Result<f64> {
    if queries.is_empty() {
        return Ok(1.0);
    }
    let per: Vec<f64> = queries
        .par_iter()
        .map(|q| {
            let flat = index.search_flat(q, top_k)?;
            if flat.is_empty() {
                return Ok(1.0);
            }
            let ann = index.search_ann(q, top_k, ef)?;
            let found = flat
                .iter()
                .filter(|h| ann.iter().any(|a| a.doc_id == h.doc_id))
                .count();
            Ok(found as f64 / flat.len() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}
