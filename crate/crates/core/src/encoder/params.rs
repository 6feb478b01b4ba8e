use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MvrError, Result};

/// How document embeddings are read out of the final hidden states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    /// `n_viewers` dedicated viewer tokens prefixed to the document.
    Viewers,
    /// A single leading token; the first `n_viewers` rows are the views.
    FirstK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_viewers: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub view_mode: ViewMode,
    /// Share one parameter set between the query and document encoders.
    pub tied: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            n_layers: 1,
            n_viewers: 8,
            max_len: 64,
            vocab_size: 0,
            seed: 0,
            view_mode: ViewMode::Viewers,
            tied: false,
        }
    }
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(MvrError::config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_viewers == 0 {
            return Err(MvrError::config("n_viewers must be at least 1"));
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return Err(MvrError::config("n_layers and d_ff must be positive"));
        }
        if self.vocab_size <= crate::text::VIEWER_BASE_ID as usize + self.n_viewers {
            return Err(MvrError::config("vocab_size must cover the special tokens"));
        }
        if self.max_len <= self.n_viewers {
            return Err(MvrError::config("max_len must exceed n_viewers"));
        }
        Ok(())
    }
}

/// Weights of one transformer block (post-norm: attention, residual, LN, FFN, residual, LN).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
}

impl LayerParams {
    fn zeros(d: usize, f: usize) -> Self {
        LayerParams {
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            w1: Array2::zeros((d, f)),
            b1: Array1::zeros(f),
            w2: Array2::zeros((f, d)),
            b2: Array1::zeros(d),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
        }
    }

    fn slices(&self) -> [&[f64]; 16] {
        fn s(a: &Array2<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        fn v(a: &Array1<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        [
            s(&self.wq),
            v(&self.bq),
            s(&self.wk),
            v(&self.bk),
            s(&self.wv),
            v(&self.bv),
            s(&self.wo),
            v(&self.bo),
            v(&self.ln1_g),
            v(&self.ln1_b),
            s(&self.w1),
            v(&self.b1),
            s(&self.w2),
            v(&self.b2),
            v(&self.ln2_g),
            v(&self.ln2_b),
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 16] {
        fn s(a: &mut Array2<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        fn v(a: &mut Array1<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        [
            s(&mut self.wq),
            v(&mut self.bq),
            s(&mut self.wk),
            v(&mut self.bk),
            s(&mut self.wv),
            v(&mut self.bv),
            s(&mut self.wo),
            v(&mut self.bo),
            v(&mut self.ln1_g),
            v(&mut self.ln1_b),
            s(&mut self.w1),
            v(&mut self.b1),
            s(&mut self.w2),
            v(&mut self.b2),
            v(&mut self.ln2_g),
            v(&mut self.ln2_b),
        ]
    }
}

const LAYER_TENSOR_NAMES: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g",
    "ln2_b",
];

/// All trainable tensors of one encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
}

impl EncoderParams {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        EncoderParams {
            tok_emb: Array2::zeros((cfg.vocab_size, cfg.d_model)),
            pos_emb: Array2::zeros((cfg.max_len, cfg.d_model)),
            layers: (0..cfg.n_layers)
                .map(|_| LayerParams::zeros(cfg.d_model, cfg.d_ff))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    /// Embeddings ~ N(0, 1/sqrt(d_model)); projections ~ N(0, 1/sqrt(fan_in));
    /// biases 0; layer-norm gains 1.
    pub fn init(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = EncoderParams::zeros(cfg);
        let mut fill = |a: &mut [f64], fan_in: usize| {
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
            for x in a.iter_mut() {
                *x = normal.sample(&mut rng);
            }
        };
        let d = cfg.d_model;
        fill(p.tok_emb.as_slice_mut().unwrap(), d);
        fill(p.pos_emb.as_slice_mut().unwrap(), d);
        for layer in &mut p.layers {
            fill(layer.wq.as_slice_mut().unwrap(), d);
            fill(layer.wk.as_slice_mut().unwrap(), d);
            fill(layer.wv.as_slice_mut().unwrap(), d);
            fill(layer.wo.as_slice_mut().unwrap(), d);
            fill(layer.w1.as_slice_mut().unwrap(), d);
            fill(layer.w2.as_slice_mut().unwrap(), cfg.d_ff);
            layer.ln1_g.fill(1.0);
            layer.ln2_g.fill(1.0);
        }
        Ok(p)
    }

    pub fn d_model(&self) -> usize {
        self.tok_emb.ncols()
    }

    /// Tensors in a fixed order; checkpointing and the optimizer rely on it.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![
            self.tok_emb.as_slice().expect("standard layout"),
            self.pos_emb.as_slice().expect("standard layout"),
        ];
        for l in &self.layers {
            out.extend(l.slices());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![
            self.tok_emb.as_slice_mut().expect("standard layout"),
            self.pos_emb.as_slice_mut().expect("standard layout"),
        ];
        for l in &mut self.layers {
            out.extend(l.slices_mut());
        }
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for i in 0..self.layers.len() {
            out.extend(LAYER_TENSOR_NAMES.iter().map(|n| format!("layers.{i}.{n}")));
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.fill(value);
        }
    }

    pub fn add_assign(&mut self, other: &EncoderParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= c;
            }
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Gradient of one forward pass. Token-embedding rows are kept sparse.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrad {
    pub tok_rows: BTreeMap<u32, Array1<f64>>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
}

impl EncoderGrad {
    pub(crate) fn zeros_for(params: &EncoderParams) -> Self {
        let (d, f) = (params.d_model(), params.layers[0].w1.ncols());
        EncoderGrad {
            tok_rows: BTreeMap::new(),
            pos_emb: Array2::zeros(params.pos_emb.raw_dim()),
            layers: (0..params.layers.len())
                .map(|_| LayerParams::zeros(d, f))
                .collect(),
        }
    }

    /// Adds this gradient into a dense accumulator shaped like the parameters.
    pub fn accumulate_into(&self, dense: &mut EncoderParams) {
        for (&row, g) in &self.tok_rows {
            let mut dst = dense.tok_emb.row_mut(row as usize);
            dst += g;
        }
        dense.pos_emb += &self.pos_emb;
        for (dst, src) in dense.layers.iter_mut().zip(&self.layers) {
            for (a, b) in dst.slices_mut().into_iter().zip(src.slices()) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
    }

    pub fn to_dense(&self, like: &EncoderParams) -> EncoderParams {
        let mut dense = like.zeros_like();
        self.accumulate_into(&mut dense);
        dense
    }
}
