//! A pre-norm transformer encoder with a tied MLM head and a binary
//! classification head, with hand-derived gradients.
//!
//! All parameters live in one flat `Vec<f64>`; [`Layout`] names the tensor
//! slices inside it. Gradients and optimizer moments reuse the same layout.

mod encoder;
mod kernels;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub use encoder::{attention_maps, backward, forward, loss_and_grad, Batch, ForwardOutput, MaskedLogits, Objective};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout_p: f64,
    /// Share the MLM output projection with the token embedding.
    pub tie_mlm_weights: bool,
}

impl ModelConfig {
    /// 2 layers, 2 heads, width 32.
    pub fn desk_scale(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 32,
            d_ff: 64,
            max_len: 128,
            vocab_size,
            dropout_p: 0.1,
            tie_mlm_weights: true,
        }
    }

    /// 6 layers, 6 heads, width 768.
    pub fn full_scale(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 6,
            n_heads: 6,
            d_model: 768,
            d_ff: 3072,
            max_len: 512,
            vocab_size,
            dropout_p: 0.1,
            tie_mlm_weights: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::Config(String::from(msg)));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("layer, head and width counts must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2");
        }
        if self.vocab_size <= crate::sequencer::N_SPECIAL as usize {
            return bad("vocabulary must contain tokens beyond the specials");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout_p must be in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("batch shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("parameter vector has {found} values, layout needs {expected}")]
    ParamCount { expected: usize, found: usize },
}

/// How a tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub init: InitKind,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Named slices of the flat parameter vector. Matrices are row-major with
/// shape (input, output).
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub(crate) tok_emb: usize,
    pub(crate) pos_emb: usize,
    pub(crate) layers: Vec<LayerOffsets>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    pub(crate) mlm_w: Option<usize>,
    pub(crate) mlm_b: usize,
    pub(crate) cls_w: usize,
    pub(crate) cls_b: usize,
    pub len: usize,
}

struct LayoutBuilder {
    tensors: Vec<TensorSpec>,
    len: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: InitKind) -> usize {
        let offset = self.len;
        self.tensors.push(TensorSpec { name, rows, cols, offset, init });
        self.len += rows * cols;
        offset
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        use InitKind::*;
        let (d, ff, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let mut b = LayoutBuilder { tensors: Vec::new(), len: 0 };
        let tok_emb = b.add("tok_emb".into(), v, d, Normal);
        let pos_emb = b.add("pos_emb".into(), cfg.max_len, d, Normal);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let mut t = |name: &str, rows, cols, init| b.add(format!("layer{l}.{name}"), rows, cols, init);
            layers.push(LayerOffsets {
                ln1_g: t("ln1_g", 1, d, Ones),
                ln1_b: t("ln1_b", 1, d, Zeros),
                wq: t("wq", d, d, Normal),
                bq: t("bq", 1, d, Zeros),
                wk: t("wk", d, d, Normal),
                bk: t("bk", 1, d, Zeros),
                wv: t("wv", d, d, Normal),
                bv: t("bv", 1, d, Zeros),
                wo: t("wo", d, d, Normal),
                bo: t("bo", 1, d, Zeros),
                ln2_g: t("ln2_g", 1, d, Ones),
                ln2_b: t("ln2_b", 1, d, Zeros),
                w1: t("w1", d, ff, Normal),
                b1: t("b1", 1, ff, Zeros),
                w2: t("w2", ff, d, Normal),
                b2: t("b2", 1, d, Zeros),
            });
        }
        let lnf_g = b.add("lnf_g".into(), 1, d, Ones);
        let lnf_b = b.add("lnf_b".into(), 1, d, Zeros);
        let mlm_w = (!cfg.tie_mlm_weights).then(|| b.add("mlm_w".into(), d, v, Normal));
        let mlm_b = b.add("mlm_b".into(), 1, v, Zeros);
        let cls_w = b.add("cls_w".into(), 1, d, Normal);
        let cls_b = b.add("cls_b".into(), 1, 1, Zeros);
        Layout { tensors: b.tensors, tok_emb, pos_emb, layers, lnf_g, lnf_b, mlm_w, mlm_b, cls_w, cls_b, len: b.len }
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Classification-head parameters, the only ones trained when the
    /// encoder is frozen.
    pub fn head_ranges(&self) -> Vec<Range<usize>> {
        ["cls_w", "cls_b"].iter().filter_map(|n| self.tensor(n)).map(TensorSpec::range).collect()
    }
}

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layout: Layout,
    pub values: Vec<f64>,
}

impl ModelParams {
    /// Weights ~ N(0, 0.02²) truncated at ±2σ by resampling; layer-norm
    /// scales 1; offsets and biases 0.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let layout = Layout::new(cfg);
        let mut rng = crate::rng::stream(seed, crate::rng::STREAM_INIT);
        let normal = Normal::new(0.0, INIT_STD).expect("positive std");
        let mut values = alloc::vec![0.0; layout.len];
        for t in &layout.tensors {
            let slot = &mut values[t.range()];
            match t.init {
                InitKind::Zeros => {}
                InitKind::Ones => slot.fill(1.0),
                InitKind::Normal => {
                    for x in slot.iter_mut() {
                        *x = loop {
                            let v: f64 = normal.sample(&mut rng);
                            if v.abs() <= 2.0 * INIT_STD {
                                break v;
                            }
                        };
                    }
                }
            }
        }
        Ok(ModelParams { config: cfg.clone(), layout, values })
    }

    pub fn from_values(cfg: &ModelConfig, values: Vec<f64>) -> Result<Self, ModelError> {
        cfg.validate()?;
        let layout = Layout::new(cfg);
        if values.len() != layout.len {
            return Err(ModelError::ParamCount { expected: layout.len, found: values.len() });
        }
        Ok(ModelParams { config: cfg.clone(), layout, values })
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.tensor(name).map(|t| &self.values[t.range()])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Dropout masks are drawn from this when training.
pub(crate) fn bernoulli_keep(rng: &mut crate::rng::Rng, p: f64) -> bool {
    rng.random::<f64>() >= p
}
