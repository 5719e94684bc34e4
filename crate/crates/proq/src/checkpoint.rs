//! Text checkpoint: model config, vocabulary hash and named tensors.
//!
//! ```text
//! proq-checkpoint 1
//! n_layers 2
//! ...
//! vocab_sha256 <hex>
//! tensor tok_emb 254 32
//! <rows*cols values, space separated>
//! ...
//! ```
//! Values use the shortest representation that parses back to the same f64.

use std::fmt::Write as _;
use std::path::Path;

use proq_core::model::{Layout, ModelConfig, ModelParams};
use proq_core::Vocabulary;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::artifacts::{read_text, write_text};
use crate::cdm_csv::FormatError;

const MAGIC: &str = "proq-checkpoint 1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{path}:{line}: {message}")]
    Malformed { path: String, line: usize, message: String },
    #[error("checkpoint was trained with vocabulary {found}, current vocabulary is {expected}")]
    VocabMismatch { expected: String, found: String },
    #[error("tensor {name}: expected {expected_rows}x{expected_cols}, found {rows}x{cols}")]
    Shape { name: String, expected_rows: usize, expected_cols: usize, rows: usize, cols: usize },
    #[error("expected tensor {expected}, found {found}")]
    TensorOrder { expected: String, found: String },
}

pub fn vocab_hash(vocab: &Vocabulary) -> String {
    let digest = Sha256::digest(vocab.to_text().as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn to_text(params: &ModelParams, vocab_hash: &str) -> String {
    let c = &params.config;
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "n_layers {}", c.n_layers);
    let _ = writeln!(out, "n_heads {}", c.n_heads);
    let _ = writeln!(out, "d_model {}", c.d_model);
    let _ = writeln!(out, "d_ff {}", c.d_ff);
    let _ = writeln!(out, "max_len {}", c.max_len);
    let _ = writeln!(out, "vocab_size {}", c.vocab_size);
    let _ = writeln!(out, "dropout_p {:?}", c.dropout_p);
    let _ = writeln!(out, "tie_mlm_weights {}", c.tie_mlm_weights);
    let _ = writeln!(out, "vocab_sha256 {vocab_hash}");
    for spec in &params.layout.tensors {
        let _ = writeln!(out, "tensor {} {} {}", spec.name, spec.rows, spec.cols);
        let values: Vec<String> = params.values[spec.range()].iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&values.join(" "));
        out.push('\n');
    }
    out
}

pub fn save(path: &Path, params: &ModelParams, vocab: &Vocabulary) -> Result<(), CheckpointError> {
    Ok(write_text(path, &to_text(params, &vocab_hash(vocab)))?)
}

struct Lines<'a> {
    path: String,
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn err(&self, message: impl Into<String>) -> CheckpointError {
        CheckpointError::Malformed { path: self.path.clone(), line: self.line, message: message.into() }
    }

    fn next(&mut self) -> Result<&'a str, CheckpointError> {
        let (i, l) = self.inner.next().ok_or_else(|| self.err("unexpected end of file"))?;
        self.line = i + 1;
        Ok(l)
    }

    fn field<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, CheckpointError> {
        let line = self.next()?;
        let value = line.strip_prefix(key).and_then(|r| r.strip_prefix(' ')).ok_or_else(|| self.err(format!("expected {key}")))?;
        value.parse().map_err(|_| self.err(format!("invalid {key} {value:?}")))
    }
}

/// Parses a checkpoint and checks its vocabulary hash when `expected_hash`
/// is given.
pub fn from_text(path: &str, text: &str, expected_hash: Option<&str>) -> Result<ModelParams, CheckpointError> {
    let mut lines = Lines { path: path.to_string(), inner: text.lines().enumerate(), line: 0 };
    if lines.next()? != MAGIC {
        return Err(lines.err("not a checkpoint"));
    }
    let config = ModelConfig {
        n_layers: lines.field("n_layers")?,
        n_heads: lines.field("n_heads")?,
        d_model: lines.field("d_model")?,
        d_ff: lines.field("d_ff")?,
        max_len: lines.field("max_len")?,
        vocab_size: lines.field("vocab_size")?,
        dropout_p: lines.field("dropout_p")?,
        tie_mlm_weights: lines.field("tie_mlm_weights")?,
    };
    config.validate().map_err(|e| lines.err(e.to_string()))?;
    let found: String = lines.field("vocab_sha256")?;
    if let Some(expected) = expected_hash {
        if expected != found {
            return Err(CheckpointError::VocabMismatch { expected: expected.to_string(), found });
        }
    }
    let layout = Layout::new(&config);
    let mut values = Vec::with_capacity(layout.len);
    for spec in &layout.tensors {
        let header = lines.next()?;
        let parts: Vec<&str> = header.split(' ').collect();
        let [tag, name, rows, cols] = parts[..] else { return Err(lines.err("expected a tensor header")) };
        if tag != "tensor" {
            return Err(lines.err("expected a tensor header"));
        }
        if name != spec.name {
            return Err(CheckpointError::TensorOrder { expected: spec.name.clone(), found: name.to_string() });
        }
        let (rows, cols): (usize, usize) = match (rows.parse(), cols.parse()) {
            (Ok(r), Ok(c)) => (r, c),
            _ => return Err(lines.err("invalid tensor shape")),
        };
        if (rows, cols) != (spec.rows, spec.cols) {
            return Err(CheckpointError::Shape {
                name: name.to_string(),
                expected_rows: spec.rows,
                expected_cols: spec.cols,
                rows,
                cols,
            });
        }
        let data = lines.next()?;
        let before = values.len();
        for v in data.split(' ').filter(|s| !s.is_empty()) {
            values.push(v.parse::<f64>().map_err(|_| lines.err(format!("invalid value {v:?}")))?);
        }
        if values.len() - before != spec.len() {
            return Err(lines.err(format!("tensor {name} has {} values, expected {}", values.len() - before, spec.len())));
        }
    }
    ModelParams::from_values(&config, values).map_err(|e| lines.err(e.to_string()))
}

pub fn load(path: &Path, vocab: Option<&Vocabulary>) -> Result<ModelParams, CheckpointError> {
    let text = read_text(path)?;
    let hash = vocab.map(vocab_hash);
    from_text(&path.display().to_string(), &text, hash.as_deref())
}
