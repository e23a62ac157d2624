//! Learnable token embeddings, always used through an L2-normalised view
//! scaled to norm `sqrt(d)` so each component has unit scale.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::numerics::RngStream;
use crate::{Error, Result};

/// Rows whose raw norm falls below this are treated as collapsed.
pub const MIN_ROW_NORM: f64 = 1e-30;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for t in &tokens {
            if !seen.insert(t) {
                return Err(Error::InvalidArgument(format!("duplicate token {t:?}")));
            }
        }
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty vocabulary".into()));
        }
        Ok(Self { tokens })
    }

    /// Tokens named `"0"`, `"1"`, ... for synthetic sources.
    pub fn numbered(size: usize) -> Self {
        Self {
            tokens: (0..size).map(|i| i.to_string()).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    /// `V x d` unconstrained parameters.
    pub raw: Mat,
    pub init_scale: f64,
}

impl EmbeddingTable {
    pub fn init(vocab: usize, dim: usize, init_scale: f64, rng: &mut RngStream) -> Self {
        assert!(init_scale > 0.0);
        let raw = Array2::from_shape_vec((vocab, dim), rng.normals(vocab * dim))
            .expect("shape")
            .mapv(|v| v * init_scale);
        Self { raw, init_scale }
    }

    pub fn from_raw(raw: Mat, init_scale: f64) -> Self {
        Self { raw, init_scale }
    }

    pub fn vocab(&self) -> usize {
        self.raw.nrows()
    }

    pub fn dim(&self) -> usize {
        self.raw.ncols()
    }

    fn check_rows(&self) -> Result<()> {
        for (row, r) in self.raw.rows().into_iter().enumerate() {
            let norm = r.dot(&r).sqrt();
            if !(norm > MIN_ROW_NORM) {
                return Err(Error::DegenerateEmbedding { row, norm });
            }
        }
        Ok(())
    }

    /// `sqrt(d) * raw_i / |raw_i|` for every row.
    pub fn normalized(&self) -> Result<Mat> {
        self.check_rows()?;
        let target = (self.dim() as f64).sqrt();
        let mut out = self.raw.clone();
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt();
            row *= target / n;
        }
        Ok(out)
    }

    /// Differentiable normalised view; `raw` must already be on the tape.
    pub fn normalized_on_tape(&self, tape: &mut Tape, raw: Var) -> Result<Var> {
        self.check_rows()?;
        Ok(tape.normalize_rows(raw, (self.dim() as f64).sqrt()))
    }
}

/// `x0 + t * eps` with fresh standard normal `eps`.
pub fn corrupt(x0: &Mat, t: f64, rng: &mut RngStream) -> Mat {
    assert!(t >= 0.0);
    let eps = Array2::from_shape_vec(x0.dim(), rng.normals(x0.len())).expect("shape");
    corrupt_with(x0, t, &eps)
}

pub fn corrupt_with(x0: &Mat, t: f64, eps: &Mat) -> Mat {
    x0 + &(eps * t)
}

pub fn input_scale_factor(t: f64) -> f64 {
    1.0 / (t * t + 1.0).sqrt()
}

/// Rescales noisy embeddings by `1 / sqrt(t^2 + 1)` so they have unit
/// per-component variance when the clean embeddings do.
pub fn input_scale(x: &Mat, t: f64) -> Mat {
    assert!(t >= 0.0);
    x * input_scale_factor(t)
}
