//! Closed-form score mathematics.
//!
//! Under Gaussian corruption with standard deviation `t`, the score of the
//! noisy density given a clean embedding is affine in that embedding, so a
//! categorical prediction over the vocabulary turns into a score estimate by
//! averaging embeddings first and applying the affine map once.

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::numerics::{log_sum_exp, softmax_in_place};
use crate::{Error, Result};

/// Manipulations of the predicted clean embedding before the score is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    #[default]
    Plain,
    Renormalise,
    Clamp,
    RenormaliseClamp,
}

impl ScoreMode {
    pub fn clamps(self) -> bool {
        matches!(self, ScoreMode::Clamp | ScoreMode::RenormaliseClamp)
    }

    pub fn renormalises(self) -> bool {
        matches!(self, ScoreMode::Renormalise | ScoreMode::RenormaliseClamp)
    }
}

/// Per-position categorical distributions over the vocabulary (`L x V`).
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorDistribution {
    pub probs: Mat,
}

impl PosteriorDistribution {
    pub fn new(probs: Mat) -> Result<Self> {
        for (i, row) in probs.rows().into_iter().enumerate() {
            if row.iter().any(|p| !(*p >= 0.0)) || (row.sum() - 1.0).abs() > 1e-8 {
                return Err(Error::InvalidArgument(format!("row {i} is not a distribution")));
            }
        }
        Ok(Self { probs })
    }

    /// Row-wise softmax of logits.
    pub fn from_logits(logits: &Mat) -> Self {
        let mut probs = logits.clone();
        for mut row in probs.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("contiguous"));
        }
        Self { probs }
    }

    pub fn position(&self, i: usize) -> ArrayView1<'_, f64> {
        self.probs.row(i)
    }
}

/// Known prior and fixed embeddings defining an exact Gaussian-mixture
/// ground truth for every noise level.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleSpec {
    pub prior: Vec<f64>,
    pub embeddings: Mat,
}

impl OracleSpec {
    pub fn new(prior: Vec<f64>, embeddings: Mat) -> Result<Self> {
        if prior.len() != embeddings.nrows() {
            return Err(Error::InvalidArgument("prior length must equal vocabulary size".into()));
        }
        if prior.iter().any(|p| !(*p >= 0.0)) || (prior.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidArgument("prior must be a distribution".into()));
        }
        let d = (embeddings.ncols() as f64).sqrt();
        if embeddings.rows().into_iter().any(|r| (r.dot(&r).sqrt() - d).abs() > 1e-8) {
            return Err(Error::InvalidArgument("oracle embeddings must have norm sqrt(d)".into()));
        }
        Ok(Self { prior, embeddings })
    }

    pub fn vocab(&self) -> usize {
        self.prior.len()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    /// Unnormalised log posterior `log pi_i - |x - e_i|^2 / (2 t^2)`.
    pub fn log_weights(&self, x: ArrayView1<f64>, t: f64) -> Vec<f64> {
        let inv = 1.0 / (2.0 * t * t);
        self.embeddings
            .rows()
            .into_iter()
            .zip(&self.prior)
            .map(|(e, &p)| {
                let d2: f64 = e.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                p.ln() - d2 * inv
            })
            .collect()
    }

    /// `log p_t(x)` for the mixture `sum_i pi_i N(x; e_i, t^2 I)`.
    pub fn log_density(&self, x: ArrayView1<f64>, t: f64) -> f64 {
        let d = self.dim() as f64;
        log_sum_exp(&self.log_weights(x, t)) - 0.5 * d * (2.0 * std::f64::consts::PI * t * t).ln()
    }
}

fn check_t(t: f64) -> Result<()> {
    if t > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("time must be positive, got {t}")))
    }
}

/// `(x0 - x) / t^2`.
pub fn conditional_score(x0: ArrayView1<f64>, x: ArrayView1<f64>, t: f64) -> Result<Array1<f64>> {
    check_t(t)?;
    Ok((&x0 - &x) / (t * t))
}

/// Posterior mean embedding `sum_i p_i e_i`.
pub fn interpolate_x0(probs: ArrayView1<f64>, embeddings: ArrayView2<f64>) -> Array1<f64> {
    probs.dot(&embeddings)
}

/// Euclidean-nearest embedding row; the lowest index wins ties.
pub fn nearest_embedding(v: ArrayView1<f64>, embeddings: ArrayView2<f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, e) in embeddings.rows().into_iter().enumerate() {
        let d2: f64 = e.iter().zip(v.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2 < best.1 {
            best = (i, d2);
        }
    }
    best.0
}

/// Applies clamping and then renormalisation to a predicted clean embedding.
pub fn shape_x0(x0: Array1<f64>, embeddings: ArrayView2<f64>, mode: ScoreMode) -> Result<Array1<f64>> {
    let mut x0 = x0;
    if mode.clamps() {
        x0 = embeddings.row(nearest_embedding(x0.view(), embeddings)).to_owned();
    }
    if mode.renormalises() {
        let n = x0.dot(&x0).sqrt();
        if !(n >= 1e-30) {
            return Err(Error::DegeneratePrediction(n));
        }
        x0 *= (embeddings.ncols() as f64).sqrt() / n;
    }
    Ok(x0)
}

/// Score estimate from a categorical prediction at one position.
pub fn interpolate_score(
    probs: ArrayView1<f64>,
    embeddings: ArrayView2<f64>,
    x: ArrayView1<f64>,
    t: f64,
    mode: ScoreMode,
) -> Result<Array1<f64>> {
    check_t(t)?;
    let x0 = shape_x0(interpolate_x0(probs, embeddings), embeddings, mode)?;
    conditional_score(x0.view(), x, t)
}

/// Exact posterior over tokens for the oracle mixture.
pub fn bayes_posterior(spec: &OracleSpec, x: ArrayView1<f64>, t: f64) -> Result<Array1<f64>> {
    check_t(t)?;
    let mut w = spec.log_weights(x, t);
    softmax_in_place(&mut w);
    Ok(Array1::from(w))
}

/// Analytic gradient of the oracle log-density, accumulated component by
/// component: `sum_i r_i (e_i - x) / t^2` with responsibilities `r`.
pub fn oracle_score(spec: &OracleSpec, x: ArrayView1<f64>, t: f64) -> Result<Array1<f64>> {
    check_t(t)?;
    let logw = spec.log_weights(x, t);
    let lse = log_sum_exp(&logw);
    let mut g = Array1::zeros(x.len());
    for (e, lw) in spec.embeddings.rows().into_iter().zip(&logw) {
        let r = (lw - lse).exp();
        if r == 0.0 {
            continue;
        }
        for ((gi, ei), xi) in g.iter_mut().zip(e.iter()).zip(x.iter()) {
            *gi += r * (ei - xi);
        }
    }
    Ok(g / (t * t))
}

/// Classifier-free guidance: `uncond + gamma (cond - uncond)`.
pub fn cfg_combine(score_cond: ArrayView1<f64>, score_uncond: ArrayView1<f64>, gamma: f64) -> Array1<f64> {
    if gamma == 1.0 {
        return score_cond.to_owned();
    }
    if gamma == 0.0 {
        return score_uncond.to_owned();
    }
    &score_uncond + &((&score_cond - &score_uncond) * gamma)
}

/// Score of the tempered density `p^(1/T)`.
pub fn apply_score_temperature(score: ArrayView1<f64>, temp: f64) -> Array1<f64> {
    assert!(temp > 0.0, "temperature must be positive");
    &score / temp
}
