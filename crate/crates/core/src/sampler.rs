//! Deterministic probability-flow ODE sampling with Euler and Heun solvers.
//!
//! The ODE is `dx = -t * score(x, t) dt`, integrated from `t_max` down to
//! `t_min` on a warped or rho-spaced grid. Scores come from the denoiser
//! through score interpolation, optionally shaped by softmax temperature,
//! nucleus truncation, classifier-free guidance and score temperature.

use ndarray::{s, Array1};
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::denoiser::{Denoiser, DenoiserInput};
use crate::numerics::{softmax_in_place, RngStream};
use crate::score::{
    apply_score_temperature, cfg_combine, interpolate_score, interpolate_x0, nearest_embedding, PosteriorDistribution,
    ScoreMode,
};
use crate::warp::WarpCdf;
use crate::{Error, Result};

/// Sequences per batched forward pass; results do not depend on it.
pub const SAMPLE_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Euler,
    Heun,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    /// Linear in uniform time, mapped through the warp's inverse CDF.
    Warped,
    Rho(f64),
    /// A rho grid pushed through the warp's inverse CDF.
    WarpedRho(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decode {
    Argmax,
    NearestEmbedding,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub solver: Solver,
    pub n_steps: usize,
    pub spacing: Spacing,
    pub sigma_init: f64,
    pub score_temp: f64,
    pub softmax_temp: f64,
    pub nucleus_p: f64,
    pub guidance: f64,
    pub mode: ScoreMode,
    pub decode: Decode,
    /// Feed the truncated rather than the raw prediction back as `p`.
    pub truncate_self_cond: bool,
}

impl SamplerConfig {
    /// 200 Euler steps on the warped grid with no score manipulations.
    pub fn euler(n_steps: usize) -> Self {
        Self {
            solver: Solver::Euler,
            n_steps,
            spacing: Spacing::Warped,
            sigma_init: 1.0,
            score_temp: 1.0,
            softmax_temp: 1.0,
            nucleus_p: 1.0,
            guidance: 1.0,
            mode: ScoreMode::Plain,
            decode: Decode::Argmax,
            truncate_self_cond: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be at least 1".into()));
        }
        if !(self.sigma_init > 0.0 && self.sigma_init <= 1.0) {
            return Err(Error::Config("sigma_init must lie in (0, 1]".into()));
        }
        if !(self.score_temp > 0.0 && self.softmax_temp > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return Err(Error::Config("nucleus_p must lie in (0, 1]".into()));
        }
        if !self.guidance.is_finite() {
            return Err(Error::Config("guidance must be finite".into()));
        }
        match self.spacing {
            Spacing::Rho(r) | Spacing::WarpedRho(r) if !(r > 0.0) => Err(Error::Config("rho must be positive".into())),
            _ => Ok(()),
        }
    }
}

/// Timesteps visited by one sampled sequence, with optional states.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub timesteps: Vec<f64>,
    /// `L x d` embedding state after each step, clean positions included.
    pub states: Option<Vec<Mat>>,
}

fn rho_grid(n: usize, rho: f64, t_min: f64, t_max: f64) -> Vec<f64> {
    let (a, b) = (t_max.powf(1.0 / rho), t_min.powf(1.0 / rho));
    (0..=n).map(|k| (a + (k as f64 / n as f64) * (b - a)).powf(rho)).collect()
}

/// Descending grid of `N + 1` timesteps from `t_max` to `t_min`.
pub fn step_grid(spacing: Spacing, n_steps: usize, warp: &WarpCdf) -> Result<Vec<f64>> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("need at least one step".into()));
    }
    let (t_min, t_max) = (warp.t_min, warp.t_max);
    let mut grid: Vec<f64> = match spacing {
        Spacing::Warped => (0..=n_steps).map(|k| warp.sample_timestep(1.0 - k as f64 / n_steps as f64)).collect(),
        Spacing::Rho(rho) => rho_grid(n_steps, rho, t_min, t_max),
        Spacing::WarpedRho(rho) => rho_grid(n_steps, rho, t_min, t_max)
            .into_iter()
            .map(|t| warp.normalize_time(t.clamp(t_min, t_max)).map(|u| warp.sample_timestep(u)))
            .collect::<Result<_>>()?,
    };
    grid[0] = t_max;
    grid[n_steps] = t_min;
    Ok(grid)
}

/// `x + (t_next - t_k) * (-t_k * score)`.
pub fn euler_step(x: &Mat, t_k: f64, t_next: f64, score: &Mat) -> Mat {
    x + &(score * (-(t_next - t_k) * t_k))
}

/// Heun predictor-corrector; the corrector also runs on the final interval.
pub fn heun_step<F>(x: &Mat, t_k: f64, t_next: f64, score_k: &Mat, score: &mut F) -> Result<Mat>
where
    F: FnMut(&Mat, f64) -> Result<Mat>,
{
    let dt = t_next - t_k;
    let d1 = score_k * (-t_k);
    let pred = x + &(&d1 * dt);
    let d2 = score(&pred, t_next)? * (-t_next);
    Ok(x + &((d1 + d2) * (0.5 * dt)))
}

/// Integrates the probability-flow ODE along `grid`, calling `on_step`
/// with the index and state after every step.
pub fn integrate<F, C>(x: Mat, grid: &[f64], solver: Solver, mut score: F, mut on_step: C) -> Result<Mat>
where
    F: FnMut(&Mat, f64) -> Result<Mat>,
    C: FnMut(usize, &Mat),
{
    let mut x = x;
    for (k, w) in grid.windows(2).enumerate() {
        let (t_k, t_next) = (w[0], w[1]);
        let s_k = score(&x, t_k)?;
        x = match solver {
            Solver::Euler => euler_step(&x, t_k, t_next, &s_k),
            Solver::Heun => heun_step(&x, t_k, t_next, &s_k, &mut score)?,
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState(k));
        }
        on_step(k, &x);
    }
    Ok(x)
}

fn truncate_row(probs: &mut [f64], softmax_temp: f64, nucleus_p: f64) {
    if softmax_temp != 1.0 {
        for p in probs.iter_mut() {
            *p = if *p > 0.0 { p.ln() / softmax_temp } else { f64::NEG_INFINITY };
        }
        softmax_in_place(probs);
    }
    if nucleus_p < 1.0 {
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        let mut cum = 0.0;
        let mut keep = vec![false; probs.len()];
        for &i in &order {
            keep[i] = true;
            cum += probs[i];
            if cum >= nucleus_p * (1.0 - 1e-12) {
                break;
            }
        }
        for (p, k) in probs.iter_mut().zip(keep) {
            if !k {
                *p = 0.0;
            }
        }
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
    }
}

/// Softmax temperature then nucleus truncation, row by row.
pub fn truncate_posterior(post: &PosteriorDistribution, softmax_temp: f64, nucleus_p: f64) -> PosteriorDistribution {
    assert!(softmax_temp > 0.0 && nucleus_p > 0.0 && nucleus_p <= 1.0);
    let mut probs = post.probs.clone();
    for mut row in probs.rows_mut() {
        truncate_row(row.as_slice_mut().expect("standard layout"), softmax_temp, nucleus_p);
    }
    PosteriorDistribution { probs }
}

/// Given tokens and which positions to generate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conditioning {
    /// `true` = generate, `false` = keep `tokens[i]`.
    pub mask: Vec<bool>,
    /// Token ids at clean positions; ignored where `mask` is true.
    pub tokens: Vec<usize>,
}

impl Conditioning {
    pub fn unconditional(len: usize) -> Self {
        Self { mask: vec![true; len], tokens: vec![0; len] }
    }

    /// Clean prompt followed by `len - prompt.len()` positions to generate.
    pub fn prefix(prompt: &[usize], len: usize) -> Result<Self> {
        if prompt.len() > len {
            return Err(Error::InvalidArgument("prompt longer than the sequence".into()));
        }
        let mut tokens = prompt.to_vec();
        tokens.resize(len, 0);
        Ok(Self { mask: (0..len).map(|i| i >= prompt.len()).collect(), tokens })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    fn has_clean(&self) -> bool {
        self.mask.iter().any(|m| !m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub tokens: Vec<Vec<usize>>,
    pub trajectories: Vec<Trajectory>,
}

/// Per-sequence state shared by every score evaluation.
struct Seq {
    cond: Conditioning,
    /// Conditioning embeddings, zero at noisy positions.
    c: Mat,
    /// Noise used to re-noise clean positions for the unconditional pass.
    xi: Mat,
    /// Latest self-conditioning prediction, zero at clean positions.
    p: Mat,
}

struct ScoreField<'a, D: Denoiser + ?Sized> {
    denoiser: &'a D,
    emb: &'a Mat,
    cfg: &'a SamplerConfig,
    seqs: Vec<Seq>,
}

impl<D: Denoiser + ?Sized> ScoreField<'_, D> {
    fn len(&self) -> usize {
        self.seqs[0].cond.len()
    }

    fn rows(&self, x: &Mat, i: usize) -> Mat {
        let l = self.len();
        x.slice(s![i * l..(i + 1) * l, ..]).to_owned()
    }

    fn posteriors(&self, inputs: Vec<DenoiserInput>) -> Result<Vec<PosteriorDistribution>> {
        Ok(self.denoiser.logits(&inputs)?.iter().map(PosteriorDistribution::from_logits).collect())
    }

    fn score_rows(&self, post: &PosteriorDistribution, x: &Mat, mask: &[bool], t: f64) -> Result<Mat> {
        let mut out = Mat::zeros(x.dim());
        for (i, &noisy) in mask.iter().enumerate() {
            if noisy {
                let s = interpolate_score(post.position(i), self.emb.view(), x.row(i), t, self.cfg.mode)?;
                out.row_mut(i).assign(&s);
            }
        }
        Ok(out)
    }

    /// Scores at noisy positions of all sequences, stacked `(B*L) x d`.
    fn eval(&mut self, x: &Mat, t: f64) -> Result<Mat> {
        let cfg = self.cfg;
        let inputs: Vec<DenoiserInput> = self
            .seqs
            .iter()
            .enumerate()
            .map(|(i, s)| DenoiserInput { x: self.rows(x, i), c: s.c.clone(), m: s.cond.mask.clone(), p: s.p.clone(), t })
            .collect();
        let raw = self.posteriors(inputs)?;
        let guided: Vec<usize> = (0..self.seqs.len())
            .filter(|&i| cfg.guidance != 1.0 && self.seqs[i].cond.has_clean())
            .collect();
        let uncond = if guided.is_empty() {
            Vec::new()
        } else {
            let inputs = guided
                .iter()
                .map(|&i| {
                    let s = &self.seqs[i];
                    let x_u = &self.rows(x, i) + &(&s.c + &(&s.xi * t));
                    DenoiserInput { x: x_u, c: Mat::zeros(s.c.dim()), m: vec![true; s.cond.len()], p: s.p.clone(), t }
                })
                .collect();
            self.posteriors(inputs)?
        };
        let mut out = Mat::zeros(x.dim());
        let l = self.len();
        for (i, post) in raw.iter().enumerate() {
            let xi = self.rows(x, i);
            let mask = self.seqs[i].cond.mask.clone();
            let truncated = truncate_posterior(post, cfg.softmax_temp, cfg.nucleus_p);
            let source = if cfg.truncate_self_cond { &truncated } else { post };
            let mut p = Mat::zeros(xi.dim());
            for (r, &noisy) in mask.iter().enumerate() {
                if noisy {
                    p.row_mut(r).assign(&interpolate_x0(source.position(r), self.emb.view()));
                }
            }
            let mut score = self.score_rows(&truncated, &xi, &mask, t)?;
            if let Some(j) = guided.iter().position(|&g| g == i) {
                let s = &self.seqs[i];
                let x_u = &xi + &(&s.c + &(&s.xi * t));
                let tu = truncate_posterior(&uncond[j], cfg.softmax_temp, cfg.nucleus_p);
                let su = self.score_rows(&tu, &x_u, &mask, t)?;
                for r in 0..l {
                    if mask[r] {
                        let comb = cfg_combine(score.row(r), su.row(r), cfg.guidance);
                        score.row_mut(r).assign(&comb);
                    }
                }
            }
            if cfg.score_temp != 1.0 {
                for mut row in score.rows_mut() {
                    let tempered = apply_score_temperature(row.view(), cfg.score_temp);
                    row.assign(&tempered);
                }
            }
            out.slice_mut(s![i * l..(i + 1) * l, ..]).assign(&score);
            self.seqs[i].p = p;
        }
        Ok(out)
    }
}

/// Generates token sequences for each conditioning by integrating the ODE.
///
/// Sequence `i` draws its noise from `rng.split(i)`, so results do not
/// depend on how sequences are batched.
pub fn sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    embeddings: &Mat,
    warp: &WarpCdf,
    cfg: &SamplerConfig,
    conditioning: &[Conditioning],
    rng: &RngStream,
    record_states: bool,
) -> Result<SampleOutput> {
    cfg.validate()?;
    if embeddings.nrows() != denoiser.vocab() {
        return Err(Error::InvalidArgument("embedding table does not match the denoiser vocabulary".into()));
    }
    let grid = step_grid(cfg.spacing, cfg.n_steps, warp)?;
    let mut out = SampleOutput { tokens: Vec::new(), trajectories: Vec::new() };
    for (chunk_idx, chunk) in conditioning.chunks(SAMPLE_CHUNK).enumerate() {
        let offset = (chunk_idx * SAMPLE_CHUNK) as u64;
        let (tokens, trajs) = sample_chunk(denoiser, embeddings, &grid, cfg, chunk, rng, offset, record_states)?;
        out.tokens.extend(tokens);
        out.trajectories.extend(trajs);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn sample_chunk<D: Denoiser + ?Sized>(
    denoiser: &D,
    emb: &Mat,
    grid: &[f64],
    cfg: &SamplerConfig,
    conds: &[Conditioning],
    rng: &RngStream,
    offset: u64,
    record: bool,
) -> Result<(Vec<Vec<usize>>, Vec<Trajectory>)> {
    let len = conds[0].len();
    let (v, d) = emb.dim();
    if conds.iter().any(|c| c.len() != len || c.tokens.len() != len) {
        return Err(Error::InvalidArgument("conditioning sequences must share a length".into()));
    }
    let t_start = grid[0];
    let mut x = Mat::zeros((conds.len() * len, d));
    let mut seqs = Vec::with_capacity(conds.len());
    for (i, cond) in conds.iter().enumerate() {
        let mut r = rng.split(offset + i as u64);
        let eps = Mat::from_shape_vec((len, d), r.normals(len * d)).expect("shape");
        let xi = Mat::from_shape_vec((len, d), r.normals(len * d)).expect("shape");
        let mut c = Mat::zeros((len, d));
        let mut xi_clean = Mat::zeros((len, d));
        for pos in 0..len {
            if cond.mask[pos] {
                x.row_mut(i * len + pos).assign(&(&eps.row(pos) * (cfg.sigma_init * t_start)));
            } else {
                let tok = cond.tokens[pos];
                if tok >= v {
                    return Err(Error::UnknownToken(tok.to_string()));
                }
                c.row_mut(pos).assign(&emb.row(tok));
                xi_clean.row_mut(pos).assign(&xi.row(pos));
            }
        }
        seqs.push(Seq { cond: cond.clone(), c, xi: xi_clean, p: Mat::zeros((len, d)) });
    }
    let mut field = ScoreField { denoiser, emb, cfg, seqs };
    let mut states: Vec<Vec<Mat>> = vec![Vec::new(); conds.len()];
    let x = integrate(x, grid, cfg.solver, |x, t| field.eval(x, t), |_, x| {
        if record {
            for (i, st) in states.iter_mut().enumerate() {
                st.push(&x.slice(s![i * len..(i + 1) * len, ..]) + &field_c(conds, emb, i));
            }
        }
    })?;
    let t_end = grid[grid.len() - 1];
    let tokens = match cfg.decode {
        Decode::Argmax => {
            let inputs: Vec<DenoiserInput> = field
                .seqs
                .iter()
                .enumerate()
                .map(|(i, s)| DenoiserInput {
                    x: x.slice(s![i * len..(i + 1) * len, ..]).to_owned(),
                    c: s.c.clone(),
                    m: s.cond.mask.clone(),
                    p: s.p.clone(),
                    t: t_end,
                })
                .collect();
            let logits = denoiser.logits(&inputs)?;
            field
                .seqs
                .iter()
                .zip(&logits)
                .map(|(s, lg)| {
                    (0..len)
                        .map(|pos| if s.cond.mask[pos] { argmax(lg.row(pos).to_owned()) } else { s.cond.tokens[pos] })
                        .collect()
                })
                .collect()
        }
        Decode::NearestEmbedding => field
            .seqs
            .iter()
            .map(|s| {
                (0..len)
                    .map(|pos| if s.cond.mask[pos] { nearest_embedding(s.p.row(pos), emb.view()) } else { s.cond.tokens[pos] })
                    .collect()
            })
            .collect(),
    };
    let trajs = states
        .into_iter()
        .map(|st| Trajectory { timesteps: grid.to_vec(), states: record.then_some(st) })
        .collect();
    Ok((tokens, trajs))
}

fn field_c(conds: &[Conditioning], emb: &Mat, i: usize) -> Mat {
    let cond = &conds[i];
    let mut c = Mat::zeros((cond.len(), emb.ncols()));
    for pos in 0..cond.len() {
        if !cond.mask[pos] {
            c.row_mut(pos).assign(&emb.row(cond.tokens[pos]));
        }
    }
    c
}

fn argmax(v: Array1<f64>) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
