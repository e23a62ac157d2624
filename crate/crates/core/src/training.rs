//! Training: mask sampling, warped timesteps, importance-weighted warp fits,
//! self-conditioning, masked cross-entropy and Adam.

use ndarray::{s, Array1};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::denoiser::{TapeInputs, Transformer, EMBEDDING};
use crate::embedding::input_scale_factor;
use crate::numerics::{log_sum_exp, low_discrepancy_uniforms, RngStream};
use crate::score::{interpolate_x0, PosteriorDistribution};
use crate::warp::WarpCdf;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8 }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamMoments {
    pub fn zeros(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// Bias-corrected Adam without weight decay.
pub fn adam_step(params: &mut [f64], grads: &[f64], moments: &mut AdamMoments, cfg: &AdamConfig) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), moments.m.len());
    moments.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(moments.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(moments.step as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut moments.m).zip(&mut moments.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// How conditioning masks are drawn during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    PrefixFixed(usize),
    PrefixRandom,
    FullyRandom,
    /// Each example is a prefix mask with this probability, else fully random.
    Mixed(f64),
}

impl MaskStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MaskStrategy::Mixed(f) if !(0.0..=1.0).contains(&f) => {
                Err(Error::Config(format!("prefix fraction {f} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// Which family a drawn mask came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Prefix,
    FullyRandom,
}

/// Draws a mask (`true` = noisy) and reports its family.
pub fn sample_mask_with_kind(strategy: MaskStrategy, len: usize, rng: &mut RngStream) -> (Vec<bool>, MaskKind) {
    assert!(len >= 1);
    let prefix = |k: usize| (0..len).map(|i| i >= k).collect::<Vec<_>>();
    match strategy {
        MaskStrategy::PrefixFixed(k) => (prefix(k.min(len)), MaskKind::Prefix),
        MaskStrategy::PrefixRandom => (prefix(rng.below(len + 1)), MaskKind::Prefix),
        MaskStrategy::FullyRandom => {
            let k = rng.below(len + 1);
            let mut m = vec![true; len];
            for &i in &rng.permutation(len)[..k] {
                m[i] = false;
            }
            (m, MaskKind::FullyRandom)
        }
        MaskStrategy::Mixed(f) => {
            let kind = if rng.bernoulli(f) { MaskStrategy::PrefixRandom } else { MaskStrategy::FullyRandom };
            sample_mask_with_kind(kind, len, rng)
        }
    }
}

pub fn sample_mask(strategy: MaskStrategy, len: usize, rng: &mut RngStream) -> Vec<bool> {
    sample_mask_with_kind(strategy, len, rng).0
}

/// Mean over noisy positions of `-log softmax(logits)[target]`; zero when
/// every position is clean.
pub fn masked_cross_entropy(logits: &Mat, targets: &[usize], m: &[bool]) -> f64 {
    assert_eq!(logits.nrows(), targets.len());
    assert_eq!(m.len(), targets.len());
    let mut total = 0.0;
    let mut count = 0usize;
    for ((row, &y), &noisy) in logits.rows().into_iter().zip(targets).zip(m) {
        if noisy {
            let r: Vec<f64> = row.to_vec();
            total += log_sum_exp(&r) - r[y];
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub cond_dropout: f64,
    pub self_cond_fraction: f64,
    pub steps: u64,
    pub seed: u64,
    pub mask: MaskStrategy,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// When off, timesteps are uniform in `[t_min, t_max]` with unit weights
    /// and the warp is never fitted.
    pub time_warping: bool,
    /// Also multiply each example's CE by its importance weight. Off by
    /// default: the warped timestep distribution is itself the loss
    /// weighting, and the weights only debias the warp fit.
    #[serde(default)]
    pub weight_loss: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.seq_len == 0 {
            return Err(Error::Config("batch and seq_len must be positive".into()));
        }
        for (name, v) in [("cond_dropout", self.cond_dropout), ("self_cond_fraction", self.self_cond_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("invalid optimiser settings".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        self.mask.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.lr, self.beta1, self.beta2)
    }

    /// Number of examples that get the extra self-conditioning pass.
    pub fn self_cond_count(&self) -> usize {
        (self.batch as f64 * self.self_cond_fraction).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossStats {
    pub step: u64,
    pub mean_weighted_ce: f64,
    /// `(t, raw_ce)` per example.
    pub per_example: Vec<(f64, f64)>,
}

impl LossStats {
    /// Empirical quantile of the sampled timesteps (nearest rank).
    pub fn t_quantile(&self, q: f64) -> f64 {
        let mut ts: Vec<f64> = self.per_example.iter().map(|p| p.0).collect();
        ts.sort_by(f64::total_cmp);
        if ts.is_empty() {
            return f64::NAN;
        }
        let idx = ((q * (ts.len() - 1) as f64).round() as usize).min(ts.len() - 1);
        ts[idx]
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Transformer,
    pub moments: Vec<AdamMoments>,
    pub warp: WarpCdf,
    /// Steps completed so far.
    pub step: u64,
}

impl TrainState {
    pub fn new(model: Transformer, warp: WarpCdf) -> Self {
        let moments = model.params.values.iter().map(|v| AdamMoments::zeros(v.len())).collect();
        Self { model, moments, warp, step: 0 }
    }
}

const TRAIN_STREAM: u64 = 0x7472_6169_6e;

/// Randomness for one training step; depends only on `(seed, step)`.
pub fn step_rng(seed: u64, step: u64) -> RngStream {
    RngStream::new(seed, TRAIN_STREAM).split(step)
}

/// Per-example training inputs before they go on the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct ExamplePlan {
    pub t: f64,
    /// Importance weight `1 / pdf(t')`, used when fitting the warp.
    pub weight: f64,
    /// Multiplier on this example's CE in the model loss.
    pub loss_weight: f64,
    /// Mask used for the loss (`true` = noisy, scored).
    pub loss_mask: Vec<bool>,
    /// Mask fed to the model; all noisy after conditioning dropout.
    pub input_mask: Vec<bool>,
    pub dropped: bool,
    /// `L x d` standard normal noise.
    pub noise: Mat,
}

/// Draws timesteps, weights, masks, dropout and noise for a batch.
pub fn plan_batch(cfg: &TrainConfig, warp: &WarpCdf, batch: usize, len: usize, d: usize, rng: &RngStream) -> Vec<ExamplePlan> {
    let us = low_discrepancy_uniforms(&mut rng.split(0), batch);
    let view = warp.sampling_view();
    us.iter()
        .enumerate()
        .map(|(b, &u)| {
            let (t, weight) = if cfg.time_warping {
                let tp = view.invert(u);
                (warp.denormalize_time(tp), view.importance_weight(tp))
            } else {
                (warp.denormalize_time(u), 1.0)
            };
            let mut ex = rng.split(16 + b as u64);
            let loss_mask = sample_mask(cfg.mask, len, &mut ex);
            let dropped = ex.bernoulli(cfg.cond_dropout);
            let input_mask = if dropped { vec![true; len] } else { loss_mask.clone() };
            let noise = Mat::from_shape_vec((len, d), ex.normals(len * d)).expect("shape");
            let loss_weight = if cfg.weight_loss { weight } else { 1.0 };
            ExamplePlan { t, weight, loss_weight, loss_mask, input_mask, dropped, noise }
        })
        .collect()
}

fn broadcast_mask(m: &[bool], d: usize, noisy: bool) -> Mat {
    Mat::from_shape_fn((m.len(), d), |(r, _)| if m[r] == noisy { 1.0 } else { 0.0 })
}

/// Puts noisy and conditioning inputs on the tape from token ids, so that
/// gradients reach the embedding table through both.
pub fn embed_inputs(tape: &mut Tape, emb: Var, tokens: &[usize], plans: &[ExamplePlan], d: usize) -> (Var, Var) {
    let x0 = tape.gather(emb, tokens);
    let masks: Vec<bool> = plans.iter().flat_map(|p| p.input_mask.iter().copied()).collect();
    let noisy = tape.constant(broadcast_mask(&masks, d, true));
    let clean = tape.constant(broadcast_mask(&masks, d, false));
    let len = plans[0].input_mask.len();
    let mut noise = Mat::zeros((masks.len(), d));
    let mut scale = Array1::zeros(masks.len());
    for (b, p) in plans.iter().enumerate() {
        let s = input_scale_factor(p.t);
        for i in 0..len {
            let r = b * len + i;
            scale[r] = s;
            if p.input_mask[i] {
                noise.row_mut(r).assign(&(&p.noise.row(i) * p.t));
            }
        }
    }
    let noise = tape.constant(noise);
    let x = tape.mul(x0, noisy);
    let x = tape.add(x, noise);
    let x = tape.scale_rows(x, scale);
    let c = tape.mul(x0, clean);
    (x, c)
}

/// Gradient-free first pass giving the self-conditioning input `p` for
/// the first `count` examples (zero elsewhere and at clean positions).
pub fn self_condition(model: &Transformer, emb: &Mat, tokens: &[usize], plans: &[ExamplePlan], count: usize) -> Result<Mat> {
    let len = plans[0].input_mask.len();
    let d = emb.ncols();
    let mut p = Mat::zeros((plans.len() * len, d));
    if count == 0 {
        return Ok(p);
    }
    let mut tape = Tape::new();
    let leaves = model.leaves(&mut tape, false);
    let e = tape.constant(emb.clone());
    let (x, c) = embed_inputs(&mut tape, e, &tokens[..count * len], &plans[..count], d);
    let zero = tape.constant(Mat::zeros((count * len, d)));
    let inputs = TapeInputs {
        x,
        c,
        p: zero,
        m: plans[..count].iter().flat_map(|p| p.input_mask.iter().copied()).collect(),
        ts: plans[..count].iter().map(|p| p.t).collect(),
        len,
    };
    let logits = model.forward_on_tape(&mut tape, &leaves, &inputs)?;
    let probs = PosteriorDistribution::from_logits(tape.value(logits));
    for r in 0..count * len {
        if inputs.m[r] {
            p.row_mut(r).assign(&interpolate_x0(probs.position(r), emb.view()));
        }
    }
    Ok(p)
}

/// Loss value and gradients for one batch, without updating anything.
pub struct BatchLoss {
    pub mean_weighted_ce: f64,
    pub raw_ce: Vec<f64>,
    pub grads: Vec<Mat>,
}

pub fn batch_loss(model: &Transformer, tokens: &[Vec<usize>], plans: &[ExamplePlan], self_cond: usize) -> Result<BatchLoss> {
    if tokens.is_empty() || tokens.len() != plans.len() {
        return Err(Error::InvalidArgument("batch must be non-empty and match its plan".into()));
    }
    let len = tokens[0].len();
    if tokens.iter().any(|s| s.len() != len) {
        return Err(Error::InvalidArgument("batch sequences must share a length".into()));
    }
    let v = model.config.vocab;
    if let Some(bad) = tokens.iter().flatten().find(|&&y| y >= v) {
        return Err(Error::UnknownToken(bad.to_string()));
    }
    let flat: Vec<usize> = tokens.iter().flatten().copied().collect();
    let p = self_condition(model, &model.embeddings()?, &flat, plans, self_cond)?;
    batch_loss_given_p(model, tokens, plans, p)
}

/// As [`batch_loss`] with a fixed (detached) self-conditioning input.
pub fn batch_loss_given_p(model: &Transformer, tokens: &[Vec<usize>], plans: &[ExamplePlan], p: Mat) -> Result<BatchLoss> {
    let len = tokens[0].len();
    let d = model.config.d;
    let flat: Vec<usize> = tokens.iter().flatten().copied().collect();
    if p.dim() != (flat.len(), d) {
        return Err(Error::InvalidArgument("self-conditioning input has the wrong shape".into()));
    }
    let table = model.embedding_table();
    let mut tape = Tape::new();
    let leaves = model.leaves(&mut tape, true);
    let emb = table.normalized_on_tape(&mut tape, leaves[EMBEDDING])?;
    let (x, c) = embed_inputs(&mut tape, emb, &flat, plans, d);
    let p = tape.constant(p);
    let inputs = TapeInputs {
        x,
        c,
        p,
        m: plans.iter().flat_map(|p| p.input_mask.iter().copied()).collect(),
        ts: plans.iter().map(|p| p.t).collect(),
        len,
    };
    let logits = model.forward_on_tape(&mut tape, &leaves, &inputs)?;
    let b = tokens.len() as f64;
    let mut weights = Vec::with_capacity(flat.len());
    for pl in plans {
        let n = pl.loss_mask.iter().filter(|&&m| m).count();
        for &m in &pl.loss_mask {
            weights.push(if m { pl.loss_weight / (b * n as f64) } else { 0.0 });
        }
    }
    let loss = tape.cross_entropy(logits, &flat, &weights);
    let value = tape.value(loss)[[0, 0]];
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss(0));
    }
    let all = tape.value(logits);
    let raw_ce = plans
        .iter()
        .enumerate()
        .map(|(i, pl)| {
            let rows = all.slice(s![i * len..(i + 1) * len, ..]).to_owned();
            masked_cross_entropy(&rows, &tokens[i], &pl.loss_mask)
        })
        .collect();
    let mut g = tape.backward(loss);
    let grads = leaves
        .iter()
        .zip(&model.params.values)
        .map(|(&l, v)| g.take(l).unwrap_or_else(|| Mat::zeros(v.dim())))
        .collect();
    Ok(BatchLoss { mean_weighted_ce: value, raw_ce, grads })
}

/// Scales gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

/// One optimisation step of denoiser, embeddings and warp.
pub fn train_step(state: &mut TrainState, batch: &[Vec<usize>], cfg: &TrainConfig) -> Result<LossStats> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let rng = step_rng(cfg.seed, state.step);
    let len = batch[0].len();
    let plans = plan_batch(cfg, &state.warp, batch.len(), len, state.model.config.d, &rng);
    let self_cond = ((batch.len() as f64) * cfg.self_cond_fraction).round() as usize;
    let mut out = batch_loss(&state.model, batch, &plans, self_cond).map_err(|e| match e {
        Error::NonFiniteLoss(_) => Error::NonFiniteLoss(state.step),
        other => other,
    })?;
    if let Some(c) = cfg.grad_clip {
        clip_global_norm(&mut out.grads, c);
    }
    let adam = cfg.adam();
    for ((param, grad), moments) in state.model.params.values.iter_mut().zip(&out.grads).zip(&mut state.moments) {
        let p = param.as_slice_mut().expect("standard layout");
        adam_step(p, grad.as_slice().expect("standard layout"), moments, &adam);
    }
    let ts: Vec<f64> = plans.iter().map(|p| p.t).collect();
    if cfg.time_warping {
        let ws: Vec<f64> = plans.iter().map(|p| p.weight).collect();
        state.warp.fit_step(&ts, &out.raw_ce, &ws)?;
    }
    let stats = LossStats {
        step: state.step,
        mean_weighted_ce: out.mean_weighted_ce,
        per_example: ts.into_iter().zip(out.raw_ce).collect(),
    };
    state.step += 1;
    Ok(stats)
}

/// Supplies training batches; batch contents depend only on
/// `(seed, step)` so that resumed runs see the same data.
pub trait BatchSource {
    fn batch(&self, seed: u64, step: u64, batch: usize, len: usize) -> Result<Vec<Vec<usize>>>;
}

const DATA_STREAM: u64 = 0x6461_7461;

/// Randomness for the data of one training step.
pub fn data_rng(seed: u64, step: u64) -> RngStream {
    RngStream::new(seed, DATA_STREAM).split(step)
}

/// Runs training until `state.step == cfg.steps`, calling `on_step` after
/// every step.
pub fn train<S, F>(state: &mut TrainState, source: &S, cfg: &TrainConfig, mut on_step: F) -> Result<()>
where
    S: BatchSource + ?Sized,
    F: FnMut(&TrainState, &LossStats) -> Result<()>,
{
    cfg.validate()?;
    while state.step < cfg.steps {
        let batch = source.batch(cfg.seed, state.step, cfg.batch, cfg.seq_len)?;
        let stats = train_step(state, &batch, cfg)?;
        on_step(state, &stats)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::numerics::finite_diff_check;
    use crate::warp::WarpConfig;

    fn tiny_model(seed: u64) -> Transformer {
        tiny_model_scaled(seed, 0.001)
    }

    fn tiny_model_scaled(seed: u64, embed_scale: f64) -> Transformer {
        let cfg = DenoiserConfig { blocks: 2, width: 8, heads: 2, d: 3, vocab: 5, fourier_features: 4, time_mlp_width: 4 };
        Transformer::init(cfg, embed_scale, &mut RngStream::new(seed, 0)).unwrap()
    }

    fn cfg(batch: usize, len: usize) -> TrainConfig {
        TrainConfig {
            batch,
            seq_len: len,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            cond_dropout: 0.1,
            self_cond_fraction: 0.5,
            steps: 10,
            seed: 3,
            mask: MaskStrategy::Mixed(0.5),
            grad_clip: Some(1.0),
            time_warping: true,
            weight_loss: false,
        }
    }

    fn warp() -> WarpCdf {
        WarpCdf::new(WarpConfig::with_adam(AdamConfig::new(1e-3, 0.9, 0.99)), 1.0, 300.0).unwrap()
    }

    fn tokens(rng: &mut RngStream, batch: usize, len: usize, vocab: usize) -> Vec<Vec<usize>> {
        (0..batch).map(|_| (0..len).map(|_| rng.below(vocab)).collect()).collect()
    }

    #[test]
    fn adam_examples() {
        let cfg = AdamConfig::new(0.1, 0.9, 0.99);
        let mut p = vec![1.0, -2.0];
        let mut m = AdamMoments::zeros(2);
        adam_step(&mut p, &[0.0, 0.0], &mut m, &cfg);
        assert_eq!(p, vec![1.0, -2.0]);

        let mut p = vec![0.0];
        let mut m = AdamMoments::zeros(1);
        adam_step(&mut p, &[1.0], &mut m, &cfg);
        assert!((p[0] + 0.1).abs() < 1e-8, "{}", p[0]);

        let mut prev = p[0];
        for _ in 0..50 {
            adam_step(&mut p, &[1.0], &mut m, &cfg);
            assert!(p[0] < prev);
            prev = p[0];
        }
    }

    #[test]
    fn prefix_fixed_example() {
        let m = sample_mask(MaskStrategy::PrefixFixed(2), 4, &mut RngStream::new(0, 0));
        assert_eq!(m, vec![false, false, true, true]);
    }

    #[test]
    fn prefix_masks_are_prefixes() {
        let mut rng = RngStream::new(5, 0);
        for _ in 0..200 {
            let m = sample_mask(MaskStrategy::PrefixRandom, 6, &mut rng);
            let k = m.iter().filter(|&&x| !x).count();
            assert!(m[..k].iter().all(|&x| !x) && m[k..].iter().all(|&x| x));
        }
    }

    #[test]
    fn fully_random_clean_counts_are_uniform() {
        let len = 7;
        let n = 100_000;
        let mut counts = vec![0usize; len + 1];
        let mut rng = RngStream::new(9, 0);
        for _ in 0..n {
            let m = sample_mask(MaskStrategy::FullyRandom, len, &mut rng);
            counts[m.iter().filter(|&&x| !x).count()] += 1;
        }
        let p = 1.0 / (len + 1) as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{c}");
        }
    }

    #[test]
    fn mixed_prefix_fraction() {
        let n = 100_000;
        let mut rng = RngStream::new(10, 0);
        let prefixes = (0..n)
            .filter(|_| sample_mask_with_kind(MaskStrategy::Mixed(0.5), 8, &mut rng).1 == MaskKind::Prefix)
            .count();
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((prefixes as f64 - 0.5 * n as f64).abs() < 3.0 * sigma);
    }

    #[test]
    fn masked_cross_entropy_examples() {
        let uniform = Mat::zeros((3, 4));
        let ce = masked_cross_entropy(&uniform, &[0, 1, 2], &[true; 3]);
        assert!((ce - 4f64.ln()).abs() < 1e-12);
        let mut sharp = Mat::zeros((2, 4));
        sharp[[0, 1]] = 800.0;
        sharp[[1, 3]] = 800.0;
        assert!(masked_cross_entropy(&sharp, &[1, 3], &[true, true]) < 1e-300);
        assert_eq!(masked_cross_entropy(&uniform, &[0, 1, 2], &[false; 3]), 0.0);

        let mut tape = Tape::new();
        let l = tape.param(uniform);
        let loss = tape.cross_entropy(l, &[0, 1, 2], &[0.0; 3]);
        assert_eq!(tape.value(loss)[[0, 0]], 0.0);
        assert!(tape.backward(loss).get(l).map_or(true, |g| g.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn self_conditioning_split() {
        assert_eq!(cfg(8, 4).self_cond_count(), 4);
        let mut c = cfg(8, 4);
        c.self_cond_fraction = 0.0;
        assert_eq!(c.self_cond_count(), 0);
    }

    #[test]
    fn identity_warp_gives_unit_weights() {
        let plans = plan_batch(&cfg(16, 4), &warp(), 16, 4, 3, &RngStream::new(1, 1));
        assert!(plans.iter().all(|p| (p.weight - 1.0).abs() < 1e-12));
        let model = tiny_model(1);
        let toks = tokens(&mut RngStream::new(2, 0), 16, 4, 5);
        let out = batch_loss(&model, &toks, &plans, 0).unwrap();
        // with unit weights the weighted mean is the plain mean of per-example CE
        let plain = out.raw_ce.iter().sum::<f64>() / 16.0;
        assert!((out.mean_weighted_ce - plain).abs() < 1e-12);
    }

    #[test]
    fn importance_weights_reach_the_loss_only_on_request() {
        let mut w = warp();
        w.config.use_ema = false;
        w.output_logits = RngStream::new(4, 0).normals(w.bins());
        let mut c = cfg(16, 4);
        let plans = plan_batch(&c, &w, 16, 4, 3, &RngStream::new(1, 1));
        assert!(plans.iter().any(|p| (p.weight - 1.0).abs() > 0.1));
        assert!(plans.iter().all(|p| p.loss_weight == 1.0));
        c.weight_loss = true;
        let plans = plan_batch(&c, &w, 16, 4, 3, &RngStream::new(1, 1));
        assert!(plans.iter().all(|p| p.loss_weight == p.weight));
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut state = TrainState::new(tiny_model(4), warp());
            let c = cfg(4, 5);
            let mut data = RngStream::new(77, 0);
            (0..3)
                .map(|_| {
                    let b = tokens(&mut data, 4, 5, 5);
                    train_step(&mut state, &b, &c).unwrap()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn unused_embedding_rows_get_no_gradient() {
        let model = tiny_model(5);
        let mut rng = RngStream::new(6, 0);
        let toks: Vec<Vec<usize>> = (0..4).map(|_| (0..5).map(|_| rng.below(4)).collect()).collect();
        let plans = plan_batch(&cfg(4, 5), &warp(), 4, 5, 3, &rng);
        let out = batch_loss(&model, &toks, &plans, 2).unwrap();
        assert!(out.grads[EMBEDDING].row(4).iter().all(|v| *v == 0.0));
        assert!(out.grads[EMBEDDING].row(0).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn dropped_examples_see_no_conditioning() {
        let mut c = cfg(6, 5);
        c.cond_dropout = 1.0;
        c.mask = MaskStrategy::PrefixFixed(3);
        let rng = RngStream::new(8, 0);
        let plans = plan_batch(&c, &warp(), 6, 5, 3, &rng);
        assert!(plans.iter().all(|p| p.dropped && p.input_mask.iter().all(|&m| m)));
        assert!(plans.iter().all(|p| p.loss_mask == vec![false, false, false, true, true]));
        let model = tiny_model(8);
        let emb = model.embeddings().unwrap();
        let embed = |toks: &[usize]| {
            let mut tape = Tape::new();
            let e = tape.constant(emb.clone());
            let (_, cvar) = embed_inputs(&mut tape, e, toks, &plans[..1], 3);
            tape.value(cvar).clone()
        };
        assert!(embed(&[0, 1, 2, 3, 4]).iter().all(|v| *v == 0.0));
        assert_eq!(embed(&[0, 1, 2, 3, 4]), embed(&[4, 4, 4, 3, 4]));
    }

    #[test]
    fn full_gradient_with_detached_self_conditioning() {
        // normalisation is scale invariant; unit-scale rows keep the finite
        // differences well conditioned
        let mut model = tiny_model_scaled(11, 1.0);
        let mut rng = RngStream::new(12, 0);
        let toks = tokens(&mut rng, 3, 4, 5);
        let mut c = cfg(3, 4);
        c.cond_dropout = 0.3;
        let plans = plan_batch(&c, &warp(), 3, 4, 3, &rng);
        let flat: Vec<usize> = toks.iter().flatten().copied().collect();
        let p = self_condition(&model, &model.embeddings().unwrap(), &flat, &plans, 2).unwrap();
        assert!(p.iter().any(|v| *v != 0.0));
        let full = batch_loss(&model, &toks, &plans, 2).unwrap();
        let fixed = batch_loss_given_p(&model, &toks, &plans, p.clone()).unwrap();
        assert_eq!(full.grads, fixed.grads);
        let analytic: Vec<Vec<f64>> = full.grads.iter().map(|g| g.iter().copied().collect()).collect();
        let shell = model.clone();
        let reports = finite_diff_check(&mut model.params, &analytic, |params| {
            let m = shell.with_params(params.clone());
            batch_loss_given_p(&m, &toks, &plans, p.clone()).unwrap().mean_weighted_ce
        }, 1e-5);
        for r in &reports {
            assert!(r.passed(1e-4), "{r:?}");
        }
    }
}
