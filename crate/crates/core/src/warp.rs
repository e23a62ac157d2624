//! Time warping with a learnable monotone piecewise-linear CDF.
//!
//! Two sets of logits define `N` input bins (on normalised time
//! `t' in [0, 1]`) and `N` output bins. Softmax of both sets gives a
//! normalised CDF `F`; exponentiating the output logits instead gives an
//! unnormalised `F~` with the same shape, which is fitted directly to the
//! per-example cross-entropy observed during training. Inverting `F` (by
//! swapping the bins) turns uniform draws into warped timesteps, and the
//! reciprocal of its piecewise-constant density gives importance weights.

use serde::{Deserialize, Serialize};

use crate::numerics::{ema_update, softmax};
use crate::training::{adam_step, AdamConfig, AdamMoments};
use crate::{Error, Result};

pub const DEFAULT_BINS: usize = 100;
pub const DEFAULT_MIN_BIN: f64 = 1e-4;
pub const DEFAULT_EMA_DECAY: f64 = 0.99;
/// Floor on `F(t')` in the shaped objective, where it appears as a divisor.
pub const SHAPE_FLOOR: f64 = 1e-6;

/// A monotone piecewise-linear CDF on the unit interval, given by matching
/// input and output bin widths (each set summing to one).
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseLinearCdf {
    input: Vec<f64>,
    output: Vec<f64>,
    input_edges: Vec<f64>,
    output_edges: Vec<f64>,
}

fn left_edges(widths: &[f64]) -> Vec<f64> {
    let mut edges = Vec::with_capacity(widths.len());
    let mut acc = 0.0;
    for w in widths {
        edges.push(acc);
        acc += w;
    }
    edges
}

fn bin_of(edges: &[f64], x: f64) -> usize {
    edges.partition_point(|&e| e <= x).saturating_sub(1)
}

impl PiecewiseLinearCdf {
    pub fn from_widths(input: Vec<f64>, output: Vec<f64>) -> Result<Self> {
        if input.len() != output.len() || input.is_empty() {
            return Err(Error::InvalidArgument("bin width sets must be non-empty and equal length".into()));
        }
        for w in [&input, &output] {
            if w.iter().any(|x| !(*x > 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument("bin widths must be positive and sum to one".into()));
            }
        }
        Ok(Self::from_widths_unchecked(input, output))
    }

    fn from_widths_unchecked(input: Vec<f64>, output: Vec<f64>) -> Self {
        let input_edges = left_edges(&input);
        let output_edges = left_edges(&output);
        Self { input, output, input_edges, output_edges }
    }

    pub fn identity(n: usize) -> Self {
        let w = vec![1.0 / n as f64; n];
        Self::from_widths_unchecked(w.clone(), w)
    }

    pub fn bins(&self) -> usize {
        self.input.len()
    }

    pub fn input_widths(&self) -> &[f64] {
        &self.input
    }

    pub fn output_widths(&self) -> &[f64] {
        &self.output
    }

    pub fn input_edges(&self) -> &[f64] {
        &self.input_edges
    }

    /// `u = F(t')`.
    pub fn eval(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        if t >= 1.0 {
            return 1.0;
        }
        let k = bin_of(&self.input_edges, t);
        let slope = self.output[k] / self.input[k];
        (self.output_edges[k] + (t - self.input_edges[k]) * slope).min(1.0)
    }

    /// The inverse CDF, obtained by exchanging input and output bins.
    pub fn swapped(&self) -> Self {
        Self {
            input: self.output.clone(),
            output: self.input.clone(),
            input_edges: self.output_edges.clone(),
            output_edges: self.input_edges.clone(),
        }
    }

    /// `t' = F^-1(u)`.
    pub fn invert(&self, u: f64) -> f64 {
        if u <= 0.0 {
            return 0.0;
        }
        if u >= 1.0 {
            return 1.0;
        }
        let k = bin_of(&self.output_edges, u);
        let slope = self.input[k] / self.output[k];
        (self.input_edges[k] + (u - self.output_edges[k]) * slope).min(1.0)
    }

    /// Piecewise-constant density `w^u_k / w^t_k` of the bin containing `t'`.
    pub fn pdf(&self, t: f64) -> f64 {
        let k = bin_of(&self.input_edges, t.clamp(0.0, 1.0));
        self.output[k] / self.input[k]
    }

    /// Reciprocal density, used to reweight losses of warped timesteps.
    pub fn importance_weight(&self, t: f64) -> f64 {
        let k = bin_of(&self.input_edges, t.clamp(0.0, 1.0));
        self.input[k] / self.output[k]
    }

    /// Raises the density to the power `1 / T` (renormalised).
    pub fn with_temperature(&self, temp: f64) -> Self {
        assert!(temp > 0.0, "temperature must be positive");
        if temp == 1.0 {
            return self.clone();
        }
        let expo = 1.0 / temp - 1.0;
        let raw: Vec<f64> = self
            .output
            .iter()
            .zip(&self.input)
            .map(|(u, t)| u * (u / t).powf(expo))
            .collect();
        let z: f64 = raw.iter().sum();
        Self::from_widths_unchecked(self.input.clone(), raw.into_iter().map(|w| w / z).collect())
    }

    /// Mixture with the uniform distribution, weight `mu` on the uniform.
    pub fn with_uniformity(&self, mu: f64) -> Self {
        assert!((0.0..=1.0).contains(&mu), "uniformity must lie in [0, 1]");
        let out = self
            .output
            .iter()
            .zip(&self.input)
            .map(|(u, t)| (1.0 - mu) * u + mu * t)
            .collect();
        Self::from_widths_unchecked(self.input.clone(), out)
    }
}

/// Post-hoc reshaping of the sampling distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Manipulation {
    Temperature(f64),
    Uniformity(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpConfig {
    pub bins: usize,
    pub min_bin: f64,
    pub ema_decay: f64,
    pub use_ema: bool,
    /// Optimiser used for fitting the unnormalised CDF.
    pub adam: AdamConfig,
    /// Beta-CDF target shape `(alpha, beta)` for the loss in uniform time.
    pub shape: Option<(f64, f64)>,
}

impl WarpConfig {
    pub fn with_adam(adam: AdamConfig) -> Self {
        Self {
            bins: DEFAULT_BINS,
            min_bin: DEFAULT_MIN_BIN,
            ema_decay: DEFAULT_EMA_DECAY,
            use_ema: true,
            adam,
            shape: None,
        }
    }
}

/// Diagnostics from one fitting step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitReport {
    pub weighted_mse: f64,
    pub used: usize,
    pub dropped: usize,
}

/// The learnable warp together with its EMA shadow and optimiser state.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpCdf {
    pub config: WarpConfig,
    pub t_min: f64,
    pub t_max: f64,
    pub input_logits: Vec<f64>,
    pub output_logits: Vec<f64>,
    pub ema_input_logits: Vec<f64>,
    pub ema_output_logits: Vec<f64>,
    pub input_moments: AdamMoments,
    pub output_moments: AdamMoments,
    pub manipulations: Vec<Manipulation>,
}

fn floored_softmax(logits: &[f64], min_bin: f64) -> Vec<f64> {
    let n = logits.len() as f64;
    softmax(logits)
        .into_iter()
        .map(|p| (p + min_bin) / (1.0 + n * min_bin))
        .collect()
}

pub fn normalize_time(t: f64, t_min: f64, t_max: f64) -> Result<f64> {
    if !(t_max > t_min) {
        return Err(Error::InvalidArgument(format!("t_max {t_max} must exceed t_min {t_min}")));
    }
    if !(t >= t_min && t <= t_max) {
        return Err(Error::TimeOutOfRange { t, t_min, t_max });
    }
    Ok((t - t_min) / (t_max - t_min))
}

/// Regularised incomplete Beta function and its density.
fn beta_shape(u: f64, (a, b): (f64, f64)) -> (f64, f64) {
    let u = u.clamp(0.0, 1.0);
    let s = statrs::function::beta::beta_reg(a, b, u);
    let uc = u.clamp(SHAPE_FLOOR, 1.0 - SHAPE_FLOOR);
    let ds = ((a - 1.0) * uc.ln() + (b - 1.0) * (1.0 - uc).ln() - statrs::function::beta::ln_beta(a, b)).exp();
    (s, ds)
}

impl WarpCdf {
    /// Identity initialisation: all logits `-ln N`, so `F~ = F = id`.
    pub fn new(config: WarpConfig, t_min: f64, t_max: f64) -> Result<Self> {
        if !(t_max > t_min && t_min > 0.0) {
            return Err(Error::InvalidArgument("need t_max > t_min > 0".into()));
        }
        if config.bins == 0 {
            return Err(Error::InvalidArgument("need at least one bin".into()));
        }
        let n = config.bins;
        let init = vec![-(n as f64).ln(); n];
        Ok(Self {
            config,
            t_min,
            t_max,
            input_logits: init.clone(),
            output_logits: init.clone(),
            ema_input_logits: init.clone(),
            ema_output_logits: init,
            input_moments: AdamMoments::zeros(n),
            output_moments: AdamMoments::zeros(n),
            manipulations: Vec::new(),
        })
    }

    pub fn bins(&self) -> usize {
        self.config.bins
    }

    pub fn normalize_time(&self, t: f64) -> Result<f64> {
        normalize_time(t, self.t_min, self.t_max)
    }

    pub fn denormalize_time(&self, t_prime: f64) -> f64 {
        self.t_min + (self.t_max - self.t_min) * t_prime
    }

    fn view_of(&self, input: &[f64], output: &[f64]) -> PiecewiseLinearCdf {
        let mut cdf = PiecewiseLinearCdf::from_widths_unchecked(
            floored_softmax(input, self.config.min_bin),
            floored_softmax(output, self.config.min_bin),
        );
        for m in &self.manipulations {
            cdf = match *m {
                Manipulation::Temperature(t) => cdf.with_temperature(t),
                Manipulation::Uniformity(mu) => cdf.with_uniformity(mu),
            };
        }
        cdf
    }

    /// Normalised CDF from the current logits.
    pub fn normalized(&self) -> PiecewiseLinearCdf {
        self.view_of(&self.input_logits, &self.output_logits)
    }

    /// The view used to draw timesteps: the EMA shadow when enabled.
    pub fn sampling_view(&self) -> PiecewiseLinearCdf {
        if self.config.use_ema {
            self.view_of(&self.ema_input_logits, &self.ema_output_logits)
        } else {
            self.normalized()
        }
    }

    pub fn unnormalized_output_widths(&self) -> Vec<f64> {
        self.output_logits.iter().map(|l| l.exp()).collect()
    }

    pub fn eval_cdf(&self, t_prime: f64, normalized: bool) -> f64 {
        if normalized {
            return self.normalized().eval(t_prime);
        }
        let input = floored_softmax(&self.input_logits, self.config.min_bin);
        let edges = left_edges(&input);
        let out = self.unnormalized_output_widths();
        let t = t_prime.clamp(0.0, 1.0);
        let k = bin_of(&edges, t);
        let r = ((t - edges[k]) / input[k]).clamp(0.0, 1.0);
        out[..k].iter().sum::<f64>() + r * out[k]
    }

    pub fn invert_cdf(&self, u: f64) -> f64 {
        self.normalized().invert(u)
    }

    pub fn pdf(&self, t_prime: f64) -> f64 {
        self.normalized().pdf(t_prime)
    }

    pub fn importance_weight(&self, t_prime: f64) -> f64 {
        self.normalized().importance_weight(t_prime)
    }

    /// Warped timestep `t` for a uniform `u`, through the sampling view.
    pub fn sample_timestep(&self, u: f64) -> f64 {
        self.denormalize_time(self.sampling_view().invert(u))
    }

    pub fn warp_temperature(&self, temp: f64) -> Self {
        assert!(temp > 0.0);
        let mut w = self.clone();
        w.manipulations.push(Manipulation::Temperature(temp));
        w
    }

    pub fn warp_uniformity(&self, mu: f64) -> Self {
        assert!((0.0..=1.0).contains(&mu));
        let mut w = self.clone();
        w.manipulations.push(Manipulation::Uniformity(mu));
        w
    }

    /// Importance-weighted MSE between the fitted curve and observed losses,
    /// with its gradient with respect to both logit sets.
    pub fn fit_objective(&self, ts: &[f64], losses: &[f64], weights: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>, FitReport)> {
        if ts.len() != losses.len() || ts.len() != weights.len() {
            return Err(Error::InvalidArgument("fit inputs must have equal lengths".into()));
        }
        let n = self.bins();
        let denom = 1.0 + n as f64 * self.config.min_bin;
        let sig_t = softmax(&self.input_logits);
        let sig_u = softmax(&self.output_logits);
        let wt: Vec<f64> = sig_t.iter().map(|p| (p + self.config.min_bin) / denom).collect();
        let wu: Vec<f64> = sig_u.iter().map(|p| (p + self.config.min_bin) / denom).collect();
        let wtil = self.unnormalized_output_widths();
        let et = left_edges(&wt);
        let eu = left_edges(&wu);
        let etil = left_edges(&wtil);

        let mut g_wt = vec![0.0; n];
        let mut g_wu = vec![0.0; n];
        let mut g_wtil = vec![0.0; n];
        let mut used = 0usize;
        let mut dropped = 0usize;
        let mut total = 0.0;
        let keep: Vec<usize> = (0..ts.len())
            .filter(|&i| {
                let ok = losses[i].is_finite() && weights[i].is_finite();
                if !ok {
                    dropped += 1;
                }
                ok
            })
            .collect();
        let count = keep.len().max(1) as f64;
        for i in keep {
            let tp = self.normalize_time(ts[i])?;
            let k = bin_of(&et, tp);
            let r = (tp - et[k]) / wt[k];
            let f_til = etil[k] + r * wtil[k];
            let f = eu[k] + r * wu[k];
            let (pred, d_ftil, d_f) = match self.config.shape {
                None => (f_til, 1.0, 0.0),
                Some(shape) => {
                    let ff = f.max(SHAPE_FLOOR);
                    let (s, ds) = beta_shape(f, shape);
                    let d_f = if f > SHAPE_FLOOR { ds * f_til / ff - s * f_til / (ff * ff) } else { ds * f_til / ff };
                    (s * f_til / ff, s / ff, d_f)
                }
            };
            let resid = pred - losses[i];
            total += weights[i] * resid * resid;
            used += 1;
            let dg = 2.0 * weights[i] * resid / count;
            let c_til = dg * d_ftil;
            let c_f = dg * d_f;
            for j in 0..k {
                g_wtil[j] += c_til;
                g_wu[j] += c_f;
            }
            g_wtil[k] += c_til * r;
            g_wu[k] += c_f * r;
            // r depends on the input widths up to and including bin k
            let dr_c = -(c_til * wtil[k] + c_f * wu[k]) / wt[k];
            for g in g_wt.iter_mut().take(k) {
                *g += dr_c;
            }
            g_wt[k] += dr_c * r;
        }
        let softmax_back = |sig: &[f64], g: &[f64]| -> Vec<f64> {
            let dot: f64 = sig.iter().zip(g).map(|(s, g)| s * g / denom).sum();
            sig.iter().zip(g).map(|(s, g)| s * (g / denom - dot)).collect()
        };
        let g_in = softmax_back(&sig_t, &g_wt);
        let mut g_out = softmax_back(&sig_u, &g_wu);
        for (go, (gt, w)) in g_out.iter_mut().zip(g_wtil.iter().zip(&wtil)) {
            *go += gt * w;
        }
        let mse = total / count;
        Ok((mse, g_in, g_out, FitReport { weighted_mse: mse, used, dropped }))
    }

    /// One optimiser step on the fitting objective, then an EMA update.
    pub fn fit_step(&mut self, ts: &[f64], losses: &[f64], weights: &[f64]) -> Result<FitReport> {
        if ts.is_empty() {
            return Ok(FitReport { weighted_mse: 0.0, used: 0, dropped: 0 });
        }
        let (_, g_in, g_out, report) = self.fit_objective(ts, losses, weights)?;
        if report.used == 0 {
            return Ok(report);
        }
        let adam = self.config.adam;
        adam_step(&mut self.input_logits, &g_in, &mut self.input_moments, &adam);
        adam_step(&mut self.output_logits, &g_out, &mut self.output_moments, &adam);
        self.update_ema();
        Ok(report)
    }

    pub fn update_ema(&mut self) {
        let d = self.config.ema_decay;
        self.ema_input_logits = ema_update(&self.ema_input_logits, &self.input_logits, d);
        self.ema_output_logits = ema_update(&self.ema_output_logits, &self.output_logits, d);
    }
}
