//! Desk-scale evaluation against sources whose distribution is known
//! exactly, plus measurement of ODE solver convergence order.

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::denoiser::{Denoiser, DenoiserInput};
use crate::embedding::Vocabulary;
use crate::numerics::{log_sum_exp, RngStream};
use crate::sampler::{integrate, step_grid, Solver, Spacing};
use crate::score::{interpolate_x0, oracle_score, OracleSpec, PosteriorDistribution};
use crate::training::{data_rng, BatchSource};
use crate::warp::WarpCdf;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceKind {
    Iid { probs: Vec<f64> },
    Markov { transition: Vec<Vec<f64>>, initial: Vec<f64> },
}

/// A token generator with exactly computable likelihoods.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSource {
    pub kind: SourceKind,
    pub vocab: Vocabulary,
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|x| !(*x >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("{what} must be a probability vector")));
    }
    Ok(())
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

fn draw(p: &[f64], rng: &mut RngStream) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

impl SyntheticSource {
    pub fn new(kind: SourceKind) -> Result<Self> {
        let v = match &kind {
            SourceKind::Iid { probs } => {
                check_distribution(probs, "iid probabilities")?;
                probs.len()
            }
            SourceKind::Markov { transition, initial } => {
                check_distribution(initial, "initial distribution")?;
                if transition.len() != initial.len() || transition.iter().any(|r| r.len() != initial.len()) {
                    return Err(Error::InvalidArgument("transition matrix must be V x V".into()));
                }
                for row in transition {
                    check_distribution(row, "transition row")?;
                }
                initial.len()
            }
        };
        if v == 0 {
            return Err(Error::InvalidArgument("empty source vocabulary".into()));
        }
        Ok(Self { kind, vocab: Vocabulary::numbered(v) })
    }

    pub fn iid(probs: Vec<f64>) -> Result<Self> {
        Self::new(SourceKind::Iid { probs })
    }

    pub fn markov(transition: Vec<Vec<f64>>, initial: Vec<f64>) -> Result<Self> {
        Self::new(SourceKind::Markov { transition, initial })
    }

    /// The four-state chain used for end-to-end checks: each state mostly
    /// moves one step forward around a cycle. Doubly stochastic, so the
    /// uniform start is stationary.
    pub fn toy_markov() -> Self {
        let rows = (0..4)
            .map(|i| {
                let mut r = vec![0.0; 4];
                r[i] = 0.1;
                r[(i + 1) % 4] = 0.6;
                r[(i + 2) % 4] = 0.2;
                r[(i + 3) % 4] = 0.1;
                r
            })
            .collect();
        Self::markov(rows, vec![0.25; 4]).expect("valid chain")
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn sample_sequence(&self, len: usize, rng: &mut RngStream) -> Vec<usize> {
        match &self.kind {
            SourceKind::Iid { probs } => (0..len).map(|_| draw(probs, rng)).collect(),
            SourceKind::Markov { transition, initial } => {
                let mut out = Vec::with_capacity(len);
                for i in 0..len {
                    let p = if i == 0 { initial } else { &transition[out[i - 1]] };
                    out.push(draw(p, rng));
                }
                out
            }
        }
    }

    pub fn sample_batch(&self, n: usize, len: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
        (0..n).map(|_| self.sample_sequence(len, rng)).collect()
    }

    /// `log p(seq)`; `-inf` for sequences outside the support.
    pub fn log_prob(&self, seq: &[usize]) -> Result<f64> {
        let v = self.vocab_size();
        if let Some(bad) = seq.iter().find(|&&y| y >= v) {
            return Err(Error::UnknownToken(bad.to_string()));
        }
        Ok(match &self.kind {
            SourceKind::Iid { probs } => seq.iter().map(|&y| probs[y].ln()).sum(),
            SourceKind::Markov { transition, initial } => seq
                .iter()
                .enumerate()
                .map(|(i, &y)| if i == 0 { initial[y].ln() } else { transition[seq[i - 1]][y].ln() })
                .sum(),
        })
    }

    /// Stationary distribution (the token distribution for iid sources).
    pub fn stationary(&self) -> Vec<f64> {
        match &self.kind {
            SourceKind::Iid { probs } => probs.clone(),
            SourceKind::Markov { transition, initial } => {
                let v = initial.len();
                let mut pi = vec![1.0 / v as f64; v];
                for _ in 0..100_000 {
                    let next: Vec<f64> = (0..v).map(|j| (0..v).map(|i| pi[i] * transition[i][j]).sum()).collect();
                    let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
                    pi = next;
                    if delta < 1e-15 {
                        break;
                    }
                }
                pi
            }
        }
    }

    /// Conditional entropy of the next token given the past, in nats.
    pub fn entropy_rate(&self) -> f64 {
        match &self.kind {
            SourceKind::Iid { probs } => entropy(probs),
            SourceKind::Markov { transition, .. } => {
                self.stationary().iter().zip(transition).map(|(p, row)| p * entropy(row)).sum()
            }
        }
    }

    /// Exact expected per-token NLL of length-`len` sequences.
    pub fn expected_nll(&self, len: usize) -> f64 {
        match &self.kind {
            SourceKind::Iid { probs } => entropy(probs),
            SourceKind::Markov { transition, initial } => {
                let v = initial.len();
                let mut marginal = initial.clone();
                let mut total = entropy(initial);
                for _ in 1..len {
                    total += marginal.iter().zip(transition).map(|(p, row)| p * entropy(row)).sum::<f64>();
                    marginal = (0..v).map(|j| (0..v).map(|i| marginal[i] * transition[i][j]).sum()).collect();
                }
                total / len as f64
            }
        }
    }
}

impl BatchSource for SyntheticSource {
    fn batch(&self, seed: u64, step: u64, batch: usize, len: usize) -> Result<Vec<Vec<usize>>> {
        Ok(self.sample_batch(batch, len, &mut data_rng(seed, step)))
    }
}

/// Entropy of the empirical token distribution, in nats.
pub fn unigram_entropy(samples: &[Vec<usize>]) -> Result<f64> {
    let counts = token_counts(samples, None);
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("no tokens to measure".into()));
    }
    let p: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(entropy(&p))
}

fn token_counts(samples: &[Vec<usize>], vocab: Option<usize>) -> Vec<usize> {
    let max = samples.iter().flatten().copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; vocab.unwrap_or(0).max(max)];
    for &y in samples.iter().flatten() {
        counts[y] += 1;
    }
    counts
}

/// Mean negative log-likelihood per token under the source; `+inf` when
/// a sample leaves the source's support.
pub fn source_nll(source: &SyntheticSource, samples: &[Vec<usize>]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in samples {
        total -= source.log_prob(s)?;
        n += s.len();
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no tokens to score".into()));
    }
    Ok(total / n as f64)
}

/// `1/2 sum |empirical_i - truth_i|` over tokens.
pub fn marginal_tv(samples: &[Vec<usize>], truth: &[f64]) -> f64 {
    let counts = token_counts(samples, Some(truth.len()));
    let total = counts.iter().sum::<usize>().max(1) as f64;
    let mut tv = 0.0;
    for (i, &c) in counts.iter().enumerate() {
        let q = truth.get(i).copied().unwrap_or(0.0);
        tv += (c as f64 / total - q).abs();
    }
    0.5 * tv
}

/// Row-normalised empirical transition matrix and per-row counts.
pub fn bigram_matrix(samples: &[Vec<usize>], vocab: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut counts = vec![vec![0usize; vocab]; vocab];
    for s in samples {
        for w in s.windows(2) {
            counts[w[0]][w[1]] += 1;
        }
    }
    let totals: Vec<usize> = counts.iter().map(|r| r.iter().sum()).collect();
    let probs = counts
        .iter()
        .zip(&totals)
        .map(|(r, &n)| r.iter().map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect())
        .collect();
    (probs, totals)
}

/// Largest per-row total-variation distance between the empirical bigram
/// matrix and `transition`; rows never visited count as distance 1.
pub fn bigram_tv(samples: &[Vec<usize>], transition: &[Vec<f64>]) -> f64 {
    let (emp, totals) = bigram_matrix(samples, transition.len());
    emp.iter()
        .zip(transition)
        .zip(&totals)
        .map(|((e, t), &n)| if n == 0 { 1.0 } else { 0.5 * e.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() })
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub unigram_entropy_nats: f64,
    pub tv_to_truth: f64,
    pub nll_truth: f64,
    pub n_samples: usize,
    /// Worst-row bigram TV, for Markov sources.
    pub bigram_tv: Option<f64>,
}

impl MetricsReport {
    pub fn compute(source: &SyntheticSource, samples: &[Vec<usize>]) -> Result<Self> {
        Ok(Self {
            unigram_entropy_nats: unigram_entropy(samples)?,
            tv_to_truth: marginal_tv(samples, &source.stationary()),
            nll_truth: source_nll(source, samples)?,
            n_samples: samples.len(),
            bigram_tv: match &source.kind {
                SourceKind::Markov { transition, .. } => Some(bigram_tv(samples, transition)),
                SourceKind::Iid { .. } => None,
            },
        })
    }

    pub const CSV_HEADER: &'static str = "n_samples,unigram_entropy_nats,tv_to_truth,nll_truth,bigram_tv";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.n_samples,
            self.unigram_entropy_nats,
            self.tv_to_truth,
            self.nll_truth,
            self.bigram_tv.map_or(String::new(), |v| v.to_string())
        )
    }
}

/// Cross-entropy of the first generated token after a clean prefix.
///
/// Each sequence keeps a uniformly chosen prefix of `1..L-1` tokens clean
/// and noises the rest at level `t`. Only the first noisy position is
/// scored, so for a Markov source the Bayes-optimal value tends to the
/// entropy rate as `t` grows. With `self_cond` the prediction of a first
/// pass is fed back as `p`, as during training.
pub fn next_token_ce<D: Denoiser + ?Sized>(
    denoiser: &D,
    embeddings: &Mat,
    source: &SyntheticSource,
    len: usize,
    t: f64,
    n: usize,
    self_cond: bool,
    rng: &RngStream,
) -> Result<f64> {
    if len < 2 {
        return Err(Error::InvalidArgument("need at least two positions".into()));
    }
    let d = embeddings.ncols();
    let mut data = rng.split(0);
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let count = (n - start).min(128);
        let mut inputs = Vec::with_capacity(count);
        let mut targets = Vec::with_capacity(count);
        for i in start..start + count {
            let seq = source.sample_sequence(len, &mut data);
            let mut r = rng.split(1 + i as u64);
            let k = 1 + r.below(len - 1);
            let mut x = Mat::zeros((len, d));
            let mut c = Mat::zeros((len, d));
            let eps = r.normals(len * d);
            for pos in 0..len {
                let e = embeddings.row(seq[pos]);
                if pos < k {
                    c.row_mut(pos).assign(&e);
                } else {
                    for j in 0..d {
                        x[[pos, j]] = e[j] + t * eps[pos * d + j];
                    }
                }
            }
            let m = (0..len).map(|p| p >= k).collect();
            inputs.push(DenoiserInput { x, c, m, p: Mat::zeros((len, d)), t });
            targets.push((k, seq[k]));
        }
        if self_cond {
            let first = denoiser.logits(&inputs)?;
            for (inp, lg) in inputs.iter_mut().zip(&first) {
                let post = PosteriorDistribution::from_logits(lg);
                for pos in 0..len {
                    if inp.m[pos] {
                        inp.p.row_mut(pos).assign(&interpolate_x0(post.position(pos), embeddings.view()));
                    }
                }
            }
        }
        for (lg, (k, y)) in denoiser.logits(&inputs)?.iter().zip(targets) {
            let row = lg.row(k).to_vec();
            total += log_sum_exp(&row) - row[y];
        }
        start += count;
    }
    Ok(total / n as f64)
}

/// Exact per-position posterior `p(x0_i | x, c, t)` for a synthetic source
/// observed through Gaussian corruption of fixed embeddings, by
/// forward-backward. Clean positions pin their token; an iid source is a
/// chain whose rows all equal the marginal.
#[derive(Clone, Debug)]
pub struct SourcePosterior {
    log_initial: Vec<f64>,
    log_transition: Vec<Vec<f64>>,
    embeddings: Mat,
}

impl SourcePosterior {
    pub fn new(source: &SyntheticSource, embeddings: Mat) -> Result<Self> {
        let v = source.vocab_size();
        if embeddings.nrows() != v {
            return Err(Error::InvalidArgument("embedding table does not match the source vocabulary".into()));
        }
        let (initial, transition) = match &source.kind {
            SourceKind::Iid { probs } => (probs.clone(), vec![probs.clone(); v]),
            SourceKind::Markov { transition, initial } => (initial.clone(), transition.clone()),
        };
        Ok(Self {
            log_initial: initial.iter().map(|p| p.ln()).collect(),
            log_transition: transition.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect(),
            embeddings,
        })
    }

    fn emissions(&self, inp: &DenoiserInput) -> Vec<Vec<f64>> {
        let v = self.embeddings.nrows();
        (0..inp.len())
            .map(|i| {
                if inp.m[i] {
                    (0..v)
                        .map(|k| {
                            let diff = &inp.x.row(i) - &self.embeddings.row(k);
                            -diff.dot(&diff) / (2.0 * inp.t * inp.t)
                        })
                        .collect()
                } else {
                    let token = crate::score::nearest_embedding(inp.c.row(i), self.embeddings.view());
                    (0..v).map(|k| if k == token { 0.0 } else { f64::NEG_INFINITY }).collect()
                }
            })
            .collect()
    }
}

impl Denoiser for SourcePosterior {
    fn vocab(&self) -> usize {
        self.embeddings.nrows()
    }

    /// Log posterior marginals (unnormalised logits).
    fn logits(&self, batch: &[DenoiserInput]) -> Result<Vec<Mat>> {
        let v = self.vocab();
        batch
            .iter()
            .map(|inp| {
                inp.validate()?;
                if inp.x.ncols() != self.embeddings.ncols() || inp.c.ncols() != self.embeddings.ncols() {
                    return Err(Error::InvalidArgument("input width does not match the embeddings".into()));
                }
                let l = inp.len();
                if l == 0 {
                    return Ok(Mat::zeros((0, v)));
                }
                let em = self.emissions(inp);
                let mut fwd = vec![vec![0.0; v]; l];
                for k in 0..v {
                    fwd[0][k] = self.log_initial[k] + em[0][k];
                }
                let mut terms = vec![0.0; v];
                for i in 1..l {
                    for k in 0..v {
                        for j in 0..v {
                            terms[j] = fwd[i - 1][j] + self.log_transition[j][k];
                        }
                        fwd[i][k] = log_sum_exp(&terms) + em[i][k];
                    }
                }
                let mut bwd = vec![vec![0.0; v]; l];
                for i in (0..l.saturating_sub(1)).rev() {
                    for j in 0..v {
                        for k in 0..v {
                            terms[k] = self.log_transition[j][k] + em[i + 1][k] + bwd[i + 1][k];
                        }
                        bwd[i][j] = log_sum_exp(&terms);
                    }
                }
                Ok(Mat::from_shape_fn((l, v), |(i, k)| fwd[i][k] + bwd[i][k]))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub solver: Solver,
    pub ns: Vec<usize>,
    pub errors: Vec<f64>,
    /// Least-squares slope of `log error` against `log N`.
    pub slope: f64,
    pub reference_n: usize,
    pub reference_solver: Solver,
}

impl ConvergenceReport {
    /// Empirical order of accuracy, `-slope`.
    pub fn order(&self) -> f64 {
        -self.slope
    }
}

/// Settings shared by every run in a convergence study.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvergenceSetup {
    pub t_min: f64,
    pub t_max: f64,
    pub spacing: Spacing,
    pub points: usize,
    pub reference_n: usize,
    pub reference_solver: Solver,
    pub seed: u64,
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Integrates the oracle probability-flow ODE from shared initial noise
/// for each `N` and measures the mean endpoint distance to a fine reference.
pub fn convergence_study(spec: &OracleSpec, solver: Solver, ns: &[usize], setup: &ConvergenceSetup, warp: &WarpCdf) -> Result<ConvergenceReport> {
    if ns.len() < 2 {
        return Err(Error::InvalidArgument("need at least two step counts".into()));
    }
    if (warp.t_min, warp.t_max) != (setup.t_min, setup.t_max) {
        return Err(Error::InvalidArgument("warp time range must match the study".into()));
    }
    let d = spec.dim();
    let mut rng = RngStream::new(setup.seed, 0);
    let x0 = Mat::from_shape_vec((setup.points, d), rng.normals(setup.points * d)).expect("shape") * setup.t_max;
    let run = |n: usize, solver: Solver| -> Result<Mat> {
        let grid = step_grid(setup.spacing, n, warp)?;
        integrate(
            x0.clone(),
            &grid,
            solver,
            |x, t| {
                let mut s = Mat::zeros(x.dim());
                for (mut out, row) in s.rows_mut().into_iter().zip(x.rows()) {
                    out.assign(&oracle_score(spec, row, t)?);
                }
                Ok(s)
            },
            |_, _| {},
        )
    };
    let reference = run(setup.reference_n, setup.reference_solver)?;
    let mut errors = Vec::with_capacity(ns.len());
    for &n in ns {
        let x = run(n, solver)?;
        let diff = &x - &reference;
        let mean = diff.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / setup.points as f64;
        errors.push(mean);
    }
    let logs_n: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let logs_e: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    Ok(ConvergenceReport {
        solver,
        ns: ns.to_vec(),
        errors,
        slope: least_squares_slope(&logs_n, &logs_e),
        reference_n: setup.reference_n,
        reference_solver: setup.reference_solver,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::OracleDenoiser;
    use crate::training::AdamConfig;
    use crate::warp::WarpConfig;

    #[test]
    fn unigram_entropy_examples() {
        assert_eq!(unigram_entropy(&[vec![2, 2, 2]]).unwrap(), 0.0);
        assert!((unigram_entropy(&[vec![0, 1, 2, 3]]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let h = unigram_entropy(&[vec![0, 0, 0, 1]]).unwrap();
        assert!((h - 0.5623351446188083).abs() < 1e-12);
        assert!(unigram_entropy(&[vec![]]).is_err());
    }

    #[test]
    fn marginal_tv_examples() {
        assert_eq!(marginal_tv(&[vec![0, 1]], &[0.5, 0.5]), 0.0);
        assert!((marginal_tv(&[vec![0, 0]], &[0.0, 1.0]) - 1.0).abs() < 1e-15);
        let tv = marginal_tv(&[vec![0, 0, 0, 1, 1]], &[0.5, 0.5]);
        assert!((tv - 0.1).abs() < 1e-12);
    }

    #[test]
    fn source_nll_matches_expected_value() {
        let src = SyntheticSource::toy_markov();
        let mut rng = RngStream::new(3, 0);
        let samples = src.sample_batch(4000, 16, &mut rng);
        let per_seq: Vec<f64> = samples.iter().map(|s| -src.log_prob(s).unwrap() / 16.0).collect();
        let n = per_seq.len() as f64;
        let mean = per_seq.iter().sum::<f64>() / n;
        let sd = (per_seq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt();
        assert!((source_nll(&src, &samples).unwrap() - mean).abs() < 1e-12);
        assert!((mean - src.expected_nll(16)).abs() < 3.0 * sd, "{mean} vs {}", src.expected_nll(16));

        // long sequences approach the entropy rate
        let long = src.sample_batch(20, 5000, &mut rng);
        let nll = source_nll(&src, &long).unwrap();
        assert!((nll - src.entropy_rate()).abs() < 0.02, "{nll}");
    }

    #[test]
    fn toy_chain_entropy_rate() {
        let h = -(0.6f64 * 0.6f64.ln() + 0.2 * 0.2f64.ln() + 2.0 * 0.1 * 0.1f64.ln());
        let src = SyntheticSource::toy_markov();
        assert!((src.entropy_rate() - h).abs() < 1e-12);
        for p in src.stationary() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_chain_and_support_violation() {
        let p = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let src = SyntheticSource::markov(p, vec![1.0, 0.0]).unwrap();
        assert_eq!(source_nll(&src, &[vec![0, 1, 0, 1]]).unwrap(), 0.0);
        assert_eq!(source_nll(&src, &[vec![0, 0]]).unwrap(), f64::INFINITY);
        assert!(matches!(source_nll(&src, &[vec![0, 5]]), Err(Error::UnknownToken(_))));
    }

    #[test]
    fn true_chain_minimises_nll() {
        let src = SyntheticSource::toy_markov();
        let samples = src.sample_batch(2000, 16, &mut RngStream::new(5, 0));
        let SourceKind::Markov { mut transition, initial } = src.kind.clone() else { unreachable!() };
        transition[0] = vec![0.2, 0.5, 0.2, 0.1];
        let perturbed = SyntheticSource::markov(transition, initial).unwrap();
        assert!(source_nll(&perturbed, &samples).unwrap() > source_nll(&src, &samples).unwrap());
    }

    #[test]
    fn bigram_tv_of_source_samples_is_small() {
        let src = SyntheticSource::toy_markov();
        let samples = src.sample_batch(1000, 16, &mut RngStream::new(6, 0));
        let SourceKind::Markov { transition, .. } = &src.kind else { unreachable!() };
        assert!(bigram_tv(&samples, transition) < 0.03);
        assert_eq!(bigram_tv(&[vec![0, 0]], transition), 1.0);
    }

    #[test]
    fn metrics_report_csv() {
        let src = SyntheticSource::toy_markov();
        let samples = src.sample_batch(10, 8, &mut RngStream::new(1, 0));
        let r = MetricsReport::compute(&src, &samples).unwrap();
        assert_eq!(r.n_samples, 10);
        assert!(r.unigram_entropy_nats <= 4f64.ln() + 1e-12);
        assert_eq!(r.csv_row().split(',').count(), MetricsReport::CSV_HEADER.split(',').count());
    }

    #[test]
    fn oracle_next_token_ce_is_prior_entropy_at_high_noise() {
        // iid source with matching oracle: the next token is independent of
        // the prefix, so at high noise the CE approaches the prior entropy
        let probs = vec![0.5, 0.25, 0.125, 0.125];
        let e = ndarray::array![[1.0, 1.0], [-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]];
        let spec = OracleSpec::new(probs.clone(), e.clone()).unwrap();
        let src = SyntheticSource::iid(probs.clone()).unwrap();
        let ce = next_token_ce(&OracleDenoiser::new(spec), &e, &src, 4, 300.0, 20_000, false, &RngStream::new(2, 0)).unwrap();
        assert!((ce - entropy(&probs)).abs() < 0.02, "{ce}");
    }

    #[test]
    fn convergence_self_comparison_is_exact() {
        let e = ndarray::array![[1.0, 1.0], [-1.0, 1.0]];
        let spec = OracleSpec::new(vec![0.5, 0.5], e).unwrap();
        let warp = WarpCdf::new(WarpConfig::with_adam(AdamConfig::new(1e-3, 0.9, 0.99)), 0.1, 20.0).unwrap();
        let setup = ConvergenceSetup {
            t_min: 0.1,
            t_max: 20.0,
            spacing: Spacing::Rho(7.0),
            points: 8,
            reference_n: 40,
            reference_solver: Solver::Euler,
            seed: 1,
        };
        let r = convergence_study(&spec, Solver::Euler, &[10, 40], &setup, &warp).unwrap();
        assert_eq!(r.errors[1], 0.0);
        assert!(r.errors[0] > 0.0);
        let again = convergence_study(&spec, Solver::Euler, &[10, 40], &setup, &warp).unwrap();
        assert_eq!(r.errors, again.errors);
    }

    #[test]
    fn source_posterior_matches_enumeration() {
        let src = SyntheticSource::toy_markov();
        let mut rng = RngStream::new(9, 0);
        let emb = Mat::from_shape_vec((4, 2), rng.normals(8)).unwrap();
        let post = SourcePosterior::new(&src, emb.clone()).unwrap();
        let t = 0.8;
        let len = 3;
        let mut x = Mat::from_shape_vec((len, 2), rng.normals(len * 2)).unwrap();
        x.row_mut(1).fill(0.0);
        let mut c = Mat::zeros((len, 2));
        c.row_mut(1).assign(&emb.row(2));
        let m = vec![true, false, true];
        let inp = DenoiserInput { x: x.clone(), c, m: m.clone(), p: Mat::zeros((len, 2)), t };
        let got = post.logits(&[inp]).unwrap().remove(0);
        let mut brute = vec![vec![0.0; 4]; len];
        let mut z = 0.0;
        for a in 0..4 {
            for b in 0..4 {
                for d in 0..4 {
                    let seq = [a, b, d];
                    if seq[1] != 2 {
                        continue;
                    }
                    let mut lp = src.log_prob(&seq).unwrap();
                    for i in [0, 2] {
                        let diff = &x.row(i) - &emb.row(seq[i]);
                        lp -= diff.dot(&diff) / (2.0 * t * t);
                    }
                    let w = lp.exp();
                    z += w;
                    for i in 0..len {
                        brute[i][seq[i]] += w;
                    }
                }
            }
        }
        for i in 0..len {
            let probs = crate::numerics::softmax(&got.row(i).to_vec());
            for k in 0..4 {
                assert!((probs[k] - brute[i][k] / z).abs() < 1e-12, "{i} {k}");
            }
        }
    }

    #[test]
    fn exact_posterior_sampling_recovers_bigrams() {
        let src = SyntheticSource::toy_markov();
        let mut rng = RngStream::new(3, 0);
        let mut emb = Mat::from_shape_vec((4, 8), rng.normals(32)).unwrap();
        for mut r in emb.rows_mut() {
            let n = r.dot(&r).sqrt();
            r *= 8f64.sqrt() / n;
        }
        let post = SourcePosterior::new(&src, emb.clone()).unwrap();
        let warp = WarpCdf::new(crate::warp::WarpConfig::with_adam(crate::training::AdamConfig::new(1e-3, 0.9, 0.99)), 0.5, 100.0).unwrap();
        let mut cfg = crate::sampler::SamplerConfig::euler(60);
        cfg.spacing = Spacing::Rho(7.0);
        let out = crate::sampler::sample(&post, &emb, &warp, &cfg, &vec![crate::sampler::Conditioning::unconditional(8); 300], &RngStream::new(4, 0), false).unwrap();
        let SourceKind::Markov { transition, .. } = &src.kind else { unreachable!() };
        let tv = bigram_tv(&out.tokens, transition);
        assert!(tv < 0.08, "{tv}");
    }
}
