//! Random streams, stable elementary numerics, and the finite-difference
//! gradient checker.
//!
//! [`RngStream`] is counter-based: a `(seed, stream_id, counter)` triple fully
//! determines the next draw, so streams can be copied, split per worker and
//! stored in checkpoints without carrying hidden generator state. The block
//! function is ChaCha8; one 64-bit draw consumes two 32-bit ChaCha words.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A position in a deterministic, splittable random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
    /// Number of 64-bit words consumed so far.
    pub counter: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self {
            seed,
            stream_id,
            counter: 0,
        }
    }

    /// Derives an independent child stream. The parent is not advanced.
    pub fn split(&self, child: u64) -> Self {
        let id = splitmix64(self.stream_id ^ splitmix64(child.wrapping_add(0x5851_f42d_4c95_7f2d)));
        Self::new(self.seed, id)
    }

    fn generator(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng.set_word_pos(u128::from(self.counter) * 2);
        rng
    }

    /// Fills `out` with raw 64-bit words, advancing the counter by `out.len()`.
    pub fn fill_u64(&mut self, out: &mut [u64]) {
        let mut rng = self.generator();
        for v in out.iter_mut() {
            *v = rng.next_u64();
        }
        self.counter += out.len() as u64;
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut w = [0u64];
        self.fill_u64(&mut w);
        w[0]
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution. Consumes one word.
    pub fn uniform(&mut self) -> f64 {
        word_to_unit(self.next_u64())
    }

    pub fn uniforms(&mut self, n: usize) -> Vec<f64> {
        let mut words = vec![0u64; n];
        self.fill_u64(&mut words);
        words.into_iter().map(word_to_unit).collect()
    }

    /// Uniform integer in `0..n` (`n > 0`). Consumes one word.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "empty range");
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal draws via Box-Muller. Consumes `2 * ceil(n / 2)`
    /// words; the spare value of an odd request is discarded.
    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        let pairs = n.div_ceil(2);
        let mut words = vec![0u64; 2 * pairs];
        self.fill_u64(&mut words);
        let mut out = Vec::with_capacity(2 * pairs);
        for pair in words.chunks_exact(2) {
            let u1 = 1.0 - word_to_unit(pair[0]);
            let u2 = word_to_unit(pair[1]);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = std::f64::consts::TAU * u2;
            out.push(r * theta.cos());
            out.push(r * theta.sin());
        }
        out.truncate(n);
        out
    }

    /// Fisher-Yates shuffle of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}

fn word_to_unit(w: u64) -> f64 {
    (w >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// i.i.d. standard normal tensor of the given shape, row-major.
pub fn gaussian(rng: &mut RngStream, shape: &[usize]) -> ndarray::ArrayD<f64> {
    assert!(shape.iter().all(|&s| s > 0), "shape entries must be positive");
    let n = shape.iter().product();
    ndarray::ArrayD::from_shape_vec(shape.to_vec(), rng.normals(n)).expect("shape matches length")
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    assert!(!v.is_empty(), "log_sum_exp of an empty sequence");
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m == f64::INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax with max subtraction, in place.
pub fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in v.iter_mut() {
        *x /= z;
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Single-offset stratified grid: `(i + offset) / batch` for `i in 0..batch`.
pub fn stratified_uniforms(offset: f64, batch: usize) -> Vec<f64> {
    (0..batch)
        .map(|i| ((i as f64 + offset) / batch as f64).rem_euclid(1.0))
        .collect()
}

/// Low-discrepancy batch of uniforms: one shared offset, one value per stratum.
pub fn low_discrepancy_uniforms(rng: &mut RngStream, batch: usize) -> Vec<f64> {
    assert!(batch >= 1);
    let offset = rng.uniform();
    stratified_uniforms(offset, batch)
}

pub fn ema_update(current: &[f64], target: &[f64], decay: f64) -> Vec<f64> {
    assert_eq!(current.len(), target.len());
    assert!((0.0..1.0).contains(&decay), "decay must lie in [0, 1)");
    current
        .iter()
        .zip(target)
        .map(|(c, t)| decay * c + (1.0 - decay) * t)
        .collect()
}

/// Outcome of checking one named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub parameter_name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Anything whose parameters can be perturbed in place, tensor by tensor.
pub trait Parameterized {
    fn num_tensors(&self) -> usize;
    fn tensor_name(&self, i: usize) -> String;
    fn tensor_mut(&mut self, i: usize) -> &mut [f64];
}

/// Named flat parameter vectors, for checking free-standing functions.
#[derive(Clone, Debug, Default)]
pub struct NamedParams {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl NamedParams {
    pub fn push(&mut self, name: &str, values: Vec<f64>) {
        self.names.push(name.to_string());
        self.values.push(values);
    }
}

impl Parameterized for NamedParams {
    fn num_tensors(&self) -> usize {
        self.values.len()
    }
    fn tensor_name(&self, i: usize) -> String {
        self.names[i].clone()
    }
    fn tensor_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i]
    }
}

pub fn relative_error(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-12)
}

/// Compares `analytic[i][j]` against the central difference
/// `(loss(p + eps) - loss(p - eps)) / 2 eps` for every scalar parameter.
/// A non-finite loss marks that tensor with an infinite error.
pub fn finite_diff_check<M, F>(
    model: &mut M,
    analytic: &[Vec<f64>],
    mut loss: F,
    eps: f64,
) -> Vec<GradCheckReport>
where
    M: Parameterized,
    F: FnMut(&M) -> f64,
{
    assert!(eps > 0.0);
    assert_eq!(analytic.len(), model.num_tensors());
    let mut reports = Vec::with_capacity(analytic.len());
    for (i, grad) in analytic.iter().enumerate() {
        let mut report = GradCheckReport {
            parameter_name: model.tensor_name(i),
            max_rel_err: 0.0,
            worst_index: 0,
        };
        assert_eq!(grad.len(), model.tensor_mut(i).len(), "gradient shape mismatch");
        for (j, &g) in grad.iter().enumerate() {
            let orig = model.tensor_mut(i)[j];
            model.tensor_mut(i)[j] = orig + eps;
            let plus = loss(model);
            model.tensor_mut(i)[j] = orig - eps;
            let minus = loss(model);
            model.tensor_mut(i)[j] = orig;
            let err = if plus.is_finite() && minus.is_finite() {
                relative_error((plus - minus) / (2.0 * eps), g)
            } else {
                f64::INFINITY
            };
            if err > report.max_rel_err || (err.is_nan() && !report.max_rel_err.is_nan()) {
                report.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
                report.worst_index = j;
            }
        }
        reports.push(report);
    }
    reports
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn same_seed_same_draws() {
        let a = gaussian(&mut RngStream::new(7, 0), &[2]);
        let b = gaussian(&mut RngStream::new(7, 0), &[2]);
        assert_eq!(a, b);
    }

    #[test]
    fn streams_differ() {
        let a = RngStream::new(7, 0).normals(1);
        let b = RngStream::new(7, 1).normals(1);
        assert_ne!(a, b);
        let c = RngStream::new(7, 0).split(3).normals(1);
        assert_ne!(a, c);
    }

    #[test]
    fn counter_advances_by_documented_amount() {
        let mut r = RngStream::new(1, 2);
        r.normals(3);
        assert_eq!(r.counter, 4);
        r.normals(4);
        assert_eq!(r.counter, 8);
        r.uniform();
        assert_eq!(r.counter, 9);
    }

    #[test]
    fn resuming_from_counter_continues_sequence() {
        let mut a = RngStream::new(11, 5);
        let all = a.uniforms(10);
        let mut b = RngStream::new(11, 5);
        b.counter = 6;
        assert_eq!(b.uniforms(4), all[6..].to_vec());
    }

    #[test]
    fn gaussian_moments() {
        let x = RngStream::new(2024, 9).normals(1_000_000);
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn log_sum_exp_examples() {
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[0.0]), 0.0);
    }

    #[test]
    fn stratified_grid_example() {
        let u = stratified_uniforms(0.1, 4);
        let want = [0.025, 0.275, 0.525, 0.775];
        for (a, b) in u.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let single = low_discrepancy_uniforms(&mut RngStream::new(3, 3), 1);
        assert_eq!(single.len(), 1);
        assert!((0.0..1.0).contains(&single[0]));
    }

    #[test]
    fn ema_examples() {
        assert_eq!(ema_update(&[5.0], &[2.0], 0.0), vec![2.0]);
        assert!((ema_update(&[1.0], &[0.0], 0.9)[0] - 0.9).abs() < 1e-15);
        let mut c = vec![10.0, -3.0];
        for _ in 0..2000 {
            c = ema_update(&c, &[1.0, 2.0], 0.99);
        }
        assert!((c[0] - 1.0).abs() < 1e-6 && (c[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn gradcheck_quadratic_and_constant() {
        let mut p = NamedParams::default();
        p.push("p", vec![3.0]);
        let r = finite_diff_check(&mut p, &[vec![6.0]], |m| m.values[0][0].powi(2), 1e-5);
        assert!(r[0].max_rel_err < 1e-8, "{:?}", r);

        let r = finite_diff_check(&mut p, &[vec![0.0]], |_| 4.0, 1e-5);
        assert_eq!(r[0].max_rel_err, 0.0);
    }

    #[test]
    fn gradcheck_flags_wrong_and_non_finite() {
        let mut p = NamedParams::default();
        p.push("p", vec![1.0, 2.0]);
        let r = finite_diff_check(&mut p, &[vec![2.0, 5.0]], |m| m.values[0].iter().map(|v| v * v).sum(), 1e-5);
        assert_eq!(r[0].worst_index, 1);
        assert!(r[0].max_rel_err > 0.1);
        let r = finite_diff_check(&mut p, &[vec![0.0, 0.0]], |_| f64::NAN, 1e-5);
        assert!(r[0].max_rel_err.is_infinite());
    }

    proptest! {
        #[test]
        fn log_sum_exp_shift(v in prop::collection::vec(-50.0f64..50.0, 1..20), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let a = log_sum_exp(&shifted);
            let b = log_sum_exp(&v) + c;
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn stratified_spacing(offset in 0.0f64..1.0, batch in 1usize..64) {
            let mut u = stratified_uniforms(offset, batch);
            u.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (i, w) in u.windows(2).enumerate() {
                prop_assert!((w[1] - w[0] - 1.0 / batch as f64).abs() < 1e-12, "gap at {}", i);
            }
            for (i, x) in u.iter().enumerate() {
                prop_assert!(*x >= i as f64 / batch as f64 && *x < (i + 1) as f64 / batch as f64);
            }
        }
    }
}
