//! Samples from the exact score of a Gaussian mixture over random token
//! embeddings and compares the decoded token frequencies with the prior.

use cdcd::autodiff::Mat;
use cdcd::denoiser::OracleDenoiser;
use cdcd::eval::{marginal_tv, unigram_entropy};
use cdcd::numerics::RngStream;
use cdcd::sampler::{sample, Conditioning, SamplerConfig, Spacing};
use cdcd::score::OracleSpec;
use cdcd::training::AdamConfig;
use cdcd::warp::{WarpCdf, WarpConfig};

fn main() -> cdcd::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).map_or(20_000, |s| s.parse().unwrap());
    let t_min: f64 = args.get(2).map_or(0.05, |s| s.parse().unwrap());
    let (v, d) = (8, 4);
    let mut rng = RngStream::new(21, 0);
    let mut e = Mat::from_shape_vec((v, d), rng.normals(v * d)).expect("shape");
    for mut r in e.rows_mut() {
        let norm = r.dot(&r).sqrt();
        r *= (d as f64).sqrt() / norm;
    }
    let raw: Vec<f64> = (1..=v).map(|i| i as f64).collect();
    let total: f64 = raw.iter().sum();
    for prior in [vec![1.0 / v as f64; v], raw.iter().map(|x| x / total).collect()] {
        let spec = OracleSpec::new(prior.clone(), e.clone())?;
        let warp = WarpCdf::new(WarpConfig::with_adam(AdamConfig::new(1e-3, 0.9, 0.99)), t_min, 300.0)?;
        let mut cfg = SamplerConfig::euler(200);
        cfg.spacing = Spacing::Rho(7.0);
        let start = std::time::Instant::now();
        let out = sample(&OracleDenoiser::new(spec.clone()), &e, &warp, &cfg, &vec![Conditioning::unconditional(1); n], &RngStream::new(3, 0), false)?;
        println!(
            "prior {:?}\n  tv {:.4}  entropy {:.4}  ({} samples, {:.1}s)",
            prior.iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>(),
            marginal_tv(&out.tokens, &prior),
            unigram_entropy(&out.tokens)?,
            n,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
