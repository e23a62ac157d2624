//! Trains the desk-scale model on a four-state Markov chain, then compares
//! next-token cross-entropy with the chain's entropy rate and the bigram
//! statistics of generated sequences with its transition matrix.

use cdcd::denoiser::{DenoiserConfig, Transformer};
use cdcd::eval::{bigram_tv, next_token_ce, MetricsReport, SourceKind, SyntheticSource};
use cdcd::numerics::RngStream;
use cdcd::sampler::{sample, Conditioning, SamplerConfig};
use cdcd::training::{train, MaskStrategy, TrainConfig, TrainState};
use cdcd::warp::{WarpCdf, WarpConfig};

fn main() -> cdcd::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).map_or(5000, |s| s.parse().unwrap());
    let n_samples: usize = args.get(2).map_or(1000, |s| s.parse().unwrap());
    let source = SyntheticSource::toy_markov();
    let cfg = TrainConfig {
        batch: 64,
        seq_len: 16,
        lr: 1e-3,
        beta1: 0.9,
        beta2: 0.99,
        cond_dropout: 0.1,
        self_cond_fraction: 0.5,
        steps,
        seed: 0,
        mask: MaskStrategy::Mixed(0.5),
        grad_clip: Some(1.0),
        time_warping: true,
        weight_loss: false,
    };
    let model = Transformer::init(DenoiserConfig::desk(4), 0.001, &mut RngStream::new(cfg.seed, 1))?;
    let warp = WarpCdf::new(WarpConfig::with_adam(cfg.adam()), 1.0, 300.0)?;
    let mut state = TrainState::new(model, warp);
    let start = std::time::Instant::now();
    let mut window = Vec::new();
    train(&mut state, &source, &cfg, |s, stats| {
        window.push(stats.mean_weighted_ce);
        if s.step % 250 == 0 {
            println!(
                "step {:5}  weighted ce {:.4}  t p50 {:7.2}  {:.1}s",
                s.step,
                window.iter().sum::<f64>() / window.len() as f64,
                stats.t_quantile(0.5),
                start.elapsed().as_secs_f64()
            );
            window.clear();
        }
        Ok(())
    })?;
    let emb = state.model.embeddings()?;
    let rate = source.entropy_rate();
    for t in [20.0, 300.0] {
        let ce = next_token_ce(&state.model, &emb, &source, 16, t, 4000, true, &RngStream::new(9, 0))?;
        println!("next-token ce at t={t}: {ce:.4} (entropy rate {rate:.4}, gap {:.4})", ce - rate);
    }
    let conds = vec![Conditioning::unconditional(16); n_samples];
    let out = sample(&state.model, &emb, &state.warp, &SamplerConfig::euler(200), &conds, &RngStream::new(10, 0), false)?;
    let report = MetricsReport::compute(&source, &out.tokens)?;
    let SourceKind::Markov { transition, .. } = &source.kind else { unreachable!() };
    println!("{report:?}\nbigram tv {:.4}  total {:.1}s", bigram_tv(&out.tokens, transition), start.elapsed().as_secs_f64());
    Ok(())
}
