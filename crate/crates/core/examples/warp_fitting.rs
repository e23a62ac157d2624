//! Fits the time warp to a synthetic loss curve, then draws warped
//! timesteps and prints the fitted density with its importance weights.

use cdcd::numerics::RngStream;
use cdcd::training::AdamConfig;
use cdcd::warp::{WarpCdf, WarpConfig};

fn main() -> cdcd::Result<()> {
    // a sigmoid-shaped loss: flat at both ends, steep in the middle
    let loss = |tp: f64| 2.0 / (1.0 + (-12.0 * (tp - 0.4)).exp());
    let mut warp = WarpCdf::new(WarpConfig::with_adam(AdamConfig::new(1e-2, 0.9, 0.99)), 1.0, 300.0)?;
    let mut rng = RngStream::new(3, 0);
    for step in 0..3000 {
        let view = warp.sampling_view();
        let tps: Vec<f64> = (0..64).map(|_| view.invert(rng.uniform())).collect();
        let ts: Vec<f64> = tps.iter().map(|&t| warp.denormalize_time(t)).collect();
        let weights: Vec<f64> = tps.iter().map(|&t| view.importance_weight(t)).collect();
        let losses: Vec<f64> = tps.iter().map(|&t| loss(t)).collect();
        let r = warp.fit_step(&ts, &losses, &weights)?;
        if step % 500 == 0 {
            println!("step {step:>4}  weighted mse {:.3e}", r.weighted_mse);
        }
    }
    println!("\n    t'      t   F~(t')  loss   pdf   weight");
    for i in 0..=10 {
        let tp = i as f64 / 10.0;
        println!(
            "{tp:>6.2} {:>6.1} {:>7.3} {:>6.3} {:>5.2} {:>7.2}",
            warp.denormalize_time(tp),
            warp.eval_cdf(tp, false),
            loss(tp),
            warp.pdf(tp),
            warp.importance_weight(tp)
        );
    }
    let draws: Vec<f64> = (0..8).map(|_| warp.sample_timestep(rng.uniform())).collect();
    println!("\nwarped timesteps {:.1?}", draws);
    Ok(())
}
