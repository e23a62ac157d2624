//! Checks reverse-mode gradients of the training loss against central
//! differences for every parameter tensor of a small denoiser.

use cdcd::denoiser::{DenoiserConfig, Transformer};
use cdcd::numerics::{finite_diff_check, RngStream};
use cdcd::training::{batch_loss_given_p, plan_batch, AdamConfig, MaskStrategy, TrainConfig};
use cdcd::warp::{WarpCdf, WarpConfig};

fn main() -> cdcd::Result<()> {
    let cfg = DenoiserConfig { blocks: 1, width: 16, heads: 2, d: 4, vocab: 6, fourier_features: 4, time_mlp_width: 8 };
    let mut model = Transformer::init(cfg, 1.0, &mut RngStream::new(1, 0))?;
    let train = TrainConfig {
        batch: 2,
        seq_len: 5,
        lr: 1e-3,
        beta1: 0.9,
        beta2: 0.99,
        cond_dropout: 0.0,
        self_cond_fraction: 0.0,
        steps: 1,
        seed: 2,
        mask: MaskStrategy::PrefixRandom,
        grad_clip: None,
        time_warping: true,
        weight_loss: false,
    };
    let warp = WarpCdf::new(WarpConfig::with_adam(AdamConfig::new(1e-3, 0.9, 0.99)), 1.0, 300.0)?;
    let rng = RngStream::new(3, 0);
    let tokens = vec![vec![0, 1, 2, 3, 4], vec![5, 4, 3, 2, 1]];
    let plans = plan_batch(&train, &warp, 2, 5, cfg.d, &rng);
    let p = cdcd::autodiff::Mat::zeros((10, cfg.d));
    let loss = batch_loss_given_p(&model, &tokens, &plans, p.clone())?;
    let analytic: Vec<Vec<f64>> = loss.grads.iter().map(|g| g.iter().copied().collect()).collect();
    let shell = model.clone();
    let reports = finite_diff_check(
        &mut model.params,
        &analytic,
        |params| batch_loss_given_p(&shell.with_params(params.clone()), &tokens, &plans, p.clone()).map_or(f64::NAN, |l| l.mean_weighted_ce),
        1e-5,
    );
    println!("loss {:.5}, {} parameters", loss.mean_weighted_ce, shell.param_count());
    for r in &reports {
        println!("{:<24} max rel err {:.2e}", r.parameter_name, r.max_rel_err);
    }
    Ok(())
}
