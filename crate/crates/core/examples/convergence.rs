//! Measures the global error order of the Euler and Heun solvers on the
//! exact probability-flow ODE of a Gaussian mixture.

use cdcd::autodiff::Mat;
use cdcd::eval::{convergence_study, ConvergenceSetup};
use cdcd::numerics::RngStream;
use cdcd::sampler::{Solver, Spacing};
use cdcd::score::OracleSpec;
use cdcd::training::AdamConfig;
use cdcd::warp::{WarpCdf, WarpConfig};

fn main() -> cdcd::Result<()> {
    let (v, d) = (8, 4);
    let mut rng = RngStream::new(11, 0);
    let mut e = Mat::from_shape_vec((v, d), rng.normals(v * d)).expect("shape");
    for mut r in e.rows_mut() {
        let n = r.dot(&r).sqrt();
        r *= (d as f64).sqrt() / n;
    }
    let spec = OracleSpec::new(vec![1.0 / v as f64; v], e)?;
    let args: Vec<String> = std::env::args().collect();
    let t_min: f64 = args.get(1).map_or(0.1, |s| s.parse().unwrap());
    let t_max: f64 = args.get(2).map_or(300.0, |s| s.parse().unwrap());
    let rho: f64 = args.get(3).map_or(7.0, |s| s.parse().unwrap());
    let warp = WarpCdf::new(WarpConfig::with_adam(AdamConfig::new(1e-3, 0.9, 0.99)), t_min, t_max)?;
    for reference_solver in [Solver::Euler, Solver::Heun] {
        let setup = ConvergenceSetup {
            t_min,
            t_max,
            spacing: Spacing::Rho(rho),
            points: 256,
            reference_n: 2560,
            reference_solver,
            seed: 5,
        };
        for solver in [Solver::Euler, Solver::Heun] {
            let r = convergence_study(&spec, solver, &[10, 20, 40, 80], &setup, &warp)?;
            println!(
                "reference {:?}: {:?} errors {:?} order {:.3}",
                reference_solver,
                solver,
                r.errors.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>(),
                r.order()
            );
        }
    }
    Ok(())
}
