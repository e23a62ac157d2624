//! Score interpolation on a small embedding table: the Bayes posterior
//! turned into a score matches the exact mixture score, and the clamped
//! and renormalised variants move the estimate towards the vocabulary.

use cdcd::embedding::{corrupt, EmbeddingTable};
use cdcd::numerics::RngStream;
use cdcd::score::{bayes_posterior, interpolate_score, oracle_score, OracleSpec, ScoreMode};

fn main() -> cdcd::Result<()> {
    let mut rng = RngStream::new(1, 0);
    let table = EmbeddingTable::init(6, 3, 1.0, &mut rng);
    let e = table.normalized()?;
    let spec = OracleSpec::new(vec![0.3, 0.2, 0.2, 0.1, 0.1, 0.1], e.clone())?;
    for t in [0.5, 2.0, 10.0, 100.0] {
        let x0 = e.slice(ndarray::s![0..1, ..]).to_owned();
        let x = corrupt(&x0, t, &mut rng);
        let x = x.row(0);
        let post = bayes_posterior(&spec, x, t)?;
        let exact = oracle_score(&spec, x, t)?;
        println!("t = {t}");
        println!("  posterior   {:.3}", post);
        for mode in [ScoreMode::Plain, ScoreMode::Renormalise, ScoreMode::Clamp] {
            let s = interpolate_score(post.view(), e.view(), x, t, mode)?;
            let diff = &s - &exact;
            println!("  {:<12} |s - exact| = {:.2e}", format!("{mode:?}"), diff.dot(&diff).sqrt());
        }
    }
    Ok(())
}
