//! Drives the command-line layer from code: prints the default config,
//! trains a few steps, samples, evaluates and dumps the warp.
//!
//! `cargo run --example cli_usage -- [steps] [--print-config]`

use cdcd::cli::{main_with_args, RunConfig};

fn main() -> cdcd::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--print-config") {
        println!("{}", serde_json::to_string_pretty(&RunConfig::desk_markov())?);
        return Ok(());
    }
    let steps = args.first().map(|s| s.parse().expect("steps")).unwrap_or(20u64);
    let dir = std::env::temp_dir().join("cdcd_cli_usage");
    std::fs::create_dir_all(&dir)?;
    let mut cfg = RunConfig::desk_markov();
    cfg.checkpoint_every = steps.max(1);
    let cfg_path = dir.join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg)?)?;

    let d = dir.to_str().expect("utf-8 path");
    let ck = format!("{d}/run/final.ckpt");
    let calls: Vec<Vec<String>> = vec![
        vec!["train".into(), "--config".into(), cfg_path.to_string_lossy().into(), "--out".into(), format!("{d}/run"), "--train-steps".into(), steps.to_string()],
        vec!["sample".into(), "--checkpoint".into(), ck.clone(), "--out".into(), format!("{d}/samples"), "--n-samples".into(), "4".into(), "--steps".into(), "50".into(), "--prompt".into(), "0 1".into()],
        vec!["eval".into(), "--checkpoint".into(), ck.clone(), "--out".into(), format!("{d}/eval"), "--n-samples".into(), "32".into(), "--steps".into(), "50".into()],
        vec!["warp-inspect".into(), "--checkpoint".into(), ck, "--out".into(), format!("{d}/warp")],
    ];
    for call in calls {
        println!("$ cdcd {}", call.join(" "));
        let code = main_with_args(std::iter::once("cdcd".to_string()).chain(call));
        assert_eq!(code, 0);
    }
    println!("{}", std::fs::read_to_string(dir.join("samples/samples.txt"))?);
    Ok(())
}
