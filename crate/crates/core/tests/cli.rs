use std::path::Path;
use std::process::{Command, Output};

use cdcd::cli::RunConfig;
use cdcd::denoiser::DenoiserConfig;
use cdcd::sampler::SamplerConfig;

fn cdcd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdcd")).args(args).output().expect("spawn cdcd")
}

fn tiny_config(dir: &Path) -> String {
    let mut c = RunConfig::desk_markov();
    c.denoiser = DenoiserConfig { blocks: 1, width: 8, heads: 2, d: 4, vocab: 4, fourier_features: 4, time_mlp_width: 8 };
    c.train.batch = 4;
    c.train.seq_len = 6;
    c.train.steps = 4;
    c.checkpoint_every = 2;
    c.sampler = SamplerConfig::euler(5);
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(&c).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_sample_eval_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    let run = d.join("run");
    ok(&cdcd(&["train", "--config", &cfg, "--out", run.to_str().unwrap()]));
    let ck = run.join("final.ckpt");
    assert!(run.join("checkpoint-000002.ckpt").exists());
    assert!(run.join("checkpoint-000004.ckpt").exists());
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "step,wall_seconds,mean_weighted_ce,t_p10,t_p50,t_p90");
    assert_eq!(metrics.lines().count(), 5);

    let s = d.join("s");
    ok(&cdcd(&[
        "sample", "--checkpoint", ck.to_str().unwrap(), "--out", s.to_str().unwrap(), "--n-samples", "3", "--prompt", "2 3",
        "--solver", "heun", "--steps", "4", "--guidance", "1.5", "--trajectory",
    ]));
    let samples = std::fs::read_to_string(s.join("samples.txt")).unwrap();
    assert_eq!(samples.lines().count(), 3);
    for line in samples.lines() {
        assert!(line.starts_with("2 3 "), "{line}");
        assert_eq!(line.split(' ').count(), 6);
    }
    assert!(std::fs::read_to_string(s.join("trajectory.csv")).unwrap().starts_with("sample,step,t,position,x0,x1,x2,x3"));

    let e = d.join("e");
    let out = cdcd(&["eval", "--checkpoint", ck.to_str().unwrap(), "--out", e.to_str().unwrap(), "--n-samples", "8"]);
    ok(&out);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(e.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["n_samples"], 8);
    assert!(report["bigram_tv"].is_number());

    let w = d.join("w");
    ok(&cdcd(&["warp-inspect", "--checkpoint", ck.to_str().unwrap(), "--out", w.to_str().unwrap()]));
    let table = std::fs::read_to_string(w.join("warp.csv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), "t,t_prime,f_tilde,f,pdf,weight");
    assert_eq!(table.lines().count(), 1001);
}

#[test]
fn resume_appends_metrics_and_matches() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    let full = d.join("full");
    let part = d.join("part");
    ok(&cdcd(&["train", "--config", &cfg, "--out", full.to_str().unwrap()]));
    ok(&cdcd(&["train", "--config", &cfg, "--out", part.to_str().unwrap(), "--train-steps", "2"]));
    let mid = part.join("final.ckpt");
    ok(&cdcd(&["train", "--checkpoint", mid.to_str().unwrap(), "--out", part.to_str().unwrap(), "--train-steps", "4"]));
    assert_eq!(std::fs::read(full.join("final.ckpt")).unwrap(), std::fs::read(part.join("final.ckpt")).unwrap());
    assert_eq!(std::fs::read_to_string(part.join("metrics.csv")).unwrap().lines().count(), 5);
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = cdcd(&["sample", "--checkpoint", d.join("nope.ckpt").to_str().unwrap(), "--out", d.to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(1));

    let bad = d.join("bad.json");
    std::fs::write(&bad, "{\"seed\": 0}").unwrap();
    let out = cdcd(&["train", "--config", bad.to_str().unwrap(), "--out", d.join("r").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let cfg = tiny_config(d);
    ok(&cdcd(&["train", "--config", &cfg, "--out", d.join("r").to_str().unwrap(), "--train-steps", "1"]));
    let ck = d.join("r/final.ckpt");
    let unknown = cdcd(&["sample", "--checkpoint", ck.to_str().unwrap(), "--out", d.join("s").to_str().unwrap(), "--prompt", "zebra"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("zebra"));

    assert_eq!(cdcd(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn corpus_config_trains() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let text = d.join("corpus.txt");
    std::fs::write(&text, "abba cab abc").unwrap();
    let mut c = RunConfig::desk_markov();
    c.denoiser = DenoiserConfig { blocks: 1, width: 8, heads: 2, d: 4, vocab: 5, fourier_features: 4, time_mlp_width: 8 };
    c.train.batch = 2;
    c.train.seq_len = 4;
    c.train.steps = 2;
    c.sampler = SamplerConfig::euler(3);
    c.data = serde_json::from_value(serde_json::json!({"kind": "corpus", "path": text, "tokenizer": "char"})).unwrap();
    let p = d.join("c.json");
    std::fs::write(&p, serde_json::to_string(&c).unwrap()).unwrap();
    let run = d.join("run");
    ok(&cdcd(&["train", "--config", p.to_str().unwrap(), "--out", run.to_str().unwrap()]));
    let s = d.join("s");
    ok(&cdcd(&["sample", "--checkpoint", run.join("final.ckpt").to_str().unwrap(), "--out", s.to_str().unwrap(), "--n-samples", "2", "--prompt", "ab"]));
    for line in std::fs::read_to_string(s.join("samples.txt")).unwrap().lines() {
        assert!(line.starts_with("ab"));
    }
    let e = d.join("e");
    ok(&cdcd(&["eval", "--checkpoint", run.join("final.ckpt").to_str().unwrap(), "--out", e.to_str().unwrap(), "--n-samples", "4"]));
}
