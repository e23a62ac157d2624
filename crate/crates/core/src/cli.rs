//! Command-line entry points: run configuration, corpus ingestion,
//! checkpoints, and the `train`, `sample`, `eval` and `warp-inspect`
//! commands.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::denoiser::{DenoiserConfig, ParamStore, Transformer};
use crate::embedding::Vocabulary;
use crate::eval::{MetricsReport, SourceKind, SyntheticSource};
use crate::numerics::RngStream;
use crate::sampler::{sample, Conditioning, Decode, SamplerConfig, Solver};
use crate::training::{data_rng, step_rng, train, AdamMoments, BatchSource, MaskStrategy, TrainConfig, TrainState};
use crate::warp::{WarpCdf, WarpConfig, DEFAULT_BINS, DEFAULT_EMA_DECAY, DEFAULT_MIN_BIN};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const PAD: &str = "<pad>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    Char,
    Whitespace,
}

impl Tokenizer {
    pub fn split<'a>(&self, text: &'a str) -> Vec<&'a str> {
        match self {
            Tokenizer::Char => text.char_indices().map(|(i, c)| &text[i..i + c.len_utf8()]).collect(),
            Tokenizer::Whitespace => text.split_whitespace().collect(),
        }
    }

    pub fn join(&self, tokens: &[&str]) -> String {
        match self {
            Tokenizer::Char => tokens.concat(),
            Tokenizer::Whitespace => tokens.join(" "),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic { source: SourceKind },
    Corpus { path: PathBuf, tokenizer: Tokenizer },
}

/// Warp settings; the fitting optimiser shares the training Adam settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarpSettings {
    pub bins: usize,
    pub min_bin: f64,
    pub ema_decay: f64,
    pub use_ema: bool,
    pub shape: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for sampling and evaluation; training uses `train.seed`.
    pub seed: u64,
    pub t_min: f64,
    pub t_max: f64,
    pub embed_init_scale: f64,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub warp: WarpSettings,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
    /// Write a checkpoint every this many steps (and at the end).
    pub checkpoint_every: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_max > self.t_min && self.t_min > 0.0) {
            return Err(Error::Config("need t_max > t_min > 0".into()));
        }
        if !(self.embed_init_scale > 0.0) {
            return Err(Error::Config("embed_init_scale must be positive".into()));
        }
        if self.warp.bins == 0 || !(self.warp.min_bin >= 0.0) || !(0.0..1.0).contains(&self.warp.ema_decay) {
            return Err(Error::Config("invalid warp settings".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        self.denoiser.validate()?;
        self.train.validate()?;
        self.sampler.validate()
    }

    /// Small model on the four-state toy Markov chain; trains on a laptop
    /// CPU in about ten minutes.
    pub fn desk_markov() -> Self {
        let train = TrainConfig {
            batch: 64,
            seq_len: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            cond_dropout: 0.1,
            self_cond_fraction: 0.5,
            steps: 5000,
            seed: 0,
            mask: MaskStrategy::Mixed(0.5),
            grad_clip: Some(1.0),
            time_warping: true,
            weight_loss: false,
        };
        Self {
            seed: 0,
            t_min: 1.0,
            t_max: 300.0,
            embed_init_scale: 0.001,
            denoiser: DenoiserConfig::desk(4),
            train,
            warp: WarpSettings {
                bins: DEFAULT_BINS,
                min_bin: DEFAULT_MIN_BIN,
                ema_decay: DEFAULT_EMA_DECAY,
                use_ema: true,
                shape: None,
            },
            sampler: SamplerConfig::euler(200),
            data: DataConfig::Synthetic { source: SyntheticSource::toy_markov().kind },
            checkpoint_every: 1000,
        }
    }

    pub fn warp_config(&self) -> WarpConfig {
        WarpConfig {
            bins: self.warp.bins,
            min_bin: self.warp.min_bin,
            ema_decay: self.warp.ema_decay,
            use_ema: self.warp.use_ema,
            adam: self.train.adam(),
            shape: self.warp.shape,
        }
    }
}

/// Token windows cut from a text file.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub sequences: Vec<Vec<usize>>,
}

/// Builds a sorted vocabulary (pad first) and non-overlapping windows of
/// `len` tokens, padding the last one.
pub fn ingest_corpus(path: &Path, tokenizer: Tokenizer, len: usize) -> Result<Corpus> {
    if len == 0 {
        return Err(Error::InvalidArgument("window length must be positive".into()));
    }
    let bytes = fs::read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(format!("{} is not UTF-8: {e}", path.display())))?;
    let tokens = tokenizer.split(&text);
    if tokens.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut symbols: Vec<&str> = tokens.clone();
    symbols.sort_unstable();
    symbols.dedup();
    symbols.retain(|s| *s != PAD);
    let mut names = vec![PAD.to_string()];
    names.extend(symbols.iter().map(|s| s.to_string()));
    let vocab = Vocabulary::new(names)?;
    let index: std::collections::HashMap<&str, usize> =
        vocab.tokens().iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let ids: Vec<usize> = tokens.iter().map(|t| index[t]).collect();
    let sequences = ids
        .chunks(len)
        .map(|c| {
            let mut w = c.to_vec();
            w.resize(len, 0);
            w
        })
        .collect();
    Ok(Corpus { vocab, sequences })
}

impl BatchSource for Corpus {
    fn batch(&self, seed: u64, step: u64, batch: usize, len: usize) -> Result<Vec<Vec<usize>>> {
        if self.sequences.is_empty() || self.sequences[0].len() != len {
            return Err(Error::InvalidArgument("corpus windows do not match seq_len".into()));
        }
        let mut rng = data_rng(seed, step);
        Ok((0..batch).map(|_| self.sequences[rng.below(self.sequences.len())].clone()).collect())
    }
}

/// Training data resolved from the run configuration.
pub enum Data {
    Synthetic(SyntheticSource),
    Corpus(Corpus, Tokenizer),
}

impl Data {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        Ok(match &cfg.data {
            DataConfig::Synthetic { source } => Data::Synthetic(SyntheticSource::new(source.clone())?),
            DataConfig::Corpus { path, tokenizer } => Data::Corpus(ingest_corpus(path, *tokenizer, cfg.train.seq_len)?, *tokenizer),
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        match self {
            Data::Synthetic(s) => &s.vocab,
            Data::Corpus(c, _) => &c.vocab,
        }
    }

    pub fn source(&self) -> &dyn BatchSource {
        match self {
            Data::Synthetic(s) => s,
            Data::Corpus(c, _) => c,
        }
    }

    /// Ground truth to evaluate against: the generator itself, or the
    /// corpus unigram distribution treated as an iid source.
    pub fn reference(&self) -> Result<SyntheticSource> {
        match self {
            Data::Synthetic(s) => Ok(s.clone()),
            Data::Corpus(c, _) => {
                let mut counts = vec![0.0; c.vocab.size()];
                for &y in c.sequences.iter().flatten() {
                    counts[y] += 1.0;
                }
                let total: f64 = counts.iter().sum();
                SyntheticSource::iid(counts.iter().map(|n| n / total).collect())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    train: RngStream,
    data: RngStream,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: RunConfig,
    vocab: Vec<String>,
    step: u64,
    /// Streams for the next training step.
    rng: RngState,
    adam_steps: Vec<u64>,
    warp_adam_steps: [u64; 2],
    tensors: Vec<TensorEntry>,
}

/// Everything needed to resume training or to sample.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub state: TrainState,
}

fn row(v: &[f64]) -> Mat {
    Mat::from_shape_vec((1, v.len()), v.to_vec()).expect("shape")
}

impl Checkpoint {
    fn tensors(&self) -> Vec<(String, Mat)> {
        let s = &self.state;
        let mut out: Vec<(String, Mat)> = s.model.params.names.iter().cloned().zip(s.model.params.values.iter().cloned()).collect();
        out.push(("time.fourier_freqs".into(), row(&s.model.fourier)));
        for (name, (m, v)) in s.model.params.names.iter().zip(s.moments.iter().zip(&s.model.params.values)) {
            let shape = v.dim();
            out.push((format!("adam.m.{name}"), Mat::from_shape_vec(shape, m.m.clone()).expect("shape")));
            out.push((format!("adam.v.{name}"), Mat::from_shape_vec(shape, m.v.clone()).expect("shape")));
        }
        let w = &s.warp;
        out.push(("warp.input_logits".into(), row(&w.input_logits)));
        out.push(("warp.output_logits".into(), row(&w.output_logits)));
        out.push(("warp.ema_input_logits".into(), row(&w.ema_input_logits)));
        out.push(("warp.ema_output_logits".into(), row(&w.ema_output_logits)));
        out.push(("warp.adam.m.input".into(), row(&w.input_moments.m)));
        out.push(("warp.adam.v.input".into(), row(&w.input_moments.v)));
        out.push(("warp.adam.m.output".into(), row(&w.output_moments.m)));
        out.push(("warp.adam.v.output".into(), row(&w.output_moments.v)));
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.tensors();
        let mut entries = Vec::with_capacity(tensors.len());
        let mut offset = 0u64;
        for (name, t) in &tensors {
            entries.push(TensorEntry { name: name.clone(), shape: [t.nrows(), t.ncols()], offset });
            offset += 8 * t.len() as u64;
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            step: self.state.step,
            rng: RngState {
                train: step_rng(self.config.train.seed, self.state.step),
                data: data_rng(self.config.train.seed, self.state.step),
            },
            adam_steps: self.state.moments.iter().map(|m| m.step).collect(),
            warp_adam_steps: [self.state.warp.input_moments.step, self.state.warp.output_moments.step],
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 8 {
            return Err(bad("file too short"));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let value: serde_json::Value = serde_json::from_slice(body)?;
        let found = value.get("version").and_then(|v| v.as_u64()).ok_or_else(|| bad("missing version"))? as u32;
        if found != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion { found, expected: CHECKPOINT_VERSION });
        }
        let header: Header = serde_json::from_value(value)?;
        header.config.validate()?;
        let payload = &bytes[8 + hlen..];
        let mut expected_offset = 0u64;
        let mut tensors = std::collections::HashMap::new();
        for e in &header.tensors {
            if e.offset != expected_offset {
                return Err(bad("inconsistent tensor offsets"));
            }
            let n = e.shape[0] * e.shape[1];
            let start = e.offset as usize;
            let chunk = payload.get(start..start + 8 * n).ok_or_else(|| bad("truncated payload"))?;
            let vals: Vec<f64> = chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.insert(e.name.clone(), Mat::from_shape_vec((e.shape[0], e.shape[1]), vals).expect("shape"));
            expected_offset += 8 * n as u64;
        }
        if expected_offset as usize != payload.len() {
            return Err(bad("payload length does not match manifest"));
        }
        let mut take = |name: &str| tensors.remove(name).ok_or_else(|| bad(&format!("missing tensor {name}")));
        let cfg = header.config.clone();
        let template = Transformer::init(cfg.denoiser, cfg.embed_init_scale, &mut RngStream::new(0, 0))?;
        let names = template.params.names.clone();
        let mut values = Vec::with_capacity(names.len());
        for n in &names {
            values.push(take(n)?);
        }
        let fourier = take("time.fourier_freqs")?.iter().copied().collect();
        let model = Transformer::from_parts(cfg.denoiser, cfg.embed_init_scale, fourier, ParamStore { names: names.clone(), values })?;
        if header.adam_steps.len() != names.len() {
            return Err(bad("optimiser state does not match parameters"));
        }
        let mut moments = Vec::with_capacity(names.len());
        for (n, &step) in names.iter().zip(&header.adam_steps) {
            let m = take(&format!("adam.m.{n}"))?.iter().copied().collect();
            let v = take(&format!("adam.v.{n}"))?.iter().copied().collect();
            moments.push(AdamMoments { m, v, step });
        }
        let mut warp = WarpCdf::new(cfg.warp_config(), cfg.t_min, cfg.t_max)?;
        let flat = |m: Mat| m.iter().copied().collect::<Vec<f64>>();
        warp.input_logits = flat(take("warp.input_logits")?);
        warp.output_logits = flat(take("warp.output_logits")?);
        warp.ema_input_logits = flat(take("warp.ema_input_logits")?);
        warp.ema_output_logits = flat(take("warp.ema_output_logits")?);
        warp.input_moments = AdamMoments {
            m: flat(take("warp.adam.m.input")?),
            v: flat(take("warp.adam.v.input")?),
            step: header.warp_adam_steps[0],
        };
        warp.output_moments = AdamMoments {
            m: flat(take("warp.adam.m.output")?),
            v: flat(take("warp.adam.v.output")?),
            step: header.warp_adam_steps[1],
        };
        if warp.input_logits.len() != cfg.warp.bins || warp.output_logits.len() != cfg.warp.bins {
            return Err(bad("warp bins do not match config"));
        }
        if !tensors.is_empty() {
            return Err(bad("unexpected tensors in checkpoint"));
        }
        Ok(Self {
            config: cfg,
            vocab: Vocabulary::new(header.vocab)?,
            state: TrainState { model, moments, warp, step: header.step },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

pub const METRICS_HEADER: &str = "step,wall_seconds,mean_weighted_ce,t_p10,t_p50,t_p90";

/// Fresh model, warp and optimiser state for a configuration.
pub fn init_state(cfg: &RunConfig) -> Result<TrainState> {
    let model = Transformer::init(cfg.denoiser, cfg.embed_init_scale, &mut RngStream::new(cfg.train.seed, 1))?;
    let warp = WarpCdf::new(cfg.warp_config(), cfg.t_min, cfg.t_max)?;
    Ok(TrainState::new(model, warp))
}

/// Trains from scratch (or from `resume`), writing `metrics.csv` and
/// checkpoints into `out`. Returns the final checkpoint.
pub fn run_train(cfg: RunConfig, resume: Option<Checkpoint>, out: &Path) -> Result<Checkpoint> {
    cfg.validate()?;
    let data = Data::load(&cfg)?;
    if data.vocab().size() != cfg.denoiser.vocab {
        return Err(Error::Config(format!(
            "denoiser.vocab is {} but the data has {} tokens",
            cfg.denoiser.vocab,
            data.vocab().size()
        )));
    }
    fs::create_dir_all(out)?;
    let state = match resume {
        Some(ck) => {
            if ck.config.denoiser != cfg.denoiser || ck.vocab != *data.vocab() {
                return Err(Error::Checkpoint("checkpoint does not match the model or data in the config".into()));
            }
            ck.state
        }
        None => init_state(&cfg)?,
    };
    let metrics_path = out.join("metrics.csv");
    let fresh = state.step == 0 || !metrics_path.exists();
    let file = OpenOptions::new().create(true).write(true).append(!fresh).truncate(fresh).open(&metrics_path)?;
    let mut metrics = BufWriter::new(file);
    if fresh {
        writeln!(metrics, "{METRICS_HEADER}")?;
    }
    let mut ck = Checkpoint { config: cfg.clone(), vocab: data.vocab().clone(), state };
    let start = Instant::now();
    let every = cfg.checkpoint_every;
    let vocab = ck.vocab.clone();
    let mut state = ck.state.clone();
    train(&mut state, data.source(), &cfg.train, |s, stats| {
        writeln!(
            metrics,
            "{},{:.3},{},{},{},{}",
            s.step,
            start.elapsed().as_secs_f64(),
            stats.mean_weighted_ce,
            stats.t_quantile(0.1),
            stats.t_quantile(0.5),
            stats.t_quantile(0.9)
        )?;
        if s.step % every == 0 && s.step < cfg.train.steps {
            metrics.flush()?;
            let snap = Checkpoint { config: cfg.clone(), vocab: vocab.clone(), state: s.clone() };
            snap.save(&out.join(format!("checkpoint-{:06}.ckpt", s.step)))?;
        }
        Ok(())
    })?;
    metrics.flush()?;
    ck.state = state;
    ck.save(&out.join(format!("checkpoint-{:06}.ckpt", ck.state.step)))?;
    ck.save(&out.join("final.ckpt"))?;
    Ok(ck)
}

/// Tokenizer used to render samples as text.
fn tokenizer_of(cfg: &RunConfig) -> Tokenizer {
    match &cfg.data {
        DataConfig::Corpus { tokenizer, .. } => *tokenizer,
        DataConfig::Synthetic { .. } => Tokenizer::Whitespace,
    }
}

pub fn encode_prompt(vocab: &Vocabulary, tokenizer: Tokenizer, prompt: &str) -> Result<Vec<usize>> {
    tokenizer
        .split(prompt)
        .into_iter()
        .map(|t| vocab.id(t).ok_or_else(|| Error::UnknownToken(t.to_string())))
        .collect()
}

pub fn decode_tokens(vocab: &Vocabulary, tokenizer: Tokenizer, ids: &[usize]) -> String {
    let toks: Vec<&str> = ids.iter().map(|&i| vocab.token(i)).collect();
    tokenizer.join(&toks)
}

/// Draws `n` sequences from a checkpoint, optionally continuing `prompt`.
pub fn generate(ck: &Checkpoint, sampler: &SamplerConfig, n: usize, seed: u64, prompt: Option<&[usize]>, record: bool) -> Result<crate::sampler::SampleOutput> {
    let len = ck.config.train.seq_len;
    let cond = match prompt {
        Some(p) => Conditioning::prefix(p, len)?,
        None => Conditioning::unconditional(len),
    };
    let emb = ck.state.model.embeddings()?;
    sample(&ck.state.model, &emb, &ck.state.warp, sampler, &vec![cond; n], &RngStream::new(seed, 2), record)
}

pub fn run_sample(ck: &Checkpoint, sampler: &SamplerConfig, n: usize, seed: u64, prompt: Option<&str>, out: &Path, trajectory: bool) -> Result<()> {
    fs::create_dir_all(out)?;
    let tok = tokenizer_of(&ck.config);
    let prompt = prompt.map(|p| encode_prompt(&ck.vocab, tok, p)).transpose()?;
    let result = generate(ck, sampler, n, seed, prompt.as_deref(), trajectory)?;
    let mut f = BufWriter::new(File::create(out.join("samples.txt"))?);
    for s in &result.tokens {
        writeln!(f, "{}", decode_tokens(&ck.vocab, tok, s))?;
    }
    f.flush()?;
    if trajectory {
        let mut f = BufWriter::new(File::create(out.join("trajectory.csv"))?);
        let d = ck.config.denoiser.d;
        let dims: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        writeln!(f, "sample,step,t,position,{}", dims.join(","))?;
        for (i, tr) in result.trajectories.iter().enumerate() {
            for (k, st) in tr.states.iter().flatten().enumerate() {
                for (pos, r) in st.rows().into_iter().enumerate() {
                    let vals: Vec<String> = r.iter().map(|v| v.to_string()).collect();
                    writeln!(f, "{i},{},{},{pos},{}", k + 1, tr.timesteps[k + 1], vals.join(","))?;
                }
            }
        }
        f.flush()?;
    }
    Ok(())
}

pub fn run_eval(ck: &Checkpoint, sampler: &SamplerConfig, n: usize, seed: u64, out: &Path) -> Result<MetricsReport> {
    fs::create_dir_all(out)?;
    let data = Data::load(&ck.config)?;
    let reference = data.reference()?;
    let result = generate(ck, sampler, n, seed, None, false)?;
    let report = MetricsReport::compute(&reference, &result.tokens)?;
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    fs::write(out.join("metrics_eval.csv"), format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.csv_row()))?;
    Ok(report)
}

pub const WARP_POINTS: usize = 1000;

/// `(t, t', F~, F, pdf, weight)` rows over an even grid in normalised time.
pub fn warp_table(warp: &WarpCdf) -> Vec<[f64; 6]> {
    let cdf = warp.normalized();
    (0..WARP_POINTS)
        .map(|i| {
            let tp = i as f64 / (WARP_POINTS - 1) as f64;
            [warp.denormalize_time(tp), tp, warp.eval_cdf(tp, false), cdf.eval(tp), cdf.pdf(tp), cdf.importance_weight(tp)]
        })
        .collect()
}

pub fn run_warp_inspect(ck: &Checkpoint, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut f = BufWriter::new(File::create(out.join("warp.csv"))?);
    writeln!(f, "t,t_prime,f_tilde,f,pdf,weight")?;
    for r in warp_table(&ck.state.warp) {
        writeln!(f, "{},{},{},{},{},{}", r[0], r[1], r[2], r[3], r[4], r[5])?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Parser, Debug)]
#[command(name = "cdcd", about = "Continuous diffusion for categorical data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default, Clone)]
pub struct SamplerFlags {
    /// Number of solver steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum)]
    pub solver: Option<SolverArg>,
    #[arg(long)]
    pub score_temp: Option<f64>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub nucleus_p: Option<f64>,
    #[arg(long)]
    pub sigma_init: Option<f64>,
    #[arg(long, value_enum)]
    pub decode: Option<DecodeArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SolverArg {
    Euler,
    Heun,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DecodeArg {
    Argmax,
    NearestEmbedding,
}

impl SamplerFlags {
    pub fn apply(&self, base: SamplerConfig) -> Result<SamplerConfig> {
        let mut c = base;
        if let Some(n) = self.steps {
            c.n_steps = n;
        }
        if let Some(s) = self.solver {
            c.solver = match s {
                SolverArg::Euler => Solver::Euler,
                SolverArg::Heun => Solver::Heun,
            };
        }
        if let Some(v) = self.score_temp {
            c.score_temp = v;
        }
        if let Some(v) = self.guidance {
            c.guidance = v;
        }
        if let Some(v) = self.nucleus_p {
            c.nucleus_p = v;
        }
        if let Some(v) = self.sigma_init {
            c.sigma_init = v;
        }
        if let Some(d) = self.decode {
            c.decode = match d {
                DecodeArg::Argmax => Decode::Argmax,
                DecodeArg::NearestEmbedding => Decode::NearestEmbedding,
            };
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model; resumes when --checkpoint is given.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Total number of optimisation steps.
        #[arg(long)]
        train_steps: Option<u64>,
    },
    /// Generate sequences from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        n_samples: usize,
        /// Clean prefix to continue.
        #[arg(long)]
        prompt: Option<String>,
        /// Also write every intermediate state to trajectory.csv.
        #[arg(long)]
        trajectory: bool,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Sample and score against the data's ground truth.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n_samples: usize,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Tabulate the learnt time warp.
    WarpInspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, checkpoint, seed, out, train_steps } => {
            let resume = checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            let mut cfg = match (&config, &resume) {
                (Some(p), _) => RunConfig::load(p)?,
                (None, Some(ck)) => ck.config.clone(),
                (None, None) => return Err(Error::Config("train needs --config or --checkpoint".into())),
            };
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(n) = train_steps {
                cfg.train.steps = n;
            }
            let ck = run_train(cfg, resume, &out)?;
            println!("trained {} steps; checkpoint at {}", ck.state.step, out.join("final.ckpt").display());
        }
        Command::Sample { checkpoint, seed, out, n_samples, prompt, trajectory, sampler } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = sampler.apply(ck.config.sampler)?;
            run_sample(&ck, &cfg, n_samples, seed.unwrap_or(ck.config.seed), prompt.as_deref(), &out, trajectory)?;
            println!("wrote {}", out.join("samples.txt").display());
        }
        Command::Eval { checkpoint, seed, out, n_samples, sampler } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = sampler.apply(ck.config.sampler)?;
            let report = run_eval(&ck, &cfg, n_samples, seed.unwrap_or(ck.config.seed), &out)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::WarpInspect { checkpoint, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            run_warp_inspect(&ck, &out)?;
            println!("wrote {}", out.join("warp.csv").display());
        }
    }
    Ok(())
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::desk_markov();
        c.denoiser = DenoiserConfig { blocks: 1, width: 8, heads: 2, d: 4, vocab: 4, fourier_features: 4, time_mlp_width: 8 };
        c.train.batch = 4;
        c.train.seq_len = 6;
        c.train.steps = 3;
        c.checkpoint_every = 2;
        c.sampler = SamplerConfig::euler(4);
        c
    }

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn desk_config_validates_and_round_trips() {
        let c = RunConfig::desk_markov();
        c.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_config_field_is_rejected() {
        let mut v = serde_json::to_value(RunConfig::desk_markov()).unwrap();
        v["surprise"] = serde_json::json!(1);
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }

    #[test]
    fn corpus_windows_and_vocab() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.txt", "abcab");
        let c = ingest_corpus(&p, Tokenizer::Char, 2).unwrap();
        assert_eq!(c.vocab.tokens(), &["<pad>", "a", "b", "c"]);
        assert_eq!(c.sequences, vec![vec![1, 2], vec![3, 1], vec![2, 0]]);
        let w = ingest_corpus(&write(dir.path(), "w.txt", "the cat the\ndog"), Tokenizer::Whitespace, 3).unwrap();
        assert_eq!(w.vocab.tokens(), &["<pad>", "cat", "dog", "the"]);
        assert_eq!(w.sequences, vec![vec![3, 1, 3], vec![2, 0, 0]]);
    }

    #[test]
    fn corpus_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ingest_corpus(&write(dir.path(), "e.txt", "  \n"), Tokenizer::Whitespace, 4), Err(Error::EmptyCorpus)));
        let bad = dir.path().join("b.txt");
        fs::write(&bad, [0xff, 0xfe, 0x41]).unwrap();
        assert!(ingest_corpus(&bad, Tokenizer::Char, 4).is_err());
    }

    #[test]
    fn prompt_round_trip() {
        let v = Vocabulary::new(vec!["<pad>".into(), "a".into(), "b".into()]).unwrap();
        let ids = encode_prompt(&v, Tokenizer::Char, "ab").unwrap();
        assert_eq!(ids, vec![1, 2]);
        assert_eq!(decode_tokens(&v, Tokenizer::Char, &ids), "ab");
        assert!(matches!(encode_prompt(&v, Tokenizer::Char, "z"), Err(Error::UnknownToken(_))));
    }

    #[test]
    fn checkpoint_bytes_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let ck = run_train(tiny(), None, dir.path()).unwrap();
        let a = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back.to_bytes().unwrap(), a);
        assert_eq!(back.state.step, 3);
        assert!(dir.path().join("checkpoint-000002.ckpt").exists());
        let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 4);
        assert!(metrics.starts_with(METRICS_HEADER));
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let ck = Checkpoint { config: tiny(), vocab: Vocabulary::numbered(4), state: init_state(&tiny()).unwrap() };
        let bytes = ck.to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        header["version"] = serde_json::json!(99);
        let h = serde_json::to_vec(&header).unwrap();
        let mut out = (h.len() as u64).to_le_bytes().to_vec();
        out.extend(h);
        out.extend_from_slice(&bytes[8 + hlen..]);
        let err = Checkpoint::from_bytes(&out).unwrap_err();
        assert!(matches!(err, Error::CheckpointVersion { found: 99, expected: CHECKPOINT_VERSION }));
        let msg = err.to_string();
        assert!(msg.contains("99") && msg.contains(&CHECKPOINT_VERSION.to_string()));
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let ck = Checkpoint { config: tiny(), vocab: Vocabulary::numbered(4), state: init_state(&tiny()).unwrap() };
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..4]).is_err());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.train.steps = 4;
        let full = run_train(cfg.clone(), None, a.path()).unwrap();
        let mut half = cfg.clone();
        half.train.steps = 2;
        let first = run_train(half, None, b.path()).unwrap();
        let resumed = run_train(cfg, Some(first), b.path()).unwrap();
        assert_eq!(resumed.to_bytes().unwrap(), full.to_bytes().unwrap());
        let ma = fs::read_to_string(a.path().join("metrics.csv")).unwrap();
        let mb = fs::read_to_string(b.path().join("metrics.csv")).unwrap();
        let cols = |s: &str| -> Vec<String> {
            s.lines().map(|l| l.split(',').enumerate().filter(|(i, _)| *i != 1).map(|(_, v)| v.to_string()).collect::<Vec<_>>().join(",")).collect()
        };
        assert_eq!(cols(&ma), cols(&mb));
    }

    #[test]
    fn vocab_mismatch_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny();
        c.denoiser.vocab = 5;
        assert!(matches!(run_train(c, None, dir.path()), Err(Error::Config(_))));
    }

    #[test]
    fn warp_table_is_monotone() {
        let st = init_state(&tiny()).unwrap();
        let rows = warp_table(&st.warp);
        assert_eq!(rows.len(), WARP_POINTS);
        assert!((rows[0][0] - 1.0).abs() < 1e-12 && (rows[WARP_POINTS - 1][0] - 300.0).abs() < 1e-9);
        assert!(rows.windows(2).all(|w| w[1][3] >= w[0][3]));
    }

    #[test]
    fn flag_overrides_apply() {
        let f = SamplerFlags { steps: Some(7), solver: Some(SolverArg::Heun), guidance: Some(2.0), ..Default::default() };
        let c = f.apply(SamplerConfig::euler(200)).unwrap();
        assert_eq!((c.n_steps, c.solver, c.guidance), (7, Solver::Heun, 2.0));
        let bad = SamplerFlags { nucleus_p: Some(0.0), ..Default::default() };
        assert!(bad.apply(SamplerConfig::euler(10)).is_err());
    }
}
