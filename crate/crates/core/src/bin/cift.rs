use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use cift::data::{self, GenConfig};
use cift::harness::{self, bench, checkpoint, eval, gradcheck, probe, RunConfig};
use cift::model::Mode;
use cift::{Error, Result};

#[derive(Parser)]
#[command(name = "cift", version, about = "CIF-Transducer toolkit on a small autograd engine")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus as JSONL (gzip when the path ends in .gz).
    GenData(GenArgs),
    /// Train a model and write its checkpoint and metrics log.
    Train(TrainArgs),
    /// Report CER and firing statistics of a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Write greedy hypotheses as JSONL.
    Decode(DecodeArgs),
    /// Finite-difference check of every parameter group.
    Gradcheck(GradArgs),
    /// Activation counts, peak memory and largest feasible batch per mode.
    BenchMem(BenchArgs),
    /// CER change after re-initialising the predictor.
    ReinitProbe(ProbeArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON generator settings; flags override them.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    feat_dim: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    task_seed: Option<u64>,
    #[arg(long)]
    min_tokens: Option<usize>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    dwell_min: Option<usize>,
    #[arg(long)]
    dwell_max: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    id_prefix: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    log_wall_time: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Expected model family; decoding fails if the checkpoint differs.
    #[arg(long)]
    mode: Option<Mode>,
}

#[derive(Args)]
struct GradArgs {
    /// Check one family only; both by default.
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
    tolerance: f64,
}

#[derive(Args)]
struct BenchArgs {
    /// Encoder frames after 4x down-sampling.
    #[arg(long, default_value_t = 400)]
    frames: usize,
    #[arg(long, default_value_t = 30)]
    targets: usize,
    #[arg(long, default_value_t = 500)]
    vocab: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 256)]
    cap_mb: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    cift_checkpoint: PathBuf,
    #[arg(long)]
    rnnt_checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated re-initialisation seeds.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("report serializes"));
}

fn gen_data(a: GenArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => GenConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f.clone() { cfg.$f = v; })* };
    }
    set!(vocab, feat_dim, count, seed, task_seed, min_tokens, max_tokens, dwell_min, dwell_max, noise, id_prefix);
    let utts = data::generate(&cfg)?;
    data::write_jsonl(&a.out, &utts)?;
    eprintln!("wrote {} utterances to {}", utts.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None if a.seed.is_some() => RunConfig::default(),
        None => return Err(Error::Config("a seed is required (--seed or a config file)".into())),
    };
    if let Some(v) = a.mode {
        cfg.mode = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.optim.lr = v;
    }
    if let Some(v) = a.warmup_steps {
        cfg.optim.warmup_steps = v;
    }
    for (dst, src) in [
        (&mut cfg.train_data, a.train_data),
        (&mut cfg.eval_data, a.eval_data),
        (&mut cfg.checkpoint, a.checkpoint),
        (&mut cfg.metrics, a.metrics),
    ] {
        if src.is_some() {
            *dst = src;
        }
    }
    cfg.log_wall_time |= a.log_wall_time;
    cfg.validate()?;
    let path = cfg
        .train_data
        .clone()
        .ok_or_else(|| Error::Config("no training data (--train-data)".into()))?;
    if cfg.checkpoint.is_none() {
        return Err(Error::Config("no checkpoint path (--checkpoint)".into()));
    }
    let corpus = data::read_jsonl(&path)?;
    let out = harness::train(&cfg, &corpus, None)?;
    if let Some(last) = out.history.last() {
        eprintln!("step {}: total loss {:.4}", last.step, last.loss.total);
    }
    if let Some(eval_path) = &cfg.eval_data {
        let held = data::read_jsonl(eval_path)?;
        print_json(&eval::evaluate(&out.params, &cfg.model, cfg.mode, &held)?);
    }
    Ok(())
}

fn load_pair(ckpt: &Path, data_path: &Path) -> Result<(cift::model::ParamStore, RunConfig, Vec<data::Utterance>)> {
    let (params, cfg) = checkpoint::load(ckpt)?;
    let corpus = data::read_jsonl(data_path)?;
    Ok((params, cfg, corpus))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => {
            let (params, cfg, corpus) = load_pair(&a.checkpoint, &a.data)?;
            print_json(&eval::evaluate(&params, &cfg.model, cfg.mode, &corpus)?);
            Ok(())
        }
        Cmd::Decode(a) => {
            let (params, cfg, corpus) = load_pair(&a.checkpoint, &a.data)?;
            if let Some(m) = a.mode {
                if m != cfg.mode {
                    return Err(Error::Config(format!("checkpoint holds a {} model, not {m}", cfg.mode)));
                }
            }
            let results = eval::decode_all(&params, &cfg.model, cfg.mode, &corpus)?;
            eval::write_hypotheses(&a.out, &corpus, &results)
        }
        Cmd::Gradcheck(a) => {
            let modes = match a.mode {
                Some(m) => vec![m],
                None => vec![Mode::Cift, Mode::RnntBaseline],
            };
            let setup = gradcheck::GradcheckSetup {
                seed: a.seed,
                tolerance: a.tolerance,
                ..Default::default()
            };
            let mut failed = Vec::new();
            for m in modes {
                let r = gradcheck::run(m, &setup, None)?;
                print_json(&r);
                if !r.passed {
                    failed.push(m.as_str());
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Numerical(format!(
                    "gradient check failed for {}",
                    failed.join(", ")
                )))
            }
        }
        Cmd::BenchMem(a) => {
            let setup = bench::BenchSetup {
                frames: a.frames,
                target_len: a.targets,
                vocab: a.vocab,
                d_model: a.d_model,
                batch: a.batch,
                cap_bytes: a.cap_mb * 1024 * 1024,
                seed: a.seed,
            };
            print_json(&bench::run(&setup)?);
            Ok(())
        }
        Cmd::ReinitProbe(a) => {
            let corpus = data::read_jsonl(&a.data)?;
            let mut rows = Vec::new();
            for (path, expected) in [
                (&a.cift_checkpoint, Mode::Cift),
                (&a.rnnt_checkpoint, Mode::RnntBaseline),
            ] {
                let (params, cfg) = checkpoint::load(path)?;
                if cfg.mode != expected {
                    return Err(Error::Config(format!(
                        "{} holds a {} model, expected {expected}",
                        path.display(),
                        cfg.mode
                    )));
                }
                rows.extend(probe::reinit_probe(&params, &cfg.model, cfg.mode, &corpus, &a.seeds)?);
            }
            print_json(&rows);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
