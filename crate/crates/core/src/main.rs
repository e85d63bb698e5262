//! Command-line surface: corpus generation, training, evaluation, single
//! clip inference, flow debugging, and trace rendering.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use ssha::clip::{Label, LabeledClip};
use ssha::container;
use ssha::env::EnvConfig;
use ssha::eval::{self, StepRecord};
use ssha::flow::clip_flow;
use ssha::qnet::{load_checkpoint, save_checkpoint, NetConfig, StreamKind};
use ssha::synth::{generate_corpus, Corpus, Split, SynthConfig};
use ssha::trainer::{self, TrainConfig};
use ssha::viz;

#[derive(Parser)]
#[command(name = "ssha", version, about = "Hard-attention video classification agent")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic labeled corpus
    Generate {
        /// Output directory for clips and manifest
        #[arg(long)]
        out: PathBuf,
        /// Number of clips, overriding the config
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON config file; the "synth" section applies here
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a Q-network on a generated corpus
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory for the checkpoint and training log
        #[arg(long)]
        out: PathBuf,
        /// JSON config file with optional train/net/env sections
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Ablation: drop region actions, classify the full frame
        #[arg(long)]
        no_localization: bool,
        /// Input streams for the net
        #[arg(long, value_enum)]
        stream: Option<StreamArg>,
    },
    /// Evaluate a checkpoint and print metrics JSON
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Also write the metrics JSON here
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write per-step trajectory JSON lines here
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
    /// Classify one clip file and print its trajectory
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: PathBuf,
    },
    /// Compute optical flow for one clip and render the fields
    Flow {
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON config file; the "env" section's flow block applies
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render annotated images from a trajectory log
    Trace {
        /// Trajectory JSON-lines file from eval --trajectories
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StreamArg {
    Rgb,
    Flow,
    TwoStream,
}

impl From<StreamArg> for StreamKind {
    fn from(s: StreamArg) -> StreamKind {
        match s {
            StreamArg::Rgb => StreamKind::Rgb,
            StreamArg::Flow => StreamKind::Flow,
            StreamArg::TwoStream => StreamKind::TwoStream,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

/// Optional config file sections; anything absent takes defaults.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    train: TrainConfig,
    net: NetConfig,
    env: EnvConfig,
    synth: SynthConfig,
}

fn load_config(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn corpus_items(corpus: &Corpus, split: Split) -> Vec<(usize, Arc<LabeledClip>)> {
    corpus
        .split_indices(split)
        .into_iter()
        .map(|i| (i, Arc::new(corpus.clips[i].clone())))
        .collect()
}

fn cmd_generate(
    out: &Path,
    n: Option<usize>,
    seed: Option<u64>,
    config: Option<&Path>,
) -> anyhow::Result<()> {
    let mut cfg = load_config(config)?.synth;
    if let Some(n) = n {
        cfg.n_clips = n;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let manifest = generate_corpus(&cfg, out)?;
    println!(
        "{}",
        serde_json::json!({"manifest": manifest, "clips": cfg.n_clips})
    );
    Ok(())
}

fn cmd_train(
    corpus_dir: &Path,
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    no_localization: bool,
    stream: Option<StreamArg>,
) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    let (mut train_cfg, mut net_cfg, mut env_cfg) = (cfg.train, cfg.net, cfg.env);
    if let Some(seed) = seed {
        train_cfg.seed = seed;
    }
    if no_localization {
        train_cfg.no_localization = true;
    }
    if let Some(s) = stream {
        net_cfg.stream = s.into();
        env_cfg.use_flow = net_cfg.stream.uses_flow();
    }
    let corpus = Corpus::load(corpus_dir)?;
    let clips: Vec<Arc<LabeledClip>> = corpus
        .split_indices(Split::Train)
        .into_iter()
        .map(|i| Arc::new(corpus.clips[i].clone()))
        .collect();
    fs::create_dir_all(out)?;
    let log_path = out.join("train_log.jsonl");
    let mut log = BufWriter::new(fs::File::create(&log_path)?);
    let result = trainer::train(train_cfg, net_cfg, env_cfg, clips, &mut log)?;
    std::io::Write::flush(&mut log)?;
    let ck_path = out.join("checkpoint.bin");
    save_checkpoint(&ck_path, &result.checkpoint)?;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": ck_path,
            "log": log_path,
            "episodes": result.episodes,
            "updates": result.updates,
            "final_epsilon": result.final_epsilon,
        })
    );
    Ok(())
}

/// Net, env, and ablation settings as echoed into the checkpoint.
fn configs_from_checkpoint(echo: &serde_json::Value) -> anyhow::Result<(NetConfig, EnvConfig, bool)> {
    let net: NetConfig =
        serde_json::from_value(echo["net"].clone()).context("checkpoint net config")?;
    let env: EnvConfig =
        serde_json::from_value(echo["env"].clone()).context("checkpoint env config")?;
    let no_loc = echo["train"]["no_localization"].as_bool().unwrap_or(false);
    Ok((net, env, no_loc))
}

fn cmd_eval(
    checkpoint: &Path,
    corpus_dir: &Path,
    split: SplitArg,
    out: Option<&Path>,
    trajectories: Option<&Path>,
) -> anyhow::Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let (_, env_cfg, no_loc) = configs_from_checkpoint(&ck.config_echo)?;
    let corpus = Corpus::load(corpus_dir)?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let items = corpus_items(&corpus, split);
    let echo = serde_json::json!({
        "checkpoint": ck.config_echo,
        "split": match split { Split::Train => "train", Split::Test => "test" },
    });
    let (metrics, results) = eval::evaluate(&ck.params, &env_cfg, no_loc, &items, echo)?;
    let text = serde_json::to_string_pretty(&metrics)?;
    println!("{text}");
    if let Some(path) = out {
        fs::write(path, format!("{text}\n"))?;
    }
    if let Some(path) = trajectories {
        let mut w = BufWriter::new(fs::File::create(path)?);
        eval::write_trajectories(&results, &mut w)?;
        std::io::Write::flush(&mut w)?;
    }
    Ok(())
}

fn cmd_infer(checkpoint: &Path, clip_path: &Path) -> anyhow::Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let (_, env_cfg, no_loc) = configs_from_checkpoint(&ck.config_echo)?;
    let clip = container::read_clip(clip_path)?.into_u8()?;
    let labeled = LabeledClip { clip, label: Label::NonViolent, gt_box: None, seed: 0 };
    let r = eval::greedy_episode(&ck.params, &env_cfg, no_loc, Arc::new(labeled), 0, 0)?;
    let steps: Vec<serde_json::Value> = r
        .steps
        .iter()
        .map(|s| {
            serde_json::json!({
                "step": s.step,
                "action": s.action,
                "box": s.r#box,
                "q_values": s.q_values,
            })
        })
        .collect();
    println!(
        "{}",
        serde_json::json!({
            "predicted": r.predicted,
            "actions": r.actions,
            "final_box": r.final_box,
            "steps": steps,
        })
    );
    Ok(())
}

fn cmd_flow(clip_path: &Path, out: &Path, config: Option<&Path>) -> anyhow::Result<()> {
    let cfg = load_config(config)?.env;
    let clip = container::read_clip(clip_path)?.into_u8()?;
    let flow = clip_flow(&clip, &cfg.flow)?;
    fs::create_dir_all(out)?;
    for t in 0..flow.t {
        let img = viz::flow_to_image(&flow, t)?;
        img.save_ppm(&out.join(format!("flow{t:04}.ppm")))?;
    }
    println!("{}", serde_json::json!({"fields": flow.t, "out": out}));
    Ok(())
}

fn cmd_trace(log: &Path, corpus_dir: &Path, out: &Path) -> anyhow::Result<()> {
    let text = fs::read_to_string(log).with_context(|| format!("reading {}", log.display()))?;
    let mut records: Vec<StepRecord> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        records.push(serde_json::from_str(line).context("parsing trajectory line")?);
    }
    if records.is_empty() {
        bail!("trajectory log {} holds no records", log.display());
    }
    let corpus = Corpus::load(corpus_dir)?;
    let paths = viz::annotate_trace(&records, &corpus, out)?;
    println!("{}", serde_json::json!({"images": paths.len(), "out": out}));
    Ok(())
}

fn init_thread_pool() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("SSHA_THREADS") {
        let n: usize = v.parse().context("SSHA_THREADS must be a number")?;
        if n > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .context("rayon pool init")?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_thread_pool()?;
    match cli.cmd {
        Cmd::Generate { out, n, seed, config } => {
            cmd_generate(&out, n, seed, config.as_deref())
        }
        Cmd::Train { corpus, out, config, seed, no_localization, stream } => {
            cmd_train(&corpus, &out, config.as_deref(), seed, no_localization, stream)
        }
        Cmd::Eval { checkpoint, corpus, split, out, trajectories } => {
            cmd_eval(&checkpoint, &corpus, split, out.as_deref(), trajectories.as_deref())
        }
        Cmd::Infer { checkpoint, clip } => cmd_infer(&checkpoint, &clip),
        Cmd::Flow { clip, out, config } => cmd_flow(&clip, &out, config.as_deref()),
        Cmd::Trace { log, corpus, out } => cmd_trace(&log, &corpus, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
