//! Command-line entry point.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use actionlm::pipeline::checkpoint::Checkpoint;
use actionlm::pipeline::eval::{tokenize_all, usage_stats, Recognizer};
use actionlm::pipeline::train::{
    adapters_from_checkpoint, base_from_checkpoint, codec_from_checkpoint, load_dataset,
    prepare_split, pretrain, save_adapters, save_base, save_codec, train_codec, train_lora,
};
use actionlm::pipeline::RunConfig;
use actionlm::skeldata::{synth_generate, Protocol};
use actionlm::{CoreError, Result};

#[derive(Parser)]
#[command(
    name = "actionlm",
    about = "Skeleton action recognition through action sentences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        base.with_overrides(&self.set)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as JSONL.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the stand-in language model.
    PretrainBase {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: train the codec and codebook.
    TrainCodec {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: train adapters on the frozen language model.
    TrainLora {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-1 accuracy on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        adapters: PathBuf,
    },
    /// Print the action sentence of every sample as JSON lines.
    Tokenize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        codec: PathBuf,
    },
    /// Token rank-frequency table against the Zipf target.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
}

fn emit<T: Serialize>(record: &T) {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, record).expect("stdout");
    writeln!(out).expect("stdout");
}

fn warn_config<T: Serialize>(ck: &Checkpoint, config: &T) {
    if let Some(w) = ck.config_warning(config) {
        eprintln!("{}", serde_json::json!({ "warning": w }));
    }
}

fn load_base(path: &Path, cfg: &RunConfig) -> Result<(actionlm::recognizer::BaseLm, Vec<String>)> {
    let ck = Checkpoint::load(path)?;
    warn_config(&ck, &cfg.lm_config());
    base_from_checkpoint(&ck)
}

fn load_codec(path: &Path, cfg: &RunConfig, joints: usize) -> Result<actionlm::codec::Codec> {
    let ck = Checkpoint::load(path)?;
    warn_config(&ck, &cfg.codec_config_for(joints));
    codec_from_checkpoint(&ck)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, out } => {
            let cfg = common.load()?;
            let ds = synth_generate(&cfg.synth_spec())?;
            ds.write_jsonl(&out)?;
            emit(
                &serde_json::json!({ "samples": ds.len(), "classes": ds.class_names, "path": out }),
            );
        }
        Command::PretrainBase { common, out } => {
            let cfg = common.load()?;
            let ds = load_dataset(&cfg)?;
            let (base, report) = pretrain(&cfg, &ds.class_names)?;
            save_base(&base, &ds.class_names, &out)?;
            emit(&serde_json::json!({ "pretrain": report, "params": base.param_count() }));
        }
        Command::TrainCodec { common, base, out } => {
            let cfg = common.load()?;
            let split = prepare_split(&cfg)?;
            let (lm, _) = load_base(&base, &cfg)?;
            let diverged = out.with_extension("diverged");
            let run = train_codec(&cfg, &split.train, lm.embeddings(), Some(&diverged), |m| {
                emit(&serde_json::json!({ "stage": "codec", "metrics": m }))
            })?;
            save_codec(&run.codec, &split.train.class_names, &out)?;
            emit(&serde_json::json!({
                "initial_reconstruction": run.initial_reconstruction,
                "final_reconstruction": run.final_reconstruction,
            }));
        }
        Command::TrainLora {
            common,
            base,
            codec,
            out,
        } => {
            let cfg = common.load()?;
            let split = prepare_split(&cfg)?;
            let (lm, _) = load_base(&base, &cfg)?;
            let codec = load_codec(&codec, &cfg, split.train.samples[0].joints())?;
            let run = train_lora(&cfg, &codec, &lm, &split.train, |m| {
                emit(&serde_json::json!({ "stage": "lora", "metrics": m }))
            })?;
            save_adapters(&run, &cfg, &out)?;
            emit(&serde_json::json!({
                "adapter_params": run.adapter_params,
                "base_params": run.base_params,
                "adapter_fraction": run.adapter_params as f64 / run.base_params as f64,
                "base_frozen": run.base_frozen,
            }));
        }
        Command::Eval {
            common,
            base,
            codec,
            adapters,
        } => {
            let cfg = common.load()?;
            let split = prepare_split(&cfg)?;
            let (mut lm, _) = load_base(&base, &cfg)?;
            let codec = load_codec(
                &codec,
                &cfg,
                split
                    .test
                    .samples
                    .first()
                    .map_or(cfg.synth_joints, |s| s.joints()),
            )?;
            let lora = adapters_from_checkpoint(&Checkpoint::load(&adapters)?, &mut lm)?;
            let rec = Recognizer {
                codec: &codec,
                base: &lm,
                adapters: Some(&lora),
                template: &cfg.template,
                list_template: &cfg.list_template,
                no_discretization: cfg.no_discretization,
            };
            let report = if cfg.protocol == Protocol::UnseenClass {
                rec.evaluate_unseen(
                    &split.test,
                    &split.unseen_classes,
                    cfg.unseen_runs,
                    cfg.seed,
                )?
            } else {
                rec.evaluate(&split.test)?
            };
            emit(
                &serde_json::json!({ "eval": report, "protocol": cfg.protocol, "dropped": split.dropped }),
            );
        }
        Command::Tokenize { common, codec } => {
            let cfg = common.load()?;
            let ds = load_dataset(&cfg)?;
            let codec = load_codec(
                &codec,
                &cfg,
                ds.samples.first().map_or(cfg.synth_joints, |s| s.joints()),
            )?;
            for (i, tokens) in tokenize_all(&codec, &ds)?.into_iter().enumerate() {
                let label = ds.samples[i].class_label.map(|k| ds.class_names[k].clone());
                emit(&serde_json::json!({ "sample": i, "label": label, "tokens": tokens }));
            }
        }
        Command::Stats { common, codec, csv } => {
            let cfg = common.load()?;
            let ds = load_dataset(&cfg)?;
            let codec = load_codec(
                &codec,
                &cfg,
                ds.samples.first().map_or(cfg.synth_joints, |s| s.joints()),
            )?;
            let stats = usage_stats(&codec, &ds, cfg.zipf_alpha, cfg.zipf_beta)?;
            std::fs::write(&csv, stats.to_csv())?;
            emit(
                &serde_json::json!({ "js_to_zipf": stats.js_to_zipf, "rows": stats.rows.len(), "csv": csv }),
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::FAILURE
        }
    }
}

fn report(e: &CoreError) {
    eprintln!(
        "{}",
        serde_json::json!({ "error": e.kind(), "message": e.to_string() })
    );
}
