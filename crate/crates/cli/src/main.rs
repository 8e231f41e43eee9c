//! `ilab`: runs the stages of the intent-lab experiments from a TOML config.
//!
//! Failures print one line, `error: kind=<kind> msg=<message>`, and exit nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use intentlab::harness::metrics::write_jsonl;
use intentlab::harness::pipeline::{
    anchor_for, checkpoint_file, collect_buffer, init_model, supervised_stage, uapo_stage,
    write_report, BUFFER_FILE, CORPUS_FILE,
};
use intentlab::harness::{
    ablate, configure_threads, eval_checkpoint, run_pipeline, Checkpoint, ExperimentConfig,
    PipelineOptions, SeedData, Step,
};
use intentlab::reward::ReplayBuffer;
use intentlab::rng::StreamRng;
use intentlab::toy::probe::{probe_styles, Representation};
use intentlab::toy::{write_corpus, Stage};
use intentlab::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "ilab", version, about = "Intent-lab toy experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run only this seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Checkpoint stage to read (eval, probe) or pipeline step to stop after.
    #[arg(long, global = true)]
    stage: Option<String>,

    /// Checkpoint to start from.
    #[arg(long, global = true)]
    resume: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write the synthetic corpus for each seed.
    GenCorpus,
    /// Train Stage 1 from a fresh model.
    TrainStage1,
    /// Train Stage 2 from a Stage 1 checkpoint.
    TrainStage2,
    /// Collect preference tuples with a Stage 2 policy.
    Collect,
    /// Preference-optimize a Stage 2 checkpoint on its buffer.
    UapoTrain,
    /// Evaluate a checkpoint on the held-out split.
    Eval,
    /// Stage 1 + Stage 2 + eval over the strategy × grounding grid.
    Ablate,
    /// Linear style probes on a checkpoint.
    Probe,
    /// Stage 1 → Stage 2 → collect → UAPO → eval.
    Pipeline,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Contract("missing --config PATH".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

/// The `--resume` checkpoint, or the seed directory's checkpoint of `stage`.
fn input_checkpoint(cli: &Cli, cfg: &ExperimentConfig, seed: u64, stage: Stage) -> Result<Checkpoint> {
    let path = match &cli.resume {
        Some(p) => p.clone(),
        None => cfg.seed_dir(seed).join(checkpoint_file(stage)),
    };
    let ck = Checkpoint::load(&path)?;
    if ck.config_hash != cfg.hash() {
        return Err(Error::Contract(format!(
            "{}: built from config {}, current config is {}",
            path.display(),
            ck.config_hash,
            cfg.hash()
        )));
    }
    Ok(ck)
}

/// Seeds to act on: the checkpoint's own seed when resuming.
fn seeds(cli: &Cli, cfg: &ExperimentConfig) -> Result<Vec<u64>> {
    match &cli.resume {
        Some(p) => Ok(vec![Checkpoint::load(p)?.seed]),
        None => Ok(cfg.seeds.clone()),
    }
}

fn stage_flag(cli: &Cli, default: Stage) -> Result<Stage> {
    cli.stage.as_deref().map_or(Ok(default), str::parse)
}

fn say(msg: impl AsRef<str>) {
    println!("{}", msg.as_ref());
}

fn run(cli: &Cli) -> Result<()> {
    configure_threads()?;
    let cfg = load_config(cli)?;
    mkdir(&cfg.out_dir)?;
    match cli.command {
        Command::GenCorpus => {
            for seed in cfg.seeds.clone() {
                let dir = cfg.seed_dir(seed);
                mkdir(&dir)?;
                let sd = SeedData::new(&cfg, seed)?;
                write_corpus(&dir.join(CORPUS_FILE), &sd.corpus)?;
                say(format!("seed {seed}: {} utterances", sd.corpus.len()));
            }
        }
        Command::TrainStage1 => {
            for seed in cfg.seeds.clone() {
                let dir = cfg.seed_dir(seed);
                mkdir(&dir)?;
                let sd = SeedData::new(&cfg, seed)?;
                let mut m = init_model(&cfg, seed, cfg.strategy, cfg.grounding)?;
                let ck = supervised_stage(
                    &cfg,
                    &mut m,
                    &sd.data.train,
                    Stage::Stage1,
                    seed,
                    &StreamRng::new(seed, "stage1"),
                )?;
                ck.save(&dir.join(checkpoint_file(Stage::Stage1)))?;
                say(format!("seed {seed}: {}", ck.checkpoint_id));
            }
        }
        Command::TrainStage2 => {
            for seed in seeds(cli, &cfg)? {
                let from = input_checkpoint(cli, &cfg, seed, Stage::Stage1)?;
                if from.stage != Stage::Stage1 {
                    return Err(Error::Contract(format!(
                        "train-stage2 needs a stage1 checkpoint, got {}",
                        from.stage
                    )));
                }
                let dir = cfg.seed_dir(seed);
                mkdir(&dir)?;
                let sd = SeedData::new(&cfg, seed)?;
                let mut m = from.model()?;
                let ck = supervised_stage(&cfg, &mut m, &sd.data.train, Stage::Stage2, seed, &from.next_rng())?;
                ck.save(&dir.join(checkpoint_file(Stage::Stage2)))?;
                say(format!("seed {seed}: {}", ck.checkpoint_id));
            }
        }
        Command::Collect => {
            for seed in seeds(cli, &cfg)? {
                let policy = input_checkpoint(cli, &cfg, seed, Stage::Stage2)?;
                let dir = cfg.seed_dir(seed);
                mkdir(&dir)?;
                let sd = SeedData::new(&cfg, seed)?;
                let anchor = anchor_for(&cfg, &sd, &dir)?;
                let buf = collect_buffer(&cfg, &sd, &policy, &anchor)?;
                buf.write_jsonl(&dir.join(BUFFER_FILE))?;
                say(format!(
                    "seed {seed}: {} inputs, {} stored, {} skipped",
                    buf.stats.inputs, buf.stats.stored, buf.stats.skipped
                ));
            }
        }
        Command::UapoTrain => {
            for seed in seeds(cli, &cfg)? {
                let policy = input_checkpoint(cli, &cfg, seed, Stage::Stage2)?;
                let dir = cfg.seed_dir(seed);
                let sd = SeedData::new(&cfg, seed)?;
                let buf = ReplayBuffer::read_jsonl(&dir.join(BUFFER_FILE))?;
                let ck = uapo_stage(&cfg, &sd, &policy, &buf, Some(&dir.join("uapo.trace.jsonl")))?;
                ck.save(&dir.join(checkpoint_file(Stage::Stage3)))?;
                say(format!("seed {seed}: {}", ck.checkpoint_id));
            }
        }
        Command::Eval => {
            let stage = stage_flag(cli, Stage::Stage3)?;
            let mut rows = Vec::new();
            for seed in seeds(cli, &cfg)? {
                let ck = input_checkpoint(cli, &cfg, seed, stage)?;
                let dir = cfg.seed_dir(seed);
                mkdir(&dir)?;
                let sd = SeedData::new(&cfg, seed)?;
                rows.push(eval_checkpoint(&cfg, &sd, &ck, Some(&dir))?);
            }
            let name = format!("eval-{}", rows[0].stage);
            write_report(&cfg.out_dir, &format!("{name}.jsonl"), &format!("{name}.csv"), &rows)?;
            for r in &rows {
                say(serde_json::to_string(r).map_err(Error::from)?);
            }
        }
        Command::Ablate => {
            let rows = ablate(&cfg)?;
            say(format!("{} rows", rows.len()));
        }
        Command::Probe => {
            let stage = stage_flag(cli, Stage::Stage2)?;
            let mut out = Vec::new();
            for seed in seeds(cli, &cfg)? {
                let ck = input_checkpoint(cli, &cfg, seed, stage)?;
                let m = ck.model()?;
                let sd = SeedData::new(&cfg, seed)?;
                let mut rec = serde_json::Map::new();
                rec.insert("seed".into(), seed.into());
                rec.insert("checkpoint_id".into(), ck.checkpoint_id.clone().into());
                for rep in Representation::ALL {
                    if rep == Representation::Z && !m.strategy.needs_intent() {
                        continue;
                    }
                    let acc = probe_styles(&m, rep, &sd.data.heldout, &cfg.eval.probe)?;
                    rec.insert(format!("acc_{}", rep.as_str()), acc.into());
                }
                say(serde_json::Value::Object(rec.clone()).to_string());
                out.push(serde_json::Value::Object(rec));
            }
            write_jsonl(&cfg.out_dir.join(format!("probe-{stage}.jsonl")), &out)?;
        }
        Command::Pipeline => {
            let opts = PipelineOptions {
                resume: cli.resume.clone(),
                stop_after: cli.stage.as_deref().map(str::parse::<Step>).transpose()?,
            };
            let rows = run_pipeline(&cfg, &opts)?;
            for r in &rows {
                say(format!(
                    "seed {} {}: ter {:.4} style {:.4} reward {:.4}",
                    r.seed, r.stage, r.ter, r.style_agreement, r.mean_reward
                ));
            }
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: kind=usage msg={}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: kind={} msg={}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(1)
        }
    }
}
