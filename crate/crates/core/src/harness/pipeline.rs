use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::metrics::{evaluate, summarize_trace, write_csv, write_jsonl, MetricsRow, RowContext};
use crate::error::{Error, Result};
use crate::fusion::FusionStrategy;
use crate::reward::{collect, AnchorPolicy, OracleCritic, ReplayBuffer};
use crate::rng::StreamRng;
use crate::toy::{
    generate_corpus, train_stage, write_corpus, Dataset, GroundingMode, Stage, ToyModel, Utterance,
};
use crate::uapo::{uapo_train, write_trace};

/// Pipeline steps in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Step {
    Stage1,
    Stage2,
    Collect,
    Uapo,
    Eval,
}

impl Step {
    pub fn as_str(self) -> &'static str {
        match self {
            Step::Stage1 => "stage1",
            Step::Stage2 => "stage2",
            Step::Collect => "collect",
            Step::Uapo => "uapo",
            Step::Eval => "eval",
        }
    }
}

impl std::str::FromStr for Step {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Step::Stage1, Step::Stage2, Step::Collect, Step::Uapo, Step::Eval]
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::contract(format!("unknown pipeline step {s:?}")))
    }
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const ANCHOR_FILE: &str = "anchor.ckpt.json";
pub const BUFFER_FILE: &str = "buffer.jsonl";
pub const REPORT_FILE: &str = "report.jsonl";
pub const REPORT_CSV: &str = "report.csv";

pub fn checkpoint_file(stage: Stage) -> String {
    format!("{stage}.ckpt.json")
}

/// Shared per-seed inputs: corpus, split, and critic.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub seed: u64,
    pub corpus: Vec<Utterance>,
    pub data: Dataset,
    pub critic: OracleCritic,
}

impl SeedData {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let corpus = generate_corpus(&cfg.task, cfg.corpus_size, seed)?;
        let data = Dataset::from_corpus(&corpus, cfg.split_seed);
        let critic = OracleCritic::fit(&cfg.task, &data.train)?;
        Ok(SeedData {
            seed,
            corpus,
            data,
            critic,
        })
    }
}

pub fn init_model(
    cfg: &ExperimentConfig,
    seed: u64,
    strategy: FusionStrategy,
    grounding: GroundingMode,
) -> Result<ToyModel> {
    ToyModel::new(
        cfg.task.clone(),
        cfg.model.clone(),
        strategy,
        grounding,
        &StreamRng::new(seed, "init"),
    )
}

/// Runs one supervised stage from `rng` and returns the checkpoint of the result.
pub fn supervised_stage(
    cfg: &ExperimentConfig,
    model: &mut ToyModel,
    train: &[Utterance],
    stage: Stage,
    seed: u64,
    rng: &StreamRng,
) -> Result<Checkpoint> {
    let sched = match stage {
        Stage::Stage1 => &cfg.stage1,
        Stage::Stage2 => &cfg.stage2,
        Stage::Stage3 => {
            return Err(Error::contract(
                "supervised_stage: stage3 runs through the preference optimizer",
            ))
        }
    };
    let trace = train_stage(model, train, stage, sched.steps, &sched.optimizer, &cfg.prior, rng)?;
    let next = StreamRng::new(seed, next_stream(stage));
    let mut ck = Checkpoint::new(model, stage, seed, &cfg.hash(), &cfg.prior, &next);
    ck.loss_trace = summarize_trace(&trace.moving_average(100));
    Ok(ck)
}

fn next_stream(stage: Stage) -> &'static str {
    match stage {
        Stage::Stage1 => "stage2",
        Stage::Stage2 => "uapo",
        Stage::Stage3 => "done",
    }
}

/// Content-only, ungrounded Stage 1 model used as the anchor policy.
pub fn train_anchor(cfg: &ExperimentConfig, sd: &SeedData) -> Result<(AnchorPolicy, Checkpoint)> {
    let mut m = ToyModel::new(
        cfg.task.clone(),
        cfg.model.clone(),
        FusionStrategy::ContentOnly,
        GroundingMode::None,
        &StreamRng::new(sd.seed, "anchor-init"),
    )?;
    let rng = StreamRng::new(sd.seed, "anchor");
    let trace = train_stage(
        &mut m,
        &sd.data.train,
        Stage::Stage1,
        cfg.anchor.steps,
        &cfg.anchor.optimizer,
        &cfg.prior,
        &rng,
    )
    .map_err(|e| e.in_stage("anchor"))?;
    let mut ck = Checkpoint::new(&m, Stage::Stage1, sd.seed, &cfg.hash(), &cfg.prior, &rng);
    ck.loss_trace = summarize_trace(&trace.moving_average(100));
    Ok((AnchorPolicy::new(m)?, ck))
}

/// Loads the anchor from `dir` when present and built from the same config, else trains it.
pub fn anchor_for(cfg: &ExperimentConfig, sd: &SeedData, dir: &Path) -> Result<AnchorPolicy> {
    let path = dir.join(ANCHOR_FILE);
    if path.exists() {
        let ck = Checkpoint::load(&path)?;
        if ck.config_hash == cfg.hash() && ck.seed == sd.seed {
            return AnchorPolicy::new(ck.model()?);
        }
    }
    let (anchor, ck) = train_anchor(cfg, sd)?;
    ck.save(&path)?;
    Ok(anchor)
}

/// Self-reward collection over the training inputs.
pub fn collect_buffer(
    cfg: &ExperimentConfig,
    sd: &SeedData,
    policy: &Checkpoint,
    anchor: &AnchorPolicy,
) -> Result<ReplayBuffer> {
    let model = policy.model()?;
    collect(
        &sd.data.train,
        &model,
        anchor,
        &sd.critic,
        &cfg.collect,
        sd.seed,
        &policy.checkpoint_id,
    )
    .map_err(|e| e.in_stage("collect"))
}

/// Preference optimization of a Stage 2 checkpoint on a buffer.
pub fn uapo_stage(
    cfg: &ExperimentConfig,
    sd: &SeedData,
    policy: &Checkpoint,
    buffer: &ReplayBuffer,
    trace_path: Option<&Path>,
) -> Result<Checkpoint> {
    let mut model = policy.model()?;
    let trace = uapo_train(&mut model, buffer, &sd.data.train, &cfg.uapo, &policy.next_rng())?;
    if let Some(p) = trace_path {
        write_trace(p, &trace)?;
    }
    let mut ma = Vec::with_capacity(trace.len());
    let mut acc = 0.0;
    for (i, r) in trace.iter().enumerate() {
        acc += r.l_uapo;
        if i >= 100 {
            acc -= trace[i - 100].l_uapo;
        }
        ma.push(acc / (i + 1).min(100) as f64);
    }
    let next = StreamRng::new(sd.seed, next_stream(Stage::Stage3));
    let mut ck = Checkpoint::new(&model, Stage::Stage3, sd.seed, &cfg.hash(), &cfg.prior, &next);
    ck.loss_trace = summarize_trace(&ma);
    Ok(ck)
}

/// Evaluates a checkpoint on the held-out split and persists its rollouts under `dir`.
pub fn eval_checkpoint(
    cfg: &ExperimentConfig,
    sd: &SeedData,
    ck: &Checkpoint,
    dir: Option<&Path>,
) -> Result<MetricsRow> {
    let model = ck.model()?;
    let ctx = RowContext {
        seed: sd.seed,
        stage: ck.stage,
        checkpoint_id: ck.checkpoint_id.clone(),
        loss_trace: ck.loss_trace.clone(),
    };
    let (row, rollouts) = evaluate(&model, &sd.data.heldout, &sd.critic, cfg, ctx)
        .map_err(|e| e.in_stage("eval"))?;
    if let Some(d) = dir {
        write_jsonl(&d.join(format!("rollouts-{}.jsonl", ck.stage)), &rollouts)?;
    }
    Ok(row)
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    /// Checkpoint to continue from; the stages up to and including its stage are skipped.
    pub resume: Option<PathBuf>,
    /// Stop after this step, leaving its artifacts on disk.
    pub stop_after: Option<Step>,
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Copies earlier artifacts from the resume checkpoint's directory into `dir`.
fn adopt_artifacts(from: &Path, dir: &Path) -> Result<()> {
    if from == dir {
        return Ok(());
    }
    for entry in std::fs::read_dir(from).map_err(|e| Error::io(from, e))? {
        let entry = entry.map_err(|e| Error::io(from, e))?;
        let dst = dir.join(entry.file_name());
        if entry.path().is_file() && !dst.exists() {
            std::fs::copy(entry.path(), &dst).map_err(|e| Error::io(&dst, e))?;
        }
    }
    Ok(())
}

/// Stage 1 → Stage 2 → collect → UAPO → eval for one seed.
/// Returns the Stage 2 and Stage 3 rows, or nothing when stopped early.
fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    resume: Option<&Checkpoint>,
    stop_after: Option<Step>,
) -> Result<Vec<MetricsRow>> {
    let dir = cfg.seed_dir(seed);
    create_dir(&dir)?;
    let sd = SeedData::new(cfg, seed)?;
    write_corpus(&dir.join(CORPUS_FILE), &sd.corpus)?;
    let hash = cfg.hash();
    let stop = |s: Step| stop_after == Some(s);
    let done = resume.map(|c| c.stage);

    let stage1 = match done {
        Some(_) => None,
        None => {
            let mut m = init_model(cfg, seed, cfg.strategy, cfg.grounding)?;
            let ck = supervised_stage(
                cfg,
                &mut m,
                &sd.data.train,
                Stage::Stage1,
                seed,
                &StreamRng::new(seed, "stage1"),
            )?;
            ck.save(&dir.join(checkpoint_file(Stage::Stage1)))?;
            Some(ck)
        }
    };
    if stop(Step::Stage1) {
        return Ok(Vec::new());
    }

    let stage2 = match done {
        Some(Stage::Stage2) | Some(Stage::Stage3) => {
            Checkpoint::load(&dir.join(checkpoint_file(Stage::Stage2)))?
        }
        _ => {
            let from = stage1.as_ref().or(resume).expect("stage1 checkpoint");
            let mut m = from.model()?;
            let ck = supervised_stage(cfg, &mut m, &sd.data.train, Stage::Stage2, seed, &from.next_rng())?;
            ck.save(&dir.join(checkpoint_file(Stage::Stage2)))?;
            ck
        }
    };
    if stop(Step::Stage2) {
        return Ok(Vec::new());
    }

    let stage3 = if done == Some(Stage::Stage3) {
        resume.expect("resume checkpoint").clone()
    } else {
        let anchor = anchor_for(cfg, &sd, &dir)?;
        let buffer = collect_buffer(cfg, &sd, &stage2, &anchor)?;
        buffer.write_jsonl(&dir.join(BUFFER_FILE))?;
        if stop(Step::Collect) {
            return Ok(Vec::new());
        }
        let buffer = ReplayBuffer::read_jsonl(&dir.join(BUFFER_FILE))?;
        let ck = uapo_stage(cfg, &sd, &stage2, &buffer, Some(&dir.join("uapo.trace.jsonl")))?;
        ck.save(&dir.join(checkpoint_file(Stage::Stage3)))?;
        ck
    };
    if stop(Step::Uapo) {
        return Ok(Vec::new());
    }
    debug_assert_eq!(stage3.config_hash, hash);
    Ok(vec![
        eval_checkpoint(cfg, &sd, &stage2, Some(&dir))?,
        eval_checkpoint(cfg, &sd, &stage3, Some(&dir))?,
    ])
}

/// Full pipeline over every configured seed; writes the report files under `out_dir`.
pub fn run_pipeline(cfg: &ExperimentConfig, opts: &PipelineOptions) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    create_dir(&cfg.out_dir)?;
    cfg.save(&cfg.out_dir.join("config.toml"))?;
    let resume = match &opts.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.config_hash != cfg.hash() {
                return Err(Error::contract(format!(
                    "resume: checkpoint config hash {} does not match config {}",
                    ck.config_hash,
                    cfg.hash()
                )));
            }
            if !cfg.seeds.contains(&ck.seed) {
                return Err(Error::contract(format!(
                    "resume: checkpoint seed {} not in configured seeds",
                    ck.seed
                )));
            }
            let dir = cfg.seed_dir(ck.seed);
            create_dir(&dir)?;
            if let Some(from) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                adopt_artifacts(from, &dir)?;
            }
            Some(ck)
        }
        None => None,
    };
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let r = resume.as_ref().filter(|c| c.seed == seed);
        rows.extend(run_seed(cfg, seed, r, opts.stop_after)?);
    }
    if opts.stop_after.is_none() || opts.stop_after == Some(Step::Eval) {
        write_report(&cfg.out_dir, REPORT_FILE, REPORT_CSV, &rows)?;
    }
    Ok(rows)
}

pub fn write_report(dir: &Path, jsonl: &str, csv: &str, rows: &[MetricsRow]) -> Result<()> {
    write_jsonl(&dir.join(jsonl), rows)?;
    write_csv(&dir.join(csv), rows)
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub seed: u64,
    pub strategy: FusionStrategy,
    pub grounding: GroundingMode,
}

pub fn grid(seeds: &[u64], strategies: &[FusionStrategy], groundings: &[GroundingMode]) -> Vec<Cell> {
    let mut out = Vec::new();
    for &seed in seeds {
        for &strategy in strategies {
            for &grounding in groundings {
                out.push(Cell {
                    seed,
                    strategy,
                    grounding,
                });
            }
        }
    }
    out
}

/// Stage 1 + Stage 2 + eval for each cell, in parallel, rows in cell order.
pub fn ablate_cells(cfg: &ExperimentConfig, cells: &[Cell]) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let mut seeds: Vec<u64> = cells.iter().map(|c| c.seed).collect();
    seeds.dedup();
    let data: Vec<SeedData> = seeds
        .par_iter()
        .map(|&s| SeedData::new(cfg, s))
        .collect::<Result<_>>()?;
    cells
        .par_iter()
        .map(|c| {
            let sd = data.iter().find(|d| d.seed == c.seed).expect("seed data");
            let mut cell_cfg = cfg.clone();
            cell_cfg.strategy = c.strategy;
            cell_cfg.grounding = c.grounding;
            let mut m = init_model(&cell_cfg, c.seed, c.strategy, c.grounding)?;
            let s1 = supervised_stage(
                &cell_cfg,
                &mut m,
                &sd.data.train,
                Stage::Stage1,
                c.seed,
                &StreamRng::new(c.seed, "stage1"),
            )?;
            let s2 = supervised_stage(
                &cell_cfg,
                &mut m,
                &sd.data.train,
                Stage::Stage2,
                c.seed,
                &s1.next_rng(),
            )?;
            eval_checkpoint(&cell_cfg, sd, &s2, None)
        })
        .collect()
}

/// The full strategy × grounding grid over the configured seeds.
pub fn ablate(cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    let cells = grid(&cfg.seeds, &FusionStrategy::ALL, &GroundingMode::ALL);
    let rows = ablate_cells(cfg, &cells)?;
    create_dir(&cfg.out_dir)?;
    write_report(&cfg.out_dir, "ablation.jsonl", "ablation.csv", &rows)?;
    Ok(rows)
}

/// Caps the global worker pool at `ILAB_THREADS` when it is set. Returns the pool size.
pub fn configure_threads() -> Result<usize> {
    if let Ok(v) = std::env::var("ILAB_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::contract(format!("ILAB_THREADS must be a positive integer, got {v:?}")))?;
        // A pool built earlier in the process wins; that is not an error here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calls;
    use crate::harness::metrics::{read_jsonl, replay_metrics, EvalRollouts};

    fn tiny(out: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.out_dir = out.to_path_buf();
        c.corpus_size = 80;
        c.stage1.steps = 30;
        c.stage2.steps = 20;
        c.anchor.steps = 30;
        c.collect.k = 4;
        c.uapo.steps = 6;
        c.uapo.batch_size = 2;
        c.eval.reward_rollouts = 2;
        c.eval.probes = false;
        c
    }

    fn read(p: PathBuf) -> Vec<u8> {
        std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
    }

    #[test]
    fn step_names_parse() {
        for s in [Step::Stage1, Step::Stage2, Step::Collect, Step::Uapo, Step::Eval] {
            assert_eq!(s.as_str().parse::<Step>().unwrap(), s);
        }
        assert!("stage4".parse::<Step>().is_err());
    }

    #[test]
    fn evaluating_stage1_runs_no_later_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let sd = SeedData::new(&cfg, 0).unwrap();
        let mut m = init_model(&cfg, 0, cfg.strategy, cfg.grounding).unwrap();
        let ck = supervised_stage(&cfg, &mut m, &sd.data.train, Stage::Stage1, 0, &StreamRng::new(0, "stage1"))
            .unwrap();
        calls::reset();
        eval_checkpoint(&cfg, &sd, &ck, None).unwrap();
        let seen = calls::snapshot();
        assert_eq!(seen.get(calls::EVAL), Some(&1));
        for path in [calls::STAGE1, calls::STAGE2, calls::COLLECT, calls::UAPO] {
            assert_eq!(calls::count(path), 0, "{path} ran during eval");
        }
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let full = tiny(a.path());
        let rows = run_pipeline(&full, &PipelineOptions::default()).unwrap();
        assert_eq!(rows.len(), 2);

        let part = tiny(b.path());
        let stopped = PipelineOptions {
            resume: None,
            stop_after: Some(Step::Stage2),
        };
        assert!(run_pipeline(&part, &stopped).unwrap().is_empty());
        assert!(!b.path().join(REPORT_FILE).exists());
        let s2 = part.seed_dir(0).join(checkpoint_file(Stage::Stage2));
        calls::reset();
        let resumed = PipelineOptions {
            resume: Some(s2),
            stop_after: None,
        };
        let rows_b = run_pipeline(&part, &resumed).unwrap();
        // The one Stage 1 run left is the anchor policy's.
        assert_eq!(calls::count(calls::STAGE1), 1);
        assert_eq!(calls::count(calls::STAGE2), 0);
        assert_eq!(rows_b, rows);
        assert_eq!(read(a.path().join(REPORT_FILE)), read(b.path().join(REPORT_FILE)));
        let s3 = checkpoint_file(Stage::Stage3);
        assert_eq!(
            read(full.seed_dir(0).join(&s3)),
            read(part.seed_dir(0).join(&s3))
        );
    }

    #[test]
    fn resume_rejects_a_foreign_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let stop = PipelineOptions {
            resume: None,
            stop_after: Some(Step::Stage1),
        };
        run_pipeline(&cfg, &stop).unwrap();
        let mut other = cfg.clone();
        other.stage2.steps += 1;
        let opts = PipelineOptions {
            resume: Some(cfg.seed_dir(0).join(checkpoint_file(Stage::Stage1))),
            stop_after: None,
        };
        assert_eq!(run_pipeline(&other, &opts).unwrap_err().kind(), "contract");
    }

    #[test]
    fn reports_are_bitwise_reproducible_and_replayable() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ca = tiny(a.path());
        let rows = run_pipeline(&ca, &PipelineOptions::default()).unwrap();
        run_pipeline(&tiny(b.path()), &PipelineOptions::default()).unwrap();
        for f in [REPORT_FILE, REPORT_CSV] {
            assert_eq!(read(a.path().join(f)), read(b.path().join(f)), "{f}");
        }

        let sd = SeedData::new(&ca, 0).unwrap();
        for row in &rows {
            let recs: Vec<EvalRollouts> =
                read_jsonl(&ca.seed_dir(0).join(format!("rollouts-{}.jsonl", row.stage))).unwrap();
            let r = replay_metrics(&recs, &sd.data.heldout, &sd.critic, ca.task.n_styles, ca.collect.tau)
                .unwrap();
            assert_eq!(r.ter, row.ter);
            assert_eq!(r.style_agreement, row.style_agreement);
            assert_eq!(r.mean_reward, row.mean_reward);
            assert_eq!(r.sampled_reward, row.sampled_reward);
        }
    }

    #[test]
    fn ablation_fills_the_grid() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.stage1.steps = 5;
        cfg.stage2.steps = 5;
        cfg.seeds = vec![0, 1];
        let rows = ablate(&cfg).unwrap();
        assert_eq!(rows.len(), 24);
        let cells = grid(&cfg.seeds, &FusionStrategy::ALL, &GroundingMode::ALL);
        for (r, c) in rows.iter().zip(&cells) {
            assert_eq!((r.seed, r.strategy, r.grounding), (c.seed, c.strategy, c.grounding));
            assert_eq!(r.stage, Stage::Stage2);
        }
        assert!(dir.path().join("ablation.csv").exists());
    }

    #[test]
    fn thread_setting_is_validated() {
        // Only this test touches the variable.
        std::env::set_var("ILAB_THREADS", "zero");
        assert_eq!(configure_threads().unwrap_err().kind(), "contract");
        std::env::set_var("ILAB_THREADS", "1");
        assert!(configure_threads().unwrap() >= 1);
        std::env::remove_var("ILAB_THREADS");
    }
}
