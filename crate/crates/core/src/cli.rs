//! `pmoe` command-line interface. All file outputs are produced here.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::adapters::{trainable_param_count, AdapterMode, AdapterShape, ParamCount, PmoeAdapterSet};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{ConfigOverrides, RunConfig};
use crate::error::{PmoeError, Result};
use crate::metrics::{
    allocation_matrix, compute_bwt, compute_general_delta, compute_op, router_task_accuracy, token_allocation_dump,
    usage_entropy, AllocationMatrix, EntropyReport, TokenRecord,
};
use crate::tasks::{generate_general_corpus, generate_stream, probe_name, Example, GeneralCorpus};
use crate::trainer::{dataset_accuracy, general_scores, run_stream_observed, RunArtifacts};
use crate::transformer::{pretrain_base, BaseModel, BaseConfig};

#[derive(Debug, Parser)]
#[command(name = "pmoe", version, about = "Progressive mixture of LoRA experts for continual learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain the base model on the general corpus.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
        /// Output checkpoint (default: <output_dir>/base.ckpt).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train adapters over the task stream and write a run directory.
    Continual {
        #[command(flatten)]
        common: CommonArgs,
        /// Base checkpoint; pretrained from scratch when omitted.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Score a checkpoint on the task or general suites.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapters: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Suite::Tasks)]
        suite: Suite,
    },
    /// Router allocation matrix, entropies and per-token dumps.
    RouterReport {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapters: PathBuf,
        /// Report file (default: <output_dir>/router_report.json).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Test sequences per task to dump token by token.
        #[arg(long, default_value_t = 2)]
        dump_per_task: usize,
    },
    /// Repeat `continual` over several tau values.
    TauSweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        taus: Vec<usize>,
    },
    /// Adapter parameter counts for both modes.
    ParamCount {
        #[command(flatten)]
        common: CommonArgs,
        /// Expert count (default: num_tasks).
        #[arg(long)]
        experts: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    Tasks,
    General,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<AdapterMode>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    replay_frac: Option<f64>,
    #[arg(long)]
    aux_weight: Option<f64>,
    #[arg(long)]
    num_tasks: Option<usize>,
    #[arg(long)]
    train_per_task: Option<usize>,
    #[arg(long)]
    test_per_task: Option<usize>,
    #[arg(long)]
    pretrain_steps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Suppress progress messages.
    #[arg(long, short)]
    quiet: bool,
}

fn parse_mode(s: &str) -> std::result::Result<AdapterMode, String> {
    s.parse().map_err(|e: PmoeError| e.to_string())
}

impl CommonArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let o = ConfigOverrides {
            tau: self.tau,
            rank: self.rank,
            mode: self.mode,
            lr: self.lr,
            batch_size: self.batch_size,
            epochs_per_task: self.epochs,
            replay_frac: self.replay_frac,
            aux_loss_weight: self.aux_weight,
            num_tasks: self.num_tasks,
            train_per_task: self.train_per_task,
            test_per_task: self.test_per_task,
            pretrain_steps: self.pretrain_steps,
            output_dir: self.output_dir.clone(),
            seed: self.seed,
        };
        RunConfig::load(self.config.as_deref(), &o)
    }

    fn progress(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

/// Runs the CLI; returns the process exit code (2 usage, 1 failure).
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain { common, out } => {
            let cfg = common.resolve()?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("base.ckpt"));
            pretrain_to(&cfg, &out, &common)?;
            common.progress(format!("wrote {}", out.display()));
            Ok(())
        }
        Command::Continual { common, base } => {
            let cfg = common.resolve()?;
            let (base, corpus_seed) = obtain_base(&cfg, base.as_deref(), &common)?;
            let summary = continual(&cfg, &base, corpus_seed, &cfg.output_dir, &common)?;
            println!("{}", serde_json::to_string_pretty(&summary.final_stage())?);
            Ok(())
        }
        Command::Eval { common, base, adapters, suite } => {
            let cfg = common.resolve()?;
            let ckpt = load_checkpoint(&base)?;
            let corpus_seed = ckpt.meta.seed;
            let model = ckpt.to_base()?;
            let set = adapters.map(|p| load_checkpoint(&p)?.to_adapters()).transpose()?;
            let report = match suite {
                Suite::Tasks => {
                    let tasks = generate_stream(cfg.num_tasks, cfg.train_per_task, cfg.test_per_task, cfg.seed)?;
                    tasks
                        .iter()
                        .map(|t| Ok(NamedScore { name: t.spec.name.clone(), score: dataset_accuracy(&model, set.as_ref(), &t.test)? }))
                        .collect::<Result<Vec<_>>>()?
                }
                Suite::General => {
                    let corpus = general_corpus(&cfg, corpus_seed)?;
                    let scores = general_scores(&model, set.as_ref(), &corpus.probes)?;
                    scores
                        .into_iter()
                        .enumerate()
                        .map(|(i, score)| NamedScore { name: probe_name(i).to_string(), score })
                        .collect()
                }
            };
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::RouterReport { common, base, adapters, out, dump_per_task } => {
            let cfg = common.resolve()?;
            let model = load_checkpoint(&base)?.to_base()?;
            let set = load_checkpoint(&adapters)?.to_adapters()?;
            let tasks = generate_stream(set.num_experts(), cfg.train_per_task, cfg.test_per_task, cfg.seed)?;
            let tests: Vec<Vec<Example>> = tasks.into_iter().map(|t| t.test).collect();
            let report = router_report(&model, &set, &tests, dump_per_task)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("router_report.json"));
            write_json(&out, &report)?;
            common.progress(format!("wrote {}", out.display()));
            Ok(())
        }
        Command::TauSweep { common, base, taus } => {
            let cfg = common.resolve()?;
            let (model, corpus_seed) = obtain_base(&cfg, base.as_deref(), &common)?;
            let mut csv = String::from("tau,op,bwt,general_delta,adapted_params,param_fraction,adapted_layer_proxy,router_entropy\n");
            for &tau in &taus {
                let run_cfg = RunConfig { tau, ..cfg.clone() };
                run_cfg.validate()?;
                let dir = cfg.output_dir.join(format!("tau_{tau}"));
                common.progress(format!("tau = {tau}"));
                let s = continual(&run_cfg, &model, corpus_seed, &dir, &common)?;
                let f = s.final_stage();
                // deep layers run T experts each, shallow layers one adapter
                let proxy = tau + (cfg.num_layers - tau) * s.num_experts;
                writeln!(
                    csv,
                    "{tau},{},{},{},{},{},{proxy},{}",
                    f.op,
                    f.bwt,
                    f.general_delta,
                    s.adapted_params.count,
                    s.adapted_params.fraction,
                    s.router_entropy.map_or(String::new(), |e| e.to_string())
                )
                .expect("string write");
            }
            write_text(&cfg.output_dir.join("sweep.csv"), &csv)?;
            Ok(())
        }
        Command::ParamCount { common, experts } => {
            let cfg = common.resolve()?;
            let shape = AdapterShape {
                num_layers: cfg.num_layers,
                d_model: cfg.d_model,
                rank: cfg.rank,
                tau: cfg.tau,
                num_experts: experts.unwrap_or(cfg.num_tasks),
                projections: cfg.layout().projections.len(),
            };
            let base_params = cfg.base_config().param_count();
            let report = ParamReport {
                shape,
                base_params,
                pmoe: trainable_param_count(&shape, AdapterMode::Pmoe, base_params),
                lora_seq: trainable_param_count(&shape, AdapterMode::LoraSeq, base_params),
            };
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

#[derive(Debug, Serialize)]
struct NamedScore {
    name: String,
    score: f64,
}

#[derive(Debug, Serialize)]
struct ParamReport {
    shape: AdapterShape,
    base_params: usize,
    pmoe: ParamCount,
    lora_seq: ParamCount,
}

fn general_corpus(cfg: &RunConfig, corpus_seed: u64) -> Result<GeneralCorpus> {
    generate_general_corpus(cfg.corpus_size, cfg.corpus_mix(), corpus_seed)
}

fn pretrain_to(cfg: &RunConfig, out: &Path, common: &CommonArgs) -> Result<BaseModel> {
    common.progress(format!("pretraining base model ({} steps)", cfg.pretrain_steps));
    let corpus = general_corpus(cfg, cfg.seed)?;
    let (model, log) = pretrain_base(&corpus.sequences, cfg.base_config(), &cfg.pretrain_hyper(), cfg.seed)?;
    let mut csv = String::from("step,loss,lr\n");
    for l in &log {
        writeln!(csv, "{},{},{}", l.step, l.loss, l.lr).expect("string write");
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
        write_text(&dir.join("pretrain_log.csv"), &csv)?;
    }
    save_checkpoint(out, &Checkpoint::from_base(&model, cfg.seed, Some(cfg.clone())))?;
    Ok(model)
}

/// Loads `--base` or pretrains into the output directory. Returns the
/// model and the seed of the corpus it was pretrained on.
fn obtain_base(cfg: &RunConfig, path: Option<&Path>, common: &CommonArgs) -> Result<(BaseModel, u64)> {
    match path {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            let model = ckpt.to_base()?;
            if model.config != cfg.base_config() {
                return Err(PmoeError::Consistency(format!(
                    "base checkpoint architecture {:?} differs from the configured {:?}",
                    model.config,
                    cfg.base_config()
                )));
            }
            Ok((model, ckpt.meta.seed))
        }
        None => Ok((pretrain_to(cfg, &cfg.output_dir.join("base.ckpt"), common)?, cfg.seed)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageSummary {
    pub t: usize,
    pub op: f64,
    pub bwt: f64,
    pub general_delta: f64,
    pub general_scores: Vec<f64>,
    pub buffer_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub mode: AdapterMode,
    pub tau: usize,
    pub seed: u64,
    pub task_names: Vec<String>,
    pub general_before: Vec<f64>,
    pub stages: Vec<StageSummary>,
    pub num_experts: usize,
    pub adapted_params: ParamCount,
    pub router_entropy: Option<f64>,
    pub router_accuracy: Option<f64>,
}

impl RunSummary {
    pub fn final_stage(&self) -> &StageSummary {
        self.stages.last().expect("at least one stage")
    }
}

pub fn summarize(cfg: &RunConfig, base: &BaseModel, art: &RunArtifacts, tests: &[Vec<Example>]) -> Result<RunSummary> {
    let stages = (1..=art.scores.stages())
        .map(|t| {
            Ok(StageSummary {
                t,
                op: compute_op(&art.scores, t)?,
                bwt: compute_bwt(&art.scores, t)?,
                general_delta: compute_general_delta(&art.general_after[t - 1], &art.general_before)?,
                general_scores: art.general_after[t - 1].clone(),
                buffer_size: art.buffer_sizes[t - 1],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let adapters = art.final_adapters();
    let (router_entropy, router_accuracy) = if adapters.layout.mode == AdapterMode::Pmoe {
        let p = allocation_matrix(base, adapters, tests)?;
        (Some(usage_entropy(&p).mean), Some(router_task_accuracy(base, adapters, tests)?))
    } else {
        (None, None)
    };
    Ok(RunSummary {
        mode: cfg.mode,
        tau: cfg.tau,
        seed: cfg.seed,
        task_names: art.scores.task_names.clone(),
        general_before: art.general_before.clone(),
        stages,
        num_experts: adapters.num_experts(),
        adapted_params: trainable_param_count(&adapters.shape(), cfg.mode, base.param_count()),
        router_entropy,
        router_accuracy,
    })
}

/// Full continual run writing every artifact into `dir`.
pub fn continual(cfg: &RunConfig, base: &BaseModel, corpus_seed: u64, dir: &Path, progress: &impl Progress) -> Result<RunSummary> {
    create_dir(dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    let tasks = generate_stream(cfg.num_tasks, cfg.train_per_task, cfg.test_per_task, cfg.seed)?;
    let corpus = general_corpus(cfg, corpus_seed)?;
    let art = run_stream_observed(base, &tasks, &corpus.probes, &cfg.layout(), &cfg.train_hyper(), &mut |r| {
        progress.note(&format!("task {}: scores {:?}, final loss {:.4}", r.t, r.scores, r.final_loss));
    })?;
    let tests: Vec<Vec<Example>> = tasks.into_iter().map(|t| t.test).collect();
    write_run(cfg, base.config, &art, dir)?;
    let summary = summarize(cfg, base, &art, &tests)?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Progress sink used by long-running commands.
pub trait Progress {
    fn note(&self, msg: &str);
}

impl Progress for CommonArgs {
    fn note(&self, msg: &str) {
        self.progress(msg);
    }
}

/// Discards progress messages.
pub struct Silent;

impl Progress for Silent {
    fn note(&self, _: &str) {}
}

fn write_run(cfg: &RunConfig, base_config: BaseConfig, art: &RunArtifacts, dir: &Path) -> Result<()> {
    for (i, stage) in art.stages.iter().enumerate() {
        let ckpt = Checkpoint::from_adapters(stage, base_config, i + 1, cfg.seed, Some(cfg.clone()));
        save_checkpoint(&dir.join(format!("stage_{}.ckpt", i + 1)), &ckpt)?;
    }
    let mut metrics = String::from("t,i,score\n");
    for (t, i, s) in art.scores.entries() {
        writeln!(metrics, "{t},{i},{s}").expect("string write");
    }
    write_text(&dir.join("metrics.csv"), &metrics)?;
    let mut log = String::from("step,task,loss,aux_loss,lr\n");
    for l in &art.logs {
        writeln!(log, "{},{},{},{},{}", l.step, l.task, l.loss, l.aux_loss, l.lr).expect("string write");
    }
    write_text(&dir.join("train_log.csv"), &log)
}

#[derive(Debug, Clone, Serialize)]
pub struct RouterReport {
    pub allocation: AllocationMatrix,
    pub entropy: EntropyReport,
    pub task_accuracy: f64,
    pub diagonally_dominant: bool,
    pub token_dumps: Vec<TokenDump>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TokenDump {
    pub task: usize,
    pub records: Vec<TokenRecord>,
}

pub fn router_report(base: &BaseModel, adapters: &PmoeAdapterSet, tests: &[Vec<Example>], dump_per_task: usize) -> Result<RouterReport> {
    let allocation = allocation_matrix(base, adapters, tests)?;
    let mut token_dumps = Vec::new();
    for (task, set) in tests.iter().enumerate() {
        for ex in set.iter().take(dump_per_task) {
            token_dumps.push(TokenDump { task, records: token_allocation_dump(base, adapters, &ex.sequence())? });
        }
    }
    Ok(RouterReport {
        entropy: usage_entropy(&allocation),
        task_accuracy: router_task_accuracy(base, adapters, tests)?,
        diagonally_dominant: allocation.is_diagonally_dominant(),
        allocation,
        token_dumps,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PmoeError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| PmoeError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(cli_main(["pmoe", "frobnicate"]), 2);
        assert_eq!(cli_main(["pmoe", "param-count", "--no-such-flag"]), 2);
        assert_eq!(cli_main(["pmoe", "tau-sweep"]), 2);
        assert_eq!(cli_main(["pmoe", "--help"]), 0);
    }

    #[test]
    fn runtime_errors_exit_1() {
        assert_eq!(cli_main(["pmoe", "param-count", "--tau", "9", "-q"]), 1);
        assert_eq!(cli_main(["pmoe", "eval", "--base", "/nonexistent/base.ckpt", "-q"]), 1);
    }

    #[test]
    fn param_count_succeeds() {
        assert_eq!(cli_main(["pmoe", "param-count", "--rank", "4", "--tau", "6"]), 0);
    }
}
