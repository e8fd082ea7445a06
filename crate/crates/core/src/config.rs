//! Run configuration: JSON file, command-line overrides, validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterLayout, AdapterMode, Routing};
use crate::error::{PmoeError, Result};
use crate::tasks::{vocab, CorpusMix, NUM_TASKS};
use crate::trainer::TrainHyper;
use crate::transformer::{BaseConfig, PretrainHyper};

pub const SEED_ENV: &str = "PMOE_SEED";

/// Adapter learning rate of the desk-scale run. At 3e-4 a rank-4 adapter
/// on the 8-layer base barely moves within the epoch budget.
pub const DESK_ADAPTER_LR: f64 = 4e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,

    pub tau: usize,
    pub rank: usize,
    pub routing: Routing,

    pub mode: AdapterMode,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs_per_task: usize,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub replay_frac: f64,
    pub aux_loss_weight: f64,
    pub train_all_experts: bool,

    pub num_tasks: usize,
    pub train_per_task: usize,
    pub test_per_task: usize,

    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_size: usize,
    pub corpus_size: usize,
    pub corpus_task_rate: f64,
    pub probe_size: usize,

    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let base = BaseConfig::default();
        let train = TrainHyper::default();
        let pre = PretrainHyper::default();
        let mix = CorpusMix::default();
        Self {
            num_layers: base.num_layers,
            d_model: base.d_model,
            num_heads: base.num_heads,
            mlp_hidden: base.mlp_hidden,
            vocab_size: base.vocab_size,
            max_seq_len: base.max_seq_len,
            tau: 6,
            rank: 4,
            routing: Routing::PerToken,
            mode: train.mode,
            lr: DESK_ADAPTER_LR,
            batch_size: train.batch_size,
            epochs_per_task: train.epochs_per_task,
            weight_decay: train.weight_decay,
            betas: train.betas,
            replay_frac: train.replay_frac,
            aux_loss_weight: train.aux_loss_weight,
            train_all_experts: train.train_all_experts,
            num_tasks: 4,
            train_per_task: 1000,
            test_per_task: 200,
            pretrain_steps: pre.steps,
            pretrain_lr: pre.lr,
            pretrain_batch_size: pre.batch_size,
            corpus_size: 20000,
            corpus_task_rate: mix.task_rate,
            probe_size: mix.probe_size,
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

/// Values given on the command line; `None` keeps the file value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigOverrides {
    pub tau: Option<usize>,
    pub rank: Option<usize>,
    pub mode: Option<AdapterMode>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs_per_task: Option<usize>,
    pub replay_frac: Option<f64>,
    pub aux_loss_weight: Option<f64>,
    pub num_tasks: Option<usize>,
    pub train_per_task: Option<usize>,
    pub test_per_task: Option<usize>,
    pub pretrain_steps: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

fn invalid(field: &str, reason: impl Into<String>) -> PmoeError {
    PmoeError::Validation { field: field.into(), reason: reason.into() }
}

impl RunConfig {
    /// Parses JSON text; absent keys take their defaults, unknown keys
    /// are rejected. Does not validate.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| invalid("<file>", e.to_string()))
    }

    /// Resolves file, flags and the seed fallback (flag, then file, then
    /// `env_seed`, then 0) into a validated config.
    pub fn resolve(file_text: Option<&str>, overrides: &ConfigOverrides, env_seed: Option<&str>) -> Result<Self> {
        let mut cfg = match file_text {
            Some(text) => Self::from_json(text)?,
            None => Self::default(),
        };
        let file_has_seed = match file_text {
            Some(text) => serde_json::from_str::<serde_json::Value>(text)?.get("seed").is_some(),
            None => false,
        };
        if !file_has_seed {
            if let Some(s) = env_seed {
                cfg.seed = s
                    .trim()
                    .parse()
                    .map_err(|_| invalid("seed", format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?;
            }
        }
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &ConfigOverrides) -> Result<Self> {
        let text = path
            .map(|p| std::fs::read_to_string(p).map_err(|e| PmoeError::io(p, e)))
            .transpose()?;
        let env = std::env::var(SEED_ENV).ok();
        Self::resolve(text.as_deref(), overrides, env.as_deref())
    }

    pub fn apply(&mut self, o: &ConfigOverrides) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = &o.$f { self.$f = v.clone(); } )* };
        }
        set!(
            tau, rank, mode, lr, batch_size, epochs_per_task, replay_frac, aux_loss_weight, num_tasks,
            train_per_task, test_per_task, pretrain_steps, output_dir, seed
        );
    }

    pub fn validate(&self) -> Result<()> {
        self.base_config().validate()?;
        if self.vocab_size < vocab::SIZE {
            return Err(invalid("vocab_size", format!("the task vocabulary needs at least {}", vocab::SIZE)));
        }
        if self.tau == 0 || self.tau >= self.num_layers {
            return Err(invalid("tau", format!("need 0 < tau < num_layers ({}), got {}", self.num_layers, self.tau)));
        }
        if self.rank == 0 || 4 * self.rank > self.d_model {
            return Err(invalid("rank", format!("need 1 <= rank <= d_model/4 ({}), got {}", self.d_model / 4, self.rank)));
        }
        if self.num_tasks == 0 || self.num_tasks > NUM_TASKS {
            return Err(invalid("num_tasks", format!("must lie in 1..={NUM_TASKS}")));
        }
        if self.train_per_task == 0 || self.test_per_task == 0 {
            return Err(invalid("train_per_task", "train and test sizes must be positive"));
        }
        if self.pretrain_steps == 0 || self.pretrain_batch_size == 0 || self.corpus_size == 0 {
            return Err(invalid("pretrain_steps", "pretraining needs steps, a batch size and a corpus"));
        }
        if !(self.pretrain_lr.is_finite() && self.pretrain_lr > 0.0) {
            return Err(invalid("pretrain_lr", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.corpus_task_rate) {
            return Err(invalid("corpus_task_rate", "must lie in [0, 1]"));
        }
        if self.probe_size == 0 {
            return Err(invalid("probe_size", "must be positive"));
        }
        self.train_hyper().validate()
    }

    pub fn base_config(&self) -> BaseConfig {
        BaseConfig {
            num_layers: self.num_layers,
            d_model: self.d_model,
            num_heads: self.num_heads,
            vocab_size: self.vocab_size,
            max_seq_len: self.max_seq_len,
            mlp_hidden: self.mlp_hidden,
        }
    }

    pub fn layout(&self) -> AdapterLayout {
        AdapterLayout {
            routing: self.routing,
            ..AdapterLayout::new(self.mode, self.tau, self.rank, self.num_layers, self.d_model)
        }
    }

    pub fn train_hyper(&self) -> TrainHyper {
        TrainHyper {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs_per_task: self.epochs_per_task,
            weight_decay: self.weight_decay,
            betas: self.betas,
            replay_frac: self.replay_frac,
            aux_loss_weight: self.aux_loss_weight,
            mode: self.mode,
            seed: self.seed,
            train_all_experts: self.train_all_experts,
        }
    }

    pub fn pretrain_hyper(&self) -> PretrainHyper {
        PretrainHyper {
            lr: self.pretrain_lr,
            batch_size: self.pretrain_batch_size,
            steps: self.pretrain_steps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn corpus_mix(&self) -> CorpusMix {
        CorpusMix { task_rate: self.corpus_task_rate, probe_size: self.probe_size }
    }
}
