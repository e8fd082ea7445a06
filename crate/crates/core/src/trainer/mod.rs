//! Sequential task training: per-task AdamW with a restarted cosine
//! schedule, replay of stored history, and the expert freezing policy.

pub mod eval;
pub mod optim;
pub mod replay;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{check_compatible, AdapterLayout, AdapterMode, AdapterNodes, PmoeAdapterSet, PmoeHook};
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{PmoeError, Result};
use crate::metrics::ScoreMatrix;
use crate::seed::derive_seed;
use crate::tasks::{Example, TaskData};
use crate::transformer::{forward_graph, shuffle, BaseModel, PackedBatch};

pub use eval::{dataset_accuracy, greedy_correct, score_examples, teacher_forced_correct};
pub use optim::{adamw_step, cosine_lr, AdamWConfig, OptimState};
pub use replay::{build_replay_batch, replay_quota, ReplayBuffer, ReplayEntry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs_per_task: usize,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub replay_frac: f64,
    pub aux_loss_weight: f64,
    pub mode: AdapterMode,
    pub seed: u64,
    /// Keep every expert trainable instead of only the current task's.
    pub train_all_experts: bool,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 32,
            epochs_per_task: 10,
            weight_decay: 0.0,
            betas: [0.9, 0.999],
            replay_frac: 0.01,
            aux_loss_weight: 0.0,
            mode: AdapterMode::Pmoe,
            seed: 0,
            train_all_experts: false,
        }
    }
}

fn invalid(field: &str, reason: impl Into<String>) -> PmoeError {
    PmoeError::Validation { field: field.into(), reason: reason.into() }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(invalid("lr", format!("must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        if self.epochs_per_task == 0 {
            return Err(invalid("epochs_per_task", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.replay_frac) {
            return Err(invalid("replay_frac", format!("must lie in [0, 1], got {}", self.replay_frac)));
        }
        if !(self.aux_loss_weight.is_finite() && self.aux_loss_weight >= 0.0) {
            return Err(invalid("aux_loss_weight", "must be a non-negative number"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(invalid("weight_decay", "must be a non-negative number"));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(invalid("betas", "each must lie in [0, 1)"));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.betas[0], beta2: self.betas[1], weight_decay: self.weight_decay, ..Default::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// Step within the task; the schedule restarts at 0 for every task.
    pub step: usize,
    /// 1-based task position in the stream.
    pub task: usize,
    /// Masked cross-entropy on the target span.
    pub loss: f64,
    /// Routing loss of the batch (logged even when its weight is 0).
    pub aux_loss: f64,
    pub lr: f64,
}

/// Trains `adapters` on task `t` (1-based) mixed with the whole replay
/// buffer, then admits `ceil(replay_frac·|train|)` of its examples.
pub fn train_task(
    base: &BaseModel,
    adapters: &mut PmoeAdapterSet,
    train: &[Example],
    buffer: &mut ReplayBuffer,
    hyper: &TrainHyper,
    t: usize,
) -> Result<Vec<StepLog>> {
    hyper.validate()?;
    if train.is_empty() {
        return Err(PmoeError::Input(format!("task {t} has no training examples")));
    }
    if t == 0 {
        return Err(PmoeError::Contract("tasks are numbered from 1".into()));
    }
    if !base.frozen {
        return Err(PmoeError::Contract("adapter training needs a frozen base model".into()));
    }
    if adapters.layout.mode != hyper.mode {
        return Err(PmoeError::Contract(format!(
            "adapter set is {} but training mode is {}",
            adapters.layout.mode, hyper.mode
        )));
    }
    let expert = t - 1;
    let pmoe = hyper.mode == AdapterMode::Pmoe;
    if pmoe {
        if adapters.num_experts() != t {
            return Err(PmoeError::Contract(format!(
                "task {t} needs {t} experts, adapter set has {}",
                adapters.num_experts()
            )));
        }
        if hyper.train_all_experts {
            adapters.frozen_experts.clear();
        } else {
            adapters.freeze_all_but(expert);
        }
    }

    // (example, expert it should route to)
    let replayed = build_replay_batch(buffer, 1.0, derive_seed(hyper.seed, 51, t as u64));
    let mut pool: Vec<(&Example, usize)> = train.iter().map(|e| (e, expert)).collect();
    pool.extend(replayed.iter().map(|r| (&r.example, r.source)));

    let steps_per_epoch = pool.len().div_ceil(hyper.batch_size);
    let total = steps_per_epoch * hyper.epochs_per_task;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(hyper.seed, 53, t as u64));
    let opt = hyper.adamw();
    let mut state = OptimState::new();
    let mut log = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut step = 0;
    for _ in 0..hyper.epochs_per_task {
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            let lr = cosine_lr(step, total, hyper.lr);
            let items: Vec<(&Example, usize)> = chunk.iter().map(|&i| pool[i]).collect();
            let entry = adapter_step(base, adapters, &items, hyper, &opt, &mut state, lr)
                .map_err(|e| match e {
                    PmoeError::NonFinite(_) => PmoeError::Diverged { task: t, step, loss: f64::NAN },
                    e => e,
                })?;
            if !entry.0.is_finite() {
                return Err(PmoeError::Diverged { task: t, step, loss: entry.0 });
            }
            log.push(StepLog { step, task: t, loss: entry.0, aux_loss: entry.1, lr });
            step += 1;
        }
    }
    buffer.admit(train, expert, hyper.replay_frac, hyper.seed);
    Ok(log)
}

/// Training graph for one batch: the objective, its target-loss and
/// routing-loss values, and the adapter leaf nodes.
struct StepGraph {
    g: Graph,
    nodes: AdapterNodes,
    loss: NodeId,
    ce: f64,
    aux: f64,
}

fn build_step(base: &BaseModel, adapters: &PmoeAdapterSet, items: &[(&Example, usize)], hyper: &TrainHyper) -> Result<StepGraph> {
    let seqs: Vec<Vec<usize>> = items.iter().map(|(e, _)| e.sequence()).collect();
    let targets: Vec<Option<usize>> = items.iter().flat_map(|(e, _)| e.target_mask()).collect();
    let batch = PackedBatch::new(&seqs, &base.config)?;
    let mut g = Graph::new();
    let base_nodes = base.register(&mut g)?;
    let nodes = adapters.register(&mut g, true)?;
    let (logits, gate) = {
        let mut hook = PmoeHook::new(adapters, &nodes);
        let logits = forward_graph(&mut g, &base_nodes, &base.config, &batch, &mut hook)?;
        (logits, hook.gate)
    };
    let ce_node = g.cross_entropy(logits, &targets)?;
    let ce = g.value(ce_node).data()[0];
    let mut loss = ce_node;
    let mut aux = 0.0;
    if let Some(gate) = gate {
        let cols: Vec<Option<usize>> = items
            .iter()
            .zip(&seqs)
            .flat_map(|((_, k), s)| std::iter::repeat_n(Some(*k), s.len()))
            .collect();
        let aux_node = g.nll_of_probs(gate, &cols)?;
        aux = g.value(aux_node).data()[0];
        if hyper.aux_loss_weight > 0.0 {
            let weighted = g.scale(aux_node, hyper.aux_loss_weight)?;
            loss = g.add(ce_node, weighted)?;
        }
    }
    Ok(StepGraph { g, nodes, loss, ce, aux })
}

/// One optimizer step; returns (target loss, routing loss).
fn adapter_step(
    base: &BaseModel,
    adapters: &mut PmoeAdapterSet,
    items: &[(&Example, usize)],
    hyper: &TrainHyper,
    opt: &AdamWConfig,
    state: &mut OptimState,
    lr: f64,
) -> Result<(f64, f64)> {
    let StepGraph { mut g, nodes, loss, ce, aux } = build_step(base, adapters, items, hyper)?;
    if !ce.is_finite() {
        return Ok((ce, aux));
    }
    g.backward(loss)?;
    for ((name, _, tensor), &id) in adapters.named_tensors_mut().into_iter().zip(&nodes.ordered) {
        if let Some(grad) = g.grad(id) {
            adamw_step(&name, tensor, grad, state, opt, lr)?;
        }
    }
    Ok((ce, aux))
}

/// Gradients of the training objective for every adapter tensor that
/// receives one (frozen experts do not). Items pair an example with the
/// expert its routing loss targets.
pub fn adapter_gradients(
    base: &BaseModel,
    adapters: &PmoeAdapterSet,
    items: &[(&Example, usize)],
    hyper: &TrainHyper,
) -> Result<Vec<(String, Tensor)>> {
    check_compatible(base, adapters)?;
    let StepGraph { mut g, nodes, loss, .. } = build_step(base, adapters, items, hyper)?;
    g.backward(loss)?;
    adapters
        .named_tensors()
        .into_iter()
        .zip(&nodes.ordered)
        .filter_map(|((name, _, t), &id)| g.grad(id).map(|grad| Tensor::new(t.shape().to_vec(), grad.to_vec()).map(|t| (name, t))))
        .collect::<Result<Vec<_>>>()
}

/// Everything a continual run produces.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub scores: ScoreMatrix,
    /// General-suite scores of the bare base model.
    pub general_before: Vec<f64>,
    /// General-suite scores after each stage.
    pub general_after: Vec<Vec<f64>>,
    /// Adapter set right after training each task.
    pub stages: Vec<PmoeAdapterSet>,
    pub logs: Vec<StepLog>,
    /// Buffer size after each stage.
    pub buffer_sizes: Vec<usize>,
}

impl RunArtifacts {
    pub fn final_adapters(&self) -> &PmoeAdapterSet {
        self.stages.last().expect("a run has at least one stage")
    }
}

/// Progress notification after each finished stage.
#[derive(Debug, Clone, Copy)]
pub struct StageReport<'a> {
    pub t: usize,
    pub scores: &'a [f64],
    pub general: &'a [f64],
    pub final_loss: f64,
}

pub fn run_stream(
    base: &BaseModel,
    tasks: &[TaskData],
    general: &[Vec<Example>],
    layout: &AdapterLayout,
    hyper: &TrainHyper,
) -> Result<RunArtifacts> {
    run_stream_observed(base, tasks, general, layout, hyper, &mut |_| {})
}

/// [`run_stream`] with a callback after every stage.
pub fn run_stream_observed(
    base: &BaseModel,
    tasks: &[TaskData],
    general: &[Vec<Example>],
    layout: &AdapterLayout,
    hyper: &TrainHyper,
    observer: &mut dyn FnMut(StageReport<'_>),
) -> Result<RunArtifacts> {
    hyper.validate()?;
    if tasks.is_empty() {
        return Err(PmoeError::Input("empty task stream".into()));
    }
    if layout.mode != hyper.mode {
        return Err(PmoeError::Contract(format!("layout is {} but training mode is {}", layout.mode, hyper.mode)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(hyper.seed, 57, 0));
    let mut adapters = PmoeAdapterSet::new(layout.clone(), &mut rng)?;
    crate::adapters::check_compatible(base, &adapters)?;
    let mut buffer = ReplayBuffer::new();
    let general_before = general_scores(base, None, general)?;
    let mut scores = ScoreMatrix::new(tasks.iter().map(|t| t.spec.name.clone()).collect());
    let mut art = RunArtifacts {
        scores: ScoreMatrix::new(Vec::new()),
        general_before,
        general_after: Vec::new(),
        stages: Vec::new(),
        logs: Vec::new(),
        buffer_sizes: Vec::new(),
    };
    for (i, task) in tasks.iter().enumerate() {
        let t = i + 1;
        if hyper.mode == AdapterMode::Pmoe && t >= 2 {
            adapters.add_expert(&mut rng)?;
        }
        let log = train_task(base, &mut adapters, &task.train, &mut buffer, hyper, t)?;
        let row = tasks[..t]
            .iter()
            .map(|d| dataset_accuracy(base, Some(&adapters), &d.test))
            .collect::<Result<Vec<_>>>()?;
        let gen = general_scores(base, Some(&adapters), general)?;
        observer(StageReport { t, scores: &row, general: &gen, final_loss: log.last().map_or(f64::NAN, |l| l.loss) });
        scores.push_row(row)?;
        art.general_after.push(gen);
        art.logs.extend(log);
        art.buffer_sizes.push(buffer.len());
        art.stages.push(adapters.clone());
    }
    art.scores = scores;
    Ok(art)
}

pub fn general_scores(base: &BaseModel, adapters: Option<&PmoeAdapterSet>, probes: &[Vec<Example>]) -> Result<Vec<f64>> {
    probes.iter().map(|p| dataset_accuracy(base, adapters, p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hyper_validation() {
        assert!(TrainHyper::default().validate().is_ok());
        let bad = [
            TrainHyper { lr: 0.0, ..Default::default() },
            TrainHyper { replay_frac: 1.5, ..Default::default() },
            TrainHyper { batch_size: 0, ..Default::default() },
            TrainHyper { betas: [0.9, 1.0], ..Default::default() },
        ];
        for h in bad {
            assert!(matches!(h.validate(), Err(PmoeError::Validation { .. })));
        }
    }
}
