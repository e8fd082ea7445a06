//! LoRA experts, the boundary router, and the asymmetric adapted forward
//! pass.
//!
//! Layers `0..tau` carry one shared low-rank adapter per adapted
//! projection. The residual stream leaving layer `tau - 1` feeds a linear
//! router whose softmax `G` mixes the experts of every deeper layer:
//!
//! ```text
//! shallow:  y = W0·x + B·A·x
//! deep:     y = W0·x + Σ_k G_k · B_k·A_k·x
//! ```
//!
//! `G` is computed once per forward pass and reused unchanged by all deep
//! layers. Experts are appended one per task; B and new router columns
//! start at zero so a fresh expert leaves the output unchanged.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Segment, Tensor};
use crate::error::{PmoeError, Result};
use crate::transformer::{forward_graph, BaseModel, LayerAdapter, LogitsModel, PackedBatch, Projection};

pub const EXPERT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdapterMode {
    #[serde(rename = "pmoe")]
    Pmoe,
    /// One LoRA per adapted projection in every layer, no router.
    #[serde(rename = "lora-seq")]
    LoraSeq,
}

impl std::str::FromStr for AdapterMode {
    type Err = PmoeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pmoe" => Ok(Self::Pmoe),
            "lora-seq" => Ok(Self::LoraSeq),
            other => Err(PmoeError::Validation {
                field: "mode".into(),
                reason: format!("expected `pmoe` or `lora-seq`, got `{other}`"),
            }),
        }
    }
}

impl std::fmt::Display for AdapterMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Pmoe => "pmoe",
            Self::LoraSeq => "lora-seq",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Routing {
    /// Each position is routed from its own layer-tau state.
    PerToken,
    /// Each sequence is routed from its mean-pooled layer-tau state.
    PerSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraExpert {
    /// `r x k`
    pub a: Tensor,
    /// `d x r`
    pub b: Tensor,
    pub projection: Projection,
    pub layer: usize,
}

impl LoraExpert {
    pub fn new(a: Tensor, b: Tensor, projection: Projection, layer: usize) -> Result<Self> {
        let (r, k) = a.require_matrix("LoRA A")?;
        let (d, r2) = b.require_matrix("LoRA B")?;
        if r != r2 {
            return Err(PmoeError::Dimension(format!(
                "LoRA A {:?} and B {:?} disagree on rank",
                a.shape(),
                b.shape()
            )));
        }
        check_rank(r, d, k)?;
        Ok(Self { a, b, projection, layer })
    }

    /// A ~ N(0, 0.02²), B = 0.
    pub fn init<R: Rng + ?Sized>(
        d: usize,
        k: usize,
        rank: usize,
        projection: Projection,
        layer: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_rank(rank, d, k)?;
        let dist = Normal::new(0.0, EXPERT_INIT_STD).expect("positive std");
        let a = Tensor::from_fn(&[rank, k], |_| dist.sample(rng));
        Ok(Self { a, b: Tensor::zeros(&[d, rank]), projection, layer })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    /// The dense update `B·A` (`d x k`).
    pub fn delta_weight(&self) -> Result<Tensor> {
        self.b.matmul(&self.a)
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

fn check_rank(r: usize, d: usize, k: usize) -> Result<()> {
    if r == 0 || 4 * r > d.min(k) {
        return Err(PmoeError::Validation {
            field: "rank".into(),
            reason: format!("rank {r} must satisfy 1 <= r <= min(d, k)/4 for d={d}, k={k}"),
        });
    }
    Ok(())
}

/// `(B·A)·x` for each row of `x`, evaluated as `B·(A·x)`.
pub fn lora_delta(x: &Tensor, expert: &LoraExpert) -> Result<Tensor> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone())?;
    let a = g.constant(expert.a.clone())?;
    let b = g.constant(expert.b.clone())?;
    let out = lora_node(&mut g, xn, a, b)?;
    Ok(g.value(out).clone())
}

fn lora_node(g: &mut Graph, x: NodeId, a: NodeId, b: NodeId) -> Result<NodeId> {
    let xa = g.matmul_t(x, a)?;
    g.matmul_t(xa, b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterState {
    /// `d_model x T`
    pub w_g: Tensor,
}

impl RouterState {
    pub fn zeros(d_model: usize, num_experts: usize) -> Self {
        Self { w_g: Tensor::zeros(&[d_model, num_experts]) }
    }

    pub fn num_experts(&self) -> usize {
        self.w_g.cols()
    }
}

/// `softmax(h · W_g)` row by row.
pub fn route_tokens(h_tau: &Tensor, router: &RouterState) -> Result<Tensor> {
    let (_, d) = h_tau.require_matrix("router input")?;
    let (rd, _) = router.w_g.require_matrix("router weights")?;
    if rd != d {
        return Err(PmoeError::Contract(format!(
            "router expects {rd}-wide states, got {d}"
        )));
    }
    h_tau.matmul(&router.w_g)?.softmax(1)
}

/// One deep-layer projection: `W0·h_i + Σ_k G[i,k]·(B_k A_k)·h_i`.
pub fn deep_mixture_forward(h: &Tensor, w0: &Tensor, experts: &[LoraExpert], gate: &Tensor) -> Result<Tensor> {
    let (gn, gt) = gate.require_matrix("gate")?;
    if experts.len() != gt {
        return Err(PmoeError::Contract(format!(
            "{} experts but gate has {gt} columns",
            experts.len()
        )));
    }
    if gn != h.rows() {
        return Err(PmoeError::Dimension(format!("gate has {gn} rows for {} tokens", h.rows())));
    }
    let mut g = Graph::new();
    let x = g.constant(h.clone())?;
    let w = g.constant(w0.clone())?;
    let gn = g.constant(gate.clone())?;
    let ab = experts
        .iter()
        .map(|e| Ok((g.constant(e.a.clone())?, g.constant(e.b.clone())?)))
        .collect::<Result<Vec<_>>>()?;
    let base_out = g.matmul_t(x, w)?;
    let out = mix_experts(&mut g, x, base_out, &ab, gn)?;
    Ok(g.value(out).clone())
}

fn mix_experts(g: &mut Graph, x: NodeId, base_out: NodeId, experts: &[(NodeId, NodeId)], gate: NodeId) -> Result<NodeId> {
    let mut mix: Option<NodeId> = None;
    for (k, &(a, b)) in experts.iter().enumerate() {
        let delta = lora_node(g, x, a, b)?;
        let weighted = g.scale_rows_by_column(delta, gate, k)?;
        mix = Some(match mix {
            None => weighted,
            Some(m) => g.add(m, weighted)?,
        });
    }
    match mix {
        Some(m) => g.add(base_out, m),
        None => Ok(base_out),
    }
}

/// Mean over tokens of `-ln G[i, k]`.
pub fn routing_aux_loss(gate: &Tensor, k: usize) -> Result<f64> {
    let (n, t) = gate.require_matrix("gate")?;
    if k >= t {
        return Err(PmoeError::Index(format!("expert {k} out of range for {t} experts")));
    }
    if n == 0 {
        return Err(PmoeError::Contract("routing loss over zero tokens".into()));
    }
    Ok((0..n).map(|i| -gate.at(i, k).ln()).sum::<f64>() / n as f64)
}

/// Static shape of an adapter set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterLayout {
    pub mode: AdapterMode,
    pub tau: usize,
    pub rank: usize,
    pub num_layers: usize,
    pub d_model: usize,
    pub projections: Vec<Projection>,
    pub routing: Routing,
}

impl AdapterLayout {
    pub fn new(mode: AdapterMode, tau: usize, rank: usize, num_layers: usize, d_model: usize) -> Self {
        Self {
            mode,
            tau,
            rank,
            num_layers,
            d_model,
            projections: vec![Projection::Query, Projection::Value],
            routing: Routing::PerToken,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == AdapterMode::Pmoe && (self.tau == 0 || self.tau >= self.num_layers) {
            return Err(PmoeError::Validation {
                field: "tau".into(),
                reason: format!("need 0 < tau < num_layers ({}), got {}", self.num_layers, self.tau),
            });
        }
        if self.projections.is_empty() {
            return Err(PmoeError::Validation { field: "projections".into(), reason: "empty".into() });
        }
        check_rank(self.rank, self.d_model, self.d_model)
    }

    /// Layers that hold a single shared adapter.
    pub fn shallow_layers(&self) -> usize {
        match self.mode {
            AdapterMode::Pmoe => self.tau,
            AdapterMode::LoraSeq => self.num_layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmoeAdapterSet {
    pub layout: AdapterLayout,
    /// `[layer][projection]` for layers `0..shallow_layers`.
    pub shallow: Vec<Vec<LoraExpert>>,
    /// `[layer - tau][expert][projection]`.
    pub deep: Vec<Vec<Vec<LoraExpert>>>,
    pub router: Option<RouterState>,
    pub frozen_experts: BTreeSet<usize>,
}

impl PmoeAdapterSet {
    /// Fresh set with one expert per deep layer (pmoe mode) and a zero router.
    pub fn new<R: Rng + ?Sized>(layout: AdapterLayout, rng: &mut R) -> Result<Self> {
        layout.validate()?;
        let d = layout.d_model;
        let shallow = (0..layout.shallow_layers())
            .map(|l| {
                layout
                    .projections
                    .iter()
                    .map(|&p| LoraExpert::init(d, d, layout.rank, p, l, rng))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut set = Self { shallow, deep: Vec::new(), router: None, frozen_experts: BTreeSet::new(), layout };
        if set.layout.mode == AdapterMode::Pmoe {
            set.deep = vec![Vec::new(); set.layout.num_layers - set.layout.tau];
            set.router = Some(RouterState::zeros(d, 0));
            set.add_expert(rng)?;
        }
        Ok(set)
    }

    pub fn num_experts(&self) -> usize {
        self.router.as_ref().map_or(1, RouterState::num_experts)
    }

    /// Appends one expert to every deep layer and one zero router column.
    /// Existing tensors are untouched.
    pub fn add_expert<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        if self.layout.mode != AdapterMode::Pmoe {
            return Err(PmoeError::Contract("experts can only be added in pmoe mode".into()));
        }
        let d = self.layout.d_model;
        let tau = self.layout.tau;
        for (i, layer) in self.deep.iter_mut().enumerate() {
            let expert = self
                .layout
                .projections
                .iter()
                .map(|&p| LoraExpert::init(d, d, self.layout.rank, p, tau + i, rng))
                .collect::<Result<Vec<_>>>()?;
            layer.push(expert);
        }
        let router = self.router.as_mut().expect("pmoe sets own a router");
        router.w_g = if router.w_g.cols() == 0 {
            Tensor::zeros(&[d, 1])
        } else {
            router.w_g.append_column(&vec![0.0; d])?
        };
        Ok(())
    }

    /// Freezes every expert except `active` (the trainable-set policy).
    pub fn freeze_all_but(&mut self, active: usize) {
        self.frozen_experts = (0..self.num_experts()).filter(|&k| k != active).collect();
    }

    /// Every adapter tensor under a stable name, in a fixed order, with its
    /// expert index (None for shallow adapters and the router).
    pub fn named_tensors(&self) -> Vec<(String, Option<usize>, &Tensor)> {
        let mut out = Vec::new();
        for (l, projs) in self.shallow.iter().enumerate() {
            for e in projs {
                let p = e.projection.name();
                out.push((format!("shallow.{l}.{p}.A"), None, &e.a));
                out.push((format!("shallow.{l}.{p}.B"), None, &e.b));
            }
        }
        for (i, experts) in self.deep.iter().enumerate() {
            let l = self.layout.tau + i;
            for (k, projs) in experts.iter().enumerate() {
                for e in projs {
                    let p = e.projection.name();
                    out.push((format!("deep.{l}.expert{k}.{p}.A"), Some(k), &e.a));
                    out.push((format!("deep.{l}.expert{k}.{p}.B"), Some(k), &e.b));
                }
            }
        }
        if let Some(r) = &self.router {
            out.push(("router.w_g".to_string(), None, &r.w_g));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, Option<usize>, &mut Tensor)> {
        let tau = self.layout.tau;
        let mut out = Vec::new();
        for (l, projs) in self.shallow.iter_mut().enumerate() {
            for e in projs {
                let p = e.projection.name();
                out.push((format!("shallow.{l}.{p}.A"), None, &mut e.a));
                out.push((format!("shallow.{l}.{p}.B"), None, &mut e.b));
            }
        }
        for (i, experts) in self.deep.iter_mut().enumerate() {
            let l = tau + i;
            for (k, projs) in experts.iter_mut().enumerate() {
                for e in projs {
                    let p = e.projection.name();
                    out.push((format!("deep.{l}.expert{k}.{p}.A"), Some(k), &mut e.a));
                    out.push((format!("deep.{l}.expert{k}.{p}.B"), Some(k), &mut e.b));
                }
            }
        }
        if let Some(r) = &mut self.router {
            out.push(("router.w_g".to_string(), None, &mut r.w_g));
        }
        out
    }

    /// Total adapter parameters (all experts, router included).
    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    /// Whether a tensor with this expert tag gets a gradient slot when the
    /// set is registered for training.
    pub fn is_trainable(&self, expert: Option<usize>) -> bool {
        expert.is_none_or(|k| !self.frozen_experts.contains(&k))
    }

    pub(crate) fn register(&self, g: &mut Graph, trainable: bool) -> Result<AdapterNodes> {
        let mut ordered = Vec::new();
        for (_, expert, t) in self.named_tensors() {
            ordered.push(g.leaf(t.clone(), trainable && self.is_trainable(expert))?);
        }
        let mut it = ordered.iter().copied();
        let mut take_pair = || (it.next().expect("a"), it.next().expect("b"));
        let shallow = self
            .shallow
            .iter()
            .map(|projs| projs.iter().map(|_| take_pair()).collect())
            .collect();
        let deep = self
            .deep
            .iter()
            .map(|experts| experts.iter().map(|projs| projs.iter().map(|_| take_pair()).collect()).collect())
            .collect();
        let router = self.router.as_ref().map(|_| *ordered.last().expect("router node"));
        Ok(AdapterNodes { shallow, deep, router, ordered })
    }
}

pub(crate) struct AdapterNodes {
    pub shallow: Vec<Vec<(NodeId, NodeId)>>,
    pub deep: Vec<Vec<Vec<(NodeId, NodeId)>>>,
    pub router: Option<NodeId>,
    /// Same order as [`PmoeAdapterSet::named_tensors`].
    pub ordered: Vec<NodeId>,
}

/// Forward hook applying an adapter set.
pub(crate) struct PmoeHook<'a> {
    layout: &'a AdapterLayout,
    nodes: &'a AdapterNodes,
    pub gate: Option<NodeId>,
    /// Gate node consumed by each deep projection, in call order.
    pub gate_uses: Vec<NodeId>,
}

impl<'a> PmoeHook<'a> {
    pub fn new(set: &'a PmoeAdapterSet, nodes: &'a AdapterNodes) -> Self {
        Self { layout: &set.layout, nodes, gate: None, gate_uses: Vec::new() }
    }
}

impl LayerAdapter for PmoeHook<'_> {
    fn adapt(&mut self, g: &mut Graph, layer: usize, proj: Projection, x: NodeId, base_out: NodeId) -> Result<NodeId> {
        let Some(pi) = self.layout.projections.iter().position(|&p| p == proj) else {
            return Ok(base_out);
        };
        let shallow = self.layout.shallow_layers();
        if layer < shallow {
            let (a, b) = self.nodes.shallow[layer][pi];
            let delta = lora_node(g, x, a, b)?;
            return g.add(base_out, delta);
        }
        let gate = self
            .gate
            .ok_or_else(|| PmoeError::Contract("deep layer reached before the router ran".into()))?;
        self.gate_uses.push(gate);
        let experts: Vec<(NodeId, NodeId)> = self.nodes.deep[layer - shallow].iter().map(|projs| projs[pi]).collect();
        mix_experts(g, x, base_out, &experts, gate)
    }

    fn after_block(&mut self, g: &mut Graph, layer: usize, h: NodeId, segments: &[Segment]) -> Result<()> {
        if self.layout.mode != AdapterMode::Pmoe || layer + 1 != self.layout.tau {
            return Ok(());
        }
        let w_g = self.nodes.router.expect("pmoe sets own a router");
        let input = match self.layout.routing {
            Routing::PerToken => h,
            Routing::PerSequence => g.segment_mean(h, segments)?,
        };
        let logits = g.matmul(input, w_g)?;
        self.gate = Some(g.softmax(logits, 1)?);
        Ok(())
    }
}

/// Logits and (pmoe mode) gate for a packed batch, with constant weights.
pub fn adapted_forward_batch(
    batch: &PackedBatch,
    base: &BaseModel,
    adapters: &PmoeAdapterSet,
) -> Result<(Tensor, Option<Tensor>)> {
    check_compatible(base, adapters)?;
    let mut g = Graph::new();
    let base_nodes = base.register(&mut g)?;
    let nodes = adapters.register(&mut g, false)?;
    let mut hook = PmoeHook::new(adapters, &nodes);
    let logits = forward_graph(&mut g, &base_nodes, &base.config, batch, &mut hook)?;
    let gate = hook.gate.map(|id| g.value(id).clone());
    Ok((g.value(logits).clone(), gate))
}

pub(crate) fn check_compatible(base: &BaseModel, adapters: &PmoeAdapterSet) -> Result<()> {
    let l = &adapters.layout;
    if l.num_layers != base.config.num_layers || l.d_model != base.config.d_model {
        return Err(PmoeError::Contract(format!(
            "adapters built for {} layers x {} wide, base has {} x {}",
            l.num_layers, l.d_model, base.config.num_layers, base.config.d_model
        )));
    }
    Ok(())
}

/// Logits `n x V` and gate `n x T` for one sequence.
pub fn pmoe_forward(tokens: &[usize], base: &BaseModel, adapters: &PmoeAdapterSet) -> Result<(Tensor, Tensor)> {
    if adapters.layout.mode != AdapterMode::Pmoe {
        return Err(PmoeError::Contract("pmoe_forward needs a pmoe-mode adapter set".into()));
    }
    let batch = PackedBatch::new(&[tokens], &base.config)?;
    let (logits, gate) = adapted_forward_batch(&batch, base, adapters)?;
    Ok((logits, gate.expect("pmoe mode computes a gate")))
}

/// A base model with an adapter set attached.
pub struct AdaptedModel<'a> {
    pub base: &'a BaseModel,
    pub adapters: &'a PmoeAdapterSet,
}

impl LogitsModel for AdaptedModel<'_> {
    fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        let batch = PackedBatch::new(&[tokens], &self.base.config)?;
        Ok(adapted_forward_batch(&batch, self.base, self.adapters)?.0)
    }

    fn max_seq_len(&self) -> usize {
        self.base.config.max_seq_len
    }
}

/// Shape inputs of the adapter parameter formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterShape {
    pub num_layers: usize,
    pub d_model: usize,
    pub rank: usize,
    pub tau: usize,
    pub num_experts: usize,
    pub projections: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub count: usize,
    /// `count / base parameter total`.
    pub fraction: f64,
}

/// pmoe: `tau·P·r·(d+k) + (N−tau)·T·P·r·(d+k) + d_model·T`;
/// lora-seq: `N·P·r·(d+k)`; with square projections `d = k = d_model`.
pub fn trainable_param_count(shape: &AdapterShape, mode: AdapterMode, base_params: usize) -> ParamCount {
    let per = shape.projections * shape.rank * (2 * shape.d_model);
    let count = match mode {
        AdapterMode::Pmoe => {
            shape.tau * per + (shape.num_layers - shape.tau) * shape.num_experts * per + shape.d_model * shape.num_experts
        }
        AdapterMode::LoraSeq => shape.num_layers * per,
    };
    ParamCount { count, fraction: count as f64 / base_params as f64 }
}

impl PmoeAdapterSet {
    pub fn shape(&self) -> AdapterShape {
        AdapterShape {
            num_layers: self.layout.num_layers,
            d_model: self.layout.d_model,
            rank: self.layout.rank,
            tau: self.layout.tau,
            num_experts: self.num_experts(),
            projections: self.layout.projections.len(),
        }
    }
}
