//! Continual-learning scores and router diagnostics.

use serde::{Deserialize, Serialize};

use crate::adapters::{adapted_forward_batch, AdapterMode, PmoeAdapterSet};
use crate::autodiff::Tensor;
use crate::error::{PmoeError, Result};
use crate::tasks::Example;
use crate::transformer::{argmax, BaseModel, PackedBatch};

/// Lower-triangular score table. Row `t` (1-based) holds the scores on
/// tasks `1..=t` measured right after training task `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub task_names: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn new(task_names: Vec<String>) -> Self {
        Self { task_names, rows: Vec::new() }
    }

    pub fn from_rows(task_names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(task_names);
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Appends the row for the next stage; it must have one more entry
    /// than the previous row.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len() + 1;
        if row.len() != t {
            return Err(PmoeError::Contract(format!("stage {t} needs {t} scores, got {}", row.len())));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(PmoeError::Contract(format!("score {v} outside [0, 100]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.rows.len()
    }

    /// `R[t][i]`, both 1-based.
    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        if i == 0 || i > t {
            return None;
        }
        self.rows.get(t.checked_sub(1)?)?.get(i - 1).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// `(t, i, score)` triples in row order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(t, row)| row.iter().enumerate().map(move |(i, &s)| (t + 1, i + 1, s)))
    }
}

fn require_stage(r: &ScoreMatrix, t: usize) -> Result<()> {
    if t == 0 || t > r.stages() {
        return Err(PmoeError::Contract(format!("stage {t} not recorded ({} stages)", r.stages())));
    }
    Ok(())
}

/// Mean of `R[t][1..=t]`.
pub fn compute_op(r: &ScoreMatrix, t: usize) -> Result<f64> {
    require_stage(r, t)?;
    Ok(r.rows[t - 1].iter().sum::<f64>() / t as f64)
}

/// `(1/t) Σ_{i=1..t} (R[t][i] − R[i][i])`; the `i = t` term is zero, so
/// `t = 1` gives 0.
pub fn compute_bwt(r: &ScoreMatrix, t: usize) -> Result<f64> {
    require_stage(r, t)?;
    let sum: f64 = (1..=t).map(|i| r.rows[t - 1][i - 1] - r.rows[i - 1][i - 1]).sum();
    Ok(sum / t as f64)
}

/// Mean of `after_i − before_i`.
pub fn compute_general_delta(after: &[f64], before: &[f64]) -> Result<f64> {
    if after.len() != before.len() {
        return Err(PmoeError::Contract(format!(
            "{} scores after vs {} before",
            after.len(),
            before.len()
        )));
    }
    if after.is_empty() {
        return Err(PmoeError::Contract("no general benchmarks".into()));
    }
    Ok(after.iter().zip(before).map(|(a, b)| a - b).sum::<f64>() / after.len() as f64)
}

/// `P[i][k]`: mean gate probability of expert `k` over the tokens of
/// task `i`'s evaluation sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl AllocationMatrix {
    /// Every row's maximum sits on the diagonal.
    pub fn is_diagonally_dominant(&self) -> bool {
        self.rows.iter().enumerate().all(|(i, row)| i < row.len() && argmax(row) == i)
    }
}

/// Gate rows for packed sequences, chunked to bound memory.
fn gates_for(base: &BaseModel, adapters: &PmoeAdapterSet, seqs: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    if adapters.layout.mode != AdapterMode::Pmoe {
        return Err(PmoeError::Contract("router diagnostics need a pmoe-mode adapter set".into()));
    }
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(64) {
        let batch = PackedBatch::new(chunk, &base.config)?;
        let (_, gate) = adapted_forward_batch(&batch, base, adapters)?;
        let gate = gate.expect("pmoe mode computes a gate");
        let t = gate.cols();
        for seg in &batch.segments {
            let rows = gate.data()[seg.start * t..(seg.start + seg.len) * t].to_vec();
            out.push(Tensor::new(vec![seg.len, t], rows)?);
        }
    }
    Ok(out)
}

fn column_means<'a>(gates: impl Iterator<Item = &'a Tensor>, t: usize) -> Vec<f64> {
    let mut sum = vec![0.0; t];
    let mut n = 0usize;
    for g in gates {
        for r in 0..g.rows() {
            sum.iter_mut().zip(g.row(r)).for_each(|(s, v)| *s += v);
            n += 1;
        }
    }
    sum.iter().map(|s| s / n.max(1) as f64).collect()
}

/// One row per task; all tokens of every sequence (prompt, target, EOS).
pub fn allocation_matrix(base: &BaseModel, adapters: &PmoeAdapterSet, test_sets: &[Vec<Example>]) -> Result<AllocationMatrix> {
    let t = adapters.num_experts();
    let rows = test_sets
        .iter()
        .map(|set| {
            let seqs: Vec<Vec<usize>> = set.iter().map(Example::sequence).collect();
            let gates = gates_for(base, adapters, &seqs)?;
            Ok(column_means(gates.iter(), t))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AllocationMatrix { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub rows: Vec<f64>,
    pub mean: f64,
}

/// Shannon entropy in nats of each row, with `0·ln 0 = 0`.
pub fn usage_entropy(p: &AllocationMatrix) -> EntropyReport {
    let rows: Vec<f64> = p
        .rows
        .iter()
        .map(|row| row.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum())
        .collect();
    let mean = if rows.is_empty() { 0.0 } else { rows.iter().sum::<f64>() / rows.len() as f64 };
    EntropyReport { rows, mean }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub token: usize,
    pub expert: usize,
    pub max_prob: f64,
    pub gate: Vec<f64>,
}

pub fn token_allocation_dump(base: &BaseModel, adapters: &PmoeAdapterSet, tokens: &[usize]) -> Result<Vec<TokenRecord>> {
    let gate = gates_for(base, adapters, &[tokens.to_vec()])?.remove(0);
    Ok(tokens
        .iter()
        .enumerate()
        .map(|(i, &token)| {
            let row = gate.row(i);
            let expert = argmax(row);
            TokenRecord { token, expert, max_prob: row[expert], gate: row.to_vec() }
        })
        .collect())
}

/// Percentage of sequences whose mean gate row peaks on their own task's
/// expert; `test_sets[i]` belongs to expert `i`.
pub fn router_task_accuracy(base: &BaseModel, adapters: &PmoeAdapterSet, test_sets: &[Vec<Example>]) -> Result<f64> {
    let t = adapters.num_experts();
    let mut hits = 0usize;
    let mut total = 0usize;
    for (i, set) in test_sets.iter().enumerate() {
        let seqs: Vec<Vec<usize>> = set.iter().map(Example::sequence).collect();
        for gate in gates_for(base, adapters, &seqs)? {
            hits += usize::from(argmax(&column_means(std::iter::once(&gate), t)) == i);
            total += 1;
        }
    }
    if total == 0 {
        return Err(PmoeError::Input("no sequences to route".into()));
    }
    Ok(100.0 * hits as f64 / total as f64)
}
