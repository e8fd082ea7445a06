//! Exact-match scoring.
//!
//! Greedy decoding reproduces `target, EOS` exactly iff the argmax at
//! every target position of the teacher-forced sequence is the gold next
//! token: each greedy step sees the same prefix as teacher forcing for as
//! long as all earlier predictions were right. So scoring needs one
//! forward pass per example instead of one per generated token.

use crate::adapters::{adapted_forward_batch, PmoeAdapterSet};
use crate::autodiff::{Graph, Tensor};
use crate::error::Result;
use crate::tasks::{vocab, Example};
use crate::transformer::{argmax, forward_graph, greedy_decode, BaseModel, LogitsModel, NoAdapter, PackedBatch};

const EVAL_CHUNK: usize = 64;

/// Greedy decode with room for the target plus EOS; correct iff the
/// generated tokens are exactly `target, EOS`.
pub fn greedy_correct<M: LogitsModel + ?Sized>(model: &M, ex: &Example) -> Result<bool> {
    let out = greedy_decode(&ex.prompt, model, ex.target.len() + 1)?;
    let generated = &out[ex.prompt.len()..];
    Ok(generated.len() == ex.target.len() + 1
        && generated[..ex.target.len()] == ex.target[..]
        && generated[ex.target.len()] == vocab::EOS)
}

/// Single forward pass over `prompt, target`; correct iff every target
/// position's argmax is the gold next token.
pub fn teacher_forced_correct<M: LogitsModel + ?Sized>(model: &M, ex: &Example) -> Result<bool> {
    let seq = ex.sequence();
    let logits = model.logits(&seq[..seq.len() - 1])?;
    Ok(positions_match(&logits, 0, &ex.target_mask()))
}

fn positions_match(logits: &Tensor, offset: usize, mask: &[Option<usize>]) -> bool {
    mask.iter()
        .enumerate()
        .all(|(i, m)| m.is_none_or(|gold| argmax(logits.row(offset + i)) == gold))
}

fn batch_logits(base: &BaseModel, adapters: Option<&PmoeAdapterSet>, batch: &PackedBatch) -> Result<Tensor> {
    match adapters {
        Some(a) => Ok(adapted_forward_batch(batch, base, a)?.0),
        None => {
            let mut g = Graph::new();
            let nodes = base.register(&mut g)?;
            let logits = forward_graph(&mut g, &nodes, &base.config, batch, &mut NoAdapter)?;
            Ok(g.value(logits).clone())
        }
    }
}

/// Teacher-forced correctness of every example, evaluated in packed
/// batches. `adapters = None` scores the bare base model.
pub fn score_examples(base: &BaseModel, adapters: Option<&PmoeAdapterSet>, examples: &[Example]) -> Result<Vec<bool>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_CHUNK) {
        let inputs: Vec<Vec<usize>> = chunk
            .iter()
            .map(|ex| {
                let mut s = ex.sequence();
                s.pop();
                s
            })
            .collect();
        let batch = PackedBatch::new(&inputs, &base.config)?;
        let logits = batch_logits(base, adapters, &batch)?;
        for (ex, seg) in chunk.iter().zip(&batch.segments) {
            out.push(positions_match(&logits, seg.start, &ex.target_mask()));
        }
    }
    Ok(out)
}

/// Exact-match score in percent.
pub fn dataset_accuracy(base: &BaseModel, adapters: Option<&PmoeAdapterSet>, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let hits = score_examples(base, adapters, examples)?.iter().filter(|&&c| c).count();
    Ok(100.0 * hits as f64 / examples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::PmoeError;

    /// Deterministic toy: next token is a hash of the prefix, EOS when the
    /// hash is divisible by 3.
    struct Hashy;

    fn next_of(prefix: &[usize]) -> usize {
        let h = prefix.iter().fold(1469598103934665603u64, |h, &t| (h ^ t as u64).wrapping_mul(1099511628211));
        if (h >> 7) % 3 == 0 {
            vocab::EOS
        } else {
            17 + ((h >> 11) % 10) as usize
        }
    }

    impl LogitsModel for Hashy {
        fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
            if tokens.len() > 64 {
                return Err(PmoeError::Length { len: tokens.len(), max: 64 });
            }
            let mut t = Tensor::zeros(&[tokens.len(), 32]);
            for i in 0..tokens.len() {
                let n = next_of(&tokens[..=i]);
                t.data_mut()[i * 32 + n] = 1.0;
            }
            Ok(t)
        }

        fn max_seq_len(&self) -> usize {
            64
        }
    }

    #[test]
    fn teacher_forcing_agrees_with_greedy() {
        let mut correct = 0;
        for p in 0..300usize {
            let prompt = vec![4, 17 + p % 10, 17 + (p / 10) % 10, 17 + p / 100, vocab::SEP];
            let generated = greedy_decode(&prompt, &Hashy, 6).unwrap();
            let mut target: Vec<usize> = generated[prompt.len()..].iter().copied().filter(|&t| t != vocab::EOS).collect();
            // perturb some targets so both outcomes are exercised
            match p % 4 {
                0 if !target.is_empty() => target[0] = 99 % 32,
                1 => target.push(17),
                2 if !target.is_empty() => {
                    target.pop();
                }
                _ => {}
            }
            let ex = Example { prompt, target, task_id: 0 };
            let tf = teacher_forced_correct(&Hashy, &ex).unwrap();
            assert_eq!(tf, greedy_correct(&Hashy, &ex).unwrap(), "example {p}");
            correct += usize::from(tf);
        }
        assert!(correct > 30 && correct < 270, "{correct}");
    }
}
