//! Procedural task stream and general-ability probes.
//!
//! Every sequence uses the layout `[marker, input.., SEP, output.., EOS]`
//! over a fixed 64-symbol vocabulary. Eight task markers make the task
//! recoverable from the input alone; five probe-family markers label the
//! general corpus.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PmoeError, Result};
use crate::seed::derive_seed;

/// Symbol layout of the shared vocabulary.
pub mod vocab {
    pub const PAD: usize = 0;
    pub const SEP: usize = 1;
    pub const EOS: usize = 2;
    /// Unary tally mark emitted by the counting task.
    pub const TALLY: usize = 3;
    pub const TASK_BASE: usize = 4;
    pub const PROBE_BASE: usize = 12;
    pub const DIGIT_BASE: usize = 17;
    pub const LETTER_BASE: usize = 27;
    pub const LETTERS: usize = 16;
    pub const FILLER_BASE: usize = 43;
    pub const FILLERS: usize = 21;
    /// Vocabulary size the task suite needs.
    pub const SIZE: usize = 64;

    pub fn digit(d: usize) -> usize {
        DIGIT_BASE + d
    }

    pub fn letter(l: usize) -> usize {
        LETTER_BASE + l
    }
}

pub const NUM_TASKS: usize = 8;
pub const NUM_PROBES: usize = 5;

const TASK_NAMES: [&str; NUM_TASKS] =
    ["copy", "reverse", "sort", "successor", "dedup", "cipher", "count", "pairsum"];

const PROBE_NAMES: [&str; NUM_PROBES] = ["walk-1", "walk-3", "walk-neg2", "zigzag", "stutter"];

/// Fixed permutation of the 16 letters used by the cipher task.
const CIPHER: [usize; 16] = [7, 12, 3, 15, 0, 9, 5, 14, 1, 11, 4, 13, 2, 8, 6, 10];

/// Letter counted by the counting task (`a`).
const COUNTED: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub name: String,
    pub instruction: usize,
    pub alphabet: Vec<usize>,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl TaskSpec {
    /// The built-in spec for task `task_id` in `0..8`.
    pub fn standard(task_id: usize) -> Result<Self> {
        if task_id >= NUM_TASKS {
            return Err(PmoeError::Index(format!("task id {task_id} outside 0..{NUM_TASKS}")));
        }
        let letters = |n: usize| (0..n).map(vocab::letter).collect::<Vec<_>>();
        let digits = (0..10).map(vocab::digit).collect::<Vec<_>>();
        let (alphabet, min_len, max_len) = match task_id {
            0 | 1 | 3 | 5 => (letters(vocab::LETTERS), 4, 4),
            2 => (digits, 4, 4),
            4 => (letters(6), 5, 5),
            6 => (letters(4), 3, 6),
            7 => (digits, 4, 4),
            _ => unreachable!(),
        };
        Ok(Self {
            task_id,
            name: TASK_NAMES[task_id].to_string(),
            instruction: vocab::TASK_BASE + task_id,
            alphabet,
            min_len,
            max_len,
            seed: 0x5eed_0000 + task_id as u64,
        })
    }

    /// The same grammar with payloads one symbol shorter; this is what
    /// the pretraining corpus sees.
    fn shortened(&self) -> Self {
        Self { min_len: self.min_len - 1, max_len: self.max_len - 1, ..self.clone() }
    }

    pub fn stream(num_tasks: usize) -> Result<Vec<Self>> {
        (0..num_tasks).map(Self::standard).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    /// Marker, input payload and separator.
    pub prompt: Vec<usize>,
    /// Oracle output, without the trailing EOS.
    pub target: Vec<usize>,
    pub task_id: usize,
}

impl Example {
    pub fn payload(&self) -> &[usize] {
        &self.prompt[1..self.prompt.len() - 1]
    }

    /// Full training sequence: prompt, target, EOS.
    pub fn sequence(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.prompt.len() + self.target.len() + 1);
        s.extend_from_slice(&self.prompt);
        s.extend_from_slice(&self.target);
        s.push(vocab::EOS);
        s
    }

    /// Next-token targets for [`Example::sequence`] restricted to the
    /// target span (predictions of the target tokens and EOS).
    pub fn target_mask(&self) -> Vec<Option<usize>> {
        let seq = self.sequence();
        let first = self.prompt.len() - 1;
        (0..seq.len())
            .map(|i| if i >= first && i + 1 < seq.len() { Some(seq[i + 1]) } else { None })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.prompt.len() + self.target.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Ground-truth output for a task payload.
pub fn task_oracle(task_id: usize, input: &[usize]) -> Result<Vec<usize>> {
    let spec = TaskSpec::standard(task_id)?;
    if let Some(bad) = input.iter().find(|s| !spec.alphabet.contains(s)) {
        return Err(PmoeError::Input(format!("symbol {bad} is outside the {} alphabet", spec.name)));
    }
    let letter_idx = |s: usize| s - vocab::LETTER_BASE;
    let digit_idx = |s: usize| s - vocab::DIGIT_BASE;
    Ok(match task_id {
        0 => input.to_vec(),
        1 => input.iter().rev().copied().collect(),
        2 => {
            let mut v = input.to_vec();
            v.sort_unstable();
            v
        }
        3 => input.iter().map(|&s| vocab::letter((letter_idx(s) + 1) % vocab::LETTERS)).collect(),
        4 => {
            let mut seen = Vec::new();
            for &s in input {
                if !seen.contains(&s) {
                    seen.push(s);
                }
            }
            seen
        }
        5 => input.iter().map(|&s| vocab::letter(CIPHER[letter_idx(s)])).collect(),
        6 => {
            let n = input.iter().filter(|&&s| s == vocab::letter(COUNTED)).count();
            vec![vocab::TALLY; n]
        }
        7 => {
            if !input.len().is_multiple_of(2) {
                return Err(PmoeError::Input("pairwise sum needs an even number of digits".into()));
            }
            input
                .chunks(2)
                .map(|p| vocab::digit((digit_idx(p[0]) + digit_idx(p[1])) % 10))
                .collect()
        }
        _ => unreachable!(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Deterministic partition of the prompt space: one in five prompts is
/// reserved for the test split.
fn split_of(tokens: &[usize]) -> Split {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &t in tokens {
        h ^= t as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    if h.is_multiple_of(5) {
        Split::Test
    } else {
        Split::Train
    }
}

fn sample_payload(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut len = rng.random_range(spec.min_len..=spec.max_len);
    if spec.task_id == 7 && len % 2 == 1 {
        len -= 1;
    }
    (0..len).map(|_| *spec.alphabet.choose(rng).expect("non-empty alphabet")).collect()
}

/// `n` examples of one split. Train and test draw from disjoint seed
/// streams and from disjoint parts of the prompt space.
pub fn generate_task_dataset(spec: &TaskSpec, split: Split, n: usize, seed: u64) -> Result<Vec<Example>> {
    let stream = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ spec.seed, stream, spec.task_id as u64));
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let payload = sample_payload(spec, &mut rng);
        let mut prompt = Vec::with_capacity(payload.len() + 2);
        prompt.push(spec.instruction);
        prompt.extend_from_slice(&payload);
        prompt.push(vocab::SEP);
        if split_of(&prompt) != split {
            continue;
        }
        let target = task_oracle(spec.task_id, &payload)?;
        out.push(Example { prompt, target, task_id: spec.task_id });
    }
    Ok(out)
}

/// One task's train and test data.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

pub fn generate_stream(num_tasks: usize, n_train: usize, n_test: usize, seed: u64) -> Result<Vec<TaskData>> {
    TaskSpec::stream(num_tasks)?
        .into_iter()
        .map(|spec| {
            Ok(TaskData {
                train: generate_task_dataset(&spec, Split::Train, n_train, seed)?,
                test: generate_task_dataset(&spec, Split::Test, n_test, seed)?,
                spec,
            })
        })
        .collect()
}

pub fn probe_name(family: usize) -> &'static str {
    PROBE_NAMES[family]
}

/// Deterministic symbol walk on the filler ring. The per-sequence step is
/// drawn from two family-specific choices, so it is recoverable from the
/// first few symbols.
fn walk(family: usize, start: usize, variant: usize, len: usize) -> Vec<usize> {
    let ring = vocab::FILLERS as i64;
    let step: i64 = match (family, variant) {
        (0, 0) => 1,
        (0, _) => 2,
        (1, 0) => 3,
        (1, _) => 4,
        (2, 0) => -2,
        (2, _) => -1,
        (3, v) => 5 + v as i64,
        (4, v) => 2 + v as i64,
        _ => unreachable!(),
    };
    let mut out = Vec::with_capacity(len);
    let mut pos = start as i64;
    for i in 0..len {
        out.push(vocab::FILLER_BASE + pos.rem_euclid(ring) as usize);
        pos += match family {
            3 if i % 2 == 1 => -step + 1,
            4 if i % 2 == 0 => 0,
            _ => step,
        };
    }
    out
}

fn probe_example(family: usize, rng: &mut ChaCha8Rng) -> (Example, Split) {
    let start = rng.random_range(0..vocab::FILLERS);
    let variant = rng.random_range(0..2);
    let prefix = rng.random_range(3..=5);
    let cont = rng.random_range(2..=4);
    let seq = walk(family, start, variant, prefix + cont);
    let mut prompt = vec![vocab::PROBE_BASE + family];
    prompt.extend_from_slice(&seq[..prefix]);
    prompt.push(vocab::SEP);
    // split on the walk identity, not the prompt, so held-out probes test
    // unseen (start, step) pairs
    let split = split_of(&[family, start, variant, 97]);
    (Example { prompt, target: seq[prefix..].to_vec(), task_id: family }, split)
}

/// Pretraining corpus plus held-out general probe sets.
#[derive(Debug, Clone)]
pub struct GeneralCorpus {
    pub sequences: Vec<Vec<usize>>,
    pub probes: Vec<Vec<Example>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusMix {
    /// Fraction of corpus sequences drawn from the task grammars.
    pub task_rate: f64,
    pub probe_size: usize,
}

impl Default for CorpusMix {
    fn default() -> Self {
        Self { task_rate: 0.5, probe_size: 100 }
    }
}

pub fn generate_general_corpus(n: usize, mix: CorpusMix, seed: u64) -> Result<GeneralCorpus> {
    if n == 0 {
        return Err(PmoeError::Input("general corpus needs at least one sequence".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 10, 0));
    let specs = TaskSpec::stream(NUM_TASKS)?;
    let mut sequences = Vec::with_capacity(n);
    while sequences.len() < n {
        if rng.random_bool(mix.task_rate) {
            let spec = &specs[rng.random_range(0..NUM_TASKS)];
            let payload = sample_payload(&spec.shortened(), &mut rng);
            let mut prompt = vec![spec.instruction];
            prompt.extend_from_slice(&payload);
            prompt.push(vocab::SEP);
            if split_of(&prompt) != Split::Train {
                continue;
            }
            let target = task_oracle(spec.task_id, &payload)?;
            sequences.push(Example { prompt, target, task_id: spec.task_id }.sequence());
        } else {
            let family = rng.random_range(0..NUM_PROBES);
            let (ex, split) = probe_example(family, &mut rng);
            if split == Split::Train {
                sequences.push(ex.sequence());
            }
        }
    }
    let mut probes = Vec::with_capacity(NUM_PROBES);
    for family in 0..NUM_PROBES {
        let mut prng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 11, family as u64));
        let mut set = Vec::with_capacity(mix.probe_size);
        while set.len() < mix.probe_size {
            let (ex, split) = probe_example(family, &mut prng);
            if split == Split::Test {
                set.push(ex);
            }
        }
        probes.push(set);
    }
    Ok(GeneralCorpus { sequences, probes })
}

/// 100 when the sequences agree after trailing PAD/EOS are trimmed, else 0.
pub fn exact_match(predicted: &[usize], gold: &[usize]) -> f64 {
    fn trim(s: &[usize]) -> &[usize] {
        let mut end = s.len();
        while end > 0 && (s[end - 1] == vocab::PAD || s[end - 1] == vocab::EOS) {
            end -= 1;
        }
        &s[..end]
    }
    if trim(predicted) == trim(gold) {
        100.0
    } else {
        0.0
    }
}

/// Mean of per-example scores.
pub fn dataset_score(scores: &[f64]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// Line format: space-separated prompt ids, a tab, space-separated target ids.
pub fn export_dataset(examples: &[Example]) -> String {
    let join = |s: &[usize]| s.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
    examples
        .iter()
        .map(|e| format!("{}\t{}\n", join(&e.prompt), join(&e.target)))
        .collect()
}

/// Parses a plain-text corpus: one space-separated token-id sequence per line.
pub fn parse_token_lines(text: &str) -> Result<Vec<Vec<usize>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            line.split_whitespace()
                .map(|tok| {
                    tok.parse::<usize>()
                        .map_err(|_| PmoeError::Input(format!("line {}: bad token id `{tok}`", n + 1)))
                })
                .collect()
        })
        .collect()
}
