//! Bit-exact binary checkpoints.
//!
//! ```text
//! "PMOE" | version u32 | meta_len u64 | meta (UTF-8 JSON) | count u32 |
//!   count × ( name_len u32 | name | rank u32 | dims u32×rank | values f64×Π dims )
//! ```
//!
//! All integers and floats are little-endian; values are row-major.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterLayout, AdapterMode, PmoeAdapterSet};
use crate::autodiff::Tensor;
use crate::config::RunConfig;
use crate::error::{PmoeError, Result};
use crate::transformer::{BaseConfig, BaseModel};

pub const MAGIC: &[u8; 4] = b"PMOE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Base,
    Adapters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub base_config: BaseConfig,
    pub layout: Option<AdapterLayout>,
    /// Last task trained (0 for a base model).
    pub task_index: usize,
    pub num_experts: usize,
    pub frozen_experts: Vec<usize>,
    pub seed: u64,
    /// Echo of the run configuration that produced this file.
    pub config: Option<RunConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_base(model: &BaseModel, seed: u64, config: Option<RunConfig>) -> Self {
        Self {
            meta: CheckpointMeta {
                kind: CheckpointKind::Base,
                base_config: model.config,
                layout: None,
                task_index: 0,
                num_experts: 0,
                frozen_experts: Vec::new(),
                seed,
                config,
            },
            tensors: model.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        }
    }

    pub fn from_adapters(
        adapters: &PmoeAdapterSet,
        base_config: BaseConfig,
        task_index: usize,
        seed: u64,
        config: Option<RunConfig>,
    ) -> Self {
        Self {
            meta: CheckpointMeta {
                kind: CheckpointKind::Adapters,
                base_config,
                layout: Some(adapters.layout.clone()),
                task_index,
                num_experts: adapters.num_experts(),
                frozen_experts: adapters.frozen_experts.iter().copied().collect(),
                seed,
                config,
            },
            tensors: adapters.named_tensors().into_iter().map(|(n, _, t)| (n, t.clone())).collect(),
        }
    }

    pub fn to_base(&self) -> Result<BaseModel> {
        if self.meta.kind != CheckpointKind::Base {
            return Err(PmoeError::Consistency("checkpoint holds adapters, not a base model".into()));
        }
        self.meta.base_config.validate()?;
        BaseModel::from_named(self.meta.base_config, self.tensors.clone(), true)
    }

    pub fn to_adapters(&self) -> Result<PmoeAdapterSet> {
        let meta = &self.meta;
        if meta.kind != CheckpointKind::Adapters {
            return Err(PmoeError::Consistency("checkpoint holds a base model, not adapters".into()));
        }
        let layout = meta
            .layout
            .clone()
            .ok_or_else(|| PmoeError::Consistency("adapter checkpoint without layout".into()))?;
        let t = meta.num_experts;
        if layout.mode == AdapterMode::Pmoe {
            let router_cols = self
                .tensors
                .iter()
                .find(|(n, _)| n == "router.w_g")
                .map(|(_, w)| w.shape().get(1).copied().unwrap_or(0));
            if router_cols != Some(t) {
                return Err(PmoeError::Consistency(format!(
                    "metadata declares {t} experts, router table has {router_cols:?} columns"
                )));
            }
        }
        // Build the skeleton, then overwrite every tensor by name.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut set = PmoeAdapterSet::new(layout, &mut rng)?;
        if set.layout.mode == AdapterMode::Pmoe {
            for _ in 1..t.max(1) {
                set.add_expert(&mut rng)?;
            }
        }
        let mut tensors = self.tensors.clone();
        {
            let slots = set.named_tensors_mut();
            if slots.len() != tensors.len() {
                return Err(PmoeError::Consistency(format!(
                    "{t} experts imply {} adapter tensors, file has {}",
                    slots.len(),
                    tensors.len()
                )));
            }
            for (name, _, slot) in slots {
                let pos = tensors
                    .iter()
                    .position(|(n, _)| *n == name)
                    .ok_or_else(|| PmoeError::Consistency(format!("missing tensor `{name}`")))?;
                let (_, value) = tensors.swap_remove(pos);
                if value.shape() != slot.shape() {
                    return Err(PmoeError::Consistency(format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        value.shape(),
                        slot.shape()
                    )));
                }
                *slot = value;
            }
        }
        if let Some(&k) = meta.frozen_experts.iter().find(|&&k| k >= set.num_experts()) {
            return Err(PmoeError::Consistency(format!("frozen expert {k} does not exist")));
        }
        set.frozen_experts = meta.frozen_experts.iter().copied().collect();
        Ok(set)
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&ckpt.meta)?;
    let mut out = Vec::with_capacity(64 + meta.len() + ckpt.tensors.iter().map(|(_, t)| 8 * t.len() + 64).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&u32_len(ckpt.tensors.len())?.to_le_bytes());
    for (name, t) in &ckpt.tensors {
        out.extend_from_slice(&u32_len(name.len())?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_len(t.rank())?.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&u32_len(d)?.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| PmoeError::Input(format!("{n} does not fit the 32-bit checkpoint field")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            PmoeError::Corrupt(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(PmoeError::Corrupt(format!("bad magic {magic:?}, expected \"PMOE\"")));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(PmoeError::Corrupt(format!("unsupported format version {version}, expected {FORMAT_VERSION}")));
    }
    let meta_len = usize::try_from(r.u64("metadata length")?)
        .map_err(|_| PmoeError::Corrupt("metadata length overflows".into()))?;
    let meta_bytes = r.take(meta_len, "metadata")?;
    let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
        .map_err(|e| PmoeError::Corrupt(format!("metadata is not valid: {e}")))?;
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| PmoeError::Corrupt(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| PmoeError::Corrupt(format!("tensor `{name}` size overflows")))?;
        let raw = r.take(n, "tensor values")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| PmoeError::Corrupt(format!("tensor `{name}`: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(PmoeError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { meta, tensors })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    std::fs::write(path, bytes).map_err(|e| PmoeError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| PmoeError::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_base() -> BaseModel {
        let cfg = BaseConfig { num_layers: 2, d_model: 8, num_heads: 2, vocab_size: 16, max_seq_len: 8, mlp_hidden: 8 };
        let mut m = BaseModel::init(cfg, 3).unwrap();
        m.frozen = true;
        m
    }

    fn tiny_adapters(experts: usize) -> PmoeAdapterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut set = PmoeAdapterSet::new(AdapterLayout::new(AdapterMode::Pmoe, 1, 2, 2, 8), &mut rng).unwrap();
        for _ in 1..experts {
            set.add_expert(&mut rng).unwrap();
        }
        for (_, _, t) in set.named_tensors_mut() {
            t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += (i as f64 * 0.37).sin() / 3.0);
        }
        set.freeze_all_but(experts - 1);
        set
    }

    #[test]
    fn empty_table_layout() {
        let ckpt = Checkpoint { tensors: Vec::new(), ..Checkpoint::from_base(&tiny_base(), 1, None) };
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(&bytes[..4], b"PMOE");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
        assert_eq!(bytes.len(), 16 + meta_len + 4);
        assert_eq!(&bytes[16 + meta_len..], &[0, 0, 0, 0]);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), ckpt);
    }

    #[test]
    fn tensor_record_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap();
        let mut ckpt = Checkpoint::from_base(&tiny_base(), 1, None);
        ckpt.tensors = vec![("w".to_string(), t)];
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let tail = &bytes[bytes.len() - (4 + 1 + 4 + 8 + 16)..];
        let mut expected = vec![1, 0, 0, 0, b'w', 2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0];
        expected.extend_from_slice(&1.5f64.to_le_bytes());
        expected.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(tail, &expected[..]);
    }

    #[test]
    fn base_and_adapter_roundtrips() {
        let base = tiny_base();
        let bytes = encode_checkpoint(&Checkpoint::from_base(&base, 9, None)).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.to_base().unwrap(), base);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);

        let set = tiny_adapters(3);
        let bytes = encode_checkpoint(&Checkpoint::from_adapters(&set, base.config, 3, 9, Some(RunConfig::default()))).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        let restored = back.to_adapters().unwrap();
        assert_eq!(restored, set);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = encode_checkpoint(&Checkpoint::from_base(&tiny_base(), 1, None)).unwrap();
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(PmoeError::Corrupt(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let err = decode_checkpoint(&bad).unwrap_err().to_string();
        assert!(err.contains("\"PMOE\""), "{err}");
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_checkpoint(&bad), Err(PmoeError::Corrupt(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_checkpoint(&long), Err(PmoeError::Corrupt(_))));
    }

    #[test]
    fn expert_count_mismatch_is_inconsistent() {
        let set = tiny_adapters(2);
        let mut ckpt = Checkpoint::from_adapters(&set, tiny_base().config, 2, 1, None);
        ckpt.meta.num_experts = 3;
        assert!(matches!(ckpt.to_adapters(), Err(PmoeError::Consistency(_))));
        let mut ckpt = Checkpoint::from_adapters(&set, tiny_base().config, 2, 1, None);
        ckpt.tensors.pop();
        assert!(matches!(ckpt.to_adapters(), Err(PmoeError::Consistency(_))));
        let ckpt = Checkpoint::from_adapters(&set, tiny_base().config, 2, 1, None);
        assert!(matches!(ckpt.to_base(), Err(PmoeError::Consistency(_))));
    }

    #[test]
    fn files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ckpt = Checkpoint::from_adapters(&tiny_adapters(2), tiny_base().config, 2, 1, None);
        save_checkpoint(&path, &ckpt).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
        let missing = dir.path().join("nope/x.ckpt");
        let err = load_checkpoint(&missing).unwrap_err();
        assert!(matches!(err, PmoeError::Io { .. }) && err.to_string().contains("nope"));
    }
}
