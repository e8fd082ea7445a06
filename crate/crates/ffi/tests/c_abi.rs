use std::ffi::{c_char, CString};
use std::ptr;

use pmoe_core::adapters::{AdapterLayout, AdapterMode, PmoeAdapterSet};
use pmoe_core::checkpoint::{save_checkpoint, Checkpoint};
use pmoe_core::transformer::{base_forward, greedy_decode, BaseConfig, BaseModel};
use pmoe_ffi::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config() -> BaseConfig {
    BaseConfig { num_layers: 3, d_model: 16, num_heads: 2, vocab_size: 64, max_seq_len: 12, mlp_hidden: 16 }
}

struct Fixture {
    _dir: tempfile::TempDir,
    base_path: CString,
    adapters_path: CString,
    base: BaseModel,
    adapters: PmoeAdapterSet,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let mut base = BaseModel::init(config(), 5).unwrap();
    base.frozen = true;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut adapters = PmoeAdapterSet::new(AdapterLayout::new(AdapterMode::Pmoe, 2, 2, 3, 16), &mut rng).unwrap();
    adapters.add_expert(&mut rng).unwrap();
    for (_, _, t) in adapters.named_tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    let bp = dir.path().join("base.ckpt");
    let ap = dir.path().join("adapters.ckpt");
    save_checkpoint(&bp, &Checkpoint::from_base(&base, 1, None)).unwrap();
    save_checkpoint(&ap, &Checkpoint::from_adapters(&adapters, base.config, 2, 1, None)).unwrap();
    Fixture {
        base_path: CString::new(bp.to_str().unwrap()).unwrap(),
        adapters_path: CString::new(ap.to_str().unwrap()).unwrap(),
        _dir: dir,
        base,
        adapters,
    }
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { pmoe_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(n >= 1);
    unsafe { std::ffi::CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

#[test]
fn base_forward_through_the_abi_matches_the_library() {
    let f = fixture();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { pmoe_base_load(f.base_path.as_ptr(), &mut handle) }, PmoeStatus::Ok);
    assert_eq!(unsafe { pmoe_base_vocab_size(handle) }, 64);
    assert_eq!(unsafe { pmoe_base_max_seq_len(handle) }, 12);
    assert_eq!(unsafe { pmoe_base_param_count(handle) }, f.base.param_count());

    let tokens = [4u32, 20, 21, 1];
    let mut logits = vec![0.0; 4 * 64];
    let status = unsafe {
        pmoe_forward(handle, ptr::null(), tokens.as_ptr(), 4, logits.as_mut_ptr(), logits.len(), ptr::null_mut(), 0)
    };
    assert_eq!(status, PmoeStatus::Ok);
    let expected = base_forward(&[4, 20, 21, 1], &f.base).unwrap();
    assert!(logits.iter().zip(expected.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    unsafe { pmoe_base_free(handle) };
}

#[test]
fn adapted_forward_and_gate() {
    let f = fixture();
    let (mut base, mut ad) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(pmoe_base_load(f.base_path.as_ptr(), &mut base), PmoeStatus::Ok);
        assert_eq!(pmoe_adapters_load(f.adapters_path.as_ptr(), &mut ad), PmoeStatus::Ok);
        assert_eq!(pmoe_adapters_num_experts(ad), 2);
    }
    let tokens = [4u32, 20, 1];
    let mut logits = vec![0.0; 3 * 64];
    let mut gate = vec![0.0; 3 * 2];
    let status = unsafe {
        pmoe_forward(base, ad, tokens.as_ptr(), 3, logits.as_mut_ptr(), logits.len(), gate.as_mut_ptr(), gate.len())
    };
    assert_eq!(status, PmoeStatus::Ok);
    let (el, eg) = pmoe_core::adapters::pmoe_forward(&[4, 20, 1], &f.base, &f.adapters).unwrap();
    assert_eq!(logits, el.data());
    assert_eq!(gate, eg.data());
    for row in gate.chunks(2) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    // buffer too small
    let status = unsafe {
        pmoe_forward(base, ad, tokens.as_ptr(), 3, logits.as_mut_ptr(), 10, ptr::null_mut(), 0)
    };
    assert_eq!(status, PmoeStatus::BufferTooSmall);
    assert!(last_error().contains("capacity 10"));
    unsafe {
        pmoe_adapters_free(ad);
        pmoe_base_free(base);
    }
}

#[test]
fn greedy_decode_matches_the_library() {
    let f = fixture();
    let mut base = ptr::null_mut();
    assert_eq!(unsafe { pmoe_base_load(f.base_path.as_ptr(), &mut base) }, PmoeStatus::Ok);
    let prompt = [4u32, 30, 31, 1];
    let mut out = [0u32; 16];
    let mut n = 0usize;
    let status = unsafe { pmoe_greedy_decode(base, ptr::null(), prompt.as_ptr(), 4, 5, out.as_mut_ptr(), 16, &mut n) };
    assert_eq!(status, PmoeStatus::Ok);
    let expected = greedy_decode(&[4, 30, 31, 1], &f.base, 5).unwrap();
    let generated: Vec<u32> = expected[4..].iter().map(|&t| t as u32).collect();
    assert_eq!(&out[..n], &generated[..]);

    let status = unsafe { pmoe_greedy_decode(base, ptr::null(), prompt.as_ptr(), 4, 0, out.as_mut_ptr(), 16, &mut n) };
    assert_eq!(status, PmoeStatus::Ok);
    assert_eq!(n, 0);
    unsafe { pmoe_base_free(base) };
}

#[test]
fn errors_are_reported_not_raised() {
    let f = fixture();
    let mut handle = ptr::null_mut();
    let missing = CString::new("/nonexistent/dir/base.ckpt").unwrap();
    assert_eq!(unsafe { pmoe_base_load(missing.as_ptr(), &mut handle) }, PmoeStatus::Io);
    assert!(last_error().contains("/nonexistent/dir"));
    assert!(handle.is_null());

    assert_eq!(unsafe { pmoe_base_load(ptr::null(), &mut handle) }, PmoeStatus::NullPointer);
    assert_eq!(unsafe { pmoe_base_load(f.base_path.as_ptr(), ptr::null_mut()) }, PmoeStatus::NullPointer);

    // an adapter file is not a base model
    assert_eq!(unsafe { pmoe_base_load(f.adapters_path.as_ptr(), &mut handle) }, PmoeStatus::Inconsistent);

    let garbage = f._dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"NOPE0000").unwrap();
    let garbage = CString::new(garbage.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { pmoe_base_load(garbage.as_ptr(), &mut handle) }, PmoeStatus::Corrupt);
    assert!(last_error().contains("PMOE"));

    assert_eq!(unsafe { pmoe_base_load(f.base_path.as_ptr(), &mut handle) }, PmoeStatus::Ok);
    assert_eq!(last_error(), "");
    let bad = [99u32];
    let mut logits = vec![0.0; 64];
    let status = unsafe { pmoe_forward(handle, ptr::null(), bad.as_ptr(), 1, logits.as_mut_ptr(), 64, ptr::null_mut(), 0) };
    assert_ne!(status, PmoeStatus::Ok);
    let status = unsafe { pmoe_forward(handle, ptr::null(), bad.as_ptr(), 0, logits.as_mut_ptr(), 64, ptr::null_mut(), 0) };
    assert_eq!(status, PmoeStatus::InvalidArgument);
    let too_long = [4u32; 13];
    let mut big = vec![0.0; 13 * 64];
    let status = unsafe { pmoe_forward(handle, ptr::null(), too_long.as_ptr(), 13, big.as_mut_ptr(), big.len(), ptr::null_mut(), 0) };
    assert_eq!(status, PmoeStatus::Dimension);
    unsafe {
        pmoe_base_free(handle);
        pmoe_base_free(ptr::null_mut());
        pmoe_adapters_free(ptr::null_mut());
        assert_eq!(pmoe_base_vocab_size(ptr::null()), 0);
    }
}

#[test]
fn param_count_and_version() {
    let mut n = 0u64;
    assert_eq!(unsafe { pmoe_param_count(4, 8, 2, 2, 3, PmoeMode::Pmoe, &mut n) }, PmoeStatus::Ok);
    assert_eq!(n, 536);
    assert_eq!(unsafe { pmoe_param_count(4, 8, 2, 2, 1, PmoeMode::LoraSeq, &mut n) }, PmoeStatus::Ok);
    assert_eq!(n, 4 * 2 * 2 * 16);
    assert_eq!(unsafe { pmoe_param_count(4, 8, 2, 4, 1, PmoeMode::Pmoe, &mut n) }, PmoeStatus::InvalidArgument);
    let v = unsafe { std::ffi::CStr::from_ptr(pmoe_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn last_error_reports_required_length() {
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { pmoe_base_load(ptr::null(), &mut handle) }, PmoeStatus::NullPointer);
    let needed = unsafe { pmoe_last_error(ptr::null_mut(), 0) };
    assert_eq!(needed, "path is null".len() + 1);
    let mut small = [0 as c_char; 5];
    unsafe { pmoe_last_error(small.as_mut_ptr(), 5) };
    assert_eq!(unsafe { std::ffi::CStr::from_ptr(small.as_ptr()) }.to_str().unwrap(), "path");
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/pmoe.h")).unwrap();
    for sym in ["pmoe_base_load", "pmoe_forward", "pmoe_greedy_decode", "pmoe_last_error", "PMOE_STATUS_BUFFER_TOO_SMALL", "typedef struct PmoeBase PmoeBase"] {
        assert!(header.contains(sym), "header lacks {sym}");
    }
}
