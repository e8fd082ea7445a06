use approx::assert_relative_eq;
use pmoe_core::adapters::{route_tokens, AdapterLayout, AdapterMode, PmoeAdapterSet, RouterState};
use pmoe_core::autodiff::Tensor;
use pmoe_core::checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint};
use pmoe_core::metrics::{compute_bwt, compute_op, usage_entropy, AllocationMatrix, ScoreMatrix};
use pmoe_core::tasks::{generate_task_dataset, task_oracle, Split, TaskSpec};
use pmoe_core::trainer::{build_replay_batch, replay_quota, ReplayBuffer};
use pmoe_core::transformer::BaseConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize, seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[rows, cols], |_| rng.random_range(-scale..scale))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gate_rows_are_distributions(n in 1usize..12, d in 1usize..10, t in 1usize..6, seed: u64, scale in 0.1f64..50.0) {
        let h = matrix(n, d, seed, scale);
        let router = RouterState { w_g: matrix(d, t, seed ^ 1, scale) };
        let g = route_tokens(&h, &router).unwrap();
        prop_assert_eq!(g.shape(), &[n, t]);
        for i in 0..n {
            let row = g.row(i);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            assert_relative_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn entropy_is_bounded_by_log_t(t in 1usize..8, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..t)
            .map(|_| {
                let raw: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..1.0f64).powi(3)).collect();
                let s: f64 = raw.iter().sum::<f64>().max(1e-300);
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        let report = usage_entropy(&AllocationMatrix { rows });
        for h in &report.rows {
            prop_assert!(*h >= -1e-12 && *h <= (t as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn op_and_bwt_stay_in_range(t in 1usize..6, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (1..=t).map(|s| (0..s).map(|_| rng.random_range(0.0..=100.0)).collect()).collect();
        let names = (0..t).map(|i| format!("t{i}")).collect();
        let r = ScoreMatrix::from_rows(names, rows).unwrap();
        for s in 1..=t {
            let op = compute_op(&r, s).unwrap();
            let bwt = compute_bwt(&r, s).unwrap();
            prop_assert!((0.0..=100.0).contains(&op));
            prop_assert!((-100.0..=100.0).contains(&bwt));
        }
    }

    #[test]
    fn replay_quota_is_a_ceiling(n in 0usize..5000, frac in 0.0f64..=1.0) {
        let q = replay_quota(n, frac);
        prop_assert!(q <= n);
        prop_assert!(q as f64 + 1e-9 >= frac * n as f64);
        prop_assert!((q as f64) < frac * n as f64 + 1.0 + 1e-9);
    }

    #[test]
    fn replay_sampling_is_seed_stable(sizes in prop::collection::vec(1usize..300, 1..4), seed: u64, frac in 0.0f64..=1.0) {
        let spec = TaskSpec::standard(0).unwrap();
        let mut a = ReplayBuffer::new();
        let mut b = ReplayBuffer::new();
        for (i, &n) in sizes.iter().enumerate() {
            let data = generate_task_dataset(&spec, Split::Train, n, i as u64).unwrap();
            a.admit(&data, i, 0.01, seed);
            b.admit(&data, i, 0.01, seed);
        }
        prop_assert_eq!(a.len(), sizes.iter().map(|&n| replay_quota(n, 0.01)).sum::<usize>());
        prop_assert_eq!(a.entries(), b.entries());
        let x = build_replay_batch(&a, frac, seed);
        prop_assert_eq!(x.len(), replay_quota(a.len(), frac));
        prop_assert_eq!(x, build_replay_batch(&b, frac, seed));
    }

    #[test]
    fn adapter_checkpoints_roundtrip(tau in 1usize..4, experts in 1usize..4, seed: u64, routing_per_seq: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layout = AdapterLayout::new(AdapterMode::Pmoe, tau, 2, 4, 8);
        if routing_per_seq {
            layout.routing = pmoe_core::adapters::Routing::PerSequence;
        }
        let mut set = PmoeAdapterSet::new(layout, &mut rng).unwrap();
        for _ in 1..experts {
            set.add_expert(&mut rng).unwrap();
        }
        set.freeze_all_but(experts - 1);
        for (_, _, t) in set.named_tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random::<f64>() * 1e-3 - f64::MIN_POSITIVE);
        }
        let base_config = BaseConfig { num_layers: 4, d_model: 8, num_heads: 2, vocab_size: 64, max_seq_len: 16, mlp_hidden: 8 };
        let bytes = encode_checkpoint(&Checkpoint::from_adapters(&set, base_config, experts, seed, None)).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        let restored = back.to_adapters().unwrap();
        prop_assert_eq!(&restored.frozen_experts, &set.frozen_experts);
        for ((n1, _, a), (n2, _, b)) in set.named_tensors().into_iter().zip(restored.named_tensors()) {
            prop_assert_eq!(n1, n2);
            prop_assert!(a.bits_eq(b));
        }
        prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn oracles_are_idempotent_where_defined(payload in prop::collection::vec(0usize..6, 0..8)) {
        let letters: Vec<usize> = payload.iter().map(|&i| pmoe_core::tasks::vocab::letter(i)).collect();
        let digits: Vec<usize> = payload.iter().map(|&i| pmoe_core::tasks::vocab::digit(i)).collect();
        let sorted = task_oracle(2, &digits).unwrap();
        prop_assert_eq!(task_oracle(2, &sorted).unwrap(), sorted);
        let dedup = task_oracle(4, &letters).unwrap();
        prop_assert_eq!(task_oracle(4, &dedup).unwrap(), dedup);
    }
}
