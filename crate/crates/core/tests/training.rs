mod common;

use pmoe_core::adapters::{AdaptedModel, AdapterMode, PmoeAdapterSet};
use pmoe_core::tasks::generate_stream;
use pmoe_core::trainer::{
    dataset_accuracy, greedy_correct, teacher_forced_correct, train_task, ReplayBuffer, TrainHyper,
};
use pmoe_core::transformer::{greedy_decode, pretrain_base, BaseConfig, PretrainHyper};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn pretraining_memorizes_a_single_sequence() {
    let config = BaseConfig { num_layers: 2, d_model: 16, num_heads: 2, vocab_size: 64, max_seq_len: 16, mlp_hidden: 32 };
    let seq = vec![12, 43, 45, 47, 49, 51, 1, 53, 55, 57, 2];
    let hyper = PretrainHyper { lr: 1e-2, batch_size: 1, steps: 200, weight_decay: 0.0 };
    let (model, log) = pretrain_base(std::slice::from_ref(&seq), config, &hyper, 3).unwrap();
    let last = log.last().unwrap().loss;
    assert!(last < 0.01, "final loss {last}");
    assert!(model.frozen);
    let out = greedy_decode(&seq[..4], &model, seq.len() - 4).unwrap();
    assert_eq!(out, seq);
}

/// 32 copy examples, default epochs and learning rate. One example per
/// step gives the optimizer 32 steps per epoch instead of 1.
#[test]
fn single_task_overfit_and_greedy_agreement() {
    let desk = common::desk();
    let tasks = generate_stream(2, 200, 100, 5).unwrap();
    let train = &tasks[0].train[..32];
    for mode in [AdapterMode::Pmoe, AdapterMode::LoraSeq] {
        let cfg = &desk.config;
        let hyper = TrainHyper { batch_size: 1, mode, ..cfg.train_hyper() };
        let mut layout = cfg.layout();
        layout.mode = mode;
        let mut adapters = PmoeAdapterSet::new(layout, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut buffer = ReplayBuffer::new();
        let log = train_task(&desk.base, &mut adapters, train, &mut buffer, &hyper, 1).unwrap();
        assert_eq!(log.len(), hyper.epochs_per_task * 32);
        let acc = dataset_accuracy(&desk.base, Some(&adapters), train).unwrap();
        assert!(acc >= 95.0, "{mode}: train exact match {acc}");

        // teacher-forced scoring agrees with real greedy decoding
        let model = AdaptedModel { base: &desk.base, adapters: &adapters };
        let mut correct = 0;
        for ex in train.iter().chain(&tasks[0].test[..40]).chain(&tasks[1].test[..20]) {
            let g = greedy_correct(&model, ex).unwrap();
            assert_eq!(g, teacher_forced_correct(&model, ex).unwrap(), "{mode}: {:?}", ex.prompt);
            correct += g as usize;
        }
        assert!(correct >= 31);
    }
}
