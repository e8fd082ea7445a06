#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use pmoe_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use pmoe_core::config::RunConfig;
use pmoe_core::tasks::{generate_general_corpus, GeneralCorpus};
use pmoe_core::transformer::{pretrain_base, BaseModel};

pub struct Desk {
    pub config: RunConfig,
    pub base: BaseModel,
    pub corpus: GeneralCorpus,
}

fn cache_path() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("desk_base.ckpt")
}

/// The default desk-scale base model. Pretraining takes several minutes,
/// so the result is cached under the target directory and reused while
/// the configuration it was trained with is unchanged.
pub fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let config = RunConfig::default();
        let corpus = generate_general_corpus(config.corpus_size, config.corpus_mix(), config.seed).unwrap();
        let path = cache_path();
        if let Ok(ckpt) = load_checkpoint(&path) {
            if ckpt.meta.config.as_ref() == Some(&config) && ckpt.meta.seed == config.seed {
                return Desk { base: ckpt.to_base().unwrap(), config, corpus };
            }
        }
        let t = Instant::now();
        let (base, _) =
            pretrain_base(&corpus.sequences, config.base_config(), &config.pretrain_hyper(), config.seed).unwrap();
        eprintln!("pretrained desk base in {:.0?}", t.elapsed());
        let tmp = path.with_extension("partial");
        save_checkpoint(&tmp, &Checkpoint::from_base(&base, config.seed, Some(config.clone()))).unwrap();
        std::fs::rename(&tmp, &path).unwrap();
        Desk { base, config, corpus }
    })
}
