use candle_core::{DType, Device};
use defront::config::ExperimentConfig;
use defront::data::{build_synthetic_dataset, load_pair_manifest};
use defront::nets::Checkpoint;
use defront::training::{pair_batch, prepare_pairs, DefrontTrainer, FlowPair, PairBatch};

fn setup(dir: &std::path::Path) -> (ExperimentConfig, PairBatch) {
    let mut cfg = ExperimentConfig::desk();
    cfg.data.n_identities = 2;
    cfg.data.faces_per_identity = 1;
    cfg.training.defront.batch_size = 2;
    let ds = build_synthetic_dataset(dir, &cfg.synthetic_dataset()).unwrap();
    let pairs = prepare_pairs(&load_pair_manifest(&ds.pair_manifest).unwrap(), &cfg.geometry.template()).unwrap();
    let refs: Vec<_> = pairs.iter().collect();
    let batch = pair_batch(&refs, DType::F32, &Device::Cpu).unwrap();
    (cfg, batch)
}

fn trainer(cfg: &ExperimentConfig) -> DefrontTrainer {
    let flows = FlowPair::new(&cfg.nets.flow, DType::F32, &Device::Cpu, cfg.seed).unwrap();
    DefrontTrainer::new(&cfg.nets, &cfg.defront_config(), flows, &cfg.to_toml()).unwrap()
}

#[test]
fn resume_reproduces_the_next_step_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, batch) = setup(dir.path());

    let mut a = trainer(&cfg);
    let first = a.train_step(&batch).unwrap();
    let path = dir.path().join("step1.ckpt");
    a.checkpoint().unwrap().save(&path).unwrap();
    let next = a.train_step(&batch).unwrap();

    // A fresh trainer with a different init, so nothing but the checkpoint
    // can make it agree.
    let mut other = cfg.clone();
    other.seed = 99;
    let mut b = trainer(&other);
    b.resume(&Checkpoint::load(&path, &Device::Cpu).unwrap()).unwrap();
    assert_eq!(b.step, 1);
    let resumed = b.train_step(&batch).unwrap();

    assert_eq!(next, resumed);
    assert_ne!(first, next);
    let prints = |t: &DefrontTrainer| {
        [&t.gen_store, &t.disc_store, &t.flows.fwd_store, &t.flows.bwd_store].map(|s| s.fingerprint().unwrap())
    };
    assert_eq!(prints(&a), prints(&b));
}

#[test]
fn same_seed_gives_identical_metrics_and_checkpoint_files() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, batch) = setup(dir.path());
    let (mut a, mut b) = (trainer(&cfg), trainer(&cfg));
    assert_eq!(a.train_step(&batch).unwrap(), b.train_step(&batch).unwrap());

    let (pa, pb) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    a.checkpoint().unwrap().save(&pa).unwrap();
    b.checkpoint().unwrap().save(&pb).unwrap();
    let bytes = std::fs::read(&pa).unwrap();
    assert_eq!(bytes, std::fs::read(&pb).unwrap());

    // Load then save again: byte identical.
    let pc = dir.path().join("c.ckpt");
    Checkpoint::load(&pa, &Device::Cpu).unwrap().save(&pc).unwrap();
    assert_eq!(bytes, std::fs::read(&pc).unwrap());
}
