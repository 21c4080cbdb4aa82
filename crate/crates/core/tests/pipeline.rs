use std::process::Command;

use momask_lab::mformer::MFormerParams;
use momask_lab::ndmath::Rng;
use momask_lab::nn::Condition;
use momask_lab::rformer::{head_name, RFormerParams};
use momask_lab::toolkit::checkpoint::{load_mformer, load_rformer, mformer_checkpoint, rformer_checkpoint, CheckpointContainer};
use momask_lab::toolkit::RunConfig;

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_momask-lab"))
}

#[test]
fn config_text_round_trips_for_every_preset() {
    for name in ["desk", "toy", "paper"] {
        let c = RunConfig::preset(name).unwrap();
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }
    let edited = RunConfig::parse("preset = toy\nrun.seed = 9\n").unwrap();
    assert_ne!(edited.hash(), RunConfig::preset("toy").unwrap().hash());
    assert!(RunConfig::parse("preset = toy\nno.such = 1\n").is_err());
    assert!(RunConfig::parse("preset = galaxy\n").is_err());
}

#[test]
fn transformer_checkpoints_round_trip() {
    let config = RunConfig::parse("preset = toy\nmformer.hidden = 16\nrformer.hidden = 16\nmformer.heads = 2\nrformer.heads = 2\n").unwrap();
    let dir = tempfile::tempdir().unwrap();

    let m = MFormerParams::<f32>::init(&config.mformer_config(), &mut Rng::new(1)).unwrap();
    let path = dir.path().join("m.ckpt");
    mformer_checkpoint(&m, &config, 1).save(&path).unwrap();
    let (cfg, back) = load_mformer::<f32>(&CheckpointContainer::load(&path).unwrap()).unwrap();
    assert_eq!(cfg, config);
    let row = [1usize, 4, 9, 3];
    assert_eq!(m.logits(&[&row], &[Condition::Label(2)]).unwrap(), back.logits(&[&row], &[Condition::Label(2)]).unwrap());

    let r = RFormerParams::<f32>::init(&config.rformer_config(), &mut Rng::new(2)).unwrap();
    let path = dir.path().join("r.ckpt");
    let container = rformer_checkpoint(&r, &config, 2);
    container.save(&path).unwrap();
    let loaded = CheckpointContainer::load(&path).unwrap();
    assert_eq!(loaded.seed("train-residual"), Some(2));
    let (_, back) = load_rformer::<f32>(&loaded).unwrap();
    assert_eq!(back.store.aliases(), r.store.aliases());
    assert!(back.store.aliases().iter().any(|(a, _)| *a == head_name(1)));
    let below = vec![vec![0usize, 5, 7], vec![1, 1, 2]];
    let stacks: [&[Vec<usize>]; 1] = [&below];
    assert_eq!(r.logits(&stacks, 2, &[Condition::Null]).unwrap(), back.logits(&stacks, 2, &[Condition::Null]).unwrap());
}

#[test]
fn cli_rejects_bad_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let bad_cfg = dir.path().join("bad.cfg");
    std::fs::write(&bad_cfg, "preset = toy\ncodec.width = zero\n").unwrap();

    let status = cli().args(["--out", out.to_str().unwrap(), "frobnicate"]).output().unwrap();
    assert!(!status.status.success());
    let status = cli().args(["--config", bad_cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "gen-corpus"]).output().unwrap();
    assert!(!status.status.success());
    let status = cli().args(["--out", out.to_str().unwrap(), "train-masked"]).output().unwrap();
    assert!(!status.status.success(), "training the masked transformer needs a codec checkpoint");
    let status = cli().args(["--out", out.to_str().unwrap(), "inspect-ckpt", dir.path().join("missing.ckpt").to_str().unwrap()]).output().unwrap();
    assert!(!status.status.success());
}

#[test]
fn cli_inspects_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig::preset("toy").unwrap();
    let m = MFormerParams::<f32>::init(&config.mformer_config(), &mut Rng::new(3)).unwrap();
    let path = dir.path().join("m.ckpt");
    mformer_checkpoint(&m, &config, 3).save(&path).unwrap();
    let out = cli().args(["inspect-ckpt", path.to_str().unwrap()]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("train-masked"), "{text}");
}
