use pmss::backbone::{build_toy_cnn, build_toy_vit, grid_to_tokens, pretrain_source, tokens_to_grid, Backbone, BackboneConfig};
use pmss::data::{generate, SynthSpec};
use pmss::framework::PretrainConfig;
use pmss::numerics::Tape;
use pmss::{Error, Tensor};

fn image(n: usize, size: usize, salt: u64) -> Tensor {
    Tensor::from_fn(&[n, 3, size, size], |i| (((i as u64 * 2654435761 + salt) % 1000) as f64) / 1000.0 - 0.5)
}

fn stage_outputs(bb: &Backbone, x: Tensor) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let mut h = tape.constant(x);
    let mut outs = Vec::new();
    for i in 0..=bb.num_stages() {
        h = bb.run_stage(&mut tape, i, h).unwrap();
        outs.push(tape.value(h).clone());
    }
    outs
}

#[test]
fn default_cnn_stage_shapes() {
    let bb = BackboneConfig::default().build().unwrap();
    let outs = stage_outputs(&bb, image(1, 64, 0));
    let shapes: Vec<_> = outs[1..].iter().map(|t| t.shape().to_vec()).collect();
    assert_eq!(shapes, vec![vec![1, 32, 32, 32], vec![1, 64, 16, 16], vec![1, 128, 8, 8], vec![1, 256, 4, 4]]);
    for i in 1..=4 {
        assert_eq!(bb.extent_at(i, 64), outs[i].shape()[2]);
        assert_eq!(bb.channels_at(i), outs[i].shape()[1]);
    }
}

#[test]
fn cnn_rejects_zero_depth_and_channels() {
    assert!(matches!(build_toy_cnn(&[8, 16], &[2, 0], 0), Err(Error::Config { .. })));
    assert!(matches!(build_toy_cnn(&[8, 0], &[2, 2], 0), Err(Error::Config { .. })));
    assert!(build_toy_cnn(&[8], &[2, 2], 0).is_err());
}

#[test]
fn same_seed_same_weights() {
    let a = build_toy_cnn(&[8, 16], &[1, 1], 42).unwrap();
    let b = build_toy_cnn(&[8, 16], &[1, 1], 42).unwrap();
    let c = build_toy_cnn(&[8, 16], &[1, 1], 43).unwrap();
    assert_eq!(a.sha256().unwrap(), b.sha256().unwrap());
    assert_ne!(a.sha256().unwrap(), c.sha256().unwrap());
}

#[test]
fn stage_partition_composes_to_forward() {
    for cfg in [BackboneConfig::default(), BackboneConfig::vit_default()] {
        let bb = cfg.build().unwrap();
        let x = image(2, 64, 3);
        let staged = stage_outputs(&bb, x.clone()).pop().unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = bb.forward(&mut tape, xv).unwrap();
        assert!(tape.value(y).bitwise_eq(&staged));
        // and a second application is bitwise repeatable
        let again = stage_outputs(&bb, image(2, 64, 3)).pop().unwrap();
        assert!(again.bitwise_eq(&staged));
    }
}

#[test]
fn strided_stage_halves_extent() {
    let bb = build_toy_cnn(&[4, 8], &[1, 1], 0).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[1, 4, 16, 16]));
    let y = bb.run_stage(&mut tape, 2, x).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 8, 8, 8]);
    let bad = tape.constant(Tensor::ones(&[1, 5, 16, 16]));
    assert!(bb.run_stage(&mut tape, 1, bad).is_err());
    assert!(bb.run_stage(&mut tape, 3, x).is_err());
}

#[test]
fn frozen_stages_record_no_gradients() {
    let mut bb = build_toy_cnn(&[4, 8], &[1, 1], 0).unwrap();
    bb.freeze();
    let mut tape = Tape::new();
    let x = tape.leaf(image(1, 16, 0), true);
    let y = bb.forward(&mut tape, x).unwrap();
    let loss = tape.sum(y);
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(x).is_some());
    assert!(grads.params().all(|(_, g)| g.is_none()));
}

#[test]
fn vit_partition_rules() {
    let bb = build_toy_vit(16, 12, 8, 3, 32, 0).unwrap();
    assert_eq!(bb.num_stages(), 3);
    assert!(bb.stages.iter().all(|s| s.units.len() == 4));
    assert!(matches!(build_toy_vit(16, 12, 8, 5, 32, 0), Err(Error::Config { .. })));
    let outs = stage_outputs(&bb, image(1, 32, 1));
    assert!(outs.iter().all(|t| t.shape() == [1, 16, 4, 4]));
}

#[test]
fn token_grid_round_trip() {
    let tokens = Tensor::from_fn(&[2, 12, 5], |i| i as f64);
    let grid = tokens_to_grid(&tokens, 3, 4).unwrap();
    assert_eq!(grid.shape(), &[2, 5, 3, 4]);
    // token 7 (row 1, col 3), channel 2 of batch 1
    assert_eq!(grid.data()[((5 + 2) * 3 + 1) * 4 + 3], tokens.data()[(12 + 7) * 5 + 2]);
    assert!(grid_to_tokens(&grid).unwrap().bitwise_eq(&tokens));
    assert!(tokens_to_grid(&tokens, 3, 3).is_err());
}

#[test]
fn save_load_keeps_weights_flag_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bb.pmss");
    let mut bb = build_toy_cnn(&[4, 8], &[1, 1], 5).unwrap();
    bb.freeze();
    bb.provenance = "unit-test".into();
    bb.save(&path).unwrap();
    assert!(path.with_extension("json").exists());
    let back = Backbone::load(&path).unwrap();
    assert!(back.frozen);
    assert_eq!(back.provenance, "unit-test");
    assert_eq!(back.sha256().unwrap(), bb.sha256().unwrap());
}

#[test]
fn pretrain_zero_steps_only_freezes() {
    let mut bb = build_toy_cnn(&[4, 8], &[1, 1], 0).unwrap();
    let before = bb.sha256().unwrap();
    let source = generate(&SynthSpec { size: 16, train: 4, val: 2, ..SynthSpec::source() }).unwrap();
    let cfg = PretrainConfig { steps: 0, ..PretrainConfig::default() };
    let report = pretrain_source(&mut bb, &source, &cfg).unwrap();
    assert_eq!(bb.sha256().unwrap(), before);
    assert!(bb.frozen);
    assert!(bb.params().iter().all(|p| !p.trainable));
    assert!(bb.provenance.contains("steps=0"));
    assert_eq!(report.initial_miou, report.final_miou);
    assert!(matches!(pretrain_source(&mut bb, &source, &cfg), Err(Error::Frozen)));
}

#[test]
fn pretrain_changes_weights() {
    let mut bb = build_toy_cnn(&[4, 8], &[1, 1], 0).unwrap();
    let before = bb.sha256().unwrap();
    let source = generate(&SynthSpec { size: 16, train: 4, val: 2, ..SynthSpec::source() }).unwrap();
    let cfg = PretrainConfig { steps: 3, batch: 2, ..PretrainConfig::default() };
    let report = pretrain_source(&mut bb, &source, &cfg).unwrap();
    assert_eq!(report.losses.len(), 3);
    assert_ne!(bb.sha256().unwrap(), before);
}
