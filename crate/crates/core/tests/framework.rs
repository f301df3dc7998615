use std::collections::HashMap;

use pmss::backbone::{Backbone, BackboneConfig};
use pmss::data::{generate, Dataset, LabelMap, SynthSpec};
use pmss::framework::{
    build_pipeline, total_loss, train, Group, LossSpec, RunConfig, StagePipeline, Strategy, TrainConfig,
};
use pmss::numerics::{seeded, Tape};
use pmss::{Error, Tensor};
use rand::Rng;

fn tiny_config(strategy: Strategy) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.backbone = BackboneConfig::Cnn { channels: vec![8, 8, 16, 16], depths: vec![1; 4], seed: 3 };
    cfg.spm.channels = 8;
    cfg.head.channels = 8;
    cfg.modules.channels = 8;
    cfg.strategy = strategy;
    cfg.data = SynthSpec { size: 16, train: 6, val: 2, ..SynthSpec::default() };
    cfg.train = TrainConfig { steps: 2, batch: 2, lr: 0.01, ..TrainConfig::default() };
    cfg.pretrain = None;
    cfg
}

fn setup(cfg: &RunConfig) -> (Dataset, StagePipeline) {
    let data = generate(&cfg.data).unwrap();
    let mut bb = cfg.backbone.build().unwrap();
    bb.freeze();
    let pipe = build_pipeline(cfg, bb, &data).unwrap();
    (data, pipe)
}

fn logits(pipe: &StagePipeline, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = pipe.forward(&mut tape, xv).unwrap();
    tape.value(out.logits).clone()
}

fn snapshot(pipe: &StagePipeline) -> HashMap<String, Tensor> {
    pipe.grouped_params().into_iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect()
}

#[test]
fn head_pipeline_is_backbone_then_head() {
    let cfg = tiny_config(Strategy::Head);
    let (data, pipe) = setup(&cfg);
    let (x, _) = data.batch(&[0, 1]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let f = pipe.backbone.forward(&mut tape, xv).unwrap();
    let manual = pipe.head.forward(&mut tape, f, 16, 16).unwrap();
    let out = logits(&pipe, &x);
    assert_eq!(out.shape(), &[2, 5, 16, 16]);
    assert!(out.bitwise_eq(tape.value(manual)));
}

#[test]
fn fresh_prompted_pipeline_equals_head_tuning() {
    let mut cfg = tiny_config(Strategy::PromptMatched);
    cfg.spm.stages = vec![1, 2, 3, 4, 5];
    cfg.spm.iterations = 2;
    let (data, prompted) = setup(&cfg);
    let (_, head) = setup(&tiny_config(Strategy::Head));
    let (x, _) = data.batch(&[0, 1, 2]).unwrap();
    assert!(logits(&prompted, &x).bitwise_eq(&logits(&head, &x)));

    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let out = prompted.forward(&mut tape, xv).unwrap();
    assert_eq!(out.interim.iter().map(|(_, m)| m.len()).sum::<usize>(), 5 * 2);
}

#[test]
fn fresh_side_and_adapter_pipelines_equal_head_tuning() {
    let (data, head) = setup(&tiny_config(Strategy::Head));
    let (x, _) = data.batch(&[0, 1]).unwrap();
    for s in [Strategy::Side, Strategy::Adapter] {
        let (_, pipe) = setup(&tiny_config(s));
        assert!(logits(&pipe, &x).bitwise_eq(&logits(&head, &x)), "{s}");
    }
}

#[test]
fn shape_errors_name_the_insertion_point() {
    let cfg = tiny_config(Strategy::PromptMatched);
    let (_, mut pipe) = setup(&cfg);
    // swap in a matcher built for the wrong width at point 4
    let wrong = pipe.spms[0].clone().unwrap();
    pipe.spms[3] = Some(wrong);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 16, 16]));
    let err = pipe.forward(&mut tape, x).unwrap_err().to_string();
    assert!(err.contains("insertion point 4"), "{err}");
}

fn loss_fixture() -> (Tape, pmss::numerics::Var, Vec<(usize, Vec<pmss::numerics::Var>)>, LabelMap) {
    let mut rng = seeded(1);
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::from_fn(&[1, 3, 4, 4], |_| rng.gen_range(-1.0..1.0)));
    let map = tape.constant(Tensor::full(&[1, 3, 2, 2], 1.0 / 3.0));
    let map2 = tape.constant(Tensor::from_fn(&[1, 3, 2, 2], |i| [0.2, 0.3, 0.5][i / 4]));
    let labels = LabelMap::new(1, 4, 4, 3, None, (0..16).map(|i| (i % 3) as u32).collect()).unwrap();
    (tape, logits, vec![(4, vec![map]), (2, vec![map2])], labels)
}

#[test]
fn loss_formula_instances() {
    let (mut tape, logits, interim, labels) = loss_fixture();
    let plain = tape.cross_entropy_logits(logits, &labels.labels, None).unwrap();
    let plain = tape.value(plain).item();

    let off = LossSpec::default().without_interim();
    let l0 = total_loss(&mut tape, logits, &interim, &labels, &off).unwrap();
    assert_eq!(tape.value(l0).item(), plain);

    // one matcher at point 4, R = 1, uniform map: CE = ln 3
    let l = total_loss(&mut tape, logits, &interim[..1], &labels, &LossSpec::default()).unwrap();
    assert!((tape.value(l).item() - (plain + 0.3 * 3f64.ln())).abs() < 1e-12);

    // R = 2 with the same per-iteration map keeps the point's contribution
    let doubled = vec![(4, vec![interim[0].1[0], interim[0].1[0]])];
    let l2 = total_loss(&mut tape, logits, &doubled, &labels, &LossSpec::default()).unwrap();
    assert!((tape.value(l2).item() - tape.value(l).item()).abs() < 1e-12);

    let short = LossSpec { weights: vec![0.1, 0.2], ..LossSpec::default() };
    assert!(matches!(total_loss(&mut tape, logits, &interim, &labels, &short), Err(Error::Config { .. })));
}

#[test]
fn loss_is_linear_in_each_weight() {
    let (mut tape, logits, interim, labels) = loss_fixture();
    let at = |tape: &mut Tape, a: f64| {
        let mut spec = LossSpec::default();
        spec.weights[1] = a;
        let l = total_loss(tape, logits, &interim, &labels, &spec).unwrap();
        tape.value(l).item()
    };
    let (l0, l1, l2) = (at(&mut tape, 0.0), at(&mut tape, 0.5), at(&mut tape, 1.0));
    assert!(((l2 - l0) - 2.0 * (l1 - l0)).abs() < 1e-12);
    assert!(l1 > l0);
}

fn brute_force(pipe: &StagePipeline) -> (usize, usize, usize) {
    let (mut b, mut p, mut h) = (0, 0, 0);
    for (g, t) in pipe.grouped_params() {
        if !t.trainable {
            continue;
        }
        let n: usize = t.value.shape().iter().product();
        match g {
            Group::Backbone => b += n,
            Group::Prompt => p += n,
            Group::Head => h += n,
        }
    }
    (b, p, h)
}

#[test]
fn registries_match_strategy_definitions() {
    for s in Strategy::ALL {
        let (_, pipe) = setup(&tiny_config(s));
        let counts = pipe.count_params();
        assert_eq!((counts.backbone, counts.prompt, counts.head), brute_force(&pipe), "{s}");
        let head_total: usize = pipe.head.params().iter().map(|p| p.numel()).sum();
        assert_eq!(counts.head, head_total);
        let backbone_names: Vec<&str> = pipe.backbone.params().iter().map(|p| p.name.as_str()).collect();
        let reg = pipe.registry();
        match s {
            Strategy::Head => assert_eq!(counts.total(), head_total),
            Strategy::Bias => {
                assert!(counts.backbone > 0);
                assert!(reg.iter().all(|n| n.ends_with(".bias") || n.starts_with("head.")));
            }
            Strategy::PromptMatched | Strategy::Side | Strategy::Adapter => {
                assert_eq!(counts.backbone, 0);
                assert!(counts.prompt > 0);
                assert!(reg.iter().all(|n| !backbone_names.contains(n)));
            }
            Strategy::Full | Strategy::Scratch => {
                assert_eq!(counts.backbone, pipe.backbone.params().iter().map(|p| p.numel()).sum::<usize>());
            }
        }
    }
}

#[test]
fn prompt_budget_grows_with_stages_and_ignores_recurrence() {
    let mut last = 0;
    for j in 1..=5 {
        let mut cfg = tiny_config(Strategy::PromptMatched);
        cfg.spm.stages = (1..=j).collect();
        let prompt = setup(&cfg).1.count_params().prompt;
        assert!(prompt > last);
        last = prompt;
        for r in 2..=3 {
            cfg.spm.iterations = r;
            assert_eq!(setup(&cfg).1.count_params().prompt, prompt);
        }
    }
}

#[test]
fn zero_steps_keep_initialization() {
    let cfg = tiny_config(Strategy::PromptMatched);
    let (data, mut pipe) = setup(&cfg);
    let before = snapshot(&pipe);
    let tc = TrainConfig { steps: 0, ..cfg.train.clone() };
    let report = train(&mut pipe, &data, &[0, 1, 2], &[], &cfg.loss, &tc, |_| Ok(())).unwrap();
    assert!(report.records.is_empty());
    for (name, t) in snapshot(&pipe) {
        assert!(t.bitwise_eq(&before[&name]), "{name}");
    }
}

#[test]
fn only_registry_tensors_change() {
    for s in Strategy::ALL {
        let cfg = tiny_config(s);
        let (data, mut pipe) = setup(&cfg);
        let before = snapshot(&pipe);
        let bb_hash = pipe.backbone.sha256().unwrap();
        let reg: Vec<String> = pipe.registry().into_iter().map(String::from).collect();
        let tc = TrainConfig { steps: 10, ..cfg.train.clone() };
        let train_idx: Vec<usize> = data.train_indices().collect();
        train(&mut pipe, &data, &train_idx, &[], &cfg.loss, &tc, |_| Ok(())).unwrap();
        let mut changed = 0;
        for (name, t) in snapshot(&pipe) {
            if !t.bitwise_eq(&before[&name]) {
                assert!(reg.contains(&name), "{s}: `{name}` changed outside the registry");
                changed += 1;
            }
        }
        assert!(changed > 0, "{s}");
        if s.freezes_backbone() {
            assert_eq!(pipe.backbone.sha256().unwrap(), bb_hash, "{s}");
        }
    }
}

#[test]
fn training_is_deterministic_and_streams_records() {
    let cfg = tiny_config(Strategy::PromptMatched);
    let run = || {
        let (data, mut pipe) = setup(&cfg);
        let mut streamed = Vec::new();
        let idx: Vec<usize> = data.train_indices().collect();
        let val: Vec<usize> = data.val_indices().collect();
        let tc = TrainConfig { steps: 4, eval_every: 2, ..cfg.train.clone() };
        let report = train(&mut pipe, &data, &idx, &val, &cfg.loss, &tc, |r| {
            streamed.push(r.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(streamed, report.records);
        assert!(report.records[1].miou.is_some() && report.records[0].miou.is_none());
        (report, pipe.encode().unwrap())
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
}

#[test]
fn cached_trunk_features_train_bitwise_identically() {
    for bb in [BackboneConfig::Cnn { channels: vec![8, 8, 16, 16], depths: vec![1; 4], seed: 3 }, BackboneConfig::vit_default()] {
        let mut cfg = tiny_config(Strategy::Head);
        if matches!(bb, BackboneConfig::Vit { .. }) {
            cfg.data.size = 64;
        }
        cfg.backbone = bb;
        let run = |cache: bool| {
            let (data, mut pipe) = setup(&cfg);
            let idx: Vec<usize> = data.train_indices().collect();
            let val: Vec<usize> = data.val_indices().collect();
            let tc = TrainConfig { steps: 5, batch: 4, cache_features: cache, ..cfg.train.clone() };
            let report = train(&mut pipe, &data, &idx, &val, &cfg.loss, &tc, |_| Ok(())).unwrap();
            (report, pipe.encode().unwrap())
        };
        assert_eq!(run(true), run(false));
    }
}

#[test]
fn non_finite_loss_aborts_with_diagnostic() {
    let cfg = tiny_config(Strategy::Head);
    let (data, mut pipe) = setup(&cfg);
    pipe.head.conv2.bias.as_mut().unwrap().value.data_mut()[0] = f64::NAN;
    let err = train(&mut pipe, &data, &[0, 1], &[], &cfg.loss, &cfg.train, |_| Ok(())).unwrap_err();
    match err {
        Error::NonFinite(msg) => assert!(msg.contains("step 0") && msg.contains("head.conv2.bias"), "{msg}"),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn checkpoint_round_trip_rebuilds_pipeline() {
    let cfg = tiny_config(Strategy::PromptMatched);
    let (data, mut pipe) = setup(&cfg);
    train(&mut pipe, &data, &[0, 1], &[], &cfg.loss, &cfg.train, |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.pmss");
    pipe.save(&path, &cfg).unwrap();
    let (back, back_cfg) = StagePipeline::load(&path).unwrap();
    assert_eq!(back_cfg, cfg);
    assert_eq!(back.encode().unwrap(), pipe.encode().unwrap());
    let (x, _) = data.batch(&[3]).unwrap();
    assert!(logits(&back, &x).bitwise_eq(&logits(&pipe, &x)));
}

#[test]
fn config_validation_names_fields() {
    let mut cfg = tiny_config(Strategy::PromptMatched);
    cfg.spm.iterations = 0;
    match cfg.validate() {
        Err(Error::Config { field, .. }) => assert_eq!(field, "spm.R"),
        other => panic!("{other:?}"),
    }
    let mut cfg = tiny_config(Strategy::PromptMatched);
    cfg.spm.stages = vec![6];
    assert!(cfg.validate().is_err());
    assert!("nope".parse::<Strategy>().is_err());
    assert_eq!("prompt_matched".parse::<Strategy>().unwrap(), Strategy::PromptMatched);
    let text = serde_json::to_string(&tiny_config(Strategy::Side)).unwrap();
    assert_eq!(RunConfig::from_json(&text).unwrap(), tiny_config(Strategy::Side));
    assert!(RunConfig::from_json(r#"{"strategy":"bogus"}"#).is_err());
    assert!(RunConfig::from_json(r#"{"spm":{"R":0}}"#).is_err());
}

#[test]
fn scratch_rerandomizes_a_pretrained_backbone() {
    let cfg = tiny_config(Strategy::Scratch);
    let data = generate(&cfg.data).unwrap();
    let mut bb: Backbone = cfg.backbone.build().unwrap();
    let fresh = bb.sha256().unwrap();
    for p in bb.params_mut() {
        p.value = p.value.map(|v| v * 0.5);
    }
    bb.freeze();
    let pipe = build_pipeline(&cfg, bb, &data).unwrap();
    assert_eq!(pipe.backbone.sha256().unwrap(), fresh);
    assert!(!pipe.backbone.frozen);
}
