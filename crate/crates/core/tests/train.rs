use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scalar_core::backbone::BackboneConfig;
use scalar_core::control::{EncoderConfig, InjectionSet, ProjectionSpec};
use scalar_core::data::{generate_dataset, ConditionSample, Modality};
use scalar_core::model::{Model, ModelConfig};
use scalar_core::numerics::{Array, ParamId};
use scalar_core::train::*;

fn small_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            layers: 2,
            d_model: 32,
            heads: 2,
            ..Default::default()
        },
        encoder: EncoderConfig {
            depth: 4,
            width: 16,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn samples(n: usize) -> Vec<ConditionSample> {
    generate_dataset(n, 11)
}

fn quick(batch: usize) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: batch,
        ..Default::default()
    }
}

/// A fresh head is zero, which blocks every gradient below it; give it
/// weights as pretraining would.
fn pretend_pretrained(model: &mut Model<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let head = model.store.find("bb.head.weight").unwrap();
    let shape = model.store.value(head).shape().to_vec();
    let w = Array::from_fn(shape, |_| rng.random_range(-0.2..0.2f32));
    model.store.set_value(head, w).unwrap();
}

/// Model with control attached, data prepared, trainer ready.
fn setup(cfg: &TrainConfig, data: &[ConditionSample]) -> (Model<f32>, Prepared<f32>, Trainer<f32>) {
    let mut model = Model::new(small_config(), 5).unwrap();
    pretend_pretrained(&mut model);
    model.attach_control(cfg.projection.clone(), cfg.seed).unwrap();
    if cfg.aligned() {
        model.attach_alignment(cfg.seed).unwrap();
    }
    let prepared = prepare(&model, data, &cfg.modalities, cfg.aligned()).unwrap();
    let trainer = Trainer::new(&mut model, cfg.clone()).unwrap();
    (model, prepared, trainer)
}

fn snapshot(model: &Model<f32>, ids: &[ParamId]) -> Vec<Vec<u32>> {
    ids.iter()
        .map(|&id| model.store.value(id).data().iter().map(|x| x.to_bits()).collect())
        .collect()
}

fn steps(model: &mut Model<f32>, data: &Prepared<f32>, trainer: &mut Trainer<f32>, n: usize) -> Vec<LossRecord> {
    (0..n)
        .map(|_| {
            let idx = trainer.batch_indices(data.len(), trainer.steps_taken());
            trainer.train_step(model, data, &idx).unwrap()
        })
        .collect()
}

#[test]
fn uniform_logits_give_log_vocab() {
    let logits = Array::<f64>::zeros([30, 256]);
    let targets: Vec<usize> = (0..30).map(|i| i * 7).collect();
    let ce = ce_loss(&logits, &targets).unwrap();
    assert!((ce - 256f64.ln()).abs() < 1e-12);
}

#[test]
fn confident_correct_logits_approach_zero() {
    let mut logits = Array::<f64>::zeros([4, 8]);
    for i in 0..4 {
        logits.data_mut()[i * 8 + i] = 60.0;
    }
    assert!(ce_loss(&logits, &[0, 1, 2, 3]).unwrap() < 1e-20);
}

#[test]
fn ce_matches_naive_log_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (rows, v) = (13, 17);
    let logits = Array::<f64>::from_fn([rows, v], |_| rng.random_range(-4.0..4.0));
    let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..v)).collect();
    let mut naive = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits.data()[r * v..(r + 1) * v];
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        naive -= (row[t].exp() / z).ln();
    }
    naive /= rows as f64;
    assert!((ce_loss(&logits, &targets).unwrap() - naive).abs() < 1e-6);
}

#[test]
fn target_outside_vocab_rejected() {
    let logits = Array::<f32>::zeros([2, 4]);
    assert!(ce_loss(&logits, &[1, 4]).is_err());
}

#[test]
fn freeze_policy_parse_names_options() {
    assert_eq!("frz-sa".parse::<FreezePolicy>().unwrap(), FreezePolicy::SelfAttention);
    let err = "frz-some".parse::<FreezePolicy>().unwrap_err().to_string();
    for name in ["frz-none", "frz-sa", "frz-all"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn bad_configs_rejected() {
    for cfg in [
        TrainConfig { epochs: 0, ..Default::default() },
        TrainConfig { lr: 0.0, ..Default::default() },
        TrainConfig { lambda: -1.0, ..Default::default() },
        TrainConfig { class_drop: 1.5, ..Default::default() },
        TrainConfig { modalities: vec![], ..Default::default() },
    ] {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
}

#[test]
fn frz_none_trains_backbone_and_control() {
    let mut model = Model::<f32>::new(small_config(), 1).unwrap();
    model.attach_control(ProjectionSpec::default(), 1).unwrap();
    let t = Trainer::new(&mut model, TrainConfig::default()).unwrap();
    let mut want: BTreeSet<_> = model.backbone.param_ids().into_iter().collect();
    want.extend(model.control_param_ids());
    assert_eq!(t.trainable.iter().copied().collect::<BTreeSet<_>>(), want);
}

#[test]
fn frz_all_keeps_backbone_bytes() {
    let data = samples(16);
    let cfg = TrainConfig {
        freeze: FreezePolicy::All,
        ..quick(4)
    };
    let (mut model, prepared, mut trainer) = setup(&cfg, &data);
    let bb = model.backbone.param_ids();
    let ctrl = model.control_param_ids();
    let before = snapshot(&model, &bb);
    let ctrl_before = snapshot(&model, &ctrl);
    steps(&mut model, &prepared, &mut trainer, 100);
    assert_eq!(snapshot(&model, &bb), before);
    assert_ne!(snapshot(&model, &ctrl), ctrl_before);
}

#[test]
fn frz_sa_freezes_only_attention() {
    let data = samples(8);
    let cfg = TrainConfig {
        freeze: FreezePolicy::SelfAttention,
        ..quick(4)
    };
    let (mut model, prepared, mut trainer) = setup(&cfg, &data);
    let attn = model.backbone.attention_param_ids();
    let mlp: Vec<ParamId> = ["bb.l1.mlp.fc1.weight", "bb.l2.mlp.fc2.weight"]
        .iter()
        .map(|n| model.store.find(n).unwrap())
        .collect();
    let (a0, m0) = (snapshot(&model, &attn), snapshot(&model, &mlp));
    steps(&mut model, &prepared, &mut trainer, 2);
    assert_eq!(snapshot(&model, &attn), a0);
    let m1 = snapshot(&model, &mlp);
    assert!(m0.iter().zip(&m1).all(|(a, b)| a != b));
}

#[test]
fn encoder_never_changes() {
    let data = samples(8);
    let (mut model, prepared, mut trainer) = setup(&quick(4), &data);
    let before: Vec<u32> = model
        .encoder
        .params()
        .iter()
        .flat_map(|(_, p)| p.value.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        .collect();
    steps(&mut model, &prepared, &mut trainer, 3);
    let after: Vec<u32> = model
        .encoder
        .params()
        .iter()
        .flat_map(|(_, p)| p.value.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn identical_seeds_replay_identically() {
    let data = samples(24);
    let cfg = TrainConfig {
        modalities: vec![Modality::Canny, Modality::Depth],
        ..quick(8)
    };
    let run = || {
        let (mut m, p, mut t) = setup(&cfg, &data);
        steps(&mut m, &p, &mut t, 5)
    };
    assert_eq!(run(), run());
}

#[test]
fn uni_without_alignment_matches_scalar() {
    let data = samples(24);
    let scalar = TrainConfig {
        modalities: vec![Modality::Canny, Modality::Depth],
        ..quick(8)
    };
    let uni = TrainConfig {
        mode: Mode::Uni,
        lambda: 0.0,
        ..scalar.clone()
    };
    let trace = |cfg: &TrainConfig| {
        let (mut m, p, mut t) = setup(cfg, &data);
        steps(&mut m, &p, &mut t, 4)
    };
    let a = trace(&scalar);
    assert_eq!(a, trace(&uni));
    assert!(a.iter().all(|r| r.align == 0.0 && r.total == r.ce));
}

#[test]
fn total_decomposes_into_ce_and_align() {
    let data = samples(16);
    for lambda in [1.0, 0.3] {
        let cfg = TrainConfig {
            mode: Mode::Uni,
            lambda,
            modalities: vec![Modality::Canny, Modality::Depth],
            ..quick(8)
        };
        let (mut m, p, mut t) = setup(&cfg, &data);
        for r in steps(&mut m, &p, &mut t, 4) {
            assert!(r.align > 0.0);
            assert!((r.total - (r.ce + lambda * r.align)).abs() < 1e-6, "{r:?}");
        }
    }
}

#[test]
fn alignment_head_required_when_lambda_positive() {
    let mut model = Model::<f32>::new(small_config(), 1).unwrap();
    model.attach_control(ProjectionSpec::default(), 1).unwrap();
    let cfg = TrainConfig {
        mode: Mode::Uni,
        ..Default::default()
    };
    assert!(Trainer::new(&mut model, cfg).is_err());
}

#[test]
fn overfits_a_small_set() {
    let data = samples(64);
    let cfg = TrainConfig {
        epochs: 100,
        batch_size: 32,
        class_drop: 0.0,
        ..Default::default()
    };
    let (mut m, p, mut t) = setup(&cfg, &data);
    let trace = steps(&mut m, &p, &mut t, 200);
    assert!(trace.iter().all(|r| r.total.is_finite()));
    let first = trace[0].ce;
    let last = trace[trace.len() - 5..].iter().map(|r| r.ce).sum::<f64>() / 5.0;
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn single_layer_injection_trains() {
    let data = samples(8);
    let cfg = TrainConfig {
        projection: ProjectionSpec {
            injection: InjectionSet::First,
            ..Default::default()
        },
        ..quick(4)
    };
    let (mut m, p, mut t) = setup(&cfg, &data);
    assert!(steps(&mut m, &p, &mut t, 2).iter().all(|r| r.ce.is_finite()));
}

#[test]
fn loss_csv_has_header_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.csv");
    let recs = [LossRecord { step: 1, ce: 2.0, align: 0.5, total: 2.5 }];
    write_loss_csv(&path, &recs).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,ce,align,total");
    assert!(lines[1].starts_with("1,2.0"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn each_epoch_visits_every_sample_once(n in 1usize..80, batch in 1usize..17, epoch in 0u64..4) {
        let cfg = TrainConfig { batch_size: batch, ..Default::default() };
        let mut model = Model::<f32>::new(small_config(), 0).unwrap();
        let t = Trainer::new(&mut model, cfg).unwrap();
        let per = t.steps_per_epoch(n) as u64;
        let mut seen: Vec<usize> = (0..per).flat_map(|s| t.batch_indices(n, epoch * per + s)).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }
}
