use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scalar_core::backbone::{block_causal_mask, Backbone, BackboneConfig, ClassCond};
use scalar_core::numerics::{Array, ParamStore};
use scalar_core::tokenizer::ScaleSchedule;

fn model(seed: u64) -> (Backbone, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bb = Backbone::new(BackboneConfig::default(), &mut store, &mut rng).unwrap();
    // the head starts at zero; give it weights so the logits carry information
    let head = store.find("bb.head.weight").unwrap();
    let shape = store.value(head).shape().to_vec();
    let w = Array::from_fn(shape, |_| rng.random_range(-0.2..0.2f32));
    store.set_value(head, w).unwrap();
    (bb, store)
}

fn random_inputs(rows: usize, dim: usize, seed: u64) -> Array<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array::from_fn([rows, dim], |_| rng.random_range(-1.0..1.0))
}

#[test]
fn cached_steps_match_teacher_forcing() {
    let (bb, store) = model(3);
    let sched = bb.cfg.schedule.clone();
    let t = sched.total_tokens();
    let conds = [ClassCond::Label(2), ClassCond::Null];
    let inputs = random_inputs(2 * (t - 1), 32, 9);
    let seq = bb.build_inputs(&store, &conds, &inputs).unwrap();
    let full = bb.forward_train(&store, &seq, &[]).unwrap();
    let v = bb.cfg.vocab;
    let offsets = sched.offsets();
    let mut cache = bb.new_cache::<f32>(2);
    for k in 0..sched.len() {
        let n = sched.tokens(k);
        let input = (k > 0).then(|| {
            let mut rows = Vec::new();
            for s in 0..2 {
                let start = s * (t - 1) + offsets[k] - 1;
                rows.extend_from_slice(&inputs.data()[start * 32..(start + n) * 32]);
            }
            Array::new([2 * n, 32], rows).unwrap()
        });
        let step = bb
            .forward_step(&store, k, &conds, input.as_ref(), &mut cache, &[])
            .unwrap();
        for s in 0..2 {
            for i in 0..n {
                let a = &step.data()[(s * n + i) * v..(s * n + i + 1) * v];
                let row = s * t + offsets[k] + i;
                let b = &full.data()[row * v..(row + 1) * v];
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 1e-4, "scale {k} sample {s}: {x} vs {y}");
                }
            }
        }
        assert_eq!(cache.len(), offsets[k + 1]);
        for l in 0..bb.layers() {
            assert_eq!(cache.layer_len(l), offsets[k + 1]);
        }
    }
}

#[test]
fn cache_rejects_other_class() {
    let (bb, store) = model(4);
    let mut cache = bb.new_cache::<f32>(1);
    bb.forward_step(&store, 0, &[ClassCond::Label(1)], None, &mut cache, &[])
        .unwrap();
    let input = Array::zeros([4, 32]);
    let err = bb
        .forward_step(&store, 1, &[ClassCond::Label(5)], Some(&input), &mut cache, &[])
        .unwrap_err();
    assert!(err.to_string().contains("class"), "{err}");
    bb.forward_step(&store, 1, &[ClassCond::Label(1)], Some(&input), &mut cache, &[])
        .unwrap();
}

#[test]
fn cache_rejects_skipped_scale() {
    let (bb, store) = model(4);
    let mut cache = bb.new_cache::<f32>(1);
    let input = Array::zeros([4, 32]);
    assert!(bb
        .forward_step(&store, 1, &[ClassCond::Label(1)], Some(&input), &mut cache, &[])
        .is_err());
}

#[test]
fn later_scales_do_not_leak_backwards() {
    let (bb, store) = model(5);
    let t = bb.cfg.positions();
    let offsets = bb.cfg.schedule.offsets();
    let conds = [ClassCond::Label(0)];
    let a = random_inputs(t - 1, 32, 1);
    let mut b = a.clone();
    // perturb only the inputs of the third scale
    for r in offsets[2] - 1..offsets[3] - 1 {
        for c in 0..32 {
            b.data_mut()[r * 32 + c] += 0.5;
        }
    }
    let la = bb.forward_train(&store, &bb.build_inputs(&store, &conds, &a).unwrap(), &[]).unwrap();
    let lb = bb.forward_train(&store, &bb.build_inputs(&store, &conds, &b).unwrap(), &[]).unwrap();
    let v = bb.cfg.vocab;
    assert_eq!(la.data()[..offsets[2] * v], lb.data()[..offsets[2] * v]);
    assert_ne!(la.data()[offsets[2] * v..], lb.data()[offsets[2] * v..]);
}

#[test]
fn class_only_touches_first_scale() {
    let (bb, store) = model(6);
    let t = bb.cfg.positions();
    let inputs = random_inputs(t - 1, 32, 2);
    let e0 = bb.build_inputs(&store, &[ClassCond::Label(0)], &inputs).unwrap();
    let e1 = bb.build_inputs(&store, &[ClassCond::Label(7)], &inputs).unwrap();
    let d = bb.cfg.d_model;
    for p in 0..t {
        let r0 = &e0.embeddings.data()[p * d..(p + 1) * d];
        let r1 = &e1.embeddings.data()[p * d..(p + 1) * d];
        if e0.scale_index[p] == 0 {
            assert_ne!(r0, r1);
        } else {
            assert_eq!(r0, r1);
        }
    }
}

#[test]
fn zero_latents_embed_to_bias_and_position() {
    let (bb, store) = model(7);
    let t = bb.cfg.positions();
    let d = bb.cfg.d_model;
    let seq = bb
        .build_inputs(&store, &[ClassCond::Label(3)], &Array::zeros([t - 1, 32]))
        .unwrap();
    let bias = store.value(store.find("bb.word.bias").unwrap());
    let pos = store.value(store.find("bb.pos").unwrap());
    let level = store.value(store.find("bb.level").unwrap());
    for p in 1..t {
        let s = seq.scale_index[p];
        for c in 0..d {
            let want = bias.data()[c] + pos.data()[p * d + c] + level.data()[s * d + c];
            assert!((seq.embeddings.data()[p * d + c] - want).abs() < 1e-6);
        }
    }
}

#[test]
fn teacher_forced_loss_near_uniform_at_init() {
    let mut store = ParamStore::<f32>::new();
    let bb = Backbone::new(BackboneConfig::default(), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let t = bb.cfg.positions();
    let inputs = random_inputs(2 * (t - 1), 32, 3);
    let mut g = scalar_core::numerics::Graph::new();
    let x = bb
        .embed(&mut g, &store, &[ClassCond::Label(1), ClassCond::Label(4)], &inputs)
        .unwrap();
    let logits = bb.forward(&mut g, &store, x, 2, &[]).unwrap();
    let targets: Vec<usize> = (0..2 * t).map(|i| (i * 37) % 256).collect();
    let ce = g.cross_entropy(logits, targets).unwrap();
    let ce = g.value(ce).data()[0] as f64;
    assert!((ce - 256f64.ln()).abs() < 0.05 * 256f64.ln(), "ce {ce}");
}

proptest! {
    #[test]
    fn mask_admits_exactly_earlier_and_same_scales(sides in proptest::collection::vec(1usize..4, 1..4)) {
        let mut sides = sides;
        sides.sort();
        sides.insert(0, 1);
        let sched = ScaleSchedule::square(&sides).unwrap();
        let m = block_causal_mask(&sched);
        let t = sched.total_tokens();
        let scale = sched.scale_of_positions();
        let offsets = sched.offsets();
        for q in 0..t {
            let row = &m[q * t..(q + 1) * t];
            prop_assert_eq!(row.iter().filter(|&&x| x).count(), offsets[scale[q] + 1]);
            for k in 0..t {
                prop_assert_eq!(row[k], scale[k] <= scale[q]);
            }
        }
    }
}
