use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scalar_core::numerics::{AdamWConfig, Array, Graph};
use scalar_core::tokenizer::quantize::{quantize_residual, reconstruct};
use scalar_core::tokenizer::{
    stack_images, straight_through, ScaleSchedule, TokenMap, Tokenizer, TokenizerConfig,
    TokenizerTrainer,
};

fn tok(seed: u64) -> Tokenizer<f64> {
    Tokenizer::new(TokenizerConfig::default(), seed).unwrap()
}

fn random_images(n: usize, seed: u64) -> Array<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array::from_fn([n, 32, 32, 3], |_| rng.random_range(0.0..1.0))
}

fn brute_vq(latent: &[f64], codebook: &[f64], dim: usize) -> Vec<usize> {
    latent
        .chunks(dim)
        .map(|v| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, row) in codebook.chunks(dim).enumerate() {
                let d: f64 = row.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[test]
fn single_full_scale_is_plain_vq() {
    let t = tok(1);
    let full = ScaleSchedule::square(&[4]).unwrap();
    let imgs = random_images(6, 2);
    let f = t.encode_latent(&imgs).unwrap();
    let maps = t.quantize_latents(&f, &full).unwrap();
    let cb: Vec<f64> = t.store.value(t.codebook).data().to_vec();
    for (b, m) in maps.iter().enumerate() {
        assert_eq!(m.len(), 1);
        let lat = &f.data()[b * 512..(b + 1) * 512];
        assert_eq!(m[0].indices, brute_vq(lat, &cb, 32));
    }
}

#[test]
fn grid_of_code_three_maps_to_threes() {
    let t = tok(3);
    let cb: Vec<f64> = t.store.value(t.codebook).data().to_vec();
    let code3 = &cb[3 * 32..4 * 32];
    let latent: Vec<f64> = (0..16).flat_map(|_| code3.iter().copied()).collect();
    let full = ScaleSchedule::square(&[4]).unwrap();
    let maps = quantize_residual(&latent, (4, 4), 32, &cb, &full, true).unwrap();
    assert_eq!(maps[0].indices, vec![3; 16]);
}

#[test]
fn prefix_error_monotone_on_random_images() {
    let t = tok(4);
    let imgs = random_images(50, 5);
    let f = t.encode_latent(&imgs).unwrap();
    for sched in [ScaleSchedule::default(), ScaleSchedule::square(&[1, 2, 4]).unwrap()] {
        let maps = t.quantize_latents(&f, &sched).unwrap();
        for (b, m) in maps.iter().enumerate() {
            let errs = t.prefix_errors(&f.data()[b * 512..(b + 1) * 512], m).unwrap();
            for w in errs.windows(2) {
                assert!(w[1] <= w[0], "{errs:?}");
            }
        }
    }
}

#[test]
fn wrong_final_scale_rejected() {
    let t = tok(0);
    let imgs = random_images(1, 0);
    let bad = ScaleSchedule::square(&[1, 2, 3]).unwrap();
    assert!(t.encode_batch(&imgs, &bad).is_err());
}

#[test]
fn zero_maps_decode_zero_latent() {
    let t = tok(6);
    let sched = ScaleSchedule::default();
    let maps: Vec<TokenMap> = sched.scales().iter().map(|&(h, w)| TokenMap::filled(h, w, 0)).collect();
    let img = t.decode_multiscale(&maps, &sched).unwrap();
    let direct = t.decode_latent(&Array::zeros([1, 4, 4, 32])).unwrap();
    assert_eq!(img.data(), direct.data());
}

#[test]
fn out_of_range_index_rejected() {
    let t = tok(6);
    let sched = ScaleSchedule::default();
    let mut maps: Vec<TokenMap> = sched.scales().iter().map(|&(h, w)| TokenMap::filled(h, w, 1)).collect();
    maps[2].indices[4] = 256;
    assert!(t.decode_multiscale(&maps, &sched).is_err());
}

#[test]
fn decode_is_deterministic() {
    let t = Tokenizer::<f32>::new(TokenizerConfig::default(), 7).unwrap();
    let sched = ScaleSchedule::default();
    let maps: Vec<TokenMap> = sched
        .scales()
        .iter()
        .enumerate()
        .map(|(k, &(h, w))| TokenMap::filled(h, w, 10 + k))
        .collect();
    let a = t.decode_multiscale(&maps, &sched).unwrap();
    let b = t.decode_multiscale(&maps, &sched).unwrap();
    assert_eq!(
        a.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn codebook_is_shared_across_scales() {
    let sched = ScaleSchedule::default();
    for k in 0..sched.len() {
        let mut t = tok(8);
        let maps: Vec<TokenMap> = sched
            .scales()
            .iter()
            .enumerate()
            .map(|(j, &(h, w))| TokenMap::filled(h, w, if j == k { 42 } else { 0 }))
            .collect();
        let before = t.decode_multiscale(&maps, &sched).unwrap();
        t.store.value_mut(t.codebook).data_mut()[42 * 32] += 1.0;
        let after = t.decode_multiscale(&maps, &sched).unwrap();
        assert!(before.max_abs_diff(&after) > 0.0, "scale {k} ignores the codebook edit");
    }
}

#[test]
fn zero_network_black_images_give_zero_loss() {
    let mut t = tok(9);
    t.cfg.commit_weight = 0.0;
    let ids: Vec<_> = t.store.ids().collect();
    for id in ids {
        t.store.value_mut(id).data_mut().fill(0.0);
    }
    let l = t.losses(&Array::zeros([2, 32, 32, 3]), &ScaleSchedule::default()).unwrap();
    assert_eq!(l.total, 0.0);
}

#[test]
fn straight_through_matches_identity_gradient() {
    let t = tok(10);
    let sched = ScaleSchedule::default();
    let imgs = random_images(2, 11);
    let f = t.encode_latent(&imgs).unwrap();
    let maps = t.quantize_latents(&f, &sched).unwrap();
    let mut fhat = Vec::new();
    for m in &maps {
        fhat.extend(t.latent_from_maps(m, &sched, m.len()).unwrap().into_data());
    }
    let fhat = Array::new([2, 4, 4, 32], fhat).unwrap();

    let mut g = Graph::new();
    let fv = g.input(f.clone());
    let z = straight_through(&mut g, fv, &fhat).unwrap();
    let recon = t.decode_graph(&mut g, z).unwrap();
    let target = g.constant(imgs.clone());
    let loss = g.mse(recon, target).unwrap();
    let st = g.backward(loss).unwrap().wrt(fv).unwrap().clone();

    let mut g = Graph::new();
    let zv = g.input(fhat.clone());
    let recon = t.decode_graph(&mut g, zv).unwrap();
    let target = g.constant(imgs);
    let loss = g.mse(recon, target).unwrap();
    let id = g.backward(loss).unwrap().wrt(zv).unwrap().clone();
    assert!(st.max_abs_diff(&id) < 1e-12);
}

#[test]
fn codebook_usage_spreads_after_training() {
    let data = scalar_core::data::generate_dataset(64, 12);
    let imgs: Vec<Vec<f32>> = data.iter().map(|s| s.image.to_rgb_unit()).collect();
    let sched = ScaleSchedule::default();
    let mut t = Tokenizer::<f32>::new(TokenizerConfig::default(), 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    t.init_codebook(&stack_images(&imgs[..16], 32).unwrap(), &sched, &mut rng).unwrap();
    let mut tr = TokenizerTrainer::new(AdamWConfig::default(), 12, 256);
    let mut last = Vec::new();
    for step in 0..100 {
        let i = (step * 8) % 64;
        let (_, maps) = tr.step(&mut t, &stack_images(&imgs[i..i + 8], 32).unwrap(), &sched).unwrap();
        last = maps;
    }
    let mut used: Vec<usize> = last.iter().flatten().flat_map(|m| m.indices.clone()).collect();
    used.sort_unstable();
    used.dedup();
    assert!(used.len() > 1, "{used:?}");
}

proptest! {
    #[test]
    fn prefix_error_monotone_any_latent(
        seed in any::<u64>(),
        scale in 0.01f64..10.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 8;
        let mut cb: Vec<f64> = (0..32 * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        cb[..dim].fill(0.0);
        let latent: Vec<f64> = (0..16 * dim).map(|_| rng.random_range(-scale..scale)).collect();
        let sched = ScaleSchedule::default();
        let maps = quantize_residual(&latent, (4, 4), dim, &cb, &sched, true).unwrap();
        let mut prev = f64::INFINITY;
        for k in 0..=maps.len() {
            let rec = reconstruct(&maps, k, (4, 4), dim, &cb).unwrap();
            let err: f64 = rec.iter().zip(&latent).map(|(a, b)| (a - b).powi(2)).sum();
            prop_assert!(err <= prev);
            prev = err;
        }
        for m in &maps {
            prop_assert!(m.indices.iter().all(|&i| i < 32));
        }
    }

    #[test]
    fn encode_is_deterministic(seed in 0u64..1000) {
        let t = Tokenizer::<f32>::new(TokenizerConfig::default(), 13).unwrap();
        let imgs: Array<f32> = random_images(1, seed).cast();
        let sched = ScaleSchedule::default();
        prop_assert_eq!(t.encode_batch(&imgs, &sched).unwrap(), t.encode_batch(&imgs, &sched).unwrap());
    }
}
