use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scalar_core::backbone::BackboneConfig;
use scalar_core::control::EncoderConfig;
use scalar_core::data::{generate_dataset, Image, Modality};
use scalar_core::metrics::*;
use scalar_core::model::{Model, ModelConfig};

fn gray(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::new(w, h, 1, (0..w * h).map(|_| rng.random()).collect()).unwrap()
}

fn binary(n: usize, rng: &mut ChaCha8Rng, p: f64) -> Image {
    Image::new(n, n, 1, (0..n * n).map(|_| if rng.random_bool(p) { 255 } else { 0 }).collect()).unwrap()
}

fn naive_f1(a: &Image, b: &Image) -> f64 {
    let mut tp = 0.0;
    let mut np = 0.0;
    let mut nr = 0.0;
    for i in 0..a.data.len() {
        let p = a.data[i] == 255;
        let r = b.data[i] == 255;
        if p {
            np += 1.0;
        }
        if r {
            nr += 1.0;
        }
        if p && r {
            tp += 1.0;
        }
    }
    if np == 0.0 && nr == 0.0 {
        return 1.0;
    }
    if np == 0.0 || nr == 0.0 {
        return 0.0;
    }
    let (prec, rec) = (tp / np, tp / nr);
    if prec + rec == 0.0 {
        0.0
    } else {
        2.0 * prec * rec / (prec + rec)
    }
}

/// Direct evaluation: unnormalized exponential weights, explicit variances.
fn naive_ssim(a: &Image, b: &Image) -> f64 {
    let (w, h) = (a.width, a.height);
    let mut weights = [[0.0f64; 11]; 11];
    let mut norm = 0.0;
    for (i, row) in weights.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            norm += *v;
        }
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let mut sum = 0.0;
    let mut count = 0.0;
    for y in 0..=h - 11 {
        for x in 0..=w - 11 {
            let px = |img: &Image, i: usize, j: usize| img.data[(y + i) * w + x + j] as f64;
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    ma += weights[i][j] / norm * px(a, i, j);
                    mb += weights[i][j] / norm * px(b, i, j);
                }
            }
            let (mut va, mut vb, mut cab) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let g = weights[i][j] / norm;
                    va += g * (px(a, i, j) - ma).powi(2);
                    vb += g * (px(b, i, j) - mb).powi(2);
                    cab += g * (px(a, i, j) - ma) * (px(b, i, j) - mb);
                }
            }
            sum += (2.0 * ma * mb + c1) * (2.0 * cab + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1.0;
        }
    }
    sum / count
}

/// Cyclic Jacobi rotations; returns (eigenvalues, eigenvectors as columns).
fn jacobi(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

fn mat(g: &[f64], n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| g[i * n..(i + 1) * n].to_vec()).collect()
}

fn mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    (0..n).map(|i| (0..n).map(|j| (0..n).map(|k| a[i][k] * b[k][j]).sum()).collect()).collect()
}

fn jacobi_sqrt(a: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    let (vals, v) = jacobi(a);
    (0..n)
        .map(|i| (0..n).map(|j| (0..n).map(|k| v[i][k] * vals[k].max(0.0).sqrt() * v[j][k]).sum()).collect())
        .collect()
}

fn naive_frechet(a: &Gaussian, b: &Gaussian) -> f64 {
    let n = a.dim();
    let (s1, s2) = (mat(&a.cov, n), mat(&b.cov, n));
    let r = jacobi_sqrt(s1.clone());
    let inner = mul(&mul(&r, &s2), &r);
    let (vals, _) = jacobi(inner);
    let cross: f64 = vals.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    d + (0..n).map(|i| s1[i][i] + s2[i][i]).sum::<f64>() - 2.0 * cross
}

fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let m: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = (0..n).map(|k| m[i * n + k] * m[j * n + k]).sum::<f64>() + if i == j { 0.1 } else { 0.0 };
        }
    }
    s
}

fn identity(n: usize) -> Vec<f64> {
    (0..n * n).map(|i| (i % (n + 1) == 0) as u8 as f64).collect()
}

#[test]
fn f1_hand_counted_cases() {
    let mut r = Image::filled(8, 8, 1, 0);
    for p in [0, 1, 2, 9, 10, 11, 18, 19, 20] {
        r.data[p] = 255;
    }
    let mut p = r.clone();
    p.data[40] = 255;
    assert!((f1_edge(&p, &r).unwrap() - 18.0 / 19.0).abs() < 1e-15);
    assert_eq!(f1_edge(&r, &r).unwrap(), 1.0);
    let mut disjoint = Image::filled(8, 8, 1, 0);
    disjoint.data[63] = 255;
    assert_eq!(f1_edge(&disjoint, &r).unwrap(), 0.0);
}

#[test]
fn f1_rejects_gray_values() {
    let mut a = Image::filled(4, 4, 1, 0);
    a.data[3] = 128;
    assert!(f1_edge(&a, &Image::filled(4, 4, 1, 0)).is_err());
}

#[test]
fn rmse_constant_offset() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Image::new(9, 7, 3, (0..9 * 7 * 3).map(|_| rng.random_range(0..200u8)).collect()).unwrap();
    let b = Image::new(9, 7, 3, a.data.iter().map(|v| v + 37).collect()).unwrap();
    assert_eq!(rmse(&a, &b).unwrap(), 37.0);
    assert_eq!(rmse(&a, &a).unwrap(), 0.0);
    assert!(rmse(&a, &Image::filled(9, 7, 1, 0)).is_err());
}

#[test]
fn rmse_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in [3usize, 8, 16] {
        let a = gray(n, n, &mut rng);
        let b = gray(n, n, &mut rng);
        let mut s = 0.0;
        for y in 0..n {
            for x in 0..n {
                s += (a.data[y * n + x] as f64 - b.data[y * n + x] as f64).powi(2);
            }
        }
        assert!((rmse(&a, &b).unwrap() - (s / (n * n) as f64).sqrt()).abs() < 1e-9);
    }
}

#[test]
fn ssim_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (w, h) in [(11, 11), (16, 16), (13, 15)] {
        let a = gray(w, h, &mut rng);
        let b = gray(w, h, &mut rng);
        assert!((ssim(&a, &b).unwrap() - naive_ssim(&a, &b)).abs() < 1e-6);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn ssim_of_inverted_image_is_low() {
    // mid-contrast ramp with a checker overlay
    let n = 16;
    let a = Image::new(n, n, 1, (0..n * n).map(|p| (64 + (p % n) * 8 + if (p / n + p) % 2 == 0 { 0 } else { 20 }) as u8).collect()).unwrap();
    let b = Image::new(n, n, 1, a.data.iter().map(|v| 255 - v).collect()).unwrap();
    assert!(ssim(&a, &b).unwrap() < 0.3);
}

#[test]
fn ssim_rejects_small_maps() {
    let a = Image::filled(10, 16, 1, 3);
    assert!(ssim(&a, &a).is_err());
}

#[test]
fn frechet_closed_forms() {
    let n = 4;
    let a = Gaussian::new(vec![0.0; n], identity(n)).unwrap();
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
    let mu = vec![1.0, -2.0, 0.5, 3.0];
    let b = Gaussian::new(mu.clone(), identity(n)).unwrap();
    let want: f64 = mu.iter().map(|x| x * x).sum();
    assert!((frechet_distance(&a, &b).unwrap() - want).abs() < 1e-9);
}

#[test]
fn frechet_matches_jacobi_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let a = Gaussian::new((0..4).map(|_| rng.random_range(-1.0..1.0)).collect(), random_spd(4, &mut rng)).unwrap();
        let b = Gaussian::new((0..4).map(|_| rng.random_range(-1.0..1.0)).collect(), random_spd(4, &mut rng)).unwrap();
        let got = frechet_distance(&a, &b).unwrap();
        assert!((got - naive_frechet(&a, &b)).abs() < 1e-6, "{got}");
        assert!((got - frechet_distance(&b, &a).unwrap()).abs() < 1e-9);
    }
}

#[test]
fn frechet_rejects_asymmetric_covariance() {
    let mut cov = identity(3);
    cov[1] = 0.5;
    let a = Gaussian::new(vec![0.0; 3], cov).unwrap();
    let b = Gaussian::new(vec![0.0; 3], identity(3)).unwrap();
    assert!(frechet_distance(&a, &b).is_err());
}

#[test]
fn singular_covariance_is_clamped() {
    // rank-one covariance: eigenvalues at zero up to rounding
    let v = [1.0, 2.0, 3.0];
    let cov: Vec<f64> = (0..9).map(|i| v[i / 3] * v[i % 3]).collect();
    let a = Gaussian::new(vec![0.0; 3], cov).unwrap();
    let d = frechet_distance(&a, &a).unwrap();
    assert!((0.0..1e-6).contains(&d), "{d}");
}

#[test]
fn ground_truth_images_reach_the_extractor_ceiling() {
    let data = generate_dataset(64, 5);
    let images: Vec<Image> = data.iter().map(|s| s.image.clone()).collect();
    // extractor round trip on the ground truth
    let ceiling = data
        .iter()
        .map(|s| f1_edge(&edge_map(&s.image), &s.edge).unwrap())
        .sum::<f64>()
        / 64.0;
    let oracle = consistency_of(&images, &data, Modality::Canny).unwrap();
    assert!((oracle - ceiling).abs() <= 0.02);
    assert!(ceiling > 0.9, "{ceiling}");
    let blank: Vec<Image> = data.iter().map(|_| Image::filled(32, 32, 3, 0)).collect();
    assert_eq!(consistency_of(&blank, &data, Modality::Canny).unwrap(), 0.0);
}

#[test]
fn depth_extractor_is_exact_on_ground_truth() {
    let data = generate_dataset(32, 6);
    for s in &data {
        assert_eq!(depth_map(&s.image), s.depth);
    }
}

#[test]
fn evaluation_is_deterministic_and_emits_rows() {
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            layers: 1,
            d_model: 16,
            heads: 2,
            ..Default::default()
        },
        encoder: EncoderConfig {
            depth: 4,
            width: 8,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut model = Model::<f32>::new(cfg.clone(), 0).unwrap();
    model.attach_control(Default::default(), 0).unwrap();
    let data = generate_dataset(6, 9);
    let opts = EvalOptions {
        batch_size: 4,
        ..Default::default()
    };
    let embedder = EncoderEmbedder::new(cfg.encoder.clone()).unwrap();
    let hash = config_hash("test");
    let run = |m| consistency_eval(&model, &data, m, &opts, Some(&embedder), &hash).unwrap();
    let reports: Vec<MetricReport> = [Modality::Canny, Modality::Depth, Modality::Hed].into_iter().map(run).collect();
    assert_eq!(reports[0], run(Modality::Canny));
    assert!(reports[0].frechet.unwrap() >= 0.0);
    let csv = reports_csv(&reports);
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().nth(2).unwrap().starts_with("depth,rmse,"));
    assert!(consistency_eval(&model, &[], Modality::Canny, &opts, None, &hash).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn f1_matches_naive_count(seed in any::<u64>(), n in 1usize..16, p in 0.0f64..0.6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = binary(n, &mut rng, p);
        let b = binary(n, &mut rng, p);
        let got = f1_edge(&a, &b).unwrap();
        prop_assert!((got - naive_f1(&a, &b)).abs() < 1e-6);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn ssim_bounded_and_symmetric(seed in any::<u64>(), w in 11usize..17, h in 11usize..17) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gray(w, h, &mut rng);
        let b = gray(w, h, &mut rng);
        let s = ssim(&a, &b).unwrap();
        prop_assert!(s <= 1.0 + 1e-12 && s >= -1.0);
        prop_assert!((s - naive_ssim(&a, &b)).abs() < 1e-6);
    }

    #[test]
    fn frechet_symmetric_nonnegative(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Gaussian::new((0..n).map(|_| rng.random_range(-2.0..2.0)).collect(), random_spd(n, &mut rng)).unwrap();
        let b = Gaussian::new((0..n).map(|_| rng.random_range(-2.0..2.0)).collect(), random_spd(n, &mut rng)).unwrap();
        let d = frechet_distance(&a, &b).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!((d - frechet_distance(&b, &a).unwrap()).abs() < 1e-8 * (1.0 + d));
        prop_assert!((d - naive_frechet(&a, &b)).abs() < 1e-6 * (1.0 + d));
    }
}
