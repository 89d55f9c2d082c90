use std::collections::HashMap;

use csrd::metrics::{
    evaluate_pair, glcm, haralick_distance, haralick_distance_flagged, haralick_features, mae, perceptual_distance,
    psnr, quantize, ssim, texture_features, EvalConfig, HaralickConfig, RandomConvExtractor, SsimConfig,
};
use csrd::rng::stream;
use csrd::volumes::{Grid, Shape3, Volume3D};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn vol(shape: Shape3, data: Vec<f32>) -> Volume3D {
    Volume3D::normalized(Grid::from_vec(shape, data).unwrap(), "v").unwrap()
}

fn random_vol(shape: Shape3, seed: u64) -> Volume3D {
    let mut rng = stream(seed, &[]);
    vol(shape, (0..shape.len()).map(|_| rng.random_range(0.0f32..2.0)).collect())
}

fn noisy(base: &Volume3D, sigma: f64, seed: u64) -> Volume3D {
    let mut rng = stream(seed, &[1]);
    let data = base
        .data()
        .iter()
        .map(|&v| (f64::from(v) + sigma * rng.sample::<f64, _>(StandardNormal)) as f32)
        .collect();
    vol(base.shape(), data)
}

#[test]
fn mae_and_psnr_match_scalar_loops() {
    let s = Shape3::cube(16);
    let a = random_vol(s, 1);
    let b = random_vol(s, 2);
    let mut rng = stream(3, &[]);
    let mask = Grid::from_vec(s, (0..s.len()).map(|_| rng.random_bool(0.3)).collect()).unwrap();

    let (mut abs, mut sq, mut n, mut peak) = (0.0f64, 0.0f64, 0usize, f64::MIN);
    let (mut mabs, mut msq, mut mn) = (0.0f64, 0.0f64, 0usize);
    for i in 0..s.len() {
        let (x, y) = (a.data()[i] as f64, b.data()[i] as f64);
        peak = peak.max(x);
        abs += (x - y).abs();
        sq += (x - y) * (x - y);
        n += 1;
        if mask.data[i] {
            mabs += (x - y).abs();
            msq += (x - y) * (x - y);
            mn += 1;
        }
    }
    let close = |u: f64, v: f64| (u - v).abs() <= 1e-9 * v.abs().max(1.0);
    assert!(close(mae(&a, &b, None).unwrap(), abs / n as f64));
    assert!(close(mae(&a, &b, Some(&mask)).unwrap(), mabs / mn as f64));
    let want = 10.0 * (peak * peak / (sq / n as f64)).log10();
    assert!(close(psnr(&a, &b, None, None).unwrap(), want));
    let want = 10.0 * (4.0 / (msq / mn as f64)).log10();
    assert!(close(psnr(&a, &b, Some(2.0), Some(&mask)).unwrap(), want));
}

#[test]
fn identical_inputs_give_ideal_scores() {
    let a = random_vol(Shape3::new(16, 16, 4), 9);
    let r = evaluate_pair(&a, &a, &EvalConfig::default(), None, None).unwrap();
    assert_eq!(r.mae, 0.0);
    assert_eq!(r.psnr_db, f64::INFINITY);
    assert!((r.ssim - 1.0).abs() < 1e-12);
    assert_eq!(r.h_dist, 0.0);
    assert_eq!(r.p_dist, 0.0);
    assert!(r.flags.iter().any(|f| f == "builtin-extractor"));
}

#[test]
fn ssim_of_constants_has_closed_form() {
    let s = Shape3::new(12, 12, 2);
    let (a, b) = (0.8, 0.5);
    let x = vol(s, vec![a as f32; s.len()]);
    let y = vol(s, vec![b as f32; s.len()]);
    // Flat reference: data range falls back to 1, and both variances vanish.
    let c1 = 0.01f64.powi(2);
    let want = (2.0 * a * b + c1) / (a * a + b * b + c1);
    let got = ssim(&x, &y, &SsimConfig::default()).unwrap();
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
}

#[test]
fn ssim_rejects_small_slices() {
    let a = random_vol(Shape3::new(8, 8, 8), 1);
    assert!(ssim(&a, &a, &SsimConfig::default()).is_err());
}

/// Co-occurrence counts built with a hash map, one ordered pair at a time.
fn oracle_glcm(q: &[usize], s: Shape3, o: [i32; 3], levels: usize) -> Vec<f64> {
    let mut counts: HashMap<(usize, usize), f64> = HashMap::new();
    let mut total = 0.0;
    for idx in 0..s.len() {
        let p = s.coords(idx);
        let n: Vec<i64> = (0..3).map(|k| p[k] as i64 + o[k] as i64).collect();
        if (0..3).any(|k| n[k] < 0 || n[k] >= s.0[k] as i64) {
            continue;
        }
        let j = s.index(n[0] as usize, n[1] as usize, n[2] as usize);
        *counts.entry((q[idx], q[j])).or_default() += 1.0;
        *counts.entry((q[j], q[idx])).or_default() += 1.0;
        total += 2.0;
    }
    let mut m = vec![0.0; levels * levels];
    for ((a, b), c) in counts {
        m[a * levels + b] = c / total;
    }
    m
}

#[test]
fn checkerboard_texture_matches_direct_counts() {
    let s = Shape3::cube(8);
    let board = vol(s, (0..s.len()).map(|i| {
        let [x, y, z] = s.coords(i);
        ((x + y + z) % 2) as f32
    }).collect());
    let levels = 64;
    let q = quantize(&board, 0.0, 1.0, levels);
    assert!(q.iter().all(|&l| l == 0 || l == levels - 1));

    // An axis step always crosses colours: two equally likely cells.
    let m = glcm(&q, s, [1, 0, 0], levels, true);
    assert_eq!(m, oracle_glcm(&q, s, [1, 0, 0], levels));
    let f = haralick_features(&m, levels);
    assert!((f[0] - 0.5).abs() < 1e-12, "ASM {}", f[0]);
    assert!((f[1] - 63.0f64.powi(2)).abs() < 1e-9, "contrast {}", f[1]);
    assert!((f[2] + 1.0).abs() < 1e-12, "correlation {}", f[2]);
    assert!((f[8] - 1.0).abs() < 1e-12, "entropy {}", f[8]);

    // A face diagonal keeps the colour.
    let m = glcm(&q, s, [1, 1, 0], levels, true);
    assert_eq!(m, oracle_glcm(&q, s, [1, 1, 0], levels));
    let f = haralick_features(&m, levels);
    assert_eq!(f[1], 0.0);
    assert!((f[2] - 1.0).abs() < 1e-12);

    for o in csrd::metrics::unit_offsets() {
        assert_eq!(glcm(&q, s, o, levels, true), oracle_glcm(&q, s, o, levels), "offset {o:?}");
    }
}

#[test]
fn constant_volume_texture() {
    let s = Shape3::cube(8);
    let c = vol(s, vec![0.5; s.len()]);
    let f = texture_features(&c, 0.5, 0.5, &HaralickConfig::default()).unwrap();
    assert_eq!(f[0], 1.0);
    assert_eq!(f[1], 0.0);
    assert_eq!(f[8], 0.0);
    let (d, flagged) = haralick_distance_flagged(&c, &c, &HaralickConfig::default()).unwrap();
    assert_eq!(d, 0.0);
    assert!(flagged.iter().any(|f| f == "contrast"));
}

#[test]
fn haralick_distance_is_affine_invariant() {
    // Dyadic intensities keep the quantization arithmetic exact.
    let s = Shape3::cube(8);
    let mut rng = stream(11, &[]);
    let a: Vec<f32> = (0..s.len()).map(|_| rng.random_range(0..64) as f32 / 64.0).collect();
    let b: Vec<f32> = a.iter().map(|&v| (v + rng.random_range(-4..=4) as f32 / 64.0).clamp(0.0, 1.0)).collect();
    let cfg = HaralickConfig::default();
    let d = haralick_distance(&vol(s, a.clone()), &vol(s, b.clone()), &cfg).unwrap();
    let t = |v: &[f32]| vol(s, v.iter().map(|x| 4.0 * x + 0.5).collect());
    let d2 = haralick_distance(&t(&a), &t(&b), &cfg).unwrap();
    assert!(d > 0.0);
    assert_eq!(d, d2);
}

#[test]
fn distances_grow_with_noise() {
    let s = Shape3::new(24, 24, 4);
    let base = vol(s, (0..s.len()).map(|i| {
        let [x, y, _] = s.coords(i);
        1.0 + 0.5 * ((x as f32 / 4.0).sin() * (y as f32 / 5.0).cos())
    }).collect());
    let ex = RandomConvExtractor::default();
    let cfg = HaralickConfig::default();
    let mut last = (0.0, 0.0);
    for sigma in [0.01, 0.05, 0.1] {
        let n = noisy(&base, sigma, 5);
        let h = haralick_distance(&base, &n, &cfg).unwrap();
        let p = perceptual_distance(&base, &n, &ex).unwrap();
        assert!(h > last.0 && p > last.1, "sigma {sigma}: h {h} p {p}");
        last = (h, p);
    }
}

#[test]
fn evaluation_is_deterministic() {
    let s = Shape3::new(16, 16, 3);
    let a = random_vol(s, 21);
    let b = noisy(&a, 0.1, 22);
    let cfg = EvalConfig::default();
    let r1 = evaluate_pair(&a, &b, &cfg, None, None).unwrap();
    let r2 = evaluate_pair(&a, &b, &cfg, None, None).unwrap();
    assert_eq!(r1, r2);
}

#[test]
fn mismatched_shapes_are_rejected() {
    let a = random_vol(Shape3::cube(12), 1);
    let b = random_vol(Shape3::new(12, 12, 11), 2);
    assert!(mae(&a, &b, None).is_err());
    assert!(evaluate_pair(&a, &b, &EvalConfig::default(), None, None).is_err());
    let empty = Grid::filled(a.shape(), false);
    assert!(mae(&a, &a, Some(&empty)).is_err());
}

fn arb_pair() -> impl Strategy<Value = (Vec<f32>, Vec<f32>, Vec<f32>)> {
    let n = 12 * 12 * 2;
    let v = || prop::collection::vec(0.0f32..4.0, n);
    (v(), v(), v())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mae_is_a_metric((a, b, c) in arb_pair()) {
        let s = Shape3::new(12, 12, 2);
        let (a, b, c) = (vol(s, a), vol(s, b), vol(s, c));
        let ab = mae(&a, &b, None).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(mae(&a, &a, None).unwrap(), 0.0);
        prop_assert!((ab - mae(&b, &a, None).unwrap()).abs() < 1e-12);
        prop_assert!(mae(&a, &c, None).unwrap() <= ab + mae(&b, &c, None).unwrap() + 1e-12);
    }

    #[test]
    fn ssim_is_bounded_and_symmetric((a, b, _c) in arb_pair()) {
        let s = Shape3::new(12, 12, 2);
        let (a, b) = (vol(s, a), vol(s, b));
        let cfg = SsimConfig { data_range: Some(4.0), ..SsimConfig::default() };
        let ab = ssim(&a, &b, &cfg).unwrap();
        prop_assert!(ab <= 1.0 + 1e-12 && ab >= -1.0 - 1e-12);
        prop_assert!((ab - ssim(&b, &a, &cfg).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn psnr_falls_as_error_grows((a, b, _c) in arb_pair(), k in 1.5f32..4.0) {
        let s = Shape3::new(12, 12, 2);
        let near: Vec<f32> = a.iter().zip(&b).map(|(x, y)| x + 0.1 * (y - x)).collect();
        let far: Vec<f32> = a.iter().zip(&b).map(|(x, y)| x + 0.1 * k * (y - x)).collect();
        let a = vol(s, a);
        let (pn, pf) = (psnr(&a, &vol(s, near), Some(4.0), None).unwrap(), psnr(&a, &vol(s, far), Some(4.0), None).unwrap());
        prop_assume!(pn.is_finite());
        prop_assert!(pf < pn);
    }

    #[test]
    fn glcm_is_a_distribution(seed in any::<u64>(), o in prop::sample::select(csrd::metrics::unit_offsets())) {
        let s = Shape3::new(6, 5, 4);
        let v = random_vol(s, seed);
        let q = quantize(&v, 0.0, 2.0, 16);
        prop_assert!(q.iter().all(|&l| l < 16));
        let m = glcm(&q, s, o, 16, true);
        prop_assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..16 {
            for j in 0..16 {
                prop_assert_eq!(m[i * 16 + j], m[j * 16 + i]);
            }
        }
    }
}
