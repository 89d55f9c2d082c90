use std::fs;
use std::path::{Path, PathBuf};

use csrd::diffusion::{Condition, Denoiser, Differentiable, NoiseSchedule, Pullback, TrainingTriple};
use csrd::dosesim::PhantomSpec;
use csrd::rng::stream;
use csrd::scorenet::{ScoreModel, ScoreModelConfig};
use csrd::train::{
    checkpoint_dir, draw_batch, ema_update, load_checkpoint, simulate_dataset, train, Adam, SimulateConfig,
    Trainable, TrainConfig, Trainer, TrainingItem, TrainingSet,
};
use csrd::volumes::{Grid, Shape3};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn items(n: usize, shape: Shape3, seed: u64, residual_std: f64) -> Vec<TrainingItem> {
    let mut rng = stream(seed, &[]);
    (0..n)
        .map(|i| {
            let r = Grid::from_fn(shape, |_, _, _| residual_std * rng.sample::<f64, _>(StandardNormal));
            let low = Grid::from_fn(shape, |x, y, z| ((x + y + z) % 5) as f32 * 0.2);
            TrainingItem {
                subject: format!("s{i}"),
                factor: 4.0,
                triple: TrainingTriple::new(r, low, None).unwrap(),
            }
        })
        .collect()
}

fn small_cfg(patch: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 4,
        total_iters: 1,
        patch_size: [patch; 3],
        base_channels: 4,
        depth: 2,
        use_mr: false,
        ..TrainConfig::preset("phantom").unwrap()
    }
}

#[test]
fn zero_residual_loss_has_closed_form() {
    // With a zero output head D = c_skip·x, and x = σ·n when the target is
    // zero, so each patch contributes λ(σ)·c_skip²·σ²·mean(n²).
    let cfg = small_cfg(8);
    let data = TrainingSet::from_items(items(3, Shape3::cube(12), 1, 0.0), 1.0).unwrap();
    let model = ScoreModel::<f64>::new(cfg.model_config(), cfg.schedule, 1.0, 5).unwrap();
    let mut trainer = Trainer::new(model, cfg.clone()).unwrap();
    let batch = draw_batch(&data, &cfg, 0).unwrap();
    let want = batch
        .iter()
        .map(|b| {
            let p = cfg.schedule.precond(b.sigma).unwrap();
            let lambda = cfg.schedule.loss_weight(b.sigma).unwrap();
            let ms = b.noise.iter().map(|n| n * n).sum::<f64>() / b.noise.len() as f64;
            lambda * p.c_skip.powi(2) * b.sigma.powi(2) * ms
        })
        .sum::<f64>()
        / batch.len() as f64;
    let (loss, _) = trainer.step(&data).unwrap();
    assert!((loss - want).abs() <= 1e-12 * want, "{loss} vs {want}");
}

/// `D = c_skip·x + c_out·g(c_noise)·c_in·x` with a polynomial gain `g`.
#[derive(Clone)]
struct PolyGain {
    coef: Vec<f64>,
    sched: NoiseSchedule,
}

impl PolyGain {
    fn gain(&self, sigma: f64) -> f64 {
        let p = self.sched.precond(sigma).unwrap();
        let g: f64 = self.coef.iter().enumerate().map(|(k, a)| a * p.c_noise.powi(k as i32)).sum();
        p.c_skip + p.c_out * g * p.c_in
    }
}

impl Denoiser for PolyGain {
    fn denoise(&self, noisy: &[f64], sigma: f64, _cond: &Condition) -> csrd::Result<Vec<f64>> {
        let a = self.gain(sigma);
        Ok(noisy.iter().map(|x| a * x).collect())
    }
}

impl Differentiable for PolyGain {
    fn n_params(&self) -> usize {
        self.coef.len()
    }

    fn denoise_with_pullback(&self, noisy: &[f64], sigma: f64, cond: &Condition) -> csrd::Result<(Vec<f64>, Pullback<'_>)> {
        let out = self.denoise(noisy, sigma, cond)?;
        let p = self.sched.precond(sigma)?;
        let x = noisy.to_vec();
        let k = self.coef.len();
        Ok((
            out,
            Box::new(move |up: &[f64]| {
                let base: f64 = up.iter().zip(&x).map(|(u, v)| u * v).sum::<f64>() * p.c_out * p.c_in;
                (0..k).map(|j| base * p.c_noise.powi(j as i32)).collect()
            }),
        ))
    }
}

impl Trainable for PolyGain {
    type Param = f64;

    fn parameters(&self) -> &[f64] {
        &self.coef
    }

    fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.coef
    }
}

#[test]
fn gaussian_toy_reaches_the_analytic_floor() {
    // For r ~ N(0, s²) the best denoiser is s²/(s² + σ²)·x, whose weighted
    // loss is λ(σ)·σ²s²/(σ² + s²). A linear denoiser with gain a(σ) has
    // expected loss λ(σ)·((a − 1)²s² + a²σ²).
    let s = 0.15;
    let sched = NoiseSchedule::default();
    for seed in 0..3 {
        let cfg = TrainConfig {
            lr: 1e-2,
            batch_size: 8,
            seed,
            ..small_cfg(8)
        };
        let data = TrainingSet::from_items(items(4, Shape3::cube(8), 100 + seed, s), 1.0).unwrap();
        let model = PolyGain {
            coef: vec![0.0; 4],
            sched,
        };
        let untrained = model.clone();
        let mut trainer = Trainer::new(model, cfg).unwrap();
        for _ in 0..2000 {
            trainer.step(&data).unwrap();
        }
        let mut rng = stream(seed, &[7]);
        let (mut floor, mut got, mut start) = (0.0, 0.0, 0.0);
        let expected = |a: f64, sigma: f64| (a - 1.0).powi(2) * s * s + a * a * sigma * sigma;
        for _ in 0..100_000 {
            let sigma = sched.sample_training_sigma(&mut rng);
            let lambda = sched.loss_weight(sigma).unwrap();
            floor += lambda * sigma * sigma * s * s / (sigma * sigma + s * s);
            got += lambda * expected(trainer.model.gain(sigma), sigma);
            start += lambda * expected(untrained.gain(sigma), sigma);
        }
        assert!(start > 1.5 * floor, "seed {seed}: untrained loss {start} vs floor {floor}");
        assert!(got <= 1.05 * floor, "seed {seed}: loss {got} vs floor {floor}");
    }
}

fn tiny_dataset(dir: &Path) -> PathBuf {
    let cfg = SimulateConfig {
        n_train: 2,
        n_val: 1,
        n_test: 1,
        phantom: PhantomSpec {
            shape: Shape3::cube(16),
            n_ellipsoids: 3,
            ..PhantomSpec::default()
        },
        ..SimulateConfig::default()
    };
    simulate_dataset(&cfg, dir).unwrap();
    dir.join("manifest.json")
}

fn run_cfg(manifest: &Path, iters: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        total_iters: iters,
        checkpoint_every: 3,
        dataset_manifest: manifest.to_path_buf(),
        ..small_cfg(8)
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn losses(dir: &Path) -> Vec<u64> {
    fs::read_to_string(dir.join("telemetry.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["loss"].as_f64().unwrap().to_bits()
        })
        .collect()
}

#[test]
fn runs_are_deterministic_and_resumable() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(&tmp.path().join("data"));
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));

    let full = train(&run_cfg(&manifest, 6), &a, None).unwrap();
    assert_eq!(full.checkpoints, vec![checkpoint_dir(&a, 3), checkpoint_dir(&a, 6)]);
    train(&run_cfg(&manifest, 6), &b, None).unwrap();
    assert_eq!(files(&checkpoint_dir(&a, 6)), files(&checkpoint_dir(&b, 6)));

    train(&run_cfg(&manifest, 3), &c, None).unwrap();
    let resumed = train(&run_cfg(&manifest, 6), &c, Some(&checkpoint_dir(&c, 3))).unwrap();
    assert_eq!(resumed.final_checkpoint, checkpoint_dir(&c, 6));
    assert_eq!(files(&checkpoint_dir(&a, 6)), files(&checkpoint_dir(&c, 6)));
    assert_eq!(losses(&a), losses(&c));

    let ck = load_checkpoint(&checkpoint_dir(&a, 6)).unwrap();
    assert_eq!(ck.manifest.step, 6);
    assert_eq!(ck.manifest.adam_t, 6);
    assert_eq!(ck.params, full.model.params);
}

#[test]
fn resume_rejects_mismatches() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(&tmp.path().join("data"));
    let out = tmp.path().join("run");
    train(&run_cfg(&manifest, 3), &out, None).unwrap();
    let ck = checkpoint_dir(&out, 3);

    let other_lr = TrainConfig {
        lr: 5e-4,
        ..run_cfg(&manifest, 6)
    };
    assert!(train(&other_lr, &tmp.path().join("x"), Some(&ck)).is_err());

    let other_data = tiny_dataset_with_seed(&tmp.path().join("data2"), 9);
    assert!(train(&run_cfg(&other_data, 6), &tmp.path().join("y"), Some(&ck)).is_err());

    let blob = ck.join("params.bin");
    let mut bytes = fs::read(&blob).unwrap();
    bytes[0] ^= 1;
    fs::write(&blob, bytes).unwrap();
    let err = load_checkpoint(&ck).unwrap_err().to_string();
    assert!(err.contains("digest"), "{err}");
}

fn tiny_dataset_with_seed(dir: &Path, seed: u64) -> PathBuf {
    let cfg = SimulateConfig {
        n_train: 1,
        n_val: 0,
        n_test: 1,
        phantom: PhantomSpec {
            shape: Shape3::cube(16),
            n_ellipsoids: 3,
            ..PhantomSpec::default()
        },
        seed,
        ..SimulateConfig::default()
    };
    simulate_dataset(&cfg, dir).unwrap();
    dir.join("manifest.json")
}

#[test]
fn tampered_volumes_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(&tmp.path().join("data"));
    assert!(TrainingSet::load(&manifest, true, 1.0).is_ok());
    let victim = tmp.path().join("data/train000/nor.rv3d");
    let mut bytes = fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    fs::write(&victim, bytes).unwrap();
    assert!(TrainingSet::load(&manifest, true, 1.0).is_err());

    let mut text = fs::read_to_string(&manifest).unwrap();
    text = text.replacen("csrd-dataset/1", "csrd-dataset/0", 1);
    fs::write(&manifest, text).unwrap();
    assert!(TrainingSet::load(&manifest, true, 1.0).is_err());
}

#[test]
fn default_dataset_has_sixty_training_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let m = simulate_dataset(&SimulateConfig::default(), tmp.path()).unwrap();
    assert_eq!(m.shape, Shape3::cube(48));
    let data = TrainingSet::load(&tmp.path().join("manifest.json"), true, 1.0).unwrap();
    assert_eq!(data.items.len(), 60);
    assert!(m.residual_std > 0.0);
}

#[test]
fn draws_are_uniform_over_pairs() {
    let data = TrainingSet::from_items(items(60, Shape3::cube(2), 3, 1.0), 1.0).unwrap();
    let mut rng = stream(42, &[]);
    let n = 100_000;
    let mut counts = vec![0usize; 60];
    for _ in 0..n {
        counts[data.draw(&mut rng)] += 1;
    }
    let e = n as f64 / 60.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    let p = 1.0 - ChiSquared::new(59.0).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi2 {chi2}, p {p}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ema_stays_between_old_and_new(old in prop::collection::vec(-5.0f64..5.0, 8), new in prop::collection::vec(-5.0f64..5.0, 8), decay in 0.0f64..0.9999) {
        let mut ema = old.clone();
        ema_update(&mut ema, &new, decay);
        for ((e, o), n) in ema.iter().zip(&old).zip(&new) {
            prop_assert!(*e >= o.min(*n) - 1e-12 && *e <= o.max(*n) + 1e-12);
        }
    }

    #[test]
    fn first_adam_step_is_bounded_by_lr(g in prop::collection::vec(-100.0f64..100.0, 6), lr in 1e-5f64..1e-1) {
        let mut p = vec![0.0f64; 6];
        let mut opt = Adam::new(6, lr);
        opt.update(&mut p, &g);
        for (v, gi) in p.iter().zip(&g) {
            prop_assert!(v.abs() <= lr * (1.0 + 1e-9));
            prop_assert!(*v == 0.0 || v.signum() == -gi.signum());
        }
    }

    #[test]
    fn batches_are_inside_the_volume(iter in 0u64..1000, seed in any::<u64>()) {
        let data = TrainingSet::from_items(items(3, Shape3::new(10, 12, 9), 1, 1.0), 1.0).unwrap();
        let cfg = TrainConfig { seed, ..small_cfg(8) };
        let batch = draw_batch(&data, &cfg, iter).unwrap();
        prop_assert_eq!(batch.len(), cfg.batch_size);
        for b in &batch {
            prop_assert!(b.sigma > 0.0 && b.sigma.is_finite());
            prop_assert_eq!(b.noise.len(), 512);
            for k in 0..3 {
                prop_assert!(b.region.origin[k] + 8 <= b.region.parent.0[k]);
            }
        }
        let again = draw_batch(&data, &cfg, iter).unwrap();
        prop_assert_eq!(batch[0].noise.clone(), again[0].noise.clone());
    }
}

#[test]
fn model_config_tracks_the_training_config() {
    let cfg = TrainConfig::preset("phantom").unwrap();
    let m: ScoreModelConfig = cfg.model_config();
    assert_eq!((m.base_channels, m.depth, m.patch_size), (8, 3, [16; 3]));
    assert_eq!(m.in_channels, 6);
}
