use ndiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use neurogen::diffusion::{
    self, ConditionSource, DenoiserConfig, DiffusionModel, Guidance, StepInputs, TrainMask,
};
use neurogen::losses;
use neurogen::optim::{Adam, AdamConfig};
use neurogen::params::Session;
use neurogen::train::changed_params;

fn small() -> DiffusionModel {
    let cfg = DenoiserConfig {
        latent: [2, 4, 4],
        widths: [4, 8],
        attn_width: 8,
        heads: 2,
        time_dim: 8,
        cond_tokens: 3,
        cond_width: 6,
    };
    let mut m = DiffusionModel::new(cfg, 4).unwrap();
    // move the zero-initialized adapter output off zero so conditions differ
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for (name, t) in m.params.as_map().clone() {
        if name == "adapter.l2.weight" {
            *m.params.get_mut(&name).unwrap() = randn(&mut rng, t.shape());
        }
    }
    m
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng))
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn conditions(m: &DiffusionModel, seed: u64, n: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    m.conditions(&randn(&mut rng, &[n, 3, 6])).unwrap()
}

#[test]
fn zero_scale_ignores_condition() {
    let m = small();
    let sched = diffusion::build_schedule(50, 1e-4, 0.02).unwrap();
    let a = diffusion::sample(
        &m,
        &sched,
        &conditions(&m, 1, 3),
        Guidance::Scale(0.0),
        10,
        9,
    )
    .unwrap();
    let b = diffusion::sample(
        &m,
        &sched,
        &conditions(&m, 2, 3),
        Guidance::Scale(0.0),
        10,
        9,
    )
    .unwrap();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn sampling_is_seed_deterministic() {
    let m = small();
    let sched = diffusion::build_schedule(50, 1e-4, 0.02).unwrap();
    let c = conditions(&m, 1, 3);
    let a = diffusion::sample(&m, &sched, &c, Guidance::Scale(7.5), 10, 9).unwrap();
    let b = diffusion::sample(&m, &sched, &c, Guidance::Scale(7.5), 10, 9).unwrap();
    let other = diffusion::sample(&m, &sched, &c, Guidance::Scale(7.5), 10, 10).unwrap();
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&other));
}

#[test]
fn unit_scale_matches_conditional_only() {
    let m = small();
    let sched = diffusion::build_schedule(50, 1e-4, 0.02).unwrap();
    let c = conditions(&m, 3, 2);
    for eta in [0.0, 1.0] {
        let a =
            diffusion::sample_with_eta(&m, &sched, &c, Guidance::Scale(1.0), 8, 5, eta).unwrap();
        let b = diffusion::sample_with_eta(&m, &sched, &c, Guidance::ConditionalOnly, 8, 5, eta)
            .unwrap();
        assert_eq!(bits(&a), bits(&b));
    }
}

#[test]
fn sampler_rejects_bad_arguments() {
    let m = small();
    let sched = diffusion::build_schedule(50, 1e-4, 0.02).unwrap();
    let c = conditions(&m, 3, 1);
    assert!(diffusion::sample(&m, &sched, &c, Guidance::Scale(-1.0), 8, 5).is_err());
    assert!(diffusion::sample(&m, &sched, &c, Guidance::Scale(f64::NAN), 8, 5).is_err());
    assert!(diffusion::sample(&m, &sched, &c, Guidance::Scale(1.0), 51, 5).is_err());
    assert!(diffusion::sample_with_eta(&m, &sched, &c, Guidance::Scale(1.0), 8, 5, 1.5).is_err());
}

#[test]
fn full_dropout_cuts_adapter_gradients() {
    let m = small();
    let sched = diffusion::build_schedule(50, 1e-4, 0.02).unwrap();
    let mask = TrainMask::selective(&m);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x0 = randn(&mut rng, &[3, 2, 4, 4]);
    let z = randn(&mut rng, &[3, 3, 6]);
    let inputs = StepInputs {
        x0: &x0,
        condition: ConditionSource::Encoded(&z),
        drop_prob: 1.0,
        gamma: 0.5,
    };
    let out = diffusion::stage2_step(&m, &sched, &mask, &inputs, &mut rng).unwrap();
    let adapter: Vec<_> = out
        .gradients
        .iter()
        .filter(|(k, _)| k.starts_with("adapter."))
        .collect();
    assert!(!adapter.is_empty());
    for (name, g) in adapter {
        assert!(
            g.data().iter().all(|v| *v == 0.0),
            "{name} has a non-zero gradient"
        );
    }
}

#[test]
fn frozen_parameters_survive_training_steps() {
    let mut m = small();
    let init = m.params.as_map().clone();
    let sched = diffusion::build_schedule(50, 1e-4, 0.02).unwrap();
    let mask = TrainMask::selective(&m);
    let mut opt = Adam::new(AdamConfig::default(), 1e-2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let x0 = randn(&mut rng, &[4, 2, 4, 4]);
        let z = randn(&mut rng, &[4, 3, 6]);
        let inputs = StepInputs {
            x0: &x0,
            condition: ConditionSource::Encoded(&z),
            drop_prob: 0.1,
            gamma: 0.5,
        };
        let out = diffusion::stage2_step(&m, &sched, &mask, &inputs, &mut rng).unwrap();
        opt.step(&mut m.params, &out.gradients).unwrap();
    }
    let changed = changed_params(&init, m.params.as_map());
    assert!(!changed.is_empty());
    assert!(changed.iter().all(|n| mask.contains(n)), "{changed:?}");
}

#[test]
fn mask_names_must_exist() {
    let m = small();
    assert!(TrainMask::from_names(&m, ["adapter.l1.weight".to_string()]).is_ok());
    assert!(TrainMask::from_names(&m, ["unet.nope".to_string()]).is_err());
}

#[test]
fn attention_rows_sum_to_one() {
    let m = small();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut s = Session::new();
    s.bind(&m.params, |_| false);
    let x = s.constant(randn(&mut rng, &[2, 2, 4, 4]));
    let c = s.constant(conditions(&m, 4, 2));
    let (_, weights) = m.denoise_with_attention(&mut s, x, &[3, 40], c).unwrap();
    for w in weights {
        let t = s.graph.value(w);
        let len = *t.shape().last().unwrap();
        assert_eq!(len, 7);
        for row in t.data().chunks(len) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn denoiser_is_batch_permutation_equivariant() {
    let m = small();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = randn(&mut rng, &[3, 2, 4, 4]);
    let c = conditions(&m, 5, 3);
    let ts = [5, 20, 45];
    let v = m.predict(&x, &ts, Some(&c)).unwrap();
    let perm = [2, 0, 1];
    let pick = |t: &Tensor| {
        let per = t.numel() / 3;
        let mut shape = t.shape().to_vec();
        shape[0] = 3;
        let data = perm
            .iter()
            .flat_map(|&i| t.data()[i * per..(i + 1) * per].to_vec())
            .collect();
        Tensor::new(shape, data).unwrap()
    };
    let pts: Vec<usize> = perm.iter().map(|&i| ts[i]).collect();
    let vp = m.predict(&pick(&x), &pts, Some(&pick(&c))).unwrap();
    let diff = vp
        .data()
        .iter()
        .zip(pick(&v).data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn forward_process_variance() {
    let sched = diffusion::build_schedule(1000, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = 10_000;
    let x0 = Tensor::from_fn([n], |_| {
        2.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
    });
    let eps = randn(&mut rng, &[n]);
    for t in [0, 250, 600, 999] {
        let (a, s) = (sched.alpha(t), sched.sigma(t));
        let xt = losses::forward_noise(&x0, &eps, a, s);
        let mean = xt.data().iter().sum::<f64>() / n as f64;
        let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expect = a * a * 4.0 + s * s;
        assert!(
            (var / expect - 1.0).abs() < 0.05,
            "t={t}: {var} vs {expect}"
        );
    }
}

#[test]
fn initial_noise_is_unit_gaussian() {
    let x = diffusion::initial_noise([4, 8, 8], 64, 3);
    let n = x.numel() as f64;
    let mean = x.data().iter().sum::<f64>() / n;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(
        mean.abs() < 0.05 && (var - 1.0).abs() < 0.05,
        "{mean} {var}"
    );
}
