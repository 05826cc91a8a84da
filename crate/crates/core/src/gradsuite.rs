//! Finite-difference checks of every objective and model map, scalarized by a
//! fixed random weighting.

use ndiff::{grad_check, GradError, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{self, DenoiserConfig, DiffusionModel};
use crate::encoder::{Autoencoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::losses::{self, LossWeights, Stage1Inputs};
use crate::nn::Mode;
use crate::params::Session;

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub const TARGETS: [&str; 9] = [
    "sdsc_loss",
    "recon_loss",
    "text_align_loss",
    "contrastive_loss",
    "stage1_loss",
    "v_loss",
    "adapt",
    "denoise",
    "encode_decode",
];

#[derive(Clone, Debug, PartialEq)]
pub struct GradRecord {
    pub target: &'static str,
    pub seed: u64,
    pub error: f64,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn to_grad(e: Error) -> GradError {
    match e {
        Error::Grad(g) => g,
        other => GradError::Invalid {
            op: "model",
            msg: other.to_string(),
        },
    }
}

fn weighted_sum(g: &mut Graph, y: Var, rng_seed: u64) -> ndiff::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = g.constant(rand_tensor(&mut rng, g.shape(y)));
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

/// Runs `build` on a session that records onto `g`, with all model
/// parameters bound as constants.
fn in_session(
    g: &mut Graph,
    params: &crate::params::ParamStore,
    build: impl FnOnce(&mut Session) -> Result<Var>,
) -> ndiff::Result<Var> {
    let mut s = Session::from_graph(std::mem::take(g));
    s.bind(params, |_| false);
    let out = build(&mut s);
    *g = s.graph;
    out.map_err(to_grad)
}

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        channels: 4,
        samples: 6,
        tokens: 3,
        width: 4,
        temporal_width: 4,
        heads: 2,
        depth: 1,
    }
}

pub fn tiny_denoiser() -> DenoiserConfig {
    DenoiserConfig {
        latent: [2, 4, 4],
        widths: [3, 4],
        attn_width: 4,
        heads: 2,
        time_dim: 4,
        cond_tokens: 3,
        cond_width: 4,
    }
}

/// Worst relative error for `target` at the point drawn from `seed`.
pub fn check_target(target: &str, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wseed = seed ^ 0x5eed;
    let w = LossWeights::default();
    let err = match target {
        "sdsc_loss" | "recon_loss" => {
            let e = rand_tensor(&mut rng, &[3, 5]);
            let p = rand_tensor(&mut rng, &[3, 5]);
            let recon = target == "recon_loss";
            grad_check(
                |g, x| {
                    let c = g.constant(e.clone());
                    if recon {
                        losses::recon_loss(g, c, x, &w).map_err(to_grad)
                    } else {
                        losses::sdsc_loss(g, c, x).map_err(to_grad)
                    }
                },
                &p,
                GRAD_EPS,
            )?
        }
        "text_align_loss" => {
            let t = rand_tensor(&mut rng, &[2, 3, 4]);
            let p = rand_tensor(&mut rng, &[2, 3, 4]);
            grad_check(
                |g, x| {
                    let c = g.constant(t.clone());
                    losses::text_align_loss(g, x, c, &w).map_err(to_grad)
                },
                &p,
                GRAD_EPS,
            )?
        }
        "contrastive_loss" => {
            let img = rand_tensor(&mut rng, &[4, 3]);
            let p = rand_tensor(&mut rng, &[4, 3]);
            grad_check(
                |g, x| {
                    let c = g.constant(img.clone());
                    losses::contrastive_loss(g, x, c, 0.5).map_err(to_grad)
                },
                &p,
                GRAD_EPS,
            )?
        }
        "stage1_loss" | "encode_decode" => {
            let cfg = tiny_encoder();
            let model = Autoencoder::new(cfg.clone(), seed)?;
            let (n, c, s, t, d) = (2, cfg.channels, cfg.samples, cfg.tokens, cfg.width);
            let p = rand_tensor(&mut rng, &[n, c, s]);
            let text = rand_tensor(&mut rng, &[n, t, d]);
            let image = rand_tensor(&mut rng, &[n, d]);
            let full = target == "stage1_loss";
            let w = LossWeights {
                temperature: 0.5,
                ..LossWeights::default()
            };
            grad_check(
                |g, x| {
                    let y = in_session(g, &model.params, |s| {
                        let z = model.encode(s, x, Mode::Train)?;
                        let recon = model.decode(s, z)?;
                        if !full {
                            return Ok(recon);
                        }
                        let pooled = model.mean_pool(s, z)?;
                        let inputs = Stage1Inputs {
                            signal: x,
                            reconstruction: recon,
                            latent: z,
                            text: s.constant(text.clone()),
                            pooled,
                            image: s.constant(image.clone()),
                        };
                        Ok(losses::stage1_loss(&mut s.graph, &inputs, &w)?.total)
                    })?;
                    if full {
                        Ok(y)
                    } else {
                        weighted_sum(g, y, wseed)
                    }
                },
                &p,
                GRAD_EPS,
            )?
        }
        "v_loss" => {
            let sched = diffusion::build_schedule(100, 1e-4, 0.02)?;
            let weights: Vec<f64> = (0..3)
                .map(|_| losses::snr_weight(sched.snr(rng.random_range(0..100)), 0.5))
                .collect();
            let target_v = rand_tensor(&mut rng, &[3, 2, 2, 2]);
            let p = rand_tensor(&mut rng, &[3, 2, 2, 2]);
            grad_check(
                |g, x| {
                    let c = g.constant(target_v.clone());
                    losses::weighted_v_loss(g, x, c, &weights).map_err(to_grad)
                },
                &p,
                GRAD_EPS,
            )?
        }
        "adapt" => {
            let model = DiffusionModel::new(tiny_denoiser(), seed)?;
            let p = rand_tensor(&mut rng, &[2, model.config.cond_width]);
            grad_check(
                |g, x| {
                    let y = in_session(g, &model.params, |s| model.adapt(s, x))?;
                    weighted_sum(g, y, wseed)
                },
                &p,
                GRAD_EPS,
            )?
        }
        "denoise" => {
            let model = DiffusionModel::new(tiny_denoiser(), seed)?;
            let cfg = &model.config;
            let [c, h, wd] = cfg.latent;
            let n = 2;
            let ts: Vec<usize> = (0..n).map(|_| rng.random_range(0..1000)).collect();
            let cond = rand_tensor(&mut rng, &[n, cfg.condition_len(), cfg.cond_width]);
            let xt = rand_tensor(&mut rng, &[n, c, h, wd]);
            // With respect to the noisy latent, then the condition.
            let e1 = grad_check(
                |g, x| {
                    let y = in_session(g, &model.params, |s| {
                        let cv = s.constant(cond.clone());
                        model.denoise(s, x, &ts, cv)
                    })?;
                    weighted_sum(g, y, wseed)
                },
                &xt,
                GRAD_EPS,
            )?;
            let e2 = grad_check(
                |g, x| {
                    let y = in_session(g, &model.params, |s| {
                        let xv = s.constant(xt.clone());
                        model.denoise(s, xv, &ts, x)
                    })?;
                    weighted_sum(g, y, wseed)
                },
                &cond,
                GRAD_EPS,
            )?;
            e1.max(e2)
        }
        other => return Err(Error::Invalid(format!("unknown gradient target `{other}`"))),
    };
    Ok(err)
}

/// Every target over seeds `0..seeds`.
pub fn run_suite(seeds: u64) -> Result<Vec<GradRecord>> {
    let mut out = Vec::new();
    for target in TARGETS {
        for seed in 0..seeds {
            out.push(GradRecord {
                target,
                seed,
                error: check_target(target, seed)?,
            });
        }
    }
    Ok(out)
}
