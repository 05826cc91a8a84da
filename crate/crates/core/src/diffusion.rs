//! Toy latent diffusion: noise schedule, a two-level convolutional denoiser with
//! cross-attention over a token condition, the adaptation module, selective
//! finetuning masks, condition dropout, and the guided sampler.

use std::collections::{BTreeMap, BTreeSet};

use ndiff::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses;
use crate::nn;
use crate::params::{Init, ParamStore, Session};

/// Condition tokens produced by the adapter.
pub const ADAPTER_TOKENS: usize = 4;
const KERNEL: usize = 3;
const POS_INIT_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub alphas: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn snr(&self, t: usize) -> f64 {
        (self.alphas[t] / self.sigmas[t]).powi(2)
    }
}

/// Linear beta ramp; `α_t = sqrt(Π_{i<=t}(1 − β_i))`, `σ_t = sqrt(1 − α_t²)`.
pub fn build_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps < 2 || !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!(
            "invalid schedule: {steps} steps, beta in [{beta_min}, {beta_max}]"
        )));
    }
    let mut alphas = Vec::with_capacity(steps);
    let mut sigmas = Vec::with_capacity(steps);
    let mut prod = 1.0;
    for i in 0..steps {
        let beta = beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64;
        prod *= 1.0 - beta;
        alphas.push(prod.sqrt());
        sigmas.push((1.0 - prod).sqrt());
    }
    Ok(NoiseSchedule { alphas, sigmas })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// `[channels, height, width]` of one latent.
    pub latent: [usize; 3],
    /// Feature channels at the full and half resolution.
    pub widths: [usize; 2],
    pub attn_width: usize,
    pub heads: usize,
    pub time_dim: usize,
    /// Encoder tokens `T`; the condition has `T + 4` rows.
    pub cond_tokens: usize,
    /// Condition width `D`.
    pub cond_width: usize,
}

impl DenoiserConfig {
    pub fn desk(cond_tokens: usize, cond_width: usize) -> Self {
        Self {
            latent: [4, 8, 8],
            widths: [16, 32],
            attn_width: 32,
            heads: 4,
            time_dim: 32,
            cond_tokens,
            cond_width,
        }
    }

    pub fn condition_len(&self) -> usize {
        self.cond_tokens + ADAPTER_TOKENS
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.latent;
        let all = [
            c,
            h,
            w,
            self.widths[0],
            self.widths[1],
            self.attn_width,
            self.heads,
            self.time_dim,
        ];
        if all.contains(&0) || self.cond_tokens == 0 || self.cond_width == 0 {
            return Err(Error::Config(format!(
                "denoiser dimensions must be positive: {self:?}"
            )));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!(
                "latent grid {h}x{w} must have even sides"
            )));
        }
        if !self.attn_width.is_multiple_of(self.heads) || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "attention width {} must divide into {} heads and time width {} must be even",
                self.attn_width, self.heads, self.time_dim
            )));
        }
        Ok(())
    }
}

/// Names updated during selective finetuning.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainMask {
    names: BTreeSet<String>,
}

impl TrainMask {
    /// Adapter parameters plus every cross-attention key/value projection.
    pub fn selective(model: &DiffusionModel) -> Self {
        let names = model
            .params
            .names()
            .filter(|n| is_selective(n))
            .cloned()
            .collect();
        Self { names }
    }

    /// Every denoiser parameter; used while fitting the base model.
    pub fn denoiser(model: &DiffusionModel) -> Self {
        let names = model
            .params
            .names()
            .filter(|n| n.starts_with("unet."))
            .cloned()
            .collect();
        Self { names }
    }

    /// Explicit name set; every name must exist in `model`.
    pub fn from_names(
        model: &DiffusionModel,
        names: impl IntoIterator<Item = String>,
    ) -> Result<Self> {
        let names: BTreeSet<String> = names.into_iter().collect();
        if let Some(missing) = names.iter().find(|n| !model.params.contains(n)) {
            return Err(Error::MissingParam(missing.clone()));
        }
        Ok(Self { names })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.names.iter()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

fn is_selective(name: &str) -> bool {
    name.starts_with("adapter.")
        || (name.starts_with("unet.")
            && (name.contains(".xattn.to_k.") || name.contains(".xattn.to_v.")))
}

/// Denoiser (`unet.*`) and adapter (`adapter.*`) parameters.
#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub config: DenoiserConfig,
    pub params: ParamStore,
}

fn conv_weight(init: &mut Init, cout: usize, cin: usize) -> Tensor {
    let k2 = KERNEL * KERNEL;
    init.glorot(&[cout, cin, KERNEL, KERNEL], cin * k2, cout * k2)
}

fn insert_xattn(
    p: &mut ParamStore,
    init: &mut Init,
    prefix: &str,
    ch: usize,
    a: usize,
    d: usize,
) -> Result<()> {
    nn::insert_layer_norm(p, &format!("{prefix}.norm"), ch)?;
    p.insert(
        format!("{prefix}.to_q.weight"),
        init.glorot(&[ch, a], ch, a),
    )?;
    p.insert(format!("{prefix}.to_k.weight"), init.glorot(&[d, a], d, a))?;
    p.insert(format!("{prefix}.to_v.weight"), init.glorot(&[d, a], d, a))?;
    p.insert(
        format!("{prefix}.to_out.weight"),
        init.glorot(&[a, ch], a, ch),
    )?;
    p.insert(format!("{prefix}.to_out.bias"), Tensor::zeros([ch]))?;
    Ok(())
}

/// Sinusoidal embedding of integer timesteps, `[n, dim]`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_fn([ts.len(), dim], |i| {
        let (r, j) = (i / dim, i % dim);
        let k = j % half;
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let a = ts[r] as f64 * freq;
        if j < half {
            a.sin()
        } else {
            a.cos()
        }
    })
}

impl DiffusionModel {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let [c, h, w] = config.latent;
        let [w0, w1] = config.widths;
        let (a, d, td) = (config.attn_width, config.cond_width, config.time_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut p = ParamStore::new();

        p.insert("unet.time.l1.weight", init.glorot(&[td, td], td, td))?;
        p.insert("unet.time.l1.bias", Tensor::zeros([td]))?;
        p.insert("unet.time.down.weight", init.glorot(&[td, w0], td, w0))?;
        p.insert("unet.time.down.bias", Tensor::zeros([w0]))?;
        p.insert("unet.time.mid.weight", init.glorot(&[td, w1], td, w1))?;
        p.insert("unet.time.mid.bias", Tensor::zeros([w1]))?;
        p.insert("unet.time.global.weight", init.glorot(&[td, w1], td, w1))?;
        p.insert("unet.time.global.bias", Tensor::zeros([w1]))?;

        p.insert("unet.down.conv.weight", conv_weight(&mut init, w0, c))?;
        p.insert("unet.down.conv.bias", Tensor::zeros([w0]))?;
        p.insert("unet.down.pos", init.normal(&[1, w0, h, w], POS_INIT_STD))?;
        insert_xattn(&mut p, &mut init, "unet.down.xattn", w0, a, d)?;

        p.insert("unet.mid.conv.weight", conv_weight(&mut init, w1, w0))?;
        p.insert("unet.mid.conv.bias", Tensor::zeros([w1]))?;
        p.insert(
            "unet.mid.pos",
            init.normal(&[1, w1, h / 2, w / 2], POS_INIT_STD),
        )?;
        let flat = c * h * w;
        p.insert("unet.global.l1.weight", init.glorot(&[flat, w1], flat, w1))?;
        p.insert("unet.global.l1.bias", Tensor::zeros([w1]))?;
        p.insert("unet.global.down.weight", init.glorot(&[w1, w0], w1, w0))?;
        p.insert("unet.global.down.bias", Tensor::zeros([w0]))?;
        p.insert("unet.global.mid.weight", init.glorot(&[w1, w1], w1, w1))?;
        p.insert("unet.global.mid.bias", Tensor::zeros([w1]))?;
        p.insert("unet.global.out.weight", init.glorot(&[w1, flat], w1, flat))?;
        p.insert("unet.global.out.bias", Tensor::zeros([flat]))?;
        insert_xattn(&mut p, &mut init, "unet.mid.xattn", w1, a, d)?;

        p.insert("unet.up.conv.weight", conv_weight(&mut init, w0, w0 + w1))?;
        p.insert("unet.up.conv.bias", Tensor::zeros([w0]))?;
        p.insert("unet.out.conv.weight", conv_weight(&mut init, c, w0))?;
        p.insert("unet.out.conv.bias", Tensor::zeros([c]))?;
        p.insert(
            "unet.null_cond",
            init.normal(&[config.condition_len(), d], 1.0 / (d as f64).sqrt()),
        )?;

        p.insert("adapter.l1.weight", init.glorot(&[d, d], d, d))?;
        p.insert("adapter.l1.bias", Tensor::zeros([d]))?;
        nn::insert_layer_norm(&mut p, "adapter.ln", d)?;
        // Zero output map: adapter tokens start as the zero rows used while
        // fitting the base denoiser.
        p.insert("adapter.l2.weight", Tensor::zeros([d, ADAPTER_TOKENS * d]))?;
        p.insert("adapter.l2.bias", Tensor::zeros([ADAPTER_TOKENS * d]))?;
        Ok(Self { config, params: p })
    }

    /// `[n, D] -> [n, 4, D]`: dense, layer norm, dense, split into tokens.
    pub fn adapt(&self, s: &mut Session, pooled: Var) -> Result<Var> {
        let sh = s.graph.shape(pooled).to_vec();
        let d = self.config.cond_width;
        if sh.len() != 2 || sh[1] != d {
            return Err(Error::ParamShape {
                name: "adapter input".into(),
                expected: vec![0, d],
                found: sh,
            });
        }
        let h = nn::linear(s, pooled, "adapter.l1")?;
        let h = nn::layer_norm(s, h, "adapter.ln")?;
        let h = nn::linear(s, h, "adapter.l2")?;
        Ok(s.graph.reshape(h, &[sh[0], ADAPTER_TOKENS, d])?)
    }

    /// Row-wise concatenation `[n, T, D] ++ [n, 4, D] -> [n, T + 4, D]`.
    pub fn build_condition(&self, s: &mut Session, latent: Var, adapted: Var) -> Result<Var> {
        let (a, b) = (
            s.graph.shape(latent).to_vec(),
            s.graph.shape(adapted).to_vec(),
        );
        if a.len() != 3 || b.len() != 3 || a[0] != b[0] || a[2] != b[2] {
            return Err(Error::Invalid(format!(
                "build_condition: shapes {a:?} and {b:?} are incompatible"
            )));
        }
        Ok(s.graph.concat(&[latent, adapted], 1)?)
    }

    /// The learned null condition repeated for `n` items.
    pub fn null_condition(&self, s: &mut Session, n: usize) -> Result<Var> {
        let null = s.p("unet.null_cond")?;
        let zeros = s.constant(Tensor::zeros([
            n,
            self.config.condition_len(),
            self.config.cond_width,
        ]));
        Ok(s.graph.add(zeros, null)?)
    }

    /// Keeps item `i`'s condition when `keep[i]` and substitutes the null
    /// condition otherwise.
    pub fn drop_condition(&self, s: &mut Session, cond: Var, keep: &[bool]) -> Result<Var> {
        let n = keep.len();
        if s.graph.shape(cond)[0] != n {
            return Err(Error::Invalid(
                "drop_condition: mask length differs from batch".into(),
            ));
        }
        let k = s.constant(Tensor::new(
            [n, 1, 1],
            keep.iter().map(|&b| f64::from(u8::from(b))).collect(),
        )?);
        let nk = s.constant(Tensor::new(
            [n, 1, 1],
            keep.iter().map(|&b| f64::from(u8::from(!b))).collect(),
        )?);
        let null = s.p("unet.null_cond")?;
        let a = s.graph.mul(cond, k)?;
        let b = s.graph.mul(null, nk)?;
        Ok(s.graph.add(a, b)?)
    }

    fn conv(&self, s: &mut Session, x: Var, prefix: &str) -> Result<Var> {
        let w = s.p(&format!("{prefix}.weight"))?;
        let y = s.graph.conv2d(x, w)?;
        let b = s.p(&format!("{prefix}.bias"))?;
        let ch = s.graph.shape(b)[0];
        let b = s.graph.reshape(b, &[1, ch, 1, 1])?;
        Ok(s.graph.add(y, b)?)
    }

    /// Spatial positions of `h: [n, C, H, W]` attend to `cond: [n, L, D]`.
    /// Returns the residual output and attention weights `[n * heads, H * W, L]`.
    fn cross_attention(
        &self,
        s: &mut Session,
        h: Var,
        cond: Var,
        prefix: &str,
    ) -> Result<(Var, Var)> {
        let sh = s.graph.shape(h).to_vec();
        let (n, c, hh, ww) = (sh[0], sh[1], sh[2], sh[3]);
        let flat = s.graph.reshape(h, &[n, c, hh * ww])?;
        let tokens = s.graph.transpose(flat)?;
        let normed = nn::layer_norm(s, tokens, &format!("{prefix}.norm"))?;
        let q = nn::linear(s, normed, &format!("{prefix}.to_q"))?;
        let k = nn::linear(s, cond, &format!("{prefix}.to_k"))?;
        let v = nn::linear(s, cond, &format!("{prefix}.to_v"))?;
        let (mixed, weights) = nn::attention(s, q, k, v, self.config.heads)?;
        let out = nn::linear(s, mixed, &format!("{prefix}.to_out"))?;
        let res = s.graph.add(tokens, out)?;
        let back = s.graph.transpose(res)?;
        Ok((s.graph.reshape(back, &[n, c, hh, ww])?, weights))
    }

    /// `[n, k] -> [n, k', 1, 1]` through the linear map at `prefix`.
    fn time_bias(&self, s: &mut Session, temb: Var, prefix: &str) -> Result<Var> {
        let b = nn::linear(s, temb, prefix)?;
        let sh = s.graph.shape(b).to_vec();
        Ok(s.graph.reshape(b, &[sh[0], sh[1], 1, 1])?)
    }

    /// v-prediction for `x_t: [n, c, h, w]` at timesteps `ts` under `cond:
    /// [n, T + 4, D]`, together with both attention weight maps.
    pub fn denoise_with_attention(
        &self,
        s: &mut Session,
        x_t: Var,
        ts: &[usize],
        cond: Var,
    ) -> Result<(Var, [Var; 2])> {
        let sh = s.graph.shape(x_t).to_vec();
        let [c, h, w] = self.config.latent;
        if sh.len() != 4 || sh[1..] != [c, h, w] || sh[0] != ts.len() {
            return Err(Error::ParamShape {
                name: "denoiser input".into(),
                expected: vec![ts.len(), c, h, w],
                found: sh,
            });
        }
        let csh = s.graph.shape(cond).to_vec();
        let expect = [sh[0], self.config.condition_len(), self.config.cond_width];
        if csh != expect {
            return Err(Error::ParamShape {
                name: "condition".into(),
                expected: expect.to_vec(),
                found: csh,
            });
        }
        let emb = s.constant(timestep_embedding(ts, self.config.time_dim));
        let temb = nn::linear(s, emb, "unet.time.l1")?;
        let temb = s.graph.relu(temb)?;
        let temb_g = nn::linear(s, temb, "unet.time.global")?;

        // Dense summary of the whole noisy latent, added as per-channel biases.
        let flat = s.graph.reshape(x_t, &[sh[0], c * h * w])?;
        let glob = nn::linear(s, flat, "unet.global.l1")?;
        let glob = s.graph.add(glob, temb_g)?;
        let glob = s.graph.relu(glob)?;

        let h1 = self.conv(s, x_t, "unet.down.conv")?;
        let pos = s.p("unet.down.pos")?;
        let h1 = s.graph.add(h1, pos)?;
        let tb = self.time_bias(s, temb, "unet.time.down")?;
        let h1 = s.graph.add(h1, tb)?;
        let gb = self.time_bias(s, glob, "unet.global.down")?;
        let h1 = s.graph.add(h1, gb)?;
        let h1 = s.graph.relu(h1)?;
        let (h1, w_down) = self.cross_attention(s, h1, cond, "unet.down.xattn")?;

        let h2 = s.graph.avg_pool2(h1)?;
        let h2 = self.conv(s, h2, "unet.mid.conv")?;
        let pos = s.p("unet.mid.pos")?;
        let h2 = s.graph.add(h2, pos)?;
        let tb = self.time_bias(s, temb, "unet.time.mid")?;
        let h2 = s.graph.add(h2, tb)?;
        let gb = self.time_bias(s, glob, "unet.global.mid")?;
        let h2 = s.graph.add(h2, gb)?;
        let h2 = s.graph.relu(h2)?;
        let (h2, w_mid) = self.cross_attention(s, h2, cond, "unet.mid.xattn")?;

        let up = s.graph.upsample2(h2)?;
        let cat = s.graph.concat(&[up, h1], 1)?;
        let u = self.conv(s, cat, "unet.up.conv")?;
        let u = s.graph.relu(u)?;
        let out = self.conv(s, u, "unet.out.conv")?;
        let gout = nn::linear(s, glob, "unet.global.out")?;
        let gout = s.graph.reshape(gout, &[sh[0], c, h, w])?;
        let out = s.graph.add(out, gout)?;
        Ok((out, [w_down, w_mid]))
    }

    pub fn denoise(&self, s: &mut Session, x_t: Var, ts: &[usize], cond: Var) -> Result<Var> {
        Ok(self.denoise_with_attention(s, x_t, ts, cond)?.0)
    }

    /// Evaluates the denoiser outside of training. `cond = None` selects the
    /// null condition.
    pub fn predict(&self, x_t: &Tensor, ts: &[usize], cond: Option<&Tensor>) -> Result<Tensor> {
        let mut s = Session::new();
        s.bind(&self.params, |_| false);
        let x = s.constant(x_t.clone());
        let c = match cond {
            Some(c) => s.constant(c.clone()),
            None => self.null_condition(&mut s, ts.len())?,
        };
        let v = self.denoise(&mut s, x, ts, c)?;
        Ok(s.graph.value(v).clone())
    }

    /// Full conditions `[n, T + 4, D]` for encoder latents `[n, T, D]`.
    pub fn conditions(&self, latents: &Tensor) -> Result<Tensor> {
        let mut s = Session::new();
        s.bind(&self.params, |_| false);
        let z = s.constant(latents.clone());
        let pooled = s.graph.mean(z, 1)?;
        let a = self.adapt(&mut s, pooled)?;
        let c = self.build_condition(&mut s, z, a)?;
        Ok(s.graph.value(c).clone())
    }
}

/// Where the condition for a training batch comes from.
pub enum ConditionSource<'a> {
    /// Encoder latents `[n, T, D]`, extended by the adapter.
    Encoded(&'a Tensor),
    /// A complete `[n, T + 4, D]` condition used as is.
    Fixed(&'a Tensor),
}

pub struct StepInputs<'a> {
    /// Clean latents `[n, c, h, w]`.
    pub x0: &'a Tensor,
    pub condition: ConditionSource<'a>,
    pub drop_prob: f64,
    /// SNR weighting exponent.
    pub gamma: f64,
}

/// One training step's loss and gradients for the masked parameters.
pub struct StepOutput {
    pub loss: f64,
    pub gradients: BTreeMap<String, Tensor>,
}

/// Samples timesteps, noise, and dropout, then returns the weighted v-loss
/// and its gradients for every parameter in `mask`.
pub fn stage2_step(
    model: &DiffusionModel,
    schedule: &NoiseSchedule,
    mask: &TrainMask,
    batch: &StepInputs,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    if !(0.0..=1.0).contains(&batch.drop_prob) {
        return Err(Error::Config(format!(
            "drop probability {} outside [0, 1]",
            batch.drop_prob
        )));
    }
    let n = batch.x0.shape()[0];
    let per = batch.x0.numel() / n;
    let ts: Vec<usize> = (0..n)
        .map(|_| rng.random_range(0..schedule.steps()))
        .collect();
    let eps = Tensor::from_fn(batch.x0.shape().to_vec(), |_| StandardNormal.sample(rng));
    let keep: Vec<bool> = (0..n)
        .map(|_| rng.random::<f64>() >= batch.drop_prob)
        .collect();

    let mut x_t = batch.x0.clone();
    let mut target = batch.x0.clone();
    for (i, &t) in ts.iter().enumerate() {
        let (a, sg) = (schedule.alpha(t), schedule.sigma(t));
        let range = i * per..(i + 1) * per;
        for j in range {
            let (x0, e) = (batch.x0.data()[j], eps.data()[j]);
            x_t.data_mut()[j] = a * x0 + sg * e;
            target.data_mut()[j] = a * e - sg * x0;
        }
    }
    let weights: Vec<f64> = ts
        .iter()
        .map(|&t| losses::snr_weight(schedule.snr(t), batch.gamma))
        .collect();

    let mut s = Session::new();
    s.bind(&model.params, |name| mask.contains(name));
    let cond = match batch.condition {
        ConditionSource::Encoded(z) => {
            let z = s.constant(z.clone());
            let pooled = s.graph.mean(z, 1)?;
            let a = model.adapt(&mut s, pooled)?;
            model.build_condition(&mut s, z, a)?
        }
        ConditionSource::Fixed(c) => s.constant(c.clone()),
    };
    let cond = model.drop_condition(&mut s, cond, &keep)?;
    let x = s.constant(x_t);
    let pred = model.denoise(&mut s, x, &ts, cond)?;
    let tgt = s.constant(target);
    let loss = losses::weighted_v_loss(&mut s.graph, pred, tgt, &weights)?;
    Ok(StepOutput {
        loss: s.graph.value(loss).item(),
        gradients: s.gradients(loss)?,
    })
}

/// `count` timesteps from `T − 1` down to 0, evenly spaced.
pub fn sampling_timesteps(schedule_steps: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > schedule_steps {
        return Err(Error::Config(format!(
            "sampling steps {count} must lie in [1, {schedule_steps}]"
        )));
    }
    if count == 1 {
        return Ok(vec![schedule_steps - 1]);
    }
    Ok((0..count)
        .rev()
        .map(|i| (schedule_steps - 1) * i / (count - 1))
        .collect())
}

/// Per-chain starting noise; chain `i` draws from its own seeded stream.
fn chain_rngs(chains: usize, seed: u64) -> Vec<ChaCha8Rng> {
    (0..chains)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            rng
        })
        .collect()
}

fn draw_noise(rngs: &mut [ChaCha8Rng], latent: [usize; 3]) -> Tensor {
    let per: usize = latent.iter().product();
    let mut data = Vec::with_capacity(rngs.len() * per);
    for rng in rngs.iter_mut() {
        data.extend((0..per).map(|_| -> f64 { StandardNormal.sample(rng) }));
    }
    Tensor::new([rngs.len(), latent[0], latent[1], latent[2]], data).expect("noise shape")
}

/// Starting noise; chain `i` draws from stream `i` of the seeded generator.
pub fn initial_noise(latent: [usize; 3], chains: usize, seed: u64) -> Tensor {
    draw_noise(&mut chain_rngs(chains, seed), latent)
}

#[derive(Clone, Copy, Debug)]
pub enum Guidance {
    /// Both branches, combined with the given scale.
    Scale(f64),
    /// Conditional branch only.
    ConditionalOnly,
}

/// Deterministic DDIM sampling (eta = 0) in the v-parameterization.
///
/// `conditions: [n, T + 4, D]` holds one condition per chain.
pub fn sample(
    model: &DiffusionModel,
    schedule: &NoiseSchedule,
    conditions: &Tensor,
    guidance: Guidance,
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    sample_with_eta(model, schedule, conditions, guidance, steps, seed, 0.0)
}

/// Generalized sampler: `eta = 1` is ancestral, `eta = 0` is deterministic DDIM.
pub fn sample_with_eta(
    model: &DiffusionModel,
    schedule: &NoiseSchedule,
    conditions: &Tensor,
    guidance: Guidance,
    steps: usize,
    seed: u64,
    eta: f64,
) -> Result<Tensor> {
    if let Guidance::Scale(sc) = guidance {
        if !(sc >= 0.0) || !sc.is_finite() {
            return Err(Error::Config(format!(
                "guidance scale {sc} must be finite and non-negative"
            )));
        }
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config(format!("eta {eta} outside [0, 1]")));
    }
    let ts = sampling_timesteps(schedule.steps(), steps)?;
    let n = conditions.shape()[0];
    let mut rngs = chain_rngs(n, seed);
    let mut x = draw_noise(&mut rngs, model.config.latent);
    let mut x0 = x.clone();
    for (k, &t) in ts.iter().enumerate() {
        let batch_t = vec![t; n];
        let v_c = model.predict(&x, &batch_t, Some(conditions))?;
        let v = match guidance {
            Guidance::Scale(sc) => {
                let v_u = model.predict(&x, &batch_t, None)?;
                losses::cfg_combine(&v_u, &v_c, sc)?
            }
            Guidance::ConditionalOnly => v_c,
        };
        let (a, sg) = (schedule.alpha(t), schedule.sigma(t));
        x0 = losses::x0_from_v(&x, &v, a, sg);
        if let Some(&next) = ts.get(k + 1) {
            let (a2, s2) = (schedule.alpha(next), schedule.sigma(next));
            // posterior std of the step, scaled by eta
            let c = if sg > 0.0 && a2 > 0.0 {
                let r = a / a2;
                eta * (s2 / sg) * (1.0 - r * r).max(0.0).sqrt()
            } else {
                0.0
            };
            let keep = (s2 * s2 - c * c).max(0.0).sqrt();
            let z = if c > 0.0 {
                Some(draw_noise(&mut rngs, model.config.latent))
            } else {
                None
            };
            x = Tensor::from_fn(x.shape().to_vec(), |i| {
                let eps = sg * x.data()[i] + a * v.data()[i];
                let fresh = z.as_ref().map_or(0.0, |z| c * z.data()[i]);
                a2 * x0.data()[i] + keep * eps + fresh
            });
        }
    }
    Ok(x0)
}
