//! Training loops for the autoencoder and the conditioned denoiser.

use std::collections::BTreeMap;

use ndiff::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::diffusion::{
    self, ConditionSource, DiffusionModel, NoiseSchedule, StepInputs, TrainMask,
};
use crate::encoder::Autoencoder;
use crate::error::{Error, Result};
use crate::eval::{self, RetrievalIndex, RetrievalMode, Scope};
use crate::losses::{self, Stage1Inputs};
use crate::nn::{self, Mode};
use crate::optim::Adam;
use crate::params::Session;

/// Offsets mixed into the run seed so each random stream is independent.
pub mod streams {
    pub const ENCODER_INIT: u64 = 0x1001;
    pub const STAGE1_SHUFFLE: u64 = 0x1002;
    pub const DENOISER_INIT: u64 = 0x2001;
    pub const PRETRAIN: u64 = 0x2002;
    pub const FINETUNE: u64 = 0x2003;
    pub const SAMPLER: u64 = 0x3001;
}

pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(stream)
}

/// Per-epoch values, written as `epoch,metric,value` rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    rows: Vec<(usize, String, f64)>,
}

impl MetricLog {
    pub fn push(&mut self, epoch: usize, metric: &str, value: f64) {
        self.rows.push((epoch, metric.to_string(), value));
    }

    pub fn rows(&self) -> &[(usize, String, f64)] {
        &self.rows
    }

    /// Last logged value of `metric`.
    pub fn last(&self, metric: &str) -> Option<f64> {
        self.rows.iter().rev().find(|r| r.1 == metric).map(|r| r.2)
    }

    /// All values of `metric` in epoch order.
    pub fn series(&self, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.1 == metric)
            .map(|r| r.2)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,metric,value\n");
        for (e, m, v) in &self.rows {
            out.push_str(&format!("{e},{m},{v}\n"));
        }
        out
    }
}

fn batches(idx: &[usize], size: usize, min: usize) -> Vec<Vec<usize>> {
    idx.chunks(size)
        .filter(|c| c.len() >= min)
        .map(<[usize]>::to_vec)
        .collect()
}

fn check_finite(loss: f64, epoch: usize, step: usize, detail: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            epoch,
            step,
            detail: format!("{detail} = {loss}"),
        })
    }
}

/// Validation measurements of an autoencoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1Eval {
    pub mse: f64,
    pub dice: f64,
    pub top1: f64,
    pub top5: f64,
}

/// Mean-pooled evaluation latents `[n, D]` of the items at `idx`.
pub fn pooled_latents(model: &Autoencoder, data: &Dataset, idx: &[usize]) -> Result<Tensor> {
    let z = model.encode_batch(&data.batch(idx)?)?;
    let (t, d) = (z.shape()[1], z.shape()[2]);
    let rows: Vec<f64> = (0..idx.len())
        .flat_map(|i| {
            let m =
                Tensor::new([t, d], z.data()[i * t * d..(i + 1) * t * d].to_vec()).expect("latent");
            crate::encoder::mean_pool(&m)
        })
        .collect();
    Ok(Tensor::new([idx.len(), d], rows)?)
}

/// Reconstruction quality and label retrieval against the class image
/// embeddings for the items at `idx`.
pub fn evaluate_stage1(model: &Autoencoder, data: &Dataset, idx: &[usize]) -> Result<Stage1Eval> {
    let x = data.batch(idx)?;
    let z = model.encode_batch(&x)?;
    let recon = model.decode_batch(&z)?;
    let pooled = pooled_latents(model, data, idx)?;
    let gallery = RetrievalIndex::new(data.image_anchors(), (0..data.anchors.len()).collect())?;
    let labels: Vec<usize> = idx.iter().map(|&i| data.windows[i].label).collect();
    let k5 = 5.min(gallery.len());
    let acc = |k| topk_label(&pooled, &labels, &gallery, k);
    Ok(Stage1Eval {
        mse: losses::mse_value(&x, &recon)?,
        dice: losses::dice_score(&x, &recon)?,
        top1: acc(1)?,
        top5: acc(k5)?,
    })
}

fn topk_label(q: &Tensor, labels: &[usize], gallery: &RetrievalIndex, k: usize) -> Result<f64> {
    eval::topk_retrieval(
        q,
        labels,
        labels,
        gallery,
        k,
        RetrievalMode::Label,
        &Scope::Global,
    )
}

pub struct Stage1Result {
    pub model: Autoencoder,
    pub log: MetricLog,
    pub final_eval: Stage1Eval,
}

/// Optimizes the weighted reconstruction, alignment and contrastive objective
/// over the training split.
pub fn train_stage1(cfg: &RunConfig, data: &Dataset) -> Result<Stage1Result> {
    cfg.validate()?;
    let mut model = Autoencoder::new(cfg.encoder(), derive_seed(cfg.seed, streams::ENCODER_INIT))?;
    let mut opt = Adam::new(cfg.optim.clone(), cfg.stage1.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::STAGE1_SHUFFLE));
    let mut order = data.manifest.splits.train.clone();
    let val = &data.manifest.splits.val;
    let mut log = MetricLog::default();
    let w = &cfg.loss;
    let mut final_eval = None;
    for epoch in 1..=cfg.stage1.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut steps = 0usize;
        for (step, b) in batches(&order, cfg.stage1.batch_size, 2)
            .into_iter()
            .enumerate()
        {
            let mut s = Session::new();
            s.bind(&model.params, |_| true);
            let x = s.constant(data.batch(&b)?);
            let text = s.constant(data.text_batch(&b)?);
            let image = s.constant(data.image_batch(&b)?);
            let z = model.encode(&mut s, x, Mode::Train)?;
            let recon = model.decode(&mut s, z)?;
            let pooled = model.mean_pool(&mut s, z)?;
            let inputs = Stage1Inputs {
                signal: x,
                reconstruction: recon,
                latent: z,
                text,
                pooled,
                image,
            };
            let terms = losses::stage1_loss(&mut s.graph, &inputs, w)?;
            let vals = [terms.total, terms.recon, terms.align, terms.contrastive]
                .map(|v| s.graph.value(v).item());
            check_finite(vals[0], epoch, step, "stage-1 loss")?;
            let grads = s.gradients(terms.total)?;
            opt.step(&mut model.params, &grads)?;
            nn::apply_bn_updates(&mut model.params, &s)?;
            sums.iter_mut().zip(vals).for_each(|(a, v)| *a += v);
            steps += 1;
        }
        let steps = steps.max(1) as f64;
        for (name, v) in ["loss_total", "loss_recon", "loss_align", "loss_contrastive"]
            .iter()
            .zip(sums)
        {
            log.push(epoch, name, v / steps);
        }
        if !val.is_empty() {
            let e = evaluate_stage1(&model, data, val)?;
            log.push(epoch, "val_mse", e.mse);
            log.push(epoch, "val_dice", e.dice);
            log.push(epoch, "val_top1", e.top1);
            log.push(epoch, "val_top5", e.top5);
            final_eval = Some(e);
        }
    }
    let final_eval = match final_eval {
        Some(e) => e,
        None => evaluate_stage1(&model, data, &data.manifest.splits.train)?,
    };
    Ok(Stage1Result {
        model,
        log,
        final_eval,
    })
}

/// Evaluation-mode encoder latents `[n, T, D]` of the items at `idx`.
pub fn encode_items(model: &Autoencoder, data: &Dataset, idx: &[usize]) -> Result<Tensor> {
    model.encode_batch(&data.batch(idx)?)
}

/// Text anchors padded with zero rows to the full condition length.
pub fn text_conditions(data: &Dataset, idx: &[usize]) -> Result<Tensor> {
    let text = data.text_batch(idx)?;
    let (n, t, d) = (idx.len(), text.shape()[1], text.shape()[2]);
    let rows = t + diffusion::ADAPTER_TOKENS;
    let mut out = vec![0.0; n * rows * d];
    for i in 0..n {
        out[i * rows * d..i * rows * d + t * d]
            .copy_from_slice(&text.data()[i * t * d..(i + 1) * t * d]);
    }
    Ok(Tensor::new([n, rows, d], out)?)
}

fn gather(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let per = t.numel() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    let data = idx
        .iter()
        .flat_map(|&i| t.data()[i * per..(i + 1) * per].iter().copied())
        .collect();
    Ok(Tensor::new(shape, data)?)
}

pub struct Stage2Result {
    pub model: DiffusionModel,
    /// Parameters when selective finetuning began.
    pub base: DiffusionModel,
    pub mask: TrainMask,
    pub log: MetricLog,
}

#[derive(Clone, Copy)]
struct PhaseHyper {
    lr: f64,
    epochs: usize,
    drop_prob: f64,
    gamma: f64,
}

#[allow(clippy::too_many_arguments)]
fn run_phase(
    model: &mut DiffusionModel,
    schedule: &NoiseSchedule,
    mask: &TrainMask,
    conditions: &Tensor,
    encoded: bool,
    targets: &Tensor,
    hyper: PhaseHyper,
    cfg: &RunConfig,
    seed: u64,
    metric: &str,
    log: &mut MetricLog,
) -> Result<()> {
    let mut opt = Adam::new(cfg.optim.clone(), hyper.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..targets.shape()[0]).collect();
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for (step, b) in batches(&order, cfg.stage2.batch_size, 1)
            .into_iter()
            .enumerate()
        {
            let x0 = gather(targets, &b)?;
            let c = gather(conditions, &b)?;
            let inputs = StepInputs {
                x0: &x0,
                condition: if encoded {
                    ConditionSource::Encoded(&c)
                } else {
                    ConditionSource::Fixed(&c)
                },
                drop_prob: hyper.drop_prob,
                gamma: hyper.gamma,
            };
            let out = diffusion::stage2_step(model, schedule, mask, &inputs, &mut rng)?;
            check_finite(out.loss, epoch, step, metric)?;
            opt.step(&mut model.params, &out.gradients)?;
            total += out.loss;
            steps += 1;
        }
        log.push(epoch, metric, total / steps.max(1) as f64);
    }
    Ok(())
}

/// Fits the denoiser on text-anchor conditions, then finetunes only the
/// adapter and cross-attention key/value projections on frozen encoder
/// latents.
pub fn train_stage2(
    cfg: &RunConfig,
    data: &Dataset,
    encoder: &Autoencoder,
) -> Result<Stage2Result> {
    cfg.validate()?;
    let base = DiffusionModel::new(
        cfg.denoiser(),
        derive_seed(cfg.seed, streams::DENOISER_INIT),
    )?;
    pretrain_and_finetune(cfg, data, encoder, base)
}

/// As [`train_stage2`], starting from the given denoiser parameters.
pub fn pretrain_and_finetune(
    cfg: &RunConfig,
    data: &Dataset,
    encoder: &Autoencoder,
    mut model: DiffusionModel,
) -> Result<Stage2Result> {
    let st = &cfg.stage2;
    let schedule = diffusion::build_schedule(st.schedule_steps, st.beta_min, st.beta_max)?;
    let train = &data.manifest.splits.train;
    let targets = data.latent_batch(train)?;
    let mut log = MetricLog::default();

    let full = TrainMask::denoiser(&model);
    let text = text_conditions(data, train)?;
    run_phase(
        &mut model,
        &schedule,
        &full,
        &text,
        false,
        &targets,
        PhaseHyper {
            lr: st.pretrain_lr,
            epochs: st.pretrain_epochs,
            drop_prob: st.pretrain_drop_prob,
            gamma: st.pretrain_gamma,
        },
        cfg,
        derive_seed(cfg.seed, streams::PRETRAIN),
        "pretrain_v_loss",
        &mut log,
    )?;
    let base = model.clone();

    let mask = TrainMask::selective(&model);
    let latents = encode_items(encoder, data, train)?;
    run_phase(
        &mut model,
        &schedule,
        &mask,
        &latents,
        true,
        &targets,
        PhaseHyper {
            lr: st.lr,
            epochs: st.epochs,
            drop_prob: st.drop_prob,
            gamma: st.gamma,
        },
        cfg,
        derive_seed(cfg.seed, streams::FINETUNE),
        "v_loss",
        &mut log,
    )?;
    Ok(Stage2Result {
        model,
        base,
        mask,
        log,
    })
}

/// Conditions, conditioning labels and real latents for generating
/// `per_item` samples from each item at `idx`.
pub struct GenerationSet {
    pub conditions: Tensor,
    pub labels: Vec<usize>,
    pub real: Tensor,
}

pub fn generation_set(
    encoder: &Autoencoder,
    model: &DiffusionModel,
    data: &Dataset,
    idx: &[usize],
    per_item: usize,
) -> Result<GenerationSet> {
    let cond = model.conditions(&encode_items(encoder, data, idx)?)?;
    let rep: Vec<usize> = (0..idx.len())
        .flat_map(|i| std::iter::repeat_n(i, per_item))
        .collect();
    Ok(GenerationSet {
        conditions: gather(&cond, &rep)?,
        labels: rep.iter().map(|&i| data.windows[idx[i]].label).collect(),
        real: data.latent_batch(idx)?,
    })
}

/// Class agreement and Fréchet distance of samples drawn at `scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerationMetrics {
    pub scale: f64,
    pub class_agreement: f64,
    pub frechet_distance: f64,
}

pub fn generation_metrics(
    samples: &Tensor,
    set: &GenerationSet,
    data: &Dataset,
    scale: f64,
) -> Result<GenerationMetrics> {
    let ga = eval::class_agreement(samples, &set.labels, &data.latent_anchors)?;
    let gen = eval::GaussianStats::fit(samples)?;
    let real = eval::GaussianStats::fit(&set.real)?;
    Ok(GenerationMetrics {
        scale,
        class_agreement: ga,
        frechet_distance: eval::frechet_distance(&gen, &real)?,
    })
}

/// Items conditioned on during generation: validation and test splits.
pub fn generation_items(data: &Dataset) -> Vec<usize> {
    let s = &data.manifest.splits;
    let mut idx: Vec<usize> = s.val.iter().chain(&s.test).copied().collect();
    idx.sort_unstable();
    idx
}

/// Parameters that differ bit-for-bit between two stores.
pub fn changed_params(a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>) -> Vec<String> {
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let mut out: Vec<String> = a
        .iter()
        .filter(|(k, v)| {
            b.get(*k)
                .is_none_or(|w| w.shape() != v.shape() || bits(w) != bits(v))
        })
        .map(|(k, _)| k.clone())
        .collect();
    out.extend(b.keys().filter(|k| !a.contains_key(*k)).cloned());
    out
}
