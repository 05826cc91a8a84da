//! Training objectives for both stages.

use ndiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this denominator the signal Dice loss is defined as 0.
pub const SDSC_DENOM_FLOOR: f64 = 1e-8;
/// SNR is clamped to this range before weighting.
pub const SNR_RANGE: (f64, f64) = (1e-8, 1e8);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub sdsc: f64,
    pub mse: f64,
    pub cos: f64,
    pub recon: f64,
    pub align: f64,
    pub contrastive: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sdsc: 0.2,
            mse: 1.0,
            cos: 1.0,
            recon: 1.0,
            align: 1.0,
            contrastive: 0.5,
            temperature: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            self.sdsc,
            self.mse,
            self.cos,
            self.recon,
            self.align,
            self.contrastive,
        ];
        if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

fn same_shape(g: &Graph, op: &str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Invalid(format!(
            "{op}: shapes {:?} and {:?} differ",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

/// Signal Dice loss: one minus the sigmoid-gated overlap of magnitudes,
/// summed over every element.
pub fn sdsc_loss(g: &mut Graph, e: Var, e_hat: Var) -> Result<Var> {
    same_shape(g, "sdsc_loss", e, e_hat)?;
    let ae = g.abs(e)?;
    let ah = g.abs(e_hat)?;
    let denom_t = g.add(ae, ah)?;
    let denom = g.sum_all(denom_t)?;
    if g.value(denom).item() < SDSC_DENOM_FLOOR {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let prod = g.mul(e, e_hat)?;
    let gate = g.sigmoid(prod)?;
    let overlap = g.min(ae, ah)?;
    let gated = g.mul(gate, overlap)?;
    let num = g.sum_all(gated)?;
    let ratio = g.div(num, denom)?;
    let dice = g.scale(ratio, 2.0)?;
    let neg = g.scale(dice, -1.0)?;
    Ok(g.add_scalar(neg, 1.0)?)
}

/// Mean squared error over all elements.
pub fn mse(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    same_shape(g, "mse", a, b)?;
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean_all(sq)?)
}

/// `mse + λ_sdsc · sdsc`.
pub fn recon_loss(g: &mut Graph, e: Var, e_hat: Var, w: &LossWeights) -> Result<Var> {
    let m = mse(g, e, e_hat)?;
    let d = sdsc_loss(g, e, e_hat)?;
    let wd = g.scale(d, w.sdsc)?;
    Ok(g.add(m, wd)?)
}

/// `λ_mse · mse + λ_cos · (1 - mean row cosine)`; cosine taken over the last axis.
pub fn text_align_loss(g: &mut Graph, z: Var, z_text: Var, w: &LossWeights) -> Result<Var> {
    same_shape(g, "text_align_loss", z, z_text)?;
    let m = mse(g, z, z_text)?;
    let axis = g.shape(z).len() - 1;
    let cos = g.cosine_similarity(z, z_text, axis)?;
    let mc = g.mean_all(cos)?;
    let one_minus = g.scale(mc, -1.0)?;
    let one_minus = g.add_scalar(one_minus, 1.0)?;
    let a = g.scale(m, w.mse)?;
    let b = g.scale(one_minus, w.cos)?;
    Ok(g.add(a, b)?)
}

/// InfoNCE over cosine similarities between rows of `z_bar: [n, d]` and
/// `z_image: [n, d]`; row `i` of each is a positive pair.
pub fn contrastive_loss(g: &mut Graph, z_bar: Var, z_image: Var, temperature: f64) -> Result<Var> {
    same_shape(g, "contrastive_loss", z_bar, z_image)?;
    let sh = g.shape(z_bar).to_vec();
    if sh.len() != 2 || sh[0] == 0 {
        return Err(Error::Invalid(format!(
            "contrastive_loss: expected [n >= 1, d], got {sh:?}"
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Invalid(format!(
            "contrastive_loss: temperature {temperature} must be positive"
        )));
    }
    let (n, d) = (sh[0], sh[1]);
    let a = g.reshape(z_bar, &[n, 1, d])?;
    let b = g.reshape(z_image, &[1, n, d])?;
    let sim = g.cosine_similarity(a, b, 2)?; // [n, n]
    let logits = g.scale(sim, 1.0 / temperature)?;
    let logp = g.log_softmax(logits, 1)?;
    let eye = g.constant(Tensor::from_fn([n, n], |i| {
        if i / n == i % n {
            1.0
        } else {
            0.0
        }
    }));
    let diag = g.mul(logp, eye)?;
    let total = g.sum_all(diag)?;
    Ok(g.scale(total, -1.0 / n as f64)?)
}

/// The individual Stage-1 terms and their weighted total.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Terms {
    pub recon: Var,
    pub align: Var,
    pub contrastive: Var,
    pub total: Var,
}

pub struct Stage1Inputs {
    pub signal: Var,
    pub reconstruction: Var,
    pub latent: Var,
    pub text: Var,
    pub pooled: Var,
    pub image: Var,
}

pub fn stage1_loss(g: &mut Graph, x: &Stage1Inputs, w: &LossWeights) -> Result<Stage1Terms> {
    let recon = recon_loss(g, x.signal, x.reconstruction, w)?;
    let align = text_align_loss(g, x.latent, x.text, w)?;
    let contrastive = contrastive_loss(g, x.pooled, x.image, w.temperature)?;
    let a = g.scale(recon, w.recon)?;
    let b = g.scale(align, w.align)?;
    let c = g.scale(contrastive, w.contrastive)?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(Stage1Terms {
        recon,
        align,
        contrastive,
        total,
    })
}

/// `v = α·ε − σ·x0`.
pub fn v_target(x0: &Tensor, eps: &Tensor, alpha: f64, sigma: f64) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::Invalid(format!(
            "v_target: shapes {:?} and {:?} differ",
            x0.shape(),
            eps.shape()
        )));
    }
    Ok(Tensor::from_fn(x0.shape().to_vec(), |i| {
        alpha * eps.data()[i] - sigma * x0.data()[i]
    }))
}

/// `x_t = α·x0 + σ·ε`.
pub fn forward_noise(x0: &Tensor, eps: &Tensor, alpha: f64, sigma: f64) -> Tensor {
    Tensor::from_fn(x0.shape().to_vec(), |i| {
        alpha * x0.data()[i] + sigma * eps.data()[i]
    })
}

/// Recovers `x0 = α·x_t − σ·v`.
pub fn x0_from_v(x_t: &Tensor, v: &Tensor, alpha: f64, sigma: f64) -> Tensor {
    Tensor::from_fn(x_t.shape().to_vec(), |i| {
        alpha * x_t.data()[i] - sigma * v.data()[i]
    })
}

/// `SNR^{-γ}` with SNR clamped to [`SNR_RANGE`].
pub fn snr_weight(snr: f64, gamma: f64) -> f64 {
    snr.clamp(SNR_RANGE.0, SNR_RANGE.1).powf(-gamma)
}

/// Mean over items of `w_i · mean((v_target − v_pred)²)`, with items along axis 0.
pub fn weighted_v_loss(g: &mut Graph, pred: Var, target: Var, weights: &[f64]) -> Result<Var> {
    same_shape(g, "v_loss", pred, target)?;
    let sh = g.shape(pred).to_vec();
    if sh.is_empty() || sh[0] != weights.len() {
        return Err(Error::Invalid(format!(
            "v_loss: {} weights for batch shape {sh:?}",
            weights.len()
        )));
    }
    let n = sh[0];
    let per = sh.iter().product::<usize>() / n;
    let d = g.sub(target, pred)?;
    let sq = g.mul(d, d)?;
    let flat = g.reshape(sq, &[n, per])?;
    let per_item = g.mean(flat, 1)?;
    let w = g.constant(Tensor::new([n], weights.to_vec())?);
    let weighted = g.mul(per_item, w)?;
    Ok(g.mean(weighted, 0)?)
}

/// Guidance combination `v_u + s·(v_c − v_u)`, evaluated as `(1 − s)·v_u + s·v_c`
/// so that `s = 0` and `s = 1` return the respective input exactly.
pub fn cfg_combine(v_uncond: &Tensor, v_cond: &Tensor, scale: f64) -> Result<Tensor> {
    if v_uncond.shape() != v_cond.shape() {
        return Err(Error::Invalid(format!(
            "cfg_combine: shapes {:?} and {:?} differ",
            v_uncond.shape(),
            v_cond.shape()
        )));
    }
    Ok(Tensor::from_fn(v_uncond.shape().to_vec(), |i| {
        (1.0 - scale) * v_uncond.data()[i] + scale * v_cond.data()[i]
    }))
}

/// The reported Dice term `1 - sdsc_loss`, evaluated without a graph.
pub fn dice_score(e: &Tensor, e_hat: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(e.clone());
    let b = g.constant(e_hat.clone());
    let l = sdsc_loss(&mut g, a, b)?;
    Ok(1.0 - g.value(l).item())
}

/// Mean squared error between two tensors, without a graph.
pub fn mse_value(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Invalid(format!(
            "mse: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / a.numel() as f64)
}
