//! Small layer helpers shared by the encoder and the denoiser.

use ndiff::{Tensor, Var};

use crate::error::{Error, Result};
use crate::params::{ParamStore, Session};

pub const NORM_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in batch-norm updates.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated afterwards.
    Train,
    /// Running statistics; forward is independent of batch composition.
    Eval,
}

/// `x · W + b` over the last axis, with `W = {prefix}.weight` and `b = {prefix}.bias`.
pub fn linear(s: &mut Session, x: Var, prefix: &str) -> Result<Var> {
    let w = s.p(&format!("{prefix}.weight"))?;
    let y = s.graph.matmul(x, w)?;
    match s.p(&format!("{prefix}.bias")) {
        Ok(b) => Ok(s.graph.add(y, b)?),
        Err(_) => Ok(y),
    }
}

/// Layer norm over the last axis followed by a learned gain and shift.
pub fn layer_norm(s: &mut Session, x: Var, prefix: &str) -> Result<Var> {
    let n = s.graph.layer_norm(x, NORM_EPS)?;
    let gamma = s.p(&format!("{prefix}.gamma"))?;
    let beta = s.p(&format!("{prefix}.beta"))?;
    let y = s.graph.mul(n, gamma)?;
    Ok(s.graph.add(y, beta)?)
}

/// Batch norm over the rows of a `[rows, features]` matrix.
pub fn batch_norm(
    s: &mut Session,
    store: &ParamStore,
    x: Var,
    prefix: &str,
    mode: Mode,
) -> Result<Var> {
    let normalized = match mode {
        Mode::Train => {
            let rows = s.graph.shape(x)[0];
            if rows < 2 {
                return Err(Error::Invalid(format!(
                    "{prefix}: training-mode batch norm needs at least 2 rows"
                )));
            }
            let (y, mean, var) = s.graph.batch_norm(x, NORM_EPS)?;
            s.bn_batches.push((prefix.to_string(), mean, var, rows));
            y
        }
        Mode::Eval => {
            let mean = store.get(&format!("{prefix}.running_mean"))?.clone();
            let var = store.get(&format!("{prefix}.running_var"))?;
            let inv = var.map(|v| 1.0 / (v + NORM_EPS).sqrt());
            let m = s.constant(mean);
            let i = s.constant(inv);
            let centered = s.graph.sub(x, m)?;
            s.graph.mul(centered, i)?
        }
    };
    let gamma = s.p(&format!("{prefix}.gamma"))?;
    let beta = s.p(&format!("{prefix}.beta"))?;
    let y = s.graph.mul(normalized, gamma)?;
    Ok(s.graph.add(y, beta)?)
}

/// Folds the batch statistics recorded in `s` into the running statistics.
pub fn apply_bn_updates(store: &mut ParamStore, s: &Session) -> Result<()> {
    for (prefix, mean, var, rows) in &s.bn_batches {
        let unbias = *rows as f64 / (*rows as f64 - 1.0);
        let rm = store.get_mut(&format!("{prefix}.running_mean"))?;
        for (r, m) in rm.data_mut().iter_mut().zip(mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
        }
        let rv = store.get_mut(&format!("{prefix}.running_var"))?;
        for (r, v) in rv.data_mut().iter_mut().zip(var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v * unbias;
        }
    }
    Ok(())
}

pub fn insert_batch_norm(store: &mut ParamStore, prefix: &str, features: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), Tensor::full([features], 1.0))?;
    store.insert(format!("{prefix}.beta"), Tensor::zeros([features]))?;
    store.insert(format!("{prefix}.running_mean"), Tensor::zeros([features]))?;
    store.insert(
        format!("{prefix}.running_var"),
        Tensor::full([features], 1.0),
    )?;
    Ok(())
}

pub fn insert_layer_norm(store: &mut ParamStore, prefix: &str, features: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), Tensor::full([features], 1.0))?;
    store.insert(format!("{prefix}.beta"), Tensor::zeros([features]))?;
    Ok(())
}

fn split_heads(s: &mut Session, x: Var, heads: usize) -> Result<Var> {
    let sh = s.graph.shape(x).to_vec();
    let (b, l, d) = (sh[0], sh[1], sh[2]);
    let r = s.graph.reshape(x, &[b, l, heads, d / heads])?;
    let p = s.graph.permute(r, &[0, 2, 1, 3])?;
    Ok(s.graph.reshape(p, &[b * heads, l, d / heads])?)
}

/// Scaled dot-product attention with `heads` heads partitioning the model width.
///
/// `q: [b, lq, d]`, `k`, `v: [b, lk, d]`. Returns the merged output `[b, lq, d]`
/// and the attention weights `[b * heads, lq, lk]`.
pub fn attention(s: &mut Session, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Var)> {
    let sq = s.graph.shape(q).to_vec();
    let (b, lq, d) = (sq[0], sq[1], sq[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "width {d} not divisible by {heads} heads"
        )));
    }
    let qh = split_heads(s, q, heads)?;
    let kh = split_heads(s, k, heads)?;
    let vh = split_heads(s, v, heads)?;
    let kt = s.graph.transpose(kh)?;
    let scores = s.graph.matmul(qh, kt)?;
    let scaled = s.graph.scale(scores, 1.0 / ((d / heads) as f64).sqrt())?;
    let weights = s.graph.softmax(scaled, 2)?;
    let mixed = s.graph.matmul(weights, vh)?;
    let r = s.graph.reshape(mixed, &[b, heads, lq, d / heads])?;
    let p = s.graph.permute(r, &[0, 2, 1, 3])?;
    let out = s.graph.reshape(p, &[b, lq, d])?;
    Ok((out, weights))
}
