//! Signal autoencoder: per-channel temporal projection, self-attention across
//! channels, and a separable bottleneck onto a `(tokens, width)` latent.
//!
//! Each channel's full time series is one feature vector, mapped by a shared
//! linear projection `S -> D_T`. Channels then act as attention tokens with no
//! positional encoding, so the encoder is equivariant to channel permutations
//! up to the bottleneck. The bottleneck factorizes the flatten-then-dense map
//! into a feature map `D_T -> D` and a token map `C -> T`.

use ndiff::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Mode};
use crate::params::{Init, ParamStore, Session};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: usize,
    pub samples: usize,
    pub tokens: usize,
    pub width: usize,
    pub temporal_width: usize,
    pub heads: usize,
    pub depth: usize,
}

impl EncoderConfig {
    /// Desk-scale dimensions.
    pub fn desk() -> Self {
        Self {
            channels: 16,
            samples: 64,
            tokens: 8,
            width: 32,
            temporal_width: 128,
            heads: 8,
            depth: 2,
        }
    }

    /// 128 channels x 440 samples onto the 77 x 1024 text-embedding grid.
    pub fn full_scale() -> Self {
        Self {
            channels: 128,
            samples: 440,
            tokens: 77,
            width: 1024,
            temporal_width: 128,
            heads: 8,
            depth: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.channels,
            self.samples,
            self.tokens,
            self.width,
            self.temporal_width,
            self.heads,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!(
                "encoder dimensions must be positive: {self:?}"
            )));
        }
        if !self.temporal_width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "temporal width {} not divisible by {} heads",
                self.temporal_width, self.heads
            )));
        }
        Ok(())
    }
}

/// Latent sequence `(T, D)` produced by the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence(pub Tensor);

impl LatentSequence {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.ndim() != 2 || !t.is_finite() {
            return Err(Error::Invalid(format!(
                "latent must be a finite (T, D) matrix, got {:?}",
                t.shape()
            )));
        }
        Ok(Self(t))
    }

    pub fn tokens(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    /// Arithmetic mean over the token axis.
    pub fn mean_pool(&self) -> Vec<f64> {
        mean_pool(&self.0)
    }
}

/// Column means of a `(T, D)` matrix.
pub fn mean_pool(latent: &Tensor) -> Vec<f64> {
    let (t, d) = (latent.shape()[0], latent.shape()[1]);
    let mut out = vec![0.0; d];
    for r in 0..t {
        for (o, v) in out.iter_mut().zip(latent.row(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= t as f64);
    out
}

/// Encoder (`enc.*`) and decoder (`dec.*`) parameters.
#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub config: EncoderConfig,
    pub params: ParamStore,
}

impl Autoencoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let EncoderConfig {
            channels: c,
            samples: s,
            tokens: t,
            width: d,
            temporal_width: dt,
            ..
        } = config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut p = ParamStore::new();

        p.insert("enc.temporal.proj.weight", init.glorot(&[s, dt], s, dt))?;
        p.insert("enc.temporal.proj.bias", Tensor::zeros([dt]))?;
        nn::insert_batch_norm(&mut p, "enc.temporal.bn", dt)?;
        if s != dt {
            p.insert("enc.temporal.shortcut.weight", init.glorot(&[s, dt], s, dt))?;
        }
        for i in 0..config.depth {
            for proj in ["q", "k", "v", "o"] {
                p.insert(
                    format!("enc.spatial.{i}.{proj}.weight"),
                    init.glorot(&[dt, dt], dt, dt),
                )?;
                p.insert(format!("enc.spatial.{i}.{proj}.bias"), Tensor::zeros([dt]))?;
            }
            nn::insert_layer_norm(&mut p, &format!("enc.spatial.{i}.ln"), dt)?;
        }
        p.insert(
            "enc.bottleneck.feature.weight",
            init.glorot(&[dt, d], dt, d),
        )?;
        p.insert("enc.bottleneck.token.weight", init.glorot(&[c, t], c, t))?;
        p.insert("enc.bottleneck.bias", Tensor::zeros([t, d]))?;

        p.insert("dec.expand.token.weight", init.glorot(&[t, c], t, c))?;
        p.insert("dec.expand.feature.weight", init.glorot(&[d, dt], d, dt))?;
        p.insert("dec.expand.bias", Tensor::zeros([c, dt]))?;
        p.insert("dec.out.weight", init.glorot(&[dt, s], dt, s))?;
        p.insert("dec.out.bias", Tensor::zeros([s]))?;
        Ok(Self { config, params: p })
    }

    fn check_input(&self, s: &Session, x: Var) -> Result<()> {
        let sh = s.graph.shape(x);
        if sh.len() != 3 || sh[1] != self.config.channels || sh[2] != self.config.samples {
            return Err(Error::ParamShape {
                name: "encoder input".into(),
                expected: vec![0, self.config.channels, self.config.samples],
                found: sh.to_vec(),
            });
        }
        Ok(())
    }

    /// `[n, C, S] -> [n, C, D_T]`: shared projection, batch norm over
    /// `(n, C)`, relu, and a (projected) residual.
    pub fn temporal_block(&self, s: &mut Session, x: Var, mode: Mode) -> Result<Var> {
        self.check_input(s, x)?;
        let sh = s.graph.shape(x).to_vec();
        let (n, c, dt) = (sh[0], sh[1], self.config.temporal_width);
        let h = nn::linear(s, x, "enc.temporal.proj")?;
        let flat = s.graph.reshape(h, &[n * c, dt])?;
        let bn = nn::batch_norm(s, &self.params, flat, "enc.temporal.bn", mode)?;
        let act = s.graph.relu(bn)?;
        let act = s.graph.reshape(act, &[n, c, dt])?;
        let shortcut = if self.config.samples != dt {
            let w = s.p("enc.temporal.shortcut.weight")?;
            s.graph.matmul(x, w)?
        } else {
            x
        };
        Ok(s.graph.add(act, shortcut)?)
    }

    /// Multi-head self-attention across channels with residual and layer norm.
    /// Returns the block output and its attention weights.
    pub fn spatial_block(&self, s: &mut Session, x: Var, index: usize) -> Result<(Var, Var)> {
        let pre = format!("enc.spatial.{index}");
        let q = nn::linear(s, x, &format!("{pre}.q"))?;
        let k = nn::linear(s, x, &format!("{pre}.k"))?;
        let v = nn::linear(s, x, &format!("{pre}.v"))?;
        let (mixed, weights) = nn::attention(s, q, k, v, self.config.heads)?;
        let o = nn::linear(s, mixed, &format!("{pre}.o"))?;
        let res = s.graph.add(x, o)?;
        Ok((nn::layer_norm(s, res, &format!("{pre}.ln"))?, weights))
    }

    /// `[n, C, S] -> [n, T, D]`.
    pub fn encode(&self, s: &mut Session, x: Var, mode: Mode) -> Result<Var> {
        let mut h = self.temporal_block(s, x, mode)?;
        for i in 0..self.config.depth {
            h = self.spatial_block(s, h, i)?.0;
        }
        let wf = s.p("enc.bottleneck.feature.weight")?;
        let wt = s.p("enc.bottleneck.token.weight")?;
        let b = s.p("enc.bottleneck.bias")?;
        let f = s.graph.matmul(h, wf)?; // [n, C, D]
        let f = s.graph.transpose(f)?; // [n, D, C]
        let z = s.graph.matmul(f, wt)?; // [n, D, T]
        let z = s.graph.transpose(z)?; // [n, T, D]
        Ok(s.graph.add(z, b)?)
    }

    /// `[n, T, D] -> [n, C, S]`. Consumes only the latent.
    pub fn decode(&self, s: &mut Session, z: Var) -> Result<Var> {
        let sh = s.graph.shape(z).to_vec();
        if sh.len() != 3 || sh[1] != self.config.tokens || sh[2] != self.config.width {
            return Err(Error::ParamShape {
                name: "decoder input".into(),
                expected: vec![0, self.config.tokens, self.config.width],
                found: sh,
            });
        }
        let wt = s.p("dec.expand.token.weight")?;
        let wf = s.p("dec.expand.feature.weight")?;
        let b = s.p("dec.expand.bias")?;
        let zt = s.graph.transpose(z)?; // [n, D, T]
        let h = s.graph.matmul(zt, wt)?; // [n, D, C]
        let h = s.graph.transpose(h)?; // [n, C, D]
        let h = s.graph.matmul(h, wf)?; // [n, C, D_T]
        let h = s.graph.add(h, b)?;
        nn::linear(s, h, "dec.out")
    }

    /// Mean over the token axis: `[n, T, D] -> [n, D]`.
    pub fn mean_pool(&self, s: &mut Session, z: Var) -> Result<Var> {
        Ok(s.graph.mean(z, 1)?)
    }

    /// Evaluation-mode latents for a batch of windows `[n, C, S]`.
    pub fn encode_batch(&self, windows: &Tensor) -> Result<Tensor> {
        let mut s = Session::new();
        s.bind(&self.params, |_| false);
        let x = s.constant(windows.clone());
        let z = self.encode(&mut s, x, Mode::Eval)?;
        Ok(s.graph.value(z).clone())
    }

    /// Evaluation-mode latent of one `(C, S)` window.
    pub fn encode_window(&self, window: &Tensor) -> Result<LatentSequence> {
        let (c, sm) = (self.config.channels, self.config.samples);
        if window.shape() != [c, sm] {
            return Err(Error::ParamShape {
                name: "window".into(),
                expected: vec![c, sm],
                found: window.shape().to_vec(),
            });
        }
        let z = self.encode_batch(&window.reshaped([1, c, sm])?)?;
        LatentSequence::new(z.reshaped([self.config.tokens, self.config.width])?)
    }

    /// Decodes a batch of latents `[n, T, D]` to signals `[n, C, S]`.
    pub fn decode_batch(&self, latents: &Tensor) -> Result<Tensor> {
        let mut s = Session::new();
        s.bind(&self.params, |_| false);
        let z = s.constant(latents.clone());
        let y = self.decode(&mut s, z)?;
        Ok(s.graph.value(y).clone())
    }
}
