//! Toy dual encoder: mean-pooled token embeddings through an affine map and
//! `tanh`, with exact backward pass.

use crate::corpus::fnv1a;
use crate::error::{Error, Result};
use crate::seeded_rng;
use crate::tensor::{axpy, Matrix};

pub const DEFAULT_INIT_SCALE: f64 = 0.1;

/// Parameters of one encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `V × d` token embeddings.
    pub embed: Matrix,
    /// `d × d` projection.
    pub proj: Matrix,
    pub bias: Vec<f64>,
}

/// Gradients, shaped exactly like [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub embed: Matrix,
    pub proj: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoderParams {
    pub question: EncoderParams,
    pub passage: EncoderParams,
}

/// Deterministic uniform initialization. Each parameter draws from its own
/// stream keyed by `(seed, "{tag}.{name}")`.
pub fn init_encoder(seed: u64, tag: &str, vocab: usize, dim: usize, scale: f64) -> EncoderParams {
    assert!(vocab >= 2 && dim >= 1 && scale > 0.0, "bad encoder dims");
    let stream = |name: &str| seeded_rng(seed, &format!("{tag}.{name}"));
    EncoderParams {
        embed: Matrix::uniform(vocab, dim, scale, &mut stream("embed")),
        proj: Matrix::uniform(dim, dim, scale, &mut stream("proj")),
        bias: Matrix::uniform(1, dim, scale, &mut stream("bias"))
            .as_slice()
            .to_vec(),
    }
}

impl DualEncoderParams {
    /// Both towers start from the same weights, the way a DPR question and
    /// passage encoder both start from one pretrained checkpoint.
    pub fn init(seed: u64, vocab: usize, dim: usize, scale: f64) -> Self {
        let base = init_encoder(seed, "encoder", vocab, dim, scale);
        Self {
            question: base.clone(),
            passage: base,
        }
    }

    /// Towers drawn from independent streams.
    pub fn init_independent(seed: u64, vocab: usize, dim: usize, scale: f64) -> Self {
        Self {
            question: init_encoder(seed, "question", vocab, dim, scale),
            passage: init_encoder(seed, "passage", vocab, dim, scale),
        }
    }
}

impl EncoderParams {
    pub fn vocab(&self) -> usize {
        self.embed.rows()
    }

    pub fn dim(&self) -> usize {
        self.embed.cols()
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        let vocab = self.vocab();
        match tokens.iter().find(|&&t| t as usize >= vocab) {
            Some(&id) => Err(Error::TokenOutOfRange { id, vocab }),
            None => Ok(()),
        }
    }

    /// Encodes a token sequence to a `d`-vector in `(-1, 1)^d`.
    pub fn encode(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        Ok(self.forward(tokens).1)
    }

    /// Returns `(pooled, output)`. Tokens must already be validated.
    fn forward(&self, tokens: &[u32]) -> (Vec<f64>, Vec<f64>) {
        let pooled = self.embed.mean_rows(tokens.iter().map(|&t| t as usize));
        let mut out = self.proj.matvec(&pooled);
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o = (*o + b).tanh();
        }
        (pooled, out)
    }

    /// Gradients of `upstream · encode(tokens)`.
    pub fn encode_backward(&self, tokens: &[u32], upstream: &[f64]) -> Result<EncoderGrads> {
        let mut grads = EncoderGrads::zeros_like(self);
        self.accumulate_backward(tokens, upstream, 1.0, &mut grads)?;
        Ok(grads)
    }

    /// Adds `weight ·` the gradient of `upstream · encode(tokens)` into `grads`.
    pub fn accumulate_backward(
        &self,
        tokens: &[u32],
        upstream: &[f64],
        weight: f64,
        grads: &mut EncoderGrads,
    ) -> Result<()> {
        self.check_tokens(tokens)?;
        if upstream.len() != self.dim() {
            return Err(Error::Shape(format!(
                "upstream has length {}, encoder dim is {}",
                upstream.len(),
                self.dim()
            )));
        }
        let (pooled, out) = self.forward(tokens);
        let g_pre: Vec<f64> = upstream
            .iter()
            .zip(&out)
            .map(|(u, e)| weight * u * (1.0 - e * e))
            .collect();
        grads.proj.add_outer(1.0, &g_pre, &pooled);
        axpy(&mut grads.bias, 1.0, &g_pre);
        if !tokens.is_empty() {
            let mut g_pooled = self.proj.matvec_t(&g_pre);
            let inv = 1.0 / tokens.len() as f64;
            g_pooled.iter_mut().for_each(|g| *g *= inv);
            for &t in tokens {
                axpy(grads.embed.row_mut(t as usize), 1.0, &g_pooled);
            }
        }
        Ok(())
    }

    /// `params -= lr · grads`, rounded back to storage precision.
    pub fn sgd_step(&mut self, grads: &EncoderGrads, lr: f64) {
        self.embed.add_scaled(-lr, &grads.embed);
        self.proj.add_scaled(-lr, &grads.proj);
        axpy(&mut self.bias, -lr, &grads.bias);
        self.embed.round_to_storage();
        self.proj.round_to_storage();
        self.bias.iter_mut().for_each(|b| *b = crate::tensor::to_storage(*b));
    }

    pub fn is_finite(&self) -> bool {
        self.embed.is_finite() && self.proj.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }

    /// FNV-1a over the little-endian bytes of every parameter, in
    /// embed/proj/bias order.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::with_capacity(8 * (self.embed.as_slice().len() + self.proj.as_slice().len() + self.bias.len()));
        for x in self
            .embed
            .as_slice()
            .iter()
            .chain(self.proj.as_slice())
            .chain(&self.bias)
        {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        fnv1a(&bytes)
    }
}

impl EncoderGrads {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        Self {
            embed: Matrix::zeros(params.embed.rows(), params.embed.cols()),
            proj: Matrix::zeros(params.proj.rows(), params.proj.cols()),
            bias: vec![0.0; params.bias.len()],
        }
    }

    pub fn clear(&mut self) {
        self.embed.fill(0.0);
        self.proj.fill(0.0);
        self.bias.iter_mut().for_each(|b| *b = 0.0);
    }

    /// Flattened embed/proj/bias.
    pub fn flatten(&self) -> Vec<f64> {
        self.embed
            .as_slice()
            .iter()
            .chain(self.proj.as_slice())
            .chain(&self.bias)
            .copied()
            .collect()
    }
}
