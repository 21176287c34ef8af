//! Latent-document model: the document posterior `p(z|x)` from fresh encoder
//! scores, the generator likelihood `p(y|x,z)`, and the RAG-sequence loss
//! `-log Σ_z p(z|x) p(y|x,z)` with gradients for every parameter group.
//!
//! The encoders only influence the loss through `p(z|x)`; the generator
//! reads document tokens through its own embedding table.

mod generator;

pub use generator::{GeneratorGrads, GeneratorParams, Trace};

use crate::encoder::{DualEncoderParams, EncoderGrads, EncoderParams};
use crate::error::{Error, Result};
use crate::tensor::{dot, logsumexp};

#[derive(Debug, Clone, PartialEq)]
pub struct DocPosterior {
    pub chunk_ids: Vec<u32>,
    /// Raw inner products `q(x) · d(z)`.
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
}

impl DocPosterior {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `log p(z|x)`, computed from the scores rather than from `probs`.
    pub fn log_probs(&self) -> Vec<f64> {
        let lse = logsumexp(&self.scores);
        self.scores.iter().map(|s| s - lse).collect()
    }

    /// Position of the most probable document; ties go to the earlier one.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Softmax over question/document inner products.
pub fn doc_posterior(
    question_emb: &[f64],
    doc_embs: &[Vec<f64>],
    chunk_ids: &[u32],
) -> Result<DocPosterior> {
    if doc_embs.is_empty() {
        return Err(Error::InvalidArgument("posterior needs at least one document".into()));
    }
    if doc_embs.len() != chunk_ids.len() {
        return Err(Error::Shape(format!(
            "{} documents but {} chunk ids",
            doc_embs.len(),
            chunk_ids.len()
        )));
    }
    if let Some(d) = doc_embs.iter().find(|d| d.len() != question_emb.len()) {
        return Err(Error::Shape(format!(
            "document embedding of length {} against question of length {}",
            d.len(),
            question_emb.len()
        )));
    }
    let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
    if !finite(question_emb) || !doc_embs.iter().all(|d| finite(d)) {
        return Err(Error::NonFinite("posterior inputs".into()));
    }
    let scores: Vec<f64> = doc_embs.iter().map(|d| dot(question_emb, d)).collect();
    let lse = logsumexp(&scores);
    let probs = scores.iter().map(|s| (s - lse).exp()).collect();
    Ok(DocPosterior {
        chunk_ids: chunk_ids.to_vec(),
        scores,
        probs,
    })
}

/// `-log Σ_z p(z|x) · p(y|x,z)` evaluated as a log-sum-exp.
pub fn marginal_nll(posterior: &DocPosterior, logprobs: &[f64]) -> Result<f64> {
    if logprobs.len() != posterior.len() {
        return Err(Error::Shape(format!(
            "{} sequence log-probs for {} documents",
            logprobs.len(),
            posterior.len()
        )));
    }
    let joint: Vec<f64> = posterior
        .log_probs()
        .iter()
        .zip(logprobs)
        .map(|(lp, ll)| lp + ll)
        .collect();
    let nll = -logsumexp(&joint);
    if !nll.is_finite() {
        return Err(Error::NonFinite("marginal nll".into()));
    }
    Ok(nll)
}

/// `p(z|x,y) ∝ p(z|x) · p(y|x,z)`.
pub fn answer_posterior(posterior: &DocPosterior, logprobs: &[f64]) -> Vec<f64> {
    let joint: Vec<f64> = posterior
        .log_probs()
        .iter()
        .zip(logprobs)
        .map(|(lp, ll)| lp + ll)
        .collect();
    let lse = logsumexp(&joint);
    joint.iter().map(|j| (j - lse).exp()).collect()
}

/// `∂L/∂s_z = p(z|x) - p(z|x,y)`.
pub fn score_gradient(posterior: &DocPosterior, logprobs: &[f64]) -> Vec<f64> {
    posterior
        .probs
        .iter()
        .zip(answer_posterior(posterior, logprobs))
        .map(|(p, q)| p - q)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoders: DualEncoderParams,
    pub generator: GeneratorParams,
}

/// Model dimensions: vocabulary, encoder width, generator embedding width
/// and generator hidden width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab: usize,
    pub enc_dim: usize,
    pub gen_dim: usize,
    pub hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            vocab: 3200,
            enc_dim: 128,
            gen_dim: 48,
            hidden: 48,
        }
    }
}

impl ModelParams {
    pub fn init(seed: u64, dims: ModelDims, encoder_scale: f64, generator_scale: f64) -> Self {
        let (v, dg, h) = (dims.vocab, dims.gen_dim, dims.hidden);
        Self {
            encoders: DualEncoderParams::init(seed, v, dims.enc_dim, encoder_scale),
            generator: GeneratorParams::init(seed, v, dg, h, generator_scale),
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab: self.generator.vocab(),
            enc_dim: self.encoders.question.dim(),
            gen_dim: self.generator.embed_dim(),
            hidden: self.generator.hidden_dim(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.encoders.question.is_finite()
            && self.encoders.passage.is_finite()
            && self.generator.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub question: EncoderGrads,
    pub passage: EncoderGrads,
    pub generator: GeneratorGrads,
}

impl ModelGrads {
    pub fn zeros_like(p: &ModelParams) -> Self {
        Self {
            question: EncoderGrads::zeros_like(&p.encoders.question),
            passage: EncoderGrads::zeros_like(&p.encoders.passage),
            generator: GeneratorGrads::zeros_like(&p.generator),
        }
    }

    pub fn clear(&mut self) {
        self.question.clear();
        self.passage.clear();
        self.generator.clear();
    }
}

/// Forward quantities of one example.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleForward {
    pub loss: f64,
    pub posterior: DocPosterior,
    pub logprobs: Vec<f64>,
}

/// Fresh forward pass: encodes the question and every retrieved chunk with
/// the current encoders.
pub fn forward(
    params: &ModelParams,
    question: &[u32],
    chunks: &[(u32, &[u32])],
    answer: &[u32],
) -> Result<ExampleForward> {
    let q = params.encoders.question.encode(question)?;
    let docs = encode_all(&params.encoders.passage, chunks)?;
    let ids: Vec<u32> = chunks.iter().map(|c| c.0).collect();
    let posterior = doc_posterior(&q, &docs, &ids)?;
    let gen = &params.generator;
    let q_ctx = gen.context(question)?;
    let logprobs = chunks
        .iter()
        .map(|(_, toks)| gen.sequence_logprob(&q_ctx, &gen.context(toks)?, answer))
        .collect::<Result<Vec<_>>>()?;
    let loss = marginal_nll(&posterior, &logprobs)?;
    Ok(ExampleForward {
        loss,
        posterior,
        logprobs,
    })
}

fn encode_all(enc: &EncoderParams, chunks: &[(u32, &[u32])]) -> Result<Vec<Vec<f64>>> {
    chunks.iter().map(|(_, toks)| enc.encode(toks)).collect()
}

/// Adds `weight · ∇L` for one example into `grads`. With
/// `passage_grads == false` the passage-encoder gradient is not computed;
/// every other group is unaffected by that choice.
pub fn accumulate_backward(
    params: &ModelParams,
    question: &[u32],
    chunks: &[(u32, &[u32])],
    answer: &[u32],
    weight: f64,
    passage_grads: bool,
    grads: &mut ModelGrads,
) -> Result<ExampleForward> {
    let q = params.encoders.question.encode(question)?;
    let docs = encode_all(&params.encoders.passage, chunks)?;
    let ids: Vec<u32> = chunks.iter().map(|c| c.0).collect();
    let posterior = doc_posterior(&q, &docs, &ids)?;

    let gen = &params.generator;
    // The generator gradient weights are the answer posterior, which needs
    // every document's log-prob first.
    let traces = chunks
        .iter()
        .map(|(_, toks)| gen.trace(question, toks, answer))
        .collect::<Result<Vec<_>>>()?;
    let logprobs: Vec<f64> = traces.iter().map(|t| t.logprob).collect();
    let loss = marginal_nll(&posterior, &logprobs)?;
    let post = answer_posterior(&posterior, &logprobs);

    for (((_, toks), trace), &w) in chunks.iter().zip(&traces).zip(&post) {
        if w != 0.0 {
            gen.backward(trace, question, toks, -weight * w, &mut grads.generator);
        }
    }

    let g_scores: Vec<f64> = posterior.probs.iter().zip(&post).map(|(p, q)| p - q).collect();
    let mut upstream_q = vec![0.0; q.len()];
    for (d, &g) in docs.iter().zip(&g_scores) {
        crate::tensor::axpy(&mut upstream_q, g, d);
    }
    params
        .encoders
        .question
        .accumulate_backward(question, &upstream_q, weight, &mut grads.question)?;
    if passage_grads {
        for ((_, toks), &g) in chunks.iter().zip(&g_scores) {
            let upstream: Vec<f64> = q.iter().map(|x| g * x).collect();
            params
                .encoders
                .passage
                .accumulate_backward(toks, &upstream, weight, &mut grads.passage)?;
        }
    }
    Ok(ExampleForward {
        loss,
        posterior,
        logprobs,
    })
}

/// Loss and full gradient of one example.
pub fn model_backward(
    params: &ModelParams,
    question: &[u32],
    chunks: &[(u32, &[u32])],
    answer: &[u32],
) -> Result<(ExampleForward, ModelGrads)> {
    let mut grads = ModelGrads::zeros_like(params);
    let fwd = accumulate_backward(params, question, chunks, answer, 1.0, true, &mut grads)?;
    Ok((fwd, grads))
}
