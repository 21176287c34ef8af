//! One-layer teacher-forced sequence generator.
//!
//! Each step sees `[question context; document context; previous token]`,
//! where both contexts are means of the generator's own token embeddings.
//! Input ids `V` and `V + 1` are BOS and EOS; output id `V` is EOS.

use crate::error::{Error, Result};
use crate::seeded_rng;
use crate::tensor::{axpy, logsumexp, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    /// `(V + 2) × d_g` input embeddings.
    pub embed: Matrix,
    /// `h × 3d_g` hidden map.
    pub hidden: Matrix,
    pub hidden_bias: Vec<f64>,
    /// `(V + 1) × h` output map.
    pub output: Matrix,
}

/// Saved activations of one teacher-forced sequence.
#[derive(Debug, Clone)]
pub struct Trace {
    pub logprob: f64,
    steps: Vec<TraceStep>,
}

#[derive(Debug, Clone)]
struct TraceStep {
    prev: usize,
    target: usize,
    x: Vec<f64>,
    hid: Vec<f64>,
    probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorGrads {
    pub embed: Matrix,
    pub hidden: Matrix,
    pub hidden_bias: Vec<f64>,
    pub output: Matrix,
}

impl GeneratorParams {
    pub fn init(seed: u64, vocab: usize, embed_dim: usize, hidden_dim: usize, scale: f64) -> Self {
        assert!(vocab >= 2 && embed_dim >= 1 && hidden_dim >= 1 && scale > 0.0);
        let stream = |name: &str| seeded_rng(seed, &format!("generator.{name}"));
        Self {
            embed: Matrix::uniform(vocab + 2, embed_dim, scale, &mut stream("embed")),
            hidden: Matrix::uniform(hidden_dim, 3 * embed_dim, scale, &mut stream("hidden")),
            hidden_bias: Matrix::uniform(1, hidden_dim, scale, &mut stream("hidden_bias"))
                .as_slice()
                .to_vec(),
            output: Matrix::uniform(vocab + 1, hidden_dim, scale, &mut stream("output")),
        }
    }

    pub fn zeros(vocab: usize, embed_dim: usize, hidden_dim: usize) -> Self {
        Self {
            embed: Matrix::zeros(vocab + 2, embed_dim),
            hidden: Matrix::zeros(hidden_dim, 3 * embed_dim),
            hidden_bias: vec![0.0; hidden_dim],
            output: Matrix::zeros(vocab + 1, hidden_dim),
        }
    }

    pub fn vocab(&self) -> usize {
        self.output.rows() - 1
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.rows()
    }

    pub fn bos(&self) -> usize {
        self.vocab()
    }

    /// Output index of end-of-sequence.
    pub fn eos(&self) -> usize {
        self.vocab()
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        let vocab = self.vocab();
        match tokens.iter().find(|&&t| t as usize >= vocab) {
            Some(&id) => Err(Error::TokenOutOfRange { id, vocab }),
            None => Ok(()),
        }
    }

    /// Mean input embedding of `tokens`; zero for an empty sequence.
    pub fn context(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        Ok(self.embed.mean_rows(tokens.iter().map(|&t| t as usize)))
    }

    fn step_input(&self, q_ctx: &[f64], d_ctx: &[f64], prev: usize) -> Vec<f64> {
        let mut x = Vec::with_capacity(3 * self.embed_dim());
        x.extend_from_slice(q_ctx);
        x.extend_from_slice(d_ctx);
        x.extend_from_slice(self.embed.row(prev));
        x
    }

    /// Returns `(hidden activation, output logits)` for one step.
    fn step(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut hid = self.hidden.matvec(x);
        for (h, c) in hid.iter_mut().zip(&self.hidden_bias) {
            *h = (*h + c).tanh();
        }
        let logits = self.output.matvec(&hid);
        (hid, logits)
    }

    fn check_ctx(&self, q_ctx: &[f64], d_ctx: &[f64]) -> Result<()> {
        let dg = self.embed_dim();
        if q_ctx.len() != dg || d_ctx.len() != dg {
            return Err(Error::Shape(format!(
                "contexts must have length {dg}, got {} and {}",
                q_ctx.len(),
                d_ctx.len()
            )));
        }
        Ok(())
    }

    /// Teacher-forced `log p(answer, EOS | contexts)`.
    pub fn sequence_logprob(&self, q_ctx: &[f64], d_ctx: &[f64], answer: &[u32]) -> Result<f64> {
        self.check_ctx(q_ctx, d_ctx)?;
        self.check_tokens(answer)?;
        let mut total = 0.0;
        let mut prev = self.bos();
        for target in answer.iter().map(|&t| t as usize).chain([self.eos()]) {
            let (_, logits) = self.step(&self.step_input(q_ctx, d_ctx, prev));
            total += logits[target] - logsumexp(&logits);
            prev = target;
        }
        Ok(total)
    }

    /// Teacher-forced forward pass that keeps the activations needed by
    /// [`GeneratorParams::backward`].
    pub fn trace(&self, question: &[u32], doc: &[u32], answer: &[u32]) -> Result<Trace> {
        let q_ctx = self.context(question)?;
        let d_ctx = self.context(doc)?;
        self.check_tokens(answer)?;
        let mut steps = Vec::with_capacity(answer.len() + 1);
        let mut logprob = 0.0;
        let mut prev = self.bos();
        for target in answer.iter().map(|&t| t as usize).chain([self.eos()]) {
            let x = self.step_input(&q_ctx, &d_ctx, prev);
            let (hid, mut logits) = self.step(&x);
            let lse = logsumexp(&logits);
            logprob += logits[target] - lse;
            // Reuse the logits buffer for the softmax.
            logits.iter_mut().for_each(|l| *l = (*l - lse).exp());
            steps.push(TraceStep {
                prev,
                target,
                x,
                hid,
                probs: logits,
            });
            prev = target;
        }
        Ok(Trace { logprob, steps })
    }

    /// Adds `weight · ∂ logprob / ∂θ` for a traced sequence into `grads`.
    /// `question` and `doc` must be the token lists the trace was built from.
    pub fn backward(
        &self,
        trace: &Trace,
        question: &[u32],
        doc: &[u32],
        weight: f64,
        grads: &mut GeneratorGrads,
    ) {
        let dg = self.embed_dim();
        let mut g_q = vec![0.0; dg];
        let mut g_d = vec![0.0; dg];
        for st in &trace.steps {
            // d/dlogits of weight · log softmax[target]
            let mut g_logits: Vec<f64> = st.probs.iter().map(|p| -weight * p).collect();
            g_logits[st.target] += weight;
            grads.output.add_outer(1.0, &g_logits, &st.hid);
            let g_hid = self.output.matvec_t(&g_logits);
            let g_pre: Vec<f64> = g_hid
                .iter()
                .zip(&st.hid)
                .map(|(g, h)| g * (1.0 - h * h))
                .collect();
            grads.hidden.add_outer(1.0, &g_pre, &st.x);
            axpy(&mut grads.hidden_bias, 1.0, &g_pre);
            let g_x = self.hidden.matvec_t(&g_pre);
            axpy(&mut g_q, 1.0, &g_x[..dg]);
            axpy(&mut g_d, 1.0, &g_x[dg..2 * dg]);
            axpy(grads.embed.row_mut(st.prev), 1.0, &g_x[2 * dg..]);
        }
        scatter_mean(&mut grads.embed, question, &g_q);
        scatter_mean(&mut grads.embed, doc, &g_d);
    }

    /// Adds `weight · ∂ log p(answer | question, doc) / ∂θ` into `grads`,
    /// where the contexts are the mean embeddings of `question` and `doc`.
    /// Returns the log-probability.
    pub fn accumulate_logprob_backward(
        &self,
        question: &[u32],
        doc: &[u32],
        answer: &[u32],
        weight: f64,
        grads: &mut GeneratorGrads,
    ) -> Result<f64> {
        let trace = self.trace(question, doc, answer)?;
        self.backward(&trace, question, doc, weight, grads);
        Ok(trace.logprob)
    }

    /// Greedy decoding; ties go to the lower id. EOS ends the sequence and is
    /// not emitted.
    pub fn greedy_decode(&self, q_ctx: &[f64], d_ctx: &[f64], max_len: usize) -> Result<Vec<u32>> {
        self.check_ctx(q_ctx, d_ctx)?;
        let mut out = Vec::new();
        let mut prev = self.bos();
        while out.len() < max_len {
            let (_, logits) = self.step(&self.step_input(q_ctx, d_ctx, prev));
            let mut best = 0;
            for (i, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = i;
                }
            }
            if best == self.eos() {
                break;
            }
            out.push(best as u32);
            prev = best;
        }
        Ok(out)
    }

    pub fn sgd_step(&mut self, grads: &GeneratorGrads, lr: f64) {
        self.embed.add_scaled(-lr, &grads.embed);
        self.hidden.add_scaled(-lr, &grads.hidden);
        axpy(&mut self.hidden_bias, -lr, &grads.hidden_bias);
        self.output.add_scaled(-lr, &grads.output);
        self.embed.round_to_storage();
        self.hidden.round_to_storage();
        self.output.round_to_storage();
        self.hidden_bias
            .iter_mut()
            .for_each(|b| *b = crate::tensor::to_storage(*b));
    }

    pub fn is_finite(&self) -> bool {
        self.embed.is_finite()
            && self.hidden.is_finite()
            && self.output.is_finite()
            && self.hidden_bias.iter().all(|b| b.is_finite())
    }
}

fn scatter_mean(embed: &mut Matrix, tokens: &[u32], grad: &[f64]) {
    if tokens.is_empty() {
        return;
    }
    let inv = 1.0 / tokens.len() as f64;
    for &t in tokens {
        axpy(embed.row_mut(t as usize), inv, grad);
    }
}

impl GeneratorGrads {
    pub fn zeros_like(p: &GeneratorParams) -> Self {
        Self {
            embed: Matrix::zeros(p.embed.rows(), p.embed.cols()),
            hidden: Matrix::zeros(p.hidden.rows(), p.hidden.cols()),
            hidden_bias: vec![0.0; p.hidden_bias.len()],
            output: Matrix::zeros(p.output.rows(), p.output.cols()),
        }
    }

    pub fn clear(&mut self) {
        self.embed.fill(0.0);
        self.hidden.fill(0.0);
        self.output.fill(0.0);
        self.hidden_bias.iter_mut().for_each(|b| *b = 0.0);
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.embed
            .as_slice()
            .iter()
            .chain(self.hidden.as_slice())
            .chain(&self.hidden_bias)
            .chain(self.output.as_slice())
            .copied()
            .collect()
    }
}
