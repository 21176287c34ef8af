#![allow(dead_code)]

use ragforge::corpus::{chunk_corpus, synth_world, Chunk, QaExample, SynthConfig};
use ragforge::model::{ModelDims, ModelGrads, ModelParams};

/// A small synthetic world, already chunked.
pub fn world(entities: usize, relations: usize, facts: usize, vocab: usize) -> (Vec<Chunk>, Vec<QaExample>) {
    let (docs, qa) = synth_world(&SynthConfig {
        seed: 11,
        n_entities: entities,
        n_relations: relations,
        n_facts: facts,
        facts_per_passage: 4,
        vocab_size: vocab,
        ..Default::default()
    })
    .unwrap();
    (chunk_corpus(&docs, 100, vocab, false), qa)
}

pub fn small_dims(vocab: usize) -> ModelDims {
    ModelDims {
        vocab,
        enc_dim: 16,
        gen_dim: 12,
        hidden: 12,
    }
}

/// Mutable views of every parameter tensor, in a fixed order.
pub fn param_views(p: &mut ModelParams) -> Vec<(&'static str, &mut [f64])> {
    let (enc, gen) = (&mut p.encoders, &mut p.generator);
    vec![
        ("question.embed", enc.question.embed.as_mut_slice()),
        ("question.proj", enc.question.proj.as_mut_slice()),
        ("question.bias", &mut enc.question.bias[..]),
        ("passage.embed", enc.passage.embed.as_mut_slice()),
        ("passage.proj", enc.passage.proj.as_mut_slice()),
        ("passage.bias", &mut enc.passage.bias[..]),
        ("generator.embed", gen.embed.as_mut_slice()),
        ("generator.hidden", gen.hidden.as_mut_slice()),
        ("generator.hidden_bias", &mut gen.hidden_bias[..]),
        ("generator.output", gen.output.as_mut_slice()),
    ]
}

/// Gradient views in the same order as [`param_views`].
pub fn grad_views(g: &ModelGrads) -> Vec<&[f64]> {
    vec![
        g.question.embed.as_slice(),
        g.question.proj.as_slice(),
        &g.question.bias,
        g.passage.embed.as_slice(),
        g.passage.proj.as_slice(),
        &g.passage.bias,
        g.generator.embed.as_slice(),
        g.generator.hidden.as_slice(),
        &g.generator.hidden_bias,
        g.generator.output.as_slice(),
    ]
}

/// `|a - b| / (|a| + |b| + 1e-8)`, the gradient-check metric.
pub fn fd_rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8)
}
