//! Hand-constructed models with known closed-form behavior.
//!
//! All attention and feed-forward weights are zeroed, so the pre-norm
//! residual stream carries the input embedding straight to the final layer
//! norm: the hidden state at a position depends only on that position's input
//! token (plus its positional encoding). Token embeddings sit on dedicated
//! axes and an untied output projection reads selected axes back out, which
//! makes the greedy-decode behavior an explicit construction rather than a
//! training outcome.

use crate::corpus::BOS_ID;
use crate::model::{init_params, Arch, AttnSource, ModelConfig, ModelParams};

/// Embedding magnitude placed on each rigged token's axis. Large enough to
/// dominate the positional encoding after layer norm.
const AXIS_SCALE: f64 = 10.0;

/// Logit gain for preferred continuations.
const GAIN: f64 = 1.0;

pub const RIG_TOKEN_A: usize = 5;
pub const RIG_TOKEN_B: usize = 6;

fn base_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        arch: Arch::EncoderDecoder,
        vocab_size,
        d_model: 8,
        n_heads: 1,
        n_layers: 1,
        max_len: 128,
        tie_output_embedding: false,
        seed: 0,
        attn_source: AttnSource::FinalLayer,
    }
}

/// Zero every weight matrix, then give BOS / token-A / token-B dedicated
/// embedding axes (0, 1, 2).
fn blank_rig(vocab_size: usize) -> ModelParams {
    let cfg = base_config(vocab_size);
    let mut params = init_params(&cfg).unwrap();
    let d = cfg.d_model;
    for entry in params.entries_mut() {
        if entry.name.contains("attn") || entry.name.contains("ff") || entry.name == "out.proj" {
            entry.values.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let emb = params.values_mut("embed.tok").unwrap();
    emb.iter_mut().for_each(|v| *v = 0.0);
    emb[BOS_ID * d] = AXIS_SCALE;
    emb[RIG_TOKEN_A * d + 1] = AXIS_SCALE;
    emb[RIG_TOKEN_B * d + 2] = AXIS_SCALE;
    params
}

/// A model whose greedy decode alternates `a b a b ..` indefinitely: after
/// BOS or token B it prefers A, after A it prefers B. Every other token keeps
/// a logit of exactly zero, so sampling strategies have a wide flat
/// alternative distribution to escape into.
pub fn bigram_loop_model(vocab_size: usize) -> ModelParams {
    assert!(vocab_size > RIG_TOKEN_B);
    let mut params = blank_rig(vocab_size);
    let d = 8;
    let proj = params.values_mut("out.proj").unwrap();
    // rows = d_model axes, cols = vocab ids
    proj[RIG_TOKEN_A] = GAIN; // axis 0 (BOS) -> prefer A
    proj[2 * vocab_size + RIG_TOKEN_A] = GAIN; // axis 2 (B) -> prefer A
    proj[vocab_size + RIG_TOKEN_B] = GAIN; // axis 1 (A) -> prefer B
    let _ = d;
    params
}

/// A model whose greedy decode emits token A forever regardless of context.
pub fn constant_preference_model(vocab_size: usize, token: usize) -> ModelParams {
    assert!(token < vocab_size);
    let mut params = blank_rig(vocab_size);
    let proj = params.values_mut("out.proj").unwrap();
    for axis in 0..3 {
        proj[axis * vocab_size + token] = GAIN;
    }
    params
}
