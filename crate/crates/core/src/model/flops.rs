//! Analytic forward cost per target token.
//!
//! A multiply-accumulate counts as two operations. Attention spans
//! `max_seq_len` positions and the source sequence is taken to be as long as
//! the target. Norms, softmax and activations are ignored.

use crate::bucketing::BucketPlan;
use crate::error::{Error, Result};

use super::ModelConfig;

/// Maximum relative FLOP gap of a dense baseline.
pub const FLOP_MATCH_TOLERANCE: f64 = 0.05;

fn attention(d: f64, l: f64) -> f64 {
    // q, k, v, o projections plus scores and weighted values
    4.0 * 2.0 * d * d + 2.0 * 2.0 * l * d
}

fn ffn(d: f64, hidden: f64) -> f64 {
    2.0 * 2.0 * d * hidden
}

/// Forward FLOPs of one encoder token, one decoder token and one output
/// projection. Expert layers cost one expert per token at the plan's
/// mass-weighted hidden dim.
pub fn count_flops(cfg: &ModelConfig, plan: &BucketPlan) -> f64 {
    let d = cfg.d_model as f64;
    let l = cfg.max_seq_len as f64;
    let dense = ffn(d, cfg.ffn_hidden as f64);
    let expert = if cfg.num_mowe_layers() > 0 {
        ffn(d, plan.expected_hidden_dim())
    } else {
        0.0
    };
    let block_ffn = |mowe: &[usize], b: usize| if mowe.contains(&b) { expert } else { dense };
    let enc: f64 = (0..cfg.num_enc_blocks)
        .map(|b| attention(d, l) + block_ffn(&cfg.mowe_positions_enc, b))
        .sum();
    let dec: f64 = (0..cfg.num_dec_blocks)
        .map(|b| 2.0 * attention(d, l) + block_ffn(&cfg.mowe_positions_dec, b))
        .sum();
    enc + dec + 2.0 * d * cfg.default_vocab_size as f64
}

/// A config without expert layers whose dense FFN width matches the FLOPs of
/// `cfg` to within [`FLOP_MATCH_TOLERANCE`].
pub fn dense_baseline(cfg: &ModelConfig, plan: &BucketPlan) -> Result<ModelConfig> {
    let target = count_flops(cfg, plan);
    let mut base = cfg.clone();
    base.mowe_positions_enc.clear();
    base.mowe_positions_dec.clear();
    base.ffn_hidden = 0;
    let fixed = count_flops(&base, plan);
    let per_unit = ffn(cfg.d_model as f64, 1.0) * (cfg.num_enc_blocks + cfg.num_dec_blocks) as f64;
    base.ffn_hidden = ((target - fixed) / per_unit).round().max(1.0) as usize;
    let got = count_flops(&base, plan);
    let gap = (got - target).abs() / got;
    if gap > FLOP_MATCH_TOLERANCE {
        return Err(Error::InvalidConfig(format!(
            "no dense width matches {target} FLOPs within {FLOP_MATCH_TOLERANCE}: best gap {gap:.4}"
        )));
    }
    Ok(base)
}
