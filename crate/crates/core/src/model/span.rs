//! Span-corruption pretraining examples.
//!
//! The input keeps unmasked tokens and replaces each masked span by one
//! sentinel; the target lists every sentinel followed by the span it hides,
//! then a terminal sentinel.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routing::{Routing, RoutingId};
use crate::tokenizer::TokenId;

use super::Example;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpanConfig {
    pub corruption_rate: f64,
    pub mean_span_len: f64,
}

impl Default for SpanConfig {
    fn default() -> Self {
        Self {
            corruption_rate: 0.15,
            mean_span_len: 3.0,
        }
    }
}

/// `total` split into `parts` random positive lengths.
fn positive_split<R: Rng>(total: usize, parts: usize, rng: &mut R) -> Vec<usize> {
    let mut cuts: Vec<usize> = (1..total).collect();
    cuts.shuffle(rng);
    let mut cuts = cuts[..parts - 1].to_vec();
    cuts.sort_unstable();
    cuts.push(total);
    let mut prev = 0;
    cuts.into_iter()
        .map(|c| {
            let l = c - prev;
            prev = c;
            l
        })
        .collect()
}

/// Masks spans of one sequence. Returns `(input ids, input routing ids, target)`.
pub(crate) fn corrupt<R: Rng>(
    ids: &[TokenId],
    rids: &[RoutingId],
    sentinels: &[TokenId],
    cfg: &SpanConfig,
    rng: &mut R,
) -> (Vec<TokenId>, Vec<RoutingId>, Vec<TokenId>) {
    let n = ids.len();
    let num_noise = ((n as f64 * cfg.corruption_rate).round() as usize).min(n);
    let max_spans = (n - num_noise + 1).min(sentinels.len() - 1).min(num_noise);
    let num_spans = if num_noise == 0 {
        0
    } else {
        ((num_noise as f64 / cfg.mean_span_len).round() as usize).clamp(1, max_spans.max(1))
    };
    let noise = if num_spans > 0 {
        positive_split(num_noise, num_spans, rng)
    } else {
        Vec::new()
    };
    // num_spans + 1 gaps; interior gaps are non-empty
    let mut gaps = vec![0usize; num_spans + 1];
    for g in gaps.iter_mut().take(num_spans).skip(1) {
        *g = 1;
    }
    if num_spans == 0 {
        gaps[0] = n;
    } else {
        for _ in 0..n - num_noise + 1 - num_spans {
            gaps[rng.gen_range(0..=num_spans)] += 1;
        }
    }
    let (mut inp, mut irids, mut target) = (Vec::new(), Vec::new(), Vec::new());
    let mut pos = 0;
    for s in 0..=num_spans {
        inp.extend_from_slice(&ids[pos..pos + gaps[s]]);
        irids.extend_from_slice(&rids[pos..pos + gaps[s]]);
        pos += gaps[s];
        target.push(sentinels[s]);
        if s < num_spans {
            inp.push(sentinels[s]);
            irids.push(sentinels[s]);
            target.extend_from_slice(&ids[pos..pos + noise[s]]);
            pos += noise[s];
        }
    }
    debug_assert_eq!(pos, n);
    (inp, irids, target)
}

/// One corrupted example per non-empty line, each truncated to fit
/// `max_seq_len` on both sides. Deterministic given `seed`.
pub fn make_span_batch<S: AsRef<str>>(
    seed: u64,
    lines: &[S],
    cfg: &SpanConfig,
    routing: &Routing,
    max_seq_len: usize,
) -> Result<Vec<Example>> {
    if !(0.0..=1.0).contains(&cfg.corruption_rate) || cfg.mean_span_len < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "corruption rate {} must lie in [0, 1] and mean span length {} be at least 1",
            cfg.corruption_rate, cfg.mean_span_len
        )));
    }
    let dv = &routing.default_vocab;
    if dv.num_sentinels() < 2 || max_seq_len < 3 {
        return Err(Error::InvalidArgument(
            "span corruption needs two sentinels and max_seq_len >= 3".into(),
        ));
    }
    let sentinels: Vec<TokenId> = (0..dv.num_sentinels())
        .map(|k| dv.sentinel(k).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for line in lines {
        let (mut ids, mut rids) = routing.tokenize(line.as_ref());
        ids.truncate(max_seq_len - 2);
        rids.truncate(max_seq_len - 2);
        if ids.is_empty() {
            continue;
        }
        let (inp, irids, target) = corrupt(&ids, &rids, &sentinels, cfg, &mut rng);
        out.push(Example::new(&routing.table, inp, irids, target)?);
    }
    Ok(out)
}
