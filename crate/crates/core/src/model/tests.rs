use super::*;
use crate::bucketing::{count_frequencies, split_buckets, BucketShapeSpec, ShapeSpec, SplitMode};
use crate::routing::{Routing, RoutingVocab};
use crate::tokenizer::SubwordVocab;

const CORPUS: &str = include_str!("../../data/mini_corpus.txt");
const NAMES: &str = include_str!("../../data/names.txt");

fn routing() -> Routing {
    let lines: Vec<&str> = CORPUS.lines().collect();
    let names: Vec<&str> = NAMES.lines().collect();
    let dv = SubwordVocab::learn(&lines, 90, 3 + 8).unwrap();
    let rv = RoutingVocab::build(&names, &lines, 100).unwrap();
    Routing::new(dv, &rv)
}

fn plan(r: &Routing) -> BucketPlan {
    let lines: Vec<&str> = CORPUS.lines().collect();
    let ft = count_frequencies(r, &lines);
    let b = split_buckets(&ft, 2, 4, SplitMode::Mass).unwrap();
    let spec = ShapeSpec {
        buckets: vec![
            BucketShapeSpec {
                num_blocks: 2,
                experts_per_block: 2,
                expert_hidden_dim: 6,
                capacity_per_expert: Some(64),
            },
            BucketShapeSpec {
                num_blocks: 2,
                experts_per_block: 8,
                expert_hidden_dim: 3,
                capacity_per_expert: Some(64),
            },
        ],
        tokens_per_batch: 64,
        capacity_factor: 1.25,
    };
    BucketPlan::with_frequencies(&b, &spec, &ft).unwrap()
}

fn small_cfg(r: &Routing) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        num_heads: 2,
        num_enc_blocks: 3,
        num_dec_blocks: 3,
        ffn_hidden: 12,
        mowe_positions_enc: vec![0, 2],
        mowe_positions_dec: vec![0, 2],
        share_experts: true,
        default_vocab_size: r.default_vocab.size(),
        routing_vocab_size: r.routing_vocab.size(),
        max_seq_len: 24,
        activation: Activation::Gelu,
    }
}

fn batch(r: &Routing, seed: u64, n: usize) -> Vec<Example> {
    let lines: Vec<&str> = CORPUS.lines().take(n).collect();
    make_span_batch(seed, &lines, &SpanConfig::default(), r, 24).unwrap()
}

#[test]
fn config_validation() {
    let r = routing();
    let good = small_cfg(&r);
    assert!(good.validate().is_ok());
    let mut c = good.clone();
    c.num_heads = 3;
    assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
    let mut c = good.clone();
    c.mowe_positions_dec = vec![3];
    assert!(c.validate().is_err());
    let mut c = good.clone();
    c.mowe_positions_enc = vec![1, 1];
    assert!(c.validate().is_err());
    let text = good.to_toml();
    assert_eq!(ModelConfig::from_toml(&text).unwrap(), good);
    assert!(ModelConfig::from_toml(&format!("{text}\nbogus = 1\n")).is_err());
}

#[test]
fn span_rate_zero_keeps_input() {
    let r = routing();
    let cfg = SpanConfig {
        corruption_rate: 0.0,
        mean_span_len: 3.0,
    };
    let ex = make_span_batch(3, &["alan turing was born in london"], &cfg, &r, 24).unwrap();
    let (ids, rids) = r.tokenize("alan turing was born in london");
    assert_eq!(ex[0].enc_ids, ids);
    assert_eq!(ex[0].enc_rids, rids);
    assert_eq!(ex[0].target, vec![r.default_vocab.sentinel(0).unwrap()]);
}

#[test]
fn span_rate_one_masks_everything() {
    let r = routing();
    let cfg = SpanConfig {
        corruption_rate: 1.0,
        mean_span_len: 100.0,
    };
    let ex = make_span_batch(3, &["alan turing"], &cfg, &r, 24).unwrap();
    let (ids, _) = r.tokenize("alan turing");
    let s0 = r.default_vocab.sentinel(0).unwrap();
    let s1 = r.default_vocab.sentinel(1).unwrap();
    assert_eq!(ex[0].enc_ids, vec![s0]);
    let mut want = vec![s0];
    want.extend(&ids);
    want.push(s1);
    assert_eq!(ex[0].target, want);
}

/// Rebuilds the original sequence from input and target.
fn reconstruct(inp: &[TokenId], target: &[TokenId], dv: &SubwordVocab) -> Vec<TokenId> {
    let mut spans: Vec<Vec<TokenId>> = Vec::new();
    for &t in target {
        if dv.is_sentinel(t) {
            spans.push(Vec::new());
        } else {
            spans.last_mut().unwrap().push(t);
        }
    }
    let mut out = Vec::new();
    let mut k = 0;
    for &t in inp {
        if dv.is_sentinel(t) {
            assert_eq!(t, dv.sentinel(k).unwrap(), "sentinels appear in order");
            out.extend(&spans[k]);
            k += 1;
        } else {
            out.push(t);
        }
    }
    assert_eq!(k + 1, spans.len(), "one terminal sentinel");
    assert!(spans[k].is_empty());
    out
}

#[test]
fn span_targets_reconstruct_the_sequence() {
    let r = routing();
    let lines: Vec<&str> = CORPUS.lines().collect();
    for seed in 0..20 {
        for rate in [0.15, 0.3, 0.5] {
            let cfg = SpanConfig {
                corruption_rate: rate,
                mean_span_len: 2.0,
            };
            let exs = make_span_batch(seed, &lines, &cfg, &r, 24).unwrap();
            for (ex, line) in exs.iter().zip(&lines) {
                let (mut ids, _) = r.tokenize(line);
                ids.truncate(22);
                assert_eq!(reconstruct(&ex.enc_ids, &ex.target, &r.default_vocab), ids);
                assert!(ex.enc_ids.len() <= 24 && ex.target.len() <= 24);
                let masked = ex
                    .target
                    .iter()
                    .filter(|&&t| !r.default_vocab.is_sentinel(t))
                    .count();
                assert_eq!(masked, (ids.len() as f64 * rate).round() as usize);
            }
        }
    }
}

#[test]
fn span_batches_are_seeded() {
    let r = routing();
    assert_eq!(batch(&r, 5, 20), batch(&r, 5, 20));
    assert_ne!(batch(&r, 5, 20), batch(&r, 6, 20));
}

#[test]
fn gradients_match_finite_differences() {
    let r = routing();
    let m: Model<f64> = build_model(&small_cfg(&r), &plan(&r), 1).unwrap();
    let samples = gradient_check(&m, &batch(&r, 0, 3), 60, 9).unwrap();
    assert_eq!(samples.len(), 60);
    assert!(samples.iter().any(|s| s.tensor.starts_with("pool")));
    for s in &samples {
        assert!(s.rel_error() <= 1e-5, "{s:?}");
    }
}

#[test]
fn shared_experts_sum_over_sites() {
    let r = routing();
    let m: Model<f64> = build_model(&small_cfg(&r), &plan(&r), 2).unwrap();
    let rep = shared_gradient_check(&m, &batch(&r, 1, 4)).unwrap();
    assert_eq!(rep.sites.len(), 4);
    assert!(rep.max_abs_grad > 0.0);
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn unshared_experts_get_one_pool_per_site() {
    let r = routing();
    let mut cfg = small_cfg(&r);
    cfg.share_experts = false;
    let m: Model<f64> = build_model(&cfg, &plan(&r), 2).unwrap();
    assert_eq!(m.pools.len(), 4);
    assert!(shared_gradient_check(&m, &batch(&r, 1, 4)).is_err());
}

#[test]
fn frozen_experts_do_not_move() {
    let r = routing();
    let mut m: Model<f32> = build_model(&small_cfg(&r), &plan(&r), 3).unwrap();
    let before = m.pools[0].params.clone();
    let dense_before = m.dense.clone();
    let data = batch(&r, 2, 20);
    train(
        &mut m,
        &TrainConfig::finetune(5, 4),
        epoch_sampler(&data, 4, 0),
    )
    .unwrap();
    assert_eq!(m.pools[0].params, before);
    assert_ne!(m.dense, dense_before);
}

#[test]
fn training_reduces_loss() {
    let r = routing();
    let mut m: Model<f32> = build_model(&small_cfg(&r), &plan(&r), 4).unwrap();
    let data = batch(&r, 3, 20);
    let trace = train(
        &mut m,
        &TrainConfig::pretrain(60, 8),
        epoch_sampler(&data, 8, 1),
    )
    .unwrap();
    let first = trace[0].loss;
    let last = trace.iter().rev().take(5).map(|t| t.loss).sum::<f64>() / 5.0;
    assert!(last < 0.8 * first, "{first} -> {last}");
    assert!(trace
        .iter()
        .all(|t| (0.0..=1.0).contains(&t.bypass_fraction)));
}

#[test]
fn training_is_deterministic() {
    let r = routing();
    let data = batch(&r, 3, 20);
    let run = || {
        let mut m: Model<f32> = build_model(&small_cfg(&r), &plan(&r), 4).unwrap();
        let t = train(
            &mut m,
            &TrainConfig::pretrain(5, 4),
            epoch_sampler(&data, 4, 1),
        )
        .unwrap();
        (m.dense, t)
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_loss_aborts() {
    let r = routing();
    let mut m: Model<f32> = build_model(&small_cfg(&r), &plan(&r), 4).unwrap();
    m.dense.data_mut()[0] = f32::NAN;
    let data = batch(&r, 3, 4);
    let mut b = data.clone();
    b[0].enc_ids[0] = 0;
    let err = train(
        &mut m,
        &TrainConfig::pretrain(2, 4),
        epoch_sampler(&b, 4, 1),
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 1, .. }));
}

#[test]
fn generation_is_greedy_and_bounded() {
    let r = routing();
    let m: Model<f32> = build_model(&small_cfg(&r), &plan(&r), 5).unwrap();
    let (ids, rids) = r.tokenize("alan turing was born in");
    let a = m.generate(&r.table, &ids, &rids, 6).unwrap();
    let b = m.generate(&r.table, &ids, &rids, 6).unwrap();
    assert_eq!(a, b);
    assert!(!a.is_empty() && a.len() <= 6);
    assert!(a[..a.len() - 1].iter().all(|&t| t != EOS_ID));
}

#[test]
fn rejects_out_of_range_ids() {
    let r = routing();
    let m: Model<f32> = build_model(&small_cfg(&r), &plan(&r), 5).unwrap();
    let mut b = batch(&r, 0, 1);
    b[0].target[0] = 10_000;
    assert!(matches!(m.loss(&b), Err(Error::IdOutOfRange { .. })));
}

#[test]
fn deactivating_everything_matches_zero_experts() {
    let r = routing();
    let mut m: Model<f64> = build_model(&small_cfg(&r), &plan(&r), 6).unwrap();
    let b = batch(&r, 0, 5);
    let base = m.loss(&b).unwrap().loss;
    m.set_deactivation(|_| true);
    let off = m.loss(&b).unwrap().loss;
    for p in &mut m.pools {
        p.clear_deactivation();
        p.params.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    assert_eq!(m.loss(&b).unwrap().loss, off);
    assert_ne!(base, off);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let r = routing();
    let m: Model<f32> = build_model(&small_cfg(&r), &plan(&r), 7).unwrap();
    let hashes = VocabHashes {
        default_vocab: r.default_vocab.content_hash(),
        routing_vocab: r.routing_vocab.content_hash(),
    };
    let bytes = checkpoint::checkpoint_bytes(&m, &hashes);
    let ck = checkpoint::checkpoint_from_bytes(&bytes, Some(&hashes)).unwrap();
    assert_eq!(checkpoint::checkpoint_bytes(&ck.model, &ck.vocab), bytes);
    assert_eq!(ck.model.dense, m.dense);

    let wrong = VocabHashes {
        routing_vocab: "0".repeat(64),
        ..hashes.clone()
    };
    assert!(matches!(
        checkpoint::checkpoint_from_bytes(&bytes, Some(&wrong)),
        Err(Error::VocabHashMismatch { .. })
    ));
    assert!(checkpoint::checkpoint_from_bytes(&bytes[..bytes.len() - 1], None).is_err());
    assert!(checkpoint::checkpoint_from_bytes(b"garbage\n", None).is_err());
}

#[test]
fn flops_of_dense_model_ignore_the_plan() {
    let r = routing();
    let p = plan(&r);
    let mut cfg = small_cfg(&r);
    cfg.mowe_positions_enc.clear();
    cfg.mowe_positions_dec.clear();
    let (d, l, f, v) = (8.0, 24.0, 12.0, cfg.default_vocab_size as f64);
    let attn = 8.0 * d * d + 4.0 * l * d;
    let want = 3.0 * (attn + 4.0 * d * f) + 3.0 * (2.0 * attn + 4.0 * d * f) + 2.0 * d * v;
    assert_eq!(count_flops(&cfg, &p), want);
}

#[test]
fn expert_layer_costs_one_expert() {
    let r = routing();
    let p = plan(&r);
    let cfg = small_cfg(&r);
    let mut dense = cfg.clone();
    dense.mowe_positions_enc.clear();
    dense.mowe_positions_dec.clear();
    let per_layer = 2.0 * 8.0 * p.expected_hidden_dim() * 2.0;
    let delta = count_flops(&dense, &p) - count_flops(&cfg, &p);
    assert!((delta - 4.0 * (4.0 * 8.0 * 12.0 - per_layer)).abs() < 1e-9);
}

#[test]
fn dense_baseline_is_flop_matched() {
    let r = routing();
    let p = plan(&r);
    let cfg = small_cfg(&r);
    let base = dense_baseline(&cfg, &p).unwrap();
    assert_eq!(base.num_mowe_layers(), 0);
    let (a, b) = (count_flops(&cfg, &p), count_flops(&base, &p));
    assert!((a - b).abs() / b <= FLOP_MATCH_TOLERANCE);
}
