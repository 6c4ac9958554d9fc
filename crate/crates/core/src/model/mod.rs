//! Pre-norm encoder-decoder transformer whose feed-forward sublayer is
//! replaced by a word-expert layer in selected blocks.
//!
//! Forward and backward run one example at a time with explicit caches.
//! Dispatch is computed per batch and per side (encoder, decoder); every
//! expert layer on a side reuses that side's dispatch.

mod checkpoint;
mod flops;
mod span;
mod train;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, Checkpoint,
    VocabHashes, CHECKPOINT_MAGIC,
};
pub use flops::{count_flops, dense_baseline, FLOP_MATCH_TOLERANCE};
pub use span::{make_span_batch, SpanConfig};
pub use train::{
    epoch_sampler, gradient_check, shared_gradient_check, train, GradCheckSample,
    SharedGradientReport, TraceRow, TrainConfig,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bucketing::{BucketPlan, FrequencyTable};
use crate::error::{Error, Result};
use crate::mowe::{self, route, DispatchPlan, ExpertPool, MoweCache, TokenRoute};
use crate::ops::{self, Activation, AttnCache, Real};
use crate::params::{ParamId, ParamStore, TensorSpec};
use crate::routing::{RoutingHashTable, RoutingId};
use crate::tokenizer::{TokenId, EOS_ID, PAD_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub num_enc_blocks: usize,
    pub num_dec_blocks: usize,
    /// Hidden width of dense feed-forward sublayers.
    pub ffn_hidden: usize,
    pub mowe_positions_enc: Vec<usize>,
    pub mowe_positions_dec: Vec<usize>,
    #[serde(default = "yes")]
    pub share_experts: bool,
    pub default_vocab_size: usize,
    pub routing_vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub activation: Activation,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    /// Desk-scale backbone: 6 + 6 blocks with experts at encoder and decoder
    /// blocks 2 and 4.
    pub fn desk_default(default_vocab_size: usize, routing_vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            num_heads: 4,
            num_enc_blocks: 6,
            num_dec_blocks: 6,
            ffn_hidden: 256,
            mowe_positions_enc: vec![2, 4],
            mowe_positions_dec: vec![2, 4],
            share_experts: true,
            default_vocab_size,
            routing_vocab_size,
            max_seq_len: 64,
            activation: Activation::Gelu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d_model == 0 || self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.default_vocab_size == 0 || self.max_seq_len == 0 {
            return bad("default_vocab_size and max_seq_len must be positive".into());
        }
        if self.num_enc_blocks == 0 || self.num_dec_blocks == 0 {
            return bad("need at least one encoder and one decoder block".into());
        }
        for (name, pos, n) in [
            (
                "mowe_positions_enc",
                &self.mowe_positions_enc,
                self.num_enc_blocks,
            ),
            (
                "mowe_positions_dec",
                &self.mowe_positions_dec,
                self.num_dec_blocks,
            ),
        ] {
            if let Some(&p) = pos.iter().find(|&&p| p >= n) {
                return bad(format!(
                    "{name} contains {p}, but there are only {n} blocks"
                ));
            }
            let mut sorted = pos.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != pos.len() {
                return bad(format!("{name} has duplicates"));
            }
        }
        if self.num_mowe_layers() > 0 && self.routing_vocab_size == 0 {
            return bad("routing_vocab_size must be positive when expert layers exist".into());
        }
        if self.num_mowe_layers() < self.num_enc_blocks + self.num_dec_blocks
            && self.ffn_hidden == 0
        {
            return bad("ffn_hidden must be positive when dense blocks exist".into());
        }
        Ok(())
    }

    pub fn num_mowe_layers(&self) -> usize {
        self.mowe_positions_enc.len() + self.mowe_positions_dec.len()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("model config", e.to_string()))
    }
}

/// Tallies the routing ids the expert layers see on both sides of each
/// example, so pad and sentinels are counted alongside text tokens.
pub fn example_frequencies(examples: &[Example], routing_vocab_size: usize) -> FrequencyTable {
    let mut ft = FrequencyTable::zeros(routing_vocab_size);
    for ex in examples {
        for &rid in ex.enc_rids.iter().chain(&ex.dec_rids) {
            ft.add(rid);
        }
    }
    ft
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    Encoder,
    Decoder,
}

/// An expert layer position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MoweSite {
    pub side: Side,
    pub block: usize,
}

/// Which expert layers contribute to expert parameter gradients. Forward
/// passes are unaffected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradScope {
    #[default]
    All,
    Only(MoweSite),
}

impl GradScope {
    fn includes(self, site: MoweSite) -> bool {
        match self {
            GradScope::All => true,
            GradScope::Only(s) => s == site,
        }
    }
}

/// One sequence-to-sequence training or evaluation example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub enc_ids: Vec<TokenId>,
    pub enc_rids: Vec<RoutingId>,
    pub target: Vec<TokenId>,
    /// Routing ids of the decoder input `[pad] + target[..len - 1]`.
    pub dec_rids: Vec<RoutingId>,
}

impl Example {
    /// Routing ids of the encoder side are given; the decoder side is routed
    /// from the shifted target.
    pub fn new(
        table: &RoutingHashTable,
        enc_ids: Vec<TokenId>,
        enc_rids: Vec<RoutingId>,
        target: Vec<TokenId>,
    ) -> Result<Self> {
        if enc_ids.len() != enc_rids.len() {
            return Err(Error::Shape(
                "encoder ids and routing ids differ in length".into(),
            ));
        }
        let dec_rids = table.assign(&decoder_input(&target))?.routing_ids;
        Ok(Self {
            enc_ids,
            enc_rids,
            target,
            dec_rids,
        })
    }

    pub fn decoder_input(&self) -> Vec<TokenId> {
        decoder_input(&self.target)
    }
}

pub fn decoder_input(target: &[TokenId]) -> Vec<TokenId> {
    let mut v = Vec::with_capacity(target.len());
    if !target.is_empty() {
        v.push(PAD_ID);
        v.extend_from_slice(&target[..target.len() - 1]);
    }
    v
}

#[derive(Debug, Clone)]
struct AttnIds {
    norm: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Debug, Clone)]
enum FfnIds {
    Dense { w1: ParamId, w2: ParamId },
    Mowe { pool: usize },
}

#[derive(Debug, Clone)]
struct BlockIds {
    self_attn: AttnIds,
    cross: Option<AttnIds>,
    ffn_norm: ParamId,
    ffn: FfnIds,
}

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: ParamId,
    enc_pos: ParamId,
    dec_pos: ParamId,
    enc: Vec<BlockIds>,
    dec: Vec<BlockIds>,
    enc_norm: ParamId,
    dec_norm: ParamId,
    lm_head: ParamId,
}

/// Gradients laid out like the model's parameter stores.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub dense: Vec<T>,
    pub pools: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub plan: BucketPlan,
    pub dense: ParamStore<T>,
    pub pools: Vec<ExpertPool<T>>,
    layout: Layout,
}

/// Batch loss and dispatch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchStats {
    pub loss: f64,
    pub target_tokens: usize,
    pub tokens_dropped: usize,
    pub bypass_fraction: f64,
}

struct SubCache<T> {
    x: Vec<T>,
    normed: Vec<T>,
    inv: Vec<T>,
    attn: AttnCache<T>,
}

enum FfnCache<T> {
    Dense { u: Vec<T>, a: Vec<T> },
    Mowe(MoweCache<T>),
}

struct BlockCache<T> {
    self_attn: SubCache<T>,
    cross: Option<SubCache<T>>,
    ffn_x: Vec<T>,
    ffn_normed: Vec<T>,
    ffn_inv: Vec<T>,
    ffn: FfnCache<T>,
}

struct SideCache<T> {
    blocks: Vec<BlockCache<T>>,
    final_x: Vec<T>,
    final_inv: Vec<T>,
    out: Vec<T>,
}

/// Builds a freshly initialized model.
pub fn build_model<T: Real>(cfg: &ModelConfig, plan: &BucketPlan, seed: u64) -> Result<Model<T>> {
    cfg.validate()?;
    if cfg.num_mowe_layers() > 0 && plan.num_ids() > cfg.routing_vocab_size {
        return Err(Error::InvalidConfig(format!(
            "bucket plan covers {} routing ids but routing_vocab_size is {}",
            plan.num_ids(),
            cfg.routing_vocab_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let v = cfg.default_vocab_size;
    let in_std = 1.0 / (d as f64).sqrt();
    let out_scale = 1.0 / ((2 * (cfg.num_enc_blocks + cfg.num_dec_blocks)) as f64).sqrt();
    let mut p = ParamStore::new();
    let tok_emb = p.add("tok_emb", &[v, d], 1.0, &mut rng);
    let enc_pos = p.add("enc_pos", &[cfg.max_seq_len, d], 0.1, &mut rng);
    let dec_pos = p.add("dec_pos", &[cfg.max_seq_len, d], 0.1, &mut rng);

    let mut pools = Vec::new();
    let mut shared_pool = None;
    let mut blocks =
        |side: Side, n: usize, mowe_at: &[usize], p: &mut ParamStore<T>, rng: &mut ChaCha8Rng| {
            let prefix = match side {
                Side::Encoder => "enc",
                Side::Decoder => "dec",
            };
            let mut out = Vec::new();
            for b in 0..n {
                let attn = |tag: &str, p: &mut ParamStore<T>, rng: &mut ChaCha8Rng| AttnIds {
                    norm: p.add(format!("{prefix}.{b}.{tag}.norm"), &[d], -1.0, rng),
                    wq: p.add(format!("{prefix}.{b}.{tag}.wq"), &[d, d], in_std, rng),
                    wk: p.add(format!("{prefix}.{b}.{tag}.wk"), &[d, d], in_std, rng),
                    wv: p.add(format!("{prefix}.{b}.{tag}.wv"), &[d, d], in_std, rng),
                    wo: p.add(
                        format!("{prefix}.{b}.{tag}.wo"),
                        &[d, d],
                        in_std * out_scale,
                        rng,
                    ),
                };
                let self_attn = attn("self", p, rng);
                let cross = (side == Side::Decoder).then(|| attn("cross", p, rng));
                let ffn_norm = p.add(format!("{prefix}.{b}.ffn.norm"), &[d], -1.0, rng);
                let ffn = if mowe_at.contains(&b) {
                    let pool = if cfg.share_experts {
                        *shared_pool.get_or_insert_with(|| {
                            pools.push(ExpertPool::new(plan, d, cfg.activation, out_scale, rng));
                            pools.len() - 1
                        })
                    } else {
                        pools.push(ExpertPool::new(plan, d, cfg.activation, out_scale, rng));
                        pools.len() - 1
                    };
                    FfnIds::Mowe { pool }
                } else {
                    let f = cfg.ffn_hidden;
                    FfnIds::Dense {
                        w1: p.add(format!("{prefix}.{b}.ffn.w1"), &[d, f], in_std, rng),
                        w2: p.add(
                            format!("{prefix}.{b}.ffn.w2"),
                            &[f, d],
                            out_scale / (f as f64).sqrt(),
                            rng,
                        ),
                    }
                };
                out.push(BlockIds {
                    self_attn,
                    cross,
                    ffn_norm,
                    ffn,
                });
            }
            out
        };
    let enc = blocks(
        Side::Encoder,
        cfg.num_enc_blocks,
        &cfg.mowe_positions_enc,
        &mut p,
        &mut rng,
    );
    let dec = blocks(
        Side::Decoder,
        cfg.num_dec_blocks,
        &cfg.mowe_positions_dec,
        &mut p,
        &mut rng,
    );
    let enc_norm = p.add("enc_norm", &[d], -1.0, &mut rng);
    let dec_norm = p.add("dec_norm", &[d], -1.0, &mut rng);
    let lm_head = p.add("lm_head", &[d, v], in_std, &mut rng);
    Ok(Model {
        cfg: cfg.clone(),
        plan: plan.clone(),
        dense: p,
        pools,
        layout: Layout {
            tok_emb,
            enc_pos,
            dec_pos,
            enc,
            dec,
            enc_norm,
            dec_norm,
            lm_head,
        },
    })
}

fn gslice<'a, T>(g: &'a mut [T], s: &TensorSpec) -> &'a mut [T] {
    &mut g[s.offset..s.offset + s.len]
}

impl<T: Real> Model<T> {
    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            dense: self.dense.zeros_like(),
            pools: self.pools.iter().map(|p| p.params.zeros_like()).collect(),
        }
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for p in &mut self.pools {
            p.frozen = frozen;
        }
    }

    /// Zeroes expert output for routing ids matching `predicate` in every pool.
    pub fn set_deactivation<F: Fn(RoutingId) -> bool>(&mut self, predicate: F) {
        let n = self.cfg.routing_vocab_size;
        for p in &mut self.pools {
            p.set_deactivation(n, &predicate);
        }
    }

    pub fn clear_deactivation(&mut self) {
        for p in &mut self.pools {
            p.clear_deactivation();
        }
    }

    /// Expert sites in forward order.
    pub fn mowe_sites(&self) -> Vec<MoweSite> {
        let mut v: Vec<MoweSite> = self
            .cfg
            .mowe_positions_enc
            .iter()
            .map(|&block| MoweSite {
                side: Side::Encoder,
                block,
            })
            .collect();
        v.extend(self.cfg.mowe_positions_dec.iter().map(|&block| MoweSite {
            side: Side::Decoder,
            block,
        }));
        v.sort();
        v
    }

    /// Same weights in another float type.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            plan: self.plan.clone(),
            dense: self.dense.cast(),
            pools: self
                .pools
                .iter()
                .map(|p| {
                    let mut q = ExpertPool::<U>::new(
                        &self.plan,
                        p.d_model(),
                        p.activation,
                        1.0,
                        &mut ChaCha8Rng::seed_from_u64(0),
                    );
                    q.params = p.params.cast();
                    q.frozen = p.frozen;
                    q
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        if ids.len() > self.cfg.max_seq_len {
            return Err(Error::Shape(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                ids.len(),
                self.cfg.max_seq_len
            )));
        }
        if let Some(&bad) = ids
            .iter()
            .find(|&&i| i as usize >= self.cfg.default_vocab_size)
        {
            return Err(Error::IdOutOfRange {
                id: bad as usize,
                size: self.cfg.default_vocab_size,
            });
        }
        Ok(())
    }

    fn embed(&self, ids: &[TokenId], pos: ParamId) -> Vec<T> {
        let d = self.cfg.d_model;
        let emb = self.dense.get(self.layout.tok_emb);
        let pe = self.dense.get(pos);
        let mut x = Vec::with_capacity(ids.len() * d);
        for (i, &t) in ids.iter().enumerate() {
            let e = &emb[t as usize * d..(t as usize + 1) * d];
            let p = &pe[i * d..(i + 1) * d];
            x.extend(e.iter().zip(p).map(|(&a, &b)| a + b));
        }
        x
    }

    fn attn_forward(
        &self,
        ids: &AttnIds,
        x: &[T],
        n: usize,
        src: Option<(&[T], usize)>,
        causal: bool,
    ) -> (Vec<T>, SubCache<T>) {
        let d = self.cfg.d_model;
        let (normed, inv) = ops::rmsnorm(x, self.dense.get(ids.norm), d);
        let q = ops::matmul(&normed, self.dense.get(ids.wq), n, d, d);
        let (kv, nk) = src.unwrap_or((&normed, n));
        let k = ops::matmul(kv, self.dense.get(ids.wk), nk, d, d);
        let v = ops::matmul(kv, self.dense.get(ids.wv), nk, d, d);
        let attn = ops::attention(q, k, v, n, nk, d, self.cfg.num_heads, causal);
        let out = ops::matmul(&attn.ctx, self.dense.get(ids.wo), n, d, d);
        (
            out,
            SubCache {
                x: x.to_vec(),
                normed,
                inv,
                attn,
            },
        )
    }

    /// Returns `dx` and, for cross-attention, the gradient of the source.
    fn attn_backward(
        &self,
        ids: &AttnIds,
        c: &SubCache<T>,
        dout: &[T],
        n: usize,
        src: Option<(&[T], usize)>,
        g: &mut [T],
    ) -> (Vec<T>, Option<Vec<T>>) {
        let d = self.cfg.d_model;
        let sp = |id: ParamId| self.dense.spec(id);
        ops::accumulate_at_b(gslice(g, sp(ids.wo)), &c.attn.ctx, dout, n, d, d);
        let dctx = ops::matmul_bt(dout, self.dense.get(ids.wo), n, d, d);
        let (kv, nk) = src.unwrap_or((&c.normed, n));
        let (dq, dk, dv) = ops::attention_backward(&c.attn, &dctx, n, nk, d, self.cfg.num_heads);
        ops::accumulate_at_b(gslice(g, sp(ids.wq)), &c.normed, &dq, n, d, d);
        ops::accumulate_at_b(gslice(g, sp(ids.wk)), kv, &dk, nk, d, d);
        ops::accumulate_at_b(gslice(g, sp(ids.wv)), kv, &dv, nk, d, d);
        let mut dnormed = ops::matmul_bt(&dq, self.dense.get(ids.wq), n, d, d);
        let mut dsrc = ops::matmul_bt(&dk, self.dense.get(ids.wk), nk, d, d);
        ops::add_into(
            &mut dsrc,
            &ops::matmul_bt(&dv, self.dense.get(ids.wv), nk, d, d),
        );
        let cross = if src.is_some() {
            Some(dsrc)
        } else {
            ops::add_into(&mut dnormed, &dsrc);
            None
        };
        let dx = ops::rmsnorm_backward(
            &c.x,
            self.dense.get(ids.norm),
            &c.inv,
            &dnormed,
            d,
            gslice(g, sp(ids.norm)),
        );
        (dx, cross)
    }

    fn side_forward(
        &self,
        side: Side,
        mut x: Vec<T>,
        routes: &[TokenRoute],
        enc_out: Option<&[T]>,
    ) -> Result<SideCache<T>> {
        let d = self.cfg.d_model;
        let n = x.len() / d;
        let (blocks, norm) = match side {
            Side::Encoder => (&self.layout.enc, self.layout.enc_norm),
            Side::Decoder => (&self.layout.dec, self.layout.dec_norm),
        };
        let src = enc_out.map(|e| (e, e.len() / d));
        let mut caches = Vec::with_capacity(blocks.len());
        for b in blocks {
            let (a, self_attn) =
                self.attn_forward(&b.self_attn, &x, n, None, side == Side::Decoder);
            ops::add_into(&mut x, &a);
            let cross = match &b.cross {
                Some(ids) => {
                    let (a, c) = self.attn_forward(ids, &x, n, src, false);
                    ops::add_into(&mut x, &a);
                    Some(c)
                }
                None => None,
            };
            let (ffn_normed, ffn_inv) = ops::rmsnorm(&x, self.dense.get(b.ffn_norm), d);
            let (out, ffn) = match b.ffn {
                FfnIds::Dense { w1, w2 } => {
                    let f = self.cfg.ffn_hidden;
                    let u = ops::matmul(&ffn_normed, self.dense.get(w1), n, d, f);
                    let a: Vec<T> = u.iter().map(|&v| self.cfg.activation.apply(v)).collect();
                    let out = ops::matmul(&a, self.dense.get(w2), n, f, d);
                    (out, FfnCache::Dense { u, a })
                }
                FfnIds::Mowe { pool } => {
                    let (out, c) = mowe::forward(&self.pools[pool], routes, &ffn_normed)?;
                    (out, FfnCache::Mowe(c))
                }
            };
            let ffn_x = x.clone();
            ops::add_into(&mut x, &out);
            caches.push(BlockCache {
                self_attn,
                cross,
                ffn_x,
                ffn_normed,
                ffn_inv,
                ffn,
            });
        }
        let (out, final_inv) = ops::rmsnorm(&x, self.dense.get(norm), d);
        Ok(SideCache {
            blocks: caches,
            final_x: x,
            final_inv,
            out,
        })
    }

    /// Backpropagates `dout` (gradient of the side's normed output) to the
    /// side's embedding input. Returns `(dx, d_enc_out)`.
    #[allow(clippy::too_many_arguments)]
    fn side_backward(
        &self,
        side: Side,
        c: &SideCache<T>,
        dout: &[T],
        routes: &[TokenRoute],
        enc_out: Option<&[T]>,
        scope: GradScope,
        g: &mut Grads<T>,
    ) -> Result<(Vec<T>, Option<Vec<T>>)> {
        let d = self.cfg.d_model;
        let n = dout.len() / d;
        let (blocks, norm) = match side {
            Side::Encoder => (&self.layout.enc, self.layout.enc_norm),
            Side::Decoder => (&self.layout.dec, self.layout.dec_norm),
        };
        let src = enc_out.map(|e| (e, e.len() / d));
        let mut denc = enc_out.map(|e| vec![T::zero(); e.len()]);
        let mut dx = ops::rmsnorm_backward(
            &c.final_x,
            self.dense.get(norm),
            &c.final_inv,
            dout,
            d,
            gslice(&mut g.dense, self.dense.spec(norm)),
        );
        for (bi, (b, bc)) in blocks.iter().zip(&c.blocks).enumerate().rev() {
            let dnormed = match (&b.ffn, &bc.ffn) {
                (FfnIds::Dense { w1, w2 }, FfnCache::Dense { u, a }) => {
                    let f = self.cfg.ffn_hidden;
                    ops::accumulate_at_b(
                        gslice(&mut g.dense, self.dense.spec(*w2)),
                        a,
                        &dx,
                        n,
                        f,
                        d,
                    );
                    let mut du = ops::matmul_bt(&dx, self.dense.get(*w2), n, f, d);
                    for (x, &uv) in du.iter_mut().zip(u) {
                        *x *= self.cfg.activation.grad(uv);
                    }
                    ops::accumulate_at_b(
                        gslice(&mut g.dense, self.dense.spec(*w1)),
                        &bc.ffn_normed,
                        &du,
                        n,
                        d,
                        f,
                    );
                    ops::matmul_bt(&du, self.dense.get(*w1), n, d, f)
                }
                (FfnIds::Mowe { pool }, FfnCache::Mowe(mc)) => {
                    let site = MoweSite { side, block: bi };
                    let pg = scope.includes(site).then(|| g.pools[*pool].as_mut_slice());
                    mowe::backward(&self.pools[*pool], routes, &bc.ffn_normed, mc, &dx, pg)?
                }
                _ => unreachable!("cache kind follows layout"),
            };
            let dres = ops::rmsnorm_backward(
                &bc.ffn_x,
                self.dense.get(b.ffn_norm),
                &bc.ffn_inv,
                &dnormed,
                d,
                gslice(&mut g.dense, self.dense.spec(b.ffn_norm)),
            );
            ops::add_into(&mut dx, &dres);
            if let (Some(ids), Some(cc)) = (&b.cross, &bc.cross) {
                let (dres, dsrc) = self.attn_backward(ids, cc, &dx, n, src, &mut g.dense);
                ops::add_into(&mut dx, &dres);
                if let (Some(acc), Some(ds)) = (denc.as_mut(), dsrc) {
                    ops::add_into(acc, &ds);
                }
            }
            let (dres, _) =
                self.attn_backward(&b.self_attn, &bc.self_attn, &dx, n, None, &mut g.dense);
            ops::add_into(&mut dx, &dres);
        }
        Ok((dx, denc))
    }

    fn embed_backward(&self, ids: &[TokenId], pos: ParamId, dx: &[T], g: &mut [T]) {
        let d = self.cfg.d_model;
        let es = self.dense.spec(self.layout.tok_emb).clone();
        let ps = self.dense.spec(pos).clone();
        for (i, &t) in ids.iter().enumerate() {
            let row = &dx[i * d..(i + 1) * d];
            ops::add_into(
                &mut gslice(g, &es)[t as usize * d..(t as usize + 1) * d],
                row,
            );
            ops::add_into(&mut gslice(g, &ps)[i * d..(i + 1) * d], row);
        }
    }

    fn mowe_on(&self, side: Side) -> bool {
        match side {
            Side::Encoder => !self.cfg.mowe_positions_enc.is_empty(),
            Side::Decoder => !self.cfg.mowe_positions_dec.is_empty(),
        }
    }

    fn encode(&self, ids: &[TokenId], routes: &[TokenRoute]) -> Result<SideCache<T>> {
        self.check_ids(ids)?;
        let x = self.embed(ids, self.layout.enc_pos);
        self.side_forward(Side::Encoder, x, routes, None)
    }

    fn decode_logits(
        &self,
        dec_in: &[TokenId],
        routes: &[TokenRoute],
        enc_out: &[T],
    ) -> Result<(SideCache<T>, Vec<T>)> {
        self.check_ids(dec_in)?;
        let x = self.embed(dec_in, self.layout.dec_pos);
        let c = self.side_forward(Side::Decoder, x, routes, Some(enc_out))?;
        let logits = ops::matmul(
            &c.out,
            self.dense.get(self.layout.lm_head),
            dec_in.len(),
            self.cfg.d_model,
            self.cfg.default_vocab_size,
        );
        Ok((c, logits))
    }

    /// Summed cross-entropy of one example. With `grads`, adds the gradient
    /// of `weight * loss`.
    fn example_pass(
        &self,
        ex: &Example,
        enc_routes: &[TokenRoute],
        dec_routes: &[TokenRoute],
        grads: Option<(&mut Grads<T>, T, GradScope)>,
    ) -> Result<T> {
        let v = self.cfg.default_vocab_size;
        let d = self.cfg.d_model;
        self.check_ids(&ex.target)?;
        let ec = self.encode(&ex.enc_ids, enc_routes)?;
        let dec_in = ex.decoder_input();
        let (dc, logits) = self.decode_logits(&dec_in, dec_routes, &ec.out)?;
        let n = dec_in.len();
        let mut loss = T::zero();
        let mut dlogits = Vec::with_capacity(n * v);
        let weight = grads.as_ref().map_or(T::one(), |g| g.1);
        for (i, &t) in ex.target.iter().enumerate() {
            let (l, dl) = ops::cross_entropy(&logits[i * v..(i + 1) * v], t as usize, weight);
            loss += l;
            dlogits.extend(dl);
        }
        let Some((g, _, scope)) = grads else {
            return Ok(loss);
        };
        let lm = self.dense.spec(self.layout.lm_head).clone();
        ops::accumulate_at_b(gslice(&mut g.dense, &lm), &dc.out, &dlogits, n, d, v);
        let dout = ops::matmul_bt(&dlogits, self.dense.get(self.layout.lm_head), n, d, v);
        let (dx, denc) = self.side_backward(
            Side::Decoder,
            &dc,
            &dout,
            dec_routes,
            Some(&ec.out),
            scope,
            g,
        )?;
        self.embed_backward(&dec_in, self.layout.dec_pos, &dx, &mut g.dense);
        let denc = denc.expect("decoder returns encoder gradient");
        let (dx, _) = self.side_backward(Side::Encoder, &ec, &denc, enc_routes, None, scope, g)?;
        self.embed_backward(&ex.enc_ids, self.layout.enc_pos, &dx, &mut g.dense);
        Ok(loss)
    }

    /// Routes both sides of a batch.
    pub fn dispatch(&self, batch: &[Example]) -> (DispatchPlan, DispatchPlan) {
        let enc: Vec<RoutingId> = batch
            .iter()
            .flat_map(|e| e.enc_rids.iter().copied())
            .collect();
        let dec: Vec<RoutingId> = batch
            .iter()
            .flat_map(|e| e.dec_rids.iter().copied())
            .collect();
        (route(&self.plan, &enc), route(&self.plan, &dec))
    }

    fn batch_pass(
        &self,
        batch: &[Example],
        mut grads: Option<(&mut Grads<T>, GradScope)>,
    ) -> Result<BatchStats> {
        let (enc_dp, dec_dp) = self.dispatch(batch);
        let total: usize = batch.iter().map(|e| e.target.len()).sum();
        if total == 0 {
            return Err(Error::InvalidArgument("batch has no target tokens".into()));
        }
        let weight = T::one() / T::from_usize(total).unwrap();
        let (mut eo, mut do_) = (0, 0);
        let mut loss = T::zero();
        for ex in batch {
            if ex.dec_rids.len() != ex.target.len() || ex.enc_rids.len() != ex.enc_ids.len() {
                return Err(Error::Shape(
                    "example routing ids do not match token ids".into(),
                ));
            }
            let er = &enc_dp.routes[eo..eo + ex.enc_ids.len()];
            let dr = &dec_dp.routes[do_..do_ + ex.target.len()];
            eo += ex.enc_ids.len();
            do_ += ex.target.len();
            let g = grads.as_mut().map(|(g, s)| (&mut **g, weight, *s));
            loss += self.example_pass(ex, er, dr, g)?;
        }
        let mut stats = BatchStats {
            loss: loss.to_f64().unwrap() / total as f64,
            target_tokens: total,
            ..BatchStats::default()
        };
        let mut routed = 0;
        let mut bypassed = 0;
        for (side, dp) in [(Side::Encoder, &enc_dp), (Side::Decoder, &dec_dp)] {
            if self.mowe_on(side) {
                stats.tokens_dropped += dp.dropped();
                bypassed += dp.bypassed();
                routed += dp.len();
            }
        }
        if routed > 0 {
            stats.bypass_fraction = bypassed as f64 / routed as f64;
        }
        Ok(stats)
    }

    /// Mean token cross-entropy over the batch.
    pub fn loss(&self, batch: &[Example]) -> Result<BatchStats> {
        self.batch_pass(batch, None)
    }

    /// Loss and gradient of the mean token cross-entropy.
    pub fn loss_and_grads(
        &self,
        batch: &[Example],
        scope: GradScope,
    ) -> Result<(BatchStats, Grads<T>)> {
        let mut g = self.zero_grads();
        let stats = self.batch_pass(batch, Some((&mut g, scope)))?;
        Ok((stats, g))
    }

    /// Greedy decoding until `eos` or `max_len` tokens. Decoder routing ids
    /// are recomputed each step as the longest match ending at each position.
    pub fn generate(
        &self,
        table: &RoutingHashTable,
        enc_ids: &[TokenId],
        enc_rids: &[RoutingId],
        max_len: usize,
    ) -> Result<Vec<TokenId>> {
        let enc_dp = route(&self.plan, enc_rids);
        let ec = self.encode(enc_ids, &enc_dp.routes)?;
        let v = self.cfg.default_vocab_size;
        let mut dec_in = vec![PAD_ID];
        let mut out = Vec::new();
        let limit = max_len.min(self.cfg.max_seq_len);
        while out.len() < limit {
            let rids = table.assign(&dec_in)?.routing_ids;
            let dec_dp = route(&self.plan, &rids);
            let (_, logits) = self.decode_logits(&dec_in, &dec_dp.routes, &ec.out)?;
            let last = &logits[(dec_in.len() - 1) * v..dec_in.len() * v];
            let next = ops::argmax(last) as TokenId;
            out.push(next);
            if next == EOS_ID {
                break;
            }
            dec_in.push(next);
        }
        Ok(out)
    }

    /// Every parameter tensor, dense first, then each pool, with names
    /// prefixed by `pool<i>.` for experts.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut v: Vec<(String, Vec<usize>, &[T])> = self
            .dense
            .specs()
            .iter()
            .map(|s| {
                (
                    s.name.clone(),
                    s.shape.clone(),
                    &self.dense.data()[s.offset..s.offset + s.len],
                )
            })
            .collect();
        for (i, p) in self.pools.iter().enumerate() {
            v.extend(p.params.specs().iter().map(|s| {
                (
                    format!("pool{i}.{}", s.name),
                    s.shape.clone(),
                    &p.params.data()[s.offset..s.offset + s.len],
                )
            }));
        }
        v
    }

    pub fn num_params(&self) -> usize {
        self.dense.len() + self.pools.iter().map(|p| p.params.len()).sum::<usize>()
    }
}

#[cfg(test)]
mod tests;
