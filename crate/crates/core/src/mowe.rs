//! The sparse word-expert layer.
//!
//! Routing is hierarchical and fixed: routing id -> frequency bucket (by rank
//! cutoffs) -> expert (`rank_within_bucket mod experts_in_bucket`) -> block
//! (`expert mod num_blocks`). Experts are striped across blocks so that the
//! block a routing id lands in depends only on the number of blocks, never on
//! how many experts each block holds.

use std::collections::BTreeMap;

use rand::Rng;

use crate::bucketing::{BucketPlan, BucketShape, IdSlot};
use crate::error::{Error, Result};
use crate::ops::{Activation, Real};
use crate::params::{ParamId, ParamStore};
use crate::routing::RoutingId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRoute {
    Assigned {
        routing_id: RoutingId,
        bucket: u16,
        block: u32,
        /// Expert index within the bucket.
        expert: u32,
        slot: u32,
    },
    Bypassed {
        routing_id: RoutingId,
    },
    /// Expert buffer full, or the id is not covered by the plan.
    Dropped {
        routing_id: RoutingId,
    },
}

impl TokenRoute {
    pub fn routing_id(&self) -> RoutingId {
        match *self {
            TokenRoute::Assigned { routing_id, .. }
            | TokenRoute::Bypassed { routing_id }
            | TokenRoute::Dropped { routing_id } => routing_id,
        }
    }

    pub fn is_assigned(&self) -> bool {
        matches!(self, TokenRoute::Assigned { .. })
    }
}

/// Token-to-expert assignment for one batch of positions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DispatchPlan {
    pub routes: Vec<TokenRoute>,
    /// `occupancy[bucket][expert]`: slots filled.
    pub occupancy: Vec<Vec<u32>>,
}

impl DispatchPlan {
    pub fn len(&self) -> usize {
        self.routes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.routes.is_empty()
    }

    pub fn dropped(&self) -> usize {
        self.routes
            .iter()
            .filter(|r| matches!(r, TokenRoute::Dropped { .. }))
            .count()
    }

    pub fn bypassed(&self) -> usize {
        self.routes
            .iter()
            .filter(|r| matches!(r, TokenRoute::Bypassed { .. }))
            .count()
    }
}

/// Expert index within its bucket and the block holding it.
pub fn expert_location(shape: &BucketShape, rank_within_bucket: usize) -> (u32, u32) {
    let expert = rank_within_bucket % shape.total_experts();
    let block = expert % shape.num_blocks;
    (expert as u32, block as u32)
}

/// Assigns every position to a bucket, block, expert and buffer slot. Slots
/// fill first-come in sequence order; overflow is dropped.
pub fn route(plan: &BucketPlan, routing_ids: &[RoutingId]) -> DispatchPlan {
    let mut occupancy: Vec<Vec<u32>> = plan
        .buckets
        .iter()
        .map(|b| vec![0; b.total_experts()])
        .collect();
    let routes = routing_ids
        .iter()
        .map(|&routing_id| match plan.slot(routing_id) {
            IdSlot::Bypass => TokenRoute::Bypassed { routing_id },
            IdSlot::Uncovered => TokenRoute::Dropped { routing_id },
            IdSlot::Bucket { bucket, rank } => {
                let shape = &plan.buckets[bucket as usize];
                let (expert, block) = expert_location(shape, rank as usize);
                let occ = &mut occupancy[bucket as usize][expert as usize];
                if (*occ as usize) < shape.capacity_per_expert {
                    let slot = *occ;
                    *occ += 1;
                    TokenRoute::Assigned {
                        routing_id,
                        bucket,
                        block,
                        expert,
                        slot,
                    }
                } else {
                    TokenRoute::Dropped { routing_id }
                }
            }
        })
        .collect();
    DispatchPlan { routes, occupancy }
}

/// All-to-all traffic implied by a dispatch plan.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CommReport {
    pub num_blocks_touched: usize,
    /// Tokens received per `(bucket, block)`.
    pub tokens_sent_per_block: BTreeMap<(u16, u32), usize>,
    /// Assigned tokens times `d_model`.
    pub total_all2all_payload: usize,
    pub drop_count: usize,
    pub bypass_count: usize,
}

impl CommReport {
    pub const CSV_HEADER: &'static str =
        "batch,num_blocks_touched,total_all2all_payload,drop_count,bypass_count";

    pub fn csv_row(&self, batch: usize) -> String {
        format!(
            "{batch},{},{},{},{}",
            self.num_blocks_touched, self.total_all2all_payload, self.drop_count, self.bypass_count
        )
    }
}

pub fn comm_cost(dp: &DispatchPlan, d_model: usize) -> CommReport {
    let mut report = CommReport::default();
    for r in &dp.routes {
        match *r {
            TokenRoute::Assigned { bucket, block, .. } => {
                *report
                    .tokens_sent_per_block
                    .entry((bucket, block))
                    .or_default() += 1;
                report.total_all2all_payload += d_model;
            }
            TokenRoute::Bypassed { .. } => report.bypass_count += 1,
            TokenRoute::Dropped { .. } => report.drop_count += 1,
        }
    }
    report.num_blocks_touched = report.tokens_sent_per_block.len();
    report
}

/// Parameters of every expert in every bucket: per bucket a `[experts, d, h]`
/// input projection and a `[experts, h, d]` output projection.
#[derive(Debug, Clone)]
pub struct ExpertPool<T> {
    pub params: ParamStore<T>,
    shapes: Vec<BucketShape>,
    w_in: Vec<ParamId>,
    w_out: Vec<ParamId>,
    d_model: usize,
    pub activation: Activation,
    /// Frozen pools receive no parameter gradients.
    pub frozen: bool,
    deactivated: Vec<bool>,
}

impl<T: Real> ExpertPool<T> {
    pub fn new<R: Rng>(
        plan: &BucketPlan,
        d_model: usize,
        activation: Activation,
        out_std_scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut params = ParamStore::new();
        let mut w_in = Vec::new();
        let mut w_out = Vec::new();
        for (b, s) in plan.buckets.iter().enumerate() {
            let e = s.total_experts();
            let h = s.expert_hidden_dim;
            w_in.push(params.add(
                format!("bucket{b}.w_in"),
                &[e, d_model, h],
                1.0 / (d_model as f64).sqrt(),
                rng,
            ));
            w_out.push(params.add(
                format!("bucket{b}.w_out"),
                &[e, h, d_model],
                out_std_scale / (h as f64).sqrt(),
                rng,
            ));
        }
        Self {
            params,
            shapes: plan.buckets.clone(),
            w_in,
            w_out,
            d_model,
            activation,
            frozen: false,
            deactivated: Vec::new(),
        }
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn shapes(&self) -> &[BucketShape] {
        &self.shapes
    }

    /// `(w_in, w_out)` of one expert.
    pub fn expert(&self, bucket: usize, expert: usize) -> (&[T], &[T]) {
        let d = self.d_model;
        let h = self.shapes[bucket].expert_hidden_dim;
        let wi = &self.params.get(self.w_in[bucket])[expert * d * h..(expert + 1) * d * h];
        let wo = &self.params.get(self.w_out[bucket])[expert * h * d..(expert + 1) * h * d];
        (wi, wo)
    }

    pub fn expert_mut(&mut self, bucket: usize, expert: usize) -> (&mut [T], &mut [T]) {
        let d = self.d_model;
        let h = self.shapes[bucket].expert_hidden_dim;
        let (wi_id, wo_id) = (self.w_in[bucket], self.w_out[bucket]);
        let wi_range = self.params.spec(wi_id).offset + expert * d * h;
        let wo_range = self.params.spec(wo_id).offset + expert * h * d;
        let data = self.params.data_mut();
        let (lo, hi) = data.split_at_mut(wo_range);
        (&mut lo[wi_range..wi_range + d * h], &mut hi[..h * d])
    }

    fn grad_ranges(
        &self,
        bucket: usize,
        expert: usize,
    ) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let d = self.d_model;
        let h = self.shapes[bucket].expert_hidden_dim;
        let wi = self.params.spec(self.w_in[bucket]).offset + expert * d * h;
        let wo = self.params.spec(self.w_out[bucket]).offset + expert * h * d;
        (wi..wi + d * h, wo..wo + h * d)
    }

    /// Marks routing ids whose experts output zero.
    pub fn set_deactivation<F: Fn(RoutingId) -> bool>(
        &mut self,
        num_routing_ids: usize,
        predicate: F,
    ) {
        self.deactivated = (0..num_routing_ids as RoutingId).map(predicate).collect();
    }

    pub fn clear_deactivation(&mut self) {
        self.deactivated.clear();
    }

    pub fn is_deactivated(&self, rid: RoutingId) -> bool {
        self.deactivated.get(rid as usize).copied().unwrap_or(false)
    }

    fn active_expert(&self, r: &TokenRoute) -> Option<(usize, usize)> {
        match *r {
            TokenRoute::Assigned {
                routing_id,
                bucket,
                expert,
                ..
            } if !self.is_deactivated(routing_id) => Some((bucket as usize, expert as usize)),
            _ => None,
        }
    }
}

/// Expert pre-activations of the active tokens.
#[derive(Debug, Clone, Default)]
pub struct MoweCache<T> {
    pre: Vec<T>,
    offsets: Vec<usize>,
}

const INACTIVE: usize = usize::MAX;

/// Each active token goes through its single expert; every other token
/// (bypassed, dropped, deactivated) outputs zero. No router scaling.
pub fn forward<T: Real>(
    pool: &ExpertPool<T>,
    routes: &[TokenRoute],
    x: &[T],
) -> Result<(Vec<T>, MoweCache<T>)> {
    let d = pool.d_model;
    if x.len() != routes.len() * d {
        return Err(Error::Shape(format!(
            "expert layer input has {} values for {} tokens of width {d}",
            x.len(),
            routes.len()
        )));
    }
    let mut y = vec![T::zero(); x.len()];
    let mut cache = MoweCache {
        pre: Vec::new(),
        offsets: vec![INACTIVE; routes.len()],
    };
    for (t, r) in routes.iter().enumerate() {
        let Some((bucket, expert)) = pool.active_expert(r) else {
            continue;
        };
        let h = pool.shapes[bucket].expert_hidden_dim;
        let (wi, wo) = pool.expert(bucket, expert);
        let xt = &x[t * d..(t + 1) * d];
        let mut u = vec![T::zero(); h];
        for (p, &xv) in xt.iter().enumerate() {
            let row = &wi[p * h..(p + 1) * h];
            for (uj, &w) in u.iter_mut().zip(row) {
                *uj += xv * w;
            }
        }
        let yt = &mut y[t * d..(t + 1) * d];
        for (j, &uj) in u.iter().enumerate() {
            let a = pool.activation.apply(uj);
            let row = &wo[j * d..(j + 1) * d];
            for (yv, &w) in yt.iter_mut().zip(row) {
                *yv += a * w;
            }
        }
        cache.offsets[t] = cache.pre.len();
        cache.pre.extend(u);
    }
    Ok((y, cache))
}

/// Gradient with respect to the input. Parameter gradients are added into
/// `grads` (laid out like `pool.params`) unless the pool is frozen or
/// `grads` is `None`.
pub fn backward<T: Real>(
    pool: &ExpertPool<T>,
    routes: &[TokenRoute],
    x: &[T],
    cache: &MoweCache<T>,
    dy: &[T],
    mut grads: Option<&mut [T]>,
) -> Result<Vec<T>> {
    let d = pool.d_model;
    if x.len() != routes.len() * d || dy.len() != x.len() {
        return Err(Error::Shape("expert layer backward shapes disagree".into()));
    }
    if pool.frozen {
        grads = None;
    }
    let mut dx = vec![T::zero(); x.len()];
    for (t, r) in routes.iter().enumerate() {
        let Some((bucket, expert)) = pool.active_expert(r) else {
            continue;
        };
        let h = pool.shapes[bucket].expert_hidden_dim;
        let (wi, wo) = pool.expert(bucket, expert);
        let u = &cache.pre[cache.offsets[t]..cache.offsets[t] + h];
        let xt = &x[t * d..(t + 1) * d];
        let dyt = &dy[t * d..(t + 1) * d];
        let mut du = vec![T::zero(); h];
        for j in 0..h {
            let row = &wo[j * d..(j + 1) * d];
            let da = crate::ops::dot(row, dyt);
            du[j] = da * pool.activation.grad(u[j]);
        }
        let dxt = &mut dx[t * d..(t + 1) * d];
        for (p, g) in dxt.iter_mut().enumerate() {
            *g = crate::ops::dot(&wi[p * h..(p + 1) * h], &du);
        }
        if let Some(g) = grads.as_deref_mut() {
            let (ri, ro) = pool.grad_ranges(bucket, expert);
            let gi = &mut g[ri];
            for (p, &xv) in xt.iter().enumerate() {
                for (gv, &dv) in gi[p * h..(p + 1) * h].iter_mut().zip(&du) {
                    *gv += xv * dv;
                }
            }
            let go = &mut g[ro];
            for (j, &uj) in u.iter().enumerate() {
                let a = pool.activation.apply(uj);
                for (gv, &dv) in go[j * d..(j + 1) * d].iter_mut().zip(dyt) {
                    *gv += a * dv;
                }
            }
        }
    }
    Ok(dx)
}
