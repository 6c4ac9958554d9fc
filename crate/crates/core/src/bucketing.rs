//! Frequency bucketing of routing ids and per-bucket expert shapes.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::routing::{Routing, RoutingId};

/// Most frequent routing ids never sent to an expert.
pub const DEFAULT_BYPASS_TOP_N: usize = 16;
pub const DEFAULT_CAPACITY_FACTOR: f64 = 1.25;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyTable {
    pub counts: Vec<u64>,
    pub total: u64,
}

impl FrequencyTable {
    pub fn zeros(size: usize) -> Self {
        Self {
            counts: vec![0; size],
            total: 0,
        }
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        Self { counts, total }
    }

    pub fn add(&mut self, rid: RoutingId) {
        self.counts[rid as usize] += 1;
        self.total += 1;
    }

    /// Commutative merge of two shards.
    pub fn merge(&mut self, other: &FrequencyTable) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
    }

    pub fn to_tsv(&self) -> String {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{i}\t{c}\n"))
            .collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut counts = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let bad = || Error::parse("frequency table", format!("line {}: {line:?}", n + 1));
            let (id, c) = line.split_once('\t').ok_or_else(bad)?;
            if id.parse::<usize>().map_err(|_| bad())? != counts.len() {
                return Err(bad());
            }
            counts.push(c.parse::<u64>().map_err(|_| bad())?);
        }
        Ok(Self::from_counts(counts))
    }
}

/// Encodes every line, assigns routing ids and tallies them.
pub fn count_frequencies<S: AsRef<str>>(routing: &Routing, corpus: &[S]) -> FrequencyTable {
    let mut ft = FrequencyTable::zeros(routing.routing_vocab.size());
    for line in corpus {
        let (_, rids) = routing.tokenize(line.as_ref());
        for rid in rids {
            ft.add(rid);
        }
    }
    ft
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Buckets hold approximately equal token mass.
    #[default]
    Mass,
    /// Buckets hold approximately equal numbers of ids.
    Count,
}

/// Frequency ranking of routing ids and the rank cutoffs between buckets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketBoundaries {
    /// `order[rank]` is the routing id at that frequency rank.
    pub order: Vec<RoutingId>,
    pub bypass_top_n: usize,
    /// `k + 1` rank cutoffs; bucket `b` holds ranks `cutoffs[b]..cutoffs[b + 1]`.
    pub cutoffs: Vec<usize>,
    /// Fraction of corpus tokens landing in each bucket.
    pub mass: Vec<f64>,
    /// Fraction of corpus tokens bypassed.
    pub bypass_mass: f64,
}

impl BucketBoundaries {
    pub fn k(&self) -> usize {
        self.cutoffs.len() - 1
    }

    /// Ids covered by each bucket.
    pub fn sizes(&self) -> Vec<usize> {
        self.cutoffs.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Boundaries from explicit cutoffs over an identity ranking (`id == rank`).
    pub fn from_cutoffs(num_ids: usize, bypass_top_n: usize, cutoffs: Vec<usize>) -> Result<Self> {
        if cutoffs.len() < 2
            || cutoffs[0] != bypass_top_n
            || *cutoffs.last().unwrap() != num_ids
            || cutoffs.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::InvalidPlan(format!(
                "cutoffs {cutoffs:?} do not partition ranks {bypass_top_n}..{num_ids}"
            )));
        }
        let k = cutoffs.len() - 1;
        Ok(Self {
            order: (0..num_ids as RoutingId).collect(),
            bypass_top_n,
            cutoffs,
            mass: vec![1.0 / k as f64; k],
            bypass_mass: 0.0,
        })
    }
}

/// Ranks ids by descending frequency (ties: ascending id), removes the top
/// `bypass_top_n`, and partitions the rest into `k` contiguous buckets.
///
/// Mass mode closes a bucket at the crossing of `remaining / remaining_buckets`,
/// either just before or just after the id that crosses it, whichever lands
/// closer to the target.
pub fn split_buckets(
    ft: &FrequencyTable,
    k: usize,
    bypass_top_n: usize,
    mode: SplitMode,
) -> Result<BucketBoundaries> {
    if k == 0 {
        return Err(Error::InvalidArgument(
            "bucket count must be at least 1".into(),
        ));
    }
    let n = ft.counts.len();
    if n < bypass_top_n + k {
        return Err(Error::TooFewIds {
            ids: n.saturating_sub(bypass_top_n),
            buckets: k,
        });
    }
    let mut order: Vec<RoutingId> = (0..n as RoutingId).collect();
    order.sort_by(|&a, &b| {
        ft.counts[b as usize]
            .cmp(&ft.counts[a as usize])
            .then(a.cmp(&b))
    });

    let weight = |rank: usize| -> u64 {
        match mode {
            SplitMode::Mass => ft.counts[order[rank] as usize],
            SplitMode::Count => 1,
        }
    };

    let mut cutoffs = vec![bypass_top_n];
    let mut remaining: u64 = (bypass_top_n..n).map(weight).sum();
    let mut rank = bypass_top_n;
    for b in 0..k - 1 {
        let buckets_left = (k - b) as u64;
        // every later bucket needs at least one id
        let max_end = n - (k - b - 1);
        let target = remaining as f64 / buckets_left as f64;
        let mut acc = weight(rank);
        rank += 1;
        while rank < max_end && (acc as f64) < target {
            let next = acc + weight(rank);
            if next as f64 >= target && (next as f64 - target) > (target - acc as f64) {
                break;
            }
            acc = next;
            rank += 1;
        }
        remaining -= acc;
        cutoffs.push(rank);
    }
    cutoffs.push(n);

    let total = ft.total.max(1) as f64;
    let mass = cutoffs
        .windows(2)
        .map(|w| {
            (w[0]..w[1])
                .map(|r| ft.counts[order[r] as usize])
                .sum::<u64>() as f64
                / total
        })
        .collect();
    let bypass_mass = (0..bypass_top_n)
        .map(|r| ft.counts[order[r] as usize])
        .sum::<u64>() as f64
        / total;
    Ok(BucketBoundaries {
        order,
        bypass_top_n,
        cutoffs,
        mass,
        bypass_mass,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BucketShape {
    pub num_blocks: usize,
    pub experts_per_block: usize,
    pub expert_hidden_dim: usize,
    pub capacity_per_expert: usize,
}

impl BucketShape {
    pub fn total_experts(&self) -> usize {
        self.num_blocks * self.experts_per_block
    }
}

/// Requested shape of one bucket. A missing capacity is derived from the
/// expected per-expert load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BucketShapeSpec {
    pub num_blocks: usize,
    pub experts_per_block: usize,
    pub expert_hidden_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity_per_expert: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub buckets: Vec<BucketShapeSpec>,
    /// Tokens per batch used to size derived capacities.
    #[serde(default = "default_tokens_per_batch")]
    pub tokens_per_batch: usize,
    #[serde(default = "default_capacity_factor")]
    pub capacity_factor: f64,
}

fn default_tokens_per_batch() -> usize {
    512
}

fn default_capacity_factor() -> f64 {
    DEFAULT_CAPACITY_FACTOR
}

impl ShapeSpec {
    /// Scaled-down four-bucket layout: blocks {4,4,4,4}, experts per block
    /// {1,1,2,8}, hidden dims {32,32,16,8}.
    pub fn desk_default() -> Self {
        let b = |experts_per_block, expert_hidden_dim| BucketShapeSpec {
            num_blocks: 4,
            experts_per_block,
            expert_hidden_dim,
            capacity_per_expert: None,
        };
        Self {
            buckets: vec![b(1, 32), b(1, 32), b(2, 16), b(8, 8)],
            tokens_per_batch: default_tokens_per_batch(),
            capacity_factor: DEFAULT_CAPACITY_FACTOR,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("shape spec", e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("shape spec serializes")
    }
}

/// Routing ids partitioned into buckets, with per-bucket expert layouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BucketPlan {
    pub bypass_top_n: usize,
    pub cutoffs: Vec<usize>,
    pub mass: Vec<f64>,
    pub bypass_mass: f64,
    pub order: Vec<RoutingId>,
    pub buckets: Vec<BucketShape>,
    #[serde(skip)]
    lookup: Vec<IdSlot>,
}

/// Where a routing id lives in the plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IdSlot {
    #[default]
    Uncovered,
    Bypass,
    Bucket {
        bucket: u16,
        rank: u32,
    },
}

impl BucketPlan {
    /// Validates shapes and derives missing capacities.
    pub fn new(boundaries: &BucketBoundaries, spec: &ShapeSpec) -> Result<Self> {
        Self::with_loads(boundaries, spec, None)
    }

    /// Like [`new`](Self::new), deriving capacities from per-id frequencies.
    pub fn with_frequencies(
        boundaries: &BucketBoundaries,
        spec: &ShapeSpec,
        ft: &FrequencyTable,
    ) -> Result<Self> {
        Self::with_loads(boundaries, spec, Some(ft))
    }

    fn with_loads(
        boundaries: &BucketBoundaries,
        spec: &ShapeSpec,
        ft: Option<&FrequencyTable>,
    ) -> Result<Self> {
        let k = boundaries.k();
        if spec.buckets.len() != k {
            return Err(Error::InvalidPlan(format!(
                "shape spec has {} buckets, boundaries have {k}",
                spec.buckets.len()
            )));
        }
        let sizes = boundaries.sizes();
        let mut buckets = Vec::with_capacity(k);
        for (b, s) in spec.buckets.iter().enumerate() {
            if s.num_blocks == 0 || s.experts_per_block == 0 || s.expert_hidden_dim == 0 {
                return Err(Error::InvalidPlan(format!(
                    "bucket {b}: blocks, experts per block and hidden dim must be positive"
                )));
            }
            let total_experts = s.num_blocks * s.experts_per_block;
            let capacity = match s.capacity_per_expert {
                Some(0) => return Err(Error::InvalidPlan(format!("bucket {b}: zero capacity"))),
                Some(c) => c,
                None => {
                    // busiest expert's expected share of a batch
                    let peak_share = match ft {
                        Some(ft) if ft.total > 0 => {
                            let mut loads = vec![0u64; total_experts];
                            for rank in boundaries.cutoffs[b]..boundaries.cutoffs[b + 1] {
                                let within = rank - boundaries.cutoffs[b];
                                loads[within % total_experts] +=
                                    ft.counts[boundaries.order[rank] as usize];
                            }
                            *loads.iter().max().unwrap() as f64 / ft.total as f64
                        }
                        _ => {
                            let ids_per_expert = sizes[b].div_ceil(total_experts);
                            boundaries.mass[b] * ids_per_expert as f64 / sizes[b] as f64
                        }
                    };
                    let expected = peak_share * spec.tokens_per_batch as f64;
                    ((spec.capacity_factor * expected).ceil() as usize).max(1)
                }
            };
            buckets.push(BucketShape {
                num_blocks: s.num_blocks,
                experts_per_block: s.experts_per_block,
                expert_hidden_dim: s.expert_hidden_dim,
                capacity_per_expert: capacity,
            });
        }
        let mut plan = Self {
            bypass_top_n: boundaries.bypass_top_n,
            cutoffs: boundaries.cutoffs.clone(),
            buckets,
            mass: boundaries.mass.clone(),
            bypass_mass: boundaries.bypass_mass,
            order: boundaries.order.clone(),
            lookup: Vec::new(),
        };
        plan.build_lookup()?;
        Ok(plan)
    }

    fn build_lookup(&mut self) -> Result<()> {
        let k = self.buckets.len();
        if self.cutoffs.len() != k + 1 || self.mass.len() != k {
            return Err(Error::InvalidPlan(
                "cutoff, mass and bucket counts disagree".into(),
            ));
        }
        if self.cutoffs[0] != self.bypass_top_n || *self.cutoffs.last().unwrap() != self.order.len()
        {
            return Err(Error::InvalidPlan("cutoffs do not span the ranking".into()));
        }
        if self.cutoffs.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidPlan("cutoffs are not sorted".into()));
        }
        let n = self
            .order
            .iter()
            .map(|&id| id as usize + 1)
            .max()
            .unwrap_or(0);
        let mut lookup = vec![IdSlot::Uncovered; n];
        for (rank, &id) in self.order.iter().enumerate() {
            if lookup[id as usize] != IdSlot::Uncovered {
                return Err(Error::InvalidPlan(format!("routing id {id} ranked twice")));
            }
            lookup[id as usize] = if rank < self.bypass_top_n {
                IdSlot::Bypass
            } else {
                let bucket = self.cutoffs.partition_point(|&c| c <= rank) - 1;
                IdSlot::Bucket {
                    bucket: bucket as u16,
                    rank: (rank - self.cutoffs[bucket]) as u32,
                }
            };
        }
        self.lookup = lookup;
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.buckets.len()
    }

    pub fn num_ids(&self) -> usize {
        self.order.len()
    }

    pub fn slot(&self, rid: RoutingId) -> IdSlot {
        self.lookup.get(rid as usize).copied().unwrap_or_default()
    }

    pub fn ids_in_bucket(&self, b: usize) -> usize {
        self.cutoffs[b + 1] - self.cutoffs[b]
    }

    pub fn total_experts(&self) -> usize {
        self.buckets.iter().map(BucketShape::total_experts).sum()
    }

    /// Hidden dim of the expert an average routed token sees, weighted by
    /// bucket token mass; bypassed tokens cost nothing.
    pub fn expected_hidden_dim(&self) -> f64 {
        let total: f64 = self.mass.iter().sum::<f64>() + self.bypass_mass;
        if total <= 0.0 {
            return self
                .buckets
                .iter()
                .map(|b| b.expert_hidden_dim as f64)
                .sum::<f64>()
                / self.k() as f64;
        }
        self.buckets
            .iter()
            .zip(&self.mass)
            .map(|(b, m)| b.expert_hidden_dim as f64 * m)
            .sum::<f64>()
            / total
    }

    /// Same partition with a different shape spec.
    pub fn reshaped(&self, spec: &ShapeSpec) -> Result<Self> {
        let boundaries = BucketBoundaries {
            order: self.order.clone(),
            bypass_top_n: self.bypass_top_n,
            cutoffs: self.cutoffs.clone(),
            mass: self.mass.clone(),
            bypass_mass: self.bypass_mass,
        };
        Self::new(&boundaries, spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut plan: Self =
            toml::from_str(text).map_err(|e| Error::parse("bucket plan", e.to_string()))?;
        plan.build_lookup()?;
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn zipf_counts(n: usize, scale: f64) -> Vec<u64> {
        (1..=n).map(|r| (scale / r as f64).ceil() as u64).collect()
    }

    fn masses(ft: &FrequencyTable, b: &BucketBoundaries) -> Vec<u64> {
        b.cutoffs
            .windows(2)
            .map(|w| (w[0]..w[1]).map(|r| ft.counts[b.order[r] as usize]).sum())
            .collect()
    }

    fn imbalance(m: &[u64]) -> f64 {
        *m.iter().max().unwrap() as f64 / *m.iter().min().unwrap() as f64
    }

    /// Minimal max/min ratio over all contiguous partitions into k parts.
    fn exhaustive_best(sorted: &[u64], k: usize) -> f64 {
        fn rec(rest: &[u64], k: usize, acc: &mut Vec<u64>, best: &mut f64) {
            if k == 1 {
                acc.push(rest.iter().sum());
                *best = best.min(imbalance(acc));
                acc.pop();
                return;
            }
            for cut in 1..=rest.len() - (k - 1) {
                acc.push(rest[..cut].iter().sum());
                rec(&rest[cut..], k - 1, acc, best);
                acc.pop();
            }
        }
        let mut best = f64::INFINITY;
        rec(sorted, k, &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn zipfian_two_buckets_matches_exhaustive_optimum() {
        let ft = FrequencyTable::from_counts(vec![16, 8, 4, 2, 1, 1, 1, 1]);
        let b = split_buckets(&ft, 2, 0, SplitMode::Mass).unwrap();
        assert_eq!(b.cutoffs, vec![0, 1, 8]);
        let m = masses(&ft, &b);
        assert_eq!(m, vec![16, 18]);
        assert_eq!(imbalance(&m), exhaustive_best(&ft.counts, 2));
    }

    #[test]
    fn uniform_frequencies_split_evenly() {
        let ft = FrequencyTable::from_counts(vec![3; 40]);
        let b = split_buckets(&ft, 4, 0, SplitMode::Mass).unwrap();
        assert_eq!(b.sizes(), vec![10; 4]);
        let c = split_buckets(&ft, 4, 0, SplitMode::Count).unwrap();
        assert_eq!(c.sizes(), vec![10; 4]);
    }

    #[test]
    fn bypass_removes_top_ids() {
        let ft = FrequencyTable::from_counts(vec![1, 50, 2, 40, 3, 3, 3, 3]);
        let b = split_buckets(&ft, 2, 2, SplitMode::Mass).unwrap();
        assert_eq!(&b.order[..2], &[1, 3]);
        assert_eq!(b.cutoffs[0], 2);
        let plan = BucketPlan::new(
            &b,
            &ShapeSpec {
                buckets: vec![
                    BucketShapeSpec {
                        num_blocks: 1,
                        experts_per_block: 1,
                        expert_hidden_dim: 2,
                        capacity_per_expert: Some(4)
                    };
                    2
                ],
                tokens_per_batch: 8,
                capacity_factor: 1.25,
            },
        )
        .unwrap();
        assert_eq!(plan.slot(1), IdSlot::Bypass);
        assert_eq!(plan.slot(3), IdSlot::Bypass);
        assert!((b.bypass_mass - 90.0 / 105.0).abs() < 1e-12);
    }

    #[test]
    fn split_errors() {
        let ft = FrequencyTable::from_counts(vec![1, 1, 1]);
        assert!(matches!(
            split_buckets(&ft, 4, 0, SplitMode::Mass),
            Err(Error::TooFewIds { .. })
        ));
        assert!(matches!(
            split_buckets(&ft, 2, 2, SplitMode::Mass),
            Err(Error::TooFewIds { .. })
        ));
        assert!(split_buckets(&ft, 0, 0, SplitMode::Mass).is_err());
    }

    #[test]
    fn zipfian_mass_balance_within_three() {
        let ft = FrequencyTable::from_counts(zipf_counts(5000, 1e6));
        let b = split_buckets(&ft, 4, DEFAULT_BYPASS_TOP_N, SplitMode::Mass).unwrap();
        let m = masses(&ft, &b);
        assert!(imbalance(&m) <= 3.0, "masses {m:?}");
    }

    #[test]
    fn small_zipfian_instances_near_exhaustive_optimum() {
        for n in 8..=16 {
            for scale in [10.0, 100.0, 1000.0] {
                let ft = FrequencyTable::from_counts(zipf_counts(n, scale));
                let b = split_buckets(&ft, 4, 0, SplitMode::Mass).unwrap();
                let got = imbalance(&masses(&ft, &b));
                let best = exhaustive_best(&ft.counts, 4);
                assert!(
                    got <= 3.0f64.max(best),
                    "n={n} scale={scale}: greedy {got} vs best {best}"
                );
            }
        }
    }

    #[test]
    fn large_scale_base_configuration() {
        // 16 bypassed ids, then buckets of 128, 880, 1024 and the rest of 2^20
        let n = 1 << 20;
        let b = BucketBoundaries::from_cutoffs(n, 16, vec![16, 144, 1024, 2048, n]).unwrap();
        assert_eq!(&b.sizes()[..3], &[128, 880, 1024]);
        assert_eq!(b.sizes()[3], n - 2048);
        let shape = |blocks, per_block, hidden| BucketShapeSpec {
            num_blocks: blocks,
            experts_per_block: per_block,
            expert_hidden_dim: hidden,
            capacity_per_expert: Some(1),
        };
        let base = BucketPlan::new(
            &b,
            &ShapeSpec {
                buckets: vec![
                    shape(128, 1, 2048),
                    shape(128, 7, 2048),
                    shape(128, 8, 1024),
                    shape(128, 235, 512),
                ],
                tokens_per_batch: 1,
                capacity_factor: 1.0,
            },
        )
        .unwrap();
        let totals: Vec<usize> = base
            .buckets
            .iter()
            .map(BucketShape::total_experts)
            .collect();
        assert_eq!(totals, vec![128, 896, 1024, 30080]);

        let two_b = base
            .reshaped(&ShapeSpec {
                buckets: vec![
                    shape(64, 1, 2048),
                    shape(64, 1, 2048),
                    shape(64, 1, 2048),
                    shape(64, 128, 96),
                ],
                tokens_per_batch: 1,
                capacity_factor: 1.0,
            })
            .unwrap();
        assert_eq!(two_b.buckets[3].total_experts(), 8192);
        assert_eq!(two_b.buckets[3].expert_hidden_dim, 96);
    }

    #[test]
    fn desk_default_plan_is_consistent() {
        let ft = FrequencyTable::from_counts(zipf_counts(400, 1e4));
        let b = split_buckets(&ft, 4, DEFAULT_BYPASS_TOP_N, SplitMode::Mass).unwrap();
        let plan = BucketPlan::with_frequencies(&b, &ShapeSpec::desk_default(), &ft).unwrap();
        let per_block: Vec<usize> = plan.buckets.iter().map(|s| s.experts_per_block).collect();
        assert_eq!(per_block, vec![1, 1, 2, 8]);
        let hidden: Vec<usize> = plan.buckets.iter().map(|s| s.expert_hidden_dim).collect();
        assert_eq!(hidden, vec![32, 32, 16, 8]);
        assert!(plan
            .buckets
            .iter()
            .all(|s| s.num_blocks == 4 && s.capacity_per_expert >= 1));
        assert_eq!(plan.total_experts(), 4 + 4 + 8 + 32);
    }

    #[test]
    fn derived_capacity_covers_expected_load() {
        // bucket 0: ids with counts 60 and 40 on one expert, 100 tokens per batch
        let ft = FrequencyTable::from_counts(vec![60, 40, 0, 0]);
        let b = split_buckets(&ft, 2, 0, SplitMode::Mass).unwrap();
        assert_eq!(b.cutoffs, vec![0, 1, 4]);
        let spec = ShapeSpec {
            buckets: vec![
                BucketShapeSpec {
                    num_blocks: 1,
                    experts_per_block: 1,
                    expert_hidden_dim: 4,
                    capacity_per_expert: None,
                },
                BucketShapeSpec {
                    num_blocks: 1,
                    experts_per_block: 1,
                    expert_hidden_dim: 4,
                    capacity_per_expert: None,
                },
            ],
            tokens_per_batch: 100,
            capacity_factor: 1.25,
        };
        let plan = BucketPlan::with_frequencies(&b, &spec, &ft).unwrap();
        assert_eq!(plan.buckets[0].capacity_per_expert, 75);
        assert_eq!(plan.buckets[1].capacity_per_expert, 50);
    }

    #[test]
    fn zero_experts_rejected() {
        let b = BucketBoundaries::from_cutoffs(4, 0, vec![0, 4]).unwrap();
        let spec = ShapeSpec {
            buckets: vec![BucketShapeSpec {
                num_blocks: 0,
                experts_per_block: 1,
                expert_hidden_dim: 1,
                capacity_per_expert: None,
            }],
            tokens_per_batch: 1,
            capacity_factor: 1.0,
        };
        assert!(matches!(
            BucketPlan::new(&b, &spec),
            Err(Error::InvalidPlan(_))
        ));
    }

    #[test]
    fn plan_toml_round_trip() {
        let ft = FrequencyTable::from_counts(zipf_counts(100, 1e3));
        let b = split_buckets(&ft, 4, 4, SplitMode::Mass).unwrap();
        let plan = BucketPlan::with_frequencies(&b, &ShapeSpec::desk_default(), &ft).unwrap();
        let text = plan.to_toml();
        let back = BucketPlan::from_toml(&text).unwrap();
        assert_eq!(back.to_toml(), text);
        for id in 0..100 {
            assert_eq!(back.slot(id), plan.slot(id));
        }
        assert!(BucketPlan::from_toml(&format!("{text}\nsurprise = 1\n")).is_err());
    }

    proptest! {
        #[test]
        fn buckets_partition_non_bypassed_ids(
            counts in proptest::collection::vec(0u64..1000, 20..200),
            k in 1usize..6,
            bypass in 0usize..8,
            by_count in any::<bool>(),
        ) {
            let ft = FrequencyTable::from_counts(counts.clone());
            let mode = if by_count { SplitMode::Count } else { SplitMode::Mass };
            let b = split_buckets(&ft, k, bypass, mode).unwrap();
            prop_assert_eq!(b.k(), k);
            prop_assert!(b.sizes().iter().all(|&s| s >= 1));
            let spec = ShapeSpec {
                buckets: vec![BucketShapeSpec { num_blocks: 2, experts_per_block: 3, expert_hidden_dim: 4, capacity_per_expert: None }; k],
                tokens_per_batch: 64,
                capacity_factor: 1.25,
            };
            let plan = BucketPlan::with_frequencies(&b, &spec, &ft).unwrap();
            let mut per_bucket = vec![0usize; k];
            let mut bypassed = 0;
            for id in 0..counts.len() as RoutingId {
                match plan.slot(id) {
                    IdSlot::Bypass => bypassed += 1,
                    IdSlot::Bucket { bucket, .. } => per_bucket[bucket as usize] += 1,
                    IdSlot::Uncovered => prop_assert!(false, "id {} uncovered", id),
                }
            }
            prop_assert_eq!(bypassed, bypass);
            prop_assert_eq!(per_bucket, b.sizes());
            // counts commute: a permuted shard merge gives the same table
            let mut merged = FrequencyTable::from_counts(vec![0; counts.len()]);
            merged.merge(&ft);
            prop_assert_eq!(split_buckets(&merged, k, bypass, mode).unwrap(), b);
        }
    }
}
