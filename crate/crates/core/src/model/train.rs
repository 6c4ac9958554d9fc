use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::Real;
use crate::params::{AdamConfig, AdamState};

use super::{Example, GradScope, Model, MoweSite};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Expert pools keep their weights bit for bit.
    #[serde(default)]
    pub freeze_experts: bool,
}

impl TrainConfig {
    pub fn pretrain(steps: usize, batch_size: usize) -> Self {
        Self {
            steps,
            batch_size,
            adam: AdamConfig::with_lr(1e-3),
            freeze_experts: false,
        }
    }

    pub fn finetune(steps: usize, batch_size: usize) -> Self {
        Self {
            steps,
            batch_size,
            adam: AdamConfig::with_lr(1e-4),
            freeze_experts: true,
        }
    }
}

/// One row of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub tokens_dropped: usize,
    pub bypass_fraction: f64,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str = "step,loss,tokens_dropped,bypass_fraction";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{},{:.6}",
            self.step, self.loss, self.tokens_dropped, self.bypass_fraction
        )
    }

    pub fn to_csv(rows: &[TraceRow]) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in rows {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Batches drawn without replacement from `data`, reshuffled every epoch.
pub fn epoch_sampler(
    data: &[Example],
    batch_size: usize,
    seed: u64,
) -> impl FnMut(usize) -> Result<Vec<Example>> + '_ {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut pos = 0;
    move |_step| {
        if data.is_empty() || batch_size == 0 {
            return Err(Error::InvalidArgument(
                "cannot sample batches from empty data".into(),
            ));
        }
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if pos == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                pos = 0;
            }
            batch.push(data[order[pos]].clone());
            pos += 1;
        }
        Ok(batch)
    }
}

/// Adam on the mean token cross-entropy; `next_batch(step)` supplies data.
/// No auxiliary losses. Aborts on a non-finite loss.
pub fn train<T, F>(
    model: &mut Model<T>,
    cfg: &TrainConfig,
    mut next_batch: F,
) -> Result<Vec<TraceRow>>
where
    T: Real,
    F: FnMut(usize) -> Result<Vec<Example>>,
{
    model.set_frozen(cfg.freeze_experts);
    let mut dense_opt = AdamState::new(model.dense.len());
    let mut pool_opt: Vec<AdamState<T>> = model
        .pools
        .iter()
        .map(|p| AdamState::new(p.params.len()))
        .collect();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch = next_batch(step)?;
        let (stats, grads) = model.loss_and_grads(&batch, GradScope::All)?;
        if !stats.loss.is_finite() {
            let norm: f64 = grads
                .dense
                .iter()
                .map(|g| g.to_f64().unwrap().powi(2))
                .sum::<f64>()
                .sqrt();
            log::error!(
                "non-finite loss at step {step}: loss {} over {} target tokens, dense gradient norm {norm}",
                stats.loss,
                stats.target_tokens
            );
            return Err(Error::NonFiniteLoss {
                step,
                loss: stats.loss,
            });
        }
        dense_opt.update(&cfg.adam, model.dense.data_mut(), &grads.dense);
        for ((pool, opt), g) in model.pools.iter_mut().zip(&mut pool_opt).zip(&grads.pools) {
            if !pool.frozen {
                opt.update(&cfg.adam, pool.params.data_mut(), g);
            }
        }
        log::debug!("step {step} loss {:.4}", stats.loss);
        trace.push(TraceRow {
            step,
            loss: stats.loss,
            tokens_dropped: stats.tokens_dropped,
            bypass_fraction: stats.bypass_fraction,
        });
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharedGradientReport {
    pub sites: Vec<MoweSite>,
    /// Largest `|shared - sum of isolated|` over expert parameters.
    pub max_abs_diff: f64,
    pub max_abs_grad: f64,
    pub tolerance: f64,
}

impl SharedGradientReport {
    pub fn passed(&self) -> bool {
        self.max_abs_diff <= self.tolerance
    }
}

/// Compares the shared expert gradient with the sum of gradients obtained
/// when only one expert layer at a time lets gradient reach the experts.
pub fn shared_gradient_check(
    model: &Model<f64>,
    batch: &[Example],
) -> Result<SharedGradientReport> {
    if !model.cfg.share_experts || model.pools.len() != 1 {
        return Err(Error::InvalidConfig(
            "shared gradient check needs one shared expert pool".into(),
        ));
    }
    let sites = model.mowe_sites();
    let (_, full) = model.loss_and_grads(batch, GradScope::All)?;
    let mut sum = vec![0.0; full.pools[0].len()];
    for &site in &sites {
        let (_, g) = model.loss_and_grads(batch, GradScope::Only(site))?;
        crate::ops::add_into(&mut sum, &g.pools[0]);
    }
    let max_abs_diff = full.pools[0]
        .iter()
        .zip(&sum)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let max_abs_grad = full.pools[0].iter().map(|a| a.abs()).fold(0.0, f64::max);
    Ok(SharedGradientReport {
        sites,
        max_abs_diff,
        max_abs_grad,
        tolerance: 1e-6,
    })
}

/// One sampled parameter of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSample {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckSample {
    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

/// Compares the analytic gradient at precision `T` with a fourth-order
/// central difference of the loss evaluated in `f64`. Draws parameters
/// uniformly over all tensors until `samples` of them have a nonzero
/// analytic or numeric gradient.
pub fn gradient_check<T: Real>(
    model: &Model<T>,
    batch: &[Example],
    samples: usize,
    seed: u64,
) -> Result<Vec<GradCheckSample>> {
    let (_, grads) = model.loss_and_grads(batch, GradScope::All)?;
    let mut reference: Model<f64> = model.cast();
    let dense_len = reference.dense.len();
    let total = reference.num_params();
    let h = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples);
    let mut attempts = 0;
    while out.len() < samples && attempts < 100 * samples.max(1) {
        attempts += 1;
        let flat = rng.gen_range(0..total);
        // (pool, offset); pool None is the dense store
        let (pool, offset) = if flat < dense_len {
            (None, flat)
        } else {
            let mut rest = flat - dense_len;
            let mut p = 0;
            while rest >= reference.pools[p].params.len() {
                rest -= reference.pools[p].params.len();
                p += 1;
            }
            (Some(p), rest)
        };
        let (store, analytic, prefix) = match pool {
            None => (&reference.dense, grads.dense[offset], String::new()),
            Some(p) => (
                &reference.pools[p].params,
                grads.pools[p][offset],
                format!("pool{p}."),
            ),
        };
        let spec = store
            .specs()
            .iter()
            .find(|s| offset < s.offset + s.len)
            .unwrap();
        let (tensor, index) = (format!("{prefix}{}", spec.name), offset - spec.offset);
        let x0 = store.data()[offset];
        let mut eval = |x: f64| -> Result<f64> {
            match pool {
                None => reference.dense.data_mut()[offset] = x,
                Some(p) => reference.pools[p].params.data_mut()[offset] = x,
            }
            Ok(reference.loss(batch)?.loss)
        };
        let numeric = (-eval(x0 + 2.0 * h)? + 8.0 * eval(x0 + h)? - 8.0 * eval(x0 - h)?
            + eval(x0 - 2.0 * h)?)
            / (12.0 * h);
        eval(x0)?;
        let analytic = analytic.to_f64().unwrap();
        if analytic != 0.0 || numeric.abs() > 1e-12 {
            out.push(GradCheckSample {
                tensor,
                index,
                analytic,
                numeric,
            });
        }
    }
    Ok(out)
}
