//! Mini-batch SGD with momentum.
//!
//! Per-item gradients are computed through [`Execution::map`] and summed in
//! item order, so a run is bit-reproducible from its seed whatever the
//! execution mode.

use serde::{Deserialize, Serialize};

use crate::detector::{self, DetectorParams, SyntheticScene};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::parallel::Execution;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Linear warm-up length in steps (0 disables).
    pub warmup_steps: usize,
    /// Fraction of the epochs after which the rate is multiplied by `decay_factor`.
    pub decay_at: f64,
    pub decay_factor: f64,
    /// Global gradient-norm clip (0 disables).
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 0.01,
            momentum: 0.9,
            warmup_steps: 50,
            decay_at: 0.75,
            decay_factor: 0.1,
            grad_clip: 10.0,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let finite = [self.lr, self.momentum, self.decay_at, self.decay_factor, self.grad_clip];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(
                "optimizer scalars must be finite and non-negative".into(),
            ));
        }
        if self.momentum >= 1.0 {
            return Err(Error::Config("momentum must be below 1".into()));
        }
        Ok(())
    }

    /// Learning rate for a global step within an epoch.
    pub fn lr_at(&self, epoch: usize, step: usize) -> f64 {
        let warm = if self.warmup_steps > 0 {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        let decay_epoch = (self.decay_at * self.epochs as f64).ceil() as usize;
        let decay = if self.epochs > 1 && epoch >= decay_epoch && decay_epoch > 0 {
            self.decay_factor
        } else {
            1.0
        };
        self.lr * warm * decay
    }
}

/// Result of one item's gradient evaluation: loss, gradients and any
/// per-item metrics the caller wants averaged into the trace.
pub struct ItemGrad<P, M> {
    pub loss: f64,
    pub grads: P,
    pub metrics: M,
}

pub struct StepInfo<'a, M> {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub metrics: &'a [M],
}

/// Runs SGD with momentum over `num_items` items. `grad_fn(params, i)`
/// evaluates item `i`; `on_step` sees every step; `on_epoch` runs after
/// each epoch with the current parameters.
pub fn sgd_train<P, M, G, S, E>(
    params: &mut P,
    num_items: usize,
    opt: &OptimizerConfig,
    exec: Execution,
    grad_fn: G,
    mut on_step: S,
    mut on_epoch: E,
) -> Result<Vec<f64>>
where
    P: ParamSet,
    M: Send,
    G: Fn(&P, usize) -> Result<ItemGrad<P, M>> + Sync + Send,
    S: FnMut(StepInfo<'_, M>),
    E: FnMut(usize, &P) -> Result<()>,
{
    opt.validate()?;
    let mut rng = Rng::stream(opt.seed, 0x0005_4ff1_e000);
    let mut velocity = params.zeros_like();
    let mut order: Vec<usize> = (0..num_items).collect();
    let mut trace = Vec::new();
    let mut step = 0usize;
    for epoch in 0..opt.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(opt.batch_size) {
            let results: Vec<Result<ItemGrad<P, M>>> = exec.map(batch, |&i| grad_fn(params, i));
            let mut total = params.zeros_like();
            let mut loss = 0.0;
            let mut metrics = Vec::with_capacity(batch.len());
            for r in results {
                let item = r?;
                loss += item.loss;
                total.axpy(1.0, &item.grads);
                metrics.push(item.metrics);
            }
            let inv = 1.0 / batch.len() as f64;
            loss *= inv;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step, loss });
            }
            total.scale(inv);
            if opt.grad_clip > 0.0 {
                let norm = total.sum_sq().sqrt();
                if norm > opt.grad_clip {
                    total.scale(opt.grad_clip / norm);
                }
            }
            let lr = opt.lr_at(epoch, step);
            let grads = total.tensors();
            let params_mut = params.tensors_mut();
            for ((p, v), g) in params_mut.into_iter().zip(velocity.tensors_mut()).zip(grads) {
                for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vv = opt.momentum * *vv + gv;
                    *pv -= lr * *vv;
                }
            }
            if !params.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: f64::NAN,
                });
            }
            on_step(StepInfo {
                epoch,
                step,
                loss,
                metrics: &metrics,
            });
            trace.push(loss);
            step += 1;
        }
        on_epoch(epoch, params)?;
    }
    Ok(trace)
}

/// Supervised detector training on the detection loss alone.
pub fn train_detector(
    params: &mut DetectorParams,
    scenes: &[SyntheticScene],
    opt: &OptimizerConfig,
    exec: Execution,
    on_epoch: impl FnMut(usize, &DetectorParams) -> Result<()>,
) -> Result<Vec<f64>> {
    sgd_train(
        params,
        scenes.len(),
        opt,
        exec,
        |p, i| {
            let (loss, grads) = detector::loss_and_grads(p, &scenes[i])?;
            Ok(ItemGrad {
                loss: loss.total(),
                grads,
                metrics: loss,
            })
        },
        |_| {},
        on_epoch,
    )
}
