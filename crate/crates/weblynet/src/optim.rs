//! Adam and the epoch/minibatch training loop.
//!
//! One training step processes a minibatch of recordings: all K networks
//! run forward on their views of each recording, the combined loss
//! (per-network BCE plus weighted pairwise divergences) is formed per
//! recording, and a single backward pass per recording sends divergence
//! gradients into every participating network — the mechanism that makes
//! the networks teach each other. Per-recording gradients are averaged
//! over the batch and each network takes one Adam step at its own
//! learning rate.
//!
//! Determinism contract: with a fixed config the run is bit-identical,
//! including under batch-parallel execution — recordings in a batch are
//! processed in parallel but reduced strictly in batch order, shuffles
//! and dropout masks come from seeds derived functionally from
//! (run seed, epoch, recording index, network salt), and batch-norm
//! statistics fold in recording order.

use crate::data::{Recording, TrainItem};
use crate::losses::{self, LossBreakdown, LossError};
use crate::networks::{AnyNetwork, Mode, NetKind, NetworkError};
use crate::seeding;
use crate::tensor::{Tape, Tensor, TensorError, Var};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const TAG_SHUFFLE: u64 = 0x53_4855_46;
const TAG_DROPOUT: u64 = 0x44_524F_50;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("network {network} needs view 2 but recording {id} has none")]
    ViewMissing { network: usize, id: String },
    #[error("gradient {index} has {got} elements, optimizer state has {expected}")]
    GradShape {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

// ---- Adam -------------------------------------------------------------------

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction. Moment buffers mirror the network's
/// parameters in visitation order.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: Vec<Moments>,
}

impl Adam {
    pub fn for_network(net: &AnyNetwork, lr: f64) -> Adam {
        let mut moments = Vec::new();
        net.for_each_param(&mut |_, t| {
            moments.push(Moments {
                m: vec![0.0; t.len()],
                v: vec![0.0; t.len()],
            });
        });
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one bias-corrected update in place. `grads` must align
    /// with the network's parameter order; they are consumed (the
    /// post-step gradient state is zero by construction).
    pub fn step(&mut self, net: &mut AnyNetwork, grads: Vec<Vec<f64>>) -> Result<()> {
        if grads.len() != self.moments.len() {
            return Err(TrainError::GradShape {
                index: grads.len().min(self.moments.len()),
                expected: self.moments.len(),
                got: grads.len(),
            });
        }
        for (i, (g, mo)) in grads.iter().zip(&self.moments).enumerate() {
            if g.len() != mo.m.len() {
                return Err(TrainError::GradShape {
                    index: i,
                    expected: mo.m.len(),
                    got: g.len(),
                });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut idx = 0;
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let moments = &mut self.moments;
        net.for_each_param_mut(&mut |_, t| {
            let mo = &mut moments[idx];
            let g = &grads[idx];
            for ((p, gi), (m, v)) in t
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(mo.m.iter_mut().zip(mo.v.iter_mut()))
            {
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            idx += 1;
        });
        Ok(())
    }
}

// ---- training ------------------------------------------------------------------

/// Joint trains all K networks with the combined loss; Single trains one
/// network on its own BCE (no divergence terms).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Joint,
    #[serde(rename = "self")]
    Single,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_epochs: usize,
    pub batch_size: usize,
    /// One learning rate per network, or a single value for all.
    pub learning_rates: Vec<f64>,
    /// Divergence weights: per pair in (i<j) order, or a single shared
    /// value broadcast to every pair. Ignored in Single mode.
    pub alphas: Vec<f64>,
    pub seed: u64,
    pub mode: TrainMode,
}

impl TrainConfig {
    pub fn joint(n_epochs: usize, alpha: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            n_epochs,
            batch_size: 32,
            learning_rates: vec![1e-3],
            alphas: vec![alpha],
            seed,
            mode: TrainMode::Joint,
        }
    }

    pub fn single(n_epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            n_epochs,
            batch_size: 32,
            learning_rates: vec![1e-3],
            alphas: vec![],
            seed,
            mode: TrainMode::Single,
        }
    }

    fn resolve_lrs(&self, k: usize) -> Result<Vec<f64>> {
        let lrs = if self.learning_rates.len() == 1 {
            vec![self.learning_rates[0]; k]
        } else {
            self.learning_rates.clone()
        };
        if lrs.len() != k {
            return Err(TrainError::Config(format!(
                "{} learning rates for {k} networks",
                self.learning_rates.len()
            )));
        }
        if lrs.iter().any(|&l| l <= 0.0) {
            return Err(TrainError::Config("learning rates must be positive".into()));
        }
        Ok(lrs)
    }
}

/// One structured record per epoch, ready for line-delimited logs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub per_network_bce: Vec<f64>,
    pub per_pair_divergence: Vec<f64>,
    pub total: f64,
}

/// The jointly (or self-) trained networks, in training order.
#[derive(Debug, Clone)]
pub struct TrainedSystem {
    pub networks: Vec<AnyNetwork>,
}

/// Output selector for prediction and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Network(usize),
    Average,
}

impl std::str::FromStr for Which {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Which, String> {
        match s {
            "average" => Ok(Which::Average),
            other => {
                let rest = other
                    .strip_prefix('n')
                    .ok_or_else(|| format!("expected n<index> or 'average', got {other:?}"))?;
                let i: usize = rest
                    .parse()
                    .map_err(|_| format!("expected n<index> or 'average', got {other:?}"))?;
                if i == 0 {
                    return Err("network indices start at 1".into());
                }
                Ok(Which::Network(i - 1))
            }
        }
    }
}

struct StepOutcome {
    grads: Vec<Vec<Vec<f64>>>,
    breakdowns: Vec<LossBreakdown>,
    bn_observed: Vec<Vec<crate::tensor::BnObserved>>,
}

/// One optimizer step: every network forward over the whole minibatch,
/// the combined loss averaged over recordings, one shared backward pass.
fn step_batch(
    networks: &[AnyNetwork],
    items: &[&TrainItem<'_>],
    item_indices: &[usize],
    epoch: usize,
    seed: u64,
    alphas: &[f64],
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let bounds: Vec<_> = networks.iter().map(|n| n.bind(&mut tape)).collect();
    let views: Vec<_> = items.iter().map(|it| it.views()).collect();

    // outs[k][b]: network k's posterior for batch item b.
    let mut outs = Vec::with_capacity(networks.len());
    let mut bn_observed = Vec::with_capacity(networks.len());
    for (k, net) in networks.iter().enumerate() {
        let salt = net.dropout_salt();
        let mut mask_rng = |b: usize| {
            ChaCha8Rng::seed_from_u64(seeding::derive(
                seed,
                &[TAG_DROPOUT, salt, epoch as u64, item_indices[b] as u64],
            ))
        };
        let (per_rec, obs) =
            net.forward_batch(&mut tape, &bounds[k], &views, Mode::Train, &mut mask_rng)?;
        outs.push(per_rec);
        bn_observed.push(obs);
    }

    let mut breakdowns = Vec::with_capacity(items.len());
    let mut total: Option<Var> = None;
    for (b, item) in items.iter().enumerate() {
        let y = item.label_tensor();
        let (rec_loss, breakdown) = if networks.len() == 1 {
            let bce = losses::bce_multilabel(&mut tape, outs[0][b], &y)?;
            let value = tape.scalar_value(bce);
            (
                bce,
                LossBreakdown {
                    per_network_bce: vec![value],
                    per_pair_divergence: vec![],
                    alphas: vec![],
                    total: value,
                },
            )
        } else {
            let rec_outs: Vec<Var> = outs.iter().map(|o| o[b]).collect();
            losses::weblynet_loss(&mut tape, &rec_outs, &y, alphas)?
        };
        breakdowns.push(breakdown);
        total = Some(match total {
            Some(acc) => tape.add(acc, rec_loss)?,
            None => rec_loss,
        });
    }
    let total = total.expect("batches are never empty");
    let batch_loss = tape.scalar_mul(total, 1.0 / items.len() as f64);
    tape.backward(batch_loss)?;

    let grads = networks
        .iter()
        .zip(&bounds)
        .map(|(net, bound)| net.collect_grads(&tape, bound))
        .collect();
    Ok(StepOutcome {
        grads,
        breakdowns,
        bn_observed,
    })
}

/// Trains the networks per the config and returns the trained system plus
/// one loss record per epoch.
pub fn train(
    mut networks: Vec<AnyNetwork>,
    data: &[TrainItem<'_>],
    cfg: &TrainConfig,
) -> Result<(TrainedSystem, Vec<EpochLog>)> {
    let k = networks.len();
    match cfg.mode {
        TrainMode::Joint if k < 2 => {
            return Err(TrainError::Config(format!(
                "joint mode needs at least 2 networks, got {k}"
            )))
        }
        TrainMode::Single if k != 1 => {
            return Err(TrainError::Config(format!(
                "self mode trains exactly 1 network, got {k}"
            )))
        }
        _ => {}
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::Config("batch_size must be positive".into()));
    }
    if data.is_empty() && cfg.n_epochs > 0 {
        return Err(TrainError::Config("no training data".into()));
    }
    let alphas = match cfg.mode {
        TrainMode::Joint => losses::resolve_alphas(&cfg.alphas, k)?,
        TrainMode::Single => Vec::new(),
    };
    let lrs = cfg.resolve_lrs(k)?;

    // Every network must find its view in every recording before any
    // training happens.
    for (idx, net) in networks.iter().enumerate() {
        if net.kind() == NetKind::N2 {
            if let Some(item) = data.iter().find(|it| it.view2.is_none()) {
                return Err(TrainError::ViewMissing {
                    network: idx,
                    id: item.id.to_string(),
                });
            }
        }
    }

    let mut optimizers: Vec<Adam> = networks
        .iter()
        .zip(&lrs)
        .map(|(n, &lr)| Adam::for_network(n, lr))
        .collect();

    let mut logs = Vec::with_capacity(cfg.n_epochs);
    for epoch in 0..cfg.n_epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seeding::derive(
            cfg.seed,
            &[TAG_SHUFFLE, epoch as u64],
        ));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_breakdowns = Vec::with_capacity(data.len());
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<&TrainItem<'_>> = batch.iter().map(|&idx| &data[idx]).collect();
            let outcome = step_batch(&networks, &items, batch, epoch, cfg.seed, &alphas)?;
            for (net, obs) in networks.iter_mut().zip(&outcome.bn_observed) {
                net.apply_bn_updates(obs);
            }
            epoch_breakdowns.extend(outcome.breakdowns);
            for ((net, opt), grads) in networks.iter_mut().zip(&mut optimizers).zip(outcome.grads)
            {
                opt.step(net, grads)?;
            }
        }
        let mean = LossBreakdown::mean_of(&epoch_breakdowns).expect("epoch saw data");
        logs.push(EpochLog {
            epoch,
            per_network_bce: mean.per_network_bce,
            per_pair_divergence: mean.per_pair_divergence,
            total: mean.total,
        });
    }
    Ok((TrainedSystem { networks }, logs))
}

/// Eval-mode recording-level posterior from one network or the
/// elementwise average over all of them.
pub fn predict(system: &TrainedSystem, recording: &Recording, which: Which) -> Result<Tensor> {
    let item = recording.train_item();
    predict_item(system, &item, which)
}

pub fn predict_item(
    system: &TrainedSystem,
    item: &TrainItem<'_>,
    which: Which,
) -> Result<Tensor> {
    let run = |k: usize| -> Result<Tensor> {
        let net = &system.networks[k];
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let (out, _) = net.forward_recording(&mut tape, &bound, item.views(), Mode::Eval, None)?;
        Ok(tape.to_tensor(out))
    };
    match which {
        Which::Network(k) => {
            if k >= system.networks.len() {
                return Err(TrainError::Config(format!(
                    "system has {} networks, asked for n{}",
                    system.networks.len(),
                    k + 1
                )));
            }
            run(k)
        }
        Which::Average => {
            let k = system.networks.len();
            let mut acc = run(0)?;
            for i in 1..k {
                let next = run(i)?;
                for (a, b) in acc.data_mut().iter_mut().zip(next.data()) {
                    *a += b;
                }
            }
            for a in acc.data_mut() {
                *a /= k as f64;
            }
            Ok(acc)
        }
    }
}
