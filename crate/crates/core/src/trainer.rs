//! Losses, metrics, Adam and the training loop.

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::WindowedDataset;
use crate::engine::{Dropout, Graph, SeedStream, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{bind_params, check_params, forward_graph, DctNet};
use crate::params::DctNetParams;
use crate::spectral::SpectralDiagnostics;

/// Mean squared error on the tape.
pub fn mse_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::Contract(format!(
            "loss operands differ in shape: {:?} vs {:?}",
            g.shape(pred),
            g.shape(target)
        )));
    }
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

fn check_same(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::Contract(format!(
            "metric operands differ in shape: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same(pred, target)?;
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(s / pred.numel() as f64)
}

pub fn mae(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same(pred, target)?;
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / pred.numel() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update of a flat parameter slice at step `t` (1-based).
pub fn adam_update(theta: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    for i in 0..theta.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Moments for every parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub cfg: AdamConfig,
    pub m: DctNetParams,
    pub v: DctNetParams,
}

impl OptimizerState {
    pub fn new(params: &DctNetParams, cfg: AdamConfig) -> Self {
        let zeros = params.map(|t| Tensor::zeros(t.shape().to_vec()));
        OptimizerState {
            t: 0,
            cfg,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut DctNetParams, grads: &DctNetParams) -> Result<()> {
        let grads = grads.named();
        let mut theta = params.named_mut();
        if grads.len() != theta.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                theta.len()
            )));
        }
        for ((name, p), (gname, g)) in theta.iter().zip(&grads) {
            if name != gname || p.shape() != g.shape() {
                return Err(Error::Contract(format!(
                    "gradient {gname} {:?} does not match parameter {name} {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.t += 1;
        let mut m = self.m.named_mut();
        let mut v = self.v.named_mut();
        for (i, (_, p)) in theta.iter_mut().enumerate() {
            adam_update(
                p.data_mut(),
                grads[i].1.data(),
                m[i].1.data_mut(),
                v[i].1.data_mut(),
                self.t,
                &self.cfg,
            );
        }
        Ok(())
    }
}

/// Euclidean norm over every gradient tensor.
pub fn global_norm(grads: &DctNetParams) -> f64 {
    grads
        .named()
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Scales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut DctNetParams, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        grads.visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|v| *v *= k));
    }
    norm
}

/// Loss and parameter gradients of one batch. `dropout_seed` of `None`
/// evaluates without dropout.
pub fn loss_and_grads(
    params: &DctNetParams,
    cfg: &ModelConfig,
    x: &Tensor,
    y: &Tensor,
    dropout_seed: Option<u64>,
) -> Result<(f64, DctNetParams)> {
    let mut g = Graph::new();
    let p = bind_params(&mut g, params, true);
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    let mut dropout = match dropout_seed {
        Some(seed) => Dropout::train(cfg.dropout, seed),
        None => Dropout::eval(),
    };
    let out = forward_graph(&mut g, xv, &p, cfg, &mut dropout)?;
    let loss = mse_loss(&mut g, out.output, yv)?;
    g.backward(loss)?;
    let mut missing = None;
    let grads = p.map(|v| match g.grad(*v) {
        Some(t) => t.clone(),
        None => {
            missing.get_or_insert(v.index());
            Tensor::zeros(g.shape(*v).to_vec())
        }
    });
    if let Some(node) = missing {
        return Err(Error::Contract(format!("no gradient recorded for tape node {node}")));
    }
    Ok((g.value(loss).item()?, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Seed for shuffling and dropout masks.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-4,
            patience: 3,
            clip_norm: Some(5.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".to_string()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
}

/// Outcome of [`fit`]. Timing is logged rather than stored so that
/// identical runs serialise to identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub best_val_mae: f64,
    pub steps: usize,
    pub stopped_early: bool,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Metrics of one pass over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mse: f64,
    pub mae: f64,
    /// Mean of the correction factor over every window and channel.
    pub mean_alpha: f64,
    pub windows: usize,
}

/// Eval-mode metrics over all windows of `data`.
pub fn evaluate(model: &DctNet, data: &WindowedDataset, batch_size: usize) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::Data(format!("{} split has no windows", data.split.name())));
    }
    let (mut se, mut ae, mut count) = (0.0, 0.0, 0usize);
    let (mut alpha_sum, mut alpha_count) = (0.0, 0usize);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk);
        let f = model.predict(&x)?;
        for (p, t) in f.values.data().iter().zip(y.data()) {
            se += (p - t).powi(2);
            ae += (p - t).abs();
        }
        count += y.numel();
        let SpectralDiagnostics { alpha, .. } = &f.diagnostics;
        alpha_sum += alpha.sum();
        alpha_count += alpha.numel();
    }
    Ok(EvalMetrics {
        mse: se / count as f64,
        mae: ae / count as f64,
        mean_alpha: alpha_sum / alpha_count as f64,
        windows: data.len(),
    })
}

fn check_dataset(model: &DctNet, data: &WindowedDataset) -> Result<()> {
    let cfg = &model.config;
    if data.is_empty() {
        return Err(Error::Data(format!("{} split has no windows", data.split.name())));
    }
    if data.seq_len != cfg.seq_len || data.pred_len != cfg.pred_len || data.channels() != cfg.channels {
        return Err(Error::Data(format!(
            "{} windows are (L={}, T={}, C={}) but the model expects (L={}, T={}, C={})",
            data.split.name(),
            data.seq_len,
            data.pred_len,
            data.channels(),
            cfg.seq_len,
            cfg.pred_len,
            cfg.channels
        )));
    }
    Ok(())
}

/// Mini-batch Adam on `train`, keeping the parameters with the lowest
/// validation MSE.
pub fn fit(
    model: &DctNet,
    train: &WindowedDataset,
    val: &WindowedDataset,
    cfg: &TrainConfig,
) -> Result<(DctNetParams, TrainReport)> {
    cfg.validate()?;
    check_params(&model.config, &model.params)?;
    check_dataset(model, train)?;
    check_dataset(model, val)?;

    let mut current = model.clone();
    let mut opt = OptimizerState::new(
        &current.params,
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
    );
    let mut seeds = SeedStream::new(cfg.seed);
    let mut shuffle_rng = seeds.rng();
    let mut dropout_seeds = seeds.split();

    let mut best = current.params.clone();
    let (mut best_mse, mut best_mae, mut best_epoch) = (f64::INFINITY, f64::INFINITY, 0);
    let mut records = Vec::new();
    let mut since_best = 0;
    let mut steps = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk);
            let dropout_seed = dropout_seeds.next_seed();
            let (loss, mut grads) =
                loss_and_grads(&current.params, &current.config, &x, &y, Some(dropout_seed))?;
            steps += 1;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: steps,
                    loss,
                });
            }
            let norm = match cfg.clip_norm {
                Some(c) => clip_global_norm(&mut grads, c),
                None => global_norm(&grads),
            };
            if !norm.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: steps,
                    loss: norm,
                });
            }
            opt.step(&mut current.params, &grads)?;
            debug!("epoch {epoch} step {steps}: loss {loss:.6}, grad norm {norm:.4}");
            loss_sum += loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let metrics = evaluate(&current, val, cfg.batch_size)?;
        info!(
            "epoch {epoch}/{}: train loss {train_loss:.6}, val mse {:.6}, val mae {:.6}",
            cfg.epochs, metrics.mse, metrics.mae
        );
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_mse: metrics.mse,
            val_mae: metrics.mae,
        });
        if metrics.mse < best_mse {
            best_mse = metrics.mse;
            best_mae = metrics.mae;
            best_epoch = epoch;
            best = current.params.clone();
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= cfg.patience {
            break;
        }
    }

    let stopped_early = records.len() < cfg.epochs;
    if stopped_early {
        info!("stopping after epoch {}: no improvement for {} epochs", records.len(), since_best);
    }
    Ok((
        best,
        TrainReport {
            epochs: records,
            best_epoch,
            best_val_mse: best_mse,
            best_val_mae: best_mae,
            steps,
            stopped_early,
            seed: cfg.seed,
            model: model.config.clone(),
            train: cfg.clone(),
        },
    ))
}
