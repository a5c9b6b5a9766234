use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::episode::Episode;
use super::pipeline::{dataset_loss, loss_and_gradient, PipelineConfig, SegModel};

/// SGD with momentum and coupled weight decay:
/// `g = ∇ + wd·p`, `v = μ·v + g`, `p = p − lr·v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub steps: usize,
    pub pipeline: PipelineConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sgd: SgdConfig::default(),
            steps: 200,
            pipeline: PipelineConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: SegModel,
    /// Dataset loss before each step, then once more after the last one.
    pub losses: Vec<f64>,
}

/// Full-batch SGD over `dataset`, one step per iteration.
pub fn train_toy(dataset: &[Episode], model: SegModel, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::contract("training needs at least one episode"));
    }
    let SgdConfig {
        lr,
        momentum,
        weight_decay,
    } = cfg.sgd;
    let mut model = model;
    let mut velocity: Vec<Matrix> = model
        .params()
        .iter()
        .map(|m| Matrix::zeros(m.rows(), m.cols()))
        .collect();
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        let (loss, grads) = loss_and_gradient(&model, dataset, &cfg.pipeline)?;
        check_loss(loss, step)?;
        losses.push(loss);
        for ((p, g), v) in model
            .params_mut()
            .into_iter()
            .zip(&grads)
            .zip(&mut velocity)
        {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = momentum * *vv + gv + weight_decay * *pv;
                *pv -= lr * *vv;
            }
            if !p.is_finite() {
                return Err(Error::Evaluation(format!(
                    "parameters became non-finite at step {step}"
                )));
            }
        }
    }
    let last = dataset_loss(&model, dataset, &cfg.pipeline)?;
    check_loss(last, cfg.steps)?;
    losses.push(last);
    Ok(TrainOutcome { model, losses })
}

fn check_loss(loss: f64, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Evaluation(format!("loss is {loss} at step {step}")));
    }
    Ok(())
}
