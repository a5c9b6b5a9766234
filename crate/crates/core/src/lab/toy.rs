//! Small fixed setups shared by the command-line tool and the tests: a
//! separable training episode and the gradient check suite.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::correlation::{Correlation, ScProjector, ScaleMode};
use crate::error::{Error, Result};
use crate::pruning::PruneConfig;
use crate::segmenter::{
    dataset_loss, flat_gradient, Episode, PipelineConfig, RefinerWeights, SegModel,
};
use crate::tensor::gradcheck::{central_differences, max_relative_error};

use super::sweep::{Method, ModelSpec};
use super::synth::{synth_pool, PoolSpec};

/// Episode whose foreground and background prototypes sit far apart
/// relative to the texture, so the finest query features alone separate
/// the classes.
pub fn separable_spec(seed: u64) -> PoolSpec {
    PoolSpec {
        n_high: 0,
        n_low: 2,
        amplitude: 4.0,
        seed,
        ..PoolSpec::small()
    }
}

pub fn separable_episode(seed: u64) -> Result<Episode> {
    synth_pool(&separable_spec(seed))
}

/// Symmetric layers with angular projectors and an all-zero refiner.
pub fn toy_model(spec: &PoolSpec, seed: u64) -> Result<SegModel> {
    let layers = spec.tokens_per_layer.len();
    let model = ModelSpec::default();
    let mut m = model.build(Method::Symmetric, layers, spec.dim, seed)?;
    m.refiner = RefinerWeights::zeros(layers, spec.dim, model.hidden);
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub points: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub heads: usize,
    pub hidden: usize,
    pub spec: PoolSpec,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            points: 20,
            step: 1e-6,
            tolerance: 1e-4,
            seed: 0,
            heads: 2,
            hidden: 2,
            spec: PoolSpec {
                n_high: 1,
                n_low: 1,
                dim: 4,
                tokens_per_layer: vec![1, 4, 16],
                image_side: 6,
                ..PoolSpec::default()
            },
        }
    }
}

/// Model with every parameter drawn at random.
pub fn random_model(cfg: &GradCheckConfig, seed: u64) -> Result<SegModel> {
    let d = cfg.spec.dim;
    if cfg.heads == 0 || !d.is_multiple_of(cfg.heads) {
        return Err(Error::Config(format!(
            "dim {d} is not divisible by {} heads",
            cfg.heads
        )));
    }
    let layers = cfg.spec.tokens_per_layer.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let correlations = (0..layers)
        .map(|_| Correlation::Symmetric {
            heads: (0..cfg.heads)
                .map(|_| ScProjector::random(&mut rng, d / cfg.heads, 0.7))
                .collect(),
            scale: ScaleMode::SqrtD,
        })
        .collect();
    SegModel::new(
        correlations,
        RefinerWeights::random(&mut rng, layers, d, cfg.hidden, 0.7),
    )
}

/// Relative error between the tape gradient and central differences of
/// the loss at one random parameter point.
pub fn gradient_point(cfg: &GradCheckConfig, point: u64) -> Result<f64> {
    let seed = cfg.seed.wrapping_add(point);
    let episodes = vec![synth_pool(&PoolSpec {
        seed,
        ..cfg.spec.clone()
    })?];
    let model = random_model(cfg, seed)?;
    let pipeline = PipelineConfig {
        prune: PruneConfig::disabled(),
        ..PipelineConfig::default()
    };
    let (_, analytic) = flat_gradient(&model, &episodes, &pipeline)?;
    let numeric = central_differences(
        |p| dataset_loss(&model.with_flat_params(p)?, &episodes, &pipeline),
        &model.flat_params(),
        cfg.step,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Errors at every point, in point order.
pub fn gradient_suite(cfg: &GradCheckConfig) -> Result<Vec<f64>> {
    (0..cfg.points as u64)
        .map(|p| gradient_point(cfg, p))
        .collect()
}
