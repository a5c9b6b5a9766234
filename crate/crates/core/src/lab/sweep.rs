//! Seeded N-sweeps over attention methods.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::correlation::{deviation, Affine, Correlation, ScProjector, ScaleMode};
use crate::error::{Error, Result};
use crate::pruning::PruneConfig;
use crate::segmenter::{
    forward_episode, miou, PipelineConfig, Pooling, RefinerWeights, SegModel, DEFAULT_HIDDEN,
};

use super::config::KvConfig;
use super::synth::{synth_pool, PoolSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Standard,
    Symmetric,
    SymmetricPrune,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Standard, Method::Symmetric, Method::SymmetricPrune];

    pub fn name(self) -> &'static str {
        match self {
            Method::Standard => "standard",
            Method::Symmetric => "symmetric",
            Method::SymmetricPrune => "symmetric+prune",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

/// How per-layer models are drawn for a trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub heads: usize,
    /// Magnitude of the shared projection for Symmetric Correlation.
    pub gain: f64,
    pub scale: ScaleMode,
    /// Slope of the refiner head around one half.
    pub refiner_gain: f64,
    pub hidden: usize,
    /// Standard layers draw query weights with std `standard_scale/√d`.
    pub standard_scale: f64,
    /// Correlation between key and query weights of standard layers.
    pub key_correlation: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            heads: 1,
            gain: 8.0,
            scale: ScaleMode::SqrtD,
            refiner_gain: 10.0,
            hidden: DEFAULT_HIDDEN,
            standard_scale: 2.0,
            key_correlation: 0.9,
        }
    }
}

impl ModelSpec {
    /// Standard layers get random query weights and key weights correlated
    /// with them, standing in for a trained key/query pair; symmetric layers get one angular projector per head. The refiner
    /// passes the fused coarse masks through.
    pub fn build(&self, method: Method, layers: usize, dim: usize, seed: u64) -> Result<SegModel> {
        if self.heads == 0 || !dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {dim} is not divisible by {} heads",
                self.heads
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let std = 1.0 / (dim as f64).sqrt();
        if !(-1.0..=1.0).contains(&self.key_correlation) {
            return Err(Error::Config("key_correlation must lie in [-1, 1]".into()));
        }
        let dh = dim / self.heads;
        let correlations = (0..layers)
            .map(|_| match method {
                Method::Standard => {
                    let std = self.standard_scale * std;
                    let query = Affine::random(&mut rng, dim, dim, std);
                    let noise = Affine::random(&mut rng, dim, dim, std);
                    let rho = self.key_correlation;
                    let key_weight = query
                        .weight
                        .scale(rho)
                        .add(&noise.weight.scale((1.0 - rho * rho).sqrt()))
                        .expect("same shape");
                    Correlation::Standard {
                        key: Affine::new(key_weight, noise.bias).expect("d x d"),
                        query,
                    }
                }
                Method::Symmetric | Method::SymmetricPrune => Correlation::Symmetric {
                    heads: (0..self.heads)
                        .map(|_| ScProjector::angular(&mut rng, dh, self.gain))
                        .collect(),
                    scale: self.scale,
                },
            })
            .collect();
        SegModel::new(
            correlations,
            RefinerWeights::passthrough(layers, dim, self.hidden, self.refiner_gain),
        )
    }

    pub fn apply_config(&mut self, cfg: &mut KvConfig) -> Result<()> {
        cfg.set_if("heads", &mut self.heads)?;
        cfg.set_if("gain", &mut self.gain)?;
        cfg.set_if("scale", &mut self.scale)?;
        cfg.set_if("refiner_gain", &mut self.refiner_gain)?;
        cfg.set_if("hidden", &mut self.hidden)?;
        cfg.set_if("standard_scale", &mut self.standard_scale)?;
        cfg.set_if("key_correlation", &mut self.key_correlation)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    /// Pool template; `n_high` caps the noisy copies, the rest are unrelated.
    pub template: PoolSpec,
    pub n_values: Vec<usize>,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub trials: usize,
    pub model: ModelSpec,
    pub pooling: Pooling,
    /// Measure forward time; otherwise `wall_ms` is written as 0 so that
    /// reports are byte-reproducible.
    pub record_timing: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            template: PoolSpec {
                n_high: 0,
                ..PoolSpec::small()
            },
            n_values: vec![1, 2, 5, 10, 30, 50, 70],
            methods: Method::ALL.to_vec(),
            seed: 0,
            trials: 10,
            model: ModelSpec::default(),
            pooling: Pooling::Joint,
            record_timing: false,
        }
    }
}

impl SweepConfig {
    pub fn apply_config(&mut self, cfg: &mut KvConfig) -> Result<()> {
        self.template.apply_config(cfg)?;
        self.model.apply_config(cfg)?;
        if let Some(n) = cfg.take_list("n_values")? {
            self.n_values = n;
        }
        if let Some(m) = cfg.take_list("methods")? {
            self.methods = m;
        }
        cfg.set_if("trials", &mut self.trials)?;
        cfg.set_if("pooling", &mut self.pooling)?;
        cfg.set_if("record_timing", &mut self.record_timing)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_values.len() < 2 {
            return Err(Error::Config("a sweep needs at least two N values".into()));
        }
        if self.n_values[0] == 0 || self.n_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "N values must be positive and strictly increasing".into(),
            ));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        self.template.validate()
    }

    /// Short digest of every setting, for report metadata.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(format!("{self:?}").as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn pool_spec(&self, seed: u64, n: usize) -> PoolSpec {
        let n_high = self.template.n_high.min(n - 1);
        PoolSpec {
            seed,
            upper_bound: true,
            n_high,
            n_low: n - 1 - n_high,
            ..self.template.clone()
        }
    }
}

/// One episode's outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub seed: u64,
    pub n: usize,
    pub method: Method,
    /// Layer-averaged deviation of the upper-bound support; absent when it
    /// has nothing to be compared with.
    pub delta: Option<f64>,
    pub miou: f64,
    pub wall_ms: f64,
}

/// Runs one episode with `n` supports under `method`.
pub fn run_trial(cfg: &SweepConfig, seed: u64, n: usize, method: Method) -> Result<TrialRecord> {
    let spec = cfg.pool_spec(seed, n);
    let e = synth_pool(&spec)?;
    let model = cfg
        .model
        .build(method, spec.tokens_per_layer.len(), spec.dim, seed)?;
    let pipeline = PipelineConfig {
        prune: match method {
            Method::SymmetricPrune => PruneConfig::default(),
            _ => PruneConfig::disabled(),
        },
        pooling: cfg.pooling,
    };
    let start = Instant::now();
    let out = forward_episode(&e, &model, &pipeline)?;
    let wall_ms = if cfg.record_timing {
        start.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    };
    let delta = match out.kept.iter().position(|&i| i == 0) {
        Some(pos) if out.kept.len() >= 2 => {
            let per_layer = out
                .reports
                .iter()
                .map(|r| deviation(r, pos))
                .collect::<Result<Vec<_>>>()?;
            Some(per_layer.iter().sum::<f64>() / per_layer.len() as f64)
        }
        _ => None,
    };
    let score = miou(&[out.prediction], &[e.query_truth], &[e.category])?;
    Ok(TrialRecord {
        seed,
        n,
        method,
        delta,
        miou: score,
        wall_ms,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub n: usize,
    pub method: Method,
    pub delta: Option<f64>,
    pub miou: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// Means over trials, grouped by method then ordered by N.
    pub rows: Vec<SweepRow>,
    /// Every trial, ordered by seed, then method, then N.
    pub trials: Vec<TrialRecord>,
    pub seed: u64,
    pub config_hash: String,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn dilution_sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.trials as u64)
        .map(|t| cfg.seed.wrapping_add(t))
        .collect();
    let per_seed = seeds
        .par_iter()
        .map(|&seed| {
            let mut records = Vec::with_capacity(cfg.methods.len() * cfg.n_values.len());
            for &method in &cfg.methods {
                for &n in &cfg.n_values {
                    records.push(run_trial(cfg, seed, n, method)?);
                }
            }
            Ok(records)
        })
        .collect::<Result<Vec<_>>>()?;
    let trials: Vec<TrialRecord> = per_seed.into_iter().flatten().collect();
    let mut rows = Vec::new();
    for &method in &cfg.methods {
        for &n in &cfg.n_values {
            let group = || {
                trials
                    .iter()
                    .filter(move |t| t.method == method && t.n == n)
            };
            let row = SweepRow {
                n,
                method,
                delta: mean(group().filter_map(|t| t.delta)),
                miou: mean(group().map(|t| t.miou)).expect("at least one trial"),
                wall_ms: mean(group().map(|t| t.wall_ms)).expect("at least one trial"),
            };
            if !row.miou.is_finite()
                || !row.wall_ms.is_finite()
                || row.delta.is_some_and(|d| !d.is_finite())
            {
                return Err(Error::NonFinite("sweep metrics"));
            }
            rows.push(row);
        }
    }
    Ok(SweepResult {
        rows,
        trials,
        seed: cfg.seed,
        config_hash: cfg.hash(),
    })
}
