//! Seeded synthetic episodes.
//!
//! A latent pattern is an elliptical foreground blob with one prototype
//! vector for foreground and one for background. Layer tokens mix the two
//! prototypes by the blob's area fraction in each cell and add per-token
//! texture. Features are rounded to `f32` so they survive the feature-file
//! format unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::correlation::TokenMatrix;
use crate::error::{Error, Result};
use crate::segmenter::{area_fraction, grid_side, Episode, LayerStack, SupportItem};
use crate::tensor::{Grid, Matrix};

use super::config::KvConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct PoolSpec {
    /// Noisy copies of the query.
    pub n_high: usize,
    /// Supports drawn from unrelated patterns.
    pub n_low: usize,
    pub noise_sigma_high: f64,
    pub noise_sigma_low: f64,
    pub dim: usize,
    /// Token count of every layer, coarse to fine; each a perfect square.
    pub tokens_per_layer: Vec<usize>,
    pub seed: u64,
    /// Insert the exact query as support 0.
    pub upper_bound: bool,
    /// Side of the full-resolution masks.
    pub image_side: usize,
    /// Standard deviation of the foreground and background prototypes.
    pub amplitude: f64,
    /// Per-token texture standard deviation.
    pub texture: f64,
    pub category: String,
}

impl Default for PoolSpec {
    fn default() -> Self {
        Self {
            n_high: 4,
            n_low: 4,
            noise_sigma_high: 0.1,
            noise_sigma_low: 0.1,
            dim: 32,
            tokens_per_layer: vec![144, 576, 2304],
            seed: 0,
            upper_bound: true,
            image_side: 48,
            amplitude: 1.0,
            texture: 0.5,
            category: "synthetic".into(),
        }
    }
}

impl PoolSpec {
    /// A smaller template used for sweeps and tests. The two finest layers
    /// share one grid, as backbone layers within a stage do.
    pub fn small() -> Self {
        Self {
            dim: 16,
            tokens_per_layer: vec![64, 256, 256],
            image_side: 16,
            ..Self::default()
        }
    }

    pub fn num_supports(&self) -> usize {
        usize::from(self.upper_bound) + self.n_high + self.n_low
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_supports() == 0 {
            return Err(Error::contract("a pool needs at least one support"));
        }
        for (name, s) in [
            ("noise_sigma_high", self.noise_sigma_high),
            ("noise_sigma_low", self.noise_sigma_low),
            ("amplitude", self.amplitude),
            ("texture", self.texture),
        ] {
            if !s.is_finite() || s < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be a finite value >= 0, got {s}"
                )));
            }
        }
        if self.dim == 0 || self.image_side == 0 || self.tokens_per_layer.is_empty() {
            return Err(Error::Config(
                "dim, image_side and tokens_per_layer must be nonzero".into(),
            ));
        }
        if let Some(&bad) = self
            .tokens_per_layer
            .iter()
            .find(|&&n| n == 0 || grid_side(n).is_none())
        {
            return Err(Error::Config(format!(
                "{bad} tokens do not form a square grid"
            )));
        }
        Ok(())
    }

    /// Overrides fields from `cfg`, consuming the keys it knows.
    pub fn apply_config(&mut self, cfg: &mut KvConfig) -> Result<()> {
        cfg.set_if("n_high", &mut self.n_high)?;
        cfg.set_if("n_low", &mut self.n_low)?;
        cfg.set_if("noise_sigma_high", &mut self.noise_sigma_high)?;
        cfg.set_if("noise_sigma_low", &mut self.noise_sigma_low)?;
        cfg.set_if("dim", &mut self.dim)?;
        if let Some(t) = cfg.take_list("tokens_per_layer")? {
            self.tokens_per_layer = t;
        }
        cfg.set_if("upper_bound", &mut self.upper_bound)?;
        cfg.set_if("image_side", &mut self.image_side)?;
        cfg.set_if("amplitude", &mut self.amplitude)?;
        cfg.set_if("texture", &mut self.texture)?;
        cfg.set_if("category", &mut self.category)?;
        Ok(())
    }
}

struct Pattern {
    mask: Grid,
    fg: Vec<f64>,
    bg: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn draw_pattern(rng: &mut ChaCha8Rng, side: usize, dim: usize, amplitude: f64) -> Pattern {
    let s = side as f64;
    let cx = rng.gen_range(0.3..0.7) * s;
    let cy = rng.gen_range(0.3..0.7) * s;
    let rx = rng.gen_range(0.2..0.35) * s;
    let ry = rng.gen_range(0.2..0.35) * s;
    let mut mask = Grid::filled(side, side, 1, 0.0);
    for y in 0..side {
        for x in 0..side {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                mask.set(y, x, 0, 1.0);
            }
        }
    }
    let fg = (0..dim).map(|_| amplitude * gaussian(rng)).collect();
    let bg = (0..dim).map(|_| amplitude * gaussian(rng)).collect();
    Pattern { mask, fg, bg }
}

fn render(rng: &mut ChaCha8Rng, p: &Pattern, spec: &PoolSpec, sigma: f64) -> Result<LayerStack> {
    let d = spec.dim;
    let layers = spec
        .tokens_per_layer
        .iter()
        .map(|&n| {
            let side = grid_side(n).expect("validated");
            let frac = area_fraction(&p.mask, side)?;
            let mut data = Vec::with_capacity(n * d);
            for &a in frac.data() {
                for c in 0..d {
                    let base = a * p.fg[c] + (1.0 - a) * p.bg[c];
                    data.push(round_f32(
                        base + spec.texture * gaussian(rng) + sigma * gaussian(rng),
                    ));
                }
            }
            TokenMatrix::new(Matrix::new(n, d, data)?)
        })
        .collect::<Result<Vec<_>>>()?;
    LayerStack::new(layers)
}

fn perturb(rng: &mut ChaCha8Rng, stack: &LayerStack, sigma: f64) -> Result<LayerStack> {
    let layers = stack
        .layers()
        .iter()
        .map(|t| {
            let m = t.values();
            let data = m
                .data()
                .iter()
                .map(|&v| round_f32(v + sigma * gaussian(rng)))
                .collect();
            TokenMatrix::new(Matrix::new(m.rows(), m.cols(), data)?)
        })
        .collect::<Result<Vec<_>>>()?;
    LayerStack::new(layers)
}

/// Builds a seeded episode: the query, then the upper-bound copy (if any),
/// the noisy copies and the unrelated supports, with ids in that order.
pub fn synth_pool(spec: &PoolSpec) -> Result<Episode> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let query_pattern = draw_pattern(&mut rng, spec.image_side, spec.dim, spec.amplitude);
    let query = render(&mut rng, &query_pattern, spec, 0.0)?;
    let mut supports = Vec::with_capacity(spec.num_supports());
    let mut next_id = 0u32;
    let mut push =
        |layers: LayerStack, mask: &Grid, supports: &mut Vec<SupportItem>| -> Result<()> {
            supports.push(SupportItem::new(next_id, layers, mask.clone())?);
            next_id += 1;
            Ok(())
        };
    if spec.upper_bound {
        push(query.clone(), &query_pattern.mask, &mut supports)?;
    }
    for _ in 0..spec.n_high {
        let layers = perturb(&mut rng, &query, spec.noise_sigma_high)?;
        push(layers, &query_pattern.mask, &mut supports)?;
    }
    for _ in 0..spec.n_low {
        let p = draw_pattern(&mut rng, spec.image_side, spec.dim, spec.amplitude);
        let layers = render(&mut rng, &p, spec, spec.noise_sigma_low)?;
        push(layers, &p.mask, &mut supports)?;
    }
    Episode::new(query, query_pattern.mask, supports, spec.category.clone())
}
