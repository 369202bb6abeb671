use rand::seq::index;

use super::{build_objective, draw_mask_ratio, TrainBatch, TrainMode};
use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{sample_mask_plan, ModelConfig, ModelParams};
use crate::numeric::{Mode, Primitive};
use crate::rng::{mix_seed, stream, tag};
use crate::signals::{generate_dataset, Dataset};

/// Settings of a finite-difference audit of the total training loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    /// Coordinates sampled per parameter block; smaller blocks are checked
    /// in full.
    pub coords_per_block: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            batch_size: 4,
            coords_per_block: 50,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

/// Worst disagreement within one parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub blocks: Vec<BlockReport>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&BlockReport> {
        self.blocks.iter().filter(|b| !(b.max_rel_error <= self.tolerance)).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

/// `|a − b| / max(|a|, |b|, 1e-3)`: relative error that becomes an absolute
/// tolerance of `1e-3 · tol` near zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compares reverse-mode gradients of the cross-modal total loss against
/// central differences on a random batch, plan and parameter set. With
/// `fault`, the adjoint of one primitive is scaled to produce a known-bad
/// gradient.
pub fn gradcheck(config: &GradcheckConfig, fault: Option<(Primitive, f64)>) -> Result<GradcheckReport> {
    config.model.validate()?;
    if config.coords_per_block == 0 || !(config.step > 0.0) {
        return Err(Error::InvalidInput("gradcheck needs a positive step and coordinate count".into()));
    }
    let seed = mix_seed(config.seed, &[tag::GRADCHECK]);
    let b = config.batch_size;
    let dataset = audit_dataset(b, config.model.segment_len, seed)?;
    let indices: Vec<usize> = (0..b).map(|i| 2 * i).collect();
    let batch = TrainBatch::assemble(&dataset, &indices, &AugmentConfig::default(), seed, true)?;
    let ratio = draw_mask_ratio((0.1, 0.9), seed, 0)?;
    let plan = sample_mask_plan(config.model.k(), ratio, seed)?;
    let params = ModelParams::init_cross_modal(config.model, seed)?;
    let mut objective =
        build_objective(&config.model, TrainMode::CrossModal, &batch, &plan, &config.weights, Mode::Train, seed)?;
    if let Some((primitive, factor)) = fault {
        objective.graph.corrupt_adjoint(primitive, factor);
    }
    let g = &objective.graph;
    let names: Vec<&str> = params.names().collect();
    let grads = g.forward(objective.total, params.bindings())?.backward(&names)?;

    let mut blocks = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let len = params.get(name).expect("listed name").len();
        let coords: Vec<usize> = if len <= config.coords_per_block {
            (0..len).collect()
        } else {
            let mut c = index::sample(&mut stream(seed, &[i as u64]), len, config.coords_per_block).into_vec();
            c.sort_unstable();
            c
        };
        let numeric = g.finite_difference_at(objective.total, params.bindings(), name, &coords, config.step)?;
        let analytic = &grads[*name];
        let (mut rel, mut abs) = (0.0f64, 0.0f64);
        for (&c, &fd) in coords.iter().zip(&numeric) {
            let a = analytic.data()[c];
            rel = rel.max(relative_error(a, fd));
            abs = abs.max((a - fd).abs());
        }
        blocks.push(BlockReport {
            name: name.to_string(),
            coords: coords.len(),
            max_rel_error: rel,
            max_abs_error: abs,
        });
    }
    Ok(GradcheckReport { blocks, tolerance: config.tolerance })
}

fn audit_dataset(subjects: usize, segment_len: usize, seed: u64) -> Result<Dataset> {
    let n = u32::try_from(subjects).map_err(|_| Error::InvalidInput("batch size too large".into()))?;
    if n < 2 {
        return Err(Error::BatchTooSmall(subjects));
    }
    let dataset = generate_dataset(n, 2, seed)?;
    if dataset.segment_len != segment_len {
        return Err(Error::PlanMismatch(format!(
            "gradcheck data has segments of length {}, model expects {segment_len}",
            dataset.segment_len
        )));
    }
    Ok(dataset)
}
