//! The masked autoencoder: patching, embeddings, transformer encoders and
//! decoders, the complementary-mask bottleneck merge, the single-modal
//! variant and fingerprint pooling.
//!
//! Parameters live in a [`ModelParams`] map keyed by dotted names such as
//! `ecg.enc.block0.attn.q.w`. Graph builders in [`network`] refer to them as
//! named leaves, so one parameter set serves any batch shape or mask plan.

mod checkpoint;
pub mod network;
mod params;

use rand::seq::index;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use params::{sinusoidal_table, ModelParams};

use crate::error::{Error, Result};
use crate::numeric::{Array, Graph, Mode};
use crate::rng::{stream, tag};
use crate::signals::Modality;

/// Mask ratios accepted for cross-modal plans.
pub const MASK_RATIO_RANGE: (f64, f64) = (0.1, 0.9);
/// Masking ratio of the single-modal variant.
pub const SINGLE_MODAL_RATIO: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub segment_len: usize,
    pub patch_size: usize,
    pub d_enc: usize,
    pub enc_depth: usize,
    pub dec_width: usize,
    pub dec_depth: usize,
    pub heads: usize,
    /// Feed-forward hidden width as a multiple of the block width.
    pub ffn_mult: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            segment_len: 2048,
            patch_size: 64,
            d_enc: 64,
            enc_depth: 2,
            dec_width: 32,
            dec_depth: 1,
            heads: 4,
            ffn_mult: 4,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    /// Encoder 768 × 6, decoder 256 × 3, eight heads.
    pub fn full_scale() -> Self {
        Self { d_enc: 768, enc_depth: 6, dec_width: 256, dec_depth: 3, heads: 8, ..Self::default() }
    }

    /// Number of patches per segment.
    pub fn k(&self) -> usize {
        self.segment_len / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |key: &str, reason: String| Err(Error::InvalidValue { key: format!("model.{key}"), reason });
        for (key, v) in [
            ("segment_len", self.segment_len),
            ("patch_size", self.patch_size),
            ("d_enc", self.d_enc),
            ("enc_depth", self.enc_depth),
            ("dec_width", self.dec_width),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
        ] {
            if v == 0 {
                return invalid(key, "must be positive".into());
            }
        }
        if !self.segment_len.is_multiple_of(self.patch_size) {
            return Err(Error::IndivisibleLength { len: self.segment_len, patch: self.patch_size });
        }
        if self.k() < 2 {
            return invalid("patch_size", "segment must hold at least two patches".into());
        }
        if !self.d_enc.is_multiple_of(self.heads) {
            return invalid("d_enc", format!("{} is not divisible by {} heads", self.d_enc, self.heads));
        }
        if !self.dec_width.is_multiple_of(self.heads) {
            return invalid("dec_width", format!("{} is not divisible by {} heads", self.dec_width, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid("dropout", format!("{} is outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// A complementary partition of patch indices. `unmasked` (U) rows come from
/// the ECG stream and `masked` (M) rows from the PPG stream; in the
/// single-modal variant M rows are hidden from the encoder.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskPlan {
    k: usize,
    unmasked: Vec<usize>,
    masked: Vec<usize>,
}

impl MaskPlan {
    /// Builds a plan from the masked set; U is its complement.
    pub fn from_masked(k: usize, masked: &[usize]) -> Result<Self> {
        let mut is_masked = vec![false; k];
        for &i in masked {
            if i >= k || is_masked[i] {
                return Err(Error::PlanMismatch(format!("masked index {i} is repeated or outside 0..{k}")));
            }
            is_masked[i] = true;
        }
        Ok(Self {
            k,
            unmasked: (0..k).filter(|&i| !is_masked[i]).collect(),
            masked: (0..k).filter(|&i| is_masked[i]).collect(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// U: sorted, ECG-visible rows.
    pub fn unmasked(&self) -> &[usize] {
        &self.unmasked
    }

    /// M: sorted, PPG-visible rows.
    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn is_unmasked(&self, i: usize) -> bool {
        self.unmasked.binary_search(&i).is_ok()
    }

    /// Indices of `set` repeated for each of `samples` stacked `k`-row blocks.
    pub fn batch_indices(&self, set: &[usize], samples: usize) -> Vec<usize> {
        (0..samples).flat_map(|b| set.iter().map(move |&i| b * self.k + i)).collect()
    }
}

/// `round(r·k)` with ties away from zero.
pub fn masked_count(k: usize, ratio: f64) -> usize {
    (ratio * k as f64).round() as usize
}

fn random_plan(k: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    let m = masked_count(k, ratio);
    if m == 0 {
        return Err(Error::EmptyMask("masked"));
    }
    if m >= k {
        return Err(Error::EmptyMask("unmasked"));
    }
    let picked = index::sample(&mut stream(seed, &[tag::MASK_PLAN]), k, m).into_vec();
    MaskPlan::from_masked(k, &picked)
}

/// Draws a cross-modal plan with `|M| = round(r_ecg·k)`.
pub fn sample_mask_plan(k: usize, r_ecg: f64, seed: u64) -> Result<MaskPlan> {
    if !(MASK_RATIO_RANGE.0..=MASK_RATIO_RANGE.1).contains(&r_ecg) {
        return Err(Error::InvalidRatio(r_ecg));
    }
    random_plan(k, r_ecg, seed)
}

/// Draws a single-modal plan; any ratio in `(0, 1)` that leaves both sets
/// non-empty is accepted.
pub fn sample_single_modal_plan(k: usize, r_m: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&r_m) {
        return Err(Error::InvalidRatio(r_m));
    }
    random_plan(k, r_m, seed)
}

/// Splits a segment into `len / s` rows of `s` consecutive samples.
pub fn patchify(samples: &[f64], s: usize) -> Result<Array> {
    if s == 0 || samples.is_empty() || !samples.len().is_multiple_of(s) {
        return Err(Error::IndivisibleLength { len: samples.len(), patch: s });
    }
    Array::matrix(samples.len() / s, s, samples.to_vec())
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Array) -> Vec<f64> {
    patches.data().to_vec()
}

/// Stacks equally wide matrices vertically.
pub fn stack_rows(parts: &[Array]) -> Result<Array> {
    let cols = parts.first().map(Array::cols).ok_or_else(|| Error::InvalidInput("nothing to stack".into()))?;
    if parts.iter().any(|p| !p.is_matrix() || p.cols() != cols) {
        return Err(Error::InvalidInput("stacked parts differ in width".into()));
    }
    let rows = parts.iter().map(Array::rows).sum();
    Array::matrix(rows, cols, parts.iter().flat_map(|p| p.data().iter().copied()).collect())
}

/// Column-wise mean over rows.
pub fn fingerprint(z: &Array) -> Vec<f64> {
    let (rows, cols) = (z.rows(), z.cols());
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(z.row(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= rows as f64);
    out
}

fn check_shape(a: &Array, rows: usize, cols: usize, what: &str) -> Result<()> {
    if a.shape() != [rows, cols] {
        return Err(Error::PlanMismatch(format!("{what} has shape {:?}, expected [{rows}, {cols}]", a.shape())));
    }
    Ok(())
}

/// Patch normalization, projection and positional rows, in eval mode.
pub fn embed_patches(params: &ModelParams, modality: Modality, patches: &Array) -> Result<Array> {
    let cfg = params.config();
    check_shape(patches, cfg.k(), cfg.patch_size, "patch matrix")?;
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.constant(patches.clone());
    let e = network::embed(&mut g, modality, x, 1);
    g.evaluate(e, params.bindings())
}

/// Runs one modality encoder over a `k × d_enc` embedding, in eval mode.
pub fn encode_modality(params: &ModelParams, modality: Modality, e_i: &Array) -> Result<Array> {
    let cfg = params.config();
    check_shape(e_i, cfg.k(), cfg.d_enc, "embedding")?;
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.constant(e_i.clone());
    let z = network::encode(&mut g, cfg, modality, x, 1, cfg.k());
    g.evaluate(z, params.bindings())
}

/// Row `i` of the result is `z_ecg[i]` when `i ∈ U`, else `z_ppg[i]`.
pub fn merge_bottleneck(z_ecg: &Array, z_ppg: &Array, plan: &MaskPlan) -> Result<Array> {
    if !z_ecg.is_matrix() || z_ecg.shape() != z_ppg.shape() || z_ecg.rows() != plan.k() {
        return Err(Error::PlanMismatch(format!(
            "encodings {:?} and {:?} do not fit a plan over {} patches",
            z_ecg.shape(),
            z_ppg.shape(),
            plan.k()
        )));
    }
    let mut g = Graph::new(Mode::Eval, 0);
    let e = g.constant(z_ecg.clone());
    let p = g.constant(z_ppg.clone());
    let z = network::merge(&mut g, e, p, plan, 1);
    g.evaluate(z, &Default::default())
}

/// Decodes a fully populated `k × d_enc` bottleneck to `k × s` patches, in
/// eval mode.
pub fn decode_modality(params: &ModelParams, modality: Modality, z_c: &Array) -> Result<Array> {
    let cfg = params.config();
    check_shape(z_c, cfg.k(), cfg.d_enc, "bottleneck")?;
    let mut g = Graph::new(Mode::Eval, 0);
    let z = g.constant(z_c.clone());
    let out = network::decode(&mut g, cfg, modality, z, 1, None);
    g.evaluate(out, params.bindings())
}

/// Output of the single-modal masked autoencoder.
#[derive(Clone, Debug, PartialEq)]
pub struct SingleModalOutput {
    /// Encoder output over the unmasked rows only, `|U| × d_enc`.
    pub z: Array,
    pub reconstruction: Array,
    pub plan: MaskPlan,
}

/// Masks `round(r_m·k)` patches, encodes the rest, and decodes with mask
/// tokens in the hidden rows. Eval mode.
pub fn single_modal_forward(
    params: &ModelParams,
    modality: Modality,
    samples: &[f64],
    r_m: f64,
    seed: u64,
) -> Result<SingleModalOutput> {
    let cfg = params.config();
    let patches = patchify(samples, cfg.patch_size)?;
    check_shape(&patches, cfg.k(), cfg.patch_size, "patch matrix")?;
    let plan = sample_single_modal_plan(cfg.k(), r_m, seed)?;
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.constant(patches);
    let nodes = network::single_modal(&mut g, cfg, modality, x, &plan, 1);
    let eval = g.forward(nodes.reconstruction, params.bindings())?;
    Ok(SingleModalOutput { z: eval.value(nodes.z).clone(), reconstruction: eval.root_value().clone(), plan })
}
