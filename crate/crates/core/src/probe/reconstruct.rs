//! Cross-modal reconstruction: one modality's encoder feeds the other
//! modality's decoder.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use super::{check_segments, patch_matrix, require_modality, CHUNK};
use crate::error::{Error, Result};
use crate::model::network;
use crate::model::{unpatchify, ModelConfig, ModelParams};
use crate::numeric::{Array, Graph, Mode};
use crate::rng::{mix_seed, stream, tag};
use crate::signals::{Modality, PairedSegment};
use crate::training::AdamState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    EcgToPpg,
    PpgToEcg,
}

impl Direction {
    pub fn source(self) -> Modality {
        match self {
            Direction::EcgToPpg => Modality::Ecg,
            Direction::PpgToEcg => Modality::Ppg,
        }
    }

    pub fn target(self) -> Modality {
        self.source().other()
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::EcgToPpg => "ecg2ppg",
            Direction::PpgToEcg => "ppg2ecg",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ecg2ppg" => Ok(Direction::EcgToPpg),
            "ppg2ecg" => Ok(Direction::PpgToEcg),
            other => Err(Error::InvalidInput(format!("unknown direction `{other}`"))),
        }
    }
}

/// Downstream setting: every parameter frozen, or the target decoder
/// fine-tuned on paired data with the encoders frozen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Setting {
    Frozen,
    DecoderFinetune,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Frozen => "frozen",
            Setting::DecoderFinetune => "finetune",
        })
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(Setting::Frozen),
            "finetune" | "decoder_finetune" => Ok(Setting::DecoderFinetune),
            other => Err(Error::InvalidInput(format!("unknown setting `{other}`"))),
        }
    }
}

/// Decoder fine-tuning schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 16, learning_rate: 1e-3, seed: 0 }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidInput("fine-tuning needs positive epochs and batch size".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidValue {
                key: "learning_rate".into(),
                reason: format!("{} is not a positive finite value", self.learning_rate),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionRow {
    pub subject_id: u32,
    pub segment_index: u32,
    pub target: Vec<f64>,
    pub output: Vec<f64>,
    /// Mean absolute error over the full waveform.
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub direction: Direction,
    pub setting: Setting,
    pub rows: Vec<ReconstructionRow>,
    /// Mean of the per-segment errors.
    pub mae: f64,
}

impl ReconstructionRow {
    /// Two-column CSV `target,reconstruction`, one sample per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("target,reconstruction\n");
        for (t, o) in self.target.iter().zip(&self.output) {
            out.push_str(&format!("{t:e},{o:e}\n"));
        }
        out
    }
}

fn check_direction(params: &ModelParams, direction: Direction) -> Result<()> {
    require_modality(params, direction.source())?;
    require_modality(params, direction.target())
}

/// Frozen source-encoder outputs, `b·k × d_enc`, in eval mode.
fn encode_source(params: &ModelParams, pairs: &[PairedSegment], m: Modality) -> Result<Array> {
    let cfg = params.config();
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.constant(patch_matrix(cfg, pairs, m)?);
    let e = network::embed(&mut g, m, x, pairs.len());
    let z = network::encode(&mut g, cfg, m, e, pairs.len(), cfg.k());
    g.evaluate(z, params.bindings())
}

fn decoder_names(params: &ModelParams, m: Modality) -> Vec<String> {
    let prefix = format!("{}.dec.", m.prefix());
    params.names().filter(|n| n.starts_with(&prefix)).map(str::to_string).collect()
}

/// Trains only the target decoder to map frozen source encodings of
/// `pairs` to the target modality's raw patches, minimizing per-element
/// squared error with Adam. Batches are reshuffled every epoch.
pub fn finetune_decoder(
    params: &ModelParams,
    pairs: &[PairedSegment],
    direction: Direction,
    config: &FinetuneConfig,
) -> Result<ModelParams> {
    config.validate()?;
    check_direction(params, direction)?;
    let cfg: ModelConfig = *params.config();
    check_segments(&cfg, pairs)?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput("fine-tuning needs at least one paired segment".into()));
    }
    let (src, tgt) = (direction.source(), direction.target());
    let per_pair = cfg.k() * cfg.d_enc;
    let mut encoded: Vec<Vec<f64>> = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(CHUNK) {
        let z = encode_source(params, chunk, src)?;
        encoded.extend(z.data().chunks(per_pair).map(<[f64]>::to_vec));
    }
    let mut tuned = params.clone();
    let names = decoder_names(params, tgt);
    let mut optim = AdamState::new(params, names.iter().map(String::as_str))?;
    let rows = cfg.k();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut stream(config.seed, &[tag::FINETUNE, epoch as u64]));
        for batch in order.chunks(config.batch_size) {
            let b = batch.len();
            let z_data = batch.iter().flat_map(|&i| encoded[i].iter().copied()).collect();
            let selected: Vec<PairedSegment> = batch.iter().map(|&i| pairs[i].clone()).collect();
            let mut g = Graph::new(Mode::Train, mix_seed(config.seed, &[tag::FINETUNE, u64::MAX, step]));
            let z = g.constant(Array::matrix(b * rows, cfg.d_enc, z_data)?);
            let target = g.constant(patch_matrix(&cfg, &selected, tgt)?);
            let out = network::decode(&mut g, &cfg, tgt, z, b, None);
            let diff = g.sub(out, target);
            let sq = g.squared_norm(diff);
            let loss = g.scale(sq, 1.0 / (b * rows * cfg.patch_size) as f64);
            let grads = g.forward(loss, tuned.bindings())?.backward(&optim.names())?;
            if grads.values().any(|a| !a.all_finite()) {
                return Err(Error::NonFiniteLoss { step: step as usize });
            }
            optim.update(&mut tuned, &grads, config.learning_rate)?;
            step += 1;
        }
    }
    Ok(tuned)
}

/// Encodes each source segment in full, decodes the encoding with the
/// target decoder and scores the unpatchified output against the target
/// waveform. Under [`Setting::DecoderFinetune`] the target decoder is first
/// fine-tuned on `finetune` pairs; the input parameters are never modified.
pub fn reconstruct_cross(
    params: &ModelParams,
    pairs: &[PairedSegment],
    direction: Direction,
    setting: Setting,
    finetune: Option<(&[PairedSegment], &FinetuneConfig)>,
) -> Result<Reconstruction> {
    check_direction(params, direction)?;
    check_segments(params.config(), pairs)?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no segments to reconstruct".into()));
    }
    let tuned;
    let model = match setting {
        Setting::Frozen => params,
        Setting::DecoderFinetune => {
            let (ft_pairs, ft_cfg) = finetune
                .ok_or_else(|| Error::InvalidInput("decoder fine-tuning needs a paired fine-tuning split".into()))?;
            tuned = finetune_decoder(params, ft_pairs, direction, ft_cfg)?;
            &tuned
        }
    };
    let cfg = *model.config();
    let (src, tgt) = (direction.source(), direction.target());
    let mut rows = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(CHUNK) {
        let b = chunk.len();
        let z = encode_source(model, chunk, src)?;
        let mut g = Graph::new(Mode::Eval, 0);
        let zn = g.constant(z);
        let out = network::decode(&mut g, &cfg, tgt, zn, b, None);
        let recon = g.evaluate(out, model.bindings())?;
        let flat = unpatchify(&recon);
        for (i, p) in chunk.iter().enumerate() {
            let output = flat[i * cfg.segment_len..(i + 1) * cfg.segment_len].to_vec();
            let target = p.get(tgt).samples_f64();
            let mae = target.iter().zip(&output).map(|(t, o)| (t - o).abs()).sum::<f64>() / target.len() as f64;
            rows.push(ReconstructionRow {
                subject_id: p.subject_id(),
                segment_index: p.segment_index(),
                target,
                output,
                mae,
            });
        }
    }
    let mae = rows.iter().map(|r| r.mae).sum::<f64>() / rows.len() as f64;
    Ok(Reconstruction { direction, setting, rows, mae })
}
