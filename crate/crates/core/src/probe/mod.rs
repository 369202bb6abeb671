//! Frozen-encoder evaluation: fingerprint extraction, cross-modal
//! reconstruction (fully frozen or with a fine-tuned target decoder), linear
//! probes and their metrics.

mod linear;
mod metrics;
mod reconstruct;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

pub use linear::{fit_linear_probe, ProbeConfig, ProbeModel};
pub use metrics::{auprc, auroc, compute_metrics, MetricReport};
pub use reconstruct::{
    finetune_decoder, reconstruct_cross, Direction, FinetuneConfig, Reconstruction, ReconstructionRow, Setting,
};

use crate::error::{Error, Result};
use crate::model::network;
use crate::model::{sample_mask_plan, ModelConfig, ModelParams};
use crate::numeric::{Array, Graph, Mode};
use crate::rng::{stream, tag};
use crate::signals::{Modality, PairedSegment};

/// Ratio and seed of the fixed plan used for paired fingerprints.
pub const PAIRED_RATIO: f64 = 0.5;
pub const PAIRED_PLAN_SEED: u64 = 0;
const CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Binary,
    Multiclass,
    Regression,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Binary => "binary",
            Task::Multiclass => "multiclass",
            Task::Regression => "regression",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Task::Binary),
            "multiclass" => Ok(Task::Multiclass),
            "regression" => Ok(Task::Regression),
            other => Err(Error::InvalidInput(format!("unknown task `{other}`"))),
        }
    }
}

/// Which inputs a fingerprint is computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    Ecg,
    Ppg,
    Paired,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Ecg => "ecg",
            Source::Ppg => "ppg",
            Source::Paired => "paired",
        })
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ecg" => Ok(Source::Ecg),
            "ppg" => Ok(Source::Ppg),
            "paired" => Ok(Source::Paired),
            other => Err(Error::InvalidInput(format!("unknown source `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FingerprintRow {
    pub subject_id: u32,
    pub segment_index: u32,
    pub source: Source,
    pub values: Vec<f64>,
}

/// Fingerprints of equal length with unique `(subject, segment, source)`
/// keys.
#[derive(Clone, Debug, PartialEq)]
pub struct FingerprintSet {
    d_enc: usize,
    rows: Vec<FingerprintRow>,
}

pub const FINGERPRINT_KEY_COLUMNS: [&str; 3] = ["subject_id", "segment_index", "source"];

impl FingerprintSet {
    pub fn new(d_enc: usize, rows: Vec<FingerprintRow>) -> Result<Self> {
        if d_enc == 0 {
            return Err(Error::InvalidInput("fingerprints need at least one dimension".into()));
        }
        let mut keys = BTreeSet::new();
        for r in &rows {
            if r.values.len() != d_enc {
                return Err(Error::InvalidInput(format!(
                    "fingerprint of subject {} segment {} has {} values, expected {d_enc}",
                    r.subject_id,
                    r.segment_index,
                    r.values.len()
                )));
            }
            if !keys.insert((r.subject_id, r.segment_index, r.source)) {
                return Err(Error::InvalidInput(format!(
                    "duplicate fingerprint for subject {} segment {} source {}",
                    r.subject_id, r.segment_index, r.source
                )));
            }
        }
        Ok(Self { d_enc, rows })
    }

    pub fn d_enc(&self) -> usize {
        self.d_enc
    }

    pub fn rows(&self) -> &[FingerprintRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Fingerprints of `rows` stacked as a matrix.
    pub fn matrix(&self, rows: &[usize]) -> Result<Array> {
        let data = rows.iter().flat_map(|&i| self.rows[i].values.iter().copied()).collect();
        Array::matrix(rows.len(), self.d_enc, data)
    }

    /// CSV with header `subject_id,segment_index,source,f0,…,f{D-1}`.
    pub fn to_csv(&self) -> String {
        let mut out = FINGERPRINT_KEY_COLUMNS.join(",");
        for j in 0..self.d_enc {
            out.push_str(&format!(",f{j}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{}", r.subject_id, r.segment_index, r.source));
            for v in &r.values {
                out.push_str(&format!(",{v:e}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> =
            lines.next().ok_or_else(|| Error::Malformed("empty fingerprint CSV".into()))?.split(',').collect();
        let d = header.len().saturating_sub(3);
        let expected_values = (0..d).map(|j| format!("f{j}"));
        if header.len() < 4
            || header[..3] != FINGERPRINT_KEY_COLUMNS
            || !header[3..].iter().map(|h| h.trim()).eq(expected_values.collect::<Vec<_>>().iter().map(String::as_str))
        {
            return Err(Error::Malformed(
                "fingerprint CSV header must be subject_id,segment_index,source,f0,...".into(),
            ));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = |what: &str| Error::Malformed(format!("fingerprint CSV row {}: {what}", n + 1));
            if fields.len() != header.len() {
                return Err(bad("wrong number of fields"));
            }
            let values = fields[3..]
                .iter()
                .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| bad("non-numeric value"))?;
            rows.push(FingerprintRow {
                subject_id: fields[0].parse().map_err(|_| bad("bad subject_id"))?,
                segment_index: fields[1].parse().map_err(|_| bad("bad segment_index"))?,
                source: fields[2].parse()?,
                values,
            });
        }
        Self::new(d, rows)
    }
}

/// Parses a label CSV with header `subject_id,segment_index,label`.
pub fn parse_labels_csv(text: &str) -> Result<BTreeMap<(u32, u32), f64>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> =
        lines.next().ok_or_else(|| Error::Malformed("empty label CSV".into()))?.split(',').map(str::trim).collect();
    if header != ["subject_id", "segment_index", "label"] {
        return Err(Error::Malformed("label CSV header must be subject_id,segment_index,label".into()));
    }
    let mut labels = BTreeMap::new();
    for (n, line) in lines.enumerate() {
        let bad = |what: &str| Error::Malformed(format!("label CSV row {}: {what}", n + 1));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [s, g, l] = fields[..] else { return Err(bad("expected three fields")) };
        let key = (s.parse().map_err(|_| bad("bad subject_id"))?, g.parse().map_err(|_| bad("bad segment_index"))?);
        let label: f64 = l.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| bad("bad label"))?;
        if labels.insert(key, label).is_some() {
            return Err(bad("duplicate key"));
        }
    }
    Ok(labels)
}

pub fn labels_csv(labels: &BTreeMap<(u32, u32), f64>) -> String {
    let mut out = String::from("subject_id,segment_index,label\n");
    for ((s, g), l) in labels {
        out.push_str(&format!("{s},{g},{l}\n"));
    }
    out
}

fn check_segments(cfg: &ModelConfig, pairs: &[PairedSegment]) -> Result<()> {
    for p in pairs {
        for m in Modality::BOTH {
            if p.get(m).len() != cfg.segment_len {
                return Err(Error::PlanMismatch(format!(
                    "segment of length {} does not match model length {}",
                    p.get(m).len(),
                    cfg.segment_len
                )));
            }
        }
    }
    Ok(())
}

pub(crate) fn require_modality(params: &ModelParams, m: Modality) -> Result<()> {
    if params.modalities().contains(&m) {
        Ok(())
    } else {
        Err(Error::ModalityMismatch(format!("checkpoint has no {m} encoder")))
    }
}

/// Stacked `b·k × s` patch matrix of one modality.
pub(crate) fn patch_matrix(cfg: &ModelConfig, pairs: &[PairedSegment], m: Modality) -> Result<Array> {
    let data = pairs.iter().flat_map(|p| p.get(m).samples.iter().map(|&v| f64::from(v))).collect();
    Array::matrix(pairs.len() * cfg.k(), cfg.patch_size, data)
}

/// Pools frozen encoder outputs of every pair, in eval mode.
///
/// `Ecg`/`Ppg` encode that modality's full patch sequence. `Paired` encodes
/// both, merges them with the plan drawn at ratio 0.5 and seed 0, and pools
/// the merged bottleneck.
pub fn extract_fingerprints(params: &ModelParams, pairs: &[PairedSegment], source: Source) -> Result<FingerprintSet> {
    let cfg = *params.config();
    check_segments(&cfg, pairs)?;
    match source {
        Source::Ecg => require_modality(params, Modality::Ecg)?,
        Source::Ppg => require_modality(params, Modality::Ppg)?,
        Source::Paired => {
            if !params.is_cross_modal() {
                return Err(Error::ModalityMismatch("paired fingerprints need a cross-modal checkpoint".into()));
            }
        }
    }
    let plan = sample_mask_plan(cfg.k(), PAIRED_RATIO, PAIRED_PLAN_SEED)?;
    let mut rows = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(CHUNK) {
        let b = chunk.len();
        let mut g = Graph::new(Mode::Eval, 0);
        let encode = |g: &mut Graph, m: Modality| -> Result<_> {
            let x = g.constant(patch_matrix(&cfg, chunk, m)?);
            let e = network::embed(g, m, x, b);
            Ok(network::encode(g, &cfg, m, e, b, cfg.k()))
        };
        let z = match source {
            Source::Ecg => encode(&mut g, Modality::Ecg)?,
            Source::Ppg => encode(&mut g, Modality::Ppg)?,
            Source::Paired => {
                let ze = encode(&mut g, Modality::Ecg)?;
                let zp = encode(&mut g, Modality::Ppg)?;
                network::merge(&mut g, ze, zp, &plan, b)
            }
        };
        let pooled = network::pool(&mut g, z, b, cfg.k());
        let values = g.evaluate(pooled, params.bindings())?;
        for (i, p) in chunk.iter().enumerate() {
            rows.push(FingerprintRow {
                subject_id: p.subject_id(),
                segment_index: p.segment_index(),
                source,
                values: values.row(i).to_vec(),
            });
        }
    }
    FingerprintSet::new(cfg.d_enc, rows)
}

/// Shuffles the subjects of `set` with `seed` and keeps
/// `round((1 − test_fraction)·n)` of them for training; the rest are held
/// out.
pub fn probe_train_subjects(set: &FingerprintSet, test_fraction: f64, seed: u64) -> Result<BTreeSet<u32>> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidValue {
            key: "test_fraction".into(),
            reason: format!("{test_fraction} is outside (0, 1)"),
        });
    }
    let mut subjects: Vec<u32> = set.rows().iter().map(|r| r.subject_id).collect::<BTreeSet<_>>().into_iter().collect();
    subjects.shuffle(&mut stream(seed, &[tag::PROBE, tag::SPLIT]));
    let n_train = ((1.0 - test_fraction) * subjects.len() as f64).round() as usize;
    if n_train == 0 || n_train == subjects.len() {
        return Err(Error::TooFewSubjects { subjects: subjects.len(), split: "probe" });
    }
    Ok(subjects[..n_train].iter().copied().collect())
}

/// Held-out evaluation of a probe.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeOutcome {
    pub model: ProbeModel,
    pub train: MetricReport,
    pub test: MetricReport,
    pub train_rows: usize,
    pub test_rows: usize,
}

/// Joins fingerprints to labels by `(subject, segment)`, fits a probe on the
/// rows whose subject is in `train_subjects`, and scores both parts. Rows
/// without a label are skipped.
pub fn evaluate_probe(
    set: &FingerprintSet,
    labels: &BTreeMap<(u32, u32), f64>,
    train_subjects: &BTreeSet<u32>,
    task: Task,
    config: &ProbeConfig,
) -> Result<ProbeOutcome> {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, r) in set.rows().iter().enumerate() {
        if let Some(&l) = labels.get(&(r.subject_id, r.segment_index)) {
            if train_subjects.contains(&r.subject_id) {
                train.push((i, l));
            } else {
                test.push((i, l));
            }
        }
    }
    if test.is_empty() {
        return Err(Error::InvalidInput("no labelled fingerprints outside the training subjects".into()));
    }
    let split = |part: &[(usize, f64)]| -> Result<(Array, Vec<f64>)> {
        let idx: Vec<usize> = part.iter().map(|p| p.0).collect();
        Ok((set.matrix(&idx)?, part.iter().map(|p| p.1).collect()))
    };
    let (x_train, y_train) = split(&train)?;
    let (x_test, y_test) = split(&test)?;
    let model = fit_linear_probe(&x_train, &y_train, task, config)?;
    let score = |x: &Array, y: &[f64]| -> Result<MetricReport> {
        let targets = match task {
            Task::Regression => y.to_vec(),
            Task::Binary | Task::Multiclass => y
                .iter()
                .map(|l| {
                    model.classes.iter().position(|c| c == l).map(|i| i as f64).ok_or_else(|| {
                        Error::InvalidInput(format!("test label {l} does not occur in the training labels"))
                    })
                })
                .collect::<Result<_>>()?,
        };
        compute_metrics(&model.predict(x)?, &targets, task)
    };
    let train_report = score(&x_train, &y_train)?;
    let test_report = score(&x_test, &y_test)?;
    Ok(ProbeOutcome { model, train: train_report, test: test_report, train_rows: train.len(), test_rows: test.len() })
}
