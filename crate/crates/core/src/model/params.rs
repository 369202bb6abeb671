use std::collections::BTreeSet;

use rand_distr::{Distribution, Normal, Uniform};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numeric::{Array, Bindings};
use crate::rng::{stream, tag};
use crate::signals::Modality;

#[derive(Clone, Copy, Debug)]
enum Init {
    Zeros,
    Ones,
    Xavier,
    Sinusoidal,
    Token,
}

struct Spec {
    name: String,
    shape: [usize; 2],
    init: Init,
}

fn push_linear(specs: &mut Vec<Spec>, prefix: &str, fan_in: usize, fan_out: usize) {
    specs.push(Spec { name: format!("{prefix}.w"), shape: [fan_in, fan_out], init: Init::Xavier });
    specs.push(Spec { name: format!("{prefix}.b"), shape: [1, fan_out], init: Init::Zeros });
}

fn push_norm(specs: &mut Vec<Spec>, prefix: &str, width: usize) {
    specs.push(Spec { name: format!("{prefix}.gamma"), shape: [1, width], init: Init::Ones });
    specs.push(Spec { name: format!("{prefix}.beta"), shape: [1, width], init: Init::Zeros });
}

fn push_block(specs: &mut Vec<Spec>, prefix: &str, width: usize, ffn_mult: usize) {
    push_norm(specs, &format!("{prefix}.ln1"), width);
    for part in ["q", "k", "v", "o"] {
        push_linear(specs, &format!("{prefix}.attn.{part}"), width, width);
    }
    push_norm(specs, &format!("{prefix}.ln2"), width);
    push_linear(specs, &format!("{prefix}.ffn.fc1"), width, ffn_mult * width);
    push_linear(specs, &format!("{prefix}.ffn.fc2"), ffn_mult * width, width);
}

fn modality_specs(cfg: &ModelConfig, m: Modality, mask_token: bool) -> Vec<Spec> {
    let p = m.prefix();
    let (k, s, d, w) = (cfg.k(), cfg.patch_size, cfg.d_enc, cfg.dec_width);
    let mut specs = Vec::new();
    push_norm(&mut specs, &format!("{p}.patch_norm"), s);
    push_linear(&mut specs, &format!("{p}.patch_proj"), s, d);
    specs.push(Spec { name: format!("{p}.enc.pos"), shape: [k, d], init: Init::Sinusoidal });
    for i in 0..cfg.enc_depth {
        push_block(&mut specs, &format!("{p}.enc.block{i}"), d, cfg.ffn_mult);
    }
    push_norm(&mut specs, &format!("{p}.enc.norm"), d);
    push_linear(&mut specs, &format!("{p}.enc.head"), d, d);
    push_linear(&mut specs, &format!("{p}.dec.proj"), d, w);
    specs.push(Spec { name: format!("{p}.dec.pos"), shape: [k, w], init: Init::Sinusoidal });
    if mask_token {
        specs.push(Spec { name: format!("{p}.dec.mask_token"), shape: [1, w], init: Init::Token });
    }
    for i in 0..cfg.dec_depth {
        push_block(&mut specs, &format!("{p}.dec.block{i}"), w, cfg.ffn_mult);
    }
    push_norm(&mut specs, &format!("{p}.dec.norm"), w);
    push_linear(&mut specs, &format!("{p}.dec.head"), w, s);
    specs
}

/// Fixed sinusoidal table: `sin(pos / 10000^(2i/d))` in even columns and the
/// matching cosine in odd columns.
pub fn sinusoidal_table(rows: usize, cols: usize) -> Array {
    let mut data = Vec::with_capacity(rows * cols);
    for pos in 0..rows {
        for c in 0..cols {
            let pair = (c / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / cols as f64);
            data.push(if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Array::matrix(rows, cols, data).expect("finite table")
}

fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

fn initialize(spec: &Spec, seed: u64) -> Array {
    let [r, c] = spec.shape;
    let mut rng = stream(seed, &[tag::INIT, name_hash(&spec.name)]);
    match spec.init {
        Init::Zeros => Array::zeros(&[r, c]),
        Init::Ones => Array::full(&[r, c], 1.0),
        Init::Sinusoidal => sinusoidal_table(r, c),
        Init::Xavier => {
            let a = (6.0 / (r + c) as f64).sqrt();
            let dist = Uniform::new_inclusive(-a, a).expect("valid bound");
            Array::matrix(r, c, (0..r * c).map(|_| dist.sample(&mut rng)).collect()).expect("finite")
        }
        Init::Token => {
            let dist = Normal::new(0.0, 0.02).expect("valid std");
            Array::matrix(r, c, (0..r * c).map(|_| dist.sample(&mut rng)).collect()).expect("finite")
        }
    }
}

/// Every learnable array of a model, keyed by name.
///
/// A cross-modal model holds both modalities and no mask tokens, since every
/// bottleneck row is populated by one encoder or the other. A single-modal
/// model holds one modality plus its decoder mask token.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    values: Bindings,
}

impl ModelParams {
    pub fn init_cross_modal(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut values = Bindings::new();
        for m in Modality::BOTH {
            for spec in modality_specs(&config, m, false) {
                values.insert(spec.name.clone(), initialize(&spec, seed));
            }
        }
        Ok(Self { config, values })
    }

    pub fn init_single_modal(config: ModelConfig, modality: Modality, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut values = Bindings::new();
        for spec in modality_specs(&config, modality, true) {
            values.insert(spec.name.clone(), initialize(&spec, seed));
        }
        Ok(Self { config, values })
    }

    /// Rebuilds a parameter set, checking that names and shapes form a
    /// complete model for `config`.
    pub fn from_bindings(config: ModelConfig, values: Bindings) -> Result<Self> {
        config.validate()?;
        let params = Self { config, values };
        let modalities = params.modalities();
        if modalities.is_empty() {
            return Err(Error::MissingParameter("ecg.* or ppg.*".into()));
        }
        let mut expected = BTreeSet::new();
        for m in modalities {
            let token = params.values.contains(&format!("{}.dec.mask_token", m.prefix()));
            for spec in modality_specs(&config, m, token) {
                let found = params.values.get(&spec.name).ok_or_else(|| Error::MissingParameter(spec.name.clone()))?;
                if found.shape() != spec.shape {
                    return Err(Error::ParameterShape {
                        name: spec.name,
                        expected: spec.shape.to_vec(),
                        found: found.shape().to_vec(),
                    });
                }
                expected.insert(spec.name);
            }
        }
        if let Some(extra) = params.values.names().find(|n| !expected.contains(*n)) {
            return Err(Error::Malformed(format!("unexpected parameter `{extra}`")));
        }
        Ok(params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn bindings(&self) -> &Bindings {
        &self.values
    }

    pub(crate) fn bindings_mut(&mut self) -> &mut Bindings {
        &mut self.values
    }

    pub fn into_bindings(self) -> Bindings {
        self.values
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.values.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.names()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.values.iter()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(|(_, a)| a.len()).sum()
    }

    pub fn modalities(&self) -> Vec<Modality> {
        Modality::BOTH.into_iter().filter(|m| self.values.contains(&format!("{}.patch_proj.w", m.prefix()))).collect()
    }

    pub fn is_cross_modal(&self) -> bool {
        self.modalities().len() == 2
    }

    /// Names of one modality's parameters.
    pub fn names_with_prefix(&self, modality: Modality) -> Vec<String> {
        let prefix = format!("{}.", modality.prefix());
        self.values.names().filter(|n| n.starts_with(&prefix)).map(str::to_string).collect()
    }

    /// Replaces one array, keeping its shape.
    pub fn set(&mut self, name: &str, value: Array) -> Result<()> {
        let slot = self.values.get_mut(name).ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::ParameterShape {
                name: name.to_string(),
                expected: slot.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    /// FNV-1a digest over names and value bits, for detecting writes.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, a) in self.values.iter() {
            feed(name.as_bytes());
            for v in a.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}
