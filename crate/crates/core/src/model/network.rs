//! Graph builders for the network. Each function appends nodes to a
//! [`Graph`] and returns the output node; parameters are named leaves.
//!
//! Batches are stacked vertically: `samples` blocks of `rows` rows each.
//! Attention runs per block; everything else runs on the full stack.

use super::{MaskPlan, ModelConfig};
use crate::numeric::{Graph, NodeId, LAYER_NORM_EPS};
use crate::signals::Modality;

fn linear(g: &mut Graph, x: NodeId, prefix: &str) -> NodeId {
    let w = g.input(&format!("{prefix}.w"));
    let b = g.input(&format!("{prefix}.b"));
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

fn norm(g: &mut Graph, x: NodeId, prefix: &str) -> NodeId {
    let gamma = g.input(&format!("{prefix}.gamma"));
    let beta = g.input(&format!("{prefix}.beta"));
    g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
}

fn dropout(g: &mut Graph, x: NodeId, rate: f64) -> NodeId {
    if rate > 0.0 {
        g.dropout(x, rate)
    } else {
        x
    }
}

/// Repeats a table once per stacked sample.
fn tile(g: &mut Graph, table: NodeId, samples: usize) -> NodeId {
    if samples == 1 {
        table
    } else {
        g.concat_rows(&vec![table; samples])
    }
}

fn block_rows(g: &mut Graph, x: NodeId, b: usize, rows: usize, samples: usize) -> NodeId {
    if samples == 1 {
        x
    } else {
        g.gather_rows(x, (b * rows..(b + 1) * rows).collect())
    }
}

/// Multi-head self-attention within each stacked block. The output
/// projection is applied per head as `Σ_h O_h · W_o[h rows]`.
fn attention(
    g: &mut Graph,
    x: NodeId,
    prefix: &str,
    width: usize,
    heads: usize,
    samples: usize,
    rows: usize,
    rate: f64,
) -> NodeId {
    let dh = width / heads;
    let q = linear(g, x, &format!("{prefix}.q"));
    let k = linear(g, x, &format!("{prefix}.k"));
    let v = linear(g, x, &format!("{prefix}.v"));
    let wo = g.input(&format!("{prefix}.o.w"));
    let bo = g.input(&format!("{prefix}.o.b"));
    let scale = 1.0 / (dh as f64).sqrt();
    let mut acc = None;
    for h in 0..heads {
        let cols = |g: &mut Graph, a| if heads == 1 { a } else { g.slice_cols(a, h * dh, (h + 1) * dh) };
        let (qh, kh, vh) = (cols(g, q), cols(g, k), cols(g, v));
        let mut outs = Vec::with_capacity(samples);
        for b in 0..samples {
            let qb = block_rows(g, qh, b, rows, samples);
            let kb = block_rows(g, kh, b, rows, samples);
            let vb = block_rows(g, vh, b, rows, samples);
            let kt = g.transpose(kb);
            let scores = g.matmul(qb, kt);
            let scores = g.scale(scores, scale);
            let probs = g.softmax_rows(scores);
            let probs = dropout(g, probs, rate);
            outs.push(g.matmul(probs, vb));
        }
        let oh = if samples == 1 { outs[0] } else { g.concat_rows(&outs) };
        let wo_h = if heads == 1 { wo } else { g.gather_rows(wo, (h * dh..(h + 1) * dh).collect()) };
        let proj = g.matmul(oh, wo_h);
        acc = Some(match acc {
            None => proj,
            Some(a) => g.add(a, proj),
        });
    }
    g.add_row(acc.expect("at least one head"), bo)
}

/// Pre-norm transformer block: attention then feed-forward, each residual.
fn block(
    g: &mut Graph,
    cfg: &ModelConfig,
    x: NodeId,
    prefix: &str,
    width: usize,
    samples: usize,
    rows: usize,
) -> NodeId {
    let h = norm(g, x, &format!("{prefix}.ln1"));
    let a = attention(g, h, &format!("{prefix}.attn"), width, cfg.heads, samples, rows, cfg.dropout);
    let x = g.add(x, a);
    let h = norm(g, x, &format!("{prefix}.ln2"));
    let f = linear(g, h, &format!("{prefix}.ffn.fc1"));
    let f = g.gelu(f);
    let f = dropout(g, f, cfg.dropout);
    let f = linear(g, f, &format!("{prefix}.ffn.fc2"));
    g.add(x, f)
}

/// `samples·k × s` patches → `samples·k × d_enc` embeddings with positions.
pub fn embed(g: &mut Graph, m: Modality, patches: NodeId, samples: usize) -> NodeId {
    let p = m.prefix();
    let x = norm(g, patches, &format!("{p}.patch_norm"));
    let x = linear(g, x, &format!("{p}.patch_proj"));
    let pos = g.input(&format!("{p}.enc.pos"));
    let pos = tile(g, pos, samples);
    g.add(x, pos)
}

/// Encoder blocks, final norm and bottleneck head over `samples` blocks of
/// `rows` rows.
pub fn encode(g: &mut Graph, cfg: &ModelConfig, m: Modality, e_i: NodeId, samples: usize, rows: usize) -> NodeId {
    let p = m.prefix();
    let mut x = e_i;
    for i in 0..cfg.enc_depth {
        x = block(g, cfg, x, &format!("{p}.enc.block{i}"), cfg.d_enc, samples, rows);
    }
    let x = norm(g, x, &format!("{p}.enc.norm"));
    linear(g, x, &format!("{p}.enc.head"))
}

/// Takes U rows from `z_ecg` and M rows from `z_ppg`, per stacked sample.
pub fn merge(g: &mut Graph, z_ecg: NodeId, z_ppg: NodeId, plan: &MaskPlan, samples: usize) -> NodeId {
    let n = samples * plan.k();
    let u = plan.batch_indices(plan.unmasked(), samples);
    let m = plan.batch_indices(plan.masked(), samples);
    let parts: Vec<NodeId> = [(z_ecg, u), (z_ppg, m)]
        .into_iter()
        .filter(|(_, idx)| !idx.is_empty())
        .map(|(z, idx)| {
            let rows = g.gather_rows(z, idx.clone());
            g.scatter_rows(rows, idx, n)
        })
        .collect();
    match parts[..] {
        [one] => one,
        [a, b] => g.add(a, b),
        _ => unreachable!("a plan covers at least one row"),
    }
}

/// Decodes to `samples·k × s` patches. With `masked = Some(plan)` the input
/// holds only the U rows of each sample and M rows are filled with the mask
/// token; otherwise the input is a full `samples·k × d_enc` bottleneck.
pub fn decode(
    g: &mut Graph,
    cfg: &ModelConfig,
    m: Modality,
    z: NodeId,
    samples: usize,
    masked: Option<&MaskPlan>,
) -> NodeId {
    let p = m.prefix();
    let k = cfg.k();
    let mut x = linear(g, z, &format!("{p}.dec.proj"));
    if let Some(plan) = masked {
        let n = samples * k;
        let u = plan.batch_indices(plan.unmasked(), samples);
        let mi = plan.batch_indices(plan.masked(), samples);
        let visible = g.scatter_rows(x, u, n);
        let token = g.input(&format!("{p}.dec.mask_token"));
        let tokens = g.gather_rows(token, vec![0; mi.len()]);
        let tokens = g.scatter_rows(tokens, mi, n);
        x = g.add(visible, tokens);
    }
    let pos = g.input(&format!("{p}.dec.pos"));
    let pos = tile(g, pos, samples);
    x = g.add(x, pos);
    for i in 0..cfg.dec_depth {
        x = block(g, cfg, x, &format!("{p}.dec.block{i}"), cfg.dec_width, samples, k);
    }
    let x = norm(g, x, &format!("{p}.dec.norm"));
    linear(g, x, &format!("{p}.dec.head"))
}

/// Per-sample column means of `samples` stacked blocks, as `samples × cols`.
pub fn pool(g: &mut Graph, z: NodeId, samples: usize, rows: usize) -> NodeId {
    use crate::numeric::Axis;
    let pooled: Vec<NodeId> = (0..samples)
        .map(|b| {
            let blk = block_rows(g, z, b, rows, samples);
            g.mean_axis(blk, Axis::Rows)
        })
        .collect();
    if samples == 1 {
        pooled[0]
    } else {
        g.concat_rows(&pooled)
    }
}

/// Nodes of a single-modal forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SingleModalNodes {
    /// Encoder output over U rows, `samples·|U| × d_enc`.
    pub z: NodeId,
    pub reconstruction: NodeId,
}

pub fn single_modal(
    g: &mut Graph,
    cfg: &ModelConfig,
    m: Modality,
    patches: NodeId,
    plan: &MaskPlan,
    samples: usize,
) -> SingleModalNodes {
    let e = embed(g, m, patches, samples);
    let visible = g.gather_rows(e, plan.batch_indices(plan.unmasked(), samples));
    let z = encode(g, cfg, m, visible, samples, plan.unmasked().len());
    let reconstruction = decode(g, cfg, m, z, samples, Some(plan));
    SingleModalNodes { z, reconstruction }
}

/// Nodes of a cross-modal forward pass.
#[derive(Clone, Copy, Debug)]
pub struct CrossModalNodes {
    pub z_ecg: NodeId,
    pub z_ppg: NodeId,
    pub z_c: NodeId,
    pub recon_ecg: NodeId,
    pub recon_ppg: NodeId,
}

/// Encodes both modalities over all rows, merges per `plan` and decodes
/// both. The patch inputs stack `samples + extra` blocks; the first
/// `samples` are merged and decoded, while the `extra` blocks (augmented
/// views) are only encoded. `z_ecg`/`z_ppg` cover all blocks.
pub fn cross_modal(
    g: &mut Graph,
    cfg: &ModelConfig,
    ecg_patches: NodeId,
    ppg_patches: NodeId,
    plan: &MaskPlan,
    samples: usize,
    extra: usize,
) -> CrossModalNodes {
    let k = cfg.k();
    let total = samples + extra;
    let e = embed(g, Modality::Ecg, ecg_patches, total);
    let z_ecg = encode(g, cfg, Modality::Ecg, e, total, k);
    let e = embed(g, Modality::Ppg, ppg_patches, total);
    let z_ppg = encode(g, cfg, Modality::Ppg, e, total, k);
    let z_c = merge(g, z_ecg, z_ppg, plan, samples);
    let recon_ecg = decode(g, cfg, Modality::Ecg, z_c, samples, None);
    let recon_ppg = decode(g, cfg, Modality::Ppg, z_c, samples, None);
    CrossModalNodes { z_ecg, z_ppg, z_c, recon_ecg, recon_ppg }
}
