//! Masked reconstruction losses, the four-view InfoNCE objective and the
//! weighted total.
//!
//! The `*_node` builders append the losses to a training graph; the array
//! functions evaluate them standalone on the same graph code.

use crate::error::{Error, Result};
use crate::model::MaskPlan;
use crate::numeric::{dot, Array, Bindings, Graph, Mode, NodeId};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the reconstruction terms.
    pub lambda: f64,
    /// Contrastive temperature.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 0.1, tau: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::NegativeLambda(self.lambda));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidTemperature(self.tau));
        }
        Ok(())
    }
}

/// The four contrastive views, in the order of the stacked similarity matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum View {
    Ecg,
    Ppg,
    EcgAug,
    PpgAug,
}

impl View {
    pub const ALL: [View; 4] = [View::Ecg, View::Ppg, View::EcgAug, View::PpgAug];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Four `B × D` embedding sets and the temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewEmbeddings {
    pub ecg: Array,
    pub ppg: Array,
    pub ecg_aug: Array,
    pub ppg_aug: Array,
    pub tau: f64,
}

impl ViewEmbeddings {
    pub fn get(&self, view: View) -> &Array {
        match view {
            View::Ecg => &self.ecg,
            View::Ppg => &self.ppg,
            View::EcgAug => &self.ecg_aug,
            View::PpgAug => &self.ppg_aug,
        }
    }

    /// Batch size, after checking that all views agree in shape.
    pub fn batch(&self) -> Result<usize> {
        let shape = self.ecg.shape();
        if !self.ecg.is_matrix() || View::ALL.iter().any(|&v| self.get(v).shape() != shape) {
            return Err(Error::InvalidInput("views must share one B×D shape".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidTemperature(self.tau));
        }
        let b = self.ecg.rows();
        if b < 2 {
            return Err(Error::BatchTooSmall(b));
        }
        Ok(b)
    }
}

fn masked_rows_node(
    g: &mut Graph,
    recon: NodeId,
    target: NodeId,
    plan: &MaskPlan,
    set: &[usize],
    samples: usize,
    which: &'static str,
) -> Result<NodeId> {
    if set.is_empty() {
        return Err(Error::EmptyMask(which));
    }
    let diff = g.sub(recon, target);
    let rows = g.gather_rows(diff, plan.batch_indices(set, samples));
    let sq = g.squared_norm(rows);
    Ok(g.scale(sq, 1.0 / (samples * set.len()) as f64))
}

/// Cross-modal reconstruction terms `(ecg, ppg)`, each averaged over the
/// stacked samples: ECG is scored on M, PPG on U.
pub fn recon_cross_nodes(
    g: &mut Graph,
    recon_ecg: NodeId,
    target_ecg: NodeId,
    recon_ppg: NodeId,
    target_ppg: NodeId,
    plan: &MaskPlan,
    samples: usize,
) -> Result<(NodeId, NodeId)> {
    let e = masked_rows_node(g, recon_ecg, target_ecg, plan, plan.masked(), samples, "masked")?;
    let p = masked_rows_node(g, recon_ppg, target_ppg, plan, plan.unmasked(), samples, "unmasked")?;
    Ok((e, p))
}

/// Single-modal reconstruction term, scored on M.
pub fn recon_single_node(
    g: &mut Graph,
    recon: NodeId,
    target: NodeId,
    plan: &MaskPlan,
    samples: usize,
) -> Result<NodeId> {
    masked_rows_node(g, recon, target, plan, plan.masked(), samples, "masked")
}

/// `pos[a][c] = 1` when stacked rows `a ≠ c` belong to the same sample.
pub fn positive_mask(batch: usize) -> Vec<f64> {
    let n = 4 * batch;
    (0..n * n).map(|idx| (idx / n != idx % n && (idx / n) % batch == (idx % n) % batch) as u8 as f64).collect()
}

/// Mean over all `4B` anchors of the anchor InfoNCE loss. `views` are
/// `B × D` nodes in [`View::ALL`] order.
pub fn contrastive_node(g: &mut Graph, views: [NodeId; 4], batch: usize, tau: f64) -> Result<NodeId> {
    if batch < 2 {
        return Err(Error::BatchTooSmall(batch));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidTemperature(tau));
    }
    let n = 4 * batch;
    let log_probs = anchor_log_probs(g, views, batch, tau);
    let mask = g.constant(Array::matrix(n, n, positive_mask(batch)).expect("finite mask"));
    let picked = g.mul(log_probs, mask);
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / (3.0 * n as f64)))
}

/// Row `a` holds `log(exp(s_ac) / Σ_{c' ≠ a} exp(s_ac'))` over the stacked
/// `4B` embeddings, with the diagonal excluded.
fn anchor_log_probs(g: &mut Graph, views: [NodeId; 4], batch: usize, tau: f64) -> NodeId {
    let n = 4 * batch;
    let z = g.concat_rows(&views);
    let zt = g.transpose(z);
    let s = g.matmul(z, zt);
    let s = g.scale(s, 1.0 / tau);
    let diag = (0..n * n).map(|idx| idx / n == idx % n).collect();
    g.log_softmax_rows(s, Some(diag))
}

fn view_constants(g: &mut Graph, views: &ViewEmbeddings) -> [NodeId; 4] {
    View::ALL.map(|v| g.constant(views.get(v).clone()))
}

fn scalar(g: &Graph, node: NodeId) -> Result<f64> {
    Ok(g.evaluate(node, &Bindings::new())?.data()[0])
}

fn patch_check(a: &Array, b: &Array, plan: &MaskPlan) -> Result<()> {
    if !a.is_matrix() || a.shape() != b.shape() || a.rows() != plan.k() {
        return Err(Error::PlanMismatch(format!(
            "patch matrices {:?} and {:?} do not fit a plan over {} patches",
            a.shape(),
            b.shape(),
            plan.k()
        )));
    }
    Ok(())
}

/// Cross-modal reconstruction terms `(ecg on M, ppg on U)` for one sample.
pub fn recon_loss_terms(
    target_ecg: &Array,
    recon_ecg: &Array,
    target_ppg: &Array,
    recon_ppg: &Array,
    plan: &MaskPlan,
) -> Result<(f64, f64)> {
    patch_check(target_ecg, recon_ecg, plan)?;
    patch_check(target_ppg, recon_ppg, plan)?;
    let mut g = Graph::new(Mode::Eval, 0);
    let [te, re, tp, rp] = [target_ecg, recon_ecg, target_ppg, recon_ppg].map(|a| g.constant(a.clone()));
    let (e, p) = recon_cross_nodes(&mut g, re, te, rp, tp, plan, 1)?;
    Ok((scalar(&g, e)?, scalar(&g, p)?))
}

/// `(1/|M|)·Σ_{i∈M} ‖t_e[i] − r_e[i]‖² + (1/|U|)·Σ_{j∈U} ‖t_p[j] − r_p[j]‖²`.
pub fn recon_loss_cross(
    target_ecg: &Array,
    recon_ecg: &Array,
    target_ppg: &Array,
    recon_ppg: &Array,
    plan: &MaskPlan,
) -> Result<f64> {
    let (e, p) = recon_loss_terms(target_ecg, recon_ecg, target_ppg, recon_ppg, plan)?;
    Ok(e + p)
}

/// `(1/|M|)·Σ_{i∈M} ‖target[i] − recon[i]‖²`.
pub fn recon_loss_single(target: &Array, recon: &Array, plan: &MaskPlan) -> Result<f64> {
    patch_check(target, recon, plan)?;
    let mut g = Graph::new(Mode::Eval, 0);
    let t = g.constant(target.clone());
    let r = g.constant(recon.clone());
    let l = recon_single_node(&mut g, r, t, plan, 1)?;
    scalar(&g, l)
}

/// Raw dot product over temperature.
pub fn similarity(z_i: &[f64], z_j: &[f64], tau: f64) -> Result<f64> {
    if z_i.len() != z_j.len() {
        return Err(Error::InvalidInput(format!("lengths {} and {} differ", z_i.len(), z_j.len())));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidTemperature(tau));
    }
    Ok(dot(z_i, z_j) / tau)
}

/// InfoNCE loss of anchor `(i, v)` against its three same-sample positives.
pub fn infonce_anchor(views: &ViewEmbeddings, i: usize, v: View) -> Result<f64> {
    let b = views.batch()?;
    if i >= b {
        return Err(Error::InvalidInput(format!("sample {i} outside batch of {b}")));
    }
    let mut g = Graph::new(Mode::Eval, 0);
    let nodes = view_constants(&mut g, views);
    let lp = anchor_log_probs(&mut g, nodes, b, views.tau);
    let lp = g.evaluate(lp, &Bindings::new())?;
    let row = v.index() * b + i;
    let sum: f64 = View::ALL.iter().filter(|&&u| u != v).map(|u| lp.get(row, u.index() * b + i)).sum();
    Ok(-sum / 3.0)
}

/// Mean of [`infonce_anchor`] over all `4B` anchors.
pub fn contrastive_loss(views: &ViewEmbeddings) -> Result<f64> {
    let b = views.batch()?;
    let mut g = Graph::new(Mode::Eval, 0);
    let nodes = view_constants(&mut g, views);
    let l = contrastive_node(&mut g, nodes, b, views.tau)?;
    scalar(&g, l)
}

/// `contrast + λ·recon`.
pub fn total_loss(contrast: f64, recon: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::NegativeLambda(lambda));
    }
    Ok(contrast + lambda * recon)
}
