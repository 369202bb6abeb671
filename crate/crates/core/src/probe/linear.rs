//! Linear and logistic probes fitted by full-batch gradient descent.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numeric::{Array, Bindings, Graph, Mode, NodeId};
use crate::rng::{stream, tag};

use super::Task;

/// Optimizer settings of [`fit_linear_probe`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    /// Penalty `l2/2 · ‖W‖²` on the weights (not the bias).
    pub l2: f64,
    pub max_iter: usize,
    /// Stop once the gradient norm falls below this.
    pub grad_tol: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { l2: 1e-3, max_iter: 10_000, grad_tol: 1e-6, seed: 0 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::InvalidValue {
                key: "l2".into(),
                reason: format!("{} is not a finite non-negative value", self.l2),
            });
        }
        if self.max_iter == 0 || !(self.grad_tol > 0.0) {
            return Err(Error::InvalidInput("probe needs a positive iteration budget and tolerance".into()));
        }
        Ok(())
    }
}

/// A fitted probe over standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeModel {
    pub task: Task,
    /// `D × c`: one column for binary and regression, one per class for
    /// multiclass.
    pub weights: Array,
    pub bias: Vec<f64>,
    /// Feature means and scales used for standardization.
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Label value of each class index, ascending; empty for regression.
    pub classes: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl ProbeModel {
    /// Binary: `n × 1` positive-class probabilities. Multiclass: `n × C`
    /// class probabilities. Regression: `n × 1` predicted values.
    pub fn predict(&self, features: &Array) -> Result<Array> {
        let x = standardize(features, &self.mean, &self.scale)?;
        let mut g = Graph::new(Mode::Eval, 0);
        let x = g.constant(x);
        let out = match self.task {
            Task::Regression => affine(&mut g, x, Task::Regression),
            Task::Binary | Task::Multiclass => {
                let logits = affine(&mut g, x, self.task);
                let log_p = g.log_softmax_rows(logits, None);
                g.exp(log_p)
            }
        };
        let probs = g.evaluate(out, &self.bindings())?;
        if self.task == Task::Binary {
            let positive = (0..probs.rows()).map(|i| probs.get(i, 1)).collect();
            return Array::matrix(probs.rows(), 1, positive);
        }
        Ok(probs)
    }

    /// Class index of each row for classification probes; labels map back
    /// through [`ProbeModel::classes`].
    pub fn classify(&self, features: &Array) -> Result<Vec<usize>> {
        let p = self.predict(features)?;
        match self.task {
            Task::Regression => Err(Error::InvalidInput("regression probes do not classify".into())),
            Task::Binary => Ok(p.data().iter().map(|&s| usize::from(s >= 0.5)).collect()),
            Task::Multiclass => Ok((0..p.rows())
                .map(|i| {
                    let row = p.row(i);
                    (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
                })
                .collect()),
        }
    }

    fn bindings(&self) -> Bindings {
        Bindings::new()
            .with("w", self.weights.clone())
            .with("b", Array::row_vector(self.bias.clone()).expect("finite bias"))
    }
}

/// `x·W + b`. Binary logits are `[0, x·w + b]`, so the softmax of that row is
/// the logistic model.
fn affine(g: &mut Graph, x: NodeId, task: Task) -> NodeId {
    let w = g.input("w");
    let b = g.input("b");
    let z = g.matmul(x, w);
    let z = g.add_row(z, b);
    if task == Task::Binary {
        let lift = g.constant(Array::row_vector(vec![0.0, 1.0]).expect("finite"));
        g.matmul(z, lift)
    } else {
        z
    }
}

fn standardize(features: &Array, mean: &[f64], scale: &[f64]) -> Result<Array> {
    if !features.is_matrix() || features.cols() != mean.len() {
        return Err(Error::InvalidInput(format!(
            "features of shape {:?} do not match a probe over {} dimensions",
            features.shape(),
            mean.len()
        )));
    }
    let d = mean.len();
    let data = features.data().iter().enumerate().map(|(i, v)| (v - mean[i % d]) / scale[i % d]).collect();
    Array::matrix(features.rows(), d, data)
}

fn feature_stats(features: &Array) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (features.rows() as f64, features.cols());
    let mut mean = vec![0.0; d];
    for i in 0..features.rows() {
        mean.iter_mut().zip(features.row(i)).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; d];
    for i in 0..features.rows() {
        for (j, v) in features.row(i).iter().enumerate() {
            var[j] += (v - mean[j]).powi(2) / n;
        }
    }
    let scale = var.into_iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    (mean, scale)
}

/// Maps label values to class indices over the sorted distinct values.
fn encode_classes(labels: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut classes: Vec<f64> = labels.to_vec();
    classes.sort_by(f64::total_cmp);
    classes.dedup();
    let idx = labels.iter().map(|l| classes.iter().position(|c| c == l).expect("listed value")).collect();
    (classes, idx)
}

/// Fits a probe on `features` (`n × D`) by gradient descent with Armijo
/// backtracking until the gradient norm drops below `grad_tol` or
/// `max_iter` iterations pass.
///
/// Classification minimizes the mean cross-entropy of a softmax (binary:
/// logistic) model, regression the mean of `½(ŷ − y)²`, each plus
/// `l2/2 · ‖W‖²`. Features are standardized with training statistics. Binary
/// needs exactly two distinct label values, the larger one being positive.
pub fn fit_linear_probe(features: &Array, labels: &[f64], task: Task, config: &ProbeConfig) -> Result<ProbeModel> {
    config.validate()?;
    if !features.is_matrix() || features.rows() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "features of shape {:?} do not match {} labels",
            features.shape(),
            labels.len()
        )));
    }
    if labels.len() < 3 {
        return Err(Error::InvalidInput(format!("a probe needs at least 3 samples, got {}", labels.len())));
    }
    if !features.all_finite() || labels.iter().any(|l| !l.is_finite()) {
        return Err(Error::InvalidInput("features and labels must be finite".into()));
    }
    let (n, d) = (features.rows(), features.cols());
    let (classes, targets, cols) = match task {
        Task::Regression => (Vec::new(), Array::matrix(n, 1, labels.to_vec())?, 1),
        Task::Binary | Task::Multiclass => {
            let (classes, idx) = encode_classes(labels);
            if classes.len() < 2 {
                return Err(Error::SingleClass);
            }
            if task == Task::Binary && classes.len() != 2 {
                return Err(Error::InvalidInput(format!("binary task got {} distinct labels", classes.len())));
            }
            let c = classes.len();
            let mut onehot = vec![0.0; n * c];
            idx.iter().enumerate().for_each(|(i, &k)| onehot[i * c + k] = 1.0);
            let cols = if task == Task::Binary { 1 } else { c };
            (classes, Array::matrix(n, c, onehot)?, cols)
        }
    };
    let (mean, scale) = feature_stats(features);
    let x = standardize(features, &mean, &scale)?;

    let mut g = Graph::new(Mode::Eval, 0);
    let xn = g.constant(x);
    let y = g.constant(targets);
    let out = affine(&mut g, xn, task);
    let data = match task {
        Task::Regression => {
            let r = g.sub(out, y);
            let sq = g.squared_norm(r);
            g.scale(sq, 0.5 / n as f64)
        }
        Task::Binary | Task::Multiclass => {
            let log_p = g.log_softmax_rows(out, None);
            let picked = g.mul(log_p, y);
            let s = g.sum(picked);
            g.scale(s, -1.0 / n as f64)
        }
    };
    let w = g.input("w");
    let wn = g.squared_norm(w);
    let penalty = g.scale(wn, config.l2 / 2.0);
    let loss = g.add(data, penalty);

    let normal = Normal::new(0.0, 0.01).expect("valid normal");
    let mut rng = stream(config.seed, &[tag::PROBE]);
    let init: Vec<f64> = (0..d * cols).map(|_| normal.sample(&mut rng)).collect();
    let mut params = Bindings::new().with("w", Array::matrix(d, cols, init)?).with("b", Array::zeros(&[1, cols]));

    let (mut step, mut iterations, mut grad_norm) = (1.0, 0, f64::INFINITY);
    let mut eval = g.forward(loss, &params)?;
    let mut f = eval.root_value().data()[0];
    while iterations < config.max_iter {
        let grads = eval.backward(&["w", "b"])?;
        let gsq: f64 = grads.values().flat_map(|a| a.data()).map(|v| v * v).sum();
        grad_norm = gsq.sqrt();
        if grad_norm < config.grad_tol {
            break;
        }
        iterations += 1;
        step *= 2.0;
        let accepted = loop {
            let trial = descend(&params, &grads, step)?;
            let ft = g.evaluate(loss, &trial)?.data()[0];
            if ft <= f - 1e-4 * step * gsq {
                break Some((trial, ft));
            }
            step *= 0.5;
            if step < 1e-20 {
                break None;
            }
        };
        let Some((trial, ft)) = accepted else { break };
        drop(eval);
        params = trial;
        f = ft;
        eval = g.forward(loss, &params)?;
    }
    drop(eval);
    let weights = params.remove("w").expect("bound");
    if !weights.all_finite() {
        return Err(Error::NonFinite { node: "probe weights".into() });
    }
    let bias = params.remove("b").expect("bound").into_data();
    Ok(ProbeModel { task, weights, bias, mean, scale, classes, iterations, grad_norm })
}

fn descend(params: &Bindings, grads: &std::collections::BTreeMap<String, Array>, step: f64) -> Result<Bindings> {
    let mut out = params.clone();
    for (name, value) in out.iter_mut() {
        let g = &grads[name];
        let data = value.data().iter().zip(g.data()).map(|(p, d)| p - step * d).collect();
        *value = Array::new(value.shape().to_vec(), data)?;
    }
    Ok(out)
}
