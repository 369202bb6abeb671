use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numeric::{Array, Bindings};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment accumulators for the parameters being trained.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Bindings,
    v: Bindings,
    step: u64,
}

impl AdamState {
    /// Zeroed moments for `names`, shaped like the matching parameters.
    pub fn new<'a>(params: &ModelParams, names: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let (mut m, mut v) = (Bindings::new(), Bindings::new());
        for name in names {
            let p = params.get(name).ok_or_else(|| Error::MissingParameter(name.to_string()))?;
            m.insert(name, Array::zeros(p.shape()));
            v.insert(name, Array::zeros(p.shape()));
        }
        Ok(Self { m, v, step: 0 })
    }

    pub fn for_all(params: &ModelParams) -> Self {
        Self::new(params, params.names().collect::<Vec<_>>()).expect("names come from params")
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Names of the parameters this state updates.
    pub fn names(&self) -> Vec<&str> {
        self.m.names().collect()
    }

    /// One bias-corrected update of every managed parameter.
    pub fn update(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Array>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - ADAM_BETA1.powf(t);
        let c2 = 1.0 - ADAM_BETA2.powf(t);
        let names: Vec<String> = self.m.names().map(str::to_string).collect();
        for name in names {
            let g = grads.get(&name).ok_or_else(|| Error::MissingParameter(format!("gradient of {name}")))?;
            let m = self.m.get_mut(&name).expect("managed name");
            let v = self.v.get_mut(&name).expect("managed name");
            let p = params.bindings_mut().get_mut(&name).ok_or_else(|| Error::MissingParameter(name.clone()))?;
            if g.shape() != p.shape() {
                return Err(Error::ParameterShape { name, expected: p.shape().to_vec(), found: g.shape().to_vec() });
            }
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.data_mut());
            for (((mi, vi), pi), gi) in md.iter_mut().zip(vd.iter_mut()).zip(pd.iter_mut()).zip(g.data()) {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }

    /// Serializes into `optim.*` checkpoint blocks.
    pub(crate) fn export(&self, out: &mut Bindings) {
        for (name, a) in self.m.iter() {
            out.insert(format!("optim.m.{name}"), a.clone());
        }
        for (name, a) in self.v.iter() {
            out.insert(format!("optim.v.{name}"), a.clone());
        }
        out.insert("optim.step", Array::scalar(self.step as f64).expect("finite"));
    }

    pub(crate) fn import(state: &Bindings) -> Result<Self> {
        let (mut m, mut v) = (Bindings::new(), Bindings::new());
        for (name, a) in state.iter() {
            if let Some(p) = name.strip_prefix("optim.m.") {
                m.insert(p, a.clone());
            } else if let Some(p) = name.strip_prefix("optim.v.") {
                v.insert(p, a.clone());
            }
        }
        let step = state
            .get("optim.step")
            .and_then(Array::scalar_value)
            .ok_or_else(|| Error::MissingParameter("optim.step".into()))?;
        if m.names().ne(v.names()) {
            return Err(Error::Malformed("optimizer moments do not pair up".into()));
        }
        Ok(Self { m, v, step: step as u64 })
    }
}
