use crate::error::{Error, Result};
use crate::numeric::{Array, Bindings};

/// Reduce-on-plateau learning-rate state. Improvement means strictly lower
/// than the best loss seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct SchedulerState {
    pub best: Option<f64>,
    pub epochs_since_improvement: usize,
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
}

impl SchedulerState {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self { best: None, epochs_since_improvement: 0, lr, factor, patience }
    }

    /// Records one validation loss. After `patience` consecutive epochs
    /// without improvement the rate is multiplied by `factor` and the
    /// counter resets.
    pub fn step(&mut self, validation_loss: f64) {
        if self.best.is_none_or(|b| validation_loss < b) {
            self.best = Some(validation_loss);
            self.epochs_since_improvement = 0;
            return;
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement >= self.patience {
            self.lr *= self.factor;
            self.epochs_since_improvement = 0;
        }
    }

    pub(crate) fn export(&self, out: &mut Bindings) {
        let s = |v: f64| Array::scalar(v).expect("finite");
        if let Some(b) = self.best {
            out.insert("state.sched.best", s(b));
        }
        out.insert("state.sched.counter", s(self.epochs_since_improvement as f64));
        out.insert("state.sched.lr", s(self.lr));
    }

    pub(crate) fn import(state: &Bindings, factor: f64, patience: usize) -> Result<Self> {
        let get = |name: &str| state.get(name).and_then(Array::scalar_value);
        let lr = get("state.sched.lr").ok_or_else(|| Error::MissingParameter("state.sched.lr".into()))?;
        let counter =
            get("state.sched.counter").ok_or_else(|| Error::MissingParameter("state.sched.counter".into()))?;
        Ok(Self { best: get("state.sched.best"), epochs_since_improvement: counter as usize, lr, factor, patience })
    }
}

/// Free-function form of [`SchedulerState::step`].
pub fn scheduler_step(state: &SchedulerState, validation_loss: f64) -> SchedulerState {
    let mut next = state.clone();
    next.step(validation_loss);
    next
}

/// True when none of the last `patience` losses improves strictly on the
/// best loss before them. A plateau of exactly `patience` epochs stops.
pub fn early_stop_check(history: &[f64], patience: usize) -> bool {
    if patience == 0 || history.len() <= patience {
        return false;
    }
    let (earlier, recent) = history.split_at(history.len() - patience);
    let best_before = earlier.iter().cloned().fold(f64::INFINITY, f64::min);
    recent.iter().all(|&v| v >= best_before)
}
