use crate::error::{Result, StumError};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// A value in (0, 1) parameterized as `sigmoid(logit)`.
///
/// A forced gate evaluates to a fixed constant and passes no gradient to
/// its logit; this reaches the closed limits 0 and 1 exactly.
#[derive(Clone, Debug)]
pub struct Gate {
    logit: ParamId,
    forced: Option<f64>,
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Gate {
    pub fn new(
        store: &mut ParamStore,
        name: impl Into<String>,
        shape: &[usize],
        init: f64,
        group: ParamGroup,
    ) -> Result<Self> {
        if !(init > 0.0 && init < 1.0) {
            return Err(StumError::Config(format!("gate init must lie in (0, 1), got {init}")));
        }
        let logit = store.add_grouped(name, Tensor::full(shape, logit(init)), true, group);
        Ok(Gate { logit, forced: None })
    }

    pub fn logit_param(&self) -> ParamId {
        self.logit
    }

    pub fn force(&mut self, value: Option<f64>) {
        self.forced = value;
    }

    pub fn forced(&self) -> Option<f64> {
        self.forced
    }

    pub fn value(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        match self.forced {
            Some(v) => {
                let shape = store.value(self.logit).shape().to_vec();
                Ok(tape.constant(Tensor::full(&shape, v)))
            }
            None => {
                let raw = tape.param(store, self.logit);
                tape.sigmoid(raw)
            }
        }
    }

    /// Current gate values without recording anything.
    pub fn current(&self, store: &ParamStore) -> Tensor {
        match self.forced {
            Some(v) => Tensor::full(store.value(self.logit).shape(), v),
            None => store.value(self.logit).map(crate::tensor::sigmoid),
        }
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        store.value(self.logit).len()
    }
}
