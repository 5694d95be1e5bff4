use crate::tensor::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter optimizer memory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Slot {
    /// First moment (Adam) or momentum buffer (SGD).
    pub m: Vec<f64>,
    /// Second moment (Adam only).
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Coupled L2 penalty added to the gradient.
    pub weight_decay: f64,
    slots: Vec<Slot>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, store: &ParamStore) -> Self {
        let slots = store
            .iter()
            .map(|(_, p)| Slot {
                m: vec![0.0; p.value.numel()],
                v: match kind {
                    OptimizerKind::Adam { .. } => vec![0.0; p.value.numel()],
                    OptimizerKind::Sgd { .. } => Vec::new(),
                },
                step: 0,
            })
            .collect();
        OptimizerState {
            kind,
            lr,
            weight_decay,
            slots,
        }
    }

    pub fn slot(&self, id: ParamId) -> &Slot {
        &self.slots[id.index()]
    }

    pub fn slot_mut(&mut self, id: ParamId) -> &mut Slot {
        &mut self.slots[id.index()]
    }

    /// Updates every parameter in `store`; a missing gradient counts as zero.
    pub fn step(&mut self, store: &mut ParamStore) {
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let param = store.get_mut(id);
            let grad = param.grad.as_ref().map(|g| g.data().to_vec());
            let value = param.value.data_mut();
            let slot = &mut self.slots[id.index()];
            slot.step += 1;
            let t = slot.step as i32;
            for i in 0..value.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]) + self.weight_decay * value[i];
                match self.kind {
                    OptimizerKind::Sgd { momentum } => {
                        if momentum > 0.0 {
                            slot.m[i] = momentum * slot.m[i] + g;
                            value[i] -= self.lr * slot.m[i];
                        } else {
                            value[i] -= self.lr * g;
                        }
                    }
                    OptimizerKind::Adam { beta1, beta2, eps } => {
                        slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g;
                        slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g * g;
                        let m_hat = slot.m[i] / (1.0 - beta1.powi(t));
                        let v_hat = slot.v[i] / (1.0 - beta2.powi(t));
                        value[i] -= self.lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}
