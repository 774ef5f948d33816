//! Adam with bias correction and the elementwise gradient clamp to [-1, 1]
//! applied before the moment updates.

use super::tape::{AdError, AdResult, Tensor};

#[derive(Debug, Clone)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam state for one parameter group, aligned positionally with the group's
/// parameter enumeration order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    slots: Vec<Slot>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            slots: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over a parameter group. `grads[i]` must be present and
    /// match `params[i]` elementwise; gradients are clamped to [-1, 1] first.
    pub fn step(
        &mut self,
        params: &mut [(&str, &mut Tensor)],
        grads: &[Option<&[f64]>],
    ) -> AdResult<()> {
        assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|(_, p)| Slot {
                    m: vec![0.0; p.numel()],
                    v: vec![0.0; p.numel()],
                })
                .collect();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((name, p), (g, slot)) in params
            .iter_mut()
            .zip(grads.iter().zip(self.slots.iter_mut()))
        {
            let g = g.ok_or_else(|| AdError::MissingGrad {
                name: name.to_string(),
            })?;
            debug_assert_eq!(g.len(), p.numel(), "grad size mismatch for {name}");
            let data = p.data_mut();
            for i in 0..data.len() {
                let gi = g[i].clamp(-1.0, 1.0);
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * gi;
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Moment buffers as named tensors for checkpointing.
    pub fn export_state(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.slots.len());
        for (i, s) in self.slots.iter().enumerate() {
            out.push((
                format!("{prefix}.m{i}"),
                Tensor::new(s.m.clone(), vec![s.m.len()]),
            ));
            out.push((
                format!("{prefix}.v{i}"),
                Tensor::new(s.v.clone(), vec![s.v.len()]),
            ));
        }
        out
    }

    /// Restore moment buffers saved by [`Adam::export_state`].
    pub fn import_state(&mut self, prefix: &str, tensors: &[(String, Tensor)], step: u64) {
        self.step = step;
        self.slots.clear();
        let mut i = 0;
        loop {
            let mk = format!("{prefix}.m{i}");
            let vk = format!("{prefix}.v{i}");
            let m = tensors.iter().find(|(n, _)| *n == mk);
            let v = tensors.iter().find(|(n, _)| *n == vk);
            match (m, v) {
                (Some((_, m)), Some((_, v))) => {
                    self.slots.push(Slot {
                        m: m.data().to_vec(),
                        v: v.data().to_vec(),
                    });
                    i += 1;
                }
                _ => break,
            }
        }
    }
}
