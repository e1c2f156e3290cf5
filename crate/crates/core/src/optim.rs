//! AdamW with decoupled weight decay and per-group learning rates.

use crate::tensor::Tensor;

pub struct ParamGroup {
    pub params: Vec<Tensor>,
    pub lr: f32,
}

struct Slot {
    m: Vec<f32>,
    v: Vec<f32>,
}

pub struct AdamW {
    groups: Vec<ParamGroup>,
    state: Vec<Vec<Slot>>,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    t: u64,
}

impl AdamW {
    pub fn new(groups: Vec<ParamGroup>) -> Self {
        let state = groups
            .iter()
            .map(|g| {
                g.params
                    .iter()
                    .map(|p| Slot {
                        m: vec![0.0; p.numel()],
                        v: vec![0.0; p.numel()],
                    })
                    .collect()
            })
            .collect();
        AdamW {
            groups,
            state,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            t: 0,
        }
    }

    pub fn single_group(params: Vec<Tensor>, lr: f32) -> Self {
        AdamW::new(vec![ParamGroup { params, lr }])
    }

    pub fn set_lr(&mut self, group: usize, lr: f32) {
        self.groups[group].lr = lr;
    }

    /// Applies one update from the gradients accumulated on each parameter.
    /// Parameters with no gradient are skipped. Gradients are not cleared;
    /// call [`AdamW::zero_grad`] before the next backward pass.
    pub fn step(&mut self) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (group, slots) in self.groups.iter().zip(self.state.iter_mut()) {
            for (p, slot) in group.params.iter().zip(slots.iter_mut()) {
                let Some(grad) = p.grad() else { continue };
                p.data_mut(|w| {
                    for i in 0..w.len() {
                        let g = grad[i];
                        slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
                        slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
                        let mhat = slot.m[i] / bc1;
                        let vhat = slot.v[i] / bc2;
                        w[i] -= group.lr * (mhat / (vhat.sqrt() + self.eps)
                            + self.weight_decay * w[i]);
                    }
                });
            }
        }
    }

    pub fn zero_grad(&self) {
        for group in &self.groups {
            for p in &group.params {
                p.zero_grad();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn drives_a_quadratic_to_its_minimum() {
        let x = Tensor::from_vec(vec![3.0, -2.0, 0.5], &[3])
            .unwrap()
            .requires_grad(true);
        let target = Tensor::from_vec(vec![1.0, 1.0, 1.0], &[3]).unwrap();
        let mut opt = AdamW::single_group(vec![x.clone()], 0.05);
        opt.weight_decay = 0.0;
        for _ in 0..400 {
            opt.zero_grad();
            let loss = x.sub(&target).unwrap().square().sum_all();
            loss.backward().unwrap();
            opt.step();
        }
        for v in x.to_vec() {
            assert!((v - 1.0).abs() < 1e-2, "{v}");
        }
    }

    #[test]
    fn groups_update_at_their_own_rates() {
        let a = Tensor::scalar(1.0).requires_grad(true);
        let b = Tensor::scalar(1.0).requires_grad(true);
        let mut opt = AdamW::new(vec![
            ParamGroup { params: vec![a.clone()], lr: 1e-1 },
            ParamGroup { params: vec![b.clone()], lr: 1e-3 },
        ]);
        opt.weight_decay = 0.0;
        opt.zero_grad();
        let loss = a.add(&b).unwrap().sum_all();
        loss.backward().unwrap();
        opt.step();
        let (da, db) = (1.0 - a.item(), 1.0 - b.item());
        assert!((da - 1e-1).abs() < 1e-6, "{da}");
        assert!((db - 1e-3).abs() < 1e-7, "{db}");
    }

    #[test]
    fn skips_parameters_without_gradients() {
        let a = Tensor::scalar(2.0).requires_grad(true);
        let frozen = Tensor::scalar(5.0).requires_grad(true);
        let mut opt = AdamW::single_group(vec![a.clone(), frozen.clone()], 0.1);
        opt.zero_grad();
        a.scale(3.0).sum_all().backward().unwrap();
        opt.step();
        assert_eq!(frozen.item(), 5.0);
        assert_ne!(a.item(), 2.0);
    }
}
