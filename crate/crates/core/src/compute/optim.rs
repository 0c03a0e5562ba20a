use std::collections::HashMap;

use ndarray::{Array2, Zip};

use super::params::{ParamId, ParamStore};

/// Adaptive moment estimation. Only parameters of trainable groups are
/// touched; frozen tensors are never written.
#[derive(Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    moments: HashMap<ParamId, (Array2<f32>, Array2<f32>)>,
    group_lr: HashMap<usize, f32>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
            group_lr: HashMap::new(),
        }
    }

    /// Overrides the learning rate of one parameter group.
    pub fn set_group_lr(&mut self, group: usize, lr: f32) {
        self.group_lr.insert(group, lr);
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, &Array2<f32>)]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for &(id, g) in grads {
            if !store.is_trainable(id) {
                continue;
            }
            let lr = self.group_lr.get(&id.group).copied().unwrap_or(self.lr);
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Array2::zeros(g.dim()), Array2::zeros(g.dim())));
            Zip::from(store.get_mut(id))
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let gi = store.add_group("a").unwrap();
        let id = store.add(gi, "w", Array2::from_elem((1, 2), 1.0));
        let frozen_g = store.add_group("b").unwrap();
        let fid = store.add(frozen_g, "w", Array2::from_elem((1, 1), 1.0));
        store.set_trainable(&BTreeSet::from(["a".to_string()])).unwrap();
        let g = Array2::from_shape_vec((1, 2), vec![0.3, -2.0]).unwrap();
        let fg = Array2::from_elem((1, 1), 5.0);
        let mut adam = Adam::new(0.1);
        adam.step(&mut store, &[(id, &g), (fid, &fg)]);
        // Bias-corrected first step is lr * g / (|g| + eps).
        let w = store.get(id);
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6 && (w[[0, 1]] - 1.1).abs() < 1e-6);
        assert_eq!(store.get(fid)[[0, 0]], 1.0);
        adam.set_group_lr(gi, 0.0);
        adam.step(&mut store, &[(id, &g)]);
        assert!((store.get(id)[[0, 0]] - 0.9).abs() < 1e-6);
        assert_eq!(adam.steps_taken(), 2);
    }
}
