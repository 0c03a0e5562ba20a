//! Classification heads and the task, adversarial and fused objectives.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::compute::{xavier_init, Graph, ParamId, ParamStore, RngSeed, Var};
use crate::error::{DamError, Result};

pub const TASK_HEAD_GROUP: &str = "head.task";
pub const FUSION_TASK_HEAD_GROUP: &str = "head.fusion_task";

pub fn debias_head_group(attribute: &str) -> String {
    format!("head.debias.{attribute}")
}

/// Two-layer feed-forward classifier with a tanh hidden layer. Used for the
/// task, for each adversary, and for attackers.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub group: String,
    pub num_classes: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl ClassifierHead {
    pub fn new(
        store: &mut ParamStore,
        group: &str,
        hidden_dim: usize,
        num_classes: usize,
        seed: RngSeed,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(DamError::Config(format!(
                "head {group} needs at least two classes, got {num_classes}"
            )));
        }
        let gi = store.add_group(group)?;
        let mut rng = seed.derive(group).rng();
        let w1 = store.add(gi, "layer1.weight", xavier_init(hidden_dim, hidden_dim, &mut rng));
        let b1 = store.add(gi, "layer1.bias", Array2::zeros((1, hidden_dim)));
        let w2 = store.add(gi, "layer2.weight", xavier_init(hidden_dim, num_classes, &mut rng));
        let b2 = store.add(gi, "layer2.bias", Array2::zeros((1, num_classes)));
        Ok(ClassifierHead {
            group: group.to_string(),
            num_classes,
            w1,
            b1,
            w2,
            b2,
        })
    }

    /// Draws fresh weights in place.
    pub fn reinit(&self, store: &mut ParamStore, seed: RngSeed) {
        let mut rng = seed.derive(&self.group).rng();
        let (h, c) = (store.get(self.w1).nrows(), self.num_classes);
        *store.get_mut(self.w1) = xavier_init(h, h, &mut rng);
        store.get_mut(self.b1).fill(0.0);
        *store.get_mut(self.w2) = xavier_init(h, c, &mut rng);
        store.get_mut(self.b2).fill(0.0);
    }

    pub fn hidden_dim(&self, store: &ParamStore) -> usize {
        store.get(self.w1).nrows()
    }

    pub fn forward(&self, g: &mut Graph<f32>, store: &ParamStore, z: Var) -> Result<Var> {
        let (w1, b1) = (g.param(store, self.w1), g.param(store, self.b1));
        let (w2, b2) = (g.param(store, self.w2), g.param(store, self.b2));
        let h = g.linear(z, w1, Some(b1))?;
        let h = g.tanh(h);
        g.linear(h, w2, Some(b2))
    }

    /// Logits for a materialized batch of vectors.
    pub fn logits(&self, store: &ParamStore, z: &Array2<f32>) -> Result<Array2<f32>> {
        let mut g = Graph::new();
        let zv = g.input(z.clone());
        let out = self.forward(&mut g, store, zv)?;
        Ok(g.value(out).clone())
    }

    pub fn predict(&self, store: &ParamStore, z: &Array2<f32>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(store, z)?))
    }
}

pub fn argmax_rows(logits: &Array2<f32>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
                .0
        })
        .collect()
}

/// Mean softmax cross-entropy, evaluated in double precision.
pub fn cross_entropy(logits: &Array2<f32>, labels: &[usize]) -> Result<f64> {
    let (n, c) = logits.dim();
    if n != labels.len() || n == 0 {
        return Err(DamError::Input(format!("{n} logit rows for {} labels", labels.len())));
    }
    let mut total = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        if y >= c {
            return Err(DamError::Input(format!("label {y} out of range for {c} classes")));
        }
        let m = row.iter().map(|&x| x as f64).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&x| (x as f64 - m).exp()).sum::<f64>().ln();
        total += lse - row[y] as f64;
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DebiasConfig {
    pub attribute_id: String,
    pub gamma: f64,
    pub num_classes: usize,
}

impl DebiasConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(DamError::Config(format!(
                "gamma for {} must be non-negative, got {}",
                self.attribute_id, self.gamma
            )));
        }
        if self.num_classes < 2 {
            return Err(DamError::Config(format!(
                "attribute {} needs at least two classes",
                self.attribute_id
            )));
        }
        Ok(())
    }
}

/// Cross-entropy of the task head on `z`.
pub fn task_loss(
    g: &mut Graph<f32>,
    store: &ParamStore,
    head: &ClassifierHead,
    z: Var,
    labels: &[usize],
) -> Result<Var> {
    let logits = head.forward(g, store, z)?;
    g.cross_entropy(logits, labels)
}

/// Adversarial loss: the head sees `z` through a gradient reversal layer, so
/// it learns to predict the attribute while everything upstream receives the
/// reversed gradient scaled by `gamma`.
pub fn debias_loss(
    g: &mut Graph<f32>,
    store: &ParamStore,
    cfg: &DebiasConfig,
    head: &ClassifierHead,
    z: Var,
    attr_labels: &[usize],
) -> Result<Var> {
    cfg.validate()?;
    if head.num_classes != cfg.num_classes {
        return Err(DamError::Config(format!(
            "head {} has {} classes, attribute {} has {}",
            head.group, head.num_classes, cfg.attribute_id, cfg.num_classes
        )));
    }
    let r = g.grad_reverse(z, cfg.gamma as f32)?;
    let logits = head.forward(g, store, r)?;
    g.cross_entropy(logits, attr_labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub task_loss: f64,
    pub debias_losses: Vec<f64>,
    pub total: f64,
}

impl LossReport {
    /// Unweighted sum of the task loss and every debiasing loss.
    pub fn fuse(task_loss: f64, debias_losses: Vec<f64>) -> Self {
        let total = task_loss + debias_losses.iter().sum::<f64>();
        LossReport {
            task_loss,
            debias_losses,
            total,
        }
    }
}

/// Builds the fused objective on the graph. With no debiasing terms this is
/// the task loss alone.
pub fn fused_loss(g: &mut Graph<f32>, task: Var, debias: &[Var]) -> Result<(Var, LossReport)> {
    let mut terms = vec![task];
    terms.extend_from_slice(debias);
    let total = g.sum(&terms)?;
    let report = LossReport {
        task_loss: g.scalar(task) as f64,
        debias_losses: debias.iter().map(|&d| g.scalar(d) as f64).collect(),
        total: g.scalar(total) as f64,
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::Adam;
    use ndarray::array;

    #[test]
    fn cross_entropy_reference_values() {
        let uniform = Array2::zeros((3, 4));
        assert!((cross_entropy(&uniform, &[0, 1, 3]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let confident = array![[50.0, 0.0], [0.0, 50.0]];
        assert!(cross_entropy(&confident, &[0, 1]).unwrap() < 1e-12);
        // -ln(e^2 / (e^2 + 1))
        let hand = (1.0f64 + (-2.0f64).exp()).ln();
        assert!((cross_entropy(&array![[2.0, 0.0]], &[0]).unwrap() - hand).abs() < 1e-7);
        assert!((hand - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        assert!(matches!(
            cross_entropy(&array![[0.0, 1.0]], &[2]),
            Err(DamError::Input(_))
        ));
        let mut g = Graph::<f32>::new();
        let l = g.input(array![[0.0, 1.0]]);
        assert!(g.cross_entropy(l, &[5]).is_err());
    }

    #[test]
    fn fused_report_sums() {
        let r = LossReport::fuse(0.5, vec![0.2, 0.3]);
        assert!((r.total - 1.0).abs() < 1e-12);
        assert_eq!(LossReport::fuse(0.7, vec![0.0]).total, 0.7);
    }

    #[test]
    fn negative_gamma_is_config_error() {
        let cfg = DebiasConfig {
            attribute_id: "g".into(),
            gamma: -1.0,
            num_classes: 2,
        };
        assert!(matches!(cfg.validate(), Err(DamError::Config(_))));
    }

    fn toy_batch() -> (Array2<f32>, Vec<usize>) {
        let z = crate::compute::normal_init(16, 6, 1.0, &mut RngSeed(5).rng());
        let labels = (0..16).map(|i| usize::from(z[[i, 0]] > 0.0)).collect();
        (z, labels)
    }

    #[test]
    fn frozen_head_computes_loss_without_changes() {
        let mut store = ParamStore::new();
        let head = ClassifierHead::new(&mut store, "h", 6, 2, RngSeed(0)).unwrap();
        let before = store.clone();
        let (z, y) = toy_batch();
        let mut g = Graph::new();
        let zv = g.input(z);
        let loss = task_loss(&mut g, &store, &head, zv, &y).unwrap();
        g.backward(loss).unwrap();
        assert!(g.param_grads().is_empty());
        Adam::new(0.1).step(&mut store, &g.param_grads());
        assert_eq!(store, before);
    }

    #[test]
    fn task_loss_is_batch_permutation_invariant() {
        let mut store = ParamStore::new();
        let head = ClassifierHead::new(&mut store, "h", 6, 2, RngSeed(0)).unwrap();
        let (z, y) = toy_batch();
        let perm: Vec<usize> = (0..16).rev().collect();
        let zp = z.select(ndarray::Axis(0), &perm);
        let yp: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
        let a = cross_entropy(&head.logits(&store, &z).unwrap(), &y).unwrap();
        let b = cross_entropy(&head.logits(&store, &zp).unwrap(), &yp).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn one_step_decreases_loss() {
        let mut store = ParamStore::new();
        let head = ClassifierHead::new(&mut store, "h", 6, 2, RngSeed(0)).unwrap();
        store.set_trainable(&["h".to_string()].into()).unwrap();
        let (z, y) = toy_batch();
        let before = cross_entropy(&head.logits(&store, &z).unwrap(), &y).unwrap();
        let mut g = Graph::new();
        let zv = g.input(z.clone());
        let loss = task_loss(&mut g, &store, &head, zv, &y).unwrap();
        g.backward(loss).unwrap();
        let grads: Vec<_> = g.param_grads().into_iter().map(|(id, gr)| (id, gr.clone())).collect();
        let refs: Vec<_> = grads.iter().map(|(id, gr)| (*id, gr)).collect();
        Adam::new(1e-3).step(&mut store, &refs);
        let after = cross_entropy(&head.logits(&store, &z).unwrap(), &y).unwrap();
        assert!(after < before, "{after} >= {before}");
    }

    fn debias_grads(gamma: f64) -> (Array2<f32>, Array2<f32>, Vec<Array2<f32>>) {
        let mut store = ParamStore::new();
        let head = ClassifierHead::new(&mut store, "adv", 6, 2, RngSeed(0)).unwrap();
        store.set_trainable(&["adv".to_string()].into()).unwrap();
        let (z, y) = toy_batch();
        let cfg = DebiasConfig {
            attribute_id: "g".into(),
            gamma,
            num_classes: 2,
        };
        let mut g = Graph::new();
        let zv = g.leaf(z.clone());
        let loss = debias_loss(&mut g, &store, &cfg, &head, zv, &y).unwrap();
        g.backward(loss).unwrap();
        let head_grads: Vec<Array2<f32>> = g.param_grads().into_iter().map(|(_, gr)| gr.clone()).collect();
        let upstream = g.grad(zv).unwrap().clone();

        let mut g2 = Graph::new();
        let zv2 = g2.leaf(z);
        let plain = task_loss(&mut g2, &store, &head, zv2, &y).unwrap();
        g2.backward(plain).unwrap();
        (upstream, g2.grad(zv2).unwrap().clone(), head_grads)
    }

    #[test]
    fn gamma_one_reverses_upstream_gradient() {
        let (reversed, plain, _) = debias_grads(1.0);
        assert_eq!(reversed, plain.mapv(|x| -x));
    }

    #[test]
    fn gamma_zero_blocks_upstream_but_head_learns() {
        let (reversed, _, head) = debias_grads(0.0);
        assert!(reversed.iter().all(|&x| x == 0.0));
        assert!(head.iter().any(|g| g.iter().any(|&x| x != 0.0)));
    }
}
