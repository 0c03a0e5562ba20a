//! Iterative nullspace projection on frozen pooled vectors, with a linear or
//! a two-layer task classifier on the projected vectors.

use std::collections::{BTreeMap, VecDeque};

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::compute::{ParamStore, RngSeed};
use crate::error::{DamError, Result};
use crate::eval::{accuracy, train_attackers, train_probe, AttackerConfig, EmbeddedSplits, RunMetrics};
use crate::objectives::ClassifierHead;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InlpConfig {
    pub iterations: usize,
    /// Upper bound on the classifiers whose directions are removed.
    pub classifiers: usize,
    pub l2: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for InlpConfig {
    fn default() -> Self {
        InlpConfig {
            iterations: 10,
            classifiers: 10,
            l2: 1e-4,
            max_iter: 500,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskClassifierKind {
    Linear,
    NonLinear,
}

/// Multinomial logistic regression with an intercept and L2 on the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticRegression {
    /// Features × classes.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

fn softmax_in_place(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
}

impl LogisticRegression {
    pub fn fit(x: &Array2<f64>, y: &[usize], num_classes: usize, l2: f64, max_iter: usize, tol: f64) -> Result<Self> {
        let (n, d) = x.dim();
        if n != y.len() || n == 0 {
            return Err(DamError::Input(format!("{n} rows for {} labels", y.len())));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= num_classes) {
            return Err(DamError::Input(format!("label {bad} out of range for {num_classes} classes")));
        }
        let c = num_classes;
        let mut onehot = Array2::<f64>::zeros((n, c));
        for (i, &yi) in y.iter().enumerate() {
            onehot[[i, yi]] = 1.0;
        }
        let objective = |theta: &[f64], grad: &mut [f64]| -> f64 {
            let w = Array2::from_shape_vec((d, c), theta[..d * c].to_vec()).expect("weight block");
            let b = Array1::from_vec(theta[d * c..].to_vec());
            let mut p = x.dot(&w) + &b;
            let mut loss = 0.0;
            for (row, &yi) in p.rows().into_iter().zip(y) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                loss += lse - row[yi];
            }
            loss /= n as f64;
            softmax_in_place(&mut p);
            let diff = (p - &onehot) / n as f64;
            let gw = x.t().dot(&diff) + &(&w * l2);
            let gb = diff.sum_axis(Axis(0));
            grad[..d * c].copy_from_slice(gw.as_slice().expect("contiguous"));
            grad[d * c..].copy_from_slice(gb.as_slice().expect("contiguous"));
            loss + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>()
        };
        let theta = lbfgs(objective, vec![0.0; d * c + c], max_iter, tol);
        Ok(LogisticRegression {
            weights: Array2::from_shape_vec((d, c), theta[..d * c].to_vec()).expect("weight block"),
            bias: Array1::from_vec(theta[d * c..].to_vec()),
        })
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        let logits = x.dot(&self.weights) + &self.bias;
        logits
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                    .0
            })
            .collect()
    }

    /// Directions that change the predicted distribution: the weight columns
    /// minus their mean.
    pub fn decision_directions(&self) -> Vec<Array1<f64>> {
        let mean = self.weights.mean_axis(Axis(1)).expect("at least one class");
        self.weights.columns().into_iter().map(|col| &col - &mean).collect()
    }
}

/// Limited-memory BFGS with Armijo backtracking. Stops when the largest
/// gradient entry falls below `tol`.
fn lbfgs<F>(mut f: F, mut x: Vec<f64>, max_iter: usize, tol: f64) -> Vec<f64>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    const HISTORY: usize = 10;
    let n = x.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut g_new = vec![0.0; n];
    for _ in 0..max_iter {
        if g.iter().fold(0.0f64, |m, v| m.max(v.abs())) < tol {
            break;
        }
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = mem.back().map_or_else(
            || 1.0 / dot(&g, &g).sqrt().max(1e-12),
            |(s, y, _)| dot(s, y) / dot(y, y),
        );
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in mem.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            mem.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&g, &dir);
        }
        let mut step = 1.0;
        let mut x_new = vec![0.0; n];
        let mut f_new;
        loop {
            x_new.iter_mut().zip(&x).zip(&dir).for_each(|((xn, xi), di)| *xn = xi + step * di);
            f_new = f(&x_new, &mut g_new);
            if f_new <= fx + 1e-4 * step * slope || step < 1e-12 {
                break;
            }
            step *= 0.5;
        }
        if step < 1e-12 {
            break;
        }
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if mem.len() == HISTORY {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        x.copy_from_slice(&x_new);
        g.copy_from_slice(&g_new);
        fx = f_new;
    }
    x
}

/// `P = I - B Bᵀ` for an orthonormal basis `B` of the removed directions.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionMatrix {
    pub p: Array2<f64>,
    /// Removed directions, one orthonormal vector per column.
    pub basis: Array2<f64>,
    pub classifiers_used: usize,
}

impl ProjectionMatrix {
    pub fn identity(dim: usize) -> Self {
        ProjectionMatrix {
            p: Array2::eye(dim),
            basis: Array2::zeros((dim, 0)),
            classifiers_used: 0,
        }
    }

    fn from_basis(basis: &[Array1<f64>], dim: usize, classifiers_used: usize) -> Self {
        let mut b = Array2::zeros((dim, basis.len()));
        for (j, v) in basis.iter().enumerate() {
            b.column_mut(j).assign(v);
        }
        let p = Array2::eye(dim) - b.dot(&b.t());
        ProjectionMatrix {
            p,
            basis: b,
            classifiers_used,
        }
    }

    pub fn rank(&self) -> usize {
        self.p.nrows() - self.basis.ncols()
    }

    pub fn to_f32(&self) -> Array2<f32> {
        self.p.mapv(|v| v as f32)
    }

    pub fn apply(&self, z: &Array2<f32>) -> Array2<f32> {
        z.dot(&self.to_f32())
    }
}

/// Adds `v` to an orthonormal basis by Gram-Schmidt unless it already lies
/// in its span.
fn absorb(basis: &mut Vec<Array1<f64>>, v: &Array1<f64>) {
    let scale = v.dot(v).sqrt();
    if scale == 0.0 {
        return;
    }
    let mut r = v / scale;
    for _ in 0..2 {
        for b in basis.iter() {
            let c = b.dot(&r);
            r.scaled_add(-c, b);
        }
    }
    let norm = r.dot(&r).sqrt();
    if norm > 1e-8 {
        basis.push(r / norm);
    }
}

/// Repeatedly fits a linear attribute classifier on projected vectors and
/// removes the directions it uses.
pub fn inlp_fit(z: &Array2<f32>, labels: &[usize], num_classes: usize, cfg: &InlpConfig) -> Result<ProjectionMatrix> {
    let dim = z.ncols();
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(DamError::Data(format!(
            "protected attribute is degenerate: {} class(es) present",
            distinct.len()
        )));
    }
    let x = z.mapv(|v| v as f64);
    let mut basis: Vec<Array1<f64>> = Vec::new();
    let mut proj = ProjectionMatrix::identity(dim);
    let rounds = cfg.iterations.min(cfg.classifiers);
    for _ in 0..rounds {
        if basis.len() >= dim {
            break;
        }
        let xp = x.dot(&proj.p);
        let clf = LogisticRegression::fit(&xp, labels, num_classes, cfg.l2, cfg.max_iter, cfg.tol)?;
        for d in clf.decision_directions() {
            // Directions are taken inside the current range so P only shrinks.
            absorb(&mut basis, &proj.p.dot(&d));
        }
        proj = ProjectionMatrix::from_basis(&basis, dim, proj.classifiers_used + 1);
    }
    Ok(proj)
}

/// Accuracy of a logistic-regression probe fit on `train` and scored on
/// `test`.
pub fn linear_probe_accuracy(
    train: (&Array2<f32>, &[usize]),
    test: (&Array2<f32>, &[usize]),
    num_classes: usize,
    cfg: &InlpConfig,
) -> Result<f64> {
    let clf = LogisticRegression::fit(&train.0.mapv(|v| v as f64), train.1, num_classes, cfg.l2, cfg.max_iter, cfg.tol)?;
    Ok(accuracy(&clf.predict(&test.0.mapv(|v| v as f64)), test.1))
}

/// Task accuracy of the chosen classifier and attacker metrics, both on
/// projected vectors. The returned seed is 0; callers fill it in.
pub fn inlp_evaluate(
    p: &ProjectionMatrix,
    data: &EmbeddedSplits,
    num_task_classes: usize,
    attributes: &[(String, usize)],
    kind: TaskClassifierKind,
    attackers: &AttackerConfig,
    seed: RngSeed,
) -> Result<RunMetrics> {
    let proj = data.project(&p.to_f32());
    let task_accuracy = match kind {
        TaskClassifierKind::Linear => {
            let cfg = InlpConfig::default();
            linear_probe_accuracy(
                (&proj.train.z, &proj.train.task),
                (&proj.test.z, &proj.test.task),
                num_task_classes,
                &cfg,
            )?
        }
        TaskClassifierKind::NonLinear => {
            let mut store = ParamStore::new();
            let head = ClassifierHead::new(&mut store, "inlp.task", proj.train.z.ncols(), num_task_classes, seed)?;
            train_probe(
                &mut store,
                &head,
                (&proj.train.z, &proj.train.task),
                (&proj.val.z, &proj.val.task),
                attackers,
                seed.derive("inlp.task"),
            )?;
            accuracy(&head.predict(&store, &proj.test.z)?, &proj.test.task)
        }
    };
    let mut metrics = BTreeMap::new();
    for (a, classes) in attributes {
        let ens = train_attackers(&proj, a, *classes, attackers, seed.derive("attackers"))?;
        metrics.insert(a.clone(), ens.best());
    }
    Ok(RunMetrics {
        seed: 0,
        task_accuracy,
        attackers: metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn planted(n: usize, dim: usize, seed: u64) -> (Array2<f32>, Vec<usize>) {
        let mut rng = RngSeed(seed).rng();
        let mut z = Array2::zeros((n, dim));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let a = usize::from(rng.random::<f64>() < 0.5);
            for j in 0..dim {
                z[[i, j]] = rng.random::<f32>() * 2.0 - 1.0;
            }
            z[[i, 0]] = if a == 1 { 1.0 + z[[i, 0]].abs() } else { -1.0 - z[[i, 0]].abs() };
            y.push(a);
        }
        (z, y)
    }

    fn max_abs(a: &Array2<f64>) -> f64 {
        a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn zero_iterations_is_identity() {
        let (z, y) = planted(50, 3, 1);
        let cfg = InlpConfig {
            iterations: 0,
            ..InlpConfig::default()
        };
        let p = inlp_fit(&z, &y, 2, &cfg).unwrap();
        assert_eq!(p.p, Array2::<f64>::eye(3));
    }

    #[test]
    fn sign_of_first_dim_is_removed_in_one_step() {
        let (z, y) = planted(400, 2, 2);
        let cfg = InlpConfig {
            iterations: 1,
            ..InlpConfig::default()
        };
        let p = inlp_fit(&z, &y, 2, &cfg).unwrap();
        assert_eq!(p.basis.ncols(), 1);
        assert!(p.basis[[0, 0]].abs() > 0.95, "{:?}", p.basis);
        let (zt, yt) = planted(400, 2, 3);
        let acc = linear_probe_accuracy((&p.apply(&z), &y), (&p.apply(&zt), &yt), 2, &cfg).unwrap();
        assert!(acc < 0.6, "{acc}");
    }

    #[test]
    fn projector_symmetric_idempotent_and_rank_nonincreasing() {
        let (z, _) = planted(300, 6, 4);
        let mut rng = RngSeed(9).rng();
        let y: Vec<usize> = (0..300).map(|_| rng.random_range(0..3)).collect();
        let mut last_rank = 6;
        for it in 0..4 {
            let cfg = InlpConfig {
                iterations: it,
                ..InlpConfig::default()
            };
            let p = inlp_fit(&z, &y, 3, &cfg).unwrap();
            assert!(max_abs(&(&p.p - &p.p.t())) <= 1e-5);
            assert!(max_abs(&(p.p.dot(&p.p) - &p.p)) <= 1e-5);
            assert!(p.rank() <= last_rank);
            last_rank = p.rank();
        }
    }

    #[test]
    fn degenerate_attribute_rejected() {
        let (z, _) = planted(10, 2, 1);
        assert!(inlp_fit(&z, &[0; 10], 2, &InlpConfig::default()).is_err());
    }

    #[test]
    fn logistic_regression_separates() {
        let (z, y) = planted(200, 3, 5);
        let x = z.mapv(|v| v as f64);
        let clf = LogisticRegression::fit(&x, &y, 2, 1e-4, 500, 1e-6).unwrap();
        assert_eq!(accuracy(&clf.predict(&x), &y), 1.0);
    }
}
