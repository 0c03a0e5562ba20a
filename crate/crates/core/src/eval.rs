//! Leakage evaluation with attacker ensembles, task metrics, fusion
//! attention analysis and report tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapters::CompositionMode;
use crate::compute::{Adam, Graph, Mode, ParamGroup, ParamStore, RngSeed};
use crate::data::EncodedDataset;
use crate::encoder::TokenBatch;
use crate::error::{DamError, Result};
use crate::inlp::{inlp_evaluate, inlp_fit, InlpConfig, TaskClassifierKind};
use crate::objectives::{cross_entropy, ClassifierHead};
use crate::training::{run_recipe, DamModel, Recipe, Route, TrainingConfig};

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Mean over classes of per-class recall. Every class in `0..num_classes`
/// must occur in `labels`.
pub fn balanced_accuracy(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(DamError::Input(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut support = vec![0usize; num_classes];
    let mut hits = vec![0usize; num_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if y >= num_classes {
            return Err(DamError::Input(format!("label {y} out of range for {num_classes} classes")));
        }
        support[y] += 1;
        hits[y] += usize::from(p == y);
    }
    if num_classes == 0 {
        return Err(DamError::Input("balanced accuracy over zero classes".into()));
    }
    let mut total = 0.0;
    for c in 0..num_classes {
        if support[c] == 0 {
            return Err(DamError::Data(format!("class {c} has no examples")));
        }
        total += hits[c] as f64 / support[c] as f64;
    }
    Ok(total / num_classes as f64)
}

/// Share of the most frequent label.
pub fn majority_rate(labels: &[usize]) -> f64 {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &y in labels {
        *counts.entry(y).or_default() += 1;
    }
    counts.values().copied().max().unwrap_or(0) as f64 / labels.len().max(1) as f64
}

// ---------------------------------------------------------------------------
// embeddings

/// Frozen pooled vectors with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedded {
    pub z: Array2<f32>,
    pub task: Vec<usize>,
    pub attributes: BTreeMap<String, Vec<usize>>,
}

impl Embedded {
    pub fn from_model(model: &DamModel, data: &EncodedDataset, route: &Route) -> Result<Self> {
        Ok(Embedded {
            z: model.embed(&data.tokens, route)?,
            task: data.task.clone(),
            attributes: data.attributes.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.task.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task.is_empty()
    }

    pub fn attribute(&self, a: &str) -> Result<&[usize]> {
        self.attributes
            .get(a)
            .map(Vec::as_slice)
            .ok_or_else(|| DamError::Data(format!("embeddings carry no labels for attribute {a:?}")))
    }

    /// Rows mapped through a symmetric projector.
    pub fn project(&self, p: &Array2<f32>) -> Self {
        Embedded {
            z: self.z.dot(p),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedSplits {
    pub train: Embedded,
    pub val: Embedded,
    pub test: Embedded,
}

impl EmbeddedSplits {
    pub fn from_model(model: &DamModel, data: &EncodedSplits, route: &Route) -> Result<Self> {
        Ok(EmbeddedSplits {
            train: Embedded::from_model(model, &data.train, route)?,
            val: Embedded::from_model(model, &data.val, route)?,
            test: Embedded::from_model(model, &data.test, route)?,
        })
    }

    pub fn project(&self, p: &Array2<f32>) -> Self {
        EmbeddedSplits {
            train: self.train.project(p),
            val: self.val.project(p),
            test: self.test.project(p),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSplits {
    pub train: EncodedDataset,
    pub val: EncodedDataset,
    pub test: EncodedDataset,
}

// ---------------------------------------------------------------------------
// probes and attackers

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackerConfig {
    pub members: usize,
    pub lr: f32,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
}

impl Default for AttackerConfig {
    fn default() -> Self {
        AttackerConfig {
            members: 5,
            lr: 1e-3,
            max_epochs: 20,
            patience: 3,
            batch_size: 64,
        }
    }
}

/// Trains a head on fixed vectors, keeping the weights of the epoch with the
/// lowest validation loss.
pub fn train_probe(
    store: &mut ParamStore,
    head: &ClassifierHead,
    train: (&Array2<f32>, &[usize]),
    val: (&Array2<f32>, &[usize]),
    cfg: &AttackerConfig,
    seed: RngSeed,
) -> Result<()> {
    let (zt, yt) = train;
    if zt.nrows() != yt.len() || zt.nrows() == 0 {
        return Err(DamError::Input(format!("{} vectors for {} labels", zt.nrows(), yt.len())));
    }
    if cfg.batch_size == 0 {
        return Err(DamError::Config("probe batch_size must be positive".into()));
    }
    let groups: BTreeSet<String> = [head.group.clone()].into();
    store.set_trainable(&groups)?;
    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..yt.len()).collect();
    let mut best: Option<(f64, Vec<ParamGroup>)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut seed.derive_index("shuffle", epoch as u64).rng());
        for chunk in order.chunks(cfg.batch_size) {
            let mut x = Array2::zeros((chunk.len(), zt.ncols()));
            for (r, &i) in chunk.iter().enumerate() {
                x.row_mut(r).assign(&zt.row(i));
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| yt[i]).collect();
            let mut g = Graph::new();
            let xv = g.input(x);
            let logits = head.forward(&mut g, store, xv)?;
            let loss = g.cross_entropy(logits, &labels)?;
            g.backward(loss)?;
            adam.step(store, &g.param_grads());
        }
        let val_loss = cross_entropy(&head.logits(store, val.0)?, val.1)?;
        if best.as_ref().map_or(true, |(b, _)| val_loss < *b) {
            best = Some((val_loss, store.snapshot(&groups)));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience.max(1) {
                break;
            }
        }
    }
    if let Some((_, snap)) = best {
        store.restore(&snap)?;
    }
    store.freeze_all();
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackerMetrics {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
}

/// Independently trained attackers for one attribute, in their own store.
#[derive(Clone, Debug)]
pub struct AttackerEnsemble {
    pub attribute: String,
    pub store: ParamStore,
    pub heads: Vec<ClassifierHead>,
    /// Test metrics of each member.
    pub members: Vec<AttackerMetrics>,
}

impl AttackerEnsemble {
    /// Best test accuracy and best test balanced accuracy, taken
    /// independently over the members.
    pub fn best(&self) -> AttackerMetrics {
        AttackerMetrics {
            accuracy: self.members.iter().map(|m| m.accuracy).fold(0.0, f64::max),
            balanced_accuracy: self.members.iter().map(|m| m.balanced_accuracy).fold(0.0, f64::max),
        }
    }
}

/// Trains the attacker ensemble on the train split's vectors (model selection
/// on validation loss) and scores every member on the test split.
pub fn train_attackers(
    data: &EmbeddedSplits,
    attribute: &str,
    num_classes: usize,
    cfg: &AttackerConfig,
    seed: RngSeed,
) -> Result<AttackerEnsemble> {
    let yt = data.train.attribute(attribute)?;
    let distinct: BTreeSet<usize> = yt.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(DamError::Data(format!(
            "attribute {attribute} is degenerate: {} class(es) in the training split",
            distinct.len()
        )));
    }
    if cfg.members == 0 {
        return Err(DamError::Config("attacker ensemble needs at least one member".into()));
    }
    let hidden = data.train.z.ncols();
    let mut store = ParamStore::new();
    let mut heads = Vec::with_capacity(cfg.members);
    let mut members = Vec::with_capacity(cfg.members);
    let yv = data.val.attribute(attribute)?;
    let ys = data.test.attribute(attribute)?;
    for m in 0..cfg.members {
        let member_seed = seed.derive(attribute).derive_index("attacker", m as u64);
        let head = ClassifierHead::new(
            &mut store,
            &format!("attacker.{attribute}.{m}"),
            hidden,
            num_classes,
            member_seed,
        )?;
        train_probe(
            &mut store,
            &head,
            (&data.train.z, yt),
            (&data.val.z, yv),
            cfg,
            member_seed,
        )?;
        let preds = head.predict(&store, &data.test.z)?;
        members.push(AttackerMetrics {
            accuracy: accuracy(&preds, ys),
            balanced_accuracy: balanced_accuracy(&preds, ys, num_classes)?,
        });
        heads.push(head);
    }
    Ok(AttackerEnsemble {
        attribute: attribute.to_string(),
        store,
        heads,
        members,
    })
}

// ---------------------------------------------------------------------------
// reports

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub task_accuracy: f64,
    pub attackers: BTreeMap<String, AttackerMetrics>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation. A single value has std 0.
pub fn mean_std(xs: &[f64]) -> MeanStd {
    if xs.is_empty() {
        return MeanStd { mean: f64::NAN, std: f64::NAN };
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub model: String,
    pub mode: Option<CompositionMode>,
    pub runs: Vec<RunMetrics>,
}

impl LeakageReport {
    pub fn label(&self) -> String {
        match self.mode {
            Some(m) => format!("{} ({m})", self.model),
            None => self.model.clone(),
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.runs.iter().map(|r| r.seed).collect()
    }

    pub fn task_summary(&self) -> MeanStd {
        mean_std(&self.runs.iter().map(|r| r.task_accuracy).collect::<Vec<_>>())
    }

    /// Accuracy and balanced accuracy summaries for one attribute.
    pub fn attacker_summary(&self, attribute: &str) -> Option<(MeanStd, MeanStd)> {
        let ms: Vec<&AttackerMetrics> = self.runs.iter().filter_map(|r| r.attackers.get(attribute)).collect();
        if ms.len() != self.runs.len() || ms.is_empty() {
            return None;
        }
        Some((
            mean_std(&ms.iter().map(|m| m.accuracy).collect::<Vec<_>>()),
            mean_std(&ms.iter().map(|m| m.balanced_accuracy).collect::<Vec<_>>()),
        ))
    }
}

fn pct(m: MeanStd) -> String {
    format!("{:.2} ± {:.2}", 100.0 * m.mean, 100.0 * m.std)
}

fn capitalized(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Task accuracy and per-attribute attacker metrics, in percent.
pub fn render_markdown(reports: &[LeakageReport], attributes: &[String]) -> String {
    let mut out = String::from("| Model | Task Acc. ↑ |");
    for a in attributes {
        let _ = write!(out, " {0} Attacker Acc. ↓ | {0} Attacker BAcc. ↓ |", capitalized(a));
    }
    out.push('\n');
    out.push_str("|---|---|");
    for _ in attributes {
        out.push_str("---|---|");
    }
    out.push('\n');
    for r in reports {
        let _ = write!(out, "| {} | {} |", r.label(), pct(r.task_summary()));
        for a in attributes {
            match r.attacker_summary(a) {
                Some((acc, bacc)) => {
                    let _ = write!(out, " {} | {} |", pct(acc), pct(bacc));
                }
                None => out.push_str(" - | - |"),
            }
        }
        out.push('\n');
    }
    out
}

/// One row per model and run, plus raw fractions.
pub fn render_csv(reports: &[LeakageReport], attributes: &[String]) -> String {
    let mut out = String::from("model,mode,seed,task_accuracy");
    for a in attributes {
        let _ = write!(out, ",{a}_attacker_accuracy,{a}_attacker_balanced_accuracy");
    }
    out.push('\n');
    for r in reports {
        let mode = r.mode.map(|m| m.to_string()).unwrap_or_default();
        for run in &r.runs {
            let _ = write!(out, "{},{},{},{}", r.model, mode, run.seed, run.task_accuracy);
            for a in attributes {
                match run.attackers.get(a) {
                    Some(m) => {
                        let _ = write!(out, ",{},{}", m.accuracy, m.balanced_accuracy);
                    }
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
    }
    out
}

/// Task accuracy on the test split and attacker metrics for each attribute,
/// for one trained model and route.
pub fn evaluate_run(
    model: &DamModel,
    route: &Route,
    data: &EncodedSplits,
    attack: &[String],
    cfg: &AttackerConfig,
    seed: u64,
) -> Result<RunMetrics> {
    let emb = EmbeddedSplits::from_model(model, data, route)?;
    let preds = model.task_head_for(route)?.predict(&model.store, &emb.test.z)?;
    let mut attackers = BTreeMap::new();
    for a in attack {
        let classes = model.schema.attribute_classes(a)?;
        let ens = train_attackers(&emb, a, classes, cfg, RngSeed(seed).derive("attackers"))?;
        attackers.insert(a.clone(), ens.best());
    }
    Ok(RunMetrics {
        seed,
        task_accuracy: accuracy(&preds, &emb.test.task),
        attackers,
    })
}

// ---------------------------------------------------------------------------
// fusion attention analysis

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionOutlier {
    pub example_id: usize,
    pub debias_attention: f64,
    pub text: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionReport {
    pub adapter_labels: Vec<String>,
    pub example_ids: Vec<usize>,
    /// Per example (row) and adapter (column): attention averaged over fusion
    /// layers and valid positions.
    pub mean_attention: Array2<f64>,
    pub outliers: Vec<AttentionOutlier>,
}

/// Per-example fusion attention averaged over layers and non-padding
/// positions. Columns follow the composition's adapter order.
pub fn fusion_attention(model: &DamModel, tokens: &[Vec<usize>], mode: CompositionMode) -> Result<(Vec<String>, Array2<f64>)> {
    if mode != CompositionMode::Fused {
        return Err(DamError::Composition("attention analysis needs fused mode; task_only has no fusion".into()));
    }
    let comp = model.composition(CompositionMode::Fused)?;
    let labels = comp.adapter_labels();
    let k = labels.len();
    let mut out = Array2::zeros((tokens.len(), k));
    for (ci, chunk) in tokens.chunks(256).enumerate() {
        let batch = TokenBatch::from_padded(chunk)?;
        let mut g = Graph::new();
        comp.take_recorded();
        model
            .encoder
            .forward(&mut g, &model.store, &batch, Some(&comp), &mut Mode::Eval)?;
        let rec = comp.take_recorded();
        for (b, &len) in batch.lens.iter().enumerate() {
            let len = len.clamp(1, batch.seq);
            let row = ci * 256 + b;
            for &w in &rec {
                let wv = g.value(w);
                for t in 0..len {
                    for j in 0..k {
                        out[[row, j]] += wv[[b * batch.seq + t, j]] as f64;
                    }
                }
            }
            let denom = (rec.len() * len) as f64;
            out.row_mut(row).mapv_inplace(|x| x / denom);
        }
    }
    Ok((labels, out))
}

/// Attention analysis on a seeded random sample of the given examples.
/// Outliers are the `top_n` examples with the most attention on debiasing
/// adapters.
pub fn fusion_attention_report(
    model: &DamModel,
    tokens: &[Vec<usize>],
    texts: Option<&[String]>,
    mode: CompositionMode,
    sample_fraction: f64,
    top_n: usize,
    seed: RngSeed,
) -> Result<AttentionReport> {
    if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
        return Err(DamError::Config(format!("sample fraction {sample_fraction} not in (0, 1]")));
    }
    if tokens.is_empty() {
        return Err(DamError::Data("no examples for attention analysis".into()));
    }
    let n = ((tokens.len() as f64 * sample_fraction).round() as usize).clamp(1, tokens.len());
    let mut ids: Vec<usize> = (0..tokens.len()).collect();
    ids.shuffle(&mut seed.derive("attention_sample").rng());
    ids.truncate(n);
    ids.sort_unstable();
    let sample: Vec<Vec<usize>> = ids.iter().map(|&i| tokens[i].clone()).collect();
    let (labels, att) = fusion_attention(model, &sample, mode)?;
    let mut ranked: Vec<(usize, f64)> = ids
        .iter()
        .enumerate()
        .map(|(r, &id)| (id, att.slice(s![r, 1..]).sum()))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let outliers = ranked
        .into_iter()
        .take(top_n)
        .map(|(id, w)| AttentionOutlier {
            example_id: id,
            debias_attention: w,
            text: texts.and_then(|t| t.get(id).cloned()),
        })
        .collect();
    Ok(AttentionReport {
        adapter_labels: labels,
        example_ids: ids,
        mean_attention: att,
        outliers,
    })
}

impl AttentionReport {
    /// Long format: example_id, adapter_id, mean_attention.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("example_id,adapter_id,mean_attention\n");
        for (r, id) in self.example_ids.iter().enumerate() {
            for (j, label) in self.adapter_labels.iter().enumerate() {
                let _ = writeln!(out, "{id},{label},{}", self.mean_attention[[r, j]]);
            }
        }
        out
    }

    pub fn adapter_means(&self) -> Vec<f64> {
        (0..self.adapter_labels.len())
            .map(|j| self.mean_attention.column(j).mean().unwrap_or(f64::NAN))
            .collect()
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Adapter | Mean attention | Min | Max |\n|---|---|---|---|\n");
        for (j, label) in self.adapter_labels.iter().enumerate() {
            let col = self.mean_attention.column(j);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let _ = writeln!(out, "| {label} | {:.4} | {lo:.4} | {hi:.4} |", col.mean().unwrap_or(f64::NAN));
        }
        if !self.outliers.is_empty() {
            out.push_str("\n| Example | Debiasing attention | Text |\n|---|---|---|\n");
            for o in &self.outliers {
                let _ = writeln!(
                    out,
                    "| {} | {:.4} | {} |",
                    o.example_id,
                    o.debias_attention,
                    o.text.as_deref().unwrap_or("")
                );
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// suite

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub recipes: Vec<Recipe>,
    /// Attributes the debiasing recipes target.
    pub attributes: Vec<String>,
    /// Attributes attacked in the report.
    pub attack: Vec<String>,
    pub seeds: Vec<u64>,
    pub training: TrainingConfig,
    pub attackers: AttackerConfig,
    /// Adds INLP and INLP-NonLin rows on the first attacked attribute,
    /// projected from the fine-tuned model's vectors.
    pub inlp: Option<InlpConfig>,
}

/// Trains every recipe once per seed from the same initial model and
/// evaluates it. DAM yields a task_only and a fused row.
pub fn evaluate_suite(base: &DamModel, suite: &SuiteConfig, data: &EncodedSplits) -> Result<Vec<LeakageReport>> {
    if suite.seeds.is_empty() {
        return Err(DamError::Config("suite needs at least one seed".into()));
    }
    let mut reports: Vec<LeakageReport> = Vec::new();
    let mut push = |model: String, mode: Option<CompositionMode>, run: RunMetrics| {
        match reports.iter_mut().find(|r| r.model == model && r.mode == mode) {
            Some(r) => r.runs.push(run),
            None => reports.push(LeakageReport {
                model,
                mode,
                runs: vec![run],
            }),
        }
    };
    let mut recipes = suite.recipes.clone();
    if suite.inlp.is_some() && !recipes.contains(&Recipe::Ft) {
        recipes.insert(0, Recipe::Ft);
    }
    for &seed in &suite.seeds {
        for &recipe in &recipes {
            let mut model = base.clone();
            run_recipe(&mut model, recipe, &suite.attributes, &suite.training, seed, &data.train, &data.val)?;
            let routes: Vec<(Route, Option<CompositionMode>)> = match recipe {
                Recipe::Ft | Recipe::FtDebias => vec![(Route::Plain, None)],
                Recipe::Adp | Recipe::AdpDebias => vec![(Route::TaskAdapter, None)],
                Recipe::Dam => vec![
                    (Route::TaskAdapter, Some(CompositionMode::TaskOnly)),
                    (Route::Fused, Some(CompositionMode::Fused)),
                ],
            };
            if suite.recipes.contains(&recipe) {
                for (route, mode) in routes {
                    let run = evaluate_run(&model, &route, data, &suite.attack, &suite.attackers, seed)?;
                    push(recipe.to_string(), mode, run);
                }
            }
            if let (Recipe::Ft, Some(icfg)) = (recipe, &suite.inlp) {
                let attr = suite
                    .attack
                    .first()
                    .ok_or_else(|| DamError::Config("INLP rows need an attacked attribute".into()))?;
                let emb = EmbeddedSplits::from_model(&model, data, &Route::Plain)?;
                let classes = model.schema.attribute_classes(attr)?;
                let p = inlp_fit(&emb.train.z, emb.train.attribute(attr)?, classes, icfg)?;
                for (name, kind) in [("INLP", TaskClassifierKind::Linear), ("INLP-NonLin", TaskClassifierKind::NonLinear)] {
                    let m = inlp_evaluate(
                        &p,
                        &emb,
                        model.schema.num_task_classes,
                        &[(attr.clone(), classes)],
                        kind,
                        &suite.attackers,
                        RngSeed(seed),
                    )?;
                    push(name.to_string(), None, RunMetrics { seed, ..m });
                }
            }
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_accuracy_cases() {
        let y = [0, 1, 2, 1, 0];
        assert_eq!(balanced_accuracy(&y, &y, 3).unwrap(), 1.0);

        let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 90)).collect();
        let preds = vec![0; 100];
        assert!((balanced_accuracy(&preds, &labels, 2).unwrap() - 0.5).abs() <= 1e-12);

        let labels = [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1];
        let preds = [0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 0];
        assert!((balanced_accuracy(&preds, &labels, 2).unwrap() - 0.65).abs() <= 1e-12);
    }

    #[test]
    fn balanced_accuracy_names_absent_class() {
        let err = balanced_accuracy(&[0, 0], &[0, 0], 2).unwrap_err();
        assert!(err.to_string().contains("class 1"), "{err}");
    }

    #[test]
    fn mean_std_sample() {
        let m = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 1.0).abs() < 1e-12);
        assert_eq!(mean_std(&[0.4]).std, 0.0);
    }

    fn separable(n: usize, seed: u64) -> Embedded {
        use rand::Rng;
        let mut rng = RngSeed(seed).rng();
        let mut z = Array2::zeros((n, 4));
        let mut a = Vec::new();
        for i in 0..n {
            let y = i % 2;
            for j in 0..4 {
                z[[i, j]] = rng.random::<f32>() - 0.5;
            }
            z[[i, 0]] += if y == 1 { 2.0 } else { -2.0 };
            a.push(y);
        }
        Embedded {
            z,
            task: vec![0; n],
            attributes: [("g".to_string(), a)].into(),
        }
    }

    #[test]
    fn attackers_find_planted_signal_deterministically() {
        let data = EmbeddedSplits {
            train: separable(200, 1),
            val: separable(60, 2),
            test: separable(60, 3),
        };
        let cfg = AttackerConfig::default();
        let a = train_attackers(&data, "g", 2, &cfg, RngSeed(5)).unwrap();
        let b = train_attackers(&data, "g", 2, &cfg, RngSeed(5)).unwrap();
        assert_eq!(a.members.len(), 5);
        assert_eq!(a.members, b.members);
        let best = a.best();
        assert!(best.balanced_accuracy > 0.95);
        for m in &a.members {
            assert!(best.accuracy >= m.accuracy && best.balanced_accuracy >= m.balanced_accuracy);
        }
    }

    #[test]
    fn degenerate_attribute_rejected() {
        let mut e = separable(20, 1);
        e.attributes.insert("g".into(), vec![1; 20]);
        let data = EmbeddedSplits {
            train: e.clone(),
            val: e.clone(),
            test: e,
        };
        let err = train_attackers(&data, "g", 2, &AttackerConfig::default(), RngSeed(0)).unwrap_err();
        assert!(err.to_string().contains("degenerate"));
    }

    #[test]
    fn markdown_layout_has_attribute_columns() {
        let run = RunMetrics {
            seed: 0,
            task_accuracy: 0.5,
            attackers: [
                ("gender".to_string(), AttackerMetrics { accuracy: 0.6, balanced_accuracy: 0.55 }),
                ("age".to_string(), AttackerMetrics { accuracy: 0.3, balanced_accuracy: 0.25 }),
            ]
            .into(),
        };
        let r = LeakageReport {
            model: "DAM".into(),
            mode: Some(CompositionMode::Fused),
            runs: vec![run],
        };
        let md = render_markdown(&[r.clone()], &["gender".into(), "age".into()]);
        assert!(md.contains("Gender Attacker BAcc."));
        assert!(md.contains("Age Attacker Acc."));
        assert!(md.contains("DAM (fused)"));
        let csv = render_csv(&[r], &["gender".into()]);
        assert_eq!(csv.lines().count(), 2);
    }
}
