//! Declarative training plans, the staged DAM procedure, and the baseline
//! recipes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    debias_adapter_group, AdapterConfig, AdapterKind, AdapterStack, CompositionMode, DamComposition,
    FusionStack, FUSION_GROUP, TASK_ADAPTER_GROUP,
};
use crate::compute::{Adam, Graph, Mode, ParamGroup, ParamStore, RngSeed};
use crate::data::{EncodedDataset, Schema};
use crate::encoder::{Attachment, EncodedVars, Encoder, EncoderConfig, TokenBatch, ENCODER_GROUP};
use crate::error::{DamError, Result};
use crate::eval::accuracy;
use crate::objectives::{
    argmax_rows, cross_entropy, debias_head_group, debias_loss, fused_loss, task_loss, ClassifierHead,
    DebiasConfig, LossReport, FUSION_TASK_HEAD_GROUP, TASK_HEAD_GROUP,
};

const EVAL_BATCH: usize = 256;

/// Path through the model from tokens to the pooled vector.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Route {
    /// Encoder alone.
    Plain,
    /// Encoder with the task adapter.
    TaskAdapter,
    /// Encoder with a single debiasing adapter.
    DebiasAdapter(String),
    /// Encoder with every adapter combined by the fusion layer.
    Fused,
}

impl From<CompositionMode> for Route {
    fn from(m: CompositionMode) -> Self {
        match m {
            CompositionMode::TaskOnly => Route::TaskAdapter,
            CompositionMode::Fused => Route::Fused,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    Task,
    Debias(DebiasConfig),
}

/// Criterion for picking the epoch whose weights a stage keeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Selection {
    BestTaskAccuracy,
    /// Highest validation loss of the adversary: the epoch where the
    /// attribute is least predictable from `z`.
    HighestAdversaryLoss(String),
    LastEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lr: f32,
    /// Learning rate of the adversary heads, when it differs from `lr`.
    #[serde(default)]
    pub adversary_lr: Option<f32>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub name: String,
    pub trainable_groups: BTreeSet<String>,
    pub losses: Vec<Objective>,
    pub route: Route,
    /// Head group used for the task objective and task accuracy.
    pub task_head: String,
    pub selection: Selection,
    pub hyper: Hyperparams,
}

/// Number of parameters a plan trains.
pub fn count_trainable_params(store: &ParamStore, plan: &TrainPlan) -> usize {
    store.count_groups(&plan.trainable_groups)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train: LossReport,
    pub val_task_accuracy: Option<f64>,
    pub val_debias_loss: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub plan: String,
    pub trainable_params: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub final_losses: LossReport,
    pub history: Vec<EpochMetrics>,
    /// Where the selected weights were written, when persisted.
    pub checkpoint: Option<String>,
    pub wall_clock_secs: f64,
}

/// Encoder plus every adapter, fusion layer and head trained so far, all in
/// one parameter store.
#[derive(Clone, Debug)]
pub struct DamModel {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub adapter_config: AdapterConfig,
    pub schema: Schema,
    pub task_adapter: Option<AdapterStack>,
    pub debias_adapters: BTreeMap<String, AdapterStack>,
    pub fusion: Option<FusionStack>,
    pub heads: BTreeMap<String, ClassifierHead>,
}

impl DamModel {
    pub fn new(
        encoder_config: EncoderConfig,
        adapter_config: AdapterConfig,
        schema: Schema,
        encoder_seed: RngSeed,
    ) -> Result<Self> {
        if adapter_config.hidden_dim != encoder_config.hidden_dim {
            return Err(DamError::Config(format!(
                "adapter hidden_dim {} differs from encoder hidden_dim {}",
                adapter_config.hidden_dim, encoder_config.hidden_dim
            )));
        }
        adapter_config.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(encoder_config, &mut store, encoder_seed)?;
        Ok(DamModel {
            store,
            encoder,
            adapter_config,
            schema,
            task_adapter: None,
            debias_adapters: BTreeMap::new(),
            fusion: None,
            heads: BTreeMap::new(),
        })
    }

    /// A model with every component a recipe over `attributes` can train.
    pub fn skeleton(
        encoder_config: EncoderConfig,
        adapter_config: AdapterConfig,
        schema: Schema,
        attributes: &[String],
    ) -> Result<Self> {
        let seed = RngSeed(0);
        let mut m = DamModel::new(encoder_config, adapter_config, schema, seed)?;
        m.ensure_task_adapter(seed)?;
        m.ensure_head(TASK_HEAD_GROUP, None, seed)?;
        m.ensure_head(FUSION_TASK_HEAD_GROUP, None, seed)?;
        for a in attributes {
            m.ensure_debias_adapter(a, seed)?;
            m.ensure_head(&debias_head_group(a), Some(a), seed)?;
        }
        m.ensure_fusion(seed)?;
        Ok(m)
    }

    pub fn hidden_dim(&self) -> usize {
        self.encoder.hidden_dim()
    }

    pub fn ensure_task_adapter(&mut self, seed: RngSeed) -> Result<()> {
        if self.task_adapter.is_none() {
            let n = self.encoder.num_layers();
            self.task_adapter = Some(AdapterStack::new(
                &mut self.store,
                &self.adapter_config,
                AdapterKind::Task,
                n,
                seed,
            )?);
        }
        Ok(())
    }

    pub fn ensure_debias_adapter(&mut self, attribute: &str, seed: RngSeed) -> Result<()> {
        if !self.debias_adapters.contains_key(attribute) {
            let n = self.encoder.num_layers();
            let stack = AdapterStack::new(
                &mut self.store,
                &self.adapter_config,
                AdapterKind::Debias(attribute.to_string()),
                n,
                seed,
            )?;
            self.debias_adapters.insert(attribute.to_string(), stack);
        }
        Ok(())
    }

    pub fn ensure_fusion(&mut self, seed: RngSeed) -> Result<()> {
        if self.fusion.is_none() {
            let (hidden, layers) = (self.hidden_dim(), self.encoder.num_layers());
            self.fusion = Some(FusionStack::new(&mut self.store, hidden, layers, seed)?);
        }
        Ok(())
    }

    /// Creates the head, or re-initializes it if it already exists. For a
    /// task head pass `attribute = None`.
    pub fn ensure_head(&mut self, group: &str, attribute: Option<&str>, seed: RngSeed) -> Result<()> {
        let classes = match attribute {
            None => self.schema.num_task_classes,
            Some(a) => self.schema.attribute_classes(a)?,
        };
        match self.heads.get(group) {
            Some(h) => h.reinit(&mut self.store, seed),
            None => {
                let hidden = self.hidden_dim();
                let h = ClassifierHead::new(&mut self.store, group, hidden, classes, seed)?;
                self.heads.insert(group.to_string(), h);
            }
        }
        Ok(())
    }

    pub fn head(&self, group: &str) -> Result<&ClassifierHead> {
        self.heads
            .get(group)
            .ok_or_else(|| DamError::Plan(format!("head {group} is not registered")))
    }

    /// Composition over the task adapter and every debiasing adapter, in
    /// attribute order.
    pub fn composition(&self, mode: CompositionMode) -> Result<DamComposition> {
        let task = self
            .task_adapter
            .clone()
            .ok_or_else(|| DamError::Plan("no task adapter has been trained".into()))?;
        DamComposition::new(
            task,
            self.debias_adapters.values().cloned().collect(),
            self.fusion.clone(),
            mode,
        )
    }

    fn attachment(&self, route: &Route) -> Result<Option<Box<dyn Attachment>>> {
        Ok(match route {
            Route::Plain => None,
            Route::TaskAdapter => Some(Box::new(
                self.task_adapter
                    .clone()
                    .ok_or_else(|| DamError::Plan("no task adapter has been trained".into()))?,
            )),
            Route::DebiasAdapter(a) => Some(Box::new(self.debias_adapters.get(a).cloned().ok_or_else(
                || DamError::Plan(format!("no debiasing adapter for {a}")),
            )?)),
            Route::Fused => {
                if self.fusion.is_none() {
                    return Err(DamError::Plan("fused route requires a trained fusion layer".into()));
                }
                if self.debias_adapters.is_empty() {
                    return Err(DamError::Plan("fused route requires debiasing adapters".into()));
                }
                Some(Box::new(self.composition(CompositionMode::Fused)?))
            }
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph<f32>,
        batch: &TokenBatch,
        route: &Route,
        mode: &mut Mode<'_>,
    ) -> Result<EncodedVars> {
        let att = self.attachment(route)?;
        self.encoder.forward(g, &self.store, batch, att.as_deref(), mode)
    }

    /// Head used for task predictions on a route: the fusion-stage head for
    /// the fused route when one was trained, the task head otherwise.
    pub fn task_head_for(&self, route: &Route) -> Result<&ClassifierHead> {
        if *route == Route::Fused {
            if let Some(h) = self.heads.get(FUSION_TASK_HEAD_GROUP) {
                return Ok(h);
            }
        }
        self.head(TASK_HEAD_GROUP)
    }

    /// Pooled vectors for every example, in evaluation mode.
    pub fn embed(&self, tokens: &[Vec<usize>], route: &Route) -> Result<Array2<f32>> {
        let att = self.attachment(route)?;
        let mut out = Array2::zeros((tokens.len(), self.hidden_dim()));
        for (i, chunk) in tokens.chunks(EVAL_BATCH).enumerate() {
            let batch = TokenBatch::from_padded(chunk)?;
            let mut g = Graph::new();
            let vars = self
                .encoder
                .forward(&mut g, &self.store, &batch, att.as_deref(), &mut Mode::Eval)?;
            let start = i * EVAL_BATCH;
            out.slice_mut(ndarray::s![start..start + chunk.len(), ..])
                .assign(g.value(vars.pooled));
        }
        Ok(out)
    }

    pub fn task_logits(&self, tokens: &[Vec<usize>], route: &Route) -> Result<Array2<f32>> {
        let z = self.embed(tokens, route)?;
        self.task_head_for(route)?.logits(&self.store, &z)
    }

    pub fn task_accuracy(&self, data: &EncodedDataset, route: &Route) -> Result<f64> {
        let preds = argmax_rows(&self.task_logits(&data.tokens, route)?);
        Ok(accuracy(&preds, &data.task))
    }
}

fn check_plan(model: &DamModel, plan: &TrainPlan) -> Result<()> {
    for g in &plan.trainable_groups {
        if model.store.group(g).is_none() {
            return Err(DamError::Plan(format!("{}: unknown parameter group {g}", plan.name)));
        }
    }
    if plan.losses.is_empty() {
        return Err(DamError::Plan(format!("{}: no objectives", plan.name)));
    }
    for l in &plan.losses {
        match l {
            Objective::Task => {
                model.head(&plan.task_head)?;
            }
            Objective::Debias(cfg) => {
                cfg.validate()?;
                model.head(&debias_head_group(&cfg.attribute_id))?;
            }
        }
    }
    match &plan.route {
        Route::TaskAdapter if model.task_adapter.is_none() => {
            Err(DamError::Plan(format!("{}: task adapter missing", plan.name)))
        }
        Route::DebiasAdapter(a) if !model.debias_adapters.contains_key(a) => {
            Err(DamError::Plan(format!("{}: debiasing adapter for {a} missing", plan.name)))
        }
        Route::Fused => {
            if model.task_adapter.is_none() || model.debias_adapters.is_empty() || model.fusion.is_none() {
                Err(DamError::Plan(format!(
                    "{}: fusion stage requires trained task and debiasing adapters",
                    plan.name
                )))
            } else {
                Ok(())
            }
        }
        _ => Ok(()),
    }
}

struct ValMetrics {
    task_accuracy: Option<f64>,
    debias_loss: BTreeMap<String, f64>,
}

fn validate(model: &DamModel, plan: &TrainPlan, val: &EncodedDataset) -> Result<ValMetrics> {
    let z = model.embed(&val.tokens, &plan.route)?;
    let mut task_accuracy = None;
    let mut debias = BTreeMap::new();
    for l in &plan.losses {
        match l {
            Objective::Task => {
                let preds = model.head(&plan.task_head)?.predict(&model.store, &z)?;
                task_accuracy = Some(accuracy(&preds, &val.task));
            }
            Objective::Debias(cfg) => {
                let head = model.head(&debias_head_group(&cfg.attribute_id))?;
                let logits = head.logits(&model.store, &z)?;
                debias.insert(
                    cfg.attribute_id.clone(),
                    cross_entropy(&logits, val.attribute(&cfg.attribute_id)?)?,
                );
            }
        }
    }
    Ok(ValMetrics {
        task_accuracy,
        debias_loss: debias,
    })
}

fn selection_score(sel: &Selection, m: &ValMetrics) -> Result<Option<f64>> {
    Ok(match sel {
        Selection::BestTaskAccuracy => Some(
            m.task_accuracy
                .ok_or_else(|| DamError::Plan("task-accuracy selection without a task objective".into()))?,
        ),
        Selection::HighestAdversaryLoss(a) => Some(
            *m.debias_loss
                .get(a)
                .ok_or_else(|| DamError::Plan(format!("selection on {a} without its objective")))?,
        ),
        Selection::LastEpoch => None,
    })
}

/// Runs one training stage. Only the plan's trainable groups change; the
/// weights of the best validation epoch are kept.
pub fn train_stage(
    model: &mut DamModel,
    plan: &TrainPlan,
    train: &EncodedDataset,
    val: &EncodedDataset,
) -> Result<StageReport> {
    let started = Instant::now();
    check_plan(model, plan)?;
    if train.is_empty() || val.is_empty() {
        return Err(DamError::Data(format!("{}: empty training or validation split", plan.name)));
    }
    let h = &plan.hyper;
    if h.batch_size == 0 || h.max_epochs == 0 {
        return Err(DamError::Config(format!("{}: batch_size and max_epochs must be positive", plan.name)));
    }
    model.store.set_trainable(&plan.trainable_groups)?;
    let trainable_params = model.store.trainable_count();
    let seed = RngSeed(h.seed).derive(&plan.name);
    let mut dropout_rng = seed.derive("dropout").rng();
    let mut adam = Adam::new(h.lr);
    if let Some(lr) = h.adversary_lr {
        for l in &plan.losses {
            if let Objective::Debias(cfg) = l {
                if let Some(gi) = model.store.group_index(&debias_head_group(&cfg.attribute_id)) {
                    adam.set_group_lr(gi, lr);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best: Option<(f64, usize, Vec<ParamGroup>)> = None;
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut last_losses = LossReport::fuse(0.0, vec![]);

    for epoch in 0..h.max_epochs {
        order.shuffle(&mut seed.derive_index("shuffle", epoch as u64).rng());
        let mut sums = (0.0f64, vec![0.0f64; plan.losses.len()], 0usize);
        for chunk in order.chunks(h.batch_size) {
            let tokens: Vec<Vec<usize>> = chunk.iter().map(|&i| train.tokens[i].clone()).collect();
            let batch = TokenBatch::from_padded(&tokens)?;
            let mut g = Graph::new();
            let mut mode = Mode::Train(&mut dropout_rng);
            let enc = model.forward(&mut g, &batch, &plan.route, &mut mode)?;
            let mut task_term = None;
            let mut debias_terms = Vec::new();
            for l in &plan.losses {
                match l {
                    Objective::Task => {
                        let labels: Vec<usize> = chunk.iter().map(|&i| train.task[i]).collect();
                        let head = model.head(&plan.task_head)?;
                        task_term = Some(task_loss(&mut g, &model.store, head, enc.pooled, &labels)?);
                    }
                    Objective::Debias(cfg) => {
                        let all = train.attribute(&cfg.attribute_id)?;
                        let labels: Vec<usize> = chunk.iter().map(|&i| all[i]).collect();
                        let head = model.head(&debias_head_group(&cfg.attribute_id))?;
                        debias_terms.push(debias_loss(&mut g, &model.store, cfg, head, enc.pooled, &labels)?);
                    }
                }
            }
            let (total, report) = match task_term {
                Some(t) => fused_loss(&mut g, t, &debias_terms)?,
                None => {
                    let total = g.sum(&debias_terms)?;
                    let losses: Vec<f64> = debias_terms.iter().map(|&d| g.scalar(d) as f64).collect();
                    (total, LossReport::fuse(0.0, losses))
                }
            };
            if !report.total.is_finite() {
                return Err(DamError::Numeric(format!("{}: non-finite loss in epoch {epoch}", plan.name)));
            }
            g.backward(total)?;
            adam.step(&mut model.store, &g.param_grads());
            sums.0 += report.task_loss;
            for (s, d) in sums.1.iter_mut().zip(&report.debias_losses) {
                *s += d;
            }
            sums.2 += 1;
        }
        let nb = sums.2.max(1) as f64;
        let has_task = plan.losses.iter().any(|l| matches!(l, Objective::Task));
        let debias_means: Vec<f64> = sums.1.iter().take(plan.losses.len() - usize::from(has_task)).map(|s| s / nb).collect();
        last_losses = LossReport::fuse(sums.0 / nb, debias_means);

        let vm = validate(model, plan, val)?;
        history.push(EpochMetrics {
            epoch,
            train: last_losses.clone(),
            val_task_accuracy: vm.task_accuracy,
            val_debias_loss: vm.debias_loss.clone(),
        });
        log::info!(
            "{} epoch {epoch}: loss {:.4} val task acc {:?} val adversary loss {:?}",
            plan.name,
            last_losses.total,
            vm.task_accuracy,
            vm.debias_loss
        );
        match selection_score(&plan.selection, &vm)? {
            Some(score) => {
                if best.as_ref().map_or(true, |(b, _, _)| score > *b) {
                    best = Some((score, epoch, model.store.snapshot(&plan.trainable_groups)));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= h.patience.max(1) {
                        break;
                    }
                }
            }
            None => best = Some((0.0, epoch, Vec::new())),
        }
    }
    let best_epoch = best.as_ref().map_or(0, |b| b.1);
    if let Some((_, _, snap)) = &best {
        if !snap.is_empty() {
            model.store.restore(snap)?;
        }
    }
    model.store.freeze_all();
    Ok(StageReport {
        plan: plan.name.clone(),
        trainable_params,
        epochs_run: history.len(),
        best_epoch,
        final_losses: last_losses,
        history,
        checkpoint: None,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// encoder warm start

const PRETRAIN_GROUP: &str = "pretrain.decoder";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainObjective {
    /// Predict every token of the input from the pooled vector.
    BagOfWords,
    /// Fine-tune on the task with all encoder parameters.
    Task,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub objective: PretrainObjective,
    /// Zero leaves the encoder at its random initialization.
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            objective: PretrainObjective::BagOfWords,
            epochs: 8,
            lr: 1e-3,
            batch_size: 64,
        }
    }
}

/// Trains the encoder once before it is frozen for every recipe. Any head
/// used for this is discarded afterwards.
pub fn pretrain_encoder(
    model: &mut DamModel,
    cfg: &PretrainConfig,
    seed: u64,
    train: &EncodedDataset,
    val: &EncodedDataset,
) -> Result<Option<StageReport>> {
    if cfg.epochs == 0 {
        return Ok(None);
    }
    let report = match cfg.objective {
        PretrainObjective::Task => {
            let plan = TrainPlan {
                name: "pretrain".into(),
                trainable_groups: [ENCODER_GROUP.to_string(), PRETRAIN_GROUP.to_string()].into(),
                losses: vec![Objective::Task],
                route: Route::Plain,
                task_head: PRETRAIN_GROUP.into(),
                selection: Selection::BestTaskAccuracy,
                hyper: Hyperparams {
                    lr: cfg.lr,
                    adversary_lr: None,
                    batch_size: cfg.batch_size,
                    max_epochs: cfg.epochs,
                    patience: cfg.epochs,
                    seed,
                },
            };
            model.ensure_head(PRETRAIN_GROUP, None, RngSeed(seed).derive("pretrain"))?;
            let r = train_stage(model, &plan, train, val);
            model.heads.remove(PRETRAIN_GROUP);
            model.store.pop_group(PRETRAIN_GROUP)?;
            r?
        }
        PretrainObjective::BagOfWords => {
            let r = pretrain_bag_of_words(model, cfg, seed, train);
            if model.store.group(PRETRAIN_GROUP).is_some() {
                model.store.pop_group(PRETRAIN_GROUP)?;
            }
            r?
        }
    };
    Ok(Some(report))
}

fn pretrain_bag_of_words(
    model: &mut DamModel,
    cfg: &PretrainConfig,
    seed: u64,
    train: &EncodedDataset,
) -> Result<StageReport> {
    let started = Instant::now();
    if cfg.batch_size == 0 {
        return Err(DamError::Config("pretrain batch_size must be positive".into()));
    }
    let seed = RngSeed(seed).derive("pretrain");
    let vocab = model.encoder.config.vocab_size;
    let hidden = model.hidden_dim();
    let gi = model.store.add_group(PRETRAIN_GROUP)?;
    let w = model.store.add(
        gi,
        "weight",
        crate::compute::xavier_init(hidden, vocab, &mut seed.derive("decoder").rng()),
    );
    let b = model.store.add(gi, "bias", Array2::zeros((1, vocab)));
    model
        .store
        .set_trainable(&[ENCODER_GROUP.to_string(), PRETRAIN_GROUP.to_string()].into())?;
    let trainable_params = model.store.trainable_count();
    let mut adam = Adam::new(cfg.lr);
    let mut dropout_rng = seed.derive("dropout").rng();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed.derive_index("shuffle", epoch as u64).rng());
        let (mut sum, mut batches) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let tokens: Vec<Vec<usize>> = chunk.iter().map(|&i| train.tokens[i].clone()).collect();
            let batch = TokenBatch::from_padded(&tokens)?;
            let mut rows = Vec::new();
            let mut targets = Vec::new();
            for (bi, &len) in batch.lens.iter().enumerate() {
                for t in 1..len {
                    rows.push(bi);
                    targets.push(batch.ids[bi * batch.seq + t]);
                }
            }
            if rows.is_empty() {
                continue;
            }
            let mut g = Graph::new();
            let mut mode = Mode::Train(&mut dropout_rng);
            let enc = model.forward(&mut g, &batch, &Route::Plain, &mut mode)?;
            let z = g.select_rows(enc.pooled, rows)?;
            let (wv, bv) = (g.param(&model.store, w), g.param(&model.store, b));
            let logits = g.linear(z, wv, Some(bv))?;
            let loss = g.cross_entropy(logits, &targets)?;
            sum += g.scalar(loss) as f64;
            batches += 1;
            g.backward(loss)?;
            adam.step(&mut model.store, &g.param_grads());
        }
        let mean = sum / batches.max(1) as f64;
        log::info!("pretrain epoch {epoch}: bag-of-words loss {mean:.4}");
        history.push(EpochMetrics {
            epoch,
            train: LossReport::fuse(mean, vec![]),
            val_task_accuracy: None,
            val_debias_loss: BTreeMap::new(),
        });
    }
    model.store.freeze_all();
    let final_losses = history.last().map(|h| h.train.clone()).unwrap_or_else(|| LossReport::fuse(0.0, vec![]));
    Ok(StageReport {
        plan: "pretrain".into(),
        trainable_params,
        epochs_run: history.len(),
        best_epoch: history.len().saturating_sub(1),
        final_losses,
        history,
        checkpoint: None,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// recipes

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Recipe {
    #[serde(rename = "ft")]
    Ft,
    #[serde(rename = "ft-debias")]
    FtDebias,
    #[serde(rename = "adp")]
    Adp,
    #[serde(rename = "adp-debias")]
    AdpDebias,
    #[serde(rename = "dam")]
    Dam,
}

impl Recipe {
    pub const ALL: [Recipe; 5] = [Recipe::Ft, Recipe::FtDebias, Recipe::Adp, Recipe::AdpDebias, Recipe::Dam];

    pub fn is_debiasing(self) -> bool {
        matches!(self, Recipe::FtDebias | Recipe::AdpDebias | Recipe::Dam)
    }

    pub fn uses_adapters(self) -> bool {
        matches!(self, Recipe::Adp | Recipe::AdpDebias | Recipe::Dam)
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Recipe::Ft => "FT",
            Recipe::FtDebias => "FT-Debias",
            Recipe::Adp => "Adp",
            Recipe::AdpDebias => "Adp-Debias",
            Recipe::Dam => "DAM",
        })
    }
}

impl std::str::FromStr for Recipe {
    type Err = DamError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ft" => Ok(Recipe::Ft),
            "ft-debias" | "ft_debias" => Ok(Recipe::FtDebias),
            "adp" => Ok(Recipe::Adp),
            "adp-debias" | "adp_debias" => Ok(Recipe::AdpDebias),
            "dam" => Ok(Recipe::Dam),
            other => Err(DamError::Config(format!("unknown recipe {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Learning rate of the task adapter and of single-adapter recipes.
    pub lr_adapter: f32,
    /// Learning rate of the debiasing adapters.
    pub lr_debias_adapter: f32,
    pub lr_fusion: f32,
    /// Learning rate of full fine-tuning.
    pub lr_full: f32,
    /// Epochs of each debiasing-adapter stage.
    pub max_epochs_debias: usize,
    /// Weights kept from a debiasing-adapter stage.
    pub debias_selection: DebiasSelection,
    /// Learning rate of adversary heads; the stage's rate when unset.
    pub lr_adversary: Option<f32>,
    pub gamma: f64,
    /// Fixed epoch count for the fusion stage, keeping the last epoch. Task
    /// accuracy saturates long before the adversarial terms settle, so early
    /// stopping on it cuts debiasing short. Unset uses the shared early
    /// stopping on task accuracy.
    pub fusion_epochs: Option<usize>,
    /// Train a new task head together with the fusion layer. When false the
    /// fused route reuses the frozen task-adapter head.
    pub retrain_task_head_in_fusion: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 64,
            max_epochs: 20,
            patience: 3,
            lr_adapter: 1e-3,
            lr_debias_adapter: 1e-3,
            lr_fusion: 1e-3,
            lr_full: 1e-4,
            max_epochs_debias: 10,
            debias_selection: DebiasSelection::LastEpoch,
            lr_adversary: Some(1e-2),
            gamma: 1.0,
            fusion_epochs: Some(16),
            retrain_task_head_in_fusion: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DebiasSelection {
    LastEpoch,
    HighestAdversaryLoss,
}

impl TrainingConfig {
    fn hyper(&self, lr: f32, seed: u64) -> Hyperparams {
        Hyperparams {
            lr,
            adversary_lr: self.lr_adversary,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
        }
    }

    fn debias_objectives(&self, schema: &Schema, attributes: &[String]) -> Result<Vec<Objective>> {
        attributes
            .iter()
            .map(|a| {
                Ok(Objective::Debias(DebiasConfig {
                    attribute_id: a.clone(),
                    gamma: self.gamma,
                    num_classes: schema.attribute_classes(a)?,
                }))
            })
            .collect()
    }

    pub fn task_adapter_plan(&self, seed: u64) -> TrainPlan {
        TrainPlan {
            name: "task_adapter".into(),
            trainable_groups: [TASK_ADAPTER_GROUP.to_string(), TASK_HEAD_GROUP.to_string()].into(),
            losses: vec![Objective::Task],
            route: Route::TaskAdapter,
            task_head: TASK_HEAD_GROUP.into(),
            selection: Selection::BestTaskAccuracy,
            hyper: self.hyper(self.lr_adapter, seed),
        }
    }

    pub fn debias_adapter_plan(&self, schema: &Schema, attribute: &str, seed: u64) -> Result<TrainPlan> {
        let mut hyper = self.hyper(self.lr_debias_adapter, seed);
        hyper.max_epochs = self.max_epochs_debias;
        Ok(TrainPlan {
            name: format!("debias_adapter.{attribute}"),
            trainable_groups: [debias_adapter_group(attribute), debias_head_group(attribute)].into(),
            losses: self.debias_objectives(schema, &[attribute.to_string()])?,
            route: Route::DebiasAdapter(attribute.to_string()),
            task_head: TASK_HEAD_GROUP.into(),
            selection: match self.debias_selection {
                DebiasSelection::LastEpoch => Selection::LastEpoch,
                DebiasSelection::HighestAdversaryLoss => Selection::HighestAdversaryLoss(attribute.to_string()),
            },
            hyper,
        })
    }

    pub fn fusion_plan(&self, schema: &Schema, attributes: &[String], seed: u64) -> Result<TrainPlan> {
        let head = if self.retrain_task_head_in_fusion {
            FUSION_TASK_HEAD_GROUP
        } else {
            TASK_HEAD_GROUP
        };
        let mut groups: BTreeSet<String> = [FUSION_GROUP.to_string()].into();
        if self.retrain_task_head_in_fusion {
            groups.insert(head.to_string());
        }
        groups.extend(attributes.iter().map(|a| debias_head_group(a)));
        let mut losses = vec![Objective::Task];
        losses.extend(self.debias_objectives(schema, attributes)?);
        Ok(TrainPlan {
            name: "fusion".into(),
            trainable_groups: groups,
            losses,
            route: Route::Fused,
            task_head: head.into(),
            selection: match self.fusion_epochs {
                Some(_) => Selection::LastEpoch,
                None => Selection::BestTaskAccuracy,
            },
            hyper: Hyperparams {
                max_epochs: self.fusion_epochs.unwrap_or(self.max_epochs),
                ..self.hyper(self.lr_fusion, seed)
            },
        })
    }

    fn joint_plan(
        &self,
        name: &str,
        base: &str,
        route: Route,
        lr: f32,
        schema: &Schema,
        attributes: &[String],
        seed: u64,
    ) -> Result<TrainPlan> {
        let mut groups: BTreeSet<String> = [base.to_string(), TASK_HEAD_GROUP.to_string()].into();
        groups.extend(attributes.iter().map(|a| debias_head_group(a)));
        let mut losses = vec![Objective::Task];
        losses.extend(self.debias_objectives(schema, attributes)?);
        Ok(TrainPlan {
            name: name.into(),
            trainable_groups: groups,
            losses,
            route,
            task_head: TASK_HEAD_GROUP.into(),
            selection: Selection::BestTaskAccuracy,
            hyper: self.hyper(lr, seed),
        })
    }

    /// Ordered stage plans of a recipe.
    pub fn plans(&self, recipe: Recipe, schema: &Schema, attributes: &[String], seed: u64) -> Result<Vec<TrainPlan>> {
        if recipe.is_debiasing() && attributes.is_empty() {
            return Err(DamError::Config(format!("{recipe} needs at least one protected attribute")));
        }
        Ok(match recipe {
            Recipe::Ft => vec![self.joint_plan("ft", ENCODER_GROUP, Route::Plain, self.lr_full, schema, &[], seed)?],
            Recipe::FtDebias => vec![self.joint_plan(
                "ft_debias",
                ENCODER_GROUP,
                Route::Plain,
                self.lr_full,
                schema,
                attributes,
                seed,
            )?],
            Recipe::Adp => vec![self.task_adapter_plan(seed)],
            Recipe::AdpDebias => vec![self.joint_plan(
                "adp_debias",
                TASK_ADAPTER_GROUP,
                Route::TaskAdapter,
                self.lr_adapter,
                schema,
                attributes,
                seed,
            )?],
            Recipe::Dam => {
                let mut v = vec![self.task_adapter_plan(seed)];
                for a in attributes {
                    v.push(self.debias_adapter_plan(schema, a, seed)?);
                }
                v.push(self.fusion_plan(schema, attributes, seed)?);
                v
            }
        })
    }
}

/// Creates the components a plan needs, drawing fresh heads for it.
pub fn prepare_stage(model: &mut DamModel, plan: &TrainPlan) -> Result<()> {
    let seed = RngSeed(plan.hyper.seed).derive(&plan.name);
    match &plan.route {
        Route::Plain => {}
        Route::TaskAdapter => model.ensure_task_adapter(seed)?,
        Route::DebiasAdapter(a) => model.ensure_debias_adapter(a, seed)?,
        Route::Fused => model.ensure_fusion(seed)?,
    }
    for l in &plan.losses {
        match l {
            Objective::Task => {
                if plan.trainable_groups.contains(&plan.task_head) || !model.heads.contains_key(&plan.task_head) {
                    model.ensure_head(&plan.task_head, None, seed)?;
                }
            }
            Objective::Debias(cfg) => {
                model.ensure_head(&debias_head_group(&cfg.attribute_id), Some(&cfg.attribute_id), seed)?
            }
        }
    }
    Ok(())
}

/// Runs every stage of a recipe on `model`, in order.
pub fn run_recipe(
    model: &mut DamModel,
    recipe: Recipe,
    attributes: &[String],
    cfg: &TrainingConfig,
    seed: u64,
    train: &EncodedDataset,
    val: &EncodedDataset,
) -> Result<Vec<StageReport>> {
    let plans = cfg.plans(recipe, &model.schema, attributes, seed)?;
    let mut reports = Vec::with_capacity(plans.len());
    for plan in &plans {
        prepare_stage(model, plan)?;
        reports.push(train_stage(model, plan, train, val)?);
    }
    Ok(reports)
}

/// Union of the groups trained by a recipe, and their parameter count.
pub fn recipe_trainable_params(
    model: &DamModel,
    cfg: &TrainingConfig,
    recipe: Recipe,
    attributes: &[String],
) -> Result<usize> {
    let mut groups = BTreeSet::new();
    for p in cfg.plans(recipe, &model.schema, attributes, 0)? {
        groups.extend(p.trainable_groups);
    }
    for g in &groups {
        if model.store.group(g).is_none() {
            return Err(DamError::Plan(format!("group {g} is not registered")));
        }
    }
    Ok(model.store.count_groups(&groups))
}
