//! Bottleneck adapters, the attention fusion layer, and their composition
//! into a model that can switch debiasing on and off without retraining.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::compute::{dropout, normal_init, xavier_init, Graph, Mode, ParamId, ParamStore, RngSeed, Var};
use crate::encoder::{Attachment, StreamShape};
use crate::error::{DamError, Result};

pub const TASK_ADAPTER_GROUP: &str = "adapter.task";
pub const FUSION_GROUP: &str = "fusion";

pub fn debias_adapter_group(attribute: &str) -> String {
    format!("adapter.debias.{attribute}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub hidden_dim: usize,
    /// Bottleneck width is `hidden_dim / reduction_factor`.
    pub reduction_factor: usize,
    pub dropout_p: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            hidden_dim: 64,
            reduction_factor: 4,
            dropout_p: 0.1,
        }
    }
}

impl AdapterConfig {
    pub const REDUCTION_FACTORS: [usize; 5] = [1, 2, 4, 8, 16];

    pub fn validate(&self) -> Result<()> {
        if !Self::REDUCTION_FACTORS.contains(&self.reduction_factor) {
            return Err(DamError::Config(format!(
                "reduction_factor must be one of {:?}, got {}",
                Self::REDUCTION_FACTORS,
                self.reduction_factor
            )));
        }
        if self.hidden_dim == 0 || self.bottleneck_dim() == 0 {
            return Err(DamError::Config(format!(
                "hidden_dim {} with reduction {} leaves an empty bottleneck",
                self.hidden_dim, self.reduction_factor
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(DamError::Config(format!("adapter dropout_p {} not in [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.hidden_dim / self.reduction_factor
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AdapterKind {
    Task,
    Debias(String),
}

impl AdapterKind {
    pub fn group_name(&self) -> String {
        match self {
            AdapterKind::Task => TASK_ADAPTER_GROUP.to_string(),
            AdapterKind::Debias(a) => debias_adapter_group(a),
        }
    }

    pub fn attribute(&self) -> Option<&str> {
        match self {
            AdapterKind::Task => None,
            AdapterKind::Debias(a) => Some(a),
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdapterKind::Task => write!(f, "task"),
            AdapterKind::Debias(a) => write!(f, "debias:{a}"),
        }
    }
}

/// One bottleneck adapter: `u + up(tanh(down(u)))`.
#[derive(Clone, Debug)]
pub struct AdapterModule {
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub up_w: ParamId,
    pub up_b: ParamId,
}

impl AdapterModule {
    pub fn forward(
        &self,
        g: &mut Graph<f32>,
        store: &ParamStore,
        u: Var,
        dropout_p: f64,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let width = store.get(self.down_w).nrows();
        if g.value(u).ncols() != width {
            return Err(DamError::Shape(format!(
                "adapter expects width {width}, got {}",
                g.value(u).ncols()
            )));
        }
        let (dw, db) = (g.param(store, self.down_w), g.param(store, self.down_b));
        let (uw, ub) = (g.param(store, self.up_w), g.param(store, self.up_b));
        let h = g.linear(u, dw, Some(db))?;
        let h = g.tanh(h);
        let d = g.linear(h, uw, Some(ub))?;
        let d = dropout(g, d, dropout_p, mode);
        g.add(u, d)
    }
}

/// Applies an adapter to a materialized `(rows, hidden)` matrix.
pub fn adapter_forward(store: &ParamStore, adapter: &AdapterModule, u: &Array2<f32>) -> Result<Array2<f32>> {
    let mut g = Graph::new();
    let x = g.input(u.clone());
    let y = adapter.forward(&mut g, store, x, 0.0, &mut Mode::Eval)?;
    Ok(g.value(y).clone())
}

/// The adapters of one kind, one per encoder layer, in their own parameter
/// group.
#[derive(Clone, Debug)]
pub struct AdapterStack {
    pub kind: AdapterKind,
    pub config: AdapterConfig,
    pub layers: Vec<AdapterModule>,
}

impl AdapterStack {
    /// Fresh adapters with a zero up-projection, so the stack starts as the
    /// identity.
    pub fn new(
        store: &mut ParamStore,
        config: &AdapterConfig,
        kind: AdapterKind,
        num_layers: usize,
        seed: RngSeed,
    ) -> Result<Self> {
        config.validate()?;
        let group = kind.group_name();
        let gi = store.add_group(&group)?;
        let mut rng = seed.derive(&group).rng();
        let (h, b) = (config.hidden_dim, config.bottleneck_dim());
        let layers = (0..num_layers)
            .map(|l| AdapterModule {
                down_w: store.add(gi, &format!("layer{l}.down.weight"), xavier_init(h, b, &mut rng)),
                down_b: store.add(gi, &format!("layer{l}.down.bias"), Array2::zeros((1, b))),
                up_w: store.add(gi, &format!("layer{l}.up.weight"), Array2::zeros((b, h))),
                up_b: store.add(gi, &format!("layer{l}.up.bias"), Array2::zeros((1, h))),
            })
            .collect();
        Ok(AdapterStack {
            kind,
            config: config.clone(),
            layers,
        })
    }

    pub fn group_name(&self) -> String {
        self.kind.group_name()
    }

    pub fn layer(&self, l: usize) -> Result<&AdapterModule> {
        self.layers
            .get(l)
            .ok_or_else(|| DamError::Composition(format!("{} adapter has no layer {l}", self.kind)))
    }
}

impl Attachment for AdapterStack {
    fn attach(
        &self,
        g: &mut Graph<f32>,
        store: &ParamStore,
        layer: usize,
        u: Var,
        _shape: StreamShape,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        self.layer(layer)?
            .forward(g, store, u, self.config.dropout_p, mode)
    }
}

/// Single-head multiplicative attention over adapter outputs. The block
/// output `u` is the query; the adapter outputs are keys and values.
#[derive(Clone, Debug)]
pub struct FusionModule {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

impl FusionModule {
    /// Returns the fused output and the `(rows, adapters)` attention weights.
    pub fn forward(
        &self,
        g: &mut Graph<f32>,
        store: &ParamStore,
        u: Var,
        adapter_outputs: &[Var],
    ) -> Result<(Var, Var)> {
        if adapter_outputs.is_empty() {
            return Err(DamError::Composition("fusion over an empty adapter list".into()));
        }
        let width = store.get(self.query).nrows();
        for &v in std::iter::once(&u).chain(adapter_outputs) {
            if g.value(v).ncols() != width {
                return Err(DamError::Shape(format!(
                    "fusion expects width {width}, got {}",
                    g.value(v).ncols()
                )));
            }
        }
        let (wq, wk, wv) = (
            g.param(store, self.query),
            g.param(store, self.key),
            g.param(store, self.value),
        );
        let q = g.matmul(u, wq)?;
        let mut scores = Vec::with_capacity(adapter_outputs.len());
        let mut values = Vec::with_capacity(adapter_outputs.len());
        for &v in adapter_outputs {
            let k = g.matmul(v, wk)?;
            scores.push(g.row_dot(q, k)?);
            values.push(g.matmul(v, wv)?);
        }
        let scores = g.concat_cols(&scores)?;
        let weights = g.softmax_rows(scores);
        let out = g.mix_rows(weights, &values)?;
        Ok((out, weights))
    }
}

/// Per-position attention weights of one fusion layer, `(rows, adapters)`.
pub type AttentionRecord = Array2<f32>;

/// Materialized fusion: returns the fused matrix and the attention weights.
pub fn fusion_forward(
    store: &ParamStore,
    fusion: &FusionModule,
    u: &Array2<f32>,
    adapter_outputs: &[Array2<f32>],
) -> Result<(Array2<f32>, AttentionRecord)> {
    let mut g = Graph::new();
    let uv = g.input(u.clone());
    let outs: Vec<Var> = adapter_outputs.iter().map(|a| g.input(a.clone())).collect();
    let (o, w) = fusion.forward(&mut g, store, uv, &outs)?;
    Ok((g.value(o).clone(), g.value(w).clone()))
}

/// One fusion module per encoder layer.
#[derive(Clone, Debug)]
pub struct FusionStack {
    pub layers: Vec<FusionModule>,
}

impl FusionStack {
    /// Query and key start as small random projections, value as the
    /// identity.
    pub fn new(store: &mut ParamStore, hidden_dim: usize, num_layers: usize, seed: RngSeed) -> Result<Self> {
        let gi = store.add_group(FUSION_GROUP)?;
        let mut rng = seed.derive(FUSION_GROUP).rng();
        let layers = (0..num_layers)
            .map(|l| FusionModule {
                query: store.add(gi, &format!("layer{l}.query"), normal_init(hidden_dim, hidden_dim, 0.02, &mut rng)),
                key: store.add(gi, &format!("layer{l}.key"), normal_init(hidden_dim, hidden_dim, 0.02, &mut rng)),
                value: store.add(gi, &format!("layer{l}.value"), Array2::eye(hidden_dim)),
            })
            .collect();
        Ok(FusionStack { layers })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionMode {
    TaskOnly,
    Fused,
}

impl std::str::FromStr for CompositionMode {
    type Err = DamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task_only" | "task-only" => Ok(CompositionMode::TaskOnly),
            "fused" => Ok(CompositionMode::Fused),
            other => Err(DamError::Config(format!("unknown mode {other:?}"))),
        }
    }
}

impl fmt::Display for CompositionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CompositionMode::TaskOnly => "task_only",
            CompositionMode::Fused => "fused",
        })
    }
}

/// Task adapter, debiasing adapters and optional fusion. The mode only
/// selects the route through them; it never touches parameters.
#[derive(Debug)]
pub struct DamComposition {
    pub task: AdapterStack,
    pub debias: Vec<AdapterStack>,
    pub fusion: Option<FusionStack>,
    pub mode: CompositionMode,
    recorded: RefCell<Vec<Var>>,
}

impl Clone for DamComposition {
    fn clone(&self) -> Self {
        DamComposition {
            task: self.task.clone(),
            debias: self.debias.clone(),
            fusion: self.fusion.clone(),
            mode: self.mode,
            recorded: RefCell::new(Vec::new()),
        }
    }
}

impl DamComposition {
    pub fn new(
        task: AdapterStack,
        debias: Vec<AdapterStack>,
        fusion: Option<FusionStack>,
        mode: CompositionMode,
    ) -> Result<Self> {
        if task.kind != AdapterKind::Task {
            return Err(DamError::Composition(format!("{} adapter used as task adapter", task.kind)));
        }
        let mut seen = BTreeSet::new();
        for d in &debias {
            match d.kind.attribute() {
                Some(a) if seen.insert(a.to_string()) => {}
                Some(a) => {
                    return Err(DamError::Composition(format!("duplicate debiasing adapter for {a}")))
                }
                None => return Err(DamError::Composition("task adapter listed as debiasing adapter".into())),
            }
            if d.layers.len() != task.layers.len() {
                return Err(DamError::Composition(format!(
                    "{} adapter has {} layers, task adapter {}",
                    d.kind,
                    d.layers.len(),
                    task.layers.len()
                )));
            }
        }
        if let Some(f) = &fusion {
            if f.layers.len() != task.layers.len() {
                return Err(DamError::Composition(format!(
                    "fusion has {} layers, adapters {}",
                    f.layers.len(),
                    task.layers.len()
                )));
            }
        }
        let c = DamComposition {
            task,
            debias,
            fusion,
            mode,
            recorded: RefCell::new(Vec::new()),
        };
        c.check_mode(mode)?;
        Ok(c)
    }

    fn check_mode(&self, mode: CompositionMode) -> Result<()> {
        if mode == CompositionMode::Fused && self.fusion.is_none() {
            return Err(DamError::Composition("fused mode requires a fusion module".into()));
        }
        Ok(())
    }

    pub fn set_mode(&mut self, mode: CompositionMode) -> Result<()> {
        self.check_mode(mode)?;
        self.mode = mode;
        Ok(())
    }

    pub fn with_mode(&self, mode: CompositionMode) -> Result<Self> {
        let mut c = self.clone();
        c.set_mode(mode)?;
        Ok(c)
    }

    pub fn attributes(&self) -> Vec<String> {
        self.debias
            .iter()
            .filter_map(|d| d.kind.attribute().map(str::to_string))
            .collect()
    }

    /// Adapter labels in fusion order: task first, then debiasing adapters.
    pub fn adapter_labels(&self) -> Vec<String> {
        std::iter::once(&self.task)
            .chain(&self.debias)
            .map(|a| a.kind.to_string())
            .collect()
    }

    /// Clears and returns the attention-weight nodes recorded by the last
    /// fused forward pass, one per layer.
    pub fn take_recorded(&self) -> Vec<Var> {
        std::mem::take(&mut *self.recorded.borrow_mut())
    }
}

impl Attachment for DamComposition {
    fn attach(
        &self,
        g: &mut Graph<f32>,
        store: &ParamStore,
        layer: usize,
        u: Var,
        shape: StreamShape,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        match self.mode {
            CompositionMode::TaskOnly => self.task.attach(g, store, layer, u, shape, mode),
            CompositionMode::Fused => {
                let fusion = self
                    .fusion
                    .as_ref()
                    .ok_or_else(|| DamError::Composition("fused mode requires a fusion module".into()))?;
                let module = fusion
                    .layers
                    .get(layer)
                    .ok_or_else(|| DamError::Composition(format!("fusion has no layer {layer}")))?;
                let mut outs = Vec::with_capacity(1 + self.debias.len());
                for a in std::iter::once(&self.task).chain(&self.debias) {
                    outs.push(a.attach(g, store, layer, u, shape, mode)?);
                }
                let (out, weights) = module.forward(g, store, u, &outs)?;
                if layer == 0 {
                    self.recorded.borrow_mut().clear();
                }
                self.recorded.borrow_mut().push(weights);
                Ok(out)
            }
        }
    }
}
