//! Checkpoint bundles and embedding dumps.
//!
//! A bundle is a directory holding `manifest.json` and one weight blob per
//! (component, attribute, layer). Blobs are little-endian: magic `DAMW`,
//! u32 version, u32 tensor count, then per tensor a u32-length-prefixed
//! UTF-8 name, u32 rows, u32 cols and rows × cols f32 values.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{debias_adapter_group, AdapterConfig, FUSION_GROUP, TASK_ADAPTER_GROUP};
use crate::compute::{NamedTensor, RngSeed};
use crate::data::Schema;
use crate::encoder::{EncoderConfig, ENCODER_GROUP};
use crate::error::{DamError, Result};
use crate::eval::Embedded;
use crate::objectives::{debias_head_group, FUSION_TASK_HEAD_GROUP, TASK_HEAD_GROUP};
use crate::training::DamModel;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const MAGIC: &[u8; 4] = b"DAMW";

/// Hex SHA-256 of a configuration's canonical text.
pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Component {
    Encoder,
    TaskAdapter,
    DebiasAdapter { attribute: String },
    Fusion,
    Head { group: String },
}

impl Component {
    pub fn group_name(&self) -> String {
        match self {
            Component::Encoder => ENCODER_GROUP.into(),
            Component::TaskAdapter => TASK_ADAPTER_GROUP.into(),
            Component::DebiasAdapter { attribute } => debias_adapter_group(attribute),
            Component::Fusion => FUSION_GROUP.into(),
            Component::Head { group } => group.clone(),
        }
    }

    pub fn attribute(&self) -> Option<&str> {
        match self {
            Component::DebiasAdapter { attribute } => Some(attribute),
            _ => None,
        }
    }

    fn dir_name(&self) -> String {
        match self {
            Component::Encoder => "encoder".into(),
            Component::TaskAdapter => "task_adapter".into(),
            Component::DebiasAdapter { attribute } => format!("debias_adapter.{attribute}"),
            Component::Fusion => "fusion".into(),
            Component::Head { group } => group.clone(),
        }
    }

    /// Every component of the model, in a stable order.
    pub fn all_of(model: &DamModel) -> Vec<Component> {
        let mut v = vec![Component::Encoder];
        if model.task_adapter.is_some() {
            v.push(Component::TaskAdapter);
        }
        for a in model.debias_adapters.keys() {
            v.push(Component::DebiasAdapter { attribute: a.clone() });
        }
        if model.fusion.is_some() {
            v.push(Component::Fusion);
        }
        for g in model.heads.keys() {
            v.push(Component::Head { group: g.clone() });
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    /// Transformer layer of the blob; `None` for weights shared by all layers.
    pub layer: Option<usize>,
    pub path: String,
    pub tensors: Vec<TensorShape>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentEntry {
    pub component: Component,
    pub blobs: Vec<BlobEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub schema: Schema,
    pub encoder_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub precision: String,
    pub config_hash: String,
    pub num_layers: usize,
    pub meta: ModelMeta,
    pub components: Vec<ComponentEntry>,
}

impl Manifest {
    pub fn has(&self, c: &Component) -> bool {
        self.components.iter().any(|e| &e.component == c)
    }
}

fn layer_of(name: &str) -> Option<usize> {
    name.strip_prefix("layer")?.split('.').next()?.parse().ok()
}

fn write_blob(path: &Path, tensors: &[&NamedTensor]) -> Result<Vec<TensorShape>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut shapes = Vec::with_capacity(tensors.len());
    for t in tensors {
        let (rows, cols) = t.value.dim();
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(rows as u32).to_le_bytes());
        buf.extend_from_slice(&(cols as u32).to_le_bytes());
        for v in t.value.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        shapes.push(TensorShape {
            name: t.name.clone(),
            rows,
            cols,
        });
    }
    fs::write(path, buf).map_err(|e| DamError::io(path, e))?;
    Ok(shapes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(DamError::Format(format!("{}: truncated blob", self.path.display())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
}

pub fn read_blob(path: &Path) -> Result<Vec<NamedTensor>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => DamError::MissingCheckpoint(format!("{} not found", path.display())),
            _ => DamError::io(path, e),
        })?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if c.take(4)? != MAGIC {
        return Err(DamError::Format(format!("{}: not a weight blob", path.display())));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(DamError::Format(format!(
            "{}: format version {version}, expected {FORMAT_VERSION}",
            path.display()
        )));
    }
    let n = c.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| DamError::Format(format!("{}: tensor name is not UTF-8", path.display())))?;
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let raw = c.take(rows * cols * 4)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")))
            .collect();
        out.push(NamedTensor {
            name,
            value: Array2::from_shape_vec((rows, cols), values).expect("declared shape"),
        });
    }
    if c.pos != bytes.len() {
        return Err(DamError::Format(format!("{}: trailing bytes", path.display())));
    }
    Ok(out)
}

/// Writes the given components of `model` as a bundle in `dir`.
pub fn save_bundle(
    model: &DamModel,
    components: &[Component],
    dir: &Path,
    config_hash: &str,
    encoder_seed: u64,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| DamError::io(dir, e))?;
    let mut entries = Vec::new();
    for comp in components {
        let group = model
            .store
            .group(&comp.group_name())
            .ok_or_else(|| DamError::Plan(format!("model has no {} component", comp.group_name())))?;
        let mut by_layer: BTreeMap<Option<usize>, Vec<&NamedTensor>> = BTreeMap::new();
        for t in &group.tensors {
            by_layer.entry(layer_of(&t.name)).or_default().push(t);
        }
        let sub = dir.join(comp.dir_name());
        fs::create_dir_all(&sub).map_err(|e| DamError::io(&sub, e))?;
        let mut blobs = Vec::new();
        for (layer, tensors) in by_layer {
            let file = match layer {
                Some(l) => format!("layer{l}.bin"),
                None => "shared.bin".to_string(),
            };
            let rel = format!("{}/{file}", comp.dir_name());
            let tensors = write_blob(&dir.join(&rel), &tensors)?;
            blobs.push(BlobEntry {
                layer,
                path: rel,
                tensors,
            });
        }
        entries.push(ComponentEntry {
            component: comp.clone(),
            blobs,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        precision: "f32-le".into(),
        config_hash: config_hash.to_string(),
        num_layers: model.encoder.num_layers(),
        meta: ModelMeta {
            encoder: model.encoder.config.clone(),
            adapter: model.adapter_config.clone(),
            schema: model.schema.clone(),
            encoder_seed,
        },
        components: entries,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| DamError::Format(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| DamError::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            DamError::MissingCheckpoint(format!("no checkpoint bundle at {}", dir.display()))
        }
        _ => DamError::io(&path, e),
    })?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| DamError::Format(format!("{}: {e}", path.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(DamError::Format(format!(
            "{}: format version {}, expected {FORMAT_VERSION}",
            path.display(),
            m.format_version
        )));
    }
    Ok(m)
}

/// Loads every component of a bundle into `model`, creating adapters,
/// fusion layers and heads that do not exist yet.
pub fn load_bundle(model: &mut DamModel, dir: &Path) -> Result<Manifest> {
    let manifest = read_manifest(dir)?;
    if manifest.num_layers != model.encoder.num_layers() {
        return Err(DamError::Format(format!(
            "bundle has {} layers, model {}",
            manifest.num_layers,
            model.encoder.num_layers()
        )));
    }
    for entry in &manifest.components {
        load_component(model, dir, entry)?;
    }
    Ok(manifest)
}

/// Loads a single component of a bundle.
pub fn load_component(model: &mut DamModel, dir: &Path, entry: &ComponentEntry) -> Result<()> {
    let seed = RngSeed(0);
    match &entry.component {
        Component::Encoder => {}
        Component::TaskAdapter => model.ensure_task_adapter(seed)?,
        Component::DebiasAdapter { attribute } => model.ensure_debias_adapter(attribute, seed)?,
        Component::Fusion => model.ensure_fusion(seed)?,
        Component::Head { group } => {
            if !model.heads.contains_key(group) {
                let attribute = debias_attribute_of_head(group);
                model.ensure_head(group, attribute.as_deref(), seed)?;
            }
        }
    }
    let group_name = entry.component.group_name();
    for blob in &entry.blobs {
        let tensors = read_blob(&dir.join(&blob.path))?;
        let group = model
            .store
            .group_mut(&group_name)
            .ok_or_else(|| DamError::Format(format!("no group {group_name}")))?;
        for t in tensors {
            let slot = group
                .tensors
                .iter_mut()
                .find(|s| s.name == t.name)
                .ok_or_else(|| DamError::Format(format!("{group_name} has no tensor {}", t.name)))?;
            if slot.value.dim() != t.value.dim() {
                return Err(DamError::Format(format!(
                    "{group_name}.{}: stored shape {:?}, model shape {:?}",
                    t.name,
                    t.value.dim(),
                    slot.value.dim()
                )));
            }
            slot.value = t.value;
        }
    }
    Ok(())
}

fn debias_attribute_of_head(group: &str) -> Option<String> {
    if group == TASK_HEAD_GROUP || group == FUSION_TASK_HEAD_GROUP {
        return None;
    }
    group.strip_prefix(debias_head_group("").as_str()).map(str::to_string)
}

/// Fresh model with the encoder drawn from the manifest's seed, before any
/// weights are loaded.
pub fn model_from_manifest(manifest: &Manifest) -> Result<DamModel> {
    let m = &manifest.meta;
    DamModel::new(
        m.encoder.clone(),
        m.adapter.clone(),
        m.schema.clone(),
        RngSeed(m.encoder_seed),
    )
}

/// Loads bundles in order into one model built from the first manifest.
pub fn load_model(dirs: &[PathBuf]) -> Result<DamModel> {
    let first = dirs
        .first()
        .ok_or_else(|| DamError::MissingCheckpoint("no bundle given".into()))?;
    let manifest = read_manifest(first)?;
    let mut model = model_from_manifest(&manifest)?;
    for d in dirs {
        load_bundle(&mut model, d)?;
    }
    Ok(model)
}

/// Writes pooled vectors and labels to one blob: `z`, `task` and
/// `attribute.{name}` tensors (labels as single-column f32).
pub fn save_embeddings(path: &Path, emb: &Embedded) -> Result<()> {
    let n = emb.len();
    let col = |v: &[usize]| Array2::from_shape_fn((n, 1), |(i, _)| v[i] as f32);
    let mut tensors = vec![
        NamedTensor {
            name: "z".into(),
            value: emb.z.clone(),
        },
        NamedTensor {
            name: "task".into(),
            value: col(&emb.task),
        },
    ];
    for (a, v) in &emb.attributes {
        tensors.push(NamedTensor {
            name: format!("attribute.{a}"),
            value: col(v),
        });
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| DamError::io(parent, e))?;
    }
    write_blob(path, &tensors.iter().collect::<Vec<_>>())?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<Embedded> {
    let mut z = None;
    let mut task = None;
    let mut attributes = BTreeMap::new();
    let labels = |t: &NamedTensor| t.value.iter().map(|&v| v as usize).collect::<Vec<_>>();
    for t in read_blob(path)? {
        match t.name.as_str() {
            "z" => z = Some(t.value),
            "task" => task = Some(labels(&t)),
            other => match other.strip_prefix("attribute.") {
                Some(a) => {
                    attributes.insert(a.to_string(), labels(&t));
                }
                None => return Err(DamError::Format(format!("{}: unexpected tensor {other}", path.display()))),
            },
        }
    }
    let (z, task) = match (z, task) {
        (Some(z), Some(t)) => (z, t),
        _ => return Err(DamError::Format(format!("{}: missing z or task tensor", path.display()))),
    };
    Ok(Embedded { z, task, attributes })
}
