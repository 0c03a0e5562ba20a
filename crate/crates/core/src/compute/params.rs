use std::collections::BTreeSet;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DamError, Result};

/// Address of one tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub group: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Array2<f32>,
}

/// A named set of tensors that is either trained or frozen as a unit.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub tensors: Vec<NamedTensor>,
    pub trainable: bool,
}

impl ParamGroup {
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }
}

/// Owner of every parameter of a model. Each tensor belongs to exactly one
/// group. Only the newest group can be removed, so `ParamId`s of the
/// remaining groups stay valid.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    groups: Vec<ParamGroup>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_group(&mut self, name: &str) -> Result<usize> {
        if self.group_index(name).is_some() {
            return Err(DamError::Config(format!("parameter group {name} already exists")));
        }
        self.groups.push(ParamGroup {
            name: name.to_string(),
            tensors: Vec::new(),
            trainable: false,
        });
        Ok(self.groups.len() - 1)
    }

    /// Removes the most recently added group, which must be `name`.
    pub fn pop_group(&mut self, name: &str) -> Result<ParamGroup> {
        match self.groups.last() {
            Some(g) if g.name == name => Ok(self.groups.pop().expect("non-empty")),
            _ => Err(DamError::Plan(format!("{name} is not the newest parameter group"))),
        }
    }

    pub fn add(&mut self, group: usize, name: &str, value: Array2<f32>) -> ParamId {
        let g = &mut self.groups[group];
        g.tensors.push(NamedTensor {
            name: name.to_string(),
            value,
        });
        ParamId {
            group,
            index: g.tensors.len() - 1,
        }
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut ParamGroup> {
        self.groups.iter_mut().find(|g| g.name == name)
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn get(&self, id: ParamId) -> &Array2<f32> {
        &self.groups[id.group].tensors[id.index].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f32> {
        &mut self.groups[id.group].tensors[id.index].value
    }

    pub fn name_of(&self, id: ParamId) -> String {
        let g = &self.groups[id.group];
        format!("{}/{}", g.name, g.tensors[id.index].name)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.groups[id.group].trainable
    }

    /// Marks exactly the named groups trainable and freezes all others.
    pub fn set_trainable(&mut self, names: &BTreeSet<String>) -> Result<()> {
        for n in names {
            if self.group_index(n).is_none() {
                return Err(DamError::Plan(format!("unknown parameter group {n}")));
            }
        }
        for g in &mut self.groups {
            g.trainable = names.contains(&g.name);
        }
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for g in &mut self.groups {
            g.trainable = false;
        }
    }

    pub fn trainable_names(&self) -> BTreeSet<String> {
        self.groups
            .iter()
            .filter(|g| g.trainable)
            .map(|g| g.name.clone())
            .collect()
    }

    /// Element count over the trainable groups.
    pub fn trainable_count(&self) -> usize {
        self.groups.iter().filter(|g| g.trainable).map(|g| g.numel()).sum()
    }

    pub fn count_groups<'a>(&self, names: impl IntoIterator<Item = &'a String>) -> usize {
        names
            .into_iter()
            .filter_map(|n| self.group(n))
            .map(|g| g.numel())
            .sum()
    }

    /// Copies of the tensors of the named groups.
    pub fn snapshot(&self, names: &BTreeSet<String>) -> Vec<ParamGroup> {
        self.groups
            .iter()
            .filter(|g| names.contains(&g.name))
            .cloned()
            .collect()
    }

    /// Writes back tensors from a snapshot, keeping trainability flags.
    pub fn restore(&mut self, snapshot: &[ParamGroup]) -> Result<()> {
        for saved in snapshot {
            let g = self
                .group_mut(&saved.name)
                .ok_or_else(|| DamError::Plan(format!("unknown parameter group {}", saved.name)))?;
            if g.tensors.len() != saved.tensors.len() {
                return Err(DamError::Shape(format!("group {} layout changed", saved.name)));
            }
            for (dst, src) in g.tensors.iter_mut().zip(&saved.tensors) {
                if dst.value.dim() != src.value.dim() {
                    return Err(DamError::Shape(format!(
                        "{}/{}: {:?} vs {:?}",
                        saved.name,
                        src.name,
                        dst.value.dim(),
                        src.value.dim()
                    )));
                }
                dst.value.assign(&src.value);
            }
        }
        Ok(())
    }
}

pub fn normal_init<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f32> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng) as f32)
}

/// Glorot-normal initialization for a `(fan_in, fan_out)` weight.
pub fn xavier_init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Array2<f32> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    normal_init(fan_in, fan_out, std, rng)
}
