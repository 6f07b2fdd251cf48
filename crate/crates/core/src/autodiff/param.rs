use std::fmt;

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Parameter groups. Every learnable tensor belongs to exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    /// Shared convolutional trunk.
    Enc,
    /// Identity distilling branch.
    BranchT,
    /// Identity dispelling branch.
    BranchP,
    /// Identity classifier on the distilled feature.
    ClsT,
    /// Adversarial identity classifier on the dispelled feature.
    ClsP,
    /// Decoder.
    Dec,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::Enc,
        Group::BranchT,
        Group::BranchP,
        Group::ClsT,
        Group::ClsP,
        Group::Dec,
    ];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Group> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Enc => "ENC",
            Group::BranchT => "BRANCH_T",
            Group::BranchP => "BRANCH_P",
            Group::ClsT => "CLS_T",
            Group::ClsP => "CLS_P",
            Group::Dec => "DEC",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Small bitset over [`Group`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct GroupSet(u8);

impl GroupSet {
    pub const fn empty() -> Self {
        GroupSet(0)
    }

    pub const fn all() -> Self {
        GroupSet(0b11_1111)
    }

    pub fn of(groups: &[Group]) -> Self {
        groups.iter().fold(Self::empty(), |s, &g| s.with(g))
    }

    pub const fn with(self, g: Group) -> Self {
        GroupSet(self.0 | (1 << g as u8))
    }

    pub const fn contains(self, g: Group) -> bool {
        self.0 & (1 << g as u8) != 0
    }

    pub fn iter(self) -> impl Iterator<Item = Group> {
        Group::ALL.into_iter().filter(move |&g| self.contains(g))
    }
}

impl FromIterator<Group> for GroupSet {
    fn from_iter<I: IntoIterator<Item = Group>>(iter: I) -> Self {
        iter.into_iter().fold(Self::empty(), |s, g| s.with(g))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar> {
    name: String,
    group: Group,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn group(&self) -> Group {
        self.group
    }
}

/// Owns every learnable tensor of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor<T>) -> ParamId {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Parameter {
            name: name.into(),
            group,
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, group: Group) -> impl Iterator<Item = ParamId> + '_ {
        self.iter().filter(move |(_, p)| p.group == group).map(|(id, _)| id)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds a gradient set into the stored gradients.
    pub fn accumulate(&mut self, grads: &GradSet<T>) {
        for (id, g) in grads.iter() {
            self.params[id.0].grad.add_assign(g);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Plain gradient step `value -= lr * grad`.
    pub fn sgd_step(&mut self, lr: T) {
        for p in &mut self.params {
            for (v, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *v = *v - lr * g;
            }
        }
    }

    /// Replaces a parameter value, keeping its shape contract.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("{}: {:?} vs {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
        }
    }
}

/// Sparse per-parameter gradients produced by one backward call.
#[derive(Debug, Clone)]
pub struct GradSet<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> GradSet<T> {
    pub fn new(n_params: usize) -> Self {
        Self {
            grads: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub(crate) fn add(&mut self, id: ParamId, g: Tensor<T>) {
        if id.0 >= self.grads.len() {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Merges another set into this one.
    pub fn merge(&mut self, other: GradSet<T>) {
        for (i, g) in other.grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_set_membership() {
        let s = GroupSet::of(&[Group::Enc, Group::Dec]);
        assert!(s.contains(Group::Enc));
        assert!(s.contains(Group::Dec));
        assert!(!s.contains(Group::ClsP));
        assert_eq!(s.iter().count(), 2);
        assert_eq!(GroupSet::all().iter().count(), 6);
    }

    #[test]
    fn group_tags_round_trip() {
        for g in Group::ALL {
            assert_eq!(Group::from_tag(g.tag()), Some(g));
        }
        assert_eq!(Group::from_tag(6), None);
    }

    #[test]
    fn sgd_with_zero_rate_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Group::Enc, Tensor::from_vec(vec![1.0, 2.0]));
        store.get_mut(id).grad = Tensor::from_vec(vec![5.0, -3.0]);
        store.sgd_step(0.0);
        assert_eq!(store.value(id).data(), &[1.0, 2.0]);
        store.sgd_step(0.5);
        assert_eq!(store.value(id).data(), &[-1.5, 3.5]);
    }
}
