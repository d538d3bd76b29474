//! Named parameter storage, seeded initialisation, digests, and the binding of
//! parameters into a [`Graph`] for one forward pass.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};

use mmfsod_autograd::{Grads, Graph, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Parameter groups; freezing policies are expressed over groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    /// Shared feature extractor up to the stride-8 map.
    Backbone,
    /// Block applied after RoI pooling.
    FinalBlock,
    /// Frozen language encoder.
    TextEncoder,
    /// Frozen token embedding table.
    TokenTable,
    MpgRpn,
    MpgRcnn,
    Rpn,
    Head,
}

impl Group {
    pub const ALL: [Group; 8] = [
        Group::Backbone,
        Group::FinalBlock,
        Group::TextEncoder,
        Group::TokenTable,
        Group::MpgRpn,
        Group::MpgRcnn,
        Group::Rpn,
        Group::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Backbone => "backbone",
            Group::FinalBlock => "final-block",
            Group::TextEncoder => "text-encoder",
            Group::TokenTable => "token-table",
            Group::MpgRpn => "mpg-rpn",
            Group::MpgRcnn => "mpg-rcnn",
            Group::Rpn => "rpn",
            Group::Head => "head",
        }
    }

    pub fn always_frozen(self) -> bool {
        matches!(self, Group::TextEncoder | Group::TokenTable)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub group: Group,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Panics on duplicate names: parameter paths are fixed by the architecture.
    pub fn insert(&mut self, name: impl Into<String>, group: Group, value: Tensor<T>) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), Param { value, group });
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> &Tensor<T> {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    /// SHA-256 over name, shape and exact values of every parameter in `groups`.
    pub fn digest(&self, groups: &[Group]) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.entries.iter().filter(|(_, p)| groups.contains(&p.group)) {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn digest_all(&self) -> String {
        self.digest(&Group::ALL)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            group: p.group,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Seeded parameter initialiser.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        if std == 0.0 {
            return Tensor::zeros(shape);
        }
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::new(shape, (0..n).map(|_| T::cast(dist.sample(&mut self.rng))).collect())
    }

    /// He-normal for a weight whose rows are the fan-in.
    pub fn he<T: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        self.normal(&[fan_in, fan_out], (2.0 / fan_in as f64).sqrt())
    }
}

/// Which parameters become gradient-carrying leaves in a forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Groups(BTreeSet<Group>),
}

impl Trainable {
    /// Every group except the always-frozen ones.
    pub fn all() -> Self {
        Trainable::Groups(Group::ALL.into_iter().filter(|g| !g.always_frozen()).collect())
    }

    pub fn except(frozen: &[Group]) -> Self {
        Trainable::Groups(
            Group::ALL
                .into_iter()
                .filter(|g| !g.always_frozen() && !frozen.contains(g))
                .collect(),
        )
    }

    pub fn includes(&self, group: Group) -> bool {
        match self {
            Trainable::Nothing => false,
            Trainable::Groups(gs) => gs.contains(&group) && !group.always_frozen(),
        }
    }
}

/// One forward pass: the tape plus lazily bound parameters.
pub struct Ctx<'a, T: Scalar> {
    pub g: &'a Graph<T>,
    params: &'a ParamStore<T>,
    trainable: Trainable,
    bound: RefCell<BTreeMap<String, Var>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(g: &'a Graph<T>, params: &'a ParamStore<T>, trainable: Trainable) -> Self {
        Self {
            g,
            params,
            trainable,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn inference(g: &'a Graph<T>, params: &'a ParamStore<T>) -> Self {
        Self::new(g, params, Trainable::Nothing)
    }

    pub fn params(&self) -> &ParamStore<T> {
        self.params
    }

    /// The graph node of parameter `name`, created on first use.
    pub fn p(&self, name: &str) -> Var {
        if let Some(&v) = self.bound.borrow().get(name) {
            return v;
        }
        let param = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let v = if self.trainable.includes(param.group) {
            self.g.leaf(param.value.clone())
        } else {
            self.g.constant(param.value.clone())
        };
        self.bound.borrow_mut().insert(name.to_string(), v);
        v
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params
            .get(name)
            .map(|p| self.trainable.includes(p.group))
            .unwrap_or(false)
    }

    /// Gradients of every bound trainable parameter, keyed by name.
    pub fn collect_grads(&self, grads: &Grads<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_changes_with_values_and_ignores_other_groups() {
        let mut ps = ParamStore::<f32>::new();
        ps.insert("a", Group::Backbone, Tensor::from_f64(&[2], &[1.0, 2.0]));
        ps.insert("b", Group::Head, Tensor::from_f64(&[1], &[3.0]));
        let before = ps.digest(&[Group::Backbone]);
        ps.get_mut("b").unwrap().value.data_mut()[0] = 4.0;
        assert_eq!(before, ps.digest(&[Group::Backbone]));
        ps.get_mut("a").unwrap().value.data_mut()[0] = 1.5;
        assert_ne!(before, ps.digest(&[Group::Backbone]));
    }

    #[test]
    fn frozen_groups_are_never_trainable() {
        let t = Trainable::all();
        assert!(!t.includes(Group::TextEncoder));
        assert!(!t.includes(Group::TokenTable));
        assert!(t.includes(Group::Backbone));
        assert!(!Trainable::except(&[Group::Backbone]).includes(Group::Backbone));
    }

    #[test]
    fn digest_is_type_independent_for_exact_values() {
        let mut ps = ParamStore::<f32>::new();
        ps.insert("w", Group::Rpn, Tensor::from_f64(&[3], &[0.25, -1.0, 8.0]));
        assert_eq!(ps.digest_all(), ps.cast::<f64>().digest_all());
    }
}
