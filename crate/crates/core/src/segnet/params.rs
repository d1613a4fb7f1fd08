use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, SegnetError};
use crate::autodiff::{Gradients, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PartitionTag {
    Shared,
    PersonalQuery,
    PersonalAdapter,
}

impl PartitionTag {
    pub fn is_personal(self) -> bool {
        self != PartitionTag::Shared
    }
}

/// Tags follow from names alone, so a tag can never drift after init.
pub fn tag_for_name(name: &str) -> PartitionTag {
    if name.starts_with("attention.query.") {
        PartitionTag::PersonalQuery
    } else if name.starts_with("adapter.") {
        PartitionTag::PersonalAdapter
    } else {
        PartitionTag::Shared
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitKind {
    Kaiming { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub tag: PartitionTag,
    init: InitKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Every parameter of the network for `config`, in lexicographic order.
///
/// Convolutions followed by instance norm carry no bias (it would be
/// normalized away), and neither does the key projection (a key bias
/// shifts every score of a query by the same amount).
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: InitKind| {
        let tag = tag_for_name(&name);
        specs.push(ParamSpec { name, shape, tag, init });
    };
    let conv = |o: usize, i: usize, k: usize| (vec![o, i, k, k], InitKind::Kaiming { fan_in: i * k * k });
    let double_conv = |add: &mut dyn FnMut(String, Vec<usize>, InitKind), prefix: &str, cin: usize, cout: usize| {
        let (s, i) = conv(cout, cin, 3);
        add(format!("{prefix}.conv1.weight"), s, i);
        let (s, i) = conv(cout, cout, 3);
        add(format!("{prefix}.conv2.weight"), s, i);
    };

    let c = |l| config.channels(l);
    let d = config.bottleneck_dim();
    let deepest = c(config.depth);

    double_conv(&mut add, "enc0", config.in_channels, c(0));
    for l in 1..=config.depth {
        double_conv(&mut add, &format!("down{l}"), c(l - 1), c(l));
    }
    for branch in ["query_branch", "kv_branch"] {
        let (s, i) = conv(d, deepest, 3);
        add(format!("bottleneck.{branch}.weight"), s, i);
    }
    for proj in ["query", "key", "value", "output"] {
        let (s, i) = conv(d, d, 1);
        add(format!("attention.{proj}.weight"), s, i);
    }
    add("attention.query.bias".into(), vec![d], InitKind::Zeros);
    add("attention.value.bias".into(), vec![d], InitKind::Zeros);
    add("attention.norm.gamma".into(), vec![d], InitKind::Ones);
    add("attention.norm.beta".into(), vec![d], InitKind::Zeros);
    double_conv(&mut add, "fuse", d + deepest, deepest);
    for l in (0..config.depth).rev() {
        // a 2×2 stride-2 transpose conv gives each output exactly one tap
        // per input channel
        add(
            format!("up{l}.transpose.weight"),
            vec![c(l + 1), c(l), 2, 2],
            InitKind::Kaiming { fan_in: c(l + 1) },
        );
        double_conv(&mut add, &format!("up{l}"), 2 * c(l), c(l));
    }
    for layer in ["conv1", "conv2"] {
        let (s, i) = conv(c(0), c(0), 3);
        add(format!("adapter.{layer}.weight"), s, i);
        add(format!("adapter.{layer}.bias"), vec![c(0)], InitKind::Zeros);
    }
    let (s, i) = conv(1, c(0), 1);
    add("head.weight".into(), s, i);
    add("head.bias".into(), vec![1], InitKind::Zeros);

    specs.sort_by(|a, b| a.name.cmp(&b.name));
    specs
}

/// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero biases, unit
/// norm scales. Parameters are filled in lexicographic name order from one
/// stream seeded by `seed`.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ParameterStore, SegnetError> {
    config.validate()?;
    let mut rng = Rng::new(seed);
    let mut store = ParameterStore::new();
    for spec in param_specs(config) {
        let n = spec.numel();
        let data = match spec.init {
            InitKind::Kaiming { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.uniform(-bound, bound)).collect()
            }
            InitKind::Zeros => vec![0.0; n],
            InitKind::Ones => vec![1.0; n],
        };
        let tensor = Tensor::new(spec.shape.clone(), data)?;
        store.insert(&spec.name, tensor)?;
    }
    Ok(store)
}

/// Named, partition-tagged parameters of one model. Iteration is always in
/// lexicographic name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore::default()
    }

    /// Adds a parameter; its tag is derived from the name.
    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<(), SegnetError> {
        if self.entries.contains_key(name) {
            return Err(SegnetError::InvalidConfig(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn tag(&self, name: &str) -> Option<PartitionTag> {
        self.entries.contains_key(name).then(|| tag_for_name(name))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, PartitionTag)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t, tag_for_name(n)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Replaces a tensor's values; the shape must not change.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<(), SegnetError> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| SegnetError::UnknownParameter(name.to_string()))?;
        if slot.shape() != tensor.shape() {
            return Err(SegnetError::ShapeMismatch(format!(
                "{name}: {:?} cannot replace {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor;
        Ok(())
    }

    /// Copies of every tensor whose tag is in `tags`.
    pub fn select(&self, tags: &[PartitionTag]) -> BTreeMap<String, Tensor> {
        self.iter()
            .filter(|(_, _, tag)| tags.contains(tag))
            .map(|(n, t, _)| (n.to_string(), t.clone()))
            .collect()
    }

    /// `(shared, personal)` copies.
    pub fn split(&self) -> (BTreeMap<String, Tensor>, BTreeMap<String, Tensor>) {
        (
            self.select(&[PartitionTag::Shared]),
            self.select(&[PartitionTag::PersonalQuery, PartitionTag::PersonalAdapter]),
        )
    }

    /// Inverse of [`split`](Self::split).
    pub fn merge(
        shared: BTreeMap<String, Tensor>,
        personal: BTreeMap<String, Tensor>,
    ) -> Result<ParameterStore, SegnetError> {
        let mut store = ParameterStore::new();
        for (name, t) in shared {
            let tag = tag_for_name(&name);
            if tag != PartitionTag::Shared {
                return Err(SegnetError::PartitionViolation {
                    name,
                    expected: PartitionTag::Shared,
                    actual: tag,
                });
            }
            store.insert(&name, t)?;
        }
        for (name, t) in personal {
            let tag = tag_for_name(&name);
            if !tag.is_personal() {
                return Err(SegnetError::PartitionViolation {
                    name,
                    expected: PartitionTag::PersonalQuery,
                    actual: tag,
                });
            }
            store.insert(&name, t)?;
        }
        Ok(store)
    }

    /// Overwrites the named tensors, refusing any name whose tag is not in
    /// `allowed`. Nothing is written unless every entry is acceptable.
    pub fn overwrite(&mut self, named: &BTreeMap<String, Tensor>, allowed: &[PartitionTag]) -> Result<(), SegnetError> {
        for (name, t) in named {
            let current = self
                .entries
                .get(name)
                .ok_or_else(|| SegnetError::UnknownParameter(name.clone()))?;
            let tag = tag_for_name(name);
            if !allowed.contains(&tag) {
                return Err(SegnetError::PartitionViolation {
                    name: name.clone(),
                    expected: allowed.first().copied().unwrap_or(PartitionTag::Shared),
                    actual: tag,
                });
            }
            if current.shape() != t.shape() {
                return Err(SegnetError::ShapeMismatch(format!(
                    "{name}: {:?} cannot replace {:?}",
                    t.shape(),
                    current.shape()
                )));
            }
        }
        for (name, t) in named {
            self.entries.insert(name.clone(), t.clone());
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &ParameterStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }

    /// Records every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.entries
            .iter()
            .map(|(n, t)| (n.clone(), tape.leaf(t.clone())))
            .collect()
    }

    /// Pulls each bound parameter's gradient out of `grads`.
    pub fn collect_grads(vars: &BTreeMap<String, Var>, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        vars.iter()
            .filter_map(|(n, &v)| grads.take(v).map(|g| (n.clone(), g)))
            .collect()
    }
}
