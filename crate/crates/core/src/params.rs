//! Named parameter storage, initialization and optimizer groups.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Float, Graph, Tensor, Var};

/// Optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Base,
    Personality,
    Emotion,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Base, Group::Personality, Group::Emotion];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Base => "base",
            Group::Personality => "personality",
            Group::Emotion => "emotion",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Group {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base" => Ok(Group::Base),
            "personality" => Ok(Group::Personality),
            "emotion" => Ok(Group::Emotion),
            other => Err(format!("unknown parameter group `{other}`")),
        }
    }
}

pub type ParamId = usize;

#[derive(Clone)]
pub struct Entry<F> {
    pub name: String,
    pub tensor: Tensor<F>,
    pub group: Group,
    /// Buffers (running statistics, normalizer constants) are not trainable.
    pub trainable: bool,
}

/// Ordered collection of named tensors. Order is registration order.
#[derive(Clone, Default)]
pub struct ParamStore<F> {
    entries: Vec<Entry<F>>,
    index: HashMap<String, ParamId>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, name: String, tensor: Tensor<F>, group: Group, trainable: bool) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            tensor,
            group,
            trainable,
        });
        id
    }

    pub fn entries(&self) -> &[Entry<F>] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &Entry<F> {
        &self.entries[id]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.id(name).map(|i| &self.entries[i].tensor)
    }

    /// Copies the store into another float type.
    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    group: e.group,
                    trainable: e.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Number of trainable scalars per group.
    pub fn count_by_group(&self) -> [(Group, usize); 3] {
        Group::ALL.map(|g| {
            let n = self
                .entries
                .iter()
                .filter(|e| e.trainable && e.group == g)
                .map(|e| e.tensor.len())
                .sum();
            (g, n)
        })
    }

    pub fn count_trainable(&self) -> usize {
        self.count_by_group().iter().map(|(_, n)| n).sum()
    }

    /// Places every tensor on `g`. Trainable entries become gradient leaves
    /// unless `frozen`; buffers are always constants.
    pub fn bind<'s, 'g>(&'s self, g: &'g Graph<F>, frozen: bool) -> Bound<'s, 'g, F> {
        let vars = self
            .entries
            .iter()
            .map(|e| g.leaf(e.tensor.clone(), e.trainable && !frozen))
            .collect();
        Bound { store: self, vars }
    }

    /// Like [`ParamStore::bind`], but only the listed entries require grad.
    pub fn bind_subset<'s, 'g>(&'s self, g: &'g Graph<F>, trainable: &[bool]) -> Bound<'s, 'g, F> {
        let vars = self
            .entries
            .iter()
            .zip(trainable)
            .map(|(e, &t)| g.leaf(e.tensor.clone(), t))
            .collect();
        Bound { store: self, vars }
    }
}

/// A parameter store placed on a graph.
pub struct Bound<'s, 'g, F: Float> {
    pub store: &'s ParamStore<F>,
    vars: Vec<Var<'g, F>>,
}

impl<'g, F: Float> Bound<'_, 'g, F> {
    pub fn var(&self, id: ParamId) -> Var<'g, F> {
        self.vars[id]
    }

    pub fn data(&self, id: ParamId) -> &[F] {
        self.store.get(id).data()
    }

    pub fn vars(&self) -> &[Var<'g, F>] {
        &self.vars
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// U(-b, b).
    Uniform(f64),
    /// Glorot uniform over `(fan_in, fan_out)`.
    Xavier(usize, usize),
    Normal(f64),
}

/// 64-bit FNV-1a over the seed bytes and the parameter name.
fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(name.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Registers parameters under a dotted name prefix. Every parameter draws its
/// initial values from its own stream seeded by `(seed, name)`, so adding or
/// removing one sub-module does not shift the others.
pub struct Builder<'a> {
    store: &'a mut ParamStore<f32>,
    seed: u64,
    prefix: String,
    group: Group,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, seed: u64) -> Self {
        Self {
            store,
            seed,
            prefix: String::new(),
            group: Group::Base,
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            seed: self.seed,
            prefix,
            group: self.group,
        }
    }

    pub fn group(mut self, g: Group) -> Self {
        self.group = g;
        self
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let full = self.full(name);
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, &full));
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Uniform(b) => Tensor::from_fn(shape, |_| rng.random_range(-b..=b) as f32),
            Init::Xavier(fi, fo) => {
                let b = (6.0 / (fi + fo) as f64).sqrt();
                Tensor::from_fn(shape, |_| rng.random_range(-b..=b) as f32)
            }
            Init::Normal(std) => {
                let d = rand_distr::Normal::new(0.0, std).expect("finite std");
                Tensor::from_fn(shape, |_| rng.sample(d) as f32)
            }
        };
        self.store.push(full, t, self.group, true)
    }

    pub fn buffer(&mut self, name: &str, t: Tensor<f32>) -> ParamId {
        let full = self.full(name);
        self.store.push(full, t, self.group, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_only_on_name() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        {
            let mut ba = Builder::new(&mut a, 3);
            ba.param("x.w", &[4], Init::Uniform(1.0));
            ba.param("y.w", &[4], Init::Uniform(1.0));
        }
        {
            let mut bb = Builder::new(&mut b, 3);
            bb.param("y.w", &[4], Init::Uniform(1.0));
        }
        assert_eq!(a.by_name("y.w"), b.by_name("y.w"));
        assert_ne!(a.by_name("x.w"), a.by_name("y.w"));
    }

    #[test]
    fn groups_are_counted_separately() {
        let mut s = ParamStore::new();
        {
            let mut b = Builder::new(&mut s, 0);
            b.param("a", &[3], Init::Zeros);
            let mut p = b.sub("head").group(Group::Personality);
            p.param("w", &[2, 2], Init::Zeros);
            p.buffer("stat", Tensor::zeros(&[10]));
        }
        let c = s.count_by_group();
        assert_eq!(c, [(Group::Base, 3), (Group::Personality, 4), (Group::Emotion, 0)]);
        assert_eq!(s.count_trainable(), 7);
        assert_eq!(s.entry(2).name, "head.stat");
    }
}
