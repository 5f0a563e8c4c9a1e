//! Reservoir-sampled replay memory.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::SplitMix64;
use crate::stream::Batch;

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub features: Vec<f64>,
    pub label: usize,
}

/// Buffer size, or no limit at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Capacity {
    Bounded(usize),
    Unlimited,
}

impl fmt::Display for Capacity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Capacity::Bounded(n) => write!(f, "{n}"),
            Capacity::Unlimited => f.write_str("unlimited"),
        }
    }
}

impl FromStr for Capacity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "unlimited" | "inf" => Ok(Capacity::Unlimited),
            other => other
                .parse()
                .map(Capacity::Bounded)
                .map_err(|_| Error::Input(format!("invalid capacity {other:?}"))),
        }
    }
}

impl Serialize for Capacity {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Capacity::Bounded(n) => s.serialize_u64(*n as u64),
            Capacity::Unlimited => s.serialize_str("unlimited"),
        }
    }
}

impl<'de> Deserialize<'de> for Capacity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Count(usize),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Count(n) => Ok(Capacity::Bounded(n)),
            Repr::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: Capacity,
    items: Vec<Item>,
    seen: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: Capacity) -> Self {
        Self {
            capacity,
            items: Vec::new(),
            seen: 0,
        }
    }

    pub fn capacity(&self) -> Capacity {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Stream items offered so far.
    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    /// Reservoir step for a single item: the k-th item offered is kept with
    /// probability `capacity / k`, replacing a uniformly chosen slot.
    pub fn offer(&mut self, item: Item, rng: &mut SplitMix64) {
        self.seen += 1;
        match self.capacity {
            Capacity::Unlimited => self.items.push(item),
            Capacity::Bounded(0) => {}
            Capacity::Bounded(cap) if self.items.len() < cap => self.items.push(item),
            Capacity::Bounded(cap) => {
                let j = rng.below(self.seen as usize);
                if j < cap {
                    self.items[j] = item;
                }
            }
        }
    }

    pub fn update(&mut self, batch: &Batch, rng: &mut SplitMix64) {
        for (i, &label) in batch.labels.iter().enumerate() {
            self.offer(
                Item {
                    features: batch.features.row(i).to_vec(),
                    label,
                },
                rng,
            );
        }
    }

    /// `min(n, len)` distinct items, uniformly without replacement.
    pub fn sample(&self, n: usize, rng: &mut SplitMix64) -> Vec<Item> {
        rng.sample_indices(self.items.len(), n)
            .into_iter()
            .map(|i| self.items[i].clone())
            .collect()
    }

    /// Like [`ReplayBuffer::sample`], packed as a batch of `dim` features.
    pub fn sample_batch(&self, n: usize, dim: usize, rng: &mut SplitMix64) -> Batch {
        let idx = rng.sample_indices(self.items.len(), n);
        self.gather(&idx, dim)
    }

    fn gather(&self, idx: &[usize], dim: usize) -> Batch {
        let mut data = Vec::with_capacity(idx.len() * dim);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.items[i].features);
            labels.push(self.items[i].label);
        }
        Batch {
            features: Matrix::new(idx.len(), dim, data).expect("item width matches dim"),
            labels,
        }
    }

    /// Features of `ceil(p · len)` distinct items, one per row. `p = 1` returns
    /// the whole buffer in storage order without touching `rng`.
    pub fn sample_for_preconditioner(&self, p: f64, rng: &mut SplitMix64) -> Result<Matrix> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Input(format!("subsample fraction {p} outside (0, 1]")));
        }
        let dim = self.items.first().map_or(0, |it| it.features.len());
        let n = self.items.len();
        if p == 1.0 {
            let all: Vec<usize> = (0..n).collect();
            return Ok(self.gather(&all, dim).features);
        }
        // Guard against products like 0.05 · 2000 landing a hair above 100.
        let k = ((p * n as f64) * (1.0 - 1e-12)).ceil() as usize;
        let idx = rng.sample_indices(n, k.min(n));
        Ok(self.gather(&idx, dim).features)
    }
}
