//! Per-sample feature cache used to draw incongruent pairs.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stored features must have unit norm to within this tolerance. Exactly
/// zero vectors (dead embeddings) are also accepted.
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Teacher,
    Student,
}

#[derive(Clone, Debug)]
struct Slot {
    teacher: Vec<f64>,
    student: Vec<f64>,
    age: u64,
}

/// Features keyed by sample id. Entries are replaced on update, never
/// blended; when full, the slot written longest ago is evicted.
#[derive(Clone, Debug)]
pub struct MemoryBuffer {
    dim: usize,
    capacity: usize,
    slots: BTreeMap<u64, Slot>,
    clock: u64,
    rng: ChaCha8Rng,
}

impl MemoryBuffer {
    pub fn new(dim: usize, capacity: usize, seed: u64) -> Result<Self> {
        if dim == 0 || capacity == 0 {
            return Err(Error::contract("buffer dimension and capacity must be positive"));
        }
        Ok(MemoryBuffer {
            dim,
            capacity,
            slots: BTreeMap::new(),
            clock: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.slots.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.slots.keys().copied()
    }

    fn check(&self, what: &str, feat: &[f64]) -> Result<()> {
        if feat.len() != self.dim {
            return Err(Error::contract(format!(
                "{what} feature has length {}, buffer dimension is {}",
                feat.len(),
                self.dim
            )));
        }
        let norm = feat.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL && norm != 0.0 {
            return Err(Error::contract(format!("{what} feature has norm {norm}, expected 1")));
        }
        Ok(())
    }

    pub fn upsert(&mut self, id: u64, teacher: &[f64], student: &[f64]) -> Result<()> {
        self.check("teacher", teacher)?;
        self.check("student", student)?;
        if !self.slots.contains_key(&id) && self.slots.len() == self.capacity {
            let oldest = self
                .slots
                .iter()
                .min_by_key(|(_, s)| s.age)
                .map(|(&k, _)| k)
                .expect("buffer at capacity is non-empty");
            self.slots.remove(&oldest);
        }
        self.clock += 1;
        self.slots.insert(
            id,
            Slot {
                teacher: teacher.to_vec(),
                student: student.to_vec(),
                age: self.clock,
            },
        );
        Ok(())
    }

    /// Writes every row of a batch; rows of `teacher` and `student` pair with
    /// `ids`.
    pub fn upsert_batch(&mut self, ids: &[u64], teacher: &Tensor, student: &Tensor) -> Result<()> {
        if teacher.rows() != ids.len() || student.rows() != ids.len() {
            return Err(Error::contract(format!(
                "{} ids for {} teacher and {} student rows",
                ids.len(),
                teacher.rows(),
                student.rows()
            )));
        }
        for (i, &id) in ids.iter().enumerate() {
            self.upsert(id, teacher.row(i), student.row(i))?;
        }
        Ok(())
    }

    pub fn get(&self, id: u64, side: Side) -> Option<&[f64]> {
        self.slots.get(&id).map(|s| match side {
            Side::Teacher => s.teacher.as_slice(),
            Side::Student => s.student.as_slice(),
        })
    }

    /// Draws `m` distinct ids other than `anchor`, uniformly without
    /// replacement, with their features on `side`.
    pub fn sample_negatives(&mut self, anchor: u64, m: usize, side: Side) -> Result<Vec<(u64, Vec<f64>)>> {
        let pool: Vec<u64> = self.slots.keys().copied().filter(|&k| k != anchor).collect();
        if pool.len() < m {
            return Err(Error::contract(format!(
                "need {m} negatives for id {anchor} but only {} other ids are buffered",
                pool.len()
            )));
        }
        let picks = index::sample(&mut self.rng, pool.len(), m);
        Ok(picks
            .iter()
            .map(|i| {
                let id = pool[i];
                (id, self.get(id, side).expect("pooled id is stored").to_vec())
            })
            .collect())
    }

    /// `m` negatives for each anchor, stacked into an `(n*m) x dim` matrix
    /// in anchor order.
    pub fn sample_for_batch(&mut self, anchors: &[u64], m: usize, side: Side) -> Result<(Tensor, Vec<u64>)> {
        let mut data = Vec::with_capacity(anchors.len() * m * self.dim);
        let mut ids = Vec::with_capacity(anchors.len() * m);
        for &a in anchors {
            for (id, feat) in self.sample_negatives(a, m, side)? {
                ids.push(id);
                data.extend(feat);
            }
        }
        if ids.is_empty() {
            return Err(Error::contract("no negatives requested"));
        }
        Ok((Tensor::matrix(ids.len(), self.dim, data), ids))
    }
}
