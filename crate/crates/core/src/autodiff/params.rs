use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::mat::Mat;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A named trainable tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
}

impl ParamBlock {
    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            values: vec![0.0; rows * cols],
            grads: vec![0.0; rows * cols],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn as_mat(&self) -> Mat {
        Mat::from_vec(self.rows, self.cols, self.values.clone())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    blocks: Vec<ParamBlock>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, block: ParamBlock) -> ParamId {
        assert!(!self.index.contains_key(&block.name), "duplicate block {}", block.name);
        let id = ParamId(self.blocks.len());
        self.index.insert(block.name.clone(), id);
        self.blocks.push(block);
        id
    }

    /// Dense-layer style init: uniform in ±1/√fan_in.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut b = ParamBlock::zeros(name, rows, cols);
        b.values.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        self.add(b)
    }

    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let mut b = ParamBlock::zeros(name, rows, cols);
        if std > 0.0 {
            let dist = Normal::new(0.0, std).expect("positive std");
            b.values.iter_mut().for_each(|v| *v = dist.sample(rng));
        }
        self.add(b)
    }

    pub fn get(&self, id: ParamId) -> &ParamBlock {
        &self.blocks[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamBlock {
        &mut self.blocks[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamBlock> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.blocks.len()).map(ParamId)
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn zero_grads(&mut self) {
        self.blocks.iter_mut().for_each(ParamBlock::zero_grad);
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    (
                        b.name.clone(),
                        StoredBlock { rows: b.rows, cols: b.cols, values: b.values.clone() },
                    )
                })
                .collect(),
        }
    }

    /// Copies values from a checkpoint into blocks of the same names and shapes.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format {} (expected {})",
                ckpt.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        for block in &mut self.blocks {
            let stored = ckpt
                .blocks
                .get(&block.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks block `{}`", block.name)))?;
            if (stored.rows, stored.cols) != (block.rows, block.cols)
                || stored.values.len() != block.values.len()
            {
                return Err(Error::Format(format!(
                    "block `{}` has shape {}x{} in checkpoint, {}x{} in model",
                    block.name, stored.rows, stored.cols, block.rows, block.cols
                )));
            }
            block.values.copy_from_slice(&stored.values);
        }
        Ok(())
    }
}

/// Serialized weights keyed by stable block names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub blocks: BTreeMap<String, StoredBlock>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredBlock {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_init_respects_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let id = store.add_uniform("w", 16, 64, 64, &mut rng);
        assert!(store.get(id).values.iter().all(|v| v.abs() <= 0.125));
        assert_eq!(store.id("w"), Some(id));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = ParamStore::new();
        a.add_uniform("l0.w", 3, 4, 4, &mut rng);
        a.add_normal("lat", 2, 5, 0.01, &mut rng);
        let json = serde_json::to_string(&a.to_checkpoint()).unwrap();
        let mut b = ParamStore::new();
        b.add(ParamBlock::zeros("l0.w", 3, 4));
        b.add(ParamBlock::zeros("lat", 2, 5));
        b.load_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(a.blocks(), b.blocks());

        let mut c = ParamStore::new();
        c.add(ParamBlock::zeros("l0.w", 4, 3));
        assert!(c.load_checkpoint(&a.to_checkpoint()).is_err());
    }
}
