use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-block self-attention keys and values for the decoded prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    pub(crate) keys: Vec<Tensor>,
    pub(crate) values: Vec<Tensor>,
    len: usize,
    max_len: usize,
}

impl KvCache {
    pub fn new(blocks: usize, width: usize, max_len: usize) -> Self {
        KvCache {
            keys: vec![Tensor::zeros(&[0, width]); blocks],
            values: vec![Tensor::zeros(&[0, width]); blocks],
            len: 0,
            max_len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub(crate) fn past(&self, block: usize) -> Option<(&Tensor, &Tensor)> {
        (self.len > 0).then(|| (&self.keys[block], &self.values[block]))
    }

    pub(crate) fn extend(&mut self, fresh: Vec<(Tensor, Tensor)>) -> Result<()> {
        if fresh.len() != self.keys.len() {
            return Err(Error::State(format!(
                "cache has {} blocks, got {}",
                self.keys.len(),
                fresh.len()
            )));
        }
        let add = fresh[0].0.rows();
        if self.len + add > self.max_len {
            return Err(Error::Length(format!(
                "cache would hold {} positions, limit {}",
                self.len + add,
                self.max_len
            )));
        }
        for (b, (k, v)) in fresh.into_iter().enumerate() {
            self.keys[b].push_rows(&k)?;
            self.values[b].push_rows(&v)?;
        }
        self.len += add;
        Ok(())
    }

    /// Drops every position at or after `len`; fails if `len` exceeds the cached length.
    pub fn rollback(&mut self, len: usize) -> Result<()> {
        if len > self.len {
            return Err(Error::State(format!(
                "cannot roll back to {len}, cache holds {}",
                self.len
            )));
        }
        self.truncate(len);
        Ok(())
    }

    /// Drops every position at or after `len`.
    pub fn truncate(&mut self, len: usize) {
        if len < self.len {
            for t in self.keys.iter_mut().chain(self.values.iter_mut()) {
                t.truncate_rows(len);
            }
            self.len = len;
        }
    }
}
