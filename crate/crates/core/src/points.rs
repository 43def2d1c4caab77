use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major collection of equally sized points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSet<T> {
    dim: usize,
    data: Vec<T>,
}

impl<T: Copy> PointSet<T> {
    pub fn new(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn with_capacity(dim: usize, n: usize) -> Self {
        Self { dim, data: Vec::with_capacity(dim * n) }
    }

    pub fn from_flat(dim: usize, data: Vec<T>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Format(format!(
                "{} values cannot be split into points of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows<R: AsRef<[T]>>(dim: usize, rows: impl IntoIterator<Item = R>) -> Result<Self> {
        let mut set = Self::new(dim);
        for r in rows {
            set.push(r.as_ref())?;
        }
        Ok(set)
    }

    pub fn push(&mut self, p: &[T]) -> Result<()> {
        if p.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: p.len() });
        }
        self.data.extend_from_slice(p);
        Ok(())
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[T]> + '_ {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn as_flat(&self) -> &[T] {
        &self.data
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = T> + '_ {
        self.rows().map(move |r| r[j])
    }
}
