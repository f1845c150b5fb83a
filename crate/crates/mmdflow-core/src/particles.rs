//! Row-major particle storage: `n` points in `dim`-dimensional data space.

use crate::error::{Error, Result};

/// An `n x dim` matrix of particle positions, stored row-major in one buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Particles {
    n: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Particles {
    pub fn zeros(n: usize, dim: usize) -> Self {
        Particles {
            n,
            dim,
            data: vec![0.0; n * dim],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::Shape(format!(
                    "ragged rows: expected {dim}, got {}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Particles {
            n: rows.len(),
            dim,
            data,
        })
    }

    pub fn from_flat(n: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * dim {
            return Err(Error::Shape(format!(
                "flat buffer has {} values, expected {n}x{dim}",
                data.len()
            )));
        }
        Ok(Particles { n, dim, data })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows selected by index, in the given order.
    pub fn select(&self, idx: &[usize]) -> Particles {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Particles {
            n: idx.len(),
            dim: self.dim,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let p = Particles::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.dim(), 2);
        assert_eq!(p.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(Particles::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
