//! Dense site tensors and matrix product states.
//!
//! Every site is stored as an order-3 array `(left bond, physical, right bond)`
//! in row-major order, including the two boundary sites whose outer bonds have
//! dimension 1. All contractions run left to right.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default ceiling on the number of elements `Mps::to_dense` will materialize.
pub const DEFAULT_DENSE_CAP: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq)]
pub struct SiteTensor {
    left: usize,
    phys: usize,
    right: usize,
    data: Vec<f64>,
}

impl SiteTensor {
    pub fn new(shape: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        let (left, phys, right) = shape;
        if left == 0 || phys == 0 || right == 0 {
            return Err(Error::InvalidShape(format!(
                "all dimensions must be >= 1, got ({left}, {phys}, {right})"
            )));
        }
        if data.len() != left * phys * right {
            return Err(Error::InvalidShape(format!(
                "shape ({left}, {phys}, {right}) needs {} values, got {}",
                left * phys * right,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
        Ok(Self {
            left,
            phys,
            right,
            data,
        })
    }

    pub fn from_fn(
        shape: (usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let (left, phys, right) = shape;
        let mut data = Vec::with_capacity(left * phys * right);
        for a in 0..left {
            for x in 0..phys {
                for b in 0..right {
                    data.push(f(a, x, b));
                }
            }
        }
        Self::new(shape, data)
    }

    /// Bond-1 tensor holding one vector over the physical index.
    pub fn from_vector(values: Vec<f64>) -> Result<Self> {
        Self::new((1, values.len(), 1), values)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.left, self.phys, self.right)
    }

    pub fn left_dim(&self) -> usize {
        self.left
    }

    pub fn phys_dim(&self) -> usize {
        self.phys
    }

    pub fn right_dim(&self) -> usize {
        self.right
    }

    #[inline]
    pub fn get(&self, a: usize, x: usize, b: usize) -> f64 {
        self.data[(a * self.phys + x) * self.right + b]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Multiplies the row vector `v` (length `left`) into the matrix selected by `x`.
    #[inline]
    fn vec_mul(&self, v: &[f64], x: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (a, &va) in v.iter().enumerate() {
            if va == 0.0 {
                continue;
            }
            let row = &self.data[(a * self.phys + x) * self.right..][..self.right];
            for (o, &t) in out.iter_mut().zip(row) {
                *o += va * t;
            }
        }
    }
}

/// A chain of order-3 site tensors with matching bonds.
#[derive(Debug, Clone, PartialEq)]
pub struct Mps {
    sites: Vec<SiteTensor>,
}

impl Mps {
    /// Validating constructor: checks boundary bonds and every internal bond.
    pub fn from_tensors(sites: Vec<SiteTensor>) -> Result<Self> {
        if sites.is_empty() {
            return Err(Error::EmptyMps);
        }
        if sites[0].left != 1 {
            return Err(Error::BoundaryBond {
                site: 0,
                dim: sites[0].left,
            });
        }
        let last = sites.len() - 1;
        if sites[last].right != 1 {
            return Err(Error::BoundaryBond {
                site: last,
                dim: sites[last].right,
            });
        }
        for (k, pair) in sites.windows(2).enumerate() {
            if pair[0].right != pair[1].left {
                return Err(Error::BondMismatch {
                    bond: k,
                    left: pair[0].right,
                    right: pair[1].left,
                });
            }
        }
        Ok(Self { sites })
    }

    /// Bond-1 MPS whose value is the product of per-site factors.
    pub fn product(factors: &[Vec<f64>]) -> Result<Self> {
        let sites = factors
            .iter()
            .map(|f| SiteTensor::from_vector(f.clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(sites)
    }

    /// Random MPS with uniform entries in `[-1, 1)`; bonds are capped by `bond`.
    pub fn random<R: Rng>(dims: &[usize], bond: usize, rng: &mut R) -> Result<Self> {
        let n = dims.len();
        let sites = dims
            .iter()
            .enumerate()
            .map(|(k, &d)| {
                let left = if k == 0 { 1 } else { bond };
                let right = if k + 1 == n { 1 } else { bond };
                SiteTensor::from_fn((left, d, right), |_, _, _| rng.gen_range(-1.0..1.0))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(sites)
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn sites(&self) -> &[SiteTensor] {
        &self.sites
    }

    pub fn into_sites(self) -> Vec<SiteTensor> {
        self.sites
    }

    pub fn phys_dims(&self) -> Vec<usize> {
        self.sites.iter().map(|s| s.phys).collect()
    }

    /// Internal bond dimensions, `len() - 1` entries.
    pub fn bond_dims(&self) -> Vec<usize> {
        self.sites[..self.len() - 1]
            .iter()
            .map(|s| s.right)
            .collect()
    }

    /// Maximum internal bond dimension (1 for a single site).
    pub fn bond_dim(&self) -> usize {
        self.bond_dims().into_iter().max().unwrap_or(1)
    }

    fn check_index(&self, index: &[usize]) -> Result<()> {
        if index.len() != self.len() {
            return Err(Error::IndexLength {
                expected: self.len(),
                got: index.len(),
            });
        }
        for (site, (&x, s)) in index.iter().zip(&self.sites).enumerate() {
            if x >= s.phys {
                return Err(Error::IndexOutOfRange {
                    site,
                    index: x,
                    dim: s.phys,
                });
            }
        }
        Ok(())
    }

    pub fn evaluate(&self, index: &[usize]) -> Result<f64> {
        self.check_index(index)?;
        Ok(self.evaluate_unchecked(index))
    }

    pub(crate) fn evaluate_unchecked(&self, index: &[usize]) -> f64 {
        let mut v = vec![1.0];
        let mut next = Vec::new();
        for (s, &x) in self.sites.iter().zip(index) {
            next.resize(s.right, 0.0);
            s.vec_mul(&v, x, &mut next);
            std::mem::swap(&mut v, &mut next);
        }
        v[0]
    }

    /// Sum over every index tuple, contracting each physical leg with ones.
    pub fn sum_all(&self) -> f64 {
        let mut v = vec![1.0];
        for s in &self.sites {
            let mut next = vec![0.0; s.right];
            let mut tmp = vec![0.0; s.right];
            for x in 0..s.phys {
                s.vec_mul(&v, x, &mut tmp);
                next.iter_mut().zip(&tmp).for_each(|(n, t)| *n += t);
            }
            v = next;
        }
        v[0]
    }

    /// Contracts physical leg `k` with `weights[k]`: `sum_x prod_k w_k[x_k] M(x)`.
    pub fn contract_vectors(&self, weights: &[Vec<f64>]) -> Result<f64> {
        if weights.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} weight vectors for {} sites",
                weights.len(),
                self.len()
            )));
        }
        let mut v = vec![1.0];
        for (k, (s, w)) in self.sites.iter().zip(weights).enumerate() {
            if w.len() != s.phys {
                return Err(Error::ShapeMismatch(format!(
                    "site {k}: weight length {} vs physical dimension {}",
                    w.len(),
                    s.phys
                )));
            }
            let mut next = vec![0.0; s.right];
            let mut tmp = vec![0.0; s.right];
            for (x, &wx) in w.iter().enumerate() {
                if wx == 0.0 {
                    continue;
                }
                s.vec_mul(&v, x, &mut tmp);
                next.iter_mut().zip(&tmp).for_each(|(n, t)| *n += wx * t);
            }
            v = next;
        }
        Ok(v[0])
    }

    /// Applies `mats[k]` (rows = new physical dim, cols = old physical dim) to site `k`.
    pub fn apply_site_matrices(&self, mats: &[DMatrix<f64>]) -> Result<Mps> {
        if mats.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} matrices for {} sites",
                mats.len(),
                self.len()
            )));
        }
        let sites = self
            .sites
            .iter()
            .zip(mats)
            .enumerate()
            .map(|(k, (s, m))| {
                if m.ncols() != s.phys {
                    return Err(Error::ShapeMismatch(format!(
                        "site {k}: matrix has {} columns, physical dimension is {}",
                        m.ncols(),
                        s.phys
                    )));
                }
                SiteTensor::from_fn((s.left, m.nrows(), s.right), |a, y, b| {
                    (0..s.phys).map(|x| m[(y, x)] * s.get(a, x, b)).sum()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Mps::from_tensors(sites)
    }

    pub fn to_dense(&self) -> Result<Vec<f64>> {
        self.to_dense_with_cap(DEFAULT_DENSE_CAP)
    }

    /// Full array of evaluations in row-major order (last site fastest).
    pub fn to_dense_with_cap(&self, cap: usize) -> Result<Vec<f64>> {
        let required: u128 = self.sites.iter().map(|s| s.phys as u128).product();
        if required > cap as u128 {
            return Err(Error::DenseCapExceeded {
                required,
                allowed: cap,
            });
        }
        // rows: flattened prefix index, cols: current right bond
        let mut partial = vec![1.0];
        let mut width = 1;
        for s in &self.sites {
            let rows = partial.len() / width;
            let mut next = Vec::with_capacity(rows * s.phys * s.right);
            let mut tmp = vec![0.0; s.right];
            for i in 0..rows {
                let v = &partial[i * width..(i + 1) * width];
                for x in 0..s.phys {
                    s.vec_mul(v, x, &mut tmp);
                    next.extend_from_slice(&tmp);
                }
            }
            partial = next;
            width = s.right;
        }
        Ok(partial)
    }

    pub fn to_document(&self) -> MpsDocument {
        MpsDocument {
            sites: self
                .sites
                .iter()
                .map(|s| SiteDocument {
                    shape: [s.left, s.phys, s.right],
                    values: s.data.clone(),
                })
                .collect(),
        }
    }

    pub fn from_document(doc: &MpsDocument) -> Result<Self> {
        let sites = doc
            .sites
            .iter()
            .map(|s| SiteTensor::new((s.shape[0], s.shape[1], s.shape[2]), s.values.clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(sites)
    }
}

/// Text-serializable form of an [`Mps`]: one entry per site with its shape
/// triple and row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpsDocument {
    pub sites: Vec<SiteDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteDocument {
    pub shape: [usize; 3],
    pub values: Vec<f64>,
}
