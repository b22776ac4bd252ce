//! Per-layer orthonormal basis pools and character subspace allocation.
//!
//! Every character owns a fixed d x r1 basis per pool. Under the pooled
//! strategies the bases are disjoint column blocks of one orthonormal d x d
//! matrix, which is what makes later characters provably unable to disturb
//! earlier ones. The direct strategies trade that exact guarantee for
//! unbounded capacity with approximate orthogonality.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, qr_orthonormal, uniform_matrix, DetRng, Matrix};
use crate::scalar::Scalar;

/// How character bases are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisStrategy {
    /// Contiguous column blocks of one orthonormal pool matrix.
    Sequential,
    /// Distinct, never-reused random columns of the pool matrix.
    RandomColumns,
    /// Fresh d x r1 draw from N(0, 1/d) per allocation; no pool matrix.
    GaussianDirect,
    /// Fresh d x r1 draw from U[-sqrt(3/d), sqrt(3/d)]; no pool matrix.
    UniformDirect,
}

impl BasisStrategy {
    /// Pooled strategies carry an explicit orthonormal matrix.
    pub fn is_pooled(self) -> bool {
        matches!(self, BasisStrategy::Sequential | BasisStrategy::RandomColumns)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BasisStrategy::Sequential => "sequential",
            BasisStrategy::RandomColumns => "random-columns",
            BasisStrategy::GaussianDirect => "gaussian-direct",
            BasisStrategy::UniformDirect => "uniform-direct",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(BasisStrategy::Sequential),
            "random-columns" => Ok(BasisStrategy::RandomColumns),
            "gaussian-direct" => Ok(BasisStrategy::GaussianDirect),
            "uniform-direct" => Ok(BasisStrategy::UniformDirect),
            other => Err(Error::Config(format!("unknown basis strategy '{other}'"))),
        }
    }
}

/// Where a handle's basis lives.
#[derive(Clone, Debug, PartialEq)]
pub enum HandleSpec<S: Scalar> {
    /// Column indices into the pool matrix (pooled strategies).
    Columns(Vec<usize>),
    /// Explicitly sampled basis (direct strategies).
    Basis(Matrix<S>),
}

/// A character's claim on one subspace of one pool.
#[derive(Clone, Debug)]
pub struct SubspaceHandle<S: Scalar> {
    pub character_id: String,
    pub pool_key: String,
    pub spec: HandleSpec<S>,
    epoch: u64,
}

impl<S: Scalar> SubspaceHandle<S> {
    pub fn r1(&self) -> usize {
        match &self.spec {
            HandleSpec::Columns(cols) => cols.len(),
            HandleSpec::Basis(b) => b.cols(),
        }
    }

    pub fn columns(&self) -> Option<&[usize]> {
        match &self.spec {
            HandleSpec::Columns(cols) => Some(cols),
            HandleSpec::Basis(_) => None,
        }
    }
}

/// The candidate pool for one layer width (or one layer, if configured
/// per-layer): at most a d x d orthonormal matrix plus the allocation cursor.
#[derive(Clone, Debug)]
pub struct BasisPool<S: Scalar> {
    key: String,
    d: usize,
    strategy: BasisStrategy,
    pool: Option<Matrix<S>>,
    cursor: usize,
    used: BTreeSet<usize>,
    epoch: u64,
}

impl<S: Scalar> BasisPool<S> {
    /// Build the pool for `key`. Pooled strategies orthonormalize a seeded
    /// Gaussian draw; direct strategies carry only distribution parameters.
    pub fn build(rng: &mut DetRng, key: &str, d: usize, strategy: BasisStrategy) -> Result<Self> {
        assert!(d >= 1, "pool dimension must be >= 1");
        let pool = if strategy.is_pooled() { Some(qr_orthonormal(rng, d)?) } else { None };
        Ok(Self {
            key: key.to_string(),
            d,
            strategy,
            pool,
            cursor: 0,
            used: BTreeSet::new(),
            epoch: 0,
        })
    }

    /// Test seam: inject an explicit (for example, identity) pool matrix so
    /// unit tests can observe exact-zero cross terms without QR noise.
    pub fn inject(key: &str, matrix: Matrix<S>, strategy: BasisStrategy) -> Self {
        assert_eq!(matrix.rows(), matrix.cols(), "injected pool must be square");
        assert!(strategy.is_pooled(), "injected pools are for pooled strategies");
        Self {
            key: key.to_string(),
            d: matrix.rows(),
            strategy,
            pool: Some(matrix),
            cursor: 0,
            used: BTreeSet::new(),
            epoch: 0,
        }
    }

    /// Restore bookkeeping from a snapshot; the matrix itself is rebuilt
    /// from the world seed before calling this.
    pub fn restore_allocation_state(&mut self, cursor: usize, used: BTreeSet<usize>) {
        self.cursor = cursor;
        self.used = used;
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn strategy(&self) -> BasisStrategy {
        self.strategy
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn used(&self) -> &BTreeSet<usize> {
        &self.used
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn matrix(&self) -> Option<&Matrix<S>> {
        self.pool.as_ref()
    }

    /// Regenerate the pool matrix, invalidating every outstanding handle.
    pub fn rebuild(&mut self, rng: &mut DetRng) -> Result<()> {
        if self.strategy.is_pooled() {
            self.pool = Some(qr_orthonormal(rng, self.d)?);
        }
        self.cursor = 0;
        self.used.clear();
        self.epoch += 1;
        Ok(())
    }

    /// Allocate a fresh r1-dimensional subspace for `character_id`.
    pub fn allocate(
        &mut self,
        character_id: &str,
        r1: usize,
        rng: &mut DetRng,
    ) -> Result<SubspaceHandle<S>> {
        assert!(r1 >= 1, "r1 must be >= 1");
        let spec = match self.strategy {
            BasisStrategy::Sequential => {
                if self.cursor + r1 > self.d {
                    return Err(Error::PoolExhausted {
                        pool: self.key.clone(),
                        cursor: self.cursor,
                        r1,
                        d: self.d,
                    });
                }
                let cols: Vec<usize> = (self.cursor..self.cursor + r1).collect();
                self.cursor += r1;
                self.used.extend(cols.iter().copied());
                HandleSpec::Columns(cols)
            }
            BasisStrategy::RandomColumns => {
                let mut free: Vec<usize> =
                    (0..self.d).filter(|i| !self.used.contains(i)).collect();
                if free.len() < r1 {
                    return Err(Error::PoolExhausted {
                        pool: self.key.clone(),
                        cursor: self.used.len(),
                        r1,
                        d: self.d,
                    });
                }
                let mut cols = Vec::with_capacity(r1);
                for _ in 0..r1 {
                    let pick = rng.index(free.len());
                    cols.push(free.swap_remove(pick));
                }
                self.used.extend(cols.iter().copied());
                HandleSpec::Columns(cols)
            }
            BasisStrategy::GaussianDirect => {
                let stddev = 1.0 / (self.d as f64).sqrt();
                HandleSpec::Basis(gaussian_matrix(rng, self.d, r1, stddev))
            }
            BasisStrategy::UniformDirect => {
                let bound = (3.0 / self.d as f64).sqrt();
                HandleSpec::Basis(uniform_matrix(rng, self.d, r1, -bound, bound))
            }
        };
        Ok(SubspaceHandle {
            character_id: character_id.to_string(),
            pool_key: self.key.clone(),
            spec,
            epoch: self.epoch,
        })
    }

    /// Reattach a handle loaded from a snapshot to this pool's epoch.
    pub fn adopt_handle(
        &self,
        character_id: &str,
        spec: HandleSpec<S>,
    ) -> Result<SubspaceHandle<S>> {
        if let HandleSpec::Columns(cols) = &spec {
            if cols.iter().any(|&c| c >= self.d) {
                return Err(Error::Snapshot(format!(
                    "handle column out of range for pool '{}' (d = {})",
                    self.key, self.d
                )));
            }
        }
        Ok(SubspaceHandle {
            character_id: character_id.to_string(),
            pool_key: self.key.clone(),
            spec,
            epoch: self.epoch,
        })
    }

    fn check_handle(&self, handle: &SubspaceHandle<S>) -> Result<()> {
        if handle.pool_key != self.key {
            return Err(Error::PoolMismatch {
                handle: handle.pool_key.clone(),
                pool: self.key.clone(),
            });
        }
        if handle.epoch != self.epoch {
            return Err(Error::StaleHandle {
                pool: self.key.clone(),
                handle_epoch: handle.epoch,
                pool_epoch: self.epoch,
            });
        }
        Ok(())
    }

    /// The d x r1 basis matrix behind a handle.
    pub fn basis_of(&self, handle: &SubspaceHandle<S>) -> Result<Matrix<S>> {
        self.check_handle(handle)?;
        match &handle.spec {
            HandleSpec::Columns(cols) => {
                let pool = self.pool.as_ref().expect("pooled strategy has a matrix");
                Ok(pool.gather_cols(cols))
            }
            HandleSpec::Basis(b) => Ok(b.clone()),
        }
    }

    /// The projection P = D D^T that restricts inputs to the handle's subspace.
    pub fn projection(&self, handle: &SubspaceHandle<S>) -> Result<Matrix<S>> {
        let basis = self.basis_of(handle)?;
        basis.matmul(&basis.transpose())
    }

    /// Max-abs entry of D_i^T D_j: the interference bound certificate.
    pub fn cross_coherence(
        &self,
        a: &SubspaceHandle<S>,
        b: &SubspaceHandle<S>,
    ) -> Result<S> {
        let da = self.basis_of(a)?;
        let db = self.basis_of(b)?;
        Ok(da.transpose().matmul(&db)?.max_abs())
    }
}

/// The global sampling stage runs with no projection at all: P_g = 0.
pub fn global_projection<S: Scalar>(d: usize) -> Matrix<S> {
    Matrix::zeros(d, d)
}
