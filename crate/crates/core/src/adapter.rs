//! The unified character adapter: one shared low-rank residual per adapted
//! projection, holding every character of the story world at once.
//!
//! The residual weight is Delta W = (sum_k D_k L_k) B with a single frozen
//! B shared by all characters. Each character k owns a fixed orthonormal
//! basis D_k (disjoint pool columns) and a trainable L_k. A character's
//! forward pass projects its input onto its own subspace before the residual
//! branch, so the cross terms contributed by every other character vanish
//! (exactly for an exactly orthonormal pool, to rounding for a QR pool).
//! The pre-trained path always consumes the unprojected input; only the
//! residual branch sees x P_i.

use std::collections::BTreeSet;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, DetRng, Matrix};
use crate::scalar::Scalar;
use crate::subspace::{BasisPool, SubspaceHandle};

/// Projections of an attention block that may carry an adapter. Cross
/// attention K and V never do, so those variants do not exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterSite {
    SelfQ,
    SelfK,
    SelfV,
    CrossQ,
}

impl AdapterSite {
    pub const ALL: [AdapterSite; 4] =
        [AdapterSite::SelfQ, AdapterSite::SelfK, AdapterSite::SelfV, AdapterSite::CrossQ];

    pub fn as_str(self) -> &'static str {
        match self {
            AdapterSite::SelfQ => "self-q",
            AdapterSite::SelfK => "self-k",
            AdapterSite::SelfV => "self-v",
            AdapterSite::CrossQ => "cross-q",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "self-q" => Ok(AdapterSite::SelfQ),
            "self-k" => Ok(AdapterSite::SelfK),
            "self-v" => Ok(AdapterSite::SelfV),
            "cross-q" => Ok(AdapterSite::CrossQ),
            other => Err(Error::Config(format!("unknown adapter site '{other}'"))),
        }
    }
}

/// Which sites carry an adapter, per attention block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlacementMap {
    per_block: Vec<BTreeSet<AdapterSite>>,
}

impl PlacementMap {
    /// Every block adapts all four sites (the default placement).
    pub fn uniform(blocks: usize) -> Self {
        Self { per_block: vec![AdapterSite::ALL.into_iter().collect(); blocks] }
    }

    pub fn with_sites(blocks: usize, sites: &[AdapterSite]) -> Self {
        Self { per_block: vec![sites.iter().copied().collect(); blocks] }
    }

    pub fn blocks(&self) -> usize {
        self.per_block.len()
    }

    pub fn carries(&self, block: usize, site: AdapterSite) -> bool {
        self.per_block.get(block).is_some_and(|s| s.contains(&site))
    }

    pub fn sites(&self, block: usize) -> impl Iterator<Item = AdapterSite> + '_ {
        self.per_block[block].iter().copied()
    }
}

/// Forward-pass context: the global stage reads no adapter state at all.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CharContext<'a> {
    Global,
    Character(&'a str),
}

/// One character's share of an adapter: its subspace handle, the cached
/// basis behind it, and the trainable factor.
#[derive(Clone, Debug)]
pub struct CharacterSlot<S: Scalar> {
    pub handle: SubspaceHandle<S>,
    basis: Matrix<S>,
    l: Matrix<S>,
    frozen: bool,
}

impl<S: Scalar> CharacterSlot<S> {
    pub fn basis(&self) -> &Matrix<S> {
        &self.basis
    }

    pub fn l(&self) -> &Matrix<S> {
        &self.l
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// This character's contribution to the accumulated A: D_k L_k.
    fn a_term(&self) -> Matrix<S> {
        self.basis.matmul(&self.l).expect("slot dims fixed at install")
    }
}

/// The single shared low-rank module for one adapted projection.
#[derive(Clone, Debug)]
pub struct UnifiedAdapter<S: Scalar> {
    layer: String,
    d: usize,
    r: usize,
    r1: usize,
    k_out: usize,
    b_shared: Matrix<S>,
    slots: IndexMap<String, CharacterSlot<S>>,
}

impl<S: Scalar> UnifiedAdapter<S> {
    /// Fresh adapter with B drawn once from N(0, 1) and frozen thereafter.
    pub fn new(
        layer: &str,
        d: usize,
        r: usize,
        r1: usize,
        k_out: usize,
        rng: &mut DetRng,
    ) -> Self {
        assert!(d >= r1, "d must be >= r1");
        let b_shared = gaussian_matrix(rng, r, k_out, 1.0);
        Self { layer: layer.to_string(), d, r, r1, k_out, b_shared, slots: IndexMap::new() }
    }

    /// Test seam: construct with a known B.
    pub fn with_b(layer: &str, d: usize, r1: usize, b_shared: Matrix<S>) -> Self {
        assert!(d >= r1, "d must be >= r1");
        let (r, k_out) = b_shared.shape();
        Self { layer: layer.to_string(), d, r, r1, k_out, b_shared, slots: IndexMap::new() }
    }

    pub fn layer(&self) -> &str {
        &self.layer
    }

    /// (d, r, r1, k_out).
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.d, self.r, self.r1, self.k_out)
    }

    pub fn b_shared(&self) -> &Matrix<S> {
        &self.b_shared
    }

    /// Replace B from a snapshot payload. Only valid on an empty adapter;
    /// B never changes once characters exist.
    pub fn restore_b(&mut self, b: Matrix<S>) -> Result<()> {
        if !self.slots.is_empty() {
            return Err(Error::Snapshot(format!(
                "cannot restore B of layer '{}' after characters were installed",
                self.layer
            )));
        }
        if b.shape() != (self.r, self.k_out) {
            return Err(Error::Snapshot(format!(
                "B for layer '{}' has shape {}x{}, expected {}x{}",
                self.layer,
                b.rows(),
                b.cols(),
                self.r,
                self.k_out
            )));
        }
        self.b_shared = b;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn characters(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(|s| s.as_str())
    }

    pub fn slot(&self, id: &str) -> Result<&CharacterSlot<S>> {
        self.slots.get(id).ok_or_else(|| Error::UnknownCharacter(id.to_string()))
    }

    /// Allocate a subspace from `pool` and install a zero-initialized slot,
    /// so the new character contributes nothing until trained.
    pub fn add_character(
        &mut self,
        id: &str,
        pool: &mut BasisPool<S>,
        rng: &mut DetRng,
    ) -> Result<&CharacterSlot<S>> {
        if self.slots.contains_key(id) {
            return Err(Error::DuplicateCharacter(id.to_string()));
        }
        let handle = pool.allocate(id, self.r1, rng)?;
        self.install_character(id, handle, pool)
    }

    /// Install a slot behind an already-allocated handle. Layers sharing a
    /// pool share one handle per character, so allocation happens once.
    pub fn install_character(
        &mut self,
        id: &str,
        handle: SubspaceHandle<S>,
        pool: &BasisPool<S>,
    ) -> Result<&CharacterSlot<S>> {
        if self.slots.contains_key(id) {
            return Err(Error::DuplicateCharacter(id.to_string()));
        }
        let basis = pool.basis_of(&handle)?;
        assert_eq!(basis.shape(), (self.d, self.r1), "basis shape");
        let slot =
            CharacterSlot { handle, basis, l: Matrix::zeros(self.r1, self.r), frozen: true };
        self.slots.insert(id.to_string(), slot);
        Ok(&self.slots[id])
    }

    /// Mark exactly one character trainable (or none). At most one L is
    /// mutable at a time; that is the continual-learning discipline.
    pub fn set_training(&mut self, id: Option<&str>) -> Result<()> {
        if let Some(id) = id {
            if !self.slots.contains_key(id) {
                return Err(Error::UnknownCharacter(id.to_string()));
            }
        }
        for (key, slot) in self.slots.iter_mut() {
            slot.frozen = Some(key.as_str()) != id;
        }
        Ok(())
    }

    /// Mutable access to the one unfrozen L.
    pub fn l_mut(&mut self, id: &str) -> Result<&mut Matrix<S>> {
        let slot =
            self.slots.get_mut(id).ok_or_else(|| Error::UnknownCharacter(id.to_string()))?;
        debug_assert!(!slot.frozen, "training a frozen slot");
        Ok(&mut slot.l)
    }

    /// Restore a slot from a snapshot.
    pub fn restore_character(
        &mut self,
        id: &str,
        handle: SubspaceHandle<S>,
        l: Matrix<S>,
        pool: &BasisPool<S>,
    ) -> Result<()> {
        if self.slots.contains_key(id) {
            return Err(Error::DuplicateCharacter(id.to_string()));
        }
        if l.shape() != (self.r1, self.r) {
            return Err(Error::Snapshot(format!(
                "L for '{id}' in layer '{}' has shape {}x{}, expected {}x{}",
                self.layer,
                l.rows(),
                l.cols(),
                self.r1,
                self.r
            )));
        }
        let basis = pool.basis_of(&handle)?;
        self.slots.insert(id.to_string(), CharacterSlot { handle, basis, l, frozen: true });
        Ok(())
    }

    /// Accumulated A = sum_k D_k L_k (d x r).
    pub fn accumulated_a(&self) -> Matrix<S> {
        let mut acc = Matrix::zeros(self.d, self.r);
        for slot in self.slots.values() {
            acc.add_assign(&slot.a_term()).expect("fixed dims");
        }
        acc
    }

    /// Accumulated residual weight Delta W = (sum_k D_k L_k) B (d x k_out).
    pub fn accumulated_delta(&self) -> Matrix<S> {
        self.accumulated_a().matmul(&self.b_shared).expect("fixed dims")
    }

    fn check_forward_shapes(&self, x: &Matrix<S>, w_base: &Matrix<S>) -> Result<()> {
        if x.cols() != self.d {
            return Err(Error::ShapeMismatch {
                op: "adapter forward (input)",
                left_rows: x.rows(),
                left_cols: x.cols(),
                right_rows: self.d,
                right_cols: self.k_out,
            });
        }
        if w_base.shape() != (self.d, self.k_out) {
            return Err(Error::ShapeMismatch {
                op: "adapter forward (base weight)",
                left_rows: w_base.rows(),
                left_cols: w_base.cols(),
                right_rows: self.d,
                right_cols: self.k_out,
            });
        }
        Ok(())
    }

    /// Residual branch only, faithful accumulated form:
    /// (x P_i) (sum_k D_k L_k) B.
    pub fn residual(&self, x: &Matrix<S>, id: &str) -> Result<Matrix<S>> {
        let slot = self.slot(id)?;
        let xd = x.matmul(&slot.basis)?;
        let xp = xd.matmul(&slot.basis.transpose())?;
        let a_sum = self.accumulated_a();
        xp.matmul(&a_sum)?.matmul(&self.b_shared)
    }

    /// Projected forward pass. The global context returns x W exactly; a
    /// character context adds its projected residual on top of the
    /// unprojected base path.
    pub fn forward(
        &self,
        x: &Matrix<S>,
        ctx: CharContext<'_>,
        w_base: &Matrix<S>,
    ) -> Result<Matrix<S>> {
        self.check_forward_shapes(x, w_base)?;
        let base = x.matmul(w_base)?;
        match ctx {
            CharContext::Global => Ok(base),
            CharContext::Character(id) => {
                let res = self.residual(x, id)?;
                base.add(&res)
            }
        }
    }

    /// Collapsed single-character form: x W + x D_i L_i B, skipping every
    /// other character's term entirely.
    pub fn forward_direct(
        &self,
        x: &Matrix<S>,
        id: &str,
        w_base: &Matrix<S>,
    ) -> Result<Matrix<S>> {
        self.check_forward_shapes(x, w_base)?;
        let slot = self.slot(id)?;
        let base = x.matmul(w_base)?;
        let res = x.matmul(&slot.basis)?.matmul(&slot.l)?.matmul(&self.b_shared)?;
        base.add(&res)
    }

    /// The exact cross-term characters (i, j] inject into character i's
    /// projected output: x P_i (sum_{k=i+1..j} D_k L_k) B.
    pub fn interference_term(&self, x: &Matrix<S>, i: &str, j: &str) -> Result<Matrix<S>> {
        let i_pos =
            self.slots.get_index_of(i).ok_or_else(|| Error::UnknownCharacter(i.to_string()))?;
        let j_pos =
            self.slots.get_index_of(j).ok_or_else(|| Error::UnknownCharacter(j.to_string()))?;
        if i_pos >= j_pos {
            return Err(Error::OrderViolation { earlier: i.to_string(), later: j.to_string() });
        }
        let slot_i = &self.slots[i_pos];
        let mut delta_a = Matrix::zeros(self.d, self.r);
        for k in (i_pos + 1)..=j_pos {
            delta_a.add_assign(&self.slots[k].a_term()).expect("fixed dims");
        }
        let xp = x.matmul(&slot_i.basis)?.matmul(&slot_i.basis.transpose())?;
        xp.matmul(&delta_a)?.matmul(&self.b_shared)
    }
}
