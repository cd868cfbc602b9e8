//! Row reordering so rows with identical kept-column sets sit next to each
//! other.

use crate::error::{GrimError, Result};
use crate::pruner::BcrMask;
use crate::tensor::DenseMatrix;

/// `perm[k]` is the original row placed at position `k`; `groups` are the
/// half-open ranges of reordered rows sharing one column set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReorderPlan {
    pub perm: Vec<usize>,
    pub groups: Vec<(usize, usize)>,
}

/// 64-bit FNV-1a over the little-endian bytes of each index.
pub fn column_fingerprint(cols: &[usize]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &c in cols {
        for byte in (c as u64).to_le_bytes() {
            h ^= u64::from(byte);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

impl ReorderPlan {
    pub fn identity(rows: usize) -> Self {
        Self {
            perm: (0..rows).collect(),
            groups: if rows == 0 { Vec::new() } else { vec![(0, rows)] },
        }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// Checks that `perm` is a permutation and `groups` tile it in order.
    pub fn validate(&self) -> Result<()> {
        check_perm(&self.perm)?;
        let mut at = 0;
        for &(s, e) in &self.groups {
            if s != at || e <= s {
                return Err(GrimError::Perm(format!("group ({s}, {e}) does not continue at {at}")));
            }
            at = e;
        }
        if at != self.perm.len() {
            return Err(GrimError::Perm(format!("groups cover {at} of {} rows", self.perm.len())));
        }
        Ok(())
    }

    /// `inverse[perm[k]] == k`.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (k, &r) in self.perm.iter().enumerate() {
            inv[r] = k;
        }
        inv
    }
}

pub(crate) fn check_perm(perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return Err(GrimError::Perm(format!("entry {p} out of range or repeated")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Sorts rows by kept count (descending), then column-set fingerprint, then
/// original row id, and groups maximal runs of identical column sets.
pub fn plan_reorder(w: &DenseMatrix, mask: &BcrMask) -> Result<ReorderPlan> {
    let p = mask.partition();
    w.expect_shape((p.rows, p.cols))?;
    let cols: Vec<Vec<usize>> = (0..p.rows).map(|r| mask.row_columns(r)).collect();
    let prints: Vec<u64> = cols.iter().map(|c| column_fingerprint(c)).collect();
    let mut perm: Vec<usize> = (0..p.rows).collect();
    perm.sort_by(|&a, &b| {
        cols[b]
            .len()
            .cmp(&cols[a].len())
            .then(prints[a].cmp(&prints[b]))
            .then_with(|| cols[a].cmp(&cols[b]))
            .then(a.cmp(&b))
    });
    let mut groups = Vec::new();
    let mut start = 0;
    for k in 1..=perm.len() {
        if k == perm.len() || cols[perm[k]] != cols[perm[start]] {
            groups.push((start, k));
            start = k;
        }
    }
    Ok(ReorderPlan { perm, groups })
}

/// Row `k` of the result is row `perm[k]` of `w`.
pub fn apply_reorder(w: &DenseMatrix, plan: &ReorderPlan) -> Result<DenseMatrix> {
    if plan.perm.len() != w.rows() {
        return Err(GrimError::Perm(format!("plan has {} rows, matrix {}", plan.perm.len(), w.rows())));
    }
    check_perm(&plan.perm)?;
    let mut data = Vec::with_capacity(w.rows() * w.cols());
    for &r in &plan.perm {
        data.extend_from_slice(w.row(r));
    }
    DenseMatrix::new(w.rows(), w.cols(), data)
}

/// Inverse of [`apply_reorder`] on the output rows: row `perm[k]` of the
/// result is row `k` of `y`.
pub fn unreorder_output(y: &DenseMatrix, plan: &ReorderPlan) -> Result<DenseMatrix> {
    if plan.perm.len() != y.rows() {
        return Err(GrimError::Perm(format!("plan has {} rows, output {}", plan.perm.len(), y.rows())));
    }
    check_perm(&plan.perm)?;
    let mut out = DenseMatrix::zeros(y.rows(), y.cols());
    for (k, &r) in plan.perm.iter().enumerate() {
        out.row_mut(r).copy_from_slice(y.row(k));
    }
    Ok(out)
}
