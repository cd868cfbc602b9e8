//! Blocked column-row compact storage, a CSR baseline and the byte
//! accounting used to compare them.
//!
//! A BCRC matrix stores its rows in reordered order. Consecutive rows with the
//! same kept-column list form a run; the list is stored once per run in
//! `compact_column`, and `column_stride` points at each run's slice of it.

use std::fs;
use std::path::Path;

use crate::error::{GrimError, Result};
use crate::pruner::BcrMask;
use crate::reorder::{check_perm, ReorderPlan};
use crate::tensor::DenseMatrix;

pub const BCRC_MAGIC: &[u8; 4] = b"BCRC";
pub const BCRC_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct BcrcMatrix {
    rows: usize,
    cols: usize,
    reorder: Vec<u32>,
    row_offset: Vec<u32>,
    occurrence: Vec<u32>,
    column_stride: Vec<u32>,
    compact_column: Vec<u32>,
    weights: Vec<f32>,
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| GrimError::Format(format!("{what} {v} does not fit in 32 bits")))
}

impl BcrcMatrix {
    /// Builds a matrix from its six arrays, checking every structural
    /// invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        rows: usize,
        cols: usize,
        reorder: Vec<u32>,
        row_offset: Vec<u32>,
        occurrence: Vec<u32>,
        column_stride: Vec<u32>,
        compact_column: Vec<u32>,
        weights: Vec<f32>,
    ) -> Result<Self> {
        let m = Self {
            rows,
            cols,
            reorder,
            row_offset,
            occurrence,
            column_stride,
            compact_column,
            weights,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GrimError::Format(msg));
        if self.rows == 0 || self.cols == 0 {
            return bad(format!("empty dimensions {}x{}", self.rows, self.cols));
        }
        if self.reorder.len() != self.rows {
            return bad(format!("reorder has {} entries for {} rows", self.reorder.len(), self.rows));
        }
        let perm: Vec<usize> = self.reorder.iter().map(|&r| r as usize).collect();
        check_perm(&perm).map_err(|e| GrimError::Format(e.to_string()))?;
        if self.row_offset.len() != self.rows + 1 || self.row_offset[0] != 0 {
            return bad("row_offset must have rows + 1 entries starting at 0".into());
        }
        if self.row_offset.windows(2).any(|w| w[0] > w[1]) {
            return bad("row_offset decreases".into());
        }
        if self.row_offset[self.rows] as usize != self.weights.len() {
            return bad(format!(
                "row_offset ends at {} but there are {} weights",
                self.row_offset[self.rows],
                self.weights.len()
            ));
        }
        let g = self.occurrence.len().saturating_sub(1);
        if self.occurrence.len() < 2
            || self.occurrence[0] != 0
            || self.occurrence[g] as usize != self.rows
            || self.occurrence.windows(2).any(|w| w[0] >= w[1])
        {
            return bad("occurrence must rise strictly from 0 to rows".into());
        }
        if self.column_stride.len() != g + 1
            || self.column_stride[0] != 0
            || self.column_stride[g] as usize != self.compact_column.len()
            || self.column_stride.windows(2).any(|w| w[0] > w[1])
        {
            return bad("column_stride must rise from 0 to the compact column count, one entry per run".into());
        }
        for run in 0..g {
            let list = self.run_columns(run);
            if list.windows(2).any(|w| w[0] >= w[1]) || list.iter().any(|&c| c as usize >= self.cols) {
                return bad(format!("run {run} column list is not strictly increasing within bounds"));
            }
            for r in self.occurrence[run] as usize..self.occurrence[run + 1] as usize {
                if (self.row_offset[r + 1] - self.row_offset[r]) as usize != list.len() {
                    return bad(format!("row {r} length disagrees with its run's column list"));
                }
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.weights.len()
    }

    pub fn reorder(&self) -> &[u32] {
        &self.reorder
    }

    pub fn row_offset(&self) -> &[u32] {
        &self.row_offset
    }

    pub fn occurrence(&self) -> &[u32] {
        &self.occurrence
    }

    pub fn column_stride(&self) -> &[u32] {
        &self.column_stride
    }

    pub fn compact_column(&self) -> &[u32] {
        &self.compact_column
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn run_count(&self) -> usize {
        self.occurrence.len() - 1
    }

    /// Reordered row range `[start, end)` of run `g`.
    #[inline]
    pub fn run_rows(&self, g: usize) -> (usize, usize) {
        (self.occurrence[g] as usize, self.occurrence[g + 1] as usize)
    }

    #[inline]
    pub fn run_columns(&self, g: usize) -> &[u32] {
        &self.compact_column[self.column_stride[g] as usize..self.column_stride[g + 1] as usize]
    }

    /// Stored weights of reordered row `k`.
    #[inline]
    pub fn row_weights(&self, k: usize) -> &[f32] {
        &self.weights[self.row_offset[k] as usize..self.row_offset[k + 1] as usize]
    }

    /// Drops the given columns, which must hold no stored weight, and
    /// renumbers the rest. Pairs with `im2col_skipping` on the input side.
    pub fn without_columns(&self, dead: &[usize]) -> Result<Self> {
        let mut is_dead = vec![false; self.cols];
        for &d in dead {
            if d >= self.cols {
                return Err(GrimError::Index(format!("column {d} out of range for {} columns", self.cols)));
            }
            is_dead[d] = true;
        }
        let live = is_dead.iter().filter(|&&d| !d).count();
        if live == 0 {
            return Err(GrimError::shape("every column is dead"));
        }
        let mut new_index = vec![0u32; self.cols];
        let mut next = 0u32;
        for c in 0..self.cols {
            new_index[c] = next;
            if !is_dead[c] {
                next += 1;
            }
        }
        let mut compact_column = Vec::with_capacity(self.compact_column.len());
        for &c in &self.compact_column {
            if is_dead[c as usize] {
                return Err(GrimError::Consistency(format!("column {c} is listed as dead but stores weights")));
            }
            compact_column.push(new_index[c as usize]);
        }
        Ok(Self {
            cols: live,
            compact_column,
            ..self.clone()
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + 4 * (6 + self.extra_storage_len() + self.weights.len()));
        out.extend_from_slice(BCRC_MAGIC);
        out.push(BCRC_VERSION);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for arr in [
            &self.reorder,
            &self.row_offset,
            &self.occurrence,
            &self.column_stride,
            &self.compact_column,
        ] {
            out.extend_from_slice(&(arr.len() as u32).to_le_bytes());
            for v in arr.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.weights.len() as u32).to_le_bytes());
        for v in &self.weights {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, at: 0 };
        if r.take(4)? != BCRC_MAGIC {
            return Err(GrimError::Format("bad magic, expected BCRC".into()));
        }
        let version = r.take(1)?[0];
        if version != BCRC_VERSION {
            return Err(GrimError::Format(format!("unsupported version {version}")));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let reorder = r.u32_array()?;
        let row_offset = r.u32_array()?;
        let occurrence = r.u32_array()?;
        let column_stride = r.u32_array()?;
        let compact_column = r.u32_array()?;
        let weights = r.u32_array()?.into_iter().map(f32::from_bits).collect();
        if r.at != bytes.len() {
            return Err(GrimError::Format(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Self::from_parts(rows, cols, reorder, row_offset, occurrence, column_stride, compact_column, weights)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| GrimError::io_at(path, e))?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| GrimError::io_at(path, e))?)
    }

    fn extra_storage_len(&self) -> usize {
        self.reorder.len()
            + self.row_offset.len()
            + self.occurrence.len()
            + self.column_stride.len()
            + self.compact_column.len()
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| GrimError::Format(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u32_array(&mut self) -> Result<Vec<u32>> {
        let len = self.u32()? as usize;
        let raw = self.take(len.checked_mul(4).ok_or_else(|| GrimError::Format("array too long".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }
}

/// Encodes `w ⊙ mask` with rows in `plan` order.
pub fn encode_bcrc(w: &DenseMatrix, mask: &BcrMask, plan: &ReorderPlan) -> Result<BcrcMatrix> {
    let p = mask.partition();
    if w.shape() != (p.rows, p.cols) {
        return Err(GrimError::Consistency(format!(
            "matrix is {}x{} but mask is {}x{}",
            w.rows(),
            w.cols(),
            p.rows,
            p.cols
        )));
    }
    if plan.perm.len() != w.rows() {
        return Err(GrimError::Consistency(format!(
            "plan covers {} rows, matrix has {}",
            plan.perm.len(),
            w.rows()
        )));
    }
    plan.validate().map_err(|e| GrimError::Consistency(e.to_string()))?;
    let lists: Vec<Vec<usize>> = plan.perm.iter().map(|&r| mask.row_columns(r)).collect();
    for &(s, e) in &plan.groups {
        if lists[s..e].iter().any(|l| *l != lists[s]) {
            return Err(GrimError::Consistency(format!("group ({s}, {e}) mixes column sets")));
        }
    }
    let to_u32s = |v: &[usize], what: &str| v.iter().map(|&x| to_u32(x, what)).collect::<Result<Vec<u32>>>();
    let reorder = to_u32s(&plan.perm, "row index")?;
    let mut row_offset = vec![0u32];
    let mut occurrence = vec![0u32];
    let mut column_stride = vec![0u32];
    let mut compact_column = Vec::new();
    let mut weights = Vec::new();
    for (k, &r) in plan.perm.iter().enumerate() {
        if k > 0 && lists[k] != lists[k - 1] {
            occurrence.push(to_u32(k, "row index")?);
        }
        if k == 0 || lists[k] != lists[k - 1] {
            compact_column.extend(to_u32s(&lists[k], "column index")?);
            column_stride.push(to_u32(compact_column.len(), "column count")?);
        }
        let row = w.row(r);
        weights.extend(lists[k].iter().map(|&c| row[c]));
        row_offset.push(to_u32(weights.len(), "weight count")?);
    }
    occurrence.push(to_u32(w.rows(), "row count")?);
    BcrcMatrix::from_parts(w.rows(), w.cols(), reorder, row_offset, occurrence, column_stride, compact_column, weights)
}

/// Dense matrix in original row order, `+0.0` at every unstored position.
pub fn decode_bcrc(b: &BcrcMatrix) -> Result<DenseMatrix> {
    b.validate()?;
    let mut out = DenseMatrix::zeros(b.rows, b.cols);
    for g in 0..b.run_count() {
        let cols = b.run_columns(g);
        let (s, e) = b.run_rows(g);
        for k in s..e {
            let row = out.row_mut(b.reorder[k] as usize);
            for (&c, &v) in cols.iter().zip(b.row_weights(k)) {
                row[c as usize] = v;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<u32>,
    pub col_idx: Vec<u32>,
    pub values: Vec<f32>,
}

/// Stores every entry of `w` (restricted to `mask` when given) whose bit
/// pattern is not `+0.0`.
pub fn encode_csr(w: &DenseMatrix, mask: Option<&BcrMask>) -> Result<CsrMatrix> {
    if let Some(m) = mask {
        let p = m.partition();
        w.expect_shape((p.rows, p.cols))?;
    }
    let mut row_ptr = vec![0u32];
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    for r in 0..w.rows() {
        for (c, &v) in w.row(r).iter().enumerate() {
            if v.to_bits() != 0 && mask.map_or(true, |m| m.is_kept(r, c)) {
                col_idx.push(to_u32(c, "column index")?);
                values.push(v);
            }
        }
        row_ptr.push(to_u32(values.len(), "value count")?);
    }
    Ok(CsrMatrix {
        rows: w.rows(),
        cols: w.cols(),
        row_ptr,
        col_idx,
        values,
    })
}

pub fn decode_csr(m: &CsrMatrix) -> Result<DenseMatrix> {
    if m.row_ptr.len() != m.rows + 1
        || m.row_ptr[0] != 0
        || m.row_ptr.windows(2).any(|w| w[0] > w[1])
        || m.row_ptr[m.rows] as usize != m.values.len()
        || m.col_idx.len() != m.values.len()
    {
        return Err(GrimError::Format("malformed CSR arrays".into()));
    }
    let mut out = DenseMatrix::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        for k in m.row_ptr[r] as usize..m.row_ptr[r + 1] as usize {
            let c = m.col_idx[k] as usize;
            if c >= m.cols {
                return Err(GrimError::Format(format!("column {c} out of range")));
            }
            out.set(r, c, m.values[k]);
        }
    }
    Ok(out)
}

/// Bytes spent on everything except the stored weight values, at four bytes
/// per index entry.
pub trait ExtraStorage {
    fn extra_storage_bytes(&self) -> usize;
}

impl ExtraStorage for BcrcMatrix {
    fn extra_storage_bytes(&self) -> usize {
        4 * self.extra_storage_len()
    }
}

impl ExtraStorage for CsrMatrix {
    fn extra_storage_bytes(&self) -> usize {
        4 * (self.row_ptr.len() + self.col_idx.len())
    }
}

pub fn extra_storage_bytes(fmt: &dyn ExtraStorage) -> usize {
    fmt.extra_storage_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruner::{project_bcr, BlockPartition, SparsityConstraint};
    use crate::reorder::plan_reorder;
    use crate::reorder::tests::shared_columns_example;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bits(m: &DenseMatrix) -> Vec<u32> {
        m.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn shared_columns_arrays() {
        let (w, mask) = shared_columns_example();
        let plan = plan_reorder(&w, &mask).unwrap();
        let b = encode_bcrc(&w, &mask, &plan).unwrap();
        assert_eq!(b.reorder(), &[0, 3, 2, 1]);
        assert_eq!(b.row_offset(), &[0, 3, 6, 8, 9]);
        assert_eq!(b.occurrence(), &[0, 2, 3, 4]);
        assert_eq!(b.column_stride(), &[0, 3, 5, 6]);
        assert_eq!(b.compact_column(), &[0, 3, 6, 0, 3, 6]);
        assert_eq!(b.weights(), &[1.0, 4.0, 7.0, 31.0, 34.0, 37.0, 21.0, 24.0, 17.0]);
        assert_eq!(bits(&decode_bcrc(&b).unwrap()), bits(&w));
    }

    #[test]
    fn dense_two_by_two() {
        let w = DenseMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mask = BcrMask::full(BlockPartition::new(2, 2, 1, 1).unwrap());
        let b = encode_bcrc(&w, &mask, &plan_reorder(&w, &mask).unwrap()).unwrap();
        assert_eq!(b.run_count(), 1);
        assert_eq!(b.compact_column(), &[0, 1]);
        assert_eq!(b.weights().len(), 4);
    }

    #[test]
    fn fully_pruned_and_single_row() {
        let p = BlockPartition::new(3, 4, 1, 2).unwrap();
        let mask = BcrMask::from_parts(p, vec![vec![false; 3]; 2], vec![vec![true; 2]; 2]).unwrap();
        let w = DenseMatrix::from_fn(3, 4, |r, c| (r + c) as f32 + 1.0);
        let b = encode_bcrc(&w, &mask, &plan_reorder(&w, &mask).unwrap()).unwrap();
        assert_eq!(b.nnz(), 0);
        assert_eq!(b.run_count(), 1);
        assert_eq!(decode_bcrc(&b).unwrap(), DenseMatrix::zeros(3, 4));

        let p = BlockPartition::new(1, 4, 1, 2).unwrap();
        let mask = BcrMask::from_parts(p, vec![vec![true]; 2], vec![vec![true, false], vec![false, true]]).unwrap();
        let w = DenseMatrix::new(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = encode_bcrc(&w, &mask, &plan_reorder(&w, &mask).unwrap()).unwrap();
        assert_eq!(decode_bcrc(&b).unwrap(), mask.apply(&w).unwrap());
    }

    #[test]
    fn rejects_inconsistent_plan() {
        let (w, mask) = shared_columns_example();
        let mixed = ReorderPlan {
            perm: vec![0, 1, 2, 3],
            groups: vec![(0, 4)],
        };
        assert!(matches!(encode_bcrc(&w, &mask, &mixed), Err(GrimError::Consistency(_))));
        let short = ReorderPlan::identity(3);
        assert!(matches!(encode_bcrc(&w, &mask, &short), Err(GrimError::Consistency(_))));
    }

    #[test]
    fn csr_examples() {
        let id = DenseMatrix::identity(3);
        let c = encode_csr(&id, None).unwrap();
        assert_eq!(c.row_ptr, vec![0, 1, 2, 3]);
        assert_eq!(c.col_idx, vec![0, 1, 2]);
        assert_eq!(c.extra_storage_bytes(), 4 * (3 + 1 + 3));
        let z = encode_csr(&DenseMatrix::zeros(2, 5), None).unwrap();
        assert!(z.values.is_empty());
        assert_eq!(decode_csr(&z).unwrap(), DenseMatrix::zeros(2, 5));
    }

    #[test]
    fn one_run_storage_formula() {
        // k rows all keeping the same s columns.
        let (k, cols, s) = (6usize, 10usize, 4usize);
        let p = BlockPartition::new(k, cols, 1, 1).unwrap();
        let kept: Vec<bool> = (0..cols).map(|c| c < s).collect();
        let mask = BcrMask::from_parts(p, vec![vec![true; k]], vec![kept]).unwrap();
        let w = mask.apply(&DenseMatrix::from_fn(k, cols, |r, c| (r * cols + c + 1) as f32)).unwrap();
        let b = encode_bcrc(&w, &mask, &plan_reorder(&w, &mask).unwrap()).unwrap();
        assert_eq!(extra_storage_bytes(&b), 4 * (k + (k + 1) + 2 + 2 + s));
        let csr = encode_csr(&w, Some(&mask)).unwrap();
        assert_eq!(extra_storage_bytes(&csr), 4 * (k + 1 + k * s));
        assert!(k * s > k + s + 4);
        assert!(b.extra_storage_bytes() < csr.extra_storage_bytes());
    }

    #[test]
    fn byte_layout_and_rejections() {
        let w = DenseMatrix::new(1, 2, vec![1.5, -2.0]).unwrap();
        let mask = BcrMask::full(BlockPartition::new(1, 2, 1, 1).unwrap());
        let b = encode_bcrc(&w, &mask, &plan_reorder(&w, &mask).unwrap()).unwrap();
        let mut want = b"BCRC".to_vec();
        want.push(1);
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        // reorder [0]; row_offset [0, 2]; occurrence [0, 1]; column_stride [0, 2]; compact_column [0, 1]
        for arr in [&[0u32][..], &[0, 2], &[0, 1], &[0, 2], &[0, 1]] {
            want.extend_from_slice(&(arr.len() as u32).to_le_bytes());
            for v in arr {
                want.extend_from_slice(&v.to_le_bytes());
            }
        }
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.5f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(b.to_bytes(), want);
        assert_eq!(BcrcMatrix::from_bytes(&want).unwrap(), b);

        let mut bad = want.clone();
        bad[0] = b'X';
        assert!(matches!(BcrcMatrix::from_bytes(&bad), Err(GrimError::Format(_))));
        assert!(matches!(BcrcMatrix::from_bytes(&want[..want.len() - 1]), Err(GrimError::Format(_))));
        let mut bad = want.clone();
        bad[4] = 9;
        assert!(BcrcMatrix::from_bytes(&bad).is_err());
    }

    #[test]
    fn validate_catches_broken_arrays() {
        let ok = |occ: Vec<u32>| BcrcMatrix::from_parts(2, 2, vec![0, 1], vec![0, 1, 2], occ, vec![0, 1], vec![0], vec![1.0, 2.0]);
        assert!(ok(vec![0, 2]).is_ok());
        assert!(ok(vec![0, 1]).is_err());
        assert!(BcrcMatrix::from_parts(2, 2, vec![0, 0], vec![0, 1, 2], vec![0, 2], vec![0, 1], vec![0], vec![1.0, 2.0]).is_err());
        assert!(BcrcMatrix::from_parts(2, 2, vec![0, 1], vec![0, 1, 2], vec![0, 2], vec![0, 1], vec![5], vec![1.0, 2.0]).is_err());
        assert!(BcrcMatrix::from_parts(2, 2, vec![0, 1], vec![0, 2, 2], vec![0, 2], vec![0, 1], vec![0], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn dropping_dead_columns() {
        let (w, mask) = shared_columns_example();
        let b = encode_bcrc(&w, &mask, &plan_reorder(&w, &mask).unwrap()).unwrap();
        let dead = mask.dead_columns();
        assert_eq!(dead, vec![1, 2, 4, 5, 7]);
        let slim = b.without_columns(&dead).unwrap();
        assert_eq!(slim.cols(), 3);
        assert_eq!(slim.compact_column(), &[0, 1, 2, 0, 1, 2]);
        assert!(b.without_columns(&[0]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]
        #[test]
        fn round_trip_is_bitwise(seed in any::<u64>(), n in 1usize..5, m in 1usize..5, bh in 1usize..6, bw in 1usize..6, alpha in 0.0f64..0.95) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x = DenseMatrix::random(n * bh, m * bw, &mut rng);
            if rng.random_bool(0.3) {
                x.set(0, 0, -0.0);
            }
            let (_, mask) = project_bcr(&x, &SparsityConstraint::new(alpha, n, m).unwrap()).unwrap();
            let plan = plan_reorder(&x, &mask).unwrap();
            let b = encode_bcrc(&x, &mask, &plan).unwrap();
            prop_assert_eq!(bits(&decode_bcrc(&b).unwrap()), bits(&mask.apply(&x).unwrap()));
            prop_assert_eq!(BcrcMatrix::from_bytes(&b.to_bytes()).unwrap(), b.clone());
            let mut sets: Vec<Vec<usize>> = (0..x.rows()).map(|r| mask.row_columns(r)).collect();
            sets.sort();
            sets.dedup();
            prop_assert_eq!(b.run_count(), sets.len());
            let csr = encode_csr(&x, Some(&mask)).unwrap();
            prop_assert_eq!(bits(&decode_csr(&csr).unwrap()), bits(&mask.apply(&x).unwrap()));
        }
    }
}
