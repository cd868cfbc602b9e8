use std::fmt::Write as _;

use crate::error::{GrimError, Result};
use crate::tensor::DenseMatrix;

/// Target zero ratio plus the block grid (`n x m` blocks) it applies to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparsityConstraint {
    pub alpha: f64,
    pub block_rows: usize,
    pub block_cols: usize,
}

impl SparsityConstraint {
    pub fn new(alpha: f64, block_rows: usize, block_cols: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(GrimError::Alpha(alpha));
        }
        if block_rows == 0 || block_cols == 0 {
            return Err(GrimError::Divisibility("block grid must be non-empty".into()));
        }
        Ok(Self {
            alpha,
            block_rows,
            block_cols,
        })
    }

    /// Constraint for a pruning rate `r`, i.e. `alpha = 1 - 1/r`.
    pub fn from_rate(rate: f64, block_rows: usize, block_cols: usize) -> Result<Self> {
        if !(rate >= 1.0) {
            return Err(GrimError::Config(format!("pruning rate must be >= 1, got {rate}")));
        }
        Self::new(1.0 - 1.0 / rate, block_rows, block_cols)
    }

    /// Constraint whose grid yields `block_h x block_w` blocks on a
    /// `rows x cols` matrix.
    pub fn for_block_size(
        alpha: f64,
        rows: usize,
        cols: usize,
        block_h: usize,
        block_w: usize,
    ) -> Result<Self> {
        let p = BlockPartition::from_block_size(rows, cols, block_h, block_w)?;
        Self::new(alpha, p.n, p.m)
    }

    pub fn bind(&self, rows: usize, cols: usize) -> Result<BlockPartition> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(GrimError::Alpha(self.alpha));
        }
        BlockPartition::new(rows, cols, self.block_rows, self.block_cols)
    }

    /// Smallest pruned-element count whose ratio to `total` reaches alpha.
    pub fn target_pruned(&self, total: usize) -> usize {
        let t = total as f64;
        let mut k = ((self.alpha * t).ceil() as usize).min(total);
        while k < total && (k as f64) / t < self.alpha {
            k += 1;
        }
        while k > 0 && ((k - 1) as f64) / t >= self.alpha {
            k -= 1;
        }
        k
    }
}

/// An `n x m` grid of equally sized blocks over a `rows x cols` matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BlockPartition {
    pub rows: usize,
    pub cols: usize,
    pub n: usize,
    pub m: usize,
    pub block_h: usize,
    pub block_w: usize,
}

impl BlockPartition {
    pub fn new(rows: usize, cols: usize, n: usize, m: usize) -> Result<Self> {
        if n == 0 || m == 0 || rows == 0 || cols == 0 || rows % n != 0 || cols % m != 0 {
            return Err(GrimError::Divisibility(format!(
                "{n}x{m} block grid does not divide {rows}x{cols} matrix"
            )));
        }
        Ok(Self {
            rows,
            cols,
            n,
            m,
            block_h: rows / n,
            block_w: cols / m,
        })
    }

    pub fn from_block_size(rows: usize, cols: usize, block_h: usize, block_w: usize) -> Result<Self> {
        if block_h == 0 || block_w == 0 || rows % block_h != 0 || cols % block_w != 0 {
            return Err(GrimError::Divisibility(format!(
                "{block_h}x{block_w} blocks do not divide {rows}x{cols} matrix"
            )));
        }
        Self::new(rows, cols, rows / block_h, cols / block_w)
    }

    #[inline]
    pub fn block_count(&self) -> usize {
        self.n * self.m
    }

    #[inline]
    pub fn total(&self) -> usize {
        self.rows * self.cols
    }

    /// Block grid coordinates of block index `b` (row-major over the grid).
    #[inline]
    pub fn block_coords(&self, b: usize) -> (usize, usize) {
        (b / self.m, b % self.m)
    }

    /// First matrix row and column covered by block `b`.
    #[inline]
    pub fn block_origin(&self, b: usize) -> (usize, usize) {
        let (bi, bj) = self.block_coords(b);
        (bi * self.block_h, bj * self.block_w)
    }
}

/// Per-block kept rows and columns. A weight survives iff both its local row
/// and local column are kept in its block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BcrMask {
    partition: BlockPartition,
    kept_rows: Vec<Vec<bool>>,
    kept_cols: Vec<Vec<bool>>,
}

impl BcrMask {
    /// Keeps every weight.
    pub fn full(partition: BlockPartition) -> Self {
        let b = partition.block_count();
        Self {
            partition,
            kept_rows: vec![vec![true; partition.block_h]; b],
            kept_cols: vec![vec![true; partition.block_w]; b],
        }
    }

    pub fn from_parts(
        partition: BlockPartition,
        kept_rows: Vec<Vec<bool>>,
        kept_cols: Vec<Vec<bool>>,
    ) -> Result<Self> {
        let b = partition.block_count();
        if kept_rows.len() != b
            || kept_cols.len() != b
            || kept_rows.iter().any(|r| r.len() != partition.block_h)
            || kept_cols.iter().any(|c| c.len() != partition.block_w)
        {
            return Err(GrimError::shape("mask parts do not match the partition"));
        }
        Ok(Self {
            partition,
            kept_rows,
            kept_cols,
        })
    }

    /// Smallest BCR pattern covering every non-zero of `x`: in each block a
    /// row (column) is kept iff it holds a non-zero inside the block.
    pub fn covering(x: &DenseMatrix, partition: BlockPartition) -> Result<Self> {
        x.expect_shape((partition.rows, partition.cols))?;
        let mut mask = Self::full(partition);
        for b in 0..partition.block_count() {
            let (r0, c0) = partition.block_origin(b);
            for i in 0..partition.block_h {
                mask.kept_rows[b][i] =
                    (0..partition.block_w).any(|j| x.get(r0 + i, c0 + j).to_bits() != 0);
            }
            for j in 0..partition.block_w {
                mask.kept_cols[b][j] =
                    (0..partition.block_h).any(|i| x.get(r0 + i, c0 + j).to_bits() != 0);
            }
        }
        Ok(mask)
    }

    #[inline]
    pub fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    pub fn kept_rows(&self, block: usize) -> &[bool] {
        &self.kept_rows[block]
    }

    pub fn kept_cols(&self, block: usize) -> &[bool] {
        &self.kept_cols[block]
    }

    pub(crate) fn kept_rows_mut(&mut self, block: usize) -> &mut [bool] {
        &mut self.kept_rows[block]
    }

    pub(crate) fn kept_cols_mut(&mut self, block: usize) -> &mut [bool] {
        &mut self.kept_cols[block]
    }

    #[inline]
    pub fn is_kept(&self, r: usize, c: usize) -> bool {
        let p = &self.partition;
        let b = (r / p.block_h) * p.m + c / p.block_w;
        self.kept_rows[b][r % p.block_h] && self.kept_cols[b][c % p.block_w]
    }

    /// Kept weights in block `b`.
    pub fn block_kept(&self, b: usize) -> usize {
        let r = self.kept_rows[b].iter().filter(|&&k| k).count();
        let c = self.kept_cols[b].iter().filter(|&&k| k).count();
        r * c
    }

    pub fn kept_count(&self) -> usize {
        (0..self.partition.block_count()).map(|b| self.block_kept(b)).sum()
    }

    pub fn pruned_count(&self) -> usize {
        self.partition.total() - self.kept_count()
    }

    pub fn zero_fraction(&self) -> f64 {
        self.pruned_count() as f64 / self.partition.total() as f64
    }

    /// Ratio of original to remaining weights (infinite when nothing is kept).
    pub fn pruning_rate(&self) -> f64 {
        self.partition.total() as f64 / self.kept_count() as f64
    }

    /// Sorted global column indices kept in row `r`.
    pub fn row_columns(&self, r: usize) -> Vec<usize> {
        let p = &self.partition;
        let bi = r / p.block_h;
        let li = r % p.block_h;
        let mut out = Vec::new();
        for bj in 0..p.m {
            let b = bi * p.m + bj;
            if !self.kept_rows[b][li] {
                continue;
            }
            let c0 = bj * p.block_w;
            out.extend(
                self.kept_cols[b]
                    .iter()
                    .enumerate()
                    .filter(|(_, &k)| k)
                    .map(|(j, _)| c0 + j),
            );
        }
        out
    }

    /// Columns of the matrix with no kept weight at all.
    pub fn dead_columns(&self) -> Vec<usize> {
        let p = &self.partition;
        (0..p.cols)
            .filter(|&c| {
                let bj = c / p.block_w;
                let lj = c % p.block_w;
                (0..p.n).all(|bi| {
                    let b = bi * p.m + bj;
                    !self.kept_cols[b][lj] || !self.kept_rows[b].iter().any(|&k| k)
                })
            })
            .collect()
    }

    /// `x` with every pruned position set to `+0.0` and kept positions copied
    /// bit for bit.
    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        x.expect_shape((self.partition.rows, self.partition.cols))?;
        Ok(DenseMatrix::from_fn(x.rows(), x.cols(), |r, c| {
            if self.is_kept(r, c) {
                x.get(r, c)
            } else {
                0.0
            }
        }))
    }

    /// Whether every non-zero of `x` sits at a kept position.
    pub fn covers(&self, x: &DenseMatrix) -> bool {
        x.shape() == (self.partition.rows, self.partition.cols)
            && (0..x.rows()).all(|r| {
                (0..x.cols()).all(|c| self.is_kept(r, c) || x.get(r, c).to_bits() == 0)
            })
    }

    /// Plain-text form: a header line, the geometry, then one line per block
    /// with kept rows and columns as `0`/`1` strings.
    pub fn to_text(&self) -> String {
        let p = &self.partition;
        let mut s = String::from("bcrmask 1\n");
        let _ = writeln!(s, "shape {} {} grid {} {}", p.rows, p.cols, p.n, p.m);
        let bits = |v: &[bool]| v.iter().map(|&k| if k { '1' } else { '0' }).collect::<String>();
        for b in 0..p.block_count() {
            let (bi, bj) = p.block_coords(b);
            let _ = writeln!(
                s,
                "block {bi} {bj} {} {}",
                bits(&self.kept_rows[b]),
                bits(&self.kept_cols[b])
            );
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: &str| GrimError::Format(format!("mask: {msg}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("bcrmask 1") {
            return Err(bad("missing `bcrmask 1` header"));
        }
        let geo: Vec<&str> = lines
            .next()
            .ok_or_else(|| bad("missing geometry"))?
            .split_whitespace()
            .collect();
        if geo.len() != 6 || geo[0] != "shape" || geo[3] != "grid" {
            return Err(bad("malformed geometry line"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer"));
        let partition = BlockPartition::new(num(geo[1])?, num(geo[2])?, num(geo[4])?, num(geo[5])?)?;
        let mut mask = Self::full(partition);
        let mut seen = vec![false; partition.block_count()];
        let parse_bits = |s: &str, len: usize| -> Result<Vec<bool>> {
            if s.len() != len {
                return Err(bad("bit string has wrong length"));
            }
            s.chars()
                .map(|ch| match ch {
                    '1' => Ok(true),
                    '0' => Ok(false),
                    _ => Err(bad("bit strings hold only 0 and 1")),
                })
                .collect()
        };
        for line in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 || f[0] != "block" {
                return Err(bad("malformed block line"));
            }
            let (bi, bj) = (num(f[1])?, num(f[2])?);
            if bi >= partition.n || bj >= partition.m {
                return Err(bad("block index out of range"));
            }
            let b = bi * partition.m + bj;
            mask.kept_rows[b] = parse_bits(f[3], partition.block_h)?;
            mask.kept_cols[b] = parse_bits(f[4], partition.block_w)?;
            seen[b] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(bad("not every block is listed"));
        }
        Ok(mask)
    }
}

/// Average remaining weights per block for a `rows x cols` matrix on an
/// `n x m` grid pruned at `pruning_rate`.
pub fn sparsity_accounting(rows: usize, cols: usize, n: usize, m: usize, pruning_rate: f64) -> f64 {
    (rows * cols) as f64 / (pruning_rate * (n * m) as f64)
}

/// True when `x` already has BCR structure with zero ratio at least
/// `c.alpha` on the constraint's grid.
pub fn is_feasible(x: &DenseMatrix, c: &SparsityConstraint) -> Result<bool> {
    let p = c.bind(x.rows(), x.cols())?;
    let mask = BcrMask::covering(x, p)?;
    Ok(mask.pruned_count() >= c.target_pruned(p.total()))
}
